//! Datasets for the desk-scale harness: a synthetic rotation task whose class
//! signal survives quarter turns while its position cue does not, and a
//! loader for the CIFAR-10 binary format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{el, Element, Tensor};

// ===========================================================================
// Image sets
// ===========================================================================

/// A labeled stack of images held as flat `f32` planes.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    /// `len * channels * rows * cols` values, image-major.
    pub data: Vec<f32>,
    pub labels: Vec<u8>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn plane(&self) -> usize {
        self.channels * self.rows * self.cols
    }

    /// Assembles the images at `idx` into a `[B, C, H, W]` batch plus labels.
    pub fn batch<E: Element>(&self, idx: &[usize]) -> (Tensor<E>, Vec<usize>) {
        let plane = self.plane();
        let mut data = Vec::with_capacity(idx.len() * plane);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let at = i * plane;
            data.extend(self.data[at..at + plane].iter().map(|&v| el::<E>(v as f64)));
            labels.push(self.labels[i] as usize);
        }
        let x = Tensor::from_vec(&[idx.len(), self.channels, self.rows, self.cols], data);
        (x, labels)
    }

    /// First `n` images (everything when `n` exceeds the set).
    pub fn take(&self, n: usize) -> ImageSet {
        let n = n.min(self.len());
        ImageSet {
            rows: self.rows,
            cols: self.cols,
            channels: self.channels,
            data: self.data[..n * self.plane()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// The image at `i` rotated by `k` quarter turns (square images only).
    pub fn rotated_image(&self, i: usize, k: u8) -> Vec<f32> {
        assert_eq!(self.rows, self.cols, "rotation needs square images");
        let side = self.rows;
        let src = &self.data[i * self.plane()..(i + 1) * self.plane()];
        let mut out = vec![0.0f32; src.len()];
        for ch in 0..self.channels {
            let base = ch * side * side;
            for r in 0..side {
                for c in 0..side {
                    let (sr, sc) = match k % 4 {
                        0 => (r, c),
                        1 => (side - 1 - c, r),
                        2 => (side - 1 - r, side - 1 - c),
                        _ => (c, side - 1 - r),
                    };
                    out[base + r * side + c] = src[base + sr * side + sc];
                }
            }
        }
        out
    }

    /// A copy with every image rotated by its own random 1-3 quarter turns.
    pub fn rotated_copy(&self, seed: u64) -> (ImageSet, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let turns: Vec<u8> = (0..self.len()).map(|_| rng.gen_range(1..4u8)).collect();
        let mut data = Vec::with_capacity(self.data.len());
        for (i, &k) in turns.iter().enumerate() {
            data.extend(self.rotated_image(i, k));
        }
        let set = ImageSet {
            rows: self.rows,
            cols: self.cols,
            channels: self.channels,
            data,
            labels: self.labels.clone(),
        };
        (set, turns)
    }
}

// ===========================================================================
// Synthetic rotation task
// ===========================================================================

/// Four classes of concentric ripples. The class is the radial frequency, a
/// cue that survives any quarter turn; the ripple center sits in the top-left
/// quadrant, a position cue that rotations destroy. A model keying on
/// position learns the training distribution but loses it on rotated tests.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub side: usize,
    pub train: usize,
    pub test: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { side: 16, train: 5000, test: 1000, noise: 0.25, seed: 0 }
    }
}

pub const SYNTHETIC_CLASSES: usize = 4;

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub train: ImageSet,
    pub test: ImageSet,
    pub rotated_test: ImageSet,
    /// Quarter turns applied per rotated test image.
    pub rotated_quarter_turns: Vec<u8>,
    pub num_classes: usize,
}

fn ripple_image(side: usize, label: usize, rng: &mut impl Rng, noise: f64) -> Vec<f32> {
    // frequencies far enough apart that one ring count never mimics another
    let freq = 0.55 + 0.45 * label as f64;
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let lo = side / 5;
    let cr = rng.gen_range(lo..lo + side / 4) as f64;
    let cc = rng.gen_range(lo..lo + side / 4) as f64;
    let sigma = side as f64 * 0.28;
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let d = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt();
            let v = (freq * d + phase).cos() * (-d * d / (2.0 * sigma * sigma)).exp();
            let n: f64 = rng.sample(StandardNormal);
            out.push((v + noise * n) as f32);
        }
    }
    out
}

fn ripple_set(spec: &SyntheticSpec, count: usize, rng: &mut impl Rng) -> ImageSet {
    let mut data = Vec::with_capacity(count * spec.side * spec.side);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % SYNTHETIC_CLASSES;
        data.extend(ripple_image(spec.side, label, rng, spec.noise));
        labels.push(label as u8);
    }
    ImageSet {
        rows: spec.side,
        cols: spec.side,
        channels: 1,
        data,
        labels,
    }
}

pub fn synthetic_rot_task(spec: &SyntheticSpec) -> SyntheticTask {
    assert!(spec.side >= 8, "ripples need room; use a side of at least 8");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = ripple_set(spec, spec.train, &mut rng);
    let test = ripple_set(spec, spec.test, &mut rng);
    let (rotated_test, rotated_quarter_turns) = test.rotated_copy(spec.seed ^ 0x5157);
    SyntheticTask {
        train,
        test,
        rotated_test,
        rotated_quarter_turns,
        num_classes: SYNTHETIC_CLASSES,
    }
}

// ===========================================================================
// CIFAR-10 binary loader
// ===========================================================================

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

fn read_cifar_file(path: &Path, data: &mut Vec<f32>, labels: &mut Vec<u8>) -> Result<()> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "{}: length {} is not a multiple of the {CIFAR_RECORD}-byte record",
            path.display(),
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Data(format!(
                "{}: label {} out of range",
                path.display(),
                rec[0]
            )));
        }
        labels.push(rec[0]);
        // bytes are already channel-planar RGB; center to [-0.5, 0.5]
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0 - 0.5));
    }
    Ok(())
}

/// Loads the CIFAR-10 binary release from `dir`: `data_batch_1..5.bin` for
/// training and `test_batch.bin` for testing.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(ImageSet, ImageSet)> {
    let dir = dir.as_ref();
    let mut train_data = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        read_cifar_file(
            &dir.join(format!("data_batch_{i}.bin")),
            &mut train_data,
            &mut train_labels,
        )?;
    }
    let mut test_data = Vec::new();
    let mut test_labels = Vec::new();
    read_cifar_file(&dir.join("test_batch.bin"), &mut test_data, &mut test_labels)?;
    let mk = |data, labels| ImageSet {
        rows: CIFAR_SIDE,
        cols: CIFAR_SIDE,
        channels: 3,
        data,
        labels,
    };
    Ok((mk(train_data, train_labels), mk(test_data, test_labels)))
}
