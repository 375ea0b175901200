//! Trainable weights shared across vertex pairs of the same symmetry class.
//!
//! A [`GraphWeights`] stores one scalar per (channel, edge class) and expands
//! to a dense `[channels, P, P]` stack on demand. Because tied entries come
//! from a single parameter, the expansion is a differentiable gather and the
//! backward pass accumulates every tied position into its class. The dense
//! form multiplies feature matrices; the same parameters can alternatively be
//! laid out as a depthwise convolution kernel when the class variant keys on
//! relative offsets, which is the bridge between the matrix picture and the
//! sliding-window picture.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::EdgeClassMap;
use crate::tensor::{el, Element, Tensor};

/// How a weight matrix enters the surrounding computation. The role fixes the
/// neutral element used by identity initialization: a multiplying matrix is
/// neutral at the identity matrix, a pointwise mask at all-ones, an additive
/// bias at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRole {
    Matmul,
    Hadamard,
    Additive,
}

impl WeightRole {
    fn neutral(self, diagonal: bool) -> f64 {
        match self {
            WeightRole::Matmul => {
                if diagonal {
                    1.0
                } else {
                    0.0
                }
            }
            WeightRole::Hadamard => 1.0,
            WeightRole::Additive => 0.0,
        }
    }
}

/// Initialization for class weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphInit {
    /// Exactly the role's neutral element; the layer starts as a no-op.
    Identity,
    /// Neutral element plus Gaussian noise of the given deviation.
    NearIdentity { std: f64 },
    /// Pure Gaussian noise.
    Random { std: f64 },
}

/// Per-class weights over the vertex pairs of a grid. Cloning shares the
/// underlying parameter tensor.
#[derive(Clone)]
pub struct GraphWeights<E: Element> {
    classes: Rc<EdgeClassMap>,
    role: WeightRole,
    /// `[channels, num_classes]`, trainable.
    weight: Tensor<E>,
}

impl<E: Element> GraphWeights<E> {
    pub fn new(
        channels: usize,
        classes: Rc<EdgeClassMap>,
        role: WeightRole,
        init: GraphInit,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(channels > 0, "graph weights need at least one channel");
        let ncls = classes.num_classes();
        let diag = classes.diagonal_classes();
        let mut base = vec![E::zero(); channels * ncls];
        for cls in 0..ncls {
            let v = el::<E>(role.neutral(diag.contains(&(cls as u32))));
            for ch in 0..channels {
                base[ch * ncls + cls] = v;
            }
        }
        let std = match init {
            GraphInit::Identity => 0.0,
            GraphInit::NearIdentity { std } | GraphInit::Random { std } => std,
        };
        if matches!(init, GraphInit::Random { .. }) {
            base.fill(E::zero());
        }
        if std > 0.0 {
            for v in base.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += el::<E>(z * std);
            }
        }
        GraphWeights {
            classes,
            role,
            weight: Tensor::param(&[channels, ncls], base),
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn p(&self) -> usize {
        self.classes.p()
    }

    pub fn role(&self) -> WeightRole {
        self.role
    }

    pub fn classes(&self) -> &Rc<EdgeClassMap> {
        &self.classes
    }

    pub fn weight(&self) -> &Tensor<E> {
        &self.weight
    }

    /// Visits the trainable tensor under `<prefix>.weight`.
    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
    }

    /// Dense `[channels, P, P]` stack, optionally with a `[num_classes]`
    /// multiplier applied to the class weights first (see [`dropout_mask`]).
    pub fn materialize(&self, class_mask: Option<&Tensor<E>>) -> Tensor<E> {
        let w = match class_mask {
            Some(m) => self.weight.mul_rowvec(m),
            None => self.weight.clone(),
        };
        let table: Vec<usize> = self.classes.table().iter().map(|&c| c as usize).collect();
        let p = self.p();
        w.index_select(1, &table).reshape(&[self.channels(), p, p])
    }

    /// Applies the dense stack to `[B, P, channels]` features, channel by
    /// channel: `out[b, i, c] = sum_j M[c, i, j] * x[b, j, c]`.
    pub fn apply_dense(&self, x: &Tensor<E>, class_mask: Option<&Tensor<E>>) -> Tensor<E> {
        let s = x.shape();
        assert_eq!(s.len(), 3, "apply_dense input must be [batch, P, channels]");
        assert_eq!(s[1], self.p(), "position count mismatch");
        assert_eq!(s[2], self.channels(), "channel count mismatch");
        let m = self.materialize(class_mask);
        // [B, P, C] -> [C, P, B], one [P, P] matmul per channel, back again.
        let xc = x.permute(&[2, 1, 0]);
        m.matmul(&xc).permute(&[2, 1, 0])
    }

    /// The same parameters as a depthwise convolution kernel of odd side
    /// `side`, valid only for class variants keyed on relative offsets.
    /// Kernel taps whose offset never occurs on the grid stay zero.
    pub fn conv_kernel(&self, side: usize) -> Result<Tensor<E>> {
        if side % 2 == 0 {
            return Err(Error::config(format!(
                "conv kernel side must be odd, got {side}"
            )));
        }
        let pad = (side / 2) as i64;
        let mut idx = Vec::with_capacity(side * side);
        let mut mask = Vec::with_capacity(side * side);
        for u in 0..side as i64 {
            for v in 0..side as i64 {
                match self.classes.offset_class(u - pad, v - pad)? {
                    Some(cls) => {
                        idx.push(cls as usize);
                        mask.push(E::one());
                    }
                    None => {
                        idx.push(0);
                        mask.push(E::zero());
                    }
                }
            }
        }
        let mask = Tensor::from_vec(&[side * side], mask);
        Ok(self
            .weight
            .index_select(1, &idx)
            .mul_rowvec(&mask)
            .reshape(&[self.channels(), side, side]))
    }

    /// Kernel side that captures every offset the grid can produce.
    pub fn full_kernel_side(&self) -> usize {
        let g = self.classes.grid();
        2 * g.rows.max(g.cols) - 1
    }

    /// Applies the weights as a depthwise convolution over `[B, C, H, W]`.
    pub fn apply_conv(&self, x: &Tensor<E>, side: usize) -> Result<Tensor<E>> {
        let kernel = self.conv_kernel(side)?;
        Ok(x.conv2d_depthwise(&kernel))
    }
}

/// Per-class keep/drop multipliers: dropped classes are zero, survivors are
/// scaled by `1 / (1 - p)` so the expectation is unchanged. Dropping a class
/// removes that edge bucket from the whole grid at once.
pub fn dropout_mask<E: Element>(num_classes: usize, p: f64, rng: &mut impl Rng) -> Tensor<E> {
    assert!((0.0..1.0).contains(&p), "drop probability must be in [0, 1)");
    let keep = el::<E>(1.0 / (1.0 - p));
    let data = (0..num_classes)
        .map(|_| {
            if rng.gen::<f64>() < p {
                E::zero()
            } else {
                keep
            }
        })
        .collect();
    Tensor::from_vec(&[num_classes], data)
}
