//! Desk-scale training harness: Adam, the epoch loop, metrics, and rolling
//! checkpoints with bit-exact resume.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{restore_model, snapshot_model, Checkpoint};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::model::SitModel;
use crate::tensor::{el, Element, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with moment buffers keyed by parameter name, so state survives the
/// tensor replacement that each update performs. Buffers are kept in the
/// element precision of the model; for `f32` training this makes a
/// save/load/resume cycle reproduce the uninterrupted run bit for bit.
pub struct Adam<E: Element> {
    pub cfg: AdamConfig,
    steps: u64,
    slots: HashMap<String, (Vec<E>, Vec<E>)>,
}

impl<E: Element> Adam<E> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, steps: 0, slots: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update over every parameter the walker yields. Parameters without
    /// an accumulated gradient are left untouched.
    pub fn step_visited(&mut self, visit: impl FnOnce(&mut dyn FnMut(String, &mut Tensor<E>))) {
        self.steps += 1;
        let b1 = el::<E>(self.cfg.beta1);
        let b2 = el::<E>(self.cfg.beta2);
        let one = E::one();
        let lr = el::<E>(self.cfg.lr);
        let eps = el::<E>(self.cfg.eps);
        let c1 = el::<E>(1.0 - self.cfg.beta1.powi(self.steps as i32));
        let c2 = el::<E>(1.0 - self.cfg.beta2.powi(self.steps as i32));
        let slots = &mut self.slots;
        visit(&mut |name, t| {
            let Some(g) = t.grad() else { return };
            let (m, v) = slots
                .entry(name)
                .or_insert_with(|| (vec![E::zero(); g.len()], vec![E::zero(); g.len()]));
            let mut data = t.data().to_vec();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            *t = Tensor::param(t.shape(), data);
        });
    }

    pub fn step(&mut self, model: &mut SitModel<E>) {
        self.step_visited(|f| model.visit_params(f));
    }

    /// Appends the moment buffers to a checkpoint under `optim.m.*` and
    /// `optim.v.*` names, which the model restore path ignores.
    pub fn export(&self, ck: &mut Checkpoint) {
        let mut names: Vec<&String> = self.slots.keys().collect();
        names.sort();
        for name in names {
            let (m, v) = &self.slots[name];
            ck.push(format!("optim.m.{name}"), &Tensor::from_vec(&[m.len()], m.clone()));
            ck.push(format!("optim.v.{name}"), &Tensor::from_vec(&[v.len()], v.clone()));
        }
    }

    pub fn import(&mut self, ck: &Checkpoint, steps: u64) -> Result<()> {
        let mut m: HashMap<String, Vec<E>> = HashMap::new();
        let mut v: HashMap<String, Vec<E>> = HashMap::new();
        for e in &ck.tensors {
            let vals = || e.data.iter().map(|&x| el::<E>(x as f64)).collect::<Vec<E>>();
            if let Some(rest) = e.name.strip_prefix("optim.m.") {
                m.insert(rest.to_string(), vals());
            } else if let Some(rest) = e.name.strip_prefix("optim.v.") {
                v.insert(rest.to_string(), vals());
            }
        }
        let mut slots = HashMap::new();
        for (name, mbuf) in m {
            let vbuf = v.remove(&name).ok_or_else(|| {
                Error::Checkpoint(format!("optimizer state for `{name}` lacks its variance buffer"))
            })?;
            slots.insert(name, (mbuf, vbuf));
        }
        if let Some(name) = v.into_keys().next() {
            return Err(Error::Checkpoint(format!(
                "optimizer state for `{name}` lacks its mean buffer"
            )));
        }
        self.steps = steps;
        self.slots = slots;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    1e-3
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 25, batch_size: 64, lr: default_lr(), seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub rotated_test_acc: Option<f64>,
    pub wall_time_s: f64,
}

pub struct TrainSets<'a> {
    pub train: &'a ImageSet,
    pub test: &'a ImageSet,
    pub rotated_test: Option<&'a ImageSet>,
}

/// Checkpoint metadata written next to the tensors: enough to refuse a resume
/// into the wrong architecture and to continue the metrics history.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainMeta {
    model_config: serde_json::Value,
    train_seed: u64,
    optim_steps: u64,
    metrics: Vec<EpochMetrics>,
}

/// All randomness inside an epoch (batch order, dropout masks) flows from a
/// generator derived from the run seed and the epoch index alone, so a resumed
/// run replays exactly the batches the uninterrupted run would have seen.
fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add((epoch + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn count_correct<E: Element>(logits: &[E], classes: usize, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(row, &label)| {
            let lane = &logits[row * classes..(row + 1) * classes];
            let mut best = 0;
            for (j, &v) in lane.iter().enumerate() {
                if v > lane[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

/// Classification accuracy with dropout disabled.
pub fn accuracy<E: Element>(model: &SitModel<E>, set: &ImageSet, batch_size: usize) -> f64 {
    assert!(!set.is_empty(), "accuracy over an empty set");
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = set.batch::<E>(chunk);
        let logits = model.forward(&x, None);
        correct += count_correct(logits.data(), logits.shape()[1], &labels);
    }
    correct as f64 / set.len() as f64
}

pub fn write_metrics_csv(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut s = String::from("epoch,train_loss,train_acc,test_acc,rotated_test_acc,wall_time_s\n");
    for r in history {
        let rot = r.rotated_test_acc.map(|v| format!("{v:.4}")).unwrap_or_default();
        s += &format!(
            "{},{:.6},{:.4},{:.4},{rot},{:.2}\n",
            r.epoch, r.train_loss, r.train_acc, r.test_acc, r.wall_time_s
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn save_state<E: Element>(
    model: &mut SitModel<E>,
    adam: &Adam<E>,
    model_cfg: &serde_json::Value,
    cfg: &TrainConfig,
    history: &[EpochMetrics],
    path: &Path,
) -> Result<()> {
    let meta = serde_json::to_value(TrainMeta {
        model_config: model_cfg.clone(),
        train_seed: cfg.seed,
        optim_steps: adam.steps(),
        metrics: history.to_vec(),
    })?;
    let mut ck = snapshot_model(model, meta);
    adam.export(&mut ck);
    ck.save(path)
}

/// Trains the model in place and returns one metrics record per epoch,
/// including any epochs recovered from a resumed checkpoint.
///
/// With an output directory the harness writes `last.gsaw` (parameters plus
/// optimizer state) and rewrites `metrics.csv` after every epoch. `resume`
/// picks up from `last.gsaw` when present and verifies the stored model
/// configuration first; a missing checkpoint starts from scratch.
///
/// A non-finite training loss aborts with [`Error::Diverged`].
pub fn train<E: Element>(
    model: &mut SitModel<E>,
    sets: &TrainSets,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<Vec<EpochMetrics>> {
    assert!(!sets.train.is_empty(), "training needs at least one example");
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let model_cfg = serde_json::to_value(model.config())?;
    let mut history: Vec<EpochMetrics> = Vec::new();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let ckpt_path = out_dir.map(|d| d.join("last.gsaw"));
    if resume {
        if let Some(path) = ckpt_path.as_ref().filter(|p| p.exists()) {
            let ck = Checkpoint::load(path)?;
            let meta: TrainMeta = serde_json::from_value(ck.meta.clone())?;
            if meta.model_config != model_cfg {
                return Err(Error::Checkpoint(
                    "checkpoint was written for a different model configuration".into(),
                ));
            }
            restore_model(&ck, model)?;
            adam.import(&ck, meta.optim_steps)?;
            history = meta.metrics;
        }
    }

    let eval_batch = cfg.batch_size.max(64);
    for epoch in history.len()..cfg.epochs {
        let started = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch as u64);
        let mut order: Vec<usize> = (0..sets.train.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (x, labels) = sets.train.batch::<E>(chunk);
            let masks = model.sample_masks(&mut rng);
            let logits = model.forward(&x, masks.as_ref());
            let loss = logits.cross_entropy_mean(&labels);
            let loss_v = loss.item().to_f64().unwrap();
            if !loss_v.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite training loss in epoch {}",
                    epoch + 1
                )));
            }
            loss_sum += loss_v * chunk.len() as f64;
            correct += count_correct(logits.data(), logits.shape()[1], &labels);
            loss.backward();
            adam.step(model);
            model.zero_grad();
        }

        let record = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / sets.train.len() as f64,
            train_acc: correct as f64 / sets.train.len() as f64,
            test_acc: accuracy(model, sets.test, eval_batch),
            rotated_test_acc: sets.rotated_test.map(|s| accuracy(model, s, eval_batch)),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        history.push(record);

        if let Some(dir) = out_dir {
            save_state(model, &adam, &model_cfg, cfg, &history, &dir.join("last.gsaw"))?;
            write_metrics_csv(&dir.join("metrics.csv"), &history)?;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{synthetic_rot_task, SyntheticSpec, SYNTHETIC_CLASSES};
    use crate::gsa::AttentionSpec;
    use crate::grid::SymmetryClass;
    use crate::graph::GraphInit;
    use crate::model::{ImageSpec, ModelConfig, SitMode};

    /// Reference Adam trajectory computed element by element, independent of
    /// the buffered implementation.
    fn reference_adam_step(
        cfg: &AdamConfig,
        t: u64,
        w: &mut [f64],
        m: &mut [f64],
        v: &mut [f64],
        g: &[f64],
    ) {
        for i in 0..w.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / (1.0 - cfg.beta1.powi(t as i32));
            let vhat = v[i] / (1.0 - cfg.beta2.powi(t as i32));
            w[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }

    #[test]
    fn adam_matches_reference_trajectory() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut adam = Adam::<f64>::new(cfg);
        let mut w = Tensor::<f64>::param(&[3], vec![1.0, -2.0, 0.5]);
        let target = [3.0, -1.0, 0.0];

        let mut w_ref = vec![1.0, -2.0, 0.5];
        let mut m_ref = vec![0.0; 3];
        let mut v_ref = vec![0.0; 3];

        for t in 1..=7 {
            let tt = Tensor::from_vec(&[3], target.to_vec());
            let diff = w.sub(&tt);
            let loss = diff.mul(&diff).sum_all();
            loss.backward();
            let g: Vec<f64> = w.grad().unwrap();
            adam.step_visited(|f| f("w".into(), &mut w));

            reference_adam_step(&cfg, t, &mut w_ref, &mut m_ref, &mut v_ref, &g);
            for i in 0..3 {
                assert!(
                    (w.data()[i] - w_ref[i]).abs() < 1e-12,
                    "step {t} param {i}: {} vs reference {}",
                    w.data()[i],
                    w_ref[i]
                );
            }
        }
        assert_eq!(adam.steps(), 7);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let mut adam = Adam::<f64>::new(cfg);
        let mut w = Tensor::<f64>::param(&[2], vec![5.0, -4.0]);
        let target = Tensor::from_vec(&[2], vec![1.5, 2.5]);
        for _ in 0..600 {
            let diff = w.sub(&target);
            let loss = diff.mul(&diff).sum_all();
            loss.backward();
            adam.step_visited(|f| f("w".into(), &mut w));
        }
        for (got, want) in w.data().iter().zip(target.data()) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
    }

    #[test]
    fn adam_skips_parameters_without_gradient() {
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        let mut w = Tensor::<f64>::param(&[2], vec![1.0, 2.0]);
        adam.step_visited(|f| f("w".into(), &mut w));
        assert_eq!(w.data(), &[1.0, 2.0]);
        assert!(adam.slots.is_empty());
    }

    /// Small 2x2-window config so harness tests run in milliseconds. Plain
    /// attention at the global stage keeps the loss landscape benign.
    fn tiny_model_cfg(side: usize, class_dropout: f64) -> ModelConfig {
        ModelConfig {
            mode: SitMode::Sit,
            image: ImageSpec { rows: side, cols: side, channels: 1 },
            stem: None,
            local_window: side / 2,
            local_patch: side / 2,
            dim_local: 8,
            dim_global: 8,
            local_layers: 1,
            global_layers: 1,
            local_attention: AttentionSpec { gk: true, gv: true, ..AttentionSpec::plain(2) },
            global_attention: AttentionSpec::plain(2),
            local_variant: Some(SymmetryClass::DihedralDistance),
            global_variant: None,
            pos_embed: false,
            num_classes: SYNTHETIC_CLASSES,
            graph_init: GraphInit::NearIdentity { std: 0.02 },
            class_dropout,
        }
    }

    fn tiny_task() -> crate::data::SyntheticTask {
        synthetic_rot_task(&SyntheticSpec {
            side: 8,
            train: 48,
            test: 24,
            noise: 0.05,
            seed: 11,
        })
    }

    #[test]
    fn harness_learns_and_logs() {
        let task = tiny_task();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = SitModel::<f32>::new(tiny_model_cfg(8, 0.0), &mut rng).unwrap();
        let sets = TrainSets {
            train: &task.train,
            test: &task.test,
            rotated_test: Some(&task.rotated_test),
        };
        let cfg = TrainConfig { epochs: 4, batch_size: 16, lr: 3e-3, seed: 5 };
        let dir = tempfile::tempdir().unwrap();
        let history = train(&mut model, &sets, &cfg, Some(dir.path()), false).unwrap();

        assert_eq!(history.len(), 4);
        assert!(history.iter().all(|r| r.train_loss.is_finite()));
        let first = history.first().unwrap();
        let last = history.last().unwrap();
        assert!(
            last.train_loss < first.train_loss,
            "loss should drop on a learnable toy task: {} -> {}",
            first.train_loss,
            last.train_loss
        );
        assert!(last.rotated_test_acc.is_some());
        for r in &history {
            assert!((0.0..=1.0).contains(&r.train_acc));
            assert!((0.0..=1.0).contains(&r.test_acc));
        }

        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,train_loss,train_acc,test_acc,rotated_test_acc,wall_time_s"
        );
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 4);
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<&str> = row.split(',').collect();
            assert_eq!(cells.len(), 6);
            assert_eq!(cells[0], (i + 1).to_string());
            assert!(cells[1].parse::<f64>().unwrap().is_finite());
            assert!(!cells[4].is_empty(), "rotated accuracy column should be filled");
        }
        assert!(dir.path().join("last.gsaw").exists());
    }

    /// The crux of the checkpoint design: two epochs, a process death, and a
    /// resume must land on exactly the floats an uninterrupted run produces.
    #[test]
    fn resume_is_bit_exact() {
        let task = tiny_task();
        let sets = TrainSets {
            train: &task.train,
            test: &task.test,
            rotated_test: None,
        };
        // Dropout on: the epoch rng must also replay mask draws.
        let model_cfg = tiny_model_cfg(8, 0.2);
        let cfg = TrainConfig { epochs: 3, batch_size: 16, lr: 3e-3, seed: 9 };

        let dir_full = tempfile::tempdir().unwrap();
        let mut straight =
            SitModel::<f32>::new(model_cfg.clone(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let full = train(&mut straight, &sets, &cfg, Some(dir_full.path()), false).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut first =
            SitModel::<f32>::new(model_cfg.clone(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let short = TrainConfig { epochs: 2, ..cfg.clone() };
        train(&mut first, &sets, &short, Some(dir.path()), false).unwrap();
        drop(first);

        // Fresh process: new model object, parameters come from the file.
        let mut resumed =
            SitModel::<f32>::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(999)).unwrap();
        let resumed_history = train(&mut resumed, &sets, &cfg, Some(dir.path()), true).unwrap();

        assert_eq!(resumed_history.len(), 3);
        assert_eq!(full.len(), 3);
        for (a, b) in full.iter().zip(&resumed_history) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.train_loss, b.train_loss, "epoch {} loss drifted", a.epoch);
            assert_eq!(a.test_acc, b.test_acc);
        }

        let ck_full = snapshot_model(&mut straight, serde_json::json!({}));
        let ck_resumed = snapshot_model(&mut resumed, serde_json::json!({}));
        assert_eq!(ck_full.tensors.len(), ck_resumed.tensors.len());
        for (a, b) in ck_full.tensors.iter().zip(&ck_resumed.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data, b.data, "parameter {} is not bit-identical", a.name);
        }

        let saved = Checkpoint::load(dir.path().join("last.gsaw")).unwrap();
        let meta: TrainMeta = serde_json::from_value(saved.meta.clone()).unwrap();
        assert_eq!(meta.metrics.len(), 3);
        assert!(saved.tensors.iter().any(|t| t.name.starts_with("optim.m.")));
    }

    #[test]
    fn resume_rejects_other_architecture() {
        let task = tiny_task();
        let sets = TrainSets { train: &task.train, test: &task.test, rotated_test: None };
        let cfg = TrainConfig { epochs: 1, batch_size: 16, lr: 1e-3, seed: 0 };
        let dir = tempfile::tempdir().unwrap();

        let mut model =
            SitModel::<f32>::new(tiny_model_cfg(8, 0.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        train(&mut model, &sets, &cfg, Some(dir.path()), false).unwrap();

        let mut other_cfg = tiny_model_cfg(8, 0.0);
        other_cfg.dim_global = 16;
        let mut other =
            SitModel::<f32>::new(other_cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let err = train(&mut other, &sets, &cfg, Some(dir.path()), true).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "got {err:?}");
    }

    #[test]
    fn non_finite_loss_reports_divergence() {
        let task = tiny_task();
        let mut poisoned = task.train.clone();
        poisoned.data[0] = f32::NAN;
        let sets = TrainSets { train: &poisoned, test: &task.test, rotated_test: None };
        let cfg = TrainConfig { epochs: 1, batch_size: 48, lr: 1e-3, seed: 0 };
        let mut model =
            SitModel::<f32>::new(tiny_model_cfg(8, 0.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let err = train(&mut model, &sets, &cfg, None, false).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)), "got {err:?}");
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let task = tiny_task();
        let mut model =
            SitModel::<f32>::new(tiny_model_cfg(8, 0.0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let acc = accuracy(&model, &task.test, 8);
        assert!((0.0..=1.0).contains(&acc));
        // Same inputs, same weights: accuracy is a pure function.
        assert_eq!(acc, accuracy(&mut model, &task.test, 8));
    }
}
