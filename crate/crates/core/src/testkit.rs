//! Shared machinery for symmetry checking: row/pixel permutation helpers,
//! expected-behavior rules for a model configuration, and a serializable
//! report produced by sweeping transforms over freshly seeded models.
//!
//! Positive checks assert invariance to double precision; negative controls
//! assert that transforms outside the declared group visibly move the output.
//! A claim that cannot fail is not evidence, so every report carries both.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{GridSpec, PermLabel, SymmetryPermutation};
use crate::gsa::{AttentionSpec, ClassMasks, GsaLayer};
use crate::model::{Geometry, ModelConfig, SitModel};
use crate::tensor::{max_abs_diff, Element, Tensor};

/// Largest output move an invariance claim may show (double precision).
pub const INVARIANCE_TOL: f64 = 1e-10;
/// Smallest output move a negative control must show.
pub const BREAK_THRESHOLD: f64 = 1e-3;
/// Fraction of seeds on which a layer-level negative control must visibly
/// break. Model-level logit checks only require the break to appear somewhere
/// in the sweep: a token summary reads its attention row near-uniformly for
/// some weight draws, which cancels a row permutation to first order and
/// shrinks an honest break below any fixed per-seed threshold.
pub const BREAK_FRACTION: f64 = 0.95;

// ===========================================================================
// Permutation helpers
// ===========================================================================

/// Gathers rows of a `[B, T, d]` tensor: row `t` of the result is row
/// `perm[t]` of the input.
pub fn permute_rows<E: Element>(x: &Tensor<E>, perm: &[usize]) -> Tensor<E> {
    assert_eq!(x.shape()[1], perm.len(), "permutation length mismatch");
    x.index_select(1, perm)
}

/// Lifts a patch permutation to the full token layout: the summary token
/// stays at row 0, patch rows shift up by one.
pub fn extend_perm_for_token(perm: &[usize], use_token: bool) -> Vec<usize> {
    if !use_token {
        return perm.to_vec();
    }
    std::iter::once(0).chain(perm.iter().map(|&i| i + 1)).collect()
}

/// How far one attention layer is from commuting with a patch permutation:
/// `|attention(Px) - P attention(x)|_inf`.
pub fn layer_equivariance_deviation<E: Element>(
    layer: &GsaLayer<E>,
    x: &Tensor<E>,
    perm: &[usize],
    masks: &ClassMasks<E>,
) -> f64 {
    let full = extend_perm_for_token(perm, layer.use_token);
    let lhs = layer.attention(&permute_rows(x, &full), masks);
    let rhs = permute_rows(&layer.attention(x, masks), &full);
    max_abs_diff(&lhs, &rhs)
}

/// Applies a pixel permutation (gather form over row-major `H x W` slots) to
/// every channel of a `[B, C, H, W]` batch.
pub fn apply_pixel_perm<E: Element>(x: &Tensor<E>, perm: &[usize]) -> Tensor<E> {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 4, "pixel permutation input must be [B, C, H, W]");
    assert_eq!(perm.len(), s[2] * s[3], "permutation length mismatch");
    x.reshape(&[s[0], s[1], s[2] * s[3]])
        .index_select(2, perm)
        .reshape(&s)
}

/// Uniform random permutation of `0..p` avoiding everything in `excluded`.
/// Returns `None` when the draw keeps colliding (tiny `p` with a large
/// excluded set).
pub fn random_perm_outside(
    p: usize,
    excluded: &[Vec<usize>],
    rng: &mut impl Rng,
) -> Option<Vec<usize>> {
    for _ in 0..200 {
        let mut v: Vec<usize> = (0..p).collect();
        v.shuffle(rng);
        if !excluded.iter().any(|e| e == &v) {
            return Some(v);
        }
    }
    None
}

/// Every grid symmetry of `grid` that exists, as permutation vectors.
pub fn all_grid_symmetry_perms(grid: &GridSpec) -> Vec<Vec<usize>> {
    use PermLabel::*;
    [Identity, Rot90, Rot180, Rot270, HFlip, VFlip, Transpose, AntiTranspose]
        .into_iter()
        .filter_map(|l| SymmetryPermutation::from_label(l, grid).map(|s| s.perm))
        .collect()
}

// ===========================================================================
// Expected behavior of a model configuration
// ===========================================================================

fn is_plain(spec: &AttentionSpec) -> bool {
    !spec.needs_classes() && spec.rotation_layers == 0
}

/// Whether one attention stage visibly breaks `label` at the model output.
///
/// A mismatch between the label and the class structure always bends the
/// patch rows, but only `gk`/`gv` bend the token row of the same layer: the
/// triangle pass, `gq`, the score mask and the gate rewrite patch-block
/// scores the token row never reads. A patch-only break therefore reaches
/// the logits only if a later layer folds patch rows back into the token, or
/// the summary reads patch rows itself.
fn stage_breaks_label(
    spec: &AttentionSpec,
    variant: Option<crate::grid::SymmetryClass>,
    side: usize,
    layers: usize,
    patch_rows_in_summary: bool,
    label: PermLabel,
) -> bool {
    use PermLabel::*;
    if layers == 0 {
        return false;
    }
    let class_mismatch = spec.needs_classes()
        && !variant.is_some_and(|v| v.declared_labels().contains(&label));
    // Triangle passes read the third vertex of each pixel pair, which flips
    // move to the wrong corner on grids of side 3 and up. A 2x2 grid has no
    // interior to disagree about, so its full symmetry group survives.
    let rot_mismatch = spec.rotation_layers > 0
        && side >= 3
        && !matches!(label, Identity | Rot90 | Rot180 | Rot270);
    let token_visible = class_mismatch && (spec.gk || spec.gv);
    let patch_break = class_mismatch || rot_mismatch;
    let patch_reaches = layers >= 2 || patch_rows_in_summary;
    token_visible || (patch_break && patch_reaches)
}

/// Whether logits should be exactly invariant when `label` acts on the image.
pub fn model_holds_label(cfg: &ModelConfig, geo: &Geometry, label: PermLabel) -> bool {
    if cfg.pos_embed {
        return false;
    }
    if let Some(s) = &cfg.stem {
        if !s.variant.declared_labels().contains(&label) {
            return false;
        }
    }
    let patch_rows_in_summary = cfg.mode != crate::model::SitMode::Sit;
    !stage_breaks_label(
        &cfg.local_attention,
        cfg.local_variant,
        cfg.local_window,
        cfg.local_layers,
        patch_rows_in_summary,
        label,
    ) && !stage_breaks_label(
        &cfg.global_attention,
        cfg.global_variant,
        geo.win_rows.max(geo.win_cols),
        cfg.global_layers,
        patch_rows_in_summary,
        label,
    )
}

// ===========================================================================
// Report
// ===========================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    Invariant,
    Broken,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformCheck {
    pub label: String,
    pub expectation: Expectation,
    pub seeds: usize,
    /// Largest output move seen across seeds.
    pub max_deviation: f64,
    /// Seeds whose deviation exceeded the break threshold (diagnostic; a
    /// broken expectation passes when any seed shows the break).
    pub broken_seeds: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymmetryReport {
    pub seeds: usize,
    pub invariance_tolerance: f64,
    pub break_threshold: f64,
    pub checks: Vec<TransformCheck>,
    pub pass: bool,
}

struct Candidate {
    label: String,
    perm: Vec<usize>,
    expectation: Expectation,
}

fn expectation(held: bool) -> Expectation {
    if held {
        Expectation::Invariant
    } else {
        Expectation::Broken
    }
}

/// Builds the transform list for a configuration: every grid symmetry that
/// exists on the image, plus synthetic negative controls (a pixel swap inside
/// each window, a swap of two whole windows, a random pixel shuffle).
fn candidates(cfg: &ModelConfig, geo: &Geometry) -> Vec<Candidate> {
    use PermLabel::*;
    let img = GridSpec::grid2d(cfg.image.rows, cfg.image.cols).expect("validated");
    let mut out = Vec::new();
    for label in [Rot90, Rot180, Rot270, HFlip, VFlip, Transpose, AntiTranspose] {
        if let Some(sp) = SymmetryPermutation::from_label(label, &img) {
            out.push(Candidate {
                label: label.to_string(),
                perm: sp.perm,
                expectation: expectation(model_holds_label(cfg, geo, label)),
            });
        }
    }

    let blind_local = cfg.stem.is_none() && !cfg.pos_embed && is_plain(&cfg.local_attention);
    let blind_global = cfg.stem.is_none() && !cfg.pos_embed && is_plain(&cfg.global_attention);
    let (h, w) = (cfg.image.rows, cfg.image.cols);
    let tiled = cfg.stem.is_none() && cfg.local_window == cfg.local_patch;

    // Swap the two leading pixels of every window. A single transposition is
    // never a dihedral symmetry of a window of side >= 2, so only a model
    // with no spatial signal at the local stage can ignore it.
    if tiled && cfg.local_patch >= 2 {
        let lp = cfg.local_patch;
        let mut perm: Vec<usize> = (0..h * w).collect();
        for wr in 0..geo.win_rows {
            for wc in 0..geo.win_cols {
                let a = (wr * lp) * w + wc * lp;
                perm.swap(a, a + 1);
            }
        }
        out.push(Candidate {
            label: "window_content_swap".into(),
            perm,
            expectation: expectation(blind_local),
        });
    }

    // Swap the contents of the first two windows wholesale, skipped when that
    // swap happens to be a symmetry of the window grid itself.
    if tiled && geo.windows >= 2 {
        let lp = cfg.local_patch;
        let mut wperm: Vec<usize> = (0..geo.windows).collect();
        wperm.swap(0, 1);
        let win_syms = all_grid_symmetry_perms(
            &GridSpec::grid2d(geo.win_rows, geo.win_cols).expect("validated"),
        );
        if !win_syms.iter().any(|s| s == &wperm) {
            let mut perm = vec![0usize; h * w];
            for (dst_w, &src_w) in wperm.iter().enumerate() {
                let (dr, dc) = (dst_w / geo.win_cols, dst_w % geo.win_cols);
                let (sr, sc) = (src_w / geo.win_cols, src_w % geo.win_cols);
                for u in 0..lp {
                    for v in 0..lp {
                        perm[(dr * lp + u) * w + dc * lp + v] =
                            (sr * lp + u) * w + sc * lp + v;
                    }
                }
            }
            out.push(Candidate {
                label: "window_position_swap".into(),
                perm,
                expectation: expectation(blind_global),
            });
        }
    }

    // Random shuffle of the whole image, resampled until it is not a grid
    // symmetry. It mixes pixels across window boundaries, so even a fully
    // position-blind model sees it unless one window covers the image.
    let mut srng = ChaCha8Rng::seed_from_u64(7);
    let excluded = all_grid_symmetry_perms(&img);
    if let Some(perm) = random_perm_outside(h * w, &excluded, &mut srng) {
        out.push(Candidate {
            label: "pixel_shuffle".into(),
            perm,
            expectation: expectation(blind_local && blind_global && geo.windows == 1),
        });
    }
    out
}

/// Sweeps every candidate transform over `seeds` freshly initialized models
/// and scores the observed deviations against the expectations.
pub fn check_model_symmetries(cfg: &ModelConfig, seeds: usize) -> Result<SymmetryReport> {
    let geo = cfg.validate()?;
    let cands = candidates(cfg, &geo);
    let mut max_dev = vec![0.0f64; cands.len()];
    let mut broken = vec![0usize; cands.len()];

    for s in 0..seeds {
        let mut mrng = ChaCha8Rng::seed_from_u64(0x5ee0 + s as u64);
        let model = SitModel::<f64>::new(cfg.clone(), &mut mrng)?;
        let mut xrng = ChaCha8Rng::seed_from_u64(0xda7a + s as u64);
        let x = Tensor::randn(
            &[1, cfg.image.channels, cfg.image.rows, cfg.image.cols],
            1.0,
            &mut xrng,
        );
        let y = model.forward(&x, None);
        for (i, c) in cands.iter().enumerate() {
            let d = max_abs_diff(&model.forward(&apply_pixel_perm(&x, &c.perm), None), &y);
            max_dev[i] = max_dev[i].max(d);
            if d > BREAK_THRESHOLD {
                broken[i] += 1;
            }
        }
    }

    let checks: Vec<TransformCheck> = cands
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let pass = match c.expectation {
                Expectation::Invariant => max_dev[i] < INVARIANCE_TOL,
                Expectation::Broken => max_dev[i] > BREAK_THRESHOLD,
            };
            TransformCheck {
                label: c.label,
                expectation: c.expectation,
                seeds,
                max_deviation: max_dev[i],
                broken_seeds: broken[i],
                pass,
            }
        })
        .collect();
    let pass = checks.iter().all(|c| c.pass);
    Ok(SymmetryReport {
        seeds,
        invariance_tolerance: INVARIANCE_TOL,
        break_threshold: BREAK_THRESHOLD,
        checks,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use super::*;
    use crate::graph::GraphInit;
    use crate::grid::{edge_classes, triangle_map, SymmetryClass};
    use crate::gsa::ScoreMode;
    use crate::model::{ImageSpec, SitMode, StemSpec};

    fn full_spec(heads: usize, rotation_layers: usize) -> AttentionSpec {
        AttentionSpec {
            heads,
            score_mode: ScoreMode::Both,
            gq: true,
            gk: true,
            gv: true,
            hadamard: true,
            gate: true,
            rotation_layers,
        }
    }

    fn structured_cfg(side: usize, patch: usize) -> ModelConfig {
        ModelConfig {
            mode: SitMode::Sit,
            image: ImageSpec { rows: side, cols: side, channels: 1 },
            stem: None,
            local_window: patch,
            local_patch: patch,
            dim_local: 4,
            dim_global: 4,
            local_layers: 1,
            global_layers: 1,
            local_attention: full_spec(2, 1),
            global_attention: full_spec(2, 1),
            local_variant: Some(SymmetryClass::DihedralDistance),
            global_variant: Some(SymmetryClass::DihedralDistance),
            pos_embed: false,
            num_classes: 3,
            graph_init: GraphInit::Random { std: 0.3 },
            class_dropout: 0.0,
        }
    }

    #[test]
    fn pixel_perm_matches_a_hand_rotation() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let grid = GridSpec::grid2d(2, 2).unwrap();
        let rot = SymmetryPermutation::from_label(PermLabel::Rot90, &grid).unwrap();
        let y = apply_pixel_perm(&x, &rot.perm);
        // a quarter turn of [1 2; 3 4] must put one column on one row
        let d = y.data();
        let cw = d == [3.0, 1.0, 4.0, 2.0];
        let ccw = d == [2.0, 4.0, 1.0, 3.0];
        assert!(cw || ccw, "not a quarter turn: {d:?}");
    }

    #[test]
    fn token_extension_pins_row_zero() {
        assert_eq!(extend_perm_for_token(&[2, 0, 1], true), vec![0, 3, 1, 2]);
        assert_eq!(extend_perm_for_token(&[2, 0, 1], false), vec![2, 0, 1]);
    }

    #[test]
    fn layer_deviation_separates_group_from_non_group() {
        let grid = GridSpec::grid2d(3, 3).unwrap();
        let classes = Rc::new(edge_classes(&grid, SymmetryClass::DihedralDistance).unwrap());
        let tri = Rc::new(triangle_map(&grid).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = GsaLayer::<f64>::new(
            6,
            9,
            true,
            &full_spec(2, 1),
            Some(classes),
            Some(tri),
            GraphInit::Random { std: 0.3 },
            &mut rng,
        )
        .unwrap();
        let x = Tensor::randn(&[2, 10, 6], 1.0, &mut rng);
        let masks = ClassMasks::none();

        let rot = SymmetryPermutation::from_label(PermLabel::Rot90, &grid).unwrap();
        assert!(layer_equivariance_deviation(&layer, &x, &rot.perm, &masks) < 1e-10);

        let excluded = all_grid_symmetry_perms(&grid);
        let odd = random_perm_outside(9, &excluded, &mut rng).unwrap();
        assert!(layer_equivariance_deviation(&layer, &x, &odd, &masks) > 1e-3);
    }

    #[test]
    fn random_perm_respects_the_excluded_set() {
        let grid = GridSpec::grid2d(2, 2).unwrap();
        let excluded = all_grid_symmetry_perms(&grid);
        assert_eq!(excluded.len(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = random_perm_outside(4, &excluded, &mut rng).unwrap();
            assert!(!excluded.contains(&p));
        }
    }

    #[test]
    fn structured_model_report_keeps_the_full_group_on_2x2_windows() {
        // 4x4 image, 2x2 windows and a 2x2 window grid: triangle passes do
        // not break flips at this size, so all seven symmetries must hold
        // while the synthetic controls must break.
        let report = check_model_symmetries(&structured_cfg(4, 2), 3).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.checks.len(), 10);
        for c in &report.checks {
            let want = if c.label.contains("swap") || c.label.contains("shuffle") {
                Expectation::Broken
            } else {
                Expectation::Invariant
            };
            assert_eq!(c.expectation, want, "{}", c.label);
        }
    }

    fn by_label(r: &SymmetryReport, l: &str) -> TransformCheck {
        r.checks.iter().find(|c| c.label == l).cloned().unwrap()
    }

    #[test]
    fn rotation_passes_drop_flips_only_when_patch_rows_reach_the_logits() {
        // depth 1 with a token summary: the triangle pass rewrites only patch
        // scores, which the token row never reads, so flips hold exactly
        let shallow = check_model_symmetries(&structured_cfg(9, 3), 3).unwrap();
        assert!(shallow.pass, "{shallow:?}");
        assert_eq!(by_label(&shallow, "hflip").expectation, Expectation::Invariant);
        assert_eq!(by_label(&shallow, "rot90").expectation, Expectation::Invariant);

        // a second local layer folds the bent patch rows back into the token
        let mut deep_cfg = structured_cfg(9, 3);
        deep_cfg.local_layers = 2;
        let deep = check_model_symmetries(&deep_cfg, 3).unwrap();
        assert!(deep.pass, "{deep:?}");
        for flip in ["hflip", "vflip", "transpose", "anti_transpose"] {
            assert_eq!(by_label(&deep, flip).expectation, Expectation::Broken, "{flip}");
        }
        assert_eq!(by_label(&deep, "rot90").expectation, Expectation::Invariant);
        assert_eq!(by_label(&deep, "rot270").expectation, Expectation::Invariant);

        // a mean summary reads the patch rows directly, depth 1 suffices
        let mut set_cfg = structured_cfg(9, 3);
        set_cfg.mode = SitMode::Set;
        let set = check_model_symmetries(&set_cfg, 3).unwrap();
        assert!(set.pass, "{set:?}");
        assert_eq!(by_label(&set, "hflip").expectation, Expectation::Broken);
        assert_eq!(by_label(&set, "rot180").expectation, Expectation::Invariant);
    }

    #[test]
    fn baseline_reports_flip_expectations() {
        let cfg = structured_cfg(4, 2);
        let vit = check_model_symmetries(&cfg.vit_baseline(), 3).unwrap();
        assert!(vit.pass, "{vit:?}");
        assert!(vit.checks.iter().all(|c| c.expectation == Expectation::Broken));

        let pi = check_model_symmetries(&cfg.pi_vit_baseline(), 3).unwrap();
        assert!(pi.pass, "{pi:?}");
        for c in &pi.checks {
            // plain attention with no positions ignores anything that stays
            // inside the window structure; a cross-window shuffle it sees
            let want = if c.label == "pixel_shuffle" {
                Expectation::Broken
            } else {
                Expectation::Invariant
            };
            assert_eq!(c.expectation, want, "{}", c.label);
        }
    }

    #[test]
    fn overlapping_windows_still_hold_the_group() {
        let mut cfg = structured_cfg(4, 2);
        cfg.local_window = 4;
        let report = check_model_symmetries(&cfg, 3).unwrap();
        assert!(report.pass, "{report:?}");
        // overlap disables the window-local controls but not the shuffle
        assert!(report.checks.iter().any(|c| c.label == "pixel_shuffle"));
        assert!(!report.checks.iter().any(|c| c.label == "window_content_swap"));
    }

    #[test]
    fn stem_configs_break_every_control() {
        let mut cfg = structured_cfg(8, 2);
        cfg.stem = Some(StemSpec {
            kernel: 3,
            pool: 2,
            variant: SymmetryClass::DihedralDistance,
        });
        let report = check_model_symmetries(&cfg, 3).unwrap();
        assert!(report.pass, "{report:?}");
        let shuffle = report.checks.iter().find(|c| c.label == "pixel_shuffle").unwrap();
        assert_eq!(shuffle.expectation, Expectation::Broken);
    }

    #[test]
    fn hvflip_variant_holds_flips_but_not_quarter_turns() {
        let mut cfg = structured_cfg(4, 2);
        cfg.local_attention.rotation_layers = 0;
        cfg.global_attention.rotation_layers = 0;
        cfg.local_variant = Some(SymmetryClass::HVFlip);
        cfg.global_variant = Some(SymmetryClass::HVFlip);
        let report = check_model_symmetries(&cfg, 3).unwrap();
        assert!(report.pass, "{report:?}");
        let by_label = |l: &str| report.checks.iter().find(|c| c.label == l).unwrap();
        for held in ["hflip", "vflip", "rot180"] {
            assert_eq!(by_label(held).expectation, Expectation::Invariant, "{held}");
        }
        for broken in ["rot90", "rot270", "transpose", "anti_transpose"] {
            assert_eq!(by_label(broken).expectation, Expectation::Broken, "{broken}");
        }
    }

    #[test]
    fn report_serializes_to_json() {
        let report = check_model_symmetries(&structured_cfg(4, 2), 2).unwrap();
        let text = serde_json::to_string_pretty(&report).unwrap();
        assert!(text.contains("\"invariance_tolerance\""));
        assert!(text.contains("pixel_shuffle"));
        let back: SymmetryReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.checks.len(), report.checks.len());
    }
}
