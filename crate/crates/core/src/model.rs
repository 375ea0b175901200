//! Two-stage windowed transformers over small images.
//!
//! The image (optionally passed through a structured depthwise-conv stem with
//! max pooling) is cut into a grid of local windows. A stack of attention
//! layers runs over the pixels of each window, a per-window summary becomes
//! one row of a global sequence, and a second stack runs over the windows.
//! Three summary modes are supported:
//!
//! - `sit`: a learned token is prepended at both stages and carries the
//!   summary, so nothing downstream depends on position ordering.
//! - `set`: no tokens; summaries are means over rows.
//! - `siet`: both, concatenated.
//!
//! With structured attention everywhere and no positional embeddings, the
//! logits are invariant under any input symmetry shared by every stage. The
//! plain-attention controls ([`ModelConfig::vit_baseline`] and
//! [`ModelConfig::pi_vit_baseline`]) keep the skeleton and parameter budget
//! but drop the structured matrices.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphInit, GraphWeights, WeightRole};
use crate::grid::{edge_classes, triangle_map, GridSpec, SymmetryClass};
use crate::gsa::{AttentionSpec, ClassMasks, GsaLayer};
use crate::tensor::{Element, Tensor};

// ===========================================================================
// Configuration
// ===========================================================================

/// How window and image summaries are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SitMode {
    Sit,
    Set,
    Siet,
}

impl SitMode {
    /// `set` is the only mode without summary tokens.
    pub fn uses_token(self) -> bool {
        !matches!(self, SitMode::Set)
    }

    /// Width multiplier for the summary vectors (`siet` concatenates two).
    pub fn summary_width(self) -> usize {
        match self {
            SitMode::Siet => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

/// Structured depthwise conv + max pool in front of the window split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    /// Odd conv kernel side.
    pub kernel: usize,
    /// Pooling factor; both image sides must divide by it. 1 disables pooling.
    pub pool: usize,
    #[serde(default = "default_stem_variant")]
    pub variant: SymmetryClass,
}

fn default_stem_variant() -> SymmetryClass {
    SymmetryClass::DihedralDistance
}

fn default_graph_init() -> GraphInit {
    GraphInit::NearIdentity { std: 0.02 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: SitMode,
    pub image: ImageSpec,
    #[serde(default)]
    pub stem: Option<StemSpec>,
    /// Side of the pixel window each local layer attends over.
    pub local_window: usize,
    /// Stride of the window grid; windows overlap when smaller than
    /// `local_window`, and the overhang is zero-padded at the image border.
    pub local_patch: usize,
    pub dim_local: usize,
    pub dim_global: usize,
    pub local_layers: usize,
    pub global_layers: usize,
    pub local_attention: AttentionSpec,
    pub global_attention: AttentionSpec,
    /// Weight-sharing rule for the window-level class maps; required when the
    /// local attention uses structured matrices.
    #[serde(default)]
    pub local_variant: Option<SymmetryClass>,
    #[serde(default)]
    pub global_variant: Option<SymmetryClass>,
    /// Learned positional embeddings at both stages. Only meaningful for the
    /// plain-attention controls; rejected alongside structured features.
    #[serde(default)]
    pub pos_embed: bool,
    pub num_classes: usize,
    #[serde(default = "default_graph_init")]
    pub graph_init: GraphInit,
    /// Probability of dropping a whole weight class per structured matrix.
    #[serde(default)]
    pub class_dropout: f64,
}

/// Grid sizes derived from a validated [`ModelConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    /// Image side lengths after the stem pooling, before the window split.
    pub eff_rows: usize,
    pub eff_cols: usize,
    /// Window grid dimensions.
    pub win_rows: usize,
    pub win_cols: usize,
    /// Total window count, the global sequence length before any token.
    pub windows: usize,
    /// Pixels per window, the local sequence length before any token.
    pub window_pixels: usize,
}

impl ModelConfig {
    /// Checks every arithmetic constraint and returns the derived geometry.
    pub fn validate(&self) -> Result<Geometry> {
        let img = &self.image;
        if img.rows == 0 || img.cols == 0 || img.channels == 0 {
            return Err(Error::config("image dimensions must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least two output classes"));
        }
        if self.dim_local == 0 || self.dim_global == 0 {
            return Err(Error::config("feature dims must be positive"));
        }
        for (stage, spec, dim) in [
            ("local", &self.local_attention, self.dim_local),
            ("global", &self.global_attention, self.dim_global),
        ] {
            if spec.heads == 0 || dim % spec.heads != 0 {
                return Err(Error::config(format!(
                    "{stage} head count {} must divide dim {dim}",
                    spec.heads
                )));
            }
        }
        let (mut eff_rows, mut eff_cols) = (img.rows, img.cols);
        if let Some(s) = &self.stem {
            if s.kernel % 2 == 0 {
                return Err(Error::config("stem kernel side must be odd"));
            }
            if !s.variant.offset_keyed() || s.variant.is_1d() {
                return Err(Error::config(
                    "stem variant must key classes on 2D offsets",
                ));
            }
            if s.pool == 0 || eff_rows % s.pool != 0 || eff_cols % s.pool != 0 {
                return Err(Error::config(format!(
                    "stem pool {} must divide both image sides {}x{}",
                    s.pool, img.rows, img.cols
                )));
            }
            eff_rows /= s.pool;
            eff_cols /= s.pool;
        }
        let (lw, lp) = (self.local_window, self.local_patch);
        if lp == 0 || lw < lp {
            return Err(Error::config(format!(
                "local window {lw} must be at least the patch stride {lp}"
            )));
        }
        if (lw - lp) % 2 != 0 {
            return Err(Error::config(
                "window overhang must split evenly on both sides",
            ));
        }
        if eff_rows % lp != 0 || eff_cols % lp != 0 {
            return Err(Error::config(format!(
                "patch stride {lp} must tile the {eff_rows}x{eff_cols} grid"
            )));
        }
        let geo = Geometry {
            eff_rows,
            eff_cols,
            win_rows: eff_rows / lp,
            win_cols: eff_cols / lp,
            windows: (eff_rows / lp) * (eff_cols / lp),
            window_pixels: lw * lw,
        };
        for (stage, spec, variant) in [
            ("local", &self.local_attention, self.local_variant),
            ("global", &self.global_attention, self.global_variant),
        ] {
            if spec.needs_classes() {
                match variant {
                    None => {
                        return Err(Error::config(format!(
                            "{stage} attention uses structured matrices but no \
                             variant is set"
                        )));
                    }
                    Some(v) if v.is_1d() => {
                        return Err(Error::config(format!(
                            "{stage} variant {v} is 1D but the {stage} \
                             positions form a 2D grid"
                        )));
                    }
                    Some(_) => {}
                }
            }
        }
        if self.local_attention.rotation_layers > 0 && lw < 2 {
            return Err(Error::config(
                "local triangle passes need a window side of at least 2",
            ));
        }
        if self.global_attention.rotation_layers > 0
            && (geo.win_rows != geo.win_cols || geo.win_rows < 2)
        {
            return Err(Error::config(format!(
                "global triangle passes need a square window grid of side >= 2, \
                 got {}x{}",
                geo.win_rows, geo.win_cols
            )));
        }
        let structured = self.local_attention.needs_classes()
            || self.local_attention.rotation_layers > 0
            || self.global_attention.needs_classes()
            || self.global_attention.rotation_layers > 0;
        if self.pos_embed && structured {
            return Err(Error::config(
                "positional embeddings break the symmetry the structured \
                 matrices encode; enable one or the other",
            ));
        }
        if !(0.0..1.0).contains(&self.class_dropout) {
            return Err(Error::config("class dropout must be in [0, 1)"));
        }
        Ok(geo)
    }

    /// Same skeleton with plain attention at both stages and learned
    /// positional embeddings: the position-aware control.
    pub fn vit_baseline(&self) -> ModelConfig {
        let mut c = self.clone();
        c.local_attention = AttentionSpec::plain(self.local_attention.heads);
        c.global_attention = AttentionSpec::plain(self.global_attention.heads);
        c.local_variant = None;
        c.global_variant = None;
        c.pos_embed = true;
        c.class_dropout = 0.0;
        c
    }

    /// Plain attention with no positional signal at all: invariant under any
    /// relabeling of windows and of pixels within windows, not just the grid
    /// symmetries.
    pub fn pi_vit_baseline(&self) -> ModelConfig {
        let mut c = self.vit_baseline();
        c.pos_embed = false;
        c
    }
}

// ===========================================================================
// Window extraction
// ===========================================================================

/// Cuts `[B, C, H, W]` into the window grid as `[B * windows, window_pixels,
/// C]`. Windows are centered on `patch x patch` tiles; when `window > patch`
/// the overhang reads zeros outside the image. Differentiable: gradients
/// scatter back to the source pixels (overlapping windows accumulate).
pub fn extract_windows<E: Element>(x: &Tensor<E>, window: usize, patch: usize) -> Tensor<E> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "window extraction input must be [B, C, H, W]");
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(
        patch >= 1 && window >= patch && (window - patch) % 2 == 0,
        "window/patch sizes must validate first"
    );
    assert!(h % patch == 0 && w % patch == 0, "patch must tile the image");
    let margin = (window - patch) / 2;
    let (win_rows, win_cols) = (h / patch, w / patch);
    // One extra zero slot at index h*w catches every out-of-image read.
    let pad_slot = h * w;
    let mut idx = Vec::with_capacity(win_rows * win_cols * window * window);
    for wr in 0..win_rows {
        for wc in 0..win_cols {
            for u in 0..window {
                for v in 0..window {
                    let r = (wr * patch + u) as i64 - margin as i64;
                    let col = (wc * patch + v) as i64 - margin as i64;
                    let inside = r >= 0 && r < h as i64 && col >= 0 && col < w as i64;
                    idx.push(if inside {
                        r as usize * w + col as usize
                    } else {
                        pad_slot
                    });
                }
            }
        }
    }
    let flat = x.reshape(&[b, c, h * w]);
    let padded = Tensor::concat(&[&flat, &Tensor::zeros(&[b, c, 1])], 2);
    padded
        .index_select(2, &idx)
        .reshape(&[b, c, win_rows * win_cols, window * window])
        .permute(&[0, 2, 3, 1])
        .reshape(&[b * win_rows * win_cols, window * window, c])
}

// ===========================================================================
// Model
// ===========================================================================

/// Dropout masks for one forward pass, one entry per attention layer.
pub struct ModelMasks<E: Element> {
    pub local: Vec<ClassMasks<E>>,
    pub global: Vec<ClassMasks<E>>,
}

#[derive(Clone)]
pub struct SitModel<E: Element> {
    cfg: ModelConfig,
    geo: Geometry,
    stem: Option<GraphWeights<E>>,
    embed_w: Tensor<E>,
    embed_b: Tensor<E>,
    local_pos: Option<Tensor<E>>,
    local_token: Option<Tensor<E>>,
    local_layers: Vec<GsaLayer<E>>,
    proj_w: Tensor<E>,
    proj_b: Tensor<E>,
    global_pos: Option<Tensor<E>>,
    global_token: Option<Tensor<E>>,
    global_layers: Vec<GsaLayer<E>>,
    head_w: Tensor<E>,
    head_b: Tensor<E>,
}

impl<E: Element> SitModel<E> {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let geo = cfg.validate()?;
        let use_token = cfg.mode.uses_token();
        let (dl, dg) = (cfg.dim_local, cfg.dim_global);

        let stem = match &cfg.stem {
            Some(s) => {
                let img = GridSpec::grid2d(cfg.image.rows, cfg.image.cols)?;
                let classes = Rc::new(edge_classes(&img, s.variant)?);
                Some(GraphWeights::new(
                    cfg.image.channels,
                    classes,
                    WeightRole::Matmul,
                    cfg.graph_init,
                    rng,
                ))
            }
            None => None,
        };

        let lin = |rows: usize, cols: usize, rng: &mut _| {
            let std = 1.0 / (rows as f64).sqrt();
            Tensor::randn(&[rows, cols], std, rng).to_param()
        };
        let small = |shape: &[usize], rng: &mut _| Tensor::randn(shape, 0.02, rng).to_param();

        let embed_w = lin(cfg.image.channels, dl, rng);
        let embed_b = Tensor::zeros(&[dl]).to_param();
        let local_pos = cfg
            .pos_embed
            .then(|| small(&[geo.window_pixels, dl], rng));
        let local_token = use_token.then(|| small(&[dl], rng));

        let wgrid = GridSpec::grid2d(cfg.local_window, cfg.local_window)?;
        let lclasses = if cfg.local_attention.needs_classes() {
            Some(Rc::new(edge_classes(&wgrid, cfg.local_variant.unwrap())?))
        } else {
            None
        };
        let ltri = if cfg.local_attention.rotation_layers > 0 {
            Some(Rc::new(triangle_map(&wgrid)?))
        } else {
            None
        };
        let local_layers = (0..cfg.local_layers)
            .map(|_| {
                GsaLayer::new(
                    dl,
                    geo.window_pixels,
                    use_token,
                    &cfg.local_attention,
                    lclasses.clone(),
                    ltri.clone(),
                    cfg.graph_init,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let proj_w = lin(cfg.mode.summary_width() * dl, dg, rng);
        let proj_b = Tensor::zeros(&[dg]).to_param();
        let global_pos = cfg.pos_embed.then(|| small(&[geo.windows, dg], rng));
        let global_token = use_token.then(|| small(&[dg], rng));

        let ggrid = GridSpec::grid2d(geo.win_rows, geo.win_cols)?;
        let gclasses = if cfg.global_attention.needs_classes() {
            Some(Rc::new(edge_classes(&ggrid, cfg.global_variant.unwrap())?))
        } else {
            None
        };
        let gtri = if cfg.global_attention.rotation_layers > 0 {
            Some(Rc::new(triangle_map(&ggrid)?))
        } else {
            None
        };
        let global_layers = (0..cfg.global_layers)
            .map(|_| {
                GsaLayer::new(
                    dg,
                    geo.windows,
                    use_token,
                    &cfg.global_attention,
                    gclasses.clone(),
                    gtri.clone(),
                    cfg.graph_init,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let head_w = lin(cfg.mode.summary_width() * dg, cfg.num_classes, rng);
        let head_b = Tensor::zeros(&[cfg.num_classes]).to_param();

        Ok(SitModel {
            cfg,
            geo,
            stem,
            embed_w,
            embed_b,
            local_pos,
            local_token,
            local_layers,
            proj_w,
            proj_b,
            global_pos,
            global_token,
            global_layers,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> Geometry {
        self.geo
    }

    /// `[B, num_classes]` logits for a `[B, C, H, W]` batch. `masks` carries
    /// the class-dropout draw for this pass; `None` runs every class.
    pub fn forward(&self, x: &Tensor<E>, masks: Option<&ModelMasks<E>>) -> Tensor<E> {
        let s = x.shape();
        assert_eq!(s.len(), 4, "model input must be [B, C, H, W]");
        assert_eq!(
            (s[1], s[2], s[3]),
            (self.cfg.image.channels, self.cfg.image.rows, self.cfg.image.cols),
            "input does not match the configured image shape"
        );
        let b = s[0];
        let use_token = self.cfg.mode.uses_token();
        let no_mask = ClassMasks::none();

        let mut img = x.clone();
        if let Some(g) = &self.stem {
            let spec = self.cfg.stem.as_ref().unwrap();
            img = g
                .apply_conv(&img, spec.kernel)
                .expect("stem kernel validated at construction");
            if spec.pool > 1 {
                img = img.max_pool2d(spec.pool);
            }
        }

        let windows = extract_windows(&img, self.cfg.local_window, self.cfg.local_patch);
        let bnw = b * self.geo.windows;
        let mut h = windows.matmul(&self.embed_w).add_rowvec(&self.embed_b);
        if let Some(p) = &self.local_pos {
            h = h.add(&p.broadcast_leading(bnw));
        }
        if let Some(t) = &self.local_token {
            let row = t.reshape(&[1, self.cfg.dim_local]).broadcast_leading(bnw);
            h = Tensor::concat(&[&row, &h], 1);
        }
        for (i, layer) in self.local_layers.iter().enumerate() {
            let m = masks.map(|mm| &mm.local[i]).unwrap_or(&no_mask);
            h = layer.forward(&h, m);
        }

        let (dl, nw, px) = (self.cfg.dim_local, self.geo.windows, self.geo.window_pixels);
        let t_off = use_token as usize;
        let mean_rows = || h.narrow(1, t_off, px).mean_axis(1).reshape(&[b, nw, dl]);
        let token_row = || h.narrow(1, 0, 1).reshape(&[b, nw, dl]);
        let summary = match self.cfg.mode {
            SitMode::Sit => token_row(),
            SitMode::Set => mean_rows(),
            SitMode::Siet => Tensor::concat(&[&token_row(), &mean_rows()], 2),
        };

        let mut g = summary.matmul(&self.proj_w).add_rowvec(&self.proj_b);
        if let Some(p) = &self.global_pos {
            g = g.add(&p.broadcast_leading(b));
        }
        if let Some(t) = &self.global_token {
            let row = t.reshape(&[1, self.cfg.dim_global]).broadcast_leading(b);
            g = Tensor::concat(&[&row, &g], 1);
        }
        for (i, layer) in self.global_layers.iter().enumerate() {
            let m = masks.map(|mm| &mm.global[i]).unwrap_or(&no_mask);
            g = layer.forward(&g, m);
        }

        let dgl = self.cfg.dim_global;
        let feats = match self.cfg.mode {
            SitMode::Sit => g.narrow(1, 0, 1).reshape(&[b, dgl]),
            SitMode::Set => g.mean_axis(1),
            SitMode::Siet => {
                let tok = g.narrow(1, 0, 1).reshape(&[b, dgl]);
                let mean = g.narrow(1, 1, nw).mean_axis(1);
                Tensor::concat(&[&tok, &mean], 1)
            }
        };
        feats.matmul(&self.head_w).add_rowvec(&self.head_b)
    }

    /// Draws fresh class-dropout masks, or `None` when dropout is off.
    pub fn sample_masks(&self, rng: &mut impl Rng) -> Option<ModelMasks<E>> {
        if self.cfg.class_dropout <= 0.0 {
            return None;
        }
        let p = self.cfg.class_dropout;
        Some(ModelMasks {
            local: self
                .local_layers
                .iter()
                .map(|l| l.sample_class_masks(p, rng))
                .collect(),
            global: self
                .global_layers
                .iter()
                .map(|l| l.sample_class_masks(p, rng))
                .collect(),
        })
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        if let Some(s) = &mut self.stem {
            s.visit_params("stem", f);
        }
        f("embed.w".into(), &mut self.embed_w);
        f("embed.b".into(), &mut self.embed_b);
        if let Some(p) = &mut self.local_pos {
            f("local_pos".into(), p);
        }
        if let Some(t) = &mut self.local_token {
            f("local_token".into(), t);
        }
        for (i, layer) in self.local_layers.iter_mut().enumerate() {
            layer.visit_params(&format!("local{i}"), f);
        }
        f("proj.w".into(), &mut self.proj_w);
        f("proj.b".into(), &mut self.proj_b);
        if let Some(p) = &mut self.global_pos {
            f("global_pos".into(), p);
        }
        if let Some(t) = &mut self.global_token {
            f("global_token".into(), t);
        }
        for (i, layer) in self.global_layers.iter_mut().enumerate() {
            layer.visit_params(&format!("global{i}"), f);
        }
        f("head.w".into(), &mut self.head_w);
        f("head.b".into(), &mut self.head_b);
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, t| t.zero_grad());
    }
}
