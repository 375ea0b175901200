//! Attention whose score path carries symmetry-tied weight structure.
//!
//! The layer is standard pre-norm multi-head attention with optional extra
//! machinery threaded through the score computation, in this fixed order:
//! per-feature matrices on Q/K/V, a per-head affine gate with tanh, a
//! per-head pointwise mask, symmetrization or anti-symmetrization of the
//! patch block, and triangle mixing layers that break flip symmetry while
//! keeping quarter-turn rotations. Every optional piece defaults to absent;
//! with all of them off the layer reduces to plain attention, and
//! [`GsaLayer::reference_attention`] provides an independently coded plain
//! path to check that reduction against.
//!
//! When a class token is in use it occupies row 0. Structured matrices never
//! touch the token row or column: multiplying matrices act as if extended
//! block-diagonally with a 1, pointwise masks with ones, additive biases with
//! zeros. All splicing below implements exactly that.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{dropout_mask, GraphInit, GraphWeights, WeightRole};
use crate::grid::{EdgeClassMap, TriangleMap};
use crate::tensor::{el, Element, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// What happens to the patch block of the scores before softmax.
/// `Both` runs softmax over the symmetrized and anti-symmetrized branches
/// separately and sums the two attention matrices without renormalizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    Plain,
    Symmetric,
    Antisymmetric,
    Both,
}

/// Feature switches for one attention layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub heads: usize,
    #[serde(default = "default_score_mode")]
    pub score_mode: ScoreMode,
    /// Per-feature matrices multiplying Q, K, V over patch positions.
    #[serde(default)]
    pub gq: bool,
    #[serde(default)]
    pub gk: bool,
    #[serde(default)]
    pub gv: bool,
    /// Per-head pointwise mask on the score patch block.
    #[serde(default)]
    pub hadamard: bool,
    /// Per-head affine map on score rows followed by tanh.
    #[serde(default)]
    pub gate: bool,
    /// Number of stacked triangle mixing passes on the score patch block.
    #[serde(default)]
    pub rotation_layers: usize,
}

fn default_score_mode() -> ScoreMode {
    ScoreMode::Plain
}

impl AttentionSpec {
    pub fn plain(heads: usize) -> Self {
        AttentionSpec {
            heads,
            score_mode: ScoreMode::Plain,
            gq: false,
            gk: false,
            gv: false,
            hadamard: false,
            gate: false,
            rotation_layers: 0,
        }
    }

    pub fn needs_classes(&self) -> bool {
        self.gq || self.gk || self.gv || self.hadamard || self.gate
    }
}

/// Per-class keep/drop multipliers for one forward pass, one entry per
/// structured matrix present. Absent entries mean no dropout on that matrix.
pub struct ClassMasks<E: Element> {
    pub gq: Option<Tensor<E>>,
    pub gk: Option<Tensor<E>>,
    pub gv: Option<Tensor<E>>,
    pub hadamard: Option<Tensor<E>>,
    pub gate_m: Option<Tensor<E>>,
    pub gate_b: Option<Tensor<E>>,
}

impl<E: Element> ClassMasks<E> {
    pub fn none() -> Self {
        ClassMasks {
            gq: None,
            gk: None,
            gv: None,
            hadamard: None,
            gate_m: None,
            gate_b: None,
        }
    }
}

/// Precomputed gather tables for the triangle mixing pass.
#[derive(Clone)]
struct RotTables<E: Element> {
    /// Flattened index of the (j, k) entry for each (i, j) pair.
    idx1: Vec<usize>,
    /// Flattened index of the (k, i) entry for each (i, j) pair.
    idx2: Vec<usize>,
    cls0: Vec<usize>,
    cls1: Vec<usize>,
    cls2: Vec<usize>,
    /// Zero on the diagonal: the two gathered terms drop out there, leaving a
    /// single scaled entry.
    offdiag: Tensor<E>,
}

#[derive(Clone)]
pub struct GsaLayer<E: Element> {
    pub dim: usize,
    pub heads: usize,
    /// Patch positions (token excluded).
    pub p: usize,
    pub use_token: bool,
    pub score_mode: ScoreMode,
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub wo: Tensor<E>,
    pub ln_g: Tensor<E>,
    pub ln_b: Tensor<E>,
    pub gq: Option<GraphWeights<E>>,
    pub gk: Option<GraphWeights<E>>,
    pub gv: Option<GraphWeights<E>>,
    pub hadamard: Option<GraphWeights<E>>,
    pub gate_m: Option<GraphWeights<E>>,
    pub gate_b: Option<GraphWeights<E>>,
    /// One `[heads, num_angle_classes]` tensor per triangle pass.
    pub thetas: Vec<Tensor<E>>,
    rot: Option<RotTables<E>>,
}

impl<E: Element> GsaLayer<E> {
    pub fn new(
        dim: usize,
        p: usize,
        use_token: bool,
        spec: &AttentionSpec,
        classes: Option<Rc<EdgeClassMap>>,
        triangles: Option<Rc<TriangleMap>>,
        graph_init: GraphInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if spec.heads == 0 || dim % spec.heads != 0 {
            return Err(Error::config(format!(
                "head count {} must divide dim {dim}",
                spec.heads
            )));
        }
        if spec.needs_classes() && classes.is_none() {
            return Err(Error::config(
                "structured score matrices need an edge class map",
            ));
        }
        if spec.rotation_layers > 0 && triangles.is_none() {
            return Err(Error::config("triangle passes need a triangle map"));
        }
        if let Some(c) = &classes {
            if c.p() != p {
                return Err(Error::config(format!(
                    "class map covers {} positions, layer expects {p}",
                    c.p()
                )));
            }
        }
        if let Some(t) = &triangles {
            if t.p() != p {
                return Err(Error::config(format!(
                    "triangle map covers {} positions, layer expects {p}",
                    t.p()
                )));
            }
        }
        let heads = spec.heads;
        let std = 1.0 / (dim as f64).sqrt();
        let w = |rng: &mut _| Tensor::randn(&[dim, dim], std, rng).to_param();
        let mk = |on: bool, ch: usize, role: WeightRole, rng: &mut _| -> Option<GraphWeights<E>> {
            on.then(|| {
                GraphWeights::new(ch, classes.clone().unwrap(), role, graph_init, rng)
            })
        };
        let wq = w(rng);
        let wk = w(rng);
        let wv = w(rng);
        let wo = w(rng);
        let gq = mk(spec.gq, dim, WeightRole::Matmul, rng);
        let gk = mk(spec.gk, dim, WeightRole::Matmul, rng);
        let gv = mk(spec.gv, dim, WeightRole::Matmul, rng);
        let hadamard = mk(spec.hadamard, heads, WeightRole::Hadamard, rng);
        let gate_m = mk(spec.gate, heads, WeightRole::Matmul, rng);
        let gate_b = mk(spec.gate, heads, WeightRole::Additive, rng);
        let (thetas, rot) = if spec.rotation_layers > 0 {
            let tri = triangles.unwrap();
            let nang = tri.num_angle_classes();
            let thetas = (0..spec.rotation_layers)
                .map(|_| {
                    let mut data = vec![E::zero(); heads * nang];
                    let (base, std) = match graph_init {
                        GraphInit::Identity => (1.0, 0.0),
                        GraphInit::NearIdentity { std } => (1.0, std),
                        GraphInit::Random { std } => (0.0, std),
                    };
                    for v in data.iter_mut() {
                        let z: f64 = if std > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                        *v = el::<E>(base + z * std);
                    }
                    Tensor::param(&[heads, nang], data)
                })
                .collect();
            (thetas, Some(RotTables::build(&tri)))
        } else {
            (Vec::new(), None)
        };
        Ok(GsaLayer {
            dim,
            heads,
            p,
            use_token,
            score_mode: spec.score_mode,
            wq,
            wk,
            wv,
            wo,
            ln_g: Tensor::ones(&[dim]).to_param(),
            ln_b: Tensor::zeros(&[dim]).to_param(),
            gq,
            gk,
            gv,
            hadamard,
            gate_m,
            gate_b,
            thetas,
            rot,
        })
    }

    pub fn has_graph_machinery(&self) -> bool {
        self.gq.is_some()
            || self.gk.is_some()
            || self.gv.is_some()
            || self.hadamard.is_some()
            || self.gate_m.is_some()
            || !self.thetas.is_empty()
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
        f(format!("{prefix}.ln_g"), &mut self.ln_g);
        f(format!("{prefix}.ln_b"), &mut self.ln_b);
        if let Some(g) = &mut self.gq {
            g.visit_params(&format!("{prefix}.gq"), f);
        }
        if let Some(g) = &mut self.gk {
            g.visit_params(&format!("{prefix}.gk"), f);
        }
        if let Some(g) = &mut self.gv {
            g.visit_params(&format!("{prefix}.gv"), f);
        }
        if let Some(g) = &mut self.hadamard {
            g.visit_params(&format!("{prefix}.hadamard"), f);
        }
        if let Some(g) = &mut self.gate_m {
            g.visit_params(&format!("{prefix}.gate_m"), f);
        }
        if let Some(g) = &mut self.gate_b {
            g.visit_params(&format!("{prefix}.gate_b"), f);
        }
        for (i, t) in self.thetas.iter_mut().enumerate() {
            f(format!("{prefix}.theta{i}"), t);
        }
    }

    /// Fresh dropout masks for every structured matrix present.
    pub fn sample_class_masks(&self, p_drop: f64, rng: &mut impl Rng) -> ClassMasks<E> {
        let mk = |g: &Option<GraphWeights<E>>, rng: &mut _| {
            g.as_ref()
                .filter(|_| p_drop > 0.0)
                .map(|g| dropout_mask(g.num_classes(), p_drop, rng))
        };
        ClassMasks {
            gq: mk(&self.gq, rng),
            gk: mk(&self.gk, rng),
            gv: mk(&self.gv, rng),
            hadamard: mk(&self.hadamard, rng),
            gate_m: mk(&self.gate_m, rng),
            gate_b: mk(&self.gate_b, rng),
        }
    }

    fn t_off(&self) -> usize {
        usize::from(self.use_token)
    }

    fn split_heads(&self, x: &Tensor<E>) -> Tensor<E> {
        let s = x.shape();
        let dh = self.dim / self.heads;
        x.reshape(&[s[0], s[1], self.heads, dh]).permute(&[0, 2, 1, 3])
    }

    fn merge_heads(&self, x: &Tensor<E>) -> Tensor<E> {
        let s = x.shape();
        x.permute(&[0, 2, 1, 3]).reshape(&[s[0], s[2], self.dim])
    }

    /// Patch block of `[B, H, T, T]` scores (everything when no token).
    fn patch_block(&self, s: &Tensor<E>) -> Tensor<E> {
        if self.t_off() == 0 {
            s.clone()
        } else {
            let p = s.shape()[2] - 1;
            s.narrow(2, 1, p).narrow(3, 1, p)
        }
    }

    /// Puts a modified patch block back, keeping the token row and column.
    fn splice_block(&self, s: &Tensor<E>, block: &Tensor<E>) -> Tensor<E> {
        if self.t_off() == 0 {
            return block.clone();
        }
        let p = block.shape()[2];
        let top = s.narrow(2, 0, 1);
        let rows = s.narrow(2, 1, p);
        let left = rows.narrow(3, 0, 1);
        let rows2 = Tensor::concat(&[&left, block], 3);
        Tensor::concat(&[&top, &rows2], 2)
    }

    /// Applies a per-feature matrix to patch rows of `[B, T, dim]`.
    fn apply_feature(
        &self,
        g: &GraphWeights<E>,
        x: &Tensor<E>,
        mask: Option<&Tensor<E>>,
    ) -> Tensor<E> {
        if self.t_off() == 0 {
            g.apply_dense(x, mask)
        } else {
            let p = x.shape()[1] - 1;
            let tok = x.narrow(1, 0, 1);
            let rest = g.apply_dense(&x.narrow(1, 1, p), mask);
            Tensor::concat(&[&tok, &rest], 1)
        }
    }

    /// Per-head affine map over score rows, then tanh over everything.
    fn apply_gate(&self, s: &Tensor<E>, masks: &ClassMasks<E>) -> Tensor<E> {
        let gm = self.gate_m.as_ref().unwrap();
        let gb = self.gate_b.as_ref().unwrap();
        let bsz = s.shape()[0];
        let p = self.p;
        let m = gm.materialize(masks.gate_m.as_ref()).broadcast_leading(bsz);
        let mixed = if self.t_off() == 0 {
            m.matmul(s)
        } else {
            let top = s.narrow(2, 0, 1);
            let rows = s.narrow(2, 1, p);
            Tensor::concat(&[&top, &m.matmul(&rows)], 2)
        };
        let bias = gb.materialize(masks.gate_b.as_ref());
        let bias = if self.t_off() == 0 {
            bias
        } else {
            let zc = Tensor::zeros(&[self.heads, p, 1]);
            let rows = Tensor::concat(&[&zc, &bias], 2);
            let zr = Tensor::zeros(&[self.heads, 1, p + 1]);
            Tensor::concat(&[&zr, &rows], 1)
        };
        mixed.add(&bias.broadcast_leading(bsz)).tanh()
    }

    /// One triangle mixing pass over a `[B, H, P, P]` patch block:
    /// `out[i,j] = theta[c0] * blk[i,j] + theta[c1] * blk[j,k] + theta[c2] * blk[k,i]`
    /// with k the third triangle vertex for (i, j), and the gathered terms
    /// zeroed on the diagonal.
    fn rotate_block(&self, block: &Tensor<E>, theta: &Tensor<E>) -> Tensor<E> {
        let rot = self.rot.as_ref().expect("tables exist when thetas do");
        let (b, h, p) = (block.shape()[0], block.shape()[1], block.shape()[2]);
        let pp = p * p;
        let s2 = block.reshape(&[b, h, pp]);
        let g1 = s2.index_select(2, &rot.idx1);
        let g2 = s2.index_select(2, &rot.idx2);
        let t0 = theta.index_select(1, &rot.cls0);
        let t1 = theta.index_select(1, &rot.cls1).mul_rowvec(&rot.offdiag);
        let t2 = theta.index_select(1, &rot.cls2).mul_rowvec(&rot.offdiag);
        s2.mul(&t0.broadcast_leading(b))
            .add(&g1.mul(&t1.broadcast_leading(b)))
            .add(&g2.mul(&t2.broadcast_leading(b)))
            .reshape(&[b, h, p, p])
    }

    /// Attention output (no residual). `x` is `[B, T, dim]` with the token,
    /// if any, at row 0.
    pub fn attention(&self, x: &Tensor<E>, masks: &ClassMasks<E>) -> Tensor<E> {
        let s = x.shape();
        assert_eq!(s.len(), 3, "attention input must be [batch, tokens, dim]");
        assert_eq!(s[2], self.dim, "feature dim mismatch");
        assert_eq!(s[1], self.p + self.t_off(), "token count mismatch");
        let h = x.layer_norm(LN_EPS).mul_rowvec(&self.ln_g).add_rowvec(&self.ln_b);
        let mut q = h.matmul(&self.wq);
        let mut k = h.matmul(&self.wk);
        let mut v = h.matmul(&self.wv);
        if let Some(g) = &self.gq {
            q = self.apply_feature(g, &q, masks.gq.as_ref());
        }
        if let Some(g) = &self.gk {
            k = self.apply_feature(g, &k, masks.gk.as_ref());
        }
        if let Some(g) = &self.gv {
            v = self.apply_feature(g, &v, masks.gv.as_ref());
        }
        let qh = self.split_heads(&q);
        let kh = self.split_heads(&k);
        let vh = self.split_heads(&v);
        let mut scores = qh.matmul(&kh.transpose_last2());
        if self.gate_m.is_some() {
            scores = self.apply_gate(&scores, masks);
        }
        if let Some(g) = &self.hadamard {
            let bsz = scores.shape()[0];
            let mat = g.materialize(masks.hadamard.as_ref()).broadcast_leading(bsz);
            let block = self.patch_block(&scores).mul(&mat);
            scores = self.splice_block(&scores, &block);
        }
        let scale = el::<E>(1.0 / ((self.dim / self.heads) as f64).sqrt());
        // None keeps the block raw; Some(false) adds the transpose,
        // Some(true) subtracts it (no 1/2 factor in either).
        let branch = |anti: Option<bool>| -> Tensor<E> {
            let mut block = self.patch_block(&scores);
            if let Some(anti) = anti {
                let bt = block.transpose_last2();
                block = if anti { block.sub(&bt) } else { block.add(&bt) };
            }
            for theta in &self.thetas {
                block = self.rotate_block(&block, theta);
            }
            self.splice_block(&scores, &block).mul_scalar(scale).softmax(3)
        };
        let attn = match self.score_mode {
            ScoreMode::Plain => branch(None),
            ScoreMode::Symmetric => branch(Some(false)),
            ScoreMode::Antisymmetric => branch(Some(true)),
            ScoreMode::Both => branch(Some(false)).add(&branch(Some(true))),
        };
        self.merge_heads(&attn.matmul(&vh)).matmul(&self.wo)
    }

    /// Residual block: `x + attention(x)`.
    pub fn forward(&self, x: &Tensor<E>, masks: &ClassMasks<E>) -> Tensor<E> {
        x.add(&self.attention(x, masks))
    }

    /// Plain multi-head attention over the same parameters, written as
    /// straight loops with no shared code and no structured matrices. With
    /// every optional feature at its neutral element the fast path must agree
    /// with this one.
    pub fn reference_attention(&self, x: &Tensor<E>) -> Tensor<E> {
        let s = x.shape();
        assert_eq!(s.len(), 3);
        let (bs, t, d) = (s[0], s[1], s[2]);
        assert_eq!(d, self.dim);
        let heads = self.heads;
        let dh = d / heads;
        let xd = x.data();
        let (wq, wk, wv, wo) = (self.wq.data(), self.wk.data(), self.wv.data(), self.wo.data());
        let (lg, lb) = (self.ln_g.data(), self.ln_b.data());
        let eps = el::<E>(LN_EPS);
        let dn = el::<E>(d as f64);
        let mut out = vec![E::zero(); bs * t * d];
        let mut input = vec![E::zero(); t * d];
        let mut q = vec![E::zero(); t * d];
        let mut k = vec![E::zero(); t * d];
        let mut v = vec![E::zero(); t * d];
        let mut ctx = vec![E::zero(); t * d];
        for b in 0..bs {
            for row in 0..t {
                let lane = &xd[(b * t + row) * d..(b * t + row + 1) * d];
                let mean = lane.iter().copied().sum::<E>() / dn;
                let var = lane.iter().map(|&u| (u - mean) * (u - mean)).sum::<E>() / dn;
                let inv = (var + eps).sqrt().recip();
                for c in 0..d {
                    input[row * d + c] = (lane[c] - mean) * inv * lg[c] + lb[c];
                }
            }
            for row in 0..t {
                for c in 0..d {
                    let mut aq = E::zero();
                    let mut ak = E::zero();
                    let mut av = E::zero();
                    for m in 0..d {
                        let xv = input[row * d + m];
                        aq += xv * wq[m * d + c];
                        ak += xv * wk[m * d + c];
                        av += xv * wv[m * d + c];
                    }
                    q[row * d + c] = aq;
                    k[row * d + c] = ak;
                    v[row * d + c] = av;
                }
            }
            let scale = el::<E>(1.0 / (dh as f64).sqrt());
            for head in 0..heads {
                let off = head * dh;
                for i in 0..t {
                    let mut row = vec![E::zero(); t];
                    for (j, rj) in row.iter_mut().enumerate() {
                        let mut acc = E::zero();
                        for c in 0..dh {
                            acc += q[i * d + off + c] * k[j * d + off + c];
                        }
                        *rj = acc * scale;
                    }
                    let mx = row.iter().copied().fold(row[0], E::max);
                    let mut z = E::zero();
                    for rj in row.iter_mut() {
                        *rj = (*rj - mx).exp();
                        z += *rj;
                    }
                    for c in 0..dh {
                        let mut acc = E::zero();
                        for (j, rj) in row.iter().enumerate() {
                            acc += *rj / z * v[j * d + off + c];
                        }
                        ctx[i * d + off + c] = acc;
                    }
                }
            }
            for row in 0..t {
                for c in 0..d {
                    let mut acc = E::zero();
                    for m in 0..d {
                        acc += ctx[row * d + m] * wo[m * d + c];
                    }
                    out[(b * t + row) * d + c] = acc;
                }
            }
        }
        Tensor::from_vec(&[bs, t, d], out)
    }
}

impl<E: Element> RotTables<E> {
    fn build(tri: &TriangleMap) -> Self {
        let p = tri.p();
        let pp = p * p;
        let mut idx1 = Vec::with_capacity(pp);
        let mut idx2 = Vec::with_capacity(pp);
        let mut cls0 = Vec::with_capacity(pp);
        let mut cls1 = Vec::with_capacity(pp);
        let mut cls2 = Vec::with_capacity(pp);
        let mut offdiag = Vec::with_capacity(pp);
        for i in 0..p {
            for j in 0..p {
                let k = tri.third(i, j);
                idx1.push(j * p + k);
                idx2.push(k * p + i);
                cls0.push(tri.angle_class(0, i, j) as usize);
                cls1.push(tri.angle_class(1, i, j) as usize);
                cls2.push(tri.angle_class(2, i, j) as usize);
                offdiag.push(if i == j { E::zero() } else { E::one() });
            }
        }
        RotTables {
            idx1,
            idx2,
            cls0,
            cls1,
            cls2,
            offdiag: Tensor::from_vec(&[pp], offdiag),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{edge_classes, triangle_map, GridSpec, PermLabel, SymmetryClass, SymmetryPermutation};
    use crate::tensor::max_abs_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full_spec(heads: usize, mode: ScoreMode, rotation_layers: usize) -> AttentionSpec {
        AttentionSpec {
            heads,
            score_mode: mode,
            gq: true,
            gk: true,
            gv: true,
            hadamard: true,
            gate: true,
            rotation_layers,
        }
    }

    fn make_layer(
        side: usize,
        variant: SymmetryClass,
        dim: usize,
        spec: AttentionSpec,
        use_token: bool,
        init: GraphInit,
        seed: u64,
    ) -> GsaLayer<f64> {
        let grid = GridSpec::grid2d(side, side).unwrap();
        let classes = spec
            .needs_classes()
            .then(|| Rc::new(edge_classes(&grid, variant).unwrap()));
        let triangles =
            (spec.rotation_layers > 0).then(|| Rc::new(triangle_map(&grid).unwrap()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GsaLayer::new(dim, grid.p(), use_token, &spec, classes, triangles, init, &mut rng)
            .unwrap()
    }

    /// Token-extended row permutation in gather form: row 0 stays put.
    fn extend_perm(perm: &[usize], use_token: bool) -> Vec<usize> {
        if use_token {
            std::iter::once(0)
                .chain(perm.iter().map(|&s| s + 1))
                .collect()
        } else {
            perm.to_vec()
        }
    }

    fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
        x.index_select(1, perm)
    }

    #[test]
    fn plain_layer_matches_reference_path() {
        for &use_token in &[false, true] {
            let layer = make_layer(
                3,
                SymmetryClass::DihedralDistance,
                8,
                AttentionSpec::plain(2),
                use_token,
                GraphInit::Identity,
                1,
            );
            let t = 9 + usize::from(use_token);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let x = Tensor::randn(&[2, t, 8], 1.0, &mut rng);
            let fast = layer.attention(&x, &ClassMasks::none());
            let slow = layer.reference_attention(&x);
            assert!(max_abs_diff(&fast, &slow) < 1e-12, "use_token {use_token}");
        }
    }

    #[test]
    fn identity_structured_weights_reduce_to_plain_attention() {
        let mut spec = full_spec(2, ScoreMode::Plain, 0);
        spec.gate = false; // tanh is not neutral, so the gate stays off here
        let layer = make_layer(
            3,
            SymmetryClass::DihedralDistance,
            8,
            spec,
            true,
            GraphInit::Identity,
            3,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 10, 8], 1.0, &mut rng);
        let fast = layer.attention(&x, &ClassMasks::none());
        let slow = layer.reference_attention(&x);
        assert!(max_abs_diff(&fast, &slow) < 1e-12);
    }

    #[test]
    fn near_identity_structured_weights_do_not_reduce() {
        let mut spec = full_spec(2, ScoreMode::Plain, 0);
        spec.gate = false;
        let layer = make_layer(
            3,
            SymmetryClass::DihedralDistance,
            8,
            spec,
            true,
            GraphInit::NearIdentity { std: 0.1 },
            5,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[2, 10, 8], 1.0, &mut rng);
        let fast = layer.attention(&x, &ClassMasks::none());
        let slow = layer.reference_attention(&x);
        assert!(max_abs_diff(&fast, &slow) > 1e-4);
    }

    #[test]
    fn rotate_block_matches_hand_gather() {
        let grid = GridSpec::grid2d(3, 3).unwrap();
        let tri = triangle_map(&grid).unwrap();
        let spec = AttentionSpec {
            rotation_layers: 1,
            ..AttentionSpec::plain(2)
        };
        let layer = make_layer(3, SymmetryClass::DihedralDistance, 4, spec, false, GraphInit::Identity, 7);
        let p = 9;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = Tensor::randn(&[1, 2, p, p], 1.0, &mut rng);
        let nang = tri.num_angle_classes();
        let theta_vals: Vec<f64> = (0..2 * nang).map(|i| 1.0 + 0.1 * i as f64).collect();
        let theta = Tensor::from_vec(&[2, nang], theta_vals.clone());
        let got = layer.rotate_block(&block, &theta);
        let blk = |h: usize, i: usize, j: usize| block.data()[(h * p + i) * p + j];
        let th = |h: usize, c: u32| theta_vals[h * nang + c as usize];
        for h in 0..2 {
            for i in 0..p {
                for j in 0..p {
                    let k = tri.third(i, j);
                    let mut want = th(h, tri.angle_class(0, i, j)) * blk(h, i, j);
                    if i != j {
                        want += th(h, tri.angle_class(1, i, j)) * blk(h, j, k);
                        want += th(h, tri.angle_class(2, i, j)) * blk(h, k, i);
                    }
                    let gotv = got.data()[(h * p + i) * p + j];
                    assert!((gotv - want).abs() < 1e-12, "h={h} i={i} j={j}");
                }
            }
        }
    }

    #[test]
    fn rot90_conjugation_is_equivariant_with_full_machinery() {
        let layer = make_layer(
            3,
            SymmetryClass::DihedralDistance,
            8,
            full_spec(2, ScoreMode::Both, 1),
            true,
            GraphInit::NearIdentity { std: 0.2 },
            9,
        );
        let grid = GridSpec::grid2d(3, 3).unwrap();
        let rot = SymmetryPermutation::from_label(PermLabel::Rot90, &grid).unwrap();
        let perm = extend_perm(&rot.perm, true);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(&[2, 10, 8], 1.0, &mut rng);
        let lhs = layer.attention(&permute_rows(&x, &perm), &ClassMasks::none());
        let rhs = permute_rows(&layer.attention(&x, &ClassMasks::none()), &perm);
        assert!(max_abs_diff(&lhs, &rhs) < 1e-11);
    }

    #[test]
    fn hflip_conjugation_is_broken_by_triangle_passes() {
        let layer = make_layer(
            3,
            SymmetryClass::DihedralDistance,
            8,
            full_spec(2, ScoreMode::Both, 1),
            true,
            GraphInit::NearIdentity { std: 0.2 },
            11,
        );
        let grid = GridSpec::grid2d(3, 3).unwrap();
        let flip = SymmetryPermutation::from_label(PermLabel::HFlip, &grid).unwrap();
        let perm = extend_perm(&flip.perm, true);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[2, 10, 8], 1.0, &mut rng);
        let lhs = layer.attention(&permute_rows(&x, &perm), &ClassMasks::none());
        let rhs = permute_rows(&layer.attention(&x, &ClassMasks::none()), &perm);
        assert!(max_abs_diff(&lhs, &rhs) > 1e-3);
    }

    #[test]
    fn hflip_stays_equivariant_without_triangle_passes() {
        let layer = make_layer(
            3,
            SymmetryClass::DihedralDistance,
            8,
            full_spec(2, ScoreMode::Both, 0),
            true,
            GraphInit::NearIdentity { std: 0.2 },
            13,
        );
        let grid = GridSpec::grid2d(3, 3).unwrap();
        let flip = SymmetryPermutation::from_label(PermLabel::HFlip, &grid).unwrap();
        let perm = extend_perm(&flip.perm, true);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::randn(&[2, 10, 8], 1.0, &mut rng);
        let lhs = layer.attention(&permute_rows(&x, &perm), &ClassMasks::none());
        let rhs = permute_rows(&layer.attention(&x, &ClassMasks::none()), &perm);
        assert!(max_abs_diff(&lhs, &rhs) < 1e-11);
    }

    #[test]
    fn class_dropout_preserves_equivariance() {
        let layer = make_layer(
            3,
            SymmetryClass::DihedralDistance,
            8,
            full_spec(2, ScoreMode::Symmetric, 1),
            true,
            GraphInit::NearIdentity { std: 0.2 },
            15,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let masks = layer.sample_class_masks(0.4, &mut rng);
        assert!(masks.gq.is_some() && masks.hadamard.is_some() && masks.gate_b.is_some());
        let grid = GridSpec::grid2d(3, 3).unwrap();
        let rot = SymmetryPermutation::from_label(PermLabel::Rot90, &grid).unwrap();
        let perm = extend_perm(&rot.perm, true);
        let x = Tensor::randn(&[2, 10, 8], 1.0, &mut rng);
        let lhs = layer.attention(&permute_rows(&x, &perm), &masks);
        let rhs = permute_rows(&layer.attention(&x, &masks), &perm);
        assert!(max_abs_diff(&lhs, &rhs) < 1e-11);
    }

    #[test]
    fn both_mode_sums_the_branch_softmaxes() {
        let base = make_layer(
            3,
            SymmetryClass::DihedralDistance,
            8,
            full_spec(2, ScoreMode::Both, 1),
            true,
            GraphInit::NearIdentity { std: 0.2 },
            17,
        );
        let mut sym = base.clone();
        sym.score_mode = ScoreMode::Symmetric;
        let mut anti = base.clone();
        anti.score_mode = ScoreMode::Antisymmetric;
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = Tensor::randn(&[2, 10, 8], 1.0, &mut rng);
        let both = base.attention(&x, &ClassMasks::none());
        let summed = sym
            .attention(&x, &ClassMasks::none())
            .add(&anti.attention(&x, &ClassMasks::none()));
        assert!(max_abs_diff(&both, &summed) < 1e-10);
    }

    #[test]
    fn every_parameter_matches_finite_difference() {
        let mut layer = make_layer(
            2,
            SymmetryClass::DihedralDistance,
            4,
            full_spec(2, ScoreMode::Both, 2),
            true,
            GraphInit::NearIdentity { std: 0.2 },
            19,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = Tensor::randn(&[2, 5, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 5, 4], 1.0, &mut rng);
        let eval = |layer: &GsaLayer<f64>| -> f64 {
            layer.forward(&x, &ClassMasks::none()).mul(&w).sum_all().item()
        };
        layer
            .forward(&x, &ClassMasks::none())
            .mul(&w)
            .sum_all()
            .backward();
        let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
        layer.visit_params("l", &mut |name, t| {
            grads.push((
                name.clone(),
                t.grad().unwrap_or_else(|| panic!("{name} got no gradient")),
            ));
        });
        assert!(grads.iter().any(|(n, _)| n.contains("theta1")));
        assert!(grads.iter().any(|(n, _)| n.contains("gate_b")));
        let h = 1e-5;
        let nudge = |layer: &mut GsaLayer<f64>, name: &str, j: usize, delta: f64| {
            layer.visit_params("l", &mut |n, t| {
                if n == name {
                    let mut data = t.data().to_vec();
                    data[j] += delta;
                    *t = Tensor::param(t.shape(), data);
                }
            });
        };
        for (name, grad) in &grads {
            for j in 0..grad.len() {
                nudge(&mut layer, name, j, h);
                let up = eval(&layer);
                nudge(&mut layer, name, j, -2.0 * h);
                let dn = eval(&layer);
                nudge(&mut layer, name, j, h);
                let fd = (up - dn) / (2.0 * h);
                let scale = grad[j].abs().max(fd.abs()).max(1.0);
                assert!(
                    (grad[j] - fd).abs() / scale < 1e-6,
                    "{name}[{j}]: analytic {} vs finite-diff {fd}",
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn constructor_rejects_bad_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let grid = GridSpec::grid2d(3, 3).unwrap();
        let classes = Rc::new(edge_classes(&grid, SymmetryClass::DihedralDistance).unwrap());

        // heads must divide dim
        assert!(GsaLayer::<f64>::new(
            8,
            9,
            true,
            &AttentionSpec::plain(3),
            None,
            None,
            GraphInit::Identity,
            &mut rng
        )
        .is_err());

        // structured matrices need classes
        let spec = AttentionSpec { gq: true, ..AttentionSpec::plain(2) };
        assert!(GsaLayer::<f64>::new(8, 9, true, &spec, None, None, GraphInit::Identity, &mut rng)
            .is_err());

        // rotation passes need triangles
        let spec = AttentionSpec { rotation_layers: 1, ..AttentionSpec::plain(2) };
        assert!(GsaLayer::<f64>::new(
            8,
            9,
            true,
            &spec,
            Some(classes.clone()),
            None,
            GraphInit::Identity,
            &mut rng
        )
        .is_err());

        // class map position count must match
        let spec = AttentionSpec { gq: true, ..AttentionSpec::plain(2) };
        assert!(GsaLayer::<f64>::new(
            8,
            4,
            true,
            &spec,
            Some(classes),
            None,
            GraphInit::Identity,
            &mut rng
        )
        .is_err());
    }
}
