//! Integer grid geometry: vertex indexing, symmetry permutations, edge-class
//! maps and the triangle map behind the rotation layer.
//!
//! All class decisions are made with exact integer arithmetic (signed offsets,
//! squared distances, cross/dot products). Floats never enter; two edges land
//! in the same class iff their integer keys are equal.
//!
//! Permutations use gather form throughout: applying `p` to a vector `x`
//! yields `y` with `y[t] = x[p[t]]`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ===========================================================================
// Grid specification
// ===========================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Grid2d,
    Line1d,
}

/// A rows x cols vertex grid in row-major order; `Line1d` keeps rows == 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub topology: Topology,
}

impl GridSpec {
    pub fn grid2d(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config("grid dimensions must be positive"));
        }
        Ok(GridSpec { rows, cols, topology: Topology::Grid2d })
    }

    pub fn line1d(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::config("line length must be positive"));
        }
        Ok(GridSpec { rows: 1, cols: len, topology: Topology::Line1d })
    }

    /// Number of vertices.
    #[inline]
    pub fn p(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.topology == Topology::Grid2d && self.rows == self.cols
    }

    #[inline]
    pub fn pos(&self, i: usize) -> (i64, i64) {
        ((i / self.cols) as i64, (i % self.cols) as i64)
    }

    #[inline]
    pub fn index(&self, r: i64, c: i64) -> usize {
        r as usize * self.cols + c as usize
    }

    #[inline]
    pub fn contains(&self, r: i64, c: i64) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.rows && (c as usize) < self.cols
    }
}

// ===========================================================================
// Symmetry variants
// ===========================================================================

/// Weight-sharing rule for ordered vertex pairs. Each variant commutes with a
/// known permutation group, returned by [`SymmetryClass::declared_group`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SymmetryClass {
    /// Every ordered pair its own class; commutes only with identity.
    Identity,
    /// Key (|dx|, dy): horizontal flips preserved.
    HFlip,
    /// Key (|dx|, |dy|): horizontal and vertical flips (hence 180 rotation).
    HVFlip,
    /// Key dx^2 + dy^2: the full dihedral group of the square.
    DihedralDistance,
    /// Key signed delta (or delta mod P when cyclic): 1D shifts.
    Shift1d { cyclic: bool },
    /// Key |delta|: 1D reversal.
    Flip1d,
}

impl SymmetryClass {
    pub fn is_1d(&self) -> bool {
        matches!(self, SymmetryClass::Shift1d { .. } | SymmetryClass::Flip1d)
    }

    /// True when the class key depends on the spatial offset alone, which is
    /// what the depthwise-conv materialization requires.
    pub fn offset_keyed(&self) -> bool {
        !matches!(self, SymmetryClass::Identity)
    }

    fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        match (self.is_1d(), grid.topology) {
            (true, Topology::Line1d) | (false, Topology::Grid2d) => Ok(()),
            (true, Topology::Grid2d) => {
                Err(Error::config(format!("{self} requires a line1d grid")))
            }
            (false, Topology::Line1d) => {
                Err(Error::config(format!("{self} requires a grid2d grid")))
            }
        }
    }

    /// Labels of the permutations this variant's classes commute with.
    pub fn declared_labels(&self) -> Vec<PermLabel> {
        use PermLabel::*;
        match self {
            SymmetryClass::Identity => vec![Identity],
            SymmetryClass::HFlip => vec![Identity, HFlip],
            SymmetryClass::HVFlip => vec![Identity, HFlip, VFlip, Rot180],
            SymmetryClass::DihedralDistance => vec![
                Identity, Rot90, Rot180, Rot270, HFlip, VFlip, Transpose, AntiTranspose,
            ],
            SymmetryClass::Shift1d { cyclic: false } => vec![Identity],
            // Placeholder label; concrete shift amounts depend on the grid.
            SymmetryClass::Shift1d { cyclic: true } => vec![Identity, Shift(0)],
            SymmetryClass::Flip1d => vec![Identity, Flip1d],
        }
    }

    /// The concrete permutations of `grid` this variant commutes with.
    pub fn declared_group(&self, grid: &GridSpec) -> Result<Vec<SymmetryPermutation>> {
        self.check_grid(grid)?;
        let mut out = Vec::new();
        match self {
            SymmetryClass::Shift1d { cyclic: true } => {
                out.push(SymmetryPermutation::identity(grid));
                out.extend(cyclic_shift_permutations(grid));
            }
            other => {
                for label in other.declared_labels() {
                    if let Some(p) = SymmetryPermutation::from_label(label, grid) {
                        out.push(p);
                    }
                }
            }
        }
        Ok(out)
    }
}

impl fmt::Display for SymmetryClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SymmetryClass::Identity => "identity",
            SymmetryClass::HFlip => "hflip",
            SymmetryClass::HVFlip => "hvflip",
            SymmetryClass::DihedralDistance => "dihedral_distance",
            SymmetryClass::Shift1d { cyclic: false } => "shift1d",
            SymmetryClass::Shift1d { cyclic: true } => "shift1d_cyclic",
            SymmetryClass::Flip1d => "flip1d",
        };
        f.write_str(s)
    }
}

impl FromStr for SymmetryClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(SymmetryClass::Identity),
            "hflip" => Ok(SymmetryClass::HFlip),
            "hvflip" => Ok(SymmetryClass::HVFlip),
            "dihedral_distance" => Ok(SymmetryClass::DihedralDistance),
            "shift1d" => Ok(SymmetryClass::Shift1d { cyclic: false }),
            "shift1d_cyclic" => Ok(SymmetryClass::Shift1d { cyclic: true }),
            "flip1d" => Ok(SymmetryClass::Flip1d),
            other => Err(Error::config(format!("unknown symmetry variant `{other}`"))),
        }
    }
}

impl Serialize for SymmetryClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SymmetryClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

// ===========================================================================
// Symmetry permutations
// ===========================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermLabel {
    Identity,
    /// Clockwise quarter turn.
    Rot90,
    Rot180,
    /// Counter-clockwise quarter turn.
    Rot270,
    /// Mirror left-right (columns reversed).
    HFlip,
    /// Mirror top-bottom (rows reversed).
    VFlip,
    /// Reflection across the main diagonal.
    Transpose,
    /// Reflection across the anti-diagonal.
    AntiTranspose,
    /// Cyclic 1D shift by the given amount.
    Shift(i64),
    Flip1d,
}

impl fmt::Display for PermLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PermLabel::Identity => write!(f, "identity"),
            PermLabel::Rot90 => write!(f, "rot90"),
            PermLabel::Rot180 => write!(f, "rot180"),
            PermLabel::Rot270 => write!(f, "rot270"),
            PermLabel::HFlip => write!(f, "hflip"),
            PermLabel::VFlip => write!(f, "vflip"),
            PermLabel::Transpose => write!(f, "transpose"),
            PermLabel::AntiTranspose => write!(f, "anti_transpose"),
            PermLabel::Shift(d) => write!(f, "shift{d}"),
            PermLabel::Flip1d => write!(f, "flip1d"),
        }
    }
}

/// A vertex permutation in gather form: `apply(x)[t] = x[perm[t]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymmetryPermutation {
    pub label: PermLabel,
    pub perm: Vec<usize>,
}

impl SymmetryPermutation {
    pub fn identity(grid: &GridSpec) -> Self {
        SymmetryPermutation { label: PermLabel::Identity, perm: (0..grid.p()).collect() }
    }

    /// Builds the permutation for `label` on `grid`, or `None` when the label
    /// does not apply (quarter turns and diagonal reflections need a square
    /// 2D grid; 1D labels need a line).
    pub fn from_label(label: PermLabel, grid: &GridSpec) -> Option<Self> {
        use PermLabel::*;
        let (rows, cols) = (grid.rows as i64, grid.cols as i64);
        let two_d = grid.topology == Topology::Grid2d;
        let square = grid.is_square();
        // src(r, c) = grid position whose value lands at target (r, c).
        let src: Box<dyn Fn(i64, i64) -> (i64, i64)> = match label {
            Identity => Box::new(|r, c| (r, c)),
            Rot90 if square => Box::new(move |r, c| (rows - 1 - c, r)),
            Rot180 if two_d => Box::new(move |r, c| (rows - 1 - r, cols - 1 - c)),
            Rot270 if square => Box::new(move |r, c| (c, cols - 1 - r)),
            HFlip if two_d => Box::new(move |r, c| (r, cols - 1 - c)),
            VFlip if two_d => Box::new(move |r, c| (rows - 1 - r, c)),
            Transpose if square => Box::new(|r, c| (c, r)),
            AntiTranspose if square => Box::new(move |r, c| (cols - 1 - c, rows - 1 - r)),
            Flip1d if grid.topology == Topology::Line1d => {
                Box::new(move |r, c| (r, cols - 1 - c))
            }
            Shift(d) if grid.topology == Topology::Line1d => {
                Box::new(move |r, c| (r, (c + d).rem_euclid(cols)))
            }
            _ => return None,
        };
        let mut perm = Vec::with_capacity(grid.p());
        for r in 0..rows {
            for c in 0..cols {
                let (sr, sc) = src(r, c);
                perm.push(grid.index(sr, sc));
            }
        }
        Some(SymmetryPermutation { label, perm })
    }

    pub fn apply<T: Copy>(&self, x: &[T]) -> Vec<T> {
        self.perm.iter().map(|&s| x[s]).collect()
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0usize; self.perm.len()];
        for (t, &s) in self.perm.iter().enumerate() {
            inv[s] = t;
        }
        inv
    }

    /// Gather-form composition: applying the result equals applying `self`
    /// first, then `other`.
    pub fn compose_after(&self, other: &SymmetryPermutation) -> Vec<usize> {
        other.perm.iter().map(|&t| self.perm[t]).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(t, &s)| t == s)
    }
}

/// The full applicable symmetry set of a grid: all 8 dihedral elements for a
/// square 2D grid, the 4 that survive on a rectangle, and identity + reversal
/// for a line. Cyclic shifts are not included by default; request them with
/// [`cyclic_shift_permutations`].
pub fn symmetry_permutations(grid: &GridSpec) -> Vec<SymmetryPermutation> {
    use PermLabel::*;
    let labels: &[PermLabel] = match grid.topology {
        Topology::Grid2d => &[
            Identity, Rot90, Rot180, Rot270, HFlip, VFlip, Transpose, AntiTranspose,
        ],
        Topology::Line1d => &[Identity, Flip1d],
    };
    labels
        .iter()
        .filter_map(|&l| SymmetryPermutation::from_label(l, grid))
        .collect()
}

/// All nontrivial modular shifts of a line.
pub fn cyclic_shift_permutations(grid: &GridSpec) -> Vec<SymmetryPermutation> {
    if grid.topology != Topology::Line1d {
        return Vec::new();
    }
    (1..grid.p() as i64)
        .filter_map(|d| SymmetryPermutation::from_label(PermLabel::Shift(d), grid))
        .collect()
}

// ===========================================================================
// Edge classes
// ===========================================================================

/// Partition of ordered vertex pairs into weight-sharing classes.
///
/// Class ids are contiguous from 0 and deterministic: keys are sorted and
/// numbered in ascending order, so the same (grid, variant) always yields the
/// same map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeClassMap {
    grid: GridSpec,
    variant: SymmetryClass,
    class_index: Vec<u32>,
    num_classes: usize,
}

fn edge_key(variant: SymmetryClass, grid: &GridSpec, i: usize, j: usize) -> (i64, i64) {
    let (ri, ci) = grid.pos(i);
    let (rj, cj) = grid.pos(j);
    let dy = rj - ri;
    let dx = cj - ci;
    match variant {
        SymmetryClass::Identity => (i as i64, j as i64),
        SymmetryClass::HFlip => (dx.abs(), dy),
        SymmetryClass::HVFlip => (dx.abs(), dy.abs()),
        SymmetryClass::DihedralDistance => (dx * dx + dy * dy, 0),
        SymmetryClass::Shift1d { cyclic: false } => (dx, 0),
        SymmetryClass::Shift1d { cyclic: true } => (dx.rem_euclid(grid.cols as i64), 0),
        SymmetryClass::Flip1d => (dx.abs(), 0),
    }
}

/// Buckets every ordered pair of `grid` by the variant's integer key.
pub fn edge_classes(grid: &GridSpec, variant: SymmetryClass) -> Result<EdgeClassMap> {
    variant.check_grid(grid)?;
    let p = grid.p();
    let mut keys = BTreeMap::new();
    for i in 0..p {
        for j in 0..p {
            keys.entry(edge_key(variant, grid, i, j)).or_insert(0u32);
        }
    }
    for (id, v) in keys.values_mut().enumerate() {
        *v = id as u32;
    }
    let mut class_index = Vec::with_capacity(p * p);
    for i in 0..p {
        for j in 0..p {
            class_index.push(keys[&edge_key(variant, grid, i, j)]);
        }
    }
    Ok(EdgeClassMap { grid: *grid, variant, class_index, num_classes: keys.len() })
}

impl EdgeClassMap {
    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    #[inline]
    pub fn variant(&self) -> SymmetryClass {
        self.variant
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.grid.p()
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn class(&self, i: usize, j: usize) -> u32 {
        self.class_index[i * self.p() + j]
    }

    /// Row-major `[P*P]` table of class ids.
    #[inline]
    pub fn table(&self) -> &[u32] {
        &self.class_index
    }

    /// Class ids that contain a diagonal (i, i) pair. For every variant these
    /// classes contain only diagonal pairs, which is what makes the identity
    /// init scheme well defined.
    pub fn diagonal_classes(&self) -> Vec<u32> {
        let mut out: Vec<u32> = (0..self.p()).map(|i| self.class(i, i)).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Class of the spatial offset `(dr, dc)`, when the variant keys by
    /// offset and the offset occurs between some pair of grid vertices.
    pub fn offset_class(&self, dr: i64, dc: i64) -> Result<Option<u32>> {
        if !self.variant.offset_keyed() {
            return Err(Error::config(
                "identity variant does not tie weights by offset; no conv form exists",
            ));
        }
        let rows = self.grid.rows as i64;
        let cols = self.grid.cols as i64;
        if dr.abs() >= rows || dc.abs() >= cols {
            return Ok(None);
        }
        // Any witness pair realizes the offset; class depends only on the key.
        let r0 = if dr >= 0 { 0 } else { -dr };
        let c0 = if dc >= 0 { 0 } else { -dc };
        let i = self.grid.index(r0, c0);
        let j = self.grid.index(r0 + dr, c0 + dc);
        Ok(Some(self.class(i, j)))
    }
}

/// True iff relabeling vertices by `perm` leaves every pair's class unchanged,
/// i.e. the permutation matrix commutes with every matrix materialized from
/// these classes.
pub fn check_commutation(classes: &EdgeClassMap, perm: &SymmetryPermutation) -> bool {
    let p = classes.p();
    assert_eq!(perm.perm.len(), p, "permutation size does not match grid");
    for i in 0..p {
        for j in 0..p {
            if classes.class(perm.perm[i], perm.perm[j]) != classes.class(i, j) {
                return false;
            }
        }
    }
    true
}

// ===========================================================================
// Triangle map (rotation layer geometry)
// ===========================================================================

/// Per ordered pair (i, j): the third triangle vertex k and the three angle
/// class ids in formula position order.
///
/// Position 0 weights the (i, j) entry and carries the interior angle at j;
/// position 1 weights (j, k) with the angle at k; position 2 weights (k, i)
/// with the angle at i. k is found by turning right at j; at a boundary where
/// the right turn exits the grid a left turn is tried, and if that exits too
/// the triangle degenerates to k = j and all three positions share the
/// reserved degenerate class 0. Diagonal (i, i) entries are degenerate with
/// k = i.
#[derive(Debug, Clone)]
pub struct TriangleMap {
    grid: GridSpec,
    third_vertex: Vec<usize>,
    /// `[3 * P * P]`; position-major: `angle_class[m * P*P + i*P + j]`.
    angle_class: Vec<u32>,
    num_angle_classes: usize,
}

pub const DEGENERATE_ANGLE_CLASS: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum AngleKey {
    Degenerate,
    /// (sign of cos, reduced numerator of cos^2, reduced denominator).
    /// cos on [0, pi] is injective, so this triple identifies the angle.
    Cos(i8, i64, i64),
}

fn gcd(mut a: i64, mut b: i64) -> i64 {
    a = a.abs();
    b = b.abs();
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Exact key for the unsigned angle between nonzero integer vectors a and b.
fn angle_key(a: (i64, i64), b: (i64, i64)) -> AngleKey {
    debug_assert!(a != (0, 0) && b != (0, 0));
    let dot = a.0 * b.0 + a.1 * b.1;
    let n2 = (a.0 * a.0 + a.1 * a.1) * (b.0 * b.0 + b.1 * b.1);
    if dot == 0 {
        return AngleKey::Cos(0, 0, 1);
    }
    let num = dot * dot;
    let g = gcd(num, n2);
    AngleKey::Cos(dot.signum() as i8, num / g, n2 / g)
}

/// Third vertex of the triangle for the directed edge i -> j: turn right at j,
/// step to the nearest grid vertex along the turned ray, fall back to a left
/// turn, and degenerate to j if both exit the grid.
fn third_vertex(grid: &GridSpec, i: usize, j: usize) -> usize {
    if i == j {
        return j;
    }
    let (ri, ci) = grid.pos(i);
    let (rj, cj) = grid.pos(j);
    let (dr, dc) = (rj - ri, cj - ci);
    // Right turn in image coordinates (rows grow downward): (dr,dc) -> (dc,-dr).
    for (tr, tc) in [(dc, -dr), (-dc, dr)] {
        let g = gcd(tr, tc);
        let (sr, sc) = (tr / g, tc / g);
        let (kr, kc) = (rj + sr, cj + sc);
        if grid.contains(kr, kc) {
            return grid.index(kr, kc);
        }
    }
    j
}

/// Builds the triangle map for a square 2D grid.
pub fn triangle_map(grid: &GridSpec) -> Result<TriangleMap> {
    if !grid.is_square() || grid.rows < 2 {
        return Err(Error::config(
            "rotation layers need a square grid2d with side >= 2",
        ));
    }
    let p = grid.p();
    let mut thirds = Vec::with_capacity(p * p);
    let mut keys: Vec<[AngleKey; 3]> = Vec::with_capacity(p * p);
    let mut bucket = BTreeMap::new();
    bucket.insert(AngleKey::Degenerate, 0u32);
    for i in 0..p {
        for j in 0..p {
            let k = third_vertex(grid, i, j);
            thirds.push(k);
            let ks = if i == j || k == j {
                [AngleKey::Degenerate; 3]
            } else {
                let pi = grid.pos(i);
                let pj = grid.pos(j);
                let pk = grid.pos(k);
                let d = |a: (i64, i64), b: (i64, i64)| (a.0 - b.0, a.1 - b.1);
                [
                    angle_key(d(pi, pj), d(pk, pj)),
                    angle_key(d(pj, pk), d(pi, pk)),
                    angle_key(d(pk, pi), d(pj, pi)),
                ]
            };
            for k in ks {
                bucket.entry(k).or_insert(0);
            }
            keys.push(ks);
        }
    }
    for (id, v) in bucket.values_mut().enumerate() {
        *v = id as u32;
    }
    debug_assert_eq!(bucket[&AngleKey::Degenerate], DEGENERATE_ANGLE_CLASS);
    let mut angle_class = vec![0u32; 3 * p * p];
    for (pair, ks) in keys.iter().enumerate() {
        for m in 0..3 {
            angle_class[m * p * p + pair] = bucket[&ks[m]];
        }
    }
    Ok(TriangleMap {
        grid: *grid,
        third_vertex: thirds,
        angle_class,
        num_angle_classes: bucket.len(),
    })
}

impl TriangleMap {
    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.grid.p()
    }

    #[inline]
    pub fn num_angle_classes(&self) -> usize {
        self.num_angle_classes
    }

    #[inline]
    pub fn third(&self, i: usize, j: usize) -> usize {
        self.third_vertex[i * self.p() + j]
    }

    #[inline]
    pub fn is_degenerate(&self, i: usize, j: usize) -> bool {
        i == j || self.third(i, j) == j
    }

    /// Angle class at formula position `m` (0, 1 or 2) for the pair (i, j).
    #[inline]
    pub fn angle_class(&self, m: usize, i: usize, j: usize) -> u32 {
        self.angle_class[m * self.p() * self.p() + i * self.p() + j]
    }
}

// ===========================================================================
// Tests
// ===========================================================================
