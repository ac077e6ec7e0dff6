//! Positional and type embeddings.
//!
//! * 2-d rotary embeddings over token grids (first half of the head rotated by
//!   row, second half by column) and 1-d rotary embeddings over layer order.
//! * The content offset that moves content-token positions away from the
//!   layout grid before cross-attention.
//! * Sinusoidal timestep features and a learned condition-kind table.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{Init, VarBuilder};
use crate::numerics::{Scalar, Tensor};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Per-token rotation angles for rotary embeddings: `[tokens, head_dim / 2]`.
#[derive(Debug, Clone)]
pub struct RotaryTable {
    tokens: usize,
    head_dim: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotaryTable {
    fn from_angles(tokens: usize, head_dim: usize, angles: Vec<f64>) -> Self {
        let cos = angles.iter().map(|a| a.cos()).collect();
        let sin = angles.iter().map(|a| a.sin()).collect();
        Self { tokens, head_dim, cos, sin }
    }

    /// Axial 2-d table: pairs in the first half of the head rotate with the
    /// row index, pairs in the second half with the column index.
    pub fn grid_2d(head_dim: usize, positions: &[(usize, usize)], base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::Config(format!("2-d rotary embedding needs head_dim divisible by 4, got {head_dim}")));
        }
        let quarter = head_dim / 4;
        let freqs: Vec<f64> = (0..quarter).map(|k| base.powf(-(k as f64) / quarter as f64)).collect();
        let mut angles = Vec::with_capacity(positions.len() * head_dim / 2);
        for &(i, j) in positions {
            angles.extend(freqs.iter().map(|f| i as f64 * f));
            angles.extend(freqs.iter().map(|f| j as f64 * f));
        }
        Ok(Self::from_angles(positions.len(), head_dim, angles))
    }

    /// 1-d table over integer positions (layer orders).
    pub fn orders_1d(head_dim: usize, orders: &[usize], base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!("rotary embedding needs an even head_dim, got {head_dim}")));
        }
        let half = head_dim / 2;
        let freqs: Vec<f64> = (0..half).map(|k| base.powf(-(k as f64) / half as f64)).collect();
        let angles = orders.iter().flat_map(|&o| freqs.iter().map(move |f| o as f64 * f)).collect();
        Ok(Self::from_angles(orders.len(), head_dim, angles))
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Rotates `x: [..., tokens, head_dim]` pairwise.
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.rotate(x, false)
    }

    /// Inverse rotation.
    pub fn apply_inverse<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.rotate(x, true)
    }

    fn rotate<T: Scalar>(&self, x: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
        let r = x.rank();
        if r < 2 || x.dim(r - 1) != self.head_dim || x.dim(r - 2) != self.tokens {
            return Err(dim_err!("rotary table for [{}, {}] applied to {:?}", self.tokens, self.head_dim, x.shape()));
        }
        let half = self.head_dim / 2;
        let sign = if inverse { -1.0 } else { 1.0 };
        let cos: Vec<T> = self.cos.iter().map(|&c| T::from_f64c(c)).collect();
        let sin: Vec<T> = self.sin.iter().map(|&s| T::from_f64c(s * sign)).collect();
        let per_seq = self.tokens * self.head_dim;
        let mut out = x.to_vec();
        rotate_pairs(&mut out, &cos, &sin, per_seq, half, false);
        Ok(Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], move |g, _| {
            let mut gx = g.to_vec();
            rotate_pairs(&mut gx, &cos, &sin, per_seq, half, true);
            vec![Some(gx)]
        }))
    }
}

fn rotate_pairs<T: Scalar>(data: &mut [T], cos: &[T], sin: &[T], per_seq: usize, half: usize, transpose: bool) {
    for seq in data.chunks_mut(per_seq) {
        for (tok, row) in seq.chunks_mut(2 * half).enumerate() {
            for p in 0..half {
                let (c, s) = (cos[tok * half + p], sin[tok * half + p]);
                let s = if transpose { -s } else { s };
                let (a, b) = (row[2 * p], row[2 * p + 1]);
                row[2 * p] = a * c - b * s;
                row[2 * p + 1] = a * s + b * c;
            }
        }
    }
}

/// Rotates each token of `x: [tokens, dim]` by its grid position.
pub fn rope_apply_2d<T: Scalar>(x: &Tensor<T>, positions: &[(usize, usize)], base: f64) -> Result<Tensor<T>> {
    let dim = *x.shape().last().ok_or_else(|| dim_err!("rope on a scalar"))?;
    RotaryTable::grid_2d(dim, positions, base)?.apply(x)
}

/// Rotates each layer row of `x: [layers, dim]` by its order id.
pub fn rope_apply_1d<T: Scalar>(x: &Tensor<T>, orders: &[usize], base: f64) -> Result<Tensor<T>> {
    let dim = *x.shape().last().ok_or_else(|| dim_err!("rope on a scalar"))?;
    RotaryTable::orders_1d(dim, orders, base)?.apply(x)
}

/// Row-major positions of an `h x w` token grid.
pub fn grid_positions(h: usize, w: usize) -> Vec<(usize, usize)> {
    (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).collect()
}

/// Fixed shift added to content-token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffsetDelta {
    pub row: usize,
    pub col: usize,
}

impl OffsetDelta {
    /// Default: the grid extent, which makes content and layout coordinate
    /// ranges disjoint.
    pub fn for_grid(h: usize, w: usize) -> Self {
        Self { row: h, col: w }
    }

    pub fn zero() -> Self {
        Self { row: 0, col: 0 }
    }
}

pub fn content_positions(layout_positions: &[(usize, usize)], delta: OffsetDelta) -> Vec<(usize, usize)> {
    layout_positions.iter().map(|&(i, j)| (i + delta.row, j + delta.col)).collect()
}

/// Interleaved `[sin(t f0), cos(t f0), sin(t f1), ...]` with
/// `f_k = 10000^(-2k/dim)`. Requires `t < limit`.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize, limit: usize) -> Result<Tensor<T>> {
    let v = timestep_values(t, dim, limit)?;
    Tensor::from_f64(&[dim], &v)
}

pub fn timestep_embedding_batch<T: Scalar>(ts: &[usize], dim: usize, limit: usize) -> Result<Tensor<T>> {
    let mut all = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        all.extend(timestep_values(t, dim, limit)?);
    }
    Tensor::from_f64(&[ts.len(), dim], &all)
}

fn timestep_values(t: usize, dim: usize, limit: usize) -> Result<Vec<f64>> {
    if t >= limit {
        return Err(Error::Contract(format!("timestep {t} outside [0, {limit})")));
    }
    if dim % 2 != 0 {
        return Err(Error::Config(format!("timestep embedding width must be even, got {dim}")));
    }
    let mut v = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let f = DEFAULT_ROPE_BASE.powf(-2.0 * k as f64 / dim as f64);
        v.push((t as f64 * f).sin());
        v.push((t as f64 * f).cos());
    }
    Ok(v)
}

/// Condition kinds. Layout kinds (`Dot`, `Box`, `Mask`) and content kinds
/// (`Edge`, `Color`) share one embedding registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    Dot,
    Box,
    Mask,
    Edge,
    Color,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 5] = [ConditionKind::Dot, ConditionKind::Box, ConditionKind::Mask, ConditionKind::Edge, ConditionKind::Color];
    pub const LAYOUTS: [ConditionKind; 3] = [ConditionKind::Dot, ConditionKind::Box, ConditionKind::Mask];
    pub const CONTENTS: [ConditionKind; 2] = [ConditionKind::Edge, ConditionKind::Color];

    pub fn name(self) -> &'static str {
        match self {
            ConditionKind::Dot => "dot",
            ConditionKind::Box => "box",
            ConditionKind::Mask => "mask",
            ConditionKind::Edge => "edge",
            ConditionKind::Color => "color",
        }
    }

    pub fn is_layout(self) -> bool {
        matches!(self, ConditionKind::Dot | ConditionKind::Box | ConditionKind::Mask)
    }

    /// Input channels of the condition raster.
    pub fn channels(self) -> usize {
        if self == ConditionKind::Color {
            3
        } else {
            1
        }
    }
}

impl fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConditionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConditionKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::Lookup(format!("unknown condition kind {s:?}")))
    }
}

/// Learned vector per registered condition kind; added to the time-embedding
/// pathway of the layout blocks.
pub struct TypeEmbedding<T: Scalar> {
    kinds: Vec<ConditionKind>,
    table: Tensor<T>,
}

impl<T: Scalar> TypeEmbedding<T> {
    pub fn new(vb: &VarBuilder<T>, kinds: &[ConditionKind], dim: usize) -> Result<Self> {
        Ok(Self { kinds: kinds.to_vec(), table: vb.var("table", &[kinds.len(), dim], Init::Normal(0.5))? })
    }

    pub fn dim(&self) -> usize {
        self.table.dim(1)
    }

    fn index(&self, kind: ConditionKind) -> Result<usize> {
        self.kinds.iter().position(|&k| k == kind).ok_or_else(|| Error::Lookup(format!("condition kind {kind} is not registered")))
    }

    /// `[kinds.len(), dim]`.
    pub fn lookup(&self, kinds: &[ConditionKind]) -> Result<Tensor<T>> {
        let ids = kinds.iter().map(|&k| self.index(k)).collect::<Result<Vec<_>>>()?;
        self.table.gather_rows(&ids)
    }

    pub fn embed(&self, kind: ConditionKind) -> Result<Tensor<T>> {
        self.lookup(&[kind])?.reshape(&[self.dim()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::VarStore;
    use crate::numerics::Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn origin_is_identity() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::randn(&[1, 8], 1.0, &mut rng);
        assert_eq!(rope_apply_2d(&x, &[(0, 0)], DEFAULT_ROPE_BASE).unwrap().to_vec(), x.to_vec());
        assert_eq!(rope_apply_1d(&x, &[0], DEFAULT_ROPE_BASE).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn odd_or_misaligned_dims_are_config_errors() {
        let x = Tensor::<f64>::zeros(&[1, 6]);
        assert!(matches!(rope_apply_2d(&x, &[(1, 1)], DEFAULT_ROPE_BASE), Err(Error::Config(_))));
        let y = Tensor::<f64>::zeros(&[1, 5]);
        assert!(matches!(rope_apply_1d(&y, &[1], DEFAULT_ROPE_BASE), Err(Error::Config(_))));
    }

    #[test]
    fn inverse_recovers_input() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng);
        let table = RotaryTable::grid_2d(8, &[(1, 2), (5, 0), (7, 7)], DEFAULT_ROPE_BASE).unwrap();
        let back = table.apply_inverse(&table.apply(&x).unwrap()).unwrap();
        for (a, b) in back.to_vec().iter().zip(x.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn swapped_orders_change_keys() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f64>::randn(&[2, 8], 1.0, &mut rng);
        let a = rope_apply_1d(&x, &[0, 1], DEFAULT_ROPE_BASE).unwrap().to_vec();
        let b = rope_apply_1d(&x, &[1, 0], DEFAULT_ROPE_BASE).unwrap().to_vec();
        let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn one_dim_relative_shift() {
        let mut rng = Rng::new(4);
        let q = Tensor::<f64>::randn(&[1, 8], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[1, 8], 1.0, &mut rng);
        let lhs = dot(&rope_apply_1d(&q, &[5], DEFAULT_ROPE_BASE).unwrap().to_vec(), &rope_apply_1d(&k, &[8], DEFAULT_ROPE_BASE).unwrap().to_vec());
        let rhs = dot(&rope_apply_1d(&q, &[0], DEFAULT_ROPE_BASE).unwrap().to_vec(), &rope_apply_1d(&k, &[3], DEFAULT_ROPE_BASE).unwrap().to_vec());
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn content_offset_examples() {
        assert_eq!(content_positions(&[(3, 5)], OffsetDelta::zero()), vec![(3, 5)]);
        assert_eq!(content_positions(&[(3, 5)], OffsetDelta { row: 16, col: 16 }), vec![(19, 21)]);
    }

    #[test]
    fn timestep_zero_alternates() {
        let v = timestep_embedding::<f64>(0, 8, 10).unwrap().to_vec();
        assert_eq!(v, vec![0., 1., 0., 1., 0., 1., 0., 1.]);
        assert!(matches!(timestep_embedding::<f64>(10, 8, 10), Err(Error::Contract(_))));
        let a = timestep_embedding::<f64>(3, 8, 10).unwrap().to_vec();
        let b = timestep_embedding::<f64>(4, 8, 10).unwrap().to_vec();
        assert_ne!(a, b);
    }

    #[test]
    fn type_embedding_lookup() {
        let store = VarStore::<f64>::new();
        let vb = store.root(Rng::new(0));
        let emb = TypeEmbedding::new(&vb, &ConditionKind::LAYOUTS, 8).unwrap();
        let a = emb.embed(ConditionKind::Dot).unwrap().to_vec();
        assert_eq!(a, emb.embed(ConditionKind::Dot).unwrap().to_vec());
        assert_ne!(a, emb.embed(ConditionKind::Mask).unwrap().to_vec());
        assert!(matches!(emb.embed(ConditionKind::Edge), Err(Error::Lookup(_))));
        assert!(matches!("sparkle".parse::<ConditionKind>(), Err(Error::Lookup(_))));
    }
}
