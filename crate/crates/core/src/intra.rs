//! Intra-element controller: moves one element's content features onto its
//! target layout.
//!
//! Content rasters (canonical canvas) go through small per-kind conv
//! encoders. The layout raster is embedded into `f0`, then every layout block
//! runs a modulated ResBlock and a transformer whose cross-attention reads
//! the content tokens at positions shifted by the content offset. A
//! convolution of the block output, re-standardised to the content
//! statistics, is the level's transformed feature.

use std::cell::Cell;

use crate::config::{LevelSpec, ModelConfig};
use crate::embeddings::{content_positions, grid_positions, ConditionKind, RotaryTable, TypeEmbedding};
use crate::error::{dim_err, Error, Result};
use crate::nn::{from_tokens, to_tokens, Attention, Conv2d, FeedForward, Init, LayerNorm, Linear, ResBlock, TimeMlp, VarBuilder};
use crate::numerics::{Scalar, Tensor};

/// Floor on the standard deviation of the transformed features.
pub const CROSS_NORM_EPS: f64 = 1e-5;

thread_local! {
    static CROSS_NORM_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: when set, [`cross_normalize`] returns slightly mis-scaled
/// output on the calling thread. Used to check that the verification suite
/// notices.
pub fn set_cross_norm_fault(on: bool) {
    CROSS_NORM_FAULT.with(|f| f.set(on));
}

/// Per-channel, per-sample standardisation of `h: [B, N, C]` followed by a
/// rescale to the mean and standard deviation of `reference: [B, M, C]`.
pub fn cross_normalize<T: Scalar>(h: &Tensor<T>, reference: &Tensor<T>) -> Result<Tensor<T>> {
    if h.rank() != 3 || reference.rank() != 3 || h.dim(0) != reference.dim(0) || h.dim(2) != reference.dim(2) {
        return Err(dim_err!("cross_normalize on {:?} with reference {:?}", h.shape(), reference.shape()));
    }
    if reference.dim(1) == 0 || h.dim(1) == 0 {
        return Err(dim_err!("cross_normalize needs nonempty token axes"));
    }
    let eps = T::from_f64c(CROSS_NORM_EPS);
    let mu = h.mean_axis(1, true)?;
    let centered = h.sub(&mu)?;
    let sigma = centered.square().mean_axis(1, true)?.clamp_min(eps * eps).sqrt();
    let mu_r = reference.mean_axis(1, true)?;
    let var_r = reference.sub(&mu_r)?.square().mean_axis(1, true)?;
    let sigma_r = var_r.clamp_min(T::from_f64c(1e-30)).sqrt();
    let out = centered.div(&sigma)?.mul(&sigma_r)?.add(&mu_r)?;
    if CROSS_NORM_FAULT.with(Cell::get) {
        return Ok(out.mul_scalar(T::from_f64c(1.001)).add_scalar(T::from_f64c(1e-3)));
    }
    Ok(out)
}

/// Strided conv stack from the image canvas down to the half-resolution
/// grid, then one more stage to the quarter grid.
struct ConvPyramid<T: Scalar> {
    stem: Vec<Conv2d<T>>,
    trunk: Conv2d<T>,
    down: Conv2d<T>,
}

impl<T: Scalar> ConvPyramid<T> {
    fn new(vb: &VarBuilder<T>, cfg: &ModelConfig, cin: usize) -> Result<Self> {
        let half = cfg.grid() / 2;
        let mut size = cfg.image;
        let mut stem = Vec::new();
        let mut c = cin;
        while size > half {
            size /= 2;
            let out = if size == half { cfg.widths[1] } else { cfg.encoder_width };
            stem.push(Conv2d::new(&vb.pp(format!("stem{}", stem.len())), c, out, 3, 2)?);
            c = out;
        }
        Ok(Self {
            stem,
            trunk: Conv2d::new(&vb.pp("trunk"), cfg.widths[1], cfg.widths[1], 3, 1)?,
            down: Conv2d::new(&vb.pp("down"), cfg.widths[1], cfg.widths[2], 3, 2)?,
        })
    }

    /// Half- and quarter-resolution maps.
    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut h = x.clone();
        for conv in &self.stem {
            h = conv.forward(&h)?.silu();
        }
        let half = self.trunk.forward(&h)?.silu();
        let quarter = self.down.forward(&half)?.silu();
        Ok((half, quarter))
    }
}

struct ContentEncoder<T: Scalar> {
    body: ConvPyramid<T>,
    heads: Vec<Conv2d<T>>,
    from_half: Vec<bool>,
}

/// One trainable encoder per content kind, producing a feature map per
/// controller level.
pub struct ContentEncoders<T: Scalar> {
    kinds: Vec<ConditionKind>,
    encoders: Vec<ContentEncoder<T>>,
}

impl<T: Scalar> ContentEncoders<T> {
    pub fn new(vb: &VarBuilder<T>, cfg: &ModelConfig, kinds: &[ConditionKind]) -> Result<Self> {
        let levels = cfg.levels();
        let mut encoders = Vec::new();
        for &k in kinds {
            if k.is_layout() {
                return Err(Error::Config(format!("{k} is a layout kind, not a content kind")));
            }
            let vbk = vb.pp(k.name());
            let heads = levels
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let cin = if l.size == cfg.grid() / 2 { cfg.widths[1] } else { cfg.widths[2] };
                    Conv2d::new(&vbk.pp(format!("head{i}")), cin, l.channels, 1, 1)
                })
                .collect::<Result<Vec<_>>>()?;
            let from_half = levels.iter().map(|l| l.size == cfg.grid() / 2).collect();
            encoders.push(ContentEncoder { body: ConvPyramid::new(&vbk, cfg, k.channels())?, heads, from_half });
        }
        Ok(Self { kinds: kinds.to_vec(), encoders })
    }

    pub fn kinds(&self) -> &[ConditionKind] {
        &self.kinds
    }

    fn index(&self, kind: ConditionKind) -> Result<usize> {
        self.kinds.iter().position(|&k| k == kind).ok_or_else(|| Error::Lookup(format!("no content encoder for {kind}")))
    }

    /// Per-level maps `[B, s, s, c]` for one condition raster `[B, H, W, C]`.
    pub fn features(&self, kind: ConditionKind, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let enc = &self.encoders[self.index(kind)?];
        if image.rank() != 4 || image.dim(3) != kind.channels() {
            return Err(dim_err!("{kind} condition must be [B,H,W,{}], got {:?}", kind.channels(), image.shape()));
        }
        let (half, quarter) = enc.body.forward(image)?;
        enc.heads.iter().zip(&enc.from_half).map(|(head, &h)| head.forward(if h { &half } else { &quarter })).collect()
    }

    /// Sum over kinds of the per-level maps: the reference features used for
    /// re-standardisation and as transform-loss targets.
    pub fn summed(&self, content: &[(ConditionKind, Tensor<T>)]) -> Result<Vec<Tensor<T>>> {
        let mut acc: Option<Vec<Tensor<T>>> = None;
        for (kind, img) in content {
            let f = self.features(*kind, img)?;
            acc = Some(match acc {
                None => f,
                Some(a) => a.iter().zip(&f).map(|(x, y)| x.add(y)).collect::<Result<_>>()?,
            });
        }
        acc.ok_or_else(|| Error::Contract("element has no content conditions".into()))
    }
}

/// Per-level content tokens `[B, K*N, C]`, kinds concatenated along the
/// token axis.
#[derive(Clone)]
pub struct FeaturePyramid<T: Scalar> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Inputs of one batch of elements.
pub struct IntraInput<T: Scalar> {
    /// Content rasters on the canonical canvas, `[B, H, W, C]` per kind.
    pub content: Vec<(ConditionKind, Tensor<T>)>,
    /// Layout rasters at the target pose, `[B, H, W, 1]`.
    pub layout: Tensor<T>,
    pub layout_kinds: Vec<ConditionKind>,
}

pub struct IntraOutput<T: Scalar> {
    pub f0: Tensor<T>,
    /// Re-standardised transformed features per level, `[B, s, s, c]`.
    pub levels: Vec<Tensor<T>>,
    /// Reference content features per level, `[B, s, s, c]`.
    pub reference: Vec<Tensor<T>>,
}

pub struct LayoutBlock<T: Scalar> {
    level: LevelSpec,
    down: Option<Conv2d<T>>,
    res: ResBlock<T>,
    ln_self: LayerNorm<T>,
    pub self_attn: Attention<T>,
    ln_cross: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    ln_ffn: LayerNorm<T>,
    ffn: FeedForward<T>,
    out: Conv2d<T>,
    layout_rope: RotaryTable,
    content_positions: Vec<(usize, usize)>,
    rope_base: f64,
}

impl<T: Scalar> LayoutBlock<T> {
    fn new(vb: &VarBuilder<T>, cfg: &ModelConfig, prev: LevelSpec, level: LevelSpec) -> Result<Self> {
        let c = level.channels;
        let down = if level.size < prev.size {
            Some(Conv2d::new(&vb.pp("down"), prev.channels, c, 3, 2)?)
        } else if prev.channels != c {
            Some(Conv2d::new(&vb.pp("down"), prev.channels, c, 1, 1)?)
        } else {
            None
        };
        let self_attn = Attention::new(&vb.pp("self_attn"), c, cfg.heads, true)?;
        self_attn.zero_output()?;
        let cross_attn = Attention::new(&vb.pp("cross_attn"), c, cfg.heads, true)?;
        cross_attn.zero_output()?;
        let layout = grid_positions(level.size, level.size);
        let head_dim = self_attn.head_dim();
        Ok(Self {
            level,
            down,
            res: ResBlock::new(&vb.pp("res"), c, c, cfg.emb_dim)?,
            ln_self: LayerNorm::new(&vb.pp("ln_self"), c)?,
            self_attn,
            ln_cross: LayerNorm::new(&vb.pp("ln_cross"), c)?,
            cross_attn,
            ln_ffn: LayerNorm::new(&vb.pp("ln_ffn"), c)?,
            ffn: FeedForward::new(&vb.pp("ffn"), c, cfg.ffn_mult)?,
            out: Conv2d::new(&vb.pp("out"), c, c, 3, 1)?,
            layout_rope: RotaryTable::grid_2d(head_dim, &layout, cfg.rope_base)?,
            content_positions: content_positions(&layout, cfg.delta_for(&level)),
            rope_base: cfg.rope_base,
        })
    }

    pub fn level(&self) -> LevelSpec {
        self.level
    }

    /// Key positions for `kinds` concatenated content condition grids.
    pub fn content_rope(&self, kinds: usize) -> Result<RotaryTable> {
        let pos: Vec<(usize, usize)> = (0..kinds).flat_map(|_| self.content_positions.iter().copied()).collect();
        RotaryTable::grid_2d(self.self_attn.head_dim(), &pos, self.rope_base)
    }

    pub fn layout_rope(&self) -> &RotaryTable {
        &self.layout_rope
    }

    /// `f: [B, s', s', c']`, `h: [B, K*N, c]`, `emb: [B, E]`; returns the next
    /// layout feature and the pre-normalisation transformed feature tokens.
    pub fn forward(&self, f: &Tensor<T>, h: &Tensor<T>, emb: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let c = self.level.channels;
        if h.rank() != 3 || h.dim(2) != c || h.dim(1) % self.level.tokens() != 0 {
            return Err(dim_err!("level expects content tokens [B, K*{}, {c}], got {:?}", self.level.tokens(), h.shape()));
        }
        let f = match &self.down {
            Some(d) => d.forward(f)?,
            None => f.clone(),
        };
        if f.dim(1) != self.level.size || f.dim(3) != c {
            return Err(dim_err!("layout feature {:?} does not match level {:?}", f.shape(), self.level));
        }
        let f = self.res.forward(&f, emb)?;
        let x = to_tokens(&f)?;
        let n = self.ln_self.forward(&x)?;
        let x = x.add(&self.self_attn.forward(&n, &n, Some(&self.layout_rope), Some(&self.layout_rope))?)?;
        let key_rope = self.content_rope(h.dim(1) / self.level.tokens())?;
        let n = self.ln_cross.forward(&x)?;
        let x = x.add(&self.cross_attn.forward(&n, h, Some(&self.layout_rope), Some(&key_rope))?)?;
        let x = x.add(&self.ffn.forward(&self.ln_ffn.forward(&x)?)?)?;
        let f_next = from_tokens(&x, self.level.size, self.level.size)?;
        let h_out = to_tokens(&self.out.forward(&f_next)?)?;
        Ok((f_next, h_out))
    }
}

pub struct IntraController<T: Scalar> {
    time: TimeMlp<T>,
    pub types: TypeEmbedding<T>,
    content_kinds: Vec<ConditionKind>,
    kind_tokens: Vec<Tensor<T>>,
    layout_enc: ConvPyramid<T>,
    pub blocks: Vec<LayoutBlock<T>>,
    /// Zero-initialised projection adding `f0` to the denoiser.
    pub f0_port: Linear<T>,
}

impl<T: Scalar> IntraController<T> {
    pub fn new(vb: &VarBuilder<T>, cfg: &ModelConfig, content_kinds: &[ConditionKind]) -> Result<Self> {
        let levels = cfg.levels();
        let f0_spec = LevelSpec { size: cfg.grid() / 2, channels: cfg.widths[1] };
        let mut blocks = Vec::new();
        let mut prev = f0_spec;
        for (i, &l) in levels.iter().enumerate() {
            blocks.push(LayoutBlock::new(&vb.pp(format!("block{i}")), cfg, prev, l)?);
            prev = l;
        }
        let kind_tokens = levels
            .iter()
            .enumerate()
            .map(|(i, l)| vb.var(&format!("kind_tokens{i}"), &[content_kinds.len(), l.channels], Init::Normal(0.1)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            time: TimeMlp::new(&vb.pp("time"), cfg.time_freq_dim, cfg.emb_dim, cfg.diffusion_steps + 1)?,
            types: TypeEmbedding::new(&vb.pp("types"), &ConditionKind::ALL, cfg.emb_dim)?,
            content_kinds: content_kinds.to_vec(),
            kind_tokens,
            layout_enc: ConvPyramid::new(&vb.pp("layout"), cfg, 1)?,
            blocks,
            f0_port: Linear::zero_port(&vb.pp("f0_port"), cfg.widths[1], cfg.widths[1])?,
        })
    }

    /// Content tokens per level with per-kind embeddings added, kinds
    /// concatenated along the token axis.
    pub fn encode_content(&self, encoders: &ContentEncoders<T>, content: &[(ConditionKind, Tensor<T>)]) -> Result<FeaturePyramid<T>> {
        if content.is_empty() {
            return Err(Error::Contract("element has no content conditions".into()));
        }
        let mut per_level: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.blocks.len()];
        for (kind, img) in content {
            let ki = self.content_kinds.iter().position(|k| k == kind).ok_or_else(|| Error::Lookup(format!("content kind {kind} is not registered")))?;
            for (l, map) in encoders.features(*kind, img)?.iter().enumerate() {
                let tok = to_tokens(map)?.add(&self.kind_tokens[l].gather_rows(&[ki])?)?;
                per_level[l].push(tok);
            }
        }
        let levels = per_level.iter().map(|parts| Tensor::cat(&parts.iter().collect::<Vec<_>>(), 1)).collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid { levels })
    }

    /// `f0` from a `[B, H, W, 1]` layout raster.
    pub fn embed_layout(&self, layout: &Tensor<T>) -> Result<Tensor<T>> {
        if layout.rank() != 4 || layout.dim(3) != 1 {
            return Err(dim_err!("layout raster must be [B,H,W,1], got {:?}", layout.shape()));
        }
        Ok(self.layout_enc.forward(layout)?.0)
    }

    /// Conditioning vector of the layout blocks: time, layout kind and
    /// content kinds.
    pub fn block_embedding(&self, ts: &[usize], layout_kinds: &[ConditionKind], content: &[ConditionKind]) -> Result<Tensor<T>> {
        if ts.len() != layout_kinds.len() {
            return Err(dim_err!("{} timesteps for {} layout kinds", ts.len(), layout_kinds.len()));
        }
        let mut emb = self.time.forward(ts)?.add(&self.types.lookup(layout_kinds)?)?;
        for &k in content {
            emb = emb.add(&self.types.embed(k)?)?;
        }
        Ok(emb)
    }

    pub fn forward(&self, encoders: &ContentEncoders<T>, input: &IntraInput<T>, ts: &[usize]) -> Result<IntraOutput<T>> {
        let b = input.layout.dim(0);
        if input.content.iter().any(|(_, t)| t.dim(0) != b) {
            return Err(dim_err!("content and layout batch sizes differ"));
        }
        let kinds: Vec<ConditionKind> = input.content.iter().map(|(k, _)| *k).collect();
        let pyramid = self.encode_content(encoders, &input.content)?;
        let reference = encoders.summed(&input.content)?;
        let emb = self.block_embedding(ts, &input.layout_kinds, &kinds)?;
        let f0 = self.embed_layout(&input.layout)?;
        let mut f = f0.clone();
        let mut levels = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let (f_next, h) = block.forward(&f, &pyramid.levels[l], &emb)?;
            let s = block.level.size;
            levels.push(from_tokens(&cross_normalize(&h, &to_tokens(&reference[l])?)?, s, s)?);
            f = f_next;
        }
        Ok(IntraOutput { f0, levels, reference })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::VarStore;
    use crate::numerics::Rng;

    fn stats(x: &[f64], n: usize, c: usize, ch: usize) -> (f64, f64) {
        let m = (0..n).map(|i| x[i * c + ch]).sum::<f64>() / n as f64;
        let v = (0..n).map(|i| (x[i * c + ch] - m).powi(2)).sum::<f64>() / n as f64;
        (m, v.sqrt())
    }

    #[test]
    fn cross_normalize_matches_reference_stats() {
        let mut rng = Rng::new(5);
        let h = Tensor::<f64>::randn(&[2, 6, 3], 2.0, &mut rng).add_scalar(4.0);
        let r = Tensor::<f64>::randn(&[2, 9, 3], 0.5, &mut rng).add_scalar(-1.0);
        let out = cross_normalize(&h, &r).unwrap().to_vec();
        let rv = r.to_vec();
        for b in 0..2 {
            for ch in 0..3 {
                let (m, s) = stats(&out[b * 18..], 6, 3, ch);
                let (mr, sr) = stats(&rv[b * 27..], 9, 3, ch);
                assert!((m - mr).abs() < 1e-9 && (s - sr).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_input_maps_to_reference_mean() {
        let h = Tensor::<f64>::full(&[1, 4, 2], 3.0);
        let r = Tensor::<f64>::from_f64(&[1, 2, 2], &[1., 5., 3., 7.]).unwrap();
        assert_eq!(cross_normalize(&h, &r).unwrap().to_vec(), vec![2., 6., 2., 6., 2., 6., 2., 6.]);
    }

    fn tiny() -> ModelConfig {
        ModelConfig { widths: [8, 8, 8], emb_dim: 8, time_freq_dim: 8, encoder_width: 4, diffusion_steps: 10, ..Default::default() }
    }

    #[test]
    fn two_conditions_double_tokens_and_shapes_hold() {
        let cfg = tiny();
        let store = VarStore::<f64>::new();
        let vb = store.root(Rng::new(1));
        let enc = ContentEncoders::new(&vb.pp("enc"), &cfg, &ConditionKind::CONTENTS).unwrap();
        let intra = IntraController::new(&vb.pp("intra"), &cfg, &ConditionKind::CONTENTS).unwrap();
        let mut rng = Rng::new(2);
        let edge = Tensor::<f64>::randn(&[2, 32, 32, 1], 1.0, &mut rng);
        let color = Tensor::<f64>::randn(&[2, 32, 32, 3], 1.0, &mut rng);
        let one = intra.encode_content(&enc, &[(ConditionKind::Edge, edge.clone())]).unwrap();
        let two = intra.encode_content(&enc, &[(ConditionKind::Edge, edge.clone()), (ConditionKind::Color, color.clone())]).unwrap();
        for (l, lv) in cfg.levels().iter().enumerate() {
            assert_eq!(one.levels[l].dim(1), lv.tokens());
            assert_eq!(two.levels[l].dim(1), 2 * lv.tokens());
        }
        let input = IntraInput {
            content: vec![(ConditionKind::Edge, edge), (ConditionKind::Color, color)],
            layout: Tensor::zeros(&[2, 32, 32, 1]),
            layout_kinds: vec![ConditionKind::Mask, ConditionKind::Dot],
        };
        let out = intra.forward(&enc, &input, &[3, 7]).unwrap();
        assert_eq!(out.levels.len(), 4);
        assert_eq!(out.f0.shape(), &[2, 8, 8, 8]);
        assert_eq!(out.levels[2].shape(), &[2, 4, 4, 8]);
        assert!(out.levels.iter().all(|l| l.all_finite()));
    }
}
