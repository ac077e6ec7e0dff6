//! Inter-element controller: occlusion-aware fusion of per-element features.
//!
//! Per level, element features are sorted bottom to top and stacked into
//! `x: [B, L, N, C]`. A spatial transformer (tokens attend within a layer,
//! 2-d rotary positions) predicts sigmoid weights per token; a layer
//! transformer (layers attend within a token, 1-d rotary order positions)
//! predicts softmax weights across layers. Both only rescale `x`; the fused
//! feature is the sum over layers.

use std::cell::Cell;

use crate::config::{InterOptions, LevelSpec, ModelConfig};
use crate::embeddings::{grid_positions, RotaryTable};
use crate::error::{dim_err, Error, Result};
use crate::nn::{from_tokens, to_tokens, Attention, FeedForward, Init, LayerNorm, Linear, VarBuilder};
use crate::numerics::{Scalar, Tensor};

/// Sorted stack of one level: `x: [B, L, N, C]`, `orders = 0..L`.
#[derive(Clone)]
pub struct StackedFeatures<T: Scalar> {
    pub x: Tensor<T>,
    pub orders: Vec<usize>,
}

impl<T: Scalar> StackedFeatures<T> {
    pub fn layers(&self) -> usize {
        self.x.dim(1)
    }
}

/// Sorts `(features [B, N, C], z)` pairs by ascending z and stacks them
/// along a new layer axis.
pub fn sort_and_stack<T: Scalar>(items: &[(Tensor<T>, u32)]) -> Result<StackedFeatures<T>> {
    if items.is_empty() {
        return Err(Error::Contract("nothing to stack".into()));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by_key(|&i| items[i].1);
    if idx.windows(2).any(|w| items[w[0]].1 == items[w[1]].1) {
        return Err(Error::Contract("duplicate layer order".into()));
    }
    let shape = items[0].0.shape().to_vec();
    if shape.len() != 3 || items.iter().any(|(t, _)| t.shape() != shape.as_slice()) {
        return Err(dim_err!("stacked features must share one [B, N, C] shape"));
    }
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    let parts: Vec<Tensor<T>> = idx.iter().map(|&i| items[i].0.reshape(&[b, 1, n, c])).collect::<Result<_>>()?;
    let x = Tensor::cat(&parts.iter().collect::<Vec<_>>(), 1)?;
    Ok(StackedFeatures { x, orders: (0..items.len()).collect() })
}

/// Sum over the layer axis: `[B, L, N, C]` to `[B, N, C]`.
pub fn fuse<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(dim_err!("fuse expects [B, L, N, C], got {:?}", x.shape()));
    }
    x.sum_axis(1, false)
}

/// Shared body of both reweighing transformers over `x: [batch, seq, C]`:
/// pre-norm attention and FFN residuals, then a scalar head per position.
struct ReweighBody<T: Scalar> {
    ln: LayerNorm<T>,
    attn: Attention<T>,
    ln_ffn: LayerNorm<T>,
    ffn: FeedForward<T>,
    head: Linear<T>,
}

impl<T: Scalar> ReweighBody<T> {
    fn new(vb: &VarBuilder<T>, c: usize, cfg: &ModelConfig, zero_head: bool) -> Result<Self> {
        let head = if zero_head {
            Linear::zeros(&vb.pp("head"), c, 1)?
        } else {
            Linear { weight: vb.var("head.weight", &[c, 1], Init::FanIn(c))?, bias: Some(vb.var("head.bias", &[1], Init::Zeros)?) }
        };
        Ok(Self {
            ln: LayerNorm::new(&vb.pp("ln"), c)?,
            attn: Attention::new(&vb.pp("attn"), c, cfg.heads, false)?,
            ln_ffn: LayerNorm::new(&vb.pp("ln_ffn"), c)?,
            ffn: FeedForward::new(&vb.pp("ffn"), c, cfg.ffn_mult)?,
            head,
        })
    }

    /// Per-position logits `[batch, seq, 1]`.
    fn logits(&self, x: &Tensor<T>, rope: Option<&RotaryTable>) -> Result<Tensor<T>> {
        let n = self.ln.forward(x)?;
        let h = x.add(&self.attn.forward(&n, &n, rope, rope)?)?;
        let h = h.add(&self.ffn.forward(&self.ln_ffn.forward(&h)?)?)?;
        self.head.forward(&h)
    }
}

/// Sigmoid spatial weights per layer (zero-initialised head, so every
/// weight starts at exactly one half).
pub struct SpatialReweigh<T: Scalar> {
    body: ReweighBody<T>,
    rope: RotaryTable,
    calls: Cell<usize>,
}

impl<T: Scalar> SpatialReweigh<T> {
    pub fn new(vb: &VarBuilder<T>, level: LevelSpec, cfg: &ModelConfig) -> Result<Self> {
        let body = ReweighBody::new(vb, level.channels, cfg, true)?;
        let rope = RotaryTable::grid_2d(body.attn.head_dim(), &grid_positions(level.size, level.size), cfg.rope_base)?;
        Ok(Self { body, rope, calls: Cell::new(0) })
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    pub fn head(&self) -> &Linear<T> {
        &self.body.head
    }

    pub fn attention(&self) -> &Attention<T> {
        &self.body.attn
    }

    /// Returns the reweighed stack and `w_spatial: [B, L, N, 1]`.
    pub fn forward(&self, s: &StackedFeatures<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.calls.set(self.calls.get() + 1);
        let (b, l, n, c) = (s.x.dim(0), s.x.dim(1), s.x.dim(2), s.x.dim(3));
        if n != self.rope.tokens() {
            return Err(dim_err!("spatial transformer for {} tokens got {n}", self.rope.tokens()));
        }
        let x = s.x.reshape(&[b * l, n, c])?;
        let w = self.body.logits(&x, Some(&self.rope))?.sigmoid();
        let out = x.mul(&w)?.reshape(&[b, l, n, c])?;
        Ok((out, w.reshape(&[b, l, n, 1])?))
    }
}

/// Softmax weights across layers, with 1-d rotary order positions.
pub struct LayerReweigh<T: Scalar> {
    body: ReweighBody<T>,
    rope_base: f64,
    calls: Cell<usize>,
}

impl<T: Scalar> LayerReweigh<T> {
    pub fn new(vb: &VarBuilder<T>, level: LevelSpec, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self { body: ReweighBody::new(vb, level.channels, cfg, false)?, rope_base: cfg.rope_base, calls: Cell::new(0) })
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    pub fn head(&self) -> &Linear<T> {
        &self.body.head
    }

    pub fn attention(&self) -> &Attention<T> {
        &self.body.attn
    }

    /// Returns the reweighed stack and `w_layer: [B, L, N, 1]`. Without the
    /// order embedding the attention sees no layer positions at all.
    pub fn forward(&self, s: &StackedFeatures<T>, order_embedding: bool) -> Result<(Tensor<T>, Tensor<T>)> {
        self.calls.set(self.calls.get() + 1);
        let (b, l, n, c) = (s.x.dim(0), s.x.dim(1), s.x.dim(2), s.x.dim(3));
        if s.orders.len() != l {
            return Err(dim_err!("{} order ids for {l} layers", s.orders.len()));
        }
        let x = s.x.permute(&[0, 2, 1, 3])?.reshape(&[b * n, l, c])?;
        let rope = if order_embedding { Some(RotaryTable::orders_1d(self.body.attn.head_dim(), &s.orders, self.rope_base)?) } else { None };
        let w = self.body.logits(&x, rope.as_ref())?.softmax(1)?;
        let out = x.mul(&w)?.reshape(&[b, n, l, c])?.permute(&[0, 2, 1, 3])?;
        let w = w.reshape(&[b, n, l, 1])?.permute(&[0, 2, 1, 3])?;
        Ok((out, w))
    }
}

pub struct InterLevel<T: Scalar> {
    pub spatial: SpatialReweigh<T>,
    pub layer: LayerReweigh<T>,
}

/// Weights of one fused level, kept for inspection.
pub struct FusionWeights<T: Scalar> {
    pub spatial: Option<Tensor<T>>,
    pub layer: Option<Tensor<T>>,
}

pub struct InterController<T: Scalar> {
    pub levels: Vec<InterLevel<T>>,
    specs: Vec<LevelSpec>,
    options: Cell<InterOptions>,
    unit_weights: Cell<bool>,
}

impl<T: Scalar> InterController<T> {
    pub fn new(vb: &VarBuilder<T>, cfg: &ModelConfig, options: InterOptions) -> Result<Self> {
        let specs = cfg.levels();
        let levels = specs
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let v = vb.pp(format!("level{i}"));
                Ok(InterLevel { spatial: SpatialReweigh::new(&v.pp("spatial"), l, cfg)?, layer: LayerReweigh::new(&v.pp("layer"), l, cfg)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels, specs, options: Cell::new(options), unit_weights: Cell::new(false) })
    }

    pub fn options(&self) -> InterOptions {
        self.options.get()
    }

    pub fn set_options(&self, o: InterOptions) {
        self.options.set(o);
    }

    /// Test hook: every reweighing step multiplies by exactly one.
    pub fn set_unit_weights(&self, on: bool) {
        self.unit_weights.set(on);
    }

    /// Reweighs and fuses one stacked level; returns `[B, N, C]`.
    pub fn forward_level(&self, level: usize, s: &StackedFeatures<T>) -> Result<(Tensor<T>, FusionWeights<T>)> {
        let lv = self.levels.get(level).ok_or_else(|| Error::Lookup(format!("no inter level {level}")))?;
        let opt = self.options.get();
        if self.unit_weights.get() {
            let ones = Tensor::ones(&[s.x.dim(0), s.x.dim(1), s.x.dim(2), 1]);
            let x = s.x.mul(&ones)?.mul(&ones)?;
            return Ok((fuse(&x)?, FusionWeights { spatial: Some(ones.clone()), layer: Some(ones) }));
        }
        let mut cur = s.clone();
        let mut weights = FusionWeights { spatial: None, layer: None };
        if opt.spatial {
            let (x, w) = lv.spatial.forward(&cur)?;
            cur.x = x;
            weights.spatial = Some(w);
        }
        if opt.layer {
            let (x, w) = lv.layer.forward(&cur, opt.order_embedding)?;
            cur.x = x;
            weights.layer = Some(w);
        }
        Ok((fuse(&cur.x)?, weights))
    }

    /// Fuses per-element level maps. `elements[e] = (maps [B, s, s, c] per
    /// level, z)`; returns one fused map per level.
    pub fn forward(&self, elements: &[(Vec<Tensor<T>>, u32)]) -> Result<Vec<Tensor<T>>> {
        if elements.is_empty() {
            return Err(Error::Contract("inter-element fusion needs at least one element".into()));
        }
        if elements.iter().any(|(m, _)| m.len() != self.specs.len()) {
            return Err(dim_err!("every element needs {} levels", self.specs.len()));
        }
        let mut out = Vec::with_capacity(self.specs.len());
        for (l, spec) in self.specs.iter().enumerate() {
            let items = elements.iter().map(|(m, z)| Ok((to_tokens(&m[l])?, *z))).collect::<Result<Vec<_>>>()?;
            let stacked = sort_and_stack(&items)?;
            let (fused, _) = self.forward_level(l, &stacked)?;
            out.push(from_tokens(&fused, spec.size, spec.size)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::VarStore;
    use crate::numerics::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { widths: [8, 8, 8], emb_dim: 8, time_freq_dim: 8, encoder_width: 4, diffusion_steps: 10, ..Default::default() }
    }

    #[test]
    fn stack_sorts_by_order() {
        let a = Tensor::<f64>::full(&[1, 2, 1], 1.0);
        let b = Tensor::<f64>::full(&[1, 2, 1], 2.0);
        let s = sort_and_stack(&[(a.clone(), 5), (b.clone(), 1)]).unwrap();
        assert_eq!(s.x.to_vec(), vec![2., 2., 1., 1.]);
        assert_eq!(s.orders, vec![0, 1]);
        assert!(matches!(sort_and_stack(&[(a.clone(), 1), (b, 1)]), Err(Error::Contract(_))));
        let c = Tensor::<f64>::zeros(&[1, 3, 1]);
        assert!(matches!(sort_and_stack(&[(a, 0), (c, 1)]), Err(Error::Dimension(_))));
    }

    #[test]
    fn init_spatial_is_half_and_single_layer_is_identity() {
        let cfg = tiny();
        let store = VarStore::<f64>::new();
        let inter = InterController::new(&store.root(Rng::new(3)), &cfg, InterOptions::default()).unwrap();
        let mut rng = Rng::new(4);
        let x = Tensor::<f64>::randn(&[2, 1, 64, 8], 1.0, &mut rng);
        let s = StackedFeatures { x: x.clone(), orders: vec![0] };
        let (sp, w) = inter.levels[0].spatial.forward(&s).unwrap();
        assert!(w.to_vec().iter().all(|&v| v == 0.5));
        assert_eq!(sp.to_vec(), x.to_vec().iter().map(|v| v * 0.5).collect::<Vec<_>>());
        let (ly, wl) = inter.levels[0].layer.forward(&s, true).unwrap();
        assert!(wl.to_vec().iter().all(|&v| v == 1.0));
        assert_eq!(ly.to_vec(), x.to_vec());
        let (fused, _) = inter.forward_level(0, &s).unwrap();
        assert_eq!(fused.to_vec(), sp.to_vec());
    }

    #[test]
    fn disabled_components_are_not_called() {
        let cfg = tiny();
        let store = VarStore::<f64>::new();
        let opts = InterOptions { spatial: false, layer: true, order_embedding: true };
        let inter = InterController::new(&store.root(Rng::new(3)), &cfg, opts).unwrap();
        let maps: Vec<Tensor<f64>> = cfg.levels().iter().map(|l| Tensor::ones(&[1, l.size, l.size, l.channels])).collect();
        inter.forward(&[(maps.clone(), 0), (maps, 1)]).unwrap();
        assert!(inter.levels.iter().all(|l| l.spatial.calls() == 0 && l.layer.calls() == 1));
    }
}
