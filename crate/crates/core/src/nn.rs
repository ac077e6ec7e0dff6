//! Parameter storage and the small layer vocabulary shared by the denoiser
//! and both controllers. Feature maps are channels-last (`[B, H, W, C]`),
//! token sequences are `[B, N, C]`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::embeddings::{timestep_embedding_batch, RotaryTable};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{scaled_dot_attention, Rng, Scalar, Tensor};

/// Named parameter registry. Cloning shares the same registry.
#[derive(Clone)]
pub struct VarStore<T: Scalar> {
    vars: Rc<RefCell<BTreeMap<String, Tensor<T>>>>,
}

impl<T: Scalar> Default for VarStore<T> {
    fn default() -> Self {
        Self { vars: Rc::new(RefCell::new(BTreeMap::new())) }
    }
}

impl<T: Scalar> VarStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn root(&self, rng: Rng) -> VarBuilder<T> {
        VarBuilder { store: self.clone(), prefix: String::new(), rng: Rc::new(RefCell::new(rng)) }
    }

    pub fn get(&self, name: &str) -> Option<Tensor<T>> {
        self.vars.borrow().get(name).cloned()
    }

    /// All parameters in name order.
    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        self.vars.borrow().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn named_with_prefix(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.named().into_iter().filter(|(k, _)| k.starts_with(prefix)).collect()
    }

    pub fn trainable(&self) -> Vec<(String, Tensor<T>)> {
        self.named().into_iter().filter(|(_, v)| v.requires_grad()).collect()
    }

    /// Marks exactly the parameters accepted by `keep` as trainable.
    pub fn set_trainable(&self, keep: impl Fn(&str) -> bool) {
        for (k, v) in self.vars.borrow().iter() {
            v.set_requires_grad(keep(k)).expect("store holds leaves only");
        }
    }

    pub fn num_params(&self) -> usize {
        self.vars.borrow().values().map(|v| v.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for v in self.vars.borrow().values() {
            v.zero_grad();
        }
    }

    fn insert(&self, name: String, t: Tensor<T>) -> Result<()> {
        let mut vars = self.vars.borrow_mut();
        if vars.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        vars.insert(name, t);
        Ok(())
    }
}

/// Parameter initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

/// Hierarchical parameter constructor, in the spirit of `VarBuilder` APIs.
#[derive(Clone)]
pub struct VarBuilder<T: Scalar> {
    store: VarStore<T>,
    prefix: String,
    rng: Rc<RefCell<Rng>>,
}

impl<T: Scalar> VarBuilder<T> {
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() { name.as_ref().to_string() } else { format!("{}.{}", self.prefix, name.as_ref()) };
        Self { store: self.store.clone(), prefix, rng: self.rng.clone() }
    }

    pub fn store(&self) -> &VarStore<T> {
        &self.store
    }

    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = {
            let mut rng = self.rng.borrow_mut();
            match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Normal(std) => (0..n).map(|_| T::from_f64c(rng.normal() * std)).collect(),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| T::from_f64c(rng.uniform_range(-bound, bound))).collect()
                }
            }
        };
        let t = Tensor::param(shape, data)?;
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        self.store.insert(full, t.clone())?;
        Ok(t)
    }
}

pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(vb: &VarBuilder<T>, din: usize, dout: usize, bias: bool) -> Result<Self> {
        Ok(Self { weight: vb.var("weight", &[din, dout], Init::FanIn(din))?, bias: if bias { Some(vb.var("bias", &[dout], Init::Zeros)?) } else { None } })
    }

    pub fn zeros(vb: &VarBuilder<T>, din: usize, dout: usize) -> Result<Self> {
        Ok(Self { weight: vb.var("weight", &[din, dout], Init::Zeros)?, bias: Some(vb.var("bias", &[dout], Init::Zeros)?) })
    }

    /// Zero weight and no bias: maps zero to exactly zero.
    pub fn zero_port(vb: &VarBuilder<T>, din: usize, dout: usize) -> Result<Self> {
        Ok(Self { weight: vb.var("weight", &[din, dout], Init::Zeros)?, bias: None })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    stride: usize,
    padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(vb: &VarBuilder<T>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::with_init(vb, cin, cout, kernel, stride, Init::FanIn(kernel * kernel * cin))
    }

    pub fn with_init(vb: &VarBuilder<T>, cin: usize, cout: usize, kernel: usize, stride: usize, init: Init) -> Result<Self> {
        Ok(Self { weight: vb.var("weight", &[kernel, kernel, cin, cout], init)?, bias: vb.var("bias", &[cout], Init::Zeros)?, stride, padding: kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, self.stride, self.padding)?.add(&self.bias)
    }
}

pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(vb: &VarBuilder<T>, dim: usize) -> Result<Self> {
        Ok(Self { gamma: vb.var("gamma", &[dim], Init::Ones)?, beta: vb.var("beta", &[dim], Init::Zeros)?, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(self.eps)?.mul(&self.gamma)?.add(&self.beta)
    }
}

pub struct FeedForward<T: Scalar> {
    fc1: Linear<T>,
    fc2: Linear<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(vb: &VarBuilder<T>, dim: usize, mult: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(&vb.pp("fc1"), dim, dim * mult, true)?, fc2: Linear::new(&vb.pp("fc2"), dim * mult, dim, true)? })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.silu())
    }
}

/// Multi-head attention with optional rotary position tables on queries and
/// keys. With `out_proj = false` the head outputs are returned as is.
pub struct Attention<T: Scalar> {
    q: Linear<T>,
    k: Linear<T>,
    v: Linear<T>,
    out: Option<Linear<T>>,
    heads: usize,
    dim: usize,
}

impl<T: Scalar> Attention<T> {
    pub fn new(vb: &VarBuilder<T>, dim: usize, heads: usize, out_proj: bool) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible into {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(&vb.pp("q"), dim, dim, false)?,
            k: Linear::new(&vb.pp("k"), dim, dim, false)?,
            v: Linear::new(&vb.pp("v"), dim, dim, false)?,
            out: if out_proj { Some(Linear::new(&vb.pp("o"), dim, dim, true)?) } else { None },
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Zeroes the output projection so the block starts as a no-op residual.
    pub fn zero_output(&self) -> Result<()> {
        if let Some(o) = &self.out {
            o.weight.set_data(vec![T::zero(); o.weight.numel()])?;
        }
        Ok(())
    }

    fn split_heads(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.heads == 1 {
            return Ok(x.clone());
        }
        let (b, n) = (x.dim(0), x.dim(1));
        x.reshape(&[b, n, self.heads, self.head_dim()])?.permute(&[0, 2, 1, 3])?.reshape(&[b * self.heads, n, self.head_dim()])
    }

    fn merge_heads(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.heads == 1 {
            return Ok(x.clone());
        }
        let (bh, n) = (x.dim(0), x.dim(1));
        let b = bh / self.heads;
        x.reshape(&[b, self.heads, n, self.head_dim()])?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, self.dim])
    }

    /// `xq: [B, N, C]` attends over `xkv: [B, M, C]`.
    pub fn forward(&self, xq: &Tensor<T>, xkv: &Tensor<T>, rope_q: Option<&RotaryTable>, rope_k: Option<&RotaryTable>) -> Result<Tensor<T>> {
        if xq.rank() != 3 || xkv.rank() != 3 || xq.dim(2) != self.dim || xkv.dim(2) != self.dim || xq.dim(0) != xkv.dim(0) {
            return Err(dim_err!("attention expects [B,N,{}] inputs, got {:?} / {:?}", self.dim, xq.shape(), xkv.shape()));
        }
        let mut q = self.split_heads(&self.q.forward(xq)?)?;
        let mut k = self.split_heads(&self.k.forward(xkv)?)?;
        let v = self.split_heads(&self.v.forward(xkv)?)?;
        if let Some(r) = rope_q {
            q = r.apply(&q)?;
        }
        if let Some(r) = rope_k {
            k = r.apply(&k)?;
        }
        let o = self.merge_heads(&scaled_dot_attention(&q, &k, &v)?)?;
        match &self.out {
            Some(p) => p.forward(&o),
            None => Ok(o),
        }
    }
}

/// Residual conv block modulated by a conditioning vector (time plus type
/// embeddings).
pub struct ResBlock<T: Scalar> {
    norm1: LayerNorm<T>,
    conv1: Conv2d<T>,
    emb: Linear<T>,
    norm2: LayerNorm<T>,
    conv2: Conv2d<T>,
    skip: Option<Conv2d<T>>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new(vb: &VarBuilder<T>, cin: usize, cout: usize, emb_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&vb.pp("norm1"), cin)?,
            conv1: Conv2d::new(&vb.pp("conv1"), cin, cout, 3, 1)?,
            emb: Linear::new(&vb.pp("emb"), emb_dim, cout, true)?,
            norm2: LayerNorm::new(&vb.pp("norm2"), cout)?,
            conv2: Conv2d::with_init(&vb.pp("conv2"), cout, cout, 3, 1, Init::Zeros)?,
            skip: if cin != cout { Some(Conv2d::new(&vb.pp("skip"), cin, cout, 1, 1)?) } else { None },
        })
    }

    /// `x: [B, H, W, Cin]`, `emb: [B, E]`.
    pub fn forward(&self, x: &Tensor<T>, emb: &Tensor<T>) -> Result<Tensor<T>> {
        let b = x.dim(0);
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu())?;
        let e = self.emb.forward(&emb.silu())?;
        let c = e.dim(1);
        let h = h.add(&e.reshape(&[b, 1, 1, c])?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu())?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        skip.add(&h)
    }
}

/// Sinusoidal timestep features followed by a two-layer MLP.
pub struct TimeMlp<T: Scalar> {
    freq_dim: usize,
    max_t: usize,
    fc1: Linear<T>,
    fc2: Linear<T>,
}

impl<T: Scalar> TimeMlp<T> {
    pub fn new(vb: &VarBuilder<T>, freq_dim: usize, emb_dim: usize, max_t: usize) -> Result<Self> {
        Ok(Self { freq_dim, max_t, fc1: Linear::new(&vb.pp("fc1"), freq_dim, emb_dim, true)?, fc2: Linear::new(&vb.pp("fc2"), emb_dim, emb_dim, true)? })
    }

    pub fn forward(&self, ts: &[usize]) -> Result<Tensor<T>> {
        let f = timestep_embedding_batch::<T>(ts, self.freq_dim, self.max_t)?;
        self.fc2.forward(&self.fc1.forward(&f)?.silu())
    }
}

/// `[B, H, W, C]` to `[B, H*W, C]`.
pub fn to_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.reshape(&[x.dim(0), x.dim(1) * x.dim(2), x.dim(3)])
}

/// `[B, H*W, C]` back to `[B, H, W, C]`.
pub fn from_tokens<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if x.dim(1) != h * w {
        return Err(dim_err!("{} tokens do not form a {h}x{w} grid", x.dim(1)));
    }
    x.reshape(&[x.dim(0), h, w, x.dim(2)])
}
