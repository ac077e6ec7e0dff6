//! Pixel-space DDPM with an epsilon-predicting U-shaped denoiser.
//!
//! The denoiser works on a pixel-unshuffled grid and exposes additive ports
//! after each encoder ResBlock of the half- and quarter-resolution stages,
//! plus one at the entrance of the half-resolution stage for the layout
//! embedding.

use crate::config::ModelConfig;
use crate::error::{dim_err, Error, Result};
use crate::nn::{from_tokens, to_tokens, Attention, Conv2d, Init, LayerNorm, Linear, ResBlock, TimeMlp, VarBuilder};
use crate::numerics::{pixel_shuffle, pixel_unshuffle, Rng, Scalar, Tensor};

/// Linear beta schedule. Timesteps run `1..=T`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("bad schedule: T={steps}, beta in [{beta_start}, {beta_end}]")));
        }
        let betas: Vec<f64> =
            (0..steps).map(|i| if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64 }).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        Self::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.check(t)?])
    }

    /// `β̃_t = β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        Ok(self.beta(t)? * (1.0 - self.alpha_bar(t - 1)?) / (1.0 - self.alpha_bar(t)?))
    }
}

/// `z_t = sqrt(ᾱ_t) z0 + sqrt(1 - ᾱ_t) ε`, with one timestep per leading
/// batch row.
pub fn q_sample<T: Scalar>(s: &NoiseSchedule, z0: &Tensor<T>, ts: &[usize], eps: &Tensor<T>) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() || z0.rank() == 0 || z0.dim(0) != ts.len() {
        return Err(dim_err!("q_sample on {:?} / {:?} with {} timesteps", z0.shape(), eps.shape(), ts.len()));
    }
    let per = z0.numel() / ts.len().max(1);
    let (zd, ed) = (z0.data(), eps.data());
    let mut out = Vec::with_capacity(z0.numel());
    for (b, &t) in ts.iter().enumerate() {
        let ab = s.alpha_bar(s.check(t).map(|i| i + 1)?)?;
        let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in b * per..(b + 1) * per {
            out.push(T::from_f64c(ca * zd[i].to_f64c() + cb * ed[i].to_f64c()));
        }
    }
    Tensor::from_vec(z0.shape(), out)
}

/// `μ(z_t, ε̂) = (z_t - β_t / sqrt(1 - ᾱ_t) ε̂) / sqrt(α_t)`.
pub fn posterior_mean<T: Scalar>(s: &NoiseSchedule, z_t: &Tensor<T>, t: usize, eps_hat: &Tensor<T>) -> Result<Tensor<T>> {
    if z_t.shape() != eps_hat.shape() {
        return Err(dim_err!("posterior mean on {:?} / {:?}", z_t.shape(), eps_hat.shape()));
    }
    let (beta, alpha, ab) = (s.beta(t)?, s.alpha(t)?, s.alpha_bar(t)?);
    let k = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let out = z_t.data().iter().zip(eps_hat.data().iter()).map(|(&z, &e)| T::from_f64c(inv * (z.to_f64c() - k * e.to_f64c()))).collect();
    Tensor::from_vec(z_t.shape(), out)
}

/// One reverse step: posterior mean plus `sqrt(β̃_t)` noise, none at `t = 1`.
pub fn p_sample_step<T: Scalar>(s: &NoiseSchedule, z_t: &Tensor<T>, t: usize, eps_hat: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
    let mean = posterior_mean(s, z_t, t, eps_hat)?;
    if t == 1 {
        return Ok(mean);
    }
    let sd = s.posterior_variance(t)?.sqrt();
    let out = mean.data().iter().map(|&m| T::from_f64c(m.to_f64c() + sd * rng.normal())).collect();
    Tensor::from_vec(mean.shape(), out)
}

/// Features added to the denoiser. `levels[i]` feeds the i-th controller
/// port; `f0` is added (already projected) at the half-resolution entrance.
pub struct Injection<T: Scalar> {
    pub f0: Option<Tensor<T>>,
    pub levels: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Injection<T> {
    pub fn none() -> Self {
        Self { f0: None, levels: Vec::new() }
    }

    pub fn levels(levels: Vec<Tensor<T>>) -> Self {
        Self { f0: None, levels: levels.into_iter().map(Some).collect() }
    }
}

pub struct Denoiser<T: Scalar> {
    patch: usize,
    time: TimeMlp<T>,
    pub class_table: Tensor<T>,
    stem: Conv2d<T>,
    enc0: ResBlock<T>,
    down1: Conv2d<T>,
    enc1: Vec<ResBlock<T>>,
    down2: Conv2d<T>,
    enc2: Vec<ResBlock<T>>,
    /// Zero-initialised, bias-free port projections, one per controller level.
    pub ports: Vec<Linear<T>>,
    mid: ResBlock<T>,
    mid_ln: LayerNorm<T>,
    mid_attn: Attention<T>,
    up2: ResBlock<T>,
    up1: ResBlock<T>,
    up0: ResBlock<T>,
    out_ln: LayerNorm<T>,
    out_conv: Conv2d<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(vb: &VarBuilder<T>, cfg: &ModelConfig, num_classes: usize) -> Result<Self> {
        let [c0, c1, c2] = cfg.widths;
        let e = cfg.emb_dim;
        let cin = 3 * cfg.patch * cfg.patch;
        let enc1 = (0..cfg.blocks[0]).map(|i| ResBlock::new(&vb.pp(format!("enc1_{i}")), c1, c1, e)).collect::<Result<Vec<_>>>()?;
        let enc2 = (0..cfg.blocks[1]).map(|i| ResBlock::new(&vb.pp(format!("enc2_{i}")), c2, c2, e)).collect::<Result<Vec<_>>>()?;
        let ports =
            cfg.levels().iter().enumerate().map(|(i, l)| Linear::zero_port(&vb.pp(format!("port{i}")), l.channels, l.channels)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch: cfg.patch,
            time: TimeMlp::new(&vb.pp("time"), cfg.time_freq_dim, e, cfg.diffusion_steps + 1)?,
            class_table: vb.var("class_table", &[num_classes, e], Init::Normal(0.5))?,
            stem: Conv2d::new(&vb.pp("stem"), cin, c0, 3, 1)?,
            enc0: ResBlock::new(&vb.pp("enc0"), c0, c0, e)?,
            down1: Conv2d::new(&vb.pp("down1"), c0, c1, 3, 2)?,
            enc1,
            down2: Conv2d::new(&vb.pp("down2"), c1, c2, 3, 2)?,
            enc2,
            ports,
            mid: ResBlock::new(&vb.pp("mid"), c2, c2, e)?,
            mid_ln: LayerNorm::new(&vb.pp("mid_ln"), c2)?,
            mid_attn: Attention::new(&vb.pp("mid_attn"), c2, cfg.heads, true)?,
            up2: ResBlock::new(&vb.pp("up2"), 2 * c2, c2, e)?,
            up1: ResBlock::new(&vb.pp("up1"), c2 + c1, c1, e)?,
            up0: ResBlock::new(&vb.pp("up0"), c1 + c0, c0, e)?,
            out_ln: LayerNorm::new(&vb.pp("out_ln"), c0)?,
            out_conv: Conv2d::with_init(&vb.pp("out_conv"), c0, cin, 3, 1, Init::Normal(0.01))?,
        })
    }

    /// Time embedding plus class embedding; `None` classes are dropped
    /// (zero class vector).
    pub fn embedding(&self, ts: &[usize], classes: &[Option<usize>]) -> Result<Tensor<T>> {
        if ts.len() != classes.len() {
            return Err(dim_err!("{} timesteps for {} class labels", ts.len(), classes.len()));
        }
        let ids: Vec<usize> = classes.iter().map(|c| c.unwrap_or(0)).collect();
        let keep: Vec<T> = classes.iter().map(|c| if c.is_some() { T::one() } else { T::zero() }).collect();
        let cls = self.class_table.gather_rows(&ids)?.mul(&Tensor::from_vec(&[ids.len(), 1], keep)?)?;
        self.time.forward(ts)?.add(&cls)
    }

    fn inject(&self, h: Tensor<T>, port: usize, inj: &Injection<T>) -> Result<Tensor<T>> {
        match inj.levels.get(port).and_then(|x| x.as_ref()) {
            Some(f) => {
                if f.shape() != h.shape() {
                    return Err(dim_err!("injection {port} has shape {:?}, port expects {:?}", f.shape(), h.shape()));
                }
                h.add(&self.ports[port].forward(f)?)
            }
            None => Ok(h),
        }
    }

    /// `ε̂(z_t, t, c, injected features)` for `z_t: [B, H, W, 3]`.
    pub fn predict_noise(&self, z_t: &Tensor<T>, ts: &[usize], classes: &[Option<usize>], inj: &Injection<T>) -> Result<Tensor<T>> {
        if z_t.rank() != 4 || z_t.dim(3) != 3 || z_t.dim(0) != ts.len() {
            return Err(dim_err!("denoiser input {:?} with {} timesteps", z_t.shape(), ts.len()));
        }
        if inj.levels.len() > self.ports.len() {
            return Err(dim_err!("{} injections for {} ports", inj.levels.len(), self.ports.len()));
        }
        let emb = self.embedding(ts, classes)?;
        let x = pixel_unshuffle(z_t, self.patch)?;
        let h = self.enc0.forward(&self.stem.forward(&x)?, &emb)?;
        let s0 = h.clone();
        let mut h = self.down1.forward(&h)?;
        if let Some(f0) = &inj.f0 {
            if f0.shape() != h.shape() {
                return Err(dim_err!("layout embedding {:?} does not match {:?}", f0.shape(), h.shape()));
            }
            h = h.add(f0)?;
        }
        let mut port = 0;
        for block in &self.enc1 {
            h = self.inject(block.forward(&h, &emb)?, port, inj)?;
            port += 1;
        }
        let s1 = h.clone();
        h = self.down2.forward(&h)?;
        for block in &self.enc2 {
            h = self.inject(block.forward(&h, &emb)?, port, inj)?;
            port += 1;
        }
        let s2 = h.clone();
        let (hh, ww) = (h.dim(1), h.dim(2));
        h = self.mid.forward(&h, &emb)?;
        let tok = to_tokens(&h)?;
        let n = self.mid_ln.forward(&tok)?;
        h = from_tokens(&tok.add(&self.mid_attn.forward(&n, &n, None, None)?)?, hh, ww)?;
        h = self.up2.forward(&Tensor::cat(&[&h, &s2], 3)?, &emb)?.upsample2x()?;
        h = self.up1.forward(&Tensor::cat(&[&h, &s1], 3)?, &emb)?.upsample2x()?;
        h = self.up0.forward(&Tensor::cat(&[&h, &s0], 3)?, &emb)?;
        let out = self.out_conv.forward(&self.out_ln.forward(&h)?.silu())?;
        pixel_shuffle(&out, self.patch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::VarStore;

    #[test]
    fn schedule_identities() {
        let s = NoiseSchedule::linear(200, 1e-4, 2e-2).unwrap();
        let mut prod = 1.0;
        for t in 1..=200 {
            prod *= 1.0 - s.beta(t).unwrap();
            assert!((s.alpha_bar(t).unwrap() - prod).abs() < 1e-12);
            if t > 1 {
                assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
                assert!(s.beta(t).unwrap() >= s.beta(t - 1).unwrap());
            }
        }
        assert!(matches!(s.beta(0), Err(Error::Contract(_))));
        assert!(matches!(s.beta(201), Err(Error::Contract(_))));
    }

    #[test]
    fn t_one_is_deterministic() {
        let s = NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap();
        let z = Tensor::<f64>::full(&[1, 2, 2, 3], 0.3);
        let e = Tensor::<f64>::full(&[1, 2, 2, 3], -0.1);
        let a = p_sample_step(&s, &z, 1, &e, &mut Rng::new(1)).unwrap();
        let b = p_sample_step(&s, &z, 1, &e, &mut Rng::new(2)).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        assert_eq!(a.shape(), z.shape());
    }

    #[test]
    fn zero_injection_is_bit_exact() {
        let cfg = ModelConfig { widths: [8, 8, 8], emb_dim: 8, time_freq_dim: 8, diffusion_steps: 10, ..Default::default() };
        let store = VarStore::<f32>::new();
        let d = Denoiser::new(&store.root(Rng::new(0)), &cfg, 4).unwrap();
        for p in &d.ports {
            p.weight.set_data(vec![0.5; p.weight.numel()]).unwrap();
        }
        let mut rng = Rng::new(1);
        let z = Tensor::<f32>::randn(&[2, 32, 32, 3], 1.0, &mut rng);
        let plain = d.predict_noise(&z, &[3, 9], &[Some(1), None], &Injection::none()).unwrap();
        let zeros: Vec<Tensor<f32>> = cfg.levels().iter().map(|l| Tensor::zeros(&[2, l.size, l.size, l.channels])).collect();
        let inj = d.predict_noise(&z, &[3, 9], &[Some(1), None], &Injection::levels(zeros)).unwrap();
        assert_eq!(plain.to_vec(), inj.to_vec());
        assert_eq!(plain.shape(), z.shape());
        assert!(plain.all_finite());
    }
}
