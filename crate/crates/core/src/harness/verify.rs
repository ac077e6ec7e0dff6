//! Named invariant checks run by `dcnet verify`.
//!
//! Each check is self-contained, runs in 64-bit where numerical precision
//! matters, and reports a one-line detail on success or failure.

use std::time::Instant;

use crate::config::{InterOptions, LevelSpec, ModelConfig};
use crate::diffusion::{p_sample_step, posterior_mean, q_sample, Denoiser, Injection, NoiseSchedule};
use crate::embeddings::{grid_positions, RotaryTable};
use crate::error::{Error, Result};
use crate::inter::{InterController, LayerReweigh, SpatialReweigh, StackedFeatures};
use crate::intra::cross_normalize;
use crate::nn::{Attention, Conv2d, ResBlock, VarStore};
use crate::numerics::gradcheck::check_gradients;
use crate::numerics::{Rng, Tensor};
use crate::training::{foreground_weight_mask, mse_loss, total_loss, transform_loss, Checkpoint};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_PROBES: usize = 100;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type CheckFn = fn() -> Result<String>;

fn fail(msg: String) -> Error {
    Error::Invariant(msg)
}

fn tiny() -> ModelConfig {
    ModelConfig { widths: [8, 8, 8], emb_dim: 8, time_freq_dim: 8, encoder_width: 4, diffusion_steps: 10, ..Default::default() }
}

fn param(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let t = Tensor::<f64>::randn(shape, 1.0, rng);
    Tensor::param(shape, t.to_vec()).expect("shape")
}

/// `sum(out * r)` for a fixed random `r`, so every output coordinate matters.
fn project(out: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let r = Tensor::<f64>::randn(out.shape(), 1.0, &mut Rng::new(seed));
    Ok(out.mul(&r)?.sum_all())
}

fn grad_check(inputs: &[(&str, &Tensor<f64>)], loss: impl Fn() -> Result<Tensor<f64>>) -> Result<String> {
    let rep = check_gradients(inputs, loss, GRAD_PROBES, GRAD_STEP, &mut Rng::new(99))?;
    if !rep.passed(GRAD_TOL) {
        return Err(fail(format!("max relative error {:.3e} at {:?}", rep.max_rel_err, rep.worst)));
    }
    Ok(format!("probes={} max_rel_err={:.3e} worst={:?}", rep.probes, rep.max_rel_err, rep.worst))
}

fn with_store_params<'a>(store: &'a [(String, Tensor<f64>)], extra: &[(&'a str, &'a Tensor<f64>)]) -> Vec<(&'a str, &'a Tensor<f64>)> {
    let mut v: Vec<(&str, &Tensor<f64>)> = extra.to_vec();
    v.extend(store.iter().map(|(n, t)| (n.as_str(), t)));
    v
}

fn grad_attention() -> Result<String> {
    let store = VarStore::<f64>::new();
    let attn = Attention::new(&store.root(Rng::new(1)).pp("a"), 8, 2, true)?;
    let mut rng = Rng::new(2);
    let (xq, xkv) = (param(&[2, 4, 8], &mut rng), param(&[2, 6, 8], &mut rng));
    let rq = RotaryTable::grid_2d(4, &grid_positions(2, 2), 100.0)?;
    let rk = RotaryTable::grid_2d(4, &[(0, 0), (0, 1), (1, 0), (1, 1), (2, 2), (3, 1)], 100.0)?;
    let named = store.named();
    grad_check(&with_store_params(&named, &[("xq", &xq), ("xkv", &xkv)]), || project(&attn.forward(&xq, &xkv, Some(&rq), Some(&rk))?, 3))
}

fn grad_rope() -> Result<String> {
    let mut rng = Rng::new(4);
    let x = param(&[2, 6, 8], &mut rng);
    let r2 = RotaryTable::grid_2d(8, &grid_positions(2, 3), 10_000.0)?;
    let r1 = RotaryTable::orders_1d(8, &[0, 1, 2, 3, 4, 5], 10_000.0)?;
    grad_check(&[("x", &x)], || project(&r1.apply(&r2.apply(&x)?)?.add(&r2.apply_inverse(&x)?)?, 5))
}

fn grad_conv() -> Result<String> {
    let store = VarStore::<f64>::new();
    let vb = store.root(Rng::new(6));
    let a = Conv2d::new(&vb.pp("a"), 3, 4, 3, 2)?;
    let b = Conv2d::new(&vb.pp("b"), 4, 2, 3, 1)?;
    let x = param(&[2, 6, 6, 3], &mut Rng::new(7));
    let named = store.named();
    grad_check(&with_store_params(&named, &[("x", &x)]), || project(&b.forward(&a.forward(&x)?.upsample2x()?)?, 8))
}

fn grad_resblock() -> Result<String> {
    let store = VarStore::<f64>::new();
    let block = ResBlock::new(&store.root(Rng::new(9)).pp("r"), 4, 6, 5)?;
    // the second conv starts at zero; give it values so every path is live
    for (n, t) in store.named() {
        if n.contains("conv2") {
            t.set_data(Tensor::<f64>::randn(t.shape(), 0.3, &mut Rng::new(10)).to_vec())?;
        }
    }
    let mut rng = Rng::new(11);
    let (x, emb) = (param(&[2, 4, 4, 4], &mut rng), param(&[2, 5], &mut rng));
    let named = store.named();
    grad_check(&with_store_params(&named, &[("x", &x), ("emb", &emb)]), || project(&block.forward(&x, &emb)?, 12))
}

fn grad_cross_normalize() -> Result<String> {
    let mut rng = Rng::new(13);
    let (h, r) = (param(&[2, 9, 3], &mut rng), param(&[2, 5, 3], &mut rng));
    grad_check(&[("h", &h), ("reference", &r)], || project(&cross_normalize(&h, &r)?, 14))
}

fn live_head(store: &VarStore<f64>) -> Result<()> {
    for (n, t) in store.named() {
        if n.contains("head") {
            t.set_data(Tensor::<f64>::randn(t.shape(), 0.5, &mut Rng::new(15)).to_vec())?;
        }
    }
    Ok(())
}

fn grad_spatial() -> Result<String> {
    let cfg = tiny();
    let store = VarStore::<f64>::new();
    let sp = SpatialReweigh::new(&store.root(Rng::new(16)), LevelSpec { size: 2, channels: 8 }, &cfg)?;
    live_head(&store)?;
    let x = param(&[1, 2, 4, 8], &mut Rng::new(17));
    let named = store.named();
    grad_check(&with_store_params(&named, &[("x", &x)]), || project(&sp.forward(&StackedFeatures { x: x.clone(), orders: vec![0, 1] })?.0, 18))
}

fn grad_layer() -> Result<String> {
    let cfg = tiny();
    let store = VarStore::<f64>::new();
    let ly = LayerReweigh::new(&store.root(Rng::new(19)), LevelSpec { size: 2, channels: 8 }, &cfg)?;
    let x = param(&[1, 3, 4, 8], &mut Rng::new(20));
    let named = store.named();
    grad_check(&with_store_params(&named, &[("x", &x)]), || project(&ly.forward(&StackedFeatures { x: x.clone(), orders: vec![0, 1, 2] }, true)?.0, 21))
}

fn grad_losses() -> Result<String> {
    let mut rng = Rng::new(22);
    let (eps, hat) = (param(&[2, 4, 4, 3], &mut rng), param(&[2, 4, 4, 3], &mut rng));
    let fg: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
    let m = foreground_weight_mask(&fg, 4, 4)?;
    let mt = Tensor::cat(&[&m.to_tensor::<f64>().reshape(&[1, 4, 4, 1])?; 2], 0)?;
    let m2 = m.downsample(2)?.to_tensor::<f64>().reshape(&[1, 2, 2, 1])?;
    let h = param(&[1, 2, 2, 5], &mut rng);
    // keep |h - target| away from the kink of |.|
    let target = h.detach().add(&Tensor::full(&[1, 2, 2, 5], 0.5))?;
    grad_check(&[("eps", &eps), ("eps_hat", &hat), ("h", &h)], || {
        let mse = mse_loss(&eps, &hat, &mt)?;
        let tr = transform_loss(std::slice::from_ref(&h), std::slice::from_ref(&target), std::slice::from_ref(&m2))?;
        total_loss(&mse, Some(&tr), 0.7)
    })
}

fn grad_injection() -> Result<String> {
    let cfg = ModelConfig { blocks: [1, 1], ..tiny() };
    let store = VarStore::<f64>::new();
    let d = Denoiser::new(&store.root(Rng::new(23)), &cfg, 2)?;
    for p in &d.ports {
        p.weight.set_data(Tensor::<f64>::randn(p.weight.shape(), 0.5, &mut Rng::new(24)).to_vec())?;
    }
    store.set_trainable(|_| false);
    let mut rng = Rng::new(25);
    let z = Tensor::<f64>::randn(&[1, 32, 32, 3], 1.0, &mut rng);
    let feats: Vec<Tensor<f64>> = cfg.levels().iter().map(|l| param(&[1, l.size, l.size, l.channels], &mut rng)).collect();
    let inputs: Vec<(&str, &Tensor<f64>)> = feats.iter().map(|f| ("injection", f)).collect();
    grad_check(&inputs, || {
        let inj = Injection { f0: None, levels: feats.iter().cloned().map(Some).collect() };
        project(&d.predict_noise(&z, &[4], &[Some(1)], &inj)?, 26)
    })
}

fn inter_init_weights() -> Result<String> {
    let store = VarStore::<f64>::new();
    let inter = InterController::new(&store.root(Rng::new(27)), &tiny(), InterOptions::default())?;
    let x = Tensor::<f64>::randn(&[2, 3, 64, 8], 1.0, &mut Rng::new(28));
    let s = StackedFeatures { x: x.clone(), orders: vec![0, 1, 2] };
    let (half, w) = inter.levels[0].spatial.forward(&s)?;
    let expect: Vec<f64> = x.to_vec().iter().map(|v| 0.5 * v).collect();
    if half.to_vec() != expect || w.to_vec().iter().any(|&v| v != 0.5) {
        return Err(fail("spatial reweighing at init is not exactly 0.5 x".into()));
    }
    let one = StackedFeatures { x: x.narrow(1, 0, 1)?, orders: vec![0] };
    if inter.levels[0].layer.forward(&one, true)?.0.to_vec() != one.x.to_vec() {
        return Err(fail("layer reweighing with one layer is not the identity".into()));
    }
    let (_, wl) = inter.levels[0].layer.forward(&s, true)?;
    let (b, l, n) = (2, 3, 64);
    let wv = wl.to_vec();
    let mut worst = 0.0f64;
    for bi in 0..b {
        for ni in 0..n {
            let sum: f64 = (0..l).map(|li| wv[(bi * l + li) * n + ni]).sum();
            worst = worst.max((sum - 1.0).abs());
        }
    }
    if worst > 1e-6 {
        return Err(fail(format!("layer weights sum to 1 only within {worst:.3e}")));
    }
    Ok(format!("max |sum w_layer - 1| = {worst:.3e}"))
}

fn channel_stats(x: &[f64], n: usize, c: usize, ch: usize) -> (f64, f64) {
    let m = (0..n).map(|i| x[i * c + ch]).sum::<f64>() / n as f64;
    let v = (0..n).map(|i| (x[i * c + ch] - m).powi(2)).sum::<f64>() / n as f64;
    (m, v.sqrt())
}

fn cross_norm_stats() -> Result<String> {
    let mut rng = Rng::new(29);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (n, m, c) = (2 + rng.below(10), 2 + rng.below(10), 1 + rng.below(4));
        let scale = (rng.uniform_range(-3.0, 3.0)).exp();
        let h = Tensor::<f64>::randn(&[1, n, c], scale, &mut rng).add_scalar(rng.uniform_range(-5.0, 5.0));
        let r = if case % 10 == 0 {
            Tensor::<f64>::full(&[1, m, c], rng.uniform_range(-2.0, 2.0))
        } else {
            Tensor::<f64>::randn(&[1, m, c], rng.uniform_range(0.1, 3.0), &mut rng).add_scalar(rng.uniform_range(-2.0, 2.0))
        };
        let out = cross_normalize(&h, &r)?;
        if !out.all_finite() {
            return Err(fail(format!("non-finite output in case {case}")));
        }
        let (ov, rv) = (out.to_vec(), r.to_vec());
        for ch in 0..c {
            let (mo, so) = channel_stats(&ov, n, c, ch);
            let (mr, sr) = channel_stats(&rv, m, c, ch);
            worst = worst.max((mo - mr).abs()).max((so - sr).abs());
        }
    }
    if worst > 1e-5 {
        return Err(fail(format!("cross_normalize statistics off by {worst:.3e}")));
    }
    Ok(format!("cases=200 max stat error {worst:.3e}"))
}

fn weight_mask_normalization() -> Result<String> {
    let full = foreground_weight_mask(&[true; 1024], 32, 32)?;
    if full.values.iter().any(|&v| v != 1.0) {
        return Err(fail("full foreground does not give m = 1".into()));
    }
    let quarter: Vec<bool> = (0..1024).map(|i| (i / 32) < 16 && (i % 32) < 16).collect();
    if foreground_weight_mask(&quarter, 32, 32)?.foreground_weight() != 4.0 {
        return Err(fail("quarter foreground does not weigh 4".into()));
    }
    let mut rng = Rng::new(30);
    for _ in 0..50 {
        let fg: Vec<bool> = (0..1024).map(|_| rng.bernoulli(0.13)).collect();
        let m = foreground_weight_mask(&fg, 32, 32)?;
        let s: f64 = m.values.iter().zip(&fg).filter(|(_, f)| **f).map(|(v, _)| v).sum();
        if fg.iter().any(|&f| f) && (s - 1024.0).abs() > 1e-9 {
            return Err(fail(format!("foreground weights sum to {s}")));
        }
    }
    Ok("full=1, quarter=4, foreground sum = area".into())
}

fn diffusion_statistics() -> Result<String> {
    let s = NoiseSchedule::linear(200, 1e-4, 2e-2)?;
    let n = 10_000;
    let mut rng = Rng::new(31);
    let mut worst = 0.0f64;
    for t in [1usize, 50, 120, 200] {
        let z0 = Tensor::<f64>::full(&[n, 1], 0.7);
        let eps = Tensor::<f64>::randn(&[n, 1], 1.0, &mut rng);
        let zt = q_sample(&s, &z0, &vec![t; n], &eps)?.to_vec();
        let ab = s.alpha_bar(t)?;
        let mean = zt.iter().sum::<f64>() / n as f64;
        let var = zt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let (em, ev) = (ab.sqrt() * 0.7, 1.0 - ab);
        worst = worst.max((mean - em).abs() / em.abs().max(ev.sqrt())).max((var - ev).abs() / ev);
    }
    if worst > 0.02 {
        return Err(fail(format!("q_sample moments off by {:.2}%", worst * 100.0)));
    }
    let z0 = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
    let t = 37;
    let zt = q_sample(&s, &z0, &[t, t], &eps)?;
    let mu = posterior_mean(&s, &zt, t, &eps)?.to_vec();
    let (ab, abp, beta) = (s.alpha_bar(t)?, s.alpha_bar(t - 1)?, s.beta(t)?);
    let mut err = 0.0f64;
    for i in 0..6 {
        let closed = abp.sqrt() * beta / (1.0 - ab) * z0.to_vec()[i] + (1.0 - beta).sqrt() * (1.0 - abp) / (1.0 - ab) * zt.to_vec()[i];
        err = err.max((mu[i] - closed).abs());
    }
    if err > 1e-10 {
        return Err(fail(format!("posterior mean differs from the closed form by {err:.3e}")));
    }
    let last = p_sample_step(&s, &zt, 1, &eps, &mut Rng::new(1))?.to_vec();
    if last != p_sample_step(&s, &zt, 1, &eps, &mut Rng::new(2))?.to_vec() {
        return Err(fail("t = 1 step is not deterministic".into()));
    }
    Ok(format!("moment error {:.2}%, posterior error {err:.1e}", worst * 100.0))
}

fn attention_oracle() -> Result<String> {
    let mut rng = Rng::new(32);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (n, m, d) = (1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(6));
        let q = Tensor::<f64>::randn(&[1, n, d], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[1, m, d], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[1, m, d], 1.0, &mut rng);
        let got = crate::numerics::scaled_dot_attention(&q, &k, &v)?.to_vec();
        let (qv, kv, vv) = (q.to_vec(), k.to_vec(), v.to_vec());
        for i in 0..n {
            let logits: Vec<f64> = (0..m).map(|j| (0..d).map(|x| qv[i * d + x] * kv[j * d + x]).sum::<f64>() / (d as f64).sqrt()).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for x in 0..d {
                let want: f64 = (0..m).map(|j| e[j] / z * vv[j * d + x]).sum();
                worst = worst.max((got[i * d + x] - want).abs());
            }
        }
    }
    if worst >= 1e-10 {
        return Err(fail(format!("attention differs from brute force by {worst:.3e}")));
    }
    Ok(format!("max |diff| {worst:.1e}"))
}

fn checkpoint_round_trip() -> Result<String> {
    let net = crate::model::DcNet::<f32>::new(&tiny(), InterOptions::default(), 33)?;
    let ck = Checkpoint::capture(&net, crate::config::Stage::Base, 5, None, Some(&Rng::new(3)));
    let mut a = Vec::new();
    ck.write_to(&mut a).map_err(|e| fail(e.to_string()))?;
    let back = Checkpoint::read_from(&mut a.as_slice())?;
    let mut b = Vec::new();
    back.write_to(&mut b).map_err(|e| fail(e.to_string()))?;
    if a != b || back != ck {
        return Err(fail("checkpoint bytes changed on round trip".into()));
    }
    Ok(format!("{} bytes", a.len()))
}

fn injection_zero_is_exact() -> Result<String> {
    let cfg = tiny();
    let store = VarStore::<f64>::new();
    let d = Denoiser::new(&store.root(Rng::new(34)), &cfg, 4)?;
    for p in &d.ports {
        p.weight.set_data(vec![0.3; p.weight.numel()])?;
    }
    let z = Tensor::<f64>::randn(&[1, 32, 32, 3], 1.0, &mut Rng::new(35));
    let plain = d.predict_noise(&z, &[5], &[Some(2)], &Injection::none())?;
    let zeros = cfg.levels().iter().map(|l| Tensor::zeros(&[1, l.size, l.size, l.channels])).collect();
    let inj = d.predict_noise(&z, &[5], &[Some(2)], &Injection::levels(zeros))?;
    if plain.to_vec() != inj.to_vec() {
        return Err(fail("zero injection changes the denoiser output".into()));
    }
    Ok("bit-exact".into())
}

pub const CHECKS: &[(&str, CheckFn)] = &[
    ("gradcheck.attention", grad_attention),
    ("gradcheck.rope", grad_rope),
    ("gradcheck.conv", grad_conv),
    ("gradcheck.resblock", grad_resblock),
    ("gradcheck.cross_normalize", grad_cross_normalize),
    ("gradcheck.spatial_reweigh", grad_spatial),
    ("gradcheck.layer_reweigh", grad_layer),
    ("gradcheck.losses", grad_losses),
    ("gradcheck.injection", grad_injection),
    ("inter.init_weights", inter_init_weights),
    ("cross_normalize.stats", cross_norm_stats),
    ("weight_mask.normalization", weight_mask_normalization),
    ("diffusion.statistics", diffusion_statistics),
    ("attention.brute_force", attention_oracle),
    ("injection.zero_is_exact", injection_zero_is_exact),
    ("checkpoint.round_trip", checkpoint_round_trip),
];

/// Runs every check whose name contains `filter` (all when `None`).
pub fn run_checks(filter: Option<&str>) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .filter(|(name, _)| filter.is_none_or(|f| name.contains(f)))
        .map(|(name, f)| {
            let t0 = Instant::now();
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(e) => (false, e.to_string()),
            };
            CheckOutcome { name, passed, detail, seconds: t0.elapsed().as_secs_f64() }
        })
        .collect()
}

pub fn format_outcome(o: &CheckOutcome) -> String {
    format!("check={} status={} seconds={:.2} detail=\"{}\"", o.name, if o.passed { "pass" } else { "FAIL" }, o.seconds, o.detail)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_checks_pass_and_fault_is_caught() {
        for name in ["cross_normalize.stats", "weight_mask", "attention.brute_force", "inter.init"] {
            for o in run_checks(Some(name)) {
                assert!(o.passed, "{}", format_outcome(&o));
            }
        }
        crate::intra::set_cross_norm_fault(true);
        let out = run_checks(Some("cross_normalize.stats"));
        crate::intra::set_cross_norm_fault(false);
        assert!(!out[0].passed);
    }
}
