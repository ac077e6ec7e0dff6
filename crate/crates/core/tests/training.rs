//! Staged training on a tiny model: smoke runs, freezing, resume and
//! checkpoint handling.

use dcnet::config::{ModelConfig, RunConfig, Stage, TrainConfig};
use dcnet::scene::{DatasetOptions, Sample};
use dcnet::training::{drop_classes, Checkpoint, Trainer};
use dcnet::{Error, Rng};

fn tiny_run(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        model: ModelConfig { widths: [8, 12, 12], emb_dim: 16, time_freq_dim: 8, encoder_width: 8, diffusion_steps: 50, ..Default::default() },
        train: TrainConfig { batch: 4, lr: 2e-3, log_every: 10, ..Default::default() },
        ..Default::default()
    }
}

fn samples(n: usize) -> Vec<Sample> {
    let opts = DatasetOptions { n, test_fraction: 0.0, seed: 11, ..Default::default() };
    (0..n).map(|i| Sample::generate(&opts, i)).collect()
}

fn snapshot(t: &Trainer, prefix: &str) -> Vec<(String, Vec<f32>)> {
    t.net.store.named_with_prefix(prefix).into_iter().map(|(n, p)| (n, p.to_vec())).collect()
}

fn chain(run: &RunConfig, data: &[Sample], steps: u64) -> Vec<Checkpoint> {
    let mut out: Vec<Checkpoint> = Vec::new();
    for stage in Stage::ALL {
        let mut t = Trainer::new(run, stage, data.to_vec(), out.last()).unwrap();
        t.run_until(steps, |_| ()).unwrap();
        out.push(t.checkpoint());
    }
    out
}

#[test]
fn smoke_training_lowers_the_fixed_batch_loss() {
    let run = tiny_run(1);
    let data = samples(24);
    let mut t = Trainer::new(&run, Stage::Base, data, None).unwrap();
    let before = t.probe_loss(5).unwrap();
    let mut logged = Vec::new();
    t.run_until(200, |s| logged.push(s.loss)).unwrap();
    let after = t.probe_loss(5).unwrap();
    assert!(after < before, "fixed-batch loss {before} -> {after}");
    assert!(logged.iter().all(|l| l.is_finite()));
}

#[test]
fn every_stage_trains_and_freezes_the_others() {
    let run = tiny_run(2);
    let data = samples(16);
    let mut prev: Option<Checkpoint> = None;
    for stage in Stage::ALL {
        let mut t = Trainer::new(&run, stage, data.clone(), prev.as_ref()).unwrap();
        let frozen: Vec<&str> =
            ["denoiser.", "encoders.", "intra.", "inter."].into_iter().filter(|p| !dcnet::model::DcNet::<f32>::stage_prefixes(stage).contains(p)).collect();
        let before: Vec<_> = frozen.iter().map(|p| snapshot(&t, p)).collect();
        let trained_before = dcnet::model::DcNet::<f32>::stage_prefixes(stage).iter().map(|p| snapshot(&t, p)).collect::<Vec<_>>();
        let mut transform_seen = false;
        t.run_until(20, |s| transform_seen |= s.transform > 0.0).unwrap();
        for (p, b) in frozen.iter().zip(&before) {
            assert_eq!(&snapshot(&t, p), b, "{p} moved during {}", stage.name());
        }
        let trained_after = dcnet::model::DcNet::<f32>::stage_prefixes(stage).iter().map(|p| snapshot(&t, p)).collect::<Vec<_>>();
        assert_ne!(trained_before, trained_after, "{} did not train", stage.name());
        assert_eq!(transform_seen, stage == Stage::Intra);
        prev = Some(t.checkpoint());
    }
}

#[test]
fn later_stages_need_their_prerequisite() {
    let run = tiny_run(3);
    let data = samples(4);
    for stage in [Stage::Intra, Stage::Inter] {
        assert!(matches!(Trainer::new(&run, stage, data.clone(), None), Err(Error::State(_))));
    }
    let base = Trainer::new(&run, Stage::Base, data.clone(), None).unwrap().checkpoint();
    assert!(matches!(Trainer::new(&run, Stage::Inter, data.clone(), Some(&base)), Err(Error::State(_))));
    let mut other = tiny_run(3);
    other.model.emb_dim = 8;
    assert!(matches!(Trainer::new(&other, Stage::Intra, data, Some(&base)), Err(Error::State(_))));
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let run = tiny_run(4);
    let data = samples(12);
    let mut straight = Vec::new();
    let mut a = Trainer::new(&run, Stage::Base, data.clone(), None).unwrap();
    a.run_until(30, |s| straight.push((s.step, s.loss.to_bits()))).unwrap();

    let mut b = Trainer::new(&run, Stage::Base, data.clone(), None).unwrap();
    let mut resumed = Vec::new();
    b.run_until(12, |s| resumed.push((s.step, s.loss.to_bits()))).unwrap();
    let mut bytes = Vec::new();
    b.checkpoint().write_to(&mut bytes).unwrap();
    drop(b);
    let ck = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    let mut c = Trainer::resume(&run, data, &ck).unwrap();
    c.run_until(30, |s| resumed.push((s.step, s.loss.to_bits()))).unwrap();
    // the interrupted run also reports its final step 12
    resumed.retain(|(s, _)| *s != 12);
    assert_eq!(straight, resumed);
    assert_eq!(Checkpoint::capture(&a.net, Stage::Base, 30, Some(&a.opt), Some(&a.rng)), c.checkpoint());
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let run = tiny_run(5);
    let data = samples(8);
    let x = chain(&run, &data, 3);
    let y = chain(&run, &data, 3);
    assert_eq!(x, y);
    let z = chain(&tiny_run(6), &data, 3);
    assert_ne!(x[0], z[0]);
}

#[test]
fn class_dropout_matches_its_rate() {
    let mut rng = Rng::new(7);
    let classes = vec![1usize; 10_000];
    let dropped = drop_classes(&classes, 0.2, &mut rng).iter().filter(|c| c.is_none()).count();
    let rate = dropped as f64 / 10_000.0;
    assert!((rate - 0.2).abs() <= 0.01, "{rate}");
}

#[test]
fn total_loss_gradient_is_the_weighted_sum_of_terms() {
    use dcnet::training::{foreground_weight_mask, mse_loss, total_loss, transform_loss};
    use dcnet::Tensor;
    let mut rng = Rng::new(8);
    let x = Tensor::<f64>::param(&[1, 4, 4, 2], Tensor::<f64>::randn(&[1, 4, 4, 2], 1.0, &mut rng).to_vec()).unwrap();
    let eps = Tensor::<f64>::randn(&[1, 4, 4, 2], 1.0, &mut rng);
    let target = Tensor::<f64>::randn(&[1, 4, 4, 2], 1.0, &mut rng);
    let fg: Vec<bool> = (0..16).map(|i| i % 5 < 2).collect();
    let m = foreground_weight_mask(&fg, 4, 4).unwrap().to_tensor::<f64>().reshape(&[1, 4, 4, 1]).unwrap();
    let grad = |f: &dyn Fn() -> Tensor<f64>| {
        x.zero_grad();
        f().backward().unwrap();
        x.grad().unwrap()
    };
    let mse = || mse_loss(&eps, &x.mul_scalar(1.5), &m).unwrap();
    let tr = || transform_loss(&[x.clone()], &[target.clone()], &[m.clone()]).unwrap();
    let lambda = 0.7;
    let g_total = grad(&|| total_loss(&mse(), Some(&tr()), lambda).unwrap());
    let (g_mse, g_tr) = (grad(&mse), grad(&tr));
    for ((t, a), b) in g_total.iter().zip(&g_mse).zip(&g_tr) {
        assert!((t - (a + lambda * b)).abs() < 1e-12);
    }
    assert_eq!(total_loss(&mse(), Some(&tr()), 0.0).unwrap().item().unwrap(), mse().item().unwrap());
}

#[test]
fn intra_stage_trains_at_each_lambda() {
    let data = samples(8);
    let base = Trainer::new(&tiny_run(9), Stage::Base, data.clone(), None).unwrap().checkpoint();
    for lambda in [0.0, 0.1, 1.0] {
        let mut run = tiny_run(9);
        run.train.lambda = lambda;
        let mut t = Trainer::new(&run, Stage::Intra, data.clone(), Some(&base)).unwrap();
        let mut stats = Vec::new();
        t.run_until(10, |s| stats.push((s.loss, s.mse, s.transform))).unwrap();
        for (loss, mse, tr) in stats {
            assert!(loss.is_finite() && tr.is_finite());
            assert!((loss - (mse + lambda * tr)).abs() <= 1e-5 * loss.abs().max(1.0), "lambda {lambda}: {loss} vs {mse} + {tr}");
        }
    }
}
