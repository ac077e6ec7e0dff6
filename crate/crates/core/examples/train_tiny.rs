//! Trains all three stages of a small model for a few steps, saves
//! checkpoints and resumes the last stage from disk.

use dcnet::config::{ModelConfig, RunConfig, Stage, TrainConfig};
use dcnet::scene::{DatasetOptions, Sample};
use dcnet::training::{format_log_line, Checkpoint, Trainer};

fn main() -> dcnet::Result<()> {
    let run = RunConfig {
        seed: 1,
        model: ModelConfig { widths: [8, 12, 12], emb_dim: 16, time_freq_dim: 8, encoder_width: 8, diffusion_steps: 50, ..Default::default() },
        train: TrainConfig { batch: 4, lr: 2e-3, log_every: 10, ..Default::default() },
        ..Default::default()
    };
    let opts = DatasetOptions { n: 32, test_fraction: 0.0, seed: 1, ..Default::default() };
    let samples: Vec<Sample> = (0..opts.n).map(|i| Sample::generate(&opts, i)).collect();
    let dir = std::env::temp_dir().join("dcnet-example-run");
    std::fs::create_dir_all(&dir).map_err(|e| dcnet::Error::io(&dir, e))?;

    let mut prev: Option<Checkpoint> = None;
    for stage in Stage::ALL {
        let mut t = Trainer::new(&run, stage, samples.clone(), prev.as_ref())?;
        let before = t.probe_loss(9)?;
        t.run_until(40, |s| println!("{}", format_log_line(stage, s)))?;
        println!("{}: fixed-batch loss {before:.4} -> {:.4}", stage.name(), t.probe_loss(9)?);
        let ck = t.checkpoint();
        ck.save(&dir.join(format!("{}.ckpt", stage.name())))?;
        prev = Some(ck);
    }

    let ck = Checkpoint::load(&dir.join("inter.ckpt"))?;
    let mut t = Trainer::resume(&run, samples, &ck)?;
    t.run_until(60, |s| println!("resumed {}", format_log_line(Stage::Inter, s)))?;
    println!("checkpoints in {}", dir.display());
    Ok(())
}
