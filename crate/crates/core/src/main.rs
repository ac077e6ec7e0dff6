use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dcnet::config::Stage;
use dcnet::harness::{self, eval::render_reports, verify};
use dcnet::model::Fusion;
use dcnet::{Error, Result};

#[derive(Parser)]
#[command(name = "dcnet", version, about = "Toy decoupled-condition diffusion: data, training, sampling and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (directory or file, per command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override, e.g. `--set train.base_steps=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Base,
    Intra,
    Inter,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Inter,
    Sum,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a procedural dataset.
    GenData {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one stage (or all three) into the run directory given by --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Continue from an existing checkpoint of the stage.
        #[arg(long)]
        resume: bool,
    },
    /// Generate an image from a scene file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Exchange the layer orders of two elements (indices in file order).
        #[arg(long, num_args = 2, value_names = ["I", "J"])]
        swap_order: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value = "inter")]
        fusion: FusionArg,
    },
    /// Occlusion-order accuracy and layout IoU on the held-out scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Retrain the inter stage without each component and compare.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Run directory holding intra.ckpt.
        #[arg(long)]
        run: PathBuf,
    },
    /// Run the invariant and gradient checks.
    Verify {
        /// Only checks whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
        /// Perturb cross-normalisation to exercise the suite.
        #[arg(long)]
        inject_fault: bool,
    },
}

fn out_or(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let cfg = || harness::load_config(c.config.as_deref(), c.seed, &c.overrides);
    match cli.cmd {
        Cmd::GenData { n } => {
            let out = out_or(c, "data");
            let m = harness::cmd_gen_data(&cfg()?, n, &out)?;
            println!("dataset={} samples={}", out.display(), m.count());
        }
        Cmd::Train { data, stage, resume } => {
            let cfg = cfg()?;
            let out = out_or(c, "run");
            let stages = match stage {
                StageArg::Base => vec![Stage::Base],
                StageArg::Intra => vec![Stage::Intra],
                StageArg::Inter => vec![Stage::Inter],
                StageArg::All => Stage::ALL.to_vec(),
            };
            for s in stages {
                let ck = harness::cmd_train(&cfg, &data, s, &out, resume)?;
                println!("stage={} steps={} checkpoint={}", s.name(), ck.step, harness::checkpoint_path(&out, s).display());
            }
        }
        Cmd::Sample { checkpoint, scene, swap_order, fusion } => {
            let out = out_or(c, "sample.ppm");
            let swap = swap_order.map(|v| (v[0], v[1]));
            let fusion = match fusion {
                FusionArg::Inter => Fusion::Inter,
                FusionArg::Sum => Fusion::NaiveSum,
            };
            harness::cmd_sample(&checkpoint, &scene, swap, c.seed.unwrap_or(0), fusion, &out)?;
            println!("image={}", out.display());
        }
        Cmd::Eval { checkpoint, data } => {
            let reports = harness::cmd_eval(&cfg()?, &checkpoint, &data, &out_or(c, "eval.txt"))?;
            print!("{}", render_reports(&reports));
        }
        Cmd::Ablate { data, run } => {
            let reports = harness::cmd_ablate(&cfg()?, &data, &run, &out_or(c, "ablation"))?;
            print!("{}", render_reports(&reports));
        }
        Cmd::Verify { filter, inject_fault } => {
            dcnet::intra::set_cross_norm_fault(inject_fault);
            let outcomes = verify::run_checks(filter.as_deref());
            for o in &outcomes {
                println!("{}", verify::format_outcome(o));
            }
            let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
            if !failed.is_empty() {
                return Err(Error::Invariant(format!("failed checks: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
