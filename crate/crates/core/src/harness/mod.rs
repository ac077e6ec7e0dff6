//! The command implementations behind the `dcnet` binary.
//!
//! A run directory holds one checkpoint per stage (`base.ckpt`,
//! `intra.ckpt`, `inter.ckpt`) and one `key=value` log per stage
//! (`train_<stage>.log`).

pub mod eval;
pub mod verify;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;

use crate::config::{RunConfig, Stage};
use crate::embeddings::ConditionKind;
use crate::error::{Error, Result};
use crate::model::{unstack_signed, Control, ElementBatch, Fusion};
use crate::numerics::Rng;
use crate::ppm;
use crate::scene::{parse_scene_file, read_dataset, write_dataset, Dataset, DatasetOptions, Image, Manifest, SceneSpec, Split};
use crate::training::{format_log_line, Checkpoint, Trainer};
use eval::{evaluate, model_generator, oracle_generator, EvalReport};

pub fn checkpoint_path(run_dir: &Path, stage: Stage) -> PathBuf {
    run_dir.join(format!("{}.ckpt", stage.name()))
}

pub fn log_path(run_dir: &Path, stage: Stage) -> PathBuf {
    run_dir.join(format!("train_{}.log", stage.name()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty override key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Reads an optional TOML config and applies `key=value` overrides (dotted
/// keys, TOML values; bare words are taken as strings). `seed` wins over
/// both.
pub fn load_config(path: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let mut table: toml::Table = RunConfig::from_toml(&text).and_then(|_| toml::from_str(&text).map_err(|e| Error::Parse { line: 0, msg: e.to_string() }))?;
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        let v = v.trim();
        let value =
            toml::from_str::<toml::Table>(&format!("x = {v}")).ok().and_then(|mut t| t.remove("x")).unwrap_or_else(|| toml::Value::String(v.to_string()));
        set_path(&mut table, k.trim(), value)?;
    }
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("override: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn dataset_options(cfg: &RunConfig, n: Option<usize>) -> DatasetOptions {
    DatasetOptions { n: n.unwrap_or(cfg.data.n), test_fraction: cfg.data.test_fraction, seed: cfg.seed, eval_min_pixels: cfg.data.eval_min_pixels }
}

pub fn cmd_gen_data(cfg: &RunConfig, n: Option<usize>, out: &Path) -> Result<Manifest> {
    let m = write_dataset(&dataset_options(cfg, n), out)?;
    info!("dataset={} samples={} train={} test={}", out.display(), m.count(), m.split_count(Split::Train), m.split_count(Split::Test));
    Ok(m)
}

fn train_samples(data: &Dataset) -> Vec<crate::scene::Sample> {
    data.samples.iter().filter(|s| s.split == Split::Train).cloned().collect()
}

/// Trains one stage into `run_dir`. With `resume`, continues from an
/// existing checkpoint of the same stage.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, stage: Stage, run_dir: &Path, resume: bool) -> Result<Checkpoint> {
    let data = read_dataset(data_dir)?;
    let samples = train_samples(&data);
    let target = cfg.train.steps(stage) as u64;
    let ck_path = checkpoint_path(run_dir, stage);
    let mut trainer = if resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.stage != stage {
            return Err(Error::State(format!("{} holds stage {}", ck_path.display(), ck.stage.name())));
        }
        Trainer::resume(cfg, samples, &ck)?
    } else {
        let prereq = match stage.prerequisite() {
            Some(p) => {
                let path = checkpoint_path(run_dir, p);
                if !path.exists() {
                    return Err(Error::State(format!("stage {} needs {} (train stage {} first)", stage.name(), path.display(), p.name())));
                }
                Some(Checkpoint::load(&path)?)
            }
            None => None,
        };
        Trainer::new(cfg, stage, samples, prereq.as_ref())?
    };
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let lpath = log_path(run_dir, stage);
    let mut log = fs::OpenOptions::new().create(true).append(resume).write(true).truncate(!resume).open(&lpath).map_err(|e| Error::io(&lpath, e))?;
    let save_every = (cfg.train.log_every.max(1) * 20) as u64;
    while trainer.step < target {
        let chunk = (trainer.step + save_every).min(target);
        let mut io_err = None;
        trainer.run_until(chunk, |s| {
            let line = format_log_line(stage, s);
            info!("{line}");
            if let Err(e) = writeln!(log, "{line}") {
                io_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_err {
            return Err(Error::io(&lpath, e));
        }
        trainer.checkpoint().save(&ck_path)?;
    }
    let ck = trainer.checkpoint();
    ck.save(&ck_path)?;
    Ok(ck)
}

/// Generates an image for a scene file. `swap` exchanges two layers first.
pub fn cmd_sample(ckpt: &Path, scene: &Path, swap: Option<(usize, usize)>, seed: u64, fusion: Fusion, out: &Path) -> Result<Image> {
    let ck = Checkpoint::load(ckpt)?;
    let net = ck.build::<f32>()?;
    let text = fs::read_to_string(scene).map_err(|e| Error::io(scene, e))?;
    let mut sf = parse_scene_file(&text, scene.parent().unwrap_or(Path::new(".")))?;
    if let Some((i, j)) = swap {
        sf.swap_order(i, j)?;
    }
    let mut slots = Vec::new();
    for r in 0..sf.elements.len() {
        let e = sf.elements.iter().find(|e| e.conditions.order == r).ok_or_else(|| Error::Invariant(format!("no element of rank {r}")))?;
        slots.push(ElementBatch::from_conditions(&[(&e.conditions, e.layout)], &ConditionKind::CONTENTS, r as u32)?);
    }
    let x = net.sample(&[Some(sf.background.class_id)], &Control::Elements(slots), fusion, &mut Rng::new(seed))?;
    let img = unstack_signed(&x)?.remove(0);
    ppm::write(out, &img)?;
    Ok(img)
}

pub fn test_scenes(data: &Dataset, limit: usize) -> Result<Vec<SceneSpec>> {
    let scenes: Vec<SceneSpec> = data.samples.iter().filter(|s| s.split == Split::Test).take(limit).map(|s| s.spec.clone()).collect();
    if scenes.is_empty() {
        return Err(Error::Contract("the dataset has no test scenes".into()));
    }
    Ok(scenes)
}

fn write_report(out: &Path, reports: &[EvalReport]) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(out, eval::render_reports(reports)).map_err(|e| Error::io(out, e))
}

/// Oracle self-test, then the model with inter fusion and with a naive sum.
pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, data_dir: &Path, out: &Path) -> Result<Vec<EvalReport>> {
    let data = read_dataset(data_dir)?;
    let scenes = test_scenes(&data, cfg.eval.scenes)?;
    let (oracle, _) = evaluate("oracle", cfg.eval.layout, &scenes, oracle_generator)?;
    if oracle.occlusion_accuracy != 1.0 || oracle.iou != 1.0 {
        return Err(Error::Invariant(format!("metric self-test failed: {}", oracle.to_kv())));
    }
    let net = Checkpoint::load(ckpt)?.build::<f32>()?;
    let mut reports = vec![oracle];
    for (label, fusion) in [("model", Fusion::Inter), ("naive_sum", Fusion::NaiveSum)] {
        let gen = model_generator(&net, fusion, cfg.eval.layout, cfg.seed, cfg.eval.batch);
        let (r, _) = evaluate(label, cfg.eval.layout, &scenes, gen)?;
        info!("{}", r.to_kv());
        reports.push(r);
    }
    write_report(out, &reports)?;
    Ok(reports)
}

/// Retrains the inter stage with each component disabled and evaluates
/// every variant. The first row is the full model.
pub fn cmd_ablate(cfg: &RunConfig, data_dir: &Path, run_dir: &Path, out_dir: &Path) -> Result<Vec<EvalReport>> {
    let intra = checkpoint_path(run_dir, Stage::Intra);
    if !intra.exists() {
        return Err(Error::State(format!("ablation needs {}", intra.display())));
    }
    let data = read_dataset(data_dir)?;
    let scenes = test_scenes(&data, cfg.eval.scenes)?;
    let mut reports = Vec::new();
    for opts in eval::ablation_variants() {
        let label = opts.label();
        let dir = out_dir.join(label);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        fs::copy(&intra, checkpoint_path(&dir, Stage::Intra)).map_err(|e| Error::io(&intra, e))?;
        let run = RunConfig { inter: opts, ..cfg.clone() };
        let ck = cmd_train(&run, data_dir, Stage::Inter, &dir, true)?;
        let net = ck.build::<f32>()?;
        let gen = model_generator(&net, Fusion::Inter, cfg.eval.layout, cfg.seed, cfg.eval.batch);
        let (r, _) = evaluate(label, cfg.eval.layout, &scenes, gen)?;
        info!("{}", r.to_kv());
        reports.push(r);
    }
    write_report(&out_dir.join("ablation.txt"), &reports)?;
    Ok(reports)
}
