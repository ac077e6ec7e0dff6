//! Staged training: base (denoiser and content encoders), intra-element
//! controller, inter-element controller.

pub mod checkpoint;
pub mod losses;
pub mod optim;

use std::collections::BTreeMap;

pub use checkpoint::Checkpoint;
pub use losses::{foreground_weight_mask, mse_loss, stack_masks, total_loss, transform_loss, WeightMask};
pub use optim::AdamW;

use crate::config::{RunConfig, Stage, TrainConfig};
use crate::diffusion::q_sample;
use crate::embeddings::ConditionKind;
use crate::error::{Error, Result};
use crate::model::{stack_images, stack_signed, Control, DcNet, ElementBatch, Fusion};
use crate::numerics::{no_grad, Rng, Tensor};
use crate::scene::{edge_map, ElementConditions, Image, Sample, CANVAS, NEUTRAL};

/// Replaces each class by `None` with probability `p`.
pub fn drop_classes(classes: &[usize], p: f64, rng: &mut Rng) -> Vec<Option<usize>> {
    classes.iter().map(|&c| if rng.bernoulli(p) { None } else { Some(c) }).collect()
}

/// `element` painted over `background` (both canvas-sized).
pub fn element_on_background(background: &Image, element: &ElementConditions) -> Image {
    let mut img = background.clone();
    for (i, &on) in element.mask.mask().iter().enumerate() {
        if on {
            img.set_pixel(i / CANVAS, i % CANVAS, element.solo.pixel(i / CANVAS, i % CANVAS));
        }
    }
    img
}

/// The composed scene with the background replaced by the neutral colour;
/// the base stage's content map.
pub fn foreground_composite(target: &Image, elements: &[ElementConditions]) -> Image {
    let mut img = Image::filled(CANVAS, CANVAS, NEUTRAL);
    for (i, on) in union_mask(elements).into_iter().enumerate() {
        if on {
            img.set_pixel(i / CANVAS, i % CANVAS, target.pixel(i / CANVAS, i % CANVAS));
        }
    }
    img
}

fn union_mask(elements: &[ElementConditions]) -> Vec<bool> {
    let mut m = vec![false; CANVAS * CANVAS];
    for e in elements {
        for (a, b) in m.iter_mut().zip(e.mask.mask()) {
            *a |= b;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub mse: f64,
    pub transform: f64,
    pub grad_norm: f64,
}

/// `key=value` log line.
pub fn format_log_line(stage: Stage, s: &StepStats) -> String {
    format!("stage={} step={} loss={:.6e} mse={:.6e} transform={:.6e} grad_norm={:.6e}", stage.name(), s.step, s.loss, s.mse, s.transform, s.grad_norm)
}

/// `(step, loss)` pairs from a training log.
pub fn parse_log(text: &str) -> Result<Vec<(u64, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
        let kv: BTreeMap<&str, &str> = line.split_whitespace().filter_map(|f| f.split_once('=')).collect();
        let step = kv.get("step").ok_or_else(|| perr("missing step"))?.parse().map_err(|_| perr("bad step"))?;
        let loss = kv.get("loss").ok_or_else(|| perr("missing loss"))?.parse().map_err(|_| perr("bad loss"))?;
        out.push((step, loss));
    }
    Ok(out)
}

struct Batch {
    z0: Tensor<f32>,
    classes: Vec<usize>,
    control: Control<f32>,
    mask: Tensor<f32>,
    /// Per-level weight masks and target features for the transform loss.
    transform: Option<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
}

pub struct Trainer {
    pub net: DcNet<f32>,
    pub opt: AdamW<f32>,
    pub rng: Rng,
    pub stage: Stage,
    pub step: u64,
    train: TrainConfig,
    layouts: Vec<ConditionKind>,
    samples: Vec<Sample>,
    /// Base stage only: foreground composite and its edge map per sample.
    scene_content: Vec<(Image, Image)>,
    buckets: BTreeMap<usize, Vec<usize>>,
}

impl Trainer {
    /// Starts `stage`, loading parameters from the prerequisite checkpoint.
    pub fn new(run: &RunConfig, stage: Stage, samples: Vec<Sample>, prerequisite: Option<&Checkpoint>) -> Result<Trainer> {
        run.validate()?;
        let net = DcNet::new(&run.model, run.inter, run.seed)?;
        match (stage.prerequisite(), prerequisite) {
            (None, _) => {}
            (Some(p), None) => return Err(Error::State(format!("stage {} needs a {} checkpoint", stage.name(), p.name()))),
            (Some(p), Some(ck)) => {
                if ck.stage != p {
                    return Err(Error::State(format!("stage {} needs a {} checkpoint, got {}", stage.name(), p.name(), ck.stage.name())));
                }
                ck.load_into(&net)?;
            }
        }
        let rng = Rng::new(run.seed).fork(0x7a11 + stage.id() as u64);
        Self::assemble(run, stage, samples, net, AdamW::new(run.train.lr, run.train.weight_decay), rng, 0)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(run: &RunConfig, samples: Vec<Sample>, ck: &Checkpoint) -> Result<Trainer> {
        run.validate()?;
        let net = DcNet::new(&run.model, ck.inter, run.seed)?;
        ck.load_into(&net)?;
        let opt = ck.optimizer()?.ok_or_else(|| Error::State("checkpoint has no optimizer state".into()))?;
        let rng = ck.rng()?.ok_or_else(|| Error::State("checkpoint has no RNG state".into()))?;
        Self::assemble(run, ck.stage, samples, net, opt, rng, ck.step)
    }

    fn assemble(run: &RunConfig, stage: Stage, samples: Vec<Sample>, net: DcNet<f32>, opt: AdamW<f32>, rng: Rng, step: u64) -> Result<Trainer> {
        if samples.is_empty() {
            return Err(Error::Contract("no training samples".into()));
        }
        if run.train.layouts.iter().any(|k| !k.is_layout()) || run.train.layouts.is_empty() {
            return Err(Error::Config("train.layouts must list dot, box or mask".into()));
        }
        net.set_stage(stage);
        let scene_content = if stage == Stage::Base {
            samples
                .iter()
                .map(|s| {
                    let fg = foreground_composite(&s.conditions.target, &s.conditions.elements);
                    (edge_map(&fg), fg)
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            buckets.entry(s.conditions.elements.len()).or_default().push(i);
        }
        Ok(Trainer { net, opt, rng, stage, step, train: run.train.clone(), layouts: run.train.layouts.clone(), samples, scene_content, buckets })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.net, self.stage, self.step, Some(&self.opt), Some(&self.rng))
    }

    fn draw_batch(&self, rng: &mut Rng) -> Result<Batch> {
        let b = self.train.batch;
        let n = self.samples.len();
        let content = ConditionKind::CONTENTS;
        match self.stage {
            Stage::Base => {
                let idx: Vec<usize> = (0..b).map(|_| rng.below(n)).collect();
                let targets: Vec<&Image> = idx.iter().map(|&i| &self.samples[i].conditions.target).collect();
                let edges: Vec<&Image> = idx.iter().map(|&i| &self.scene_content[i].0).collect();
                let colors: Vec<&Image> = idx.iter().map(|&i| &self.scene_content[i].1).collect();
                let masks = idx
                    .iter()
                    .map(|&i| foreground_weight_mask(&union_mask(&self.samples[i].conditions.elements), CANVAS, CANVAS))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Batch {
                    z0: stack_signed(&targets)?,
                    classes: idx.iter().map(|&i| self.samples[i].spec.background.class_id).collect(),
                    control: Control::Scene(vec![(ConditionKind::Edge, stack_images(&edges, true)?), (ConditionKind::Color, stack_images(&colors, false)?)]),
                    mask: stack_masks(&masks)?,
                    transform: None,
                })
            }
            Stage::Intra => {
                let mut rows = Vec::with_capacity(b);
                for _ in 0..b {
                    let i = rng.below(n);
                    let k = rng.below(self.samples[i].conditions.elements.len());
                    let layout = self.layouts[rng.below(self.layouts.len())];
                    rows.push((i, k, layout));
                }
                let els: Vec<&ElementConditions> = rows.iter().map(|&(i, k, _)| &self.samples[i].conditions.elements[k]).collect();
                let targets: Vec<Image> =
                    rows.iter().zip(&els).map(|(&(i, _, _), e)| element_on_background(&self.samples[i].conditions.background, e)).collect();
                let weight = els.iter().map(|e| foreground_weight_mask(&e.mask.mask(), CANVAS, CANVAS)).collect::<Result<Vec<_>>>()?;
                let element = ElementBatch::from_conditions(&els.iter().zip(&rows).map(|(e, r)| (*e, r.2)).collect::<Vec<_>>(), &content, 0)?;
                let posed = content
                    .iter()
                    .map(|&k| {
                        let imgs = els.iter().map(|e| e.content_at_target(k)).collect::<Result<Vec<_>>>()?;
                        Ok((k, stack_images(&imgs.iter().collect::<Vec<_>>(), k != ConditionKind::Color)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let targets_feat = no_grad(|| self.net.encoders.summed(&posed))?.into_iter().map(|t| t.detach()).collect();
                let level_masks = self
                    .net
                    .cfg
                    .levels()
                    .iter()
                    .map(|l| stack_masks(&weight.iter().map(|w| w.downsample(l.size)).collect::<Result<Vec<_>>>()?))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Batch {
                    z0: stack_signed(&targets.iter().collect::<Vec<_>>())?,
                    classes: rows.iter().map(|&(i, _, _)| self.samples[i].spec.background.class_id).collect(),
                    control: Control::Elements(vec![element]),
                    mask: stack_masks(&weight)?,
                    transform: Some((level_masks, targets_feat)),
                })
            }
            Stage::Inter => {
                let anchor = rng.below(n);
                let bucket = &self.buckets[&self.samples[anchor].conditions.elements.len()];
                let mut idx = vec![anchor];
                while idx.len() < b {
                    idx.push(bucket[rng.below(bucket.len())]);
                }
                let count = self.samples[anchor].conditions.elements.len();
                let mut slots = Vec::with_capacity(count);
                for r in 0..count {
                    let mut rows = Vec::with_capacity(b);
                    for &i in &idx {
                        let e = self.samples[i]
                            .conditions
                            .elements
                            .iter()
                            .find(|e| e.order == r)
                            .ok_or_else(|| Error::Invariant(format!("sample {i} has no element of rank {r}")))?;
                        rows.push((e, self.layouts[rng.below(self.layouts.len())]));
                    }
                    slots.push(ElementBatch::from_conditions(&rows, &content, r as u32)?);
                }
                let masks = idx
                    .iter()
                    .map(|&i| foreground_weight_mask(&union_mask(&self.samples[i].conditions.elements), CANVAS, CANVAS))
                    .collect::<Result<Vec<_>>>()?;
                let targets: Vec<&Image> = idx.iter().map(|&i| &self.samples[i].conditions.target).collect();
                Ok(Batch {
                    z0: stack_signed(&targets)?,
                    classes: idx.iter().map(|&i| self.samples[i].spec.background.class_id).collect(),
                    control: Control::Elements(slots),
                    mask: stack_masks(&masks)?,
                    transform: None,
                })
            }
        }
    }

    /// Losses on a batch drawn from `rng`: `(total, mse, transform)`.
    fn batch_loss(&self, rng: &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>, Option<Tensor<f32>>)> {
        let batch = self.draw_batch(rng)?;
        let b = batch.classes.len();
        let steps = self.net.schedule.steps();
        let ts: Vec<usize> = (0..b).map(|_| 1 + rng.below(steps)).collect();
        let eps = Tensor::<f32>::randn(batch.z0.shape(), 1.0, rng);
        let classes = drop_classes(&batch.classes, self.train.class_dropout, rng);
        let z_t = q_sample(&self.net.schedule, &batch.z0, &ts, &eps)?;
        let out = self.net.forward(&z_t, &ts, &classes, &batch.control, Fusion::Inter)?;
        let mse = mse_loss(&eps, &out.eps, &batch.mask)?;
        let transform = match (&batch.transform, out.intra.first()) {
            (Some((masks, targets)), Some(io)) => Some(transform_loss(&io.levels, targets, masks)?),
            _ => None,
        };
        let loss = total_loss(&mse, transform.as_ref(), self.train.lambda)?;
        loss.ensure_finite("training loss")?;
        Ok((loss, mse, transform))
    }

    /// Loss on the batch, timesteps and noise fixed by `seed`, without
    /// touching the training state.
    pub fn probe_loss(&self, seed: u64) -> Result<f64> {
        no_grad(|| Ok(self.batch_loss(&mut Rng::new(seed))?.0.item()?.into()))
    }

    /// One optimisation step on a freshly drawn batch.
    pub fn train_step(&mut self) -> Result<StepStats> {
        let mut rng = self.rng.clone();
        let (loss, mse, transform) = self.batch_loss(&mut rng)?;
        self.rng = rng;
        let params = self.net.store.trainable();
        self.net.store.zero_grad();
        loss.backward()?;
        let grad_norm = self.opt.step(&params, self.train.grad_clip)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss: loss.item()?.into(),
            mse: mse.item()?.into(),
            transform: transform.map(|t| t.item().map(f64::from)).transpose()?.unwrap_or(0.0),
            grad_norm,
        })
    }

    /// Trains until `until` total steps, reporting every `log_every` steps
    /// and at the last step.
    pub fn run_until(&mut self, until: u64, mut report: impl FnMut(&StepStats)) -> Result<()> {
        let every = self.train.log_every.max(1) as u64;
        while self.step < until {
            let s = self.train_step()?;
            if s.step % every == 0 || s.step == 1 || s.step == until {
                report(&s);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_dropout_rate() {
        let mut rng = Rng::new(2);
        let dropped = drop_classes(&vec![1; 10_000], 0.2, &mut rng).iter().filter(|c| c.is_none()).count();
        assert!((1900..=2100).contains(&dropped), "{dropped}");
    }

    #[test]
    fn log_lines_parse_back() {
        let s = StepStats { step: 50, loss: 0.125, mse: 0.1, transform: 0.025, grad_norm: 1.0 };
        let text = format!("{}\n{}\n", format_log_line(Stage::Intra, &s), format_log_line(Stage::Intra, &StepStats { step: 100, ..s }));
        assert_eq!(parse_log(&text).unwrap(), vec![(50, 0.125), (100, 0.125)]);
        assert!(matches!(parse_log("step=1\n"), Err(Error::Parse { line: 1, .. })));
    }
}
