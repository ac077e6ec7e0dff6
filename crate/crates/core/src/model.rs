//! The assembled model: denoiser, content encoders, intra-element controller
//! and inter-element controller sharing one parameter store.
//!
//! Parameter names are prefixed `denoiser.`, `encoders.`, `intra.` and
//! `inter.`, which is what the training stages use to freeze groups.

use crate::config::{InterOptions, ModelConfig, Stage};
use crate::diffusion::{p_sample_step, Denoiser, Injection, NoiseSchedule};
use crate::embeddings::ConditionKind;
use crate::error::{dim_err, Error, Result};
use crate::inter::InterController;
use crate::intra::{ContentEncoders, IntraController, IntraInput, IntraOutput};
use crate::nn::VarStore;
use crate::numerics::{no_grad, Rng, Scalar, Tensor};
use crate::scene::{num_classes, ElementConditions, Image};

/// One element slot across a batch. Every batch row carries the same
/// content kinds and the same layer order.
#[derive(Clone)]
pub struct ElementBatch<T: Scalar> {
    pub content: Vec<(ConditionKind, Tensor<T>)>,
    /// `[B, H, W, 1]`.
    pub layout: Tensor<T>,
    pub layout_kinds: Vec<ConditionKind>,
    pub order: u32,
}

impl<T: Scalar> ElementBatch<T> {
    /// Stacks the conditions of one element from each batch row.
    pub fn from_conditions(rows: &[(&ElementConditions, ConditionKind)], content: &[ConditionKind], order: u32) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("empty element batch".into()));
        }
        let content = content
            .iter()
            .map(|&k| {
                let imgs = rows.iter().map(|(c, _)| c.content(k)).collect::<Result<Vec<_>>>()?;
                Ok((k, stack_images(&imgs, k != ConditionKind::Color)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let layouts = rows.iter().map(|(c, k)| c.layout(*k)).collect::<Result<Vec<_>>>()?;
        Ok(Self { content, layout: stack_images(&layouts, true)?, layout_kinds: rows.iter().map(|r| r.1).collect(), order })
    }
}

/// `[B, H, W, C]` tensor in `[0, 1]` from equally sized images.
pub fn stack_images<T: Scalar>(images: &[&Image], binary: bool) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Contract("no images to stack".into()))?;
    let [h, w, c] = first.shape();
    let denom = if binary { 1.0 } else { 255.0 };
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.shape() != [h, w, c] {
            return Err(dim_err!("cannot stack {:?} with {:?}", img.shape(), [h, w, c]));
        }
        data.extend(img.data.iter().map(|&v| T::from_f64c(v as f64 / denom)));
    }
    Tensor::from_vec(&[images.len(), h, w, c], data)
}

/// `[B, H, W, 3]` tensor in `[-1, 1]`.
pub fn stack_signed<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    Ok(stack_images::<T>(images, false)?.mul_scalar(T::from_f64c(2.0)).add_scalar(T::from_f64c(-1.0)))
}

/// Images back from a signed `[B, H, W, 3]` tensor.
pub fn unstack_signed<T: Scalar>(x: &Tensor<T>) -> Result<Vec<Image>> {
    if x.rank() != 4 || x.dim(3) != 3 {
        return Err(dim_err!("expected [B,H,W,3], got {:?}", x.shape()));
    }
    let (h, w) = (x.dim(1), x.dim(2));
    let v = x.to_f64_vec();
    v.chunks(h * w * 3).map(|c| Image::from_signed(h, w, c)).collect()
}

/// What drives the injection ports.
pub enum Control<T: Scalar> {
    None,
    /// Encoder features of whole-scene content maps (base stage).
    Scene(Vec<(ConditionKind, Tensor<T>)>),
    Elements(Vec<ElementBatch<T>>),
}

/// How per-element controller features are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// The inter-element controller.
    Inter,
    /// Plain sum of the per-element features.
    NaiveSum,
}

pub struct ModelOutput<T: Scalar> {
    pub eps: Tensor<T>,
    pub intra: Vec<IntraOutput<T>>,
}

pub struct DcNet<T: Scalar> {
    pub cfg: ModelConfig,
    pub store: VarStore<T>,
    pub schedule: NoiseSchedule,
    pub denoiser: Denoiser<T>,
    pub encoders: ContentEncoders<T>,
    pub intra: IntraController<T>,
    pub inter: InterController<T>,
}

impl<T: Scalar> DcNet<T> {
    pub fn new(cfg: &ModelConfig, options: InterOptions, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = VarStore::new();
        let root = store.root(Rng::new(seed).fork(0x1417));
        let kinds = ConditionKind::CONTENTS;
        Ok(Self {
            cfg: cfg.clone(),
            schedule: NoiseSchedule::from_config(cfg)?,
            denoiser: Denoiser::new(&root.pp("denoiser"), cfg, num_classes())?,
            encoders: ContentEncoders::new(&root.pp("encoders"), cfg, &kinds)?,
            intra: IntraController::new(&root.pp("intra"), cfg, &kinds)?,
            inter: InterController::new(&root.pp("inter"), cfg, options)?,
            store,
        })
    }

    /// Parameter groups updated by `stage`.
    pub fn stage_prefixes(stage: Stage) -> &'static [&'static str] {
        match stage {
            Stage::Base => &["denoiser.", "encoders."],
            Stage::Intra => &["intra."],
            Stage::Inter => &["inter."],
        }
    }

    pub fn set_stage(&self, stage: Stage) {
        let p = Self::stage_prefixes(stage);
        self.store.set_trainable(|name| p.iter().any(|q| name.starts_with(q)));
    }

    fn element_outputs(&self, elements: &[ElementBatch<T>], ts: &[usize]) -> Result<Vec<IntraOutput<T>>> {
        elements
            .iter()
            .map(|e| {
                let input = IntraInput { content: e.content.clone(), layout: e.layout.clone(), layout_kinds: e.layout_kinds.clone() };
                self.intra.forward(&self.encoders, &input, ts)
            })
            .collect()
    }

    /// Injected features for `control` at timesteps `ts`.
    pub fn injection(&self, control: &Control<T>, ts: &[usize], fusion: Fusion) -> Result<(Injection<T>, Vec<IntraOutput<T>>)> {
        match control {
            Control::None => Ok((Injection::none(), Vec::new())),
            Control::Scene(content) => Ok((Injection::levels(self.encoders.summed(content)?), Vec::new())),
            Control::Elements(elements) => {
                if elements.is_empty() {
                    return Err(Error::Contract("no elements to control".into()));
                }
                let outs = self.element_outputs(elements, ts)?;
                let levels = match fusion {
                    Fusion::Inter => {
                        let items: Vec<(Vec<Tensor<T>>, u32)> = outs.iter().zip(elements).map(|(o, e)| (o.levels.clone(), e.order)).collect();
                        self.inter.forward(&items)?
                    }
                    Fusion::NaiveSum => {
                        let mut acc = outs[0].levels.clone();
                        for o in &outs[1..] {
                            for (a, l) in acc.iter_mut().zip(&o.levels) {
                                *a = a.add(l)?;
                            }
                        }
                        acc
                    }
                };
                let f0 = if self.cfg.inject_layout_embedding {
                    let mut f0 = self.intra.f0_port.forward(&outs[0].f0)?;
                    for o in &outs[1..] {
                        f0 = f0.add(&self.intra.f0_port.forward(&o.f0)?)?;
                    }
                    Some(f0)
                } else {
                    None
                };
                let inj = Injection { f0, levels: levels.into_iter().map(Some).collect() };
                Ok((inj, outs))
            }
        }
    }

    pub fn forward(&self, z_t: &Tensor<T>, ts: &[usize], classes: &[Option<usize>], control: &Control<T>, fusion: Fusion) -> Result<ModelOutput<T>> {
        let (inj, intra) = self.injection(control, ts, fusion)?;
        Ok(ModelOutput { eps: self.denoiser.predict_noise(z_t, ts, classes, &inj)?, intra })
    }

    /// Ancestral sampling from pure noise; returns signed `[B, H, W, 3]`.
    pub fn sample(&self, classes: &[Option<usize>], control: &Control<T>, fusion: Fusion, rng: &mut Rng) -> Result<Tensor<T>> {
        self.sample_with(classes, control, fusion, rng, |_| ())
    }

    /// [`DcNet::sample`] calling `on_step(t)` before every reverse step.
    pub fn sample_with(
        &self,
        classes: &[Option<usize>],
        control: &Control<T>,
        fusion: Fusion,
        rng: &mut Rng,
        mut on_step: impl FnMut(usize),
    ) -> Result<Tensor<T>> {
        no_grad(|| {
            let s = self.cfg.image;
            let b = classes.len();
            let mut z = Tensor::randn(&[b, s, s, 3], 1.0, rng);
            for t in (1..=self.schedule.steps()).rev() {
                on_step(t);
                let ts = vec![t; b];
                let eps = self.forward(&z, &ts, classes, control, fusion)?.eps;
                z = p_sample_step(&self.schedule, &z, t, &eps, rng)?;
            }
            z.ensure_finite("sample")?;
            Ok(z)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{extract_conditions, generate_scene};

    fn tiny() -> ModelConfig {
        ModelConfig { widths: [8, 8, 8], emb_dim: 8, time_freq_dim: 8, encoder_width: 4, diffusion_steps: 4, ..Default::default() }
    }

    #[test]
    fn stage_groups_partition_parameters() {
        let net = DcNet::<f32>::new(&tiny(), InterOptions::default(), 0).unwrap();
        for (name, _) in net.store.named() {
            let n = Stage::ALL.iter().filter(|s| DcNet::<f32>::stage_prefixes(**s).iter().any(|p| name.starts_with(p))).count();
            assert_eq!(n, 1, "{name}");
        }
        net.set_stage(Stage::Intra);
        assert!(net.store.trainable().iter().all(|(n, _)| n.starts_with("intra.")));
    }

    #[test]
    fn sampling_is_seeded_and_runs_every_step() {
        let net = DcNet::<f32>::new(&tiny(), InterOptions::default(), 1).unwrap();
        let spec = generate_scene(&mut Rng::new(3));
        let cs = extract_conditions(&spec);
        let el = ElementBatch::from_conditions(&[(&cs.elements[0], ConditionKind::Mask)], &ConditionKind::CONTENTS, 0).unwrap();
        let control = Control::Elements(vec![el]);
        let mut steps = Vec::new();
        let a = net.sample_with(&[Some(1)], &control, Fusion::Inter, &mut Rng::new(9), |t| steps.push(t)).unwrap();
        let b = net.sample(&[Some(1)], &control, Fusion::Inter, &mut Rng::new(9)).unwrap();
        assert_eq!(steps, vec![4, 3, 2, 1]);
        assert_eq!(a.to_vec(), b.to_vec());
        assert_eq!(unstack_signed(&a).unwrap().len(), 1);
    }
}
