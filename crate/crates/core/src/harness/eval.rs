//! Occlusion-order and layout metrics on held-out overlapping scenes.
//!
//! Every test scene is generated twice, once as stored and once with the two
//! layers exchanged. A generation counts as correct when the majority
//! palette colour inside the overlap is the colour of the commanded top
//! element. Layout IoU compares each element's palette segmentation with
//! the part of its commanded mask that should remain visible.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::InterOptions;
use crate::embeddings::ConditionKind;
use crate::error::{Error, Result};
use crate::model::{unstack_signed, Control, DcNet, ElementBatch, Fusion};
use crate::numerics::{Rng, Scalar};
use crate::scene::{extract_conditions, full_palette, nearest_palette, render_scene, silhouette, Image, SceneSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneScore {
    pub order_correct: bool,
    /// Per element, in spec order.
    pub iou: Vec<f64>,
    /// Fraction of each element's visible pixels rendered in its colour.
    pub color_fidelity: Vec<f64>,
}

/// Scores one generated image against its scene specification.
pub fn score_scene(spec: &SceneSpec, image: &Image) -> Result<SceneScore> {
    if spec.elements.len() < 2 {
        return Err(Error::Contract("order accuracy needs scenes with at least two elements".into()));
    }
    let palette = full_palette();
    let classes: Vec<usize> = (0..image.height * image.width).map(|i| nearest_palette(image.pixel(i / image.width, i % image.width), &palette)).collect();
    let sils: Vec<Vec<bool>> = spec.elements.iter().map(silhouette).collect();
    let z = spec.z_sorted();
    let (top, under) = (z[z.len() - 1], z[z.len() - 2]);
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        if sils[top][i] && sils[under][i] {
            *votes.entry(c).or_default() += 1;
        }
    }
    let majority = votes.iter().max_by_key(|(c, n)| (**n, std::cmp::Reverse(**c))).map(|(c, _)| *c);
    let order_correct = majority == Some(spec.elements[top].color);
    let mut iou = Vec::new();
    let mut color_fidelity = Vec::new();
    for (e, el) in spec.elements.iter().enumerate() {
        let visible: Vec<bool> =
            (0..classes.len()).map(|i| sils[e][i] && !spec.elements.iter().enumerate().any(|(o, other)| o != e && other.z > el.z && sils[o][i])).collect();
        let generated: Vec<bool> = classes.iter().map(|&c| c == el.color).collect();
        let inter = visible.iter().zip(&generated).filter(|(a, b)| **a && **b).count();
        let union = visible.iter().zip(&generated).filter(|(a, b)| **a || **b).count();
        let vis = visible.iter().filter(|&&v| v).count();
        iou.push(if union == 0 { 1.0 } else { inter as f64 / union as f64 });
        color_fidelity.push(if vis == 0 { 1.0 } else { inter as f64 / vis as f64 });
    }
    Ok(SceneScore { order_correct, iou, color_fidelity })
}

/// Both layer orders of every scene: `[s0, s0 swapped, s1, s1 swapped, ...]`.
pub fn order_variants(scenes: &[SceneSpec]) -> Result<Vec<SceneSpec>> {
    let mut out = Vec::with_capacity(2 * scenes.len());
    for s in scenes {
        let z = s.z_sorted();
        out.push(s.clone());
        out.push(s.swap_order(z[z.len() - 1], z[z.len() - 2])?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub scenes: usize,
    pub samples: usize,
    pub occlusion_accuracy: f64,
    pub layout: ConditionKind,
    pub iou: f64,
    pub color_fidelity: f64,
}

impl EvalReport {
    pub fn from_scores(label: &str, layout: ConditionKind, scores: &[SceneScore]) -> Result<EvalReport> {
        if scores.is_empty() {
            return Err(Error::Contract("no generations to score".into()));
        }
        let mean = |f: &dyn Fn(&SceneScore) -> f64| scores.iter().map(f).sum::<f64>() / scores.len() as f64;
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(EvalReport {
            label: label.to_string(),
            scenes: scores.len() / 2,
            samples: scores.len(),
            occlusion_accuracy: mean(&|s| s.order_correct as u8 as f64),
            layout,
            iou: mean(&|s| avg(&s.iou)),
            color_fidelity: mean(&|s| avg(&s.color_fidelity)),
        })
    }

    pub fn to_kv(&self) -> String {
        format!(
            "label={} scenes={} samples={} occlusion_accuracy={} layout={} iou={} color_fidelity={}",
            self.label, self.scenes, self.samples, self.occlusion_accuracy, self.layout, self.iou, self.color_fidelity
        )
    }

    pub fn from_kv(line: &str) -> Result<EvalReport> {
        let kv: BTreeMap<&str, &str> = line.split_whitespace().filter_map(|f| f.split_once('=')).collect();
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Parse { line: 1, msg: format!("report lacks {k}") });
        let num = |k: &str| get(k)?.parse::<f64>().map_err(|_| Error::Parse { line: 1, msg: format!("bad {k}") });
        let int = |k: &str| get(k)?.parse::<usize>().map_err(|_| Error::Parse { line: 1, msg: format!("bad {k}") });
        Ok(EvalReport {
            label: get("label")?.to_string(),
            scenes: int("scenes")?,
            samples: int("samples")?,
            occlusion_accuracy: num("occlusion_accuracy")?,
            layout: get("layout")?.parse()?,
            iou: num("iou")?,
            color_fidelity: num("color_fidelity")?,
        })
    }
}

/// Renders the scenes exactly; the harness self-test generator.
pub fn oracle_generator(scenes: &[SceneSpec]) -> Result<Vec<Image>> {
    Ok(scenes.iter().map(render_scene).collect())
}

/// Samples the scenes with `net`, conditioning each element on its content
/// maps and the `layout` kind. Batch `i` draws its noise from
/// `Rng::new(seed).fork(i)`.
pub fn model_generator<'a, T: Scalar>(
    net: &'a DcNet<T>,
    fusion: Fusion,
    layout: ConditionKind,
    seed: u64,
    batch: usize,
) -> impl FnMut(&[SceneSpec]) -> Result<Vec<Image>> + 'a {
    move |scenes: &[SceneSpec]| {
        let mut out = Vec::with_capacity(scenes.len());
        for (bi, chunk) in scenes.chunks(batch.max(1)).enumerate() {
            let conds: Vec<_> = chunk.iter().map(extract_conditions).collect();
            let count = conds[0].elements.len();
            if conds.iter().any(|c| c.elements.len() != count) {
                return Err(Error::Contract("a sampling batch must share its element count".into()));
            }
            let mut slots = Vec::with_capacity(count);
            for r in 0..count {
                let rows = conds
                    .iter()
                    .map(|c| c.elements.iter().find(|e| e.order == r).map(|e| (e, layout)))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::Invariant(format!("no element of rank {r}")))?;
                slots.push(ElementBatch::from_conditions(&rows, &ConditionKind::CONTENTS, r as u32)?);
            }
            let classes: Vec<Option<usize>> = chunk.iter().map(|s| Some(s.background.class_id)).collect();
            let mut rng = Rng::new(seed).fork(bi as u64);
            let x = net.sample(&classes, &Control::Elements(slots), fusion, &mut rng)?;
            out.extend(unstack_signed(&x)?);
        }
        Ok(out)
    }
}

/// Generates every scene in both orders with `generate` and scores them.
pub fn evaluate(
    label: &str,
    layout: ConditionKind,
    scenes: &[SceneSpec],
    mut generate: impl FnMut(&[SceneSpec]) -> Result<Vec<Image>>,
) -> Result<(EvalReport, Vec<Image>)> {
    if scenes.is_empty() {
        return Err(Error::Contract("the test split is empty".into()));
    }
    let variants = order_variants(scenes)?;
    let images = generate(&variants)?;
    if images.len() != variants.len() {
        return Err(Error::Invariant(format!("generator returned {} images for {} scenes", images.len(), variants.len())));
    }
    let scores = variants.iter().zip(&images).map(|(s, img)| score_scene(s, img)).collect::<Result<Vec<_>>>()?;
    Ok((EvalReport::from_scores(label, layout, &scores)?, images))
}

/// Renders a multi-row report as `key=value` lines with deltas against the
/// first row.
pub fn render_reports(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let base = reports.first().map(|r| r.occlusion_accuracy).unwrap_or(0.0);
    for r in reports {
        let _ = writeln!(s, "{} delta_accuracy={:+.6}", r.to_kv(), r.occlusion_accuracy - base);
    }
    s
}

pub fn ablation_variants() -> Vec<InterOptions> {
    vec![
        InterOptions::default(),
        InterOptions { order_embedding: false, ..Default::default() },
        InterOptions { layer: false, ..Default::default() },
        InterOptions { spatial: false, ..Default::default() },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_eval_scene;

    fn scenes(n: usize) -> Vec<SceneSpec> {
        let mut rng = Rng::new(8);
        (0..n).map(|_| generate_eval_scene(&mut rng, 8)).collect()
    }

    #[test]
    fn oracle_scores_perfectly() {
        let (r, imgs) = evaluate("oracle", ConditionKind::Mask, &scenes(20), oracle_generator).unwrap();
        assert_eq!(imgs.len(), 40);
        assert_eq!((r.occlusion_accuracy, r.iou, r.color_fidelity), (1.0, 1.0, 1.0));
        assert_eq!(EvalReport::from_kv(&r.to_kv()).unwrap(), r);
    }

    #[test]
    fn order_blind_generator_scores_half() {
        // always paints the variant's stored first element on top
        let gen = |ss: &[SceneSpec]| -> Result<Vec<Image>> {
            Ok(ss
                .iter()
                .map(|s| {
                    let mut fixed = s.clone();
                    fixed.elements[0].z = 10;
                    fixed.elements[1].z = 0;
                    render_scene(&fixed)
                })
                .collect())
        };
        let (r, _) = evaluate("blind", ConditionKind::Mask, &scenes(10), gen).unwrap();
        assert_eq!(r.occlusion_accuracy, 0.5);
        assert!(r.iou < 1.0);
    }

    #[test]
    fn empty_test_set_is_a_contract_error() {
        assert!(matches!(evaluate("x", ConditionKind::Mask, &[], oracle_generator), Err(Error::Contract(_))));
    }
}
