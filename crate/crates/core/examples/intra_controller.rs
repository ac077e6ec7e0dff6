//! Runs the intra-element controller on one procedural element and shows
//! that its output carries the statistics of the content features.
//!
//! cargo run --release --example intra_controller -- [run/intra.ckpt]
//!
//! Without a checkpoint the layout blocks are still zero, so every layout
//! returns the content features unchanged.

use dcnet::config::{InterOptions, ModelConfig};
use dcnet::embeddings::ConditionKind;
use dcnet::model::{Control, DcNet, ElementBatch, Fusion};
use dcnet::scene::{extract_conditions, generate_scene};
use dcnet::training::Checkpoint;
use dcnet::Rng;

fn channel_stats(v: &[f32], c: usize, ch: usize) -> (f64, f64) {
    let n = v.len() / c;
    let m = (0..n).map(|i| v[i * c + ch] as f64).sum::<f64>() / n as f64;
    let var = (0..n).map(|i| (v[i * c + ch] as f64 - m).powi(2)).sum::<f64>() / n as f64;
    (m, var.sqrt())
}

fn main() -> dcnet::Result<()> {
    let net = match std::env::args().nth(1) {
        Some(p) => Checkpoint::load(std::path::Path::new(&p))?.build::<f32>()?,
        None => DcNet::<f32>::new(&ModelConfig::default(), InterOptions::default(), 0)?,
    };
    let spec = generate_scene(&mut Rng::new(5));
    let conds = extract_conditions(&spec);
    let el = &conds.elements[0];
    println!("element 0 of {}: canonical offset {:?}", conds.elements.len(), el.offset);

    for layout in ConditionKind::LAYOUTS {
        let batch = ElementBatch::from_conditions(&[(el, layout)], &ConditionKind::CONTENTS, 0)?;
        let (_, outs) = net.injection(&Control::Elements(vec![batch]), &[50], Fusion::Inter)?;
        let out = &outs[0];
        println!("layout {}: f0 {:?}", layout.name(), out.f0.shape());
        for (lvl, (h, r)) in out.levels.iter().zip(&out.reference).enumerate() {
            let c = h.dim(3);
            let (hv, rv) = (h.to_vec(), r.to_vec());
            let ((mh, sh), (mr, sr)) = (channel_stats(&hv, c, 0), channel_stats(&rv, c, 0));
            let moved = hv.iter().zip(&rv).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / hv.len() as f64;
            println!("  level {lvl} {:?}: channel 0 mean {mh:+.4} / {mr:+.4}, std {sh:.4} / {sr:.4}, mean |h - ref| {moved:.4}", h.shape());
        }
    }
    Ok(())
}
