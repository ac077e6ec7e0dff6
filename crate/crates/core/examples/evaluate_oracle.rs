//! Scores generators on held-out overlapping pairs: the painter's-algorithm
//! oracle, an order-blind generator and one that always ignores the top
//! element.

use dcnet::embeddings::ConditionKind;
use dcnet::harness::eval::{evaluate, oracle_generator, render_reports};
use dcnet::scene::{generate_eval_scene, render_scene, SceneSpec};
use dcnet::Rng;

fn main() -> dcnet::Result<()> {
    let mut rng = Rng::new(11);
    let scenes: Vec<SceneSpec> = (0..50).map(|_| generate_eval_scene(&mut rng, 8)).collect();

    let (oracle, _) = evaluate("oracle", ConditionKind::Mask, &scenes, oracle_generator)?;
    // draws both scene orders the same way, so it is right half the time
    let (blind, _) = evaluate("order_blind", ConditionKind::Mask, &scenes, |v| {
        Ok(v.iter()
            .map(|s| {
                let mut fixed = s.clone();
                fixed.elements.sort_by_key(|e| e.color);
                for (z, e) in fixed.elements.iter_mut().enumerate() {
                    e.z = z as u32;
                }
                render_scene(&fixed)
            })
            .collect())
    })?;
    let (bottom_only, _) = evaluate("bottom_only", ConditionKind::Mask, &scenes, |v| {
        Ok(v.iter()
            .map(|s| {
                let mut low = s.clone();
                let top = low.elements.iter().map(|e| e.z).max().unwrap_or(0);
                low.elements.retain(|e| e.z != top);
                render_scene(&low)
            })
            .collect())
    })?;
    print!("{}", render_reports(&[oracle, blind, bottom_only]));
    Ok(())
}
