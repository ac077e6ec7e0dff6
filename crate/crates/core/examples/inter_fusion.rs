//! Inter-element fusion weights: spatial gates start at one half, layer
//! weights sum to one per token and react to the layer order.

use dcnet::config::{InterOptions, ModelConfig};
use dcnet::inter::{sort_and_stack, InterController};
use dcnet::nn::VarStore;
use dcnet::{Rng, Tensor};

fn main() -> dcnet::Result<()> {
    let cfg = ModelConfig::default();
    let store = VarStore::<f64>::new();
    let inter = InterController::new(&store.root(Rng::new(1)), &cfg, InterOptions::default())?;
    let level = cfg.levels()[1];
    let n = level.size * level.size;
    let mut rng = Rng::new(2);
    let a = Tensor::<f64>::randn(&[1, n, level.channels], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[1, n, level.channels], 1.0, &mut rng);

    for (za, zb) in [(0u32, 1u32), (1, 0)] {
        let stacked = sort_and_stack(&[(a.clone(), za), (b.clone(), zb)])?;
        let (fused, w) = inter.forward_level(1, &stacked)?;
        let sp = w.spatial.expect("spatial weights").to_vec();
        let ly = w.layer.expect("layer weights").to_vec();
        // layer weights are [1, L, N, 1]: token 0 of each layer
        println!("a at z={za}, b at z={zb}");
        println!("  spatial weight range {:.3} .. {:.3}", sp.iter().cloned().fold(1.0, f64::min), sp.iter().cloned().fold(0.0, f64::max));
        println!("  token 0 layer weights bottom/top: {:.4} / {:.4} (sum {:.6})", ly[0], ly[n], ly[0] + ly[n]);
        println!("  fused {:?}, first value {:+.4}", fused.shape(), fused.to_vec()[0]);
    }
    Ok(())
}
