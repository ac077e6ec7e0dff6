//! 2-d rotary embeddings: attention logits depend only on the offset
//! between positions, and content tokens live at a shifted grid.

use dcnet::embeddings::{content_positions, grid_positions, rope_apply_2d, OffsetDelta};
use dcnet::{Rng, Tensor};

fn logit(q: &Tensor<f64>, k: &Tensor<f64>, pq: (usize, usize), pk: (usize, usize)) -> dcnet::Result<f64> {
    let (a, b) = (rope_apply_2d(q, &[pq], 10_000.0)?.to_vec(), rope_apply_2d(k, &[pk], 10_000.0)?.to_vec());
    Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum())
}

fn main() -> dcnet::Result<()> {
    let mut rng = Rng::new(3);
    let q = Tensor::<f64>::randn(&[1, 8], 1.0, &mut rng);
    let k = Tensor::<f64>::randn(&[1, 8], 1.0, &mut rng);
    for (pq, pk) in [((0, 0), (2, 3)), ((5, 1), (7, 4)), ((10, 10), (12, 13))] {
        println!("q at {pq:?}, k at {pk:?}: logit {:.12}", logit(&q, &k, pq, pk)?);
    }
    println!("different offset (0,0)-(3,2): {:.12}", logit(&q, &k, (0, 0), (3, 2))?);

    let layout = grid_positions(4, 4);
    let delta = OffsetDelta::for_grid(4, 4);
    let content = content_positions(&layout, delta);
    println!("delta {:?}: layout {:?} .. {:?}, content {:?} .. {:?}", delta, layout[0], layout[15], content[0], content[15]);
    Ok(())
}
