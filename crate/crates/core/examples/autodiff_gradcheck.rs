//! Reverse-mode autodiff on a small graph, checked against central
//! finite differences.

use dcnet::numerics::gradcheck::check_gradients;
use dcnet::{Rng, Tensor};

fn main() -> dcnet::Result<()> {
    let mut rng = Rng::new(1);
    let w = Tensor::<f64>::param(&[4, 3], Tensor::<f64>::randn(&[4, 3], 0.5, &mut rng).to_vec())?;
    let x = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
    let target = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);

    let loss = || x.matmul(&w)?.silu().softmax(1)?.sub(&target)?.square().mean_all().add(&w.abs().sum_all().mul_scalar(1e-3));
    let l = loss()?;
    l.backward()?;
    println!("loss {:.6}", l.item()?);
    println!("dL/dw[0..3] = {:?}", &w.grad().unwrap()[..3]);

    w.zero_grad();
    let report = check_gradients(&[("w", &w)], loss, 100, 1e-5, &mut Rng::new(2))?;
    println!("{} probes, max relative error {:.2e}, passed at 1e-4: {}", report.probes, report.max_rel_err, report.passed(1e-4));
    Ok(())
}
