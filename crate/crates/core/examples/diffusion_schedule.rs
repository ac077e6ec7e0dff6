//! The noise schedule, forward noising and a reverse chain driven by the
//! true noise of a fixed target.

use dcnet::diffusion::{p_sample_step, q_sample, NoiseSchedule};
use dcnet::{Rng, Tensor};

fn main() -> dcnet::Result<()> {
    let s = NoiseSchedule::linear(200, 1e-4, 2e-2)?;
    for t in [1, 50, 100, 150, 200] {
        println!("t={t:3} beta={:.5} alpha_bar={:.5} posterior var={:.6}", s.beta(t)?, s.alpha_bar(t)?, s.posterior_variance(t)?);
    }

    let mut rng = Rng::new(4);
    let z0 = Tensor::<f64>::from_f64(&[1, 4], &[0.9, -0.5, 0.1, 0.0])?;
    let eps = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng);
    let mut z = q_sample(&s, &z0, &[200], &eps)?;
    println!("z_200 = {:?}", z.to_vec());
    // with the exact noise for the current z the chain walks back to z0
    for t in (1..=200).rev() {
        let ab = s.alpha_bar(t)?;
        let oracle: Vec<f64> = z.to_vec().iter().zip(z0.to_vec()).map(|(zt, x0)| (zt - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect();
        z = p_sample_step(&s, &z, t, &Tensor::from_vec(&[1, 4], oracle)?, &mut rng)?;
    }
    println!("z_0  = {:?}", z.to_vec());
    Ok(())
}
