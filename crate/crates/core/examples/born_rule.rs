//! Continuous number measurement of a coherent state: the record collapses
//! each trajectory onto a number state with Poisson statistics.

use qnd_cat::fock::{coherent_state, FockSpace};
use qnd_cat::sme::{integrate, trajectory_seed, ConstantProbe, NoiseStream, Scheme, SmeParams};
use qnd_cat::Complex64;

fn main() -> qnd_cat::Result<()> {
    let space = FockSpace::new(16)?;
    let alpha = Complex64::new(1.5, 0.0);
    let rho0 = coherent_state(alpha, space)?.to_density();
    let params = SmeParams {
        m: 1.0,
        eta: 1.0,
        kappa: 0.0,
        dt: 2e-3,
    };
    let runs = 200;

    let mut counts = vec![0usize; space.dim()];
    for i in 0..runs {
        let mut noise = NoiseStream::new(trajectory_seed(42, i as u64), 0);
        let (rho, _) = integrate(
            &rho0,
            &mut ConstantProbe(1.0),
            &params,
            &mut noise,
            12.0,
            Scheme::Exponential,
        )?;
        let pops = rho.populations();
        let (n, _) = pops.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        counts[n] += 1;
    }

    let mean = alpha.norm_sqr();
    println!(" n  observed  poisson");
    let mut factorial = 1.0;
    for (n, &c) in counts.iter().enumerate().take(8) {
        if n > 0 {
            factorial *= n as f64;
        }
        let p = (-mean).exp() * mean.powi(n as i32) / factorial;
        println!("{n:2}  {:8.3}  {p:7.3}", c as f64 / runs as f64);
    }
    Ok(())
}
