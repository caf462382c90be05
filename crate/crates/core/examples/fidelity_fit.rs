//! Optimal two-component fit of a dephased, squeezed cat.

use qnd_cat::fidelity::{ansatz_state, optimize_fidelity, SuperpositionAnsatz};
use qnd_cat::fock::{DensityMatrix, FockSpace};

fn main() -> qnd_cat::Result<()> {
    let space = FockSpace::new(64)?;
    let truth = SuperpositionAnsatz::new(0.4, 0.3, qnd_cat::Complex64::new(0.2, 2.4), 0.0);
    let pure = ansatz_state(&truth, space)?.to_density();
    let w = |v: f64| qnd_cat::Complex64::new(v, 0.0);
    let mixed = pure.matrix() * w(0.9) + DensityMatrix::maximally_mixed(space).matrix() * w(0.1);
    let rho = DensityMatrix::from_matrix(mixed)?;

    println!(
        "fidelity of the generating ansatz {:.4}",
        qnd_cat::fidelity::fidelity(&rho, &truth)
    );
    let result = optimize_fidelity(&rho);
    let a = result.ansatz;
    println!(
        "fidelity {:.4} (moment seed {:.4}), {} evaluations",
        result.value, result.seed_value, result.evaluations
    );
    println!(
        "fitted r = {:.3}, theta = {:.3}, alpha = {:.3}",
        a.r,
        a.theta,
        a.alpha()
    );
    println!(
        "true   r = {:.3}, theta = {:.3}, alpha = {:.3}",
        truth.r,
        truth.theta,
        truth.alpha()
    );
    Ok(())
}
