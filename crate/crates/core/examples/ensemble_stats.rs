//! Success probability and fidelity statistics over a small ensemble,
//! ideal and with detector inefficiency plus cavity loss.

use qnd_cat::ensemble::{run_ensemble, EnsembleConfig};
use qnd_cat::protocol::ProtocolConfig;

fn main() -> qnd_cat::Result<()> {
    let k = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(24);
    for (label, eta, kappa_rel) in [("ideal", 1.0, 0.0), ("eta=0.8, kappa=0.005M", 0.8, 0.005)] {
        let mut base = ProtocolConfig::for_n_star(10);
        base.seed = 2024;
        base.eta = eta;
        base.kappa = kappa_rel * base.m_max;
        let run = run_ensemble(&EnsembleConfig::new(base, k))?;
        let s = &run.stats;
        println!(
            "{label:>22}: P = {:.2} [{:.2}, {:.2}], median F = {:.3}, mean restarts {:.2}",
            s.success_probability, s.success_ci.0, s.success_ci.1, s.fidelity.median, s.mean_restarts
        );
    }
    Ok(())
}
