//! Finite-strength probing of a displaced crescent state: outcome density,
//! dark-axis region II and its width for two target photon numbers.

use qnd_cat::crescent::{
    classify_regions, default_grid, default_target, displaced_crescent, CrescentSpec, DEFAULT_DELTA_PRIME,
};
use qnd_cat::protocol::default_dim;

fn main() -> qnd_cat::Result<()> {
    let beta = 0.2;
    let xi = 0.08;
    for n_star in [8, 10] {
        let dim = default_dim(n_star);
        let spec = CrescentSpec::new(xi, n_star, dim)?;
        let state = displaced_crescent(&spec, default_target(n_star))?;
        let analysis = classify_regions(&state, beta, DEFAULT_DELTA_PRIME, &default_grid(beta, dim, 512));
        println!(
            "n* = {n_star}: maxima of f at {:?}",
            analysis
                .f_maxima
                .iter()
                .map(|p| (p * 100.0).round() / 100.0)
                .collect::<Vec<_>>()
        );
        match analysis.region_ii {
            Some(r) => println!(
                "  region II [{:.3}, {:.3}], width {:.3}, success probability {:.3}",
                r.lower,
                r.upper,
                r.width(),
                analysis.success_probability()
            ),
            None => println!("  no dark region"),
        }
    }
    Ok(())
}
