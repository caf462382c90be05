//! Husimi Q of an even cat state, written as a CSV grid.
//!
//! ```text
//! cargo run --release --example husimi_cat -- cat_q.csv
//! ```

use qnd_cat::fock::{coherent_amplitudes, husimi_grid, save_husimi_csv, PureState};
use qnd_cat::Complex64;

fn main() -> qnd_cat::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "cat_q.csv".into());
    let alpha = Complex64::new(0.0, 2.5);
    let dim = 48;
    let cat = PureState::new(coherent_amplitudes(alpha, dim) + coherent_amplitudes(-alpha, dim))?;
    let rho = cat.to_density();
    println!("<n> = {:.4}, <p> = {:.4}", rho.mean_n(), rho.mean_p());

    let grid = husimi_grid(&rho, 5.0, 81);
    let peak = grid.iter().max_by(|a, b| a.q.total_cmp(&b.q)).unwrap();
    println!("peak Q = {:.4} at ({:.3}, {:.3})", peak.q, peak.x, peak.p);
    save_husimi_csv(&grid, std::path::Path::new(&path))?;
    println!("wrote {} samples to {path}", grid.len());
    Ok(())
}
