//! Optimal overlap fidelity with two-component displaced-squeezed states
//!
//! `|Ψ(ζ, α, φ)⟩ ∝ |α, ζ⟩ + e^{iφ} |−α, ζ*⟩`, maximized over `ζ = r e^{iθ}`,
//! `α = x + iy` and the relative phase `φ`.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{displaced_squeezed_amplitudes, husimi_q, overlap_vec, CVector, DensityMatrix, FockSpace, PureState};
use crate::simplex::{minimize, SimplexOptions};

/// Largest squeezing magnitude the ansatz accepts.
pub const MAX_SQUEEZING: f64 = 1.5;

/// `|α| below which the two components are considered merged.
pub const MERGED_LOBE_RADIUS: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SuperpositionAnsatz {
    pub r: f64,
    pub theta: f64,
    pub x: f64,
    pub y: f64,
    pub phi: f64,
}

impl SuperpositionAnsatz {
    pub fn new(r: f64, theta: f64, alpha: Complex64, phi: f64) -> Self {
        Self {
            r,
            theta: theta.rem_euclid(TAU),
            x: alpha.re,
            y: alpha.im,
            phi: phi.rem_euclid(TAU),
        }
    }

    pub fn zeta(&self) -> Complex64 {
        Complex64::from_polar(self.r, self.theta)
    }

    pub fn alpha(&self) -> Complex64 {
        Complex64::new(self.x, self.y)
    }

    /// Same physical state with the roles of the two components swapped:
    /// `(α, ζ, φ) → (−α, ζ*, −φ)`.
    pub fn swapped(&self) -> Self {
        Self::new(self.r, -self.theta, -self.alpha(), -self.phi)
    }

    /// Search coordinates: `ζ` in Cartesian form, smooth through `r = 0`.
    fn from_params(p: &[f64]) -> Self {
        let zeta = Complex64::new(p[0], p[1]);
        Self::new(zeta.norm(), zeta.arg(), Complex64::new(p[2], p[3]), p[4])
    }

    fn params(&self) -> [f64; 5] {
        let zeta = self.zeta();
        [zeta.re, zeta.im, self.x, self.y, self.phi]
    }
}

/// Unnormalized superposition and the population it loses to truncation.
fn ansatz_vector(ansatz: &SuperpositionAnsatz, dim: usize) -> (CVector, f64) {
    let first = displaced_squeezed_amplitudes(ansatz.alpha(), ansatz.zeta(), dim);
    let second = displaced_squeezed_amplitudes(-ansatz.alpha(), ansatz.zeta().conj(), dim);
    let lost = (1.0 - first.norm_squared()).max(0.0);
    (first + second * Complex64::from_polar(1.0, ansatz.phi), lost)
}

/// Normalized ansatz state on `space`.
pub fn ansatz_state(ansatz: &SuperpositionAnsatz, space: FockSpace) -> Result<PureState> {
    if ansatz.r < 0.0 || ansatz.r > MAX_SQUEEZING {
        return Err(Error::Truncation(format!(
            "squeezing r = {} outside [0, {MAX_SQUEEZING}]",
            ansatz.r
        )));
    }
    let energy = ansatz.alpha().norm_sqr() * (2.0 * ansatz.r).exp();
    if energy > space.dim() as f64 / 4.0 {
        return Err(Error::Truncation(format!(
            "|alpha|^2 e^(2r) = {energy:.3} exceeds dim/4 = {:.3}",
            space.dim() as f64 / 4.0
        )));
    }
    let (v, _) = ansatz_vector(ansatz, space.dim());
    if v.norm() < 1e-8 {
        return Err(Error::VanishingNorm);
    }
    PureState::new(v)
}

/// `⟨Ψ|ρ|Ψ⟩` for the normalized ansatz; zero when the components cancel.
pub fn fidelity(rho: &DensityMatrix, ansatz: &SuperpositionAnsatz) -> f64 {
    let (v, _) = ansatz_vector(ansatz, rho.dim());
    let norm2 = v.norm_squared();
    if norm2 < 1e-16 {
        return 0.0;
    }
    overlap_vec(rho.matrix(), &v) / norm2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityResult {
    pub value: f64,
    pub ansatz: SuperpositionAnsatz,
    pub evaluations: usize,
    pub converged: bool,
    /// Fidelity of the moment-based seed before local search.
    pub seed_value: f64,
    /// The optimum has `|α| < 0.3`: the components have merged.
    pub non_bimodal: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizeOptions {
    pub starts: usize,
    pub simplex: SimplexOptions,
    /// Seed for the perturbations of the extra starts.
    pub seed: u64,
    /// Husimi grid points per axis used for the moment seed.
    pub seed_grid: usize,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            simplex: SimplexOptions::default(),
            seed: 0x5eed,
            seed_grid: 41,
        }
    }
}

/// Objective: negative fidelity, penalized when the ansatz leaves the
/// truncated space or exceeds the squeezing bound.
fn objective(rho: &DensityMatrix, p: &[f64]) -> f64 {
    let ansatz = SuperpositionAnsatz::from_params(p);
    let (v, lost) = ansatz_vector(&ansatz, rho.dim());
    let norm2 = v.norm_squared();
    let f = if norm2 < 1e-16 {
        0.0
    } else {
        overlap_vec(rho.matrix(), &v) / norm2
    };
    let over = (p[0].hypot(p[1]) - MAX_SQUEEZING).max(0.0);
    -f + 10.0 * (lost - 1e-6).max(0.0) + over
}

/// Seed from the dominant Husimi lobe: its Q-weighted centroid gives α and
/// its covariance (minus the vacuum 1/4) gives the squeezing.
pub fn moment_seed(rho: &DensityMatrix, grid: usize) -> SuperpositionAnsatz {
    let half = (rho.dim() as f64).sqrt().min(8.0);
    let grid = grid.max(9);
    let step = 2.0 * half / (grid - 1) as f64;
    let mut samples = Vec::with_capacity(grid * grid);
    let mut best = (0.0, 0.0, f64::NEG_INFINITY);
    for i in 0..grid {
        let p = -half + step * i as f64;
        for j in 0..grid {
            let x = -half + step * j as f64;
            let q = husimi_q(rho, x, p);
            if q > best.2 {
                best = (x, p, q);
            }
            samples.push((x, p, q));
        }
    }
    let (bx, bp) = (best.0, best.1);
    let (mut w, mut mx, mut mp) = (0.0, 0.0, 0.0);
    for &(x, p, q) in &samples {
        if x * bx + p * bp > 0.0 {
            w += q;
            mx += q * x;
            mp += q * p;
        }
    }
    if w <= 0.0 || (bx == 0.0 && bp == 0.0) {
        return SuperpositionAnsatz::new(0.0, 0.0, Complex64::new(bx, bp), 0.0);
    }
    mx /= w;
    mp /= w;
    let (mut vxx, mut vpp, mut vxp) = (0.0, 0.0, 0.0);
    for &(x, p, q) in &samples {
        if x * bx + p * bp > 0.0 {
            vxx += q * (x - mx) * (x - mx);
            vpp += q * (p - mp) * (p - mp);
            vxp += q * (x - mx) * (p - mp);
        }
    }
    vxx = vxx / w - 0.25;
    vpp = vpp / w - 0.25;
    vxp /= w;
    let tr = vxx + vpp;
    let disc = ((vxx - vpp).powi(2) / 4.0 + vxp * vxp).sqrt();
    let lmax = (tr / 2.0 + disc).max(1e-3);
    let lmin = (tr / 2.0 - disc).max(1e-3);
    let r = (0.25 * (lmax / lmin).ln()).clamp(0.0, 1.0);
    // major-axis angle; the squeezed quadrature is perpendicular
    let major = 0.5 * (2.0 * vxp).atan2(vxx - vpp);
    let minor = major + PI / 2.0;
    let mut seed = SuperpositionAnsatz::new(r, 2.0 * minor, Complex64::new(mx, mp), 0.0);
    let mut best_phi = (0.0, f64::NEG_INFINITY);
    for k in 0..16 {
        seed.phi = TAU * k as f64 / 16.0;
        let f = fidelity(rho, &seed);
        if f > best_phi.1 {
            best_phi = (seed.phi, f);
        }
    }
    seed.phi = best_phi.0;
    seed
}

/// Multi-start Nelder–Mead maximization of the overlap fidelity.
pub fn optimize_fidelity(rho: &DensityMatrix) -> FidelityResult {
    optimize_fidelity_with(rho, &OptimizeOptions::default())
}

pub fn optimize_fidelity_with(rho: &DensityMatrix, opts: &OptimizeOptions) -> FidelityResult {
    let seed = moment_seed(rho, opts.seed_grid);
    let seed_value = fidelity(rho, &seed);
    let steps = [0.1, 0.1, 0.25, 0.25, 0.6];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(f64, SuperpositionAnsatz, bool)> = None;
    let mut evaluations = 0;
    for start in 0..opts.starts.max(1) {
        let mut x0 = seed.params();
        if start > 0 {
            let spread = [0.2, 0.2, 0.4, 0.4, 1.5];
            for (v, s) in x0.iter_mut().zip(spread) {
                *v += s * (rng.random::<f64>() * 2.0 - 1.0);
            }
        }
        let m = minimize(|p| objective(rho, p), &x0, &steps, opts.simplex);
        evaluations += m.evaluations;
        let ansatz = SuperpositionAnsatz::from_params(&m.x);
        let value = fidelity(rho, &ansatz);
        if best.as_ref().is_none_or(|b| value > b.0) {
            best = Some((value, ansatz, m.converged));
        }
    }
    let (mut value, mut ansatz, converged) = best.expect("at least one start");
    if seed_value > value {
        value = seed_value;
        ansatz = seed;
    }
    FidelityResult {
        value,
        ansatz,
        evaluations,
        converged,
        seed_value,
        non_bimodal: ansatz.alpha().norm() < MERGED_LOBE_RADIUS,
    }
}

/// Best single displaced-squeezed overlap `max ⟨α,ζ|ρ|α,ζ⟩`, seeded from the
/// first and second moments of ρ.
pub fn best_gaussian_overlap(rho: &DensityMatrix, max_evaluations: usize) -> f64 {
    let a = rho.mean_a();
    let eval = |p: &[f64]| -> f64 {
        let zeta = Complex64::from_polar(p[0].abs().min(MAX_SQUEEZING), p[1]);
        let v = displaced_squeezed_amplitudes(Complex64::new(p[2], p[3]), zeta, rho.dim());
        let n2 = v.norm_squared();
        if n2 < 1e-16 {
            return 0.0;
        }
        overlap_vec(rho.matrix(), &v) / n2
    };
    // covariance seed: ⟨Δa²⟩ fixes the squeezing orientation and strength
    let d = rho.dim();
    let mut a2 = Complex64::new(0.0, 0.0);
    for k in 2..d {
        a2 += rho.matrix()[(k, k - 2)] * ((k * (k - 1)) as f64).sqrt();
    }
    let var_a2 = a2 - a * a;
    let var_n = rho.mean_n() - a.norm_sqr();
    // for a squeezed state: ⟨Δa²⟩ = −e^{iθ} sinh r cosh r, ⟨Δa†Δa⟩ = sinh² r
    let r0 = var_n.max(0.0).sqrt().asinh().min(1.0);
    let theta0 = (-var_a2).arg();
    let x0 = [r0, theta0, a.re, a.im];
    let m = minimize(
        |p| -eval(p),
        &x0,
        &[0.1, 0.4, 0.2, 0.2],
        SimplexOptions {
            value_tolerance: 1e-5,
            max_evaluations,
        },
    );
    (-m.value).max(eval(&x0))
}
