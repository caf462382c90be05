//! Truncated Fock-space representation of the cavity mode.
//!
//! Quadratures follow `x = (a + a†)/2`, `p = (a − a†)/(2i)`, so the vacuum
//! has quadrature variance 1/4 and a coherent state `|α⟩` satisfies
//! `⟨x⟩ + i⟨p⟩ = α`.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Density-matrix elements below this magnitude are set to zero.
const FLUSH: f64 = 1e-150;

/// Number of Fock levels `0..dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FockSpace {
    dim: usize,
}

impl FockSpace {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("Fock dimension must be >= 2, got {dim}")));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Truncated ladder, number and quadrature matrices.
#[derive(Debug, Clone)]
pub struct OperatorSet {
    pub a: CMatrix,
    pub a_dag: CMatrix,
    pub n: CMatrix,
    pub x: CMatrix,
    pub p: CMatrix,
}

impl OperatorSet {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

pub fn build_operator_set(space: FockSpace) -> OperatorSet {
    let d = space.dim();
    let a = annihilation(d);
    let a_dag = a.adjoint();
    let n = &a_dag * &a;
    let x = (&a + &a_dag).map(|z| z * 0.5);
    let p = (&a - &a_dag).map(|z| z / (2.0 * I));
    OperatorSet { a, a_dag, n, x, p }
}

fn annihilation(d: usize) -> CMatrix {
    let mut a = CMatrix::zeros(d, d);
    for k in 1..d {
        a[(k - 1, k)] = Complex64::new((k as f64).sqrt(), 0.0);
    }
    a
}

/// Normalized state vector on the truncated space.
#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    amplitudes: CVector,
}

impl PureState {
    /// Normalizes `amplitudes`; fails on a zero vector.
    pub fn new(amplitudes: CVector) -> Result<Self> {
        let norm = amplitudes.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::VanishingNorm);
        }
        Ok(Self {
            amplitudes: amplitudes / Complex64::new(norm, 0.0),
        })
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.amplitudes
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn populations(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn to_density(&self) -> DensityMatrix {
        DensityMatrix {
            rho: &self.amplitudes * self.amplitudes.adjoint(),
        }
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &PureState) -> Complex64 {
        self.amplitudes.dotc(&other.amplitudes)
    }

    pub fn fidelity(&self, other: &PureState) -> f64 {
        self.inner(other).norm_sqr()
    }

    pub fn expectation(&self, op: &CMatrix) -> Complex64 {
        self.amplitudes.dotc(&(op * &self.amplitudes))
    }

    pub fn mean_n(&self) -> f64 {
        self.amplitudes
            .iter()
            .enumerate()
            .map(|(k, c)| k as f64 * c.norm_sqr())
            .sum()
    }

    /// `⟨a⟩ = ⟨x⟩ + i⟨p⟩`.
    pub fn mean_a(&self) -> Complex64 {
        let c = &self.amplitudes;
        (1..c.len()).map(|k| c[k - 1].conj() * c[k] * (k as f64).sqrt()).sum()
    }

    /// Complex conjugation of the Fock amplitudes (mirror `p → −p`).
    pub fn conjugate(&self) -> PureState {
        PureState {
            amplitudes: self.amplitudes.map(|c| c.conj()),
        }
    }

    /// Phase-space rotation `e^{iθ n}`.
    pub fn rotate(&self, theta: f64) -> PureState {
        PureState {
            amplitudes: CVector::from_iterator(
                self.dim(),
                self.amplitudes
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c * Complex64::from_polar(1.0, theta * k as f64)),
            ),
        }
    }

    /// Displacement `D(γ)|ψ⟩`, truncated back to the same dimension.
    pub fn displace(&self, gamma: Complex64) -> Displaced<PureState> {
        let d = self.dim();
        let padded = 2 * d;
        let disp = displacement_matrix(padded, d, gamma);
        let full = &disp * &self.amplitudes;
        let outside: f64 = full.rows(d, padded - d).iter().map(|c| c.norm_sqr()).sum();
        let kept = full.rows(0, d).into_owned();
        let state = PureState::new(kept).expect("displacement of a normalized state");
        let top = top_population(&state.populations());
        Displaced {
            state,
            outside,
            top_population: top,
        }
    }
}

/// Conditioned cavity-field state.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    rho: CMatrix,
}

impl DensityMatrix {
    /// Wraps a matrix after checking that it is square.
    pub fn from_matrix(rho: CMatrix) -> Result<Self> {
        if rho.nrows() != rho.ncols() || rho.nrows() < 2 {
            return Err(Error::Shape {
                expected: rho.nrows(),
                rows: rho.nrows(),
                cols: rho.ncols(),
            });
        }
        Ok(Self { rho })
    }

    pub fn vacuum(space: FockSpace) -> Self {
        let mut rho = CMatrix::zeros(space.dim(), space.dim());
        rho[(0, 0)] = Complex64::new(1.0, 0.0);
        Self { rho }
    }

    pub fn maximally_mixed(space: FockSpace) -> Self {
        let d = space.dim();
        Self {
            rho: CMatrix::from_diagonal_element(d, d, Complex64::new(1.0 / d as f64, 0.0)),
        }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.rho
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut CMatrix {
        &mut self.rho
    }

    pub fn into_matrix(self) -> CMatrix {
        self.rho
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn space(&self) -> FockSpace {
        FockSpace { dim: self.dim() }
    }

    pub fn trace(&self) -> Complex64 {
        self.rho.trace()
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| self.rho[(k, k)].re).collect()
    }

    pub fn mean_n(&self) -> f64 {
        (0..self.dim()).map(|k| k as f64 * self.rho[(k, k)].re).sum()
    }

    pub fn mean_n2(&self) -> f64 {
        (0..self.dim()).map(|k| (k * k) as f64 * self.rho[(k, k)].re).sum()
    }

    pub fn var_n(&self) -> f64 {
        let m = self.mean_n();
        self.mean_n2() - m * m
    }

    /// `Tr(aρ) = ⟨x⟩ + i⟨p⟩`.
    pub fn mean_a(&self) -> Complex64 {
        (1..self.dim()).map(|k| self.rho[(k, k - 1)] * (k as f64).sqrt()).sum()
    }

    pub fn mean_x(&self) -> f64 {
        self.mean_a().re
    }

    pub fn mean_p(&self) -> f64 {
        self.mean_a().im
    }

    pub fn purity(&self) -> f64 {
        self.rho.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Largest element of `|ρ − ρ†|`.
    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim();
        let r = self.rho.as_slice();
        let mut worst = 0.0f64;
        for j in 0..d {
            for i in j..d {
                worst = worst.max((r[j * d + i] - r[i * d + j].conj()).norm_sqr());
            }
        }
        worst.sqrt()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.rho + self.rho.adjoint()).map(|z| z * 0.5);
        h.symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    /// Replaces ρ by (ρ + ρ†)/2 and rescales to unit trace. Returns the
    /// trace before rescaling.
    pub fn hermitize_and_normalize(&mut self) -> f64 {
        self.hermitize_normalize_checked().0
    }

    /// As [`DensityMatrix::hermitize_and_normalize`], also reporting whether
    /// every element is finite.
    pub(crate) fn hermitize_normalize_checked(&mut self) -> (f64, bool) {
        let d = self.dim();
        let r = self.rho.as_mut_slice();
        let mut tr = 0.0;
        let mut probe = 0.0;
        for j in 0..d {
            r[j * d + j].im = 0.0;
            if r[j * d + j].re.abs() < FLUSH {
                r[j * d + j].re = 0.0;
            }
            tr += r[j * d + j].re;
            for i in (j + 1)..d {
                let mut avg = (r[j * d + i] + r[i * d + j].conj()) * 0.5;
                // flush values that would otherwise decay through the subnormal range
                if avg.re.abs() < FLUSH {
                    avg.re = 0.0;
                }
                if avg.im.abs() < FLUSH {
                    avg.im = 0.0;
                }
                probe += avg.re + avg.im;
                r[j * d + i] = avg;
                r[i * d + j] = avg.conj();
            }
        }
        if tr.is_finite() && tr > 0.0 {
            let inv = 1.0 / tr;
            r.iter_mut().for_each(|z| *z *= inv);
        }
        (tr, probe.is_finite())
    }

    /// Population of the top 10% of Fock levels.
    pub fn top_population(&self) -> f64 {
        top_population(&self.populations())
    }

    pub fn is_finite(&self) -> bool {
        self.rho.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Phase-space rotation `e^{iθn} ρ e^{−iθn}`.
    pub fn rotate(&self, theta: f64) -> DensityMatrix {
        let d = self.dim();
        DensityMatrix {
            rho: CMatrix::from_fn(d, d, |i, j| {
                self.rho[(i, j)] * Complex64::from_polar(1.0, theta * (i as f64 - j as f64))
            }),
        }
    }

    /// Complex conjugation in the Fock basis (mirror `p → −p`).
    pub fn conjugate(&self) -> DensityMatrix {
        DensityMatrix {
            rho: self.rho.map(|z| z.conj()),
        }
    }

    /// `⟨ψ|ρ|ψ⟩`.
    pub fn overlap(&self, psi: &PureState) -> f64 {
        overlap_vec(&self.rho, psi.amplitudes())
    }
}

pub(crate) fn overlap_vec(rho: &CMatrix, v: &CVector) -> f64 {
    v.dotc(&(rho * v)).re
}

pub(crate) fn top_population(pops: &[f64]) -> f64 {
    let d = pops.len();
    let start = d - (d / 10).max(1);
    pops[start..].iter().sum()
}

/// Result of a displacement together with its truncation diagnostics.
#[derive(Debug, Clone)]
pub struct Displaced<T> {
    pub state: T,
    /// Population pushed beyond the truncated space and discarded.
    pub outside: f64,
    /// Population of the top 10% of retained levels after displacement.
    pub top_population: f64,
}

impl<T> Displaced<T> {
    /// Leakage flag: more than 1e-6 of population at or beyond the top levels.
    pub fn truncation_flagged(&self) -> bool {
        self.outside > LEAKAGE_LIMIT || self.top_population > LEAKAGE_LIMIT
    }
}

pub const LEAKAGE_LIMIT: f64 = 1e-6;

/// Number state `|n⟩`.
pub fn fock_state(n: usize, space: FockSpace) -> Result<PureState> {
    if n >= space.dim() {
        return Err(Error::Config(format!(
            "Fock index {n} out of range for dimension {}",
            space.dim()
        )));
    }
    let mut v = CVector::zeros(space.dim());
    v[n] = Complex64::new(1.0, 0.0);
    PureState::new(v)
}

/// Exact (untruncated) coherent-state amplitudes `e^{−|α|²/2} αⁿ/√n!`, `n < dim`.
pub fn coherent_amplitudes(alpha: Complex64, dim: usize) -> CVector {
    let mut v = CVector::zeros(dim);
    v[0] = Complex64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
    for k in 1..dim {
        v[k] = v[k - 1] * alpha / (k as f64).sqrt();
    }
    v
}

pub fn coherent_state(alpha: Complex64, space: FockSpace) -> Result<PureState> {
    if alpha.norm_sqr() > space.dim() as f64 / 4.0 {
        return Err(Error::Truncation(format!(
            "|alpha|^2 = {:.3} exceeds dim/4 = {:.3}",
            alpha.norm_sqr(),
            space.dim() as f64 / 4.0
        )));
    }
    PureState::new(coherent_amplitudes(alpha, space.dim()))
}

/// Exact Fock amplitudes of `D(α)S(ζ)|0⟩` for `n < dim`, where
/// `S(ζ) = exp[(ζ* a² − ζ a†²)/2]`.
///
/// Uses the eigen-relation `(μa + νa†)|ψ⟩ = (μα + να*)|ψ⟩` with
/// `μ = cosh r`, `ν = e^{iθ} sinh r`, which gives a three-term recurrence.
/// The returned vector is not renormalized: `1 − ‖v‖²` is the population
/// lost to truncation.
pub fn displaced_squeezed_amplitudes(alpha: Complex64, zeta: Complex64, dim: usize) -> CVector {
    let r = zeta.norm();
    let theta = zeta.arg();
    let mu = r.cosh();
    let nu = Complex64::from_polar(r.sinh(), theta);
    let gamma = alpha * mu + nu * alpha.conj();
    let e_it = Complex64::from_polar(1.0, theta);
    let c0 = (-alpha.norm_sqr() / 2.0 - alpha.conj() * alpha.conj() * e_it * r.tanh() / 2.0).exp() / mu.sqrt();
    let mut v = CVector::zeros(dim);
    v[0] = c0;
    if dim > 1 {
        v[1] = gamma * c0 / mu;
    }
    for k in 1..dim.saturating_sub(1) {
        let kf = k as f64;
        v[k + 1] = (gamma * v[k] - nu * kf.sqrt() * v[k - 1]) / (mu * (kf + 1.0).sqrt());
    }
    v
}

pub fn displaced_squeezed_state(alpha: Complex64, zeta: Complex64, space: FockSpace) -> Result<PureState> {
    let r = zeta.norm();
    if r > 1.5 {
        return Err(Error::Truncation(format!("|zeta| = {r:.3} exceeds 1.5")));
    }
    let energy = alpha.norm_sqr() * (2.0 * r).exp();
    if energy > space.dim() as f64 / 4.0 {
        return Err(Error::Truncation(format!(
            "|alpha|^2 e^(2|zeta|) = {energy:.3} exceeds dim/4 = {:.3}",
            space.dim() as f64 / 4.0
        )));
    }
    PureState::new(displaced_squeezed_amplitudes(alpha, zeta, space.dim()))
}

/// Matrix elements `⟨m|D(γ)|n⟩` for `m < rows`, `n < cols`.
///
/// Closed form: for `m = n + k`,
/// `√(n!/m!) γ^k e^{−|γ|²/2} L_n^{(k)}(|γ|²)`, and for `n = m + k`,
/// `√(m!/n!) (−γ*)^k e^{−|γ|²/2} L_m^{(k)}(|γ|²)`. Each diagonal runs the
/// Laguerre recurrence in degree, rescaled to stay in range.
pub fn displacement_matrix(rows: usize, cols: usize, gamma: Complex64) -> CMatrix {
    let mut out = CMatrix::zeros(rows, cols);
    if gamma == Complex64::new(0.0, 0.0) {
        for k in 0..rows.min(cols) {
            out[(k, k)] = Complex64::new(1.0, 0.0);
        }
        return out;
    }
    let x = gamma.norm_sqr();
    let ln_r = gamma.norm().ln();
    let theta = gamma.arg();
    let mut ln_fact = vec![0.0; rows + cols + 1];
    for j in 1..ln_fact.len() {
        ln_fact[j] = ln_fact[j - 1] + (j as f64).ln();
    }
    // lower diagonals m = n + k
    for k in 0..rows {
        let len = cols.min(rows - k);
        let phase = Complex64::from_polar(1.0, k as f64 * theta);
        laguerre_diagonal(k, len, x, |n, value, scale| {
            let pre = 0.5 * (ln_fact[n] - ln_fact[n + k]) + k as f64 * ln_r - x / 2.0 + scale;
            out[(n + k, n)] = phase * (value * pre.exp());
        });
    }
    // upper diagonals n = m + k
    for k in 1..cols {
        let len = rows.min(cols - k);
        let phase = Complex64::from_polar(1.0, k as f64 * (std::f64::consts::PI - theta));
        laguerre_diagonal(k, len, x, |m, value, scale| {
            let pre = 0.5 * (ln_fact[m] - ln_fact[m + k]) + k as f64 * ln_r - x / 2.0 + scale;
            out[(m, m + k)] = phase * (value * pre.exp());
        });
    }
    out
}

/// Calls `f(j, v, s)` with `L_j^{(k)}(x) = v·e^s` for `j < len`.
fn laguerre_diagonal(k: usize, len: usize, x: f64, mut f: impl FnMut(usize, f64, f64)) {
    const RESCALE: f64 = 1e150;
    if len == 0 {
        return;
    }
    let kf = k as f64;
    let (mut prev, mut cur, mut scale) = (0.0, 1.0, 0.0);
    f(0, cur, scale);
    for j in 0..len - 1 {
        let jf = j as f64;
        let next = ((2.0 * jf + 1.0 + kf - x) * cur - (jf + kf) * prev) / (jf + 1.0);
        prev = cur;
        cur = next;
        if cur.abs() > RESCALE {
            cur /= RESCALE;
            prev /= RESCALE;
            scale += RESCALE.ln();
        }
        f(j + 1, cur, scale);
    }
}

/// `exp(γa† − γ*a)` on the truncated space by dense matrix exponential.
pub fn displacement_operator_expm(space: FockSpace, gamma: Complex64) -> CMatrix {
    let a = annihilation(space.dim());
    let gen = a.adjoint() * gamma - a * gamma.conj();
    gen.exp()
}

/// `ρ → D(γ) ρ D(γ)†`.
///
/// The displacement acts on ρ embedded in a space twice as large; whatever
/// lands beyond the original dimension is discarded and reported, and the
/// result is renormalized.
pub fn apply_displacement(rho: &DensityMatrix, gamma: Complex64) -> Displaced<DensityMatrix> {
    let d = rho.dim();
    if gamma == Complex64::new(0.0, 0.0) {
        return Displaced {
            top_population: rho.top_population(),
            state: rho.clone(),
            outside: 0.0,
        };
    }
    let padded = 2 * d;
    let disp = displacement_matrix(padded, d, gamma);
    let full = &disp * rho.matrix() * disp.adjoint();
    let outside: f64 = (d..padded).map(|k| full[(k, k)].re).sum();
    let mut out = DensityMatrix {
        rho: full.view((0, 0), (d, d)).into_owned(),
    };
    out.hermitize_and_normalize();
    let top = out.top_population();
    Displaced {
        state: out,
        outside,
        top_population: top,
    }
}

/// `Tr(op · ρ)`.
pub fn expectation(op: &CMatrix, rho: &DensityMatrix) -> Result<Complex64> {
    let d = rho.dim();
    if op.nrows() != d || op.ncols() != d {
        return Err(Error::Shape {
            expected: d,
            rows: op.nrows(),
            cols: op.ncols(),
        });
    }
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..d {
        for j in 0..d {
            acc += op[(i, j)] * rho.rho[(j, i)];
        }
    }
    Ok(acc)
}

/// Husimi function `Q(x, p) = ⟨α|ρ|α⟩/π` at `α = x + ip`.
pub fn husimi_q(rho: &DensityMatrix, x: f64, p: f64) -> f64 {
    let v = coherent_amplitudes(Complex64::new(x, p), rho.dim());
    overlap_vec(&rho.rho, &v) / PI
}

pub fn husimi_q_pure(psi: &PureState, x: f64, p: f64) -> f64 {
    let v = coherent_amplitudes(Complex64::new(x, p), psi.dim());
    v.dotc(psi.amplitudes()).norm_sqr() / PI
}

fn axis_grid(p_max: f64, samples: usize) -> impl Iterator<Item = f64> {
    let step = 2.0 * p_max / (samples - 1) as f64;
    (0..samples).map(move |j| -p_max + step * j as f64)
}

/// Maximum of `Q(0, p)` over a uniform grid `p ∈ [−p_max, p_max]`.
pub fn max_q_on_p_axis(rho: &DensityMatrix, p_max: f64, samples: usize) -> f64 {
    AxisProbe::new(rho.dim(), p_max, samples).max_q(rho)
}

/// Repeated evaluation of `max_p Q(0, p)` on one grid.
///
/// Along the axis `π e^{p²} Q(0, p) = Σ_k c_k p^k` with real coefficients
/// `c_k = Σ_{m+n=k} Re(ρ_mn i^{n−m}) / √(m! n!)`, so one `O(dim²)` pass
/// followed by Horner evaluation replaces a matrix-vector product per point.
/// Above [`AxisProbe::POLY_MAX_DIM`] the factorials underflow and explicit
/// coherent vectors are used instead.
#[derive(Debug, Clone)]
pub struct AxisProbe {
    grid: Vec<f64>,
    inv_sqrt_fact: Vec<f64>,
    vectors: Option<Vec<CVector>>,
}

impl AxisProbe {
    pub const POLY_MAX_DIM: usize = 200;

    pub fn new(dim: usize, p_max: f64, samples: usize) -> Self {
        let grid: Vec<f64> = axis_grid(p_max, samples.max(64)).collect();
        let mut inv_sqrt_fact = vec![1.0; dim];
        for k in 1..dim {
            inv_sqrt_fact[k] = inv_sqrt_fact[k - 1] / (k as f64).sqrt();
        }
        let vectors = (dim > Self::POLY_MAX_DIM).then(|| {
            grid.iter()
                .map(|&p| coherent_amplitudes(Complex64::new(0.0, p), dim))
                .collect()
        });
        Self {
            grid,
            inv_sqrt_fact,
            vectors,
        }
    }

    pub fn max_q(&self, rho: &DensityMatrix) -> f64 {
        if let Some(vectors) = &self.vectors {
            return vectors
                .iter()
                .map(|v| overlap_vec(&rho.rho, v) / PI)
                .fold(0.0, f64::max);
        }
        let d = rho.dim();
        let s = &self.inv_sqrt_fact;
        let mut coeff = vec![0.0; 2 * d - 1];
        for n in 0..d {
            for m in 0..d {
                let z = rho.rho[(m, n)];
                let re = match (n + 4 - m % 4) % 4 {
                    0 => z.re,
                    1 => -z.im,
                    2 => -z.re,
                    _ => z.im,
                };
                coeff[m + n] += re * s[m] * s[n];
            }
        }
        self.grid
            .iter()
            .map(|&p| {
                let poly = coeff.iter().rev().fold(0.0, |acc, &c| acc * p + c);
                poly * (-p * p).exp() / PI
            })
            .fold(0.0, f64::max)
    }

    /// Same maximum for a pure state, via `⟨ip|ψ⟩ = e^{−p²/2} Σ_n c_n (−ip)^n/√n!`.
    pub fn max_q_pure(&self, psi: &PureState) -> f64 {
        if let Some(vectors) = &self.vectors {
            return vectors
                .iter()
                .map(|v| v.dotc(psi.amplitudes()).norm_sqr() / PI)
                .fold(0.0, f64::max);
        }
        let minus_i = [
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, -1.0),
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, 1.0),
        ];
        let coeff: Vec<Complex64> = psi
            .amplitudes()
            .iter()
            .enumerate()
            .map(|(n, c)| c * minus_i[n % 4] * self.inv_sqrt_fact[n])
            .collect();
        self.grid
            .iter()
            .map(|&p| {
                let amp = coeff.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * p + c);
                amp.norm_sqr() * (-p * p).exp() / PI
            })
            .fold(0.0, f64::max)
    }
}

pub fn max_q_on_p_axis_pure(psi: &PureState, p_max: f64, samples: usize) -> f64 {
    AxisProbe::new(psi.dim(), p_max, samples).max_q_pure(psi)
}

/// One sample of a Husimi grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HusimiSample {
    pub x: f64,
    pub p: f64,
    pub q: f64,
}

/// Row-major Husimi grid: the outer loop runs over `p`, the inner over `x`.
pub fn husimi_grid(rho: &DensityMatrix, half_width: f64, points: usize) -> Vec<HusimiSample> {
    let points = points.max(2);
    let step = 2.0 * half_width / (points - 1) as f64;
    let mut out = Vec::with_capacity(points * points);
    for i in 0..points {
        let p = -half_width + step * i as f64;
        for j in 0..points {
            let x = -half_width + step * j as f64;
            out.push(HusimiSample {
                x,
                p,
                q: husimi_q(rho, x, p),
            });
        }
    }
    out
}

pub fn write_husimi_csv<W: Write>(samples: &[HusimiSample], mut out: W) -> std::io::Result<()> {
    writeln!(out, "x,p,Q")?;
    for s in samples {
        writeln!(out, "{},{},{:e}", s.x, s.p, s.q)?;
    }
    Ok(())
}

pub fn save_husimi_csv(samples: &[HusimiSample], path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_husimi_csv(samples, file)?;
    Ok(())
}
