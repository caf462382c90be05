//! Itô integration of the measurement-conditioned master equation
//!
//! ```text
//! dρ = M D[n]ρ dt + κ D[a]ρ dt − i[H_fb, ρ] dt + √(Mη) H[n]ρ dW
//! ```
//!
//! with homodyne record `dy = 2√(Mη)⟨n⟩dt + dW`. The innovation `dW` is the
//! only place the sign and scale of the photocurrent are fixed.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{CMatrix, DensityMatrix};

/// Rates and step of one integration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmeParams {
    /// Peak measurement strength (1/s).
    pub m: f64,
    pub eta: f64,
    /// Unmonitored cavity loss rate (1/s).
    pub kappa: f64,
    /// Step size (s).
    pub dt: f64,
}

impl SmeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m >= 0.0) {
            return Err(Error::Config(format!(
                "measurement strength must be >= 0, got {}",
                self.m
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::Config(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.m * self.dt > 1e-2 {
            return Err(Error::Config(format!(
                "M*dt = {:e} exceeds the stiffness guard 1e-2",
                self.m * self.dt
            )));
        }
        Ok(())
    }
}

/// Step scheme for the measurement part of the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Exact exponential (Kraus-form) conditioning on the diagonal number
    /// operator, Euler for the loss term, then a unitary step for the
    /// feedback Hamiltonian.
    /// First-order equivalent to Euler–Maruyama.
    #[default]
    Exponential,
    /// Literal Euler–Maruyama on the full right-hand side.
    EulerMaruyama,
}

/// Reproducible Wiener increments for one trajectory.
///
/// Generator: ChaCha8 seeded with `seed` on stream `stream`, standard normals
/// from `rand_distr::StandardNormal`. Each step consumes `substeps` normals and
/// returns `√(dt/substeps) Σ z`, so a run at `dt` with `substeps = 2` follows
/// the same Brownian path as a run at `dt/2` with `substeps = 1`.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    seed: u64,
    stream: u64,
    counter: u64,
    substeps: u32,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            rng,
            seed,
            stream,
            counter: 0,
            substeps: 1,
        }
    }

    pub fn with_substeps(mut self, substeps: u32) -> Self {
        self.substeps = substeps.max(1);
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of increments drawn so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_dw(&mut self, dt: f64) -> f64 {
        let mut sum = 0.0;
        for _ in 0..self.substeps {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            sum += z;
        }
        self.counter += 1;
        sum * (dt / self.substeps as f64).sqrt()
    }
}

/// Stable per-trajectory seed: SplitMix64 finalizer of
/// `base + 0x9E3779B97F4A7C15 · (index + 1)`.
pub fn trajectory_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A Hermitian operator stored together with its diagonals, so that
/// commutators with ρ cost `O(dim² · bandwidth)`.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    matrix: CMatrix,
    bandwidth: usize,
    /// `bands[b + o][i] = H[i, i + o]`, zero outside the matrix.
    bands: Vec<Vec<Complex64>>,
    /// All entries real.
    real: bool,
}

impl Hamiltonian {
    pub fn new(matrix: CMatrix) -> Self {
        let d = matrix.nrows();
        let mut bandwidth = 0;
        for i in 0..d {
            for j in 0..matrix.ncols() {
                if matrix[(i, j)] != Complex64::new(0.0, 0.0) {
                    bandwidth = bandwidth.max(i.abs_diff(j));
                }
            }
        }
        let b = bandwidth as isize;
        let bands = (-b..=b)
            .map(|o| {
                (0..d as isize)
                    .map(|i| {
                        let k = i + o;
                        if (0..d as isize).contains(&k) {
                            matrix[(i as usize, k as usize)]
                        } else {
                            Complex64::new(0.0, 0.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let real = matrix.iter().all(|z| z.im == 0.0);
        Self {
            matrix,
            bandwidth,
            bands,
            real,
        }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    /// Adds `−i·scale·[H, ρ]·dt` to `out`, column by column.
    fn add_commutator(&self, scale: f64, rho: &CMatrix, dt: f64, out: &mut CMatrix) {
        let d = rho.nrows();
        let b = self.bandwidth as isize;
        let factor = Complex64::new(0.0, -scale * dt);
        let r = rho.as_slice();
        let o = out.as_mut_slice();
        let mut acc = vec![Complex64::new(0.0, 0.0); d];
        for j in 0..d {
            acc.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for (band, off) in self.bands.iter().zip(-b..=b) {
                // (Hρ)[i, j] += H[i, i+off] ρ[i+off, j]
                let lo = (-off).max(0) as usize;
                let hi = (d as isize - off).min(d as isize).max(0) as usize;
                if lo < hi {
                    let start = j * d + (lo as isize + off) as usize;
                    let src = &r[start..start + (hi - lo)];
                    let rows = acc[lo..hi].iter_mut().zip(&band[lo..hi]).zip(src);
                    if self.real {
                        rows.for_each(|((a, h), s)| *a += s * h.re);
                    } else {
                        rows.for_each(|((a, h), s)| *a += s * h);
                    }
                }
                // (ρH)[:, j] −= H[k, j] ρ[:, k] with k = j − off
                let k = j as isize - off;
                if (0..d as isize).contains(&k) {
                    let k = k as usize;
                    let coef = band[k];
                    let src = &r[k * d..(k + 1) * d];
                    if self.real {
                        acc.iter_mut().zip(src).for_each(|(a, s)| *a -= s * coef.re);
                    } else {
                        acc.iter_mut().zip(src).for_each(|(a, s)| *a -= s * coef);
                    }
                }
            }
            for (c, a) in o[j * d..(j + 1) * d].iter_mut().zip(&acc) {
                *c += factor * a;
            }
        }
    }
}

/// Zeroes values small enough to drift into subnormal arithmetic.
#[inline]
fn flush(z: Complex64) -> Complex64 {
    if z.re.abs() < 1e-150 && z.im.abs() < 1e-150 {
        Complex64::new(0.0, 0.0)
    } else {
        z
    }
}

/// Cayley factors of `U = (1 + iθH/2)⁻¹(1 − iθH/2)` for a tridiagonal `H`
/// restricted to its leading `len` levels: the bands of `1 − iθH/2` and the
/// LU sweep of `1 + iθH/2` (Hermitian part is the identity: no pivoting).
#[derive(Debug, Clone, Default)]
struct Cayley {
    len: usize,
    /// Real `H` with zero diagonal: every factor below is real or purely
    /// imaginary and only the real coefficient is used.
    imaginary: bool,
    lower: Vec<Complex64>,
    diag: Vec<Complex64>,
    upper: Vec<Complex64>,
    a_lower: Vec<Complex64>,
    sweep_upper: Vec<Complex64>,
    pivot_inv: Vec<Complex64>,
    column: Vec<Complex64>,
}

/// `(i·a)·z`.
#[inline]
fn times_i(a: f64, z: Complex64) -> Complex64 {
    Complex64::new(-a * z.im, a * z.re)
}

impl Cayley {
    fn prepare(&mut self, h: &Hamiltonian, theta: f64, len: usize) {
        let zero = Complex64::new(0.0, 0.0);
        let band = |o: isize, i: usize| -> Complex64 {
            if h.bandwidth == 0 && o != 0 {
                zero
            } else {
                h.bands[(h.bandwidth as isize + o) as usize][i]
            }
        };
        let half = Complex64::new(0.0, theta / 2.0);
        self.len = len;
        self.imaginary = h.real && (0..len).all(|i| band(0, i) == zero);
        self.lower = (0..len).map(|i| -half * band(-1, i)).collect();
        self.diag = (0..len).map(|i| 1.0 - half * band(0, i)).collect();
        self.upper = (0..len).map(|i| -half * band(1, i)).collect();
        self.a_lower = (0..len).map(|i| half * band(-1, i)).collect();
        self.sweep_upper = vec![zero; len];
        self.pivot_inv = vec![zero; len];
        self.column = vec![zero; len];
        let mut prev_upper = zero;
        for i in 0..len {
            let upper = if i + 1 < len { half * band(1, i) } else { zero };
            let pivot = 1.0 + half * band(0, i) - self.a_lower[i] * prev_upper;
            self.pivot_inv[i] = pivot.inv();
            self.sweep_upper[i] = upper * self.pivot_inv[i];
            prev_upper = self.sweep_upper[i];
        }
    }

    /// Replaces the leading `len` entries `v` of every column by `U v`.
    fn apply(&mut self, col: &mut [Complex64]) {
        let d = self.len;
        let col = &mut col[..d];
        if d == 1 {
            col[0] = flush(col[0] * self.diag[0] * self.pivot_inv[0]);
            return;
        }
        let y = &mut self.column[..d];
        if self.imaginary {
            y[0] = col[0] + times_i(self.upper[0].im, col[1]);
            y[d - 1] = col[d - 1] + times_i(self.lower[d - 1].im, col[d - 2]);
            for (((yi, w), l), u) in y[1..d - 1]
                .iter_mut()
                .zip(col.windows(3))
                .zip(&self.lower[1..d - 1])
                .zip(&self.upper[1..d - 1])
            {
                *yi = w[1] + times_i(l.im, w[0]) + times_i(u.im, w[2]);
            }
            let mut prev = Complex64::new(0.0, 0.0);
            for (((c, yi), al), pinv) in col
                .iter_mut()
                .zip(y.iter())
                .zip(&self.a_lower[..d])
                .zip(&self.pivot_inv[..d])
            {
                prev = flush((yi - times_i(al.im, prev)) * pinv.re);
                *c = prev;
            }
            let mut next = col[d - 1];
            for (c, su) in col[..d - 1].iter_mut().zip(&self.sweep_upper[..d - 1]).rev() {
                next = flush(*c - times_i(su.im, next));
                *c = next;
            }
            return;
        }
        y[0] = self.diag[0] * col[0] + self.upper[0] * col[1];
        y[d - 1] = self.lower[d - 1] * col[d - 2] + self.diag[d - 1] * col[d - 1];
        for (((yi, w), (l, dg)), u) in y[1..d - 1]
            .iter_mut()
            .zip(col.windows(3))
            .zip(self.lower[1..d - 1].iter().zip(&self.diag[1..d - 1]))
            .zip(&self.upper[1..d - 1])
        {
            *yi = l * w[0] + dg * w[1] + u * w[2];
        }
        let mut prev = Complex64::new(0.0, 0.0);
        for (((c, yi), al), pinv) in col
            .iter_mut()
            .zip(y.iter())
            .zip(&self.a_lower[..d])
            .zip(&self.pivot_inv[..d])
        {
            prev = flush((yi - al * prev) * pinv);
            *c = prev;
        }
        let mut next = col[d - 1];
        for (c, su) in col[..d - 1].iter_mut().zip(&self.sweep_upper[..d - 1]).rev() {
            next = flush(*c - su * next);
            *c = next;
        }
    }
}

/// What the controller applies during one step: `M(t)`, and the feedback
/// Hamiltonian `scale · base`.
#[derive(Debug, Clone, Copy)]
pub struct Control<'a> {
    pub m: f64,
    pub hamiltonian: Option<&'a Hamiltonian>,
    pub scale: f64,
    /// Feedback policy value recorded alongside the step.
    pub e_f: f64,
}

impl<'a> Control<'a> {
    pub fn probe(m: f64) -> Self {
        Self {
            m,
            hamiltonian: None,
            scale: 0.0,
            e_f: 0.0,
        }
    }
}

/// One line of the homodyne record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Time at the start of the step.
    pub t: f64,
    pub dw: f64,
    /// Photocurrent increment `2√(M_t η)⟨n⟩dt + dW`.
    pub dy: f64,
    /// Expectations of the pre-step state.
    pub exp_n: f64,
    pub exp_x: f64,
    pub exp_p: f64,
    pub m_t: f64,
    pub e_f: f64,
}

/// `XρX† − ½(X†Xρ + ρX†X)`.
pub fn superop_d(x: &CMatrix, rho: &CMatrix) -> Result<CMatrix> {
    check_shapes(x, rho)?;
    let xd = x.adjoint();
    let xdx = &xd * x;
    Ok(x * rho * &xd - (&xdx * rho + rho * &xdx).map(|z| z * 0.5))
}

/// `Xρ + ρX† − Tr[(X + X†)ρ] ρ`.
pub fn superop_h(x: &CMatrix, rho: &CMatrix) -> Result<CMatrix> {
    check_shapes(x, rho)?;
    let xd = x.adjoint();
    let mean = ((x + &xd) * rho).trace();
    Ok(x * rho + rho * &xd - rho * mean)
}

fn check_shapes(x: &CMatrix, rho: &CMatrix) -> Result<()> {
    let d = rho.nrows();
    if rho.ncols() != d {
        return Err(Error::Shape {
            expected: d,
            rows: rho.nrows(),
            cols: rho.ncols(),
        });
    }
    if x.nrows() != d || x.ncols() != d {
        return Err(Error::Shape {
            expected: d,
            rows: x.nrows(),
            cols: x.ncols(),
        });
    }
    Ok(())
}

const MAX_FLOW_TERMS: usize = 40;

/// Populations below this are outside the support the feedback flow acts on.
const FLOW_SUPPORT_FLOOR: f64 = 1e-32;
const FLOW_SUPPORT_MARGIN: usize = 12;

/// Leading block that carries the state: last level with population above
/// the floor, plus a margin for the spread of one step.
fn flow_support(rho: &CMatrix) -> usize {
    let d = rho.nrows();
    let last = (0..d).rev().find(|&k| rho[(k, k)].re > FLOW_SUPPORT_FLOOR).unwrap_or(0);
    (last + 1 + FLOW_SUPPORT_MARGIN).min(d)
}

/// Integrator for one trajectory. Owns scratch buffers; single-threaded.
#[derive(Debug, Clone)]
pub struct Integrator {
    params: SmeParams,
    scheme: Scheme,
    scratch: CMatrix,
    term: CMatrix,
    cayley: Cayley,
    weights: Vec<f64>,
    dephasing: Vec<f64>,
    sqrt_n: Vec<f64>,
    last_trace_drift: f64,
}

impl Integrator {
    pub fn new(dim: usize, params: SmeParams, scheme: Scheme) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            scheme,
            scratch: DMatrix::zeros(dim, dim),
            term: DMatrix::zeros(dim, dim),
            cayley: Cayley::default(),
            weights: vec![0.0; dim],
            dephasing: vec![0.0; dim],
            sqrt_n: (0..dim).map(|k| (k as f64).sqrt()).collect(),
            last_trace_drift: 0.0,
        })
    }

    pub fn params(&self) -> &SmeParams {
        &self.params
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// `|Tr ρ − 1|` just before the last renormalization.
    pub fn last_trace_drift(&self) -> f64 {
        self.last_trace_drift
    }

    /// Advances ρ by one step of size `params.dt` using `control.m` as `M(t)`.
    pub fn step(
        &mut self,
        rho: &mut DensityMatrix,
        control: &Control<'_>,
        noise: &mut NoiseStream,
        t: f64,
        step_index: usize,
    ) -> Result<StepRecord> {
        let d = rho.dim();
        if self.scratch.nrows() != d {
            self.scratch = DMatrix::zeros(d, d);
            self.term = DMatrix::zeros(d, d);
            self.weights = vec![0.0; d];
            self.dephasing = vec![0.0; d];
            self.sqrt_n = (0..d).map(|k| (k as f64).sqrt()).collect();
        }
        let dt = self.params.dt;
        let eta = self.params.eta;
        let m = control.m;
        let gain = (m * eta).sqrt();
        let a = rho.mean_a();
        let exp_n = rho.mean_n();
        let dw = noise.next_dw(dt);
        let dy = 2.0 * gain * exp_n * dt + dw;

        match self.scheme {
            Scheme::Exponential => {
                self.measurement_kraus(rho, m, eta, dy, dt)
                    .map_err(|tr| Error::Integration {
                        step: step_index,
                        t,
                        reason: format!("measurement update produced trace {tr}"),
                    })?;
                if self.params.kappa > 0.0 {
                    self.scratch.fill(Complex64::new(0.0, 0.0));
                    self.add_damping(rho.matrix(), dt);
                    *rho.matrix_mut() += &self.scratch;
                }
                if let Some(h) = control.hamiltonian.filter(|_| control.scale != 0.0) {
                    self.unitary_flow(rho.matrix_mut(), h, control.scale, dt);
                }
            }
            Scheme::EulerMaruyama => {
                let r = rho.matrix();
                self.scratch.fill(Complex64::new(0.0, 0.0));
                for j in 0..d {
                    for i in 0..d {
                        let (ni, nj) = (i as f64, j as f64);
                        let diff = ni - nj;
                        let meas = -m * diff * diff / 2.0 * dt + gain * (ni + nj - 2.0 * exp_n) * dw;
                        self.scratch[(i, j)] = r[(i, j)] * meas;
                    }
                }
                self.add_deterministic(rho.matrix(), control, dt);
                *rho.matrix_mut() += &self.scratch;
            }
        }

        let (tr, finite) = rho.hermitize_normalize_checked();
        self.last_trace_drift = (tr - 1.0).abs();
        if !(tr.is_finite() && tr > 0.0) || !finite {
            return Err(Error::Integration {
                step: step_index,
                t,
                reason: "state diverged (non-finite or non-positive trace)".into(),
            });
        }
        Ok(StepRecord {
            t,
            dw,
            dy,
            exp_n,
            exp_x: a.re,
            exp_p: a.im,
            m_t: m,
            e_f: control.e_f,
        })
    }

    /// `ρ_nm ← ρ_nm · u_n u_m · e^{−M(1−η)(n−m)²dt/2}` with
    /// `u_n = exp(√(Mη) n dy − Mη n² dt)`, rescaled to unit trace. Returns
    /// the offending trace if it is not positive and finite.
    fn measurement_kraus(
        &mut self,
        rho: &mut DensityMatrix,
        m: f64,
        eta: f64,
        dy: f64,
        dt: f64,
    ) -> std::result::Result<(), f64> {
        if m == 0.0 {
            return Ok(());
        }
        let d = rho.dim();
        let gain = (m * eta).sqrt();
        let mut shift = f64::NEG_INFINITY;
        for k in 0..d {
            let kf = k as f64;
            let e = gain * kf * dy - m * eta * kf * kf * dt;
            self.weights[k] = e;
            shift = shift.max(e);
        }
        let r = rho.matrix_mut().as_mut_slice();
        let mut tr = 0.0;
        for k in 0..d {
            self.weights[k] = (self.weights[k] - shift).exp();
            tr += r[k * d + k].re * self.weights[k] * self.weights[k];
            let kf = k as f64;
            self.dephasing[k] = (-m * (1.0 - eta) * kf * kf * dt / 2.0).exp();
        }
        if !(tr.is_finite() && tr > 0.0) {
            return Err(tr);
        }
        let norm = tr.sqrt().recip();
        self.weights.iter_mut().for_each(|w| *w *= norm);
        for j in 0..d {
            let wj = self.weights[j];
            for (i, z) in r[j * d..(j + 1) * d].iter_mut().enumerate() {
                *z *= self.weights[i] * wj * self.dephasing[i.abs_diff(j)];
            }
        }
        Ok(())
    }

    /// `ρ ← UρU†` for the step propagator of `scale·H`: the Cayley form for
    /// tridiagonal `H`, otherwise the Taylor series of nested commutators.
    fn unitary_flow(&mut self, rho: &mut CMatrix, h: &Hamiltonian, scale: f64, dt: f64) {
        if h.bandwidth <= 1 {
            let d = rho.nrows();
            let len = flow_support(rho);
            self.cayley.prepare(h, scale * dt, len);
            let zero = Complex64::new(0.0, 0.0);
            let r = rho.as_mut_slice();
            for col in r.chunks_exact_mut(d).take(len) {
                self.cayley.apply(col);
            }
            // ρ' = U (Uρ)†, using Hermiticity of ρ'.
            let t = self.term.as_mut_slice();
            for j in 0..len {
                for i in 0..len {
                    t[j * d + i] = r[i * d + j].conj();
                }
            }
            for col in t.chunks_exact_mut(d).take(len) {
                self.cayley.apply(col);
            }
            for j in 0..d {
                for i in 0..d {
                    r[j * d + i] = if i < len && j < len { t[j * d + i] } else { zero };
                }
            }
            return;
        }
        self.term.copy_from(rho);
        let floor = 1e-26 * rho.norm_squared();
        for k in 1..=MAX_FLOW_TERMS {
            self.scratch.fill(Complex64::new(0.0, 0.0));
            h.add_commutator(scale / k as f64, &self.term, dt, &mut self.scratch);
            std::mem::swap(&mut self.term, &mut self.scratch);
            *rho += &self.term;
            if self.term.norm_squared() <= floor {
                break;
            }
        }
    }

    /// Adds `κD[a]ρ dt` to the scratch buffer.
    fn add_damping(&mut self, rho: &CMatrix, dt: f64) {
        let d = rho.nrows();
        let kd = self.params.kappa * dt;
        let sq = &self.sqrt_n;
        let r = rho.as_slice();
        let o = self.scratch.as_mut_slice();
        for j in 0..d {
            for i in 0..d {
                let mut v = r[j * d + i] * (-0.5 * (i + j) as f64);
                if i + 1 < d && j + 1 < d {
                    v += r[(j + 1) * d + i + 1] * (sq[i + 1] * sq[j + 1]);
                }
                o[j * d + i] += v * kd;
            }
        }
    }

    /// Adds `(κD[a]ρ − i[H, ρ]) dt` to the scratch buffer.
    fn add_deterministic(&mut self, rho: &CMatrix, control: &Control<'_>, dt: f64) {
        if self.params.kappa > 0.0 {
            self.add_damping(rho, dt);
        }
        if let Some(h) = control.hamiltonian {
            if control.scale != 0.0 {
                h.add_commutator(control.scale, rho, dt, &mut self.scratch);
            }
        }
    }
}

/// One step with a fresh integrator; convenience wrapper over [`Integrator::step`].
pub fn sme_step(
    rho: &DensityMatrix,
    params: &SmeParams,
    control: &Control<'_>,
    noise: &mut NoiseStream,
    scheme: Scheme,
) -> Result<(DensityMatrix, StepRecord)> {
    let mut integ = Integrator::new(rho.dim(), *params, scheme)?;
    let mut out = rho.clone();
    let rec = integ.step(&mut out, control, noise, 0.0, 0)?;
    Ok((out, rec))
}

/// Supplies `M(t)` and the feedback Hamiltonian at each step.
pub trait Controller {
    fn control(&mut self, t: f64, rho: &DensityMatrix) -> Control<'_>;
}

/// Constant measurement strength, no feedback.
#[derive(Debug, Clone, Copy)]
pub struct ConstantProbe(pub f64);

impl Controller for ConstantProbe {
    fn control(&mut self, _t: f64, _rho: &DensityMatrix) -> Control<'_> {
        Control::probe(self.0)
    }
}

/// Integrates from `rho0` until `t_end`, recording every step.
pub fn integrate<C: Controller>(
    rho0: &DensityMatrix,
    controller: &mut C,
    params: &SmeParams,
    noise: &mut NoiseStream,
    t_end: f64,
    scheme: Scheme,
) -> Result<(DensityMatrix, Vec<StepRecord>)> {
    if !(t_end > 0.0) {
        return Err(Error::Config(format!("t_end must be > 0, got {t_end}")));
    }
    let mut integ = Integrator::new(rho0.dim(), *params, scheme)?;
    let steps = (t_end / params.dt).round().max(1.0) as usize;
    let mut rho = rho0.clone();
    let mut records = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 * params.dt;
        let control = controller.control(t, &rho);
        let rec = integ.step(&mut rho, &control, noise, t, k)?;
        records.push(rec);
    }
    Ok((rho, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{build_operator_set, fock_state, FockSpace, PureState};
    use nalgebra::DVector;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn params(m: f64) -> SmeParams {
        SmeParams {
            m,
            eta: 1.0,
            kappa: 0.0,
            dt: 1e-3 / m.max(1.0),
        }
    }

    #[test]
    fn d_superoperator_examples() {
        let s = FockSpace::new(4).unwrap();
        let ops = build_operator_set(s);
        let k2 = fock_state(2, s).unwrap().to_density();
        assert!(superop_d(&ops.n, k2.matrix()).unwrap().norm() < 1e-14);

        let one = fock_state(1, s).unwrap().to_density();
        let out = superop_d(&ops.a, one.matrix()).unwrap();
        assert!((out[(0, 0)] - c(1.0, 0.0)).norm() < 1e-14);
        assert!((out[(1, 1)] - c(-1.0, 0.0)).norm() < 1e-14);
        assert!(out.trace().norm() < 1e-14);

        let mut v = DVector::zeros(4);
        v[0] = c(1.0, 0.0);
        v[2] = c(1.0, 0.0);
        let sup = PureState::new(v).unwrap().to_density();
        let out = superop_d(&ops.n, sup.matrix()).unwrap();
        assert!((out[(0, 2)] - sup.matrix()[(0, 2)] * -2.0).norm() < 1e-14);
        assert!((out[(2, 0)] - sup.matrix()[(2, 0)] * -2.0).norm() < 1e-14);
        assert!(out[(0, 0)].norm() < 1e-14);
    }

    #[test]
    fn h_superoperator_examples() {
        let s = FockSpace::new(2).unwrap();
        let ops = build_operator_set(s);
        let k1 = fock_state(1, s).unwrap().to_density();
        assert!(superop_h(&ops.n, k1.matrix()).unwrap().norm() < 1e-14);
        let mixed = DensityMatrix::maximally_mixed(s);
        let out = superop_h(&ops.n, mixed.matrix()).unwrap();
        assert!((out[(0, 0)] - c(-0.5, 0.0)).norm() < 1e-14);
        assert!((out[(1, 1)] - c(0.5, 0.0)).norm() < 1e-14);
        assert!(out.trace().norm() < 1e-14);
        let wrong = build_operator_set(FockSpace::new(3).unwrap());
        assert!(superop_h(&wrong.n, mixed.matrix()).is_err());
    }

    #[test]
    fn fock_state_is_fixed_point_for_both_schemes() {
        let s = FockSpace::new(12).unwrap();
        let rho = fock_state(5, s).unwrap().to_density();
        for scheme in [Scheme::Exponential, Scheme::EulerMaruyama] {
            let mut noise = NoiseStream::new(3, 0);
            let mut integ = Integrator::new(12, params(1.0), scheme).unwrap();
            let mut r = rho.clone();
            for k in 0..200 {
                integ.step(&mut r, &Control::probe(1.0), &mut noise, 0.0, k).unwrap();
            }
            assert!((r.matrix() - rho.matrix()).norm() < 1e-14, "{scheme:?}");
        }
    }

    #[test]
    fn photocurrent_convention() {
        let s = FockSpace::new(10).unwrap();
        let rho = crate::fock::coherent_state(c(1.0, 0.5), s).unwrap().to_density();
        let p = params(1.0);
        let mut noise = NoiseStream::new(11, 4);
        let (_, rec) = sme_step(&rho, &p, &Control::probe(0.7), &mut noise, Scheme::Exponential).unwrap();
        let expect = 2.0 * (0.7f64 * p.eta).sqrt() * rec.exp_n * p.dt + rec.dw;
        assert!((rec.dy - expect).abs() < 1e-15);
        assert!((rec.exp_n - rho.mean_n()).abs() < 1e-12);
    }

    #[test]
    fn noise_is_reproducible_and_refinable() {
        let mut a = NoiseStream::new(42, 7);
        let mut b = NoiseStream::new(42, 7);
        for _ in 0..10 {
            assert_eq!(a.next_dw(1e-3), b.next_dw(1e-3));
        }
        let mut coarse = NoiseStream::new(5, 1).with_substeps(2);
        let mut fine = NoiseStream::new(5, 1);
        for _ in 0..10 {
            let sum = fine.next_dw(0.5e-3) + fine.next_dw(0.5e-3);
            assert!((coarse.next_dw(1e-3) - sum).abs() < 1e-15);
        }
        let mut other = NoiseStream::new(42, 8);
        assert_ne!(NoiseStream::new(42, 7).next_dw(1.0), other.next_dw(1.0));
    }

    #[test]
    fn trajectory_seeds_are_distinct() {
        let seeds: std::collections::HashSet<_> = (0..1000).map(|i| trajectory_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_eq!(trajectory_seed(7, 3), trajectory_seed(7, 3));
    }

    #[test]
    fn stiffness_guard() {
        let mut p = params(1.0);
        p.dt = 0.1;
        assert!(p.validate().is_err());
        p.dt = 1e-3;
        p.eta = 1.5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn integrate_without_drive_is_identity() {
        let s = FockSpace::new(10).unwrap();
        let rho0 = crate::fock::coherent_state(c(1.0, -0.3), s).unwrap().to_density();
        let mut noise = NoiseStream::new(1, 1);
        let (out, recs) = integrate(
            &rho0,
            &mut ConstantProbe(0.0),
            &params(1.0),
            &mut noise,
            0.5,
            Scheme::Exponential,
        )
        .unwrap();
        assert_eq!(recs.len(), 500);
        assert!((out.matrix() - rho0.matrix()).norm() < 1e-12);
        assert!(integrate(
            &rho0,
            &mut ConstantProbe(0.0),
            &params(1.0),
            &mut noise,
            0.0,
            Scheme::Exponential
        )
        .is_err());
    }

    #[test]
    fn feedback_flow_matches_displacement_and_stays_positive() {
        // e^{−iθx} = D(−iθ/2); the Cayley step agrees to O(θ³) per step.
        let s = FockSpace::new(48).unwrap();
        let h = Hamiltonian::new(build_operator_set(s).x);
        let amps =
            crate::fock::coherent_amplitudes(c(1.0, 1.0), 48) + crate::fock::coherent_amplitudes(c(-1.0, -1.0), 48);
        let psi = PureState::new(amps).unwrap();
        let rho0 = psi.to_density();
        for (theta, steps, tol) in [(1e-3, 200, 1e-6), (0.3, 10, 0.2)] {
            let p = SmeParams {
                m: 1.0,
                eta: 1.0,
                kappa: 0.0,
                dt: 1e-3,
            };
            let mut integ = Integrator::new(48, p, Scheme::Exponential).unwrap();
            let mut noise = NoiseStream::new(0, 0);
            let mut r = rho0.clone();
            for k in 0..steps {
                let ctl = Control {
                    m: 0.0,
                    hamiltonian: Some(&h),
                    scale: theta / p.dt,
                    e_f: 0.0,
                };
                integ.step(&mut r, &ctl, &mut noise, 0.0, k).unwrap();
                assert!(r.min_eigenvalue() > -1e-12);
            }
            let gamma = c(0.0, -theta * steps as f64 / 2.0);
            let exact = crate::fock::apply_displacement(&rho0, gamma).state;
            let err = (r.matrix() - exact.matrix()).norm();
            assert!(err < tol, "theta {theta}: {err}");
        }
    }

    #[test]
    fn feedback_ehrenfest_relation() {
        // M = 0: d⟨p⟩/dt = −scale/2 and d⟨x⟩/dt = 0 for H = scale·x.
        let s = FockSpace::new(30).unwrap();
        let ops = build_operator_set(s);
        let h = Hamiltonian::new(ops.x.clone());
        assert_eq!(h.bandwidth(), 1);
        let rho0 = crate::fock::coherent_state(c(0.7, 0.2), s).unwrap().to_density();
        let p = SmeParams {
            m: 1.0,
            eta: 1.0,
            kappa: 0.0,
            dt: 1e-4,
        };
        let scale = 3.0;
        let mut integ = Integrator::new(30, p, Scheme::Exponential).unwrap();
        let mut noise = NoiseStream::new(0, 0);
        let mut r = rho0.clone();
        let steps = 100;
        for k in 0..steps {
            let ctl = Control {
                m: 0.0,
                hamiltonian: Some(&h),
                scale,
                e_f: 0.0,
            };
            integ.step(&mut r, &ctl, &mut noise, 0.0, k).unwrap();
        }
        let tau = steps as f64 * p.dt;
        let dp = (r.mean_p() - rho0.mean_p()) / tau;
        let dx = (r.mean_x() - rho0.mean_x()) / tau;
        assert!((dp + scale / 2.0).abs() < 1e-6, "{dp}");
        assert!(dx.abs() < 1e-6, "{dx}");
    }

    #[test]
    fn cavity_decay_matches_exponential_energy_loss() {
        let s = FockSpace::new(20).unwrap();
        let rho0 = fock_state(3, s).unwrap().to_density();
        let p = SmeParams {
            m: 1.0,
            eta: 1.0,
            kappa: 0.5,
            dt: 1e-4,
        };
        let mut noise = NoiseStream::new(0, 0);
        let (out, _) = integrate(&rho0, &mut ConstantProbe(0.0), &p, &mut noise, 1.0, Scheme::Exponential).unwrap();
        let expected = 3.0 * (-0.5f64).exp();
        assert!((out.mean_n() - expected).abs() < 1e-3, "{}", out.mean_n());
    }

    #[test]
    fn divergence_is_reported() {
        let s = FockSpace::new(6).unwrap();
        let mut rho = DensityMatrix::vacuum(s);
        rho.matrix_mut()[(0, 0)] = c(f64::NAN, 0.0);
        let mut noise = NoiseStream::new(0, 0);
        let r = sme_step(
            &rho,
            &params(1.0),
            &Control::probe(1.0),
            &mut noise,
            Scheme::EulerMaruyama,
        );
        assert!(matches!(r, Err(Error::Integration { .. })));
    }
}
