//! Feedback / displace / probe / center stage machine.
//!
//! A trajectory starts in vacuum. Number-state feedback with
//! `H = G (n★ − ⟨n⟩) x` pumps the field toward `n★` while the state is
//! monitored; once the mean `p` quadrature signals that a crescent has formed,
//! the field is displaced to `⟨p⟩ = 0.9√n★` and probed without feedback until
//! the Husimi function is dark along the whole p axis. The state is then
//! shifted back to the origin. A collapse to a single Gaussian lobe during
//! probing restarts the feedback within the shared time budget.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fidelity::{best_gaussian_overlap, optimize_fidelity, FidelityResult};
use crate::fock::{apply_displacement, build_operator_set, AxisProbe, CMatrix, DensityMatrix, Displaced, FockSpace};
use crate::sme::{Control, Hamiltonian, Integrator, NoiseStream, Scheme, SmeParams, StepRecord};

/// Schema identifier embedded in every serialized trajectory record.
pub const TRAJECTORY_SCHEMA: &str = "qnd-cat/trajectory/v1";

/// Reference measurement strength at which the ramp times are quoted (1/s).
pub const REFERENCE_M: f64 = 2.12e6;

/// When the number-state feedback hands over to the displacement stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackExit {
    /// First step with `⟨p⟩ < (n★−1)^{1/4} − √n★`.
    FirstCrossing,
    /// Arm once `⟨p⟩` is below the threshold with `⟨n⟩ ≥ n★ − 1`, then exit
    /// when `⟨p⟩` climbs back to the threshold.
    #[default]
    Armed,
}

/// What the field is reset to after a collapse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestartPolicy {
    /// Keep the collapsed field and steer it with feedback again.
    #[default]
    ReuseField,
    /// Re-prepare vacuum.
    Vacuum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RampShape {
    #[default]
    Linear,
    /// `sin²(πs/2)`, smooth at both ends.
    Cosine,
}

/// Everything one trajectory needs. Rates in 1/s, times in s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub n_star: usize,
    pub m_max: f64,
    pub g: f64,
    pub eta: f64,
    pub kappa: f64,
    pub delta: f64,
    pub dt: f64,
    pub dim: usize,
    pub t_budget: f64,
    pub t_on: f64,
    pub t_off: f64,
    pub p_probe_factor: f64,
    pub seed: u64,
    pub scheme: Scheme,
    /// Normals summed per Wiener increment; `dt` with 2 substeps follows the
    /// same path as `dt/2` with 1.
    pub noise_substeps: u32,
    pub feedback_exit: FeedbackExit,
    pub restart: RestartPolicy,
    pub ramp_shape: RampShape,
    pub mandel_low: f64,
    pub mandel_high: f64,
    pub collapse_overlap: f64,
    /// Interval between collapse checks (s).
    pub collapse_period: f64,
    /// Interval between axis-Q checks while probing (s).
    pub q_check_period: f64,
    pub q_samples: usize,
    /// Keep every `trace_stride`-th step in the serialized trace.
    pub trace_stride: usize,
    /// Run the superposition fidelity optimizer on success.
    pub optimize_fidelity: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self::for_n_star(10)
    }
}

impl ProtocolConfig {
    /// Defaults for target photon number `n_star` at `M = 2.12 MHz`.
    pub fn for_n_star(n_star: usize) -> Self {
        Self::with_rate(n_star, REFERENCE_M)
    }

    /// Defaults for the given peak measurement strength; times scale as `1/M`.
    pub fn with_rate(n_star: usize, m_max: f64) -> Self {
        let scale = REFERENCE_M / m_max;
        let dt = 1e-3 / m_max;
        Self {
            n_star,
            m_max,
            g: default_gain(m_max),
            eta: 1.0,
            kappa: 0.0,
            delta: 0.005,
            dt,
            dim: default_dim(n_star),
            t_budget: 10.0 / m_max,
            t_on: 200e-9 * scale,
            t_off: 2e-9 * scale,
            p_probe_factor: 0.9,
            seed: 0,
            scheme: Scheme::Exponential,
            noise_substeps: 1,
            feedback_exit: FeedbackExit::Armed,
            restart: RestartPolicy::ReuseField,
            ramp_shape: RampShape::Linear,
            mandel_low: 0.5,
            mandel_high: 2.0,
            collapse_overlap: 0.9,
            collapse_period: 50.0 * dt,
            q_check_period: 10.0 * dt,
            q_samples: 129,
            trace_stride: 50,
            optimize_fidelity: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_star < 2 {
            return Err(Error::Config(format!("n_star must be >= 2, got {}", self.n_star)));
        }
        if !(self.m_max > 0.0) {
            return Err(Error::Config(format!("m_max must be > 0, got {}", self.m_max)));
        }
        if !(self.delta > 0.0 && self.delta <= 0.005) {
            return Err(Error::Config(format!(
                "delta must lie in (0, 0.005], got {}",
                self.delta
            )));
        }
        if !(self.t_on > 0.0 && self.t_off > 0.0 && self.t_off < self.t_on) {
            return Err(Error::Config(format!(
                "ramp times must satisfy 0 < t_off < t_on, got t_on = {:e}, t_off = {:e}",
                self.t_on, self.t_off
            )));
        }
        if !(self.t_budget >= 0.0) {
            return Err(Error::Config(format!("t_budget must be >= 0, got {}", self.t_budget)));
        }
        if self.dim < 2 * self.n_star + 2 {
            return Err(Error::Config(format!(
                "dim = {} is too small for n_star = {}",
                self.dim, self.n_star
            )));
        }
        if !(self.mandel_low < self.mandel_high) {
            return Err(Error::Config("mandel_low must be below mandel_high".into()));
        }
        if !(self.q_check_period > 0.0 && self.collapse_period > 0.0) {
            return Err(Error::Config("check periods must be > 0".into()));
        }
        self.sme_params().validate()
    }

    pub fn sme_params(&self) -> SmeParams {
        SmeParams {
            m: self.m_max,
            eta: self.eta,
            kappa: self.kappa,
            dt: self.dt,
        }
    }

    /// `(n★−1)^{1/4} − √n★`.
    pub fn feedback_threshold(&self) -> f64 {
        feedback_threshold(self.n_star)
    }

    /// `p_probe_factor · √n★`.
    pub fn probe_target(&self) -> f64 {
        self.p_probe_factor * (self.n_star as f64).sqrt()
    }

    fn period_steps(&self, period: f64) -> usize {
        (period / self.dt).round().max(1.0) as usize
    }
}

/// Default truncation: `8n★ + 16` levels.
pub fn default_dim(n_star: usize) -> usize {
    8 * n_star + 16
}

/// Default feedback gain `6 M`.
pub fn default_gain(m_max: f64) -> f64 {
    6.0 * m_max
}

pub fn feedback_threshold(n_star: usize) -> f64 {
    (n_star as f64 - 1.0).powf(0.25) - (n_star as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StagePhase {
    FockFeedback,
    DisplaceToProbe,
    ProbeNoFeedback,
    FinalCenter,
    Success,
    QuasiCoherentRestart,
    Timeout,
}

impl StagePhase {
    /// Legal transitions of the stage machine.
    pub fn can_follow(self, from: StagePhase) -> bool {
        use StagePhase::*;
        matches!(
            (from, self),
            (FockFeedback, DisplaceToProbe)
                | (DisplaceToProbe, ProbeNoFeedback)
                | (ProbeNoFeedback, FinalCenter)
                | (FinalCenter, Success)
                | (ProbeNoFeedback, QuasiCoherentRestart)
                | (QuasiCoherentRestart, FockFeedback)
                | (FockFeedback, Timeout)
                | (ProbeNoFeedback, Timeout)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Success,
    Timeout,
    NumericalFailure,
}

/// One entry of the stage timeline, with the state's means at the switch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub t: f64,
    pub from: StagePhase,
    pub to: StagePhase,
    pub exp_n: f64,
    pub exp_x: f64,
    pub exp_p: f64,
}

/// Down-sampled expectation trace point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: f64,
    pub n: f64,
    pub x: f64,
    pub p: f64,
    pub m: f64,
    pub stage: StagePhase,
}

/// Truncation diagnostics of every displacement applied.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    /// Population discarded beyond the truncation, per displacement.
    pub outside: Vec<f64>,
    /// Largest population found in the top 10% of levels after a displacement.
    pub max_top_population: f64,
    pub flagged: bool,
}

impl LeakageReport {
    fn push<T>(&mut self, d: &Displaced<T>) {
        self.outside.push(d.outside);
        self.max_top_population = self.max_top_population.max(d.top_population);
        self.flagged |= d.truncation_flagged();
    }
}

/// Measurement record of the last probing segment, summarized as the
/// single-shot coupling `β` and outcome `p_p`: the accumulated Kraus weight
/// is `exp(−(βn − p_p)²/2)` up to normalization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub duration: f64,
    pub beta: f64,
    pub p_p: f64,
    /// `∫ M η dt`.
    pub weight: f64,
    /// `∫ √(Mη) dy`.
    pub signal: f64,
}

impl ProbeSummary {
    fn accumulate(&mut self, rec: &StepRecord, eta: f64, dt: f64) {
        self.duration += dt;
        self.weight += rec.m_t * eta * dt;
        self.signal += (rec.m_t * eta).sqrt() * rec.dy;
        self.beta = (2.0 * self.weight).sqrt();
        self.p_p = if self.beta > 0.0 { self.signal / self.beta } else { 0.0 };
    }
}

/// Step-wise invariant monitoring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    /// Largest `|Tr ρ − 1|` after any step.
    pub max_trace_error: f64,
    /// Largest `max |ρ − ρ†|` after any step.
    pub max_hermiticity_error: f64,
    /// Largest pre-renormalization trace drift of the integrator.
    pub max_trace_drift: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub schema: String,
    pub run_id: String,
    pub config: ProtocolConfig,
    pub outcome: Outcome,
    pub failure: Option<String>,
    pub elapsed: f64,
    pub restarts: usize,
    pub transitions: Vec<Transition>,
    /// Axis maximum of Q at the success decision, before centering.
    pub axis_q: Option<f64>,
    /// Means after final centering.
    pub final_x: f64,
    pub final_p: f64,
    pub final_n: f64,
    pub probe: Option<ProbeSummary>,
    pub fidelity: Option<FidelityResult>,
    pub leakage: LeakageReport,
    pub invariants: InvariantReport,
    pub trace: Vec<TracePoint>,
    #[serde(skip)]
    pub steps: Vec<StepRecord>,
    #[serde(skip)]
    pub final_state: Option<DensityMatrix>,
    /// State at the end of the last feedback stage, before displacement.
    #[serde(skip)]
    pub feedback_state: Option<DensityMatrix>,
}

impl TrajectoryRecord {
    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: Self = serde_json::from_str(s)?;
        if rec.schema != TRAJECTORY_SCHEMA {
            return Err(Error::Parse(format!("unknown trajectory schema {:?}", rec.schema)));
        }
        Ok(rec)
    }
}

/// `G (n★ − ⟨n⟩) x`.
pub fn feedback_hamiltonian(rho: &DensityMatrix, config: &ProtocolConfig) -> CMatrix {
    let ops = build_operator_set(rho.space());
    &ops.x * Complex64::from(config.g * feedback_error(rho, config))
}

/// `e_f = n★ − ⟨n⟩`.
pub fn feedback_error(rho: &DensityMatrix, config: &ProtocolConfig) -> f64 {
    config.n_star as f64 - rho.mean_n()
}

/// Direction of a measurement-strength ramp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ramp {
    /// `0 → M_max` over `t_on`.
    SwitchOn,
    /// `from → 0` over `t_off`.
    SwitchOff { from: f64 },
}

/// `M(t)` where `t` is the time since the ramp began.
pub fn measurement_ramp(t: f64, ramp: Ramp, config: &ProtocolConfig) -> f64 {
    let shape = |s: f64| -> f64 {
        let s = s.clamp(0.0, 1.0);
        match config.ramp_shape {
            RampShape::Linear => s,
            RampShape::Cosine => (std::f64::consts::FRAC_PI_2 * s).sin().powi(2),
        }
    };
    let m = match ramp {
        Ramp::SwitchOn => config.m_max * shape(t / config.t_on),
        Ramp::SwitchOff { from } => from * (1.0 - shape(t / config.t_off)),
    };
    m.clamp(0.0, config.m_max)
}

/// Displacement bringing `⟨p⟩` to `p_probe_factor·√n★`.
pub fn stage_displace_to_probe(rho: &DensityMatrix, config: &ProtocolConfig) -> Displaced<DensityMatrix> {
    let gamma = Complex64::new(0.0, config.probe_target() - rho.mean_p());
    apply_displacement(rho, gamma)
}

/// Displacement bringing both quadrature means to zero.
pub fn stage_final_center(rho: &DensityMatrix) -> Displaced<DensityMatrix> {
    apply_displacement(rho, -rho.mean_a())
}

/// Collapse to a single Gaussian lobe: Mandel ratio `Var(n)/⟨n⟩` inside the
/// configured band and a displaced-squeezed overlap above threshold.
pub fn detect_quasi_coherent_collapse(rho: &DensityMatrix, config: &ProtocolConfig) -> bool {
    let n = rho.mean_n();
    if n < 1e-9 {
        return false;
    }
    let ratio = rho.var_n() / n;
    if ratio < config.mandel_low || ratio > config.mandel_high {
        return false;
    }
    best_gaussian_overlap(rho, 300) > config.collapse_overlap
}

/// Mutable state of one trajectory while the stage machine runs.
pub struct Trajectory {
    config: ProtocolConfig,
    rho: DensityMatrix,
    noise: NoiseStream,
    integrator: Integrator,
    x_op: Hamiltonian,
    axis: AxisProbe,
    t: f64,
    m_now: f64,
    stage: StagePhase,
    record: TrajectoryRecord,
}

impl Trajectory {
    pub fn new(config: ProtocolConfig) -> Result<Self> {
        config.validate()?;
        let space = FockSpace::new(config.dim)?;
        let noise = NoiseStream::new(config.seed, 0).with_substeps(config.noise_substeps);
        let integrator = Integrator::new(config.dim, config.sme_params(), config.scheme)?;
        let x_op = Hamiltonian::new(build_operator_set(space).x);
        let axis = AxisProbe::new(config.dim, (config.dim as f64).sqrt(), config.q_samples);
        let record = TrajectoryRecord {
            schema: TRAJECTORY_SCHEMA.into(),
            run_id: format!("{:016x}", config.seed),
            config: config.clone(),
            outcome: Outcome::Timeout,
            failure: None,
            elapsed: 0.0,
            restarts: 0,
            transitions: Vec::new(),
            axis_q: None,
            final_x: 0.0,
            final_p: 0.0,
            final_n: 0.0,
            probe: None,
            fidelity: None,
            leakage: LeakageReport::default(),
            invariants: InvariantReport::default(),
            trace: Vec::new(),
            steps: Vec::new(),
            final_state: None,
            feedback_state: None,
        };
        Ok(Self {
            rho: DensityMatrix::vacuum(space),
            config,
            noise,
            integrator,
            x_op,
            axis,
            t: 0.0,
            m_now: 0.0,
            stage: StagePhase::FockFeedback,
            record,
        })
    }

    /// Starts from `rho` instead of vacuum.
    pub fn with_state(mut self, rho: DensityMatrix) -> Result<Self> {
        if rho.dim() != self.config.dim {
            return Err(Error::Shape {
                expected: self.config.dim,
                rows: rho.dim(),
                cols: rho.dim(),
            });
        }
        self.rho = rho;
        Ok(self)
    }

    pub fn state(&self) -> &DensityMatrix {
        &self.rho
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn stage(&self) -> StagePhase {
        self.stage
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn record(&self) -> &TrajectoryRecord {
        &self.record
    }

    fn budget_left(&self) -> bool {
        self.t + self.config.dt <= self.config.t_budget * (1.0 + 1e-12)
    }

    fn transition(&mut self, to: StagePhase) {
        debug_assert!(to.can_follow(self.stage), "{:?} -> {:?}", self.stage, to);
        let a = self.rho.mean_a();
        self.record.transitions.push(Transition {
            t: self.t,
            from: self.stage,
            to,
            exp_n: self.rho.mean_n(),
            exp_x: a.re,
            exp_p: a.im,
        });
        self.stage = to;
    }

    /// One SME step at measurement strength `m`, with feedback when `feedback`.
    fn step(&mut self, m: f64, feedback: bool) -> Result<StepRecord> {
        let e_f = if feedback {
            feedback_error(&self.rho, &self.config)
        } else {
            0.0
        };
        let control = Control {
            m,
            hamiltonian: feedback.then_some(&self.x_op),
            scale: self.config.g * e_f,
            e_f,
        };
        let index = self.record.steps.len();
        let rec = self
            .integrator
            .step(&mut self.rho, &control, &mut self.noise, self.t, index)?;
        self.t += self.config.dt;
        self.m_now = m;

        let inv = &mut self.record.invariants;
        inv.steps += 1;
        inv.max_trace_error = inv.max_trace_error.max((self.rho.trace().re - 1.0).abs());
        inv.max_hermiticity_error = inv.max_hermiticity_error.max(self.rho.hermiticity_error());
        inv.max_trace_drift = inv.max_trace_drift.max(self.integrator.last_trace_drift());

        if index % self.config.trace_stride.max(1) == 0 {
            self.record.trace.push(TracePoint {
                t: rec.t,
                n: rec.exp_n,
                x: rec.exp_x,
                p: rec.exp_p,
                m,
                stage: self.stage,
            });
        }
        self.record.steps.push(rec);
        Ok(rec)
    }

    /// Ramps the probe off, continuing feedback if `feedback`. Returns false
    /// if the budget ran out first.
    fn switch_off(&mut self, feedback: bool, mut probe: Option<&mut ProbeSummary>) -> Result<bool> {
        let from = self.m_now;
        let mut tau = 0.0;
        while self.m_now > 0.0 {
            if !self.budget_left() {
                return Ok(false);
            }
            tau += self.config.dt;
            let m = measurement_ramp(tau, Ramp::SwitchOff { from }, &self.config);
            let rec = self.step(m, feedback)?;
            if let Some(p) = probe.as_deref_mut() {
                p.accumulate(&rec, self.config.eta, self.config.dt);
            }
        }
        Ok(true)
    }

    fn exit_reached(&self, armed: &mut bool) -> bool {
        let thr = self.config.feedback_threshold();
        let p = self.rho.mean_p();
        match self.config.feedback_exit {
            FeedbackExit::FirstCrossing => p < thr,
            FeedbackExit::Armed => {
                let near = self.rho.mean_n() >= self.config.n_star as f64 - 1.0;
                if *armed {
                    p >= thr
                } else {
                    *armed = p < thr && near;
                    false
                }
            }
        }
    }
}

/// Runs number-state feedback until the exit predicate holds (returns
/// `DisplaceToProbe`) or the budget is exhausted (`Timeout`).
pub fn stage_fock_feedback(traj: &mut Trajectory) -> Result<StagePhase> {
    let thr = traj.config.feedback_threshold();
    let entry_ready = traj.rho.mean_p() < thr
        && (traj.config.feedback_exit == FeedbackExit::FirstCrossing
            || traj.rho.mean_n() >= traj.config.n_star as f64 - 1.0);
    if entry_ready {
        return Ok(StagePhase::DisplaceToProbe);
    }
    let mut armed = false;
    let mut tau = 0.0;
    loop {
        if !traj.budget_left() {
            return Ok(StagePhase::Timeout);
        }
        tau += traj.config.dt;
        let m = measurement_ramp(tau, Ramp::SwitchOn, &traj.config);
        traj.step(m, true)?;
        if traj.exit_reached(&mut armed) {
            if !traj.switch_off(true, None)? {
                return Ok(StagePhase::Timeout);
            }
            return Ok(StagePhase::DisplaceToProbe);
        }
    }
}

/// Probes without feedback until the axis-Q predicate holds (`FinalCenter`),
/// the state collapses (`QuasiCoherentRestart`) or time runs out (`Timeout`).
pub fn stage_probe(traj: &mut Trajectory) -> Result<StagePhase> {
    let mut summary = ProbeSummary::default();
    let axis_q = traj.axis.max_q(&traj.rho);
    if axis_q < traj.config.delta {
        traj.record.axis_q = Some(axis_q);
        traj.record.probe = Some(summary);
        return Ok(StagePhase::FinalCenter);
    }
    let q_every = traj.config.period_steps(traj.config.q_check_period);
    let collapse_every = traj.config.period_steps(traj.config.collapse_period);
    let mut tau = 0.0;
    let mut k = 0usize;
    loop {
        if !traj.budget_left() {
            return Ok(StagePhase::Timeout);
        }
        tau += traj.config.dt;
        k += 1;
        let m = measurement_ramp(tau, Ramp::SwitchOn, &traj.config);
        let rec = traj.step(m, false)?;
        summary.accumulate(&rec, traj.config.eta, traj.config.dt);

        if k % q_every == 0 && traj.axis.max_q(&traj.rho) < traj.config.delta {
            if !traj.switch_off(false, Some(&mut summary))? {
                return Ok(StagePhase::Timeout);
            }
            // the switch-off steps still measure; decide on the final state
            let q = traj.axis.max_q(&traj.rho);
            if q < traj.config.delta {
                traj.record.axis_q = Some(q);
                traj.record.probe = Some(summary);
                return Ok(StagePhase::FinalCenter);
            }
            tau = 0.0;
        }
        if k % collapse_every == 0 && detect_quasi_coherent_collapse(&traj.rho, &traj.config) {
            if !traj.switch_off(false, None)? {
                return Ok(StagePhase::Timeout);
            }
            return Ok(StagePhase::QuasiCoherentRestart);
        }
    }
}

/// Executes the stage machine from vacuum.
pub fn run_protocol(config: &ProtocolConfig) -> Result<TrajectoryRecord> {
    Ok(run_trajectory(Trajectory::new(config.clone())?))
}

/// Executes the stage machine on a prepared trajectory. Integration failures
/// end the run with a numerical-failure outcome.
pub fn run_trajectory(mut traj: Trajectory) -> TrajectoryRecord {
    match drive(&mut traj) {
        Ok(outcome) => traj.record.outcome = outcome,
        Err(e) => {
            traj.record.outcome = Outcome::NumericalFailure;
            traj.record.failure = Some(e.to_string());
        }
    }
    traj.record.elapsed = traj.t;
    let a = traj.rho.mean_a();
    traj.record.final_x = a.re;
    traj.record.final_p = a.im;
    traj.record.final_n = traj.rho.mean_n();
    if traj.record.outcome == Outcome::Success && traj.config.optimize_fidelity {
        traj.record.fidelity = Some(optimize_fidelity(&traj.rho));
    }
    traj.record.final_state = Some(traj.rho);
    traj.record
}

fn drive(traj: &mut Trajectory) -> Result<Outcome> {
    loop {
        match traj.stage {
            StagePhase::FockFeedback => {
                let next = stage_fock_feedback(traj)?;
                traj.transition(next);
            }
            StagePhase::DisplaceToProbe => {
                traj.record.feedback_state = Some(traj.rho.clone());
                let shifted = stage_displace_to_probe(&traj.rho, &traj.config);
                traj.record.leakage.push(&shifted);
                traj.rho = shifted.state;
                traj.transition(StagePhase::ProbeNoFeedback);
            }
            StagePhase::ProbeNoFeedback => {
                let next = stage_probe(traj)?;
                traj.transition(next);
            }
            StagePhase::FinalCenter => {
                let centered = stage_final_center(&traj.rho);
                traj.record.leakage.push(&centered);
                traj.rho = centered.state;
                traj.transition(StagePhase::Success);
            }
            StagePhase::QuasiCoherentRestart => {
                traj.record.restarts += 1;
                if traj.config.restart == RestartPolicy::Vacuum {
                    traj.rho = DensityMatrix::vacuum(traj.rho.space());
                }
                traj.transition(StagePhase::FockFeedback);
            }
            StagePhase::Success => return Ok(Outcome::Success),
            StagePhase::Timeout => return Ok(Outcome::Timeout),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fidelity::{ansatz_state, SuperpositionAnsatz};
    use crate::fock::{coherent_state, fock_state};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn unit_config(n_star: usize) -> ProtocolConfig {
        ProtocolConfig::with_rate(n_star, 1.0)
    }

    #[test]
    fn thresholds() {
        assert!((feedback_threshold(10) - (-1.430227)).abs() < 1e-6);
        assert!((feedback_threshold(5) - (-0.821854)).abs() < 1e-6);
        assert!((ProtocolConfig::for_n_star(10).probe_target() - 2.846).abs() < 1e-3);
    }

    #[test]
    fn default_timings() {
        let cfg = ProtocolConfig::for_n_star(10);
        assert!((cfg.t_on - 200e-9).abs() < 1e-15);
        assert!((cfg.t_off - 2e-9).abs() < 1e-15);
        assert!((cfg.t_budget * cfg.m_max - 10.0).abs() < 1e-12);
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.delta = 0.01;
        assert!(bad.validate().is_err());
        bad = cfg.clone();
        bad.n_star = 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn feedback_policy() {
        let cfg = unit_config(10);
        let s = FockSpace::new(cfg.dim).unwrap();
        let at_target = fock_state(10, s).unwrap().to_density();
        assert_eq!(feedback_hamiltonian(&at_target, &cfg).norm(), 0.0);
        let vac = DensityMatrix::vacuum(s);
        let h = feedback_hamiltonian(&vac, &cfg);
        let x = build_operator_set(s).x;
        assert!((h - x * c(10.0 * cfg.g, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn ramp_examples() {
        let cfg = ProtocolConfig::for_n_star(10);
        assert_eq!(measurement_ramp(0.0, Ramp::SwitchOn, &cfg), 0.0);
        assert!((measurement_ramp(cfg.t_on, Ramp::SwitchOn, &cfg) - cfg.m_max).abs() < 1e-6);
        assert!((measurement_ramp(cfg.t_on / 2.0, Ramp::SwitchOn, &cfg) - cfg.m_max / 2.0).abs() < 1e-6);
        assert_eq!(measurement_ramp(10.0 * cfg.t_on, Ramp::SwitchOn, &cfg), cfg.m_max);
        let off = Ramp::SwitchOff { from: cfg.m_max };
        assert_eq!(measurement_ramp(cfg.t_off, off, &cfg), 0.0);
        assert!((measurement_ramp(cfg.t_off / 2.0, off, &cfg) - cfg.m_max / 2.0).abs() < 1e-6);
    }

    #[test]
    fn displace_to_probe_examples() {
        let cfg = unit_config(10);
        let s = FockSpace::new(cfg.dim).unwrap();
        let rho = coherent_state(c(0.3, -1.43), s).unwrap().to_density();
        let shifted = stage_displace_to_probe(&rho, &cfg);
        assert!((shifted.state.mean_p() - cfg.probe_target()).abs() < 1e-6);
        assert!((shifted.state.mean_x() - 0.3).abs() < 1e-6);
        assert!(!shifted.truncation_flagged());
        // magnitude of the shift
        assert!((cfg.probe_target() + 1.43 - 4.276).abs() < 2e-3);

        let at = coherent_state(c(0.0, cfg.probe_target()), s).unwrap().to_density();
        let same = stage_displace_to_probe(&at, &cfg).state;
        assert!((same.matrix() - at.matrix()).norm() < 1e-8);
    }

    #[test]
    fn final_center_examples() {
        let s = FockSpace::new(60).unwrap();
        let coh = coherent_state(c(1.0, 2.0), s).unwrap().to_density();
        let centered = stage_final_center(&coh).state;
        let vac = fock_state(0, s).unwrap();
        assert!(centered.overlap(&vac) > 1.0 - 1e-8);
        assert!(centered.mean_x().abs() < 1e-6 && centered.mean_p().abs() < 1e-6);
    }

    #[test]
    fn collapse_detector_examples() {
        let cfg = unit_config(10);
        let s = FockSpace::new(cfg.dim).unwrap();
        assert!(detect_quasi_coherent_collapse(
            &coherent_state(c(3.0, 0.0), s).unwrap().to_density(),
            &cfg
        ));
        assert!(!detect_quasi_coherent_collapse(
            &fock_state(10, s).unwrap().to_density(),
            &cfg
        ));
        let cat = ansatz_state(&SuperpositionAnsatz::new(0.0, 0.0, c(3.0, 0.0), 0.0), s).unwrap();
        assert!(!detect_quasi_coherent_collapse(&cat.to_density(), &cfg));
    }

    #[test]
    fn zero_budget_times_out() {
        let mut cfg = unit_config(5);
        cfg.t_budget = 0.0;
        let rec = run_protocol(&cfg).unwrap();
        assert_eq!(rec.outcome, Outcome::Timeout);
        assert_eq!(rec.elapsed, 0.0);
        assert!(rec.steps.is_empty());
    }

    #[test]
    fn below_threshold_at_entry_transitions_immediately() {
        let mut cfg = unit_config(10);
        cfg.feedback_exit = FeedbackExit::FirstCrossing;
        let s = FockSpace::new(cfg.dim).unwrap();
        let rho = coherent_state(c(0.0, -2.0), s).unwrap().to_density();
        let mut traj = Trajectory::new(cfg).unwrap().with_state(rho).unwrap();
        assert_eq!(stage_fock_feedback(&mut traj).unwrap(), StagePhase::DisplaceToProbe);
        assert_eq!(traj.time(), 0.0);
    }

    #[test]
    fn dark_axis_at_probe_entry_transitions_immediately() {
        let cfg = unit_config(10);
        let s = FockSpace::new(cfg.dim).unwrap();
        let cat = ansatz_state(&SuperpositionAnsatz::new(0.0, 0.0, c(3.0, 0.0), 0.0), s).unwrap();
        let mut traj = Trajectory::new(cfg).unwrap().with_state(cat.to_density()).unwrap();
        assert_eq!(stage_probe(&mut traj).unwrap(), StagePhase::FinalCenter);
    }

    #[test]
    fn collapsed_state_requests_restart() {
        let cfg = unit_config(10);
        let s = FockSpace::new(cfg.dim).unwrap();
        let rho = coherent_state(c(1.5, 2.5), s).unwrap().to_density();
        let mut traj = Trajectory::new(cfg).unwrap().with_state(rho).unwrap();
        assert_eq!(stage_probe(&mut traj).unwrap(), StagePhase::QuasiCoherentRestart);
    }

    #[test]
    fn feedback_moves_p_at_short_times() {
        // vacuum, no measurement: ⟨p⟩(τ) ≈ −G n★ τ/2
        let mut cfg = unit_config(10);
        cfg.m_max = 1e-9;
        cfg.t_on = 1.0;
        cfg.t_off = 0.5;
        cfg.dt = 1e-5;
        let mut traj = Trajectory::new(cfg.clone()).unwrap();
        let tau = 2e-3;
        let steps = (tau / cfg.dt).round() as usize;
        for _ in 0..steps {
            traj.step(0.0, true).unwrap();
        }
        let expected = -cfg.g * 10.0 * tau / 2.0;
        assert!(
            (traj.state().mean_p() - expected).abs() < 1e-3 * expected.abs(),
            "{}",
            traj.state().mean_p()
        );
    }

    #[test]
    fn transitions_are_legal() {
        use StagePhase::*;
        assert!(DisplaceToProbe.can_follow(FockFeedback));
        assert!(FockFeedback.can_follow(QuasiCoherentRestart));
        assert!(!Success.can_follow(FockFeedback));
        assert!(!FockFeedback.can_follow(ProbeNoFeedback));
    }

    #[test]
    fn record_round_trips_through_json() {
        let mut cfg = unit_config(5);
        cfg.t_budget = 0.05;
        let rec = run_protocol(&cfg).unwrap();
        let back = TrajectoryRecord::from_json(&rec.to_json().unwrap()).unwrap();
        assert_eq!(back.config, rec.config);
        assert_eq!(back.outcome, rec.outcome);
        assert_eq!(back.transitions, rec.transitions);
        assert!(TrajectoryRecord::from_json(&rec.to_json().unwrap().replace("/v1", "/v0")).is_err());
    }

    #[test]
    fn trajectory_is_reproducible() {
        let mut cfg = unit_config(5);
        cfg.dim = 40;
        cfg.seed = 11;
        cfg.optimize_fidelity = false;
        let a = run_protocol(&cfg).unwrap();
        let b = run_protocol(&cfg).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.outcome, b.outcome);
        assert!(a.elapsed <= cfg.t_budget * (1.0 + 1e-9));
        assert!(a.steps.iter().all(|s| s.e_f.is_finite()));
    }
}
