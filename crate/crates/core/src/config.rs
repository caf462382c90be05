//! Flat key-value configuration files and the matching command-line flags.
//!
//! Rates (`m_max`, `g`, `kappa`) are in MHz and times (`dt`, `t_budget`,
//! `t_on`, `t_off`, `collapse_period`, `q_check_period`) in ns; both are
//! converted to SI once, in [`ProtocolOverrides::build`]. Defaults for
//! unset keys follow from `n_star` and `m_max` as in
//! [`ProtocolConfig::with_rate`].
//!
//! ```text
//! n_star = 10
//! m_max = 2.12
//! eta = 0.8
//! kappa_rel = 0.005
//! seed = 7
//! k = 135
//! ```

use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{ProtocolConfig, REFERENCE_M};

const MHZ: f64 = 1e6;
const NS: f64 = 1e-9;

/// Protocol keys; every field is optional so that layers can be merged.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolOverrides {
    /// Target photon number n★.
    #[arg(long)]
    pub n_star: Option<usize>,
    /// Peak measurement strength (MHz).
    #[arg(long)]
    pub m_max: Option<f64>,
    /// Feedback gain (MHz).
    #[arg(long)]
    pub g: Option<f64>,
    /// Feedback gain as a multiple of m_max.
    #[arg(long)]
    pub g_rel: Option<f64>,
    /// Detection efficiency.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Cavity loss rate (MHz).
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Cavity loss rate as a multiple of m_max.
    #[arg(long)]
    pub kappa_rel: Option<f64>,
    /// Axis threshold for the success test.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Time step (ns).
    #[arg(long)]
    pub dt: Option<f64>,
    /// Fock-space truncation.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Production-time budget (ns).
    #[arg(long)]
    pub t_budget: Option<f64>,
    /// Measurement switch-on ramp (ns).
    #[arg(long)]
    pub t_on: Option<f64>,
    /// Measurement switch-off ramp (ns).
    #[arg(long)]
    pub t_off: Option<f64>,
    #[arg(long)]
    pub p_probe_factor: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// exponential | euler-maruyama
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub noise_substeps: Option<u32>,
    /// armed | first-crossing
    #[arg(long)]
    pub feedback_exit: Option<String>,
    /// reuse-field | vacuum
    #[arg(long)]
    pub restart: Option<String>,
    /// linear | cosine
    #[arg(long)]
    pub ramp_shape: Option<String>,
    #[arg(long)]
    pub mandel_low: Option<f64>,
    #[arg(long)]
    pub mandel_high: Option<f64>,
    #[arg(long)]
    pub collapse_overlap: Option<f64>,
    /// Interval between collapse checks (ns).
    #[arg(long)]
    pub collapse_period: Option<f64>,
    /// Interval between axis checks while probing (ns).
    #[arg(long)]
    pub q_check_period: Option<f64>,
    #[arg(long)]
    pub q_samples: Option<usize>,
    #[arg(long)]
    pub trace_stride: Option<usize>,
    #[arg(long)]
    pub optimize_fidelity: Option<bool>,
}

macro_rules! merge_fields {
    ($low:expr, $high:expr, $($f:ident),*) => {
        $( if $high.$f.is_some() { $low.$f = $high.$f.clone(); } )*
    };
}

fn parse_enum<T: DeserializeOwned>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.into()))
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl ProtocolOverrides {
    /// `self` with every key set in `higher` replaced.
    pub fn merged(mut self, higher: &ProtocolOverrides) -> Self {
        merge_fields!(
            self,
            higher,
            n_star,
            m_max,
            g,
            g_rel,
            eta,
            kappa,
            kappa_rel,
            delta,
            dt,
            dim,
            t_budget,
            t_on,
            t_off,
            p_probe_factor,
            seed,
            scheme,
            noise_substeps,
            feedback_exit,
            restart,
            ramp_shape,
            mandel_low,
            mandel_high,
            collapse_overlap,
            collapse_period,
            q_check_period,
            q_samples,
            trace_stride,
            optimize_fidelity
        );
        self
    }

    /// Resolves defaults, converts units and validates.
    pub fn build(&self) -> Result<ProtocolConfig> {
        let n_star = self.n_star.ok_or_else(|| Error::Config("n_star is required".into()))?;
        let m = self.m_max.map_or(REFERENCE_M, |v| v * MHZ);
        let mut c = ProtocolConfig::with_rate(n_star, m);
        if self.g.is_some() && self.g_rel.is_some() {
            return Err(Error::Config("set either g or g_rel, not both".into()));
        }
        if self.kappa.is_some() && self.kappa_rel.is_some() {
            return Err(Error::Config("set either kappa or kappa_rel, not both".into()));
        }
        if let Some(v) = self.g {
            c.g = v * MHZ;
        }
        if let Some(v) = self.g_rel {
            c.g = v * m;
        }
        if let Some(v) = self.kappa {
            c.kappa = v * MHZ;
        }
        if let Some(v) = self.kappa_rel {
            c.kappa = v * m;
        }
        let ns = |v: Option<f64>, field: &mut f64| {
            if let Some(v) = v {
                *field = v * NS;
            }
        };
        ns(self.dt, &mut c.dt);
        ns(self.t_budget, &mut c.t_budget);
        ns(self.t_on, &mut c.t_on);
        ns(self.t_off, &mut c.t_off);
        ns(self.collapse_period, &mut c.collapse_period);
        ns(self.q_check_period, &mut c.q_check_period);
        macro_rules! copy {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        copy!(
            eta,
            delta,
            dim,
            p_probe_factor,
            seed,
            noise_substeps,
            mandel_low,
            mandel_high,
            collapse_overlap,
            q_samples,
            trace_stride,
            optimize_fidelity
        );
        if let Some(s) = &self.scheme {
            c.scheme = parse_enum("scheme", s)?;
        }
        if let Some(s) = &self.feedback_exit {
            c.feedback_exit = parse_enum("feedback_exit", s)?;
        }
        if let Some(s) = &self.restart {
            c.restart = parse_enum("restart", s)?;
        }
        if let Some(s) = &self.ramp_shape {
            c.ramp_shape = parse_enum("ramp_shape", s)?;
        }
        if c.q_samples < 3 || c.trace_stride == 0 || c.noise_substeps == 0 {
            return Err(Error::Config(
                "q_samples >= 3, trace_stride >= 1 and noise_substeps >= 1 required".into(),
            ));
        }
        c.validate()?;
        Ok(c)
    }
}

/// Ensemble keys of the same file.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleOverrides {
    /// Number of trajectories.
    #[arg(long)]
    pub k: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Directory for per-run JSON records.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub histogram_bins: Option<usize>,
}

impl EnsembleOverrides {
    pub fn merged(mut self, higher: &EnsembleOverrides) -> Self {
        merge_fields!(self, higher, k, parallelism, output_dir, histogram_bins);
        self
    }
}

const ENSEMBLE_KEYS: [&str; 4] = ["k", "parallelism", "output_dir", "histogram_bins"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub protocol: ProtocolOverrides,
    pub ensemble: EnsembleOverrides,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Parse(format!("config: {e}")))?;
        let mut ensemble = toml::Table::new();
        for key in ENSEMBLE_KEYS {
            if let Some(v) = table.remove(key) {
                ensemble.insert(key.into(), v);
            }
        }
        let protocol = ProtocolOverrides::deserialize(toml::Value::Table(table))
            .map_err(|e| Error::Parse(format!("config: {e}")))?;
        let ensemble = EnsembleOverrides::deserialize(toml::Value::Table(ensemble))
            .map_err(|e| Error::Parse(format!("config: {e}")))?;
        Ok(Self { protocol, ensemble })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
