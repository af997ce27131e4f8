//! Scenario documents. All lengths are in metres, angles in radians, times
//! in seconds and rates in hertz.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::barrier::{Barrier, CircularStayOut, Halfspace, LookaheadUnicycle};
use crate::error::{Error, Result};
use crate::models::{Integrator1D, Omni, Process, ProcessModel, RangeBeacon, Unicycle};
use crate::particle_filter::PfConfig;
use crate::risk::{RiskConfig, SupportBound};
use crate::safety_filter::{FilterParams, InputBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessSpec {
    Integrator1d {
        #[serde(default = "default_integrator_sigma")]
        sigma: f64,
    },
    Unicycle {
        #[serde(default = "default_unicycle_sigma")]
        sigma: [f64; 3],
    },
    Omni {
        #[serde(default = "default_omni_sigma")]
        sigma: [f64; 3],
    },
}

fn default_integrator_sigma() -> f64 {
    Integrator1D::default().sigma
}

fn default_unicycle_sigma() -> [f64; 3] {
    Unicycle::default().sigma
}

fn default_omni_sigma() -> [f64; 3] {
    Omni::default().sigma
}

impl ProcessSpec {
    pub fn build(&self) -> Process {
        match *self {
            ProcessSpec::Integrator1d { sigma } => Process::Integrator1D(Integrator1D { sigma }),
            ProcessSpec::Unicycle { sigma } => Process::Unicycle(Unicycle { sigma }),
            ProcessSpec::Omni { sigma } => Process::Omni(Omni { sigma }),
        }
    }

    fn sigmas(&self) -> Vec<f64> {
        match self {
            ProcessSpec::Integrator1d { sigma } => vec![*sigma],
            ProcessSpec::Unicycle { sigma } | ProcessSpec::Omni { sigma } => sigma.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObservationSpec {
    RangeBeacon {
        #[serde(default = "default_beacon")]
        beacon: [f64; 2],
        /// Range noise standard deviation (m).
        #[serde(default = "default_range_noise")]
        noise_std: f64,
        #[serde(default = "default_rate")]
        rate_hz: f64,
        /// Sensor stops reporting from this time on (s).
        #[serde(default)]
        fail_after: Option<f64>,
    },
}

fn default_beacon() -> [f64; 2] {
    RangeBeacon::default().beacon
}

fn default_range_noise() -> f64 {
    RangeBeacon::default().noise_std
}

fn default_rate() -> f64 {
    RangeBeacon::default().rate_hz
}

impl ObservationSpec {
    pub fn build(&self) -> RangeBeacon {
        match *self {
            ObservationSpec::RangeBeacon {
                beacon,
                noise_std,
                rate_hz,
                ..
            } => RangeBeacon {
                beacon,
                noise_std,
                rate_hz,
            },
        }
    }

    pub fn fail_after(&self) -> Option<f64> {
        match self {
            ObservationSpec::RangeBeacon { fail_after, .. } => *fail_after,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BarrierSpec {
    /// `h = c − a·x`.
    Halfspace { a: Vec<f64>, c: f64 },
    Circular { center: [f64; 2], radius: f64 },
    Lookahead {
        center: [f64; 2],
        radius: f64,
        offset: f64,
    },
}

impl BarrierSpec {
    pub fn build(&self) -> Barrier {
        match self {
            BarrierSpec::Halfspace { a, c } => Barrier::Halfspace(Halfspace { a: a.clone(), c: *c }),
            BarrierSpec::Circular { center, radius } => Barrier::Circular(CircularStayOut {
                center: *center,
                radius: *radius,
            }),
            BarrierSpec::Lookahead {
                center,
                radius,
                offset,
            } => Barrier::Lookahead(LookaheadUnicycle {
                center: *center,
                radius: *radius,
                offset: *offset,
            }),
        }
    }
}

/// One Gaussian component with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportSpec {
    /// The lowest particle value.
    #[default]
    SampleMin,
    /// The barrier's own global minimum (disc barriers only).
    BarrierMin,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskSpec {
    pub alpha: f64,
    pub delta: f64,
    #[serde(default)]
    pub support: SupportSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterVariant {
    Ours,
    MuScbf,
    MlScbf,
    BeScbf,
    None,
}

impl FilterVariant {
    pub fn label(&self) -> &'static str {
        match self {
            FilterVariant::Ours => "ours",
            FilterVariant::MuScbf => "mu_scbf",
            FilterVariant::MlScbf => "ml_scbf",
            FilterVariant::BeScbf => "be_scbf",
            FilterVariant::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    Constant { u: Vec<f64> },
    /// Proportional controller toward `goal`, evaluated on the belief mean.
    Goal {
        goal: [f64; 2],
        #[serde(default = "one")]
        gain: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn default_eta() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    pub variant: FilterVariant,
    pub reference: ReferenceSpec,
    /// Diagonal of the QP weight; identity when absent.
    #[serde(default)]
    pub q_diag: Option<Vec<f64>>,
    /// Symmetric input limits `|u_j| ≤ limit_j`; unbounded when absent.
    #[serde(default)]
    pub input_limits: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub gamma_cbf: f64,
    /// Chebyshev ball risk level for the ball baseline.
    #[serde(default = "default_eta")]
    pub eta: f64,
}

fn default_control_period() -> f64 {
    0.01
}

fn default_reps() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Simulated duration (s).
    pub horizon: f64,
    #[serde(default = "default_control_period")]
    pub control_period: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    pub process: ProcessSpec,
    #[serde(default)]
    pub observation: Option<ObservationSpec>,
    pub barrier: BarrierSpec,
    pub initial_belief: Vec<MixtureComponent>,
    /// Fixed initial true state; drawn from the initial belief when absent.
    #[serde(default)]
    pub true_state: Option<Vec<f64>>,
    pub risk: RiskSpec,
    pub particle_filter: PfConfig,
    pub controller: ControllerSpec,
}

fn invalid(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

fn is_multiple(a: f64, b: f64) -> bool {
    let k = (a / b).round();
    k >= 1.0 && (a - k * b).abs() <= 1e-9 * a.max(1.0)
}

impl Scenario {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let line_of = |e: &toml::de::Error| {
            e.span()
                .map(|r| format!("line {}", s[..r.start].matches('\n').count() + 1))
                .unwrap_or_else(|| "<document>".into())
        };
        let de = toml::Deserializer::parse(s).map_err(|e| invalid(&line_of(&e), e.message()))?;
        let sc: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let path = if path == "." { line_of(&inner) } else { path };
            invalid(&path, inner.message())
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(&path.display().to_string(), e.to_string()))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { path: at, message } => invalid(&format!("{}: {at}", path.display()), message),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let process = self.process.build();
        let n = process.state_dim();
        let m = process.input_dim();
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid("horizon", "must be positive"));
        }
        if !(self.control_period > 0.0) {
            return Err(invalid("control_period", "must be positive"));
        }
        self.particle_filter
            .validate()
            .map_err(|e| invalid("particle_filter", e.to_string()))?;
        if !is_multiple(self.control_period, self.particle_filter.dt_sde) {
            return Err(invalid(
                "control_period",
                "must be a whole multiple of particle_filter.dt_sde",
            ));
        }
        if self.reps == 0 {
            return Err(invalid("reps", "must be at least 1"));
        }
        if self.process.sigmas().iter().any(|s| !(*s >= 0.0)) {
            return Err(invalid("process.sigma", "entries must be non-negative"));
        }
        if let Some(obs) = &self.observation {
            let ObservationSpec::RangeBeacon {
                noise_std, rate_hz, ..
            } = obs;
            if !(*noise_std > 0.0) {
                return Err(invalid("observation.noise_std", "must be positive"));
            }
            if !(*rate_hz > 0.0) || !is_multiple(1.0 / rate_hz, self.control_period) {
                return Err(invalid(
                    "observation.rate_hz",
                    "measurement period must be a whole multiple of control_period",
                ));
            }
            if n < 2 {
                return Err(invalid("observation", "range beacon needs a planar state"));
            }
        }
        match &self.barrier {
            BarrierSpec::Halfspace { a, .. } if a.len() != n => {
                return Err(invalid("barrier.a", format!("expected {n} entries, got {}", a.len())));
            }
            BarrierSpec::Circular { radius, .. } if !(*radius > 0.0) => {
                return Err(invalid("barrier.radius", "must be positive"));
            }
            BarrierSpec::Lookahead { radius, offset, .. } => {
                if n != 3 {
                    return Err(invalid("barrier", "look-ahead barrier needs a [p_x, p_y, φ] state"));
                }
                if !(*radius > 0.0 && *offset > 0.0) {
                    return Err(invalid("barrier", "radius and offset must be positive"));
                }
            }
            BarrierSpec::Circular { .. } if n < 2 => {
                return Err(invalid("barrier", "disc barrier needs a planar state"));
            }
            _ => {}
        }
        if self.initial_belief.is_empty() {
            return Err(invalid("initial_belief", "needs at least one component"));
        }
        for (k, c) in self.initial_belief.iter().enumerate() {
            let at = format!("initial_belief[{k}]");
            if c.mean.len() != n || c.std.len() != n {
                return Err(invalid(&at, format!("mean and std need {n} entries")));
            }
            if !(c.weight >= 0.0) || c.std.iter().any(|s| !(*s >= 0.0)) {
                return Err(invalid(&at, "weight and std must be non-negative"));
            }
        }
        let wsum: f64 = self.initial_belief.iter().map(|c| c.weight).sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(invalid("initial_belief", format!("weights sum to {wsum}, not 1")));
        }
        if let Some(x) = &self.true_state {
            if x.len() != n {
                return Err(invalid("true_state", format!("expected {n} entries")));
            }
        }
        self.risk_config()?;
        if self.risk.support == SupportSpec::BarrierMin && self.barrier.build().lower_bound().is_none() {
            return Err(invalid("risk.support", "barrier has no global lower bound"));
        }
        self.filter_params()?;
        let c = &self.controller;
        if !(c.gamma_cbf > 0.0) {
            return Err(invalid("controller.gamma_cbf", "must be positive"));
        }
        if !(c.eta > 0.0 && c.eta < 1.0) {
            return Err(invalid("controller.eta", "must lie in (0, 1)"));
        }
        match &c.reference {
            ReferenceSpec::Constant { u } if u.len() != m => {
                return Err(invalid("controller.reference.u", format!("expected {m} entries")));
            }
            ReferenceSpec::Goal { .. } if n != 3 => {
                return Err(invalid("controller.reference", "goal tracking needs a planar pose"));
            }
            _ => {}
        }
        if c.variant == FilterVariant::BeScbf && matches!(self.barrier, BarrierSpec::Halfspace { .. }) {
            return Err(invalid("controller.variant", "ball baseline needs a disc barrier"));
        }
        Ok(())
    }

    pub fn risk_config(&self) -> Result<RiskConfig> {
        let support = match self.risk.support {
            SupportSpec::SampleMin => SupportBound::SampleMin,
            SupportSpec::Fixed(b) => SupportBound::Fixed(b),
            SupportSpec::BarrierMin => SupportBound::Fixed(self.barrier.build().lower_bound().unwrap_or(f64::NAN)),
        };
        RiskConfig {
            alpha: self.risk.alpha,
            delta: self.risk.delta,
            support,
        }
        .with_support(support)
        .map_err(|e| invalid("risk", e.to_string()))
    }

    pub fn filter_params(&self) -> Result<FilterParams> {
        let m = self.process.build().input_dim();
        let c = &self.controller;
        let mut params = FilterParams::identity(m).with_gamma(c.gamma_cbf);
        if let Some(q) = &c.q_diag {
            if q.len() != m || q.iter().any(|v| !(*v > 0.0)) {
                return Err(invalid("controller.q_diag", format!("need {m} positive entries")));
            }
            params.q = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(q));
        }
        if let Some(lim) = &c.input_limits {
            if lim.len() != m {
                return Err(invalid("controller.input_limits", format!("expected {m} entries")));
            }
            let bx = InputBox::symmetric(lim).map_err(|e| invalid("controller.input_limits", e.to_string()))?;
            params = params.with_bounds(bx);
        }
        Ok(params)
    }

    /// Control periods in the horizon.
    pub fn steps(&self) -> usize {
        (self.horizon / self.control_period).round() as usize
    }

    /// Control periods between measurements, if a sensor is configured.
    pub fn measurement_stride(&self) -> Option<usize> {
        self.observation.as_ref().map(|o| {
            let ObservationSpec::RangeBeacon { rate_hz, .. } = o;
            (1.0 / (rate_hz * self.control_period)).round() as usize
        })
    }
}
