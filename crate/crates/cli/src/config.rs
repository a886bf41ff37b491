//! Flat experiment configuration read from TOML, with per-key command-line
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ctrldiffuse::diffusion::Interval;
use ctrldiffuse::discretize::{build_action_grid, build_uniform_state_grid, coupled_resolution};
use ctrldiffuse::{ActionGrid, DiffusionModel, OuParams, SamplingScheme, StateGrid};

use crate::error::CliError;

pub const SEED_ENV: &str = "CTRLDIFFUSE_SEED";
pub const MAX_SWEEP_CELLS: usize = 10_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// `b = -θx + u`, `σ = σ0`, `c = min(x² + r u², C)`.
    #[default]
    Ou,
    /// Constant drift, noise and cost.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub theta: f64,
    pub sigma0: f64,
    pub cost_weight_r: f64,
    pub drift: f64,
    pub sigma: f64,
    pub cost_value: f64,
    pub beta: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub u_min: f64,
    pub u_max: f64,

    pub h: f64,
    /// Euler substeps per interval; when unset, `round(h / learn_dt)`.
    pub substeps: Option<usize>,
    pub learn_dt: f64,
    pub m_states: usize,
    pub n_actions: usize,
    /// When set, grid sizes come from `coupled_resolution(h, p)` and
    /// `m_states`, `n_actions` are ignored.
    pub resolution_exponent: Option<f64>,

    pub learn_steps: u64,
    /// Defaults to `V_max`, so pairs that were never visited are never greedy.
    pub q_init: Option<f64>,
    pub cost_at_representative: bool,
    /// Also solve the finite MDP and record `‖Q - Q*‖` in the history.
    pub track_reference: bool,
    pub samples_per_pair: usize,
    pub vi_tolerance: f64,

    pub x0: f64,
    pub eval_rollouts: usize,
    /// Euler step used for evaluation rollouts. Learned and reference runs
    /// share their Brownian increments when it divides both intervals.
    pub eval_dt: f64,
    pub eval_horizon: Option<usize>,
    /// Horizon chosen so the neglected tail is at most this.
    pub eval_tail: f64,

    pub reference_h: f64,
    pub reference_exponent: f64,
    pub reference_substeps: usize,
    pub reference_samples_per_pair: usize,
    pub reference_max_transitions: u64,

    pub n_const: f64,
    pub regular: bool,
    pub psi: f64,
    pub delta: f64,
    pub eps: f64,
    pub omega: f64,
    pub cover_time: Option<f64>,

    pub sweep_h: Vec<f64>,
    pub sweep_eps: Vec<f64>,
    /// Run learning and evaluation in every sweep cell; otherwise only
    /// bounds and complexity columns are filled.
    pub sweep_gap: bool,

    pub state_pairs: Vec<[f64; 3]>,
    pub action_pairs: Vec<[f64; 3]>,
    pub lipschitz_samples: usize,

    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Ou,
            theta: 1.0,
            sigma0: 0.5,
            cost_weight_r: 0.1,
            drift: 0.0,
            sigma: 0.0,
            cost_value: 1.0,
            beta: 1.0,
            x_min: -2.0,
            x_max: 2.0,
            u_min: -1.0,
            u_max: 1.0,
            h: 0.2,
            substeps: None,
            learn_dt: 0.01,
            m_states: 16,
            n_actions: 5,
            resolution_exponent: None,
            learn_steps: 200_000,
            q_init: None,
            cost_at_representative: false,
            track_reference: false,
            samples_per_pair: 1000,
            vi_tolerance: 1e-8,
            x0: 1.0,
            eval_rollouts: 1000,
            eval_dt: 0.0025,
            eval_horizon: None,
            eval_tail: 1e-6,
            reference_h: 0.025,
            reference_exponent: 1.5,
            reference_substeps: 5,
            reference_samples_per_pair: 5000,
            reference_max_transitions: 1_000_000_000,
            n_const: 1.0,
            regular: false,
            psi: 0.1,
            delta: 0.1,
            eps: 0.1,
            omega: 0.75,
            cover_time: None,
            sweep_h: Vec::new(),
            sweep_eps: Vec::new(),
            sweep_gap: true,
            state_pairs: Vec::new(),
            action_pairs: Vec::new(),
            lipschitz_samples: 10_000,
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Loads a config file (or the defaults), then applies `--key value`
/// overrides, then the seed from the environment and finally `--seed`.
pub fn load(path: Option<&Path>, overrides: &[String], seed_env: Option<&str>, seed_flag: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| invalid(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| invalid(format!("config {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for (key, value) in parse_overrides(overrides)? {
        table.insert(key, value);
    }
    let mut cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| invalid(format!("config: {}", e.message())))?;
    if let Some(s) = seed_env.filter(|s| !s.trim().is_empty()) {
        cfg.seed = s.trim().parse().map_err(|_| invalid(format!("{SEED_ENV} must be an unsigned 64-bit integer, got {s:?}")))?;
    }
    if let Some(s) = seed_flag {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_value(raw: &str) -> toml::Value {
    let attempt = |text: &str| text.parse::<toml::Table>().ok().and_then(|mut t| t.remove("v"));
    attempt(&format!("v = {raw}"))
        .or_else(|| raw.contains(',').then(|| attempt(&format!("v = [{raw}]"))).flatten())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Turns `--some-key value` and `--some-key=value` into `(some_key, value)`.
/// Keys holding lists of numbers; a single value on the command line is a
/// one-element list.
const LIST_KEYS: [&str; 2] = ["sweep_h", "sweep_eps"];

pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, toml::Value)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let body = arg.strip_prefix("--").ok_or_else(|| invalid(format!("unexpected argument {arg:?}; overrides look like --key value")))?;
        let (key, raw) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| invalid(format!("override --{body} needs a value")))?;
                (body.to_string(), v.clone())
            }
        };
        if key.is_empty() {
            return Err(invalid("empty override key"));
        }
        let key = key.replace('-', "_");
        let value = match parse_value(&raw) {
            v @ (toml::Value::Float(_) | toml::Value::Integer(_)) if LIST_KEYS.contains(&key.as_str()) => toml::Value::Array(vec![v]),
            v => v,
        };
        out.push((key, value));
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn h_values(&self) -> Vec<f64> {
        if self.sweep_h.is_empty() {
            vec![self.h]
        } else {
            self.sweep_h.clone()
        }
    }

    pub fn eps_values(&self) -> Vec<f64> {
        if self.sweep_eps.is_empty() {
            vec![self.eps]
        } else {
            self.sweep_eps.clone()
        }
    }

    /// Checks every field before any computation starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let finite = |name: &str, v: f64| if v.is_finite() { Ok(()) } else { Err(invalid(format!("{name} must be finite, got {v}"))) };
        for (name, v) in [
            ("theta", self.theta),
            ("sigma0", self.sigma0),
            ("cost_weight_r", self.cost_weight_r),
            ("drift", self.drift),
            ("sigma", self.sigma),
            ("cost_value", self.cost_value),
            ("x0", self.x0),
        ] {
            finite(name, v)?;
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(invalid(format!("discount beta must be positive, got {}", self.beta)));
        }
        if !(self.x_min < self.x_max) || !(self.u_min <= self.u_max) {
            return Err(invalid("domain needs x_min < x_max and action range needs u_min <= u_max"));
        }
        if self.model == ModelKind::Ou && (self.theta < 0.0 || self.sigma0 < 0.0 || self.cost_weight_r < 0.0) {
            return Err(invalid("OU parameters theta, sigma0 and cost_weight_r must be nonnegative"));
        }
        if self.model == ModelKind::Constant && self.cost_value < 0.0 {
            return Err(invalid("cost must be nonnegative"));
        }
        for h in self.h_values() {
            if !(h > 0.0 && h.is_finite()) {
                return Err(invalid(format!("sampling interval h must be positive, got {h}")));
            }
        }
        if self.substeps == Some(0) {
            return Err(invalid("substeps must be at least 1"));
        }
        for (name, v) in [("learn_dt", self.learn_dt), ("eval_dt", self.eval_dt), ("eval_tail", self.eval_tail), ("vi_tolerance", self.vi_tolerance)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        match self.resolution_exponent {
            Some(p) if !(p > 0.0 && p.is_finite()) => return Err(invalid(format!("resolution_exponent must be positive, got {p}"))),
            None if self.m_states == 0 || self.n_actions == 0 => return Err(invalid("m_states and n_actions must be at least 1")),
            _ => {}
        }
        if self.learn_steps == 0 {
            return Err(invalid("learn_steps must be at least 1"));
        }
        if self.q_init.is_some_and(|q| !q.is_finite()) {
            return Err(invalid("q_init must be finite"));
        }
        if self.samples_per_pair == 0 || self.reference_samples_per_pair == 0 {
            return Err(invalid("samples per pair must be at least 1"));
        }
        if self.eval_rollouts == 0 || self.eval_horizon == Some(0) {
            return Err(invalid("eval_rollouts and eval_horizon must be at least 1"));
        }
        if !(self.x_min..=self.x_max).contains(&self.x0) {
            return Err(invalid(format!("initial state x0 = {} lies outside [{}, {}]", self.x0, self.x_min, self.x_max)));
        }
        if !(self.reference_h > 0.0 && self.reference_h < 1.0) {
            return Err(invalid(format!("reference_h must lie in (0, 1), got {}", self.reference_h)));
        }
        if !(self.reference_exponent > 0.0) || self.reference_substeps == 0 {
            return Err(invalid("reference_exponent must be positive and reference_substeps at least 1"));
        }
        if !(self.n_const >= 0.0) || !(self.psi > 0.0) || !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("bound parameters need n_const >= 0, psi > 0 and 0 < delta < 1"));
        }
        for eps in self.eps_values() {
            if !(eps > 0.0 && eps <= 1.0) {
                return Err(invalid(format!("eps must lie in (0, 1], got {eps}")));
            }
        }
        if !(self.omega > 0.5 && self.omega < 1.0) {
            return Err(invalid(format!("polynomial rate exponent omega must lie in (1/2, 1), got {}", self.omega)));
        }
        if self.cover_time.is_some_and(|l| !(l > 0.0)) {
            return Err(invalid("cover_time must be positive"));
        }
        let cells = self.h_values().len().saturating_mul(self.eps_values().len());
        if cells > MAX_SWEEP_CELLS {
            return Err(invalid(format!("sweep has {cells} cells, more than the limit of {MAX_SWEEP_CELLS}")));
        }
        if self.lipschitz_samples < 2 {
            return Err(invalid("lipschitz_samples must be at least 2"));
        }
        for h in self.h_values() {
            self.grids(h)?;
        }
        self.model()?;
        Ok(())
    }

    pub fn model(&self) -> Result<DiffusionModel, CliError> {
        let domain = Interval::new(self.x_min, self.x_max)?;
        let actions = Interval::new(self.u_min, self.u_max)?;
        let model = match self.model {
            ModelKind::Ou => {
                DiffusionModel::ornstein_uhlenbeck(OuParams::new(self.theta, self.sigma0, self.cost_weight_r)?, domain, actions, self.beta)?
            }
            ModelKind::Constant => DiffusionModel::constant(self.drift, self.sigma, self.cost_value, domain, actions, self.beta)?,
        };
        Ok(model)
    }

    pub fn grid_sizes(&self, h: f64) -> Result<(usize, usize), CliError> {
        match self.resolution_exponent {
            Some(p) => Ok(coupled_resolution(h, p, self.x_max - self.x_min, self.u_max - self.u_min)?),
            None => Ok((self.m_states, self.n_actions)),
        }
    }

    pub fn grids(&self, h: f64) -> Result<(StateGrid, ActionGrid), CliError> {
        let (m, n) = self.grid_sizes(h)?;
        Ok((build_uniform_state_grid(self.x_min, self.x_max, m)?, build_action_grid(self.u_min, self.u_max, n)?))
    }

    pub fn reference_grids(&self) -> Result<(StateGrid, ActionGrid), CliError> {
        let (m, n) = coupled_resolution(self.reference_h, self.reference_exponent, self.x_max - self.x_min, self.u_max - self.u_min)?;
        Ok((build_uniform_state_grid(self.x_min, self.x_max, m)?, build_action_grid(self.u_min, self.u_max, n)?))
    }

    pub fn learn_substeps(&self, h: f64) -> usize {
        self.substeps.unwrap_or_else(|| substeps_for(h, self.learn_dt))
    }

    pub fn learn_scheme(&self, h: f64, seed: u64) -> Result<SamplingScheme, CliError> {
        Ok(SamplingScheme::new(h, self.learn_substeps(h), seed)?)
    }

    pub fn eval_scheme(&self, h: f64, seed: u64) -> Result<SamplingScheme, CliError> {
        Ok(SamplingScheme::new(h, substeps_for(h, self.eval_dt), seed)?)
    }

    pub fn eval_horizon_for(&self, model: &DiffusionModel, h: f64) -> usize {
        self.eval_horizon.unwrap_or_else(|| ctrldiffuse::diffusion::default_horizon(model, h, self.eval_tail))
    }
}

fn substeps_for(h: f64, dt: f64) -> usize {
    ((h / dt).round() as usize).max(1)
}
