//! Experiment configuration.
//!
//! A config document is TOML with top-level `experiment`, `seed` and
//! `out_dir` keys plus the sections `[merton]`, `[zermelo]`, `[sanity]`,
//! `[train]`, `[grid]` and `[output]`. Keys missing from the document take
//! the value of the selected preset; unknown keys are rejected.

use std::fmt;
use std::str::FromStr;

use mfcontrol::env::{MertonParams, OuSpec, ZermeloParams};
use mfcontrol::trainer::{BetaSchedule, GammaKind, RegSpec, TrainConfig};
use mfcontrol::{Activation, InitSpec};
use serde::{Deserialize, Serialize};
use toml::Table;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {reason}")]
    Range { key: String, reason: String },
}

fn range(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Range {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    MertonGrid,
    ZermeloTrain,
    GibbsSanity,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::MertonGrid => "merton_grid",
            Experiment::ZermeloTrain => "zermelo_train",
            Experiment::GibbsSanity => "gibbs_sanity",
        }
    }
}

impl FromStr for Experiment {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "merton_grid" => Ok(Experiment::MertonGrid),
            "zermelo_train" => Ok(Experiment::ZermeloTrain),
            "gibbs_sanity" => Ok(Experiment::GibbsSanity),
            other => Err(range(
                "experiment",
                format!("unknown experiment `{other}` (expected merton_grid, zermelo_train or gibbs_sanity)"),
            )),
        }
    }
}

/// Preset family: `full` is the full-scale experiment, `desk` the
/// scaled-down values that finish in minutes on one core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    #[default]
    Full,
    Desk,
}

impl FromStr for Profile {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            other => Err(range("profile", format!("unknown profile `{other}`"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Full => "full",
            Profile::Desk => "desk",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaChoice {
    Quadratic,
    QuadraticExp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationChoice {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MertonSection {
    pub assets: usize,
    pub risk_aversion: f64,
    pub drift: f64,
    pub volatility: f64,
    /// Direction of the second-period return; uniform when empty.
    pub direction: Vec<f64>,
    pub interest: f64,
    pub initial_wealth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZermeloSection {
    pub speed: f64,
    pub target: [f64; 2],
    pub start: [f64; 2],
    pub offset_low: f64,
    pub offset_high: f64,
    pub obstacle_weight: f64,
    pub obstacle_sharpness: f64,
    pub steps: usize,
    pub ou_theta: f64,
    pub ou_alpha: f64,
    pub ou_vartheta: f64,
    pub tau: f64,
    pub wind0_low: f64,
    pub wind0_high: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SanitySection {
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub width: usize,
    pub sigma: f64,
    pub beta: f64,
    pub gamma: GammaChoice,
    pub epsilon: f64,
    pub regularised: bool,
    pub activation: ActivationChoice,
    pub input_scale: f64,
    pub output_scale: f64,
    /// `β(n) = β n^beta_exponent`; 0 keeps `β` fixed.
    pub beta_exponent: f64,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
    /// Epochs actually run per stage; 0 means all of `epochs`.
    pub epoch_cap: usize,
    /// Abort once the batch risk exceeds this; `inf` never aborts.
    pub max_risk: f64,
    /// Per-particle gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub ns: Vec<usize>,
    pub rs: Vec<usize>,
    pub trials: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Telemetry row interval in epochs; the last epoch is always kept.
    pub telemetry_every: usize,
    pub checkpoints: bool,
    /// Record wall-clock times; off keeps reruns byte-identical.
    pub wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Master seed; every random draw in a run derives from it.
    pub seed: u64,
    pub out_dir: String,
    pub merton: MertonSection,
    pub zermelo: ZermeloSection,
    pub sanity: SanitySection,
    pub train: TrainSection,
    pub grid: GridSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// Fully-populated preset for `experiment` under `profile`.
    pub fn preset(experiment: Experiment, profile: Profile) -> Self {
        let m = MertonParams::default();
        let z = ZermeloParams::default();
        let desk = profile == Profile::Desk;
        let merton_train = TrainSection {
            epochs: if desk { 5000 } else { 100_000 },
            lr_max: 0.1,
            lr_min: 1e-5,
            width: 50,
            sigma: 100.0,
            beta: 100.0,
            gamma: GammaChoice::Quadratic,
            epsilon: 0.0,
            regularised: true,
            activation: ActivationChoice::Tanh,
            input_scale: 1.0,
            output_scale: 0.0,
            beta_exponent: 0.0,
            batch_size: 0,
            epoch_cap: 0,
            max_risk: f64::INFINITY,
            grad_clip: 0.0,
        };
        let train = match experiment {
            Experiment::MertonGrid => merton_train,
            Experiment::ZermeloTrain => TrainSection {
                epochs: if desk { 2000 } else { 20_000 },
                lr_max: if desk { 0.1 } else { 1.0 },
                width: if desk { 32 } else { 100 },
                sigma: 0.1f64.sqrt() * 100.0,
                grad_clip: if desk { 10.0 } else { 0.0 },
                ..merton_train
            },
            Experiment::GibbsSanity => TrainSection {
                epochs: 20_000,
                lr_max: 0.01,
                lr_min: 0.01,
                width: 512,
                sigma: 1.0,
                beta: 1.0,
                ..merton_train
            },
        };
        Self {
            experiment,
            seed: 0,
            out_dir: "runs".into(),
            merton: MertonSection {
                assets: m.assets,
                risk_aversion: m.risk_aversion,
                drift: m.drift,
                volatility: m.volatility,
                direction: Vec::new(),
                interest: m.interest,
                initial_wealth: m.initial_wealth,
            },
            zermelo: ZermeloSection {
                speed: z.speed,
                target: z.target,
                start: z.start,
                offset_low: z.offset_low,
                offset_high: z.offset_high,
                obstacle_weight: z.obstacle_weight,
                obstacle_sharpness: z.obstacle_sharpness,
                steps: z.steps,
                ou_theta: z.ou.theta,
                ou_alpha: z.ou.alpha,
                ou_vartheta: z.ou.vartheta,
                tau: z.ou.tau,
                wind0_low: z.ou.z0_low,
                wind0_high: z.ou.z0_high,
                n_train: 100,
                n_test: 1000,
            },
            sanity: SanitySection {
                state_dim: 1,
                control_dim: 1,
                horizon: 1,
            },
            train,
            grid: GridSection {
                ns: if desk { vec![8, 64, 512] } else { vec![8, 64, 512, 1000] },
                rs: if desk { vec![50] } else { vec![10, 100, 1000] },
                trials: if desk { 8 } else { 50 },
                n_test: 1000,
            },
            output: OutputSection {
                telemetry_every: 100,
                checkpoints: true,
                wall_time: false,
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seed > i64::MAX as u64 {
            return Err(range("seed", "must fit in a signed 64-bit integer"));
        }
        if self.out_dir.is_empty() {
            return Err(range("out_dir", "must not be empty"));
        }
        let m = &self.merton;
        if m.assets == 0 {
            return Err(range("merton.assets", "must be at least 1"));
        }
        positive("merton.risk_aversion", m.risk_aversion)?;
        positive("merton.volatility", m.volatility)?;
        finite("merton.drift", m.drift)?;
        finite("merton.interest", m.interest)?;
        finite("merton.initial_wealth", m.initial_wealth)?;
        if !m.direction.is_empty() {
            let d = &m.direction;
            if d.len() != m.assets {
                return Err(range("merton.direction", format!("needs {} entries", m.assets)));
            }
            if d.iter().all(|v| *v == 0.0) || d.iter().any(|v| !v.is_finite()) {
                return Err(range("merton.direction", "must be finite and nonzero"));
            }
        }
        let z = &self.zermelo;
        positive("zermelo.speed", z.speed)?;
        if z.steps == 0 {
            return Err(range("zermelo.steps", "must be at least 1"));
        }
        if z.offset_low > z.offset_high {
            return Err(range("zermelo.offset_low", "must not exceed offset_high"));
        }
        if z.wind0_low > z.wind0_high {
            return Err(range("zermelo.wind0_low", "must not exceed wind0_high"));
        }
        if !(z.obstacle_weight >= 0.0) {
            return Err(range("zermelo.obstacle_weight", "must be non-negative"));
        }
        finite("zermelo.obstacle_sharpness", z.obstacle_sharpness)?;
        positive("zermelo.tau", z.tau)?;
        if !(z.ou_theta >= 0.0 && z.ou_theta.is_finite()) {
            return Err(range("zermelo.ou_theta", "must be non-negative"));
        }
        if !(z.ou_vartheta >= 0.0 && z.ou_vartheta.is_finite()) {
            return Err(range("zermelo.ou_vartheta", "must be non-negative"));
        }
        finite("zermelo.ou_alpha", z.ou_alpha)?;
        if z.n_train == 0 {
            return Err(range("zermelo.n_train", "must be at least 1"));
        }
        if z.n_test == 0 {
            return Err(range("zermelo.n_test", "must be at least 1"));
        }
        let s = &self.sanity;
        for (key, v) in [
            ("sanity.state_dim", s.state_dim),
            ("sanity.control_dim", s.control_dim),
            ("sanity.horizon", s.horizon),
        ] {
            if v == 0 {
                return Err(range(key, "must be at least 1"));
            }
        }
        let t = &self.train;
        if t.epochs == 0 {
            return Err(range("train.epochs", "must be at least 1"));
        }
        if t.width == 0 {
            return Err(range("train.width", "must be at least 1"));
        }
        positive("train.lr_min", t.lr_min)?;
        if !(t.lr_max >= t.lr_min && t.lr_max.is_finite()) {
            return Err(range("train.lr_max", "must be finite and at least lr_min"));
        }
        positive("train.sigma", t.sigma)?;
        positive("train.beta", t.beta)?;
        if !(t.epsilon >= 0.0 && t.epsilon.is_finite()) {
            return Err(range("train.epsilon", "must be non-negative"));
        }
        if !(t.input_scale >= 0.0 && t.input_scale.is_finite()) {
            return Err(range("train.input_scale", "must be non-negative"));
        }
        if !(t.output_scale >= 0.0 && t.output_scale.is_finite()) {
            return Err(range("train.output_scale", "must be non-negative"));
        }
        finite("train.beta_exponent", t.beta_exponent)?;
        if !(t.grad_clip >= 0.0 && t.grad_clip.is_finite()) {
            return Err(range("train.grad_clip", "must be non-negative and finite"));
        }
        if t.max_risk.is_nan() {
            return Err(range("train.max_risk", "must not be NaN"));
        }
        let g = &self.grid;
        if g.ns.is_empty() || g.ns.contains(&0) {
            return Err(range("grid.ns", "needs at least one positive size"));
        }
        if g.rs.is_empty() || g.rs.contains(&0) {
            return Err(range("grid.rs", "needs at least one positive width"));
        }
        if g.trials == 0 {
            return Err(range("grid.trials", "must be at least 1"));
        }
        if g.n_test == 0 {
            return Err(range("grid.n_test", "must be at least 1"));
        }
        if self.output.telemetry_every == 0 {
            return Err(range("output.telemetry_every", "must be at least 1"));
        }
        Ok(())
    }

    pub fn merton_params(&self) -> MertonParams {
        let m = &self.merton;
        MertonParams {
            assets: m.assets,
            risk_aversion: m.risk_aversion,
            drift: m.drift,
            volatility: m.volatility,
            direction: if m.direction.is_empty() {
                vec![1.0 / (m.assets as f64).sqrt(); m.assets]
            } else {
                m.direction.clone()
            },
            interest: m.interest,
            initial_wealth: m.initial_wealth,
        }
    }

    pub fn zermelo_params(&self) -> ZermeloParams {
        let z = &self.zermelo;
        ZermeloParams {
            speed: z.speed,
            target: z.target,
            start: z.start,
            offset_low: z.offset_low,
            offset_high: z.offset_high,
            obstacle_weight: z.obstacle_weight,
            obstacle_sharpness: z.obstacle_sharpness,
            ou: OuSpec {
                theta: z.ou_theta,
                alpha: z.ou_alpha,
                vartheta: z.ou_vartheta,
                tau: z.tau,
                z0_low: z.wind0_low,
                z0_high: z.wind0_high,
            },
            steps: z.steps,
        }
    }

    /// Trainer settings; `seed` and `width` are overridden per grid cell.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            width: t.width,
            reg: RegSpec {
                sigma: t.sigma,
                beta: t.beta,
                gamma: match t.gamma {
                    GammaChoice::Quadratic => GammaKind::Quadratic,
                    GammaChoice::QuadraticExp => GammaKind::QuadraticPlusExp,
                },
                epsilon: t.epsilon,
            },
            regularised: t.regularised,
            seed: self.seed,
            beta_schedule: (t.beta_exponent != 0.0).then_some(BetaSchedule {
                beta0: t.beta,
                exponent: t.beta_exponent,
            }),
            activation: match t.activation {
                ActivationChoice::Tanh => Activation::Tanh,
                ActivationChoice::Relu => Activation::Relu,
            },
            init: InitSpec {
                output_scale: t.output_scale,
                input_scale: t.input_scale,
            },
            batch_size: (t.batch_size > 0).then_some(t.batch_size),
            max_risk: t.max_risk.is_finite().then_some(t.max_risk),
            epoch_cap: (t.epoch_cap > 0).then_some(t.epoch_cap),
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
        }
    }

    /// Canonical TOML form; parsing it back yields the same config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(range(key, "must be positive and finite"))
    }
}

fn finite(key: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(range(key, "must be finite"))
    }
}

/// Parses a config document on top of the preset for its experiment.
///
/// Integer keys given negative values are reported as range errors on that
/// key rather than as type errors.
pub fn parse_config(text: &str, profile: Profile) -> Result<ExperimentConfig, ConfigError> {
    let doc: Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    let experiment = match doc.get("experiment") {
        None => Experiment::MertonGrid,
        Some(toml::Value::String(s)) => s.parse()?,
        Some(_) => return Err(range("experiment", "must be a string")),
    };
    check_negative_integers(&doc, "")?;
    let mut merged = Table::try_from(ExperimentConfig::preset(experiment, profile))
        .expect("preset serialises to a TOML table");
    merge(&mut merged, doc);
    let config: ExperimentConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn check_negative_integers(table: &Table, prefix: &str) -> Result<(), ConfigError> {
    for (key, value) in table {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match value {
            toml::Value::Integer(i) if *i < 0 => {
                return Err(range(&path, format!("{i} is negative")));
            }
            toml::Value::Table(t) => check_negative_integers(t, &path)?,
            toml::Value::Array(items) => {
                if items.iter().any(|v| matches!(v, toml::Value::Integer(i) if *i < 0)) {
                    return Err(range(&path, "entries must be non-negative"));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn merge(base: &mut Table, overlay: Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
