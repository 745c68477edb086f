//! Backward-inductive noisy gradient descent on interacting particles.
//!
//! For each trainable step `t = T-1, .., 0` a fresh ensemble is trained with
//! the later ensembles frozen. One epoch updates every particle `θ_j` by
//!
//! ```text
//! θ_j ← θ_j − η_k (∇_{θ_j} r·R_t + ∇Γ(θ_j) / (2β²)) + (σ/β) √η_k ξ_j
//! ```
//!
//! with `ξ_j ~ N(0, I)` and a cosine-annealed `η_k`. The stationary law of the
//! particle system approximates the minimiser of `R_t + σ²/(2β²) KL(m | γ^σ)`
//! where `γ^σ ∝ exp(−Γ/σ²)`. The unregularised baseline drops both the `Γ`
//! term and the noise.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::env::{ControlProblem, EnvPath};
use crate::error::{Error, Result};
use crate::mfnet::{Activation, InitSpec, ParamGrad, ParticleEnsemble};
use crate::rng::{self, SimRng};
use crate::rollout::{risk_and_grad, GibbsVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GammaKind {
    /// `Γ(θ) = ‖θ‖²`
    #[default]
    Quadratic,
    /// `Γ(θ) = ‖θ‖² + ε exp(‖θ‖)`
    QuadraticPlusExp,
}

impl GammaKind {
    pub fn name(self) -> &'static str {
        match self {
            GammaKind::Quadratic => "quadratic",
            GammaKind::QuadraticPlusExp => "quadratic_plus_exp",
        }
    }
}

/// Entropic regularisation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegSpec {
    pub sigma: f64,
    pub beta: f64,
    pub gamma: GammaKind,
    pub epsilon: f64,
}

impl Default for RegSpec {
    fn default() -> Self {
        Self {
            sigma: 100.0,
            beta: 100.0,
            gamma: GammaKind::Quadratic,
            epsilon: 0.0,
        }
    }
}

impl RegSpec {
    /// Weight `σ²/(2β²)` of the KL term.
    pub fn strength(&self) -> f64 {
        self.sigma * self.sigma / (2.0 * self.beta * self.beta)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: &str| {
            Err(Error::InvalidParameter {
                name,
                reason: reason.into(),
            })
        };
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma", "must be positive and finite");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be positive and finite");
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", "must be non-negative and finite");
        }
        Ok(())
    }

    pub fn potential(&self, theta: &[f64]) -> f64 {
        let sq: f64 = theta.iter().map(|v| v * v).sum();
        match self.gamma {
            GammaKind::Quadratic => sq,
            GammaKind::QuadraticPlusExp => sq + self.epsilon * sq.sqrt().exp(),
        }
    }
}

/// `∇Γ(θ)`; the exponential term contributes zero at `θ = 0`.
pub fn gamma_grad(theta: &[f64], reg: &RegSpec) -> Vec<f64> {
    let mut out: Vec<f64> = theta.iter().map(|v| 2.0 * v).collect();
    if reg.gamma == GammaKind::QuadraticPlusExp {
        let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            let k = reg.epsilon * norm.exp() / norm;
            for (o, v) in out.iter_mut().zip(theta) {
                *o += k * v;
            }
        }
    }
    out
}

/// `β(n) = β_0 n^exponent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSchedule {
    pub beta0: f64,
    pub exponent: f64,
}

impl BetaSchedule {
    pub fn quarter_power(beta0: f64) -> Self {
        Self {
            beta0,
            exponent: 0.25,
        }
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.beta0 * (n as f64).powf(self.exponent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub width: usize,
    pub reg: RegSpec,
    pub regularised: bool,
    pub seed: u64,
    pub beta_schedule: Option<BetaSchedule>,
    pub activation: Activation,
    pub init: InitSpec,
    /// Minibatch size; full batch when `None`.
    pub batch_size: Option<usize>,
    /// Abort a stage once the batch risk exceeds this value.
    pub max_risk: Option<f64>,
    /// Stop each stage after this many epochs; the learning-rate schedule
    /// still spans `epochs`.
    pub epoch_cap: Option<usize>,
    /// Rescale any particle gradient whose norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr_max: 0.1,
            lr_min: 1e-5,
            width: 50,
            reg: RegSpec::default(),
            regularised: true,
            seed: 0,
            beta_schedule: None,
            activation: Activation::Tanh,
            init: InitSpec::default(),
            batch_size: None,
            max_risk: None,
            epoch_cap: None,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: &str| {
            Err(Error::InvalidParameter {
                name,
                reason: reason.into(),
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.width == 0 {
            return bad("width", "must be at least 1");
        }
        if !(self.lr_min > 0.0) {
            return bad("lr_min", "must be positive");
        }
        if !(self.lr_max >= self.lr_min && self.lr_max.is_finite()) {
            return bad("lr_max", "must be finite and at least lr_min");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad("grad_clip", "must be positive and finite");
            }
        }
        if self.batch_size == Some(0) {
            return bad("batch_size", "must be at least 1");
        }
        if let Some(s) = self.beta_schedule {
            if !(s.beta0 > 0.0 && s.beta0.is_finite() && s.exponent.is_finite()) {
                return bad("beta_schedule", "needs a positive beta0 and finite exponent");
            }
        }
        self.reg.validate()
    }

    /// Regularisation with `β` resolved for a training set of size `n`.
    pub fn effective_reg(&self, n: usize) -> RegSpec {
        match self.beta_schedule {
            Some(s) => RegSpec {
                beta: s.beta(n),
                ..self.reg
            },
            None => self.reg,
        }
    }
}

/// `lr_min + (lr_max − lr_min)(1 + cos(π k / T)) / 2`.
pub fn cosine_lr(k: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    let phase = std::f64::consts::PI * k as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub risk: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Applies one noisy gradient step with gradient `grad` (of `r · R_t`) to
/// `ensemble`, drawing noise from `rng` when regularised.
pub(crate) fn apply_update(
    ensemble: &mut ParticleEnsemble,
    grad: &ParamGrad,
    lr: f64,
    reg: Option<&RegSpec>,
    rng: &mut SimRng,
) {
    let stride = ensemble.stride();
    let noise = reg.map(|r| r.sigma / r.beta * lr.sqrt());
    let pull = reg.map(|r| 1.0 / (2.0 * r.beta * r.beta));
    for (theta, g) in ensemble
        .params_mut()
        .chunks_exact_mut(stride)
        .zip(grad.as_slice().chunks_exact(stride))
    {
        let prior = reg.map(|r| gamma_grad(theta, r));
        for (i, v) in theta.iter_mut().enumerate() {
            let mut step = g[i];
            if let (Some(p), Some(k)) = (&prior, pull) {
                step += k * p[i];
            }
            *v -= lr * step;
            if let Some(s) = noise {
                let xi: f64 = rng.sample(StandardNormal);
                *v += s * xi;
            }
        }
    }
}

fn select_batch<'a>(
    paths: &'a [EnvPath],
    batch: Option<usize>,
    rng: &mut SimRng,
) -> std::borrow::Cow<'a, [EnvPath]> {
    match batch {
        Some(b) if b < paths.len() => {
            let mut idx = rand::seq::index::sample(rng, paths.len(), b).into_vec();
            idx.sort_unstable();
            std::borrow::Cow::Owned(idx.into_iter().map(|i| paths[i].clone()).collect())
        }
        _ => std::borrow::Cow::Borrowed(paths),
    }
}

/// One epoch `k` of noisy gradient descent on the time-`t` ensemble.
///
/// Reported risk and gradient norm are evaluated before the update.
#[allow(clippy::too_many_arguments)]
pub fn sgd_epoch(
    problem: &dyn ControlProblem,
    gibbs: &mut GibbsVector,
    t: usize,
    paths: &[EnvPath],
    config: &TrainConfig,
    reg: &RegSpec,
    k: usize,
    rng: &mut SimRng,
) -> Result<EpochStats> {
    let batch = select_batch(paths, config.batch_size, rng);
    let (risk, mut grad) = risk_and_grad(problem, gibbs, &batch, t)?;
    for j in 0..grad.width() {
        let norm = grad.row_norm(j);
        if !norm.is_finite() {
            return Err(Error::NonFiniteGradient {
                stage: t,
                epoch: k,
                particle: j,
                norm,
            });
        }
        if let Some(clip) = config.grad_clip.filter(|&c| norm > c) {
            grad.row_mut(j).iter_mut().for_each(|v| *v *= clip / norm);
        }
    }
    if let Some(limit) = config.max_risk {
        if !(risk <= limit) {
            return Err(Error::LossAbort {
                stage: t,
                epoch: k,
                risk,
            });
        }
    }
    let lr = cosine_lr(k, config.epochs, config.lr_max, config.lr_min);
    let ensemble = gibbs.get_mut(t).ok_or(Error::MissingEnsemble { t })?;
    apply_update(ensemble, &grad, lr, config.regularised.then_some(reg), rng);
    Ok(EpochStats {
        risk,
        lr,
        grad_norm: grad.norm(),
    })
}

/// Hooks into [`gibbs_train_with`].
pub trait TrainObserver {
    fn on_epoch(&mut self, _stage: usize, _epoch: usize, _stats: &EpochStats) {}

    fn on_stage_complete(
        &mut self,
        _stage: usize,
        _ensemble: &ParticleEnsemble,
        _epochs: usize,
    ) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Runs the backward induction and returns the trained vector of ensembles.
pub fn gibbs_train(
    problem: &dyn ControlProblem,
    train: &[EnvPath],
    config: &TrainConfig,
) -> Result<GibbsVector> {
    gibbs_train_with(problem, train, config, &mut ())
}

pub fn gibbs_train_with(
    problem: &dyn ControlProblem,
    train: &[EnvPath],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<GibbsVector> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyPaths);
    }
    let reg = config.effective_reg(train.len());
    let epochs = config.epoch_cap.map_or(config.epochs, |c| c.min(config.epochs));
    let mut gibbs = GibbsVector::empty(problem.horizon());
    for t in problem.trainable_steps().into_iter().rev() {
        let mut rng = rng::stream(config.seed, &[t as u64]);
        let ensemble = ParticleEnsemble::random(
            config.width,
            problem.state_dim(),
            problem.control_dim(),
            config.activation,
            config.init,
            &mut rng,
        )?;
        gibbs.set(t, ensemble);
        for k in 0..epochs {
            let stats = sgd_epoch(problem, &mut gibbs, t, train, config, &reg, k, &mut rng)?;
            observer.on_epoch(t, k, &stats);
        }
        let trained = gibbs.get(t).expect("stage ensemble present");
        if !trained.is_finite() {
            return Err(Error::NonFiniteGradient {
                stage: t,
                epoch: epochs,
                particle: 0,
                norm: f64::NAN,
            });
        }
        observer.on_stage_complete(t, trained, epochs)?;
    }
    Ok(gibbs)
}

/// Collects `(stage, epoch, batch_risk, lr, grad_norm)` rows every `every`
/// epochs, plus the final epoch of each stage.
#[derive(Debug, Clone)]
pub struct Telemetry {
    every: usize,
    last_epoch: usize,
    pub rows: Vec<(usize, usize, EpochStats)>,
}

impl Telemetry {
    pub fn new(every: usize, epochs_per_stage: usize) -> Self {
        Self {
            every: every.max(1),
            last_epoch: epochs_per_stage.saturating_sub(1),
            rows: Vec::new(),
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# telemetry v1")?;
        writeln!(out, "stage,epoch,batch_risk,lr,grad_norm")?;
        for (stage, epoch, s) in &self.rows {
            writeln!(out, "{stage},{epoch},{:?},{:?},{:?}", s.risk, s.lr, s.grad_norm)?;
        }
        Ok(())
    }
}

impl TrainObserver for Telemetry {
    fn on_epoch(&mut self, stage: usize, epoch: usize, stats: &EpochStats) {
        if epoch.is_multiple_of(self.every) || epoch == self.last_epoch {
            self.rows.push((stage, epoch, *stats));
        }
    }
}
