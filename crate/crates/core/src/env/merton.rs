use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{require, ControlProblem, EnvPath, PathSampler};
use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Two-period portfolio problem with exponential utility.
///
/// State is `(Y_t, Z_t)` (wealth followed by the last observed returns, with
/// `Z_0 := 0`), the control is the dollar holding of each asset, and the loss
/// is `exp(−λ Y_2) − 1`, the negated utility.
#[derive(Debug, Clone, PartialEq)]
pub struct MertonParams {
    pub assets: usize,
    pub risk_aversion: f64,
    pub drift: f64,
    pub volatility: f64,
    /// Direction of the second-period return; normalised on construction.
    pub direction: Vec<f64>,
    pub interest: f64,
    pub initial_wealth: f64,
}

impl Default for MertonParams {
    fn default() -> Self {
        let d = 10;
        Self {
            assets: d,
            risk_aversion: 1.0,
            drift: 0.18,
            volatility: 0.44,
            direction: vec![1.0 / (d as f64).sqrt(); d],
            interest: 0.0,
            initial_wealth: 1.0,
        }
    }
}

/// `Z_1 ~ U[−1, 1]^d`, `Z_2 = ζ η` with `ζ ~ N(m, s)` independent of `Z_1`.
#[derive(Debug, Clone)]
pub struct MertonSampler {
    assets: usize,
    direction: Vec<f64>,
    zeta: Normal<f64>,
}

impl PathSampler for MertonSampler {
    fn horizon(&self) -> usize {
        2
    }

    fn env_dim(&self) -> usize {
        self.assets
    }

    fn sample(&self, id: u64, rng: &mut SimRng) -> EnvPath {
        let z1: Vec<f64> = (0..self.assets)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        let zeta = self.zeta.sample(rng);
        let z2 = self.direction.iter().map(|e| zeta * e).collect();
        EnvPath {
            id,
            initial: Vec::new(),
            values: vec![z1, z2],
        }
    }
}

#[derive(Debug, Clone)]
pub struct MertonProblem {
    params: MertonParams,
    sampler: MertonSampler,
}

impl MertonProblem {
    pub fn new(mut params: MertonParams) -> Result<Self> {
        let d = params.assets;
        require("assets", d >= 1, "must be at least 1")?;
        require("risk_aversion", params.risk_aversion > 0.0, "must be positive")?;
        require("volatility", params.volatility > 0.0, "must be positive")?;
        require("drift", params.drift.is_finite(), "must be finite")?;
        require("interest", params.interest > -1.0, "must exceed -1")?;
        require("initial_wealth", params.initial_wealth.is_finite(), "must be finite")?;
        require(
            "direction",
            params.direction.len() == d,
            format!("expected {d} components, got {}", params.direction.len()),
        )?;
        let norm = params.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        require("direction", norm.is_finite() && norm > 0.0, "must be non-zero")?;
        params.direction.iter_mut().for_each(|v| *v /= norm);
        let zeta = Normal::new(params.drift, params.volatility).map_err(|e| {
            Error::InvalidParameter {
                name: "volatility",
                reason: e.to_string(),
            }
        })?;
        let sampler = MertonSampler {
            assets: d,
            direction: params.direction.clone(),
            zeta,
        };
        Ok(Self { params, sampler })
    }

    pub fn params(&self) -> &MertonParams {
        &self.params
    }

    /// The fixed uniform first-period allocation `y0 (1/d, .., 1/d)`.
    pub fn initial_allocation(&self) -> Vec<f64> {
        let d = self.params.assets;
        vec![self.params.initial_wealth / d as f64; d]
    }

    /// Optimal constant second-period holding `m / (λ s²) η`.
    pub fn optimal_control(&self) -> Vec<f64> {
        let p = &self.params;
        let scale = p.drift / (p.risk_aversion * p.volatility * p.volatility);
        p.direction.iter().map(|e| scale * e).collect()
    }

    /// `1 − exp(−m² / (2 s²))`: the certainty-equivalent gain of the optimal
    /// second-period bet, ignoring the first-period leg.
    pub fn optimal_bet_value(&self) -> f64 {
        let p = &self.params;
        1.0 - (-(p.drift * p.drift) / (2.0 * p.volatility * p.volatility)).exp()
    }

    #[inline]
    fn next_wealth(&self, y: f64, u: &[f64], z: &[f64]) -> f64 {
        let r = self.params.interest;
        (1.0 + r) * y + u.iter().zip(z).map(|(ui, zi)| ui * (zi - r)).sum::<f64>()
    }

    /// Terminal wealth when holding `pi_1` in the second period.
    pub fn terminal_wealth(&self, path: &EnvPath, pi_1: &[f64]) -> f64 {
        let y1 = self.next_wealth(self.params.initial_wealth, &self.initial_allocation(), path.z(1));
        self.next_wealth(y1, pi_1, path.z(2))
    }

    pub fn utility(&self, wealth: f64) -> f64 {
        1.0 - (-self.params.risk_aversion * wealth).exp()
    }
}

impl ControlProblem for MertonProblem {
    fn name(&self) -> &str {
        "merton"
    }

    fn horizon(&self) -> usize {
        2
    }

    fn state_dim(&self) -> usize {
        1 + self.params.assets
    }

    fn control_dim(&self) -> usize {
        self.params.assets
    }

    fn sampler(&self) -> &dyn PathSampler {
        &self.sampler
    }

    fn initial_state(&self, _path: &EnvPath) -> Vec<f64> {
        let mut x = vec![0.0; 1 + self.params.assets];
        x[0] = self.params.initial_wealth;
        x
    }

    fn transition(&self, _t: usize, x: &[f64], u: &[f64], z: &[f64]) -> Vec<f64> {
        let mut next = Vec::with_capacity(1 + z.len());
        next.push(self.next_wealth(x[0], u, z));
        next.extend_from_slice(z);
        next
    }

    fn transition_vjp(
        &self,
        _t: usize,
        _x: &[f64],
        _u: &[f64],
        z: &[f64],
        adj: &[f64],
        gx: &mut [f64],
        gu: &mut [f64],
    ) {
        // Only the wealth coordinate depends on (x, u); the return block of the
        // next state is copied from the environment.
        let r = self.params.interest;
        gx[0] += (1.0 + r) * adj[0];
        for (g, zi) in gu.iter_mut().zip(z) {
            *g += (zi - r) * adj[0];
        }
    }

    fn running_cost(&self, _t: usize, _x: &[f64], _u: &[f64]) -> f64 {
        0.0
    }

    fn running_cost_grad(&self, _t: usize, _x: &[f64], _u: &[f64], _gx: &mut [f64], _gu: &mut [f64]) {}

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        (-self.params.risk_aversion * x[0]).exp() - 1.0
    }

    fn terminal_cost_grad(&self, x: &[f64], gx: &mut [f64]) {
        let lambda = self.params.risk_aversion;
        gx[0] += -lambda * (-lambda * x[0]).exp();
    }

    fn reference_control(&self, _t: usize, _x: &[f64]) -> Vec<f64> {
        self.initial_allocation()
    }

    fn is_trainable(&self, t: usize) -> bool {
        t == 1
    }
}

/// Analytic optimal holding and a Monte-Carlo estimate of its expected
/// utility `E[1 − exp(−λ Y_2)]`, including the first-period leg.
#[derive(Debug, Clone, PartialEq)]
pub struct MertonOracle {
    pub pi_star: Vec<f64>,
    pub v_star_mc: f64,
    pub v_star_se: f64,
    pub paths: usize,
}

pub fn merton_oracle(problem: &MertonProblem, mc_paths: usize, rng: &mut SimRng) -> Result<MertonOracle> {
    require("mc_paths", mc_paths >= 10_000, "need at least 10^4 paths")?;
    let pi_star = problem.optimal_control();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for id in 0..mc_paths as u64 {
        let path = problem.sampler.sample(id, rng);
        let u = problem.utility(problem.terminal_wealth(&path, &pi_star));
        sum += u;
        sum_sq += u * u;
    }
    let n = mc_paths as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(MertonOracle {
        pi_star,
        v_star_mc: mean,
        v_star_se: (var / n).sqrt(),
        paths: mc_paths,
    })
}
