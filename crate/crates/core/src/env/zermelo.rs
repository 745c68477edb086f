use std::f64::consts::FRAC_PI_2;

use rand::Rng;

use super::{require, ControlProblem, EnvPath, OuSpec, PathSampler};
use crate::error::Result;
use crate::rng::SimRng;

/// Boat navigation through vertical OU wind around a soft circular obstacle.
///
/// State is `(X, Y, Z_t)`; the control is a heading angle `π_t` in radians,
/// moving the boat by `v_s (sin π_t, cos π_t)` before the wind `Z_{t+1}` is
/// added to `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZermeloParams {
    pub speed: f64,
    pub target: [f64; 2],
    pub start: [f64; 2],
    /// Bounds of the uniform vertical start offset.
    pub offset_low: f64,
    pub offset_high: f64,
    /// Obstacle weight `M`.
    pub obstacle_weight: f64,
    /// Obstacle sharpness `A`.
    pub obstacle_sharpness: f64,
    pub ou: OuSpec,
    pub steps: usize,
}

impl Default for ZermeloParams {
    fn default() -> Self {
        Self {
            speed: 0.8,
            target: [20.0, 0.0],
            start: [-20.0, 0.0],
            offset_low: -1.0,
            offset_high: 1.0,
            obstacle_weight: 10.0,
            obstacle_sharpness: 2.0,
            ou: OuSpec::default(),
            steps: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ZermeloSampler {
    ou: OuSpec,
    steps: usize,
    offset_low: f64,
    offset_high: f64,
}

impl PathSampler for ZermeloSampler {
    fn horizon(&self) -> usize {
        self.steps
    }

    fn env_dim(&self) -> usize {
        1
    }

    fn initial_columns(&self) -> &[&'static str] {
        &["x0", "wind0"]
    }

    fn sample(&self, id: u64, rng: &mut SimRng) -> EnvPath {
        let offset = if self.offset_low == self.offset_high {
            self.offset_low
        } else {
            rng.random_range(self.offset_low..=self.offset_high)
        };
        let (z0, values) = self.ou.sample(self.steps, rng);
        EnvPath {
            id,
            initial: vec![offset, z0],
            values: values.into_iter().map(|z| vec![z]).collect(),
        }
    }
}

/// Soft obstacle `M (1 − 1/(1 + exp(A (1 − ‖p‖²))))` and its derivative with
/// respect to `‖p‖²`.
#[inline]
pub fn obstacle_penalty(weight: f64, sharpness: f64, x: f64, y: f64) -> (f64, f64) {
    let s = sigmoid(sharpness * (1.0 - (x * x + y * y)));
    (weight * s, -weight * sharpness * s * (1.0 - s))
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct ZermeloProblem {
    params: ZermeloParams,
    sampler: ZermeloSampler,
}

impl ZermeloProblem {
    pub fn new(params: ZermeloParams) -> Result<Self> {
        require("steps", params.steps >= 1, "must be at least 1")?;
        require("speed", params.speed > 0.0, "must be positive")?;
        require("obstacle_weight", params.obstacle_weight >= 0.0, "must be non-negative")?;
        require("obstacle_sharpness", params.obstacle_sharpness > 0.0, "must be positive")?;
        require(
            "offset_low",
            params.offset_low <= params.offset_high,
            "must not exceed offset_high",
        )?;
        require(
            "target",
            params.target.iter().chain(&params.start).all(|v| v.is_finite()),
            "target and start must be finite",
        )?;
        params.ou.validate()?;
        let sampler = ZermeloSampler {
            ou: params.ou,
            steps: params.steps,
            offset_low: params.offset_low,
            offset_high: params.offset_high,
        };
        Ok(Self { params, sampler })
    }

    pub fn params(&self) -> &ZermeloParams {
        &self.params
    }

    pub fn penalty(&self, x: &[f64]) -> f64 {
        obstacle_penalty(self.params.obstacle_weight, self.params.obstacle_sharpness, x[0], x[1]).0
    }

    /// Largest possible total obstacle term: every one of the `T + 1`
    /// visited states at the centre of the obstacle.
    pub fn max_total_penalty(&self) -> f64 {
        (self.params.steps + 1) as f64 * self.penalty(&[0.0, 0.0])
    }

    pub fn terminal_distance_sq(&self, x: &[f64]) -> f64 {
        let dx = x[0] - self.params.target[0];
        let dy = x[1] - self.params.target[1];
        dx * dx + dy * dy
    }

    fn add_penalty_grad(&self, x: &[f64], gx: &mut [f64]) {
        let (_, d) =
            obstacle_penalty(self.params.obstacle_weight, self.params.obstacle_sharpness, x[0], x[1]);
        gx[0] += 2.0 * x[0] * d;
        gx[1] += 2.0 * x[1] * d;
    }
}

impl ControlProblem for ZermeloProblem {
    fn name(&self) -> &str {
        "zermelo"
    }

    fn horizon(&self) -> usize {
        self.params.steps
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn sampler(&self) -> &dyn PathSampler {
        &self.sampler
    }

    fn initial_state(&self, path: &EnvPath) -> Vec<f64> {
        let [sx, sy] = self.params.start;
        vec![sx, sy + path.initial[0], path.initial[1]]
    }

    fn transition(&self, _t: usize, x: &[f64], u: &[f64], z: &[f64]) -> Vec<f64> {
        let v = self.params.speed;
        let (s, c) = u[0].sin_cos();
        vec![x[0] + v * s, x[1] + v * c + z[0], z[0]]
    }

    fn transition_vjp(
        &self,
        _t: usize,
        _x: &[f64],
        u: &[f64],
        _z: &[f64],
        adj: &[f64],
        gx: &mut [f64],
        gu: &mut [f64],
    ) {
        let v = self.params.speed;
        let (s, c) = u[0].sin_cos();
        gx[0] += adj[0];
        gx[1] += adj[1];
        gu[0] += v * c * adj[0] - v * s * adj[1];
    }

    fn running_cost(&self, _t: usize, x: &[f64], _u: &[f64]) -> f64 {
        self.penalty(x)
    }

    fn running_cost_grad(&self, _t: usize, x: &[f64], _u: &[f64], gx: &mut [f64], _gu: &mut [f64]) {
        self.add_penalty_grad(x, gx);
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.terminal_distance_sq(x) + self.penalty(x)
    }

    fn terminal_cost_grad(&self, x: &[f64], gx: &mut [f64]) {
        gx[0] += 2.0 * (x[0] - self.params.target[0]);
        gx[1] += 2.0 * (x[1] - self.params.target[1]);
        self.add_penalty_grad(x, gx);
    }

    /// Constant heading along the positive x axis.
    fn reference_control(&self, _t: usize, _x: &[f64]) -> Vec<f64> {
        vec![FRAC_PI_2]
    }

    fn is_trainable(&self, t: usize) -> bool {
        t < self.params.steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn standard() -> ZermeloProblem {
        ZermeloProblem::new(ZermeloParams::default()).unwrap()
    }

    #[test]
    fn penalty_values() {
        let (p, _) = obstacle_penalty(10.0, 2.0, 0.0, 0.0);
        let expected = 10.0 * (1.0 - 1.0 / (1.0 + 2.0f64.exp()));
        assert!((p - expected).abs() < 1e-14);
        assert!((p - 8.8080).abs() < 1e-4);
        let (edge, _) = obstacle_penalty(10.0, 2.0, 0.6, 0.8);
        assert!((edge - 5.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_decreasing_and_bounded() {
        let mut last = f64::INFINITY;
        for i in 0..400 {
            let r = i as f64 * 0.01;
            let (p, d) = obstacle_penalty(10.0, 2.0, r, 0.0);
            assert!(p > 0.0 && p < 10.0);
            assert!(p < last || (r > 3.5 && p <= last));
            assert!(d < 0.0 || p < 1e-12);
            last = p;
        }
        // Deep inside the obstacle the penalty must not overflow.
        assert!(obstacle_penalty(10.0, 2.0, 1e3, 1e3).0.is_finite());
    }

    #[test]
    fn straight_flight_in_calm_water() {
        let p = ZermeloProblem::new(ZermeloParams {
            ou: OuSpec { vartheta: 0.0, z0_low: 0.0, z0_high: 0.0, ..Default::default() },
            offset_low: 0.0,
            offset_high: 0.0,
            ..Default::default()
        })
        .unwrap();
        let path = p.sampler().sample(0, &mut rng::stream(0, &[]));
        let mut x = p.initial_state(&path);
        assert_eq!(x, vec![-20.0, 0.0, 0.0]);
        for t in 0..50 {
            let u = p.reference_control(t, &x);
            let next = p.transition(t, &x, &u, path.z(t + 1));
            assert!((next[0] - x[0] - 0.8).abs() < 1e-12);
            assert!(next[1].abs() < 1e-12);
            x = next;
        }
        assert!((x[0] - 20.0).abs() < 1e-10);
        assert!(p.terminal_distance_sq(&x) < 1e-18);
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(ZermeloProblem::new(ZermeloParams { steps: 0, ..Default::default() }).is_err());
        assert!(ZermeloProblem::new(ZermeloParams { speed: 0.0, ..Default::default() }).is_err());
        let ou = OuSpec { tau: -1.0, ..Default::default() };
        assert!(ZermeloProblem::new(ZermeloParams { ou, ..Default::default() }).is_err());
    }

    #[test]
    fn max_penalty_counts_every_state() {
        let p = standard();
        assert!((p.max_total_penalty() - 51.0 * p.penalty(&[0.0, 0.0])).abs() < 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let p = standard();
        let mut rng = rng::stream(2, &[]);
        let h = 1e-6;
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let u = [rng.random_range(-4.0..4.0)];
            let z = [rng.random_range(-1.0..1.0)];
            let adj: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut gx = [0.0; 3];
            let mut gu = [0.0; 1];
            p.transition_vjp(0, &x, &u, &z, &adj, &mut gx, &mut gu);
            let f = |x: &[f64], u: &[f64]| -> f64 {
                p.transition(0, x, u, &z).iter().zip(&adj).map(|(a, b)| a * b).sum()
            };
            let up = [u[0] + h];
            let um = [u[0] - h];
            assert!((gu[0] - (f(&x, &up) - f(&x, &um)) / (2.0 * h)).abs() < 1e-7);
            for i in 0..3 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                assert!((gx[i] - (f(&xp, &u) - f(&xm, &u)) / (2.0 * h)).abs() < 1e-7);
            }

            let mut gt = [0.0; 3];
            p.terminal_cost_grad(&x, &mut gt);
            let mut gr = [0.0; 3];
            p.running_cost_grad(0, &x, &u, &mut gr, &mut [0.0]);
            for i in 0..3 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                let fd_t = (p.terminal_cost(&xp) - p.terminal_cost(&xm)) / (2.0 * h);
                let fd_r = (p.running_cost(0, &xp, &u) - p.running_cost(0, &xm, &u)) / (2.0 * h);
                assert!((gt[i] - fd_t).abs() < 1e-6 * (1.0 + fd_t.abs()));
                assert!((gr[i] - fd_r).abs() < 1e-6 * (1.0 + fd_r.abs()));
            }
        }
    }

    #[test]
    fn costs_finite_under_fuzz() {
        let p = standard();
        let mut rng = rng::stream(5, &[]);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1e3..1e3)).collect();
            let u = [rng.random_range(-1e3..1e3)];
            let z = [rng.random_range(-1e2..1e2)];
            assert!(p.transition(0, &x, &u, &z).iter().all(|v| v.is_finite()));
            assert!(p.running_cost(0, &x, &u).is_finite());
            assert!(p.terminal_cost(&x).is_finite());
        }
    }
}
