use super::{ControlProblem, EnvPath, PathSampler};
use crate::rng::SimRng;

/// Problem with identically zero costs and a frozen state.
///
/// The regularised objective then reduces to the entropy term alone, so the
/// trained particles should sample the Gibbs reference measure.
#[derive(Debug, Clone)]
pub struct ZeroCostProblem {
    state_dim: usize,
    control_dim: usize,
    sampler: ZeroSampler,
}

#[derive(Debug, Clone)]
struct ZeroSampler {
    horizon: usize,
}

impl PathSampler for ZeroSampler {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn env_dim(&self) -> usize {
        1
    }

    fn sample(&self, id: u64, _rng: &mut SimRng) -> EnvPath {
        EnvPath {
            id,
            initial: Vec::new(),
            values: vec![vec![0.0]; self.horizon],
        }
    }
}

impl ZeroCostProblem {
    pub fn new(state_dim: usize, control_dim: usize, horizon: usize) -> Self {
        assert!(state_dim >= 1 && control_dim >= 1 && horizon >= 1);
        Self {
            state_dim,
            control_dim,
            sampler: ZeroSampler { horizon },
        }
    }
}

impl ControlProblem for ZeroCostProblem {
    fn name(&self) -> &str {
        "zero-cost"
    }

    fn horizon(&self) -> usize {
        self.sampler.horizon
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn control_dim(&self) -> usize {
        self.control_dim
    }

    fn sampler(&self) -> &dyn PathSampler {
        &self.sampler
    }

    fn initial_state(&self, _path: &EnvPath) -> Vec<f64> {
        vec![1.0; self.state_dim]
    }

    fn transition(&self, _t: usize, x: &[f64], _u: &[f64], _z: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn transition_vjp(
        &self,
        _t: usize,
        _x: &[f64],
        _u: &[f64],
        _z: &[f64],
        adj: &[f64],
        gx: &mut [f64],
        _gu: &mut [f64],
    ) {
        for (g, a) in gx.iter_mut().zip(adj) {
            *g += a;
        }
    }

    fn running_cost(&self, _t: usize, _x: &[f64], _u: &[f64]) -> f64 {
        0.0
    }

    fn running_cost_grad(&self, _t: usize, _x: &[f64], _u: &[f64], _gx: &mut [f64], _gu: &mut [f64]) {}

    fn terminal_cost(&self, _x: &[f64]) -> f64 {
        0.0
    }

    fn terminal_cost_grad(&self, _x: &[f64], _gx: &mut [f64]) {}

    fn reference_control(&self, _t: usize, _x: &[f64]) -> Vec<f64> {
        vec![0.0; self.control_dim]
    }

    fn is_trainable(&self, t: usize) -> bool {
        t < self.sampler.horizon
    }
}
