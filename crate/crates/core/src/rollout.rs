//! Trajectory simulation, empirical Q-functions and the adjoint pass.
//!
//! `Q̂_t(x, Z)` is the cost-to-go along the rollout started at `(t, x)`:
//! `Σ_{s=t}^{T-1} c_s(x_s, u_s) + Φ(x_T)`, where each `u_s` comes from the
//! time-`s` ensemble (or the reference control on non-trainable steps).
//! [`grad_time_t`] differentiates the batch mean of `Q̂_t`, started from the
//! reference-controlled state, with respect to the time-`t` particles. Later
//! ensembles are frozen: they receive no gradient but still carry state
//! sensitivity backwards through `∂u_s/∂x`.

use std::io::Write;

use rayon::prelude::*;

use crate::env::{ControlProblem, EnvPath};
use crate::error::{check_dim, Error, Result};
use crate::mfnet::{NetTape, ParamGrad, ParticleEnsemble};

/// Paths per reduction chunk. Fixed so that summation order does not depend
/// on the thread count.
const CHUNK: usize = 8;

/// One ensemble per time step; `None` on steps driven by the reference
/// control (or not yet trained).
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsVector {
    ensembles: Vec<Option<ParticleEnsemble>>,
}

impl GibbsVector {
    pub fn empty(horizon: usize) -> Self {
        Self {
            ensembles: vec![None; horizon],
        }
    }

    pub fn from_ensembles(ensembles: Vec<Option<ParticleEnsemble>>) -> Self {
        Self { ensembles }
    }

    pub fn horizon(&self) -> usize {
        self.ensembles.len()
    }

    pub fn get(&self, t: usize) -> Option<&ParticleEnsemble> {
        self.ensembles.get(t).and_then(Option::as_ref)
    }

    pub fn set(&mut self, t: usize, ensemble: ParticleEnsemble) {
        self.ensembles[t] = Some(ensemble);
    }

    pub(crate) fn get_mut(&mut self, t: usize) -> Option<&mut ParticleEnsemble> {
        self.ensembles.get_mut(t).and_then(Option::as_mut)
    }

    pub fn ensembles(&self) -> &[Option<ParticleEnsemble>] {
        &self.ensembles
    }

    /// Checks the horizon and the dimensions of every present ensemble.
    pub fn validate(&self, problem: &dyn ControlProblem) -> Result<()> {
        check_dim("gibbs vector horizon", problem.horizon(), self.horizon())?;
        for e in self.ensembles.iter().flatten() {
            check_dim("ensemble state dim", problem.state_dim(), e.state_dim())?;
            check_dim("ensemble control dim", problem.control_dim(), e.control_dim())?;
        }
        Ok(())
    }
}

/// Forward record of one rollout from `(t0, x_{t0})` to `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTape {
    pub t0: usize,
    /// `x_{t0}, .., x_T`.
    pub states: Vec<Vec<f64>>,
    /// `u_{t0}, .., u_{T-1}`.
    pub controls: Vec<Vec<f64>>,
    /// Network tapes for steps driven by an ensemble.
    pub net_tapes: Vec<Option<NetTape>>,
    /// `Z_{t0+1}, .., Z_T`.
    pub env: Vec<Vec<f64>>,
    /// Adjusted costs `c*_s`; the last entry includes the terminal cost.
    pub costs: Vec<f64>,
}

impl RolloutTape {
    pub fn terminal_state(&self) -> &[f64] {
        self.states.last().expect("rollout has at least one state")
    }
}

fn control_at(
    problem: &dyn ControlProblem,
    gibbs: &GibbsVector,
    t: usize,
    x: &[f64],
) -> Result<(Vec<f64>, Option<NetTape>)> {
    if problem.is_trainable(t) {
        let ens = gibbs.get(t).ok_or(Error::MissingEnsemble { t })?;
        let (u, tape) = ens.forward_with_tape(x)?;
        Ok((u, Some(tape)))
    } else {
        Ok((problem.reference_control(t, x), None))
    }
}

/// State at time `t` when following the reference control from the start.
pub fn reference_state(problem: &dyn ControlProblem, path: &EnvPath, t: usize) -> Vec<f64> {
    assert!(t <= problem.horizon(), "t = {t} beyond horizon");
    let mut x = problem.initial_state(path);
    for s in 0..t {
        let u = problem.reference_control(s, &x);
        x = problem.transition(s, &x, &u, path.z(s + 1));
    }
    x
}

/// Empirical Q-function `Q̂_t(x, m_t, .., m_{T-1}, Z)` and its tape.
pub fn q_hat(
    problem: &dyn ControlProblem,
    gibbs: &GibbsVector,
    path: &EnvPath,
    t: usize,
    x: &[f64],
) -> Result<(f64, RolloutTape)> {
    let horizon = problem.horizon();
    check_dim("initial state", problem.state_dim(), x.len())?;
    check_dim("path length", horizon, path.horizon())?;
    check_dim("gibbs vector horizon", horizon, gibbs.horizon())?;
    if t >= horizon {
        return Err(Error::InvalidParameter {
            name: "t",
            reason: format!("must be below the horizon {horizon}"),
        });
    }
    let steps = horizon - t;
    let mut tape = RolloutTape {
        t0: t,
        states: Vec::with_capacity(steps + 1),
        controls: Vec::with_capacity(steps),
        net_tapes: Vec::with_capacity(steps),
        env: Vec::with_capacity(steps),
        costs: Vec::with_capacity(steps),
    };
    let mut x = x.to_vec();
    let mut total = 0.0;
    for s in t..horizon {
        let (u, net) = control_at(problem, gibbs, s, &x)?;
        let z = path.z(s + 1);
        let mut cost = problem.running_cost(s, &x, &u);
        let next = problem.transition(s, &x, &u, z);
        if s + 1 == horizon {
            cost += problem.terminal_cost(&next);
        }
        total += cost;
        tape.states.push(x);
        tape.controls.push(u);
        tape.net_tapes.push(net);
        tape.env.push(z.to_vec());
        tape.costs.push(cost);
        x = next;
    }
    tape.states.push(x);
    Ok((total, tape))
}

/// Mean of `Q̂_t` over `paths`, each started from its reference state.
pub fn batch_risk(
    problem: &dyn ControlProblem,
    gibbs: &GibbsVector,
    paths: &[EnvPath],
    t: usize,
) -> Result<f64> {
    if paths.is_empty() {
        return Err(Error::EmptyPaths);
    }
    let values = paths
        .par_iter()
        .map(|p| q_hat(problem, gibbs, p, t, &reference_state(problem, p, t)).map(|(q, _)| q))
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum::<f64>() / paths.len() as f64)
}

/// Accumulates `scale · ∂Q̂_t/∂θ` (time-`t` particles) for one rollout.
fn accumulate_adjoint(
    problem: &dyn ControlProblem,
    gibbs: &GibbsVector,
    tape: &RolloutTape,
    ensemble: &ParticleEnsemble,
    scale: f64,
    grad: &mut ParamGrad,
) -> Result<()> {
    let t = tape.t0;
    let d = problem.state_dim();
    let c = problem.control_dim();
    let mut adj = vec![0.0; d];
    problem.terminal_cost_grad(tape.terminal_state(), &mut adj);
    for i in (0..tape.controls.len()).rev() {
        let s = t + i;
        let x = &tape.states[i];
        let u = &tape.controls[i];
        let mut gx = vec![0.0; d];
        let mut gu = vec![0.0; c];
        problem.running_cost_grad(s, x, u, &mut gx, &mut gu);
        problem.transition_vjp(s, x, u, &tape.env[i], &adj, &mut gx, &mut gu);
        if i == 0 {
            let net = tape.net_tapes[0]
                .as_ref()
                .ok_or(Error::TapeMismatch("time-t step has no network tape"))?;
            return ensemble.accumulate_param_grad(x, net, &gu, scale, grad);
        }
        match &tape.net_tapes[i] {
            Some(net) => {
                let frozen = gibbs.get(s).ok_or(Error::MissingEnsemble { t: s })?;
                let via_control = frozen.backward_state(x, net, &gu)?;
                for (g, v) in gx.iter_mut().zip(via_control) {
                    *g += v;
                }
            }
            None => problem.reference_control_vjp(s, x, &gu, &mut gx),
        }
        adj = gx;
    }
    unreachable!("rollout from a trainable step has at least one control")
}

/// Batch risk at `t` together with the per-particle gradient of
/// `r · batch_risk` with respect to the time-`t` ensemble.
pub fn risk_and_grad(
    problem: &dyn ControlProblem,
    gibbs: &GibbsVector,
    paths: &[EnvPath],
    t: usize,
) -> Result<(f64, ParamGrad)> {
    if paths.is_empty() {
        return Err(Error::EmptyPaths);
    }
    if !problem.is_trainable(t) {
        return Err(Error::NotTrainable { t });
    }
    let ensemble = gibbs.get(t).ok_or(Error::MissingEnsemble { t })?;
    let r = ensemble.width();
    let scale = r as f64 / paths.len() as f64;
    let empty = || ParamGrad::zeros(r, ensemble.state_dim(), ensemble.control_dim());
    let partials = paths
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<(f64, ParamGrad)> {
            let mut grad = empty();
            let mut risk = 0.0;
            for path in chunk {
                let x = reference_state(problem, path, t);
                let (q, tape) = q_hat(problem, gibbs, path, t, &x)?;
                risk += q;
                accumulate_adjoint(problem, gibbs, &tape, ensemble, scale, &mut grad)?;
            }
            Ok((risk, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = empty();
    let mut risk = 0.0;
    for (q, g) in &partials {
        risk += q;
        grad.add_scaled(g, 1.0);
    }
    Ok((risk / paths.len() as f64, grad))
}

/// Gradient of `r · batch_risk(t)` with respect to each time-`t` particle.
pub fn grad_time_t(
    problem: &dyn ControlProblem,
    gibbs: &GibbsVector,
    paths: &[EnvPath],
    t: usize,
) -> Result<ParamGrad> {
    risk_and_grad(problem, gibbs, paths, t).map(|(_, g)| g)
}

/// Full rollout from the initial state of each path, as CSV:
/// `path_id,t,x0..x{d-1},u0..u{c-1}` with rows `t = 0..=T`; the control
/// columns of the terminal row are empty.
pub fn write_trajectories_csv<W: Write>(
    problem: &dyn ControlProblem,
    gibbs: &GibbsVector,
    paths: &[EnvPath],
    mut out: W,
) -> Result<()> {
    let d = problem.state_dim();
    let c = problem.control_dim();
    writeln!(out, "# trajectories v1")?;
    let mut header = vec!["path_id".to_string(), "t".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    header.extend((0..c).map(|i| format!("u{i}")));
    writeln!(out, "{}", header.join(","))?;
    for path in paths {
        let (_, tape) = q_hat(problem, gibbs, path, 0, &problem.initial_state(path))?;
        for (t, x) in tape.states.iter().enumerate() {
            let mut row = vec![path.id.to_string(), t.to_string()];
            row.extend(x.iter().map(|v| format!("{v:?}")));
            match tape.controls.get(t) {
                Some(u) => row.extend(u.iter().map(|v| format!("{v:?}"))),
                None => row.extend(std::iter::repeat_n(String::new(), c)),
            }
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}
