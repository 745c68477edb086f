//! Environment contract and the benchmark problems.
//!
//! A [`ControlProblem`] supplies the dynamics `x' = h_t(x, u, z)`, running
//! and terminal costs together with their vector-Jacobian products, a
//! reference control, and a [`PathSampler`] for the uncontrolled environment.
//! Sampled [`EnvPath`]s are the only source of randomness in a rollout.

mod merton;
mod ou;
mod zermelo;
mod zero;

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

pub use merton::{merton_oracle, MertonOracle, MertonParams, MertonProblem, MertonSampler};
pub use ou::OuSpec;
pub use zermelo::{obstacle_penalty, ZermeloParams, ZermeloProblem, ZermeloSampler};
pub use zero::ZeroCostProblem;

/// One sampled trajectory `Z_1, .., Z_T` of the environment.
///
/// `initial` carries any per-path randomness of the initial state (e.g. a
/// random start offset); it is empty for problems with a fixed start.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvPath {
    pub id: u64,
    pub initial: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl EnvPath {
    /// `Z_t` for `t` in `1..=T`.
    #[inline]
    pub fn z(&self, t: usize) -> &[f64] {
        &self.values[t - 1]
    }

    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.initial.iter().all(|v| v.is_finite())
            && self.values.iter().flatten().all(|v| v.is_finite())
    }
}

pub trait PathSampler: Send + Sync {
    fn horizon(&self) -> usize;

    fn env_dim(&self) -> usize;

    /// Column names of [`EnvPath::initial`].
    fn initial_columns(&self) -> &[&'static str] {
        &[]
    }

    fn sample(&self, id: u64, rng: &mut SimRng) -> EnvPath;
}

/// Draws `count` independent paths with ids `first_id..first_id + count`.
pub fn sample_paths(
    sampler: &dyn PathSampler,
    count: usize,
    first_id: u64,
    rng: &mut SimRng,
) -> Vec<EnvPath> {
    (0..count as u64)
        .map(|i| sampler.sample(first_id + i, rng))
        .collect()
}

/// Train/test split drawn from one sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<EnvPath>,
    pub test: Vec<EnvPath>,
    pub seed: u64,
}

impl Dataset {
    /// Train paths get ids `0..n`, test paths `n..n + n_test`. The two sets
    /// use separate streams, so the training set does not depend on `n_test`.
    pub fn generate(sampler: &dyn PathSampler, n: usize, n_test: usize, seed: u64) -> Self {
        let train = sample_paths(sampler, n, 0, &mut rng::stream(seed, &[0]));
        let test = sample_paths(sampler, n_test, n as u64, &mut rng::stream(seed, &[1]));
        Self { train, test, seed }
    }
}

/// Writes paths as CSV: a `# env-paths v1` comment, a header row
/// `path_id,t,z0,..,z{k-1}[,initial columns]`, then one row per `t = 1..T`.
/// Initial-state columns repeat the path's value on every row.
pub fn write_paths_csv<W: Write>(
    sampler: &dyn PathSampler,
    paths: &[EnvPath],
    mut out: W,
) -> Result<()> {
    writeln!(out, "# env-paths v1")?;
    let mut header = vec!["path_id".to_string(), "t".to_string()];
    header.extend((0..sampler.env_dim()).map(|i| format!("z{i}")));
    header.extend(sampler.initial_columns().iter().map(|s| s.to_string()));
    writeln!(out, "{}", header.join(","))?;
    for p in paths {
        for (t, z) in p.values.iter().enumerate() {
            let mut row = vec![p.id.to_string(), (t + 1).to_string()];
            row.extend(z.iter().map(|v| format!("{v:?}")));
            row.extend(p.initial.iter().map(|v| format!("{v:?}")));
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

pub fn read_paths_csv<R: BufRead>(sampler: &dyn PathSampler, input: R) -> Result<Vec<EnvPath>> {
    let k = sampler.env_dim();
    let n_init = sampler.initial_columns().len();
    let mut paths: Vec<EnvPath> = Vec::new();
    let mut seen_header = false;
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            seen_header = true;
            let cols = line.split(',').count();
            if cols != 2 + k + n_init {
                return Err(Error::Format(format!(
                    "header has {cols} columns, expected {}",
                    2 + k + n_init
                )));
            }
            continue;
        }
        let bad = |msg: String| Error::Format(format!("line {}: {msg}", lineno + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + k + n_init {
            return Err(bad(format!("{} columns", fields.len())));
        }
        let id: u64 = fields[0].parse().map_err(|e| bad(format!("{e}")))?;
        let t: usize = fields[1].parse().map_err(|e| bad(format!("{e}")))?;
        let nums = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("{e}")))?;
        let (z, init) = nums.split_at(k);
        match paths.last_mut() {
            Some(p) if p.id == id => {
                if t != p.values.len() + 1 {
                    return Err(bad(format!("time index {t} out of order")));
                }
                p.values.push(z.to_vec());
            }
            _ => {
                if t != 1 {
                    return Err(bad(format!("path {id} starts at t={t}")));
                }
                paths.push(EnvPath {
                    id,
                    initial: init.to_vec(),
                    values: vec![z.to_vec()],
                });
            }
        }
    }
    if let Some(p) = paths.iter().find(|p| p.values.len() != sampler.horizon()) {
        return Err(Error::Format(format!(
            "path {} has {} steps, expected {}",
            p.id,
            p.values.len(),
            sampler.horizon()
        )));
    }
    Ok(paths)
}

/// A discrete-time control problem driven by an uncontrolled environment.
///
/// Vector-Jacobian methods *accumulate* into their output slices.
pub trait ControlProblem: Send + Sync {
    fn name(&self) -> &str;

    fn horizon(&self) -> usize;

    fn state_dim(&self) -> usize;

    fn control_dim(&self) -> usize;

    fn env_dim(&self) -> usize {
        self.sampler().env_dim()
    }

    fn sampler(&self) -> &dyn PathSampler;

    fn initial_state(&self, path: &EnvPath) -> Vec<f64>;

    /// `h_t(x, u, z)` with `z = Z_{t+1}`.
    fn transition(&self, t: usize, x: &[f64], u: &[f64], z: &[f64]) -> Vec<f64>;

    /// `gx += (∂h/∂x)ᵀ adj`, `gu += (∂h/∂u)ᵀ adj`.
    #[allow(clippy::too_many_arguments)]
    fn transition_vjp(
        &self,
        t: usize,
        x: &[f64],
        u: &[f64],
        z: &[f64],
        adj: &[f64],
        gx: &mut [f64],
        gu: &mut [f64],
    );

    fn running_cost(&self, t: usize, x: &[f64], u: &[f64]) -> f64;

    fn running_cost_grad(&self, t: usize, x: &[f64], u: &[f64], gx: &mut [f64], gu: &mut [f64]);

    fn terminal_cost(&self, x: &[f64]) -> f64;

    fn terminal_cost_grad(&self, x: &[f64], gx: &mut [f64]);

    fn reference_control(&self, t: usize, x: &[f64]) -> Vec<f64>;

    /// `gx += (∂ref_t/∂x)ᵀ g_u`. The default suits state-independent
    /// reference controls.
    fn reference_control_vjp(&self, _t: usize, _x: &[f64], _g_u: &[f64], _gx: &mut [f64]) {}

    fn is_trainable(&self, t: usize) -> bool;

    fn trainable_steps(&self) -> Vec<usize> {
        (0..self.horizon()).filter(|&t| self.is_trainable(t)).collect()
    }
}

pub(crate) fn require(name: &'static str, ok: bool, reason: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            reason: reason.into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn datasets_are_deterministic() {
        let p = ZermeloProblem::new(ZermeloParams::default()).unwrap();
        let a = Dataset::generate(p.sampler(), 5, 7, 42);
        let b = Dataset::generate(p.sampler(), 5, 7, 42);
        assert_eq!(a, b);
        let c = Dataset::generate(p.sampler(), 5, 3, 42);
        assert_eq!(a.train, c.train);
        let ids: Vec<u64> = a.train.iter().chain(&a.test).map(|p| p.id).collect();
        assert_eq!(ids, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn paths_csv_round_trip() {
        let z = ZermeloProblem::new(ZermeloParams {
            steps: 4,
            ..Default::default()
        })
        .unwrap();
        let m = MertonProblem::new(MertonParams::default()).unwrap();
        let problems: [&dyn ControlProblem; 2] = [&z, &m];
        for p in problems {
            let paths = sample_paths(p.sampler(), 3, 10, &mut rng::stream(1, &[]));
            let mut buf = Vec::new();
            write_paths_csv(p.sampler(), &paths, &mut buf).unwrap();
            let back = read_paths_csv(p.sampler(), buf.as_slice()).unwrap();
            assert_eq!(back, paths);
        }
    }

    #[test]
    fn zermelo_csv_has_start_offset_column() {
        let z = ZermeloProblem::new(ZermeloParams {
            steps: 2,
            ..Default::default()
        })
        .unwrap();
        let paths = sample_paths(z.sampler(), 1, 0, &mut rng::stream(1, &[]));
        let mut buf = Vec::new();
        write_paths_csv(z.sampler(), &paths, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "path_id,t,z0,x0,wind0");
    }

    #[test]
    fn short_paths_are_rejected() {
        let z = ZermeloProblem::new(ZermeloParams {
            steps: 3,
            ..Default::default()
        })
        .unwrap();
        let text = "path_id,t,z0,x0,wind0\n0,1,0.1,0.0,0.0\n0,2,0.2,0.0,0.0\n";
        assert!(read_paths_csv(z.sampler(), text.as_bytes()).is_err());
    }
}
