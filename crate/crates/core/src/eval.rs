//! Generalisation-error estimation, experiment grids and oracle comparisons.
//!
//! Everything here works with losses (the quantity the trainer minimises), so
//! a positive generalisation estimate always means the control does worse
//! out of sample than in sample.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::env::{ControlProblem, Dataset, EnvPath, MertonOracle, MertonProblem, ZermeloProblem};
use crate::error::{Error, Result};
use crate::rng;
use crate::rollout::{q_hat, GibbsVector};
use crate::trainer::{gibbs_train_with, Telemetry, TrainConfig};

/// Mean and standard error of the full-horizon loss over `paths`.
pub fn mean_loss(
    problem: &dyn ControlProblem,
    gibbs: &GibbsVector,
    paths: &[EnvPath],
) -> Result<(f64, f64)> {
    if paths.is_empty() {
        return Err(Error::EmptyPaths);
    }
    let losses = paths
        .par_iter()
        .map(|p| q_hat(problem, gibbs, p, 0, &problem.initial_state(p)).map(|(q, _)| q))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_and_se(&losses))
}

pub(crate) fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenEstimate {
    pub in_sample: f64,
    pub out_sample: f64,
    pub gen: f64,
}

/// Out-of-sample minus in-sample mean loss.
pub fn gen_estimate(
    problem: &dyn ControlProblem,
    gibbs: &GibbsVector,
    train: &[EnvPath],
    test: &[EnvPath],
) -> Result<GenEstimate> {
    let (in_sample, _) = mean_loss(problem, gibbs, train)?;
    let (out_sample, _) = mean_loss(problem, gibbs, test)?;
    Ok(GenEstimate {
        in_sample,
        out_sample,
        gen: out_sample - in_sample,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenReport {
    pub trial: usize,
    pub n: usize,
    pub r: usize,
    pub regularised: bool,
    pub in_sample: f64,
    pub out_sample: f64,
    pub gen: f64,
    pub seed: u64,
    pub wall_time_s: f64,
    /// Trainer diagnostic when the cell aborted; the loss fields are NaN.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub ns: Vec<usize>,
    pub rs: Vec<usize>,
    pub trials: usize,
    pub n_test: usize,
}

/// One finished grid cell, handed to the sink before it is dropped.
pub struct CellResult<'a> {
    pub report: &'a GenReport,
    pub dataset: &'a Dataset,
    pub gibbs: Option<&'a GibbsVector>,
    pub telemetry: &'a Telemetry,
}

/// Seed for the dataset of `(n, trial)`; shared by every width.
pub fn cell_seed(master: u64, n: usize, trial: usize) -> u64 {
    rng::derive_seed(master, &[n as u64, trial as u64])
}

/// Trains one control per `(n, r, trial)` cell on a fresh dataset and
/// reports its generalisation estimate. Reports come back in
/// `(n, r, trial)` order; aborted cells are reported, not fatal.
pub fn run_grid(
    problem: &dyn ControlProblem,
    spec: &GridSpec,
    base: &TrainConfig,
    master_seed: u64,
) -> Result<Vec<GenReport>> {
    run_grid_with(problem, spec, base, master_seed, 100, &|_| Ok(()))
}

pub fn run_grid_with(
    problem: &dyn ControlProblem,
    spec: &GridSpec,
    base: &TrainConfig,
    master_seed: u64,
    telemetry_every: usize,
    sink: &(dyn Fn(CellResult<'_>) -> Result<()> + Sync),
) -> Result<Vec<GenReport>> {
    if spec.trials == 0 {
        return Err(Error::InvalidParameter {
            name: "trials",
            reason: "must be at least 1".into(),
        });
    }
    if spec.ns.contains(&0) || spec.n_test == 0 {
        return Err(Error::InvalidParameter {
            name: "ns",
            reason: "training and test sizes must be positive".into(),
        });
    }
    base.validate()?;
    let cells: Vec<(usize, usize, usize)> = spec
        .ns
        .iter()
        .flat_map(|&n| {
            spec.rs
                .iter()
                .flat_map(move |&r| (0..spec.trials).map(move |trial| (n, r, trial)))
        })
        .collect();
    cells
        .par_iter()
        .map(|&(n, r, trial)| {
            let seed = cell_seed(master_seed, n, trial);
            let config = TrainConfig {
                width: r,
                seed: rng::derive_seed(seed, &[r as u64]),
                ..base.clone()
            };
            let start = Instant::now();
            let dataset = Dataset::generate(problem.sampler(), n, spec.n_test, seed);
            let epochs = config.epoch_cap.map_or(config.epochs, |c| c.min(config.epochs));
            let mut telemetry = Telemetry::new(telemetry_every, epochs);
            let trained = gibbs_train_with(problem, &dataset.train, &config, &mut telemetry)
                .and_then(|g| {
                    gen_estimate(problem, &g, &dataset.train, &dataset.test).map(|e| (g, e))
                });
            let (gibbs, est, error) = match trained {
                Ok((g, e)) => (Some(g), e, None),
                Err(err) => (
                    None,
                    GenEstimate {
                        in_sample: f64::NAN,
                        out_sample: f64::NAN,
                        gen: f64::NAN,
                    },
                    Some(err.to_string()),
                ),
            };
            let report = GenReport {
                trial,
                n,
                r,
                regularised: config.regularised,
                in_sample: est.in_sample,
                out_sample: est.out_sample,
                gen: est.gen,
                seed,
                wall_time_s: start.elapsed().as_secs_f64(),
                error,
            };
            sink(CellResult {
                report: &report,
                dataset: &dataset,
                gibbs: gibbs.as_ref(),
                telemetry: &telemetry,
            })?;
            Ok(report)
        })
        .collect()
}

/// Median ignoring NaN; infinities count. `None` when nothing is left.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub n: usize,
    pub median_abs_gen: f64,
    pub count: usize,
}

/// Median `|gen|` per training size, in increasing `n`. Aborted (NaN)
/// reports are skipped; infinite estimates are kept.
pub fn summarise_by_n(reports: &[GenReport]) -> Vec<SummaryRow> {
    let mut ns: Vec<usize> = reports.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .filter_map(|n| {
            let abs: Vec<f64> = reports
                .iter()
                .filter(|r| r.n == n && !r.gen.is_nan())
                .map(|r| r.gen.abs())
                .collect();
            median(&abs).map(|m| SummaryRow {
                n,
                median_abs_gen: m,
                count: abs.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Least-squares fit of `log median|gen|` against `log n`.
///
/// Each group is `(n, gen estimates)`; only finite estimates count.
pub fn slope_fit(groups: &[(usize, Vec<f64>)]) -> Result<SlopeFit> {
    let mut points = Vec::new();
    for (n, gens) in groups {
        let abs: Vec<f64> = gens.iter().filter(|g| g.is_finite()).map(|g| g.abs()).collect();
        if let Some(m) = median(&abs) {
            points.push((*n, m));
        }
    }
    points.sort_by_key(|p| p.0);
    points.dedup_by_key(|p| p.0);
    if points.len() < 2 {
        return Err(Error::UndefinedSlope(
            "need at least two distinct n with a finite estimate".into(),
        ));
    }
    if let Some((n, _)) = points.iter().find(|(_, m)| *m <= 0.0) {
        return Err(Error::UndefinedSlope(format!("median |gen| is zero at n = {n}")));
    }
    let xs: Vec<f64> = points.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, m)| m.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(SlopeFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// Groups finite-or-infinite estimates by `n` for [`slope_fit`].
pub fn group_by_n(reports: &[GenReport]) -> Vec<(usize, Vec<f64>)> {
    let mut ns: Vec<usize> = reports.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let gens = reports.iter().filter(|r| r.n == n).map(|r| r.gen).collect();
            (n, gens)
        })
        .collect()
}

/// `gen_results.csv`. Wall times are written only when `with_wall_time`
/// is set (0 otherwise), keeping the file reproducible byte-for-byte.
pub fn write_gen_csv<W: Write>(reports: &[GenReport], with_wall_time: bool, mut out: W) -> Result<()> {
    writeln!(out, "# gen_results v1")?;
    writeln!(out, "trial,n,r,regularised,in_sample,out_sample,gen,seed,wall_time_s")?;
    for r in reports {
        let wall = if with_wall_time { r.wall_time_s } else { 0.0 };
        writeln!(
            out,
            "{},{},{},{},{:?},{:?},{:?},{},{:?}",
            r.trial, r.n, r.r, r.regularised, r.in_sample, r.out_sample, r.gen, r.seed, wall
        )?;
    }
    Ok(())
}

/// `slope_summary.csv`.
pub fn write_slope_summary<W: Write>(rows: &[SummaryRow], mut out: W) -> Result<()> {
    writeln!(out, "# slope_summary v1")?;
    writeln!(out, "n,median_abs_gen,count")?;
    for row in rows {
        writeln!(out, "{},{:?},{}", row.n, row.median_abs_gen, row.count)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapEstimate {
    /// Reward of the evaluated control minus the oracle reward.
    pub gap: f64,
    /// Combined standard error of the two Monte-Carlo means.
    pub se: f64,
    pub reward: f64,
    pub reward_se: f64,
}

/// Expected-utility shortfall of `gibbs` relative to the Merton optimum.
pub fn merton_gap(
    problem: &MertonProblem,
    gibbs: &GibbsVector,
    oracle: &MertonOracle,
    eval_paths: &[EnvPath],
) -> Result<GapEstimate> {
    let (loss, loss_se) = mean_loss(problem, gibbs, eval_paths)?;
    let reward = -loss;
    Ok(GapEstimate {
        gap: reward - oracle.v_star_mc,
        se: (loss_se * loss_se + oracle.v_star_se * oracle.v_star_se).sqrt(),
        reward,
        reward_se: loss_se,
    })
}

/// Per-path decomposition of a Zermelo rollout from the initial state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZermeloOutcome {
    pub path_id: u64,
    pub terminal_distance_sq: f64,
    /// Obstacle term summed over all `T + 1` visited states.
    pub obstacle: f64,
    pub total: f64,
}

pub fn zermelo_outcomes(
    problem: &ZermeloProblem,
    gibbs: &GibbsVector,
    paths: &[EnvPath],
) -> Result<Vec<ZermeloOutcome>> {
    paths
        .par_iter()
        .map(|p| {
            let (total, tape) = q_hat(problem, gibbs, p, 0, &problem.initial_state(p))?;
            let obstacle = tape.states.iter().map(|x| problem.penalty(x)).sum();
            Ok(ZermeloOutcome {
                path_id: p.id,
                terminal_distance_sq: problem.terminal_distance_sq(tape.terminal_state()),
                obstacle,
                total,
            })
        })
        .collect()
}

pub fn write_zermelo_outcomes<W: Write>(
    split: &str,
    outcomes: &[ZermeloOutcome],
    mut out: W,
) -> Result<()> {
    for o in outcomes {
        writeln!(
            out,
            "{split},{},{:?},{:?},{:?}",
            o.path_id, o.terminal_distance_sq, o.obstacle, o.total
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{merton_oracle, MertonParams, ZermeloParams};
    use crate::mfnet::{Activation, ParticleEnsemble};

    fn report(n: usize, gen: f64) -> GenReport {
        GenReport {
            trial: 0,
            n,
            r: 1,
            regularised: true,
            in_sample: 0.0,
            out_sample: gen,
            gen,
            seed: 0,
            wall_time_s: 0.0,
            error: None,
        }
    }

    #[test]
    fn exact_power_laws() {
        let ns = [8usize, 64, 512, 1000];
        for (exponent, f) in [
            (-1.0, Box::new(|n: f64| 3.0 / n) as Box<dyn Fn(f64) -> f64>),
            (0.0, Box::new(|_| 0.2)),
            (-0.5, Box::new(|n: f64| 0.7 / n.sqrt())),
        ] {
            let groups: Vec<(usize, Vec<f64>)> =
                ns.iter().map(|&n| (n, vec![f(n as f64), -f(n as f64)])).collect();
            let fit = slope_fit(&groups).unwrap();
            assert!((fit.slope - exponent).abs() < 1e-9, "{fit:?}");
        }
    }

    #[test]
    fn slope_errors() {
        assert!(slope_fit(&[(8, vec![0.1])]).is_err());
        assert!(slope_fit(&[(8, vec![0.0]), (16, vec![0.0])]).is_err());
        assert!(slope_fit(&[(8, vec![f64::NAN]), (16, vec![0.1])]).is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[f64::NAN]), None);
        assert_eq!(median(&[1.0, f64::INFINITY, 5.0]), Some(5.0));
    }

    #[test]
    fn summary_skips_aborts() {
        let rows = summarise_by_n(&[report(8, 0.5), report(8, -0.1), report(8, f64::NAN), report(64, 0.01)]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].count, 2);
        assert!((rows[0].median_abs_gen - 0.3).abs() < 1e-15);
    }

    #[test]
    fn gen_identical_sets_and_antisymmetry() {
        let z = ZermeloProblem::new(ZermeloParams { steps: 5, ..Default::default() }).unwrap();
        let mut g = GibbsVector::empty(5);
        for t in 0..5 {
            g.set(t, ParticleEnsemble::constant(&[1.4], 3, Activation::Tanh));
        }
        let a = crate::env::sample_paths(z.sampler(), 6, 0, &mut rng::stream(1, &[]));
        let b = crate::env::sample_paths(z.sampler(), 9, 6, &mut rng::stream(2, &[]));
        let same = gen_estimate(&z, &g, &a, &a).unwrap();
        assert_eq!(same.gen, 0.0);
        let fwd = gen_estimate(&z, &g, &a, &b).unwrap();
        let back = gen_estimate(&z, &g, &b, &a).unwrap();
        assert_eq!(fwd.gen, -back.gen);
        assert_eq!(fwd.gen, fwd.out_sample - fwd.in_sample);
    }

    #[test]
    fn merton_gap_of_zero_holding_is_negative() {
        let m = MertonProblem::new(MertonParams::default()).unwrap();
        let oracle = merton_oracle(&m, 50_000, &mut rng::stream(1, &[])).unwrap();
        let paths = crate::env::sample_paths(m.sampler(), 50_000, 0, &mut rng::stream(2, &[]));
        let mut g = GibbsVector::empty(2);
        g.set(1, ParticleEnsemble::constant(&[0.0; 10], 11, Activation::Tanh));
        let gap = merton_gap(&m, &g, &oracle, &paths).unwrap();
        // Independent value: with zero holding, E[exp(−Y_2)] = E[exp(−Y_1)].
        let c = 0.1f64;
        let zero_reward = 1.0 - (-1.0f64).exp() * (c.sinh() / c).powi(10);
        assert!((gap.reward - zero_reward).abs() < 3.0 * gap.reward_se);
        assert!(gap.gap + 3.0 * gap.se < 0.0, "{gap:?}");
    }

    #[test]
    fn grid_cardinality_and_determinism() {
        let m = MertonProblem::new(MertonParams::default()).unwrap();
        let spec = GridSpec { ns: vec![4], rs: vec![3], trials: 1, n_test: 20 };
        let base = TrainConfig { epochs: 5, ..Default::default() };
        let a = run_grid(&m, &spec, &base, 9).unwrap();
        assert_eq!(a.len(), 1);
        let b = run_grid(&m, &spec, &base, 9).unwrap();
        let strip = |v: &[GenReport]| -> Vec<GenReport> {
            v.iter().map(|r| GenReport { wall_time_s: 0.0, ..r.clone() }).collect()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn csv_layouts() {
        let mut buf = Vec::new();
        write_gen_csv(&[report(8, 0.25)], false, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(2).unwrap(), "0,8,1,true,0.0,0.25,0.25,0,0.0");
        let mut buf = Vec::new();
        write_slope_summary(&summarise_by_n(&[report(8, 0.25)]), &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().ends_with("8,0.25,1\n"));
    }
}
