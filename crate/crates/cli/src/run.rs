//! Experiment dispatch and on-disk artifacts.
//!
//! Every file written here is a pure function of the effective config, so a
//! rerun with the same config and seed reproduces it byte for byte.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mfcontrol::env::{write_paths_csv, MertonProblem, ZeroCostProblem, ZermeloProblem};
use mfcontrol::eval::{
    self, group_by_n, run_grid_with, slope_fit, summarise_by_n, write_gen_csv, write_slope_summary,
    CellResult, GridSpec,
};
use mfcontrol::rollout::write_trajectories_csv;
use mfcontrol::trainer::{gibbs_train_with, EpochStats, Telemetry, TrainObserver};
use mfcontrol::{ControlProblem, Dataset, GibbsVector, ParticleEnsemble};
use sha2::{Digest, Sha256};

use crate::config::{Experiment, ExperimentConfig};

/// How a run ended. Artifacts are on disk in every case.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Completed { summary: String },
    /// The trainer aborted; `diagnostic` names the file with the details.
    Aborted { summary: String, diagnostic: PathBuf },
}

impl Outcome {
    pub fn summary(&self) -> &str {
        match self {
            Outcome::Completed { summary } | Outcome::Aborted { summary, .. } => summary,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Completed { .. } => 0,
            Outcome::Aborted { .. } => 2,
        }
    }
}

/// SHA-256 of the canonical config with the output location blanked, so a
/// run is identified by what it computes rather than where it was written.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let canonical = ExperimentConfig {
        out_dir: String::new(),
        ..config.clone()
    };
    Sha256::digest(canonical.to_toml().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Runs the configured experiment under `config.out_dir`.
pub fn run(config: &ExperimentConfig) -> Result<Outcome> {
    config.validate()?;
    let out = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), config.to_toml())?;
    match config.experiment {
        Experiment::MertonGrid => merton_grid(config, &out),
        Experiment::ZermeloTrain => zermelo_train(config, &out),
        Experiment::GibbsSanity => gibbs_sanity(config, &out),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> mfcontrol::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_checkpoint(dir: &Path, t: usize, ensemble: &ParticleEnsemble) -> mfcontrol::Result<()> {
    let mut w = BufWriter::new(File::create(dir.join(format!("stage_{t:03}.txt")))?);
    ensemble.write_text(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_manifest(dir: &Path, hash: &str, stages: &[usize]) -> Result<()> {
    let mut text = format!("# checkpoint manifest v1\nconfig_sha256={hash}\n");
    for t in stages {
        text.push_str(&format!("stage={t} file=stage_{t:03}.txt\n"));
    }
    fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

fn write_gibbs_checkpoints(dir: &Path, gibbs: &GibbsVector, hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut stages = Vec::new();
    for t in 0..gibbs.horizon() {
        if let Some(e) = gibbs.get(t) {
            write_checkpoint(dir, t, e)?;
            stages.push(t);
        }
    }
    write_manifest(dir, hash, &stages)
}

/// Telemetry plus per-stage checkpoints written as each stage finishes, so
/// an aborted run keeps the stages it completed.
struct RunObserver<'a> {
    telemetry: Telemetry,
    checkpoint_dir: Option<&'a Path>,
    hash: String,
    completed: Vec<usize>,
}

impl TrainObserver for RunObserver<'_> {
    fn on_epoch(&mut self, stage: usize, epoch: usize, stats: &EpochStats) {
        self.telemetry.on_epoch(stage, epoch, stats);
    }

    fn on_stage_complete(
        &mut self,
        stage: usize,
        ensemble: &ParticleEnsemble,
        _epochs: usize,
    ) -> mfcontrol::Result<()> {
        if let Some(dir) = self.checkpoint_dir {
            write_checkpoint(dir, stage, ensemble)?;
            self.completed.push(stage);
            let mut stages = self.completed.clone();
            stages.sort_unstable();
            write_manifest(dir, &self.hash, &stages).map_err(|e| mfcontrol::Error::Format(e.to_string()))?;
        }
        Ok(())
    }
}

fn merton_grid(config: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let problem = MertonProblem::new(config.merton_params())?;
    let spec = GridSpec {
        ns: config.grid.ns.clone(),
        rs: config.grid.rs.clone(),
        trials: config.grid.trials,
        n_test: config.grid.n_test,
    };
    let hash = config_hash(config);
    let checkpoints = config.output.checkpoints;
    let sink = |cell: CellResult<'_>| -> mfcontrol::Result<()> {
        let r = cell.report;
        let dir = out.join(format!("n{}_r{}_t{}", r.n, r.r, r.trial));
        let io = |e: anyhow::Error| mfcontrol::Error::Format(format!("{}: {e:#}", dir.display()));
        fs::create_dir_all(&dir)?;
        write_with(&dir.join("telemetry.csv"), |w| cell.telemetry.write_csv(w)).map_err(io)?;
        if let Some(gibbs) = cell.gibbs.filter(|_| checkpoints) {
            write_gibbs_checkpoints(&dir.join("checkpoints"), gibbs, &hash).map_err(io)?;
        }
        if let Some(msg) = &r.error {
            fs::write(dir.join("error.txt"), format!("{msg}\n"))?;
        }
        Ok(())
    };
    let reports = run_grid_with(
        &problem,
        &spec,
        &config.train_config(),
        config.seed,
        config.output.telemetry_every,
        &sink,
    )?;
    write_with(&out.join("gen_results.csv"), |w| {
        write_gen_csv(&reports, config.output.wall_time, w)
    })?;
    let rows = summarise_by_n(&reports);
    write_with(&out.join("slope_summary.csv"), |w| write_slope_summary(&rows, w))?;

    let medians: Vec<String> = rows
        .iter()
        .map(|r| format!("n={} median|gen|={:.4e}", r.n, r.median_abs_gen))
        .collect();
    let slope = match slope_fit(&group_by_n(&reports)) {
        Ok(fit) => format!("slope={:.3}", fit.slope),
        Err(e) => format!("slope undefined ({e})"),
    };
    let medians = if medians.is_empty() {
        "no finite estimates".to_string()
    } else {
        medians.join(", ")
    };
    let summary = format!("merton_grid: {medians}; {slope}");
    let aborted: Vec<String> = reports
        .iter()
        .filter_map(|r| {
            r.error
                .as_ref()
                .map(|e| format!("n{}_r{}_t{}: {e}", r.n, r.r, r.trial))
        })
        .collect();
    if aborted.is_empty() {
        Ok(Outcome::Completed { summary })
    } else {
        let diagnostic = out.join("errors.txt");
        fs::write(&diagnostic, aborted.join("\n") + "\n")?;
        Ok(Outcome::Aborted {
            summary: format!("{summary}; {} aborted cell(s)", aborted.len()),
            diagnostic,
        })
    }
}

/// Trains one ensemble per trainable step and writes telemetry, checkpoints
/// and datasets under `out`. On abort the diagnostic goes to `error.txt`.
fn train_single(
    config: &ExperimentConfig,
    problem: &dyn ControlProblem,
    dataset: &Dataset,
    out: &Path,
) -> Result<std::result::Result<GibbsVector, PathBuf>> {
    let train = config.train_config();
    let epochs = train.epoch_cap.map_or(train.epochs, |c| c.min(train.epochs));
    let checkpoint_dir = out.join("checkpoints");
    if config.output.checkpoints {
        fs::create_dir_all(&checkpoint_dir)?;
    }
    let mut observer = RunObserver {
        telemetry: Telemetry::new(config.output.telemetry_every, epochs),
        checkpoint_dir: config.output.checkpoints.then_some(checkpoint_dir.as_path()),
        hash: config_hash(config),
        completed: Vec::new(),
    };
    let result = gibbs_train_with(problem, &dataset.train, &train, &mut observer);
    write_with(&out.join("telemetry.csv"), |w| observer.telemetry.write_csv(w))?;
    match result {
        Ok(gibbs) => Ok(Ok(gibbs)),
        Err(e) => {
            let path = out.join("error.txt");
            fs::write(&path, format!("{e}\n"))?;
            Ok(Err(path))
        }
    }
}

fn zermelo_train(config: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let problem = ZermeloProblem::new(config.zermelo_params())?;
    let z = &config.zermelo;
    let dataset = Dataset::generate(problem.sampler(), z.n_train, z.n_test, config.seed);
    write_with(&out.join("paths_train.csv"), |w| {
        write_paths_csv(problem.sampler(), &dataset.train, w)
    })?;
    write_with(&out.join("paths_test.csv"), |w| {
        write_paths_csv(problem.sampler(), &dataset.test, w)
    })?;
    let gibbs = match train_single(config, &problem, &dataset, out)? {
        Ok(g) => g,
        Err(diagnostic) => {
            return Ok(Outcome::Aborted {
                summary: "zermelo_train: training aborted".into(),
                diagnostic,
            })
        }
    };
    write_with(&out.join("trajectories.csv"), |w| {
        write_trajectories_csv(&problem, &gibbs, &dataset.train, w)
    })?;
    write_with(&out.join("trajectories_test.csv"), |w| {
        write_trajectories_csv(&problem, &gibbs, &dataset.test, w)
    })?;
    let train = eval::zermelo_outcomes(&problem, &gibbs, &dataset.train)?;
    let test = eval::zermelo_outcomes(&problem, &gibbs, &dataset.test)?;
    let mut w = create(&out.join("losses.csv"))?;
    writeln!(w, "# losses v1")?;
    writeln!(w, "split,path_id,terminal_distance_sq,obstacle,total")?;
    eval::write_zermelo_outcomes("train", &train, &mut w)?;
    eval::write_zermelo_outcomes("test", &test, &mut w)?;
    w.flush()?;

    let mean = |v: &[eval::ZermeloOutcome], f: fn(&eval::ZermeloOutcome) -> f64| {
        v.iter().map(f).sum::<f64>() / v.len() as f64
    };
    let summary = format!(
        "zermelo_train: in-sample mean terminal dist^2={:.4} obstacle={:.4} total={:.4}; \
         out-of-sample total={:.4}",
        mean(&train, |o| o.terminal_distance_sq),
        mean(&train, |o| o.obstacle),
        mean(&train, |o| o.total),
        mean(&test, |o| o.total),
    );
    Ok(Outcome::Completed { summary })
}

/// Per-coordinate mean and (population) variance over the ensemble rows.
pub fn coordinate_moments(ensemble: &ParticleEnsemble) -> Vec<(f64, f64)> {
    let stride = ensemble.stride();
    let r = ensemble.width() as f64;
    (0..stride)
        .map(|k| {
            let col: Vec<f64> = (0..ensemble.width()).map(|j| ensemble.row(j)[k]).collect();
            let mean = col.iter().sum::<f64>() / r;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r;
            (mean, var)
        })
        .collect()
}

fn gibbs_sanity(config: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let s = &config.sanity;
    let problem = ZeroCostProblem::new(s.state_dim, s.control_dim, s.horizon);
    let dataset = Dataset::generate(problem.sampler(), 1, 1, config.seed);
    let gibbs = match train_single(config, &problem, &dataset, out)? {
        Ok(g) => g,
        Err(diagnostic) => {
            return Ok(Outcome::Aborted {
                summary: "gibbs_sanity: training aborted".into(),
                diagnostic,
            })
        }
    };
    let analytic = config.train.sigma * config.train.sigma / 2.0;
    let mut w = create(&out.join("moments.csv"))?;
    writeln!(w, "# moments v1")?;
    writeln!(w, "stage,coordinate,mean,variance,analytic_variance")?;
    let mut pooled = Vec::new();
    for t in 0..gibbs.horizon() {
        let Some(e) = gibbs.get(t) else { continue };
        for (k, (mean, var)) in coordinate_moments(e).into_iter().enumerate() {
            writeln!(w, "{t},{k},{mean:?},{var:?},{analytic:?}")?;
            pooled.push((mean, var));
        }
    }
    w.flush()?;
    let avg_var = pooled.iter().map(|p| p.1).sum::<f64>() / pooled.len() as f64;
    let max_mean = pooled.iter().map(|p| p.0.abs()).fold(0.0, f64::max);
    Ok(Outcome::Completed {
        summary: format!(
            "gibbs_sanity: empirical variance {avg_var:.4} vs analytic sigma^2/2 = {analytic:.4}; max |mean| {max_mean:.4}"
        ),
    })
}
