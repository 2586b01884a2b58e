use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::federation::{RoundReport, Simulation};
use crate::harness::config::ExperimentConfig;
use crate::harness::report::{emit_reports, write_json, Summary};
use crate::numerics::gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport};
use crate::rng;
use crate::theory::{train_theory_trajectories, verify_gram_ordering, GramCheckReport, TheoryConfig};

/// Caps the number of worker threads.
pub const THREADS_ENV: &str = "FEDCO_THREADS";

/// Process exit status for an error: 2 for configuration problems, 1 for
/// everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// A worker pool sized by `FEDCO_THREADS`, or by the number of cores when
/// the variable is unset.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => return Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reports: Vec<RoundReport>,
    pub summary: Summary,
}

/// Builds the data and runs every round; returns the metric rows and the
/// dataset description.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Vec<RoundReport>, Value)> {
    let round_cfg = cfg.round_config()?;
    let ds = cfg.build_dataset()?;
    let mlp_cfg = cfg.mlp_config(&ds)?;
    let mut sim = Simulation::new(round_cfg, mlp_cfg, &ds)?;
    let reports = sim.run()?;
    let extra = json!({
        "heterogeneity": ds.heterogeneity,
        "train_sizes": ds.clients.iter().map(|c| c.train.len()).collect::<Vec<_>>(),
        "test_sizes": ds.clients.iter().map(|c| c.test.len()).collect::<Vec<_>>(),
    });
    Ok((reports, extra))
}

/// `run`: executes the experiment and writes `metrics.csv` and
/// `summary.json` into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    let (reports, extra) = run_experiment(cfg)?;
    let mut echo = serde_json::to_value(cfg)?;
    if let Some(obj) = echo.as_object_mut() {
        obj.insert("federation".into(), serde_json::to_value(cfg.round_config()?)?);
    }
    let summary = emit_reports(&reports, &echo, extra, out)?;
    Ok(RunOutput { reports, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryArgs {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub alpha: f64,
    pub mc: usize,
    pub trials: usize,
    pub seed: u64,
    /// Hidden width of the trained networks.
    pub width: usize,
    pub steps: usize,
    /// Step size; `None` picks `0.05/λ_max` per instance.
    pub lr: Option<f64>,
    /// Number of trajectory instances.
    pub traj_trials: usize,
}

impl Default for TheoryArgs {
    fn default() -> Self {
        Self {
            n: 3,
            m: 4,
            d: 5,
            alpha: 0.5,
            mc: 100_000,
            trials: 20,
            seed: 0,
            width: 512,
            steps: 200,
            lr: None,
            traj_trials: 10,
        }
    }
}

impl TheoryArgs {
    pub fn config(&self) -> TheoryConfig {
        TheoryConfig {
            n_clients: self.n,
            m_per_client: self.m,
            d: self.d,
            width: self.width,
            alpha: self.alpha,
            mc_samples: self.mc,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectorySummary {
    pub instances: usize,
    pub steps: usize,
    pub width: usize,
    pub lr: Vec<f64>,
    pub final_online: Vec<f64>,
    pub final_offline: Vec<f64>,
    pub final_fedco2: Vec<f64>,
    /// Instances where the ensemble's final loss is at most the online one.
    pub fedco2_le_online: usize,
    /// Every curve ends below where it started.
    pub all_descend: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryOutput {
    pub version: String,
    pub gram_check: GramCheckReport,
    pub trajectories: TrajectorySummary,
}

/// `theory`: checks the eigenvalue ordering, trains trajectories, and
/// writes `theorem1.json` and `trajectories.csv`. Files are written before
/// a failed check is reported.
pub fn theory(args: &TheoryArgs, out: &Path) -> Result<TheoryOutput> {
    let cfg = args.config();
    cfg.validate()?;
    if args.trials == 0 || args.traj_trials == 0 || args.steps == 0 {
        return Err(Error::Config("trials, trajectory trials and steps must be at least 1".into()));
    }
    let report = verify_gram_ordering(&cfg, args.trials)?;

    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("trajectories.csv"))?;
    w.write_record(["trial", "step", "online", "offline", "fedco2"])?;
    let mut summary = TrajectorySummary {
        instances: args.traj_trials,
        steps: args.steps,
        width: args.width,
        lr: Vec::new(),
        final_online: Vec::new(),
        final_offline: Vec::new(),
        final_fedco2: Vec::new(),
        fedco2_le_online: 0,
        all_descend: true,
    };
    for t in 0..args.traj_trials {
        let seed = rng::derive_seed(&[args.seed, rng::tag::THEORY, 5, t as u64]);
        let tr = train_theory_trajectories(&TheoryConfig { seed, ..cfg.clone() }, args.steps, args.lr)?;
        for s in 0..=args.steps {
            w.write_record([
                t.to_string(),
                s.to_string(),
                tr.online[s].to_string(),
                tr.offline[s].to_string(),
                tr.fedco2[s].to_string(),
            ])?;
        }
        let k = args.steps;
        summary.lr.push(tr.lr);
        summary.final_online.push(tr.online[k]);
        summary.final_offline.push(tr.offline[k]);
        summary.final_fedco2.push(tr.fedco2[k]);
        summary.fedco2_le_online += usize::from(tr.fedco2[k] <= tr.online[k]);
        summary.all_descend &= [&tr.online, &tr.offline, &tr.fedco2].iter().all(|c| c[k] < c[0]);
    }
    w.flush()?;
    let output = TheoryOutput {
        version: crate::VERSION.to_string(),
        gram_check: report,
        trajectories: summary,
    };
    write_json(&output, &out.join("theorem1.json"))?;
    output.gram_check.check()?;
    Ok(output)
}

/// `gradcheck`: the finite-difference suite with its default size.
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    run_gradcheck(&GradcheckOptions {
        seed,
        ..GradcheckOptions::default()
    })
}
