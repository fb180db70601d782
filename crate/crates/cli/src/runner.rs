//! Multi-run orchestration and output files.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use driftbench_core::engine::{pretrain_source, run, EngineConfig, Mode, StepReport};
use driftbench_core::model::{ModelDims, ModelParams};
use driftbench_core::rng::{derive_seed, tag};
use driftbench_core::stream::{preset_schedule, source_domain, StreamSchedule};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub const CSV_HEADER: &str =
    "run_id,seed,mode,step,domain_id,online_accuracy,loss,distance,alpha,kept,refined,discarded,restored_fraction";

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// One CSV row. Field order must match [`CSV_HEADER`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub run_id: usize,
    pub seed: u64,
    pub mode: String,
    pub step: u64,
    pub domain_id: usize,
    pub online_accuracy: f64,
    pub loss: Option<f64>,
    pub distance: Option<f64>,
    pub alpha: Option<f64>,
    pub kept: usize,
    pub refined: usize,
    pub discarded: usize,
    pub restored_fraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct Event<'a> {
    run_id: usize,
    seed: u64,
    mode: &'a str,
    step: u64,
    domain_id: usize,
    n_seen: Option<u64>,
    distance: Option<f64>,
    alpha: Option<f64>,
    restored_fraction: Option<f64>,
    skipped: bool,
    decisions: Vec<&'static str>,
    s_max: &'a [Option<f64>],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Job {
    pub run_id: usize,
    pub seed: u64,
    pub mode: Mode,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub job: Job,
    pub reports: Vec<StepReport>,
    /// Steps at which a new domain starts.
    pub boundaries: Vec<usize>,
}

impl RunOutput {
    pub fn mean_accuracy(&self) -> f64 {
        mean(self.reports.iter().map(|r| r.online_accuracy))
    }

    pub fn distances(&self) -> Vec<Option<f64>> {
        self.reports.iter().map(|r| r.distance).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ModeSummary {
    /// Mean over every step of every seed.
    pub mean_accuracy: f64,
    /// Mean per seed, keyed by seed.
    pub seed_accuracy: BTreeMap<u64, f64>,
    /// Mean per domain id, pooled over seeds.
    pub domain_accuracy: BTreeMap<usize, f64>,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RunSummary {
    pub run_id: usize,
    pub seed: u64,
    pub mode: String,
    pub steps: usize,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Summary {
    pub modes: BTreeMap<String, ModeSummary>,
    pub runs: Vec<RunSummary>,
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Jobs in run-id order: seeds outer, modes inner.
pub fn jobs(cfg: &RunConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        for &mode in &cfg.modes {
            out.push(Job {
                run_id: out.len(),
                seed,
                mode,
            });
        }
    }
    out
}

pub fn stream_seed(seed: u64) -> u64 {
    derive_seed(seed, &[tag::STREAM])
}

pub fn schedule_for(cfg: &RunConfig, seed: u64) -> StreamSchedule {
    let s = preset_schedule(
        cfg.preset,
        &cfg.geometry,
        cfg.steps_per_domain,
        cfg.batch_size,
        stream_seed(seed),
    );
    if cfg.shuffle {
        s.shuffled(derive_seed(seed, &[tag::ORDER]))
    } else {
        s
    }
}

pub fn model_dims(cfg: &RunConfig) -> ModelDims {
    match cfg.hidden {
        Some(h) => ModelDims::with_hidden(cfg.geometry.dim, h, cfg.geometry.classes),
        None => ModelDims::linear(cfg.geometry.dim, cfg.geometry.classes),
    }
}

/// θ₀ for one seed: the configured checkpoint, or a model pretrained on the
/// seed's labeled source domain.
pub fn source_model(cfg: &RunConfig, seed: u64, checkpoint: Option<&ModelParams>) -> Result<ModelParams, CliError> {
    if let Some(theta) = checkpoint {
        return Ok(theta.clone());
    }
    let source = source_domain(&cfg.geometry, stream_seed(seed));
    Ok(pretrain_source(
        model_dims(cfg),
        &source,
        &cfg.pretrain,
        derive_seed(seed, &[tag::SOURCE]),
    )?)
}

pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<ModelParams, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let theta = ModelParams::from_bytes(&bytes).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (have, want) = (theta.dims(), model_dims(cfg));
    if have.input != want.input || have.classes != want.classes || (cfg.hidden.is_some() && have.hidden != want.hidden) {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            message: format!("checkpoint dims {have:?} do not match the configured model {want:?}"),
        });
    }
    Ok(theta)
}

pub fn engine_config(cfg: &RunConfig, job: &Job) -> EngineConfig {
    EngineConfig {
        mode: job.mode,
        master_seed: derive_seed(job.seed, &[tag::ENGINE]),
        ..cfg.engine.clone()
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Io {
            path: "<thread pool>".into(),
            source: std::io::Error::other(e),
        })
}

/// Runs every (seed, mode) job and returns them in run-id order.
pub fn execute(cfg: &RunConfig) -> Result<Vec<RunOutput>, CliError> {
    for mode in &cfg.modes {
        engine_config(cfg, &Job { run_id: 0, seed: 0, mode: *mode }).validate()?;
    }
    let checkpoint = match &cfg.checkpoint {
        Some(p) => Some(load_checkpoint(cfg, p)?),
        None => None,
    };
    let pool = pool(cfg.jobs)?;
    pool.install(|| {
        let sources: Vec<ModelParams> = cfg
            .seeds
            .par_iter()
            .map(|&s| source_model(cfg, s, checkpoint.as_ref()))
            .collect::<Result<_, _>>()?;
        let by_seed: BTreeMap<u64, &ModelParams> = cfg.seeds.iter().copied().zip(&sources).collect();
        let mut out: Vec<RunOutput> = jobs(cfg)
            .into_par_iter()
            .map(|job| {
                let schedule = schedule_for(cfg, job.seed);
                info!("run {} seed {} mode {} starting", job.run_id, job.seed, job.mode);
                let log = run(&engine_config(cfg, &job), &schedule, by_seed[&job.seed])?;
                for r in log.reports.iter().filter(|r| r.skipped) {
                    warn!("run {} step {}: non-finite update rolled back", job.run_id, r.step);
                }
                let out = RunOutput {
                    job,
                    reports: log.reports,
                    boundaries: schedule.boundaries(),
                };
                info!("run {} done, mean accuracy {:.4}", job.run_id, out.mean_accuracy());
                Ok(out)
            })
            .collect::<Result<_, CliError>>()?;
        out.sort_by_key(|r| r.job.run_id);
        Ok(out)
    })
}

pub fn rows(outputs: &[RunOutput]) -> Vec<MetricsRow> {
    outputs
        .iter()
        .flat_map(|o| {
            let mode = o.job.mode.to_string();
            o.reports.iter().map(move |r| MetricsRow {
                run_id: o.job.run_id,
                seed: o.job.seed,
                mode: mode.clone(),
                step: r.step,
                domain_id: r.domain_id,
                online_accuracy: r.online_accuracy,
                loss: r.loss,
                distance: r.distance,
                alpha: r.alpha,
                kept: r.direct,
                refined: r.refined,
                discarded: r.discarded,
                restored_fraction: r.restored_fraction,
            })
        })
        .collect()
}

pub fn summarize(outputs: &[RunOutput]) -> Summary {
    let mut modes: BTreeMap<String, ModeSummary> = BTreeMap::new();
    let mut runs = Vec::new();
    let mut grouped: BTreeMap<String, Vec<&RunOutput>> = BTreeMap::new();
    for o in outputs {
        grouped.entry(o.job.mode.to_string()).or_default().push(o);
        runs.push(RunSummary {
            run_id: o.job.run_id,
            seed: o.job.seed,
            mode: o.job.mode.to_string(),
            steps: o.reports.len(),
            mean_accuracy: o.mean_accuracy(),
        });
    }
    for (mode, group) in grouped {
        let all = || group.iter().flat_map(|o| o.reports.iter());
        let mut domains: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in all() {
            domains.entry(r.domain_id).or_default().push(r.online_accuracy);
        }
        modes.insert(
            mode,
            ModeSummary {
                mean_accuracy: mean(all().map(|r| r.online_accuracy)),
                seed_accuracy: group.iter().map(|o| (o.job.seed, o.mean_accuracy())).collect(),
                domain_accuracy: domains.into_iter().map(|(d, v)| (d, mean(v.into_iter()))).collect(),
                skipped_steps: all().filter(|r| r.skipped).count(),
            },
        );
    }
    Summary { modes, runs }
}

/// Writes through a temp file in `dir` and renames it into place.
pub fn write_atomic(
    dir: &Path,
    name: &str,
    body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<(), CliError> {
    let target = dir.join(name);
    let io = |e| CliError::io(&target, e);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w).map_err(io)?;
        w.flush().map_err(io)?;
    }
    tmp.persist(&target).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn write_metrics(w: &mut dyn Write, rows: &[MetricsRow]) -> std::io::Result<()> {
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    csv.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()
}

pub fn write_events(w: &mut dyn Write, outputs: &[RunOutput]) -> std::io::Result<()> {
    for o in outputs {
        let mode = o.job.mode.to_string();
        for r in &o.reports {
            let e = Event {
                run_id: o.job.run_id,
                seed: o.job.seed,
                mode: &mode,
                step: r.step,
                domain_id: r.domain_id,
                n_seen: r.n_seen,
                distance: r.distance,
                alpha: r.alpha,
                restored_fraction: r.restored_fraction,
                skipped: r.skipped,
                decisions: r.decisions.iter().map(|d| d.as_str()).collect(),
                s_max: &r.s_max,
            };
            serde_json::to_writer(&mut *w, &e)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn write_outputs(dir: &Path, outputs: &[RunOutput]) -> Result<Summary, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let rows = rows(outputs);
    write_atomic(dir, METRICS_FILE, |w| write_metrics(w, &rows))?;
    write_atomic(dir, EVENTS_FILE, |w| write_events(w, outputs))?;
    let summary = summarize(outputs);
    write_atomic(dir, SUMMARY_FILE, |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        w.write_all(b"\n")
    })?;
    Ok(summary)
}

pub fn run_experiment(cfg: &RunConfig) -> Result<Summary, CliError> {
    info!(
        "{} seeds x {} modes, {} jobs",
        cfg.seeds.len(),
        cfg.modes.len(),
        if cfg.jobs == 0 { "all".to_string() } else { cfg.jobs.to_string() }
    );
    let outputs = execute(cfg)?;
    write_outputs(&cfg.out_dir, &outputs)
}
