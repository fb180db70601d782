//! The online adaptation loop.
//!
//! Every batch is first predicted by the student (that prediction is what
//! gets scored), then used for adaptation. In `ctta_t` mode adaptation runs:
//! teacher guidance through [`crate::rfp`], one student gradient step,
//! a distance-weighted EMA of the teacher, and a Bernoulli reset of teacher
//! scalars back to the source weights.

use std::fmt;

use rand::Rng;

use crate::cda::{alpha_from_distance, default_k, AlphaPolicy, DomainTracker};
use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    accumulate, entropy_and_grad, forward, loss_and_grad, optimizer_step, DropoutMask, ModelDims,
    ModelParams, OptimizerConfig, OptimizerState, Prediction,
};
use crate::rfp::{decide, DecisionKind, RfpConfig};
use crate::rng::{derive_seed, rng_for, tag};
use crate::stream::{make_stream, sample_batch, Batch, DomainSpec, StreamSchedule};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    CttaT,
    NoAdapt,
    FixedAlpha(f64),
    EntropyMin,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        let s = s.trim();
        match s {
            "ctta_t" => return Ok(Mode::CttaT),
            "no_adapt" => return Ok(Mode::NoAdapt),
            "entropy_min" => return Ok(Mode::EntropyMin),
            _ => {}
        }
        if let Some(inner) = s.strip_prefix("fixed_alpha(").and_then(|r| r.strip_suffix(')')) {
            let a: f64 = inner
                .trim()
                .parse()
                .map_err(|_| invalid(format!("fixed_alpha weight {inner:?} is not a number")))?;
            let m = Mode::FixedAlpha(a);
            m.validate()?;
            return Ok(m);
        }
        Err(invalid(format!(
            "unknown mode {s:?} (expected ctta_t, no_adapt, entropy_min or fixed_alpha(a))"
        )))
    }

    pub fn validate(&self) -> Result<()> {
        if let Mode::FixedAlpha(a) = *self {
            if !(0.0..=1.0).contains(&a) {
                return Err(invalid(format!("fixed_alpha weight {a} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::CttaT => f.write_str("ctta_t"),
            Mode::NoAdapt => f.write_str("no_adapt"),
            Mode::FixedAlpha(a) => write!(f, "fixed_alpha({a})"),
            Mode::EntropyMin => f.write_str("entropy_min"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub mode: Mode,
    pub rfp: RfpConfig,
    pub alpha_policy: AlphaPolicy,
    pub restore_prob: f64,
    pub optimizer: OptimizerConfig,
    /// Dropout applied to the student's training forward pass.
    pub student_dropout: f64,
    /// Tracked principal components; `None` picks `min(d, 8)`.
    pub k: Option<usize>,
    pub master_seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::CttaT,
            rfp: RfpConfig::default(),
            alpha_policy: AlphaPolicy::default(),
            restore_prob: 0.01,
            optimizer: OptimizerConfig::default(),
            student_dropout: 0.1,
            k: None,
            master_seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        self.rfp.validate()?;
        self.alpha_policy.validate()?;
        self.optimizer.validate()?;
        if !(0.0..=1.0).contains(&self.restore_prob) {
            return Err(invalid(format!("restore_prob {} outside [0, 1]", self.restore_prob)));
        }
        if !(0.0..1.0).contains(&self.student_dropout) {
            return Err(invalid("student dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    pub theta_source: ModelParams,
    pub theta_teacher: ModelParams,
    pub theta_student: ModelParams,
    pub tracker: DomainTracker,
    pub optimizer: OptimizerState,
    /// Index of the next step to run.
    pub step: u64,
}

/// Width of the features the tracker sees.
fn tracked_dim(dims: ModelDims) -> usize {
    dims.hidden.unwrap_or(dims.input)
}

impl EngineState {
    pub fn new(theta_0: ModelParams, cfg: &EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = theta_0.dims();
        let d = tracked_dim(dims);
        let k = cfg.k.unwrap_or_else(|| default_k(d));
        Ok(Self {
            theta_teacher: theta_0.clone(),
            theta_student: theta_0.clone(),
            theta_source: theta_0,
            tracker: DomainTracker::new(d, k)?,
            optimizer: OptimizerState::new(cfg.optimizer, dims),
            step: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub domain_id: usize,
    pub batch_size: usize,
    /// Samples guided by the raw teacher prediction.
    pub direct: usize,
    pub refined: usize,
    pub discarded: usize,
    pub correct: usize,
    pub online_accuracy: f64,
    /// Mean training loss over the guided samples, before the update.
    pub loss: Option<f64>,
    pub distance: Option<f64>,
    pub alpha: Option<f64>,
    pub restored_fraction: Option<f64>,
    /// Samples seen by the tracker after this step.
    pub n_seen: Option<u64>,
    /// Set when a non-finite loss or gradient forced a rollback.
    pub skipped: bool,
    pub decisions: Vec<DecisionKind>,
    pub s_max: Vec<Option<f64>>,
}

/// Everything a step produces that does not depend on labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation {
    pub predictions: Vec<Prediction>,
    pub report: StepReport,
    pub state: EngineState,
}

pub fn ema_update(theta_t: &ModelParams, theta_s: &ModelParams, alpha: f64) -> Result<ModelParams> {
    theta_t.check_same_dims(theta_s)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("EMA weight {alpha} outside [0, 1]")));
    }
    let mut out = theta_t.clone();
    for (t, s) in out.as_mut_slice().iter_mut().zip(theta_s.as_slice()) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    Ok(out)
}

/// Resets each scalar to its source value with probability `p`.
pub fn stochastic_restore(
    theta_t: &ModelParams,
    theta_0: &ModelParams,
    p: f64,
    seed: u64,
) -> Result<(ModelParams, f64)> {
    theta_t.check_same_dims(theta_0)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("restore probability {p} outside [0, 1]")));
    }
    let mut out = theta_t.clone();
    if p == 0.0 {
        return Ok((out, 0.0));
    }
    let mut rng = rng_for(seed, &[]);
    let mut restored = 0usize;
    for (t, s) in out.as_mut_slice().iter_mut().zip(theta_0.as_slice()) {
        if rng.gen::<f64>() < p {
            *t = *s;
            restored += 1;
        }
    }
    let frac = restored as f64 / out.len() as f64;
    Ok((out, frac))
}

/// Features handed to the tracker: raw inputs, or the frozen source model's
/// hidden activations when a hidden layer exists.
fn tracker_features(theta_0: &ModelParams, x: &Matrix) -> Matrix {
    let dims = theta_0.dims();
    let Some(h) = dims.hidden else {
        return x.clone();
    };
    let w = &theta_0.as_slice()[..dims.input * h];
    let b = &theta_0.as_slice()[dims.input * h..dims.input * h + h];
    Matrix::from_fn(x.rows(), h, |i, j| {
        let z: f64 = b[j] + x.row(i).iter().enumerate().map(|(k, v)| v * w[k * h + j]).sum::<f64>();
        z.max(0.0)
    })
}

/// Mean loss and gradient of the student over `targets` (sample, guidance).
fn student_objective(
    student: &ModelParams,
    x: &Matrix,
    targets: &[(usize, &[f64])],
    dropout: f64,
    seed: u64,
) -> Result<(f64, ModelParams)> {
    let dims = student.dims();
    let mut g = ModelParams::zeros(dims)?;
    let mut loss = 0.0;
    let scale = 1.0 / targets.len() as f64;
    for &(i, t) in targets {
        let mask = DropoutMask::sample(dims, dropout, seed, i as u64)?;
        let (l, _, gi) = loss_and_grad(student, x.row(i), t, Some(&mask))?;
        loss += scale * l;
        accumulate(&mut g, &gi, scale);
    }
    Ok((loss, g))
}

fn entropy_objective(student: &ModelParams, x: &Matrix, dropout: f64, seed: u64) -> Result<(f64, ModelParams)> {
    let dims = student.dims();
    let mut g = ModelParams::zeros(dims)?;
    let mut loss = 0.0;
    let scale = 1.0 / x.rows() as f64;
    for i in 0..x.rows() {
        let mask = DropoutMask::sample(dims, dropout, seed, i as u64)?;
        let (h, _, gi) = entropy_and_grad(student, x.row(i), Some(&mask))?;
        loss += scale * h;
        accumulate(&mut g, &gi, scale);
    }
    Ok((loss, g))
}

/// Applies one student update unless the loss or gradient is non-finite.
fn try_student_update(
    student: &ModelParams,
    optimizer: &mut OptimizerState,
    loss: f64,
    g: &ModelParams,
) -> Result<Option<ModelParams>> {
    if !loss.is_finite() {
        return Ok(None);
    }
    match optimizer_step(student, g, optimizer) {
        Ok(p) if p.is_finite() => Ok(Some(p)),
        Ok(_) | Err(Error::PoisonedUpdate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Predicts on `x`, then adapts. Never sees labels.
pub fn adapt(state: &EngineState, x: &Matrix, domain_id: usize, cfg: &EngineConfig) -> Result<Adaptation> {
    let dims = state.theta_student.dims();
    check_dim("batch feature dimension", dims.input, x.cols())?;
    if x.rows() == 0 {
        return Err(Error::EmptyInput("batch has no samples"));
    }
    let n = x.rows();
    let step = state.step;
    let seed = cfg.master_seed;

    let predictions = (0..n)
        .map(|i| forward(&state.theta_student, x.row(i), None))
        .collect::<Result<Vec<_>>>()?;

    let mut next = state.clone();
    next.step = step + 1;
    let mut report = StepReport {
        step,
        domain_id,
        batch_size: n,
        direct: 0,
        refined: 0,
        discarded: 0,
        correct: 0,
        online_accuracy: 0.0,
        loss: None,
        distance: None,
        alpha: None,
        restored_fraction: None,
        n_seen: None,
        skipped: false,
        decisions: Vec::new(),
        s_max: Vec::new(),
    };
    let student_seed = derive_seed(seed, &[tag::STUDENT, step]);

    // Rolls everything back to the pre-step state but still advances the step.
    let rollback = |mut report: StepReport| {
        report.skipped = true;
        let mut kept = state.clone();
        kept.step = step + 1;
        Adaptation {
            predictions: predictions.clone(),
            report,
            state: kept,
        }
    };

    match cfg.mode {
        Mode::NoAdapt => {}
        Mode::EntropyMin => {
            report.direct = n;
            report.decisions = vec![DecisionKind::DirectGuide; n];
            report.s_max = vec![None; n];
            let (loss, g) = entropy_objective(&state.theta_student, x, cfg.student_dropout, student_seed)?;
            report.loss = Some(loss);
            match try_student_update(&state.theta_student, &mut next.optimizer, loss, &g)? {
                Some(p) => next.theta_student = p,
                None => return Ok(rollback(report)),
            }
        }
        Mode::FixedAlpha(alpha) => {
            report.direct = n;
            report.decisions = vec![DecisionKind::DirectGuide; n];
            report.s_max = vec![None; n];
            let guidance = (0..n)
                .map(|i| forward(&state.theta_teacher, x.row(i), None).map(|p| p.probs))
                .collect::<Result<Vec<_>>>()?;
            let targets: Vec<(usize, &[f64])> = guidance.iter().enumerate().map(|(i, g)| (i, g.as_slice())).collect();
            let (loss, g) = student_objective(&state.theta_student, x, &targets, cfg.student_dropout, student_seed)?;
            report.loss = Some(loss);
            match try_student_update(&state.theta_student, &mut next.optimizer, loss, &g)? {
                Some(p) => next.theta_student = p,
                None => return Ok(rollback(report)),
            }
            next.theta_teacher = ema_update(&state.theta_teacher, &next.theta_student, alpha)?;
            report.alpha = Some(alpha);
        }
        Mode::CttaT => {
            let decisions = (0..n)
                .map(|i| {
                    let s = derive_seed(seed, &[tag::RFP, step, i as u64]);
                    decide(&state.theta_teacher, x.row(i), &cfg.rfp, s)
                })
                .collect::<Result<Vec<_>>>()?;
            for d in &decisions {
                match d.kind {
                    DecisionKind::DirectGuide => report.direct += 1,
                    DecisionKind::RefinedGuide => report.refined += 1,
                    DecisionKind::Discard => report.discarded += 1,
                }
                report.decisions.push(d.kind);
                report.s_max.push(d.report.as_ref().map(|r| r.s_max));
            }
            let targets: Vec<(usize, &[f64])> = decisions
                .iter()
                .enumerate()
                .filter_map(|(i, d)| d.guidance.as_deref().map(|g| (i, g)))
                .collect();
            if !targets.is_empty() {
                let (loss, g) =
                    student_objective(&state.theta_student, x, &targets, cfg.student_dropout, student_seed)?;
                report.loss = Some(loss);
                match try_student_update(&state.theta_student, &mut next.optimizer, loss, &g)? {
                    Some(p) => next.theta_student = p,
                    None => return Ok(rollback(report)),
                }
            }

            let feats = tracker_features(&state.theta_source, x);
            let distance = next.tracker.update(&feats)?;
            let alpha = alpha_from_distance(distance, &cfg.alpha_policy);
            next.theta_teacher = ema_update(&state.theta_teacher, &next.theta_student, alpha)?;
            let (restored, frac) = stochastic_restore(
                &next.theta_teacher,
                &state.theta_source,
                cfg.restore_prob,
                derive_seed(seed, &[tag::RESTORE, step]),
            )?;
            next.theta_teacher = restored;
            report.distance = Some(distance);
            report.alpha = Some(alpha);
            report.restored_fraction = Some(frac);
            report.n_seen = Some(next.tracker.n_seen);
        }
    }

    Ok(Adaptation {
        predictions,
        report,
        state: next,
    })
}

/// One online step: predict, score against the hidden labels, adapt.
pub fn step(
    state: &EngineState,
    batch: &Batch,
    cfg: &EngineConfig,
) -> Result<(Vec<Prediction>, StepReport, EngineState)> {
    check_dim("labels per batch", batch.x.rows(), batch.y.len())?;
    let Adaptation {
        predictions,
        mut report,
        state,
    } = adapt(state, &batch.x, batch.domain_id, cfg)?;
    // Labels enter here and only here.
    report.correct = predictions
        .iter()
        .zip(&batch.y)
        .filter(|(p, &y)| p.argmax() == y)
        .count();
    report.online_accuracy = report.correct as f64 / batch.len() as f64;
    Ok((predictions, report, state))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub reports: Vec<StepReport>,
    pub final_state: EngineState,
}

impl MetricsLog {
    pub fn mean_accuracy(&self) -> f64 {
        if self.reports.is_empty() {
            return 0.0;
        }
        self.reports.iter().map(|r| r.online_accuracy).sum::<f64>() / self.reports.len() as f64
    }

    /// Mean online accuracy per domain id, in id order.
    pub fn domain_accuracy(&self) -> Vec<(usize, f64)> {
        let mut acc: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for r in &self.reports {
            let e = acc.entry(r.domain_id).or_default();
            e.0 += r.online_accuracy;
            e.1 += 1;
        }
        acc.into_iter().map(|(d, (s, c))| (d, s / c as f64)).collect()
    }
}

pub fn run(cfg: &EngineConfig, schedule: &StreamSchedule, theta_0: &ModelParams) -> Result<MetricsLog> {
    cfg.validate()?;
    let stream = make_stream(schedule)?;
    if let Some((spec, _)) = schedule.domains.first() {
        check_dim("stream feature dim vs model", theta_0.dims().input, spec.dim())?;
        check_dim("stream classes vs model", theta_0.dims().classes, spec.classes())?;
    }
    let mut state = EngineState::new(theta_0.clone(), cfg)?;
    let mut reports = Vec::with_capacity(schedule.total_steps());
    for batch in stream {
        let (_, report, next) = step(&state, &batch, cfg)?;
        reports.push(report);
        state = next;
    }
    Ok(MetricsLog {
        reports,
        final_state: state,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 64,
            lr: 0.05,
            dropout: 0.1,
        }
    }
}

/// Supervised training of θ₀ on labeled source batches with Adam.
pub fn pretrain_source(
    dims: ModelDims,
    source: &DomainSpec,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<ModelParams> {
    check_dim("source feature dim", dims.input, source.dim())?;
    check_dim("source classes", dims.classes, source.classes())?;
    if cfg.batch_size == 0 {
        return Err(invalid("pretraining batch size must be at least 1"));
    }
    let mut params = ModelParams::init(dims, derive_seed(seed, &[tag::SOURCE, tag::INIT]))?;
    let mut opt = OptimizerState::new(OptimizerConfig::adam(cfg.lr), dims);
    let data_seed = derive_seed(seed, &[tag::SOURCE]);
    for s in 0..cfg.steps {
        let batch = sample_batch(source, cfg.batch_size, data_seed, s as u64)?;
        let mut g = ModelParams::zeros(dims)?;
        let scale = 1.0 / batch.len() as f64;
        let mask_seed = derive_seed(seed, &[tag::SOURCE, tag::STUDENT, s as u64]);
        for (i, &y) in batch.y.iter().enumerate() {
            let mut t = vec![0.0; dims.classes];
            t[y] = 1.0;
            let mask = DropoutMask::sample(dims, cfg.dropout, mask_seed, i as u64)?;
            let (_, _, gi) = loss_and_grad(&params, batch.x.row(i), &t, Some(&mask))?;
            accumulate(&mut g, &gi, scale);
        }
        params = optimizer_step(&params, &g, &mut opt)?;
    }
    Ok(params)
}
