//! Refine-then-filter teacher guidance.
//!
//! Confident teacher predictions pass through untouched. For uncertain ones
//! the teacher is run `N` times under independent dropout masks; the SVD of
//! the stacked `N × C` probability matrix yields a per-class consistency
//! score `s_j = Σ_i σ_i V_{j,i}`. Samples whose best score falls under `τ`
//! are dropped, the rest get their teacher probabilities re-weighted by
//! `softmax(s)`.

use crate::error::{invalid, Error, Result};
use crate::linalg::{svd, Matrix};
use crate::model::{entropy, forward, softmax, DropoutMask, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfpConfig {
    pub n_passes: usize,
    /// Entropy threshold as a fraction of `ln C`.
    pub gamma: f64,
    pub tau: f64,
    pub dropout_rate: f64,
}

impl Default for RfpConfig {
    fn default() -> Self {
        Self {
            n_passes: 8,
            gamma: 0.4,
            tau: 1.2,
            dropout_rate: 0.1,
        }
    }
}

impl RfpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_passes < 2 {
            return Err(invalid("rfp.n_passes must be at least 2"));
        }
        if !(self.gamma > 0.0) {
            return Err(invalid("rfp.gamma must be positive"));
        }
        if !(self.tau >= 0.0) {
            return Err(invalid("rfp.tau must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid("rfp.dropout_rate must lie in [0, 1)"));
        }
        Ok(())
    }

    /// `γ · ln C`, in nats.
    pub fn entropy_threshold(&self, classes: usize) -> f64 {
        self.gamma * (classes as f64).ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub p_matrix: Matrix,
    /// Retained singular values, descending.
    pub sigma: Vec<f64>,
    /// `C × r`, principal class directions as columns.
    pub v: Matrix,
    pub s: Vec<f64>,
    pub s_max: f64,
    /// Slack in `s_max ≤ max_j p̄_j + ε`.
    pub eps_bound: f64,
    pub p_bar: Vec<f64>,
}

impl ConsistencyReport {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecisionKind {
    DirectGuide,
    RefinedGuide,
    Discard,
}

impl DecisionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DecisionKind::DirectGuide => "direct",
            DecisionKind::RefinedGuide => "refined",
            DecisionKind::Discard => "discard",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfpDecision {
    pub kind: DecisionKind,
    /// Target for the student; `None` when discarded.
    pub guidance: Option<Vec<f64>>,
    pub report: Option<ConsistencyReport>,
    /// Entropy of the maskless teacher prediction.
    pub entropy: f64,
}

/// Stacks `N` dropout forward passes of the teacher, one row each.
pub fn consistency_matrix(
    teacher: &ModelParams,
    x: &[f64],
    cfg: &RfpConfig,
    seed: u64,
) -> Result<Matrix> {
    cfg.validate()?;
    let dims = teacher.dims();
    let mut p = Matrix::zeros(cfg.n_passes, dims.classes);
    for n in 0..cfg.n_passes {
        let mask = DropoutMask::sample(dims, cfg.dropout_rate, seed, n as u64)?;
        let pred = forward(teacher, x, Some(&mask))?;
        p.row_mut(n).copy_from_slice(&pred.probs);
    }
    Ok(p)
}

pub fn consistency_distribution(p_matrix: &Matrix) -> Result<ConsistencyReport> {
    let (n, c) = p_matrix.shape();
    if n == 0 || c == 0 {
        return Err(Error::EmptyInput("consistency matrix"));
    }
    if p_matrix.as_slice().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(invalid("consistency matrix entries must be finite and nonnegative"));
    }
    if p_matrix.max_abs() == 0.0 {
        return Err(invalid("consistency matrix is all zeros"));
    }
    for i in 0..n {
        let sum: f64 = p_matrix.row(i).iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(invalid(format!("consistency matrix row {i} sums to {sum}")));
        }
    }

    let dec = svd(p_matrix)?;
    let r = dec.rank();
    let sigma = dec.sigma[..r].to_vec();
    let v = Matrix::from_fn(c, r, |j, i| dec.vt[(i, j)]);

    let s: Vec<f64> = (0..c)
        .map(|j| (0..r).map(|i| sigma[i] * v[(j, i)]).sum())
        .collect();
    let s_max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    // |1 − u_kᵀ1/N| per retained component.
    let u_gap: Vec<f64> = (0..r)
        .map(|k| {
            let mean = (0..n).map(|i| dec.u[(i, k)]).sum::<f64>() / n as f64;
            (1.0 - mean).abs()
        })
        .collect();
    let eps_bound = (0..c)
        .map(|j| (0..r).map(|k| sigma[k] * v[(j, k)].abs() * u_gap[k]).sum::<f64>())
        .fold(0.0, f64::max);

    let p_bar = (0..c)
        .map(|j| (0..n).map(|i| p_matrix[(i, j)]).sum::<f64>() / n as f64)
        .collect();

    Ok(ConsistencyReport {
        p_matrix: p_matrix.clone(),
        sigma,
        v,
        s,
        s_max,
        eps_bound,
        p_bar,
    })
}

/// `softmax(softmax(s) ⊙ p)`.
pub fn refine(teacher_probs: &[f64], s: &[f64]) -> Result<Vec<f64>> {
    if teacher_probs.len() != s.len() {
        return Err(invalid(format!(
            "refine: {} probabilities vs {} scores",
            teacher_probs.len(),
            s.len()
        )));
    }
    let w = softmax(s);
    let z: Vec<f64> = w.iter().zip(teacher_probs).map(|(a, b)| a * b).collect();
    Ok(softmax(&z))
}

pub fn decide(teacher: &ModelParams, x: &[f64], cfg: &RfpConfig, seed: u64) -> Result<RfpDecision> {
    cfg.validate()?;
    let pred = forward(teacher, x, None)?;
    let h = entropy(&pred.probs);
    if h <= cfg.entropy_threshold(teacher.dims().classes) {
        return Ok(RfpDecision {
            kind: DecisionKind::DirectGuide,
            guidance: Some(pred.probs),
            report: None,
            entropy: h,
        });
    }
    let report = consistency_distribution(&consistency_matrix(teacher, x, cfg, seed)?)?;
    if report.s_max < cfg.tau {
        return Ok(RfpDecision {
            kind: DecisionKind::Discard,
            guidance: None,
            report: Some(report),
            entropy: h,
        });
    }
    let guidance = refine(&pred.probs, &report.s)?;
    Ok(RfpDecision {
        kind: DecisionKind::RefinedGuide,
        guidance: Some(guidance),
        report: Some(report),
        entropy: h,
    })
}
