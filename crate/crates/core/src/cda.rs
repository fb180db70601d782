//! Domain tracking by incremental PCA and the distance-driven EMA weight.
//!
//! The tracker keeps the pooled mean and covariance of every feature vector
//! seen so far. After each batch it recomputes the top-`k` eigenvectors and
//! reports `‖V_t − V_{t+1}‖²_F`, which spikes when the input distribution
//! moves.

use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{covariance, frobenius_norm_sq, sym_eig, Matrix};
use crate::model::ModelParams;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainTracker {
    pub n_seen: u64,
    pub mean: Vec<f64>,
    pub cov: Matrix,
    /// `d × k`, orthonormal sign-fixed columns. Zero before the first batch.
    pub components: Matrix,
    pub k: usize,
    pub last_distance: f64,
}

/// Default number of tracked components for feature dimension `d`.
pub fn default_k(d: usize) -> usize {
    d.min(8)
}

impl DomainTracker {
    pub fn new(dim: usize, k: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("tracker dimension must be at least 1"));
        }
        if k == 0 || k > dim {
            return Err(invalid(format!("tracker k = {k} must lie in [1, {dim}]")));
        }
        Ok(Self {
            n_seen: 0,
            mean: vec![0.0; dim],
            cov: Matrix::zeros(dim, dim),
            components: Matrix::zeros(dim, k),
            k,
            last_distance: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Folds a batch in place and returns the subspace distance.
    pub fn update(&mut self, x: &Matrix) -> Result<f64> {
        let (next, d) = ipca_update(self, x)?;
        *self = next;
        Ok(d)
    }
}

/// Pooled mean/covariance update followed by a fresh eigendecomposition.
pub fn ipca_update(tracker: &DomainTracker, x_batch: &Matrix) -> Result<(DomainTracker, f64)> {
    let d = tracker.dim();
    check_dim("tracker feature dimension", d, x_batch.cols())?;
    if x_batch.rows() == 0 {
        return Err(Error::EmptyInput("ipca batch has no rows"));
    }
    if !x_batch.is_finite() {
        return Err(invalid("ipca batch has non-finite entries"));
    }
    let (mu_hat, c_hat) = covariance(x_batch)?;
    let n = x_batch.rows() as f64;
    let big_n = tracker.n_seen as f64;
    let total = big_n + n;

    let (mean, cov) = if tracker.n_seen == 0 {
        (mu_hat, c_hat)
    } else {
        let delta: Vec<f64> = tracker.mean.iter().zip(&mu_hat).map(|(a, b)| a - b).collect();
        let cross = big_n * n / total;
        let mut cov = Matrix::zeros(d, d);
        for a in 0..d {
            for b in a..d {
                let v = (big_n * tracker.cov[(a, b)] + n * c_hat[(a, b)] + cross * delta[a] * delta[b]) / total;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        let mean = tracker
            .mean
            .iter()
            .zip(&mu_hat)
            .map(|(m, h)| (big_n * m + n * h) / total)
            .collect();
        (mean, cov)
    };

    let eig = sym_eig(&cov)?;
    let components = eig.vectors.leading_cols(tracker.k);
    let distance = if tracker.n_seen == 0 {
        0.0
    } else {
        frobenius_norm_sq(&tracker.components.sub(&components)?)
    };
    Ok((
        DomainTracker {
            n_seen: tracker.n_seen + x_batch.rows() as u64,
            mean,
            cov,
            components,
            k: tracker.k,
            last_distance: distance,
        },
        distance,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaPolicy {
    /// `clamp(1 − distance, bound, 1)`.
    LinearClamp { alpha_bound: f64 },
    /// `bound + (1 − bound)·exp(−distance/κ)`.
    ExpDecay { alpha_bound: f64, kappa: f64 },
}

impl Default for AlphaPolicy {
    fn default() -> Self {
        AlphaPolicy::LinearClamp { alpha_bound: 0.99 }
    }
}

impl AlphaPolicy {
    pub fn alpha_bound(&self) -> f64 {
        match *self {
            AlphaPolicy::LinearClamp { alpha_bound } | AlphaPolicy::ExpDecay { alpha_bound, .. } => alpha_bound,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.alpha_bound();
        if !(b > 0.0 && b < 1.0) {
            return Err(invalid(format!("alpha_bound {b} must lie in (0, 1)")));
        }
        if let AlphaPolicy::ExpDecay { kappa, .. } = *self {
            if !(kappa > 0.0 && kappa.is_finite()) {
                return Err(invalid(format!("kappa {kappa} must be positive")));
            }
        }
        Ok(())
    }
}

pub fn alpha_from_distance(distance: f64, policy: &AlphaPolicy) -> f64 {
    let distance = if distance.is_nan() { f64::INFINITY } else { distance.max(0.0) };
    match *policy {
        AlphaPolicy::LinearClamp { alpha_bound } => (1.0 - distance).clamp(alpha_bound, 1.0),
        AlphaPolicy::ExpDecay { alpha_bound, kappa } => {
            alpha_bound + (1.0 - alpha_bound) * (-distance / kappa).exp()
        }
    }
}

/// `d·‖θᵀ' − θˢ'‖² + (1 − d)·‖θᵀ' − θᵀ‖²` with `d` clipped to `[0, 1]`.
/// The EMA step with `α = 1 − d` is its minimizer.
pub fn tradeoff_objective(
    theta_t_next: &ModelParams,
    theta_s_next: &ModelParams,
    theta_t_prev: &ModelParams,
    distance: f64,
) -> Result<f64> {
    theta_t_next.check_same_dims(theta_s_next)?;
    theta_t_next.check_same_dims(theta_t_prev)?;
    let d = distance.clamp(0.0, 1.0);
    Ok(d * theta_t_next.dist_sq(theta_s_next) + (1.0 - d) * theta_t_next.dist_sq(theta_t_prev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, standard_normal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rng_for(seed, &[]);
        Matrix::from_fn(rows, cols, |_, j| (j + 1) as f64 * standard_normal(&mut rng))
    }

    #[test]
    fn first_batch_initializes_with_zero_distance() {
        let t = DomainTracker::new(4, 2).unwrap();
        let x = gaussian(10, 4, 1);
        let (t1, dist) = ipca_update(&t, &x).unwrap();
        assert_eq!(dist, 0.0);
        assert_eq!(t1.n_seen, 10);
        let (m, c) = covariance(&x).unwrap();
        assert_eq!(t1.mean, m);
        assert_eq!(t1.cov, c);
    }

    #[test]
    fn equal_means_drop_cross_term() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let b = Matrix::from_rows(&[vec![0.0, 2.0], vec![0.0, -2.0], vec![0.0, 0.0]]);
        let mut t = DomainTracker::new(2, 1).unwrap();
        t.update(&a).unwrap();
        t.update(&b).unwrap();
        let (_, ca) = covariance(&a).unwrap();
        let (_, cb) = covariance(&b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = (2.0 * ca[(i, j)] + 3.0 * cb[(i, j)]) / 5.0;
                assert!((t.cov[(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn chunked_updates_match_single_batch() {
        let x = gaussian(57, 5, 3);
        let mut t = DomainTracker::new(5, 3).unwrap();
        for (lo, hi) in [(0, 9), (9, 10), (10, 30), (30, 44), (44, 57)] {
            let chunk = Matrix::from_fn(hi - lo, 5, |i, j| x[(lo + i, j)]);
            t.update(&chunk).unwrap();
        }
        let (m, c) = covariance(&x).unwrap();
        for (a, b) in t.mean.iter().zip(&m) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(t.cov.max_abs_diff(&c) < 1e-10);
    }

    #[test]
    fn repeated_batch_distance_vanishes() {
        // The pooled covariance of k copies of one batch is that batch's
        // covariance, so only round-off remains after the first update.
        let x = gaussian(40, 4, 7);
        let mut t = DomainTracker::new(4, 2).unwrap();
        let dists: Vec<f64> = (0..10).map(|_| t.update(&x).unwrap()).collect();
        assert_eq!(dists[0], 0.0);
        assert!(dists[1..].iter().all(|&d| d < 1e-20), "{dists:?}");
        assert!(dists[9] < 1e-6);
    }

    #[test]
    fn drift_toward_a_new_batch_settles() {
        let a = gaussian(40, 4, 7);
        let b = Matrix::from_fn(40, 4, |i, j| a[(i, (j + 1) % 4)]);
        let mut t = DomainTracker::new(4, 2).unwrap();
        t.update(&a).unwrap();
        let dists: Vec<f64> = (0..40).map(|_| t.update(&b).unwrap()).collect();
        assert!(dists[0] > dists[39]);
        assert!(dists[39] < 1e-3, "{dists:?}");
    }

    #[test]
    fn alpha_hand_values() {
        let p = AlphaPolicy::default();
        assert_eq!(alpha_from_distance(0.0, &p), 1.0);
        assert_eq!(alpha_from_distance(0.5, &p), 0.99);
        assert!((alpha_from_distance(0.004, &p) - 0.996).abs() < 1e-15);
        let e = AlphaPolicy::ExpDecay {
            alpha_bound: 0.99,
            kappa: 0.1,
        };
        assert_eq!(alpha_from_distance(0.0, &e), 1.0);
        assert!(alpha_from_distance(100.0, &e) >= 0.99);
    }

    #[test]
    fn tradeoff_extremes() {
        let d = crate::model::ModelDims::linear(2, 2);
        let s = ModelParams::init(d, 1).unwrap();
        let t = ModelParams::init(d, 2).unwrap();
        assert_eq!(tradeoff_objective(&s, &s, &t, 1.0).unwrap(), 0.0);
        assert_eq!(tradeoff_objective(&t, &s, &t, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(DomainTracker::new(3, 4).is_err());
        let t = DomainTracker::new(3, 2).unwrap();
        assert!(matches!(
            ipca_update(&t, &Matrix::zeros(2, 4)),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
