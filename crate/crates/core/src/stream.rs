//! Synthetic domain-shift streams.
//!
//! Each domain is a Gaussian mixture: class `c` emits
//! `x = R(θ)·μ_c + shift + scale·z` with `z ~ N(0, I)` and `R(θ)` a block
//! rotation acting on coordinate pairs `(0,1), (2,3), …`. Batches are
//! class-balanced. Labels travel with the batch for scoring only.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{check_dim, invalid, Result};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, rng_for, standard_normal, tag};

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    /// `C × d`, one row per class.
    pub class_means: Matrix,
    pub class_cov_scale: f64,
    pub rotation_angle: f64,
    pub shift: Vec<f64>,
    pub label_noise: f64,
}

impl DomainSpec {
    pub fn classes(&self) -> usize {
        self.class_means.rows()
    }

    pub fn dim(&self) -> usize {
        self.class_means.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, d) = self.class_means.shape();
        if c < 2 {
            return Err(invalid(format!("domain {}: needs at least 2 classes", self.name)));
        }
        if d == 0 {
            return Err(invalid(format!("domain {}: zero feature dimension", self.name)));
        }
        check_dim("domain shift length", d, self.shift.len())?;
        if !(self.class_cov_scale > 0.0 && self.class_cov_scale.is_finite()) {
            return Err(invalid(format!("domain {}: class_cov_scale must be > 0", self.name)));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(invalid(format!("domain {}: label_noise outside [0, 1)", self.name)));
        }
        if !self.rotation_angle.is_finite() || !self.class_means.is_finite() {
            return Err(invalid(format!("domain {}: non-finite geometry", self.name)));
        }
        for a in 0..c {
            for b in (a + 1)..c {
                if self.class_means.row(a) == self.class_means.row(b) {
                    return Err(invalid(format!(
                        "domain {}: classes {a} and {b} share a mean",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Class means after rotation and translation.
    pub fn effective_means(&self) -> Matrix {
        let (c, d) = self.class_means.shape();
        let (s, co) = self.rotation_angle.sin_cos();
        let mut out = Matrix::zeros(c, d);
        for k in 0..c {
            let m = self.class_means.row(k);
            let row = out.row_mut(k);
            let mut j = 0;
            while j + 1 < d {
                row[j] = co * m[j] - s * m[j + 1];
                row[j + 1] = s * m[j] + co * m[j + 1];
                j += 2;
            }
            if d % 2 == 1 {
                row[d - 1] = m[d - 1];
            }
            for (r, sh) in row.iter_mut().zip(&self.shift) {
                *r += sh;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `batch × d` features.
    pub x: Matrix,
    /// Ground truth. Scoring only.
    pub y: Vec<usize>,
    pub domain_id: usize,
    pub step: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Draws `n` class-balanced samples. Deterministic in `(seed, counter)`.
pub fn sample_batch(spec: &DomainSpec, n: usize, seed: u64, counter: u64) -> Result<Batch> {
    spec.validate()?;
    if n == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let c = spec.classes();
    let d = spec.dim();
    let means = spec.effective_means();
    let mut rng = rng_for(seed, &[tag::STREAM, counter]);

    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    // Rotate which classes receive the remainder so small batches stay fair.
    let offset = rng.gen_range(0..c);
    for l in &mut labels {
        *l = (*l + offset) % c;
    }
    labels.shuffle(&mut rng);

    let mut x = Matrix::zeros(n, d);
    for (i, &cls) in labels.iter().enumerate() {
        let row = x.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = means[(cls, j)] + spec.class_cov_scale * standard_normal(&mut rng);
        }
    }
    let y = labels
        .into_iter()
        .map(|cls| {
            if spec.label_noise > 0.0 && rng.gen::<f64>() < spec.label_noise {
                rng.gen_range(0..c)
            } else {
                cls
            }
        })
        .collect();
    Ok(Batch {
        x,
        y,
        domain_id: 0,
        step: counter as usize,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSchedule {
    pub domains: Vec<(DomainSpec, usize)>,
    pub batch_size: usize,
    pub seed: u64,
}

impl StreamSchedule {
    pub fn total_steps(&self) -> usize {
        self.domains.iter().map(|(_, s)| s).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(invalid("schedule has no domains"));
        }
        if self.total_steps() == 0 {
            return Err(invalid("schedule has zero total steps"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        let (c, d) = self.domains[0].0.class_means.shape();
        for (spec, _) in &self.domains {
            spec.validate()?;
            check_dim("classes across domains", c, spec.classes())?;
            check_dim("feature dim across domains", d, spec.dim())?;
        }
        Ok(())
    }

    /// Steps at which a new domain begins, excluding step 0.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut at = 0;
        for (i, (_, steps)) in self.domains.iter().enumerate() {
            if i > 0 && *steps > 0 {
                out.push(at);
            }
            at += steps;
        }
        out
    }

    /// Same domains in a Fisher–Yates order drawn from `order_seed`.
    pub fn shuffled(&self, order_seed: u64) -> StreamSchedule {
        let mut domains = self.domains.clone();
        domains.shuffle(&mut rng_for(order_seed, &[tag::ORDER]));
        StreamSchedule {
            domains,
            ..self.clone()
        }
    }
}

/// Sequential batch iterator over a schedule.
#[derive(Debug, Clone)]
pub struct Stream<'a> {
    schedule: &'a StreamSchedule,
    domain: usize,
    within: usize,
    step: usize,
}

impl Iterator for Stream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        while self.domain < self.schedule.domains.len()
            && self.within >= self.schedule.domains[self.domain].1
        {
            self.domain += 1;
            self.within = 0;
        }
        let (spec, _) = self.schedule.domains.get(self.domain)?;
        let seed = derive_seed(self.schedule.seed, &[tag::DOMAIN, self.domain as u64]);
        let mut batch = sample_batch(spec, self.schedule.batch_size, seed, self.within as u64)
            .expect("schedule validated on construction");
        batch.domain_id = self.domain;
        batch.step = self.step;
        self.within += 1;
        self.step += 1;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.schedule.total_steps() - self.step;
        (left, Some(left))
    }
}

impl ExactSizeIterator for Stream<'_> {}

pub fn make_stream(schedule: &StreamSchedule) -> Result<Stream<'_>> {
    schedule.validate()?;
    Ok(Stream {
        schedule,
        domain: 0,
        within: 0,
        step: 0,
    })
}

/// Geometry knobs for the built-in presets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresetParams {
    pub dim: usize,
    pub classes: usize,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    pub cov_scale: f64,
    /// Shift norm of the last domain; earlier domains scale linearly.
    pub max_shift: f64,
    /// Rotation of the last domain, radians.
    pub max_rotation: f64,
    /// Extra isotropic noise of the last domain, as a multiple of `cov_scale`.
    pub max_noise_growth: f64,
    pub label_noise: f64,
}

impl Default for PresetParams {
    fn default() -> Self {
        Self {
            dim: 16,
            classes: 4,
            separation: 3.0,
            cov_scale: 1.0,
            max_shift: 3.0,
            max_rotation: 0.8,
            max_noise_growth: 0.0,
            label_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Short,
    Long,
}

impl Preset {
    pub fn domain_count(self) -> usize {
        match self {
            Preset::Short => 3,
            Preset::Long => 5,
        }
    }

    pub fn parse(s: &str) -> Option<Preset> {
        match s {
            "short" => Some(Preset::Short),
            "long" => Some(Preset::Long),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Short => "short",
            Preset::Long => "long",
        }
    }
}

/// Class means shared by every domain of a preset: random directions of norm
/// `separation`, drawn from `seed`.
pub fn preset_class_means(p: &PresetParams, seed: u64) -> Matrix {
    let mut rng = rng_for(seed, &[tag::DOMAIN, u64::MAX]);
    let mut m = Matrix::zeros(p.classes, p.dim);
    for c in 0..p.classes {
        let row = m.row_mut(c);
        for v in row.iter_mut() {
            *v = standard_normal(&mut rng);
        }
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in row.iter_mut() {
            *v *= p.separation / n;
        }
    }
    m
}

/// The unshifted source domain the model is trained on.
pub fn source_domain(p: &PresetParams, seed: u64) -> DomainSpec {
    DomainSpec {
        name: "source".into(),
        class_means: preset_class_means(p, seed),
        class_cov_scale: p.cov_scale,
        rotation_angle: 0.0,
        shift: vec![0.0; p.dim],
        label_noise: 0.0,
    }
}

/// Target domains of a preset, shift growing with the index.
pub fn preset_domains(preset: Preset, p: &PresetParams, seed: u64) -> Vec<DomainSpec> {
    let means = preset_class_means(p, seed);
    let k = preset.domain_count();
    (1..=k)
        .map(|i| {
            let frac = i as f64 / k as f64;
            let mut rng = rng_for(seed, &[tag::DOMAIN, i as u64]);
            let mut dir: Vec<f64> = (0..p.dim).map(|_| standard_normal(&mut rng)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut dir {
                *v *= frac * p.max_shift / n;
            }
            DomainSpec {
                name: format!("{}-{}", preset.name(), i),
                class_means: means.clone(),
                class_cov_scale: p.cov_scale * (1.0 + frac * p.max_noise_growth),
                rotation_angle: frac * p.max_rotation,
                shift: dir,
                label_noise: p.label_noise,
            }
        })
        .collect()
}

pub fn preset_schedule(
    preset: Preset,
    p: &PresetParams,
    steps_per_domain: usize,
    batch_size: usize,
    seed: u64,
) -> StreamSchedule {
    StreamSchedule {
        domains: preset_domains(preset, p, seed)
            .into_iter()
            .map(|d| (d, steps_per_domain))
            .collect(),
        batch_size,
        seed,
    }
}
