//! Smoothing, k-step prediction envelopes and evaluation metrics.

mod export;

pub use export::{write_confusion_csv, write_envelope_csv, write_metrics_csv, write_states_csv, write_usage_csv};

use rand::Rng;

use crate::diffmath::{Matrix, Tape};
use crate::error::{GdmError, Result};
use crate::gumbel::{gs_relax, sample_gumbel};
use crate::inference::{posterior_sample, PosteriorParams};
use crate::model::{check_simplex_rows, GdmParams, ObsSeries, SoftStateSeq};

pub const DEFAULT_KNN: usize = 5;
pub const DEFAULT_ROLLOUTS: usize = 64;

/// Pooled coefficient of determination `1 - SSE/SST` over every coordinate,
/// with `SST` taken around each coordinate's own mean.
pub fn r_squared(y: &Matrix, yhat: &Matrix) -> Result<f64> {
    if y.shape() != yhat.shape() {
        return Err(y.mismatch("r_squared", yhat));
    }
    if y.is_empty() {
        return Err(GdmError::InvalidArgument("R^2 of an empty series".into()));
    }
    let mean = y.column_means();
    let sse: f64 = y.data().iter().zip(yhat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let sst: f64 = (0..y.rows())
        .flat_map(|t| y.row(t).iter().zip(mean.row(0)).map(|(a, m)| (a - m) * (a - m)))
        .sum();
    if sst == 0.0 {
        return Err(GdmError::InvalidArgument("R^2 undefined for a constant series".into()));
    }
    Ok(1.0 - sse / sst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    /// `T x N`: `yhat_1 = z_1 . mu`, `yhat_t` the conditional mean given
    /// `z_t` and `y_{t-1}`.
    pub yhat: Matrix,
    pub r2: f64,
}

pub fn smooth(model: &GdmParams, z: &SoftStateSeq, y: &ObsSeries) -> Result<Smoothed> {
    model.validate()?;
    if y.is_empty() {
        return Err(GdmError::InvalidArgument("cannot smooth an empty series".into()));
    }
    if z.len() != y.len() || z.k() != model.k() || y.dim() != model.n() {
        return Err(GdmError::Dimension(format!(
            "smooth: z is {}x{}, y is {}x{}, model K={}, N={}",
            z.len(),
            z.k(),
            y.len(),
            y.dim(),
            model.k(),
            model.n()
        )));
    }
    check_simplex_rows(&z.z, 1e-9, true)?;
    let tape = Tape::new();
    let m = model.bind_constants(&tape)?;
    let yhat = m
        .smoothed_means(tape.constant(z.z.clone()), tape.constant(y.y.clone()))?
        .value()
        .clone();
    let r2 = r_squared(&y.y, &yhat)?;
    Ok(Smoothed { yhat, r2 })
}

/// Smoothing from posterior draws; with `draws > 1` the smoothed means of
/// the draws are averaged.
pub fn smooth_posterior<R: Rng + ?Sized>(
    model: &GdmParams,
    post: &PosteriorParams,
    y: &ObsSeries,
    draws: usize,
    rng: &mut R,
) -> Result<Smoothed> {
    if draws == 0 {
        return Err(GdmError::InvalidArgument("need at least one posterior draw".into()));
    }
    let mut acc = Matrix::zeros(y.len(), y.dim());
    for _ in 0..draws {
        let (z, _) = posterior_sample(post, y, rng)?;
        acc.add_assign(&smooth(model, &z, y)?.yhat);
    }
    let yhat = acc.scale(1.0 / draws as f64);
    let r2 = r_squared(&y.y, &yhat)?;
    Ok(Smoothed { yhat, r2 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionEnvelope {
    pub horizon: usize,
    /// `mean[h-1]` row `t` is the mean prediction of `y_{t+h}` made from
    /// start `t` (0-based), `T x N`.
    pub mean: Vec<Matrix>,
    /// Spread of the rollouts combined with the observation noise:
    /// `std^2 = var(rollout means) + sigma^2`.
    pub std: Vec<Matrix>,
    pub draws: usize,
}

impl PredictionEnvelope {
    /// Mean envelope width `2 * width * std` over starts with a target and
    /// all coordinates, at step `h` (1-based).
    pub fn mean_width(&self, h: usize, width: f64) -> Result<f64> {
        let std = self.at(h)?.1;
        let rows = std.rows().saturating_sub(h);
        if rows == 0 {
            return Err(GdmError::InvalidArgument("series too short for this horizon".into()));
        }
        let s: f64 = (0..rows).flat_map(|t| std.row(t).iter()).sum();
        Ok(2.0 * width * s / (rows * std.cols()) as f64)
    }

    fn at(&self, h: usize) -> Result<(&Matrix, &Matrix)> {
        if h == 0 || h > self.horizon {
            return Err(GdmError::InvalidArgument(format!("step {h} outside horizon 1..={}", self.horizon)));
        }
        Ok((&self.mean[h - 1], &self.std[h - 1]))
    }

    /// Fraction of targets `y_{t+h}` (all coordinates) inside
    /// `mean +/- width * std`.
    pub fn coverage(&self, y: &ObsSeries, h: usize, width: f64) -> Result<f64> {
        let (mean, std) = self.at(h)?;
        if mean.shape() != y.y.shape() {
            return Err(mean.mismatch("coverage", &y.y));
        }
        let rows = y.len().saturating_sub(h);
        if rows == 0 {
            return Err(GdmError::InvalidArgument("series too short for this horizon".into()));
        }
        let mut inside = 0usize;
        for t in 0..rows {
            for j in 0..y.dim() {
                if (y.y[(t + h, j)] - mean[(t, j)]).abs() <= width * std[(t, j)] {
                    inside += 1;
                }
            }
        }
        Ok(inside as f64 / (rows * y.dim()) as f64)
    }
}

/// `draws` stochastic rollouts of `horizon` steps from every start `t`: a
/// posterior draw supplies `z_t`, then transition, relaxed draw and
/// conditional mean are iterated with the predicted observations fed back.
pub fn predict_k<R: Rng + ?Sized>(
    model: &GdmParams,
    post: &PosteriorParams,
    y: &ObsSeries,
    horizon: usize,
    draws: usize,
    rng: &mut R,
) -> Result<PredictionEnvelope> {
    if horizon < 1 {
        return Err(GdmError::InvalidArgument("horizon must be at least 1".into()));
    }
    if draws < 2 {
        return Err(GdmError::InvalidArgument("an envelope needs at least 2 rollouts".into()));
    }
    model.validate()?;
    if y.dim() != model.n() || post.k() != model.k() {
        return Err(GdmError::Dimension(format!(
            "predict: series N={}, posterior K={}, model K={} N={}",
            y.dim(),
            post.k(),
            model.k(),
            model.n()
        )));
    }
    let (t_len, n, k) = (y.len(), y.dim(), model.k());
    // Running mean and sum of squared deviations per entry.
    let mut mean = vec![Matrix::zeros(t_len, n); horizon];
    let mut m2 = vec![Matrix::zeros(t_len, n); horizon];

    for r in 0..draws {
        let count = (r + 1) as f64;
        let (z0, _) = posterior_sample(post, y, rng)?;
        let gumbels: Vec<Matrix> = (0..horizon).map(|_| sample_gumbel(rng, t_len, k)).collect();
        let tape = Tape::new();
        let m = model.bind_constants(&tape)?;
        let yv = tape.constant(y.y.clone());
        let mut z = tape.constant(z0.z);
        let mut u = m.project(yv)?;
        let mut h = m.transition.hidden_sequence(u)?;
        for (step, g) in gumbels.iter().enumerate() {
            let (logits, h_new) = m.transition.step(z, u, h)?;
            z = gs_relax(logits, g, model.temperature)?;
            let yhat = m.obs_mean(z, u)?;
            u = m.project(yhat)?;
            h = h_new;
            let v = yhat.value();
            let (mu, ss) = (mean[step].data_mut(), m2[step].data_mut());
            for (i, &x) in v.data().iter().enumerate() {
                let delta = x - mu[i];
                mu[i] += delta / count;
                ss[i] += delta * (x - mu[i]);
            }
        }
    }

    let dm = draws as f64;
    let std = m2
        .iter()
        .map(|ss| {
            Matrix::from_fn(t_len, n, |t, j| {
                let sigma = model.obs_noise[(0, j)];
                (ss[(t, j)] / (dm - 1.0) + sigma * sigma).sqrt()
            })
        })
        .collect();
    Ok(PredictionEnvelope {
        horizon,
        mean,
        std,
        draws,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateAccuracyReport {
    pub accuracy: f64,
    pub k_neighbors: usize,
    /// `confusion[true][predicted]` counts over the test set.
    pub confusion: Vec<Vec<usize>>,
}

fn check_labels(z: &Matrix, labels: &[usize], what: &str) -> Result<()> {
    if z.rows() != labels.len() {
        return Err(GdmError::Dimension(format!(
            "{what}: {} state rows but {} labels",
            z.rows(),
            labels.len()
        )));
    }
    check_simplex_rows(z, 1e-6, true)
}

/// k-nearest-neighbour classifier from inferred states to true labels,
/// fitted on the training pair and scored on the test pair. Euclidean
/// distance; vote ties go to the smallest label.
pub fn state_accuracy(
    z_train: &Matrix,
    labels_train: &[usize],
    z_test: &Matrix,
    labels_test: &[usize],
    k: usize,
) -> Result<StateAccuracyReport> {
    check_labels(z_train, labels_train, "train")?;
    check_labels(z_test, labels_test, "test")?;
    if k == 0 {
        return Err(GdmError::InvalidArgument("k must be at least 1".into()));
    }
    if k > labels_train.len() {
        return Err(GdmError::InvalidArgument(format!(
            "k = {k} exceeds the {} training points",
            labels_train.len()
        )));
    }
    if z_train.cols() != z_test.cols() {
        return Err(z_train.mismatch("state_accuracy", z_test));
    }
    if labels_test.is_empty() {
        return Err(GdmError::InvalidArgument("empty test set".into()));
    }
    let classes = labels_train.iter().chain(labels_test).max().map_or(0, |m| m + 1);
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(labels_train.len());
    for (t, &truth) in labels_test.iter().enumerate() {
        let q = z_test.row(t);
        dist.clear();
        for (i, _) in labels_train.iter().enumerate() {
            let d: f64 = z_train.row(i).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            dist.push((d, i));
        }
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; classes];
        for &(_, i) in &dist[..k] {
            votes[labels_train[i]] += 1;
        }
        let mut pred = 0;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[pred] {
                pred = c;
            }
        }
        confusion[truth][pred] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(StateAccuracyReport {
        accuracy: correct as f64 / labels_test.len() as f64,
        k_neighbors: k,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassUsage {
    pub class: usize,
    /// Number of time steps with this label.
    pub steps: usize,
    /// `(state, presence ratio)` in descending order of ratio.
    pub states: Vec<(usize, f64)>,
}

/// For each labelled class, the inferred states whose weight exceeds
/// `presence` in at least a `coverage` fraction of the class's steps.
pub fn state_usage(z: &SoftStateSeq, labels: &[usize], presence: f64, coverage: f64) -> Result<Vec<ClassUsage>> {
    for (name, v) in [("presence", presence), ("coverage", coverage)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(GdmError::InvalidArgument(format!("{name} threshold must lie in (0, 1), got {v}")));
        }
    }
    if z.len() != labels.len() {
        return Err(GdmError::Dimension(format!(
            "{} state rows but {} labels",
            z.len(),
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = Vec::new();
    for c in 0..classes {
        let steps: Vec<usize> = (0..labels.len()).filter(|&t| labels[t] == c).collect();
        if steps.is_empty() {
            continue;
        }
        let mut states: Vec<(usize, f64)> = (0..z.k())
            .map(|s| {
                let hits = steps.iter().filter(|&&t| z.z[(t, s)] > presence).count();
                (s, hits as f64 / steps.len() as f64)
            })
            .filter(|&(_, r)| r >= coverage)
            .collect();
        states.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out.push(ClassUsage {
            class: c,
            steps: steps.len(),
            states,
        });
    }
    Ok(out)
}
