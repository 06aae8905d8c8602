//! Rating-prediction metrics on a held-out set and seed aggregation.

use std::collections::BTreeMap;

use rand::Rng as _;
use thiserror::Error;

use crate::data::RatingDataset;
use crate::model::RatingPredictor;
use crate::rng::rng_from_seed;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("cannot evaluate on an empty test set")]
    EmptyTest,
    #[error("need at least one value")]
    NoValues,
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    /// Mean over users with at least one test triple of their own RMSE.
    pub rmse_user: f64,
    pub rmse_item: f64,
    pub num_triples: usize,
    pub num_users: usize,
    pub num_items: usize,
}

fn mean_rmse(groups: &BTreeMap<usize, (f64, usize)>) -> f64 {
    groups
        .values()
        .map(|&(s, n)| (s / n as f64).sqrt())
        .sum::<f64>()
        / groups.len() as f64
}

/// Evaluates `model` on every triple of `test`.
pub fn evaluate<P: RatingPredictor + ?Sized>(
    model: &P,
    test: &RatingDataset,
) -> Result<MetricReport, MetricsError> {
    if test.is_empty() {
        return Err(MetricsError::EmptyTest);
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut per_user: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut per_item: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for t in test.iter() {
        let err = model.predict_rating(t.user, t.item) - t.value as f64;
        let sq = err * err;
        se += sq;
        ae += err.abs();
        let e = per_user.entry(t.user).or_default();
        e.0 += sq;
        e.1 += 1;
        let e = per_item.entry(t.item).or_default();
        e.0 += sq;
        e.1 += 1;
    }
    let n = test.len() as f64;
    let mse = se / n;
    Ok(MetricReport {
        mse,
        mae: ae / n,
        rmse: mse.sqrt(),
        rmse_user: mean_rmse(&per_user),
        rmse_item: mean_rmse(&per_item),
        num_triples: test.len(),
        num_users: per_user.len(),
        num_items: per_item.len(),
    })
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one
/// value).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64), MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::NoValues);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Resampled means of `values`, sorted ascending.
pub fn bootstrap_means(values: &[f64], resamples: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    means
}

/// Percentile bootstrap confidence interval for the mean.
pub fn bootstrap_ci(
    values: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64), MetricsError> {
    if values.is_empty() || resamples == 0 {
        return Err(MetricsError::NoValues);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(MetricsError::InvalidLevel(level));
    }
    let means = bootstrap_means(values, resamples, seed);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&means, tail), quantile(&means, 1.0 - tail)))
}
