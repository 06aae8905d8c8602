//! Semi-synthetic selection-bias simulator.
//!
//! A dense engagement matrix (generated, or loaded from disk) is turned into
//! a fully known 5-star rating matrix by quantile conversion. Logged data is
//! then sampled cell by cell with probability
//! `gamma * rating_propensity[y] + (1 - gamma) * item_propensity[i]`, and an
//! unbiased sample of a fixed number of items per user is split into a small
//! MCAR set and a test set.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    split_biased, split_unbiased, DataError, IdMap, Rating, RatingDataset, RatingScale, SplitBundle,
};
use crate::propensity::{PropensityError, PropensityModel};
use crate::rng::{derive_seed, rng_from_seed};

/// Target share of each rating value 1..5 after conversion.
pub const RATING_DISTRIBUTION: [f64; 5] = [0.5148, 0.2525, 0.1496, 0.0554, 0.0277];

/// Observation probability of each rating value 1..5 under pure
/// positivity bias.
pub const RATING_PROPENSITIES: [f64; 5] = [0.0123, 0.0102, 0.0213, 0.0568, 0.1795];

pub const POWERLAW_ETA: f64 = 1.4;
pub const POWERLAW_K_MIN: f64 = 20.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation parameter {field}: {message}")]
    Invalid {
        field: &'static str,
        message: String,
    },

    #[error("engagement file {path} line {line}: {message}")]
    Engagement {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("observation probability {value} for item {item}, rating {rating} is outside [0, 1]")]
    Probability { item: usize, rating: u8, value: f64 },

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Propensity(#[from] PropensityError),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn invalid(field: &'static str, message: impl Into<String>) -> SimError {
    SimError::Invalid {
        field,
        message: message.into(),
    }
}

/// Row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, SimError> {
        if data.len() != rows * cols {
            return Err(invalid(
                "engagement",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// Fully observed integer rating matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMatrix {
    num_users: usize,
    num_items: usize,
    scale: RatingScale,
    ratings: Vec<u8>,
}

impl GroundTruthMatrix {
    pub fn new(
        num_users: usize,
        num_items: usize,
        scale: RatingScale,
        ratings: Vec<u8>,
    ) -> Result<Self, SimError> {
        if ratings.len() != num_users * num_items {
            return Err(invalid("ratings", "size does not match dimensions"));
        }
        if let Some(bad) = ratings.iter().find(|&&r| !scale.contains(r)) {
            return Err(invalid("ratings", format!("value {bad} outside the scale")));
        }
        Ok(GroundTruthMatrix {
            num_users,
            num_items,
            scale,
            ratings,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn scale(&self) -> RatingScale {
        self.scale
    }

    pub fn get(&self, user: usize, item: usize) -> u8 {
        self.ratings[user * self.num_items + item]
    }

    pub fn ratings(&self) -> &[u8] {
        &self.ratings
    }

    /// Every cell as a dataset.
    pub fn to_dataset(&self) -> RatingDataset {
        let triples = (0..self.num_users)
            .flat_map(|u| (0..self.num_items).map(move |i| (u, i)))
            .map(|(u, i)| Rating::new(u, i, self.get(u, i)))
            .collect();
        RatingDataset::new(self.num_users, self.num_items, self.scale, triples)
            .expect("cells are unique and in range")
    }

    pub fn item_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.num_items];
        for u in 0..self.num_users {
            for (i, s) in sums.iter_mut().enumerate() {
                *s += self.get(u, i) as f64;
            }
        }
        sums.iter().map(|s| s / self.num_users as f64).collect()
    }
}

/// Quantile conversion of real engagement values to ratings `1..=k` where
/// `k = target.len()`.
///
/// Cells are sorted ascending (stable, so equal values keep row-major
/// order). Bucket `r` ends at `floor(cumulative_fraction_r * n)`; cells past
/// the last threshold go to the top rating.
pub fn convert_to_ratings(
    engagement: &DenseMatrix,
    target: &[f64],
) -> Result<GroundTruthMatrix, SimError> {
    let total: f64 = target.iter().sum();
    if target.is_empty() || target.len() > u8::MAX as usize || (total - 1.0).abs() > 1e-6 {
        return Err(invalid(
            "rating_distribution",
            format!("fractions must sum to 1, got {total}"),
        ));
    }
    if target.iter().any(|&f| !(f >= 0.0)) {
        return Err(invalid(
            "rating_distribution",
            "fractions must be non-negative",
        ));
    }
    if engagement.data.iter().any(|v| !v.is_finite()) {
        return Err(invalid("engagement", "non-finite value"));
    }
    let n = engagement.data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| engagement.data[a].total_cmp(&engagement.data[b]));

    let mut ratings = vec![target.len() as u8; n];
    let mut cumulative = 0.0;
    let mut start = 0usize;
    for (k, &f) in target.iter().enumerate().take(target.len() - 1) {
        cumulative += f;
        let end = ((cumulative * n as f64 + 1e-9).floor() as usize).clamp(start, n);
        for &cell in &order[start..end] {
            ratings[cell] = k as u8 + 1;
        }
        start = end;
    }
    let scale = RatingScale::new(1, target.len() as u8)?;
    GroundTruthMatrix::new(engagement.rows, engagement.cols, scale, ratings)
}

/// 1-based rank of every item by mean true rating, highest first; ties go
/// to the lower item index.
pub fn item_ranks(truth: &GroundTruthMatrix) -> Vec<usize> {
    let means = truth.item_means();
    let mut order: Vec<usize> = (0..truth.num_items()).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; order.len()];
    for (pos, &item) in order.iter().enumerate() {
        ranks[item] = pos + 1;
    }
    ranks
}

/// Power-law item propensities `(eta - 1) * (rank / k_min)^(-eta)`, capped
/// at 1. Returns the vector and how many items hit the cap.
pub fn build_item_propensities(
    truth: &GroundTruthMatrix,
    eta: f64,
    k_min: f64,
) -> Result<(Vec<f64>, usize), SimError> {
    if !(eta > 1.0 && eta.is_finite()) {
        return Err(invalid("powerlaw_eta", format!("must exceed 1, got {eta}")));
    }
    if !(k_min >= 1.0 && k_min.is_finite()) {
        return Err(invalid("k_min", format!("must be at least 1, got {k_min}")));
    }
    let mut capped = 0;
    let values = item_ranks(truth)
        .into_iter()
        .map(|rank| {
            let raw = powerlaw(rank, eta, k_min);
            if raw > 1.0 {
                capped += 1;
            }
            raw.min(1.0)
        })
        .collect();
    info!(
        "item propensities: {capped} of {} items capped at 1",
        truth.num_items()
    );
    Ok((values, capped))
}

/// Uncapped power-law value at `rank`.
pub fn powerlaw(rank: usize, eta: f64, k_min: f64) -> f64 {
    (eta - 1.0) * (rank as f64 / k_min).powf(-eta)
}

/// Item-major `|I| x |R|` table of `gamma * rho_r + (1 - gamma) * rho_i`.
pub fn observation_table(
    rating_propensities: &[f64],
    item_propensities: &[f64],
    gamma: f64,
) -> Result<Vec<f64>, SimError> {
    let mut table = Vec::with_capacity(item_propensities.len() * rating_propensities.len());
    for (item, &pi) in item_propensities.iter().enumerate() {
        for (k, &pr) in rating_propensities.iter().enumerate() {
            let value = gamma * pr + (1.0 - gamma) * pi;
            if !(0.0..=1.0).contains(&value) {
                return Err(SimError::Probability {
                    item,
                    rating: k as u8 + 1,
                    value,
                });
            }
            table.push(value);
        }
    }
    Ok(table)
}

/// Samples a logged dataset: each cell is kept independently with its
/// interpolated probability. Also returns the exact probabilities as a
/// ground-truth propensity model.
pub fn sample_observations(
    truth: &GroundTruthMatrix,
    rating_propensities: &[f64],
    item_propensities: &[f64],
    gamma: f64,
    seed: u64,
) -> Result<(RatingDataset, PropensityModel), SimError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid("gamma", format!("must lie in [0, 1], got {gamma}")));
    }
    if rating_propensities.len() != truth.scale().len() {
        return Err(invalid(
            "rating_propensities",
            "one value per rating level required",
        ));
    }
    if item_propensities.len() != truth.num_items() {
        return Err(invalid("item_propensities", "one value per item required"));
    }
    let table = observation_table(rating_propensities, item_propensities, gamma)?;
    let nr = truth.scale().len();
    let mut rng = rng_from_seed(seed);
    let mut triples = Vec::new();
    for u in 0..truth.num_users() {
        for i in 0..truth.num_items() {
            let y = truth.get(u, i);
            let p = table[i * nr + truth.scale().position(y)];
            if rng.random::<f64>() < p {
                triples.push(Rating::new(u, i, y));
            }
        }
    }
    let data = RatingDataset::new(truth.num_users(), truth.num_items(), truth.scale(), triples)?;
    let model =
        PropensityModel::ground_truth(truth.num_users(), truth.num_items(), truth.scale(), table)?;
    Ok((data, model))
}

/// Draws `per_user` distinct items uniformly for every user and splits the
/// pooled sample into `(mcar, test)` with `mcar_fraction` going to MCAR.
pub fn sample_unbiased(
    truth: &GroundTruthMatrix,
    per_user: usize,
    mcar_fraction: f64,
    seed: u64,
) -> Result<(RatingDataset, RatingDataset), SimError> {
    if per_user == 0 || per_user > truth.num_items() {
        return Err(invalid(
            "unbiased_per_user",
            format!("must lie in 1..={}", truth.num_items()),
        ));
    }
    let mut rng = rng_from_seed(derive_seed(seed, 0));
    let mut triples = Vec::with_capacity(per_user * truth.num_users());
    for u in 0..truth.num_users() {
        let mut items = sample(&mut rng, truth.num_items(), per_user).into_vec();
        items.sort_unstable();
        triples.extend(
            items
                .into_iter()
                .map(|i| Rating::new(u, i, truth.get(u, i))),
        );
    }
    let pooled = RatingDataset::new(truth.num_users(), truth.num_items(), truth.scale(), triples)?;
    Ok(split_unbiased(
        &pooled,
        mcar_fraction,
        derive_seed(seed, 1),
    )?)
}

/// Parameters of the built-in engagement generator: a low-rank user-item
/// interaction plus user and item offsets and Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngagementConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub rank: usize,
    pub factor_std: f64,
    pub user_offset_std: f64,
    pub item_offset_std: f64,
    pub noise_std: f64,
}

impl Default for EngagementConfig {
    fn default() -> Self {
        EngagementConfig {
            num_users: 300,
            num_items: 500,
            rank: 4,
            factor_std: 0.5,
            user_offset_std: 0.5,
            item_offset_std: 0.7,
            noise_std: 0.3,
        }
    }
}

impl EngagementConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.num_users == 0 || self.num_items == 0 {
            return Err(invalid(
                "engagement",
                "num_users and num_items must be positive",
            ));
        }
        for (field, v) in [
            ("engagement.factor_std", self.factor_std),
            ("engagement.user_offset_std", self.user_offset_std),
            ("engagement.item_offset_std", self.item_offset_std),
            ("engagement.noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, format!("must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Generates a dense engagement matrix from `config`.
pub fn generate_engagement(config: &EngagementConfig, seed: u64) -> Result<DenseMatrix, SimError> {
    config.validate()?;
    let (nu, ni, k) = (config.num_users, config.num_items, config.rank);
    let mut rng = rng_from_seed(seed);
    let normal = |std: f64| Normal::new(0.0, std).expect("validated std");
    let mut draw = |n: usize, std: f64| -> Vec<f64> {
        let d = normal(std);
        (0..n).map(|_| d.sample(&mut rng)).collect()
    };
    let users = draw(nu * k, config.factor_std);
    let items = draw(ni * k, config.factor_std);
    let user_offsets = draw(nu, config.user_offset_std);
    let item_offsets = draw(ni, config.item_offset_std);
    let noise = draw(nu * ni, config.noise_std);
    let mut data = Vec::with_capacity(nu * ni);
    for u in 0..nu {
        for i in 0..ni {
            let dot: f64 = (0..k).map(|f| users[u * k + f] * items[i * k + f]).sum();
            data.push(dot + user_offsets[u] + item_offsets[i] + noise[u * ni + i]);
        }
    }
    DenseMatrix::new(nu, ni, data)
}

/// Layout of an engagement file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngagementFormat {
    /// One row per user, one delimited value per item.
    #[default]
    Dense,
    /// `user,item,value` lines; ids are remapped in order of first
    /// appearance and missing cells take the item's mean value.
    Triples,
}

/// Reads an engagement matrix. Blank lines and `#` comments are skipped;
/// fields may be separated by commas, tabs or spaces.
pub fn load_engagement(path: &Path, format: EngagementFormat) -> Result<DenseMatrix, SimError> {
    let file = File::open(path).map_err(|source| SimError::Io {
        path: path.to_owned(),
        source,
    })?;
    let bad = |line: usize, message: String| SimError::Engagement {
        path: path.to_owned(),
        line,
        message,
    };
    let split = |s: &str| -> Vec<String> {
        s.split([',', '\t', ' '])
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect()
    };
    let parse = |line: usize, t: &str| {
        t.parse::<f64>()
            .map_err(|_| bad(line, format!("bad number {t:?}")))
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    let (mut users, mut items) = (IdMap::new(), IdMap::new());
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| SimError::Io {
            path: path.to_owned(),
            source,
        })?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields = split(line);
        match format {
            EngagementFormat::Dense => {
                let row = fields
                    .iter()
                    .map(|t| parse(n + 1, t))
                    .collect::<Result<Vec<_>, _>>()?;
                if let Some(first) = rows.first() {
                    if first.len() != row.len() {
                        return Err(bad(
                            n + 1,
                            format!("{} values, expected {}", row.len(), first.len()),
                        ));
                    }
                }
                rows.push(row);
            }
            EngagementFormat::Triples => {
                if fields.len() != 3 {
                    return Err(bad(
                        n + 1,
                        format!("expected 3 fields, got {}", fields.len()),
                    ));
                }
                let v = parse(n + 1, &fields[2])?;
                cells.push((
                    users.get_or_insert(&fields[0]),
                    items.get_or_insert(&fields[1]),
                    v,
                ));
            }
        }
    }
    match format {
        EngagementFormat::Dense => {
            let cols = rows.first().map_or(0, Vec::len);
            let n_rows = rows.len();
            DenseMatrix::new(n_rows, cols, rows.into_iter().flatten().collect())
        }
        EngagementFormat::Triples => {
            let (nu, ni) = (users.len(), items.len());
            let mut sums = vec![(0.0, 0usize); ni];
            let mut data = vec![None; nu * ni];
            for &(u, i, v) in &cells {
                if data[u * ni + i].replace(v).is_none() {
                    sums[i].0 += v;
                    sums[i].1 += 1;
                }
            }
            let means: Vec<f64> = sums.iter().map(|&(s, c)| s / c as f64).collect();
            let filled = data
                .into_iter()
                .enumerate()
                .map(|(k, v)| v.unwrap_or(means[k % ni]))
                .collect();
            DenseMatrix::new(nu, ni, filled)
        }
    }
}

/// Full simulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub gamma: f64,
    pub rating_distribution: Vec<f64>,
    pub rating_propensities: Vec<f64>,
    pub powerlaw_eta: f64,
    pub k_min: f64,
    pub unbiased_per_user: usize,
    pub mcar_fraction: f64,
    /// Share of logged ratings kept for training; the rest is validation.
    pub train_fraction: f64,
    /// Seeds the rating matrix and the unbiased sample.
    pub seed: u64,
    /// Seeds logged sampling and the validation split; defaults to `seed`.
    pub observation_seed: Option<u64>,
    pub engagement: EngagementConfig,
    pub engagement_path: Option<PathBuf>,
    pub engagement_format: EngagementFormat,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            gamma: 0.5,
            rating_distribution: RATING_DISTRIBUTION.to_vec(),
            rating_propensities: RATING_PROPENSITIES.to_vec(),
            powerlaw_eta: POWERLAW_ETA,
            k_min: POWERLAW_K_MIN,
            unbiased_per_user: 40,
            mcar_fraction: 0.2,
            train_fraction: 0.8,
            seed: 0,
            observation_seed: None,
            engagement: EngagementConfig::default(),
            engagement_path: None,
            engagement_format: EngagementFormat::Dense,
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid(
                "gamma",
                format!("must lie in [0, 1], got {}", self.gamma),
            ));
        }
        if self.rating_propensities.len() != self.rating_distribution.len() {
            return Err(invalid(
                "rating_propensities",
                "needs one value per rating level",
            ));
        }
        if let Some(p) = self
            .rating_propensities
            .iter()
            .find(|&&p| !(p > 0.0 && p <= 1.0))
        {
            return Err(invalid(
                "rating_propensities",
                format!("{p} outside (0, 1]"),
            ));
        }
        let total: f64 = self.rating_distribution.iter().sum();
        if (total - 1.0).abs() > 1e-6 || self.rating_distribution.iter().any(|&f| !(f >= 0.0)) {
            return Err(invalid(
                "rating_distribution",
                format!("fractions must sum to 1, got {total}"),
            ));
        }
        if !(self.powerlaw_eta > 1.0) {
            return Err(invalid("powerlaw_eta", "must exceed 1"));
        }
        if !(self.k_min >= 1.0) {
            return Err(invalid("k_min", "must be at least 1"));
        }
        if self.unbiased_per_user == 0 {
            return Err(invalid("unbiased_per_user", "must be positive"));
        }
        if !(self.mcar_fraction > 0.0 && self.mcar_fraction < 1.0) {
            return Err(invalid("mcar_fraction", "must lie in (0, 1)"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(invalid("train_fraction", "must lie in (0, 1)"));
        }
        if self.engagement_path.is_none() {
            self.engagement.validate()?;
        }
        Ok(())
    }

    pub fn observation_seed(&self) -> u64 {
        self.observation_seed.unwrap_or(self.seed)
    }
}

/// Everything a simulation run produces.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub truth: GroundTruthMatrix,
    pub item_propensities: Vec<f64>,
    pub capped_items: usize,
    pub logged: RatingDataset,
    pub splits: SplitBundle,
    pub ground_truth: PropensityModel,
}

const ENGAGEMENT_STREAM: u64 = 10;
const UNBIASED_STREAM: u64 = 11;
const OBSERVATION_STREAM: u64 = 12;
const VALIDATION_STREAM: u64 = 13;

/// The rating matrix and power-law item propensities for `spec`; they do
/// not depend on `gamma` or the observation seed.
pub fn build_truth(
    spec: &SimulationSpec,
) -> Result<(GroundTruthMatrix, Vec<f64>, usize), SimError> {
    spec.validate()?;
    let engagement = match &spec.engagement_path {
        Some(path) => load_engagement(path, spec.engagement_format)?,
        None => generate_engagement(&spec.engagement, derive_seed(spec.seed, ENGAGEMENT_STREAM))?,
    };
    let truth = convert_to_ratings(&engagement, &spec.rating_distribution)?;
    let (items, capped) = build_item_propensities(&truth, spec.powerlaw_eta, spec.k_min)?;
    Ok((truth, items, capped))
}

/// Runs the full pipeline for `spec`.
pub fn simulate(spec: &SimulationSpec) -> Result<SimulatedData, SimError> {
    let (truth, items, capped) = build_truth(spec)?;
    simulate_from_truth(spec, truth, items, capped)
}

/// Samples logged and unbiased data from a prebuilt truth matrix.
pub fn simulate_from_truth(
    spec: &SimulationSpec,
    truth: GroundTruthMatrix,
    item_propensities: Vec<f64>,
    capped_items: usize,
) -> Result<SimulatedData, SimError> {
    spec.validate()?;
    let (mcar, test) = sample_unbiased(
        &truth,
        spec.unbiased_per_user,
        spec.mcar_fraction,
        derive_seed(spec.seed, UNBIASED_STREAM),
    )?;
    let obs_seed = spec.observation_seed();
    let (logged, ground_truth) = sample_observations(
        &truth,
        &spec.rating_propensities,
        &item_propensities,
        spec.gamma,
        derive_seed(obs_seed, OBSERVATION_STREAM),
    )?;
    let (train, validation) = split_biased(
        &logged,
        spec.train_fraction,
        derive_seed(obs_seed, VALIDATION_STREAM),
    )?;
    let splits = SplitBundle::new(train, validation, mcar, test)?;
    Ok(SimulatedData {
        truth,
        item_propensities,
        capped_items,
        logged,
        splits,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn truth_from(nu: usize, ni: usize, r: Vec<u8>) -> GroundTruthMatrix {
        GroundTruthMatrix::new(nu, ni, RatingScale::default(), r).unwrap()
    }

    #[test]
    fn hundred_distinct_cells_bucket_counts() {
        let m = DenseMatrix::new(10, 10, (0..100).map(|v| v as f64).collect()).unwrap();
        let t = convert_to_ratings(&m, &RATING_DISTRIBUTION).unwrap();
        let mut counts = [0; 5];
        for &r in t.ratings() {
            counts[r as usize - 1] += 1;
        }
        // cumulative floors 51, 76, 91, 97; remainder 3 to the top
        assert_eq!(counts, [51, 25, 15, 6, 3]);
        assert_eq!(t.get(0, 0), 1);
        assert_eq!(t.get(9, 9), 5);
    }

    #[test]
    fn conversion_is_monotone() {
        let m = DenseMatrix::new(3, 7, (0..21).map(|v| ((v * 37) % 21) as f64).collect()).unwrap();
        let t = convert_to_ratings(&m, &RATING_DISTRIBUTION).unwrap();
        for a in 0..21 {
            for b in 0..21 {
                if m.data[a] < m.data[b] {
                    assert!(t.ratings()[a] <= t.ratings()[b]);
                }
            }
        }
    }

    #[test]
    fn constant_matrix_follows_stable_order() {
        let m = DenseMatrix::new(4, 5, vec![1.0; 20]).unwrap();
        let t = convert_to_ratings(&m, &RATING_DISTRIBUTION).unwrap();
        // row-major order decides; the first 10 cells are the lowest bucket
        assert!(t.ratings()[..10].iter().all(|&r| r == 1));
        assert!(t.ratings().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn bad_distribution_rejected() {
        let m = DenseMatrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(convert_to_ratings(&m, &[0.5, 0.4]).is_err());
    }

    #[test]
    fn powerlaw_values() {
        assert!((powerlaw(20, 1.4, 20.0) - 0.4).abs() < 1e-12);
        let top = powerlaw(1, 1.4, 20.0);
        assert!((top - 0.4 * 20f64.powf(1.4)).abs() < 1e-9 && top > 26.0);
        assert!(powerlaw(3327, 1.4, 20.0) < 0.001);
    }

    #[test]
    fn ranks_descend_by_mean_with_index_ties() {
        // item means: 2, 4, 4, 1
        let t = truth_from(2, 4, vec![2, 4, 3, 1, 2, 4, 5, 1]);
        assert_eq!(item_ranks(&t), vec![3, 1, 2, 4]);
        let (p, capped) = build_item_propensities(&t, 1.4, 1.0).unwrap();
        assert_eq!(capped, 0);
        assert!((p[1] - 0.4).abs() < 1e-12);
        let (p, capped) = build_item_propensities(&t, 1.4, 20.0).unwrap();
        assert_eq!(capped, 4);
        assert!(p.iter().all(|&v| v == 1.0));
        assert!(build_item_propensities(&t, 1.0, 20.0).is_err());
    }

    #[test]
    fn interpolation_endpoints() {
        let items = [0.05, 0.9];
        let t0 = observation_table(&RATING_PROPENSITIES, &items, 0.0).unwrap();
        assert!(t0[..5].iter().all(|&p| p == 0.05));
        assert!(t0[5..].iter().all(|&p| p == 0.9));
        let t1 = observation_table(&RATING_PROPENSITIES, &items, 1.0).unwrap();
        assert_eq!(&t1[..5], &t1[5..]);
        assert_eq!(t1[4], 0.1795);
        let half = observation_table(&RATING_PROPENSITIES, &items, 0.5).unwrap();
        assert!((half[4] - 0.11475).abs() < 1e-15);
    }

    #[test]
    fn ground_truth_model_matches_table() {
        let t = truth_from(3, 2, vec![1, 5, 2, 4, 3, 3]);
        let items = [0.3, 0.6];
        let (data, gt) = sample_observations(&t, &RATING_PROPENSITIES, &items, 0.25, 9).unwrap();
        for u in 0..3 {
            for (i, &item) in items.iter().enumerate() {
                let y = t.get(u, i);
                let want = 0.25 * RATING_PROPENSITIES[y as usize - 1] + 0.75 * item;
                assert_eq!(gt.score(u, i, y).unwrap(), want);
            }
        }
        assert!(data.iter().all(|r| r.value == t.get(r.user, r.item)));
        assert!(sample_observations(&t, &RATING_PROPENSITIES, &items, 1.3, 9).is_err());
    }

    #[test]
    fn empirical_frequencies_match_probabilities() {
        // 2 users x 3 items, 10^4 repeats; each cell within 4 sigma
        let t = truth_from(2, 3, vec![1, 3, 5, 5, 2, 4]);
        let items = [0.5, 0.1, 0.8];
        let gamma = 0.4;
        let table = observation_table(&RATING_PROPENSITIES, &items, gamma).unwrap();
        let mut hits = [0usize; 6];
        let repeats = 10_000;
        for seed in 0..repeats {
            let (d, _) =
                sample_observations(&t, &RATING_PROPENSITIES, &items, gamma, seed).unwrap();
            for r in d.iter() {
                hits[r.user * 3 + r.item] += 1;
            }
        }
        for u in 0..2 {
            for i in 0..3 {
                let p = table[i * 5 + t.get(u, i) as usize - 1];
                let sigma = (p * (1.0 - p) / repeats as f64).sqrt();
                let freq = hits[u * 3 + i] as f64 / repeats as f64;
                assert!(
                    (freq - p).abs() < 4.0 * sigma,
                    "cell ({u},{i}): {freq} vs {p}"
                );
            }
        }
    }

    #[test]
    fn unbiased_sample_sizes_and_disjointness() {
        let cfg = EngagementConfig {
            num_users: 30,
            num_items: 50,
            ..EngagementConfig::default()
        };
        let t = convert_to_ratings(&generate_engagement(&cfg, 1).unwrap(), &RATING_DISTRIBUTION)
            .unwrap();
        let (mcar, test) = sample_unbiased(&t, 40, 0.2, 5).unwrap();
        assert_eq!(mcar.len() + test.len(), 1200);
        assert_eq!(mcar.len(), 240);
        assert!(mcar.observations().is_disjoint(&test.observations()));
        let per_user = t.num_items();
        let (m, te) = sample_unbiased(&t, per_user, 0.2, 5).unwrap();
        assert_eq!(m.len() + te.len(), 30 * 50);
        assert!(sample_unbiased(&t, 51, 0.2, 5).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = SimulationSpec::default();
        assert!(s.validate().is_ok());
        s.gamma = 1.3;
        assert!(matches!(
            s.validate(),
            Err(SimError::Invalid { field: "gamma", .. })
        ));
        let s = SimulationSpec {
            rating_propensities: vec![0.1; 4],
            ..SimulationSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn simulate_is_deterministic() {
        let spec = SimulationSpec {
            engagement: EngagementConfig {
                num_users: 40,
                num_items: 60,
                ..EngagementConfig::default()
            },
            seed: 3,
            ..SimulationSpec::default()
        };
        let a = simulate(&spec).unwrap();
        let b = simulate(&spec).unwrap();
        assert_eq!(a.splits.train, b.splits.train);
        assert_eq!(a.splits.test, b.splits.test);
        assert_eq!(a.ground_truth, b.ground_truth);
        let other = simulate(&SimulationSpec {
            observation_seed: Some(4),
            ..spec.clone()
        })
        .unwrap();
        assert_eq!(other.truth, a.truth);
        assert_eq!(other.splits.test, a.splits.test);
        assert_ne!(other.logged, a.logged);
    }

    #[test]
    fn load_dense_and_triples() {
        let dir = tempfile::tempdir().unwrap();
        let dense = dir.path().join("d.csv");
        let mut f = File::create(&dense).unwrap();
        writeln!(f, "# comment\n1.0,2.0,3\n4,5,6").unwrap();
        let m = load_engagement(&dense, EngagementFormat::Dense).unwrap();
        assert_eq!((m.rows, m.cols), (2, 3));
        assert_eq!(m.get(1, 2), 6.0);

        let trip = dir.path().join("t.tsv");
        let mut f = File::create(&trip).unwrap();
        writeln!(f, "a\tx\t1.0\na\ty\t2.0\nb\tx\t3.0").unwrap();
        let m = load_engagement(&trip, EngagementFormat::Triples).unwrap();
        assert_eq!((m.rows, m.cols), (2, 2));
        // (b, y) missing: mean of item y is 2
        assert_eq!(m.get(1, 1), 2.0);
        assert_eq!(m.get(1, 0), 3.0);

        let ragged = dir.path().join("r.csv");
        std::fs::write(&ragged, "1,2\n3\n").unwrap();
        assert!(matches!(
            load_engagement(&ragged, EngagementFormat::Dense),
            Err(SimError::Engagement { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn gamma_endpoint_marginals(
            items in proptest::collection::vec(0.0f64..=1.0, 1..8),
        ) {
            let t0 = observation_table(&RATING_PROPENSITIES, &items, 0.0).unwrap();
            for (i, row) in t0.chunks(5).enumerate() {
                prop_assert!(row.iter().all(|&p| p == items[i]));
            }
            let t1 = observation_table(&RATING_PROPENSITIES, &items, 1.0).unwrap();
            for row in t1.chunks(5) {
                prop_assert_eq!(row, &RATING_PROPENSITIES[..]);
            }
        }

        #[test]
        fn conversion_hits_bucket_sizes(n in 1usize..400, seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let t = convert_to_ratings(&DenseMatrix::new(1, n, data).unwrap(), &RATING_DISTRIBUTION).unwrap();
            let mut counts = [0usize; 5];
            for &r in t.ratings() {
                counts[r as usize - 1] += 1;
            }
            let mut cum = 0.0;
            let mut prev = 0usize;
            for k in 0..4 {
                cum += RATING_DISTRIBUTION[k];
                let end = (cum * n as f64 + 1e-9).floor() as usize;
                prop_assert_eq!(counts[k], end - prev);
                prev = end;
            }
            prop_assert_eq!(counts[4], n - prev);
        }
    }
}
