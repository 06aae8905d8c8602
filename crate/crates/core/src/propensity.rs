//! Observation propensity estimation.
//!
//! A [`PropensityModel`] maps `(user, item, rating)` to the probability that
//! the rating is observed. Each family restricts what the score may depend
//! on:
//!
//! | family          | depends on       | table shape      |
//! |-----------------|------------------|------------------|
//! | uniform         | nothing          | 1                |
//! | popularity      | item             | `|I|`            |
//! | positivity      | rating value     | `|R|`            |
//! | multifactorial  | item and rating  | `|I| x |R|`      |
//! | mf_learned      | user and item    | `|U| x |I|`      |
//! | ground_truth    | item and rating  | `|I| x |R|`      |
//!
//! The count-based estimators use Bayes' rule with an unbiased (MCAR)
//! sample supplying the rating-value prior. Fitted models are post-processed
//! in the order estimate, [`normalize`](PropensityModel::normalize),
//! [`clip`](PropensityModel::clip).

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::Rng;
use thiserror::Error;

use crate::data::{Rating, RatingDataset, RatingScale};
use crate::model::MfParameters;
use crate::optim::{adam_step, AdamState, ParamMask};
use crate::rng::rng_from_seed;

#[derive(Debug, Error)]
pub enum PropensityError {
    #[error("the MCAR sample is empty")]
    EmptyMcar,

    #[error("the training set is empty")]
    EmptyTrain,

    #[error("rating {rating} never occurs in the MCAR sample; enable the zero-count fallback or smoothing")]
    ZeroPrior { rating: u8 },

    #[error("zero prior for item {item}, rating {rating}; use alpha2 > 0")]
    ZeroJointPrior { item: usize, rating: u8 },

    #[error("invalid smoothing parameters alpha1={alpha1}, alpha2={alpha2}")]
    InvalidSmoothing { alpha1: f64, alpha2: f64 },

    #[error("clip floor must lie in (0, 1], got {0}")]
    InvalidClip(f64),

    #[error("cannot normalize: training triple {index} has zero propensity")]
    ZeroPropensity { index: usize },

    #[error("index (user {user}, item {item}, rating {rating}) outside the model")]
    OutOfRange {
        user: usize,
        item: usize,
        rating: u8,
    },

    #[error("datasets disagree on {0}")]
    Mismatch(&'static str),

    #[error("{family} table needs {expected} values, got {actual}")]
    TableShape {
        family: PropensityFamily,
        expected: usize,
        actual: usize,
    },

    #[error("propensity table line {line}: {message}")]
    Table { line: usize, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PropensityFamily {
    Uniform,
    Popularity,
    Positivity,
    Multifactorial,
    MfLearned,
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    Constant,
    PerItem,
    PerRating,
    PerItemRating,
    PerUserItem,
}

impl PropensityFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            PropensityFamily::Uniform => "uniform",
            PropensityFamily::Popularity => "popularity",
            PropensityFamily::Positivity => "positivity",
            PropensityFamily::Multifactorial => "multifactorial",
            PropensityFamily::MfLearned => "mf_learned",
            PropensityFamily::GroundTruth => "ground_truth",
        }
    }

    fn layout(self) -> Layout {
        match self {
            PropensityFamily::Uniform => Layout::Constant,
            PropensityFamily::Popularity => Layout::PerItem,
            PropensityFamily::Positivity => Layout::PerRating,
            PropensityFamily::Multifactorial | PropensityFamily::GroundTruth => {
                Layout::PerItemRating
            }
            PropensityFamily::MfLearned => Layout::PerUserItem,
        }
    }
}

impl fmt::Display for PropensityFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PropensityFamily {
    type Err = PropensityError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "uniform" => PropensityFamily::Uniform,
            "popularity" => PropensityFamily::Popularity,
            "positivity" => PropensityFamily::Positivity,
            "multifactorial" => PropensityFamily::Multifactorial,
            "mf_learned" => PropensityFamily::MfLearned,
            "ground_truth" => PropensityFamily::GroundTruth,
            other => {
                return Err(PropensityError::Table {
                    line: 1,
                    message: format!("unknown family {other:?}"),
                })
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    None,
    /// Rescaled so the training mean of `1/p` equals `|U||I| / |D|`.
    MeanInverse,
}

impl Normalization {
    fn as_str(self) -> &'static str {
        match self {
            Normalization::None => "none",
            Normalization::MeanInverse => "mean_inverse",
        }
    }
}

/// Laplace smoothing strengths for the multifactorial estimator:
/// `alpha1` for the observed item-rating joint, `alpha2` for the MCAR
/// item-given-rating conditional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            alpha1: 10.0,
            alpha2: 2.0,
        }
    }
}

impl SmoothingConfig {
    pub fn new(alpha1: f64, alpha2: f64) -> Result<Self, PropensityError> {
        if !(alpha1.is_finite() && alpha1 >= 0.0 && alpha2.is_finite() && alpha2 >= 0.0) {
            return Err(PropensityError::InvalidSmoothing { alpha1, alpha2 });
        }
        Ok(SmoothingConfig { alpha1, alpha2 })
    }
}

/// What to do when a rating value never occurs in the MCAR sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroCountPolicy {
    /// Use the smallest non-zero prior observed in the MCAR sample.
    #[default]
    Fallback,
    Error,
}

/// A fitted propensity model.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    family: PropensityFamily,
    num_users: usize,
    num_items: usize,
    scale: RatingScale,
    values: Vec<f64>,
    clip_floor: Option<f64>,
    normalization: Normalization,
    smoothing: Option<SmoothingConfig>,
}

impl PropensityModel {
    /// Builds a model from a raw table laid out as in the module table
    /// (row-major, items outer for item-rating tables, users outer for
    /// user-item tables).
    pub fn from_values(
        family: PropensityFamily,
        num_users: usize,
        num_items: usize,
        scale: RatingScale,
        values: Vec<f64>,
    ) -> Result<Self, PropensityError> {
        let expected = match family.layout() {
            Layout::Constant => 1,
            Layout::PerItem => num_items,
            Layout::PerRating => scale.len(),
            Layout::PerItemRating => num_items * scale.len(),
            Layout::PerUserItem => num_users * num_items,
        };
        if values.len() != expected {
            return Err(PropensityError::TableShape {
                family,
                expected,
                actual: values.len(),
            });
        }
        Ok(PropensityModel {
            family,
            num_users,
            num_items,
            scale,
            values,
            clip_floor: None,
            normalization: Normalization::None,
            smoothing: None,
        })
    }

    /// Constant `|D| / (|U||I|)`, the naive (unweighted) case.
    pub fn uniform(train: &RatingDataset) -> Self {
        let rate = train.len() as f64 / train.num_cells().max(1) as f64;
        PropensityModel::from_values(
            PropensityFamily::Uniform,
            train.num_users(),
            train.num_items(),
            train.scale(),
            vec![rate],
        )
        .expect("constant table has one value")
    }

    /// Exact propensities from a simulation, as an item x rating table.
    pub fn ground_truth(
        num_users: usize,
        num_items: usize,
        scale: RatingScale,
        table: Vec<f64>,
    ) -> Result<Self, PropensityError> {
        Self::from_values(
            PropensityFamily::GroundTruth,
            num_users,
            num_items,
            scale,
            table,
        )
    }

    pub fn family(&self) -> PropensityFamily {
        self.family
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn clip_floor(&self) -> Option<f64> {
        self.clip_floor
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn smoothing(&self) -> Option<SmoothingConfig> {
        self.smoothing
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

    fn with_smoothing(mut self, smoothing: SmoothingConfig) -> Self {
        self.smoothing = Some(smoothing);
        self
    }

    #[inline]
    fn offset(&self, user: usize, item: usize, rating: u8) -> usize {
        match self.family.layout() {
            Layout::Constant => 0,
            Layout::PerItem => item,
            Layout::PerRating => self.scale.position(rating),
            Layout::PerItemRating => item * self.scale.len() + self.scale.position(rating),
            Layout::PerUserItem => user * self.num_items + item,
        }
    }

    /// Observation probability of `rating` by `user` on `item`.
    pub fn score(&self, user: usize, item: usize, rating: u8) -> Result<f64, PropensityError> {
        if user >= self.num_users || item >= self.num_items || !self.scale.contains(rating) {
            return Err(PropensityError::OutOfRange { user, item, rating });
        }
        Ok(self.values[self.offset(user, item, rating)])
    }

    pub fn score_triple(&self, t: &Rating) -> Result<f64, PropensityError> {
        self.score(t.user, t.item, t.value)
    }

    pub fn score_all(&self, triples: &[Rating]) -> Result<Vec<f64>, PropensityError> {
        triples.iter().map(|t| self.score_triple(t)).collect()
    }

    /// Floors every score at `tau` and caps it at 1.
    pub fn clip(mut self, tau: f64) -> Result<Self, PropensityError> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(PropensityError::InvalidClip(tau));
        }
        for v in &mut self.values {
            *v = v.clamp(tau, 1.0);
        }
        self.clip_floor = Some(tau);
        Ok(self)
    }

    /// Rescales every score by one constant `k` so that
    /// `sum_{train} 1/p = |U||I|`, then caps scores at 1. Returns `k`.
    pub fn normalize(mut self, train: &RatingDataset) -> Result<(Self, f64), PropensityError> {
        if train.is_empty() {
            return Err(PropensityError::EmptyTrain);
        }
        let mut inverse_sum = 0.0;
        for (index, t) in train.iter().enumerate() {
            let p = self.score_triple(t)?;
            if p <= 0.0 {
                return Err(PropensityError::ZeroPropensity { index });
            }
            inverse_sum += 1.0 / p;
        }
        let factor = inverse_sum / train.num_cells() as f64;
        for v in &mut self.values {
            *v = (*v * factor).min(1.0);
        }
        self.normalization = Normalization::MeanInverse;
        Ok((self, factor))
    }

    /// Arithmetic mean score over `triples`.
    pub fn mean_score(&self, triples: &[Rating]) -> Result<f64, PropensityError> {
        if triples.is_empty() {
            return Ok(0.0);
        }
        let s: f64 = self.score_all(triples)?.iter().sum();
        Ok(s / triples.len() as f64)
    }

    /// Serializes the table.
    ///
    /// The first line is a `#` header of `key=value` pairs (family,
    /// normalization, tau, alpha1, alpha2, dimensions, rating scale); `NA`
    /// marks an unset value. The second line names the tab-separated
    /// columns, which depend on the family: `propensity`,
    /// `item_index propensity`, `rating propensity`,
    /// `item_index rating propensity` or `user_index item_index propensity`.
    pub fn write_table<W: Write>(&self, writer: W) -> io::Result<()> {
        let mut w = BufWriter::new(writer);
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |x| x.to_string());
        writeln!(
            w,
            "# family={} normalization={} tau={} alpha1={} alpha2={} num_users={} num_items={} rating_min={} rating_max={}",
            self.family,
            self.normalization.as_str(),
            opt(self.clip_floor),
            opt(self.smoothing.map(|s| s.alpha1)),
            opt(self.smoothing.map(|s| s.alpha2)),
            self.num_users,
            self.num_items,
            self.scale.min,
            self.scale.max,
        )?;
        let r = self.scale.len();
        match self.family.layout() {
            Layout::Constant => {
                writeln!(w, "propensity")?;
                writeln!(w, "{}", self.values[0])?;
            }
            Layout::PerItem => {
                writeln!(w, "item_index\tpropensity")?;
                for (i, v) in self.values.iter().enumerate() {
                    writeln!(w, "{i}\t{v}")?;
                }
            }
            Layout::PerRating => {
                writeln!(w, "rating\tpropensity")?;
                for (k, v) in self.values.iter().enumerate() {
                    writeln!(w, "{}\t{v}", self.scale.value_at(k))?;
                }
            }
            Layout::PerItemRating => {
                writeln!(w, "item_index\trating\tpropensity")?;
                for (k, v) in self.values.iter().enumerate() {
                    writeln!(w, "{}\t{}\t{v}", k / r, self.scale.value_at(k % r))?;
                }
            }
            Layout::PerUserItem => {
                writeln!(w, "user_index\titem_index\tpropensity")?;
                for (k, v) in self.values.iter().enumerate() {
                    writeln!(w, "{}\t{}\t{v}", k / self.num_items, k % self.num_items)?;
                }
            }
        }
        w.flush()
    }

    pub fn read_table<R: BufRead>(reader: R) -> Result<Self, PropensityError> {
        let bad = |line: usize, message: String| PropensityError::Table { line, message };
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| bad(1, "empty file".into()))??;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| bad(1, "missing # header".into()))?;
        let mut kv = std::collections::HashMap::new();
        for tok in header.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| bad(1, format!("bad token {tok:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| bad(1, format!("missing {k}")))
        };
        let num = |k: &str| -> Result<usize, PropensityError> {
            get(k)?.parse().map_err(|_| bad(1, format!("bad {k}")))
        };
        let opt = |k: &str| -> Result<Option<f64>, PropensityError> {
            match get(k)? {
                "NA" => Ok(None),
                v => v.parse().map(Some).map_err(|_| bad(1, format!("bad {k}"))),
            }
        };
        let family: PropensityFamily = get("family")?.parse()?;
        let normalization = match get("normalization")? {
            "none" => Normalization::None,
            "mean_inverse" => Normalization::MeanInverse,
            other => return Err(bad(1, format!("unknown normalization {other:?}"))),
        };
        let scale = RatingScale::new(num("rating_min")? as u8, num("rating_max")? as u8)
            .map_err(|e| bad(1, e.to_string()))?;
        let (nu, ni) = (num("num_users")?, num("num_items")?);
        let smoothing = match (opt("alpha1")?, opt("alpha2")?) {
            (Some(a1), Some(a2)) => Some(SmoothingConfig::new(a1, a2)?),
            _ => None,
        };
        let clip_floor = opt("tau")?;

        lines
            .next()
            .ok_or_else(|| bad(2, "missing column header".into()))??;
        let mut values = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let last = line.rsplit('\t').next().unwrap_or("");
            let v: f64 = last
                .trim()
                .parse()
                .map_err(|_| bad(n + 3, format!("bad propensity {last:?}")))?;
            values.push(v);
        }
        let mut model = PropensityModel::from_values(family, nu, ni, scale, values)?;
        model.normalization = normalization;
        model.smoothing = smoothing;
        model.clip_floor = clip_floor;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), PropensityError> {
        self.write_table(File::create(path)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PropensityError> {
        Self::read_table(BufReader::new(File::open(path)?))
    }
}

fn check_pair(train: &RatingDataset, mcar: &RatingDataset) -> Result<(), PropensityError> {
    if train.is_empty() {
        return Err(PropensityError::EmptyTrain);
    }
    if mcar.is_empty() {
        return Err(PropensityError::EmptyMcar);
    }
    if train.scale() != mcar.scale() {
        return Err(PropensityError::Mismatch("rating scale"));
    }
    if train.num_items() != mcar.num_items() || train.num_users() != mcar.num_users() {
        return Err(PropensityError::Mismatch("dimensions"));
    }
    Ok(())
}

/// Rating-value prior `P(y = r)` from the MCAR sample, by scale position.
pub fn rating_prior(
    mcar: &RatingDataset,
    policy: ZeroCountPolicy,
) -> Result<Vec<f64>, PropensityError> {
    if mcar.is_empty() {
        return Err(PropensityError::EmptyMcar);
    }
    let n = mcar.len() as f64;
    let counts = mcar.rating_counts();
    let floor = counts
        .iter()
        .filter(|&&c| c > 0)
        .min()
        .map(|&c| c as f64 / n)
        .expect("non-empty sample has a non-zero count");
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            if c > 0 {
                return Ok(c as f64 / n);
            }
            let rating = mcar.scale().value_at(k);
            match policy {
                ZeroCountPolicy::Error => Err(PropensityError::ZeroPrior { rating }),
                ZeroCountPolicy::Fallback => {
                    warn!("rating {rating} absent from MCAR sample; using fallback prior {floor}");
                    Ok(floor)
                }
            }
        })
        .collect()
}

/// Positivity propensities `P(o=1 | y=r) = P(y=r | o=1) P(o=1) / P(y=r)`,
/// per rating value.
pub fn estimate_positivity(
    train: &RatingDataset,
    mcar: &RatingDataset,
    policy: ZeroCountPolicy,
) -> Result<PropensityModel, PropensityError> {
    check_pair(train, mcar)?;
    let prior = rating_prior(mcar, policy)?;
    let cells = train.num_cells() as f64;
    let values = train
        .rating_counts()
        .iter()
        .zip(&prior)
        .map(|(&c, &p)| c as f64 / (cells * p))
        .collect();
    PropensityModel::from_values(
        PropensityFamily::Positivity,
        train.num_users(),
        train.num_items(),
        train.scale(),
        values,
    )
}

/// Observed item frequencies `count_i / |D|` (a distribution over items).
pub fn item_frequencies(train: &RatingDataset) -> Vec<f64> {
    let n = train.len().max(1) as f64;
    train.item_counts().iter().map(|&c| c as f64 / n).collect()
}

/// Popularity propensities: item frequencies rescaled by `|D|/|U|`, i.e.
/// the fraction of users who rated the item. Unobserved items score 0
/// until clipped.
pub fn estimate_popularity(train: &RatingDataset) -> Result<PropensityModel, PropensityError> {
    if train.is_empty() {
        return Err(PropensityError::EmptyTrain);
    }
    let rescale = train.len() as f64 / train.num_users() as f64;
    let values = item_frequencies(train)
        .iter()
        .map(|f| f * rescale)
        .collect();
    PropensityModel::from_values(
        PropensityFamily::Popularity,
        train.num_users(),
        train.num_items(),
        train.scale(),
        values,
    )
}

/// The factors of the multifactorial estimate, kept for inspection.
/// Tables are item-major `|I| x |R|`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultifactorialComponents {
    /// `P(o = 1) = |D| / (|U||I|)`.
    pub observation_prior: f64,
    /// Smoothed `P(y = r, i | o = 1)`.
    pub observed_joint: Vec<f64>,
    /// `P(y = r)` from the MCAR sample.
    pub rating_prior: Vec<f64>,
    /// Smoothed `P(i | y = r)` from the MCAR sample.
    pub item_given_rating: Vec<f64>,
}

impl MultifactorialComponents {
    pub fn compute(
        train: &RatingDataset,
        mcar: &RatingDataset,
        smoothing: SmoothingConfig,
        policy: ZeroCountPolicy,
    ) -> Result<Self, PropensityError> {
        check_pair(train, mcar)?;
        let SmoothingConfig { alpha1, alpha2 } = smoothing;
        let scale = train.scale();
        let (ni, nr) = (train.num_items(), scale.len());
        let cell = |t: &Rating| t.item * nr + scale.position(t.value);

        let mut train_counts = vec![0usize; ni * nr];
        for t in train.iter() {
            train_counts[cell(t)] += 1;
        }
        let mut mcar_counts = vec![0usize; ni * nr];
        for t in mcar.iter() {
            mcar_counts[cell(t)] += 1;
        }
        let mcar_rating = mcar.rating_counts();

        let joint_den = train.len() as f64 + alpha1 * (ni * nr) as f64;
        let observed_joint = train_counts
            .iter()
            .map(|&c| (c as f64 + alpha1) / joint_den)
            .collect();

        let mut item_given_rating = vec![0.0; ni * nr];
        for r in 0..nr {
            let den = mcar_rating[r] as f64 + alpha2 * ni as f64;
            for i in 0..ni {
                let num = mcar_counts[i * nr + r] as f64 + alpha2;
                if den == 0.0 || num == 0.0 {
                    return Err(PropensityError::ZeroJointPrior {
                        item: i,
                        rating: scale.value_at(r),
                    });
                }
                item_given_rating[i * nr + r] = num / den;
            }
        }

        Ok(MultifactorialComponents {
            observation_prior: train.len() as f64 / train.num_cells() as f64,
            observed_joint,
            rating_prior: rating_prior(mcar, policy)?,
            item_given_rating,
        })
    }

    /// `P(y=r, i | o=1) P(o=1) / (P(y=r) P(i | y=r))` for every cell.
    pub fn propensities(&self) -> Vec<f64> {
        let nr = self.rating_prior.len();
        self.observed_joint
            .iter()
            .zip(&self.item_given_rating)
            .enumerate()
            .map(|(k, (&joint, &cond))| {
                joint * self.observation_prior / (self.rating_prior[k % nr] * cond)
            })
            .collect()
    }
}

/// Multifactorial (item and rating value) propensities with Laplace
/// smoothing of both the observed joint and the MCAR item conditional.
pub fn estimate_multifactorial(
    train: &RatingDataset,
    mcar: &RatingDataset,
    smoothing: SmoothingConfig,
    policy: ZeroCountPolicy,
) -> Result<PropensityModel, PropensityError> {
    let parts = MultifactorialComponents::compute(train, mcar, smoothing, policy)?;
    Ok(PropensityModel::from_values(
        PropensityFamily::Multifactorial,
        train.num_users(),
        train.num_items(),
        train.scale(),
        parts.propensities(),
    )?
    .with_smoothing(smoothing))
}

/// Settings for the logistic MF observation model.
#[derive(Debug, Clone, PartialEq)]
pub struct MfPropensityConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub init_scale: f64,
    /// Relative loss change over the last 10 epochs below which the fit
    /// counts as converged.
    pub tolerance: f64,
}

impl Default for MfPropensityConfig {
    fn default() -> Self {
        MfPropensityConfig {
            dim: 16,
            learning_rate: 0.05,
            l2: 1e-4,
            epochs: 300,
            seed: 0,
            init_scale: 0.1,
            tolerance: 1e-3,
        }
    }
}

/// Diagnostics of a logistic MF fit.
#[derive(Debug, Clone)]
pub struct MfPropensityFit {
    pub params: MfParameters,
    pub loss_history: Vec<f64>,
    pub converged: bool,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fits `P(o_ui = 1) = sigmoid(p_u . q_i + a_u + b_i + c)` to the binary
/// observation matrix by full-batch Adam on mean binary cross-entropy.
///
/// Only users and items with at least one observation enter the fit;
/// other rows and columns have no signal and score the global observation
/// rate `|D| / (|U||I|)`. If the loss has not settled after `epochs`
/// passes a warning is logged and the lowest-loss parameters are kept.
pub fn estimate_mf_propensity(
    train: &RatingDataset,
    config: &MfPropensityConfig,
) -> Result<(PropensityModel, MfPropensityFit), PropensityError> {
    if train.is_empty() {
        return Err(PropensityError::EmptyTrain);
    }
    let (nu, ni, d) = (train.num_users(), train.num_items(), config.dim.max(1));
    let prior = train.len() as f64 / train.num_cells() as f64;
    let observed = train.observations();
    let users: Vec<usize> = (0..nu).filter(|&u| train.user_counts()[u] > 0).collect();
    let item_counts = train.item_counts();
    let items: Vec<usize> = (0..ni).filter(|&i| item_counts[i] > 0).collect();
    let mut is_obs = vec![false; nu * ni];
    for t in train.iter() {
        is_obs[t.user * ni + t.item] = true;
    }
    debug_assert_eq!(observed.len(), train.len());

    let active_rate = train.len() as f64 / (users.len() * items.len()) as f64;
    let logit = |p: f64| {
        let p = p.clamp(1e-6, 1.0 - 1e-6);
        (p / (1.0 - p)).ln()
    };
    let mut params = MfParameters::zeros(nu, ni, d);
    let mut rng = rng_from_seed(config.seed);
    for v in params
        .user_embeddings
        .iter_mut()
        .chain(params.item_embeddings.iter_mut())
    {
        *v = config.init_scale * (rng.random::<f64>() * 2.0 - 1.0);
    }
    params.global_offset = logit(active_rate);

    let mut adam = AdamState::new(&params);
    let mut grad = MfParameters::zeros(nu, ni, d);
    let n_cells = (users.len() * items.len()) as f64;
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, params.clone());

    for _ in 0..config.epochs {
        grad.fill_zero();
        let mut loss = 0.0;
        for &u in &users {
            for &i in &items {
                let z = params.predict_unchecked(u, i);
                let o = is_obs[u * ni + i];
                let s = sigmoid(z);
                // log(1 + e^{-|z|}) keeps the cross-entropy finite
                let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
                loss += if o { softplus - z } else { softplus };
                let w = (s - if o { 1.0 } else { 0.0 }) / n_cells;
                let (pu, qi) = (u * d, i * d);
                for k in 0..d {
                    grad.user_embeddings[pu + k] += w * params.item_embeddings[qi + k];
                    grad.item_embeddings[qi + k] += w * params.user_embeddings[pu + k];
                }
                grad.user_offsets[u] += w;
                grad.item_offsets[i] += w;
                grad.global_offset += w;
            }
        }
        loss /= n_cells;
        let r = 2.0 * config.l2;
        if r > 0.0 {
            let mut reg = params.global_offset.powi(2);
            for &u in &users {
                for k in u * d..(u + 1) * d {
                    grad.user_embeddings[k] += r * params.user_embeddings[k];
                    reg += params.user_embeddings[k].powi(2);
                }
                grad.user_offsets[u] += r * params.user_offsets[u];
                reg += params.user_offsets[u].powi(2);
            }
            for &i in &items {
                for k in i * d..(i + 1) * d {
                    grad.item_embeddings[k] += r * params.item_embeddings[k];
                    reg += params.item_embeddings[k].powi(2);
                }
                grad.item_offsets[i] += r * params.item_offsets[i];
                reg += params.item_offsets[i].powi(2);
            }
            grad.global_offset += r * params.global_offset;
            loss += config.l2 * reg;
        }
        loss_history.push(loss);
        if loss < best.0 {
            best = (loss, params.clone());
        }
        adam_step(
            &mut params,
            &grad,
            &mut adam,
            ParamMask::ALL,
            config.learning_rate,
        );
    }

    let converged = match loss_history.len() {
        n if n > 10 => {
            let (a, b) = (loss_history[n - 11], loss_history[n - 1]);
            ((a - b) / a.abs().max(1e-12)).abs() < config.tolerance
        }
        _ => false,
    };
    if !converged {
        warn!(
            "logistic MF propensity fit did not converge in {} epochs; keeping best-so-far parameters",
            config.epochs
        );
    }
    let params = best.1;

    let user_active: Vec<bool> = train.user_counts().iter().map(|&c| c > 0).collect();
    let mut values = vec![prior; nu * ni];
    for u in 0..nu {
        if !user_active[u] {
            continue;
        }
        for i in 0..ni {
            if item_counts[i] > 0 {
                values[u * ni + i] = sigmoid(params.predict_unchecked(u, i));
            }
        }
    }
    let model =
        PropensityModel::from_values(PropensityFamily::MfLearned, nu, ni, train.scale(), values)?;
    Ok((
        model,
        MfPropensityFit {
            params,
            loss_history,
            converged,
        },
    ))
}

/// Default clip floor: 5% of the mean propensity over the whole matrix,
/// which is the observation rate `|D| / (|U||I|)`.
pub fn default_clip_floor(train: &RatingDataset) -> f64 {
    let rate = train.len() as f64 / train.num_cells().max(1) as f64;
    (0.05 * rate).clamp(f64::MIN_POSITIVE, 1.0)
}
