//! Rating predictors: matrix factorization with offsets and the per-item
//! average baseline.
//!
//! An MF prediction is `p_u . q_i + a_u + b_i + c`. Parameters are stored
//! row-major in flat vectors so optimizers can walk whole parameter groups
//! as slices.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::{RatingDataset, RatingScale};
use crate::rng::rng_from_seed;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("index ({user}, {item}) outside {num_users}x{num_items} model")]
    IndexOutOfRange {
        user: usize,
        item: usize,
        num_users: usize,
        num_items: usize,
    },

    #[error("embedding dimension must be positive")]
    ZeroDimension,

    #[error("initialization scale must be finite and non-negative, got {0}")]
    InvalidScale(f64),

    #[error("cannot fit a baseline on an empty training set")]
    EmptyTrain,

    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// Anything that produces a real-valued rating estimate for a pair.
///
/// Implementations may panic on indices outside their declared range.
pub trait RatingPredictor {
    fn predict_rating(&self, user: usize, item: usize) -> f64;
}

/// MF parameters: user/item embeddings plus user, item and global offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct MfParameters {
    num_users: usize,
    num_items: usize,
    dim: usize,
    pub user_embeddings: Vec<f64>,
    pub item_embeddings: Vec<f64>,
    pub user_offsets: Vec<f64>,
    pub item_offsets: Vec<f64>,
    pub global_offset: f64,
}

impl MfParameters {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        MfParameters {
            num_users,
            num_items,
            dim,
            user_embeddings: vec![0.0; num_users * dim],
            item_embeddings: vec![0.0; num_items * dim],
            user_offsets: vec![0.0; num_users],
            item_offsets: vec![0.0; num_items],
            global_offset: 0.0,
        }
    }

    /// Embeddings i.i.d. `N(0, scale^2)`, offsets zero, global offset set
    /// to `global_offset` (the mean training rating for rating models).
    /// User rows are drawn before item rows from one seeded stream.
    pub fn init(
        num_users: usize,
        num_items: usize,
        dim: usize,
        seed: u64,
        scale: f64,
        global_offset: f64,
    ) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::ZeroDimension);
        }
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(ModelError::InvalidScale(scale));
        }
        let mut params = Self::zeros(num_users, num_items, dim);
        params.global_offset = global_offset;
        if scale > 0.0 {
            let normal = Normal::new(0.0, scale).expect("scale checked above");
            let mut rng = rng_from_seed(seed);
            for v in params
                .user_embeddings
                .iter_mut()
                .chain(params.item_embeddings.iter_mut())
            {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(params)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn user_row(&self, user: usize) -> &[f64] {
        &self.user_embeddings[user * self.dim..(user + 1) * self.dim]
    }

    pub fn item_row(&self, item: usize) -> &[f64] {
        &self.item_embeddings[item * self.dim..(item + 1) * self.dim]
    }

    pub fn predict(&self, user: usize, item: usize) -> Result<f64, ModelError> {
        if user >= self.num_users || item >= self.num_items {
            return Err(ModelError::IndexOutOfRange {
                user,
                item,
                num_users: self.num_users,
                num_items: self.num_items,
            });
        }
        Ok(self.predict_unchecked(user, item))
    }

    #[inline]
    pub fn predict_unchecked(&self, user: usize, item: usize) -> f64 {
        dot(self.user_row(user), self.item_row(item))
            + self.user_offsets[user]
            + self.item_offsets[item]
            + self.global_offset
    }

    /// Squared L2 norm over every parameter.
    pub fn squared_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.user_embeddings.len()
            + self.item_embeddings.len()
            + self.user_offsets.len()
            + self.item_offsets.len()
            + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Every scalar in a fixed order: user embeddings, item embeddings,
    /// user offsets, item offsets, global offset.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.user_embeddings
            .iter()
            .chain(&self.item_embeddings)
            .chain(&self.user_offsets)
            .chain(&self.item_offsets)
            .chain(std::iter::once(&self.global_offset))
            .copied()
    }

    /// Mutable access to scalar `k` in the order of [`values`](Self::values).
    pub fn value_mut(&mut self, mut k: usize) -> &mut f64 {
        for group in [
            &mut self.user_embeddings,
            &mut self.item_embeddings,
            &mut self.user_offsets,
            &mut self.item_offsets,
        ] {
            if k < group.len() {
                return &mut group[k];
            }
            k -= group.len();
        }
        assert_eq!(k, 0, "parameter index out of range");
        &mut self.global_offset
    }

    pub fn same_shape(&self, other: &MfParameters) -> bool {
        self.num_users == other.num_users
            && self.num_items == other.num_items
            && self.dim == other.dim
    }

    /// Sets every scalar to zero, keeping the shape.
    pub fn fill_zero(&mut self) {
        for group in [
            &mut self.user_embeddings,
            &mut self.item_embeddings,
            &mut self.user_offsets,
            &mut self.item_offsets,
        ] {
            group.iter_mut().for_each(|v| *v = 0.0);
        }
        self.global_offset = 0.0;
    }

    /// Writes a plain-text checkpoint.
    ///
    /// Layout, one value per whitespace-separated token, floats in Rust's
    /// shortest round-trip form:
    ///
    /// ```text
    /// mfips-checkpoint v1
    /// num_users=<N> num_items=<M> dim=<d> seed=<s>
    /// global_offset <c>
    /// user_offsets <a_0> ... <a_{N-1}>
    /// item_offsets <b_0> ... <b_{M-1}>
    /// user <u> <p_u0> ... <p_u(d-1)>      (N lines)
    /// item <i> <q_i0> ... <q_i(d-1)>      (M lines)
    /// ```
    pub fn write_checkpoint<W: Write>(&self, writer: W, seed: u64) -> io::Result<()> {
        let mut w = BufWriter::new(writer);
        writeln!(w, "mfips-checkpoint v1")?;
        writeln!(
            w,
            "num_users={} num_items={} dim={} seed={}",
            self.num_users, self.num_items, self.dim, seed
        )?;
        writeln!(w, "global_offset {}", self.global_offset)?;
        write_row(&mut w, "user_offsets", &self.user_offsets)?;
        write_row(&mut w, "item_offsets", &self.item_offsets)?;
        for u in 0..self.num_users {
            write_row(&mut w, &format!("user {u}"), self.user_row(u))?;
        }
        for i in 0..self.num_items {
            write_row(&mut w, &format!("item {i}"), self.item_row(i))?;
        }
        w.flush()
    }

    /// Reads a checkpoint written by [`write_checkpoint`](Self::write_checkpoint),
    /// returning the parameters and the recorded seed.
    pub fn read_checkpoint<R: BufRead>(reader: R) -> Result<(Self, u64), ModelError> {
        let mut lines = reader.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String), ModelError> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n + 1, l)),
                Some((_, Err(e))) => Err(ModelError::Io(e)),
                None => Err(ModelError::Checkpoint {
                    line: 0,
                    message: format!("unexpected end of file, expected {what}"),
                }),
            }
        };
        let bad = |line: usize, message: String| ModelError::Checkpoint { line, message };

        let (n, magic) = next("magic")?;
        if magic.trim() != "mfips-checkpoint v1" {
            return Err(bad(n, format!("unknown header {magic:?}")));
        }
        let (n, dims) = next("dimensions")?;
        let mut header = [None; 4];
        for tok in dims.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| bad(n, format!("bad token {tok:?}")))?;
            let v: u64 = v.parse().map_err(|_| bad(n, format!("bad value {v:?}")))?;
            let slot = match k {
                "num_users" => 0,
                "num_items" => 1,
                "dim" => 2,
                "seed" => 3,
                _ => return Err(bad(n, format!("unknown key {k:?}"))),
            };
            header[slot] = Some(v);
        }
        let [Some(nu), Some(ni), Some(dim), Some(seed)] = header else {
            return Err(bad(n, "incomplete dimension line".into()));
        };
        let (nu, ni, dim) = (nu as usize, ni as usize, dim as usize);
        let mut params = MfParameters::zeros(nu, ni, dim);

        let mut parse_row = |label: &str, len: usize| -> Result<Vec<f64>, ModelError> {
            let (n, line) = next(label)?;
            let rest = line
                .strip_prefix(label)
                .ok_or_else(|| bad(n, format!("expected {label:?}")))?;
            let vals: Vec<f64> = rest
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| bad(n, format!("bad number {t:?}")))
                })
                .collect::<Result<_, _>>()?;
            if vals.len() != len {
                return Err(bad(
                    n,
                    format!("expected {len} values, found {}", vals.len()),
                ));
            }
            Ok(vals)
        };
        params.global_offset = parse_row("global_offset", 1)?[0];
        params.user_offsets = parse_row("user_offsets", nu)?;
        params.item_offsets = parse_row("item_offsets", ni)?;
        for u in 0..nu {
            let row = parse_row(&format!("user {u}"), dim)?;
            params.user_embeddings[u * dim..(u + 1) * dim].copy_from_slice(&row);
        }
        for i in 0..ni {
            let row = parse_row(&format!("item {i}"), dim)?;
            params.item_embeddings[i * dim..(i + 1) * dim].copy_from_slice(&row);
        }
        Ok((params, seed))
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<(), ModelError> {
        self.write_checkpoint(File::create(path)?, seed)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, u64), ModelError> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }
}

fn write_row<W: Write>(w: &mut W, label: &str, values: &[f64]) -> io::Result<()> {
    write!(w, "{label}")?;
    for v in values {
        write!(w, " {v}")?;
    }
    writeln!(w)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl RatingPredictor for MfParameters {
    fn predict_rating(&self, user: usize, item: usize) -> f64 {
        self.predict_unchecked(user, item)
    }
}

/// Non-personalized baseline: the mean training rating of each item.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgModel {
    per_item_mean: Vec<Option<f64>>,
    global_mean: f64,
}

impl AvgModel {
    pub fn fit(train: &RatingDataset) -> Result<Self, ModelError> {
        let global_mean = train.mean_rating().ok_or(ModelError::EmptyTrain)?;
        let mut sums = vec![0.0; train.num_items()];
        let mut counts = vec![0usize; train.num_items()];
        for t in train.iter() {
            sums[t.item] += t.value as f64;
            counts[t.item] += 1;
        }
        let per_item_mean = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        Ok(AvgModel {
            per_item_mean,
            global_mean,
        })
    }

    /// Item mean when the item was observed in training, the global mean
    /// otherwise (including items outside the fitted range).
    pub fn predict(&self, _user: usize, item: usize) -> f64 {
        self.per_item_mean
            .get(item)
            .copied()
            .flatten()
            .unwrap_or(self.global_mean)
    }

    pub fn item_mean(&self, item: usize) -> Option<f64> {
        self.per_item_mean.get(item).copied().flatten()
    }

    pub fn global_mean(&self) -> f64 {
        self.global_mean
    }
}

impl RatingPredictor for AvgModel {
    fn predict_rating(&self, user: usize, item: usize) -> f64 {
        self.predict(user, item)
    }
}

/// Clamps another predictor's output to a rating scale.
pub struct Clamped<'a, P: ?Sized> {
    inner: &'a P,
    min: f64,
    max: f64,
}

impl<'a, P: RatingPredictor + ?Sized> Clamped<'a, P> {
    pub fn new(inner: &'a P, scale: RatingScale) -> Self {
        Clamped {
            inner,
            min: scale.min as f64,
            max: scale.max as f64,
        }
    }
}

impl<P: RatingPredictor + ?Sized> RatingPredictor for Clamped<'_, P> {
    fn predict_rating(&self, user: usize, item: usize) -> f64 {
        self.inner
            .predict_rating(user, item)
            .clamp(self.min, self.max)
    }
}
