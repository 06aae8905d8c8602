//! Logged rating data: loading, validation, splitting and indexing.
//!
//! Ratings are held as dense `(user, item, value)` triples over a declared
//! number of users and items. External ids are remapped to dense 0-based
//! indices at load time; the [`IdMap`]s returned by [`load_ratings`] keep
//! the original ids for reporting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng::rng_from_seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("line {line}: rating {value} outside scale {min}..={max}")]
    RatingOutOfRange {
        line: u64,
        value: i64,
        min: u8,
        max: u8,
    },

    #[error("line {line}: duplicate rating for pair (user {user}, item {item}), first seen on line {first_line}")]
    DuplicateRow {
        line: u64,
        user: String,
        item: String,
        first_line: u64,
    },

    #[error("duplicate rating for pair (user {user}, item {item})")]
    DuplicatePair { user: usize, item: usize },

    #[error("triple ({user}, {item}) outside declared {num_users}x{num_items} dataset")]
    IndexOutOfRange {
        user: usize,
        item: usize,
        num_users: usize,
        num_items: usize,
    },

    #[error("rating {value} outside scale {min}..={max}")]
    ValueOutOfRange { value: u8, min: u8, max: u8 },

    #[error("invalid rating scale {min}..={max}")]
    InvalidScale { min: u8, max: u8 },

    #[error("cannot split a dataset of {len} triples (need at least 2)")]
    CannotSplit { len: usize },

    #[error("split fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),

    #[error("cannot shrink dataset to {num_users}x{num_items}: indices in use")]
    Shrink { num_users: usize, num_items: usize },

    #[error("datasets disagree on {what}")]
    Mismatch { what: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Inclusive integer rating scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RatingScale {
    pub min: u8,
    pub max: u8,
}

impl Default for RatingScale {
    fn default() -> Self {
        RatingScale { min: 1, max: 5 }
    }
}

impl RatingScale {
    pub fn new(min: u8, max: u8) -> Result<Self, DataError> {
        if min > max {
            return Err(DataError::InvalidScale { min, max });
        }
        Ok(RatingScale { min, max })
    }

    /// Number of distinct rating values.
    pub fn len(&self) -> usize {
        (self.max - self.min) as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, value: u8) -> bool {
        value >= self.min && value <= self.max
    }

    /// 0-based position of `value` on the scale. Caller guarantees `contains`.
    pub fn position(&self, value: u8) -> usize {
        debug_assert!(self.contains(value));
        (value - self.min) as usize
    }

    pub fn value_at(&self, position: usize) -> u8 {
        self.min + position as u8
    }

    pub fn values(&self) -> impl Iterator<Item = u8> {
        self.min..=self.max
    }
}

/// One observed rating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: u8,
}

impl Rating {
    pub fn new(user: usize, item: usize, value: u8) -> Self {
        Rating { user, item, value }
    }
}

/// Validated set of ratings over `num_users x num_items`.
///
/// No `(user, item)` pair appears twice and every value lies on the scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingDataset {
    num_users: usize,
    num_items: usize,
    scale: RatingScale,
    triples: Vec<Rating>,
}

impl RatingDataset {
    pub fn new(
        num_users: usize,
        num_items: usize,
        scale: RatingScale,
        triples: Vec<Rating>,
    ) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(triples.len());
        for t in &triples {
            if t.user >= num_users || t.item >= num_items {
                return Err(DataError::IndexOutOfRange {
                    user: t.user,
                    item: t.item,
                    num_users,
                    num_items,
                });
            }
            if !scale.contains(t.value) {
                return Err(DataError::ValueOutOfRange {
                    value: t.value,
                    min: scale.min,
                    max: scale.max,
                });
            }
            if !seen.insert((t.user, t.item)) {
                return Err(DataError::DuplicatePair {
                    user: t.user,
                    item: t.item,
                });
            }
        }
        Ok(RatingDataset {
            num_users,
            num_items,
            scale,
            triples,
        })
    }

    pub fn empty(num_users: usize, num_items: usize, scale: RatingScale) -> Self {
        RatingDataset {
            num_users,
            num_items,
            scale,
            triples: Vec::new(),
        }
    }

    /// Subset of an already validated dataset; skips re-validation.
    fn subset(&self, triples: Vec<Rating>) -> Self {
        RatingDataset {
            num_users: self.num_users,
            num_items: self.num_items,
            scale: self.scale,
            triples,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_cells(&self) -> usize {
        self.num_users * self.num_items
    }

    pub fn scale(&self) -> RatingScale {
        self.scale
    }

    pub fn triples(&self) -> &[Rating] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Rating> {
        self.triples.iter()
    }

    /// Returns the same triples declared over a (not smaller) index space.
    pub fn with_dims(mut self, num_users: usize, num_items: usize) -> Result<Self, DataError> {
        if num_users < self.num_users || num_items < self.num_items {
            let fits = self
                .triples
                .iter()
                .all(|t| t.user < num_users && t.item < num_items);
            if !fits {
                return Err(DataError::Shrink {
                    num_users,
                    num_items,
                });
            }
        }
        self.num_users = num_users;
        self.num_items = num_items;
        Ok(self)
    }

    pub fn observations(&self) -> ObservationIndicator {
        ObservationIndicator {
            pairs: self.triples.iter().map(|t| (t.user, t.item)).collect(),
        }
    }

    /// Mean of all rating values, `None` when empty.
    pub fn mean_rating(&self) -> Option<f64> {
        if self.triples.is_empty() {
            return None;
        }
        let sum: f64 = self.triples.iter().map(|t| t.value as f64).sum();
        Some(sum / self.triples.len() as f64)
    }

    /// Number of triples per rating value, indexed by scale position.
    pub fn rating_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.scale.len()];
        for t in &self.triples {
            counts[self.scale.position(t.value)] += 1;
        }
        counts
    }

    /// Number of triples per item.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items];
        for t in &self.triples {
            counts[t.item] += 1;
        }
        counts
    }

    /// Number of triples per user.
    pub fn user_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_users];
        for t in &self.triples {
            counts[t.user] += 1;
        }
        counts
    }

    /// Distinct users with at least one triple.
    pub fn users(&self) -> HashSet<usize> {
        self.triples.iter().map(|t| t.user).collect()
    }
}

/// The set of observed `(user, item)` pairs of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationIndicator {
    pairs: HashSet<(usize, usize)>,
}

impl ObservationIndicator {
    pub fn is_observed(&self, user: usize, item: usize) -> bool {
        self.pairs.contains(&(user, item))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_disjoint(&self, other: &ObservationIndicator) -> bool {
        self.pairs.is_disjoint(&other.pairs)
    }
}

/// Bijection between external ids and dense indices, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(&mut self, id: &str) -> usize {
        if let Some(&idx) = self.index.get(id) {
            return idx;
        }
        let idx = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), idx);
        idx
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id_of(&self, index: usize) -> Option<&str> {
        self.ids.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// How ids in a rating file map onto indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdMode {
    /// Arbitrary string ids, remapped to dense indices in first-seen order.
    Remap,
    /// Ids already are 0-based indices into a declared index space.
    Dense { num_users: usize, num_items: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub delimiter: u8,
    pub scale: RatingScale,
    pub ids: IdMode,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            delimiter: b',',
            scale: RatingScale::default(),
            ids: IdMode::Remap,
        }
    }
}

pub const HEADER: [&str; 3] = ["user_id", "item_id", "rating"];

/// A loaded dataset together with the id maps that produced its indices.
#[derive(Debug, Clone)]
pub struct LoadedRatings {
    pub dataset: RatingDataset,
    pub users: IdMap,
    pub items: IdMap,
}

/// Loads a delimiter-separated rating file with fresh id maps.
pub fn load_ratings(path: &Path, options: &LoadOptions) -> Result<LoadedRatings, DataError> {
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let dataset = load_ratings_shared(path, options, &mut users, &mut items)?;
    Ok(LoadedRatings {
        dataset,
        users,
        items,
    })
}

/// Loads a rating file, extending existing id maps so several files share
/// one index space. The dataset is declared over the maps' sizes after load.
pub fn load_ratings_shared(
    path: &Path,
    options: &LoadOptions,
    users: &mut IdMap,
    items: &mut IdMap,
) -> Result<RatingDataset, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    read_ratings(BufReader::new(file), options, users, items)
}

/// Parses ratings from any reader. A first row equal to the standard
/// header `user_id,item_id,rating` is skipped; line numbers in errors are
/// 1-based physical lines.
pub fn read_ratings<R: Read>(
    reader: R,
    options: &LoadOptions,
    users: &mut IdMap,
    items: &mut IdMap,
) -> Result<RatingDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);

    let scale = options.scale;
    let mut triples = Vec::new();
    let mut first_line: HashMap<(usize, usize), u64> = HashMap::new();
    let mut record = csv::StringRecord::new();
    let mut first = true;

    while rdr.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        if first {
            first = false;
            let is_header = record.len() == 3
                && record
                    .iter()
                    .zip(HEADER)
                    .all(|(field, name)| field.eq_ignore_ascii_case(name));
            if is_header {
                continue;
            }
        }
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != 3 {
            return Err(DataError::Parse {
                line,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }

        let (user, item) = match options.ids {
            IdMode::Remap => (
                users.get_or_insert(&record[0]),
                items.get_or_insert(&record[1]),
            ),
            IdMode::Dense {
                num_users,
                num_items,
            } => {
                let user = parse_index(&record[0], num_users, "user", line)?;
                let item = parse_index(&record[1], num_items, "item", line)?;
                (user, item)
            }
        };

        let value = parse_rating(&record[2], line)?;
        if value < scale.min as i64 || value > scale.max as i64 {
            return Err(DataError::RatingOutOfRange {
                line,
                value,
                min: scale.min,
                max: scale.max,
            });
        }

        if let Some(&seen) = first_line.get(&(user, item)) {
            return Err(DataError::DuplicateRow {
                line,
                user: record[0].to_owned(),
                item: record[1].to_owned(),
                first_line: seen,
            });
        }
        first_line.insert((user, item), line);
        triples.push(Rating::new(user, item, value as u8));
    }

    let (num_users, num_items) = match options.ids {
        IdMode::Remap => (users.len(), items.len()),
        IdMode::Dense {
            num_users,
            num_items,
        } => (num_users, num_items),
    };
    RatingDataset::new(num_users, num_items, scale, triples)
}

fn parse_index(field: &str, bound: usize, what: &str, line: u64) -> Result<usize, DataError> {
    let idx: usize = field.parse().map_err(|_| DataError::Parse {
        line,
        message: format!("{what} index {field:?} is not a non-negative integer"),
    })?;
    if idx >= bound {
        return Err(DataError::Parse {
            line,
            message: format!("{what} index {idx} out of range (declared {bound})"),
        });
    }
    Ok(idx)
}

fn parse_rating(field: &str, line: u64) -> Result<i64, DataError> {
    if let Ok(v) = field.parse::<i64>() {
        return Ok(v);
    }
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() && v.fract() == 0.0 => Ok(v as i64),
        _ => Err(DataError::Parse {
            line,
            message: format!("rating {field:?} is not an integer"),
        }),
    }
}

/// Writes ratings with the standard header. Without id maps the dense
/// indices are written as ids.
pub fn write_ratings<W: Write>(
    writer: W,
    dataset: &RatingDataset,
    delimiter: u8,
    ids: Option<(&IdMap, &IdMap)>,
) -> io::Result<()> {
    let mut w = BufWriter::new(writer);
    let d = delimiter as char;
    writeln!(w, "{}{d}{}{d}{}", HEADER[0], HEADER[1], HEADER[2])?;
    for t in dataset.iter() {
        match ids {
            Some((users, items)) => {
                let u = users.id_of(t.user).unwrap_or("?");
                let i = items.id_of(t.item).unwrap_or("?");
                writeln!(w, "{u}{d}{i}{d}{}", t.value)?;
            }
            None => writeln!(w, "{}{d}{}{d}{}", t.user, t.item, t.value)?,
        }
    }
    w.flush()
}

pub fn write_ratings_file(
    path: &Path,
    dataset: &RatingDataset,
    delimiter: u8,
    ids: Option<(&IdMap, &IdMap)>,
) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    write_ratings(file, dataset, delimiter, ids).map_err(|e| DataError::io(path, e))
}

/// Sizes `(first, second)` of a split of `n` items where `first` takes
/// `fraction` of them. The smaller side gets the floor, the larger side the
/// remainder.
pub fn split_sizes(n: usize, fraction: f64) -> (usize, usize) {
    // Guards products like 0.2 * 10 = 1.9999999999999996.
    const EPS: f64 = 1e-9;
    if fraction >= 0.5 {
        let second = (((1.0 - fraction) * n as f64) + EPS).floor() as usize;
        (n - second, second)
    } else {
        let first = ((fraction * n as f64) + EPS).floor() as usize;
        (first, n - first)
    }
}

fn partition(
    data: &RatingDataset,
    fraction: f64,
    seed: u64,
) -> Result<(RatingDataset, RatingDataset), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let n = data.len();
    if n < 2 {
        return Err(DataError::CannotSplit { len: n });
    }
    let (first_len, _) = split_sizes(n, fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let (head, tail) = order.split_at_mut(first_len);
    head.sort_unstable();
    tail.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&k| data.triples[k]).collect::<Vec<_>>();
    Ok((data.subset(pick(head)), data.subset(pick(tail))))
}

/// Uniform random `ratio : 1 - ratio` partition of logged (biased) ratings
/// into training and validation sets.
pub fn split_biased(
    data: &RatingDataset,
    ratio: f64,
    seed: u64,
) -> Result<(RatingDataset, RatingDataset), DataError> {
    partition(data, ratio, seed)
}

/// Uniform random partition of unbiased ratings into the small MCAR set
/// (`mcar_fraction` of the data) and the test set.
pub fn split_unbiased(
    data: &RatingDataset,
    mcar_fraction: f64,
    seed: u64,
) -> Result<(RatingDataset, RatingDataset), DataError> {
    partition(data, mcar_fraction, seed)
}

/// Keeps only the triples of users that appear in `test`.
pub fn filter_to_test_users(biased: &RatingDataset, test: &RatingDataset) -> RatingDataset {
    let keep = test.users();
    biased.subset(
        biased
            .iter()
            .filter(|t| keep.contains(&t.user))
            .copied()
            .collect(),
    )
}

/// The four datasets an experiment runs on.
#[derive(Debug, Clone)]
pub struct SplitBundle {
    pub train: RatingDataset,
    pub validation: RatingDataset,
    pub mcar: RatingDataset,
    pub test: RatingDataset,
}

impl SplitBundle {
    /// Checks shared dimensions and the disjointness of train/validation and
    /// of mcar/test.
    pub fn new(
        train: RatingDataset,
        validation: RatingDataset,
        mcar: RatingDataset,
        test: RatingDataset,
    ) -> Result<Self, DataError> {
        let dims = (train.num_users, train.num_items, train.scale);
        for (name, d) in [
            ("validation", &validation),
            ("mcar", &mcar),
            ("test", &test),
        ] {
            if (d.num_users, d.num_items, d.scale) != dims {
                return Err(DataError::Mismatch {
                    what: format!("dimensions of train and {name}"),
                });
            }
        }
        if !train.observations().is_disjoint(&validation.observations()) {
            return Err(DataError::Mismatch {
                what: "train and validation overlap".into(),
            });
        }
        if !mcar.observations().is_disjoint(&test.observations()) {
            return Err(DataError::Mismatch {
                what: "mcar and test overlap".into(),
            });
        }
        Ok(SplitBundle {
            train,
            validation,
            mcar,
            test,
        })
    }

    pub fn num_users(&self) -> usize {
        self.train.num_users
    }

    pub fn num_items(&self) -> usize {
        self.train.num_items
    }
}

/// Plain-text `key=value` record of the parameters behind a set of files.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) -> &mut Self {
        self.entries.insert(key.to_owned(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, DataError> {
        let raw = self
            .get(key)
            .ok_or_else(|| DataError::Manifest(format!("missing key {key}")))?;
        raw.parse()
            .map_err(|_| DataError::Manifest(format!("bad value for {key}: {raw:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (k, v) in &self.entries {
            writeln!(w, "{k}={v}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, DataError> {
        let mut m = Manifest::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| DataError::Manifest(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                DataError::Manifest(format!("line {}: expected key=value", n + 1))
            })?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), DataError> {
        let file = File::create(path).map_err(|e| DataError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| DataError::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self, DataError> {
        let file = File::open(path).map_err(|e| DataError::io(path, e))?;
        Manifest::read_from(BufReader::new(file))
    }
}
