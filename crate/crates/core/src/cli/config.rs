//! TOML experiment configuration and the data it points at.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    filter_to_test_users, load_ratings_shared, split_biased, split_unbiased, IdMap, IdMode,
    LoadOptions, Manifest, RatingDataset, RatingScale, SplitBundle,
};
use crate::optim::{Schedule, TrainConfig};
use crate::propensity::{MfPropensityConfig, PropensityModel, ZeroCountPolicy};
use crate::rng::derive_seed;
use crate::sim::{simulate, SimulationSpec};

use super::run::{Hyperparams, Method, RunOptions};
use super::CliError;

/// File names inside a splits directory written by `simulate`.
pub const SPLIT_FILES: [&str; 4] = ["train.csv", "validation.csv", "mcar.csv", "test.csv"];
pub const GROUND_TRUTH_FILE: &str = "ground_truth_propensity.tsv";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Where the ratings come from. Exactly one of `splits_dir` or the
/// `biased`/`unbiased` pair must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory produced by `simulate`.
    pub splits_dir: Option<PathBuf>,
    /// Logged ratings, split into train and validation.
    pub biased: Option<PathBuf>,
    /// Randomly sampled ratings, split into MCAR and test.
    pub unbiased: Option<PathBuf>,
    pub delimiter: String,
    pub rating_min: u8,
    pub rating_max: u8,
    pub mcar_fraction: f64,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            splits_dir: None,
            biased: None,
            unbiased: None,
            delimiter: ",".into(),
            rating_min: 1,
            rating_max: 5,
            mcar_fraction: 0.05,
            train_fraction: 0.8,
            split_seed: 0,
        }
    }
}

/// Settings shared by every training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// `alternating` or `concurrent`.
    pub schedule: String,
    pub init_scale: f64,
    pub normalize: bool,
    pub clip: bool,
    /// `fallback` or `error`.
    pub zero_count: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            schedule: t.schedule.as_str().into(),
            init_scale: t.init_scale,
            normalize: true,
            clip: true,
            zero_count: "fallback".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfPropensitySection {
    pub dim: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub init_scale: f64,
    pub tolerance: f64,
}

impl Default for MfPropensitySection {
    fn default() -> Self {
        let m = MfPropensityConfig::default();
        MfPropensitySection {
            dim: m.dim,
            learning_rate: m.learning_rate,
            l2: m.l2,
            epochs: m.epochs,
            init_scale: m.init_scale,
            tolerance: m.tolerance,
        }
    }
}

/// Per-method overrides of the `[defaults]` hyperparameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperparamsPatch {
    pub learning_rate: Option<f64>,
    pub l2: Option<f64>,
    pub dim: Option<usize>,
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub tau: Option<f64>,
}

impl HyperparamsPatch {
    pub fn apply(&self, base: &Hyperparams) -> Hyperparams {
        Hyperparams {
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            l2: self.l2.unwrap_or(base.l2),
            dim: self.dim.unwrap_or(base.dim),
            alpha1: self.alpha1.unwrap_or(base.alpha1),
            alpha2: self.alpha2.unwrap_or(base.alpha2),
            tau: self.tau.or(base.tau),
        }
    }

    pub fn from_hyperparams(h: &Hyperparams) -> Self {
        HyperparamsPatch {
            learning_rate: Some(h.learning_rate),
            l2: Some(h.l2),
            dim: Some(h.dim),
            alpha1: Some(h.alpha1),
            alpha2: Some(h.alpha2),
            tau: h.tau,
        }
    }
}

/// Search ranges for `tune`. Smoothing ranges only apply to `mf_ips_mul`
/// and clip floors only to IPS methods; an empty `tau` list means the
/// default floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub learning_rate: Vec<f64>,
    pub l2: Vec<f64>,
    pub dim: Vec<usize>,
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub tau: Vec<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            learning_rate: vec![1e-3, 1e-4, 1e-5],
            l2: vec![1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2],
            dim: vec![16, 32, 64, 128],
            alpha1: (1..=10).map(f64::from).collect(),
            alpha2: (1..=10).map(f64::from).collect(),
            tau: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub gammas: Vec<f64>,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            gammas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            bootstrap_resamples: 1000,
            confidence: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub threads: usize,
    pub clamp_predictions: bool,
    pub data: Option<DataSection>,
    pub simulation: Option<SimulationSpec>,
    pub train: TrainSection,
    pub mf_propensity: MfPropensitySection,
    pub defaults: Hyperparams,
    pub methods_params: BTreeMap<String, HyperparamsPatch>,
    pub grid: GridSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            methods: Method::ALL.iter().map(|m| m.as_str().to_owned()).collect(),
            seeds: vec![0],
            out: None,
            threads: 0,
            clamp_predictions: false,
            data: None,
            simulation: None,
            train: TrainSection::default(),
            mf_propensity: MfPropensitySection::default(),
            defaults: Hyperparams::default(),
            methods_params: BTreeMap::new(),
            grid: GridSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Moves `[method.<name>]` tables to the field that holds them.
fn split_method_tables(mut doc: toml::Table) -> toml::Table {
    if let Some(value) = doc.remove("method") {
        doc.insert("methods_params".into(), value);
    }
    doc
}

impl ExperimentConfig {
    /// Parses a config document. Per-method overrides live under
    /// `[method.<name>]`.
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let parse_err = |message: String| CliError::Parse {
            path: origin.to_path_buf(),
            message,
        };
        let doc: toml::Table = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        if doc.contains_key("methods_params") {
            return Err(CliError::config(
                "methods_params",
                "use [method.<name>] tables",
            ));
        }
        let doc = split_method_tables(doc);
        let config: ExperimentConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Canonical TOML form; `[method.<name>]` tables replace the internal
    /// field name.
    pub fn to_toml(&self) -> String {
        let mut doc = toml::Table::try_from(self).expect("config serializes");
        if let Some(v) = doc.remove("methods_params") {
            doc.insert("method".into(), v);
        }
        toml::to_string(&doc).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical form, recorded with every result row.
    /// The output directory and thread count do not change results and are
    /// left out.
    pub fn hash(&self) -> String {
        let inert = ExperimentConfig {
            out: None,
            threads: 0,
            ..self.clone()
        };
        Sha256::digest(inert.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn method_list(&self) -> Result<Vec<Method>, CliError> {
        self.methods.iter().map(|m| m.parse()).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let methods = self.method_list()?;
        if methods.is_empty() {
            return Err(CliError::config("methods", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "must not be empty"));
        }
        for name in self.methods_params.keys() {
            name.parse::<Method>()
                .map_err(|_| CliError::config(format!("method.{name}"), "unknown method"))?;
        }
        match (&self.data, &self.simulation) {
            (Some(_), Some(_)) => {
                return Err(CliError::config(
                    "data",
                    "set either [data] or [simulation], not both",
                ))
            }
            (Some(d), None) => {
                let pair = d.biased.is_some() || d.unbiased.is_some();
                match (&d.splits_dir, pair) {
                    (Some(_), true) => {
                        return Err(CliError::config(
                            "data.splits_dir",
                            "conflicts with data.biased/data.unbiased",
                        ))
                    }
                    (None, false) => {
                        return Err(CliError::config(
                            "data",
                            "needs splits_dir or biased and unbiased",
                        ))
                    }
                    (None, true) if d.biased.is_none() || d.unbiased.is_none() => {
                        return Err(CliError::config(
                            "data",
                            "biased and unbiased must both be set",
                        ))
                    }
                    _ => {}
                }
                if d.splits_dir.is_none() && methods.contains(&Method::MfIpsGt) {
                    return Err(CliError::config(
                        "methods",
                        "mf_ips_gt is only valid with simulated data",
                    ));
                }
                delimiter_byte(&d.delimiter)?;
                RatingScale::new(d.rating_min, d.rating_max)?;
                for (field, f) in [
                    ("data.mcar_fraction", d.mcar_fraction),
                    ("data.train_fraction", d.train_fraction),
                ] {
                    if !(f > 0.0 && f < 1.0) {
                        return Err(CliError::config(
                            field,
                            format!("must lie in (0, 1), got {f}"),
                        ));
                    }
                }
            }
            (None, Some(spec)) => spec.validate()?,
            (None, None) => {}
        }
        self.train_template(0)?;
        let g = &self.grid;
        if g.alpha1.iter().chain(&g.alpha2).any(|&a| !(a > 0.0)) {
            return Err(CliError::config(
                "grid",
                "smoothing values must be positive",
            ));
        }
        if !(self.sweep.confidence > 0.0 && self.sweep.confidence < 1.0) {
            return Err(CliError::config("sweep.confidence", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Hyperparameters for `method`: `[defaults]` patched by its table.
    pub fn hyperparams(&self, method: Method) -> Hyperparams {
        match self.methods_params.get(method.as_str()) {
            Some(p) => p.apply(&self.defaults),
            None => self.defaults,
        }
    }

    fn train_template(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let schedule: Schedule = t.schedule.parse().map_err(|_| {
            CliError::config(
                "train.schedule",
                format!("expected alternating or concurrent, got {:?}", t.schedule),
            )
        })?;
        let config = TrainConfig {
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            schedule,
            init_scale: t.init_scale,
            seed,
            ..TrainConfig::default()
        };
        config
            .validate()
            .map_err(|e| CliError::config("train", e.to_string()))?;
        Ok(config)
    }

    pub fn run_options(&self) -> Result<RunOptions, CliError> {
        let zero_count = match self.train.zero_count.as_str() {
            "fallback" => ZeroCountPolicy::Fallback,
            "error" => ZeroCountPolicy::Error,
            other => {
                return Err(CliError::config(
                    "train.zero_count",
                    format!("expected fallback or error, got {other:?}"),
                ))
            }
        };
        let m = &self.mf_propensity;
        Ok(RunOptions {
            train: self.train_template(0)?,
            normalize: self.train.normalize,
            clip: self.train.clip,
            zero_count,
            mf_propensity: MfPropensityConfig {
                dim: m.dim,
                learning_rate: m.learning_rate,
                l2: m.l2,
                epochs: m.epochs,
                seed: 0,
                init_scale: m.init_scale,
                tolerance: m.tolerance,
            },
            clamp_predictions: self.clamp_predictions,
        })
    }
}

pub(crate) fn delimiter_byte(s: &str) -> Result<u8, CliError> {
    match s {
        "\\t" | "\t" | "tab" => Ok(b'\t'),
        s if s.len() == 1 => Ok(s.as_bytes()[0]),
        other => Err(CliError::config(
            "data.delimiter",
            format!("expected one character, got {other:?}"),
        )),
    }
}

/// Splits ready for training plus what is known about them.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub splits: SplitBundle,
    pub ground_truth: Option<PropensityModel>,
}

fn load_with_dims(path: &Path, options: &LoadOptions) -> Result<RatingDataset, CliError> {
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    Ok(load_ratings_shared(path, options, &mut users, &mut items)?)
}

/// Loads a directory written by `simulate`.
pub fn load_splits_dir(dir: &Path) -> Result<ExperimentData, CliError> {
    let manifest = Manifest::read_file(&dir.join(MANIFEST_FILE))?;
    let scale = RatingScale::new(manifest.parse("rating_min")?, manifest.parse("rating_max")?)?;
    let options = LoadOptions {
        delimiter: b',',
        scale,
        ids: IdMode::Dense {
            num_users: manifest.parse("num_users")?,
            num_items: manifest.parse("num_items")?,
        },
    };
    let [train, validation, mcar, test] =
        SPLIT_FILES.map(|f| load_with_dims(&dir.join(f), &options));
    let splits = SplitBundle::new(train?, validation?, mcar?, test?)?;
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let ground_truth = if gt_path.exists() {
        Some(PropensityModel::load(&gt_path)?)
    } else {
        None
    };
    Ok(ExperimentData {
        splits,
        ground_truth,
    })
}

const SPLIT_VALIDATION_STREAM: u64 = 20;
const SPLIT_MCAR_STREAM: u64 = 21;

/// Loads a biased/unbiased file pair into one index space, drops biased
/// users absent from the unbiased file, and splits both.
pub fn load_real(d: &DataSection) -> Result<ExperimentData, CliError> {
    let (biased_path, unbiased_path) = match (&d.biased, &d.unbiased) {
        (Some(b), Some(u)) => (b, u),
        _ => {
            return Err(CliError::config(
                "data",
                "biased and unbiased must both be set",
            ))
        }
    };
    let options = LoadOptions {
        delimiter: delimiter_byte(&d.delimiter)?,
        scale: RatingScale::new(d.rating_min, d.rating_max)?,
        ids: IdMode::Remap,
    };
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let biased = load_ratings_shared(biased_path, &options, &mut users, &mut items)?;
    let unbiased = load_ratings_shared(unbiased_path, &options, &mut users, &mut items)?;
    let (nu, ni) = (users.len(), items.len());
    let biased = biased.with_dims(nu, ni)?;
    let unbiased = unbiased.with_dims(nu, ni)?;
    let biased = filter_to_test_users(&biased, &unbiased);
    let (train, validation) = split_biased(
        &biased,
        d.train_fraction,
        derive_seed(d.split_seed, SPLIT_VALIDATION_STREAM),
    )?;
    let (mcar, test) = split_unbiased(
        &unbiased,
        d.mcar_fraction,
        derive_seed(d.split_seed, SPLIT_MCAR_STREAM),
    )?;
    Ok(ExperimentData {
        splits: SplitBundle::new(train, validation, mcar, test)?,
        ground_truth: None,
    })
}

impl ExperimentConfig {
    /// Materializes the configured data source.
    pub fn load_data(&self) -> Result<ExperimentData, CliError> {
        match (&self.data, &self.simulation) {
            (Some(d), _) => match &d.splits_dir {
                Some(dir) => load_splits_dir(dir),
                None => load_real(d),
            },
            (None, Some(spec)) => {
                let sim = simulate(spec)?;
                Ok(ExperimentData {
                    splits: sim.splits,
                    ground_truth: Some(sim.ground_truth),
                })
            }
            (None, None) => Err(CliError::config(
                "data",
                "config has neither [data] nor [simulation]",
            )),
        }
    }
}
