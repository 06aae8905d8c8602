//! The subcommands: simulate, train, tune, sweep-gamma and summarize.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{write_ratings_file, Manifest, SplitBundle};
use crate::metrics::{bootstrap_ci, mean_std};
use crate::optim::TrainError;
use crate::rng::{derive_seed, rng_from_seed};
use crate::sim::{build_truth, simulate, simulate_from_truth, SimulatedData, SimulationSpec};

use super::config::{
    ExperimentConfig, GridSection, HyperparamsPatch, GROUND_TRUTH_FILE, MANIFEST_FILE, SPLIT_FILES,
};
use super::run::{run_method, Hyperparams, Method, MethodRun};
use super::CliError;

pub const RESULTS_FILE: &str = "results.tsv";
pub const SUMMARY_FILE: &str = "summary.tsv";
pub const CELLS_DIR: &str = "cells";
pub const HISTORY_DIR: &str = "history";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const TUNE_FILE: &str = "tune.tsv";
pub const BEST_PARAMS_FILE: &str = "best_params.toml";

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    // write then rename, so a crash never leaves a truncated file behind
    let tmp = path.with_extension("partial");
    fs::write(&tmp, contents).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Runs `f` on a rayon pool with `threads` workers (0 = rayon's default).
pub fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::config("threads", e.to_string()))?;
    Ok(pool.install(f))
}

fn join<T: fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

// ---------------------------------------------------------------- simulate

/// Key=value record of a simulation spec and the sizes it produced.
pub fn simulation_manifest(spec: &SimulationSpec, sim: &SimulatedData) -> Manifest {
    let mut m = Manifest::new();
    let s = &sim.splits;
    let scale = s.train.scale();
    m.set("gamma", spec.gamma)
        .set("seed", spec.seed)
        .set("observation_seed", spec.observation_seed())
        .set("rating_distribution", join(&spec.rating_distribution))
        .set("rating_propensities", join(&spec.rating_propensities))
        .set("powerlaw_eta", spec.powerlaw_eta)
        .set("k_min", spec.k_min)
        .set("unbiased_per_user", spec.unbiased_per_user)
        .set("mcar_fraction", spec.mcar_fraction)
        .set("train_fraction", spec.train_fraction)
        .set("num_users", s.num_users())
        .set("num_items", s.num_items())
        .set("rating_min", scale.min)
        .set("rating_max", scale.max)
        .set("capped_items", sim.capped_items)
        .set("logged_size", sim.logged.len())
        .set("train_size", s.train.len())
        .set("validation_size", s.validation.len())
        .set("mcar_size", s.mcar.len())
        .set("test_size", s.test.len());
    match &spec.engagement_path {
        Some(path) => {
            m.set("engagement_path", path.display()).set(
                "engagement_format",
                format!("{:?}", spec.engagement_format).to_lowercase(),
            );
        }
        None => {
            let e = &spec.engagement;
            m.set("engagement.num_users", e.num_users)
                .set("engagement.num_items", e.num_items)
                .set("engagement.rank", e.rank)
                .set("engagement.factor_std", e.factor_std)
                .set("engagement.user_offset_std", e.user_offset_std)
                .set("engagement.item_offset_std", e.item_offset_std)
                .set("engagement.noise_std", e.noise_std);
        }
    }
    m
}

/// Simulates `spec` and writes the four splits, the ground-truth
/// propensities and a manifest into `out`.
pub fn cmd_simulate(spec: &SimulationSpec, out: &Path) -> Result<SimulatedData, CliError> {
    let sim = simulate(spec)?;
    create_dir(out)?;
    let s = &sim.splits;
    for (name, ds) in SPLIT_FILES
        .iter()
        .zip([&s.train, &s.validation, &s.mcar, &s.test])
    {
        write_ratings_file(&out.join(name), ds, b',', None)?;
    }
    sim.ground_truth.save(&out.join(GROUND_TRUTH_FILE))?;
    simulation_manifest(spec, &sim).write_file(&out.join(MANIFEST_FILE))?;
    info!(
        "simulated gamma={} into {}: {} logged ratings",
        spec.gamma,
        out.display(),
        sim.logged.len()
    );
    Ok(sim)
}

/// Reads a simulation spec from either a bare spec document or the
/// `[simulation]` table of an experiment config.
pub fn load_simulation_spec(path: &Path) -> Result<SimulationSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parse_err = |e: toml::de::Error| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let doc: toml::Table = toml::from_str(&text).map_err(parse_err)?;
    let spec: SimulationSpec = match doc.get("simulation") {
        Some(table) => table.clone().try_into().map_err(parse_err)?,
        None => doc.try_into().map_err(parse_err)?,
    };
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------- result rows

/// One `(gamma, method, seed)` outcome with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub config_hash: String,
    pub gamma: Option<f64>,
    pub method: Method,
    pub seed: u64,
    pub train_size: usize,
    pub validation_size: usize,
    pub mcar_size: usize,
    pub test_size: usize,
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub rmse_user: f64,
    pub rmse_item: f64,
    pub selection: f64,
    pub best_epoch: Option<usize>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub l2: Option<f64>,
    pub dim: Option<usize>,
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub tau: Option<f64>,
    pub normalizer: Option<f64>,
}

pub const RESULT_COLUMNS: [&str; 23] = [
    "config_hash",
    "gamma",
    "method",
    "seed",
    "train_size",
    "validation_size",
    "mcar_size",
    "test_size",
    "mse",
    "mae",
    "rmse",
    "rmse_user",
    "rmse_item",
    "selection",
    "best_epoch",
    "epochs",
    "learning_rate",
    "l2",
    "dim",
    "alpha1",
    "alpha2",
    "tau",
    "normalizer",
];

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref()
        .map_or_else(|| "NA".to_owned(), ToString::to_string)
}

fn parse_opt<T: std::str::FromStr>(s: &str) -> Result<Option<T>, String> {
    if s == "NA" {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| format!("bad value {s:?}"))
    }
}

impl ResultRow {
    pub fn from_run(
        config_hash: &str,
        gamma: Option<f64>,
        splits: &SplitBundle,
        run: &MethodRun,
    ) -> Self {
        let m = run.method;
        let h = &run.hyper;
        let r = &run.report;
        ResultRow {
            config_hash: config_hash.to_owned(),
            gamma,
            method: m,
            seed: run.seed,
            train_size: splits.train.len(),
            validation_size: splits.validation.len(),
            mcar_size: splits.mcar.len(),
            test_size: splits.test.len(),
            mse: r.mse,
            mae: r.mae,
            rmse: r.rmse,
            rmse_user: r.rmse_user,
            rmse_item: r.rmse_item,
            selection: run.validation,
            best_epoch: run.outcome.as_ref().map(|o| o.best_epoch),
            epochs: run.outcome.as_ref().map(|o| o.history.len()),
            learning_rate: m.trains().then_some(h.learning_rate),
            l2: m.trains().then_some(h.l2),
            dim: m.trains().then_some(h.dim),
            alpha1: m.uses_smoothing().then_some(h.alpha1),
            alpha2: m.uses_smoothing().then_some(h.alpha2),
            tau: run.propensities.tau,
            normalizer: run.propensities.normalizer,
        }
    }

    pub fn fields(&self) -> Vec<String> {
        vec![
            self.config_hash.clone(),
            opt(&self.gamma),
            self.method.to_string(),
            self.seed.to_string(),
            self.train_size.to_string(),
            self.validation_size.to_string(),
            self.mcar_size.to_string(),
            self.test_size.to_string(),
            self.mse.to_string(),
            self.mae.to_string(),
            self.rmse.to_string(),
            self.rmse_user.to_string(),
            self.rmse_item.to_string(),
            self.selection.to_string(),
            opt(&self.best_epoch),
            opt(&self.epochs),
            opt(&self.learning_rate),
            opt(&self.l2),
            opt(&self.dim),
            opt(&self.alpha1),
            opt(&self.alpha2),
            opt(&self.tau),
            opt(&self.normalizer),
        ]
    }

    pub fn parse_fields(fields: &[&str]) -> Result<Self, String> {
        if fields.len() != RESULT_COLUMNS.len() {
            return Err(format!(
                "expected {} columns, got {}",
                RESULT_COLUMNS.len(),
                fields.len()
            ));
        }
        let num = |k: usize| -> Result<f64, String> {
            fields[k]
                .parse()
                .map_err(|_| format!("{}: bad value {:?}", RESULT_COLUMNS[k], fields[k]))
        };
        let int = |k: usize| -> Result<usize, String> {
            fields[k]
                .parse()
                .map_err(|_| format!("{}: bad value {:?}", RESULT_COLUMNS[k], fields[k]))
        };
        Ok(ResultRow {
            config_hash: fields[0].to_owned(),
            gamma: parse_opt(fields[1])?,
            method: fields[2].parse().map_err(|e: CliError| e.to_string())?,
            seed: fields[3]
                .parse()
                .map_err(|_| format!("seed: bad value {:?}", fields[3]))?,
            train_size: int(4)?,
            validation_size: int(5)?,
            mcar_size: int(6)?,
            test_size: int(7)?,
            mse: num(8)?,
            mae: num(9)?,
            rmse: num(10)?,
            rmse_user: num(11)?,
            rmse_item: num(12)?,
            selection: num(13)?,
            best_epoch: parse_opt(fields[14])?,
            epochs: parse_opt(fields[15])?,
            learning_rate: parse_opt(fields[16])?,
            l2: parse_opt(fields[17])?,
            dim: parse_opt(fields[18])?,
            alpha1: parse_opt(fields[19])?,
            alpha2: parse_opt(fields[20])?,
            tau: parse_opt(fields[21])?,
            normalizer: parse_opt(fields[22])?,
        })
    }

    fn sort_key(&self) -> (u64, Method, u64, String) {
        // NA sorts first; non-negative gammas order by their bits
        (
            self.gamma.map_or(0, |g| g.to_bits().wrapping_add(1)),
            self.method,
            self.seed,
            self.config_hash.clone(),
        )
    }
}

fn results_table(rows: &[ResultRow]) -> String {
    let mut s = RESULT_COLUMNS.join("\t");
    s.push('\n');
    for r in rows {
        s.push_str(&r.fields().join("\t"));
        s.push('\n');
    }
    s
}

/// Parses a results table (or a single cell file).
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let parse_err = |message: String| CliError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let header = lines.next().ok_or_else(|| parse_err("empty file".into()))?;
    if header.split('\t').ne(RESULT_COLUMNS) {
        return Err(parse_err("unexpected header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let fields: Vec<&str> = l.split('\t').collect();
            ResultRow::parse_fields(&fields).map_err(|m| parse_err(format!("line {}: {m}", n + 2)))
        })
        .collect()
}

fn history_table(run: &MethodRun) -> Option<String> {
    let outcome = run.outcome.as_ref()?;
    let mut s = String::from("epoch\ttrain_ips_loss\tvalidation_snips_mse\ttest_mse\n");
    for e in &outcome.history {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}",
            e.epoch,
            e.train_ips_loss,
            e.validation_snips_mse,
            opt(&e.test_mse)
        );
    }
    Some(s)
}

fn cell_tag(gamma: Option<f64>, method: Method, seed: u64) -> String {
    match gamma {
        Some(g) => format!("gamma{g}_{method}_seed{seed}"),
        None => format!("{method}_seed{seed}"),
    }
}

/// Writes the files one `(gamma, method, seed)` cell owns.
fn write_cell(out: &Path, row: &ResultRow, run: &MethodRun) -> Result<(), CliError> {
    let tag = cell_tag(row.gamma, row.method, row.seed);
    if let Some(history) = history_table(run) {
        write_file(&out.join(HISTORY_DIR).join(format!("{tag}.tsv")), &history)?;
    }
    if let Some(outcome) = &run.outcome {
        let path = out.join(CHECKPOINT_DIR).join(format!("{tag}.ckpt"));
        outcome.params.save(&path, run.seed)?;
    }
    write_file(
        &out.join(CELLS_DIR).join(format!("{tag}.tsv")),
        &results_table(std::slice::from_ref(row)),
    )
}

fn existing_cell(
    out: &Path,
    gamma: Option<f64>,
    method: Method,
    seed: u64,
    hash: &str,
) -> Option<ResultRow> {
    let path = out
        .join(CELLS_DIR)
        .join(format!("{}.tsv", cell_tag(gamma, method, seed)));
    let rows = read_results(&path).ok()?;
    rows.into_iter().next().filter(|r| r.config_hash == hash)
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    for sub in [CELLS_DIR, HISTORY_DIR, CHECKPOINT_DIR] {
        create_dir(&out.join(sub))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- summarize

/// Aggregate of one `(config_hash, gamma, method)` group.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub config_hash: String,
    pub gamma: Option<f64>,
    pub method: Method,
    pub runs: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mse_ci: (f64, f64),
    pub mae_mean: f64,
    pub mae_std: f64,
    pub mae_ci: (f64, f64),
    pub rmse_mean: f64,
    pub rmse_std: f64,
}

pub const SUMMARY_COLUMNS: [&str; 14] = [
    "config_hash",
    "gamma",
    "method",
    "runs",
    "mse_mean",
    "mse_std",
    "mse_ci_low",
    "mse_ci_high",
    "mae_mean",
    "mae_std",
    "mae_ci_low",
    "mae_ci_high",
    "rmse_mean",
    "rmse_std",
];

/// Bootstrap settings for summaries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapSettings {
    pub resamples: usize,
    pub confidence: f64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        BootstrapSettings {
            resamples: 1000,
            confidence: 0.95,
        }
    }
}

/// Groups rows by `(config_hash, gamma, method)` and aggregates over
/// seeds. Confidence intervals are percentile bootstraps of the mean.
pub fn summarize_rows(
    rows: &[ResultRow],
    boot: BootstrapSettings,
) -> Result<Vec<SummaryRow>, CliError> {
    type Groups<'a> = BTreeMap<(u64, Method, String), (Option<f64>, Vec<&'a ResultRow>)>;
    let mut groups: Groups = BTreeMap::new();
    for r in rows {
        let (g, m, _, h) = r.sort_key();
        groups
            .entry((g, m, h))
            .or_insert_with(|| (r.gamma, Vec::new()))
            .1
            .push(r);
    }
    groups
        .into_iter()
        .map(|((gkey, method, hash), (gamma, members))| {
            let pick = |f: fn(&ResultRow) -> f64| members.iter().map(|r| f(r)).collect::<Vec<_>>();
            let mse = pick(|r| r.mse);
            let mae = pick(|r| r.mae);
            let rmse = pick(|r| r.rmse);
            let boot_seed = derive_seed(gkey, method as u64);
            let (mse_mean, mse_std) = mean_std(&mse)?;
            let (mae_mean, mae_std) = mean_std(&mae)?;
            let (rmse_mean, rmse_std) = mean_std(&rmse)?;
            Ok(SummaryRow {
                config_hash: hash,
                gamma,
                method,
                runs: members.len(),
                mse_mean,
                mse_std,
                mse_ci: bootstrap_ci(&mse, boot.resamples, boot.confidence, boot_seed)?,
                mae_mean,
                mae_std,
                mae_ci: bootstrap_ci(
                    &mae,
                    boot.resamples,
                    boot.confidence,
                    derive_seed(boot_seed, 1),
                )?,
                rmse_mean,
                rmse_std,
            })
        })
        .collect()
}

fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = SUMMARY_COLUMNS.join("\t");
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.config_hash,
            opt(&r.gamma),
            r.method,
            r.runs,
            r.mse_mean,
            r.mse_std,
            r.mse_ci.0,
            r.mse_ci.1,
            r.mae_mean,
            r.mae_std,
            r.mae_ci.0,
            r.mae_ci.1,
            r.rmse_mean,
            r.rmse_std
        );
    }
    s
}

/// Writes `results.tsv` and `summary.tsv` for `rows`, sorted by gamma,
/// method and seed.
pub fn write_aggregate(
    out: &Path,
    mut rows: Vec<ResultRow>,
    boot: BootstrapSettings,
) -> Result<Vec<SummaryRow>, CliError> {
    rows.sort_by_key(ResultRow::sort_key);
    write_file(&out.join(RESULTS_FILE), &results_table(&rows))?;
    let summary = summarize_rows(&rows, boot)?;
    write_file(&out.join(SUMMARY_FILE), &summary_table(&summary))?;
    Ok(summary)
}

/// Rebuilds the aggregate tables from every cell file under `out`.
pub fn cmd_summarize(out: &Path, boot: BootstrapSettings) -> Result<Vec<SummaryRow>, CliError> {
    let dir = out.join(CELLS_DIR);
    let entries = fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()).map_err(|err| CliError::io(&dir, err)))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "tsv"));
    paths.sort();
    let mut rows = Vec::new();
    for p in &paths {
        rows.extend(read_results(p)?);
    }
    if rows.is_empty() {
        return Err(CliError::config(
            "out",
            format!("no result cells under {}", dir.display()),
        ));
    }
    write_aggregate(out, rows, boot)
}

// ---------------------------------------------------------------- train

/// Overrides applied on top of a loaded config by command-line flags.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub gammas: Option<Vec<f64>>,
    pub threads: Option<usize>,
    pub clamp_predictions: bool,
    /// `[method.<name>]` tables from a `tune` run.
    pub params: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, mut config: ExperimentConfig) -> Result<ExperimentConfig, CliError> {
        if let Some(out) = &self.out {
            config.out = Some(out.clone());
        }
        if let Some(seeds) = &self.seeds {
            config.seeds = seeds.clone();
        }
        if let Some(g) = &self.gammas {
            config.sweep.gammas = g.clone();
        }
        if let Some(t) = self.threads {
            config.threads = t;
        }
        config.clamp_predictions |= self.clamp_predictions;
        if let Some(path) = &self.params {
            for (name, patch) in read_params(path)? {
                config
                    .methods_params
                    .insert(name.as_str().to_owned(), patch);
            }
        }
        config.validate()?;
        Ok(config)
    }
}

/// Reads `[method.<name>]` tables.
pub fn read_params(path: &Path) -> Result<BTreeMap<Method, HyperparamsPatch>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parse_err = |message: String| CliError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let doc: toml::Table = toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    let Some(toml::Value::Table(methods)) = doc.get("method") else {
        return Err(parse_err("expected [method.<name>] tables".into()));
    };
    methods
        .iter()
        .map(|(name, v)| {
            let m: Method = name.parse()?;
            let patch: HyperparamsPatch = v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
            Ok((m, patch))
        })
        .collect()
}

pub fn output_dir(config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    config
        .out
        .clone()
        .ok_or_else(|| CliError::config("out", "no output directory; pass --out"))
}

fn boot_settings(config: &ExperimentConfig) -> BootstrapSettings {
    BootstrapSettings {
        resamples: config.sweep.bootstrap_resamples,
        confidence: config.sweep.confidence,
    }
}

/// Fits every configured `(method, seed)` pair on the configured data.
pub fn cmd_train(config: &ExperimentConfig) -> Result<Vec<SummaryRow>, CliError> {
    let out = output_dir(config)?;
    let methods = config.method_list()?;
    let options = config.run_options()?;
    let data = config.load_data()?;
    if methods.contains(&Method::MfIpsGt) && data.ground_truth.is_none() {
        return Err(CliError::config(
            "methods",
            "mf_ips_gt needs simulated data with known propensities",
        ));
    }
    prepare_out(&out)?;
    let hash = config.hash();
    let cells: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let rows = with_pool(config.threads, || {
        cells
            .par_iter()
            .map(|&(method, seed)| {
                if let Some(row) = existing_cell(&out, None, method, seed, &hash) {
                    return Ok(row);
                }
                let hyper = config.hyperparams(method);
                let run = run_method(
                    method,
                    &data.splits,
                    data.ground_truth.as_ref(),
                    &hyper,
                    &options,
                    seed,
                )?;
                let row = ResultRow::from_run(&hash, None, &data.splits, &run);
                write_cell(&out, &row, &run)?;
                info!("{method} seed {seed}: test mse {:.4}", row.mse);
                Ok(row)
            })
            .collect::<Result<Vec<_>, CliError>>()
    })??;
    write_aggregate(&out, rows, boot_settings(config))
}

// ---------------------------------------------------------------- sweep

/// Simulates every `(gamma, seed)` pair and fits every method on it. The
/// rating matrix depends only on the seed, and logged data for one seed
/// shares its random draws across gammas.
pub fn cmd_sweep_gamma(config: &ExperimentConfig) -> Result<Vec<SummaryRow>, CliError> {
    let out = output_dir(config)?;
    let base = config
        .simulation
        .clone()
        .ok_or_else(|| CliError::config("simulation", "sweep-gamma needs a [simulation] table"))?;
    let gammas = &config.sweep.gammas;
    if gammas.is_empty() {
        return Err(CliError::config("sweep.gammas", "must not be empty"));
    }
    if let Some(g) = gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(CliError::config(
            "sweep.gammas",
            format!("{g} outside [0, 1]"),
        ));
    }
    let methods = config.method_list()?;
    let options = config.run_options()?;
    prepare_out(&out)?;
    let hash = config.hash();
    let datasets = with_pool(
        config.threads,
        || -> Result<BTreeMap<(usize, u64), SimulatedData>, CliError> {
            let truths: Vec<_> = config
                .seeds
                .par_iter()
                .map(|&seed| {
                    let spec = SimulationSpec {
                        seed,
                        ..base.clone()
                    };
                    build_truth(&spec).map(|t| (seed, spec, t))
                })
                .collect::<Result<_, _>>()?;
            let pairs: Vec<_> = truths
                .iter()
                .flat_map(|t| (0..gammas.len()).map(move |g| (g, t)))
                .collect();
            pairs
                .par_iter()
                .map(|&(gi, (seed, spec, (truth, items, capped)))| {
                    let spec = SimulationSpec {
                        gamma: gammas[gi],
                        ..spec.clone()
                    };
                    let sim = simulate_from_truth(&spec, truth.clone(), items.clone(), *capped)?;
                    Ok(((gi, *seed), sim))
                })
                .collect()
        },
    )??;
    let cells: Vec<(usize, u64, Method)> = datasets
        .keys()
        .flat_map(|&(gi, seed)| methods.iter().map(move |&m| (gi, seed, m)))
        .collect();
    let rows = with_pool(config.threads, || {
        cells
            .par_iter()
            .map(|&(gi, seed, method)| {
                let gamma = Some(gammas[gi]);
                if let Some(row) = existing_cell(&out, gamma, method, seed, &hash) {
                    return Ok(row);
                }
                let sim = &datasets[&(gi, seed)];
                let hyper = config.hyperparams(method);
                let run = run_method(
                    method,
                    &sim.splits,
                    Some(&sim.ground_truth),
                    &hyper,
                    &options,
                    seed,
                )?;
                let row = ResultRow::from_run(&hash, gamma, &sim.splits, &run);
                write_cell(&out, &row, &run)?;
                info!(
                    "gamma {} {method} seed {seed}: test mse {:.4}",
                    gammas[gi], row.mse
                );
                Ok(row)
            })
            .collect::<Result<Vec<_>, CliError>>()
    })??;
    write_aggregate(&out, rows, boot_settings(config))
}

// ---------------------------------------------------------------- tune

/// Every grid point that applies to `method`, in a fixed nested order.
pub fn grid_points(
    method: Method,
    grid: &GridSection,
    defaults: &Hyperparams,
) -> Result<Vec<Hyperparams>, CliError> {
    if !method.trains() {
        return Ok(vec![*defaults]);
    }
    let nonempty = |name: &str, len: usize| {
        if len == 0 {
            Err(CliError::config(format!("grid.{name}"), "empty grid"))
        } else {
            Ok(())
        }
    };
    nonempty("learning_rate", grid.learning_rate.len())?;
    nonempty("l2", grid.l2.len())?;
    nonempty("dim", grid.dim.len())?;
    let smoothing: Vec<(f64, f64)> = if method.uses_smoothing() {
        nonempty("alpha1", grid.alpha1.len())?;
        nonempty("alpha2", grid.alpha2.len())?;
        grid.alpha1
            .iter()
            .flat_map(|&a| grid.alpha2.iter().map(move |&b| (a, b)))
            .collect()
    } else {
        vec![(defaults.alpha1, defaults.alpha2)]
    };
    let taus: Vec<Option<f64>> = if method.is_ips() && !grid.tau.is_empty() {
        grid.tau.iter().map(|&t| Some(t)).collect()
    } else {
        vec![defaults.tau]
    };
    let mut points = Vec::new();
    for &learning_rate in &grid.learning_rate {
        for &l2 in &grid.l2 {
            for &dim in &grid.dim {
                for &(alpha1, alpha2) in &smoothing {
                    for &tau in &taus {
                        points.push(Hyperparams {
                            learning_rate,
                            l2,
                            dim,
                            alpha1,
                            alpha2,
                            tau,
                        });
                    }
                }
            }
        }
    }
    Ok(points)
}

/// Keeps at most `budget` points, chosen by a seeded shuffle and returned
/// in grid order.
pub fn apply_budget(
    points: Vec<Hyperparams>,
    budget: Option<usize>,
    seed: u64,
) -> Vec<Hyperparams> {
    match budget {
        Some(b) if b < points.len() => {
            let mut order: Vec<usize> = (0..points.len()).collect();
            order.shuffle(&mut rng_from_seed(seed));
            order.truncate(b);
            order.sort_unstable();
            order.into_iter().map(|k| points[k]).collect()
        }
        _ => points,
    }
}

/// Outcome of one grid point, averaged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct TunePoint {
    pub method: Method,
    pub index: usize,
    pub hyper: Hyperparams,
    /// Mean validation selection signal; `None` if any seed diverged.
    pub validation: Option<f64>,
}

fn is_divergence(e: &CliError) -> bool {
    matches!(e, CliError::Train(TrainError::Diverged { .. }))
}

/// Evaluates one point on every seed.
fn evaluate_point(
    method: Method,
    hyper: &Hyperparams,
    data: &super::config::ExperimentData,
    options: &super::run::RunOptions,
    seeds: &[u64],
) -> Result<Option<f64>, CliError> {
    let mut total = 0.0;
    for &seed in seeds {
        match run_method(
            method,
            &data.splits,
            data.ground_truth.as_ref(),
            hyper,
            options,
            seed,
        ) {
            Ok(run) if run.validation.is_finite() => total += run.validation,
            Ok(_) => return Ok(None),
            Err(e) if is_divergence(&e) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(total / seeds.len() as f64))
}

/// Lowest finite validation score; ties keep the earliest point.
pub fn select_best(points: &[TunePoint]) -> Option<&TunePoint> {
    points
        .iter()
        .filter_map(|p| p.validation.map(|v| (v, p)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.index.cmp(&b.1.index)))
        .map(|(_, p)| p)
}

const TUNE_STREAM: u64 = 30;

/// Grid search per method, selecting by validation SNIPS-MSE (plain
/// validation MSE for `avg` and `mf`). Writes every point to `tune.tsv`
/// and the winners to `best_params.toml`.
pub fn cmd_tune(
    config: &ExperimentConfig,
    budget: Option<usize>,
) -> Result<BTreeMap<Method, Hyperparams>, CliError> {
    let out = output_dir(config)?;
    let methods = config.method_list()?;
    let options = config.run_options()?;
    let data = config.load_data()?;
    let mut jobs = Vec::new();
    for &m in &methods {
        let base = config.hyperparams(m);
        let points = grid_points(m, &config.grid, &base)?;
        let points = apply_budget(
            points,
            budget,
            derive_seed(config.seeds[0], TUNE_STREAM + m as u64),
        );
        jobs.extend(points.into_iter().enumerate().map(|(k, h)| (m, k, h)));
    }
    let all = with_pool(config.threads, || {
        jobs.par_iter()
            .map(|&(method, index, hyper)| {
                let validation = evaluate_point(method, &hyper, &data, &options, &config.seeds)?;
                Ok(TunePoint {
                    method,
                    index,
                    hyper,
                    validation,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })??;
    create_dir(&out)?;
    let mut table =
        String::from("method\tpoint\tlearning_rate\tl2\tdim\talpha1\talpha2\ttau\tvalidation\n");
    for p in &all {
        let h = &p.hyper;
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            p.method,
            p.index,
            h.learning_rate,
            h.l2,
            h.dim,
            h.alpha1,
            h.alpha2,
            opt(&h.tau),
            p.validation
                .map_or_else(|| "diverged".to_owned(), |v| v.to_string())
        );
    }
    write_file(&out.join(TUNE_FILE), &table)?;
    let mut best = BTreeMap::new();
    let mut doc = format!("# selected by validation; config {}\n", config.hash());
    for &m in &methods {
        let points: Vec<TunePoint> = all.iter().filter(|p| p.method == m).cloned().collect();
        let Some(winner) = select_best(&points) else {
            return Err(CliError::config(
                format!("grid ({m})"),
                "every grid point diverged",
            ));
        };
        let diverged = points.iter().filter(|p| p.validation.is_none()).count();
        if diverged > 0 {
            warn!("{m}: skipped {diverged} diverged grid points");
        }
        let mut section = toml::Table::new();
        section.insert(
            m.as_str().to_owned(),
            toml::Value::try_from(HyperparamsPatch::from_hyperparams(&winner.hyper))
                .expect("params serialize"),
        );
        let mut wrapper = toml::Table::new();
        wrapper.insert("method".into(), toml::Value::Table(section));
        doc.push_str(&toml::to_string(&wrapper).expect("params serialize"));
        best.insert(m, winner.hyper);
    }
    write_file(&out.join(BEST_PARAMS_FILE), &doc)?;
    Ok(best)
}
