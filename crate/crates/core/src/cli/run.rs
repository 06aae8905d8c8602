//! Fitting and evaluating one method on one set of splits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SplitBundle;
use crate::metrics::{evaluate, MetricReport};
use crate::model::{AvgModel, Clamped, RatingPredictor};
use crate::optim::{self, naive_estimate, NoObserver, TrainConfig, TrainData, TrainOutcome};
use crate::propensity::{
    default_clip_floor, estimate_mf_propensity, estimate_multifactorial, estimate_popularity,
    estimate_positivity, MfPropensityConfig, PropensityModel, SmoothingConfig, ZeroCountPolicy,
};

use super::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Avg,
    Mf,
    MfIpsPop,
    MfIpsPos,
    MfIpsMul,
    MfIpsMf,
    MfIpsGt,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Avg,
        Method::Mf,
        Method::MfIpsPop,
        Method::MfIpsPos,
        Method::MfIpsMul,
        Method::MfIpsMf,
        Method::MfIpsGt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Avg => "avg",
            Method::Mf => "mf",
            Method::MfIpsPop => "mf_ips_pop",
            Method::MfIpsPos => "mf_ips_pos",
            Method::MfIpsMul => "mf_ips_mul",
            Method::MfIpsMf => "mf_ips_mf",
            Method::MfIpsGt => "mf_ips_gt",
        }
    }

    /// Methods whose estimator needs the MCAR sample.
    pub fn needs_mcar(self) -> bool {
        matches!(self, Method::MfIpsPos | Method::MfIpsMul)
    }

    pub fn needs_ground_truth(self) -> bool {
        self == Method::MfIpsGt
    }

    pub fn is_ips(self) -> bool {
        !matches!(self, Method::Avg | Method::Mf)
    }

    pub fn uses_smoothing(self) -> bool {
        self == Method::MfIpsMul
    }

    pub fn trains(self) -> bool {
        self != Method::Avg
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| CliError::config("methods", format!("unknown method {s:?}")))
    }
}

/// The tuned quantities of a method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub l2: f64,
    pub dim: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Clip floor; `None` means 5% of the observation rate.
    pub tau: Option<f64>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        let smoothing = SmoothingConfig::default();
        Hyperparams {
            learning_rate: 1e-3,
            l2: 1e-5,
            dim: 16,
            alpha1: smoothing.alpha1,
            alpha2: smoothing.alpha2,
            tau: None,
        }
    }
}

/// Settings shared by every method of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Template for batch size, epochs, patience, schedule and init scale.
    pub train: TrainConfig,
    pub normalize: bool,
    pub clip: bool,
    pub zero_count: ZeroCountPolicy,
    pub mf_propensity: MfPropensityConfig,
    pub clamp_predictions: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            train: TrainConfig::default(),
            normalize: true,
            clip: true,
            zero_count: ZeroCountPolicy::Fallback,
            mf_propensity: MfPropensityConfig::default(),
            clamp_predictions: false,
        }
    }
}

/// Post-processed propensities and the numbers that produced them.
#[derive(Debug, Clone)]
pub struct FittedPropensities {
    pub model: PropensityModel,
    pub normalizer: Option<f64>,
    pub tau: Option<f64>,
}

/// Estimates, normalizes and clips the propensities `method` trains with.
/// `Avg` and `Mf` get the uniform model.
pub fn fit_propensities(
    method: Method,
    splits: &SplitBundle,
    ground_truth: Option<&PropensityModel>,
    hyper: &Hyperparams,
    options: &RunOptions,
    seed: u64,
) -> Result<FittedPropensities, CliError> {
    let train = &splits.train;
    if method.needs_mcar() && splits.mcar.is_empty() {
        return Err(CliError::config(
            "data.mcar",
            format!("{method} needs an MCAR sample"),
        ));
    }
    let raw = match method {
        Method::Avg | Method::Mf => {
            return Ok(FittedPropensities {
                model: PropensityModel::uniform(train),
                normalizer: None,
                tau: None,
            })
        }
        Method::MfIpsPop => estimate_popularity(train)?,
        Method::MfIpsPos => estimate_positivity(train, &splits.mcar, options.zero_count)?,
        Method::MfIpsMul => {
            let smoothing = SmoothingConfig::new(hyper.alpha1, hyper.alpha2)?;
            estimate_multifactorial(train, &splits.mcar, smoothing, options.zero_count)?
        }
        Method::MfIpsMf => {
            let cfg = MfPropensityConfig {
                seed,
                ..options.mf_propensity.clone()
            };
            estimate_mf_propensity(train, &cfg)?.0
        }
        Method::MfIpsGt => ground_truth.cloned().ok_or_else(|| {
            CliError::config(
                "methods",
                "mf_ips_gt needs simulated data with known propensities",
            )
        })?,
    };
    let (model, normalizer) = if options.normalize {
        let (m, k) = raw.normalize(train)?;
        (m, Some(k))
    } else {
        (raw, None)
    };
    let (model, tau) = if options.clip {
        let tau = match hyper.tau {
            Some(t) => t,
            None => default_clip_floor(train),
        };
        (model.clip(tau)?, Some(tau))
    } else {
        (model, None)
    };
    Ok(FittedPropensities {
        model,
        normalizer,
        tau,
    })
}

/// Result of one `(method, seed)` fit.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub seed: u64,
    pub hyper: Hyperparams,
    pub report: MetricReport,
    /// Selection signal: validation SNIPS-MSE for IPS methods, plain
    /// validation MSE otherwise.
    pub validation: f64,
    pub propensities: FittedPropensities,
    pub outcome: Option<TrainOutcome>,
}

fn report<P: RatingPredictor>(
    model: &P,
    splits: &SplitBundle,
    clamp: bool,
) -> Result<MetricReport, CliError> {
    let scale = splits.train.scale();
    Ok(if clamp {
        evaluate(&Clamped::new(model, scale), &splits.test)?
    } else {
        evaluate(model, &splits.test)?
    })
}

fn validation_mse<P: RatingPredictor>(model: &P, splits: &SplitBundle, clamp: bool) -> f64 {
    let val = splits.validation.triples();
    if clamp {
        naive_estimate(&Clamped::new(model, splits.train.scale()), val)
    } else {
        naive_estimate(model, val)
    }
}

/// Fits `method` on `splits` and evaluates it on the test set.
pub fn run_method(
    method: Method,
    splits: &SplitBundle,
    ground_truth: Option<&PropensityModel>,
    hyper: &Hyperparams,
    options: &RunOptions,
    seed: u64,
) -> Result<MethodRun, CliError> {
    let propensities = fit_propensities(method, splits, ground_truth, hyper, options, seed)?;
    let clamp = options.clamp_predictions;
    if method == Method::Avg {
        let model = AvgModel::fit(&splits.train)?;
        return Ok(MethodRun {
            method,
            seed,
            hyper: *hyper,
            report: report(&model, splits, clamp)?,
            validation: validation_mse(&model, splits, clamp),
            propensities,
            outcome: None,
        });
    }
    let config = TrainConfig {
        learning_rate: hyper.learning_rate,
        l2: hyper.l2,
        dim: hyper.dim,
        seed,
        ..options.train.clone()
    };
    let data = TrainData {
        train: &splits.train,
        validation: &splits.validation,
        test: Some(&splits.test),
    };
    let outcome = optim::train(data, &propensities.model, &config, &mut NoObserver)?;
    let validation = if method.is_ips() {
        outcome.best_validation
    } else {
        validation_mse(&outcome.params, splits, clamp)
    };
    Ok(MethodRun {
        method,
        seed,
        hyper: *hyper,
        report: report(&outcome.params, splits, clamp)?,
        validation,
        propensities,
        outcome: Some(outcome),
    })
}
