//! IPS-weighted MF training: loss, analytic gradient, masked Adam and the
//! concurrent and alternating training loops with early stopping.
//!
//! The minibatch objective is
//!
//! ```text
//! (1/|B|) sum_{(u,i,y) in B} (y_hat - y)^2 / p  +  l2 * sum_{theta touched by B} theta^2
//! ```
//!
//! where "touched" means the rows of users and items appearing in the batch
//! plus the global offset. With `B` the whole training set and every user
//! and item present this is exactly the full MF-IPS objective.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use log::debug;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data::{Rating, RatingDataset};
use crate::model::{MfParameters, ModelError, RatingPredictor};
use crate::propensity::{PropensityError, PropensityModel};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("propensity {value} for triple {index} is not in (0, 1]")]
    InvalidPropensity { index: usize, value: f64 },

    #[error("{triples} triples but {propensities} propensities")]
    LengthMismatch { triples: usize, propensities: usize },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid training configuration: {0}")]
    Config(String),

    #[error("cannot train on an empty training set")]
    EmptyTrain,

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Propensity(#[from] PropensityError),
}

/// How parameter groups are updated within an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Schedule {
    /// Every batch updates every parameter.
    Concurrent,
    /// One epoch updates only `{p_u, a_u, c}`, the next only `{q_i, b_i}`.
    Alternating,
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Concurrent => "concurrent",
            Schedule::Alternating => "alternating",
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Schedule {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concurrent" => Ok(Schedule::Concurrent),
            "alternating" => Ok(Schedule::Alternating),
            other => Err(TrainError::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub dim: usize,
    pub batch_size: usize,
    /// Upper bound on evaluations (one per epoch, or per epoch pair when
    /// alternating).
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            l2: 1e-5,
            dim: 16,
            batch_size: 1024,
            max_epochs: 500,
            patience: 10,
            schedule: Schedule::Alternating,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return bad("l2 must be non-negative");
        }
        if self.dim == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("dim, batch_size, max_epochs and patience must be positive");
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return bad("init_scale must be non-negative");
        }
        Ok(())
    }
}

/// Selects parameter groups: the user group is `{p_u, a_u, c}`, the item
/// group `{q_i, b_i}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMask {
    pub user: bool,
    pub item: bool,
}

impl ParamMask {
    pub const ALL: ParamMask = ParamMask {
        user: true,
        item: true,
    };
    pub const USER: ParamMask = ParamMask {
        user: true,
        item: false,
    };
    pub const ITEM: ParamMask = ParamMask {
        user: false,
        item: true,
    };
}

/// Adam moments shaped like the parameters, with a bias-correction step
/// counter per parameter group.
#[derive(Debug, Clone)]
pub struct AdamState {
    first: MfParameters,
    second: MfParameters,
    user_steps: u64,
    item_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(shape: &MfParameters) -> Self {
        AdamState {
            first: MfParameters::zeros(shape.num_users(), shape.num_items(), shape.dim()),
            second: MfParameters::zeros(shape.num_users(), shape.num_items(), shape.dim()),
            user_steps: 0,
            item_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// `(user group steps, item group steps)`.
    pub fn steps(&self) -> (u64, u64) {
        (self.user_steps, self.item_steps)
    }

    pub fn first_moment(&self) -> &MfParameters {
        &self.first
    }

    pub fn second_moment(&self) -> &MfParameters {
        &self.second
    }
}

fn adam_slice(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    (b1, b2, eps): (f64, f64, f64),
    step: u64,
) {
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One Adam update of the groups selected by `mask`. Unselected parameters
/// and their moments are left bit-identical.
pub fn adam_step(
    params: &mut MfParameters,
    grads: &MfParameters,
    state: &mut AdamState,
    mask: ParamMask,
    lr: f64,
) {
    debug_assert!(params.same_shape(grads) && params.same_shape(&state.first));
    let consts = (state.beta1, state.beta2, state.epsilon);
    let AdamState {
        first: m,
        second: v,
        ..
    } = state;
    if mask.user {
        state.user_steps += 1;
        let t = state.user_steps;
        adam_slice(
            &mut params.user_embeddings,
            &grads.user_embeddings,
            &mut m.user_embeddings,
            &mut v.user_embeddings,
            lr,
            consts,
            t,
        );
        adam_slice(
            &mut params.user_offsets,
            &grads.user_offsets,
            &mut m.user_offsets,
            &mut v.user_offsets,
            lr,
            consts,
            t,
        );
        adam_slice(
            std::slice::from_mut(&mut params.global_offset),
            std::slice::from_ref(&grads.global_offset),
            std::slice::from_mut(&mut m.global_offset),
            std::slice::from_mut(&mut v.global_offset),
            lr,
            consts,
            t,
        );
    }
    if mask.item {
        state.item_steps += 1;
        let t = state.item_steps;
        adam_slice(
            &mut params.item_embeddings,
            &grads.item_embeddings,
            &mut m.item_embeddings,
            &mut v.item_embeddings,
            lr,
            consts,
            t,
        );
        adam_slice(
            &mut params.item_offsets,
            &grads.item_offsets,
            &mut m.item_offsets,
            &mut v.item_offsets,
            lr,
            consts,
            t,
        );
    }
}

fn check_propensities(batch: &[Rating], propensities: &[f64]) -> Result<(), TrainError> {
    if batch.len() != propensities.len() {
        return Err(TrainError::LengthMismatch {
            triples: batch.len(),
            propensities: propensities.len(),
        });
    }
    for (index, &p) in propensities.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            return Err(TrainError::InvalidPropensity { index, value: p });
        }
    }
    Ok(())
}

#[inline]
fn squared_error<P: RatingPredictor + ?Sized>(model: &P, t: &Rating) -> f64 {
    let r = model.predict_rating(t.user, t.item) - t.value as f64;
    r * r
}

/// `sum (y_hat - y)^2 / p` over `batch`, divided by `normalizer`.
///
/// With `normalizer = |U||I|` this is the IPS estimate of the full-matrix
/// MSE; with `normalizer = |batch|` it is the data term of [`ips_loss`].
pub fn ips_estimate<P: RatingPredictor + ?Sized>(
    model: &P,
    batch: &[Rating],
    propensities: &[f64],
    normalizer: f64,
) -> f64 {
    batch
        .iter()
        .zip(propensities)
        .map(|(t, &p)| squared_error(model, t) / p)
        .sum::<f64>()
        / normalizer
}

/// Plain mean squared error over observed triples (the naive estimate).
pub fn naive_estimate<P: RatingPredictor + ?Sized>(model: &P, batch: &[Rating]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch.iter().map(|t| squared_error(model, t)).sum::<f64>() / batch.len() as f64
}

fn touched(batch: &[Rating]) -> (Vec<usize>, Vec<usize>) {
    let mut users: Vec<usize> = batch
        .iter()
        .map(|t| t.user)
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    let mut items: Vec<usize> = batch
        .iter()
        .map(|t| t.item)
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    users.sort_unstable();
    items.sort_unstable();
    (users, items)
}

fn touched_norm(params: &MfParameters, batch: &[Rating]) -> f64 {
    let (users, items) = touched(batch);
    let mut s = params.global_offset * params.global_offset;
    for u in users {
        s += params.user_row(u).iter().map(|v| v * v).sum::<f64>() + params.user_offsets[u].powi(2);
    }
    for i in items {
        s += params.item_row(i).iter().map(|v| v * v).sum::<f64>() + params.item_offsets[i].powi(2);
    }
    s
}

/// Minibatch MF-IPS loss (see module docs). An empty batch has loss 0.
pub fn ips_loss(
    params: &MfParameters,
    batch: &[Rating],
    propensities: &[f64],
    l2: f64,
) -> Result<f64, TrainError> {
    check_propensities(batch, propensities)?;
    if batch.is_empty() {
        return Ok(0.0);
    }
    let data = ips_estimate(params, batch, propensities, batch.len() as f64);
    Ok(data + l2 * touched_norm(params, batch))
}

/// Writes the analytic gradient of [`ips_loss`] into `grad`, restricted to
/// the groups in `mask`. Rows not touched by the batch are zero.
pub fn ips_gradient_into(
    params: &MfParameters,
    batch: &[Rating],
    propensities: &[f64],
    l2: f64,
    mask: ParamMask,
    grad: &mut MfParameters,
) {
    grad.fill_zero();
    if batch.is_empty() {
        return;
    }
    let dim = params.dim();
    let scale = 2.0 / batch.len() as f64;
    for (t, &p) in batch.iter().zip(propensities) {
        let (u, i) = (t.user, t.item);
        let w = scale * (params.predict_unchecked(u, i) - t.value as f64) / p;
        if mask.user {
            let q = params.item_row(i);
            let g = &mut grad.user_embeddings[u * dim..(u + 1) * dim];
            for (g, q) in g.iter_mut().zip(q) {
                *g += w * q;
            }
            grad.user_offsets[u] += w;
            grad.global_offset += w;
        }
        if mask.item {
            let pu = params.user_row(u);
            let g = &mut grad.item_embeddings[i * dim..(i + 1) * dim];
            for (g, pu) in g.iter_mut().zip(pu) {
                *g += w * pu;
            }
            grad.item_offsets[i] += w;
        }
    }
    if l2 > 0.0 {
        let (users, items) = touched(batch);
        let r = 2.0 * l2;
        if mask.user {
            for u in users {
                for k in u * dim..(u + 1) * dim {
                    grad.user_embeddings[k] += r * params.user_embeddings[k];
                }
                grad.user_offsets[u] += r * params.user_offsets[u];
            }
            grad.global_offset += r * params.global_offset;
        }
        if mask.item {
            for i in items {
                for k in i * dim..(i + 1) * dim {
                    grad.item_embeddings[k] += r * params.item_embeddings[k];
                }
                grad.item_offsets[i] += r * params.item_offsets[i];
            }
        }
    }
}

/// Gradient of [`ips_loss`] with respect to every parameter.
pub fn ips_gradient(
    params: &MfParameters,
    batch: &[Rating],
    propensities: &[f64],
    l2: f64,
) -> Result<MfParameters, TrainError> {
    check_propensities(batch, propensities)?;
    let mut grad = MfParameters::zeros(params.num_users(), params.num_items(), params.dim());
    ips_gradient_into(params, batch, propensities, l2, ParamMask::ALL, &mut grad);
    Ok(grad)
}

/// Self-normalized IPS MSE: `sum(delta/p) / sum(1/p)`. Returns 0 for an
/// empty set.
pub fn snips_mse<P: RatingPredictor + ?Sized>(
    model: &P,
    triples: &[Rating],
    propensities: &[f64],
) -> f64 {
    let (num, den) = triples
        .iter()
        .zip(propensities)
        .fold((0.0, 0.0), |(n, d), (t, &p)| {
            (n + squared_error(model, t) / p, d + 1.0 / p)
        });
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Validation signal for early stopping: SNIPS-weighted MSE under the
/// propensity model.
pub fn evaluate_validation<P: RatingPredictor + ?Sized>(
    model: &P,
    validation: &RatingDataset,
    propensities: &PropensityModel,
) -> Result<f64, TrainError> {
    let props = propensities.score_all(validation.triples())?;
    check_propensities(validation.triples(), &props)?;
    Ok(snips_mse(model, validation.triples(), &props))
}

/// One row of training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// IPS data term over the full training set, `(1/|D|) sum delta/p`.
    pub train_ips_loss: f64,
    pub validation_snips_mse: f64,
    pub test_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation evaluation.
    pub params: MfParameters,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation: f64,
    pub stopped_early: bool,
}

/// Which parameter group an alternating phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Concurrent epoch: all groups.
    All,
    User,
    Item,
}

/// Hook into the training loop; called around every pass over the data.
pub trait TrainObserver {
    fn phase_start(&mut self, _epoch: usize, _phase: Phase, _params: &MfParameters) {}
    fn phase_end(&mut self, _epoch: usize, _phase: Phase, _params: &MfParameters) {}
}

/// Observer that does nothing.
pub struct NoObserver;
impl TrainObserver for NoObserver {}

/// Datasets a training run sees. `test` only feeds the history file.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a RatingDataset,
    pub validation: &'a RatingDataset,
    pub test: Option<&'a RatingDataset>,
}

const SHUFFLE_STREAM: u64 = 1;

/// Trains MF-IPS with the schedule in `config`.
pub fn train(
    data: TrainData<'_>,
    propensities: &PropensityModel,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let train = data.train;
    if train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let train_props = propensities.score_all(train.triples())?;
    check_propensities(train.triples(), &train_props)?;
    let val_props = propensities.score_all(data.validation.triples())?;
    check_propensities(data.validation.triples(), &val_props)?;

    // self-normalized weighted mean; the plain mean under uniform propensities
    let (num, den) = train
        .iter()
        .zip(&train_props)
        .fold((0.0, 0.0), |(n, d), (t, &p)| {
            (n + t.value as f64 / p, d + 1.0 / p)
        });
    let global = num / den;
    let mut params = MfParameters::init(
        train.num_users(),
        train.num_items(),
        config.dim,
        config.seed,
        config.init_scale,
        global,
    )?;
    let mut adam = AdamState::new(&params);
    let mut grad = MfParameters::zeros(params.num_users(), params.num_items(), params.dim());
    let mut rng = rng_from_seed(derive_seed(config.seed, SHUFFLE_STREAM));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch: Vec<Rating> = Vec::with_capacity(config.batch_size);
    let mut batch_props: Vec<f64> = Vec::with_capacity(config.batch_size);

    let mut run_pass = |params: &mut MfParameters, mask: ParamMask, rng: &mut crate::rng::Rng| {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch_props.clear();
            for &k in chunk {
                batch.push(train.triples()[k]);
                batch_props.push(train_props[k]);
            }
            ips_gradient_into(params, &batch, &batch_props, config.l2, mask, &mut grad);
            adam_step(params, &grad, &mut adam, mask, config.learning_rate);
        }
    };

    let phases: &[(Phase, ParamMask)] = match config.schedule {
        Schedule::Concurrent => &[(Phase::All, ParamMask::ALL)],
        Schedule::Alternating => &[
            (Phase::User, ParamMask::USER),
            (Phase::Item, ParamMask::ITEM),
        ],
    };

    let mut history = Vec::new();
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut since_best = 0;
    let mut stopped_early = false;
    let n_train = train.len() as f64;

    for epoch in 1..=config.max_epochs {
        for &(phase, mask) in phases {
            observer.phase_start(epoch, phase, &params);
            run_pass(&mut params, mask, &mut rng);
            observer.phase_end(epoch, phase, &params);
        }

        let train_loss = ips_estimate(&params, train.triples(), &train_props, n_train);
        if !train_loss.is_finite() || !params.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                loss: train_loss,
            });
        }
        let val = if data.validation.is_empty() {
            train_loss
        } else {
            snips_mse(&params, data.validation.triples(), &val_props)
        };
        let test_mse = data.test.map(|t| naive_estimate(&params, t.triples()));
        history.push(EpochRecord {
            epoch,
            train_ips_loss: train_loss,
            validation_snips_mse: val,
            test_mse,
        });

        if val < best.0 {
            best = (val, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                debug!("early stop at epoch {epoch}, best {} at {}", best.0, best.2);
                break;
            }
        }
    }

    let (best_validation, params, best_epoch) = best;
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        best_validation,
        stopped_early,
    })
}

/// All parameter groups updated on every batch.
pub fn train_concurrent(
    data: TrainData<'_>,
    propensities: &PropensityModel,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let config = TrainConfig {
        schedule: Schedule::Concurrent,
        ..config.clone()
    };
    train(data, propensities, &config, &mut NoObserver)
}

/// Epoch-wise alternation between the user group `{p_u, a_u, c}` and the
/// item group `{q_i, b_i}`.
pub fn train_alternating(
    data: TrainData<'_>,
    propensities: &PropensityModel,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let config = TrainConfig {
        schedule: Schedule::Alternating,
        ..config.clone()
    };
    train(data, propensities, &config, &mut NoObserver)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RatingScale;
    use crate::propensity::PropensityModel;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_instance(
        nu: usize,
        ni: usize,
        dim: usize,
        seed: u64,
    ) -> (MfParameters, Vec<Rating>, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let mut p = MfParameters::init(nu, ni, dim, seed, 0.5, 3.0).unwrap();
        for v in p.user_offsets.iter_mut().chain(p.item_offsets.iter_mut()) {
            *v = rng.random_range(-0.5..0.5);
        }
        let mut triples = Vec::new();
        let mut props = Vec::new();
        for u in 0..nu {
            for i in 0..ni {
                if rng.random_bool(0.6) {
                    triples.push(Rating::new(u, i, rng.random_range(1..=5)));
                    props.push(rng.random_range(0.05..1.0));
                }
            }
        }
        (p, triples, props)
    }

    fn dataset(nu: usize, ni: usize, triples: Vec<Rating>) -> RatingDataset {
        RatingDataset::new(nu, ni, RatingScale::default(), triples).unwrap()
    }

    #[test]
    fn loss_hand_cases() {
        let mut p = MfParameters::zeros(1, 2, 1);
        p.global_offset = 3.0;
        let perfect = [Rating::new(0, 0, 3), Rating::new(0, 1, 3)];
        assert_eq!(ips_loss(&p, &perfect, &[0.3, 0.2], 0.0).unwrap(), 0.0);

        let batch = [Rating::new(0, 0, 1), Rating::new(0, 1, 4)];
        let mse = ((3.0f64 - 1.0).powi(2) + 1.0) / 2.0;
        assert!((ips_loss(&p, &batch, &[1.0, 1.0], 0.0).unwrap() - mse).abs() < 1e-12);

        // y_hat - y = 2 at p = 0.5
        assert!((ips_loss(&p, &batch[..1], &[0.5], 0.0).unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn zero_propensity_rejected() {
        let p = MfParameters::zeros(1, 1, 1);
        let batch = [Rating::new(0, 0, 1)];
        assert!(matches!(
            ips_loss(&p, &batch, &[0.0], 0.0),
            Err(TrainError::InvalidPropensity { .. })
        ));
        assert!(ips_loss(&p, &batch, &[1.5], 0.0).is_err());
        assert!(matches!(
            ips_loss(&p, &batch, &[], 0.0),
            Err(TrainError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn propensity_scaling_scales_loss() {
        let (p, triples, props) = random_instance(4, 5, 3, 2);
        let base = ips_loss(&p, &triples, &props, 0.0).unwrap();
        let k = 0.5;
        let scaled: Vec<f64> = props.iter().map(|p| p * k).collect();
        let got = ips_loss(&p, &triples, &scaled, 0.0).unwrap();
        assert!((got - base / k).abs() < 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn zero_residual_gradient() {
        let mut p = MfParameters::init(3, 3, 2, 5, 0.4, 0.0).unwrap();
        p.global_offset = 0.0;
        let batch: Vec<Rating> = (0..3)
            .flat_map(|u| (0..3).map(move |i| (u, i)))
            .map(|(u, i)| Rating::new(u, i, 1))
            .collect();
        // make every residual exactly zero
        let mut q = p.clone();
        q.global_offset = 1.0;
        q.user_embeddings.iter_mut().for_each(|v| *v = 0.0);
        let props = vec![0.5; batch.len()];
        let g = ips_gradient(&q, &batch, &props, 0.0).unwrap();
        assert!(g.values().all(|v| v == 0.0));

        // regularizer only: gradient is 2 * l2 * theta on touched rows
        let l2 = 0.01;
        let g = ips_gradient(&q, &batch, &props, l2).unwrap();
        for (gv, pv) in g.values().zip(q.values()) {
            assert!((gv - 2.0 * l2 * pv).abs() < 1e-15);
        }
    }

    #[test]
    fn untouched_rows_have_zero_gradient() {
        let (p, _, _) = random_instance(4, 4, 2, 3);
        let batch = [Rating::new(1, 2, 5)];
        let g = ips_gradient(&p, &batch, &[0.3], 0.1).unwrap();
        for u in [0, 2, 3] {
            assert!(g.user_row(u).iter().all(|&v| v == 0.0));
            assert_eq!(g.user_offsets[u], 0.0);
        }
        for i in [0, 1, 3] {
            assert!(g.item_row(i).iter().all(|&v| v == 0.0));
        }
        assert!(g.user_row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (p, triples, props) = random_instance(5, 5, 3, 17);
        let l2 = 0.03;
        let g = ips_gradient(&p, &triples, &props, l2).unwrap();
        let h = 1e-5;
        for k in 0..p.len() {
            let mut plus = p.clone();
            *plus.value_mut(k) += h;
            let mut minus = p.clone();
            *minus.value_mut(k) -= h;
            let fd = (ips_loss(&plus, &triples, &props, l2).unwrap()
                - ips_loss(&minus, &triples, &props, l2).unwrap())
                / (2.0 * h);
            let an = g.values().nth(k).unwrap();
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-7);
            assert!(rel < 1e-4, "coordinate {k}: analytic {an} fd {fd}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let (mut p, _, _) = random_instance(3, 3, 2, 1);
        let before = p.clone();
        let g = MfParameters::zeros(3, 3, 2);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, ParamMask::ALL, 0.01);
        assert_eq!(p, before);
        assert_eq!(s.steps(), (1, 1));
    }

    #[test]
    fn adam_constant_gradient_limit() {
        // With a constant gradient g the bias-corrected ratio m_hat/sqrt(v_hat)
        // is exactly sign(g) at every step, so each update is lr * |g|/(|g|+eps').
        let mut p = MfParameters::zeros(1, 1, 1);
        let mut g = MfParameters::zeros(1, 1, 1);
        g.global_offset = 0.3;
        g.item_offsets[0] = -2.0;
        let mut s = AdamState::new(&p);
        let lr = 0.01;
        let mut last = (p.global_offset, p.item_offsets[0]);
        for _ in 0..200 {
            adam_step(&mut p, &g, &mut s, ParamMask::ALL, lr);
            let du = p.global_offset - last.0;
            let di = p.item_offsets[0] - last.1;
            assert!((du + lr).abs() < 1e-9, "step {du}");
            assert!((di - lr).abs() < 1e-9, "step {di}");
            last = (p.global_offset, p.item_offsets[0]);
        }
        assert!((p.global_offset + 2.0).abs() < 1e-6);
    }

    #[test]
    fn adam_mask_leaves_other_group_untouched() {
        let (mut p, triples, props) = random_instance(4, 4, 3, 9);
        let g = ips_gradient(&p, &triples, &props, 0.01).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, ParamMask::ITEM, 0.05);
        assert_eq!(p.user_embeddings, before.user_embeddings);
        assert_eq!(p.user_offsets, before.user_offsets);
        assert_eq!(p.global_offset.to_bits(), before.global_offset.to_bits());
        assert_ne!(p.item_embeddings, before.item_embeddings);
        assert_eq!(s.steps(), (0, 1));
        assert!(s.first_moment().user_embeddings.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn phase_masks_partition_parameters() {
        // Every scalar gets a gradient under exactly one of the two phase masks.
        let (p, triples, props) = random_instance(3, 3, 2, 12);
        let mut gu = MfParameters::zeros(3, 3, 2);
        let mut gi = MfParameters::zeros(3, 3, 2);
        let mut ga = MfParameters::zeros(3, 3, 2);
        ips_gradient_into(&p, &triples, &props, 0.01, ParamMask::USER, &mut gu);
        ips_gradient_into(&p, &triples, &props, 0.01, ParamMask::ITEM, &mut gi);
        ips_gradient_into(&p, &triples, &props, 0.01, ParamMask::ALL, &mut ga);
        for ((u, i), a) in gu.values().zip(gi.values()).zip(ga.values()) {
            assert!(u == 0.0 || i == 0.0);
            assert_eq!(u + i, a);
        }
        assert_ne!(gu.global_offset, 0.0);
        assert_eq!(gi.global_offset, 0.0);
    }

    #[test]
    fn snips_hand_cases() {
        let mut p = MfParameters::zeros(1, 2, 1);
        p.global_offset = 3.0;
        let triples = [Rating::new(0, 0, 2), Rating::new(0, 1, 1)];
        // deltas (1, 4), propensities (0.5, 1.0)
        assert!((snips_mse(&p, &triples, &[0.5, 1.0]) - 2.0).abs() < 1e-12);
        assert!((snips_mse(&p, &triples, &[0.2, 0.2]) - 2.5).abs() < 1e-12);
        let perfect = [Rating::new(0, 0, 3)];
        assert_eq!(snips_mse(&p, &perfect, &[0.1]), 0.0);
    }

    #[test]
    fn concurrent_overfits_separable_fixture() {
        // rank-1 5x5 matrix; fully observed
        let u = [1.0, 0.5, -0.5, -1.0, 0.0];
        let v = [1.0, -1.0, 0.5, 0.0, -0.5];
        let mut triples = Vec::new();
        for (a, &uu) in u.iter().enumerate() {
            for (b, &vv) in v.iter().enumerate() {
                let y = (3.0f64 + 1.5 * uu * vv + 0.5 * uu).round().clamp(1.0, 5.0) as u8;
                triples.push(Rating::new(a, b, y));
            }
        }
        let train = dataset(5, 5, triples);
        let uniform = PropensityModel::uniform(&train);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            l2: 0.0,
            dim: 4,
            batch_size: 5,
            max_epochs: 200,
            patience: 200,
            schedule: Schedule::Concurrent,
            seed: 3,
            init_scale: 0.1,
        };
        let out = train_concurrent(
            TrainData {
                train: &train,
                validation: &train,
                test: None,
            },
            &uniform,
            &cfg,
        )
        .unwrap();
        let mse = naive_estimate(&out.params, train.triples());
        assert!(mse < 0.05, "train mse {mse}");

        let again = train_concurrent(
            TrainData {
                train: &train,
                validation: &train,
                test: None,
            },
            &uniform,
            &cfg,
        )
        .unwrap();
        assert_eq!(out.history, again.history);
    }

    #[test]
    fn best_checkpoint_is_returned() {
        let (_, triples, _) = random_instance(8, 8, 2, 4);
        let n = triples.len();
        let train = dataset(8, 8, triples[..n * 3 / 4].to_vec());
        let val = dataset(8, 8, triples[n * 3 / 4..].to_vec());
        let uniform = PropensityModel::uniform(&train);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            l2: 0.0,
            dim: 8,
            batch_size: 4,
            max_epochs: 60,
            patience: 5,
            schedule: Schedule::Alternating,
            seed: 1,
            init_scale: 0.3,
        };
        let out = super::train(
            TrainData {
                train: &train,
                validation: &val,
                test: None,
            },
            &uniform,
            &cfg,
            &mut NoObserver,
        )
        .unwrap();
        let best = out
            .history
            .iter()
            .min_by(|a, b| a.validation_snips_mse.total_cmp(&b.validation_snips_mse))
            .unwrap();
        assert_eq!(best.epoch, out.best_epoch);
        let v = snips_mse(&out.params, val.triples(), &vec![1.0; val.len()]);
        assert!((v - out.best_validation).abs() < 1e-12);
        assert!(out.history.len() <= out.best_epoch + cfg.patience);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let (_, triples, _) = random_instance(4, 4, 2, 8);
        let train = dataset(4, 4, triples);
        let uniform = PropensityModel::uniform(&train);
        let cfg = TrainConfig {
            learning_rate: 1e300,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let err = train_concurrent(
            TrainData {
                train: &train,
                validation: &train,
                test: None,
            },
            &uniform,
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(
            "alternating".parse::<Schedule>().unwrap(),
            Schedule::Alternating
        );
        assert!("sometimes".parse::<Schedule>().is_err());
    }

    proptest! {
        #[test]
        fn loss_inverse_in_propensity_scale(seed in any::<u64>(), k in 0.05f64..1.0) {
            let (p, triples, props) = random_instance(3, 4, 2, seed);
            prop_assume!(!triples.is_empty());
            let base = ips_loss(&p, &triples, &props, 0.0).unwrap();
            let scaled: Vec<f64> = props.iter().map(|v| v * k).collect();
            let got = ips_loss(&p, &triples, &scaled, 0.0).unwrap();
            prop_assert!((got * k - base).abs() <= 1e-9 * base.max(1.0));
        }
    }
}
