//! Supervised training on windowed traces: MSE loss, Adam/SGD, a seeded
//! mini-batch epoch loop and the architecture grid search.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rayon::prelude::*;

use crate::architecture::{
    build_model, count_params, receptive_field, validate_config, Gradients, Model, ModelConfig,
    GRID_BLOCKS, GRID_FILTERS, GRID_KERNEL_SIZES,
};
use crate::data::NormalizedTrace;
use crate::error::{QoeError, Result, Violation};
use crate::numerics::Series;
use crate::rng::{derive_indexed, derive_seed, rng_for, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = QoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(QoeError::Parameter(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Stop after this many epochs without validation improvement.
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QoeError::Parameter(m));
        // lr = 0 is accepted so a run can be used as a no-op baseline.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be >= 0", self.learning_rate));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be >= 1".into());
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("adam {name} {b} must lie in (0, 1)"));
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("adam epsilon must be > 0".into());
        }
        Ok(())
    }
}

/// Features for seconds `t-W+1 ..= t` and the normalized QoE at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub window: Series,
    pub target: f64,
}

/// One sample per second. Windows that would start before the session
/// are left-padded with zeros.
pub fn make_windows(trace: &NormalizedTrace, window: usize) -> Result<Vec<WindowSample>> {
    if window < 1 {
        return Err(QoeError::Parameter("window length must be >= 1".into()));
    }
    let x = &trace.features;
    let len = trace.targets.len();
    if len == 0 {
        return Err(QoeError::Data("cannot window an empty trace".into()));
    }
    if x.len() != len {
        return Err(QoeError::Shape("features and targets differ in length".into()));
    }
    let channels = x.channels();
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        let mut w = Series::zeros(channels, window);
        let first = (t + 1).saturating_sub(window);
        let pad = window - (t + 1 - first);
        for c in 0..channels {
            w.channel_mut(c)[pad..].copy_from_slice(&x.channel(c)[first..=t]);
        }
        out.push(WindowSample {
            window: w,
            target: trace.targets[t],
        });
    }
    Ok(out)
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(QoeError::Shape(format!(
            "mse_loss needs equal non-empty lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok((loss, grad))
}

/// Moment estimates for Adam (unused by SGD).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &Model) -> Self {
        let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
        Self::new(&shapes)
    }
}

/// Applies one update to `params` in place. `names` labels each tensor
/// for error messages.
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    names: &[String],
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(QoeError::Shape(format!(
            "{} parameter tensors, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).map_or("?", String::as_str);
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(QoeError::Shape(format!("tensor `{name}` shape mismatch")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(QoeError::Training {
                message: format!("non-finite gradient in `{name}`"),
                history: Vec::new(),
            });
        }
    }
    state.step += 1;
    let lr = cfg.learning_rate;
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (w, d) in p.iter_mut().zip(g) {
                    *w -= lr * d;
                }
            }
        }
        OptimizerKind::Adam => {
            let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
            let t = state.step as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for ((p, g), (m, v)) in params
                .iter_mut()
                .zip(grads)
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLoss>,
    /// MSE of the returned weights over the training samples.
    pub final_train_loss: f64,
    pub final_val_loss: Option<f64>,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// `epoch,train_loss,val_loss` CSV; the validation column is empty
    /// when no validation set was given.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, val);
        }
        s
    }
}

/// Mean squared error of `model` over `samples` in inference mode.
pub fn evaluate_mse(model: &Model, samples: &[WindowSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(QoeError::Data("no samples".into()));
    }
    let sq: Vec<f64> = samples
        .par_iter()
        .map(|s| model.forward(&s.window).map(|p| (p - s.target) * (p - s.target)))
        .collect::<Result<_>>()?;
    Ok(sq.iter().sum::<f64>() / samples.len() as f64)
}

/// Gradient of the batch MSE. Per-sample work runs in parallel; results
/// are reduced in sample order so the sum is deterministic.
fn batch_gradients(
    model: &Model,
    samples: &[WindowSample],
    batch: &[usize],
    dropout_seeds: &[u64],
) -> Result<(Gradients, f64)> {
    let uses_dropout = model.config().variant == crate::Variant::OriginalTcn
        && model.config().dropout_p > 0.0;
    let scale = 2.0 / batch.len() as f64;
    let parts: Vec<(Gradients, f64)> = batch
        .par_iter()
        .zip(dropout_seeds)
        .map(|(&i, &seed)| {
            let s = &samples[i];
            let mut rng = SeededRng::seed_from_u64(seed);
            let rng_ref: Option<&mut dyn RngCore> = if uses_dropout { Some(&mut rng) } else { None };
            let (pred, cache) = model.forward_train(&s.window, rng_ref)?;
            let err = pred - s.target;
            Ok((model.backward(&cache, scale * err)?, err * err))
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut total, mut sq) = iter.next().expect("non-empty batch");
    for (g, e) in iter {
        total.accumulate(&g);
        sq += e;
    }
    Ok((total, sq))
}

/// Trains `model` in place. With a validation set, per-epoch validation
/// loss is recorded and, if `early_stop_patience` is set, training stops
/// after that many epochs without improvement and the best weights are
/// restored.
pub fn train(
    model: &mut Model,
    samples: &[WindowSample],
    cfg: &TrainConfig,
    validation: Option<&[WindowSample]>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(QoeError::Data("no training samples".into()));
    }
    let validation = validation.filter(|v| !v.is_empty());
    let names = model.param_names();
    let mut state = OptimizerState::for_model(model);
    let mut shuffle_rng = rng_for(cfg.seed, "shuffle");
    let dropout_seed = derive_seed(cfg.seed, "dropout");
    let mut sample_counter = 0u64;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Model)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    let fail = |message: String, history: &[EpochLoss]| QoeError::Training {
        message,
        history: history.iter().map(|e| e.train_loss).collect(),
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sq_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let seeds: Vec<u64> = (0..batch.len())
                .map(|j| derive_indexed(dropout_seed, "sample", sample_counter + j as u64))
                .collect();
            sample_counter += batch.len() as u64;
            let (grads, sq) = batch_gradients(model, samples, batch, &seeds)?;
            if !sq.is_finite() {
                return Err(fail(format!("loss diverged in epoch {epoch}"), &history));
            }
            sq_sum += sq;
            let mut params = model.param_slices_mut();
            optimizer_step(&mut state, &mut params, &grads.tensors, &names, cfg).map_err(|e| match e {
                QoeError::Training { message, .. } => fail(message, &history),
                other => other,
            })?;
        }
        let train_loss = sq_sum / samples.len() as f64;
        let val_loss = validation.map(|v| evaluate_mse(model, v)).transpose()?;
        if !train_loss.is_finite() || val_loss.is_some_and(|v| !v.is_finite()) {
            return Err(fail(format!("loss diverged in epoch {epoch}"), &history));
        }
        history.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:?}");

        if let (Some(patience), Some(v)) = (cfg.early_stop_patience, val_loss) {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, m)) = best.filter(|_| stopped_early) {
        *model = m;
    }
    Ok(TrainHistory {
        epochs: history,
        final_train_loss: evaluate_mse(model, samples)?,
        final_val_loss: validation.map(|v| evaluate_mse(model, v)).transpose()?,
        stopped_early,
    })
}

/// Windows for every trace, concatenated.
pub fn windows_for(traces: &[NormalizedTrace], window: usize) -> Result<Vec<WindowSample>> {
    let mut out = Vec::new();
    for t in traces {
        out.extend(make_windows(t, window)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpace {
    pub kernel_sizes: Vec<usize>,
    pub blocks: Vec<usize>,
    pub filters: Vec<usize>,
}

impl Default for GridSpace {
    fn default() -> Self {
        Self {
            kernel_sizes: GRID_KERNEL_SIZES.to_vec(),
            blocks: GRID_BLOCKS.to_vec(),
            filters: GRID_FILTERS.to_vec(),
        }
    }
}

impl GridSpace {
    /// Cross-product in (k, L, n) order, with every other field from `base`.
    pub fn configs(&self, base: &ModelConfig) -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for &k in &self.kernel_sizes {
            for &l in &self.blocks {
                for &n in &self.filters {
                    out.push(ModelConfig {
                        kernel_size: k,
                        blocks: l,
                        filters: n,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub config: ModelConfig,
    pub val_rmse: f64,
    pub params: usize,
    pub receptive_field: usize,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    /// Best first.
    pub ranking: Vec<GridEntry>,
    pub skipped: Vec<(ModelConfig, Vec<Violation>)>,
}

impl GridResult {
    pub fn best(&self) -> &ModelConfig {
        &self.ranking[0].config
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,k,L,n,variant,receptive_field,window,params,val_rmse\n");
        for (i, e) in self.ranking.iter().enumerate() {
            let c = &e.config;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                i + 1,
                c.kernel_size,
                c.blocks,
                c.filters,
                c.variant,
                e.receptive_field,
                e.window,
                e.params,
                e.val_rmse
            );
        }
        s
    }
}

/// Trains one model per valid config in `space` and ranks them by
/// validation RMSE (ties: fewer params, then smaller L, then smaller k).
/// Each candidate's seed is derived from `(cfg.seed, candidate index)`, so
/// the outcome does not depend on `jobs`. `window = None` sizes each
/// candidate's window to its receptive field.
pub fn grid_search(
    space: &GridSpace,
    base: &ModelConfig,
    train_set: &[NormalizedTrace],
    val_set: &[NormalizedTrace],
    window: Option<usize>,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<GridResult> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(QoeError::Search("grid search needs training and validation traces".into()));
    }
    let mut candidates = Vec::new();
    let mut skipped = Vec::new();
    for (idx, c) in space.configs(base).into_iter().enumerate() {
        match validate_config(&c) {
            Ok(()) => candidates.push((idx, c)),
            Err(v) => skipped.push((c, v)),
        }
    }
    if candidates.is_empty() {
        return Err(QoeError::Search("every config in the space is invalid".into()));
    }
    let run = |(idx, c): &(usize, ModelConfig)| -> Result<GridEntry> {
        let seed = derive_indexed(cfg.seed, "grid", *idx as u64);
        let w = window.unwrap_or_else(|| receptive_field(c));
        let train_w = windows_for(train_set, w)?;
        let val_w = windows_for(val_set, w)?;
        let mut model = build_model(c, &mut rng_for(seed, "init"), false)?;
        let tcfg = TrainConfig { seed, ..cfg.clone() };
        let hist = train(&mut model, &train_w, &tcfg, Some(&val_w))?;
        let val = hist.final_val_loss.expect("validation given");
        log::info!(
            "grid k={} L={} n={}: val rmse {:.5}",
            c.kernel_size,
            c.blocks,
            c.filters,
            val.sqrt()
        );
        Ok(GridEntry {
            config: c.clone(),
            val_rmse: val.sqrt(),
            params: count_params(&model),
            receptive_field: receptive_field(c),
            window: w,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| QoeError::Search(e.to_string()))?;
    let mut ranking: Vec<GridEntry> =
        pool.install(|| candidates.par_iter().map(run).collect::<Result<_>>())?;
    ranking.sort_by(|a, b| {
        a.val_rmse
            .total_cmp(&b.val_rmse)
            .then(a.params.cmp(&b.params))
            .then(a.config.blocks.cmp(&b.config.blocks))
            .then(a.config.kernel_size.cmp(&b.config.kernel_size))
    });
    Ok(GridResult { ranking, skipped })
}
