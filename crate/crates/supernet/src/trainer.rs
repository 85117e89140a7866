//! Joint training of module weights and architecture probabilities.
//!
//! The objective for one sampled architecture is
//! `D = loss + lambda * max(0, cost - max_cost)`. Module weights get
//! ordinary backprop gradients through the sampled subgraph; edge
//! logits get score-function gradients weighted by the advantage of
//! `D` over a baseline. Both move under one SGD rule: momentum is
//! shared, weight decay applies to module weights only (decaying
//! logits would pull every probability toward 1/2).

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{backward, loss_delta, loss_gradient, ssn_forward, LossKind, Tape};
use crate::cost::CostEvaluator;
use crate::dataset::{shuffle, Dataset};
use crate::error::{Error, Result};
use crate::graph::{Mask, SuperNetGraph};
use crate::params::ParameterStore;
use crate::sampler::{enumerate_masks, grad_log_prob, sample_mask, ArchitectureDistribution};
use crate::tensor::Tensor;

/// Edge limit for exact expectations over all masks.
pub const EXACT_EXPECTATION_EDGE_CAP: usize = 12;
/// Edge limit for the brute-force search over trained architectures.
pub const OPTIMALITY_EDGE_CAP: usize = 10;

/// Cost side of the objective: hinge threshold, hinge weight, and the
/// cost model the threshold is measured in.
#[derive(Debug, Clone)]
pub struct BudgetConfig {
    /// Threshold C, in the evaluator's unit.
    pub max_cost: f64,
    /// Hinge weight. Zero turns the run into unconstrained training.
    pub lambda: f64,
    pub cost: CostEvaluator,
}

impl BudgetConfig {
    pub fn new(max_cost: f64, lambda: f64, cost: CostEvaluator) -> Result<Self> {
        let b = Self { max_cost, lambda, cost };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.max_cost.is_finite() || self.max_cost < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "max_cost must be finite and >= 0, got {}",
                self.max_cost
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Hinge penalty for an observed cost.
    pub fn penalty(&self, cost: f64) -> f64 {
        self.lambda * (cost - self.max_cost).max(0.0)
    }
}

/// How the advantage baseline is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BaselineMode {
    /// Baseline = mean objective of the current batch.
    BatchMean,
    /// Exponential moving average across batches; the baseline a batch
    /// sees is the average of earlier batches only.
    Ema { decay: f64 },
}

/// Running advantage baseline.
#[derive(Debug, Clone)]
pub struct BaselineTracker {
    mode: BaselineMode,
    current: f64,
    primed: bool,
}

impl BaselineTracker {
    pub fn new(mode: BaselineMode) -> Result<Self> {
        if let BaselineMode::Ema { decay } = mode {
            if !(0.0..1.0).contains(&decay) {
                return Err(Error::InvalidConfig(format!(
                    "EMA decay must lie in [0, 1), got {decay}"
                )));
            }
        }
        Ok(Self { mode, current: 0.0, primed: false })
    }

    pub fn mode(&self) -> BaselineMode {
        self.mode
    }

    /// Current tracked value (last batch mean, or the EMA).
    pub fn current(&self) -> f64 {
        self.current
    }

    /// Baseline to subtract for a batch with the given objectives. The
    /// first batch an EMA tracker ever sees uses its own mean, which
    /// matches BatchMean until the average has history.
    pub fn baseline_for(&self, batch: &[f64]) -> f64 {
        let mean = || batch.iter().sum::<f64>() / batch.len().max(1) as f64;
        match self.mode {
            BaselineMode::BatchMean => mean(),
            BaselineMode::Ema { .. } => {
                if self.primed {
                    self.current
                } else {
                    mean()
                }
            }
        }
    }

    /// Folds a finished batch into the tracker.
    pub fn update(&mut self, batch: &[f64]) {
        if batch.is_empty() {
            return;
        }
        let mean = batch.iter().sum::<f64>() / batch.len() as f64;
        self.current = match self.mode {
            BaselineMode::BatchMean => mean,
            BaselineMode::Ema { decay } => {
                if self.primed {
                    decay * self.current + (1.0 - decay) * mean
                } else {
                    mean
                }
            }
        };
        self.primed = true;
    }
}

/// Step-wise learning rate: `initial`, divided by `1/factor` after each
/// listed epoch (1-based; epoch e uses `initial * factor^k` where `k`
/// counts decay points strictly below `e`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { initial: lr, decay_epochs: Vec::new(), factor: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial.is_finite() && self.initial > 0.0)
            || !(self.factor.is_finite() && self.factor > 0.0)
        {
            return Err(Error::InvalidConfig(format!(
                "learning rates must be positive, got initial {} factor {}",
                self.initial, self.factor
            )));
        }
        Ok(())
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&p| p < epoch).count();
        self.initial * self.factor.powi(drops as i32)
    }
}

/// What to do when a sampled architecture cannot reach the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisconnectedPolicy {
    /// Draw up to `resample_limit` masks; if none reaches the output,
    /// train weights on the full mask and leave the logits out of the
    /// step. The default for real runs.
    ResampleThenExclude,
    /// Single draw; a disconnected draw is scored with the full-mask
    /// objective while the score function still differentiates the
    /// drawn mask. This keeps the estimator exactly unbiased for
    /// [`exact_expected_objective`]; used by the gradient tests.
    ScoreAgainstFullMask,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Leading epochs that train the full network without sampling.
    pub burn_in_epochs: usize,
    pub lr: LrSchedule,
    /// Logit steps follow `lr` unless a separate schedule is given.
    /// Skipped when absent so the config serializes back to TOML.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_lr: Option<LrSchedule>,
    pub momentum: f64,
    pub weight_decay_theta: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Total draws allowed per example under ResampleThenExclude.
    pub resample_limit: usize,
    /// Value every logit is set to when sampling starts; sigmoid(3) is
    /// roughly 0.95, so early architectures stay near the full net.
    pub logit_init: f64,
    pub baseline: BaselineMode,
    pub disconnected: DisconnectedPolicy,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            // Scaled equivalent of a 50-of-300 warm-up.
            burn_in_epochs: 10,
            lr: LrSchedule { initial: 0.05, decay_epochs: vec![], factor: 0.1 },
            gamma_lr: None,
            momentum: 0.9,
            weight_decay_theta: 1e-4,
            batch_size: 8,
            seed: 0,
            resample_limit: 10,
            logit_init: 3.0,
            baseline: BaselineMode::BatchMean,
            disconnected: DisconnectedPolicy::ResampleThenExclude,
            loss: LossKind::CrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 && self.burn_in_epochs != 0 {
            return Err(Error::InvalidConfig(
                "a zero-epoch run cannot have burn-in epochs".into(),
            ));
        }
        if self.epochs > 0 && self.burn_in_epochs >= self.epochs {
            return Err(Error::InvalidConfig(format!(
                "burn_in_epochs {} must be < epochs {}",
                self.burn_in_epochs, self.epochs
            )));
        }
        self.lr.validate()?;
        if let Some(glr) = &self.gamma_lr {
            glr.validate()?;
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !self.weight_decay_theta.is_finite() || self.weight_decay_theta < 0.0 {
            return Err(Error::InvalidConfig("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.resample_limit == 0 {
            return Err(Error::InvalidConfig("resample_limit must be >= 1".into()));
        }
        if !self.logit_init.is_finite() {
            return Err(Error::InvalidConfig("logit_init must be finite".into()));
        }
        BaselineTracker::new(self.baseline).map(|_| ())
    }
}

/// Decomposition of the objective for one architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveParts {
    pub loss: f64,
    pub raw_cost: f64,
    pub penalty: f64,
    /// loss + penalty.
    pub total: f64,
}

/// Objective of one architecture on one example.
pub fn objective_d(
    g: &SuperNetGraph,
    h: &Mask,
    params: &ParameterStore,
    budget: &BudgetConfig,
    x: &Tensor,
    y: &Tensor,
    loss: LossKind,
) -> Result<ObjectiveParts> {
    if !g.is_output_connected(h) {
        return Err(Error::NotConnected);
    }
    let mut tape = Tape::new();
    let out = ssn_forward(g, h, x.clone(), params, &mut tape)?;
    let delta = loss_delta(tape.value(out), y, loss)?;
    let raw_cost = budget.cost.evaluate(g, h)?;
    let penalty = budget.penalty(raw_cost);
    Ok(ObjectiveParts { loss: delta, raw_cost, penalty, total: delta + penalty })
}

/// Objective of one architecture averaged over a whole dataset. The
/// cost term is evaluated once; only the loss varies per example.
pub fn objective_d_mean(
    g: &SuperNetGraph,
    h: &Mask,
    params: &ParameterStore,
    budget: &BudgetConfig,
    data: &Dataset,
    loss: LossKind,
) -> Result<ObjectiveParts> {
    if !g.is_output_connected(h) {
        return Err(Error::NotConnected);
    }
    let raw_cost = budget.cost.evaluate(g, h)?;
    let penalty = budget.penalty(raw_cost);
    let mut delta = 0f64;
    for i in 0..data.len() {
        let mut tape = Tape::new();
        let out = ssn_forward(g, h, data.input(i).clone(), params, &mut tape)?;
        delta += loss_delta(tape.value(out), &data.one_hot(i), loss)?;
    }
    delta /= data.len() as f64;
    Ok(ObjectiveParts { loss: delta, raw_cost, penalty, total: delta + penalty })
}

/// Exact expectation of the objective over every reachable mask,
/// averaged over the dataset. Masks that miss the output contribute
/// the full-mask objective, mirroring the scoring rule the trainer
/// uses for disconnected draws. Requires a deterministic cost model;
/// an expectation over cost noise is not enumerable.
pub fn exact_expected_objective(
    g: &SuperNetGraph,
    dist: &ArchitectureDistribution,
    params: &ParameterStore,
    budget: &BudgetConfig,
    data: &Dataset,
    loss: LossKind,
) -> Result<f64> {
    if budget.cost.is_stochastic() {
        return Err(Error::InvalidConfig(
            "exact expectation needs a deterministic cost model".into(),
        ));
    }
    let masks = enumerate_masks(g, dist, EXACT_EXPECTATION_EDGE_CAP)?;
    let full = Mask::full(g);
    let mut full_d = None;
    let mut total = 0f64;
    for (mask, p) in &masks {
        let d = if g.is_output_connected(mask) {
            objective_d_mean(g, mask, params, budget, data, loss)?.total
        } else {
            match full_d {
                Some(d) => d,
                None => {
                    let d = objective_d_mean(g, &full, params, budget, data, loss)?.total;
                    full_d = Some(d);
                    d
                }
            }
        };
        total += p * d;
    }
    Ok(total)
}

/// Momentum buffers for the shared SGD step.
#[derive(Debug, Clone)]
pub struct SgdState {
    theta_velocity: Vec<Tensor>,
    gamma_velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(params: &ParameterStore, num_edges: usize) -> Self {
        Self {
            theta_velocity: (0..params.num_slots())
                .map(|s| Tensor::zeros(params.value(s).shape()))
                .collect(),
            gamma_velocity: vec![0.0; num_edges],
        }
    }
}

/// Applies one momentum-SGD step to the slots marked in `used`,
/// scaling accumulated gradients by `inv_batch`. Slots whose modules
/// never ran this batch keep value and velocity untouched, so frozen
/// branches neither decay nor drift.
fn apply_theta_step(
    params: &mut ParameterStore,
    opt: &mut SgdState,
    used: &[bool],
    inv_batch: f32,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, mom, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for s in 0..params.num_slots() {
        if !used[s] {
            continue;
        }
        let grad: Vec<f32> = params.grad(s).data().to_vec();
        let v = opt.theta_velocity[s].data_mut();
        let theta = params.value_mut(s).data_mut();
        for i in 0..theta.len() {
            v[i] = mom * v[i] + (grad[i] * inv_batch + wd * theta[i]);
            theta[i] -= lr * v[i];
        }
    }
}

/// Marks the parameter slots of every selected edge whose source is
/// reachable, i.e. every module the forward pass executes.
fn mark_used_slots(g: &SuperNetGraph, mask: &Mask, used: &mut [bool]) {
    let reach = g.reachable_from_input(mask);
    for (e, edge) in g.edges().iter().enumerate() {
        if mask.get(e) && reach[edge.src - 1] {
            for &s in &edge.module.param_slots {
                used[s] = true;
            }
        }
    }
}

/// Aggregates of one optimizer step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepReport {
    pub examples: usize,
    pub mean_loss: f64,
    pub mean_cost: f64,
    pub mean_penalty: f64,
    pub mean_objective: f64,
    /// Mean per-edge entropy of the distribution after the step, nats.
    pub entropy_per_edge: f64,
    /// Examples whose draws never reached the output and were left out
    /// of the logit gradient.
    pub excluded: usize,
}

/// One batch: sample, forward, backward, and a serial optimizer step.
///
/// Per example a mask is drawn (full mask during burn-in), the loss is
/// backpropagated through that subgraph only, and the objective is
/// recorded. The logit gradient is the mean of
/// `grad_log_prob * (D - baseline)` over the scored draws; the weight
/// gradient is the batch-mean loss gradient. The baseline also updates
/// during burn-in so sampling starts against a primed average.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    g: &SuperNetGraph,
    dist: &mut ArchitectureDistribution,
    params: &mut ParameterStore,
    opt: &mut SgdState,
    budget: &BudgetConfig,
    baseline: &mut BaselineTracker,
    cfg: &TrainConfig,
    data: &Dataset,
    batch: &[usize],
    lr: f64,
    gamma_lr: f64,
    burn_in: bool,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("train_step needs a non-empty batch".into()));
    }
    let full = Mask::full(g);
    params.zero_grads();
    let mut used = vec![false; params.num_slots()];
    let mut ds = Vec::with_capacity(batch.len());
    // (grad of log prob, objective) for each scored draw.
    let mut scored: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut excluded = 0usize;
    let (mut loss_sum, mut cost_sum, mut penalty_sum) = (0f64, 0f64, 0f64);

    for &i in batch {
        let (eval_mask, score_mask) = if burn_in {
            (full.clone(), None)
        } else {
            match cfg.disconnected {
                DisconnectedPolicy::ResampleThenExclude => {
                    let mut found = None;
                    for _ in 0..cfg.resample_limit {
                        let rec = sample_mask(g, dist, rng);
                        if g.is_output_connected(&rec.mask) {
                            found = Some(rec.mask);
                            break;
                        }
                    }
                    match found {
                        Some(m) => (m.clone(), Some(m)),
                        None => {
                            excluded += 1;
                            (full.clone(), None)
                        }
                    }
                }
                DisconnectedPolicy::ScoreAgainstFullMask => {
                    let rec = sample_mask(g, dist, rng);
                    let eval = if g.is_output_connected(&rec.mask) {
                        rec.mask.clone()
                    } else {
                        full.clone()
                    };
                    (eval, Some(rec.mask))
                }
            }
        };

        let mut tape = Tape::new();
        let out = ssn_forward(g, &eval_mask, data.input(i).clone(), params, &mut tape)?;
        let target = data.one_hot(i);
        let delta = loss_delta(tape.value(out), &target, cfg.loss)?;
        let lgrad = loss_gradient(tape.value(out), &target, cfg.loss)?;
        backward(&tape, out, &lgrad, params)?;
        mark_used_slots(g, &eval_mask, &mut used);

        let raw_cost = budget.cost.evaluate(g, &eval_mask)?;
        let penalty = budget.penalty(raw_cost);
        let d = delta + penalty;
        loss_sum += delta;
        cost_sum += raw_cost;
        penalty_sum += penalty;
        ds.push(d);

        if let Some(sm) = score_mask {
            let glp = grad_log_prob(g, dist, &sm)
                .expect("masks produced by the sampler are always drawable");
            scored.push((glp, d));
        }
    }

    apply_theta_step(
        params,
        opt,
        &used,
        1.0 / batch.len() as f32,
        lr,
        cfg.momentum,
        cfg.weight_decay_theta,
    );

    if !scored.is_empty() {
        let base = baseline.baseline_for(&ds);
        let inv = 1.0 / scored.len() as f64;
        let mut ggrad = vec![0f64; g.num_edges()];
        for (glp, d) in &scored {
            for (e, ge) in glp.iter().enumerate() {
                ggrad[e] += ge * (d - base) * inv;
            }
        }
        let logits = dist.logits_mut();
        for e in 0..ggrad.len() {
            let v = &mut opt.gamma_velocity[e];
            *v = cfg.momentum * *v + ggrad[e];
            logits[e] -= gamma_lr * *v;
        }
    }
    baseline.update(&ds);

    let n = batch.len() as f64;
    Ok(StepReport {
        examples: batch.len(),
        mean_loss: loss_sum / n,
        mean_cost: cost_sum / n,
        mean_penalty: penalty_sum / n,
        mean_objective: (loss_sum + penalty_sum) / n,
        entropy_per_edge: dist.entropy() / g.num_edges() as f64,
        excluded,
    })
}

/// Classification accuracy of one architecture. Predictions must be
/// flat class-score vectors matching the dataset's class count.
pub fn accuracy(
    g: &SuperNetGraph,
    h: &Mask,
    params: &ParameterStore,
    data: &Dataset,
) -> Result<f64> {
    let mut correct = 0usize;
    for i in 0..data.len() {
        let mut tape = Tape::new();
        let out = ssn_forward(g, h, data.input(i).clone(), params, &mut tape)?;
        let pred = tape.value(out);
        if pred.len() != data.classes() {
            return Err(Error::ShapeMismatch {
                src: 0,
                dst: 0,
                detail: format!(
                    "prediction has {} scores for {} classes",
                    pred.len(),
                    data.classes()
                ),
            });
        }
        let mut arg = 0usize;
        for (j, &v) in pred.data().iter().enumerate() {
            if v > pred.data()[arg] {
                arg = j;
            }
        }
        if arg == data.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Training phase tag in epoch records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    BurnIn,
    Sampled,
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    /// None on the init record, which precedes any training.
    pub train_loss: Option<f64>,
    pub train_cost: Option<f64>,
    pub train_objective: Option<f64>,
    pub excluded: usize,
    /// Mean nats per edge.
    pub entropy: f64,
    pub val_accuracy: f64,
    pub val_cost: f64,
    /// False when the argmax mask no longer reaches the output; the
    /// val metrics then refer to the full mask.
    pub argmax_connected: bool,
}

/// Closing line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_entropy: f64,
    /// True when every probability is within the sampler's
    /// deterministic tolerance of 0 or 1.
    pub deterministic: bool,
    pub val_accuracy: f64,
    pub val_cost: f64,
    pub cost_unit: String,
    pub argmax_edges: usize,
}

/// Best validation accuracy seen at one distinct argmax cost, with the
/// model state that achieved it.
#[derive(Debug, Clone)]
pub struct BestModel {
    pub epoch: usize,
    pub val_cost: f64,
    pub val_accuracy: f64,
    pub dist: ArchitectureDistribution,
    pub params: ParameterStore,
}

/// Full record of one training run.
#[derive(Debug, Clone)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    pub summary: TrainSummary,
    /// Checkpoint per distinct argmax cost, ordered by cost.
    pub best: Vec<BestModel>,
}

/// Validation metrics of the current argmax architecture: accuracy,
/// cost, whether the pruned argmax still reaches the output (metrics
/// fall back to the full mask when it does not), and the mask used.
fn argmax_metrics(
    g: &SuperNetGraph,
    dist: &ArchitectureDistribution,
    params: &ParameterStore,
    budget: &BudgetConfig,
    val: &Dataset,
) -> Result<(f64, f64, bool, Mask)> {
    let pruned = g.active_mask(&dist.argmax_mask());
    let (mask, connected) = if g.is_output_connected(&pruned) {
        (pruned, true)
    } else {
        (Mask::full(g), false)
    };
    let acc = accuracy(g, &mask, params, val)?;
    let cost = budget.cost.evaluate(g, &mask)?;
    Ok((acc, cost, connected, mask))
}

/// Runs burn-in followed by sampled training.
///
/// Logits are overwritten with `cfg.logit_init` when sampling begins;
/// the distribution passed in only matters for the init record. The
/// log is bitwise-deterministic for a fixed config and seed.
pub fn run_training(
    g: &SuperNetGraph,
    dist: &mut ArchitectureDistribution,
    params: &mut ParameterStore,
    budget: &BudgetConfig,
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<TrainingLog> {
    cfg.validate()?;
    budget.validate()?;
    let mut opt = SgdState::new(params, g.num_edges());
    let mut baseline = BaselineTracker::new(cfg.baseline)?;
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(1);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(2);

    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let mut best: BTreeMap<u64, BestModel> = BTreeMap::new();
    let track_best = |best: &mut BTreeMap<u64, BestModel>,
                          epoch: usize,
                          acc: f64,
                          cost: f64,
                          connected: bool,
                          dist: &ArchitectureDistribution,
                          params: &ParameterStore| {
        if !connected {
            return;
        }
        let key = cost.to_bits();
        let better = best.get(&key).is_none_or(|b| acc > b.val_accuracy);
        if better {
            best.insert(
                key,
                BestModel {
                    epoch,
                    val_cost: cost,
                    val_accuracy: acc,
                    dist: dist.clone(),
                    params: params.clone(),
                },
            );
        }
    };

    let (acc, vcost, connected, _) = argmax_metrics(g, dist, params, budget, val)?;
    records.push(EpochRecord {
        epoch: 0,
        phase: Phase::Init,
        lr: 0.0,
        train_loss: None,
        train_cost: None,
        train_objective: None,
        excluded: 0,
        entropy: dist.entropy() / g.num_edges() as f64,
        val_accuracy: acc,
        val_cost: vcost,
        argmax_connected: connected,
    });
    track_best(&mut best, 0, acc, vcost, connected, dist, params);

    if cfg.epochs > 0 && cfg.burn_in_epochs == 0 {
        for l in dist.logits_mut() {
            *l = cfg.logit_init;
        }
    }

    for epoch in 1..=cfg.epochs {
        let burn = epoch <= cfg.burn_in_epochs;
        let lr = cfg.lr.at(epoch);
        let gamma_lr = cfg.gamma_lr.as_ref().unwrap_or(&cfg.lr).at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut shuffle_rng);

        let (mut loss_sum, mut cost_sum, mut obj_sum) = (0f64, 0f64, 0f64);
        let mut excluded = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let rep = train_step(
                g,
                dist,
                params,
                &mut opt,
                budget,
                &mut baseline,
                cfg,
                train,
                chunk,
                lr,
                gamma_lr,
                burn,
                &mut sample_rng,
            )?;
            let n = rep.examples as f64;
            loss_sum += rep.mean_loss * n;
            cost_sum += rep.mean_cost * n;
            obj_sum += rep.mean_objective * n;
            excluded += rep.excluded;
        }

        // Sampling starts from a common, near-full distribution.
        if burn && epoch == cfg.burn_in_epochs {
            for l in dist.logits_mut() {
                *l = cfg.logit_init;
            }
        }

        let (acc, vcost, connected, _) = argmax_metrics(g, dist, params, budget, val)?;
        let n = train.len() as f64;
        records.push(EpochRecord {
            epoch,
            phase: if burn { Phase::BurnIn } else { Phase::Sampled },
            lr,
            train_loss: Some(loss_sum / n),
            train_cost: Some(cost_sum / n),
            train_objective: Some(obj_sum / n),
            excluded,
            entropy: dist.entropy() / g.num_edges() as f64,
            val_accuracy: acc,
            val_cost: vcost,
            argmax_connected: connected,
        });
        track_best(&mut best, epoch, acc, vcost, connected, dist, params);
    }

    let last = records.last().expect("init record always present");
    let argmax_edges = {
        let pruned = g.active_mask(&dist.argmax_mask());
        (0..g.num_edges()).filter(|&e| pruned.get(e)).count()
    };
    let summary = TrainSummary {
        epochs: cfg.epochs,
        final_entropy: last.entropy,
        deterministic: dist.is_deterministic(),
        val_accuracy: last.val_accuracy,
        val_cost: last.val_cost,
        cost_unit: budget.cost.unit().to_string(),
        argmax_edges,
    };
    Ok(TrainingLog { records, summary, best: best.into_values().collect() })
}

/// Per-logit Monte-Carlo statistics of the score-function gradient.
#[derive(Debug, Clone)]
pub struct GammaGradEstimate {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub samples: usize,
}

impl GammaGradEstimate {
    /// Standard error of the mean for one logit.
    pub fn standard_error(&self, e: usize) -> f64 {
        (self.variance[e] / self.samples as f64).sqrt()
    }
}

/// Monte-Carlo estimate of the logit gradient with frozen weights and
/// a frozen baseline: mean and variance of
/// `grad_log_prob(H) * (D*(H) - baseline)` over independent draws,
/// where `D*` substitutes the full-mask objective for disconnected
/// draws. Its expectation equals the gradient of
/// [`exact_expected_objective`]. Objectives are cached per mask, so it
/// requires a deterministic cost model.
#[allow(clippy::too_many_arguments)]
pub fn gamma_gradient_monte_carlo(
    g: &SuperNetGraph,
    dist: &ArchitectureDistribution,
    params: &ParameterStore,
    budget: &BudgetConfig,
    data: &Dataset,
    loss: LossKind,
    samples: usize,
    baseline: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GammaGradEstimate> {
    if budget.cost.is_stochastic() {
        return Err(Error::InvalidConfig(
            "gradient statistics need a deterministic cost model".into(),
        ));
    }
    if samples == 0 {
        return Err(Error::EmptyInput("need at least one sample".into()));
    }
    let full = Mask::full(g);
    let mut cache: HashMap<Vec<bool>, f64> = HashMap::new();
    let e = g.num_edges();
    let mut mean = vec![0f64; e];
    let mut m2 = vec![0f64; e];
    for n in 1..=samples {
        let rec = sample_mask(g, dist, rng);
        let eval = if g.is_output_connected(&rec.mask) { &rec.mask } else { &full };
        let key: Vec<bool> = (0..e).map(|i| eval.get(i)).collect();
        let d = match cache.get(&key) {
            Some(&d) => d,
            None => {
                let d = objective_d_mean(g, eval, params, budget, data, loss)?.total;
                cache.insert(key, d);
                d
            }
        };
        let glp = grad_log_prob(g, dist, &rec.mask)
            .expect("masks produced by the sampler are always drawable");
        for i in 0..e {
            let x = glp[i] * (d - baseline);
            let delta = x - mean[i];
            mean[i] += delta / n as f64;
            m2[i] += delta * (x - mean[i]);
        }
    }
    let variance = m2
        .into_iter()
        .map(|v| if samples > 1 { v / (samples - 1) as f64 } else { 0.0 })
        .collect();
    Ok(GammaGradEstimate { mean, variance, samples })
}

/// One fully trained architecture in the brute-force table.
#[derive(Debug, Clone)]
pub struct MaskObjective {
    pub mask: Mask,
    pub loss: f64,
    pub raw_cost: f64,
    pub penalty: f64,
    pub objective: f64,
}

/// Settings for [`check_optimality`].
#[derive(Debug, Clone)]
pub struct OptimalityCheckConfig {
    /// Full-batch epochs when training each enumerated architecture.
    pub per_mask_epochs: usize,
    pub per_mask_lr: f64,
    /// Probability slack defining "deterministic enough": every edge
    /// probability must sit within epsilon of 0 or 1.
    pub epsilon: f64,
    pub train: TrainConfig,
}

/// Outcome of the optimality check.
#[derive(Debug, Clone)]
pub struct OptimalityReport {
    /// Every connected architecture with no dead branches, trained to
    /// convergence from a shared init.
    pub per_mask: Vec<MaskObjective>,
    pub optimum: f64,
    pub optimum_index: usize,
    /// Max minus min brute-force objective; callers size their gap
    /// tolerance from it.
    pub spread: f64,
    /// Brute-force objective of the architecture the stochastic run
    /// converged to (infinite if its argmax lost the output).
    pub achieved: f64,
    pub final_connected: bool,
    pub gap: f64,
    pub mean_entropy_per_edge: f64,
    pub epsilon_deterministic: bool,
    pub train_summary: TrainSummary,
}

/// Trains `params` on one fixed architecture with full-batch momentum
/// SGD, no weight decay.
#[allow(clippy::too_many_arguments)]
fn train_mask_supervised(
    g: &SuperNetGraph,
    mask: &Mask,
    params: &mut ParameterStore,
    data: &Dataset,
    loss: LossKind,
    epochs: usize,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let mut opt = SgdState::new(params, g.num_edges());
    let mut used = vec![false; params.num_slots()];
    mark_used_slots(g, mask, &mut used);
    for _ in 0..epochs {
        params.zero_grads();
        for i in 0..data.len() {
            let mut tape = Tape::new();
            let out = ssn_forward(g, mask, data.input(i).clone(), params, &mut tape)?;
            let lgrad = loss_gradient(tape.value(out), &data.one_hot(i), loss)?;
            backward(&tape, out, &lgrad, params)?;
        }
        apply_theta_step(params, &mut opt, &used, 1.0 / data.len() as f32, lr, momentum, 0.0);
    }
    Ok(())
}

/// Compares stochastic training against brute force.
///
/// Enumerates every connected mask whose selected edges all lie on an
/// input-to-output path, trains each from the same weight init, and
/// takes the best objective as the reference optimum. Then runs the
/// stochastic trainer and reports where its final argmax architecture
/// lands in that table, plus how deterministic the final distribution
/// is. Training and validation both use `data`; the check is about
/// optimization, not generalization.
pub fn check_optimality(
    g: &SuperNetGraph,
    budget: &BudgetConfig,
    data: &Dataset,
    cfg: &OptimalityCheckConfig,
) -> Result<OptimalityReport> {
    let e = g.num_edges();
    if e > OPTIMALITY_EDGE_CAP {
        return Err(Error::TooLarge { cap: OPTIMALITY_EDGE_CAP, got: e });
    }
    cfg.train.validate()?;
    budget.validate()?;

    let mut per_mask = Vec::new();
    for bits in 1u32..(1u32 << e) {
        let mask = Mask::from_bits((0..e).map(|i| bits & (1 << i) != 0).collect());
        if !g.is_output_connected(&mask) || g.active_mask(&mask) != mask {
            continue;
        }
        let mut params = ParameterStore::init_for_graph(g, cfg.train.seed);
        train_mask_supervised(
            g,
            &mask,
            &mut params,
            data,
            cfg.train.loss,
            cfg.per_mask_epochs,
            cfg.per_mask_lr,
            cfg.train.momentum,
        )?;
        let parts = objective_d_mean(g, &mask, &params, budget, data, cfg.train.loss)?;
        per_mask.push(MaskObjective {
            mask,
            loss: parts.loss,
            raw_cost: parts.raw_cost,
            penalty: parts.penalty,
            objective: parts.total,
        });
    }
    if per_mask.is_empty() {
        return Err(Error::NotConnected);
    }
    let optimum_index = per_mask
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective))
        .map(|(i, _)| i)
        .expect("table is non-empty");
    let optimum = per_mask[optimum_index].objective;
    let worst = per_mask
        .iter()
        .map(|m| m.objective)
        .fold(f64::NEG_INFINITY, f64::max);
    let spread = worst - optimum;

    let mut dist = ArchitectureDistribution::new(g, 0.0, cfg.train.seed);
    let mut params = ParameterStore::init_for_graph(g, cfg.train.seed);
    let log = run_training(g, &mut dist, &mut params, budget, &cfg.train, data, data)?;

    let pruned = g.active_mask(&dist.argmax_mask());
    let final_connected = g.is_output_connected(&pruned);
    let achieved = if final_connected {
        per_mask
            .iter()
            .find(|m| m.mask == pruned)
            .expect("every pruned connected mask is in the table")
            .objective
    } else {
        f64::INFINITY
    };
    let probs = dist.probs();
    Ok(OptimalityReport {
        optimum,
        optimum_index,
        spread,
        achieved,
        final_connected,
        gap: achieved - optimum,
        mean_entropy_per_edge: dist.entropy() / e as f64,
        epsilon_deterministic: probs
            .iter()
            .all(|&p| p <= cfg.epsilon || p >= 1.0 - cfg.epsilon),
        train_summary: log.summary,
        per_mask,
    })
}
