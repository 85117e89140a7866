//! Model selection on the (cost, accuracy) plane.
//!
//! A trained run yields many candidate architectures; the selector
//! keeps the ones no other candidate beats on both axes and emits the
//! front in formats ready for plotting.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::cost::CostEvaluator;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Mask, SuperNetGraph};
use crate::params::ParameterStore;
use crate::sampler::{sample_mask, ArchitectureDistribution};
use crate::trainer::accuracy;

/// RNG stream reserved for sampled-mean evaluation, so evaluation
/// draws never collide with training streams of the same seed.
const EVAL_STREAM: u64 = 7;

/// One scored model: where it came from and where it sits on the
/// cost/accuracy plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedModel {
    /// Checkpoint path or identifier.
    pub checkpoint: String,
    pub val_accuracy: f64,
    pub cost: f64,
    pub cost_unit: String,
    /// Hinge weight the run trained with.
    pub lambda: f64,
    /// Budget threshold the run trained with.
    pub max_cost: f64,
    pub seed: u64,
    pub epoch: usize,
}

impl EvaluatedModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.val_accuracy) {
            return Err(Error::InvalidConfig(format!(
                "accuracy {} outside [0, 1] for {}",
                self.val_accuracy, self.checkpoint
            )));
        }
        if !self.cost.is_finite() || self.cost < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "cost {} must be finite and >= 0 for {}",
                self.cost, self.checkpoint
            )));
        }
        Ok(())
    }
}

/// Identity of a model under evaluation; copied into the record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub checkpoint: String,
    pub lambda: f64,
    pub max_cost: f64,
    pub seed: u64,
    pub epoch: usize,
}

/// How to turn a distribution into numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Deterministic extraction: select each edge iff its probability
    /// is at least 1/2, prune dead branches, evaluate once.
    ArgmaxMask,
    /// Average accuracy and cost over this many sampled architectures,
    /// each pruned to its operative edges before scoring.
    SampledMean(usize),
}

/// Keeps the models not dominated on (cost, accuracy). A model is
/// dominated when some other model costs no more and scores no less,
/// strictly better in at least one. Exact duplicates keep the earliest
/// entry. Output is sorted by ascending cost (and therefore ascending
/// accuracy).
pub fn pareto_front(models: &[EvaluatedModel]) -> Result<Vec<EvaluatedModel>> {
    if models.is_empty() {
        return Err(Error::EmptyInput("pareto_front needs at least one model".into()));
    }
    for m in models {
        m.validate()?;
    }
    // Cheapest first; at equal cost the most accurate first; at equal
    // (cost, accuracy) the earliest first. One sweep then keeps a model
    // iff it beats every accuracy seen at lower-or-equal cost.
    let mut idx: Vec<usize> = (0..models.len()).collect();
    idx.sort_by(|&a, &b| {
        models[a]
            .cost
            .total_cmp(&models[b].cost)
            .then(models[b].val_accuracy.total_cmp(&models[a].val_accuracy))
            .then(a.cmp(&b))
    });
    let mut front = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    for i in idx {
        if models[i].val_accuracy > best_acc {
            best_acc = models[i].val_accuracy;
            front.push(models[i].clone());
        }
    }
    Ok(front)
}

/// Scores one checkpoint on a dataset.
///
/// `ArgmaxMask` reports the pruned argmax architecture and fails with
/// `NotConnected` when that architecture has lost the output; callers
/// decide what to do with such a run. `SampledMean(k)` draws `k`
/// architectures, prunes each, and averages: a draw with no live path
/// to the output scores accuracy 0 at cost 0 (nothing runs). Draw
/// results are cached per distinct mask, and the RNG stream is fixed,
/// so repeated evaluations agree exactly.
pub fn evaluate_model(
    g: &SuperNetGraph,
    dist: &ArchitectureDistribution,
    params: &ParameterStore,
    data: &Dataset,
    cost: &CostEvaluator,
    mode: EvalMode,
    meta: &ModelMeta,
) -> Result<EvaluatedModel> {
    let (val_accuracy, mean_cost) = match mode {
        EvalMode::ArgmaxMask => {
            let mask = g.active_mask(&dist.argmax_mask());
            if !g.is_output_connected(&mask) {
                return Err(Error::NotConnected);
            }
            (accuracy(g, &mask, params, data)?, cost.evaluate(g, &mask)?)
        }
        EvalMode::SampledMean(k) => {
            if k == 0 {
                return Err(Error::EmptyInput("SampledMean needs k >= 1".into()));
            }
            let mut rng = dist.worker_rng(EVAL_STREAM);
            // Tally distinct pruned masks first and score each once,
            // folding in a fixed (BTreeMap) order. The weighted mean
            // uses count/k so a point-mass draw reproduces the
            // single-mask score bit for bit, and repeated evaluations
            // agree exactly.
            let mut counts: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
            for _ in 0..k {
                let pruned = g.active_mask(&sample_mask(g, dist, &mut rng).mask);
                let key: Vec<bool> = (0..g.num_edges()).map(|e| pruned.get(e)).collect();
                *counts.entry(key).or_insert(0) += 1;
            }
            let (mut mean_acc, mut mean_cost) = (0f64, 0f64);
            for (key, count) in &counts {
                let pruned = Mask::from_bits(key.clone());
                let (a, c) = if g.is_output_connected(&pruned) {
                    (accuracy(g, &pruned, params, data)?, cost.evaluate(g, &pruned)?)
                } else {
                    (0.0, 0.0)
                };
                let w = *count as f64 / k as f64;
                mean_acc += w * a;
                mean_cost += w * c;
            }
            (mean_acc, mean_cost)
        }
    };
    let model = EvaluatedModel {
        checkpoint: meta.checkpoint.clone(),
        val_accuracy,
        cost: mean_cost,
        cost_unit: cost.unit().to_string(),
        lambda: meta.lambda,
        max_cost: meta.max_cost,
        seed: meta.seed,
        epoch: meta.epoch,
    };
    model.validate()?;
    Ok(model)
}

/// Serializes models as JSON-lines, one record per line.
pub fn write_models(w: &mut dyn Write, models: &[EvaluatedModel]) -> Result<()> {
    for m in models {
        let line = serde_json::to_string(m)
            .map_err(|e| Error::Parse(format!("serializing model record: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads JSON-lines model records; blank lines are skipped.
pub fn read_models(r: &mut dyn BufRead) -> Result<Vec<EvaluatedModel>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: EvaluatedModel = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("model record line {}: {e}", n + 1)))?;
        m.validate()?;
        out.push(m);
    }
    Ok(out)
}

/// CSV rendering of a front: `cost,accuracy,checkpoint`.
pub fn front_to_csv(front: &[EvaluatedModel]) -> String {
    let mut out = String::from("cost,accuracy,checkpoint\n");
    for m in front {
        // Checkpoint names are paths; quote them so commas never split.
        out.push_str(&format!(
            "{},{},\"{}\"\n",
            m.cost,
            m.val_accuracy,
            m.checkpoint.replace('"', "\"\"")
        ));
    }
    out
}

/// Whitespace-separated plot data with every candidate and a 0/1 front
/// flag, digestible by gnuplot (`using 1:2`) or any DSV reader.
pub fn plot_data(models: &[EvaluatedModel], front: &[EvaluatedModel]) -> String {
    let mut out = String::from("# cost accuracy on_front checkpoint\n");
    for m in models {
        let on = front
            .iter()
            .any(|f| f.checkpoint == m.checkpoint && f.cost == m.cost && f.val_accuracy == m.val_accuracy);
        out.push_str(&format!(
            "{} {} {} {}\n",
            m.cost,
            m.val_accuracy,
            u8::from(on),
            m.checkpoint.replace(char::is_whitespace, "_")
        ));
    }
    out
}
