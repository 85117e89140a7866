//! Release checks behind `supernet verify`.
//!
//! Each check rebuilds an independent reference for one slice of the
//! system (published cost figures, exhaustive enumeration, finite
//! differences, a quadratic dominance oracle, repeated runs) and
//! compares the implementation against it, returning a pass/fail
//! verdict with the measured numbers instead of panicking.

use std::fs;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compute::{backward, loss_delta, loss_gradient, ssn_forward, LossKind, Tape};
use crate::cost::{flops_cost, params_cost, CostEvaluator};
use crate::dataset::two_moons;
use crate::error::Result;
use crate::experiment::{run_experiment, run_sweep, ExperimentConfig, SweepConfig};
use crate::fabric::{
    cnf, dense_stack, parallel_chains_graph, resnet_fabric, resnet_spine_mask, CnfSpec, CnfTask,
    ResNetFabricSpec,
};
use crate::graph::{build_graph, Activation, EdgeDef, LayerSpec, Mask, ModuleKind, SuperNetGraph};
use crate::params::ParameterStore;
use crate::sampler::{enumerate_masks, sample_mask, ArchitectureDistribution};
use crate::schedule::{distributed_cost, SchedulePolicy};
use crate::selection::{pareto_front, EvaluatedModel};
use crate::tensor::Tensor;
use crate::trainer::{
    check_optimality, exact_expected_objective, gamma_gradient_monte_carlo, BaselineMode,
    BudgetConfig, LrSchedule, OptimalityCheckConfig, TrainConfig,
};

/// Verdict of one check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

/// Reference figures for the straight residual paths: depth, published
/// mult-adds, published parameter count.
const RESNET_PUBLISHED: [(usize, f64, f64); 5] = [
    (3, 40.90e6, 0.27e6),
    (5, 69.27e6, 0.47e6),
    (7, 97.64e6, 0.66e6),
    (9, 126.01e6, 0.86e6),
    (18, 253.70e6, 1.73e6),
];

/// Published full-fabric mult-adds per column count, and the 8-column
/// parameter count.
const CNF_FLOPS_PUBLISHED: [(usize, f64); 4] =
    [(1, 54e6), (2, 406e6), (4, 1010e6), (8, 2219e6)];
const CNF_PARAMS_PUBLISHED: (usize, f64) = (8, 18.04e6);

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want
}

/// Derived mult-adds and parameter counts against the published tables:
/// residual paths within 2%, fabric totals within 5%.
pub fn check_cost_tables() -> CheckResult {
    let name = "cost-tables";
    let mut worst: (f64, String) = (0.0, String::new());
    let mut track = |err: f64, what: String| {
        if err > worst.0 {
            worst = (err, what);
        }
    };
    for (n, flops_pub, params_pub) in RESNET_PUBLISHED {
        let spec = ResNetFabricSpec::cifar(n, 10);
        let g = match resnet_fabric(&spec) {
            Ok(g) => g,
            Err(e) => return CheckResult::new(name, false, format!("building fabric n={n}: {e}")),
        };
        let mask = match resnet_spine_mask(&g, &spec) {
            Ok(m) => m,
            Err(e) => return CheckResult::new(name, false, format!("spine mask n={n}: {e}")),
        };
        let fe = rel_err(flops_cost(&g, &mask) as f64, flops_pub);
        let pe = rel_err(params_cost(&g, &mask) as f64, params_pub);
        if fe > 0.02 || pe > 0.02 {
            return CheckResult::new(
                name,
                false,
                format!("residual depth {}: flops off {:.2}%, params off {:.2}%", 6 * n + 2, fe * 100.0, pe * 100.0),
            );
        }
        track(fe, format!("residual-{n} flops", n = 6 * n + 2));
        track(pe, format!("residual-{n} params", n = 6 * n + 2));
    }
    for (w, flops_pub) in CNF_FLOPS_PUBLISHED {
        let g = match cnf(&CnfSpec { task: CnfTask::Classify, ..CnfSpec::cifar(w, 10) }) {
            Ok(g) => g,
            Err(e) => return CheckResult::new(name, false, format!("building fabric W={w}: {e}")),
        };
        let fe = rel_err(flops_cost(&g, &Mask::full(&g)) as f64, flops_pub);
        if fe > 0.05 {
            return CheckResult::new(name, false, format!("grid fabric W={w}: flops off {:.2}%", fe * 100.0));
        }
        track(fe, format!("grid-{w} flops"));
        if w == CNF_PARAMS_PUBLISHED.0 {
            let pe = rel_err(params_cost(&g, &Mask::full(&g)) as f64, CNF_PARAMS_PUBLISHED.1);
            if pe > 0.05 {
                return CheckResult::new(name, false, format!("grid fabric W={w}: params off {:.2}%", pe * 100.0));
            }
            track(pe, format!("grid-{w} params"));
        }
    }
    CheckResult::new(name, true, format!("worst deviation {:.3}% ({})", worst.0 * 100.0, worst.1))
}

/// Single-machine makespans of the residual paths against their
/// published sequential depths (within 2 cycles), plus the two
/// two-machine demo networks with known optimal makespans.
pub fn check_distributed_costs() -> CheckResult {
    let name = "distributed-cost";
    for (n, cycles_pub) in [(3usize, 20u32), (5, 32), (7, 44), (9, 56), (18, 110)] {
        let spec = ResNetFabricSpec::cifar(n, 10);
        let (g, mask) = match resnet_fabric(&spec)
            .and_then(|g| resnet_spine_mask(&g, &spec).map(|m| (g, m)))
        {
            Ok(v) => v,
            Err(e) => return CheckResult::new(name, false, format!("fabric n={n}: {e}")),
        };
        let s = match distributed_cost(&g, &mask, 1, SchedulePolicy::GreedyList) {
            Ok(s) => s,
            Err(e) => return CheckResult::new(name, false, format!("scheduling n={n}: {e}")),
        };
        if (s.makespan as i64 - cycles_pub as i64).abs() > 2 {
            return CheckResult::new(
                name,
                false,
                format!("residual depth {}: {} cycles on one machine, expected {} +- 2", 6 * n + 2, s.makespan, cycles_pub),
            );
        }
    }
    // Two parallel-chain networks: more modules, shorter makespan.
    for (lengths, edges, makespan) in [(&[6usize, 3][..], 9usize, 6u32), (&[5, 5][..], 10, 5)] {
        let g = match parallel_chains_graph(lengths) {
            Ok(g) => g,
            Err(e) => return CheckResult::new(name, false, format!("chains {lengths:?}: {e}")),
        };
        if g.num_edges() != edges {
            return CheckResult::new(name, false, format!("chains {lengths:?}: {} edges, expected {edges}", g.num_edges()));
        }
        for policy in [SchedulePolicy::GreedyList, SchedulePolicy::BruteForceOptimal] {
            let s = match distributed_cost(&g, &Mask::full(&g), 2, policy) {
                Ok(s) => s,
                Err(e) => return CheckResult::new(name, false, format!("chains {lengths:?}: {e}")),
            };
            if s.makespan != makespan {
                return CheckResult::new(
                    name,
                    false,
                    format!("chains {lengths:?} under {policy:?}: {} cycles, expected {makespan}", s.makespan),
                );
            }
        }
    }
    CheckResult::new(name, true, "5 path depths within 2 cycles; both 2-machine demos exact".into())
}

/// Single-edge graph exercising one module kind.
fn single_module_graph(kind: ModuleKind, input: Vec<usize>) -> Result<SuperNetGraph> {
    let out = kind
        .output_shape(&input)
        .map_err(|d| crate::error::Error::ShapeMismatch { src: 1, dst: 2, detail: d })?;
    build_graph(
        vec![LayerSpec::new(1, input), LayerSpec::new(2, out)],
        vec![EdgeDef::new(1, 2, kind)],
        Activation::None,
    )
}

fn fill_random(t: &mut Tensor, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
}

/// Backpropagated parameter gradients against central finite
/// differences for every parametric module kind; the worst
/// gradient-scale relative error must stay under 1e-3.
pub fn check_module_gradients() -> CheckResult {
    let name = "module-gradients";
    let cases: Vec<(&str, ModuleKind, Vec<usize>)> = vec![
        ("dense", ModuleKind::Dense { in_dim: 4, out_dim: 3 }, vec![4]),
        ("dense-pooled", ModuleKind::Dense { in_dim: 2, out_dim: 3 }, vec![2, 4, 4]),
        (
            "conv",
            ModuleKind::Conv2d { in_ch: 2, out_ch: 3, kernel: 3, stride: 1, padding: 1 },
            vec![2, 5, 5],
        ),
        ("projection", ModuleKind::Projection { in_ch: 3, out_ch: 2, stride: 2 }, vec![3, 4, 4]),
        ("downsample", ModuleKind::DownsampleConv { in_ch: 2, out_ch: 3, kernel: 3 }, vec![2, 6, 6]),
        ("upsample", ModuleKind::UpsampleConv { in_ch: 2, out_ch: 3, kernel: 3 }, vec![2, 3, 3]),
        ("block", ModuleKind::BasicBlock { in_ch: 2, out_ch: 2, stride: 1 }, vec![2, 4, 4]),
        ("block-projected", ModuleKind::BasicBlock { in_ch: 2, out_ch: 3, stride: 2 }, vec![2, 4, 4]),
    ];
    // Identity carries no parameters; assert that instead of skipping
    // it silently.
    if !ModuleKind::Identity.param_shapes().is_empty() {
        return CheckResult::new(name, false, "identity unexpectedly grew parameters".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: (f64, &str) = (0.0, "identity");
    for (label, kind, input_shape) in cases {
        let g = match single_module_graph(kind, input_shape.clone()) {
            Ok(g) => g,
            Err(e) => return CheckResult::new(name, false, format!("{label}: {e}")),
        };
        let mut params = ParameterStore::init_for_graph(&g, 7);
        let mut x = Tensor::zeros(&input_shape);
        fill_random(&mut x, &mut rng);
        let mut target = Tensor::zeros(&g.layer(g.output_id()).shape);
        fill_random(&mut target, &mut rng);
        let mask = Mask::full(&g);

        let objective = |params: &ParameterStore| -> Result<f64> {
            let mut tape = Tape::new();
            let out = ssn_forward(&g, &mask, x.clone(), params, &mut tape)?;
            loss_delta(tape.value(out), &target, LossKind::SquaredError)
        };

        params.zero_grads();
        let mut tape = Tape::new();
        let out = match ssn_forward(&g, &mask, x.clone(), &params, &mut tape) {
            Ok(o) => o,
            Err(e) => return CheckResult::new(name, false, format!("{label} forward: {e}")),
        };
        let lgrad = match loss_gradient(tape.value(out), &target, LossKind::SquaredError) {
            Ok(v) => v,
            Err(e) => return CheckResult::new(name, false, format!("{label} loss: {e}")),
        };
        if let Err(e) = backward(&tape, out, &lgrad, &mut params) {
            return CheckResult::new(name, false, format!("{label} backward: {e}"));
        }

        // Collect per-scalar autodiff and finite-difference gradients.
        let h = 1e-2f32;
        let mut ad = Vec::new();
        let mut fd = Vec::new();
        for slot in 0..params.num_slots() {
            for i in 0..params.value(slot).len() {
                ad.push(params.grad(slot).data()[i] as f64);
                let orig = params.value(slot).data()[i];
                let mut probe = params.clone();
                probe.value_mut(slot).data_mut()[i] = orig + h;
                let up = match objective(&probe) {
                    Ok(v) => v,
                    Err(e) => return CheckResult::new(name, false, format!("{label} probe: {e}")),
                };
                probe.value_mut(slot).data_mut()[i] = orig - h;
                let down = match objective(&probe) {
                    Ok(v) => v,
                    Err(e) => return CheckResult::new(name, false, format!("{label} probe: {e}")),
                };
                fd.push((up - down) / (2.0 * h as f64));
            }
        }
        let scale = fd.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-6);
        let err = ad
            .iter()
            .zip(&fd)
            .fold(0f64, |m, (a, f)| m.max((a - f).abs()))
            / scale;
        if err >= 1e-3 {
            return CheckResult::new(
                name,
                false,
                format!("{label}: gradient-scale relative error {err:.2e} >= 1e-3"),
            );
        }
        if err > worst.0 {
            worst = (err, label);
        }
    }
    CheckResult::new(name, true, format!("worst relative error {:.2e} ({})", worst.0, worst.1))
}

/// Shared fixture for the gradient-statistics checks: a 6-edge dense
/// stack with mixed logits under a binding budget.
fn gradient_fixture() -> Result<(SuperNetGraph, ArchitectureDistribution, ParameterStore, BudgetConfig, crate::dataset::Dataset)>
{
    let g = dense_stack(&[2, 3, 3, 2], true)?;
    let dist =
        ArchitectureDistribution::from_logits(vec![0.4, -0.6, 0.1, 0.8, -0.2, 0.3], 17);
    let params = ParameterStore::init_for_graph(&g, 3);
    let budget = BudgetConfig::new(20.0, 0.05, CostEvaluator::flops())?;
    let data = two_moons(10, 0.15, 2)?;
    Ok((g, dist, params, budget, data))
}

/// Monte-Carlo logit gradient against central finite differences of
/// the enumerated expected objective, per logit, within 3 standard
/// errors at 1e5 samples.
pub fn check_gamma_unbiasedness() -> CheckResult {
    let name = "gamma-unbiasedness";
    let inner = || -> Result<(f64, usize)> {
        let (g, dist, params, budget, data) = gradient_fixture()?;
        let loss = LossKind::CrossEntropy;
        let h = 1e-5;
        let mut fd = Vec::with_capacity(g.num_edges());
        for e in 0..g.num_edges() {
            let probs = |delta: f64| -> Result<f64> {
                let mut logits = dist.logits().to_vec();
                logits[e] += delta;
                let d = ArchitectureDistribution::from_logits(logits, 17);
                exact_expected_objective(&g, &d, &params, &budget, &data, loss)
            };
            fd.push((probs(h)? - probs(-h)?) / (2.0 * h));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(555);
        let mc = gamma_gradient_monte_carlo(&g, &dist, &params, &budget, &data, loss, 100_000, 0.0, &mut rng)?;
        let mut worst_sigmas = 0f64;
        for e in 0..g.num_edges() {
            let se = mc.standard_error(e).max(1e-12);
            worst_sigmas = worst_sigmas.max((mc.mean[e] - fd[e]).abs() / se);
        }
        Ok((worst_sigmas, mc.samples))
    };
    match inner() {
        Ok((sigmas, samples)) if sigmas <= 3.0 => CheckResult::new(
            name,
            true,
            format!("worst logit off by {sigmas:.2} standard errors at {samples} samples"),
        ),
        Ok((sigmas, samples)) => CheckResult::new(
            name,
            false,
            format!("worst logit off by {sigmas:.2} standard errors at {samples} samples"),
        ),
        Err(e) => CheckResult::new(name, false, format!("estimator failed: {e}")),
    }
}

/// Subtracting a constant baseline must leave the gradient mean
/// unchanged (within combined standard errors on identical draws) and
/// shrink its variance.
pub fn check_baseline_variance() -> CheckResult {
    let name = "baseline-variance";
    let inner = || -> Result<(f64, f64, f64)> {
        let (g, dist, params, budget, data) = gradient_fixture()?;
        let loss = LossKind::CrossEntropy;
        // The exact expected objective is the ideal constant baseline.
        let baseline = exact_expected_objective(&g, &dist, &params, &budget, &data, loss)?;
        let mut rng = ChaCha8Rng::seed_from_u64(556);
        let plain = gamma_gradient_monte_carlo(&g, &dist, &params, &budget, &data, loss, 50_000, 0.0, &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(556);
        let reduced =
            gamma_gradient_monte_carlo(&g, &dist, &params, &budget, &data, loss, 50_000, baseline, &mut rng)?;
        let mut worst_shift = 0f64;
        for e in 0..g.num_edges() {
            let se = (plain.standard_error(e) + reduced.standard_error(e)).max(1e-12);
            worst_shift = worst_shift.max((plain.mean[e] - reduced.mean[e]).abs() / se);
        }
        let var_plain: f64 = plain.variance.iter().sum();
        let var_reduced: f64 = reduced.variance.iter().sum();
        Ok((worst_shift, var_plain, var_reduced))
    };
    match inner() {
        Ok((shift, vp, vr)) if shift <= 3.0 && vr < vp => CheckResult::new(
            name,
            true,
            format!("mean shift {shift:.2} standard errors; variance {vp:.3} -> {vr:.3}"),
        ),
        Ok((shift, vp, vr)) => CheckResult::new(
            name,
            false,
            format!("mean shift {shift:.2} standard errors; variance {vp:.3} -> {vr:.3}"),
        ),
        Err(e) => CheckResult::new(name, false, format!("estimator failed: {e}")),
    }
}

/// Enumerated mask probabilities must sum to 1 within 1e-9 on graphs
/// up to 12 edges.
pub fn check_sampler_normalization() -> CheckResult {
    let name = "sampler-normalization";
    let graphs: Vec<(&str, Result<SuperNetGraph>)> = vec![
        ("2-edge chain", dense_stack(&[2, 3, 2], false)),
        ("6-edge stack", dense_stack(&[2, 4, 4, 2], true)),
        ("12-edge chains", parallel_chains_graph(&[4, 4, 4])),
    ];
    let mut worst = 0f64;
    for (label, g) in graphs {
        let g = match g {
            Ok(g) => g,
            Err(e) => return CheckResult::new(name, false, format!("{label}: {e}")),
        };
        let logits: Vec<f64> = (0..g.num_edges()).map(|e| e as f64 * 0.37 - 1.1).collect();
        let dist = ArchitectureDistribution::from_logits(logits, 1);
        let masks = match enumerate_masks(&g, &dist, 12) {
            Ok(m) => m,
            Err(e) => return CheckResult::new(name, false, format!("{label}: {e}")),
        };
        let total: f64 = masks.iter().map(|(_, p)| p).sum();
        let err = (total - 1.0).abs();
        if err > 1e-9 {
            return CheckResult::new(name, false, format!("{label}: probabilities sum to {total}"));
        }
        worst = worst.max(err);
    }
    CheckResult::new(name, true, format!("worst normalization error {worst:.2e}"))
}

/// One million draws at maximum-entropy logits: no drawn mask may
/// select an edge whose source the mask cannot reach from the input.
pub fn check_sampler_reachability() -> CheckResult {
    let name = "sampler-reachability";
    let g = match dense_stack(&[2, 3, 3, 2], true) {
        Ok(g) => g,
        Err(e) => return CheckResult::new(name, false, format!("graph: {e}")),
    };
    let dist = ArchitectureDistribution::from_logits(vec![0.0; g.num_edges()], 9);
    let mut rng = dist.worker_rng(0);
    let draws = 1_000_000usize;
    for i in 0..draws {
        let record = sample_mask(&g, &dist, &mut rng);
        let reach = g.reachable_from_input(&record.mask);
        for e in 0..g.num_edges() {
            if record.mask.get(e) && !reach[g.edge(e).src - 1] {
                return CheckResult::new(
                    name,
                    false,
                    format!("draw {i} selected edge {e} with unreachable source"),
                );
            }
        }
    }
    CheckResult::new(name, true, format!("{draws} draws, no unreachable selection"))
}

fn oracle_front(models: &[EvaluatedModel]) -> Vec<EvaluatedModel> {
    let dominated = |i: usize| {
        models.iter().enumerate().any(|(j, other)| {
            if i == j {
                return false;
            }
            let m = &models[i];
            let le = other.cost <= m.cost && other.val_accuracy >= m.val_accuracy;
            let strict = other.cost < m.cost || other.val_accuracy > m.val_accuracy;
            le && (strict
                || (j < i && other.cost == m.cost && other.val_accuracy == m.val_accuracy))
        })
    };
    let mut front: Vec<EvaluatedModel> = models
        .iter()
        .enumerate()
        .filter(|&(i, _)| !dominated(i))
        .map(|(_, m)| m.clone())
        .collect();
    front.sort_by(|a, b| a.cost.total_cmp(&b.cost));
    front
}

/// The selection front against a quadratic dominance filter on 1e3
/// random point sets, duplicates and ties included.
pub fn check_pareto_oracle() -> CheckResult {
    let name = "pareto-oracle";
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for set in 0..1000 {
        let size = rng.gen_range(1..=50);
        let models: Vec<EvaluatedModel> = (0..size)
            .map(|j| EvaluatedModel {
                checkpoint: format!("p{j}"),
                val_accuracy: rng.gen_range(0..=10) as f64 / 10.0,
                cost: rng.gen_range(0..20) as f64,
                cost_unit: "mult-adds".into(),
                lambda: 1.0,
                max_cost: 10.0,
                seed: 0,
                epoch: 0,
            })
            .collect();
        let front = match pareto_front(&models) {
            Ok(f) => f,
            Err(e) => return CheckResult::new(name, false, format!("set {set}: {e}")),
        };
        if front != oracle_front(&models) {
            return CheckResult::new(name, false, format!("set {set}: front disagrees with the dominance oracle"));
        }
    }
    CheckResult::new(name, true, "1000 random point sets match the dominance oracle".into())
}

/// Training setup shared by the budget-pressure checks: a 6-edge dense
/// stack on the two-arc task.
fn toy_train_base() -> (TrainConfig, &'static str) {
    let cfg = TrainConfig {
        epochs: 24,
        burn_in_epochs: 4,
        lr: LrSchedule { initial: 0.2, decay_epochs: vec![16], factor: 0.1 },
        gamma_lr: Some(LrSchedule::constant(0.3)),
        batch_size: 8,
        seed: 1,
        ..TrainConfig::default()
    };
    (cfg, "dense stack [2, 4, 4, 2]")
}

fn scratch_dir(tag: &str) -> PathBuf {
    std::env::temp_dir().join(format!("supernet-verify-{tag}-{}", std::process::id()))
}

/// Sweeping the budget downward must never raise the maximum cost on
/// the per-budget fronts of the final architectures.
pub fn check_sweep_monotonicity() -> CheckResult {
    let name = "sweep-monotonicity";
    let (train, graph_label) = toy_train_base();
    let budgets = [52.0, 24.0, 10.0];
    let cfg = SweepConfig {
        graph: crate::experiment::GraphConfig::DenseStack { dims: vec![2, 4, 4, 2], complete: true },
        dataset: crate::experiment::DataConfig::TwoMoons {
            n: 48,
            noise: 0.12,
            seed: 3,
            val_fraction: 0.25,
        },
        train,
        sweep: crate::experiment::SweepGrid {
            cost: crate::experiment::CostSpec::Flops,
            max_costs: budgets.to_vec(),
            lambdas: vec![2.0],
            lambda_grid: 1,
            seeds: vec![1, 2],
            workers: 0,
            eval: Default::default(),
        },
    };
    let out = scratch_dir("sweep");
    let _ = fs::remove_dir_all(&out);
    let raw = match toml::to_string_pretty(&cfg) {
        Ok(r) => r,
        Err(e) => return CheckResult::new(name, false, format!("rendering config: {e}")),
    };
    let result = run_sweep(&cfg, &raw, &out);
    let cleanup = fs::remove_dir_all(&out);
    let art = match result {
        Ok(a) => a,
        Err(e) => return CheckResult::new(name, false, format!("sweep failed: {e}")),
    };
    drop(cleanup);

    // Front of each budget's final architectures.
    let mut max_costs = Vec::new();
    for &budget in &budgets {
        let finals: Vec<EvaluatedModel> = art
            .records
            .iter()
            .filter(|m| m.max_cost == budget && m.checkpoint.ends_with("ckpt-final"))
            .cloned()
            .collect();
        if finals.is_empty() {
            return CheckResult::new(
                name,
                false,
                format!("budget {budget}: every final architecture lost the output"),
            );
        }
        let front = match pareto_front(&finals) {
            Ok(f) => f,
            Err(e) => return CheckResult::new(name, false, format!("budget {budget}: {e}")),
        };
        max_costs.push(front.iter().map(|m| m.cost).fold(f64::NEG_INFINITY, f64::max));
    }
    for w in max_costs.windows(2) {
        if w[1] > w[0] {
            return CheckResult::new(
                name,
                false,
                format!("front max costs {max_costs:?} rise as budgets {budgets:?} shrink on the {graph_label} task"),
            );
        }
    }
    CheckResult::new(name, true, format!("front max costs {max_costs:?} for budgets {budgets:?}"))
}

const DETERMINISM_CONFIG: &str = r#"
[graph]
kind = "dense_stack"
dims = [2, 4, 4, 2]

[dataset]
kind = "two_moons"
n = 32
noise = 0.12
seed = 3

[budget]
max_cost = 24.0
lambda = 1.0

[train]
epochs = 6
burn_in_epochs = 2
batch_size = 8
seed = 11

[train.lr]
initial = 0.2
decay_epochs = []
factor = 0.1
"#;

/// Two runs of the same config and seed must produce byte-identical
/// training logs and eval records.
pub fn check_train_determinism() -> CheckResult {
    let name = "train-determinism";
    let inner = || -> Result<bool> {
        let cfg = ExperimentConfig::from_toml(DETERMINISM_CONFIG)?;
        let base = scratch_dir("determinism");
        let _ = fs::remove_dir_all(&base);
        let result = (|| -> Result<bool> {
            run_experiment(&cfg, DETERMINISM_CONFIG, &base.join("a"))?;
            run_experiment(&cfg, DETERMINISM_CONFIG, &base.join("b"))?;
            let log_equal =
                fs::read(base.join("a/log.jsonl"))? == fs::read(base.join("b/log.jsonl"))?;
            let eval_equal =
                fs::read(base.join("a/eval.jsonl"))? == fs::read(base.join("b/eval.jsonl"))?;
            Ok(log_equal && eval_equal)
        })();
        let _ = fs::remove_dir_all(&base);
        result
    };
    match inner() {
        Ok(true) => CheckResult::new(name, true, "repeated runs agree byte for byte".into()),
        Ok(false) => CheckResult::new(name, false, "repeated runs diverged".into()),
        Err(e) => CheckResult::new(name, false, format!("run failed: {e}")),
    }
}

/// Fixture for the optimality check: 6-edge dense stack, a budget that
/// rules out the full network, and a strong hinge.
pub fn optimality_fixture() -> Result<(SuperNetGraph, BudgetConfig, crate::dataset::Dataset, OptimalityCheckConfig)>
{
    let g = dense_stack(&[2, 4, 4, 2], true)?;
    let budget = BudgetConfig::new(30.0, 1.0, CostEvaluator::flops())?;
    let data = two_moons(40, 0.15, 9)?;
    let train = TrainConfig {
        epochs: 90,
        burn_in_epochs: 10,
        lr: LrSchedule { initial: 0.25, decay_epochs: vec![60], factor: 0.1 },
        gamma_lr: Some(LrSchedule::constant(1.0)),
        batch_size: 8,
        // A batch-mean advantage dies as soon as every draw in a batch
        // coincides, freezing the logits short of saturation; the
        // moving average keeps pushing survivors toward certainty.
        baseline: BaselineMode::Ema { decay: 0.9 },
        ..TrainConfig::default()
    };
    let cfg = OptimalityCheckConfig {
        per_mask_epochs: 150,
        per_mask_lr: 0.25,
        epsilon: 0.05,
        train,
    };
    Ok((g, budget, data, cfg))
}

/// Stochastic training against brute force over `seeds` runs: the
/// final architecture's objective must land within 10% of the
/// brute-force spread of the optimum on at least 80% of seeds, and the
/// mean final entropy must drop below 0.05 nats per edge.
pub fn check_optimality_gap(seeds: usize) -> CheckResult {
    let name = "optimality-gap";
    let inner = || -> Result<(usize, f64)> {
        let (g, budget, data, base_cfg) = optimality_fixture()?;
        let mut successes = 0usize;
        let mut entropy_sum = 0f64;
        for s in 0..seeds as u64 {
            let mut cfg = base_cfg.clone();
            cfg.train.seed = 1000 + s;
            let report = check_optimality(&g, &budget, &data, &cfg)?;
            let tolerance = 0.10 * report.spread;
            if report.final_connected && report.gap <= tolerance {
                successes += 1;
            }
            entropy_sum += report.mean_entropy_per_edge;
        }
        Ok((successes, entropy_sum / seeds as f64))
    };
    let needed = (seeds * 4).div_ceil(5);
    match inner() {
        Ok((successes, entropy)) if successes >= needed && entropy < 0.05 => CheckResult::new(
            name,
            true,
            format!("{successes}/{seeds} seeds within tolerance; mean entropy {entropy:.4} nats/edge"),
        ),
        Ok((successes, entropy)) => CheckResult::new(
            name,
            false,
            format!("{successes}/{seeds} seeds within tolerance (needed {needed}); mean entropy {entropy:.4} nats/edge"),
        ),
        Err(e) => CheckResult::new(name, false, format!("check failed: {e}")),
    }
}

/// Every check, fastest first. The optimality check dominates the
/// runtime.
pub fn check_names() -> Vec<&'static str> {
    vec![
        "cost-tables",
        "distributed-cost",
        "sampler-normalization",
        "pareto-oracle",
        "module-gradients",
        "train-determinism",
        "sampler-reachability",
        "gamma-unbiasedness",
        "baseline-variance",
        "sweep-monotonicity",
        "optimality-gap",
    ]
}

/// Runs one check by name.
pub fn run_check(name: &str) -> Option<CheckResult> {
    match name {
        "cost-tables" => Some(check_cost_tables()),
        "distributed-cost" => Some(check_distributed_costs()),
        "sampler-normalization" => Some(check_sampler_normalization()),
        "pareto-oracle" => Some(check_pareto_oracle()),
        "module-gradients" => Some(check_module_gradients()),
        "train-determinism" => Some(check_train_determinism()),
        "sampler-reachability" => Some(check_sampler_reachability()),
        "gamma-unbiasedness" => Some(check_gamma_unbiasedness()),
        "baseline-variance" => Some(check_baseline_variance()),
        "sweep-monotonicity" => Some(check_sweep_monotonicity()),
        "optimality-gap" => Some(check_optimality_gap(20)),
        _ => None,
    }
}

/// Runs the full suite in order.
pub fn run_all() -> Vec<CheckResult> {
    check_names().iter().map(|n| run_check(n).expect("registered name")).collect()
}
