//! Cost models over masked graphs: Mult-Add count, parameter count, and
//! distributed schedule length, plus a seeded stochastic wrapper.
//!
//! Per-edge costs come from the module kind and the source layer shape,
//! unless the edge declares an override (scaled-down graphs carry the
//! full-size numbers that way). Conventions:
//!
//! - one Mult-Add counts as one operation;
//! - identity edges are free in every model;
//! - resolution-doubling convolutions are costed at the source resolution,
//!   which equals the work their scatter implementation actually does;
//! - a residual block occupies two schedule cycles (its convolutions run
//!   sequentially), every other parametric module one.

use std::collections::BTreeSet;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{CostMeta, Mask, ModuleKind, SuperNetGraph};
use crate::schedule::{distributed_cost, SchedulePolicy};

/// Cost metadata of one edge: the declared override when present,
/// otherwise derived from the module kind and the source layer shape.
pub fn edge_cost(g: &SuperNetGraph, idx: usize) -> CostMeta {
    let e = g.edge(idx);
    if let Some(c) = e.module.cost_override {
        return c;
    }
    derive_cost(&e.module.kind, &g.layer(e.src).shape)
}

/// Analytic cost of one module applied to `in_shape`.
pub fn derive_cost(kind: &ModuleKind, in_shape: &[usize]) -> CostMeta {
    let out_shape = kind
        .output_shape(in_shape)
        .expect("edge shapes are validated at graph construction");
    let spatial_out: u64 = match out_shape.as_slice() {
        [_, h, w] => (h * w) as u64,
        _ => 1,
    };
    let spatial_in: u64 = match in_shape {
        [_, h, w] => (h * w) as u64,
        _ => 1,
    };
    match *kind {
        ModuleKind::Identity => CostMeta { flops: 0, params: 0, cycles: 0 },
        ModuleKind::Dense { in_dim, out_dim } => CostMeta {
            flops: (in_dim * out_dim) as u64,
            params: (in_dim * out_dim + out_dim) as u64,
            cycles: 1,
        },
        ModuleKind::Conv2d { in_ch, out_ch, kernel, .. } => CostMeta {
            flops: spatial_out * (in_ch * out_ch * kernel * kernel) as u64,
            params: (in_ch * out_ch * kernel * kernel + out_ch) as u64,
            cycles: 1,
        },
        ModuleKind::Projection { in_ch, out_ch, .. } => CostMeta {
            flops: spatial_out * (in_ch * out_ch) as u64,
            params: (in_ch * out_ch + out_ch) as u64,
            cycles: 1,
        },
        ModuleKind::DownsampleConv { in_ch, out_ch, kernel } => CostMeta {
            flops: spatial_out * (in_ch * out_ch * kernel * kernel) as u64,
            params: (in_ch * out_ch * kernel * kernel + out_ch) as u64,
            cycles: 1,
        },
        // Costed at the source resolution: each input pixel scatters a
        // full kernel per channel pair.
        ModuleKind::UpsampleConv { in_ch, out_ch, kernel } => CostMeta {
            flops: spatial_in * (in_ch * out_ch * kernel * kernel) as u64,
            params: (in_ch * out_ch * kernel * kernel + out_ch) as u64,
            cycles: 1,
        },
        ModuleKind::BasicBlock { in_ch, out_ch, stride: _ } => {
            let conv1 = spatial_out * (in_ch * out_ch * 9) as u64;
            let conv2 = spatial_out * (out_ch * out_ch * 9) as u64;
            let mut flops = conv1 + conv2;
            let mut params = (in_ch * out_ch * 9 + out_ch) as u64 + (out_ch * out_ch * 9 + out_ch) as u64;
            if kind.block_needs_projection() {
                flops += spatial_out * (in_ch * out_ch) as u64;
                params += (in_ch * out_ch + out_ch) as u64;
            }
            CostMeta { flops, params, cycles: 2 }
        }
    }
}

/// Total Mult-Adds of the selected edges.
pub fn flops_cost(g: &SuperNetGraph, h: &Mask) -> u64 {
    (0..g.num_edges()).filter(|&e| h.get(e)).map(|e| edge_cost(g, e).flops).sum()
}

/// Total parameter count of the selected edges. Each parameter slot is
/// counted once even if several selected edges were to share it.
pub fn params_cost(g: &SuperNetGraph, h: &Mask) -> u64 {
    let mut total = 0u64;
    let mut seen = BTreeSet::new();
    for e in 0..g.num_edges() {
        if !h.get(e) {
            continue;
        }
        let edge = g.edge(e);
        // An override prices its edge unconditionally; otherwise an
        // already-counted slot set adds nothing.
        if edge.module.cost_override.is_some()
            || edge.module.param_slots.iter().all(|&s| seen.insert(s))
        {
            total += edge_cost(g, e).params;
        }
    }
    total
}

/// Deterministic cost kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseCost {
    Flops,
    Params,
    Distributed { machines: usize, policy: SchedulePolicy },
}

impl BaseCost {
    pub fn unit(&self) -> &'static str {
        match self {
            BaseCost::Flops => "mult-adds",
            BaseCost::Params => "params",
            BaseCost::Distributed { .. } => "cycles",
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaseCost::Flops => "flops",
            BaseCost::Params => "params",
            BaseCost::Distributed { .. } => "distributed",
        }
    }
}

/// Additive observation noise for stochastic cost evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSpec {
    /// Uniform on [-half_width, half_width].
    Uniform { half_width: f64 },
    /// Zero-mean Gaussian.
    Gaussian { stddev: f64 },
}

/// Pluggable budget cost. Deterministic evaluators are pure; the
/// stochastic wrapper owns a seeded stream, so each call observes one
/// noisy sample (identically seeded evaluators replay the same sequence).
#[derive(Debug)]
pub struct CostEvaluator {
    base: BaseCost,
    noise: Option<(NoiseSpec, Mutex<ChaCha8Rng>)>,
}

impl Clone for CostEvaluator {
    fn clone(&self) -> Self {
        Self {
            base: self.base,
            noise: self
                .noise
                .as_ref()
                .map(|(spec, rng)| (*spec, Mutex::new(rng.lock().unwrap().clone()))),
        }
    }
}

impl CostEvaluator {
    pub fn flops() -> Self {
        Self { base: BaseCost::Flops, noise: None }
    }

    pub fn params() -> Self {
        Self { base: BaseCost::Params, noise: None }
    }

    pub fn distributed(machines: usize, policy: SchedulePolicy) -> Self {
        Self { base: BaseCost::Distributed { machines, policy }, noise: None }
    }

    pub fn stochastic(base: BaseCost, noise: NoiseSpec, seed: u64) -> Self {
        Self { base, noise: Some((noise, Mutex::new(ChaCha8Rng::seed_from_u64(seed)))) }
    }

    pub fn base(&self) -> BaseCost {
        self.base
    }

    pub fn is_stochastic(&self) -> bool {
        self.noise.is_some()
    }

    pub fn unit(&self) -> &'static str {
        self.base.unit()
    }

    pub fn kind_name(&self) -> String {
        if self.is_stochastic() {
            format!("stochastic({})", self.base.name())
        } else {
            self.base.name().to_string()
        }
    }

    /// Observes the cost of one masked architecture.
    pub fn evaluate(&self, g: &SuperNetGraph, h: &Mask) -> Result<f64> {
        let base = match self.base {
            BaseCost::Flops => flops_cost(g, h) as f64,
            BaseCost::Params => params_cost(g, h) as f64,
            BaseCost::Distributed { machines, policy } => {
                distributed_cost(g, h, machines, policy)?.makespan as f64
            }
        };
        let Some((spec, rng)) = &self.noise else { return Ok(base) };
        let mut rng = rng.lock().unwrap();
        let draw = match *spec {
            NoiseSpec::Uniform { half_width } => {
                if half_width == 0.0 {
                    0.0
                } else {
                    rng.gen_range(-half_width..=half_width)
                }
            }
            NoiseSpec::Gaussian { stddev } => {
                if stddev == 0.0 {
                    0.0
                } else {
                    // Box-Muller from two uniform draws.
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen();
                    stddev * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                }
            }
        };
        Ok(base + draw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, Activation, EdgeDef, LayerSpec};
    use rand::rngs::StdRng;

    fn dense_edge_graph() -> SuperNetGraph {
        build_graph(
            vec![LayerSpec::new(1, vec![10]), LayerSpec::new(2, vec![5])],
            vec![EdgeDef::new(1, 2, ModuleKind::Dense { in_dim: 10, out_dim: 5 })],
            Activation::None,
        )
        .unwrap()
    }

    /// Three-layer graph mixing module kinds, for monotonicity sweeps.
    fn mixed_graph() -> SuperNetGraph {
        build_graph(
            vec![
                LayerSpec::new(1, vec![3, 8, 8]),
                LayerSpec::new(2, vec![4, 8, 8]),
                LayerSpec::new(3, vec![4, 4, 4]),
                LayerSpec::new(4, vec![10]),
            ],
            vec![
                EdgeDef::new(1, 2, ModuleKind::Conv2d { in_ch: 3, out_ch: 4, kernel: 3, stride: 1, padding: 1 }),
                EdgeDef::new(2, 3, ModuleKind::BasicBlock { in_ch: 4, out_ch: 4, stride: 2 }),
                EdgeDef::new(1, 3, ModuleKind::DownsampleConv { in_ch: 3, out_ch: 4, kernel: 3 }),
                EdgeDef::new(3, 4, ModuleKind::Dense { in_dim: 4, out_dim: 10 }),
            ],
            Activation::Relu,
        )
        .unwrap()
    }

    #[test]
    fn empty_mask_costs_nothing() {
        let g = dense_edge_graph();
        let h = Mask::empty(&g);
        assert_eq!(flops_cost(&g, &h), 0);
        assert_eq!(params_cost(&g, &h), 0);
    }

    #[test]
    fn dense_edge_analytic_costs() {
        let g = dense_edge_graph();
        let h = Mask::full(&g);
        assert_eq!(flops_cost(&g, &h), 50);
        assert_eq!(params_cost(&g, &h), 55);
    }

    #[test]
    fn identity_edges_are_free() {
        let g = build_graph(
            vec![LayerSpec::new(1, vec![4]), LayerSpec::new(2, vec![4])],
            vec![EdgeDef::new(1, 2, ModuleKind::Identity)],
            Activation::None,
        )
        .unwrap();
        let h = Mask::full(&g);
        assert_eq!(flops_cost(&g, &h), 0);
        assert_eq!(params_cost(&g, &h), 0);
        let meta = edge_cost(&g, 0);
        assert_eq!(meta.cycles, 0);
    }

    #[test]
    fn derived_params_equal_actual_slot_sizes() {
        // The analytic parameter formulas must agree with the shapes the
        // store actually allocates, for every module kind.
        let kinds: Vec<(ModuleKind, Vec<usize>)> = vec![
            (ModuleKind::Dense { in_dim: 7, out_dim: 3 }, vec![7]),
            (ModuleKind::Conv2d { in_ch: 3, out_ch: 5, kernel: 3, stride: 1, padding: 1 }, vec![3, 6, 6]),
            (ModuleKind::Projection { in_ch: 4, out_ch: 8, stride: 2 }, vec![4, 6, 6]),
            (ModuleKind::DownsampleConv { in_ch: 4, out_ch: 4, kernel: 3 }, vec![4, 6, 6]),
            (ModuleKind::UpsampleConv { in_ch: 4, out_ch: 2, kernel: 3 }, vec![4, 6, 6]),
            (ModuleKind::BasicBlock { in_ch: 4, out_ch: 4, stride: 1 }, vec![4, 6, 6]),
            (ModuleKind::BasicBlock { in_ch: 4, out_ch: 8, stride: 2 }, vec![4, 6, 6]),
        ];
        for (kind, in_shape) in kinds {
            let derived = derive_cost(&kind, &in_shape).params;
            let actual: u64 = kind
                .param_shapes()
                .iter()
                .map(|s| s.iter().product::<usize>() as u64)
                .sum();
            assert_eq!(derived, actual, "kind {:?}", kind);
        }
    }

    #[test]
    fn upsample_is_costed_at_source_resolution() {
        let kind = ModuleKind::UpsampleConv { in_ch: 4, out_ch: 2, kernel: 3 };
        let meta = derive_cost(&kind, &[4, 6, 6]);
        // 6x6 source pixels, not the 12x12 output.
        assert_eq!(meta.flops, 36 * 4 * 2 * 9);
    }

    #[test]
    fn cost_override_takes_precedence() {
        let fake = CostMeta { flops: 123, params: 456, cycles: 7 };
        let g = build_graph(
            vec![LayerSpec::new(1, vec![10]), LayerSpec::new(2, vec![5])],
            vec![EdgeDef::new(1, 2, ModuleKind::Dense { in_dim: 10, out_dim: 5 })
                .with_cost(fake)],
            Activation::None,
        )
        .unwrap();
        assert_eq!(edge_cost(&g, 0), fake);
        let h = Mask::full(&g);
        assert_eq!(flops_cost(&g, &h), 123);
        assert_eq!(params_cost(&g, &h), 456);
    }

    #[test]
    fn adding_an_edge_never_decreases_flops_or_params() {
        use rand::SeedableRng;
        let g = mixed_graph();
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..200 {
            let bits: Vec<bool> = (0..g.num_edges()).map(|_| rng.gen()).collect();
            let h = Mask::from_bits(bits.clone());
            for e in 0..g.num_edges() {
                if bits[e] {
                    continue;
                }
                let mut grown = h.clone();
                grown.set(e, true);
                assert!(flops_cost(&g, &grown) >= flops_cost(&g, &h));
                assert!(params_cost(&g, &grown) >= params_cost(&g, &h));
            }
        }
    }

    #[test]
    fn evaluator_dispatches_to_each_kind() {
        let g = mixed_graph();
        let h = Mask::full(&g);
        assert_eq!(CostEvaluator::flops().evaluate(&g, &h).unwrap(), flops_cost(&g, &h) as f64);
        assert_eq!(CostEvaluator::params().evaluate(&g, &h).unwrap(), params_cost(&g, &h) as f64);
        let sched = CostEvaluator::distributed(1, SchedulePolicy::GreedyList);
        let makespan = sched.evaluate(&g, &h).unwrap();
        // Sequential: one cycle per plain module, two for the block.
        assert_eq!(makespan, 5.0);
        assert_eq!(sched.unit(), "cycles");
    }

    #[test]
    fn zero_noise_wrapper_is_the_base_cost() {
        let g = mixed_graph();
        let h = Mask::full(&g);
        let wrapped =
            CostEvaluator::stochastic(BaseCost::Flops, NoiseSpec::Uniform { half_width: 0.0 }, 1);
        for _ in 0..10 {
            assert_eq!(wrapped.evaluate(&g, &h).unwrap(), flops_cost(&g, &h) as f64);
        }
        assert!(wrapped.is_stochastic());
        assert_eq!(wrapped.kind_name(), "stochastic(flops)");
    }

    #[test]
    fn uniform_noise_sample_mean_recovers_the_base() {
        let g = dense_edge_graph();
        let h = Mask::full(&g);
        let half_width = 30.0;
        let ev = CostEvaluator::stochastic(
            BaseCost::Flops,
            NoiseSpec::Uniform { half_width },
            42,
        );
        let n = 10_000usize;
        let mean: f64 =
            (0..n).map(|_| ev.evaluate(&g, &h).unwrap()).sum::<f64>() / n as f64;
        // Uniform variance (2w)^2/12; 3 standard errors.
        let se = (half_width * half_width / 3.0 / n as f64).sqrt();
        assert!((mean - 50.0).abs() < 3.0 * se, "mean {}", mean);
    }

    #[test]
    fn gaussian_noise_sample_mean_recovers_the_base() {
        let g = dense_edge_graph();
        let h = Mask::full(&g);
        let stddev = 10.0;
        let ev = CostEvaluator::stochastic(BaseCost::Flops, NoiseSpec::Gaussian { stddev }, 9);
        let n = 10_000usize;
        let samples: Vec<f64> = (0..n).map(|_| ev.evaluate(&g, &h).unwrap()).collect();
        let mean: f64 = samples.iter().sum::<f64>() / n as f64;
        let se = stddev / (n as f64).sqrt();
        assert!((mean - 50.0).abs() < 3.0 * se, "mean {}", mean);
        let var: f64 =
            samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64;
        assert!((var.sqrt() - stddev).abs() < 0.5, "stddev {}", var.sqrt());
    }

    #[test]
    fn identically_seeded_evaluators_replay_the_same_samples() {
        let g = dense_edge_graph();
        let h = Mask::full(&g);
        let a = CostEvaluator::stochastic(
            BaseCost::Flops,
            NoiseSpec::Uniform { half_width: 5.0 },
            7,
        );
        let b = a.clone();
        let sa: Vec<f64> = (0..20).map(|_| a.evaluate(&g, &h).unwrap()).collect();
        let sb: Vec<f64> = (0..20).map(|_| b.evaluate(&g, &h).unwrap()).collect();
        assert_eq!(sa, sb);
        assert!(sa.windows(2).any(|w| w[0] != w[1]), "noise actually varies");
    }
}
