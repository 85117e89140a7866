//! Per-edge Bernoulli distribution over sub-architectures.
//!
//! Each edge carries an independent selection probability stored as a
//! logit. Sampling walks layers in topological order and, within a layer,
//! its incoming edges by ascending source id. An edge is drawn freely only
//! when its source layer is already reachable through previously selected
//! edges; otherwise the edge is forced off and contributes no probability
//! factor. Masks produced this way never contain an edge whose source is
//! unreachable, so every selected edge participates in the computation.
//!
//! Probability bookkeeping runs in f64.

use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Mask, SuperNetGraph};

/// Probabilities closer than this to 0 or 1 count as deterministic.
pub const DETERMINISTIC_TOL: f64 = 1e-7;

const DIST_HEADER: &str = "supernet-dist v1";

/// Independent per-edge selection logits plus the master sampling seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureDistribution {
    logits: Vec<f64>,
    rng_seed: u64,
}

impl ArchitectureDistribution {
    /// Uniform logit for every edge of `g`.
    pub fn new(g: &SuperNetGraph, logit_init: f64, rng_seed: u64) -> Self {
        Self { logits: vec![logit_init; g.num_edges()], rng_seed }
    }

    pub fn from_logits(logits: Vec<f64>, rng_seed: u64) -> Self {
        Self { logits, rng_seed }
    }

    pub fn num_edges(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Selection probability of one edge.
    pub fn prob(&self, edge: usize) -> f64 {
        sigmoid(self.logits[edge])
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }

    /// Independent RNG stream derived from the master seed. Distinct
    /// stream ids give statistically independent sequences, so parallel
    /// workers stay reproducible.
    pub fn worker_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(stream);
        rng
    }

    /// Sum of per-edge Bernoulli entropies in nats. Probabilities within
    /// [`DETERMINISTIC_TOL`] of 0 or 1 contribute exactly zero, so the
    /// entropy is zero iff every edge is (numerically) deterministic.
    pub fn entropy(&self) -> f64 {
        self.logits
            .iter()
            .map(|&z| {
                let p = sigmoid(z);
                if !(DETERMINISTIC_TOL..=1.0 - DETERMINISTIC_TOL).contains(&p) {
                    0.0
                } else {
                    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
                }
            })
            .sum()
    }

    /// True when every edge probability is deterministic within
    /// [`DETERMINISTIC_TOL`].
    pub fn is_deterministic(&self) -> bool {
        self.logits.iter().all(|&z| {
            let p = sigmoid(z);
            !(DETERMINISTIC_TOL..=1.0 - DETERMINISTIC_TOL).contains(&p)
        })
    }

    /// Mask selecting the edges with probability at least 1/2.
    pub fn argmax_mask(&self) -> Mask {
        Mask::from_bits(self.logits.iter().map(|&z| z >= 0.0).collect())
    }

    /// Renders the distribution in the versioned text checkpoint format:
    /// one `logit <src> <dst> <value>` line per edge, plus the seed.
    pub fn to_text(&self, g: &SuperNetGraph) -> String {
        let mut out = String::new();
        out.push_str(DIST_HEADER);
        out.push('\n');
        let _ = writeln!(out, "seed {}", self.rng_seed);
        for (idx, e) in g.edges().iter().enumerate() {
            let _ = writeln!(out, "logit {} {} {}", e.src, e.dst, self.logits[idx]);
        }
        out
    }

    /// Parses a checkpoint written by [`Self::to_text`] against `g`.
    pub fn from_text(g: &SuperNetGraph, text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Parse("empty distribution file".into()))?;
        if header != DIST_HEADER {
            return Err(Error::Parse(format!("unsupported distribution header: {:?}", header)));
        }
        let mut rng_seed = 0u64;
        let mut logits: Vec<Option<f64>> = vec![None; g.num_edges()];
        for line in lines {
            let mut toks = line.split_whitespace();
            match toks.next() {
                Some("seed") => {
                    rng_seed = toks
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::Parse("bad seed line".into()))?;
                }
                Some("logit") => {
                    let src: usize = toks
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::Parse("bad logit source".into()))?;
                    let dst: usize = toks
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::Parse("bad logit destination".into()))?;
                    let value: f64 = toks
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::Parse("bad logit value".into()))?;
                    let idx = g.edge_index(src, dst).ok_or_else(|| {
                        Error::Parse(format!("logit for nonexistent edge {}->{}", src, dst))
                    })?;
                    logits[idx] = Some(value);
                }
                Some(other) => {
                    return Err(Error::Parse(format!("unknown distribution record {:?}", other)))
                }
                None => unreachable!(),
            }
        }
        let logits = logits
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                l.ok_or_else(|| {
                    let e = g.edge(i);
                    Error::Parse(format!("missing logit for edge {}->{}", e.src, e.dst))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { logits, rng_seed })
    }
}

/// One sampled architecture.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub mask: Mask,
    /// Log-probability of the mask under the sampling procedure; sums the
    /// factors of freely drawn edges only.
    pub log_prob: f64,
    /// Canonical indices of the edges that were drawn freely (source
    /// reachable at draw time), in draw order. Forced-off edges are absent.
    pub sampled_edges: Vec<usize>,
}

/// Draws one mask, preserving connectivity by construction.
pub fn sample_mask(
    g: &SuperNetGraph,
    dist: &ArchitectureDistribution,
    rng: &mut impl Rng,
) -> SampleRecord {
    debug_assert_eq!(dist.num_edges(), g.num_edges());
    let mut reach = vec![false; g.num_layers()];
    reach[0] = true;
    let mut mask = Mask::empty(g);
    let mut log_prob = 0f64;
    let mut sampled_edges = Vec::new();
    for &layer in g.topo_order() {
        if layer == 1 {
            continue;
        }
        let mut layer_reached = false;
        for &e in g.incoming(layer) {
            if !reach[g.edge(e).src - 1] {
                continue;
            }
            let z = dist.logits[e];
            let u: f64 = rng.gen();
            let selected = u < sigmoid(z);
            log_prob += bernoulli_log_factor(z, selected);
            sampled_edges.push(e);
            if selected {
                mask.set(e, true);
                layer_reached = true;
            }
        }
        reach[layer - 1] = layer_reached;
    }
    SampleRecord { mask, log_prob, sampled_edges }
}

/// Log-probability of drawing exactly `mask`, or `None` when the mask is
/// impossible under the connectivity-preserving procedure (it selects an
/// edge whose source is unreachable).
pub fn log_prob_of(g: &SuperNetGraph, dist: &ArchitectureDistribution, mask: &Mask) -> Option<f64> {
    debug_assert_eq!(dist.num_edges(), g.num_edges());
    debug_assert_eq!(mask.len(), g.num_edges());
    let mut reach = vec![false; g.num_layers()];
    reach[0] = true;
    let mut log_prob = 0f64;
    for &layer in g.topo_order() {
        if layer == 1 {
            continue;
        }
        let mut layer_reached = false;
        for &e in g.incoming(layer) {
            let src_ok = reach[g.edge(e).src - 1];
            if src_ok {
                log_prob += bernoulli_log_factor(dist.logits[e], mask.get(e));
                layer_reached |= mask.get(e);
            } else if mask.get(e) {
                return None;
            }
        }
        reach[layer - 1] = layer_reached;
    }
    Some(log_prob)
}

/// Gradient of `log_prob_of(g, dist, mask)` with respect to each logit:
/// `selected - probability` on freely drawn edges, zero on forced edges.
/// `None` when the mask is impossible.
pub fn grad_log_prob(
    g: &SuperNetGraph,
    dist: &ArchitectureDistribution,
    mask: &Mask,
) -> Option<Vec<f64>> {
    log_prob_of(g, dist, mask)?;
    let mut reach = vec![false; g.num_layers()];
    reach[0] = true;
    let mut grad = vec![0f64; g.num_edges()];
    for &layer in g.topo_order() {
        if layer == 1 {
            continue;
        }
        let mut layer_reached = false;
        for &e in g.incoming(layer) {
            if reach[g.edge(e).src - 1] {
                let h = if mask.get(e) { 1.0 } else { 0.0 };
                grad[e] = h - sigmoid(dist.logits[e]);
                layer_reached |= mask.get(e);
            }
        }
        reach[layer - 1] = layer_reached;
    }
    Some(grad)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log P(edge = selected) for a logit, computed stably:
/// ln sigmoid(z) = -softplus(-z), ln(1 - sigmoid(z)) = -softplus(z).
fn bernoulli_log_factor(z: f64, selected: bool) -> f64 {
    if selected {
        -softplus(-z)
    } else {
        -softplus(z)
    }
}

fn softplus(t: f64) -> f64 {
    if t > 30.0 {
        t
    } else {
        t.exp().ln_1p()
    }
}

/// Enumerates every mask the sampling procedure can produce, with its
/// probability. Walks the same edge order as [`sample_mask`], branching on
/// freely drawn edges. Capped at `max_edges` to keep enumeration tractable.
pub fn enumerate_masks(
    g: &SuperNetGraph,
    dist: &ArchitectureDistribution,
    max_edges: usize,
) -> Result<Vec<(Mask, f64)>> {
    if g.num_edges() > max_edges {
        return Err(Error::TooLarge { cap: max_edges, got: g.num_edges() });
    }
    // Edges in draw order.
    let order: Vec<usize> = g
        .topo_order()
        .iter()
        .filter(|&&l| l != 1)
        .flat_map(|&l| g.incoming(l).iter().copied())
        .collect();
    let mut out = Vec::new();
    let mut mask = Mask::empty(g);
    recurse(g, dist, &order, 0, &mut mask, 0.0, &mut out);
    return Ok(out);

    fn recurse(
        g: &SuperNetGraph,
        dist: &ArchitectureDistribution,
        order: &[usize],
        pos: usize,
        mask: &mut Mask,
        log_prob: f64,
        out: &mut Vec<(Mask, f64)>,
    ) {
        if pos == order.len() {
            out.push((mask.clone(), log_prob.exp()));
            return;
        }
        let e = order[pos];
        // Reachability of the source depends only on decisions already
        // made (its incoming edges precede this position in draw order).
        let src = g.edge(e).src;
        let reachable = g.reachable_from_input(mask)[src - 1];
        if !reachable {
            recurse(g, dist, order, pos + 1, mask, log_prob, out);
            return;
        }
        let z = dist.logits[e];
        recurse(g, dist, order, pos + 1, mask, log_prob + bernoulli_log_factor(z, false), out);
        mask.set(e, true);
        recurse(g, dist, order, pos + 1, mask, log_prob + bernoulli_log_factor(z, true), out);
        mask.set(e, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, Activation, EdgeDef, LayerSpec, ModuleKind};
    use std::collections::BTreeMap;

    fn chain(n: usize) -> SuperNetGraph {
        let layers: Vec<LayerSpec> = (1..=n).map(|i| LayerSpec::new(i, vec![2])).collect();
        let edges = (1..n).map(|i| EdgeDef::new(i, i + 1, ModuleKind::Identity)).collect();
        build_graph(layers, edges, Activation::None).unwrap()
    }

    fn diamond() -> SuperNetGraph {
        let layers: Vec<LayerSpec> = (1..=4).map(|i| LayerSpec::new(i, vec![2])).collect();
        let edges = vec![
            EdgeDef::new(1, 2, ModuleKind::Identity),
            EdgeDef::new(1, 3, ModuleKind::Identity),
            EdgeDef::new(2, 4, ModuleKind::Identity),
            EdgeDef::new(3, 4, ModuleKind::Identity),
        ];
        build_graph(layers, edges, Activation::None).unwrap()
    }

    #[test]
    fn single_edge_at_logit_zero_is_a_fair_coin() {
        let g = chain(2);
        let dist = ArchitectureDistribution::new(&g, 0.0, 7);
        let mut rng = dist.worker_rng(0);
        let n = 100_000u64;
        let mut selected = 0u64;
        for _ in 0..n {
            let rec = sample_mask(&g, &dist, &mut rng);
            assert!((rec.log_prob - 0.5f64.ln()).abs() < 1e-12);
            assert_eq!(log_prob_of(&g, &dist, &rec.mask), Some(rec.log_prob));
            if rec.mask.get(0) {
                selected += 1;
            }
        }
        // 4 sigma band around p = 1/2.
        let se = (0.25 / n as f64).sqrt();
        let freq = selected as f64 / n as f64;
        assert!((freq - 0.5).abs() < 4.0 * se, "frequency {}", freq);
    }

    #[test]
    fn edge_with_unreachable_source_is_impossible() {
        let g = chain(3);
        let dist = ArchitectureDistribution::new(&g, 0.0, 0);
        // Select only the second edge: its source layer 2 is unreachable.
        let mask = Mask::from_edges(&g, &[(2, 3)]).unwrap();
        assert_eq!(log_prob_of(&g, &dist, &mask), None);
        assert!(grad_log_prob(&g, &dist, &mask).is_none());
    }

    #[test]
    fn forced_edges_carry_no_probability_factor() {
        let g = chain(3);
        let dist = ArchitectureDistribution::new(&g, 0.0, 0);
        // Deselecting edge 1 forces edge 2 off; only edge 1's factor counts.
        let mask = Mask::empty(&g);
        assert_eq!(log_prob_of(&g, &dist, &mask), Some(0.5f64.ln()));
    }

    #[test]
    fn sampled_masks_never_select_from_unreachable_sources() {
        let g = diamond();
        let mut dist = ArchitectureDistribution::new(&g, 0.0, 3);
        // Skew the logits so forcing happens often.
        dist.logits_mut()[0] = -2.0;
        dist.logits_mut()[1] = -2.0;
        dist.logits_mut()[2] = 2.0;
        let mut rng = dist.worker_rng(1);
        for _ in 0..10_000 {
            let rec = sample_mask(&g, &dist, &mut rng);
            let reach = g.reachable_from_input(&rec.mask);
            for (idx, e) in g.edges().iter().enumerate() {
                if rec.mask.get(idx) {
                    assert!(reach[e.src - 1], "edge {}->{} selected while dead", e.src, e.dst);
                }
            }
            // Replay matches the recorded log-probability bit for bit.
            assert_eq!(log_prob_of(&g, &dist, &rec.mask), Some(rec.log_prob));
        }
    }

    #[test]
    fn enumerated_probabilities_sum_to_one_and_match_frequencies() {
        let g = diamond();
        let logits = vec![0.8, -0.4, 0.3, -1.1];
        let dist = ArchitectureDistribution::from_logits(logits, 11);
        let enumerated = enumerate_masks(&g, &dist, 12).unwrap();
        let total: f64 = enumerated.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-9, "total probability {}", total);

        // Monte-Carlo frequencies agree with the enumerated probabilities.
        let mut freq: BTreeMap<Vec<bool>, u64> = BTreeMap::new();
        let n = 200_000u64;
        let mut rng = dist.worker_rng(0);
        for _ in 0..n {
            let rec = sample_mask(&g, &dist, &mut rng);
            *freq.entry(rec.mask.bits().to_vec()).or_default() += 1;
        }
        for (mask, p) in &enumerated {
            let observed = freq.get(mask.bits()).copied().unwrap_or(0) as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt().max(1e-6);
            assert!(
                (observed - p).abs() < 5.0 * se,
                "mask {:?}: observed {} expected {}",
                mask.bits(),
                observed,
                p
            );
        }
        // Every observed mask is in the enumeration.
        assert_eq!(freq.len(), enumerated.len());
    }

    #[test]
    fn grad_log_prob_matches_finite_differences() {
        let g = diamond();
        let dist = ArchitectureDistribution::from_logits(vec![0.5, -0.7, 1.2, 0.1], 0);
        let mut rng = dist.worker_rng(2);
        for _ in 0..20 {
            let rec = sample_mask(&g, &dist, &mut rng);
            let grad = grad_log_prob(&g, &dist, &rec.mask).unwrap();
            let h = 1e-6;
            for e in 0..g.num_edges() {
                let mut up = dist.clone();
                up.logits_mut()[e] += h;
                let mut down = dist.clone();
                down.logits_mut()[e] -= h;
                let fd = (log_prob_of(&g, &up, &rec.mask).unwrap()
                    - log_prob_of(&g, &down, &rec.mask).unwrap())
                    / (2.0 * h);
                assert!((grad[e] - fd).abs() < 1e-6, "edge {}: {} vs {}", e, grad[e], fd);
            }
        }
    }

    #[test]
    fn forced_edges_get_zero_gradient() {
        let g = chain(3);
        let dist = ArchitectureDistribution::new(&g, 0.3, 0);
        let mask = Mask::empty(&g);
        let grad = grad_log_prob(&g, &dist, &mask).unwrap();
        assert!(grad[0] != 0.0);
        assert_eq!(grad[1], 0.0, "edge forced off by dead source");
    }

    #[test]
    fn entropy_is_zero_iff_deterministic() {
        let g = diamond();
        let spread = ArchitectureDistribution::new(&g, 0.0, 0);
        assert!(spread.entropy() > 0.0);
        assert!(!spread.is_deterministic());
        // Logits far past the clipping threshold count as deterministic.
        let hard = ArchitectureDistribution::from_logits(vec![20.0, -20.0, 20.0, 20.0], 0);
        assert_eq!(hard.entropy(), 0.0);
        assert!(hard.is_deterministic());
        let near = ArchitectureDistribution::from_logits(vec![20.0, -20.0, 20.0, 3.0], 0);
        assert!(near.entropy() > 0.0);
    }

    #[test]
    fn entropy_of_a_fair_edge_is_ln_two() {
        let g = chain(2);
        let dist = ArchitectureDistribution::new(&g, 0.0, 0);
        assert!((dist.entropy() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_text_round_trips() {
        let g = diamond();
        let dist = ArchitectureDistribution::from_logits(vec![0.25, -3.75, 1e-9, 42.0], 99);
        let text = dist.to_text(&g);
        let back = ArchitectureDistribution::from_text(&g, &text).unwrap();
        assert_eq!(dist, back);
    }

    #[test]
    fn checkpoint_rejects_missing_or_unknown_edges() {
        let g = diamond();
        let text = "supernet-dist v1\nseed 1\nlogit 1 2 0.5\n";
        assert!(ArchitectureDistribution::from_text(&g, text).is_err());
        let text = "supernet-dist v1\nseed 1\nlogit 9 9 0.5\n";
        assert!(ArchitectureDistribution::from_text(&g, text).is_err());
    }

    #[test]
    fn worker_streams_differ_but_reproduce() {
        let g = chain(2);
        let dist = ArchitectureDistribution::new(&g, 0.0, 123);
        let a: Vec<f64> = {
            let mut r = dist.worker_rng(0);
            (0..8).map(|_| r.gen::<f64>()).collect()
        };
        let a2: Vec<f64> = {
            let mut r = dist.worker_rng(0);
            (0..8).map(|_| r.gen::<f64>()).collect()
        };
        let b: Vec<f64> = {
            let mut r = dist.worker_rng(1);
            (0..8).map(|_| r.gen::<f64>()).collect()
        };
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }

    #[test]
    fn argmax_mask_selects_probable_edges() {
        let dist = ArchitectureDistribution::from_logits(vec![1.0, -0.5, 0.0, 2.0], 0);
        let m = dist.argmax_mask();
        assert_eq!(m.bits(), &[true, false, true, true]);
    }
}
