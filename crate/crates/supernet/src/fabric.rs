//! Graph family generators.
//!
//! Two search spaces plus a benchmark helper:
//!
//! - [`resnet_fabric`]: a grid of residual blocks in `groups` rows of
//!   halving resolution and doubling width, densely wired across rows.
//!   The straight path through it is exactly a standard residual net, so
//!   published cost figures for those nets pin down the cost models.
//! - [`cnf`]: a convolutional fabric, a columns-by-scales grid where every
//!   node mixes same-scale, coarser, and finer inputs.
//! - [`parallel_chains_graph`]: independent module chains between input
//!   and output, the classic scheduling demo.
//!
//! Each family has a `*_toy` variant that shrinks filter counts and
//! resolution while keeping the exact topology and attaching the
//! full-size cost figures as overrides, so budget experiments on desk
//! hardware see full-scale cost landscapes.

use crate::cost::derive_cost;
use crate::error::{Error, Result};
use crate::graph::{
    build_graph, Activation, EdgeDef, LayerSpec, Mask, ModuleKind, SuperNetGraph,
};

/// Residual fabric dimensions. `blocks_per_group = n` gives a straight
/// path equal to a depth `6n + 2` residual network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResNetFabricSpec {
    pub groups: usize,
    pub blocks_per_group: usize,
    pub base_filters: usize,
    /// (channels, height, width) of the input image.
    pub input: (usize, usize, usize),
    pub classes: usize,
}

impl ResNetFabricSpec {
    /// The standard image-classification configuration: 3 groups starting
    /// at 16 filters on 32x32 inputs.
    pub fn cifar(blocks_per_group: usize, classes: usize) -> Self {
        Self {
            groups: 3,
            blocks_per_group,
            base_filters: 16,
            input: (3, 32, 32),
            classes,
        }
    }
}

/// Grid layout: group 1 holds positions 0..=n (position 0 receives the
/// stem convolution), groups 2.. hold positions 1..=n.
fn fabric_layer_id(spec: &ResNetFabricSpec, group: usize, pos: usize) -> usize {
    let n = spec.blocks_per_group;
    if group == 1 {
        2 + pos
    } else {
        n + 2 + (group - 2) * n + pos
    }
}

fn fabric_parts(
    spec: &ResNetFabricSpec,
    filters: usize,
    input: (usize, usize, usize),
) -> Result<(Vec<LayerSpec>, Vec<EdgeDef>)> {
    let (in_ch, h, w) = input;
    let n = spec.blocks_per_group;
    let k = spec.groups;
    if k == 0 || n == 0 || filters == 0 || spec.classes == 0 || in_ch == 0 {
        return Err(Error::InvalidConfig("fabric dimensions must all be positive".into()));
    }
    let shrink = 1usize << (k - 1);
    if h % shrink != 0 || w % shrink != 0 || h / shrink == 0 || w / shrink == 0 {
        return Err(Error::InvalidConfig(format!(
            "input {}x{} cannot be halved {} times",
            h,
            w,
            k - 1
        )));
    }

    let ch = |g: usize| filters << (g - 1);
    let shape = |g: usize| vec![ch(g), h >> (g - 1), w >> (g - 1)];

    let mut layers = vec![LayerSpec::new(1, vec![in_ch, h, w])];
    for pos in 0..=n {
        layers.push(LayerSpec::new(fabric_layer_id(spec, 1, pos), shape(1)));
    }
    for g in 2..=k {
        for pos in 1..=n {
            layers.push(LayerSpec::new(fabric_layer_id(spec, g, pos), shape(g)));
        }
    }
    let output_id = fabric_layer_id(spec, k, n) + 1;
    layers.push(LayerSpec::new(output_id, vec![spec.classes]));

    let block = |src_g: usize, dst_g: usize| ModuleKind::BasicBlock {
        in_ch: ch(src_g),
        out_ch: ch(dst_g),
        stride: if src_g == dst_g { 1 } else { 2 },
    };

    let mut edges = Vec::new();
    // Stem convolution into the top-left corner.
    edges.push(EdgeDef::new(
        1,
        fabric_layer_id(spec, 1, 0),
        ModuleKind::Conv2d { in_ch, out_ch: ch(1), kernel: 3, stride: 1, padding: 1 },
    ));
    // Within-row chains.
    for pos in 1..=n {
        edges.push(EdgeDef::new(
            fabric_layer_id(spec, 1, pos - 1),
            fabric_layer_id(spec, 1, pos),
            block(1, 1),
        ));
    }
    for g in 2..=k {
        for pos in 2..=n {
            edges.push(EdgeDef::new(
                fabric_layer_id(spec, g, pos - 1),
                fabric_layer_id(spec, g, pos),
                block(g, g),
            ));
        }
    }
    // Cross-row wiring. The first position of a row takes the end of the
    // previous row plus a vertical edge; interior positions add a
    // diagonal; the last position takes chain plus vertical only.
    for g in 1..k {
        if n > 1 {
            edges.push(EdgeDef::new(
                fabric_layer_id(spec, g, n),
                fabric_layer_id(spec, g + 1, 1),
                block(g, g + 1),
            ));
        }
        for pos in 1..=n {
            edges.push(EdgeDef::new(
                fabric_layer_id(spec, g, pos),
                fabric_layer_id(spec, g + 1, pos),
                block(g, g + 1),
            ));
        }
        for pos in 2..n {
            edges.push(EdgeDef::new(
                fabric_layer_id(spec, g, pos - 1),
                fabric_layer_id(spec, g + 1, pos),
                block(g, g + 1),
            ));
        }
    }
    // Pooled classification head.
    edges.push(EdgeDef::new(
        fabric_layer_id(spec, k, n),
        output_id,
        ModuleKind::Dense { in_dim: ch(k), out_dim: spec.classes },
    ));
    Ok((layers, edges))
}

/// Builds the residual fabric at full size.
pub fn resnet_fabric(spec: &ResNetFabricSpec) -> Result<SuperNetGraph> {
    let (layers, edges) = fabric_parts(spec, spec.base_filters, spec.input)?;
    build_graph(layers, edges, Activation::Relu)
}

/// Builds the residual fabric at reduced filter count and resolution,
/// carrying the full-size cost figures as per-edge overrides.
pub fn resnet_fabric_toy(
    spec: &ResNetFabricSpec,
    toy_filters: usize,
    toy_input: (usize, usize, usize),
) -> Result<SuperNetGraph> {
    let (full_layers, full_edges) = fabric_parts(spec, spec.base_filters, spec.input)?;
    let (toy_layers, toy_edges) = fabric_parts(spec, toy_filters, toy_input)?;
    build_graph(toy_layers, carry_costs(&full_layers, &full_edges, toy_edges), Activation::Relu)
}

/// Attaches each full-size edge's derived cost to the matching toy edge.
/// Both edge lists come from the same builder, so they pair one-to-one.
fn carry_costs(
    full_layers: &[LayerSpec],
    full_edges: &[EdgeDef],
    toy_edges: Vec<EdgeDef>,
) -> Vec<EdgeDef> {
    assert_eq!(full_edges.len(), toy_edges.len());
    full_edges
        .iter()
        .zip(toy_edges)
        .map(|(full, toy)| {
            debug_assert_eq!((full.src, full.dst), (toy.src, toy.dst));
            let src_shape = &full_layers[full.src - 1].shape;
            toy.with_cost(derive_cost(&full.kind, src_shape))
        })
        .collect()
}

/// Edges of the straight residual path through the fabric: stem, each
/// row's chain, the row-to-row transitions, and the head.
fn spine_pairs(spec: &ResNetFabricSpec) -> Vec<(usize, usize)> {
    let n = spec.blocks_per_group;
    let k = spec.groups;
    let mut pairs = vec![(1, fabric_layer_id(spec, 1, 0))];
    for pos in 1..=n {
        pairs.push((fabric_layer_id(spec, 1, pos - 1), fabric_layer_id(spec, 1, pos)));
    }
    for g in 2..=k {
        pairs.push((fabric_layer_id(spec, g - 1, n), fabric_layer_id(spec, g, 1)));
        for pos in 2..=n {
            pairs.push((fabric_layer_id(spec, g, pos - 1), fabric_layer_id(spec, g, pos)));
        }
    }
    pairs.push((fabric_layer_id(spec, k, n), fabric_layer_id(spec, k, n) + 1));
    pairs
}

/// Mask selecting the straight residual path (depth `6n + 2`) inside a
/// fabric built from `spec` (full-size or toy).
pub fn resnet_spine_mask(g: &SuperNetGraph, spec: &ResNetFabricSpec) -> Result<Mask> {
    Mask::from_edges(g, &spine_pairs(spec))
}

/// What hangs off a convolutional fabric's last column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CnfTask {
    /// Funnel down to the coarsest scale, classify from there.
    Classify,
    /// Funnel up to the finest scale, emit a per-pixel map.
    Segment,
}

/// Convolutional fabric dimensions: `columns` processing columns over
/// `scales` resolutions (halving per scale), constant filter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CnfSpec {
    pub columns: usize,
    pub scales: usize,
    pub filters: usize,
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub task: CnfTask,
}

impl CnfSpec {
    /// The standard classification configuration: 6 scales of 128 filters
    /// on 32x32 inputs.
    pub fn cifar(columns: usize, classes: usize) -> Self {
        Self {
            columns,
            scales: 6,
            filters: 128,
            input: (3, 32, 32),
            classes,
            task: CnfTask::Classify,
        }
    }
}

fn cnf_node_id(spec: &CnfSpec, col: usize, scale: usize) -> usize {
    1 + (col - 1) * spec.scales + scale
}

fn cnf_parts(
    spec: &CnfSpec,
    filters: usize,
    input: (usize, usize, usize),
) -> Result<(Vec<LayerSpec>, Vec<EdgeDef>)> {
    let (in_ch, h, w) = input;
    let cols = spec.columns;
    let scales = spec.scales;
    if cols == 0 || scales == 0 || filters == 0 || spec.classes == 0 || in_ch == 0 {
        return Err(Error::InvalidConfig("fabric dimensions must all be positive".into()));
    }
    let shrink = 1usize << (scales - 1);
    if h % shrink != 0 || w % shrink != 0 || h / shrink == 0 || w / shrink == 0 {
        return Err(Error::InvalidConfig(format!(
            "input {}x{} cannot be halved {} times",
            h,
            w,
            scales - 1
        )));
    }
    if spec.task == CnfTask::Segment && cols < 2 {
        return Err(Error::InvalidConfig(
            "per-pixel output needs at least two columns: one column cannot run \
             both coarsening and refining vertical edges"
                .into(),
        ));
    }

    let shape = |s: usize| vec![filters, h >> (s - 1), w >> (s - 1)];
    let mut layers = vec![LayerSpec::new(1, vec![in_ch, h, w])];
    for c in 1..=cols {
        for s in 1..=scales {
            layers.push(LayerSpec::new(cnf_node_id(spec, c, s), shape(s)));
        }
    }
    let output_id = 1 + cols * scales + 1;
    match spec.task {
        CnfTask::Classify => layers.push(LayerSpec::new(output_id, vec![spec.classes])),
        CnfTask::Segment => layers.push(LayerSpec::new(output_id, vec![spec.classes, h, w])),
    }

    let same = ModuleKind::Conv2d { in_ch: filters, out_ch: filters, kernel: 3, stride: 1, padding: 1 };
    let down = ModuleKind::DownsampleConv { in_ch: filters, out_ch: filters, kernel: 3 };
    let up = ModuleKind::UpsampleConv { in_ch: filters, out_ch: filters, kernel: 3 };

    let mut edges = vec![EdgeDef::new(
        1,
        cnf_node_id(spec, 1, 1),
        ModuleKind::Conv2d { in_ch, out_ch: filters, kernel: 3, stride: 1, padding: 1 },
    )];
    // First column seeds every scale.
    for s in 1..scales {
        edges.push(EdgeDef::new(cnf_node_id(spec, 1, s), cnf_node_id(spec, 1, s + 1), down));
    }
    // Column-to-column mixing: same scale, one coarser, one finer.
    for c in 1..cols {
        for s in 1..=scales {
            edges.push(EdgeDef::new(cnf_node_id(spec, c, s), cnf_node_id(spec, c + 1, s), same));
        }
        for s in 2..=scales {
            edges.push(EdgeDef::new(cnf_node_id(spec, c, s - 1), cnf_node_id(spec, c + 1, s), down));
        }
        for s in 1..scales {
            edges.push(EdgeDef::new(cnf_node_id(spec, c, s + 1), cnf_node_id(spec, c + 1, s), up));
        }
    }
    // Last column funnels toward the task head. With a single column the
    // seeding edges already run in the head's direction.
    match spec.task {
        CnfTask::Classify => {
            if cols > 1 {
                for s in 1..scales {
                    edges.push(EdgeDef::new(
                        cnf_node_id(spec, cols, s),
                        cnf_node_id(spec, cols, s + 1),
                        down,
                    ));
                }
            }
            edges.push(EdgeDef::new(
                cnf_node_id(spec, cols, scales),
                output_id,
                ModuleKind::Dense { in_dim: filters, out_dim: spec.classes },
            ));
        }
        CnfTask::Segment => {
            for s in 1..scales {
                edges.push(EdgeDef::new(
                    cnf_node_id(spec, cols, s + 1),
                    cnf_node_id(spec, cols, s),
                    up,
                ));
            }
            edges.push(EdgeDef::new(
                cnf_node_id(spec, cols, 1),
                output_id,
                ModuleKind::Conv2d {
                    in_ch: filters,
                    out_ch: spec.classes,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                },
            ));
        }
    }
    Ok((layers, edges))
}

/// Builds the convolutional fabric at full size.
pub fn cnf(spec: &CnfSpec) -> Result<SuperNetGraph> {
    let (layers, edges) = cnf_parts(spec, spec.filters, spec.input)?;
    build_graph(layers, edges, Activation::Relu)
}

/// Builds the convolutional fabric at reduced filter count and
/// resolution, carrying full-size cost figures as per-edge overrides.
pub fn cnf_toy(
    spec: &CnfSpec,
    toy_filters: usize,
    toy_input: (usize, usize, usize),
) -> Result<SuperNetGraph> {
    let (full_layers, full_edges) = cnf_parts(spec, spec.filters, spec.input)?;
    let scaled = CnfSpec { input: toy_input, ..*spec };
    let (toy_layers, toy_edges) = cnf_parts(&scaled, toy_filters, toy_input)?;
    build_graph(toy_layers, carry_costs(&full_layers, &full_edges, toy_edges), Activation::Relu)
}

/// Independent chains of single-unit modules between input and output;
/// `lengths[i]` is the module count of chain i. The classic scheduling
/// benchmark: on two machines, chains (6, 3) need 6 cycles while the
/// module-richer (5, 5) needs only 5.
pub fn parallel_chains_graph(lengths: &[usize]) -> Result<SuperNetGraph> {
    if lengths.is_empty() {
        return Err(Error::EmptyInput("at least one chain".into()));
    }
    if lengths.contains(&0) {
        return Err(Error::InvalidConfig("chain length must be at least 1".into()));
    }
    if lengths.iter().filter(|&&l| l == 1).count() > 1 {
        return Err(Error::InvalidConfig(
            "at most one length-1 chain: two would duplicate the input-output edge".into(),
        ));
    }
    let interior: usize = lengths.iter().map(|&l| l - 1).sum();
    let output_id = interior + 2;
    let layers: Vec<LayerSpec> = (1..=output_id).map(|i| LayerSpec::new(i, vec![1])).collect();
    let module = ModuleKind::Dense { in_dim: 1, out_dim: 1 };
    let mut edges = Vec::new();
    let mut next = 2;
    for &len in lengths {
        let mut prev = 1;
        for _ in 0..len - 1 {
            edges.push(EdgeDef::new(prev, next, module));
            prev = next;
            next += 1;
        }
        edges.push(EdgeDef::new(prev, output_id, module));
    }
    build_graph(layers, edges, Activation::None)
}

/// Stack of dense layers with widths `dims` (input first, classes
/// last). Consecutive layers are always wired; `complete` adds every
/// forward skip edge, giving `k(k-1)/2` edges over `k` layers. The
/// 4-layer complete stack is the 6-edge search space used by the small
/// optimality and sweep experiments.
pub fn dense_stack(dims: &[usize], complete: bool) -> Result<SuperNetGraph> {
    if dims.len() < 2 {
        return Err(Error::InvalidConfig("dense_stack needs at least input and output widths".into()));
    }
    let layers: Vec<LayerSpec> =
        dims.iter().enumerate().map(|(i, &d)| LayerSpec::new(i + 1, vec![d])).collect();
    let mut edges = Vec::new();
    for i in 1..=dims.len() {
        for j in i + 1..=dims.len() {
            if j == i + 1 || complete {
                edges.push(EdgeDef::new(
                    i,
                    j,
                    ModuleKind::Dense { in_dim: dims[i - 1], out_dim: dims[j - 1] },
                ));
            }
        }
    }
    build_graph(layers, edges, Activation::Relu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::{ssn_forward, Tape};
    use crate::cost::{flops_cost, params_cost};
    use crate::params::ParameterStore;
    use crate::schedule::{distributed_cost, validate_schedule, SchedulePolicy};
    use crate::tensor::Tensor;

    /// Straight-path cost figures: (blocks per group, Mult-Adds, params,
    /// published Mult-Adds, published params). Published values are in
    /// units of 10^6 and correspond to residual nets of depth 6n + 2.
    const RESNET_TABLE: [(usize, u64, u64, f64, f64); 5] = [
        (3, 40_813_184, 271_690, 40.90e6, 0.27e6),
        (5, 69_124_736, 465_674, 69.27e6, 0.47e6),
        (7, 97_436_288, 659_658, 97.64e6, 0.66e6),
        (9, 125_747_840, 853_642, 126.01e6, 0.86e6),
        (18, 253_149_824, 1_726_570, 253.70e6, 1.73e6),
    ];

    /// Full-fabric cost figures for the convolutional fabric:
    /// (columns, Mult-Adds, published Mult-Adds).
    const CNF_FLOPS: [(usize, u64, f64); 4] = [
        (1, 53_822_720, 54.0e6),
        (2, 405_947_648, 406.0e6),
        (4, 1_009_632_512, 1010.0e6),
        (8, 2_217_002_240, 2219.0e6),
    ];

    fn rel_err(got: u64, want: f64) -> f64 {
        (got as f64 - want).abs() / want
    }

    #[test]
    fn fabric_edge_and_layer_counts() {
        let spec = ResNetFabricSpec::cifar(3, 10);
        let g = resnet_fabric(&spec).unwrap();
        // 1 input + (n+1) + n + n grid nodes + 1 output.
        assert_eq!(g.num_layers(), 12);
        // stem + chains (3 + 2 + 2) + transitions 2 + verticals 6 +
        // diagonals 2 + head.
        assert_eq!(g.num_edges(), 19);
    }

    #[test]
    fn fabric_row_in_degrees_match_the_two_three_two_pattern() {
        let spec = ResNetFabricSpec::cifar(4, 10);
        let g = resnet_fabric(&spec).unwrap();
        for group in 2..=3 {
            let degs: Vec<usize> = (1..=4)
                .map(|pos| g.incoming(fabric_layer_id(&spec, group, pos)).len())
                .collect();
            assert_eq!(degs, vec![2, 3, 3, 2], "group {}", group);
        }
    }

    #[test]
    fn single_block_rows_merge_transition_and_vertical() {
        let spec = ResNetFabricSpec::cifar(1, 10);
        let g = resnet_fabric(&spec).unwrap();
        // input, v10, v11, v21, v31, output.
        assert_eq!(g.num_layers(), 6);
        // stem + 1 chain + 2 cross + head; no duplicate pairs.
        assert_eq!(g.num_edges(), 5);
        let spine = resnet_spine_mask(&g, &spec).unwrap();
        assert_eq!(spine.count_selected(), 5);
    }

    #[test]
    fn spine_reproduces_published_residual_costs() {
        for (n, flops, params, pub_flops, pub_params) in RESNET_TABLE {
            let spec = ResNetFabricSpec::cifar(n, 10);
            let g = resnet_fabric(&spec).unwrap();
            let spine = resnet_spine_mask(&g, &spec).unwrap();
            assert!(g.is_output_connected(&spine));
            // Stem + 3n blocks + head.
            assert_eq!(spine.count_selected(), 3 * n + 2);
            assert_eq!(flops_cost(&g, &spine), flops, "n={}", n);
            assert_eq!(params_cost(&g, &spine), params, "n={}", n);
            assert!(rel_err(flops, pub_flops) < 0.02, "n={} flops", n);
            assert!(rel_err(params, pub_params) < 0.02, "n={} params", n);
        }
    }

    #[test]
    fn spine_sequential_schedule_length_equals_network_depth() {
        for n in [3, 18] {
            let spec = ResNetFabricSpec::cifar(n, 10);
            let g = resnet_fabric(&spec).unwrap();
            let spine = resnet_spine_mask(&g, &spec).unwrap();
            let s = distributed_cost(&g, &spine, 1, SchedulePolicy::GreedyList).unwrap();
            // Stem 1 + two cycles per block + head 1 = 6n + 2.
            assert_eq!(s.makespan as usize, 6 * n + 2);
            validate_schedule(&g, &spine, 1, &s).unwrap();
        }
    }

    #[test]
    fn toy_fabric_keeps_topology_and_full_size_costs() {
        let spec = ResNetFabricSpec::cifar(3, 10);
        let full = resnet_fabric(&spec).unwrap();
        let toy = resnet_fabric_toy(&spec, 2, (3, 8, 8)).unwrap();
        assert_eq!(full.num_edges(), toy.num_edges());
        assert_eq!(full.num_layers(), toy.num_layers());
        for e in 0..full.num_edges() {
            assert_eq!(
                (full.edge(e).src, full.edge(e).dst),
                (toy.edge(e).src, toy.edge(e).dst)
            );
        }
        let spine = resnet_spine_mask(&toy, &spec).unwrap();
        assert_eq!(flops_cost(&toy, &spine), 40_813_184);
        assert_eq!(params_cost(&toy, &spine), 271_690);
        assert_eq!(flops_cost(&toy, &Mask::full(&toy)), flops_cost(&full, &Mask::full(&full)));
    }

    #[test]
    fn toy_fabric_actually_runs_forward() {
        let spec = ResNetFabricSpec::cifar(2, 10);
        let toy = resnet_fabric_toy(&spec, 2, (3, 8, 8)).unwrap();
        let params = ParameterStore::init_for_graph(&toy, 0);
        let x = Tensor::new(vec![3, 8, 8], vec![0.1; 3 * 64]).unwrap();
        let mut tape = Tape::new();
        let out = ssn_forward(&toy, &Mask::full(&toy), x, &params, &mut tape).unwrap();
        let y = tape.value(out);
        assert_eq!(y.shape(), &[10]);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fabric_rejects_inputs_that_cannot_halve() {
        let spec = ResNetFabricSpec { input: (3, 30, 30), ..ResNetFabricSpec::cifar(3, 10) };
        assert!(resnet_fabric(&spec).is_err());
    }

    #[test]
    fn cnf_reproduces_published_costs() {
        for (cols, flops, published) in CNF_FLOPS {
            let spec = CnfSpec::cifar(cols, 10);
            let g = cnf(&spec).unwrap();
            let full = Mask::full(&g);
            assert_eq!(flops_cost(&g, &full), flops, "columns={}", cols);
            assert!(rel_err(flops, published) < 0.05, "columns={}", cols);
        }
        let spec = CnfSpec::cifar(8, 10);
        let g = cnf(&spec).unwrap();
        let params = params_cost(&g, &Mask::full(&g));
        assert_eq!(params, 18_010_122);
        assert!(rel_err(params, 18.04e6) < 0.05);
    }

    #[test]
    fn cnf_interior_nodes_mix_three_scales() {
        let spec = CnfSpec::cifar(4, 10);
        let g = cnf(&spec).unwrap();
        // Interior: same + down + up.
        assert_eq!(g.incoming(cnf_node_id(&spec, 3, 3)).len(), 3);
        // Finest scale: same + up.
        assert_eq!(g.incoming(cnf_node_id(&spec, 3, 1)).len(), 2);
        // Coarsest scale: same + down (plus the funnel in the last column).
        assert_eq!(g.incoming(cnf_node_id(&spec, 3, 6)).len(), 2);
        assert_eq!(g.incoming(cnf_node_id(&spec, 4, 6)).len(), 3);
        // First column is a chain.
        assert_eq!(g.incoming(cnf_node_id(&spec, 1, 3)).len(), 1);
    }

    #[test]
    fn cnf_segment_emits_per_pixel_output() {
        let spec = CnfSpec {
            columns: 3,
            scales: 4,
            filters: 4,
            input: (3, 8, 8),
            classes: 5,
            task: CnfTask::Segment,
        };
        let g = cnf(&spec).unwrap();
        assert_eq!(g.layer(g.output_id()).shape, vec![5, 8, 8]);
        let params = ParameterStore::init_for_graph(&g, 1);
        let x = Tensor::new(vec![3, 8, 8], vec![0.05; 3 * 64]).unwrap();
        let mut tape = Tape::new();
        let out = ssn_forward(&g, &Mask::full(&g), x, &params, &mut tape).unwrap();
        assert_eq!(tape.value(out).shape(), &[5, 8, 8]);
    }

    #[test]
    fn cnf_segment_needs_two_columns() {
        let spec = CnfSpec {
            columns: 1,
            scales: 4,
            filters: 4,
            input: (3, 8, 8),
            classes: 5,
            task: CnfTask::Segment,
        };
        assert!(cnf(&spec).is_err());
    }

    #[test]
    fn cnf_toy_carries_full_costs() {
        let spec = CnfSpec::cifar(2, 10);
        let toy = cnf_toy(&spec, 4, (3, 32, 32)).unwrap();
        assert_eq!(flops_cost(&toy, &Mask::full(&toy)), 405_947_648);
        let full = cnf(&spec).unwrap();
        assert_eq!(toy.num_edges(), full.num_edges());
    }

    #[test]
    fn generators_are_deterministic() {
        let spec = ResNetFabricSpec::cifar(3, 10);
        assert_eq!(resnet_fabric(&spec).unwrap().to_text(), resnet_fabric(&spec).unwrap().to_text());
        let cspec = CnfSpec::cifar(2, 10);
        assert_eq!(cnf(&cspec).unwrap().to_text(), cnf(&cspec).unwrap().to_text());
    }

    #[test]
    fn parallel_chains_match_the_scheduling_demo() {
        // Nine modules never beat 6 cycles on two machines, while ten
        // well-balanced modules finish in 5.
        let nine = parallel_chains_graph(&[6, 3]).unwrap();
        assert_eq!(nine.num_edges(), 9);
        let h = Mask::full(&nine);
        for policy in [SchedulePolicy::GreedyList, SchedulePolicy::BruteForceOptimal] {
            let s = distributed_cost(&nine, &h, 2, policy).unwrap();
            assert_eq!(s.makespan, 6);
            validate_schedule(&nine, &h, 2, &s).unwrap();
        }
        let ten = parallel_chains_graph(&[5, 5]).unwrap();
        assert_eq!(ten.num_edges(), 10);
        let h = Mask::full(&ten);
        for policy in [SchedulePolicy::GreedyList, SchedulePolicy::BruteForceOptimal] {
            let s = distributed_cost(&ten, &h, 2, policy).unwrap();
            assert_eq!(s.makespan, 5);
            validate_schedule(&ten, &h, 2, &s).unwrap();
        }
    }

    #[test]
    fn parallel_chains_reject_degenerate_inputs() {
        assert!(parallel_chains_graph(&[]).is_err());
        assert!(parallel_chains_graph(&[3, 0]).is_err());
        assert!(parallel_chains_graph(&[1, 1]).is_err());
        assert!(parallel_chains_graph(&[1, 3]).is_ok());
    }

    #[test]
    fn dense_stack_wires_chain_and_skips() {
        let chain = dense_stack(&[2, 4, 2], false).unwrap();
        assert_eq!(chain.num_edges(), 2);

        let g = dense_stack(&[2, 4, 4, 2], true).unwrap();
        assert_eq!(g.num_edges(), 6);
        for e in g.edges() {
            let (src_w, dst_w) = (g.layer(e.src).shape[0], g.layer(e.dst).shape[0]);
            match e.module.kind {
                ModuleKind::Dense { in_dim, out_dim } => {
                    assert_eq!((in_dim, out_dim), (src_w, dst_w));
                }
                other => panic!("unexpected module {other:?}"),
            }
        }
        // 2*4 + 2*4 + 2*2 + 4*4 + 4*2 + 4*2 multiply-adds.
        assert_eq!(flops_cost(&g, &Mask::full(&g)), 52);

        assert!(dense_stack(&[2], true).is_err());
    }
}
