//! Super network graphs: DAGs whose edges carry neural modules.
//!
//! Layers are identified by 1-based ids. Layer 1 is the network input and
//! layer N is the output. Every edge (src, dst) holds one module that maps
//! the source layer's shape onto the destination layer's shape; a layer's
//! value is the elementwise sum of its selected incoming edge outputs.
//!
//! Edges are stored sorted by (destination id, source id). That index
//! order is the canonical edge order used by masks, sampling logits,
//! parameter slot assignment, and the text format.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a parameter tensor inside a [`crate::params::ParameterStore`].
pub type ParamSlot = usize;

/// One layer of the DAG.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// 1-based id; ids are contiguous and layer 1 / layer N are fixed as
    /// input / output.
    pub id: usize,
    /// Value shape, e.g. `[features]` or `[channels, height, width]`.
    pub shape: Vec<usize>,
}

impl LayerSpec {
    pub fn new(id: usize, shape: Vec<usize>) -> Self {
        Self { id, shape }
    }
}

/// Elementwise activation applied after summing a layer's incoming edges.
///
/// Applied at internal layers only (never at the input or output layer).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
}

/// Module placed on an edge, with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModuleKind {
    /// Shape-preserving passthrough. No parameters, no cost.
    Identity,
    /// Fully connected map. A spatial input `[c,h,w]` with `c == in_dim`
    /// is globally average-pooled to `[c]` first.
    Dense { in_dim: usize, out_dim: usize },
    /// 2-D cross-correlation plus bias.
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize },
    /// 1x1 convolution used to change channel count and/or stride.
    Projection { in_ch: usize, out_ch: usize, stride: usize },
    /// Stride-2 convolution with padding `kernel / 2`; halves resolution.
    DownsampleConv { in_ch: usize, out_ch: usize, kernel: usize },
    /// Stride-2 transposed convolution; doubles resolution. Kernel must be
    /// odd; output is exactly twice the input resolution.
    UpsampleConv { in_ch: usize, out_ch: usize, kernel: usize },
    /// Two stacked 3x3 convolutions with a residual shortcut. The first
    /// convolution applies `stride`; the shortcut is the identity when the
    /// input and output shapes agree, otherwise a 1x1 projection with the
    /// same stride.
    BasicBlock { in_ch: usize, out_ch: usize, stride: usize },
}

impl ModuleKind {
    /// True when the residual shortcut inside a `BasicBlock` needs a
    /// projection (shape change across the block).
    pub fn block_needs_projection(&self) -> bool {
        match self {
            ModuleKind::BasicBlock { in_ch, out_ch, stride } => in_ch != out_ch || *stride != 1,
            _ => false,
        }
    }

    /// Parameter tensor shapes in slot-role order.
    ///
    /// Dense/conv-like kinds use `[weight, bias]`. `BasicBlock` uses
    /// `[w1, b1, w2, b2]` plus `[wp, bp]` when the shortcut projects.
    /// Transposed convolution weights are stored `[in, out, k, k]`; all
    /// other convolution weights are `[out, in, k, k]`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            ModuleKind::Identity => vec![],
            ModuleKind::Dense { in_dim, out_dim } => vec![vec![out_dim, in_dim], vec![out_dim]],
            ModuleKind::Conv2d { in_ch, out_ch, kernel, .. }
            | ModuleKind::DownsampleConv { in_ch, out_ch, kernel } => {
                vec![vec![out_ch, in_ch, kernel, kernel], vec![out_ch]]
            }
            ModuleKind::UpsampleConv { in_ch, out_ch, kernel } => {
                vec![vec![in_ch, out_ch, kernel, kernel], vec![out_ch]]
            }
            ModuleKind::Projection { in_ch, out_ch, .. } => {
                vec![vec![out_ch, in_ch, 1, 1], vec![out_ch]]
            }
            ModuleKind::BasicBlock { in_ch, out_ch, .. } => {
                let mut shapes = vec![
                    vec![out_ch, in_ch, 3, 3],
                    vec![out_ch],
                    vec![out_ch, out_ch, 3, 3],
                    vec![out_ch],
                ];
                if self.block_needs_projection() {
                    shapes.push(vec![out_ch, in_ch, 1, 1]);
                    shapes.push(vec![out_ch]);
                }
                shapes
            }
        }
    }

    /// Output shape produced from `input`, or why the input is unusable.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        fn conv_out(h: usize, w: usize, k: usize, s: usize, p: usize) -> std::result::Result<(usize, usize), String> {
            if s == 0 {
                return Err("stride must be positive".into());
            }
            if h + 2 * p < k || w + 2 * p < k {
                return Err(format!("kernel {} exceeds padded input {}x{}", k, h + 2 * p, w + 2 * p));
            }
            Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
        }
        fn spatial(input: &[usize], in_ch: usize) -> std::result::Result<(usize, usize), String> {
            match input {
                [c, h, w] if *c == in_ch => Ok((*h, *w)),
                [c, _, _] => Err(format!("expected {} input channels, got {}", in_ch, c)),
                _ => Err(format!("expected a [c,h,w] input, got {:?}", input)),
            }
        }
        match *self {
            ModuleKind::Identity => Ok(input.to_vec()),
            ModuleKind::Dense { in_dim, out_dim } => match input {
                [n] if *n == in_dim => Ok(vec![out_dim]),
                [c, _, _] if *c == in_dim => Ok(vec![out_dim]),
                _ => Err(format!("dense expects [{}] or [{},h,w], got {:?}", in_dim, in_dim, input)),
            },
            ModuleKind::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
                let (h, w) = spatial(input, in_ch)?;
                let (oh, ow) = conv_out(h, w, kernel, stride, padding)?;
                Ok(vec![out_ch, oh, ow])
            }
            ModuleKind::Projection { in_ch, out_ch, stride } => {
                let (h, w) = spatial(input, in_ch)?;
                let (oh, ow) = conv_out(h, w, 1, stride, 0)?;
                Ok(vec![out_ch, oh, ow])
            }
            ModuleKind::DownsampleConv { in_ch, out_ch, kernel } => {
                let (h, w) = spatial(input, in_ch)?;
                let (oh, ow) = conv_out(h, w, kernel, 2, kernel / 2)?;
                Ok(vec![out_ch, oh, ow])
            }
            ModuleKind::UpsampleConv { in_ch, out_ch, kernel } => {
                if kernel % 2 == 0 {
                    return Err("transposed convolution kernel must be odd".into());
                }
                let (h, w) = spatial(input, in_ch)?;
                Ok(vec![out_ch, 2 * h, 2 * w])
            }
            ModuleKind::BasicBlock { in_ch, out_ch, stride } => {
                let (h, w) = spatial(input, in_ch)?;
                let (oh, ow) = conv_out(h, w, 3, stride, 1)?;
                Ok(vec![out_ch, oh, ow])
            }
        }
    }
}

/// Fixed cost figures attached to an edge, overriding the figures derived
/// from the module's hyperparameters. Lets a topology carry full-scale
/// cost metadata while the runtime modules stay small.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostMeta {
    pub flops: u64,
    pub params: u64,
    pub cycles: u32,
}

/// A module bound to an edge, with its assigned parameter slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleSpec {
    pub kind: ModuleKind,
    /// Slots in the role order of [`ModuleKind::param_shapes`]; empty for
    /// `Identity`.
    pub param_slots: Vec<ParamSlot>,
    pub cost_override: Option<CostMeta>,
}

/// One directed edge of the super network.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub module: ModuleSpec,
}

/// Edge description consumed by [`build_graph`]; parameter slots are
/// assigned by the builder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeDef {
    pub src: usize,
    pub dst: usize,
    #[serde(flatten)]
    pub kind: ModuleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_override: Option<CostMeta>,
}

impl EdgeDef {
    pub fn new(src: usize, dst: usize, kind: ModuleKind) -> Self {
        Self { src, dst, kind, cost_override: None }
    }

    /// Declares the edge's cost metadata instead of deriving it from the
    /// module kind. Scaled-down graphs carry full-size costs this way.
    pub fn with_cost(mut self, cost: CostMeta) -> Self {
        self.cost_override = Some(cost);
        self
    }
}

/// Binary selection over the edges of one graph, in canonical edge order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    pub fn full(g: &SuperNetGraph) -> Self {
        Self { bits: vec![true; g.edges.len()] }
    }

    pub fn empty(g: &SuperNetGraph) -> Self {
        Self { bits: vec![false; g.edges.len()] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Mask selecting exactly the listed (src, dst) edges.
    pub fn from_edges(g: &SuperNetGraph, selected: &[(usize, usize)]) -> Result<Self> {
        let mut bits = vec![false; g.edges.len()];
        for &(src, dst) in selected {
            let idx = g.edge_index(src, dst).ok_or_else(|| {
                Error::Parse(format!("mask selects nonexistent edge {}->{}", src, dst))
            })?;
            bits[idx] = true;
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, edge: usize) -> bool {
        self.bits[edge]
    }

    pub fn set(&mut self, edge: usize, value: bool) {
        self.bits[edge] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_selected(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Validated super network DAG.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperNetGraph {
    layers: Vec<LayerSpec>,
    edges: Vec<Edge>,
    activation: Activation,
    /// Layer ids in a deterministic topological order (smallest id first
    /// among ready layers).
    topo: Vec<usize>,
    /// Per layer (0-based), incoming edge indices ascending by source id.
    incoming: Vec<Vec<usize>>,
    /// Per layer (0-based), outgoing edge indices ascending by destination id.
    outgoing: Vec<Vec<usize>>,
    num_slots: usize,
}

impl SuperNetGraph {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Number of parameter slots the graph's modules declare.
    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, idx: usize) -> &Edge {
        &self.edges[idx]
    }

    pub fn layer(&self, id: usize) -> &LayerSpec {
        &self.layers[id - 1]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_id(&self) -> usize {
        1
    }

    pub fn output_id(&self) -> usize {
        self.layers.len()
    }

    /// Layer ids in cached topological order.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// Incoming edge indices of a layer, ascending by source id.
    pub fn incoming(&self, layer_id: usize) -> &[usize] {
        &self.incoming[layer_id - 1]
    }

    /// Outgoing edge indices of a layer, ascending by destination id.
    pub fn outgoing(&self, layer_id: usize) -> &[usize] {
        &self.outgoing[layer_id - 1]
    }

    /// Canonical index of edge (src, dst) if present.
    pub fn edge_index(&self, src: usize, dst: usize) -> Option<usize> {
        self.edges.iter().position(|e| e.src == src && e.dst == dst)
    }

    /// Per-layer flags: reachable from the input layer via selected edges.
    pub fn reachable_from_input(&self, mask: &Mask) -> Vec<bool> {
        debug_assert_eq!(mask.len(), self.edges.len());
        let mut reach = vec![false; self.layers.len()];
        reach[0] = true;
        for &layer in &self.topo {
            if layer == 1 {
                continue;
            }
            reach[layer - 1] = self.incoming(layer).iter().any(|&e| {
                mask.get(e) && reach[self.edges[e].src - 1]
            });
        }
        reach
    }

    /// Per-layer flags: the output layer is reachable via selected edges.
    pub fn coreachable_to_output(&self, mask: &Mask) -> Vec<bool> {
        debug_assert_eq!(mask.len(), self.edges.len());
        let mut coreach = vec![false; self.layers.len()];
        let out = self.output_id();
        coreach[out - 1] = true;
        for &layer in self.topo.iter().rev() {
            if layer == out {
                continue;
            }
            coreach[layer - 1] = self.outgoing(layer).iter().any(|&e| {
                mask.get(e) && coreach[self.edges[e].dst - 1]
            });
        }
        coreach
    }

    /// True when the mask keeps a selected path from input to output.
    pub fn is_output_connected(&self, mask: &Mask) -> bool {
        self.reachable_from_input(mask)[self.output_id() - 1]
    }

    /// Restriction of a mask to its operative edges: selected edges whose
    /// source is reachable from the input and whose destination still
    /// reaches the output under the mask. Dead branches disappear; the
    /// result is a fixpoint of this map.
    pub fn active_mask(&self, mask: &Mask) -> Mask {
        let reach = self.reachable_from_input(mask);
        let coreach = self.coreachable_to_output(mask);
        let mut out = Mask::empty(self);
        for (idx, e) in self.edges.iter().enumerate() {
            if mask.get(idx) && reach[e.src - 1] && coreach[e.dst - 1] {
                out.set(idx, true);
            }
        }
        out
    }

    /// Extracts the operative sub-network of a mask: layers both reachable
    /// from the input and co-reachable to the output, plus the selected
    /// edges between them. Layer ids are relabeled to stay contiguous;
    /// modules keep their parameter slots so a parent-graph
    /// [`crate::params::ParameterStore`] still applies.
    pub fn sub_architecture(&self, mask: &Mask) -> Result<SuperNetGraph> {
        if !self.is_output_connected(mask) {
            return Err(Error::NotConnected);
        }
        let reach = self.reachable_from_input(mask);
        let coreach = self.coreachable_to_output(mask);
        let keep: Vec<bool> = reach.iter().zip(&coreach).map(|(a, b)| *a && *b).collect();

        let mut new_id = vec![0usize; self.layers.len()];
        let mut layers = Vec::new();
        for l in &self.layers {
            if keep[l.id - 1] {
                layers.push(LayerSpec::new(layers.len() + 1, l.shape.clone()));
                new_id[l.id - 1] = layers.len();
            }
        }
        let mut edges = Vec::new();
        for (idx, e) in self.edges.iter().enumerate() {
            if mask.get(idx) && keep[e.src - 1] && keep[e.dst - 1] {
                edges.push(Edge {
                    src: new_id[e.src - 1],
                    dst: new_id[e.dst - 1],
                    module: e.module.clone(),
                });
            }
        }
        finish_graph(layers, edges, self.activation, self.num_slots)
    }

    /// Renders the graph in the versioned text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("supernet v1\n");
        let act = match self.activation {
            Activation::None => "none",
            Activation::Relu => "relu",
        };
        let _ = writeln!(out, "activation {}", act);
        let _ = writeln!(out, "layers {}", self.layers.len());
        for l in &self.layers {
            let dims: Vec<String> = l.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "layer {} {}", l.id, dims.join("x"));
        }
        for e in &self.edges {
            let _ = writeln!(out, "edge {} {} {}", e.src, e.dst, module_to_text(&e.module));
        }
        out
    }

    /// Parses the text format and re-validates the graph.
    pub fn from_text(text: &str) -> Result<SuperNetGraph> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Parse("empty graph file".into()))?;
        if header != "supernet v1" {
            return Err(Error::Parse(format!("unsupported graph header: {:?}", header)));
        }
        let mut activation = Activation::None;
        let mut layers: Vec<LayerSpec> = Vec::new();
        let mut defs: Vec<EdgeDef> = Vec::new();
        let mut declared: Option<usize> = None;
        for line in lines {
            let mut toks = line.split_whitespace();
            match toks.next() {
                Some("activation") => {
                    activation = match toks.next() {
                        Some("none") => Activation::None,
                        Some("relu") => Activation::Relu,
                        other => return Err(Error::Parse(format!("bad activation {:?}", other))),
                    };
                }
                Some("layers") => {
                    declared = Some(parse_num(toks.next(), "layer count")?);
                }
                Some("layer") => {
                    let id: usize = parse_num(toks.next(), "layer id")?;
                    let dims = toks
                        .next()
                        .ok_or_else(|| Error::Parse("layer line missing shape".into()))?;
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>().map_err(|_| {
                            Error::Parse(format!("bad layer shape token {:?}", d))
                        }))
                        .collect::<Result<Vec<_>>>()?;
                    layers.push(LayerSpec::new(id, shape));
                }
                Some("edge") => {
                    let src: usize = parse_num(toks.next(), "edge source")?;
                    let dst: usize = parse_num(toks.next(), "edge destination")?;
                    let rest: Vec<&str> = toks.collect();
                    let (kind, cost_override) = module_from_tokens(&rest)?;
                    defs.push(EdgeDef { src, dst, kind, cost_override });
                }
                Some(other) => {
                    return Err(Error::Parse(format!("unknown record {:?}", other)));
                }
                None => unreachable!("blank lines are filtered"),
            }
        }
        if let Some(n) = declared {
            if n != layers.len() {
                return Err(Error::Parse(format!(
                    "declared {} layers, found {}",
                    n,
                    layers.len()
                )));
            }
        }
        build_graph(layers, defs, activation)
    }

    /// Renders a mask for this graph as one `select` line per edge.
    pub fn mask_to_text(&self, mask: &Mask) -> String {
        let mut out = String::new();
        out.push_str("supernet-mask v1\n");
        let _ = writeln!(out, "edges {}", self.edges.len());
        for (idx, e) in self.edges.iter().enumerate() {
            if mask.get(idx) {
                let _ = writeln!(out, "select {} {}", e.src, e.dst);
            }
        }
        out
    }

    /// Parses a mask rendered by [`Self::mask_to_text`].
    pub fn mask_from_text(&self, text: &str) -> Result<Mask> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Parse("empty mask file".into()))?;
        if header != "supernet-mask v1" {
            return Err(Error::Parse(format!("unsupported mask header: {:?}", header)));
        }
        let mut selected = Vec::new();
        for line in lines {
            let mut toks = line.split_whitespace();
            match toks.next() {
                Some("edges") => {
                    let n: usize = parse_num(toks.next(), "edge count")?;
                    if n != self.edges.len() {
                        return Err(Error::Parse(format!(
                            "mask is for a {}-edge graph, this graph has {}",
                            n,
                            self.edges.len()
                        )));
                    }
                }
                Some("select") => {
                    let src: usize = parse_num(toks.next(), "mask edge source")?;
                    let dst: usize = parse_num(toks.next(), "mask edge destination")?;
                    selected.push((src, dst));
                }
                Some(other) => return Err(Error::Parse(format!("unknown mask record {:?}", other))),
                None => unreachable!(),
            }
        }
        Mask::from_edges(self, &selected)
    }
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    tok.ok_or_else(|| Error::Parse(format!("missing {}", what)))?
        .parse::<T>()
        .map_err(|_| Error::Parse(format!("bad {}", what)))
}

fn module_to_text(m: &ModuleSpec) -> String {
    let mut s = match m.kind {
        ModuleKind::Identity => "identity".to_string(),
        ModuleKind::Dense { in_dim, out_dim } => format!("dense {} {}", in_dim, out_dim),
        ModuleKind::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
            format!("conv2d {} {} {} {} {}", in_ch, out_ch, kernel, stride, padding)
        }
        ModuleKind::Projection { in_ch, out_ch, stride } => {
            format!("projection {} {} {}", in_ch, out_ch, stride)
        }
        ModuleKind::DownsampleConv { in_ch, out_ch, kernel } => {
            format!("downsample {} {} {}", in_ch, out_ch, kernel)
        }
        ModuleKind::UpsampleConv { in_ch, out_ch, kernel } => {
            format!("upsample {} {} {}", in_ch, out_ch, kernel)
        }
        ModuleKind::BasicBlock { in_ch, out_ch, stride } => {
            format!("block {} {} {}", in_ch, out_ch, stride)
        }
    };
    if let Some(c) = m.cost_override {
        let _ = write!(s, " cost {} {} {}", c.flops, c.params, c.cycles);
    }
    s
}

fn module_from_tokens(toks: &[&str]) -> Result<(ModuleKind, Option<CostMeta>)> {
    let bad = |msg: &str| Error::Parse(format!("bad edge module: {}", msg));
    let nums = |toks: &[&str], n: usize| -> Result<Vec<usize>> {
        if toks.len() < n {
            return Err(bad("missing hyperparameters"));
        }
        toks[..n]
            .iter()
            .map(|t| t.parse::<usize>().map_err(|_| bad(&format!("bad number {:?}", t))))
            .collect()
    };
    let (kind, used) = match toks.first() {
        Some(&"identity") => (ModuleKind::Identity, 1),
        Some(&"dense") => {
            let v = nums(&toks[1..], 2)?;
            (ModuleKind::Dense { in_dim: v[0], out_dim: v[1] }, 3)
        }
        Some(&"conv2d") => {
            let v = nums(&toks[1..], 5)?;
            (
                ModuleKind::Conv2d {
                    in_ch: v[0],
                    out_ch: v[1],
                    kernel: v[2],
                    stride: v[3],
                    padding: v[4],
                },
                6,
            )
        }
        Some(&"projection") => {
            let v = nums(&toks[1..], 3)?;
            (ModuleKind::Projection { in_ch: v[0], out_ch: v[1], stride: v[2] }, 4)
        }
        Some(&"downsample") => {
            let v = nums(&toks[1..], 3)?;
            (ModuleKind::DownsampleConv { in_ch: v[0], out_ch: v[1], kernel: v[2] }, 4)
        }
        Some(&"upsample") => {
            let v = nums(&toks[1..], 3)?;
            (ModuleKind::UpsampleConv { in_ch: v[0], out_ch: v[1], kernel: v[2] }, 4)
        }
        Some(&"block") => {
            let v = nums(&toks[1..], 3)?;
            (ModuleKind::BasicBlock { in_ch: v[0], out_ch: v[1], stride: v[2] }, 4)
        }
        other => return Err(bad(&format!("unknown kind {:?}", other))),
    };
    let rest = &toks[used..];
    let cost_override = match rest.first() {
        None => None,
        Some(&"cost") => {
            if rest.len() != 4 {
                return Err(bad("cost override takes flops, params, cycles"));
            }
            let flops = rest[1].parse().map_err(|_| bad("bad cost flops"))?;
            let params = rest[2].parse().map_err(|_| bad("bad cost params"))?;
            let cycles = rest[3].parse().map_err(|_| bad("bad cost cycles"))?;
            Some(CostMeta { flops, params, cycles })
        }
        Some(other) => return Err(bad(&format!("unexpected trailing token {:?}", other))),
    };
    Ok((kind, cost_override))
}

/// Validates layers and edges into a [`SuperNetGraph`], assigning
/// parameter slots sequentially in canonical edge order.
///
/// Checks, in order: id and shape well-formedness, duplicate edges,
/// acyclicity, single source (layer 1) and single sink (layer N), every
/// layer on an input-to-output path, and per-edge shape compatibility.
pub fn build_graph(
    layers: Vec<LayerSpec>,
    edges: Vec<EdgeDef>,
    activation: Activation,
) -> Result<SuperNetGraph> {
    let n = layers.len();
    if n < 2 {
        return Err(Error::InvalidConfig("a graph needs at least input and output layers".into()));
    }
    for (i, l) in layers.iter().enumerate() {
        if l.id != i + 1 {
            return Err(Error::InvalidConfig(format!(
                "layer ids must be contiguous from 1; position {} has id {}",
                i + 1,
                l.id
            )));
        }
        if l.shape.is_empty() || l.shape.contains(&0) {
            return Err(Error::InvalidConfig(format!("layer {} has an empty dimension", l.id)));
        }
    }

    let mut seen = BTreeMap::new();
    for d in &edges {
        if d.src == 0 || d.src > n || d.dst == 0 || d.dst > n {
            return Err(Error::InvalidConfig(format!(
                "edge {}->{} references a nonexistent layer",
                d.src, d.dst
            )));
        }
        if d.src == d.dst {
            return Err(Error::CycleDetected);
        }
        if seen.insert((d.src, d.dst), ()).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate edge {}->{}", d.src, d.dst)));
        }
    }

    // Canonical order, then sequential slot assignment.
    let mut defs = edges;
    defs.sort_by_key(|d| (d.dst, d.src));
    let mut next_slot = 0usize;
    let mut built = Vec::with_capacity(defs.len());
    for d in defs {
        let count = d.kind.param_shapes().len();
        let param_slots: Vec<ParamSlot> = (next_slot..next_slot + count).collect();
        next_slot += count;
        built.push(Edge {
            src: d.src,
            dst: d.dst,
            module: ModuleSpec { kind: d.kind, param_slots, cost_override: d.cost_override },
        });
    }
    finish_graph(layers, built, activation, next_slot)
}

/// Shared validation tail for freshly built and pruned graphs.
fn finish_graph(
    layers: Vec<LayerSpec>,
    edges: Vec<Edge>,
    activation: Activation,
    num_slots: usize,
) -> Result<SuperNetGraph> {
    let n = layers.len();
    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut outgoing: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (idx, e) in edges.iter().enumerate() {
        incoming[e.dst - 1].push(idx);
        outgoing[e.src - 1].push(idx);
    }
    for list in incoming.iter_mut() {
        list.sort_by_key(|&e| edges[e].src);
    }
    for list in outgoing.iter_mut() {
        list.sort_by_key(|&e| edges[e].dst);
    }

    // Kahn's algorithm, smallest ready id first, for a deterministic order.
    let mut indegree: Vec<usize> = incoming.iter().map(Vec::len).collect();
    let mut ready: std::collections::BTreeSet<usize> = (1..=n).filter(|&i| indegree[i - 1] == 0).collect();
    let mut topo = Vec::with_capacity(n);
    while let Some(&id) = ready.iter().next() {
        ready.remove(&id);
        topo.push(id);
        for &e in &outgoing[id - 1] {
            let d = edges[e].dst;
            indegree[d - 1] -= 1;
            if indegree[d - 1] == 0 {
                ready.insert(d);
            }
        }
    }
    if topo.len() != n {
        return Err(Error::CycleDetected);
    }

    for id in 1..=n {
        if incoming[id - 1].is_empty() && id != 1 {
            return Err(Error::DisconnectedLayer(id));
        }
        if outgoing[id - 1].is_empty() && id != n {
            return Err(Error::MultipleSinks(id));
        }
    }
    if !incoming[0].is_empty() {
        return Err(Error::InvalidConfig("the input layer cannot have incoming edges".into()));
    }
    if !outgoing[n - 1].is_empty() {
        return Err(Error::InvalidConfig("the output layer cannot have outgoing edges".into()));
    }

    // With in-degrees and out-degrees constrained as above, forward and
    // backward reachability can only fail on cyclic inputs, which were
    // already rejected; this recheck guards refactoring mistakes.
    {
        let graph_like = |from: usize, next: &dyn Fn(usize) -> Vec<usize>| -> Vec<bool> {
            let mut seen = vec![false; n];
            let mut stack = vec![from];
            seen[from - 1] = true;
            while let Some(v) = stack.pop() {
                for w in next(v) {
                    if !seen[w - 1] {
                        seen[w - 1] = true;
                        stack.push(w);
                    }
                }
            }
            seen
        };
        let fwd = graph_like(1, &|v| outgoing[v - 1].iter().map(|&e| edges[e].dst).collect());
        let bwd = graph_like(n, &|v| incoming[v - 1].iter().map(|&e| edges[e].src).collect());
        for id in 1..=n {
            if !(fwd[id - 1] && bwd[id - 1]) {
                return Err(Error::DisconnectedLayer(id));
            }
        }
    }

    for e in &edges {
        let src_shape = &layers[e.src - 1].shape;
        let dst_shape = &layers[e.dst - 1].shape;
        match e.module.kind.output_shape(src_shape) {
            Err(detail) => {
                return Err(Error::ShapeMismatch { src: e.src, dst: e.dst, detail });
            }
            Ok(out) if &out != dst_shape => {
                return Err(Error::ShapeMismatch {
                    src: e.src,
                    dst: e.dst,
                    detail: format!("module produces {:?}, destination expects {:?}", out, dst_shape),
                });
            }
            Ok(_) => {}
        }
    }

    Ok(SuperNetGraph { layers, edges, activation, topo, incoming, outgoing, num_slots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn dense(i: usize, o: usize) -> ModuleKind {
        ModuleKind::Dense { in_dim: i, out_dim: o }
    }

    /// Diamond over identities: 1 -> {2, 3} -> 4.
    fn identity_diamond() -> SuperNetGraph {
        let layers = vec![
            LayerSpec::new(1, vec![4]),
            LayerSpec::new(2, vec![4]),
            LayerSpec::new(3, vec![4]),
            LayerSpec::new(4, vec![4]),
        ];
        let edges = vec![
            EdgeDef::new(1, 2, ModuleKind::Identity),
            EdgeDef::new(1, 3, ModuleKind::Identity),
            EdgeDef::new(2, 4, ModuleKind::Identity),
            EdgeDef::new(3, 4, ModuleKind::Identity),
        ];
        build_graph(layers, edges, Activation::None).unwrap()
    }

    #[test]
    fn two_layer_chain_builds() {
        let g = build_graph(
            vec![LayerSpec::new(1, vec![2]), LayerSpec::new(2, vec![3])],
            vec![EdgeDef::new(1, 2, dense(2, 3))],
            Activation::None,
        )
        .unwrap();
        assert_eq!(g.num_layers(), 2);
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.topo_order(), &[1, 2]);
        assert_eq!(g.num_slots(), 2);
    }

    #[test]
    fn cycle_is_rejected() {
        // 1 -> 2 -> 3 plus 3 -> 2 closes a cycle.
        let err = build_graph(
            vec![
                LayerSpec::new(1, vec![2]),
                LayerSpec::new(2, vec![2]),
                LayerSpec::new(3, vec![2]),
                LayerSpec::new(4, vec![2]),
            ],
            vec![
                EdgeDef::new(1, 2, ModuleKind::Identity),
                EdgeDef::new(2, 3, ModuleKind::Identity),
                EdgeDef::new(3, 2, ModuleKind::Identity),
                EdgeDef::new(3, 4, ModuleKind::Identity),
            ],
            Activation::None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::CycleDetected));
    }

    #[test]
    fn two_node_cycle_is_rejected() {
        let err = build_graph(
            vec![LayerSpec::new(1, vec![2]), LayerSpec::new(2, vec![2])],
            vec![
                EdgeDef::new(1, 2, ModuleKind::Identity),
                EdgeDef::new(2, 1, ModuleKind::Identity),
            ],
            Activation::None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::CycleDetected));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let err = build_graph(
            vec![LayerSpec::new(1, vec![2]), LayerSpec::new(2, vec![3])],
            vec![EdgeDef::new(1, 2, dense(2, 4))],
            Activation::None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { src: 1, dst: 2, .. }));
    }

    #[test]
    fn dangling_layer_is_rejected() {
        // Layer 2 has no incoming edges.
        let err = build_graph(
            vec![
                LayerSpec::new(1, vec![2]),
                LayerSpec::new(2, vec![2]),
                LayerSpec::new(3, vec![2]),
            ],
            vec![EdgeDef::new(1, 3, ModuleKind::Identity)],
            Activation::None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DisconnectedLayer(2)));
    }

    #[test]
    fn extra_sink_is_rejected() {
        // Layer 2 dead-ends while layer 3 is the declared output.
        let err = build_graph(
            vec![
                LayerSpec::new(1, vec![2]),
                LayerSpec::new(2, vec![2]),
                LayerSpec::new(3, vec![2]),
            ],
            vec![
                EdgeDef::new(1, 2, ModuleKind::Identity),
                EdgeDef::new(1, 3, ModuleKind::Identity),
            ],
            Activation::None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::MultipleSinks(2)));
    }

    #[test]
    fn slots_are_assigned_in_canonical_order() {
        let g = build_graph(
            vec![
                LayerSpec::new(1, vec![2]),
                LayerSpec::new(2, vec![3]),
                LayerSpec::new(3, vec![4]),
            ],
            // Given out of order; canonical order sorts by (dst, src).
            vec![
                EdgeDef::new(2, 3, dense(3, 4)),
                EdgeDef::new(1, 3, dense(2, 4)),
                EdgeDef::new(1, 2, dense(2, 3)),
            ],
            Activation::None,
        )
        .unwrap();
        let order: Vec<(usize, usize)> = g.edges().iter().map(|e| (e.src, e.dst)).collect();
        assert_eq!(order, vec![(1, 2), (1, 3), (2, 3)]);
        assert_eq!(g.edges()[0].module.param_slots, vec![0, 1]);
        assert_eq!(g.edges()[1].module.param_slots, vec![2, 3]);
        assert_eq!(g.edges()[2].module.param_slots, vec![4, 5]);
    }

    #[test]
    fn connectivity_tracks_masks() {
        let g = identity_diamond();
        assert!(g.is_output_connected(&Mask::full(&g)));
        assert!(!g.is_output_connected(&Mask::empty(&g)));

        let upper = Mask::from_edges(&g, &[(1, 2), (2, 4)]).unwrap();
        assert!(g.is_output_connected(&upper));

        // Selecting 3->4 alone leaves its source unreachable.
        let dangling = Mask::from_edges(&g, &[(1, 2), (2, 4), (3, 4)]).unwrap();
        assert!(g.is_output_connected(&dangling));
        let reach = g.reachable_from_input(&dangling);
        assert!(!reach[2], "layer 3 has no selected incoming edge");
    }

    /// Oracle: forward reachability by plain BFS over an explicit adjacency
    /// list, independent of the graph's cached structures.
    fn bfs_reachable(n: usize, edges: &[(usize, usize)], from: usize) -> Vec<bool> {
        let mut seen = vec![false; n];
        seen[from - 1] = true;
        let mut queue = std::collections::VecDeque::from([from]);
        while let Some(v) = queue.pop_front() {
            for &(s, d) in edges {
                if s == v && !seen[d - 1] {
                    seen[d - 1] = true;
                    queue.push_back(d);
                }
            }
        }
        seen
    }

    #[test]
    fn reachability_matches_bfs_oracle_on_random_masks() {
        let g = layered_random_graph(6, 11, 7);
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..200 {
            let bits: Vec<bool> = (0..g.num_edges()).map(|_| rng.gen_bool(0.5)).collect();
            let mask = Mask::from_bits(bits);
            let selected: Vec<(usize, usize)> = g
                .edges()
                .iter()
                .enumerate()
                .filter(|(i, _)| mask.get(*i))
                .map(|(_, e)| (e.src, e.dst))
                .collect();
            let oracle = bfs_reachable(g.num_layers(), &selected, 1);
            assert_eq!(g.reachable_from_input(&mask), oracle);
            assert_eq!(g.is_output_connected(&mask), oracle[g.num_layers() - 1]);
        }
    }

    /// Random DAG over identity modules: layers in id order, each non-input
    /// layer gets 1..=3 incoming edges from earlier layers, each non-output
    /// layer at least one outgoing edge.
    fn layered_random_graph(n: usize, extra: usize, seed: u64) -> SuperNetGraph {
        let mut rng = StdRng::seed_from_u64(seed);
        let layers: Vec<LayerSpec> = (1..=n).map(|i| LayerSpec::new(i, vec![4])).collect();
        let mut pairs = std::collections::BTreeSet::new();
        for d in 2..=n {
            let s = rng.gen_range(1..d);
            pairs.insert((s, d));
        }
        for s in 1..n {
            if !pairs.iter().any(|&(a, _)| a == s) {
                let d = rng.gen_range(s + 1..=n);
                pairs.insert((s, d));
            }
        }
        let mut attempts = 0;
        while pairs.len() < n - 1 + extra && attempts < 1000 {
            attempts += 1;
            let s = rng.gen_range(1..n);
            let d = rng.gen_range(s + 1..=n);
            pairs.insert((s, d));
        }
        let defs = pairs
            .into_iter()
            .map(|(s, d)| EdgeDef::new(s, d, ModuleKind::Identity))
            .collect();
        build_graph(layers, defs, Activation::None).unwrap()
    }

    #[test]
    fn sub_architecture_prunes_dangling_branches() {
        let g = identity_diamond();
        // Select the upper path plus the dangling 3->4 edge.
        let mask = Mask::from_edges(&g, &[(1, 2), (2, 4), (3, 4)]).unwrap();
        let sub = g.sub_architecture(&mask).unwrap();
        assert_eq!(sub.num_layers(), 3, "layer 3 is not co-reachable and is pruned");
        assert_eq!(sub.num_edges(), 2);
        // Full mask keeps everything.
        let full = g.sub_architecture(&Mask::full(&g)).unwrap();
        assert_eq!(full.num_layers(), 4);
        assert_eq!(full.num_edges(), 4);
        // Disconnected masks are an error.
        assert!(matches!(g.sub_architecture(&Mask::empty(&g)), Err(Error::NotConnected)));
    }

    #[test]
    fn sub_architecture_keeps_parameter_slots() {
        let g = build_graph(
            vec![
                LayerSpec::new(1, vec![2]),
                LayerSpec::new(2, vec![3]),
                LayerSpec::new(3, vec![4]),
            ],
            vec![
                EdgeDef::new(1, 2, dense(2, 3)),
                EdgeDef::new(1, 3, dense(2, 4)),
                EdgeDef::new(2, 3, dense(3, 4)),
            ],
            Activation::None,
        )
        .unwrap();
        let mask = Mask::from_edges(&g, &[(1, 3)]).unwrap();
        let sub = g.sub_architecture(&mask).unwrap();
        assert_eq!(sub.num_edges(), 1);
        // The surviving edge keeps the slots it had in the parent graph.
        assert_eq!(sub.edges()[0].module.param_slots, vec![2, 3]);
    }

    #[test]
    fn sub_architecture_matches_double_bfs_oracle() {
        let g = layered_random_graph(7, 13, 99);
        let mut rng = StdRng::seed_from_u64(7);
        let n = g.num_layers();
        for _ in 0..200 {
            let bits: Vec<bool> = (0..g.num_edges()).map(|_| rng.gen_bool(0.6)).collect();
            let mask = Mask::from_bits(bits);
            let selected: Vec<(usize, usize)> = g
                .edges()
                .iter()
                .enumerate()
                .filter(|(i, _)| mask.get(*i))
                .map(|(_, e)| (e.src, e.dst))
                .collect();
            let fwd = bfs_reachable(n, &selected, 1);
            let rev_edges: Vec<(usize, usize)> = selected.iter().map(|&(s, d)| (d, s)).collect();
            let bwd = bfs_reachable(n, &rev_edges, n);
            if !fwd[n - 1] {
                assert!(g.sub_architecture(&mask).is_err());
                continue;
            }
            let sub = g.sub_architecture(&mask).unwrap();
            let expected_layers = (0..n).filter(|&i| fwd[i] && bwd[i]).count();
            let expected_edges = selected
                .iter()
                .filter(|&&(s, d)| fwd[s - 1] && bwd[s - 1] && fwd[d - 1] && bwd[d - 1])
                .count();
            assert_eq!(sub.num_layers(), expected_layers);
            assert_eq!(sub.num_edges(), expected_edges);
        }
    }

    #[test]
    fn text_format_round_trips() {
        let g = build_graph(
            vec![
                LayerSpec::new(1, vec![3, 8, 8]),
                LayerSpec::new(2, vec![4, 8, 8]),
                LayerSpec::new(3, vec![4, 4, 4]),
                LayerSpec::new(4, vec![4, 8, 8]),
                LayerSpec::new(5, vec![10]),
            ],
            vec![
                EdgeDef::new(1, 2, ModuleKind::Conv2d { in_ch: 3, out_ch: 4, kernel: 3, stride: 1, padding: 1 }),
                EdgeDef::new(2, 3, ModuleKind::DownsampleConv { in_ch: 4, out_ch: 4, kernel: 3 }),
                EdgeDef::new(3, 4, ModuleKind::UpsampleConv { in_ch: 4, out_ch: 4, kernel: 3 }),
                EdgeDef {
                    src: 2,
                    dst: 4,
                    kind: ModuleKind::BasicBlock { in_ch: 4, out_ch: 4, stride: 1 },
                    cost_override: Some(CostMeta { flops: 123, params: 45, cycles: 2 }),
                },
                EdgeDef::new(4, 5, dense(4, 10)),
            ],
            Activation::Relu,
        )
        .unwrap();
        let text = g.to_text();
        let back = SuperNetGraph::from_text(&text).unwrap();
        assert_eq!(g, back);
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn mask_text_round_trips() {
        let g = identity_diamond();
        let mask = Mask::from_edges(&g, &[(1, 2), (2, 4)]).unwrap();
        let text = g.mask_to_text(&mask);
        let back = g.mask_from_text(&text).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn mask_for_wrong_graph_is_rejected() {
        let g = identity_diamond();
        let other = build_graph(
            vec![LayerSpec::new(1, vec![4]), LayerSpec::new(2, vec![4])],
            vec![EdgeDef::new(1, 2, ModuleKind::Identity)],
            Activation::None,
        )
        .unwrap();
        let text = other.mask_to_text(&Mask::full(&other));
        assert!(g.mask_from_text(&text).is_err());
    }

    #[test]
    fn parse_rejects_malformed_input() {
        assert!(SuperNetGraph::from_text("").is_err());
        assert!(SuperNetGraph::from_text("supernet v2\n").is_err());
        assert!(SuperNetGraph::from_text("supernet v1\nlayer 1 0x3\n").is_err());
        assert!(SuperNetGraph::from_text(
            "supernet v1\nlayers 2\nlayer 1 2\nlayer 2 2\nedge 1 2 waffle\n"
        )
        .is_err());
    }

    #[test]
    fn output_shapes_follow_convolution_arithmetic() {
        let conv = ModuleKind::Conv2d { in_ch: 3, out_ch: 8, kernel: 3, stride: 1, padding: 1 };
        assert_eq!(conv.output_shape(&[3, 32, 32]).unwrap(), vec![8, 32, 32]);
        let down = ModuleKind::DownsampleConv { in_ch: 8, out_ch: 16, kernel: 3 };
        assert_eq!(down.output_shape(&[8, 32, 32]).unwrap(), vec![16, 16, 16]);
        assert_eq!(down.output_shape(&[8, 5, 5]).unwrap(), vec![16, 3, 3]);
        let up = ModuleKind::UpsampleConv { in_ch: 16, out_ch: 8, kernel: 3 };
        assert_eq!(up.output_shape(&[16, 16, 16]).unwrap(), vec![8, 32, 32]);
        let proj = ModuleKind::Projection { in_ch: 16, out_ch: 32, stride: 2 };
        assert_eq!(proj.output_shape(&[16, 32, 32]).unwrap(), vec![32, 16, 16]);
        let block = ModuleKind::BasicBlock { in_ch: 16, out_ch: 32, stride: 2 };
        assert_eq!(block.output_shape(&[16, 32, 32]).unwrap(), vec![32, 16, 16]);
        assert!(block.block_needs_projection());
        let same = ModuleKind::BasicBlock { in_ch: 16, out_ch: 16, stride: 1 };
        assert!(!same.block_needs_projection());
        // Dense pools spatial inputs whose channel count matches.
        let head = ModuleKind::Dense { in_dim: 16, out_dim: 10 };
        assert_eq!(head.output_shape(&[16, 4, 4]).unwrap(), vec![10]);
        assert!(head.output_shape(&[8, 4, 4]).is_err());
    }
}
