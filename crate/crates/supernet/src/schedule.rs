//! Scheduling simulator behind the distributed computation cost.
//!
//! The distributed cost of an architecture is the number of cycles needed
//! to execute every module on `n` identical machines. A module may start
//! only once its source layer is complete (every selected edge into that
//! layer has finished), each machine runs one module at a time, and a
//! module occupies its machine for its declared cycle count. Identity
//! edges take zero cycles and no machine; their results are available the
//! moment the source layer is.
//!
//! Only the pruned sub-architecture is scheduled: selected edges that lie
//! on no input-to-output path belong to no executable model and are
//! excluded.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::cost::edge_cost;
use crate::error::{Error, Result};
use crate::graph::{Mask, SuperNetGraph};

/// Exact search is exponential in the number of timed edges; beyond this
/// it refuses rather than hang.
pub const BRUTE_FORCE_EDGE_CAP: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulePolicy {
    /// Critical-path list scheduling: at each cycle start as many ready
    /// modules as machines allow, longest-remaining-path first, ties by
    /// edge id. Deterministic, not always optimal.
    GreedyList,
    /// Exhaustive branch-and-bound minimum makespan. Refuses instances
    /// with more than [`BRUTE_FORCE_EDGE_CAP`] timed edges.
    BruteForceOptimal,
}

/// One module's placement: `machine` is 1-based, the module runs through
/// cycles `start ..= start + duration - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduledEdge {
    /// Canonical edge index in the full graph.
    pub edge: usize,
    pub machine: usize,
    pub start: u32,
    pub duration: u32,
}

/// A complete placement of the pruned architecture's timed edges.
/// Zero-cycle edges are not placed; they complete with their source layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    /// Sorted by (start, machine).
    pub entries: Vec<ScheduledEdge>,
    pub makespan: u32,
}

/// Selected edges on some input-to-output path, plus their durations.
struct ActiveSet {
    /// Per canonical edge index.
    active: Vec<bool>,
    dur: Vec<u32>,
    timed: Vec<usize>,
}

fn active_set(g: &SuperNetGraph, h: &Mask) -> ActiveSet {
    let reach = g.reachable_from_input(h);
    let coreach = g.coreachable_to_output(h);
    let mut active = vec![false; g.num_edges()];
    let mut dur = vec![0u32; g.num_edges()];
    let mut timed = Vec::new();
    for e in 0..g.num_edges() {
        let edge = g.edge(e);
        if h.get(e) && reach[edge.src - 1] && coreach[edge.dst - 1] {
            active[e] = true;
            dur[e] = edge_cost(g, e).cycles;
            if dur[e] > 0 {
                timed.push(e);
            }
        }
    }
    ActiveSet { active, dur, timed }
}

/// Longest remaining path (in cycles) hanging off each layer, and per
/// active edge the path length through it. Drives the greedy priority and
/// the exact search's lower bound.
fn remaining_paths(g: &SuperNetGraph, set: &ActiveSet) -> (Vec<u64>, Vec<u64>) {
    let mut layer_rem = vec![0u64; g.num_layers()];
    for &l in g.topo_order().iter().rev() {
        for &e in g.outgoing(l) {
            if set.active[e] {
                let through = set.dur[e] as u64 + layer_rem[g.edge(e).dst - 1];
                layer_rem[l - 1] = layer_rem[l - 1].max(through);
            }
        }
    }
    let edge_rem = (0..g.num_edges())
        .map(|e| {
            if set.active[e] {
                set.dur[e] as u64 + layer_rem[g.edge(e).dst - 1]
            } else {
                0
            }
        })
        .collect();
    (layer_rem, edge_rem)
}

/// Schedules the selected architecture on `machines` machines.
pub fn distributed_cost(
    g: &SuperNetGraph,
    h: &Mask,
    machines: usize,
    policy: SchedulePolicy,
) -> Result<Schedule> {
    if machines == 0 {
        return Err(Error::InvalidConfig("machine count must be at least 1".into()));
    }
    if !g.is_output_connected(h) {
        return Err(Error::NotConnected);
    }
    let set = active_set(g, h);
    match policy {
        SchedulePolicy::GreedyList => Ok(greedy_list(g, &set, machines)),
        SchedulePolicy::BruteForceOptimal => brute_force(g, &set, machines),
    }
}

fn greedy_list(g: &SuperNetGraph, set: &ActiveSet, machines: usize) -> Schedule {
    let (_, edge_rem) = remaining_paths(g, set);
    // Absolute cycle at which each layer / edge completes. Finishes are
    // fixed at start time, so layer readiness can be settled eagerly.
    let mut finish: Vec<Option<u32>> = vec![None; g.num_edges()];
    let mut ready: Vec<Option<u32>> = vec![None; g.num_layers()];
    ready[g.input_id() - 1] = Some(0);
    let mut pending: BTreeSet<usize> = set.timed.iter().copied().collect();
    let mut busy_until = vec![0u32; machines];
    let mut entries = Vec::new();

    let settle = |ready: &mut Vec<Option<u32>>, finish: &mut Vec<Option<u32>>| loop {
        let mut changed = false;
        for &l in g.topo_order() {
            if l == g.input_id() || ready[l - 1].is_some() {
                continue;
            }
            let mut latest = 0u32;
            let mut complete = true;
            for &e in g.incoming(l) {
                if !set.active[e] {
                    continue;
                }
                match finish[e] {
                    Some(f) => latest = latest.max(f),
                    None => {
                        complete = false;
                        break;
                    }
                }
            }
            if complete {
                ready[l - 1] = Some(latest);
                changed = true;
            }
        }
        for e in 0..g.num_edges() {
            if set.active[e] && set.dur[e] == 0 && finish[e].is_none() {
                if let Some(r) = ready[g.edge(e).src - 1] {
                    finish[e] = Some(r);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    };

    settle(&mut ready, &mut finish);
    let serial_bound: u64 = set.timed.iter().map(|&e| set.dur[e] as u64).sum();
    let mut t: u32 = 1;
    while !pending.is_empty() {
        let mut cands: Vec<usize> = pending
            .iter()
            .copied()
            .filter(|&e| ready[g.edge(e).src - 1].is_some_and(|r| r < t))
            .collect();
        cands.sort_by(|&a, &b| edge_rem[b].cmp(&edge_rem[a]).then(a.cmp(&b)));
        let mut free: Vec<usize> = (0..machines).filter(|&m| busy_until[m] < t).collect();
        let started = !cands.is_empty() && !free.is_empty();
        for e in cands.into_iter() {
            if free.is_empty() {
                break;
            }
            let m = free.remove(0);
            let f = t + set.dur[e] - 1;
            finish[e] = Some(f);
            busy_until[m] = f;
            entries.push(ScheduledEdge { edge: e, machine: m + 1, start: t, duration: set.dur[e] });
            pending.remove(&e);
        }
        if started {
            settle(&mut ready, &mut finish);
        }
        t += 1;
        assert!(
            (t as u64) <= serial_bound + 2,
            "greedy schedule exceeded the serial bound; dependency bookkeeping is broken"
        );
    }
    settle(&mut ready, &mut finish);
    let makespan = ready[g.output_id() - 1].expect("all active edges finished");
    entries.sort_by_key(|s| (s.start, s.machine));
    Schedule { entries, makespan }
}

fn brute_force(g: &SuperNetGraph, set: &ActiveSet, machines: usize) -> Result<Schedule> {
    let k = set.timed.len();
    if k > BRUTE_FORCE_EDGE_CAP {
        return Err(Error::TooLargeForBruteForce { cap: BRUTE_FORCE_EDGE_CAP, got: k });
    }
    if k == 0 {
        return Ok(Schedule { entries: Vec::new(), makespan: 0 });
    }
    let greedy = greedy_list(g, set, machines);
    let (layer_rem, _) = remaining_paths(g, set);

    // Position-indexed views of the timed edges.
    let dur: Vec<u32> = set.timed.iter().map(|&e| set.dur[e]).collect();
    let src: Vec<usize> = set.timed.iter().map(|&e| g.edge(e).src).collect();
    let dst_rem: Vec<u64> = set.timed.iter().map(|&e| layer_rem[g.edge(e).dst - 1]).collect();
    let pos_of: HashMap<usize, usize> =
        set.timed.iter().enumerate().map(|(p, &e)| (e, p)).collect();
    let full: u16 = if k == 16 { u16::MAX } else { (1u16 << k) - 1 };

    // Layer readiness under a done-set: a layer is ready when every active
    // incoming edge is finished; zero-cycle edges finish with their source.
    let ready_layers = |done: u16| -> Vec<bool> {
        let mut ready = vec![false; g.num_layers()];
        ready[g.input_id() - 1] = true;
        loop {
            let mut changed = false;
            for &l in g.topo_order() {
                if l == g.input_id() || ready[l - 1] {
                    continue;
                }
                let ok = g.incoming(l).iter().all(|&e| {
                    if !set.active[e] {
                        return true;
                    }
                    if set.dur[e] > 0 {
                        done & (1 << pos_of[&e]) != 0
                    } else {
                        ready[g.edge(e).src - 1]
                    }
                });
                if ok {
                    ready[l - 1] = true;
                    changed = true;
                }
            }
            if !changed {
                return ready;
            }
        }
    };

    struct Search<'a> {
        dur: &'a [u32],
        src: &'a [usize],
        dst_rem: &'a [u64],
        machines: usize,
        full: u16,
        best: u32,
        best_starts: Vec<(usize, u32)>,
        memo: HashMap<(u16, Vec<(u8, u32)>), u32>,
    }

    impl Search<'_> {
        fn lower_bound(&self, done: u16, running: &[(u8, u32)]) -> u64 {
            let mut path = 0u64;
            let mut work = 0u64;
            for p in 0..self.dur.len() {
                if done & (1 << p) != 0 {
                    continue;
                }
                if let Some(&(_, rem)) = running.iter().find(|&&(q, _)| q as usize == p) {
                    path = path.max(rem as u64 + self.dst_rem[p]);
                    work += rem as u64;
                } else {
                    path = path.max(self.dur[p] as u64 + self.dst_rem[p]);
                    work += self.dur[p] as u64;
                }
            }
            path.max(work.div_ceil(self.machines as u64))
        }

        fn dfs(
            &mut self,
            t: u32,
            done: u16,
            running: &[(u8, u32)],
            starts: &mut Vec<(usize, u32)>,
            ready_layers: &dyn Fn(u16) -> Vec<bool>,
        ) {
            if done == self.full {
                if t < self.best {
                    self.best = t;
                    self.best_starts = starts.clone();
                }
                return;
            }
            if t as u64 + self.lower_bound(done, running) >= self.best as u64 {
                return;
            }
            let mut key_running = running.to_vec();
            key_running.sort_unstable();
            match self.memo.get(&(done, key_running.clone())) {
                Some(&seen) if seen <= t => return,
                _ => {
                    self.memo.insert((done, key_running), t);
                }
            }
            let ready = ready_layers(done);
            let startable: Vec<u8> = (0..self.dur.len() as u8)
                .filter(|&p| {
                    done & (1 << p) == 0
                        && !running.iter().any(|&(q, _)| q == p)
                        && ready[self.src[p as usize] - 1]
                })
                .collect();
            let free = self.machines - running.len();
            let limit = 1u32 << startable.len();
            // Subsets of the startable edges, larger first so good
            // schedules are found early; the empty subset (deliberate
            // idling) is legal whenever something is already running.
            let mut subsets: Vec<u32> = (0..limit)
                .filter(|s| (s.count_ones() as usize) <= free)
                .collect();
            subsets.sort_by_key(|s| std::cmp::Reverse(s.count_ones()));
            for subset in subsets {
                if subset == 0 && running.is_empty() {
                    continue;
                }
                let mut next_running: Vec<(u8, u32)> = running.to_vec();
                let picked = starts.len();
                for (i, &p) in startable.iter().enumerate() {
                    if subset & (1 << i) != 0 {
                        next_running.push((p, self.dur[p as usize]));
                        starts.push((p as usize, t + 1));
                    }
                }
                let mut next_done = done;
                let mut survivors = Vec::with_capacity(next_running.len());
                for (p, rem) in next_running {
                    if rem == 1 {
                        next_done |= 1 << p;
                    } else {
                        survivors.push((p, rem - 1));
                    }
                }
                self.dfs(t + 1, next_done, &survivors, starts, ready_layers);
                starts.truncate(picked);
            }
        }
    }

    let mut search = Search {
        dur: &dur,
        src: &src,
        dst_rem: &dst_rem,
        machines,
        full,
        best: greedy.makespan,
        best_starts: greedy
            .entries
            .iter()
            .map(|s| (pos_of[&s.edge], s.start))
            .collect(),
        memo: HashMap::new(),
    };
    search.dfs(0, 0, &[], &mut Vec::new(), &ready_layers);

    // Machines can be assigned after the fact: at most `machines` modules
    // overlap any cycle, so first-free assignment in start order succeeds.
    let mut starts = search.best_starts;
    starts.sort_by_key(|&(p, s)| (s, p));
    let mut busy_until = vec![0u32; machines];
    let mut entries = Vec::with_capacity(starts.len());
    for (p, start) in starts {
        let m = (0..machines)
            .find(|&m| busy_until[m] < start)
            .expect("overlap count never exceeds the machine count");
        busy_until[m] = start + dur[p] - 1;
        entries.push(ScheduledEdge {
            edge: set.timed[p],
            machine: m + 1,
            start,
            duration: dur[p],
        });
    }
    entries.sort_by_key(|s| (s.start, s.machine));
    Ok(Schedule { entries, makespan: search.best })
}

/// Checks a schedule against the graph and mask from scratch: coverage of
/// the pruned architecture, machine capacity, dependency order, and the
/// reported makespan.
pub fn validate_schedule(
    g: &SuperNetGraph,
    h: &Mask,
    machines: usize,
    s: &Schedule,
) -> Result<()> {
    let fail = |msg: String| Err(Error::InvalidSchedule(msg));
    if !g.is_output_connected(h) {
        return Err(Error::NotConnected);
    }
    let set = active_set(g, h);

    let mut finish: Vec<Option<u32>> = vec![None; g.num_edges()];
    let mut placed = BTreeSet::new();
    for entry in &s.entries {
        if entry.edge >= g.num_edges() || !set.active[entry.edge] || set.dur[entry.edge] == 0 {
            return fail(format!("entry for edge {} which is not an active timed edge", entry.edge));
        }
        if !placed.insert(entry.edge) {
            return fail(format!("edge {} placed twice", entry.edge));
        }
        if entry.machine == 0 || entry.machine > machines {
            return fail(format!("machine {} out of range 1..={}", entry.machine, machines));
        }
        if entry.duration != set.dur[entry.edge] {
            return fail(format!(
                "edge {} declared duration {} but costs {} cycles",
                entry.edge, entry.duration, set.dur[entry.edge]
            ));
        }
        if entry.start == 0 {
            return fail(format!("edge {} starts at cycle 0; cycles are 1-based", entry.edge));
        }
        finish[entry.edge] = Some(entry.start + entry.duration - 1);
    }
    for &e in &set.timed {
        if !placed.contains(&e) {
            return fail(format!("active timed edge {} never placed", e));
        }
    }

    // Capacity: no machine runs two modules in the same cycle.
    let mut by_machine: Vec<Vec<(u32, u32)>> = vec![Vec::new(); machines];
    for entry in &s.entries {
        by_machine[entry.machine - 1].push((entry.start, entry.start + entry.duration - 1));
    }
    for (m, spans) in by_machine.iter_mut().enumerate() {
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 <= w[0].1 {
                return fail(format!("machine {} runs two modules in cycle {}", m + 1, w[1].0));
            }
        }
    }

    // Dependencies: one topological pass fixes layer-ready times; every
    // module must start strictly after its source layer is ready.
    let mut ready: Vec<u32> = vec![0; g.num_layers()];
    for &l in g.topo_order() {
        if l == g.input_id() {
            continue;
        }
        let mut latest = 0u32;
        for &e in g.incoming(l) {
            if !set.active[e] {
                continue;
            }
            let f = if set.dur[e] == 0 {
                ready[g.edge(e).src - 1]
            } else {
                match finish[e] {
                    Some(f) => f,
                    None => return fail(format!("edge {} has no finish time", e)),
                }
            };
            latest = latest.max(f);
        }
        ready[l - 1] = latest;
    }
    for entry in &s.entries {
        let src_ready = ready[g.edge(entry.edge).src - 1];
        if entry.start <= src_ready {
            return fail(format!(
                "edge {} starts at cycle {} but its source layer is ready at {}",
                entry.edge, entry.start, src_ready
            ));
        }
    }

    let expect = ready[g.output_id() - 1];
    if s.makespan != expect {
        return fail(format!("makespan {} but the output completes at {}", s.makespan, expect));
    }
    Ok(())
}

/// Renders a schedule as CSV, one row per placed module.
pub fn schedule_to_csv(g: &SuperNetGraph, s: &Schedule) -> String {
    let mut out = String::from("src,dst,machine,start_cycle,duration\n");
    for entry in &s.entries {
        let e = g.edge(entry.edge);
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            e.src, e.dst, entry.machine, entry.start, entry.duration
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, Activation, EdgeDef, LayerSpec, ModuleKind};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn dense() -> ModuleKind {
        ModuleKind::Dense { in_dim: 1, out_dim: 1 }
    }

    fn unit_layers(n: usize) -> Vec<LayerSpec> {
        (1..=n).map(|i| LayerSpec::new(i, vec![1])).collect()
    }

    fn chain_graph(modules: usize) -> SuperNetGraph {
        let layers = unit_layers(modules + 1);
        let edges = (1..=modules).map(|i| EdgeDef::new(i, i + 1, dense())).collect();
        build_graph(layers, edges, Activation::None).unwrap()
    }

    /// `width` one-cycle modules in parallel, merged by free identity
    /// edges, so the whole network is exactly one parallel stage.
    fn parallel_stage(width: usize) -> SuperNetGraph {
        let layers = unit_layers(width + 2);
        let mut edges = Vec::new();
        for m in 2..=width + 1 {
            edges.push(EdgeDef::new(1, m, dense()));
            edges.push(EdgeDef::new(m, width + 2, ModuleKind::Identity));
        }
        build_graph(layers, edges, Activation::None).unwrap()
    }

    /// Random layered DAG with a guaranteed backbone, unit-cost modules,
    /// and a few identity skips.
    fn random_dag(rng: &mut StdRng, max_layers: usize, extra: usize) -> SuperNetGraph {
        let n = rng.gen_range(4..=max_layers);
        let mut defs = Vec::new();
        for i in 1..n {
            defs.push(EdgeDef::new(i, i + 1, dense()));
        }
        let mut tried = BTreeSet::new();
        for _ in 0..extra {
            let src = rng.gen_range(1..n - 1);
            let dst = rng.gen_range(src + 2..=n);
            if tried.insert((src, dst)) {
                let kind = if rng.gen_bool(0.3) { ModuleKind::Identity } else { dense() };
                defs.push(EdgeDef::new(src, dst, kind));
            }
        }
        build_graph(unit_layers(n), defs, Activation::None).unwrap()
    }

    /// Random connected mask for `g`.
    fn random_connected_mask(g: &SuperNetGraph, rng: &mut StdRng) -> Mask {
        loop {
            let bits: Vec<bool> = (0..g.num_edges()).map(|_| rng.gen_bool(0.7)).collect();
            let m = Mask::from_bits(bits);
            if g.is_output_connected(&m) {
                return m;
            }
        }
    }

    /// Random series-parallel graph with unit-cost modules, small enough
    /// for exact search. Composition tree: edge | series | parallel; a
    /// parallel branch that would duplicate an existing (src, dst) pair is
    /// expanded into a two-edge series instead.
    fn random_series_parallel(rng: &mut StdRng, budget: usize) -> SuperNetGraph {
        loop {
            let g = series_parallel_attempt(rng, budget);
            if g.num_edges() <= BRUTE_FORCE_EDGE_CAP {
                return g;
            }
        }
    }

    fn series_parallel_attempt(rng: &mut StdRng, budget: usize) -> SuperNetGraph {
        #[derive(Clone)]
        enum Tree {
            Edge,
            Series(Box<Tree>, Box<Tree>),
            Parallel(Box<Tree>, Box<Tree>),
        }
        fn grow(rng: &mut StdRng, budget: usize) -> (Tree, usize) {
            if budget <= 1 || rng.gen_bool(0.3) {
                return (Tree::Edge, 1);
            }
            let (left, used) = grow(rng, budget / 2);
            let (right, used2) = grow(rng, budget - used);
            if rng.gen_bool(0.5) {
                (Tree::Series(Box::new(left), Box::new(right)), used + used2)
            } else {
                (Tree::Parallel(Box::new(left), Box::new(right)), used + used2)
            }
        }
        struct Builder {
            next: usize,
            pairs: BTreeSet<(usize, usize)>,
            edges: Vec<(usize, usize)>,
        }
        impl Builder {
            fn fresh(&mut self) -> usize {
                self.next += 1;
                self.next
            }
            fn add(&mut self, s: usize, t: usize) {
                if self.pairs.insert((s, t)) {
                    self.edges.push((s, t));
                } else {
                    let m = self.fresh();
                    self.add(s, m);
                    self.add(m, t);
                }
            }
            fn instantiate(&mut self, tree: &Tree, s: usize, t: usize) {
                match tree {
                    Tree::Edge => self.add(s, t),
                    Tree::Series(a, b) => {
                        let m = self.fresh();
                        self.instantiate(a, s, m);
                        self.instantiate(b, m, t);
                    }
                    Tree::Parallel(a, b) => {
                        self.instantiate(a, s, t);
                        self.instantiate(b, s, t);
                    }
                }
            }
        }
        let (tree, _) = grow(rng, budget);
        let mut b = Builder { next: 2, pairs: BTreeSet::new(), edges: Vec::new() };
        b.instantiate(&tree, 1, 2);
        // Relabel nodes in topological order so node 1 is the source and
        // the sink comes last.
        let n = b.next;
        let mut order = Vec::new();
        let mut indeg = vec![0usize; n + 1];
        for &(_, t) in &b.edges {
            indeg[t] += 1;
        }
        let mut queue: BTreeSet<usize> =
            (1..=n).filter(|&v| indeg[v] == 0).collect();
        while let Some(&v) = queue.iter().next() {
            queue.remove(&v);
            order.push(v);
            for &(s, t) in &b.edges {
                if s == v {
                    indeg[t] -= 1;
                    if indeg[t] == 0 {
                        queue.insert(t);
                    }
                }
            }
        }
        let mut relabel = vec![0usize; n + 1];
        for (i, &v) in order.iter().enumerate() {
            relabel[v] = i + 1;
        }
        let defs = b
            .edges
            .iter()
            .map(|&(s, t)| EdgeDef::new(relabel[s], relabel[t], dense()))
            .collect();
        build_graph(unit_layers(n), defs, Activation::None).unwrap()
    }

    #[test]
    fn chain_needs_one_cycle_per_module_regardless_of_machines() {
        let g = chain_graph(6);
        let h = Mask::full(&g);
        for n in [1, 2, 4] {
            let s = distributed_cost(&g, &h, n, SchedulePolicy::GreedyList).unwrap();
            assert_eq!(s.makespan, 6, "n={}", n);
            validate_schedule(&g, &h, n, &s).unwrap();
        }
    }

    #[test]
    fn parallel_stage_packs_into_ceil_width_over_machines() {
        let g = parallel_stage(5);
        let h = Mask::full(&g);
        for (n, want) in [(1, 5), (2, 3), (3, 2), (5, 1), (8, 1)] {
            let s = distributed_cost(&g, &h, n, SchedulePolicy::GreedyList).unwrap();
            assert_eq!(s.makespan, want, "n={}", n);
            validate_schedule(&g, &h, n, &s).unwrap();
        }
    }

    #[test]
    fn single_machine_makespan_is_total_duration() {
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..30 {
            let g = random_dag(&mut rng, 7, 4);
            let h = random_connected_mask(&g, &mut rng);
            let set = active_set(&g, &h);
            let total: u32 = set.timed.iter().map(|&e| set.dur[e]).sum();
            let s = distributed_cost(&g, &h, 1, SchedulePolicy::GreedyList).unwrap();
            assert_eq!(s.makespan, total);
            validate_schedule(&g, &h, 1, &s).unwrap();
        }
    }

    #[test]
    fn identity_only_architecture_costs_zero_cycles() {
        let g = build_graph(
            unit_layers(3),
            vec![
                EdgeDef::new(1, 2, ModuleKind::Identity),
                EdgeDef::new(2, 3, ModuleKind::Identity),
            ],
            Activation::None,
        )
        .unwrap();
        let h = Mask::full(&g);
        for policy in [SchedulePolicy::GreedyList, SchedulePolicy::BruteForceOptimal] {
            let s = distributed_cost(&g, &h, 2, policy).unwrap();
            assert_eq!(s.makespan, 0);
            assert!(s.entries.is_empty());
            validate_schedule(&g, &h, 2, &s).unwrap();
        }
    }

    #[test]
    fn residual_blocks_occupy_two_cycles() {
        let g = build_graph(
            vec![
                LayerSpec::new(1, vec![4, 8, 8]),
                LayerSpec::new(2, vec![4, 8, 8]),
                LayerSpec::new(3, vec![4, 8, 8]),
            ],
            vec![
                EdgeDef::new(1, 2, ModuleKind::BasicBlock { in_ch: 4, out_ch: 4, stride: 1 }),
                EdgeDef::new(2, 3, ModuleKind::BasicBlock { in_ch: 4, out_ch: 4, stride: 1 }),
            ],
            Activation::Relu,
        )
        .unwrap();
        let h = Mask::full(&g);
        let s = distributed_cost(&g, &h, 4, SchedulePolicy::GreedyList).unwrap();
        assert_eq!(s.makespan, 4);
        validate_schedule(&g, &h, 4, &s).unwrap();
    }

    #[test]
    fn edges_off_the_output_path_are_not_scheduled() {
        // Diamond where the lower branch dead-ends: 1->3 selected but 3->4
        // not, so only the 1->2->4 path runs.
        let g = build_graph(
            unit_layers(4),
            vec![
                EdgeDef::new(1, 2, dense()),
                EdgeDef::new(1, 3, dense()),
                EdgeDef::new(2, 4, dense()),
                EdgeDef::new(3, 4, dense()),
            ],
            Activation::None,
        )
        .unwrap();
        let mask = Mask::from_edges(&g, &[(1, 2), (1, 3), (2, 4)]).unwrap();
        let s = distributed_cost(&g, &mask, 2, SchedulePolicy::GreedyList).unwrap();
        assert_eq!(s.makespan, 2);
        assert_eq!(s.entries.len(), 2);
        validate_schedule(&g, &mask, 2, &s).unwrap();
    }

    #[test]
    fn disconnected_mask_is_rejected() {
        let g = chain_graph(3);
        let mask = Mask::from_edges(&g, &[(1, 2)]).unwrap();
        let err = distributed_cost(&g, &mask, 2, SchedulePolicy::GreedyList).unwrap_err();
        assert!(matches!(err, Error::NotConnected));
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        let g = chain_graph(13);
        let h = Mask::full(&g);
        let err = distributed_cost(&g, &h, 2, SchedulePolicy::BruteForceOptimal).unwrap_err();
        assert!(matches!(err, Error::TooLargeForBruteForce { cap: 12, got: 13 }));
    }

    #[test]
    fn greedy_never_beats_brute_force_and_both_validate() {
        let mut rng = StdRng::seed_from_u64(33);
        for round in 0..40 {
            let g = random_dag(&mut rng, 6, 3);
            let h = random_connected_mask(&g, &mut rng);
            for n in [1, 2, 3] {
                let greedy = distributed_cost(&g, &h, n, SchedulePolicy::GreedyList).unwrap();
                let exact =
                    distributed_cost(&g, &h, n, SchedulePolicy::BruteForceOptimal).unwrap();
                assert!(
                    greedy.makespan >= exact.makespan,
                    "round {} n {}: greedy {} < optimal {}",
                    round,
                    n,
                    greedy.makespan,
                    exact.makespan
                );
                validate_schedule(&g, &h, n, &greedy).unwrap();
                validate_schedule(&g, &h, n, &exact).unwrap();
            }
        }
    }

    #[test]
    fn greedy_is_optimal_on_series_parallel_graphs() {
        let mut rng = StdRng::seed_from_u64(44);
        for round in 0..40 {
            let g = random_series_parallel(&mut rng, 9);
            let h = Mask::full(&g);
            for n in [2, 3] {
                let greedy = distributed_cost(&g, &h, n, SchedulePolicy::GreedyList).unwrap();
                let exact =
                    distributed_cost(&g, &h, n, SchedulePolicy::BruteForceOptimal).unwrap();
                assert_eq!(
                    greedy.makespan, exact.makespan,
                    "round {} n {}: series-parallel instance where greedy is suboptimal",
                    round, n
                );
            }
        }
    }

    #[test]
    fn makespan_never_increases_with_more_machines() {
        let mut rng = StdRng::seed_from_u64(55);
        for _ in 0..30 {
            let g = random_dag(&mut rng, 7, 4);
            let h = random_connected_mask(&g, &mut rng);
            let mut prev = u32::MAX;
            for n in 1..=5 {
                let s = distributed_cost(&g, &h, n, SchedulePolicy::GreedyList).unwrap();
                assert!(s.makespan <= prev, "n {}: {} > {}", n, s.makespan, prev);
                prev = s.makespan;
            }
        }
    }

    #[test]
    fn scheduling_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(66);
        let g = random_dag(&mut rng, 7, 4);
        let h = random_connected_mask(&g, &mut rng);
        let a = distributed_cost(&g, &h, 3, SchedulePolicy::GreedyList).unwrap();
        let b = distributed_cost(&g, &h, 3, SchedulePolicy::GreedyList).unwrap();
        assert_eq!(a, b);
        let c = distributed_cost(&g, &h, 3, SchedulePolicy::BruteForceOptimal).unwrap();
        let d = distributed_cost(&g, &h, 3, SchedulePolicy::BruteForceOptimal).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn validator_rejects_tampered_schedules() {
        let g = chain_graph(4);
        let h = Mask::full(&g);
        let good = distributed_cost(&g, &h, 2, SchedulePolicy::GreedyList).unwrap();
        validate_schedule(&g, &h, 2, &good).unwrap();

        // Start an edge before its predecessor finishes.
        let mut bad = good.clone();
        bad.entries[1].start = 1;
        assert!(validate_schedule(&g, &h, 2, &bad).is_err());

        // Two modules on one machine in the same cycle.
        let mut bad = good.clone();
        for e in &mut bad.entries {
            e.machine = 1;
            e.start = 1;
        }
        assert!(validate_schedule(&g, &h, 2, &bad).is_err());

        // Machine id out of range.
        let mut bad = good.clone();
        bad.entries[0].machine = 3;
        assert!(validate_schedule(&g, &h, 2, &bad).is_err());

        // Dropped entry.
        let mut bad = good.clone();
        bad.entries.pop();
        assert!(validate_schedule(&g, &h, 2, &bad).is_err());

        // Lying about the makespan.
        let mut bad = good;
        bad.makespan += 1;
        assert!(validate_schedule(&g, &h, 2, &bad).is_err());
    }

    #[test]
    fn csv_lists_one_row_per_placed_module() {
        let g = chain_graph(3);
        let h = Mask::full(&g);
        let s = distributed_cost(&g, &h, 1, SchedulePolicy::GreedyList).unwrap();
        let csv = schedule_to_csv(&g, &s);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "src,dst,machine,start_cycle,duration");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "1,2,1,1,1");
        assert_eq!(lines[3], "3,4,1,3,1");
    }
}
