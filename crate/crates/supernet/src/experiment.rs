//! Experiment configs and runners behind the command-line interface.
//!
//! A run is described by one TOML file; everything downstream (graph,
//! datasets, budget, trainer) is derived from it, and the verbatim
//! config text is written next to every artifact so results stay
//! reproducible from the output directory alone.

use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::cost::CostEvaluator;
use crate::dataset::{digits, two_moons, Dataset};
use crate::error::{Error, Result};
use crate::fabric::{
    cnf, cnf_toy, dense_stack, parallel_chains_graph, resnet_fabric, resnet_fabric_toy, CnfSpec,
    CnfTask, ResNetFabricSpec,
};
use crate::graph::{build_graph, Activation, EdgeDef, LayerSpec, SuperNetGraph};
use crate::params::ParameterStore;
use crate::sampler::ArchitectureDistribution;
use crate::schedule::SchedulePolicy;
use crate::selection::{
    evaluate_model, pareto_front, plot_data, write_models, EvalMode, EvaluatedModel, ModelMeta,
};
use crate::trainer::{run_training, BudgetConfig, TrainConfig, TrainingLog};

/// Reduced-scale build of a fabric: runtime modules shrink to
/// `filters` channels on `input`-sized images while each edge keeps
/// its full-size cost figures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyScale {
    pub filters: usize,
    pub input: (usize, usize, usize),
}

/// Where the super network comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphConfig {
    /// A graph file in the versioned text format.
    File { path: PathBuf },
    /// Layers and edges spelled out in the config itself.
    Inline { layers: Vec<LayerSpec>, edges: Vec<EdgeDef>, activation: Activation },
    /// Residual fabric over `blocks_per_group` blocks per group.
    ResnetFabric {
        blocks_per_group: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        toy: Option<ToyScale>,
    },
    /// Convolutional fabric with `columns` columns.
    Cnf {
        columns: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        toy: Option<ToyScale>,
    },
    /// Scheduling benchmark: independent unit-cost chains.
    ParallelChains { lengths: Vec<usize> },
    /// Dense stack with optional skip edges; the workhorse toy space.
    DenseStack {
        dims: Vec<usize>,
        #[serde(default = "default_true")]
        complete: bool,
    },
}

fn default_classes() -> usize {
    10
}

fn default_true() -> bool {
    true
}

/// Builds the configured graph.
pub fn build_graph_from(cfg: &GraphConfig) -> Result<SuperNetGraph> {
    match cfg {
        GraphConfig::File { path } => SuperNetGraph::from_text(&fs::read_to_string(path)?),
        GraphConfig::Inline { layers, edges, activation } => {
            build_graph(layers.clone(), edges.clone(), *activation)
        }
        GraphConfig::ResnetFabric { blocks_per_group, classes, toy } => {
            let spec = ResNetFabricSpec::cifar(*blocks_per_group, *classes);
            match toy {
                Some(t) => resnet_fabric_toy(&spec, t.filters, t.input),
                None => resnet_fabric(&spec),
            }
        }
        GraphConfig::Cnf { columns, classes, toy } => {
            let spec = CnfSpec { task: CnfTask::Classify, ..CnfSpec::cifar(*columns, *classes) };
            match toy {
                Some(t) => cnf_toy(&spec, t.filters, t.input),
                None => cnf(&spec),
            }
        }
        GraphConfig::ParallelChains { lengths } => parallel_chains_graph(lengths),
        GraphConfig::DenseStack { dims, complete } => dense_stack(dims, *complete),
    }
}

/// Which built-in synthetic dataset to train on.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    /// Two interleaved 2-D arcs, one per class.
    TwoMoons {
        n: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
    /// 8x8 digit glyphs with optional jitter and pixel shifts.
    Digits {
        per_class: usize,
        #[serde(default)]
        jitter: f64,
        #[serde(default)]
        shift: bool,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
}

fn default_noise() -> f64 {
    0.1
}

fn default_val_fraction() -> f64 {
    0.25
}

/// Generates the configured dataset and splits off the validation
/// part. Both halves must end up non-empty: training needs examples
/// and the argmax metrics need something to validate on.
pub fn build_dataset(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    let (full, val_fraction, seed) = match cfg {
        DataConfig::TwoMoons { n, noise, seed, val_fraction } => {
            (two_moons(*n, *noise, *seed)?, *val_fraction, *seed)
        }
        DataConfig::Digits { per_class, jitter, shift, seed, val_fraction } => {
            (digits(*per_class, *jitter, *shift, *seed)?, *val_fraction, *seed)
        }
    };
    let (train, val) = full.split(val_fraction, seed)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "val_fraction {} leaves an empty split for {} examples",
            val_fraction,
            train.len() + val.len()
        )));
    }
    Ok((train, val))
}

/// Serializable choice of cost model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostSpec {
    Flops,
    Params,
    Distributed {
        machines: usize,
        /// Exhaustive minimum makespan instead of list scheduling.
        #[serde(default)]
        optimal: bool,
    },
}

impl CostSpec {
    pub fn evaluator(&self) -> CostEvaluator {
        match self {
            CostSpec::Flops => CostEvaluator::flops(),
            CostSpec::Params => CostEvaluator::params(),
            CostSpec::Distributed { machines, optimal } => {
                let policy = if *optimal {
                    SchedulePolicy::BruteForceOptimal
                } else {
                    SchedulePolicy::GreedyList
                };
                CostEvaluator::distributed(*machines, policy)
            }
        }
    }
}

fn default_cost() -> CostSpec {
    CostSpec::Flops
}

/// Serializable form of [`BudgetConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub max_cost: f64,
    pub lambda: f64,
    #[serde(default = "default_cost")]
    pub cost: CostSpec,
}

impl BudgetSpec {
    pub fn to_budget(&self) -> Result<BudgetConfig> {
        BudgetConfig::new(self.max_cost, self.lambda, self.cost.evaluator())
    }
}

/// How checkpoints are scored after training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSpec {
    pub mode: EvalMode,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { mode: EvalMode::ArgmaxMask }
    }
}

/// One training run, end to end.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub graph: GraphConfig,
    pub dataset: DataConfig,
    pub budget: BudgetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("experiment config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(format!("rendering config: {e}")))
    }
}

/// Grid swept by `cmd_sweep`: every (max_cost, lambda, seed) triple
/// becomes one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepGrid {
    #[serde(default = "default_cost")]
    pub cost: CostSpec,
    pub max_costs: Vec<f64>,
    /// Explicit hinge weights; leave empty to take a grid of
    /// `lambda_grid` values spaced around each budget's magnitude.
    #[serde(default)]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: usize,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 picks the machine's parallelism.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub eval: EvalSpec,
}

fn default_lambda_grid() -> usize {
    5
}

/// Sweep description: the shared run skeleton plus the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub graph: GraphConfig,
    pub dataset: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub sweep: SweepGrid,
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("sweep config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.sweep;
        if g.max_costs.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one max_cost".into()));
        }
        if g.seeds.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one seed".into()));
        }
        for &c in &g.max_costs {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::InvalidConfig(format!("max_cost {c} must be finite and >= 0")));
            }
        }
        for &l in &g.lambdas {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::InvalidConfig(format!("lambda {l} must be finite and >= 0")));
            }
        }
        if g.lambdas.is_empty() {
            if g.lambda_grid == 0 {
                return Err(Error::InvalidConfig("lambda_grid must be >= 1".into()));
            }
            if let Some(&c) = g.max_costs.iter().find(|&&c| c <= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "the generated lambda grid needs positive budgets, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// `size` hinge weights logarithmically spaced across the two decades
/// around a budget's order of magnitude: for C with magnitude m the
/// grid spans [10^(m-1), 10^(m+1)]; a single point sits at 10^m.
pub fn lambda_grid(max_cost: f64, size: usize) -> Result<Vec<f64>> {
    if !max_cost.is_finite() || max_cost <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "lambda grid needs a positive budget, got {max_cost}"
        )));
    }
    if size == 0 {
        return Err(Error::InvalidConfig("lambda grid size must be >= 1".into()));
    }
    let m = max_cost.log10().floor();
    if size == 1 {
        return Ok(vec![10f64.powf(m)]);
    }
    let (lo, hi) = (m - 1.0, m + 1.0);
    Ok((0..size)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (size - 1) as f64))
        .collect())
}

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub log: TrainingLog,
    /// Eval records with checkpoint paths relative to `dir`.
    pub models: Vec<EvaluatedModel>,
    /// Whether the final architecture could be scored.
    pub final_eval: FinalEval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalEval {
    Scored,
    /// The final argmax architecture lost the output layer, so only
    /// checkpoint records exist.
    Disconnected,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn save_checkpoint(
    dir: &Path,
    name: &str,
    g: &SuperNetGraph,
    dist: &ArchitectureDistribution,
    params: &ParameterStore,
) -> Result<()> {
    let ckpt = dir.join(name);
    fs::create_dir_all(&ckpt)?;
    params.save(&ckpt.join("params.bin"))?;
    write_file(&ckpt.join("dist.txt"), dist.to_text(g).as_bytes())?;
    Ok(())
}

/// Trains one configured experiment into `out` and scores its
/// checkpoints.
///
/// Artifacts: `config.toml` (the text passed in, byte for byte),
/// `graph.txt`, `log.jsonl` (config header then one record per epoch),
/// `summary.json`, one `ckpt-NNN/` per logged best model plus
/// `ckpt-final/`, and `eval.jsonl` with one model record per scored
/// checkpoint. All records are deterministic for a fixed config.
pub fn run_experiment(cfg: &ExperimentConfig, raw_config: &str, out: &Path) -> Result<RunArtifacts> {
    let g = build_graph_from(&cfg.graph)?;
    let (train, val) = build_dataset(&cfg.dataset)?;
    let budget = cfg.budget.to_budget()?;
    let mut dist = ArchitectureDistribution::new(&g, 0.0, cfg.train.seed);
    let mut params = ParameterStore::init_for_graph(&g, cfg.train.seed);

    fs::create_dir_all(out)?;
    write_file(&out.join("config.toml"), raw_config.as_bytes())?;
    write_file(&out.join("graph.txt"), g.to_text().as_bytes())?;

    let log = run_training(&g, &mut dist, &mut params, &budget, &cfg.train, &train, &val)?;

    let mut lines = String::new();
    lines.push_str(&serde_json::json!({ "config": raw_config }).to_string());
    lines.push('\n');
    for r in &log.records {
        lines.push_str(
            &serde_json::to_string(r).map_err(|e| Error::Parse(format!("epoch record: {e}")))?,
        );
        lines.push('\n');
    }
    write_file(&out.join("log.jsonl"), lines.as_bytes())?;

    // Score every per-cost best checkpoint, then the final state.
    let evaluator = cfg.budget.cost.evaluator();
    let mut models = Vec::new();
    for (i, b) in log.best.iter().enumerate() {
        let name = format!("ckpt-{i:03}");
        save_checkpoint(out, &name, &g, &b.dist, &b.params)?;
        let meta = ModelMeta {
            checkpoint: name,
            lambda: cfg.budget.lambda,
            max_cost: cfg.budget.max_cost,
            seed: cfg.train.seed,
            epoch: b.epoch,
        };
        models.push(evaluate_model(&g, &b.dist, &b.params, &val, &evaluator, cfg.eval.mode, &meta)?);
    }
    save_checkpoint(out, "ckpt-final", &g, &dist, &params)?;
    let final_meta = ModelMeta {
        checkpoint: "ckpt-final".into(),
        lambda: cfg.budget.lambda,
        max_cost: cfg.budget.max_cost,
        seed: cfg.train.seed,
        epoch: cfg.train.epochs,
    };
    let final_eval =
        match evaluate_model(&g, &dist, &params, &val, &evaluator, cfg.eval.mode, &final_meta) {
            Ok(m) => {
                models.push(m);
                FinalEval::Scored
            }
            Err(Error::NotConnected) => FinalEval::Disconnected,
            Err(e) => return Err(e),
        };

    let mut eval_buf = Vec::new();
    write_models(&mut eval_buf, &models)?;
    write_file(&out.join("eval.jsonl"), &eval_buf)?;

    let summary = serde_json::json!({
        "config": raw_config,
        "summary": log.summary,
        "final_eval": final_eval,
    });
    write_file(&out.join("summary.json"), summary.to_string().as_bytes())?;

    Ok(RunArtifacts { dir: out.to_path_buf(), log, models, final_eval })
}

/// Outputs of a finished sweep.
#[derive(Debug)]
pub struct SweepArtifacts {
    pub run_dirs: Vec<PathBuf>,
    /// Every eval record across runs, checkpoints relative to the
    /// sweep root.
    pub records: Vec<EvaluatedModel>,
    pub front: Vec<EvaluatedModel>,
}

/// Expands the grid in deterministic order: budgets outermost, then
/// hinge weights, then seeds.
fn expand_grid(cfg: &SweepConfig) -> Result<Vec<ExperimentConfig>> {
    let mut runs = Vec::new();
    for &max_cost in &cfg.sweep.max_costs {
        let lambdas = if cfg.sweep.lambdas.is_empty() {
            lambda_grid(max_cost, cfg.sweep.lambda_grid)?
        } else {
            cfg.sweep.lambdas.clone()
        };
        for &lambda in &lambdas {
            for &seed in &cfg.sweep.seeds {
                let mut train = cfg.train.clone();
                train.seed = seed;
                runs.push(ExperimentConfig {
                    graph: cfg.graph.clone(),
                    dataset: cfg.dataset.clone(),
                    budget: BudgetSpec { max_cost, lambda, cost: cfg.sweep.cost.clone() },
                    train,
                    eval: cfg.sweep.eval.clone(),
                });
            }
        }
    }
    Ok(runs)
}

/// Runs every grid point in a fixed-size worker pool, one experiment
/// per worker at a time, each writing only its own `run-NNN/`
/// directory. Aggregates all eval records, writes `records.jsonl`,
/// `pareto.csv`, and `pareto.dat` at the sweep root, and copies the
/// sweep config verbatim.
pub fn run_sweep(cfg: &SweepConfig, raw_config: &str, out: &Path) -> Result<SweepArtifacts> {
    cfg.validate()?;
    let runs = expand_grid(cfg)?;
    fs::create_dir_all(out)?;
    write_file(&out.join("config.toml"), raw_config.as_bytes())?;

    let workers = if cfg.sweep.workers == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cfg.sweep.workers
    }
    .min(runs.len());

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<RunArtifacts>)>();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let runs = &runs;
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= runs.len() {
                    break;
                }
                let dir = out.join(format!("run-{i:03}"));
                let result = runs[i]
                    .to_toml()
                    .and_then(|toml| run_experiment(&runs[i], &toml, &dir));
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
    });

    let mut finished: Vec<Option<Result<RunArtifacts>>> = (0..runs.len()).map(|_| None).collect();
    for (i, result) in rx {
        finished[i] = Some(result);
    }

    let mut run_dirs = Vec::new();
    let mut records = Vec::new();
    for (i, slot) in finished.into_iter().enumerate() {
        let art = slot.ok_or_else(|| {
            Error::InvalidConfig(format!("sweep worker dropped run {i} without reporting"))
        })??;
        for mut m in art.models {
            m.checkpoint = format!("run-{i:03}/{}", m.checkpoint);
            records.push(m);
        }
        run_dirs.push(art.dir);
    }

    let front = pareto_front(&records)?;
    let mut buf = Vec::new();
    write_models(&mut buf, &records)?;
    write_file(&out.join("records.jsonl"), &buf)?;
    write_file(&out.join("pareto.csv"), crate::selection::front_to_csv(&front).as_bytes())?;
    write_file(&out.join("pareto.dat"), plot_data(&records, &front).as_bytes())?;

    Ok(SweepArtifacts { run_dirs, records, front })
}
