//! End-to-end pipeline behind the `mtnas` command line: supernet
//! training, skeleton and cell search, and reporting.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::evolution_search::{
    compare_on_union, delta_t, evolve, metric_layout, random_search, subnet_predictions, Candidate, EvoSettings,
    SearchProblem, SearchResult, SupernetEvaluator,
};
use crate::optim::AdamWConfig;
use crate::search_space::{
    sample_cell_config, union_skeletons, CellConfig, CellSpace, MultiTaskGraph, Preset, SampleMode, ScaleMode,
    SkeletonFile,
};
use crate::skeleton_search::{discretize, train_supernet, Selection, TrainConfig};
use crate::supernet::{init_supernet, load_checkpoint, save_checkpoint, Supernet};
use crate::tasks::{default_tasks, evaluate, generate_dataset_sized, save_scenes, select_tasks, split, MetricTable, Scene, TaskSpec};

pub const CONFIG_VERSION: u32 = 1;
/// Relative output directories are resolved against this variable when set.
pub const OUTPUT_ROOT_ENV: &str = "MTNAS_OUTPUT_ROOT";

pub const CHECKPOINT: &str = "supernet.ckpt";
pub const TRAIN_HISTORY: &str = "train_history.csv";
pub const BASELINE_DIR: &str = "baseline";
pub const BASELINE_METRICS: &str = "baseline_metrics.json";
pub const STAGE1_FILE: &str = "stage1.json";
pub const SEARCH_SUMMARY: &str = "search_summary.json";
pub const SEARCH_REPORT: &str = "search_report.csv";
pub const REPORT_DIR: &str = "report";
pub const DATA_DIR: &str = "data";
pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub scenes: usize,
    #[serde(default = "default_side")]
    pub side: usize,
    /// Write each split to `data/<split>.bin` during `train`.
    #[serde(default)]
    pub dump: bool,
}

fn default_side() -> usize {
    crate::tasks::SIDE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub arch_lr: f64,
    pub tau0: f64,
    pub tau_min: f64,
    #[serde(default = "default_selection")]
    pub selection: Selection,
}

fn default_selection() -> Selection {
    Selection::Gumbel
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub population: usize,
    pub generations: usize,
    pub parents: usize,
    pub p_mut_layer: f64,
    pub p_mut_block: f64,
    /// Maximum parameter counts, one search per entry.
    pub budgets: Vec<usize>,
    #[serde(default)]
    pub random_baseline: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

fn default_eval_batch() -> usize {
    8
}

/// A run description as read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub mode: String,
    pub preset: String,
    pub seed: u64,
    #[serde(default = "all_tasks")]
    pub tasks: Vec<String>,
    pub output_dir: String,
    pub data: DataSection,
    pub train: TrainSection,
    pub search: SearchSection,
}

fn all_tasks() -> Vec<String> {
    default_tasks().into_iter().map(|t| t.id).collect()
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| config_err!("cannot read {}: {e}", path.display()))?;
        Self::from_toml(&s)
    }

    pub fn scale_mode(&self) -> Result<ScaleMode> {
        self.mode.parse().map_err(|_| config_err!("unknown mode {:?} (expected single or multi)", self.mode))
    }

    pub fn space(&self) -> Result<CellSpace> {
        Ok(CellSpace::from_preset(self.preset.parse::<Preset>()?))
    }

    pub fn task_specs(&self) -> Result<Vec<TaskSpec>> {
        select_tasks(&self.tasks)
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(config_err!("config version {} unsupported (expected {CONFIG_VERSION})", self.version));
        }
        self.scale_mode()?;
        let space = self.space()?;
        space.validate()?;
        if !space.is_runnable() {
            return Err(config_err!("preset {:?} is for counting only and cannot be trained", self.preset));
        }
        if self.tasks.is_empty() {
            return Err(config_err!("at least one task is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.tasks.iter().all(|t| seen.insert(t)) {
            return Err(config_err!("duplicate task in {:?}", self.tasks));
        }
        self.task_specs()?;
        let side = self.data.side;
        if self.data.scenes < 7 {
            return Err(config_err!("need at least 7 scenes so every split is non-empty"));
        }
        if side == 0 || side % (space.patch_size << 3) != 0 {
            return Err(config_err!("scene side {side} must be a multiple of {}", space.patch_size << 3));
        }
        self.train_config()?.validate()?;
        let evo = self.evo_settings(0);
        evo.validate()?;
        if self.search.budgets.is_empty() {
            return Err(config_err!("search.budgets is empty"));
        }
        if self.search.eval_batch == 0 {
            return Err(config_err!("search.eval_batch must be positive"));
        }
        if self.output_dir.is_empty() {
            return Err(config_err!("output_dir is empty"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: AdamWConfig { lr: t.lr, lr_min: t.lr_min, weight_decay: t.weight_decay, ..Default::default() },
            warmup_epochs: t.warmup_epochs,
            arch_lr: t.arch_lr,
            tau0: t.tau0,
            tau_min: t.tau_min,
            selection: t.selection,
            sandwich: true,
            seed: self.seed,
        })
    }

    pub fn evo_settings(&self, constraint: usize) -> EvoSettings {
        let s = &self.search;
        EvoSettings {
            population: s.population,
            generations: s.generations,
            parents: s.parents,
            p_mut_layer: s.p_mut_layer,
            p_mut_block: s.p_mut_block,
            constraint,
            seed: self.seed,
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded. The output
    /// location is left out so moved or copied runs keep their hash.
    /// The config with `output_dir` blanked, so runs in different places compare equal.
    fn canonical(&self) -> RunConfig {
        RunConfig { output_dir: String::new(), ..self.clone() }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.canonical()).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Output directory, resolved against the output-root variable.
    pub fn run_dir(&self) -> PathBuf {
        let p = PathBuf::from(&self.output_dir);
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if p.is_relative() => PathBuf::from(root).join(p),
            _ => p,
        }
    }

    pub fn dataset(&self) -> Result<Vec<Scene>> {
        generate_dataset_sized(self.data.scenes, self.seed, self.data.side)
    }
}

/// A failed command with its process exit code.
#[derive(Debug)]
pub struct CommandError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Argument(_) | Error::Constraint(_) => 2,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

pub type CmdResult<T> = std::result::Result<T, CommandError>;

fn fail(code: i32, message: impl Into<String>) -> CommandError {
    CommandError { code, message: message.into() }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// Records the resolved config next to artifacts whose formats have no
/// room for the hash (checkpoint, subnet configs).
fn write_run_file(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let v = serde_json::json!({ "config_hash": cfg.hash(), "config": cfg.canonical() });
    write(&dir.join(RUN_FILE), &serde_json::to_string_pretty(&v).expect("serializes"))
}

fn with_hash(hash: &str, body: &str) -> String {
    format!("# config_hash: {hash}\n{body}")
}

/// Trains the multi-task supernet, or with `single_task` one minimal
/// single-task network per task for the baseline.
pub fn cmd_train(cfg: &RunConfig, single_task: bool) -> CmdResult<PathBuf> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    let hash = cfg.hash();
    let tasks = cfg.task_specs()?;
    let space = cfg.space()?;
    let mode = cfg.scale_mode()?;
    let data = cfg.dataset()?;
    let (train, val, test) = split(&data);
    let tcfg = cfg.train_config()?;
    write_run_file(cfg, &dir)?;
    if cfg.data.dump {
        for (name, scenes) in [("train", train), ("val", val), ("test", test)] {
            let path = dir.join(DATA_DIR).join(format!("{name}.bin"));
            fs::create_dir_all(path.parent().unwrap()).map_err(Error::from)?;
            save_scenes(&path, scenes)?;
        }
    }

    if !single_task {
        let heads: Vec<_> = tasks.iter().map(|t| t.head).collect();
        let mut sn = init_supernet(&space, mode, &heads, cfg.seed)?;
        let history = train_supernet(&mut sn, train, &tasks, &tcfg)?;
        fs::create_dir_all(&dir).map_err(Error::from)?;
        save_checkpoint(&sn, &dir.join(CHECKPOINT))?;
        write(&dir.join(TRAIN_HISTORY), &with_hash(&hash, &history.to_csv()))?;
        return Ok(dir);
    }

    let base = dir.join(BASELINE_DIR);
    let mut rows = Vec::new();
    for (k, task) in tasks.iter().enumerate() {
        let one = std::slice::from_ref(task);
        let mut sn = init_supernet(&space, mode, &[task.head], cfg.seed.wrapping_add(k as u64))?;
        let tc = TrainConfig { sandwich: false, ..tcfg.clone() };
        let history = train_supernet(&mut sn, train, one, &tc)?;
        write(&base.join(format!("history_{}.csv", task.id)), &with_hash(&hash, &history.to_csv()))?;
        let graph = union_skeletons(&discretize(&sn.skeleton_dist).1)?;
        let min = min_config(&sn.space, &graph);
        let v = evaluate(&subnet_predictions(&sn, &graph, &min, val, one, cfg.search.eval_batch)?, val, one)?;
        let t = evaluate(&subnet_predictions(&sn, &graph, &min, test, one, cfg.search.eval_batch)?, test, one)?;
        rows.push((v.values[0].clone(), t.values[0].clone()));
    }
    let file = BaselineFile {
        config_hash: hash,
        tasks: cfg.tasks.clone(),
        val: MetricTable { values: rows.iter().map(|r| r.0.clone()).collect() },
        test: MetricTable { values: rows.iter().map(|r| r.1.clone()).collect() },
    };
    write(&base.join(BASELINE_METRICS), &serde_json::to_string_pretty(&file).expect("serializes"))?;
    Ok(dir)
}

fn min_config(space: &CellSpace, graph: &MultiTaskGraph) -> CellConfig {
    // min sampling draws no random numbers
    sample_cell_config(space, &graph.layers(), SampleMode::Min, &mut ChaCha8Rng::seed_from_u64(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineFile {
    pub config_hash: String,
    pub tasks: Vec<String>,
    pub val: MetricTable,
    pub test: MetricTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1File {
    pub config_hash: String,
    pub tasks: Vec<String>,
    pub skeletons: Vec<SkeletonFile>,
    pub components: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetRecord {
    pub method: String,
    pub params: usize,
    /// Gamma against the union of the evolutionary and random pools.
    pub gamma: f64,
    pub evaluations: usize,
    pub val: MetricTable,
    pub test: MetricTable,
    pub config_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRecord {
    pub budget: usize,
    pub subnets: Vec<SubnetRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub config_hash: String,
    pub tasks: Vec<String>,
    pub budgets: Vec<BudgetRecord>,
}

fn budget_dir(budget: usize) -> String {
    format!("budget_{budget}")
}

fn candidates_csv(hash: &str, results: &[(&str, &SearchResult)]) -> String {
    let mut s = String::from("method,generation,params,gamma,config_sha\n");
    for (method, r) in results {
        for c in &r.ranked {
            let key = hex::encode(Sha256::digest(c.cfg.key().as_bytes()));
            let _ = writeln!(s, "{method},{},{},{:.12e},{}", c.generation, c.params, c.gamma.unwrap_or(f64::NAN), &key[..16]);
        }
    }
    with_hash(hash, &s)
}

/// Stage 1 (discretize and union) and stage 2 (evolution per budget).
/// `budgets` overrides the configured list when non-empty.
pub fn cmd_search(cfg: &RunConfig, budgets: &[usize]) -> CmdResult<PathBuf> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    let ckpt = dir.join(CHECKPOINT);
    if !ckpt.is_file() {
        return Err(fail(2, format!("no checkpoint at {}; run `mtnas train` first", ckpt.display())));
    }
    let hash = cfg.hash();
    let sn = load_checkpoint(&ckpt)?;
    let tasks = cfg.task_specs()?;
    if sn.num_tasks() != tasks.len() || sn.heads != tasks.iter().map(|t| t.head).collect::<Vec<_>>() {
        return Err(fail(2, "checkpoint heads do not match the configured tasks"));
    }
    write_run_file(cfg, &dir)?;
    let data = cfg.dataset()?;
    let (_, val, test) = split(&data);

    let skeletons = discretize(&sn.skeleton_dist).1;
    let graph = union_skeletons(&skeletons)?;
    let stage1 = Stage1File {
        config_hash: hash.clone(),
        tasks: cfg.tasks.clone(),
        skeletons: skeletons.iter().map(SkeletonFile::from).collect(),
        components: graph.component_ids(),
    };
    write(&dir.join(STAGE1_FILE), &serde_json::to_string_pretty(&stage1).expect("serializes"))?;

    let problem = SearchProblem::new(sn.space.clone(), &graph, &tasks);
    let layout = metric_layout(&tasks);
    let budgets = if budgets.is_empty() { cfg.search.budgets.clone() } else { budgets.to_vec() };
    let mut summary = SearchSummary { config_hash: hash.clone(), tasks: cfg.tasks.clone(), budgets: Vec::new() };
    let mut report = String::from("budget,method,params,gamma,evaluations\n");

    for &budget in &budgets {
        let mut eval = SupernetEvaluator::new(&sn, graph.clone(), val, &tasks);
        eval.batch = cfg.search.eval_batch;
        let evo = evolve(&problem, &mut eval, &cfg.evo_settings(budget))?;
        let random = if cfg.search.random_baseline {
            Some(random_search(&problem, &mut eval, evo.evaluations, budget, cfg.seed ^ 0x5eed)?)
        } else {
            None
        };
        let (g_evo, g_rand) = match &random {
            Some(r) => {
                let (a, b) = compare_on_union(&evo, r, &layout)?;
                (a, Some(b))
            }
            None => (evo.best().gamma.expect("ranked"), None),
        };
        let bdir = dir.join(budget_dir(budget));
        write(&bdir.join("evolve_history.csv"), &with_hash(&hash, &evo.history_csv()))?;
        let mut results = vec![("evolve", &evo)];
        let mut entries = vec![("evolve", evo.best(), g_evo, evo.evaluations)];
        if let (Some(r), Some(g)) = (&random, g_rand) {
            results.push(("random", r));
            entries.push(("random", r.best(), g, r.evaluations));
        }
        write(&bdir.join("candidates.csv"), &candidates_csv(&hash, &results))?;
        let mut rec = BudgetRecord { budget, subnets: Vec::new() };
        for (method, best, gamma, evaluations) in entries {
            let file = format!("{}/{method}_subnet.json", budget_dir(budget));
            write(&dir.join(&file), &best.cfg.to_json())?;
            rec.subnets.push(subnet_record(&sn, &graph, &tasks, test, cfg, method, best, gamma, evaluations, file)?);
            let _ = writeln!(report, "{budget},{method},{},{gamma:.12e},{evaluations}", best.params);
        }
        summary.budgets.push(rec);
    }
    write(&dir.join(SEARCH_SUMMARY), &serde_json::to_string_pretty(&summary).expect("serializes"))?;
    write(&dir.join(SEARCH_REPORT), &with_hash(&hash, &report))?;
    Ok(dir)
}

#[allow(clippy::too_many_arguments)]
fn subnet_record(
    sn: &Supernet,
    graph: &MultiTaskGraph,
    tasks: &[TaskSpec],
    test: &[Scene],
    cfg: &RunConfig,
    method: &str,
    best: &Candidate,
    gamma: f64,
    evaluations: usize,
    config_file: String,
) -> Result<SubnetRecord> {
    let preds = subnet_predictions(sn, graph, &best.cfg, test, tasks, cfg.search.eval_batch)?;
    Ok(SubnetRecord {
        method: method.into(),
        params: best.params,
        gamma,
        evaluations,
        val: best.metrics.clone(),
        test: evaluate(&preds, test, tasks)?,
        config_file,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::Persistence(format!("{}: {e}", path.display())))
}

/// Summary tables from a finished run: Delta_T against the single-task
/// baseline (when trained) and gamma-versus-params scatter data.
pub fn cmd_report(cfg: &RunConfig) -> CmdResult<PathBuf> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    let hash = cfg.hash();
    for f in [CHECKPOINT, STAGE1_FILE, SEARCH_SUMMARY] {
        if !dir.join(f).is_file() {
            return Err(fail(3, format!("incomplete run in {}: {f} is missing", dir.display())));
        }
    }
    let summary: SearchSummary = read_json(&dir.join(SEARCH_SUMMARY))?;
    let stage1: Stage1File = read_json(&dir.join(STAGE1_FILE))?;
    if summary.config_hash != hash || stage1.config_hash != hash {
        return Err(fail(3, "run artifacts were produced with a different config"));
    }
    let tasks = cfg.task_specs()?;
    let layout = metric_layout(&tasks);
    let baseline_path = dir.join(BASELINE_DIR).join(BASELINE_METRICS);
    let baseline: Option<BaselineFile> = if baseline_path.is_file() {
        let b: BaselineFile = read_json(&baseline_path)?;
        if b.config_hash != hash {
            return Err(fail(3, "baseline was produced with a different config"));
        }
        Some(b)
    } else {
        None
    };

    let out = dir.join(REPORT_DIR);
    let mut text = String::new();
    let _ = writeln!(text, "config hash: {hash}");
    let _ = writeln!(text, "tasks: {}", cfg.tasks.join(", "));
    let _ = writeln!(text, "stage-1 components: {}", stage1.components.join(" "));
    for (t, s) in cfg.tasks.iter().zip(&stage1.skeletons) {
        let _ = writeln!(text, "  {t}: {}", s.outputs.join("+"));
    }

    let mut dt = String::from("budget,method,params,gamma,delta_t_percent\n");
    if let Some(b) = &baseline {
        let _ = writeln!(dt, "-,single_task_baseline,-,-,{:.6}", delta_t(&b.test, &b.test, &layout)?);
    }
    let _ = writeln!(text, "\nbest subnet per budget (test split):");
    for rec in &summary.budgets {
        for s in &rec.subnets {
            let d = match &baseline {
                Some(b) => Some(delta_t(&s.test, &b.test, &layout)?),
                None => None,
            };
            let ds = d.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into());
            let _ = writeln!(dt, "{},{},{},{:.12e},{ds}", rec.budget, s.method, s.params, s.gamma);
            let _ = writeln!(
                text,
                "  budget {:>9} {:<7} params {:>9} gamma {:+.6} delta_t {}% ({})",
                rec.budget, s.method, s.params, s.gamma, ds, s.config_file
            );
        }
    }
    if baseline.is_none() {
        let _ = writeln!(text, "\nno single-task baseline: run `mtnas train --single-task` for Delta_T");
    }

    let mut scatter = String::from("budget,method,generation,params,gamma,config_sha\n");
    for rec in &summary.budgets {
        let csv = fs::read_to_string(dir.join(budget_dir(rec.budget)).join("candidates.csv")).map_err(Error::from)?;
        for line in csv.lines().skip(2) {
            let _ = writeln!(scatter, "{},{line}", rec.budget);
        }
    }
    write(&out.join("summary.txt"), &text)?;
    write(&out.join("delta_t.csv"), &with_hash(&hash, &dt))?;
    write(&out.join("scatter.csv"), &with_hash(&hash, &scatter))?;
    Ok(out)
}
