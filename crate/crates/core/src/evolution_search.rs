//! Stage-2 search: relative multi-task performance, evolutionary search
//! under a parameter budget, and the random-search baseline.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::Graph;
use crate::search_space::{
    count_params, sample_block, sample_cell_config, sample_layer, CellConfig, CellSpace, LayerId, MultiTaskGraph,
    SampleMode,
};
use crate::supernet::Supernet;
use crate::tasks::{batch_images, evaluate, MetricSpec, MetricTable, Prediction, Scene, TaskSpec};
use crate::transformer::{forward_layers, run_head, HeadSpec};

/// Metric specs per task, in task order.
pub fn metric_layout(tasks: &[TaskSpec]) -> Vec<Vec<MetricSpec>> {
    tasks.iter().map(|t| t.metrics.clone()).collect()
}

fn check_table(m: &MetricTable, layout: &[Vec<MetricSpec>]) -> Result<()> {
    if m.values.len() != layout.len() || m.values.iter().zip(layout).any(|(v, s)| v.len() != s.len()) {
        return Err(Error::Metric("metric table does not match the task metric layout".into()));
    }
    if m.values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite metric value".into()));
    }
    Ok(())
}

/// Per-metric means over a population.
pub fn population_means(pop: &[MetricTable], layout: &[Vec<MetricSpec>]) -> Result<MetricTable> {
    if pop.is_empty() {
        return Err(Error::Metric("empty population".into()));
    }
    let mut sums: Vec<Vec<f64>> = layout.iter().map(|s| vec![0.0; s.len()]).collect();
    for m in pop {
        check_table(m, layout)?;
        for (acc, row) in sums.iter_mut().zip(&m.values) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    let n = pop.len() as f64;
    Ok(MetricTable { values: sums.into_iter().map(|r| r.into_iter().map(|v| v / n).collect()).collect() })
}

/// Relative performance of `m` on task `k` against reference values,
/// positive when better. Shared by the population and baseline forms.
fn relative_task(m: &MetricTable, reference: &MetricTable, layout: &[Vec<MetricSpec>], k: usize) -> Result<f64> {
    let specs = layout.get(k).ok_or_else(|| Error::Argument(format!("no task {k}")))?;
    if specs.is_empty() {
        return Err(Error::Metric(format!("task {k} has no metrics")));
    }
    let mut s = 0.0;
    for (j, spec) in specs.iter().enumerate() {
        let r = reference.values[k][j];
        if r == 0.0 {
            return Err(Error::Metric(format!("reference value of metric {} for task {k} is zero", spec.name)));
        }
        let d = (m.values[k][j] - r) / r;
        s += if spec.lower_is_better { -d } else { d };
    }
    Ok(s / specs.len() as f64)
}

/// gamma(T_k; a) against the population mean.
pub fn gamma_task(m: &MetricTable, pop: &[MetricTable], layout: &[Vec<MetricSpec>], k: usize) -> Result<f64> {
    check_table(m, layout)?;
    let means = population_means(pop, layout)?;
    relative_task(m, &means, layout, k)
}

/// gamma(a): task-averaged relative performance against the population mean.
pub fn gamma_overall(m: &MetricTable, pop: &[MetricTable], layout: &[Vec<MetricSpec>]) -> Result<f64> {
    check_table(m, layout)?;
    let means = population_means(pop, layout)?;
    gamma_against(m, &means, layout)
}

fn gamma_against(m: &MetricTable, means: &MetricTable, layout: &[Vec<MetricSpec>]) -> Result<f64> {
    if layout.is_empty() {
        return Err(Error::Metric("no tasks".into()));
    }
    let mut s = 0.0;
    for k in 0..layout.len() {
        s += relative_task(m, means, layout, k)?;
    }
    Ok(s / layout.len() as f64)
}

/// gamma of every member of `pop` against the population itself.
pub fn gamma_population(pop: &[MetricTable], layout: &[Vec<MetricSpec>]) -> Result<Vec<f64>> {
    let means = population_means(pop, layout)?;
    pop.iter().map(|m| gamma_against(m, &means, layout)).collect()
}

/// Relative performance against single-task baselines, in percent.
pub fn delta_t(model: &MetricTable, baseline: &MetricTable, layout: &[Vec<MetricSpec>]) -> Result<f64> {
    check_table(model, layout)?;
    check_table(baseline, layout)?;
    Ok(100.0 * gamma_against(model, baseline, layout)?)
}

/// An evaluated subnet.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub cfg: CellConfig,
    pub metrics: MetricTable,
    pub params: usize,
    pub gamma: Option<f64>,
    /// Generation in which the config was first evaluated.
    pub generation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvoSettings {
    pub population: usize,
    pub generations: usize,
    pub parents: usize,
    pub p_mut_layer: f64,
    pub p_mut_block: f64,
    /// Maximum parameter count of an admitted subnet.
    pub constraint: usize,
    pub seed: u64,
}

impl Default for EvoSettings {
    fn default() -> Self {
        Self {
            population: 50,
            generations: 20,
            parents: 10,
            p_mut_layer: 0.4,
            p_mut_block: 0.2,
            constraint: usize::MAX,
            seed: 0,
        }
    }
}

impl EvoSettings {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.generations == 0 || self.parents == 0 {
            return Err(config_err!("population, generations and parents must be positive"));
        }
        if self.parents > self.population {
            return Err(config_err!("parents ({}) exceed population ({})", self.parents, self.population));
        }
        for p in [self.p_mut_layer, self.p_mut_block] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err!("mutation probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Which parts of a config a mutation resampled.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MutationTrace {
    pub layers: Vec<LayerId>,
    /// `(layer, block index)` pairs.
    pub blocks: Vec<(LayerId, usize)>,
}

/// Resamples each layer's depth and embedding with probability `p_layer`,
/// then each block's heads, MLP ratio and window with probability `p_block`.
/// New blocks from depth growth are sampled uniformly.
pub fn mutate_traced<R: Rng + ?Sized>(
    parent: &CellConfig,
    space: &CellSpace,
    rng: &mut R,
    p_layer: f64,
    p_block: f64,
) -> (CellConfig, MutationTrace) {
    let mut child = parent.clone();
    let mut trace = MutationTrace::default();
    for (&id, layer) in child.layers.iter_mut() {
        if rng.random_bool(p_layer) {
            trace.layers.push(id);
            let fresh = sample_layer(space, id, SampleMode::Uniform, rng);
            layer.embed_dim = fresh.embed_dim;
            let depth = fresh.depth();
            layer.blocks.truncate(depth);
            while layer.blocks.len() < depth {
                layer.blocks.push(sample_block(space, id.level, SampleMode::Uniform, rng));
            }
        }
        for (i, b) in layer.blocks.iter_mut().enumerate() {
            if rng.random_bool(p_block) {
                trace.blocks.push((id, i));
                *b = sample_block(space, id.level, SampleMode::Uniform, rng);
            }
        }
    }
    (child, trace)
}

pub fn mutate<R: Rng + ?Sized>(parent: &CellConfig, space: &CellSpace, rng: &mut R, settings: &EvoSettings) -> CellConfig {
    mutate_traced(parent, space, rng, settings.p_mut_layer, settings.p_mut_block).0
}

/// Takes each layer, blocks included, from `a` or `b` with equal odds.
pub fn crossover<R: Rng + ?Sized>(a: &CellConfig, b: &CellConfig, rng: &mut R) -> Result<CellConfig> {
    let ka: Vec<_> = a.layers.keys().collect();
    let kb: Vec<_> = b.layers.keys().collect();
    if ka != kb {
        return Err(config_err!("crossover of configs over different layers"));
    }
    let layers = a
        .layers
        .iter()
        .map(|(&id, la)| {
            let donor = if rng.random_bool(0.5) { la } else { &b.layers[&id] };
            (id, donor.clone())
        })
        .collect();
    Ok(CellConfig { layers })
}

/// Parameter counting and metric evaluation of candidate subnets.
pub trait Evaluator {
    fn params(&self, cfg: &CellConfig) -> Result<usize>;
    fn metrics(&mut self, cfg: &CellConfig) -> Result<MetricTable>;
}

/// Search space of a stage-2 search.
#[derive(Clone, Debug)]
pub struct SearchProblem {
    pub space: CellSpace,
    pub layers: BTreeSet<LayerId>,
    pub layout: Vec<Vec<MetricSpec>>,
}

impl SearchProblem {
    pub fn new(space: CellSpace, graph: &MultiTaskGraph, tasks: &[TaskSpec]) -> Self {
        Self { space, layers: graph.layers(), layout: metric_layout(tasks) }
    }
}

/// Evaluated configs of one search, with the cache keyed by config.
struct Pool<'e, E: Evaluator> {
    eval: &'e mut E,
    members: Vec<Candidate>,
    index: HashMap<String, usize>,
}

impl<'e, E: Evaluator> Pool<'e, E> {
    fn new(eval: &'e mut E) -> Self {
        Self { eval, members: Vec::new(), index: HashMap::new() }
    }

    fn contains(&self, cfg: &CellConfig) -> bool {
        self.index.contains_key(&cfg.key())
    }

    fn evaluate(&mut self, cfg: &CellConfig, generation: usize) -> Result<usize> {
        let key = cfg.key();
        if let Some(&i) = self.index.get(&key) {
            return Ok(i);
        }
        let params = self.eval.params(cfg)?;
        let metrics = self.eval.metrics(cfg)?;
        self.members.push(Candidate { cfg: cfg.clone(), metrics, params, gamma: None, generation });
        self.index.insert(key, self.members.len() - 1);
        Ok(self.members.len() - 1)
    }

    fn gammas(&mut self, layout: &[Vec<MetricSpec>]) -> Result<Vec<f64>> {
        let tables: Vec<MetricTable> = self.members.iter().map(|c| c.metrics.clone()).collect();
        let g = gamma_population(&tables, layout)?;
        for (c, v) in self.members.iter_mut().zip(&g) {
            c.gamma = Some(*v);
        }
        Ok(g)
    }
}

const MAX_TRIES: usize = 100;

fn feasible<E: Evaluator>(eval: &E, cfg: &CellConfig, constraint: usize) -> Result<bool> {
    Ok(eval.params(cfg)? <= constraint)
}

fn check_feasible<E: Evaluator>(problem: &SearchProblem, eval: &E, constraint: usize) -> Result<CellConfig> {
    let min = sample_cell_config(&problem.space, &problem.layers, SampleMode::Min, &mut ChaCha8Rng::seed_from_u64(0));
    let p = eval.params(&min)?;
    if p > constraint {
        return Err(Error::Constraint(format!("smallest subnet has {p} parameters, budget is {constraint}")));
    }
    Ok(min)
}

/// Uniform sample satisfying the constraint, preferring configs not yet
/// evaluated; the minimal config after `MAX_TRIES` failures.
fn random_feasible<E: Evaluator, R: Rng + ?Sized>(
    problem: &SearchProblem,
    pool: &Pool<'_, E>,
    constraint: usize,
    min: &CellConfig,
    rng: &mut R,
) -> Result<CellConfig> {
    for _ in 0..MAX_TRIES {
        let c = sample_cell_config(&problem.space, &problem.layers, SampleMode::Uniform, rng);
        if !pool.contains(&c) && feasible(&*pool.eval, &c, constraint)? {
            return Ok(c);
        }
    }
    Ok(min.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    /// Best gamma among configs evaluated up to this generation.
    pub best_gamma: f64,
    /// Mean gamma of this generation's population.
    pub mean_gamma: f64,
    pub best_params: usize,
    /// Unique evaluations so far.
    pub evaluations: usize,
}

/// Outcome of a search. `ranked` holds every evaluated candidate, best
/// first, with gamma against the whole pool.
#[derive(Clone, Debug)]
pub struct SearchResult {
    pub ranked: Vec<Candidate>,
    pub history: Vec<GenerationRecord>,
    pub evaluations: usize,
}

impl SearchResult {
    pub fn best(&self) -> &Candidate {
        &self.ranked[0]
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from("generation,best_gamma,mean_gamma,best_params,evaluations\n");
        for r in &self.history {
            s.push_str(&format!(
                "{},{:.12e},{:.12e},{},{}\n",
                r.generation, r.best_gamma, r.mean_gamma, r.best_params, r.evaluations
            ));
        }
        s
    }
}

fn rank(members: &mut [Candidate]) {
    // ties keep evaluation order
    members.sort_by(|a, b| b.gamma.unwrap().total_cmp(&a.gamma.unwrap()));
}

/// Evolutionary search. Generation 0 is the random initial population;
/// each later generation keeps the top `parents` of the evaluated pool and
/// refills with equal numbers of mutation and crossover children.
pub fn evolve<E: Evaluator>(problem: &SearchProblem, eval: &mut E, settings: &EvoSettings) -> Result<SearchResult> {
    settings.validate()?;
    let min = check_feasible(problem, eval, settings.constraint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut pool = Pool::new(eval);
    let mut population = Vec::with_capacity(settings.population);
    for _ in 0..settings.population {
        let c = random_feasible(problem, &pool, settings.constraint, &min, &mut rng)?;
        population.push(pool.evaluate(&c, 0)?);
    }
    let mut generations = vec![population.clone()];

    for gen in 1..settings.generations {
        let gamma = pool.gammas(&problem.layout)?;
        let mut order: Vec<usize> = (0..pool.members.len()).collect();
        order.sort_by(|&a, &b| gamma[b].total_cmp(&gamma[a]));
        let parents: Vec<usize> = order[..settings.parents.min(order.len())].to_vec();
        let parent_cfgs: Vec<CellConfig> = parents.iter().map(|&i| pool.members[i].cfg.clone()).collect();

        let n_children = settings.population - parents.len();
        let n_mut = n_children.div_ceil(2);
        let mut next = parents.clone();
        for slot in 0..n_children {
            let mut child = None;
            for _ in 0..MAX_TRIES {
                let c = if slot < n_mut {
                    let p = parent_cfgs.choose(&mut rng).expect("parents");
                    mutate(p, &problem.space, &mut rng, settings)
                } else {
                    let a = parent_cfgs.choose(&mut rng).expect("parents");
                    let b = parent_cfgs.choose(&mut rng).expect("parents");
                    crossover(a, b, &mut rng)?
                };
                if !pool.contains(&c) && feasible(&*pool.eval, &c, settings.constraint)? {
                    child = Some(c);
                    break;
                }
            }
            let c = match child {
                Some(c) => c,
                None => random_feasible(problem, &pool, settings.constraint, &min, &mut rng)?,
            };
            next.push(pool.evaluate(&c, gen)?);
        }
        generations.push(next);
    }

    // final bookkeeping against the complete pool
    let gamma = pool.gammas(&problem.layout)?;
    let mut history = Vec::with_capacity(generations.len());
    let mut best: Option<usize> = None;
    for (gen, members) in generations.iter().enumerate() {
        for (i, c) in pool.members.iter().enumerate() {
            if c.generation == gen && best.is_none_or(|b| gamma[i] > gamma[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("generation 0 is non-empty");
        let mean = members.iter().map(|&i| gamma[i]).sum::<f64>() / members.len() as f64;
        history.push(GenerationRecord {
            generation: gen,
            best_gamma: gamma[b],
            mean_gamma: mean,
            best_params: pool.members[b].params,
            evaluations: pool.members.iter().filter(|c| c.generation <= gen).count(),
        });
    }
    let evaluations = pool.members.len();
    let mut ranked = pool.members;
    rank(&mut ranked);
    Ok(SearchResult { ranked, history, evaluations })
}

/// Uniform constraint-filtered sampling until `budget` unique configs are
/// evaluated (or the sampler stops finding new ones).
pub fn random_search<E: Evaluator>(
    problem: &SearchProblem,
    eval: &mut E,
    budget: usize,
    constraint: usize,
    seed: u64,
) -> Result<SearchResult> {
    if budget == 0 {
        return Err(Error::Argument("random search budget must be positive".into()));
    }
    let min = check_feasible(problem, eval, constraint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Pool::new(eval);
    let mut misses = 0;
    while pool.members.len() < budget && misses < MAX_TRIES {
        let c = random_feasible(problem, &pool, constraint, &min, &mut rng)?;
        if pool.contains(&c) {
            misses += 1;
            continue;
        }
        pool.evaluate(&c, 0)?;
    }
    let gamma = pool.gammas(&problem.layout)?;
    let b = (0..gamma.len()).fold(0, |b, i| if gamma[i] > gamma[b] { i } else { b });
    let history = vec![GenerationRecord {
        generation: 0,
        best_gamma: gamma[b],
        mean_gamma: gamma.iter().sum::<f64>() / gamma.len() as f64,
        best_params: pool.members[b].params,
        evaluations: pool.members.len(),
    }];
    let evaluations = pool.members.len();
    let mut ranked = pool.members;
    rank(&mut ranked);
    Ok(SearchResult { ranked, history, evaluations })
}

/// Best gamma of each of two searches, both measured against the union of
/// their evaluated pools (shared configs counted once).
pub fn compare_on_union(a: &SearchResult, b: &SearchResult, layout: &[Vec<MetricSpec>]) -> Result<(f64, f64)> {
    let mut seen = BTreeMap::new();
    for c in a.ranked.iter().chain(&b.ranked) {
        seen.entry(c.cfg.key()).or_insert_with(|| c.metrics.clone());
    }
    let tables: Vec<MetricTable> = seen.into_values().collect();
    let means = population_means(&tables, layout)?;
    let best = |r: &SearchResult| -> Result<f64> {
        r.ranked.iter().try_fold(f64::NEG_INFINITY, |m, c| Ok(m.max(gamma_against(&c.metrics, &means, layout)?)))
    };
    Ok((best(a)?, best(b)?))
}

/// Runs every head of `graph` on `scenes` with the subnet `cfg` inherited
/// from the supernet and decodes the outputs.
pub fn subnet_predictions(
    sn: &Supernet,
    graph: &MultiTaskGraph,
    cfg: &CellConfig,
    scenes: &[Scene],
    tasks: &[TaskSpec],
    batch: usize,
) -> Result<Vec<Prediction>> {
    if scenes.is_empty() {
        return Err(Error::Argument("no scenes to predict".into()));
    }
    if tasks.len() != graph.num_tasks() {
        return Err(Error::Argument(format!("{} tasks for a {}-task graph", tasks.len(), graph.num_tasks())));
    }
    let mut preds: Vec<Option<Prediction>> = vec![None; tasks.len()];
    let layers = graph.layers();
    for chunk in scenes.chunks(batch.max(1)) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let mut g = Graph::new();
        let mut b = sn.bind();
        let img = g.constant(batch_images(&refs)?);
        let side = chunk[0].side;
        let feats = forward_layers(&mut g, &mut b, &sn.space, cfg, &layers, img)?;
        for (k, spec) in tasks.iter().enumerate() {
            let f: Vec<(u8, _)> = graph.task_attach(k).iter().map(|l| (l.level, feats[l])).collect();
            let out = run_head(&mut g, &mut b, k, &spec.head, &f, (side, side), sn.space.patch_size)?;
            let p = Prediction::from_output(g.value(out), spec);
            match &mut preds[k] {
                Some(acc) => acc.extend(p)?,
                slot @ None => *slot = Some(p),
            }
        }
    }
    Ok(preds.into_iter().map(|p| p.expect("at least one batch")).collect())
}

/// Scores subnets of a trained supernet on a held-out split.
pub struct SupernetEvaluator<'a> {
    pub supernet: &'a Supernet,
    pub graph: MultiTaskGraph,
    pub scenes: &'a [Scene],
    pub tasks: &'a [TaskSpec],
    pub heads: Vec<HeadSpec>,
    pub batch: usize,
}

impl<'a> SupernetEvaluator<'a> {
    pub fn new(supernet: &'a Supernet, graph: MultiTaskGraph, scenes: &'a [Scene], tasks: &'a [TaskSpec]) -> Self {
        let heads = tasks.iter().map(|t| t.head).collect();
        Self { supernet, graph, scenes, tasks, heads, batch: 8 }
    }
}

impl Evaluator for SupernetEvaluator<'_> {
    fn params(&self, cfg: &CellConfig) -> Result<usize> {
        count_params(&self.graph, cfg, &self.supernet.space, &self.heads)
    }

    fn metrics(&mut self, cfg: &CellConfig) -> Result<MetricTable> {
        let preds = subnet_predictions(self.supernet, &self.graph, cfg, self.scenes, self.tasks, self.batch)?;
        evaluate(&preds, self.scenes, self.tasks)
    }
}

/// Analytic stand-in for a trained supernet: a single lower-is-better
/// metric `1 + |params - target|`, so the best subnet has exactly `target`
/// parameters.
pub struct SurrogateEvaluator {
    pub space: CellSpace,
    pub graph: MultiTaskGraph,
    pub heads: Vec<HeadSpec>,
    pub target: usize,
}

impl SurrogateEvaluator {
    pub fn layout() -> Vec<Vec<MetricSpec>> {
        vec![vec![MetricSpec {
            name: "distance".into(),
            kind: crate::tasks::MetricKind::MeanL1,
            lower_is_better: true,
        }]]
    }
}

impl Evaluator for SurrogateEvaluator {
    fn params(&self, cfg: &CellConfig) -> Result<usize> {
        count_params(&self.graph, cfg, &self.space, &self.heads)
    }

    fn metrics(&mut self, cfg: &CellConfig) -> Result<MetricTable> {
        let p = self.params(cfg)?;
        Ok(MetricTable { values: vec![vec![1.0 + p.abs_diff(self.target) as f64]] })
    }
}
