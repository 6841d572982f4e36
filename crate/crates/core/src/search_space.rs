//! Macro skeleton space and micro cell space: the layer grid, skeleton
//! enumeration and union, cell configurations, and parameter counting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::transformer::HeadSpec;

/// Number of stride levels (1/4 .. 1/32).
pub const NUM_LEVELS: u8 = 4;

/// Format version written into serialized skeletons and cell configs.
pub const FORMAT_VERSION: u32 = 1;

/// Position in the branched layer grid.
///
/// `level` is the output stride index (1 is stride 1/4, 4 is stride 1/32);
/// `encode_depth` is the deepest encoder level the path visits. Ordering is
/// by depth, then level, which is the canonical skeleton order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerId {
    pub encode_depth: u8,
    pub level: u8,
}

impl LayerId {
    pub fn new(level: u8, encode_depth: u8) -> Result<Self> {
        if !(1..=NUM_LEVELS).contains(&level) || !(level..=NUM_LEVELS).contains(&encode_depth) {
            return Err(Error::Argument(format!("invalid layer (level {level}, depth {encode_depth})")));
        }
        Ok(Self { encode_depth, level })
    }

    /// All ten layers of the grid in canonical order.
    pub fn all() -> Vec<LayerId> {
        (1..=NUM_LEVELS)
            .flat_map(|d| (1..=d).map(move |l| LayerId { encode_depth: d, level: l }))
            .collect()
    }

    pub fn encoder(level: u8) -> Self {
        Self { encode_depth: level, level }
    }

    pub fn is_encoder(self) -> bool {
        self.level == self.encode_depth
    }

    /// The layer feeding this one: the previous encoder layer through a
    /// pool, or the next coarser layer of the same decoder branch through
    /// an upsample. `None` for `b1`, which reads the patch embedding.
    pub fn input(self) -> Option<LayerId> {
        if self.is_encoder() {
            (self.level > 1).then(|| LayerId::encoder(self.level - 1))
        } else {
            Some(LayerId { encode_depth: self.encode_depth, level: self.level + 1 })
        }
    }

    /// The transition component between `input()` and this layer.
    pub fn transition(self) -> Option<Component> {
        if self.is_encoder() {
            (self.level > 1).then_some(Component::Pool(self.level - 1))
        } else {
            Some(Component::Up { depth: self.encode_depth, to_level: self.level })
        }
    }

    pub fn id(self) -> String {
        if self.is_encoder() {
            format!("b{}", self.level)
        } else {
            format!("dec{}_{}", self.encode_depth, self.level)
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("invalid layer id {s:?}"));
        if let Some(rest) = s.strip_prefix("dec") {
            let (d, l) = rest.split_once('_').ok_or_else(bad)?;
            let (d, l) = (d.parse().map_err(|_| bad())?, l.parse().map_err(|_| bad())?);
            if d == l {
                return Err(bad());
            }
            LayerId::new(l, d)
        } else if let Some(rest) = s.strip_prefix('b') {
            let l: u8 = rest.parse().map_err(|_| bad())?;
            LayerId::new(l, l)
        } else {
            Err(bad())
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    Single,
    Multi,
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "multi" => Ok(Self::Multi),
            _ => Err(Error::Argument(format!("unknown scale mode {s:?}"))),
        }
    }
}

/// A single acyclic path through the layer grid ending in the task
/// output(s).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Skeleton {
    /// One output layer.
    Single(LayerId),
    /// One output layer per level, indexed by `level - 1`; the level-4
    /// output is always `b4`.
    Multi([LayerId; 4]),
}

impl Skeleton {
    pub fn mode(&self) -> ScaleMode {
        match self {
            Skeleton::Single(_) => ScaleMode::Single,
            Skeleton::Multi(_) => ScaleMode::Multi,
        }
    }

    pub fn outputs(&self) -> Vec<LayerId> {
        match self {
            Skeleton::Single(l) => vec![*l],
            Skeleton::Multi(ls) => ls.to_vec(),
        }
    }

    /// Every grid layer on the path, in canonical order.
    pub fn layers(&self) -> BTreeSet<LayerId> {
        let mut out = BTreeSet::new();
        for o in self.outputs() {
            let mut cur = Some(o);
            while let Some(l) = cur {
                out.insert(l);
                cur = l.input();
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if let Skeleton::Multi(ls) = self {
            for (i, l) in ls.iter().enumerate() {
                if l.level as usize != i + 1 {
                    return Err(Error::Argument(format!("multi-scale output {i} is at level {}", l.level)));
                }
            }
            if ls[3] != LayerId::encoder(4) {
                return Err(Error::Argument("multi-scale level-4 output must be b4".into()));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        self.outputs().iter().map(|l| l.id()).collect::<Vec<_>>().join("+")
    }
}

/// All skeletons of `mode`, duplicate-free, in canonical order.
pub fn enumerate_skeletons(mode: ScaleMode) -> Vec<Skeleton> {
    match mode {
        ScaleMode::Single => LayerId::all().into_iter().map(Skeleton::Single).collect(),
        ScaleMode::Multi => {
            let mut out = Vec::new();
            for d1 in 1..=NUM_LEVELS {
                for d2 in 2..=NUM_LEVELS {
                    for d3 in 3..=NUM_LEVELS {
                        out.push(Skeleton::Multi([
                            LayerId { encode_depth: d1, level: 1 },
                            LayerId { encode_depth: d2, level: 2 },
                            LayerId { encode_depth: d3, level: 3 },
                            LayerId::encoder(4),
                        ]));
                    }
                }
            }
            out
        }
    }
}

/// Number of joint skeleton assignments for `n_tasks` tasks.
pub fn space_cardinality(mode: ScaleMode, n_tasks: u32) -> Result<BigUint> {
    if n_tasks == 0 {
        return Err(Error::Argument("need at least one task".into()));
    }
    Ok(BigUint::from(enumerate_skeletons(mode).len()).pow(n_tasks))
}

/// Building block of a (multi-task) network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    PatchEmbed,
    Layer(LayerId),
    /// Patch merge from `level` to `level + 1`.
    Pool(u8),
    /// Upsample into `to_level` on the decoder branch of `depth`.
    Up { depth: u8, to_level: u8 },
    /// Output head of task index `0..`.
    Head(usize),
}

impl Component {
    pub fn id(&self) -> String {
        match self {
            Component::PatchEmbed => "patch_embed".into(),
            Component::Layer(l) => l.id(),
            Component::Pool(l) => format!("pool{l}"),
            Component::Up { depth, to_level } => format!("up{depth}_{to_level}"),
            Component::Head(k) => format!("head{}", k + 1),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("invalid component id {s:?}"));
        if s == "patch_embed" {
            return Ok(Component::PatchEmbed);
        }
        if let Some(r) = s.strip_prefix("pool") {
            let l: u8 = r.parse().map_err(|_| bad())?;
            return (1..NUM_LEVELS).contains(&l).then_some(Component::Pool(l)).ok_or_else(bad);
        }
        if let Some(r) = s.strip_prefix("up") {
            let (d, l) = r.split_once('_').ok_or_else(bad)?;
            let (depth, to_level): (u8, u8) = (d.parse().map_err(|_| bad())?, l.parse().map_err(|_| bad())?);
            LayerId::new(to_level, depth).map_err(|_| bad())?;
            return (to_level < depth).then_some(Component::Up { depth, to_level }).ok_or_else(bad);
        }
        if let Some(r) = s.strip_prefix("head") {
            let k: usize = r.parse().map_err(|_| bad())?;
            return (k >= 1).then(|| Component::Head(k - 1)).ok_or_else(bad);
        }
        LayerId::parse(s).map(Component::Layer)
    }

    /// Sort key that is a topological order of the execution DAG.
    fn exec_key(&self) -> (u8, u8, u8, usize) {
        match *self {
            Component::PatchEmbed => (0, 0, 0, 0),
            Component::Layer(l) if l.is_encoder() => (1, 2 * l.level, 0, 0),
            Component::Pool(l) => (1, 2 * l + 1, 0, 0),
            Component::Up { depth, to_level } => (2, depth, 2 * (NUM_LEVELS - to_level), 0),
            Component::Layer(l) => (2, l.encode_depth, 2 * (NUM_LEVELS - l.level) + 1, 0),
            Component::Head(k) => (3, 0, 0, k),
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// Components of `skeleton` serving task `task`, in execution order.
pub fn skeleton_components(skeleton: &Skeleton, task: usize) -> Vec<Component> {
    let mut set = BTreeSet::new();
    set.insert(Component::PatchEmbed);
    for l in skeleton.layers() {
        set.insert(Component::Layer(l));
        if let Some(t) = l.transition() {
            set.insert(t);
        }
    }
    set.insert(Component::Head(task));
    sort_exec(set)
}

fn sort_exec(set: BTreeSet<Component>) -> Vec<Component> {
    let mut v: Vec<Component> = set.into_iter().collect();
    v.sort_by_key(|c| c.exec_key());
    v
}

/// Union of per-task skeletons: the shared multi-task network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiTaskGraph {
    /// Skeleton chosen for each task, indexed by task.
    pub skeletons: Vec<Skeleton>,
    pub components: BTreeSet<Component>,
    pub edges: Vec<(Component, Component)>,
}

impl MultiTaskGraph {
    pub fn mode(&self) -> ScaleMode {
        self.skeletons[0].mode()
    }

    pub fn num_tasks(&self) -> usize {
        self.skeletons.len()
    }

    pub fn layers(&self) -> BTreeSet<LayerId> {
        self.components
            .iter()
            .filter_map(|c| match c {
                Component::Layer(l) => Some(*l),
                _ => None,
            })
            .collect()
    }

    /// Output layers each task's head reads from.
    pub fn task_attach(&self, task: usize) -> Vec<LayerId> {
        self.skeletons[task].outputs()
    }

    /// Components in execution order.
    pub fn execution_order(&self) -> Vec<Component> {
        sort_exec(self.components.clone())
    }

    pub fn component_ids(&self) -> Vec<String> {
        self.execution_order().iter().map(|c| c.id()).collect()
    }
}

/// Least common union of the skeletons assigned to each task
/// (`assignments[k]` serves task `k`).
pub fn union_skeletons(assignments: &[Skeleton]) -> Result<MultiTaskGraph> {
    let first = assignments.first().ok_or_else(|| Error::Argument("empty skeleton assignment".into()))?;
    let mut components = BTreeSet::new();
    for (k, s) in assignments.iter().enumerate() {
        s.validate()?;
        if s.mode() != first.mode() {
            return Err(Error::Argument("skeletons mix single- and multi-scale modes".into()));
        }
        components.extend(skeleton_components(s, k));
    }
    let edges = build_edges(&components, assignments);
    Ok(MultiTaskGraph { skeletons: assignments.to_vec(), components, edges })
}

fn build_edges(components: &BTreeSet<Component>, skeletons: &[Skeleton]) -> Vec<(Component, Component)> {
    let mut edges = Vec::new();
    for c in sort_exec(components.clone()) {
        if let Component::Layer(l) = c {
            match (l.input(), l.transition()) {
                (Some(src), Some(t)) => {
                    edges.push((Component::Layer(src), t));
                    edges.push((t, c));
                }
                _ => edges.push((Component::PatchEmbed, c)),
            }
        }
    }
    for (k, s) in skeletons.iter().enumerate() {
        for o in s.outputs() {
            edges.push((Component::Layer(o), Component::Head(k)));
        }
    }
    edges
}

/// Graph containing every layer of the grid and a head per task. The
/// nominal skeleton of each task is the deepest one.
pub fn full_graph(mode: ScaleMode, n_tasks: usize) -> Result<MultiTaskGraph> {
    let all = enumerate_skeletons(mode);
    let deepest = *all.last().expect("non-empty skeleton space");
    let mut g = union_skeletons(&vec![deepest; n_tasks])?;
    for s in &all {
        for k in 0..n_tasks {
            g.components.extend(skeleton_components(s, k));
        }
    }
    g.edges = build_edges(&g.components, &g.skeletons);
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperSmall,
    PaperBase,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-small" => Ok(Preset::PaperSmall),
            "paper-base" => Ok(Preset::PaperBase),
            _ => Err(config_err!("unknown space preset {s:?} (expected desk, paper-small or paper-base)")),
        }
    }
}

/// Choice lists of the micro (cell) space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpace {
    pub preset: Preset,
    /// Embedding dimension choices per level (index `level - 1`).
    pub embed_choices: [Vec<usize>; 4],
    /// Head-count choices per level.
    pub head_choices: [Vec<usize>; 4],
    pub depth_choices: Vec<usize>,
    pub mlp_ratio_choices: Vec<f64>,
    pub window_choices: Vec<usize>,
    pub patch_size: usize,
    pub in_channels: usize,
}

impl CellSpace {
    /// Desk-scale space for 64x64 single-channel inputs.
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            embed_choices: [vec![8, 12, 16], vec![16, 24, 32], vec![32, 48, 64], vec![64, 96, 128]],
            head_choices: [vec![1, 2, 4], vec![1, 2, 4], vec![1, 2, 4], vec![1, 2, 4]],
            depth_choices: vec![1, 2],
            mlp_ratio_choices: vec![2.0, 4.0],
            window_choices: vec![2, 4, 8],
            patch_size: 4,
            in_channels: 1,
        }
    }

    /// Published cell table, smaller size class. Used for counting only.
    pub fn paper_small() -> Self {
        Self {
            preset: Preset::PaperSmall,
            embed_choices: [vec![64, 96, 128], vec![160, 192, 224], vec![352, 384, 416], vec![732, 768, 800]],
            head_choices: [vec![2, 3, 4], vec![5, 6, 7], vec![11, 12, 13], vec![23, 24, 25]],
            depth_choices: vec![2, 4],
            mlp_ratio_choices: vec![3.5, 4.0],
            window_choices: vec![5, 7, 9],
            patch_size: 4,
            in_channels: 3,
        }
    }

    /// Published cell table, larger size class. Used for counting only.
    pub fn paper_base() -> Self {
        Self {
            preset: Preset::PaperBase,
            embed_choices: [vec![96, 128, 160], vec![192, 256, 320], vec![448, 512, 576], vec![960, 1024, 1088]],
            head_choices: [vec![3, 4, 5], vec![6, 8, 10], vec![14, 16, 18], vec![30, 32, 34]],
            ..Self::paper_small()
        }
    }

    pub fn from_preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::PaperSmall => Self::paper_small(),
            Preset::PaperBase => Self::paper_base(),
        }
    }

    /// Whether networks of this space can be instantiated and trained
    /// (every head choice divides every embedding choice of its level).
    pub fn is_runnable(&self) -> bool {
        self.embed_choices
            .iter()
            .zip(&self.head_choices)
            .all(|(es, hs)| es.iter().all(|e| hs.iter().all(|h| e % h == 0)))
    }

    pub fn validate(&self) -> Result<()> {
        fn sorted_nonempty<T: PartialOrd>(name: &str, v: &[T]) -> Result<()> {
            if v.is_empty() || v.windows(2).any(|w| w[0] >= w[1]) {
                return Err(config_err!("choice list {name} must be non-empty and strictly ascending"));
            }
            Ok(())
        }
        for l in 0..4 {
            sorted_nonempty(&format!("embed[{}]", l + 1), &self.embed_choices[l])?;
            sorted_nonempty(&format!("heads[{}]", l + 1), &self.head_choices[l])?;
        }
        sorted_nonempty("depth", &self.depth_choices)?;
        sorted_nonempty("mlp_ratio", &self.mlp_ratio_choices)?;
        sorted_nonempty("window", &self.window_choices)?;
        if self.depth_choices[0] == 0 || self.window_choices[0] == 0 || self.head_choices.iter().any(|h| h[0] == 0) {
            return Err(config_err!("depth, window and head choices must be positive"));
        }
        if self.mlp_ratio_choices[0] <= 0.0 || self.patch_size == 0 || self.in_channels == 0 {
            return Err(config_err!("mlp ratios, patch size and input channels must be positive"));
        }
        if self.preset == Preset::Desk && !self.is_runnable() {
            return Err(config_err!("head choices must divide every embedding choice at their level"));
        }
        Ok(())
    }

    pub fn max_embed(&self, level: u8) -> usize {
        *self.embed_choices[level as usize - 1].last().unwrap()
    }

    pub fn max_depth(&self) -> usize {
        *self.depth_choices.last().unwrap()
    }

    pub fn max_mlp_ratio(&self) -> f64 {
        *self.mlp_ratio_choices.last().unwrap()
    }

    /// FFN width for an embedding dimension and ratio.
    pub fn hidden_dim(embed: usize, ratio: f64) -> usize {
        (embed as f64 * ratio).round() as usize
    }

    pub fn max_hidden(&self, level: u8) -> usize {
        Self::hidden_dim(self.max_embed(level), self.max_mlp_ratio())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    /// Checks that `cfg` only uses values from the choice lists.
    pub fn check(&self, cfg: &CellConfig) -> Result<()> {
        for (id, lc) in &cfg.layers {
            let li = id.level as usize - 1;
            if !self.embed_choices[li].contains(&lc.embed_dim) {
                return Err(config_err!("{id}: embed_dim {} not in {:?}", lc.embed_dim, self.embed_choices[li]));
            }
            if !self.depth_choices.contains(&lc.blocks.len()) {
                return Err(config_err!("{id}: depth {} not in {:?}", lc.blocks.len(), self.depth_choices));
            }
            for (bi, b) in lc.blocks.iter().enumerate() {
                if !self.head_choices[li].contains(&b.num_heads) {
                    return Err(config_err!("{id} block {bi}: {} heads not in {:?}", b.num_heads, self.head_choices[li]));
                }
                if !self.mlp_ratio_choices.contains(&b.mlp_ratio) {
                    return Err(config_err!("{id} block {bi}: mlp ratio {} not allowed", b.mlp_ratio));
                }
                if !self.window_choices.contains(&b.window) {
                    return Err(config_err!("{id} block {bi}: window {} not allowed", b.window));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub window: usize,
}

/// One cell: an embedding dimension shared by `blocks.len()` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerConfig {
    pub embed_dim: usize,
    pub blocks: Vec<BlockConfig>,
}

impl LayerConfig {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }
}

/// Subnet encoding: a cell per instantiated layer.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CellConfig {
    pub layers: BTreeMap<LayerId, LayerConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Min,
    Max,
    Uniform,
}

fn pick<T: Copy, R: Rng + ?Sized>(choices: &[T], mode: SampleMode, rng: &mut R) -> T {
    match mode {
        SampleMode::Min => choices[0],
        SampleMode::Max => *choices.last().unwrap(),
        SampleMode::Uniform => choices[rng.random_range(0..choices.len())],
    }
}

/// Samples a block from the space for a layer at `level`.
pub fn sample_block<R: Rng + ?Sized>(space: &CellSpace, level: u8, mode: SampleMode, rng: &mut R) -> BlockConfig {
    BlockConfig {
        num_heads: pick(&space.head_choices[level as usize - 1], mode, rng),
        mlp_ratio: pick(&space.mlp_ratio_choices, mode, rng),
        window: pick(&space.window_choices, mode, rng),
    }
}

/// Samples a cell for `layer`.
pub fn sample_layer<R: Rng + ?Sized>(space: &CellSpace, layer: LayerId, mode: SampleMode, rng: &mut R) -> LayerConfig {
    let embed_dim = pick(&space.embed_choices[layer.level as usize - 1], mode, rng);
    let depth = pick(&space.depth_choices, mode, rng);
    let blocks = (0..depth).map(|_| sample_block(space, layer.level, mode, rng)).collect();
    LayerConfig { embed_dim, blocks }
}

/// Samples a cell configuration covering `layers`.
pub fn sample_cell_config<R: Rng + ?Sized>(
    space: &CellSpace,
    layers: &BTreeSet<LayerId>,
    mode: SampleMode,
    rng: &mut R,
) -> CellConfig {
    CellConfig { layers: layers.iter().map(|&l| (l, sample_layer(space, l, mode, rng))).collect() }
}

impl CellConfig {
    pub fn layer(&self, id: LayerId) -> Result<&LayerConfig> {
        self.layers.get(&id).ok_or_else(|| config_err!("cell config has no entry for layer {id}"))
    }

    /// Componentwise containment on the dimensions that determine weight
    /// slices: embedding width, depth, and per-block MLP ratio.
    pub fn is_within(&self, other: &CellConfig) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().all(|(id, a)| {
                other.layers.get(id).is_some_and(|b| {
                    a.embed_dim <= b.embed_dim
                        && a.depth() <= b.depth()
                        && a.blocks.iter().zip(&b.blocks).all(|(x, y)| x.mlp_ratio <= y.mlp_ratio)
                })
            })
    }

    /// Restriction to a subset of layers.
    pub fn restrict(&self, layers: &BTreeSet<LayerId>) -> Result<CellConfig> {
        Ok(CellConfig {
            layers: layers.iter().map(|&l| Ok((l, self.layer(l)?.clone()))).collect::<Result<_>>()?,
        })
    }

    /// Stable textual key, used for hashing and caching.
    pub fn key(&self) -> String {
        let mut s = String::new();
        for (id, l) in &self.layers {
            s.push_str(&format!("{id}:{}:", l.embed_dim));
            for b in &l.blocks {
                s.push_str(&format!("{}/{}/{},", b.num_heads, b.mlp_ratio, b.window));
            }
            s.push(';');
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CellConfigFile::from(self)).expect("cell config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: CellConfigFile =
            serde_json::from_str(s).map_err(|e| Error::Persistence(format!("cell config: {e}")))?;
        f.try_into()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerConfigFile {
    layer: String,
    embed_dim: usize,
    depth: usize,
    blocks: Vec<BlockConfig>,
}

/// Serialized form of [`CellConfig`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfigFile {
    version: u32,
    layers: Vec<LayerConfigFile>,
}

impl From<&CellConfig> for CellConfigFile {
    fn from(c: &CellConfig) -> Self {
        Self {
            version: FORMAT_VERSION,
            layers: c
                .layers
                .iter()
                .map(|(id, l)| LayerConfigFile {
                    layer: id.id(),
                    embed_dim: l.embed_dim,
                    depth: l.depth(),
                    blocks: l.blocks.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<CellConfigFile> for CellConfig {
    type Error = Error;
    fn try_from(f: CellConfigFile) -> Result<Self> {
        if f.version != FORMAT_VERSION {
            return Err(Error::Persistence(format!("cell config version {} unsupported", f.version)));
        }
        let mut layers = BTreeMap::new();
        for l in f.layers {
            if l.depth != l.blocks.len() {
                return Err(config_err!("layer {}: depth {} but {} blocks", l.layer, l.depth, l.blocks.len()));
            }
            layers.insert(LayerId::parse(&l.layer)?, LayerConfig { embed_dim: l.embed_dim, blocks: l.blocks });
        }
        Ok(CellConfig { layers })
    }
}

/// Serialized form of [`Skeleton`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SkeletonFile {
    pub version: u32,
    pub mode: ScaleMode,
    pub outputs: Vec<String>,
}

impl From<&Skeleton> for SkeletonFile {
    fn from(s: &Skeleton) -> Self {
        Self { version: FORMAT_VERSION, mode: s.mode(), outputs: s.outputs().iter().map(|l| l.id()).collect() }
    }
}

impl TryFrom<&SkeletonFile> for Skeleton {
    type Error = Error;
    fn try_from(f: &SkeletonFile) -> Result<Self> {
        if f.version != FORMAT_VERSION {
            return Err(Error::Persistence(format!("skeleton version {} unsupported", f.version)));
        }
        let outs = f.outputs.iter().map(|s| LayerId::parse(s)).collect::<Result<Vec<_>>>()?;
        let s = match (f.mode, outs.as_slice()) {
            (ScaleMode::Single, [l]) => Skeleton::Single(*l),
            (ScaleMode::Multi, [a, b, c, d]) => Skeleton::Multi([*a, *b, *c, *d]),
            _ => return Err(Error::Persistence(format!("{:?} skeleton with {} outputs", f.mode, outs.len()))),
        };
        s.validate()?;
        Ok(s)
    }
}

impl Skeleton {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&SkeletonFile::from(self)).expect("skeleton serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: SkeletonFile = serde_json::from_str(s).map_err(|e| Error::Persistence(format!("skeleton: {e}")))?;
        Skeleton::try_from(&f)
    }
}

fn block_params(embed: usize, hidden: usize) -> usize {
    let ln = 4 * embed;
    let qkv = 3 * embed * embed + 3 * embed;
    let proj = embed * embed + embed;
    let ffn = hidden * embed + hidden + embed * hidden + embed;
    ln + qkv + proj + ffn
}

/// Exact number of weights a subnet instantiates for `graph` under `cfg`.
/// `heads[k]` describes the head of task `k`.
pub fn count_params(graph: &MultiTaskGraph, cfg: &CellConfig, space: &CellSpace, heads: &[HeadSpec]) -> Result<usize> {
    space.check(cfg)?;
    if heads.len() < graph.num_tasks() {
        return Err(config_err!("{} head specs for {} tasks", heads.len(), graph.num_tasks()));
    }
    let embed = |l: LayerId| cfg.layer(l).map(|c| c.embed_dim);
    let mut total = 0;
    for c in &graph.components {
        total += match *c {
            Component::PatchEmbed => {
                let e = embed(LayerId::encoder(1))?;
                e * space.patch_dim() + e
            }
            Component::Layer(l) => {
                let lc = cfg.layer(l)?;
                lc.blocks.iter().map(|b| block_params(lc.embed_dim, CellSpace::hidden_dim(lc.embed_dim, b.mlp_ratio))).sum()
            }
            Component::Pool(l) => {
                let (a, b) = (embed(LayerId::encoder(l))?, embed(LayerId::encoder(l + 1))?);
                4 * a * b + b
            }
            Component::Up { depth, to_level } => {
                let dst = LayerId { encode_depth: depth, level: to_level };
                let src = dst.input().expect("decoder layers have an input");
                let (a, b) = (embed(src)?, embed(dst)?);
                a * b + b
            }
            Component::Head(k) => {
                let widths = graph.task_attach(k).into_iter().map(embed).collect::<Result<Vec<_>>>()?;
                heads[k].param_count(&widths)
            }
        };
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{HeadKind, HeadSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sk(d: u8, l: u8) -> Skeleton {
        Skeleton::Single(LayerId::new(l, d).unwrap())
    }

    fn ids(v: &[Component]) -> Vec<String> {
        v.iter().map(|c| c.id()).collect()
    }

    #[test]
    fn skeleton_counts() {
        assert_eq!(enumerate_skeletons(ScaleMode::Single).len(), 10);
        assert_eq!(enumerate_skeletons(ScaleMode::Multi).len(), 24);
        assert_eq!(enumerate_skeletons(ScaleMode::Single)[0], sk(1, 1));
        for mode in [ScaleMode::Single, ScaleMode::Multi] {
            let all = enumerate_skeletons(mode);
            let set: BTreeSet<_> = all.iter().collect();
            assert_eq!(set.len(), all.len());
            assert_eq!(enumerate_skeletons(mode), all);
        }
    }

    #[test]
    fn single_scale_order_is_depth_then_level() {
        let order: Vec<(u8, u8)> = enumerate_skeletons(ScaleMode::Single)
            .iter()
            .map(|s| match s {
                Skeleton::Single(l) => (l.encode_depth, l.level),
                _ => unreachable!(),
            })
            .collect();
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(order, sorted);
    }

    #[test]
    fn cardinalities() {
        assert_eq!(space_cardinality(ScaleMode::Single, 16).unwrap(), BigUint::from(10u32).pow(16));
        assert_eq!(space_cardinality(ScaleMode::Multi, 16).unwrap(), BigUint::from(24u32).pow(16));
        assert_eq!(space_cardinality(ScaleMode::Single, 1).unwrap(), BigUint::from(10u32));
        assert!(space_cardinality(ScaleMode::Single, 0).is_err());
    }

    #[test]
    fn components_of_example_skeletons() {
        assert_eq!(ids(&skeleton_components(&sk(1, 1), 0)), ["patch_embed", "b1", "head1"]);
        assert_eq!(ids(&skeleton_components(&sk(2, 2), 1)), ["patch_embed", "b1", "pool1", "b2", "head2"]);
        assert_eq!(
            ids(&skeleton_components(&sk(3, 1), 0)),
            ["patch_embed", "b1", "pool1", "b2", "pool2", "b3", "up3_2", "dec3_2", "up3_1", "dec3_1", "head1"]
        );
        let multi = enumerate_skeletons(ScaleMode::Multi)[0];
        let g = union_skeletons(&[multi]).unwrap();
        assert_eq!(g.task_attach(0).len(), 4);
        assert_eq!(g.edges.iter().filter(|(_, b)| *b == Component::Head(0)).count(), 4);
    }

    #[test]
    fn union_of_two_task_example() {
        let g = union_skeletons(&[sk(1, 1), sk(2, 2)]).unwrap();
        let got: BTreeSet<String> = g.components.iter().map(|c| c.id()).collect();
        let want: BTreeSet<String> =
            ["patch_embed", "b1", "pool1", "b2", "head1", "head2"].iter().map(|s| s.to_string()).collect();
        assert_eq!(got, want);
        assert_eq!(g.component_ids(), ["patch_embed", "b1", "pool1", "b2", "head1", "head2"]);
    }

    #[test]
    fn union_errors() {
        assert!(matches!(union_skeletons(&[]), Err(Error::Argument(_))));
        let multi = enumerate_skeletons(ScaleMode::Multi)[0];
        assert!(matches!(union_skeletons(&[sk(1, 1), multi]), Err(Error::Argument(_))));
    }

    #[test]
    fn union_of_everything_is_full_grid() {
        let all = enumerate_skeletons(ScaleMode::Single);
        // Brute force: union of each skeleton's component set, heads dropped.
        let mut brute = BTreeSet::new();
        for s in &all {
            for c in skeleton_components(s, 0) {
                if !matches!(c, Component::Head(_)) {
                    brute.insert(c);
                }
            }
        }
        let g = union_skeletons(&all).unwrap();
        let body: BTreeSet<_> = g.components.iter().filter(|c| !matches!(c, Component::Head(_))).copied().collect();
        assert_eq!(body, brute);
        assert_eq!(g.layers().len(), 10);
        assert_eq!(g.components.iter().filter(|c| matches!(c, Component::Head(_))).count(), 10);
        let full = full_graph(ScaleMode::Single, 3).unwrap();
        assert_eq!(full.layers().len(), 10);
    }

    #[test]
    fn every_path_is_connected_and_acyclic() {
        for mode in [ScaleMode::Single, ScaleMode::Multi] {
            for s in enumerate_skeletons(mode) {
                let g = union_skeletons(&[s]).unwrap();
                let order = g.execution_order();
                let pos: BTreeMap<_, _> = order.iter().enumerate().map(|(i, c)| (*c, i)).collect();
                for (a, b) in &g.edges {
                    assert!(pos[a] < pos[b], "{s:?}: edge {a} -> {b} against order");
                }
                // every non-source component has an incoming edge
                for c in &order[1..] {
                    assert!(g.edges.iter().any(|(_, b)| b == c), "{s:?}: {c} unreachable");
                }
                assert_eq!(order[0], Component::PatchEmbed);
            }
        }
    }

    #[test]
    fn component_and_layer_ids_round_trip() {
        let g = full_graph(ScaleMode::Single, 2).unwrap();
        for c in &g.components {
            assert_eq!(Component::parse(&c.id()).unwrap(), *c);
        }
        assert!(Component::parse("dec2_2").is_err());
        assert!(LayerId::parse("b5").is_err());
    }

    #[test]
    fn skeleton_json_round_trip() {
        for mode in [ScaleMode::Single, ScaleMode::Multi] {
            for s in enumerate_skeletons(mode) {
                assert_eq!(Skeleton::from_json(&s.to_json()).unwrap(), s);
            }
        }
        assert!(Skeleton::from_json(r#"{"version":2,"mode":"single","outputs":["b1"]}"#).is_err());
    }

    #[test]
    fn sampling_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layers: BTreeSet<_> = LayerId::all().into_iter().collect();
        let paper = CellSpace::paper_small();
        let max = sample_cell_config(&paper, &layers, SampleMode::Max, &mut rng);
        assert_eq!(max.layers[&LayerId::encoder(4)].embed_dim, 800);
        let base = CellSpace::paper_base();
        let max = sample_cell_config(&base, &layers, SampleMode::Max, &mut rng);
        assert_eq!(max.layers[&LayerId::encoder(4)].embed_dim, 1088);

        let desk = CellSpace::desk();
        let min = sample_cell_config(&desk, &layers, SampleMode::Min, &mut rng);
        for (id, l) in &min.layers {
            assert_eq!(l.embed_dim, desk.embed_choices[id.level as usize - 1][0]);
            assert_eq!(l.depth(), 1);
            assert!(l.blocks.iter().all(|b| b.num_heads == 1 && b.mlp_ratio == 2.0 && b.window == 2));
        }
        let max = sample_cell_config(&desk, &layers, SampleMode::Max, &mut rng);
        assert!(min.is_within(&max));
        assert!(!max.is_within(&min));
    }

    #[test]
    fn uniform_sampling_covers_every_choice() {
        let desk = CellSpace::desk();
        let layers: BTreeSet<_> = LayerId::all().into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen: BTreeMap<(LayerId, &str, usize), BTreeSet<String>> = BTreeMap::new();
        for _ in 0..10_000 {
            let c = sample_cell_config(&desk, &layers, SampleMode::Uniform, &mut rng);
            desk.check(&c).unwrap();
            for (id, l) in &c.layers {
                seen.entry((*id, "embed", 0)).or_default().insert(l.embed_dim.to_string());
                seen.entry((*id, "depth", 0)).or_default().insert(l.depth().to_string());
                for (i, b) in l.blocks.iter().enumerate() {
                    seen.entry((*id, "heads", i)).or_default().insert(b.num_heads.to_string());
                    seen.entry((*id, "mlp", i)).or_default().insert(b.mlp_ratio.to_string());
                    seen.entry((*id, "window", i)).or_default().insert(b.window.to_string());
                }
            }
        }
        for ((id, field, _), vals) in &seen {
            let want = match *field {
                "embed" => desk.embed_choices[id.level as usize - 1].len(),
                "depth" => desk.depth_choices.len(),
                "heads" => desk.head_choices[id.level as usize - 1].len(),
                "mlp" => desk.mlp_ratio_choices.len(),
                _ => desk.window_choices.len(),
            };
            assert_eq!(vals.len(), want, "{id} {field}");
        }
        // every block position of every layer was visited
        assert_eq!(seen.len(), 10 * (2 + 3 * 2));
    }

    #[test]
    fn same_seed_same_sample() {
        let desk = CellSpace::desk();
        let layers: BTreeSet<_> = LayerId::all().into_iter().collect();
        let a = sample_cell_config(&desk, &layers, SampleMode::Uniform, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_cell_config(&desk, &layers, SampleMode::Uniform, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(CellConfig::from_json(&a.to_json()).unwrap(), a);
    }

    #[test]
    fn space_validation() {
        CellSpace::desk().validate().unwrap();
        CellSpace::paper_small().validate().unwrap();
        assert!(!CellSpace::paper_small().is_runnable());
        let mut bad = CellSpace::desk();
        bad.head_choices[0] = vec![2, 3, 4];
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = CellSpace::desk();
        bad.depth_choices = vec![2, 1];
        assert!(bad.validate().is_err());
        assert!("nope".parse::<Preset>().is_err());
    }

    fn dense(out: usize) -> HeadSpec {
        HeadSpec { kind: HeadKind::Dense, out_channels: out }
    }

    #[test]
    fn golden_min_param_count() {
        let desk = CellSpace::desk();
        let g = union_skeletons(&[sk(1, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = sample_cell_config(&desk, &g.layers(), SampleMode::Min, &mut rng);
        // patch 8*16+8, one block at E=8 r=2: 32 + 216 + 72 + 144 + 136, head 8+1
        assert_eq!(count_params(&g, &cfg, &desk, &[dense(1)]).unwrap(), 136 + 600 + 9);
    }

    #[test]
    fn head_count_does_not_change_params() {
        let desk = CellSpace::desk();
        let g = union_skeletons(&[sk(2, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = sample_cell_config(&desk, &g.layers(), SampleMode::Min, &mut rng);
        let before = count_params(&g, &cfg, &desk, &[dense(4)]).unwrap();
        for l in cfg.layers.values_mut() {
            for b in &mut l.blocks {
                b.num_heads = 2;
            }
        }
        assert_eq!(count_params(&g, &cfg, &desk, &[dense(4)]).unwrap(), before);
        let max = sample_cell_config(&desk, &g.layers(), SampleMode::Max, &mut rng);
        assert!(count_params(&g, &max, &desk, &[dense(4)]).unwrap() > before);
    }

    #[test]
    fn inconsistent_config_is_rejected() {
        let desk = CellSpace::desk();
        let g = union_skeletons(&[sk(2, 2)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let small = union_skeletons(&[sk(1, 1)]).unwrap();
        let cfg = sample_cell_config(&desk, &small.layers(), SampleMode::Min, &mut rng);
        assert!(matches!(count_params(&g, &cfg, &desk, &[dense(1)]), Err(Error::Config(_))));
        let mut cfg = sample_cell_config(&desk, &g.layers(), SampleMode::Min, &mut rng);
        cfg.layers.get_mut(&LayerId::encoder(1)).unwrap().embed_dim = 9;
        assert!(matches!(count_params(&g, &cfg, &desk, &[dense(1)]), Err(Error::Config(_))));
    }

    proptest::proptest! {
        #[test]
        fn union_is_associative_and_commutative(picks in proptest::collection::vec(0usize..10, 2..6), split in 1usize..5) {
            let all = enumerate_skeletons(ScaleMode::Single);
            let assign: Vec<Skeleton> = picks.iter().map(|&i| all[i]).collect();
            let split = split.min(assign.len() - 1);
            let whole = union_skeletons(&assign).unwrap().components;
            let a = union_skeletons(&assign[..split]).unwrap().components;
            let b = union_skeletons(&assign[split..]).unwrap().components;
            // heads are numbered by position, so compare the shared body
            let body = |s: &BTreeSet<Component>| s.iter().filter(|c| !matches!(c, Component::Head(_))).copied().collect::<BTreeSet<_>>();
            let ab: BTreeSet<_> = body(&a).union(&body(&b)).copied().collect();
            proptest::prop_assert_eq!(body(&whole), ab);
            let mut rev = assign.clone();
            rev.reverse();
            proptest::prop_assert_eq!(body(&union_skeletons(&rev).unwrap().components), body(&whole));
            let twice: Vec<Skeleton> = assign.iter().chain(assign.iter()).copied().collect();
            proptest::prop_assert_eq!(body(&union_skeletons(&twice).unwrap().components), body(&whole));
        }
    }
}
