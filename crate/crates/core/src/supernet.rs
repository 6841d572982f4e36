//! Shared weight store, prefix slicing into subnets, sandwich sampling and
//! checkpoint persistence.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{config_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::search_space::{
    full_graph, sample_cell_config, CellConfig, CellSpace, LayerId, MultiTaskGraph, SampleMode, ScaleMode,
    Skeleton, SkeletonFile,
};
use crate::skeleton_search::SkeletonDistribution;
use crate::transformer::{forward_layers, names, run_head, HeadKind, HeadSpec, StandaloneWeights, WeightSlice, WeightSource};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MTNASCK1";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Supernet {
    pub space: CellSpace,
    pub heads: Vec<HeadSpec>,
    /// Every layer of the grid plus a head per task.
    pub graph: MultiTaskGraph,
    pub skeleton_dist: SkeletonDistribution,
    pub step: u64,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Names and full shapes of every supernet weight, in storage order.
pub fn param_shapes(space: &CellSpace, heads: &[HeadSpec]) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
    let e1 = space.max_embed(1);
    push("patch_embed.w".into(), vec![e1, space.patch_dim()]);
    push("patch_embed.b".into(), vec![e1]);
    for layer in LayerId::all() {
        let e = space.max_embed(layer.level);
        let hid = space.max_hidden(layer.level);
        for i in 0..space.max_depth() {
            let n = |p: &str| names::block(layer, i, p);
            push(n("ln1.g"), vec![e]);
            push(n("ln1.b"), vec![e]);
            push(n("qkv.w"), vec![3 * e, e]);
            push(n("qkv.b"), vec![3 * e]);
            push(n("proj.w"), vec![e, e]);
            push(n("proj.b"), vec![e]);
            push(n("ffn1.w"), vec![hid, e]);
            push(n("ffn1.b"), vec![hid]);
            push(n("ffn2.w"), vec![e, hid]);
            push(n("ffn2.b"), vec![e]);
            push(n("ln2.g"), vec![e]);
            push(n("ln2.b"), vec![e]);
        }
    }
    for l in 1..4u8 {
        let (a, b) = (space.max_embed(l), space.max_embed(l + 1));
        push(names::pool(l, "w"), vec![b, 4 * a]);
        push(names::pool(l, "b"), vec![b]);
    }
    for layer in LayerId::all().into_iter().filter(|l| !l.is_encoder()) {
        let (a, b) = (space.max_embed(layer.level + 1), space.max_embed(layer.level));
        push(names::up(layer.encode_depth, layer.level, "w"), vec![b, a]);
        push(names::up(layer.encode_depth, layer.level, "b"), vec![b]);
    }
    for (k, h) in heads.iter().enumerate() {
        let o = h.proj_width();
        for l in 1..=4u8 {
            let e = space.max_embed(l);
            push(names::head_level(k, l, "w"), vec![o, e]);
            push(names::head_level(k, l, "b"), vec![o]);
        }
        if let HeadKind::Point { hidden } = h.kind {
            push(names::head_out(k, "w"), vec![h.out_channels, hidden]);
            push(names::head_out(k, "b"), vec![h.out_channels]);
        }
    }
    out
}

fn is_ln_gain(name: &str) -> bool {
    name.ends_with("ln1.g") || name.ends_with("ln2.g")
}

fn truncated_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect()
}

/// Builds a freshly initialized supernet.
pub fn init_supernet(space: &CellSpace, mode: ScaleMode, heads: &[HeadSpec], seed: u64) -> Result<Supernet> {
    space.validate()?;
    if !space.is_runnable() {
        return Err(config_err!("{:?} space is for counting only: head choices do not divide embeddings", space.preset));
    }
    if heads.is_empty() {
        return Err(Error::Argument("supernet needs at least one task head".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, shape) in param_shapes(space, heads) {
        let n: usize = shape.iter().product();
        let data = if is_ln_gain(&name) {
            vec![1.0; n]
        } else if shape.len() == 1 {
            vec![0.0; n]
        } else {
            truncated_normal(&mut rng, n)
        };
        names.push(name);
        params.push(Tensor::new(shape, data)?);
    }
    let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    Ok(Supernet {
        space: space.clone(),
        heads: heads.to_vec(),
        graph: full_graph(mode, heads.len())?,
        skeleton_dist: SkeletonDistribution::new(mode, heads.len()),
        step: 0,
        names,
        params,
        index,
    })
}

/// A subnet: a config plus the slices it reads from the supernet.
#[derive(Clone, Debug)]
pub struct SubnetView {
    pub cfg: CellConfig,
    pub slices: Vec<WeightSlice>,
}

impl SubnetView {
    pub fn num_params(&self) -> usize {
        self.slices.iter().map(WeightSlice::numel).sum()
    }
}

impl Supernet {
    pub fn mode(&self) -> ScaleMode {
        self.graph.mode()
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// All grid layers.
    pub fn layers(&self) -> BTreeSet<LayerId> {
        self.graph.layers()
    }

    /// Binds the weights to a graph for one forward/backward pass.
    pub fn bind(&self) -> Binding<'_> {
        Binding { sn: self, leaves: vec![None; self.params.len()], record: None }
    }

    /// Slices read by the subnet `(graph, cfg)`. Obtained by tracing a
    /// forward pass on a minimal input, so it always agrees with the
    /// forward functions.
    pub fn slice(&self, cfg: &CellConfig, graph: &MultiTaskGraph) -> Result<SubnetView> {
        self.space.check(cfg)?;
        let cfg = cfg.restrict(&graph.layers())?;
        let side = self.space.patch_size << 3;
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(&[1, side, side, self.space.in_channels]));
        let mut b = self.bind();
        b.record = Some(BTreeSet::new());
        let feats = forward_layers(&mut g, &mut b, &self.space, &cfg, &graph.layers(), img)?;
        for k in 0..graph.num_tasks() {
            let f: Vec<(u8, Var)> = graph.task_attach(k).iter().map(|l| (l.level, feats[l])).collect();
            run_head(&mut g, &mut b, k, &self.heads[k], &f, (side, side), self.space.patch_size)?;
        }
        Ok(SubnetView { cfg, slices: b.record.unwrap().into_iter().collect() })
    }

    /// Copies a view's weights into a standalone network.
    pub fn extract(&self, view: &SubnetView) -> Result<StandaloneWeights> {
        let mut tensors = BTreeMap::new();
        for s in &view.slices {
            let t = self.param(&s.name).ok_or_else(|| config_err!("no weight {}", s.name))?;
            tensors.insert(s.clone(), t.slice(&s.ranges())?);
        }
        Ok(StandaloneWeights::new(tensors))
    }

    /// Sandwich sample over every grid layer: `[max, min, uniform, uniform]`.
    pub fn sandwich_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [CellConfig; 4] {
        sandwich_sample(&self.space, &self.layers(), rng)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (manifest, arrays) = self.encode_parts();
        let refs: Vec<&[f64]> = arrays.iter().map(|a| &a[..]).collect();
        container::write(path, CHECKPOINT_MAGIC, &manifest, &refs)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (manifest, arrays) = self.encode_parts();
        let refs: Vec<&[f64]> = arrays.iter().map(|a| &a[..]).collect();
        container::encode(CHECKPOINT_MAGIC, &manifest, &refs)
    }

    fn encode_parts(&self) -> (String, Vec<&[f64]>) {
        let mut offset = 0;
        let mut tensors = Vec::new();
        for (n, t) in self.names.iter().zip(&self.params) {
            tensors.push(TensorEntry { name: n.clone(), shape: t.shape().to_vec(), offset });
            offset += t.numel();
        }
        let d = &self.skeleton_dist;
        let m = Manifest {
            version: CHECKPOINT_VERSION,
            space: self.space.clone(),
            mode: self.mode(),
            heads: self.heads.clone(),
            step: self.step,
            tau: d.tau,
            tau0: d.tau0,
            tau_min: d.tau_min,
            candidates: d.candidates.iter().map(SkeletonFile::from).collect(),
            logits: TensorEntry { name: "skeleton_logits".into(), shape: d.logits.shape().to_vec(), offset },
            tensors,
        };
        let mut arrays: Vec<&[f64]> = self.params.iter().map(|t| t.data()).collect();
        arrays.push(d.logits.data());
        (serde_json::to_string(&m).expect("manifest serializes"), arrays)
    }

    pub fn load(path: &Path) -> Result<Supernet> {
        let (manifest, data) = container::read(path, CHECKPOINT_MAGIC)?;
        Self::decode(&manifest, data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Supernet> {
        let (manifest, data) = container::decode(CHECKPOINT_MAGIC, bytes)?;
        Self::decode(&manifest, data)
    }

    fn decode(manifest: &str, data: Vec<f64>) -> Result<Supernet> {
        let m: Manifest = serde_json::from_str(manifest).map_err(|e| Error::Persistence(format!("manifest: {e}")))?;
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::Persistence(format!("checkpoint version {} unsupported", m.version)));
        }
        let mut sn = init_supernet(&m.space, m.mode, &m.heads, 0)?;
        if sn.names.len() != m.tensors.len() {
            return Err(Error::Persistence("tensor list does not match the space".into()));
        }
        let take = |e: &TensorEntry| -> Result<Tensor> {
            let n: usize = e.shape.iter().product();
            let chunk = data
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Persistence(format!("truncated payload at {}", e.name)))?;
            Tensor::new(e.shape.clone(), chunk.to_vec()).map_err(|err| Error::Persistence(err.to_string()))
        };
        for (i, e) in m.tensors.iter().enumerate() {
            if sn.names[i] != e.name || sn.params[i].shape() != e.shape.as_slice() {
                return Err(Error::Persistence(format!("unexpected tensor {} {:?}", e.name, e.shape)));
            }
            sn.params[i] = take(e)?;
        }
        let candidates = m.candidates.iter().map(Skeleton::try_from).collect::<Result<Vec<_>>>()?;
        if candidates.iter().any(|c| c.mode() != m.mode) || candidates.is_empty() {
            return Err(Error::Persistence("skeleton candidates do not match the scale mode".into()));
        }
        sn.skeleton_dist = SkeletonDistribution::with_candidates(candidates, m.heads.len());
        let logits = take(&m.logits)?;
        if logits.shape() != sn.skeleton_dist.logits.shape() {
            return Err(Error::Persistence("skeleton logits have the wrong shape".into()));
        }
        if m.logits.offset + logits.numel() != data.len() {
            return Err(Error::Persistence("trailing bytes after payload".into()));
        }
        sn.skeleton_dist.logits = logits;
        sn.skeleton_dist.tau = m.tau;
        sn.skeleton_dist.tau0 = m.tau0;
        sn.skeleton_dist.tau_min = m.tau_min;
        sn.step = m.step;
        Ok(sn)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    space: CellSpace,
    mode: ScaleMode,
    heads: Vec<HeadSpec>,
    step: u64,
    tau: f64,
    tau0: f64,
    tau_min: f64,
    candidates: Vec<SkeletonFile>,
    logits: TensorEntry,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(sn: &Supernet, path: &Path) -> Result<()> {
    sn.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Supernet> {
    Supernet::load(path)
}

pub fn sandwich_sample<R: Rng + ?Sized>(space: &CellSpace, layers: &BTreeSet<LayerId>, rng: &mut R) -> [CellConfig; 4] {
    [
        sample_cell_config(space, layers, SampleMode::Max, rng),
        sample_cell_config(space, layers, SampleMode::Min, rng),
        sample_cell_config(space, layers, SampleMode::Uniform, rng),
        sample_cell_config(space, layers, SampleMode::Uniform, rng),
    ]
}

/// Supernet weights bound to one graph. Each weight becomes a full-size
/// leaf on first use; subnets read prefix slices of it, so gradients land
/// in the right place of the supernet tensor.
pub struct Binding<'a> {
    sn: &'a Supernet,
    leaves: Vec<Option<Var>>,
    record: Option<BTreeSet<WeightSlice>>,
}

impl Binding<'_> {
    /// Leaf node of weight `i`, if it was used.
    pub fn leaf(&self, i: usize) -> Option<Var> {
        self.leaves[i]
    }

    /// Adds this graph's weight gradients into `acc` (one buffer per
    /// supernet tensor, allocated on demand).
    pub fn accumulate_grads(&self, g: &Graph, acc: &mut [Option<Vec<f64>>]) {
        for (i, leaf) in self.leaves.iter().enumerate() {
            let Some(v) = leaf else { continue };
            let Some(gd) = g.grad_data(*v) else { continue };
            let buf = acc[i].get_or_insert_with(|| vec![0.0; gd.len()]);
            for (a, b) in buf.iter_mut().zip(gd) {
                *a += b;
            }
        }
    }
}

impl WeightSource for Binding<'_> {
    fn weight(&mut self, g: &mut Graph, name: &str, ranges: &[Range<usize>]) -> Result<Var> {
        let i = self.sn.index_of(name).ok_or_else(|| config_err!("supernet has no weight {name}"))?;
        let full = &self.sn.params[i];
        if let Some(rec) = &mut self.record {
            rec.insert(WeightSlice::new(name, ranges));
        }
        let leaf = match self.leaves[i] {
            Some(v) => v,
            None => {
                let v = g.param(full.clone());
                self.leaves[i] = Some(v);
                v
            }
        };
        if ranges.len() == full.shape().len() && ranges.iter().zip(full.shape()).all(|(r, &n)| r.start == 0 && r.end == n)
        {
            return Ok(leaf);
        }
        g.slice(leaf, ranges)
    }
}

#[cfg(test)]
mod tests;
