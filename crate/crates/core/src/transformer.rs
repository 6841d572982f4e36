//! Encoder-decoder window-transformer components: patch embedding, WSA
//! blocks, patch merging, upsampling and task heads.
//!
//! Every function pulls its weights through a [`WeightSource`], which
//! returns a graph node holding a prefix slice of a named weight tensor.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::search_space::{BlockConfig, CellConfig, CellSpace, LayerId};

/// Additive attention bias for padded key positions.
pub const MASK_VALUE: f64 = -1e9;

/// Provides (sliced) weights to the forward functions.
pub trait WeightSource {
    fn weight(&mut self, g: &mut Graph, name: &str, ranges: &[Range<usize>]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum HeadKind {
    /// Per-pixel linear, nearest-upsampled to input resolution.
    Dense,
    /// Global average pool followed by a two-layer MLP.
    Point { hidden: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// Channels per pixel (dense) or logits (point).
    pub out_channels: usize,
}

impl HeadSpec {
    /// Width of the per-level projection.
    pub fn proj_width(&self) -> usize {
        match self.kind {
            HeadKind::Dense => self.out_channels,
            HeadKind::Point { hidden } => hidden,
        }
    }

    /// Parameters of this head when reading features of the given widths.
    pub fn param_count(&self, widths: &[usize]) -> usize {
        let o = self.proj_width();
        let per_level: usize = widths.iter().map(|e| e * o + o).sum();
        match self.kind {
            HeadKind::Dense => per_level,
            HeadKind::Point { hidden } => per_level + hidden * self.out_channels + self.out_channels,
        }
    }
}

/// Weight name helpers shared with the supernet.
pub mod names {
    use crate::search_space::LayerId;

    pub fn block(layer: LayerId, i: usize, part: &str) -> String {
        format!("{layer}.blk{i}.{part}")
    }
    pub fn pool(level: u8, part: &str) -> String {
        format!("pool{level}.{part}")
    }
    pub fn up(depth: u8, to_level: u8, part: &str) -> String {
        format!("up{depth}_{to_level}.{part}")
    }
    pub fn head_level(task: usize, level: u8, part: &str) -> String {
        format!("head{}.L{level}.{part}", task + 1)
    }
    pub fn head_out(task: usize, part: &str) -> String {
        format!("head{}.out.{part}", task + 1)
    }
}

fn dims4(g: &Graph, x: Var, what: &str) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [b, h, w, c] => Ok([b, h, w, c]),
        ref s => Err(shape_err!("{what}: expected [B,H,W,C], got {s:?}")),
    }
}

/// Non-overlapping `patch x patch` patches projected to `embed` channels.
pub fn patch_embed<W: WeightSource>(
    g: &mut Graph,
    ws: &mut W,
    images: Var,
    embed: usize,
    patch: usize,
) -> Result<Var> {
    let [b, h, w, c] = dims4(g, images, "patch_embed")?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(shape_err!("patch_embed: {h}x{w} not divisible by patch {patch}"));
    }
    let (ph, pw) = (h / patch, w / patch);
    let x = g.reshape(images, &[b, ph, patch, pw, patch, c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let x = g.reshape(x, &[b, ph, pw, patch * patch * c])?;
    let wt = ws.weight(g, "patch_embed.w", &[0..embed, 0..patch * patch * c])?;
    let bs = ws.weight(g, "patch_embed.b", &[0..embed])?;
    g.linear(x, wt, Some(bs))
}

/// Multi-head self-attention within `win x win` windows of an already
/// normalized map. Returns the projected output and the attention
/// probabilities `[windows*heads, T, T]`.
#[allow(clippy::too_many_arguments)]
pub fn window_attention<W: WeightSource>(
    g: &mut Graph,
    ws: &mut W,
    prefix: &str,
    x: Var,
    e_max: usize,
    heads: usize,
    win: usize,
) -> Result<(Var, Var)> {
    let [b, h, w, e] = dims4(g, x, "window_attention")?;
    if heads == 0 || e % heads != 0 {
        return Err(config_err!("{prefix}: {heads} heads do not divide {e} channels"));
    }
    if e > e_max {
        return Err(config_err!("{prefix}: embed {e} exceeds maximum {e_max}"));
    }
    let win = win.min(h.max(w));
    let hd = e / heads;
    let xw = g.window_partition(x, win)?;
    let (nwin, t) = (g.shape(xw)[0], win * win);
    let qkv_w = format!("{prefix}.qkv.w");
    let qkv_b = format!("{prefix}.qkv.b");
    let mut proj = |g: &mut Graph, part: usize| -> Result<Var> {
        let rows = part * e_max..part * e_max + e;
        let wt = ws.weight(g, &qkv_w, &[rows.clone(), 0..e])?;
        let bs = ws.weight(g, &qkv_b, &[rows])?;
        let y = g.linear(xw, wt, Some(bs))?;
        let y = g.reshape(y, &[nwin, t, heads, hd])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        g.reshape(y, &[nwin * heads, t, hd])
    };
    let q = proj(g, 0)?;
    let k = proj(g, 1)?;
    let v = proj(g, 2)?;
    let scores = g.matmul_nt(q, k)?;
    let mut scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
    if h % win != 0 || w % win != 0 {
        let map = crate::numerics::window_map(b, h, w, win);
        let mut mask = vec![0.0; nwin * heads * t * t];
        for n in 0..nwin {
            for kk in 0..t {
                if map[n * t + kk].is_none() {
                    for hh in 0..heads {
                        for qq in 0..t {
                            mask[((n * heads + hh) * t + qq) * t + kk] = MASK_VALUE;
                        }
                    }
                }
            }
        }
        let m = g.constant(Tensor::new(vec![nwin * heads, t, t], mask)?);
        scores = g.add(scores, m)?;
    }
    let attn = g.softmax(scores, 2)?;
    let out = g.matmul(attn, v)?;
    let out = g.reshape(out, &[nwin, heads, t, hd])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[nwin, t, e])?;
    let pw = ws.weight(g, &format!("{prefix}.proj.w"), &[0..e, 0..e])?;
    let pb = ws.weight(g, &format!("{prefix}.proj.b"), &[0..e])?;
    let out = g.linear(out, pw, Some(pb))?;
    Ok((g.window_reverse(out, h, w, win)?, attn))
}

/// One pre-LN block: `y = x + WSA(LN(x))`, `out = y + FFN(LN(y))`.
pub fn wsa_block<W: WeightSource>(
    g: &mut Graph,
    ws: &mut W,
    prefix: &str,
    x: Var,
    e_max: usize,
    block: &BlockConfig,
) -> Result<Var> {
    let e = dims4(g, x, "wsa_block")?[3];
    let ln = |g: &mut Graph, ws: &mut W, x: Var, which: &str| -> Result<Var> {
        let gain = ws.weight(g, &format!("{prefix}.{which}.g"), &[0..e])?;
        let bias = ws.weight(g, &format!("{prefix}.{which}.b"), &[0..e])?;
        g.layer_norm(x, gain, bias, 3)
    };
    let n1 = ln(g, ws, x, "ln1")?;
    let (a, _) = window_attention(g, ws, prefix, n1, e_max, block.num_heads, block.window)?;
    let y = g.add(x, a)?;
    let n2 = ln(g, ws, y, "ln2")?;
    let hid = CellSpace::hidden_dim(e, block.mlp_ratio);
    let w1 = ws.weight(g, &format!("{prefix}.ffn1.w"), &[0..hid, 0..e])?;
    let b1 = ws.weight(g, &format!("{prefix}.ffn1.b"), &[0..hid])?;
    let f = g.linear(n2, w1, Some(b1))?;
    let f = g.gelu(f)?;
    let w2 = ws.weight(g, &format!("{prefix}.ffn2.w"), &[0..e, 0..hid])?;
    let b2 = ws.weight(g, &format!("{prefix}.ffn2.b"), &[0..e])?;
    let f = g.linear(f, w2, Some(b2))?;
    g.add(y, f)
}

/// 2x2 neighbourhood concatenation followed by a linear map to `e_out`.
/// Concatenated channels are ordered channel-major so that narrower
/// inputs use a column prefix of the weight.
pub fn patch_merge<W: WeightSource>(g: &mut Graph, ws: &mut W, level: u8, x: Var, e_out: usize) -> Result<Var> {
    let [b, h, w, c] = dims4(g, x, "patch_merge")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("patch_merge: odd spatial side {h}x{w}"));
    }
    let x = g.reshape(x, &[b, h / 2, 2, w / 2, 2, c])?;
    let x = g.permute(x, &[0, 1, 3, 5, 2, 4])?;
    let x = g.reshape(x, &[b, h / 2, w / 2, 4 * c])?;
    let wt = ws.weight(g, &names::pool(level, "w"), &[0..e_out, 0..4 * c])?;
    let bs = ws.weight(g, &names::pool(level, "b"), &[0..e_out])?;
    g.linear(x, wt, Some(bs))
}

/// Nearest 2x upsample plus a linear map to `e_out`. The linear map is
/// applied first, which is equivalent and cheaper.
pub fn upsample<W: WeightSource>(
    g: &mut Graph,
    ws: &mut W,
    depth: u8,
    to_level: u8,
    x: Var,
    e_out: usize,
) -> Result<Var> {
    let c = dims4(g, x, "upsample")?[3];
    let wt = ws.weight(g, &names::up(depth, to_level, "w"), &[0..e_out, 0..c])?;
    let bs = ws.weight(g, &names::up(depth, to_level, "b"), &[0..e_out])?;
    let y = g.linear(x, wt, Some(bs))?;
    g.nearest_upsample_2x(y)
}

/// Spatial side of the level-`level` feature map.
pub fn level_side(input_side: usize, patch: usize, level: u8) -> usize {
    input_side / (patch << (level - 1))
}

/// Per-level part of task head `task`: (pool,) linear, and for dense
/// heads nearest upsampling to input resolution. Multi-scale heads sum
/// these projections before [`head_finish`].
#[allow(clippy::too_many_arguments)]
pub fn head_projection<W: WeightSource>(
    g: &mut Graph,
    ws: &mut W,
    task: usize,
    spec: &HeadSpec,
    level: u8,
    feat: Var,
    input_hw: (usize, usize),
    patch: usize,
) -> Result<Var> {
    let [_, h, w, e] = dims4(g, feat, "run_head")?;
    let expect = (1..=4)
        .contains(&level)
        .then(|| (level_side(input_hw.0, patch, level), level_side(input_hw.1, patch, level)));
    if expect != Some((h, w)) {
        return Err(config_err!("head{}: {h}x{w} feature does not belong to level {level}", task + 1));
    }
    let o = spec.proj_width();
    let x = match spec.kind {
        HeadKind::Dense => feat,
        HeadKind::Point { .. } => g.global_avg_pool(feat)?,
    };
    let wt = ws.weight(g, &names::head_level(task, level, "w"), &[0..o, 0..e])?;
    let bs = ws.weight(g, &names::head_level(task, level, "b"), &[0..o])?;
    let mut y = g.linear(x, wt, Some(bs))?;
    if spec.kind == HeadKind::Dense {
        while g.shape(y)[1] < input_hw.0 {
            y = g.nearest_upsample_2x(y)?;
        }
        if g.shape(y)[1..3] != [input_hw.0, input_hw.1] {
            return Err(shape_err!("dense head output {:?} for input {input_hw:?}", g.shape(y)));
        }
    }
    Ok(y)
}

/// Shared tail of a head applied to the summed projections.
pub fn head_finish<W: WeightSource>(g: &mut Graph, ws: &mut W, task: usize, spec: &HeadSpec, acc: Var) -> Result<Var> {
    match spec.kind {
        HeadKind::Dense => Ok(acc),
        HeadKind::Point { hidden } => {
            let y = g.gelu(acc)?;
            let wt = ws.weight(g, &names::head_out(task, "w"), &[0..spec.out_channels, 0..hidden])?;
            let bs = ws.weight(g, &names::head_out(task, "b"), &[0..spec.out_channels])?;
            g.linear(y, wt, Some(bs))
        }
    }
}

/// Applies task head `task` to features `(level, map)`: dense heads give
/// `[B,H,W,out]` at input resolution, point heads `[B,out]`.
pub fn run_head<W: WeightSource>(
    g: &mut Graph,
    ws: &mut W,
    task: usize,
    spec: &HeadSpec,
    feats: &[(u8, Var)],
    input_hw: (usize, usize),
    patch: usize,
) -> Result<Var> {
    if feats.is_empty() {
        return Err(Error::Argument("run_head without features".into()));
    }
    let mut acc: Option<Var> = None;
    for &(level, f) in feats {
        let y = head_projection(g, ws, task, spec, level, f, input_hw, patch)?;
        acc = Some(match acc {
            None => y,
            Some(a) => g.add(a, y)?,
        });
    }
    head_finish(g, ws, task, spec, acc.expect("non-empty features"))
}

/// Runs one cell (all its blocks) on `x`.
pub fn run_layer<W: WeightSource>(
    g: &mut Graph,
    ws: &mut W,
    space: &CellSpace,
    layer: LayerId,
    cfg: &CellConfig,
    mut x: Var,
) -> Result<Var> {
    let lc = cfg.layer(layer)?;
    let e_max = space.max_embed(layer.level);
    for (i, b) in lc.blocks.iter().enumerate() {
        x = wsa_block(g, ws, &format!("{layer}.blk{i}"), x, e_max, b)?;
    }
    Ok(x)
}

/// Forward pass over the grid. Computes every layer in `wanted` plus the
/// layers they depend on, and returns all computed layer outputs.
pub fn forward_layers<W: WeightSource>(
    g: &mut Graph,
    ws: &mut W,
    space: &CellSpace,
    cfg: &CellConfig,
    wanted: &BTreeSet<LayerId>,
    images: Var,
) -> Result<BTreeMap<LayerId, Var>> {
    let mut needed = BTreeSet::new();
    for &l in wanted {
        let mut cur = Some(l);
        while let Some(c) = cur {
            needed.insert(c);
            cur = c.input();
        }
    }
    // encoders first (by level), then decoder branches from coarse to fine
    let mut order: Vec<LayerId> = needed.iter().copied().filter(|l| l.is_encoder()).collect();
    order.sort_by_key(|l| l.level);
    let mut dec: Vec<LayerId> = needed.iter().copied().filter(|l| !l.is_encoder()).collect();
    dec.sort_by_key(|l| (l.encode_depth, std::cmp::Reverse(l.level)));
    order.extend(dec);

    let mut out: BTreeMap<LayerId, Var> = BTreeMap::new();
    for l in order {
        let e = cfg.layer(l)?.embed_dim;
        let x = match l.input() {
            None => patch_embed(g, ws, images, e, space.patch_size)?,
            Some(src) => {
                let xin = out[&src];
                if l.is_encoder() {
                    patch_merge(g, ws, src.level, xin, e)?
                } else {
                    upsample(g, ws, l.encode_depth, l.level, xin, e)?
                }
            }
        };
        let y = run_layer(g, ws, space, l, cfg, x)?;
        out.insert(l, y);
    }
    Ok(out)
}

/// A named weight restricted to per-axis index ranges.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WeightSlice {
    pub name: String,
    pub bounds: Vec<(usize, usize)>,
}

impl WeightSlice {
    pub fn new(name: &str, ranges: &[Range<usize>]) -> Self {
        Self { name: name.to_string(), bounds: ranges.iter().map(|r| (r.start, r.end)).collect() }
    }

    pub fn ranges(&self) -> Vec<Range<usize>> {
        self.bounds.iter().map(|&(a, b)| a..b).collect()
    }

    pub fn numel(&self) -> usize {
        self.bounds.iter().map(|(a, b)| b - a).product()
    }

    /// Whether every range lies inside the matching range of `other`.
    pub fn within(&self, other: &WeightSlice) -> bool {
        self.name == other.name
            && self.bounds.len() == other.bounds.len()
            && self.bounds.iter().zip(&other.bounds).all(|(a, b)| a.0 >= b.0 && a.1 <= b.1)
    }
}

/// Standalone network: a fixed set of copied-out weight tensors keyed by
/// name and slice.
#[derive(Clone, Debug, Default)]
pub struct StandaloneWeights {
    pub tensors: BTreeMap<WeightSlice, Tensor>,
    leaves: BTreeMap<WeightSlice, Var>,
}

impl StandaloneWeights {
    pub fn new(tensors: BTreeMap<WeightSlice, Tensor>) -> Self {
        Self { tensors, leaves: BTreeMap::new() }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Graph nodes created so far, for reading gradients.
    pub fn leaves(&self) -> &BTreeMap<WeightSlice, Var> {
        &self.leaves
    }

    /// Forgets graph bindings so the weights can be used with a new graph.
    pub fn reset(&mut self) {
        self.leaves.clear();
    }
}

impl WeightSource for StandaloneWeights {
    fn weight(&mut self, g: &mut Graph, name: &str, ranges: &[Range<usize>]) -> Result<Var> {
        let key = WeightSlice::new(name, ranges);
        if let Some(v) = self.leaves.get(&key) {
            return Ok(*v);
        }
        let t = self.tensors.get(&key).ok_or_else(|| config_err!("standalone net has no weight {name}{ranges:?}"))?;
        let v = g.param(t.clone());
        self.leaves.insert(key, v);
        Ok(v)
    }
}
