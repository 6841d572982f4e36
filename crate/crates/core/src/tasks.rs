//! Synthetic shape scenes with analytic labels, the four default tasks,
//! their losses and evaluation metrics.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::transformer::{HeadKind, HeadSpec};

pub const SIDE: usize = 64;
pub const NUM_SEG_CLASSES: usize = 4;
pub const NUM_COUNT_CLASSES: usize = 4;
pub const POINT_HIDDEN: usize = 32;

const BACKGROUND: f64 = 0.1;
const NOISE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub side: usize,
    /// Grayscale intensities in [0, 1], row-major.
    pub image: Vec<f64>,
    /// Class per pixel, 0 is background.
    pub seg: Vec<u8>,
    /// Normalized Sobel magnitude of `seg`.
    pub edge: Vec<f64>,
    /// Number of placed shapes.
    pub count_class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    DenseSeg,
    DenseRegress,
    PointClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    L1,
}

/// Scene field a task predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Image,
    Edge,
    Seg,
    Count,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    MeanIou,
    Accuracy,
    MeanL1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub kind: MetricKind,
    pub lower_is_better: bool,
}

impl MetricSpec {
    pub fn new(kind: MetricKind) -> Self {
        let (name, lower) = match kind {
            MetricKind::MeanIou => ("miou", false),
            MetricKind::Accuracy => ("accuracy", false),
            MetricKind::MeanL1 => ("mean_l1", true),
        };
        Self { name: name.into(), kind, lower_is_better: lower }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    pub loss: LossKind,
    pub target: Target,
    pub lambda: f64,
    pub head: HeadSpec,
    pub metrics: Vec<MetricSpec>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("task {}: loss weight must be positive", self.id)));
        }
        if self.metrics.is_empty() {
            return Err(Error::Config(format!("task {} has no metric", self.id)));
        }
        Ok(())
    }
}

/// Autoencoding, edges, segmentation and shape counting.
pub fn default_tasks() -> Vec<TaskSpec> {
    let dense = |c| HeadSpec { kind: HeadKind::Dense, out_channels: c };
    vec![
        TaskSpec {
            id: "autoencode".into(),
            kind: TaskKind::DenseRegress,
            loss: LossKind::L1,
            target: Target::Image,
            lambda: 0.1,
            head: dense(1),
            metrics: vec![MetricSpec::new(MetricKind::MeanL1)],
        },
        TaskSpec {
            id: "edge".into(),
            kind: TaskKind::DenseRegress,
            loss: LossKind::L1,
            target: Target::Edge,
            lambda: 1.0,
            head: dense(1),
            metrics: vec![MetricSpec::new(MetricKind::MeanL1)],
        },
        TaskSpec {
            id: "segment".into(),
            kind: TaskKind::DenseSeg,
            loss: LossKind::CrossEntropy,
            target: Target::Seg,
            lambda: 1.0,
            head: dense(NUM_SEG_CLASSES),
            metrics: vec![MetricSpec::new(MetricKind::MeanIou)],
        },
        TaskSpec {
            id: "count".into(),
            kind: TaskKind::PointClass,
            loss: LossKind::CrossEntropy,
            target: Target::Count,
            lambda: 2.0,
            head: HeadSpec { kind: HeadKind::Point { hidden: POINT_HIDDEN }, out_channels: NUM_COUNT_CLASSES },
            metrics: vec![MetricSpec::new(MetricKind::Accuracy)],
        },
    ]
}

/// Looks tasks up by id, keeping the requested order.
pub fn select_tasks(ids: &[String]) -> Result<Vec<TaskSpec>> {
    let all = default_tasks();
    ids.iter()
        .map(|id| {
            all.iter()
                .find(|t| &t.id == id)
                .cloned()
                .ok_or_else(|| Error::Config(format!("unknown task {id:?}")))
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { y0: usize, x0: usize, h: usize, w: usize },
    Circle { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn bbox(&self) -> (isize, isize, isize, isize) {
        match *self {
            Shape::Rect { y0, x0, h, w } => (y0 as isize, x0 as isize, (y0 + h) as isize, (x0 + w) as isize),
            Shape::Circle { cy, cx, r } => (
                (cy - r).floor() as isize,
                (cx - r).floor() as isize,
                (cy + r).ceil() as isize + 1,
                (cx + r).ceil() as isize + 1,
            ),
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, h, w } => (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x),
            Shape::Circle { cy, cx, r } => {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                dy * dy + dx * dx <= r * r
            }
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, side: usize) -> Shape {
    let lo = (side / 6).max(2);
    let hi = (side * 3 / 8).max(lo + 1);
    if rng.random_bool(0.5) {
        let h = rng.random_range(lo..=hi);
        let w = rng.random_range(lo..=hi);
        Shape::Rect { y0: rng.random_range(0..=side - h), x0: rng.random_range(0..=side - w), h, w }
    } else {
        let r = rng.random_range(lo / 2..=hi / 2).max(1) as f64;
        let span = side as f64 - 2.0 * r - 1.0;
        Shape::Circle { cy: r + rng.random_range(0.0..=span), cx: r + rng.random_range(0.0..=span), r }
    }
}

fn overlaps(a: &Shape, b: &Shape) -> bool {
    let (ay0, ax0, ay1, ax1) = a.bbox();
    let (by0, bx0, by1, bx1) = b.bbox();
    // one pixel gap keeps shapes from touching
    ay0 <= by1 && by0 <= ay1 && ax0 <= bx1 && bx0 <= ax1
}

fn class_intensity(c: u8) -> f64 {
    0.3 + 0.2 * c as f64
}

fn make_scene(rng: &mut ChaCha8Rng, side: usize) -> Scene {
    loop {
        let n = rng.random_range(1..=3usize);
        let mut classes = vec![1u8, 2, 3];
        classes.shuffle(rng);
        let mut shapes: Vec<Shape> = Vec::new();
        for _ in 0..100 {
            if shapes.len() == n {
                break;
            }
            let s = random_shape(rng, side);
            if shapes.iter().all(|o| !overlaps(o, &s)) {
                shapes.push(s);
            }
        }
        if shapes.len() != n {
            continue;
        }
        let mut seg = vec![0u8; side * side];
        for (s, &c) in shapes.iter().zip(&classes) {
            for y in 0..side {
                for x in 0..side {
                    if s.contains(y, x) {
                        seg[y * side + x] = c;
                    }
                }
            }
        }
        // every shape must cover at least one pixel
        if classes[..n].iter().any(|c| !seg.contains(c)) {
            continue;
        }
        let image = seg
            .iter()
            .map(|&c| {
                let base = if c == 0 { BACKGROUND } else { class_intensity(c) };
                (base + rng.random_range(-NOISE..=NOISE)).clamp(0.0, 1.0)
            })
            .collect();
        let edge = sobel_edges(&seg, side);
        return Scene { side, image, seg, edge, count_class: n };
    }
}

/// `n` scenes of `SIDE x SIDE` pixels, deterministic per seed.
pub fn generate_dataset(n: usize, seed: u64) -> Result<Vec<Scene>> {
    generate_dataset_sized(n, seed, SIDE)
}

pub fn generate_dataset_sized(n: usize, seed: u64, side: usize) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(Error::Argument("dataset size must be at least 1".into()));
    }
    if side < 16 {
        return Err(Error::Argument(format!("scene side {side} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| make_scene(&mut rng, side)).collect())
}

/// Train/val/test split 70/15/15 by index.
pub fn split(scenes: &[Scene]) -> (&[Scene], &[Scene], &[Scene]) {
    let n = scenes.len();
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    (&scenes[..n_train], &scenes[n_train..n_train + n_val], &scenes[n_train + n_val..])
}

/// Sobel gradient magnitude of the label map (replicated border), divided
/// by its maximum. All zeros for a uniform map.
pub fn sobel_edges(seg: &[u8], side: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, side as isize - 1) as usize;
        let x = x.clamp(0, side as isize - 1) as usize;
        seg[y * side + x] as f64
    };
    let mut mag = vec![0.0; side * side];
    for y in 0..side as isize {
        for x in 0..side as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            mag[y as usize * side + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut mag {
            *v /= max;
        }
    }
    mag
}

/// Stacks scene images into `[B, side, side, 1]`.
pub fn batch_images(scenes: &[&Scene]) -> Result<Tensor> {
    let side = scenes.first().ok_or_else(|| Error::Argument("empty batch".into()))?.side;
    let mut data = Vec::with_capacity(scenes.len() * side * side);
    for s in scenes {
        if s.side != side {
            return Err(shape_err!("mixed scene sizes in batch"));
        }
        data.extend_from_slice(&s.image);
    }
    Tensor::new(vec![scenes.len(), side, side, 1], data)
}

fn dense_targets(scenes: &[&Scene], target: Target) -> Vec<f64> {
    scenes
        .iter()
        .flat_map(|s| match target {
            Target::Image => s.image.clone(),
            _ => s.edge.clone(),
        })
        .collect()
}

fn label_targets(scenes: &[&Scene], target: Target) -> Vec<usize> {
    match target {
        Target::Seg => scenes.iter().flat_map(|s| s.seg.iter().map(|&c| c as usize)).collect(),
        _ => scenes.iter().map(|s| s.count_class).collect(),
    }
}

/// Task loss of a head output on a batch.
pub fn task_loss(g: &mut Graph, out: Var, scenes: &[&Scene], spec: &TaskSpec) -> Result<Var> {
    match spec.loss {
        LossKind::L1 => g.l1_loss(out, &dense_targets(scenes, spec.target)),
        LossKind::CrossEntropy => g.cross_entropy(out, &label_targets(scenes, spec.target)),
    }
}

/// Decoded predictions of one task over a list of scenes.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Values(Vec<f64>),
    Labels(Vec<usize>),
}

impl Prediction {
    /// Decodes a head output: regressions keep values, classifiers take
    /// the argmax over the last axis (lowest index on ties).
    pub fn from_output(t: &Tensor, spec: &TaskSpec) -> Prediction {
        match spec.loss {
            LossKind::L1 => Prediction::Values(t.data().to_vec()),
            LossKind::CrossEntropy => {
                let c = *t.shape().last().unwrap();
                Prediction::Labels(
                    t.data()
                        .chunks(c)
                        .map(|row| {
                            let mut best = 0;
                            for (i, v) in row.iter().enumerate() {
                                if *v > row[best] {
                                    best = i;
                                }
                            }
                            best
                        })
                        .collect(),
                )
            }
        }
    }

    pub fn extend(&mut self, other: Prediction) -> Result<()> {
        match (self, other) {
            (Prediction::Values(a), Prediction::Values(b)) => a.extend(b),
            (Prediction::Labels(a), Prediction::Labels(b)) => a.extend(b),
            _ => return Err(Error::Argument("mixed prediction kinds".into())),
        }
        Ok(())
    }
}

/// Metric values per task, `values[k][j]` for metric `j` of task `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub values: Vec<Vec<f64>>,
}

fn mean_iou(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    let mut present = vec![false; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        present[t] = true;
        if p == t {
            inter[t] += 1;
            union[t] += 1;
        } else {
            union[t] += 1;
            if p < classes {
                union[p] += 1;
            }
        }
    }
    let ious: Vec<f64> =
        (0..classes).filter(|&c| present[c]).map(|c| inter[c] as f64 / union[c] as f64).collect();
    ious.iter().sum::<f64>() / ious.len() as f64
}

/// Metric table for per-task predictions over `scenes`.
pub fn evaluate(preds: &[Prediction], scenes: &[Scene], specs: &[TaskSpec]) -> Result<MetricTable> {
    if scenes.is_empty() || preds.is_empty() {
        return Err(Error::Argument("evaluation needs at least one scene and one task".into()));
    }
    if preds.len() != specs.len() {
        return Err(Error::Argument(format!("{} predictions for {} tasks", preds.len(), specs.len())));
    }
    let refs: Vec<&Scene> = scenes.iter().collect();
    let mut values = Vec::new();
    for (p, spec) in preds.iter().zip(specs) {
        let mut row = Vec::new();
        for m in &spec.metrics {
            let v = match (m.kind, p) {
                (MetricKind::MeanL1, Prediction::Values(v)) => {
                    let t = dense_targets(&refs, spec.target);
                    if v.len() != t.len() {
                        return Err(shape_err!("{}: {} values for {} targets", spec.id, v.len(), t.len()));
                    }
                    v.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / t.len() as f64
                }
                (MetricKind::MeanIou, Prediction::Labels(l)) => {
                    let t = label_targets(&refs, spec.target);
                    if l.len() != t.len() {
                        return Err(shape_err!("{}: {} labels for {} pixels", spec.id, l.len(), t.len()));
                    }
                    mean_iou(l, &t, spec.head.out_channels)
                }
                (MetricKind::Accuracy, Prediction::Labels(l)) => {
                    let t = label_targets(&refs, spec.target);
                    if l.len() != t.len() {
                        return Err(shape_err!("{}: {} labels for {} scenes", spec.id, l.len(), t.len()));
                    }
                    l.iter().zip(&t).filter(|(a, b)| a == b).count() as f64 / t.len() as f64
                }
                _ => return Err(Error::Argument(format!("{}: prediction kind does not fit metric {}", spec.id, m.name))),
            };
            row.push(v);
        }
        values.push(row);
    }
    Ok(MetricTable { values })
}

/// Perfect predictions for `scenes`, used as a reference.
pub fn oracle_predictions(scenes: &[Scene], specs: &[TaskSpec]) -> Vec<Prediction> {
    let refs: Vec<&Scene> = scenes.iter().collect();
    specs
        .iter()
        .map(|s| match s.loss {
            LossKind::L1 => Prediction::Values(dense_targets(&refs, s.target)),
            LossKind::CrossEntropy => Prediction::Labels(label_targets(&refs, s.target)),
        })
        .collect()
}

pub const DATASET_MAGIC: &[u8; 8] = b"MTNASDS1";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    version: u32,
    scenes: usize,
    side: usize,
    /// Array order in the payload.
    arrays: Vec<String>,
}

/// Writes scenes to one container file: images, labels, edges, counts.
pub fn save_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let side = scenes.first().map_or(SIDE, |s| s.side);
    if scenes.iter().any(|s| s.side != side) {
        return Err(Error::Argument("scenes of different sizes cannot share a file".into()));
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        scenes: scenes.len(),
        side,
        arrays: ["image", "seg", "edge", "count_class"].map(String::from).to_vec(),
    };
    let image: Vec<f64> = scenes.iter().flat_map(|s| s.image.iter().copied()).collect();
    let seg: Vec<f64> = scenes.iter().flat_map(|s| s.seg.iter().map(|&c| c as f64)).collect();
    let edge: Vec<f64> = scenes.iter().flat_map(|s| s.edge.iter().copied()).collect();
    let count: Vec<f64> = scenes.iter().map(|s| s.count_class as f64).collect();
    let json = serde_json::to_string(&manifest).expect("manifest serializes");
    container::write(path, DATASET_MAGIC, &json, &[&image, &seg, &edge, &count])
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let (json, data) = container::read(path, DATASET_MAGIC)?;
    let m: DatasetManifest = serde_json::from_str(&json).map_err(|e| Error::Persistence(format!("dataset manifest: {e}")))?;
    if m.version != DATASET_VERSION {
        return Err(Error::Persistence(format!("dataset version {} unsupported", m.version)));
    }
    let px = m.side * m.side;
    if data.len() != m.scenes * (3 * px + 1) {
        return Err(Error::Persistence(format!("dataset payload has {} values, expected {}", data.len(), m.scenes * (3 * px + 1))));
    }
    let (image, rest) = data.split_at(m.scenes * px);
    let (seg, rest) = rest.split_at(m.scenes * px);
    let (edge, count) = rest.split_at(m.scenes * px);
    Ok((0..m.scenes)
        .map(|i| Scene {
            side: m.side,
            image: image[i * px..(i + 1) * px].to_vec(),
            seg: seg[i * px..(i + 1) * px].iter().map(|&c| c as u8).collect(),
            edge: edge[i * px..(i + 1) * px].to_vec(),
            count_class: count[i] as usize,
        })
        .collect())
}
