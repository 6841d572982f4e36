//! Gumbel-softmax distribution over skeletons, the weighted multi-task
//! loss, supernet training and discretization.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::optim::{schedule, AdamW, AdamWConfig};
use crate::search_space::{
    enumerate_skeletons, sample_cell_config, union_skeletons, CellConfig, LayerId, MultiTaskGraph, SampleMode,
    ScaleMode, Skeleton,
};
use crate::supernet::Supernet;
use crate::tasks::{batch_images, task_loss, Scene, TaskSpec};
use crate::supernet::Binding;
use crate::transformer::{forward_layers, head_finish, head_projection};

pub const TAU0: f64 = 5.0;
pub const TAU_MIN: f64 = 0.1;

/// Trainable skeleton logits, one column per task.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonDistribution {
    pub candidates: Vec<Skeleton>,
    /// `[skeletons, tasks]`.
    pub logits: Tensor,
    pub tau: f64,
    pub tau0: f64,
    pub tau_min: f64,
}

impl SkeletonDistribution {
    /// Zero logits over every skeleton of `mode`.
    pub fn new(mode: ScaleMode, n_tasks: usize) -> Self {
        Self::with_candidates(enumerate_skeletons(mode), n_tasks)
    }

    pub fn with_candidates(candidates: Vec<Skeleton>, n_tasks: usize) -> Self {
        let s = candidates.len();
        Self { candidates, logits: Tensor::zeros(&[s, n_tasks]), tau: TAU0, tau0: TAU0, tau_min: TAU_MIN }
    }

    pub fn num_skeletons(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn num_tasks(&self) -> usize {
        self.logits.shape()[1]
    }

    /// Column-wise softmax of the logits.
    pub fn probs(&self) -> Tensor {
        let (s, t) = (self.num_skeletons(), self.num_tasks());
        let mut out = Tensor::zeros(&[s, t]);
        for k in 0..t {
            let col: Vec<f64> = (0..s).map(|i| self.logits.data()[i * t + k]).collect();
            let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = col.iter().map(|v| (v - m).exp()).sum();
            for i in 0..s {
                out.data_mut()[i * t + k] = (col[i] - m).exp() / z;
            }
        }
        out
    }

    /// Entropy (nats) of each column's softmax.
    pub fn entropy(&self) -> Vec<f64> {
        let p = self.probs();
        let (s, t) = (self.num_skeletons(), self.num_tasks());
        (0..t)
            .map(|k| {
                -(0..s)
                    .map(|i| p.data()[i * t + k])
                    .filter(|&v| v > 0.0)
                    .map(|v| v * v.ln())
                    .sum::<f64>()
            })
            .collect()
    }
}

/// Fresh i.i.d. Gumbel(0, 1) noise shaped `[skeletons, tasks]`.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, skeletons: usize, tasks: usize) -> Tensor {
    let g = Gumbel::new(0.0, 1.0).expect("valid gumbel");
    Tensor::new(vec![skeletons, tasks], (0..skeletons * tasks).map(|_| g.sample(rng)).collect()).expect("shape")
}

/// Relaxed selection `softmax((logits + noise) / tau)` over the skeleton
/// axis, differentiable with respect to `logits`.
pub fn gumbel_soft_select_graph(g: &mut Graph, logits: Var, noise: &Tensor, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    let n = g.constant(noise.clone());
    let z = g.add(logits, n)?;
    let z = g.scale(z, 1.0 / tau)?;
    g.softmax(z, 0)
}

/// Draws noise and returns the relaxed selection matrix `U'`.
pub fn gumbel_soft_select<R: Rng + ?Sized>(dist: &SkeletonDistribution, rng: &mut R) -> Result<Tensor> {
    let noise = gumbel_noise(rng, dist.num_skeletons(), dist.num_tasks());
    let mut g = Graph::new();
    let l = g.constant(dist.logits.clone());
    let u = gumbel_soft_select_graph(&mut g, l, &noise, dist.tau)?;
    Ok(g.value(u).clone())
}

/// Exponential decay from `tau0` to `tau_min` over `total` steps.
pub fn anneal_tau(step: usize, total: usize, tau0: f64, tau_min: f64) -> f64 {
    if total == 0 {
        return tau_min;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    (tau0 * (tau_min / tau0).powf(frac)).max(tau_min)
}

/// `sum_k sum_s lambda_k u'_{s,k} L_{s,k}`.
pub fn aggregate_loss(g: &mut Graph, losses: Var, u: Var, lambda: &[f64]) -> Result<Var> {
    let shape = g.shape(losses).to_vec();
    if shape.len() != 2 || g.shape(u) != shape.as_slice() || shape[1] != lambda.len() {
        return Err(shape_err!(
            "aggregate_loss: L {:?}, U' {:?}, {} task weights",
            shape,
            g.shape(u),
            lambda.len()
        ));
    }
    let lam: Vec<f64> = (0..shape[0]).flat_map(|_| lambda.iter().copied()).collect();
    let lam = g.constant(Tensor::new(shape, lam)?);
    let w = g.mul(losses, u)?;
    let w = g.mul(w, lam)?;
    g.sum_all(w)
}

/// Column-wise argmax of the logits (lowest index wins ties): the one-hot
/// matrix `U` and the skeleton chosen for each task.
pub fn discretize(dist: &SkeletonDistribution) -> (Tensor, Vec<Skeleton>) {
    let (s, t) = (dist.num_skeletons(), dist.num_tasks());
    let mut u = Tensor::zeros(&[s, t]);
    let mut chosen = Vec::with_capacity(t);
    for k in 0..t {
        let mut best = 0;
        for i in 1..s {
            if dist.logits.data()[i * t + k] > dist.logits.data()[best * t + k] {
                best = i;
            }
        }
        u.data_mut()[best * t + k] = 1.0;
        chosen.push(dist.candidates[best]);
    }
    (u, chosen)
}

/// Stage-1 multi-task graph from the discretized distribution.
pub fn stage1_graph(dist: &SkeletonDistribution) -> Result<MultiTaskGraph> {
    union_skeletons(&discretize(dist).1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Gumbel-softmax relaxation with learned logits.
    Gumbel,
    /// Ablation: one uniformly random skeleton per task and iteration.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub warmup_epochs: usize,
    /// Adam step size for the skeleton logits.
    pub arch_lr: f64,
    pub tau0: f64,
    pub tau_min: f64,
    pub selection: Selection,
    /// `[max, min, uniform, uniform]` per step when true, min only otherwise.
    pub sandwich: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            warmup_epochs: 1,
            arch_lr: 0.05,
            tau0: TAU0,
            tau_min: TAU_MIN,
            selection: Selection::Gumbel,
            sandwich: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.tau_min > 0.0 && self.tau0 >= self.tau_min) {
            return Err(Error::Config("need tau0 >= tau_min > 0".into()));
        }
        if !(self.optimizer.lr > 0.0 && self.arch_lr >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub tau: f64,
    pub total_loss: f64,
    /// Unweighted expected loss per task, averaged over the sampled subnets.
    pub task_loss: Vec<f64>,
    pub entropy: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub task_ids: Vec<String>,
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,tau,total_loss");
        for t in &self.task_ids {
            write!(s, ",loss_{t}").unwrap();
        }
        for t in &self.task_ids {
            write!(s, ",entropy_{t}").unwrap();
        }
        s.push('\n');
        for r in &self.records {
            write!(s, "{},{},{},{}", r.step, r.epoch, r.tau, r.total_loss).unwrap();
            for v in r.task_loss.iter().chain(&r.entropy) {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    fn epoch_mean(&self, f: impl Fn(&StepRecord) -> f64) -> Vec<f64> {
        let mut by: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &self.records {
            let e = by.entry(r.epoch).or_default();
            e.0 += f(r);
            e.1 += 1;
        }
        by.values().map(|(s, n)| s / *n as f64).collect()
    }

    pub fn epoch_total_loss(&self) -> Vec<f64> {
        self.epoch_mean(|r| r.total_loss)
    }

    pub fn epoch_task_loss(&self, task: usize) -> Vec<f64> {
        self.epoch_mean(|r| r.task_loss[task])
    }

    pub fn final_entropy(&self) -> Vec<f64> {
        self.records.last().map(|r| r.entropy.clone()).unwrap_or_default()
    }
}

/// Skeleton loss matrix for one subnet and batch. Returns the graph node
/// `[skeletons, tasks]` of losses.
pub fn loss_matrix(
    g: &mut Graph,
    b: &mut Binding<'_>,
    sn: &Supernet,
    cfg: &CellConfig,
    images: Var,
    batch: &[&Scene],
    tasks: &[TaskSpec],
    candidates: &[Skeleton],
) -> Result<Var> {
    let side = batch[0].side;
    let mut wanted = std::collections::BTreeSet::new();
    for s in candidates {
        wanted.extend(s.outputs());
    }
    let feats = forward_layers(g, b, &sn.space, cfg, &wanted, images)?;
    // per-level head projections are shared by every skeleton using that layer
    let mut proj: BTreeMap<(usize, LayerId), Var> = BTreeMap::new();
    let mut entries = vec![None; candidates.len() * tasks.len()];
    for (k, spec) in tasks.iter().enumerate() {
        for (si, s) in candidates.iter().enumerate() {
            let mut acc: Option<Var> = None;
            for l in s.outputs() {
                let p = match proj.get(&(k, l)) {
                    Some(p) => *p,
                    None => {
                        let p = head_projection(g, b, k, &spec.head, l.level, feats[&l], (side, side), sn.space.patch_size)?;
                        proj.insert((k, l), p);
                        p
                    }
                };
                acc = Some(match acc {
                    None => p,
                    Some(a) => g.add(a, p)?,
                });
            }
            let out = head_finish(g, b, k, &spec.head, acc.expect("skeleton has outputs"))?;
            let l = task_loss(g, out, batch, spec).map_err(|e| match e {
                Error::Numerics(m) => Error::Numerics(format!("skeleton {} task {}: {m}", s.label(), spec.id)),
                other => other,
            })?;
            entries[si * tasks.len() + k] = Some(g.reshape(l, &[1])?);
        }
    }
    let flat: Vec<Var> = entries.into_iter().map(|v| v.expect("filled")).collect();
    let cat = g.concat(&flat, 0)?;
    g.reshape(cat, &[candidates.len(), tasks.len()])
}

fn one_hot_uniform<R: Rng + ?Sized>(rng: &mut R, s: usize, t: usize) -> Tensor {
    let mut u = Tensor::zeros(&[s, t]);
    for k in 0..t {
        let i = rng.random_range(0..s);
        u.data_mut()[i * t + k] = 1.0;
    }
    u
}

/// Trains the supernet weights and skeleton logits on `data`.
pub fn train_supernet(sn: &mut Supernet, data: &[Scene], tasks: &[TaskSpec], cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if tasks.len() != sn.num_tasks() {
        return Err(Error::Argument(format!("{} tasks for a supernet with {} heads", tasks.len(), sn.num_tasks())));
    }
    for t in tasks {
        t.validate()?;
    }
    let lambda: Vec<f64> = tasks.iter().map(|t| t.lambda).collect();
    let candidates = sn.skeleton_dist.candidates.clone();
    let (n_s, n_t) = (candidates.len(), tasks.len());
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    sn.skeleton_dist.tau0 = cfg.tau0;
    sn.skeleton_dist.tau_min = cfg.tau_min;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = sn.params().iter().map(Tensor::numel).collect();
    let decay: Vec<bool> = sn.params().iter().map(|t| t.shape().len() >= 2).collect();
    let mut opt = AdamW::new(cfg.optimizer, &sizes);
    let arch_cfg = AdamWConfig { lr: cfg.arch_lr, lr_min: cfg.arch_lr, weight_decay: 0.0, ..cfg.optimizer };
    let mut arch_opt = AdamW::new(arch_cfg, &[n_s * n_t]);
    let layers = sn.layers();
    let mut history = TrainHistory { task_ids: tasks.iter().map(|t| t.id.clone()).collect(), records: Vec::new() };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let tau = anneal_tau(step, total, cfg.tau0, cfg.tau_min);
            sn.skeleton_dist.tau = tau;
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &data[i]).collect();
            let images = batch_images(&batch)?;

            // one selection matrix per iteration, shared by all subnets
            let mut sel = Graph::new();
            let logits = sel.param(sn.skeleton_dist.logits.clone());
            let u_val = match cfg.selection {
                Selection::Gumbel => {
                    let noise = gumbel_noise(&mut rng, n_s, n_t);
                    let u = gumbel_soft_select_graph(&mut sel, logits, &noise, tau)?;
                    Some(u)
                }
                Selection::Uniform => None,
            };
            let u_tensor = match u_val {
                Some(u) => sel.value(u).clone(),
                None => one_hot_uniform(&mut rng, n_s, n_t),
            };

            let cfgs: Vec<CellConfig> = if cfg.sandwich {
                sn.sandwich_sample(&mut rng).to_vec()
            } else {
                vec![sample_cell_config(&sn.space, &layers, SampleMode::Min, &mut rng)]
            };
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; sizes.len()];
            let mut u_grad = vec![0.0; n_s * n_t];
            let mut total_loss = 0.0;
            let mut task_loss_acc = vec![0.0; n_t];
            for (j, c) in cfgs.iter().enumerate() {
                let diag = |e: Error| match e {
                    Error::Numerics(m) => Error::Numerics(format!("iteration {step}, subnet {j}: {m}")),
                    other => other,
                };
                let mut g = Graph::new();
                let mut b = sn.bind();
                let img = g.constant(images.clone());
                let lm = loss_matrix(&mut g, &mut b, sn, c, img, &batch, tasks, &candidates).map_err(diag)?;
                let u = g.leaf(u_tensor.clone(), cfg.selection == Selection::Gumbel);
                let l = aggregate_loss(&mut g, lm, u, &lambda).map_err(diag)?;
                g.backward(l).map_err(diag)?;
                b.accumulate_grads(&g, &mut grads);
                if let Some(gu) = g.grad_data(u) {
                    for (a, v) in u_grad.iter_mut().zip(gu) {
                        *a += v;
                    }
                }
                total_loss += g.value(l).item()?;
                let lv = g.value(lm).data();
                for k in 0..n_t {
                    task_loss_acc[k] += (0..n_s).map(|s| u_tensor.data()[s * n_t + k] * lv[s * n_t + k]).sum::<f64>();
                }
            }
            let n_sub = cfgs.len() as f64;

            let lr = schedule(&cfg.optimizer, step, warmup, total);
            {
                let mut ps: Vec<&mut [f64]> = sn.params_mut().iter_mut().map(|t| t.data_mut()).collect();
                let gs: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
                opt.step(&mut ps, &gs, &decay, lr);
            }
            if let Some(u) = u_val {
                let gu = sel.constant(Tensor::new(vec![n_s, n_t], u_grad)?);
                let proxy = sel.mul(u, gu)?;
                let proxy = sel.sum_all(proxy)?;
                sel.backward(proxy)?;
                let lg = sel.grad(logits);
                arch_opt.step(&mut [sn.skeleton_dist.logits.data_mut()], &[Some(lg.data())], &[false], cfg.arch_lr);
            }
            sn.step += 1;
            history.records.push(StepRecord {
                step,
                epoch,
                tau,
                total_loss: total_loss / n_sub,
                task_loss: task_loss_acc.iter().map(|v| v / n_sub).collect(),
                entropy: sn.skeleton_dist.entropy(),
            });
            step += 1;
        }
    }
    sn.skeleton_dist.tau = anneal_tau(total, total, cfg.tau0, cfg.tau_min);
    Ok(history)
}

#[cfg(test)]
mod tests;
