use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::search_space::{CellSpace, LayerId};
use crate::supernet::init_supernet;
use crate::tasks::{default_tasks, generate_dataset_sized};

fn column_sums(u: &Tensor) -> Vec<f64> {
    let (s, t) = (u.shape()[0], u.shape()[1]);
    (0..t).map(|k| (0..s).map(|i| u.data()[i * t + k]).sum()).collect()
}

#[test]
fn uniform_logits_zero_noise_give_uniform_selection() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[10, 3]));
    let u = gumbel_soft_select_graph(&mut g, l, &Tensor::zeros(&[10, 3]), 1.0).unwrap();
    for v in g.value(u).data() {
        assert!((v - 0.1).abs() < 1e-15);
    }
}

#[test]
fn low_temperature_is_nearly_one_hot() {
    let mut logits = Tensor::zeros(&[4, 2]);
    logits.data_mut()[2 * 2] = 1.0;
    logits.data_mut()[1] = 1.0;
    let mut g = Graph::new();
    let l = g.constant(logits);
    let u = gumbel_soft_select_graph(&mut g, l, &Tensor::zeros(&[4, 2]), 0.01).unwrap();
    let d = g.value(u).data();
    assert!(d[2 * 2] > 0.999);
    assert!(d[1] > 0.999);
}

#[test]
fn non_positive_temperature_rejected() {
    for tau in [0.0, -1.0, f64::NAN] {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(
            gumbel_soft_select_graph(&mut g, l, &Tensor::zeros(&[3, 1]), tau),
            Err(Error::Argument(_))
        ));
    }
}

proptest! {
    #[test]
    fn selection_columns_sum_to_one(seed in any::<u64>(), s in 1usize..25, t in 1usize..5, tau in 0.05f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dist = SkeletonDistribution::with_candidates(vec![Skeleton::Single(LayerId::encoder(1)); s], t);
        for v in dist.logits.data_mut() {
            *v = rng.random_range(-5.0..5.0);
        }
        dist.tau = tau;
        let u = gumbel_soft_select(&dist, &mut rng).unwrap();
        for c in column_sums(&u) {
            prop_assert!((c - 1.0).abs() < 1e-12);
        }
        prop_assert!(u.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn anneal_endpoints_and_monotone() {
    assert_eq!(anneal_tau(0, 100, 5.0, 0.1), 5.0);
    assert!((anneal_tau(100, 100, 5.0, 0.1) - 0.1).abs() < 1e-12);
    assert!((anneal_tau(50, 100, 5.0, 0.1) - (0.5f64).sqrt()).abs() < 1e-12);
    assert_eq!(anneal_tau(500, 100, 5.0, 0.1), 0.1);
    let mut prev = f64::INFINITY;
    for s in 0..=100 {
        let t = anneal_tau(s, 100, 5.0, 0.1);
        assert!(t <= prev && t >= 0.1);
        prev = t;
    }
}

fn aggregate(l: &[f64], u: &[f64], lam: &[f64], s: usize) -> f64 {
    let t = lam.len();
    let mut g = Graph::new();
    let lv = g.constant(Tensor::new(vec![s, t], l.to_vec()).unwrap());
    let uv = g.constant(Tensor::new(vec![s, t], u.to_vec()).unwrap());
    let out = aggregate_loss(&mut g, lv, uv, lam).unwrap();
    g.value(out).item().unwrap()
}

#[test]
fn aggregate_one_hot_picks_selected_losses() {
    let l = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let u = [0.0, 1.0, 1.0, 0.0, 0.0, 0.0];
    assert_eq!(aggregate(&l, &u, &[1.0, 1.0], 3), 2.0 + 3.0);
}

#[test]
fn aggregate_is_linear_in_lambda() {
    let l = [0.3, 1.7, 2.2, 0.4];
    let u = [0.25, 0.6, 0.75, 0.4];
    let base = aggregate(&l, &u, &[1.0, 2.0], 2);
    assert!((aggregate(&l, &u, &[2.0, 4.0], 2) - 2.0 * base).abs() < 1e-12);
}

#[test]
fn aggregate_scales_columns_by_task_weight() {
    let l = [1.0, 1.0, 2.0, 2.0];
    let u = [0.5, 0.5, 0.5, 0.5];
    // column sums of u*L are 1.5 each
    assert!((aggregate(&l, &u, &[30.0, 0.1], 2) - (30.0 * 1.5 + 0.1 * 1.5)).abs() < 1e-12);
}

#[test]
fn aggregate_shape_mismatch() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[3, 2]));
    let u = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(aggregate_loss(&mut g, l, u, &[1.0, 1.0]), Err(Error::Shape(_))));
    let u = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(aggregate_loss(&mut g, l, u, &[1.0]), Err(Error::Shape(_))));
}

#[test]
fn discretize_argmax_and_ties() {
    let cands = enumerate_skeletons(ScaleMode::Single)[..3].to_vec();
    let mut d = SkeletonDistribution::with_candidates(cands.clone(), 2);
    d.logits = Tensor::new(vec![3, 2], vec![0.1, 0.0, 2.3, 0.0, -1.0, 0.0]).unwrap();
    let (u, chosen) = discretize(&d);
    assert_eq!(chosen, vec![cands[1], cands[0]]);
    assert_eq!(u.data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
}

/// `l(logits)` for fixed noise, losses and weights.
fn gumbel_objective(logits: &[f64], noise: &Tensor, losses: &[f64], lam: &[f64], tau: f64) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(Tensor::new(vec![2, 2], logits.to_vec()).unwrap());
    let u = gumbel_soft_select_graph(&mut g, l, noise, tau).unwrap();
    let lm = g.constant(Tensor::new(vec![2, 2], losses.to_vec()).unwrap());
    let out = aggregate_loss(&mut g, lm, u, lam).unwrap();
    g.value(out).item().unwrap()
}

#[test]
fn logit_gradient_matches_finite_differences() {
    let logits = [0.3, -0.2, 0.7, 0.1];
    let noise = Tensor::new(vec![2, 2], vec![0.5, -0.3, 0.1, 0.9]).unwrap();
    let losses = [1.2, 0.4, 0.7, 2.5];
    let lam = [1.0, 2.0];
    let tau = 0.8;

    let mut g = Graph::new();
    let l = g.param(Tensor::new(vec![2, 2], logits.to_vec()).unwrap());
    let u = gumbel_soft_select_graph(&mut g, l, &noise, tau).unwrap();
    let lm = g.constant(Tensor::new(vec![2, 2], losses.to_vec()).unwrap());
    let out = aggregate_loss(&mut g, lm, u, &lam).unwrap();
    g.backward(out).unwrap();
    let analytic = g.grad(l).data().to_vec();

    let h = 1e-6;
    for i in 0..4 {
        let mut p = logits;
        p[i] += h;
        let fp = gumbel_objective(&p, &noise, &losses, &lam, tau);
        p[i] -= 2.0 * h;
        let fm = gumbel_objective(&p, &noise, &losses, &lam, tau);
        let fd = (fp - fm) / (2.0 * h);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-8);
        assert!(rel < 1e-4, "entry {i}: fd {fd} analytic {}", analytic[i]);
    }
}

#[test]
fn proxy_backward_equals_direct_gradient() {
    // Direct: one graph from logits through U' and the loss matrix.
    // Proxy: dl/dU' from a graph where U' is a leaf, then sum(U' * dl/dU').
    let logits = Tensor::new(vec![3, 2], vec![0.2, -0.4, 1.0, 0.3, -0.7, 0.0]).unwrap();
    let noise = Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.5, 0.4, 0.9, -0.1]).unwrap();
    let w = Tensor::new(vec![3, 2], vec![0.5, 1.5, -0.2, 0.8, 1.1, 0.3]).unwrap();
    let lam = [0.5, 2.0];
    let tau = 1.3;
    let losses = |g: &mut Graph| {
        let wv = g.param(w.clone());
        let sq = g.mul(wv, wv).unwrap();
        (wv, sq)
    };

    let mut g = Graph::new();
    let l = g.param(logits.clone());
    let u = gumbel_soft_select_graph(&mut g, l, &noise, tau).unwrap();
    let (wv, lm) = losses(&mut g);
    let out = aggregate_loss(&mut g, lm, u, &lam).unwrap();
    g.backward(out).unwrap();
    let direct_logits = g.grad(l).data().to_vec();
    let direct_w = g.grad(wv).data().to_vec();

    let mut sel = Graph::new();
    let l2 = sel.param(logits);
    let u2 = gumbel_soft_select_graph(&mut sel, l2, &noise, tau).unwrap();
    let mut inner = Graph::new();
    let uleaf = inner.leaf(sel.value(u2).clone(), true);
    let (wv2, lm2) = losses(&mut inner);
    let out2 = aggregate_loss(&mut inner, lm2, uleaf, &lam).unwrap();
    inner.backward(out2).unwrap();
    let gu = sel.constant(inner.grad(uleaf).clone());
    let proxy = sel.mul(u2, gu).unwrap();
    let proxy = sel.sum_all(proxy).unwrap();
    sel.backward(proxy).unwrap();

    for (a, b) in sel.grad(l2).data().iter().zip(&direct_logits) {
        assert!((a - b).abs() < 1e-14);
    }
    assert_eq!(inner.grad(wv2).data(), direct_w.as_slice());
}

fn toy_tasks() -> Vec<TaskSpec> {
    default_tasks().into_iter().take(2).collect()
}

fn toy_supernet(seed: u64) -> Supernet {
    let heads: Vec<_> = toy_tasks().iter().map(|t| t.head).collect();
    init_supernet(&CellSpace::desk(), ScaleMode::Single, &heads, seed).unwrap()
}

#[test]
fn history_csv_layout() {
    let mut sn = toy_supernet(0);
    let data = generate_dataset_sized(4, 3, 32).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 2, ..Default::default() };
    let h = train_supernet(&mut sn, &data, &toy_tasks(), &cfg).unwrap();
    assert_eq!(h.records.len(), 2);
    let csv = h.to_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,epoch,tau,total_loss,loss_autoencode,loss_edge,entropy_autoencode,entropy_edge"
    );
    assert_eq!(lines.count(), 2);
    assert_eq!(sn.step, 2);
    // logits moved away from zero
    assert!(sn.skeleton_dist.logits.data().iter().any(|&v| v != 0.0));
}

#[test]
fn training_is_seed_deterministic() {
    let data = generate_dataset_sized(4, 3, 32).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 2, seed: 7, ..Default::default() };
    let mut a = toy_supernet(1);
    let mut b = toy_supernet(1);
    let ha = train_supernet(&mut a, &data, &toy_tasks(), &cfg).unwrap();
    let hb = train_supernet(&mut b, &data, &toy_tasks(), &cfg).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.params(), b.params());
    assert_eq!(a.skeleton_dist, b.skeleton_dist);
}

#[test]
fn single_candidate_selection_is_constant_one() {
    let dist = SkeletonDistribution::with_candidates(vec![Skeleton::Single(LayerId::encoder(2))], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let u = gumbel_soft_select(&dist, &mut rng).unwrap();
        assert_eq!(u.data(), &[1.0, 1.0, 1.0]);
    }
}

#[test]
fn single_candidate_training_leaves_logits_fixed() {
    let mut sn = toy_supernet(2);
    sn.skeleton_dist = SkeletonDistribution::with_candidates(vec![Skeleton::Single(LayerId::encoder(1))], 2);
    let data = generate_dataset_sized(2, 5, 32).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 2, ..Default::default() };
    train_supernet(&mut sn, &data, &toy_tasks(), &cfg).unwrap();
    assert_eq!(sn.skeleton_dist.logits.data(), &[0.0, 0.0]);
}

#[test]
fn nan_weight_reports_iteration() {
    let mut sn = toy_supernet(3);
    let i = sn.index_of("patch_embed.w").expect("patch embed weight");
    sn.params_mut()[i].data_mut()[0] = f64::NAN;
    let data = generate_dataset_sized(2, 5, 32).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 2, ..Default::default() };
    match train_supernet(&mut sn, &data, &toy_tasks(), &cfg) {
        Err(Error::Numerics(m)) => assert!(m.contains("iteration 0"), "{m}"),
        other => panic!("expected numerics error, got {other:?}"),
    }
}

#[test]
fn invalid_configs_rejected() {
    let mut sn = toy_supernet(0);
    let data = generate_dataset_sized(2, 5, 32).unwrap();
    let bad = [
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { tau_min: 0.0, ..Default::default() },
        TrainConfig { tau0: 0.05, ..Default::default() },
    ];
    for cfg in bad {
        assert!(matches!(train_supernet(&mut sn, &data, &toy_tasks(), &cfg), Err(Error::Config(_))));
    }
    let cfg = TrainConfig::default();
    assert!(matches!(train_supernet(&mut sn, &[], &toy_tasks(), &cfg), Err(Error::Argument(_))));
    assert!(matches!(train_supernet(&mut sn, &data, &default_tasks(), &cfg), Err(Error::Argument(_))));
}

#[test]
fn toy_training_reduces_loss() {
    // segmentation and counting on 32x32 scenes, 200 iterations
    let tasks: Vec<_> = default_tasks().into_iter().skip(2).collect();
    let heads: Vec<_> = tasks.iter().map(|t| t.head).collect();
    let mut sn = init_supernet(&CellSpace::desk(), ScaleMode::Single, &heads, 11).unwrap();
    let data = generate_dataset_sized(40, 12, 32).unwrap();
    let cfg = TrainConfig { epochs: 5, batch_size: 1, seed: 11, ..Default::default() };
    let h = train_supernet(&mut sn, &data, &tasks, &cfg).unwrap();
    assert_eq!(h.records.len(), 200);
    let e = h.epoch_total_loss();
    for w in e.windows(2) {
        assert!(w[1] < w[0], "{e:?}");
    }
    assert!(e[4] <= 0.7 * e[0], "{e:?}");
}
