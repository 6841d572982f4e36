use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::search_space::{count_params, enumerate_skeletons, union_skeletons, BlockConfig, Skeleton};
use crate::tasks::default_tasks;
use crate::transformer::run_head;

fn heads() -> Vec<HeadSpec> {
    default_tasks().into_iter().map(|t| t.head).collect()
}

fn desk(mode: ScaleMode, seed: u64) -> Supernet {
    init_supernet(&CellSpace::desk(), mode, &heads(), seed).unwrap()
}

fn random_graph(rng: &mut ChaCha8Rng, mode: ScaleMode, n_tasks: usize) -> MultiTaskGraph {
    let all = enumerate_skeletons(mode);
    let pick: Vec<Skeleton> = (0..n_tasks).map(|_| all[rng.random_range(0..all.len())]).collect();
    union_skeletons(&pick).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, b: usize, side: usize) -> Tensor {
    Tensor::new(vec![b, side, side, 1], (0..b * side * side).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Forward of every task head of `graph`; returns output values.
fn forward<W: WeightSource>(
    ws: &mut W,
    sn: &Supernet,
    cfg: &CellConfig,
    graph: &MultiTaskGraph,
    img: &Tensor,
) -> (Graph, Vec<Var>) {
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let side = img.shape()[1];
    let feats = forward_layers(&mut g, ws, &sn.space, cfg, &graph.layers(), x).unwrap();
    let mut outs = Vec::new();
    for k in 0..graph.num_tasks() {
        let f: Vec<(u8, Var)> = graph.task_attach(k).iter().map(|l| (l.level, feats[l])).collect();
        outs.push(run_head(&mut g, ws, k, &sn.heads[k], &f, (side, side), sn.space.patch_size).unwrap());
    }
    (g, outs)
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = desk(ScaleMode::Single, 1);
    let b = desk(ScaleMode::Single, 1);
    let c = desk(ScaleMode::Single, 2);
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    for (n, t) in a.names().iter().zip(a.params()) {
        if n.ends_with("ln1.g") || n.ends_with("ln2.g") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{n}");
        } else if t.shape().len() == 1 {
            assert!(t.data().iter().all(|&v| v == 0.0), "{n}");
        } else {
            assert!(t.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD), "{n}");
        }
    }
}

#[test]
fn counting_only_presets_are_rejected() {
    let err = init_supernet(&CellSpace::paper_small(), ScaleMode::Single, &heads(), 0);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn every_skeleton_component_has_weights() {
    let sn = desk(ScaleMode::Multi, 0);
    let shapes: BTreeMap<String, Vec<usize>> = param_shapes(&sn.space, &sn.heads).into_iter().collect();
    assert_eq!(shapes.len(), sn.names().len());
    for mode in [ScaleMode::Single, ScaleMode::Multi] {
        for s in enumerate_skeletons(mode) {
            for l in s.layers() {
                assert!(shapes.contains_key(&names::block(l, 0, "qkv.w")));
            }
        }
    }
    assert_eq!(shapes["b4.blk1.ffn1.w"], vec![512, 128]);
    assert_eq!(shapes["pool1.w"], vec![32, 64]);
    assert_eq!(shapes["up4_3.w"], vec![64, 128]);
}

#[test]
fn max_view_covers_every_weight() {
    let sn = desk(ScaleMode::Multi, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let max = sample_cell_config(&sn.space, &sn.layers(), SampleMode::Max, &mut rng);
    let view = sn.slice(&max, &sn.graph).unwrap();
    assert_eq!(view.num_params(), sn.total_params());
    for s in &view.slices {
        let full = sn.param(&s.name).unwrap().shape();
        let want: Vec<(usize, usize)> = full.iter().map(|&n| (0, n)).collect();
        // qkv rows are read as three blocks that together span the tensor
        if !s.name.contains("qkv") {
            assert_eq!(s.bounds, want, "{}", s.name);
        }
    }
}

#[test]
fn view_forward_equals_standalone_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for mode in [ScaleMode::Single, ScaleMode::Multi] {
        let sn = desk(mode, 3);
        for trial in 0..10 {
            let graph = random_graph(&mut rng, mode, 4);
            let cfg = sample_cell_config(&sn.space, &graph.layers(), SampleMode::Uniform, &mut rng);
            let img = random_image(&mut rng, 1, 32);
            let view = sn.slice(&cfg, &graph).unwrap();
            let mut standalone = sn.extract(&view).unwrap();
            let (ga, oa) = forward(&mut sn.bind(), &sn, &cfg, &graph, &img);
            let (gb, ob) = forward(&mut standalone, &sn, &cfg, &graph, &img);
            for (a, b) in oa.iter().zip(&ob) {
                for (x, y) in ga.value(*a).data().iter().zip(gb.value(*b).data()) {
                    let rel = (x - y).abs() / x.abs().max(1e-300).max(1.0);
                    assert!(rel < 1e-12, "{mode:?} trial {trial}: {x} vs {y}");
                }
            }
        }
    }
}

#[test]
fn brute_force_param_count_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let hs = heads();
    for mode in [ScaleMode::Single, ScaleMode::Multi] {
        let sn = desk(mode, 0);
        for _ in 0..10 {
            let graph = random_graph(&mut rng, mode, 4);
            let cfg = sample_cell_config(&sn.space, &graph.layers(), SampleMode::Uniform, &mut rng);
            let view = sn.slice(&cfg, &graph).unwrap();
            let oracle = sn.extract(&view).unwrap().num_params();
            assert_eq!(count_params(&graph, &cfg, &sn.space, &hs).unwrap(), oracle);
            assert_eq!(view.num_params(), oracle);
        }
    }
}

#[test]
fn out_of_slice_gradients_are_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sn = desk(ScaleMode::Single, 4);
    let specs = default_tasks();
    for _ in 0..3 {
        let graph = random_graph(&mut rng, ScaleMode::Single, 4);
        let cfg = sample_cell_config(&sn.space, &graph.layers(), SampleMode::Uniform, &mut rng);
        let view = sn.slice(&cfg, &graph).unwrap();
        let img = random_image(&mut rng, 1, 32);
        let mut b = sn.bind();
        let (mut g, outs) = forward(&mut b, &sn, &cfg, &graph, &img);
        let mut total = None;
        for (o, s) in outs.iter().zip(&specs) {
            let l = if s.head.kind == HeadKind::Dense { g.mean_all(*o).unwrap() } else { g.sum_all(*o).unwrap() };
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l).unwrap(),
            });
        }
        g.backward(total.unwrap()).unwrap();
        let mut acc = vec![None; sn.params().len()];
        b.accumulate_grads(&g, &mut acc);
        let mut nonzero = 0usize;
        for (i, grad) in acc.iter().enumerate() {
            let name = &sn.names()[i];
            let shape = sn.params()[i].shape();
            let mut inside = vec![false; sn.params()[i].numel()];
            for s in view.slices.iter().filter(|s| &s.name == name) {
                crate::numerics::for_each_index(shape, |idx| {
                    if idx.iter().zip(&s.bounds).all(|(&j, &(a, e))| j >= a && j < e) {
                        let flat = idx.iter().zip(crate::numerics::strides(shape)).map(|(j, st)| j * st).sum::<usize>();
                        inside[flat] = true;
                    }
                });
            }
            if let Some(gd) = grad {
                for (j, v) in gd.iter().enumerate() {
                    if !inside[j] {
                        assert_eq!(*v, 0.0, "{name}[{j}] outside the slice has gradient");
                    } else if *v != 0.0 {
                        nonzero += 1;
                    }
                }
            }
        }
        assert!(nonzero > 0);
    }
}

fn meet(a: &CellConfig, b: &CellConfig) -> CellConfig {
    let mut out = a.clone();
    for (id, l) in out.layers.iter_mut() {
        let o = &b.layers[id];
        l.embed_dim = l.embed_dim.min(o.embed_dim);
        let depth = l.depth().min(o.depth());
        l.blocks.truncate(depth);
        for (x, y) in l.blocks.iter_mut().zip(&o.blocks) {
            x.mlp_ratio = x.mlp_ratio.min(y.mlp_ratio);
        }
    }
    out
}

#[test]
fn containment_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let sn = desk(ScaleMode::Single, 0);
    for _ in 0..20 {
        let graph = random_graph(&mut rng, ScaleMode::Single, 4);
        let a = sample_cell_config(&sn.space, &graph.layers(), SampleMode::Uniform, &mut rng);
        let b = sample_cell_config(&sn.space, &graph.layers(), SampleMode::Uniform, &mut rng);
        let c = meet(&a, &b);
        assert!(c.is_within(&a) && c.is_within(&b));
        let (va, vc) = (sn.slice(&a, &graph).unwrap(), sn.slice(&c, &graph).unwrap());
        for s in &vc.slices {
            assert!(va.slices.iter().any(|t| s.within(t)), "{} {:?} not covered", s.name, s.bounds);
        }
    }
}

#[test]
fn equal_level_one_cells_share_slices() {
    let sn = desk(ScaleMode::Single, 0);
    let graph = union_skeletons(&[Skeleton::Single(LayerId::new(1, 2).unwrap())]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut a = sample_cell_config(&sn.space, &graph.layers(), SampleMode::Min, &mut rng);
    let mut b = sample_cell_config(&sn.space, &graph.layers(), SampleMode::Max, &mut rng);
    let l1 = a.layers[&LayerId::encoder(1)].clone();
    b.layers.insert(LayerId::encoder(1), l1.clone());
    a.layers.get_mut(&LayerId::encoder(1)).unwrap().blocks[0] = BlockConfig { num_heads: 4, ..l1.blocks[0] };
    let pick = |v: &SubnetView| -> Vec<WeightSlice> {
        v.slices.iter().filter(|s| s.name.starts_with("b1.")).cloned().collect()
    };
    let (va, vb) = (sn.slice(&a, &graph).unwrap(), sn.slice(&b, &graph).unwrap());
    assert_eq!(pick(&va), pick(&vb));
    assert!(!pick(&va).is_empty());
}

#[test]
fn slicing_rejects_configs_outside_the_space() {
    let sn = desk(ScaleMode::Single, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cfg = sample_cell_config(&sn.space, &sn.layers(), SampleMode::Min, &mut rng);
    cfg.layers.get_mut(&LayerId::encoder(2)).unwrap().blocks[0].window = 3;
    assert!(matches!(sn.slice(&cfg, &sn.graph), Err(Error::Config(_))));
}

#[test]
fn sandwich_order_and_variety() {
    let sn = desk(ScaleMode::Single, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let max = sample_cell_config(&sn.space, &sn.layers(), SampleMode::Max, &mut rng);
    let min = sample_cell_config(&sn.space, &sn.layers(), SampleMode::Min, &mut rng);
    let mut distinct = std::collections::BTreeSet::new();
    for _ in 0..1000 {
        let s = sn.sandwich_sample(&mut rng);
        assert_eq!(s[0], max);
        assert_eq!(s[1], min);
        sn.space.check(&s[2]).unwrap();
        sn.space.check(&s[3]).unwrap();
        distinct.insert(s[2].key());
        distinct.insert(s[3].key());
    }
    assert!(distinct.len() > 1900);
    let a = sn.sandwich_sample(&mut ChaCha8Rng::seed_from_u64(1));
    let b = sn.sandwich_sample(&mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut sn = desk(ScaleMode::Single, 11);
    sn.step = 42;
    for (i, v) in sn.skeleton_dist.logits.data_mut().iter_mut().enumerate() {
        *v = (i as f64).sin() * 1e-3 + 1.0 / 3.0;
    }
    sn.skeleton_dist.tau = 0.37;
    let p = dir.path().join("a.ckpt");
    save_checkpoint(&sn, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back.params(), sn.params());
    assert_eq!(back.skeleton_dist, sn.skeleton_dist);
    assert_eq!(back.step, 42);
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(&back, &p2).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let sn = desk(ScaleMode::Multi, 0);
    let bytes = sn.to_bytes();
    assert!(Supernet::from_bytes(&bytes).is_ok());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Supernet::from_bytes(&bad), Err(Error::Persistence(_))));
    assert!(matches!(Supernet::from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Persistence(_))));
    let text = String::from_utf8_lossy(&bytes[16..200]).to_string();
    assert!(text.contains("\"version\":1"));
    let mut wrong = bytes.clone();
    let pos = bytes.windows(11).position(|w| w == b"\"version\":1").unwrap();
    wrong[pos + 10] = b'7';
    assert!(matches!(Supernet::from_bytes(&wrong), Err(Error::Persistence(_))));
    assert!(matches!(load_checkpoint(Path::new("/nonexistent/x.ckpt")), Err(Error::Persistence(_))));
}
