use std::fs;
use std::path::Path;
use std::process::Command;

use mtnas::orchestrator::*;
use mtnas::search_space::{union_skeletons, CellConfig, Skeleton};
use mtnas::supernet::load_checkpoint;

fn toml_for(out: &Path, preset: &str) -> String {
    format!(
        r#"
version = 1
mode = "single"
preset = "{preset}"
seed = 3
tasks = ["edge", "count"]
output_dir = "{}"

[data]
scenes = 40
side = 32

[train]
epochs = 1
batch_size = 4
lr = 1e-3
lr_min = 1e-5
weight_decay = 0.05
warmup_epochs = 0
arch_lr = 0.05
tau0 = 5.0
tau_min = 0.1

[search]
population = 4
generations = 2
parents = 2
p_mut_layer = 0.4
p_mut_block = 0.2
budgets = [80000, 200000]
random_baseline = true
eval_batch = 4
"#,
        out.display()
    )
}

fn small(out: &Path) -> RunConfig {
    RunConfig::from_toml(&toml_for(out, "desk")).unwrap()
}

fn mtnas(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mtnas")).args(args).output().unwrap()
}

#[test]
fn shipped_config_is_valid() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml");
    let cfg = RunConfig::load(Path::new(path)).unwrap();
    assert_eq!(cfg.tasks.len(), 4);
}

#[test]
fn unknown_keys_and_bad_values_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let good = toml_for(dir.path(), "desk");
    let extra = good.replace("[data]", "colour = 1\n[data]");
    assert!(matches!(RunConfig::from_toml(&extra), Err(mtnas::error::Error::Config(_))));
    let cases = [
        good.replace("version = 1", "version = 2"),
        good.replace("mode = \"single\"", "mode = \"both\""),
        good.replace("\"edge\", \"count\"", "\"edge\", \"edge\""),
        good.replace("side = 32", "side = 40"),
        good.replace("budgets = [80000, 200000]", "budgets = []"),
        good.replace("parents = 2", "parents = 9"),
        good.replace("preset = \"desk\"", "preset = \"paper-base\""),
    ];
    for c in cases {
        assert!(RunConfig::from_toml(&c).is_err(), "{c}");
    }
}

#[test]
fn hash_tracks_content() {
    let dir = tempfile::tempdir().unwrap();
    let a = small(dir.path());
    let mut b = a.clone();
    assert_eq!(a.hash(), b.hash());
    b.seed += 1;
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn invalid_preset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, toml_for(dir.path(), "enormous")).unwrap();
    let out = mtnas(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("enormous"));
}

#[test]
fn missing_checkpoint_exits_2_and_incomplete_report_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, toml_for(&dir.path().join("run"), "desk")).unwrap();
    let c = cfg.to_str().unwrap();
    assert_eq!(mtnas(&["search", "--config", c]).status.code(), Some(2));
    assert_eq!(mtnas(&["report", "--config", c]).status.code(), Some(3));
    assert_eq!(mtnas(&["train", "--config", "/nonexistent.toml"]).status.code(), Some(2));
}

#[test]
fn output_root_variable_prefixes_relative_dirs() {
    let root = tempfile::tempdir().unwrap();
    let cfg_path = root.path().join("rel.toml");
    let text = toml_for(Path::new("x"), "desk").replace("output_dir = \"x\"", "output_dir = \"runs/rel\"");
    fs::write(&cfg_path, text).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mtnas"))
        .args(["report", "--config", cfg_path.to_str().unwrap()])
        .env(OUTPUT_ROOT_ENV, root.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains(&root.path().join("runs/rel").display().to_string()), "{msg}");
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_end_to_end() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let cfg = small(d);
        cmd_train(&cfg, false).unwrap();
        cmd_train(&cfg, true).unwrap();
        cmd_search(&cfg, &[]).unwrap();
        cmd_report(&cfg).unwrap();
    }
    // byte-identical apart from the directory name, which is not written anywhere
    assert_eq!(read_tree(a.path()), read_tree(b.path()));

    let cfg = small(a.path());
    let dir = a.path();
    let hash = cfg.hash();
    for (name, bytes) in read_tree(dir) {
        if name.ends_with(".csv") {
            assert!(bytes.starts_with(format!("# config_hash: {hash}\n").as_bytes()), "{name}");
        }
    }

    // graph file lists exactly the union of the chosen skeletons
    let stage1: serde_json::Value = serde_json::from_slice(&fs::read(dir.join(STAGE1_FILE)).unwrap()).unwrap();
    let skeletons: Vec<Skeleton> = stage1["skeletons"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| Skeleton::from_json(&s.to_string()).unwrap())
        .collect();
    let graph = union_skeletons(&skeletons).unwrap();
    let listed: Vec<String> =
        stage1["components"].as_array().unwrap().iter().map(|c| c.as_str().unwrap().to_string()).collect();
    assert_eq!(listed, graph.component_ids());

    // each emitted subnet fits its budget by brute-force weight count
    let sn = load_checkpoint(&dir.join(CHECKPOINT)).unwrap();
    let summary: SearchSummary = serde_json::from_slice(&fs::read(dir.join(SEARCH_SUMMARY)).unwrap()).unwrap();
    assert_eq!(summary.budgets.len(), 2);
    let mut candidates = 0;
    for rec in &summary.budgets {
        let methods: Vec<_> = rec.subnets.iter().map(|s| s.method.as_str()).collect();
        assert_eq!(methods, ["evolve", "random"]);
        assert_eq!(rec.subnets[0].evaluations, rec.subnets[1].evaluations);
        for s in &rec.subnets {
            let cfg = CellConfig::from_json(&fs::read_to_string(dir.join(&s.config_file)).unwrap()).unwrap();
            let n = sn.extract(&sn.slice(&cfg, &graph).unwrap()).unwrap().num_params();
            assert_eq!(n, s.params);
            assert!(n <= rec.budget, "{n} > {}", rec.budget);
        }
        let csv = fs::read_to_string(dir.join(format!("budget_{}/candidates.csv", rec.budget))).unwrap();
        candidates += csv.lines().count() - 2;
    }

    let report = dir.join(REPORT_DIR);
    let scatter = fs::read_to_string(report.join("scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count() - 2, candidates);
    let dt = fs::read_to_string(report.join("delta_t.csv")).unwrap();
    assert!(dt.lines().nth(2).unwrap().ends_with(",single_task_baseline,-,-,0.000000"), "{dt}");
    let text = fs::read_to_string(report.join("summary.txt")).unwrap();
    for rec in &summary.budgets {
        assert!(text.contains(&format!("params {:>9}", rec.subnets[0].params)), "{text}");
    }
}

#[test]
fn budget_flag_overrides_and_infeasible_budget_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    cmd_train(&cfg, false).unwrap();
    cmd_search(&cfg, &[90000]).unwrap();
    let summary: SearchSummary =
        serde_json::from_slice(&fs::read(dir.path().join(SEARCH_SUMMARY)).unwrap()).unwrap();
    assert_eq!(summary.budgets.iter().map(|b| b.budget).collect::<Vec<_>>(), [90000]);
    let err = cmd_search(&cfg, &[10]).unwrap_err();
    assert_eq!(err.code, 2);
}

#[test]
fn history_reproducible_and_seed_sensitive() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg_a = small(a.path());
    cfg_a.data.scenes = 7;
    let mut cfg_b = cfg_a.clone();
    cfg_b.output_dir = b.path().display().to_string();
    cmd_train(&cfg_a, false).unwrap();
    cmd_train(&cfg_b, false).unwrap();
    let ha = fs::read(a.path().join(TRAIN_HISTORY)).unwrap();
    assert_eq!(ha, fs::read(b.path().join(TRAIN_HISTORY)).unwrap());
    cfg_b.seed = 4;
    cmd_train(&cfg_b, false).unwrap();
    assert_ne!(ha, fs::read(b.path().join(TRAIN_HISTORY)).unwrap());
}

#[test]
fn dataset_dump_matches_generated_splits() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.data.scenes = 7;
    cfg.data.dump = true;
    cmd_train(&cfg, false).unwrap();
    let data = cfg.dataset().unwrap();
    let (train, val, test) = mtnas::tasks::split(&data);
    for (name, want) in [("train", train), ("val", val), ("test", test)] {
        let got = mtnas::tasks::load_scenes(&dir.path().join(DATA_DIR).join(format!("{name}.bin"))).unwrap();
        assert_eq!(got, want, "{name}");
    }
}
