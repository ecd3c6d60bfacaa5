use std::process::Command;

use treereg::config::RunConfig;
use treereg::datasets::{gen_five_rectangles, Dataset, Split};
use treereg::experiment::*;
use treereg::nn::{Mlp, OutputHead, ParamVector};
use treereg::regions::RegionSpec;
use treereg::regularizer::{Regularizer, RegularizerKind};
use treereg::tree::{fit_pruned, train_tree, TreeConfig};
use treereg::Matrix;

fn small_task() -> Task {
    let cfg = RunConfig::resolve(
        None,
        &[("dataset", r#"{"kind":"five_rectangles","n_train":120,"n_test":400,"n_val":80}"#)],
    )
    .unwrap();
    cfg.build_task().unwrap()
}

fn quick(kind: RegularizerKind, strength: f64) -> TrainConfig {
    let mut cfg = TrainConfig::new(Regularizer::new(kind, strength));
    cfg.model.hidden = vec![6];
    cfg.model.epochs = 30;
    cfg.model.learning_rate = 0.01;
    cfg.schedule.retrain_period = 10;
    cfg.schedule.n_synthetic = 20;
    cfg.schedule.surrogate.epochs = 5;
    cfg.schedule.surrogate.hidden = vec![4];
    cfg
}

#[test]
fn zero_strength_matches_unregularized() {
    let task = small_task();
    let base = train_target(&quick(RegularizerKind::None, 0.0), &task).unwrap();
    for kind in RegularizerKind::ALL {
        let out = train_target(&quick(kind, 0.0), &task).unwrap();
        assert_eq!(out.model, base.model, "{}", kind.name());
        assert_eq!(out.history, base.history, "{}", kind.name());
    }
}

#[test]
fn training_is_deterministic() {
    let task = small_task();
    let cfg = quick(RegularizerKind::RegionalLsp, 0.1);
    let a = train_target(&cfg, &task).unwrap();
    let b = train_target(&cfg, &task).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
    assert!(a.surrogates.is_some());
    assert_eq!(a.history.surrogate_fits.len(), 3 * 5);
    // surrogate estimates appear only after the first refit
    assert!(a.history.epochs[8].surrogate_apls.is_none());
    assert!(a.history.epochs[9].surrogate_apls.is_some());
}

#[test]
fn regularized_kinds_train_without_error() {
    let task = small_task();
    for kind in [RegularizerKind::L2, RegularizerKind::GlobalTree, RegularizerKind::RegionalL1, RegularizerKind::RegionalL0] {
        let out = train_target(&quick(kind, 0.5), &task).unwrap();
        assert_eq!(out.history.epochs.len(), 30);
        let expected_surrogates = if kind == RegularizerKind::GlobalTree { 1 } else { 5 };
        if kind.is_tree() {
            assert_eq!(out.surrogates.unwrap().n_regions(), expected_surrogates);
        }
    }
}

/// h = relu(x0); output sigmoid(100 h - 1): positive exactly when x0 > 0.01.
fn step_model() -> Mlp {
    Mlp::zeros(&[1, 1, 1], OutputHead::Sigmoid)
        .unwrap()
        .with_params(ParamVector::new(vec![1.0, 0.0, 100.0, -1.0]))
        .unwrap()
}

fn separable(split: Split) -> Dataset {
    let xs: Vec<f64> = (1..=20).flat_map(|i| [i as f64 / 20.0, -(i as f64) / 20.0]).collect();
    let ys: Vec<f64> = xs.iter().map(|&v| f64::from(v > 0.0)).collect();
    Dataset::new(Matrix::from_vec(40, 1, xs).unwrap(), Matrix::from_vec(40, 1, ys).unwrap(), split).unwrap()
}

fn separable_task() -> Task {
    Task {
        train: separable(Split::Train),
        validation: separable(Split::Validation),
        test: separable(Split::Test),
        regions: RegionSpec::single(1),
    }
}

#[test]
fn perfect_model_scores_one() {
    let m = evaluate(&step_model(), &separable_task(), &TreeConfig::new(0)).unwrap();
    assert_eq!(m.f1, 1.0);
    assert_eq!(m.auc, 1.0);
    assert_eq!(m.accuracy, 1.0);
    assert_eq!(m.fidelity, Some(1.0));
}

#[test]
fn constant_model_has_zero_apl_and_full_fidelity() {
    let task = separable_task();
    let constant = Mlp::zeros(&[1, 3, 1], OutputHead::Sigmoid).unwrap();
    let m = evaluate(&constant, &task, &TreeConfig::new(0)).unwrap();
    assert_eq!(m.eval_apl, 0.0);
    assert_eq!(m.fidelity, Some(1.0));
}

#[test]
fn opposite_constants_have_zero_fidelity() {
    let task = separable_task();
    // zero net outputs 0.5, which thresholds to 0; the bias below pushes it to 1
    let zero = Mlp::zeros(&[1, 2, 1], OutputHead::Sigmoid).unwrap();
    let mut p = zero.params().clone();
    let last = p.len() - 1;
    p[last] = 5.0;
    let one = zero.with_params(p).unwrap();
    let trees = distill(&zero, &task.train.x, &task.regions, &TreeConfig::new(0)).unwrap();
    assert_eq!(fidelity(&one, &trees, &task.test.x, &task.regions).unwrap(), 0.0);
}

#[test]
fn fidelity_needs_a_tree_per_region() {
    let task = separable_task();
    let trees = RegionalTrees { trees: vec![None] };
    assert!(fidelity(&step_model(), &trees, &task.test.x, &task.regions).is_err());
}

#[test]
fn distilled_trees_roundtrip_through_json() {
    let task = small_task();
    let out = train_target(&quick(RegularizerKind::None, 0.0), &task).unwrap();
    let trees = distill(&out.model, &task.train.x, &task.regions, &TreeConfig::new(0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    trees.export(dir.path()).unwrap();
    let back = RegionalTrees::import(dir.path(), task.regions.n_regions()).unwrap();
    assert_eq!(back, trees);
    for row in task.test.x.iter_rows() {
        assert_eq!(back.predict(&task.regions, row, 0).unwrap(), trees.predict(&task.regions, row, 0).unwrap());
    }
}

#[test]
fn single_region_distillation_is_global() {
    let task = small_task();
    let out = train_target(&quick(RegularizerKind::None, 0.0), &task).unwrap();
    let cfg = TreeConfig::new(0);
    let global = RegionSpec::single(2);
    let trees = distill(&out.model, &task.train.x, &global, &cfg).unwrap();
    assert_eq!(trees.n_regions(), 1);
    let labels: Vec<u8> = task.train.x.iter_rows().map(|r| u8::from(out.model.forward(r).unwrap()[0] > 0.5)).collect();
    let direct = fit_pruned(&task.train.x, &labels, &cfg).unwrap();
    assert_eq!(trees.trees[0].as_ref().unwrap()[0], direct);
}

#[test]
fn regional_tree_baseline_apl_is_its_own_depth() {
    let task = small_task();
    let cfg = TreeConfig::new(0);
    let trees = fit_baseline(Baseline::RegionalDecisionTree, &task, &cfg).unwrap();
    let m = evaluate_trees(&trees, &task).unwrap();
    let (depth, _) = trees.mean_regional_depth(&task.regions, &task.test.x).unwrap();
    assert_eq!(m.eval_apl, depth);
    assert!(m.accuracy > 0.6);
}

#[test]
fn sweep_rows_and_order() {
    let task = small_task();
    let mut base = quick(RegularizerKind::None, 0.0);
    base.model.epochs = 12;
    let grid = SweepGrid {
        kinds: vec![RegularizerKind::L2, RegularizerKind::RegionalLsp],
        strengths: vec![0.01, 0.1],
        seeds: vec![0, 1, 2],
        include_baselines: true,
    };
    let res = sweep(&base, &grid, &task).unwrap();
    assert_eq!(res.rows.len(), 2 * 2 * 3 + 2 * 3);
    let keys: Vec<(String, f64, u64)> = res.rows.iter().map(|r| (r.kind.clone(), r.strength, r.seed)).collect();
    assert_eq!(keys[0], ("l2".to_string(), 0.01, 0));
    assert_eq!(keys[5], ("l2".to_string(), 0.1, 2));
    assert_eq!(keys[6], ("regional_lsp".to_string(), 0.01, 0));
    assert_eq!(keys[12].0, "decision_tree");
    assert_eq!(keys[15].0, "regional_decision_tree");
    for r in &res.rows {
        assert!(r.error.is_none());
        assert!(r.eval_apl >= 0.0);
        for m in [r.accuracy, r.f1, r.auc] {
            assert!((0.0..=1.0).contains(&m));
        }
    }
    // reproducible given (kind, strength, seed)
    let again = run_cell(&base, &task, RegularizerKind::RegionalLsp, 0.1, 1).unwrap();
    let orig = res.rows.iter().find(|r| r.kind == "regional_lsp" && r.strength == 0.1 && r.seed == 1).unwrap();
    assert_eq!((again.accuracy, again.eval_apl, again.fidelity), (orig.accuracy, orig.eval_apl, orig.fidelity));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    res.write_csv(&path).unwrap();
    assert_eq!(SweepResult::read_csv(&path).unwrap().rows.len(), res.rows.len());
    let curves = res.tradeoff_curves();
    assert_eq!(curves.len(), 2 * 2 + 2);
    assert!(res.select("regional_lsp", f64::INFINITY).is_some());
    assert!(res.select("regional_lsp", -1.0).is_none());
}

#[test]
fn failed_cells_are_recorded() {
    let task = small_task();
    let mut base = quick(RegularizerKind::None, 0.0);
    base.model.epochs = 3;
    base.model.learning_rate = f64::NAN;
    let grid = SweepGrid {
        kinds: vec![RegularizerKind::L2],
        strengths: vec![0.1],
        seeds: vec![0],
        include_baselines: false,
    };
    let res = sweep(&base, &grid, &task).unwrap();
    assert_eq!(res.rows.len(), 1);
    assert!(res.rows[0].error.is_some());
}

#[test]
fn convergence_epoch_detection() {
    let mut h = History::default();
    let vals = [0.5, 0.6, 0.7, 0.7, 0.7, 0.7];
    for (i, &v) in vals.iter().enumerate() {
        h.epochs.push(EpochRecord {
            epoch: i + 1,
            loss: 0.0,
            penalty: 0.0,
            train_accuracy: v,
            val_accuracy: v,
            val_apl: 1.0,
            true_apls: vec![],
            surrogate_apls: None,
        });
    }
    assert_eq!(h.epochs_to_converge(3, 1e-3), 3);
    assert_eq!(h.epochs_to_converge(4, 1e-3), 6);
}

#[test]
fn noiseless_toy_is_fit_by_a_shallow_tree() {
    let data = gen_five_rectangles(2000, 2000, 0.0, 4).unwrap();
    let cfg = TreeConfig {
        min_samples_leaf: 1,
        max_depth: Some(9),
        ..TreeConfig::new(0)
    };
    let tree = train_tree(&data.train.x, &data.train.labels(0), &cfg).unwrap();
    assert!(tree.accuracy(&data.train.x, &data.train.labels(0)).unwrap() == 1.0);
    // the generator is axis-aligned, so dense training data pins every boundary closely
    assert!(tree.accuracy(&data.test.x, &data.test.labels(0)).unwrap() > 0.99);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_treereg"))
}

const TINY: [&str; 6] = [
    "--dataset",
    r#"{"kind":"five_rectangles","n_train":60,"n_test":200,"n_val":40}"#,
    "--model",
    r#"{"hidden":[4],"epochs":5}"#,
    "--surrogate",
    r#"{"retrain_period":2,"n_synthetic":4,"surrogate":{"hidden":[3],"epochs":2}}"#,
];

#[test]
fn cli_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let run = |args: &[&str]| {
        let o = cli().args(args).args(TINY).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    let d = out.join("data");
    run(&["gen-data", "--out", d.to_str().unwrap()]);
    for f in ["train.csv", "validation.csv", "test.csv", "regions.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let header = std::fs::read_to_string(d.join("train.csv")).unwrap();
    assert!(header.lines().next().unwrap().ends_with("region"));

    let t = out.join("train");
    let o = run(&[
        "train",
        "--out",
        t.to_str().unwrap(),
        "--regularizer",
        r#"{"kind":"regional_lsp","strength":0.1}"#,
    ]);
    let metrics: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(metrics["accuracy"].as_f64().is_some());
    for f in ["checkpoint.json", "history.csv", "metrics.json", "trees/region_0.json"] {
        assert!(t.join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(t.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 6);

    let ckpt = t.join("checkpoint.json");
    let e = out.join("eval");
    let o = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", e.to_str().unwrap()]);
    let again: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(again, metrics);

    let ds = out.join("distill");
    run(&["distill", "--checkpoint", ckpt.to_str().unwrap(), "--out", ds.to_str().unwrap()]);
    assert_eq!(
        std::fs::read_to_string(ds.join("trees/region_2.json")).unwrap(),
        std::fs::read_to_string(t.join("trees/region_2.json")).unwrap()
    );

    let s = out.join("sweep");
    run(&[
        "sweep",
        "--out",
        s.to_str().unwrap(),
        "--sweep",
        r#"{"kinds":["l2"],"strengths":[0.1],"seeds":[0,1,2]}"#,
    ]);
    let results = std::fs::read_to_string(s.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 3 + 6);
    assert!(s.join("tradeoff.csv").exists());
}

#[test]
fn cli_config_file_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"regularizer":{"kind":"l2","strength":0.01},"model":{"hidden":[4],"epochs":3}}"#).unwrap();
    let o = cli()
        .args(["train", "--config", cfg.to_str().unwrap(), "--out"])
        .arg(dir.path().join("o"))
        .args(["--dataset", r#"{"n_train":50,"n_test":50,"n_val":20}"#])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = cli()
        .args(["train", "--regularizer", r#"{"kind":"nope","strength":1}"#, "--out"])
        .arg(dir.path().join("bad"))
        .output()
        .unwrap();
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"]["kind"], "config");

    std::fs::write(&cfg, r#"{"bogus":{}}"#).unwrap();
    let o = cli().args(["train", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert!(!o.status.success());
}
