//! End-to-end acceptance checks. Each test writes one PASS/FAIL line to stderr
//! (bypassing output capture) before asserting.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treereg::config::RunConfig;
use treereg::experiment::{evaluate, train_target, Metrics, Task, TrainConfig};
use treereg::metrics::f1_score;
use treereg::nn::{Mlp, OutputHead, ParamVector};
use treereg::regions::RegionSpec;
use treereg::regularizer::{
    penalty, penalty_grad, sparsemax, true_regional_apls, ParamBuffer, RegionalInputs, Regularizer, RegularizerKind,
    SurrogateConfig, SurrogateSet,
};
use treereg::tree::{prune_tree, train_tree, TreeConfig};
use treereg::Matrix;

const SEEDS: [u64; 3] = [0, 1, 2];

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance {n} [{verdict}] {name}: {detail}");
}

/// Settings shared by all toy runs.
fn toy_config() -> TrainConfig {
    let mut cfg = TrainConfig::new(Regularizer::new(RegularizerKind::None, 0.0));
    cfg.model.hidden = vec![16, 16];
    cfg.model.learning_rate = 0.01;
    cfg.model.epochs = 500;
    cfg.model.batch_size = 32;
    cfg.tree = TreeConfig {
        min_samples_leaf: 1,
        val_fraction: 0.0,
        ..TreeConfig::new(0)
    };
    cfg
}

fn task_for(dataset: &str) -> Task {
    RunConfig::resolve(None, &[("dataset", dataset)]).unwrap().build_task().unwrap()
}

fn five_rectangles() -> &'static Task {
    static TASK: OnceLock<Task> = OnceLock::new();
    TASK.get_or_init(|| task_for(r#"{"kind":"five_rectangles","n_train":250,"n_test":5000,"n_val":250}"#))
}

fn two_region() -> &'static Task {
    static TASK: OnceLock<Task> = OnceLock::new();
    TASK.get_or_init(|| task_for(r#"{"kind":"two_region","n_train":250,"n_test":5000,"n_val":250}"#))
}

struct Run {
    metrics: Metrics,
    val_f1: f64,
    epochs_to_converge: usize,
    buffer: ParamBuffer,
    model: Mlp,
}

type Key = (&'static str, RegularizerKind, u64, u64);

/// Runs are shared across tests; each (task, kind, strength, seed) trains once.
fn run(task_name: &'static str, kind: RegularizerKind, strength: f64, seed: u64) -> Arc<Run> {
    static CACHE: OnceLock<Mutex<HashMap<Key, Arc<OnceLock<Arc<Run>>>>>> = OnceLock::new();
    let cell = {
        let mut map = CACHE.get_or_init(Default::default).lock().unwrap();
        map.entry((task_name, kind, strength.to_bits(), seed)).or_default().clone()
    };
    cell.get_or_init(|| {
        let task = match task_name {
            "five_rectangles" => five_rectangles(),
            _ => two_region(),
        };
        let mut cfg = toy_config();
        cfg.regularizer = Regularizer::new(kind, strength);
        cfg.seed = seed;
        let out = train_target(&cfg, task).unwrap();
        let metrics = evaluate(&out.model, task, &cfg.tree).unwrap();
        let scores: Vec<f64> = task.validation.x.iter_rows().map(|r| out.model.forward(r).unwrap()[0]).collect();
        Arc::new(Run {
            metrics,
            val_f1: f1_score(&scores, &task.validation.labels(0)).unwrap(),
            epochs_to_converge: out.history.epochs_to_converge(cfg.convergence_window, cfg.convergence_tol),
            buffer: out.buffer,
            model: out.model,
        })
    })
    .clone()
}

fn toy_runs(kind: RegularizerKind, strength: f64) -> Vec<Arc<Run>> {
    SEEDS.iter().map(|&s| run("five_rectangles", kind, strength, s)).collect()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_1_sparsemax_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scale = (1u64 << 20) as f64;
    let (mut worst, mut worst_sum) = (0.0f64, 0.0f64);
    let (mut negative, mut shift_mismatch) = (0, 0);
    for _ in 0..1000 {
        let r = rng.random_range(1..=6);
        // dyadic entries so that shifting is exact in floating point
        let z: Vec<f64> = (0..r).map(|_| rng.random_range(-5 * (1 << 20)..=5 * (1 << 20)) as f64 / scale).collect();
        let p = sparsemax(&z).unwrap();
        let q = simplex_projection_oracle(&z);
        worst = p.iter().zip(&q).fold(worst, |w, (a, b)| w.max((a - b).abs()));
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        negative += p.iter().filter(|&&v| v < 0.0).count();
        let c = rng.random_range(-(10 << 10)..=(10 << 10)) as f64 / (1 << 10) as f64;
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        if sparsemax(&shifted).unwrap() != p {
            shift_mismatch += 1;
        }
    }
    let pass = worst < 1e-9 && worst_sum < 1e-9 && negative == 0 && shift_mismatch == 0;
    report(
        1,
        "sparsemax correctness",
        pass,
        &format!("max |p - oracle| = {worst:.2e}, max |sum - 1| = {worst_sum:.2e}, negatives = {negative}, shift mismatches = {shift_mismatch}"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_param, mut worst_input) = (0.0f64, 0.0f64);
    for trial in 0..50 {
        let head = if trial % 2 == 0 { OutputHead::Sigmoid } else { OutputHead::Identity };
        let model = random_model(&mut rng, head);
        let n = rng.random_range(1..=6);
        let x = random_batch(&mut rng, n, model.input_dim(), false);
        let y = random_batch(&mut rng, n, model.output_dim(), head == OutputHead::Sigmoid);
        worst_param = worst_param.max(param_gradient_error(&model, &x, &y));

        let mut sizes = model.layer_sizes().to_vec();
        *sizes.last_mut().unwrap() = 1;
        let scalar = random_model_with(&mut rng, &sizes, head);
        let xi: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        worst_input = worst_input.max(input_gradient_error(&scalar, &xi));
    }
    let mut worst_penalty = 0.0f64;
    for kind in [RegularizerKind::RegionalL0, RegularizerKind::RegionalLsp] {
        for trial in 0..10 {
            let set = positive_surrogates(12, 5, 50 * trial);
            let theta = ParamVector::new((0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
            worst_penalty = worst_penalty.max(penalty_gradient_error(kind, &set, &theta));
        }
    }
    let pass = worst_param < FD_REL_TOL && worst_input < FD_REL_TOL && worst_penalty < FD_REL_TOL;
    report(
        2,
        "gradient checks",
        pass,
        &format!("worst relative error: params {worst_param:.2e}, inputs {worst_input:.2e}, L0/LSP penalty {worst_penalty:.2e}"),
    );
    assert!(pass);
}

fn random_model_with(rng: &mut ChaCha8Rng, sizes: &[usize], head: OutputHead) -> Mlp {
    let model = Mlp::new(sizes, head, rng.random()).unwrap();
    let params = (0..model.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    model.with_params(ParamVector::new(params)).unwrap()
}

#[test]
fn criterion_3_deterministic_cart_and_pruning() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..300).map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let y: Vec<u8> = rows
        .iter()
        .map(|r| u8::from((r[0] + 0.5 * r[1] > 0.7) ^ rng.random_bool(0.1)))
        .collect();
    let mut identical = true;
    for cfg in [
        TreeConfig::new(7),
        TreeConfig { max_features: Some(0.5), ..TreeConfig::new(7) },
    ] {
        let reference = train_tree(&x, &y, &cfg).unwrap();
        for _ in 0..100 {
            identical &= train_tree(&x, &y, &cfg).unwrap() == reference;
        }
    }
    let mut prune_ok = true;
    for trial in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + trial);
        let n = 200;
        let fit: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| r.random_range(0.0..1.0)).collect()).collect();
        let label = |v: &[f64], r: &mut ChaCha8Rng| u8::from((v[0] > 0.4 && v[2] < 0.6) ^ r.random_bool(0.15));
        let yf: Vec<u8> = fit.iter().map(|v| label(v, &mut r)).collect();
        let val: Vec<Vec<f64>> = (0..80).map(|_| (0..3).map(|_| r.random_range(0.0..1.0)).collect()).collect();
        let yv: Vec<u8> = val.iter().map(|v| label(v, &mut r)).collect();
        let (xf, xv) = (Matrix::from_rows(&fit).unwrap(), Matrix::from_rows(&val).unwrap());
        let tree = train_tree(&xf, &yf, &TreeConfig { min_samples_leaf: 1, ..TreeConfig::new(trial) }).unwrap();
        let pruned = prune_tree(&tree, &xv, &yv).unwrap();
        prune_ok &= pruned.accuracy(&xv, &yv).unwrap() >= tree.accuracy(&xv, &yv).unwrap();
        prune_ok &= pruned.node_count() <= tree.node_count();
    }
    let pass = identical && prune_ok;
    report(
        3,
        "deterministic CART",
        pass,
        &format!("100 refits identical: {identical}; pruning monotone on 20 datasets: {prune_ok}"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_augmentation_lowers_surrogate_error() {
    let task = five_rectangles();
    let source = run("five_rectangles", RegularizerKind::RegionalLsp, 0.1, 0);
    let cfg = toy_config();
    let inputs = RegionalInputs::new(&task.train.x, &task.regions).unwrap();
    let oracle = |theta: &ParamVector| true_regional_apls(&source.model.with_params(theta.clone())?, &inputs, &cfg.tree);
    let dim = source.model.num_params();
    let (mut plain, mut augmented) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let (fit, held) = source.buffer.split_holdout(0.2, seed);
        let scfg = SurrogateConfig { seed, ..SurrogateConfig::default() };
        let mse = |buffer: &ParamBuffer| -> f64 {
            let mut set = SurrogateSet::new(dim, &inputs.active(), scfg.clone()).unwrap();
            let reports = set.train(buffer, &held, 0).unwrap();
            mean(reports.iter().map(|r| r.heldout_mse.unwrap()))
        };
        plain.push(mse(&fit));
        augmented.push(mse(&fit.augment(500, seed, oracle).unwrap()));
    }
    let (p, a) = (mean(plain.iter().copied()), mean(augmented.iter().copied()));
    let pass = a < p;
    report(
        4,
        "augmentation benefit",
        pass,
        &format!("held-out surrogate MSE over 5 seeds: without {p:.4}, with 500 augmented {a:.4}"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_toy_table_orderings() {
    let unreg = toy_runs(RegularizerKind::None, 0.0);
    let lsp = toy_runs(RegularizerKind::RegionalLsp, 0.1);
    let global = toy_runs(RegularizerKind::GlobalTree, 1.0);
    let l0 = toy_runs(RegularizerKind::RegionalL0, 0.1);
    let acc = |runs: &[Arc<Run>]| mean(runs.iter().map(|r| r.metrics.accuracy));
    let apl = |runs: &[Arc<Run>]| mean(runs.iter().map(|r| r.metrics.eval_apl));
    let (ua, up) = (acc(&unreg), apl(&unreg));
    let (la, lp) = (acc(&lsp), apl(&lsp));
    let (ga, gp) = (acc(&global), apl(&global));
    let (za, zp) = (acc(&l0), apl(&l0));
    let a = (0.78..=0.88).contains(&ua) && (14.0..=22.0).contains(&up);
    let b = la >= ua + 0.05 && lp <= 12.0;
    let c = gp < lp && gp < zp && gp < up && ga < la;
    let d = (za - la).abs() <= 0.02;
    let detail = format!(
        "unreg {ua:.4}/{up:.3} (a: {a}); lsp 0.1 {la:.4}/{lp:.3} (b: {b}); global 1.0 {ga:.4}/{gp:.3} (c: {c}); l0 0.1 {za:.4}/{zp:.3} (d: {d})"
    );
    let pass = a && b && c && d;
    report(5, "toy table orderings (accuracy/APL)", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_6_l1_over_regularizes() {
    let strength = 30.0;
    let mut holds = 0;
    let mut detail = Vec::new();
    for &seed in &SEEDS {
        let l1 = run("two_region", RegularizerKind::RegionalL1, strength, seed);
        let lsp = run("two_region", RegularizerKind::RegionalLsp, strength, seed);
        let l1_min = l1.metrics.region_apls.iter().cloned().fold(f64::INFINITY, f64::min);
        let lsp_min = lsp.metrics.region_apls.iter().cloned().fold(f64::INFINITY, f64::min);
        let ok = l1_min == 0.0 && lsp_min >= 1.0;
        holds += usize::from(ok);
        detail.push(format!("seed {seed}: l1 {:?} lsp {:?}", round(&l1.metrics.region_apls), round(&lsp.metrics.region_apls)));
    }
    let pass = holds >= 2;
    report(6, "L1 over-regularization contrast", pass, &format!("{holds}/3 seeds; {}", detail.join("; ")));
    assert!(pass);
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 100.0).round() / 100.0).collect()
}

#[test]
fn criterion_7_l0_converges_slower() {
    let lsp = toy_runs(RegularizerKind::RegionalLsp, 0.1);
    let l0 = toy_runs(RegularizerKind::RegionalL0, 0.1);
    let e_lsp = mean(lsp.iter().map(|r| r.epochs_to_converge as f64));
    let e_l0 = mean(l0.iter().map(|r| r.epochs_to_converge as f64));
    let pass = e_l0 >= 3.0 * e_lsp;
    let per_seed = |runs: &[Arc<Run>]| runs.iter().map(|r| r.epochs_to_converge).collect::<Vec<_>>();
    report(
        7,
        "L0 convergence slower than LSP",
        pass,
        &format!("mean epochs to converge: l0 {e_l0:.1} {:?}, lsp {e_lsp:.1} {:?} (cap {})", per_seed(&l0), per_seed(&lsp), toy_config().model.epochs),
    );
    assert!(pass);
}

#[test]
fn criterion_8_fidelity() {
    let strengths = [0.01, 0.1, 1.0];
    let runs: Vec<Vec<Arc<Run>>> = strengths.iter().map(|&s| toy_runs(RegularizerKind::RegionalLsp, s)).collect();
    // selection: best validation F1 among runs within the APL budget of criterion 5
    let selected = runs
        .iter()
        .flatten()
        .filter(|r| r.metrics.eval_apl <= 12.0)
        .max_by(|a, b| a.val_f1.total_cmp(&b.val_f1));
    let sel_fid = selected.and_then(|r| r.metrics.fidelity).unwrap_or(0.0);
    let mut monotone = 0;
    let mut per_seed = Vec::new();
    for i in 0..SEEDS.len() {
        let f: Vec<f64> = runs.iter().map(|rs| rs[i].metrics.fidelity.unwrap()).collect();
        monotone += usize::from(f[0] <= f[1] && f[1] <= f[2]);
        per_seed.push(round(&f));
    }
    let pass = sel_fid >= 0.8 && monotone >= 2;
    report(
        8,
        "fidelity floor and monotonicity",
        pass,
        &format!("selected run fidelity {sel_fid:.4}; non-decreasing over strengths in {monotone}/3 seeds {per_seed:?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_9_single_region_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut exact = true;
    for _ in 0..200 {
        let v = rng.random_range(0.0..25.0);
        let global = penalty(RegularizerKind::GlobalTree, &[v], 1.0).unwrap();
        for kind in [RegularizerKind::RegionalL1, RegularizerKind::RegionalL0, RegularizerKind::RegionalLsp] {
            exact &= penalty(kind, &[v], 1.0).unwrap() == global;
        }
    }
    // identical single-region inputs through the whole penalty path
    let set = positive_surrogates(7, 1, 4);
    let theta = ParamVector::new((0..7).map(|_| rng.random_range(-1.0..1.0)).collect());
    let global = penalty_grad(&Regularizer::new(RegularizerKind::GlobalTree, 1.0), Some(&set), &theta).unwrap();
    for kind in [RegularizerKind::RegionalL1, RegularizerKind::RegionalL0, RegularizerKind::RegionalLsp] {
        exact &= penalty_grad(&Regularizer::new(kind, 1.0), Some(&set), &theta).unwrap() == global;
    }
    let task = five_rectangles();
    let model = Mlp::new(&[2, 5, 1], OutputHead::Sigmoid, 3).unwrap();
    let cfg = TreeConfig::new(0);
    let single = RegionalInputs::new(&task.train.x, &RegionSpec::single(2)).unwrap();
    let whole = RegionalInputs::global(&task.train.x);
    exact &= true_regional_apls(&model, &single, &cfg).unwrap() == true_regional_apls(&model, &whole, &cfg).unwrap();
    report(9, "single-region reduction identities", exact, "L1, L0 and LSP equal the global penalty value and gradient with R = 1");
    assert!(exact);
}
