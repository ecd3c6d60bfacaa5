//! Joint training of a target network under a tree penalty, evaluation, distillation,
//! tree baselines and the strength sweep.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{accuracy, f1_score, roc_auc};
use crate::nn::{Adam, Mlp, OutputHead, ParamVector};
use crate::regions::{partition, RegionSpec};
use crate::regularizer::{
    model_labels, penalty_grad, true_regional_apls, ParamBuffer, RegionalInputs, Regularizer, RegularizerKind,
    SurrogateConfig, SurrogateSet,
};
use crate::tree::{apl_from_labels, fit_pruned, DecisionTree, TreeConfig};

/// Strengths swept for the headline experiments.
pub const DEFAULT_STRENGTHS: [f64; 14] = [
    0.0001, 0.0005, 0.001, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            learning_rate: 1e-3,
            epochs: 300,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateSchedule {
    /// Target epochs between surrogate refits.
    pub retrain_period: usize,
    /// Dirichlet-mixed parameter vectors added at each refit.
    pub n_synthetic: usize,
    pub buffer_capacity: usize,
    pub surrogate: SurrogateConfig,
}

impl Default for SurrogateSchedule {
    fn default() -> Self {
        Self {
            retrain_period: 25,
            n_synthetic: 500,
            buffer_capacity: 50,
            surrogate: SurrogateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regularizer: Regularizer,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub tree: TreeConfig,
    #[serde(default)]
    pub schedule: SurrogateSchedule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_window")]
    pub convergence_window: usize,
    #[serde(default = "default_tol")]
    pub convergence_tol: f64,
    #[serde(default)]
    pub stop_when_converged: bool,
}

fn default_window() -> usize {
    10
}

fn default_tol() -> f64 {
    1e-3
}

impl TrainConfig {
    pub fn new(regularizer: Regularizer) -> Self {
        Self {
            regularizer,
            model: ModelConfig::default(),
            tree: TreeConfig::default(),
            schedule: SurrogateSchedule::default(),
            seed: 0,
            convergence_window: default_window(),
            convergence_tol: default_tol(),
            stop_when_converged: false,
        }
    }
}

/// Train / validation / test data together with the region cover.
#[derive(Debug, Clone)]
pub struct Task {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub regions: RegionSpec,
}

impl Task {
    pub fn n_features(&self) -> usize {
        self.train.n_features()
    }

    pub fn n_outputs(&self) -> usize {
        self.train.n_outputs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub penalty: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_apl: f64,
    /// True per-region APLs on the training data.
    pub true_apls: Vec<f64>,
    /// Surrogate estimates at the end of the epoch, once surrogates exist.
    pub surrogate_apls: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateDiagnostic {
    pub epoch: usize,
    pub region: usize,
    pub buffer_size: usize,
    pub train_mse: f64,
    pub heldout_mse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub surrogate_fits: Vec<SurrogateDiagnostic>,
}

impl History {
    /// First epoch (1-based) after which validation accuracy and validation APL both
    /// stay within `tol` of their value for `window` consecutive epochs. Falls back to
    /// the number of recorded epochs.
    pub fn epochs_to_converge(&self, window: usize, tol: f64) -> usize {
        let e = &self.epochs;
        for start in 0..e.len() {
            if start + window >= e.len() {
                break;
            }
            let stable = (1..=window).all(|k| {
                (e[start + k].val_accuracy - e[start].val_accuracy).abs() < tol
                    && (e[start + k].val_apl - e[start].val_apl).abs() < tol
            });
            if stable {
                return start + 1;
            }
        }
        e.len()
    }
}

/// Mean per-output label agreement / predictions of a network.
fn network_scores(model: &Mlp, x: &Matrix, q: usize) -> Result<Vec<f64>> {
    x.iter_rows().map(|r| Ok(model.forward(r)?[q])).collect()
}

fn mean_accuracy(model: &Mlp, d: &Dataset) -> Result<f64> {
    let q = d.n_outputs();
    let mut total = 0.0;
    for o in 0..q {
        total += accuracy(&network_scores(model, &d.x, o)?, &d.labels(o))?;
    }
    Ok(total / q as f64)
}

/// Mean over regions of the per-region APL of the model's labels on `inputs`.
pub fn evaluation_apl(model: &Mlp, inputs: &RegionalInputs, tree: &TreeConfig) -> Result<(f64, Vec<f64>)> {
    let per = true_regional_apls(model, inputs, tree)?;
    for (r, m) in inputs.per_region.iter().enumerate() {
        if m.rows() < 2 {
            log::warn!("region {r} has {} evaluation points; APL taken as 0", m.rows());
        }
    }
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

/// Output of [`train_target`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp,
    pub history: History,
    pub surrogates: Option<SurrogateSet>,
    /// Observed (parameters, APL) records at the end of training; empty without surrogates.
    pub buffer: ParamBuffer,
}

/// Minibatch training of `data loss + strength * penalty`.
pub fn train_target(cfg: &TrainConfig, task: &Task) -> Result<TrainOutcome> {
    cfg.regularizer.validate()?;
    cfg.tree.validate()?;
    let reg = cfg.regularizer;
    let train = &task.train;
    if train.is_empty() || task.validation.is_empty() {
        return Err(Error::InvalidInput("training and validation splits must be non-empty".into()));
    }
    let mut sizes = vec![train.n_features()];
    sizes.extend_from_slice(&cfg.model.hidden);
    sizes.push(train.n_outputs());
    let mut model = Mlp::new(&sizes, OutputHead::Sigmoid, cfg.seed)?;
    let mut opt = Adam::new(model.num_params(), cfg.model.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    let train_regions = RegionalInputs::new(&train.x, &task.regions)?;
    let val_regions = RegionalInputs::new(&task.validation.x, &task.regions)?;
    let penalty_inputs = match reg.kind {
        RegularizerKind::GlobalTree => RegionalInputs::global(&train.x),
        _ => train_regions.clone(),
    };
    let uses_surrogates = reg.kind.is_tree() && !reg.is_inactive();
    let schedule = &cfg.schedule;
    let mut buffer = ParamBuffer::new(schedule.buffer_capacity, penalty_inputs.n_regions());
    let mut surrogates: Option<SurrogateSet> = None;
    let surrogate_cfg = SurrogateConfig {
        seed: schedule.surrogate.seed ^ cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d),
        ..schedule.surrogate.clone()
    };

    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let bs = cfg.model.batch_size.max(1);
    let mut round = 0u64;

    for epoch in 0..cfg.model.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut last_penalty = 0.0;
        for chunk in order.chunks(bs) {
            let bx = train.x.select_rows(chunk);
            let by = train.y.select_rows(chunk);
            let batch_loss = model.loss(&bx, &by)?;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    detail: format!("batch loss {batch_loss}, parameter norm {}", model.params().squared_norm().sqrt()),
                });
            }
            loss_sum += batch_loss * chunk.len() as f64;
            let extra = if reg.is_inactive() || (uses_surrogates && surrogates.is_none()) {
                None
            } else {
                let (value, mut g) = penalty_grad(&reg, surrogates.as_ref(), model.params())?;
                last_penalty = value;
                g.iter_mut().for_each(|v| *v *= reg.strength);
                Some(g)
            };
            let grad = model.backward(&bx, &by, extra.as_ref())?;
            opt.step(&mut model, &grad)?;
        }
        let loss = loss_sum / train.len() as f64;
        if !loss.is_finite() || model.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                epoch,
                detail: format!("epoch loss {loss}"),
            });
        }

        let true_apls = true_regional_apls(&model, &train_regions, &cfg.tree)?;
        if uses_surrogates {
            let penalty_apls = match reg.kind {
                RegularizerKind::GlobalTree => true_regional_apls(&model, &penalty_inputs, &cfg.tree)?,
                _ => true_apls.clone(),
            };
            buffer.push(model.params().clone(), penalty_apls)?;
            if (epoch + 1) % schedule.retrain_period.max(1) == 0 {
                let set = match surrogates.take() {
                    Some(s) => s,
                    None => SurrogateSet::new(model.num_params(), &penalty_inputs.active(), surrogate_cfg.clone())?,
                };
                let (set, reports) = refit_surrogates(set, &buffer, &model, &penalty_inputs, cfg, round)?;
                history.surrogate_fits.extend(reports.into_iter().map(|r| SurrogateDiagnostic {
                    epoch: epoch + 1,
                    region: r.region,
                    buffer_size: r.buffer_size,
                    train_mse: r.train_mse,
                    heldout_mse: r.heldout_mse,
                }));
                surrogates = Some(set);
                round += 1;
            }
        }
        let surrogate_apls = match &surrogates {
            Some(s) => Some(s.estimates(model.params())?),
            None => None,
        };
        let (val_apl, _) = evaluation_apl(&model, &val_regions, &cfg.tree)?;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss,
            penalty: last_penalty,
            train_accuracy: mean_accuracy(&model, train)?,
            val_accuracy: mean_accuracy(&model, &task.validation)?,
            val_apl,
            true_apls,
            surrogate_apls,
        });
        if cfg.stop_when_converged {
            let n = history.epochs.len();
            if history.epochs_to_converge(cfg.convergence_window, cfg.convergence_tol) < n {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        surrogates,
        buffer,
    })
}

/// Splits off held-out records, augments the rest and refits every surrogate.
fn refit_surrogates(
    mut set: SurrogateSet,
    buffer: &ParamBuffer,
    model: &Mlp,
    inputs: &RegionalInputs,
    cfg: &TrainConfig,
    round: u64,
) -> Result<(SurrogateSet, Vec<crate::regularizer::FitReport>)> {
    let seed = set.config.seed.wrapping_add(round.wrapping_mul(7919));
    let (fit, held) = buffer.split_holdout(set.config.holdout_fraction, seed);
    let augmented = if cfg.schedule.n_synthetic > 0 {
        fit.augment(cfg.schedule.n_synthetic, seed ^ 0xa5a5, |theta| {
            true_regional_apls(&model.with_params(theta.clone())?, inputs, &cfg.tree)
        })?
    } else {
        fit
    };
    let reports = set.train(&augmented, &held, round)?;
    Ok((set, reports))
}

/// Pruned trees per region (and per output) distilled from a predictor's labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionalTrees {
    /// `trees[r][q]`; `None` for regions without training points.
    pub trees: Vec<Option<Vec<DecisionTree>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegionTreeFile {
    region: usize,
    outputs: Vec<DecisionTree>,
}

impl RegionalTrees {
    pub fn n_regions(&self) -> usize {
        self.trees.len()
    }

    pub fn region_json(&self, r: usize) -> Result<Option<String>> {
        match &self.trees[r] {
            None => Ok(None),
            Some(outputs) => Ok(Some(serde_json::to_string_pretty(&RegionTreeFile {
                region: r,
                outputs: outputs.clone(),
            })?)),
        }
    }

    /// Writes `region_<r>.json` for every region that has trees.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for r in 0..self.n_regions() {
            if let Some(json) = self.region_json(r)? {
                std::fs::write(dir.join(format!("region_{r}.json")), json)?;
            }
        }
        Ok(())
    }

    pub fn import(dir: &Path, n_regions: usize) -> Result<Self> {
        let mut trees = Vec::with_capacity(n_regions);
        for r in 0..n_regions {
            let path = dir.join(format!("region_{r}.json"));
            if path.exists() {
                let f: RegionTreeFile = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                trees.push(Some(f.outputs));
            } else {
                trees.push(None);
            }
        }
        Ok(Self { trees })
    }

    fn region_trees(&self, r: usize) -> Result<&[DecisionTree]> {
        self.trees
            .get(r)
            .and_then(Option::as_deref)
            .ok_or_else(|| Error::Contract(format!("region {r} has no distilled tree")))
    }

    /// Label of output `q` from the region-routed tree.
    pub fn predict(&self, spec: &RegionSpec, x: &[f64], q: usize) -> Result<u8> {
        self.region_trees(spec.assign(x)?)?[q].predict(x)
    }

    /// Mean over regions of the mean path length of each region's own trees on the
    /// region-routed rows of `x`.
    pub fn mean_regional_depth(&self, spec: &RegionSpec, x: &Matrix) -> Result<(f64, Vec<f64>)> {
        let parts = partition(x, spec)?;
        let mut per = Vec::with_capacity(parts.len());
        for (r, idx) in parts.iter().enumerate() {
            if idx.is_empty() {
                per.push(0.0);
                continue;
            }
            let xr = x.select_rows(idx);
            let ts = self.region_trees(r)?;
            let mut total = 0.0;
            for t in ts {
                total += t.mean_depth(&xr)?;
            }
            per.push(total / ts.len() as f64);
        }
        Ok((per.iter().sum::<f64>() / per.len() as f64, per))
    }
}

/// Fits one pruned tree per non-empty region (and output) to the given labels.
pub fn fit_regional_trees(x: &Matrix, labels: &[Vec<u8>], spec: &RegionSpec, cfg: &TreeConfig) -> Result<RegionalTrees> {
    let parts = partition(x, spec)?;
    let trees = parts
        .par_iter()
        .map(|idx| -> Result<Option<Vec<DecisionTree>>> {
            if idx.is_empty() {
                return Ok(None);
            }
            let xr = x.select_rows(idx);
            labels
                .iter()
                .map(|y| {
                    let yr: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
                    fit_pruned(&xr, &yr, cfg)
                })
                .collect::<Result<Vec<_>>>()
                .map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RegionalTrees { trees })
}

/// Distils `model` into per-region pruned trees fitted on its labels of `x`.
pub fn distill(model: &Mlp, x: &Matrix, spec: &RegionSpec, cfg: &TreeConfig) -> Result<RegionalTrees> {
    let labels = (0..model.output_dim())
        .map(|q| model_labels(model, x, q))
        .collect::<Result<Vec<_>>>()?;
    fit_regional_trees(x, &labels, spec, cfg)
}

/// Share of rows where the region-routed tree agrees with the thresholded network
/// (averaged over outputs).
pub fn fidelity(model: &Mlp, trees: &RegionalTrees, x: &Matrix, spec: &RegionSpec) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::InvalidInput("fidelity of an empty set".into()));
    }
    let q = model.output_dim();
    let mut agree = 0usize;
    for row in x.iter_rows() {
        let out = model.forward(row)?;
        for (o, &p) in out.iter().enumerate() {
            agree += usize::from(trees.predict(spec, row, o)? == u8::from(p > 0.5));
        }
    }
    Ok(agree as f64 / (x.rows() * q) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub auc: f64,
    pub eval_apl: f64,
    pub region_apls: Vec<f64>,
    pub fidelity: Option<f64>,
}

fn score_metrics(scores: &[Vec<f64>], d: &Dataset) -> Result<(f64, f64, f64)> {
    let q = d.n_outputs();
    let (mut acc, mut f1, mut auc) = (0.0, 0.0, 0.0);
    for (o, s) in scores.iter().enumerate() {
        let y = d.labels(o);
        acc += accuracy(s, &y)?;
        f1 += f1_score(s, &y)?;
        auc += roc_auc(s, &y)?;
    }
    Ok((acc / q as f64, f1 / q as f64, auc / q as f64))
}

/// Test metrics of a trained network: accuracy / F1 / AUC (macro over outputs),
/// evaluation APL on test-region data, and fidelity of trees distilled on `train`.
pub fn evaluate(model: &Mlp, task: &Task, cfg: &TreeConfig) -> Result<Metrics> {
    let test = &task.test;
    if test.is_empty() {
        return Err(Error::InvalidInput("test split is empty".into()));
    }
    let scores = (0..test.n_outputs())
        .map(|o| network_scores(model, &test.x, o))
        .collect::<Result<Vec<_>>>()?;
    let (accuracy, f1, auc) = score_metrics(&scores, test)?;
    let inputs = RegionalInputs::new(&test.x, &task.regions)?;
    let (eval_apl, region_apls) = evaluation_apl(model, &inputs, cfg)?;
    let trees = distill(model, &task.train.x, &task.regions, cfg)?;
    let fid = fidelity(model, &trees, &test.x, &task.regions)?;
    Ok(Metrics {
        accuracy,
        f1,
        auc,
        eval_apl,
        region_apls,
        fidelity: Some(fid),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    DecisionTree,
    RegionalDecisionTree,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Self::DecisionTree => "decision_tree",
            Self::RegionalDecisionTree => "regional_decision_tree",
        }
    }
}

/// Trees fitted directly on the training labels. The global baseline is one tree over
/// the whole input space, routed identically for every region.
pub fn fit_baseline(kind: Baseline, task: &Task, cfg: &TreeConfig) -> Result<RegionalTrees> {
    let labels: Vec<Vec<u8>> = (0..task.n_outputs()).map(|q| task.train.labels(q)).collect();
    match kind {
        Baseline::RegionalDecisionTree => fit_regional_trees(&task.train.x, &labels, &task.regions, cfg),
        Baseline::DecisionTree => {
            let global = RegionSpec::single(task.n_features());
            let one = fit_regional_trees(&task.train.x, &labels, &global, cfg)?;
            let shared = one.trees.into_iter().next().flatten();
            Ok(RegionalTrees {
                trees: vec![shared; task.regions.n_regions()],
            })
        }
    }
}

/// Test metrics of a tree baseline. Its evaluation APL is the mean path length of its
/// own trees on the test-region data.
pub fn evaluate_trees(trees: &RegionalTrees, task: &Task) -> Result<Metrics> {
    let test = &task.test;
    let mut scores = vec![Vec::with_capacity(test.len()); test.n_outputs()];
    for row in test.x.iter_rows() {
        let r = task.regions.assign(row)?;
        let ts = trees.region_trees(r)?;
        for (o, s) in scores.iter_mut().enumerate() {
            s.push(ts[o].predict_score(row)?);
        }
    }
    let (accuracy, f1, auc) = score_metrics(&scores, test)?;
    let (eval_apl, region_apls) = trees.mean_regional_depth(&task.regions, &test.x)?;
    Ok(Metrics {
        accuracy,
        f1,
        auc,
        eval_apl,
        region_apls,
        fidelity: None,
    })
}

/// APL of a tree baseline measured by re-distilling its own predictions; used to check
/// the self-distillation fixed point.
pub fn baseline_distilled_apl(trees: &RegionalTrees, task: &Task, cfg: &TreeConfig) -> Result<f64> {
    let parts = partition(&task.test.x, &task.regions)?;
    let mut total = 0.0;
    for (r, idx) in parts.iter().enumerate() {
        if idx.len() < 2 {
            continue;
        }
        let xr = task.test.x.select_rows(idx);
        let ts = trees.region_trees(r)?;
        let mut acc = 0.0;
        for t in ts {
            let y: Vec<u8> = xr.iter_rows().map(|row| t.predict(row)).collect::<Result<_>>()?;
            acc += apl_from_labels(&xr, &y, cfg)?;
        }
        total += acc / ts.len() as f64;
    }
    Ok(total / parts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub kinds: Vec<RegularizerKind>,
    pub strengths: Vec<f64>,
    pub seeds: Vec<u64>,
    pub include_baselines: bool,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            kinds: vec![
                RegularizerKind::L2,
                RegularizerKind::GlobalTree,
                RegularizerKind::RegionalL1,
                RegularizerKind::RegionalL0,
                RegularizerKind::RegionalLsp,
            ],
            strengths: DEFAULT_STRENGTHS.to_vec(),
            seeds: vec![0, 1, 2],
            include_baselines: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: String,
    pub strength: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub f1: f64,
    pub auc: f64,
    pub val_f1: f64,
    pub eval_apl: f64,
    pub fidelity: Option<f64>,
    pub train_time_s: f64,
    pub epochs_to_converge: usize,
    pub error: Option<String>,
}

impl SweepRow {
    fn failed(kind: &str, strength: f64, seed: u64, err: &Error) -> Self {
        Self {
            kind: kind.to_string(),
            strength,
            seed,
            accuracy: f64::NAN,
            f1: f64::NAN,
            auc: f64::NAN,
            val_f1: f64::NAN,
            eval_apl: f64::NAN,
            fidelity: None,
            train_time_s: 0.0,
            epochs_to_converge: 0,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

/// One point of a tradeoff curve: means over seeds at a given strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub kind: String,
    pub strength: f64,
    pub eval_apl: f64,
    pub f1: f64,
    pub auc: f64,
    pub accuracy: f64,
}

impl SweepResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<SweepRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Seed-averaged (APL, metric) points per kind and strength, sorted by APL.
    pub fn tradeoff_curves(&self) -> Vec<CurvePoint> {
        let mut keys: Vec<(String, f64)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.error.is_none()) {
            if !keys.iter().any(|(k, s)| k == &r.kind && *s == r.strength) {
                keys.push((r.kind.clone(), r.strength));
            }
        }
        let mut pts: Vec<CurvePoint> = keys
            .into_iter()
            .map(|(kind, strength)| {
                let rs: Vec<&SweepRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.error.is_none() && r.kind == kind && r.strength == strength)
                    .collect();
                let n = rs.len() as f64;
                let mean = |f: fn(&SweepRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
                CurvePoint {
                    kind,
                    strength,
                    eval_apl: mean(|r| r.eval_apl),
                    f1: mean(|r| r.f1),
                    auc: mean(|r| r.auc),
                    accuracy: mean(|r| r.accuracy),
                }
            })
            .collect();
        pts.sort_by(|a, b| a.kind.cmp(&b.kind).then(a.eval_apl.total_cmp(&b.eval_apl)));
        pts
    }

    pub fn write_curves_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in self.tradeoff_curves() {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Run with the best validation F1 among those with evaluation APL within `apl_budget`.
    pub fn select(&self, kind: &str, apl_budget: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.error.is_none() && r.kind == kind && r.eval_apl <= apl_budget)
            .max_by(|a, b| a.val_f1.total_cmp(&b.val_f1))
    }
}

/// Trains and evaluates one (kind, strength, seed) cell.
pub fn run_cell(base: &TrainConfig, task: &Task, kind: RegularizerKind, strength: f64, seed: u64) -> Result<SweepRow> {
    let mut cfg = base.clone();
    cfg.regularizer.kind = kind;
    cfg.regularizer.strength = strength;
    cfg.seed = seed;
    let start = Instant::now();
    let out = train_target(&cfg, task)?;
    let train_time_s = start.elapsed().as_secs_f64();
    let m = evaluate(&out.model, task, &cfg.tree)?;
    let val_scores = (0..task.n_outputs())
        .map(|o| network_scores(&out.model, &task.validation.x, o))
        .collect::<Result<Vec<_>>>()?;
    let (_, val_f1, _) = score_metrics(&val_scores, &task.validation)?;
    Ok(SweepRow {
        kind: kind.name().to_string(),
        strength,
        seed,
        accuracy: m.accuracy,
        f1: m.f1,
        auc: m.auc,
        val_f1,
        eval_apl: m.eval_apl,
        fidelity: m.fidelity,
        train_time_s,
        epochs_to_converge: out.history.epochs_to_converge(cfg.convergence_window, cfg.convergence_tol),
        error: None,
    })
}

fn run_baseline(kind: Baseline, task: &Task, base: &TrainConfig, seed: u64) -> Result<SweepRow> {
    let cfg = TreeConfig {
        seed,
        seeds_for_averaging: vec![seed],
        ..base.tree.clone()
    };
    let start = Instant::now();
    let trees = fit_baseline(kind, task, &cfg)?;
    let train_time_s = start.elapsed().as_secs_f64();
    let m = evaluate_trees(&trees, task)?;
    let val_task = Task {
        test: task.validation.clone(),
        ..task.clone()
    };
    let v = evaluate_trees(&trees, &val_task)?;
    Ok(SweepRow {
        kind: kind.name().to_string(),
        strength: 0.0,
        seed,
        accuracy: m.accuracy,
        f1: m.f1,
        auc: m.auc,
        val_f1: v.f1,
        eval_apl: m.eval_apl,
        fidelity: None,
        train_time_s,
        epochs_to_converge: 0,
        error: None,
    })
}

/// Runs every (kind, strength, seed) cell plus the tree baselines. Cells run in
/// parallel; rows come back ordered by (kind, strength, seed) as listed in the grid.
/// A failing cell yields a row with `error` set and the sweep carries on.
pub fn sweep(base: &TrainConfig, grid: &SweepGrid, task: &Task) -> Result<SweepResult> {
    if grid.kinds.is_empty() || grid.strengths.is_empty() || grid.seeds.is_empty() {
        return Err(Error::InvalidInput("sweep grid must have kinds, strengths and seeds".into()));
    }
    let mut cells = Vec::new();
    for &k in &grid.kinds {
        for &s in &grid.strengths {
            for &seed in &grid.seeds {
                cells.push((k, s, seed));
            }
        }
    }
    let mut rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(k, s, seed)| {
            run_cell(base, task, k, s, seed).unwrap_or_else(|e| {
                log::error!("cell {} / {s} / {seed} failed: {e}", k.name());
                SweepRow::failed(k.name(), s, seed, &e)
            })
        })
        .collect();
    if grid.include_baselines {
        for b in [Baseline::DecisionTree, Baseline::RegionalDecisionTree] {
            for &seed in &grid.seeds {
                rows.push(run_baseline(b, task, base, seed).unwrap_or_else(|e| SweepRow::failed(b.name(), 0.0, seed, &e)));
            }
        }
    }
    Ok(SweepResult { rows })
}

/// Writes the per-epoch log.
pub fn write_history_csv(history: &History, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "loss",
        "penalty",
        "train_accuracy",
        "val_accuracy",
        "val_apl",
        "true_apls",
        "surrogate_apls",
    ])?;
    let join = |v: &[f64]| v.iter().map(|a| format!("{a:.6}")).collect::<Vec<_>>().join(";");
    for e in &history.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.loss.to_string(),
            e.penalty.to_string(),
            e.train_accuracy.to_string(),
            e.val_accuracy.to_string(),
            e.val_apl.to_string(),
            join(&e.true_apls),
            e.surrogate_apls.as_deref().map(join).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the surrogate fit diagnostics.
pub fn write_surrogate_csv(history: &History, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for d in &history.surrogate_fits {
        w.serialize(d)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-region APL from the parameter vector alone; handy for offline surrogate studies.
pub fn apl_oracle<'a>(model: &'a Mlp, inputs: &'a RegionalInputs, cfg: &'a TreeConfig) -> impl Fn(&ParamVector) -> Result<Vec<f64>> + Sync + 'a {
    move |theta| true_regional_apls(&model.with_params(theta.clone())?, inputs, cfg)
}
