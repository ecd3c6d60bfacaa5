//! Tree-complexity penalties and the surrogate machinery that makes them differentiable.
//!
//! The true per-region APL of a network is computed by distilling it into pruned CART
//! trees, which is not differentiable in the parameters. Each region therefore gets a
//! small regression network mapping the flattened parameter vector to an APL estimate;
//! penalty gradients flow through those estimators.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Adam, Mlp, OutputHead, ParamVector};
use crate::regions::{partition, RegionSpec};
use crate::tree::{apl_from_labels, TreeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    None,
    L2,
    GlobalTree,
    RegionalL1,
    RegionalL0,
    RegionalLsp,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 6] = [
        Self::None,
        Self::L2,
        Self::GlobalTree,
        Self::RegionalL1,
        Self::RegionalL0,
        Self::RegionalLsp,
    ];

    /// Kinds whose penalty is an APL estimate.
    pub fn is_tree(self) -> bool {
        matches!(self, Self::GlobalTree | Self::RegionalL1 | Self::RegionalL0 | Self::RegionalLsp)
    }

    pub fn is_regional(self) -> bool {
        matches!(self, Self::RegionalL1 | Self::RegionalL0 | Self::RegionalLsp)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::L2 => "l2",
            Self::GlobalTree => "global_tree",
            Self::RegionalL1 => "regional_l1",
            Self::RegionalL0 => "regional_l0",
            Self::RegionalLsp => "regional_lsp",
        }
    }
}

impl std::str::FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown regularizer '{s}'")))
    }
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub kind: RegularizerKind,
    pub strength: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl Regularizer {
    pub fn new(kind: RegularizerKind, strength: f64) -> Self {
        Self {
            kind,
            strength,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::InvalidInput(format!("strength must be >= 0, got {}", self.strength)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidInput(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }

    /// True when the penalty contributes nothing to the objective.
    pub fn is_inactive(&self) -> bool {
        self.kind == RegularizerKind::None || self.strength == 0.0
    }
}

/// Euclidean projection of `z` onto the probability simplex.
pub fn sparsemax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::InvalidInput("sparsemax of an empty vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("sparsemax input must be finite".into()));
    }
    // work relative to the maximum so that exact shifts give identical outputs
    let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let u: Vec<f64> = z.iter().map(|v| v - top).collect();
    let mut sorted = u.clone();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support = 1;
    let mut support_sum = sorted[0];
    for (r, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k = r + 1;
        if 1.0 + k as f64 * v > cumsum {
            support = k;
            support_sum = cumsum;
        }
    }
    let tau = (support_sum - 1.0) / support as f64;
    Ok(u.iter().map(|&v| (v - tau).max(0.0)).collect())
}

/// Combines per-region APL estimates into a penalty value and the per-region weights
/// through which gradients flow. Estimates are clamped at zero first.
pub fn penalty(kind: RegularizerKind, estimates: &[f64], temperature: f64) -> Result<(f64, Vec<f64>)> {
    if estimates.is_empty() {
        return Err(Error::InvalidInput("penalty needs at least one estimate".into()));
    }
    let est: Vec<f64> = estimates.iter().map(|v| v.max(0.0)).collect();
    let weights = match kind {
        RegularizerKind::GlobalTree | RegularizerKind::RegionalL1 => vec![1.0; est.len()],
        RegularizerKind::RegionalL0 => {
            let mut arg = 0;
            for (i, &v) in est.iter().enumerate() {
                if v > est[arg] {
                    arg = i;
                }
            }
            let mut w = vec![0.0; est.len()];
            w[arg] = 1.0;
            w
        }
        RegularizerKind::RegionalLsp => {
            if !(temperature > 0.0) {
                return Err(Error::InvalidInput(format!("temperature must be > 0, got {temperature}")));
            }
            let scaled: Vec<f64> = est.iter().map(|v| v / temperature).collect();
            sparsemax(&scaled)?
        }
        RegularizerKind::None | RegularizerKind::L2 => {
            return Err(Error::Contract(format!("{} is not an APL penalty", kind.name())));
        }
    };
    let value = match kind {
        RegularizerKind::RegionalL0 => est.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        _ => weights.iter().zip(&est).map(|(w, v)| w * v).sum(),
    };
    Ok((value, weights))
}

/// One (parameters, per-region APL) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub theta: ParamVector,
    pub apls: Vec<f64>,
    /// Produced by augmentation rather than observed during training.
    pub synthetic: bool,
}

/// FIFO store of observed parameter vectors and their true APLs.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBuffer {
    records: VecDeque<ParamRecord>,
    capacity: usize,
    n_regions: usize,
}

impl ParamBuffer {
    pub fn new(capacity: usize, n_regions: usize) -> Self {
        Self {
            records: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
            n_regions,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn records(&self) -> impl Iterator<Item = &ParamRecord> {
        self.records.iter()
    }

    pub fn dim(&self) -> Option<usize> {
        self.records.front().map(|r| r.theta.len())
    }

    fn check(&self, theta: &ParamVector, apls: &[f64]) -> Result<()> {
        if apls.len() != self.n_regions {
            return Err(shape_err("APL vector", self.n_regions, apls.len()));
        }
        if let Some(d) = self.dim() {
            if theta.len() != d {
                return Err(shape_err("buffered parameters", d, theta.len()));
            }
        }
        if apls.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::InvalidInput("APL values must be non-negative".into()));
        }
        Ok(())
    }

    fn push_record(&mut self, rec: ParamRecord) -> Result<()> {
        self.check(&rec.theta, &rec.apls)?;
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(rec);
        Ok(())
    }

    /// Appends an observed record, evicting the oldest when full.
    pub fn push(&mut self, theta: ParamVector, apls: Vec<f64>) -> Result<()> {
        self.push_record(ParamRecord { theta, apls, synthetic: false })
    }

    /// Moves a seeded random `fraction` of the observed records out as a held-out set.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> (ParamBuffer, Vec<ParamRecord>) {
        let n = self.records.len();
        let n_hold = if n >= 5 { ((n as f64 * fraction).floor() as usize).min(n - 1) } else { 0 };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut held_mask = vec![false; n];
        order[..n_hold].iter().for_each(|&i| held_mask[i] = true);
        let mut fit = ParamBuffer::new(self.capacity, self.n_regions);
        let mut held = Vec::with_capacity(n_hold);
        for (i, rec) in self.records.iter().enumerate() {
            if held_mask[i] {
                held.push(rec.clone());
            } else {
                fit.records.push_back(rec.clone());
            }
        }
        (fit, held)
    }

    /// Adds `n_synthetic` convex combinations of the stored parameters, with mixing
    /// weights drawn from a flat Dirichlet, each labelled by `apl_oracle`.
    pub fn augment<F>(&self, n_synthetic: usize, seed: u64, apl_oracle: F) -> Result<ParamBuffer>
    where
        F: Fn(&ParamVector) -> Result<Vec<f64>> + Sync,
    {
        if self.records.is_empty() {
            return Err(Error::InvalidInput("cannot augment an empty buffer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let thetas: Vec<ParamVector> = (0..n_synthetic)
            .map(|_| {
                let w = dirichlet_flat(self.records.len(), &mut rng);
                self.mix(&w)
            })
            .collect();
        let labelled: Vec<Result<ParamRecord>> = thetas
            .into_par_iter()
            .map(|theta| {
                let apls = apl_oracle(&theta)?;
                Ok(ParamRecord { theta, apls, synthetic: true })
            })
            .collect();
        let mut out = ParamBuffer {
            records: self.records.clone(),
            capacity: self.records.len() + n_synthetic,
            n_regions: self.n_regions,
        };
        for rec in labelled {
            out.push_record(rec?)?;
        }
        Ok(out)
    }

    /// Convex combination of the stored parameter vectors.
    pub fn mix(&self, weights: &[f64]) -> ParamVector {
        let d = self.dim().unwrap_or(0);
        let mut theta = vec![0.0; d];
        for (w, rec) in weights.iter().zip(&self.records) {
            for (t, v) in theta.iter_mut().zip(rec.theta.iter()) {
                *t += w * v;
            }
        }
        ParamVector::new(theta)
    }
}

/// One draw from Dirichlet(1, ..., 1) via normalised unit exponentials.
pub fn dirichlet_flat(j: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut w: Vec<f64> = (0..j).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|v| *v /= total);
    } else {
        w.iter_mut().for_each(|v| *v = 1.0 / j as f64);
    }
    w
}

fn default_hidden() -> Vec<usize> {
    vec![25]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Share of observed records held out for the fidelity diagnostic.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 32,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

/// APL regressor for one region. Inputs are centred on the buffer mean and divided by
/// the parameters' root-mean-square; targets are standardised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    net: Mlp,
    input_shift: Vec<f64>,
    input_scale: f64,
    target_shift: f64,
    target_scale: f64,
}

impl Surrogate {
    pub fn new(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(dim);
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self {
            net: Mlp::new(&sizes, OutputHead::Identity, seed)?,
            input_shift: vec![0.0; dim],
            input_scale: 1.0,
            target_shift: 0.0,
            target_scale: 1.0,
        })
    }

    /// Wraps a bare identity-head network with no normalisation.
    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.output_dim() != 1 || net.head() != OutputHead::Identity {
            return Err(Error::Contract("surrogates need a scalar identity head".into()));
        }
        Ok(Self {
            input_shift: vec![0.0; net.input_dim()],
            net,
            input_scale: 1.0,
            target_shift: 0.0,
            target_scale: 1.0,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn normalise(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.input_shift)
            .map(|(t, s)| (t - s) / self.input_scale)
            .collect()
    }

    pub fn predict(&self, theta: &[f64]) -> Result<f64> {
        let u = self.normalise(theta);
        Ok(self.target_shift + self.target_scale * self.net.forward_scalar(&u)?)
    }

    /// Prediction and its gradient with respect to `theta`.
    pub fn predict_with_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let u = self.normalise(theta);
        let value = self.target_shift + self.target_scale * self.net.forward_scalar(&u)?;
        let k = self.target_scale / self.input_scale;
        let grad = self.net.grad_wrt_input(&u)?.into_iter().map(|g| g * k).collect();
        Ok((value, grad))
    }

    /// Refits normalisation statistics on `x` / `y`, then runs minibatch Adam on the
    /// squared error, continuing from the current weights.
    fn fit(&mut self, x: &Matrix, y: &[f64], cfg: &SurrogateConfig, seed: u64) -> Result<()> {
        let n = x.rows();
        let d = x.cols();
        let mut shift = vec![0.0; d];
        for r in x.iter_rows() {
            shift.iter_mut().zip(r).for_each(|(s, v)| *s += v);
        }
        shift.iter_mut().for_each(|s| *s /= n as f64);
        // Scale by the magnitude of the parameters, not of their spread: buffered
        // vectors sit close together, and dividing by that spread lets the surrogate
        // extrapolate wildly as soon as the target moves.
        let sq: f64 = x.as_slice().iter().map(|v| v * v).sum();
        let rms = (sq / (n * d) as f64).sqrt();
        self.input_shift = shift;
        self.input_scale = if rms > 1e-12 { rms } else { 1.0 };

        let mean_y = y.iter().sum::<f64>() / n as f64;
        let sd_y = (y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum::<f64>() / n as f64).sqrt();
        self.target_shift = mean_y;
        self.target_scale = sd_y.max(0.1);

        let mut xn = Matrix::zeros(n, d);
        for i in 0..n {
            xn.row_mut(i).copy_from_slice(&self.normalise(x.row(i)));
        }
        let yn: Vec<f64> = y.iter().map(|v| (v - self.target_shift) / self.target_scale).collect();
        let yn = Matrix::from_vec(n, 1, yn)?;

        let mut opt = Adam::new(self.net.num_params(), cfg.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        let bs = cfg.batch_size.max(1);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(bs) {
                let bx = xn.select_rows(chunk);
                let by = yn.select_rows(chunk);
                let g = self.net.backward(&bx, &by, None)?;
                opt.step(&mut self.net, &g)?;
            }
        }
        Ok(())
    }
}

/// Per-region fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub region: usize,
    pub buffer_size: usize,
    pub train_mse: f64,
    /// `None` when there were no held-out records.
    pub heldout_mse: Option<f64>,
}

/// One surrogate per region; inactive (empty) regions get none and estimate 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSet {
    surrogates: Vec<Option<Surrogate>>,
    pub config: SurrogateConfig,
    trained: bool,
}

impl SurrogateSet {
    pub fn new(dim: usize, active: &[bool], config: SurrogateConfig) -> Result<Self> {
        let surrogates = active
            .iter()
            .enumerate()
            .map(|(r, &on)| {
                on.then(|| Surrogate::new(dim, &config.hidden, config.seed.wrapping_add(r as u64)))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            surrogates,
            config,
            trained: false,
        })
    }

    /// Builds an already-trained set from explicit surrogates.
    pub fn from_surrogates(surrogates: Vec<Option<Surrogate>>, config: SurrogateConfig) -> Self {
        Self {
            surrogates,
            config,
            trained: true,
        }
    }

    pub fn n_regions(&self) -> usize {
        self.surrogates.len()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn get(&self, r: usize) -> Option<&Surrogate> {
        self.surrogates.get(r).and_then(Option::as_ref)
    }

    /// Fits every active surrogate on `buffer` (in parallel across regions) and reports
    /// training and held-out squared error.
    pub fn train(&mut self, buffer: &ParamBuffer, heldout: &[ParamRecord], round: u64) -> Result<Vec<FitReport>> {
        if buffer.is_empty() {
            return Err(Error::InvalidInput("cannot train surrogates on an empty buffer".into()));
        }
        if buffer.n_regions() != self.n_regions() {
            return Err(shape_err("buffer regions", self.n_regions(), buffer.n_regions()));
        }
        let rows: Vec<Vec<f64>> = buffer.records().map(|r| r.theta.to_vec()).collect();
        let x = Matrix::from_rows(&rows)?;
        let cfg = &self.config;
        let reports = self
            .surrogates
            .par_iter_mut()
            .enumerate()
            .filter_map(|(r, s)| s.as_mut().map(|s| (r, s)))
            .map(|(r, s)| -> Result<FitReport> {
                let y: Vec<f64> = buffer.records().map(|rec| rec.apls[r]).collect();
                let seed = cfg.seed ^ (round.wrapping_mul(1_000_003)).wrapping_add(r as u64);
                s.fit(&x, &y, cfg, seed)?;
                let mse = |recs: &mut dyn Iterator<Item = &ParamRecord>| -> Result<Option<f64>> {
                    let mut total = 0.0;
                    let mut n = 0usize;
                    for rec in recs {
                        let e = s.predict(&rec.theta)? - rec.apls[r];
                        total += e * e;
                        n += 1;
                    }
                    Ok((n > 0).then(|| total / n as f64))
                };
                Ok(FitReport {
                    region: r,
                    buffer_size: buffer.len(),
                    train_mse: mse(&mut buffer.records())?.unwrap_or(0.0),
                    heldout_mse: mse(&mut heldout.iter())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.trained = true;
        Ok(reports)
    }

    /// Raw per-region estimates (0 for inactive regions).
    pub fn estimates(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.surrogates
            .iter()
            .map(|s| s.as_ref().map_or(Ok(0.0), |s| s.predict(theta)))
            .collect()
    }
}

/// Penalty value and its gradient in the target parameters. For the sparsemax penalty
/// the mixing weights are held constant (no gradient through the projection).
pub fn penalty_grad(reg: &Regularizer, surrogates: Option<&SurrogateSet>, theta: &ParamVector) -> Result<(f64, ParamVector)> {
    match reg.kind {
        RegularizerKind::None => Ok((0.0, ParamVector::zeros(theta.len()))),
        RegularizerKind::L2 => {
            let grad = ParamVector::new(theta.iter().map(|t| 2.0 * t).collect());
            Ok((theta.squared_norm(), grad))
        }
        kind => {
            let set = surrogates
                .filter(|s| s.is_trained())
                .ok_or_else(|| Error::Contract("surrogates must be trained before use".into()))?;
            let evals: Vec<Option<(f64, Vec<f64>)>> = set
                .surrogates
                .iter()
                .map(|s| s.as_ref().map(|s| s.predict_with_grad(theta)).transpose())
                .collect::<Result<_>>()?;
            let raw: Vec<f64> = evals.iter().map(|e| e.as_ref().map_or(0.0, |e| e.0)).collect();
            let (value, weights) = penalty(kind, &raw, reg.temperature)?;
            let mut grad = ParamVector::zeros(theta.len());
            for ((w, e), &est) in weights.iter().zip(&evals).zip(&raw) {
                // the clamp at zero has no gradient below it
                if let Some((_, g)) = e {
                    if *w != 0.0 && est > 0.0 {
                        grad.iter_mut().zip(g).for_each(|(a, b)| *a += w * b);
                    }
                }
            }
            Ok((value, grad))
        }
    }
}

/// Region-routed inputs, precomputed once per dataset.
#[derive(Debug, Clone)]
pub struct RegionalInputs {
    pub per_region: Vec<Matrix>,
}

impl RegionalInputs {
    pub fn new(x: &Matrix, spec: &RegionSpec) -> Result<Self> {
        let parts = partition(x, spec)?;
        Ok(Self {
            per_region: parts.iter().map(|p| x.select_rows(p)).collect(),
        })
    }

    /// All rows as one region.
    pub fn global(x: &Matrix) -> Self {
        Self {
            per_region: vec![x.clone()],
        }
    }

    pub fn n_regions(&self) -> usize {
        self.per_region.len()
    }

    /// Regions with enough points to fit a tree.
    pub fn active(&self) -> Vec<bool> {
        self.per_region.iter().map(|m| m.rows() >= 2).collect()
    }
}

/// Thresholded labels of `model` for output `q` on `x`.
pub fn model_labels(model: &Mlp, x: &Matrix, q: usize) -> Result<Vec<u8>> {
    x.iter_rows()
        .map(|r| Ok(u8::from(model.forward(r)?[q] > 0.5)))
        .collect()
}

/// Per-region APL of the trees distilled from `model`; mean across outputs when Q > 1.
/// Regions with fewer than two points contribute 0.
pub fn true_regional_apls(model: &Mlp, inputs: &RegionalInputs, cfg: &TreeConfig) -> Result<Vec<f64>> {
    inputs
        .per_region
        .iter()
        .map(|x| {
            if x.rows() < 2 {
                return Ok(0.0);
            }
            let q = model.output_dim();
            let mut total = 0.0;
            for o in 0..q {
                total += apl_from_labels(x, &model_labels(model, x, o)?, cfg)?;
            }
            Ok(total / q as f64)
        })
        .collect()
}
