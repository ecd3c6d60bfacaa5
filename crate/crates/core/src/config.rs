//! Run configuration: a JSON document whose top-level sections can each be
//! overridden by a JSON fragment.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datasets::{
    gen_five_rectangles, gen_grid_toy, gen_two_region_toy, load_delimited, Dataset, LoadOptions, Split, ToyData,
};
use crate::error::{Error, Result};
use crate::experiment::{ModelConfig, SurrogateSchedule, SweepGrid, Task, TrainConfig};
use crate::regions::{kmeans_regions, RegionSpec};
use crate::regularizer::{Regularizer, RegularizerKind};
use crate::tree::TreeConfig;

pub const SECTIONS: [&str; 7] = ["dataset", "regions", "model", "regularizer", "tree", "surrogate", "sweep"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    FiveRectangles {
        #[serde(default = "n_train")]
        n_train: usize,
        #[serde(default = "n_test")]
        n_test: usize,
        #[serde(default = "n_val")]
        n_val: usize,
        #[serde(default = "noise")]
        label_noise: f64,
        #[serde(default)]
        seed: u64,
    },
    TwoRegion {
        #[serde(default = "n_train")]
        n_train: usize,
        #[serde(default = "n_test")]
        n_test: usize,
        #[serde(default = "n_val")]
        n_val: usize,
        #[serde(default = "noise")]
        label_noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Grid {
        rows: usize,
        cols: usize,
        #[serde(default = "n_train")]
        n_train: usize,
        #[serde(default = "n_test")]
        n_test: usize,
        #[serde(default = "n_val")]
        n_val: usize,
        #[serde(default = "noise")]
        label_noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        #[serde(flatten)]
        options: LoadOptions,
    },
}

fn n_train() -> usize {
    250
}
fn n_test() -> usize {
    5000
}
fn n_val() -> usize {
    250
}
fn noise() -> f64 {
    0.1
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::FiveRectangles {
            n_train: n_train(),
            n_test: n_test(),
            n_val: n_val(),
            label_noise: noise(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum RegionsConfig {
    /// The dataset's own cover (toy tasks) or a single region (files).
    #[default]
    Dataset,
    Single,
    Kmeans {
        k: usize,
        #[serde(default)]
        seed: u64,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub regions: RegionsConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_regularizer")]
    pub regularizer: Regularizer,
    #[serde(default)]
    pub tree: TreeConfig,
    #[serde(default)]
    pub surrogate: SurrogateSchedule,
    #[serde(default)]
    pub sweep: SweepGrid,
    /// Seed for the target network and its minibatch order.
    #[serde(default)]
    pub seed: u64,
}

fn default_regularizer() -> Regularizer {
    Regularizer::new(RegularizerKind::None, 0.0)
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("defaults deserialize")
    }
}

impl RunConfig {
    /// Parses a base document (or defaults) and applies per-section overrides.
    /// Object overrides are merged key by key into the section; anything else replaces it.
    pub fn resolve(base: Option<&Path>, overrides: &[(&str, &str)]) -> Result<Self> {
        let mut doc = match base {
            Some(p) => serde_json::from_str::<Value>(&std::fs::read_to_string(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => Value::Object(Default::default()),
        };
        let Value::Object(map) = &mut doc else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        if let Some(k) = map.keys().find(|k| !SECTIONS.contains(&k.as_str()) && *k != "seed") {
            return Err(Error::Config(format!("unknown config section `{k}`")));
        }
        let defaults = serde_json::to_value(RunConfig::default())?;
        for &(section, fragment) in overrides {
            let patch: Value = serde_json::from_str(fragment)
                .map_err(|e| Error::Config(format!("--{section}: {e}")))?;
            if !SECTIONS.contains(&section) {
                return Err(Error::Config(format!("unknown config section `{section}`")));
            }
            if !map.contains_key(section) {
                map.insert(section.to_string(), defaults[section].clone());
            }
            match (map.get_mut(section), patch) {
                (Some(Value::Object(cur)), Value::Object(p)) => cur.extend(p),
                (_, p) => {
                    map.insert(section.to_string(), p);
                }
            }
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.regularizer.validate()?;
        cfg.tree.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            tree: self.tree.clone(),
            schedule: self.surrogate.clone(),
            seed: self.seed,
            ..TrainConfig::new(self.regularizer)
        }
    }

    /// Builds the train / validation / test splits and the region cover.
    pub fn build_task(&self) -> Result<Task> {
        let (train, validation, test, own_regions) = match &self.dataset {
            DatasetConfig::Csv { path, options } => {
                let s = load_delimited(path, options)?;
                (s.train, s.validation, s.test, None)
            }
            toy => {
                let (data, n_val, noise, seed) = match *toy {
                    DatasetConfig::FiveRectangles { n_train, n_test, n_val, label_noise, seed } => {
                        (gen_five_rectangles(n_train, n_test, label_noise, seed)?, n_val, label_noise, seed)
                    }
                    DatasetConfig::TwoRegion { n_train, n_test, n_val, label_noise, seed } => {
                        (gen_two_region_toy(n_train, n_test, label_noise, seed)?, n_val, label_noise, seed)
                    }
                    DatasetConfig::Grid { rows, cols, n_train, n_test, n_val, label_noise, seed } => {
                        (gen_grid_toy(rows, cols, n_train, n_test, label_noise, seed)?, n_val, label_noise, seed)
                    }
                    DatasetConfig::Csv { .. } => unreachable!(),
                };
                let validation = toy_validation(&data, n_val, noise, seed);
                (data.train, validation, data.test, Some(data.regions))
            }
        };
        let regions = match &self.regions {
            RegionsConfig::Dataset => own_regions.unwrap_or_else(|| RegionSpec::single(train.n_features())),
            RegionsConfig::Single => RegionSpec::single(train.n_features()),
            RegionsConfig::Kmeans { k, seed } => kmeans_regions(&train.x, *k, *seed)?,
            RegionsConfig::File { path } => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        };
        if regions.dim() != train.n_features() {
            return Err(Error::Config(format!(
                "regions have dimension {} but the data has {} features",
                regions.dim(),
                train.n_features()
            )));
        }
        Ok(Task {
            train: train.with_regions(&regions)?,
            validation: validation.with_regions(&regions)?,
            test: test.with_regions(&regions)?,
            regions,
        })
    }
}

/// Validation points drawn from the same generator as training, with the same label noise.
fn toy_validation(data: &ToyData, n_val: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x76a1_1da7_e5ee_d000);
    data.function.sample(n_val.max(1), noise, &mut rng, Split::Validation)
}
