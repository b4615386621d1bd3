//! Run configuration: a JSON document with flag overrides, validated strictly
//! and identified by a content hash.

use std::path::{Path, PathBuf};

use lvat_core::data::{self, AugmentConfig, Dataset, Split, Standardizer};
use lvat_core::flow::{FlowModel, DEFAULT_S_MAX};
use lvat_core::io;
use lvat_core::nets::OutputActivation;
use lvat_core::regularizer::{self, PiConfig, RegularizerKind};
use lvat_core::rng;
use lvat_core::trainer::{TrainConfig, TransformerTrainConfig};
use lvat_core::transformer::Transformer;
use lvat_core::vae::VaeModel;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// The JSON schema every run configuration is validated against.
pub const SCHEMA: &str = include_str!("../run_config.schema.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    TwoMoons,
    Circles,
    GridPatterns,
    /// Train and test splits read from dataset CSV files.
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    /// Image side length for grid patterns.
    pub size: usize,
    pub num_classes: usize,
    /// Size of the class-balanced labeled subset drawn per seed; `null`
    /// keeps the labels of the training split as they are.
    pub n_labeled: Option<usize>,
    /// Embeds point data in this many dimensions with a fixed linear map.
    pub lift_dim: Option<usize>,
    /// Standardizes point data with training-split statistics. Grid data is
    /// never rescaled.
    pub standardize: bool,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::TwoMoons,
            n_train: 1000,
            n_test: 1000,
            noise: 0.1,
            size: 8,
            num_classes: 2,
            n_labeled: Some(10),
            lift_dim: None,
            standardize: true,
            train_path: None,
            test_path: None,
            seed: 1,
        }
    }
}

/// Train and test splits after preprocessing, before label subsampling.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
}

fn required_path<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("data.{key} is required for csv data")))
}

impl DataConfig {
    pub fn prepare(&self) -> Result<PreparedData> {
        let train_seed = rng::derive(self.seed, "train");
        let test_seed = rng::derive(self.seed, "test");
        let (train, test) = match self.kind {
            DataKind::TwoMoons | DataKind::Circles => {
                if self.num_classes != 2 {
                    return Err(CliError::Usage("point datasets have exactly 2 classes".into()));
                }
                let gen = if self.kind == DataKind::TwoMoons {
                    data::gen_two_moons
                } else {
                    data::gen_circles
                };
                (gen(self.n_train, self.noise, train_seed)?, gen(self.n_test, self.noise, test_seed)?)
            }
            DataKind::GridPatterns => {
                let gen = |n, s| data::gen_grid_patterns(n, self.size, self.num_classes, self.noise, s);
                (gen(self.n_train, train_seed)?, gen(self.n_test, test_seed)?)
            }
            DataKind::Csv => (
                io::load_dataset(required_path(&self.train_path, "train_path")?, Some(self.num_classes), Split::Train)?,
                io::load_dataset(required_path(&self.test_path, "test_path")?, Some(self.num_classes), Split::Test)?,
            ),
        };
        let test = test.with_split(Split::Test);
        if train.grid().is_some() {
            if self.lift_dim.is_some() {
                return Err(CliError::Usage("data.lift_dim applies to point data only".into()));
            }
            return Ok(PreparedData { train, test });
        }
        let (mut xtr, mut xte) = (train.features().clone(), test.features().clone());
        if self.standardize {
            let s = Standardizer::fit(&xtr);
            xtr = s.apply(&xtr)?;
            xte = s.apply(&xte)?;
        }
        if let Some(dim) = self.lift_dim {
            let seed = rng::derive(self.seed, "lift");
            xtr = data::lift_features(&xtr, dim, seed)?;
            xte = data::lift_features(&xte, dim, seed)?;
        }
        Ok(PreparedData {
            train: train.with_features(xtr)?,
            test: test.with_features(xte)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformerKind {
    Vae,
    Flow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub kind: TransformerKind,
    pub hidden: Vec<usize>,
    /// VAE latent dimension; a flow keeps the input dimension.
    pub latent_dim: usize,
    /// VAE decoder output activation.
    pub output: OutputActivation,
    /// Number of flow coupling layers.
    pub couplings: usize,
    pub s_max: f64,
    pub training: TransformerTrainConfig,
    /// Where the transformer checkpoint is written and read; defaults to
    /// `transformer.json` under the output directory.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            kind: TransformerKind::Flow,
            hidden: vec![32, 32],
            latent_dim: 8,
            output: OutputActivation::None,
            couplings: 8,
            s_max: DEFAULT_S_MAX,
            training: TransformerTrainConfig::default(),
            checkpoint: None,
        }
    }
}

impl TransformerConfig {
    pub fn build(&self, input_dim: usize, seed: u64) -> Result<Transformer> {
        Ok(match self.kind {
            TransformerKind::Vae => Transformer::Vae(VaeModel::new(
                input_dim,
                self.latent_dim,
                &self.hidden,
                self.output,
                seed,
            )?),
            TransformerKind::Flow => {
                Transformer::Flow(FlowModel::new(input_dim, self.couplings, &self.hidden, self.s_max, seed)?)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { hidden: vec![32, 32] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    /// Perturbation radius, in input space for VAT and latent space for LVAT.
    pub epsilon: f64,
    pub xi: f64,
    pub power_iters: usize,
    pub pi: PiConfig,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            kind: RegularizerKind::Vat,
            epsilon: 1.0,
            xi: regularizer::DEFAULT_XI,
            power_iters: regularizer::DEFAULT_POWER_ITERS,
            pi: PiConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub alpha: f64,
    pub lr0: f64,
    pub total_updates: usize,
    pub decay_updates: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub eval_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainerConfig {
            alpha: t.alpha,
            lr0: t.lr0,
            total_updates: t.total_updates,
            decay_updates: t.decay_updates,
            batch_labeled: t.batch_labeled,
            batch_unlabeled: t.batch_unlabeled,
            eval_every: t.eval_every,
            augment: t.augment,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub transformer: TransformerConfig,
    pub classifier: ClassifierConfig,
    pub regularizer: RegularizerConfig,
    pub trainer: TrainerConfig,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            transformer: TransformerConfig::default(),
            classifier: ClassifierConfig::default(),
            regularizer: RegularizerConfig::default(),
            trainer: TrainerConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Sets `key=value` in a JSON document, where `key` is a dotted path. The
/// value is parsed as JSON and taken as a plain string when that fails.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("--set: malformed key {key:?}")));
    }
    let mut node = doc;
    for p in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("--set: {key:?} does not name a config section")))?;
        node = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("--set: {key:?} does not name a config section")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Reads the optional config file, applies overrides in order, then
    /// deserializes and validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let bytes = io::read_bytes(p)?;
                serde_json::from_slice(&bytes)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| {
            let at = path.map_or("config".to_string(), |p| p.display().to_string());
            CliError::Usage(format!("{at}: {e}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Usage("seeds must list at least one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(CliError::Usage("seeds must be distinct".into()));
        }
        self.train_config()?.validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let (r, t) = (&self.regularizer, &self.trainer);
        Ok(TrainConfig {
            alpha: t.alpha,
            lr0: t.lr0,
            total_updates: t.total_updates,
            decay_updates: t.decay_updates,
            batch_labeled: t.batch_labeled,
            batch_unlabeled: t.batch_unlabeled,
            regularizer: r.kind,
            epsilon: r.epsilon,
            xi: r.xi,
            power_iters: r.power_iters,
            pi: r.pi,
            augment: t.augment,
            eval_every: t.eval_every,
        })
    }

    /// True when the unlabeled cost does not enter training.
    pub fn is_baseline(&self) -> bool {
        self.regularizer.kind == RegularizerKind::None || self.trainer.alpha == 0.0
    }

    pub fn transformer_checkpoint(&self) -> PathBuf {
        self.transformer
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("transformer.json"))
    }

    /// SHA-256 over the canonical JSON form, sorted keys, with `output_dir`
    /// left out so that relocating a run keeps its identity.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self).map_err(|e| CliError::Failed(e.to_string()))?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        let canonical = serde_json::to_string(&v).map_err(|e| CliError::Failed(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}
