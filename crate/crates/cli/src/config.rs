//! Experiment configuration, read from a single TOML file.
//!
//! See `docs/config.md` for the full schema and the desk-scale profile.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crop_core::data::SyntheticSpec;
use crop_core::pipeline::CropConfig;
use crop_core::{CropError, LabeledDataset, MetricKind, Result, TrainConfig};
use serde::{Deserialize, Serialize};

/// Where the rows come from: exactly one of the two fields must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    /// CSV with header `user_id,context_id,label,f0,...`. Relative paths
    /// are resolved against the config file's directory.
    pub csv: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

/// Which context each personalization user may train on and which ones
/// are held out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub available: String,
    pub unseen: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Users {
    pub personalize: Vec<String>,
    /// Defaults to every user in the data that is not personalized.
    pub generic: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub scenario: Scenario,
    pub users: Users,
    /// Input width, hidden widths, number of classes.
    pub layer_dims: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub metric: MetricKind,
    /// Share of each user's available-context rows held out for testing.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub out_dir: PathBuf,
    pub generic_train: TrainConfig,
    pub conventional: TrainConfig,
    pub crop: CropConfig,
}

fn default_test_fraction() -> f64 {
    0.4
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CropError::Usage(format!("config: {e}")))
    }

    /// Reads and validates a config; relative paths inside it are made
    /// relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| CropError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(csv) = &cfg.data.csv {
            if csv.is_relative() {
                cfg.data.csv = Some(base.join(csv));
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.csv, &self.data.synthetic) {
            (Some(_), None) => {}
            (None, Some(spec)) => spec.validate()?,
            _ => return Err(CropError::Usage("set exactly one of data.csv and data.synthetic".into())),
        }
        if self.seeds.is_empty() {
            return Err(CropError::Usage("seeds must not be empty".into()));
        }
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return Err(CropError::Usage("layer_dims needs at least input and output widths, all positive".into()));
        }
        if self.scenario.unseen.is_empty() {
            return Err(CropError::Usage("scenario.unseen must name at least one context".into()));
        }
        if self.scenario.unseen.contains(&self.scenario.available) {
            return Err(CropError::Usage(format!(
                "context {} is both available and unseen",
                self.scenario.available
            )));
        }
        if self.users.personalize.is_empty() {
            return Err(CropError::Usage("users.personalize must not be empty".into()));
        }
        if let Some(generic) = &self.users.generic {
            if let Some(u) = generic.iter().find(|u| self.users.personalize.contains(u)) {
                return Err(CropError::Usage(format!(
                    "user {u} is both a generic-training and a personalization user"
                )));
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CropError::Usage("test_fraction must lie in (0, 1)".into()));
        }
        self.generic_train.validate()?;
        self.conventional.validate()?;
        self.crop.validate()?;
        Ok(())
    }

    /// Loads or generates the dataset and checks it against the config.
    pub fn dataset(&self) -> Result<LabeledDataset> {
        let data = match (&self.data.csv, &self.data.synthetic) {
            (Some(path), _) => LabeledDataset::load_csv(path)?,
            (None, Some(spec)) => spec.generate()?,
            (None, None) => unreachable!("validated"),
        };
        let dims = &self.layer_dims;
        if data.num_features() != dims[0] {
            return Err(CropError::Usage(format!(
                "data has {} features but layer_dims starts with {}",
                data.num_features(),
                dims[0]
            )));
        }
        if data.num_classes() > dims[dims.len() - 1] {
            return Err(CropError::Usage(format!(
                "data has {} classes but the model outputs {}",
                data.num_classes(),
                dims[dims.len() - 1]
            )));
        }
        let contexts = data.contexts();
        for ctx in std::iter::once(&self.scenario.available).chain(&self.scenario.unseen) {
            if !contexts.contains(ctx) {
                return Err(CropError::Usage(format!("context {ctx} does not occur in the data")));
            }
        }
        let users = data.users();
        for u in self.users.personalize.iter().chain(self.users.generic.iter().flatten()) {
            if !users.contains(u) {
                return Err(CropError::Usage(format!("user {u} does not occur in the data")));
            }
        }
        Ok(data)
    }

    pub fn generic_users(&self, data: &LabeledDataset) -> BTreeSet<String> {
        match &self.users.generic {
            Some(list) => list.iter().cloned().collect(),
            None => data
                .users()
                .into_iter()
                .filter(|u| !self.users.personalize.contains(u))
                .collect(),
        }
    }

    /// Copy with the training seeds derived from one experiment seed. The
    /// CRoP initial finetune shares the conventional seed so both methods
    /// see the same validation split.
    pub fn seeded(&self, seed: u64) -> SeededConfig {
        let base = seed.wrapping_mul(31);
        let mut generic_train = self.generic_train.clone();
        generic_train.seed = base.wrapping_add(1);
        let mut conventional = self.conventional.clone();
        conventional.seed = base.wrapping_add(2);
        let mut crop = self.crop.clone();
        crop.train_initial.seed = conventional.seed;
        crop.train_final.seed = base.wrapping_add(3);
        SeededConfig {
            seed,
            generic_train,
            conventional,
            crop,
            split_seed: seed ^ 0xa5a5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeededConfig {
    pub seed: u64,
    pub generic_train: TrainConfig,
    pub conventional: TrainConfig,
    pub crop: CropConfig,
    pub split_seed: u64,
}
