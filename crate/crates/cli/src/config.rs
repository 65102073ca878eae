//! JSON experiment configuration.
//!
//! Everything a `train` run needs lives in one file; unknown keys are
//! rejected and the whole config is validated before any compute. Relative
//! data paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use dsibh_core::dataio::{generate_synthetic, load_features, load_labels, DatasetBundle, SynthSpec};
use dsibh_core::eval::Direction;
use dsibh_core::nets::NetSpec;
use dsibh_core::trainer::{derive_seed, EncoderSpecs, TrainConfig};
use dsibh_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum DataSource {
    Synth(SynthSpec),
    Files(DataFiles),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub x1: PathBuf,
    pub x2: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub query_count: usize,
    pub train_count: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            query_count: 100,
            train_count: 500,
            seed: 0,
        }
    }
}

/// Hidden layout of one encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetShape {
    pub hidden_dims: Vec<usize>,
    pub init_scale: f64,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            hidden_dims: vec![256],
            init_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetsConfig {
    pub lab: NetShape,
    pub img: NetShape,
    pub txt: NetShape,
}

impl NetsConfig {
    pub fn uniform(hidden_dims: Vec<usize>) -> Self {
        let shape = NetShape {
            hidden_dims,
            init_scale: 1.0,
        };
        Self {
            lab: shape.clone(),
            img: shape.clone(),
            txt: shape,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Table,
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub format: ReportFormat,
    /// Retrieval radius for MAP; `None` uses the whole database.
    pub radius: Option<usize>,
    /// Rows per minibatch for the held-out MI estimate; `None` uses the
    /// training batch size.
    pub mi_batch_size: Option<usize>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            format: ReportFormat::Table,
            radius: None,
            mi_batch_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub nets: NetsConfig,
    pub output_dir: PathBuf,
    #[serde(default = "both_directions")]
    pub directions: Vec<Direction>,
    #[serde(default)]
    pub report: ReportConfig,
}

fn both_directions() -> Vec<Direction> {
    Direction::BOTH.to_vec()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, parses and validates a config, resolving relative data paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        if let (DataSource::Files(files), Some(base)) = (&mut cfg.data, path.parent()) {
            for p in [&mut files.x1, &mut files.x2, &mut files.labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DataSource::Synth(spec) = &self.data {
            spec.validate()?;
            let n = spec.class_count * spec.samples_per_class;
            if self.split.query_count + 1 > n || self.split.train_count > n - self.split.query_count {
                return Err(Error::InvalidArgument(format!(
                    "split ({} query, {} train) does not fit {n} synthetic rows",
                    self.split.query_count, self.split.train_count
                )));
            }
        }
        if self.split.query_count == 0 {
            return Err(Error::InvalidArgument("split.query_count must be >= 1 for evaluation".into()));
        }
        if self.split.train_count < 2 {
            return Err(Error::InvalidArgument("split.train_count must be >= 2".into()));
        }
        if self.directions.is_empty() {
            return Err(Error::InvalidArgument("directions must not be empty".into()));
        }
        if self.report.mi_batch_size.is_some_and(|b| b < 2) {
            return Err(Error::InvalidArgument("report.mi_batch_size must be >= 2".into()));
        }
        for (name, shape) in [("lab", &self.nets.lab), ("img", &self.nets.img), ("txt", &self.nets.txt)] {
            if shape.hidden_dims.is_empty() || shape.hidden_dims.contains(&0) {
                return Err(Error::InvalidArgument(format!("nets.{name}.hidden_dims must be non-empty and positive")));
            }
            if !(shape.init_scale.is_finite() && shape.init_scale >= 0.0) {
                return Err(Error::InvalidArgument(format!("nets.{name}.init_scale must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<DatasetBundle<f64>> {
        match &self.data {
            DataSource::Synth(spec) => generate_synthetic(spec),
            DataSource::Files(f) => DatasetBundle::new(load_features(&f.x1)?, load_features(&f.x2)?, load_labels(&f.labels)?),
        }
    }

    /// Encoder specs for the given data widths; init seeds follow the train seed.
    pub fn encoder_specs(&self, d1: usize, d2: usize, label_dim: usize) -> EncoderSpecs {
        let c = self.train.code_bits;
        let seed = self.train.seed;
        let spec = |input_dim: usize, shape: &NetShape, stream: u64| NetSpec {
            init_scale: shape.init_scale,
            ..NetSpec::new(input_dim, shape.hidden_dims.clone(), c, derive_seed(seed, stream))
        };
        EncoderSpecs {
            lab: spec(label_dim, &self.nets.lab, 1),
            img: spec(d1, &self.nets.img, 2),
            txt: spec(d2, &self.nets.txt, 3),
        }
    }
}
