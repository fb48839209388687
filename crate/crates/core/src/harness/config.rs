//! Experiment configuration as JSON documents.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{gen_teacher_student, InitLaw, TeacherSpec};
use crate::error::{Error, Result};
use crate::finite::Variant;
use crate::limit::{HyperSchedule, Horizon};
use crate::model::{Dataset, FeatureKind, FeatureMap, Model};

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Teacher {
        #[serde(flatten)]
        spec: TeacherSpec,
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
}

impl DatasetSpec {
    pub fn load(&self, kind: FeatureKind) -> Result<Dataset> {
        match self {
            DatasetSpec::Teacher { spec, seed } => gen_teacher_student(kind, spec, *seed),
            DatasetSpec::Csv { path } => Dataset::read_csv(path),
        }
    }
}

fn default_stride() -> u64 {
    10
}

fn default_tracked() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub feature: FeatureKind,
    pub dataset: DatasetSpec,
    pub schedule: HyperSchedule,
    pub widths: Vec<usize>,
    pub variant: Variant,
    pub horizon: Horizon,
    #[serde(default = "default_tracked")]
    pub tracked: usize,
    pub seed: u64,
    #[serde(default = "default_stride")]
    pub stride: u64,
    /// Initialization law; the standard `1/d` law when absent.
    #[serde(default)]
    pub init: Option<InitLaw>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Teacher-student defaults: ReLU units, keep rate 0.7, and a base rate
    /// of 0.5 on the mean squared error, i.e. `tau0 = 2 * 0.5 / m` here.
    pub fn teacher_student() -> Self {
        let spec = TeacherSpec::reference();
        Self {
            feature: FeatureKind::ReluStandard,
            dataset: DatasetSpec::Teacher {
                spec,
                seed: 0,
            },
            schedule: HyperSchedule {
                tau0: 1.0 / spec.samples as f64,
                q0: 0.7,
                a: 0.0,
                b: 0.0,
            },
            widths: vec![200, 1000, 5000],
            variant: Variant::Dropout,
            horizon: Horizon::Steps(100),
            tracked: default_tracked(),
            seed: 0,
            stride: default_stride(),
            init: None,
            out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.widths.is_empty() {
            return Err(Error::param("width list is empty"));
        }
        if self.widths[0] == 0 || self.widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("widths must be positive and strictly increasing"));
        }
        match self.horizon {
            Horizon::Time(t) if !(t.is_finite() && t > 0.0) => {
                return Err(Error::param("time horizon must be positive"))
            }
            Horizon::Steps(0) => return Err(Error::param("step horizon must be positive")),
            _ => {}
        }
        if self.stride == 0 {
            return Err(Error::param("stride must be positive"));
        }
        if let DatasetSpec::Teacher { spec, .. } = &self.dataset {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn model(&self) -> Result<Model> {
        let data = self.dataset.load(self.feature)?;
        Model::new(FeatureMap::new(self.feature, data.input_dim()), data)
    }

    pub fn init_law(&self, input_dim: usize) -> InitLaw {
        self.init.unwrap_or_else(|| InitLaw::standard(input_dim))
    }
}
