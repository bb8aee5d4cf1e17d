//! Run configuration read from a flat TOML file.
//!
//! ```toml
//! train_start = "2000-01-01"
//! train_end = "2005-12-31"
//! test_start = "2006-01-01"
//! test_end = "2007-12-31"
//! seed = 7
//! hidden = [30, 20]
//! ```
//!
//! Unknown keys are rejected. Missing keys take the defaults below.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calibration::{Hyper, Spans};
use crate::error::{Error, Result};
use crate::nn::TrainConfig;
use crate::qm::{QmConfig, QmMode, DEFAULT_KNOTS};
use crate::spqr::{SpqrConfig, DEFAULT_BASIS_SIZE, DEFAULT_HIDDEN, DEFAULT_PADDING};
use crate::vecchia::{Covariate, DEFAULT_NEIGHBORS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train_start: Option<NaiveDate>,
    pub train_end: Option<NaiveDate>,
    pub test_start: Option<NaiveDate>,
    pub test_end: Option<NaiveDate>,
    /// Allows the test span to overlap the training span.
    pub in_sample: bool,
    pub basis_size: usize,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    pub patience: usize,
    pub padding: f64,
    pub neighbors: usize,
    pub covariates: Vec<String>,
    pub qm_mode: String,
    pub qm_knots: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            train_start: None,
            train_end: None,
            test_start: None,
            test_end: None,
            in_sample: false,
            basis_size: DEFAULT_BASIS_SIZE,
            hidden: DEFAULT_HIDDEN.to_vec(),
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            validation_fraction: t.validation_fraction,
            patience: t.patience,
            padding: DEFAULT_PADDING,
            neighbors: DEFAULT_NEIGHBORS,
            covariates: Vec::new(),
            qm_mode: "piecewise".into(),
            qm_knots: DEFAULT_KNOTS,
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper()?.spqr.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.qm()?;
        if self.basis_size < 3 {
            return Err(Error::Config(format!("basis_size {} must be at least 3", self.basis_size)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.padding) {
            return Err(Error::Config(format!("padding {} outside [0, 0.5)", self.padding)));
        }
        let pair = |a: Option<NaiveDate>, b: Option<NaiveDate>, name: &str| -> Result<()> {
            match (a, b) {
                (Some(a), Some(b)) if a > b => Err(Error::Config(format!("{name} span starts after it ends"))),
                (Some(_), None) | (None, Some(_)) => {
                    Err(Error::Config(format!("{name}_start and {name}_end must be given together")))
                }
                _ => Ok(()),
            }
        };
        pair(self.train_start, self.train_end, "train")?;
        pair(self.test_start, self.test_end, "test")?;
        if let (Some(a), Some(b), Some(c), Some(d)) = (self.train_start, self.train_end, self.test_start, self.test_end) {
            if !self.in_sample && c <= b && a <= d {
                return Err(Error::Config(
                    "train and test spans overlap; set in_sample = true to allow this".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn hyper(&self) -> Result<Hyper> {
        let covariates = self
            .covariates
            .iter()
            .map(|c| Covariate::parse(c).ok_or_else(|| Error::Config(format!("unknown covariate {c:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Hyper {
            spqr: SpqrConfig {
                basis_size: self.basis_size,
                hidden: self.hidden.clone(),
                train: TrainConfig {
                    batch_size: self.batch_size,
                    learning_rate: self.learning_rate,
                    max_epochs: self.max_epochs,
                    validation_fraction: self.validation_fraction,
                    patience: self.patience,
                    seed: self.seed,
                },
                padding: self.padding,
                neutral_inputs: Vec::new(),
            },
            neighbors: self.neighbors,
            covariates,
            seed: self.seed,
        })
    }

    pub fn qm(&self) -> Result<QmConfig> {
        let mode = QmMode::parse(&self.qm_mode)
            .ok_or_else(|| Error::Config(format!("qm_mode must be linear or piecewise, got {:?}", self.qm_mode)))?;
        if self.qm_knots < 2 {
            return Err(Error::Config(format!("qm_knots {} must be at least 2", self.qm_knots)));
        }
        Ok(QmConfig {
            mode,
            knots: self.qm_knots,
        })
    }

    /// Spans resolved against a data calendar. Without explicit spans the
    /// whole record is used for both training and testing.
    pub fn spans(&self, first: NaiveDate, last: NaiveDate) -> Spans {
        Spans {
            train: (self.train_start.unwrap_or(first), self.train_end.unwrap_or(last)),
            test: (self.test_start.unwrap_or(first), self.test_end.unwrap_or(last)),
        }
    }
}
