//! Run configuration: every knob of a training run in one TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ColumnNames;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub input: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    /// Minimum answers per student and per question kept by ingestion.
    pub min_count: usize,
    pub split: [f64; 3],
    /// `student,question,timestamp,correct,concept` header names.
    pub columns: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input: None,
            graph: None,
            min_count: 5,
            split: [0.8, 0.1, 0.1],
            columns: "student_id,question_id,timestamp,correct,concept_id".into(),
        }
    }
}

impl DataConfig {
    pub fn column_names(&self) -> Result<ColumnNames> {
        ColumnNames::parse(&self.columns)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let s = self.data.split;
        if s.iter().any(|&r| r.is_nan() || r <= 0.0) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split {s:?} must be positive and sum to 1")));
        }
        self.data.column_names()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::towers::QuestionMode;
    use proptest::prelude::*;

    #[test]
    fn defaults_match_the_reference_setup() {
        let c = RunConfig::default();
        assert_eq!(c.model.neighbor_len, 50);
        assert_eq!(c.model.tower.dim_edge, 64);
        assert_eq!(c.model.time_threshold, 86_400);
        assert_eq!(c.model.dropout, 0.1);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.batch_size, 2000);
        assert_eq!(c.data.split, [0.8, 0.1, 0.1]);
        assert_eq!(c.data.min_count, 5);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml("[train]\nlr = 0.5\n[model.tower]\nuse_multiset = false\n").unwrap();
        assert_eq!(c.train.lr, 0.5);
        assert!(!c.model.tower.use_multiset);
        assert_eq!(c.train.batch_size, 2000);
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 1\n").is_err());
    }

    #[test]
    fn rejects_bad_split() {
        let mut c = RunConfig::default();
        c.data.split = [0.5, 0.1, 0.1];
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn toml_round_trip(
            n in 1usize..300,
            d in 1usize..128,
            lr in 0.0f64..1.0,
            seed in 0u64..1_000_000,
            mi: bool,
            mode in 0usize..3,
            graph: bool,
        ) {
            let mut c = RunConfig::default();
            c.model.neighbor_len = n;
            c.model.tower.dim_edge = d;
            c.model.tower.use_multiset = mi;
            c.model.tower.question_mode = [QuestionMode::Dynamic, QuestionMode::QuestionIdEmbed, QuestionMode::ConceptIdEmbed][mode];
            c.train.lr = lr;
            c.train.seed = seed;
            if graph {
                c.data.graph = Some(PathBuf::from("data/g.bin"));
            }
            let back = RunConfig::from_toml(&c.to_toml()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
