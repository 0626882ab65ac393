//! The full run file: every trainer field plus a `[data]` section.

use std::path::Path;

use lorac::data::{gen_synthetic_draw, Dataset, SyntheticSpec};
use lorac::trainer::{apply_override, parse_table, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// An `LDSET` file; empty selects the synthetic generator.
    pub path: String,
    pub n_classes: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub spread: f64,
    /// Per-class fraction used for pre-training; the rest is held out.
    pub train_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            path: String::new(),
            n_classes: s.n_classes,
            per_class: s.per_class,
            d_in: s.d_in,
            spread: s.spread,
            train_fraction: 0.8,
        }
    }
}

impl DataSection {
    /// Loads or generates the dataset. Synthetic data uses the run seed.
    pub fn dataset(&self, seed: u64, base: &Path) -> CliResult<Dataset> {
        if self.path.is_empty() {
            let spec = SyntheticSpec {
                n_classes: self.n_classes,
                per_class: self.per_class,
                d_in: self.d_in,
                spread: self.spread,
                seed,
            };
            Ok(gen_synthetic_draw(&spec, 0)?)
        } else {
            let p = base.join(&self.path);
            Dataset::load(&p).map_err(|e| CliError::usage(format!("cannot read dataset {}: {e}", p.display())))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataSection,
}

impl RunConfig {
    pub fn parse<S: AsRef<str>>(text: &str, overrides: &[S]) -> CliResult<Self> {
        let mut table = parse_table(text)?;
        for o in overrides {
            apply_override(&mut table, o.as_ref())?;
        }
        let data = match table.remove("data") {
            None => DataSection::default(),
            Some(v) => v.try_into().map_err(|e: toml::de::Error| {
                CliError::usage(format!("invalid config `data`: {}", e.message().trim_end()))
            })?,
        };
        if !(0.0..=1.0).contains(&data.train_fraction) {
            return Err(CliError::usage("invalid config `data.train_fraction`: must lie in [0, 1]"));
        }
        Ok(Self {
            train: TrainConfig::from_table(table)?,
            data,
        })
    }

    pub fn load<S: AsRef<str>>(path: &Path, overrides: &[S]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    /// Resolved TOML; parsing it reproduces this config.
    pub fn to_toml(&self) -> String {
        let mut wrapper = toml::Table::new();
        wrapper.insert(
            "data".into(),
            toml::Value::try_from(&self.data).expect("data section is representable"),
        );
        format!("{}\n{}", self.train.to_toml(), toml::to_string(&wrapper).expect("table renders"))
    }
}
