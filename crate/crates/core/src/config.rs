//! JSON pipeline configuration.
//!
//! ```json
//! {
//!   "data_path": "responses.csv",
//!   "schema": [
//!     {"name": "Procrastination", "kind": "ordinal", "levels": [1, 2, 3, 4, 5]},
//!     {"name": "Height", "kind": "numeric"},
//!     {"name": "Smoking", "kind": "nominal", "levels": ["never smoked", "tried smoking"], "baseline": "never smoked"}
//!   ],
//!   "response": "Procrastination",
//!   "reverse_code_response": true,
//!   "derived": [{"type": "bmi", "name": "BMI", "weight": "Weight", "height": "Height"}],
//!   "predictors": ["BMI", "Smoking"],
//!   "m": 5,
//!   "seed": 42
//! }
//! ```
//!
//! Relative `data_path`s resolve against the directory of the config file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ColumnKind, LoadOptions, Schema};
use crate::imputation::{CoercionMode, EmOptions};
use crate::ologit::FitOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn default_missing_tokens() -> Vec<String> {
    vec![String::new(), "NA".to_string()]
}
fn default_m() -> usize {
    5
}
fn default_alpha() -> f64 {
    0.05
}
fn default_threshold() -> f64 {
    0.7
}
fn default_true() -> bool {
    true
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

/// A column computed from others before modelling; its sources are removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum DerivedVariable {
    /// weight (kg) / (height (cm) / 100)^2
    Bmi { name: String, weight: String, height: String },
}

impl DerivedVariable {
    pub fn name(&self) -> &str {
        match self {
            DerivedVariable::Bmi { name, .. } => name,
        }
    }

    pub fn sources(&self) -> Vec<&str> {
        match self {
            DerivedVariable::Bmi { weight, height, .. } => vec![weight.as_str(), height.as_str()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub data_path: PathBuf,
    pub schema: Schema,
    #[serde(default = "default_missing_tokens")]
    pub missing_tokens: Vec<String>,
    #[serde(default)]
    pub ignore_unknown_columns: bool,
    pub response: String,
    #[serde(default)]
    pub reverse_code_response: bool,
    #[serde(default)]
    pub derived: Vec<DerivedVariable>,
    /// Columns for the Spearman matrix. Defaults to the numeric and ordinal
    /// model inputs, with derived variables replaced by their sources.
    #[serde(default)]
    pub correlation_variables: Option<Vec<String>>,
    /// Columns tested against the response. Defaults to nominal predictors.
    #[serde(default)]
    pub chi_square_variables: Option<Vec<String>>,
    pub predictors: Vec<String>,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_threshold")]
    pub collinearity_threshold: f64,
    #[serde(default)]
    pub em: EmOptions,
    #[serde(default)]
    pub coercion: CoercionMode,
    #[serde(default)]
    pub fit: FitOptions,
    /// Repeat drop-and-refit until every retained predictor is significant.
    #[serde(default)]
    pub iterative_filter: bool,
    /// Condition imputations on the (fully observed) response.
    #[serde(default)]
    pub response_in_imputation_model: bool,
    #[serde(default = "default_true")]
    pub parallel: bool,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut cfg = Self::from_json_str(&text)?;
        if cfg.data_path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data_path = dir.join(&cfg.data_path);
            }
        }
        Ok(cfg)
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            missing_tokens: self.missing_tokens.iter().cloned().collect(),
            ignore_unknown_columns: self.ignore_unknown_columns,
        }
    }

    fn kind_of(&self, name: &str) -> Option<&ColumnKind> {
        self.schema.get(name).map(|c| &c.kind)
    }

    fn is_derived(&self, name: &str) -> bool {
        self.derived.iter().any(|d| d.name() == name)
    }

    /// Columns of the loaded table the model draws on, before derivation.
    pub fn source_columns(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.predictors {
            match self.derived.iter().find(|d| d.name() == p) {
                Some(d) => out.extend(d.sources().iter().map(|s| s.to_string())),
                None => out.push(p.clone()),
            }
        }
        let mut seen = HashSet::new();
        out.retain(|n| seen.insert(n.clone()));
        out
    }

    pub fn correlation_vars(&self) -> Vec<String> {
        match &self.correlation_variables {
            Some(v) => v.clone(),
            None => self
                .source_columns()
                .into_iter()
                .filter(|n| !matches!(self.kind_of(n), Some(ColumnKind::Nominal { .. })))
                .collect(),
        }
    }

    pub fn chi_square_vars(&self) -> Vec<String> {
        match &self.chi_square_variables {
            Some(v) => v.clone(),
            None => self
                .predictors
                .iter()
                .filter(|n| matches!(self.kind_of(n), Some(ColumnKind::Nominal { .. })))
                .cloned()
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        self.schema
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match self.kind_of(&self.response) {
            Some(ColumnKind::Ordinal { .. }) => {}
            Some(_) => return bad(format!("response '{}' must be ordinal", self.response)),
            None => return bad(format!("response '{}' is not in the schema", self.response)),
        }
        if self.predictors.iter().any(|p| *p == self.response) {
            return bad("the response cannot also be a predictor".into());
        }
        let mut seen = HashSet::new();
        for p in &self.predictors {
            if !seen.insert(p) {
                return bad(format!("predictor '{p}' is listed twice"));
            }
            if self.kind_of(p).is_none() && !self.is_derived(p) {
                return bad(format!("predictor '{p}' is neither declared nor derived"));
            }
        }
        for d in &self.derived {
            if self.schema.get(d.name()).is_some() {
                return bad(format!("derived variable '{}' clashes with a schema column", d.name()));
            }
            for s in d.sources() {
                if self.kind_of(s) != Some(&ColumnKind::Numeric) {
                    return bad(format!("'{s}' must be a numeric schema column to derive '{}'", d.name()));
                }
            }
        }
        for v in self.correlation_vars() {
            match self.kind_of(&v) {
                Some(ColumnKind::Nominal { .. }) => return bad(format!("'{v}' is nominal and cannot be rank-correlated")),
                None if !self.is_derived(&v) => return bad(format!("correlation variable '{v}' is unknown")),
                _ => {}
            }
        }
        for v in self.chi_square_vars() {
            match self.kind_of(&v) {
                Some(ColumnKind::Numeric) => return bad(format!("'{v}' is numeric; chi-square needs a categorical column")),
                None => return bad(format!("chi-square variable '{v}' is unknown")),
                _ => {}
            }
        }
        if self.m < 2 {
            return bad(format!("m must be at least 2, got {}", self.m));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.collinearity_threshold > 0.0 && self.collinearity_threshold <= 1.0) {
            return bad(format!("collinearity_threshold must lie in (0, 1], got {}", self.collinearity_threshold));
        }
        if !(self.em.ridge >= 0.0 && self.em.tol >= 0.0 && self.em.max_iter > 0) {
            return bad("em options need ridge >= 0, tol >= 0 and max_iter > 0".into());
        }
        if !(self.fit.tol > 0.0 && self.fit.max_iter > 0) {
            return bad("fit options need tol > 0 and max_iter > 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"{
        "data_path": "data.csv",
        "schema": [
            {"name": "y", "kind": "ordinal", "levels": [1, 2, 3]},
            {"name": "Weight", "kind": "numeric"},
            {"name": "Height", "kind": "numeric"},
            {"name": "Opera", "kind": "ordinal", "levels": [1, 2, 3, 4, 5]},
            {"name": "Smoking", "kind": "nominal", "levels": ["never", "tried"], "baseline": "never"}
        ],
        "response": "y",
        "derived": [{"type": "bmi", "name": "BMI", "weight": "Weight", "height": "Height"}],
        "predictors": ["Opera", "BMI", "Smoking"]
    }"#;

    #[test]
    fn defaults_and_screening_sets() {
        let cfg = PipelineConfig::from_json_str(BASIC).unwrap();
        assert_eq!(cfg.m, 5);
        assert_eq!(cfg.alpha, 0.05);
        assert_eq!(cfg.collinearity_threshold, 0.7);
        assert_eq!(cfg.em, EmOptions::default());
        assert!(cfg.parallel);
        assert_eq!(cfg.correlation_vars(), vec!["Opera", "Weight", "Height"]);
        assert_eq!(cfg.chi_square_vars(), vec!["Smoking"]);
        assert_eq!(cfg.load_options().missing_tokens.len(), 2);
    }

    #[test]
    fn invalid_configs() {
        let with = |from: &str, to: &str| BASIC.replace(from, to);
        let cases = [
            with(r#""response": "y""#, r#""response": "Opera", "m": 5"#).replace(r#""Opera", "BMI""#, r#""BMI""#),
            with(r#""predictors": ["Opera""#, r#""predictors": ["y""#),
            with(r#""predictors": ["Opera", "BMI", "Smoking"]"#, r#""predictors": ["Opera"], "m": 1"#),
            with(r#""predictors": ["Opera", "BMI", "Smoking"]"#, r#""predictors": ["Opera"], "alpha": 1.5"#),
            with(r#""predictors": ["Opera""#, r#""predictors": ["Nope""#),
            with(r#""response": "y""#, r#""response": "Weight""#),
            with(r#""weight": "Weight""#, r#""weight": "Smoking""#),
            with(r#""response": "y""#, r#""response": "y", "surprise": 1"#),
        ];
        assert!(PipelineConfig::from_json_str(&cases[0]).is_ok());
        for c in &cases[1..] {
            assert!(PipelineConfig::from_json_str(c).is_err(), "accepted: {c}");
        }
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, BASIC).unwrap();
        let cfg = PipelineConfig::from_file(&path).unwrap();
        assert_eq!(cfg.data_path, dir.path().join("data.csv"));
    }
}
