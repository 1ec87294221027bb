//! TOML model configuration.
//!
//! ```toml
//! family = "gev"
//! response = "tmax"
//!
//! [fit]
//! tol = 1e-4
//! max_outer = 200
//!
//! [[parameters]]
//! linear = ["year"]
//! smooths = [{ kind = "cyclic-cubic", k = 12, column = "day", period = [0.0, 365.0] }]
//!
//! [[parameters]]
//! smooths = [{ kind = "thin-plate", k = 10, column = "year" }]
//!
//! [[parameters]]
//! ```
//!
//! One `[[parameters]]` table per linear predictor, in the family's order.
//! Every table gets an intercept unless it sets `intercept = false`.

use std::path::Path;

use gamem::design::{ModelSpec, ParameterSpec};
use gamem::em::EmSettings;
use gamem::families::Family;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{input, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub response: String,
    pub parameters: Vec<ParameterSpec>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

/// Overrides of the outer-iteration defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_outer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pll_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda0: Option<Vec<f64>>,
}

impl FitOptions {
    pub fn settings(&self) -> EmSettings {
        let mut s = EmSettings::default();
        if let Some(t) = self.tol {
            s.tol = t;
        }
        if let Some(m) = self.max_outer {
            s.max_outer = m;
        }
        if let Some(p) = self.pll_tol {
            s.pll_tol = p;
        }
        if let Some(l) = &self.lambda0 {
            s.lambda0 = l.clone();
        }
        s
    }
}

impl ModelConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: ModelConfig = toml::from_str(text).map_err(|e| input(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| input(format!("{}: {e}", path.display())))
    }

    fn validate(&self) -> Result<()> {
        let dim = self.family.dim();
        if self.parameters.len() != dim {
            return Err(input(format!(
                "family `{}` needs {dim} [[parameters]] tables, found {}",
                self.family,
                self.parameters.len()
            )));
        }
        if let Some(t) = self.fit.tol {
            if !(t > 0.0) {
                return Err(input(format!("fit.tol must be positive, got {t}")));
            }
        }
        if self.fit.max_outer == Some(0) {
            return Err(input("fit.max_outer must be at least 1"));
        }
        if self.threads == Some(0) {
            return Err(input("threads must be at least 1"));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            family: self.family,
            response: self.response.clone(),
            parameters: self.parameters.clone(),
        }
    }

    /// Data columns the model reads, response first, without repeats.
    pub fn columns(&self) -> Vec<String> {
        let mut cols = vec![self.response.clone()];
        for p in &self.parameters {
            let used = p
                .linear
                .iter()
                .chain(p.smooths.iter().map(|s| &s.column))
                .chain(p.offset.iter());
            for c in used {
                if !cols.contains(c) {
                    cols.push(c.clone());
                }
            }
        }
        cols
    }
}

/// SHA-256 of the model structure (family, response, terms) as canonical JSON.
pub fn fingerprint(spec: &ModelSpec) -> String {
    let json = serde_json::to_vec(spec).expect("model spec serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use gamem::basis::BasisKind;

    const GEV: &str = r#"
family = "gev"
response = "tmax"

[fit]
tol = 1e-5

[[parameters]]
linear = ["year"]
smooths = [{ kind = "cyclic-cubic", k = 12, column = "day", period = [0.0, 365.0] }]

[[parameters]]
smooths = [{ kind = "thin-plate", k = 10, column = "year" }]

[[parameters]]
"#;

    #[test]
    fn parses_the_documented_layout() {
        let c = ModelConfig::parse(GEV).unwrap();
        assert_eq!(c.family, Family::Gev);
        assert_eq!(c.parameters[0].smooths[0].kind, BasisKind::CyclicCubic);
        assert_eq!(c.parameters[0].smooths[0].period, Some((0.0, 365.0)));
        assert!(c.parameters[2].intercept && c.parameters[2].smooths.is_empty());
        assert_eq!(c.fit.settings().tol, 1e-5);
        assert_eq!(c.columns(), vec!["tmax", "year", "day"]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ModelConfig::parse(&GEV.replace("tol = 1e-5", "tolerance = 1e-5")).is_err());
        assert!(ModelConfig::parse(&GEV.replace("k = 10,", "k = 10, knots = 3,")).is_err());
        assert!(ModelConfig::parse(&format!("colour = 1\n{GEV}")).is_err());
    }

    #[test]
    fn block_count_must_match_family() {
        let two = GEV.trim_end().trim_end_matches("[[parameters]]");
        assert!(ModelConfig::parse(two).is_err());
    }

    #[test]
    fn fingerprint_tracks_model_structure_only() {
        let a = ModelConfig::parse(GEV).unwrap();
        let b = ModelConfig::parse(&GEV.replace("tol = 1e-5", "tol = 1e-3")).unwrap();
        let c = ModelConfig::parse(&GEV.replace("k = 12", "k = 11")).unwrap();
        assert_eq!(fingerprint(&a.model_spec()), fingerprint(&b.model_spec()));
        assert_ne!(fingerprint(&a.model_spec()), fingerprint(&c.model_spec()));
        assert_eq!(fingerprint(&a.model_spec()).len(), 64);
    }
}
