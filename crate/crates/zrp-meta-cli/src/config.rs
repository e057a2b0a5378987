//! Experiment configuration: parsing, validation and the content hash that names a run.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use zrp_meta::dynamics::Sampler;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerChoice {
    Stepwise,
    #[default]
    ValleyExit,
}

impl From<SamplerChoice> for Sampler {
    fn from(s: SamplerChoice) -> Self {
        match s {
            SamplerChoice::Stepwise => Sampler::Stepwise,
            SamplerChoice::ValleyExit => Sampler::ValleyExit,
        }
    }
}

fn default_eps() -> f64 {
    0.05
}
fn default_trials() -> usize {
    50
}
fn default_transitions() -> u64 {
    2000
}
fn default_paths() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Rate matrix `r(x, y)` of the walk on the sites.
    pub walk: Vec<Vec<f64>>,
    pub alpha: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Particle numbers of the sweep.
    pub n: Vec<u32>,
    /// Condensation sites of the two sides of the capacity problem.
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Overrides of the valley depth and tube width; both default to the relaxed sequences.
    #[serde(default)]
    pub ell: Option<u32>,
    #[serde(default)]
    pub pi: Option<u32>,
    /// Random test pairs for the variational bounds.
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_transitions")]
    pub mc_transitions: u64,
    /// Particle number of the Monte Carlo runs; defaults to the largest sweep value.
    #[serde(default)]
    pub mc_n: Option<u32>,
    #[serde(default = "default_paths")]
    pub fdd_paths: usize,
    /// Rescaled times of the projection law.
    #[serde(default)]
    pub fdd_times: Vec<f64>,
    #[serde(default)]
    pub sampler: SamplerChoice,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid config at `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot read config: {0}")]
    Unreadable(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid("<root>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let k = self.walk.len();
        if k < 2 {
            return Err(invalid("walk", "at least two sites are required"));
        }
        for (x, row) in self.walk.iter().enumerate() {
            if row.len() != k {
                return Err(invalid(format!("walk[{x}]"), format!("expected {k} entries, got {}", row.len())));
            }
            for (y, &r) in row.iter().enumerate() {
                if !r.is_finite() || r < 0.0 {
                    return Err(invalid(format!("walk[{x}][{y}]"), "rates must be finite and non-negative"));
                }
                if x == y && r != 0.0 {
                    return Err(invalid(format!("walk[{x}][{y}]"), "diagonal rates must be zero"));
                }
            }
        }
        if !(self.alpha > 2.0) || !self.alpha.is_finite() {
            return Err(invalid("alpha", format!("the interaction exponent must satisfy alpha > 2 (got {})", self.alpha)));
        }
        if !(self.eps > 0.0 && self.eps <= 1.0 / 16.0) {
            return Err(invalid("eps", format!("eps must lie in (0, 1/16] (got {})", self.eps)));
        }
        if self.n.is_empty() {
            return Err(invalid("n", "at least one particle number is required"));
        }
        if let Some(i) = self.n.iter().position(|&n| n < 2) {
            return Err(invalid(format!("n[{i}]"), "particle numbers must be at least 2"));
        }
        for (name, set) in [("a", &self.a), ("b", &self.b)] {
            if set.is_empty() {
                return Err(invalid(name, "site set must be non-empty"));
            }
            if let Some(i) = set.iter().position(|&s| s >= k) {
                return Err(invalid(format!("{name}[{i}]"), format!("site index must be below {k}")));
            }
        }
        if self.a.iter().any(|s| self.b.contains(s)) {
            return Err(invalid("b", "sites of a and b must be disjoint"));
        }
        if self.trials == 0 {
            return Err(invalid("trials", "must be positive"));
        }
        if self.mc_transitions < 100 {
            return Err(invalid("mc_transitions", "at least 100 valley transitions are required"));
        }
        if let Some(i) = self.fdd_times.iter().position(|&t| !(t >= 0.0) || !t.is_finite()) {
            return Err(invalid(format!("fdd_times[{i}]"), "times must be finite and non-negative"));
        }
        if self.fdd_times.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("fdd_times", "times must be sorted"));
        }
        if self.mc_n == Some(0) {
            return Err(invalid("mc_n", "must be positive"));
        }
        Ok(())
    }

    pub fn mc_n(&self) -> u32 {
        self.mc_n.unwrap_or_else(|| *self.n.iter().max().expect("validated"))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{"walk": [[0, 1], [1, 0]], "alpha": 3, "n": [4], "a": [0], "b": [1]}"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(c.eps, 0.05);
        assert_eq!(c.mc_n(), 4);
        assert_eq!(c.sampler, SamplerChoice::ValleyExit);
    }

    #[test]
    fn alpha_two_is_rejected_by_field() {
        let err = ExperimentConfig::parse(&BASE.replace("\"alpha\": 3", "\"alpha\": 2")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`alpha`") && msg.contains("alpha > 2"), "{msg}");
    }

    #[test]
    fn hash_depends_on_content_only() {
        let a = ExperimentConfig::parse(BASE).unwrap();
        let b = ExperimentConfig::parse(&BASE.replace(", ", ",")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed = 1;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn bad_rows_and_sets() {
        let e = ExperimentConfig::parse(&BASE.replace("[[0, 1], [1, 0]]", "[[0, 1], [1]]")).unwrap_err();
        assert!(e.to_string().contains("walk[1]"));
        let e = ExperimentConfig::parse(&BASE.replace("\"b\": [1]", "\"b\": [0]")).unwrap_err();
        assert!(e.to_string().contains("`b`"));
        assert!(ExperimentConfig::parse(&BASE.replace("}", ", \"extra\": 1}")).is_err());
    }
}
