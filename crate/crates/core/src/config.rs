//! Engine configuration: one TOML document, two environment overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::export::{InstructionTemplate, SplitSpec};
use crate::inner::InnerConfig;
use crate::outer::{Direction, RoundConfig, WeakMode, WeakPolicy};
use crate::review::RemoteConfig;

pub const ENV_ENDPOINT: &str = "DATAEVOLVER_REVIEWER_ENDPOINT";
pub const ENV_PARALLELISM: &str = "DATAEVOLVER_PARALLELISM";

pub const DEMO_CONFIG: &str = include_str!("../configs/demo.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error("config override {var}: {message}")]
    Override { var: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogConfig {
    pub objects: usize,
    #[serde(default = "default_prefix")]
    pub prefix: String,
}

fn default_prefix() -> String {
    "obj".into()
}

/// Defect distribution for generated requests. Magnitudes are drawn
/// uniformly up to the stated maxima.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorConfig {
    /// Probability that a request carries any defect.
    pub defect_rate: f64,
    pub max_yaw_error_deg: f64,
    pub max_grounding_m: f64,
    pub max_exposure_error: f64,
    /// Relative; the scale error factor is drawn from [1-x, 1+x].
    pub max_scale_error: f64,
    /// Probability of an uncorrectable blur defect.
    pub blur_rate: f64,
    pub max_blur: f64,
    /// Probability that the asset itself is unusable.
    pub nonviable_rate: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            defect_rate: 0.6,
            max_yaw_error_deg: 25.0,
            max_grounding_m: 0.1,
            max_exposure_error: 0.5,
            max_scale_error: 0.3,
            blur_rate: 0.05,
            max_blur: 1.0,
            nonviable_rate: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReviewerConfig {
    Scripted,
    Remote(RemoteConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    pub catalog: CatalogConfig,
    #[serde(default)]
    pub simulator: SimulatorConfig,
    pub reviewer: ReviewerConfig,
    #[serde(default)]
    pub inner: InnerConfig,
    /// Used for every round when `schedule` is empty.
    pub round: RoundConfig,
    /// Round `r` uses entry `r-1`; rounds past the end reuse the last entry.
    #[serde(default)]
    pub schedule: Vec<RoundConfig>,
    pub weak: WeakPolicy,
    pub split: SplitSpec,
    #[serde(default)]
    pub export: InstructionTemplate,
}

fn default_parallelism() -> usize {
    4
}

impl EngineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: EngineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn demo() -> Self {
        Self::parse(DEMO_CONFIG).expect("bundled demo config parses")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if self.catalog.objects == 0 {
            return bad("catalog.objects must be at least 1".into());
        }
        let s = &self.simulator;
        for (name, p) in [
            ("defect_rate", s.defect_rate),
            ("blur_rate", s.blur_rate),
            ("nonviable_rate", s.nonviable_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("simulator.{name} must be in [0, 1]"));
            }
        }
        for (name, v) in [
            ("max_yaw_error_deg", s.max_yaw_error_deg),
            ("max_grounding_m", s.max_grounding_m),
            ("max_exposure_error", s.max_exposure_error),
            ("max_blur", s.max_blur),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("simulator.{name} must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&s.max_scale_error) {
            return bad("simulator.max_scale_error must be in [0, 1)".into());
        }
        if let ReviewerConfig::Remote(r) = &self.reviewer {
            if r.endpoint.trim().is_empty() {
                return bad("reviewer.endpoint is empty".into());
            }
        }
        self.inner.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for rc in std::iter::once(&self.round).chain(&self.schedule) {
            rc.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if let WeakMode::BelowMeanDelta { delta } = self.weak.mode {
            if !(delta >= 0.0) {
                return bad("weak.delta must be non-negative".into());
            }
        }
        let needed = self.split.n_train_objects + self.split.n_val_objects + self.split.n_test_objects;
        if needed > self.catalog.objects {
            return bad(format!(
                "split needs {needed} objects but the catalog has {}",
                self.catalog.objects
            ));
        }
        Ok(())
    }

    pub fn round_config(&self, round_id: u32) -> &RoundConfig {
        if self.schedule.is_empty() {
            return &self.round;
        }
        let i = (round_id.max(1) as usize - 1).min(self.schedule.len() - 1);
        &self.schedule[i]
    }

    pub fn catalog(&self) -> Vec<String> {
        (0..self.catalog.objects)
            .map(|i| format!("{}{:03}", self.catalog.prefix, i))
            .collect()
    }

    /// Apply `DATAEVOLVER_REVIEWER_ENDPOINT` and `DATAEVOLVER_PARALLELISM`
    /// from the given lookup.
    pub fn with_overrides(
        mut self,
        get: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        if let Some(p) = get(ENV_PARALLELISM) {
            let n: usize = p.trim().parse().map_err(|_| ConfigError::Override {
                var: ENV_PARALLELISM,
                message: format!("`{p}` is not a positive integer"),
            })?;
            if n == 0 {
                return Err(ConfigError::Override {
                    var: ENV_PARALLELISM,
                    message: "must be at least 1".into(),
                });
            }
            self.parallelism = n;
            if let ReviewerConfig::Remote(r) = &mut self.reviewer {
                r.parallelism = n;
            }
        }
        if let Some(endpoint) = get(ENV_ENDPOINT).filter(|e| !e.trim().is_empty()) {
            self.reviewer = match self.reviewer {
                ReviewerConfig::Remote(mut r) => {
                    r.endpoint = endpoint;
                    ReviewerConfig::Remote(r)
                }
                ReviewerConfig::Scripted => ReviewerConfig::Remote(RemoteConfig {
                    endpoint,
                    timeout_ms: 30_000,
                    retries: 2,
                    parallelism: self.parallelism,
                }),
            };
        }
        self.validate()?;
        Ok(self)
    }

    pub fn from_env(self) -> Result<Self, ConfigError> {
        self.with_overrides(|k| std::env::var(k).ok())
    }
}

impl Default for WeakPolicy {
    fn default() -> Self {
        WeakPolicy {
            mode: WeakMode::BelowMeanDelta { delta: 0.0 },
            metric: "psnr".into(),
            direction: Direction::Higher,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_parses_with_four_stage_schedule() {
        let cfg = EngineConfig::demo();
        assert_eq!(cfg.catalog().len(), 50);
        let stages: Vec<_> = (1..=4).map(|r| cfg.round_config(r).stage()).collect();
        assert_eq!(stages, vec![Some(0), Some(1), Some(2), Some(3)]);
        assert_eq!(cfg.round_config(9).stage(), Some(3));
        let again = EngineConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_abort() {
        let text = format!("surprise = 1\n{DEMO_CONFIG}");
        assert!(EngineConfig::parse(&text).is_err());
        let text = DEMO_CONFIG.replace("prompt_version", "prompt_versoin");
        assert!(matches!(EngineConfig::parse(&text), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn overrides() {
        let cfg = EngineConfig::demo()
            .with_overrides(|k| match k {
                ENV_PARALLELISM => Some("3".into()),
                ENV_ENDPOINT => Some("http://127.0.0.1:9/review".into()),
                _ => None,
            })
            .unwrap();
        assert_eq!(cfg.parallelism, 3);
        match cfg.reviewer {
            ReviewerConfig::Remote(r) => {
                assert_eq!(r.endpoint, "http://127.0.0.1:9/review");
                assert_eq!(r.parallelism, 3);
            }
            _ => panic!("expected remote"),
        }
        assert!(EngineConfig::demo()
            .with_overrides(|k| (k == ENV_PARALLELISM).then(|| "zero".into()))
            .is_err());
    }

    #[test]
    fn undefined_chain_refused() {
        let mut cfg = EngineConfig::demo();
        cfg.round.feedback_enabled = false;
        cfg.round.inner_gate.enabled = false;
        cfg.round.dual_gate.enabled = true;
        assert!(cfg.validate().is_err());
        cfg.round.allow_undefined_chain = true;
        assert!(cfg.validate().is_ok());
    }
}
