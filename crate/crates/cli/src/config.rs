//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use kao_core::aggregation::Rule;
use kao_core::harness::replication::{default_grid, study_rules, SyntheticSpec};
use kao_core::harness::{config_hash, BankTemplate, RateSpec, RuleSpec};
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Independent simulated runs, seeded from `seed`.
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
    #[serde(default)]
    pub experts: ExpertsConfig,
    #[serde(default)]
    pub aggregation: AggregationConfig,
}

fn default_seed() -> u64 {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_replications() -> usize {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: default_seed(),
            out: default_out(),
            replications: default_replications(),
            synthetic: SyntheticSpec::default(),
            experts: ExpertsConfig::default(),
            aggregation: AggregationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    /// Kalman experts on covariate subsets (the `synthetic` section).
    Subsets,
    /// Kalman corrections of the forecast columns.
    Correction,
    /// AR(1) corrections of the forecast columns.
    Ar1,
    /// The forecast columns as they are.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertsConfig {
    pub kind: ExpertKind,
    /// Size of the simulated forecaster panel for the correction pipelines.
    pub forecasters: usize,
    /// Response column of an input CSV.
    pub response: String,
    /// Rescale input design columns to `[0, 1]`.
    pub normalize: bool,
    /// Training share for the correction pipelines.
    pub split_fraction: f64,
    /// Starting parameters of corrected experts.
    pub template: BankTemplate,
    pub em_iter: usize,
    pub em_tol: f64,
}

impl Default for ExpertsConfig {
    fn default() -> Self {
        Self {
            kind: ExpertKind::Subsets,
            forecasters: 6,
            response: "y".into(),
            normalize: false,
            split_fraction: 0.5,
            template: BankTemplate {
                q: 0.01,
                p0: 1e4,
                sigma2: 1.0,
                theta0: 0.0,
            },
            em_iter: 50,
            em_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMode {
    /// Fixed-rate KAO rules tuned on `grid` in hindsight.
    Grid,
    /// Fixed-rate KAO rules use their theoretical rate fitted on the burn-in.
    Theory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub rules: Vec<String>,
    pub rate: RateMode,
    pub grid: Vec<f64>,
    /// Fixed rate for KAO-MS, KAO-GRAD, KAO-ML and EWA; overrides `rate`.
    pub eta: Option<f64>,
    /// Calibration steps, excluded from every reported metric.
    pub burn_in: usize,
    pub gradient_trick: bool,
    /// Replace each expert's variance by its burn-in mean squared residual.
    pub sigma2_from_burn_in: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            rules: Rule::ALL.iter().map(|r| r.name().to_string()).collect(),
            rate: RateMode::Grid,
            grid: default_grid(),
            eta: None,
            burn_in: 100,
            gradient_trick: false,
            sigma2_from_burn_in: false,
        }
    }
}

impl AggregationConfig {
    pub fn parse_rules(names: &[String]) -> Result<Vec<Rule>, Failure> {
        if names.is_empty() {
            return Err(Failure::usage(format!(
                "no rules given; valid rules: {}",
                Rule::valid_names()
            )));
        }
        names
            .iter()
            .map(|n| n.trim().parse::<Rule>().map_err(|e| Failure::usage(e.to_string())))
            .collect()
    }

    /// One spec per configured rule.
    pub fn rule_specs(&self) -> Result<Vec<RuleSpec>, Failure> {
        let rules = Self::parse_rules(&self.rules)?;
        let base = study_rules(self.burn_in, &self.grid);
        Ok(rules
            .into_iter()
            .map(|rule| {
                let mut spec = match self.rate {
                    RateMode::Grid => base
                        .iter()
                        .find(|s| s.rule == rule)
                        .cloned()
                        .expect("every rule has a spec"),
                    RateMode::Theory => RuleSpec::default_for(rule, self.burn_in),
                };
                if let Some(eta) = self.eta {
                    if matches!(rule, Rule::KaoMs | Rule::KaoGrad | Rule::KaoMl | Rule::Ewa) {
                        spec.rate = RateSpec::Fixed(eta);
                    }
                }
                spec.gradient_trick = self.gradient_trick && rule.is_baseline();
                spec
            })
            .collect())
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.replications == 0 {
            return Err("replications must be >= 1".into());
        }
        self.synthetic.validate().map_err(|e| e.to_string())?;
        let e = &self.experts;
        if !(e.split_fraction > 0.0 && e.split_fraction < 1.0) {
            return Err(format!("split_fraction must be in (0, 1), got {}", e.split_fraction));
        }
        if e.forecasters == 0 {
            return Err("experts.forecasters must be >= 1".into());
        }
        if e.em_iter == 0 {
            return Err("experts.em_iter must be >= 1".into());
        }
        let a = &self.aggregation;
        if a.rate == RateMode::Grid && a.grid.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err("grid rates must be positive".into());
        }
        if a.rate == RateMode::Grid && a.grid.is_empty() {
            return Err("grid is empty".into());
        }
        if let Some(eta) = a.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(format!("eta must be positive, got {eta}"));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let mut cfg = ExperimentConfig::default();
        cfg.aggregation.eta = Some(0.125);
        cfg.synthetic.q_off = 0.1 + 0.2;
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn minimal_file_takes_defaults() {
        let cfg = ExperimentConfig::from_toml("schema_version = 1\n").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        assert!(ExperimentConfig::from_toml("schema_version = 1\nlearning_rate = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("schema_version = 1\n[aggregation]\netaa = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("schema_version = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("seed = 3\n").is_err());
    }

    #[test]
    fn bad_rule_names_are_usage_errors() {
        let a = AggregationConfig {
            rules: vec!["kao-ms".into(), "hedge".into()],
            ..AggregationConfig::default()
        };
        match a.rule_specs() {
            Err(Failure::Usage(msg)) => assert!(msg.contains("kao-ada") && msg.contains("hedge")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn theory_mode_and_fixed_rate() {
        let a = AggregationConfig {
            rules: vec!["kao-ms".into(), "boa".into()],
            rate: RateMode::Theory,
            eta: Some(0.5),
            gradient_trick: true,
            ..AggregationConfig::default()
        };
        let specs = a.rule_specs().unwrap();
        assert_eq!(specs[0].rate, RateSpec::Fixed(0.5));
        assert!(!specs[0].gradient_trick);
        assert_eq!(specs[1].rate, RateSpec::Adaptive);
        assert!(specs[1].gradient_trick);
    }
}
