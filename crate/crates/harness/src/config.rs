//! Experiment configuration.
//!
//! A config file is a flat list of `key = value` lines; `#` starts a
//! comment. Values are strings (`"..."`), numbers, booleans, or lists
//! (`[1, 2, 3]`). Unknown keys are rejected. Every key has a default, so an
//! empty file is a valid (smoke-test sized) config.
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `experiment` | `allocation`, `hard-ratio`, `cr-cdf` or `xi-sweep` | `cr-cdf` |
//! | `policies` | policy ids (see below) | `["d-gfq", "r-gfq"]` |
//! | `instance` | `synthetic`, `hard-gfq`, `hard-pf`, `file` or `trace` | `synthetic` |
//! | `budget` | `B` | 100 |
//! | `theta` | per-class fluctuation ratios, non-decreasing | `[5, 10, 15]` |
//! | `quotas` | per-class quotas (empty = none) | `[5, 5, 5]` |
//! | `agents` | stream length `T` for synthetic instances | 500 |
//! | `instances` | number of synthetic instances | 20 |
//! | `label_model` | `single` or `multi` | `single` |
//! | `label_p` | extra-label probability for `multi` | 0.3 |
//! | `delta` | grid step of hard instances | 0.1 |
//! | `prefix_stride` | score every n-th prefix in `hard-ratio` | 1 |
//! | `b_frac` | efficiency weight of `r-pf` / `frac-pf` | 0.0 |
//! | `epsilon` | LiLA trust parameter | 1.25 |
//! | `xi` | adversarial probability of advice | 0.0 |
//! | `xi_grid`, `eps_grid` | sweep grids of `xi-sweep` | `[0, 0.25, 0.5, 0.75, 1]`, `[0.25, 1.25]` |
//! | `mix` | LiLA mixing: `per-run` or `per-step` | `per-run` |
//! | `trials` | Monte Carlo trials per evaluation | 1000 |
//! | `seed` | master seed | 0 |
//! | `path` | instance file (`file`) or CSV trace (`trace`) | — |
//! | `value_column`, `class_column`, `units_column` | trace columns | `value`, `class`, none |
//! | `value_scale`, `value_offset` | trace value map | 1, 0 |
//! | `skip_bad` | drop unmappable trace rows instead of failing | false |
//!
//! Policy ids: `d-gfq`, `r-gfq`, `frac-gfq`, `r-pf` (weight `b_frac`),
//! `frac-pf`, `beta-pf` (`r-pf` with weight 0), `alpha-cr` (`r-pf` with
//! weight 1), `lila-pf`, `lila-gfq`, `adv-pf`, `adv-gfq` (the advice alone).

use std::path::Path;

use omcs::lila::MixMode;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Allocation,
    HardRatio,
    CrCdf,
    XiSweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceSource {
    Synthetic,
    HardGfq,
    HardPf,
    File,
    Trace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelChoice {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub policies: Vec<String>,
    pub instance: InstanceSource,
    pub budget: usize,
    pub theta: Vec<f64>,
    pub quotas: Vec<usize>,
    pub agents: usize,
    pub instances: usize,
    pub label_model: LabelChoice,
    pub label_p: f64,
    pub delta: f64,
    pub prefix_stride: usize,
    pub b_frac: f64,
    pub epsilon: f64,
    pub xi: f64,
    pub xi_grid: Vec<f64>,
    pub eps_grid: Vec<f64>,
    pub mix: MixMode,
    pub trials: usize,
    pub seed: u64,
    pub path: Option<String>,
    pub value_column: String,
    pub class_column: String,
    pub units_column: Option<String>,
    pub value_scale: f64,
    pub value_offset: f64,
    pub skip_bad: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::CrCdf,
            policies: vec!["d-gfq".into(), "r-gfq".into()],
            instance: InstanceSource::Synthetic,
            budget: 100,
            theta: vec![5.0, 10.0, 15.0],
            quotas: vec![5, 5, 5],
            agents: 500,
            instances: 20,
            label_model: LabelChoice::Single,
            label_p: 0.3,
            delta: 0.1,
            prefix_stride: 1,
            b_frac: 0.0,
            epsilon: 1.25,
            xi: 0.0,
            xi_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            eps_grid: vec![0.25, 1.25],
            mix: MixMode::PerRun,
            trials: 1000,
            seed: 0,
            path: None,
            value_column: "value".into(),
            class_column: "class".into(),
            units_column: None,
            value_scale: 1.0,
            value_offset: 0.0,
            skip_bad: false,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.prefix_stride == 0 {
            return bad("prefix_stride must be at least 1".into());
        }
        if !self.quotas.is_empty() && self.quotas.len() != self.theta.len() {
            return bad(format!(
                "{} quotas for {} classes",
                self.quotas.len(),
                self.theta.len()
            ));
        }
        if matches!(self.instance, InstanceSource::File | InstanceSource::Trace) && self.path.is_none() {
            return bad("instance source needs `path`".into());
        }
        if self.policies.is_empty() && self.experiment != ExperimentKind::XiSweep {
            return bad("no policies listed".into());
        }
        Ok(())
    }

    /// Config as a compact JSON object, embedded in every report.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_grammar() {
        let cfg = ExperimentConfig::parse(
            r#"
            # small run
            experiment = "hard-ratio"
            policies = ["d-gfq", "r-gfq"]
            instance = "hard-gfq"
            budget = 4
            theta = [2, 4]
            quotas = [1, 1]
            trials = 500   # per prefix
            seed = 9
            mix = "per-step"
            skip_bad = true
            "#,
        )
        .unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::HardRatio);
        assert_eq!(cfg.theta, vec![2.0, 4.0]);
        assert_eq!(cfg.mix, MixMode::PerStep);
        assert_eq!(cfg.agents, 500);
        assert!(cfg.skip_bad);
    }

    #[test]
    fn empty_is_default() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn rejects_unknown_and_inconsistent() {
        assert!(ExperimentConfig::parse("bogus = 1").is_err());
        assert!(ExperimentConfig::parse("quotas = [1]").is_err());
        assert!(ExperimentConfig::parse("instance = \"trace\"").is_err());
        assert!(ExperimentConfig::parse("trials = 0").is_err());
    }

    #[test]
    fn json_roundtrip() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
