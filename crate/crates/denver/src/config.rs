//! Run configuration: one TOML file aggregating every stage's settings,
//! with dotted-path command-line overrides and a DENVER_SEED escape hatch.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DenverError, Result};
use crate::optical_flow::FlowProviderConfig;
use crate::stage1::Stage1Config;
use crate::stage2::Stage2Config;
use crate::synth::SynthConfig;
use crate::vessel_prior::{PriorConfig, VesselnessConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Frame directory for real data; when absent the synth generator
    /// provides the input clip.
    pub input_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Global seed; propagated to the per-stage seeds at run time. The
    /// DENVER_SEED environment variable takes precedence.
    pub seed: u64,
    /// NSD tolerance in pixels for evaluation.
    pub metric_tau: f64,
    pub synth: SynthConfig,
    pub vesselness: VesselnessConfig,
    pub prior: PriorConfig,
    pub flow: FlowProviderConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input_dir: None,
            output_dir: PathBuf::from("out"),
            seed: 0,
            metric_tau: 2.0,
            synth: SynthConfig::default(),
            vesselness: VesselnessConfig::default(),
            prior: PriorConfig::default(),
            flow: FlowProviderConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DenverError::Config(format!("cannot read {}: {}", path.display(), e)))?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = text
            .parse()
            .map_err(|e| DenverError::Config(format!("config parse error: {}", e)))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e| DenverError::Config(format!("config field error: {}", e)))?;
        if let Ok(s) = std::env::var("DENVER_SEED") {
            cfg.seed = s
                .parse()
                .map_err(|_| DenverError::Config(format!("DENVER_SEED not an integer: {}", s)))?;
        }
        cfg.propagate_seed();
        Ok(cfg)
    }

    /// Derive the per-stage seeds from the global one so one knob controls
    /// the whole run.
    pub fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.stage1.seed = self.seed.wrapping_add(1);
        self.stage2.seed = self.seed.wrapping_add(2);
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(dir) = &self.input_dir {
            if !dir.is_dir() {
                return Err(DenverError::Config(format!(
                    "input_dir {} does not exist",
                    dir.display()
                )));
            }
        }
        if self.metric_tau <= 0.0 {
            return Err(DenverError::Config("metric_tau must be positive".into()));
        }
        self.synth.validate()?;
        self.vesselness.validate()?;
        self.prior.validate()?;
        self.flow.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| DenverError::Config(e.to_string()))
    }
}

/// Apply one `dotted.path=value` override onto the parsed TOML tree.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| DenverError::Config(format!("override '{}' is not key=value", spec)))?;
    let parsed: toml::Value = if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else {
        toml::Value::String(raw.to_string())
    };
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| DenverError::Config(format!("'{}' is not a table", path)))?;
        if i + 1 == segments.len() {
            table.insert(seg.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(seg.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text, &[]).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.stage2.lambda_prior, 0.5);
        assert_eq!(back.stage1.lambda_smooth, 0.02);
        assert_eq!(back.synth.size, 128);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::from_toml(
            "",
            &[
                "seed=9".into(),
                "stage2.total_steps=321".into(),
                "synth.noise_sigma=0.05".into(),
                "output_dir=elsewhere".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.stage2.total_steps, 321);
        assert!((cfg.synth.noise_sigma - 0.05).abs() < 1e-7);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
        // seed propagation
        assert_eq!(cfg.synth.seed, 9);
        assert_eq!(cfg.stage1.seed, 10);
        assert_eq!(cfg.stage2.seed, 11);
    }

    #[test]
    fn bad_override_and_bad_field_rejected() {
        assert!(RunConfig::from_toml("", &["no_equals_sign".into()]).is_err());
        assert!(RunConfig::from_toml("stage1 = 3\n", &[]).is_err());
        let err = RunConfig::from_toml("", &["metric_tau=-1".into()])
            .unwrap()
            .validate();
        assert!(err.is_err());
    }
}
