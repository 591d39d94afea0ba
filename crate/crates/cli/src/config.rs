use std::path::{Path, PathBuf};

use keyward::adversary::AttackConfig;
use keyward::experiments::{
    CollabConfig, DataSource, KeyStatsConfig, LossCompareConfig, SharedClassConfig, SoftmaxOracleConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Collab,
    Attack,
    KeyStats,
    SoftmaxOracle,
    SharedClass,
    GradCheck,
    LossCompare,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Collab => "collab",
            Experiment::Attack => "attack",
            Experiment::KeyStats => "key-stats",
            Experiment::SoftmaxOracle => "softmax-oracle",
            Experiment::SharedClass => "shared-class",
            Experiment::GradCheck => "grad-check",
            Experiment::LossCompare => "loss-compare",
        }
    }

    fn uses_data(self) -> bool {
        matches!(self, Experiment::Collab | Experiment::Attack | Experiment::LossCompare)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub n_instances: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { n_instances: 50, seed: 0 }
    }
}

/// Whole config file. Only the section of the selected experiment is used;
/// the others may be present so one file can drive several subcommands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collab: Option<CollabConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_stats: Option<KeyStatsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub softmax_oracle: Option<SoftmaxOracleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_class: Option<SharedClassConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_check: Option<GradCheckConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_compare: Option<LossCompareConfig>,
}

impl ExperimentConfig {
    /// Keeps only what `exp` needs and fills every default in, so the result
    /// reruns identically when fed back as a config file.
    pub fn resolve(self, exp: Experiment, out_dir: PathBuf) -> Result<ExperimentConfig, String> {
        if let Some(declared) = self.experiment {
            if declared != exp {
                return Err(format!(
                    "experiment: config declares `{}` but the `{}` subcommand was run",
                    declared.name(),
                    exp.name()
                ));
            }
        }
        let mut out = ExperimentConfig { experiment: Some(exp), out_dir: Some(out_dir), ..ExperimentConfig::default() };
        if exp.uses_data() {
            out.data = Some(self.data.unwrap_or_else(|| match exp {
                Experiment::LossCompare => DataSource::mnist("data/mnist"),
                _ => DataSource::default(),
            }));
        }
        match exp {
            Experiment::Collab => out.collab = Some(self.collab.unwrap_or_default()),
            Experiment::Attack => out.attack = Some(self.attack.unwrap_or_default()),
            Experiment::KeyStats => out.key_stats = Some(self.key_stats.unwrap_or_default()),
            Experiment::SoftmaxOracle => out.softmax_oracle = Some(self.softmax_oracle.unwrap_or_default()),
            Experiment::SharedClass => out.shared_class = Some(self.shared_class.unwrap_or_default()),
            Experiment::GradCheck => out.grad_check = Some(self.grad_check.unwrap_or_default()),
            Experiment::LossCompare => out.loss_compare = Some(self.loss_compare.unwrap_or_default()),
        }
        Ok(out)
    }
}

/// Sets `path` (dot-separated object keys) in `root` to `raw`, parsed as JSON
/// when possible and kept as a string otherwise. Missing objects are created.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<(), String> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(format!("--set {path}: empty path segment"));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            _ => return Err(format!("--set {path}: `{}` is not an object", keys[..i].join("."))),
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one segment")
}

/// Reads the config file (or starts from `{}`), applies `key=value`
/// overrides and deserializes. Errors name the offending line or field.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, String> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| format!("{}:{}:{}: {e}", p.display(), e.line(), e.column()))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| format!("--set {o}: expected key=value"))?;
        apply_override(&mut value, k.trim(), v.trim())?;
    }
    serde_json::from_value(value).map_err(|e| format!("config: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_nested_objects() {
        let mut v = serde_json::json!({"attack": {"mode": {"regime": "exact_key"}}});
        apply_override(&mut v, "attack.framework.n_epochs", "3").unwrap();
        apply_override(&mut v, "out_dir", "runs/a").unwrap();
        assert_eq!(v["attack"]["framework"]["n_epochs"], 3);
        assert_eq!(v["out_dir"], "runs/a");
        assert!(apply_override(&mut v, "out_dir.x", "1").is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = load(None, &["attack.bogus=1".into()]).unwrap_err();
        assert!(err.contains("bogus"), "{err}");
        let err = load(None, &["colab.n_participants=2".into()]).unwrap_err();
        assert!(err.contains("colab"), "{err}");
    }

    #[test]
    fn resolve_checks_declared_experiment() {
        let cfg = ExperimentConfig { experiment: Some(Experiment::Attack), ..Default::default() };
        assert!(cfg.clone().resolve(Experiment::Collab, "o".into()).is_err());
        let r = cfg.resolve(Experiment::Attack, "o".into()).unwrap();
        assert!(r.attack.is_some() && r.data.is_some() && r.collab.is_none());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = load(None, &["data.kind=blobs".into(), "data.spread=0.3".into()]).unwrap();
        let r = cfg.resolve(Experiment::Collab, "o".into()).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }
}
