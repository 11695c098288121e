use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{FilterRules, ScenarioParams};
use crate::error::{Error, Result};
use crate::events::NormalizeMode;
use crate::fusion::EnergyConfig;
use crate::losses::LossConfig;
use crate::model::{BackboneConfig, DecoderConfig, FusionVariant, ModelConfig};

/// Epoch count of the long schedule.
pub const FULL_SCHEDULE_EPOCHS: usize = 100;

/// Everything a command needs. Loaded from JSON; any key, nested ones
/// included via dots, can be overridden with `--key=value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,

    pub fusion: FusionVariant,
    /// Sum features from every stage before decoding.
    pub integrate: bool,
    /// Add the energy score to the smooth-L1 objective.
    pub energy_loss: bool,
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub energy: EnergyConfig,
    pub loss: LossConfig,

    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Train for [`FULL_SCHEDULE_EPOCHS`] regardless of `epochs`.
    pub full_schedule: bool,

    pub normalize: NormalizeMode,
    pub samples: usize,
    pub test_fraction: f64,
    pub filters: FilterRules,
    pub scenario: ScenarioParams,
    pub ablation_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            seed: 0,
            fusion: FusionVariant::Ecfm,
            integrate: true,
            energy_loss: true,
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            energy: EnergyConfig::default(),
            loss: LossConfig::default(),
            lr: 1e-3,
            weight_decay: 1e-2,
            batch_size: 32,
            epochs: 20,
            full_schedule: false,
            normalize: NormalizeMode::Log1p,
            samples: 2000,
            test_fraction: 0.2,
            filters: FilterRules::default(),
            scenario: ScenarioParams::default(),
            ablation_seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Reads `path` if given (defaults otherwise), then applies overrides.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let base = match path {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let cfg = base.with_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `--key=value` (or `key=value`) assignments. Values are parsed
    /// as JSON when possible and taken as strings otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<RunConfig> {
        let mut tree = serde_json::to_value(self)?;
        for item in overrides {
            let body = item.trim_start_matches("--");
            let (key, raw) = body
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("override {item:?} is not --key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, key, value)?;
        }
        serde_json::from_value(tree).map_err(|e| Error::InvalidArgument(format!("config override: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss.validate()?;
        self.scenario.validate()?;
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("lr must be > 0 and weight decay >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
        }
        if (self.backbone.height, self.backbone.width) != (self.scenario.height, self.scenario.width) {
            return Err(Error::InvalidArgument(format!(
                "backbone expects {}x{} inputs but the scenario renders {}x{}",
                self.backbone.height, self.backbone.width, self.scenario.height, self.scenario.width
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            decoder: self.decoder.clone(),
            fusion: self.fusion,
            integrate: self.integrate,
            energy: self.energy,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        let mut loss = self.loss.clone();
        if !self.energy_loss {
            loss.energy_weight = 0.0;
        }
        loss
    }

    pub fn effective_epochs(&self) -> usize {
        if self.full_schedule {
            FULL_SCHEDULE_EPOCHS
        } else {
            self.epochs
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir.join("manifest.json")
    }

    pub fn train_manifest_path(&self) -> PathBuf {
        self.data_dir.join("train.json")
    }

    pub fn test_manifest_path(&self) -> PathBuf {
        self.data_dir.join("test.json")
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("config key {key:?}: {part:?} is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(Error::InvalidArgument(format!("unknown config key {key:?}")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    Err(Error::InvalidArgument("empty config key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.batch_size, c.epochs), (1e-3, 1e-2, 32, 20));
        assert_eq!(c.loss.samples, 1000);
        c.validate().unwrap();
        assert_eq!(c.effective_epochs(), 20);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = RunConfig::default()
            .with_overrides(&strings(&["--lr=0.01", "--fusion=add", "--loss.estimator=full", "--out_dir=x/y", "integrate=false"]))
            .unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.fusion, FusionVariant::Add);
        assert_eq!(c.loss.estimator, crate::losses::Estimator::Full);
        assert_eq!(c.out_dir, PathBuf::from("x/y"));
        assert!(!c.integrate);
        let c = RunConfig::default().with_overrides(&strings(&["--full_schedule=true"])).unwrap();
        assert_eq!(c.effective_epochs(), FULL_SCHEDULE_EPOCHS);
    }

    #[test]
    fn bad_overrides_are_rejected() {
        let base = RunConfig::default();
        for bad in ["--nope=1", "--lr", "--fusion=concat", "--loss.nope=2", "--lr.x=1"] {
            assert!(base.with_overrides(&strings(&[bad])).is_err(), "{bad}");
        }
        let c = base.with_overrides(&strings(&["--batch_size=0"])).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let c = RunConfig::default().with_overrides(&strings(&["--seed=9"])).unwrap();
        fs::write(&path, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&path), &[]).unwrap(), c);
        fs::write(&path, r#"{"epochs": 3}"#).unwrap();
        assert_eq!(RunConfig::resolve(Some(&path), &[]).unwrap().epochs, 3);
        fs::write(&path, r#"{"epoch": 3}"#).unwrap();
        assert!(RunConfig::resolve(Some(&path), &[]).is_err());
    }

    #[test]
    fn energy_loss_switch() {
        let c = RunConfig::default().with_overrides(&strings(&["--energy_loss=false"])).unwrap();
        assert_eq!(c.loss_config().energy_weight, 0.0);
        assert_eq!(RunConfig::default().loss_config().energy_weight, 1.0);
    }
}
