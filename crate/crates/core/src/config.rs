//! Run configuration: one JSON document drives every command.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{GemsError, Result};
use crate::gems::GemsConfig;
use crate::harness::data::DatasetConfig;
use crate::harness::metrics::EvalConfig;
use crate::harness::model::ModelConfig;
use crate::nullspace::{ProjectionMode, RankSelect};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NullspaceMode {
    Off,
    Complement,
    Literal,
}

impl NullspaceMode {
    pub fn projection(self) -> Option<ProjectionMode> {
        match self {
            NullspaceMode::Off => None,
            NullspaceMode::Complement => Some(ProjectionMode::Complement),
            NullspaceMode::Literal => Some(ProjectionMode::Literal),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NullspaceConfig {
    pub mode: NullspaceMode,
    /// Explicit number of protected directions; overrides `energy_fraction`.
    pub k: Option<usize>,
    pub energy_fraction: f64,
}

impl Default for NullspaceConfig {
    fn default() -> Self {
        NullspaceConfig {
            mode: NullspaceMode::Complement,
            k: None,
            energy_fraction: 0.9,
        }
    }
}

impl NullspaceConfig {
    pub fn rank_select(&self) -> RankSelect {
        match self.k {
            Some(k) => RankSelect::Explicit(k),
            None => RankSelect::Energy(self.energy_fraction),
        }
    }
}

/// Dense-Adam training of the base model on the general-domain records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 400,
            lr: 3e-3,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub history_max: usize,
    pub optimizer: GemsConfig,
    pub nullspace: NullspaceConfig,
    pub pretrain: PretrainConfig,
    pub batch_size: usize,
    /// Share of each batch drawn from search records.
    pub src_ratio: f64,
    pub steps: u64,
    /// Validation cadence in steps; 0 disables.
    pub eval_every: u64,
    pub eval: EvalConfig,
    pub output_dir: String,
    /// Write real timings into the metrics log (breaks byte stability).
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            model: ModelConfig::default(),
            dataset: DatasetConfig::default(),
            history_max: 10,
            optimizer: GemsConfig::default(),
            nullspace: NullspaceConfig::default(),
            pretrain: PretrainConfig::default(),
            batch_size: 64,
            src_ratio: 0.5,
            steps: 600,
            eval_every: 0,
            eval: EvalConfig::default(),
            output_dir: "runs".into(),
            record_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| GemsError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(GemsError::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.dataset.validate()?;
        self.optimizer.validate()?;
        if self.history_max == 0 {
            return Err(GemsError::Config("history_max must be positive".into()));
        }
        let vocab = self.dataset.vocab();
        let longest = 2 + self.history_max * (vocab.id_levels + 1) + (vocab.id_levels + 1) + 1 + vocab.id_levels;
        if longest > self.model.ctx_len {
            return Err(GemsError::Config(format!(
                "prompts of up to {longest} tokens do not fit ctx_len {}",
                self.model.ctx_len
            )));
        }
        if self.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(GemsError::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.src_ratio) {
            return Err(GemsError::Config("src_ratio must lie in [0, 1]".into()));
        }
        if !(self.pretrain.lr > 0.0) {
            return Err(GemsError::Config("pretrain.lr must be positive".into()));
        }
        let f = self.nullspace.energy_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(GemsError::Config("nullspace.energy_fraction must lie in (0, 1]".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) || self.eval.beam_width == 0 {
            return Err(GemsError::Config("eval.ks must be non-empty positive and beam_width positive".into()));
        }
        Ok(())
    }

    /// Hex sha256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies `key = value` overrides. `key` is either a dotted path
    /// (`optimizer.adam.lr`) or a leaf name that is unique in the document
    /// (`lr` is ambiguous; `rank` is not). Values are parsed as JSON when
    /// possible and taken as strings otherwise.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for (key, raw) in overrides {
            let path = resolve_key(&doc, key)?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            let slot = path
                .iter()
                .try_fold(&mut doc, |node, seg| node.get_mut(seg.as_str()))
                .ok_or_else(|| GemsError::Config(format!("unknown key {key:?}")))?;
            *slot = value;
        }
        let c: RunConfig = serde_json::from_value(doc).map_err(|e| GemsError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

fn leaf_paths(v: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            prefix.push(k.clone());
            out.push(prefix.clone());
            leaf_paths(child, prefix, out);
            prefix.pop();
        }
    }
}

fn resolve_key(doc: &Value, key: &str) -> Result<Vec<String>> {
    let mut all = Vec::new();
    leaf_paths(doc, &mut Vec::new(), &mut all);
    let dotted: Vec<String> = key.split('.').map(str::to_string).collect();
    if all.contains(&dotted) {
        return Ok(dotted);
    }
    let matches: Vec<&Vec<String>> = all.iter().filter(|p| p.last().map(String::as_str) == Some(key)).collect();
    match matches.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(GemsError::Config(format!("unknown key {key:?}"))),
        many => Err(GemsError::Config(format!(
            "ambiguous key {key:?}: use one of {}",
            many.iter().map(|p| p.join(".")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.optimizer.scale, 2.0);
        assert_eq!(c.optimizer.temperature, 1.0);
        assert_eq!(c.optimizer.rank, 8);
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_and_bad_schema_rejected() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        v["optimizer"]["rnak"] = 4.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        v["schema_version"] = 99.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn overrides_by_path_and_leaf() {
        let c = RunConfig::default();
        let o = c
            .with_overrides(&[
                ("rank".into(), "4".into()),
                ("optimizer.adam.lr".into(), "0.01".into()),
                ("mode".into(), "literal".into()),
            ])
            .unwrap();
        assert_eq!(o.optimizer.rank, 4);
        assert_eq!(o.optimizer.adam.lr, 0.01);
        assert_eq!(o.nullspace.mode, NullspaceMode::Literal);
        assert_ne!(o.hash(), c.hash());
        assert!(c.with_overrides(&[("lr".into(), "1".into())]).is_err());
        assert!(c.with_overrides(&[("nope".into(), "1".into())]).is_err());
        assert!(c.with_overrides(&[("rank".into(), "1".into())]).is_err());
    }
}
