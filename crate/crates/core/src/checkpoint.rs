//! Checkpoint container: `meta.json` plus `state.bin`, a concatenation of
//! matrices in the binary matrix format in a fixed order.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{GemsError, Result};
use crate::gems::{GatingNet, GemsOptimizer, LayerTuner, SharedOptimizer, Variant};
use crate::harness::model::ToyModel;
use crate::linalg::{read_matrix, write_matrix, Matrix};
use crate::subspace::{DenseAdam, SubspaceKind, SubspaceState};

pub const META_FILE: &str = "meta.json";
pub const STATE_FILE: &str = "state.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubspaceMeta {
    pub rank: usize,
    pub step: u64,
    pub basis_frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerMeta {
    pub name: String,
    pub shape: (usize, usize),
    /// `None` when the shared optimizer is dense Adam.
    pub shared: Option<SubspaceMeta>,
    pub dense_step: Option<u64>,
    pub src: Option<SubspaceMeta>,
    pub rec: Option<SubspaceMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub config_hash: String,
    pub step: u64,
    pub variant: Variant,
    pub gate_hidden: usize,
    pub gate_temperature: f64,
    pub gate_seed: u64,
    pub layers: Vec<LayerMeta>,
}

fn sub_meta(s: &SubspaceState) -> SubspaceMeta {
    SubspaceMeta {
        rank: s.rank(),
        step: s.step_count(),
        basis_frozen: s.basis_frozen(),
    }
}

fn row_matrix(v: &[f64]) -> Result<Matrix> {
    Matrix::new(v.len(), 1, v.to_vec())
}

/// Writes into `<dir>.tmp` and renames onto `dir` once complete.
pub fn save_checkpoint(dir: &Path, config: &RunConfig, model: &ToyModel, opt: &GemsOptimizer) -> Result<()> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let mut layers = Vec::with_capacity(opt.layers.len());
    let mut w = BufWriter::new(fs::File::create(tmp.join(STATE_FILE))?);
    for (weight, t) in model.weights().iter().zip(&opt.layers) {
        write_matrix(&mut w, weight)?;
        let (shared, dense_step) = match &t.shared {
            SharedOptimizer::Subspace(s) => {
                write_matrix(&mut w, s.basis())?;
                write_matrix(&mut w, s.first_moment())?;
                write_matrix(&mut w, s.second_moment())?;
                (Some(sub_meta(s)), None)
            }
            SharedOptimizer::Dense(d) => {
                write_matrix(&mut w, d.first_moment())?;
                write_matrix(&mut w, d.second_moment())?;
                (None, Some(d.step_count()))
            }
        };
        write_matrix(&mut w, &t.attr_src)?;
        write_matrix(&mut w, &t.attr_rec)?;
        for s in t.src.iter().chain(t.rec.iter()) {
            write_matrix(&mut w, s.basis())?;
            write_matrix(&mut w, s.first_moment())?;
            write_matrix(&mut w, s.second_moment())?;
        }
        layers.push(LayerMeta {
            name: t.name.clone(),
            shape: t.shape,
            shared,
            dense_step,
            src: t.src.as_ref().map(sub_meta),
            rec: t.rec.as_ref().map(sub_meta),
        });
    }
    write_matrix(&mut w, &opt.gate.w1)?;
    write_matrix(&mut w, &row_matrix(&opt.gate.b1)?)?;
    write_matrix(&mut w, &opt.gate.w2)?;
    write_matrix(&mut w, &row_matrix(&opt.gate.b2)?)?;
    w.flush()?;
    drop(w);
    let meta = CheckpointMeta {
        schema_version: crate::config::SCHEMA_VERSION,
        config_hash: config.hash(),
        step: opt.step,
        variant: opt.config.variant,
        gate_hidden: opt.gate.hidden(),
        gate_temperature: opt.gate.temperature,
        gate_seed: opt.gate_seed,
        layers,
    };
    fs::write(tmp.join(META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let text = fs::read_to_string(dir.join(META_FILE))?;
    serde_json::from_str(&text).map_err(|e| GemsError::Format(format!("checkpoint meta: {e}")))
}

fn load_sub(
    r: &mut impl std::io::BufRead,
    kind: SubspaceKind,
    shape: (usize, usize),
    meta: &SubspaceMeta,
    config: &RunConfig,
) -> Result<SubspaceState> {
    let basis = read_matrix(&mut *r)?;
    let m1 = read_matrix(&mut *r)?;
    let m2 = read_matrix(&mut *r)?;
    let mut sc = config.optimizer.subspace(meta.rank);
    sc.rank = meta.rank;
    SubspaceState::from_parts(kind, shape, basis, m1, m2, meta.step, sc, meta.basis_frozen)
}

/// Restores the model and optimizer. Projectors are not part of the
/// checkpoint; the returned optimizer has none attached.
pub fn load_checkpoint(dir: &Path, config: &RunConfig) -> Result<(ToyModel, GemsOptimizer, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    if meta.config_hash != config.hash() {
        return Err(GemsError::Config(format!(
            "checkpoint was written under config {} but the current config hashes to {}",
            meta.config_hash,
            config.hash()
        )));
    }
    let mut model = ToyModel::zeros(config.model, config.dataset.vocab())?;
    if model.layer_names().len() != meta.layers.len() {
        return Err(GemsError::Format("checkpoint layer count does not match the model".into()));
    }
    let mut r = BufReader::new(fs::File::open(dir.join(STATE_FILE))?);
    let mut weights = Vec::with_capacity(meta.layers.len());
    let mut tuners = Vec::with_capacity(meta.layers.len());
    for lm in &meta.layers {
        weights.push(read_matrix(&mut r)?);
        let shared = match (&lm.shared, lm.dense_step) {
            (Some(sm), None) => SharedOptimizer::Subspace(load_sub(&mut r, SubspaceKind::Shared, lm.shape, sm, config)?),
            (None, Some(step)) => {
                let m1 = read_matrix(&mut r)?;
                let m2 = read_matrix(&mut r)?;
                SharedOptimizer::Dense(DenseAdam::from_parts(m1, m2, step, config.optimizer.adam)?)
            }
            _ => return Err(GemsError::Format(format!("layer {}: malformed shared optimizer", lm.name))),
        };
        let attr_src = read_matrix(&mut r)?;
        let attr_rec = read_matrix(&mut r)?;
        let src = lm
            .src
            .as_ref()
            .map(|m| load_sub(&mut r, SubspaceKind::Src, lm.shape, m, config))
            .transpose()?;
        let rec = lm
            .rec
            .as_ref()
            .map(|m| load_sub(&mut r, SubspaceKind::Rec, lm.shape, m, config))
            .transpose()?;
        tuners.push(LayerTuner {
            name: lm.name.clone(),
            shape: lm.shape,
            shared,
            src,
            rec,
            attr_src,
            attr_rec,
        });
    }
    model.set_weights(weights)?;
    let w1 = read_matrix(&mut r)?;
    let b1 = read_matrix(&mut r)?.into_vec();
    let w2 = read_matrix(&mut r)?;
    let b2 = read_matrix(&mut r)?.into_vec();
    if w1.shape() != (meta.gate_hidden, 3) || w2.shape() != (2, meta.gate_hidden) || b1.len() != meta.gate_hidden || b2.len() != 2 {
        return Err(GemsError::Format("gate parameters have unexpected shapes".into()));
    }
    let mut optimizer_config = config.optimizer;
    optimizer_config.variant = meta.variant;
    let opt = GemsOptimizer {
        config: optimizer_config,
        layers: tuners,
        gate: GatingNet {
            w1,
            b1,
            w2,
            b2,
            temperature: meta.gate_temperature,
        },
        projectors: None,
        step: meta.step,
        gate_seed: meta.gate_seed,
        record_wall_time: config.record_wall_time,
    };
    Ok((model, opt, meta))
}

/// Model weights only, for commands that just evaluate.
pub fn load_model(dir: &Path, config: &RunConfig) -> Result<ToyModel> {
    load_checkpoint(dir, config).map(|(m, _, _)| m)
}

/// Weights of a checkpoint written under a possibly different run config
/// (a pre-trained base reused by several tuning runs). Only the layer
/// names and shapes have to agree with `config.model`.
pub fn load_weights(dir: &Path, config: &RunConfig) -> Result<ToyModel> {
    let meta = read_meta(dir)?;
    let mut model = ToyModel::zeros(config.model, config.dataset.vocab())?;
    let expected: Vec<(&str, (usize, usize))> = model
        .layer_names()
        .iter()
        .map(String::as_str)
        .zip(model.weights().iter().map(Matrix::shape))
        .collect();
    let found: Vec<(&str, (usize, usize))> = meta.layers.iter().map(|l| (l.name.as_str(), l.shape)).collect();
    if expected != found {
        return Err(GemsError::Config(format!(
            "checkpoint {} does not match the configured model architecture",
            dir.display()
        )));
    }
    let mut r = BufReader::new(fs::File::open(dir.join(STATE_FILE))?);
    let mut weights = Vec::with_capacity(meta.layers.len());
    for lm in &meta.layers {
        weights.push(read_matrix(&mut r)?);
        let skip = match (&lm.shared, lm.dense_step) {
            (Some(_), None) => 3,
            (None, Some(_)) => 2,
            _ => return Err(GemsError::Format(format!("layer {}: malformed shared optimizer", lm.name))),
        } + 2
            + 3 * (lm.src.is_some() as usize + lm.rec.is_some() as usize);
        for _ in 0..skip {
            read_matrix(&mut r)?;
        }
    }
    model.set_weights(weights)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{init_model, new_optimizer};
    use crate::gems::{train_step, Batch};
    use crate::harness::data::ItemId;
    use crate::harness::model::TrainSample;

    fn small_config(variant: Variant) -> RunConfig {
        let mut c = RunConfig::default();
        c.model.d_model = 8;
        c.model.n_blocks = 1;
        c.model.ffn_width = 12;
        c.optimizer.rank = 4;
        c.optimizer.variant = variant;
        c
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for variant in [Variant::Full, Variant::DenseJoint, Variant::SubspaceOnly] {
            let c = small_config(variant);
            let mut model = init_model(&c).unwrap();
            let mut opt = new_optimizer(&c, &model, None).unwrap();
            let s = TrainSample {
                prompt: vec![0, 4, 5, 6],
                target: ItemId::new(vec![1, 2, 3]),
            };
            let batch = Batch {
                src: vec![s.clone()],
                rec: vec![s],
            };
            train_step(&mut model, &batch, &mut opt).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let a = dir.path().join("a");
            let b = dir.path().join("b");
            save_checkpoint(&a, &c, &model, &opt).unwrap();
            let (m2, o2, meta) = load_checkpoint(&a, &c).unwrap();
            assert_eq!(meta.step, 1);
            save_checkpoint(&b, &c, &m2, &o2).unwrap();
            for f in [META_FILE, STATE_FILE] {
                assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{variant:?} {f}");
            }
            assert!(!a.with_extension("tmp").exists());
        }
    }

    #[test]
    fn weights_load_across_run_configs() {
        let c = small_config(Variant::Full);
        let model = init_model(&c).unwrap();
        let opt = new_optimizer(&c, &model, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base");
        save_checkpoint(&path, &c, &model, &opt).unwrap();
        let mut other = c.clone();
        other.steps += 7;
        other.optimizer.variant = Variant::DenseJoint;
        let strict = load_model(&path, &c).unwrap();
        assert_eq!(load_weights(&path, &other).unwrap().weights(), strict.weights());
        other.model.ffn_width += 1;
        assert!(load_weights(&path, &other).is_err());
    }

    #[test]
    fn config_hash_mismatch_rejected() {
        let c = small_config(Variant::Full);
        let model = init_model(&c).unwrap();
        let opt = new_optimizer(&c, &model, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path().join("c").as_path(), &c, &model, &opt).unwrap();
        let mut other = c.clone();
        other.seed = 9;
        assert!(load_checkpoint(&dir.path().join("c"), &other).is_err());
    }
}
