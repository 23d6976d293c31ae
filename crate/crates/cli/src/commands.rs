//! One function per subcommand. Each returns the directory it wrote.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use gems_core::ablation::run_ablation;
use gems_core::checkpoint::{load_weights, save_checkpoint, META_FILE};
use gems_core::config::RunConfig;
use gems_core::diagnostics::{
    audit_layer, conflict_csv, conflict_heatmap, intent_preservation, parse_conflict_csv, ConflictSource, IntentReport,
};
use gems_core::experiment::{
    build_projectors, make_dataset, new_optimizer, pretrain, probe_corpus, prompt_format, run_conflicts, train,
};
use gems_core::gems::{GemsOptimizer, StepReport, Variant};
use gems_core::harness::data::{read_records, write_records, EvalRecord};
use gems_core::harness::metrics::{evaluate, MetricsTable};
use gems_core::harness::model::ToyModel;
use gems_core::nullspace::{drift_probe, read_projector, write_projector, KnowledgeProjector};
use gems_core::{GemsError, Result};
use serde::Serialize;

use crate::{finish_dir, stage, write_atomic, write_json, Context};

pub const SPLITS: [&str; 4] = ["train", "valid", "test", "general"];

/// Accepts either a checkpoint directory or a run directory holding one.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(META_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    let nested = path.join("checkpoint");
    if nested.join(META_FILE).is_file() {
        return Ok(nested);
    }
    Err(GemsError::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no checkpoint at {}", path.display()),
    )))
}

pub fn cmd_gen_data(ctx: &Context) -> Result<PathBuf> {
    let dest = ctx.root.join("data");
    let dataset = make_dataset(&ctx.config)?;
    stage(&dest, |dir| {
        for (name, records) in [
            ("train", &dataset.train),
            ("valid", &dataset.valid),
            ("test", &dataset.test),
            ("general", &dataset.general),
        ] {
            let mut w = BufWriter::new(fs::File::create(dir.join(format!("{name}.jsonl")))?);
            write_records(&mut w, name, records)?;
            w.flush()?;
        }
        finish_dir(dir, "gen-data", &ctx.config)
    })?;
    Ok(dest)
}

fn write_model(dir: &Path, config: &RunConfig, model: &ToyModel, opt: &GemsOptimizer) -> Result<()> {
    save_checkpoint(&dir.join("checkpoint"), config, model, opt)
}

pub fn cmd_pretrain(ctx: &Context) -> Result<PathBuf> {
    let dest = ctx.root.join("base");
    let dataset = make_dataset(&ctx.config)?;
    let (model, losses) = pretrain(&ctx.config, &dataset)?;
    let opt = new_optimizer(&ctx.config, &model, None)?;
    stage(&dest, |dir| {
        write_model(dir, &ctx.config, &model, &opt)?;
        let mut csv = String::from("step,loss\n");
        for (i, l) in losses.iter().enumerate() {
            csv += &format!("{i},{l:.12e}\n");
        }
        fs::write(dir.join("pretrain_loss.csv"), csv)?;
        finish_dir(dir, "pretrain", &ctx.config)
    })?;
    Ok(dest)
}

fn default_base(ctx: &Context, given: Option<&Path>) -> Result<PathBuf> {
    resolve_checkpoint(&given.map(Path::to_path_buf).unwrap_or_else(|| ctx.root.join("base")))
}

#[derive(Serialize)]
struct ProjectorSummary {
    layer: String,
    k: usize,
    dim: usize,
}

pub fn cmd_nullspace_build(ctx: &Context, checkpoint: Option<&Path>) -> Result<PathBuf> {
    if ctx.config.nullspace.mode.projection().is_none() {
        return Err(GemsError::Config("nullspace.mode is off; nothing to build".into()));
    }
    let base = load_weights(&default_base(ctx, checkpoint)?, &ctx.config)?;
    let dataset = make_dataset(&ctx.config)?;
    let corpus = probe_corpus(&ctx.config, &dataset)?;
    let projectors = build_projectors(&ctx.config, &base, &corpus)?.expect("projection mode is on");
    let dest = ctx.root.join("projectors");
    stage(&dest, |dir| {
        for p in &projectors {
            write_projector(dir, p)?;
        }
        let summary: Vec<ProjectorSummary> = projectors
            .iter()
            .map(|p| ProjectorSummary {
                layer: p.layer().to_string(),
                k: p.k(),
                dim: p.dim(),
            })
            .collect();
        write_json(&dir.join("summary.json"), &summary)?;
        finish_dir(dir, "nullspace-build", &ctx.config)
    })?;
    Ok(dest)
}

fn load_projectors(ctx: &Context, model: &ToyModel, dir: &Path) -> Result<Vec<KnowledgeProjector>> {
    let want = ctx.config.nullspace.mode.projection();
    model
        .layer_names()
        .iter()
        .map(|name| {
            let p = read_projector(dir, name)?;
            if Some(p.mode()) != want {
                return Err(GemsError::Config(format!(
                    "projector for {name} was built in {:?} mode, config asks for {:?}",
                    p.mode(),
                    ctx.config.nullspace.mode
                )));
            }
            Ok(p)
        })
        .collect()
}

#[derive(Serialize)]
struct IntentFile {
    config_hash: String,
    intent: Option<IntentReport>,
    drift: f64,
}

fn metrics_csv(reports: &[StepReport]) -> String {
    let mut s = String::from(StepReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        s += &r.csv_row();
        s.push('\n');
    }
    s
}

pub fn cmd_train(ctx: &Context, base: Option<&Path>, projectors: Option<&Path>) -> Result<PathBuf> {
    let config = &ctx.config;
    let dataset = make_dataset(config)?;
    let start = match base {
        Some(p) => load_weights(&resolve_checkpoint(p)?, config)?,
        None => pretrain(config, &dataset)?.0,
    };
    let corpus = probe_corpus(config, &dataset)?;
    let wanted = config.optimizer.variant.uses_projection() && config.nullspace.mode.projection().is_some();
    let projectors = match (wanted, projectors) {
        (false, _) => None,
        (true, Some(dir)) => Some(load_projectors(ctx, &start, dir)?),
        (true, None) => build_projectors(config, &start, &corpus)?,
    };
    let out = train(config, &dataset, &start, projectors)?;
    let intent = match intent_preservation(&start, &out.model, &prompt_format(config), &dataset.general, config.eval.beam_width) {
        Ok(r) => Some(r),
        Err(GemsError::DegenerateGradient(msg)) => {
            log::warn!("{msg}");
            None
        }
        Err(e) => return Err(e),
    };
    let drift = drift_probe(&start, &out.model, &corpus)?;
    let dest = ctx.root.join("train");
    stage(&dest, |dir| {
        write_model(dir, config, &out.model, &out.optimizer)?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&out.reports))?;
        fs::write(dir.join("conflict.csv"), conflict_csv(&run_conflicts(&out, ConflictSource::RawGradient)))?;
        fs::write(
            dir.join("conflict_components.csv"),
            conflict_csv(&run_conflicts(&out, ConflictSource::AppliedComponents)),
        )?;
        if !out.validation.is_empty() {
            write_json(&dir.join("validation.json"), &out.validation)?;
        }
        write_json(
            &dir.join("intent.json"),
            &IntentFile {
                config_hash: config.hash(),
                intent,
                drift,
            },
        )?;
        finish_dir(dir, "train", config)
    })?;
    Ok(dest)
}

#[derive(Serialize)]
struct EvalFile {
    config_hash: String,
    checkpoint_config_hash: String,
    split: String,
    records: usize,
    metrics: MetricsTable,
}

fn load_split(ctx: &Context, data: Option<&Path>, split: &str) -> Result<Vec<EvalRecord>> {
    if !SPLITS.contains(&split) {
        return Err(GemsError::Config(format!("unknown split {split:?} (expected one of {SPLITS:?})")));
    }
    match data {
        Some(dir) => {
            let f = fs::File::open(dir.join(format!("{split}.jsonl")))?;
            let (header, records) = read_records(BufReader::new(f))?;
            if header.split != split {
                return Err(GemsError::Format(format!("{split}.jsonl announces split {:?}", header.split)));
            }
            Ok(records)
        }
        None => {
            let d = make_dataset(&ctx.config)?;
            Ok(match split {
                "train" => d.train,
                "valid" => d.valid,
                "test" => d.test,
                _ => d.general,
            })
        }
    }
}

pub fn cmd_eval(ctx: &Context, checkpoint: &Path, data: Option<&Path>, split: &str) -> Result<PathBuf> {
    let ckpt = resolve_checkpoint(checkpoint)?;
    let meta = gems_core::checkpoint::read_meta(&ckpt)?;
    let model = load_weights(&ckpt, &ctx.config)?;
    let records = load_split(ctx, data, split)?;
    let metrics = evaluate(&model, &prompt_format(&ctx.config), &records, &ctx.config.eval)?;
    let dest = ctx.root.join("eval");
    stage(&dest, |dir| {
        write_json(
            &dir.join("metrics.json"),
            &EvalFile {
                config_hash: ctx.config.hash(),
                checkpoint_config_hash: meta.config_hash.clone(),
                split: split.to_string(),
                records: records.len(),
                metrics,
            },
        )?;
        finish_dir(dir, "eval", &ctx.config)
    })?;
    Ok(dest)
}

/// Writes `heatmap.csv` and `heatmap_components.csv` next to the run's
/// conflict logs.
pub fn cmd_conflict(run: &Path) -> Result<PathBuf> {
    let metrics = fs::read_to_string(run.join("metrics.csv"))?;
    let total_steps = metrics.lines().skip(1).filter(|l| !l.is_empty()).count() as u64;
    for (input, output) in [("conflict.csv", "heatmap.csv"), ("conflict_components.csv", "heatmap_components.csv")] {
        let records = parse_conflict_csv(&fs::read_to_string(run.join(input))?)?;
        let heatmap = conflict_heatmap(&records, total_steps)?;
        write_atomic(&run.join(output), heatmap.to_csv().as_bytes())?;
    }
    Ok(run.to_path_buf())
}

#[derive(Serialize)]
struct AuditFile {
    config_hash: String,
    rank: usize,
    task_rank: usize,
    all_match: bool,
    layers: Vec<gems_core::diagnostics::LayerAudit>,
}

/// Audits the full-GEMS optimizer state regardless of the configured variant.
pub fn cmd_audit(ctx: &Context) -> Result<PathBuf> {
    let mut config = ctx.config.clone();
    config.optimizer.variant = Variant::Full;
    let model = ToyModel::zeros(config.model, config.dataset.vocab())?;
    let opt = new_optimizer(&config, &model, None)?;
    let layers: Vec<_> = opt
        .layers
        .iter()
        .zip(model.weights())
        .map(|(t, w)| audit_layer(t, w, config.optimizer.rank.min(t.shape.0.min(t.shape.1))))
        .collect();
    let dest = ctx.root.join("audit");
    stage(&dest, |dir| {
        write_json(
            &dir.join("audit.json"),
            &AuditFile {
                config_hash: ctx.config.hash(),
                rank: config.optimizer.rank,
                task_rank: config.optimizer.task_rank(),
                all_match: layers.iter().all(|l| l.matches),
                layers,
            },
        )?;
        finish_dir(dir, "audit", &ctx.config)
    })?;
    Ok(dest)
}

/// Seeds `config.seed .. config.seed + seeds`, all five variants.
pub fn cmd_ablate(ctx: &Context, seeds: u64) -> Result<(PathBuf, String)> {
    if seeds == 0 {
        return Err(GemsError::Config("--seeds must be positive".into()));
    }
    let seed_list: Vec<u64> = (0..seeds).map(|i| ctx.config.seed + i).collect();
    let report = run_ablation(&ctx.config, &seed_list, &Variant::ALL)?;
    let text = report.to_text();
    let dest = ctx.root.join("ablate");
    stage(&dest, |dir| {
        write_json(&dir.join("report.json"), &report)?;
        fs::write(dir.join("report.txt"), &text)?;
        finish_dir(dir, "ablate", &ctx.config)
    })?;
    Ok((dest, text))
}
