//! End-to-end runs: pretraining the base model, building projectors,
//! tuning, evaluation and the paired comparisons used by the ablation report.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diagnostics::{
    conflict_records, intent_preservation, mean_rho, ConflictRecord, ConflictSource, IntentReport,
};
use crate::error::{GemsError, Result};
use crate::gems::{train_step, Batch, GemsOptimizer, StepReport, TunableModel, Variant};
use crate::harness::data::{generate_dataset, Dataset, EvalRecord, Task};
use crate::harness::metrics::{evaluate, MetricsTable};
use crate::harness::model::{ToyModel, TrainSample};
use crate::harness::vocab::PromptFormat;
use crate::nullspace::{build_all_projectors, drift_probe, KnowledgeProjector, ProbeCorpus};
use crate::rng::{SeedStreams, StreamRng};
use crate::subspace::{AdamHyper, DenseAdam};

pub fn seeds(config: &RunConfig) -> SeedStreams {
    SeedStreams::new(config.seed)
}

pub fn prompt_format(config: &RunConfig) -> PromptFormat {
    PromptFormat {
        vocab: config.dataset.vocab(),
        history_max: config.history_max,
    }
}

pub fn make_dataset(config: &RunConfig) -> Result<Dataset> {
    generate_dataset(&config.dataset, &seeds(config))
}

pub fn to_sample(format: &PromptFormat, record: &EvalRecord) -> TrainSample {
    TrainSample {
        prompt: format.format(record),
        target: record.target.clone(),
    }
}

/// Randomly initialized model from the `init` stream.
pub fn init_model(config: &RunConfig) -> Result<ToyModel> {
    ToyModel::new(config.model, config.dataset.vocab(), &mut seeds(config).stream(SeedStreams::INIT))
}

fn draw(rng: &mut StreamRng, pool: &[TrainSample], n: usize) -> Vec<TrainSample> {
    if pool.is_empty() {
        return Vec::new();
    }
    (0..n).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect()
}

/// Mixed batch with `round(batch_size · src_ratio)` search samples.
pub fn sample_batch(
    src: &[TrainSample],
    rec: &[TrainSample],
    batch_size: usize,
    src_ratio: f64,
    rng: &mut StreamRng,
) -> Batch<TrainSample> {
    let mut n_src = (batch_size as f64 * src_ratio).round() as usize;
    if src.is_empty() {
        n_src = 0;
    } else if rec.is_empty() {
        n_src = batch_size;
    }
    Batch {
        src: draw(rng, src, n_src),
        rec: draw(rng, rec, batch_size - n_src),
    }
}

/// Dense Adam on the general-domain records, starting from [`init_model`].
pub fn pretrain(config: &RunConfig, dataset: &Dataset) -> Result<(ToyModel, Vec<f64>)> {
    let format = prompt_format(config);
    let mut model = init_model(config)?;
    let pool: Vec<TrainSample> = dataset.general.iter().map(|r| to_sample(&format, r)).collect();
    let hyper = AdamHyper {
        lr: config.pretrain.lr,
        ..config.optimizer.adam
    };
    let mut opts = model
        .weights()
        .iter()
        .map(|w| DenseAdam::new(w.rows(), w.cols(), hyper))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = seeds(config).stream("pretrain");
    let mut losses = Vec::with_capacity(config.pretrain.steps as usize);
    for _ in 0..config.pretrain.steps {
        let batch = draw(&mut rng, &pool, config.pretrain.batch_size);
        let (loss, grads) = model.loss_and_grad_sum(&batch)?;
        let inv = 1.0 / batch.len() as f64;
        let mut updates = Vec::with_capacity(grads.len());
        for (o, g) in opts.iter_mut().zip(&grads) {
            updates.push(o.step(&g.scale(inv))?);
        }
        for (w, u) in model.weights_mut().iter_mut().zip(&updates) {
            u.check_finite("pretraining update")?;
            w.axpy(1.0, u)?;
        }
        losses.push(loss * inv);
    }
    Ok((model, losses))
}

/// Every decode prefix of every general-domain record, so each identifier
/// level's input position is represented.
pub fn probe_corpus(config: &RunConfig, dataset: &Dataset) -> Result<ProbeCorpus> {
    let format = prompt_format(config);
    let vocab = format.vocab;
    let mut inputs = Vec::new();
    for r in &dataset.general {
        let mut seq = format.format(r);
        inputs.push(seq.clone());
        let toks = vocab.item_tokens(&r.target);
        for t in &toks[..toks.len() - 1] {
            seq.push(*t);
            inputs.push(seq.clone());
        }
    }
    ProbeCorpus::new(inputs)
}

pub fn build_projectors(config: &RunConfig, base: &ToyModel, corpus: &ProbeCorpus) -> Result<Option<Vec<KnowledgeProjector>>> {
    match config.nullspace.mode.projection() {
        None => Ok(None),
        Some(mode) => build_all_projectors(base, corpus, config.nullspace.rank_select(), mode).map(Some),
    }
}

pub fn new_optimizer(config: &RunConfig, model: &ToyModel, projectors: Option<Vec<KnowledgeProjector>>) -> Result<GemsOptimizer> {
    let shapes: Vec<(usize, usize)> = model.weights().iter().map(|w| w.shape()).collect();
    let mut opt = GemsOptimizer::new(config.optimizer, model.layer_names(), &shapes, projectors, &seeds(config))?;
    opt.record_wall_time = config.record_wall_time;
    Ok(opt)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub optimizer: GemsOptimizer,
    pub reports: Vec<StepReport>,
    /// `(step, validation metrics)` at every `eval_every` boundary.
    pub validation: Vec<(u64, MetricsTable)>,
}

/// Runs `config.steps` controller steps from `start`.
pub fn train(config: &RunConfig, dataset: &Dataset, start: &ToyModel, projectors: Option<Vec<KnowledgeProjector>>) -> Result<TrainOutcome> {
    let format = prompt_format(config);
    let src: Vec<TrainSample> = dataset.train.iter().filter(|r| r.task == Task::Src).map(|r| to_sample(&format, r)).collect();
    let rec: Vec<TrainSample> = dataset.train.iter().filter(|r| r.task == Task::Rec).map(|r| to_sample(&format, r)).collect();
    if src.is_empty() && rec.is_empty() {
        return Err(GemsError::Empty("training split".into()));
    }
    let mut model = start.clone();
    let mut opt = new_optimizer(config, &model, projectors)?;
    let mut rng = seeds(config).stream(SeedStreams::BATCHING);
    let mut reports = Vec::with_capacity(config.steps as usize);
    let mut validation = Vec::new();
    for step in 0..config.steps {
        let batch = sample_batch(&src, &rec, config.batch_size, config.src_ratio, &mut rng);
        reports.push(train_step(&mut model, &batch, &mut opt)?);
        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            let m = evaluate(&model, &format, &dataset.valid, &config.eval)?;
            log::info!("step {}: valid hit@5 {:.4}", step + 1, m["all"].get("hit@5").copied().unwrap_or(f64::NAN));
            validation.push((step + 1, m));
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        reports,
        validation,
    })
}

pub fn evaluate_test(config: &RunConfig, model: &ToyModel, dataset: &Dataset) -> Result<MetricsTable> {
    evaluate(model, &prompt_format(config), &dataset.test, &config.eval)
}

/// Base model, its probe corpus and projectors, shared by paired runs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub base: ToyModel,
    pub corpus: ProbeCorpus,
    pub projectors: Option<Vec<KnowledgeProjector>>,
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let dataset = make_dataset(config)?;
    let (base, _) = pretrain(config, &dataset)?;
    let corpus = probe_corpus(config, &dataset)?;
    let projectors = build_projectors(config, &base, &corpus)?;
    Ok(Prepared {
        dataset,
        base,
        corpus,
        projectors,
    })
}

/// One variant's results on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub seed: u64,
    pub test: MetricsTable,
    pub mean_raw_rho: Option<f64>,
    pub mean_component_rho: Option<f64>,
    pub intent: Option<IntentReport>,
    pub drift: f64,
    pub final_loss_src: f64,
    pub final_loss_rec: f64,
}

pub fn run_variant(config: &RunConfig, prepared: &Prepared, variant: Variant) -> Result<(VariantResult, TrainOutcome)> {
    let mut cfg = config.clone();
    cfg.optimizer.variant = variant;
    let projectors = if variant.uses_projection() { prepared.projectors.clone() } else { None };
    let out = train(&cfg, &prepared.dataset, &prepared.base, projectors)?;
    let names = out.model.layer_names().to_vec();
    let raw = conflict_records(&out.reports, &names, ConflictSource::RawGradient);
    let comp = conflict_records(&out.reports, &names, ConflictSource::AppliedComponents);
    let format = prompt_format(&cfg);
    let intent = match intent_preservation(&prepared.base, &out.model, &format, &prepared.dataset.general, cfg.eval.beam_width) {
        Ok(r) => Some(r),
        Err(GemsError::DegenerateGradient(msg)) => {
            log::warn!("{msg}");
            None
        }
        Err(e) => return Err(e),
    };
    let tail = out.reports.len().saturating_sub(20);
    let mean = |f: fn(&StepReport) -> f64| -> f64 {
        let w = &out.reports[tail..];
        if w.is_empty() {
            0.0
        } else {
            w.iter().map(f).sum::<f64>() / w.len() as f64
        }
    };
    let result = VariantResult {
        variant,
        seed: cfg.seed,
        test: evaluate_test(&cfg, &out.model, &prepared.dataset)?,
        mean_raw_rho: mean_rho(&raw),
        mean_component_rho: mean_rho(&comp),
        intent,
        drift: drift_probe(&prepared.base, &out.model, &prepared.corpus)?,
        final_loss_src: mean(|r| r.loss_src),
        final_loss_rec: mean(|r| r.loss_rec),
    };
    Ok((result, out))
}

/// Conflict records of a finished run.
pub fn run_conflicts(out: &TrainOutcome, source: ConflictSource) -> Vec<ConflictRecord> {
    conflict_records(&out.reports, out.model.layer_names(), source)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
