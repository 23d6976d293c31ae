//! Hit@K / NDCG@K over 100-candidate lists.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::beam::{constrained_beam_search, IdScorer};
use super::data::{EvalRecord, ItemId, Task};
use super::vocab::PromptFormat;
use crate::error::{GemsError, Result};

/// 1-based rank of `target` in `ranking`, if present.
pub fn rank_of(ranking: &[ItemId], target: &ItemId) -> Option<usize> {
    ranking.iter().position(|r| r == target).map(|p| p + 1)
}

pub fn hit_at_k(ranking: &[ItemId], target: &ItemId, k: usize) -> f64 {
    match rank_of(ranking, target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_at_k(ranking: &[ItemId], target: &ItemId, k: usize) -> f64 {
    match rank_of(ranking, target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub beam_width: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![5, 10],
            beam_width: 20,
        }
    }
}

/// `task -> metric -> mean`, with an `all` row pooling both tasks.
pub type MetricsTable = BTreeMap<String, BTreeMap<String, f64>>;

/// Top-`k` decode of one record against its own candidate list.
pub fn rank_record<S: IdScorer>(scorer: &S, format: &PromptFormat, record: &EvalRecord, k: usize, beam_width: usize) -> Result<Vec<ItemId>> {
    let prompt = format.format(record);
    let cands = record.candidates();
    let ranked = constrained_beam_search(scorer, &prompt, &cands, k.min(cands.len()), beam_width)?;
    Ok(ranked.into_iter().map(|r| r.item).collect())
}

/// Whether the top-1 constrained decode equals the target.
pub fn top1_correct<S: IdScorer>(scorer: &S, format: &PromptFormat, record: &EvalRecord, beam_width: usize) -> Result<bool> {
    let r = rank_record(scorer, format, record, 1, beam_width)?;
    Ok(r.first() == Some(&record.target))
}

pub fn evaluate<S: IdScorer>(scorer: &S, format: &PromptFormat, records: &[EvalRecord], config: &EvalConfig) -> Result<MetricsTable> {
    if records.is_empty() {
        return Err(GemsError::Empty("evaluation records".into()));
    }
    let kmax = config.ks.iter().copied().max().ok_or_else(|| GemsError::Config("no K values".into()))?;
    let mut sums: BTreeMap<String, (BTreeMap<String, f64>, usize)> = BTreeMap::new();
    for rec in records {
        let ranking = rank_record(scorer, format, rec, kmax, config.beam_width)?;
        for key in [rec.task.as_str(), "all"] {
            let entry = sums.entry(key.to_string()).or_default();
            entry.1 += 1;
            for &k in &config.ks {
                *entry.0.entry(format!("hit@{k}")).or_default() += hit_at_k(&ranking, &rec.target, k);
                *entry.0.entry(format!("ndcg@{k}")).or_default() += ndcg_at_k(&ranking, &rec.target, k);
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(task, (m, n))| (task, m.into_iter().map(|(k, v)| (k, v / n as f64)).collect()))
        .collect())
}

/// Records of one task.
pub fn task_records(records: &[EvalRecord], task: Task) -> Vec<EvalRecord> {
    records.iter().filter(|r| r.task == task).cloned().collect()
}
