//! Conflict coefficients, intent preservation and optimizer-state accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{GemsError, Result};
use crate::gems::{rho, LayerTuner, StepReport};
use crate::harness::beam::IdScorer;
use crate::harness::data::EvalRecord;
use crate::harness::metrics::top1_correct;
use crate::harness::vocab::PromptFormat;
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Query,
    Key,
    Value,
    Output,
    FfnUp,
    FfnDown,
    Other,
}

impl LayerKind {
    const TABLE: [(&'static str, LayerKind); 6] = [
        ("attn.query", LayerKind::Query),
        ("attn.key", LayerKind::Key),
        ("attn.value", LayerKind::Value),
        ("attn.output", LayerKind::Output),
        ("ffn.up", LayerKind::FfnUp),
        ("ffn.down", LayerKind::FfnDown),
    ];

    pub fn from_layer_name(name: &str) -> LayerKind {
        Self::TABLE
            .iter()
            .find(|(suffix, _)| name.ends_with(suffix))
            .map(|&(_, k)| k)
            .unwrap_or(LayerKind::Other)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Query => "query",
            LayerKind::Key => "key",
            LayerKind::Value => "value",
            LayerKind::Output => "output",
            LayerKind::FfnUp => "ffn_up",
            LayerKind::FfnDown => "ffn_down",
            LayerKind::Other => "other",
        }
    }
}

/// One layer's conflict at one step; `rho` is `None` for a zero operand.
#[derive(Debug, Clone, PartialEq)]
pub struct ConflictRecord {
    pub step: u64,
    pub layer_index: usize,
    pub layer_name: String,
    pub layer_kind: LayerKind,
    pub rho: Option<f64>,
}

/// `1 - cos(g_src, g_rec)`, or `None` when either gradient is zero.
pub fn conflict_coefficient(g_src: &Matrix, g_rec: &Matrix) -> Result<Option<f64>> {
    rho(g_src, g_rec)
}

/// Which conflict a record set describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConflictSource {
    RawGradient,
    AppliedComponents,
}

/// Flattens step reports into per-layer records, sorted by `(step, layer)`.
pub fn conflict_records(reports: &[StepReport], names: &[String], source: ConflictSource) -> Vec<ConflictRecord> {
    let mut out = Vec::with_capacity(reports.len() * names.len());
    for r in reports {
        for (i, (l, name)) in r.layers.iter().zip(names).enumerate() {
            out.push(ConflictRecord {
                step: r.step,
                layer_index: i,
                layer_name: name.clone(),
                layer_kind: LayerKind::from_layer_name(name),
                rho: match source {
                    ConflictSource::RawGradient => l.raw_rho,
                    ConflictSource::AppliedComponents => l.component_rho,
                },
            });
        }
    }
    out.sort_by_key(|r| (r.step, r.layer_index));
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12e}")).unwrap_or_default()
}

/// `step,layer,kind,rho`; degenerate entries leave `rho` empty.
pub fn conflict_csv(records: &[ConflictRecord]) -> String {
    let mut s = String::from("step,layer,kind,rho\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.layer_name, r.layer_kind.as_str(), fmt_opt(r.rho));
    }
    s
}

/// Inverse of [`conflict_csv`]. Layer indices follow the order in which
/// layers first appear within a step.
pub fn parse_conflict_csv(text: &str) -> Result<Vec<ConflictRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some("step,layer,kind,rho") {
        return Err(GemsError::Format("conflict csv: missing or wrong header".into()));
    }
    let mut out = Vec::new();
    let mut last_step = None;
    let mut index = 0;
    for (no, line) in lines.enumerate() {
        let bad = || GemsError::Format(format!("conflict csv line {}: {line:?}", no + 2));
        let fields: Vec<&str> = line.split(',').collect();
        let [step, name, _kind, rho] = fields.as_slice() else {
            return Err(bad());
        };
        let step: u64 = step.parse().map_err(|_| bad())?;
        if last_step != Some(step) {
            last_step = Some(step);
            index = 0;
        }
        let rho = if rho.is_empty() { None } else { Some(rho.parse::<f64>().map_err(|_| bad())?) };
        out.push(ConflictRecord {
            step,
            layer_index: index,
            layer_name: name.to_string(),
            layer_kind: LayerKind::from_layer_name(name),
            rho,
        });
        index += 1;
    }
    Ok(out)
}

/// Mean ρ bucketed by layer kind and training-phase decile.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub cells: BTreeMap<(LayerKind, u8), (f64, usize)>,
}

impl Heatmap {
    pub fn mean(&self, kind: LayerKind, phase: u8) -> Option<f64> {
        self.cells.get(&(kind, phase)).map(|&(s, n)| s / n as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,phase,mean_rho,count\n");
        for (&(kind, phase), &(sum, n)) in &self.cells {
            let _ = writeln!(s, "{},{},{:.12e},{}", kind.as_str(), phase, sum / n as f64, n);
        }
        s
    }
}

/// Decile of `step` within a run of `total_steps` steps.
pub fn phase_decile(step: u64, total_steps: u64) -> u8 {
    let total = total_steps.max(1);
    ((step.min(total - 1) * 10) / total) as u8
}

pub fn conflict_heatmap(records: &[ConflictRecord], total_steps: u64) -> Result<Heatmap> {
    if records.is_empty() {
        return Err(GemsError::Empty("conflict records".into()));
    }
    let mut cells: BTreeMap<(LayerKind, u8), (f64, usize)> = BTreeMap::new();
    for r in records {
        if let Some(rho) = r.rho {
            let e = cells.entry((r.layer_kind, phase_decile(r.step, total_steps))).or_default();
            e.0 += rho;
            e.1 += 1;
        }
    }
    Ok(Heatmap { cells })
}

/// Mean of the non-degenerate ρ values.
pub fn mean_rho(records: &[ConflictRecord]) -> Option<f64> {
    let v: Vec<f64> = records.iter().filter_map(|r| r.rho).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentReport {
    pub base_correct: usize,
    pub flipped: usize,
    pub fraction: f64,
}

/// Share of base-correct records that the tuned model gets wrong.
pub fn flip_fraction(base_correct: &[bool], tuned_correct: &[bool]) -> Result<IntentReport> {
    if base_correct.len() != tuned_correct.len() {
        return Err(GemsError::InvalidArgument("outcome lists differ in length".into()));
    }
    let base = base_correct.iter().filter(|&&b| b).count();
    if base == 0 {
        return Err(GemsError::DegenerateGradient(
            "intent preservation undefined: base model is correct on no probe record".into(),
        ));
    }
    let flipped = base_correct.iter().zip(tuned_correct).filter(|&(&b, &t)| b && !t).count();
    Ok(IntentReport {
        base_correct: base,
        flipped,
        fraction: flipped as f64 / base as f64,
    })
}

/// Top-1 outcomes for every record.
pub fn top1_outcomes<S: IdScorer>(scorer: &S, format: &PromptFormat, records: &[EvalRecord], beam_width: usize) -> Result<Vec<bool>> {
    records.iter().map(|r| top1_correct(scorer, format, r, beam_width)).collect()
}

pub fn intent_preservation<S: IdScorer>(
    base: &S,
    tuned: &S,
    format: &PromptFormat,
    records: &[EvalRecord],
    beam_width: usize,
) -> Result<IntentReport> {
    let b = top1_outcomes(base, format, records, beam_width)?;
    let t = top1_outcomes(tuned, format, records, beam_width)?;
    flip_fraction(&b, &t)
}

/// Closed-form element counts for one `m x n` layer at rank `r` (`m ≤ n`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryAudit {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub gems_weights: usize,
    pub gems_states: usize,
    pub lora_weights: usize,
    pub lora_states: usize,
}

/// Swaps `m` and `n` when `m > n` so the smaller side carries the basis.
pub fn memory_audit(m: usize, n: usize, r: usize) -> MemoryAudit {
    let (m, n) = if m > n {
        log::warn!("memory_audit: m = {m} > n = {n}, swapping");
        (n, m)
    } else {
        (m, n)
    };
    MemoryAudit {
        m,
        n,
        r,
        gems_weights: m * n,
        gems_states: 2 * m * r + 4 * n * r,
        lora_weights: m * n + m * r + n * r,
        lora_states: 2 * m * r + 2 * n * r,
    }
}

/// Closed form next to the live allocation of one layer's tuner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAudit {
    pub layer: String,
    pub audit: MemoryAudit,
    pub live_weights: usize,
    pub live_basis: usize,
    pub live_moments: usize,
    pub matches: bool,
}

pub fn audit_layer(tuner: &LayerTuner, weight: &Matrix, rank: usize) -> LayerAudit {
    let audit = memory_audit(tuner.shape.0, tuner.shape.1, rank);
    let (basis, moments) = tuner.allocation_counts();
    let live_weights = weight.len();
    LayerAudit {
        layer: tuner.name.clone(),
        audit,
        live_weights,
        live_basis: basis,
        live_moments: moments,
        matches: live_weights == audit.gems_weights && basis + moments == audit.gems_states,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gems::{GemsConfig, LayerReport};
    use proptest::prelude::*;

    #[test]
    fn conflict_csv_round_trip() {
        let records = vec![
            ConflictRecord {
                step: 0,
                layer_index: 0,
                layer_name: "embed".into(),
                layer_kind: LayerKind::Other,
                rho: Some(0.25),
            },
            ConflictRecord {
                step: 0,
                layer_index: 1,
                layer_name: "blocks.0.attn.query".into(),
                layer_kind: LayerKind::Query,
                rho: None,
            },
            ConflictRecord {
                step: 1,
                layer_index: 0,
                layer_name: "embed".into(),
                layer_kind: LayerKind::Other,
                rho: Some(0.375),
            },
        ];
        let text = conflict_csv(&records);
        assert_eq!(parse_conflict_csv(&text).unwrap(), records);
        assert!(parse_conflict_csv("step,rho\n").is_err());
        assert!(parse_conflict_csv("step,layer,kind,rho\nx,embed,other,\n").is_err());
    }

    #[test]
    fn layer_kind_mapping() {
        assert_eq!(LayerKind::from_layer_name("blocks.1.attn.query"), LayerKind::Query);
        assert_eq!(LayerKind::from_layer_name("blocks.0.ffn.down"), LayerKind::FfnDown);
        assert_eq!(LayerKind::from_layer_name("embed"), LayerKind::Other);
    }

    #[test]
    fn rho_closed_forms() {
        let g = Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap();
        assert!(conflict_coefficient(&g, &g).unwrap().unwrap().abs() < 1e-15);
        assert!((conflict_coefficient(&g, &g.scale(-1.0)).unwrap().unwrap() - 2.0).abs() < 1e-15);
        let a = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[&[0.0, 1.0]]).unwrap();
        assert_eq!(conflict_coefficient(&a, &b).unwrap(), Some(1.0));
        assert_eq!(conflict_coefficient(&a, &Matrix::zeros(1, 2)).unwrap(), None);
    }

    proptest! {
        #[test]
        fn rho_bounds_symmetry_scale(a in prop::collection::vec(-10.0f64..10.0, 6), b in prop::collection::vec(-10.0f64..10.0, 6), c in 1e-3f64..1e3) {
            let ma = Matrix::new(2, 3, a).unwrap();
            let mb = Matrix::new(2, 3, b).unwrap();
            prop_assume!(ma.frobenius_norm() > 1e-6 && mb.frobenius_norm() > 1e-6);
            let r = conflict_coefficient(&ma, &mb).unwrap().unwrap();
            prop_assert!((0.0..=2.0).contains(&r));
            prop_assert!((r - conflict_coefficient(&mb, &ma).unwrap().unwrap()).abs() < 1e-15);
            prop_assert!((r - conflict_coefficient(&ma.scale(c), &mb).unwrap().unwrap()).abs() < 1e-10);
        }
    }

    fn record(step: u64, name: &str, rho: f64) -> ConflictRecord {
        ConflictRecord {
            step,
            layer_index: 0,
            layer_name: name.into(),
            layer_kind: LayerKind::from_layer_name(name),
            rho: Some(rho),
        }
    }

    #[test]
    fn heatmap_small_cases() {
        let h = conflict_heatmap(&[record(0, "blocks.0.attn.key", 0.7)], 1).unwrap();
        assert_eq!(h.cells.len(), 1);
        assert_eq!(h.mean(LayerKind::Key, 0), Some(0.7));
        let h = conflict_heatmap(&[record(0, "blocks.0.attn.key", 0.0), record(1, "blocks.1.attn.key", 2.0)], 10).unwrap();
        assert_eq!(h.mean(LayerKind::Key, 0), Some(0.0));
        let h = conflict_heatmap(&[record(0, "blocks.0.attn.key", 0.0), record(0, "blocks.1.attn.key", 2.0)], 10).unwrap();
        assert_eq!(h.mean(LayerKind::Key, 0), Some(1.0));
        assert!(conflict_heatmap(&[], 10).is_err());
        assert_eq!(phase_decile(99, 100), 9);
        assert_eq!(phase_decile(10, 100), 1);
    }

    #[test]
    fn records_sorted_and_csv_stable() {
        let names = vec!["embed".to_string(), "blocks.0.attn.query".to_string()];
        let rep = |step, a: Option<f64>, b| StepReport {
            step,
            loss_src: 1.0,
            loss_rec: 1.0,
            alpha_src: 0.5,
            alpha_rec: 0.5,
            layers: vec![
                LayerReport {
                    raw_rho: a,
                    component_rho: None,
                    update_norm: 0.0,
                },
                LayerReport {
                    raw_rho: Some(b),
                    component_rho: None,
                    update_norm: 0.0,
                },
            ],
            wall_ms: 0.0,
        };
        let recs = conflict_records(&[rep(1, Some(0.5), 1.5), rep(0, None, 1.0)], &names, ConflictSource::RawGradient);
        assert_eq!(recs[0].step, 0);
        assert_eq!(recs[0].rho, None);
        assert_eq!(mean_rho(&recs), Some(1.0));
        let csv = conflict_csv(&recs);
        assert_eq!(csv.lines().nth(1).unwrap(), "0,embed,other,");
        assert_eq!(csv, conflict_csv(&recs));
    }

    #[test]
    fn flip_fraction_cases() {
        let b = [true, true, true, true, false];
        assert_eq!(flip_fraction(&b, &b).unwrap().fraction, 0.0);
        let t = [true, false, true, true, true];
        assert_eq!(flip_fraction(&b, &t).unwrap().fraction, 0.25);
        assert!(flip_fraction(&[false], &[true]).is_err());
        // adding a never-flipped record cannot raise the fraction
        let b2 = [true, true, true, true, false, true];
        let t2 = [true, false, true, true, true, true];
        assert!(flip_fraction(&b2, &t2).unwrap().fraction <= 0.25);
    }

    #[test]
    fn audit_closed_forms() {
        let a = memory_audit(4, 4, 2);
        assert_eq!((a.gems_states, a.lora_states), (48, 32));
        assert_eq!((a.gems_weights, a.lora_weights), (16, 32));
        let z = memory_audit(4, 4, 0);
        assert_eq!((z.gems_states, z.lora_states, z.gems_weights, z.lora_weights), (0, 0, 16, 16));
        assert_eq!(memory_audit(6, 3, 2), memory_audit(3, 6, 2));
    }

    #[test]
    fn live_counts_match_closed_form() {
        let config = GemsConfig {
            rank: 2,
            ..GemsConfig::default()
        };
        for (m, n) in [(4, 4), (3, 7), (9, 5)] {
            let t = LayerTuner::new("l", (m, n), &config).unwrap();
            let a = audit_layer(&t, &Matrix::zeros(m, n), 2);
            assert!(a.matches, "{a:?}");
        }
        let t = LayerTuner::new("l", (4, 4), &config).unwrap();
        let a = audit_layer(&t, &Matrix::zeros(4, 4), 2);
        assert_eq!(a.live_basis + a.live_moments, 48);
    }
}
