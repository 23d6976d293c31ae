//! Paired-run ablation: every variant on the same dataset and base model,
//! repeated over several seeds, plus the directional checks.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{GemsError, Result};
use crate::experiment::{median, prepare, run_variant, VariantResult};
use crate::gems::Variant;

/// Required relative drop of component ρ from dense joint tuning to GEMS.
pub const CONFLICT_REDUCTION: f64 = 0.30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub median_hit5: f64,
    pub median_component_rho: Option<f64>,
    pub median_raw_rho: Option<f64>,
    pub median_flip_fraction: Option<f64>,
    pub median_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub test_records: usize,
    pub results: Vec<VariantResult>,
    pub summary: Vec<VariantSummary>,
    pub checks: Vec<Check>,
}

/// `0.05 + 3σ` for Hit@5 of a random ranker over `n` records with 100 candidates.
pub fn random_floor(hit_k: usize, candidates: usize, n: usize) -> f64 {
    let p = hit_k as f64 / candidates as f64;
    p + 3.0 * (p * (1.0 - p) / n.max(1) as f64).sqrt()
}

fn median_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| median(&mut v))
}

fn hit5(r: &VariantResult) -> f64 {
    r.test["all"]["hit@5"]
}

/// Runs `variants` for each seed in `seeds`; `config.seed` is replaced per seed.
pub fn run_ablation(config: &RunConfig, seeds: &[u64], variants: &[Variant]) -> Result<AblationReport> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(GemsError::InvalidArgument("ablation needs at least one seed and one variant".into()));
    }
    let mut results = Vec::with_capacity(seeds.len() * variants.len());
    let mut test_records = 0;
    for &seed in seeds {
        let mut cfg = config.clone();
        cfg.seed = seed;
        let prepared = prepare(&cfg)?;
        test_records = prepared.dataset.test.len();
        for &v in variants {
            let (r, _) = run_variant(&cfg, &prepared, v)?;
            log::info!(
                "seed {seed} {}: hit@5 {:.4} component rho {:?}",
                v.as_str(),
                hit5(&r),
                r.mean_component_rho
            );
            results.push(r);
        }
    }
    let summary = variants
        .iter()
        .map(|&v| {
            let rows: Vec<&VariantResult> = results.iter().filter(|r| r.variant == v).collect();
            VariantSummary {
                variant: v,
                median_hit5: median_of(rows.iter().map(|r| hit5(r))).unwrap_or(f64::NAN),
                median_component_rho: median_of(rows.iter().filter_map(|r| r.mean_component_rho)),
                median_raw_rho: median_of(rows.iter().filter_map(|r| r.mean_raw_rho)),
                median_flip_fraction: median_of(rows.iter().filter_map(|r| r.intent.map(|i| i.fraction))),
                median_drift: median_of(rows.iter().map(|r| r.drift)).unwrap_or(f64::NAN),
            }
        })
        .collect();
    let mut report = AblationReport {
        config_hash: config.hash(),
        seeds: seeds.to_vec(),
        test_records,
        results,
        summary,
        checks: Vec::new(),
    };
    report.checks = directional_checks(&report);
    Ok(report)
}

impl AblationReport {
    pub fn summary_of(&self, v: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == v)
    }

    fn paired(&self, a: Variant, b: Variant) -> Vec<(&VariantResult, &VariantResult)> {
        self.seeds
            .iter()
            .filter_map(|&s| {
                let find = |v| self.results.iter().find(|r| r.seed == s && r.variant == v);
                Some((find(a)?, find(b)?))
            })
            .collect()
    }

    /// Fixed-width side-by-side table followed by the check lines.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let mut s = format!(
            "config {}  seeds {:?}  test records {}\n{:<14} {:>8} {:>10} {:>10} {:>8} {:>8}\n",
            self.config_hash, self.seeds, self.test_records, "variant", "hit@5", "comp_rho", "raw_rho", "flips", "drift"
        );
        for r in &self.summary {
            s += &format!(
                "{:<14} {:>8.4} {:>10} {:>10} {:>8} {:>8.4}\n",
                r.variant.as_str(),
                r.median_hit5,
                opt(r.median_component_rho),
                opt(r.median_raw_rho),
                opt(r.median_flip_fraction),
                r.median_drift
            );
        }
        for c in &self.checks {
            s += &format!("[{}] {}: {}\n", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
        }
        s
    }
}

/// Checks that apply to whichever variants the report contains.
pub fn directional_checks(report: &AblationReport) -> Vec<Check> {
    let mut checks = Vec::new();
    let full = report.summary_of(Variant::Full);

    if let (Some(f), Some(d)) = (full, report.summary_of(Variant::DenseJoint)) {
        if let (Some(fr), Some(dr)) = (f.median_component_rho, d.median_component_rho) {
            let reduction = 1.0 - fr / dr;
            checks.push(Check {
                name: "conflict-reduction".into(),
                passed: reduction >= CONFLICT_REDUCTION,
                detail: format!(
                    "component rho full {fr:.4} vs dense-joint {dr:.4}: {:.1}% lower (need >= {:.0}%)",
                    100.0 * reduction,
                    100.0 * CONFLICT_REDUCTION
                ),
            });
        }
    }

    if let Some(f) = full {
        let rhos: Vec<(Variant, f64)> = report.summary.iter().filter_map(|s| Some((s.variant, s.median_component_rho?))).collect();
        if rhos.len() > 1 {
            let min = rhos.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
            if let Some(fr) = f.median_component_rho {
                checks.push(Check {
                    name: "full-has-lowest-rho".into(),
                    passed: fr <= min,
                    detail: format!("full {fr:.4}, minimum over variants {min:.4}"),
                });
            }
        }
    }

    if let (Some(f), Some(s)) = (full, report.summary_of(Variant::SharedOnly)) {
        let floor = random_floor(5, 100, report.test_records);
        checks.push(Check {
            name: "ablation-ordering".into(),
            passed: f.median_hit5 >= s.median_hit5 && s.median_hit5 >= floor,
            detail: format!(
                "hit@5 full {:.4} >= shared-only {:.4} >= floor {floor:.4}",
                f.median_hit5, s.median_hit5
            ),
        });
    }

    let pairs = report.paired(Variant::Full, Variant::NoNullspace);
    if !pairs.is_empty() {
        let mut ok = true;
        let mut parts = Vec::new();
        for (on, off) in &pairs {
            let flips_ok = match (on.intent, off.intent) {
                (Some(a), Some(b)) => a.fraction <= b.fraction,
                _ => false,
            };
            let drift_ok = on.drift < off.drift;
            ok &= flips_ok && drift_ok;
            parts.push(format!(
                "seed {}: flips {} vs {}, drift {:.4} vs {:.4}",
                on.seed,
                on.intent.map(|i| format!("{:.4}", i.fraction)).unwrap_or_else(|| "-".into()),
                off.intent.map(|i| format!("{:.4}", i.fraction)).unwrap_or_else(|| "-".into()),
                on.drift,
                off.drift
            ));
        }
        checks.push(Check {
            name: "intent-preservation".into(),
            passed: ok,
            detail: parts.join("; "),
        });
    }
    checks
}
