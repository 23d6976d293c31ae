//! Trie-constrained beam search over candidate identifiers.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::data::ItemId;
use super::model::{KvCache, ToyModel};
use crate::error::{GemsError, Result};

/// Anything that can score identifier tokens level by level.
pub trait IdScorer {
    type State: Clone;
    fn begin(&self, prompt: &[u32]) -> Result<Self::State>;
    /// Log-probabilities over the full alphabet of `level`.
    fn level_log_probs(&self, state: &Self::State, level: usize) -> Vec<f64>;
    fn advance(&self, state: &mut Self::State, level: usize, symbol: u8) -> Result<()>;
}

impl IdScorer for ToyModel {
    type State = KvCache;

    fn begin(&self, prompt: &[u32]) -> Result<KvCache> {
        ToyModel::begin(self, prompt)
    }

    fn level_log_probs(&self, state: &KvCache, level: usize) -> Vec<f64> {
        self.cache_log_probs(state, level)
    }

    fn advance(&self, state: &mut KvCache, level: usize, symbol: u8) -> Result<()> {
        let tok = self.vocab().id_token(level, symbol);
        ToyModel::advance(self, state, tok)
    }
}

/// One ranked candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub index: usize,
    pub item: ItemId,
    pub score: f64,
}

struct Beam<S> {
    members: Vec<usize>,
    score: f64,
    state: S,
}

fn order(a_score: f64, a_idx: usize, b_score: f64, b_idx: usize) -> Ordering {
    b_score.total_cmp(&a_score).then(a_idx.cmp(&b_idx))
}

fn check_candidates(candidates: &[ItemId], k: usize) -> Result<usize> {
    let levels = candidates
        .first()
        .ok_or_else(|| GemsError::Empty("candidate list".into()))?
        .len();
    if candidates.iter().any(|c| c.len() != levels) || levels == 0 {
        return Err(GemsError::InvalidArgument("candidates must share a positive length".into()));
    }
    if k == 0 || k > candidates.len() {
        return Err(GemsError::InvalidArgument(format!(
            "K = {k} must be in 1..={}",
            candidates.len()
        )));
    }
    Ok(levels)
}

/// Top-`k` candidates by summed log-probability. Each beam carries the set of
/// candidates sharing its prefix; a beam's tie-break key is the smallest
/// candidate index in that set.
pub fn constrained_beam_search<S: IdScorer>(
    scorer: &S,
    prompt: &[u32],
    candidates: &[ItemId],
    k: usize,
    beam_width: usize,
) -> Result<Vec<Ranked>> {
    let levels = check_candidates(candidates, k)?;
    let width = beam_width.max(k);
    let mut beams = vec![Beam {
        members: (0..candidates.len()).collect(),
        score: 0.0,
        state: scorer.begin(prompt)?,
    }];
    for level in 0..levels {
        let mut expanded: Vec<(usize, Vec<usize>, f64)> = Vec::new();
        for (b, beam) in beams.iter().enumerate() {
            let lp = scorer.level_log_probs(&beam.state, level);
            let mut groups: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
            for &c in &beam.members {
                groups.entry(candidates[c].symbols()[level]).or_default().push(c);
            }
            for (sym, members) in groups {
                expanded.push((b, members, beam.score + lp[sym as usize]));
            }
        }
        expanded.sort_by(|a, b| order(a.2, a.1[0], b.2, b.1[0]));
        expanded.truncate(width);
        let last = level + 1 == levels;
        let mut next = Vec::with_capacity(expanded.len());
        for (b, members, score) in expanded {
            let mut state = beams[b].state.clone();
            if !last {
                let sym = candidates[members[0]].symbols()[level];
                scorer.advance(&mut state, level, sym)?;
            }
            next.push(Beam { members, score, state });
        }
        beams = next;
    }
    let mut out: Vec<Ranked> = beams
        .into_iter()
        .map(|b| Ranked {
            index: b.members[0],
            item: candidates[b.members[0]].clone(),
            score: b.score,
        })
        .collect();
    out.sort_by(|a, b| order(a.score, a.index, b.score, b.index));
    out.truncate(k);
    Ok(out)
}

/// Scores every candidate independently and sorts; the reference for beam search.
pub fn exhaustive_ranking<S: IdScorer>(scorer: &S, prompt: &[u32], candidates: &[ItemId]) -> Result<Vec<Ranked>> {
    let levels = check_candidates(candidates, 1)?;
    let start = scorer.begin(prompt)?;
    let mut out = Vec::with_capacity(candidates.len());
    for (index, c) in candidates.iter().enumerate() {
        let mut state = start.clone();
        let mut score = 0.0;
        for level in 0..levels {
            let sym = c.symbols()[level];
            score += scorer.level_log_probs(&state, level)[sym as usize];
            if level + 1 < levels {
                scorer.advance(&mut state, level, sym)?;
            }
        }
        out.push(Ranked {
            index,
            item: c.clone(),
            score,
        });
    }
    out.sort_by(|a, b| order(a.score, a.index, b.score, b.index));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::model::ModelConfig;
    use crate::harness::vocab::Vocab;
    use crate::rng::SeedStreams;
    use rand::Rng;

    fn vocab() -> Vocab {
        Vocab {
            id_levels: 3,
            alphabet: 8,
            clusters: 2,
            general_tokens: 2,
        }
    }

    fn model(seed: u64) -> ToyModel {
        let cfg = ModelConfig {
            d_model: 8,
            n_blocks: 1,
            ffn_width: 8,
            ctx_len: 16,
        };
        let mut m = ToyModel::new(cfg, vocab(), &mut SeedStreams::new(seed).stream(SeedStreams::INIT)).unwrap();
        // sharpen the head so scores differ substantially
        m.weights_mut()[0].scale_in_place(3.0);
        m
    }

    fn candidates(seed: u64, n: usize) -> Vec<ItemId> {
        let mut rng = SeedStreams::new(seed).stream("cands");
        let mut set = std::collections::BTreeSet::new();
        while set.len() < n {
            set.insert(ItemId::new((0..3).map(|_| rng.random_range(0..8u8)).collect()));
        }
        set.into_iter().collect()
    }

    #[test]
    fn single_candidate_gets_its_sequence_log_prob() {
        let m = model(1);
        let c = vec![ItemId::new(vec![1, 2, 3])];
        let prompt = [0u32, 4, 5, 6];
        let r = constrained_beam_search(&m, &prompt, &c, 1, 4).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].index, 0);
        assert!((r[0].score + m.nll(&prompt, &c[0]).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn uniform_model_ranks_in_index_order() {
        let m = ToyModel::zeros(*model(1).config(), vocab()).unwrap();
        let c = candidates(3, 40);
        let r = constrained_beam_search(&m, &[0, 6], &c, 10, 20).unwrap();
        let idx: Vec<usize> = r.iter().map(|x| x.index).collect();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn full_width_beam_equals_exhaustive() {
        for seed in 0..3 {
            let m = model(seed);
            let c = candidates(seed + 10, 100);
            let prompt = [1u32, 2, 8, 9, 10, 5, 6];
            let beam = constrained_beam_search(&m, &prompt, &c, 100, 100).unwrap();
            let exh = exhaustive_ranking(&m, &prompt, &c).unwrap();
            let bi: Vec<usize> = beam.iter().map(|x| x.index).collect();
            let ei: Vec<usize> = exh.iter().map(|x| x.index).collect();
            assert_eq!(bi, ei);
            for (a, b) in beam.iter().zip(&exh) {
                assert!((a.score - b.score).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_bad_k() {
        let m = model(0);
        let c = candidates(0, 5);
        assert!(constrained_beam_search(&m, &[0], &c, 6, 10).is_err());
        assert!(constrained_beam_search(&m, &[0], &[], 1, 10).is_err());
    }
}
