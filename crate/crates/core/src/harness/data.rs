//! Synthetic unified search/recommendation data with planted structure.
//!
//! Every item carries a short semantic identifier whose first symbol encodes
//! its cluster. Users belong to a latent cluster:
//!
//! * recommendation targets follow a fixed per-item successor (Markov) with
//!   probability `markov_follow`, otherwise a random item of the user's cluster;
//! * search targets are drawn from the user's cluster and the query is a noisy
//!   copy of the target's identifier plus its cluster token;
//! * within a cluster, item popularity is Zipf-like with exponent
//!   `popularity_skew`, and the two behaviors rank the items in opposite
//!   order, so the shared item prior is pulled in opposite directions.
//!
//! So history → item and query → item are both learnable but lean on different
//! features, which is what makes the two task gradients disagree.
//!
//! A separate general-domain set maps pairs of general tokens to identifiers
//! through fixed permutations; it stands in for pre-training knowledge and
//! feeds the probe corpus.

use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use sha2::{Digest, Sha256};
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{GemsError, Result};
use crate::rng::{SeedStreams, StreamRng};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Src,
    Rec,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Src => "src",
            Task::Rec => "rec",
        }
    }
}

/// Fixed-length semantic identifier: one symbol per level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(Vec<u8>);

impl ItemId {
    pub fn new(symbols: Vec<u8>) -> Self {
        ItemId(symbols)
    }
    pub fn symbols(&self) -> &[u8] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub item: ItemId,
    pub behavior: Task,
    /// Present iff `behavior == Src`.
    pub query: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub user: u32,
    pub history: Vec<Interaction>,
    pub query: Option<Vec<u32>>,
    pub target: ItemId,
    pub negatives: Vec<ItemId>,
    pub task: Task,
}

impl EvalRecord {
    pub fn history_items(&self) -> Vec<(ItemId, Task)> {
        self.history.iter().map(|i| (i.item.clone(), i.behavior)).collect()
    }

    /// Negatives in stored (sampled) order with the target inserted at a slot
    /// derived from a hash of the record. The slot is reproducible but carries
    /// no information about the target, so tie-breaks by candidate index are
    /// unbiased.
    pub fn candidates(&self) -> Vec<ItemId> {
        let mut h = Sha256::new();
        h.update(self.user.to_le_bytes());
        h.update(self.target.symbols());
        for n in &self.negatives {
            h.update(n.symbols());
        }
        let digest = h.finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        let slot = (u64::from_le_bytes(word) % (self.negatives.len() as u64 + 1)) as usize;
        let mut c = Vec::with_capacity(self.negatives.len() + 1);
        c.extend_from_slice(&self.negatives[..slot]);
        c.push(self.target.clone());
        c.extend_from_slice(&self.negatives[slot..]);
        c
    }

    pub fn validate(&self, expected_negatives: usize) -> Result<()> {
        if self.negatives.len() != expected_negatives {
            return Err(GemsError::Format(format!(
                "record for user {} has {} negatives, expected {expected_negatives}",
                self.user,
                self.negatives.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &self.negatives {
            if n == &self.target || !seen.insert(n) {
                return Err(GemsError::Format(format!(
                    "record for user {} has a duplicate or target-equal negative",
                    self.user
                )));
            }
        }
        if (self.task == Task::Src) != self.query.is_some() {
            return Err(GemsError::Format(format!(
                "record for user {}: query presence does not match task",
                self.user
            )));
        }
        for i in &self.history {
            if (i.behavior == Task::Src) != i.query.is_some() {
                return Err(GemsError::Format("history query presence does not match behavior".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub users: usize,
    pub items: usize,
    /// Interactions per user, including the held-out valid and test ones.
    pub history_len: usize,
    pub id_levels: usize,
    pub alphabet: usize,
    pub clusters: usize,
    pub negatives: usize,
    pub src_fraction: f64,
    pub markov_follow: f64,
    /// Zipf exponent of within-cluster popularity; 0 gives uniform picks.
    pub popularity_skew: f64,
    pub query_noise: f64,
    pub general_tokens: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            users: 200,
            items: 300,
            history_len: 10,
            id_levels: 3,
            alphabet: 16,
            clusters: 8,
            negatives: 99,
            src_fraction: 0.5,
            markov_follow: 0.8,
            popularity_skew: 1.5,
            query_noise: 0.1,
            general_tokens: 12,
        }
    }
}

impl DatasetConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            id_levels: self.id_levels,
            alphabet: self.alphabet,
            clusters: self.clusters,
            general_tokens: self.general_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GemsError::Config(msg));
        if self.users < 10 || self.items < 10 {
            return bad(format!("users and items must be >= 10 (got {}, {})", self.users, self.items));
        }
        if self.items < self.negatives + 1 {
            return bad(format!("{} items cannot supply {} negatives", self.items, self.negatives));
        }
        if self.history_len < 3 {
            return bad("history_len must be >= 3 for a leave-one-out split".into());
        }
        if self.id_levels == 0 || self.alphabet < 2 || self.alphabet > 256 {
            return bad("identifier needs >= 1 level and an alphabet in [2, 256]".into());
        }
        if self.clusters == 0 || self.clusters > self.alphabet {
            return bad("clusters must be in [1, alphabet]".into());
        }
        let codes = (self.alphabet as f64).powi(self.id_levels as i32);
        if (self.items as f64) > codes / 2.0 {
            return bad(format!("{} items do not fit comfortably in {codes} identifier codes", self.items));
        }
        if self.general_tokens < 2 || self.general_tokens > self.alphabet {
            return bad("general_tokens must be in [2, alphabet]".into());
        }
        if !(self.popularity_skew >= 0.0 && self.popularity_skew.is_finite()) {
            return bad("popularity_skew must be finite and >= 0".into());
        }
        for (name, p) in [
            ("src_fraction", self.src_fraction),
            ("markov_follow", self.markov_follow),
            ("query_noise", self.query_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0,1], got {p}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub items: Vec<ItemId>,
    pub item_cluster: Vec<usize>,
    pub train: Vec<EvalRecord>,
    pub valid: Vec<EvalRecord>,
    pub test: Vec<EvalRecord>,
    /// General-domain records: pre-training data and intent-preservation probes.
    pub general: Vec<EvalRecord>,
}

impl Dataset {
    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }
}

/// Builds the full dataset from the `dataset` stream of `seeds`.
pub fn generate_dataset(config: &DatasetConfig, seeds: &SeedStreams) -> Result<Dataset> {
    config.validate()?;
    let vocab = config.vocab();
    let mut rng = seeds.stream(SeedStreams::DATASET);

    let per_cluster = config.alphabet / config.clusters;
    let mut items = Vec::with_capacity(config.items);
    let mut item_cluster = Vec::with_capacity(config.items);
    let mut used = std::collections::BTreeSet::new();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); config.clusters];
    while items.len() < config.items {
        let cluster = items.len() % config.clusters;
        let mut sym = Vec::with_capacity(config.id_levels);
        sym.push((cluster * per_cluster + rng.random_range(0..per_cluster)) as u8);
        for _ in 1..config.id_levels {
            sym.push(rng.random_range(0..config.alphabet) as u8);
        }
        let id = ItemId::new(sym);
        if used.insert(id.clone()) {
            members[cluster].push(items.len());
            items.push(id);
            item_cluster.push(cluster);
        }
    }
    let successor: Vec<usize> = (0..config.items)
        .map(|i| *members[item_cluster[i]].choose(&mut rng).expect("non-empty cluster"))
        .collect();

    let popularity = |reverse: bool| -> Result<Vec<WeightedIndex<f64>>> {
        members
            .iter()
            .map(|pool| {
                let n = pool.len();
                let w = (0..n).map(|j| {
                    let rank = if reverse { n - j } else { j + 1 };
                    (rank as f64).powf(-config.popularity_skew)
                });
                WeightedIndex::new(w).map_err(|e| GemsError::Config(format!("popularity weights: {e}")))
            })
            .collect()
    };
    let src_pick = popularity(false)?;
    let rec_pick = popularity(true)?;

    let make_query = |rng: &mut StreamRng, item: usize| -> Vec<u32> {
        let mut q = vec![vocab.cluster_token(item_cluster[item])];
        for (l, &s) in items[item].symbols().iter().enumerate() {
            let s = if rng.random_bool(config.query_noise) {
                rng.random_range(0..config.alphabet) as u8
            } else {
                s
            };
            q.push(vocab.id_token(l, s));
        }
        q
    };

    let mut train = Vec::new();
    let mut valid = Vec::with_capacity(config.users);
    let mut test = Vec::with_capacity(config.users);
    for user in 0..config.users {
        let cluster = rng.random_range(0..config.clusters);
        let pool = &members[cluster];
        let mut seq: Vec<Interaction> = Vec::with_capacity(config.history_len);
        let mut prev: Option<usize> = None;
        for _ in 0..config.history_len {
            let task = if rng.random_bool(config.src_fraction) { Task::Src } else { Task::Rec };
            let item = match (task, prev) {
                (Task::Rec, Some(p)) if rng.random_bool(config.markov_follow) => successor[p],
                (Task::Src, _) => pool[src_pick[cluster].sample(&mut rng)],
                (Task::Rec, _) => pool[rec_pick[cluster].sample(&mut rng)],
            };
            let query = (task == Task::Src).then(|| make_query(&mut rng, item));
            seq.push(Interaction {
                item: items[item].clone(),
                behavior: task,
                query,
            });
            prev = Some(item);
        }
        let n = seq.len();
        for (pos, inter) in seq.iter().enumerate() {
            let negatives = sample_negatives(&mut rng, &items, &inter.item, config.negatives);
            let record = EvalRecord {
                user: user as u32,
                history: seq[..pos].to_vec(),
                query: inter.query.clone(),
                target: inter.item.clone(),
                negatives,
                task: inter.behavior,
            };
            if pos == n - 1 {
                test.push(record);
            } else if pos == n - 2 {
                valid.push(record);
            } else {
                train.push(record);
            }
        }
    }

    let general = general_domain_records(config, &vocab, &items, &mut rng);
    Ok(Dataset {
        config: config.clone(),
        items,
        item_cluster,
        train,
        valid,
        test,
        general,
    })
}

fn sample_negatives(rng: &mut StreamRng, items: &[ItemId], target: &ItemId, count: usize) -> Vec<ItemId> {
    let mut idx: Vec<usize> = (0..items.len()).filter(|&i| &items[i] != target).collect();
    idx.shuffle(rng);
    idx.truncate(count);
    idx.into_iter().map(|i| items[i].clone()).collect()
}

/// Every pair of general tokens `(a, b)` maps to an identifier through fixed
/// per-level permutations: level 0 from `a`, level 1 from `b`, deeper levels
/// from `(a + l·b) mod alphabet`.
fn general_domain_records(config: &DatasetConfig, vocab: &Vocab, items: &[ItemId], rng: &mut StreamRng) -> Vec<EvalRecord> {
    let perms: Vec<Vec<u8>> = (0..config.id_levels)
        .map(|_| {
            let mut p: Vec<u8> = (0..config.alphabet as u8).collect();
            p.shuffle(rng);
            p
        })
        .collect();
    let g = config.general_tokens;
    let mut out = Vec::with_capacity(g * g);
    for a in 0..g {
        for b in 0..g {
            let symbols: Vec<u8> = (0..config.id_levels)
                .map(|l| {
                    let key = match l {
                        0 => a,
                        1 => b,
                        _ => (a + l * b) % config.alphabet,
                    };
                    perms[l][key]
                })
                .collect();
            let target = ItemId::new(symbols);
            let negatives = sample_negatives(rng, items, &target, config.negatives);
            out.push(EvalRecord {
                user: u32::MAX,
                history: Vec::new(),
                query: Some(vec![vocab.general_token(a), vocab.general_token(b)]),
                target,
                negatives,
                task: Task::Src,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitHeader {
    pub schema_version: u32,
    pub split: String,
    pub records: usize,
}

/// Newline-delimited JSON: a header line, then one record per line.
pub fn write_records<W: Write>(mut w: W, split: &str, records: &[EvalRecord]) -> Result<()> {
    let header = SplitHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        split: split.to_string(),
        records: records.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(r: R) -> Result<(SplitHeader, Vec<EvalRecord>)> {
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| GemsError::Format("empty dataset file".into()))??;
    let header: SplitHeader = serde_json::from_str(&first)?;
    if header.schema_version != DATASET_SCHEMA_VERSION {
        return Err(GemsError::Format(format!(
            "unsupported dataset schema version {}",
            header.schema_version
        )));
    }
    let mut records = Vec::with_capacity(header.records);
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    if records.len() != header.records {
        return Err(GemsError::Format(format!(
            "header announces {} records, found {}",
            header.records,
            records.len()
        )));
    }
    Ok((header, records))
}
