//! Token layout and prompt formatting.
//!
//! ```text
//! [task] [TRUNC]? ([hist-tag] id_0 .. id_{L-1})* | [EMPTY_HIST]   query.. | [NO_QUERY]   [SEP]
//! ```

use serde::{Deserialize, Serialize};

use super::data::{EvalRecord, ItemId, Task};

pub const TASK_SRC: u32 = 0;
pub const TASK_REC: u32 = 1;
pub const HIST_SRC: u32 = 2;
pub const HIST_REC: u32 = 3;
pub const EMPTY_HIST: u32 = 4;
pub const NO_QUERY: u32 = 5;
pub const SEP: u32 = 6;
pub const TRUNC: u32 = 7;
const SPECIALS: u32 = 8;

/// Vocabulary geometry: specials, then one block of identifier tokens per
/// level, then cluster tokens, then general-domain tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub id_levels: usize,
    pub alphabet: usize,
    pub clusters: usize,
    pub general_tokens: usize,
}

impl Vocab {
    pub fn size(&self) -> usize {
        SPECIALS as usize + self.id_levels * self.alphabet + self.clusters + self.general_tokens
    }

    #[inline]
    pub fn id_token(&self, level: usize, symbol: u8) -> u32 {
        debug_assert!(level < self.id_levels && (symbol as usize) < self.alphabet);
        SPECIALS + (level * self.alphabet) as u32 + symbol as u32
    }

    /// First vocabulary id of the level's identifier block.
    #[inline]
    pub fn level_offset(&self, level: usize) -> usize {
        SPECIALS as usize + level * self.alphabet
    }

    pub fn cluster_token(&self, cluster: usize) -> u32 {
        debug_assert!(cluster < self.clusters);
        SPECIALS + (self.id_levels * self.alphabet + cluster) as u32
    }

    pub fn general_token(&self, idx: usize) -> u32 {
        debug_assert!(idx < self.general_tokens);
        SPECIALS + (self.id_levels * self.alphabet + self.clusters + idx) as u32
    }

    /// Decodes an identifier token back to `(level, symbol)`.
    pub fn decode_id_token(&self, tok: u32) -> Option<(usize, u8)> {
        let t = tok.checked_sub(SPECIALS)? as usize;
        if t < self.id_levels * self.alphabet {
            Some((t / self.alphabet, (t % self.alphabet) as u8))
        } else {
            None
        }
    }

    pub fn item_tokens(&self, item: &ItemId) -> Vec<u32> {
        item.symbols()
            .iter()
            .enumerate()
            .map(|(l, &s)| self.id_token(l, s))
            .collect()
    }
}

/// Prompt builder with a history cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptFormat {
    pub vocab: Vocab,
    pub history_max: usize,
}

impl PromptFormat {
    /// Most-recent `history_max` interactions are kept; when any are dropped a
    /// `TRUNC` marker follows the task tag.
    pub fn format(&self, record: &EvalRecord) -> Vec<u32> {
        self.format_parts(record.task, &record.history_items(), record.query.as_deref())
    }

    pub fn format_parts(&self, task: Task, history: &[(ItemId, Task)], query: Option<&[u32]>) -> Vec<u32> {
        let mut out = Vec::with_capacity(4 + history.len().min(self.history_max) * (self.vocab.id_levels + 1));
        out.push(match task {
            Task::Src => TASK_SRC,
            Task::Rec => TASK_REC,
        });
        let keep = history.len().min(self.history_max);
        let start = history.len() - keep;
        if start > 0 {
            out.push(TRUNC);
        }
        if keep == 0 {
            out.push(EMPTY_HIST);
        }
        for (item, behavior) in &history[start..] {
            out.push(match behavior {
                Task::Src => HIST_SRC,
                Task::Rec => HIST_REC,
            });
            out.extend(self.vocab.item_tokens(item));
        }
        match query {
            Some(q) if !q.is_empty() => out.extend_from_slice(q),
            _ => out.push(NO_QUERY),
        }
        out.push(SEP);
        out
    }

    /// Longest prompt this format can produce for a query of `query_len` tokens.
    pub fn max_prompt_len(&self, query_len: usize) -> usize {
        2 + self.history_max * (self.vocab.id_levels + 1) + query_len.max(1) + 1
    }
}
