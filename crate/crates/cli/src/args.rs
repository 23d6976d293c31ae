//! Command-line surface. Fixed flags are parsed by clap; every other
//! `--key value` (or `--key=value`) pair is a config override.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Flags owned by the commands themselves; anything else is an override.
const COMMAND_FLAGS: &[&str] = &[
    "config",
    "out",
    "checkpoint",
    "base",
    "projectors",
    "data",
    "split",
    "run",
    "seeds",
    "help",
    "version",
];

#[derive(Debug, Parser)]
#[command(name = "gems", version, about = "Gradient multi-subspace tuning on a synthetic search/recommendation benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run config (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output root; overrides GEMS_OUT and the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the dataset splits as JSON lines.
    GenData(Common),
    /// Train the base model on the general-domain records.
    Pretrain(Common),
    /// Build per-layer knowledge projectors from a base checkpoint.
    NullspaceBuild {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint; defaults to <out>/base/checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Tune with the configured variant and write checkpoint and logs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint instead of pre-training inline.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Load projectors from this directory instead of building them.
        #[arg(long)]
        projectors: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by gen-data; regenerated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Turn a training run's conflict logs into heatmaps.
    Conflict {
        #[command(flatten)]
        common: Common,
        /// Directory written by train.
        #[arg(long)]
        run: PathBuf,
    },
    /// Compare closed-form optimizer memory with live allocations.
    Audit(Common),
    /// Run every variant over several seeds and check the expected ordering.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Pretrain(c) | Command::Audit(c) => c,
            Command::NullspaceBuild { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Conflict { common, .. }
            | Command::Ablate { common, .. } => common,
        }
    }
}

/// Splits argv into what clap should see and the `(key, value)` overrides.
pub fn split_overrides(argv: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>), String> {
    let mut kept = Vec::with_capacity(argv.len());
    let mut overrides = Vec::new();
    let mut it = argv.into_iter();
    // Program name and the subcommand stay untouched.
    kept.extend(it.by_ref().take(2));
    while let Some(arg) = it.next() {
        let Some(s) = arg.to_str().and_then(|s| s.strip_prefix("--")) else {
            kept.push(arg);
            continue;
        };
        let (key, inline) = match s.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (s.to_string(), None),
        };
        if key.is_empty() || COMMAND_FLAGS.contains(&key.as_str()) {
            kept.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| format!("override --{key} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((kept, overrides))
}
