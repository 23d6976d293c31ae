//! Command implementations behind the `gems` binary. Each command reads one
//! run config (plus `--key value` overrides), writes its outputs into a
//! staging directory and renames it into place only on success.

pub mod args;
pub mod commands;

use std::fs;
use std::path::{Path, PathBuf};

use gems_core::config::RunConfig;
use gems_core::{GemsError, Result};
use serde::Serialize;

pub const OUT_ENV: &str = "GEMS_OUT";

/// Exit code for an error: 2 config, 3 numeric, 4 I/O.
pub fn exit_code(e: &GemsError) -> i32 {
    match e {
        GemsError::NonFinite { .. } | GemsError::Numeric(_) | GemsError::DegenerateGradient(_) => 3,
        GemsError::Io(_) | GemsError::Format(_) | GemsError::Json(_) => 4,
        _ => 2,
    }
}

pub fn error_kind(e: &GemsError) -> &'static str {
    match exit_code(e) {
        3 => "numeric",
        4 => "io",
        _ => "config",
    }
}

/// `gems-error code=<n> kind=<kind> msg=<json string>` on a single line.
pub fn error_line(e: &GemsError) -> String {
    format!(
        "gems-error code={} kind={} msg={}",
        exit_code(e),
        error_kind(e),
        serde_json::Value::String(e.to_string())
    )
}

/// Resolved config and output root shared by all commands.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub root: PathBuf,
}

impl Context {
    /// `out` wins over `GEMS_OUT`, which wins over `config.output_dir`.
    pub fn load(config_path: Option<&Path>, overrides: &[(String, String)], out: Option<&Path>) -> Result<Self> {
        let base = match config_path {
            Some(p) => {
                let text = fs::read_to_string(p)?;
                RunConfig::from_json(&text)?
            }
            None => RunConfig::default(),
        };
        let config = base.with_overrides(overrides)?;
        let root = match (out, std::env::var_os(OUT_ENV)) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(env)) => PathBuf::from(env),
            (None, None) => PathBuf::from(&config.output_dir),
        };
        Ok(Context { config, root })
    }

    pub fn from_config(config: RunConfig, root: impl Into<PathBuf>) -> Self {
        Context {
            config,
            root: root.into(),
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Runs `f` against a fresh `<dest>.tmp` directory and renames it onto
/// `dest` when `f` succeeds; on failure the staging directory is removed.
pub fn stage<T>(dest: &Path, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = with_suffix(dest, ".tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    match f(&tmp) {
        Ok(v) => {
            if dest.exists() {
                fs::remove_dir_all(dest)?;
            }
            fs::rename(&tmp, dest)?;
            Ok(v)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

/// Single-file variant of [`stage`].
pub fn write_atomic(dest: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = with_suffix(dest, ".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, dest)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Identifies the command and config behind a directory of outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub config_hash: String,
    pub seed: u64,
    pub files: Vec<String>,
}

/// Writes `config.json` and `manifest.json` listing every file in `dir`.
pub fn finish_dir(dir: &Path, command: &str, config: &RunConfig) -> Result<()> {
    fs::write(dir.join("config.json"), config.to_json())?;
    let mut files: Vec<String> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<std::io::Result<_>>()?;
    files.push("manifest.json".into());
    files.sort();
    files.dedup();
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            command,
            config_hash: config.hash(),
            seed: config.seed,
            files,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_kind() {
        assert_eq!(exit_code(&GemsError::Config("x".into())), 2);
        assert_eq!(exit_code(&GemsError::Numeric("x".into())), 3);
        assert_eq!(exit_code(&GemsError::Io(std::io::Error::other("x"))), 4);
        let line = error_line(&GemsError::Config("bad\nvalue".into()));
        assert!(line.starts_with("gems-error code=2 kind=config msg=\""));
        assert!(!line.contains('\n'));
    }

    #[test]
    fn stage_renames_only_on_success() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("out");
        let err: Result<()> = stage(&dest, |tmp| {
            fs::write(tmp.join("partial"), b"x")?;
            Err(GemsError::Numeric("boom".into()))
        });
        assert!(err.is_err());
        assert!(!dest.exists());
        assert!(!with_suffix(&dest, ".tmp").exists());
        stage(&dest, |tmp| Ok(fs::write(tmp.join("done"), b"y")?)).unwrap();
        assert_eq!(fs::read(dest.join("done")).unwrap(), b"y");
    }
}
