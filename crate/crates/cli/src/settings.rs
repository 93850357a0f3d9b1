//! Layered configuration (environment, config file, flags) and run directories.

use std::fs;
use std::path::{Path, PathBuf};

use landsynth::config::{format_pairs, read_pairs, Pairs};

pub const DATA_ROOT_ENV: &str = "LANDSYNTH_DATA_ROOT";
pub const RESOLVED_CONFIG: &str = "resolved.cfg";

#[derive(Debug)]
pub enum Failure {
    /// Bad invocation or configuration; exit code 2.
    Usage(String),
    /// Anything that went wrong while doing the work; exit code 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<landsynth::Error> for Failure {
    fn from(e: landsynth::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// A command's settings, addressable by `key = value` pairs.
pub trait Keyed: Default {
    fn set(&mut self, key: &str, value: &str) -> landsynth::Result<()>;
    fn to_pairs(&self) -> Pairs;
    fn validate(&self) -> landsynth::Result<()> {
        Ok(())
    }
    fn seed(&self) -> u64;
}

pub fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

pub fn path_pair(key: &str, value: &Option<PathBuf>) -> Option<(String, String)> {
    value
        .as_ref()
        .map(|p| (key.to_string(), absolute(p).display().to_string()))
}

/// Absolute form of a path so a replayed config works from any directory.
pub fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()))
}

fn upsert(pairs: &mut Pairs, key: &str, value: &str) {
    match pairs.iter_mut().find(|(k, _)| k == key) {
        Some(slot) => slot.1 = value.to_string(),
        None => pairs.push((key.to_string(), value.to_string())),
    }
}

/// Settings after merging every source, plus the keys shared by all commands.
pub struct Resolved<T> {
    pub cfg: T,
    pub data_root: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// Merges, lowest precedence first: the data-root environment variable,
/// the config file, then flags.
pub fn resolve<T: Keyed>(config: Option<&Path>, flags: Pairs) -> CliResult<Resolved<T>> {
    let mut merged = Pairs::new();
    if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
        if !root.is_empty() {
            upsert(&mut merged, "data_root", &root);
        }
    }
    if let Some(path) = config {
        let file = read_pairs(path).map_err(|e| usage(e.to_string()))?;
        for (k, v) in &file {
            upsert(&mut merged, k, v);
        }
    }
    for (k, v) in &flags {
        upsert(&mut merged, k, v);
    }
    let mut resolved = Resolved {
        cfg: T::default(),
        data_root: None,
        out_dir: PathBuf::from("runs"),
    };
    for (k, v) in &merged {
        match k.as_str() {
            "data_root" => resolved.data_root = optional_path(v),
            "out_dir" => resolved.out_dir = PathBuf::from(v),
            _ => resolved.cfg.set(k, v).map_err(|e| usage(e.to_string()))?,
        }
    }
    resolved.cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(resolved)
}

impl<T: Keyed> Resolved<T> {
    pub fn to_pairs(&self) -> Pairs {
        let mut pairs = vec![("out_dir".to_string(), absolute(&self.out_dir).display().to_string())];
        pairs.extend(path_pair("data_root", &self.data_root));
        pairs.extend(self.cfg.to_pairs());
        pairs
    }

    pub fn data_root(&self) -> CliResult<&Path> {
        self.data_root.as_deref().ok_or_else(|| {
            usage(format!(
                "no dataset root: pass --data-root, set data_root in the config file or set {DATA_ROOT_ENV}"
            ))
        })
    }

    /// Creates `<out_dir>/<timestamp>_seed<seed>` and writes the resolved
    /// configuration into it.
    pub fn create_run_dir(&self, command: &str) -> CliResult<PathBuf> {
        let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
        let base = format!("{stamp}_seed{}", self.cfg.seed());
        fs::create_dir_all(&self.out_dir)
            .map_err(|e| anyhow::anyhow!("cannot create {}: {e}", self.out_dir.display()))?;
        let mut dir = self.out_dir.join(&base);
        let mut n = 1;
        while dir.exists() {
            n += 1;
            dir = self.out_dir.join(format!("{base}_{n}"));
        }
        fs::create_dir(&dir).map_err(|e| anyhow::anyhow!("cannot create {}: {e}", dir.display()))?;
        let text = format!(
            "# replay with: landsynth {command} --config {}\n{}",
            RESOLVED_CONFIG,
            format_pairs(&self.to_pairs())
        );
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, text).map_err(|e| anyhow::anyhow!("cannot write {}: {e}", path.display()))?;
        println!("run directory: {}", dir.display());
        Ok(dir)
    }
}

/// `--set key=value` arguments as pairs.
pub fn parse_sets(sets: &[String]) -> CliResult<Pairs> {
    sets.iter()
        .map(|s| {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{s}'")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Help text listing every configuration key with its default.
pub fn defaults_help<T: Keyed>() -> String {
    let mut out = String::from("Configuration keys (config file or --set) and defaults:\n");
    out.push_str("  data_root = (none; falls back to $LANDSYNTH_DATA_ROOT)\n  out_dir = runs\n");
    for (k, v) in T::default().to_pairs() {
        out.push_str(&format!("  {k} = {}\n", if v.is_empty() { "(none)" } else { &v }));
    }
    out.push_str("\nPrecedence: flags > config file > environment.");
    out
}
