//! Config-file loading and run snapshots. Every command accepts
//! `--config <file>` holding `key = value` lines with the same keys as its
//! long flags; explicit flags win over file values. After resolution the
//! command writes the full key set back out, so a run can be repeated from
//! its snapshot alone.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use keyscene::tensorio::ExpertSpec;

pub type CliError = Box<dyn std::error::Error>;

/// Key-value pairs from a config file. `#` starts a comment; blank lines
/// are ignored.
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn empty() -> Self {
        FileConfig { values: BTreeMap::new() }
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::empty()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected key = value", path.display(), i + 1))?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    /// Rejects keys this command does not understand, so a typo cannot
    /// silently fall back to a default.
    pub fn check_known(&self, known: &[&str]) -> Result<(), CliError> {
        for k in self.values.keys() {
            if !known.contains(&k.as_str()) {
                return Err(format!("unknown config key {k:?}").into());
            }
        }
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| format!("config key {key}: {e}").into()),
        }
    }

    pub fn get_path(&self, key: &str) -> Option<PathBuf> {
        self.values.get(key).map(PathBuf::from)
    }
}

/// Flag value if given, else config-file value, else the default.
pub fn pick<T: FromStr>(
    flag: Option<T>,
    cfg: &FileConfig,
    key: &str,
    default: T,
) -> Result<T, CliError>
where
    T::Err: Display,
{
    Ok(flag.or(cfg.get(key)?).unwrap_or(default))
}

/// Like [`pick`] but with no default: the value must come from somewhere.
pub fn require_path(
    flag: Option<PathBuf>,
    cfg: &FileConfig,
    key: &str,
) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.get_path(key))
        .ok_or_else(|| format!("missing required --{key}").into())
}

/// Writes `run_config.txt` into the output directory: one `key = value`
/// line per resolved setting, rerunnable via `--config`.
pub fn write_snapshot(
    out: &Path,
    command: &str,
    entries: &[(&str, String)],
) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    let mut text = format!("# command: {command}\n");
    for (k, v) in entries {
        text.push_str(&format!("{k} = {v}\n"));
    }
    let path = out.join("run_config.txt");
    std::fs::write(&path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    Ok(())
}

/// Parses an expert list of the form `name:dim,name:dim`.
pub fn parse_experts(raw: &str) -> Result<Vec<ExpertSpec>, CliError> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (name, dim) = part
            .split_once(':')
            .ok_or_else(|| format!("expert {part:?} is not name:dim"))?;
        let dim: usize = dim.trim().parse().map_err(|_| format!("bad expert dim in {part:?}"))?;
        if dim == 0 {
            return Err(format!("expert {name:?} has zero dim").into());
        }
        out.push(ExpertSpec { name: name.trim().to_string(), dim });
    }
    if out.is_empty() {
        return Err("expert list is empty".into());
    }
    Ok(out)
}

pub fn experts_to_string(experts: &[ExpertSpec]) -> String {
    experts
        .iter()
        .map(|e| format!("{}:{}", e.name, e.dim))
        .collect::<Vec<_>>()
        .join(",")
}

/// Filesystem-safe version of an identifier for use in artifact names.
pub fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect()
}
