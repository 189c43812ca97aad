//! Config file loading and `--set` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use fedac_core::config::RunConfig;
use toml::{Table, Value};

/// A configuration problem; the binary exits with status 2 on these.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

pub fn load_table(path: &Path) -> Result<Table, ConfigError> {
    let text =
        fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())))
}

/// Parses a value as a TOML literal, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets a dotted key, creating intermediate tables.
pub fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return config_err(format!("invalid key `{key}`"));
    }
    let (last, parents) = parts.split_last().unwrap();
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return config_err(format!("`{p}` in `{key}` is not a table")),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Applies one `KEY=VALUE` override.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override `{spec}` is not KEY=VALUE")))?;
    set_path(table, key, parse_value(raw.trim()))
}

/// Splits `v1,v2,...` at top-level commas, keeping arrays and strings intact.
pub fn split_values(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    let mut cur = String::new();
    for ch in raw.chars() {
        match (quote, ch) {
            (Some(q), c) if c == q => quote = None,
            (Some(_), _) => {}
            (None, '"' | '\'') => quote = Some(ch),
            (None, '[' | '{') => depth += 1,
            (None, ']' | '}') => depth -= 1,
            (None, ',') if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    out.push(cur.trim().to_string());
    out
}

/// A resolved run: the core config plus the output directory.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub out_dir: Option<PathBuf>,
}

/// Turns a table into a validated config. `out_dir` is taken out first.
pub fn resolve(mut table: Table) -> Result<Resolved, ConfigError> {
    let out_dir = match table.remove("out_dir") {
        None => None,
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(other) => return config_err(format!("out_dir must be a string, got {other}")),
    };
    let config: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError(format!("invalid config: {}", e.message())))?;
    config
        .validate()
        .map_err(|e| ConfigError(format!("invalid config: {e}")))?;
    Ok(Resolved { config, out_dir })
}

pub fn to_toml(config: &RunConfig) -> Result<String, ConfigError> {
    toml::to_string_pretty(config).map_err(|e| ConfigError(format!("cannot serialize config: {e}")))
}
