//! TOML config files patched by repeated `--set dotted.key=value` flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use toml::{Table, Value};

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("bad override key {key:?}");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override {key:?}: {p:?} is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads `path` (or starts from defaults) and applies `sets` in order.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, sets: &[String]) -> Result<T> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<Table>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => Table::new(),
    };
    for s in sets {
        apply(&mut table, s)?;
    }
    Value::Table(table)
        .try_into()
        .context("invalid configuration")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_and_typed() {
        let mut t = Table::new();
        apply(&mut t, "optimizer.total_steps=50").unwrap();
        apply(&mut t, "model.norm=pre").unwrap();
        apply(&mut t, "seed = 3").unwrap();
        assert_eq!(t["optimizer"]["total_steps"].as_integer(), Some(50));
        assert_eq!(t["model"]["norm"].as_str(), Some("pre"));
        assert_eq!(t["seed"].as_integer(), Some(3));
        assert!(apply(&mut t, "seed.x=1").is_err());
        assert!(apply(&mut t, "nokey").is_err());
    }
}
