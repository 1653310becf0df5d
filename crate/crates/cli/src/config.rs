//! TOML config files with `MIDNET_<SECTION>__<KEY>` environment overrides.

use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "MIDNET_";

/// A user-facing error that maps to exit code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.into()))
}

fn read_table(path: &Path) -> anyhow::Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Environment overrides for one section, sorted by variable name.
pub fn env_overrides(section: &str) -> Vec<(Vec<String>, String)> {
    let prefix = format!("{ENV_PREFIX}{}__", section.to_uppercase());
    let mut out: Vec<(Vec<String>, String)> = std::env::vars()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(&prefix)?;
            let path: Vec<String> = rest.split("__").map(|s| s.to_lowercase()).collect();
            (!path.iter().any(String::is_empty)).then_some((path, v))
        })
        .collect();
    out.sort();
    out
}

fn apply_overrides(table: &mut Table, section: &str) -> anyhow::Result<()> {
    for (path, raw) in env_overrides(section) {
        let (last, parents) = path.split_last().expect("non-empty");
        let mut t = &mut *table;
        for p in parents {
            let entry = t.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
            t = entry.as_table_mut().ok_or_else(|| {
                invalid(format!("{ENV_PREFIX}{}__{}: `{p}` is not a table", section.to_uppercase(), path.join("__").to_uppercase()))
            })?;
        }
        t.insert(last.clone(), parse_value(&raw));
    }
    Ok(())
}

/// Loads a section from an optional file, then applies env overrides.
/// A missing file falls back to the type's defaults.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, section: &str) -> anyhow::Result<T> {
    let mut table = match path {
        Some(p) => read_table(p)?,
        None => Table::new(),
    };
    apply_overrides(&mut table, section)?;
    let origin = path.map(|p| p.display().to_string()).unwrap_or_else(|| format!("[{section}] defaults"));
    table
        .try_into()
        .map_err(|e| invalid(format!("{origin}: {e}")))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

/// Where a resolved value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// A default taken from the published training setup.
    Published,
    /// A default chosen for small CPU runs.
    Desk,
    /// Set by a file, an env override or a flag.
    Set,
}

impl Origin {
    fn tag(self) -> &'static str {
        match self {
            Origin::Published => "published default",
            Origin::Desk => "desk-scale default",
            Origin::Set => "set",
        }
    }
}

/// Renders a resolved section as dotted TOML keys, each annotated with its
/// origin. `published_keys` lists the defaults that follow the published setup.
pub fn render<T: Serialize>(section: &str, value: &T, default: Option<&T>, published_keys: &[&str]) -> anyhow::Result<String> {
    let mut cur = Vec::new();
    flatten("", &Value::try_from(value)?, &mut cur);
    let mut def = Vec::new();
    if let Some(d) = default {
        flatten("", &Value::try_from(d)?, &mut def);
    }
    let mut out = String::new();
    for (k, v) in cur {
        let origin = match def.iter().find(|(dk, _)| *dk == k) {
            Some((_, dv)) if *dv == v => {
                if published_keys.contains(&k.as_str()) {
                    Origin::Published
                } else {
                    Origin::Desk
                }
            }
            _ => Origin::Set,
        };
        out.push_str(&format!("{section}.{k} = {v}  # {}\n", origin.tag()));
    }
    Ok(out)
}

pub const TRAIN_PUBLISHED_KEYS: &[&str] = &[
    "batch_size",
    "momentum",
    "weight_decay",
    "lr",
    "lr_decay",
    "milestones",
    "epochs",
    "patches",
    "bank_momentum",
    "temperature",
    "augment.translation_range",
    "augment.scale_range",
];

pub const NET_PUBLISHED_KEYS: &[&str] = &["depth"];

pub const HEAD_PUBLISHED_KEYS: &[&str] = &[
    "head_lr",
    "backbone_lr",
    "epochs",
    "batch_size",
    "momentum",
    "weight_decay",
    "milestones",
];

pub const BENCH_PUBLISHED_KEYS: &[&str] = &["points", "translation_range"];

#[cfg(test)]
mod tests {
    use super::*;
    use midnet::trainer::TrainConfig;

    #[test]
    fn override_values_parse_as_toml_then_string() {
        assert_eq!(parse_value("0.5"), Value::Float(0.5));
        assert_eq!(parse_value("[1, 2]"), Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
        assert_eq!(parse_value("full_so3"), Value::String("full_so3".into()));
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let mut t = Table::new();
        t.insert("lr".into(), Value::Float(0.1));
        // Unique section name so parallel tests do not see each other's vars.
        std::env::set_var("MIDNET_CFGTEST__AUGMENT__ROTATION_MODE", "full_so3");
        std::env::set_var("MIDNET_CFGTEST__EPOCHS", "7");
        apply_overrides(&mut t, "cfgtest").unwrap();
        let c: TrainConfig = t.try_into().unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.lr, 0.1);
        assert_eq!(c.augment.rotation_mode, midnet::geometry::RotationMode::FullSo3);
    }

    #[test]
    fn render_flags_origins() {
        let d = TrainConfig::default();
        let c = TrainConfig { lr: 0.5, ..d.clone() };
        let text = render("train", &c, Some(&d), TRAIN_PUBLISHED_KEYS).unwrap();
        assert!(text.contains("train.lr = 0.5  # set"));
        assert!(text.contains("train.momentum = 0.9  # published default"));
        assert!(text.contains("train.seed = 0  # desk-scale default"));
        let parsed: Table = text.parse().unwrap();
        assert!(parsed["train"]["lr"].as_float().is_some());
    }

    #[test]
    fn unknown_keys_are_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.toml");
        std::fs::write(&p, "learning_rate = 1.0\n").unwrap();
        let e = load::<TrainConfig>(Some(&p), "nosuchsection").unwrap_err();
        assert!(e.downcast_ref::<Invalid>().is_some());
        assert!(e.to_string().contains("t.toml"));
    }
}
