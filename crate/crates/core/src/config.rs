//! Config-file handling: TOML documents mirroring the config structs, with
//! dotted-key command-line overrides taking precedence over file values.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Loads `T` from an optional TOML file plus `key=value` overrides. Missing
/// file fields fall back to `T`'s serde defaults; overrides win over the
/// file. Dotted keys address nested tables (`weights.rec=50`).
pub fn load_with_overrides<T>(path: Option<&Path>, overrides: &[String]) -> Result<T>
where
    T: DeserializeOwned,
{
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("config file {}: {e}", p.display())))?;
            text.parse()
                .map_err(|e| Error::Config(format!("config file {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for ov in overrides {
        let (key, value) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {ov:?} must be key=value")))?;
        set_dotted(&mut table, key.trim(), parse_value(value.trim()))?;
    }
    T::deserialize(table).map_err(|e| Error::Config(format!("config: {e}")))
}

/// Serializes an effective config next to a run's outputs.
pub fn write_effective<T: Serialize>(path: &Path, cfg: &T) -> Result<()> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("config serialize: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut current = table;
    loop {
        let part = parts.next().ok_or_else(|| Error::Config("empty override key".into()))?;
        if parts.peek().is_none() {
            current.insert(part.to_string(), value);
            return Ok(());
        }
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?} crosses a non-table value")))?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainConfig;

    #[test]
    fn defaults_when_no_file() {
        let cfg: TrainConfig = load_with_overrides(None, &[]).unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.epochs, 15);
        assert_eq!(cfg.batch_size, 12);
        assert_eq!(cfg.buffer_capacity, 500);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.learning_rate_f, 1e-5);
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        std::fs::write(&p, "epochs = 3\nbatch_size = 4\n[weights]\nrec = 50.0\n").unwrap();
        let cfg: TrainConfig = load_with_overrides(
            Some(&p),
            &["epochs=7".into(), "weights.rec=25".into(), "ablation.no_wr=true".into()],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.weights.rec, 25.0);
        assert!(cfg.ablation.no_wr);
    }

    #[test]
    fn bad_override_is_config_error() {
        let r: Result<TrainConfig> = load_with_overrides(None, &["epochs".into()]);
        assert!(matches!(r, Err(Error::Config(_))));
        let r: Result<TrainConfig> = load_with_overrides(None, &["epochs=lots".into()]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_effective_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eff.toml");
        let cfg = TrainConfig {
            epochs: 9,
            ..Default::default()
        };
        write_effective(&p, &cfg).unwrap();
        let back: TrainConfig = load_with_overrides(Some(&p), &[]).unwrap();
        assert_eq!(back, cfg);
    }
}
