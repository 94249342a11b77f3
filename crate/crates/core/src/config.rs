//! Trainer config files: either a JSON object or `key = value` lines.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    let value = if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
    } else {
        let mut map = Map::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let raw = raw.trim();
            // Numbers and booleans keep their type; everything else is a string.
            let value = serde_json::from_str::<Value>(raw)
                .ok()
                .filter(|v| !v.is_object() && !v.is_array())
                .unwrap_or_else(|| Value::String(raw.trim_matches('"').to_string()));
            map.insert(key.trim().to_string(), value);
        }
        Value::Object(map)
    };
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    parse_config(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdpo::{FdpoConfig, MapMode};

    #[test]
    fn key_value_and_json_agree() {
        let kv: FdpoConfig = parse_config("beta = 0.25\nepochs=3 # short\nmode = da\n").unwrap();
        let js: FdpoConfig = parse_config(r#"{"beta":0.25,"epochs":3,"mode":"da"}"#).unwrap();
        assert_eq!(kv.beta, 0.25);
        assert_eq!(kv.epochs, 3);
        assert_eq!(kv.mode, MapMode::Da);
        assert_eq!(kv.learning_rate, 1e-6);
        assert_eq!(js.beta, kv.beta);
        assert_eq!(js.mode, kv.mode);
    }

    #[test]
    fn bad_lines_rejected() {
        assert!(parse_config::<FdpoConfig>("beta 0.5").is_err());
        assert!(parse_config::<FdpoConfig>("epochs = many").is_err());
    }
}
