use std::path::{Path, PathBuf};

use miuk_core::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;

/// Input files of a run. Relative paths are resolved against the directory
/// of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Raw `entity<TAB>concept<TAB>count` triples or an index from `ingest-kg`.
    pub triples: PathBuf,
    pub descriptions: PathBuf,
    #[serde(default)]
    pub types: Option<PathBuf>,
    /// Relation vocabulary; derived from the training set when absent.
    #[serde(default)]
    pub rel2id: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    /// Where `train` writes its checkpoint and logs. Defaults to `run/`
    /// next to the config file.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Deserializes with the failing field's path in the error.
pub fn from_value<T: DeserializeOwned>(value: Value, what: &str) -> Result<T, Failure> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Failure::config(format!("{what}: at `{path}`: {}", e.into_inner()))
    })
}

pub fn read_json(path: &Path) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

/// Parses `key.path=value` into its dotted path and a JSON value; values
/// that are not valid JSON are taken as strings.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value), String> {
    let (key, raw) = text.split_once('=').ok_or_else(|| format!("`{text}` is not KEY=VALUE"))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(format!("bad key `{key}`"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.split('.').map(String::from).collect(), value))
}

pub fn apply_override(root: &mut Value, path: &[String], value: Value) -> Result<(), Failure> {
    let mut node = root;
    for (i, key) in path.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node.as_object_mut().ok_or_else(|| {
            Failure::config(format!("cannot set `{}`: `{}` is not an object", path.join("."), path[..i].join(".")))
        })?;
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        node = obj.entry(key.clone()).or_insert(Value::Null);
    }
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn must_exist(field: &str, p: &Path) -> Result<(), Failure> {
    if p.exists() {
        Ok(())
    } else {
        Err(Failure::config(format!("{field}: {} does not exist", p.display())))
    }
}

impl RunConfig {
    /// Reads the file, applies `--set` overrides, then validates every
    /// field and referenced path.
    pub fn load(path: &Path, overrides: &[(Vec<String>, Value)]) -> Result<RunConfig, Failure> {
        let mut value = read_json(path)?;
        for (key, v) in overrides {
            apply_override(&mut value, key, v.clone())?;
        }
        let mut cfg: RunConfig = from_value(value, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [&mut d.train, &mut d.triples, &mut d.descriptions] {
            resolve(base, p);
        }
        for p in [&mut d.dev, &mut d.test, &mut d.types, &mut d.rel2id, &mut self.train.embedder.embeddings]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        let out = self.output_dir.get_or_insert_with(|| PathBuf::from("run"));
        resolve(base, out);
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.train.validate()?;
        let d = &self.data;
        must_exist("data.train", &d.train)?;
        must_exist("data.triples", &d.triples)?;
        must_exist("data.descriptions", &d.descriptions)?;
        let optional = [
            ("data.dev", &d.dev),
            ("data.test", &d.test),
            ("data.types", &d.types),
            ("data.rel2id", &d.rel2id),
            ("train.embedder.embeddings", &self.train.embedder.embeddings),
        ];
        for (field, p) in optional {
            if let Some(p) = p {
                must_exist(field, p)?;
            }
        }
        Ok(())
    }

    pub fn output_dir(&self) -> &Path {
        self.output_dir.as_deref().expect("resolved on load")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_create_nested_keys() {
        let mut v = json!({"train": {"epochs": 3}});
        let (k, val) = parse_override("train.mode.K=5").unwrap();
        apply_override(&mut v, &k, val).unwrap();
        let (k, val) = parse_override("output_dir=out dir").unwrap();
        apply_override(&mut v, &k, val).unwrap();
        assert_eq!(v, json!({"train": {"epochs": 3, "mode": {"K": 5}}, "output_dir": "out dir"}));
    }

    #[test]
    fn override_through_a_scalar_fails() {
        let mut v = json!({"train": 3});
        let (k, val) = parse_override("train.epochs=1").unwrap();
        assert_eq!(apply_override(&mut v, &k, val).unwrap_err().code, 2);
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let v = json!({"data": {"train": "a", "triples": "b", "descriptions": "c"}, "train": {"mode": {"kk": 1}}});
        let err = from_value::<RunConfig>(v, "cfg").unwrap_err();
        assert!(err.message.contains("train.mode"), "{}", err.message);
    }
}
