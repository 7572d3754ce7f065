//! Flat dotted-key run configuration.
//!
//! A config file is TOML whose keys flatten to the documented dotted names
//! (`target.T`, `router.lr`, ...). Tables and dotted keys are equivalent.
//! Defaults fill every missing key, `key=value` overrides apply last, and
//! unknown keys or mistyped values are rejected.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use toml::Value;

use crate::data::{synthetic_text, Corpus};
use crate::error::{Error, Result};
use crate::model::{LoraConfig, ModelConfig};
use crate::objective::{target_for_param_ratio, SparsityTarget};
use crate::routing::AnnealSchedule;
use crate::training::{AdamWConfig, LrSchedule, RunConfig, Stage};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Str,
    FloatList,
    StrList,
}

fn documented() -> Vec<(&'static str, Kind, Value)> {
    use Kind::*;
    let f = Value::Float;
    let i = Value::Integer;
    let s = |v: &str| Value::String(v.into());
    let fl = |v: &[f64]| Value::Array(v.iter().map(|&x| Value::Float(x)).collect());
    vec![
        ("model.n_layers", Int, i(8)),
        ("model.d_model", Int, i(256)),
        ("model.n_heads", Int, i(8)),
        ("model.d_ff", Int, i(1024)),
        ("model.vocab_size", Int, i(256)),
        ("model.max_seq_len", Int, i(256)),
        ("model.rms_eps", Float, f(1e-5)),
        ("train.batch_size", Int, i(4)),
        ("train.seq_len", Int, i(256)),
        ("train.seed", Int, i(0)),
        ("train.beta1", Float, f(0.9)),
        ("train.beta2", Float, f(0.95)),
        ("train.eps", Float, f(1e-8)),
        ("train.weight_decay", Float, f(0.1)),
        ("train.grad_clip", Float, f(1.0)),
        ("train.eval_batches", Int, i(16)),
        ("train.eval_every", Int, i(0)),
        ("pretrain.steps", Int, i(4000)),
        ("pretrain.lr", Float, f(1e-3)),
        ("pretrain.warmup_ratio", Float, f(0.05)),
        ("router.steps", Int, i(2000)),
        ("router.lr", Float, f(2e-3)),
        ("lora.steps", Int, i(2000)),
        ("lora.lr", Float, f(2e-4)),
        ("lora.warmup_ratio", Float, f(0.1)),
        ("lora.rank", Int, i(8)),
        ("lora.scale", Float, f(2.0)),
        (
            "lora.targets",
            StrList,
            Value::Array(crate::model::PROJECTIONS.iter().map(|p| s(p)).collect()),
        ),
        ("joint.steps", Int, i(2000)),
        ("joint.lr", Float, f(2e-3)),
        ("joint.adapter_lr", Float, f(2e-4)),
        ("target.T", Float, f(0.25)),
        ("target.alpha", Float, f(8.0)),
        ("target.mode", Str, s("modules")),
        ("anneal.tau_start", Float, f(5.0)),
        ("anneal.tau_end", Float, f(1.0)),
        ("data.path", Str, s("")),
        ("data.synthetic_bytes", Int, i(2_000_000)),
        ("data.synthetic_seed", Int, i(0)),
        ("data.val_fraction", Float, f(0.05)),
        ("analysis.window", Int, i(100)),
        ("analysis.stride", Int, i(100)),
        ("analysis.sequences", Int, i(50)),
        ("analysis.sweep", FloatList, fl(&[0.0, 0.2, 0.4, 0.6])),
        ("baseline.mode", Str, s("modules")),
        ("baseline.budget", Float, f(4.0)),
    ]
}

/// Every key with a value, defaults included.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, Value>,
}

/// Reads `path` (if any), fills defaults and applies `key=value` overrides.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<Settings> {
    let text = match path {
        Some(p) => {
            std::fs::read_to_string(p).map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?
        }
        None => String::new(),
    };
    let mut settings = Settings::parse(&text)?;
    for o in overrides {
        settings.apply_override(o)?;
    }
    settings.validate()?;
    Ok(settings)
}

fn normalize_key(raw: &str) -> String {
    let mut parts = Vec::new();
    let mut cur = String::new();
    let mut quote: Option<char> = None;
    for c in raw.chars() {
        match (quote, c) {
            (Some(q), c) if c == q => quote = None,
            (Some(_), c) => cur.push(c),
            (None, '"' | '\'') => quote = Some(c),
            (None, '.') => parts.push(std::mem::take(&mut cur).trim().to_string()),
            (None, c) => cur.push(c),
        }
    }
    parts.push(cur.trim().to_string());
    parts.join(".")
}

/// Finds a full dotted key assigned twice, so the error names all of it.
fn find_duplicate(text: &str) -> Option<String> {
    let mut prefix = String::new();
    let mut seen = HashSet::new();
    for line in text.lines() {
        let line = line.trim();
        if line.starts_with("[[") {
            return None;
        }
        if let Some(h) = line.strip_prefix('[') {
            if let Some(end) = h.find(']') {
                prefix = normalize_key(&h[..end]);
                continue;
            }
        }
        let Some(eq) = line.find('=') else { continue };
        let key = &line[..eq];
        if key.is_empty() || !key.chars().all(|c| c.is_alphanumeric() || "_-. \"'".contains(c)) {
            continue;
        }
        let key = normalize_key(key);
        let full = if prefix.is_empty() {
            key
        } else {
            format!("{prefix}.{key}")
        };
        if !seen.insert(full.clone()) {
            return Some(full);
        }
    }
    None
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out)?,
            other => {
                if out.insert(key.clone(), other.clone()).is_some() {
                    return Err(Error::config(format!("duplicate key `{key}`")));
                }
            }
        }
    }
    Ok(())
}

fn coerce(key: &str, kind: Kind, v: Value) -> Result<Value> {
    let mismatch = |v: &Value| {
        Error::config(format!(
            "key `{key}` expects {}, got {} `{v}`",
            match kind {
                Kind::Int => "an integer",
                Kind::Float => "a number",
                Kind::Str => "a string",
                Kind::FloatList => "a list of numbers",
                Kind::StrList => "a list of strings",
            },
            v.type_str()
        ))
    };
    match (kind, v) {
        (Kind::Int, Value::Integer(i)) => Ok(Value::Integer(i)),
        (Kind::Float, Value::Float(x)) => Ok(Value::Float(x)),
        (Kind::Float, Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Kind::Str, Value::String(s)) => Ok(Value::String(s)),
        (Kind::FloatList, Value::Array(items)) => items
            .into_iter()
            .map(|x| match x {
                Value::Float(f) => Ok(Value::Float(f)),
                Value::Integer(i) => Ok(Value::Float(i as f64)),
                other => Err(mismatch(&other)),
            })
            .collect::<Result<Vec<_>>>()
            .map(Value::Array),
        (Kind::StrList, Value::Array(items)) if items.iter().all(Value::is_str) => Ok(Value::Array(items)),
        (_, other) => Err(mismatch(&other)),
    }
}

impl Settings {
    pub fn defaults() -> Self {
        Self {
            values: documented().into_iter().map(|(k, _, v)| (k.to_string(), v)).collect(),
        }
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        if let Some(key) = find_duplicate(text) {
            return Err(Error::config(format!("duplicate key `{key}`")));
        }
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat)?;
        let mut settings = Self::defaults();
        for (k, v) in flat {
            settings.set(&k, v)?;
        }
        Ok(settings)
    }

    fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let kind = documented()
            .into_iter()
            .find(|(k, _, _)| *k == key)
            .map(|(_, kind, _)| kind)
            .ok_or_else(|| Error::config(format!("unknown key `{key}`")))?;
        let v = coerce(key, kind, value)?;
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    /// Applies one `key=value` override; the value uses TOML syntax, with
    /// bare words taken as strings.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.set(key, value)
    }

    fn get(&self, key: &str) -> &Value {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("undocumented key `{key}`"))
    }

    pub fn int(&self, key: &str) -> i64 {
        self.get(key).as_integer().expect("typed on insert")
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        usize::try_from(self.int(key)).map_err(|_| Error::config(format!("key `{key}` must be >= 0")))
    }

    pub fn float(&self, key: &str) -> f64 {
        self.get(key).as_float().expect("typed on insert")
    }

    pub fn string(&self, key: &str) -> &str {
        self.get(key).as_str().expect("typed on insert")
    }

    pub fn floats(&self, key: &str) -> Vec<f64> {
        let arr = self.get(key).as_array().expect("typed on insert");
        arr.iter().map(|v| v.as_float().expect("typed on insert")).collect()
    }

    pub fn strings(&self, key: &str) -> Vec<String> {
        let arr = self.get(key).as_array().expect("typed on insert");
        arr.iter()
            .map(|v| v.as_str().expect("typed on insert").to_string())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        for s in [Stage::Pretrain, Stage::RouterTune, Stage::LoraTune, Stage::Joint] {
            self.run_config(s)?.validate()?;
        }
        if !matches!(self.string("target.mode"), "modules" | "params") {
            return Err(Error::config("target.mode must be `modules` or `params`"));
        }
        if !matches!(self.string("baseline.mode"), "modules" | "params") {
            return Err(Error::config("baseline.mode must be `modules` or `params`"));
        }
        if self.usize("train.seq_len")? > self.usize("model.max_seq_len")? {
            return Err(Error::config("train.seq_len exceeds model.max_seq_len"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            n_layers: self.usize("model.n_layers")?,
            d_model: self.usize("model.d_model")?,
            n_heads: self.usize("model.n_heads")?,
            d_ff: self.usize("model.d_ff")?,
            vocab_size: self.usize("model.vocab_size")?,
            max_seq_len: self.usize("model.max_seq_len")?,
            rms_eps: self.float("model.rms_eps"),
        })
    }

    /// Module-count target; in `params` mode `target.T` is read as a
    /// parameter ratio and rescaled.
    pub fn sparsity_target(&self) -> Result<SparsityTarget> {
        let t = self.float("target.T");
        let t = match self.string("target.mode") {
            "params" => target_for_param_ratio(t, &self.model_config()?)?,
            _ => t,
        };
        Ok(SparsityTarget {
            t,
            alpha: self.float("target.alpha"),
        })
    }

    pub fn run_config(&self, stage: Stage) -> Result<RunConfig> {
        let (steps, lr, schedule) = match stage {
            Stage::Pretrain => (
                self.usize("pretrain.steps")?,
                self.float("pretrain.lr"),
                LrSchedule::CosineWithWarmup {
                    warmup_ratio: self.float("pretrain.warmup_ratio"),
                },
            ),
            Stage::RouterTune => (
                self.usize("router.steps")?,
                self.float("router.lr"),
                LrSchedule::Constant,
            ),
            Stage::LoraTune => (
                self.usize("lora.steps")?,
                self.float("lora.lr"),
                LrSchedule::CosineWithWarmup {
                    warmup_ratio: self.float("lora.warmup_ratio"),
                },
            ),
            Stage::Joint => (self.usize("joint.steps")?, self.float("joint.lr"), LrSchedule::Constant),
        };
        Ok(RunConfig {
            stage,
            steps,
            batch_size: self.usize("train.batch_size")?,
            seq_len: self.usize("train.seq_len")?,
            lr,
            adapter_lr: self.float("joint.adapter_lr"),
            lr_schedule: schedule,
            optimizer: AdamWConfig {
                beta1: self.float("train.beta1"),
                beta2: self.float("train.beta2"),
                eps: self.float("train.eps"),
                weight_decay: self.float("train.weight_decay"),
                grad_clip: self.float("train.grad_clip"),
            },
            target: self.sparsity_target()?,
            anneal: AnnealSchedule {
                tau_start: self.float("anneal.tau_start"),
                tau_end: self.float("anneal.tau_end"),
                total_steps: steps,
            },
            lora: LoraConfig {
                rank: self.usize("lora.rank")?,
                scale: self.float("lora.scale"),
                targets: self.strings("lora.targets"),
            },
            seed: self.int("train.seed") as u64,
            eval_batches: self.usize("train.eval_batches")?,
            eval_every: self.usize("train.eval_every")?,
            verify_freeze: false,
        })
    }

    /// The corpus named by `data.path`, or the synthetic corpus when empty.
    pub fn corpus(&self) -> Result<Corpus> {
        let val = self.float("data.val_fraction");
        let path = self.string("data.path");
        if path.is_empty() {
            let text = synthetic_text(
                self.int("data.synthetic_seed") as u64,
                self.usize("data.synthetic_bytes")?,
            );
            Corpus::from_bytes(&text, val)
        } else {
            Corpus::from_path(&PathBuf::from(path), val)
        }
    }

    /// Every key and value, one `key = value` line each, sorted.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn keys() -> Vec<&'static str> {
        documented().into_iter().map(|(k, _, _)| k).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_defaults() {
        assert_eq!(Settings::parse("").unwrap(), Settings::defaults());
        Settings::defaults().validate().unwrap();
    }

    #[test]
    fn tables_and_dotted_keys_agree() {
        let a = Settings::parse("[target]\nT = 0.4\n").unwrap();
        let b = Settings::parse("target.T = 0.4\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.float("target.T"), 0.4);
    }

    #[test]
    fn duplicate_names_full_key() {
        for text in [
            "target.T = 0.3\n[target]\nT = 0.4\n",
            "target.T = 0.3\ntarget.T = 0.4\n",
            "\"target.T\" = 0.3\ntarget.T = 0.4\n",
        ] {
            let err = Settings::parse(text).unwrap_err().to_string();
            assert!(err.contains("`target.T`"), "{err}");
        }
    }

    #[test]
    fn unknown_and_mistyped_rejected() {
        assert!(Settings::parse("target.Q = 1")
            .unwrap_err()
            .to_string()
            .contains("target.Q"));
        assert!(Settings::parse("router.steps = \"many\"").is_err());
        assert!(Settings::parse("router.steps = 1.5").is_err());
    }

    #[test]
    fn override_reflected_in_snapshot() {
        let s = resolve_config(None, &["target.T=0.4".into(), "data.path=corpus.txt".into()]).unwrap();
        let snap = s.snapshot();
        assert!(snap.contains("target.T = 0.4\n"));
        assert!(snap.contains("data.path = \"corpus.txt\"\n"));
        assert_eq!(Settings::parse(&snap).unwrap(), s);
    }

    #[test]
    fn param_mode_rescales_target() {
        let s = resolve_config(None, &["target.mode=params".into(), "target.T=0.2".into()]).unwrap();
        let t = s.sparsity_target().unwrap().t;
        assert!(t > 0.2 && t < 0.3);
    }
}
