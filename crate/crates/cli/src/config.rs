// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use ctxprobe::behavior::{CtxType, Thresholds};
use ctxprobe::knockout::Block;
use ctxprobe::patching::PatchMode;
use ctxprobe::stats::DesignatedRule;
use ctxprobe::Execution;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Where the model comes from: a checkpoint directory, or a synthetic
/// preset trained on the corpus and cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// `toy` or `gpt2_class`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    /// First `n` relations of the corpus; all when absent.
    #[serde(default)]
    pub n_relations: Option<usize>,
    pub n_queries: usize,
    pub n_ctx: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    /// Top-1 is a context-based candidate (cases 3 and 4).
    #[default]
    ContextDominant,
    /// Top-1 is a query-based candidate (case 2).
    QueryDominant,
    All,
}

/// Which rows of a prior `run` an experiment draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selection {
    #[serde(default)]
    pub subset: Subset,
    /// Seeded sample of at most this many rows, kept in run order.
    pub n_prompts: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LensConfig {
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    pub selection: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub mode: PatchMode,
    #[serde(default)]
    pub sigma_override: Option<f32>,
    pub seed: u64,
    pub selection: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnockoutConfig {
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_controls")]
    pub n_controls: usize,
    pub control_seed: u64,
    #[serde(default = "default_block")]
    pub block: Block,
    /// Fixed 0-based layers instead of spike selection.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    pub selection: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmiConfig {
    /// Query classes to test; every class with a relation in the corpus when empty.
    #[serde(default)]
    pub classes: Vec<CtxType>,
    pub n_contexts: usize,
    pub n_queries: usize,
    pub seed: u64,
    #[serde(default)]
    pub rule: DesignatedRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationConfig {
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    pub corpus: PathBuf,
    pub class_lists: PathBuf,
    #[serde(default)]
    pub thresholds: Thresholds,
    pub sampling: Sampling,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lens: Option<LensConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patching: Option<PatchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knockout: Option<KnockoutConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pmi: Option<PmiConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<AnnotationConfig>,
    pub output: PathBuf,
    #[serde(default)]
    pub execution: Execution,
}

/// Fields every command's results depend on.
const BASE_KEYS: [&str; 5] = ["model", "corpus", "class_lists", "thresholds", "sampling"];

fn default_top_k() -> usize {
    5
}
fn default_theta() -> f64 {
    0.25
}
fn default_controls() -> usize {
    3
}
fn default_block() -> Block {
    Block::ContextTokens
}

impl RunConfig {
    /// Parse a `.toml` or `.json` file and apply `key.path=value` overrides.
    /// Relative paths resolve against the config file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut value: Value = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
            Some("json") => serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
            _ => return Err(CliError::Config(format!("{}: expected a .toml or .json file", path.display()))),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.class_lists);
        fix(&mut self.output);
        if let Some(d) = self.model.dir.as_mut() {
            fix(d);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.model.dir, &self.model.synthetic) {
            (Some(_), None) => {}
            (None, Some(p)) if p == "toy" || p == "gpt2_class" => {}
            (None, Some(p)) => return Err(CliError::Config(format!("unknown synthetic preset `{p}`"))),
            _ => return Err(CliError::Config("model needs exactly one of `dir` or `synthetic`".into())),
        }
        if self.thresholds.top_cq == 0 || self.thresholds.top_q == 0 {
            return Err(CliError::Config("thresholds must be at least 1".into()));
        }
        if let Some(p) = &self.patching {
            if let Some(s) = p.sigma_override {
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(CliError::Config(format!("sigma_override {s} must be finite and >= 0")));
                }
            }
        }
        if let Some(k) = &self.knockout {
            if !(k.theta > 0.0 && k.theta <= 1.0) {
                return Err(CliError::Config(format!("theta {} must be in (0, 1]", k.theta)));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the fields shared by every
    /// command plus, when given, one command section. The output directory
    /// and execution mode never enter the hash.
    pub fn hash(&self, section: Option<&str>) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let all = v.as_object().expect("config is a table");
        let mut kept = serde_json::Map::new();
        for key in BASE_KEYS.iter().copied().chain(section) {
            if let Some(x) = all.get(key) {
                kept.insert(key.to_string(), x.clone());
            }
        }
        sha256_hex(canonical(&Value::Object(kept)).as_bytes())
    }

    pub fn section<'a, T>(&self, s: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        s.as_ref()
            .ok_or_else(|| CliError::Config(format!("config has no [{name}] section")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// JSON with object keys sorted at every level.
fn canonical(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical(&m[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// `a.b.c=value`; the value is read as JSON when it parses, else as a string.
fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not inside a table")))?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(CliError::Config(format!("empty override key in `{spec}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
corpus = "data/mini.jsonl"
class_lists = "data/class_tokens.json"
output = "out"

[model]
synthetic = "toy"

[sampling]
n_queries = 2
n_ctx = 1
seed = 7
"#;

    fn load(text: &str, overrides: &[&str]) -> Result<RunConfig, CliError> {
        let dir = std::env::temp_dir().join("ctxprobe-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let name = sha256_hex(format!("{text}{overrides:?}").as_bytes());
        let p = dir.join(format!("{}.toml", &name[..12]));
        std::fs::write(&p, text).unwrap();
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        RunConfig::load(&p, &o)
    }

    #[test]
    fn defaults_and_overrides() {
        let c = load(BASE, &["sampling.seed=9", "thresholds.top_q=20"]).unwrap();
        assert_eq!(c.sampling.seed, 9);
        assert_eq!(c.thresholds, Thresholds { top_cq: 3, top_q: 20 });
        assert!(c.corpus.is_absolute());
    }

    #[test]
    fn seeds_are_required() {
        let text = BASE.replace("seed = 7\n", "");
        assert!(matches!(load(&text, &[]), Err(CliError::Config(_))));
    }

    #[test]
    fn unknown_keys_and_presets_are_rejected() {
        assert!(load(BASE, &["sampling.sed=1"]).is_err());
        assert!(load(BASE, &["model.synthetic=gpt9"]).is_err());
        assert!(load(BASE, &["model.dir=/x"]).is_err());
    }

    #[test]
    fn hash_scope() {
        let a = load(BASE, &[]).unwrap();
        let b = load(BASE, &["output=elsewhere", "execution=sequential"]).unwrap();
        let c = load(BASE, &["sampling.seed=8"]).unwrap();
        let d = load(BASE, &["annotations.n=4", "annotations.seed=1"]).unwrap();
        assert_eq!(a.hash(None), b.hash(None));
        assert_ne!(a.hash(None), c.hash(None));
        // adding a command section leaves the shared hash alone
        assert_eq!(a.hash(None), d.hash(None));
        assert_ne!(d.hash(None), d.hash(Some("annotations")));
    }

    #[test]
    fn canonical_form_sorts_keys() {
        let v: Value = serde_json::from_str(r#"{"b": [1, {"d": 2, "c": "x"}], "a": null}"#).unwrap();
        assert_eq!(canonical(&v), r#"{"a":null,"b":[1,{"c":"x","d":2}]}"#);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
