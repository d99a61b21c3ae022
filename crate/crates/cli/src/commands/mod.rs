// SPDX-License-Identifier: MIT OR Apache-2.0

mod annotate;
mod knockout;
mod lens;
mod patch;
mod pmi;
mod run;
mod synth;

use std::collections::HashMap;
use std::path::PathBuf;

use ctxprobe::behavior::{build_experiment, load_relations, CandidateReport, Case, ExperimentItem, RelationRecord};
use ctxprobe::knockout::KnockoutRecord;
use ctxprobe::lens::load_class_lists;
use ctxprobe::patching::PatchRecord;
use ctxprobe::synth::{build_synthetic_model_dir, corpus_texts};
use ctxprobe::{Execution, Model, TokenId};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub use annotate::export_annotations;
pub use knockout::knockout;
pub use lens::lens;
pub use patch::patch;
pub use pmi::pmi;
pub use run::run;
pub use synth::synth;

use crate::config::{RunConfig, Selection, Subset};
use crate::error::CliError;
use crate::output::{read_log, Keyed, Manifest, OutputDir};

/// Environment variable naming the synthetic-model cache directory.
pub const CACHE_ENV: &str = "CTXPROBE_CACHE_DIR";

/// Prompts per resumable batch.
const CHUNK: usize = 64;

impl Keyed for CandidateReport {
    fn key(&self) -> &str {
        &self.prompt_id
    }
}

impl Keyed for PatchRecord {
    fn key(&self) -> &str {
        &self.prompt_id
    }
}

impl Keyed for KnockoutRecord {
    fn key(&self) -> &str {
        &self.prompt_id
    }
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub exec: Execution,
    pub overwrite: bool,
}

impl Ctx {
    pub fn new(cfg: RunConfig, sequential: bool, overwrite: bool) -> Self {
        let exec = if sequential { Execution::Sequential } else { cfg.execution };
        Self { cfg, exec, overwrite }
    }

    pub fn relations(&self) -> Result<Vec<RelationRecord>, CliError> {
        let mut rel = load_relations(&self.cfg.corpus)?;
        if let Some(n) = self.cfg.sampling.n_relations {
            if n > rel.len() {
                return Err(CliError::Config(format!("n_relations {n} but the corpus has {}", rel.len())));
            }
            rel.truncate(n);
        }
        Ok(rel)
    }

    pub fn corpus_hash(&self) -> Result<String, CliError> {
        let bytes = std::fs::read(&self.cfg.corpus)
            .map_err(|e| CliError::Data(format!("{}: {e}", self.cfg.corpus.display())))?;
        Ok(crate::config::sha256_hex(&bytes))
    }

    pub fn model(&self) -> Result<Model, CliError> {
        match (&self.cfg.model.dir, &self.cfg.model.synthetic) {
            (Some(dir), _) => Ok(Model::load_dir(dir)?),
            (None, Some(preset)) => Ok(Model::load_dir(self.synthetic_dir(preset)?)?),
            (None, None) => Err(CliError::Config("no model configured".into())),
        }
    }

    /// Build the synthetic model once per (preset, corpus, class lists).
    fn synthetic_dir(&self, preset: &str) -> Result<PathBuf, CliError> {
        let spec = synth::preset(preset)?;
        let corpus = std::fs::read(&self.cfg.corpus)?;
        let lists = std::fs::read(&self.cfg.class_lists)?;
        let key = crate::config::sha256_hex(&[corpus, lists].concat());
        let root = std::env::var_os(CACHE_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join("ctxprobe-cache"));
        let dir = root.join(format!("synth-{preset}-{}", &key[..16]));
        if dir.join("config.json").exists() {
            return Ok(dir);
        }
        // every relation in the file, independent of n_relations
        let relations = load_relations(&self.cfg.corpus)?;
        let words: Vec<String> = load_class_lists(&self.cfg.class_lists)?.into_values().flatten().collect();
        let staging = root.join(format!(".staging-{}-{}", &key[..16], std::process::id()));
        build_synthetic_model_dir(&staging, &corpus_texts(&relations, &words), &spec)?;
        match std::fs::rename(&staging, &dir) {
            Ok(()) => Ok(dir),
            // another process finished first
            Err(_) if dir.join("config.json").exists() => {
                let _ = std::fs::remove_dir_all(&staging);
                Ok(dir)
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn items(&self, relations: &[RelationRecord]) -> Result<Vec<ExperimentItem>, CliError> {
        let s = &self.cfg.sampling;
        Ok(build_experiment(relations, s.n_ctx, s.n_queries, s.seed)?)
    }

    pub fn open(&self, command: &str, section: Option<&str>) -> Result<OutputDir, CliError> {
        OutputDir::open(&self.cfg.output, command, &self.cfg.hash(section), self.overwrite)
    }

    /// Reports of a finished `run` under the same shared config.
    pub fn run_reports(&self) -> Result<(Vec<CandidateReport>, String), CliError> {
        let dir = self.cfg.output.join("run");
        let hash = self.cfg.hash(None);
        let manifest = Manifest::load(&dir).map_err(|_| {
            CliError::Data(format!("no finished run in {}; run `ctxprobe run` first", dir.display()))
        })?;
        if manifest.config_hash != hash {
            return Err(CliError::Config(format!(
                "run outputs in {} come from config {}, this config is {hash}; refusing to mix",
                dir.display(),
                manifest.config_hash
            )));
        }
        Ok((read_log(&dir.join("reports.jsonl"), &hash)?, hash))
    }

    pub fn manifest(&self, command: &str, out: &OutputDir, model_id: &str) -> Result<Manifest, CliError> {
        Ok(Manifest {
            command: command.to_string(),
            config_hash: out.config_hash.clone(),
            model_id: model_id.to_string(),
            corpus_hash: self.corpus_hash()?,
            inputs: json!({}),
            n_records: 0,
            files: Vec::new(),
            details: json!({}),
        })
    }
}

fn in_subset(case: Case, subset: Subset) -> bool {
    match subset {
        Subset::ContextDominant => case.is_context_dominant(),
        Subset::QueryDominant => case == Case::QueryDominantMix,
        Subset::All => true,
    }
}

/// Seeded sample of report rows in the chosen subset that have both target
/// answers, kept in run order.
pub fn select<'a>(reports: &'a [CandidateReport], sel: &Selection) -> Result<Vec<&'a CandidateReport>, CliError> {
    let pool: Vec<&CandidateReport> = reports
        .iter()
        .filter(|r| in_subset(r.case, sel.subset) && target_texts(r).is_ok())
        .collect();
    if pool.is_empty() || sel.n_prompts == 0 {
        return Err(CliError::Data(format!(
            "empty selection: the run has 0 {} rows",
            serde_json::to_value(sel.subset).unwrap().as_str().unwrap_or("matching")
        )));
    }
    if sel.n_prompts >= pool.len() {
        return Ok(pool);
    }
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(sel.seed), pool.len(), sel.n_prompts).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pool[i]).collect())
}

/// The two tracked answers of a report: the top context-based candidate and
/// the top query-based one (the Q-only answer when there is none).
pub fn target_texts(r: &CandidateReport) -> Result<(String, String), CliError> {
    let c = r.c_cand.first().cloned();
    let q = r.q_cand.first().cloned().or_else(|| (!r.a_q.is_empty()).then(|| r.a_q.clone()));
    match (c, q) {
        (Some(c), Some(q)) => Ok((c, q)),
        _ => Err(CliError::Data(format!(
            "{}: needs both a context-based and a query-side answer",
            r.prompt_id
        ))),
    }
}

pub fn tokens_of(model: &Model, text: &str, prompt_id: &str) -> Result<Vec<TokenId>, CliError> {
    let t = model.candidate_tokens(text);
    if t.is_empty() {
        return Err(CliError::Data(format!("{prompt_id}: candidate `{text}` has no tokens")));
    }
    Ok(t)
}

pub fn item_index(items: &[ExperimentItem]) -> HashMap<&str, &ExperimentItem> {
    items.iter().map(|it| (it.id.as_str(), it)).collect()
}

pub fn lookup<'a>(index: &HashMap<&str, &'a ExperimentItem>, id: &str) -> Result<&'a ExperimentItem, CliError> {
    index
        .get(id)
        .copied()
        .ok_or_else(|| CliError::Data(format!("{id}: not in the sampled experiment")))
}

pub fn require_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<(), CliError> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numeric(format!("{what} contains NaN or Inf")));
    }
    Ok(())
}

/// Process `todo` in fixed-size batches, appending each batch to the log
/// before starting the next.
pub fn in_chunks<T, R>(
    todo: &[T],
    mut f: impl FnMut(&[T]) -> Result<Vec<R>, CliError>,
    mut sink: impl FnMut(Vec<R>) -> Result<(), CliError>,
) -> Result<(), CliError> {
    for chunk in todo.chunks(CHUNK) {
        sink(f(chunk)?)?;
    }
    Ok(())
}

pub fn fmt_f(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}
