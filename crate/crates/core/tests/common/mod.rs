// SPDX-License-Identifier: MIT OR Apache-2.0
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ctxprobe::behavior::{load_relations, RelationRecord};
use ctxprobe::lens::load_class_lists;
use ctxprobe::synth::{build_synthetic_model_dir, corpus_texts, SynthSpec};
use ctxprobe::Model;

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn data_dir() -> PathBuf {
    manifest_dir().join("../../data")
}

pub fn toy_dir() -> PathBuf {
    manifest_dir().join("tests/fixtures/toy")
}

pub fn mini_corpus() -> Vec<RelationRecord> {
    load_relations(data_dir().join("mini.jsonl")).unwrap()
}

pub fn class_words() -> Vec<String> {
    load_class_lists(data_dir().join("class_tokens.json"))
        .unwrap()
        .into_values()
        .flatten()
        .collect()
}

/// Write the toy checkpoint (mini corpus tokenizer, two layers) to `dir`.
pub fn write_toy(dir: &Path) {
    let texts = corpus_texts(&mini_corpus(), &class_words());
    build_synthetic_model_dir(dir, &texts, &SynthSpec::toy()).unwrap();
}

pub fn toy_model() -> Model {
    Model::load_dir(toy_dir()).unwrap()
}

/// `n` C+Q prompts spread over a seeded mini-corpus pairing.
pub fn sample_prompts(model: &Model, n: usize, seed: u64) -> Vec<(String, ctxprobe::TokenizedPrompt)> {
    let items = ctxprobe::behavior::build_experiment(&mini_corpus(), 1, 20, seed).unwrap();
    let step = (items.len() / n).max(1);
    items
        .iter()
        .step_by(step)
        .take(n)
        .map(|it| (it.id.clone(), it.prompts(model).unwrap().1))
        .collect()
}
