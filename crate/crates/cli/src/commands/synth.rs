// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use ctxprobe::behavior::load_relations;
use ctxprobe::lens::load_class_lists;
use ctxprobe::synth::{build_synthetic_model_dir, corpus_texts, SynthSpec};

use crate::error::CliError;

/// Write a synthetic checkpoint whose tokenizer is trained on the corpus
/// facts and class words.
pub fn synth(corpus: &Path, class_lists: &Path, name: &str, out: &Path) -> Result<(), CliError> {
    let spec = preset(name)?;
    let relations = load_relations(corpus)?;
    let words: Vec<String> = load_class_lists(class_lists)?.into_values().flatten().collect();
    build_synthetic_model_dir(out, &corpus_texts(&relations, &words), &spec)?;
    eprintln!("synth: {name} -> {}", out.display());
    Ok(())
}

pub fn preset(name: &str) -> Result<SynthSpec, CliError> {
    match name {
        "toy" => Ok(SynthSpec::toy()),
        "gpt2_class" => Ok(SynthSpec::gpt2_class()),
        other => Err(CliError::Config(format!("unknown synthetic preset `{other}` (toy, gpt2_class)"))),
    }
}
