// SPDX-License-Identifier: MIT OR Apache-2.0
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn data(name: &str) -> String {
    repo_root().join("data").join(name).display().to_string()
}

/// Shared synthetic-model cache for this test process.
pub fn cache_dir() -> PathBuf {
    let d = std::env::temp_dir().join(format!("ctxprobe-test-cache-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

/// Fully explicit config on the mini corpus with the toy synthetic model.
pub fn mini_config(output: &Path) -> String {
    format!(
        r#"corpus = "{corpus}"
class_lists = "{classes}"
output = "{output}"

[model]
synthetic = "toy"

[thresholds]
top_cq = 3
top_q = 10

[sampling]
n_relations = 5
n_queries = 4
n_ctx = 1
seed = 3

[lens]
top_k = 3
selection = {{ subset = "all", n_prompts = 6, seed = 1 }}

[patching]
mode = "context_patching"
sigma_override = 1.5
seed = 2
selection = {{ subset = "context_dominant", n_prompts = 3, seed = 1 }}

[knockout]
theta = 0.25
n_controls = 0
control_seed = 0
block = "context_tokens"
layers = [1]
selection = {{ subset = "context_dominant", n_prompts = 10, seed = 1 }}

[pmi]
classes = ["language"]
n_contexts = 4
n_queries = 5
seed = 1
rule = "modal"

[annotations]
n = 3
seed = 1
"#,
        corpus = data("mini.jsonl"),
        classes = data("class_tokens.json"),
        output = output.display()
    )
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxprobe"))
        .args(args)
        .env("CTXPROBE_CACHE_DIR", cache_dir())
        .output()
        .unwrap()
}

pub fn cli_ok(args: &[&str]) -> Output {
    let out = cli(args);
    assert!(
        out.status.success(),
        "ctxprobe {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub const COMMANDS: [&str; 6] = ["run", "lens", "patch", "knockout", "pmi", "export-annotations"];

/// Every file under `dir`, relative path to bytes, sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
