// SPDX-License-Identifier: MIT OR Apache-2.0

//! Query-only vs context+query experiments: corpus loading, pairing,
//! candidate-set classification and the summary metrics built on it.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{Candidate, Condition, ContextFact, Model, QueryFact, TokenFilter, TokenizedPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CtxType {
    Language,
    Place,
    Company,
    Job,
    Others,
}

impl CtxType {
    pub const ALL: [CtxType; 5] = [
        CtxType::Language,
        CtxType::Place,
        CtxType::Company,
        CtxType::Job,
        CtxType::Others,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CtxType::Language => "language",
            CtxType::Place => "place",
            CtxType::Company => "company",
            CtxType::Job => "job",
            CtxType::Others => "others",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationRecord {
    pub relation_id: String,
    pub template: String,
    pub ctx_type: CtxType,
    pub triplets: Vec<Triplet>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusLine {
    relation: String,
    template: String,
    ctx_type: String,
    subject: String,
    object: String,
}

/// Parse corpus JSONL. Relations keep the order of their first line.
pub fn parse_relations(text: &str, path: &Path) -> Result<Vec<RelationRecord>> {
    let mut out: Vec<RelationRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Data {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let ctx_type: CtxType = serde_json::from_value(serde_json::Value::String(rec.ctx_type.clone()))
            .map_err(|_| err(format!("unknown ctx_type `{}`", rec.ctx_type)))?;
        if !rec.template.contains(crate::model::SUBJECT_SLOT) {
            return Err(err("template has no [X] slot".into()));
        }
        if rec.object.trim().is_empty() || rec.subject.trim().is_empty() {
            return Err(err("empty subject or object".into()));
        }
        let slot = *index.entry(rec.relation.clone()).or_insert_with(|| {
            out.push(RelationRecord {
                relation_id: rec.relation.clone(),
                template: rec.template.clone(),
                ctx_type,
                triplets: Vec::new(),
            });
            out.len() - 1
        });
        let r = &mut out[slot];
        if r.template != rec.template || r.ctx_type != ctx_type {
            return Err(err(format!("relation {} changes template or ctx_type", rec.relation)));
        }
        r.triplets.push(Triplet {
            subject: rec.subject,
            object: rec.object,
        });
    }
    Ok(out)
}

pub fn load_relations(path: impl AsRef<Path>) -> Result<Vec<RelationRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_relations(&text, path)
}

/// One (query, context) pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentItem {
    /// `"{query relation}:{index}|{context relation}:{index}"`.
    pub id: String,
    /// `"{query relation}:{index}"`, shared by all contexts of one query.
    pub query_id: String,
    pub query_relation: String,
    pub context_relation: String,
    pub ctx_type: CtxType,
    pub query: QueryFact,
    pub context: ContextFact,
    pub gold: String,
}

/// Sample `n_queries` queries per relation and pair each with `n_ctx`
/// contexts from every other relation.
pub fn build_experiment(
    relations: &[RelationRecord],
    n_ctx: usize,
    n_queries: usize,
    seed: u64,
) -> Result<Vec<ExperimentItem>> {
    if n_ctx == 0 {
        return Err(Error::Config("n_ctx must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for q_rel in relations {
        if q_rel.triplets.len() < n_queries {
            return Err(Error::Config(format!(
                "relation {} has {} triplets, {} queries requested",
                q_rel.relation_id,
                q_rel.triplets.len(),
                n_queries
            )));
        }
        for qi in sample(&mut rng, q_rel.triplets.len(), n_queries) {
            let q = &q_rel.triplets[qi];
            for c_rel in relations.iter().filter(|r| r.relation_id != q_rel.relation_id) {
                if c_rel.triplets.len() < n_ctx {
                    return Err(Error::Config(format!(
                        "relation {} has {} triplets, {} contexts requested",
                        c_rel.relation_id,
                        c_rel.triplets.len(),
                        n_ctx
                    )));
                }
                for ci in sample(&mut rng, c_rel.triplets.len(), n_ctx) {
                    let c = &c_rel.triplets[ci];
                    items.push(ExperimentItem {
                        id: format!("{}:{qi}|{}:{ci}", q_rel.relation_id, c_rel.relation_id),
                        query_id: format!("{}:{qi}", q_rel.relation_id),
                        query_relation: q_rel.relation_id.clone(),
                        context_relation: c_rel.relation_id.clone(),
                        ctx_type: q_rel.ctx_type,
                        query: QueryFact {
                            subject: q.subject.clone(),
                            template: q_rel.template.clone(),
                        },
                        context: ContextFact {
                            subject: c.subject.clone(),
                            template: c_rel.template.clone(),
                            object: c.object.clone(),
                        },
                        gold: q.object.clone(),
                    });
                }
            }
        }
    }
    Ok(items)
}

impl ExperimentItem {
    pub fn prompts(&self, model: &Model) -> Result<(TokenizedPrompt, TokenizedPrompt)> {
        let q = model.build_prompt(None, &self.query, Condition::QueryOnly)?;
        let cq = model.build_prompt(Some(&self.context), &self.query, Condition::ContextPlusQuery)?;
        Ok((q, cq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    NoInfluence,
    QueryDominantMix,
    ContextDominantMix,
    AllContext,
}

impl Case {
    pub const ALL: [Case; 4] = [
        Case::NoInfluence,
        Case::QueryDominantMix,
        Case::ContextDominantMix,
        Case::AllContext,
    ];

    pub fn number(self) -> u8 {
        self as u8 + 1
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Case::NoInfluence => "no_influence",
            Case::QueryDominantMix => "query_dominant_mix",
            Case::ContextDominantMix => "context_dominant_mix",
            Case::AllContext => "all_context",
        }
    }

    /// Top-1 answer under C+Q is a context-based candidate.
    pub fn is_context_dominant(self) -> bool {
        matches!(self, Case::ContextDominantMix | Case::AllContext)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub c_cand: Vec<String>,
    pub q_cand: Vec<String>,
    pub case: Case,
}

/// Split the C+Q top list into context-based (absent from the Q top list)
/// and query-based candidates, and assign the case.
pub fn classify(top_q: &[String], top_cq: &[String]) -> Classification {
    let (c_cand, q_cand): (Vec<String>, Vec<String>) =
        top_cq.iter().cloned().partition(|a| !top_q.contains(a));
    let case = if c_cand.is_empty() {
        Case::NoInfluence
    } else if q_cand.is_empty() {
        Case::AllContext
    } else if c_cand.contains(&top_cq[0]) {
        Case::ContextDominantMix
    } else {
        Case::QueryDominantMix
    };
    Classification { c_cand, q_cand, case }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub top_cq: usize,
    pub top_q: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { top_cq: 3, top_q: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub prompt_id: String,
    pub query_id: String,
    pub query_relation: String,
    pub context_relation: String,
    pub ctx_type: CtxType,
    pub condition: Condition,
    pub prompt: String,
    pub query_prompt: String,
    pub gold: String,
    pub a_q: String,
    pub a_cq: String,
    pub top_cq: Vec<Candidate>,
    pub top_q: Vec<Candidate>,
    pub c_cand: Vec<String>,
    pub q_cand: Vec<String>,
    pub case: Case,
    pub copied: bool,
    pub correct_q: bool,
    pub correct_cq: bool,
    pub thresholds: Thresholds,
    pub model_id: String,
}

/// Lowercased answer is a substring of the lowercased gold object.
pub fn is_correct(answer: &str, gold: &str) -> bool {
    !answer.is_empty() && gold.to_lowercase().contains(&answer.to_lowercase())
}

/// The C+Q answer occurs in the context part of the prompt.
pub fn detect_copy(a_cq: &str, prompt: &TokenizedPrompt, model: &Model) -> bool {
    if prompt.condition == Condition::QueryOnly {
        return false;
    }
    let a = a_cq.trim().to_lowercase();
    !a.is_empty() && prompt.context_text(model.tokenizer()).to_lowercase().contains(&a)
}

fn texts(c: &[Candidate]) -> Vec<String> {
    c.iter().map(|c| c.text.clone()).collect()
}

/// Run both conditions for every item. Query-only passes run once per query.
pub fn run_behavior(
    model: &Model,
    items: &[ExperimentItem],
    thresholds: Thresholds,
    exec: Execution,
) -> Result<Vec<CandidateReport>> {
    let mut queries: Vec<&ExperimentItem> = Vec::new();
    let mut seen = HashMap::new();
    for it in items {
        seen.entry(it.query_id.as_str()).or_insert_with(|| {
            queries.push(it);
        });
    }
    let q_runs = exec.try_map(&queries, |it| -> Result<(String, Vec<Candidate>, String)> {
        let p = model.build_prompt(None, &it.query, Condition::QueryOnly)?;
        let logits = model.forward_logits(&p.token_ids, &Default::default(), None)?;
        let top = model.top_k_restricted(&logits, thresholds.top_q, TokenFilter::CapitalizedInitial);
        Ok((it.query_id.clone(), top, p.text))
    })?;
    let q_runs: HashMap<String, (Vec<Candidate>, String)> =
        q_runs.into_iter().map(|(id, top, text)| (id, (top, text))).collect();

    exec.try_map(items, |it| {
        let p = model.build_prompt(Some(&it.context), &it.query, Condition::ContextPlusQuery)?;
        let logits = model.forward_logits(&p.token_ids, &Default::default(), None)?;
        let top_cq = model.top_k_restricted(&logits, thresholds.top_cq, TokenFilter::CapitalizedInitial);
        let (top_q, q_text) = &q_runs[&it.query_id];
        let cls = classify(&texts(top_q), &texts(&top_cq));
        let a_q = top_q.first().map(|c| c.text.clone()).unwrap_or_default();
        let a_cq = top_cq.first().map(|c| c.text.clone()).unwrap_or_default();
        Ok(CandidateReport {
            prompt_id: it.id.clone(),
            query_id: it.query_id.clone(),
            query_relation: it.query_relation.clone(),
            context_relation: it.context_relation.clone(),
            ctx_type: it.ctx_type,
            condition: Condition::ContextPlusQuery,
            copied: detect_copy(&a_cq, &p, model),
            correct_q: is_correct(&a_q, &it.gold),
            correct_cq: is_correct(&a_cq, &it.gold),
            prompt: p.text,
            query_prompt: q_text.clone(),
            gold: it.gold.clone(),
            a_q,
            a_cq,
            top_cq,
            top_q: top_q.clone(),
            c_cand: cls.c_cand,
            q_cand: cls.q_cand,
            case: cls.case,
            thresholds,
            model_id: model.id().to_string(),
        })
    })
}

/// Fraction of rows whose answer changed once the context was added.
pub fn delta_rate(reports: &[CandidateReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::Invalid("delta rate of zero reports".into()));
    }
    let changed = reports.iter().filter(|r| r.a_cq != r.a_q).count();
    Ok(changed as f64 / reports.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub q_only: f64,
    pub c_plus_q: f64,
}

/// Per-condition accuracy. Query-only rows are counted once per query.
pub fn accuracy(reports: &[CandidateReport]) -> Result<Accuracy> {
    if reports.is_empty() {
        return Err(Error::Invalid("accuracy of zero reports".into()));
    }
    let mut per_query: BTreeMap<&str, bool> = BTreeMap::new();
    for r in reports {
        per_query.insert(&r.query_id, r.correct_q);
    }
    let q = per_query.values().filter(|&&c| c).count() as f64 / per_query.len() as f64;
    let cq = reports.iter().filter(|r| r.correct_cq).count() as f64 / reports.len() as f64;
    Ok(Accuracy { q_only: q, c_plus_q: cq })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case: u8,
    pub label: String,
    pub count: usize,
    pub percent: f64,
}

/// Counts and percentages of the four cases, in case order.
pub fn case_summary(reports: &[CandidateReport]) -> Vec<CaseRow> {
    let n = reports.len();
    Case::ALL
        .iter()
        .map(|&c| {
            let count = reports.iter().filter(|r| r.case == c).count();
            CaseRow {
                case: c.number(),
                label: c.as_str().to_string(),
                count,
                percent: if n == 0 { 0.0 } else { 100.0 * count as f64 / n as f64 },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub prompt_id: String,
    pub prompt: String,
    pub candidates: Vec<String>,
    pub candidate: String,
    pub context_influenced: Option<bool>,
    pub correct_class: Option<bool>,
    pub satisfies_both: Option<bool>,
}

/// Seeded sample of `n` context-based candidates with empty annotation fields.
pub fn export_annotation_sample(
    reports: &[CandidateReport],
    n: usize,
    seed: u64,
) -> Result<Vec<AnnotationRow>> {
    let pool: Vec<(&CandidateReport, &String)> = reports
        .iter()
        .flat_map(|r| r.c_cand.iter().map(move |c| (r, c)))
        .collect();
    if n > pool.len() {
        return Err(Error::Invalid(format!(
            "{n} annotations requested, {} context-based candidates available",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| {
            let (r, c) = pool[i];
            AnnotationRow {
                prompt_id: r.prompt_id.clone(),
                prompt: r.prompt.clone(),
                candidates: texts(&r.top_cq),
                candidate: c.clone(),
                context_influenced: None,
                correct_class: None,
                satisfies_both: None,
            }
        })
        .collect())
}

/// Cross-product grid for the PMI study: `n_contexts` contexts drawn from
/// relations of other types, each paired with the same `n_queries` queries
/// of type `class`.
pub fn build_pmi_items(
    relations: &[RelationRecord],
    class: CtxType,
    n_contexts: usize,
    n_queries: usize,
    seed: u64,
) -> Result<Vec<Vec<ExperimentItem>>> {
    let flatten = |keep: &dyn Fn(&RelationRecord) -> bool| -> Vec<(&RelationRecord, usize)> {
        relations
            .iter()
            .filter(|r| keep(r))
            .flat_map(|r| (0..r.triplets.len()).map(move |i| (r, i)))
            .collect()
    };
    let queries = flatten(&|r| r.ctx_type == class);
    let contexts = flatten(&|r| r.ctx_type != class);
    if queries.len() < n_queries || contexts.len() < n_contexts {
        return Err(Error::Config(format!(
            "class {} offers {} queries and {} contexts; {n_queries} and {n_contexts} requested",
            class.as_str(),
            queries.len(),
            contexts.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx_pick = sample(&mut rng, contexts.len(), n_contexts).into_vec();
    let q_pick = sample(&mut rng, queries.len(), n_queries).into_vec();
    Ok(ctx_pick
        .iter()
        .map(|&ci| {
            let (c_rel, c_idx) = contexts[ci];
            q_pick
                .iter()
                .map(|&qi| {
                    let (q_rel, q_idx) = queries[qi];
                    let q = &q_rel.triplets[q_idx];
                    let c = &c_rel.triplets[c_idx];
                    ExperimentItem {
                        id: format!("{}:{q_idx}|{}:{c_idx}", q_rel.relation_id, c_rel.relation_id),
                        query_id: format!("{}:{q_idx}", q_rel.relation_id),
                        query_relation: q_rel.relation_id.clone(),
                        context_relation: c_rel.relation_id.clone(),
                        ctx_type: q_rel.ctx_type,
                        query: QueryFact {
                            subject: q.subject.clone(),
                            template: q_rel.template.clone(),
                        },
                        context: ContextFact {
                            subject: c.subject.clone(),
                            template: c_rel.template.clone(),
                            object: c.object.clone(),
                        },
                        gold: q.object.clone(),
                    }
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|x| x.to_string()).collect()
    }

    fn corpus(n_rel: usize, n_trip: usize) -> Vec<RelationRecord> {
        (0..n_rel)
            .map(|r| RelationRecord {
                relation_id: format!("P{r}"),
                template: format!("Relation {r} of [X] is [Y]."),
                ctx_type: CtxType::ALL[r % 5],
                triplets: (0..n_trip)
                    .map(|i| Triplet {
                        subject: format!("S{r}_{i}"),
                        object: format!("O{r}_{i}"),
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn load_reports_line_numbers() {
        let p = Path::new("x.jsonl");
        let ok = r#"{"relation":"P1","template":"[X] is [Y].","ctx_type":"place","subject":"a","object":"b"}"#;
        let missing = r#"{"relation":"P1","template":"[X] is [Y].","ctx_type":"place","subject":"a"}"#;
        let err = parse_relations(&format!("{ok}\n{missing}\n"), p).unwrap_err();
        assert!(matches!(err, Error::Data { line: 2, .. }), "{err}");
        let bad_type = ok.replace("place", "planet");
        let err = parse_relations(&bad_type, p).unwrap_err();
        assert!(err.to_string().contains("planet"));
        let recs = parse_relations(&format!("{ok}\n\n{ok}\n"), p).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].triplets.len(), 2);
    }

    #[test]
    fn two_relations_pair_with_each_other_only() {
        let items = build_experiment(&corpus(2, 3), 1, 1, 7).unwrap();
        assert_eq!(items.len(), 2);
        for it in &items {
            assert_ne!(it.query_relation, it.context_relation);
        }
    }

    #[test]
    fn pairing_is_seeded() {
        let c = corpus(4, 6);
        assert_eq!(build_experiment(&c, 2, 3, 9).unwrap(), build_experiment(&c, 2, 3, 9).unwrap());
        assert_ne!(build_experiment(&c, 2, 3, 9).unwrap(), build_experiment(&c, 2, 3, 10).unwrap());
    }

    #[test]
    fn too_small_relation_is_error() {
        assert!(build_experiment(&corpus(3, 2), 3, 1, 0).is_err());
        assert!(build_experiment(&corpus(3, 2), 1, 3, 0).is_err());
        assert!(build_experiment(&corpus(3, 2), 0, 1, 0).is_err());
    }

    #[test]
    fn classify_cases() {
        let q = s(&["French", "English", "German", "Spanish", "Italian", "Latin", "Dutch", "Greek", "Polish", "Czech"]);
        let c = classify(&q, &s(&["English", "French", "German"]));
        assert_eq!((c.case, c.c_cand.len()), (Case::NoInfluence, 0));
        let c = classify(&q, &s(&["Japanese", "Honda", "Toyota"]));
        assert_eq!(c.case, Case::AllContext);
        let c = classify(&q, &s(&["Japanese", "French", "English"]));
        assert_eq!(c.case, Case::ContextDominantMix);
        assert_eq!(c.c_cand, s(&["Japanese"]));
        let c = classify(&q, &s(&["French", "Japanese", "English"]));
        assert_eq!(c.case, Case::QueryDominantMix);
        assert_eq!(c.q_cand, s(&["French", "English"]));
    }

    #[test]
    fn correctness_is_substring() {
        assert!(is_correct("French", "French"));
        assert!(is_correct("Fren", "French"));
        assert!(is_correct("south", "South America"));
        assert!(!is_correct("German", "French"));
        assert!(!is_correct("", "French"));
    }

    #[test]
    fn pmi_items_are_a_full_grid() {
        let c = corpus(10, 4);
        let grid = build_pmi_items(&c, CtxType::Language, 5, 6, 3).unwrap();
        assert_eq!(grid.len(), 5);
        for row in &grid {
            assert_eq!(row.len(), 6);
            let qs: Vec<&str> = row.iter().map(|i| i.query_id.as_str()).collect();
            let first: Vec<&str> = grid[0].iter().map(|i| i.query_id.as_str()).collect();
            assert_eq!(qs, first);
            for it in row {
                assert_eq!(it.ctx_type, CtxType::Language);
                assert!(!it.context_relation.is_empty());
            }
        }
        assert!(build_pmi_items(&c, CtxType::Language, 5, 9, 3).is_err());
    }

    proptest! {
        #[test]
        fn classification_partitions_top_list(
            q in proptest::collection::vec(0u8..12, 0..10),
            cq in proptest::collection::vec(0u8..12, 1..4),
        ) {
            let q: Vec<String> = q.iter().map(|v| format!("T{v}")).collect();
            let cq: Vec<String> = cq.iter().map(|v| format!("T{v}")).collect();
            let c = classify(&q, &cq);
            prop_assert_eq!(c.c_cand.len() + c.q_cand.len(), cq.len());
            for a in &cq {
                prop_assert!(c.c_cand.contains(a) != c.q_cand.contains(a));
            }
            let mut rev = q.clone();
            rev.reverse();
            prop_assert_eq!(classify(&rev, &cq), c);
        }
    }
}
