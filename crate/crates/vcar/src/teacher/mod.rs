//! Supervision collection: prompt construction, dataset annotation by a
//! scripted oracle or a remote service, and answer-consistency filtering.
//!
//! Every outgoing prompt carries the gold answer (answer-guided
//! generation); the scripted oracle is the deterministic stand-in for a
//! proprietary teacher, and the bundled loopback server exposes the exact
//! same oracle over the wire protocol.

mod server;
mod wire;

pub use server::{serve, OracleServer};
pub use wire::{remote_call, RemoteOptions, TeacherRequest, TeacherResponse};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{extract_final_from_rationale, normalize_answer};
use crate::taskgen::{
    fnv64, oracle_description, oracle_rationale, render_question, splitmix64, Provenance, Sample,
    TaskGenError,
};

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("unknown prompt template {0:?}")]
    UnknownTemplate(String),
    #[error("template {template} slot {{{slot}}} left unfilled")]
    UnfilledSlot { template: String, slot: String },
    #[error("template {0} needs a prior rationale on the sample")]
    MissingRationale(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("permanent failure: status {status}")]
    PermanentStatus { status: u16 },
    #[error("transient failures exhausted after {attempts} attempts (last status {last:?})")]
    TransientExhausted { attempts: usize, last: Option<u16> },
    #[error("malformed response body: {0}")]
    MalformedResponse(String),
    #[error("remote annotation failed for every one of {0} samples")]
    AllFailed(usize),
    #[error("server: {0}")]
    Server(String),
    #[error(transparent)]
    TaskGen(#[from] TaskGenError),
}

/// Versioned prompt templates. Texts are reconstructions of the intended
/// structure (answer-guided, question-targeted), pinned by version so runs
/// can reference exactly what they used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: &'static str,
    pub version: &'static str,
    pub text: &'static str,
}

pub const TEMPLATES: [PromptTemplate; 5] = [
    PromptTemplate {
        id: "rationale",
        version: "v1",
        text: "Here is an image: {scene}\nQuestion: {question}\nThe correct answer is {answer}. \
               Explain step by step how to reach this answer, and end with the sentence \
               'So the final answer is {answer}.'",
    },
    PromptTemplate {
        id: "description",
        version: "v1",
        text: "Here is an image: {scene}\nQuestion: {question}\nThe correct answer is {answer}. \
               Describe only the parts of the image that are relevant to answering this \
               question. Do not explain the reasoning.",
    },
    PromptTemplate {
        id: "disentangled",
        version: "v1",
        text: "Here is an image: {scene}\nQuestion: {question}\nThe correct answer is {answer}. \
               First describe the relevant parts of the image, then explain the reasoning that \
               reaches the answer. Disentangle these two parts into two separate paragraphs.",
    },
    PromptTemplate {
        id: "question_augmentation",
        version: "v1",
        text: "Here is an image: {scene}\nQuestion: {question}\nThe correct answer is {answer}. \
               Rewrite the question so that it includes the pertinent visual details observed \
               in the image.",
    },
    PromptTemplate {
        id: "extend_details",
        version: "v1",
        text: "Here is an image: {scene}\nQuestion: {question}\nThe correct answer is {answer}. \
               Here is a rationale that reaches the answer: {rationale}\nRewrite the rationale \
               to incorporate more details from the image.",
    },
];

pub fn template(id: &str) -> Result<&'static PromptTemplate, TeacherError> {
    TEMPLATES
        .iter()
        .find(|t| t.id == id)
        .ok_or_else(|| TeacherError::UnknownTemplate(id.to_string()))
}

/// Fills a template's slots from the sample. The scene serializes as the
/// canonical fact list, the textual stand-in for attaching an image.
pub fn build_prompt(template_id: &str, sample: &Sample) -> Result<String, TeacherError> {
    let t = template(template_id)?;
    let mut text = t.text.to_string();
    text = text.replace("{scene}", &sample.scene.fact_sentences().join(" "));
    text = text.replace("{question}", &render_question(sample));
    text = text.replace("{answer}", &sample.gold);
    if text.contains("{rationale}") {
        let r = sample
            .rationale
            .as_deref()
            .ok_or_else(|| TeacherError::MissingRationale(template_id.to_string()))?;
        text = text.replace("{rationale}", r);
    }
    if let Some(open) = text.find('{') {
        let end = text[open..].find('}').map(|e| open + e + 1).unwrap_or(text.len());
        return Err(TeacherError::UnfilledSlot {
            template: template_id.to_string(),
            slot: text[open + 1..end.saturating_sub(1)].to_string(),
        });
    }
    Ok(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnKind {
    Description,
    Rationale,
}

/// Teacher backing for [`annotate`].
#[derive(Debug, Clone)]
pub enum TeacherImpl {
    ScriptedOracle { p_err: f64, seed: u64 },
    Remote { endpoint: String, options: RemoteOptions, seed: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationStats {
    pub requested: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub rationales_correct: usize,
    pub rationales_total: usize,
}

#[derive(Debug, Clone)]
pub struct AnnotatedDataset {
    pub samples: Vec<Sample>,
    pub failed_ids: Vec<String>,
    pub stats: AnnotationStats,
}

/// Noise RNG derived from request content, not sample position, so the
/// in-process oracle and the loopback server corrupt identically for the
/// same master seed. The scene is mixed in because question/answer pairs
/// repeat across samples while scenes are effectively unique.
pub fn annotation_rng(seed: u64, scene: &[String], question: &str, gold: &str) -> ChaCha8Rng {
    let mut h = fnv64(question.as_bytes()) ^ fnv64(gold.as_bytes());
    for fact in scene {
        h = splitmix64(h ^ fnv64(fact.as_bytes()));
    }
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(h)))
}

/// Fills the requested annotation fields for every sample. Remote failures
/// exclude the sample (never silently mix teacher provenances) and are
/// counted; a remote teacher that fails on every sample aborts.
pub fn annotate(
    teacher: &TeacherImpl,
    samples: &[Sample],
    kinds: &[AnnKind],
) -> Result<AnnotatedDataset, TeacherError> {
    let mut out = Vec::with_capacity(samples.len());
    let mut failed_ids = Vec::new();
    let mut stats = AnnotationStats { requested: samples.len(), ..Default::default() };

    for sample in samples {
        let mut s = sample.clone();
        let mut ok = true;
        for kind in kinds {
            match teacher {
                TeacherImpl::ScriptedOracle { p_err, seed } => {
                    match kind {
                        AnnKind::Description => s.description = Some(oracle_description(&s)),
                        AnnKind::Rationale => {
                            let mut rng = annotation_rng(
                                *seed,
                                &s.scene.fact_sentences(),
                                &render_question(&s),
                                &s.gold,
                            );
                            let (text, correct) = oracle_rationale(&s, *p_err, &mut rng);
                            s.rationale = Some(text);
                            s.rationale_correct = Some(correct);
                            stats.rationales_total += 1;
                            if correct {
                                stats.rationales_correct += 1;
                            }
                        }
                    }
                    s.provenance =
                        if *p_err > 0.0 { Provenance::OracleNoisy } else { Provenance::Oracle };
                }
                TeacherImpl::Remote { endpoint, options, seed: _ } => {
                    let req = TeacherRequest {
                        kind: match kind {
                            AnnKind::Description => "description".into(),
                            AnnKind::Rationale => "rationale".into(),
                        },
                        scene: s.scene.fact_sentences(),
                        question: render_question(&s),
                        gold_answer: s.gold.clone(),
                        template_id: match kind {
                            AnnKind::Description => "description".into(),
                            AnnKind::Rationale => "rationale".into(),
                        },
                    };
                    match remote_call(endpoint, &req, options) {
                        Ok(resp) => {
                            match kind {
                                AnnKind::Description => s.description = Some(resp.text),
                                AnnKind::Rationale => {
                                    let correct = extract_final_from_rationale(
                                        &resp.text,
                                        s.family(),
                                    )
                                    .map(|a| a == normalize_answer(&s.gold, s.family()))
                                    .unwrap_or(false);
                                    s.rationale = Some(resp.text);
                                    s.rationale_correct = Some(correct);
                                    stats.rationales_total += 1;
                                    if correct {
                                        stats.rationales_correct += 1;
                                    }
                                }
                            }
                            s.provenance = Provenance::Remote;
                        }
                        Err(e) => {
                            log::warn!("annotation failed for {}: {}", s.id, e);
                            ok = false;
                            break;
                        }
                    }
                }
            }
        }
        if ok {
            stats.succeeded += 1;
            out.push(s);
        } else {
            stats.failed += 1;
            failed_ids.push(sample.id.clone());
        }
    }
    if stats.succeeded == 0 && stats.requested > 0 {
        return Err(TeacherError::AllFailed(stats.requested));
    }
    Ok(AnnotatedDataset { samples: out, failed_ids, stats })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub kept: usize,
    pub dropped: usize,
}

/// Answer-consistency filter: keeps exactly the samples whose rationale's
/// extracted final answer equals the gold answer under the harness
/// normalization.
pub fn filter_by_answer(samples: &[Sample]) -> (Vec<Sample>, FilterStats) {
    let mut kept = Vec::new();
    let mut stats = FilterStats::default();
    for s in samples {
        let matches = s
            .rationale
            .as_deref()
            .and_then(|r| extract_final_from_rationale(r, s.family()))
            .map(|a| a == normalize_answer(&s.gold, s.family()))
            .unwrap_or(false);
        if matches {
            stats.kept += 1;
            kept.push(s.clone());
        } else {
            stats.dropped += 1;
        }
    }
    (kept, stats)
}
