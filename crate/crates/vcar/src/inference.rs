//! The deployed pipeline: generate a description with the visual adapter,
//! switch to the reasoning adapter, generate a rationale conditioned on the
//! description, then elicit the final answer with the extraction turn.
//! Every baseline and ablation routes through [`solve`] so all modes are
//! scored identically.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterError, AdapterRegistry};
use crate::harness::extract_answer_text;
use crate::model::vocab::{ANS, DESC, EOS, RAT, SEP};
use crate::model::{encode_scene, generate_greedy, Generation, ModelError, ModelParams, Vocab};
use crate::numerics::Tensor;
use crate::taskgen::{render_question, Family, Sample};
use crate::trainer::{TrainingMode, ANSWER_TURN};

pub const DESC_MAX_NEW: usize = 96;
pub const RAT_MAX_NEW: usize = 128;
pub const ANS_MAX_NEW: usize = 12;

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

/// Provenance of one generated segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub kind: String,
    pub adapter: Option<String>,
    pub tokens: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub sample_id: String,
    pub mode: TrainingMode,
    pub description: Option<String>,
    pub rationale: Option<String>,
    pub raw_answer_text: String,
    /// Absent only when extraction failed; scored incorrect downstream.
    pub extracted: Option<String>,
    /// Generated segments in pipeline order.
    pub segments: Vec<SegmentMeta>,
}

struct Ctx<'a> {
    params: &'a ModelParams<f32>,
    registry: &'a mut AdapterRegistry<f32>,
    prefix: Tensor<f32>,
}

impl<'a> Ctx<'a> {
    fn generate(
        &mut self,
        kind: &str,
        adapter: Option<&str>,
        prompt: &[u32],
        stop: &[u32],
        max_new: usize,
    ) -> Result<(Generation, SegmentMeta), InferError> {
        self.registry.set_active(adapter)?;
        let gen = match generate_greedy(
            &self.prefix,
            prompt,
            self.params,
            self.registry.active_set(),
            stop,
            max_new,
        ) {
            Ok(g) => g,
            Err(ModelError::ContextOverflow { .. }) => {
                Generation { tokens: Vec::new(), truncated: true, stop_token: None }
            }
            Err(e) => return Err(e.into()),
        };
        let meta = SegmentMeta {
            kind: kind.to_string(),
            adapter: self.registry.active_id().map(String::from),
            tokens: gen.tokens.len(),
            truncated: gen.truncated,
        };
        Ok((gen, meta))
    }
}

fn question_tokens(vocab: &Vocab, sample: &Sample) -> Result<Vec<u32>, InferError> {
    Ok(vocab.tokenize(&render_question(sample)).map_err(ModelError::from)?)
}

/// Greedy description from `[q <desc>]` under the named adapter.
pub fn describe(
    params: &ModelParams<f32>,
    registry: &mut AdapterRegistry<f32>,
    vocab: &Vocab,
    sample: &Sample,
    adapter: &str,
) -> Result<(String, SegmentMeta), InferError> {
    let prefix = encode_scene(&sample.scene, params)?;
    let mut ctx = Ctx { params, registry, prefix };
    let mut prompt = question_tokens(vocab, sample)?;
    prompt.push(DESC);
    let (gen, meta) = ctx.generate("description", Some(adapter), &prompt, &[EOS], DESC_MAX_NEW)?;
    Ok((vocab.detokenize(&gen.tokens), meta))
}

/// Greedy rationale from `[q <sep> d_hat <rat>]` under the named adapter.
pub fn reason(
    params: &ModelParams<f32>,
    registry: &mut AdapterRegistry<f32>,
    vocab: &Vocab,
    sample: &Sample,
    d_hat: &str,
    adapter: &str,
) -> Result<(String, SegmentMeta), InferError> {
    let prefix = encode_scene(&sample.scene, params)?;
    let mut ctx = Ctx { params, registry, prefix };
    let mut prompt = question_tokens(vocab, sample)?;
    prompt.push(SEP);
    prompt.extend(vocab.tokenize(d_hat).map_err(ModelError::from)?);
    prompt.push(RAT);
    let (gen, meta) =
        ctx.generate("rationale", Some(adapter), &prompt, &[ANS, EOS], RAT_MAX_NEW)?;
    Ok((vocab.detokenize(&gen.tokens), meta))
}

/// Appends the extraction turn to the context, greedy-generates the final
/// span, and parses it. Never fails: an unusable continuation scores as an
/// absent extraction.
pub fn extract_answer(
    params: &ModelParams<f32>,
    registry: &mut AdapterRegistry<f32>,
    vocab: &Vocab,
    sample: &Sample,
    context: &[u32],
    adapter: Option<&str>,
) -> Result<(String, Option<String>, SegmentMeta), InferError> {
    let prefix = encode_scene(&sample.scene, params)?;
    let mut ctx = Ctx { params, registry, prefix };
    let mut prompt = context.to_vec();
    prompt.extend(vocab.tokenize(ANSWER_TURN).map_err(ModelError::from)?);
    let (gen, meta) = ctx.generate("answer", adapter, &prompt, &[EOS], ANS_MAX_NEW)?;
    let raw = vocab.detokenize(&gen.tokens);
    let extracted = extract_answer_text(&raw, sample.family());
    Ok((raw, extracted, meta))
}

/// Mode-routed end-to-end inference for one sample.
pub fn solve(
    params: &ModelParams<f32>,
    registry: &mut AdapterRegistry<f32>,
    vocab: &Vocab,
    sample: &Sample,
    mode: TrainingMode,
) -> Result<InferenceResult, InferError> {
    let q = question_tokens(vocab, sample)?;
    let tok = |text: &str| vocab.tokenize(text).map_err(ModelError::from);
    let mut segments = Vec::new();

    let (description, rationale, context, final_adapter): (
        Option<String>,
        Option<String>,
        Vec<u32>,
        Option<&str>,
    ) = match mode {
        TrainingMode::Vcar | TrainingMode::QuestionAugmentation | TrainingMode::Multitask => {
            let (d_id, r_id) = if mode == TrainingMode::Multitask {
                ("theta", "theta")
            } else {
                ("theta_d", "theta_r")
            };
            let (d_hat, d_meta) = describe(params, registry, vocab, sample, d_id)?;
            segments.push(d_meta);
            let (r_hat, r_meta) = reason(params, registry, vocab, sample, &d_hat, r_id)?;
            segments.push(r_meta);
            let mut context = q.clone();
            context.push(SEP);
            context.extend(tok(&d_hat)?);
            context.push(RAT);
            context.extend(tok(&r_hat)?);
            context.push(ANS);
            (Some(d_hat), Some(r_hat), context, Some(r_id))
        }
        TrainingMode::VcarWoRationale => {
            let (d_hat, d_meta) = describe(params, registry, vocab, sample, "theta_d")?;
            segments.push(d_meta);
            let mut context = q.clone();
            context.push(SEP);
            context.extend(tok(&d_hat)?);
            context.push(ANS);
            (Some(d_hat), None, context, Some("theta_r"))
        }
        TrainingMode::Direct => {
            let mut context = q.clone();
            context.push(ANS);
            (None, None, context, Some("theta"))
        }
        TrainingMode::Concat => {
            let prefix = encode_scene(&sample.scene, params)?;
            let mut ctx = Ctx { params, registry, prefix };
            let mut prompt = q.clone();
            prompt.push(DESC);
            let (gen, meta) = ctx.generate(
                "description+rationale",
                Some("theta"),
                &prompt,
                &[ANS, EOS],
                DESC_MAX_NEW + RAT_MAX_NEW,
            )?;
            segments.push(meta);
            let split = gen.tokens.iter().position(|&t| t == RAT);
            let (d_hat, r_hat) = match split {
                Some(i) => (
                    vocab.detokenize(&gen.tokens[..i]),
                    vocab.detokenize(&gen.tokens[i + 1..]),
                ),
                None => (vocab.detokenize(&gen.tokens), String::new()),
            };
            let mut context = q.clone();
            context.push(DESC);
            context.extend(gen.tokens.iter().copied());
            context.push(ANS);
            (Some(d_hat), Some(r_hat), context, Some("theta"))
        }
        TrainingMode::SwitchOrder => {
            // Reversed pipeline: the rationale comes first and cannot see
            // any description.
            let prefix = encode_scene(&sample.scene, params)?;
            let mut ctx = Ctx { params, registry, prefix };
            let mut prompt = q.clone();
            prompt.push(RAT);
            let (r_gen, r_meta) =
                ctx.generate("rationale", Some("theta_r"), &prompt, &[EOS], RAT_MAX_NEW)?;
            segments.push(r_meta);
            let r_hat = vocab.detokenize(&r_gen.tokens);

            let mut d_prompt = q.clone();
            d_prompt.push(SEP);
            d_prompt.extend(r_gen.tokens.iter().copied());
            d_prompt.push(DESC);
            let (d_gen, d_meta) =
                ctx.generate("description", Some("theta_d"), &d_prompt, &[ANS, EOS], DESC_MAX_NEW)?;
            segments.push(d_meta);
            let d_hat = vocab.detokenize(&d_gen.tokens);

            let mut context = d_prompt;
            context.extend(d_gen.tokens.iter().copied());
            context.push(ANS);
            (Some(d_hat), Some(r_hat), context, Some("theta_d"))
        }
        // Rationale-only family: one adapter, one generated segment.
        TrainingMode::Cot
        | TrainingMode::CotT
        | TrainingMode::CotGt
        | TrainingMode::VcarWoDescription
        | TrainingMode::TsciqThreePart
        | TrainingMode::ExtendDetails
        | TrainingMode::MultiRationaleConcat
        | TrainingMode::MultiRationaleSeparate => {
            let prefix = encode_scene(&sample.scene, params)?;
            let mut ctx = Ctx { params, registry, prefix };
            let mut prompt = q.clone();
            prompt.push(RAT);
            let (gen, meta) =
                ctx.generate("rationale", Some("theta"), &prompt, &[ANS, EOS], RAT_MAX_NEW)?;
            segments.push(meta);
            let r_hat = vocab.detokenize(&gen.tokens);
            let mut context = prompt;
            context.extend(gen.tokens.iter().copied());
            context.push(ANS);
            (None, Some(r_hat), context, Some("theta"))
        }
    };

    let (raw, extracted, meta) =
        extract_answer(params, registry, vocab, sample, &context, final_adapter)?;
    segments.push(meta);
    Ok(InferenceResult {
        sample_id: sample.id.clone(),
        mode,
        description,
        rationale,
        raw_answer_text: raw,
        extracted,
        segments,
    })
}

/// Extraction fallback sets, exposed for scoring tests.
pub fn option_words(family: Family) -> &'static [&'static str] {
    family.option_words()
}
