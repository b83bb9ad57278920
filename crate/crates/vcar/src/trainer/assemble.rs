use super::{TrainError, TrainingMode};
use crate::model::vocab::{ANS, DESC, EOS, RAT, SEP};
use crate::model::Vocab;
use crate::taskgen::{render_question, variant_transform, Sample, Scene, Variant, VariantOutput};

/// One training sequence: token ids plus the supervision mask. Mask bits
/// mark response positions; the loss reads them shifted by one (a masked
/// token is a prediction target).
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledExample {
    pub sample_id: String,
    pub scene: Scene,
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub tokens: Vec<u32>,
    pub supervised: bool,
}

fn seg(tokens: Vec<u32>, supervised: bool) -> Segment {
    Segment { tokens, supervised }
}

pub const ANSWER_TURN: &str = "So the final answer is";

fn need<'a>(
    opt: &'a Option<String>,
    mode: TrainingMode,
    what: &'static str,
    sample: &Sample,
) -> Result<&'a str, TrainError> {
    opt.as_deref().ok_or(TrainError::MissingAnnotation { mode, what, sample: sample.id.clone() })
}

/// Segment layout for `(mode, stage)`. Every supervised segment carries its
/// terminator (the token generation must learn to emit to stop).
pub fn assemble_segments(
    sample: &Sample,
    mode: TrainingMode,
    stage: usize,
    vocab: &Vocab,
) -> Result<Vec<Segment>, TrainError> {
    let t = |text: &str| vocab.tokenize(text).map_err(TrainError::from);
    let q = t(&render_question(sample))?;
    let turn = t(ANSWER_TURN)?;
    let y = t(&sample.gold)?;
    let y_eos = {
        let mut v = y.clone();
        v.push(EOS);
        v
    };

    let rationale_layout = |r_text: &str| -> Result<Vec<Segment>, TrainError> {
        let mut r = t(r_text)?;
        r.push(ANS);
        Ok(vec![
            seg(q.clone(), false),
            seg(vec![RAT], false),
            seg(r, true),
            seg(turn.clone(), false),
            seg(y_eos.clone(), true),
        ])
    };

    let description_stage = |d_text: &str| -> Result<Vec<Segment>, TrainError> {
        let mut d = t(d_text)?;
        d.push(EOS);
        Ok(vec![seg(q.clone(), false), seg(vec![DESC], false), seg(d, true)])
    };

    let reason_with_context = |d_text: &str, r_text: &str| -> Result<Vec<Segment>, TrainError> {
        let d = t(d_text)?;
        let mut r = t(r_text)?;
        r.push(ANS);
        Ok(vec![
            seg(q.clone(), false),
            seg(vec![SEP], false),
            seg(d, false),
            seg(vec![RAT], false),
            seg(r, true),
            seg(turn.clone(), false),
            seg(y_eos.clone(), true),
        ])
    };

    match (mode, stage) {
        (TrainingMode::Direct, 0) => Ok(vec![
            seg(q, false),
            seg(vec![ANS], false),
            seg(turn, false),
            seg(y_eos, true),
        ]),
        (
            TrainingMode::Cot | TrainingMode::CotT | TrainingMode::CotGt
            | TrainingMode::VcarWoDescription,
            0,
        ) => rationale_layout(need(&sample.rationale, mode, "rationale", sample)?),
        (TrainingMode::TsciqThreePart, 0) => {
            need(&sample.rationale, mode, "rationale", sample)?;
            match variant_transform(sample, Variant::ThreePart)? {
                VariantOutput::Rationale(r) => rationale_layout(&r),
                _ => unreachable!(),
            }
        }
        (TrainingMode::ExtendDetails, 0) => {
            need(&sample.rationale, mode, "rationale", sample)?;
            match variant_transform(sample, Variant::ExtendDetails)? {
                VariantOutput::Rationale(r) => rationale_layout(&r),
                _ => unreachable!(),
            }
        }
        (TrainingMode::MultiRationaleConcat, 0) => {
            need(&sample.rationale, mode, "rationale", sample)?;
            let rs = match variant_transform(sample, Variant::MultiRationale(2))? {
                VariantOutput::Rationales(rs) => rs,
                _ => unreachable!(),
            };
            let mut r1 = t(&rs[0])?;
            r1.push(SEP);
            let mut r2 = t(&rs[1])?;
            r2.push(ANS);
            Ok(vec![
                seg(q, false),
                seg(vec![RAT], false),
                seg(r1, true),
                seg(r2, true),
                seg(turn, false),
                seg(y_eos, true),
            ])
        }
        (TrainingMode::Concat, 0) => {
            let mut d = t(need(&sample.description, mode, "description", sample)?)?;
            d.push(RAT);
            let mut r = t(need(&sample.rationale, mode, "rationale", sample)?)?;
            r.push(ANS);
            Ok(vec![
                seg(q, false),
                seg(vec![DESC], false),
                seg(d, true),
                seg(r, true),
                seg(turn, false),
                seg(y_eos, true),
            ])
        }
        (TrainingMode::Vcar | TrainingMode::VcarWoRationale, 0) => {
            description_stage(need(&sample.description, mode, "description", sample)?)
        }
        (TrainingMode::QuestionAugmentation, 0) => {
            match variant_transform(sample, Variant::QuestionAugmentation)? {
                VariantOutput::Question(aug) => description_stage(&aug),
                _ => unreachable!(),
            }
        }
        (TrainingMode::Vcar, 1) => reason_with_context(
            need(&sample.description, mode, "description", sample)?,
            need(&sample.rationale, mode, "rationale", sample)?,
        ),
        (TrainingMode::QuestionAugmentation, 1) => {
            let aug = match variant_transform(sample, Variant::QuestionAugmentation)? {
                VariantOutput::Question(aug) => aug,
                _ => unreachable!(),
            };
            reason_with_context(&aug, need(&sample.rationale, mode, "rationale", sample)?)
        }
        (TrainingMode::VcarWoRationale, 1) => {
            let d = t(need(&sample.description, mode, "description", sample)?)?;
            Ok(vec![
                seg(q, false),
                seg(vec![SEP], false),
                seg(d, false),
                seg(vec![ANS], false),
                seg(turn, false),
                seg(y_eos, true),
            ])
        }
        (TrainingMode::SwitchOrder, 0) => {
            let mut r = t(need(&sample.rationale, mode, "rationale", sample)?)?;
            r.push(EOS);
            Ok(vec![seg(q, false), seg(vec![RAT], false), seg(r, true)])
        }
        (TrainingMode::SwitchOrder, 1) => {
            let r = t(need(&sample.rationale, mode, "rationale", sample)?)?;
            let mut d = t(need(&sample.description, mode, "description", sample)?)?;
            d.push(ANS);
            Ok(vec![
                seg(q, false),
                seg(vec![SEP], false),
                seg(r, false),
                seg(vec![DESC], false),
                seg(d, true),
                seg(turn, false),
                seg(y_eos, true),
            ])
        }
        (TrainingMode::Multitask, _) => Err(TrainError::InvalidConfig(
            "multitask assembles through assemble_dataset (two instances per sample)".into(),
        )),
        (TrainingMode::MultiRationaleSeparate, _) => Err(TrainError::InvalidConfig(
            "multi_rationale_separate assembles through assemble_dataset".into(),
        )),
        (m, s) => {
            Err(TrainError::InvalidConfig(format!("mode {} has no stage {}", m, s)))
        }
    }
}

fn flatten(sample: &Sample, segments: Vec<Segment>) -> AssembledExample {
    let mut tokens = Vec::new();
    let mut mask = Vec::new();
    for s in segments {
        mask.extend(std::iter::repeat(s.supervised).take(s.tokens.len()));
        tokens.extend(s.tokens);
    }
    debug_assert!(mask.iter().any(|&b| b), "no supervised positions");
    debug_assert!(!mask[0], "position 0 is context, never a target");
    AssembledExample { sample_id: sample.id.clone(), scene: sample.scene.clone(), tokens, mask }
}

/// Tokens and supervision mask for one sample under `(mode, stage)`.
pub fn assemble(
    sample: &Sample,
    mode: TrainingMode,
    stage: usize,
    vocab: &Vocab,
) -> Result<AssembledExample, TrainError> {
    Ok(flatten(sample, assemble_segments(sample, mode, stage, vocab)?))
}

/// Assembles a whole dataset for one stage. Multitask and separate
/// multi-rationale modes emit two instances per sample.
pub fn assemble_dataset(
    samples: &[Sample],
    mode: TrainingMode,
    stage: usize,
    vocab: &Vocab,
) -> Result<Vec<AssembledExample>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    for sample in samples {
        match mode {
            TrainingMode::Multitask => {
                // Task-prompt token (<desc> vs <rat>) selects the target.
                let d = assemble_segments(sample, TrainingMode::Vcar, 0, vocab)?;
                let r = assemble_segments(sample, TrainingMode::Vcar, 1, vocab)?;
                out.push(flatten(sample, d));
                out.push(flatten(sample, r));
            }
            TrainingMode::MultiRationaleSeparate => {
                sample
                    .rationale
                    .as_deref()
                    .ok_or(TrainError::MissingAnnotation {
                        mode,
                        what: "rationale",
                        sample: sample.id.clone(),
                    })?;
                let rs = match variant_transform(sample, Variant::MultiRationale(2))? {
                    VariantOutput::Rationales(rs) => rs,
                    _ => unreachable!(),
                };
                for r_text in rs {
                    let mut patched = sample.clone();
                    patched.rationale = Some(r_text);
                    let segs = assemble_segments(&patched, TrainingMode::CotGt, 0, vocab)?;
                    out.push(flatten(&patched, segs));
                }
            }
            _ => out.push(assemble(sample, mode, stage, vocab)?),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vocab;
    use crate::taskgen::{
        generate_dataset, oracle_description, oracle_rationale, sample_rng, template_corpus,
        GenConfig,
    };

    fn setup(n: usize) -> (Vec<Sample>, Vocab) {
        let config = GenConfig { master_seed: 77, ..GenConfig::default() };
        let mut samples = generate_dataset(&config, n, "asm").unwrap();
        for (i, s) in samples.iter_mut().enumerate() {
            let mut rng = sample_rng(77, "asm-rat", i as u64);
            s.description = Some(oracle_description(s));
            let (r, ok) = oracle_rationale(s, 0.0, &mut rng);
            s.rationale = Some(r);
            s.rationale_correct = Some(ok);
        }
        let vocab = Vocab::build(&template_corpus()).unwrap();
        (samples, vocab)
    }

    #[test]
    fn stage_one_masks_description_plus_terminator() {
        let (samples, vocab) = setup(20);
        for s in &samples {
            let ex = assemble(s, TrainingMode::Vcar, 0, &vocab).unwrap();
            let d_len = vocab.tokenize(s.description.as_ref().unwrap()).unwrap().len();
            let masked = ex.mask.iter().filter(|&&b| b).count();
            assert_eq!(masked, d_len + 1, "description tokens plus <eos>");
            assert_eq!(*ex.tokens.last().unwrap(), EOS);
            assert!(*ex.mask.last().unwrap());
        }
    }

    #[test]
    fn stage_two_leaves_description_unmasked() {
        let (samples, vocab) = setup(20);
        for s in &samples {
            let segs = assemble_segments(s, TrainingMode::Vcar, 1, &vocab).unwrap();
            let d_tokens = vocab.tokenize(s.description.as_ref().unwrap()).unwrap();
            // Segment 2 is the description; every position unmasked.
            assert_eq!(segs[2].tokens, d_tokens);
            assert!(!segs[2].supervised);
            // Rationale and answer segments are supervised.
            assert!(segs[4].supervised);
            assert!(segs[6].supervised);
            let ex = assemble(s, TrainingMode::Vcar, 1, &vocab).unwrap();
            let r_len = vocab.tokenize(s.rationale.as_ref().unwrap()).unwrap().len();
            let y_len = vocab.tokenize(&s.gold).unwrap().len();
            let masked = ex.mask.iter().filter(|&&b| b).count();
            assert_eq!(masked, r_len + 1 + y_len + 1, "r + <ans> + y + <eos>");
        }
    }

    #[test]
    fn direct_masks_answer_only() {
        let (samples, vocab) = setup(10);
        for s in &samples {
            let ex = assemble(s, TrainingMode::Direct, 0, &vocab).unwrap();
            let y_len = vocab.tokenize(&s.gold).unwrap().len();
            assert_eq!(ex.mask.iter().filter(|&&b| b).count(), y_len + 1);
        }
    }

    #[test]
    fn switch_order_reverses_segment_order() {
        let (samples, vocab) = setup(10);
        for s in &samples {
            let r_tokens = vocab.tokenize(s.rationale.as_ref().unwrap()).unwrap();
            let d_tokens = vocab.tokenize(s.description.as_ref().unwrap()).unwrap();
            // Stage one supervises the rationale.
            let s1 = assemble_segments(s, TrainingMode::SwitchOrder, 0, &vocab).unwrap();
            let first_masked: Vec<u32> = s1
                .iter()
                .filter(|sg| sg.supervised)
                .flat_map(|sg| sg.tokens.clone())
                .collect();
            assert_eq!(&first_masked[..r_tokens.len()], &r_tokens[..]);
            // Stage two supervises the description, conditioned on r.
            let s2 = assemble_segments(s, TrainingMode::SwitchOrder, 1, &vocab).unwrap();
            let second_masked: Vec<u32> = s2
                .iter()
                .filter(|sg| sg.supervised)
                .flat_map(|sg| sg.tokens.clone())
                .collect();
            assert_eq!(&second_masked[..d_tokens.len()], &d_tokens[..]);
            // r appears unmasked as context before d.
            assert_eq!(s2[2].tokens, r_tokens);
            assert!(!s2[2].supervised);
        }
    }

    #[test]
    fn concat_supervises_three_segments() {
        let (samples, vocab) = setup(10);
        for s in &samples {
            let segs = assemble_segments(s, TrainingMode::Concat, 0, &vocab).unwrap();
            let supervised: Vec<&Segment> = segs.iter().filter(|sg| sg.supervised).collect();
            assert_eq!(supervised.len(), 3);
            assert_eq!(*supervised[0].tokens.last().unwrap(), RAT);
            assert_eq!(*supervised[1].tokens.last().unwrap(), ANS);
            assert_eq!(*supervised[2].tokens.last().unwrap(), EOS);
        }
    }

    #[test]
    fn multitask_emits_two_instances_per_sample() {
        let (samples, vocab) = setup(6);
        let all = assemble_dataset(&samples, TrainingMode::Multitask, 0, &vocab).unwrap();
        assert_eq!(all.len(), 12);
        assert!(all[0].tokens.contains(&DESC));
        assert!(all[1].tokens.contains(&RAT));
    }

    #[test]
    fn separate_rationales_emit_two_instances() {
        let (samples, vocab) = setup(6);
        let all =
            assemble_dataset(&samples, TrainingMode::MultiRationaleSeparate, 0, &vocab).unwrap();
        assert_eq!(all.len(), 12);
        assert_ne!(all[0].tokens, all[1].tokens);
    }

    #[test]
    fn missing_annotation_is_reported() {
        let (mut samples, vocab) = setup(2);
        samples[0].description = None;
        assert!(matches!(
            assemble(&samples[0], TrainingMode::Vcar, 0, &vocab),
            Err(TrainError::MissingAnnotation { what: "description", .. })
        ));
    }

    #[test]
    fn every_mode_assembles_every_sample() {
        let (samples, vocab) = setup(12);
        for mode in TrainingMode::ALL {
            for stage in mode.stages() {
                let all = assemble_dataset(&samples, mode, stage.index, &vocab).unwrap();
                assert!(!all.is_empty());
                for ex in &all {
                    assert_eq!(ex.tokens.len(), ex.mask.len());
                    assert!(ex.mask.iter().any(|&b| b));
                    assert!(!ex.mask[0]);
                    assert!(ex.tokens.len() + 16 <= 320, "sequence too long: {}", ex.tokens.len());
                }
            }
        }
    }
}
