use rand::Rng;

use super::{
    generate_dataset, generate_scene, oracle_description, oracle_rationale, render_question,
    sample_rng, GenConfig, ObjColor, ObjShape, Scene, TaskGenError,
};

/// Largest numeral any template can emit: sums are bounded by six objects
/// valued at most 9, and corrupted operands stay in 0..=9.
pub const MAX_NUMERAL: u32 = 99;

/// Every word the task generator, the oracles, and the variant transforms
/// can emit. The vocabulary is built from this closed world; an
/// unknown-word error downstream means this list and a template diverged.
pub fn template_corpus() -> Vec<String> {
    let mut out: Vec<String> = Vec::new();

    // Numerals beyond the digit block.
    out.push((0..=MAX_NUMERAL).map(|n| n.to_string()).collect::<Vec<_>>().join(" "));

    // Fact sentences and absence statements for every attribute pair.
    for color in ObjColor::ALL {
        for shape in ObjShape::ALL {
            out.push(format!(
                "Cell (0, 0) contains a {} {} with value 0.",
                color.word(),
                shape.word()
            ));
            out.push(format!("There are no {} {} in the image.", color.word(), shape.plural()));
        }
    }

    // Question templates.
    for color in ObjColor::ALL {
        for shape in ObjShape::ALL {
            out.push(format!("How many {} {} are there?", color.word(), shape.plural()));
        }
        out.push(format!("What is the sum of the values of all {} objects?", color.word()));
    }
    for shape in ObjShape::ALL {
        out.push(format!("What is the sum of the values of all {}?", shape.plural()));
        for a in ObjColor::ALL {
            for b in ObjColor::ALL {
                if a != b {
                    out.push(format!(
                        "Are there more {} {} or {} {}?",
                        a.word(),
                        shape.plural(),
                        b.word(),
                        shape.plural()
                    ));
                }
            }
        }
    }
    out.push("What is the sum of the values in row 0?".into());

    // Rationale templates, standard and alternative phrasings, with the
    // extended-detail and three-part decorations.
    out.push(
        "Step 1: identify the red circles in the image. Step 2: there are 3 red circles, \
         at cell (0, 1), after checking every cell. So the final answer is 3."
            .into(),
    );
    out.push(
        "First, look for the red circles. Then count them: there are 3 red circles. \
         So the final answer is 3."
            .into(),
    );
    out.push(
        "Step 1: find the values of all squares. Step 2: 4 at cell (1, 2) + 2 = 6. \
         So the final answer is 6."
            .into(),
    );
    out.push("First, find the values of all squares. Then add them in order. Step 3: 4 + 2 = 6.".into());
    out.push("Step 1: find the values in row 2. Step 2: 5 + 7 = 12. So the final answer is 12.".into());
    out.push(
        "Step 1: count the red triangles and the blue triangles, checking cell (0, 1), \
         cell (2, 3). Step 2: 2 versus 3. So the final answer is blue."
            .into(),
    );
    out.push(
        "First, count each color: 2 red triangles and 3 blue triangles. Then compare: \
         2 versus 3. So the final answer is equal."
            .into(),
    );

    // Three-part scaffolding.
    out.push("Skills: counting. Plan: Find the matching objects, then count them.".into());
    out.push("Skills: addition. Plan: Find the matching values, then add them.".into());
    out.push("Skills: addition. Plan: Find the values in the row, then add them.".into());
    out.push("Skills: comparison. Plan: Count each group, then compare the counts. Rationale: so.".into());

    // Answer-extraction turn.
    out.push("So the final answer is 6.".into());

    out
}

/// One backbone-pretraining item. Language items pair template text with a
/// mismatched scene so the backbone learns the toy language without visual
/// grounding; alignment items pair a scene with an untargeted dump of true
/// facts about it, giving the backbone the captioning pathway that
/// description training later makes question-targeted.
#[derive(Debug, Clone)]
pub enum PretrainItem {
    /// True scene, unrelated question, a few true facts as the description.
    Alignment { scene: Scene, question: String, facts: Vec<String> },
    /// Mismatched scene; description plus rationale plus answer turn.
    ReasonWithContext {
        scene: Scene,
        question: String,
        description: String,
        rationale: String,
        answer: String,
    },
    /// Mismatched scene; rationale without description context.
    ReasonBare { scene: Scene, question: String, rationale: String, answer: String },
    /// Mismatched scene; answer turn only.
    AnswerOnly { scene: Scene, question: String, answer: String },
    /// Mismatched scene; description segment only.
    DescribeOnly { scene: Scene, question: String, description: String },
}

/// Deterministic pretraining corpus. `alignment_fraction` of the items are
/// grounded captioning (true facts of the attached scene, not selected by
/// any question); the rest exercise the language and sequence formats
/// against scenes that carry no information about the text, with the
/// description-conditioned reasoning format dominating so the backbone
/// reads text facts fluently.
pub fn pretrain_items(
    config: &GenConfig,
    n: usize,
    alignment_fraction: f64,
    seed: u64,
) -> Result<Vec<PretrainItem>, TaskGenError> {
    // Skew content toward the addition families: multi-operand arithmetic
    // needs the most exposure.
    let gen_config = GenConfig {
        master_seed: seed,
        family_weights: [1.0, 1.6, 0.8, 1.6],
        ..config.clone()
    };
    // Two samples per item: one supplies text, the other an unrelated
    // question or scene.
    let content = generate_dataset(&gen_config, n, "pretrain-a")?;
    let other = generate_dataset(&gen_config, n, "pretrain-b")?;

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_rng(seed, "pretrain-mix", i as u64);
        let sample = &content[i];
        let unrelated_q = render_question(&other[i]);
        let item = if rng.gen::<f64>() < alignment_fraction {
            let cells = &sample.scene.cells;
            if cells.is_empty() {
                PretrainItem::DescribeOnly {
                    scene: sample.scene.clone(),
                    question: unrelated_q,
                    description: oracle_description(sample),
                }
            } else {
                // Untargeted captioning of the attached scene: the full
                // row-major dump half the time, a random run otherwise.
                let (start, k) = if rng.gen::<bool>() {
                    (0, cells.len())
                } else {
                    let k = rng.gen_range(1..=cells.len());
                    (rng.gen_range(0..=cells.len() - k), k)
                };
                let facts = cells[start..start + k].iter().map(|c| c.sentence()).collect();
                PretrainItem::Alignment {
                    scene: sample.scene.clone(),
                    question: unrelated_q,
                    facts,
                }
            }
        } else {
            let mismatched = generate_scene(&mut rng, &gen_config);
            let (rationale, _) = oracle_rationale(sample, 0.0, &mut rng);
            let question = render_question(sample);
            match rng.gen_range(0..10u32) {
                0..=4 => {
                    // A third of the reasoning contexts carry the full
                    // scene dump instead of the targeted description, so
                    // reading relevant facts out of an over-complete
                    // context is also pretrained.
                    let description = if rng.gen_range(0..3u32) == 0 {
                        sample.scene.fact_sentences().join(" ")
                    } else {
                        oracle_description(sample)
                    };
                    PretrainItem::ReasonWithContext {
                        scene: mismatched,
                        question,
                        description,
                        rationale,
                        answer: sample.gold.clone(),
                    }
                }
                5..=6 => PretrainItem::ReasonBare {
                    scene: mismatched,
                    question,
                    rationale,
                    answer: sample.gold.clone(),
                },
                7 => PretrainItem::AnswerOnly {
                    scene: mismatched,
                    question,
                    answer: sample.gold.clone(),
                },
                _ => PretrainItem::DescribeOnly {
                    scene: mismatched,
                    question,
                    description: oracle_description(sample),
                },
            }
        };
        out.push(item);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic() {
        assert_eq!(template_corpus(), template_corpus());
    }

    #[test]
    fn pretrain_items_are_deterministic() {
        let config = GenConfig::default();
        let a = pretrain_items(&config, 40, 0.25, 9).unwrap();
        let b = pretrain_items(&config, 40, 0.25, 9).unwrap();
        assert_eq!(format!("{:?}", a), format!("{:?}", b));
    }

    #[test]
    fn alignment_facts_are_true() {
        let config = GenConfig::default();
        for item in pretrain_items(&config, 200, 0.5, 13).unwrap() {
            if let PretrainItem::Alignment { scene, facts, .. } = item {
                assert!(!facts.is_empty());
                for fact in facts {
                    assert!(
                        scene.cells.iter().any(|c| c.sentence() == fact),
                        "fact not in scene: {}",
                        fact
                    );
                }
            }
        }
    }
}
