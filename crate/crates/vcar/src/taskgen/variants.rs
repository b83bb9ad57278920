use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::families::compare_answer;
use super::{fnv64, Fact, Family, Question, Sample, TaskGenError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Question rewritten with all relevant facts inlined, whatever the level.
    QuestionAugmentation,
    /// Rationale restated with cell coordinates; strictly more tokens.
    ExtendDetails,
    /// `k` distinct rationale renderings, all ending in the gold answer.
    MultiRationale(usize),
    /// Skills / plan / rationale three-part format.
    ThreePart,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VariantOutput {
    Question(String),
    Rationale(String),
    Rationales(Vec<String>),
}

pub fn variant_transform(sample: &Sample, kind: Variant) -> Result<VariantOutput, TaskGenError> {
    match kind {
        Variant::QuestionAugmentation => {
            let mut parts: Vec<String> =
                sample.relevant_facts().iter().map(Fact::sentence).collect();
            parts.push(sample.question_text());
            Ok(VariantOutput::Question(parts.join(" ")))
        }
        Variant::ExtendDetails => {
            if sample.rationale.is_none() {
                return Err(TaskGenError::MissingAnnotation("rationale"));
            }
            Ok(VariantOutput::Rationale(extended_rationale(sample)))
        }
        Variant::MultiRationale(k) => {
            if sample.rationale.is_none() {
                return Err(TaskGenError::MissingAnnotation("rationale"));
            }
            let mut candidates = rationale_candidates(sample);
            // Seeded permutation standing in for sampling-temperature
            // diversity; deterministic per sample.
            let mut rng = ChaCha8Rng::seed_from_u64(fnv64(sample.id.as_bytes()));
            candidates.shuffle(&mut rng);
            if k > candidates.len() {
                return Err(TaskGenError::TooManyRationales {
                    requested: k,
                    available: candidates.len(),
                });
            }
            Ok(VariantOutput::Rationales(candidates.into_iter().take(k).collect()))
        }
        Variant::ThreePart => {
            let rationale = sample
                .rationale
                .as_ref()
                .ok_or(TaskGenError::MissingAnnotation("rationale"))?;
            let (skill, plan) = match sample.family() {
                Family::Count => ("counting", "Find the matching objects, then count them."),
                Family::Sum => ("addition", "Find the matching values, then add them."),
                Family::RowSum => ("addition", "Find the values in the row, then add them."),
                Family::Compare => ("comparison", "Count each group, then compare the counts."),
            };
            Ok(VariantOutput::Rationale(format!(
                "Skills: {}. Plan: {} Rationale: {}",
                skill, plan, rationale
            )))
        }
    }
}

/// Rebuilds the clean rationale with cell coordinates appended to the
/// computation step.
fn extended_rationale(sample: &Sample) -> String {
    let rel = sample.relevant_facts();
    let cite = |f: &Fact| format!("{} at cell ({}, {})", f.value, f.row, f.col);
    match sample.question {
        Question::Count { color, shape } => {
            let k = rel.len();
            let places = if rel.is_empty() {
                "after checking every cell".to_string()
            } else {
                rel.iter()
                    .map(|f| format!("at cell ({}, {})", f.row, f.col))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            format!(
                "Step 1: identify the {} {} in the image. Step 2: there are {} {} {}, {}. \
                 So the final answer is {}.",
                color.word(),
                shape.plural(),
                k,
                color.word(),
                shape.plural(),
                places,
                k
            )
        }
        Question::Sum { filter } => {
            let sum: u32 = rel.iter().map(|c| c.value as u32).sum();
            format!(
                "Step 1: find the values of {}. {} So the final answer is {}.",
                filter.phrase(),
                cited_sum_chain(&rel, &cite),
                sum
            )
        }
        Question::RowSum { row } => {
            let sum: u32 = rel.iter().map(|c| c.value as u32).sum();
            format!(
                "Step 1: find the values in row {}. {} So the final answer is {}.",
                row,
                cited_sum_chain(&rel, &cite),
                sum
            )
        }
        Question::Compare { shape, a, b } => {
            let ca = rel.iter().filter(|c| c.color == a).count();
            let cb = rel.iter().filter(|c| c.color == b).count();
            let places = rel
                .iter()
                .map(|f| format!("cell ({}, {})", f.row, f.col))
                .collect::<Vec<_>>()
                .join(", ");
            format!(
                "Step 1: count the {} {} and the {} {}, checking {}. Step 2: {} versus {}. \
                 So the final answer is {}.",
                a.word(),
                shape.plural(),
                b.word(),
                shape.plural(),
                places,
                ca,
                cb,
                compare_answer(ca, cb, a, b)
            )
        }
    }
}

/// Addition chain with cell citations on each fresh operand; running
/// totals stay bare.
fn cited_sum_chain(rel: &[Fact], cite: &dyn Fn(&Fact) -> String) -> String {
    let mut parts = Vec::new();
    match rel.len() {
        0 => parts.push("Step 2: 0 = 0, after checking every cell.".to_string()),
        1 => parts.push(format!("Step 2: {} = {}.", cite(&rel[0]), rel[0].value)),
        _ => {
            let mut total = rel[0].value as u32;
            let mut first_cite = Some(cite(&rel[0]));
            for (i, f) in rel[1..].iter().enumerate() {
                let next = total + f.value as u32;
                let lhs = match first_cite.take() {
                    Some(c) => c,
                    None => total.to_string(),
                };
                parts.push(format!("Step {}: {} + {} = {}.", i + 2, lhs, cite(f), next));
                total = next;
            }
        }
    }
    parts.join(" ")
}

/// Distinct rationale renderings: the standard phrasing, an alternative
/// phrasing, and operand-order reversals where the expression has one.
fn rationale_candidates(sample: &Sample) -> Vec<String> {
    let rel = sample.relevant_facts();
    let mut out = Vec::new();
    match sample.question {
        Question::Count { color, shape } => {
            let k = rel.len();
            out.push(format!(
                "Step 1: identify the {} {} in the image. Step 2: there are {} {} {}. \
                 So the final answer is {}.",
                color.word(),
                shape.plural(),
                k,
                color.word(),
                shape.plural(),
                k
            ));
            out.push(format!(
                "First, look for the {} {}. Then count them: there are {} {} {}. \
                 So the final answer is {}.",
                color.word(),
                shape.plural(),
                k,
                color.word(),
                shape.plural(),
                k
            ));
        }
        Question::Sum { .. } | Question::RowSum { .. } => {
            let phrase = match sample.question {
                Question::Sum { filter } => format!("find the values of {}", filter.phrase()),
                Question::RowSum { row } => format!("find the values in row {}", row),
                _ => unreachable!(),
            };
            let values: Vec<u8> = rel.iter().map(|c| c.value).collect();
            let sum: u32 = values.iter().map(|&v| v as u32).sum();
            let reversed: Vec<u8> = values.iter().rev().copied().collect();
            out.push(format!(
                "Step 1: {}. {} So the final answer is {}.",
                phrase,
                super::oracle::sum_chain(&values, 2),
                sum
            ));
            out.push(format!(
                "First, {}. Then add them in order. {} So the final answer is {}.",
                phrase,
                super::oracle::sum_chain(&values, 2),
                sum
            ));
            if reversed != values {
                out.push(format!(
                    "Step 1: {}. {} So the final answer is {}.",
                    phrase,
                    super::oracle::sum_chain(&reversed, 2),
                    sum
                ));
                out.push(format!(
                    "First, {}. Then add them in order. {} So the final answer is {}.",
                    phrase,
                    super::oracle::sum_chain(&reversed, 2),
                    sum
                ));
            }
        }
        Question::Compare { shape, a, b } => {
            let ca = rel.iter().filter(|c| c.color == a).count();
            let cb = rel.iter().filter(|c| c.color == b).count();
            let ans = compare_answer(ca, cb, a, b);
            out.push(format!(
                "Step 1: count the {} {} and the {} {}. Step 2: {} versus {}. \
                 So the final answer is {}.",
                a.word(),
                shape.plural(),
                b.word(),
                shape.plural(),
                ca,
                cb,
                ans
            ));
            out.push(format!(
                "First, count each color: {} {} {} and {} {} {}. Then compare: {} versus {}. \
                 So the final answer is {}.",
                ca,
                a.word(),
                shape.plural(),
                cb,
                b.word(),
                shape.plural(),
                ca,
                cb,
                ans
            ));
        }
    }
    out.dedup();
    out
}
