use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::families::compare_answer;
use super::{Fact, Question, Sample};

/// Question-targeted ground-truth description: one canonical sentence per
/// relevant fact, row-major, nothing else. A count question over an empty
/// match set states the absence instead.
pub fn oracle_description(sample: &Sample) -> String {
    let facts = sample.relevant_facts();
    if facts.is_empty() {
        if let Question::Count { color, shape } = sample.question {
            return format!("There are no {} {} in the image.", color.word(), shape.plural());
        }
    }
    facts.iter().map(Fact::sentence).collect::<Vec<_>>().join(" ")
}

/// Operand view of a sample's reasoning step, shared by the clean and
/// corrupted rendering paths.
enum Steps {
    Count { k: usize },
    Sum { values: Vec<u8> },
    Compare { ca: usize, cb: usize },
}

fn steps_of(sample: &Sample) -> Steps {
    let rel = sample.relevant_facts();
    match sample.question {
        Question::Count { .. } => Steps::Count { k: rel.len() },
        Question::Sum { .. } | Question::RowSum { .. } => {
            Steps::Sum { values: rel.iter().map(|c| c.value).collect() }
        }
        Question::Compare { a, b, .. } => Steps::Compare {
            ca: rel.iter().filter(|c| c.color == a).count(),
            cb: rel.iter().filter(|c| c.color == b).count(),
        },
    }
}

fn step1_phrase(sample: &Sample) -> String {
    match sample.question {
        Question::Count { color, shape } => {
            format!("identify the {} {} in the image", color.word(), shape.plural())
        }
        Question::Sum { filter } => format!("find the values of {}", filter.phrase()),
        Question::RowSum { row } => format!("find the values in row {}", row),
        Question::Compare { shape, a, b } => format!(
            "count the {} {} and the {} {}",
            a.word(),
            shape.plural(),
            b.word(),
            shape.plural()
        ),
    }
}

fn render_steps(sample: &Sample, steps: &Steps) -> (String, String) {
    let step1 = step1_phrase(sample);
    match steps {
        Steps::Count { k } => {
            let (color, shape) = match sample.question {
                Question::Count { color, shape } => (color, shape),
                _ => unreachable!(),
            };
            let answer = k.to_string();
            let text = format!(
                "Step 1: {}. Step 2: there are {} {} {}. So the final answer is {}.",
                step1,
                k,
                color.word(),
                shape.plural(),
                answer
            );
            (text, answer)
        }
        Steps::Sum { values } => {
            let sum: u32 = values.iter().map(|&v| v as u32).sum();
            let answer = sum.to_string();
            let text = format!(
                "Step 1: {}. {} So the final answer is {}.",
                step1,
                sum_chain(values, 2),
                answer
            );
            (text, answer)
        }
        Steps::Compare { ca, cb } => {
            let (a, b) = match sample.question {
                Question::Compare { a, b, .. } => (a, b),
                _ => unreachable!(),
            };
            let answer = compare_answer(*ca, *cb, a, b);
            let text = format!(
                "Step 1: {}. Step 2: {} versus {}. So the final answer is {}.",
                step1, ca, cb, answer
            );
            (text, answer)
        }
    }
}

/// Templated step-by-step rationale ending in "So the final answer is y".
/// With probability `p_err` exactly one operand is corrupted and the stated
/// final answer is recomputed from the corrupted operands; the corruption is
/// resampled until that answer differs from the gold one. The flag reports
/// whether the rationale is correct.
pub fn oracle_rationale(sample: &Sample, p_err: f64, rng: &mut ChaCha8Rng) -> (String, bool) {
    let mut steps = steps_of(sample);
    let corrupt = p_err > 0.0 && rng.gen::<f64>() < p_err;
    if corrupt {
        loop {
            let mut trial = steps_of(sample);
            match &mut trial {
                Steps::Count { k } => {
                    let old = *k;
                    let mut new = rng.gen_range(0..10usize);
                    while new == old {
                        new = rng.gen_range(0..10usize);
                    }
                    *k = new;
                }
                Steps::Sum { values } => {
                    let idx = rng.gen_range(0..values.len());
                    let old = values[idx];
                    let mut new = rng.gen_range(0..10u8);
                    while new == old {
                        new = rng.gen_range(0..10u8);
                    }
                    values[idx] = new;
                }
                Steps::Compare { ca, cb } => {
                    if rng.gen::<bool>() {
                        *ca = rng.gen_range(0..10usize);
                    } else {
                        *cb = rng.gen_range(0..10usize);
                    }
                }
            }
            let (_, stated) = render_steps(sample, &trial);
            if stated != sample.gold {
                steps = trial;
                break;
            }
        }
    }
    let (text, stated) = render_steps(sample, &steps);
    debug_assert!(corrupt != (stated == sample.gold));
    (text, !corrupt)
}

/// Addition rendered as a chain of pairwise steps with running totals
/// ("Step 2: 4 + 2 = 6. Step 3: 6 + 7 = 13."), starting at the given step
/// number. Single values render as the identity ("Step 2: 4 = 4.").
pub(crate) fn sum_chain(values: &[u8], first_step: usize) -> String {
    let mut parts = Vec::new();
    match values.len() {
        0 => parts.push(format!("Step {}: 0 = 0.", first_step)),
        1 => parts.push(format!("Step {}: {} = {}.", first_step, values[0], values[0])),
        _ => {
            let mut total = values[0] as u32;
            for (i, &v) in values[1..].iter().enumerate() {
                let next = total + v as u32;
                parts.push(format!("Step {}: {} + {} = {}.", first_step + i, total, v, next));
                total = next;
            }
        }
    }
    parts.join(" ")
}

/// Independent mechanical evaluation of a rationale's arithmetic. Returns
/// the recomputed final answer provided the text parses and its internal
/// arithmetic is consistent (stated intermediate equals the recomputation).
pub fn reevaluate_rationale(text: &str) -> Option<String> {
    let cleaned = strip_cell_citations(text);
    let stated = cleaned.split("So the final answer is ").nth(1)?.trim();
    let stated = stated.trim_end_matches('.').trim();

    let computed = if let Some(pos) = cleaned.find(" versus ") {
        let left = &cleaned[..pos];
        let right = &cleaned[pos + " versus ".len()..];
        let ca: usize = last_int(left)?;
        let cb: usize = first_int(right)?;
        let mut colors = cleaned
            .split(|c: char| !c.is_alphanumeric())
            .filter_map(super::ObjColor::from_word);
        let a = colors.next()?;
        let b = colors.next()?;
        compare_answer(ca, cb, a, b)
    } else if cleaned.contains('=') {
        // Chain of additions with running totals: verify every equation
        // and that each one starts from the previous total.
        let body = cleaned.split("So the final answer is").next()?;
        let mut prev_total: Option<u32> = None;
        for eq_sentence in body.split('.').filter(|s| s.contains('=')) {
            // Drop any step label ("Step 2:" / "Then add them:") so its
            // numeral is not read as an operand.
            let expr = eq_sentence.rsplit(':').next().unwrap_or(eq_sentence);
            let (lhs, rhs) = expr.split_once('=')?;
            let operands: Vec<u32> = ints_in(lhs);
            if operands.is_empty() {
                return None;
            }
            let total: u32 = operands.iter().sum();
            let rhs_val: u32 = first_int(rhs)?;
            if total != rhs_val {
                return None;
            }
            if let Some(prev) = prev_total {
                if operands.len() < 2 || operands[0] != prev {
                    return None;
                }
            }
            prev_total = Some(total);
        }
        prev_total?.to_string()
    } else if let Some(pos) = cleaned.find("there are ") {
        first_int::<usize>(&cleaned[pos + "there are ".len()..])?.to_string()
    } else {
        return None;
    };

    if computed == stated {
        Some(computed)
    } else {
        None
    }
}

fn strip_cell_citations(text: &str) -> String {
    let mut out = text.to_string();
    while let Some(start) = out.find(" at cell (") {
        match out[start..].find(')') {
            Some(end) => out.replace_range(start..start + end + 1, ""),
            None => break,
        }
    }
    out
}

fn ints_in(text: &str) -> Vec<u32> {
    text.split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .filter_map(|s| s.parse().ok())
        .collect()
}

fn first_int<T: std::str::FromStr>(text: &str) -> Option<T> {
    text.split(|c: char| !c.is_ascii_digit())
        .find(|s| !s.is_empty())
        .and_then(|s| s.parse().ok())
}

fn last_int<T: std::str::FromStr>(text: &str) -> Option<T> {
    text.split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .next_back()
        .and_then(|s| s.parse().ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{generate_dataset, sample_rng, GenConfig, ObjShape, Question};

    fn dataset(seed: u64, n: usize) -> Vec<Sample> {
        let config = GenConfig { master_seed: seed, ..GenConfig::default() };
        generate_dataset(&config, n, "oracle").unwrap()
    }

    #[test]
    fn description_mentions_only_relevant_cells() {
        for s in dataset(41, 200) {
            let d = oracle_description(&s);
            if let Question::Sum { filter: super::super::Filter::Shape(ObjShape::Square) } =
                s.question
            {
                for c in &s.scene.cells {
                    let mentioned = d.contains(&c.sentence());
                    assert_eq!(mentioned, c.shape == ObjShape::Square);
                }
            }
            // Deterministic.
            assert_eq!(d, oracle_description(&s));
        }
    }

    #[test]
    fn zero_count_description_states_absence() {
        for s in dataset(43, 500) {
            if s.family() == crate::taskgen::Family::Count && s.relevant_facts().is_empty() {
                let d = oracle_description(&s);
                assert!(d.starts_with("There are no "), "{}", d);
                assert!(d.ends_with("in the image."));
                return;
            }
        }
        panic!("no zero-count sample found in 500 draws");
    }

    #[test]
    fn clean_rationales_are_executable() {
        for (i, s) in dataset(47, 300).into_iter().enumerate() {
            let mut rng = sample_rng(47, "rat", i as u64);
            let (text, correct) = oracle_rationale(&s, 0.0, &mut rng);
            assert!(correct);
            assert!(text.ends_with(&format!("So the final answer is {}.", s.gold)));
            assert_eq!(reevaluate_rationale(&text).as_deref(), Some(s.gold.as_str()), "{}", text);
        }
    }

    #[test]
    fn full_noise_always_mismatches() {
        for (i, s) in dataset(53, 200).into_iter().enumerate() {
            let mut rng = sample_rng(53, "noise", i as u64);
            let (text, correct) = oracle_rationale(&s, 1.0, &mut rng);
            assert!(!correct);
            let stated = text.split("So the final answer is ").nth(1).unwrap();
            assert_ne!(stated.trim_end_matches('.').trim(), s.gold);
            // Corrupted arithmetic is still internally consistent.
            assert!(reevaluate_rationale(&text).is_some(), "{}", text);
        }
    }

    #[test]
    fn noise_rate_is_binomial() {
        let n = 1000;
        let p = 0.3;
        let mut incorrect = 0;
        for (i, s) in dataset(59, n).into_iter().enumerate() {
            let mut rng = sample_rng(59, "binom", i as u64);
            let (_, correct) = oracle_rationale(&s, p, &mut rng);
            if !correct {
                incorrect += 1;
            }
        }
        // 300 +- 3 sigma where sigma = sqrt(1000 * 0.3 * 0.7) ~ 14.5.
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let lo = (n as f64 * p - 3.0 * sigma) as usize;
        let hi = (n as f64 * p + 3.0 * sigma) as usize;
        assert!((lo..=hi).contains(&incorrect), "incorrect = {}", incorrect);
    }

    #[test]
    fn sum_rationale_format() {
        use crate::taskgen::{Cell, Filter, Level, ObjColor, Provenance, Scene};
        let cells = vec![
            Cell { row: 0, col: 0, shape: ObjShape::Square, color: ObjColor::Blue, value: 4 },
            Cell { row: 1, col: 2, shape: ObjShape::Square, color: ObjColor::Red, value: 2 },
        ];
        let sample = Sample {
            id: "t-0".into(),
            scene: Scene { rows: 4, cols: 4, cells },
            question: Question::Sum { filter: Filter::Shape(ObjShape::Square) },
            level: Level::VO,
            gold: "6".into(),
            description: None,
            rationale: None,
            rationale_correct: None,
            provenance: Provenance::Oracle,
        };
        let mut rng = sample_rng(0, "fmt", 0);
        let (text, _) = oracle_rationale(&sample, 0.0, &mut rng);
        assert_eq!(
            text,
            "Step 1: find the values of all squares. Step 2: 4 + 2 = 6. \
             So the final answer is 6."
        );
        // Guaranteed mismatch under full noise for this sum.
        let (noisy, correct) = oracle_rationale(&sample, 1.0, &mut rng);
        assert!(!correct);
        assert!(!noisy.ends_with("is 6."));
    }
}
