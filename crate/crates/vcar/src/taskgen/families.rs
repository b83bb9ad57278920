use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Cell, Family, ObjColor, ObjShape, Scene};

/// Attribute filter for the sum family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filter {
    Shape(ObjShape),
    Color(ObjColor),
}

impl Filter {
    fn matches(self, c: &Cell) -> bool {
        match self {
            Filter::Shape(s) => c.shape == s,
            Filter::Color(col) => c.color == col,
        }
    }

    pub fn phrase(self) -> String {
        match self {
            Filter::Shape(s) => format!("all {}", s.plural()),
            Filter::Color(c) => format!("all {} objects", c.word()),
        }
    }
}

/// Structured question: family plus its arguments. The textual rendering
/// and the gold-answer predicate both derive from this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum Question {
    Count { color: ObjColor, shape: ObjShape },
    Sum { filter: Filter },
    Compare { shape: ObjShape, a: ObjColor, b: ObjColor },
    RowSum { row: u8 },
}

impl Question {
    pub fn family(&self) -> Family {
        match self {
            Question::Count { .. } => Family::Count,
            Question::Sum { .. } => Family::Sum,
            Question::Compare { .. } => Family::Compare,
            Question::RowSum { .. } => Family::RowSum,
        }
    }

    pub fn render(&self) -> String {
        match self {
            Question::Count { color, shape } => {
                format!("How many {} {} are there?", color.word(), shape.plural())
            }
            Question::Sum { filter } => {
                format!("What is the sum of the values of {}?", filter.phrase())
            }
            Question::Compare { shape, a, b } => format!(
                "Are there more {} {} or {} {}?",
                a.word(),
                shape.plural(),
                b.word(),
                shape.plural()
            ),
            Question::RowSum { row } => {
                format!("What is the sum of the values in row {}?", row)
            }
        }
    }

    /// Cells the predicate reads, row-major (scene cells are kept sorted).
    pub fn relevant_cells(&self, scene: &Scene) -> Vec<Cell> {
        let pred = |c: &&Cell| -> bool {
            match self {
                Question::Count { color, shape } => c.color == *color && c.shape == *shape,
                Question::Sum { filter } => filter.matches(c),
                Question::Compare { shape, a, b } => {
                    c.shape == *shape && (c.color == *a || c.color == *b)
                }
                Question::RowSum { row } => c.row == *row,
            }
        };
        scene.cells.iter().filter(pred).copied().collect()
    }

    /// Gold answer by direct evaluation over the scene.
    pub fn evaluate(&self, scene: &Scene) -> String {
        let rel = self.relevant_cells(scene);
        match self {
            Question::Count { .. } => rel.len().to_string(),
            Question::Sum { .. } | Question::RowSum { .. } => {
                rel.iter().map(|c| c.value as u32).sum::<u32>().to_string()
            }
            Question::Compare { a, b, .. } => {
                let ca = rel.iter().filter(|c| c.color == *a).count();
                let cb = rel.iter().filter(|c| c.color == *b).count();
                compare_answer(ca, cb, *a, *b)
            }
        }
    }
}

pub fn compare_answer(ca: usize, cb: usize, a: ObjColor, b: ObjColor) -> String {
    if ca > cb {
        a.word().to_string()
    } else if cb > ca {
        b.word().to_string()
    } else {
        "equal".to_string()
    }
}

/// Draws feasible question arguments for the family on this scene, or
/// `None` when the family cannot be asked (caller redraws the scene).
pub fn choose_question(scene: &Scene, family: Family, rng: &mut ChaCha8Rng) -> Option<Question> {
    match family {
        Family::Count => {
            // Mostly ask about combinations present in the scene, so the
            // answer distribution is not dominated by zero; zero-count
            // questions stay in at a smaller rate.
            let mut present = Vec::new();
            for shape in ObjShape::ALL {
                for color in ObjColor::ALL {
                    if scene.cells.iter().any(|c| c.shape == shape && c.color == color) {
                        present.push(Question::Count { color, shape });
                    }
                }
            }
            if !present.is_empty() && rng.gen::<f64>() < 0.65 {
                pick(&present, rng).copied()
            } else {
                let color = ObjColor::ALL[rng.gen_range(0..3)];
                let shape = ObjShape::ALL[rng.gen_range(0..3)];
                Some(Question::Count { color, shape })
            }
        }
        Family::Sum => {
            let mut candidates = Vec::new();
            for s in ObjShape::ALL {
                if scene.cells.iter().any(|c| c.shape == s) {
                    candidates.push(Filter::Shape(s));
                }
            }
            for col in ObjColor::ALL {
                if scene.cells.iter().any(|c| c.color == col) {
                    candidates.push(Filter::Color(col));
                }
            }
            pick(&candidates, rng).map(|&filter| Question::Sum { filter })
        }
        Family::Compare => {
            let mut candidates = Vec::new();
            for s in ObjShape::ALL {
                for (i, a) in ObjColor::ALL.into_iter().enumerate() {
                    for b in ObjColor::ALL.into_iter().skip(i + 1) {
                        let has = |col: ObjColor| {
                            scene.cells.iter().any(|c| c.shape == s && c.color == col)
                        };
                        if has(a) && has(b) {
                            candidates.push(Question::Compare { shape: s, a, b });
                        }
                    }
                }
            }
            pick(&candidates, rng).copied()
        }
        Family::RowSum => {
            let mut rows: Vec<u8> = scene.cells.iter().map(|c| c.row).collect();
            rows.dedup();
            pick(&rows, rng).map(|&row| Question::RowSum { row })
        }
    }
}

fn pick<'a, T>(items: &'a [T], rng: &mut ChaCha8Rng) -> Option<&'a T> {
    if items.is_empty() {
        None
    } else {
        Some(&items[rng.gen_range(0..items.len())])
    }
}

/// Inverse of [`Question::render`] over the closed template set. The
/// question may carry a fact preamble; parsing starts at the last sentence.
pub fn parse_question(text: &str) -> Option<Question> {
    // The question proper is the final sentence, ending in '?'.
    let text = text.trim();
    let text = text.strip_suffix('?')?;
    let q = match text.rfind('.') {
        Some(i) => text[i + 1..].trim(),
        None => text.trim(),
    };
    let words: Vec<&str> = q.split_whitespace().collect();
    match words.as_slice() {
        ["How", "many", color, shape, "are", "there"] => Some(Question::Count {
            color: ObjColor::from_word(color)?,
            shape: ObjShape::from_plural(shape)?,
        }),
        ["What", "is", "the", "sum", "of", "the", "values", "in", "row", row] => {
            Some(Question::RowSum { row: row.parse().ok()? })
        }
        ["What", "is", "the", "sum", "of", "the", "values", "of", "all", rest @ ..] => {
            match rest {
                [shape] => Some(Question::Sum { filter: Filter::Shape(ObjShape::from_plural(shape)?) }),
                [color, "objects"] => {
                    Some(Question::Sum { filter: Filter::Color(ObjColor::from_word(color)?) })
                }
                _ => None,
            }
        }
        ["Are", "there", "more", a, shape_a, "or", b, shape_b] if shape_a == shape_b => {
            Some(Question::Compare {
                shape: ObjShape::from_plural(shape_a)?,
                a: ObjColor::from_word(a)?,
                b: ObjColor::from_word(b)?,
            })
        }
        _ => None,
    }
}
