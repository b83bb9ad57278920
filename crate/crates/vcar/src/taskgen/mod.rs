//! Synthetic multimodal-math benchmark generator.
//!
//! Scenes are small grids of typed objects standing in for math figures.
//! Questions come from four families (count, sum, compare, row-sum), gold
//! answers are computed by direct evaluation over the scene, and each
//! sample carries an information-placement level that controls how many of
//! the question-relevant facts are restated in the question text (TD states
//! all of them, VO none).

mod corpus;
mod families;
mod oracle;
mod variants;

pub use corpus::{pretrain_items, template_corpus, PretrainItem};
pub use families::{parse_question, Filter, Question};
pub use oracle::{oracle_description, oracle_rationale, reevaluate_rationale};
pub use variants::{variant_transform, Variant, VariantOutput};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskGenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("no feasible {family} question after {attempts} scene draws")]
    Infeasible { family: Family, attempts: usize },
    #[error("sample is missing a required {0} annotation")]
    MissingAnnotation(&'static str),
    #[error("requested {requested} rationales but only {available} distinct renderings exist")]
    TooManyRationales { requested: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjShape {
    Circle,
    Square,
    Triangle,
}

impl ObjShape {
    pub const ALL: [ObjShape; 3] = [ObjShape::Circle, ObjShape::Square, ObjShape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ObjShape::Circle => "circle",
            ObjShape::Square => "square",
            ObjShape::Triangle => "triangle",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ObjShape::Circle => "circles",
            ObjShape::Square => "squares",
            ObjShape::Triangle => "triangles",
        }
    }

    pub fn from_plural(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.plural() == word)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjColor {
    Red,
    Blue,
    Green,
}

impl ObjColor {
    pub const ALL: [ObjColor; 3] = [ObjColor::Red, ObjColor::Blue, ObjColor::Green];

    pub fn word(self) -> &'static str {
        match self {
            ObjColor::Red => "red",
            ObjColor::Blue => "blue",
            ObjColor::Green => "green",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == word)
    }
}

/// One placed object. Doubles as the atomic "fact" unit: its canonical
/// sentence rendering is what descriptions and text preambles are made of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
    pub shape: ObjShape,
    pub color: ObjColor,
    pub value: u8,
}

pub type Fact = Cell;

impl Cell {
    pub fn sentence(&self) -> String {
        format!(
            "Cell ({}, {}) contains a {} {} with value {}.",
            self.row,
            self.col,
            self.color.word(),
            self.shape.word(),
            self.value
        )
    }
}

/// Inverse of [`Cell::sentence`].
pub fn parse_fact(text: &str) -> Option<Cell> {
    let words: Vec<&str> = text
        .split(|c: char| "(),.".contains(c) || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    match words.as_slice() {
        ["Cell", row, col, "contains", "a", color, shape, "with", "value", value] => Some(Cell {
            row: row.parse().ok()?,
            col: col.parse().ok()?,
            shape: ObjShape::ALL.into_iter().find(|s| s.word() == *shape)?,
            color: ObjColor::from_word(color)?,
            value: value.parse().ok()?,
        }),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub rows: u8,
    pub cols: u8,
    /// Row-major sorted; at most one object per grid cell.
    pub cells: Vec<Cell>,
}

impl Scene {
    pub fn cell_at(&self, row: u8, col: u8) -> Option<&Cell> {
        self.cells.iter().find(|c| c.row == row && c.col == col)
    }

    /// Canonical sentences for every occupied cell, row-major. This is the
    /// serialized form of the "image" on the teacher wire.
    pub fn fact_sentences(&self) -> Vec<String> {
        self.cells.iter().map(Cell::sentence).collect()
    }

    pub fn validate(&self) -> Result<(), TaskGenError> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.cells {
            if c.row >= self.rows || c.col >= self.cols {
                return Err(TaskGenError::InvalidConfig(format!(
                    "cell ({}, {}) outside {}x{} grid",
                    c.row, c.col, self.rows, self.cols
                )));
            }
            if c.value > 9 {
                return Err(TaskGenError::InvalidConfig(format!("value {} > 9", c.value)));
            }
            if !seen.insert((c.row, c.col)) {
                return Err(TaskGenError::InvalidConfig(format!(
                    "duplicate object at ({}, {})",
                    c.row, c.col
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    TD,
    TL,
    VI,
    VD,
    VO,
}

impl Level {
    pub const ALL: [Level; 5] = [Level::TD, Level::TL, Level::VI, Level::VD, Level::VO];

    /// Fraction of question-relevant facts restated in the question text.
    pub fn fraction(self) -> f64 {
        match self {
            Level::TD => 1.0,
            Level::TL => 0.5,
            Level::VI => 0.25,
            Level::VD => 0.1,
            Level::VO => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::TD => "TD",
            Level::TL => "TL",
            Level::VI => "VI",
            Level::VD => "VD",
            Level::VO => "VO",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Count,
    Sum,
    Compare,
    RowSum,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Count, Family::Sum, Family::Compare, Family::RowSum];

    pub fn name(self) -> &'static str {
        match self {
            Family::Count => "count",
            Family::Sum => "sum",
            Family::Compare => "compare",
            Family::RowSum => "row_sum",
        }
    }

    /// Closed answer word set for non-numeric families.
    pub fn option_words(self) -> &'static [&'static str] {
        match self {
            Family::Compare => &["red", "blue", "green", "equal"],
            _ => &[],
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Oracle,
    OracleNoisy,
    Remote,
}

/// One training/evaluation instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub scene: Scene,
    pub question: Question,
    pub level: Level,
    pub gold: String,
    pub description: Option<String>,
    pub rationale: Option<String>,
    pub rationale_correct: Option<bool>,
    pub provenance: Provenance,
}

impl Sample {
    pub fn family(&self) -> Family {
        self.question.family()
    }

    /// Bare question text, without any inlined facts.
    pub fn question_text(&self) -> String {
        self.question.render()
    }

    /// Facts the gold-answer predicate reads, row-major.
    pub fn relevant_facts(&self) -> Vec<Fact> {
        self.question.relevant_cells(&self.scene)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub rows: u8,
    pub cols: u8,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Draw weights for count, sum, compare, row_sum.
    pub family_weights: [f64; 4],
    /// Draw weights for TD, TL, VI, VD, VO.
    pub level_weights: [f64; 5],
    pub master_seed: u64,
    /// Probability that an oracle rationale is corrupted.
    pub p_err: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            rows: 4,
            cols: 4,
            min_objects: 3,
            max_objects: 6,
            family_weights: [1.0; 4],
            level_weights: [1.0; 5],
            master_seed: 0,
            p_err: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), TaskGenError> {
        if self.rows == 0 || self.cols == 0 || self.rows > 10 || self.cols > 10 {
            return Err(TaskGenError::InvalidConfig(
                "grid dimensions must be in 1..=10 (single-digit coordinates)".into(),
            ));
        }
        if self.min_objects > self.max_objects {
            return Err(TaskGenError::InvalidConfig("min_objects > max_objects".into()));
        }
        if self.max_objects > (self.rows as usize) * (self.cols as usize) {
            return Err(TaskGenError::InvalidConfig("max_objects exceeds grid capacity".into()));
        }
        let ok = |w: &[f64]| w.iter().all(|&v| v >= 0.0) && w.iter().any(|&v| v > 0.0);
        if !ok(&self.family_weights) || !ok(&self.level_weights) {
            return Err(TaskGenError::InvalidConfig(
                "weights must be nonnegative and not all zero".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_err) {
            return Err(TaskGenError::InvalidConfig("p_err must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; the documented mixing function behind per-sample
/// seed derivation.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Per-sample RNG: the dataset is a pure function of (master seed, stream
/// tag, index), independent of generation order or batching.
pub fn sample_rng(master_seed: u64, stream: &str, index: u64) -> ChaCha8Rng {
    let seed = splitmix64(master_seed ^ splitmix64(fnv64(stream.as_bytes()) ^ splitmix64(index)));
    ChaCha8Rng::seed_from_u64(seed)
}

fn weighted_choice(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

/// Uniformly places `k` objects (`k` uniform in the configured range) with
/// independent uniform attributes; no cell collisions.
pub fn generate_scene(rng: &mut ChaCha8Rng, config: &GenConfig) -> Scene {
    let k = if config.max_objects == config.min_objects {
        config.min_objects
    } else {
        rng.gen_range(config.min_objects..=config.max_objects)
    };
    let n_cells = (config.rows as usize) * (config.cols as usize);
    // Partial Fisher-Yates over cell indices.
    let mut idx: Vec<usize> = (0..n_cells).collect();
    for i in 0..k.min(n_cells.saturating_sub(1)) {
        let j = rng.gen_range(i..n_cells);
        idx.swap(i, j);
    }
    let mut chosen: Vec<usize> = idx.into_iter().take(k).collect();
    chosen.sort_unstable();
    let cells = chosen
        .into_iter()
        .map(|pos| Cell {
            row: (pos / config.cols as usize) as u8,
            col: (pos % config.cols as usize) as u8,
            shape: ObjShape::ALL[rng.gen_range(0..3)],
            color: ObjColor::ALL[rng.gen_range(0..3)],
            value: rng.gen_range(0..10),
        })
        .collect();
    Scene { rows: config.rows, cols: config.cols, cells }
}

/// Builds a sample for a feasible question on the scene. The question slot
/// (which color, shape, row, ...) is drawn from the RNG among feasible
/// choices; `None` means the family cannot be asked on this scene.
pub fn generate_sample(
    scene: &Scene,
    family: Family,
    level: Level,
    rng: &mut ChaCha8Rng,
    id: String,
) -> Option<Sample> {
    let question = families::choose_question(scene, family, rng)?;
    let gold = question.evaluate(scene);
    Some(Sample {
        id,
        scene: scene.clone(),
        question,
        level,
        gold,
        description: None,
        rationale: None,
        rationale_correct: None,
        provenance: Provenance::Oracle,
    })
}

const MAX_SCENE_DRAWS: usize = 64;

/// Deterministic dataset: sample `i` depends only on (config, stream, i).
pub fn generate_dataset(
    config: &GenConfig,
    n: usize,
    stream: &str,
) -> Result<Vec<Sample>, TaskGenError> {
    config.validate()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_rng(config.master_seed, stream, i as u64);
        let family = Family::ALL[weighted_choice(&mut rng, &config.family_weights)];
        let level = Level::ALL[weighted_choice(&mut rng, &config.level_weights)];
        let id = format!("{}-{:05}", stream, i);
        let mut built = None;
        for _ in 0..MAX_SCENE_DRAWS {
            let scene = generate_scene(&mut rng, config);
            if let Some(s) = generate_sample(&scene, family, level, &mut rng, id.clone()) {
                built = Some(s);
                break;
            }
        }
        out.push(built.ok_or(TaskGenError::Infeasible { family, attempts: MAX_SCENE_DRAWS })?);
    }
    Ok(out)
}

/// Question text with the level's share of relevant facts inlined as a
/// preamble: the first `floor(fraction * n)` facts in row-major order.
pub fn render_question(sample: &Sample) -> String {
    let facts = sample.relevant_facts();
    let take = (sample.level.fraction() * facts.len() as f64).floor() as usize;
    let mut parts: Vec<String> = facts.iter().take(take).map(Fact::sentence).collect();
    parts.push(sample.question_text());
    parts.join(" ")
}
