//! End-to-end experiment orchestration: data generation (hash-reused),
//! annotation, optional filtering, backbone preparation, per-mode adapter
//! training, evaluation, and the cross-mode comparison table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{self, Checkpoint};
use super::io::{load_dataset, save_dataset, save_results};
use super::{evaluate, EvalReport, HarnessError};
use crate::inference::solve;
use crate::model::{ModelConfig, ModelParams, Vocab};
use crate::taskgen::{generate_dataset, template_corpus, GenConfig, Level, Sample};
use crate::teacher::{annotate, filter_by_answer, AnnKind, RemoteOptions, TeacherImpl};
use crate::trainer::{
    pretrain_backbone, train_pipeline, PretrainConfig, StageResult, TrainConfig, TrainingMode,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape { d_model: 128, n_layers: 4, n_heads: 4, context_len: 320 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_train: 2000, n_test: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    /// "oracle" or "remote".
    pub kind: String,
    pub endpoint: Option<String>,
    /// Rationale corruption rate for the raw chain-of-thought modes (cot,
    /// cot_t); answer-guided modes always annotate at zero noise.
    pub p_err: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { kind: "oracle".into(), endpoint: None, p_err: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub gen: GenConfig,
    pub model: ModelShape,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub modes: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            gen: GenConfig::default(),
            model: ModelShape::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            modes: vec![
                "vcar".into(),
                "cot_gt".into(),
                "vcar_wo_rationale".into(),
                "vcar_wo_description".into(),
            ],
            seeds: vec![1, 2, 3],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.gen.validate().map_err(HarnessError::TaskGen)?;
        self.train.validate().map_err(HarnessError::Train)?;
        for m in &self.modes {
            m.parse::<TrainingMode>().map_err(HarnessError::Train)?;
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::InvalidConfig("at least one seed".into()));
        }
        if self.teacher.kind != "oracle" && self.teacher.kind != "remote" {
            return Err(HarnessError::InvalidConfig(format!(
                "teacher.kind must be oracle or remote, got {}",
                self.teacher.kind
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig::with_dims(
            self.model.d_model,
            self.model.n_layers,
            self.model.n_heads,
            self.model.context_len,
            vocab_size,
            self.gen.rows,
            self.gen.cols,
        )
    }
}

pub fn short_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("hashable value");
    hex::encode(&Sha256::digest(json.as_bytes())[..6])
}

#[derive(Debug, Serialize)]
struct RunManifest {
    mode: String,
    seed: u64,
    config_hash: String,
    train_dataset: String,
    test_dataset: String,
    annotated_dataset: String,
    base_checkpoint: String,
    checkpoint: String,
    stages: Vec<StageResult>,
    train_examples: usize,
    code_version: String,
    wall_time_secs: f64,
    unix_timestamp: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub mode: TrainingMode,
    pub seed: u64,
    pub report: EvalReport,
    pub report_path: PathBuf,
}

pub struct ExperimentSummary {
    pub outcomes: Vec<RunOutcome>,
    pub comparison_path: Option<PathBuf>,
}

fn stage<T>(name: &str, r: Result<T, HarnessError>) -> Result<T, HarnessError> {
    r.map_err(|e| HarnessError::Stage { stage: name.to_string(), source: Box::new(e) })
}

/// Generates (or reuses by content hash) one dataset split.
fn prepare_split(
    out: &Path,
    gen: &GenConfig,
    n: usize,
    split: &str,
    seed: u64,
) -> Result<(PathBuf, Vec<Sample>, String), HarnessError> {
    let gen = GenConfig { master_seed: seed, ..gen.clone() };
    let hash = short_hash(&(&gen, n, split));
    let path = out.join(format!("dataset-{}-{}.jsonl", split, hash));
    if path.exists() {
        let samples = load_dataset(&path)?;
        log::info!("reusing {} ({} samples)", path.display(), samples.len());
        return Ok((path, samples, hash));
    }
    let samples = generate_dataset(&gen, n, split)?;
    save_dataset(&path, &samples)?;
    Ok((path, samples, hash))
}

fn teacher_impl(cfg: &TeacherConfig, p_err: f64, seed: u64) -> Result<TeacherImpl, HarnessError> {
    match cfg.kind.as_str() {
        "oracle" => Ok(TeacherImpl::ScriptedOracle { p_err, seed }),
        "remote" => {
            let endpoint = cfg
                .endpoint
                .clone()
                .or_else(|| std::env::var("VCAR_TEACHER_ENDPOINT").ok())
                .ok_or_else(|| {
                    HarnessError::InvalidConfig(
                        "remote teacher needs an endpoint (--endpoint or VCAR_TEACHER_ENDPOINT)"
                            .into(),
                    )
                })?;
            Ok(TeacherImpl::Remote { endpoint, options: RemoteOptions::default(), seed })
        }
        other => Err(HarnessError::InvalidConfig(format!("unknown teacher kind {}", other))),
    }
}

/// Annotates (or reuses) the training split at the given noise level.
fn prepare_annotated(
    out: &Path,
    cfg: &ExperimentConfig,
    train_hash: &str,
    samples: &[Sample],
    p_err: f64,
    seed: u64,
) -> Result<(PathBuf, Vec<Sample>), HarnessError> {
    let tag = format!("{}-p{:03}", train_hash, (p_err * 100.0).round() as u32);
    let path = out.join(format!("annotated-{}.jsonl", tag));
    if path.exists() {
        return Ok((path.clone(), load_dataset(&path)?));
    }
    let teacher = teacher_impl(&cfg.teacher, p_err, seed)?;
    let annotated = annotate(&teacher, samples, &[AnnKind::Description, AnnKind::Rationale])?;
    log::info!(
        "annotated {} samples ({} failed, {}/{} rationales correct)",
        annotated.stats.succeeded,
        annotated.stats.failed,
        annotated.stats.rationales_correct,
        annotated.stats.rationales_total
    );
    save_dataset(&path, &annotated.samples)?;
    Ok((path, annotated.samples))
}

/// Initializes and pretrains the backbone (or reloads it by hash). All
/// modes of one seed share this frozen base.
pub fn prepare_base(
    out: &Path,
    cfg: &ExperimentConfig,
    vocab: &Vocab,
    seed: u64,
) -> Result<(PathBuf, ModelParams<f32>), HarnessError> {
    let hash = short_hash(&(&cfg.model, &cfg.pretrain, &cfg.gen, vocab.size(), seed, "base"));
    let prefix = out.join(format!("base-{}", hash));
    if checkpoint::exists(&prefix) {
        let ckpt = checkpoint::load(&prefix)?;
        log::info!("reusing base {}", prefix.display());
        return Ok((prefix, ckpt.params));
    }
    let model_config = cfg.model_config(vocab.size());
    let mut params = ModelParams::init(&model_config, seed)?;
    let pre = PretrainConfig { seed, ..cfg.pretrain.clone() };
    let gen = GenConfig { master_seed: seed, ..cfg.gen.clone() };
    let result = pretrain_backbone(&mut params, &gen, &pre, vocab)?;
    log::info!("pretrained base: final loss {:.4} over {} steps", result.final_loss, result.steps);
    let ckpt = Checkpoint {
        params: params.clone(),
        vocab: vocab.clone(),
        adapters: vec![],
        adam: BTreeMap::new(),
        step_count: result.steps,
        config_hash: hash.clone(),
    };
    checkpoint::save(&prefix, &ckpt)?;
    Ok((prefix, params))
}

/// Rationale noise used for a mode: the raw chain-of-thought modes see the
/// configured teacher error rate, answer-guided modes see none.
pub fn mode_noise(mode: TrainingMode, teacher: &TeacherConfig) -> f64 {
    match mode {
        TrainingMode::Cot | TrainingMode::CotT => teacher.p_err,
        _ => 0.0,
    }
}

/// One (mode, seed) run on prepared data: train, checkpoint, evaluate.
#[allow(clippy::too_many_arguments)]
fn run_mode(
    out: &Path,
    cfg: &ExperimentConfig,
    mode: TrainingMode,
    seed: u64,
    config_hash: &str,
    base: &ModelParams<f32>,
    base_path: &Path,
    vocab: &Vocab,
    annotated: &(PathBuf, Vec<Sample>),
    test: &(PathBuf, Vec<Sample>, String),
    train_hash: &str,
) -> Result<RunOutcome, HarnessError> {
    let started = Instant::now();
    let (train_samples, dropped) = if mode.filters_rationales() {
        let (kept, stats) = filter_by_answer(&annotated.1);
        log::info!("{}: answer filter kept {} dropped {}", mode, stats.kept, stats.dropped);
        (kept, stats.dropped)
    } else {
        (annotated.1.clone(), 0)
    };
    let _ = dropped;

    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let pipeline = train_pipeline(mode, &train_samples, base, vocab, &train_cfg)?;

    let ckpt_prefix = out.join(format!("ckpt-{}-s{}", mode, seed));
    let ckpt = Checkpoint {
        params: base.clone(),
        vocab: vocab.clone(),
        adapters: pipeline
            .registry
            .ids()
            .map(|id| pipeline.registry.get(id).unwrap().clone())
            .collect::<Vec<_>>(),
        adam: pipeline.adam_states.clone(),
        step_count: pipeline.stages.iter().map(|s| s.steps).sum(),
        config_hash: config_hash.to_string(),
    };
    checkpoint::save(&ckpt_prefix, &ckpt)?;

    // Evaluation through the shared inference path.
    let mut registry = pipeline.registry;
    let mut results = Vec::with_capacity(test.1.len());
    for sample in &test.1 {
        results.push(solve(base, &mut registry, vocab, sample, mode)?);
    }
    let results_path = out.join(format!("results-{}-s{}.jsonl", mode, seed));
    save_results(&results_path, &results)?;

    let manifest_ref = format!("{}-{}-s{}", config_hash, mode, seed);
    let report = evaluate(&results, &test.1, mode.name(), seed, &manifest_ref)?;
    let report_path = out.join(format!("report-{}-s{}.json", mode, seed));
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    std::fs::write(
        out.join(format!("report-{}-s{}.txt", mode, seed)),
        report.render_table(),
    )?;

    let manifest = RunManifest {
        mode: mode.name().into(),
        seed,
        config_hash: config_hash.to_string(),
        train_dataset: train_hash.to_string(),
        test_dataset: test.2.clone(),
        annotated_dataset: annotated.0.display().to_string(),
        base_checkpoint: base_path.display().to_string(),
        checkpoint: ckpt_prefix.display().to_string(),
        stages: pipeline.stages,
        train_examples: train_samples.len(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        unix_timestamp: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    std::fs::write(
        out.join(format!("manifest-{}-s{}.json", mode, seed)),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    log::info!(
        "{} seed {}: overall {:.3} (VD+VO {:.3}) in {:.1}s",
        mode,
        seed,
        report.overall,
        report.level_union_accuracy(&[Level::VD, Level::VO]),
        started.elapsed().as_secs_f64()
    );
    Ok(RunOutcome { mode, seed, report, report_path })
}

/// Full experiment: the mode x seed matrix over shared data and a shared
/// per-seed backbone, then the comparison table.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<ExperimentSummary, HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let config_hash = short_hash(cfg);
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;

    let vocab = Vocab::build(&template_corpus())?;
    let mut outcomes = Vec::new();

    for &seed in &cfg.seeds {
        let train = stage(
            "gen-data(train)",
            prepare_split(out, &cfg.gen, cfg.data.n_train, "train", seed),
        )?;
        let test = stage(
            "gen-data(test)",
            prepare_split(out, &cfg.gen, cfg.data.n_test, "test", seed),
        )?;
        let (base_path, base) = stage("prepare-base", prepare_base(out, cfg, &vocab, seed))?;

        // One annotated file per distinct noise level among the modes.
        let mut annotated: BTreeMap<u32, (PathBuf, Vec<Sample>)> = BTreeMap::new();
        for mode_name in &cfg.modes {
            let mode: TrainingMode = mode_name.parse().map_err(HarnessError::Train)?;
            let p = mode_noise(mode, &cfg.teacher);
            let key = (p * 100.0).round() as u32;
            if !annotated.contains_key(&key) {
                let a = stage(
                    "annotate",
                    prepare_annotated(out, cfg, &train.2, &train.1, p, seed),
                )?;
                annotated.insert(key, a);
            }
        }

        for mode_name in &cfg.modes {
            let mode: TrainingMode = mode_name.parse().map_err(HarnessError::Train)?;
            let key = (mode_noise(mode, &cfg.teacher) * 100.0).round() as u32;
            let outcome = stage(
                &format!("train+eval[{} seed {}]", mode, seed),
                run_mode(
                    out,
                    cfg,
                    mode,
                    seed,
                    &config_hash,
                    &base,
                    &base_path,
                    &vocab,
                    &annotated[&key],
                    &test,
                    &train.2,
                ),
            )?;
            outcomes.push(outcome);
        }
    }

    let comparison_path = if outcomes.len() > 1 {
        let table = comparison(&outcomes);
        let path = out.join("comparison.txt");
        std::fs::write(&path, &table)?;
        std::fs::write(
            out.join("comparison.json"),
            serde_json::to_string_pretty(&comparison_rows(&outcomes))?,
        )?;
        write_level_svg(&out.join("comparison.svg"), &outcomes)?;
        Some(path)
    } else {
        None
    };

    Ok(ExperimentSummary { outcomes, comparison_path })
}

#[derive(Debug, Serialize)]
pub struct ComparisonRow {
    pub mode: String,
    pub seeds: usize,
    pub overall: f64,
    pub per_level: BTreeMap<String, f64>,
    pub vd_vo: f64,
}

/// Seed-averaged accuracy per mode.
pub fn comparison_rows(outcomes: &[RunOutcome]) -> Vec<ComparisonRow> {
    let mut by_mode: BTreeMap<String, Vec<&RunOutcome>> = BTreeMap::new();
    for o in outcomes {
        by_mode.entry(o.mode.name().to_string()).or_default().push(o);
    }
    by_mode
        .into_iter()
        .map(|(mode, runs)| {
            let n = runs.len() as f64;
            let overall = runs.iter().map(|r| r.report.overall).sum::<f64>() / n;
            let vd_vo = runs
                .iter()
                .map(|r| r.report.level_union_accuracy(&[Level::VD, Level::VO]))
                .sum::<f64>()
                / n;
            let mut per_level = BTreeMap::new();
            for l in Level::ALL {
                let acc = runs
                    .iter()
                    .map(|r| {
                        r.report.per_level.get(l.name()).map(|s| s.accuracy).unwrap_or(0.0)
                    })
                    .sum::<f64>()
                    / n;
                per_level.insert(l.name().to_string(), acc);
            }
            ComparisonRow { mode, seeds: runs.len(), overall, per_level, vd_vo }
        })
        .collect()
}

/// Rendered comparison in the benchmark's column layout, with per-level
/// deltas of vcar over cot_gt when both are present.
pub fn comparison(outcomes: &[RunOutcome]) -> String {
    let rows = comparison_rows(outcomes);
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}\n",
        "mode", "ALL", "TD", "TL", "VI", "VD", "VO", "VD+VO"
    ));
    for r in &rows {
        out.push_str(&format!(
            "{:<24}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}\n",
            r.mode,
            r.overall,
            r.per_level["TD"],
            r.per_level["TL"],
            r.per_level["VI"],
            r.per_level["VD"],
            r.per_level["VO"],
            r.vd_vo
        ));
    }
    let find = |m: &str| rows.iter().find(|r| r.mode == m);
    if let (Some(vcar), Some(cot_gt)) = (find("vcar"), find("cot_gt")) {
        out.push_str(&format!(
            "{:<24}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}\n",
            "delta vcar-cot_gt",
            vcar.overall - cot_gt.overall,
            vcar.per_level["TD"] - cot_gt.per_level["TD"],
            vcar.per_level["TL"] - cot_gt.per_level["TL"],
            vcar.per_level["VI"] - cot_gt.per_level["VI"],
            vcar.per_level["VD"] - cot_gt.per_level["VD"],
            vcar.per_level["VO"] - cot_gt.per_level["VO"],
            vcar.vd_vo - cot_gt.vd_vo
        ));
    }
    out
}

/// Minimal grouped-bar SVG: per-level accuracy, one bar per mode.
pub fn write_level_svg(path: &Path, outcomes: &[RunOutcome]) -> Result<(), HarnessError> {
    let rows = comparison_rows(outcomes);
    if rows.is_empty() {
        return Ok(());
    }
    let palette = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948"];
    let (w, h, margin) = (640.0f64, 320.0f64, 40.0f64);
    let plot_w = w - 2.0 * margin;
    let plot_h = h - 2.0 * margin;
    let group_w = plot_w / Level::ALL.len() as f64;
    let bar_w = (group_w * 0.8) / rows.len() as f64;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n",
        w, h
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (li, level) in Level::ALL.iter().enumerate() {
        let gx = margin + li as f64 * group_w;
        for (mi, row) in rows.iter().enumerate() {
            let acc = row.per_level[level.name()];
            let bh = acc * plot_h;
            let x = gx + group_w * 0.1 + mi as f64 * bar_w;
            let y = h - margin - bh;
            svg.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"><title>{} {}: {:.3}</title></rect>\n",
                x, y, bar_w * 0.9, bh, palette[mi % palette.len()], row.mode, level.name(), acc
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            gx + group_w / 2.0,
            h - margin + 16.0,
            level.name()
        ));
    }
    for (mi, row) in rows.iter().enumerate() {
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n",
            margin + mi as f64 * 150.0,
            8.0,
            palette[mi % palette.len()]
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{}</text>\n",
            margin + mi as f64 * 150.0 + 14.0,
            17.0,
            row.mode
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}
