//! Command-line surface: dataset generation, annotation, filtering,
//! training, evaluation, the ablation matrix, report rendering, the
//! loopback teacher server, and the gradient-check battery.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use super::checkpoint;
use super::experiment::{
    comparison, mode_noise, prepare_base, run_experiment, short_hash, ExperimentConfig,
    RunOutcome, TeacherConfig,
};
use super::io::{load_dataset, save_dataset, save_results};
use super::{evaluate, HarnessError};
use crate::inference::solve;
use crate::model::Vocab;
use crate::numerics::{grad_check, Tape, Tensor, Var};
use crate::taskgen::{generate_dataset, template_corpus, GenConfig};
use crate::teacher::{annotate, filter_by_answer, serve, AnnKind, RemoteOptions, TeacherImpl};
use crate::trainer::{train_pipeline, TrainConfig, TrainingMode};

#[derive(Debug, Parser)]
#[command(name = "vcar", version, about = "Two-step adapter training on a toy multimodal decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and test dataset files into --out.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Annotate a dataset file with descriptions and rationales.
    Annotate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "oracle")]
        teacher: String,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        p_err: f64,
        /// Comma-separated: description,rationale.
        #[arg(long, default_value = "description,rationale")]
        kinds: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep only samples whose rationale ends in the gold answer.
    Filter {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one mode on an annotated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Base checkpoint prefix; prepared (or reused) in --out when absent.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full mode x seed matrix from a config file.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the comparison table from report files in a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Serve the scripted oracle over the annotation wire protocol.
    ServeOracle {
        #[arg(long, default_value_t = 8890)]
        port: u16,
        #[arg(long, default_value_t = 0.0)]
        p_err: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every operation and the full model loss.
    Gradcheck,
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig, HarnessError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

pub fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let cfg = load_config(&config)?;
            let gen = GenConfig { master_seed: seed, ..cfg.gen.clone() };
            std::fs::create_dir_all(&out)?;
            let train = generate_dataset(&gen, cfg.data.n_train, "train")?;
            let test = generate_dataset(&gen, cfg.data.n_test, "test")?;
            save_dataset(&out.join("train.jsonl"), &train)?;
            save_dataset(&out.join("test.jsonl"), &test)?;
            println!(
                "wrote {} train and {} test samples to {}",
                train.len(),
                test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Annotate { data, teacher, endpoint, p_err, kinds, seed, out } => {
            let samples = load_dataset(&data)?;
            let teacher = match teacher.as_str() {
                "oracle" => TeacherImpl::ScriptedOracle { p_err, seed },
                "remote" => {
                    let endpoint = endpoint
                        .or_else(|| std::env::var("VCAR_TEACHER_ENDPOINT").ok())
                        .ok_or_else(|| {
                            HarnessError::InvalidConfig(
                                "remote teacher needs --endpoint or VCAR_TEACHER_ENDPOINT".into(),
                            )
                        })?;
                    TeacherImpl::Remote { endpoint, options: RemoteOptions::default(), seed }
                }
                other => {
                    return Err(HarnessError::InvalidConfig(format!(
                        "unknown teacher {:?} (oracle or remote)",
                        other
                    )))
                }
            };
            let kinds: Vec<AnnKind> = kinds
                .split(',')
                .map(|k| match k.trim() {
                    "description" => Ok(AnnKind::Description),
                    "rationale" => Ok(AnnKind::Rationale),
                    other => Err(HarnessError::InvalidConfig(format!(
                        "unknown annotation kind {:?}",
                        other
                    ))),
                })
                .collect::<Result<_, _>>()?;
            let annotated = annotate(&teacher, &samples, &kinds)?;
            save_dataset(&out, &annotated.samples)?;
            println!(
                "annotated {} samples ({} failed, {}/{} rationales correct) -> {}",
                annotated.stats.succeeded,
                annotated.stats.failed,
                annotated.stats.rationales_correct,
                annotated.stats.rationales_total,
                out.display()
            );
            Ok(())
        }
        Command::Filter { data, out } => {
            let samples = load_dataset(&data)?;
            let (kept, stats) = filter_by_answer(&samples);
            save_dataset(&out, &kept)?;
            println!("kept {} dropped {} -> {}", stats.kept, stats.dropped, out.display());
            Ok(())
        }
        Command::Train { config, mode, data, seed, out, base } => {
            let cfg = load_config(&config)?;
            let mode: TrainingMode = mode.parse().map_err(HarnessError::Train)?;
            let samples = load_dataset(&data)?;
            std::fs::create_dir_all(&out)?;
            let vocab = Vocab::build(&template_corpus())?;
            let (base_path, params) = match base {
                Some(prefix) => {
                    let ckpt = checkpoint::load(&prefix)?;
                    (prefix, ckpt.params)
                }
                None => prepare_base(&out, &cfg, &vocab, seed)?,
            };
            let train_samples = if mode.filters_rationales() {
                let (kept, stats) = filter_by_answer(&samples);
                println!("answer filter kept {} dropped {}", stats.kept, stats.dropped);
                kept
            } else {
                samples
            };
            let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
            let pipeline = train_pipeline(mode, &train_samples, &params, &vocab, &train_cfg)?;
            let prefix = out.join(format!("ckpt-{}-s{}", mode, seed));
            let ckpt = checkpoint::Checkpoint {
                params,
                vocab,
                adapters: pipeline
                    .registry
                    .ids()
                    .map(|id| pipeline.registry.get(id).unwrap().clone())
                    .collect(),
                adam: pipeline.adam_states,
                step_count: pipeline.stages.iter().map(|s| s.steps).sum(),
                config_hash: short_hash(&cfg),
            };
            checkpoint::save(&prefix, &ckpt)?;
            for s in &pipeline.stages {
                println!(
                    "stage {} [{}]: {} steps over {} examples, final loss {:.4}",
                    s.stage_index, s.adapter_id, s.steps, s.examples, s.final_loss
                );
            }
            println!("base: {}", base_path.display());
            println!("checkpoint: {}", prefix.display());
            Ok(())
        }
        Command::Eval { ckpt, data, mode, seed, out } => {
            let mode: TrainingMode = mode.parse().map_err(HarnessError::Train)?;
            let loaded = checkpoint::load(&ckpt)?;
            let samples = load_dataset(&data)?;
            let mut registry = loaded.registry();
            let mut results = Vec::with_capacity(samples.len());
            for s in &samples {
                results.push(solve(&loaded.params, &mut registry, &loaded.vocab, s, mode)?);
            }
            let report = evaluate(&results, &samples, mode.name(), seed, &loaded.config_hash)?;
            print!("{}", report.render_table());
            if let Some(out) = out {
                if let Some(dir) = out.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
                save_results(&out.with_extension("results.jsonl"), &results)?;
                println!("report: {}", out.display());
            }
            Ok(())
        }
        Command::Ablate { config, out } => {
            let cfg = load_config(&config)?;
            let summary = run_experiment(&cfg, &out)?;
            println!("{}", comparison(&summary.outcomes));
            if let Some(p) = summary.comparison_path {
                println!("comparison: {}", p.display());
            }
            Ok(())
        }
        Command::Report { dir, svg } => {
            let mut outcomes = Vec::new();
            for entry in std::fs::read_dir(&dir)? {
                let path = entry?.path();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if name.starts_with("report-") && name.ends_with(".json") {
                    let report: super::EvalReport =
                        serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                    let mode: TrainingMode =
                        report.mode.parse().map_err(HarnessError::Train)?;
                    outcomes.push(RunOutcome {
                        mode,
                        seed: report.seed,
                        report,
                        report_path: path,
                    });
                }
            }
            if outcomes.is_empty() {
                return Err(HarnessError::InvalidConfig(format!(
                    "no report-*.json files in {}",
                    dir.display()
                )));
            }
            outcomes.sort_by_key(|o| (o.mode.name().to_string(), o.seed));
            print!("{}", comparison(&outcomes));
            if let Some(svg_path) = svg {
                super::experiment::write_level_svg(&svg_path, &outcomes)?;
                println!("svg: {}", svg_path.display());
            }
            Ok(())
        }
        Command::ServeOracle { port, p_err, seed } => {
            let server = serve(&format!("127.0.0.1:{}", port), p_err, seed)?;
            println!("oracle teacher listening on {}", server.endpoint());
            println!("POST {}/v1/annotate", server.endpoint());
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
        Command::Gradcheck => {
            let results = gradcheck_battery()?;
            let mut max = 0.0f64;
            for (name, err) in &results {
                println!("{:<24} max rel err {:.3e}", name, err);
                max = max.max(*err);
            }
            println!("overall max rel err {:.3e} (tolerance 1e-4)", max);
            if max <= 1e-4 {
                Ok(())
            } else {
                Err(HarnessError::InvalidConfig(format!(
                    "gradient check failed: {:.3e} > 1e-4",
                    max
                )))
            }
        }
    }
}

/// Finite-difference battery: each differentiable operation in isolation,
/// then the complete model loss. All at f64 with eps = 1e-5.
pub fn gradcheck_battery() -> Result<Vec<(String, f64)>, HarnessError> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params_from(pairs: &[(&str, Vec<usize>, u64)]) -> BTreeMap<String, Tensor<f64>> {
        let mut out = BTreeMap::new();
        for (name, shape, seed) in pairs {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            out.insert(name.to_string(), Tensor::randn(shape.clone(), 0.6, &mut rng));
        }
        out
    }

    type Build = fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> crate::numerics::Result<Var>;
    let cases: Vec<(&str, Vec<(&str, Vec<usize>, u64)>, Build)> = vec![
        ("matmul", vec![("a", vec![3, 4], 10), ("b", vec![4, 2], 11)], |t, v| {
            let m = t.matmul(v["a"], v["b"])?;
            let e = t.exp(m)?;
            t.sum(e)
        }),
        ("transpose", vec![("a", vec![3, 4], 12)], |t, v| {
            let tr = t.transpose(v["a"])?;
            let e = t.gelu(tr)?;
            t.sum(e)
        }),
        ("add", vec![("a", vec![2, 5], 13), ("b", vec![2, 5], 14)], |t, v| {
            let s = t.add(v["a"], v["b"])?;
            let e = t.exp(s)?;
            t.sum(e)
        }),
        ("mul", vec![("a", vec![2, 5], 13), ("b", vec![2, 5], 14)], |t, v| {
            let s = t.mul(v["a"], v["b"])?;
            let e = t.exp(s)?;
            t.sum(e)
        }),
        ("scale_exp_mean", vec![("a", vec![2, 3], 15)], |t, v| {
            let s = t.scale(v["a"], -0.7)?;
            let e = t.exp(s)?;
            t.mean(e)
        }),
        ("gelu", vec![("a", vec![4, 4], 16)], |t, v| {
            let g = t.gelu(v["a"])?;
            t.sum(g)
        }),
        ("softmax_rows", vec![("a", vec![3, 5], 17)], |t, v| {
            let p = t.softmax_rows(v["a"])?;
            let e = t.exp(p)?;
            t.sum(e)
        }),
        ("causal_softmax_rows", vec![("a", vec![4, 4], 18)], |t, v| {
            let p = t.causal_softmax_rows(v["a"])?;
            let e = t.exp(p)?;
            t.sum(e)
        }),
        ("layer_norm", vec![("x", vec![3, 6], 19), ("g", vec![6], 20), ("b", vec![6], 21)], |t, v| {
            let y = t.layer_norm(v["x"], v["g"], v["b"], 1e-5)?;
            let e = t.gelu(y)?;
            t.sum(e)
        }),
        ("embed", vec![("table", vec![5, 3], 22)], |t, v| {
            let e = t.embed(v["table"], &[0, 2, 4, 2])?;
            let g = t.gelu(e)?;
            t.sum(g)
        }),
        ("slice_concat", vec![("a", vec![4, 4], 23), ("b", vec![4, 2], 24)], |t, v| {
            let top = t.slice_rows(v["a"], 0, 2)?;
            let bottom = t.slice_rows(v["a"], 2, 2)?;
            let back = t.concat_rows(&[bottom, top])?;
            let left = t.slice_cols(back, 0, 2)?;
            let wide = t.concat_cols(&[left, v["b"]])?;
            let e = t.exp(wide)?;
            t.sum(e)
        }),
        ("cross_entropy_masked", vec![("logits", vec![4, 6], 25)], |t, v| {
            t.cross_entropy_masked(v["logits"], &[1, 5, 0, 3], &[true, false, true, true])
        }),
    ];

    let mut out = Vec::new();
    for (name, spec, build) in cases {
        let params = params_from(&spec);
        let err = grad_check(&params, 1e-5, build).map_err(crate::model::ModelError::from)?;
        out.push((name.to_string(), err));
    }
    let model_err = crate::model::full_model_fd_check(1e-5)?;
    out.push(("full_model_loss".to_string(), model_err));
    Ok(out)
}

/// Resolves the default oracle noise for a mode; exposed for tests.
pub fn noise_for(mode: TrainingMode, teacher: &TeacherConfig) -> f64 {
    mode_noise(mode, teacher)
}
