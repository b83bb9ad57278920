use std::collections::BTreeMap;

use super::{ModelConfig, ModelError, ModelParams};
use crate::adapters::AdapterSet;
use crate::numerics::{scalar, Scalar, Tape, Tensor, Var};
use crate::taskgen::Scene;

/// One-hot shape (3) + one-hot color (3) + normalized value (1) + empty
/// flag (1), per grid cell.
pub const SCENE_FEATURE_DIM: usize = 8;

pub const LN_EPS: f64 = 1e-5;

/// Row-major cell feature matrix `[grid_cells x 8]`.
pub fn scene_features<S: Scalar>(scene: &Scene, config: &ModelConfig) -> Result<Tensor<S>, ModelError> {
    if scene.rows != config.grid_rows || scene.cols != config.grid_cols {
        return Err(ModelError::SceneGridMismatch {
            scene_rows: scene.rows,
            scene_cols: scene.cols,
            cfg_rows: config.grid_rows,
            cfg_cols: config.grid_cols,
        });
    }
    let cells = config.grid_cells();
    let mut data = vec![S::zero(); cells * SCENE_FEATURE_DIM];
    for r in 0..scene.rows {
        for c in 0..scene.cols {
            let idx = (r as usize * scene.cols as usize + c as usize) * SCENE_FEATURE_DIM;
            match scene.cell_at(r, c) {
                Some(cell) => {
                    data[idx + cell.shape as usize] = S::one();
                    data[idx + 3 + cell.color as usize] = S::one();
                    data[idx + 6] = scalar::<S>(cell.value as f64 / 9.0);
                }
                None => {
                    data[idx + 7] = S::one();
                }
            }
        }
    }
    Ok(Tensor::from_vec(vec![cells, SCENE_FEATURE_DIM], data)?)
}

/// Base parameters and optional adapter bound onto a tape.
pub struct BoundModel {
    pub config: ModelConfig,
    pub vars: BTreeMap<String, Var>,
    /// target name -> (A, B) vars plus the alpha/rank scaling.
    pub adapter: Option<(BTreeMap<String, (Var, Var)>, f64)>,
}

/// Registers parameters (and optionally one adapter set) as tape leaves.
/// `trainable_base` marks every base tensor as requiring grad (backbone
/// pretraining); `trainable_adapter` does the same for the adapter pair.
pub fn bind_model<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    adapter: Option<&AdapterSet<S>>,
    trainable_base: bool,
    trainable_adapter: bool,
) -> Result<BoundModel, ModelError> {
    let mut vars = BTreeMap::new();
    for (name, t) in params.tensors() {
        let var = if trainable_base { tape.param(t)? } else { tape.input(t)? };
        vars.insert(name.clone(), var);
    }
    let adapter = match adapter {
        Some(set) => {
            let mut entries = BTreeMap::new();
            for (target, (a, b)) in &set.entries {
                let (av, bv) = if trainable_adapter {
                    (tape.param(a)?, tape.param(b)?)
                } else {
                    (tape.input(a)?, tape.input(b)?)
                };
                entries.insert(target.clone(), (av, bv));
            }
            Some((entries, set.scaling()))
        }
        None => None,
    };
    Ok(BoundModel { config: params.config.clone(), vars, adapter })
}

impl BoundModel {
    fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// `x · Wᵀ`, plus the adapter correction when `name` is injected.
    fn linear<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, name: &str) -> crate::numerics::Result<Var> {
        let w = self.var(name);
        let wt = tape.transpose(w)?;
        let base = tape.matmul(x, wt)?;
        if let Some((entries, scaling)) = &self.adapter {
            if let Some(&(a, b)) = entries.get(name) {
                let at = tape.transpose(a)?;
                let ax = tape.matmul(x, at)?;
                let bt = tape.transpose(b)?;
                let delta = tape.matmul(ax, bt)?;
                let scaled = tape.scale(delta, *scaling)?;
                return tape.add(base, scaled);
            }
        }
        Ok(base)
    }

    fn layer_norm<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        prefix: &str,
    ) -> crate::numerics::Result<Var> {
        let gain = self.var(&format!("{}.gain", prefix));
        let bias = self.var(&format!("{}.bias", prefix));
        tape.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Scene cells projected into prefix embeddings plus their position rows.
pub fn encode_scene_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundModel,
    scene: &Scene,
) -> Result<Var, ModelError> {
    let feats = scene_features::<S>(scene, &bound.config)?;
    let f = tape.input(&feats)?;
    let wt = tape.transpose(bound.var("scene_proj"))?;
    let projected = tape.matmul(f, wt)?;
    let pos = tape.slice_rows(bound.var("pos_emb"), 0, bound.config.grid_cells())?;
    Ok(tape.add(projected, pos)?)
}

/// Pure scene encoding; same arithmetic as the tape path.
pub fn encode_scene<S: Scalar>(
    scene: &Scene,
    params: &ModelParams<S>,
) -> Result<Tensor<S>, ModelError> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, params, None, false, false)?;
    let prefix = encode_scene_on_tape(&mut tape, &bound, scene)?;
    Ok(Tensor::from_vec(tape.shape(prefix).to_vec(), tape.value(prefix).to_vec())?)
}

/// Causal transformer over `[prefix rows ++ token embeddings]`; returns
/// next-token logits for the text positions only, `[T x vocab]`.
pub fn forward_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundModel,
    prefix: Var,
    tokens: &[u32],
) -> Result<Var, ModelError> {
    let cfg = &bound.config;
    let g = tape.shape(prefix)[0];
    let t = tokens.len();
    if g + t > cfg.context_len {
        return Err(ModelError::ContextOverflow { need: g + t, have: cfg.context_len });
    }
    if t == 0 {
        return Err(ModelError::InvalidConfig("forward needs at least one token".into()));
    }
    let tok = tape.embed(bound.var("tok_emb"), tokens)?;
    let pos = tape.slice_rows(bound.var("pos_emb"), g, t)?;
    let tok = tape.add(tok, pos)?;
    let mut x = tape.concat_rows(&[prefix, tok])?;

    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    for layer in 0..cfg.n_layers {
        let p = format!("layers.{}", layer);
        let h = bound.layer_norm(tape, x, &format!("{}.ln1", p))?;
        let q = bound.linear(tape, h, &format!("{}.attn.wq", p))?;
        let k = bound.linear(tape, h, &format!("{}.attn.wk", p))?;
        let v = bound.linear(tape, h, &format!("{}.attn.wv", p))?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, hd * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, hd * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, hd * head_dim, head_dim)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.causal_softmax_rows(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let attn_out = bound.linear(tape, ctx, &format!("{}.attn.wo", p))?;
        x = tape.add(x, attn_out)?;

        let h2 = bound.layer_norm(tape, x, &format!("{}.ln2", p))?;
        let ff1 = bound.linear(tape, h2, &format!("{}.ff.w1", p))?;
        let act = tape.gelu(ff1)?;
        let ff2 = bound.linear(tape, act, &format!("{}.ff.w2", p))?;
        x = tape.add(x, ff2)?;
    }
    let h = bound.layer_norm(tape, x, "ln_f")?;
    let text = tape.slice_rows(h, g, t)?;
    let ht = tape.transpose(bound.var("head"))?;
    Ok(tape.matmul(text, ht)?)
}

/// Pure forward pass (reference path; generation uses the incremental
/// decoder, which must agree with this bit-exactly).
pub fn forward<S: Scalar>(
    prefix: &Tensor<S>,
    tokens: &[u32],
    params: &ModelParams<S>,
    adapter: Option<&AdapterSet<S>>,
) -> Result<Tensor<S>, ModelError> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, params, adapter, false, false)?;
    let prefix_var = tape.input(prefix)?;
    let logits = forward_on_tape(&mut tape, &bound, prefix_var, tokens)?;
    Ok(Tensor::from_vec(tape.shape(logits).to_vec(), tape.value(logits).to_vec())?)
}

/// Central finite-difference check of the complete model loss at f64: a
/// small transformer with an active adapter, every base and adapter scalar
/// perturbed. Returns the max relative error.
pub fn full_model_fd_check(eps: f64) -> Result<f64, ModelError> {
    use crate::adapters::init_adapter_set;
    use crate::numerics::grad_check;
    use crate::taskgen::{ObjColor, ObjShape};
    use rand::{Rng, SeedableRng};

    let cfg = super::ModelConfig::tiny(24);
    let mut params = super::ModelParams::<f64>::init(&cfg, 5)?;
    // Condition the probe: scale the projections so attention is far from
    // uniform and every gradient path carries magnitude well above the
    // central-difference noise floor.
    for name in params.names().cloned().collect::<Vec<_>>() {
        if name.contains("attn.") || name.contains("ff.") || name == "head" || name == "scene_proj"
        {
            for v in params.get_mut(&name).data_mut() {
                *v *= 12.0;
            }
        }
    }
    let scene = Scene {
        rows: 2,
        cols: 2,
        cells: vec![
            crate::taskgen::Cell {
                row: 0,
                col: 0,
                shape: ObjShape::Triangle,
                color: ObjColor::Green,
                value: 9,
            },
            crate::taskgen::Cell {
                row: 1,
                col: 1,
                shape: ObjShape::Circle,
                color: ObjColor::Red,
                value: 3,
            },
        ],
    };
    let tokens = [4u32, 9, 11, 2, 19, 1];
    let targets = [9u32, 11, 2, 19, 1, 1];
    let mask = [false, true, true, true, true, true];

    let mut adapter = init_adapter_set::<f64>("theta_d", &cfg, 2, 4.0, 3)
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    for (_, t) in adapter.named_tensors_mut() {
        for v in t.data_mut() {
            *v += 0.5 * (rng.gen::<f64>() - 0.5);
        }
    }

    let mut all = params.tensors().clone();
    for (name, t) in adapter.named_tensors() {
        all.insert(format!("adapter/{}", name), t.clone());
    }
    let scaling = adapter.scaling();
    let err = grad_check(&all, eps, |tape, vars| {
        let mut bound_vars = BTreeMap::new();
        for (name, &var) in vars.iter().filter(|(n, _)| !n.starts_with("adapter/")) {
            bound_vars.insert(name.clone(), var);
        }
        let mut entries = BTreeMap::new();
        for target in &cfg.injection_targets {
            let a = vars[&format!("adapter/{}/A", target)];
            let b = vars[&format!("adapter/{}/B", target)];
            entries.insert(target.clone(), (a, b));
        }
        let bound =
            BoundModel { config: cfg.clone(), vars: bound_vars, adapter: Some((entries, scaling)) };
        let unwrap = |r: Result<Var, ModelError>| match r {
            Ok(v) => Ok(v),
            Err(ModelError::Numerics(n)) => Err(n),
            Err(other) => panic!("{}", other),
        };
        let prefix = unwrap(encode_scene_on_tape(tape, &bound, &scene))?;
        let logits = unwrap(forward_on_tape(tape, &bound, prefix, &tokens))?;
        tape.cross_entropy_masked(logits, &targets, &mask)
    })
    .map_err(ModelError::from)?;
    Ok(err)
}
