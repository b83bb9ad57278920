use super::{ModelConfig, ModelError, ModelParams};
use crate::adapters::AdapterSet;
use crate::numerics::{
    gelu_fwd, matmul_into, row_norm_stats, scalar, softmax_row, Scalar, Tensor,
};

/// Result of greedy generation. `truncated` is set when generation ran out
/// of context or consumed its whole budget without emitting a stop token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub truncated: bool,
    pub stop_token: Option<u32>,
}

struct LayerRefs<'p, S> {
    ln1_gain: &'p [S],
    ln1_bias: &'p [S],
    ln2_gain: &'p [S],
    ln2_bias: &'p [S],
    /// Pre-transposed projection weights `[d_in x d_out]`, so block feeds
    /// run through the same matmul kernel as the tape path.
    wq_t: Vec<S>,
    wk_t: Vec<S>,
    wv_t: Vec<S>,
    wo_t: Vec<S>,
    w1_t: Vec<S>,
    w2_t: Vec<S>,
    /// Per projection (q, k, v, o): transposed adapter factors
    /// `A^T: [d_in x r]`, `B^T: [r x d_out]`.
    adapters: [Option<(Vec<S>, Vec<S>)>; 4],
}

/// Incremental greedy-decoding state with per-layer attention caches.
///
/// Computes exactly the arithmetic of the tape forward pass, one block of
/// rows at a time: every output scalar accumulates in the same order as
/// [`crate::numerics::matmul_into`] does for the full sequence, so logits
/// agree bit-for-bit with [`super::forward`].
pub struct Decoder<'p, S: Scalar> {
    config: &'p ModelConfig,
    tok_emb: &'p [S],
    pos_emb: &'p [S],
    lnf_gain: &'p [S],
    lnf_bias: &'p [S],
    head_t: Vec<S>,
    layers: Vec<LayerRefs<'p, S>>,
    scaling: S,
    pos: usize,
    k_cache: Vec<Vec<S>>,
    v_cache: Vec<Vec<S>>,
}

fn transpose_of<S: Scalar>(t: &Tensor<S>) -> Vec<S> {
    let (m, n) = (t.rows(), t.cols());
    let src = t.data();
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

impl<'p, S: Scalar> Decoder<'p, S> {
    pub fn new(
        params: &'p ModelParams<S>,
        adapter: Option<&'p AdapterSet<S>>,
        prefix: &Tensor<S>,
    ) -> Result<Self, ModelError> {
        let config = &params.config;
        if prefix.rows() != config.grid_cells() || prefix.cols() != config.d_model {
            return Err(ModelError::InvalidConfig(format!(
                "prefix shape {:?}, expected [{} x {}]",
                prefix.shape(),
                config.grid_cells(),
                config.d_model
            )));
        }
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("layers.{}", i);
            let adapter_for = |proj: &str| -> Option<(Vec<S>, Vec<S>)> {
                let set = adapter?;
                let (a, b) = set.entries.get(&format!("{}.attn.{}", p, proj))?;
                Some((transpose_of(a), transpose_of(b)))
            };
            layers.push(LayerRefs {
                ln1_gain: params.get(&format!("{}.ln1.gain", p)).data(),
                ln1_bias: params.get(&format!("{}.ln1.bias", p)).data(),
                ln2_gain: params.get(&format!("{}.ln2.gain", p)).data(),
                ln2_bias: params.get(&format!("{}.ln2.bias", p)).data(),
                wq_t: transpose_of(params.get(&format!("{}.attn.wq", p))),
                wk_t: transpose_of(params.get(&format!("{}.attn.wk", p))),
                wv_t: transpose_of(params.get(&format!("{}.attn.wv", p))),
                wo_t: transpose_of(params.get(&format!("{}.attn.wo", p))),
                w1_t: transpose_of(params.get(&format!("{}.ff.w1", p))),
                w2_t: transpose_of(params.get(&format!("{}.ff.w2", p))),
                adapters: [
                    adapter_for("wq"),
                    adapter_for("wk"),
                    adapter_for("wv"),
                    adapter_for("wo"),
                ],
            });
        }
        let mut dec = Decoder {
            config,
            tok_emb: params.get("tok_emb").data(),
            pos_emb: params.get("pos_emb").data(),
            lnf_gain: params.get("ln_f.gain").data(),
            lnf_bias: params.get("ln_f.bias").data(),
            head_t: transpose_of(params.get("head")),
            layers,
            scaling: scalar::<S>(adapter.map(AdapterSet::scaling).unwrap_or(0.0)),
            pos: 0,
            k_cache: vec![Vec::new(); config.n_layers],
            v_cache: vec![Vec::new(); config.n_layers],
        };
        dec.feed_rows(prefix.data().to_vec(), prefix.rows(), false)?;
        Ok(dec)
    }

    /// Positions still available in the context window.
    pub fn remaining(&self) -> usize {
        self.config.context_len - self.pos
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Appends token rows and returns the next-token logits of the last one.
    pub fn feed(&mut self, tokens: &[u32]) -> Result<Vec<S>, ModelError> {
        let d = self.config.d_model;
        let mut rows = Vec::with_capacity(tokens.len() * d);
        for (i, &t) in tokens.iter().enumerate() {
            let p = self.pos + i;
            if p >= self.config.context_len {
                return Err(ModelError::ContextOverflow {
                    need: self.pos + tokens.len(),
                    have: self.config.context_len,
                });
            }
            let emb = &self.tok_emb[t as usize * d..(t as usize + 1) * d];
            let pe = &self.pos_emb[p * d..(p + 1) * d];
            rows.extend(emb.iter().zip(pe).map(|(&e, &q)| e + q));
        }
        Ok(self.feed_rows(rows, tokens.len(), true)?.expect("logits requested"))
    }

    fn linear_block(
        &self,
        x: &[S],
        m: usize,
        w_t: &[S],
        adapter: Option<&(Vec<S>, Vec<S>)>,
        d_in: usize,
        d_out: usize,
    ) -> Vec<S> {
        let mut out = vec![S::zero(); m * d_out];
        matmul_into(x, w_t, &mut out, m, d_in, d_out);
        if let Some((a_t, b_t)) = adapter {
            let r = b_t.len() / d_out;
            let mut ax = vec![S::zero(); m * r];
            matmul_into(x, a_t, &mut ax, m, d_in, r);
            let mut delta = vec![S::zero(); m * d_out];
            matmul_into(&ax, b_t, &mut delta, m, r, d_out);
            for (o, dv) in out.iter_mut().zip(&delta) {
                *o = *o + self.scaling * *dv;
            }
        }
        out
    }

    fn feed_rows(
        &mut self,
        mut x: Vec<S>,
        m: usize,
        want_logits: bool,
    ) -> Result<Option<Vec<S>>, ModelError> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let hd = self.config.head_dim();
        let ff = self.config.ff_dim();
        if self.pos + m > self.config.context_len {
            return Err(ModelError::ContextOverflow {
                need: self.pos + m,
                have: self.config.context_len,
            });
        }
        let eps = scalar::<S>(super::forward::LN_EPS);
        let att_scale = scalar::<S>(1.0 / (hd as f64).sqrt());

        for li in 0..self.config.n_layers {
            let layer = &self.layers[li];
            // Pre-attention layer norm.
            let mut h = vec![S::zero(); m * d];
            for i in 0..m {
                let row = &x[i * d..(i + 1) * d];
                let (mu, inv) = row_norm_stats(row, eps);
                let hrow = &mut h[i * d..(i + 1) * d];
                for j in 0..d {
                    hrow[j] = (row[j] - mu) * inv * layer.ln1_gain[j] + layer.ln1_bias[j];
                }
            }
            let q = self.linear_block(&h, m, &layer.wq_t, layer.adapters[0].as_ref(), d, d);
            let k = self.linear_block(&h, m, &layer.wk_t, layer.adapters[1].as_ref(), d, d);
            let v = self.linear_block(&h, m, &layer.wv_t, layer.adapters[2].as_ref(), d, d);
            self.k_cache[li].extend_from_slice(&k);
            self.v_cache[li].extend_from_slice(&v);

            let kc = &self.k_cache[li];
            let vc = &self.v_cache[li];
            let mut ctx = vec![S::zero(); m * d];
            let mut scores = Vec::new();
            let mut probs = Vec::new();
            for i in 0..m {
                let p_abs = self.pos + i;
                let n_att = p_abs + 1;
                scores.clear();
                scores.resize(n_att, S::zero());
                probs.clear();
                probs.resize(n_att, S::zero());
                for head in 0..heads {
                    let off = head * hd;
                    let qrow = &q[i * d + off..i * d + off + hd];
                    for (j, s_out) in scores.iter_mut().enumerate() {
                        let krow = &kc[j * d + off..j * d + off + hd];
                        let mut acc = S::zero();
                        for (qv, kv) in qrow.iter().zip(krow) {
                            acc = acc + *qv * *kv;
                        }
                        *s_out = acc * att_scale;
                    }
                    softmax_row(&scores, &mut probs);
                    let crow = &mut ctx[i * d + off..i * d + off + hd];
                    for (j, &pj) in probs.iter().enumerate() {
                        let vrow = &vc[j * d + off..j * d + off + hd];
                        for (c, &vv) in crow.iter_mut().zip(vrow) {
                            *c = *c + pj * vv;
                        }
                    }
                }
            }
            let attn_out =
                self.linear_block(&ctx, m, &layer.wo_t, layer.adapters[3].as_ref(), d, d);
            for (xv, av) in x.iter_mut().zip(&attn_out) {
                *xv = *xv + *av;
            }

            // Feed-forward block.
            let mut h2 = vec![S::zero(); m * d];
            for i in 0..m {
                let row = &x[i * d..(i + 1) * d];
                let (mu, inv) = row_norm_stats(row, eps);
                let hrow = &mut h2[i * d..(i + 1) * d];
                for j in 0..d {
                    hrow[j] = (row[j] - mu) * inv * layer.ln2_gain[j] + layer.ln2_bias[j];
                }
            }
            let mut act = self.linear_block(&h2, m, &layer.w1_t, None, d, ff);
            for v in act.iter_mut() {
                *v = gelu_fwd(*v);
            }
            let ff_out = self.linear_block(&act, m, &layer.w2_t, None, ff, d);
            for (xv, fv) in x.iter_mut().zip(&ff_out) {
                *xv = *xv + *fv;
            }
        }
        self.pos += m;

        if !want_logits {
            return Ok(None);
        }
        let last = &x[(m - 1) * d..m * d];
        let (mu, inv) = row_norm_stats(last, eps);
        let mut final_row = vec![S::zero(); d];
        for j in 0..d {
            final_row[j] = (last[j] - mu) * inv * self.lnf_gain[j] + self.lnf_bias[j];
        }
        let v_size = self.config.vocab_size;
        let mut logits = vec![S::zero(); v_size];
        matmul_into(&final_row, &self.head_t, &mut logits, 1, d, v_size);
        Ok(Some(logits))
    }
}

/// Lowest-id argmax: ties break toward the smaller token id.
pub fn argmax<S: Scalar>(logits: &[S]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding from `[prefix ++ prompt]` until a stop token (excluded
/// from the result), the token budget, or the context limit.
pub fn generate_greedy<S: Scalar>(
    prefix: &Tensor<S>,
    prompt: &[u32],
    params: &ModelParams<S>,
    adapter: Option<&AdapterSet<S>>,
    stop: &[u32],
    max_new: usize,
) -> Result<Generation, ModelError> {
    if prompt.is_empty() {
        return Err(ModelError::InvalidConfig("generation needs a nonempty prompt".into()));
    }
    let mut dec = Decoder::new(params, adapter, prefix)?;
    let mut logits = dec.feed(prompt)?;
    let mut tokens = Vec::new();
    let mut stop_token = None;
    let mut truncated = false;
    for _ in 0..max_new {
        let tok = argmax(&logits);
        if stop.contains(&tok) {
            stop_token = Some(tok);
            break;
        }
        tokens.push(tok);
        if dec.remaining() == 0 {
            truncated = true;
            break;
        }
        logits = dec.feed(&[tok])?;
    }
    if stop_token.is_none() && !truncated && tokens.len() == max_new {
        truncated = true;
    }
    Ok(Generation { tokens, truncated, stop_token })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_adapter_set;
    use crate::model::{encode_scene, forward};
    use crate::taskgen::{generate_scene, sample_rng, GenConfig};

    fn setup() -> (ModelParams<f32>, crate::taskgen::Scene) {
        let cfg = ModelConfig::tiny(30);
        let params = ModelParams::init(&cfg, 21).unwrap();
        let gen = GenConfig { rows: 2, cols: 2, min_objects: 1, max_objects: 3, ..GenConfig::default() };
        let scene = generate_scene(&mut sample_rng(4, "dec", 0), &gen);
        (params, scene)
    }

    #[test]
    fn decoder_matches_tape_forward_bit_exactly() {
        let (params, scene) = setup();
        let prefix = encode_scene(&scene, &params).unwrap();
        let tokens: Vec<u32> = (0..17).map(|i| (i * 11 % 30) as u32).collect();

        for use_adapter in [false, true] {
            let set = init_adapter_set::<f32>("theta_d", &params.config, 3, 6.0, 5).unwrap();
            let set = if use_adapter {
                // Random B so the adapter path actually contributes.
                let mut s = set;
                let mut rng = sample_rng(6, "dec-b", 1);
                for (_, t) in s.named_tensors_mut() {
                    for v in t.data_mut() {
                        *v += 0.05
                            * (rand::Rng::gen::<f32>(&mut rng) - 0.5);
                    }
                }
                Some(s)
            } else {
                None
            };
            let reference = forward(&prefix, &tokens, &params, set.as_ref()).unwrap();

            // Feed the prompt in two chunks, then one token at a time.
            let mut dec = Decoder::new(&params, set.as_ref(), &prefix).unwrap();
            let _ = dec.feed(&tokens[..9]).unwrap();
            let mut last = dec.feed(&tokens[9..12]).unwrap();
            for t in 12..tokens.len() {
                last = dec.feed(&tokens[t..t + 1]).unwrap();
            }
            let v = params.config.vocab_size;
            let want = &reference.data()[(tokens.len() - 1) * v..tokens.len() * v];
            assert_eq!(last.len(), want.len());
            for (a, b) in last.iter().zip(want) {
                assert_eq!(a.to_bits(), b.to_bits(), "adapter={}", use_adapter);
            }
        }
    }

    #[test]
    fn zero_budget_returns_empty_flagged() {
        let (params, scene) = setup();
        let prefix = encode_scene(&scene, &params).unwrap();
        let g = generate_greedy(&prefix, &[1, 2, 3], &params, None, &[1], 0).unwrap();
        assert!(g.tokens.is_empty());
        assert!(g.truncated);
    }

    #[test]
    fn generation_is_deterministic() {
        let (params, scene) = setup();
        let prefix = encode_scene(&scene, &params).unwrap();
        let a = generate_greedy(&prefix, &[5, 9, 2], &params, None, &[1], 20).unwrap();
        let b = generate_greedy(&prefix, &[5, 9, 2], &params, None, &[1], 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn context_exhaustion_sets_truncation() {
        let (params, scene) = setup();
        let prefix = encode_scene(&scene, &params).unwrap();
        let budget = params.config.context_len - params.config.grid_cells();
        let prompt = vec![2u32; budget - 2];
        let g = generate_greedy(&prefix, &prompt, &params, None, &[], 50).unwrap();
        assert!(g.truncated);
        assert!(g.tokens.len() <= 3);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5f32, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1f32, 0.7, 0.7]), 1);
    }
}
