//! Low-rank adapter sets and the activation registry.
//!
//! Each set holds one `(A, B)` pair per injection target. `B` starts at
//! zero, so a fresh set is exactly transparent; the effective weight is
//! `W + (alpha/rank) * B * A` and is always applied on the fly, never
//! merged, which keeps the base weights frozen by construction and makes
//! switching sets O(1).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::numerics::{matmul_into, scalar, NumericsError, Scalar, Tensor};
use crate::taskgen::{fnv64, splitmix64};

pub const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("rank {rank} exceeds target {target} dimension {dim}")]
    RankTooLarge { rank: usize, target: String, dim: usize },
    #[error("unknown adapter set {0:?}")]
    UnknownSet(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Static description of one adapter set, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub id: String,
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

/// One low-rank adapter collection: per-target `A: [r x d_in]` and
/// `B: [d_out x r]`.
#[derive(Debug, Clone)]
pub struct AdapterSet<S: Scalar> {
    pub id: String,
    pub rank: usize,
    pub alpha: f64,
    pub entries: BTreeMap<String, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> AdapterSet<S> {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn meta(&self) -> AdapterMeta {
        AdapterMeta {
            id: self.id.clone(),
            rank: self.rank,
            alpha: self.alpha,
            targets: self.entries.keys().cloned().collect(),
        }
    }

    /// Every A and B exactly once: target name order, A before B.
    pub fn named_tensors(&self) -> impl Iterator<Item = (String, &Tensor<S>)> {
        self.entries.iter().flat_map(|(target, (a, b))| {
            [(format!("{}/A", target), a), (format!("{}/B", target), b)]
        })
    }

    pub fn named_tensors_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor<S>)> {
        self.entries.iter_mut().flat_map(|(target, (a, b))| {
            [(format!("{}/A", target), a), (format!("{}/B", target), b)]
        })
    }
}

/// Seeded adapter initialization: `B = 0`, `A ~ N(0, 0.02^2)`, one pair per
/// injection target of the config. Target dimensions come from the base
/// weight shapes `[d_out x d_in]`.
pub fn init_adapter_set<S: Scalar>(
    id: &str,
    config: &ModelConfig,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<AdapterSet<S>, AdapterError> {
    let mut entries = BTreeMap::new();
    for target in &config.injection_targets {
        let (d_out, d_in) = (config.d_model, config.d_model);
        if rank > d_in.min(d_out) {
            return Err(AdapterError::RankTooLarge {
                rank,
                target: target.clone(),
                dim: d_in.min(d_out),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(
            seed ^ splitmix64(fnv64(id.as_bytes()) ^ fnv64(target.as_bytes())),
        ));
        let a = Tensor::randn(vec![rank, d_in], A_INIT_STD, &mut rng);
        let b = Tensor::zeros(vec![d_out, rank]);
        entries.insert(target.clone(), (a, b));
    }
    Ok(AdapterSet { id: id.to_string(), rank, alpha, entries })
}

/// `base_weight · x + (alpha/rank) · B · (A · x)` for a column-vector batch
/// `x: [d_in x n]`. The base weight is never modified.
pub fn effective_forward<S: Scalar>(
    base_weight: &Tensor<S>,
    entry: &(Tensor<S>, Tensor<S>),
    alpha: f64,
    rank: usize,
    x: &Tensor<S>,
) -> Result<Tensor<S>, AdapterError> {
    let (a, b) = entry;
    let (d_out, d_in) = (base_weight.rows(), base_weight.cols());
    let n = x.cols();
    if x.rows() != d_in || a.cols() != d_in || a.rows() != rank || b.rows() != d_out || b.cols() != rank
    {
        return Err(NumericsError::ShapeMismatch {
            op: "effective_forward",
            detail: format!(
                "W {:?}, A {:?}, B {:?}, x {:?}",
                base_weight.shape(),
                a.shape(),
                b.shape(),
                x.shape()
            ),
        }
        .into());
    }
    let mut base = vec![S::zero(); d_out * n];
    matmul_into(base_weight.data(), x.data(), &mut base, d_out, d_in, n);
    let mut ax = vec![S::zero(); rank * n];
    matmul_into(a.data(), x.data(), &mut ax, rank, d_in, n);
    let mut bax = vec![S::zero(); d_out * n];
    matmul_into(b.data(), &ax, &mut bax, d_out, rank, n);
    let s = scalar::<S>(alpha / rank as f64);
    for (o, d) in base.iter_mut().zip(&bax) {
        *o = *o + s * *d;
    }
    Ok(Tensor::from_vec(vec![d_out, n], base)?)
}

/// Holds every adapter set and tracks which one routes into forward passes.
/// Switching never touches tensor data.
#[derive(Debug, Clone, Default)]
pub struct AdapterRegistry<S: Scalar> {
    sets: BTreeMap<String, AdapterSet<S>>,
    active: Option<String>,
}

impl<S: Scalar> AdapterRegistry<S> {
    pub fn new() -> Self {
        AdapterRegistry { sets: BTreeMap::new(), active: None }
    }

    pub fn register(&mut self, set: AdapterSet<S>) {
        self.sets.insert(set.id.clone(), set);
    }

    pub fn set_active(&mut self, id: Option<&str>) -> Result<(), AdapterError> {
        match id {
            Some(id) => {
                if !self.sets.contains_key(id) {
                    return Err(AdapterError::UnknownSet(id.to_string()));
                }
                self.active = Some(id.to_string());
            }
            None => self.active = None,
        }
        Ok(())
    }

    pub fn active_id(&self) -> Option<&str> {
        self.active.as_deref()
    }

    pub fn active_set(&self) -> Option<&AdapterSet<S>> {
        self.active.as_deref().and_then(|id| self.sets.get(id))
    }

    pub fn get(&self, id: &str) -> Option<&AdapterSet<S>> {
        self.sets.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut AdapterSet<S>> {
        self.sets.get_mut(id)
    }

    pub fn take(&mut self, id: &str) -> Option<AdapterSet<S>> {
        self.sets.remove(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.sets.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn config() -> ModelConfig {
        ModelConfig::tiny(64)
    }

    #[test]
    fn fresh_set_has_zero_delta() {
        let cfg = config();
        let set = init_adapter_set::<f32>("theta_d", &cfg, 4, 8.0, 7).unwrap();
        for (_, (a, b)) in &set.entries {
            assert!(b.data().iter().all(|&v| v == 0.0));
            assert!(a.data().iter().any(|&v| v != 0.0));
            // (alpha/r) * B * A is exactly the zero matrix.
            let mut ba = vec![0.0f32; cfg.d_model * cfg.d_model];
            matmul_into(b.data(), a.data(), &mut ba, cfg.d_model, 4, cfg.d_model);
            assert!(ba.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let cfg = config();
        let a = init_adapter_set::<f32>("theta_d", &cfg, 4, 8.0, 7).unwrap();
        let b = init_adapter_set::<f32>("theta_d", &cfg, 4, 8.0, 7).unwrap();
        for ((_, (a1, b1)), (_, (a2, b2))) in a.entries.iter().zip(b.entries.iter()) {
            assert_eq!(a1.data(), a2.data());
            assert_eq!(b1.data(), b2.data());
        }
        let c = init_adapter_set::<f32>("theta_d", &cfg, 4, 8.0, 8).unwrap();
        assert_ne!(
            a.entries.values().next().unwrap().0.data(),
            c.entries.values().next().unwrap().0.data()
        );
    }

    #[test]
    fn shapes_follow_rank() {
        let cfg = ModelConfig { d_model: 128, ..ModelConfig::tiny(64) };
        let set = init_adapter_set::<f32>("theta_r", &cfg, 8, 16.0, 1).unwrap();
        let (a, b) = set.entries.values().next().unwrap();
        assert_eq!(a.shape(), &[8, 128]);
        assert_eq!(b.shape(), &[128, 8]);
        assert!(init_adapter_set::<f32>("x", &cfg, 129, 16.0, 1).is_err());
    }

    #[test]
    fn zero_b_forward_is_bit_exact_base() {
        let cfg = config();
        let d = cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::<f32>::randn(vec![d, d], 0.1, &mut rng);
        let x = Tensor::<f32>::randn(vec![d, 3], 1.0, &mut rng);
        let set = init_adapter_set::<f32>("theta_d", &cfg, 4, 8.0, 7).unwrap();
        let entry = set.entries.values().next().unwrap();
        let with = effective_forward(&w, entry, set.alpha, set.rank, &x).unwrap();
        let mut base = vec![0.0f32; d * 3];
        matmul_into(w.data(), x.data(), &mut base, d, d, 3);
        assert_eq!(with.data(), &base[..]);
    }

    #[test]
    fn doubling_alpha_doubles_the_correction() {
        let cfg = config();
        let d = cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::<f64>::randn(vec![d, d], 0.1, &mut rng);
        let x = Tensor::<f64>::randn(vec![d, 2], 1.0, &mut rng);
        let mut set = init_adapter_set::<f64>("theta_d", &cfg, 4, 8.0, 11).unwrap();
        for (_, (_, b)) in set.entries.iter_mut() {
            for v in b.data_mut() {
                *v = rng.gen::<f64>() - 0.5;
            }
        }
        let entry = set.entries.values().next().unwrap();
        let mut base = vec![0.0f64; d * 2];
        matmul_into(w.data(), x.data(), &mut base, d, d, 2);
        let y1 = effective_forward(&w, entry, 8.0, set.rank, &x).unwrap();
        let y2 = effective_forward(&w, entry, 16.0, set.rank, &x).unwrap();
        for i in 0..d * 2 {
            let d1 = y1.data()[i] - base[i];
            let d2 = y2.data()[i] - base[i];
            assert!((d2 - 2.0 * d1).abs() < 1e-9, "{} vs {}", d1, d2);
        }
    }

    #[test]
    fn delta_matrix_has_rank_at_most_r() {
        // 6x6 base, rank 2: third singular value of (alpha/r)BA vanishes.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = Tensor::<f64>::randn(vec![2, 6], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![6, 2], 1.0, &mut rng);
        let mut ba = vec![0.0f64; 36];
        matmul_into(b.data(), a.data(), &mut ba, 6, 2, 6);
        for v in ba.iter_mut() {
            *v *= 8.0 / 2.0;
        }
        let sv = singular_values_6x6(&ba);
        assert!(sv[2] <= 1e-6 * sv[0], "singular values {:?}", sv);
    }

    /// Jacobi eigenvalue sweep on M = D^T D; test-only oracle for singular
    /// values of a small matrix.
    fn singular_values_6x6(d: &[f64]) -> Vec<f64> {
        let n = 6;
        let mut m = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += d[k * n + i] * d[k * n + j];
                }
                m[i * n + j] = acc;
            }
        }
        for _ in 0..64 {
            for p in 0..n - 1 {
                for q in p + 1..n {
                    let apq = m[p * n + q];
                    if apq.abs() < 1e-15 {
                        continue;
                    }
                    let app = m[p * n + p];
                    let aqq = m[q * n + q];
                    let theta = 0.5 * (2.0 * apq).atan2(aqq - app);
                    let (s, c) = theta.sin_cos();
                    for k in 0..n {
                        let mkp = m[k * n + p];
                        let mkq = m[k * n + q];
                        m[k * n + p] = c * mkp - s * mkq;
                        m[k * n + q] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[p * n + k];
                        let mqk = m[q * n + k];
                        m[p * n + k] = c * mpk - s * mqk;
                        m[q * n + k] = s * mpk + c * mqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i].max(0.0).sqrt()).collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        ev
    }

    #[test]
    fn registry_switching_is_pure_routing() {
        let cfg = config();
        let mut reg = AdapterRegistry::<f32>::new();
        reg.register(init_adapter_set("theta_d", &cfg, 4, 8.0, 1).unwrap());
        reg.register(init_adapter_set("theta_r", &cfg, 4, 8.0, 2).unwrap());
        let before: Vec<Vec<f32>> = reg
            .get("theta_r")
            .unwrap()
            .named_tensors()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        reg.set_active(Some("theta_d")).unwrap();
        assert_eq!(reg.active_id(), Some("theta_d"));
        reg.set_active(Some("theta_r")).unwrap();
        reg.set_active(None).unwrap();
        assert_eq!(reg.active_id(), None);
        let after: Vec<Vec<f32>> = reg
            .get("theta_r")
            .unwrap()
            .named_tensors()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        assert_eq!(before, after);
        assert!(matches!(
            reg.set_active(Some("theta_x")),
            Err(AdapterError::UnknownSet(_))
        ));
    }

    #[test]
    fn named_tensors_order_and_count() {
        let cfg = ModelConfig { n_layers: 2, ..config() };
        let set = init_adapter_set::<f32>("theta_d", &cfg, 4, 8.0, 1).unwrap();
        let names: Vec<String> = set.named_tensors().map(|(n, _)| n).collect();
        // Two targets per layer, A before B, target-name order.
        assert_eq!(names.len(), 2 * cfg.injection_targets.len());
        let names2: Vec<String> = set.named_tensors().map(|(n, _)| n).collect();
        assert_eq!(names, names2);
        for pair in names.chunks(2) {
            assert!(pair[0].ends_with("/A"));
            assert!(pair[1].ends_with("/B"));
            assert_eq!(pair[0].trim_end_matches("/A"), pair[1].trim_end_matches("/B"));
        }
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn distinct_sets_share_no_tensors() {
        let cfg = config();
        let d_set = init_adapter_set::<f32>("theta_d", &cfg, 4, 8.0, 1).unwrap();
        let r_set = init_adapter_set::<f32>("theta_r", &cfg, 4, 8.0, 1).unwrap();
        // Mutating one leaves the other bit-identical.
        let r_before: Vec<Vec<f32>> =
            r_set.named_tensors().map(|(_, t)| t.data().to_vec()).collect();
        let mut d_mut = d_set;
        for (_, t) in d_mut.named_tensors_mut() {
            for v in t.data_mut() {
                *v += 1.0;
            }
        }
        let r_after: Vec<Vec<f32>> =
            r_set.named_tensors().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(r_before, r_after);
    }
}
