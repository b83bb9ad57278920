use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::{NumericsError, Result};

/// Builds a scalar loss on the tape from named parameter vars.
pub trait LossBuilder: Fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> Result<Var> {}
impl<F: Fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> Result<Var>> LossBuilder for F {}

/// Central finite-difference check of the tape's reverse-mode gradients.
///
/// Evaluates `build` once with gradients enabled to obtain analytic
/// derivatives, then perturbs every coordinate of every parameter by
/// `±eps` and compares. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check<F: LossBuilder>(
    params: &BTreeMap<String, Tensor<f64>>,
    eps: f64,
    build: F,
) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(NumericsError::InvalidArgument {
            op: "grad_check",
            detail: format!("eps must be in (0, 1e-2], got {}", eps),
        });
    }
    let analytic = analytic_grads(params, &build)?;
    let numeric = numeric_grads(params, eps, &build)?;
    let mut max_rel = 0.0f64;
    for (name, a) in &analytic {
        let n = &numeric[name];
        for (&av, &nv) in a.iter().zip(n) {
            max_rel = max_rel.max(rel_err(av, nv));
        }
    }
    Ok(max_rel)
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

/// Reverse-mode gradients of the built loss for every named parameter.
pub fn analytic_grads<F: LossBuilder>(
    params: &BTreeMap<String, Tensor<f64>>,
    build: &F,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (name, t) in params {
        vars.insert(name.clone(), tape.param(t)?);
    }
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, t) in params {
        let g = match tape.grad(vars[name]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.numel()],
        };
        out.insert(name.clone(), g);
    }
    Ok(out)
}

/// Central-difference gradients, one forward pair per coordinate. This is
/// the independent side of the check: it never touches the backward pass.
pub fn numeric_grads<F: LossBuilder>(
    params: &BTreeMap<String, Tensor<f64>>,
    eps: f64,
    build: &F,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let eval = |perturbed: &BTreeMap<String, Tensor<f64>>| -> Result<f64> {
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (name, t) in perturbed {
            vars.insert(name.clone(), tape.input(t)?);
        }
        let loss = build(&mut tape, &vars)?;
        let v = tape.scalar_of(loss);
        if !v.is_finite() {
            return Err(NumericsError::NonFinite { op: "grad_check(perturbed loss)" });
        }
        Ok(v)
    };

    let mut work: BTreeMap<String, Tensor<f64>> = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let n = params[&name].numel();
        let mut g = vec![0.0; n];
        for i in 0..n {
            let orig = work.get_mut(&name).unwrap().data_mut()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            g[i] = (plus - minus) / (2.0 * eps);
        }
        out.insert(name.clone(), g);
    }
    Ok(out)
}
