//! Loss, gradient, per-example Jacobian, Hessian-vector and Hessian
//! evaluation for any [`Model`].

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::model::{Batch, Model};
use super::params::ParamVector;
use super::scalar::{Dual, Scalar};
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};

/// Largest parameter count for which a dense Hessian is formed.
pub const DEFAULT_HESSIAN_CAP: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub per_example: Vec<f64>,
    pub mean: f64,
}

fn check_inputs<M: Model>(model: &M, params: &[f64], batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let q = model.num_params();
    if params.len() != q {
        return Err(Error::config(format!(
            "parameter vector has length {}, model expects {q}",
            params.len()
        )));
    }
    Ok(())
}

fn check_layout<M: Model>(model: &M, params: &ParamVector) -> Result<()> {
    if !params.same_layout(&model.layout()) {
        return Err(Error::config("parameter layout does not match the model"));
    }
    Ok(())
}

fn record<M: Model, S: Scalar>(
    model: &M,
    params: Vec<S>,
    batch: &Batch,
) -> Result<(Tape<S>, NodeId, NodeId)> {
    let mut tape = Tape::new();
    let p = tape.variable(vec![params.len()], params)?;
    let losses = model.record_losses(&mut tape, p, batch)?;
    if tape.shape(losses) != [batch.len()] {
        return Err(Error::config(format!(
            "model produced losses of shape {:?} for a batch of {}",
            tape.shape(losses),
            batch.len()
        )));
    }
    if let Some(i) = tape.value(losses).iter().position(|l| !l.re().is_finite()) {
        return Err(Error::numeric("loss evaluation", Some(i)));
    }
    Ok((tape, p, losses))
}

/// Per-example losses and their mean.
pub fn forward<M: Model>(model: &M, params: &ParamVector, batch: &Batch) -> Result<Forward> {
    check_layout(model, params)?;
    forward_values(model, params.values(), batch)
}

pub(crate) fn forward_values<M: Model>(model: &M, params: &[f64], batch: &Batch) -> Result<Forward> {
    check_inputs(model, params, batch)?;
    let (tape, _, losses) = record(model, params.to_vec(), batch)?;
    let per_example = tape.value(losses).to_vec();
    let mean = per_example.iter().sum::<f64>() / per_example.len() as f64;
    Ok(Forward { per_example, mean })
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// `∇_θ Σ_i w_i ℓ(x_i, θ)`; `None` means uniform weights `1/n`.
pub fn grad<M: Model>(
    model: &M,
    params: &ParamVector,
    batch: &Batch,
    weights: Option<&[f64]>,
) -> Result<ParamVector> {
    check_layout(model, params)?;
    let g = grad_values(model, params.values(), batch, weights)?;
    ParamVector::from_values(params.layout().clone(), g)
}

pub(crate) fn grad_values<M: Model>(
    model: &M,
    params: &[f64],
    batch: &Batch,
    weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    check_inputs(model, params, batch)?;
    let w = match weights {
        Some(w) if w.len() != batch.len() => {
            return Err(Error::config(format!(
                "{} weights for a batch of {}",
                w.len(),
                batch.len()
            )))
        }
        Some(w) => {
            if let Some(i) = w.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric("example weights", Some(i)));
            }
            w.to_vec()
        }
        None => uniform(batch.len()),
    };
    let (tape, p, losses) = record(model, params.to_vec(), batch)?;
    let mut adj = tape.backward(losses, &w)?;
    let g = adj.take(p).unwrap_or_else(|| vec![0.0; params.len()]);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("gradient", None));
    }
    Ok(g)
}

/// Per-example gradients `∇_θ ℓ(x_i, θ)`, one row per example.
///
/// Each row is computed on its own single-example tape; rows run in
/// parallel and are collected in batch order.
pub fn per_example_grads<M: Model>(
    model: &M,
    params: &ParamVector,
    batch: &Batch,
) -> Result<Vec<ParamVector>> {
    check_layout(model, params)?;
    let rows = per_example_grad_rows(model, params.values(), batch)?;
    rows.into_iter()
        .map(|r| ParamVector::from_values(params.layout().clone(), r))
        .collect()
}

pub(crate) fn per_example_grad_rows<M: Model>(
    model: &M,
    params: &[f64],
    batch: &Batch,
) -> Result<Vec<Vec<f64>>> {
    check_inputs(model, params, batch)?;
    (0..batch.len())
        .into_par_iter()
        .map(|i| {
            grad_values(model, params, &batch.example(i), Some(&[1.0]))
                .map_err(|e| reindex(e, i))
        })
        .collect()
}

fn reindex(e: Error, i: usize) -> Error {
    match e {
        Error::Numeric { context, .. } => Error::Numeric {
            context,
            index: Some(i),
        },
        other => other,
    }
}

/// Same rows as [`per_example_grads`], obtained by replaying the reverse pass
/// of one full-batch tape with indicator seeds `e_i`.
pub fn per_example_grads_replay<M: Model>(
    model: &M,
    params: &ParamVector,
    batch: &Batch,
) -> Result<Vec<ParamVector>> {
    check_layout(model, params)?;
    check_inputs(model, params.values(), batch)?;
    let (tape, p, losses) = record(model, params.values().to_vec(), batch)?;
    let n = batch.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut seed = vec![0.0; n];
        seed[i] = 1.0;
        let mut adj = tape.backward(losses, &seed)?;
        let g = adj.take(p).unwrap_or_else(|| vec![0.0; params.len()]);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("per-example gradient", Some(i)));
        }
        out.push(ParamVector::from_values(params.layout().clone(), g)?);
    }
    Ok(out)
}

/// Hessian-vector product `∇²_θ(Σ_i w_i ℓ(x_i, θ)) · v`, exact to rounding.
pub fn hvp<M: Model>(
    model: &M,
    params: &[f64],
    batch: &Batch,
    weights: Option<&[f64]>,
    v: &[f64],
) -> Result<Vec<f64>> {
    check_inputs(model, params, batch)?;
    if v.len() != params.len() {
        return Err(Error::config("direction length does not match parameters"));
    }
    let w: Vec<Dual> = match weights {
        Some(w) => w.iter().map(|&x| Dual::from_f64(x)).collect(),
        None => uniform(batch.len()).into_iter().map(Dual::from_f64).collect(),
    };
    let seeded: Vec<Dual> = params
        .iter()
        .zip(v)
        .map(|(&x, &d)| Dual::new(x, d))
        .collect();
    let (tape, p, losses) = record(model, seeded, batch)?;
    let mut adj = tape.backward(losses, &w)?;
    let hv: Vec<f64> = adj
        .take(p)
        .map(|g| g.into_iter().map(|d| d.du).collect())
        .unwrap_or_else(|| vec![0.0; params.len()]);
    if hv.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("Hessian-vector product", None));
    }
    Ok(hv)
}

/// Dense Hessian of the mean batch loss. Oracle-scale only: refuses models
/// with more than `cap` parameters.
pub fn hessian<M: Model>(
    model: &M,
    params: &ParamVector,
    batch: &Batch,
    cap: usize,
) -> Result<DMatrix<f64>> {
    check_layout(model, params)?;
    let q = params.len();
    if q > cap {
        return Err(Error::config(format!(
            "dense Hessian refused: q = {q} exceeds the oracle-scale cap of {cap} parameters"
        )));
    }
    check_inputs(model, params.values(), batch)?;
    let cols: Vec<Vec<f64>> = (0..q)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; q];
            e[j] = 1.0;
            hvp(model, params.values(), batch, None, &e)
        })
        .collect::<Result<_>>()?;
    let mut h = DMatrix::from_fn(q, q, |i, j| cols[j][i]);
    // Forward-over-reverse is symmetric only up to rounding; average the halves.
    for i in 0..q {
        for j in 0..i {
            let s = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = s;
            h[(j, i)] = s;
        }
    }
    Ok(h)
}
