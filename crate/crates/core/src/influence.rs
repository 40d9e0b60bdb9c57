//! Meta-gradient example influence through a pseudo SGD step, and its
//! min-norm fusion across the old-task and new-task objectives.
//!
//! With per-example loss perturbations `ε`, the pseudo update is
//! `θ̂(ε) = θ − lr·Σ_j (1/n + ε_j)·∇ℓ(x_j, θ)`. The influence of example `j`
//! on a validation set `V` is `∂ℓ(V, θ̂)/∂ε_j` at `ε = 0`, which for one step
//! equals `−lr·⟨∇ℓ(x_j, θ), ∇ℓ(V, θ̂)⟩`. Positive values mean upweighting the
//! example raises the validation loss.

use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{dot, grad_values, hvp, per_example_grad_rows, Batch, Model, ParamVector};
use crate::data::{batch_of, Sample};
use crate::error::{Error, Result};
use crate::memory::csv_err;

/// Below this squared distance between the two influence vectors every
/// mixing weight gives the same norm.
pub const GAMMA_DEGENERATE_EPS: f64 = 1e-24;

fn check_iterations(iterations: usize) -> Result<()> {
    if iterations == 0 {
        return Err(Error::config("pseudo update needs at least one iteration"));
    }
    Ok(())
}

fn check_lr(lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::config(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    Ok(())
}

/// `iterations` plain SGD steps on the mean batch loss. The input is left
/// untouched.
pub fn pseudo_update<M: Model>(
    model: &M,
    params: &ParamVector,
    batch: &Batch,
    lr: f64,
    iterations: usize,
) -> Result<ParamVector> {
    check_iterations(iterations)?;
    check_lr(lr)?;
    let mut theta = params.clone();
    for _ in 0..iterations {
        let g = grad_values(model, theta.values(), batch, None)?;
        theta.axpy(-lr, &g);
    }
    Ok(theta)
}

/// Influence of every batch example on each validation set.
///
/// `grads` are the per-example gradients at `params`. Several pseudo
/// iterations are handled by reverse accumulation through the SGD steps,
/// carrying the adjoint `a_k = (I − lr·H_k)·a_{k+1}`.
pub(crate) fn meta_influence<M: Model>(
    model: &M,
    params: &[f64],
    batch: &Batch,
    grads: &[Vec<f64>],
    vals: &[&Batch],
    lr: f64,
    iterations: usize,
) -> Result<Vec<Vec<f64>>> {
    check_iterations(iterations)?;
    check_lr(lr)?;
    if vals.iter().any(|v| v.is_empty()) {
        return Err(Error::config("empty validation batch"));
    }
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    // Trajectory θ_0 .. θ_K and per-example gradients at θ_0 .. θ_{K-1}.
    let mut thetas = vec![params.to_vec()];
    let mut grad_rows: Vec<Vec<Vec<f64>>> = vec![grads.to_vec()];
    for k in 0..iterations {
        let mut next = thetas[k].clone();
        for g in &grad_rows[k] {
            for (t, gi) in next.iter_mut().zip(g) {
                *t -= lr * inv_n * gi;
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("pseudo update", None));
        }
        thetas.push(next);
        if k + 1 < iterations {
            grad_rows.push(per_example_grad_rows(model, &thetas[k + 1], batch)?);
        }
    }
    let mut out = Vec::with_capacity(vals.len());
    for v in vals {
        let mut a = grad_values(model, &thetas[iterations], v, None)?;
        let mut infl = vec![0.0; n];
        for k in (0..iterations).rev() {
            for (j, g) in grad_rows[k].iter().enumerate() {
                infl[j] += -lr * dot(g, &a);
            }
            if k > 0 {
                let ha = hvp(model, &thetas[k], batch, None, &a)?;
                for (ai, hi) in a.iter_mut().zip(&ha) {
                    *ai -= lr * hi;
                }
            }
        }
        if let Some(j) = infl.iter().position(|x| !x.is_finite()) {
            return Err(Error::numeric("influence", Some(j)));
        }
        out.push(infl);
    }
    Ok(out)
}

/// Influence of each batch example on one validation set.
pub fn influence_on<M: Model>(
    model: &M,
    params: &ParamVector,
    batch: &Batch,
    val: &Batch,
    lr: f64,
    iterations: usize,
) -> Result<Vec<f64>> {
    let grads = per_example_grad_rows(model, params.values(), batch)?;
    let mut v = meta_influence(model, params.values(), batch, &grads, &[val], lr, iterations)?;
    Ok(v.remove(0))
}

/// `(i_s, i_p)`: influence on the old-task and new-task validation losses
/// through a single pseudo step.
pub fn influence_vectors<M: Model>(
    model: &M,
    params: &ParamVector,
    batch: &Batch,
    v_old: &Batch,
    v_new: &Batch,
    lr: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    influence_vectors_multi(model, params, batch, v_old, v_new, lr, 1)
}

/// [`influence_vectors`] through `iterations` pseudo steps.
pub fn influence_vectors_multi<M: Model>(
    model: &M,
    params: &ParamVector,
    batch: &Batch,
    v_old: &Batch,
    v_new: &Batch,
    lr: f64,
    iterations: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let grads = per_example_grad_rows(model, params.values(), batch)?;
    let mut v = meta_influence(model, params.values(), batch, &grads, &[v_old, v_new], lr, iterations)?;
    let i_p = v.pop().expect("two validation sets");
    let i_s = v.pop().expect("two validation sets");
    Ok((i_s, i_p))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParetoGamma {
    pub gamma: f64,
    /// The two vectors coincide (or are both zero), so any weight is optimal.
    pub degenerate: bool,
}

/// Min-norm weight on `i_s` for the convex combination of `i_s` and `i_p`.
pub fn pareto_gamma(i_s: &[f64], i_p: &[f64]) -> Result<ParetoGamma> {
    if i_s.len() != i_p.len() {
        return Err(Error::config(format!(
            "influence vectors differ in length: {} vs {}",
            i_s.len(),
            i_p.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (s, p) in i_s.iter().zip(i_p) {
        let d = p - s;
        num += d * p;
        den += d * d;
    }
    if !num.is_finite() || !den.is_finite() {
        return Err(Error::numeric("pareto gamma", None));
    }
    if den < GAMMA_DEGENERATE_EPS {
        return Ok(ParetoGamma {
            gamma: 0.5,
            degenerate: true,
        });
    }
    Ok(ParetoGamma {
        gamma: (num / den).clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// `γ·i_s + (1 − γ)·i_p`, elementwise.
pub fn fuse(i_s: &[f64], i_p: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!("gamma {gamma} outside [0, 1]")));
    }
    if i_s.len() != i_p.len() {
        return Err(Error::config("influence vectors differ in length"));
    }
    Ok(i_s
        .iter()
        .zip(i_p)
        .map(|(s, p)| gamma * s + (1.0 - gamma) * p)
        .collect())
}

/// One step's influences for the combined batch.
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceRecord {
    pub i_s: Vec<f64>,
    pub i_p: Vec<f64>,
    pub i_fused: Vec<f64>,
    pub gamma_star: f64,
    pub gamma_degenerate: bool,
    pub batch_example_ids: Vec<usize>,
    pub batch_task_ids: Vec<usize>,
}

impl InfluenceRecord {
    pub fn new(
        i_s: Vec<f64>,
        i_p: Vec<f64>,
        batch_example_ids: Vec<usize>,
        batch_task_ids: Vec<usize>,
    ) -> Result<Self> {
        let n = i_s.len();
        if i_p.len() != n || batch_example_ids.len() != n || batch_task_ids.len() != n {
            return Err(Error::config("influence record columns differ in length"));
        }
        let g = pareto_gamma(&i_s, &i_p)?;
        let i_fused = fuse(&i_s, &i_p, g.gamma)?;
        Ok(InfluenceRecord {
            i_s,
            i_p,
            i_fused,
            gamma_star: g.gamma,
            gamma_degenerate: g.degenerate,
            batch_example_ids,
            batch_task_ids,
        })
    }
}

/// Per-step influence CSV:
/// `step,current_task,example_id,task_id,i_s,i_p,i_fused,gamma_star`.
pub struct InfluenceLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> InfluenceLog<W> {
    pub const HEADER: [&'static str; 8] = [
        "step",
        "current_task",
        "example_id",
        "task_id",
        "i_s",
        "i_p",
        "i_fused",
        "gamma_star",
    ];

    pub fn new(out: W) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(Self::HEADER).map_err(csv_err)?;
        Ok(InfluenceLog { writer })
    }

    pub fn write(&mut self, step: usize, current_task: usize, rec: &InfluenceRecord) -> Result<()> {
        for j in 0..rec.i_s.len() {
            self.writer
                .write_record([
                    step.to_string(),
                    current_task.to_string(),
                    rec.batch_example_ids[j].to_string(),
                    rec.batch_task_ids[j].to_string(),
                    rec.i_s[j].to_string(),
                    rec.i_p[j].to_string(),
                    rec.i_fused[j].to_string(),
                    rec.gamma_star.to_string(),
                ])
                .map_err(csv_err)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.writer
            .flush()
            .map_err(|e| Error::io("influence log", e))?;
        self.writer
            .into_inner()
            .map_err(|e| Error::io("influence log", std::io::Error::other(e.to_string())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationBatches {
    /// Absent before any old task exists.
    pub v_old: Option<Batch>,
    pub v_new: Batch,
}

/// A `fraction` snapshot of `items`, at least one element when non-empty,
/// drawn without replacement and kept in source order.
pub fn snapshot_pool<T: Clone>(items: &[T], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    if items.is_empty() {
        return Vec::new();
    }
    let k = ((items.len() as f64 * fraction).ceil() as usize).clamp(1, items.len());
    let mut idx = index::sample(rng, items.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

/// Uniform draw without replacement of `min(size, |pool|)` items, in draw
/// order.
pub fn draw<'a, T>(pool: &'a [T], size: usize, rng: &mut ChaCha8Rng) -> Vec<&'a T> {
    let k = size.min(pool.len());
    index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| &pool[i])
        .collect()
}

/// Validation mini-batches from the memory pool and the seen new-task pool.
pub fn sample_validation(
    memory_pool: &[Sample],
    seen_pool: &[Sample],
    sizes: (usize, usize),
    seed: u64,
) -> Result<ValidationBatches> {
    if seen_pool.is_empty() {
        return Err(Error::config("empty new-task validation pool"));
    }
    if sizes.0 == 0 || sizes.1 == 0 {
        return Err(Error::config("validation batch sizes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v_old = if memory_pool.is_empty() {
        None
    } else {
        Some(batch_of(draw(memory_pool, sizes.0, &mut rng))?)
    };
    let v_new = batch_of(draw(seen_pool, sizes.1, &mut rng))?;
    Ok(ValidationBatches { v_old, v_new })
}
