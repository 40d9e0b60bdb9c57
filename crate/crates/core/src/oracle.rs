//! Reference influence computations for small models: the damped
//! inverse-Hessian influence function and leave-one-out retraining.
//!
//! Sign conventions: an influence value `I_j > 0` means upweighting example
//! `j` raises the validation loss. A leave-one-out delta
//! `ℓ(val, θ without j) − ℓ(val, θ)` is positive when the example helped,
//! so `I_j` and the delta have opposite signs ([`bridge_loo`]).

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::autodiff::{dot, forward_values, grad_values, hessian, per_example_grad_rows, Batch, Model, ParamVector, DEFAULT_HESSIAN_CAP};
use crate::error::{Error, Result};
use crate::memory::csv_err;

/// Damping values tried in order until the damped Hessian factorizes.
pub const DAMPING_LADDER: [f64; 8] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2];
pub const DAMPING_CAP: f64 = 1e-1;
pub const DEFAULT_ZERO_BAND: f64 = 1e-12;

const LEVENBERG_SHIFTS: [f64; 9] = [0.0, 1e-8, 1e-6, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0];

#[derive(Clone, Debug, PartialEq)]
pub struct IFResult {
    pub influence: Vec<f64>,
    /// Condition estimate `(max L_ii / min L_ii)²` from the Cholesky factor.
    pub hessian_condition: f64,
    pub damping_used: f64,
}

fn ladder_from(base: f64) -> Vec<f64> {
    let mut rungs = vec![base];
    rungs.extend(
        DAMPING_LADDER
            .iter()
            .chain(std::iter::once(&DAMPING_CAP))
            .copied()
            .filter(|&d| d > base),
    );
    rungs
}

/// `I_j = −∇ℓ(val, θ)ᵀ (H + λI)⁻¹ ∇ℓ(x_j, θ)` with `H` the Hessian of the
/// mean training loss.
///
/// `damping` is the first rung tried; it is raised along the ladder
/// `1e-8, 1e-7, …, 1e-1` until the damped Hessian is positive definite.
/// A model trained with an L2 penalty `λ/2·‖θ‖²` passes `λ` here, making
/// `H + λI` the Hessian of its regularized objective.
pub fn exact_influence<M: Model>(
    model: &M,
    params: &ParamVector,
    train_batch: &Batch,
    val_batch: &Batch,
    damping: f64,
) -> Result<IFResult> {
    if !damping.is_finite() || damping < 0.0 {
        return Err(Error::config(format!("damping must be finite and >= 0, got {damping}")));
    }
    if val_batch.is_empty() {
        return Err(Error::config("empty validation batch"));
    }
    let h = hessian(model, params, train_batch, DEFAULT_HESSIAN_CAP)?;
    let g_val = DVector::from_vec(grad_values(model, params.values(), val_batch, None)?);
    let rows = per_example_grad_rows(model, params.values(), train_batch)?;
    let q = h.nrows();
    for lambda in ladder_from(damping) {
        let damped = &h + DMatrix::<f64>::identity(q, q) * lambda;
        let Some(chol) = damped.cholesky() else {
            continue;
        };
        let l = chol.l_dirty();
        let (lo, hi) = (0..q).fold((f64::INFINITY, 0.0f64), |(lo, hi), i| {
            let d = l[(i, i)].abs();
            (lo.min(d), hi.max(d))
        });
        let s = chol.solve(&g_val);
        let influence: Vec<f64> = rows.iter().map(|g| -dot(g, s.as_slice())).collect();
        if let Some(j) = influence.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric("exact influence", Some(j)));
        }
        return Ok(IFResult {
            influence,
            hessian_condition: (hi / lo).powi(2),
            damping_used: lambda,
        });
    }
    Err(Error::Oracle(format!(
        "Hessian is not positive definite even with damping {DAMPING_CAP}"
    )))
}

/// Full-batch gradient descent on `mean ℓ + λ/2·‖θ‖²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub lr: f64,
    pub l2: f64,
    /// Stop once the objective gradient norm is at most this.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lr: 0.5,
            l2: 0.0,
            tol: 1e-8,
            max_iters: 200_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fit {
    pub params: ParamVector,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Objective gradient; `weight` overrides the uniform `1/n` example weight.
fn objective_grad<M: Model>(model: &M, theta: &[f64], batch: &Batch, l2: f64, weight: Option<f64>) -> Result<Vec<f64>> {
    let mut g = if batch.is_empty() {
        vec![0.0; theta.len()]
    } else {
        match weight {
            Some(w) => grad_values(model, theta, batch, Some(&vec![w; batch.len()]))?,
            None => grad_values(model, theta, batch, None)?,
        }
    };
    for (gi, t) in g.iter_mut().zip(theta) {
        *gi += l2 * t;
    }
    Ok(g)
}

/// Deterministic full-batch descent from `init`. An empty batch leaves only
/// the penalty term.
pub fn fit_full_batch<M: Model>(model: &M, init: &ParamVector, batch: &Batch, cfg: &FitConfig) -> Result<Fit> {
    fit_weighted(model, init, batch, None, cfg)
}

fn fit_weighted<M: Model>(
    model: &M,
    init: &ParamVector,
    batch: &Batch,
    weight: Option<f64>,
    cfg: &FitConfig,
) -> Result<Fit> {
    let mut theta = init.clone();
    for it in 0..=cfg.max_iters {
        let g = objective_grad(model, theta.values(), batch, cfg.l2, weight)?;
        let norm = dot(&g, &g).sqrt();
        if !norm.is_finite() {
            return Err(Error::numeric("full-batch training", None));
        }
        if norm <= cfg.tol {
            return Ok(Fit {
                params: theta,
                grad_norm: norm,
                iterations: it,
            });
        }
        if it < cfg.max_iters {
            theta.axpy(-cfg.lr, &g);
        }
    }
    Err(Error::Oracle(format!(
        "training did not reach gradient norm {} within {} iterations",
        cfg.tol, cfg.max_iters
    )))
}

/// Damped Newton steps with backtracking on `mean ℓ + λ/2·‖θ‖²`, for
/// polishing an approximate minimizer. An indefinite Hessian is shifted
/// towards the identity until it factorizes.
pub fn refine_newton<M: Model>(
    model: &M,
    params: &ParamVector,
    batch: &Batch,
    l2: f64,
    tol: f64,
    max_steps: usize,
) -> Result<Fit> {
    let objective = |theta: &[f64]| -> Result<f64> {
        let f = forward_values(model, theta, batch)?;
        Ok(f.mean + 0.5 * l2 * dot(theta, theta))
    };
    let mut theta = params.clone();
    let mut f0 = objective(theta.values())?;
    for step in 0..=max_steps {
        let g = objective_grad(model, theta.values(), batch, l2, None)?;
        let norm = dot(&g, &g).sqrt();
        if norm <= tol {
            return Ok(Fit {
                params: theta,
                grad_norm: norm,
                iterations: step,
            });
        }
        if step == max_steps {
            break;
        }
        let q = theta.len();
        let h = hessian(model, &theta, batch, DEFAULT_HESSIAN_CAP)? + DMatrix::<f64>::identity(q, q) * l2;
        let gv = DVector::from_vec(g.clone());
        // Levenberg shift until the system is positive definite.
        let dir: Vec<f64> = LEVENBERG_SHIFTS
            .iter()
            .find_map(|&mu| (&h + DMatrix::<f64>::identity(q, q) * mu).cholesky())
            .map(|c| c.solve(&gv).iter().map(|v| -v).collect())
            .unwrap_or_else(|| g.iter().map(|v| -v).collect());
        let slope = dot(&g, &dir);
        let mut t = 1.0;
        loop {
            let mut trial = theta.clone();
            trial.axpy(t, &dir);
            let f1 = objective(trial.values())?;
            // Close to the minimum objective changes drop below rounding;
            // a smaller gradient norm then decides.
            let accept = f1 <= f0 + 1e-4 * t * slope || {
                let g1 = objective_grad(model, trial.values(), batch, l2, None)?;
                dot(&g1, &g1).sqrt() < norm && f1 <= f0 + 1e-12 * f0.abs().max(1.0)
            };
            if accept || t < 1e-10 {
                theta = trial;
                f0 = f1;
                break;
            }
            t *= 0.5;
        }
    }
    Err(Error::Oracle(format!(
        "Newton refinement did not reach gradient norm {tol} within {max_steps} steps"
    )))
}

fn without(batch: &Batch, j: usize) -> Result<Batch> {
    let idx: Vec<usize> = (0..batch.len()).filter(|&i| i != j).collect();
    batch.select(&idx)
}

/// Retrains on everything but example `j`. The remaining examples keep
/// their weight `1/n`, so the penalty's strength relative to the data term
/// is the same as in the full fit.
fn fit_without<M: Model>(model: &M, init: &ParamVector, train_set: &Batch, j: usize, cfg: &FitConfig) -> Result<Fit> {
    let weight = 1.0 / train_set.len() as f64;
    fit_weighted(model, init, &without(train_set, j)?, Some(weight), cfg)
}

/// `ℓ(val, θ trained without x_j) − ℓ(val, θ trained on everything)`, both
/// fits starting from `init`. The reduced fit minimizes
/// `(1/n)·Σ_{i≠j} ℓ_i + λ/2·‖θ‖²`.
pub fn loo_influence<M: Model>(
    model: &M,
    train_set: &Batch,
    j: usize,
    val_batch: &Batch,
    init: &ParamVector,
    cfg: &FitConfig,
) -> Result<f64> {
    if j >= train_set.len() {
        return Err(Error::config(format!("example {j} outside a training set of {}", train_set.len())));
    }
    let full = fit_full_batch(model, init, train_set, cfg)?;
    let base = forward_values(model, full.params.values(), val_batch)?.mean;
    let reduced = fit_without(model, init, train_set, j, cfg)?;
    Ok(forward_values(model, reduced.params.values(), val_batch)?.mean - base)
}

/// [`loo_influence`] for every example, sharing the full fit. Retrainings
/// run in parallel and are collected in example order.
pub fn loo_deltas<M: Model>(
    model: &M,
    train_set: &Batch,
    val_batch: &Batch,
    init: &ParamVector,
    cfg: &FitConfig,
) -> Result<Vec<f64>> {
    let full = fit_full_batch(model, init, train_set, cfg)?;
    let base = forward_values(model, full.params.values(), val_batch)?.mean;
    (0..train_set.len())
        .into_par_iter()
        .map(|j| {
            let reduced = fit_without(model, init, train_set, j, cfg)?;
            Ok(forward_values(model, reduced.params.values(), val_batch)?.mean - base)
        })
        .collect()
}

/// Maps leave-one-out deltas onto the influence sign convention.
pub fn bridge_loo(deltas: &[f64]) -> Vec<f64> {
    deltas.iter().map(|d| -d).collect()
}

/// Confusion counts of predicted signs against reference signs. Positive
/// means harmful (`I > 0`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SignAgreement {
    pub true_positive: usize,
    pub true_negative: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    /// Reference values within the zero band, left out of the counts.
    pub excluded: usize,
}

impl SignAgreement {
    pub fn counted(&self) -> usize {
        self.true_positive + self.true_negative + self.false_positive + self.false_negative
    }

    /// `(TP + TN) / counted`; `None` when nothing was counted.
    pub fn rate(&self) -> Option<f64> {
        let n = self.counted();
        (n > 0).then(|| (self.true_positive + self.true_negative) as f64 / n as f64)
    }
}

pub fn sign_agreement(meta_influence: &[f64], exact_influence: &[f64], zero_band: f64) -> Result<SignAgreement> {
    if meta_influence.len() != exact_influence.len() {
        return Err(Error::config("influence vectors differ in length"));
    }
    let mut s = SignAgreement::default();
    for (&m, &e) in meta_influence.iter().zip(exact_influence) {
        if e.abs() <= zero_band {
            s.excluded += 1;
            continue;
        }
        match (m > 0.0, e > 0.0) {
            (true, true) => s.true_positive += 1,
            (false, false) => s.true_negative += 1,
            (true, false) => s.false_positive += 1,
            (false, true) => s.false_negative += 1,
        }
    }
    Ok(s)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::config("spearman needs two equal-length series of at least 2"));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::numeric("spearman of a constant series", None));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// One row of the oracle comparison report.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub example_id: usize,
    pub meta_influence: f64,
    pub exact_influence: f64,
    pub loo_delta: Option<f64>,
}

/// CSV with header `example_id,meta_influence,exact_influence,loo_delta,agree`.
/// `loo_delta` is empty when not computed; `agree` compares the signs of
/// the meta and exact influences and is empty inside the zero band.
pub fn write_oracle_report<W: Write>(out: W, rows: &[OracleRow], zero_band: f64) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["example_id", "meta_influence", "exact_influence", "loo_delta", "agree"])
        .map_err(csv_err)?;
    for r in rows {
        let agree = if r.exact_influence.abs() <= zero_band {
            String::new()
        } else {
            ((r.meta_influence > 0.0) == (r.exact_influence > 0.0)).to_string()
        };
        w.write_record([
            r.example_id.to_string(),
            r.meta_influence.to_string(),
            r.exact_influence.to_string(),
            r.loo_delta.map(|d| d.to_string()).unwrap_or_default(),
            agree,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("oracle report", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, Mlp, ModelSpec, ScalarQuadratic};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_batch(xs: &[f64]) -> Batch {
        Batch::from_pairs(xs.iter().map(|x| (std::slice::from_ref(x), 0))).unwrap()
    }

    #[test]
    fn quadratic_closed_form() {
        let m = ScalarQuadratic::default();
        let xs = [0.5, -1.0, 2.5, 0.0];
        let theta = xs.iter().sum::<f64>() / 4.0;
        let p = ParamVector::from_values(m.layout(), vec![theta]).unwrap();
        let xv = 1.7;
        let r = exact_influence(&m, &p, &scalar_batch(&xs), &scalar_batch(&[xv]), 0.0).unwrap();
        assert_eq!(r.damping_used, 0.0);
        for (i, x) in xs.iter().enumerate() {
            let expect = -(theta - xv) * (theta - x);
            assert!((r.influence[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn self_influence_is_negative() {
        let m = Mlp::new(ModelSpec {
            input_dim: 2,
            hidden_dims: vec![],
            num_classes_total: 2,
            activation: Activation::Tanh,
        })
        .unwrap();
        let train = Batch::from_pairs([
            (&[1.0, 0.2][..], 0),
            (&[-0.5, 1.0][..], 1),
            (&[0.3, -0.7][..], 0),
            (&[-1.2, -0.1][..], 1),
        ])
        .unwrap();
        let fit = fit_full_batch(
            &m,
            &ParamVector::zeros(m.layout()),
            &train,
            &FitConfig { l2: 0.1, ..FitConfig::default() },
        )
        .unwrap();
        for j in 0..4 {
            let r = exact_influence(&m, &fit.params, &train, &train.example(j), 0.1).unwrap();
            assert!(r.influence[j] < 0.0);
        }
    }

    #[test]
    fn damping_escalates_on_indefinite_hessian() {
        // Linear loss has a zero Hessian: the first positive rung is taken.
        let m = crate::models::ScalarLinear::default();
        let p = ParamVector::from_values(m.layout(), vec![0.0]).unwrap();
        let r = exact_influence(&m, &p, &scalar_batch(&[1.0]), &scalar_batch(&[1.0]), 0.0).unwrap();
        assert_eq!(r.damping_used, 1e-8);
        assert!((r.influence[0] + 1e8).abs() < 1e-3);
    }

    #[test]
    fn oversized_model_is_refused() {
        let m = Mlp::new(ModelSpec {
            input_dim: 64,
            hidden_dims: vec![40],
            num_classes_total: 10,
            activation: Activation::Relu,
        })
        .unwrap();
        let p = m.init(&mut ChaCha8Rng::seed_from_u64(0));
        let b = Batch::from_pairs([(&[0.0; 64][..], 0)]).unwrap();
        let e = exact_influence(&m, &p, &b, &b, 0.0).unwrap_err();
        assert!(e.to_string().contains("oracle-scale"), "{e}");
    }

    #[test]
    fn single_example_loo_returns_to_init() {
        let m = ScalarQuadratic::default();
        let init = ParamVector::from_values(m.layout(), vec![-1.0]).unwrap();
        let (x, xv) = (2.0, 0.5);
        let d = loo_influence(&m, &scalar_batch(&[x]), 0, &scalar_batch(&[xv]), &init, &FitConfig::default()).unwrap();
        let expect = 0.5 * (-1.0 - xv) * (-1.0 - xv) - 0.5 * (x - xv) * (x - xv);
        assert!((d - expect).abs() < 1e-8);
    }

    #[test]
    fn duplicates_are_redundant() {
        // Mean of {a, a, b, c}: removing one copy of a moves θ less than
        // removing a unique point at the same distance from the mean.
        let m = ScalarQuadratic::default();
        let init = ParamVector::from_values(m.layout(), vec![0.0]).unwrap();
        let train = scalar_batch(&[1.0, 1.0, -1.0, -1.0, 3.0]);
        let val = scalar_batch(&[4.0]);
        let deltas = loo_deltas(&m, &train, &val, &init, &FitConfig::default()).unwrap();
        let dup = scalar_batch(&[1.0, 1.0, -1.0, 3.0]);
        let dup_deltas = loo_deltas(&m, &dup, &val, &init, &FitConfig::default()).unwrap();
        assert!(deltas[2].abs() < dup_deltas[2].abs());
    }

    #[test]
    fn loo_nonconvergence_is_an_oracle_error() {
        let m = ScalarQuadratic::default();
        let init = ParamVector::from_values(m.layout(), vec![0.0]).unwrap();
        let cfg = FitConfig { max_iters: 3, lr: 0.01, ..FitConfig::default() };
        let e = loo_influence(&m, &scalar_batch(&[5.0, 1.0]), 0, &scalar_batch(&[0.0]), &init, &cfg);
        assert!(matches!(e, Err(Error::Oracle(_))));
    }

    #[test]
    fn sign_agreement_cases() {
        let e = [1.0, -2.0, 0.5, -0.1, 0.0];
        let s = sign_agreement(&e, &e, DEFAULT_ZERO_BAND).unwrap();
        assert_eq!((s.false_positive, s.false_negative, s.excluded), (0, 0, 1));
        let neg: Vec<f64> = e.iter().map(|v| -v).collect();
        let s = sign_agreement(&neg, &e, DEFAULT_ZERO_BAND).unwrap();
        assert_eq!((s.true_positive, s.true_negative), (0, 0));
        assert_eq!(s.counted(), 4);
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn report_layout() {
        let rows = [
            OracleRow { example_id: 3, meta_influence: -0.5, exact_influence: -2.0, loo_delta: Some(0.25) },
            OracleRow { example_id: 4, meta_influence: 0.5, exact_influence: 0.0, loo_delta: None },
        ];
        let mut buf = Vec::new();
        write_oracle_report(&mut buf, &rows, DEFAULT_ZERO_BAND).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "example_id,meta_influence,exact_influence,loo_delta,agree\n3,-0.5,-2,0.25,true\n4,0.5,0,,\n"
        );
    }

    proptest! {
        #[test]
        fn counts_cover_everything_outside_the_band(
            pairs in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 0..40),
            band in 0.0..0.5f64,
        ) {
            let (m, e): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let s = sign_agreement(&m, &e, band).unwrap();
            prop_assert_eq!(s.counted() + s.excluded, m.len());
        }

        #[test]
        fn permutation_and_val_scaling(shift in 0usize..5, xv in -2.0..2.0f64) {
            let m = ScalarQuadratic::default();
            let xs = [0.3, -1.1, 2.0, 0.7, -0.4];
            let theta = xs.iter().sum::<f64>() / 5.0;
            let p = ParamVector::from_values(m.layout(), vec![theta]).unwrap();
            let base = exact_influence(&m, &p, &scalar_batch(&xs), &scalar_batch(&[xv]), 0.0).unwrap();
            let mut rot = xs;
            rot.rotate_left(shift);
            let r = exact_influence(&m, &p, &scalar_batch(&rot), &scalar_batch(&[xv]), 0.0).unwrap();
            for i in 0..5 {
                prop_assert!((r.influence[i] - base.influence[(i + shift) % 5]).abs() < 1e-12);
            }
            // Linear in the validation gradient: a two-point mean averages the two.
            let other = exact_influence(&m, &p, &scalar_batch(&xs), &scalar_batch(&[-xv]), 0.0).unwrap();
            let both = exact_influence(&m, &p, &scalar_batch(&xs), &scalar_batch(&[xv, -xv]), 0.0).unwrap();
            for i in 0..5 {
                let avg = 0.5 * (base.influence[i] + other.influence[i]);
                prop_assert!((both.influence[i] - avg).abs() < 1e-12);
            }
        }
    }
}
