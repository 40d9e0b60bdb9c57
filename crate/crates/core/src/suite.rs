//! Reference-check suites shared by the command line and the test targets:
//! finite-difference checks of gradients, Hessian-vector products and
//! meta-gradient influence; sign agreement of meta influence against the
//! exact influence function on digits; and exact influence against
//! leave-one-out retraining on logistic regression.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{dot, forward_values, grad_values, hvp, Batch, Model, ParamVector, Tensor};
use crate::data::load_digits_csv;
use crate::error::{Error, Result};
use crate::influence::influence_vectors;
use crate::models::{Activation, Mlp, ModelSpec};
use crate::oracle::{
    bridge_loo, exact_influence, fit_full_batch, loo_deltas, refine_newton, sign_agreement, spearman, FitConfig,
    OracleRow, SignAgreement, DEFAULT_ZERO_BAND,
};

/// Agreement of an analytic value with a finite-difference estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdStats {
    pub checked: usize,
    pub failed: usize,
    /// Largest relative error among values above the absolute floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl FdStats {
    fn add(&mut self, analytic: f64, numeric: f64, rel_tol: f64, abs_floor: f64) {
        let abs = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if abs > abs_floor {
            let rel = abs / scale;
            self.max_rel_err = self.max_rel_err.max(rel);
            if rel > rel_tol {
                self.failed += 1;
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failed == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    /// Old and new halves of the training batch.
    pub batch: (usize, usize),
    pub val: (usize, usize),
    pub max_params: usize,
    pub influence_rel_tol: f64,
    pub influence_abs_floor: f64,
    pub grad_rel_tol: f64,
    pub grad_abs_floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 20,
            seed: 0,
            batch: (8, 8),
            val: (8, 8),
            max_params: 500,
            influence_rel_tol: 1e-5,
            influence_abs_floor: 1e-10,
            grad_rel_tol: 1e-6,
            grad_abs_floor: 1e-9,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub gradient: FdStats,
    pub hvp: FdStats,
    pub influence: FdStats,
    pub instances: usize,
    pub largest_model: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.gradient.passed() && self.hvp.passed() && self.influence.passed()
    }
}

/// Central difference with one Richardson step, `O(h⁴)`.
fn richardson<F: FnMut(f64) -> Result<f64>>(mut f: F, h: f64) -> Result<f64> {
    let d = |f: &mut F, h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    let coarse = d(&mut f, h)?;
    let fine = d(&mut f, h / 2.0)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

fn gaussian_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Result<Batch> {
    let data: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(Tensor::new(vec![n, dim], data)?, labels)
}

fn random_instance(rng: &mut ChaCha8Rng, i: usize, max_params: usize) -> Result<Mlp> {
    loop {
        let spec = ModelSpec {
            input_dim: rng.random_range(2..=6),
            hidden_dims: vec![rng.random_range(3..=12)],
            num_classes_total: rng.random_range(2..=4),
            activation: if i % 2 == 0 { Activation::Tanh } else { Activation::Relu },
        };
        if spec.num_params() <= max_params {
            return Mlp::new(spec);
        }
    }
}

/// `θ̂(ε) = θ − lr·∇_θ Σ_i (1/n + ε·[i = j]) ℓ(x_i, θ)`, from the weighted
/// full-batch gradient.
fn perturbed_step<M: Model>(model: &M, theta: &[f64], batch: &Batch, j: usize, eps: f64, lr: f64) -> Result<Vec<f64>> {
    let n = batch.len();
    let mut w = vec![1.0 / n as f64; n];
    w[j] += eps;
    let g = grad_values(model, theta, batch, Some(&w))?;
    Ok(theta.iter().zip(&g).map(|(t, gi)| t - lr * gi).collect())
}

/// Finite-difference checks on `config.instances` random MLPs.
pub fn gradcheck_suite(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradcheckReport {
        instances: config.instances,
        ..Default::default()
    };
    for i in 0..config.instances {
        let model = random_instance(&mut rng, i, config.max_params)?;
        let spec = model.spec().clone();
        report.largest_model = report.largest_model.max(spec.num_params());
        let (d, c) = (spec.input_dim, spec.num_classes_total);
        let params = model.init(&mut rng);
        let theta = params.values().to_vec();
        let batch = gaussian_batch(&mut rng, config.batch.0, d, c)?.concat(&gaussian_batch(&mut rng, config.batch.1, d, c)?)?;
        let v_old = gaussian_batch(&mut rng, config.val.0, d, c)?;
        let v_new = gaussian_batch(&mut rng, config.val.1, d, c)?;
        let lr = rng.random_range(0.05..0.5);

        // Gradient of the mean loss against forward differences of the loss.
        let g = grad_values(&model, &theta, &batch, None)?;
        for k in 0..theta.len() {
            let fd = richardson(
                |h| {
                    let mut t = theta.clone();
                    t[k] += h;
                    Ok(forward_values(&model, &t, &batch)?.mean)
                },
                1e-4,
            )?;
            report.gradient.add(g[k], fd, config.grad_rel_tol, config.grad_abs_floor);
        }

        // Hessian-vector product against differences of the gradient.
        let v: Vec<f64> = (0..theta.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let hv = hvp(&model, &theta, &batch, None, &v)?;
        let h = 1e-4;
        let shifted = |s: f64| -> Result<Vec<f64>> {
            let t: Vec<f64> = theta.iter().zip(&v).map(|(a, b)| a + s * b).collect();
            grad_values(&model, &t, &batch, None)
        };
        let (p1, m1, p2, m2) = (shifted(h)?, shifted(-h)?, shifted(h / 2.0)?, shifted(-h / 2.0)?);
        for k in 0..theta.len() {
            let coarse = (p1[k] - m1[k]) / (2.0 * h);
            let fine = (p2[k] - m2[k]) / h;
            report.hvp.add(hv[k], (4.0 * fine - coarse) / 3.0, config.grad_rel_tol, config.grad_abs_floor);
        }

        // Meta-gradient influence against differences of the validation loss
        // through a reweighted pseudo step.
        let (i_s, i_p) = influence_vectors(&model, &params, &batch, &v_old, &v_new, lr)?;
        for (val, infl) in [(&v_old, &i_s), (&v_new, &i_p)] {
            for j in 0..batch.len() {
                let fd = richardson(
                    |eps| {
                        let t = perturbed_step(&model, &theta, &batch, j, eps, lr)?;
                        Ok(forward_values(&model, &t, val)?.mean)
                    },
                    1e-3,
                )?;
                report.influence.add(infl[j], fd, config.influence_rel_tol, config.influence_abs_floor);
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DigitsOracleConfig {
    pub path: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub hidden: usize,
    pub activation: Activation,
    /// L2 penalty of the training objective, also the base damping.
    pub l2: f64,
    /// Step size of the pseudo update behind the meta influence.
    pub meta_lr: f64,
    pub seed: u64,
    pub zero_band: f64,
    /// Gradient descent to this tolerance before Newton polishing.
    pub warm_tol: f64,
    pub tol: f64,
}

impl DigitsOracleConfig {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        DigitsOracleConfig {
            path: path.into(),
            n_train: 1000,
            n_val: 500,
            hidden: 20,
            activation: Activation::Tanh,
            l2: 1e-3,
            meta_lr: 0.1,
            seed: 0,
            zero_band: DEFAULT_ZERO_BAND,
            warm_tol: 1e-3,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSuiteResult {
    pub rows: Vec<OracleRow>,
    pub agreement: SignAgreement,
    pub spearman: f64,
    pub num_params: usize,
    pub damping_used: f64,
    pub grad_norm: f64,
    pub hessian_condition: f64,
}

/// Meta influence with the same validation set on both sides, so the fused
/// value is that set's single-objective influence.
fn meta_single<M: Model>(model: &M, params: &ParamVector, train: &Batch, val: &Batch, lr: f64) -> Result<Vec<f64>> {
    let (i_s, _) = influence_vectors(model, params, train, val, val, lr)?;
    Ok(i_s)
}

/// Trains a one-hidden-layer network on digits to a stationary point of
/// the L2-regularized loss, then compares meta influence signs with the
/// exact influence function on the validation split.
pub fn digits_oracle_suite(cfg: &DigitsOracleConfig) -> Result<OracleSuiteResult> {
    let mut rows = load_digits_csv(&cfg.path)?;
    if rows.len() < cfg.n_train + cfg.n_val {
        return Err(Error::config(format!(
            "{} has {} rows, need {}",
            cfg.path.display(),
            rows.len(),
            cfg.n_train + cfg.n_val
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rand::seq::SliceRandom::shuffle(rows.as_mut_slice(), &mut rng);
    let classes = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
    let to_batch = |rs: &[(Vec<f64>, usize)]| -> Result<Batch> {
        let feats: Vec<&[f64]> = rs.iter().map(|r| r.0.as_slice()).collect();
        Batch::new(Tensor::from_rows(&feats)?, rs.iter().map(|r| r.1).collect())
    };
    let train = to_batch(&rows[..cfg.n_train])?;
    let val = to_batch(&rows[cfg.n_train..cfg.n_train + cfg.n_val])?;
    let model = Mlp::new(ModelSpec {
        input_dim: train.dim(),
        hidden_dims: vec![cfg.hidden],
        num_classes_total: classes,
        activation: cfg.activation,
    })?;
    let init = model.init(&mut rng);
    let warm = fit_full_batch(
        &model,
        &init,
        &train,
        &FitConfig {
            lr: 0.5,
            l2: cfg.l2,
            tol: cfg.warm_tol,
            max_iters: 100_000,
        },
    )?;
    let fit = refine_newton(&model, &warm.params, &train, cfg.l2, cfg.tol, 50)?;
    let exact = exact_influence(&model, &fit.params, &train, &val, cfg.l2)?;
    let meta = meta_single(&model, &fit.params, &train, &val, cfg.meta_lr)?;
    let agreement = sign_agreement(&meta, &exact.influence, cfg.zero_band)?;
    let rho = spearman(&meta, &exact.influence)?;
    Ok(OracleSuiteResult {
        rows: meta
            .iter()
            .zip(&exact.influence)
            .enumerate()
            .map(|(j, (&m, &e))| OracleRow {
                example_id: j,
                meta_influence: m,
                exact_influence: e,
                loo_delta: None,
            })
            .collect(),
        agreement,
        spearman: rho,
        num_params: model.num_params(),
        damping_used: exact.damping_used,
        grad_norm: fit.grad_norm,
        hessian_condition: exact.hessian_condition,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LooSuiteConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub dim: usize,
    /// Distance between the two class means.
    pub separation: f64,
    pub l2: f64,
    pub meta_lr: f64,
    pub seed: u64,
    pub zero_band: f64,
}

impl Default for LooSuiteConfig {
    fn default() -> Self {
        LooSuiteConfig {
            n_train: 50,
            n_val: 50,
            dim: 5,
            separation: 2.0,
            l2: 1e-2,
            meta_lr: 0.1,
            seed: 0,
            zero_band: DEFAULT_ZERO_BAND,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LooSuiteResult {
    pub rows: Vec<OracleRow>,
    /// Exact influence against bridged leave-one-out deltas.
    pub spearman: f64,
    pub agreement: SignAgreement,
    pub num_params: usize,
}

fn two_class_gaussians(rng: &mut ChaCha8Rng, n: usize, mean: &[f64]) -> Result<Batch> {
    let dim = mean.len();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let s = if y == 0 { -0.5 } else { 0.5 };
        for m in mean {
            let z: f64 = StandardNormal.sample(rng);
            data.push(s * m + z);
        }
        labels.push(y);
    }
    Batch::new(Tensor::new(vec![n, dim], data)?, labels)
}

/// Exact influence against leave-one-out retraining on L2-regularized
/// two-class logistic regression.
pub fn loo_suite(cfg: &LooSuiteConfig) -> Result<LooSuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dir: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dot(&dir, &dir).sqrt();
    let mean: Vec<f64> = dir.iter().map(|v| v / norm * cfg.separation).collect();
    let train = two_class_gaussians(&mut rng, cfg.n_train, &mean)?;
    let val = two_class_gaussians(&mut rng, cfg.n_val, &mean)?;
    let model = Mlp::new(ModelSpec {
        input_dim: cfg.dim,
        hidden_dims: Vec::new(),
        num_classes_total: 2,
        activation: Activation::Tanh,
    })?;
    let init = ParamVector::zeros(model.layout());
    let fit_cfg = FitConfig {
        l2: cfg.l2,
        ..FitConfig::default()
    };
    let fit = fit_full_batch(&model, &init, &train, &fit_cfg)?;
    let exact = exact_influence(&model, &fit.params, &train, &val, cfg.l2)?;
    let meta = meta_single(&model, &fit.params, &train, &val, cfg.meta_lr)?;
    let deltas = loo_deltas(&model, &train, &val, &init, &fit_cfg)?;
    let bridged = bridge_loo(&deltas);
    Ok(LooSuiteResult {
        rows: (0..train.len())
            .map(|j| OracleRow {
                example_id: j,
                meta_influence: meta[j],
                exact_influence: exact.influence[j],
                loo_delta: Some(deltas[j]),
            })
            .collect(),
        spearman: spearman(&exact.influence, &bridged)?,
        agreement: sign_agreement(&exact.influence, &bridged, cfg.zero_band)?,
        num_params: model.num_params(),
    })
}
