//! Sequential training over a task stream with rehearsal, influence-weighted
//! updates, and end-of-task memory selection.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_values, per_example_grad_rows, Batch, Model, ParamVector};
use crate::data::{argmax, batch_of, masked_logits, Sample, Setting, TaskDataset, TaskStream};
use crate::error::{Error, Result};
use crate::influence::{draw, meta_influence, snapshot_pool, InfluenceRecord};
use crate::memory::{Candidate, InfluenceStat, MemoryBuffer};
use crate::metrics::{compute_metrics, AccuracyMatrix, MetricsReport};
use crate::models::Mlp;

/// Share of the memory, and of the seen new-task data, kept as
/// validation pools.
pub const VALIDATION_POOL_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Finetune,
    Joint,
    Er,
    Metasp,
    MetaspRehsel,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Finetune,
        Method::Er,
        Method::Metasp,
        Method::MetaspRehsel,
        Method::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Joint => "joint",
            Method::Er => "er",
            Method::Metasp => "metasp",
            Method::MetaspRehsel => "metasp_rehsel",
        }
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, Method::Er | Method::Metasp | Method::MetaspRehsel)
    }

    pub fn uses_influence(self) -> bool {
        matches!(self, Method::Metasp | Method::MetaspRehsel)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown method `{s}`; expected one of finetune, joint, er, metasp, metasp_rehsel"
                ))
            })
    }
}

fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    50
}
fn default_window() -> usize {
    5
}
fn default_pseudo_iterations() -> usize {
    1
}
fn default_val_sizes() -> (usize, usize) {
    (32, 32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Size of both the new-task batch and the rehearsal batch.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs_per_task: usize,
    /// Influence-weighted training runs only in this many final epochs of
    /// each task.
    #[serde(default = "default_window")]
    pub metasp_last_epochs: usize,
    #[serde(default = "default_pseudo_iterations")]
    pub pseudo_iterations: usize,
    pub method: Method,
    pub setting: Setting,
    pub buffer_capacity: usize,
    /// `(old, new)` validation mini-batch sizes.
    #[serde(default = "default_val_sizes")]
    pub val_batch_sizes: (usize, usize),
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be finite and > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.epochs_per_task == 0 {
            return fail("epochs_per_task must be at least 1".into());
        }
        if self.metasp_last_epochs > self.epochs_per_task {
            return fail(format!(
                "metasp_last_epochs ({}) exceeds epochs_per_task ({})",
                self.metasp_last_epochs, self.epochs_per_task
            ));
        }
        if self.pseudo_iterations == 0 {
            return fail("pseudo_iterations must be at least 1".into());
        }
        if self.val_batch_sizes.0 == 0 || self.val_batch_sizes.1 == 0 {
            return fail("val_batch_sizes must both be at least 1".into());
        }
        if self.method.uses_memory() && self.buffer_capacity == 0 {
            return fail(format!("method {} needs buffer_capacity >= 1", self.method));
        }
        Ok(())
    }
}

// Independent random streams, so that enabling one component never shifts
// the draws of another.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_REHEARSAL: u64 = 3;
const STREAM_VALIDATION: u64 = 4;
const STREAM_POOL: u64 = 5;
const STREAM_SELECT: u64 = 6;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let s = splitmix(splitmix(splitmix(splitmix(seed) ^ purpose) ^ a) ^ b);
    ChaCha8Rng::seed_from_u64(s)
}

/// Deterministic initial parameters for a run seed.
pub fn init_params(model: &Mlp, seed: u64) -> ParamVector {
    model.init(&mut stream_rng(seed, STREAM_INIT, 0, 0))
}

/// Plain SGD on the mean batch loss.
pub fn sgd_step<M: Model>(model: &M, params: &ParamVector, batch: &Batch, lr: f64) -> Result<ParamVector> {
    let g = grad_values(model, params.values(), batch, None)?;
    let mut next = params.clone();
    next.axpy(-lr, &g);
    Ok(next)
}

/// One SGD step on per-example weights `w_i = 1/|B| − I*_i`.
pub fn influence_weighted_step<M: Model>(
    model: &M,
    params: &ParamVector,
    batch: &Batch,
    i_fused: &[f64],
    lr: f64,
) -> Result<ParamVector> {
    if i_fused.len() != batch.len() {
        return Err(Error::config(format!(
            "{} influences for a batch of {}",
            i_fused.len(),
            batch.len()
        )));
    }
    let base = 1.0 / batch.len() as f64;
    let w: Vec<f64> = i_fused.iter().map(|i| base - i).collect();
    let g = grad_values(model, params.values(), batch, Some(&w))?;
    let mut next = params.clone();
    next.axpy(-lr, &g);
    Ok(next)
}

/// Identity of each row of a combined training batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    /// Position in the memory buffer.
    Memory(usize),
    /// Index into the current task's training set.
    Current(usize),
}

/// Influence estimation followed by the influence-weighted update.
pub fn metasp_step<M: Model>(
    model: &M,
    params: &ParamVector,
    batch: &Batch,
    v_old: &Batch,
    v_new: &Batch,
    lr: f64,
    pseudo_iterations: usize,
) -> Result<(ParamVector, Vec<f64>, Vec<f64>)> {
    let grads = per_example_grad_rows(model, params.values(), batch)?;
    let mut v = meta_influence(model, params.values(), batch, &grads, &[v_old, v_new], lr, pseudo_iterations)?;
    let i_p = v.pop().expect("two validation sets");
    let i_s = v.pop().expect("two validation sets");
    let g = crate::influence::pareto_gamma(&i_s, &i_p)?;
    let fused = crate::influence::fuse(&i_s, &i_p, g.gamma)?;
    let next = influence_weighted_step(model, params, batch, &fused, lr)?;
    Ok((next, i_s, i_p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub task: usize,
    pub record: InfluenceRecord,
    /// `true` for rows drawn from memory.
    pub from_memory: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutput {
    pub params: ParamVector,
    pub records: Vec<StepRecord>,
    /// Running influence statistic of every training example of the task.
    pub new_stats: Vec<InfluenceStat>,
    pub warnings: Vec<String>,
    pub steps: usize,
}

/// Test accuracy (%) of `params` on task `task_id` under `setting`.
pub fn evaluate(model: &Mlp, params: &ParamVector, stream: &TaskStream, task_id: usize, setting: Setting) -> Result<f64> {
    let task = stream.task(task_id)?;
    if task.test.is_empty() {
        return Err(Error::Evaluation(format!("task {task_id} has no test data")));
    }
    let batch = task.test_batch()?;
    let logits = model.logits(params, batch.inputs())?;
    let c = logits.cols();
    let mut correct = 0usize;
    for (i, &y) in batch.labels().iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        if argmax(&masked_logits(row, setting, task_id, stream)?) == y {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / batch.len() as f64)
}

fn rehearsal_positions(memory_len: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if memory_len >= size {
        rand::seq::index::sample(rng, memory_len, size).into_vec()
    } else {
        (0..size).map(|_| rng.random_range(0..memory_len)).collect()
    }
}

/// Trains one task. `step_offset` numbers steps across the whole run.
pub fn train_task(
    model: &Mlp,
    params: &ParamVector,
    task: &TaskDataset,
    memory: &mut MemoryBuffer,
    config: &TrainConfig,
    step_offset: usize,
) -> Result<TaskOutput> {
    config.validate()?;
    let t = task.task_id;
    let rehearse = config.method.uses_memory() && t > 1;
    if rehearse && memory.is_empty() {
        return Err(Error::config(format!(
            "task {t}: method {} needs a non-empty memory",
            config.method
        )));
    }
    let n = task.train.len();
    if n == 0 {
        return Err(Error::config(format!("task {t} has no training data")));
    }
    let mut out = TaskOutput {
        params: params.clone(),
        records: Vec::new(),
        new_stats: vec![InfluenceStat::default(); n],
        warnings: Vec::new(),
        steps: 0,
    };
    if rehearse && memory.len() < config.batch_size {
        out.warnings.push(format!(
            "task {t}: memory holds {} < {} examples, rehearsal batches drawn with replacement",
            memory.len(),
            config.batch_size
        ));
    }
    let window_start = config.epochs_per_task - config.metasp_last_epochs;
    let influence_on = config.method.uses_influence() && rehearse;
    let old_pool: Vec<(usize, Sample)> = if influence_on {
        let indexed: Vec<(usize, Sample)> = memory.entries().iter().map(|e| e.sample.clone()).enumerate().collect();
        snapshot_pool(&indexed, VALIDATION_POOL_FRACTION, &mut stream_rng(config.seed, STREAM_POOL, t as u64, 0))
    } else {
        Vec::new()
    };
    let mut seen = vec![false; n];
    let mut step = step_offset;
    for epoch in 0..config.epochs_per_task {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(config.seed, STREAM_SHUFFLE, t as u64, epoch as u64));
        let meta_epoch = influence_on && epoch >= window_start;
        let new_pool: Vec<Sample> = if meta_epoch {
            let seen_now: Vec<Sample> = if seen.iter().any(|&s| s) {
                (0..n).filter(|&i| seen[i]).map(|i| task.train[i].clone()).collect()
            } else {
                order.iter().take(config.batch_size).map(|&i| task.train[i].clone()).collect()
            };
            let mut rng = stream_rng(config.seed, STREAM_POOL, t as u64, 1 + epoch as u64);
            snapshot_pool(&seen_now, VALIDATION_POOL_FRACTION, &mut rng)
        } else {
            Vec::new()
        };
        for chunk in order.chunks(config.batch_size) {
            let mut origins: Vec<Origin> = Vec::new();
            if rehearse {
                let mut rng = stream_rng(config.seed, STREAM_REHEARSAL, t as u64, step as u64);
                origins.extend(
                    rehearsal_positions(memory.len(), config.batch_size, &mut rng)
                        .into_iter()
                        .map(Origin::Memory),
                );
            }
            origins.extend(chunk.iter().map(|&i| Origin::Current(i)));
            let sample_of = |o: &Origin| -> &Sample {
                match *o {
                    Origin::Memory(p) => &memory.entries()[p].sample,
                    Origin::Current(i) => &task.train[i],
                }
            };
            let batch = batch_of(origins.iter().map(sample_of))?;
            if meta_epoch {
                let mut rng = stream_rng(config.seed, STREAM_VALIDATION, t as u64, step as u64);
                let v_old = batch_of(draw(&old_pool, config.val_batch_sizes.0, &mut rng).into_iter().map(|(_, s)| s))?;
                let v_new = batch_of(draw(&new_pool, config.val_batch_sizes.1, &mut rng))?;
                let (next, i_s, i_p) = metasp_step(
                    model,
                    &out.params,
                    &batch,
                    &v_old,
                    &v_new,
                    config.lr,
                    config.pseudo_iterations,
                )?;
                let ids = origins.iter().map(|o| sample_of(o).id).collect();
                let task_ids = origins
                    .iter()
                    .map(|o| match *o {
                        Origin::Memory(p) => memory.entries()[p].task_id,
                        Origin::Current(_) => t,
                    })
                    .collect();
                let from_memory = origins.iter().map(|o| matches!(o, Origin::Memory(_))).collect();
                let record = InfluenceRecord::new(i_s, i_p, ids, task_ids)?;
                for (o, &v) in origins.iter().zip(&record.i_fused) {
                    match *o {
                        Origin::Memory(p) => memory
                            .entry_mut(p)
                            .expect("position drawn from memory")
                            .update_influence_stat(v)?,
                        Origin::Current(i) => out.new_stats[i].observe(v)?,
                    }
                }
                out.records.push(StepRecord {
                    step,
                    task: t,
                    record,
                    from_memory,
                });
                out.params = next;
            } else {
                out.params = sgd_step(model, &out.params, &batch, config.lr)?;
            }
            for &i in chunk {
                seen[i] = true;
            }
            step += 1;
        }
    }
    out.steps = step - step_offset;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub acc: AccuracyMatrix,
    pub metrics: MetricsReport,
    pub records: Vec<StepRecord>,
    /// Memory state after each task's selection, before its statistics are
    /// cleared.
    pub memory_snapshots: Vec<(usize, MemoryBuffer)>,
    pub warnings: Vec<String>,
    pub params: ParamVector,
}

/// Trains over every task of `stream` in order.
pub fn run_stream(stream: &TaskStream, model: &Mlp, config: &TrainConfig) -> Result<RunOutput> {
    config.validate()?;
    if model.spec().input_dim != stream.input_dim() || model.spec().num_classes_total < stream.num_classes() {
        return Err(Error::config("model does not fit the task stream"));
    }
    let t_max = stream.num_tasks();
    let mut acc = AccuracyMatrix::new(t_max);
    let mut params = init_params(model, config.seed);
    if config.method == Method::Joint {
        let union: Vec<Sample> = stream.tasks().iter().flat_map(|t| t.train.iter().cloned()).collect();
        let joint = TaskDataset {
            task_id: 1,
            train: union,
            test: Vec::new(),
            class_ids: stream.tasks().iter().flat_map(|t| t.class_ids.iter().copied()).collect(),
        };
        let mut scratch = MemoryBuffer::new(0);
        params = train_task(model, &params, &joint, &mut scratch, config, 0)?.params;
        for k in 1..=t_max {
            acc.set(t_max, k, evaluate(model, &params, stream, k, config.setting)?)?;
        }
        let metrics = compute_metrics(&acc)?;
        return Ok(RunOutput {
            acc,
            metrics,
            records: Vec::new(),
            memory_snapshots: Vec::new(),
            warnings: Vec::new(),
            params,
        });
    }

    let mut memory = MemoryBuffer::new(config.buffer_capacity);
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let mut warnings = Vec::new();
    let mut step = 0;
    for task in stream.tasks() {
        let t = task.task_id;
        acc.set_pre(t, evaluate(model, &params, stream, t, config.setting)?)?;
        let out = train_task(model, &params, task, &mut memory, config, step)?;
        params = out.params;
        step += out.steps;
        records.extend(out.records);
        warnings.extend(out.warnings);
        for k in 1..=t {
            acc.set(t, k, evaluate(model, &params, stream, k, config.setting)?)?;
        }
        let mut rng = stream_rng(config.seed, STREAM_SELECT, t as u64, 0);
        let select_seed: u64 = rng.random();
        let report = match config.method {
            Method::Finetune | Method::Joint => None,
            Method::Er | Method::Metasp => Some(memory.select_rehearsal_random(&task.train, t, select_seed)?),
            Method::MetaspRehsel => {
                let cands: Vec<Candidate> = task
                    .train
                    .iter()
                    .zip(&out.new_stats)
                    .map(|(s, st)| Candidate {
                        sample: s.clone(),
                        influence: *st,
                    })
                    .collect();
                Some(memory.select_rehearsal(&cands, t, select_seed)?)
            }
        };
        if let Some(w) = report.and_then(|r| r.warning) {
            warnings.push(w);
        }
        if config.method.uses_memory() {
            snapshots.push((t, memory.clone()));
        }
        memory.reset_influence();
    }
    let metrics = compute_metrics(&acc)?;
    Ok(RunOutput {
        acc,
        metrics,
        records,
        memory_snapshots: snapshots,
        warnings,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::per_example_grads;
    use crate::data::make_split_gaussians;
    use crate::models::{Activation, ModelSpec};

    fn small_stream() -> TaskStream {
        make_split_gaussians(3, 2, 4, 60, 40, 4.0, 11).unwrap()
    }

    fn mlp(stream: &TaskStream) -> Mlp {
        Mlp::new(ModelSpec {
            input_dim: stream.input_dim(),
            hidden_dims: vec![8],
            num_classes_total: stream.num_classes(),
            activation: Activation::Relu,
        })
        .unwrap()
    }

    fn config(method: Method) -> TrainConfig {
        TrainConfig {
            lr: 0.1,
            batch_size: 16,
            epochs_per_task: 4,
            metasp_last_epochs: 2,
            pseudo_iterations: 1,
            method,
            setting: Setting::ClassIncremental,
            buffer_capacity: 12,
            val_batch_sizes: (8, 8),
            seed: 5,
        }
    }

    fn toy_batch() -> (Mlp, ParamVector, Batch) {
        let m = Mlp::new(ModelSpec {
            input_dim: 3,
            hidden_dims: vec![4],
            num_classes_total: 3,
            activation: Activation::Tanh,
        })
        .unwrap();
        let p = init_params(&m, 3);
        let b = Batch::from_pairs([
            (&[0.1, 0.5, -0.3][..], 0),
            (&[1.0, -0.2, 0.4][..], 2),
            (&[-0.7, 0.3, 0.9][..], 1),
            (&[0.2, 0.2, 0.2][..], 0),
        ])
        .unwrap();
        (m, p, b)
    }

    #[test]
    fn zero_influence_is_the_plain_step() {
        let (m, p, b) = toy_batch();
        let plain = sgd_step(&m, &p, &b, 0.3).unwrap();
        let weighted = influence_weighted_step(&m, &p, &b, &[0.0; 4], 0.3).unwrap();
        assert_eq!(plain, weighted);
    }

    #[test]
    fn uniform_negative_influence_doubles_the_step() {
        let (m, p, b) = toy_batch();
        let doubled = sgd_step(&m, &p, &b, 0.6).unwrap();
        let weighted = influence_weighted_step(&m, &p, &b, &[-0.25; 4], 0.3).unwrap();
        for (a, c) in doubled.values().iter().zip(weighted.values()) {
            assert!((a - c).abs() < 1e-14);
        }
    }

    #[test]
    fn weighted_step_recomposes_from_per_example_grads() {
        let (m, p, b) = toy_batch();
        let infl = [0.05, -0.1, 0.2, -0.03];
        let got = influence_weighted_step(&m, &p, &b, &infl, 0.3).unwrap();
        let rows = per_example_grads(&m, &p, &b).unwrap();
        let mut expect = p.values().to_vec();
        for (r, i) in rows.iter().zip(infl) {
            for (e, g) in expect.iter_mut().zip(r.values()) {
                *e -= 0.3 * (0.25 - i) * g;
            }
        }
        for (a, c) in expect.iter().zip(got.values()) {
            assert!((a - c).abs() < 1e-10);
        }
        assert!(matches!(
            influence_weighted_step(&m, &p, &b, &[f64::NAN, 0.0, 0.0, 0.0], 0.3),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = config(Method::Er);
        c.metasp_last_epochs = 5;
        assert!(c.validate().is_err());
        let mut c = config(Method::Er);
        c.buffer_capacity = 0;
        assert!(c.validate().is_err());
        let mut c = config(Method::Finetune);
        c.buffer_capacity = 0;
        assert!(c.validate().is_ok());
        assert_eq!("metasp_rehsel".parse::<Method>().unwrap(), Method::MetaspRehsel);
        assert!("gem".parse::<Method>().is_err());
    }

    #[test]
    fn disabled_window_matches_er() {
        let s = small_stream();
        let m = mlp(&s);
        let er = run_stream(&s, &m, &config(Method::Er)).unwrap();
        let mut c = config(Method::Metasp);
        c.metasp_last_epochs = 0;
        let ms = run_stream(&s, &m, &c).unwrap();
        assert_eq!(er.acc, ms.acc);
        assert_eq!(er.params, ms.params);
        assert!(ms.records.is_empty());
    }

    #[test]
    fn first_task_of_metasp_is_finetuning() {
        let s = small_stream();
        let m = mlp(&s);
        let task = &s.tasks()[0];
        let p0 = init_params(&m, 5);
        let ft = train_task(&m, &p0, task, &mut MemoryBuffer::new(12), &config(Method::Finetune), 0).unwrap();
        let ms = train_task(&m, &p0, task, &mut MemoryBuffer::new(12), &config(Method::Metasp), 0).unwrap();
        assert_eq!(ft.params, ms.params);
        assert!(ms.records.is_empty());
    }

    #[test]
    fn finetune_never_touches_memory() {
        let s = small_stream();
        let out = run_stream(&s, &mlp(&s), &config(Method::Finetune)).unwrap();
        assert!(out.memory_snapshots.is_empty());
    }

    #[test]
    fn metasp_logs_and_fills_memory() {
        let s = small_stream();
        let out = run_stream(&s, &mlp(&s), &config(Method::MetaspRehsel)).unwrap();
        // 2 window epochs × 4 steps on each of tasks 2 and 3
        assert_eq!(out.records.len(), 16);
        for r in &out.records {
            assert!((0.0..=1.0).contains(&r.record.gamma_star));
            // 16 rehearsal rows plus a full or final partial chunk of 60 % 16
            assert!([16 + 16, 16 + 12].contains(&r.record.i_s.len()));
        }
        let (_, last) = out.memory_snapshots.last().unwrap();
        assert_eq!(last.len(), 12);
        assert_eq!(last.task_counts().values().copied().collect::<Vec<_>>(), vec![4, 4, 4]);
    }

    #[test]
    fn empty_memory_after_first_task_is_refused() {
        let s = small_stream();
        let m = mlp(&s);
        let e = train_task(&m, &init_params(&m, 0), &s.tasks()[1], &mut MemoryBuffer::new(4), &config(Method::Er), 0);
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn small_memory_is_flagged() {
        let s = small_stream();
        let mut c = config(Method::Er);
        c.buffer_capacity = 6;
        let out = run_stream(&s, &mlp(&s), &c).unwrap();
        assert!(out.warnings.iter().any(|w| w.contains("with replacement")));
    }

    #[test]
    fn single_task_and_joint() {
        let s = make_split_gaussians(1, 2, 4, 40, 20, 6.0, 2).unwrap();
        let out = run_stream(&s, &mlp(&s), &config(Method::Er)).unwrap();
        assert_eq!(out.acc.num_tasks(), 1);
        assert!(out.metrics.bwt_undefined);
        assert_eq!(out.metrics.a1, Some(out.metrics.a_inf));

        let s = small_stream();
        let joint = run_stream(&s, &mlp(&s), &config(Method::Joint)).unwrap();
        assert!(joint.metrics.a1.is_none());
        assert!(joint.acc.get(3, 1).is_some() && joint.acc.get(2, 2).is_none());
    }

    #[test]
    fn runs_are_reproducible() {
        let s = small_stream();
        let m = mlp(&s);
        let a = run_stream(&s, &m, &config(Method::Metasp)).unwrap();
        let b = run_stream(&s, &m, &config(Method::Metasp)).unwrap();
        assert_eq!(a, b);
    }
}
