//! Split-style continual-learning task streams.
//!
//! Digits CSV format: one example per line, no header,
//! `label,pixel_0,...,pixel_{d-1}` with an integer label and pixel
//! intensities in `[0, 1]`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Batch;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Task identity is available at prediction time.
    TaskIncremental,
    ClassIncremental,
}

/// A labeled example with a stream-wide unique id.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    /// 1-based.
    pub task_id: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub class_ids: BTreeSet<usize>,
}

impl TaskDataset {
    pub fn train_batch(&self, idx: &[usize]) -> Result<Batch> {
        batch_of(idx.iter().map(|&i| &self.train[i]))
    }

    pub fn test_batch(&self) -> Result<Batch> {
        batch_of(self.test.iter())
    }
}

pub fn batch_of<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Batch> {
    Batch::from_pairs(samples.into_iter().map(|s| (s.features.as_slice(), s.label)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    tasks: Vec<TaskDataset>,
    setting: Setting,
    num_classes: usize,
    input_dim: usize,
}

impl TaskStream {
    /// Validates ids, class-disjointness, label membership and widths.
    pub fn new(tasks: Vec<TaskDataset>, setting: Setting) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::config("a task stream needs at least one task"));
        }
        let input_dim = tasks[0]
            .train
            .first()
            .map(|s| s.features.len())
            .ok_or_else(|| Error::config("task 1 has no training data"))?;
        let mut seen_classes = BTreeSet::new();
        let mut seen_ids = HashSet::new();
        for (i, task) in tasks.iter().enumerate() {
            if task.task_id != i + 1 {
                return Err(Error::config(format!(
                    "task ids must be consecutive from 1; position {i} holds task {}",
                    task.task_id
                )));
            }
            if !seen_classes.is_disjoint(&task.class_ids) {
                return Err(Error::config(format!(
                    "task {} shares classes with an earlier task",
                    task.task_id
                )));
            }
            seen_classes.extend(task.class_ids.iter().copied());
            for s in task.train.iter().chain(&task.test) {
                if !task.class_ids.contains(&s.label) {
                    return Err(Error::config(format!(
                        "example {} of task {} has label {} outside its classes",
                        s.id, task.task_id, s.label
                    )));
                }
                if s.features.len() != input_dim {
                    return Err(Error::config(format!(
                        "example {} has {} features, expected {input_dim}",
                        s.id,
                        s.features.len()
                    )));
                }
                if !seen_ids.insert(s.id) {
                    return Err(Error::config(format!("duplicate example id {}", s.id)));
                }
            }
        }
        let num_classes = seen_classes.last().map_or(0, |c| c + 1);
        Ok(TaskStream {
            tasks,
            setting,
            num_classes,
            input_dim,
        })
    }

    pub fn tasks(&self) -> &[TaskDataset] {
        &self.tasks
    }

    /// Task by 1-based id.
    pub fn task(&self, task_id: usize) -> Result<&TaskDataset> {
        task_id
            .checked_sub(1)
            .and_then(|i| self.tasks.get(i))
            .ok_or_else(|| Error::Evaluation(format!("unknown task id {task_id}")))
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn setting(&self) -> Setting {
        self.setting
    }

    pub fn with_setting(mut self, setting: Setting) -> Self {
        self.setting = setting;
        self
    }

    /// Size of the shared output head (largest class id + 1).
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
}

/// Gaussian blobs split into tasks of `classes_per_task` consecutive classes.
///
/// Class means have independent `N(0, separation²/dim)` coordinates, redrawn
/// until every pair is at least `separation` apart; each example adds
/// unit-variance isotropic noise. Task `t` owns classes
/// `(t-1)·c .. t·c`. `n_train`/`n_test` are per task.
pub fn make_split_gaussians(
    num_tasks: usize,
    classes_per_task: usize,
    dim: usize,
    n_train: usize,
    n_test: usize,
    separation: f64,
    seed: u64,
) -> Result<TaskStream> {
    if num_tasks == 0 || classes_per_task == 0 || dim == 0 || n_train == 0 || n_test == 0 {
        return Err(Error::config("split-gaussian counts must all be at least 1"));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::config("separation must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = num_tasks * classes_per_task;
    let means = draw_means(num_classes, dim, separation, &mut rng);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let mut next_id = 0;
    let mut draw = |class: usize, count: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
        (0..count)
            .map(|_| {
                let features = means[class].iter().map(|m| m + noise.sample(rng)).collect();
                next_id += 1;
                Sample {
                    id: next_id - 1,
                    features,
                    label: class,
                }
            })
            .collect()
    };

    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let classes: Vec<usize> = (t * classes_per_task..(t + 1) * classes_per_task).collect();
        let mut train = Vec::with_capacity(n_train);
        let mut test = Vec::with_capacity(n_test);
        for (k, &c) in classes.iter().enumerate() {
            train.extend(draw(c, share(n_train, classes_per_task, k), &mut rng));
        }
        for (k, &c) in classes.iter().enumerate() {
            test.extend(draw(c, share(n_test, classes_per_task, k), &mut rng));
        }
        train.shuffle(&mut rng);
        test.shuffle(&mut rng);
        tasks.push(TaskDataset {
            task_id: t + 1,
            train,
            test,
            class_ids: classes.into_iter().collect(),
        });
    }
    TaskStream::new(tasks, Setting::ClassIncremental)
}

/// Count assigned to part `k` when splitting `total` into `parts`, remainder
/// to the first parts.
fn share(total: usize, parts: usize, k: usize) -> usize {
    total / parts + usize::from(k < total % parts)
}

fn draw_means(k: usize, dim: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut spread = separation / (dim as f64).sqrt();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut failures = 0;
    while means.len() < k {
        let normal = Normal::new(0.0, spread).expect("positive spread");
        let cand: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let ok = means.iter().all(|m| {
            m.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>() >= separation * separation
        });
        if ok {
            means.push(cand);
        } else {
            failures += 1;
            if failures % 1000 == 0 {
                spread *= 1.5;
            }
        }
    }
    means
}

/// Reads a digits-style CSV into `(features, label)` rows.
pub fn load_digits_csv(path: &Path) -> Result<Vec<(Vec<f64>, usize)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Input {
            path: path.to_path_buf(),
            line: 0,
            message: format!("cannot open: {e}"),
        })?;
    let mut rows = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let bad = |message: String| Error::Input {
            path: path.to_path_buf(),
            line,
            message,
        };
        let record = record.map_err(|e| bad(e.to_string()))?;
        let mut fields = record.iter();
        let label: usize = fields
            .next()
            .ok_or_else(|| bad("empty row".into()))?
            .trim()
            .parse()
            .map_err(|e| bad(format!("label: {e}")))?;
        let features = fields
            .map(|f| {
                let v: f64 = f.trim().parse().map_err(|e| bad(format!("pixel {f:?}: {e}")))?;
                if (0.0..=1.0).contains(&v) {
                    Ok(v)
                } else {
                    Err(bad(format!("pixel {v} outside [0, 1]")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if features.is_empty() {
            return Err(bad("row has no pixels".into()));
        }
        match width {
            None => width = Some(features.len()),
            Some(w) if w != features.len() => {
                return Err(bad(format!("expected {w} pixels, found {}", features.len())))
            }
            _ => {}
        }
        rows.push((features, label));
    }
    if rows.is_empty() {
        return Err(Error::Input {
            path: path.to_path_buf(),
            line: 0,
            message: "file has no rows".into(),
        });
    }
    Ok(rows)
}

/// Split-digits stream: the shuffled class list is cut into `num_tasks`
/// groups; each task's examples are shuffled and 20% are held out for test.
pub fn make_split_digits(num_tasks: usize, seed: u64, path: &Path) -> Result<TaskStream> {
    let rows = load_digits_csv(path)?;
    split_rows(rows, num_tasks, seed, 0.2)
}

pub(crate) fn split_rows(
    rows: Vec<(Vec<f64>, usize)>,
    num_tasks: usize,
    seed: u64,
    test_fraction: f64,
) -> Result<TaskStream> {
    let mut by_class: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (x, y) in rows {
        by_class.entry(y).or_default().push(x);
    }
    let mut classes: Vec<usize> = by_class.keys().copied().collect();
    if num_tasks == 0 || num_tasks > classes.len() {
        return Err(Error::config(format!(
            "cannot split {} classes into {num_tasks} tasks",
            classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    classes.shuffle(&mut rng);
    let mut next_id = 0;
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut start = 0;
    for t in 0..num_tasks {
        let len = share(classes.len(), num_tasks, t);
        let group: BTreeSet<usize> = classes[start..start + len].iter().copied().collect();
        start += len;
        let mut examples: Vec<(Vec<f64>, usize)> = group
            .iter()
            .flat_map(|&c| by_class[&c].iter().map(move |x| (x.clone(), c)))
            .collect();
        examples.shuffle(&mut rng);
        let n_test = ((examples.len() as f64) * test_fraction).round() as usize;
        let n_test = n_test.clamp(1, examples.len().saturating_sub(1).max(1));
        let mut samples: Vec<Sample> = examples
            .into_iter()
            .map(|(features, label)| {
                next_id += 1;
                Sample {
                    id: next_id - 1,
                    features,
                    label,
                }
            })
            .collect();
        let train = samples.split_off(n_test);
        tasks.push(TaskDataset {
            task_id: t + 1,
            train,
            test: samples,
            class_ids: group,
        });
    }
    TaskStream::new(tasks, Setting::ClassIncremental)
}

/// Task-incremental: scores of classes outside the task are set to `-inf`.
/// Class-incremental: unchanged.
pub fn masked_logits(
    logits: &[f64],
    setting: Setting,
    task_id: usize,
    stream: &TaskStream,
) -> Result<Vec<f64>> {
    match setting {
        Setting::ClassIncremental => Ok(logits.to_vec()),
        Setting::TaskIncremental => {
            let task = stream.task(task_id)?;
            Ok(logits
                .iter()
                .enumerate()
                .map(|(c, &z)| {
                    if task.class_ids.contains(&c) {
                        z
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect())
        }
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
