//! Aggregate influence statistics from per-step logs: sign counts for
//! memory and current-task examples, and an equal-width histogram of the
//! fused influence.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::memory::csv_err;
use crate::trainer::StepRecord;

pub const NUM_BINS: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SignCounts {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

impl SignCounts {
    fn add(&mut self, v: f64) {
        if v > 0.0 {
            self.positive += 1;
        } else if v < 0.0 {
            self.negative += 1;
        } else {
            self.zero += 1;
        }
    }

    pub fn total(&self) -> usize {
        self.positive + self.negative + self.zero
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupCounts {
    pub i_s: SignCounts,
    pub i_p: SignCounts,
    pub i_fused: SignCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskInfluenceStats {
    pub task: usize,
    /// Examples drawn from memory.
    pub old: GroupCounts,
    /// Examples of the task being trained.
    pub new: GroupCounts,
    /// `NUM_BINS + 1` edges from the smallest to the largest mean fused
    /// influence.
    pub bin_edges: Vec<f64>,
    pub bin_counts: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InfluenceHistogram {
    pub tasks: Vec<TaskInfluenceStats>,
    /// No records were supplied.
    pub empty: bool,
}

/// Equal-width bins over `[min, max]`; the maximum lands in the last bin.
pub fn equal_width_bins(values: &[f64], bins: usize) -> (Vec<f64>, Vec<usize>) {
    let mut counts = vec![0; bins];
    if values.is_empty() || bins == 0 {
        return (Vec::new(), counts);
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    for &v in values {
        let b = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    (edges, counts)
}

#[derive(Default)]
struct Running {
    n: f64,
    s: f64,
    p: f64,
    f: f64,
}

impl Running {
    fn add(&mut self, s: f64, p: f64, f: f64) {
        self.n += 1.0;
        self.s += (s - self.s) / self.n;
        self.p += (p - self.p) / self.n;
        self.f += (f - self.f) / self.n;
    }
}

/// Per-task statistics. Each example's influences are first averaged over
/// all the steps it appeared in, then counted once.
pub fn influence_stats(records: &[StepRecord]) -> InfluenceHistogram {
    if records.is_empty() {
        return InfluenceHistogram {
            tasks: Vec::new(),
            empty: true,
        };
    }
    // task -> (from_memory, example id) -> running means
    let mut per_task: BTreeMap<usize, BTreeMap<(bool, usize), Running>> = BTreeMap::new();
    for r in records {
        let m = per_task.entry(r.task).or_default();
        let rec = &r.record;
        for j in 0..rec.i_s.len() {
            m.entry((r.from_memory[j], rec.batch_example_ids[j]))
                .or_default()
                .add(rec.i_s[j], rec.i_p[j], rec.i_fused[j]);
        }
    }
    let tasks = per_task
        .into_iter()
        .map(|(task, examples)| {
            let mut old = GroupCounts::default();
            let mut new = GroupCounts::default();
            let mut fused = Vec::with_capacity(examples.len());
            for ((from_memory, _), r) in &examples {
                let g = if *from_memory { &mut old } else { &mut new };
                g.i_s.add(r.s);
                g.i_p.add(r.p);
                g.i_fused.add(r.f);
                fused.push(r.f);
            }
            let (bin_edges, bin_counts) = equal_width_bins(&fused, NUM_BINS);
            TaskInfluenceStats {
                task,
                old,
                new,
                bin_edges,
                bin_counts,
            }
        })
        .collect();
    InfluenceHistogram { tasks, empty: false }
}

/// CSV with header `task,category,label,lower,upper,count`.
///
/// Sign rows have category `sign` and label `<old|new>.<i_s|i_p|i_fused>.<positive|negative|zero>`.
/// Histogram rows have category `bin`, label `0..4`, and the bin edges.
pub fn write_histogram_csv<W: Write>(out: W, hist: &InfluenceHistogram) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "category", "label", "lower", "upper", "count"])
        .map_err(csv_err)?;
    for t in &hist.tasks {
        for (group, g) in [("old", &t.old), ("new", &t.new)] {
            for (q, c) in [("i_s", g.i_s), ("i_p", g.i_p), ("i_fused", g.i_fused)] {
                for (sign, n) in [("positive", c.positive), ("negative", c.negative), ("zero", c.zero)] {
                    w.write_record([
                        t.task.to_string(),
                        "sign".into(),
                        format!("{group}.{q}.{sign}"),
                        String::new(),
                        String::new(),
                        n.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        for (b, n) in t.bin_counts.iter().enumerate() {
            w.write_record([
                t.task.to_string(),
                "bin".into(),
                b.to_string(),
                t.bin_edges[b].to_string(),
                t.bin_edges[b + 1].to_string(),
                n.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io("influence histogram", e))?;
    Ok(())
}
