//! Fixed-budget episodic memory and end-of-task selection policies.
//!
//! Quota rule: after task `t`, task `j` may keep `⌊capacity / t⌋` entries,
//! plus one more when `j ≤ capacity mod t`.
//!
//! Rankings sort by influence value with a stable sort, so ties keep the
//! order the candidates were listed in. Lower (more negative) influence is
//! better: it lowers validation loss when the example is upweighted.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::kmeans::kmeans;

/// Running mean of observed fused influence values, `E[I*(x)]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InfluenceStat {
    pub mean: f64,
    pub count: u64,
}

impl InfluenceStat {
    /// `mean_{k+1} = mean_k + (obs - mean_k) / (k + 1)`
    pub fn observe(&mut self, obs: f64) -> Result<()> {
        if !obs.is_finite() {
            return Err(Error::numeric("influence observation", None));
        }
        self.count += 1;
        self.mean += (obs - self.mean) / self.count as f64;
        Ok(())
    }

    /// Value used for ranking; never-observed examples count as neutral.
    pub fn rank_value(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.mean
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub sample: Sample,
    pub task_id: usize,
    pub influence: InfluenceStat,
}

impl MemoryEntry {
    pub fn new(sample: Sample, task_id: usize) -> Self {
        MemoryEntry {
            sample,
            task_id,
            influence: InfluenceStat::default(),
        }
    }

    pub fn update_influence_stat(&mut self, observed: f64) -> Result<()> {
        self.influence.observe(observed)
    }
}

/// A finished task's training example with its influence statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub sample: Sample,
    pub influence: InfluenceStat,
}

/// What a selection call did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionReport {
    pub evicted: Vec<usize>,
    pub inserted: Vec<usize>,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBuffer {
    capacity: usize,
    entries: Vec<MemoryEntry>,
}

/// Entries task `task_id` may hold after `tasks_seen` tasks.
pub fn quota(capacity: usize, tasks_seen: usize, task_id: usize) -> usize {
    if tasks_seen == 0 || task_id == 0 || task_id > tasks_seen {
        return 0;
    }
    capacity / tasks_seen + usize::from(task_id <= capacity % tasks_seen)
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        MemoryBuffer {
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn entry_mut(&mut self, i: usize) -> Option<&mut MemoryEntry> {
        self.entries.get_mut(i)
    }

    pub fn count_for_task(&self, task_id: usize) -> usize {
        self.entries.iter().filter(|e| e.task_id == task_id).count()
    }

    pub fn task_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.task_id).or_insert(0) += 1;
        }
        m
    }

    /// Clears every entry's running influence statistic.
    pub fn reset_influence(&mut self) {
        for e in &mut self.entries {
            e.influence = InfluenceStat::default();
        }
    }

    fn push(&mut self, entry: MemoryEntry) -> Result<()> {
        if self.entries.len() >= self.capacity {
            return Err(Error::config("memory push beyond capacity"));
        }
        if self.entries.iter().any(|e| e.sample.id == entry.sample.id) {
            return Err(Error::config(format!(
                "example {} is already in memory",
                entry.sample.id
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    fn over_quota(&self, tasks_seen: usize) -> HashSet<usize> {
        self.task_counts()
            .into_iter()
            .filter(|&(task, n)| n > quota(self.capacity, tasks_seen, task))
            .map(|(task, _)| task)
            .collect()
    }

    /// Removes the worst-ranked entry among tasks above quota. Returns the
    /// evicted example id.
    fn pop_worst_over_quota(&mut self, tasks_seen: usize) -> Option<usize> {
        let over = self.over_quota(tasks_seen);
        if over.is_empty() {
            return None;
        }
        let pos = eviction_order(&self.entries)
            .into_iter()
            .find(|&i| over.contains(&self.entries[i].task_id))?;
        Some(self.entries.remove(pos).sample.id)
    }

    /// Influence-aware selection after finishing task `task_id`.
    ///
    /// The task's training data is clustered into `quota` groups on raw
    /// features. Each group lists its members by distance to the centroid,
    /// then is stably ranked by influence (most negative first). For every
    /// group, the worst memory entry of a task above quota is dropped
    /// (highest influence first) and the group's best example is stored.
    pub fn select_rehearsal(
        &mut self,
        new_task_data: &[Candidate],
        task_id: usize,
        seed: u64,
    ) -> Result<SelectionReport> {
        let mut report = SelectionReport::default();
        if new_task_data.is_empty() {
            report.warning = Some(format!("task {task_id}: no new data, memory unchanged"));
            return Ok(report);
        }
        let k = quota(self.capacity, task_id, task_id).min(new_task_data.len());
        let mut picks = Vec::with_capacity(k);
        if k > 0 {
            let feats: Vec<&[f64]> = new_task_data.iter().map(|c| c.sample.features.as_slice()).collect();
            let clustering = kmeans(&feats, k, seed)?;
            for (c, members) in clustering.members().into_iter().enumerate() {
                let centroid = &clustering.centroids[c];
                let mut members: Vec<(usize, f64)> = members
                    .into_iter()
                    .map(|i| {
                        let d: f64 = feats[i].iter().zip(centroid).map(|(a, b)| (a - b).powi(2)).sum();
                        (i, d)
                    })
                    .collect();
                members.sort_by(|a, b| a.1.total_cmp(&b.1));
                members.sort_by(|a, b| {
                    new_task_data[a.0]
                        .influence
                        .rank_value()
                        .total_cmp(&new_task_data[b.0].influence.rank_value())
                });
                picks.push(members[0].0);
            }
        }
        for i in picks {
            if let Some(id) = self.pop_worst_over_quota(task_id) {
                report.evicted.push(id);
            }
            let cand = &new_task_data[i];
            self.push(MemoryEntry::new(cand.sample.clone(), task_id))?;
            report.inserted.push(cand.sample.id);
        }
        while let Some(id) = self.pop_worst_over_quota(task_id) {
            report.evicted.push(id);
        }
        Ok(report)
    }

    /// Random selection baseline with the same quota behavior.
    pub fn select_rehearsal_random(
        &mut self,
        new_task_data: &[Sample],
        task_id: usize,
        seed: u64,
    ) -> Result<SelectionReport> {
        let mut report = SelectionReport::default();
        if new_task_data.is_empty() {
            report.warning = Some(format!("task {task_id}: no new data, memory unchanged"));
            return Ok(report);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (task, count) in self.task_counts() {
            let q = quota(self.capacity, task_id, task);
            if count <= q {
                continue;
            }
            let mut positions: Vec<usize> = (0..self.entries.len())
                .filter(|&i| self.entries[i].task_id == task)
                .collect();
            positions.shuffle(&mut rng);
            let mut drop: Vec<usize> = positions[..count - q].to_vec();
            drop.sort_unstable_by(|a, b| b.cmp(a));
            for pos in drop {
                report.evicted.push(self.entries.remove(pos).sample.id);
            }
        }
        let k = quota(self.capacity, task_id, task_id).min(new_task_data.len());
        let mut chosen = index::sample(&mut rng, new_task_data.len(), k).into_vec();
        chosen.sort_unstable();
        for i in chosen {
            self.push(MemoryEntry::new(new_task_data[i].clone(), task_id))?;
            report.inserted.push(new_task_data[i].id);
        }
        Ok(report)
    }

    /// CSV with header `task_id,label,influence_mean,influence_count,f0,...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let dim = self.entries.first().map_or(0, |e| e.sample.features.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "task_id".to_string(),
            "label".into(),
            "influence_mean".into(),
            "influence_count".into(),
        ];
        header.extend((0..dim).map(|i| format!("f{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for e in &self.entries {
            let mut row = vec![
                e.task_id.to_string(),
                e.sample.label.to_string(),
                e.influence.mean.to_string(),
                e.influence.count.to_string(),
            ];
            row.extend(e.sample.features.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("memory snapshot", e))?;
        Ok(())
    }
}

/// Positions ordered for eviction: highest influence first, ties by
/// insertion order.
fn eviction_order(entries: &[MemoryEntry]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        entries[b]
            .influence
            .rank_value()
            .total_cmp(&entries[a].influence.rank_value())
    });
    order
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::io("csv output", std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: usize, x: f64) -> Sample {
        Sample {
            id,
            features: vec![x, 0.0],
            label: 0,
        }
    }

    fn candidates(ids: std::ops::Range<usize>) -> Vec<Candidate> {
        ids.map(|i| Candidate {
            sample: sample(i, i as f64),
            influence: InfluenceStat::default(),
        })
        .collect()
    }

    #[test]
    fn running_mean() {
        let mut s = InfluenceStat::default();
        s.observe(0.5).unwrap();
        assert_eq!((s.mean, s.count), (0.5, 1));
        let mut s = InfluenceStat::default();
        for x in [1.0, 2.0, 3.0] {
            s.observe(x).unwrap();
        }
        assert_eq!((s.mean, s.count), (2.0, 3));
        assert!(s.observe(f64::NAN).is_err());
        assert_eq!(s.count, 3);
    }

    #[test]
    fn quota_rule() {
        assert_eq!(quota(10, 2, 1), 5);
        assert_eq!(quota(10, 3, 1), 4);
        assert_eq!(quota(10, 3, 2), 3);
        assert_eq!(quota(10, 3, 3), 3);
        assert_eq!(quota(10, 3, 4), 0);
        let total: usize = (1..=7).map(|j| quota(50, 7, j)).sum();
        assert_eq!(total, 50);
    }

    #[test]
    fn first_task_fills_without_eviction() {
        let mut m = MemoryBuffer::new(10);
        let r = m.select_rehearsal(&candidates(0..40), 1, 3).unwrap();
        assert!(r.evicted.is_empty());
        assert_eq!(m.len(), 10);
        assert_eq!(m.count_for_task(1), 10);
    }

    #[test]
    fn second_task_splits_evenly() {
        let mut m = MemoryBuffer::new(10);
        m.select_rehearsal(&candidates(0..40), 1, 3).unwrap();
        let r = m.select_rehearsal(&candidates(100..140), 2, 4).unwrap();
        assert_eq!(r.evicted.len(), 5);
        assert_eq!(m.count_for_task(1), 5);
        assert_eq!(m.count_for_task(2), 5);

        let mut m = MemoryBuffer::new(10);
        let s: Vec<Sample> = (0..40).map(|i| sample(i, 0.0)).collect();
        m.select_rehearsal_random(&s, 1, 1).unwrap();
        let s2: Vec<Sample> = (100..140).map(|i| sample(i, 0.0)).collect();
        m.select_rehearsal_random(&s2, 2, 2).unwrap();
        assert_eq!(m.count_for_task(1), 5);
        assert_eq!(m.count_for_task(2), 5);
    }

    #[test]
    fn eviction_prefers_harmful_entries() {
        let mut m = MemoryBuffer::new(4);
        m.select_rehearsal(&candidates(0..4), 1, 0).unwrap();
        let infl = [0.3, -1.0, 2.0, 0.1];
        for (i, v) in infl.iter().enumerate() {
            m.entry_mut(i).unwrap().update_influence_stat(*v).unwrap();
        }
        let kept_before: Vec<f64> = m.entries().iter().map(|e| e.influence.mean).collect();
        assert_eq!(kept_before.len(), 4);
        m.select_rehearsal(&candidates(10..14), 2, 0).unwrap();
        let kept: Vec<f64> = m
            .entries()
            .iter()
            .filter(|e| e.task_id == 1)
            .map(|e| e.influence.mean)
            .collect();
        let mut kept = kept;
        kept.sort_by(f64::total_cmp);
        assert_eq!(kept, vec![-1.0, 0.1]);
    }

    #[test]
    fn best_influence_is_stored_per_cluster() {
        // one cluster: the most negative influence wins regardless of position
        let mut c = candidates(0..6);
        c[4].influence.observe(-3.0).unwrap();
        c[2].influence.observe(-1.0).unwrap();
        let mut m = MemoryBuffer::new(1);
        m.select_rehearsal(&c, 1, 9).unwrap();
        assert_eq!(m.entries()[0].sample.id, 4);
    }

    #[test]
    fn empty_new_data_is_a_noop_with_warning() {
        let mut m = MemoryBuffer::new(5);
        let r = m.select_rehearsal(&[], 1, 0).unwrap();
        assert!(r.warning.is_some());
        let r = m.select_rehearsal_random(&[], 1, 0).unwrap();
        assert!(r.warning.is_some());
        assert!(m.is_empty());
    }

    #[test]
    fn random_first_task_with_room_takes_everything() {
        let mut m = MemoryBuffer::new(50);
        let s: Vec<Sample> = (0..30).map(|i| sample(i, i as f64)).collect();
        m.select_rehearsal_random(&s, 1, 5).unwrap();
        let mut ids: Vec<usize> = m.entries().iter().map(|e| e.sample.id).collect();
        ids.sort();
        assert_eq!(ids, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn snapshot_csv_header() {
        let mut m = MemoryBuffer::new(2);
        m.select_rehearsal_random(&[sample(0, 1.5)], 1, 0).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "task_id,label,influence_mean,influence_count,f0,f1\n1,0,0,0,1.5,0\n");
    }
}
