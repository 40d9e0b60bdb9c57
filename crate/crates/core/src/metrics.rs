//! Accuracy bookkeeping across a task sequence and the summary metrics
//! derived from it.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::csv_err;

/// `r[t][k]`: accuracy (%) on task `k + 1` after training task `t + 1`.
/// Task indices in the accessors are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    r: Vec<Vec<Option<f64>>>,
    pre: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        AccuracyMatrix {
            r: (1..=num_tasks).map(|t| vec![None; t]).collect(),
            pre: vec![None; num_tasks],
        }
    }

    /// A fully populated matrix from its lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::config(format!(
                    "accuracy row {} has {} entries, expected {}",
                    t + 1,
                    row.len(),
                    t + 1
                )));
            }
            for (k, v) in row.into_iter().enumerate() {
                m.set(t + 1, k + 1, v)?;
            }
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.r.len()
    }

    fn check(&self, t: usize, k: usize) -> Result<()> {
        if t == 0 || k == 0 || k > t || t > self.r.len() {
            return Err(Error::config(format!(
                "accuracy cell ({t}, {k}) outside the lower triangle of a {}-task matrix",
                self.r.len()
            )));
        }
        Ok(())
    }

    pub fn set(&mut self, t: usize, k: usize, accuracy: f64) -> Result<()> {
        self.check(t, k)?;
        if !(0.0..=100.0).contains(&accuracy) {
            return Err(Error::Evaluation(format!("accuracy {accuracy} outside [0, 100]")));
        }
        self.r[t - 1][k - 1] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, t: usize, k: usize) -> Option<f64> {
        self.check(t, k).ok()?;
        self.r[t - 1][k - 1]
    }

    /// Accuracy on task `t` measured just before training it.
    pub fn set_pre(&mut self, t: usize, accuracy: f64) -> Result<()> {
        self.check(t, t)?;
        if !(0.0..=100.0).contains(&accuracy) {
            return Err(Error::Evaluation(format!("accuracy {accuracy} outside [0, 100]")));
        }
        self.pre[t - 1] = Some(accuracy);
        Ok(())
    }

    pub fn pre(&self, t: usize) -> Option<f64> {
        self.pre.get(t.checked_sub(1)?).copied().flatten()
    }

    fn row(&self, t: usize) -> Option<Vec<f64>> {
        self.r[t - 1].iter().copied().collect()
    }

    /// Long-format CSV with header `after_task,task,accuracy`; unset cells
    /// are skipped.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["after_task", "task", "accuracy"]).map_err(csv_err)?;
        for (t, row) in self.r.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    w.write_record([(t + 1).to_string(), (k + 1).to_string(), v.to_string()])
                        .map_err(csv_err)?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("accuracy matrix", e))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_tasks: usize,
    /// Mean accuracy of each task right after training it.
    pub a1: Option<f64>,
    /// Mean final accuracy.
    pub a_inf: f64,
    /// Mean over tasks of the average accuracy on all tasks seen so far.
    pub am: Option<f64>,
    pub bwt: Option<f64>,
    /// Set for a single task, where BWT is reported as 0.
    pub bwt_undefined: bool,
    /// Mean over old tasks of `r[T][k] − r[k][k]`.
    pub stability: Option<f64>,
    /// Mean over tasks of `r[t][t]` minus the pre-training accuracy.
    pub plasticity: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Summary metrics. Only the final row is required; quantities that need
/// the full triangle are `None` when it is incomplete.
pub fn compute_metrics(acc: &AccuracyMatrix) -> Result<MetricsReport> {
    let t_max = acc.num_tasks();
    if t_max == 0 {
        return Err(Error::Evaluation("empty accuracy matrix".into()));
    }
    let last = acc
        .row(t_max)
        .ok_or_else(|| Error::Evaluation("final accuracy row is incomplete".into()))?;
    let a_inf = mean(&last);
    let rows: Option<Vec<Vec<f64>>> = (1..=t_max).map(|t| acc.row(t)).collect();
    let (a1, am, stability) = match &rows {
        Some(rows) => {
            let diag: Vec<f64> = rows.iter().enumerate().map(|(t, r)| r[t]).collect();
            let am = mean(&rows.iter().map(|r| mean(r)).collect::<Vec<_>>());
            let stability = (t_max > 1).then(|| {
                mean(&(0..t_max - 1).map(|k| last[k] - diag[k]).collect::<Vec<_>>())
            });
            (Some(mean(&diag)), Some(am), stability)
        }
        None => (None, None, None),
    };
    let bwt_undefined = t_max == 1;
    let bwt = a1.map(|a1| {
        if bwt_undefined {
            0.0
        } else {
            t_max as f64 / (t_max - 1) as f64 * (a_inf - a1)
        }
    });
    let plasticity = rows.as_ref().and_then(|rows| {
        let gains: Option<Vec<f64>> = (1..=t_max)
            .map(|t| acc.pre(t).map(|p| rows[t - 1][t - 1] - p))
            .collect();
        gains.map(|g| mean(&g))
    });
    Ok(MetricsReport {
        num_tasks: t_max,
        a1,
        a_inf,
        am,
        bwt,
        bwt_undefined,
        stability,
        plasticity,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SPQuantities {
    pub s_value: f64,
    pub p_value: f64,
}

/// Stability of task `k` after task `t` and plasticity on task `t`.
pub fn sp_quantities(acc: &AccuracyMatrix, t: usize, k: usize) -> Result<SPQuantities> {
    if k == 0 || k >= t {
        return Err(Error::config(format!("stability needs k < t, got k = {k}, t = {t}")));
    }
    let cell = |a: usize, b: usize| {
        acc.get(a, b)
            .ok_or_else(|| Error::Evaluation(format!("accuracy ({a}, {b}) not recorded")))
    };
    let pre = acc
        .pre(t)
        .ok_or_else(|| Error::Evaluation(format!("pre-task accuracy of task {t} not recorded")))?;
    Ok(SPQuantities {
        s_value: cell(t, k)? - cell(k, k)?,
        p_value: cell(t, t)? - pre,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_task_hand_values() {
        let m = AccuracyMatrix::from_rows(vec![vec![90.0], vec![70.0, 80.0]]).unwrap();
        let r = compute_metrics(&m).unwrap();
        assert_eq!(r.a1, Some(85.0));
        assert_eq!(r.a_inf, 75.0);
        assert_eq!(r.am, Some(82.5));
        assert_eq!(r.bwt, Some(-20.0));
        assert_eq!(r.stability, Some(-20.0));
        assert_eq!(r.plasticity, None);
    }

    #[test]
    fn perfect_matrix() {
        let rows = (1..=4).map(|t| vec![100.0; t]).collect();
        let r = compute_metrics(&AccuracyMatrix::from_rows(rows).unwrap()).unwrap();
        assert_eq!((r.a1, r.a_inf, r.am, r.bwt), (Some(100.0), 100.0, Some(100.0), Some(0.0)));
    }

    #[test]
    fn single_task_flags_bwt() {
        let r = compute_metrics(&AccuracyMatrix::from_rows(vec![vec![64.0]]).unwrap()).unwrap();
        assert_eq!((r.a1, r.a_inf, r.am), (Some(64.0), 64.0, Some(64.0)));
        assert!(r.bwt_undefined);
        assert_eq!(r.bwt, Some(0.0));
    }

    #[test]
    fn final_row_only() {
        let mut m = AccuracyMatrix::new(3);
        for k in 1..=3 {
            m.set(3, k, 60.0 + k as f64).unwrap();
        }
        let r = compute_metrics(&m).unwrap();
        assert_eq!(r.a_inf, 62.0);
        assert_eq!((r.a1, r.am, r.bwt), (None, None, None));
        assert!(compute_metrics(&AccuracyMatrix::new(2)).is_err());
    }

    #[test]
    fn cells_are_range_checked() {
        let mut m = AccuracyMatrix::new(2);
        assert!(m.set(1, 2, 50.0).is_err());
        assert!(m.set(2, 1, 100.5).is_err());
        assert!(m.set(3, 1, 50.0).is_err());
    }

    #[test]
    fn sp_cases() {
        let mut m = AccuracyMatrix::from_rows(vec![vec![95.0], vec![80.0, 90.0]]).unwrap();
        m.set_pre(2, 50.0).unwrap();
        let sp = sp_quantities(&m, 2, 1).unwrap();
        assert_eq!(sp.s_value, -15.0);
        assert_eq!(sp.p_value, 40.0);
        assert!(sp_quantities(&m, 2, 2).is_err());
        let same = AccuracyMatrix::from_rows(vec![vec![95.0], vec![95.0, 90.0]]).unwrap();
        let mut same = same;
        same.set_pre(2, 0.0).unwrap();
        assert_eq!(sp_quantities(&same, 2, 1).unwrap().s_value, 0.0);
    }

    #[test]
    fn csv_layout() {
        let m = AccuracyMatrix::from_rows(vec![vec![90.0], vec![70.0, 80.5]]).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "after_task,task,accuracy\n1,1,90\n2,1,70\n2,2,80.5\n"
        );
    }

    fn triangle() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..8).prop_flat_map(|t| {
            (1..=t)
                .map(|k| prop::collection::vec(0.0..=100.0f64, k))
                .collect::<Vec<_>>()
        })
    }

    proptest! {
        #[test]
        fn bwt_identity(rows in triangle()) {
            let t = rows.len() as f64;
            let r = compute_metrics(&AccuracyMatrix::from_rows(rows).unwrap()).unwrap();
            let expect = t / (t - 1.0) * (r.a_inf - r.a1.unwrap());
            prop_assert!((r.bwt.unwrap() - expect).abs() <= 1e-9);
            prop_assert!((0.0..=100.0).contains(&r.am.unwrap()));
        }
    }
}
