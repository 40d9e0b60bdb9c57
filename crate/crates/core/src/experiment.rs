//! Multi-seed, multi-method experiment runs and their on-disk reports.
//!
//! Layout under the output directory:
//!
//! ```text
//! <method>/seed_<seed>/metrics.csv            metric,value
//! <method>/seed_<seed>/metrics.json
//! <method>/seed_<seed>/acc_matrix.csv         after_task,task,accuracy
//! <method>/seed_<seed>/influence_log.csv      step,current_task,example_id,task_id,i_s,i_p,i_fused,gamma_star
//! <method>/seed_<seed>/influence_hist.csv     task,category,label,lower,upper,count
//! <method>/seed_<seed>/memory_snapshot_task<t>.csv
//! metrics.csv                                 method,metric,mean,std_population,runs
//! metrics.json
//! spec.json
//! run_metadata.json                           timestamps; the only file that differs between reruns
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::fmt::Write as _;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentSpec;
use crate::error::{Error, Result};
use crate::influence::InfluenceLog;
use crate::memory::csv_err;
use crate::metrics::MetricsReport;
use crate::stats::{influence_stats, write_histogram_csv};
use crate::trainer::{run_stream, Method, RunOutput, TrainConfig};

pub const METRIC_NAMES: [&str; 6] = ["a1", "a_inf", "am", "bwt", "stability", "plasticity"];

fn metric_values(m: &MetricsReport) -> [Option<f64>; 6] {
    [m.a1, Some(m.a_inf), m.am, m.bwt, m.stability, m.plasticity]
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn run_dir(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join(method.name()).join(format!("seed_{seed}"))
}

/// Writes every per-run artifact into `dir`.
pub fn write_run_artifacts(dir: &Path, run: &RunOutput) -> Result<()> {
    mkdir(dir)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("metrics.csv"))?);
    w.write_record(["metric", "value"]).map_err(csv_err)?;
    for (name, v) in METRIC_NAMES.iter().zip(metric_values(&run.metrics)) {
        w.write_record([name.to_string(), v.map(|x| x.to_string()).unwrap_or_default()])
            .map_err(csv_err)?;
    }
    w.write_record(["bwt_undefined".to_string(), run.metrics.bwt_undefined.to_string()])
        .map_err(csv_err)?;
    w.flush().map_err(|e| Error::io("metrics.csv", e))?;

    let json = serde_json::to_string_pretty(&run.metrics).expect("metrics serialize");
    write_text(&dir.join("metrics.json"), &json)?;
    run.acc.write_csv(create(&dir.join("acc_matrix.csv"))?)?;

    let mut log = InfluenceLog::new(create(&dir.join("influence_log.csv"))?)?;
    for r in &run.records {
        log.write(r.step, r.task, &r.record)?;
    }
    log.finish()?;
    write_histogram_csv(create(&dir.join("influence_hist.csv"))?, &influence_stats(&run.records))?;
    for (t, mem) in &run.memory_snapshots {
        mem.write_csv(create(&dir.join(format!("memory_snapshot_task{t}.csv")))?)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub runs: usize,
}

/// method name -> metric name -> summary
pub type Aggregate = BTreeMap<String, BTreeMap<String, MetricSummary>>;

pub fn summarize(values: &[f64]) -> Option<MetricSummary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(MetricSummary {
        mean,
        std: var.sqrt(),
        runs: values.len(),
    })
}

/// Aggregates per-run metrics by method, in the order given.
pub fn aggregate(runs: &[(Method, MetricsReport)]) -> Aggregate {
    let mut out = Aggregate::new();
    let methods: Vec<Method> = runs.iter().map(|(m, _)| *m).collect();
    for m in Method::ALL.into_iter().filter(|m| methods.contains(m)) {
        let mut per_metric = BTreeMap::new();
        for (i, name) in METRIC_NAMES.iter().enumerate() {
            let vals: Vec<f64> = runs
                .iter()
                .filter(|(rm, _)| *rm == m)
                .filter_map(|(_, r)| metric_values(r)[i])
                .collect();
            if let Some(s) = summarize(&vals) {
                per_metric.insert(name.to_string(), s);
            }
        }
        out.insert(m.name().to_string(), per_metric);
    }
    out
}

pub fn write_aggregate(out: &Path, agg: &Aggregate) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(&out.join("metrics.csv"))?);
    w.write_record(["method", "metric", "mean", "std_population", "runs"])
        .map_err(csv_err)?;
    for (method, metrics) in agg {
        for name in METRIC_NAMES {
            if let Some(s) = metrics.get(name) {
                w.write_record([
                    method.clone(),
                    name.to_string(),
                    s.mean.to_string(),
                    s.std.to_string(),
                    s.runs.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("metrics.csv", e))?;
    let json = serde_json::to_string_pretty(agg).expect("aggregate serializes");
    write_text(&out.join("metrics.json"), &json)
}

fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub aggregate: Aggregate,
    pub runs: Vec<(Method, u64, MetricsReport)>,
    pub warnings: Vec<String>,
}

/// Runs every method for every seed, writing per-run artifacts as each
/// run completes and the aggregate at the end.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let out = &spec.output_dir;
    mkdir(out)?;
    let started = unix_seconds();
    write_text(&out.join("spec.json"), &spec.to_json())?;
    let mut runs = Vec::new();
    let mut warnings = Vec::new();
    for method in spec.methods() {
        for &seed in &spec.seeds {
            let stream = spec.stream.build(seed)?.with_setting(spec.train.setting);
            let model = spec.model.build(&stream)?;
            let cfg = TrainConfig {
                method,
                seed,
                ..spec.train.clone()
            };
            let run = run_stream(&stream, &model, &cfg)?;
            write_run_artifacts(&run_dir(out, method, seed), &run)?;
            warnings.extend(run.warnings.iter().map(|w| format!("{method} seed {seed}: {w}")));
            runs.push((method, seed, run.metrics));
        }
    }
    let pairs: Vec<(Method, MetricsReport)> = runs.iter().map(|(m, _, r)| (*m, r.clone())).collect();
    let agg = aggregate(&pairs);
    write_aggregate(out, &agg)?;
    let meta = serde_json::json!({
        "started_unix": started,
        "finished_unix": unix_seconds(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_text(&out.join("run_metadata.json"), &serde_json::to_string_pretty(&meta).expect("json"))?;
    Ok(ExperimentResult {
        aggregate: agg,
        runs,
        warnings,
    })
}

/// Rebuilds the aggregate from the per-run `metrics.json` files under `out`.
pub fn report(out: &Path) -> Result<Aggregate> {
    let mut runs = Vec::new();
    for method in Method::ALL {
        let dir = out.join(method.name());
        if !dir.is_dir() {
            continue;
        }
        let mut seeds: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("metrics.json").is_file())
            .collect();
        seeds.sort();
        for s in seeds {
            let path = s.join("metrics.json");
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let m: MetricsReport = serde_json::from_str(&text).map_err(|e| Error::Input {
                path: path.clone(),
                line: e.line(),
                message: e.to_string(),
            })?;
            runs.push((method, m));
        }
    }
    if runs.is_empty() {
        return Err(Error::config(format!("no per-run metrics found under {}", out.display())));
    }
    let agg = aggregate(&runs);
    write_aggregate(out, &agg)?;
    Ok(agg)
}

/// Plain-text comparison table of the aggregate.
pub fn format_table(agg: &Aggregate) -> String {
    let mut s = format!("{:<14}", "method");
    for name in METRIC_NAMES {
        let _ = write!(s, " {name:>17}");
    }
    s.push('\n');
    for (method, metrics) in agg {
        let _ = write!(s, "{method:<14}");
        for name in METRIC_NAMES {
            let cell = metrics
                .get(name)
                .map(|m| format!("{:.2} ± {:.2}", m.mean, m.std))
                .unwrap_or_else(|| "-".into());
            let _ = write!(s, " {cell:>17}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report_with(a_inf: f64) -> MetricsReport {
        MetricsReport {
            num_tasks: 2,
            a1: Some(90.0),
            a_inf,
            am: Some(80.0),
            bwt: Some(2.0 * (a_inf - 90.0)),
            bwt_undefined: false,
            stability: None,
            plasticity: None,
        }
    }

    #[test]
    fn aggregate_mean_and_population_std() {
        let vals = [70.0, 72.0, 75.0, 71.5, 69.25];
        let runs: Vec<(Method, MetricsReport)> = vals.iter().map(|&v| (Method::Er, report_with(v))).collect();
        let agg = aggregate(&runs);
        let s = &agg["er"]["a_inf"];
        let mean = vals.iter().sum::<f64>() / 5.0;
        assert!((s.mean - mean).abs() <= 1e-12);
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!((s.std - var.sqrt()).abs() <= 1e-12);
        assert_eq!(s.runs, 5);
        assert!(!agg["er"].contains_key("stability"));
    }

    #[test]
    fn table_lists_each_method() {
        let runs: Vec<(Method, MetricsReport)> = Method::ALL.iter().map(|&m| (m, report_with(70.0))).collect();
        let t = format_table(&aggregate(&runs));
        assert_eq!(t.lines().count(), 6);
        assert!(t.contains("metasp_rehsel"));
    }
}
