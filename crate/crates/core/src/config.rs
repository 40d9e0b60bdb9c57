//! Experiment description: stream generator, model shape, training
//! configuration, seeds and output location, as one strict JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{make_split_digits, make_split_gaussians, TaskStream};
use crate::error::{Error, Result};
use crate::models::{Activation, Mlp, ModelSpec};
use crate::trainer::{Method, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamSpec {
    SplitGaussians {
        num_tasks: usize,
        classes_per_task: usize,
        dim: usize,
        train_per_task: usize,
        test_per_task: usize,
        separation: f64,
        /// Fixed data seed; when absent each run uses its own seed.
        #[serde(default)]
        data_seed: Option<u64>,
    },
    SplitDigits {
        num_tasks: usize,
        path: PathBuf,
        #[serde(default)]
        data_seed: Option<u64>,
    },
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            StreamSpec::SplitGaussians {
                num_tasks,
                classes_per_task,
                dim,
                train_per_task,
                test_per_task,
                separation,
                ..
            } => {
                if [*num_tasks, *classes_per_task, *dim, *train_per_task, *test_per_task].contains(&0) {
                    return Err(Error::config("stream sizes must all be at least 1"));
                }
                if !(separation.is_finite() && *separation > 0.0) {
                    return Err(Error::config(format!("separation must be > 0, got {separation}")));
                }
            }
            StreamSpec::SplitDigits { num_tasks, .. } => {
                if *num_tasks == 0 {
                    return Err(Error::config("num_tasks must be at least 1"));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self, run_seed: u64) -> Result<TaskStream> {
        match self {
            StreamSpec::SplitGaussians {
                num_tasks,
                classes_per_task,
                dim,
                train_per_task,
                test_per_task,
                separation,
                data_seed,
            } => make_split_gaussians(
                *num_tasks,
                *classes_per_task,
                *dim,
                *train_per_task,
                *test_per_task,
                *separation,
                data_seed.unwrap_or(run_seed),
            ),
            StreamSpec::SplitDigits {
                num_tasks,
                path,
                data_seed,
            } => make_split_digits(*num_tasks, data_seed.unwrap_or(run_seed), path),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl ModelConfig {
    /// Input width and class count come from the stream.
    pub fn build(&self, stream: &TaskStream) -> Result<Mlp> {
        Mlp::new(ModelSpec {
            input_dim: stream.input_dim(),
            hidden_dims: self.hidden_dims.clone(),
            num_classes_total: stream.num_classes(),
            activation: self.activation,
        })
    }
}

fn default_seeds() -> Vec<u64> {
    (1231..=1235).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub stream: StreamSpec,
    pub model: ModelConfig,
    /// `train.seed` is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    /// Methods to compare; defaults to `train.method` alone.
    #[serde(default)]
    pub methods: Option<Vec<Method>>,
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if matches!(&self.methods, Some(m) if m.is_empty()) {
            return Err(Error::config("methods must not be empty"));
        }
        self.stream.validate()?;
        if self.model.hidden_dims.contains(&0) {
            return Err(Error::config("model.hidden_dims entries must be at least 1"));
        }
        for m in self.methods() {
            let cfg = TrainConfig {
                method: m,
                ..self.train.clone()
            };
            cfg.validate()?;
        }
        Ok(())
    }

    pub fn methods(&self) -> Vec<Method> {
        self.methods.clone().unwrap_or_else(|| vec![self.train.method])
    }

    /// Serializes to pretty JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}

/// Five two-class split-Gaussian tasks in 16 dimensions, a 32-unit ReLU
/// network, a 50-example buffer, all five methods over the default seeds.
pub fn toy_spec(output_dir: impl Into<PathBuf>) -> ExperimentSpec {
    ExperimentSpec {
        stream: StreamSpec::SplitGaussians {
            num_tasks: 5,
            classes_per_task: 2,
            dim: 16,
            train_per_task: 500,
            test_per_task: 200,
            separation: 3.0,
            data_seed: None,
        },
        model: ModelConfig {
            hidden_dims: vec![32],
            activation: Activation::Relu,
        },
        train: TrainConfig {
            lr: 0.05,
            batch_size: 32,
            epochs_per_task: 50,
            metasp_last_epochs: 5,
            pseudo_iterations: 1,
            method: Method::Er,
            setting: crate::data::Setting::ClassIncremental,
            buffer_capacity: 50,
            val_batch_sizes: (32, 32),
            seed: 0,
        },
        methods: Some(Method::ALL.to_vec()),
        output_dir: output_dir.into(),
        seeds: default_seeds(),
    }
}

fn from_value(value: Value, source: &str) -> Result<ExperimentSpec> {
    let spec: ExperimentSpec = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::config(format!("{source}: at `{path}`: {}", e.into_inner()))
    })?;
    spec.validate()?;
    Ok(spec)
}

/// Strict parse and validation of a JSON experiment description.
pub fn parse_config_str(text: &str, source: &str) -> Result<ExperimentSpec> {
    let value: Value = serde_json::from_str(text).map_err(|e| {
        Error::Input {
            path: source.into(),
            line: e.line(),
            message: e.to_string(),
        }
    })?;
    from_value(value, source)
}

pub fn parse_config(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, &path.display().to_string())
}

/// Applies `key.path=value` overrides and re-validates. Values are read as
/// JSON when they parse, otherwise as plain strings.
pub fn apply_overrides(spec: &ExperimentSpec, overrides: &[(String, String)]) -> Result<ExperimentSpec> {
    let mut value = serde_json::to_value(spec).expect("spec serializes");
    for (key, raw) in overrides {
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        let mut cursor = &mut value;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = cursor
                .as_object_mut()
                .ok_or_else(|| Error::config(format!("override `{key}`: `{part}` is not inside an object")))?;
            if i + 1 == parts.len() {
                obj.insert((*part).to_string(), parsed.clone());
                break;
            }
            cursor = obj
                .get_mut(*part)
                .ok_or_else(|| Error::config(format!("override `{key}`: unknown key `{part}`")))?;
        }
    }
    from_value(value, "overrides")
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "stream": {"generator": "split_gaussians", "num_tasks": 5, "classes_per_task": 2, "dim": 16,
                   "train_per_task": 500, "test_per_task": 200, "separation": 3.0},
        "model": {"hidden_dims": [32], "activation": "relu"},
        "train": {"lr": 0.05, "method": "er", "setting": "class_incremental", "buffer_capacity": 50},
        "output_dir": "out"
    }"#;

    #[test]
    fn defaults_are_filled() {
        let s = parse_config_str(BASE, "base").unwrap();
        assert_eq!(s.seeds, vec![1231, 1232, 1233, 1234, 1235]);
        assert_eq!(s.train.batch_size, 32);
        assert_eq!(s.train.epochs_per_task, 50);
        assert_eq!(s.train.metasp_last_epochs, 5);
        assert_eq!(s.train.pseudo_iterations, 1);
        assert_eq!(s.methods(), vec![Method::Er]);
    }

    #[test]
    fn missing_buffer_capacity_is_named() {
        let text = BASE.replace(r#", "buffer_capacity": 50"#, "");
        let e = parse_config_str(&text, "cfg").unwrap_err().to_string();
        assert!(e.contains("buffer_capacity"), "{e}");
    }

    #[test]
    fn unknown_keys_and_bad_types_are_rejected() {
        let e = parse_config_str(&BASE.replace("\"lr\"", "\"learning_rate\""), "cfg").unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        let e = parse_config_str(&BASE.replace("0.05", "\"fast\""), "cfg").unwrap_err().to_string();
        assert!(e.contains("train.lr"), "{e}");
        assert!(parse_config_str("{ not json", "cfg").is_err());
    }

    #[test]
    fn window_longer_than_task_is_a_range_error() {
        let s = parse_config_str(BASE, "base").unwrap();
        let e = apply_overrides(&s, &[("train.metasp_last_epochs".into(), "60".into())]).unwrap_err();
        assert!(e.to_string().contains("metasp_last_epochs"), "{e}");
    }

    #[test]
    fn toy_spec_is_valid() {
        let s = toy_spec("out");
        s.validate().unwrap();
        assert_eq!(s.methods().len(), 5);
        assert_eq!(parse_config_str(&s.to_json(), "toy").unwrap(), s);
    }

    #[test]
    fn round_trip() {
        let s = parse_config_str(BASE, "base").unwrap();
        assert_eq!(parse_config_str(&s.to_json(), "again").unwrap(), s);
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let s = parse_config_str(BASE, "base").unwrap();
        let o = apply_overrides(
            &s,
            &[
                ("train.method".into(), "metasp".into()),
                ("seeds".into(), "[7]".into()),
                ("output_dir".into(), "elsewhere".into()),
            ],
        )
        .unwrap();
        assert_eq!(o.train.method, Method::Metasp);
        assert_eq!(o.seeds, vec![7]);
        assert_eq!(o.output_dir, PathBuf::from("elsewhere"));
        assert!(apply_overrides(&s, &[("train.nope".into(), "1".into())]).is_err());
        assert!(apply_overrides(&s, &[("nothing.here".into(), "1".into())]).is_err());
    }
}
