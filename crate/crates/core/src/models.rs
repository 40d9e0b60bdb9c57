//! Multilayer perceptron classifiers with a single shared output head.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Batch, Model, NodeId, ParamLayout, ParamVector, Scalar, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Empty for a linear softmax (multinomial logistic) model.
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes_total: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes_total == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config(format!(
                "model dimensions must all be at least 1: {self:?}"
            )));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.num_classes_total);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Parameter count `q`.
    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    spec: ModelSpec,
    layout: Arc<ParamLayout>,
}

impl Mlp {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layout = ParamLayout::new(spec.layer_dims().into_iter().enumerate().flat_map(
            |(l, (i, o))| [(format!("w{l}"), vec![i, o]), (format!("b{l}"), vec![o])],
        ));
        Ok(Mlp {
            spec,
            layout: Arc::new(layout),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout.clone());
        let segs = self.layout.segments().to_vec();
        for seg in segs.iter().filter(|s| s.name.starts_with('w')) {
            let (fan_in, fan_out) = (seg.shape[0], seg.shape[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut p.values_mut()[seg.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    fn record_logits<S: Scalar>(&self, tape: &mut Tape<S>, params: NodeId, inputs: &Tensor) -> Result<NodeId> {
        if inputs.shape().len() != 2 || inputs.cols() != self.spec.input_dim {
            return Err(Error::config(format!(
                "inputs of shape {:?} do not fit a model with input_dim {}",
                inputs.shape(),
                self.spec.input_dim
            )));
        }
        let mut h = tape.constant(inputs);
        let layers = self.spec.layer_dims();
        for (l, (i, o)) in layers.iter().copied().enumerate() {
            let w = self.layout.segment(&format!("w{l}")).expect("layout built from dims");
            let b = self.layout.segment(&format!("b{l}")).expect("layout built from dims");
            let wn = tape.slice(params, w.offset, vec![i, o])?;
            let bn = tape.slice(params, b.offset, vec![o])?;
            let z = tape.matmul(h, wn)?;
            h = tape.add_row_bias(z, bn)?;
            if l + 1 < layers.len() {
                h = match self.spec.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        Ok(h)
    }

    /// Output scores `[n, num_classes_total]`.
    pub fn logits(&self, params: &ParamVector, inputs: &Tensor) -> Result<Tensor> {
        if params.len() != self.layout.len() {
            return Err(Error::config("parameter vector does not match the model"));
        }
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.constant_values(vec![params.len()], params.values().to_vec())?;
        let z = self.record_logits(&mut tape, p, inputs)?;
        Tensor::new(tape.shape(z).to_vec(), tape.value(z).to_vec())
    }
}

impl Model for Mlp {
    fn layout(&self) -> Arc<ParamLayout> {
        self.layout.clone()
    }

    fn record_losses<S: Scalar>(&self, tape: &mut Tape<S>, params: NodeId, batch: &Batch) -> Result<NodeId> {
        let z = self.record_logits(tape, params, batch.inputs())?;
        tape.softmax_cross_entropy(z, batch.labels())
    }
}

/// `ℓ(x, θ) = ½(θ − x)²` with a single parameter and one input feature.
/// Labels are ignored.
#[derive(Clone, Debug)]
pub struct ScalarQuadratic {
    layout: Arc<ParamLayout>,
}

/// `ℓ(x, θ) = x·θ` with a single parameter and one input feature.
/// Labels are ignored.
#[derive(Clone, Debug)]
pub struct ScalarLinear {
    layout: Arc<ParamLayout>,
}

fn scalar_layout() -> Arc<ParamLayout> {
    Arc::new(ParamLayout::new([("theta", vec![1])]))
}

impl Default for ScalarQuadratic {
    fn default() -> Self {
        ScalarQuadratic { layout: scalar_layout() }
    }
}

impl Default for ScalarLinear {
    fn default() -> Self {
        ScalarLinear { layout: scalar_layout() }
    }
}

fn scalar_inputs<S: Scalar>(tape: &mut Tape<S>, params: NodeId, batch: &Batch) -> Result<(NodeId, NodeId)> {
    if batch.dim() != 1 {
        return Err(Error::config("scalar models take one input feature"));
    }
    let theta = tape.slice(params, 0, vec![1, 1])?;
    let x = tape.constant(batch.inputs());
    Ok((theta, x))
}

impl Model for ScalarQuadratic {
    fn layout(&self) -> Arc<ParamLayout> {
        self.layout.clone()
    }

    fn record_losses<S: Scalar>(&self, tape: &mut Tape<S>, params: NodeId, batch: &Batch) -> Result<NodeId> {
        let (theta, x) = scalar_inputs(tape, params, batch)?;
        let ones = tape.constant(&Tensor::new(vec![batch.len(), 1], vec![1.0; batch.len()])?);
        let t = tape.matmul(ones, theta)?;
        let d = tape.sub(t, x)?;
        let sq = tape.mul(d, d)?;
        let half = tape.scale(sq, 0.5);
        tape.slice(half, 0, vec![batch.len()])
    }
}

impl Model for ScalarLinear {
    fn layout(&self) -> Arc<ParamLayout> {
        self.layout.clone()
    }

    fn record_losses<S: Scalar>(&self, tape: &mut Tape<S>, params: NodeId, batch: &Batch) -> Result<NodeId> {
        let (theta, x) = scalar_inputs(tape, params, batch)?;
        let z = tape.matmul(x, theta)?;
        tape.slice(z, 0, vec![batch.len()])
    }
}
