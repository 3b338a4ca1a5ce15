//! Small feed-forward models with hand-written backpropagation.
//!
//! Activations are laid out one sample per column: a layer maps an
//! `in x B` matrix to an `out x B` matrix. Party models turn a `B x D_m`
//! feature block into a `P_m x B` embedding batch; the server model turns the
//! stacked `P x B` embeddings into `C x B` logits.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::linalg::Matrix;
use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_width(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, input: &Matrix) -> Result<Matrix> {
        let mut z = self.weight.matmul(input)?;
        let cols = z.cols();
        for (r, b) in self.bias.iter().enumerate() {
            for v in &mut z.data_mut()[r * cols..(r + 1) * cols] {
                *v = self.activation.apply(*v + b);
            }
        }
        Ok(z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

/// Per-layer gradients, congruent with an [`MlpModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGradient>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Activations recorded during a forward pass: entry 0 is the input,
/// entry `l + 1` the output of layer `l`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("trace holds the input at least")
    }
}

impl MlpModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_width() {
                return Err(Error::shape(
                    "layer bias",
                    l.weight.shape(),
                    (l.bias.len(), 1),
                ));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.input_width() != l.output_width() {
                    return Err(Error::shape(
                        "layer chain",
                        l.weight.shape(),
                        next.weight.shape(),
                    ));
                }
            }
            let finite = l.weight.first_non_finite().is_none() && l.bias.iter().all(|b| b.is_finite());
            if !finite {
                return Err(Error::NonFinite {
                    what: "layer parameters",
                    index: i,
                });
            }
        }
        Ok(MlpModel { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output_width()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer: weights row-major, then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`MlpModel::params`].
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(
                "set_params",
                (self.param_count(), 1),
                (flat.len(), 1),
            ));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn with_params(&self, flat: &[f64]) -> Result<MlpModel> {
        let mut m = self.clone();
        m.set_params(flat)?;
        Ok(m)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.first_non_finite().is_none() && l.bias.iter().all(|b| b.is_finite())
        })
    }

    /// Forward pass on column-major samples (`in x B`).
    pub fn forward_trace(&self, input: &Matrix) -> Result<ForwardTrace> {
        if input.rows() != self.input_width() {
            return Err(Error::shape(
                "forward",
                (self.output_width(), self.input_width()),
                input.shape(),
            ));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for l in &self.layers {
            let next = l.forward(activations.last().unwrap())?;
            activations.push(next);
        }
        Ok(ForwardTrace { activations })
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        let mut a = input.clone();
        if a.rows() != self.input_width() {
            return Err(Error::shape(
                "forward",
                (self.output_width(), self.input_width()),
                input.shape(),
            ));
        }
        for l in &self.layers {
            a = l.forward(&a)?;
        }
        Ok(a)
    }

    /// Backpropagates `upstream` (gradient w.r.t. the model output) through a
    /// recorded trace. Returns parameter gradients and the gradient w.r.t.
    /// the model input.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &Matrix) -> Result<(GradientSet, Matrix)> {
        if upstream.shape() != trace.output().shape() {
            return Err(Error::shape("backward", trace.output().shape(), upstream.shape()));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let out = &trace.activations[i + 1];
            for (d, &a) in delta.data_mut().iter_mut().zip(out.data()) {
                *d *= l.activation.derivative_from_output(a);
            }
            let prev = &trace.activations[i];
            let weight = delta.matmul_t(prev)?;
            let bias = delta.row_sums();
            let next_delta = l.weight.t_matmul(&delta)?;
            grads.push(LayerGradient { weight, bias });
            delta = next_delta;
        }
        grads.reverse();
        Ok((GradientSet { layers: grads }, delta))
    }

    /// `theta -= step * grad`
    pub fn apply_gradient(&mut self, grad: &GradientSet, step: f64) -> Result<()> {
        if grad.layers.len() != self.layers.len() {
            return Err(Error::shape(
                "apply_gradient",
                (self.layers.len(), 1),
                (grad.layers.len(), 1),
            ));
        }
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            if g.bias.len() != l.bias.len() {
                return Err(Error::shape("apply_gradient", l.weight.shape(), g.weight.shape()));
            }
            l.weight.axpy(-step, &g.weight)?;
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= step * gb;
            }
        }
        Ok(())
    }
}

impl GradientSet {
    pub fn zeros_like(model: &MlpModel) -> GradientSet {
        GradientSet {
            layers: model
                .layers()
                .iter()
                .map(|l| LayerGradient {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.fro_norm_sq() + l.bias.iter().map(|b| b * b).sum::<f64>())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.first_non_finite().is_none() && l.bias.iter().all(|b| b.is_finite())
        })
    }
}

/// Embedding of a `B x D_m` feature block as a `P_m x B` matrix, one column
/// per sample.
pub fn forward_embedding(model: &MlpModel, features: &Matrix) -> Result<Matrix> {
    if features.cols() != model.input_width() {
        return Err(Error::shape(
            "forward_embedding",
            (features.rows(), model.input_width()),
            features.shape(),
        ));
    }
    model.forward(&features.transpose())
}

/// Gradient of the loss w.r.t. a party's parameters, given the gradient of
/// the loss w.r.t. its embedding batch. `upstream` may come from a stale or
/// compressed view; the Jacobian is always taken at the party's own
/// parameters.
pub fn backward_embedding(model: &MlpModel, features: &Matrix, upstream: &Matrix) -> Result<GradientSet> {
    if features.cols() != model.input_width() {
        return Err(Error::shape(
            "backward_embedding",
            (features.rows(), model.input_width()),
            features.shape(),
        ));
    }
    let trace = model.forward_trace(&features.transpose())?;
    if upstream.shape() != trace.output().shape() {
        return Err(Error::shape(
            "backward_embedding upstream",
            trace.output().shape(),
            upstream.shape(),
        ));
    }
    Ok(model.backward(&trace, upstream)?.0)
}

/// Glorot-uniform weights in `(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`,
/// zero biases. `widths` has one more entry than `activations`.
pub fn init_model(widths: &[usize], activations: &[Activation], seed: u64) -> Result<MlpModel> {
    if activations.is_empty() || widths.len() != activations.len() + 1 {
        return Err(Error::invalid("need one activation per layer and at least one layer"));
    }
    if let Some(i) = widths.iter().position(|&w| w == 0) {
        return Err(Error::invalid(alloc::format!("layer width {i} is zero")));
    }
    let mut rng = rng::stream(seed, &[]);
    let layers = widths
        .windows(2)
        .zip(activations)
        .map(|(w, &activation)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            let weight = Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-a..a));
            Layer {
                weight,
                bias: vec![0.0; fan_out],
                activation,
            }
        })
        .collect();
    MlpModel::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_gives_zero_embedding() {
        let layers = alloc::vec![Layer {
            weight: Matrix::zeros(2, 3),
            bias: alloc::vec![0.0; 2],
            activation: Activation::Tanh,
        }];
        let m = MlpModel::new(layers).unwrap();
        let x = Matrix::from_fn(4, 3, |r, c| (r * 3 + c) as f64 - 5.0);
        let h = forward_embedding(&m, &x).unwrap();
        assert_eq!(h.shape(), (2, 4));
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_transposes_input() {
        let layers = alloc::vec![Layer {
            weight: Matrix::identity(3),
            bias: alloc::vec![0.0; 3],
            activation: Activation::Identity,
        }];
        let m = MlpModel::new(layers).unwrap();
        let x = Matrix::from_fn(2, 3, |r, c| (r * 10 + c) as f64);
        assert_eq!(forward_embedding(&m, &x).unwrap(), x.transpose());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let m = init_model(&[3, 2], &[Activation::Tanh], 1).unwrap();
        let err = forward_embedding(&m, &Matrix::zeros(5, 4)).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("5x3") && msg.contains("5x4"), "{msg}");
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let widths = [4, 6, 2];
        let acts = [Activation::Tanh, Activation::Tanh];
        let a = init_model(&widths, &acts, 7).unwrap();
        let b = init_model(&widths, &acts, 7).unwrap();
        let c = init_model(&widths, &acts, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for l in a.layers() {
            let lim = libm::sqrt(6.0 / (l.input_width() + l.output_width()) as f64);
            assert!(l.weight.data().iter().all(|w| w.abs() < lim));
        }
    }

    #[test]
    fn init_rejects_zero_width() {
        assert!(init_model(&[3, 0, 2], &[Activation::Tanh, Activation::Tanh], 0).is_err());
        assert!(init_model(&[3], &[], 0).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient_and_linearity_holds() {
        let m = init_model(&[3, 4, 2], &[Activation::Tanh, Activation::Tanh], 3).unwrap();
        let x = Matrix::from_fn(5, 3, |r, c| libm::sin((r * 3 + c) as f64));
        let zero = backward_embedding(&m, &x, &Matrix::zeros(2, 5)).unwrap();
        assert_eq!(zero.norm_sq(), 0.0);
        let up = Matrix::from_fn(2, 5, |r, c| (r as f64 - c as f64) * 0.1);
        let mut up2 = up.clone();
        up2.scale(2.0);
        let g1 = backward_embedding(&m, &x, &up).unwrap().flatten();
        let g2 = backward_embedding(&m, &x, &up2).unwrap().flatten();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn params_roundtrip() {
        let mut m = init_model(&[2, 3, 1], &[Activation::Tanh, Activation::Identity], 5).unwrap();
        let p: Vec<f64> = (0..m.param_count()).map(|i| i as f64).collect();
        m.set_params(&p).unwrap();
        assert_eq!(m.params(), p);
    }
}
