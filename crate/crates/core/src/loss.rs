//! The mini-batch objective `(1/B) sum_i loss(server(Phi^i), y^i)` and its
//! exact gradients w.r.t. the server parameters and every embedding block.

use alloc::vec::Vec;

use crate::linalg::Matrix;
use crate::model::{GradientSet, MlpModel};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Multi-class; labels index the server's output rows.
    SoftmaxCrossEntropy,
    /// Binary; the server has a single output logit and labels are 0 or 1.
    Logistic,
}

impl LossKind {
    pub fn for_server(server: &MlpModel) -> LossKind {
        if server.output_width() == 1 {
            LossKind::Logistic
        } else {
            LossKind::SoftmaxCrossEntropy
        }
    }
}

fn log1p_exp(z: f64) -> f64 {
    // log(1 + e^z) without overflow
    if z > 0.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

fn check_inputs(server: &MlpModel, embeddings: &Matrix, labels: &[usize]) -> Result<()> {
    if embeddings.rows() != server.input_width() {
        return Err(Error::shape(
            "server input",
            (server.input_width(), labels.len()),
            embeddings.shape(),
        ));
    }
    if embeddings.cols() != labels.len() {
        return Err(Error::shape(
            "labels",
            embeddings.shape(),
            (1, labels.len()),
        ));
    }
    let classes = match LossKind::for_server(server) {
        LossKind::Logistic => 2,
        LossKind::SoftmaxCrossEntropy => server.output_width(),
    };
    if let Some(i) = labels.iter().position(|&y| y >= classes) {
        return Err(Error::invalid(alloc::format!(
            "label {} at sample {i} exceeds {classes} classes",
            labels[i]
        )));
    }
    Ok(())
}

/// Per-sample losses and the gradient of the *mean* loss w.r.t. the logits.
fn loss_and_logit_grad(kind: LossKind, logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let b = labels.len();
    let inv_b = 1.0 / b as f64;
    let mut grad = Matrix::zeros(logits.rows(), b);
    let mut total = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        let loss = match kind {
            LossKind::Logistic => {
                let z = logits.get(0, j);
                let yf = y as f64;
                grad.set(0, j, (sigmoid(z) - yf) * inv_b);
                log1p_exp(z) - yf * z
            }
            LossKind::SoftmaxCrossEntropy => {
                let max = (0..logits.rows())
                    .map(|r| logits.get(r, j))
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for r in 0..logits.rows() {
                    sum += libm::exp(logits.get(r, j) - max);
                }
                for r in 0..logits.rows() {
                    let p = libm::exp(logits.get(r, j) - max) / sum;
                    let t = if r == y { 1.0 } else { 0.0 };
                    grad.set(r, j, (p - t) * inv_b);
                }
                max + libm::log(sum) - logits.get(y, j)
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "per-sample loss",
                index: j,
            });
        }
        total += loss;
    }
    Ok((total * inv_b, grad))
}

/// Mean loss of the server model on stacked embeddings (`P x B`).
pub fn server_loss(server: &MlpModel, embeddings: &Matrix, labels: &[usize]) -> Result<f64> {
    check_inputs(server, embeddings, labels)?;
    let logits = server.forward(embeddings)?;
    Ok(loss_and_logit_grad(LossKind::for_server(server), &logits, labels)?.0)
}

#[derive(Clone, Debug)]
pub struct ServerBackward {
    pub loss: f64,
    pub server_grad: GradientSet,
    /// Gradient w.r.t. the stacked embeddings, `P x B`.
    pub embedding_grad: Matrix,
}

impl ServerBackward {
    /// Splits the embedding gradient into per-party blocks `P_m x B`.
    pub fn party_blocks(&self, widths: &[usize]) -> Result<Vec<Matrix>> {
        self.embedding_grad.split_rows(widths)
    }
}

/// Loss plus analytic gradients w.r.t. the server parameters and the stacked
/// embeddings.
pub fn backward_all(server: &MlpModel, embeddings: &Matrix, labels: &[usize]) -> Result<ServerBackward> {
    check_inputs(server, embeddings, labels)?;
    let trace = server.forward_trace(embeddings)?;
    let (loss, logit_grad) = loss_and_logit_grad(LossKind::for_server(server), trace.output(), labels)?;
    let (server_grad, embedding_grad) = server.backward(&trace, &logit_grad)?;
    if let Some(index) = embedding_grad.first_non_finite() {
        return Err(Error::NonFinite {
            what: "embedding gradient",
            index: index % embeddings.cols(),
        });
    }
    Ok(ServerBackward {
        loss,
        server_grad,
        embedding_grad,
    })
}
