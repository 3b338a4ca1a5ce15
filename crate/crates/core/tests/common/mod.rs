//! Straight-line reference implementations used as test oracles. Nothing here
//! calls the crate's matrix, model or loss code; models are copied out into
//! nested `Vec`s and evaluated one sample at a time.

#![allow(dead_code)]

use cvfl_core::data::VerticalDataset;
use cvfl_core::model::Activation;
use cvfl_core::protocol::GlobalModel;
use cvfl_core::MlpModel;

#[derive(Clone, Debug)]
pub struct DenseLayer {
    /// `w[out][in]`
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub tanh: bool,
}

#[derive(Clone, Debug)]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
}

impl DenseNet {
    pub fn from_model(model: &MlpModel) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| DenseLayer {
                w: (0..l.weight.rows()).map(|r| l.weight.row(r).to_vec()).collect(),
                b: l.bias.clone(),
                tanh: l.activation == Activation::Tanh,
            })
            .collect();
        DenseNet { layers }
    }

    /// Parameters in the crate's flat order: each layer's weights row by row,
    /// then its biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for row in &l.w {
                out.extend(row);
            }
            out.extend(&l.b);
        }
        out
    }

    pub fn set_flat(&mut self, p: &[f64]) {
        let mut at = 0;
        for l in &mut self.layers {
            for row in &mut l.w {
                for v in row.iter_mut() {
                    *v = p[at];
                    at += 1;
                }
            }
            for v in &mut l.b {
                *v = p[at];
                at += 1;
            }
        }
        assert_eq!(at, p.len());
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() * l.w[0].len() + l.b.len()).sum()
    }

    /// Activations of every layer, input first.
    pub fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for l in &self.layers {
            let input = acts.last().unwrap();
            let mut out = Vec::with_capacity(l.b.len());
            for (row, bias) in l.w.iter().zip(&l.b) {
                let mut z = *bias;
                for (w, a) in row.iter().zip(input) {
                    z += w * a;
                }
                out.push(if l.tanh { z.tanh() } else { z });
            }
            acts.push(out);
        }
        acts
    }

    /// Adds `dL/dparams` into `grad` (flat order) and returns `dL/dinput`.
    pub fn backward(&self, acts: &[Vec<f64>], dout: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut offsets = Vec::new();
        let mut at = 0;
        for l in &self.layers {
            offsets.push(at);
            at += l.w.len() * l.w[0].len() + l.b.len();
        }
        let mut delta = dout.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let out = &acts[i + 1];
            let input = &acts[i];
            for (d, a) in delta.iter_mut().zip(out) {
                if l.tanh {
                    *d *= 1.0 - a * a;
                }
            }
            let n_in = input.len();
            let base = offsets[i];
            for (r, d) in delta.iter().enumerate() {
                for (c, a) in input.iter().enumerate() {
                    grad[base + r * n_in + c] += d * a;
                }
                grad[base + l.w.len() * n_in + r] += d;
            }
            let mut next = vec![0.0; n_in];
            for (r, d) in delta.iter().enumerate() {
                for (c, nx) in next.iter_mut().enumerate() {
                    *nx += l.w[r][c] * d;
                }
            }
            delta = next;
        }
        delta
    }
}

/// The whole federated model as one network: parties side by side, server
/// on top.
#[derive(Clone, Debug)]
pub struct Monolith {
    pub parties: Vec<DenseNet>,
    pub server: DenseNet,
}

impl Monolith {
    pub fn from_model(model: &GlobalModel) -> Self {
        Monolith {
            parties: model.parties.iter().map(DenseNet::from_model).collect(),
            server: DenseNet::from_model(&model.server),
        }
    }

    /// Flat parameter blocks, server first.
    pub fn blocks(&self) -> Vec<Vec<f64>> {
        let mut out = vec![self.server.flat()];
        out.extend(self.parties.iter().map(DenseNet::flat));
        out
    }

    pub fn set_blocks(&mut self, blocks: &[Vec<f64>]) {
        self.server.set_flat(&blocks[0]);
        for (p, b) in self.parties.iter_mut().zip(&blocks[1..]) {
            p.set_flat(b);
        }
    }

    fn sample_features(ds: &VerticalDataset, m: usize, i: usize) -> Vec<f64> {
        ds.block(m).row(i).to_vec()
    }

    /// Per-sample loss: softmax cross-entropy, or logistic loss for a single
    /// output. Returns the loss and `dloss/dlogits`.
    fn sample_loss(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
        if logits.len() == 1 {
            let z = logits[0];
            let yf = y as f64;
            let loss = (1.0 + z.exp()).ln() - yf * z;
            let p = 1.0 / (1.0 + (-z).exp());
            (loss, vec![p - yf])
        } else {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            let loss = max + sum.ln() - logits[y];
            let g = logits
                .iter()
                .enumerate()
                .map(|(r, z)| (z - max).exp() / sum - if r == y { 1.0 } else { 0.0 })
                .collect();
            (loss, g)
        }
    }

    /// Mean loss over `indices` and its gradient per block (server first).
    pub fn loss_and_grad(&self, ds: &VerticalDataset, indices: &[usize]) -> (f64, Vec<Vec<f64>>) {
        let mut grads: Vec<Vec<f64>> = self.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        let mut total = 0.0;
        let inv = 1.0 / indices.len() as f64;
        for &i in indices {
            let party_acts: Vec<Vec<Vec<f64>>> = self
                .parties
                .iter()
                .enumerate()
                .map(|(m, net)| net.forward(&Self::sample_features(ds, m, i)))
                .collect();
            let phi: Vec<f64> = party_acts.iter().flat_map(|a| a.last().unwrap().clone()).collect();
            let server_acts = self.server.forward(&phi);
            let (loss, dlogits) = Self::sample_loss(server_acts.last().unwrap(), ds.labels()[i]);
            total += loss;
            let dlogits: Vec<f64> = dlogits.iter().map(|g| g * inv).collect();
            let dphi = self.server.backward(&server_acts, &dlogits, &mut grads[0]);
            let mut at = 0;
            for (m, (net, acts)) in self.parties.iter().zip(&party_acts).enumerate() {
                let width = acts.last().unwrap().len();
                net.backward(acts, &dphi[at..at + width], &mut grads[m + 1]);
                at += width;
            }
        }
        (total * inv, grads)
    }

    pub fn loss(&self, ds: &VerticalDataset, indices: &[usize]) -> f64 {
        self.loss_and_grad(ds, indices).0
    }

    /// One synchronous SGD step on every block at once.
    pub fn sgd_step(&mut self, ds: &VerticalDataset, indices: &[usize], eta: f64) {
        let (_, grads) = self.loss_and_grad(ds, indices);
        let blocks: Vec<Vec<f64>> = self
            .blocks()
            .iter()
            .zip(&grads)
            .map(|(p, g)| p.iter().zip(g).map(|(a, b)| a - eta * b).collect())
            .collect();
        self.set_blocks(&blocks);
    }

    /// Largest absolute parameter difference against a crate model.
    pub fn max_abs_diff(&self, model: &GlobalModel) -> f64 {
        let other = Monolith::from_model(model).blocks();
        self.blocks()
            .iter()
            .flatten()
            .zip(other.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Central difference of `f` along every coordinate of `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if n == 0.0 {
        0.0
    } else {
        d / n
    }
}
