//! Vertically partitioned datasets: every party holds a disjoint set of
//! feature columns for the same samples, and every participant holds the
//! labels.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::Matrix;
use crate::model::{init_model, Activation};
use crate::rng::{self, tag};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionScheme {
    /// Consecutive column ranges; the first `D mod M` parties get one extra.
    Contiguous,
    /// Columns shuffled with the seed, then dealt out in turn.
    RoundRobin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerticalDataset {
    blocks: Vec<Matrix>,
    columns: Vec<Vec<usize>>,
    labels: Vec<usize>,
    classes: usize,
}

impl VerticalDataset {
    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    pub fn parties(&self) -> usize {
        self.blocks.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Feature block of party `m` (0-based), `N x D_m`.
    pub fn block(&self, party: usize) -> &Matrix {
        &self.blocks[party]
    }

    /// Original column indices held by party `m`, in block order.
    pub fn columns(&self, party: usize) -> &[usize] {
        &self.columns[party]
    }

    pub fn feature_widths(&self) -> Vec<usize> {
        self.blocks.iter().map(Matrix::cols).collect()
    }

    /// Rows of party `m`'s block for the given samples, `B x D_m`.
    pub fn party_features(&self, party: usize, indices: &[usize]) -> Matrix {
        self.blocks[party].select_rows(indices)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// The given samples, in the given order, with the same column split.
    pub fn subset(&self, indices: &[usize]) -> VerticalDataset {
        VerticalDataset {
            blocks: self.blocks.iter().map(|b| b.select_rows(indices)).collect(),
            columns: self.columns.clone(),
            labels: self.batch_labels(indices),
            classes: self.classes,
        }
    }

    /// Puts the blocks back together in the original column order.
    pub fn reassemble(&self) -> Matrix {
        let d: usize = self.columns.iter().map(Vec::len).sum();
        let mut out = Matrix::zeros(self.samples(), d);
        for (block, cols) in self.blocks.iter().zip(&self.columns) {
            for (j, &orig) in cols.iter().enumerate() {
                for i in 0..self.samples() {
                    out.set(i, orig, block.get(i, j));
                }
            }
        }
        out
    }
}

/// Splits the columns of `x` over `parties` parties.
pub fn partition_features(
    x: &Matrix,
    labels: &[usize],
    parties: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<VerticalDataset> {
    let (n, d) = x.shape();
    if parties == 0 || parties > d {
        return Err(Error::invalid(alloc::format!(
            "cannot split {d} features over {parties} parties"
        )));
    }
    if labels.len() != n {
        return Err(Error::shape("labels", x.shape(), (labels.len(), 1)));
    }
    let columns: Vec<Vec<usize>> = match scheme {
        PartitionScheme::Contiguous => {
            let (base, extra) = (d / parties, d % parties);
            let mut start = 0;
            (0..parties)
                .map(|m| {
                    let len = base + usize::from(m < extra);
                    let cols = (start..start + len).collect();
                    start += len;
                    cols
                })
                .collect()
        }
        PartitionScheme::RoundRobin => {
            let mut order: Vec<usize> = (0..d).collect();
            order.shuffle(&mut rng::stream(seed, &[tag::PARTITION]));
            let mut cols = alloc::vec![Vec::new(); parties];
            for (pos, c) in order.into_iter().enumerate() {
                cols[pos % parties].push(c);
            }
            cols
        }
    };
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    Ok(VerticalDataset {
        blocks: columns.iter().map(|c| x.select_columns(c)).collect(),
        columns,
        labels: labels.to_vec(),
        classes,
    })
}

impl VerticalDataset {
    /// Overrides the class count inferred from the labels (a class may be
    /// absent from a small sample).
    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if self.labels.iter().any(|&y| y >= classes) {
            return Err(Error::invalid("label exceeds class count"));
        }
        self.classes = classes;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiniBatchIndex {
    pub round: usize,
    pub indices: Vec<usize>,
}

/// `B` distinct samples drawn uniformly without replacement. Depends only on
/// `(seed, round)`, so a round's batch can be recomputed at any time.
pub fn sample_minibatch(samples: usize, batch: usize, round: usize, seed: u64) -> Result<MiniBatchIndex> {
    if batch == 0 || batch > samples {
        return Err(Error::invalid(alloc::format!(
            "batch size {batch} must be in 1..={samples}"
        )));
    }
    let mut rng = rng::stream(seed, &[tag::MINIBATCH, round as u64]);
    let indices = rand::seq::index::sample(&mut rng, samples, batch).into_vec();
    Ok(MiniBatchIndex { round, indices })
}

const TEACHER_HIDDEN: usize = 16;
const TEACHER_GAIN: f64 = 2.0;

/// Standard-normal features labelled by the argmax of a fixed random
/// teacher MLP. The teacher is redrawn until every class makes up at least
/// 1% of the samples (for `N >= 1000`; smaller sets only need every class
/// present).
pub fn synthetic_teacher_dataset(
    samples: usize,
    features: usize,
    classes: usize,
    parties: usize,
    seed: u64,
) -> Result<VerticalDataset> {
    if classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let mut rng = rng::stream(seed, &[tag::DATA]);
    let x = Matrix::from_fn(samples, features, |_, _| StandardNormal.sample(&mut rng));
    let xt = x.transpose();
    let min_count = if samples >= 1000 {
        samples.div_ceil(100)
    } else {
        usize::from(samples >= classes)
    };
    let mut labels = Vec::new();
    for attempt in 0..1000u64 {
        let mut teacher = init_model(
            &[features, TEACHER_HIDDEN, classes],
            &[Activation::Tanh, Activation::Identity],
            rng::derive_seed(seed, &[tag::TEACHER, attempt]),
        )?;
        let scaled: Vec<f64> = teacher.params().iter().map(|p| p * TEACHER_GAIN).collect();
        teacher.set_params(&scaled)?;
        let logits = teacher.forward(&xt)?;
        labels = (0..samples)
            .map(|j| {
                (0..classes)
                    .max_by(|&a, &b| logits.get(a, j).total_cmp(&logits.get(b, j)).then(b.cmp(&a)))
                    .unwrap_or(0)
            })
            .collect();
        let mut counts = alloc::vec![0usize; classes];
        labels.iter().for_each(|&y| counts[y] += 1);
        if counts.iter().all(|&c| c >= min_count) {
            break;
        }
    }
    partition_features(&x, &labels, parties, PartitionScheme::Contiguous, seed)?.with_classes(classes)
}
