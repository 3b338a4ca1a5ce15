//! Empirical checks of the convergence analysis.
//!
//! The smoothness, variance, Hessian and Jacobian constants are estimated as
//! maxima over an explicit [`EstimationDomain`]: a set of seeded parameter
//! points (with one mini-batch each) and a box of half-width
//! `embedding_radius` around the raw embeddings. Bound checks refuse to run
//! at points the domain does not cover.
//!
//! Participant index 0 is the server throughout; party `m` is index `m`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::compress::{compress, CompressorSpec, DitherKey};
use crate::data::{sample_minibatch, VerticalDataset};
use crate::linalg::Matrix;
use crate::loss::backward_all;
use crate::model::{backward_embedding, forward_embedding, GradientSet, MlpModel};
use crate::protocol::{
    evaluate_full, initial_model, joint_gradient, run_training_from, GlobalModel, Protocol, Sequential,
    StepSchedule, TrainConfig,
};
use crate::rng::{self, tag};
use crate::{Error, Result};

/// Largest instance the dense estimators accept.
pub const MAX_PARAMS: usize = 500;
/// Central-difference step for embedding Hessians.
pub const HESSIAN_STEP: f64 = 1e-4;
/// Relative tolerance of [`BoundReport::pass`].
pub const BOUND_TOLERANCE: f64 = 0.05;

const POWER_ITERS: usize = 8;
const POWER_STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimationDomain {
    pub seed: u64,
    /// Parameter points; point 0 is the unperturbed model.
    pub probes: usize,
    /// Every other point perturbs each parameter uniformly in
    /// `[-param_radius, param_radius]`.
    pub param_radius: f64,
    /// Mini-batch size of each probe.
    pub batch: usize,
    /// Half-width of the box around the raw embeddings where Hessians are
    /// sampled.
    pub embedding_radius: f64,
    /// Random points per probe inside the embedding box (the centre is always
    /// included).
    pub hessian_samples: usize,
    /// Mini-batches per probe for the variance estimate.
    pub variance_batches: usize,
}

impl EstimationDomain {
    pub fn new(seed: u64, probes: usize, batch: usize) -> Self {
        EstimationDomain {
            seed,
            probes,
            param_radius: 0.1,
            batch,
            embedding_radius: 1.0,
            hessian_samples: 4,
            variance_batches: 16,
        }
    }

    /// Parameters and mini-batch of probe `i`.
    pub fn probe(&self, base: &GlobalModel, dataset: &VerticalDataset, i: usize) -> Result<(GlobalModel, Vec<usize>)> {
        if i >= self.probes {
            return Err(Error::Domain(alloc::format!(
                "probe {i} lies outside the {} estimated probe points",
                self.probes
            )));
        }
        let mut model = base.clone();
        if i > 0 {
            let mut rng = rng::stream(self.seed, &[tag::PROBE, i as u64]);
            for m in 0..model.blocks() {
                let block = model.block_mut(m);
                let p: Vec<f64> = block
                    .params()
                    .into_iter()
                    .map(|v| v + rng.random_range(-self.param_radius..=self.param_radius))
                    .collect();
                block.set_params(&p)?;
            }
        }
        let batch_seed = rng::derive_seed(self.seed, &[tag::PROBE]);
        let batch = sample_minibatch(dataset.samples(), self.batch, i, batch_seed)?.indices;
        Ok((model, batch))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConstants {
    /// Smoothness of `F` in all parameters jointly.
    pub l: f64,
    /// Per-block smoothness, length `M + 1`.
    pub l_m: Vec<f64>,
    /// Variance constants `sigma_m^2`, scaled so that
    /// `E||grad_m F_B - grad_m F||^2 <= sigma_m^2 / B`.
    pub sigma_sq: Vec<f64>,
    /// Embedding-Hessian bounds.
    pub h: Vec<f64>,
    /// Embedding-Jacobian bounds (`G_0 = 1`).
    pub g: Vec<f64>,
    pub domain: EstimationDomain,
    /// Probe evaluations dropped because they produced non-finite values.
    pub skipped: usize,
}

impl AnalysisConstants {
    pub fn max_smoothness(&self) -> f64 {
        self.l_m.iter().copied().fold(self.l, f64::max)
    }

    /// Largest fixed step allowed by the convergence theorem for `Q` local
    /// iterations.
    pub fn max_step(&self, local_iters: usize) -> f64 {
        1.0 / (16.0 * local_iters as f64 * self.max_smoothness())
    }
}

/// A measured quantity against its bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / rhs` (0 when both are 0).
    pub ratio: f64,
    pub pass: bool,
}

impl BoundReport {
    pub fn new(lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let ratio = if lhs == 0.0 { 0.0 } else { lhs / rhs };
        BoundReport {
            lhs,
            rhs,
            ratio,
            pass: lhs <= rhs * (1.0 + tolerance),
        }
    }
}

fn sq(x: f64) -> f64 {
    x * x
}

fn jacobian_fro(model: &MlpModel, features: &Matrix) -> Result<f64> {
    let out = forward_embedding(model, features)?;
    let mut total = 0.0;
    for k in 0..out.data().len() {
        let mut upstream = Matrix::zeros(out.rows(), out.cols());
        upstream.data_mut()[k] = 1.0;
        total += backward_embedding(model, features, &upstream)?.norm_sq();
    }
    Ok(libm::sqrt(total))
}

/// Squared Frobenius norms of the Hessian of `F_B` w.r.t. the stacked
/// embeddings: index 0 is the mixed server-parameter/embedding block, index
/// `m` the rows belonging to party `m`'s embedding.
fn hessian_row_norms_sq(server: &MlpModel, phi: &Matrix, labels: &[usize], widths: &[usize]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; widths.len() + 1];
    let b = phi.cols();
    let mut owner = Vec::with_capacity(phi.rows());
    for (m, &w) in widths.iter().enumerate() {
        owner.extend(core::iter::repeat_n(m + 1, w));
    }
    for k in 0..phi.data().len() {
        let mut plus = phi.clone();
        plus.data_mut()[k] += HESSIAN_STEP;
        let mut minus = phi.clone();
        minus.data_mut()[k] -= HESSIAN_STEP;
        let bp = backward_all(server, &plus, labels)?;
        let bm = backward_all(server, &minus, labels)?;
        let scale = 1.0 / (2.0 * HESSIAN_STEP);
        for (gp, gm) in bp.server_grad.flatten().iter().zip(bm.server_grad.flatten()) {
            out[0] += sq((gp - gm) * scale);
        }
        for (i, (ep, em)) in bp.embedding_grad.data().iter().zip(bm.embedding_grad.data()).enumerate() {
            out[owner[i / b]] += sq((ep - em) * scale);
        }
    }
    Ok(out)
}

fn block_diff_sq(a: &GradientSet, b: &GradientSet) -> f64 {
    a.flatten().iter().zip(b.flatten()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn flat_params(model: &GlobalModel) -> Vec<Vec<f64>> {
    (0..model.blocks()).map(|m| model.block(m).params()).collect()
}

fn set_flat(model: &mut GlobalModel, params: &[Vec<f64>]) -> Result<()> {
    for (m, p) in params.iter().enumerate() {
        model.block_mut(m).set_params(p)?;
    }
    Ok(())
}

fn full_gradient(model: &GlobalModel, dataset: &VerticalDataset) -> Result<Vec<GradientSet>> {
    let all: Vec<usize> = (0..dataset.samples()).collect();
    let g = joint_gradient(model, dataset, &all)?;
    Ok((0..model.blocks()).map(|m| g.block(m).clone()).collect())
}

/// Power iteration with finite gradient differences restricted to the
/// blocks in `active`; every iterate is a probe pair `(Theta, Theta + d)`
/// whose gradient-difference ratio is recorded.
fn smoothness_along(
    model: &GlobalModel,
    dataset: &VerticalDataset,
    base_grad: &[GradientSet],
    active: &[usize],
    seed: u64,
) -> Result<f64> {
    let base = flat_params(model);
    let mut rng = rng::stream(seed, &[]);
    let mut dir: Vec<Vec<f64>> = base
        .iter()
        .enumerate()
        .map(|(m, p)| {
            p.iter()
                .map(|_| if active.contains(&m) { rng.random_range(-1.0..1.0) } else { 0.0 })
                .collect()
        })
        .collect();
    let mut best: f64 = 0.0;
    let mut probe = model.clone();
    for _ in 0..POWER_ITERS {
        let norm = libm::sqrt(dir.iter().flatten().map(|v| v * v).sum::<f64>());
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        let moved: Vec<Vec<f64>> = base
            .iter()
            .zip(&dir)
            .map(|(p, d)| p.iter().zip(d).map(|(x, v)| x + POWER_STEP * v / norm).collect())
            .collect();
        set_flat(&mut probe, &moved)?;
        let grad = full_gradient(&probe, dataset)?;
        let step_len = libm::sqrt(
            moved
                .iter()
                .zip(&base)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
                .sum::<f64>(),
        );
        let mut diff_sq = 0.0;
        for &m in active {
            diff_sq += block_diff_sq(&grad[m], &base_grad[m]);
        }
        best = best.max(libm::sqrt(diff_sq) / step_len);
        dir = (0..base.len())
            .map(|m| {
                if active.contains(&m) {
                    grad[m].flatten().iter().zip(base_grad[m].flatten()).map(|(a, b)| a - b).collect()
                } else {
                    vec![0.0; base[m].len()]
                }
            })
            .collect();
    }
    Ok(best)
}

/// Estimates every constant over `domain`, starting from `model`.
pub fn estimate_constants(
    model: &GlobalModel,
    dataset: &VerticalDataset,
    domain: &EstimationDomain,
) -> Result<AnalysisConstants> {
    if model.param_count() > MAX_PARAMS {
        return Err(Error::invalid(alloc::format!(
            "{} parameters exceed the {MAX_PARAMS} the dense estimators support",
            model.param_count()
        )));
    }
    if domain.probes == 0 {
        return Err(Error::invalid("need at least one probe"));
    }
    let blocks = model.blocks();
    let widths = model.embedding_widths();
    let mut c = AnalysisConstants {
        l: 0.0,
        l_m: vec![0.0; blocks],
        sigma_sq: vec![0.0; blocks],
        h: vec![0.0; blocks],
        g: vec![0.0; blocks],
        domain: *domain,
        skipped: 0,
    };
    c.g[0] = 1.0;
    for i in 0..domain.probes {
        let (probe, batch) = domain.probe(model, dataset, i)?;
        match estimate_at(&probe, dataset, &batch, &widths, domain, i, &mut c) {
            Ok(()) => {}
            Err(Error::NonFinite { .. }) => c.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(c)
}

fn estimate_at(
    model: &GlobalModel,
    dataset: &VerticalDataset,
    batch: &[usize],
    widths: &[usize],
    domain: &EstimationDomain,
    i: usize,
    c: &mut AnalysisConstants,
) -> Result<()> {
    let blocks = model.blocks();
    let labels = dataset.batch_labels(batch);
    let features: Vec<Matrix> = (0..model.parties.len()).map(|m| dataset.party_features(m, batch)).collect();

    for (m, x) in features.iter().enumerate() {
        c.g[m + 1] = c.g[m + 1].max(jacobian_fro(&model.parties[m], x)?);
    }

    let raw: Vec<Matrix> = model
        .parties
        .iter()
        .zip(&features)
        .map(|(p, x)| forward_embedding(p, x))
        .collect::<Result<_>>()?;
    let phi = Matrix::vstack(&raw.iter().collect::<Vec<_>>())?;
    let mut rng = rng::stream(domain.seed, &[tag::PROBE, i as u64, 1]);
    for s in 0..=domain.hessian_samples {
        let mut point = phi.clone();
        if s > 0 {
            for v in point.data_mut() {
                *v += rng.random_range(-domain.embedding_radius..=domain.embedding_radius);
            }
        }
        let norms = hessian_row_norms_sq(&model.server, &point, &labels, widths)?;
        for (h, n) in c.h.iter_mut().zip(norms) {
            *h = h.max(libm::sqrt(n));
        }
    }

    let full = full_gradient(model, dataset)?;
    let mut mean_dev = vec![0.0; blocks];
    let vseed = rng::derive_seed(domain.seed, &[tag::PROBE, i as u64, 2]);
    for k in 0..domain.variance_batches {
        let idx = sample_minibatch(dataset.samples(), domain.batch, k, vseed)?.indices;
        let g = joint_gradient(model, dataset, &idx)?;
        for (m, dev) in mean_dev.iter_mut().enumerate() {
            *dev += block_diff_sq(g.block(m), &full[m]) / domain.variance_batches as f64;
        }
    }
    for (s, dev) in c.sigma_sq.iter_mut().zip(mean_dev) {
        *s = s.max(domain.batch as f64 * dev);
    }

    let all: Vec<usize> = (0..blocks).collect();
    let lseed = rng::derive_seed(domain.seed, &[tag::PROBE, i as u64, 3]);
    c.l = c.l.max(smoothness_along(model, dataset, &full, &all, lseed)?);
    for m in 0..blocks {
        let lm = smoothness_along(model, dataset, &full, &[m], rng::derive_seed(lseed, &[m as u64]))?;
        c.l_m[m] = c.l_m[m].max(lm);
    }
    Ok(())
}

/// One participant at one probe point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LemmaCase {
    pub probe: usize,
    pub participant: usize,
    pub report: BoundReport,
}

/// Checks `||grad_m F_B(compressed view) - grad_m F_B(raw view)||^2 <=
/// H_m^2 G_m^2 sum_{j != m} ||eps_j||_F^2` at probes `0..probes` of the
/// constants' domain, compressing every party's embedding with `codec`.
/// Party `m`'s compressed view keeps its own block raw; the server's view
/// has every block compressed. Server parameters are sent raw, so
/// `eps_0 = 0`.
pub fn lemma1_check(
    model: &GlobalModel,
    dataset: &VerticalDataset,
    codec: &CompressorSpec,
    constants: &AnalysisConstants,
    probes: usize,
    seed: u64,
) -> Result<Vec<LemmaCase>> {
    let domain = &constants.domain;
    let widths = model.embedding_widths();
    let mut cases = Vec::new();
    for i in 0..probes {
        let (probe, batch) = domain.probe(model, dataset, i)?;
        let labels = dataset.batch_labels(&batch);
        let features: Vec<Matrix> = (0..widths.len()).map(|m| dataset.party_features(m, &batch)).collect();
        let raw: Vec<Matrix> = probe
            .parties
            .iter()
            .zip(&features)
            .map(|(p, x)| forward_embedding(p, x))
            .collect::<Result<_>>()?;
        let mut hat = Vec::with_capacity(raw.len());
        let mut eps = vec![0.0];
        for (m, h) in raw.iter().enumerate() {
            let c = compress(h, codec, DitherKey::new(seed, i as u32, (m + 1) as u16), None)?;
            let worst = c.reconstructed.sub(h)?.max_abs();
            if worst > domain.embedding_radius {
                return Err(Error::Domain(alloc::format!(
                    "compression error {worst} at probe {i} leaves the estimated embedding box of radius {}",
                    domain.embedding_radius
                )));
            }
            eps.push(c.error_sq_fro);
            hat.push(c.reconstructed);
        }

        let stack = |blocks: &[&Matrix]| Matrix::vstack(blocks);
        let raw_refs: Vec<&Matrix> = raw.iter().collect();
        let raw_back = backward_all(&probe.server, &stack(&raw_refs)?, &labels)?;
        let raw_up = raw_back.party_blocks(&widths)?;

        let hat_refs: Vec<&Matrix> = hat.iter().collect();
        let hat_back = backward_all(&probe.server, &stack(&hat_refs)?, &labels)?;
        let lhs0 = block_diff_sq(&hat_back.server_grad, &raw_back.server_grad);
        let others: f64 = eps[1..].iter().sum();
        let rhs0 = sq(constants.h[0]) * sq(constants.g[0]) * others;
        cases.push(LemmaCase {
            probe: i,
            participant: 0,
            report: BoundReport::new(lhs0, rhs0, BOUND_TOLERANCE),
        });

        for m in 0..widths.len() {
            let mut view = hat_refs.clone();
            view[m] = &raw[m];
            let back = backward_all(&probe.server, &stack(&view)?, &labels)?;
            let up = back.party_blocks(&widths)?.swap_remove(m);
            // the Jacobian is shared, so the gradient difference is the
            // backward pass of the upstream difference
            let delta = up.sub(&raw_up[m])?;
            let lhs = backward_embedding(&probe.parties[m], &features[m], &delta)?.norm_sq();
            let others: f64 = eps.iter().enumerate().filter(|&(j, _)| j != m + 1).map(|(_, e)| e).sum();
            let rhs = sq(constants.h[m + 1]) * sq(constants.g[m + 1]) * others;
            cases.push(LemmaCase {
                probe: i,
                participant: m + 1,
                report: BoundReport::new(lhs, rhs, BOUND_TOLERANCE),
            });
        }
    }
    Ok(cases)
}

/// The three terms of the fixed-step convergence bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Theorem1Terms {
    /// `4 (F(Theta^0) - F(Theta^T)) / (eta T)`
    pub optimization: f64,
    /// `6 eta Q L sum_m sigma_m^2 / B`
    pub noise: f64,
    /// `92 Q^2 / R sum_m H_m^2 G_m^2 sum_t0 sum_{j != m} E_j^{t0}`
    pub compression: f64,
    /// Whether `eta <= 1 / (16 Q max(L, L_m))`.
    pub precondition_met: bool,
}

impl Theorem1Terms {
    pub fn total(&self) -> f64 {
        self.optimization + self.noise + self.compression
    }
}

/// Evaluates the fixed-step bound on the average `||grad F||^2` over the
/// rounds of a run. `errors[t0][j]` is the squared compression error of
/// participant `j` in round `t0`.
pub fn theorem1_rhs(
    config: &TrainConfig,
    constants: &AnalysisConstants,
    f_initial: f64,
    f_final: f64,
    errors: &[Vec<f64>],
) -> Result<Theorem1Terms> {
    let eta = match config.step {
        StepSchedule::Fixed(eta) => eta,
        StepSchedule::Diminishing { .. } => {
            return Err(Error::invalid("the fixed-step bound needs a fixed step size"));
        }
    };
    if config.rounds == 0 {
        return Err(Error::invalid("need at least one round"));
    }
    let q = config.local_iters as f64;
    let r = config.rounds as f64;
    let t = q * r;
    let sigma: f64 = constants.sigma_sq.iter().sum();
    let mut compression = 0.0;
    for m in 0..constants.h.len() {
        let others: f64 = errors
            .iter()
            .map(|row| row.iter().enumerate().filter(|&(j, _)| j != m).map(|(_, e)| e).sum::<f64>())
            .sum();
        compression += sq(constants.h[m]) * sq(constants.g[m]) * others;
    }
    Ok(Theorem1Terms {
        optimization: 4.0 * (f_initial - f_final) / (eta * t),
        noise: 6.0 * eta * q * constants.l * sigma / config.batch as f64,
        compression: 92.0 * q * q / r * compression,
        precondition_met: eta <= constants.max_step(config.local_iters),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatePoint {
    pub t: usize,
    /// Seed average of the per-run average `||grad F||^2`, over runs that
    /// finished.
    pub avg_grad_sq_norm: f64,
    pub runs: usize,
    pub diverged: usize,
}

/// Trains at each `T` with fixed step `c / sqrt(T)` for every seed.
/// `T` must be a multiple of the template's `Q`.
pub fn rate_probe(
    template: &TrainConfig,
    dataset: &VerticalDataset,
    t_values: &[usize],
    seeds: &[u64],
    c: f64,
) -> Result<Vec<RatePoint>> {
    if t_values.len() < 2 || seeds.len() < 3 {
        return Err(Error::invalid("rate probe needs at least two horizons and three seeds"));
    }
    let mut out = Vec::with_capacity(t_values.len());
    for &t in t_values {
        if t == 0 || t % template.local_iters != 0 {
            return Err(Error::invalid(alloc::format!(
                "horizon {t} is not a positive multiple of Q = {}",
                template.local_iters
            )));
        }
        let mut cfg = template.clone();
        cfg.rounds = t / template.local_iters;
        cfg.step = StepSchedule::Fixed(c / libm::sqrt(t as f64));
        cfg.track_full_metrics = true;
        let (mut sum, mut runs, mut diverged) = (0.0, 0, 0);
        for &seed in seeds {
            cfg.seed = seed;
            let init = initial_model(&cfg, dataset)?;
            match run_training_from(&cfg, dataset, init, Protocol::MultiStep, &Sequential, |_| {}) {
                Ok(o) => {
                    sum += o.metrics.avg_grad_sq_norm();
                    runs += 1;
                }
                Err(Error::Diverged { .. }) => diverged += 1,
                Err(e) => return Err(e),
            }
        }
        out.push(RatePoint {
            t,
            avg_grad_sq_norm: if runs > 0 { sum / runs as f64 } else { f64::NAN },
            runs,
            diverged,
        });
    }
    Ok(out)
}

/// `F` at the end of a run, for the first term of the fixed-step bound.
pub fn final_loss(model: &GlobalModel, dataset: &VerticalDataset) -> Result<f64> {
    Ok(evaluate_full(model, dataset)?.0)
}
