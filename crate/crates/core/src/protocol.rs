//! Training protocols.
//!
//! [`run_global_round`] is one communication round of the multi-step
//! protocol: parties upload compressed embeddings of a fresh mini-batch, the
//! server broadcasts the fused view (plus its own parameters) and then every
//! participant takes `Q` local steps against that frozen view. Only a party's
//! own block is recomputed during its local steps.
//!
//! [`run_q1_round`] is the single-step variant in which the server computes
//! the embedding gradients itself and sends each party its slice.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::compress::{
    self, compress, decode_wire, encode_raw, encode_wire, CompressorKind, CompressorSpec, DitherKey,
    SelectionMode, WireExpectation,
};
use crate::data::{sample_minibatch, VerticalDataset};
use crate::linalg::Matrix;
use crate::loss::backward_all;
use crate::model::{backward_embedding, forward_embedding, init_model, Activation, GradientSet, MlpModel};
use crate::rng::{self, tag};
use crate::{Error, Result};

/// Runs independent work items, returning results in input order.
/// Implementations may run items concurrently; results must not depend on
/// scheduling.
pub trait Executor: Sync {
    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync;
}

/// Runs items one after another on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync,
    {
        items.into_iter().map(f).collect()
    }
}

/// Architecture of the party embedding models and the server head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    /// Hidden widths of each party's MLP (tanh throughout).
    pub party_hidden: Vec<usize>,
    /// Embedding width `P_m`, shared by all parties.
    pub embedding_width: usize,
    /// Hidden widths of the server head; empty means a single linear layer.
    pub server_hidden: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            party_hidden: vec![16],
            embedding_width: 4,
            server_hidden: vec![16],
        }
    }
}

/// Server parameters plus one embedding model per party.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    pub server: MlpModel,
    pub parties: Vec<MlpModel>,
}

impl GlobalModel {
    /// Binary problems get a single-logit server; otherwise one output per
    /// class.
    pub fn init(spec: &ModelSpec, feature_widths: &[usize], classes: usize, seed: u64) -> Result<Self> {
        if spec.embedding_width == 0 {
            return Err(Error::invalid("embedding width must be positive"));
        }
        let parties = feature_widths
            .iter()
            .enumerate()
            .map(|(m, &d)| {
                let mut widths = vec![d];
                widths.extend_from_slice(&spec.party_hidden);
                widths.push(spec.embedding_width);
                let acts = vec![Activation::Tanh; widths.len() - 1];
                init_model(&widths, &acts, rng::derive_seed(seed, &[tag::PARTY_INIT, m as u64]))
            })
            .collect::<Result<Vec<_>>>()?;
        let outputs = if classes == 2 { 1 } else { classes };
        let mut widths = vec![spec.embedding_width * feature_widths.len()];
        widths.extend_from_slice(&spec.server_hidden);
        widths.push(outputs);
        let mut acts = vec![Activation::Tanh; widths.len() - 1];
        *acts.last_mut().expect("at least one layer") = Activation::Identity;
        let server = init_model(&widths, &acts, rng::derive_seed(seed, &[tag::SERVER_INIT]))?;
        Ok(GlobalModel { server, parties })
    }

    pub fn embedding_widths(&self) -> Vec<usize> {
        self.parties.iter().map(MlpModel::output_width).collect()
    }

    /// Participant `m` with the server at index 0 and party `m` at `m`.
    pub fn block(&self, m: usize) -> &MlpModel {
        if m == 0 {
            &self.server
        } else {
            &self.parties[m - 1]
        }
    }

    pub fn block_mut(&mut self, m: usize) -> &mut MlpModel {
        if m == 0 {
            &mut self.server
        } else {
            &mut self.parties[m - 1]
        }
    }

    /// Number of parameter blocks, `M + 1`.
    pub fn blocks(&self) -> usize {
        self.parties.len() + 1
    }

    pub fn param_count(&self) -> usize {
        (0..self.blocks()).map(|m| self.block(m).param_count()).sum()
    }

    /// Largest absolute difference over all parameters of two models of the
    /// same shape.
    pub fn max_abs_diff(&self, other: &GlobalModel) -> f64 {
        let pairs = core::iter::once((&self.server, &other.server)).chain(self.parties.iter().zip(&other.parties));
        pairs
            .flat_map(|(a, b)| a.params().into_iter().zip(b.params()).map(|(x, y)| libm::fabs(x - y)))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSchedule {
    Fixed(f64),
    /// `eta0 / sqrt(t0 + 1)`. `sum eta` diverges; so does `sum eta^2`, but only
    /// logarithmically.
    Diminishing { eta0: f64 },
}

pub fn step_size(schedule: StepSchedule, t0: usize) -> f64 {
    match schedule {
        StepSchedule::Fixed(eta) => eta,
        StepSchedule::Diminishing { eta0 } => eta0 / libm::sqrt((t0 + 1) as f64),
    }
}

/// `(sum eta, sum eta^2)` over the first `rounds` rounds.
pub fn schedule_partial_sums(schedule: StepSchedule, rounds: usize) -> (f64, f64) {
    (0..rounds).fold((0.0, 0.0), |(s1, s2), t0| {
        let eta = step_size(schedule, t0);
        (s1 + eta, s2 + eta * eta)
    })
}

/// How codec parameters evolve across rounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CodecSchedule {
    #[default]
    Fixed,
    /// Round `t0` uses at least the precision whose worst-case error bound is
    /// `1 / sqrt(t0 + 1)`, so the compression error shrinks over training.
    DiminishingError,
}

/// Which value of its own block a party plugs into the fused view when it
/// computes its embedding gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OwnBlockView {
    /// Recompute the embedding from the party's current parameters at every
    /// local step.
    #[default]
    Fresh,
    /// Use the compressed block the party uploaded at the start of the
    /// round, the value everyone else sees. With `Q = 1` this reproduces the
    /// server-gradient protocol exactly.
    Broadcast,
}

/// Codec actually used in round `t0` for a `width x batch` message.
pub fn codec_for_round(
    spec: &CompressorSpec,
    schedule: CodecSchedule,
    t0: usize,
    batch: usize,
    width: usize,
) -> Result<CompressorSpec> {
    if schedule == CodecSchedule::Fixed {
        return Ok(*spec);
    }
    let t = (t0 + 1) as f64;
    let range = spec.value_max - spec.value_min;
    let mut out = *spec;
    match spec.effective_kind() {
        CompressorKind::None => {}
        CompressorKind::Scalar => {
            let q = compress::required_q(t, batch, width, spec.value_min, spec.value_max);
            out.bits = spec.bits.max(q.min(32) as u8);
        }
        CompressorKind::Lattice2d => {
            let v = compress::required_v(t, batch, width);
            let b = libm::ceil(libm::log2(range * range / v) / 2.0).max(1.0) as u8;
            out.bits = spec.bits.max(b.min(15));
        }
        CompressorKind::TopK => {
            let peak = libm::fmax(spec.value_min.abs(), spec.value_max.abs());
            let k = compress::required_k(t, batch, width, width as f64 * peak * peak);
            out = out.with_k(k.max(spec.topk_k(width)?));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// `Q`, local iterations per round.
    pub local_iters: usize,
    /// `R`, global rounds.
    pub rounds: usize,
    pub batch: usize,
    pub step: StepSchedule,
    /// One codec per party; the length fixes `M`.
    pub party_codecs: Vec<CompressorSpec>,
    /// Codec for the server parameters when `compress_server_model` is set.
    pub server_codec: CompressorSpec,
    pub compress_server_model: bool,
    pub codec_schedule: CodecSchedule,
    pub own_block: OwnBlockView,
    pub model: ModelSpec,
    pub seed: u64,
    /// Evaluate loss and gradient norm on the full dataset every round.
    pub track_full_metrics: bool,
}

impl TrainConfig {
    /// Same codec for every party, uncompressed server parameters, fixed
    /// codec schedule.
    pub fn new(parties: usize, local_iters: usize, rounds: usize, batch: usize, step: StepSchedule, codec: CompressorSpec) -> Self {
        TrainConfig {
            local_iters,
            rounds,
            batch,
            step,
            party_codecs: vec![codec; parties],
            server_codec: CompressorSpec::scalar(8).with_range(-2.0, 2.0),
            compress_server_model: false,
            codec_schedule: CodecSchedule::Fixed,
            own_block: OwnBlockView::Fresh,
            model: ModelSpec::default(),
            seed: 0,
            track_full_metrics: true,
        }
    }

    pub fn parties(&self) -> usize {
        self.party_codecs.len()
    }

    /// `T = R * Q`
    pub fn total_iters(&self) -> usize {
        self.rounds * self.local_iters
    }

    pub fn validate(&self, dataset: &VerticalDataset) -> Result<()> {
        if self.local_iters == 0 {
            return Err(Error::invalid("local iterations Q must be at least 1"));
        }
        if self.parties() != dataset.parties() {
            return Err(Error::invalid(alloc::format!(
                "{} party codecs for a dataset split over {} parties",
                self.parties(),
                dataset.parties()
            )));
        }
        if self.batch == 0 || self.batch > dataset.samples() {
            return Err(Error::invalid(alloc::format!(
                "batch size {} must be in 1..={}",
                self.batch,
                dataset.samples()
            )));
        }
        let eta = match self.step {
            StepSchedule::Fixed(eta) => eta,
            StepSchedule::Diminishing { eta0 } => eta0,
        };
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::invalid("step size must be positive and finite"));
        }
        for spec in &self.party_codecs {
            spec.validate()?;
        }
        if self.compress_server_model {
            self.server_codec.validate()?;
        }
        if self.batch > u32::MAX as usize || self.parties() >= u16::MAX as usize {
            return Err(Error::invalid("batch or party count exceeds wire header fields"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartyState {
    pub id: usize,
    pub model: MlpModel,
    /// Per-row mean magnitude of the last embedding gradient this party
    /// received; the selection score for stale-gradient top-k.
    pub stale_grad: Option<Vec<f64>>,
}

/// The compressed view shared by all participants during one round.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache {
    pub round: usize,
    pub batch: Vec<usize>,
    /// Server model as the parties see it (decompressed if the server
    /// parameters are compressed).
    pub server_view: MlpModel,
    /// Decoded party blocks, `P_m x B` each.
    pub blocks: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub model: MlpModel,
    pub cache: Option<EmbeddingCache>,
}

/// Cumulative bytes. `up`/`down` count encoded wire messages including
/// headers; the `paper_` counters count transmitted values only, with
/// uncompressed values at 32 bits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTotals {
    pub up: u64,
    pub down: u64,
    pub paper_up: u64,
    pub paper_down: u64,
}

/// Mutable protocol state: every participant's parameters plus counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Federation {
    pub parties: Vec<PartyState>,
    pub server: ServerState,
    pub bytes: ByteTotals,
}

impl Federation {
    pub fn new(model: GlobalModel) -> Self {
        Federation {
            parties: model
                .parties
                .into_iter()
                .enumerate()
                .map(|(id, model)| PartyState {
                    id,
                    model,
                    stale_grad: None,
                })
                .collect(),
            server: ServerState {
                model: model.server,
                cache: None,
            },
            bytes: ByteTotals::default(),
        }
    }

    pub fn model(&self) -> GlobalModel {
        GlobalModel {
            server: self.server.model.clone(),
            parties: self.parties.iter().map(|p| p.model.clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    /// Full-data loss at the start of the round (NaN when not tracked).
    pub loss: f64,
    /// `||grad F||^2` over all blocks at the start of the round.
    pub grad_sq_norm: f64,
    /// Squared compression error per message: index 0 is the server
    /// parameters, index `m` is party `m`'s embedding batch.
    pub errors: Vec<f64>,
    /// Cumulative counters after this round's communication.
    pub bytes: ByteTotals,
    pub step_size: f64,
    /// Wall-clock milliseconds; filled in by callers that own a clock.
    pub ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsSeries {
    pub rows: Vec<RoundMetrics>,
}

impl MetricsSeries {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Mean of `||grad F||^2` over the recorded rounds.
    pub fn avg_grad_sq_norm(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.grad_sq_norm).sum::<f64>() / self.rows.len() as f64
    }
}

/// Loss and exact gradients of `F` on a set of samples, all views raw.
#[derive(Clone, Debug, PartialEq)]
pub struct JointGradient {
    pub loss: f64,
    pub server: GradientSet,
    pub parties: Vec<GradientSet>,
}

impl JointGradient {
    /// Gradient block `m`, server at index 0.
    pub fn block(&self, m: usize) -> &GradientSet {
        if m == 0 {
            &self.server
        } else {
            &self.parties[m - 1]
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.server.norm_sq() + self.parties.iter().map(GradientSet::norm_sq).sum::<f64>()
    }
}

pub fn joint_gradient(model: &GlobalModel, dataset: &VerticalDataset, indices: &[usize]) -> Result<JointGradient> {
    let features: Vec<Matrix> = (0..model.parties.len()).map(|m| dataset.party_features(m, indices)).collect();
    let embeddings = model
        .parties
        .iter()
        .zip(&features)
        .map(|(p, x)| forward_embedding(p, x))
        .collect::<Result<Vec<_>>>()?;
    let phi = Matrix::vstack(&embeddings.iter().collect::<Vec<_>>())?;
    let back = backward_all(&model.server, &phi, &dataset.batch_labels(indices))?;
    let upstream = back.party_blocks(&model.embedding_widths())?;
    let parties = model
        .parties
        .iter()
        .zip(&features)
        .zip(&upstream)
        .map(|((p, x), g)| backward_embedding(p, x, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(JointGradient {
        loss: back.loss,
        server: back.server_grad,
        parties,
    })
}

/// `(F(Theta), ||grad F(Theta)||^2)` over the whole dataset.
pub fn evaluate_full(model: &GlobalModel, dataset: &VerticalDataset) -> Result<(f64, f64)> {
    let all: Vec<usize> = (0..dataset.samples()).collect();
    let g = joint_gradient(model, dataset, &all)?;
    Ok((g.loss, g.norm_sq()))
}

/// Fraction of samples whose predicted class matches the label.
pub fn accuracy(model: &GlobalModel, dataset: &VerticalDataset) -> Result<f64> {
    if dataset.samples() == 0 {
        return Ok(0.0);
    }
    let all: Vec<usize> = (0..dataset.samples()).collect();
    let embeddings = model
        .parties
        .iter()
        .enumerate()
        .map(|(m, p)| forward_embedding(p, &dataset.party_features(m, &all)))
        .collect::<Result<Vec<_>>>()?;
    let logits = model.server.forward(&Matrix::vstack(&embeddings.iter().collect::<Vec<_>>())?)?;
    let correct = dataset
        .labels()
        .iter()
        .enumerate()
        .filter(|&(j, &y)| {
            let predicted = if logits.rows() == 1 {
                usize::from(logits.get(0, j) > 0.0)
            } else {
                (0..logits.rows())
                    .max_by(|&a, &b| logits.get(a, j).total_cmp(&logits.get(b, j)).then(b.cmp(&a)))
                    .unwrap_or(0)
            };
            predicted == y
        })
        .count();
    Ok(correct as f64 / dataset.samples() as f64)
}

fn diverged(round: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged {
            round,
            cause: e.to_string(),
        },
        other => other,
    }
}

fn check_finite(model: &MlpModel, what: &'static str, index: usize) -> Result<()> {
    if model.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what, index })
    }
}

fn paper_bytes(bits: u64) -> u64 {
    bits.div_ceil(8)
}

/// One encoded and decoded message.
struct Transfer {
    wire_len: u64,
    paper_len: u64,
    error_sq: f64,
    decoded: Matrix,
}

fn send(values: &Matrix, spec: &CompressorSpec, key: DitherKey, stale: Option<&Matrix>) -> Result<Transfer> {
    let c = compress(values, spec, key, stale)?;
    let bytes = encode_wire(&c);
    let expect = WireExpectation {
        spec,
        key,
        batch: values.cols(),
        width: values.rows(),
    };
    let decoded = decode_wire(&bytes, &expect)?.reconstructed;
    Ok(Transfer {
        wire_len: bytes.len() as u64,
        paper_len: paper_bytes(c.paper_bits),
        error_sq: c.error_sq_fro,
        decoded,
    })
}

fn send_raw(values: &Matrix, key: DitherKey) -> Result<Transfer> {
    let bytes = encode_raw(values, key);
    let spec = CompressorSpec::none();
    let expect = WireExpectation {
        spec: &spec,
        key,
        batch: values.cols(),
        width: values.rows(),
    };
    let decoded = decode_wire(&bytes, &expect)?.reconstructed;
    Ok(Transfer {
        wire_len: bytes.len() as u64,
        paper_len: paper_bytes(32 * values.data().len() as u64),
        error_sq: 0.0,
        decoded,
    })
}

fn party_key(config: &TrainConfig, t0: usize, party: usize) -> DitherKey {
    DitherKey::new(config.seed, t0 as u32, (party + 1) as u16)
}

fn upload(party: &PartyState, dataset: &VerticalDataset, batch: &[usize], config: &TrainConfig, t0: usize) -> Result<Transfer> {
    let x = dataset.party_features(party.id, batch);
    let h = forward_embedding(&party.model, &x)?;
    let spec = codec_for_round(&config.party_codecs[party.id], config.codec_schedule, t0, batch.len(), h.rows())?;
    let stale = match (spec.selection, &party.stale_grad) {
        (SelectionMode::StaleGradient, Some(score)) => Some(Matrix::from_fn(h.rows(), h.cols(), |r, _| score[r])),
        _ => None,
    };
    send(&h, &spec, party_key(config, t0, party.id), stale.as_ref())
}

/// The server parameters as broadcast to the parties.
fn broadcast_server(server: &MlpModel, config: &TrainConfig, t0: usize) -> Result<(MlpModel, Transfer)> {
    let params = server.params();
    let key = DitherKey::new(config.seed, t0 as u32, 0);
    if !config.compress_server_model {
        let raw = Matrix::from_vec(params.len(), 1, params)?;
        let t = send_raw(&raw, key)?;
        return Ok((server.clone(), t));
    }
    let spec = &config.server_codec;
    let clamped: Vec<f64> = params.iter().map(|p| p.clamp(spec.value_min, spec.value_max)).collect();
    let mut t = send(&Matrix::from_vec(params.len(), 1, clamped)?, spec, key, None)?;
    // count clamping as part of the compression error
    t.error_sq = t.decoded.data().iter().zip(&params).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((server.with_params(t.decoded.data())?, t))
}

fn score_rows(upstream: &Matrix) -> Vec<f64> {
    (0..upstream.rows())
        .map(|r| upstream.row(r).iter().map(|g| g.abs()).sum::<f64>() / upstream.cols() as f64)
        .collect()
}

fn party_local_steps(
    mut party: PartyState,
    dataset: &VerticalDataset,
    cache: &EmbeddingCache,
    labels: &[usize],
    config: &TrainConfig,
    eta: f64,
) -> Result<PartyState> {
    let m = party.id;
    let x = dataset.party_features(m, &cache.batch);
    let widths: Vec<usize> = cache.blocks.iter().map(Matrix::rows).collect();
    let mut upstream = None;
    for _ in 0..config.local_iters {
        let fresh;
        let own = match config.own_block {
            OwnBlockView::Fresh => {
                fresh = forward_embedding(&party.model, &x)?;
                &fresh
            }
            OwnBlockView::Broadcast => &cache.blocks[m],
        };
        let mut view: Vec<&Matrix> = cache.blocks.iter().collect();
        view[m] = own;
        let back = backward_all(&cache.server_view, &Matrix::vstack(&view)?, labels)?;
        let g = back.party_blocks(&widths)?.swap_remove(m);
        let grad = backward_embedding(&party.model, &x, &g)?;
        party.model.apply_gradient(&grad, eta)?;
        check_finite(&party.model, "party parameters", m + 1)?;
        upstream = Some(g);
    }
    party.stale_grad = upstream.as_ref().map(score_rows);
    Ok(party)
}

fn metrics_start(fed: &Federation, dataset: &VerticalDataset, config: &TrainConfig, t0: usize) -> Result<(f64, f64)> {
    if !config.track_full_metrics {
        return Ok((f64::NAN, f64::NAN));
    }
    let (loss, grad) = evaluate_full(&fed.model(), dataset).map_err(diverged(t0))?;
    if !grad.is_finite() {
        return Err(Error::Diverged {
            round: t0,
            cause: "non-finite full gradient".to_string(),
        });
    }
    Ok((loss, grad))
}

/// One round of the multi-step protocol, advancing `fed` from `Theta^{t0}`
/// to the start of round `t0 + 1`.
pub fn run_global_round<E: Executor>(
    fed: &mut Federation,
    dataset: &VerticalDataset,
    config: &TrainConfig,
    t0: usize,
    exec: &E,
) -> Result<RoundMetrics> {
    let (loss, grad_sq_norm) = metrics_start(fed, dataset, config, t0)?;
    let batch = sample_minibatch(dataset.samples(), config.batch, t0, config.seed)?.indices;
    let labels = dataset.batch_labels(&batch);
    let eta = step_size(config.step, t0);

    let uploads = exec
        .map(fed.parties.iter().collect(), |p| upload(p, dataset, &batch, config, t0))
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map_err(diverged(t0))?;
    let (server_view, theta) = broadcast_server(&fed.server.model, config, t0)?;

    let m = uploads.len() as u64;
    let up: u64 = uploads.iter().map(|u| u.wire_len).sum();
    let paper_up: u64 = uploads.iter().map(|u| u.paper_len).sum();
    // party m receives every other party's block plus the server parameters
    fed.bytes.up += up;
    fed.bytes.paper_up += paper_up;
    fed.bytes.down += (m - 1) * up + m * theta.wire_len;
    fed.bytes.paper_down += (m - 1) * paper_up + m * theta.paper_len;

    let mut errors = vec![theta.error_sq];
    errors.extend(uploads.iter().map(|u| u.error_sq));
    let cache = EmbeddingCache {
        round: t0,
        batch,
        server_view,
        blocks: uploads.into_iter().map(|u| u.decoded).collect(),
    };

    let parties = core::mem::take(&mut fed.parties);
    fed.parties = exec
        .map(parties, |p| party_local_steps(p, dataset, &cache, &labels, config, eta))
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map_err(diverged(t0))?;

    let phi = Matrix::vstack(&cache.blocks.iter().collect::<Vec<_>>())?;
    for _ in 0..config.local_iters {
        let back = backward_all(&fed.server.model, &phi, &labels).map_err(diverged(t0))?;
        fed.server.model.apply_gradient(&back.server_grad, eta)?;
        check_finite(&fed.server.model, "server parameters", 0).map_err(diverged(t0))?;
    }
    fed.server.cache = Some(cache);

    Ok(RoundMetrics {
        round: t0,
        loss,
        grad_sq_norm,
        errors,
        bytes: fed.bytes,
        step_size: eta,
        ms: 0.0,
    })
}

/// One round of the single-step protocol: the server steps at the fused
/// compressed view and returns `dF/dh_m` to each party uncompressed.
pub fn run_q1_round<E: Executor>(
    fed: &mut Federation,
    dataset: &VerticalDataset,
    config: &TrainConfig,
    t0: usize,
    exec: &E,
) -> Result<RoundMetrics> {
    if config.local_iters != 1 {
        return Err(Error::invalid("the server-gradient protocol requires Q = 1"));
    }
    let (loss, grad_sq_norm) = metrics_start(fed, dataset, config, t0)?;
    let batch = sample_minibatch(dataset.samples(), config.batch, t0, config.seed)?.indices;
    let labels = dataset.batch_labels(&batch);
    let eta = step_size(config.step, t0);

    let uploads = exec
        .map(fed.parties.iter().collect(), |p| upload(p, dataset, &batch, config, t0))
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map_err(diverged(t0))?;
    fed.bytes.up += uploads.iter().map(|u| u.wire_len).sum::<u64>();
    fed.bytes.paper_up += uploads.iter().map(|u| u.paper_len).sum::<u64>();
    let mut errors = vec![0.0];
    errors.extend(uploads.iter().map(|u| u.error_sq));

    let blocks: Vec<Matrix> = uploads.into_iter().map(|u| u.decoded).collect();
    let widths: Vec<usize> = blocks.iter().map(Matrix::rows).collect();
    let back = backward_all(&fed.server.model, &Matrix::vstack(&blocks.iter().collect::<Vec<_>>())?, &labels)
        .map_err(diverged(t0))?;
    fed.server.model.apply_gradient(&back.server_grad, eta)?;
    check_finite(&fed.server.model, "server parameters", 0).map_err(diverged(t0))?;

    let grads = back
        .party_blocks(&widths)?
        .iter()
        .enumerate()
        .map(|(m, g)| send_raw(g, party_key(config, t0, m)))
        .collect::<Result<Vec<_>>>()?;
    fed.bytes.down += grads.iter().map(|g| g.wire_len).sum::<u64>();
    fed.bytes.paper_down += grads.iter().map(|g| g.paper_len).sum::<u64>();

    let parties = core::mem::take(&mut fed.parties);
    let work: Vec<(PartyState, Matrix)> = parties.into_iter().zip(grads.into_iter().map(|g| g.decoded)).collect();
    fed.parties = exec
        .map(work, |(mut party, g)| {
            let x = dataset.party_features(party.id, &batch);
            let grad = backward_embedding(&party.model, &x, &g)?;
            party.model.apply_gradient(&grad, eta)?;
            check_finite(&party.model, "party parameters", party.id + 1)?;
            party.stale_grad = Some(score_rows(&g));
            Ok(party)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map_err(diverged(t0))?;
    fed.server.cache = None;

    Ok(RoundMetrics {
        round: t0,
        loss,
        grad_sq_norm,
        errors,
        bytes: fed.bytes,
        step_size: eta,
        ms: 0.0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub metrics: MetricsSeries,
    pub model: GlobalModel,
    pub bytes: ByteTotals,
}

/// Which round function a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Protocol {
    #[default]
    MultiStep,
    ServerGradient,
}

/// Full run from an explicit starting model. `on_round` sees every row
/// before it is stored.
pub fn run_training_from<E: Executor>(
    config: &TrainConfig,
    dataset: &VerticalDataset,
    initial: GlobalModel,
    protocol: Protocol,
    exec: &E,
    mut on_round: impl FnMut(&mut RoundMetrics),
) -> Result<TrainOutcome> {
    config.validate(dataset)?;
    let mut fed = Federation::new(initial);
    let mut rows = Vec::with_capacity(config.rounds);
    for t0 in 0..config.rounds {
        let mut row = match protocol {
            Protocol::MultiStep => run_global_round(&mut fed, dataset, config, t0, exec)?,
            Protocol::ServerGradient => run_q1_round(&mut fed, dataset, config, t0, exec)?,
        };
        on_round(&mut row);
        rows.push(row);
    }
    Ok(TrainOutcome {
        metrics: MetricsSeries { rows },
        model: fed.model(),
        bytes: fed.bytes,
    })
}

pub fn initial_model(config: &TrainConfig, dataset: &VerticalDataset) -> Result<GlobalModel> {
    GlobalModel::init(&config.model, &dataset.feature_widths(), dataset.classes(), config.seed)
}

pub fn run_training(config: &TrainConfig, dataset: &VerticalDataset) -> Result<MetricsSeries> {
    let init = initial_model(config, dataset)?;
    Ok(run_training_from(config, dataset, init, Protocol::MultiStep, &Sequential, |_| {})?.metrics)
}

pub fn run_training_q1(config: &TrainConfig, dataset: &VerticalDataset) -> Result<MetricsSeries> {
    let init = initial_model(config, dataset)?;
    Ok(run_training_from(config, dataset, init, Protocol::ServerGradient, &Sequential, |_| {})?.metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_teacher_dataset;

    fn setup(parties: usize, q: usize, codec: CompressorSpec) -> (VerticalDataset, TrainConfig) {
        let ds = synthetic_teacher_dataset(60, 6, 3, parties, 7).unwrap();
        let mut cfg = TrainConfig::new(parties, q, 3, 8, StepSchedule::Fixed(0.1), codec);
        cfg.model = ModelSpec {
            party_hidden: vec![],
            embedding_width: 2,
            server_hidden: vec![],
        };
        (ds, cfg)
    }

    #[test]
    fn step_sizes() {
        assert_eq!(step_size(StepSchedule::Fixed(0.1), 17), 0.1);
        let d = StepSchedule::Diminishing { eta0: 1.0 };
        assert_eq!(step_size(d, 0), 1.0);
        assert_eq!(step_size(d, 3), 0.5);
    }

    #[test]
    fn zero_rounds_leave_model_untouched() {
        let (ds, mut cfg) = setup(2, 1, CompressorSpec::none());
        cfg.rounds = 0;
        let init = initial_model(&cfg, &ds).unwrap();
        let out = run_training_from(&cfg, &ds, init.clone(), Protocol::MultiStep, &Sequential, |_| {}).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.model, init);
    }

    #[test]
    fn identity_round_bytes() {
        let (ds, cfg) = setup(3, 1, CompressorSpec::none());
        let mut fed = Federation::new(initial_model(&cfg, &ds).unwrap());
        let row = run_global_round(&mut fed, &ds, &cfg, 0, &Sequential).unwrap();
        let msg = 27 + 8 * 8 * 2;
        let theta = 27 + 8 * fed.server.model.param_count() as u64;
        assert_eq!(row.bytes.up, 3 * msg);
        assert_eq!(row.bytes.up + row.bytes.down, 3 * (3 * msg + theta));
        assert!(row.errors.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn q1_protocol_rejects_q2() {
        let (ds, cfg) = setup(2, 2, CompressorSpec::none());
        assert!(run_training_q1(&cfg, &ds).is_err());
    }

    #[test]
    fn compressed_server_view_reports_error() {
        let (ds, mut cfg) = setup(2, 1, CompressorSpec::scalar(2));
        cfg.compress_server_model = true;
        let series = run_training(&cfg, &ds).unwrap();
        assert!(series.rows.iter().all(|r| r.errors[0] > 0.0));
    }

    #[test]
    fn diminishing_codec_schedule_raises_bits() {
        let spec = CompressorSpec::scalar(2);
        let early = codec_for_round(&spec, CodecSchedule::DiminishingError, 0, 8, 4).unwrap();
        let late = codec_for_round(&spec, CodecSchedule::DiminishingError, 10_000, 8, 4).unwrap();
        assert!(late.bits > early.bits);
        assert_eq!(codec_for_round(&spec, CodecSchedule::Fixed, 10_000, 8, 4).unwrap(), spec);
    }

    #[test]
    fn huge_step_diverges_with_round_index() {
        let (ds, mut cfg) = setup(2, 1, CompressorSpec::none());
        cfg.step = StepSchedule::Fixed(f64::MAX);
        cfg.rounds = 5;
        match run_training(&cfg, &ds) {
            Err(Error::Diverged { round, .. }) => assert!(round < 5),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
