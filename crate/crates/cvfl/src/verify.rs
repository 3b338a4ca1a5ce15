//! The `cvfl verify` suite: perturbation-bound checks for every codec and
//! the fixed-step convergence bound on a tiny seeded instance.

use cvfl_core::analysis::{estimate_constants, lemma1_check, theorem1_rhs, BoundReport, EstimationDomain};
use cvfl_core::compress::CompressorSpec;
use cvfl_core::data::{synthetic_teacher_dataset, VerticalDataset};
use cvfl_core::protocol::{
    evaluate_full, run_training_from, GlobalModel, ModelSpec, Protocol, Sequential, StepSchedule, TrainConfig,
};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyLine {
    pub name: String,
    pub report: BoundReport,
}

/// A two-party instance small enough for dense probing.
pub fn tiny_instance(seed: u64) -> Result<(GlobalModel, VerticalDataset)> {
    let ds = synthetic_teacher_dataset(48, 6, 3, 2, seed)?;
    let spec = ModelSpec {
        party_hidden: vec![3],
        embedding_width: 2,
        server_hidden: vec![],
    };
    let model = GlobalModel::init(&spec, &ds.feature_widths(), ds.classes(), seed)?;
    Ok((model, ds))
}

pub fn lemma_codecs() -> [(&'static str, CompressorSpec); 3] {
    [
        ("scalar q=2", CompressorSpec::scalar(2)),
        ("vector b=2", CompressorSpec::lattice2d(2)),
        ("topk k=1", CompressorSpec::topk(16)),
    ]
}

/// Runs every check; callers decide what to do with failures.
pub fn run_verification(seed: u64) -> Result<Vec<VerifyLine>> {
    let (model, ds) = tiny_instance(seed)?;
    let batch = 8;
    let domain = EstimationDomain::new(seed, 3, batch);
    let constants = estimate_constants(&model, &ds, &domain)?;
    let mut lines = Vec::new();
    for (name, codec) in lemma_codecs() {
        for case in lemma1_check(&model, &ds, &codec, &constants, domain.probes, seed)? {
            lines.push(VerifyLine {
                name: format!("lemma1 {name} probe {} participant {}", case.probe, case.participant),
                report: case.report,
            });
        }
    }

    let eta = 0.5 * constants.max_step(2);
    let mut cfg = TrainConfig::new(2, 2, 40, batch, StepSchedule::Fixed(eta), CompressorSpec::scalar(2));
    cfg.model = ModelSpec {
        party_hidden: vec![3],
        embedding_width: 2,
        server_hidden: vec![],
    };
    cfg.seed = seed;
    let out = run_training_from(&cfg, &ds, model, Protocol::MultiStep, &Sequential, |_| {})?;
    let errors: Vec<Vec<f64>> = out.metrics.rows.iter().map(|r| r.errors.clone()).collect();
    let (f_final, _) = evaluate_full(&out.model, &ds)?;
    let terms = theorem1_rhs(&cfg, &constants, out.metrics.rows[0].loss, f_final, &errors)?;
    lines.push(VerifyLine {
        name: "theorem1 fixed step".to_string(),
        report: BoundReport::new(out.metrics.avg_grad_sq_norm(), terms.total(), 0.0),
    });
    Ok(lines)
}
