//! Running configured experiments and writing their output files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cvfl_core::analysis::{estimate_constants, lemma1_check, theorem1_rhs, EstimationDomain};
use cvfl_core::data::{partition_features, synthetic_teacher_dataset, VerticalDataset};
use cvfl_core::protocol::{
    accuracy, evaluate_full, initial_model, run_training_from, Executor, MetricsSeries, Sequential, TrainConfig,
    TrainOutcome,
};
use cvfl_core::rng::{self, tag};
use rand::seq::SliceRandom;

use crate::config::{DatasetSource, ExperimentConfig};
use crate::csvio::{load_csv, metrics_csv};
use crate::error::{Error, Result};
use crate::exec::Threaded;

/// Version of the `metrics.csv` / `manifest.txt` layout.
pub const FORMAT_VERSION: u32 = 1;

/// Training split and optional held-out split.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub train: VerticalDataset,
    pub holdout: Option<VerticalDataset>,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Datasets> {
    let full = match &cfg.dataset {
        DatasetSource::Synthetic {
            samples,
            features,
            classes,
        } => {
            let ds = synthetic_teacher_dataset(*samples, *features, *classes, cfg.parties, cfg.seed)?;
            if cfg.partition == cvfl_core::data::PartitionScheme::Contiguous {
                ds
            } else {
                partition_features(&ds.reassemble(), ds.labels(), cfg.parties, cfg.partition, cfg.seed)?
                    .with_classes(*classes)?
            }
        }
        DatasetSource::Csv { path, label_column } => {
            let table = load_csv(path, label_column)?;
            let ds = partition_features(&table.features, &table.labels, cfg.parties, cfg.partition, cfg.seed)?;
            let classes = ds.classes().max(2);
            ds.with_classes(classes)?
        }
    };
    if cfg.holdout == 0.0 {
        return Ok(Datasets {
            train: full,
            holdout: None,
        });
    }
    let mut order: Vec<usize> = (0..full.samples()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, &[tag::PARTITION, 1]));
    let held = ((full.samples() as f64) * cfg.holdout).round() as usize;
    let (test, train) = order.split_at(held);
    Ok(Datasets {
        train: full.subset(train),
        holdout: Some(full.subset(test)),
    })
}

/// What a finished run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub outcome: TrainOutcome,
    pub train_accuracy: f64,
    pub holdout_accuracy: Option<f64>,
    pub files: Vec<PathBuf>,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains with the configured executor; `ms` is filled in when timing is on.
pub fn train(cfg: &ExperimentConfig, train_cfg: &TrainConfig, dataset: &VerticalDataset) -> Result<TrainOutcome> {
    fn go<E: Executor>(
        cfg: &ExperimentConfig,
        t: &TrainConfig,
        ds: &VerticalDataset,
        exec: &E,
    ) -> cvfl_core::Result<TrainOutcome> {
        let mut last = Instant::now();
        let timing = cfg.timing;
        run_training_from(t, ds, initial_model(t, ds)?, cfg.protocol, exec, |row| {
            if timing {
                let now = Instant::now();
                row.ms = now.duration_since(last).as_secs_f64() * 1e3;
                last = now;
            }
        })
    }
    let outcome = if cfg.parallel {
        go(cfg, train_cfg, dataset, &Threaded)?
    } else {
        go(cfg, train_cfg, dataset, &Sequential)?
    };
    Ok(outcome)
}

/// Runs one experiment and writes `metrics.csv`, `manifest.txt` and, when
/// requested, `bound_reports.csv` into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let metrics_path = cfg.out.join("metrics.csv");
    // fail on an unwritable directory before spending any compute
    fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;

    let data = load_dataset(cfg)?;
    let train_cfg = cfg.train_config(&data.train)?;
    let outcome = train(cfg, &train_cfg, &data.train)?;
    write_file(&metrics_path, &metrics_csv(&outcome.metrics, cfg.parties))?;
    let mut files = vec![metrics_path];

    let train_accuracy = accuracy(&outcome.model, &data.train)?;
    let holdout_accuracy = data.holdout.as_ref().map(|h| accuracy(&outcome.model, h)).transpose()?;

    if cfg.bound_reports {
        let path = cfg.out.join("bound_reports.csv");
        write_file(&path, &bound_reports(cfg, &train_cfg, &data.train, &outcome)?)?;
        files.push(path);
    }

    let manifest_path = cfg.out.join("manifest.txt");
    let (final_loss, _) = evaluate_full(&outcome.model, &data.train)?;
    let mut m = String::new();
    let _ = writeln!(m, "format_version = {FORMAT_VERSION}");
    let _ = writeln!(m, "cvfl_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "seed = {}", cfg.seed);
    let _ = writeln!(m, "\n[config]\n{}", cfg.echo().trim_end());
    let widths: Vec<String> = data.train.feature_widths().iter().map(usize::to_string).collect();
    let _ = writeln!(
        m,
        "\n[dataset]\ntrain_samples = {}\nholdout_samples = {}\nclasses = {}\nfeature_widths = {}",
        data.train.samples(),
        data.holdout.as_ref().map_or(0, VerticalDataset::samples),
        data.train.classes(),
        widths.join(",")
    );
    let _ = writeln!(
        m,
        "\n[result]\nrounds = {}\nfinal_loss = {final_loss}\nup_bytes = {}\ndown_bytes = {}\npaper_up_bytes = {}\npaper_down_bytes = {}\ntrain_accuracy = {train_accuracy}",
        outcome.metrics.len(),
        outcome.bytes.up,
        outcome.bytes.down,
        outcome.bytes.paper_up,
        outcome.bytes.paper_down
    );
    if let Some(a) = holdout_accuracy {
        let _ = writeln!(m, "holdout_accuracy = {a}");
    }
    write_file(&manifest_path, &m)?;
    files.push(manifest_path);

    Ok(ExperimentResult {
        outcome,
        train_accuracy,
        holdout_accuracy,
        files,
    })
}

/// Lemma checks at three probes of the initial model plus the fixed-step
/// bound for the finished run, as CSV.
fn bound_reports(
    cfg: &ExperimentConfig,
    train_cfg: &TrainConfig,
    dataset: &VerticalDataset,
    outcome: &TrainOutcome,
) -> Result<String> {
    let init = initial_model(train_cfg, dataset)?;
    let domain = EstimationDomain::new(cfg.seed, 3, cfg.batch.min(dataset.samples()));
    let constants = estimate_constants(&init, dataset, &domain)?;
    let mut out = String::from("check,probe,participant,lhs,rhs,ratio,pass\n");
    for case in lemma1_check(&init, dataset, &cfg.codec(), &constants, domain.probes, cfg.seed)? {
        let r = case.report;
        let _ = writeln!(out, "lemma1,{},{},{},{},{},{}", case.probe, case.participant, r.lhs, r.rhs, r.ratio, r.pass);
    }
    if let cvfl_core::protocol::StepSchedule::Fixed(_) = train_cfg.step {
        if !outcome.metrics.is_empty() {
            let f0 = outcome.metrics.rows[0].loss;
            let (ft, _) = evaluate_full(&outcome.model, dataset)?;
            let errors: Vec<Vec<f64>> = outcome.metrics.rows.iter().map(|r| r.errors.clone()).collect();
            let terms = theorem1_rhs(train_cfg, &constants, f0, ft, &errors)?;
            let lhs = outcome.metrics.avg_grad_sq_norm();
            let rhs = terms.total();
            let _ = writeln!(
                out,
                "theorem1,,,{lhs},{rhs},{},{}",
                lhs / rhs,
                lhs <= rhs && terms.precondition_met
            );
        }
    }
    Ok(out)
}

/// Bytes needed by one series to reach the target loss.
#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub label: String,
    /// First round whose starting loss is at or below the target.
    pub round: Option<usize>,
    /// Uploaded plus downloaded wire bytes (headers included) spent before
    /// that round.
    pub wire_bytes: Option<u64>,
    /// The same under the values-only, 32-bit-uncompressed convention.
    pub paper_bytes: Option<u64>,
}

/// Bytes spent before the first round that starts at or below `target`.
pub fn comm_cost_report(series: &[(String, &MetricsSeries)], target: f64) -> Vec<CostRow> {
    series
        .iter()
        .map(|(label, s)| {
            let hit = s.rows.iter().position(|r| r.loss <= target);
            let spent = |i: usize| {
                if i == 0 {
                    (0, 0)
                } else {
                    let b = s.rows[i - 1].bytes;
                    (b.up + b.down, b.paper_up + b.paper_down)
                }
            };
            CostRow {
                label: label.clone(),
                round: hit,
                wire_bytes: hit.map(|i| spent(i).0),
                paper_bytes: hit.map(|i| spent(i).1),
            }
        })
        .collect()
}

/// Fixed-width text table; unreached targets show `--`.
pub fn render_cost_table(rows: &[CostRow], target: f64) -> String {
    let mut out = format!("target loss {target}\n");
    let _ = writeln!(out, "{:<24} {:>8} {:>14} {:>14}", "run", "round", "wire MB", "paper MB");
    let mb = |b: Option<u64>| b.map_or("--".to_string(), |b| format!("{:.6}", b as f64 / 1e6));
    for r in rows {
        let _ = writeln!(
            out,
            "{:<24} {:>8} {:>14} {:>14}",
            r.label,
            r.round.map_or("--".to_string(), |x| x.to_string()),
            mb(r.wire_bytes),
            mb(r.paper_bytes)
        );
    }
    out
}

/// CSV form of the cost table.
pub fn cost_csv(rows: &[CostRow]) -> String {
    let mut out = String::from("run,round,wire_bytes,paper_bytes\n");
    let cell = |v: Option<u64>| v.map_or("--".to_string(), |x| x.to_string());
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.label,
            r.round.map_or("--".to_string(), |x| x.to_string()),
            cell(r.wire_bytes),
            cell(r.paper_bytes)
        );
    }
    out
}
