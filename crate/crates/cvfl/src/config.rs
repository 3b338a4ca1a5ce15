//! Experiment configuration: `key = value` lines, `#` comments, optional
//! `[section]` headers (which only group keys visually).

use std::fmt::Write as _;
use std::path::PathBuf;

use cvfl_core::compress::{CompressorSpec, SelectionMode};
use cvfl_core::data::{PartitionScheme, VerticalDataset};
use cvfl_core::protocol::{CodecSchedule, ModelSpec, OwnBlockView, Protocol, StepSchedule, TrainConfig};

use crate::error::{Error, Result};

/// Keys every config must set.
pub const REQUIRED_KEYS: [&str; 6] = ["dataset", "M", "Q", "rounds", "compressor", "bits"];

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synthetic { samples: usize, features: usize, classes: usize },
    Csv { path: PathBuf, label_column: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodecChoice {
    None,
    Scalar,
    /// The 2-D hexagonal lattice quantizer.
    Vector,
    TopK,
}

impl CodecChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(CodecChoice::None),
            "scalar" => Some(CodecChoice::Scalar),
            "vector" | "lattice" | "lattice2d" => Some(CodecChoice::Vector),
            "topk" | "top-k" => Some(CodecChoice::TopK),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CodecChoice::None => "none",
            CodecChoice::Scalar => "scalar",
            CodecChoice::Vector => "vector",
            CodecChoice::TopK => "topk",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub partition: PartitionScheme,
    /// Fraction of samples held out of training and used only for accuracy.
    pub holdout: f64,
    pub parties: usize,
    pub local_iters: usize,
    pub rounds: usize,
    pub batch: usize,
    pub compressor: CodecChoice,
    pub bits: u8,
    pub value_min: f64,
    pub value_max: f64,
    pub dither: bool,
    pub selection: SelectionMode,
    pub topk_k: Option<usize>,
    pub step: f64,
    pub diminishing_step: bool,
    pub codec_schedule: CodecSchedule,
    pub compress_server: bool,
    pub server_bits: u8,
    pub server_min: f64,
    pub server_max: f64,
    pub embedding_width: usize,
    pub party_hidden: Vec<usize>,
    pub server_hidden: Vec<usize>,
    pub protocol: Protocol,
    pub own_block: OwnBlockView,
    pub seed: u64,
    pub out: PathBuf,
    pub parallel: bool,
    pub timing: bool,
    pub bound_reports: bool,
    pub target_loss: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic {
                samples: 1000,
                features: 16,
                classes: 4,
            },
            partition: PartitionScheme::Contiguous,
            holdout: 0.0,
            parties: 4,
            local_iters: 10,
            rounds: 100,
            batch: 64,
            compressor: CodecChoice::None,
            bits: 32,
            value_min: -1.0,
            value_max: 1.0,
            dither: true,
            selection: SelectionMode::Magnitude,
            topk_k: None,
            step: 0.1,
            diminishing_step: false,
            codec_schedule: CodecSchedule::Fixed,
            compress_server: false,
            server_bits: 8,
            server_min: -2.0,
            server_max: 2.0,
            embedding_width: 4,
            party_hidden: vec![16],
            server_hidden: vec![16],
            protocol: Protocol::MultiStep,
            own_block: OwnBlockView::Fresh,
            seed: 0,
            out: PathBuf::from("out"),
            parallel: false,
            timing: false,
            bound_reports: false,
            target_loss: None,
        }
    }
}

/// Every accepted key with its documented default, for `--help`.
pub const KEY_HELP: &str = "\
required: dataset (synthetic|csv), M, Q, rounds, compressor (none|scalar|vector|topk), bits (1..=32)
dataset:  samples=1000 features=16 classes=4 csv_path= label_column=label partition=contiguous|round_robin holdout=0
training: batch=64 step=0.1 step_schedule=fixed|diminishing seed=0 protocol=multi_step|server_gradient own_block=fresh|broadcast
codecs:   value_min=-1 value_max=1 dither=true selection=magnitude|stale_gradient topk_k=(from bits) codec_schedule=fixed|diminishing_error
server:   compress_server=false server_bits=8 server_min=-2 server_max=2
models:   embedding_width=4 party_hidden=16 server_hidden=16 (comma lists; empty server_hidden = linear head)
output:   out=out parallel=false timing=false bound_reports=false target_loss=";

fn canonical_key(key: &str) -> &str {
    match key {
        "parties" | "m" => "M",
        "local_iters" | "q" => "Q",
        other => other,
    }
}

fn bad(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| bad(line, format!("{key}: cannot parse {value:?}")))
}

fn flag(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(line, format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn width_list(line: usize, key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match num::<usize>(line, key, s)? {
            0 => Err(bad(line, format!("{key}: widths must be positive"))),
            w => Ok(w),
        })
        .collect()
}

/// Parses and validates a config file's text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen: Vec<(&'static str, usize)> = Vec::new();
    let mut dataset_kind: Option<(String, usize)> = None;
    let (mut samples, mut features, mut classes) = (1000, 16, 4);
    let (mut csv_path, mut label_column) = (None, "label".to_string());

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() || (content.starts_with('[') && content.ends_with(']')) {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| bad(line, format!("expected key = value, got {content:?}")))?;
        let (key, value) = (canonical_key(key.trim()), value.trim());
        let stored_key: &'static str = match key {
            "dataset" => {
                if value != "synthetic" && value != "csv" {
                    return Err(bad(line, format!("dataset must be synthetic or csv, got {value:?}")));
                }
                dataset_kind = Some((value.to_string(), line));
                "dataset"
            }
            "samples" => {
                samples = num(line, key, value)?;
                "samples"
            }
            "features" => {
                features = num(line, key, value)?;
                "features"
            }
            "classes" => {
                classes = num(line, key, value)?;
                "classes"
            }
            "csv_path" => {
                csv_path = Some(PathBuf::from(value));
                "csv_path"
            }
            "label_column" => {
                label_column = value.to_string();
                "label_column"
            }
            "partition" => {
                cfg.partition = match value {
                    "contiguous" => PartitionScheme::Contiguous,
                    "round_robin" => PartitionScheme::RoundRobin,
                    _ => return Err(bad(line, format!("unknown partition {value:?}"))),
                };
                "partition"
            }
            "holdout" => {
                cfg.holdout = num(line, key, value)?;
                if !(0.0..1.0).contains(&cfg.holdout) {
                    return Err(bad(line, "holdout must be in [0, 1)"));
                }
                "holdout"
            }
            "M" => {
                cfg.parties = num(line, key, value)?;
                if cfg.parties == 0 {
                    return Err(bad(line, "M must be at least 1"));
                }
                "M"
            }
            "Q" => {
                cfg.local_iters = num(line, key, value)?;
                if cfg.local_iters == 0 {
                    return Err(bad(line, "Q must be at least 1"));
                }
                "Q"
            }
            "rounds" => {
                cfg.rounds = num(line, key, value)?;
                "rounds"
            }
            "batch" => {
                cfg.batch = num(line, key, value)?;
                if cfg.batch == 0 {
                    return Err(bad(line, "batch must be at least 1"));
                }
                "batch"
            }
            "compressor" => {
                cfg.compressor = CodecChoice::parse(value)
                    .ok_or_else(|| bad(line, format!("unknown compressor {value:?}")))?;
                "compressor"
            }
            "bits" => {
                cfg.bits = num(line, key, value)?;
                if !(1..=32).contains(&cfg.bits) {
                    return Err(bad(line, format!("bits must be in 1..=32, got {}", cfg.bits)));
                }
                "bits"
            }
            "value_min" => {
                cfg.value_min = num(line, key, value)?;
                "value_min"
            }
            "value_max" => {
                cfg.value_max = num(line, key, value)?;
                "value_max"
            }
            "dither" => {
                cfg.dither = flag(line, key, value)?;
                "dither"
            }
            "selection" => {
                cfg.selection = match value {
                    "magnitude" => SelectionMode::Magnitude,
                    "stale_gradient" => SelectionMode::StaleGradient,
                    _ => return Err(bad(line, format!("unknown selection {value:?}"))),
                };
                "selection"
            }
            "topk_k" => {
                cfg.topk_k = Some(num(line, key, value)?);
                "topk_k"
            }
            "step" => {
                cfg.step = num(line, key, value)?;
                if !(cfg.step > 0.0 && cfg.step.is_finite()) {
                    return Err(bad(line, "step must be positive"));
                }
                "step"
            }
            "step_schedule" => {
                cfg.diminishing_step = match value {
                    "fixed" => false,
                    "diminishing" => true,
                    _ => return Err(bad(line, format!("unknown step_schedule {value:?}"))),
                };
                "step_schedule"
            }
            "codec_schedule" => {
                cfg.codec_schedule = match value {
                    "fixed" => CodecSchedule::Fixed,
                    "diminishing_error" => CodecSchedule::DiminishingError,
                    _ => return Err(bad(line, format!("unknown codec_schedule {value:?}"))),
                };
                "codec_schedule"
            }
            "compress_server" => {
                cfg.compress_server = flag(line, key, value)?;
                "compress_server"
            }
            "server_bits" => {
                cfg.server_bits = num(line, key, value)?;
                if !(1..=32).contains(&cfg.server_bits) {
                    return Err(bad(line, "server_bits must be in 1..=32"));
                }
                "server_bits"
            }
            "server_min" => {
                cfg.server_min = num(line, key, value)?;
                "server_min"
            }
            "server_max" => {
                cfg.server_max = num(line, key, value)?;
                "server_max"
            }
            "embedding_width" => {
                cfg.embedding_width = num(line, key, value)?;
                if cfg.embedding_width == 0 {
                    return Err(bad(line, "embedding_width must be positive"));
                }
                "embedding_width"
            }
            "party_hidden" => {
                cfg.party_hidden = width_list(line, key, value)?;
                "party_hidden"
            }
            "server_hidden" => {
                cfg.server_hidden = width_list(line, key, value)?;
                "server_hidden"
            }
            "protocol" => {
                cfg.protocol = match value {
                    "multi_step" => Protocol::MultiStep,
                    "server_gradient" => Protocol::ServerGradient,
                    _ => return Err(bad(line, format!("unknown protocol {value:?}"))),
                };
                "protocol"
            }
            "own_block" => {
                cfg.own_block = match value {
                    "fresh" => OwnBlockView::Fresh,
                    "broadcast" => OwnBlockView::Broadcast,
                    _ => return Err(bad(line, format!("unknown own_block {value:?}"))),
                };
                "own_block"
            }
            "seed" => {
                cfg.seed = num(line, key, value)?;
                "seed"
            }
            "out" => {
                cfg.out = PathBuf::from(value);
                "out"
            }
            "parallel" => {
                cfg.parallel = flag(line, key, value)?;
                "parallel"
            }
            "timing" => {
                cfg.timing = flag(line, key, value)?;
                "timing"
            }
            "bound_reports" => {
                cfg.bound_reports = flag(line, key, value)?;
                "bound_reports"
            }
            "target_loss" => {
                cfg.target_loss = Some(num(line, key, value)?);
                "target_loss"
            }
            other => return Err(bad(line, format!("unknown key {other:?}"))),
        };
        if let Some(&(_, first)) = seen.iter().find(|(k, _)| *k == stored_key) {
            return Err(bad(line, format!("{stored_key} already set on line {first}")));
        }
        seen.push((stored_key, line));
    }

    let missing: Vec<&str> = REQUIRED_KEYS
        .iter()
        .copied()
        .filter(|k| !seen.iter().any(|(s, _)| s == k))
        .collect();
    if !missing.is_empty() {
        return Err(Error::ConfigInvalid(format!("missing required keys: {}", missing.join(", "))));
    }

    let (kind, kind_line) = dataset_kind.expect("dataset is required");
    cfg.dataset = if kind == "csv" {
        let path = csv_path.ok_or_else(|| bad(kind_line, "dataset = csv needs csv_path"))?;
        DatasetSource::Csv { path, label_column }
    } else {
        if classes < 2 {
            return Err(bad(kind_line, "synthetic data needs at least two classes"));
        }
        if features < cfg.parties {
            return Err(bad(kind_line, format!("{features} features cannot be split over {} parties", cfg.parties)));
        }
        DatasetSource::Synthetic {
            samples,
            features,
            classes,
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Command-line overrides; `None` keeps the config value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub parties: Option<usize>,
    pub local_iters: Option<usize>,
    pub rounds: Option<usize>,
    pub batch: Option<usize>,
    pub compressor: Option<CodecChoice>,
    pub bits: Option<u8>,
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.parties {
            self.parties = v;
        }
        if let Some(v) = o.local_iters {
            self.local_iters = v;
        }
        if let Some(v) = o.rounds {
            self.rounds = v;
        }
        if let Some(v) = o.batch {
            self.batch = v;
        }
        if let Some(v) = o.compressor {
            self.compressor = v;
        }
        if let Some(v) = o.bits {
            self.bits = v;
        }
        self.validate()
    }

    /// Cross-field checks that do not depend on the loaded data.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.parties == 0 || self.local_iters == 0 || self.batch == 0 {
            return fail("M, Q and batch must be at least 1");
        }
        if !(1..=32).contains(&self.bits) {
            return fail("bits must be in 1..=32");
        }
        if self.value_min >= self.value_max {
            return fail("value_min must be below value_max");
        }
        if self.compress_server && self.server_min >= self.server_max {
            return fail("server_min must be below server_max");
        }
        if self.protocol == Protocol::ServerGradient && self.local_iters != 1 {
            return fail("protocol = server_gradient requires Q = 1");
        }
        self.codec().validate()?;
        Ok(())
    }

    pub fn codec(&self) -> CompressorSpec {
        let base = match self.compressor {
            CodecChoice::None => CompressorSpec::none(),
            CodecChoice::Scalar => CompressorSpec::scalar(self.bits),
            CodecChoice::Vector => CompressorSpec::lattice2d(self.bits),
            CodecChoice::TopK => CompressorSpec::topk(self.bits),
        };
        let spec = base
            .with_range(self.value_min, self.value_max)
            .with_dither(self.dither)
            .with_selection(self.selection);
        match self.topk_k {
            Some(k) => spec.with_k(k),
            None => spec,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            party_hidden: self.party_hidden.clone(),
            embedding_width: self.embedding_width,
            server_hidden: self.server_hidden.clone(),
        }
    }

    pub fn train_config(&self, dataset: &VerticalDataset) -> Result<TrainConfig> {
        let step = if self.diminishing_step {
            StepSchedule::Diminishing { eta0: self.step }
        } else {
            StepSchedule::Fixed(self.step)
        };
        let mut t = TrainConfig::new(self.parties, self.local_iters, self.rounds, self.batch, step, self.codec());
        t.server_codec = CompressorSpec::scalar(self.server_bits).with_range(self.server_min, self.server_max);
        t.compress_server_model = self.compress_server;
        t.codec_schedule = self.codec_schedule;
        t.own_block = self.own_block;
        t.model = self.model_spec();
        t.seed = self.seed;
        t.validate(dataset)?;
        Ok(t)
    }

    /// Every setting as `key = value` lines, in a fixed order.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        match &self.dataset {
            DatasetSource::Synthetic {
                samples,
                features,
                classes,
            } => {
                let _ = writeln!(s, "dataset = synthetic\nsamples = {samples}\nfeatures = {features}\nclasses = {classes}");
            }
            DatasetSource::Csv { path, label_column } => {
                let _ = writeln!(s, "dataset = csv\ncsv_path = {}\nlabel_column = {label_column}", path.display());
            }
        }
        let partition = match self.partition {
            PartitionScheme::Contiguous => "contiguous",
            PartitionScheme::RoundRobin => "round_robin",
        };
        let selection = match self.selection {
            SelectionMode::Magnitude => "magnitude",
            SelectionMode::StaleGradient => "stale_gradient",
        };
        let codec_schedule = match self.codec_schedule {
            CodecSchedule::Fixed => "fixed",
            CodecSchedule::DiminishingError => "diminishing_error",
        };
        let protocol = match self.protocol {
            Protocol::MultiStep => "multi_step",
            Protocol::ServerGradient => "server_gradient",
        };
        let own_block = match self.own_block {
            OwnBlockView::Fresh => "fresh",
            OwnBlockView::Broadcast => "broadcast",
        };
        let _ = writeln!(s, "partition = {partition}\nholdout = {}", self.holdout);
        let _ = writeln!(
            s,
            "M = {}\nQ = {}\nrounds = {}\nbatch = {}",
            self.parties, self.local_iters, self.rounds, self.batch
        );
        let _ = writeln!(s, "compressor = {}\nbits = {}", self.compressor.name(), self.bits);
        let _ = writeln!(
            s,
            "value_min = {}\nvalue_max = {}\ndither = {}\nselection = {selection}",
            self.value_min, self.value_max, self.dither
        );
        if let Some(k) = self.topk_k {
            let _ = writeln!(s, "topk_k = {k}");
        }
        let _ = writeln!(
            s,
            "step = {}\nstep_schedule = {}\ncodec_schedule = {codec_schedule}",
            self.step,
            if self.diminishing_step { "diminishing" } else { "fixed" }
        );
        let _ = writeln!(
            s,
            "compress_server = {}\nserver_bits = {}\nserver_min = {}\nserver_max = {}",
            self.compress_server, self.server_bits, self.server_min, self.server_max
        );
        let _ = writeln!(
            s,
            "embedding_width = {}\nparty_hidden = {}\nserver_hidden = {}",
            self.embedding_width,
            list(&self.party_hidden),
            list(&self.server_hidden)
        );
        let _ = writeln!(s, "protocol = {protocol}\nown_block = {own_block}\nseed = {}", self.seed);
        let _ = writeln!(
            s,
            "out = {}\nparallel = {}\ntiming = {}\nbound_reports = {}",
            self.out.display(),
            self.parallel,
            self.timing,
            self.bound_reports
        );
        if let Some(t) = self.target_loss {
            let _ = writeln!(s, "target_loss = {t}");
        }
        s
    }
}
