//! Run configuration, built-in profiles and the pipeline commands.
//!
//! A run directory produced by [`cmd_train`] holds:
//!
//! | file              | content                                        |
//! |-------------------|------------------------------------------------|
//! | `config.toml`     | the resolved configuration                     |
//! | `metrics.jsonl`   | one record per epoch (phase, epoch, loss, lr, val_auc) |
//! | `model.ckpt`      | the kept checkpoint                            |
//! | `checkpoint.sha256` | hex digest of `model.ckpt`                   |
//! | `thresholds.json` | the calibrated threshold set                   |
//! | `folds.jsonl`, `report.txt`, `report.jsonl` | k-fold results, when enabled |

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detect::{
    BlockSink, CommandTemplateSink, DetectError, DryRunSink, Engine, EngineConfig, EngineEvent,
    EngineStats, LogLevel, OpPoint, ThresholdSet,
};
use crate::eval::{self, EvalError, Report};
use crate::flow::{Direction, DirectionFilter, Ipv4Net, TrackerConfig};
use crate::model::{ArchConfig, ModelError, ModelState};
use crate::packet::{write_pcap, LinkType, PcapError, PcapReader, RawRecord};
use crate::prep::{extract_samples, Label, PrepError, SampleConfig};
use crate::synth::{self, SynthConfig, SynthError};
use crate::train::{
    self, calibrate_on, finetune, pretrain, split_anomalies, EpochLog, FinetuneConfig, KfoldConfig,
    PretrainConfig, TrainError, Validation,
};

const SUBSET_SALT: u64 = 0x5ab5_e7;
const SPLIT_SALT: u64 = 0x5eed_0f_7a11;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{what} not found: {}", path.display())]
    Missing { what: &'static str, path: PathBuf },
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unsupported capture link type {0}")]
    LinkType(u32),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl AppError {
    /// 2 for configuration and usage problems, 1 for failures during work.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) | AppError::Missing { .. } => 2,
            AppError::Synth(SynthError::ConfigInvalid { .. } | SynthError::UnknownKind(_)) => 2,
            AppError::Train(TrainError::ConfigInvalid(_) | TrainError::UnknownKind(_)) => 2,
            AppError::Detect(DetectError::TemplateInvalid(_) | DetectError::Config(_)) => 2,
            AppError::Prep(PrepError::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }
}

fn file_err(path: &Path) -> impl FnOnce(io::Error) -> AppError + '_ {
    move |source| AppError::File {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SinkKind {
    #[default]
    Dryrun,
    Template,
}

impl std::str::FromStr for SinkKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dryrun" => Ok(SinkKind::Dryrun),
            "template" => Ok(SinkKind::Template),
            other => Err(format!(
                "unknown sink {other:?} (expected dryrun or template)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSection {
    pub op_point: OpPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    pub direction: Direction,
    pub local_nets: Vec<Ipv4Net>,
    pub sink: SinkKind,
    /// Command with an `{ip}` placeholder, used by the template sink.
    pub template: String,
    /// Run rendered commands instead of only recording them.
    pub execute: bool,
    /// Verbosity of the decision log.
    pub log_level: LogLevel,
    pub idle_timeout_secs: u64,
    pub max_flows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KfoldSection {
    pub enabled: bool,
    pub k: usize,
}

/// Which samples a training run draws from its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Cap on benign samples, 0 for no cap.
    pub max_benign: usize,
    /// Cap on anomalous samples taken from each anomaly capture, 0 for no cap.
    pub max_anomalies_per_file: usize,
    /// Benign share held out for best-epoch selection when anomalies are given.
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    pub sample: SampleConfig,
    pub model: ArchConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub kfold: KfoldSection,
    pub data: DataSection,
    pub thresholds: ThresholdSection,
    pub engine: EngineSection,
    pub synth: SynthConfig,
}

pub const PROFILES: [&str; 2] = ["desk", "paper"];

impl RunConfig {
    /// Built-in profile by name.
    pub fn profile(name: &str) -> Result<Self, AppError> {
        let base = Self {
            profile: name.to_string(),
            seed: 7,
            sample: SampleConfig::default(),
            model: ArchConfig::standard(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            kfold: KfoldSection {
                enabled: false,
                k: 5,
            },
            data: DataSection {
                max_benign: 0,
                max_anomalies_per_file: 0,
                validation_fraction: 0.2,
            },
            thresholds: ThresholdSection {
                op_point: OpPoint::HundredOne,
            },
            engine: EngineSection {
                direction: Direction::Both,
                local_nets: Vec::new(),
                sink: SinkKind::Dryrun,
                template: String::new(),
                execute: false,
                log_level: LogLevel::default(),
                idle_timeout_secs: TrackerConfig::DEFAULT_IDLE_TIMEOUT_MICROS / 1_000_000,
                max_flows: TrackerConfig::DEFAULT_MAX_FLOWS,
            },
            synth: SynthConfig::default(),
        };
        match name {
            "paper" => Ok(base),
            "desk" => Ok(Self {
                model: ArchConfig::tiny(),
                pretrain: PretrainConfig {
                    epochs: 100,
                    warmup_epochs: 5,
                    ..PretrainConfig::default()
                },
                finetune: FinetuneConfig {
                    epochs: 50,
                    ..FinetuneConfig::default()
                },
                data: DataSection {
                    max_anomalies_per_file: 100,
                    ..base.data.clone()
                },
                engine: EngineSection {
                    local_nets: vec![Ipv4Net {
                        addr: std::net::Ipv4Addr::new(10, 0, 0, 0),
                        prefix: 8,
                    }],
                    ..base.engine.clone()
                },
                ..base
            }),
            other => Err(AppError::Config(format!(
                "unknown profile {other:?} (expected one of {})",
                PROFILES.join(", ")
            ))),
        }
    }

    /// Profile defaults overlaid with `text`. The profile comes from
    /// `profile_override`, else the file's own `profile` key, else desk.
    pub fn from_toml(text: &str, profile_override: Option<&str>) -> Result<Self, AppError> {
        let user: toml::Table =
            toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        let name = match (profile_override, user.get("profile")) {
            (Some(p), _) => p.to_string(),
            (None, Some(toml::Value::String(p))) => p.clone(),
            (None, Some(_)) => return Err(AppError::Config("profile must be a string".into())),
            (None, None) => "desk".to_string(),
        };
        let base = Self::profile(&name)?;
        let mut merged =
            toml::Table::try_from(&base).map_err(|e| AppError::Config(e.to_string()))?;
        merge(&mut merged, user);
        merged.insert("profile".into(), toml::Value::String(name));
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| AppError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile_override: Option<&str>) -> Result<Self, AppError> {
        if !path.exists() {
            return Err(AppError::Missing {
                what: "config file",
                path: path.to_path_buf(),
            });
        }
        let text = fs::read_to_string(path).map_err(file_err(path))?;
        Self::from_toml(&text, profile_override)
    }

    pub fn to_toml(&self) -> Result<String, AppError> {
        toml::to_string(self).map_err(|e| AppError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), AppError> {
        let cfg_err = |m: String| Err(AppError::Config(m));
        if i64::try_from(self.seed).is_err() {
            return cfg_err(format!(
                "seed {} does not fit in a signed 64-bit integer",
                self.seed
            ));
        }
        self.sample
            .validate()
            .map_err(|e| AppError::Config(format!("sample: {e}")))?;
        ModelState::build_rescnn(self.sample, self.model.clone(), 0)
            .map_err(|e| AppError::Config(format!("model: {e}")))?;
        self.pretrain
            .validate()
            .map_err(|e| AppError::Config(format!("pretrain: {e}")))?;
        self.finetune
            .validate()
            .map_err(|e| AppError::Config(format!("finetune: {e}")))?;
        if self.kfold.k < 2 {
            return cfg_err("kfold.k must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.data.validation_fraction) {
            return cfg_err("data.validation_fraction must lie in [0, 1)".into());
        }
        let e = &self.engine;
        if e.direction != Direction::Both && e.local_nets.is_empty() {
            return cfg_err(
                "engine.local_nets is required when engine.direction is in or out".into(),
            );
        }
        if e.max_flows < 1 {
            return cfg_err("engine.max_flows must be at least 1".into());
        }
        if e.sink == SinkKind::Template {
            CommandTemplateSink::new(&e.template, false)
                .map_err(|err| AppError::Config(format!("engine.template: {err}")))?;
        }
        self.synth
            .validate()
            .map_err(|err| AppError::Config(format!("synth: {err}")))?;
        Ok(())
    }

    /// Engine settings for `model` under this configuration.
    pub fn engine_config(&self, model: &ModelState) -> EngineConfig {
        EngineConfig {
            tracker: self.tracker(model.sample_cfg.n),
            log_level: self.engine.log_level,
            ..EngineConfig::new(model, self.thresholds.op_point)
        }
    }

    pub fn tracker(&self, n: usize) -> TrackerConfig {
        TrackerConfig {
            n,
            idle_timeout_micros: self.engine.idle_timeout_secs * 1_000_000,
            max_flows: self.engine.max_flows,
            filter: DirectionFilter {
                direction: self.engine.direction,
                local_nets: self.engine.local_nets.clone(),
            },
        }
    }

    pub fn kfold_config(&self) -> KfoldConfig {
        KfoldConfig {
            k: self.kfold.k,
            seed: self.seed,
            arch: self.model.clone(),
            sample_cfg: self.sample,
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
        }
    }
}

/// Recursive table overlay; `over` wins on scalars and arrays.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), AppError> {
    fs::create_dir_all(dir).map_err(file_err(dir))
}

fn create_file(path: &Path) -> Result<BufWriter<File>, AppError> {
    Ok(BufWriter::new(File::create(path).map_err(file_err(path))?))
}

fn open_input(path: &Path, what: &'static str) -> Result<Box<dyn Read>, AppError> {
    if path == Path::new("-") {
        return Ok(Box::new(io::stdin().lock()));
    }
    if !path.is_file() {
        return Err(AppError::Missing {
            what,
            path: path.to_path_buf(),
        });
    }
    Ok(Box::new(BufReader::new(
        File::open(path).map_err(file_err(path))?,
    )))
}

fn open_pcap(path: &Path) -> Result<(PcapReader<Box<dyn Read>>, LinkType), AppError> {
    let reader = PcapReader::new(open_input(path, "capture file")?)?;
    let link =
        LinkType::from_pcap(reader.linktype()).ok_or(AppError::LinkType(reader.linktype()))?;
    Ok((reader, link))
}

pub fn load_pcap(path: &Path) -> Result<(Vec<RawRecord>, LinkType), AppError> {
    let (reader, link) = open_pcap(path)?;
    Ok((reader.collect::<Result<_, _>>()?, link))
}

fn save_pcap(records: &[RawRecord], path: &Path) -> Result<(), AppError> {
    let mut w = create_file(path)?;
    write_pcap(records, &mut w)?;
    w.flush().map_err(file_err(path))?;
    Ok(())
}

/// Files written by [`cmd_synth`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutputs {
    pub benign_pcap: PathBuf,
    pub benign_labels: PathBuf,
    pub benign_holdout: Option<PathBuf>,
    /// `(kind name, pcap, labels)` per configured flood.
    pub floods: Vec<(String, PathBuf, PathBuf)>,
}

/// Writes `benign.pcap` and `flood_<kind>.pcap` (with `.labels.csv`
/// sidecars) into `out`, creating it if needed.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthOutputs, AppError> {
    cfg.synth.validate()?;
    create_dir(out)?;
    let s = &cfg.synth;
    let benign = synth::gen_benign(&s.benign, s.seed)?;
    let benign_pcap = out.join("benign.pcap");
    let benign_labels = out.join("benign.labels.csv");
    save_pcap(&benign, &benign_pcap)?;
    synth::write_labels(
        &synth::benign_labels(&s.benign),
        create_file(&benign_labels)?,
    )?;
    let benign_holdout = if s.benign.holdout_flows > 0 {
        let path = out.join("benign_holdout.pcap");
        save_pcap(&synth::gen_benign_holdout(&s.benign, s.seed)?, &path)?;
        Some(path)
    } else {
        None
    };
    let mut floods = Vec::new();
    for (i, f) in s.floods.iter().enumerate() {
        let recs = synth::gen_flood(f, s.flood_seed(i))?;
        // repeated kinds get an index suffix
        let stem = if s.floods.iter().filter(|g| g.kind == f.kind).count() > 1 {
            format!("flood_{}_{i}", f.kind)
        } else {
            format!("flood_{}", f.kind)
        };
        let pcap = out.join(format!("{stem}.pcap"));
        let labels = out.join(format!("{stem}.labels.csv"));
        save_pcap(&recs, &pcap)?;
        synth::write_labels(&synth::flood_labels(f), create_file(&labels)?)?;
        log::info!("wrote {} ({} records)", pcap.display(), recs.len());
        floods.push((f.kind.to_string(), pcap, labels));
    }
    Ok(SynthOutputs {
        benign_pcap,
        benign_labels,
        benign_holdout,
        floods,
    })
}

/// Model inputs for every flow sample in the capture at `path`.
pub fn samples_from_pcap(
    cfg: &RunConfig,
    path: &Path,
    cap: usize,
) -> Result<Vec<Vec<f32>>, AppError> {
    let (records, link) = load_pcap(path)?;
    let samples = extract_samples(&records, link, cfg.tracker(cfg.sample.n), cfg.sample)?;
    Ok(subsample(
        samples.into_iter().map(|s| s.values).collect(),
        cap,
        cfg.seed,
    ))
}

/// Seeded uniform subset of at most `cap` rows (0 keeps all), in input order.
/// Emission order is biased since short flows surface only at flush, so a
/// prefix would not do.
pub fn subsample<T>(rows: Vec<T>, cap: usize, seed: u64) -> Vec<T> {
    if cap == 0 || rows.len() <= cap {
        return rows;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SUBSET_SALT);
    let mut keep = rand::seq::index::sample(&mut rng, rows.len(), cap).into_vec();
    keep.sort_unstable();
    let mut slots: Vec<Option<T>> = rows.into_iter().map(Some).collect();
    keep.into_iter().filter_map(|i| slots[i].take()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub digest: String,
    pub thresholds: ThresholdSet,
    pub benign_samples: usize,
    pub anomaly_samples: usize,
    pub folds: Vec<train::FoldReport>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_jsonl<T: Serialize>(w: &mut impl Write, rec: &T) -> Result<(), AppError> {
    serde_json::to_writer(&mut *w, rec).map_err(io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Pretrain and fine-tune one model, calibrate its thresholds, and
/// optionally run the k-fold experiment. Everything lands under `out`.
pub fn cmd_train(
    cfg: &RunConfig,
    benign_pcaps: &[PathBuf],
    anomaly_pcaps: &[PathBuf],
    out: &Path,
) -> Result<TrainOutcome, AppError> {
    cfg.validate()?;
    if benign_pcaps.is_empty() {
        return Err(AppError::Config(
            "at least one benign capture is required".into(),
        ));
    }
    let mut benign = Vec::new();
    for p in benign_pcaps {
        benign.extend(samples_from_pcap(cfg, p, 0)?);
    }
    let benign = subsample(benign, cfg.data.max_benign, cfg.seed);
    let mut anomalies = Vec::new();
    for p in anomaly_pcaps {
        anomalies.extend(samples_from_pcap(cfg, p, cfg.data.max_anomalies_per_file)?);
    }
    if benign.is_empty() {
        return Err(AppError::Data(
            "benign captures produced no flow samples".into(),
        ));
    }
    log::info!(
        "{} benign and {} anomalous samples",
        benign.len(),
        anomalies.len()
    );

    create_dir(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(file_err(out))?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = create_file(&metrics_path)?;

    let mut folds = Vec::new();
    if cfg.kfold.enabled {
        if anomalies.len() < 2 {
            return Err(AppError::Config(
                "kfold.enabled needs at least two anomalous samples".into(),
            ));
        }
        let mut fold_metrics = create_file(&out.join("kfold_metrics.jsonl"))?;
        let mut sink_err = None;
        folds = train::kfold(
            &benign,
            &anomalies,
            &cfg.kfold_config(),
            &mut |fold, log| {
                #[derive(Serialize)]
                struct Rec<'a> {
                    fold: usize,
                    #[serde(flatten)]
                    log: &'a EpochLog,
                }
                if let Err(e) = write_jsonl(&mut fold_metrics, &Rec { fold, log }) {
                    sink_err.get_or_insert(e);
                }
            },
        )?;
        if let Some(e) = sink_err {
            return Err(e);
        }
        fold_metrics.flush()?;
        let mut w = create_file(&out.join("folds.jsonl"))?;
        for f in &folds {
            write_jsonl(&mut w, f)?;
        }
        w.flush()?;
        let report = train::fold_summary(&folds);
        fs::write(out.join("report.txt"), report.render_text()).map_err(file_err(out))?;
        fs::write(out.join("report.jsonl"), report.render_lines()).map_err(file_err(out))?;
    }

    // final model: benign-only validation split exists only when anomalies do
    let (train_benign, val_benign) = if anomalies.is_empty() || cfg.data.validation_fraction == 0.0
    {
        (benign.clone(), Vec::new())
    } else {
        let mut idx: Vec<usize> = (0..benign.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ SPLIT_SALT));
        let n_val = ((benign.len() as f64) * cfg.data.validation_fraction).round() as usize;
        let n_val = n_val.min(benign.len().saturating_sub(1));
        let (v, t) = idx.split_at(n_val);
        (
            t.iter().map(|&i| benign[i].clone()).collect::<Vec<_>>(),
            v.iter().map(|&i| benign[i].clone()).collect::<Vec<_>>(),
        )
    };
    let (tune_idx, eval_idx) = split_anomalies(anomalies.len(), cfg.seed);
    let (tune, eval_anom): (Vec<Vec<f32>>, Vec<Vec<f32>>) = if val_benign.is_empty() {
        (anomalies.clone(), Vec::new())
    } else {
        (
            tune_idx.iter().map(|&i| anomalies[i].clone()).collect(),
            eval_idx.iter().map(|&i| anomalies[i].clone()).collect(),
        )
    };

    let mut model = ModelState::build_rescnn(cfg.sample, cfg.model.clone(), cfg.seed)?;
    let pre = pretrain(&mut model, &train_benign, &cfg.pretrain)?;
    for l in &pre {
        write_jsonl(&mut metrics, l)?;
    }
    let mut rows = train_benign.clone();
    let mut labels = vec![Label::Benign; rows.len()];
    rows.extend(tune);
    labels.resize(rows.len(), Label::Anomalous);
    let mut val_rows = val_benign;
    let mut val_labels = vec![Label::Benign; val_rows.len()];
    val_rows.extend(eval_anom);
    val_labels.resize(val_rows.len(), Label::Anomalous);
    let validation = (!val_rows.is_empty()).then_some(Validation {
        rows: &val_rows,
        labels: &val_labels,
    });
    let ft = finetune(&mut model, &rows, &labels, validation, &cfg.finetune)?;
    for l in &ft.logs {
        write_jsonl(&mut metrics, l)?;
    }
    metrics.flush()?;

    let thresholds = calibrate_on(&model, &train_benign)?;
    let th_path = out.join("thresholds.json");
    fs::write(
        &th_path,
        serde_json::to_string_pretty(&thresholds).map_err(io::Error::from)?,
    )
    .map_err(file_err(&th_path))?;

    let mut ckpt = Vec::new();
    model.save(&mut ckpt)?;
    let checkpoint = out.join("model.ckpt");
    fs::write(&checkpoint, &ckpt).map_err(file_err(&checkpoint))?;
    let digest = sha256_hex(&ckpt);
    fs::write(
        out.join("checkpoint.sha256"),
        format!("{digest}  model.ckpt\n"),
    )
    .map_err(file_err(out))?;
    log::info!("checkpoint {} sha256 {digest}", checkpoint.display());

    Ok(TrainOutcome {
        run_dir: out.to_path_buf(),
        checkpoint,
        digest,
        thresholds,
        benign_samples: benign.len(),
        anomaly_samples: anomalies.len(),
        folds,
    })
}

/// Checkpoint and thresholds from a run directory or a checkpoint path
/// whose directory also holds `thresholds.json`.
pub fn load_run(path: &Path) -> Result<(ModelState, ThresholdSet), AppError> {
    let ckpt = if path.is_dir() {
        path.join("model.ckpt")
    } else {
        path.to_path_buf()
    };
    if !ckpt.is_file() {
        return Err(AppError::Missing {
            what: "model checkpoint",
            path: ckpt,
        });
    }
    let th = ckpt.with_file_name("thresholds.json");
    if !th.is_file() {
        return Err(AppError::Missing {
            what: "thresholds file",
            path: th,
        });
    }
    let model = ModelState::load(BufReader::new(File::open(&ckpt).map_err(file_err(&ckpt))?))?;
    let text = fs::read_to_string(&th).map_err(file_err(&th))?;
    let thresholds: ThresholdSet = serde_json::from_str(&text)
        .map_err(|e| AppError::Data(format!("{}: {e}", th.display())))?;
    Ok((model, thresholds))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOutcome {
    pub decision_log: PathBuf,
    pub stats: EngineStats,
    pub blocks: Vec<crate::detect::BlockDecision>,
}

/// Replay a capture (or `-` for a pcap stream on stdin) through the engine.
/// Writes `decisions.jsonl`, `stats.json` and, for the dry-run sink,
/// `blocks.jsonl` into `out`.
pub fn cmd_detect(
    cfg: &RunConfig,
    model_path: &Path,
    pcap: &Path,
    out: &Path,
) -> Result<DetectOutcome, AppError> {
    cfg.validate()?;
    let (model, thresholds) = load_run(model_path)?;
    let (reader, link) = open_pcap(pcap)?;
    create_dir(out)?;
    let decision_log = out.join("decisions.jsonl");
    let mut log_w = create_file(&decision_log)?;
    let mut sink: Box<dyn BlockSink> = match cfg.engine.sink {
        SinkKind::Dryrun => Box::new(DryRunSink::new(create_file(&out.join("blocks.jsonl"))?)),
        SinkKind::Template => Box::new(CommandTemplateSink::new(
            &cfg.engine.template,
            cfg.engine.execute,
        )?),
    };
    let ecfg = cfg.engine_config(&model);
    let mut blocks = Vec::new();
    let stats = {
        let mut engine = Engine::new(&model, thresholds, ecfg, sink.as_mut(), Some(&mut log_w))?;
        let mut collect = |events: Vec<EngineEvent>| {
            blocks.extend(events.into_iter().filter_map(|e| match e {
                EngineEvent::Block(b) => Some(b),
                EngineEvent::Verdict(_) => None,
            }))
        };
        for rec in reader {
            collect(engine.process(&rec?, link)?);
        }
        collect(engine.finish()?);
        engine.stats().clone()
    };
    drop(sink);
    log_w.flush()?;
    fs::write(
        out.join("stats.json"),
        serde_json::to_string_pretty(&stats).map_err(io::Error::from)?,
    )
    .map_err(file_err(out))?;
    log::info!(
        "{} records, {} samples scored, {} blocks",
        stats.records,
        stats.samples_scored,
        stats.blocks
    );
    Ok(DetectOutcome {
        decision_log,
        stats,
        blocks,
    })
}

/// Reads a score file: one `score,label` pair per line, label `benign` or
/// `anomalous`, `#` comments allowed.
pub fn read_scores(path: &Path) -> Result<(Vec<f64>, Vec<Label>), AppError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == "score,label" {
            continue;
        }
        let bad = || {
            AppError::Data(format!(
                "{}:{}: expected score,label",
                path.display(),
                i + 1
            ))
        };
        let (s, l) = line.split_once(',').ok_or_else(bad)?;
        scores.push(s.trim().parse::<f64>().map_err(|_| bad())?);
        labels.push(match l.trim() {
            "benign" => Label::Benign,
            "anomalous" => Label::Anomalous,
            _ => return Err(bad()),
        });
    }
    Ok((scores, labels))
}

/// Mean ± std table from a k-fold run directory, or from score files (each
/// file counts as one fold; F1 rows need `thresholds`).
pub fn cmd_eval(
    inputs: &[PathBuf],
    thresholds: Option<&ThresholdSet>,
    out: Option<&Path>,
) -> Result<Report, AppError> {
    if inputs.is_empty() {
        return Err(AppError::Config("nothing to evaluate".into()));
    }
    let report = if inputs.len() == 1 && inputs[0].is_dir() {
        let folds_path = inputs[0].join("folds.jsonl");
        if !folds_path.is_file() {
            return Err(AppError::Missing {
                what: "fold results",
                path: folds_path,
            });
        }
        let text = fs::read_to_string(&folds_path).map_err(file_err(&folds_path))?;
        let folds = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<train::FoldReport>, _>>()
            .map_err(|e| AppError::Data(format!("{}: {e}", folds_path.display())))?;
        train::fold_summary(&folds)
    } else {
        let mut aucs = Vec::new();
        let mut f1: Vec<Vec<f64>> = vec![Vec::new(); OpPoint::ALL.len()];
        for p in inputs {
            if !p.is_file() {
                return Err(AppError::Missing {
                    what: "score file",
                    path: p.clone(),
                });
            }
            let (scores, labels) = read_scores(p)?;
            aucs.push(eval::auc(&scores, &labels)?);
            if let Some(t) = thresholds {
                for (slot, op) in f1.iter_mut().zip(OpPoint::ALL) {
                    slot.push(eval::prf(&scores, &labels, t.get(op))?.f1);
                }
            }
        }
        let mut r = Report::default();
        r.push("auc", aucs);
        if thresholds.is_some() {
            for (values, op) in f1.into_iter().zip(OpPoint::ALL) {
                r.push(format!("f1@{op}"), values);
            }
        }
        r
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        fs::write(dir.join("report.txt"), report.render_text()).map_err(file_err(dir))?;
        fs::write(dir.join("report.jsonl"), report.render_lines()).map_err(file_err(dir))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_match_their_tables() {
        let desk = RunConfig::profile("desk").unwrap();
        assert_eq!((desk.pretrain.epochs, desk.finetune.epochs), (100, 50));
        assert_eq!(desk.model, ArchConfig::tiny());
        let paper = RunConfig::profile("paper").unwrap();
        assert_eq!((paper.pretrain.epochs, paper.finetune.epochs), (2000, 400));
        assert_eq!(paper.sample, SampleConfig { n: 4, l: 60 });
        assert_eq!(paper.model, ArchConfig::standard());
        desk.validate().unwrap();
        paper.validate().unwrap();
        assert!(RunConfig::profile("huge").is_err());
    }

    #[test]
    fn toml_overlay_and_round_trip() {
        let cfg = RunConfig::from_toml(
            "seed = 11\n[sample]\nn = 6\nl = 100\n[pretrain]\nepochs = 3\nwarmup_epochs = 1\n",
            None,
        )
        .unwrap();
        assert_eq!(cfg.profile, "desk");
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.sample, SampleConfig { n: 6, l: 100 });
        assert_eq!(cfg.pretrain.epochs, 3);
        assert_eq!(cfg.pretrain.batch_size, 128);
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap(), None).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = RunConfig::from_toml("[pretrain]\nepochz = 3\n", None).unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
        assert_eq!(err.exit_code(), 2);
        let err = RunConfig::from_toml("[[synth.floods]]\nkind = \"smurf\"\npacket_count = 1\nsrc_ip = \"1.2.3.4\"\ndst_ip = \"10.0.0.1\"\n", None).unwrap_err();
        assert!(err.to_string().contains("kind"), "{err}");
    }

    #[test]
    fn direction_needs_local_nets() {
        let mut cfg = RunConfig::profile("paper").unwrap();
        cfg.engine.direction = Direction::Inbound;
        assert!(matches!(cfg.validate(), Err(AppError::Config(_))));
    }

    #[test]
    fn score_file_eval() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        fs::write(
            &p,
            "score,label\n0.8,anomalous\n0.3,anomalous\n0.5,benign\n0.1,benign\n",
        )
        .unwrap();
        let r = cmd_eval(std::slice::from_ref(&p), None, None).unwrap();
        assert_eq!(r.get("auc").unwrap().mean, 0.75);
        let missing = cmd_eval(&[dir.path().join("nope.csv")], None, None).unwrap_err();
        assert_eq!(missing.exit_code(), 2);
    }
}
