//! Ranking and threshold metrics, mean ± std reports, and per-process
//! resource sampling.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prep::Label;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC needs both classes present")]
    SingleClass,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("no such process {0}")]
    NoSuchProcess(u32),
    #[error("resource sampling is not supported on this platform")]
    UnsupportedPlatform,
    #[error("interval must be positive and no longer than the duration")]
    InvalidInterval,
    #[error("replay line {line}: {msg}")]
    Replay { line: usize, msg: String },
    #[error("replay source ran out after {0} samples")]
    ReplayExhausted(usize),
    #[error("report line {line}: {msg}")]
    ReportFormat { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_lengths(scores: &[f64], labels: &[Label]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(i));
    }
    Ok(())
}

/// Mann-Whitney AUC with anomalous as the positive class and average ranks
/// for ties.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|l| l.is_anomalous()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j]
            .iter()
            .filter(|&&k| labels[k].is_anomalous())
            .count();
        rank_sum += avg * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 with `score > threshold` predicting anomalous.
/// Any 0/0 evaluates to 0.
pub fn prf(scores: &[f64], labels: &[Label], threshold: f64) -> Result<Prf, EvalError> {
    check_lengths(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, l) in scores.iter().zip(labels) {
        match (s > threshold, l.is_anomalous()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf {
        precision,
        recall,
        f1,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Mean and sample (n−1) standard deviation; the std of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub avg: f64,
    pub max: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let (avg, std) = mean_std(values);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { avg, max, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    /// Seconds since sampling started.
    pub ts: f64,
    /// Percent of one core.
    pub cpu_percent: f64,
    /// Resident set size in MiB.
    pub mem_mb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceStats {
    pub samples: Vec<ResourceSample>,
    pub cpu: Summary,
    pub mem: Summary,
}

impl ResourceStats {
    pub fn from_samples(samples: Vec<ResourceSample>) -> Self {
        let cpu: Vec<f64> = samples.iter().map(|s| s.cpu_percent).collect();
        let mem: Vec<f64> = samples.iter().map(|s| s.mem_mb).collect();
        Self {
            cpu: Summary::of(&cpu),
            mem: Summary::of(&mem),
            samples,
        }
    }
}

/// Source of per-interval process measurements.
pub trait ResourceProvider {
    fn start(&mut self, pid: u32) -> Result<(), EvalError>;
    /// Wait out one interval and return the sample that covers it.
    fn next_sample(&mut self, interval: Duration) -> Result<ResourceSample, EvalError>;
}

/// Number of whole intervals in `duration`.
pub fn sample_count(interval: Duration, duration: Duration) -> Result<usize, EvalError> {
    if interval.is_zero() || interval > duration {
        return Err(EvalError::InvalidInterval);
    }
    Ok((duration.as_nanos() / interval.as_nanos()) as usize)
}

pub fn sample_resources(
    pid: u32,
    interval: Duration,
    duration: Duration,
    provider: &mut dyn ResourceProvider,
) -> Result<ResourceStats, EvalError> {
    let count = sample_count(interval, duration)?;
    provider.start(pid)?;
    let samples = (0..count)
        .map(|_| provider.next_sample(interval))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ResourceStats::from_samples(samples))
}

/// Replays recorded `ts cpu mem` lines without waiting.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayProvider {
    samples: Vec<ResourceSample>,
    next: usize,
}

impl ReplayProvider {
    pub fn new(samples: Vec<ResourceSample>) -> Self {
        Self { samples, next: 0 }
    }

    /// Blank lines and `#` comments are ignored.
    pub fn parse<R: Read>(r: R) -> Result<Self, EvalError> {
        let mut samples = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let text = line.trim();
            if text.is_empty() || text.starts_with('#') {
                continue;
            }
            let fields: Vec<f64> = text
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| EvalError::Replay {
                    line: i + 1,
                    msg: format!("{e}"),
                })?;
            let [ts, cpu_percent, mem_mb] = fields[..] else {
                return Err(EvalError::Replay {
                    line: i + 1,
                    msg: format!("expected 3 fields, found {}", fields.len()),
                });
            };
            samples.push(ResourceSample {
                ts,
                cpu_percent,
                mem_mb,
            });
        }
        Ok(Self::new(samples))
    }

    pub fn from_file(path: &Path) -> Result<Self, EvalError> {
        Self::parse(std::fs::File::open(path)?)
    }

    pub fn to_text(samples: &[ResourceSample]) -> String {
        let mut out = String::from("# ts cpu_percent mem_mb\n");
        for s in samples {
            let _ = writeln!(out, "{} {} {}", s.ts, s.cpu_percent, s.mem_mb);
        }
        out
    }
}

impl ResourceProvider for ReplayProvider {
    fn start(&mut self, _pid: u32) -> Result<(), EvalError> {
        self.next = 0;
        Ok(())
    }

    fn next_sample(&mut self, _interval: Duration) -> Result<ResourceSample, EvalError> {
        let s = self
            .samples
            .get(self.next)
            .copied()
            .ok_or(EvalError::ReplayExhausted(self.next))?;
        self.next += 1;
        Ok(s)
    }
}

/// Reads `/proc/<pid>/stat` and `/proc/<pid>/status`.
#[derive(Debug)]
pub struct ProcfsProvider {
    ticks_per_sec: f64,
    pid: u32,
    started: Instant,
    last_ticks: u64,
    last_at: Instant,
}

impl ProcfsProvider {
    pub fn new() -> Result<Self, EvalError> {
        if !cfg!(target_os = "linux") {
            return Err(EvalError::UnsupportedPlatform);
        }
        // SAFETY: sysconf has no preconditions.
        let ticks = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
        if ticks <= 0 {
            return Err(EvalError::UnsupportedPlatform);
        }
        let now = Instant::now();
        Ok(Self {
            ticks_per_sec: ticks as f64,
            pid: 0,
            started: now,
            last_ticks: 0,
            last_at: now,
        })
    }

    fn cpu_ticks(&self) -> Result<u64, EvalError> {
        let stat = std::fs::read_to_string(format!("/proc/{}/stat", self.pid))
            .map_err(|_| EvalError::NoSuchProcess(self.pid))?;
        // the command name may contain spaces; fields resume after the last ')'
        let rest = stat.rsplit_once(')').map(|(_, r)| r).unwrap_or("");
        let fields: Vec<&str> = rest.split_whitespace().collect();
        // utime and stime are fields 14 and 15 of the full line
        let get = |i: usize| fields.get(i).and_then(|v| v.parse::<u64>().ok());
        match (get(11), get(12)) {
            (Some(u), Some(s)) => Ok(u + s),
            _ => Err(EvalError::NoSuchProcess(self.pid)),
        }
    }

    fn rss_mb(&self) -> Result<f64, EvalError> {
        let status = std::fs::read_to_string(format!("/proc/{}/status", self.pid))
            .map_err(|_| EvalError::NoSuchProcess(self.pid))?;
        let kb = status
            .lines()
            .find_map(|l| l.strip_prefix("VmRSS:"))
            .and_then(|v| v.split_whitespace().next())
            .and_then(|v| v.parse::<f64>().ok())
            .unwrap_or(0.0);
        Ok(kb / 1024.0)
    }
}

impl ResourceProvider for ProcfsProvider {
    fn start(&mut self, pid: u32) -> Result<(), EvalError> {
        self.pid = pid;
        self.last_ticks = self.cpu_ticks()?;
        self.started = Instant::now();
        self.last_at = self.started;
        Ok(())
    }

    fn next_sample(&mut self, interval: Duration) -> Result<ResourceSample, EvalError> {
        std::thread::sleep(interval);
        let ticks = self.cpu_ticks()?;
        let now = Instant::now();
        let wall = now.duration_since(self.last_at).as_secs_f64();
        let cpu = (ticks.saturating_sub(self.last_ticks)) as f64 / self.ticks_per_sec;
        self.last_ticks = ticks;
        self.last_at = now;
        Ok(ResourceSample {
            ts: now.duration_since(self.started).as_secs_f64(),
            cpu_percent: 100.0 * cpu / wall,
            mem_mb: self.rss_mb()?,
        })
    }
}

/// One metric across folds or runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl ReportRow {
    pub fn new(metric: impl Into<String>, values: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&values);
        Self {
            metric: metric.into(),
            mean,
            std,
            values,
        }
    }

    /// `mean ± std`; a single value shows `—` in place of the spread.
    pub fn cell(&self) -> String {
        if self.values.len() == 1 {
            format!("{:.6} —", self.mean)
        } else {
            format!("{:.6} ± {:.6}", self.mean, self.std)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn push(&mut self, metric: impl Into<String>, values: Vec<f64>) {
        self.rows.push(ReportRow::new(metric, values));
    }

    pub fn get(&self, metric: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn render_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.metric.len())
            .max()
            .unwrap_or(0)
            .max(6);
        let mut out = format!("{:<width$}  value\n", "metric");
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {}", r.metric, r.cell());
        }
        out
    }

    /// One JSON object per line.
    pub fn render_lines(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("report rows serialize") + "\n")
            .collect()
    }

    pub fn parse_lines(text: &str) -> Result<Self, EvalError> {
        let rows = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| EvalError::ReportFormat {
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }
}
