//! Threshold calibration, per-flow verdicts, and source-IP block decisions.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::net::Ipv4Addr;
use std::process::Command;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{FlowError, FlowKey, FlowSampleRaw, FlowTracker, TrackerConfig};
use crate::model::{ModelError, ModelState};
use crate::packet::{parse_packet, LinkType, Parsed, RawRecord};
use crate::prep::{to_sample, PrepError};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("cannot calibrate thresholds from an empty score set")]
    EmptyScores,
    #[error("calibration score {0} is negative or non-finite")]
    BadScore(f64),
    #[error("unknown operating point {0:?} (expected ninety_nine, near_max, max or hundred_one)")]
    UnknownOpPoint(String),
    #[error("invalid command template: {0}")]
    TemplateInvalid(String),
    #[error("block command failed: {0}")]
    ExecFailed(String),
    #[error("engine configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error("decision log: {0}")]
    Io(#[from] std::io::Error),
}

/// Named operating points over a [`ThresholdSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpPoint {
    NinetyNine,
    NearMax,
    Max,
    HundredOne,
}

impl OpPoint {
    pub const ALL: [OpPoint; 4] = [
        OpPoint::NinetyNine,
        OpPoint::NearMax,
        OpPoint::Max,
        OpPoint::HundredOne,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpPoint::NinetyNine => "ninety_nine",
            OpPoint::NearMax => "near_max",
            OpPoint::Max => "max",
            OpPoint::HundredOne => "hundred_one",
        }
    }
}

impl fmt::Display for OpPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpPoint {
    type Err = DetectError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpPoint::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| DetectError::UnknownOpPoint(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub ninety_nine: f64,
    pub near_max: f64,
    pub max: f64,
    pub hundred_one: f64,
}

impl ThresholdSet {
    pub fn get(&self, op: OpPoint) -> f64 {
        match op {
            OpPoint::NinetyNine => self.ninety_nine,
            OpPoint::NearMax => self.near_max,
            OpPoint::Max => self.max,
            OpPoint::HundredOne => self.hundred_one,
        }
    }
}

/// Linear interpolation between closest ranks of an ascending slice:
/// `h = (p/100)(N−1)`, `s[⌊h⌋] + (h−⌊h⌋)(s[⌊h⌋+1] − s[⌊h⌋])`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    match sorted.get(lo + 1) {
        Some(&hi) if frac > 0.0 => sorted[lo] + frac * (hi - sorted[lo]),
        _ => sorted[lo],
    }
}

pub fn calibrate(scores: &[f64]) -> Result<ThresholdSet, DetectError> {
    if scores.is_empty() {
        return Err(DetectError::EmptyScores);
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(DetectError::BadScore(bad));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let max = sorted[sorted.len() - 1];
    Ok(ThresholdSet {
        ninety_nine: percentile(&sorted, 99.0),
        near_max: percentile(&sorted, 99.99),
        max,
        hundred_one: 1.01 * max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Benign,
    Anomalous,
}

/// Anomalous iff `score` strictly exceeds the operating point's threshold.
pub fn classify(score: f64, thresholds: &ThresholdSet, op: OpPoint) -> Decision {
    if score > thresholds.get(op) {
        Decision::Anomalous
    } else {
        Decision::Benign
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub key: FlowKey,
    pub ts: u64,
    pub score: f64,
    pub op_point: OpPoint,
    pub threshold: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDecision {
    pub ip: Ipv4Addr,
    pub first_trigger_ts: u64,
    pub score: f64,
    pub op_point: OpPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EngineEvent {
    Verdict(Verdict),
    Block(BlockDecision),
}

/// Receives block decisions, e.g. to install a firewall rule.
pub trait BlockSink {
    fn block(&mut self, decision: &BlockDecision) -> Result<(), DetectError>;
}

/// Records what would be blocked without touching the system.
pub struct DryRunSink<W: Write> {
    out: W,
}

impl<W: Write> DryRunSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> BlockSink for DryRunSink<W> {
    fn block(&mut self, d: &BlockDecision) -> Result<(), DetectError> {
        let line = serde_json::json!({
            "action": "block",
            "dry_run": true,
            "ip": d.ip.to_string(),
            "ts": d.first_trigger_ts,
            "score": d.score,
            "op_point": d.op_point,
        });
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }
}

pub const IP_PLACEHOLDER: &str = "{ip}";

/// Accepts only canonical dotted-quad text.
pub fn validate_dotted_quad(ip: &str) -> Result<Ipv4Addr, DetectError> {
    match Ipv4Addr::from_str(ip) {
        Ok(addr) if addr.to_string() == ip => Ok(addr),
        _ => Err(DetectError::TemplateInvalid(format!(
            "{ip:?} is not a dotted-quad IPv4 address"
        ))),
    }
}

/// Renders a command with the address substituted for `{ip}`. When
/// executing, the rendered text is split on whitespace and run directly,
/// never through a shell.
#[derive(Debug, Clone)]
pub struct CommandTemplateSink {
    template: String,
    execute: bool,
    rendered: Vec<String>,
}

impl CommandTemplateSink {
    pub fn new(template: &str, execute: bool) -> Result<Self, DetectError> {
        if !template.contains(IP_PLACEHOLDER) {
            return Err(DetectError::TemplateInvalid(format!(
                "template must contain {IP_PLACEHOLDER}"
            )));
        }
        if template
            .split_whitespace()
            .next()
            .is_none_or(|w| w.contains(IP_PLACEHOLDER))
        {
            return Err(DetectError::TemplateInvalid(
                "template must start with a program name".into(),
            ));
        }
        Ok(Self {
            template: template.to_string(),
            execute,
            rendered: Vec::new(),
        })
    }

    pub fn render(&self, ip: &str) -> Result<String, DetectError> {
        validate_dotted_quad(ip)?;
        Ok(self.template.replace(IP_PLACEHOLDER, ip))
    }

    /// Commands rendered so far.
    pub fn rendered(&self) -> &[String] {
        &self.rendered
    }
}

impl BlockSink for CommandTemplateSink {
    fn block(&mut self, d: &BlockDecision) -> Result<(), DetectError> {
        let cmd = self.render(&d.ip.to_string())?;
        self.rendered.push(cmd.clone());
        if self.execute {
            let mut parts = cmd.split_whitespace();
            let program = parts.next().expect("validated non-empty template");
            let status = Command::new(program)
                .args(parts)
                .status()
                .map_err(|e| DetectError::ExecFailed(format!("{cmd}: {e}")))?;
            if !status.success() {
                return Err(DetectError::ExecFailed(format!("{cmd}: {status}")));
            }
        }
        Ok(())
    }
}

/// Verdict lines below this level are not written to the decision log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogLevel {
    Error,
    #[default]
    Warn,
    Info,
    Debug,
}

impl FromStr for LogLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "error" => Ok(LogLevel::Error),
            "warn" => Ok(LogLevel::Warn),
            "info" => Ok(LogLevel::Info),
            "debug" => Ok(LogLevel::Debug),
            other => Err(format!(
                "unknown log level {other:?} (expected error, warn, info or debug)"
            )),
        }
    }
}

/// One decision-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub ts: u64,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: u8,
    pub score: f64,
    pub op_point: OpPoint,
    pub threshold: f64,
    pub verdict: Decision,
    /// `"none"` for verdict lines, `"block"` for block decisions.
    pub action: String,
}

impl LogRecord {
    fn from_verdict(v: &Verdict, action: &str) -> Self {
        Self {
            ts: v.ts,
            src_ip: v.key.src_ip,
            dst_ip: v.key.dst_ip,
            src_port: v.key.src_port,
            dst_port: v.key.dst_port,
            proto: v.key.protocol,
            score: v.score,
            op_point: v.op_point,
            threshold: v.threshold,
            verdict: v.decision,
            action: action.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub op_point: OpPoint,
    pub tracker: TrackerConfig,
    pub log_level: LogLevel,
    /// How often (in capture time) idle flows are expired.
    pub expire_every_micros: u64,
}

impl EngineConfig {
    pub fn new(model: &ModelState, op_point: OpPoint) -> Self {
        Self {
            op_point,
            tracker: TrackerConfig::new(model.sample_cfg.n),
            log_level: LogLevel::default(),
            expire_every_micros: crate::prep::EXPIRE_EVERY_MICROS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub records: u64,
    pub skipped: u64,
    /// Packets from already-blocked sources.
    pub blocked_packets: u64,
    pub samples_scored: u64,
    /// Completed samples from sources blocked before they were scored.
    pub samples_suppressed: u64,
    pub anomalous: u64,
    pub blocks: u64,
    pub sink_failures: u64,
    pub evictions: u64,
}

pub struct Engine<'a> {
    model: &'a ModelState,
    thresholds: ThresholdSet,
    cfg: EngineConfig,
    tracker: FlowTracker,
    blocklist: BTreeSet<Ipv4Addr>,
    sink: &'a mut dyn BlockSink,
    log: Option<&'a mut dyn Write>,
    stats: EngineStats,
    next_expire: Option<u64>,
    clock: u64,
}

impl<'a> Engine<'a> {
    pub fn new(
        model: &'a ModelState,
        thresholds: ThresholdSet,
        cfg: EngineConfig,
        sink: &'a mut dyn BlockSink,
        log: Option<&'a mut dyn Write>,
    ) -> Result<Self, DetectError> {
        model.center()?;
        if cfg.tracker.n != model.sample_cfg.n {
            return Err(DetectError::Config(format!(
                "tracker samples {} packets but the model expects {}",
                cfg.tracker.n, model.sample_cfg.n
            )));
        }
        Ok(Self {
            model,
            thresholds,
            tracker: FlowTracker::new(cfg.tracker.clone()),
            cfg,
            blocklist: BTreeSet::new(),
            sink,
            log,
            stats: EngineStats::default(),
            next_expire: None,
            clock: 0,
        })
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn blocklist(&self) -> &BTreeSet<Ipv4Addr> {
        &self.blocklist
    }

    fn write_log(&mut self, rec: &LogRecord) -> Result<(), DetectError> {
        if let Some(w) = self.log.as_deref_mut() {
            serde_json::to_writer(&mut *w, rec).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn emit_block(&mut self, d: &BlockDecision) {
        for attempt in 0..2 {
            match self.sink.block(d) {
                Ok(()) => return,
                Err(e) if attempt == 0 => {
                    log::warn!("block sink failed for {}: {e}; retrying", d.ip)
                }
                Err(e) => log::error!("block sink failed again for {}: {e}; dropping", d.ip),
            }
        }
        self.stats.sink_failures += 1;
    }

    fn handle_sample(
        &mut self,
        raw: FlowSampleRaw,
        ts: u64,
        out: &mut Vec<EngineEvent>,
    ) -> Result<(), DetectError> {
        let src = raw.key.src_ip;
        if self.blocklist.contains(&src) {
            self.stats.samples_suppressed += 1;
            return Ok(());
        }
        let sample = to_sample(&raw, self.model.sample_cfg)?;
        let score = self.model.score(&sample.values)?.0;
        self.stats.samples_scored += 1;
        let op = self.cfg.op_point;
        let verdict = Verdict {
            key: raw.key,
            ts,
            score,
            op_point: op,
            threshold: self.thresholds.get(op),
            decision: classify(score, &self.thresholds, op),
        };
        let anomalous = verdict.decision == Decision::Anomalous;
        let level = if anomalous {
            LogLevel::Warn
        } else {
            LogLevel::Debug
        };
        if level <= self.cfg.log_level {
            self.write_log(&LogRecord::from_verdict(&verdict, "none"))?;
        }
        if anomalous {
            self.stats.anomalous += 1;
        }
        out.push(EngineEvent::Verdict(verdict.clone()));
        if anomalous && self.blocklist.insert(src) {
            let decision = BlockDecision {
                ip: src,
                first_trigger_ts: ts,
                score,
                op_point: op,
            };
            log::warn!("blocking {src} (score {score:.6} > {})", verdict.threshold);
            self.write_log(&LogRecord::from_verdict(&verdict, "block"))?;
            self.emit_block(&decision);
            self.stats.blocks += 1;
            out.push(EngineEvent::Block(decision));
        }
        Ok(())
    }

    /// Process one captured frame.
    pub fn process(
        &mut self,
        rec: &RawRecord,
        link: LinkType,
    ) -> Result<Vec<EngineEvent>, DetectError> {
        let mut out = Vec::new();
        self.stats.records += 1;
        self.clock = self.clock.max(rec.ts_micros);
        let now = self.clock;
        match self.next_expire {
            None => self.next_expire = Some(now + self.cfg.expire_every_micros),
            Some(t) if now >= t => {
                for raw in self.tracker.expire(now) {
                    self.handle_sample(raw, now, &mut out)?;
                }
                self.next_expire = Some(now + self.cfg.expire_every_micros);
            }
            Some(_) => {}
        }
        let pkt = match parse_packet(rec, link) {
            Parsed::Packet(p) => p,
            Parsed::Skip(_) => {
                self.stats.skipped += 1;
                return Ok(out);
            }
        };
        if self.blocklist.contains(&pkt.src_ip) {
            self.stats.blocked_packets += 1;
            return Ok(out);
        }
        let samples = match self.tracker.observe(&pkt) {
            Ok(s) => s.into_iter().collect::<Vec<_>>(),
            Err(FlowError::CapacityExceeded {
                evicted, emitted, ..
            }) => {
                self.stats.evictions += 1;
                evicted.into_iter().chain(emitted).map(|b| *b).collect()
            }
        };
        for raw in samples {
            self.handle_sample(raw, now, &mut out)?;
        }
        Ok(out)
    }

    /// Score every flow still collecting; call at the end of a replay.
    pub fn finish(&mut self) -> Result<Vec<EngineEvent>, DetectError> {
        let mut out = Vec::new();
        for raw in self.tracker.flush() {
            self.handle_sample(raw, self.clock, &mut out)?;
        }
        if let Some(w) = self.log.as_deref_mut() {
            w.flush()?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineOutcome {
    pub events: Vec<EngineEvent>,
    pub stats: EngineStats,
}

impl EngineOutcome {
    pub fn blocks(&self) -> Vec<&BlockDecision> {
        self.events
            .iter()
            .filter_map(|e| match e {
                EngineEvent::Block(b) => Some(b),
                EngineEvent::Verdict(_) => None,
            })
            .collect()
    }

    pub fn verdicts(&self) -> Vec<&Verdict> {
        self.events
            .iter()
            .filter_map(|e| match e {
                EngineEvent::Verdict(v) => Some(v),
                EngineEvent::Block(_) => None,
            })
            .collect()
    }
}

/// Replay `records` through a fresh engine.
pub fn run_engine<'a, I>(
    records: I,
    link: LinkType,
    model: &'a ModelState,
    thresholds: ThresholdSet,
    cfg: EngineConfig,
    sink: &'a mut dyn BlockSink,
    log: Option<&'a mut dyn Write>,
) -> Result<EngineOutcome, DetectError>
where
    I: IntoIterator<Item = &'a RawRecord>,
{
    let mut engine = Engine::new(model, thresholds, cfg, sink, log)?;
    let mut events = Vec::new();
    for rec in records {
        events.extend(engine.process(rec, link)?);
    }
    events.extend(engine.finish()?);
    Ok(EngineOutcome {
        events,
        stats: engine.stats.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn calibrate_one_to_hundred() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        let t = calibrate(&scores).unwrap();
        // h = 0.99 * 99 = 98.01 -> 99 + 0.01 * (100 - 99)
        assert!((t.ninety_nine - 99.01).abs() < 1e-12);
        // h = 0.9999 * 99 = 98.9901 -> 99 + 0.9901
        assert!((t.near_max - 99.9901).abs() < 1e-12);
        assert_eq!(t.max, 100.0);
        assert_eq!(t.hundred_one, 101.0);
    }

    #[test]
    fn calibrate_degenerate_sets() {
        let t = calibrate(&[2.5; 7]).unwrap();
        assert_eq!((t.ninety_nine, t.near_max, t.max), (2.5, 2.5, 2.5));
        assert_eq!(t.hundred_one, 1.01 * 2.5);
        let t = calibrate(&[0.7]).unwrap();
        assert_eq!(
            (t.ninety_nine, t.near_max, t.max, t.hundred_one),
            (0.7, 0.7, 0.7, 1.01 * 0.7)
        );
        assert!(matches!(calibrate(&[]), Err(DetectError::EmptyScores)));
        assert!(calibrate(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn classify_is_strict() {
        let t = ThresholdSet {
            ninety_nine: 0.4,
            near_max: 0.45,
            max: 0.5,
            hundred_one: 0.505,
        };
        assert_eq!(classify(0.5, &t, OpPoint::NinetyNine), Decision::Anomalous);
        assert_eq!(classify(0.5, &t, OpPoint::Max), Decision::Benign);
        assert_eq!(classify(0.0, &t, OpPoint::HundredOne), Decision::Benign);
    }

    #[test]
    fn op_point_names_round_trip() {
        for op in OpPoint::ALL {
            assert_eq!(op.name().parse::<OpPoint>().unwrap(), op);
            assert_eq!(serde_json::to_string(&op).unwrap(), format!("\"{op}\""));
        }
        assert!("p99".parse::<OpPoint>().is_err());
    }

    proptest! {
        #[test]
        fn thresholds_ordered(scores in prop::collection::vec(0.0f64..1e6, 1..300)) {
            let t = calibrate(&scores).unwrap();
            prop_assert!(t.ninety_nine <= t.near_max);
            prop_assert!(t.near_max <= t.max);
            prop_assert!(t.max < t.hundred_one || t.max == 0.0);
            prop_assert_eq!(t.hundred_one, 1.01 * t.max);
            let flagged = scores.iter().filter(|&&s| classify(s, &t, OpPoint::NinetyNine) == Decision::Anomalous).count();
            prop_assert!(flagged <= (0.01 * scores.len() as f64).ceil() as usize + 1);
            prop_assert!(scores.iter().all(|&s| classify(s, &t, OpPoint::Max) == Decision::Benign));
        }
    }

    fn decision(ip: [u8; 4]) -> BlockDecision {
        BlockDecision {
            ip: Ipv4Addr::from(ip),
            first_trigger_ts: 5,
            score: 3.0,
            op_point: OpPoint::Max,
        }
    }

    #[test]
    fn dry_run_records_ip() {
        let mut sink = DryRunSink::new(Vec::new());
        sink.block(&decision([10, 0, 0, 9])).unwrap();
        let text = String::from_utf8(sink.into_inner()).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("10.0.0.9"));
    }

    #[test]
    fn template_substitution_and_injection_guard() {
        let sink = CommandTemplateSink::new("block --src {ip}", false).unwrap();
        assert_eq!(sink.render("10.0.0.9").unwrap(), "block --src 10.0.0.9");
        assert!(matches!(
            sink.render("10.0.0.9; rm"),
            Err(DetectError::TemplateInvalid(_))
        ));
        assert!(sink.render("010.0.0.9").is_err());
        assert!(sink.render("10.0.0").is_err());
        assert!(CommandTemplateSink::new("block --src", false).is_err());
        assert!(CommandTemplateSink::new("{ip}", false).is_err());
    }

    #[cfg(unix)]
    #[test]
    fn template_executes_without_shell() {
        let mut ok = CommandTemplateSink::new("true {ip}", true).unwrap();
        ok.block(&decision([10, 0, 0, 9])).unwrap();
        assert_eq!(ok.rendered(), ["true 10.0.0.9"]);
        let mut bad = CommandTemplateSink::new("false {ip}", true).unwrap();
        assert!(matches!(
            bad.block(&decision([10, 0, 0, 9])),
            Err(DetectError::ExecFailed(_))
        ));
    }
}
