use std::collections::BTreeSet;

use ldpi::detect::{run_engine, DryRunSink, EngineConfig, OpPoint, ThresholdSet};
use ldpi::model::{ArchConfig, ModelState};
use ldpi::packet::{LinkType, RawRecord};
use ldpi::prep::{extract_samples, SampleConfig};
use ldpi::synth::{gen_benign, gen_flood, BenignConfig, FloodConfig, FloodKind};
use ldpi::train::{calibrate_on, init_center};

fn benign_records() -> Vec<RawRecord> {
    let cfg = BenignConfig {
        flow_count: 60,
        clients: 8,
        servers: 3,
        ..BenignConfig::default()
    };
    gen_benign(&cfg, 11).unwrap()
}

fn centered_model(records: &[RawRecord]) -> (ModelState, Vec<Vec<f32>>) {
    let sc = SampleConfig::default();
    let mut model = ModelState::build_rescnn(sc, ArchConfig::tiny(), 5).unwrap();
    let cfg = EngineConfig::new(&model, OpPoint::HundredOne);
    let rows: Vec<Vec<f32>> = extract_samples(records, LinkType::Ethernet, cfg.tracker, sc)
        .unwrap()
        .into_iter()
        .map(|s| s.values)
        .collect();
    let c = init_center(&model, &rows).unwrap();
    model.set_center(c).unwrap();
    (model, rows)
}

fn zero_thresholds() -> ThresholdSet {
    ThresholdSet {
        ninety_nine: 0.0,
        near_max: 0.0,
        max: 0.0,
        hundred_one: 0.0,
    }
}

#[test]
fn calibration_capture_raises_no_blocks_at_hundred_one() {
    let records = benign_records();
    let (model, rows) = centered_model(&records);
    let th = calibrate_on(&model, &rows).unwrap();
    let mut sink = DryRunSink::new(Vec::new());
    let cfg = EngineConfig::new(&model, OpPoint::HundredOne);
    let out = run_engine(
        &records,
        LinkType::Ethernet,
        &model,
        th,
        cfg,
        &mut sink,
        None,
    )
    .unwrap();
    assert!(out.blocks().is_empty());
    assert_eq!(out.stats.samples_scored as usize, rows.len());
    assert!(sink.into_inner().is_empty());
}

#[test]
fn each_source_is_blocked_once() {
    let records = benign_records();
    let (model, _) = centered_model(&records);
    let mut sink = DryRunSink::new(Vec::new());
    let cfg = EngineConfig::new(&model, OpPoint::NinetyNine);
    let out = run_engine(
        &records,
        LinkType::Ethernet,
        &model,
        zero_thresholds(),
        cfg,
        &mut sink,
        None,
    )
    .unwrap();
    let blocks = out.blocks();
    let ips: BTreeSet<_> = blocks.iter().map(|b| b.ip).collect();
    assert_eq!(ips.len(), blocks.len());
    assert_eq!(out.stats.blocks as usize, blocks.len());
    // once blocked, later traffic from the source is dropped unscored
    assert!(out.stats.blocked_packets > 0);
    let lines = String::from_utf8(sink.into_inner()).unwrap();
    assert_eq!(lines.lines().count(), blocks.len());
}

#[test]
fn flood_source_blocked_at_its_first_sample() {
    let records = benign_records();
    let (model, _) = centered_model(&records);
    let flood = FloodConfig::new(
        FloodKind::Syn,
        200,
        "203.0.113.10".parse().unwrap(),
        "10.0.0.10".parse().unwrap(),
    );
    let recs = gen_flood(&flood, 3).unwrap();
    let mut sink = DryRunSink::new(Vec::new());
    let cfg = EngineConfig::new(&model, OpPoint::Max);
    let out = run_engine(
        &recs,
        LinkType::Ethernet,
        &model,
        zero_thresholds(),
        cfg,
        &mut sink,
        None,
    )
    .unwrap();
    let blocks = out.blocks();
    assert_eq!(blocks.len(), 1);
    assert_eq!(blocks[0].ip, flood.src_ip);
    // one-packet flows surface together at the final flush; the first blocks the rest
    assert_eq!(out.stats.samples_scored, 1);
    assert_eq!(out.stats.samples_suppressed, 199);
}

#[test]
fn replay_is_deterministic() {
    let records = benign_records();
    let (model, rows) = centered_model(&records);
    let th = calibrate_on(&model, &rows).unwrap();
    let run = || {
        let mut sink = DryRunSink::new(Vec::new());
        let mut log = Vec::new();
        let cfg = EngineConfig::new(&model, OpPoint::NinetyNine);
        let out = run_engine(
            &records,
            LinkType::Ethernet,
            &model,
            th,
            cfg,
            &mut sink,
            Some(&mut log),
        )
        .unwrap();
        (out, sink.into_inner(), log)
    };
    let (a, sink_a, log_a) = run();
    let (b, sink_b, log_b) = run();
    assert_eq!(a, b);
    assert_eq!(sink_a, sink_b);
    assert_eq!(log_a, log_b);
}
