use ldpi::flow::TrackerConfig;
use ldpi::model::{ArchConfig, ModelState};
use ldpi::packet::LinkType;
use ldpi::prep::{extract_samples, Label, SampleConfig};
use ldpi::synth::{gen_benign, gen_flood, BenignConfig, FloodConfig, FloodKind};
use ldpi::train::{finetune, pretrain, FinetuneConfig, PretrainConfig};

fn rows(records: &[ldpi::packet::RawRecord], sc: SampleConfig) -> Vec<Vec<f32>> {
    extract_samples(records, LinkType::Ethernet, TrackerConfig::new(sc.n), sc)
        .unwrap()
        .into_iter()
        .map(|s| s.values)
        .collect()
}

fn benign(sc: SampleConfig, count: usize) -> Vec<Vec<f32>> {
    let cfg = BenignConfig {
        flow_count: count,
        clients: 16,
        ..BenignConfig::default()
    };
    let mut out = rows(&gen_benign(&cfg, 21).unwrap(), sc);
    assert!(out.len() >= count, "only {} samples", out.len());
    out.truncate(count);
    out
}

#[test]
fn pretraining_lowers_the_loss() {
    let sc = SampleConfig::default();
    let data = benign(sc, 512);
    let mut model = ModelState::build_rescnn(sc, ArchConfig::tiny(), 1).unwrap();
    let cfg = PretrainConfig {
        epochs: 50,
        warmup_epochs: 5,
        seed: 2,
        ..PretrainConfig::default()
    };
    let logs = pretrain(&mut model, &data, &cfg).unwrap();
    assert_eq!(logs.len(), 50);
    let (first, last) = (logs[0].loss, logs[49].loss);
    assert!(last < first, "loss {first} -> {last}");
}

#[test]
fn finetuning_separates_floods_from_benign() {
    let sc = SampleConfig::default();
    let data = benign(sc, 256);
    let mut anomalies = Vec::new();
    for (i, kind) in FloodKind::ALL.into_iter().enumerate() {
        let f = FloodConfig::new(
            kind,
            if kind == FloodKind::Http { 180 } else { 20 },
            format!("203.0.113.{}", 10 + i).parse().unwrap(),
            "10.0.0.10".parse().unwrap(),
        );
        anomalies.extend(
            rows(&gen_flood(&f, 40 + i as u64).unwrap(), sc)
                .into_iter()
                .take(16),
        );
    }
    let (tune, held): (Vec<_>, Vec<_>) = anomalies
        .into_iter()
        .enumerate()
        .partition(|(i, _)| i % 2 == 0);
    let tune: Vec<Vec<f32>> = tune.into_iter().map(|(_, r)| r).collect();
    let held: Vec<Vec<f32>> = held.into_iter().map(|(_, r)| r).collect();

    let mut model = ModelState::build_rescnn(sc, ArchConfig::tiny(), 3).unwrap();
    let mut all = data[..192].to_vec();
    let mut labels = vec![Label::Benign; all.len()];
    all.extend(tune.iter().cloned());
    labels.resize(all.len(), Label::Anomalous);
    let cfg = FinetuneConfig {
        epochs: 10,
        seed: 4,
        ..FinetuneConfig::default()
    };
    finetune(&mut model, &all, &labels, None, &cfg).unwrap();

    let mean = |rows: &[Vec<f32>]| {
        let s = model.score_batch(rows).unwrap();
        s.iter().map(|x| x.0).sum::<f64>() / s.len() as f64
    };
    let (b, a) = (mean(&data[192..]), mean(&held));
    assert!(b < a, "benign mean {b} vs anomalous mean {a}");
}
