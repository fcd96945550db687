use std::path::Path;
use std::process::{Command, Output};

fn ldpi(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldpi"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LDPI_LOG_LEVEL")
        .output()
        .expect("spawn ldpi")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
[synth.benign]
flow_count = 20
holdout_flows = 5
clients = 4
servers = 2

[[synth.floods]]
kind = "syn"
packet_count = 50
src_ip = "203.0.113.10"
dst_ip = "10.0.0.10"
"#;

#[test]
fn help_lists_subcommands_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldpi(&["--help"], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for word in [
        "synth",
        "train",
        "detect",
        "eval",
        "resources",
        "--config",
        "--seed",
        "--profile",
        "--op-point",
        "--sink",
        "--template",
        "--direction",
        "--out",
    ] {
        assert!(text.contains(word), "help is missing {word}");
    }
}

#[test]
fn synth_writes_captures_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = ldpi(
        &["--config", "small.toml", "--out", "gen", "synth"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "benign.pcap",
        "benign.labels.csv",
        "benign_holdout.pcap",
        "flood_syn.pcap",
        "flood_syn.labels.csv",
    ] {
        assert!(dir.path().join("gen").join(f).is_file(), "{f} not written");
    }
    let labels = std::fs::read_to_string(dir.path().join("gen/flood_syn.labels.csv")).unwrap();
    assert!(labels.contains("203.0.113.10,syn_flood"));
}

#[test]
fn bad_flood_kind_exits_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("kind = \"syn\"", "kind = \"smurf\"");
    std::fs::write(dir.path().join("bad.toml"), text).unwrap();
    let o = ldpi(&["--config", "bad.toml", "synth"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind"), "{}", stderr(&o));
}

#[test]
fn missing_model_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldpi(
        &["detect", "--model", "nowhere", "--pcap", "none.pcap"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn invalid_log_level_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ldpi"))
        .arg("config")
        .current_dir(dir.path())
        .env("LDPI_LOG_LEVEL", "loud")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("LDPI_LOG_LEVEL"));
}

#[test]
fn direction_without_local_nets_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldpi(
        &["--profile", "paper", "--direction", "in", "config"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resources_replay_summarizes_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("trace.txt"), "0 1.0 100.0\n5 3.0 300.0\n").unwrap();
    let o = ldpi(
        &[
            "resources",
            "--replay",
            "trace.txt",
            "--interval",
            "5",
            "--duration",
            "10",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("samples 2"), "{text}");
    assert!(text.contains("cpu % avg 2.000000 max 3.000000"), "{text}");
}
