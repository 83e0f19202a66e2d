//! Frozen outputs. Run with `NETOP_BLESS=1` to rewrite the fixture files after
//! an intentional change.

use std::path::PathBuf;

use netop_core::codec::vocab_hash;
use netop_core::env::EpisodeState;
use netop_core::netsim::{generate_design, inject_faults, NetworkState, SimConfig};
use netop_core::neural::{QuantileModel, DEFAULT_DIMS};
use netop_core::TrainConfig;

fn check(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    if std::env::var_os("NETOP_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with NETOP_BLESS=1 to create)", path.display()));
    assert_eq!(actual, expected, "fixture {name} changed");
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).unwrap();
    s.push('\n');
    s
}

#[test]
fn design_seed_0() {
    let d = generate_design(0, &SimConfig::default()).unwrap();
    d.check().unwrap();
    check("design_seed0.json", &pretty(&d));
}

#[test]
fn faults_design_0_inject_1() {
    let cfg = SimConfig::default();
    let d = generate_design(0, &cfg).unwrap();
    let (state, faults) = inject_faults(&d, 1, &cfg).unwrap();
    check("faults_design0_seed1.json", &pretty(&faults));
    check("state_design0_seed1.json", &state.to_json());
    let back = NetworkState::from_json(&state.to_json()).unwrap();
    assert_eq!(back, state);
}

#[test]
fn first_observation_design_0_fault_1() {
    let (_, obs) = EpisodeState::reset(0, 1, &SimConfig::default()).unwrap();
    check("first_observation_design0_seed1.json", &pretty(&obs.to_vec()));
}

#[test]
fn init_checksums() {
    let raw = QuantileModel::init(0, &DEFAULT_DIMS).unwrap();
    let cfg = TrainConfig::default();
    let encoded = QuantileModel::init_encoded(0, &cfg.dims(), cfg.input_octaves).unwrap();
    let text = format!("raw {}\nencoded {}\n", raw.checksum(), encoded.checksum());
    check("init_seed0_checksums.txt", &text);
}

#[test]
fn vocabulary_hash() {
    check("vocab_hash.txt", &format!("{}\n", vocab_hash()));
}
