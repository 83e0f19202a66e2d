use std::collections::{BTreeMap, BTreeSet, VecDeque};

use netop_core::env::{episode_seeds, oracle_policy, run_episode, EpisodeState};
use netop_core::netsim::{
    compose, enumerate_items, generate_design, inject_faults, oracle_script, ItemKind, NetworkDesign,
    NetworkState, SimConfig, SimError, ABSENT,
};
use proptest::prelude::*;

/// Connectivity by breadth-first search over the link list.
fn connected(d: &NetworkDesign) -> bool {
    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for l in &d.links {
        adj.entry(&l.a.device).or_default().push(&l.b.device);
        adj.entry(&l.b.device).or_default().push(&l.a.device);
    }
    let mut seen = BTreeSet::from([d.devices[0].as_str()]);
    let mut queue = VecDeque::from([d.devices[0].as_str()]);
    while let Some(x) = queue.pop_front() {
        for y in adj.get(x).into_iter().flatten() {
            if seen.insert(y) {
                queue.push_back(y);
            }
        }
    }
    seen.len() == d.devices.len()
}

fn configs() -> impl Strategy<Value = SimConfig> {
    prop_oneof![Just(SimConfig::default()), Just(SimConfig::desk())]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn designs_are_trees(seed in any::<u64>(), cfg in configs()) {
        let d = generate_design(seed, &cfg).unwrap();
        let n = d.devices.len();
        prop_assert!((cfg.device_min..=cfg.device_max).contains(&n));
        prop_assert_eq!(d.links.len(), n - 1);
        prop_assert!(connected(&d));
        let subnets: BTreeSet<u16> = d.links.iter().map(|l| l.subnet).collect();
        prop_assert_eq!(subnets.len(), d.links.len());
        for l in &d.links {
            prop_assert_ne!(l.a.address, l.b.address);
            prop_assert!((1..=cfg.subnet_pool_size as u16).contains(&l.subnet));
            prop_assert!((1..=cfg.address_pool_size as u16).contains(&l.a.address));
        }
        prop_assert!(d.check().is_ok());
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>(), fseed in any::<u64>(), cfg in configs()) {
        let a = generate_design(seed, &cfg).unwrap();
        let b = generate_design(seed, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        let (sa, fa) = inject_faults(&a, fseed, &cfg).unwrap();
        let (sb, fb) = inject_faults(&b, fseed, &cfg).unwrap();
        prop_assert_eq!(sa.to_json(), sb.to_json());
        prop_assert_eq!(fa, fb);
    }

    #[test]
    fn faults_are_legal_and_counted(seed in any::<u64>(), fseed in any::<u64>(), cfg in configs()) {
        let d = generate_design(seed, &cfg).unwrap();
        let (state, faults) = inject_faults(&d, fseed, &cfg).unwrap();
        prop_assert!(!faults.is_empty());
        prop_assert_eq!(state.faults_remaining, faults.len());
        prop_assert_eq!(state.count_faults(), faults.len());
        for f in &faults {
            prop_assert!(f.kind.legal_under(d.protocol));
        }
        for item in enumerate_items(&state).iter().filter(|i| i.is_faulted()) {
            prop_assert!(item.kind.accepts_value(&item.current_value));
            if item.kind == ItemKind::NetworkStatement {
                prop_assert_eq!(item.current_value.as_str(), ABSENT);
            }
        }
    }

    #[test]
    fn json_round_trip(seed in any::<u64>(), fseed in any::<u64>()) {
        let cfg = SimConfig::default();
        let (state, _) = inject_faults(&generate_design(seed, &cfg).unwrap(), fseed, &cfg).unwrap();
        let text = state.to_json();
        prop_assert!(text.ends_with('\n'));
        let back = NetworkState::from_json(&text).unwrap();
        prop_assert_eq!(&back, &state);
        prop_assert_eq!(back.to_json(), text);
    }

    #[test]
    fn oracle_repairs_one_fault_at_a_time(seed in any::<u64>(), fseed in any::<u64>()) {
        let cfg = SimConfig::desk();
        let (mut state, _) = inject_faults(&generate_design(seed, &cfg).unwrap(), fseed, &cfg).unwrap();
        for (item, seq) in oracle_script(&state.clone()) {
            let before = state.faults_remaining;
            state.apply_instruction(&item, &compose(&seq).unwrap()).unwrap();
            let expected = if item.is_faulted() { before - 1 } else { before };
            prop_assert_eq!(state.faults_remaining, expected);
        }
        prop_assert!(state.is_repaired());
    }
}

#[test]
fn probability_extremes() {
    let design = generate_design(3, &SimConfig::default()).unwrap();
    let none = SimConfig { fault_probability: 0.0, ..SimConfig::default() };
    let all = SimConfig { fault_probability: 1.0, ..SimConfig::default() };
    for seed in 0..50 {
        assert_eq!(inject_faults(&design, seed, &none).unwrap().1.len(), 1);
        let (state, faults) = inject_faults(&design, seed, &all).unwrap();
        assert_eq!(faults.len(), state.design.len());
        assert!(state.design.iter().all(|(k, v)| state.current[k] != *v));
    }
}

#[test]
fn oracle_soundness_over_many_seeds() {
    let cfg = SimConfig::default();
    for i in 0..1000 {
        let (d, f) = episode_seeds(0, i);
        let design = generate_design(d, &cfg).unwrap();
        let (mut state, faults) = inject_faults(&design, f, &cfg).unwrap();
        for (item, seq) in oracle_script(&state.clone()) {
            state.apply_instruction(&item, &compose(&seq).unwrap()).unwrap();
        }
        assert!(state.is_repaired(), "seeds ({d}, {f})");
        assert_eq!(state.current, state.design);

        let summary = run_episode(d, f, &cfg, oracle_policy, |_, _| {}).unwrap();
        assert_eq!(summary.negative, 0, "seeds ({d}, {f})");
        assert_eq!(summary.total_reward(), (summary.items + 2 * faults.len()) as i64);
        assert!(summary.fully_repaired());
    }
}

#[test]
fn oracle_episode_samples() {
    let cfg = SimConfig::default();
    let (mut state, mut obs) = EpisodeState::reset(11, 12, &cfg).unwrap();
    let expected = state.perfect_steps();
    let mut samples = 0;
    while !state.done {
        let a = state.oracle_action().unwrap();
        let r = state.step(a).unwrap();
        assert_eq!(r.reward, 1);
        samples += 1;
        if r.episode_done {
            assert!(r.next_observation.iter().all(|x| *x == 0.0));
            assert!(r.network_repaired);
        }
        obs = r.next_observation;
    }
    let _ = obs;
    assert_eq!(samples, expected);
}

#[test]
fn unknown_protocol_is_a_parse_error() {
    let cfg = SimConfig::default();
    let (state, _) = inject_faults(&generate_design(0, &cfg).unwrap(), 1, &cfg).unwrap();
    let text = state.to_json().replacen(&format!("\"{}\"", state.protocol.token()), "\"BGP\"", 1);
    assert!(matches!(NetworkState::from_json(&text), Err(SimError::Parse { .. })));
}
