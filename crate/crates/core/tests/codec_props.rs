use netop_core::codec::{
    decode_action, decode_token, embed, encode_action, encode_token, slot, ActionId, Phase,
    Vocabulary, ACTION_COUNT, CATEGORY_COUNT, OBS_DIM,
};
use netop_core::env::EpisodeState;
use netop_core::netsim::{SimConfig, MAX_ADDRESSES};
use proptest::prelude::*;

const MIN_GAP: f64 = 1.0 / (12.0 * 64.0);

fn all_embeddings() -> Vec<(usize, usize, f64)> {
    let v = Vocabulary::get();
    (0..CATEGORY_COUNT)
        .flat_map(|c| (0..v.pool_size(c).unwrap()).map(move |i| (c, i, embed(c, i).unwrap())))
        .collect()
}

#[test]
fn every_token_round_trips() {
    let v = Vocabulary::get();
    let mut seen = std::collections::HashSet::new();
    for c in 0..CATEGORY_COUNT {
        for (i, tok) in v.tokens(c).iter().enumerate() {
            assert_eq!(encode_token(tok).unwrap(), (c, i));
            assert_eq!(decode_token(c, i).unwrap(), tok);
            assert!(seen.insert(tok.clone()), "duplicate token {tok}");
        }
    }
    assert_eq!(v.pool_size(1), Some(MAX_ADDRESSES));
    assert!(encode_token("no-such-token").is_err());
}

#[test]
fn every_action_round_trips() {
    for a in 0..ACTION_COUNT as u16 {
        let id = ActionId(a);
        let phase = id.phase().unwrap();
        let sub = decode_action(id, phase).unwrap();
        assert_eq!(encode_action(sub).unwrap(), id);
        for other in [Phase::Diagnose, Phase::Command, Phase::Parameter] {
            assert_eq!(decode_action(id, other).is_ok(), other == phase);
        }
    }
    assert!(ActionId(ACTION_COUNT as u16).phase().is_none());
}

#[test]
fn category_intervals_are_disjoint_with_gap() {
    let e = all_embeddings();
    for &(c, _, x) in &e {
        let lo = c as f64 / 12.0;
        assert!(x > lo && x < lo + 1.0 / 12.0);
    }
    let mut min_cross = f64::INFINITY;
    for &(c1, _, x1) in &e {
        for &(c2, _, x2) in &e {
            if c1 != c2 {
                min_cross = min_cross.min((x1 - x2).abs());
            }
        }
    }
    assert!(min_cross >= MIN_GAP, "cross-category gap {min_cross}");
}

#[test]
fn embedding_is_monotone_within_category() {
    let v = Vocabulary::get();
    for c in 0..CATEGORY_COUNT {
        let xs: Vec<f64> = (0..v.pool_size(c).unwrap()).map(|i| embed(c, i).unwrap()).collect();
        assert!(xs.windows(2).all(|w| w[0] < w[1]), "category {c}");
    }
    assert!(embed(1, MAX_ADDRESSES).is_err());
}

proptest! {
    #[test]
    fn observation_slots_lie_in_their_category(
        d in any::<u64>(),
        f in any::<u64>(),
        steps in 0usize..40,
    ) {
        let (mut state, mut obs) = EpisodeState::reset(d, f, &SimConfig::default()).unwrap();
        for _ in 0..steps {
            if state.done {
                break;
            }
            let a = state.oracle_action().unwrap();
            obs = state.step(a).unwrap().next_observation;
        }
        prop_assert_eq!(obs.len(), OBS_DIM);
        for (s, x) in obs.iter().enumerate() {
            if *x == 0.0 {
                prop_assert!(s != slot::PHASE || state.done);
                continue;
            }
            // Invert the embedding and check the slot is exactly a token.
            let c = (*x * 12.0).floor() as usize;
            let n = Vocabulary::get().pool_size(c).unwrap();
            let i = ((*x * 12.0 - c as f64) * (n + 1) as f64).round() as usize - 1;
            prop_assert_eq!(embed(c, i).unwrap(), *x);
        }
    }
}
