//! Episode driver over one faulted network.
//!
//! Items are visited in [`enumerate_items`] order. Each item is inspected in
//! up to three sub-steps (diagnose, command, parameter) and every sub-step
//! action is scored +1 when it equals the oracle action and -1 otherwise. A
//! wrong action leaves the episode where it is; after three misses on the
//! same sub-step the oracle action is applied on the agent's behalf and the
//! episode is flagged as assisted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    self, build_observation, encode_action, ActionId, CodecError, Observation, Phase,
    PAD_OBSERVATION,
};
use crate::netsim::{
    enumerate_items, generate_design, inject_faults, oracle_sequence, Command, DeviceInstruction,
    InfoItem, NetworkState, SimConfig, SimError, SubAction, Verdict,
};

pub const MAX_RETRIES: u32 = 3;
pub const TRACE_SCHEMA: &str = "netop-trace-1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("reward must be +1 or -1, got {0}")]
    BadReward(i32),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// SplitMix64 finalizer, used to derive independent seeds from counters.
pub fn mix_seed(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `(design_seed, fault_seed)` of the `i`-th network drawn from `base`.
pub fn episode_seeds(base: u64, i: u64) -> (u64, u64) {
    let design = mix_seed(base.wrapping_add(i.wrapping_mul(0xD1B5_4A32_D192_ED03)));
    (design, mix_seed(design ^ 0xA076_1D64_78BD_642F))
}

#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub network: NetworkState,
    pub items: Vec<InfoItem>,
    pub cursor: usize,
    pub phase: Phase,
    pub pending: Option<Command>,
    pub steps_taken: usize,
    pub retries_on_current: u32,
    pub assisted: bool,
    pub max_steps: usize,
    pub fault_count: usize,
    pub design_seed: u64,
    pub fault_seed: u64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub reward: i8,
    pub next_observation: Observation,
    pub episode_done: bool,
    pub network_repaired: bool,
}

impl EpisodeState {
    pub fn reset(
        design_seed: u64,
        fault_seed: u64,
        cfg: &SimConfig,
    ) -> Result<(Self, Observation), EnvError> {
        let design = generate_design(design_seed, cfg)?;
        let (network, faults) = inject_faults(&design, fault_seed, cfg)?;
        Ok(Self::from_state(network, design_seed, fault_seed, faults.len()))
    }

    /// Starts an episode on an existing network state.
    pub fn from_state(
        network: NetworkState,
        design_seed: u64,
        fault_seed: u64,
        fault_count: usize,
    ) -> (Self, Observation) {
        let items = enumerate_items(&network);
        let max_steps = 4 * (items.len() + 2 * fault_count);
        let state = Self {
            network,
            items,
            cursor: 0,
            phase: Phase::Diagnose,
            pending: None,
            steps_taken: 0,
            retries_on_current: 0,
            assisted: false,
            max_steps,
            fault_count,
            design_seed,
            fault_seed,
            done: false,
        };
        let obs = state.observation();
        (state, obs)
    }

    /// Number of +1 steps an unassisted perfect agent collects.
    pub fn perfect_steps(&self) -> usize {
        self.items.len() + 2 * self.fault_count
    }

    /// Current value of the item under the cursor, read from the live state.
    pub fn current_item(&self) -> Option<InfoItem> {
        let snapshot = self.items.get(self.cursor)?;
        let mut item = snapshot.clone();
        item.current_value = self.network.current[&snapshot.key].clone();
        Some(item)
    }

    pub fn observation(&self) -> Observation {
        match self.current_item() {
            Some(item) if !self.done => build_observation(&item, self.phase, self.pending)
                .expect("simulator tokens are all in the vocabulary"),
            _ => PAD_OBSERVATION,
        }
    }

    pub fn oracle_action(&self) -> Result<ActionId, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let item = self.current_item().ok_or(EnvError::EpisodeDone)?;
        let seq = oracle_sequence(&item);
        let sub = match self.phase {
            Phase::Diagnose => seq[0],
            Phase::Command => seq[1],
            Phase::Parameter => seq[2],
        };
        Ok(encode_action(sub)?)
    }

    fn advance(&mut self, action: ActionId) -> Result<(), EnvError> {
        let item = self.current_item().ok_or(EnvError::EpisodeDone)?;
        match codec::decode_action(action, self.phase)? {
            SubAction::Verdict(Verdict::NoFault) => {
                self.network.apply_instruction(&item, &DeviceInstruction::no_fault())?;
                self.cursor += 1;
            }
            SubAction::Verdict(Verdict::FaultDetected) => self.phase = Phase::Command,
            SubAction::Command(c) => {
                self.pending = Some(c);
                self.phase = Phase::Parameter;
            }
            SubAction::Parameter(p) => {
                let command = self.pending.take().expect("parameter phase has a pending command");
                let instr = DeviceInstruction::repair(command, p);
                self.network.apply_instruction(&item, &instr)?;
                self.phase = Phase::Diagnose;
                self.cursor += 1;
            }
        }
        self.retries_on_current = 0;
        Ok(())
    }

    pub fn step(&mut self, action: ActionId) -> Result<StepResult, EnvError> {
        let oracle = self.oracle_action()?;
        self.steps_taken += 1;
        let reward = if action == oracle {
            self.advance(oracle)?;
            1
        } else {
            self.retries_on_current += 1;
            if self.retries_on_current >= MAX_RETRIES {
                self.advance(oracle)?;
                self.assisted = true;
            }
            -1
        };
        if self.cursor >= self.items.len() || self.steps_taken >= self.max_steps {
            self.done = true;
        }
        Ok(StepResult {
            reward,
            next_observation: self.observation(),
            episode_done: self.done,
            network_repaired: self.network.is_repaired(),
        })
    }
}

/// One stored transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplaySample {
    pub obs: Observation,
    pub action: ActionId,
    pub reward: i8,
    pub next_obs: Observation,
}

pub fn make_sample(
    obs: Observation,
    action: ActionId,
    reward: i32,
    next_obs: Observation,
) -> Result<ReplaySample, EnvError> {
    if reward != 1 && reward != -1 {
        return Err(EnvError::BadReward(reward));
    }
    Ok(ReplaySample { obs, action, reward: reward as i8, next_obs })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub items: usize,
    pub faults: usize,
    pub steps: usize,
    pub positive: usize,
    pub negative: usize,
    pub assisted: bool,
    pub repaired: bool,
}

impl EpisodeSummary {
    pub fn total_reward(&self) -> i64 {
        self.positive as i64 - self.negative as i64
    }

    pub fn fully_repaired(&self) -> bool {
        self.repaired && !self.assisted
    }
}

/// One line of an episode trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub action: ActionId,
    pub action_name: String,
    pub design_seed: u64,
    pub done: bool,
    pub fault_seed: u64,
    pub item: String,
    pub next_obs: Observation,
    pub obs: Observation,
    pub phase: Phase,
    pub reward: i8,
    pub schema: String,
    pub step: usize,
}

/// Runs one episode to completion with `policy`, calling `on_step` after
/// every transition.
pub fn run_episode<P, F>(
    design_seed: u64,
    fault_seed: u64,
    cfg: &SimConfig,
    mut policy: P,
    mut on_step: F,
) -> Result<EpisodeSummary, EnvError>
where
    P: FnMut(&EpisodeState, &Observation) -> ActionId,
    F: FnMut(&EpisodeState, &TraceRecord),
{
    let (mut state, mut obs) = EpisodeState::reset(design_seed, fault_seed, cfg)?;
    let mut summary = EpisodeSummary {
        items: state.items.len(),
        faults: state.fault_count,
        ..Default::default()
    };
    while !state.done {
        let action = policy(&state, &obs);
        let phase = state.phase;
        let item = state.items[state.cursor].key.clone();
        let result = state.step(action)?;
        if result.reward > 0 {
            summary.positive += 1;
        } else {
            summary.negative += 1;
        }
        let record = TraceRecord {
            action,
            action_name: action.name(),
            design_seed,
            done: result.episode_done,
            fault_seed,
            item,
            next_obs: result.next_observation,
            obs,
            phase,
            reward: result.reward,
            schema: TRACE_SCHEMA.to_string(),
            step: state.steps_taken,
        };
        on_step(&state, &record);
        obs = result.next_observation;
    }
    summary.steps = state.steps_taken;
    summary.assisted = state.assisted;
    summary.repaired = state.network.is_repaired();
    Ok(summary)
}

pub fn oracle_policy(state: &EpisodeState, _: &Observation) -> ActionId {
    state.oracle_action().expect("policy is only called on live episodes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{embed_token, slot};
    use crate::netsim::{FaultKind, ItemKind};

    fn faulted_episode(kind: FaultKind) -> EpisodeState {
        let cfg = SimConfig { fault_probability: 0.0, ..SimConfig::default() };
        for seed in 0.. {
            let design = generate_design(seed, &cfg).unwrap();
            let (state, faults) = inject_faults(&design, seed, &cfg).unwrap();
            if faults[0].kind == kind {
                return EpisodeState::from_state(state, seed, seed, 1).0;
            }
        }
        unreachable!()
    }

    fn seek_fault(ep: &mut EpisodeState) {
        while !ep.current_item().unwrap().is_faulted() {
            assert_eq!(ep.step(ActionId::NO_FAULT).unwrap().reward, 1);
        }
    }

    #[test]
    fn first_observation_is_diagnose() {
        let (ep, obs) = EpisodeState::reset(3, 4, &SimConfig::default()).unwrap();
        assert_eq!(obs[slot::PHASE], embed_token("diagnose").unwrap());
        assert!(ep.fault_count >= 1);
        assert_eq!(ep.max_steps, 4 * (ep.items.len() + 2 * ep.fault_count));
    }

    #[test]
    fn wrong_diagnosis_keeps_cursor() {
        let mut ep = faulted_episode(FaultKind::PortClosed);
        seek_fault(&mut ep);
        let cursor = ep.cursor;
        let r = ep.step(ActionId::NO_FAULT).unwrap();
        assert_eq!(r.reward, -1);
        assert_eq!(ep.cursor, cursor);
        assert_eq!(ep.phase, Phase::Diagnose);
        let r = ep.step(ActionId(9 + 4)).unwrap();
        assert_eq!(r.reward, -1);
        assert_eq!(ep.retries_on_current, 2);
        assert!(!ep.assisted);
    }

    #[test]
    fn three_misses_trigger_assist() {
        let mut ep = faulted_episode(FaultKind::AutoSummaryEnabled);
        seek_fault(&mut ep);
        for _ in 0..3 {
            assert_eq!(ep.step(ActionId::NO_FAULT).unwrap().reward, -1);
        }
        assert!(ep.assisted);
        assert_eq!(ep.phase, Phase::Command);
        assert_eq!(ep.retries_on_current, 0);
    }

    #[test]
    fn incorrect_address_oracle_actions() {
        let mut ep = faulted_episode(FaultKind::IncorrectIpAddress);
        seek_fault(&mut ep);
        let item = ep.current_item().unwrap();
        assert_eq!(item.kind, ItemKind::IpAddress);
        assert_eq!(ep.oracle_action().unwrap(), ActionId::FAULT_DETECTED);
        ep.step(ActionId::FAULT_DETECTED).unwrap();
        assert_eq!(ep.oracle_action().unwrap(), ActionId(3));
        ep.step(ActionId(3)).unwrap();
        let idx = crate::netsim::parse_address(&item.design_value).unwrap();
        assert_eq!(ep.oracle_action().unwrap(), ActionId(9 + idx - 1));
        let r = ep.step(ActionId(9 + idx - 1)).unwrap();
        assert_eq!(r.reward, 1);
        assert_eq!(ep.network.faults_remaining, 0);
    }

    #[test]
    fn step_after_done_is_an_error() {
        let cfg = SimConfig::default();
        let (mut ep, _) = EpisodeState::reset(1, 2, &cfg).unwrap();
        let mut last = None;
        while !ep.done {
            let a = ep.oracle_action().unwrap();
            last = Some(ep.step(a).unwrap());
        }
        let last = last.unwrap();
        assert!(last.episode_done && last.network_repaired);
        assert_eq!(last.next_observation, PAD_OBSERVATION);
        assert_eq!(ep.step(ActionId::NO_FAULT), Err(EnvError::EpisodeDone));
        assert_eq!(ep.oracle_action(), Err(EnvError::EpisodeDone));
    }

    #[test]
    fn oracle_rollout_is_perfect() {
        let cfg = SimConfig::default();
        for i in 0..200 {
            let (d, f) = episode_seeds(77, i);
            let mut rewards = Vec::new();
            let s = run_episode(d, f, &cfg, oracle_policy, |_, r| rewards.push(r.reward)).unwrap();
            assert!(s.repaired && !s.assisted);
            assert_eq!(s.negative, 0);
            assert_eq!(s.positive, s.items + 2 * s.faults);
            assert_eq!(rewards.len(), s.steps);
        }
    }

    #[test]
    fn always_wrong_agent_still_terminates() {
        let cfg = SimConfig::default();
        // 103 is never the oracle action outside parameter phase and only
        // rarely inside it.
        let s = run_episode(5, 6, &cfg, |_, _| ActionId(103), |_, _| {}).unwrap();
        assert!(s.assisted);
        assert!(s.repaired);
        assert!(s.steps <= 3 * (s.items + 2 * s.faults));
    }

    #[test]
    fn sample_contract() {
        let obs = [0.5; 16];
        let s = make_sample(obs, ActionId(4), -1, PAD_OBSERVATION).unwrap();
        assert_eq!((s.obs, s.action, s.reward, s.next_obs), (obs, ActionId(4), -1, PAD_OBSERVATION));
        assert_eq!(make_sample(obs, ActionId(4), 0, obs), Err(EnvError::BadReward(0)));
    }
}
