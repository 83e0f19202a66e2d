//! Data collection, critical-loss weighting and the two-phase training loop.
//!
//! Rewards are immediate, so every sample regresses the taken action's seven
//! quantile scores onto a fixed target (0.7 for a correct action, 0.3 for a
//! wrong one); there is no bootstrapped next-state value. A loss element is
//! *critical* when neither its own score nor the mean score of the action is
//! on the safe side of the target/threshold pair for its reward. Phase one
//! trains with uniform weights; phase two multiplies critical elements by
//! `critical_weight` until held-out validation accuracy reaches 100%.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{vocab_hash, ActionId, Observation, ACTION_COUNT, OBS_DIM};
use crate::env::{
    episode_seeds, make_sample, mix_seed, run_episode, EnvError, EpisodeState, EpisodeSummary,
    ReplaySample,
};
use crate::netsim::SimConfig;
use crate::neural::{
    AdamHyper, AdamState, Checkpoint, CheckpointMeta, NeuralError, QuantileModel, SeedLineage,
    CHECKPOINT_SCHEMA, QUANTILES,
};

pub const METRICS_SCHEMA: &str = "netop-metrics-1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("reward must be +1 or -1, got {0}")]
    Reward(i32),
    #[error("checkpoint is from phase {0}, expected phase 1")]
    ResumePhase(u8),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    QuantileHuber,
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub target_correct: f64,
    pub target_wrong: f64,
    pub mean_threshold_correct: f64,
    pub mean_threshold_wrong: f64,
    pub critical_weight: f64,
    pub huber_kappa: f64,
    pub loss_mode: LossMode,
    pub learning_rate: f64,
    pub hidden_sizes: Vec<usize>,
    /// Sinusoidal octaves per input scalar (0 = raw observation).
    pub input_octaves: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: u64,
    /// Environment steps collected before the first gradient step of a phase.
    pub warmup_steps: usize,
    /// Environment steps collected per gradient step.
    pub collect_per_step: usize,
    pub phase1_steps: u64,
    pub phase2_max_steps: u64,
    pub validation_interval: u64,
    pub validation_networks: usize,
    pub log_interval: u64,
    pub model_seed: u64,
    pub train_seed: u64,
    pub validation_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            target_correct: 0.7,
            target_wrong: 0.3,
            mean_threshold_correct: 0.56,
            mean_threshold_wrong: 0.44,
            critical_weight: 10.0,
            huber_kappa: 1.0,
            loss_mode: LossMode::QuantileHuber,
            learning_rate: 1e-3,
            hidden_sizes: vec![128, 128],
            input_octaves: 10,
            batch_size: 64,
            buffer_capacity: 50_000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 20_000,
            warmup_steps: 1_000,
            collect_per_step: 1,
            phase1_steps: 50_000,
            phase2_max_steps: 20_000,
            validation_interval: 1_000,
            validation_networks: 100,
            log_interval: 100,
            model_seed: 0,
            train_seed: 1,
            validation_seed: 2,
        }
    }
}

impl TrainConfig {
    /// Schedule for the reduced-pool simulator. Collection is cheap next to a
    /// gradient step, so each step gathers eight transitions and exploration
    /// decays over the first 20k steps. Phase one is kept short so that the
    /// weighted phase does the fine-tuning.
    pub fn desk() -> Self {
        Self {
            buffer_capacity: 100_000,
            collect_per_step: 8,
            epsilon_decay_steps: 160_000,
            phase1_steps: 8_000,
            phase2_max_steps: 30_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |field, reason: String| Err(TrainError::Config { field, reason });
        let ordered = 0.0 < self.target_wrong
            && self.target_wrong < self.mean_threshold_wrong
            && self.mean_threshold_wrong < self.mean_threshold_correct
            && self.mean_threshold_correct < self.target_correct
            && self.target_correct < 1.0;
        if !ordered {
            return fail(
                "target_wrong",
                "need 0 < target_wrong < mean_threshold_wrong < mean_threshold_correct < target_correct < 1".into(),
            );
        }
        if self.critical_weight.is_nan() || self.critical_weight < 1.0 {
            return fail("critical_weight", format!("{} is below 1", self.critical_weight));
        }
        if self.huber_kappa.is_nan() || self.huber_kappa <= 0.0 {
            return fail("huber_kappa", format!("{} is not positive", self.huber_kappa));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return fail("learning_rate", format!("{} is not positive", self.learning_rate));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return fail("hidden_sizes", format!("{:?} must be non-empty and positive", self.hidden_sizes));
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive".into());
        }
        if self.buffer_capacity < self.batch_size {
            return fail("buffer_capacity", format!("{} is below batch_size", self.buffer_capacity));
        }
        for (field, eps) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&eps) {
                return fail(field, format!("{eps} is outside [0, 1]"));
            }
        }
        if self.warmup_steps == 0 {
            return fail("warmup_steps", "must be positive".into());
        }
        if self.collect_per_step == 0 {
            return fail("collect_per_step", "must be positive".into());
        }
        if self.validation_interval == 0 {
            return fail("validation_interval", "must be positive".into());
        }
        if self.validation_networks == 0 {
            return fail("validation_networks", "must be positive".into());
        }
        if self.log_interval == 0 {
            return fail("log_interval", "must be positive".into());
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![OBS_DIM];
        d.extend(&self.hidden_sizes);
        d.push(ACTION_COUNT * QUANTILES);
        d
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper { learning_rate: self.learning_rate, ..AdamHyper::default() }
    }

    pub fn epsilon_at(&self, collection_step: u64) -> f64 {
        if collection_step >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let frac = collection_step as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }

    pub fn target_for(&self, reward: i32) -> Result<f64, TrainError> {
        match reward {
            1 => Ok(self.target_correct),
            -1 => Ok(self.target_wrong),
            r => Err(TrainError::Reward(r)),
        }
    }
}

/// Quantile fraction of the `k`-th output, `k` in `0..7`.
pub fn tau(k: usize) -> f64 {
    (2 * k + 1) as f64 / (2 * QUANTILES) as f64
}

/// Per-element critical flags for the seven scores of one taken action.
pub fn classify_losses(scores: &[f64], reward: i8, cfg: &TrainConfig) -> [bool; QUANTILES] {
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let mut critical = [false; QUANTILES];
    for (flag, s) in critical.iter_mut().zip(scores) {
        let safe = if reward > 0 {
            *s >= cfg.target_correct || mean >= cfg.mean_threshold_correct
        } else {
            *s <= cfg.target_wrong || mean <= cfg.mean_threshold_wrong
        };
        *flag = !safe;
    }
    critical
}

fn huber(u: f64, kappa: f64) -> (f64, f64) {
    if u.abs() <= kappa {
        (0.5 * u * u, u)
    } else {
        (kappa * (u.abs() - 0.5 * kappa), kappa * u.signum())
    }
}

/// Asymmetric Huber loss of `score` against `target` at quantile `tau`.
pub fn quantile_huber_loss(score: f64, target: f64, tau: f64, kappa: f64) -> f64 {
    quantile_huber(score, target, tau, kappa).0
}

/// Loss and its derivative with respect to `score`.
fn quantile_huber(score: f64, target: f64, tau: f64, kappa: f64) -> (f64, f64) {
    let u = target - score;
    let w = (tau - if u < 0.0 { 1.0 } else { 0.0 }).abs();
    let (l, dl_du) = huber(u, kappa);
    (w * l, -w * dl_du)
}

fn element_loss(score: f64, target: f64, k: usize, cfg: &TrainConfig) -> (f64, f64) {
    match cfg.loss_mode {
        LossMode::QuantileHuber => quantile_huber(score, target, tau(k), cfg.huber_kappa),
        LossMode::Squared => ((score - target).powi(2), 2.0 * (score - target)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub phase: u8,
    pub mean_loss: f64,
    pub critical: usize,
    pub non_critical: usize,
}

/// Weighted loss over a batch of taken-action score rows (`batch x 7`).
/// Returns the total, the element counts, and the gradient of the total with
/// respect to every score.
pub fn batch_loss(
    scores: &[f64],
    rewards: &[i8],
    weight: f64,
    cfg: &TrainConfig,
) -> Result<(f64, LossReport, Vec<f64>), TrainError> {
    assert_eq!(scores.len(), rewards.len() * QUANTILES, "one 7-score row per reward");
    assert!(!rewards.is_empty(), "batch must be nonempty");
    let n = scores.len() as f64;
    let mut total = 0.0;
    let mut critical = 0;
    let mut grad = vec![0.0; scores.len()];
    for (s, reward) in rewards.iter().enumerate() {
        let row = &scores[s * QUANTILES..(s + 1) * QUANTILES];
        let target = cfg.target_for(*reward as i32)?;
        let flags = classify_losses(row, *reward, cfg);
        for k in 0..QUANTILES {
            let (l, dl) = element_loss(row[k], target, k, cfg);
            let w = if flags[k] {
                critical += 1;
                weight
            } else {
                1.0
            };
            total += w * l;
            grad[s * QUANTILES + k] = w * dl / n;
        }
    }
    let report = LossReport {
        step: 0,
        phase: 0,
        mean_loss: total / n,
        critical,
        non_critical: scores.len() - critical,
    };
    Ok((total / n, report, grad))
}

/// Fixed-capacity ring of samples with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    samples: Vec<ReplaySample>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self { samples: Vec::with_capacity(capacity.min(1 << 16)), capacity, next: 0 }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, sample: ReplaySample) {
        if self.samples.len() < self.capacity {
            self.samples.push(sample);
        } else {
            self.samples[self.next] = sample;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn samples(&self) -> &[ReplaySample] {
        &self.samples
    }

    /// `n` draws with replacement.
    pub fn sample<'a>(&'a self, rng: &mut impl Rng, n: usize) -> Vec<&'a ReplaySample> {
        (0..n).map(|_| &self.samples[rng.gen_range(0..self.samples.len())]).collect()
    }

    pub fn clear(&mut self) {
        self.samples.clear();
        self.next = 0;
    }
}

/// Something that picks an action for the current sub-step.
pub trait Policy: Sync {
    fn act(&self, state: &EpisodeState, obs: &Observation) -> ActionId;
}

impl Policy for QuantileModel {
    fn act(&self, _: &EpisodeState, obs: &Observation) -> ActionId {
        self.greedy(obs).expect("observation width matches the model")
    }
}

pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn act(&self, state: &EpisodeState, _: &Observation) -> ActionId {
        state.oracle_action().expect("live episode")
    }
}

/// Steps environments with an epsilon-greedy policy, resetting on a fresh
/// seed pair whenever an episode ends.
#[derive(Debug, Clone)]
pub struct Collector {
    sim: SimConfig,
    seed_base: u64,
    episodes: u64,
    state: EpisodeState,
    obs: Observation,
}

impl Collector {
    pub fn new(sim: SimConfig, seed_base: u64) -> Result<Self, TrainError> {
        let (d, f) = episode_seeds(seed_base, 0);
        let (state, obs) = EpisodeState::reset(d, f, &sim)?;
        Ok(Self { sim, seed_base, episodes: 1, state, obs })
    }

    pub fn episodes_started(&self) -> u64 {
        self.episodes
    }

    pub fn collect<P: Policy + ?Sized>(
        &mut self,
        policy: &P,
        epsilon: f64,
        n_steps: usize,
        buffer: &mut ReplayBuffer,
        rng: &mut impl Rng,
    ) -> Result<(), TrainError> {
        for _ in 0..n_steps {
            let action = if rng.gen_bool(epsilon) {
                ActionId(rng.gen_range(0..ACTION_COUNT as u16))
            } else {
                policy.act(&self.state, &self.obs)
            };
            let result = self.state.step(action)?;
            buffer.push(make_sample(self.obs, action, result.reward as i32, result.next_observation)?);
            if result.episode_done {
                let (d, f) = episode_seeds(self.seed_base, self.episodes);
                self.episodes += 1;
                (self.state, self.obs) = EpisodeState::reset(d, f, &self.sim)?;
            } else {
                self.obs = result.next_observation;
            }
        }
        Ok(())
    }
}

/// Aggregate greedy-evaluation metrics over a set of networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub networks: usize,
    pub steps: usize,
    pub correct_steps: usize,
    pub wrong_steps: usize,
    pub sub_action_accuracy: f64,
    pub fully_repaired: usize,
    pub fully_repaired_fraction: f64,
    pub assisted_episodes: usize,
    pub faults: usize,
    pub ops_per_network: f64,
    pub mean_wall_time_s: f64,
    pub p95_wall_time_s: f64,
    /// First seed pair of an episode that was not fully repaired.
    pub first_failure: Option<(u64, u64)>,
}

impl AccuracyReport {
    pub fn is_perfect(&self) -> bool {
        self.wrong_steps == 0 && self.fully_repaired == self.networks
    }
}

/// Runs one greedy episode per network (`episode_seeds(seed, i)` for
/// `i < n_networks`), fanned out over the rayon pool. Counts do not depend
/// on the number of workers.
pub fn accuracy<P: Policy + ?Sized>(
    policy: &P,
    sim: &SimConfig,
    n_networks: usize,
    seed: u64,
) -> Result<AccuracyReport, TrainError> {
    let runs: Vec<(EpisodeSummary, f64, (u64, u64))> = (0..n_networks as u64)
        .into_par_iter()
        .map(|i| {
            let (d, f) = episode_seeds(seed, i);
            let start = Instant::now();
            let summary = run_episode(d, f, sim, |s, o| policy.act(s, o), |_, _| {})?;
            Ok((summary, start.elapsed().as_secs_f64(), (d, f)))
        })
        .collect::<Result<_, EnvError>>()?;
    let mut report = AccuracyReport {
        networks: n_networks,
        steps: 0,
        correct_steps: 0,
        wrong_steps: 0,
        sub_action_accuracy: 1.0,
        fully_repaired: 0,
        fully_repaired_fraction: 1.0,
        assisted_episodes: 0,
        faults: 0,
        ops_per_network: 0.0,
        mean_wall_time_s: 0.0,
        p95_wall_time_s: 0.0,
        first_failure: None,
    };
    let mut times = Vec::with_capacity(n_networks);
    for (s, t, seeds) in &runs {
        report.steps += s.steps;
        report.correct_steps += s.positive;
        report.wrong_steps += s.negative;
        report.faults += s.faults;
        report.assisted_episodes += s.assisted as usize;
        if s.fully_repaired() {
            report.fully_repaired += 1;
        } else if report.first_failure.is_none() {
            report.first_failure = Some(*seeds);
        }
        times.push(*t);
    }
    if n_networks > 0 {
        report.sub_action_accuracy = report.correct_steps as f64 / report.steps.max(1) as f64;
        report.fully_repaired_fraction = report.fully_repaired as f64 / n_networks as f64;
        report.ops_per_network = report.steps as f64 / n_networks as f64;
        report.mean_wall_time_s = times.iter().sum::<f64>() / n_networks as f64;
        times.sort_by(f64::total_cmp);
        let idx = ((0.95 * n_networks as f64).ceil() as usize).clamp(1, n_networks) - 1;
        report.p95_wall_time_s = times[idx];
    }
    Ok(report)
}

/// Loads a checkpoint for evaluation, rejecting a foreign vocabulary.
pub fn load_for_evaluation(bytes: &[u8]) -> Result<Checkpoint, NeuralError> {
    let ckpt = Checkpoint::from_bytes(bytes)?;
    ckpt.meta.check_vocab(vocab_hash())?;
    Ok(ckpt)
}

/// One line of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub accuracy: Option<f64>,
    pub critical: usize,
    pub epsilon: f64,
    pub mean_loss: f64,
    pub non_critical: usize,
    pub phase: u8,
    pub schema: String,
    pub step: u64,
}

const PHASE1_STREAM: u64 = 0x7031_0000_0000_0001;
const PHASE2_STREAM: u64 = 0x7032_0000_0000_0002;

/// Training state for one phase.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub sim: SimConfig,
    pub model: QuantileModel,
    pub adam: AdamState,
    pub buffer: ReplayBuffer,
    pub history: Vec<LossReport>,
    collector: Collector,
    rng: ChaCha8Rng,
    phase: u8,
    step: u64,
    collection_steps: u64,
    validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub converged: bool,
    pub validation: Option<AccuracyReport>,
    pub steps: u64,
}

impl Trainer {
    fn with_model(
        cfg: TrainConfig,
        sim: SimConfig,
        model: QuantileModel,
        adam: AdamState,
        phase: u8,
        step: u64,
        collection_steps: u64,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        sim.validate().map_err(EnvError::from)?;
        let stream = if phase == 1 { PHASE1_STREAM } else { PHASE2_STREAM };
        let base = mix_seed(cfg.train_seed ^ stream);
        Ok(Self {
            collector: Collector::new(sim, base)?,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(base)),
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            history: Vec::new(),
            cfg,
            sim,
            model,
            adam,
            phase,
            step,
            collection_steps,
            validation_accuracy: None,
        })
    }

    /// Fresh phase-one trainer.
    pub fn new(cfg: TrainConfig, sim: SimConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = QuantileModel::init_encoded(cfg.model_seed, &cfg.dims(), cfg.input_octaves)?;
        let adam = AdamState::new(&model);
        Self::with_model(cfg, sim, model, adam, 1, 0, 0)
    }

    /// Phase-two trainer starting from a phase-one checkpoint. The replay
    /// buffer and collection streams start fresh, so the run depends only on
    /// the checkpoint and the configuration.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig, sim: SimConfig) -> Result<Self, TrainError> {
        if ckpt.meta.phase != 1 {
            return Err(TrainError::ResumePhase(ckpt.meta.phase));
        }
        ckpt.meta.check_vocab(vocab_hash())?;
        if ckpt.meta.dims != cfg.dims() || ckpt.meta.input_octaves != cfg.input_octaves {
            return Err(TrainError::Config {
                field: "hidden_sizes",
                reason: format!("checkpoint dims {:?} differ from {:?}", ckpt.meta.dims, cfg.dims()),
            });
        }
        Self::with_model(
            cfg,
            sim,
            ckpt.model.clone(),
            ckpt.adam.clone(),
            2,
            ckpt.meta.training_step,
            ckpt.meta.collection_steps,
        )
    }

    pub fn phase(&self) -> u8 {
        self.phase
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn collect(&mut self, n: usize) -> Result<(), TrainError> {
        for _ in 0..n {
            let eps = self.cfg.epsilon_at(self.collection_steps);
            self.collector.collect(&self.model, eps, 1, &mut self.buffer, &mut self.rng)?;
            self.collection_steps += 1;
        }
        Ok(())
    }

    /// One minibatch update with critical weight `weight`.
    pub fn gradient_step(&mut self, weight: f64) -> Result<LossReport, TrainError> {
        let batch = self.buffer.sample(&mut self.rng, self.cfg.batch_size);
        let mut inputs = Vec::with_capacity(batch.len() * OBS_DIM);
        let mut actions = Vec::with_capacity(batch.len());
        let mut rewards = Vec::with_capacity(batch.len());
        for s in &batch {
            inputs.extend_from_slice(&s.obs);
            actions.push(s.action);
            rewards.push(s.reward);
        }
        let trace = self.model.forward_actions(&inputs, &actions)?;
        let (_, mut report, grad) = batch_loss(trace.outputs(), &rewards, weight, &self.cfg)?;
        let grads = self.model.backward(&trace, &grad)?;
        let hyper = self.cfg.adam();
        self.model.adam_step(&grads, &mut self.adam, &hyper)?;
        self.step += 1;
        report.step = self.step;
        report.phase = self.phase;
        Ok(report)
    }

    pub fn validate_model(&self) -> Result<AccuracyReport, TrainError> {
        accuracy(&self.model, &self.sim, self.cfg.validation_networks, self.cfg.validation_seed)
    }

    /// Runs this trainer's phase to completion: a fixed number of uniform
    /// steps in phase one, critical-weighted steps until validation is
    /// perfect (or the budget runs out) in phase two.
    pub fn run(&mut self, sink: &mut dyn FnMut(&MetricsRecord)) -> Result<PhaseOutcome, TrainError> {
        let (budget, weight) = match self.phase {
            1 => (self.cfg.phase1_steps, 1.0),
            _ => (self.cfg.phase2_max_steps, self.cfg.critical_weight),
        };
        self.collect(self.cfg.warmup_steps)?;
        let mut window = (0.0, 0usize, 0usize, 0u64);
        let mut outcome = PhaseOutcome { converged: false, validation: None, steps: 0 };
        for i in 1..=budget {
            self.collect(self.cfg.collect_per_step)?;
            let report = self.gradient_step(weight)?;
            self.history.push(report);
            window.0 += report.mean_loss;
            window.1 += report.critical;
            window.2 += report.non_critical;
            window.3 += 1;
            outcome.steps = i;

            let validate = self.phase == 2 && i % self.cfg.validation_interval == 0;
            let mut probe = None;
            if validate {
                let v = self.validate_model()?;
                probe = Some(v.sub_action_accuracy);
                self.validation_accuracy = probe;
                outcome.converged = v.is_perfect();
                outcome.validation = Some(v);
            }
            if i % self.cfg.log_interval == 0 || validate || i == budget {
                sink(&MetricsRecord {
                    accuracy: probe,
                    critical: window.1,
                    epsilon: self.cfg.epsilon_at(self.collection_steps),
                    mean_loss: window.0 / window.3.max(1) as f64,
                    non_critical: window.2,
                    phase: self.phase,
                    schema: METRICS_SCHEMA.to_string(),
                    step: self.step,
                });
                window = (0.0, 0, 0, 0);
            }
            if outcome.converged {
                break;
            }
        }
        if self.phase == 1 {
            let v = self.validate_model()?;
            self.validation_accuracy = Some(v.sub_action_accuracy);
            outcome.converged = v.is_perfect();
            outcome.validation = Some(v);
        }
        Ok(outcome)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            meta: CheckpointMeta {
                actions: self.model.action_count(),
                adam: self.cfg.adam(),
                adam_step: self.adam.step,
                collection_steps: self.collection_steps,
                dims: self.model.dims(),
                input_octaves: self.model.octaves,
                phase: self.phase,
                quantiles: QUANTILES,
                schema: CHECKPOINT_SCHEMA.to_string(),
                seeds: SeedLineage {
                    model_seed: self.cfg.model_seed,
                    train_seed: self.cfg.train_seed,
                    validation_seed: self.cfg.validation_seed,
                },
                training_step: self.step,
                validation_accuracy: self.validation_accuracy,
                vocab_hash: vocab_hash().to_string(),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub converged: bool,
    pub phase1: Checkpoint,
    pub final_checkpoint: Checkpoint,
    pub history: Vec<LossReport>,
    pub validation: Option<AccuracyReport>,
    pub phase2_steps: u64,
}

impl TrainOutcome {
    /// Mean loss over the first and last `window` steps of phase two.
    pub fn phase2_loss_endpoints(&self, window: usize) -> Option<(f64, f64)> {
        let p2: Vec<f64> =
            self.history.iter().filter(|r| r.phase == 2).map(|r| r.mean_loss).collect();
        if p2.is_empty() {
            return None;
        }
        let w = window.clamp(1, p2.len());
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&p2[..w]), mean(&p2[p2.len() - w..])))
    }
}

/// Full two-phase training. Phase two always starts from the serialized
/// phase-one checkpoint, so resuming from that file reproduces this run.
pub fn train(
    cfg: &TrainConfig,
    sim: &SimConfig,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome, TrainError> {
    let mut p1 = Trainer::new(cfg.clone(), *sim)?;
    p1.run(sink)?;
    let phase1 = Checkpoint::from_bytes(&p1.checkpoint().to_bytes())?;
    let mut outcome = finish(&phase1, cfg, sim, sink)?;
    let mut history = std::mem::take(&mut p1.history);
    history.append(&mut outcome.history);
    outcome.history = history;
    Ok(outcome)
}

/// Phase two from a phase-one checkpoint.
pub fn finish(
    phase1: &Checkpoint,
    cfg: &TrainConfig,
    sim: &SimConfig,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome, TrainError> {
    let mut p2 = Trainer::resume(phase1, cfg.clone(), *sim)?;
    let result = p2.run(sink)?;
    Ok(TrainOutcome {
        converged: result.converged,
        phase1: phase1.clone(),
        final_checkpoint: p2.checkpoint(),
        history: std::mem::take(&mut p2.history),
        validation: result.validation,
        phase2_steps: result.steps,
    })
}
