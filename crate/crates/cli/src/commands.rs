use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::anyhow;
use netop_core::codec::{vocab_hash, ActionId, Vocabulary};
use netop_core::env::{episode_seeds, run_episode, EpisodeState};
use netop_core::netsim::{compose, generate_design, inject_faults, oracle_script, FaultKind, SimError};
use netop_core::neural::NeuralError;
use netop_core::trainer::{
    accuracy, finish, load_for_evaluation, AccuracyReport, MetricsRecord, TrainError, TrainOutcome,
    Trainer,
};
use netop_core::{Checkpoint, SimConfig};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{
    ConfigArgs, EvaluateArgs, Failure, GenerateArgs, InspectArgs, OracleCheckArgs, ReportArgs,
    TraceArgs, TrainArgs, EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_FAILURE, EXIT_NOT_CONVERGED, EXIT_OK,
};

type CmdResult = Result<u8, Failure>;

fn path_error(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_CONFIG, anyhow!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| path_error(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| path_error(path, e))
}

fn sim_failure(e: SimError) -> Failure {
    let code = if matches!(e, SimError::Config { .. }) { EXIT_CONFIG } else { EXIT_FAILURE };
    Failure::new(code, e.into())
}

fn train_failure(e: TrainError) -> Failure {
    let code = match e {
        TrainError::Config { .. } => EXIT_CONFIG,
        TrainError::Neural(_) | TrainError::ResumePhase(_) => EXIT_CHECKPOINT,
        _ => EXIT_FAILURE,
    };
    Failure::new(code, e.into())
}

fn checkpoint_failure(path: &Path, e: NeuralError) -> Failure {
    Failure::new(EXIT_CHECKPOINT, anyhow!("{}: {e}", path.display()))
}

fn read_checkpoint_bytes(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| path_error(path, e))
}

/// Prints the JSON report as the last stdout line and optionally saves it.
fn emit_report(report: &Value, path: Option<&Path>) -> Result<(), Failure> {
    println!("{report}");
    if let Some(p) = path {
        let mut text = serde_json::to_string_pretty(report).expect("report serializes");
        text.push('\n');
        write_file(p, text.as_bytes())?;
    }
    Ok(())
}

fn fault_name(kind: FaultKind) -> String {
    serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

pub fn generate(args: &GenerateArgs) -> CmdResult {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    fs::create_dir_all(&args.out).map_err(|e| path_error(&args.out, e))?;
    println!("{:>5}  {:<24} {:>7} {:>6} {:>6}  {:<8} faults", "index", "file", "devices", "items", "faults", "protocol");
    let mut histogram: BTreeMap<String, usize> =
        FaultKind::ALL.iter().map(|k| (fault_name(*k), 0)).collect();
    let mut networks = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let (design_seed, fault_seed) = episode_seeds(args.seed, i as u64);
        let design = generate_design(design_seed, &cfg.sim).map_err(sim_failure)?;
        let (state, faults) = inject_faults(&design, fault_seed, &cfg.sim).map_err(sim_failure)?;
        let name = format!("net-{}-{i}.json", args.seed);
        write_file(&args.out.join(&name), state.to_json().as_bytes())?;
        let kinds: Vec<String> = faults.iter().map(|f| fault_name(f.kind)).collect();
        for k in &kinds {
            *histogram.entry(k.clone()).or_default() += 1;
        }
        println!(
            "{i:>5}  {name:<24} {:>7} {:>6} {:>6}  {:<8} {}",
            design.devices.len(),
            state.design.len(),
            faults.len(),
            state.protocol.token(),
            kinds.join(",")
        );
        networks.push(json!({
            "design_seed": design_seed,
            "devices": design.devices.len(),
            "fault_kinds": kinds,
            "fault_seed": fault_seed,
            "faults": faults.len(),
            "file": name,
            "items": state.design.len(),
            "protocol": state.protocol.token(),
        }));
    }
    let report = json!({
        "count": args.count,
        "fault_kind_histogram": histogram,
        "networks": networks,
        "out": args.out,
        "schema": "netop-generate-1",
        "seed": args.seed,
    });
    emit_report(&report, args.report.as_deref())?;
    Ok(EXIT_OK)
}

/// Rotates every repair command to the next one; the negative control for
/// the oracle check.
fn corrupt(action: ActionId) -> ActionId {
    let first = ActionId::FIRST_COMMAND;
    if (first..ActionId::PARAM_NONE.0).contains(&action.0) {
        let span = ActionId::PARAM_NONE.0 - first;
        ActionId(first + (action.0 - first + 1) % span)
    } else {
        action
    }
}

/// Why the oracle failed on one network, if it did.
fn check_oracle_network(
    design_seed: u64,
    fault_seed: u64,
    sim: &SimConfig,
    corrupted: bool,
) -> Result<Option<String>, Failure> {
    let design = generate_design(design_seed, sim).map_err(sim_failure)?;
    let (mut state, _) = inject_faults(&design, fault_seed, sim).map_err(sim_failure)?;
    for (item, seq) in oracle_script(&state.clone()) {
        let instr = compose(&seq).map_err(sim_failure)?;
        if let Err(e) = state.apply_instruction(&item, &instr) {
            return Ok(Some(format!("script rejected at {}: {e}", item.key)));
        }
    }
    if !state.is_repaired() {
        return Ok(Some("script left the network unrepaired".into()));
    }

    let summary = run_episode(
        design_seed,
        fault_seed,
        sim,
        |s: &EpisodeState, _: &_| {
            let a = s.oracle_action().expect("live episode");
            if corrupted {
                corrupt(a)
            } else {
                a
            }
        },
        |_, _| {},
    )
    .map_err(|e| Failure::new(EXIT_FAILURE, e.into()))?;
    let expected = (summary.items + 2 * summary.faults) as i64;
    if !summary.fully_repaired() || summary.negative > 0 || summary.total_reward() != expected {
        return Ok(Some(format!(
            "episode reward {} (expected {expected}), {} negative, repaired {}, assisted {}",
            summary.total_reward(),
            summary.negative,
            summary.repaired,
            summary.assisted
        )));
    }
    Ok(None)
}

pub fn oracle_check(args: &OracleCheckArgs) -> CmdResult {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let count = args.count.unwrap_or(cfg.oracle_check.count);
    let seed = args.seed.unwrap_or(cfg.oracle_check.seed);
    let start = Instant::now();
    let mut failures = Vec::new();
    for i in 0..count as u64 {
        let (d, f) = episode_seeds(seed, i);
        if let Some(reason) = check_oracle_network(d, f, &cfg.sim, args.corrupt_action_table)? {
            eprintln!("oracle failure: network {i} design seed {d} fault seed {f}: {reason}");
            failures.push(json!({"design_seed": d, "fault_seed": f, "index": i, "reason": reason}));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    println!("networks checked  {count}");
    println!("repaired          {}", count - failures.len());
    println!("failures          {}", failures.len());
    println!("elapsed           {elapsed:.2}s");
    let passed = failures.is_empty();
    let report = json!({
        "count": count,
        "elapsed_s": elapsed,
        "failures": failures,
        "passed": passed,
        "schema": "netop-oracle-check-1",
        "seed": seed,
    });
    emit_report(&report, args.report.as_deref())?;
    Ok(if passed { EXIT_OK } else { EXIT_FAILURE })
}

fn metrics_path(cfg: &RunConfig, args: &TrainArgs, checkpoint: &Path) -> PathBuf {
    args.metrics
        .clone()
        .or_else(|| cfg.paths.metrics.clone())
        .unwrap_or_else(|| checkpoint.with_extension("metrics.jsonl"))
}

/// Path of the phase-boundary checkpoint written next to the final one.
pub fn phase1_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("phase1.ckpt")
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let metrics = metrics_path(&cfg, args, &out);
    if let Some(dir) = metrics.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| path_error(dir, e))?;
    }
    let mut log = fs::File::create(&metrics).map_err(|e| path_error(&metrics, e))?;
    let mut log_error = None;
    let quiet = args.quiet;
    let mut sink = |m: &MetricsRecord| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(log, "{line}") {
            log_error.get_or_insert(e);
        }
        if let (false, Some(acc)) = (quiet, m.accuracy) {
            eprintln!("step {:>6} phase {} loss {:.3e} accuracy {acc:.4}", m.step, m.phase, m.mean_loss);
        }
    };

    let start = Instant::now();
    let (phase1, mut history) = match &args.resume {
        Some(path) => {
            let bytes = read_checkpoint_bytes(path)?;
            let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| checkpoint_failure(path, e))?;
            (ckpt, Vec::new())
        }
        None => {
            let mut p1 = Trainer::new(cfg.train.clone(), cfg.sim).map_err(train_failure)?;
            p1.run(&mut sink).map_err(train_failure)?;
            let bytes = p1.checkpoint().to_bytes();
            write_file(&phase1_path(&out), &bytes)?;
            let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| checkpoint_failure(&out, e))?;
            (ckpt, std::mem::take(&mut p1.history))
        }
    };
    let mut outcome: TrainOutcome =
        finish(&phase1, &cfg.train, &cfg.sim, &mut sink).map_err(train_failure)?;
    history.append(&mut outcome.history);
    outcome.history = history;
    if let Some(e) = log_error {
        return Err(path_error(&metrics, e));
    }
    write_file(&out, &outcome.final_checkpoint.to_bytes())?;
    let elapsed = start.elapsed().as_secs_f64();

    let final_accuracy = outcome.validation.as_ref().map(|v| v.sub_action_accuracy);
    let endpoints = outcome.phase2_loss_endpoints(cfg.train.log_interval as usize);
    let reduction = endpoints.map(|(a, b)| if a > 0.0 { 1.0 - b / a } else { 0.0 });
    println!("converged             {}", outcome.converged);
    println!("phase 1 steps         {}", phase1.meta.training_step);
    println!("phase 2 steps         {}", outcome.phase2_steps);
    println!("phase 1 accuracy      {}", fmt_opt(phase1.meta.validation_accuracy));
    println!("final accuracy        {}", fmt_opt(final_accuracy));
    if let (Some((a, b)), Some(r)) = (endpoints, reduction) {
        println!("phase 2 loss          {a:.3e} -> {b:.3e} ({:.1}% lower)", 100.0 * r);
    }
    println!("elapsed               {elapsed:.1}s");
    println!("checkpoint            {}", out.display());
    let report = json!({
        "checkpoint": out,
        "converged": outcome.converged,
        "elapsed_s": elapsed,
        "final_accuracy": final_accuracy,
        "final_validation": outcome.validation,
        "metrics": metrics,
        "phase1_accuracy": phase1.meta.validation_accuracy,
        "phase1_steps": phase1.meta.training_step,
        "phase2_loss_end": endpoints.map(|e| e.1),
        "phase2_loss_reduction": reduction,
        "phase2_loss_start": endpoints.map(|e| e.0),
        "phase2_steps": outcome.phase2_steps,
        "schema": "netop-train-report-1",
    });
    emit_report(&report, args.report.as_deref())?;
    if !outcome.converged {
        eprintln!("training did not converge: final accuracy {}", fmt_opt(final_accuracy));
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(EXIT_OK)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
}

fn print_accuracy_table(r: &AccuracyReport) {
    println!("networks              {}", r.networks);
    println!("sub-action accuracy   {:.6} ({} / {})", r.sub_action_accuracy, r.correct_steps, r.steps);
    println!("fully repaired        {:.6} ({} / {})", r.fully_repaired_fraction, r.fully_repaired, r.networks);
    println!("assisted episodes     {}", r.assisted_episodes);
    println!("faults                {}", r.faults);
    println!("ops per network       {:.2}", r.ops_per_network);
    println!("mean wall time        {:.6}s", r.mean_wall_time_s);
    println!("p95 wall time         {:.6}s", r.p95_wall_time_s);
}

pub fn evaluate(args: &EvaluateArgs) -> CmdResult {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let networks = args.networks.unwrap_or(cfg.evaluation.networks);
    let seed = args.seed.unwrap_or(cfg.evaluation.seed);
    let workers = args.workers.or(cfg.evaluation.workers);
    if workers == Some(0) {
        return Err(Failure::new(EXIT_CONFIG, anyhow!("--workers must be positive")));
    }
    let bytes = read_checkpoint_bytes(&args.model)?;
    let ckpt = load_for_evaluation(&bytes).map_err(|e| checkpoint_failure(&args.model, e))?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Failure::new(EXIT_FAILURE, e.into()))?;
    let start = Instant::now();
    let report = pool
        .install(|| accuracy(&ckpt.model, &cfg.sim, networks, seed))
        .map_err(train_failure)?;
    let elapsed = start.elapsed().as_secs_f64();
    print_accuracy_table(&report);
    let json = json!({
        "accuracy": report,
        "elapsed_s": elapsed,
        "model": args.model,
        "perfect": report.is_perfect(),
        "schema": "netop-eval-report-1",
        "seed": seed,
        "training_step": ckpt.meta.training_step,
        "workers": pool.current_num_threads(),
    });
    emit_report(&json, args.report.as_deref())?;
    if args.require_perfect && !report.is_perfect() {
        return Ok(EXIT_FAILURE);
    }
    Ok(EXIT_OK)
}

pub fn inspect(args: &InspectArgs) -> CmdResult {
    let bytes = read_checkpoint_bytes(&args.model)?;
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| checkpoint_failure(&args.model, e))?;
    println!("{}", serde_json::to_string_pretty(&ckpt.meta).expect("metadata serializes"));
    Ok(EXIT_OK)
}

pub fn report(args: &ReportArgs) -> CmdResult {
    let text = fs::read_to_string(&args.metrics).map_err(|e| path_error(&args.metrics, e))?;
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: MetricsRecord = serde_json::from_str(line).map_err(|e| {
            Failure::new(EXIT_CONFIG, anyhow!("{} line {}: {e}", args.metrics.display(), n + 1))
        })?;
        records.push(r);
    }
    let mut phases = Vec::new();
    for phase in [1u8, 2] {
        let rs: Vec<&MetricsRecord> = records.iter().filter(|r| r.phase == phase).collect();
        let (Some(first), Some(last)) = (rs.first(), rs.last()) else { continue };
        let accuracy = rs.iter().rev().find_map(|r| r.accuracy);
        let reduction = if first.mean_loss > 0.0 { 1.0 - last.mean_loss / first.mean_loss } else { 0.0 };
        println!(
            "phase {phase}: steps {}..{}  loss {:.3e} -> {:.3e} ({:.1}% lower)  accuracy {}",
            first.step,
            last.step,
            first.mean_loss,
            last.mean_loss,
            100.0 * reduction,
            fmt_opt(accuracy)
        );
        phases.push(json!({
            "final_accuracy": accuracy,
            "first_loss": first.mean_loss,
            "first_step": first.step,
            "last_loss": last.mean_loss,
            "last_step": last.step,
            "loss_reduction": reduction,
            "phase": phase,
            "records": rs.len(),
        }));
    }
    let json = json!({"metrics": args.metrics, "phases": phases, "schema": "netop-report-1"});
    emit_report(&json, args.report.as_deref())?;
    Ok(EXIT_OK)
}

pub fn trace(args: &TraceArgs) -> CmdResult {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let model = match &args.model {
        Some(path) => {
            let bytes = read_checkpoint_bytes(path)?;
            Some(load_for_evaluation(&bytes).map_err(|e| checkpoint_failure(path, e))?.model)
        }
        None => None,
    };
    let (d, f) = episode_seeds(args.seed, args.index);
    let mut lines = String::new();
    let summary = run_episode(
        d,
        f,
        &cfg.sim,
        |s: &EpisodeState, obs: &_| match &model {
            Some(m) => m.greedy(obs).expect("observation width matches"),
            None => s.oracle_action().expect("live episode"),
        },
        |_, record| {
            lines.push_str(&serde_json::to_string(record).expect("trace serializes"));
            lines.push('\n');
        },
    )
    .map_err(|e| Failure::new(EXIT_FAILURE, e.into()))?;
    write_file(&args.out, lines.as_bytes())?;
    println!(
        "steps {}  positive {}  negative {}  repaired {}  assisted {}",
        summary.steps, summary.positive, summary.negative, summary.repaired, summary.assisted
    );
    Ok(EXIT_OK)
}

pub fn vocab() -> CmdResult {
    print!("{}", Vocabulary::get().to_json());
    eprintln!("sha256 {}", vocab_hash());
    Ok(EXIT_OK)
}

pub fn config(args: &ConfigArgs) -> CmdResult {
    let cfg = if args.desk { RunConfig::desk() } else { RunConfig::default() };
    print!("{}", cfg.to_json());
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corruption_only_touches_commands() {
        assert_eq!(corrupt(ActionId::NO_FAULT), ActionId::NO_FAULT);
        assert_eq!(corrupt(ActionId::PARAM_NONE), ActionId::PARAM_NONE);
        let commands: Vec<u16> = (ActionId::FIRST_COMMAND..ActionId::PARAM_NONE.0).collect();
        for c in &commands {
            let d = corrupt(ActionId(*c)).0;
            assert_ne!(d, *c);
            assert!(commands.contains(&d));
        }
    }

    #[test]
    fn phase1_path_sits_next_to_checkpoint() {
        assert_eq!(phase1_path(Path::new("out/model.ckpt")), PathBuf::from("out/model.phase1.ckpt"));
    }
}
