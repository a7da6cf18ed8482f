use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use reft_sim::config::SimConfig;
use reft_sim::failure::{
    failure_script_csv, inject_failures, parse_failure_script, FailureEvent, FailureKind,
    ReliabilityParams,
};
use reft_sim::has::{compute_overhead, plan_csv, plan_snapshot, SnapshotRequest};
use reft_sim::recovery::{build_recovery_model, RecoveryTiming};
use reft_sim::simkernel::{run_simulation, trace_csv, verify_trace, RunEvent, RunParams, SimResult};

use crate::common::{build_layout, write_report, Layout};

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Directory the CSV reports are written to.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Also write the full per-node event trace (trace.csv; large).
    #[arg(long)]
    trace: bool,

    /// Skip the unprotected reference run.
    #[arg(long)]
    no_baseline: bool,
}

pub fn run(cfg: &SimConfig, seed: u64, args: &SimulateArgs) -> Result<()> {
    let layout = build_layout(cfg, None, None)?;
    let Layout { topology, schedules, groups, assignments, .. } = &layout;
    let spec = &topology.spec;
    let span = schedules[0].iteration_span;
    let iterations = cfg.run.iterations;

    // Every node pushes its own model shard plus its optimizer partition
    // through the copy engine each round.
    let mut requests: Vec<SnapshotRequest> = assignments
        .iter()
        .flatten()
        .map(|a| SnapshotRequest {
            node_id: a.node_id,
            bytes: a.local_len()
                + a.optimizer_range.as_ref().map(|r| r.end - r.start).unwrap_or(0),
        })
        .collect();
    requests.sort_by_key(|r| r.node_id);

    let script = load_failure_script(cfg, &layout, span, iterations, seed)?;

    let protection = cfg.to_protection();
    let m = spec.dp_size;
    protection
        .validate(m, spec.zero1_enabled)
        .context("protection config does not fit this cluster")?;
    let timing = RecoveryTiming {
        b_io: spec.d2h_bandwidth,
        internode_bw: spec.internode_bandwidth,
        nfs_bw: spec.nfs_bandwidth,
    };
    let recovery = build_recovery_model(groups, &protection, &timing)?;

    let has = cfg.to_has_params();
    let plans = plan_snapshot(&requests, schedules, topology, &has)?;
    let params = RunParams {
        has: has.clone(),
        snapshot_interval: cfg.run.snapshot_interval,
        nfs_every_rounds: cfg.store.nfs_every_rounds,
        nfs_write_s: cfg.store.nfs_write_s,
        recovery: Some(recovery.clone()),
    };

    log::info!(
        "simulating {} nodes × {} iterations (span {span:.3} s), {} snapshot plans",
        topology.nodes.len(),
        iterations,
        plans.len()
    );
    let main = run_simulation(topology, schedules, &plans, &script, iterations, &params)?;
    verify_trace(&main)?;

    // Per-iteration overhead only means something without failures in the
    // way; under a failure script the honest comparison is how far each
    // run got for the wall clock it spent.
    let mut overhead = None;
    let mut baseline_outcome = None;
    if !args.no_baseline {
        let baseline = run_simulation(topology, schedules, &[], &script, iterations, &params)?;
        baseline_outcome = Some((
            baseline.total_wall_s,
            baseline.iterations.last().map(|m| m.iteration).unwrap_or(0),
        ));
        if script.is_empty() {
            overhead = Some(compute_overhead(&main, &baseline)?);
        }
    }

    write_report(&args.out, "metrics.csv", &metrics_csv(&main, overhead.as_ref()))?;
    write_report(&args.out, "plan.csv", &plan_csv(&plans))?;
    write_report(&args.out, "events.csv", &events_csv(&main))?;
    if !script.is_empty() {
        write_report(&args.out, "failures.csv", &failure_script_csv(&script))?;
    }
    if args.trace {
        write_report(&args.out, "trace.csv", &trace_csv(&main))?;
    }

    print_summary(cfg, &layout, &main, overhead.as_ref(), baseline_outcome, &script);
    Ok(())
}

fn load_failure_script(
    cfg: &SimConfig,
    layout: &Layout,
    span: f64,
    iterations: u32,
    seed: u64,
) -> Result<Vec<FailureEvent>> {
    if let Some(path) = &cfg.failure.script {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading failure script {path}"))?;
        return Ok(parse_failure_script(&text)?);
    }
    let params = ReliabilityParams {
        lambda_hw: cfg.failure.lambda_hw,
        lambda_sw: cfg.failure.lambda_sw,
        c: cfg.failure.weibull_c,
    };
    if params.lambda_hw == 0.0 && params.lambda_sw == 0.0 {
        return Ok(Vec::new());
    }
    let horizon = span * iterations as f64;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let script = inject_failures(&layout.topology, &params, horizon, &mut rng)?;
    log::info!("sampled {} failure event(s) inside the {horizon:.1} s horizon", script.len());
    Ok(script)
}

fn metrics_csv(result: &SimResult, overhead: Option<&reft_sim::has::OverheadReport>) -> String {
    let mut out = String::from("# reft-sim v1\n");
    out.push_str("iteration,t_iter_s,o_inmem_s,l1_bytes,l2_bytes,l3_bytes,stall_s\n");
    for (i, m) in result.iterations.iter().enumerate() {
        let o = overhead.map(|r| r.per_iteration[i]).unwrap_or(0.0);
        let [l1, l2, l3] = m.bytes_snapshotted_by_layer;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.iteration, m.t_iter, o, l1, l2, l3, m.stalls
        ));
    }
    out
}

fn events_csv(result: &SimResult) -> String {
    let mut out = String::from(
        "kind,time_s,node,detail,round,iteration,in_memory,t_load_s,recompute_s,available_at\n",
    );
    for ev in &result.run_events {
        match ev {
            RunEvent::Failure { time, node_id, kind } => {
                let k = match kind {
                    FailureKind::Hardware => "HARDWARE",
                    FailureKind::Software => "SOFTWARE",
                };
                out.push_str(&format!("FAILURE,{time},{node_id},{k},,,,,,\n"));
            }
            RunEvent::Recovery { time, in_memory, t_load_s, recompute_s, resume_iteration } => {
                out.push_str(&format!(
                    "RECOVERY,{time},,,,{resume_iteration},{in_memory},{t_load_s},{recompute_s},\n"
                ));
            }
            RunEvent::RoundCommitted { time, round, iteration } => {
                out.push_str(&format!("ROUND_COMMITTED,{time},,,{round},{iteration},,,,\n"));
            }
            RunEvent::RoundSkipped { iteration } => {
                out.push_str(&format!("ROUND_SKIPPED,,,,,{iteration},,,,\n"));
            }
            RunEvent::NfsCheckpoint { round, iteration, available_at } => {
                out.push_str(&format!(
                    "NFS_CHECKPOINT,,,,{round},{iteration},,,,{available_at}\n"
                ));
            }
        }
    }
    out
}

fn print_summary(
    cfg: &SimConfig,
    layout: &Layout,
    main: &SimResult,
    overhead: Option<&reft_sim::has::OverheadReport>,
    baseline_outcome: Option<(f64, u32)>,
    script: &[FailureEvent],
) {
    let spec = &layout.topology.spec;
    let mut committed = 0u32;
    let mut skipped = 0u32;
    let mut failures = 0u32;
    let mut recoveries_mem = 0u32;
    let mut recoveries_nfs = 0u32;
    for ev in &main.run_events {
        match ev {
            RunEvent::RoundCommitted { .. } => committed += 1,
            RunEvent::RoundSkipped { .. } => skipped += 1,
            RunEvent::Failure { .. } => failures += 1,
            RunEvent::Recovery { in_memory, .. } => {
                if *in_memory {
                    recoveries_mem += 1
                } else {
                    recoveries_nfs += 1
                }
            }
            RunEvent::NfsCheckpoint { .. } => {}
        }
    }
    let mut by_layer = [0u64; 3];
    let mut stall_total = 0.0;
    for m in &main.iterations {
        for (acc, b) in by_layer.iter_mut().zip(m.bytes_snapshotted_by_layer) {
            *acc += b;
        }
        stall_total += m.stalls;
    }

    println!(
        "cluster: {} nodes (dp {} × pp {} × {} host-slots), iteration span {:.4} s",
        layout.topology.nodes.len(),
        spec.dp_size,
        spec.pp_size,
        spec.nodes_per_replica(),
        layout.schedules[0].iteration_span,
    );
    println!(
        "run: {} iterations in {:.4} s wall, snapshot round every {} iteration(s)",
        main.iterations.len(),
        main.total_wall_s,
        cfg.run.snapshot_interval,
    );
    println!(
        "rounds: {committed} committed, {skipped} skipped; failures {failures} \
         (recovered in-memory {recoveries_mem}, from archive/restart {recoveries_nfs})"
    );
    println!(
        "snapshot bytes: layer1 {} layer2 {} layer3 {}, barrier stall {:.4} s total",
        by_layer[0], by_layer[1], by_layer[2], stall_total
    );
    match overhead {
        Some(r) => println!(
            "overhead vs baseline: mean {:.6} s/iter, max {:.6} s/iter",
            r.mean, r.max
        ),
        None if script.is_empty() => println!("overhead vs baseline: skipped"),
        None => match baseline_outcome {
            Some((wall, last)) => println!(
                "with failures: protected reached iteration {} in {:.4} s; \
                 unprotected reached iteration {last} in {wall:.4} s",
                main.iterations.last().map(|m| m.iteration).unwrap_or(0),
                main.total_wall_s,
            ),
            None => println!("overhead vs baseline: skipped"),
        },
    }
}
