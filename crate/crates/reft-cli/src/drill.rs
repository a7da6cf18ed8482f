use std::collections::HashSet;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use reft_sim::config::SimConfig;
use reft_sim::protection::{protection_duties, ProtectionConfig, ShardRole};
use reft_sim::recovery::{
    assemble_stage, build_recovery_model, populate_group_stores, recover_or_fallback,
    GroupRecovery, GroupTruth, RecoveryTiming, ShardSource,
};
use reft_sim::store::{write_nfs_checkpoint, CompletedSet, NodeStore, ShardKey};
use reft_sim::topology::{ShardAssignment, ShardingGroup};

use crate::common::build_layout;

#[derive(Args, Debug)]
pub struct DrillArgs {
    /// Hardware losses to inflict in every sharding group.
    #[arg(long, default_value_t = 1)]
    kill: u32,

    /// Exact node ids to lose instead (comma separated; overrides --kill).
    #[arg(long, value_delimiter = ',')]
    nodes: Vec<u32>,

    /// Synthetic parameter volume per pipeline stage for the drill payload.
    #[arg(long, default_value_t = 1 << 20)]
    stage_bytes: u64,

    /// Synthetic optimizer volume per stage (rounded up so every shard
    /// stays word-aligned).
    #[arg(long, default_value_t = 1 << 21)]
    optimizer_bytes: u64,

    /// Write an archival checkpoint first and fall back to it when the
    /// in-memory codecs cannot rebuild a group.
    #[arg(long)]
    archive: Option<PathBuf>,

    /// Forbid surviving replicas from donating model state.
    #[arg(long)]
    no_live_fallback: bool,
}

pub fn run(cfg: &SimConfig, seed: u64, args: &DrillArgs) -> Result<()> {
    let spec = cfg.to_cluster_spec()?;
    let m = spec.dp_size;
    let protection = cfg.to_protection();
    protection
        .validate(m, spec.zero1_enabled)
        .context("protection config does not fit this cluster")?;

    // Optimizer shards flow through 4-byte word updates, so size the
    // synthetic volume to shard evenly.
    let align = 4 * m as u64 * spec.nodes_per_replica() as u64;
    let opt_bytes = if cfg.model.zero1 { args.optimizer_bytes.div_ceil(align) * align } else { 0 };
    if cfg.model.zero1 && opt_bytes != args.optimizer_bytes {
        log::info!("rounded optimizer volume {} up to {opt_bytes}", args.optimizer_bytes);
    }
    let stage_bytes = vec![args.stage_bytes; spec.pp_size as usize];
    let layout = build_layout(cfg, Some(stage_bytes), Some(opt_bytes))?;

    if !args.nodes.is_empty() {
        let known: HashSet<u32> = layout.topology.nodes.iter().map(|n| n.node_id).collect();
        for id in &args.nodes {
            if !known.contains(id) {
                bail!("--nodes {id} is not in this {}-node cluster", known.len());
            }
        }
    } else if args.kill as usize > m as usize {
        bail!("--kill {} exceeds the group size {m}", args.kill);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let digest = layout.topology.digest();

    // Phase 1: lay the snapshot round into every host buffer and, when
    // asked, onto the archive.
    let mut truths = Vec::with_capacity(layout.groups.len());
    let mut stores_by_group = Vec::with_capacity(layout.groups.len());
    let mut archive_rows: Vec<(ShardKey, u64, Vec<u8>)> = Vec::new();
    for (gi, group) in layout.groups.iter().enumerate() {
        let assignments = &layout.assignments[gi];
        let truth = synth_truth(cfg, group, layout.group_optimizer_bytes[gi], &mut rng)?;
        let stores = build_stores(cfg, group, assignments, &truth, &protection)?;
        populate_group_stores(
            group,
            &protection,
            assignments,
            &truth,
            &stores.iter().collect::<Vec<_>>(),
            1,
        )?;
        if args.archive.is_some() {
            append_archive_rows(group, assignments, &truth, &mut archive_rows)?;
        }
        truths.push(truth);
        stores_by_group.push(stores);
    }
    if let Some(path) = &args.archive {
        let refs: Vec<(ShardKey, u64, &[u8])> =
            archive_rows.iter().map(|(k, it, d)| (*k, *it, d.as_slice())).collect();
        let bytes = write_nfs_checkpoint(path, digest, &refs)?;
        log::info!("archived {bytes} bytes to {}", path.display());
    }

    // Phase 2: lose nodes and rebuild.
    let mut failures = 0u32;
    for (gi, group) in layout.groups.iter().enumerate() {
        let assignments = &layout.assignments[gi];
        let truth = &truths[gi];
        let stores = &stores_by_group[gi];

        let lost = choose_losses(group, args, &mut rng);
        let completed: Vec<Option<std::sync::Arc<CompletedSet>>> = stores
            .iter()
            .enumerate()
            .map(|(i, s)| if lost.contains(&i) { None } else { s.completed() })
            .collect();
        let memories: Vec<Option<&CompletedSet>> =
            completed.iter().map(|c| c.as_deref()).collect();
        let any_alive = (0..group.members.len()).any(|i| !lost.contains(&i));
        let live = (!args.no_live_fallback && any_alive).then(|| truth.stage_model.as_slice());

        let outcome = recover_or_fallback(
            group,
            &protection,
            assignments,
            &memories,
            live,
            cfg.model.learning_rate as f32,
            args.archive.as_deref(),
            Some(digest),
        );
        match outcome {
            Ok((recovery, from_archive)) => {
                let tag = if from_archive { " [archive fallback]" } else { "" };
                match verify_group(group, assignments, truth, &recovery)? {
                    None => println!(
                        "group {} (stage {}, {} members, lost {}): {}{tag} .. OK",
                        group.group_id,
                        group.pp_stage,
                        group.members.len(),
                        lost.len(),
                        describe_sources(&recovery),
                    ),
                    Some(why) => {
                        failures += 1;
                        println!(
                            "group {} (stage {}, lost {}): MISMATCH {why}",
                            group.group_id,
                            group.pp_stage,
                            lost.len()
                        );
                    }
                }
            }
            Err(e) => {
                failures += 1;
                println!(
                    "group {} (stage {}, lost {}): FAILED {e}",
                    group.group_id,
                    group.pp_stage,
                    lost.len()
                );
            }
        }
    }

    print_timing_estimate(cfg, &protection)?;
    if failures > 0 {
        bail!("{failures} group(s) did not recover");
    }
    println!("drill: all {} groups recovered bitwise", layout.groups.len());
    Ok(())
}

fn synth_truth(
    cfg: &SimConfig,
    group: &ShardingGroup,
    opt_bytes: u64,
    rng: &mut ChaCha12Rng,
) -> Result<GroupTruth> {
    let mut stage_model = vec![0u8; group.total_bytes as usize];
    rng.fill(stage_model.as_mut_slice());
    let (stale, grads) = if cfg.model.zero1 {
        let stale = random_f32_block(opt_bytes as usize, rng);
        let grads = (0..cfg.protection.grad_history)
            .map(|_| random_f32_block(opt_bytes as usize, rng))
            .collect();
        (Some(stale), grads)
    } else {
        (None, Vec::new())
    };
    Ok(GroupTruth {
        stage_model,
        stage_optimizer_stale: stale,
        grad_steps: grads,
        lr: cfg.model.learning_rate as f32,
    })
}

fn random_f32_block(bytes: usize, rng: &mut ChaCha12Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes);
    for _ in 0..bytes / 4 {
        out.extend_from_slice(&rng.gen::<f32>().to_le_bytes());
    }
    out
}

/// Size each store exactly the way the runtime would: the round's manifest
/// volume times the configured headroom factor.
fn build_stores(
    cfg: &SimConfig,
    group: &ShardingGroup,
    assignments: &[ShardAssignment],
    truth: &GroupTruth,
    protection: &ProtectionConfig,
) -> Result<Vec<NodeStore>> {
    let duties = protection_duties(protection, group, assignments)?;
    let extra_grad_steps = truth.grad_steps.len().saturating_sub(1) as u64;
    Ok(duties
        .iter()
        .zip(assignments)
        .map(|(duty, a)| {
            let own_opt = a.optimizer_range.as_ref().map(|r| r.end - r.start).unwrap_or(0);
            let manifest =
                duty.total_bytes() + own_opt + extra_grad_steps * duty.aor_gradient_bytes;
            let capacity = (cfg.store.capacity_factor * manifest as f64).ceil() as u64;
            NodeStore::new(duty.node_id, capacity)
        })
        .collect())
}

fn choose_losses(group: &ShardingGroup, args: &DrillArgs, rng: &mut ChaCha12Rng) -> HashSet<usize> {
    if !args.nodes.is_empty() {
        return group
            .members
            .iter()
            .enumerate()
            .filter(|(_, id)| args.nodes.contains(id))
            .map(|(i, _)| i)
            .collect();
    }
    rand::seq::index::sample(rng, group.members.len(), args.kill as usize)
        .into_iter()
        .collect()
}

fn append_archive_rows(
    group: &ShardingGroup,
    assignments: &[ShardAssignment],
    truth: &GroupTruth,
    rows: &mut Vec<(ShardKey, u64, Vec<u8>)>,
) -> Result<()> {
    let current = truth.current_optimizer()?;
    for (i, a) in assignments.iter().enumerate() {
        let r = &a.local_range;
        rows.push((
            ShardKey {
                group_id: group.group_id,
                source_node: group.members[i],
                role: ShardRole::Model,
                index: 0,
            },
            1,
            truth.stage_model[r.start as usize..r.end as usize].to_vec(),
        ));
        if let (Some(opt), Some(block)) = (&a.optimizer_range, &current) {
            rows.push((
                ShardKey {
                    group_id: group.group_id,
                    source_node: group.members[i],
                    role: ShardRole::Optimizer,
                    index: 0,
                },
                1,
                block[opt.start as usize..opt.end as usize].to_vec(),
            ));
        }
    }
    Ok(())
}

/// `None` when every byte matches; otherwise what differed.
fn verify_group(
    group: &ShardingGroup,
    assignments: &[ShardAssignment],
    truth: &GroupTruth,
    recovery: &GroupRecovery,
) -> Result<Option<String>> {
    let refs: Vec<&[u8]> = recovery.model.iter().map(|s| s.data.as_slice()).collect();
    let stage = assemble_stage(assignments, &refs)?;
    if stage != truth.stage_model {
        return Ok(Some(format!("stage {} model bytes differ", group.pp_stage)));
    }
    let current = truth.current_optimizer()?;
    for (i, a) in assignments.iter().enumerate() {
        let Some(r) = &a.optimizer_range else { continue };
        let Some(block) = &current else {
            return Ok(Some("optimizer expected but no truth block".into()));
        };
        match &recovery.optimizer[i] {
            Some(shard) if shard.data == block[r.start as usize..r.end as usize] => {}
            Some(_) => return Ok(Some(format!("optimizer shard {i} bytes differ"))),
            None => return Ok(Some(format!("optimizer shard {i} missing"))),
        }
    }
    Ok(None)
}

fn describe_sources(recovery: &GroupRecovery) -> String {
    let name = |s: ShardSource| match s {
        ShardSource::OwnMemory => "own",
        ShardSource::RingCopy => "ring",
        ShardSource::ParityDecode => "parity",
        ShardSource::LiveReplica => "live",
        ShardSource::OptimizerReplay => "replay",
        ShardSource::Archive => "archive",
    };
    let tally = |names: Vec<&'static str>| -> String {
        let mut counts: Vec<(&str, u32)> = Vec::new();
        for n in names {
            match counts.iter_mut().find(|(k, _)| *k == n) {
                Some((_, c)) => *c += 1,
                None => counts.push((n, 1)),
            }
        }
        counts.iter().map(|(k, c)| format!("{k} {c}")).collect::<Vec<_>>().join(", ")
    };
    let model = tally(recovery.model.iter().map(|s| name(s.source)).collect());
    let opt_names: Vec<&str> =
        recovery.optimizer.iter().flatten().map(|s| name(s.source)).collect();
    if opt_names.is_empty() {
        format!("model[{model}]")
    } else {
        format!("model[{model}] opt[{}]", tally(opt_names))
    }
}

/// What the same losses would cost on the configured (not synthetic)
/// volumes.
fn print_timing_estimate(cfg: &SimConfig, protection: &ProtectionConfig) -> Result<()> {
    let layout = build_layout(cfg, None, None)?;
    let spec = &layout.topology.spec;
    let timing = RecoveryTiming {
        b_io: spec.d2h_bandwidth,
        internode_bw: spec.internode_bandwidth,
        nfs_bw: spec.nfs_bandwidth,
    };
    let model = build_recovery_model(&layout.groups, protection, &timing)?;
    println!(
        "estimated restore at configured volumes: {:.3} s from peer memory, {:.3} s from archive \
         (tolerates {} simultaneous loss(es) per group)",
        model.inmem_load_s,
        model.nfs_load_s,
        model.per_group_tolerance.iter().min().copied().unwrap_or(0),
    );
    Ok(())
}
