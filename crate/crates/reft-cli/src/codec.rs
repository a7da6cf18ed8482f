use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use reft_sim::config::SimConfig;
use reft_sim::protection::{protection_duties, ProtectionConfig};
use reft_sim::recovery::{populate_group_stores, recover_group, GroupTruth, ShardSource};
use reft_sim::store::{CompletedSet, NodeStore};
use reft_sim::topology::{assign_shards, ShardingGroup};

#[derive(Args, Debug)]
pub struct CodecArgs {
    /// Group size.
    #[arg(long, default_value_t = 8)]
    members: u32,

    /// Bytes per member shard.
    #[arg(long, default_value_t = 1 << 20)]
    shard_bytes: u64,

    /// Redundancy scheme to exercise.
    #[arg(long, value_enum, default_value_t = Scheme::Both)]
    scheme: Scheme,

    /// Member indices to erase (default: as many adjacent members as the
    /// scheme tolerates).
    #[arg(long, value_delimiter = ',')]
    erase: Vec<u32>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Scheme {
    /// Ring copy of the right neighbour's shard.
    Ring,
    /// XOR parity pieces spread over the group.
    Parity,
    /// Ring and parity composed.
    Both,
}

pub fn run(cfg: &SimConfig, seed: u64, args: &CodecArgs) -> Result<()> {
    let m = args.members;
    let config = match args.scheme {
        Scheme::Ring => ProtectionConfig { arc: true, aec: false, aor: false },
        Scheme::Parity => ProtectionConfig { arc: false, aec: true, aor: false },
        Scheme::Both => ProtectionConfig { arc: true, aec: true, aor: false },
    };
    config.validate(m, false).context("scheme does not fit this group size")?;

    let group = ShardingGroup {
        group_id: 0,
        pp_stage: 0,
        members: (0..m).collect(),
        total_bytes: m as u64 * args.shard_bytes,
    };
    let assignments = assign_shards(&group, false, 0)?;
    let duties = protection_duties(&config, &group, &assignments)?;

    let w = group.total_bytes;
    let redundancy: u64 = duties.iter().map(|d| d.arc_bytes + d.aec_parity_bytes).sum();
    println!(
        "scheme {:?}: {m} members × {} B shards ({w} B of state)",
        args.scheme, args.shard_bytes
    );
    println!(
        "per-node duty: own {} + ring {} + parity {} B; redundancy total {redundancy} B \
         ({:.4}× the state)",
        duties[0].own_bytes,
        duties[0].arc_bytes,
        duties[0].aec_parity_bytes,
        redundancy as f64 / w as f64,
    );

    let erased: Vec<usize> = if args.erase.is_empty() {
        (0..config.effective_tolerance(m) as usize).collect()
    } else {
        let mut v: Vec<usize> = args.erase.iter().map(|&i| i as usize).collect();
        v.sort_unstable();
        v.dedup();
        if let Some(&bad) = v.iter().find(|&&i| i >= m as usize) {
            bail!("--erase {bad} is outside the {m}-member group");
        }
        v
    };

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut stage_model = vec![0u8; w as usize];
    rng.fill(stage_model.as_mut_slice());
    let truth =
        GroupTruth { stage_model, stage_optimizer_stale: None, grad_steps: Vec::new(), lr: 0.0 };

    let started = Instant::now();
    let stores: Vec<NodeStore> = duties
        .iter()
        .map(|d| {
            let manifest = d.own_bytes + d.arc_bytes + d.aec_parity_bytes;
            NodeStore::new(d.node_id, (cfg.store.capacity_factor * manifest as f64).ceil() as u64)
        })
        .collect();
    populate_group_stores(
        &group,
        &config,
        &assignments,
        &truth,
        &stores.iter().collect::<Vec<_>>(),
        1,
    )?;
    let encode_s = started.elapsed().as_secs_f64();

    let completed: Vec<Option<std::sync::Arc<CompletedSet>>> = stores
        .iter()
        .enumerate()
        .map(|(i, s)| if erased.contains(&i) { None } else { s.completed() })
        .collect();
    let memories: Vec<Option<&CompletedSet>> = completed.iter().map(|c| c.as_deref()).collect();

    println!("erased members: {erased:?}");
    let started = Instant::now();
    let recovery = recover_group(&group, &config, &assignments, &memories, None, 0.0)
        .context("the erasure exceeds what this scheme can rebuild")?;
    let decode_s = started.elapsed().as_secs_f64();

    for &i in &erased {
        let shard = &recovery.model[i];
        let want = &truth.stage_model
            [assignments[i].local_range.start as usize..assignments[i].local_range.end as usize];
        if shard.data != want {
            bail!("member {i} rebuilt with wrong bytes");
        }
        let via = match shard.source {
            ShardSource::RingCopy => "ring copy",
            ShardSource::ParityDecode => "parity decode",
            other => return Err(anyhow::anyhow!("member {i} came from unexpected {other:?}")),
        };
        println!("member {i} rebuilt via {via}");
    }
    println!(
        "roundtrip OK: encode+store {encode_s:.4} s, rebuild {decode_s:.4} s \
         ({:.1} MB/s end-to-end)",
        w as f64 / (encode_s + decode_s) / 1e6
    );
    Ok(())
}
