use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use reft_sim::config::SimConfig;
use reft_sim::pipeline::{generate_1f1b_schedule, StageSchedule};
use reft_sim::topology::{
    assign_shards, build_topology, ceil_split, form_sharding_groups, ShardAssignment,
    ShardingGroup, Topology,
};

pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<SimConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            SimConfig::parse(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => SimConfig::default(),
    };
    for s in sets {
        cfg.apply_set(s).with_context(|| format!("applying --set {s}"))?;
    }
    Ok(cfg)
}

/// Everything downstream commands need about the cluster layout.
pub struct Layout {
    pub topology: Topology,
    pub schedules: Vec<StageSchedule>,
    pub groups: Vec<ShardingGroup>,
    /// Shard table per group, in group order.
    pub assignments: Vec<Vec<ShardAssignment>>,
    /// Optimizer volume carried by each group.
    pub group_optimizer_bytes: Vec<u64>,
}

/// Build the topology, pipeline schedule, and sharding tables. Stage and
/// optimizer volumes may be overridden (the recovery drill substitutes
/// synthetic sizes).
pub fn build_layout(
    cfg: &SimConfig,
    stage_bytes: Option<Vec<u64>>,
    optimizer_bytes: Option<u64>,
) -> Result<Layout> {
    let spec = cfg.to_cluster_spec()?;
    let topology = build_topology(&spec)?;
    let schedules = generate_1f1b_schedule(&spec, cfg.model.fwd_fraction)?;
    let stage_bytes = match stage_bytes {
        Some(v) => v,
        None => cfg.stage_bytes_vec()?,
    };
    let opt_stage = optimizer_bytes.unwrap_or(cfg.model.optimizer_bytes);
    let groups = form_sharding_groups(&topology, &stage_bytes)?;

    // When a replica spans several hosts each stage becomes r groups; the
    // optimizer volume splits across those slots the same way the
    // parameters do.
    let r = spec.nodes_per_replica();
    let opt_slots = ceil_split(opt_stage, r);
    let mut assignments = Vec::with_capacity(groups.len());
    let mut group_opt = Vec::with_capacity(groups.len());
    for g in &groups {
        let slot = (g.group_id % r) as usize;
        let opt = if cfg.model.zero1 { opt_slots[slot].end - opt_slots[slot].start } else { 0 };
        assignments.push(assign_shards(g, cfg.model.zero1, opt)?);
        group_opt.push(opt);
    }
    Ok(Layout { topology, schedules, groups, assignments, group_optimizer_bytes: group_opt })
}

pub fn write_report(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Worker count for embarrassingly parallel sweeps; `REFT_SIM_THREADS`
/// caps it, default 1 (results are identical at any setting).
pub fn thread_count() -> usize {
    std::env::var("REFT_SIM_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Split `n` work items into at most `threads` contiguous chunks.
pub fn chunk_ranges(n: usize, threads: usize) -> Vec<std::ops::Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let threads = threads.min(n);
    let base = n / threads;
    let extra = n % threads;
    let mut out = Vec::with_capacity(threads);
    let mut start = 0;
    for i in 0..threads {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}
