//! Cluster layout: nodes, pipeline stages, sharding groups, shard assignment.
//!
//! A "node" here is the snapshotting unit: one host with `gpus_per_node`
//! devices attached. Tensor parallelism stays inside a node, pipeline and
//! data parallelism go across nodes. All the nodes that hold replicas of one
//! pipeline stage's parameters form a sharding group; within a group each
//! member is responsible for snapshotting one contiguous slice of the stage.

use crate::error::{Error, Result};

/// Static description of the training cluster and workload shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    /// Data-parallel width (m): replicas per pipeline stage.
    pub dp_size: u32,
    /// Pipeline depth (n): number of stages.
    pub pp_size: u32,
    /// Tensor-parallel width within a replica.
    pub tp_size: u32,
    /// Devices attached to one host.
    pub gpus_per_node: u32,
    /// Host-to-device / device-to-host copy bandwidth, bytes per second.
    pub d2h_bandwidth: f64,
    /// Bandwidth of the link between nodes, bytes per second.
    pub internode_bandwidth: f64,
    /// Bandwidth to the shared filesystem, bytes per second.
    pub nfs_bandwidth: f64,
    /// Forward+backward compute seconds for one microbatch, per stage
    /// (length `pp_size`).
    pub microbatch_compute_time: Vec<f64>,
    /// Microbatches per iteration.
    pub num_microbatches: u32,
    /// Whether optimizer states are sharded across data-parallel peers.
    pub zero1_enabled: bool,
}

impl ClusterSpec {
    /// Number of hosts implied by the parallelism shape.
    pub fn node_count(&self) -> u64 {
        let gpus = self.dp_size as u64 * self.pp_size as u64 * self.tp_size as u64;
        gpus / self.gpus_per_node as u64
    }

    /// Hosts holding one (stage, DP-rank) replica.
    pub fn nodes_per_replica(&self) -> u32 {
        (self.tp_size / self.gpus_per_node).max(1)
    }

    /// Check structural invariants. Call before building anything on top.
    pub fn validate(&self) -> Result<()> {
        if self.dp_size == 0 || self.pp_size == 0 || self.tp_size == 0 {
            return Err(Error::InvalidSpec("dp/pp/tp sizes must be >= 1".into()));
        }
        if self.gpus_per_node == 0 {
            return Err(Error::InvalidSpec("gpus_per_node must be >= 1".into()));
        }
        let total_gpus = self.dp_size as u64 * self.pp_size as u64 * self.tp_size as u64;
        if total_gpus % self.gpus_per_node as u64 != 0 {
            return Err(Error::InvalidSpec(format!(
                "{} GPUs do not fill a whole number of {}-GPU nodes",
                total_gpus, self.gpus_per_node
            )));
        }
        // A node must never straddle a DP or PP boundary: it snapshots one
        // replica's parameters as a single unit.
        if self.tp_size % self.gpus_per_node != 0 && self.gpus_per_node % self.tp_size != 0 {
            return Err(Error::InvalidSpec(format!(
                "tp_size {} and gpus_per_node {} do not tile",
                self.tp_size, self.gpus_per_node
            )));
        }
        if self.gpus_per_node > self.tp_size && self.gpus_per_node != self.tp_size {
            return Err(Error::InvalidSpec(format!(
                "gpus_per_node {} exceeds tp_size {}; a node would span DP/PP replicas",
                self.gpus_per_node, self.tp_size
            )));
        }
        for bw in [self.d2h_bandwidth, self.internode_bandwidth, self.nfs_bandwidth] {
            if !(bw > 0.0) || !bw.is_finite() {
                return Err(Error::InvalidSpec("bandwidths must be finite and > 0".into()));
            }
        }
        if self.microbatch_compute_time.len() != self.pp_size as usize {
            return Err(Error::InvalidSpec(format!(
                "microbatch_compute_time has {} entries, expected pp_size = {}",
                self.microbatch_compute_time.len(),
                self.pp_size
            )));
        }
        if self.microbatch_compute_time.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return Err(Error::InvalidSpec("compute times must be finite and > 0".into()));
        }
        if self.num_microbatches == 0 {
            return Err(Error::InvalidSpec("num_microbatches must be >= 1".into()));
        }
        Ok(())
    }
}

/// One host and its place in the parallelism grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node {
    pub node_id: u32,
    pub pp_stage: u32,
    pub dp_rank: u32,
    /// Which slice of the replica's TP width this host carries (0 unless a
    /// replica spans several hosts).
    pub replica_slot: u32,
    /// First TP rank hosted here; the node holds `gpus_per_node` consecutive
    /// ranks starting at this one.
    pub tp_rank_base: u32,
}

/// Materialized cluster layout.
#[derive(Debug, Clone)]
pub struct Topology {
    pub spec: ClusterSpec,
    pub nodes: Vec<Node>,
}

impl Topology {
    pub fn node(&self, node_id: u32) -> Option<&Node> {
        self.nodes.get(node_id as usize)
    }

    /// All node ids at a pipeline stage, ordered by (dp_rank, replica_slot).
    pub fn nodes_at_stage(&self, stage: u32) -> Vec<u32> {
        self.nodes
            .iter()
            .filter(|n| n.pp_stage == stage)
            .map(|n| n.node_id)
            .collect()
    }

    /// Stable fingerprint of the cluster shape; a checkpoint written under
    /// one layout must not be restored into another.
    pub fn digest(&self) -> u64 {
        let s = &self.spec;
        let text = format!(
            "dp{}pp{}tp{}g{}n{}",
            s.dp_size,
            s.pp_size,
            s.tp_size,
            s.gpus_per_node,
            self.nodes.len()
        );
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x1_0000_0000_01b3);
        }
        h
    }
}

/// Nodes that hold redundant copies of one stage slice and shard its
/// snapshot among themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardingGroup {
    pub group_id: u32,
    pub pp_stage: u32,
    /// Member node ids ordered by DP rank; member index == shard index.
    pub members: Vec<u32>,
    /// Parameter bytes replicated across the members (W_n).
    pub total_bytes: u64,
}

/// One member's slice of its group's parameter space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardAssignment {
    pub node_id: u32,
    pub group_id: u32,
    /// Model-parameter byte range this node snapshots.
    pub local_range: std::ops::Range<u64>,
    /// Optimizer-state byte range (ZeRO-1 only). Unlike `local_range`, these
    /// bytes exist nowhere else in the group — that is what host-side
    /// optimizer recomputation protects.
    pub optimizer_range: Option<std::ops::Range<u64>>,
}

impl ShardAssignment {
    pub fn local_len(&self) -> u64 {
        self.local_range.end - self.local_range.start
    }
}

/// Split `[0, total)` into `parts` contiguous ranges of `ceil(total/parts)`
/// bytes, the last one truncated. Trailing ranges may be empty.
pub fn ceil_split(total: u64, parts: u32) -> Vec<std::ops::Range<u64>> {
    assert!(parts > 0, "ceil_split needs at least one part");
    let parts = parts as u64;
    let chunk = total.div_ceil(parts);
    (0..parts)
        .map(|i| {
            let start = (i * chunk).min(total);
            let end = ((i + 1) * chunk).min(total);
            start..end
        })
        .collect()
}

/// Lay out nodes row-major: pipeline stage outermost, DP rank inner,
/// replica slot innermost.
pub fn build_topology(spec: &ClusterSpec) -> Result<Topology> {
    spec.validate()?;
    let r = spec.nodes_per_replica();
    let mut nodes = Vec::with_capacity(spec.node_count() as usize);
    let mut id = 0u32;
    for stage in 0..spec.pp_size {
        for dp in 0..spec.dp_size {
            for slot in 0..r {
                nodes.push(Node {
                    node_id: id,
                    pp_stage: stage,
                    dp_rank: dp,
                    replica_slot: slot,
                    tp_rank_base: slot * spec.gpus_per_node,
                });
                id += 1;
            }
        }
    }
    Ok(Topology { spec: spec.clone(), nodes })
}

/// Group DP peers per stage. `per_stage_bytes[p]` is the parameter volume of
/// stage `p`; when a replica spans several hosts the stage volume is split
/// across one group per host slot.
pub fn form_sharding_groups(
    topology: &Topology,
    per_stage_bytes: &[u64],
) -> Result<Vec<ShardingGroup>> {
    let spec = &topology.spec;
    if per_stage_bytes.len() != spec.pp_size as usize {
        return Err(Error::InvalidSpec(format!(
            "per_stage_bytes has {} entries, expected {}",
            per_stage_bytes.len(),
            spec.pp_size
        )));
    }
    if per_stage_bytes.iter().any(|b| *b == 0) {
        return Err(Error::InvalidSpec("per_stage_bytes entries must be > 0".into()));
    }
    let r = spec.nodes_per_replica();
    let mut groups = Vec::with_capacity((spec.pp_size * r) as usize);
    for stage in 0..spec.pp_size {
        let slot_ranges = ceil_split(per_stage_bytes[stage as usize], r);
        for slot in 0..r {
            let members: Vec<u32> = (0..spec.dp_size)
                .map(|dp| (stage * spec.dp_size + dp) * r + slot)
                .collect();
            groups.push(ShardingGroup {
                group_id: stage * r + slot,
                pp_stage: stage,
                members,
                total_bytes: slot_ranges[slot as usize].end - slot_ranges[slot as usize].start,
            });
        }
    }
    Ok(groups)
}

/// Slice a group's parameter space across its members with the ceiling rule.
///
/// `optimizer_stage_bytes` is the optimizer volume belonging to this group's
/// stage; under ZeRO-1 it is split the same way, giving each node
/// W_optimizer/(m·n) when stages are even.
pub fn assign_shards(
    group: &ShardingGroup,
    zero1: bool,
    optimizer_stage_bytes: u64,
) -> Result<Vec<ShardAssignment>> {
    if group.members.is_empty() {
        return Err(Error::InvalidSpec(format!("sharding group {} has no members", group.group_id)));
    }
    let m = group.members.len() as u32;
    let model_ranges = ceil_split(group.total_bytes, m);
    let opt_ranges = if zero1 { Some(ceil_split(optimizer_stage_bytes, m)) } else { None };
    Ok(group
        .members
        .iter()
        .enumerate()
        .map(|(i, &node_id)| ShardAssignment {
            node_id,
            group_id: group.group_id,
            local_range: model_ranges[i].clone(),
            optimizer_range: opt_ranges.as_ref().map(|r| r[i].clone()),
        })
        .collect())
}
