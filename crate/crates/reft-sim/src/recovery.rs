//! Rebuilding lost state from peer memory, and the fallback to the
//! archival checkpoint when the loss exceeds what the group can repair.
//!
//! Recovery is a fixpoint: every pass first claims any shard whose ring
//! copy sits in a surviving member's memory, then parity-decodes shards
//! whose remaining piece equations are fully known. Each recovered shard
//! can unlock further decodes (a ring-recovered shard is a contributor to
//! other members' parity words), so passes repeat until nothing changes.
//! Model shards have one extra escape hatch: data-parallel peers carry the
//! same weights, so at an iteration boundary a live replica can donate the
//! missing slice. Optimizer shards (stage-1 sharding) have no live twin —
//! they come back only via the replayed ring replica or the archive.

use std::path::Path;

use crate::error::{Error, Result};
use crate::protection::{
    aor_reconstruct, arc_holder_idx, AecCodec, ProtectionConfig, ShardRole,
};
use crate::simkernel::RecoveryModel;
use crate::store::{CompletedSet, ManifestEntry, NodeStore, ShardKey};
use crate::topology::{ShardAssignment, ShardingGroup};

/// How a shard's bytes were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardSource {
    OwnMemory,
    RingCopy,
    ParityDecode,
    LiveReplica,
    OptimizerReplay,
    Archive,
}

#[derive(Debug, Clone)]
pub struct RecoveredShard {
    pub data: Vec<u8>,
    pub source: ShardSource,
}

/// Every member's shards after recovery, in member order.
#[derive(Debug, Clone)]
pub struct GroupRecovery {
    pub model: Vec<RecoveredShard>,
    /// `None` for members without an optimizer partition.
    pub optimizer: Vec<Option<RecoveredShard>>,
}

fn model_key(group: &ShardingGroup, member: usize) -> ShardKey {
    ShardKey {
        group_id: group.group_id,
        source_node: group.members[member],
        role: ShardRole::Model,
        index: 0,
    }
}

fn parity_key(group: &ShardingGroup, member: usize) -> ShardKey {
    ShardKey {
        group_id: group.group_id,
        source_node: group.members[member],
        role: ShardRole::Parity,
        index: 0,
    }
}

fn optimizer_key(group: &ShardingGroup, member: usize) -> ShardKey {
    ShardKey {
        group_id: group.group_id,
        source_node: group.members[member],
        role: ShardRole::Optimizer,
        index: 0,
    }
}

fn check_group_inputs(
    group: &ShardingGroup,
    assignments: &[ShardAssignment],
    memories_len: usize,
) -> Result<()> {
    let m = group.members.len();
    if assignments.len() != m || memories_len != m {
        return Err(Error::Recovery(format!(
            "group {}: {} members, {} assignments, {} memories",
            group.group_id,
            m,
            assignments.len(),
            memories_len
        )));
    }
    for (i, a) in assignments.iter().enumerate() {
        if a.node_id != group.members[i] {
            return Err(Error::Recovery(format!(
                "group {}: assignment {} is for node {}, expected member {}",
                group.group_id, i, a.node_id, group.members[i]
            )));
        }
    }
    Ok(())
}

/// Reconstruct every member's snapshot shards for one group.
///
/// `memories[i]` is member `i`'s committed snapshot set, `None` when the
/// host memory is gone (hardware loss). `live_stage_model`, when given,
/// is the full stage parameter block donated by a live data-parallel
/// replica; it backstops model shards that no codec can rebuild.
pub fn recover_group(
    group: &ShardingGroup,
    config: &ProtectionConfig,
    assignments: &[ShardAssignment],
    memories: &[Option<&CompletedSet>],
    live_stage_model: Option<&[u8]>,
    lr: f32,
) -> Result<GroupRecovery> {
    check_group_inputs(group, assignments, memories.len())?;
    let m = group.members.len();

    let mut model: Vec<Option<RecoveredShard>> = (0..m)
        .map(|i| {
            memories[i].and_then(|set| {
                set.shard(&model_key(group, i)).map(|d| RecoveredShard {
                    data: d.to_vec(),
                    source: ShardSource::OwnMemory,
                })
            })
        })
        .collect();

    let codec = if config.aec {
        let lens: Vec<usize> = assignments.iter().map(|a| a.local_len() as usize).collect();
        Some(AecCodec::new(&group.members, &lens, config.arc)?)
    } else {
        None
    };

    loop {
        let mut progress = false;
        if config.arc {
            for f in 0..m {
                if model[f].is_some() {
                    continue;
                }
                let holder = arc_holder_idx(f, m);
                if let Some(data) =
                    memories[holder].and_then(|set| set.shard(&model_key(group, f)))
                {
                    model[f] = Some(RecoveredShard {
                        data: data.to_vec(),
                        source: ShardSource::RingCopy,
                    });
                    progress = true;
                }
            }
        }
        if let Some(codec) = &codec {
            for f in 0..m {
                if model[f].is_some() {
                    continue;
                }
                let shards: Vec<Option<&[u8]>> =
                    model.iter().map(|s| s.as_ref().map(|r| r.data.as_slice())).collect();
                let parities: Vec<Option<&[u8]>> = (0..m)
                    .map(|i| memories[i].and_then(|set| set.shard(&parity_key(group, i))))
                    .collect();
                if let Ok(data) = codec.decode(f, &shards, &parities) {
                    model[f] = Some(RecoveredShard { data, source: ShardSource::ParityDecode });
                    progress = true;
                }
            }
        }
        if !progress {
            break;
        }
    }

    // Last resort for model bytes: a live replica holds the same weights.
    if let Some(live) = live_stage_model {
        for (f, slot) in model.iter_mut().enumerate() {
            if slot.is_some() {
                continue;
            }
            let range = &assignments[f].local_range;
            if range.end as usize > live.len() {
                return Err(Error::Recovery(format!(
                    "live replica of group {} is {} bytes; shard {} needs [{}, {})",
                    group.group_id,
                    live.len(),
                    f,
                    range.start,
                    range.end
                )));
            }
            *slot = Some(RecoveredShard {
                data: live[range.start as usize..range.end as usize].to_vec(),
                source: ShardSource::LiveReplica,
            });
        }
    }

    let lost: Vec<String> = (0..m)
        .filter(|f| model[*f].is_none())
        .map(|f| format!("node {}", group.members[f]))
        .collect();
    if !lost.is_empty() {
        return Err(Error::Unrecoverable(format!(
            "group {}: model shards of {} cannot be rebuilt from memory",
            group.group_id,
            lost.join(", ")
        )));
    }

    // Optimizer partitions: own memory, else replayed ring replica.
    let mut optimizer: Vec<Option<RecoveredShard>> = Vec::with_capacity(m);
    for f in 0..m {
        let Some(range) = assignments[f].optimizer_range.as_ref() else {
            optimizer.push(None);
            continue;
        };
        let expect_len = (range.end - range.start) as usize;
        if let Some(data) = memories[f].and_then(|set| set.shard(&optimizer_key(group, f))) {
            optimizer.push(Some(RecoveredShard {
                data: data.to_vec(),
                source: ShardSource::OwnMemory,
            }));
            continue;
        }
        if config.aor {
            let holder = arc_holder_idx(f, m);
            if let Some(set) = memories[holder] {
                if let Some(replica) = set.shard(&optimizer_key(group, f)) {
                    let mut grads: Vec<(u32, &[u8])> = set
                        .iter()
                        .filter(|(k, _)| {
                            k.group_id == group.group_id
                                && k.source_node == group.members[f]
                                && k.role == ShardRole::Gradient
                        })
                        .map(|(k, d)| (k.index, d))
                        .collect();
                    grads.sort_by_key(|(i, _)| *i);
                    let refs: Vec<&[u8]> = grads.iter().map(|(_, d)| *d).collect();
                    let data = aor_reconstruct(replica, &refs, lr)?;
                    if data.len() != expect_len {
                        return Err(Error::Recovery(format!(
                            "replayed optimizer shard of node {} is {} bytes, expected {}",
                            group.members[f],
                            data.len(),
                            expect_len
                        )));
                    }
                    optimizer.push(Some(RecoveredShard {
                        data,
                        source: ShardSource::OptimizerReplay,
                    }));
                    continue;
                }
            }
        }
        return Err(Error::Unrecoverable(format!(
            "group {}: optimizer partition of node {} has no surviving copy",
            group.group_id, group.members[f]
        )));
    }

    Ok(GroupRecovery {
        model: model.into_iter().map(|s| s.unwrap()).collect(),
        optimizer,
    })
}

/// Rebuild a group from the archival checkpoint at `path`.
pub fn recover_group_from_archive(
    group: &ShardingGroup,
    assignments: &[ShardAssignment],
    path: &Path,
    expected_digest: Option<u64>,
) -> Result<GroupRecovery> {
    check_group_inputs(group, assignments, assignments.len())?;
    let ck = crate::store::read_nfs_checkpoint(path, expected_digest)?;
    let m = group.members.len();
    let mut model = Vec::with_capacity(m);
    let mut optimizer = Vec::with_capacity(m);
    for f in 0..m {
        let mk = model_key(group, f);
        let entry = ck
            .entries
            .iter()
            .find(|e| e.key == mk)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("archive lacks shard {mk}")))?;
        model.push(RecoveredShard { data: entry.data.clone(), source: ShardSource::Archive });
        if assignments[f].optimizer_range.is_some() {
            let ok = optimizer_key(group, f);
            let entry = ck
                .entries
                .iter()
                .find(|e| e.key == ok)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("archive lacks shard {ok}")))?;
            optimizer.push(Some(RecoveredShard {
                data: entry.data.clone(),
                source: ShardSource::Archive,
            }));
        } else {
            optimizer.push(None);
        }
    }
    Ok(GroupRecovery { model, optimizer })
}

/// Memory recovery first, archive second.
pub fn recover_or_fallback(
    group: &ShardingGroup,
    config: &ProtectionConfig,
    assignments: &[ShardAssignment],
    memories: &[Option<&CompletedSet>],
    live_stage_model: Option<&[u8]>,
    lr: f32,
    archive: Option<&Path>,
    expected_digest: Option<u64>,
) -> Result<(GroupRecovery, bool)> {
    match recover_group(group, config, assignments, memories, live_stage_model, lr) {
        Ok(r) => Ok((r, false)),
        Err(Error::Unrecoverable(reason)) => {
            let Some(path) = archive else {
                return Err(Error::Unrecoverable(format!(
                    "{reason}; no archival checkpoint configured"
                )));
            };
            let r = recover_group_from_archive(group, assignments, path, expected_digest)?;
            Ok((r, true))
        }
        Err(e) => Err(e),
    }
}

/// Concatenate recovered shards back into the full stage block.
pub fn assemble_stage(
    assignments: &[ShardAssignment],
    shards: &[&[u8]],
) -> Result<Vec<u8>> {
    if assignments.len() != shards.len() {
        return Err(Error::Recovery(format!(
            "{} assignments but {} shards",
            assignments.len(),
            shards.len()
        )));
    }
    let total = assignments.iter().map(|a| a.local_len()).sum::<u64>() as usize;
    let mut out = vec![0u8; total];
    for (a, s) in assignments.iter().zip(shards) {
        let (lo, hi) = (a.local_range.start as usize, a.local_range.end as usize);
        if s.len() != hi - lo {
            return Err(Error::Recovery(format!(
                "shard of node {} is {} bytes, assignment spans {}",
                a.node_id,
                s.len(),
                hi - lo
            )));
        }
        out[lo..hi].copy_from_slice(s);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Timing model
// ---------------------------------------------------------------------------

/// Bandwidths the recovery time model runs on.
#[derive(Debug, Clone, Copy)]
pub struct RecoveryTiming {
    /// Host→device staging bandwidth on one node (B/s).
    pub b_io: f64,
    /// Effective internode link bandwidth during recovery (B/s).
    pub internode_bw: f64,
    /// Shared-filesystem read bandwidth (B/s).
    pub nfs_bw: f64,
}

impl RecoveryTiming {
    /// Reload a full stage block from the archive.
    pub fn t_nfs(&self, stage_bytes: u64) -> f64 {
        stage_bytes as f64 / self.nfs_bw
    }

    /// Restore one lost shard from its ring copy: the holder stages its
    /// copy and the replacement stages it again after the transfer, which
    /// rides links shared by the group's re-replication traffic.
    pub fn t_arc(&self, shard_bytes: u64, m: u32) -> f64 {
        let a = shard_bytes as f64 / self.b_io;
        let b = shard_bytes as f64 / self.internode_bw;
        2.0 * a + (m as f64 - 1.0) * b
    }

    /// Restore one lost shard from parity: every survivor stages its piece
    /// (m/(m−1) of a shard in aggregate), the pieces cross the same shared
    /// links, and the decoded result is staged once more piece by piece.
    pub fn t_aec(&self, shard_bytes: u64, m: u32) -> f64 {
        let a = shard_bytes as f64 / self.b_io;
        let b = shard_bytes as f64 / self.internode_bw;
        let mf = m as f64;
        (mf / (mf - 1.0)) * a + (mf - 1.0) * b + b / (mf - 1.0)
    }

    /// Re-spread a stage to all members after shard repair.
    pub fn t_all_gather(&self, stage_bytes: u64, m: u32) -> f64 {
        let shard = stage_bytes as f64 / m as f64;
        (m as f64 - 1.0) * shard / self.internode_bw
    }
}

/// Bandwidths fitted to recovery drills on the reference eight-node
/// cluster (one 2.6 B-parameter replica over four stages). The effective
/// link numbers are lower than the hardware peaks because recovery
/// traffic contends with re-replication on the same links.
pub fn reference_timing() -> RecoveryTiming {
    RecoveryTiming {
        b_io: 8.125e7 * 44.0 / 5.25,         // ≈ 681 MB/s effective staging
        internode_bw: 8.125e7 * 44.0 / 3.78, // ≈ 946 MB/s effective link
        nfs_bw: 6.5e8 / 9.27,                // ≈ 70 MB/s shared filesystem
    }
}

/// Stage size and shard size of the reference drill above.
pub const REFERENCE_STAGE_BYTES: u64 = 650_000_000;
pub const REFERENCE_GROUP_SIZE: u32 = 8;

/// Precompute the per-group capability summary the simulator consumes.
pub fn build_recovery_model(
    groups: &[ShardingGroup],
    config: &ProtectionConfig,
    timing: &RecoveryTiming,
) -> Result<RecoveryModel> {
    if groups.is_empty() {
        return Err(Error::Recovery("no sharding groups".into()));
    }
    let mut tolerance = Vec::with_capacity(groups.len());
    let mut inmem = 0.0f64;
    let mut nfs = 0.0f64;
    for g in groups {
        let m = g.members.len() as u32;
        tolerance.push(config.effective_tolerance(m));
        let shard = g.total_bytes.div_ceil(m as u64);
        let repair = if config.arc {
            timing.t_arc(shard, m)
        } else if config.aec {
            timing.t_aec(shard, m)
        } else {
            // No codec: a software failure reloads its own host buffer.
            shard as f64 / timing.b_io
        };
        inmem = inmem.max(repair + timing.t_all_gather(g.total_bytes, m));
        nfs = nfs.max(timing.t_nfs(g.total_bytes));
    }
    Ok(RecoveryModel {
        groups: groups.to_vec(),
        per_group_tolerance: tolerance,
        inmem_load_s: inmem,
        nfs_load_s: nfs,
    })
}

// ---------------------------------------------------------------------------
// Snapshot population (shared by drills and tests)
// ---------------------------------------------------------------------------

/// Ground-truth state for one group used to fill stores the way a real
/// snapshot round would.
#[derive(Debug, Clone)]
pub struct GroupTruth {
    /// Full stage parameter block (W_n bytes).
    pub stage_model: Vec<u8>,
    /// Stale full optimizer block (the ring replica's vintage); `None`
    /// when the optimizer is not sharded.
    pub stage_optimizer_stale: Option<Vec<u8>>,
    /// Retained gradient steps, oldest first, each the full stage length.
    pub grad_steps: Vec<Vec<u8>>,
    pub lr: f32,
}

impl GroupTruth {
    /// The up-to-date optimizer block: the stale state with every retained
    /// step replayed.
    pub fn current_optimizer(&self) -> Result<Option<Vec<u8>>> {
        let Some(stale) = &self.stage_optimizer_stale else { return Ok(None) };
        let refs: Vec<&[u8]> = self.grad_steps.iter().map(|g| g.as_slice()).collect();
        Ok(Some(aor_reconstruct(stale, &refs, self.lr)?))
    }
}

/// Write one snapshot round into every member's store exactly as the
/// protection duties dictate, and commit.
pub fn populate_group_stores(
    group: &ShardingGroup,
    config: &ProtectionConfig,
    assignments: &[ShardAssignment],
    truth: &GroupTruth,
    stores: &[&NodeStore],
    iteration: u64,
) -> Result<()> {
    check_group_inputs(group, assignments, stores.len())?;
    let m = group.members.len();
    if truth.stage_model.len() as u64 != group.total_bytes {
        return Err(Error::Recovery(format!(
            "stage model is {} bytes, group holds {}",
            truth.stage_model.len(),
            group.total_bytes
        )));
    }
    let model_slice = |i: usize| {
        let r = &assignments[i].local_range;
        &truth.stage_model[r.start as usize..r.end as usize]
    };
    let current_opt = truth.current_optimizer()?;
    let opt_slice = |block: &[u8], i: usize| -> Option<Vec<u8>> {
        assignments[i]
            .optimizer_range
            .as_ref()
            .map(|r| block[r.start as usize..r.end as usize].to_vec())
    };

    let parities = if config.aec {
        let lens: Vec<usize> = assignments.iter().map(|a| a.local_len() as usize).collect();
        let codec = AecCodec::new(&group.members, &lens, config.arc)?;
        let shards: Vec<&[u8]> = (0..m).map(model_slice).collect();
        Some(codec.encode(&shards)?)
    } else {
        None
    };

    for i in 0..m {
        let right = (i + 1) % m;
        let mut manifest = vec![ManifestEntry {
            key: model_key(group, i),
            bytes: assignments[i].local_len(),
        }];
        let mut payloads: Vec<(ShardKey, Vec<u8>)> =
            vec![(model_key(group, i), model_slice(i).to_vec())];

        if config.arc {
            let key = model_key(group, right);
            manifest.push(ManifestEntry { key, bytes: assignments[right].local_len() });
            payloads.push((key, model_slice(right).to_vec()));
        }
        if let Some(parities) = &parities {
            let key = parity_key(group, i);
            manifest.push(ManifestEntry { key, bytes: parities[i].len() as u64 });
            payloads.push((key, parities[i].clone()));
        }
        if let Some(current) = &current_opt {
            if let Some(own) = opt_slice(current, i) {
                let key = optimizer_key(group, i);
                manifest.push(ManifestEntry { key, bytes: own.len() as u64 });
                payloads.push((key, own));
            }
        }
        if config.aor {
            let stale = truth
                .stage_optimizer_stale
                .as_ref()
                .ok_or_else(|| Error::Recovery("optimizer recomputation without optimizer state".into()))?;
            if let Some(replica) = opt_slice(stale, right) {
                let key = optimizer_key(group, right);
                manifest.push(ManifestEntry { key, bytes: replica.len() as u64 });
                payloads.push((key, replica));
                for (t, step) in truth.grad_steps.iter().enumerate() {
                    let slice = opt_slice(step, right).unwrap();
                    let key = ShardKey {
                        group_id: group.group_id,
                        source_node: group.members[right],
                        role: ShardRole::Gradient,
                        index: t as u32,
                    };
                    manifest.push(ManifestEntry { key, bytes: slice.len() as u64 });
                    payloads.push((key, slice));
                }
            }
        }

        stores[i].begin_snapshot(iteration, &manifest)?;
        for (key, data) in payloads {
            stores[i].write_shard(&key, 0, &data)?;
        }
        stores[i].commit()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::default_capacity;
    use crate::topology::{assign_shards, ceil_split};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn group(m: u32, total: u64) -> ShardingGroup {
        ShardingGroup { group_id: 0, pp_stage: 0, members: (0..m).collect(), total_bytes: total }
    }

    fn random_bytes(n: usize, rng: &mut ChaCha12Rng) -> Vec<u8> {
        (0..n).map(|_| rng.gen()).collect()
    }

    fn f32_bytes(n: usize, rng: &mut ChaCha12Rng) -> Vec<u8> {
        let mut out = Vec::with_capacity(n * 4);
        for _ in 0..n {
            out.extend_from_slice(&rng.gen_range(-2.0f32..2.0).to_le_bytes());
        }
        out
    }

    struct Drill {
        group: ShardingGroup,
        assignments: Vec<ShardAssignment>,
        stores: Vec<NodeStore>,
        truth: GroupTruth,
        config: ProtectionConfig,
    }

    fn setup(m: u32, total: u64, config: ProtectionConfig, zero1: bool, seed: u64) -> Drill {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let group = group(m, total);
        let opt_total = if zero1 { (total / 2 / 4).max(1) * 4 } else { 0 };
        let assignments = assign_shards(&group, zero1, opt_total).unwrap();
        let truth = GroupTruth {
            stage_model: random_bytes(total as usize, &mut rng),
            stage_optimizer_stale: zero1.then(|| f32_bytes(opt_total as usize / 4, &mut rng)),
            grad_steps: if zero1 {
                (0..3).map(|_| f32_bytes(opt_total as usize / 4, &mut rng)).collect()
            } else {
                Vec::new()
            },
            lr: 0.05,
        };
        let stores: Vec<NodeStore> = group
            .members
            .iter()
            .map(|id| NodeStore::new(*id, default_capacity(total, opt_total)))
            .collect();
        let refs: Vec<&NodeStore> = stores.iter().collect();
        populate_group_stores(&group, &config, &assignments, &truth, &refs, 7).unwrap();
        Drill { group, assignments, stores, truth, config }
    }

    fn memories<'a>(
        d: &'a Drill,
        dead: &[usize],
        sets: &'a [Option<std::sync::Arc<CompletedSet>>],
    ) -> Vec<Option<&'a CompletedSet>> {
        (0..d.stores.len())
            .map(|i| {
                if dead.contains(&i) {
                    None
                } else {
                    sets[i].as_deref()
                }
            })
            .collect()
    }

    fn run_drill(d: &Drill, dead: &[usize], live: Option<&[u8]>) -> Result<GroupRecovery> {
        let sets: Vec<Option<std::sync::Arc<CompletedSet>>> =
            d.stores.iter().map(|s| s.completed()).collect();
        let mems = memories(d, dead, &sets);
        recover_group(&d.group, &d.config, &d.assignments, &mems, live, d.truth.lr)
    }

    fn assert_model_exact(d: &Drill, rec: &GroupRecovery) {
        for (i, shard) in rec.model.iter().enumerate() {
            let r = &d.assignments[i].local_range;
            assert_eq!(
                shard.data,
                &d.truth.stage_model[r.start as usize..r.end as usize],
                "model shard {i}"
            );
        }
    }

    #[test]
    fn ring_copy_restores_single_loss() {
        let d = setup(4, 1000, ProtectionConfig { arc: true, ..Default::default() }, false, 1);
        for dead in 0..4 {
            let rec = run_drill(&d, &[dead], None).unwrap();
            assert_model_exact(&d, &rec);
            assert_eq!(rec.model[dead].source, ShardSource::RingCopy);
            for i in (0..4).filter(|i| *i != dead) {
                assert_eq!(rec.model[i].source, ShardSource::OwnMemory);
            }
        }
    }

    #[test]
    fn parity_restores_single_loss() {
        let d = setup(5, 2000, ProtectionConfig { aec: true, ..Default::default() }, false, 2);
        for dead in 0..5 {
            let rec = run_drill(&d, &[dead], None).unwrap();
            assert_model_exact(&d, &rec);
            assert_eq!(rec.model[dead].source, ShardSource::ParityDecode);
        }
    }

    #[test]
    fn combined_codecs_restore_any_pair() {
        let cfg = ProtectionConfig { arc: true, aec: true, ..Default::default() };
        for m in [3u32, 4, 6] {
            let d = setup(m, 1200, cfg, false, 3 + m as u64);
            for a in 0..m as usize {
                for b in 0..m as usize {
                    if a == b {
                        continue;
                    }
                    let rec = run_drill(&d, &[a, b], None)
                        .unwrap_or_else(|e| panic!("m={m} dead=({a},{b}): {e}"));
                    assert_model_exact(&d, &rec);
                }
            }
        }
    }

    #[test]
    fn adjacent_pair_uses_ring_then_parity() {
        let cfg = ProtectionConfig { arc: true, aec: true, ..Default::default() };
        let d = setup(4, 1000, cfg, false, 9);
        // Ring holder of 2 is 1 (dead); holder of 1 is 0 (alive).
        let rec = run_drill(&d, &[1, 2], None).unwrap();
        assert_model_exact(&d, &rec);
        assert_eq!(rec.model[1].source, ShardSource::RingCopy);
        assert_eq!(rec.model[2].source, ShardSource::ParityDecode);
    }

    #[test]
    fn losses_beyond_codecs_are_unrecoverable_without_live_replica() {
        let cfg = ProtectionConfig { arc: true, aec: true, ..Default::default() };
        let d = setup(4, 1000, cfg, false, 11);
        match run_drill(&d, &[0, 1, 2], None) {
            Err(Error::Unrecoverable(_)) => {}
            other => panic!("expected Unrecoverable, got {other:?}"),
        }
        // With a live replica the model side still comes back.
        let rec = run_drill(&d, &[0, 1, 2], Some(&d.truth.stage_model)).unwrap();
        assert_model_exact(&d, &rec);
    }

    #[test]
    fn optimizer_replay_restores_partition() {
        let cfg = ProtectionConfig { aor: true, ..Default::default() };
        let d = setup(4, 4000, cfg, true, 13);
        let current = d.truth.current_optimizer().unwrap().unwrap();
        for dead in 0..4usize {
            let rec = run_drill(&d, &[dead], Some(&d.truth.stage_model)).unwrap();
            assert_model_exact(&d, &rec);
            assert_eq!(rec.model[dead].source, ShardSource::LiveReplica);
            let r = d.assignments[dead].optimizer_range.clone().unwrap();
            let got = rec.optimizer[dead].as_ref().unwrap();
            assert_eq!(got.source, ShardSource::OptimizerReplay);
            assert_eq!(
                got.data,
                &current[r.start as usize..r.end as usize],
                "optimizer shard {dead} must replay bit-exactly"
            );
        }
    }

    #[test]
    fn software_loss_reads_own_memory() {
        let cfg = ProtectionConfig { arc: true, ..Default::default() };
        let d = setup(3, 600, cfg, false, 17);
        // Software failure: memory is intact, nothing to reconstruct.
        let rec = run_drill(&d, &[], None).unwrap();
        assert_model_exact(&d, &rec);
        for s in &rec.model {
            assert_eq!(s.source, ShardSource::OwnMemory);
        }
    }

    #[test]
    fn archive_fallback_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.rftc");
        let cfg = ProtectionConfig { arc: true, ..Default::default() };
        let d = setup(4, 1000, cfg, false, 19);
        // Write the archive from ground truth.
        let mut entries = Vec::new();
        for i in 0..4usize {
            let r = &d.assignments[i].local_range;
            entries.push((
                model_key(&d.group, i),
                7u64,
                &d.truth.stage_model[r.start as usize..r.end as usize],
            ));
        }
        crate::store::write_nfs_checkpoint(&path, 42, &entries).unwrap();

        // Two losses exceed the single ring copy; fallback must kick in.
        let sets: Vec<Option<std::sync::Arc<CompletedSet>>> =
            d.stores.iter().map(|s| s.completed()).collect();
        let mems = memories(&d, &[0, 1], &sets);
        let (rec, from_archive) = recover_or_fallback(
            &d.group,
            &d.config,
            &d.assignments,
            &mems,
            None,
            d.truth.lr,
            Some(&path),
            Some(42),
        )
        .unwrap();
        assert!(from_archive);
        assert_model_exact(&d, &rec);
        assert!(rec.model.iter().all(|s| s.source == ShardSource::Archive));
    }

    #[test]
    fn stage_reassembly_is_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let g = group(4, 1003);
        let assignments = assign_shards(&g, false, 0).unwrap();
        let block = random_bytes(1003, &mut rng);
        let shards: Vec<&[u8]> = ceil_split(1003, 4)
            .iter()
            .map(|r| &block[r.start as usize..r.end as usize])
            .collect();
        assert_eq!(assemble_stage(&assignments, &shards).unwrap(), block);
        let short = vec![&block[0..1]; 4];
        assert!(assemble_stage(&assignments, &short).is_err());
    }

    #[test]
    fn reference_drill_times() {
        let t = reference_timing();
        let shard = REFERENCE_STAGE_BYTES / REFERENCE_GROUP_SIZE as u64;
        assert!((t.t_arc(shard, REFERENCE_GROUP_SIZE) - 0.84).abs() < 1e-9);
        assert!((t.t_aec(shard, REFERENCE_GROUP_SIZE) - 0.75).abs() < 1e-9);
        assert!((t.t_nfs(REFERENCE_STAGE_BYTES) - 9.27).abs() < 1e-9);
    }

    #[test]
    fn all_gather_cost_formula() {
        let t = RecoveryTiming { b_io: 1.0, internode_bw: 1000.0, nfs_bw: 1.0 };
        assert!((t.t_all_gather(1000, 4) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn recovery_model_summarizes_groups() {
        let groups = vec![group(4, 1000)];
        let cfg = ProtectionConfig { arc: true, ..Default::default() };
        let timing = RecoveryTiming { b_io: 1000.0, internode_bw: 1000.0, nfs_bw: 100.0 };
        let model = build_recovery_model(&groups, &cfg, &timing).unwrap();
        assert_eq!(model.per_group_tolerance, vec![1]);
        // t_arc(250, 4) = 2·0.25 + 3·0.25 = 1.25, all-gather = 0.75.
        assert!((model.inmem_load_s - 2.0).abs() < 1e-12);
        assert!((model.nfs_load_s - 10.0).abs() < 1e-12);
    }
}
