//! Intra-group redundancy codecs.
//!
//! A sharding group of `m` nodes holds one логical copy of a pipeline
//! stage, split into per-node shards. Three independent mechanisms raise
//! the number of simultaneous in-group losses that can be repaired from
//! peer memory instead of the archive:
//!
//! * **ring copy** — node `i` additionally snapshots the shard of node
//!   `(i+1) mod m`, doubling its snapshot volume to `2·W_n/m`;
//! * **XOR parity** — every shard is cut into equal pieces scattered over
//!   the other members, and each member stores one parity word of size
//!   `W_n/(m(m−1))` XOR-folded over the pieces it received;
//! * **optimizer recomputation** — instead of copying optimizer state, a
//!   ring peer keeps a one-step-stale replica plus the gradient slice for
//!   the owner's partition and replays the update rule on demand.
//!
//! Enabling a codec adds one to the losses the group can absorb; the
//! effective ceiling is `m − 1` since at least one member must survive to
//! serve data.
//!
//! When ring copy and parity run together the geometry changes: the piece
//! scatter skips the owner's ring protector (whose memory dies with the
//! same fault domain for adjacent losses), so each shard is cut into
//! `m − 2` pieces instead of `m − 1`. Recovery then repairs the ring-
//! recoverable node first and parity-decodes the other.

use crate::error::{Error, Result};
use crate::topology::{ShardAssignment, ShardingGroup};

/// What a shard payload contains; the numeric codes are stable and appear
/// in the archival checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShardRole {
    Model = 0,
    Optimizer = 1,
    Gradient = 2,
    Parity = 3,
}

impl ShardRole {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => ShardRole::Model,
            1 => ShardRole::Optimizer,
            2 => ShardRole::Gradient,
            3 => ShardRole::Parity,
            other => return Err(Error::CorruptCheckpoint(format!("unknown shard role code {other}"))),
        })
    }
}

/// Which redundancy codecs are switched on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProtectionConfig {
    pub arc: bool,
    pub aec: bool,
    pub aor: bool,
}

impl ProtectionConfig {
    pub fn none() -> Self {
        Self::default()
    }

    /// Number of codecs enabled — and the advertised per-group loss budget.
    pub fn tolerance(&self) -> u32 {
        self.arc as u32 + self.aec as u32 + self.aor as u32
    }

    /// Loss budget actually honoured by recovery: at least one group member
    /// must survive, so the budget saturates at `m − 1`.
    pub fn effective_tolerance(&self, m: u32) -> u32 {
        self.tolerance().min(m.saturating_sub(1))
    }

    /// Check the codec set against a group size and the optimizer layout.
    pub fn validate(&self, m: u32, zero1_enabled: bool) -> Result<()> {
        if self.arc && m < 2 {
            return Err(Error::Codec("ring copy needs at least 2 nodes per group".into()));
        }
        if self.aec && m < 2 {
            return Err(Error::Codec("parity needs at least 2 nodes per group".into()));
        }
        if self.arc && self.aec && m < 3 {
            return Err(Error::Codec(
                "combined ring copy and parity needs at least 3 nodes per group".into(),
            ));
        }
        if self.aor && m < 2 {
            return Err(Error::Codec("optimizer recomputation needs a ring peer".into()));
        }
        if self.aor && !zero1_enabled {
            return Err(Error::Codec(
                "optimizer recomputation requires sharded (stage-1) optimizer state".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Ring copy
// ---------------------------------------------------------------------------

/// One protection obligation: `protector` keeps a copy of `owner`'s shard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingDuty {
    pub protector: u32,
    pub owner: u32,
}

/// Ring-copy duties for a group: member `i` protects member `(i+1) mod m`,
/// so the copy of a failed node always lives on its left neighbour.
pub fn arc_duties(group: &ShardingGroup) -> Result<Vec<RingDuty>> {
    let m = group.members.len();
    if m < 2 {
        return Err(Error::Codec(format!(
            "group {} has {} member(s); ring copy needs at least 2",
            group.group_id, m
        )));
    }
    Ok((0..m)
        .map(|i| RingDuty {
            protector: group.members[i],
            owner: group.members[(i + 1) % m],
        })
        .collect())
}

/// Index of the member holding the ring copy of member `owner_idx`.
pub fn arc_holder_idx(owner_idx: usize, m: usize) -> usize {
    (owner_idx + m - 1) % m
}

// ---------------------------------------------------------------------------
// XOR parity
// ---------------------------------------------------------------------------

/// XOR-fold equal-length buffers into one.
pub fn xor_reduce(pieces: &[&[u8]]) -> Result<Vec<u8>> {
    let Some(first) = pieces.first() else {
        return Err(Error::Codec("cannot XOR-fold zero buffers".into()));
    };
    let len = first.len();
    for (i, p) in pieces.iter().enumerate() {
        if p.len() != len {
            return Err(Error::Codec(format!(
                "XOR buffer {} is {} bytes, expected {}",
                i,
                p.len(),
                len
            )));
        }
    }
    let mut out = first.to_vec();
    for p in &pieces[1..] {
        for (o, b) in out.iter_mut().zip(p.iter()) {
            *o ^= *b;
        }
    }
    Ok(out)
}

/// Parity codec for one group. `composed` switches to the geometry used
/// when ring copies exist alongside parity.
#[derive(Debug, Clone)]
pub struct AecCodec {
    members: Vec<u32>,
    shard_lens: Vec<usize>,
    piece_len: usize,
    composed: bool,
}

impl AecCodec {
    pub fn new(members: &[u32], shard_lens: &[usize], composed: bool) -> Result<Self> {
        let m = members.len();
        let min_m = if composed { 3 } else { 2 };
        if m < min_m {
            return Err(Error::Codec(format!(
                "parity over {m} member(s); need at least {min_m}"
            )));
        }
        if shard_lens.len() != m {
            return Err(Error::Codec(format!(
                "{} shard lengths for {} members",
                shard_lens.len(),
                m
            )));
        }
        let pieces = m - 1 - composed as usize;
        let max_len = *shard_lens.iter().max().unwrap();
        let piece_len = max_len.div_ceil(pieces.max(1));
        Ok(AecCodec {
            members: members.to_vec(),
            shard_lens: shard_lens.to_vec(),
            piece_len,
            composed,
        })
    }

    pub fn piece_len(&self) -> usize {
        self.piece_len
    }

    pub fn members(&self) -> &[u32] {
        &self.members
    }

    fn m(&self) -> usize {
        self.members.len()
    }

    /// Member indices that receive a piece of `owner`'s shard, ascending.
    pub fn protectors_of(&self, owner: usize) -> Vec<usize> {
        let m = self.m();
        (0..m)
            .filter(|i| {
                *i != owner && !(self.composed && *i == arc_holder_idx(owner, m))
            })
            .collect()
    }

    /// Owner indices whose pieces land on `protector`.
    fn contributors_to(&self, protector: usize) -> Vec<usize> {
        (0..self.m())
            .filter(|j| self.protectors_of(*j).contains(&protector))
            .collect()
    }

    /// Cut `owner`'s shard into its scatter pieces, zero-padded to the
    /// uniform piece length, keyed by protector index.
    pub fn pieces_of(&self, owner: usize, shard: &[u8]) -> Result<Vec<(usize, Vec<u8>)>> {
        if shard.len() != self.shard_lens[owner] {
            return Err(Error::Codec(format!(
                "shard of member {owner} is {} bytes, codec expects {}",
                shard.len(),
                self.shard_lens[owner]
            )));
        }
        let prot = self.protectors_of(owner);
        let mut out = Vec::with_capacity(prot.len());
        for (t, p) in prot.into_iter().enumerate() {
            let lo = (t * self.piece_len).min(shard.len());
            let hi = ((t + 1) * self.piece_len).min(shard.len());
            let mut piece = shard[lo..hi].to_vec();
            piece.resize(self.piece_len, 0);
            out.push((p, piece));
        }
        Ok(out)
    }

    /// Parity word held by `protector`: XOR over the pieces scattered to it.
    pub fn encode_parity(&self, protector: usize, shards: &[&[u8]]) -> Result<Vec<u8>> {
        if shards.len() != self.m() {
            return Err(Error::Codec(format!(
                "{} shards for {} members",
                shards.len(),
                self.m()
            )));
        }
        let mut acc = vec![0u8; self.piece_len];
        let mut any = false;
        for j in self.contributors_to(protector) {
            let pieces = self.pieces_of(j, shards[j])?;
            let (_, piece) = pieces
                .into_iter()
                .find(|(p, _)| *p == protector)
                .expect("contributor produced no piece for its protector");
            for (a, b) in acc.iter_mut().zip(piece.iter()) {
                *a ^= *b;
            }
            any = true;
        }
        if !any {
            return Err(Error::Codec(format!(
                "member {protector} receives no pieces in this geometry"
            )));
        }
        Ok(acc)
    }

    /// All parity words, indexed by member.
    pub fn encode(&self, shards: &[&[u8]]) -> Result<Vec<Vec<u8>>> {
        (0..self.m()).map(|i| self.encode_parity(i, shards)).collect()
    }

    /// Rebuild the shard of `failed` from surviving shards and parity
    /// words. `shards[j]` / `parities[i]` are `None` for lost members.
    /// Exactly the failed member's data may be missing from the piece
    /// equations; a second relevant loss is beyond what parity can solve.
    pub fn decode(
        &self,
        failed: usize,
        shards: &[Option<&[u8]>],
        parities: &[Option<&[u8]>],
    ) -> Result<Vec<u8>> {
        if shards.len() != self.m() || parities.len() != self.m() {
            return Err(Error::Codec("decode inputs must cover every member".into()));
        }
        if shards[failed].is_some() {
            return Err(Error::Codec(format!("member {failed} is not actually missing")));
        }
        let mut shard = Vec::with_capacity(self.shard_lens[failed]);
        for (t, protector) in self.protectors_of(failed).into_iter().enumerate() {
            let Some(parity) = parities[protector] else {
                return Err(Error::Unrecoverable(format!(
                    "parity word of member {protector} is lost along with member {failed}"
                )));
            };
            if parity.len() != self.piece_len {
                return Err(Error::Codec(format!(
                    "parity of member {protector} is {} bytes, expected {}",
                    parity.len(),
                    self.piece_len
                )));
            }
            let mut acc = parity.to_vec();
            for j in self.contributors_to(protector) {
                if j == failed {
                    continue;
                }
                let Some(s) = shards[j] else {
                    return Err(Error::Unrecoverable(format!(
                        "members {failed} and {j} both lost; parity at {protector} cannot isolate either"
                    )));
                };
                let pieces = self.pieces_of(j, s)?;
                let (_, piece) = pieces
                    .into_iter()
                    .find(|(p, _)| *p == protector)
                    .expect("contributor produced no piece for its protector");
                for (a, b) in acc.iter_mut().zip(piece.iter()) {
                    *a ^= *b;
                }
            }
            let lo = t * self.piece_len;
            let want = self.shard_lens[failed].saturating_sub(lo).min(self.piece_len);
            shard.extend_from_slice(&acc[..want]);
        }
        if shard.len() != self.shard_lens[failed] {
            return Err(Error::Codec(format!(
                "decoded {} bytes for member {failed}, expected {}",
                shard.len(),
                self.shard_lens[failed]
            )));
        }
        Ok(shard)
    }
}

// ---------------------------------------------------------------------------
// Optimizer recomputation
// ---------------------------------------------------------------------------

/// Ring duties for optimizer replicas: same left-neighbour geometry as the
/// ring copy, but the payload is a stale optimizer shard plus gradients.
pub fn aor_duties(group: &ShardingGroup) -> Result<Vec<RingDuty>> {
    arc_duties(group)
}

/// One plain-SGD step over little-endian f32 state: `w ← w − η·g`,
/// element by element in buffer order, so results are bit-reproducible.
pub fn aor_update(weights: &mut [u8], grads: &[u8], lr: f32) -> Result<()> {
    if weights.len() % 4 != 0 {
        return Err(Error::Codec(format!(
            "state buffer of {} bytes is not a whole number of f32 values",
            weights.len()
        )));
    }
    if weights.len() != grads.len() {
        return Err(Error::Codec(format!(
            "state is {} bytes but gradient is {}",
            weights.len(),
            grads.len()
        )));
    }
    for (wc, gc) in weights.chunks_exact_mut(4).zip(grads.chunks_exact(4)) {
        let w = f32::from_le_bytes([wc[0], wc[1], wc[2], wc[3]]);
        let g = f32::from_le_bytes([gc[0], gc[1], gc[2], gc[3]]);
        wc.copy_from_slice(&(w - lr * g).to_le_bytes());
    }
    Ok(())
}

/// Replay `grads` (oldest first) on top of a stale replica to reproduce
/// the current optimizer shard.
pub fn aor_reconstruct(replica: &[u8], grads: &[&[u8]], lr: f32) -> Result<Vec<u8>> {
    let mut state = replica.to_vec();
    for g in grads {
        aor_update(&mut state, g, lr)?;
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Duty accounting
// ---------------------------------------------------------------------------

/// Per-node snapshot obligations in bytes, given the enabled codecs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DutyReport {
    pub node_id: u32,
    /// The node's own model shard.
    pub own_bytes: u64,
    /// Ring copy of the right neighbour's shard.
    pub arc_bytes: u64,
    /// XOR parity word.
    pub aec_parity_bytes: u64,
    /// Stale optimizer replica held for the right neighbour.
    pub aor_replica_bytes: u64,
    /// Retained gradient slice covering the neighbour's partition.
    pub aor_gradient_bytes: u64,
}

impl DutyReport {
    pub fn total_bytes(&self) -> u64 {
        self.own_bytes
            + self.arc_bytes
            + self.aec_parity_bytes
            + self.aor_replica_bytes
            + self.aor_gradient_bytes
    }
}

/// Compute every member's obligations for one group. `assignments` must be
/// the group's shard table (one entry per member, in member order).
pub fn protection_duties(
    config: &ProtectionConfig,
    group: &ShardingGroup,
    assignments: &[ShardAssignment],
) -> Result<Vec<DutyReport>> {
    let m = group.members.len();
    if assignments.len() != m {
        return Err(Error::Codec(format!(
            "group {} has {} members but {} shard assignments",
            group.group_id,
            m,
            assignments.len()
        )));
    }
    config.validate(m as u32, assignments.iter().all(|a| a.optimizer_range.is_some()) || !config.aor)?;
    let shard_len = |i: usize| assignments[i].local_len();
    let opt_len = |i: usize| {
        assignments[i]
            .optimizer_range
            .as_ref()
            .map(|r| r.end - r.start)
            .unwrap_or(0)
    };
    let piece_len = if config.aec {
        let lens: Vec<usize> = (0..m).map(|i| shard_len(i) as usize).collect();
        AecCodec::new(&group.members, &lens, config.arc)?.piece_len() as u64
    } else {
        0
    };
    Ok((0..m)
        .map(|i| {
            let right = (i + 1) % m;
            DutyReport {
                node_id: group.members[i],
                own_bytes: shard_len(i),
                arc_bytes: if config.arc { shard_len(right) } else { 0 },
                aec_parity_bytes: piece_len,
                aor_replica_bytes: if config.aor { opt_len(right) } else { 0 },
                aor_gradient_bytes: if config.aor { opt_len(right) } else { 0 },
            }
        })
        .collect())
}
