//! Per-node snapshot storage: a double-buffered in-memory store, a tmpfs
//! mirror that survives process crashes, and the archival checkpoint file
//! format used on shared storage.
//!
//! The store keeps at most two snapshot sets per node: the one being
//! written (`ongoing`) and the last complete one (`completed`). Readers
//! only ever see `completed`, which is swapped atomically on commit, so a
//! crash mid-snapshot can never expose a torn restore point.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use crate::error::{Error, Result};
use crate::protection::ShardRole;

/// Identity of one shard payload inside a snapshot set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ShardKey {
    pub group_id: u32,
    /// Node whose state the payload describes (not necessarily the node
    /// storing it — redundancy copies keep the original owner here).
    pub source_node: u32,
    pub role: ShardRole,
    /// Disambiguates multiple payloads of the same role (e.g. retained
    /// gradient steps); zero for singletons.
    pub index: u32,
}

impl fmt::Display for ShardKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let role = match self.role {
            ShardRole::Model => "model",
            ShardRole::Optimizer => "opt",
            ShardRole::Gradient => "grad",
            ShardRole::Parity => "parity",
        };
        write!(f, "g{}-n{}-{}-{}", self.group_id, self.source_node, role, self.index)
    }
}

/// Size declaration for one shard of an upcoming snapshot.
#[derive(Debug, Clone, Copy)]
pub struct ManifestEntry {
    pub key: ShardKey,
    pub bytes: u64,
}

#[derive(Debug)]
struct PendingShard {
    data: Vec<u8>,
    /// Sorted, disjoint half-open byte ranges already written.
    written: Vec<(u64, u64)>,
    covered: u64,
}

impl PendingShard {
    fn complete(&self) -> bool {
        self.covered == self.data.len() as u64
    }
}

/// The write side of a snapshot in progress.
#[derive(Debug)]
struct PendingSet {
    iteration: u64,
    shards: BTreeMap<ShardKey, PendingShard>,
}

/// An immutable, fully written snapshot set.
#[derive(Debug, Clone)]
pub struct CompletedSet {
    pub iteration: u64,
    shards: BTreeMap<ShardKey, Vec<u8>>,
}

impl CompletedSet {
    pub fn shard(&self, key: &ShardKey) -> Option<&[u8]> {
        self.shards.get(key).map(|v| v.as_slice())
    }

    pub fn keys(&self) -> impl Iterator<Item = &ShardKey> {
        self.shards.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ShardKey, &[u8])> {
        self.shards.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn total_bytes(&self) -> u64 {
        self.shards.values().map(|v| v.len() as u64).sum()
    }

    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }
}

/// Host-memory snapshot buffers of one node.
#[derive(Debug)]
pub struct NodeStore {
    node_id: u32,
    capacity_bytes: u64,
    ongoing: Mutex<Option<PendingSet>>,
    completed: RwLock<Option<Arc<CompletedSet>>>,
}

/// Default host-buffer budget: both buffers plus slack for redundancy
/// payloads.
pub fn default_capacity(model_bytes: u64, optimizer_bytes: u64) -> u64 {
    3 * (model_bytes + optimizer_bytes)
}

impl NodeStore {
    pub fn new(node_id: u32, capacity_bytes: u64) -> Self {
        NodeStore {
            node_id,
            capacity_bytes,
            ongoing: Mutex::new(None),
            completed: RwLock::new(None),
        }
    }

    pub fn node_id(&self) -> u32 {
        self.node_id
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    /// Open a new snapshot set. Every shard must be declared up front so
    /// the capacity check happens before any bytes move.
    pub fn begin_snapshot(&self, iteration: u64, manifest: &[ManifestEntry]) -> Result<()> {
        let mut ongoing = self.ongoing.lock().unwrap();
        if ongoing.is_some() {
            return Err(Error::Store(format!(
                "node {}: a snapshot is already in progress",
                self.node_id
            )));
        }
        if manifest.is_empty() {
            return Err(Error::Store(format!("node {}: empty snapshot manifest", self.node_id)));
        }
        let incoming: u64 = manifest.iter().map(|m| m.bytes).sum();
        let held = self
            .completed
            .read()
            .unwrap()
            .as_ref()
            .map(|c| c.total_bytes())
            .unwrap_or(0);
        let needed = incoming + held;
        if needed > self.capacity_bytes {
            return Err(Error::CapacityExceeded { needed, budget: self.capacity_bytes });
        }
        let mut shards = BTreeMap::new();
        for m in manifest {
            if shards
                .insert(m.key, PendingShard {
                    data: vec![0; m.bytes as usize],
                    written: Vec::new(),
                    covered: 0,
                })
                .is_some()
            {
                return Err(Error::Store(format!(
                    "node {}: duplicate manifest entry {}",
                    self.node_id, m.key
                )));
            }
        }
        *ongoing = Some(PendingSet { iteration, shards });
        Ok(())
    }

    /// Write a byte range of a declared shard. Ranges may arrive in any
    /// order but must not overlap or run past the declared length.
    /// Returns true once the shard is fully covered.
    pub fn write_shard(&self, key: &ShardKey, offset: u64, data: &[u8]) -> Result<bool> {
        let mut guard = self.ongoing.lock().unwrap();
        let set = guard
            .as_mut()
            .ok_or_else(|| Error::Store(format!("node {}: no snapshot in progress", self.node_id)))?;
        let shard = set.shards.get_mut(key).ok_or_else(|| {
            Error::Store(format!("node {}: shard {} is not in the manifest", self.node_id, key))
        })?;
        let end = offset + data.len() as u64;
        if end > shard.data.len() as u64 {
            return Err(Error::Store(format!(
                "node {}: write [{}, {}) past the end of {} ({} bytes)",
                self.node_id,
                offset,
                end,
                key,
                shard.data.len()
            )));
        }
        for (lo, hi) in &shard.written {
            if offset < *hi && *lo < end {
                return Err(Error::Store(format!(
                    "node {}: write [{}, {}) overlaps [{}, {}) already written to {}",
                    self.node_id, offset, end, lo, hi, key
                )));
            }
        }
        shard.data[offset as usize..end as usize].copy_from_slice(data);
        shard.written.push((offset, end));
        shard.written.sort_unstable();
        shard.covered += data.len() as u64;
        Ok(shard.complete())
    }

    /// Atomically publish the ongoing set. Fails (leaving both buffers
    /// untouched) unless every declared shard is fully written.
    pub fn commit(&self) -> Result<Arc<CompletedSet>> {
        let mut guard = self.ongoing.lock().unwrap();
        let set = guard
            .as_ref()
            .ok_or_else(|| Error::Store(format!("node {}: no snapshot in progress", self.node_id)))?;
        let incomplete: Vec<String> = set
            .shards
            .iter()
            .filter(|(_, s)| !s.complete())
            .map(|(k, s)| format!("{} ({}/{} bytes)", k, s.covered, s.data.len()))
            .collect();
        if !incomplete.is_empty() {
            return Err(Error::Store(format!(
                "node {}: commit with incomplete shards: {}",
                self.node_id,
                incomplete.join(", ")
            )));
        }
        let set = guard.take().unwrap();
        let completed = Arc::new(CompletedSet {
            iteration: set.iteration,
            shards: set.shards.into_iter().map(|(k, s)| (k, s.data)).collect(),
        });
        *self.completed.write().unwrap() = Some(completed.clone());
        Ok(completed)
    }

    /// Drop the ongoing set (failed or aborted snapshot round).
    pub fn abandon(&self) {
        *self.ongoing.lock().unwrap() = None;
    }

    /// The last committed set, if any. The returned handle stays valid even
    /// if a newer set is committed afterwards.
    pub fn completed(&self) -> Option<Arc<CompletedSet>> {
        self.completed.read().unwrap().clone()
    }

    /// Hardware loss: both buffers are gone.
    pub fn wipe(&self) {
        *self.ongoing.lock().unwrap() = None;
        *self.completed.write().unwrap() = None;
    }

    /// Mirror the committed set to `<root>/<node_id>/`, one file per shard
    /// plus a marker file written last; a reader only trusts the directory
    /// once the marker exists.
    pub fn flush_to_dir(&self, root: &Path) -> Result<u64> {
        let set = self
            .completed()
            .ok_or_else(|| Error::Store(format!("node {}: nothing committed to flush", self.node_id)))?;
        let dir = root.join(self.node_id.to_string());
        let marker = dir.join("iteration");
        if marker.exists() {
            fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut written = 0u64;
        for (key, data) in set.iter() {
            let path = dir.join(format!("{key}.shard"));
            fs::write(&path, data).map_err(|e| Error::io(&path, e))?;
            written += data.len() as u64;
        }
        fs::write(&marker, format!("{}\n", set.iteration)).map_err(|e| Error::io(&marker, e))?;
        Ok(written)
    }
}

/// Read back a node's tmpfs mirror. Returns `Ok(None)` when the directory
/// has no committed set (absent or missing marker).
pub fn load_from_dir(root: &Path, node_id: u32) -> Result<Option<CompletedSet>> {
    let dir = root.join(node_id.to_string());
    let marker = dir.join("iteration");
    if !marker.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&marker).map_err(|e| Error::io(&marker, e))?;
    let iteration: u64 = text
        .trim()
        .parse()
        .map_err(|_| Error::Store(format!("bad iteration marker in {}", marker.display())))?;
    let mut shards = BTreeMap::new();
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix(".shard") else { continue };
        let key = parse_shard_key(stem)
            .ok_or_else(|| Error::Store(format!("unrecognized shard file name {name}")))?;
        let data = fs::read(entry.path()).map_err(|e| Error::io(&entry.path(), e))?;
        shards.insert(key, data);
    }
    Ok(Some(CompletedSet { iteration, shards }))
}

fn parse_shard_key(stem: &str) -> Option<ShardKey> {
    let mut parts = stem.split('-');
    let group_id = parts.next()?.strip_prefix('g')?.parse().ok()?;
    let source_node = parts.next()?.strip_prefix('n')?.parse().ok()?;
    let role = match parts.next()? {
        "model" => ShardRole::Model,
        "opt" => ShardRole::Optimizer,
        "grad" => ShardRole::Gradient,
        "parity" => ShardRole::Parity,
        _ => return None,
    };
    let index = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some(ShardKey { group_id, source_node, role, index })
}

// ---------------------------------------------------------------------------
// Archival checkpoint file
// ---------------------------------------------------------------------------

const NFS_MAGIC: &[u8; 4] = b"RFTC";
const NFS_VERSION: u16 = 1;

/// One record recovered from an archival checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NfsEntry {
    pub key: ShardKey,
    pub iteration: u64,
    pub data: Vec<u8>,
}

/// Parsed archival checkpoint.
#[derive(Debug, Clone)]
pub struct NfsCheckpoint {
    pub topology_digest: u64,
    pub entries: Vec<NfsEntry>,
}

/// Serialize shard payloads into the archival format and atomically place
/// the file at `path` (write-then-rename). Entries are written sorted by
/// key so equal inputs produce byte-identical files.
pub fn write_nfs_checkpoint(
    path: &Path,
    topology_digest: u64,
    entries: &[(ShardKey, u64, &[u8])],
) -> Result<u64> {
    let mut sorted: Vec<&(ShardKey, u64, &[u8])> = entries.iter().collect();
    sorted.sort_by_key(|(k, it, _)| (*k, *it));

    let mut table = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (key, iteration, data) in sorted {
        if key.index != 0 {
            return Err(Error::Store(format!(
                "archive rows carry no sub-index; cannot persist {key}"
            )));
        }
        let offset = blob.len() as u64;
        table.extend_from_slice(&key.group_id.to_le_bytes());
        table.extend_from_slice(&key.source_node.to_le_bytes());
        table.push(key.role.code());
        table.extend_from_slice(&iteration.to_le_bytes());
        table.extend_from_slice(&offset.to_le_bytes());
        table.extend_from_slice(&(data.len() as u64).to_le_bytes());
        table.extend_from_slice(&crc32fast::hash(data).to_le_bytes());
        blob.extend_from_slice(data);
    }

    let mut out = Vec::with_capacity(18 + table.len() + blob.len());
    out.extend_from_slice(NFS_MAGIC);
    out.extend_from_slice(&NFS_VERSION.to_le_bytes());
    out.extend_from_slice(&topology_digest.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&table);
    out.extend_from_slice(&blob);

    let tmp: PathBuf = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(out.len() as u64)
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::CorruptCheckpoint(format!(
            "truncated file: {what} needs {n} bytes, {} left",
            buf.len()
        )));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn take_u32(buf: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4, what)?.try_into().unwrap()))
}

fn take_u64(buf: &mut &[u8], what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(take(buf, 8, what)?.try_into().unwrap()))
}

/// Parse and verify an archival checkpoint. Every payload is checksummed;
/// a mismatch names the offending shard. When `expected_digest` is given,
/// a checkpoint from a different cluster shape is rejected.
pub fn read_nfs_checkpoint(path: &Path, expected_digest: Option<u64>) -> Result<NfsCheckpoint> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let mut buf = raw.as_slice();

    let magic = take(&mut buf, 4, "magic")?;
    if magic != NFS_MAGIC {
        return Err(Error::CorruptCheckpoint(format!(
            "bad magic {:02x?}; not a checkpoint file",
            magic
        )));
    }
    let version = u16::from_le_bytes(take(&mut buf, 2, "version")?.try_into().unwrap());
    if version != NFS_VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported checkpoint version {version} (expected {NFS_VERSION})"
        )));
    }
    let topology_digest = take_u64(&mut buf, "topology digest")?;
    if let Some(want) = expected_digest {
        if topology_digest != want {
            return Err(Error::CorruptCheckpoint(format!(
                "topology digest {topology_digest:#018x} does not match the running cluster {want:#018x}"
            )));
        }
    }
    let count = take_u32(&mut buf, "entry count")? as usize;

    struct Row {
        key: ShardKey,
        iteration: u64,
        offset: u64,
        length: u64,
        crc: u32,
    }
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let what = format!("table row {i}");
        let group_id = take_u32(&mut buf, &what)?;
        let source_node = take_u32(&mut buf, &what)?;
        let role = ShardRole::from_code(take(&mut buf, 1, &what)?[0])?;
        let iteration = take_u64(&mut buf, &what)?;
        let offset = take_u64(&mut buf, &what)?;
        let length = take_u64(&mut buf, &what)?;
        let crc = take_u32(&mut buf, &what)?;
        rows.push(Row {
            key: ShardKey { group_id, source_node, role, index: 0 },
            iteration,
            offset,
            length,
            crc,
        });
    }

    let blob = buf;
    let mut entries = Vec::with_capacity(count);
    for row in rows {
        let lo = row.offset as usize;
        let hi = lo + row.length as usize;
        if hi > blob.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "shard {} points past the end of the file",
                row.key
            )));
        }
        let data = &blob[lo..hi];
        let crc = crc32fast::hash(data);
        if crc != row.crc {
            return Err(Error::ChecksumMismatch(format!(
                "shard {}: stored crc {:#010x}, computed {:#010x}",
                row.key, row.crc, crc
            )));
        }
        entries.push(NfsEntry { key: row.key, iteration: row.iteration, data: data.to_vec() });
    }
    Ok(NfsCheckpoint { topology_digest, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn key(g: u32, n: u32, role: ShardRole) -> ShardKey {
        ShardKey { group_id: g, source_node: n, role, index: 0 }
    }

    fn fill(store: &NodeStore, k: &ShardKey, data: &[u8]) {
        store.write_shard(k, 0, data).unwrap();
    }

    #[test]
    fn commit_swaps_atomically_and_readers_keep_old_sets() {
        let store = NodeStore::new(0, 1 << 20);
        let k = key(0, 0, ShardRole::Model);
        store
            .begin_snapshot(10, &[ManifestEntry { key: k, bytes: 4 }])
            .unwrap();
        fill(&store, &k, &[1, 2, 3, 4]);
        store.commit().unwrap();
        let old = store.completed().unwrap();
        assert_eq!(old.iteration, 10);
        assert_eq!(old.shard(&k).unwrap(), &[1, 2, 3, 4]);

        store
            .begin_snapshot(11, &[ManifestEntry { key: k, bytes: 2 }])
            .unwrap();
        // Mid-write, readers still see iteration 10.
        assert_eq!(store.completed().unwrap().iteration, 10);
        fill(&store, &k, &[9, 9]);
        store.commit().unwrap();
        assert_eq!(store.completed().unwrap().iteration, 11);
        // The handle taken before the second commit still reads set 10.
        assert_eq!(old.shard(&k).unwrap(), &[1, 2, 3, 4]);
    }

    #[test]
    fn out_of_order_ranges_complete_a_shard() {
        let store = NodeStore::new(3, 1 << 20);
        let k = key(1, 3, ShardRole::Model);
        store
            .begin_snapshot(0, &[ManifestEntry { key: k, bytes: 10 }])
            .unwrap();
        assert!(!store.write_shard(&k, 6, &[6, 7, 8, 9]).unwrap());
        assert!(!store.write_shard(&k, 0, &[0, 1, 2]).unwrap());
        assert!(store.write_shard(&k, 3, &[3, 4, 5]).unwrap());
        let set = store.commit().unwrap();
        assert_eq!(set.shard(&k).unwrap(), &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
    }

    #[test]
    fn overlapping_and_oversize_writes_rejected() {
        let store = NodeStore::new(0, 1 << 20);
        let k = key(0, 0, ShardRole::Model);
        store
            .begin_snapshot(0, &[ManifestEntry { key: k, bytes: 8 }])
            .unwrap();
        store.write_shard(&k, 2, &[1, 2, 3]).unwrap();
        assert!(store.write_shard(&k, 4, &[9]).is_err(), "overlap");
        assert!(store.write_shard(&k, 0, &[9, 9, 9]).is_err(), "tail overlap");
        assert!(store.write_shard(&k, 6, &[1, 2, 3]).is_err(), "past end");
        let other = key(0, 1, ShardRole::Model);
        assert!(store.write_shard(&other, 0, &[1]).is_err(), "not in manifest");
        // Commit refuses while bytes are missing.
        assert!(store.commit().is_err());
        store.abandon();
        assert!(store.completed().is_none());
    }

    #[test]
    fn capacity_checked_before_any_write() {
        let store = NodeStore::new(0, 100);
        let k = key(0, 0, ShardRole::Model);
        store
            .begin_snapshot(0, &[ManifestEntry { key: k, bytes: 60 }])
            .unwrap();
        fill(&store, &k, &vec![7u8; 60]);
        store.commit().unwrap();
        // 60 held + 60 incoming > 100.
        match store.begin_snapshot(1, &[ManifestEntry { key: k, bytes: 60 }]) {
            Err(Error::CapacityExceeded { needed, budget }) => {
                assert_eq!(needed, 120);
                assert_eq!(budget, 100);
            }
            other => panic!("expected CapacityExceeded, got {other:?}"),
        }
        // A smaller set fits.
        store
            .begin_snapshot(1, &[ManifestEntry { key: k, bytes: 40 }])
            .unwrap();
    }

    #[test]
    fn double_begin_rejected() {
        let store = NodeStore::new(0, 1000);
        let k = key(0, 0, ShardRole::Model);
        store.begin_snapshot(0, &[ManifestEntry { key: k, bytes: 4 }]).unwrap();
        assert!(store.begin_snapshot(1, &[ManifestEntry { key: k, bytes: 4 }]).is_err());
    }

    #[test]
    fn default_capacity_leaves_room_for_double_buffering() {
        assert_eq!(default_capacity(1000, 500), 4500);
    }

    #[test]
    fn tmpfs_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let store = NodeStore::new(5, 1 << 20);
        let km = key(2, 5, ShardRole::Model);
        let ko = ShardKey { group_id: 2, source_node: 6, role: ShardRole::Parity, index: 1 };
        store
            .begin_snapshot(42, &[
                ManifestEntry { key: km, bytes: 5 },
                ManifestEntry { key: ko, bytes: 3 },
            ])
            .unwrap();
        fill(&store, &km, &[1, 2, 3, 4, 5]);
        fill(&store, &ko, &[7, 8, 9]);
        store.commit().unwrap();
        store.flush_to_dir(dir.path()).unwrap();

        let loaded = load_from_dir(dir.path(), 5).unwrap().unwrap();
        assert_eq!(loaded.iteration, 42);
        assert_eq!(loaded.shard(&km).unwrap(), &[1, 2, 3, 4, 5]);
        assert_eq!(loaded.shard(&ko).unwrap(), &[7, 8, 9]);
        assert!(load_from_dir(dir.path(), 9).unwrap().is_none());
    }

    #[test]
    fn wipe_clears_everything() {
        let store = NodeStore::new(0, 1000);
        let k = key(0, 0, ShardRole::Model);
        store.begin_snapshot(0, &[ManifestEntry { key: k, bytes: 1 }]).unwrap();
        fill(&store, &k, &[1]);
        store.commit().unwrap();
        store.wipe();
        assert!(store.completed().is_none());
    }

    #[test]
    fn archive_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.rftc");
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let payloads: Vec<(ShardKey, u64, Vec<u8>)> = (0..6)
            .map(|i| {
                let data: Vec<u8> = (0..rng.gen_range(1..200)).map(|_| rng.gen()).collect();
                (
                    ShardKey {
                        group_id: i / 2,
                        source_node: i,
                        role: if i % 2 == 0 { ShardRole::Model } else { ShardRole::Optimizer },
                        index: 0,
                    },
                    77,
                    data,
                )
            })
            .collect();
        let refs: Vec<(ShardKey, u64, &[u8])> =
            payloads.iter().map(|(k, it, d)| (*k, *it, d.as_slice())).collect();
        write_nfs_checkpoint(&path, 0xDEAD_BEEF, &refs).unwrap();

        let ck = read_nfs_checkpoint(&path, Some(0xDEAD_BEEF)).unwrap();
        assert_eq!(ck.topology_digest, 0xDEAD_BEEF);
        assert_eq!(ck.entries.len(), 6);
        for e in &ck.entries {
            let orig = payloads.iter().find(|(k, _, _)| *k == e.key).unwrap();
            assert_eq!(e.data, orig.2);
            assert_eq!(e.iteration, 77);
        }
        // Equal input writes byte-identical files.
        let path2 = dir.path().join("ckpt2.rftc");
        write_nfs_checkpoint(&path2, 0xDEAD_BEEF, &refs).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn archive_rejects_corruption_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.rftc");
        let k = key(1, 2, ShardRole::Model);
        write_nfs_checkpoint(&path, 1, &[(k, 5, &[1, 2, 3, 4])]).unwrap();

        // Flip one payload byte (the last byte of the file).
        let mut raw = std::fs::read(&path).unwrap();
        let n = raw.len();
        raw[n - 1] ^= 0xff;
        std::fs::write(&path, &raw).unwrap();
        match read_nfs_checkpoint(&path, None) {
            Err(Error::ChecksumMismatch(msg)) => {
                assert!(msg.contains("g1-n2-model"), "shard named in error: {msg}")
            }
            other => panic!("expected ChecksumMismatch, got {other:?}"),
        }

        // Wrong topology digest.
        write_nfs_checkpoint(&path, 1, &[(k, 5, &[1, 2, 3, 4])]).unwrap();
        assert!(read_nfs_checkpoint(&path, Some(2)).is_err());

        // Wrong magic.
        let mut raw = std::fs::read(&path).unwrap();
        raw[0] = b'X';
        std::fs::write(&path, &raw).unwrap();
        assert!(read_nfs_checkpoint(&path, None).is_err());
    }

    #[test]
    fn truncated_archives_error_at_every_crash_point() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.rftc");
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let data: Vec<u8> = (0..300).map(|_| rng.gen()).collect();
        let entries = [
            (key(0, 0, ShardRole::Model), 3, &data[..150]),
            (key(0, 1, ShardRole::Model), 3, &data[150..]),
        ];
        write_nfs_checkpoint(&path, 9, &entries).unwrap();
        let full = std::fs::read(&path).unwrap();
        let cut = path.with_file_name("cut.rftc");
        for _ in 0..100 {
            let n = rng.gen_range(0..full.len());
            std::fs::write(&cut, &full[..n]).unwrap();
            assert!(
                read_nfs_checkpoint(&cut, Some(9)).is_err(),
                "a {n}-byte prefix of a {}-byte file must not parse",
                full.len()
            );
        }
        // The untouched file still reads fine afterwards.
        assert!(read_nfs_checkpoint(&path, Some(9)).is_ok());
    }
}
