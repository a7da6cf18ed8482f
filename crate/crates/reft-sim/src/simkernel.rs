//! Deterministic discrete-event execution of pipeline schedules and
//! snapshot plans.
//!
//! Each node exposes three serial streams: COMPUTE (forward/backward
//! kernels), D2H (the PCIe copy channel snapshots ride on), and NETWORK
//! (training communication). Snapshot chunks queue on D2H and are anchored
//! to the schedule window the planner chose for them; a chunk that starts
//! while the anchored stream is mid-op slows that op down by the configured
//! interference coefficient times the chunk duration. Everything is ordered
//! by (time, node, stream, insertion sequence), so a run is a pure function
//! of its inputs.
//!
//! Iterations are separated by a global barrier: every stage's ops and every
//! non-spill chunk of the iteration must finish before the next iteration
//! launches. Spill chunks (bytes the planner could not fit into one
//! iteration) keep streaming across barriers and only delay snapshot commit,
//! never compute.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use crate::error::{Error, Result};
use crate::failure::{self, FailureEvent, FailureKind, SignalEvent, SignalState};
use crate::has::{Anchor, HasParams, Layer, SnapshotPlan};
use crate::pipeline::{OpKind, StageSchedule};
use crate::topology::{ShardingGroup, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    Compute = 0,
    D2h = 1,
    Network = 2,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Compute => "COMPUTE",
            Stream::D2h => "D2H",
            Stream::Network => "NETWORK",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Fwd,
    Bwd,
    SnapshotChunk,
    Comm,
    Failure,
    Signal,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Fwd => "FWD",
            EventKind::Bwd => "BWD",
            EventKind::SnapshotChunk => "SNAPSHOT_CHUNK",
            EventKind::Comm => "COMM",
            EventKind::Failure => "FAILURE",
            EventKind::Signal => "SIGNAL",
        }
    }
}

/// Extra context attached to trace rows; not part of the CSV export.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    None,
    Microbatch(u32),
    Chunk { layer: Layer, round: u32 },
    Signal { to: SignalState },
    Failure(FailureKind),
}

/// One completed activity in the replayable trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub time: f64,
    pub node_id: u32,
    pub stream: Stream,
    pub kind: EventKind,
    pub duration: f64,
    pub bytes: u64,
    pub payload: Payload,
}

/// Timing summary of one completed iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub iteration: u32,
    pub t_iter: f64,
    /// Snapshot overhead vs. a baseline run; filled by the overhead
    /// comparison, zero straight out of the simulator.
    pub o_inmem: f64,
    /// Chunk bytes completed during the iteration, per layer (1, 2, 3 —
    /// spill bytes count toward the layer they were demoted from, i.e. none).
    pub bytes_snapshotted_by_layer: [u64; 3],
    /// Barrier wait beyond the last compute op (blocking snapshot chunks).
    pub stalls: f64,
}

/// Run-level happenings: failures, recoveries, snapshot round lifecycle.
#[derive(Debug, Clone, PartialEq)]
pub enum RunEvent {
    Failure { time: f64, node_id: u32, kind: FailureKind },
    Recovery {
        time: f64,
        in_memory: bool,
        t_load_s: f64,
        recompute_s: f64,
        resume_iteration: u32,
    },
    RoundCommitted { time: f64, round: u32, iteration: u32 },
    RoundSkipped { iteration: u32 },
    NfsCheckpoint { round: u32, iteration: u32, available_at: f64 },
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub iterations: Vec<IterationMetrics>,
    pub trace: Vec<TraceEvent>,
    pub run_events: Vec<RunEvent>,
    /// Fingerprint of topology + schedule + duration + failure script; two
    /// results are comparable for overhead only when digests match.
    pub config_digest: u64,
    pub total_wall_s: f64,
}

/// Per-group recovery capability, precomputed by the caller from the
/// protection configuration (see the recovery module).
#[derive(Debug, Clone)]
pub struct RecoveryModel {
    pub groups: Vec<ShardingGroup>,
    /// Simultaneous hardware losses each group survives in memory.
    pub per_group_tolerance: Vec<u32>,
    /// Wall seconds to restore from peer memory.
    pub inmem_load_s: f64,
    /// Wall seconds to restore from the archival checkpoint.
    pub nfs_load_s: f64,
}

/// Knobs for one simulation run.
#[derive(Debug, Clone)]
pub struct RunParams {
    pub has: HasParams,
    /// Iterations between snapshot round launches (≥ 1).
    pub snapshot_interval: u32,
    /// Every how many committed rounds an archival checkpoint is written
    /// (0 = never).
    pub nfs_every_rounds: u32,
    /// Seconds for a committed round to become durable on the archive.
    pub nfs_write_s: f64,
    /// Required when the failure script is non-empty.
    pub recovery: Option<RecoveryModel>,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            has: HasParams::default(),
            snapshot_interval: 1,
            nfs_every_rounds: 0,
            nfs_write_s: 0.0,
            recovery: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Engine internals
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum Action {
    ComputeDone { dp: u32, stage: u32, op: u32, gen: u32 },
    CommDone { dp: u32, stage: u32, op: u32, gen: u32 },
    ChunkStart { node: u32 },
    ChunkDone { node: u32, gen: u32 },
    Failure { script_idx: u32 },
    Resume,
}

#[derive(Debug, Clone, Copy)]
struct Ev {
    time: f64,
    node: u32,
    stream: Stream,
    seq: u64,
    epoch: u32,
    action: Action,
}

impl PartialEq for Ev {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ev {}
impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ev {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.node.cmp(&other.node))
            .then(self.stream.cmp(&other.stream))
            .then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Pending,
    Compute,
    Comm,
    Done,
}

#[derive(Debug, Clone)]
struct OpInst {
    kind: OpKind,
    mb: u32,
    compute_dur: f64,
    comm_dur: f64,
    phase: Phase,
    start: f64,
    compute_end: f64,
    comm_end: f64,
    gen: u32,
}

#[derive(Debug, Clone, Default)]
struct StageRun {
    ops: Vec<OpInst>,
    dispatched: usize,
    done: usize,
    current: Option<usize>,
}

#[derive(Debug, Clone)]
struct ChunkTask {
    bytes: u64,
    dur: f64,
    layer: Layer,
    anchor: Anchor,
    round: u32,
    blocking: bool,
    ready: Option<f64>,
}

#[derive(Debug, Clone)]
struct RunningChunk {
    task: ChunkTask,
    start: f64,
}

#[derive(Debug, Default)]
struct D2hState {
    queue: VecDeque<ChunkTask>,
    current: Option<RunningChunk>,
    last_end: f64,
    gen: u32,
}

#[derive(Debug, Clone)]
struct RoundState {
    round: u32,
    iteration: u32,
    outstanding: Vec<u32>,
    participants: u32,
    committed: u32,
    commit_time: f64,
    aborted: bool,
}

#[derive(Debug, Clone, Copy)]
struct NfsCkpt {
    iteration: u32,
    commit_time: f64,
    available_at: f64,
}

struct IterCtx {
    logical: u32,
    start: f64,
    ops_remaining: usize,
    blocking_remaining: usize,
    max_op_end: f64,
    max_blocking_end: f64,
    layer_bytes: [u64; 3],
}

struct Engine<'a> {
    topo: &'a Topology,
    schedules: Vec<&'a StageSchedule>,
    plans: Vec<Option<&'a SnapshotPlan>>,
    script: &'a [FailureEvent],
    params: &'a RunParams,
    duration: u32,

    queue: BinaryHeap<std::cmp::Reverse<Ev>>,
    seq: u64,
    epoch: u32,
    clock: f64,

    comm_fraction: f64,
    fwd_pos: Vec<Vec<usize>>,
    bwd_pos: Vec<Vec<usize>>,
    runs: Vec<Vec<StageRun>>,
    replica_nodes: Vec<Vec<Vec<u32>>>,
    node_replica: Vec<(u32, u32)>,

    d2h: Vec<D2hState>,
    signals: Vec<SignalState>,
    node_completed_round: Vec<Option<u32>>,
    rounds: Vec<RoundState>,
    round_counter: u32,
    nfs_ckpts: Vec<NfsCkpt>,
    snapshot_nodes: u32,

    down_hw: Vec<bool>,
    down_sw: Vec<bool>,
    recovering_until: Option<f64>,
    resume_iteration: u32,
    last_global_commit: Option<(u32, u32, f64)>,

    iter: IterCtx,
    completed_rows: u32,

    trace: Vec<TraceEvent>,
    metrics: Vec<IterationMetrics>,
    run_events: Vec<RunEvent>,
}

const ALWAYS_VALID: u32 = u32::MAX;

impl<'a> Engine<'a> {
    fn push(&mut self, time: f64, node: u32, stream: Stream, epoch: u32, action: Action) {
        let ev = Ev { time, node, stream, seq: self.seq, epoch, action };
        self.seq += 1;
        self.queue.push(std::cmp::Reverse(ev));
    }

    fn emit(&mut self, time: f64, node_id: u32, stream: Stream, kind: EventKind, duration: f64, bytes: u64, payload: Payload) {
        self.trace.push(TraceEvent { time, node_id, stream, kind, duration, bytes, payload });
    }

    fn signal(&mut self, time: f64, node: u32, event: SignalEvent) {
        let cur = self.signals[node as usize];
        let next = failure::transition(cur, event)
            .expect("simulator drove an illegal signal transition");
        if next != cur {
            self.signals[node as usize] = next;
            self.emit(time, node, Stream::Compute, EventKind::Signal, 0.0, 0, Payload::Signal { to: next });
        }
    }

    // -- iteration lifecycle -------------------------------------------------

    fn launch_iteration(&mut self, logical: u32, start: f64) {
        let spec = &self.topo.spec;
        let gamma = if self.params.has.separate_interconnect { self.comm_fraction } else { 0.0 };
        let mut total_ops = 0usize;
        for dp in 0..spec.dp_size {
            for stage in 0..spec.pp_size {
                let sched = self.schedules[stage as usize];
                let ops: Vec<OpInst> = sched
                    .microbatch_ops
                    .iter()
                    .map(|o| {
                        let comm = o.duration * gamma;
                        OpInst {
                            kind: o.kind,
                            mb: o.microbatch,
                            compute_dur: o.duration - comm,
                            comm_dur: comm,
                            phase: Phase::Pending,
                            start: 0.0,
                            compute_end: 0.0,
                            comm_end: 0.0,
                            gen: 0,
                        }
                    })
                    .collect();
                total_ops += ops.len();
                self.runs[dp as usize][stage as usize] =
                    StageRun { ops, dispatched: 0, done: 0, current: None };
            }
        }
        self.iter = IterCtx {
            logical,
            start,
            ops_remaining: total_ops,
            blocking_remaining: 0,
            max_op_end: start,
            max_blocking_end: start,
            layer_bytes: [0; 3],
        };

        // Iteration boundary signals: committed snapshots go back to healthy.
        for n in 0..self.topo.nodes.len() as u32 {
            if self.signals[n as usize] == SignalState::Completed {
                self.signal(start, n, SignalEvent::IterationBoundary);
            }
        }

        // Launch a snapshot round if one is due and the previous round has
        // fully drained everywhere (all-or-nothing so rounds stay aligned).
        if self.snapshot_nodes > 0 && logical % self.params.snapshot_interval == 0 {
            let drained = (0..self.topo.nodes.len())
                .all(|n| self.d2h[n].queue.is_empty() && self.d2h[n].current.is_none());
            if drained {
                self.launch_round(logical, start);
            } else {
                self.run_events.push(RunEvent::RoundSkipped { iteration: logical });
            }
        }

        // Kick off dependency-free ops.
        for dp in 0..spec.dp_size {
            for stage in 0..spec.pp_size {
                self.try_dispatch_op(dp, stage, start);
            }
        }
    }

    fn launch_round(&mut self, logical: u32, start: f64) {
        let round = self.round_counter;
        self.round_counter += 1;
        let mut outstanding = vec![0u32; self.topo.nodes.len()];
        let mut participants = 0u32;
        let b_io = self.topo.spec.d2h_bandwidth;
        let mut tasks: Vec<(usize, ChunkTask)> = Vec::new();
        for (n, plan) in self.plans.iter().enumerate() {
            let Some(plan) = plan else { continue };
            if plan.shard_bytes == 0 {
                continue;
            }
            participants += 1;
            for placement in &plan.placements {
                let mut left = placement.bytes;
                while left > 0 {
                    let bytes = left.min(plan.chunk_bytes);
                    left -= bytes;
                    let blocking = placement.layer != Layer::Spill;
                    let ready = match placement.anchor {
                        Anchor::BubbleAfter(None) | Anchor::Free => Some(start),
                        Anchor::Absolute(off) => Some(start + off),
                        _ => None,
                    };
                    tasks.push((n, ChunkTask {
                        bytes,
                        dur: bytes as f64 / b_io,
                        layer: placement.layer,
                        anchor: placement.anchor,
                        round,
                        blocking,
                        ready,
                    }));
                }
            }
        }
        let mut participated = vec![false; self.topo.nodes.len()];
        for (n, task) in tasks {
            if task.blocking {
                self.iter.blocking_remaining += 1;
            }
            outstanding[n] += 1;
            participated[n] = true;
            self.d2h[n].queue.push_back(task);
        }
        for (n, p) in participated.iter().enumerate() {
            if *p {
                self.signal(start, n as u32, SignalEvent::SnapStart);
            }
        }
        self.rounds.push(RoundState {
            round,
            iteration: logical,
            outstanding,
            participants,
            committed: 0,
            commit_time: start,
            aborted: false,
        });
        for n in 0..self.topo.nodes.len() as u32 {
            self.try_dispatch_chunk(n, start);
        }
    }

    fn finish_iteration(&mut self) {
        let barrier = self.iter.max_op_end.max(self.iter.max_blocking_end);
        let t_iter = barrier - self.iter.start;
        let stalls = barrier - self.iter.max_op_end;
        self.metrics.push(IterationMetrics {
            iteration: self.iter.logical,
            t_iter,
            o_inmem: 0.0,
            bytes_snapshotted_by_layer: self.iter.layer_bytes,
            stalls,
        });
        self.completed_rows += 1;
        self.clock = barrier;
        if self.completed_rows < self.duration {
            let next = self.iter.logical + 1;
            self.launch_iteration(next, barrier);
        }
    }

    fn check_iteration_complete(&mut self) {
        if self.iter.ops_remaining == 0 && self.iter.blocking_remaining == 0 {
            self.finish_iteration();
        }
    }

    // -- compute ops ---------------------------------------------------------

    fn try_dispatch_op(&mut self, dp: u32, stage: u32, now: f64) {
        let spec = &self.topo.spec;
        let (kind, mb, i) = {
            let sr = &self.runs[dp as usize][stage as usize];
            if sr.current.is_some() || sr.dispatched >= sr.ops.len() || sr.dispatched != sr.done {
                return;
            }
            let op = &sr.ops[sr.dispatched];
            (op.kind, op.mb, sr.dispatched)
        };
        let dep_done = match kind {
            OpKind::Fwd if stage > 0 => {
                let j = self.fwd_pos[(stage - 1) as usize][mb as usize];
                self.runs[dp as usize][(stage - 1) as usize].ops[j].phase == Phase::Done
            }
            OpKind::Bwd if stage + 1 < spec.pp_size => {
                let j = self.bwd_pos[(stage + 1) as usize][mb as usize];
                self.runs[dp as usize][(stage + 1) as usize].ops[j].phase == Phase::Done
            }
            _ => true,
        };
        if !dep_done {
            return;
        }
        let rep_node = self.replica_nodes[dp as usize][stage as usize][0];
        let (compute_end, gen) = {
            let sr = &mut self.runs[dp as usize][stage as usize];
            let op = &mut sr.ops[i];
            op.phase = Phase::Compute;
            op.start = now;
            op.compute_end = now + op.compute_dur;
            op.comm_end = op.compute_end + op.comm_dur;
            sr.current = Some(i);
            sr.dispatched += 1;
            (op.compute_end, op.gen)
        };
        self.push(compute_end, rep_node, Stream::Compute, self.epoch, Action::ComputeDone {
            dp,
            stage,
            op: i as u32,
            gen,
        });
        // Chunks anchored to this op's compute span may start now.
        let nodes = self.replica_nodes[dp as usize][stage as usize].clone();
        for n in nodes {
            self.resolve_anchor(n, Anchor::OpCompute(i), now);
            self.try_dispatch_chunk(n, now);
        }
    }

    fn on_compute_done(&mut self, dp: u32, stage: u32, i: usize, gen: u32, now: f64) {
        let (valid, has_comm, comm_end, cur_gen) = {
            let op = &self.runs[dp as usize][stage as usize].ops[i];
            (op.phase == Phase::Compute && op.gen == gen, op.comm_dur > 0.0, op.comm_end, op.gen)
        };
        if !valid {
            return;
        }
        if has_comm {
            self.runs[dp as usize][stage as usize].ops[i].phase = Phase::Comm;
            let rep_node = self.replica_nodes[dp as usize][stage as usize][0];
            self.push(comm_end, rep_node, Stream::Network, self.epoch, Action::CommDone {
                dp,
                stage,
                op: i as u32,
                gen: cur_gen,
            });
            let nodes = self.replica_nodes[dp as usize][stage as usize].clone();
            for n in nodes {
                self.resolve_anchor(n, Anchor::OpComm(i), now);
                self.try_dispatch_chunk(n, now);
            }
        } else {
            self.on_op_finished(dp, stage, i, now);
        }
    }

    fn on_comm_done(&mut self, dp: u32, stage: u32, i: usize, gen: u32, now: f64) {
        let valid = {
            let op = &self.runs[dp as usize][stage as usize].ops[i];
            op.phase == Phase::Comm && op.gen == gen
        };
        if valid {
            self.on_op_finished(dp, stage, i, now);
        }
    }

    fn on_op_finished(&mut self, dp: u32, stage: u32, i: usize, now: f64) {
        let (kind, mb, start, compute_end, comm_end) = {
            let sr = &mut self.runs[dp as usize][stage as usize];
            let op = &mut sr.ops[i];
            op.phase = Phase::Done;
            sr.current = None;
            sr.done += 1;
            (op.kind, op.mb, op.start, op.compute_end, op.comm_end)
        };
        self.iter.ops_remaining -= 1;
        self.iter.max_op_end = self.iter.max_op_end.max(comm_end);

        let trace_kind = match kind {
            OpKind::Fwd => EventKind::Fwd,
            OpKind::Bwd => EventKind::Bwd,
        };
        let nodes = self.replica_nodes[dp as usize][stage as usize].clone();
        for &n in &nodes {
            self.emit(start, n, Stream::Compute, trace_kind, compute_end - start, 0, Payload::Microbatch(mb));
            if comm_end > compute_end {
                self.emit(compute_end, n, Stream::Network, EventKind::Comm, comm_end - compute_end, 0, Payload::Microbatch(mb));
            }
        }
        for n in nodes {
            self.resolve_anchor(n, Anchor::BubbleAfter(Some(i)), comm_end);
            self.try_dispatch_chunk(n, now);
        }

        self.try_dispatch_op(dp, stage, now);
        match kind {
            OpKind::Fwd if stage + 1 < self.topo.spec.pp_size => {
                self.try_dispatch_op(dp, stage + 1, now)
            }
            OpKind::Bwd if stage > 0 => self.try_dispatch_op(dp, stage - 1, now),
            _ => {}
        }
        self.check_iteration_complete();
    }

    // -- snapshot chunks -----------------------------------------------------

    fn resolve_anchor(&mut self, node: u32, anchor: Anchor, time: f64) {
        for task in self.d2h[node as usize].queue.iter_mut() {
            if task.ready.is_none() && task.anchor == anchor {
                task.ready = Some(time);
            }
        }
    }

    fn try_dispatch_chunk(&mut self, node: u32, now: f64) {
        let d2h = &self.d2h[node as usize];
        if d2h.current.is_some() {
            return;
        }
        let Some(front) = d2h.queue.front() else { return };
        let Some(ready) = front.ready else { return };
        let start = ready.max(d2h.last_end).max(now);
        if start > now {
            self.push(start, node, Stream::D2h, self.epoch, Action::ChunkStart { node });
        } else {
            self.start_chunk(node, now);
        }
    }

    fn start_chunk(&mut self, node: u32, now: f64) {
        let d2h = &mut self.d2h[node as usize];
        if d2h.current.is_some() {
            return;
        }
        let Some(front) = d2h.queue.front() else { return };
        match front.ready {
            Some(r) if r.max(d2h.last_end) <= now => {}
            _ => return,
        }
        let task = d2h.queue.pop_front().unwrap();
        let gen = d2h.gen;
        let dur = task.dur;
        self.push(now + dur, node, Stream::D2h, self.epoch, Action::ChunkDone { node, gen });
        self.d2h[node as usize].current = Some(RunningChunk { task, start: now });
        self.apply_interference(node, dur, now);
    }

    /// Charge the slowdown of a chunk to whatever op is active on the node's
    /// replica right now. A chunk that starts exactly on a phase boundary
    /// rides the idle side and charges nothing.
    fn apply_interference(&mut self, node: u32, chunk_dur: f64, now: f64) {
        let (dp, stage) = self.node_replica[node as usize];
        let Some(i) = self.runs[dp as usize][stage as usize].current else { return };
        let rep_node = self.replica_nodes[dp as usize][stage as usize][0];
        let alpha2 = self.params.has.alpha_compute;
        let alpha3 = self.params.has.alpha_network;
        let op = &mut self.runs[dp as usize][stage as usize].ops[i];
        match op.phase {
            Phase::Compute if alpha2 > 0.0 && now < op.compute_end => {
                let x = alpha2 * chunk_dur;
                op.compute_end += x;
                op.comm_end += x;
                op.gen += 1;
                let (t, g) = (op.compute_end, op.gen);
                self.push(t, rep_node, Stream::Compute, self.epoch, Action::ComputeDone {
                    dp,
                    stage,
                    op: i as u32,
                    gen: g,
                });
            }
            Phase::Comm if alpha3 > 0.0 && now < op.comm_end => {
                let x = alpha3 * chunk_dur;
                op.comm_end += x;
                op.gen += 1;
                let (t, g) = (op.comm_end, op.gen);
                self.push(t, rep_node, Stream::Network, self.epoch, Action::CommDone {
                    dp,
                    stage,
                    op: i as u32,
                    gen: g,
                });
            }
            _ => {}
        }
    }

    fn on_chunk_done(&mut self, node: u32, gen: u32, now: f64) {
        if self.d2h[node as usize].gen != gen {
            return;
        }
        let Some(running) = self.d2h[node as usize].current.take() else { return };
        self.d2h[node as usize].last_end = now;
        let task = running.task;
        self.emit(
            running.start,
            node,
            Stream::D2h,
            EventKind::SnapshotChunk,
            task.dur,
            task.bytes,
            Payload::Chunk { layer: task.layer, round: task.round },
        );
        match task.layer {
            Layer::L1 => self.iter.layer_bytes[0] += task.bytes,
            Layer::L2 => self.iter.layer_bytes[1] += task.bytes,
            Layer::L3 => self.iter.layer_bytes[2] += task.bytes,
            Layer::Spill => {}
        }
        if task.blocking {
            self.iter.blocking_remaining -= 1;
            self.iter.max_blocking_end = self.iter.max_blocking_end.max(now);
        }

        // Round bookkeeping: node commit, then possibly global commit.
        let ridx = self.rounds.iter().position(|r| r.round == task.round).unwrap();
        {
            let r = &mut self.rounds[ridx];
            if !r.aborted {
                r.outstanding[node as usize] -= 1;
                if r.outstanding[node as usize] == 0 {
                    r.committed += 1;
                    r.commit_time = r.commit_time.max(now);
                    self.node_completed_round[node as usize] = Some(task.round);
                }
            }
        }
        let r = self.rounds[ridx].clone();
        if !r.aborted && r.outstanding[node as usize] == 0 {
            self.signal(now, node, SignalEvent::AllShardsComplete);
        }
        if !r.aborted && r.committed == r.participants && r.participants > 0 {
            // Only record the global commit once.
            if self
                .last_global_commit
                .map(|(round, _, _)| round != r.round)
                .unwrap_or(true)
            {
                self.last_global_commit = Some((r.round, r.iteration, r.commit_time));
                self.run_events.push(RunEvent::RoundCommitted {
                    time: r.commit_time,
                    round: r.round,
                    iteration: r.iteration,
                });
                if self.params.nfs_every_rounds > 0 && r.round % self.params.nfs_every_rounds == 0 {
                    let ck = NfsCkpt {
                        iteration: r.iteration,
                        commit_time: r.commit_time,
                        available_at: r.commit_time + self.params.nfs_write_s,
                    };
                    self.nfs_ckpts.push(ck);
                    self.run_events.push(RunEvent::NfsCheckpoint {
                        round: r.round,
                        iteration: r.iteration,
                        available_at: ck.available_at,
                    });
                }
            }
        }

        self.try_dispatch_chunk(node, now);
        self.check_iteration_complete();
    }

    // -- failures ------------------------------------------------------------

    fn on_failure(&mut self, idx: usize, now: f64) {
        if self.completed_rows >= self.duration {
            return;
        }
        let ev = self.script[idx];
        let node = ev.node_id;
        self.run_events.push(RunEvent::Failure { time: now, node_id: node, kind: ev.kind });
        self.emit(now, node, Stream::Compute, EventKind::Failure, 0.0, 0, Payload::Failure(ev.kind));
        match ev.kind {
            FailureKind::Hardware => {
                self.down_hw[node as usize] = true;
                // Host buffers are gone with the node.
                self.node_completed_round[node as usize] = None;
                self.signal(now, node, SignalEvent::HardwareFailure);
            }
            FailureKind::Software => {
                self.down_sw[node as usize] = true;
                self.signal(now, node, SignalEvent::SoftwareFailure);
            }
        }

        let already_recovering = self.recovering_until.is_some();
        if !already_recovering {
            // Abort the in-flight iteration and any uncommitted rounds.
            self.epoch += 1;
            for r in self.rounds.iter_mut() {
                let globally_committed = self
                    .last_global_commit
                    .map(|(round, _, _)| round == r.round)
                    .unwrap_or(false);
                if !globally_committed {
                    r.aborted = true;
                }
            }
            for d2h in self.d2h.iter_mut() {
                d2h.queue.clear();
                d2h.current = None;
                d2h.gen += 1;
                d2h.last_end = now;
            }
            for n in 0..self.topo.nodes.len() as u32 {
                self.signal(now, n, SignalEvent::RecoveryStart);
            }
        } else {
            // Cascading failure during recovery: the node joins the down set
            // and the outcome is re-evaluated below.
            self.signal(now, node, SignalEvent::RecoveryStart);
        }

        let model = self.params.recovery.as_ref().expect("failure script requires a recovery model");
        let mut in_memory = self.last_global_commit.is_some();
        if in_memory {
            for (g, group) in model.groups.iter().enumerate() {
                let offline = group
                    .members
                    .iter()
                    .filter(|m| self.down_hw[**m as usize])
                    .count() as u32;
                if offline > model.per_group_tolerance[g] {
                    in_memory = false;
                    break;
                }
            }
        }

        let (t_load, resume_iteration, recompute) = if in_memory {
            let (_, iter, commit) = self.last_global_commit.unwrap();
            (model.inmem_load_s, iter, now - commit)
        } else {
            let best = self
                .nfs_ckpts
                .iter()
                .filter(|c| c.available_at <= now)
                .last()
                .copied();
            match best {
                Some(c) => (model.nfs_load_s, c.iteration, now - c.commit_time),
                None => (0.0, 0, now),
            }
        };
        let end = now + t_load;
        let end = match self.recovering_until {
            Some(prev) => prev.max(end),
            None => end,
        };
        self.recovering_until = Some(end);
        self.resume_iteration = resume_iteration;
        self.run_events.push(RunEvent::Recovery {
            time: now,
            in_memory,
            t_load_s: t_load,
            recompute_s: recompute,
            resume_iteration,
        });
        // Replace any pending resume with the extended one.
        self.epoch += 1;
        self.push(end, u32::MAX, Stream::Compute, self.epoch, Action::Resume);

        // Record the eventual signal path for util nodes at resume time.
        if !in_memory {
            for n in 0..self.topo.nodes.len() as u32 {
                self.signal(now, n, SignalEvent::BeyondTolerance);
            }
        }
    }

    fn on_resume(&mut self, now: f64) {
        let in_nfs = self.signals.iter().any(|s| *s == SignalState::NfsRestart);
        for n in 0..self.topo.nodes.len() as u32 {
            let ev = if in_nfs { SignalEvent::NfsReloadDone } else { SignalEvent::RecoverySuccess };
            self.signal(now, n, ev);
        }
        for n in 0..self.topo.nodes.len() {
            self.down_hw[n] = false;
            self.down_sw[n] = false;
        }
        self.recovering_until = None;
        if in_nfs {
            // Memory state restarts from the archive; committed rounds in
            // host memory are no longer meaningful restore points.
            self.last_global_commit = None;
            for r in self.node_completed_round.iter_mut() {
                *r = None;
            }
        }
        self.clock = now;
        self.launch_iteration(self.resume_iteration, now);
    }

    // -- main loop -----------------------------------------------------------

    fn run(&mut self) -> Result<()> {
        self.launch_iteration(0, 0.0);
        for (i, f) in self.script.iter().enumerate() {
            self.push(f.time_s, f.node_id, Stream::Compute, ALWAYS_VALID, Action::Failure {
                script_idx: i as u32,
            });
        }
        while let Some(std::cmp::Reverse(ev)) = self.queue.pop() {
            if self.completed_rows >= self.duration {
                break;
            }
            debug_assert!(ev.time >= self.clock - 1e-9, "event time went backwards");
            self.clock = self.clock.max(ev.time);
            let valid = ev.epoch == ALWAYS_VALID || ev.epoch == self.epoch;
            if !valid {
                continue;
            }
            match ev.action {
                Action::ComputeDone { dp, stage, op, gen } => {
                    self.on_compute_done(dp, stage, op as usize, gen, ev.time)
                }
                Action::CommDone { dp, stage, op, gen } => {
                    self.on_comm_done(dp, stage, op as usize, gen, ev.time)
                }
                Action::ChunkStart { node } => self.start_chunk(node, ev.time),
                Action::ChunkDone { node, gen } => self.on_chunk_done(node, gen, ev.time),
                Action::Failure { script_idx } => self.on_failure(script_idx as usize, ev.time),
                Action::Resume => self.on_resume(ev.time),
            }
        }
        if self.completed_rows < self.duration {
            return Err(Error::Schedule(format!(
                "simulation stalled after {} of {} iterations",
                self.completed_rows, self.duration
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

fn fnv1a(data: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in data.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1_0000_0000_01b3);
    }
    h
}

fn config_digest(
    topology: &Topology,
    schedules: &[StageSchedule],
    script: &[FailureEvent],
    duration: u32,
    params: &RunParams,
) -> u64 {
    let mut s = String::new();
    let spec = &topology.spec;
    s.push_str(&format!(
        "dp={} pp={} tp={} g={} bio={:e} net={:e} nfs={:e} mb={} z={};",
        spec.dp_size,
        spec.pp_size,
        spec.tp_size,
        spec.gpus_per_node,
        spec.d2h_bandwidth,
        spec.internode_bandwidth,
        spec.nfs_bandwidth,
        spec.num_microbatches,
        spec.zero1_enabled
    ));
    for c in &spec.microbatch_compute_time {
        s.push_str(&format!("{c:e},"));
    }
    for sched in schedules {
        s.push_str(&format!("|{}:{:e}", sched.pp_stage, sched.iteration_span));
        for op in &sched.microbatch_ops {
            s.push_str(&format!("{:?}{}@{:e}+{:e};", op.kind, op.microbatch, op.start, op.duration));
        }
    }
    for f in script {
        s.push_str(&format!("F{}@{:e}{:?};", f.node_id, f.time_s, f.kind));
    }
    s.push_str(&format!("d={duration} si={}", params.snapshot_interval));
    fnv1a(&s)
}

/// Execute `duration_iterations` of the schedule with the given snapshot
/// plans and scripted failures. Pass an empty plan list for a baseline run.
pub fn run_simulation(
    topology: &Topology,
    schedules: &[StageSchedule],
    snapshot_plans: &[SnapshotPlan],
    failure_script: &[FailureEvent],
    duration_iterations: u32,
    params: &RunParams,
) -> Result<SimResult> {
    let spec = &topology.spec;
    spec.validate()?;
    if duration_iterations == 0 {
        return Err(Error::Schedule("duration must be at least one iteration".into()));
    }
    if params.snapshot_interval == 0 {
        return Err(Error::Schedule("snapshot_interval must be >= 1".into()));
    }
    let mut by_stage: Vec<Option<&StageSchedule>> = vec![None; spec.pp_size as usize];
    for s in schedules {
        if (s.pp_stage as usize) < by_stage.len() {
            by_stage[s.pp_stage as usize] = Some(s);
        }
    }
    let schedules_by_stage: Vec<&StageSchedule> = by_stage
        .into_iter()
        .enumerate()
        .map(|(p, s)| s.ok_or_else(|| Error::Schedule(format!("no schedule for stage {p}"))))
        .collect::<Result<_>>()?;

    let node_count = topology.nodes.len();
    let mut plans: Vec<Option<&SnapshotPlan>> = vec![None; node_count];
    for p in snapshot_plans {
        let slot = plans
            .get_mut(p.node_id as usize)
            .ok_or_else(|| Error::Plan(format!("plan references unknown node {}", p.node_id)))?;
        *slot = Some(p);
    }
    for f in failure_script {
        if f.node_id as usize >= node_count {
            return Err(Error::Plan(format!("failure script references unknown node {}", f.node_id)));
        }
    }
    if !failure_script.is_empty() && params.recovery.is_none() {
        return Err(Error::Plan("failure script given without a recovery model".into()));
    }

    // Per-stage lookup: op position of (FWD|BWD, microbatch).
    let mb = spec.num_microbatches as usize;
    let mut fwd_pos = vec![vec![usize::MAX; mb]; spec.pp_size as usize];
    let mut bwd_pos = vec![vec![usize::MAX; mb]; spec.pp_size as usize];
    for (p, sched) in schedules_by_stage.iter().enumerate() {
        for (i, op) in sched.microbatch_ops.iter().enumerate() {
            match op.kind {
                OpKind::Fwd => fwd_pos[p][op.microbatch as usize] = i,
                OpKind::Bwd => bwd_pos[p][op.microbatch as usize] = i,
            }
        }
    }

    let mut replica_nodes =
        vec![vec![Vec::new(); spec.pp_size as usize]; spec.dp_size as usize];
    let mut node_replica = vec![(0u32, 0u32); node_count];
    for n in &topology.nodes {
        replica_nodes[n.dp_rank as usize][n.pp_stage as usize].push(n.node_id);
        node_replica[n.node_id as usize] = (n.dp_rank, n.pp_stage);
    }

    let snapshot_nodes = plans
        .iter()
        .filter(|p| p.map(|p| p.shard_bytes > 0).unwrap_or(false))
        .count() as u32;

    let digest = config_digest(topology, schedules, failure_script, duration_iterations, params);
    let mut engine = Engine {
        topo: topology,
        schedules: schedules_by_stage,
        plans,
        script: failure_script,
        params,
        duration: duration_iterations,
        queue: BinaryHeap::new(),
        seq: 0,
        epoch: 0,
        clock: 0.0,
        comm_fraction: params.has.comm_fraction,
        fwd_pos,
        bwd_pos,
        runs: vec![vec![StageRun::default(); spec.pp_size as usize]; spec.dp_size as usize],
        replica_nodes,
        node_replica,
        d2h: (0..node_count).map(|_| D2hState::default()).collect(),
        signals: vec![SignalState::Healthy; node_count],
        node_completed_round: vec![None; node_count],
        rounds: Vec::new(),
        round_counter: 0,
        nfs_ckpts: Vec::new(),
        snapshot_nodes,
        down_hw: vec![false; node_count],
        down_sw: vec![false; node_count],
        recovering_until: None,
        resume_iteration: 0,
        last_global_commit: None,
        iter: IterCtx {
            logical: 0,
            start: 0.0,
            ops_remaining: 0,
            blocking_remaining: 0,
            max_op_end: 0.0,
            max_blocking_end: 0.0,
            layer_bytes: [0; 3],
        },
        completed_rows: 0,
        trace: Vec::new(),
        metrics: Vec::new(),
        run_events: Vec::new(),
    };
    engine.run()?;
    let total_wall_s = engine.clock;
    Ok(SimResult {
        iterations: engine.metrics,
        trace: engine.trace,
        run_events: engine.run_events,
        config_digest: digest,
        total_wall_s,
    })
}

/// Render the trace as CSV: `time,node,stream,kind,duration,bytes`.
pub fn trace_csv(result: &SimResult) -> String {
    let mut out = String::from("time,node,stream,kind,duration,bytes\n");
    for ev in &result.trace {
        out.push_str(&format!(
            "{:.9},{},{},{},{:.9},{}\n",
            ev.time,
            ev.node_id,
            ev.stream.name(),
            ev.kind.name(),
            ev.duration,
            ev.bytes
        ));
    }
    out
}

/// Check the structural trace invariants: per-(node, stream) activities
/// never overlap, and times are finite and nonnegative.
pub fn verify_trace(result: &SimResult) -> Result<()> {
    let mut by_lane: std::collections::BTreeMap<(u32, Stream), Vec<(f64, f64)>> =
        std::collections::BTreeMap::new();
    for ev in &result.trace {
        if !ev.time.is_finite() || ev.time < 0.0 || ev.duration < 0.0 {
            return Err(Error::Schedule(format!("bad trace event time: {ev:?}")));
        }
        if ev.duration > 0.0 {
            by_lane.entry((ev.node_id, ev.stream)).or_default().push((ev.time, ev.time + ev.duration));
        }
    }
    for ((node, stream), mut spans) in by_lane {
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 - 1e-9 {
                return Err(Error::Schedule(format!(
                    "overlapping events on node {node} stream {}: [{}, {}) then [{}, {})",
                    stream.name(),
                    w[0].0,
                    w[0].1,
                    w[1].0,
                    w[1].1
                )));
            }
        }
    }
    Ok(())
}

/// Measure per-stage idle seconds from the first completed iteration of a
/// trace. Errors when a stage produced no compute events.
pub fn profile_trace_bubbles(result: &SimResult, topology: &Topology) -> Result<Vec<f64>> {
    let first = result
        .iterations
        .first()
        .ok_or_else(|| Error::Schedule("empty run: no iterations to profile".into()))?;
    let end = first.t_iter;
    let mut busy = vec![0.0f64; topology.spec.pp_size as usize];
    let mut seen = vec![false; topology.spec.pp_size as usize];
    for ev in &result.trace {
        if ev.time >= end - 1e-12 {
            continue;
        }
        let node = &topology.nodes[ev.node_id as usize];
        if node.dp_rank != 0 || node.replica_slot != 0 {
            continue;
        }
        match ev.kind {
            EventKind::Fwd | EventKind::Bwd | EventKind::Comm => {
                busy[node.pp_stage as usize] += ev.duration;
                seen[node.pp_stage as usize] = true;
            }
            _ => {}
        }
    }
    for (p, s) in seen.iter().enumerate() {
        if !s {
            return Err(Error::Schedule(format!("trace has no ops for stage {p}")));
        }
    }
    Ok(busy.iter().map(|b| end - b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::has::{plan_snapshot, HasParams, Placement, SnapshotRequest};
    use crate::pipeline::generate_1f1b_schedule;
    use crate::topology::{build_topology, ClusterSpec};

    fn spec(dp: u32, pp: u32, mb: u32, c: f64, b_io: f64) -> ClusterSpec {
        ClusterSpec {
            dp_size: dp,
            pp_size: pp,
            tp_size: 1,
            gpus_per_node: 1,
            d2h_bandwidth: b_io,
            internode_bandwidth: 1e9,
            nfs_bandwidth: 1e9,
            microbatch_compute_time: vec![c; pp as usize],
            num_microbatches: mb,
            zero1_enabled: false,
        }
    }

    fn baseline_params() -> RunParams {
        RunParams {
            has: HasParams { comm_fraction: 0.0, ..HasParams::default() },
            ..RunParams::default()
        }
    }

    #[test]
    fn baseline_matches_analytic_iteration_length() {
        let sp = spec(2, 4, 8, 0.25, 1e9);
        let topo = build_topology(&sp).unwrap();
        let scheds = generate_1f1b_schedule(&sp, 0.5).unwrap();
        let res = run_simulation(&topo, &scheds, &[], &[], 5, &baseline_params()).unwrap();
        assert_eq!(res.iterations.len(), 5);
        for m in &res.iterations {
            assert!(
                (m.t_iter - scheds[0].iteration_span).abs() < 1e-9,
                "iteration {} took {}, expected {}",
                m.iteration,
                m.t_iter,
                scheds[0].iteration_span
            );
            assert_eq!(m.bytes_snapshotted_by_layer, [0, 0, 0]);
        }
        verify_trace(&res).unwrap();
    }

    #[test]
    fn baseline_with_comm_windows_keeps_span() {
        let sp = spec(1, 3, 6, 0.5, 1e9);
        let topo = build_topology(&sp).unwrap();
        let scheds = generate_1f1b_schedule(&sp, 0.5).unwrap();
        let params = RunParams {
            has: HasParams { comm_fraction: 0.25, ..HasParams::default() },
            ..RunParams::default()
        };
        let res = run_simulation(&topo, &scheds, &[], &[], 3, &params).unwrap();
        for m in &res.iterations {
            assert!((m.t_iter - scheds[0].iteration_span).abs() < 1e-9);
        }
        // COMM events exist and never overlap compute on the same node.
        assert!(res.trace.iter().any(|e| e.kind == EventKind::Comm));
        verify_trace(&res).unwrap();
    }

    #[test]
    fn deterministic_traces() {
        let sp = spec(2, 2, 4, 0.5, 1e6);
        let topo = build_topology(&sp).unwrap();
        let scheds = generate_1f1b_schedule(&sp, 0.5).unwrap();
        let plans = plan_snapshot(
            &[SnapshotRequest { node_id: 0, bytes: 200_000 }, SnapshotRequest { node_id: 2, bytes: 100_000 }],
            &scheds,
            &topo,
            &HasParams { comm_fraction: 0.0, ..HasParams::default() },
        )
        .unwrap();
        let run = || {
            run_simulation(&topo, &scheds, &plans, &[], 4, &baseline_params()).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(trace_csv(&a), trace_csv(&b));
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn layer1_only_plan_has_zero_overhead() {
        let sp = spec(1, 2, 4, 1.0, 1000.0);
        let topo = build_topology(&sp).unwrap();
        let scheds = generate_1f1b_schedule(&sp, 0.5).unwrap();
        // Stage 0 idles 1.0 s per iteration → 1000 bytes of bubble capacity.
        let plans = plan_snapshot(
            &[SnapshotRequest { node_id: 0, bytes: 800 }],
            &scheds,
            &topo,
            &HasParams { comm_fraction: 0.0, chunk_bytes: 100, ..HasParams::default() },
        )
        .unwrap();
        assert_eq!(plans[0].layer2_bytes + plans[0].layer3_bytes, 0);
        let base = run_simulation(&topo, &scheds, &[], &[], 4, &baseline_params()).unwrap();
        let with = run_simulation(&topo, &scheds, &plans, &[], 4, &baseline_params()).unwrap();
        let report = crate::has::compute_overhead(&with, &base).unwrap();
        for o in &report.per_iteration {
            assert_eq!(*o, 0.0, "layer-1 snapshot must be free");
        }
        // All bytes accounted to layer 1.
        let total: u64 = with.iterations.iter().map(|m| m.bytes_snapshotted_by_layer[0]).sum();
        assert_eq!(total, 800 * 4);
        // Snapshot signals cycled each round.
        let snaps = with
            .trace
            .iter()
            .filter(|e| matches!(e.payload, Payload::Signal { to: SignalState::Snap }))
            .count();
        assert_eq!(snaps, 4);
        verify_trace(&with).unwrap();
    }

    #[test]
    fn chunk_beyond_iteration_end_stretches_iteration() {
        let gib = (1u64 << 30) as f64;
        let sp = spec(1, 1, 2, 1.0, 16.0 * gib);
        let topo = build_topology(&sp).unwrap();
        let scheds = generate_1f1b_schedule(&sp, 0.5).unwrap();
        let span = scheds[0].iteration_span;
        // One 16 GiB chunk anchored past the iteration end: nothing overlaps
        // training, so the barrier must wait the full transfer second.
        let plan = SnapshotPlan {
            node_id: 0,
            shard_bytes: 16 << 30,
            layer1_bytes: 0,
            layer2_bytes: 16 << 30,
            layer3_bytes: 0,
            spill_bytes: 0,
            chunk_bytes: 16 << 30,
            placements: vec![Placement {
                layer: Layer::L2,
                anchor: Anchor::Absolute(span),
                window_start: span,
                window_end: span + 1.0,
                bytes: 16 << 30,
            }],
            spillover: false,
        };
        let base = run_simulation(&topo, &scheds, &[], &[], 3, &baseline_params()).unwrap();
        let with = run_simulation(&topo, &scheds, &[plan], &[], 3, &baseline_params()).unwrap();
        let report = crate::has::compute_overhead(&with, &base).unwrap();
        for (i, o) in report.per_iteration.iter().enumerate() {
            assert!((o - 1.0).abs() < 1e-9, "iteration {i}: overhead {o}");
        }
        for m in &with.iterations {
            assert!((m.stalls - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn compute_interference_adds_alpha_d() {
        // Last stage of a 2-stage pipeline runs back-to-back; forcing the
        // snapshot into its compute windows charges exactly α₂·d per chunk
        // and every extension lands on the critical path.
        let sp = spec(1, 2, 4, 1.0, 1000.0);
        let topo = build_topology(&sp).unwrap();
        let scheds = generate_1f1b_schedule(&sp, 0.5).unwrap();
        let alpha = 0.25;
        let params = HasParams {
            comm_fraction: 0.0,
            alpha_compute: alpha,
            chunk_bytes: 100,
            bubble_budget_s: Some(0.0),
            ..HasParams::default()
        };
        // 2 seconds of transfer, all forced to layer 2 on the dense stage.
        let plans = plan_snapshot(
            &[SnapshotRequest { node_id: 1, bytes: 2000 }],
            &scheds,
            &topo,
            &params,
        )
        .unwrap();
        assert_eq!(plans[0].layer1_bytes, 0);
        assert_eq!(plans[0].layer2_bytes, 2000);
        let rp = RunParams { has: params, ..RunParams::default() };
        let base = run_simulation(&topo, &scheds, &[], &[], 4, &rp).unwrap();
        let with = run_simulation(&topo, &scheds, &plans, &[], 4, &rp).unwrap();
        let report = crate::has::compute_overhead(&with, &base).unwrap();
        let expect = alpha * 2.0;
        for (i, o) in report.per_iteration.iter().enumerate() {
            assert!((o - expect).abs() < 1e-9, "iteration {i}: {o} vs {expect}");
        }
    }

    #[test]
    fn network_interference_on_comm_windows() {
        // Half of each op is communication; chunks anchored there charge α₃.
        let sp = spec(1, 2, 4, 1.0, 1000.0);
        let topo = build_topology(&sp).unwrap();
        let scheds = generate_1f1b_schedule(&sp, 0.5).unwrap();
        let gamma = 0.5;
        let windows = crate::has::stage_windows(&scheds[1], gamma);
        let mut placements = Vec::new();
        let mut left = 2000u64; // 2 s of transfer at 1000 B/s
        for w in windows.iter().filter(|w| w.layer == Layer::L3) {
            if left == 0 {
                break;
            }
            let cap = (w.seconds() * 1000.0).floor() as u64;
            let take = left.min(cap);
            placements.push(Placement {
                layer: Layer::L3,
                anchor: w.anchor,
                window_start: w.start,
                window_end: w.end,
                bytes: take,
            });
            left -= take;
        }
        assert_eq!(left, 0, "comm windows too small for the test volume");
        let plan = SnapshotPlan {
            node_id: 1,
            shard_bytes: 2000,
            layer1_bytes: 0,
            layer2_bytes: 0,
            layer3_bytes: 2000,
            spill_bytes: 0,
            chunk_bytes: 100,
            placements,
            spillover: false,
        };
        let has = HasParams {
            comm_fraction: gamma,
            alpha_network: 0.15,
            chunk_bytes: 100,
            ..HasParams::default()
        };
        let rp = RunParams { has, ..RunParams::default() };
        let base = run_simulation(&topo, &scheds, &[], &[], 3, &rp).unwrap();
        let with = run_simulation(&topo, &scheds, &[plan], &[], 3, &rp).unwrap();
        let report = crate::has::compute_overhead(&with, &base).unwrap();
        for o in &report.per_iteration {
            assert!((o - 0.3).abs() < 1e-9, "expected 0.15 × 2 s = 0.3, got {o}");
        }
    }

    #[test]
    fn spillover_delays_commit_but_not_compute() {
        let sp = spec(1, 2, 2, 1.0, 100.0);
        let topo = build_topology(&sp).unwrap();
        let scheds = generate_1f1b_schedule(&sp, 0.5).unwrap();
        // Iteration span 3 s at 100 B/s; ask for far more than one iteration.
        let plans = plan_snapshot(
            &[SnapshotRequest { node_id: 0, bytes: 1000 }],
            &scheds,
            &topo,
            &HasParams { comm_fraction: 0.0, chunk_bytes: 50, ..HasParams::default() },
        )
        .unwrap();
        assert!(plans[0].spillover);
        let base = run_simulation(&topo, &scheds, &[], &[], 6, &baseline_params()).unwrap();
        let with = run_simulation(&topo, &scheds, &plans, &[], 6, &baseline_params()).unwrap();
        let report = crate::has::compute_overhead(&with, &base).unwrap();
        for o in &report.per_iteration {
            assert_eq!(*o, 0.0, "spill must never block compute");
        }
        // The second round cannot launch while round 0 still streams.
        assert!(with.run_events.iter().any(|e| matches!(e, RunEvent::RoundSkipped { .. })));
        let commits = with
            .run_events
            .iter()
            .filter(|e| matches!(e, RunEvent::RoundCommitted { .. }))
            .count();
        assert!(commits >= 1, "spilled round should still commit eventually");
    }

    #[test]
    fn failure_triggers_recovery_and_resume() {
        let sp = spec(2, 2, 2, 1.0, 1e6);
        let topo = build_topology(&sp).unwrap();
        let scheds = generate_1f1b_schedule(&sp, 0.5).unwrap();
        let groups = crate::topology::form_sharding_groups(&topo, &[1000, 1000]).unwrap();
        let plans = plan_snapshot(
            &(0..4).map(|n| SnapshotRequest { node_id: n, bytes: 500 }).collect::<Vec<_>>(),
            &scheds,
            &topo,
            &HasParams { comm_fraction: 0.0, ..HasParams::default() },
        )
        .unwrap();
        let rp = RunParams {
            has: HasParams { comm_fraction: 0.0, ..HasParams::default() },
            recovery: Some(RecoveryModel {
                per_group_tolerance: vec![1; groups.len()],
                groups,
                inmem_load_s: 0.5,
                nfs_load_s: 50.0,
            }),
            ..RunParams::default()
        };
        let script = vec![FailureEvent {
            time_s: 7.5, // inside iteration 2 (span 3 s)
            node_id: 1,
            kind: FailureKind::Hardware,
        }];
        let res = run_simulation(&topo, &scheds, &plans, &script, 5, &rp).unwrap();
        assert_eq!(res.iterations.len(), 5);
        let mut saw_failure = false;
        let mut saw_recovery = false;
        for e in &res.run_events {
            match e {
                RunEvent::Failure { node_id, .. } => {
                    saw_failure = true;
                    assert_eq!(*node_id, 1);
                }
                RunEvent::Recovery { in_memory, t_load_s, resume_iteration, .. } => {
                    saw_recovery = true;
                    assert!(*in_memory, "one failure within tolerance stays in memory");
                    assert_eq!(*t_load_s, 0.5);
                    assert_eq!(*resume_iteration, 2);
                }
                _ => {}
            }
        }
        assert!(saw_failure && saw_recovery);
        // The re-executed iteration appears twice in the logical index list.
        let indices: Vec<u32> = res.iterations.iter().map(|m| m.iteration).collect();
        assert_eq!(indices, vec![0, 1, 2, 3, 4]);
        assert!(res.total_wall_s > 5.0 * 3.0, "recovery and rework cost wall time");
        verify_trace(&res).unwrap();
    }

    #[test]
    fn beyond_tolerance_goes_to_nfs() {
        let sp = spec(2, 1, 2, 1.0, 1e6);
        let topo = build_topology(&sp).unwrap();
        let scheds = generate_1f1b_schedule(&sp, 0.5).unwrap();
        let groups = crate::topology::form_sharding_groups(&topo, &[1000]).unwrap();
        let plans = plan_snapshot(
            &[SnapshotRequest { node_id: 0, bytes: 100 }, SnapshotRequest { node_id: 1, bytes: 100 }],
            &scheds,
            &topo,
            &HasParams { comm_fraction: 0.0, ..HasParams::default() },
        )
        .unwrap();
        let rp = RunParams {
            has: HasParams { comm_fraction: 0.0, ..HasParams::default() },
            nfs_every_rounds: 1,
            nfs_write_s: 0.1,
            recovery: Some(RecoveryModel {
                per_group_tolerance: vec![0; groups.len()],
                groups,
                inmem_load_s: 0.5,
                nfs_load_s: 5.0,
            }),
            ..RunParams::default()
        };
        let script = vec![FailureEvent { time_s: 4.5, node_id: 0, kind: FailureKind::Hardware }];
        let res = run_simulation(&topo, &scheds, &plans, &script, 6, &rp).unwrap();
        let rec = res
            .run_events
            .iter()
            .find_map(|e| match e {
                RunEvent::Recovery { in_memory, t_load_s, .. } => Some((*in_memory, *t_load_s)),
                _ => None,
            })
            .unwrap();
        assert!(!rec.0, "tolerance 0 forces the archive path");
        assert_eq!(rec.1, 5.0);
        assert!(res
            .trace
            .iter()
            .any(|e| matches!(e.payload, Payload::Signal { to: SignalState::NfsRestart })));
        assert_eq!(res.iterations.len(), 6);
    }

    #[test]
    fn trace_profile_matches_schedule_bubbles() {
        let sp = spec(1, 4, 8, 0.5, 1e9);
        let topo = build_topology(&sp).unwrap();
        let scheds = generate_1f1b_schedule(&sp, 0.5).unwrap();
        let res = run_simulation(&topo, &scheds, &[], &[], 2, &baseline_params()).unwrap();
        let measured = profile_trace_bubbles(&res, &topo).unwrap();
        let expected = crate::pipeline::profile_bubbles(&scheds);
        for (a, b) in measured.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9, "trace {a} vs schedule {b}");
        }
    }

    #[test]
    fn plan_for_unknown_node_rejected_before_run() {
        let sp = spec(1, 1, 1, 1.0, 1e9);
        let topo = build_topology(&sp).unwrap();
        let scheds = generate_1f1b_schedule(&sp, 0.5).unwrap();
        let mut plan = SnapshotPlan::empty(7);
        plan.shard_bytes = 1;
        let err = run_simulation(&topo, &scheds, &[plan], &[], 1, &baseline_params());
        assert!(err.is_err());
    }
}
