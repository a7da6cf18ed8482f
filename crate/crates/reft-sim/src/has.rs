//! Hierarchical asynchronous snapshot planning.
//!
//! Each node has to move its snapshot bytes (its own shard plus whatever
//! redundancy duties it carries) over the device-to-host link once per
//! snapshot round. The planner decides *when* those bytes move by filling a
//! waterfall of progressively less-free time:
//!
//! 1. **Layer 1** — pipeline bubbles, where the devices sit idle anyway;
//! 2. **Layer 2** — compute windows, overlapping the copy with kernels;
//! 3. **Layer 3** — communication windows, allowed only when training
//!    traffic runs on a separate interconnect from the snapshot link;
//! 4. **spillover** — whatever still remains completes in later iterations
//!    and delays snapshot commit, but never blocks compute.
//!
//! Placements are tiled greedily earliest-first into the concrete windows of
//! the stage's schedule so the simulator can anchor every chunk to the op or
//! gap it rides on.

use crate::error::{Error, Result};
use crate::pipeline::StageSchedule;
use crate::simkernel::SimResult;
use crate::topology::Topology;

/// Default device-to-host transfer chunk: 64 MiB.
pub const DEFAULT_CHUNK_BYTES: u64 = 64 << 20;

/// Default share of each op spent in off-link communication windows.
pub const DEFAULT_COMM_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    L1,
    L2,
    L3,
    Spill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannerMode {
    /// Bubble budget measured from the schedule (default).
    Profiled,
    /// Bubble budget from the closed-form per-stage estimate, capped by the
    /// physically available windows so placements stay feasible.
    ClosedForm,
}

/// What a snapshot chunk is anchored to at execution time. Offsets are op
/// indices into the stage's `microbatch_ops`; the simulator resolves them to
/// actual (possibly shifted) times in each iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Anchor {
    /// The compute span of op `i`.
    OpCompute(usize),
    /// The communication tail of op `i`.
    OpComm(usize),
    /// The idle gap following op `i` (`None` = iteration start).
    BubbleAfter(Option<usize>),
    /// A fixed offset from iteration start, for hand-built plans.
    Absolute(f64),
    /// No anchor: runs whenever the D2H channel is free.
    Free,
}

/// A contiguous stretch of stage time a placement can ride on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub layer: Layer,
    pub anchor: Anchor,
    pub start: f64,
    pub end: f64,
}

impl Window {
    pub fn seconds(&self) -> f64 {
        self.end - self.start
    }
}

/// Bytes assigned to one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub layer: Layer,
    pub anchor: Anchor,
    pub window_start: f64,
    pub window_end: f64,
    pub bytes: u64,
}

/// One node's snapshot transfer plan for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotPlan {
    pub node_id: u32,
    /// Local shard plus redundancy bytes to move device-to-host.
    pub shard_bytes: u64,
    pub layer1_bytes: u64,
    pub layer2_bytes: u64,
    pub layer3_bytes: u64,
    /// Residual that cannot fit in one iteration's windows.
    pub spill_bytes: u64,
    pub chunk_bytes: u64,
    pub placements: Vec<Placement>,
    /// True when the round cannot complete within one iteration.
    pub spillover: bool,
}

impl SnapshotPlan {
    /// An empty plan: the node snapshots nothing.
    pub fn empty(node_id: u32) -> Self {
        SnapshotPlan {
            node_id,
            shard_bytes: 0,
            layer1_bytes: 0,
            layer2_bytes: 0,
            layer3_bytes: 0,
            spill_bytes: 0,
            chunk_bytes: DEFAULT_CHUNK_BYTES,
            placements: Vec::new(),
            spillover: false,
        }
    }

    pub fn placed_bytes(&self) -> u64 {
        self.placements.iter().map(|p| p.bytes).sum()
    }
}

/// Planner knobs; see the config reference for defaults.
#[derive(Debug, Clone)]
pub struct HasParams {
    pub mode: PlannerMode,
    pub chunk_bytes: u64,
    /// Fraction of each op that is communication riding a separate
    /// interconnect (Layer-3 windows). Zero disables Layer 3 outright.
    pub comm_fraction: f64,
    /// Whether training communication is off the snapshot link; when false,
    /// Layer-3 residual spills instead.
    pub separate_interconnect: bool,
    /// Slowdown applied to a compute op per overlapping chunk (α₂).
    pub alpha_compute: f64,
    /// Slowdown applied to a communication op per overlapping chunk (α₃).
    pub alpha_network: f64,
    /// Optional what-if cap on the Layer-1 budget, in seconds.
    pub bubble_budget_s: Option<f64>,
}

impl Default for HasParams {
    fn default() -> Self {
        HasParams {
            mode: PlannerMode::Profiled,
            chunk_bytes: DEFAULT_CHUNK_BYTES,
            comm_fraction: DEFAULT_COMM_FRACTION,
            separate_interconnect: true,
            alpha_compute: 0.0,
            alpha_network: 0.0,
            bubble_budget_s: None,
        }
    }
}

/// Request to plan one node's round.
#[derive(Debug, Clone, Copy)]
pub struct SnapshotRequest {
    pub node_id: u32,
    /// Everything the node must move D2H this round.
    pub bytes: u64,
}

/// Seconds to move `bytes` over a `b_io` bytes/second link.
pub fn estimate_snapshot_time(bytes: u64, b_io: f64) -> f64 {
    assert!(b_io > 0.0, "b_io must be positive");
    bytes as f64 / b_io
}

/// Split a shard between bubble time and the rest, floor-rounded by the
/// bubble/snapshot time ratio. When the whole snapshot fits inside the
/// bubble (t_ss < t_bubble, including t_ss = 0), everything is bubble-bound.
pub fn split_parameter(shard_bytes: u64, t_ss: f64, t_bubble: f64) -> (u64, u64) {
    assert!(t_ss >= 0.0 && t_bubble >= 0.0, "times must be nonnegative");
    if t_ss == 0.0 || t_ss < t_bubble {
        return (shard_bytes, 0);
    }
    let bubble = ((shard_bytes as f64 * t_bubble) / t_ss).floor() as u64;
    let bubble = bubble.min(shard_bytes);
    (bubble, shard_bytes - bubble)
}

/// Fill the layer waterfall: L1 to its capacity, overflow to L2, then L3
/// (when allowed), and whatever is left spills to later iterations.
pub fn waterfall_split(
    shard_bytes: u64,
    l1_cap: u64,
    l2_cap: u64,
    l3_cap: Option<u64>,
) -> (u64, u64, u64, u64) {
    let l1 = shard_bytes.min(l1_cap);
    let after1 = shard_bytes - l1;
    let l2 = after1.min(l2_cap);
    let after2 = after1 - l2;
    let l3 = after2.min(l3_cap.unwrap_or(0));
    let spill = after2 - l3;
    (l1, l2, l3, spill)
}

/// Decompose a stage schedule into anchored windows, in time order.
pub(crate) fn stage_windows(sched: &StageSchedule, comm_fraction: f64) -> Vec<Window> {
    let mut windows = Vec::new();
    let mut t = 0.0f64;
    let mut prev: Option<usize> = None;
    for (j, op) in sched.microbatch_ops.iter().enumerate() {
        if op.start > t {
            windows.push(Window {
                layer: Layer::L1,
                anchor: Anchor::BubbleAfter(prev),
                start: t,
                end: op.start,
            });
        }
        let comm_len = op.duration * comm_fraction;
        let compute_end = op.end() - comm_len;
        if compute_end > op.start {
            windows.push(Window {
                layer: Layer::L2,
                anchor: Anchor::OpCompute(j),
                start: op.start,
                end: compute_end,
            });
        }
        if comm_len > 0.0 {
            windows.push(Window {
                layer: Layer::L3,
                anchor: Anchor::OpComm(j),
                start: compute_end,
                end: op.end(),
            });
        }
        t = op.end();
        prev = Some(j);
    }
    if sched.iteration_span > t {
        windows.push(Window {
            layer: Layer::L1,
            anchor: Anchor::BubbleAfter(prev),
            start: t,
            end: sched.iteration_span,
        });
    }
    windows
}

fn window_capacity_bytes(w: &Window, b_io: f64) -> u64 {
    (w.seconds() * b_io).floor() as u64
}

/// Tile `bytes` into this layer's windows, earliest first. Returns leftover.
fn tile_layer(
    placements: &mut Vec<Placement>,
    windows: &[Window],
    layer: Layer,
    mut bytes: u64,
    b_io: f64,
) -> u64 {
    for w in windows.iter().filter(|w| w.layer == layer) {
        if bytes == 0 {
            break;
        }
        let cap = window_capacity_bytes(w, b_io);
        if cap == 0 {
            continue;
        }
        let take = bytes.min(cap);
        placements.push(Placement {
            layer,
            anchor: w.anchor,
            window_start: w.start,
            window_end: w.end,
            bytes: take,
        });
        bytes -= take;
    }
    bytes
}

/// Build one plan per request against the stage schedules.
pub fn plan_snapshot(
    requests: &[SnapshotRequest],
    schedules: &[StageSchedule],
    topology: &Topology,
    params: &HasParams,
) -> Result<Vec<SnapshotPlan>> {
    if !(0.0..=1.0).contains(&params.comm_fraction) {
        return Err(Error::Plan(format!("comm_fraction {} outside [0, 1]", params.comm_fraction)));
    }
    if params.chunk_bytes == 0 {
        return Err(Error::Plan("chunk_bytes must be > 0".into()));
    }
    let b_io = topology.spec.d2h_bandwidth;
    let mut plans = Vec::with_capacity(requests.len());
    for req in requests {
        let node = topology
            .node(req.node_id)
            .ok_or_else(|| Error::Plan(format!("unknown node {}", req.node_id)))?;
        let sched = schedules
            .iter()
            .find(|s| s.pp_stage == node.pp_stage)
            .ok_or_else(|| Error::Plan(format!("no schedule for stage {}", node.pp_stage)))?;

        let comm_fraction = if params.separate_interconnect { params.comm_fraction } else { 0.0 };
        let windows = stage_windows(sched, comm_fraction);

        let physical_bubble_s: f64 =
            windows.iter().filter(|w| w.layer == Layer::L1).map(Window::seconds).sum();
        let mut bubble_budget_s = match params.mode {
            PlannerMode::Profiled => physical_bubble_s,
            PlannerMode::ClosedForm => crate::pipeline::estimate_bubble_time(
                node.pp_stage,
                &topology.spec,
            )
            .min(physical_bubble_s),
        };
        if let Some(cap) = params.bubble_budget_s {
            bubble_budget_s = bubble_budget_s.min(cap);
        }

        let l1_cap = (bubble_budget_s * b_io).floor() as u64;
        let l2_cap: u64 = windows
            .iter()
            .filter(|w| w.layer == Layer::L2)
            .map(|w| window_capacity_bytes(w, b_io))
            .sum();
        let l3_cap: Option<u64> = if params.separate_interconnect {
            Some(
                windows
                    .iter()
                    .filter(|w| w.layer == Layer::L3)
                    .map(|w| window_capacity_bytes(w, b_io))
                    .sum(),
            )
        } else {
            None
        };

        let (l1, l2, l3, spill) = waterfall_split(req.bytes, l1_cap, l2_cap, l3_cap);

        let mut placements = Vec::new();
        // The budget may be tighter than the physical windows, so tile
        // exactly the decided byte volumes.
        let r1 = tile_layer(&mut placements, &windows, Layer::L1, l1, b_io);
        let r2 = tile_layer(&mut placements, &windows, Layer::L2, l2, b_io);
        let r3 = tile_layer(&mut placements, &windows, Layer::L3, l3, b_io);
        // Rounding slack from floor-capacity windows joins the spill.
        let spill = spill + r1 + r2 + r3;
        let (l1, l2, l3) = (l1 - r1, l2 - r2, l3 - r3);
        // The copy channel drains placements in order, so interleave the
        // layers chronologically; otherwise an early layer-2 window queued
        // behind a late bubble would execute after its slot and stall the
        // iteration barrier.
        placements.sort_by(|a, b| a.window_start.total_cmp(&b.window_start));
        if spill > 0 {
            placements.push(Placement {
                layer: Layer::Spill,
                anchor: Anchor::Free,
                window_start: sched.iteration_span,
                window_end: sched.iteration_span,
                bytes: spill,
            });
        }

        plans.push(SnapshotPlan {
            node_id: req.node_id,
            shard_bytes: req.bytes,
            layer1_bytes: l1,
            layer2_bytes: l2,
            layer3_bytes: l3,
            spill_bytes: spill,
            chunk_bytes: params.chunk_bytes,
            placements,
            spillover: spill > 0,
        });
    }
    Ok(plans)
}

/// Per-iteration snapshot overhead: the iteration-time difference between a
/// run with snapshotting and its baseline.
#[derive(Debug, Clone)]
pub struct OverheadReport {
    pub per_iteration: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

pub fn compute_overhead(with_plan: &SimResult, baseline: &SimResult) -> Result<OverheadReport> {
    if with_plan.config_digest != baseline.config_digest {
        return Err(Error::Plan(
            "overhead comparison requires identical topology/schedule configs".into(),
        ));
    }
    if with_plan.iterations.len() != baseline.iterations.len() {
        return Err(Error::Plan(format!(
            "iteration count mismatch: {} vs {}",
            with_plan.iterations.len(),
            baseline.iterations.len()
        )));
    }
    let mut per_iteration = Vec::with_capacity(baseline.iterations.len());
    for (w, b) in with_plan.iterations.iter().zip(&baseline.iterations) {
        let diff = w.t_iter - b.t_iter;
        if diff < -1e-9 {
            return Err(Error::Plan(format!(
                "iteration {} is faster with snapshotting ({} s); runs are inconsistent",
                w.iteration, diff
            )));
        }
        per_iteration.push(diff.max(0.0));
    }
    let mean = if per_iteration.is_empty() {
        0.0
    } else {
        per_iteration.iter().sum::<f64>() / per_iteration.len() as f64
    };
    let max = per_iteration.iter().cloned().fold(0.0f64, f64::max);
    Ok(OverheadReport { per_iteration, mean, max })
}

/// Dump plans as CSV: `node,layer,window_start,bytes`.
pub fn plan_csv(plans: &[SnapshotPlan]) -> String {
    let mut out = String::from("node,layer,window_start,bytes\n");
    for plan in plans {
        for p in &plan.placements {
            let layer = match p.layer {
                Layer::L1 => "1",
                Layer::L2 => "2",
                Layer::L3 => "3",
                Layer::Spill => "spill",
            };
            out.push_str(&format!("{},{},{:.9},{}\n", plan.node_id, layer, p.window_start, p.bytes));
        }
    }
    out
}
