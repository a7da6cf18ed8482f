//! Weibull failure injection and the per-node health signal machine.
//!
//! Failure rates are quoted per day (the natural unit for cluster MTBF
//! figures) while the simulator clock runs in seconds; [`SECONDS_PER_DAY`]
//! is the only conversion point. Sampling uses the inverse CDF of the
//! Weibull survival function `P(t) = exp(−λ·t^c)`, so a rate of zero means
//! "never fails" and samples +∞.

use crate::error::{Error, Result};
use crate::topology::Topology;
use rand::Rng;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Weibull failure-process parameters for one failure class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityParams {
    /// Hardware (node-loss) failure rate, per day.
    pub lambda_hw: f64,
    /// Software (process-crash) failure rate, per day.
    pub lambda_sw: f64,
    /// Weibull shape; 1.0 = memoryless, >1 = aging.
    pub c: f64,
}

impl ReliabilityParams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_hw < 0.0 || self.lambda_sw < 0.0 {
            return Err(Error::Reliability("failure rates must be >= 0".into()));
        }
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::Reliability("Weibull shape c must be > 0".into()));
        }
        Ok(())
    }
}

/// Probability that a component with rate `lambda_per_day` survives `t_days`.
pub fn survival(lambda_per_day: f64, c: f64, t_days: f64) -> f64 {
    assert!(t_days >= 0.0, "time must be nonnegative");
    if lambda_per_day == 0.0 {
        return 1.0;
    }
    (-lambda_per_day * t_days.powf(c)).exp()
}

/// Inverse-CDF sample of time-to-failure, in days. `+∞` when λ = 0.
pub fn sample_ttf_days(lambda_per_day: f64, c: f64, rng: &mut impl Rng) -> f64 {
    if lambda_per_day == 0.0 {
        return f64::INFINITY;
    }
    // u ∈ (0, 1]: survival probability at the sampled time.
    let u: f64 = 1.0 - rng.gen::<f64>();
    (-u.ln() / lambda_per_day).powf(1.0 / c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureKind {
    /// Node loss: host memory and device state are gone.
    Hardware,
    /// Process crash: host memory (and tmpfs) survive.
    Software,
}

/// One scripted failure for the simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FailureEvent {
    pub time_s: f64,
    pub node_id: u32,
    pub kind: FailureKind,
}

/// Draw one hardware and one software time-to-failure per node; keep those
/// inside the horizon. Nodes are visited in id order, two draws each, so a
/// seed fully determines the script.
pub fn inject_failures(
    topology: &Topology,
    params: &ReliabilityParams,
    horizon_s: f64,
    rng: &mut impl Rng,
) -> Result<Vec<FailureEvent>> {
    params.validate()?;
    if !(horizon_s > 0.0) {
        return Err(Error::Reliability("horizon must be > 0".into()));
    }
    let mut script = Vec::new();
    for node in &topology.nodes {
        let t_hw = sample_ttf_days(params.lambda_hw, params.c, rng) * SECONDS_PER_DAY;
        let t_sw = sample_ttf_days(params.lambda_sw, params.c, rng) * SECONDS_PER_DAY;
        if t_hw < horizon_s {
            script.push(FailureEvent { time_s: t_hw, node_id: node.node_id, kind: FailureKind::Hardware });
        }
        if t_sw < horizon_s {
            script.push(FailureEvent { time_s: t_sw, node_id: node.node_id, kind: FailureKind::Software });
        }
    }
    script.sort_by(|a, b| {
        a.time_s
            .total_cmp(&b.time_s)
            .then(a.node_id.cmp(&b.node_id))
    });
    Ok(script)
}

/// Render a failure script as CSV (`time_s,node,kind`).
pub fn failure_script_csv(script: &[FailureEvent]) -> String {
    let mut out = String::from("time_s,node,kind\n");
    for ev in script {
        let kind = match ev.kind {
            FailureKind::Hardware => "HARDWARE",
            FailureKind::Software => "SOFTWARE",
        };
        out.push_str(&format!("{:.6},{},{}\n", ev.time_s, ev.node_id, kind));
    }
    out
}

/// Parse the CSV produced by [`failure_script_csv`].
pub fn parse_failure_script(text: &str) -> Result<Vec<FailureEvent>> {
    let mut script = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (lineno == 0 && line.starts_with("time_s")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Config(format!("failure script line {}: expected 3 fields", lineno + 1)));
        }
        let time_s: f64 = fields[0]
            .parse()
            .map_err(|_| Error::Config(format!("failure script line {}: bad time", lineno + 1)))?;
        let node_id: u32 = fields[1]
            .parse()
            .map_err(|_| Error::Config(format!("failure script line {}: bad node", lineno + 1)))?;
        let kind = match fields[2] {
            "HARDWARE" | "hardware" => FailureKind::Hardware,
            "SOFTWARE" | "software" => FailureKind::Software,
            other => return Err(Error::Config(format!("failure script line {}: unknown kind {other}", lineno + 1))),
        };
        script.push(FailureEvent { time_s, node_id, kind });
    }
    Ok(script)
}

/// Node health states broadcast through the cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SignalState {
    Healthy,
    /// Snapshot round in progress.
    Snap,
    /// Snapshot round committed; reported until the next iteration boundary.
    Completed,
    /// Software failure; host memory intact.
    Unhealthy,
    /// Hardware failure; node buffers erased.
    Offline,
    Recovering,
    /// Redundancy exhausted; the cluster reloads the archival checkpoint.
    NfsRestart,
}

/// Things that happen to a node and may move its signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalEvent {
    SnapStart,
    AllShardsComplete,
    IterationBoundary,
    SoftwareFailure,
    HardwareFailure,
    RecoveryStart,
    RecoverySuccess,
    BeyondTolerance,
    NfsReloadDone,
}

/// Apply one event to a signal state. Illegal combinations are errors so the
/// simulator can never silently skip a protocol step.
pub fn transition(state: SignalState, event: SignalEvent) -> Result<SignalState> {
    use SignalEvent as E;
    use SignalState as S;
    let next = match (state, event) {
        (S::Healthy, E::SnapStart) => S::Snap,
        (S::Snap, E::AllShardsComplete) => S::Completed,
        (S::Completed, E::IterationBoundary) => S::Healthy,
        // An iteration boundary with no snapshot activity changes nothing.
        (S::Healthy, E::IterationBoundary) => S::Healthy,
        (S::Snap, E::IterationBoundary) => S::Snap,
        (S::Healthy | S::Snap | S::Completed, E::SoftwareFailure) => S::Unhealthy,
        (S::Healthy | S::Snap | S::Completed, E::HardwareFailure) => S::Offline,
        (S::Unhealthy | S::Offline, E::RecoveryStart) => S::Recovering,
        // Healthy peers join the global recovery pause and come back with it.
        (S::Healthy | S::Snap | S::Completed, E::RecoveryStart) => S::Recovering,
        (S::Recovering, E::RecoverySuccess) => S::Healthy,
        (S::Recovering, E::BeyondTolerance) => S::NfsRestart,
        (S::NfsRestart, E::NfsReloadDone) => S::Healthy,
        // Cascading failures during recovery keep the node down.
        (S::Recovering, E::SoftwareFailure) => S::Unhealthy,
        (S::Recovering, E::HardwareFailure) => S::Offline,
        (from, ev) => {
            return Err(Error::IllegalTransition {
                from: format!("{from:?}"),
                event: format!("{ev:?}"),
            })
        }
    };
    Ok(next)
}
