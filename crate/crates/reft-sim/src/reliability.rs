//! Closed-form reliability analysis: fleet survival probabilities under
//! in-memory protection vs. archival checkpointing, and the snapshot
//! interval that minimizes expected lost work.
//!
//! All rates are per day unless a name says otherwise; the interval
//! optimizer works in seconds because its inputs (save overhead, failure
//! rate during one interval) are measured there.

use crate::error::{Error, Result};
use crate::failure::survival;

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(Error::Reliability(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

/// Probability that a k-node fleet, organized into redundancy groups of n,
/// survives one interval: a group rides out zero or one member loss, and
/// every needed in-memory restore succeeds with probability `p_re`.
pub fn p_re_survive(k: u32, n: u32, p_s: f64, p_re: f64) -> Result<f64> {
    check_prob("p_s", p_s)?;
    check_prob("p_re", p_re)?;
    if n == 0 || k == 0 {
        return Err(Error::Reliability("fleet and group sizes must be positive".into()));
    }
    if k % n != 0 {
        return Err(Error::Reliability(format!(
            "{k} nodes cannot form whole groups of {n}"
        )));
    }
    let nf = n as f64;
    let group = p_s.powi(n as i32) + nf * (1.0 - p_s) * p_s.powi(n as i32 - 1);
    Ok(group.powi((k / n) as i32) * p_re.powi(k as i32))
}

/// Probability a k-node fleet survives one interval under archival
/// checkpointing alone: every node must dodge both hardware loss and
/// interruption of the checkpoint transfer.
pub fn p_ck_survive(k: u32, p_s: f64, p_tr: f64) -> Result<f64> {
    check_prob("p_s", p_s)?;
    check_prob("p_tr", p_tr)?;
    if k == 0 {
        return Err(Error::Reliability("fleet size must be positive".into()));
    }
    Ok(p_s.powi(k as i32) * p_tr.powi(k as i32))
}

/// Probability that one group of n suffers at least two member losses in
/// an interval (the event in-memory redundancy cannot absorb), given the
/// per-node loss probability `lambda`.
pub fn lambda_re_fail(lambda: f64, n: u32) -> Result<f64> {
    check_prob("lambda", lambda)?;
    if n == 0 {
        return Err(Error::Reliability("group size must be positive".into()));
    }
    let nf = n as f64;
    Ok(1.0 - (1.0 - lambda).powi(n as i32) - nf * lambda * (1.0 - lambda).powi(n as i32 - 1))
}

/// Per-interval overhead of one snapshot: only the part of the fault-
/// tolerance work that training cannot hide costs anything.
pub fn save_overhead(t_ft: f64, t_comp: f64) -> f64 {
    (t_ft - t_comp).max(0.0)
}

/// Interval minimizing expected total overhead: snapshots cost
/// `o_save / T` per unit time, expected rework after a failure costs
/// `(T/2 + const) · λ`; the optimum is √(2·o_save/λ).
pub fn optimal_interval(o_save_s: f64, lambda_per_s: f64) -> Result<f64> {
    if !(o_save_s >= 0.0) {
        return Err(Error::Reliability(format!("negative save overhead {o_save_s}")));
    }
    if !(lambda_per_s > 0.0) {
        return Err(Error::Reliability(format!(
            "failure rate must be positive to optimize an interval, got {lambda_per_s}"
        )));
    }
    Ok((2.0 * o_save_s / lambda_per_s).sqrt())
}

/// Expected overhead per unit training time at snapshot interval `T`:
/// amortized save cost plus failure-weighted rework (half an interval on
/// average, plus the fixed recovery cost).
pub fn expected_overhead_rate(
    o_save_s: f64,
    lambda_per_s: f64,
    interval_s: f64,
    recovery_s: f64,
) -> f64 {
    o_save_s / interval_s + (interval_s / 2.0 + recovery_s) * lambda_per_s
}

/// Archival-checkpoint interval for a fleet whose in-memory layer already
/// absorbs single losses: only the unabsorbable part of the snapshot cost
/// (`T_sn − T_comp`, clamped at zero) is amortized, against the rate of
/// beyond-tolerance group failures.
pub fn redundant_ckpt_interval(t_sn: f64, t_comp: f64, lambda_re: f64) -> Result<f64> {
    if !(lambda_re > 0.0) {
        return Err(Error::Reliability(format!(
            "beyond-tolerance rate must be positive, got {lambda_re}"
        )));
    }
    let exposed = (t_sn - t_comp).abs() + (t_sn - t_comp);
    Ok((exposed / lambda_re).sqrt())
}

// ---------------------------------------------------------------------------
// Fleet survival over time
// ---------------------------------------------------------------------------

/// Inputs for the time-parameterized fleet survival curves.
#[derive(Debug, Clone, Copy)]
pub struct FleetParams {
    /// Total nodes.
    pub k: u32,
    /// Redundancy group size (in-memory mode).
    pub n: u32,
    /// Weibull scale of hardware losses, per day.
    pub lambda_hw_per_day: f64,
    /// Weibull scale of software interruptions, per day.
    pub lambda_sw_per_day: f64,
    /// Weibull shape (c = 1 is memoryless; early-life failures have c > 1
    /// here because the rate grows with accumulated runtime).
    pub c: f64,
    /// Probability one in-memory restore succeeds. The default reading is
    /// 1.0 — a restore from intact peer memory is deterministic; see
    /// `restore_success_interrupted` for the pessimistic reading.
    pub restore_success: f64,
}

/// Pessimistic restore-success reading: a restore fails if a software
/// interruption lands during the window, i.e. P_re(t) = e^(−λ_sw·t^c).
pub fn restore_success_interrupted(p: &FleetParams, t_days: f64) -> f64 {
    survival(p.lambda_sw_per_day, p.c, t_days)
}

/// Fleet survival with in-memory protection after `t_days` of exposure.
pub fn inmem_survival(p: &FleetParams, t_days: f64) -> Result<f64> {
    let p_s = survival(p.lambda_hw_per_day, p.c, t_days);
    p_re_survive(p.k, p.n, p_s, p.restore_success)
}

/// Fleet survival with archival checkpointing after `t_days` of exposure.
pub fn archive_survival(p: &FleetParams, t_days: f64) -> Result<f64> {
    let p_s = survival(p.lambda_hw_per_day, p.c, t_days);
    let p_tr = survival(p.lambda_sw_per_day, p.c, t_days);
    p_ck_survive(p.k, p_s, p_tr)
}

/// Find the exposure time (days) at which a monotone-decreasing survival
/// function crosses `threshold`, by doubling then bisection to a relative
/// tolerance of 1e-6. A threshold of 1 is met at t = 0; a threshold the
/// curve never reaches is an error.
pub fn solve_interval_for_threshold(
    f: impl Fn(f64) -> Result<f64>,
    threshold: f64,
) -> Result<f64> {
    if !(0.0 < threshold && threshold <= 1.0) {
        return Err(Error::Reliability(format!(
            "threshold {threshold} must be in (0, 1]"
        )));
    }
    if threshold == 1.0 {
        return Ok(0.0);
    }
    let mut hi = 1e-6;
    let mut iters = 0;
    while f(hi)? > threshold {
        hi *= 2.0;
        iters += 1;
        if iters > 120 {
            return Err(Error::Reliability(format!(
                "survival never drops to {threshold}; is the failure rate zero?"
            )));
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-6 * hi.max(1e-9) {
        let mid = 0.5 * (lo + hi);
        if f(mid)? > threshold {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One survival-vs-time curve for a fixed Weibull shape.
#[derive(Debug, Clone)]
pub struct SurvivalCurve {
    pub c: f64,
    /// (days, in-memory survival, archival survival) triples.
    pub points: Vec<(f64, f64, f64)>,
}

/// Shapes used by the standard comparison sweep.
pub const DEFAULT_CURVE_SHAPES: [f64; 4] = [1.0, 1.3, 1.5, 2.0];

/// Sample both survival curves over `[0, t_max_days]` for each shape.
pub fn generate_survival_curves(
    base: &FleetParams,
    shapes: &[f64],
    t_max_days: f64,
    steps: u32,
) -> Result<Vec<SurvivalCurve>> {
    if steps == 0 || !(t_max_days > 0.0) {
        return Err(Error::Reliability("curve needs a positive span and step count".into()));
    }
    let mut out = Vec::with_capacity(shapes.len());
    for &c in shapes {
        let p = FleetParams { c, ..*base };
        let mut points = Vec::with_capacity(steps as usize + 1);
        for i in 0..=steps {
            let t = t_max_days * i as f64 / steps as f64;
            points.push((t, inmem_survival(&p, t)?, archive_survival(&p, t)?));
        }
        out.push(SurvivalCurve { c, points });
    }
    Ok(out)
}
