use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use reft_sim::config::SimConfig;
use reft_sim::failure::SECONDS_PER_DAY;
use reft_sim::reliability::{
    archive_survival, inmem_survival, lambda_re_fail, optimal_interval, redundant_ckpt_interval,
    restore_success_interrupted, solve_interval_for_threshold, FleetParams, SurvivalCurve,
    DEFAULT_CURVE_SHAPES,
};

use crate::common::{build_layout, chunk_ranges, thread_count, write_report, Layout};

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Directory the CSV reports are written to.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Survival probability whose crossing time is reported.
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,

    /// Horizon of the survival sweep, in days.
    #[arg(long, default_value_t = 60.0)]
    t_max: f64,

    /// Samples per curve.
    #[arg(long, default_value_t = 240)]
    steps: u32,

    /// Let software interruptions abort in-flight peer restores instead of
    /// treating a restore from intact memory as deterministic.
    #[arg(long)]
    pessimistic_restore: bool,
}

pub fn run(cfg: &SimConfig, args: &AnalyzeArgs) -> Result<()> {
    let layout = build_layout(cfg, None, None)?;
    let k = layout.topology.nodes.len() as u32;
    let n = cfg.cluster.dp_size;
    let base = FleetParams {
        k,
        n,
        lambda_hw_per_day: cfg.failure.lambda_hw,
        lambda_sw_per_day: cfg.failure.lambda_sw,
        c: cfg.failure.weibull_c,
        restore_success: 1.0,
    };

    let curves = sweep_curves(&base, &DEFAULT_CURVE_SHAPES, args)?;
    write_report(&args.out, "curves.csv", &curves_csv(&curves))?;

    println!(
        "fleet: {k} nodes in groups of {n}; λ_hw {}/day, λ_sw {}/day, restores {}",
        base.lambda_hw_per_day,
        base.lambda_sw_per_day,
        if args.pessimistic_restore { "interruptible" } else { "deterministic" },
    );
    println!("exposure time at which survival falls to {} (days):", args.threshold);
    let mut intervals = String::from("c,mode,threshold,t_days\n");
    for &c in &DEFAULT_CURVE_SHAPES {
        let p = FleetParams { c, ..base };
        let inmem = solve_interval_for_threshold(
            |t| {
                let p_t = if args.pessimistic_restore {
                    FleetParams { restore_success: restore_success_interrupted(&p, t), ..p }
                } else {
                    p
                };
                inmem_survival(&p_t, t)
            },
            args.threshold,
        );
        let archive = solve_interval_for_threshold(|t| archive_survival(&p, t), args.threshold);
        let fmt = |r: &reft_sim::Result<f64>| match r {
            Ok(t) => format!("{t:.4}"),
            Err(_) => "never".to_string(),
        };
        print!("  c={c}: redundant {} / archival {}", fmt(&inmem), fmt(&archive));
        if let (Ok(a), Ok(b)) = (&inmem, &archive) {
            print!("  ({:.0}× longer)", a / b);
        }
        println!();
        if let Ok(t) = inmem {
            intervals.push_str(&format!("{c},redundant,{},{t}\n", args.threshold));
        }
        if let Ok(t) = archive {
            intervals.push_str(&format!("{c},archival,{},{t}\n", args.threshold));
        }
    }
    write_report(&args.out, "intervals.csv", &intervals)?;

    plan_intervals(cfg, &layout, &base)?;
    Ok(())
}

/// Sample every shape's curve, splitting the shapes across worker threads.
fn sweep_curves(
    base: &FleetParams,
    shapes: &[f64],
    args: &AnalyzeArgs,
) -> Result<Vec<SurvivalCurve>> {
    let threads = thread_count();
    let chunks = chunk_ranges(shapes.len(), threads);
    log::info!("sweeping {} curves on {} thread(s)", shapes.len(), chunks.len());
    let mut slots: Vec<Option<Vec<SurvivalCurve>>> = vec![None; chunks.len()];
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for range in &chunks {
            let shapes = &shapes[range.clone()];
            handles.push(scope.spawn(move || curves_for(base, shapes, args)));
        }
        for (slot, h) in slots.iter_mut().zip(handles) {
            *slot = Some(h.join().expect("curve worker panicked")?);
        }
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(slots.into_iter().flatten().flatten().collect())
}

fn curves_for(base: &FleetParams, shapes: &[f64], args: &AnalyzeArgs) -> Result<Vec<SurvivalCurve>> {
    let mut out = Vec::with_capacity(shapes.len());
    for &c in shapes {
        let p = FleetParams { c, ..*base };
        let mut points = Vec::with_capacity(args.steps as usize + 1);
        for i in 0..=args.steps {
            let t = args.t_max * i as f64 / args.steps as f64;
            let p_t = if args.pessimistic_restore {
                FleetParams { restore_success: restore_success_interrupted(&p, t), ..p }
            } else {
                p
            };
            points.push((t, inmem_survival(&p_t, t)?, archive_survival(&p, t)?));
        }
        out.push(SurvivalCurve { c, points });
    }
    Ok(out)
}

fn curves_csv(curves: &[SurvivalCurve]) -> String {
    let mut out = String::from("# reft-sim v1\nc,t_days,p_redundant,p_archival\n");
    for curve in curves {
        for (t, inmem, archive) in &curve.points {
            out.push_str(&format!("{},{t},{inmem},{archive}\n", curve.c));
        }
    }
    out
}

/// Checkpoint cadence planning for this cluster's volumes and rates.
fn plan_intervals(cfg: &SimConfig, layout: &Layout, base: &FleetParams) -> Result<()> {
    let spec = &layout.topology.spec;
    let span = layout.schedules[0].iteration_span;
    let stage_bytes = cfg.stage_bytes_vec()?;
    let w_model: u64 = stage_bytes.iter().sum();
    let w_opt = cfg.model.optimizer_bytes as u128 * spec.pp_size as u128;
    let o_save_archive = (w_model as f64 + w_opt as f64) / spec.nfs_bandwidth;
    let lambda_any_per_s =
        base.k as f64 * (base.lambda_hw_per_day + base.lambda_sw_per_day) / SECONDS_PER_DAY;
    let t_opt = optimal_interval(o_save_archive, lambda_any_per_s)
        .context("archival interval needs a nonzero failure rate")?;
    println!(
        "archival cadence: save costs {o_save_archive:.1} s, optimal interval {t_opt:.1} s \
         (every {:.0} iterations)",
        (t_opt / span).round()
    );

    // The redundant snapshot round only has to outrun a second loss inside
    // one group; hardware takes the memory with it, software does not.
    let groups = base.k / base.n;
    let p_group = lambda_re_fail(base.lambda_hw_per_day, base.n)?;
    let lambda_re_per_s = (1.0 - (1.0 - p_group).powi(groups as i32)) / SECONDS_PER_DAY;
    let t_sn = layout
        .assignments
        .iter()
        .flatten()
        .map(|a| {
            let opt = a.optimizer_range.as_ref().map(|r| r.end - r.start).unwrap_or(0);
            (a.local_len() + opt) as f64 / spec.d2h_bandwidth
        })
        .fold(0.0f64, f64::max);
    let t_comp: f64 = layout
        .schedules
        .iter()
        .map(|s| s.bubble_seconds())
        .fold(f64::INFINITY, f64::min);
    let t_re = redundant_ckpt_interval(t_sn, t_comp, lambda_re_per_s)?;
    if t_re == 0.0 {
        println!(
            "redundant cadence: a {t_sn:.4} s round hides inside {t_comp:.4} s of bubbles — \
             snapshot every iteration"
        );
    } else {
        println!(
            "redundant cadence: round costs {t_sn:.4} s vs {t_comp:.4} s of bubbles; \
             snapshot every {t_re:.1} s ({:.0} iterations)",
            (t_re / span).round()
        );
    }
    Ok(())
}
