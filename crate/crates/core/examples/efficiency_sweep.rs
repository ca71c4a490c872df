//! Efficiency of every schedule, with and without collision detection,
//! written as CSV to stdout.

use qkd_cascade::bench::{run_plan, summary, write_csv, Baseline, ExperimentPlan, ModeChoice};

fn main() -> qkd_cascade::Result<()> {
    let frames = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let plan = ExperimentPlan {
        qber_list: vec![0.01, 0.03, 0.05],
        mode_list: ["he", "me", "mt", "ht", "orig"].iter().map(|m| m.parse::<ModeChoice>()).collect::<Result<_, _>>()?,
        stages_list: vec![4],
        frames_per_cell: frames,
        seed: 3,
        ..ExperimentPlan::default()
    };
    let rows = run_plan(&plan);
    eprint!("{}", summary(&rows));
    write_csv(&rows, std::io::stdout().lock())?;

    let plain = plan.clone().with_baseline(Baseline::NoCollisionDetection);
    let off = run_plan(&plain);
    eprintln!("\nlist scans with / without the lock bit:");
    for (on, off) in rows.iter().zip(&off) {
        if let (Some(a), Some(b)) = (&on.stats, &off.stats) {
            eprintln!(
                "  {:>5} {:<4} {:>7} / {:>7}  (f {:.4} / {:.4})",
                on.cell.qber, on.cell.mode.label(), a.searchlist_calls, b.searchlist_calls, a.f, b.f
            );
        }
    }
    Ok(())
}
