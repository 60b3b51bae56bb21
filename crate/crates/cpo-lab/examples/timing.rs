//! End-to-end desk experiment pilot. Not part of the test suite.

use std::time::Instant;

use cpo_lab::train::{run_experiment, ExperimentSpec};

fn main() {
    env_logger::init();
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let spec = ExperimentSpec::desk(seed);
    let dir = std::env::temp_dir().join(format!("cpo-pilot-{seed}"));
    let t0 = Instant::now();
    let out = run_experiment(&spec, &dir).unwrap();
    let dt = t0.elapsed();
    println!("seed {seed}: {:.1} s total", dt.as_secs_f64());
    println!("baseline final: {:?}", out.baseline_final);
    println!("cpo      final: {:?}", out.cpo_final);
    println!(
        "gt_top1 delta: {:+.3} (need >= +0.05)",
        out.cpo_final.gt_top1_rate - out.baseline_final.gt_top1_rate
    );
    println!(
        "win_rate delta: {:+.3} (need >= -0.02)",
        out.cpo_final.win_rate - out.baseline_final.win_rate
    );
    println!(
        "reverse_kl ratio: {:.3} (need <= 1.1)",
        out.cpo_final.reverse_kl / out.baseline_final.reverse_kl
    );
    for (alpha, rec) in &out.sweep_finals {
        println!(
            "alpha {alpha:.2}: gt_top1 {:.3} win {:.3} kl {:.4} nll {:.4}",
            rec.gt_top1_rate, rec.win_rate, rec.reverse_kl, rec.length_norm_nll
        );
    }
}
