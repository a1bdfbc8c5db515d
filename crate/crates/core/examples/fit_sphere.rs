//! Fits a field to the analytic sphere of radius 0.9 and prints held-out
//! errors per sample type.
//!
//! `cargo run --release --example fit_sphere -- [iterations] [batch scale] [lr]`

use pddf::field::SirenConfig;
use pddf::geometry::AnalyticShape;
use pddf::sampler::{generate, DatasetSpec, Oracle, TypeCounts};
use pddf::trainer::{fit_shape, BatchCounts, TrainConfig, TrainOutputs};

fn main() -> pddf::Result<()> {
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("numeric argument"))
        .collect();
    let iterations = args.first().copied().unwrap_or(2000.0) as usize;
    let batch_scale = args.get(1).copied().unwrap_or(1.0);
    let lr = args.get(2).copied().unwrap_or(1e-4);

    let oracle = Oracle::analytic(AnalyticShape::sphere(0.9));
    let train = generate(
        &oracle,
        &DatasetSpec {
            counts: TypeCounts::new(20_000, 20_000, 10_000, 10_000, 10_000, 10_000),
            seed: 1,
            ..DatasetSpec::default()
        },
    )?;
    let held_out = generate(
        &oracle,
        &DatasetSpec {
            counts: TypeCounts::new(2000, 2000, 1000, 1000, 1000, 1000),
            seed: 1000,
            ..DatasetSpec::default()
        },
    )?;
    let config = TrainConfig {
        model: SirenConfig::new(vec![128; 4]),
        iterations,
        lr,
        batch: BatchCounts {
            types: TypeCounts::new(96, 96, 48, 48, 48, 48).scaled(batch_scale),
            reg_only: (16.0 * batch_scale) as usize,
        },
        report_interval: (iterations / 20).max(1),
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let (_, report) = fit_shape(&train, Some(&held_out.samples), &config, &TrainOutputs::default())?;
    for r in &report.history {
        println!(
            "{:>6} lr {:.2e} total {:.4} l_d {:.5} l_xi {:.4}",
            r.iter, r.lr, r.losses.total, r.losses.l_d, r.losses.l_xi
        );
    }
    let metrics = report.held_out.expect("held-out set");
    for (kind, m) in &metrics.per_type {
        println!(
            "{kind}: L1 {:.4} BCE {:.4} ({} visible of {})",
            m.depth_l1, m.bce, m.visible, m.count
        );
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
