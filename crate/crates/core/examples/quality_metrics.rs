//! D1/D2 PSNR of jittered and coarsened clouds, and BD deltas between two
//! rate-distortion curves.
//!
//! cargo run --release --example quality_metrics

use pvtc::config::Shape;
use pvtc::geometry::{DequantMode, QuantStep};
use pvtc::metrics::{bd_metrics, chamfer_augmented, fmt_psnr, point_metrics, RdCurve};
use pvtc::train::synth_cloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bits = 10;
    let pc = synth_cloud(Shape::Sphere, bits, 5000, 0)?;
    let reference = pc.to_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for sigma in [0.5, 1.0, 2.0] {
        let test: Vec<[f64; 3]> = reference
            .iter()
            .map(|p| [p[0] + rng.random_range(-sigma..sigma), p[1] + rng.random_range(-sigma..sigma), p[2] + rng.random_range(-sigma..sigma)])
            .collect();
        let m = point_metrics(&reference, &test, bits)?;
        println!(
            "uniform jitter +-{sigma}: D1 {} dB, D2 {} dB, chamfer {:.3}",
            fmt_psnr(m.d1_psnr),
            fmt_psnr(m.d2_psnr),
            chamfer_augmented(&reference, &test)?
        );
    }
    for step in [2u32, 4, 8] {
        let coarse = pc.quantize(QuantStep::new(step)?)?.dequantize(QuantStep::new(step)?, DequantMode::Center);
        let m = point_metrics(&reference, &coarse, bits)?;
        println!("voxel step {step}: {} points, D1 {} dB", coarse.len(), fmt_psnr(m.d1_psnr));
    }

    let anchor = RdCurve::new(vec![(0.2, 60.0), (0.5, 65.0), (1.1, 70.0), (2.3, 75.0)])?;
    let test = RdCurve::new(vec![(0.15, 61.0), (0.4, 66.0), (0.9, 71.0), (2.0, 76.0)])?;
    let bd = bd_metrics(&anchor, &test)?;
    println!("BD-rate {:.2}%  BD-PSNR {:.2} dB", bd.bd_rate, bd.bd_psnr);
    Ok(())
}
