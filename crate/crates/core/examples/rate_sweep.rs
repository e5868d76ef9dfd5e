//! Briefly trains one model per bit-interval triple on a synthetic sphere
//! and writes the resulting rate-distortion plot.
//!
//! cargo run --release --example rate_sweep -- [epochs] [plot.svg]

use pvtc::config::{CodecConfig, Dataset, Shape, TrainConfig};
use pvtc::metrics::fmt_psnr;
use pvtc::svg::{rd_plot, Series};
use pvtc::train::{load_dataset, rate_point_sweep};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    let svg = args.next().unwrap_or_else(|| std::env::temp_dir().join("rd.svg").display().to_string());

    let mut base = CodecConfig::from_triple(8, 0, 0)?;
    base.stage.c_point = 16;
    base.stage.c_voxel = 16;
    base.stage.c_latent = 8;
    let tc = TrainConfig {
        epochs,
        batch_size: 1,
        samples_per_epoch: 8,
        augment: false,
        dataset: Dataset::Synthetic { shape: Shape::Sphere, bits: 8, points: 2000, seed: 7 },
        ..TrainConfig::default()
    };
    let data = load_dataset(&tc.dataset, 8)?;
    let triples = [(8, 0, 0), (7, 0, 1), (6, 1, 1), (5, 2, 1)];
    let (curve, rows) = rate_point_sweep(&base, &triples, &tc, &data, &data[0], |s| eprintln!("{s}"))?;
    for r in &rows {
        let (c, m, f) = r.triple;
        println!("[{c},{m},{f}]  {:>7.3} bpp  D1 {:>7} dB", r.bpp, fmt_psnr(r.d1_psnr));
    }
    let pts = curve.points().to_vec();
    std::fs::write(&svg, rd_plot(&[Series { name: "sphere", points: &pts }], "sphere sweep"))?;
    println!("plot written to {svg}");
    Ok(())
}
