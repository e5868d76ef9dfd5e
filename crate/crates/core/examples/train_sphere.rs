//! Trains a `[5,1,2]` model on a synthetic 2000-point sphere and compares
//! the decoded D1 PSNR before and after training.
//!
//! cargo run --release --example train_sphere -- [epochs]

use std::time::Instant;

use pvtc::codec::CodecModel;
use pvtc::config::{CodecConfig, Shape, TrainConfig};
use pvtc::metrics::psnr_d1;
use pvtc::pipeline;
use pvtc::train::{synth_cloud, train, TrainOutputs};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(50);

    let pc = synth_cloud(Shape::Sphere, 8, 2000, 7)?;
    let mut cfg = CodecConfig::from_triple(5, 1, 2)?;
    cfg.stage.c_point = 32;
    cfg.stage.c_voxel = 32;
    cfg.stage.c_latent = 16;
    let mut model = CodecModel::new(cfg)?;

    let eval = |m: &CodecModel| -> Result<(f64, f64), Box<dyn std::error::Error>> {
        let (bytes, dec) = pipeline::roundtrip(&pc, m)?;
        Ok((pipeline::bpp(bytes.len(), pc.len() as u64), psnr_d1(&pc, &dec.cloud.to_f64(), 8)?))
    };
    let (bpp0, d0) = eval(&model)?;
    println!("untrained: {bpp0:.3} bpp, D1 {d0:.2} dB");

    let tc = TrainConfig {
        epochs,
        batch_size: 1,
        samples_per_epoch: 16,
        augment: false,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let report = train(&mut model, &tc, std::slice::from_ref(&pc), &TrainOutputs::default(), |e, l| {
        if e % 5 == 0 || e + 1 == epochs {
            println!("epoch {e:3}  loss {l:.4}  ({:.0}s)", t.elapsed().as_secs_f64());
        }
    })?;
    let (bpp1, d1) = eval(&model)?;
    println!("trained:   {bpp1:.3} bpp, D1 {d1:.2} dB");
    let ratio = report.epoch_means.last().unwrap() / report.epoch_means[0];
    println!("final/first epoch loss {ratio:.3}, D1 gain {:.2} dB", d1 - d0);
    Ok(())
}
