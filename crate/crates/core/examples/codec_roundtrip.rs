//! Encodes and decodes one cloud with an untrained model for each kind of
//! bit-interval triple, then with the lossless octree.
//!
//! cargo run --release --example codec_roundtrip

use pvtc::codec::CodecModel;
use pvtc::config::{CodecConfig, Shape};
use pvtc::io::unpack_container;
use pvtc::metrics::{fmt_psnr, point_metrics};
use pvtc::pipeline;
use pvtc::train::synth_cloud;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pc = synth_cloud(Shape::Torus, 9, 4000, 3)?;
    for (c, m, f) in [(9, 0, 0), (6, 0, 3), (6, 3, 0), (5, 2, 2)] {
        let mut cfg = CodecConfig::from_triple(c, m, f)?;
        cfg.stage.c_point = 16;
        cfg.stage.c_voxel = 16;
        cfg.stage.c_latent = 8;
        let model = CodecModel::new(cfg)?;
        let (bytes, dec) = pipeline::roundtrip(&pc, &model)?;
        let parts = unpack_container(&bytes)?;
        let pm = point_metrics(&pc.to_f64(), &dec.cloud.to_f64(), 9)?;
        println!(
            "[{c},{m},{f}]  {:>6} B (partition {:>5}, features {:>5})  {:>7.3} bpp  D1 {:>7} dB  D2 {:>7} dB  {} points",
            bytes.len(),
            parts.part.len(),
            parts.feat.len(),
            pipeline::bpp(bytes.len(), pc.len() as u64),
            fmt_psnr(pm.d1_psnr),
            fmt_psnr(pm.d2_psnr),
            dec.cloud.len()
        );
    }
    Ok(())
}
