//! Lossless octree coding of synthetic surfaces at several bit depths.
//!
//! cargo run --release --example octree_roundtrip

use pvtc::config::Shape;
use pvtc::octree::{decode_octree, encode_octree};
use pvtc::pipeline::bpp;
use pvtc::train::synth_cloud;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("{:<12} {:>4} {:>7} {:>8} {:>7}", "shape", "bits", "points", "bytes", "bpp");
    for shape in [Shape::Sphere, Shape::Torus, Shape::Plane, Shape::LidarRings] {
        for bits in [8u8, 10, 12] {
            let pc = synth_cloud(shape, bits, 4000, 1)?;
            let bytes = encode_octree(&pc)?;
            let back = decode_octree(&bytes, bits, pc.len() as u64)?;
            assert_eq!(back, pc, "octree roundtrip must be lossless");
            println!(
                "{:<12} {bits:>4} {:>7} {:>8} {:>7.3}",
                shape.to_string(),
                pc.len(),
                bytes.len(),
                bpp(bytes.len(), pc.len() as u64)
            );
        }
    }
    Ok(())
}
