//! Writes one PLY per synthetic shape and reads it back.
//!
//! cargo run --release --example synth_shapes -- [output_dir]

use std::path::PathBuf;

use pvtc::config::Shape;
use pvtc::io::{read_ply, write_ply, PlyFormat};
use pvtc::train::synth_cloud;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&dir)?;
    for shape in [Shape::Sphere, Shape::Torus, Shape::Plane, Shape::LidarRings] {
        let pc = synth_cloud(shape, 10, 5000, 42)?;
        let path = dir.join(format!("{shape}.ply"));
        write_ply(&pc, &path, PlyFormat::BinaryLittleEndian)?;
        let back = read_ply(&path, None)?;
        assert_eq!(back, pc);
        println!("{:<12} {:>5} points -> {}", shape.to_string(), pc.len(), path.display());
    }
    Ok(())
}
