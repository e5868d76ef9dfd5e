//! Runs the kNN voxel transformer over a small sparse tensor and shows the
//! attention weights of one voxel.
//!
//! cargo run --release --example voxel_transformer

use std::rc::Rc;

use pvtc::autodiff::{Graph, ParamStore, Tensor};
use pvtc::config::Shape;
use pvtc::sparse::{SparseTensor, VoxelSet};
use pvtc::train::synth_cloud;
use pvtc::transformer::{evt_cascade, self_attention_weights, EvtParams, Neighborhood};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pc = synth_cloud(Shape::Sphere, 6, 300, 0)?;
    let geom = Rc::new(VoxelSet::from_cloud(&pc));
    let d = 8;
    let feats = Tensor::matrix(geom.len(), d, (0..geom.len() * d).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect());

    let mut store = ParamStore::new(5);
    let p = EvtParams::new(&mut store, "evt", d, 1.0, 16);
    let g = Graph::with_params(&store);
    let t = SparseTensor::new(geom.clone(), g.constant(feats.clone()))?;

    let nb = Neighborhood::build(&geom, p.k);
    let (_, w) = self_attention_weights(&g, &t, &p, &nb)?;
    let w = w.value();
    println!("voxel 0 at {:?} attends to:", geom.coords()[0]);
    for (pair, &j) in nb.neighbor.iter().enumerate().filter(|&(i, _)| nb.query[i] == 0) {
        println!("  {:?}  weight {:.4}", geom.coords()[j], w.data()[pair]);
    }

    let rms = |y: &Tensor| (y.data().iter().map(|v| v * v).sum::<f64>() / y.numel() as f64).sqrt();
    println!("input RMS {:.3}", rms(&feats));
    // Random residual branches compound across shared-weight blocks; the
    // codec starts them at zero instead.
    let mut zstore = store.clone();
    p.zero_residual_init(&mut zstore);
    let gz = Graph::with_params(&zstore);
    let tz = SparseTensor::new(geom.clone(), gz.constant(feats.clone()))?;
    for blocks in [1, 2, 4] {
        let y = evt_cascade(&g, &t, &p, blocks)?.feats.value();
        let yz = evt_cascade(&gz, &tz, &p, blocks)?.feats.value();
        println!("{blocks} block(s): output RMS {:.3} random init, {:.3} zero-residual init", rms(&y), rms(&yz));
    }
    Ok(())
}
