//! Fits a small MLP to a 1-D function with the reverse-mode engine and Adam.
//!
//! cargo run --release --example autodiff_fit

use pvtc::autodiff::{Adam, Graph, ParamStore, Tensor};
use pvtc::nn::Mlp;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n = 64;
    let xs: Vec<f64> = (0..n).map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64).collect();
    let x = Tensor::matrix(n, 1, xs.clone());
    let y = Tensor::matrix(n, 1, xs.iter().map(|v| v.sin()).collect());

    let mut store = ParamStore::new(0);
    let mlp = Mlp::new(&mut store, "f", &[1, 32, 32, 1]);
    let mut adam = Adam::new(1e-2);
    for step in 0..=1000 {
        let g = Graph::with_params(&store);
        let err = mlp.forward(&g, &g.constant(x.clone()))?.sub(&g.constant(y.clone()))?;
        let loss = err.square().mean();
        if step % 200 == 0 {
            println!("step {step:>4}  mse {:.6}", loss.value().item());
        }
        store.zero_grad();
        g.backward(loss)?.accumulate_into(&mut store);
        adam.step(&mut store)?;
    }
    Ok(())
}
