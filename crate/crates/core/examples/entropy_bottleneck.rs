//! Fits the factorized latent density to Laplacian samples by minimizing
//! the estimated bits, then range-codes the quantized latents.
//!
//! cargo run --release --example entropy_bottleneck

use pvtc::autodiff::{Adam, Graph, ParamStore, Tensor};
use pvtc::codec::bottleneck::{cross_entropy_bits, decode_latents, encode_latents, quantize_latents};
use pvtc::codec::EntropyBottleneck;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (rows, c) = (4000, 2);
    let scales = [0.8, 4.0];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f64> = (0..rows * c)
        .map(|i| {
            let u: f64 = rng.random_range(-0.5..0.5);
            -scales[i % c] * u.signum() * (1.0 - 2.0 * u.abs()).ln()
        })
        .collect();
    let x = Tensor::matrix(rows, c, data);
    let q = quantize_latents(&x);

    let mut store = ParamStore::new(0);
    let eb = EntropyBottleneck::new(&mut store, "eb", c);
    let mut adam = Adam::new(0.02);
    // The density is fitted to integer values plus uniform noise.
    let noisy = Tensor::matrix(rows, c, q.iter().map(|&v| v as f64 + rng.random_range(-0.5..0.5)).collect());
    for step in 0..=300 {
        let g = Graph::with_params(&store);
        let bits = eb.bits(&g, &g.constant(noisy.clone()))?;
        let per_latent = bits.value().item() / (rows * c) as f64;
        store.zero_grad();
        g.backward(bits.scale(1.0 / (rows * c) as f64))?.accumulate_into(&mut store);
        adam.step(&mut store)?;
        if step % 100 == 0 {
            let pmf = eb.pmf_table(&store)?;
            let tables = eb.frequency_tables(&store)?;
            let bytes = encode_latents(&q, c, &tables)?;
            assert_eq!(decode_latents(&bytes, rows, c, &tables)?, q);
            println!(
                "step {step:>3}: training estimate {per_latent:.3} bits/latent, model cross-entropy {:.0} B, coded {} B",
                cross_entropy_bits(&q, c, &pmf) / 8.0,
                bytes.len()
            );
        }
    }
    Ok(())
}
