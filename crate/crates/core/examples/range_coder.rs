//! Adaptive binary coding and static multi-symbol coding against their
//! entropy bounds.
//!
//! cargo run --release --example range_coder

use pvtc::rangecoder::{AdaptiveBinaryModel, FrequencyTable, RangeDecoder, RangeEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for p in [0.02, 0.1, 0.3, 0.5] {
        let bits: Vec<bool> = (0..200_000).map(|_| rng.random_bool(p)).collect();
        let mut enc = RangeEncoder::new();
        let mut model = AdaptiveBinaryModel::new();
        for &b in &bits {
            enc.encode_bit(&mut model, b);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes)?;
        let mut model = AdaptiveBinaryModel::new();
        for &b in &bits {
            assert_eq!(dec.decode_bit(&mut model)?, b);
        }
        let h = -(p * p.log2() + (1.0 - p) * (1.0 - p).log2());
        println!("binary p={p:<4}  {:>6} B  bound {:>8.0} B", bytes.len(), bits.len() as f64 * h / 8.0);
    }

    let probs = [0.5, 0.25, 0.125, 0.0625, 0.0625];
    let table = FrequencyTable::from_probabilities(&probs)?;
    let cdf: Vec<f64> = probs.iter().scan(0.0, |s, p| { *s += p; Some(*s) }).collect();
    let syms: Vec<usize> = (0..100_000)
        .map(|_| {
            let u: f64 = rng.random();
            cdf.iter().position(|&c| u < c).unwrap_or(probs.len() - 1)
        })
        .collect();
    let mut enc = RangeEncoder::new();
    for &s in &syms {
        enc.encode_symbol(&table, s)?;
    }
    let bytes = enc.finish();
    let mut dec = RangeDecoder::new(&bytes)?;
    for &s in &syms {
        assert_eq!(dec.decode_symbol(&table)?, s);
    }
    let h: f64 = probs.iter().map(|p| -p * p.log2()).sum();
    println!("5-symbol table  {:>6} B  bound {:>8.0} B", bytes.len(), syms.len() as f64 * h / 8.0);
    Ok(())
}
