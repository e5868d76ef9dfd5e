//! Factorized entropy model for the latent feature map: one learned
//! monotone CDF per channel, used both as a differentiable rate estimate
//! and to build the range coder's frequency tables.

use std::rc::Rc;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rangecoder::{CoderError, FrequencyTable, RangeDecoder, RangeEncoder};

pub const LATENT_MIN: i32 = -64;
pub const LATENT_MAX: i32 = 63;
pub const NUM_SYMBOLS: usize = (LATENT_MAX - LATENT_MIN + 1) as usize;
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum BottleneckError {
    #[error("invalid density for channel {channel}: {reason}")]
    InvalidModel { channel: usize, reason: String },
    #[error(transparent)]
    Coder(#[from] CoderError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Per-channel density `c(x) = sigmoid(L3(g(L2(g(L1(x))))))` with
/// `g(h) = h + tanh(a) tanh(h)` and positive (softplus) layer weights.
#[derive(Debug, Clone)]
pub struct EntropyBottleneck {
    pub channels: usize,
    /// `3 x C`, `9 x C`, `3 x C` raw weights (row `i*3+j` of `m2` maps unit j to unit i).
    pub m1: ParamId,
    pub m2: ParamId,
    pub m3: ParamId,
    pub b1: ParamId,
    pub b2: ParamId,
    pub b3: ParamId,
    pub a1: ParamId,
    pub a2: ParamId,
}

fn inv_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl EntropyBottleneck {
    /// Initialized to a broad density of scale about 10.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let init_scale: f64 = 10.0;
        let scale = init_scale.powf(1.0 / 3.0);
        let w12 = inv_softplus(1.0 / scale / 3.0);
        let w3 = inv_softplus(1.0 / scale);
        let c = channels;
        let p = |s: &str| format!("{name}.{s}");
        let m1 = store.add_tensor(&p("m1"), Tensor::full(&[3, c], w12));
        let m2 = store.add_tensor(&p("m2"), Tensor::full(&[9, c], w12));
        let m3 = store.add_tensor(&p("m3"), Tensor::full(&[3, c], w3));
        let b1 = store.uniform(&p("b1"), &[3, c], -0.5, 0.5);
        let b2 = store.uniform(&p("b2"), &[3, c], -0.5, 0.5);
        let b3 = store.uniform(&p("b3"), &[1, c], -0.5, 0.5);
        let a1 = store.zeros(&p("a1"), &[3, c]);
        let a2 = store.zeros(&p("a2"), &[3, c]);
        EntropyBottleneck {
            channels,
            m1,
            m2,
            m3,
            b1,
            b2,
            b3,
            a1,
            a2,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.m1, self.m2, self.m3, self.b1, self.b2, self.b3, self.a1, self.a2]
    }

    /// CDF logits for every element of `x` (`N x C`), channel given by column.
    pub fn logits_cdf<'g>(&self, g: &'g Graph, x: &Var<'g>) -> Result<Var<'g>, AutodiffError> {
        if x.cols() != self.channels {
            return Err(AutodiffError::Shape {
                op: "bottleneck",
                lhs: x.shape(),
                rhs: vec![self.channels],
            });
        }
        let row = |p: ParamId, r: usize| g.param(p).gather(Rc::new(vec![r]));
        let srow = |p: ParamId, r: usize| -> Result<Var<'g>, AutodiffError> { g.param(p).softplus().gather(Rc::new(vec![r])) };
        let gate = |h: Var<'g>, a: ParamId, r: usize| -> Result<Var<'g>, AutodiffError> {
            h.add(&row(a, r)?.tanh().mul(&h.tanh())?)
        };
        let mut h1 = Vec::with_capacity(3);
        for j in 0..3 {
            let h = x.mul(&srow(self.m1, j)?)?.add(&row(self.b1, j)?)?;
            h1.push(gate(h, self.a1, j)?);
        }
        let mut h2 = Vec::with_capacity(3);
        for i in 0..3 {
            let mut h = h1[0].mul(&srow(self.m2, i * 3)?)?;
            for (j, hj) in h1.iter().enumerate().skip(1) {
                h = h.add(&hj.mul(&srow(self.m2, i * 3 + j)?)?)?;
            }
            let h = h.add(&row(self.b2, i)?)?;
            h2.push(gate(h, self.a2, i)?);
        }
        let mut l = h2[0].mul(&srow(self.m3, 0)?)?;
        for (j, hj) in h2.iter().enumerate().skip(1) {
            l = l.add(&hj.mul(&srow(self.m3, j)?)?)?;
        }
        l.add(&row(self.b3, 0)?)
    }

    /// Probability mass of the unit interval around every element of `x`,
    /// floored at [`LIKELIHOOD_FLOOR`].
    pub fn likelihood<'g>(&self, g: &'g Graph, x: &Var<'g>) -> Result<Var<'g>, AutodiffError> {
        let lower = self.logits_cdf(g, &x.add_scalar(-0.5))?;
        let upper = self.logits_cdf(g, &x.add_scalar(0.5))?;
        // Evaluate in whichever tail keeps the sigmoid away from 1.
        let sum = lower.value();
        let upv = upper.value();
        let sign: Vec<f64> = sum
            .data()
            .iter()
            .zip(upv.data())
            .map(|(a, b)| if a + b > 0.0 { -1.0 } else { 1.0 })
            .collect();
        let s = g.constant(Tensor::new(&lower.shape(), sign)?);
        let p = upper.mul(&s)?.sigmoid().sub(&lower.mul(&s)?.sigmoid())?.abs();
        let pv = p.value();
        let keep: Vec<f64> = pv.data().iter().map(|&v| if v > LIKELIHOOD_FLOOR { 1.0 } else { 0.0 }).collect();
        let fill: Vec<f64> = keep.iter().map(|k| (1.0 - k) * LIKELIHOOD_FLOOR).collect();
        let shape = p.shape();
        p.mul(&g.constant(Tensor::new(&shape, keep)?))?
            .add(&g.constant(Tensor::new(&shape, fill)?))
    }

    /// Total bits `sum(-log2 p)` of `x` under the model.
    pub fn bits<'g>(&self, g: &'g Graph, x: &Var<'g>) -> Result<Var<'g>, AutodiffError> {
        Ok(self.likelihood(g, x)?.log().sum().scale(-1.0 / std::f64::consts::LN_2))
    }

    /// Symbol probabilities over the clamped support for every channel, with
    /// tail mass folded into the end symbols.
    pub fn pmf_table(&self, store: &ParamStore) -> Result<Vec<Vec<f64>>, BottleneckError> {
        let g = Graph::with_params(store);
        let c = self.channels;
        // CDF at every half-integer edge from LATENT_MIN + 0.5 to LATENT_MAX - 0.5
        let edges: Vec<f64> = (LATENT_MIN..LATENT_MAX).map(|q| q as f64 + 0.5).collect();
        let mut data = Vec::with_capacity(edges.len() * c);
        for &e in &edges {
            data.extend(std::iter::repeat_n(e, c));
        }
        let x = g.constant(Tensor::matrix(edges.len(), c, data));
        let l = self.logits_cdf(&g, &x)?.value();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut tables = Vec::with_capacity(c);
        for ch in 0..c {
            let cdf: Vec<f64> = (0..edges.len()).map(|r| sig(l.get(r, ch))).collect();
            if cdf.iter().any(|v| !v.is_finite()) {
                return Err(BottleneckError::InvalidModel {
                    channel: ch,
                    reason: "non-finite CDF".into(),
                });
            }
            if cdf.windows(2).any(|w| w[1] < w[0]) {
                return Err(BottleneckError::InvalidModel {
                    channel: ch,
                    reason: "CDF is not monotone".into(),
                });
            }
            let mut pmf = Vec::with_capacity(NUM_SYMBOLS);
            pmf.push(cdf[0]);
            for w in cdf.windows(2) {
                pmf.push(w[1] - w[0]);
            }
            pmf.push(1.0 - cdf[cdf.len() - 1]);
            tables.push(pmf);
        }
        Ok(tables)
    }

    pub fn frequency_tables(&self, store: &ParamStore) -> Result<Vec<FrequencyTable>, BottleneckError> {
        self.pmf_table(store)?
            .iter()
            .map(|p| FrequencyTable::from_probabilities(p).map_err(BottleneckError::from))
            .collect()
    }
}

/// Rounds and clamps latents to the coded support.
pub fn quantize_latents(x: &Tensor) -> Vec<i32> {
    x.data()
        .iter()
        .map(|&v| (v.round() as i64).clamp(LATENT_MIN as i64, LATENT_MAX as i64) as i32)
        .collect()
}

/// Range-codes row-major `rows x channels` latents with one table per channel.
pub fn encode_latents(q: &[i32], channels: usize, tables: &[FrequencyTable]) -> Result<Vec<u8>, BottleneckError> {
    let mut enc = RangeEncoder::new();
    for (i, &v) in q.iter().enumerate() {
        enc.encode_symbol(&tables[i % channels], (v - LATENT_MIN) as usize)?;
    }
    Ok(enc.finish())
}

pub fn decode_latents(bytes: &[u8], rows: usize, channels: usize, tables: &[FrequencyTable]) -> Result<Vec<i32>, BottleneckError> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(rows * channels);
    for i in 0..rows * channels {
        out.push(dec.decode_symbol(&tables[i % channels])? as i32 + LATENT_MIN);
    }
    Ok(out)
}

/// The model's own estimate `sum(-log2 PMF(q))` using the coded tables' source PMFs.
pub fn cross_entropy_bits(q: &[i32], channels: usize, pmf: &[Vec<f64>]) -> f64 {
    q.iter()
        .enumerate()
        .map(|(i, &v)| -pmf[i % channels][(v - LATENT_MIN) as usize].max(LIKELIHOOD_FLOOR).log2())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pmf_sums_to_one_and_is_positive() {
        let mut store = ParamStore::new(0);
        let eb = EntropyBottleneck::new(&mut store, "eb", 4);
        for pmf in eb.pmf_table(&store).unwrap() {
            assert_eq!(pmf.len(), NUM_SYMBOLS);
            assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(pmf.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn likelihood_matches_table() {
        let mut store = ParamStore::new(4);
        let eb = EntropyBottleneck::new(&mut store, "eb", 2);
        let pmf = eb.pmf_table(&store).unwrap();
        let g = Graph::with_params(&store);
        let x = g.constant(Tensor::matrix(2, 2, vec![0.0, 3.0, -5.0, 1.0]));
        let p = eb.likelihood(&g, &x).unwrap().value();
        for (i, &v) in [0, 3, -5, 1].iter().enumerate() {
            let want = pmf[i % 2][(v - LATENT_MIN) as usize];
            assert!((p.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn latent_roundtrip() {
        let mut store = ParamStore::new(1);
        let eb = EntropyBottleneck::new(&mut store, "eb", 3);
        let tables = eb.frequency_tables(&store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q: Vec<i32> = (0..300).map(|_| rng.random_range(LATENT_MIN..=LATENT_MAX)).collect();
        let bytes = encode_latents(&q, 3, &tables).unwrap();
        assert_eq!(decode_latents(&bytes, 100, 3, &tables).unwrap(), q);
    }

    #[test]
    fn quantize_clamps() {
        let t = Tensor::matrix(1, 4, vec![0.4, -0.6, 100.0, -70.2]);
        assert_eq!(quantize_latents(&t), vec![0, -1, 63, -64]);
    }
}
