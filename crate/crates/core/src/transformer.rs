//! Voxel self-attention over k-nearest neighborhoods with relative
//! positional encoding, and the residual transformer block built on it.

use std::rc::Rc;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::nn::{zero_params, Mlp};
use crate::sparse::{knn_voxels, SparseTensor, VoxelSet};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Weights of one transformer block.
#[derive(Debug, Clone)]
pub struct EvtParams {
    pub mlp_q: Mlp,
    pub mlp_k: Mlp,
    pub mlp_v: Mlp,
    /// Positional encoding of `P_A - P_Ai`, `3 -> d -> d`.
    pub mlp_p: Mlp,
    /// Post-attention feed-forward block, `d -> 2d -> d`.
    pub mlp_out: Mlp,
    pub d: usize,
    pub c: f64,
    pub k: usize,
}

impl EvtParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, c: f64, k: usize) -> Self {
        EvtParams {
            mlp_q: Mlp::new(store, &format!("{name}.q"), &[d, d, d]),
            mlp_k: Mlp::new(store, &format!("{name}.k"), &[d, d, d]),
            mlp_v: Mlp::new(store, &format!("{name}.v"), &[d, d, d]),
            mlp_p: Mlp::new(store, &format!("{name}.p"), &[3, d, d]),
            mlp_out: Mlp::new(store, &format!("{name}.out"), &[d, 2 * d, d]),
            d,
            c,
            k,
        }
    }

    /// Zeroes the last layer of every residual branch so the block starts
    /// as the identity; unnormalized cascades otherwise grow several-fold
    /// per block.
    pub fn zero_residual_init(&self, store: &mut ParamStore) {
        for m in [&self.mlp_v, &self.mlp_p, &self.mlp_out] {
            zero_params(store, &[m.last().w]);
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.mlp_q, &self.mlp_k, &self.mlp_v, &self.mlp_p, &self.mlp_out]
            .iter()
            .flat_map(|m| m.params())
            .collect()
    }
}

/// Query/neighbor pairs of a voxel set, grouped by query in ascending order.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    pub query: Rc<Vec<usize>>,
    pub neighbor: Rc<Vec<usize>>,
    /// `P_A - P_Ai` per pair, `pairs x 3`.
    pub rel: Tensor,
    pub n: usize,
}

impl Neighborhood {
    pub fn build(geom: &VoxelSet, k: usize) -> Self {
        let coords = geom.coords();
        let lists = knn_voxels(geom, coords, k.max(1));
        let mut query = Vec::new();
        let mut neighbor = Vec::new();
        let mut rel = Vec::new();
        for (q, list) in lists.iter().enumerate() {
            for &i in list {
                query.push(q);
                neighbor.push(i);
                rel.extend((0..3).map(|a| coords[q][a] as f64 - coords[i][a] as f64));
            }
        }
        let pairs = query.len();
        Neighborhood {
            query: Rc::new(query),
            neighbor: Rc::new(neighbor),
            rel: Tensor::matrix(pairs, 3, rel),
            n: geom.len(),
        }
    }

    pub fn num_pairs(&self) -> usize {
        self.query.len()
    }
}

/// Softmax of a `pairs x 1` logit column within each query's group.
fn grouped_softmax<'g>(g: &'g Graph, logits: &Var<'g>, nb: &Neighborhood) -> Result<Var<'g>> {
    // Shift by the per-group max (a constant) for stability.
    let lv = logits.value();
    let mut mx = vec![f64::NEG_INFINITY; nb.n];
    for (p, &q) in nb.query.iter().enumerate() {
        mx[q] = mx[q].max(lv.data()[p]);
    }
    let shift: Vec<f64> = nb.query.iter().map(|&q| mx[q]).collect();
    let e = logits.sub(&g.constant(Tensor::matrix(nb.num_pairs(), 1, shift)))?.exp();
    let z = e.scatter_add(nb.query.clone(), nb.n)?;
    let inv = z.log().neg().exp().gather(nb.query.clone())?;
    e.mul(&inv)
}

/// Self-attention output and the per-pair attention weights.
pub fn self_attention_weights<'g>(
    g: &'g Graph,
    t: &SparseTensor<'g>,
    p: &EvtParams,
    nb: &Neighborhood,
) -> Result<(SparseTensor<'g>, Var<'g>)> {
    if t.channels() != p.d {
        return Err(AutodiffError::Shape {
            op: "self_attention",
            lhs: t.feats.shape(),
            rhs: vec![p.d],
        });
    }
    let f = &t.feats;
    let q = p.mlp_q.forward(g, f)?;
    let k0 = p.mlp_k.forward(g, f)?;
    let v0 = p.mlp_v.forward(g, f)?;
    let e = p.mlp_p.forward(g, &g.constant(nb.rel.clone()))?;
    let k = k0.gather(nb.neighbor.clone())?.add(&e)?;
    let v = v0.gather(nb.neighbor.clone())?.add(&e)?;
    let qa = q.gather(nb.query.clone())?;
    let scale = 1.0 / (p.c * (p.d as f64).sqrt());
    let logits = qa.mul(&k)?.sum_axis(1)?.scale(scale);
    let w = grouped_softmax(g, &logits, nb)?;
    let out = v.mul(&w)?.scatter_add(nb.query.clone(), nb.n)?;
    Ok((t.with_feats(out)?, w))
}

pub fn self_attention<'g>(g: &'g Graph, t: &SparseTensor<'g>, p: &EvtParams) -> Result<SparseTensor<'g>> {
    let nb = Neighborhood::build(&t.geom, p.k);
    Ok(self_attention_weights(g, t, p, &nb)?.0)
}

/// `f + attn(f)`, then `f + mlp(f)`.
pub fn evt_block_with<'g>(g: &'g Graph, t: &SparseTensor<'g>, p: &EvtParams, nb: &Neighborhood) -> Result<SparseTensor<'g>> {
    let (a, _) = self_attention_weights(g, t, p, nb)?;
    let h = t.add(&a)?;
    let m = p.mlp_out.forward(g, &h.feats)?;
    h.with_feats(h.feats.add(&m)?)
}

pub fn evt_block<'g>(g: &'g Graph, t: &SparseTensor<'g>, p: &EvtParams) -> Result<SparseTensor<'g>> {
    let nb = Neighborhood::build(&t.geom, p.k);
    evt_block_with(g, t, p, &nb)
}

/// `blocks` applications of one shared-weight block.
pub fn evt_cascade<'g>(g: &'g Graph, t: &SparseTensor<'g>, p: &EvtParams, blocks: usize) -> Result<SparseTensor<'g>> {
    let nb = Neighborhood::build(&t.geom, p.k);
    let mut h = t.clone();
    for _ in 0..blocks {
        h = evt_block_with(g, &h, p, &nb)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Coord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(n: usize, d: usize, seed: u64) -> (Rc<VoxelSet>, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coords: Vec<Coord> = Vec::new();
        while coords.len() < n {
            let c = [rng.random_range(0..8), rng.random_range(0..8), rng.random_range(0..8)];
            if !coords.contains(&c) {
                coords.push(c);
            }
        }
        coords.sort_unstable();
        let f = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        (Rc::new(VoxelSet::new(coords, 3)), Tensor::matrix(n, d, f))
    }

    #[test]
    fn single_neighbor_passes_values_through() {
        let mut store = ParamStore::new(1);
        let p = EvtParams::new(&mut store, "evt", 4, 1.0, 1);
        zero_params(&mut store, &p.mlp_p.params());
        let (geom, f) = random_tensor(6, 4, 3);
        let g = Graph::with_params(&store);
        let t = SparseTensor::new(geom, g.constant(f.clone())).unwrap();
        let y = self_attention(&g, &t, &p).unwrap();
        let v = p.mlp_v.forward(&g, &g.constant(f)).unwrap();
        assert!(y.feats.value().max_abs_diff(&v.value()) < 1e-14);
    }

    #[test]
    fn zero_block_is_identity() {
        let mut store = ParamStore::new(1);
        let p = EvtParams::new(&mut store, "evt", 4, 1.0, 3);
        zero_params(&mut store, &p.params());
        let (geom, f) = random_tensor(10, 4, 4);
        let g = Graph::with_params(&store);
        let t = SparseTensor::new(geom, g.constant(f.clone())).unwrap();
        let y = evt_block(&g, &t, &p).unwrap();
        assert_eq!(*y.feats.value(), f);
    }

    #[test]
    fn weights_normalize_per_query() {
        let mut store = ParamStore::new(2);
        let p = EvtParams::new(&mut store, "evt", 8, 1.0, 4);
        let (geom, f) = random_tensor(20, 8, 5);
        let g = Graph::with_params(&store);
        let t = SparseTensor::new(geom.clone(), g.constant(f)).unwrap();
        let nb = Neighborhood::build(&geom, 4);
        let (_, w) = self_attention_weights(&g, &t, &p, &nb).unwrap();
        let mut sums = vec![0.0; 20];
        for (i, &q) in nb.query.iter().enumerate() {
            sums[q] += w.value().data()[i];
        }
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn zero_residual_init_is_identity() {
        let mut store = ParamStore::new(4);
        let p = EvtParams::new(&mut store, "evt", 6, 1.0, 4);
        p.zero_residual_init(&mut store);
        let (geom, f) = random_tensor(15, 6, 8);
        let g = Graph::with_params(&store);
        let t = SparseTensor::new(geom, g.constant(f.clone())).unwrap();
        let y = evt_cascade(&g, &t, &p, 3).unwrap();
        assert!(y.feats.value().max_abs_diff(&f) < 1e-15);
        // every branch still receives gradient through its zeroed last layer
        let grads = g.backward(y.feats.sum()).unwrap();
        assert!(grads.param(p.mlp_out.last().w).is_some());
    }

    #[test]
    fn shared_cascade_has_one_parameter_set() {
        let mut store = ParamStore::new(2);
        let p = EvtParams::new(&mut store, "evt", 8, 1.0, 4);
        let before = store.num_scalars();
        let (geom, f) = random_tensor(12, 8, 6);
        let g = Graph::with_params(&store);
        let t = SparseTensor::new(geom, g.constant(f)).unwrap();
        let y = evt_cascade(&g, &t, &p, 3).unwrap();
        let grads = g.backward(y.feats.sum()).unwrap();
        assert_eq!(store.num_scalars(), before);
        assert_eq!(grads.params().len(), p.params().len());
    }
}
