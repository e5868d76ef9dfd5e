//! Shared helpers for the integration tests: a central-difference gradient
//! checker and the catalogue of cases it runs over.
#![allow(dead_code)]

use std::rc::Rc;

use pvtc::autodiff::{Graph, KernelMap, ParamId, ParamStore, Tensor, Var};
use pvtc::codec::{EntropyBottleneck, PointAnalysis, PointSynthesis, VoxelStage};
use pvtc::metrics::{bce_var, chamfer_var, rd_loss, LossConfig};
use pvtc::nn::Mlp;
use pvtc::sparse::{downscale2, restrict_to, sparse_conv, upsample2_nn, Downscale2, SparseConv, SparseTensor, StridedConv, VoxelSet};
use pvtc::transformer::{evt_block, evt_cascade, EvtParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Below this magnitude errors are measured on an absolute scale, where
/// central differences are dominated by rounding. Scaled up by |f| since
/// the rounding noise of `(f(x+h) - f(x-h)) / 2h` grows like eps |f| / h.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(lo..hi)).collect())
}

/// Reduces any output to a scalar with fixed random weights so every
/// element contributes to the checked gradient.
pub fn project<'g>(g: &'g Graph, y: &Var<'g>, seed: u64) -> Var<'g> {
    let v = y.value();
    let w = rand_tensor(&mut rng(seed ^ 0x9e37), v.rows(), v.cols(), -1.0, 1.0).reshaped(v.shape()).unwrap();
    y.mul(&g.constant(w)).unwrap().sum()
}

/// Max relative error between backprop and central differences, over every
/// scalar of `inputs` and of the parameters `ids`.
pub fn check<F>(store: &ParamStore, ids: &[ParamId], inputs: &[Tensor], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let eval = |s: &ParamStore, xs: &[Tensor]| {
        let g = Graph::with_params(s);
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).value().item()
    };
    let g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&g, &vars);
    let floor = FLOOR.max(1e-5 * loss.value().item().abs());
    let grads = g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut xs = inputs.to_vec();
        for j in 0..t.numel() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + H;
            let fp = eval(store, &xs);
            xs[i].data_mut()[j] = x0 - H;
            let fm = eval(store, &xs);
            xs[i].data_mut()[j] = x0;
            worst = worst.max(rel_err(analytic.data()[j], (fp - fm) / (2.0 * H), floor));
        }
    }
    let mut s = store.clone();
    for &id in ids {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for j in 0..store.get(id).numel() {
            let x0 = store.get(id).data()[j];
            s.get_mut(id).data_mut()[j] = x0 + H;
            let fp = eval(&s, inputs);
            s.get_mut(id).data_mut()[j] = x0 - H;
            let fm = eval(&s, inputs);
            s.get_mut(id).data_mut()[j] = x0;
            worst = worst.max(rel_err(analytic.data()[j], (fp - fm) / (2.0 * H), floor));
        }
    }
    worst
}

pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    check(&ParamStore::new(0), &[], inputs, f)
}

/// Replaces zero-initialised tensors (biases) with small random values.
/// Zero biases put ReLU inputs exactly on the kink wherever the input row is
/// zero, e.g. the self pair of a relative-position encoding.
pub fn jitter_zero_params(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        if t.data().iter().all(|&x| x == 0.0) {
            for x in t.data_mut() {
                *x = r.random_range(-0.5..0.5);
            }
        }
    }
}

pub struct Case {
    pub name: &'static str,
    pub run: fn() -> f64,
}

fn unary(seed: u64, lo: f64, hi: f64, op: for<'g> fn(&Var<'g>) -> Var<'g>) -> f64 {
    let x = rand_tensor(&mut rng(seed), 3, 4, lo, hi);
    check_inputs(&[x], |g, v| project(g, &op(&v[0]), seed))
}

/// Random magnitudes in [0.1, 1) with alternating signs, keeping kinks at
/// zero out of reach of the finite-difference step.
fn away_from_zero(seed: u64) -> Tensor {
    let mut t = rand_tensor(&mut rng(seed), 3, 4, 0.1, 1.0);
    for (i, x) in t.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *x = -*x;
        }
    }
    t
}

pub fn small_geom(seed: u64, n: usize, level: u8) -> Rc<VoxelSet> {
    let mut r = rng(seed);
    let max = 1u32 << level;
    let mut c = Vec::new();
    while c.len() < n {
        let p = [r.random_range(0..max), r.random_range(0..max), r.random_range(0..max)];
        if !c.contains(&p) {
            c.push(p);
        }
    }
    c.sort_unstable();
    Rc::new(VoxelSet::new(c, level))
}

fn two(seed: u64, a: (usize, usize), b: (usize, usize)) -> [Tensor; 2] {
    let mut r = rng(seed);
    [rand_tensor(&mut r, a.0, a.1, -1.0, 1.0), rand_tensor(&mut r, b.0, b.1, -1.0, 1.0)]
}

fn primitive_cases() -> Vec<Case> {
    vec![
        Case { name: "matmul", run: || {
            check_inputs(&two(1, (3, 4), (4, 2)), |g, v| project(g, &v[0].matmul(&v[1]).unwrap(), 1))
        }},
        Case { name: "add, row broadcast", run: || {
            check_inputs(&two(2, (3, 4), (1, 4)), |g, v| project(g, &v[0].add(&v[1]).unwrap(), 2))
        }},
        Case { name: "sub, column broadcast", run: || {
            check_inputs(&two(3, (3, 4), (3, 1)), |g, v| project(g, &v[0].sub(&v[1]).unwrap(), 3))
        }},
        Case { name: "mul, broadcast and same shape", run: || {
            let a = check_inputs(&two(4, (3, 4), (1, 4)), |g, v| project(g, &v[0].mul(&v[1]).unwrap(), 4));
            a.max(check_inputs(&two(5, (3, 4), (3, 4)), |g, v| project(g, &v[0].mul(&v[1]).unwrap(), 5)))
        }},
        Case { name: "scale, add_scalar, neg", run: || unary(6, -1.0, 1.0, |x| x.scale(-2.5).add_scalar(0.3).neg()) },
        Case { name: "relu", run: || check_inputs(&[away_from_zero(7)], |g, v| project(g, &v[0].relu(), 7)) },
        Case { name: "tanh", run: || unary(8, -2.0, 2.0, |x| x.tanh()) },
        Case { name: "sigmoid", run: || unary(9, -3.0, 3.0, |x| x.sigmoid()) },
        Case { name: "softplus", run: || unary(10, -3.0, 3.0, |x| x.softplus()) },
        Case { name: "exp", run: || unary(11, -1.0, 1.0, |x| x.exp()) },
        Case { name: "log", run: || unary(12, 0.2, 2.0, |x| x.log()) },
        Case { name: "square", run: || unary(13, -1.0, 1.0, |x| x.square()) },
        Case { name: "sqrt", run: || unary(14, 0.2, 2.0, |x| x.sqrt()) },
        Case { name: "abs", run: || check_inputs(&[away_from_zero(15)], |g, v| project(g, &v[0].abs(), 15)) },
        Case { name: "softmax, both axes", run: || {
            let x = rand_tensor(&mut rng(16), 3, 4, -2.0, 2.0);
            let a = check_inputs(std::slice::from_ref(&x), |g, v| project(g, &v[0].softmax(0).unwrap(), 16));
            a.max(check_inputs(&[x], |g, v| project(g, &v[0].softmax(1).unwrap(), 17)))
        }},
        Case { name: "sum, mean", run: || unary(18, -1.0, 1.0, |x| x.square().sum().add(&x.mean().scale(3.0)).unwrap()) },
        Case { name: "sum_axis, both axes", run: || {
            let x = rand_tensor(&mut rng(19), 3, 4, -1.0, 1.0);
            let a = check_inputs(std::slice::from_ref(&x), |g, v| project(g, &v[0].sum_axis(0).unwrap(), 19));
            a.max(check_inputs(&[x], |g, v| project(g, &v[0].sum_axis(1).unwrap(), 20)))
        }},
        Case { name: "max_axis, both axes", run: || {
            let x = rand_tensor(&mut rng(21), 3, 4, -1.0, 1.0);
            let a = check_inputs(std::slice::from_ref(&x), |g, v| project(g, &v[0].max_axis(0).unwrap().0, 21));
            a.max(check_inputs(&[x], |g, v| project(g, &v[0].max_axis(1).unwrap().0, 22)))
        }},
        Case { name: "segment_max", run: || {
            let x = rand_tensor(&mut rng(23), 6, 3, -1.0, 1.0);
            check_inputs(&[x], |g, v| project(g, &v[0].segment_max(&[0, 1, 0, 2, 1, 2], 3).unwrap(), 23))
        }},
        Case { name: "concat, both axes", run: || {
            let a = check_inputs(&two(24, (2, 3), (1, 3)), |g, v| project(g, &g.concat(&[v[0], v[1]], 0).unwrap(), 24));
            a.max(check_inputs(&two(25, (2, 3), (2, 1)), |g, v| project(g, &g.concat(&[v[0], v[1]], 1).unwrap(), 25)))
        }},
        Case { name: "gather, scatter_add", run: || {
            let x = rand_tensor(&mut rng(26), 4, 2, -1.0, 1.0);
            check_inputs(&[x], |g, v| {
                let y = v[0].gather(Rc::new(vec![3, 0, 0, 2, 1])).unwrap();
                project(g, &y.scatter_add(Rc::new(vec![1, 1, 0, 2, 0]), 3).unwrap(), 26)
            })
        }},
        Case { name: "reshape", run: || unary(27, -1.0, 1.0, |x| x.reshape(&[2, 6]).unwrap().square()) },
        Case { name: "kernel_conv", run: || {
            let map = Rc::new(KernelMap {
                n_in: 4,
                n_out: 3,
                pairs: vec![vec![(0, 0), (1, 2)], vec![(3, 0)], vec![(2, 1), (1, 1), (0, 2)]],
            });
            check_inputs(&two(28, (4, 2), (6, 3)), |g, v| project(g, &v[0].kernel_conv(&v[1], map.clone()).unwrap(), 28))
        }},
    ]
}

fn block_cases() -> Vec<Case> {
    vec![
        Case { name: "linear / mlp", run: || {
            let mut s = ParamStore::new(30);
            let m = Mlp::new(&mut s, "m", &[3, 5, 2]);
            let x = rand_tensor(&mut rng(30), 4, 3, -1.0, 1.0);
            check(&s, &m.params(), &[x], |g, v| project(g, &m.forward(g, &v[0]).unwrap(), 30))
        }},
        Case { name: "sparse conv", run: || {
            let mut s = ParamStore::new(31);
            let c = SparseConv::new(&mut s, "c", 2, 3);
            let geom = small_geom(31, 12, 2);
            let x = rand_tensor(&mut rng(31), 12, 2, -1.0, 1.0);
            check(&s, &c.params(), &[x], |g, v| {
                let t = SparseTensor::new(geom.clone(), v[0]).unwrap();
                project(g, &sparse_conv(g, &t, &c).unwrap().feats, 31)
            })
        }},
        Case { name: "downscale, upsample, restrict", run: || {
            let mut s = ParamStore::new(32);
            let d = Downscale2::new(&mut s, "d", 2, 3);
            let u = StridedConv::new(&mut s, "u", 3, 2, 3);
            let geom = small_geom(32, 14, 3);
            let x = rand_tensor(&mut rng(32), 14, 2, -1.0, 1.0);
            let ids: Vec<ParamId> = d.params().into_iter().chain(u.params()).collect();
            check(&s, &ids, &[x], |g, v| {
                let t = SparseTensor::new(geom.clone(), v[0]).unwrap();
                let y = downscale2(g, &t, &d).unwrap();
                let z = upsample2_nn(g, &y, &u).unwrap();
                let (w, _) = restrict_to(g, &z, geom.clone()).unwrap();
                project(g, &w.feats, 32)
            })
        }},
        Case { name: "point analysis (grouped max pooling)", run: || {
            let mut s = ParamStore::new(33);
            let pa = PointAnalysis::new(&mut s, "pa", 4, 6);
            let orig = small_geom(33, 40, 4);
            let coarse = orig.parent_link().parents.parent_link().parents.clone();
            check(&s, &pa.params(), &[], |g, _| project(g, &pa.forward(g, &orig, coarse.clone(), 4).unwrap().feats, 33))
        }},
        Case { name: "point synthesis", run: || {
            let mut s = ParamStore::new(34);
            let ps = PointSynthesis::new(&mut s, "ps", 3, 2, 1.5);
            let geom = small_geom(34, 5, 3);
            let x = rand_tensor(&mut rng(34), 5, 3, -1.0, 1.0);
            check(&s, &ps.params(), &[x], |g, v| {
                let t = SparseTensor::new(geom.clone(), v[0]).unwrap();
                project(g, &ps.forward(g, &t, 4).unwrap(), 34)
            })
        }},
        Case { name: "occupancy classifier + BCE", run: || {
            let mut s = ParamStore::new(35);
            let st = VoxelStage::new(&mut s, "vs", 3);
            let geom = small_geom(35, 5, 3);
            let x = rand_tensor(&mut rng(35), 5, 3, -1.0, 1.0);
            let n = geom.child_link().children.len();
            let targets: Vec<f64> = (0..n).map(|i| f64::from(i % 3 == 0)).collect();
            let ids: Vec<ParamId> = st.up.params().into_iter().chain(st.cls.params()).collect();
            check(&s, &ids, &[x], |g, v| {
                let t = SparseTensor::new(geom.clone(), v[0]).unwrap();
                let u = upsample2_nn(g, &t, &st.up).unwrap().relu();
                bce_var(g, &st.classify(g, &u, 8).unwrap(), &targets).unwrap()
            })
        }},
        Case { name: "transformer block", run: || {
            let mut s = ParamStore::new(36);
            let p = EvtParams::new(&mut s, "evt", 4, 1.0, 4);
            jitter_zero_params(&mut s, 36);
            let geom = small_geom(36, 9, 3);
            let x = rand_tensor(&mut rng(36), 9, 4, -1.0, 1.0);
            check(&s, &p.params(), &[x], |g, v| {
                let t = SparseTensor::new(geom.clone(), v[0]).unwrap();
                project(g, &evt_block(g, &t, &p).unwrap().feats, 36)
            })
        }},
        Case { name: "transformer cascade, shared weights", run: || {
            let mut s = ParamStore::new(37);
            let p = EvtParams::new(&mut s, "evt", 3, 1.0, 3);
            jitter_zero_params(&mut s, 37);
            let geom = small_geom(37, 7, 3);
            let x = rand_tensor(&mut rng(37), 7, 3, -1.0, 1.0);
            check(&s, &p.params(), &[x], |g, v| {
                let t = SparseTensor::new(geom.clone(), v[0]).unwrap();
                project(g, &evt_cascade(g, &t, &p, 3).unwrap().feats, 37)
            })
        }},
        Case { name: "entropy bottleneck bits", run: || {
            let mut s = ParamStore::new(38);
            let eb = EntropyBottleneck::new(&mut s, "eb", 2);
            let x = rand_tensor(&mut rng(38), 5, 2, -3.0, 3.0);
            check(&s, &eb.params(), &[x], |g, v| eb.bits(g, &v[0]).unwrap())
        }},
        Case { name: "chamfer + RD loss", run: || {
            let mut r = rng(39);
            let gt: Vec<[f64; 3]> = (0..6).map(|_| [r.random_range(0.0..4.0), r.random_range(0.0..4.0), r.random_range(0.0..4.0)]).collect();
            let pred = rand_tensor(&mut r, 5, 3, 0.0, 4.0);
            let z = rand_tensor(&mut r, 4, 1, -2.0, 2.0);
            let cfg = LossConfig { lambda: 0.3, alpha: 1.0, beta: 2.0 };
            check_inputs(&[pred, z], |g, v| {
                let cd = chamfer_var(g, &gt, &v[0]).unwrap();
                let b = bce_var(g, &v[1], &[1.0, 0.0, 0.0, 1.0]).unwrap();
                let rate = v[1].square().sum();
                rd_loss(g, Some(cd), &[b], Some(rate), &cfg).unwrap()
            })
        }},
    ]
}

pub fn all_cases() -> Vec<Case> {
    let mut v = primitive_cases();
    v.extend(block_cases());
    v
}
