//! Training losses and evaluation metrics: augmented Chamfer, occupancy
//! BCE, the RD objective, D1/D2 PSNR and Bjøntegaard deltas.

use std::rc::Rc;

use rayon::prelude::*;
use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::geometry::PointCloud;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{0}: empty point set")]
    Empty(&'static str),
    #[error("RD curve needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("RD curve rates must be positive, finite and strictly increasing")]
    InvalidCurve,
    #[error("RD curves do not overlap")]
    NoOverlap,
}

/// Rate and distortion weights of the training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.01,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

type P3 = [f64; 3];

fn d2(a: &P3, b: &P3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Static kd-tree for nearest-neighbor queries. Ties go to the lowest index.
pub struct NnIndex {
    pts: Vec<P3>,
    nodes: Vec<KdNode>,
    order: Vec<u32>,
}

struct KdNode {
    start: u32,
    end: u32,
    axis: u8,
    split: f64,
    left: u32,
    right: u32,
}

const LEAF: usize = 8;
const NONE: u32 = u32::MAX;

impl NnIndex {
    pub fn new(pts: &[P3]) -> Self {
        let mut idx = NnIndex {
            pts: pts.to_vec(),
            nodes: Vec::new(),
            order: (0..pts.len() as u32).collect(),
        };
        if !pts.is_empty() {
            idx.build(0, pts.len());
        }
        idx
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(KdNode {
            start: start as u32,
            end: end as u32,
            axis: 0,
            split: 0.0,
            left: NONE,
            right: NONE,
        });
        if end - start > LEAF {
            let slice = &self.order[start..end];
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for &i in slice {
                for a in 0..3 {
                    lo[a] = lo[a].min(self.pts[i as usize][a]);
                    hi[a] = hi[a].max(self.pts[i as usize][a]);
                }
            }
            let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
            let mid = (end - start) / 2;
            let pts = &self.pts;
            self.order[start..end].select_nth_unstable_by(mid, |&a, &b| pts[a as usize][axis].total_cmp(&pts[b as usize][axis]));
            let split = self.pts[self.order[start + mid] as usize][axis];
            let left = self.build(start, start + mid);
            let right = self.build(start + mid, end);
            let n = &mut self.nodes[id as usize];
            n.axis = axis as u8;
            n.split = split;
            n.left = left;
            n.right = right;
        }
        id
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: &P3) -> Option<(usize, f64)> {
        let best = self.knn(q, 1);
        best.first().map(|&(d, i)| (i, d))
    }

    /// Up to `k` nearest points as `(squared distance, index)`, ascending.
    pub fn knn(&self, q: &P3, k: usize) -> Vec<(f64, usize)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if !self.pts.is_empty() && k > 0 {
            self.search(0, q, k, &mut best);
        }
        best
    }

    fn search(&self, node: u32, q: &P3, k: usize, best: &mut Vec<(f64, usize)>) {
        let n = &self.nodes[node as usize];
        if n.left == NONE {
            for &i in &self.order[n.start as usize..n.end as usize] {
                let cand = (d2(q, &self.pts[i as usize]), i as usize);
                let better = |a: &(f64, usize), b: &(f64, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
                if best.len() < k || better(&cand, best.last().unwrap()) {
                    let pos = best.partition_point(|b| better(b, &cand));
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            return;
        }
        let diff = q[n.axis as usize] - n.split;
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search(near, q, k, best);
        if best.len() < k || diff * diff <= best.last().unwrap().0 {
            self.search(far, q, k, best);
        }
    }
}

/// Mean over `a` of the squared distance to the nearest point of `b`,
/// with the nearest indices.
fn directed(a: &[P3], b_index: &NnIndex) -> (f64, Vec<usize>) {
    let mut sum = 0.0;
    let mut nn = Vec::with_capacity(a.len());
    for p in a {
        let (i, d) = b_index.nearest(p).unwrap();
        sum += d;
        nn.push(i);
    }
    (sum / a.len() as f64, nn)
}

/// `max(d(A->B), d(B->A))` with squared distances.
pub fn chamfer_augmented(a: &[P3], b: &[P3]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Empty("chamfer"));
    }
    let (ab, _) = directed(a, &NnIndex::new(b));
    let (ba, _) = directed(b, &NnIndex::new(a));
    Ok(ab.max(ba))
}

/// Differentiable augmented Chamfer between fixed `gt` and predicted `pred` (`R x 3`).
pub fn chamfer_var<'g>(g: &'g Graph, gt: &[P3], pred: &Var<'g>) -> Result<Var<'g>, AutodiffError> {
    let pv = pred.value();
    if gt.is_empty() || pv.rows() == 0 {
        return Err(AutodiffError::Contract("chamfer of an empty set".into()));
    }
    let pts: Vec<P3> = (0..pv.rows()).map(|r| [pv.get(r, 0), pv.get(r, 1), pv.get(r, 2)]).collect();
    let gt_t = Tensor::matrix(gt.len(), 3, gt.iter().flatten().copied().collect());
    let (_, nn_ab) = directed(gt, &NnIndex::new(&pts));
    let (_, nn_ba) = directed(&pts, &NnIndex::new(gt));
    let ab = pred
        .gather(Rc::new(nn_ab))?
        .sub(&g.constant(gt_t.clone()))?
        .square()
        .sum()
        .scale(1.0 / gt.len() as f64);
    let gt_rows = Tensor::matrix(
        pts.len(),
        3,
        nn_ba.iter().flat_map(|&i| gt[i]).collect(),
    );
    let ba = pred
        .sub(&g.constant(gt_rows))?
        .square()
        .sum()
        .scale(1.0 / pts.len() as f64);
    let (m, _) = g.concat(&[ab, ba], 1)?.max_axis(1)?;
    Ok(m)
}

/// Mean binary cross-entropy of logits against `{0,1}` (or soft) targets.
pub fn bce_occupancy(logits: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(logits.len(), targets.len());
    if logits.is_empty() {
        return 0.0;
    }
    let s: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum();
    s / logits.len() as f64
}

/// Graph form of [`bce_occupancy`] for an `N x 1` logit column:
/// `mean(softplus(z) - t z)`, which equals the log-sum-exp form.
pub fn bce_var<'g>(g: &'g Graph, logits: &Var<'g>, targets: &[f64]) -> Result<Var<'g>, AutodiffError> {
    let t = g.constant(Tensor::matrix(targets.len(), 1, targets.to_vec()));
    Ok(logits.softplus().sub(&logits.mul(&t)?)?.mean())
}

/// Weighted RD objective `alpha*CD + beta*mean(BCE) + lambda*rate`.
pub fn rd_loss<'g>(
    g: &'g Graph,
    chamfer: Option<Var<'g>>,
    stage_bce: &[Var<'g>],
    rate_bits_per_point: Option<Var<'g>>,
    cfg: &LossConfig,
) -> Result<Var<'g>, AutodiffError> {
    let mut terms = Vec::new();
    if let Some(cd) = chamfer {
        terms.push(cd.scale(cfg.alpha));
    }
    if !stage_bce.is_empty() {
        let mut s = stage_bce[0];
        for b in &stage_bce[1..] {
            s = s.add(b)?;
        }
        terms.push(s.scale(cfg.beta / stage_bce.len() as f64));
    }
    if let Some(r) = rate_bits_per_point {
        terms.push(r.scale(cfg.lambda));
    }
    let mut total = match terms.first() {
        Some(t) => *t,
        None => return Ok(g.constant(Tensor::scalar(0.0))),
    };
    for t in &terms[1..] {
        total = total.add(t)?;
    }
    Ok(total)
}

/// PCA normals over the 9 nearest neighbors, oriented toward +z, then +y, then +x.
pub fn estimate_normals(pts: &[P3]) -> Vec<P3> {
    let index = NnIndex::new(pts);
    pts.par_iter()
        .map(|p| {
            let nb = index.knn(p, 9);
            let n = nb.len() as f64;
            let mut mean = [0.0; 3];
            for &(_, i) in &nb {
                for a in 0..3 {
                    mean[a] += pts[i][a] / n;
                }
            }
            let mut cov = Matrix3::zeros();
            for &(_, i) in &nb {
                let d = [pts[i][0] - mean[0], pts[i][1] - mean[1], pts[i][2] - mean[2]];
                for r in 0..3 {
                    for c in 0..3 {
                        cov[(r, c)] += d[r] * d[c];
                    }
                }
            }
            let eig: SymmetricEigen<f64, nalgebra::U3> = SymmetricEigen::new(cov);
            let k = (0..3usize).min_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).unwrap();
            let v = eig.eigenvectors.column(k);
            let mut nrm = [v[0], v[1], v[2]];
            let len = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt();
            if len > 0.0 {
                nrm.iter_mut().for_each(|x| *x /= len);
            }
            const EPS: f64 = 1e-12;
            let flip = if nrm[2].abs() > EPS {
                nrm[2] < 0.0
            } else if nrm[1].abs() > EPS {
                nrm[1] < 0.0
            } else {
                nrm[0] < 0.0
            };
            if flip {
                nrm.iter_mut().for_each(|x| *x = -*x);
            }
            nrm
        })
        .collect()
}

/// D1/D2 errors of a test set against a reference cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMetrics {
    pub d1_mse: f64,
    pub d2_mse: f64,
    pub d1_psnr: f64,
    pub d2_psnr: f64,
}

pub fn psnr_from_mse(mse: f64, bit_depth: u8) -> f64 {
    let peak = ((1u64 << bit_depth) - 1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (3.0 * peak * peak / mse).log10()
    }
}

pub fn point_metrics(reference: &[P3], test: &[P3], bit_depth: u8) -> Result<PointMetrics, MetricError> {
    if reference.is_empty() || test.is_empty() {
        return Err(MetricError::Empty("psnr"));
    }
    let ref_idx = NnIndex::new(reference);
    let test_idx = NnIndex::new(test);
    let normals = estimate_normals(reference);
    let proj = |e: P3, n: &P3| {
        let d = e[0] * n[0] + e[1] * n[1] + e[2] * n[2];
        d * d
    };
    // per-point terms in parallel, summed in order so results do not
    // depend on the thread count
    let tr: Vec<(f64, f64)> = test
        .par_iter()
        .map(|b| {
            let (i, d) = ref_idx.nearest(b).unwrap();
            let a = &reference[i];
            (d, proj([b[0] - a[0], b[1] - a[1], b[2] - a[2]], &normals[i]))
        })
        .collect();
    let rt: Vec<(f64, f64)> = reference
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            let (j, d) = test_idx.nearest(a).unwrap();
            let b = &test[j];
            (d, proj([b[0] - a[0], b[1] - a[1], b[2] - a[2]], &normals[i]))
        })
        .collect();
    let sum = |v: &[(f64, f64)]| v.iter().fold((0.0, 0.0), |s, x| (s.0 + x.0, s.1 + x.1));
    let (d1_tr, d2_tr) = sum(&tr);
    let (d1_rt, d2_rt) = sum(&rt);
    let (nt, nr) = (test.len() as f64, reference.len() as f64);
    let d1_mse = (d1_tr / nt).max(d1_rt / nr);
    let d2_mse = (d2_tr / nt).max(d2_rt / nr);
    Ok(PointMetrics {
        d1_mse,
        d2_mse,
        d1_psnr: psnr_from_mse(d1_mse, bit_depth),
        d2_psnr: psnr_from_mse(d2_mse, bit_depth),
    })
}

pub fn psnr_d1(reference: &PointCloud, test: &[P3], bit_depth: u8) -> Result<f64, MetricError> {
    Ok(point_metrics(&reference.to_f64(), test, bit_depth)?.d1_psnr)
}

pub fn psnr_d2(reference: &PointCloud, test: &[P3], bit_depth: u8) -> Result<f64, MetricError> {
    Ok(point_metrics(&reference.to_f64(), test, bit_depth)?.d2_psnr)
}

/// Formats a PSNR value, writing infinity as `inf`.
pub fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Rate-distortion points sorted by strictly increasing rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RdCurve {
    points: Vec<(f64, f64)>,
}

impl RdCurve {
    /// Sorts `points` by rate and validates them.
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self, MetricError> {
        if points.len() < 2 {
            return Err(MetricError::TooFewPoints(points.len()));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points.iter().any(|p| !(p.0 > 0.0 && p.0.is_finite()) || p.1.is_nan())
            || points.windows(2).any(|w| w[0].0 >= w[1].0)
        {
            return Err(MetricError::InvalidCurve);
        }
        Ok(RdCurve { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// The finite-PSNR points, as used for BD integration.
    fn finite(&self) -> Vec<(f64, f64)> {
        self.points.iter().copied().filter(|p| p.1.is_finite()).collect()
    }
}

/// Bjøntegaard deltas of `test` relative to `anchor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BdResult {
    /// Average rate difference in percent; negative means savings.
    pub bd_rate: f64,
    /// Average PSNR difference in dB.
    pub bd_psnr: f64,
}

/// Average of `y(x)` over `[lo, hi]` for the fitted curve through `(x, y)`.
fn fitted_integral(xs: &[f64], ys: &[f64], lo: f64, hi: f64) -> f64 {
    if xs.len() >= 4 {
        let coef = polyfit3(xs, ys);
        let prim = |x: f64| coef[0] * x + coef[1] * x * x / 2.0 + coef[2] * x.powi(3) / 3.0 + coef[3] * x.powi(4) / 4.0;
        prim(hi) - prim(lo)
    } else {
        // piecewise-linear, extended with the end segments
        let mut pts: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let interp = |x: f64| {
            let j = pts.partition_point(|p| p.0 < x).clamp(1, pts.len() - 1);
            let (a, b) = (pts[j - 1], pts[j]);
            a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
        };
        let mut knots: Vec<f64> = vec![lo, hi];
        knots.extend(pts.iter().map(|p| p.0).filter(|&x| x > lo && x < hi));
        knots.sort_by(f64::total_cmp);
        knots
            .windows(2)
            .map(|w| (interp(w[0]) + interp(w[1])) / 2.0 * (w[1] - w[0]))
            .sum()
    }
}

/// Least-squares cubic `c0 + c1 x + c2 x^2 + c3 x^3`.
fn polyfit3(xs: &[f64], ys: &[f64]) -> [f64; 4] {
    let a = DMatrix::from_fn(xs.len(), 4, |r, c| xs[r].powi(c as i32));
    let b = DVector::from_column_slice(ys);
    let svd = a.svd(true, true);
    let sol = svd.solve(&b, 1e-14).expect("svd solve");
    [sol[0], sol[1], sol[2], sol[3]]
}

fn bd_delta(a_x: &[f64], a_y: &[f64], t_x: &[f64], t_y: &[f64]) -> Result<f64, MetricError> {
    let lo = a_x.iter().copied().fold(f64::INFINITY, f64::min).max(t_x.iter().copied().fold(f64::INFINITY, f64::min));
    let hi = a_x.iter().copied().fold(f64::NEG_INFINITY, f64::max).min(t_x.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    if !(hi > lo) {
        return Err(MetricError::NoOverlap);
    }
    let ia = fitted_integral(a_x, a_y, lo, hi);
    let it = fitted_integral(t_x, t_y, lo, hi);
    Ok((it - ia) / (hi - lo))
}

pub fn bd_metrics(anchor: &RdCurve, test: &RdCurve) -> Result<BdResult, MetricError> {
    let (a, t) = (anchor.finite(), test.finite());
    if a.len() < 2 || t.len() < 2 {
        return Err(MetricError::TooFewPoints(a.len().min(t.len())));
    }
    let lr = |c: &[(f64, f64)]| c.iter().map(|p| p.0.log10()).collect::<Vec<_>>();
    let ps = |c: &[(f64, f64)]| c.iter().map(|p| p.1).collect::<Vec<_>>();
    let (a_lr, a_ps, t_lr, t_ps) = (lr(&a), ps(&a), lr(&t), ps(&t));
    let bd_psnr = bd_delta(&a_lr, &a_ps, &t_lr, &t_ps)?;
    let d_lr = bd_delta(&a_ps, &a_lr, &t_ps, &t_lr)?;
    Ok(BdResult {
        bd_rate: 100.0 * (10f64.powf(d_lr) - 1.0),
        bd_psnr,
    })
}
