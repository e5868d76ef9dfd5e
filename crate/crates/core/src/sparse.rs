//! Sparse voxel tensors and their operators.
//!
//! Geometry lives in an immutable [`VoxelSet`] that caches the neighbor
//! tables each convolution needs; features are a `num_voxels x C` graph
//! variable in the same row order as the sorted coordinates.

use std::cell::OnceCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::autodiff::{AutodiffError, Graph, KernelMap, ParamId, ParamStore, Tensor, Var};
use crate::geometry::{Coord, PointCloud};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Offset index of `(dx, dy, dz)` in the 3x3x3 kernel; the center tap is 13.
pub fn kernel_offset_index(d: [i32; 3]) -> usize {
    ((d[0] + 1) * 9 + (d[1] + 1) * 3 + (d[2] + 1)) as usize
}

pub const CENTER_TAP: usize = 13;

/// Child slot of `c` inside its parent: `(x&1)<<2 | (y&1)<<1 | (z&1)`.
pub fn child_index(c: Coord) -> usize {
    (((c[0] & 1) << 2) | ((c[1] & 1) << 1) | (c[2] & 1)) as usize
}

pub fn child_offset(i: usize) -> Coord {
    [(i as u32 >> 2) & 1, (i as u32 >> 1) & 1, i as u32 & 1]
}

/// Result of grouping a voxel set under its parents.
#[derive(Debug)]
pub struct ParentLink {
    pub parents: Rc<VoxelSet>,
    /// Parent row of every child row.
    pub parent_of: Vec<usize>,
    /// Child -> parent pairs indexed by child slot.
    pub down: Rc<KernelMap>,
}

/// All eight children of every voxel.
#[derive(Debug)]
pub struct ChildLink {
    pub children: Rc<VoxelSet>,
    /// Parent -> child pairs indexed by child slot.
    pub up: Rc<KernelMap>,
}

/// Sorted unique voxel coordinates at a bit-depth level.
#[derive(Debug)]
pub struct VoxelSet {
    coords: Vec<Coord>,
    level: u8,
    index: OnceCell<HashMap<Coord, u32>>,
    conv: OnceCell<Rc<KernelMap>>,
    parents: OnceCell<Rc<ParentLink>>,
    children: OnceCell<Rc<ChildLink>>,
}

impl VoxelSet {
    pub fn new(coords: Vec<Coord>, level: u8) -> Self {
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]), "voxel coords must be sorted-unique");
        VoxelSet {
            coords,
            level,
            index: OnceCell::new(),
            conv: OnceCell::new(),
            parents: OnceCell::new(),
            children: OnceCell::new(),
        }
    }

    pub fn from_cloud(pc: &PointCloud) -> Self {
        VoxelSet::new(pc.points().to_vec(), pc.bit_depth())
    }

    pub fn to_cloud(&self) -> PointCloud {
        PointCloud::new(self.coords.clone(), self.level).expect("voxel set coords are in range")
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn index(&self) -> &HashMap<Coord, u32> {
        self.index.get_or_init(|| {
            self.coords
                .iter()
                .enumerate()
                .map(|(i, &c)| (c, i as u32))
                .collect()
        })
    }

    pub fn index_of(&self, c: &Coord) -> Option<usize> {
        self.index().get(c).map(|&i| i as usize)
    }

    /// Neighbor pairs of the stride-1 submanifold 3x3x3 convolution.
    pub fn conv_map(&self) -> Rc<KernelMap> {
        self.conv
            .get_or_init(|| {
                let idx = self.index();
                let mut pairs = vec![Vec::new(); 27];
                for (o, c) in self.coords.iter().enumerate() {
                    for dx in -1i32..=1 {
                        for dy in -1i32..=1 {
                            for dz in -1i32..=1 {
                                let d = [dx, dy, dz];
                                let n = [
                                    c[0] as i64 + dx as i64,
                                    c[1] as i64 + dy as i64,
                                    c[2] as i64 + dz as i64,
                                ];
                                if n.iter().any(|&v| v < 0 || v > u32::MAX as i64) {
                                    continue;
                                }
                                let n = [n[0] as u32, n[1] as u32, n[2] as u32];
                                if let Some(&i) = idx.get(&n) {
                                    pairs[kernel_offset_index(d)].push((i, o as u32));
                                }
                            }
                        }
                    }
                }
                Rc::new(KernelMap {
                    n_in: self.len(),
                    n_out: self.len(),
                    pairs,
                })
            })
            .clone()
    }

    /// Parent voxels one level up, with the child-to-parent grouping.
    pub fn parent_link(&self) -> Rc<ParentLink> {
        self.parents
            .get_or_init(|| {
                assert!(self.level >= 1, "cannot downscale a level-0 voxel set");
                let mut parents: Vec<Coord> = self.coords.iter().map(|c| [c[0] >> 1, c[1] >> 1, c[2] >> 1]).collect();
                parents.sort_unstable();
                parents.dedup();
                let pset = VoxelSet::new(parents, self.level - 1);
                let mut pairs = vec![Vec::new(); 8];
                let mut parent_of = Vec::with_capacity(self.len());
                for (i, c) in self.coords.iter().enumerate() {
                    let p = pset.index_of(&[c[0] >> 1, c[1] >> 1, c[2] >> 1]).unwrap();
                    parent_of.push(p);
                    pairs[child_index(*c)].push((i as u32, p as u32));
                }
                let down = Rc::new(KernelMap {
                    n_in: self.len(),
                    n_out: pset.len(),
                    pairs,
                });
                Rc::new(ParentLink {
                    parents: Rc::new(pset),
                    parent_of,
                    down,
                })
            })
            .clone()
    }

    /// All `8 * len` children one level down, sorted.
    pub fn child_link(&self) -> Rc<ChildLink> {
        self.children
            .get_or_init(|| {
                let mut kids = Vec::with_capacity(self.len() * 8);
                for c in &self.coords {
                    for i in 0..8 {
                        let o = child_offset(i);
                        kids.push([2 * c[0] + o[0], 2 * c[1] + o[1], 2 * c[2] + o[2]]);
                    }
                }
                kids.sort_unstable();
                let cset = VoxelSet::new(kids, self.level + 1);
                let mut pairs: Vec<Vec<(u32, u32)>> = (0..8).map(|_| Vec::with_capacity(self.len())).collect();
                for (p, c) in self.coords.iter().enumerate() {
                    for (i, slot) in pairs.iter_mut().enumerate() {
                        let o = child_offset(i);
                        let k = [2 * c[0] + o[0], 2 * c[1] + o[1], 2 * c[2] + o[2]];
                        slot.push((p as u32, cset.index_of(&k).unwrap() as u32));
                    }
                }
                let up = Rc::new(KernelMap {
                    n_in: self.len(),
                    n_out: cset.len(),
                    pairs,
                });
                Rc::new(ChildLink {
                    children: Rc::new(cset),
                    up,
                })
            })
            .clone()
    }
}

/// Voxel geometry paired with a per-voxel feature matrix.
#[derive(Clone)]
pub struct SparseTensor<'g> {
    pub geom: Rc<VoxelSet>,
    pub feats: Var<'g>,
}

impl std::fmt::Debug for SparseTensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SparseTensor(level {}, {:?})", self.geom.level(), self.feats.shape())
    }
}

impl<'g> SparseTensor<'g> {
    pub fn new(geom: Rc<VoxelSet>, feats: Var<'g>) -> Result<Self> {
        if feats.rows() != geom.len() || feats.shape().len() != 2 {
            return Err(AutodiffError::Shape {
                op: "sparse_tensor",
                lhs: vec![geom.len()],
                rhs: feats.shape(),
            });
        }
        Ok(SparseTensor { geom, feats })
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }

    pub fn len(&self) -> usize {
        self.geom.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geom.is_empty()
    }

    pub fn with_feats(&self, feats: Var<'g>) -> Result<Self> {
        SparseTensor::new(self.geom.clone(), feats)
    }

    /// `self + other` on identical geometry.
    pub fn add(&self, other: &SparseTensor<'g>) -> Result<Self> {
        self.with_feats(self.feats.add(&other.feats)?)
    }

    pub fn relu(&self) -> Self {
        SparseTensor {
            geom: self.geom.clone(),
            feats: self.feats.relu(),
        }
    }
}

fn check_channels(op: &'static str, t: &SparseTensor, cin: usize) -> Result<()> {
    if t.channels() != cin {
        return Err(AutodiffError::Shape {
            op,
            lhs: t.feats.shape(),
            rhs: vec![cin],
        });
    }
    Ok(())
}

/// 3x3x3 submanifold convolution weights, `W: 27*C_in x C_out`.
#[derive(Debug, Clone)]
pub struct SparseConv {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl SparseConv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        let w = store.kaiming(&format!("{name}.w"), &[27 * cin, cout], 27 * cin);
        let b = store.zeros(&format!("{name}.b"), &[1, cout]);
        SparseConv { w, b, cin, cout }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

pub fn sparse_conv<'g>(g: &'g Graph, t: &SparseTensor<'g>, conv: &SparseConv) -> Result<SparseTensor<'g>> {
    check_channels("sparse_conv", t, conv.cin)?;
    let y = t.feats.kernel_conv(&g.param(conv.w), t.geom.conv_map())?;
    t.with_feats(y.add(&g.param(conv.b))?)
}

/// Stride-2 kernel with one `C_in x C_out` block per child slot.
#[derive(Debug, Clone)]
pub struct StridedConv {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl StridedConv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, fan_in: usize) -> Self {
        let w = store.kaiming(&format!("{name}.w"), &[8 * cin, cout], fan_in);
        let b = store.zeros(&format!("{name}.b"), &[1, cout]);
        StridedConv { w, b, cin, cout }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// `conv3 -> relu -> conv3`, added to the input.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub c1: SparseConv,
    pub c2: SparseConv,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        ResBlock {
            c1: SparseConv::new(store, &format!("{name}.c1"), c, c),
            c2: SparseConv::new(store, &format!("{name}.c2"), c, c),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.c1.params(), self.c2.params()].concat()
    }

    pub fn forward<'g>(&self, g: &'g Graph, t: &SparseTensor<'g>) -> Result<SparseTensor<'g>> {
        let h = sparse_conv(g, t, &self.c1)?.relu();
        let h = sparse_conv(g, &h, &self.c2)?;
        t.add(&h)
    }
}

/// Stride-2 convolution, relu, then two residual blocks.
#[derive(Debug, Clone)]
pub struct Downscale2 {
    pub down: StridedConv,
    pub res: [ResBlock; 2],
}

impl Downscale2 {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        Downscale2 {
            down: StridedConv::new(store, &format!("{name}.down"), cin, cout, 8 * cin),
            res: [
                ResBlock::new(store, &format!("{name}.res0"), cout),
                ResBlock::new(store, &format!("{name}.res1"), cout),
            ],
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.down.params();
        for r in &self.res {
            p.extend(r.params());
        }
        p
    }
}

pub fn downscale2<'g>(g: &'g Graph, t: &SparseTensor<'g>, m: &Downscale2) -> Result<SparseTensor<'g>> {
    check_channels("downscale2", t, m.down.cin)?;
    let link = t.geom.parent_link();
    let y = t.feats.kernel_conv(&g.param(m.down.w), link.down.clone())?;
    let y = y.add(&g.param(m.down.b))?.relu();
    let mut out = SparseTensor::new(link.parents.clone(), y)?;
    for r in &m.res {
        out = r.forward(g, &out)?;
    }
    Ok(out)
}

/// Transposed stride-2 convolution spawning all eight children per voxel.
pub fn upsample2_nn<'g>(g: &'g Graph, t: &SparseTensor<'g>, up: &StridedConv) -> Result<SparseTensor<'g>> {
    check_channels("upsample2_nn", t, up.cin)?;
    let link = t.geom.child_link();
    let y = t.feats.kernel_conv(&g.param(up.w), link.up.clone())?;
    SparseTensor::new(link.children.clone(), y.add(&g.param(up.b))?)
}

/// Keeps the rows where `mask` is true, in order.
pub fn prune<'g>(t: &SparseTensor<'g>, mask: &[bool]) -> Result<SparseTensor<'g>> {
    if mask.len() != t.len() {
        return Err(AutodiffError::Shape {
            op: "prune",
            lhs: vec![t.len()],
            rhs: vec![mask.len()],
        });
    }
    let keep: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    select_rows(t, keep)
}

/// Keeps rows `keep` (ascending) of a tensor.
pub fn select_rows<'g>(t: &SparseTensor<'g>, keep: Vec<usize>) -> Result<SparseTensor<'g>> {
    debug_assert!(keep.windows(2).all(|w| w[0] < w[1]));
    let coords = keep.iter().map(|&i| t.geom.coords()[i]).collect();
    let geom = Rc::new(VoxelSet::new(coords, t.geom.level()));
    let feats = t.feats.gather(Rc::new(keep))?;
    SparseTensor::new(geom, feats)
}

/// Restricts `t` to the coordinates of `target`; target voxels missing from
/// `t` get zero features. Returns the tensor and the number of missing voxels.
pub fn restrict_to<'g>(g: &'g Graph, t: &SparseTensor<'g>, target: Rc<VoxelSet>) -> Result<(SparseTensor<'g>, usize)> {
    let n = t.len();
    let mut missing = 0;
    let idx: Vec<usize> = target
        .coords()
        .iter()
        .map(|c| {
            t.geom.index_of(c).unwrap_or_else(|| {
                missing += 1;
                n
            })
        })
        .collect();
    let src = if missing > 0 {
        let zero = g.constant(Tensor::zeros(&[1, t.channels()]));
        g.concat(&[t.feats, zero], 0)?
    } else {
        t.feats
    };
    let feats = src.gather(Rc::new(idx))?;
    Ok((SparseTensor::new(target, feats)?, missing))
}

fn sq_dist(a: &Coord, b: &Coord) -> u64 {
    (0..3)
        .map(|i| {
            let d = a[i] as i64 - b[i] as i64;
            (d * d) as u64
        })
        .sum()
}

/// Up to `k` nearest voxels per query, ordered by (squared distance, coordinate).
pub fn knn_voxels(geom: &VoxelSet, queries: &[Coord], k: usize) -> Vec<Vec<usize>> {
    let coords = geom.coords();
    queries
        .iter()
        .map(|q| {
            let mut best: Vec<(u64, usize)> = Vec::with_capacity(k + 1);
            let offer = |best: &mut Vec<(u64, usize)>, i: usize| {
                let cand = (sq_dist(q, &coords[i]), i);
                if best.len() < k || cand < *best.last().unwrap() {
                    let pos = best.partition_point(|b| *b < cand);
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            };
            let full_beyond = |best: &Vec<(u64, usize)>, x: u32| {
                let dx = x as i64 - q[0] as i64;
                best.len() == k && (dx * dx) as u64 > best.last().unwrap().0
            };
            let start = coords.partition_point(|c| c[0] < q[0]);
            let (mut lo, mut hi) = (start, start);
            loop {
                let can_hi = hi < coords.len() && !full_beyond(&best, coords[hi][0]);
                let can_lo = lo > 0 && !full_beyond(&best, coords[lo - 1][0]);
                if !can_hi && !can_lo {
                    break;
                }
                if can_hi {
                    offer(&mut best, hi);
                    hi += 1;
                }
                if can_lo {
                    lo -= 1;
                    offer(&mut best, lo);
                }
            }
            best.into_iter().map(|(_, i)| i).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(mut c: Vec<Coord>, level: u8) -> Rc<VoxelSet> {
        c.sort_unstable();
        c.dedup();
        Rc::new(VoxelSet::new(c, level))
    }

    #[test]
    fn offsets_and_slots() {
        assert_eq!(kernel_offset_index([0, 0, 0]), CENTER_TAP);
        assert_eq!(kernel_offset_index([-1, -1, -1]), 0);
        assert_eq!(child_index([1, 0, 0]), 4);
        assert_eq!(child_offset(5), [1, 0, 1]);
    }

    #[test]
    fn identity_kernel_and_isolated_voxel() {
        let mut store = ParamStore::new(0);
        let conv = SparseConv::new(&mut store, "c", 2, 2);
        store.get_mut(conv.w).fill(0.0);
        for c in 0..2 {
            store.get_mut(conv.w).data_mut()[(CENTER_TAP * 2 + c) * 2 + c] = 1.0;
        }
        let g = Graph::with_params(&store);
        let geom = set(vec![[0, 0, 0], [0, 0, 1], [3, 3, 3]], 2);
        let f = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = SparseTensor::new(geom, g.constant(f.clone())).unwrap();
        let y = sparse_conv(&g, &t, &conv).unwrap();
        assert_eq!(*y.feats.value(), f);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut store = ParamStore::new(0);
        let conv = SparseConv::new(&mut store, "c", 3, 2);
        let g = Graph::with_params(&store);
        let t = SparseTensor::new(set(vec![[0, 0, 0]], 1), g.constant(Tensor::zeros(&[1, 2]))).unwrap();
        assert!(matches!(sparse_conv(&g, &t, &conv), Err(AutodiffError::Shape { .. })));
    }

    #[test]
    fn downscale_geometry() {
        let a = set(vec![[0, 0, 0], [1, 1, 1]], 2);
        assert_eq!(a.parent_link().parents.coords(), &[[0, 0, 0]]);
        let b = set(vec![[0, 0, 0], [2, 2, 2]], 2);
        assert_eq!(b.parent_link().parents.coords(), &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(b.parent_link().parents.level(), 1);
    }

    #[test]
    fn upsample_spawns_unique_children() {
        let one = set(vec![[3, 1, 2]], 3);
        assert_eq!(one.child_link().children.len(), 8);
        let two = set(vec![[0, 0, 0], [0, 0, 1]], 3);
        let kids = two.child_link().children.clone();
        assert_eq!(kids.len(), 16);
        assert!(kids.coords().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(kids.parent_link().parents.coords(), two.coords());
    }

    #[test]
    fn upsample_of_zero_is_zero() {
        let mut store = ParamStore::new(0);
        let up = StridedConv::new(&mut store, "u", 3, 4, 3);
        let g = Graph::with_params(&store);
        let t = SparseTensor::new(set(vec![[1, 1, 1]], 2), g.constant(Tensor::zeros(&[1, 3]))).unwrap();
        let y = upsample2_nn(&g, &t, &up).unwrap();
        assert_eq!(y.feats.shape(), vec![8, 4]);
        assert!(y.feats.value().data().iter().all(|&x| x == 0.0));
        assert_eq!(y.geom.level(), 3);
    }

    #[test]
    fn prune_masks() {
        let g = Graph::new();
        let geom = set(vec![[0, 0, 0], [0, 1, 0], [1, 0, 0]], 1);
        let t = SparseTensor::new(geom.clone(), g.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]))).unwrap();
        let all = prune(&t, &[true; 3]).unwrap();
        assert_eq!(all.geom.coords(), geom.coords());
        let none = prune(&t, &[false; 3]).unwrap();
        assert_eq!(none.feats.shape(), vec![0, 1]);
        let some = prune(&t, &[true, false, true]).unwrap();
        assert_eq!(some.geom.coords(), &[[0, 0, 0], [1, 0, 0]]);
        assert_eq!(some.feats.value().data(), &[1.0, 3.0]);
        assert!(prune(&t, &[true]).is_err());
    }

    #[test]
    fn knn_basics() {
        let geom = set(vec![[0, 0, 0], [5, 5, 5]], 3);
        assert_eq!(knn_voxels(&geom, &[[5, 5, 5]], 1), vec![vec![1]]);
        assert_eq!(knn_voxels(&geom, &[[0, 0, 1]], 4), vec![vec![0, 1]]);
        let empty = VoxelSet::new(vec![], 3);
        assert_eq!(knn_voxels(&empty, &[[0, 0, 0]], 3), vec![Vec::<usize>::new()]);
    }

    fn brute_knn(geom: &VoxelSet, q: &Coord, k: usize) -> Vec<usize> {
        let mut all: Vec<(u64, usize)> = geom.coords().iter().enumerate().map(|(i, c)| (sq_dist(q, c), i)).collect();
        all.sort();
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let coords: Vec<Coord> = (0..200)
                .map(|_| [rng.random_range(0..16), rng.random_range(0..16), rng.random_range(0..16)])
                .collect();
            let geom = set(coords, 4);
            let queries: Vec<Coord> = geom.coords().to_vec();
            let got = knn_voxels(&geom, &queries, 16);
            for (q, nn) in queries.iter().zip(&got) {
                assert_eq!(nn, &brute_knn(&geom, q, 16));
            }
        }
    }

    /// Dense 3D convolution over a full grid, read back at occupied sites.
    fn dense_conv(grid: &HashMap<Coord, Vec<f64>>, site: Coord, w: &Tensor, cin: usize, cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout];
        for dx in -1i32..=1 {
            for dy in -1i32..=1 {
                for dz in -1i32..=1 {
                    let n = [site[0] as i32 + dx, site[1] as i32 + dy, site[2] as i32 + dz];
                    if n.iter().any(|&v| v < 0) {
                        continue;
                    }
                    let Some(f) = grid.get(&[n[0] as u32, n[1] as u32, n[2] as u32]) else { continue };
                    let k = kernel_offset_index([dx, dy, dz]);
                    for (ci, fv) in f.iter().enumerate().take(cin) {
                        for (co, o) in out.iter_mut().enumerate() {
                            *o += fv * w.get(k * cin + ci, co);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn dense_block_matches_dense_convolution() {
        let (cin, cout) = (3, 2);
        let mut store = ParamStore::new(5);
        let conv = SparseConv::new(&mut store, "c", cin, cout);
        let g = Graph::with_params(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut coords = Vec::new();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    coords.push([x, y, z]);
                }
            }
        }
        let geom = set(coords, 2);
        let feats: Vec<f64> = (0..geom.len() * cin).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grid: HashMap<Coord, Vec<f64>> = geom
            .coords()
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, feats[i * cin..(i + 1) * cin].to_vec()))
            .collect();
        let t = SparseTensor::new(geom.clone(), g.constant(Tensor::matrix(geom.len(), cin, feats))).unwrap();
        let y = sparse_conv(&g, &t, &conv).unwrap();
        let w = store.get(conv.w);
        for (i, c) in geom.coords().iter().enumerate() {
            let want = dense_conv(&grid, *c, w, cin, cout);
            for co in 0..cout {
                assert!((y.feats.value().get(i, co) - want[co]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn restrict_fills_missing_with_zero() {
        let g = Graph::new();
        let t = SparseTensor::new(set(vec![[0, 0, 0], [1, 1, 1]], 1), g.constant(Tensor::matrix(2, 1, vec![4.0, 5.0]))).unwrap();
        let (r, missing) = restrict_to(&g, &t, set(vec![[1, 0, 0], [1, 1, 1]], 1)).unwrap();
        assert_eq!(missing, 1);
        assert_eq!(r.feats.value().data(), &[0.0, 5.0]);
    }

    proptest! {
        #[test]
        fn downscale_matches_quantize(pts in prop::collection::vec((0u32..64, 0u32..64, 0u32..64), 1..80)) {
            let pc = PointCloud::new(pts.into_iter().map(|(x, y, z)| [x, y, z]).collect(), 6).unwrap();
            let geom = VoxelSet::from_cloud(&pc);
            let q = pc.quantize(crate::geometry::QuantStep::new(2).unwrap()).unwrap();
            let link = geom.parent_link();
            prop_assert_eq!(link.parents.coords(), q.points());
        }
    }
}
