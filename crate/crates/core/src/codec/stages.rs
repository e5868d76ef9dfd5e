//! The learned analysis and synthesis stages.

use std::rc::Rc;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::geometry::Coord;
use crate::nn::Mlp;
use crate::sparse::{
    knn_voxels, prune, restrict_to, upsample2_nn, ResBlock, SparseTensor, StridedConv, VoxelSet,
};
use crate::transformer::{evt_cascade, EvtParams};

type Result<T> = std::result::Result<T, AutodiffError>;

fn cell_center(v: &Coord, s: u32) -> [f64; 3] {
    let half = s as f64 / 2.0;
    [
        v[0] as f64 * s as f64 + half,
        v[1] as f64 * s as f64 + half,
        v[2] as f64 * s as f64 + half,
    ]
}

/// Set abstraction of the original points around each coarse voxel.
#[derive(Debug, Clone)]
pub struct PointAnalysis {
    pub mlp: Mlp,
    pub k_group: usize,
}

impl PointAnalysis {
    pub fn new(store: &mut ParamStore, name: &str, c_point: usize, k_group: usize) -> Self {
        PointAnalysis {
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[3, 32, c_point]),
            k_group,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }

    /// Offsets (in units of `s1`) of each voxel's group members, with the
    /// owning voxel of every row.
    pub fn groups(&self, original: &VoxelSet, coarse: &VoxelSet, s1: u32) -> (Tensor, Vec<usize>) {
        let half = s1 / 2;
        let queries: Vec<Coord> = coarse
            .coords()
            .iter()
            .map(|v| [v[0] * s1 + half, v[1] * s1 + half, v[2] * s1 + half])
            .collect();
        let lists = knn_voxels(original, &queries, self.k_group);
        let radius2 = (2.0 * s1 as f64).powi(2);
        let mut rows = Vec::new();
        let mut seg = Vec::new();
        for (v, list) in lists.iter().enumerate() {
            let c = cell_center(&coarse.coords()[v], s1);
            for (j, &i) in list.iter().enumerate() {
                let p = original.coords()[i];
                let off = [
                    (p[0] as f64 - c[0]) / s1 as f64,
                    (p[1] as f64 - c[1]) / s1 as f64,
                    (p[2] as f64 - c[2]) / s1 as f64,
                ];
                let r2 = (off[0] * off[0] + off[1] * off[1] + off[2] * off[2]) * (s1 as f64).powi(2);
                // the nearest member always stays so no group is empty
                if j == 0 || r2 <= radius2 {
                    rows.extend_from_slice(&off);
                    seg.push(v);
                }
            }
        }
        (Tensor::matrix(seg.len(), 3, rows), seg)
    }

    pub fn forward<'g>(&self, g: &'g Graph, original: &VoxelSet, coarse: Rc<VoxelSet>, s1: u32) -> Result<SparseTensor<'g>> {
        let (offsets, seg) = self.groups(original, &coarse, s1);
        let h = self.mlp.forward(g, &g.constant(offsets))?;
        let pooled = h.segment_max(&seg, coarse.len())?;
        SparseTensor::new(coarse, pooled)
    }
}

/// Regresses `K` points per voxel as bounded offsets from the cell center.
#[derive(Debug, Clone)]
pub struct PointSynthesis {
    pub mlp: Mlp,
    pub k: usize,
    pub gamma: f64,
}

impl PointSynthesis {
    pub fn new(store: &mut ParamStore, name: &str, c_voxel: usize, k: usize, gamma: f64) -> Self {
        PointSynthesis {
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[c_voxel, 64, 3 * k]),
            k,
            gamma,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }

    /// `(N*K) x 3` reconstructed points in original coordinate units.
    pub fn forward<'g>(&self, g: &'g Graph, x1: &SparseTensor<'g>, s1: u32) -> Result<Var<'g>> {
        let n = x1.len();
        let off = self
            .mlp
            .forward(g, &x1.feats)?
            .tanh()
            .scale(self.gamma * s1 as f64 / 2.0)
            .reshape(&[n * self.k, 3])?;
        let mut centers = Vec::with_capacity(n * self.k * 3);
        for v in x1.geom.coords() {
            let c = cell_center(v, s1);
            for _ in 0..self.k {
                centers.extend_from_slice(&c);
            }
        }
        off.add(&g.constant(Tensor::matrix(n * self.k, 3, centers)))
    }
}

/// How a voxel-synthesis stage decides which candidate children survive.
#[derive(Debug, Clone)]
pub enum KeepRule<'a> {
    /// Keep exactly the ground-truth children (training).
    GroundTruth(&'a VoxelSet),
    /// Keep the `n` highest-logit children (decoding).
    TopN(usize),
}

/// Output of one upsampling stage.
pub struct StageOutput<'g> {
    pub tensor: SparseTensor<'g>,
    /// Logits of all candidate children, `M x 1`.
    pub logits: Var<'g>,
    pub candidates: Rc<VoxelSet>,
    /// Requested more children than were spawned.
    pub overflow: bool,
}

/// Context-aware x2 upsampling: spawn, classify, prune, refine.
#[derive(Debug, Clone)]
pub struct VoxelStage {
    pub up: StridedConv,
    pub cls: Mlp,
    pub res: [ResBlock; 2],
}

fn rank(logits: &[f64], idx: &mut [usize]) {
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
}

/// Indices of the `n` largest logits, lowest coordinate first among ties, ascending.
pub fn top_n(logits: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    rank(logits, &mut order);
    order.truncate(n);
    order.sort_unstable();
    order
}

/// Like [`top_n`], but first keeps the best child of every parent: each
/// parent is known to be occupied, so it has at least one occupied child.
/// The remaining slots go to the highest of the other logits.
pub fn top_n_per_parent(logits: &[f64], parent_of: &[usize], n_parents: usize, n: usize) -> Vec<usize> {
    let mut best: Vec<Option<usize>> = vec![None; n_parents];
    for (i, &p) in parent_of.iter().enumerate() {
        match best[p] {
            Some(j) if logits[j] >= logits[i] => {}
            _ => best[p] = Some(i),
        }
    }
    let mut firsts: Vec<usize> = best.into_iter().flatten().collect();
    let mut taken = vec![false; logits.len()];
    if n <= firsts.len() {
        rank(logits, &mut firsts);
        firsts.truncate(n);
        firsts.sort_unstable();
        return firsts;
    }
    for &i in &firsts {
        taken[i] = true;
    }
    let mut rest: Vec<usize> = (0..logits.len()).filter(|&i| !taken[i]).collect();
    rank(logits, &mut rest);
    rest.truncate(n - firsts.len());
    firsts.extend(rest);
    firsts.sort_unstable();
    firsts
}

impl VoxelStage {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        VoxelStage {
            up: StridedConv::new(store, &format!("{name}.up"), c, c, c),
            cls: Mlp::new(store, &format!("{name}.cls"), &[c + 4, 32, 1]),
            res: [
                ResBlock::new(store, &format!("{name}.res0"), c),
                ResBlock::new(store, &format!("{name}.res1"), c),
            ],
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.up.params();
        p.extend(self.cls.params());
        for r in &self.res {
            p.extend(r.params());
        }
        p
    }

    /// Per-child context: coordinates scaled by `2^level` and `level / n`.
    pub fn context(children: &VoxelSet, n: u8) -> Tensor {
        let level = children.level();
        let scale = 1.0 / (1u64 << level) as f64;
        let lv = level as f64 / n as f64;
        let data = children
            .coords()
            .iter()
            .flat_map(|c| [c[0] as f64 * scale, c[1] as f64 * scale, c[2] as f64 * scale, lv])
            .collect();
        Tensor::matrix(children.len(), 4, data)
    }

    pub fn classify<'g>(&self, g: &'g Graph, u: &SparseTensor<'g>, n: u8) -> Result<Var<'g>> {
        let ctx = g.constant(VoxelStage::context(&u.geom, n));
        let x = g.concat(&[u.feats, ctx], 1)?;
        self.cls.forward(g, &x)
    }

    pub fn forward<'g>(&self, g: &'g Graph, t: &SparseTensor<'g>, n: u8, keep: KeepRule) -> Result<StageOutput<'g>> {
        let u = upsample2_nn(g, t, &self.up)?.relu();
        let logits = self.classify(g, &u, n)?;
        let mut overflow = false;
        let mask: Vec<bool> = match keep {
            KeepRule::GroundTruth(gt) => u.geom.coords().iter().map(|c| gt.index_of(c).is_some()).collect(),
            KeepRule::TopN(want) => {
                overflow = want > u.len();
                let mut m = vec![false; u.len()];
                let parent_of: Vec<usize> = u
                    .geom
                    .coords()
                    .iter()
                    .map(|c| t.geom.index_of(&[c[0] >> 1, c[1] >> 1, c[2] >> 1]).expect("child of a known voxel"))
                    .collect();
                for i in top_n_per_parent(logits.value().data(), &parent_of, t.len(), want) {
                    m[i] = true;
                }
                m
            }
        };
        let mut h = prune(&u, &mask)?;
        for r in &self.res {
            h = r.forward(g, &h)?;
        }
        Ok(StageOutput {
            tensor: h,
            logits,
            candidates: u.geom.clone(),
            overflow,
        })
    }
}

/// Upsamples the decoded latents onto the known partition geometry and
/// aggregates them with shared-weight transformer blocks.
#[derive(Debug, Clone)]
pub struct FeatureSynthesis {
    pub up: StridedConv,
    pub evt: EvtParams,
    pub blocks: usize,
}

impl FeatureSynthesis {
    pub fn new(store: &mut ParamStore, name: &str, c_latent: usize, c_voxel: usize, evt_c: f64, evt_k: usize, blocks: usize) -> Self {
        let evt = EvtParams::new(store, &format!("{name}.evt"), c_voxel, evt_c, evt_k);
        evt.zero_residual_init(store);
        FeatureSynthesis {
            up: StridedConv::new(store, &format!("{name}.up"), c_latent, c_voxel, c_latent),
            evt,
            blocks,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.up.params();
        p.extend(self.evt.params());
        p
    }

    /// Returns the synthesized tensor and the number of partition voxels
    /// whose parent was absent from the latent map.
    pub fn forward<'g>(&self, g: &'g Graph, f: &SparseTensor<'g>, xpart: Rc<VoxelSet>) -> Result<(SparseTensor<'g>, usize)> {
        let u = upsample2_nn(g, f, &self.up)?.relu();
        let (r, missing) = restrict_to(g, &u, xpart)?;
        Ok((evt_cascade(g, &r, &self.evt, self.blocks)?, missing))
    }
}
