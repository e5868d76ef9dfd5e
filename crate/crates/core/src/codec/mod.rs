//! The hierarchical codec model: parameters for every stage plus the
//! training, encoding and decoding passes over them.

pub mod bottleneck;
pub mod stages;

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{load_checkpoint, save_checkpoint, AutodiffError, Checkpoint, Graph, ParamStore, Tensor, Var};
use crate::config::{CodecConfig, ConfigError};
use crate::geometry::{GeometryError, PointCloud};
use crate::metrics::{bce_var, chamfer_var, rd_loss};
use crate::sparse::{downscale2, Downscale2, SparseTensor, VoxelSet};

pub use bottleneck::{BottleneckError, EntropyBottleneck};
pub use stages::{FeatureSynthesis, KeepRule, PointAnalysis, PointSynthesis, VoxelStage};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Bottleneck(#[from] BottleneckError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("model/stream mismatch: {0}")]
    Mismatch(String),
    #[error("empty input cloud")]
    Empty,
}

type Result<T> = std::result::Result<T, CodecError>;

/// All learned stages of one configuration.
#[derive(Debug, Clone)]
pub struct Networks {
    pub point_analysis: Option<PointAnalysis>,
    pub voxel_analysis: Vec<Downscale2>,
    pub feature_analysis: Downscale2,
    pub bottleneck: EntropyBottleneck,
    pub feature_synthesis: FeatureSynthesis,
    pub voxel_synthesis: Vec<VoxelStage>,
    pub point_synthesis: Option<PointSynthesis>,
}

#[derive(Debug, Clone)]
pub struct CodecModel {
    pub cfg: CodecConfig,
    pub store: ParamStore,
    /// `None` for the pure-octree configuration.
    pub nets: Option<Networks>,
}

/// Scalar diagnostics of one training forward pass.
#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub loss: f64,
    pub chamfer: Option<f64>,
    pub bce: Vec<f64>,
    pub bits: f64,
    pub rate: f64,
}

/// Everything the encoder produces besides the octree of the partition.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub part: PointCloud,
    pub feat: Vec<u8>,
    pub stage_counts: Vec<u32>,
    pub num_points: u64,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Raw synthesized points in original coordinate units.
    pub points: Vec<[f64; 3]>,
    /// Points rounded to the grid and deduplicated.
    pub cloud: PointCloud,
    pub warnings: Vec<String>,
}

/// How the voxel-synthesis stages choose survivors.
enum Keep<'a> {
    Truth(&'a [Rc<VoxelSet>]),
    Counts(&'a [u32]),
}

struct Synthesis<'g> {
    logits: Vec<(Var<'g>, Rc<VoxelSet>)>,
    x1: SparseTensor<'g>,
    points: Option<Var<'g>>,
    warnings: Vec<String>,
}

/// Analysis outputs: the geometry chain from X_part (level n1) up to X1
/// (level n2) and the continuous latents.
struct Analysis<'g> {
    chain: Vec<Rc<VoxelSet>>,
    latents: SparseTensor<'g>,
}

impl CodecModel {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        if cfg.pure_octree() {
            return Ok(CodecModel { cfg, store, nets: None });
        }
        let s = &cfg.stage;
        let m = (cfg.n2 - cfg.n1) as usize;
        let point_analysis = cfg
            .point_stage()
            .then(|| PointAnalysis::new(&mut store, "pa", s.c_point, s.k_group));
        let c1 = if cfg.point_stage() { s.c_point } else { 1 };
        let voxel_analysis: Vec<Downscale2> = (0..m)
            .map(|i| {
                let cin = if i == 0 { c1 } else { s.c_voxel };
                Downscale2::new(&mut store, &format!("va{i}"), cin, s.c_voxel)
            })
            .collect();
        let c2 = if m > 0 { s.c_voxel } else { c1 };
        let feature_analysis = Downscale2::new(&mut store, "fa", c2, s.c_latent);
        let bottleneck = EntropyBottleneck::new(&mut store, "eb", s.c_latent);
        let feature_synthesis = FeatureSynthesis::new(&mut store, "fs", s.c_latent, s.c_voxel, s.evt_c, s.evt_k, s.evt_blocks);
        let voxel_synthesis = (0..m)
            .map(|i| VoxelStage::new(&mut store, &format!("vs{i}"), s.c_voxel))
            .collect();
        let point_synthesis = cfg
            .point_stage()
            .then(|| PointSynthesis::new(&mut store, "ps", s.c_voxel, s.k_points, s.gamma));
        let nets = Networks {
            point_analysis,
            voxel_analysis,
            feature_analysis,
            bottleneck,
            feature_synthesis,
            voxel_synthesis,
            point_synthesis,
        };
        Ok(CodecModel { cfg, store, nets: Some(nets) })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = CodecConfig::parse(&ck.config)?;
        let mut model = CodecModel::new(cfg)?;
        model.store.load_values(&ck.params)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        CodecModel::from_checkpoint(&load_checkpoint(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.cfg.to_text(), &self.store)?;
        Ok(())
    }

    /// Rounds weights to what a checkpoint stores, so an in-memory model
    /// encodes exactly like its reloaded copy.
    pub fn finalize(&mut self) {
        self.store.round_to_f32();
    }

    fn nets(&self) -> Result<&Networks> {
        self.nets
            .as_ref()
            .ok_or_else(|| CodecError::Mismatch("pure octree configuration has no learned stages".into()))
    }

    fn analyze<'g>(&self, g: &'g Graph, pc: &PointCloud) -> Result<Analysis<'g>> {
        let nets = self.nets()?;
        let cfg = &self.cfg;
        if pc.bit_depth() != cfg.n {
            return Err(CodecError::Mismatch(format!(
                "cloud has bit depth {}, model expects {}",
                pc.bit_depth(),
                cfg.n
            )));
        }
        if pc.is_empty() {
            return Err(CodecError::Empty);
        }
        let x1_geom = Rc::new(VoxelSet::from_cloud(&pc.quantize(cfg.s1())?));
        let x1 = match &nets.point_analysis {
            Some(pa) => pa.forward(g, &VoxelSet::from_cloud(pc), x1_geom.clone(), cfg.s1().get())?,
            None => SparseTensor::new(x1_geom.clone(), g.constant(Tensor::full(&[x1_geom.len(), 1], 1.0)))?,
        };
        let mut chain = vec![x1_geom];
        let mut t = x1;
        for d in &nets.voxel_analysis {
            t = downscale2(g, &t, d)?;
            chain.push(t.geom.clone());
        }
        chain.reverse();
        let f = downscale2(g, &t, &nets.feature_analysis)?;
        let latents = f.with_feats(f.feats.scale(cfg.stage.latent_gain))?;
        Ok(Analysis { chain, latents })
    }

    fn synthesize<'g>(&self, g: &'g Graph, latents: &SparseTensor<'g>, xpart: Rc<VoxelSet>, keep: Keep) -> Result<Synthesis<'g>> {
        let nets = self.nets()?;
        let cfg = &self.cfg;
        let mut warnings = Vec::new();
        let f = latents.with_feats(latents.feats.scale(1.0 / cfg.stage.latent_gain))?;
        let (mut t, missing) = nets.feature_synthesis.forward(g, &f, xpart)?;
        if missing > 0 {
            warnings.push(format!("{missing} partition voxels had no latent parent"));
        }
        let mut logits = Vec::new();
        for (j, stage) in nets.voxel_synthesis.iter().enumerate() {
            let rule = match &keep {
                Keep::Truth(chain) => KeepRule::GroundTruth(&chain[j + 1]),
                Keep::Counts(c) => KeepRule::TopN(c[j] as usize),
            };
            let out = stage.forward(g, &t, cfg.n, rule)?;
            if out.overflow {
                warnings.push(format!(
                    "stage {j}: requested more voxels than candidates ({}), keeping all",
                    out.candidates.len()
                ));
            }
            logits.push((out.logits, out.candidates));
            t = out.tensor;
        }
        let points = match &nets.point_synthesis {
            Some(ps) => Some(ps.forward(g, &t, cfg.s1().get())?),
            None => None,
        };
        Ok(Synthesis { logits, x1: t, points, warnings })
    }

    /// One differentiable pass with uniform noise in place of quantization
    /// and ground-truth pruning. Returns the loss node and its parts.
    pub fn train_forward<'g, R: Rng>(&self, g: &'g Graph, pc: &PointCloud, rng: &mut R) -> Result<(Var<'g>, TrainStats)> {
        let nets = self.nets()?;
        let an = self.analyze(g, pc)?;
        let noise: Vec<f64> = (0..an.latents.feats.value().numel())
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        let noisy = an
            .latents
            .feats
            .add(&g.constant(Tensor::new(&an.latents.feats.shape(), noise)?))?;
        let bits = nets.bottleneck.bits(g, &noisy)?;
        let rate = bits.scale(1.0 / pc.len() as f64);
        let fhat = an.latents.with_feats(noisy)?;
        let syn = self.synthesize(g, &fhat, an.chain[0].clone(), Keep::Truth(&an.chain))?;

        let mut bce = Vec::new();
        for (j, (z, cand)) in syn.logits.iter().enumerate() {
            let truth = &an.chain[j + 1];
            let targets: Vec<f64> = cand
                .coords()
                .iter()
                .map(|c| truth.index_of(c).is_some() as u8 as f64)
                .collect();
            bce.push(bce_var(g, z, &targets)?);
        }
        let cd = match &syn.points {
            Some(p) => Some(chamfer_var(g, &pc.to_f64(), p)?),
            None => None,
        };
        let loss = rd_loss(g, cd, &bce, Some(rate), &self.cfg.loss)?;
        let stats = TrainStats {
            loss: loss.value().item(),
            chamfer: cd.map(|v| v.value().item()),
            bce: bce.iter().map(|v| v.value().item()).collect(),
            bits: bits.value().item(),
            rate: rate.value().item(),
        };
        Ok((loss, stats))
    }

    /// Analysis, hard quantization and entropy coding of the latents.
    pub fn encode(&self, pc: &PointCloud) -> Result<Encoded> {
        let nets = self.nets()?;
        let g = Graph::with_params(&self.store);
        let an = self.analyze(&g, pc)?;
        let q = bottleneck::quantize_latents(&an.latents.feats.value());
        let tables = nets.bottleneck.frequency_tables(&self.store)?;
        let feat = bottleneck::encode_latents(&q, nets.bottleneck.channels, &tables)?;
        let stage_counts = an.chain[1..].iter().map(|v| v.len() as u32).collect();
        Ok(Encoded {
            part: an.chain[0].to_cloud(),
            feat,
            stage_counts,
            num_points: pc.len() as u64,
        })
    }

    /// Rebuilds the cloud from the decoded partition, the latent bytes and
    /// the per-stage voxel counts.
    pub fn decode(&self, part: &PointCloud, feat: &[u8], stage_counts: &[u32]) -> Result<Reconstruction> {
        let nets = self.nets()?;
        let cfg = &self.cfg;
        if part.bit_depth() != cfg.n1 {
            return Err(CodecError::Mismatch(format!(
                "partition at level {}, model expects {}",
                part.bit_depth(),
                cfg.n1
            )));
        }
        if stage_counts.len() != nets.voxel_synthesis.len() {
            return Err(CodecError::Mismatch(format!(
                "{} stage counts for {} voxel stages",
                stage_counts.len(),
                nets.voxel_synthesis.len()
            )));
        }
        if part.is_empty() {
            return Err(CodecError::Empty);
        }
        let xpart = Rc::new(VoxelSet::from_cloud(part));
        let fgeom = xpart.parent_link().parents.clone();
        let c = nets.bottleneck.channels;
        let tables = nets.bottleneck.frequency_tables(&self.store)?;
        let q = bottleneck::decode_latents(feat, fgeom.len(), c, &tables)?;
        let g = Graph::with_params(&self.store);
        let data = q.iter().map(|&v| v as f64).collect();
        let latents = SparseTensor::new(fgeom.clone(), g.constant(Tensor::matrix(fgeom.len(), c, data)))?;
        let syn = self.synthesize(&g, &latents, xpart, Keep::Counts(stage_counts))?;
        let points: Vec<[f64; 3]> = match &syn.points {
            Some(p) => {
                let v = p.value();
                (0..v.rows()).map(|r| [v.get(r, 0), v.get(r, 1), v.get(r, 2)]).collect()
            }
            None => syn.x1.geom.to_cloud().to_f64(),
        };
        let cloud = crate::geometry::round_to_cloud(&points, cfg.n);
        Ok(Reconstruction { points, cloud, warnings: syn.warnings })
    }

    /// Continuous analysis latents, `|F| x C_latent`.
    pub fn latents(&self, pc: &PointCloud) -> Result<Tensor> {
        let g = Graph::with_params(&self.store);
        let an = self.analyze(&g, pc)?;
        let v = an.latents.feats.value();
        Ok((*v).clone())
    }

    /// Occupancy logits of every voxel stage under ground-truth pruning,
    /// paired with their targets. Used for classifier diagnostics.
    pub fn stage_logits(&self, pc: &PointCloud) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let g = Graph::with_params(&self.store);
        let an = self.analyze(&g, pc)?;
        let q = bottleneck::quantize_latents(&an.latents.feats.value());
        let data = q.iter().map(|&v| v as f64).collect();
        let latents = an.latents.with_feats(g.constant(Tensor::new(&an.latents.feats.shape(), data)?))?;
        let syn = self.synthesize(&g, &latents, an.chain[0].clone(), Keep::Truth(&an.chain))?;
        Ok(syn
            .logits
            .iter()
            .enumerate()
            .map(|(j, (z, cand))| {
                let t = cand
                    .coords()
                    .iter()
                    .map(|c| an.chain[j + 1].index_of(c).is_some() as u8 as f64)
                    .collect();
                (z.value().data().to_vec(), t)
            })
            .collect())
    }
}
