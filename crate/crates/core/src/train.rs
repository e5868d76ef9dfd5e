//! Synthetic shape generation, the RD training loop and rate-point sweeps.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{Adam, AutodiffError, Graph};
use crate::codec::{CodecError, CodecModel};
use crate::config::{CodecConfig, ConfigError, Dataset, Shape, TrainConfig};
use crate::geometry::{max_coord, Coord, PointCloud};
use crate::io::{read_ply, PlyError};
use crate::metrics::{point_metrics, MetricError, RdCurve};
use crate::pipeline::{self, bpp, PipelineError};

/// Per-sample voxel budget; larger clouds are cropped to a block.
pub const VOXEL_BUDGET: usize = 1 << 15;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("cannot place {requested} points on a {shape} at {bits} bits (got {reached})")]
    Capacity {
        shape: Shape,
        bits: u8,
        requested: usize,
        reached: usize,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged { epoch: usize, step: usize, reason: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
}

type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path, e: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Collects voxelized surface samples until `target` distinct voxels exist,
/// giving up after a long run without new voxels.
fn fill(target: usize, bits: u8, shape: Shape, mut sample: impl FnMut() -> [f64; 3]) -> Result<PointCloud> {
    let max = max_coord(bits) as f64;
    let mut seen: HashSet<Coord> = HashSet::with_capacity(target);
    let mut out = Vec::with_capacity(target);
    let patience = 50 * target.max(100);
    let mut stale = 0;
    while out.len() < target {
        let p = sample();
        let c = p.map(|x| x.floor().clamp(0.0, max) as u32);
        if seen.insert(c) {
            out.push(c);
            stale = 0;
        } else {
            stale += 1;
            if stale > patience {
                return Err(TrainError::Capacity {
                    shape,
                    bits,
                    requested: target,
                    reached: out.len(),
                });
            }
        }
    }
    out.sort_unstable();
    Ok(PointCloud::new(out, bits).expect("coordinates clamped to the grid"))
}

/// Deterministic surface-sampled cloud of a synthetic shape.
pub fn synth_cloud(shape: Shape, bits: u8, target_points: usize, seed: u64) -> Result<PointCloud> {
    if !(6..=18).contains(&bits) {
        return Err(ConfigError::Invalid(format!("synthetic bit depth must be in 6..=18, got {bits}")).into());
    }
    if target_points == 0 {
        return Err(ConfigError::Invalid("target point count must be positive".into()).into());
    }
    let size = (1u64 << bits) as f64;
    let mid = size / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match shape {
        Shape::Sphere => {
            let r = 0.4 * size;
            fill(target_points, bits, shape, || {
                let u = unit_vector(&mut rng);
                [mid + r * u[0], mid + r * u[1], mid + r * u[2]]
            })
        }
        Shape::Torus => {
            let (big, small) = (0.3 * size, 0.1 * size);
            fill(target_points, bits, shape, || loop {
                let u = rng.random_range(0.0..std::f64::consts::TAU);
                let v = rng.random_range(0.0..std::f64::consts::TAU);
                // area element is proportional to big + small*cos(v)
                if rng.random_range(0.0..big + small) <= big + small * v.cos() {
                    let w = big + small * v.cos();
                    break [mid + w * u.cos(), mid + w * u.sin(), mid + small * v.sin()];
                }
            })
        }
        Shape::Plane => fill(target_points, bits, shape, || {
            [
                rng.random_range(0.1 * size..0.9 * size),
                rng.random_range(0.1 * size..0.9 * size),
                mid,
            ]
        }),
        Shape::LidarRings => lidar_rings(target_points, bits, &mut rng),
    }
}

/// Coaxial scan rings on a cylinder around a virtual sensor. The beam count
/// and azimuth resolution are chosen so the two spacings match, which keeps
/// the rings regular and sparse.
fn lidar_rings(target: usize, bits: u8, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let size = (1u64 << bits) as f64;
    let mid = size / 2.0;
    let radius = 0.45 * size;
    let height = 0.8 * size;
    let beams = ((target as f64 * height / (std::f64::consts::TAU * radius)).sqrt().round() as usize).max(1);
    let azimuths = target.div_ceil(beams);
    let max = max_coord(bits) as f64;
    let mut pts = Vec::with_capacity(beams * azimuths);
    for b in 0..beams {
        let z = 0.1 * size + height * (b as f64 + 0.5) / beams as f64;
        let phase = rng.random_range(0.0..1.0);
        for a in 0..azimuths {
            let t = std::f64::consts::TAU * (a as f64 + phase) / azimuths as f64;
            let p = [mid + radius * t.cos(), mid + radius * t.sin(), z];
            pts.push(p.map(|x| x.floor().clamp(0.0, max) as u32));
        }
    }
    pts.truncate(target);
    let n = pts.len();
    let pc = crate::geometry::dedup_sort(pts, bits).expect("coordinates clamped to the grid");
    if pc.len() < n {
        return Err(TrainError::Capacity {
            shape: Shape::LidarRings,
            bits,
            requested: target,
            reached: pc.len(),
        });
    }
    Ok(pc)
}

/// Random axis permutation and flips.
pub fn augment(pc: &PointCloud, rng: &mut impl Rng) -> PointCloud {
    let max = max_coord(pc.bit_depth());
    let mut perm = [0usize, 1, 2];
    perm.shuffle(rng);
    let flip: [bool; 3] = [rng.random(), rng.random(), rng.random()];
    let pts = pc
        .points()
        .iter()
        .map(|p| {
            let mut q = [0u32; 3];
            for a in 0..3 {
                let v = p[perm[a]];
                q[a] = if flip[a] { max - v } else { v };
            }
            q
        })
        .collect();
    crate::geometry::dedup_sort(pts, pc.bit_depth()).expect("permutation stays on the grid")
}

/// The `budget` points closest (Chebyshev) to a random seed point.
pub fn crop(pc: &PointCloud, budget: usize, rng: &mut impl Rng) -> PointCloud {
    if pc.len() <= budget {
        return pc.clone();
    }
    let seed = pc.points()[rng.random_range(0..pc.len())];
    let mut by_dist: Vec<(u32, Coord)> = pc
        .points()
        .iter()
        .map(|p| ((0..3).map(|a| p[a].abs_diff(seed[a])).max().unwrap(), *p))
        .collect();
    by_dist.sort_unstable();
    let pts = by_dist.into_iter().take(budget).map(|(_, p)| p).collect();
    crate::geometry::dedup_sort(pts, pc.bit_depth()).expect("subset of a valid cloud")
}

/// Loads the training clouds named by a dataset spec.
pub fn load_dataset(ds: &Dataset, bit_depth: u8) -> Result<Vec<PointCloud>> {
    match ds {
        Dataset::Synthetic { shape, bits, points, seed } => {
            if *bits != bit_depth {
                return Err(ConfigError::Invalid(format!(
                    "synthetic bit depth {bits} differs from the model's {bit_depth}"
                ))
                .into());
            }
            Ok(vec![synth_cloud(*shape, *bits, *points, *seed)?])
        }
        Dataset::Path(p) => {
            let files: Vec<PathBuf> = if p.is_dir() {
                let mut v: Vec<PathBuf> = std::fs::read_dir(p)
                    .map_err(|e| io_err(p, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
                    .collect();
                v.sort();
                v
            } else {
                vec![p.clone()]
            };
            if files.is_empty() {
                return Err(ConfigError::Invalid(format!("no .ply files in {}", p.display())).into());
            }
            files
                .iter()
                .map(|f| Ok(read_ply(f, Some(bit_depth))?))
                .collect()
        }
    }
}

/// One optimizer step, averaged over its batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub chamfer: f64,
    pub bce: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub rows: Vec<LossRow>,
    pub epoch_means: Vec<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,L,L_CD,L_BCE,L_R\n");
        for r in &self.rows {
            writeln!(s, "{},{},{:.10e},{:.10e},{:.10e},{:.10e}", r.epoch, r.step, r.loss, r.chamfer, r.bce, r.rate).unwrap();
        }
        s
    }
}

/// Where to persist training artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

/// Adam on the RD loss. Per-epoch progress goes to `progress`.
pub fn train(
    model: &mut CodecModel,
    cfg: &TrainConfig,
    data: &[PointCloud],
    out: &TrainOutputs,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ConfigError::Invalid("empty training set".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut report = TrainReport::default();
    let mut step = 0usize;
    let mut cursor = 0usize;
    for epoch in 0..cfg.epochs {
        let mut epoch_sum = 0.0;
        let mut done = 0usize;
        while done < cfg.samples_per_epoch {
            let b = cfg.batch_size.min(cfg.samples_per_epoch - done);
            model.store.zero_grad();
            let mut acc = LossRow {
                epoch,
                step,
                loss: 0.0,
                chamfer: 0.0,
                bce: 0.0,
                rate: 0.0,
            };
            for _ in 0..b {
                let base = &data[cursor % data.len()];
                cursor += 1;
                let mut pc = crop(base, VOXEL_BUDGET, &mut rng);
                if cfg.augment {
                    pc = augment(&pc, &mut rng);
                }
                let g = Graph::with_params(&model.store);
                let (loss, st) = model.train_forward(&g, &pc, &mut rng)?;
                if !st.loss.is_finite() {
                    return Err(diverged(model, out, epoch, step, format!("loss {}", st.loss)));
                }
                g.backward(loss)?.accumulate_into(&mut model.store);
                acc.loss += st.loss;
                acc.chamfer += st.chamfer.unwrap_or(0.0);
                acc.bce += if st.bce.is_empty() { 0.0 } else { st.bce.iter().sum::<f64>() / st.bce.len() as f64 };
                acc.rate += st.rate;
            }
            model.store.scale_grads(1.0 / b as f64);
            if let Err(e) = adam.step(&mut model.store) {
                return Err(diverged(model, out, epoch, step, e.to_string()));
            }
            let k = b as f64;
            acc.loss /= k;
            acc.chamfer /= k;
            acc.bce /= k;
            acc.rate /= k;
            epoch_sum += acc.loss * k;
            report.rows.push(acc);
            done += b;
            step += 1;
        }
        let mean = epoch_sum / cfg.samples_per_epoch as f64;
        report.epoch_means.push(mean);
        progress(epoch, mean);
    }
    model.finalize();
    if let Some(p) = &out.checkpoint {
        model.save(p)?;
    }
    if let Some(p) = &out.loss_log {
        std::fs::write(p, report.to_csv()).map_err(|e| io_err(p, e))?;
    }
    Ok(report)
}

fn diverged(model: &CodecModel, out: &TrainOutputs, epoch: usize, step: usize, reason: String) -> TrainError {
    // parameters are untouched by the failing step, so they are the last good state
    if let Some(p) = &out.checkpoint {
        let _ = model.save(p);
    }
    TrainError::Diverged { epoch, step, reason }
}

/// One entry of a rate-point sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub triple: (u8, u8, u8),
    pub lambda: f64,
    pub bpp: f64,
    pub d1_psnr: f64,
    pub d2_psnr: f64,
}

/// Trains one model per triple (octree-only triples need none), then
/// encodes and decodes `eval` with each.
pub fn rate_point_sweep(
    base: &CodecConfig,
    triples: &[(u8, u8, u8)],
    train_cfg: &TrainConfig,
    data: &[PointCloud],
    eval: &PointCloud,
    mut progress: impl FnMut(&str),
) -> Result<(RdCurve, Vec<SweepRow>)> {
    let n = base.n;
    for &(c, m, f) in triples {
        if c as u16 + m as u16 + f as u16 != n as u16 {
            return Err(ConfigError::Invalid(format!("triple [{c},{m},{f}] does not sum to n = {n}")).into());
        }
    }
    let grid = &train_cfg.lambda_grid;
    if grid.len() > 1 && grid.len() != triples.len() {
        return Err(ConfigError::Invalid(format!(
            "lambda grid has {} entries for {} triples",
            grid.len(),
            triples.len()
        ))
        .into());
    }
    let mut rows = Vec::new();
    for (i, &(c, m, f)) in triples.iter().enumerate() {
        let mut cfg = CodecConfig::from_triple(c, m, f)?;
        cfg.stage = base.stage.clone();
        cfg.loss = base.loss;
        cfg.seed = base.seed;
        cfg.loss.lambda = match grid.len() {
            0 => base.loss.lambda,
            1 => grid[0],
            _ => grid[i],
        };
        let mut model = CodecModel::new(cfg)?;
        if !model.cfg.pure_octree() {
            progress(&format!("training [{c},{m},{f}] with lambda {}", model.cfg.loss.lambda));
            train(&mut model, train_cfg, data, &TrainOutputs::default(), |_, _| {})?;
        }
        let (bytes, dec) = pipeline::roundtrip(eval, &model)?;
        let pm = point_metrics(&eval.to_f64(), &dec.cloud.to_f64(), n)?;
        let row = SweepRow {
            triple: (c, m, f),
            lambda: model.cfg.loss.lambda,
            bpp: bpp(bytes.len(), eval.len() as u64),
            d1_psnr: pm.d1_psnr,
            d2_psnr: pm.d2_psnr,
        };
        progress(&format!("[{c},{m},{f}] bpp {:.4} d1 {:.3}", row.bpp, row.d1_psnr));
        rows.push(row);
    }
    rows.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    let curve = RdCurve::new(rows.iter().map(|r| (r.bpp, r.d1_psnr)).collect())?;
    Ok((curve, rows))
}

/// Parses `"c,m,f;c,m,f"`.
pub fn parse_triples(s: &str) -> std::result::Result<Vec<(u8, u8, u8)>, ConfigError> {
    let bad = || ConfigError::BadValue {
        key: "triples".into(),
        value: s.into(),
    };
    s.split(';')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            let v: Vec<u8> = t
                .split(',')
                .map(|x| x.trim().parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            match v[..] {
                [c, m, f] => Ok((c, m, f)),
                _ => Err(bad()),
            }
        })
        .collect()
}
