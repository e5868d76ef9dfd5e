//! Container-level encode and decode: octree partition plus learned
//! feature stream, or a plain octree for the `[n,0,0]` configuration.

use thiserror::Error;

use crate::codec::{CodecError, CodecModel};
use crate::config::CodecConfig;
use crate::geometry::PointCloud;
use crate::io::{pack_container, unpack_container, Container, ContainerError, ContainerHeader};
use crate::io::container::{FLAG_POINT_STAGE, FLAG_VOXEL_STAGE};
use crate::octree::{decode_octree, decode_octree_bounded, encode_octree, OctreeError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("partition stream: {0}")]
    Octree(#[from] OctreeError),
    #[error("container: {0}")]
    Container(#[from] ContainerError),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("empty input cloud")]
    Empty,
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone)]
pub struct Decoded {
    pub header: ContainerHeader,
    /// Raw synthesized points; equal to `cloud` for lossless streams.
    pub points: Vec<[f64; 3]>,
    pub cloud: PointCloud,
    pub warnings: Vec<String>,
}

/// Bits per input point of a container.
pub fn bpp(container_bytes: usize, num_points: u64) -> f64 {
    if num_points == 0 {
        return 0.0;
    }
    container_bytes as f64 * 8.0 / num_points as f64
}

fn flags_of(cfg: &CodecConfig) -> u8 {
    let mut f = 0;
    if cfg.point_stage() {
        f |= FLAG_POINT_STAGE;
    }
    if cfg.voxel_stage() {
        f |= FLAG_VOXEL_STAGE;
    }
    f
}

/// Whether `model` was built for the intervals recorded in `h`.
pub fn check_model(h: &ContainerHeader, cfg: &CodecConfig) -> Result<()> {
    let want = (h.bit_depth, h.n1_prime, h.n1, h.n2);
    let have = (cfg.n, cfg.n1_prime, cfg.n1, cfg.n2);
    if want != have || h.flags != flags_of(cfg) {
        return Err(PipelineError::ModelMismatch(format!(
            "stream intervals (n, n1', n1, n2) = {want:?}, model has {have:?}"
        )));
    }
    Ok(())
}

/// Lossless octree-only container.
pub fn encode_octree_only(pc: &PointCloud) -> Result<Vec<u8>> {
    if pc.is_empty() {
        return Err(PipelineError::Empty);
    }
    let n = pc.bit_depth();
    let header = ContainerHeader {
        bit_depth: n,
        n1_prime: n,
        n1: n,
        n2: n,
        flags: 0,
        num_points: pc.len() as u64,
        stage_counts: Vec::new(),
    };
    let part = encode_octree(pc)?;
    Ok(pack_container(&Container { header, part, feat: Vec::new() })?)
}

pub fn encode(pc: &PointCloud, model: &CodecModel) -> Result<Vec<u8>> {
    let cfg = &model.cfg;
    if pc.bit_depth() != cfg.n {
        return Err(PipelineError::ModelMismatch(format!(
            "cloud bit depth {} but model expects {}",
            pc.bit_depth(),
            cfg.n
        )));
    }
    if cfg.pure_octree() {
        return encode_octree_only(pc);
    }
    if pc.is_empty() {
        return Err(PipelineError::Empty);
    }
    let enc = model.encode(pc)?;
    let header = ContainerHeader {
        bit_depth: cfg.n,
        n1_prime: cfg.n1_prime,
        n1: cfg.n1,
        n2: cfg.n2,
        flags: flags_of(cfg),
        num_points: enc.num_points,
        stage_counts: enc.stage_counts,
    };
    let part = encode_octree(&enc.part)?;
    Ok(pack_container(&Container { header, part, feat: enc.feat })?)
}

/// Decodes a container. Octree-only streams need no model; learned streams
/// need one whose intervals match the header.
pub fn decode(bytes: &[u8], model: Option<&CodecModel>) -> Result<Decoded> {
    let c = unpack_container(bytes)?;
    let h = c.header;
    if let Some(m) = model {
        check_model(&h, &m.cfg)?;
    }
    if h.n1 == h.bit_depth && h.flags == 0 {
        let cloud = decode_octree(&c.part, h.bit_depth, h.num_points)?;
        return Ok(Decoded {
            header: h,
            points: cloud.to_f64(),
            cloud,
            warnings: Vec::new(),
        });
    }
    let model = model.ok_or_else(|| PipelineError::ModelMismatch("learned stream requires a model".into()))?;
    // X_part holds at most as many voxels as there are input points.
    let part = decode_octree_bounded(&c.part, h.n1, h.num_points)?;
    let rec = model.decode(&part, &c.feat, &h.stage_counts)?;
    Ok(Decoded {
        header: h,
        points: rec.points,
        cloud: rec.cloud,
        warnings: rec.warnings,
    })
}

/// Encoded size and decoded geometry in one call.
pub fn roundtrip(pc: &PointCloud, model: &CodecModel) -> Result<(Vec<u8>, Decoded)> {
    let bytes = encode(pc, model)?;
    let dec = decode(&bytes, Some(model))?;
    Ok((bytes, dec))
}
