//! Lossless octree coding of an integer point cloud.
//!
//! Nodes are visited breadth-first, level by level, in lexicographic order.
//! Each occupied node emits one occupancy byte where bit `7 - i` marks child
//! `i = (x_bit << 2) | (y_bit << 1) | z_bit`. Bits are coded MSB first with
//! an adaptive binary model chosen by `(bit index, bits already coded in
//! this byte, number of occupied siblings)`.

use thiserror::Error;

use crate::geometry::{Coord, PointCloud};
use crate::rangecoder::{AdaptiveBinaryModel, CoderError, RangeDecoder, RangeEncoder};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OctreeError {
    #[error("cannot octree-code an empty point cloud")]
    EmptyInput,
    #[error("corrupt octree stream: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Coder(#[from] CoderError),
}

/// Number of distinct `(bit_index, partial_pattern)` states in one byte.
const PATTERN_STATES: usize = 255;
const BUCKETS: usize = 8;

/// Context used to pick the adaptive model for one occupancy bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OctreeContext {
    pub bit_index: u8,
    pub partial_pattern: u8,
    /// Occupied-children count of the parent node, in `1..=8`.
    pub parent_count_bucket: u8,
}

impl OctreeContext {
    pub fn index(&self) -> usize {
        debug_assert!(self.bit_index < 8);
        debug_assert!((self.partial_pattern as u32) < (1u32 << self.bit_index));
        debug_assert!((1..=8).contains(&self.parent_count_bucket));
        let pattern_state = (1usize << self.bit_index) - 1 + self.partial_pattern as usize;
        (self.parent_count_bucket as usize - 1) * PATTERN_STATES + pattern_state
    }
}

/// Index of the child of a level-`level` node containing `p` (in an `n`-bit cloud).
#[inline]
fn child_index(p: &Coord, shift: u32) -> usize {
    (((p[0] >> shift) & 1) << 2 | ((p[1] >> shift) & 1) << 1 | ((p[2] >> shift) & 1)) as usize
}

/// Occupancy bytes of every node in breadth-first order, together with the
/// bucket of each node (occupied-sibling count).
pub fn occupancy_bytes(pc: &PointCloud) -> Vec<(u8, u8)> {
    let n = pc.bit_depth() as u32;
    let pts = pc.points();
    let mut out = Vec::new();
    // Each level node is a contiguous range of the sorted points sharing a prefix.
    // Sorting by (x, y, z) does not group by Morton prefix, so sort a copy by key.
    let mut keyed: Vec<Coord> = pts.to_vec();
    let mut nodes: Vec<(usize, usize, u8)> = vec![(0, keyed.len(), 1)];
    for level in 0..n {
        let shift = n - 1 - level;
        let mut next = Vec::with_capacity(nodes.len() * 2);
        for &(start, end, bucket) in &nodes {
            let slice = &mut keyed[start..end];
            slice.sort_unstable_by_key(|p| (child_index(p, shift), *p));
            let mut byte = 0u8;
            let mut ranges = Vec::with_capacity(8);
            let mut i = 0;
            while i < slice.len() {
                let c = child_index(&slice[i], shift);
                let mut j = i + 1;
                while j < slice.len() && child_index(&slice[j], shift) == c {
                    j += 1;
                }
                byte |= 0x80 >> c;
                ranges.push((start + i, start + j));
                i = j;
            }
            out.push((byte, bucket));
            let count = byte.count_ones() as u8;
            next.extend(ranges.into_iter().map(|(s, e)| (s, e, count)));
        }
        nodes = next;
    }
    out
}

fn models() -> Vec<AdaptiveBinaryModel> {
    vec![AdaptiveBinaryModel::new(); PATTERN_STATES * BUCKETS]
}

pub fn encode_octree(pc: &PointCloud) -> Result<Vec<u8>, OctreeError> {
    if pc.is_empty() {
        return Err(OctreeError::EmptyInput);
    }
    let mut enc = RangeEncoder::new();
    let mut ctx_models = models();
    for (byte, bucket) in occupancy_bytes(pc) {
        let mut partial = 0u8;
        for bit_index in 0..8u8 {
            let bit = (byte >> (7 - bit_index)) & 1 == 1;
            let ctx = OctreeContext {
                bit_index,
                partial_pattern: partial,
                parent_count_bucket: bucket,
            };
            enc.encode_bit(&mut ctx_models[ctx.index()], bit);
            partial = (partial << 1) | bit as u8;
        }
    }
    Ok(enc.finish())
}

/// Decodes a stream produced by [`encode_octree`] for an `n`-bit cloud of
/// `num_points` points.
pub fn decode_octree(bytes: &[u8], bit_depth: u8, num_points: u64) -> Result<PointCloud, OctreeError> {
    decode_inner(bytes, bit_depth, num_points, true)
}

/// Decodes a stream whose point count is unknown but at most `max_points`.
pub fn decode_octree_bounded(bytes: &[u8], bit_depth: u8, max_points: u64) -> Result<PointCloud, OctreeError> {
    decode_inner(bytes, bit_depth, max_points, false)
}

fn decode_inner(bytes: &[u8], bit_depth: u8, num_points: u64, exact: bool) -> Result<PointCloud, OctreeError> {
    if num_points == 0 {
        return Err(OctreeError::Corrupt("zero point count".into()));
    }
    let n = bit_depth as u32;
    if n == 0 {
        if exact && num_points != 1 {
            return Err(OctreeError::Corrupt(format!(
                "a 0-bit cloud has one point, header says {num_points}"
            )));
        }
        return Ok(PointCloud::from_sorted_unchecked(vec![[0, 0, 0]], 0));
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let mut ctx_models = models();
    // (prefix coordinate, occupied-sibling bucket)
    let mut nodes: Vec<(Coord, u8)> = vec![([0, 0, 0], 1)];
    for _level in 0..n {
        let mut next = Vec::with_capacity(nodes.len() * 2);
        for &(prefix, bucket) in &nodes {
            let mut partial = 0u8;
            for bit_index in 0..8u8 {
                let ctx = OctreeContext {
                    bit_index,
                    partial_pattern: partial,
                    parent_count_bucket: bucket,
                };
                let bit = dec.decode_bit(&mut ctx_models[ctx.index()])?;
                partial = (partial << 1) | bit as u8;
            }
            let byte = partial;
            if byte == 0 {
                return Err(OctreeError::Corrupt("zero occupancy byte".into()));
            }
            let count = byte.count_ones() as u8;
            for c in 0..8u32 {
                if byte & (0x80 >> c) != 0 {
                    let child = [
                        prefix[0] << 1 | (c >> 2) & 1,
                        prefix[1] << 1 | (c >> 1) & 1,
                        prefix[2] << 1 | c & 1,
                    ];
                    next.push((child, count));
                }
            }
            if next.len() as u64 > num_points {
                return Err(OctreeError::Corrupt(format!(
                    "more than {num_points} occupied nodes"
                )));
            }
        }
        nodes = next;
    }
    if exact && nodes.len() as u64 != num_points {
        return Err(OctreeError::Corrupt(format!(
            "decoded {} points, header says {num_points}",
            nodes.len()
        )));
    }
    let mut pts: Vec<Coord> = nodes.into_iter().map(|(p, _)| p).collect();
    pts.sort_unstable();
    Ok(PointCloud::from_sorted_unchecked(pts, bit_depth))
}
