//! Integer point clouds, power-of-two quantization and canonical ordering.
//!
//! Every point cloud in the codec is a deduplicated set of unsigned integer
//! coordinates sorted lexicographically by `(x, y, z)`. An `n`-bit cloud
//! lives in the `(2^n)^3` grid. Dropping the last `b` bits of every
//! coordinate (quantizing with step `2^b`) yields an `(n - b)`-bit cloud.

use thiserror::Error;

/// Integer voxel/point coordinate `(x, y, z)`.
pub type Coord = [u32; 3];

/// Largest supported bit-depth.
pub const MAX_BIT_DEPTH: u8 = 30;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("coordinate {coord:?} out of range for a {bit_depth}-bit cloud (max {max})")]
    OutOfRange {
        coord: Coord,
        bit_depth: u8,
        max: u32,
    },
    #[error("quantization step {step} is larger than 2^{bit_depth}")]
    InvalidStep { step: u32, bit_depth: u8 },
    #[error("quantization step {0} is not a positive power of two")]
    NotPowerOfTwo(u32),
    #[error("bit-depth {0} exceeds the supported maximum of {MAX_BIT_DEPTH}")]
    BitDepthTooLarge(u8),
}

/// Quantization step, always a power of two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantStep(u32);

impl QuantStep {
    pub fn new(step: u32) -> Result<Self, GeometryError> {
        if step == 0 || !step.is_power_of_two() {
            return Err(GeometryError::NotPowerOfTwo(step));
        }
        Ok(QuantStep(step))
    }

    /// Step `2^bits`.
    pub fn from_bits(bits: u8) -> Self {
        assert!(bits <= 31, "step 2^{bits} does not fit in u32");
        QuantStep(1 << bits)
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// Number of bits removed by this step.
    pub fn bits(self) -> u8 {
        self.0.trailing_zeros() as u8
    }
}

/// How to map a quantized voxel back to a real-valued support point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DequantMode {
    /// `coord * s`
    Corner,
    /// `coord * s + s / 2`
    Center,
}

/// Deduplicated, lexicographically sorted integer point set of a given bit-depth.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PointCloud {
    points: Vec<Coord>,
    bit_depth: u8,
}

/// Largest coordinate value representable at `bit_depth`.
pub fn max_coord(bit_depth: u8) -> u32 {
    if bit_depth >= 32 {
        u32::MAX
    } else {
        ((1u64 << bit_depth) - 1) as u32
    }
}

/// Validates coordinates against `bit_depth`, then sorts and removes duplicates.
pub fn dedup_sort(mut points: Vec<Coord>, bit_depth: u8) -> Result<PointCloud, GeometryError> {
    if bit_depth > MAX_BIT_DEPTH {
        return Err(GeometryError::BitDepthTooLarge(bit_depth));
    }
    let max = max_coord(bit_depth);
    if let Some(&coord) = points.iter().find(|p| p.iter().any(|&c| c > max)) {
        return Err(GeometryError::OutOfRange {
            coord,
            bit_depth,
            max,
        });
    }
    points.sort_unstable();
    points.dedup();
    Ok(PointCloud { points, bit_depth })
}

impl PointCloud {
    /// Builds a cloud from arbitrary (possibly unsorted, duplicated) points.
    pub fn new(points: Vec<Coord>, bit_depth: u8) -> Result<Self, GeometryError> {
        dedup_sort(points, bit_depth)
    }

    pub fn empty(bit_depth: u8) -> Self {
        PointCloud {
            points: Vec::new(),
            bit_depth,
        }
    }

    /// Caller guarantees sorted, unique, in-range points.
    pub(crate) fn from_sorted_unchecked(points: Vec<Coord>, bit_depth: u8) -> Self {
        debug_assert!(points.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(points
            .iter()
            .all(|p| p.iter().all(|&c| c <= max_coord(bit_depth))));
        PointCloud { points, bit_depth }
    }

    pub fn points(&self) -> &[Coord] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Coord> {
        self.points
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, p: &Coord) -> bool {
        self.points.binary_search(p).is_ok()
    }

    /// Floor-divides every coordinate by `step` and removes duplicates.
    pub fn quantize(&self, step: QuantStep) -> Result<PointCloud, GeometryError> {
        let bits = step.bits();
        if bits > self.bit_depth {
            return Err(GeometryError::InvalidStep {
                step: step.get(),
                bit_depth: self.bit_depth,
            });
        }
        let mut out: Vec<Coord> = self
            .points
            .iter()
            .map(|p| [p[0] >> bits, p[1] >> bits, p[2] >> bits])
            .collect();
        out.sort_unstable();
        out.dedup();
        Ok(PointCloud::from_sorted_unchecked(out, self.bit_depth - bits))
    }

    /// Maps every point to a real-valued support point of its quantization cell.
    pub fn dequantize(&self, step: QuantStep, mode: DequantMode) -> Vec<[f64; 3]> {
        self.points
            .iter()
            .map(|p| dequantize_coord(*p, step, mode))
            .collect()
    }

    pub fn to_f64(&self) -> Vec<[f64; 3]> {
        self.points
            .iter()
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect()
    }
}

pub fn dequantize_coord(p: Coord, step: QuantStep, mode: DequantMode) -> [f64; 3] {
    let s = step.get() as f64;
    let off = match mode {
        DequantMode::Corner => 0.0,
        DequantMode::Center => s / 2.0,
    };
    [
        p[0] as f64 * s + off,
        p[1] as f64 * s + off,
        p[2] as f64 * s + off,
    ]
}

/// Rounds real coordinates to the integer grid, clamping into `[0, 2^n - 1]`,
/// and returns the deduplicated cloud.
pub fn round_to_cloud(points: &[[f64; 3]], bit_depth: u8) -> PointCloud {
    let max = max_coord(bit_depth) as f64;
    let pts = points
        .iter()
        .map(|p| {
            let r = |v: f64| {
                if v.is_nan() {
                    0
                } else {
                    v.round().clamp(0.0, max) as u32
                }
            };
            [r(p[0]), r(p[1]), r(p[2])]
        })
        .collect();
    dedup_sort(pts, bit_depth).expect("clamped coordinates are in range")
}
