//! The `PVTN` bitstream container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PVTN" | version u8 | n u8 | n1' u8 | n1 u8 | n2 u8 | flags u8
//! | num_points u64
//! | stage count u8 | stage_counts u32 * count
//! | part_len u32 | part bytes
//! | feat_len u32 | feat bytes
//! ```
//!
//! `flags` bit 0 marks the point stage active (`n2 < n`), bit 1 the voxel
//! stage (`n1 < n2`).

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PVTN";
pub const VERSION: u8 = 1;

pub const FLAG_POINT_STAGE: u8 = 0b01;
pub const FLAG_VOXEL_STAGE: u8 = 0b10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    BadVersion(u8),
    #[error("container truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after feature payload")]
    TrailingBytes(usize),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

/// Fixed header fields of a container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerHeader {
    pub bit_depth: u8,
    pub n1_prime: u8,
    pub n1: u8,
    pub n2: u8,
    pub flags: u8,
    pub num_points: u64,
    /// Ground-truth occupied-voxel counts per voxel-synthesis stage, coarse to fine.
    pub stage_counts: Vec<u32>,
}

impl ContainerHeader {
    pub fn point_stage(&self) -> bool {
        self.flags & FLAG_POINT_STAGE != 0
    }

    pub fn voxel_stage(&self) -> bool {
        self.flags & FLAG_VOXEL_STAGE != 0
    }

    pub fn validate(&self) -> Result<(), ContainerError> {
        let bad = |m: String| Err(ContainerError::InvalidHeader(m));
        if !(self.n1_prime <= self.n1 && self.n1 <= self.n2 && self.n2 <= self.bit_depth) {
            return bad(format!(
                "interval ordering violated: n1'={} n1={} n2={} n={}",
                self.n1_prime, self.n1, self.n2, self.bit_depth
            ));
        }
        if self.flags & !(FLAG_POINT_STAGE | FLAG_VOXEL_STAGE) != 0 {
            return bad(format!("unknown flag bits {:#04x}", self.flags));
        }
        if self.point_stage() != (self.n2 < self.bit_depth) {
            return bad(format!(
                "point-stage flag {} inconsistent with n2={} n={}",
                self.point_stage(),
                self.n2,
                self.bit_depth
            ));
        }
        if self.voxel_stage() != (self.n1 < self.n2) {
            return bad(format!(
                "voxel-stage flag {} inconsistent with n1={} n2={}",
                self.voxel_stage(),
                self.n1,
                self.n2
            ));
        }
        if self.stage_counts.len() != (self.n2 - self.n1) as usize {
            return bad(format!(
                "{} stage counts for {} voxel stages",
                self.stage_counts.len(),
                self.n2 - self.n1
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub header: ContainerHeader,
    pub part: Vec<u8>,
    pub feat: Vec<u8>,
}

impl Container {
    /// Size of the fixed and variable header fields, excluding payloads.
    pub fn header_len(&self) -> usize {
        4 + 6 + 8 + 1 + 4 * self.header.stage_counts.len() + 4 + 4
    }

    pub fn total_len(&self) -> usize {
        self.header_len() + self.part.len() + self.feat.len()
    }
}

pub fn pack_container(c: &Container) -> Result<Vec<u8>, ContainerError> {
    c.header.validate()?;
    let h = &c.header;
    if h.stage_counts.len() > u8::MAX as usize {
        return Err(ContainerError::InvalidHeader("too many stages".into()));
    }
    let part_len = u32::try_from(c.part.len())
        .map_err(|_| ContainerError::InvalidHeader("partition payload too large".into()))?;
    let feat_len = u32::try_from(c.feat.len())
        .map_err(|_| ContainerError::InvalidHeader("feature payload too large".into()))?;
    let mut out = Vec::with_capacity(c.total_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, h.bit_depth, h.n1_prime, h.n1, h.n2, h.flags]);
    out.extend_from_slice(&h.num_points.to_le_bytes());
    out.push(h.stage_counts.len() as u8);
    for s in &h.stage_counts {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&part_len.to_le_bytes());
    out.extend_from_slice(&c.part);
    out.extend_from_slice(&feat_len.to_le_bytes());
    out.extend_from_slice(&c.feat);
    debug_assert_eq!(out.len(), c.total_len());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::Truncated(what))?;
        let s = self.buf.get(self.pos..end).ok_or(ContainerError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, ContainerError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn unpack_container(bytes: &[u8]) -> Result<Container, ContainerError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(ContainerError::BadVersion(version));
    }
    let bit_depth = r.u8("bit depth")?;
    let n1_prime = r.u8("n1'")?;
    let n1 = r.u8("n1")?;
    let n2 = r.u8("n2")?;
    let flags = r.u8("flags")?;
    let num_points = r.u64("point count")?;
    let stages = r.u8("stage count")? as usize;
    let stage_counts = (0..stages)
        .map(|_| r.u32("stage counts"))
        .collect::<Result<Vec<_>, _>>()?;
    let part_len = r.u32("partition length")? as usize;
    let part = r.take(part_len, "partition payload")?.to_vec();
    let feat_len = r.u32("feature length")? as usize;
    let feat = r.take(feat_len, "feature payload")?.to_vec();
    if r.pos != bytes.len() {
        return Err(ContainerError::TrailingBytes(bytes.len() - r.pos));
    }
    let header = ContainerHeader {
        bit_depth,
        n1_prime,
        n1,
        n2,
        flags,
        num_points,
        stage_counts,
    };
    header.validate()?;
    Ok(Container { header, part, feat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn minimal() -> Container {
        Container {
            header: ContainerHeader {
                bit_depth: 1,
                n1_prime: 1,
                n1: 1,
                n2: 1,
                flags: 0,
                num_points: 0,
                stage_counts: vec![],
            },
            part: vec![],
            feat: vec![],
        }
    }

    #[test]
    fn minimal_roundtrip() {
        let c = minimal();
        let bytes = pack_container(&c).unwrap();
        assert_eq!(bytes.len(), c.total_len());
        assert_eq!(&bytes[..4], b"PVTN");
        assert_eq!(unpack_container(&bytes).unwrap(), c);
    }

    #[test]
    fn length_mismatch_detected() {
        let mut c = minimal();
        c.part = vec![1, 2, 3];
        let mut bytes = pack_container(&c).unwrap();
        // part_len sits right after the 19-byte fixed header and stage list
        bytes[19] = 9;
        assert!(unpack_container(&bytes).is_err());
        let good = pack_container(&c).unwrap();
        assert!(matches!(
            unpack_container(&good[..good.len() - 1]),
            Err(ContainerError::Truncated(_))
        ));
        let mut extra = good.clone();
        extra.push(0);
        assert_eq!(unpack_container(&extra), Err(ContainerError::TrailingBytes(1)));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = pack_container(&minimal()).unwrap();
        bytes[4] = 2;
        assert_eq!(unpack_container(&bytes), Err(ContainerError::BadVersion(2)));
        bytes[0] = b'X';
        assert!(matches!(unpack_container(&bytes), Err(ContainerError::BadMagic(_))));
    }

    #[test]
    fn point_flag_requires_fine_bits() {
        let mut c = minimal();
        c.header.bit_depth = 8;
        c.header.n1_prime = 4;
        c.header.n1 = 5;
        c.header.n2 = 8;
        c.header.stage_counts = vec![1, 2, 3];
        c.header.flags = FLAG_VOXEL_STAGE;
        assert!(pack_container(&c).is_ok());
        // point stage off must mean n2 == n
        c.header.flags = FLAG_VOXEL_STAGE | FLAG_POINT_STAGE;
        assert!(pack_container(&c).is_err());
        c.header.n2 = 6;
        c.header.stage_counts = vec![1];
        assert!(pack_container(&c).is_ok());
        c.header.flags = FLAG_VOXEL_STAGE;
        assert!(pack_container(&c).is_err());
    }

    #[test]
    fn interval_ordering_enforced() {
        let mut c = minimal();
        c.header.bit_depth = 4;
        c.header.n1_prime = 3;
        c.header.n1 = 2;
        c.header.n2 = 4;
        c.header.flags = FLAG_VOXEL_STAGE;
        c.header.stage_counts = vec![1, 1];
        assert!(matches!(pack_container(&c), Err(ContainerError::InvalidHeader(_))));
    }

    fn header_strategy() -> impl Strategy<Value = ContainerHeader> {
        (1u8..=20)
            .prop_flat_map(|n| (Just(n), 0..=n))
            .prop_flat_map(|(n, n2)| (Just(n), Just(n2), 0..=n2))
            .prop_flat_map(|(n, n2, n1)| (Just(n), Just(n2), Just(n1), 0..=n1, any::<u64>()))
            .prop_flat_map(|(n, n2, n1, n1p, np)| {
                (
                    Just((n, n2, n1, n1p, np)),
                    prop::collection::vec(any::<u32>(), (n2 - n1) as usize),
                )
            })
            .prop_map(|((n, n2, n1, n1p, np), counts)| {
                let mut flags = 0;
                if n2 < n {
                    flags |= FLAG_POINT_STAGE;
                }
                if n1 < n2 {
                    flags |= FLAG_VOXEL_STAGE;
                }
                ContainerHeader {
                    bit_depth: n,
                    n1_prime: n1p,
                    n1,
                    n2,
                    flags,
                    num_points: np,
                    stage_counts: counts,
                }
            })
    }

    proptest! {
        #[test]
        fn roundtrip_valid(header in header_strategy(),
                           part in prop::collection::vec(any::<u8>(), 0..64),
                           feat in prop::collection::vec(any::<u8>(), 0..64)) {
            let c = Container { header, part, feat };
            let bytes = pack_container(&c).unwrap();
            prop_assert_eq!(bytes.len(), c.total_len());
            prop_assert_eq!(unpack_container(&bytes).unwrap(), c);
        }
    }
}
