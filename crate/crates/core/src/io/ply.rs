//! Minimal PLY reader/writer for `x, y, z` vertex positions.
//!
//! Reads `ascii` and `binary_little_endian` files. Vertex properties other
//! than `x`, `y`, `z` are skipped, as are elements other than `vertex`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::{dedup_sort, Coord, PointCloud, MAX_BIT_DEPTH};

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("PLY parse error at {location}: {message}")]
    Parse { location: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: ScalarType },
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug)]
struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    bit_depth: Option<u8>,
}

fn parse_err(location: impl Into<String>, message: impl Into<String>) -> PlyError {
    PlyError::Parse {
        location: location.into(),
        message: message.into(),
    }
}

fn read_header<R: BufRead>(r: &mut R) -> Result<(Header, usize), PlyError> {
    let mut line = String::new();
    let mut lineno = 0usize;
    let mut next_line = |r: &mut R, line: &mut String| -> Result<usize, PlyError> {
        line.clear();
        let n = r
            .read_line(line)
            .map_err(|e| parse_err(format!("line {}", lineno + 1), e.to_string()))?;
        lineno += 1;
        if n == 0 {
            return Err(parse_err(format!("line {lineno}"), "unexpected end of header"));
        }
        Ok(lineno)
    };
    let ln = next_line(r, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(parse_err(format!("line {ln}"), "missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut bit_depth = None;
    loop {
        let ln = next_line(r, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        let loc = format!("line {ln}");
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(parse_err(loc, format!("unsupported format '{other}'"))),
                })
            }
            ["comment", "bit_depth", v] => {
                let n: u8 = v
                    .parse()
                    .map_err(|_| parse_err(&loc, format!("bad bit_depth '{v}'")))?;
                bit_depth = Some(n);
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| parse_err(&loc, format!("bad element count '{count}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", c, i, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(&loc, "property before element"))?;
                let count = ScalarType::parse(c)
                    .ok_or_else(|| parse_err(&loc, format!("unknown type '{c}'")))?;
                let item = ScalarType::parse(i)
                    .ok_or_else(|| parse_err(&loc, format!("unknown type '{i}'")))?;
                el.props.push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(&loc, "property before element"))?;
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| parse_err(&loc, format!("unknown type '{ty}'")))?;
                el.props.push(Property::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            _ => return Err(parse_err(loc, format!("unrecognized header line '{}'", line.trim_end()))),
        }
    }
    let format = format.ok_or_else(|| parse_err("header", "missing format line"))?;
    Ok((
        Header {
            format,
            elements,
            bit_depth,
        },
        lineno,
    ))
}

fn xyz_indices(el: &Element) -> Result<[usize; 3], PlyError> {
    let mut idx = [usize::MAX; 3];
    for (i, p) in el.props.iter().enumerate() {
        if let Property::Scalar { name, .. } = p {
            match name.as_str() {
                "x" => idx[0] = i,
                "y" => idx[1] = i,
                "z" => idx[2] = i,
                _ => {}
            }
        }
    }
    if idx.contains(&usize::MAX) {
        return Err(parse_err("header", "vertex element lacks x, y, z properties"));
    }
    Ok(idx)
}

/// Reads raw real-valued vertex positions.
pub fn read_ply_points(path: impl AsRef<Path>) -> Result<(Vec<[f64; 3]>, Option<u8>), PlyError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| PlyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut r = BufReader::new(file);
    let (header, header_lines) = read_header(&mut r)?;
    let mut points = Vec::new();
    match header.format {
        PlyFormat::Ascii => {
            let mut lineno = header_lines;
            let mut line = String::new();
            for el in &header.elements {
                let xyz = if el.name == "vertex" { Some(xyz_indices(el)?) } else { None };
                for _ in 0..el.count {
                    line.clear();
                    lineno += 1;
                    let n = r
                        .read_line(&mut line)
                        .map_err(|e| parse_err(format!("line {lineno}"), e.to_string()))?;
                    if n == 0 {
                        return Err(parse_err(format!("line {lineno}"), "unexpected end of file"));
                    }
                    if let Some(xyz) = xyz {
                        let toks: Vec<&str> = line.split_whitespace().collect();
                        let mut p = [0.0; 3];
                        for (axis, &col) in xyz.iter().enumerate() {
                            let tok = toks.get(col).ok_or_else(|| {
                                parse_err(format!("line {lineno}"), "too few vertex fields")
                            })?;
                            p[axis] = tok.parse::<f64>().map_err(|_| {
                                parse_err(format!("line {lineno}"), format!("bad number '{tok}'"))
                            })?;
                        }
                        points.push(p);
                    }
                }
                if el.name == "vertex" {
                    break;
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut offset = 0usize;
            let mut buf = [0u8; 8];
            let mut read_scalar = |r: &mut BufReader<File>, ty: ScalarType, offset: &mut usize| {
                let n = ty.size();
                r.read_exact(&mut buf[..n])
                    .map_err(|_| parse_err(format!("data byte offset {offset}"), "unexpected end of file"))?;
                *offset += n;
                Ok::<f64, PlyError>(ty.read_le(&buf[..n]))
            };
            for el in &header.elements {
                let is_vertex = el.name == "vertex";
                let xyz = if is_vertex { Some(xyz_indices(el)?) } else { None };
                for _ in 0..el.count {
                    let mut p = [0.0; 3];
                    for (i, prop) in el.props.iter().enumerate() {
                        match prop {
                            Property::Scalar { ty, .. } => {
                                let v = read_scalar(&mut r, *ty, &mut offset)?;
                                if let Some(xyz) = xyz {
                                    if let Some(axis) = xyz.iter().position(|&c| c == i) {
                                        p[axis] = v;
                                    }
                                }
                            }
                            Property::List { count, item } => {
                                let len = read_scalar(&mut r, *count, &mut offset)?;
                                for _ in 0..len as usize {
                                    read_scalar(&mut r, *item, &mut offset)?;
                                }
                            }
                        }
                    }
                    if is_vertex {
                        points.push(p);
                    }
                }
                if is_vertex {
                    break;
                }
            }
        }
    }
    Ok((points, header.bit_depth))
}

/// Reads a PLY file as an integer point cloud.
///
/// Coordinates are rounded to the nearest integer, deduplicated and sorted.
/// The bit-depth is `bit_depth_override`, else a `comment bit_depth N` header
/// line, else the smallest depth covering the largest coordinate.
pub fn read_ply(path: impl AsRef<Path>, bit_depth_override: Option<u8>) -> Result<PointCloud, PlyError> {
    let (raw, declared) = read_ply_points(&path)?;
    let mut pts: Vec<Coord> = Vec::with_capacity(raw.len());
    for (i, p) in raw.iter().enumerate() {
        let mut c = [0u32; 3];
        for axis in 0..3 {
            let v = p[axis];
            if !v.is_finite() {
                return Err(parse_err(format!("vertex {i}"), "non-finite coordinate"));
            }
            let r = v.round();
            if r < 0.0 {
                return Err(parse_err(format!("vertex {i}"), format!("negative coordinate {v}")));
            }
            if r > u32::MAX as f64 {
                return Err(parse_err(format!("vertex {i}"), format!("coordinate {v} too large")));
            }
            c[axis] = r as u32;
        }
        pts.push(c);
    }
    let max = pts.iter().flat_map(|p| p.iter().copied()).max().unwrap_or(0);
    let needed = (32 - max.leading_zeros()).max(1) as u8;
    let bit_depth = bit_depth_override.or(declared).unwrap_or(needed);
    if bit_depth > MAX_BIT_DEPTH {
        return Err(parse_err("header", format!("bit-depth {bit_depth} too large")));
    }
    dedup_sort(pts, bit_depth).map_err(|e| parse_err("data", e.to_string()))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PlyError + '_ {
    move |source| PlyError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_header<W: Write>(w: &mut W, format: PlyFormat, count: usize, ty: &str, bit_depth: Option<u8>) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    match format {
        PlyFormat::Ascii => writeln!(w, "format ascii 1.0")?,
        PlyFormat::BinaryLittleEndian => writeln!(w, "format binary_little_endian 1.0")?,
    }
    if let Some(n) = bit_depth {
        writeln!(w, "comment bit_depth {n}")?;
    }
    writeln!(w, "element vertex {count}")?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property {ty} {axis}")?;
    }
    writeln!(w, "end_header")
}

/// Writes an integer cloud; the bit-depth is recorded as a header comment.
pub fn write_ply(pc: &PointCloud, path: impl AsRef<Path>, format: PlyFormat) -> Result<(), PlyError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        write_header(&mut w, format, pc.len(), "uint", Some(pc.bit_depth()))?;
        for p in pc.points() {
            match format {
                PlyFormat::Ascii => writeln!(w, "{} {} {}", p[0], p[1], p[2])?,
                PlyFormat::BinaryLittleEndian => {
                    for c in p {
                        w.write_all(&c.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()
    })();
    res.map_err(io_err(path))
}

/// Writes real-valued points (`double` properties).
pub fn write_ply_real(points: &[[f64; 3]], path: impl AsRef<Path>, format: PlyFormat) -> Result<(), PlyError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        write_header(&mut w, format, points.len(), "double", None)?;
        for p in points {
            match format {
                PlyFormat::Ascii => writeln!(w, "{:?} {:?} {:?}", p[0], p[1], p[2])?,
                PlyFormat::BinaryLittleEndian => {
                    for c in p {
                        w.write_all(&c.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()
    })();
    res.map_err(io_err(path))
}
