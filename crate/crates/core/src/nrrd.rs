//! Reader and writer for 3-D scalar NRRD files with raw encoding.
//!
//! Only what the pipeline exchanges is supported: attached data, `raw`
//! encoding, element types `uint8`, `uint16`, `int16` and `float`, and
//! axis-aligned geometry given either by `spacings` or a diagonal
//! `space directions` matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::volume::{Geometry, LabelVolume, ScalarVolume, VolumeError};

const MAGIC: &[u8] = b"NRRD000";

/// A parse failure tied to the header field (or data section) that caused it.
#[derive(Debug, Error, PartialEq)]
#[error("field `{field}`: {message}")]
pub struct FormatError {
    pub field: String,
    pub message: String,
}

fn bad(field: &str, message: impl Into<String>) -> FormatError {
    FormatError {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Error)]
pub enum NrrdError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
}

impl NrrdError {
    fn format(path: &Path, source: FormatError) -> Self {
        NrrdError::Format {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    U8,
    U16,
    I16,
    F32,
}

impl ElementType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "uchar" | "unsigned char" | "uint8" | "uint8_t" => ElementType::U8,
            "ushort" | "unsigned short" | "unsigned short int" | "uint16" | "uint16_t" => {
                ElementType::U16
            }
            "short" | "short int" | "signed short" | "signed short int" | "int16" | "int16_t" => {
                ElementType::I16
            }
            "float" => ElementType::F32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ElementType::U8 => 1,
            ElementType::U16 | ElementType::I16 => 2,
            ElementType::F32 => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ElementType::U8 => "uint8",
            ElementType::U16 => "uint16",
            ElementType::I16 => "int16",
            ElementType::F32 => "float",
        }
    }
}

/// Voxel values as stored in the file.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl VolumeData {
    pub fn element_type(&self) -> ElementType {
        match self {
            VolumeData::U8(_) => ElementType::U8,
            VolumeData::U16(_) => ElementType::U16,
            VolumeData::I16(_) => ElementType::I16,
            VolumeData::F32(_) => ElementType::F32,
        }
    }
}

/// A decoded NRRD file, not yet committed to intensity or label semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct NrrdVolume {
    pub geometry: Geometry,
    pub data: VolumeData,
    /// `key:=value` pairs from the header.
    pub key_values: BTreeMap<String, String>,
}

impl NrrdVolume {
    /// Converts to intensities; integer types widen exactly.
    pub fn into_scalar(self) -> Result<ScalarVolume, VolumeError> {
        let data = match self.data {
            VolumeData::U8(v) => v.into_iter().map(f32::from).collect(),
            VolumeData::U16(v) => v.into_iter().map(f32::from).collect(),
            VolumeData::I16(v) => v.into_iter().map(f32::from).collect(),
            VolumeData::F32(v) => v,
        };
        ScalarVolume::new(self.geometry, data)
    }

    /// Converts to labels. Requires an integer element type with non-negative
    /// values; `num_labels` comes from the `num_labels:=` key when present.
    pub fn into_labels(self) -> Result<LabelVolume, FormatError> {
        let data: Vec<u16> = match self.data {
            VolumeData::U8(v) => v.into_iter().map(u16::from).collect(),
            VolumeData::U16(v) => v,
            VolumeData::I16(v) => v
                .into_iter()
                .map(u16::try_from)
                .collect::<Result<_, _>>()
                .map_err(|_| bad("type", "negative value in label volume"))?,
            VolumeData::F32(_) => return Err(bad("type", "float data cannot hold labels")),
        };
        let stored = self
            .key_values
            .get("num_labels")
            .map(|s| {
                s.trim()
                    .parse::<u16>()
                    .map_err(|_| bad("num_labels", format!("not an integer: {s:?}")))
            })
            .transpose()?;
        let max = data.iter().copied().max().unwrap_or(0);
        let num_labels = stored.unwrap_or(max);
        LabelVolume::new(self.geometry, data, num_labels)
            .map_err(|e| bad("num_labels", e.to_string()))
    }
}

fn parse_vector(field: &str, s: &str) -> Result<[f64; 3], FormatError> {
    let inner = s
        .trim()
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| bad(field, format!("expected (a,b,c), got {s:?}")))?;
    let parts: Vec<&str> = inner.split(',').collect();
    if parts.len() != 3 {
        return Err(bad(field, format!("expected 3 components, got {s:?}")));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .trim()
            .parse()
            .map_err(|_| bad(field, format!("not a number: {p:?}")))?;
    }
    Ok(out)
}

/// Splits `(a,b,c) (d,e,f) (g,h,i)` into its three vectors.
fn parse_space_directions(s: &str) -> Result<[[f64; 3]; 3], FormatError> {
    const FIELD: &str = "space directions";
    let mut vectors = Vec::new();
    let mut rest = s.trim();
    while !rest.is_empty() {
        if rest.starts_with("none") {
            return Err(bad(FIELD, "`none` axes are not supported"));
        }
        let end = rest
            .find(')')
            .ok_or_else(|| bad(FIELD, format!("unterminated vector in {s:?}")))?;
        vectors.push(parse_vector(FIELD, &rest[..=end])?);
        rest = rest[end + 1..].trim_start();
    }
    if vectors.len() != 3 {
        return Err(bad(FIELD, format!("expected 3 vectors, got {}", vectors.len())));
    }
    Ok([vectors[0], vectors[1], vectors[2]])
}

fn parse_triple<T: std::str::FromStr>(field: &str, s: &str) -> Result<[T; 3], FormatError> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(bad(field, format!("expected 3 values, got {s:?}")));
    }
    let parse = |p: &str| {
        p.parse::<T>()
            .map_err(|_| bad(field, format!("cannot parse {p:?}")))
    };
    Ok([parse(parts[0])?, parse(parts[1])?, parse(parts[2])?])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

/// Decodes an in-memory NRRD file. Never panics on malformed input.
pub fn parse_nrrd(bytes: &[u8]) -> Result<NrrdVolume, FormatError> {
    if !bytes.starts_with(MAGIC) {
        return Err(bad("magic", "missing NRRD000x magic"));
    }
    // Header ends at the first empty line.
    let mut pos = 0usize;
    let mut lines = Vec::new();
    let data_start = loop {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(bad("header", "no blank line before data"));
        };
        let raw = &bytes[pos..pos + nl];
        let line = raw.strip_suffix(b"\r").unwrap_or(raw);
        pos += nl + 1;
        if line.is_empty() {
            break pos;
        }
        let text = std::str::from_utf8(line).map_err(|_| bad("header", "non-UTF-8 header line"))?;
        lines.push(text);
    };

    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let mut key_values = BTreeMap::new();
    for line in lines.iter().skip(1) {
        if line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once(":=") {
            key_values.insert(k.to_string(), v.to_string());
        } else if let Some((k, v)) = line.split_once(": ") {
            fields.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        } else {
            return Err(bad("header", format!("unrecognized line {line:?}")));
        }
    }

    let field = |name: &str| fields.get(name).map(String::as_str);
    let required = |name: &str| field(name).ok_or_else(|| bad(name, "required field missing"));

    let element = {
        let t = required("type")?;
        ElementType::parse(t).ok_or_else(|| bad("type", format!("unsupported element type {t:?}")))?
    };
    let dimension: usize = required("dimension")?
        .parse()
        .map_err(|_| bad("dimension", "not an integer"))?;
    if dimension != 3 {
        return Err(bad("dimension", format!("expected 3, got {dimension}")));
    }
    let encoding = required("encoding")?;
    if encoding != "raw" {
        return Err(bad("encoding", format!("unsupported encoding {encoding:?}")));
    }
    if field("data file").or(field("datafile")).is_some() {
        return Err(bad("data file", "detached data is not supported"));
    }
    for skip in ["line skip", "lineskip", "byte skip", "byteskip"] {
        if let Some(v) = field(skip) {
            if v != "0" {
                return Err(bad(skip, "non-zero skips are not supported"));
            }
        }
    }
    if let Some(sd) = field("space dimension") {
        if sd != "3" {
            return Err(bad("space dimension", format!("expected 3, got {sd:?}")));
        }
    }

    let dims: [usize; 3] = parse_triple("sizes", required("sizes")?)?;
    if dims.iter().any(|&d| d == 0) {
        return Err(bad("sizes", "sizes must be positive"));
    }

    let spacing = match (field("spacings"), field("space directions")) {
        (Some(_), Some(_)) => {
            return Err(bad("spacings", "both spacings and space directions given"))
        }
        (Some(s), None) => parse_triple::<f64>("spacings", s)?,
        (None, Some(s)) => {
            let dirs = parse_space_directions(s)?;
            for (a, row) in dirs.iter().enumerate() {
                for (b, &v) in row.iter().enumerate() {
                    if a != b && v != 0.0 {
                        return Err(bad("space directions", "non-diagonal directions"));
                    }
                }
            }
            [dirs[0][0], dirs[1][1], dirs[2][2]]
        }
        (None, None) => [1.0; 3],
    };
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(bad("spacings", format!("spacing must be positive, got {spacing:?}")));
    }
    let origin = match field("space origin") {
        Some(s) => parse_vector("space origin", s)?,
        None => [0.0; 3],
    };
    if origin.iter().any(|o| !o.is_finite()) {
        return Err(bad("space origin", "origin must be finite"));
    }

    let endian = match field("endian") {
        Some("little") => Endian::Little,
        Some("big") => Endian::Big,
        Some(other) => return Err(bad("endian", format!("unknown endianness {other:?}"))),
        None if element.size() == 1 => Endian::Little,
        None => return Err(bad("endian", "required for multi-byte types")),
    };

    let count = dims[0]
        .checked_mul(dims[1])
        .and_then(|n| n.checked_mul(dims[2]))
        .ok_or_else(|| bad("sizes", "voxel count overflows"))?;
    let nbytes = count
        .checked_mul(element.size())
        .ok_or_else(|| bad("sizes", "byte count overflows"))?;
    let payload = &bytes[data_start..];
    if payload.len() < nbytes {
        return Err(bad(
            "data",
            format!("expected {nbytes} bytes, found {}", payload.len()),
        ));
    }
    let payload = &payload[..nbytes];

    let data = match element {
        ElementType::U8 => VolumeData::U8(payload.to_vec()),
        ElementType::U16 => VolumeData::U16(decode(payload, endian, u16::from_le_bytes, u16::from_be_bytes)),
        ElementType::I16 => VolumeData::I16(decode(payload, endian, i16::from_le_bytes, i16::from_be_bytes)),
        ElementType::F32 => VolumeData::F32(decode(payload, endian, f32::from_le_bytes, f32::from_be_bytes)),
    };

    Ok(NrrdVolume {
        geometry: Geometry {
            dims,
            spacing,
            origin,
        },
        data,
        key_values,
    })
}

fn decode<T, const N: usize>(
    payload: &[u8],
    endian: Endian,
    le: fn([u8; N]) -> T,
    be: fn([u8; N]) -> T,
) -> Vec<T> {
    payload
        .chunks_exact(N)
        .map(|c| {
            let mut b = [0u8; N];
            b.copy_from_slice(c);
            match endian {
                Endian::Little => le(b),
                Endian::Big => be(b),
            }
        })
        .collect()
}

fn header(geometry: &Geometry, element: ElementType, extra: &[(&str, String)]) -> String {
    let g = geometry;
    let mut h = String::from("NRRD0004\n# Complete NRRD file format specification at:\n# http://teem.sourceforge.net/nrrd/format.html\n");
    let _ = writeln!(h, "type: {}", element.name());
    h.push_str("dimension: 3\nspace dimension: 3\n");
    let _ = writeln!(h, "sizes: {} {} {}", g.dims[0], g.dims[1], g.dims[2]);
    let _ = writeln!(
        h,
        "space directions: ({},0,0) (0,{},0) (0,0,{})",
        g.spacing[0], g.spacing[1], g.spacing[2]
    );
    let _ = writeln!(
        h,
        "space origin: ({},{},{})",
        g.origin[0], g.origin[1], g.origin[2]
    );
    if element.size() > 1 {
        h.push_str("endian: little\n");
    }
    h.push_str("encoding: raw\n");
    for (k, v) in extra {
        let _ = writeln!(h, "{k}:={v}");
    }
    h.push('\n');
    h
}

/// Serializes an intensity volume as little-endian `float` NRRD.
pub fn encode_scalar(vol: &ScalarVolume) -> Vec<u8> {
    let mut out = header(vol.geometry(), ElementType::F32, &[]).into_bytes();
    out.reserve(vol.data().len() * 4);
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Serializes a label volume as little-endian `uint16` NRRD, recording `num_labels`.
pub fn encode_labels(vol: &LabelVolume) -> Vec<u8> {
    let extra = [("num_labels", vol.num_labels().to_string())];
    let mut out = header(vol.geometry(), ElementType::U16, &extra).into_bytes();
    out.reserve(vol.data().len() * 2);
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), NrrdError> {
    std::fs::write(path, bytes).map_err(|source| NrrdError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<NrrdVolume, NrrdError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| NrrdError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_nrrd(&bytes).map_err(|e| NrrdError::format(path, e))
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume, NrrdError> {
    let path = path.as_ref();
    read_volume(path)?
        .into_scalar()
        .map_err(|e| NrrdError::format(path, bad("sizes", e.to_string())))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume, NrrdError> {
    let path = path.as_ref();
    read_volume(path)?
        .into_labels()
        .map_err(|e| NrrdError::format(path, e))
}

pub fn write_scalar(vol: &ScalarVolume, path: impl AsRef<Path>) -> Result<(), NrrdError> {
    write_bytes(path.as_ref(), &encode_scalar(vol))
}

pub fn write_labels(vol: &LabelVolume, path: impl AsRef<Path>) -> Result<(), NrrdError> {
    write_bytes(path.as_ref(), &encode_labels(vol))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry() -> Geometry {
        Geometry {
            dims: [3, 2, 4],
            spacing: [2.0, 2.0, 0.7],
            origin: [-10.5, 0.0, 3.25],
        }
    }

    #[test]
    fn single_voxel() {
        let v = ScalarVolume::new(Geometry::new([1, 1, 1]), vec![7.0]).unwrap();
        let back = parse_nrrd(&encode_scalar(&v)).unwrap().into_scalar().unwrap();
        assert_eq!(back.dims(), [1, 1, 1]);
        assert_eq!(back.data(), &[7.0]);
    }

    #[test]
    fn scalar_round_trip_is_bit_exact() {
        let g = geometry();
        let v = ScalarVolume::from_fn(g, |x, y, z| (x as f32 * 0.1 - y as f32) * 1e-3 + z as f32 * 1e7).unwrap();
        let back = parse_nrrd(&encode_scalar(&v)).unwrap().into_scalar().unwrap();
        assert_eq!(back.geometry(), v.geometry());
        let a: Vec<u32> = v.data().iter().map(|f| f.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|f| f.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_keep_num_labels() {
        let g = geometry();
        let l = LabelVolume::new(g, (0..24).map(|i| (i % 3) as u16).collect(), 9).unwrap();
        let back = parse_nrrd(&encode_labels(&l)).unwrap().into_labels().unwrap();
        assert_eq!(back, l);
    }

    fn hand_written(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut b = header.as_bytes().to_vec();
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn accepts_spacings_and_big_endian() {
        let bytes = hand_written(
            "NRRD0005\n# comment\ntype: short\ndimension: 3\nsizes: 2 1 1\nspacings: 1.5 2 3\nendian: big\nencoding: raw\n\n",
            &[0xff, 0xfe, 0x00, 0x05],
        );
        let v = parse_nrrd(&bytes).unwrap();
        assert_eq!(v.geometry.spacing, [1.5, 2.0, 3.0]);
        assert_eq!(v.data, VolumeData::I16(vec![-2, 5]));
        assert!(v.clone().into_labels().is_err());
        assert_eq!(v.into_scalar().unwrap().data(), &[-2.0, 5.0]);
    }

    #[test]
    fn uint8_needs_no_endian() {
        let bytes = hand_written(
            "NRRD0004\ntype: uchar\ndimension: 3\nsizes: 1 1 2\nencoding: raw\n\n",
            &[4, 200],
        );
        let l = parse_nrrd(&bytes).unwrap().into_labels().unwrap();
        assert_eq!(l.data(), &[4, 200]);
        assert_eq!(l.num_labels(), 200);
    }

    #[test]
    fn reports_offending_field() {
        let cases = [
            ("NRRD0004\ntype: float\ndimension: 2\nsizes: 1 1\nendian: little\nencoding: raw\n\n", "dimension"),
            ("NRRD0004\ntype: double\ndimension: 3\nsizes: 1 1 1\nendian: little\nencoding: raw\n\n", "type"),
            ("NRRD0004\ntype: float\ndimension: 3\nsizes: 1 1 1\nendian: little\nencoding: gzip\n\n", "encoding"),
            ("NRRD0004\ntype: float\ndimension: 3\nsizes: 1 1\nendian: little\nencoding: raw\n\n", "sizes"),
            ("NRRD0004\ntype: float\ndimension: 3\nsizes: 1 1 1\nencoding: raw\n\n", "endian"),
            ("NRRD0004\ntype: float\ndimension: 3\nsizes: 1 1 1\nendian: little\nencoding: raw\n\n", "data"),
            ("NRRD0004\ntype: float\ndimension: 3\nsizes: 1 1 1\nspace directions: (1,0.5,0) (0,1,0) (0,0,1)\nendian: little\nencoding: raw\n\n", "space directions"),
            ("P5\n", "magic"),
        ];
        for (text, field) in cases {
            let err = parse_nrrd(text.as_bytes()).unwrap_err();
            assert_eq!(err.field, field, "{text:?} -> {err}");
        }
    }

    #[test]
    fn file_errors_carry_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.nrrd");
        std::fs::write(&path, b"NRRD0004\ntype: float\n\n").unwrap();
        let msg = read_scalar(&path).unwrap_err().to_string();
        assert!(msg.contains("broken.nrrd") && msg.contains("dimension"), "{msg}");
        assert!(matches!(
            read_scalar(dir.path().join("missing.nrrd")),
            Err(NrrdError::Io { .. })
        ));
    }
}
