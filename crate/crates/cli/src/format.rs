//! Versioned little-endian containers for grid maps (`SMGM`) and network
//! weights (`SMTW`), each closed by a CRC32 of its payload.
//!
//! Map values are held as `f64` in memory and stored as `f32` (labels as
//! `u32`), channel-major then latitude-major. Deformations are stored as
//! displacements in radians, channel 0 = θ and channel 1 = φ.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use spherewarp_core::{DeformationField, FeatureMap, LabelMap, SphereGrid, VelocityField};
use spherewarp_registration::SphericalUNet;

pub const MAP_MAGIC: &[u8; 4] = b"SMGM";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"SMTW";
pub const FORMAT_VERSION: u16 = 1;
/// Magic, version, kind, channels, rows, cols.
pub const MAP_HEADER_LEN: usize = 4 + 2 + 1 + 2 + 4 + 4;
const CRC_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}, expected {FORMAT_VERSION}")]
    UnsupportedVersion(u16),
    #[error("unknown map kind {0}")]
    UnknownKind(u8),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("expected a {expected} map, found {found}")]
    KindMismatch { expected: MapKind, found: MapKind },
    #[error("value out of range: {0}")]
    Range(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, FormatError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MapKind {
    Feature = 0,
    Label = 1,
    Velocity = 2,
    Deformation = 3,
    Variance = 4,
}

impl MapKind {
    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => MapKind::Feature,
            1 => MapKind::Label,
            2 => MapKind::Velocity,
            3 => MapKind::Deformation,
            4 => MapKind::Variance,
            other => return Err(FormatError::UnknownKind(other)),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            MapKind::Feature => "feature",
            MapKind::Label => "label",
            MapKind::Velocity => "velocity",
            MapKind::Deformation => "deformation",
            MapKind::Variance => "variance",
        }
    }

    fn check_channels(self, channels: usize) -> Result<()> {
        let ok = match self {
            MapKind::Velocity | MapKind::Deformation => channels == 2,
            MapKind::Label => channels == 1,
            MapKind::Feature | MapKind::Variance => channels >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(FormatError::Shape(format!("{} map cannot have {channels} channels", self.name())))
        }
    }
}

impl std::fmt::Display for MapKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MapKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "feature" => Ok(MapKind::Feature),
            "label" => Ok(MapKind::Label),
            "velocity" => Ok(MapKind::Velocity),
            "deformation" => Ok(MapKind::Deformation),
            "variance" => Ok(MapKind::Variance),
            other => Err(format!("unknown map kind '{other}'")),
        }
    }
}

/// A decoded `SMGM` file.
#[derive(Debug, Clone, PartialEq)]
pub enum GridMap {
    Feature(FeatureMap),
    Label(LabelMap),
    Velocity(VelocityField),
    Deformation(DeformationField),
    Variance(FeatureMap),
}

impl GridMap {
    pub fn kind(&self) -> MapKind {
        match self {
            GridMap::Feature(_) => MapKind::Feature,
            GridMap::Label(_) => MapKind::Label,
            GridMap::Velocity(_) => MapKind::Velocity,
            GridMap::Deformation(_) => MapKind::Deformation,
            GridMap::Variance(_) => MapKind::Variance,
        }
    }

    pub fn grid(&self) -> &SphereGrid {
        match self {
            GridMap::Feature(m) | GridMap::Variance(m) => m.grid(),
            GridMap::Label(m) => m.grid(),
            GridMap::Velocity(v) => v.grid(),
            GridMap::Deformation(d) => d.grid(),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            GridMap::Feature(m) | GridMap::Variance(m) => m.channels(),
            GridMap::Label(_) => 1,
            GridMap::Velocity(_) | GridMap::Deformation(_) => 2,
        }
    }

    pub fn into_feature(self) -> Result<FeatureMap> {
        match self {
            GridMap::Feature(m) => Ok(m),
            other => Err(FormatError::KindMismatch { expected: MapKind::Feature, found: other.kind() }),
        }
    }

    pub fn into_variance(self) -> Result<FeatureMap> {
        match self {
            GridMap::Variance(m) => Ok(m),
            other => Err(FormatError::KindMismatch { expected: MapKind::Variance, found: other.kind() }),
        }
    }

    pub fn into_labels(self) -> Result<LabelMap> {
        match self {
            GridMap::Label(m) => Ok(m),
            other => Err(FormatError::KindMismatch { expected: MapKind::Label, found: other.kind() }),
        }
    }

    pub fn into_velocity(self) -> Result<VelocityField> {
        match self {
            GridMap::Velocity(v) => Ok(v),
            other => Err(FormatError::KindMismatch { expected: MapKind::Velocity, found: other.kind() }),
        }
    }

    pub fn into_deformation(self) -> Result<DeformationField> {
        match self {
            GridMap::Deformation(d) => Ok(d),
            other => Err(FormatError::KindMismatch { expected: MapKind::Deformation, found: other.kind() }),
        }
    }
}

fn put_f32(out: &mut Vec<u8>, values: &[f64], what: &str) -> Result<()> {
    for &v in values {
        let f = v as f32;
        if !f.is_finite() {
            return Err(FormatError::Range(format!("{what} value {v} does not fit a finite f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

/// Serializes a map into `SMGM` bytes.
pub fn encode_map(map: &GridMap) -> Result<Vec<u8>> {
    let g = map.grid();
    let channels = map.channels();
    let mut out = Vec::with_capacity(MAP_HEADER_LEN + channels * g.len() * 4 + CRC_LEN);
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(map.kind() as u8);
    let ch = u16::try_from(channels).map_err(|_| FormatError::Shape(format!("{channels} channels exceed u16")))?;
    out.extend_from_slice(&ch.to_le_bytes());
    out.extend_from_slice(&(g.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(g.cols() as u32).to_le_bytes());
    let name = map.kind().name();
    match map {
        GridMap::Feature(m) | GridMap::Variance(m) => put_f32(&mut out, m.data(), name)?,
        GridMap::Label(m) => m.labels().iter().for_each(|l| out.extend_from_slice(&l.to_le_bytes())),
        GridMap::Velocity(v) => {
            put_f32(&mut out, &v.theta, name)?;
            put_f32(&mut out, &v.phi, name)?;
        }
        GridMap::Deformation(d) => {
            put_f32(&mut out, &d.theta, name)?;
            put_f32(&mut out, &d.phi, name)?;
        }
    }
    let crc = crc32fast::hash(&out[MAP_HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated(format!("file ends inside the {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("eight bytes")))
    }
}

fn check_magic(r: &mut Reader, expected: &[u8; 4]) -> Result<()> {
    let found = r.take(4, "magic")?;
    if found != expected {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    Ok(())
}

fn check_payload(bytes: &[u8], start: usize, expected: usize, value_size: usize) -> Result<&[u8]> {
    let available = bytes.len() - start;
    if available != expected + CRC_LEN {
        let detail = format!("header implies {expected} payload bytes plus a CRC, file holds {available}");
        let whole_values = available >= CRC_LEN && (available - CRC_LEN) % value_size == 0;
        return Err(if available < expected + CRC_LEN && !whole_values {
            FormatError::Truncated(detail)
        } else {
            FormatError::Shape(detail)
        });
    }
    let payload = &bytes[start..start + expected];
    let stored = u32::from_le_bytes(bytes[start + expected..].try_into().expect("four CRC bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(FormatError::Crc { stored, computed });
    }
    Ok(payload)
}

fn make_grid(rows: u32, cols: u32) -> Result<Arc<SphereGrid>> {
    SphereGrid::new(rows as usize, cols as usize)
        .map(Arc::new)
        .map_err(|e| FormatError::Grid(e.to_string()))
}

fn f32_values(payload: &[u8], what: &str) -> Result<Vec<f64>> {
    payload
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes(c.try_into().expect("four bytes"));
            if v.is_finite() {
                Ok(v as f64)
            } else {
                Err(FormatError::Range(format!("non-finite value in {what} payload")))
            }
        })
        .collect()
}

/// Parses `SMGM` bytes.
pub fn decode_map(bytes: &[u8]) -> Result<GridMap> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(&mut r, MAP_MAGIC)?;
    let kind = MapKind::from_code(r.u8("kind")?)?;
    let channels = r.u16("channel count")? as usize;
    let rows = r.u32("row count")?;
    let cols = r.u32("column count")?;
    kind.check_channels(channels)?;
    let grid = make_grid(rows, cols)?;
    let payload = check_payload(bytes, r.pos, channels * grid.len() * 4, 4)?;
    let shape = |e: spherewarp_core::CoreError| FormatError::Shape(e.to_string());
    Ok(match kind {
        MapKind::Label => {
            let labels = payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
            GridMap::Label(LabelMap::new(grid, labels).map_err(shape)?)
        }
        MapKind::Feature | MapKind::Variance => {
            let map = FeatureMap::new(grid, channels, f32_values(payload, kind.name())?).map_err(shape)?;
            if kind == MapKind::Feature {
                GridMap::Feature(map)
            } else {
                if map.data().iter().any(|v| *v < 0.0) {
                    return Err(FormatError::Range("negative variance".into()));
                }
                GridMap::Variance(map)
            }
        }
        MapKind::Velocity | MapKind::Deformation => {
            let mut values = f32_values(payload, kind.name())?;
            let phi = values.split_off(grid.len());
            if kind == MapKind::Velocity {
                GridMap::Velocity(VelocityField::new(grid, values, phi).map_err(shape)?)
            } else {
                GridMap::Deformation(DeformationField::new(grid, values, phi).map_err(shape)?)
            }
        }
    })
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| FormatError::Io { path: path.display().to_string(), source };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| io(std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(io(e));
    }
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| FormatError::Io { path: path.display().to_string(), source })
}

pub fn write_map(map: &GridMap, path: &Path) -> Result<()> {
    write_atomic(path, &encode_map(map)?)
}

pub fn read_map(path: &Path) -> Result<GridMap> {
    decode_map(&read_bytes(path)?)
}

/// Network architecture and parameters as stored in an `SMTW` file.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsFile {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    pub params: Vec<f64>,
}

impl WeightsFile {
    pub fn from_model(model: &SphericalUNet) -> Self {
        Self {
            in_channels: model.in_channels(),
            widths: model.widths().to_vec(),
            rows: model.grid().rows(),
            cols: model.grid().cols(),
            params: model.params(),
        }
    }

    pub fn to_model(&self) -> std::result::Result<SphericalUNet, spherewarp_registration::RegError> {
        let grid = Arc::new(SphereGrid::new(self.rows, self.cols)?);
        SphericalUNet::from_params(grid, self.in_channels, &self.widths, &self.params)
    }
}

pub fn encode_weights(w: &WeightsFile) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let ic = u16::try_from(w.in_channels).map_err(|_| FormatError::Shape("too many input channels".into()))?;
    out.extend_from_slice(&ic.to_le_bytes());
    let depth = u8::try_from(w.widths.len()).map_err(|_| FormatError::Shape("too many levels".into()))?;
    out.push(depth);
    for &width in &w.widths {
        out.extend_from_slice(&(width as u32).to_le_bytes());
    }
    out.extend_from_slice(&(w.rows as u32).to_le_bytes());
    out.extend_from_slice(&(w.cols as u32).to_le_bytes());
    out.extend_from_slice(&(w.params.len() as u64).to_le_bytes());
    let start = out.len();
    for p in &w.params {
        if !p.is_finite() {
            return Err(FormatError::Range("non-finite network parameter".into()));
        }
        out.extend_from_slice(&p.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightsFile> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(&mut r, WEIGHTS_MAGIC)?;
    let in_channels = r.u16("input channel count")? as usize;
    let depth = r.u8("depth")? as usize;
    let widths = (0..depth).map(|_| r.u32("widths").map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let count = usize::try_from(r.u64("parameter count")?)
        .map_err(|_| FormatError::Shape("parameter count exceeds memory".into()))?;
    let expected = count.checked_mul(8).ok_or_else(|| FormatError::Shape("parameter count overflows".into()))?;
    let payload = check_payload(bytes, r.pos, expected, 8)?;
    let params = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
    Ok(WeightsFile { in_channels, widths, rows, cols, params })
}

pub fn write_weights(w: &WeightsFile, path: &Path) -> Result<()> {
    write_atomic(path, &encode_weights(w)?)
}

pub fn read_weights(path: &Path) -> Result<WeightsFile> {
    decode_weights(&read_bytes(path)?)
}

/// Reads a whitespace-separated text matrix with one grid row per line.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_text_matrix(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut rows = 0;
    let mut cols = None;
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let before = values.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| FormatError::Shape(format!("line {}: '{tok}' is not a number", lineno + 1)))?;
            values.push(v);
        }
        let width = values.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(FormatError::Shape(format!("line {} has {width} values, expected {c}", lineno + 1)))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| FormatError::Shape("matrix is empty".into()))?;
    Ok((rows, cols, values))
}

/// Builds a map of `kind` from a parsed text matrix.
pub fn map_from_matrix(kind: MapKind, rows: usize, cols: usize, values: Vec<f64>) -> Result<GridMap> {
    let grid = SphereGrid::new(rows, cols).map(Arc::new).map_err(|e| FormatError::Grid(e.to_string()))?;
    let shape = |e: spherewarp_core::CoreError| FormatError::Shape(e.to_string());
    match kind {
        MapKind::Feature => Ok(GridMap::Feature(FeatureMap::new(grid, 1, values).map_err(shape)?)),
        MapKind::Variance => {
            if values.iter().any(|v| *v < 0.0) {
                return Err(FormatError::Range("negative variance".into()));
            }
            Ok(GridMap::Variance(FeatureMap::new(grid, 1, values).map_err(shape)?))
        }
        MapKind::Label => {
            let labels = values
                .iter()
                .map(|v| {
                    if *v >= 0.0 && v.fract() == 0.0 && *v <= u32::MAX as f64 {
                        Ok(*v as u32)
                    } else {
                        Err(FormatError::Range(format!("label {v} is not a non-negative integer")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GridMap::Label(LabelMap::new(grid, labels).map_err(shape)?))
        }
        other => Err(FormatError::Shape(format!("a single text matrix cannot hold a {other} map"))),
    }
}
