//! MetaImage (`.mhd` header + raw payload) reading and writing.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::imaging::{CtVolume, Geometry};

/// Voxel storage types understood by the reader.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    Char,
    UChar,
    Short,
    UShort,
    Int,
    UInt,
    Float,
    Double,
}

impl ElementType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "MET_CHAR" => Self::Char,
            "MET_UCHAR" => Self::UChar,
            "MET_SHORT" => Self::Short,
            "MET_USHORT" => Self::UShort,
            "MET_INT" => Self::Int,
            "MET_UINT" => Self::UInt,
            "MET_FLOAT" => Self::Float,
            "MET_DOUBLE" => Self::Double,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Self::Char => "MET_CHAR",
            Self::UChar => "MET_UCHAR",
            Self::Short => "MET_SHORT",
            Self::UShort => "MET_USHORT",
            Self::Int => "MET_INT",
            Self::UInt => "MET_UINT",
            Self::Float => "MET_FLOAT",
            Self::Double => "MET_DOUBLE",
        }
    }

    pub fn width(self) -> usize {
        match self {
            Self::Char | Self::UChar => 1,
            Self::Short | Self::UShort => 2,
            Self::Int | Self::UInt | Self::Float => 4,
            Self::Double => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::Char => f64::from(b[0] as i8),
            Self::UChar => f64::from(b[0]),
            Self::Short => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Self::UShort => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Self::Int => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Self::UInt => f64::from(u32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Self::Float => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Self::Double => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

/// A decoded MetaImage: values in `(z, y, x)` order plus geometry.
#[derive(Clone, Debug)]
pub struct MetaImage {
    pub values: Array3<f32>,
    pub geometry: Geometry,
    pub element_type: ElementType,
}

fn header_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Header { path: path.to_path_buf(), message: message.into() }
}

fn parse_floats(path: &Path, key: &str, value: &str, n: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = value
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| header_error(path, format!("{key}: `{t}` is not a number"))))
        .collect::<Result<_>>()?;
    if v.len() != n {
        return Err(header_error(path, format!("{key} lists {} values, expected {n}", v.len())));
    }
    Ok(v)
}

fn first_of<'a>(keys: &'a HashMap<String, String>, names: &[&str]) -> Option<(&'a str, &'a String)> {
    names.iter().find_map(|n| keys.get_key_value(*n).map(|(k, v)| (k.as_str(), v)))
}

/// Read a MetaImage header and its payload.
pub fn read_metaimage(path: &Path) -> Result<MetaImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut keys = HashMap::new();
    let mut offset = 0usize;
    let mut inline_payload = None;
    while offset < bytes.len() {
        let end = bytes[offset..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |p| offset + p + 1);
        let line = std::str::from_utf8(&bytes[offset..end]).map_err(|_| header_error(path, "header is not text"))?;
        offset = end;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| header_error(path, format!("malformed line `{line}`")))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        let is_data = k == "ElementDataFile";
        if keys.insert(k.clone(), v.clone()).is_some() {
            return Err(header_error(path, format!("duplicate key {k}")));
        }
        if is_data {
            if v == "LOCAL" {
                inline_payload = Some(bytes[offset..].to_vec());
            }
            break;
        }
    }

    let ndims: usize = keys
        .get("NDims")
        .ok_or_else(|| header_error(path, "missing NDims"))?
        .parse()
        .map_err(|_| header_error(path, "NDims is not an integer"))?;
    if ndims != 3 {
        return Err(header_error(path, format!("NDims = {ndims}, only 3-D images are supported")));
    }
    let dims = parse_floats(path, "DimSize", keys.get("DimSize").ok_or_else(|| header_error(path, "missing DimSize"))?, 3)?;
    if dims.iter().any(|&d| d < 1.0 || d.fract() != 0.0) {
        return Err(header_error(path, "DimSize entries must be positive integers"));
    }
    let etype_name = keys.get("ElementType").ok_or_else(|| header_error(path, "missing ElementType"))?;
    let etype = ElementType::parse(etype_name).ok_or_else(|| Error::UnsupportedElementType(etype_name.clone()))?;
    let (_, spacing) = first_of(&keys, &["ElementSpacing", "ElementSize"]).ok_or_else(|| header_error(path, "missing ElementSpacing"))?;
    let spacing = parse_floats(path, "ElementSpacing", spacing, 3)?;
    let (okey, origin) = first_of(&keys, &["Offset", "Origin", "Position"]).ok_or_else(|| header_error(path, "missing Offset"))?;
    let origin = parse_floats(path, okey, origin, 3)?;
    if let (Some((_, a)), Some((_, b))) = (first_of(&keys, &["Offset"]), first_of(&keys, &["Origin"])) {
        if a != b {
            return Err(header_error(path, "Offset and Origin disagree"));
        }
    }
    for k in ["BinaryDataByteOrderMSB", "ElementByteOrderMSB"] {
        if keys.get(k).is_some_and(|v| v.eq_ignore_ascii_case("true")) {
            return Err(header_error(path, "big-endian payloads are not supported"));
        }
    }
    if keys.get("CompressedData").is_some_and(|v| v.eq_ignore_ascii_case("true")) {
        return Err(header_error(path, "compressed payloads are not supported"));
    }

    let payload = match inline_payload {
        Some(p) => p,
        None => {
            let file = keys.get("ElementDataFile").ok_or_else(|| header_error(path, "missing ElementDataFile"))?;
            let raw_path = path.parent().unwrap_or(Path::new(".")).join(file);
            fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?
        }
    };
    // header lists x y z; arrays are z y x
    let shape = [dims[2] as usize, dims[1] as usize, dims[0] as usize];
    let count: usize = shape.iter().product();
    let expected = count * etype.width();
    if payload.len() != expected {
        return Err(Error::PayloadLength { expected, actual: payload.len() });
    }
    let values: Vec<f32> = payload.chunks_exact(etype.width()).map(|b| etype.decode(b) as f32).collect();
    let geometry = Geometry::new([spacing[2], spacing[1], spacing[0]], [origin[2], origin[1], origin[0]])
        .map_err(|e| header_error(path, e.to_string()))?;
    Ok(MetaImage { values: Array3::from_shape_vec(shape, values).expect("length checked"), geometry, element_type: etype })
}

/// Load a CT volume in Hounsfield units.
pub fn load_metaimage(path: &Path) -> Result<CtVolume> {
    let m = read_metaimage(path)?;
    CtVolume::new(m.values, m.geometry)
}

/// Load an integer label grid, such as a lung segmentation.
pub fn load_label_image(path: &Path) -> Result<(Array3<i32>, Geometry)> {
    let m = read_metaimage(path)?;
    if matches!(m.element_type, ElementType::Float | ElementType::Double) {
        return Err(Error::UnsupportedElementType(format!("{} for a label image", m.element_type.name())));
    }
    Ok((m.values.mapv(|v| v as i32), m.geometry))
}

/// Voxel payloads the writer can emit.
pub enum VoxelData<'a> {
    UChar(&'a Array3<u8>),
    Short(&'a Array3<i16>),
    Float(&'a Array3<f32>),
}

impl VoxelData<'_> {
    fn shape(&self) -> &[usize] {
        match self {
            Self::UChar(a) => a.shape(),
            Self::Short(a) => a.shape(),
            Self::Float(a) => a.shape(),
        }
    }
}

fn raw_path_for(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Write `<path>` (header) and a sibling `.raw` payload.
pub fn write_metaimage(path: &Path, data: VoxelData<'_>, geometry: &Geometry) -> Result<()> {
    let s = data.shape();
    let (etype, payload): (ElementType, Vec<u8>) = match &data {
        VoxelData::UChar(a) => (ElementType::UChar, a.iter().copied().collect()),
        VoxelData::Short(a) => (ElementType::Short, a.iter().flat_map(|v| v.to_le_bytes()).collect()),
        VoxelData::Float(a) => (ElementType::Float, a.iter().flat_map(|v| v.to_le_bytes()).collect()),
    };
    let raw = raw_path_for(path);
    let raw_name = raw.file_name().and_then(|n| n.to_str()).ok_or_else(|| Error::InvalidArgument(format!("bad output path {}", path.display())))?;
    let [sz, sy, sx] = geometry.spacing;
    let [oz, oy, ox] = geometry.origin;
    let header = format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\nCompressedData = False\n\
         Offset = {ox} {oy} {oz}\nElementSpacing = {sx} {sy} {sz}\nDimSize = {} {} {}\nElementType = {}\nElementDataFile = {raw_name}\n",
        s[2],
        s[1],
        s[0],
        etype.name()
    );
    fs::write(path, header).map_err(|e| Error::io(path, e))?;
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))
}
