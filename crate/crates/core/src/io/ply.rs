//! Binary little-endian PLY in the common Gaussian splatting layout.

use std::path::Path;

use log::warn;
use nalgebra::{UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::splat::{Gaussian, GaussianCloud};

/// Zeroth-order spherical harmonic constant.
pub const SH_C0: f64 = 0.28209479177387814;

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
];

fn err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        format: "ply",
        offset,
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
}

impl Element {
    fn stride(&self) -> usize {
        self.props.iter().map(|p| p.1.size()).sum()
    }
}

/// Header elements and the byte offset where binary data starts.
fn parse_header(bytes: &[u8]) -> Result<(Vec<Element>, usize)> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let rel = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err(start, "header is not terminated by end_header"))?;
        *pos = start + rel + 1;
        let line = std::str::from_utf8(&bytes[start..start + rel])
            .map_err(|_| err(start, "header line is not valid UTF-8"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };

    let (off, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(err(off, "missing 'ply' magic"));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_seen = false;
    loop {
        let (off, line) = next_line(&mut pos)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _version] => {
                if *fmt != "binary_little_endian" {
                    return Err(err(
                        off,
                        format!("unsupported format '{fmt}', expected binary_little_endian"),
                    ));
                }
                format_seen = true;
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| err(off, format!("invalid element count '{count}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", ..] => return Err(err(off, "list properties are not supported")),
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| err(off, format!("unknown property type '{ty}'")))?;
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(off, "property declared before any element"))?;
                el.props.push((name.to_string(), ty));
            }
            _ => return Err(err(off, format!("unrecognised header line '{line}'"))),
        }
    }
    if !format_seen {
        return Err(err(0, "header has no format line"));
    }
    Ok((elements, pos))
}

/// Decode a Gaussian cloud from PLY bytes.
pub fn parse_gaussians(bytes: &[u8]) -> Result<GaussianCloud> {
    let (elements, data_start) = parse_header(bytes)?;
    let mut offset = data_start;
    let mut vertex = None;
    for el in &elements {
        if el.name == "vertex" {
            vertex = Some((el, offset));
            break;
        }
        offset = el
            .count
            .checked_mul(el.stride())
            .and_then(|n| n.checked_add(offset))
            .ok_or_else(|| err(offset, "element size overflows"))?;
    }
    let (el, start) = vertex.ok_or_else(|| err(data_start, "no vertex element"))?;

    let mut columns = [0usize; REQUIRED.len()];
    let mut types = [Scalar::F32; REQUIRED.len()];
    let mut field_offsets = Vec::with_capacity(el.props.len());
    let mut acc = 0;
    for (_, ty) in &el.props {
        field_offsets.push(acc);
        acc += ty.size();
    }
    for (k, name) in REQUIRED.iter().enumerate() {
        let i = el
            .props
            .iter()
            .position(|p| p.0 == *name)
            .ok_or_else(|| err(data_start, format!("missing vertex property '{name}'")))?;
        columns[k] = field_offsets[i];
        types[k] = el.props[i].1;
    }
    if el.props.iter().any(|p| p.0.starts_with("f_rest_")) {
        warn!("ignoring higher-order spherical harmonic coefficients");
    }
    let stride = el.stride();
    let end = el
        .count
        .checked_mul(stride)
        .and_then(|n| n.checked_add(start))
        .ok_or_else(|| err(start, "vertex data size overflows"))?;
    if end > bytes.len() {
        return Err(err(
            bytes.len(),
            format!("truncated vertex data: need {} bytes, file has {}", end, bytes.len()),
        ));
    }

    let mut gaussians = Vec::with_capacity(el.count);
    for i in 0..el.count {
        let row = start + i * stride;
        let mut v = [0.0; REQUIRED.len()];
        for k in 0..REQUIRED.len() {
            let at = row + columns[k];
            v[k] = types[k].read(&bytes[at..]);
            if !v[k].is_finite() {
                return Err(err(at, format!("non-finite {} in vertex {i}", REQUIRED[k])));
            }
        }
        let mean = Vector3::new(v[0], v[1], v[2]);
        let scale = Vector3::new(v[3].exp(), v[4].exp(), v[5].exp());
        let q = [v[6], v[7], v[8], v[9]];
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return Err(err(row + columns[6], format!("zero rotation quaternion in vertex {i}")));
        }
        let q = q.map(|c| c / norm);
        let raw = [v[10], v[11], v[12]].map(|f| 0.5 + SH_C0 * f);
        if raw.iter().any(|c| !(0.0..=1.0).contains(c)) {
            warn!("vertex {i}: colour outside [0, 1] clamped");
        }
        let color = raw.map(|c| c.clamp(0.0, 1.0));
        let opacity = 1.0 / (1.0 + (-v[13]).exp());
        let g = Gaussian::new(mean, scale, q, color, opacity).map_err(|e| err(row, format!("vertex {i}: {e}")))?;
        gaussians.push(g);
    }
    GaussianCloud::new(gaussians)
}

pub fn load_gaussians(path: &Path) -> Result<GaussianCloud> {
    parse_gaussians(&std::fs::read(path)?)
}

/// Encode a cloud as PLY bytes with float32 properties.
pub fn encode_gaussians(cloud: &GaussianCloud) -> Vec<u8> {
    let mut out = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len()).into_bytes();
    for name in REQUIRED {
        out.extend(format!("property float {name}\n").bytes());
    }
    out.extend(b"end_header\n");
    for g in &cloud.gaussians {
        let q: UnitQuaternion<f64> = g.rotation;
        let o = g.opacity.clamp(1e-12, 1.0 - 1e-12);
        let fields = [
            g.mean.x,
            g.mean.y,
            g.mean.z,
            g.scale.x.ln(),
            g.scale.y.ln(),
            g.scale.z.ln(),
            q.w,
            q.i,
            q.j,
            q.k,
            (g.color[0] - 0.5) / SH_C0,
            (g.color[1] - 0.5) / SH_C0,
            (g.color[2] - 0.5) / SH_C0,
            (o / (1.0 - o)).ln(),
        ];
        for f in fields {
            out.extend((f as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_gaussians(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    std::fs::write(path, encode_gaussians(cloud))?;
    Ok(())
}
