//! 3DGS-layout PLY files.
//!
//! Writing always produces `binary_little_endian` float32 with the properties
//! `x y z f_dc_0..2 f_rest_* opacity scale_0..2 rot_0..3`. Opacity is stored as
//! a logit and scales as logarithms. Reading accepts any property order, any
//! scalar type, ASCII payloads, and ignores unknown properties (normals, etc).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use super::{logit, sh_coeff_count, sigmoid, GaussianCloud, UNIT_QUAT_TOLERANCE};
use crate::math;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed PLY header: {0}")]
    Header(String),
    #[error("missing required property `{0}`")]
    MissingProperty(String),
    #[error("unsupported PLY format `{0}`")]
    Format(String),
    #[error("truncated or malformed PLY payload: {0}")]
    Payload(String),
    #[error("f_rest property count {0} does not correspond to an SH degree in 0..=3")]
    RestCount(usize),
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug, PartialEq)]
enum Encoding {
    Ascii,
    BinaryLe,
}

fn read_header<R: BufRead>(reader: &mut R) -> Result<(Encoding, Vec<Element>), PlyError> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(PlyError::Header("missing `ply` magic".into()));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(PlyError::Header("missing end_header".into()));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => encoding = Some(Encoding::Ascii),
            ["format", "binary_little_endian", _] => encoding = Some(Encoding::BinaryLe),
            ["format", other, ..] => return Err(PlyError::Format((*other).to_string())),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: (*name).to_string(),
                count: count.parse().map_err(|_| PlyError::Header(format!("bad element count `{count}`")))?,
                properties: Vec::new(),
            }),
            ["property", "list", count, item, name] => {
                let element = elements.last_mut().ok_or_else(|| PlyError::Header("property before element".into()))?;
                let parse = |t: &str| Scalar::parse(t).ok_or_else(|| PlyError::Header(format!("unknown type `{t}`")));
                element.properties.push(Property::List { name: (*name).to_string(), count: parse(count)?, item: parse(item)? });
            }
            ["property", ty, name] => {
                let element = elements.last_mut().ok_or_else(|| PlyError::Header("property before element".into()))?;
                let ty = Scalar::parse(ty).ok_or_else(|| PlyError::Header(format!("unknown type `{ty}`")))?;
                element.properties.push(Property::Scalar { name: (*name).to_string(), ty });
            }
            _ => return Err(PlyError::Header(format!("unrecognized line `{}`", line.trim_end()))),
        }
    }
    let encoding = encoding.ok_or_else(|| PlyError::Header("missing format line".into()))?;
    Ok((encoding, elements))
}

/// Reads all vertex rows as f64 values in declared property order.
fn read_vertex_rows<R: BufRead>(reader: &mut R, encoding: &Encoding, elements: &[Element]) -> Result<(Vec<String>, Vec<Vec<f64>>), PlyError> {
    let mut ascii_tokens: Option<std::vec::IntoIter<String>> = None;
    if *encoding == Encoding::Ascii {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        ascii_tokens = Some(text.split_whitespace().map(str::to_string).collect::<Vec<_>>().into_iter());
    }
    let mut next_ascii = |what: &str| -> Result<f64, PlyError> {
        let tok = ascii_tokens.as_mut().unwrap().next().ok_or_else(|| PlyError::Payload(format!("missing {what}")))?;
        tok.parse::<f64>().map_err(|_| PlyError::Payload(format!("bad number `{tok}`")))
    };
    for element in elements {
        let is_vertex = element.name == "vertex";
        let names: Vec<String> = element
            .properties
            .iter()
            .map(|p| match p {
                Property::Scalar { name, .. } | Property::List { name, .. } => name.clone(),
            })
            .collect();
        let mut rows = Vec::with_capacity(if is_vertex { element.count } else { 0 });
        for _ in 0..element.count {
            let mut row = Vec::with_capacity(element.properties.len());
            for p in &element.properties {
                match (p, encoding) {
                    (Property::Scalar { ty, .. }, Encoding::BinaryLe) => {
                        let mut buf = [0u8; 8];
                        reader.read_exact(&mut buf[..ty.size()]).map_err(|e| PlyError::Payload(e.to_string()))?;
                        row.push(ty.read_le(&buf));
                    }
                    (Property::Scalar { .. }, Encoding::Ascii) => row.push(next_ascii("scalar")?),
                    (Property::List { count, item, .. }, Encoding::BinaryLe) => {
                        let mut buf = [0u8; 8];
                        reader.read_exact(&mut buf[..count.size()]).map_err(|e| PlyError::Payload(e.to_string()))?;
                        let n = count.read_le(&buf) as usize;
                        let mut skip = vec![0u8; n * item.size()];
                        reader.read_exact(&mut skip).map_err(|e| PlyError::Payload(e.to_string()))?;
                        row.push(f64::NAN);
                    }
                    (Property::List { .. }, Encoding::Ascii) => {
                        let n = next_ascii("list count")? as usize;
                        for _ in 0..n {
                            next_ascii("list item")?;
                        }
                        row.push(f64::NAN);
                    }
                }
            }
            if is_vertex {
                rows.push(row);
            }
        }
        if is_vertex {
            return Ok((names, rows));
        }
    }
    Err(PlyError::MissingProperty("element vertex".into()))
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianCloud, PlyError> {
    let file = fs::File::open(path)?;
    read_ply(&mut BufReader::new(file))
}

pub fn read_ply<R: BufRead>(reader: &mut R) -> Result<GaussianCloud, PlyError> {
    let (encoding, elements) = read_header(reader)?;
    let (names, rows) = read_vertex_rows(reader, &encoding, &elements)?;
    let column = |name: &str| -> Result<usize, PlyError> {
        names.iter().position(|n| n == name).ok_or_else(|| PlyError::MissingProperty(name.to_string()))
    };
    let cols = |prefix: &str, n: usize| -> Result<Vec<usize>, PlyError> { (0..n).map(|i| column(&format!("{prefix}{i}"))).collect() };
    let xyz = [column("x")?, column("y")?, column("z")?];
    let dc = cols("f_dc_", 3)?;
    let opacity = column("opacity")?;
    let scale = cols("scale_", 3)?;
    let rot = cols("rot_", 4)?;
    let rest_count = names.iter().filter(|n| n.starts_with("f_rest_")).count();
    if rest_count % 3 != 0 {
        return Err(PlyError::RestCount(rest_count));
    }
    let per_channel = rest_count / 3;
    let degree = match per_channel {
        0 => 0,
        3 => 1,
        8 => 2,
        15 => 3,
        _ => return Err(PlyError::RestCount(rest_count)),
    };
    let rest = cols("f_rest_", rest_count)?;

    let mut cloud = GaussianCloud::empty(degree);
    let k = sh_coeff_count(degree);
    cloud.sh.reserve(rows.len() * k);
    for row in &rows {
        cloud.means.push(Vector3::new(row[xyz[0]], row[xyz[1]], row[xyz[2]]));
        let q = [row[rot[0]], row[rot[1]], row[rot[2]], row[rot[3]]];
        let q = if (math::quat_norm(&q) - 1.0).abs() > UNIT_QUAT_TOLERANCE { math::quat_normalize(&q) } else { q };
        cloud.rotations.push(q);
        cloud.scales.push(Vector3::new(row[scale[0]].exp(), row[scale[1]].exp(), row[scale[2]].exp()));
        cloud.opacities.push(sigmoid(row[opacity]));
        let start = cloud.sh.len();
        cloud.sh.resize(start + k, 0.0);
        for c in 0..3 {
            cloud.sh[start + c] = row[dc[c]];
            // f_rest is channel-major: f_rest_{c·(K−1) + j}
            for j in 0..per_channel {
                cloud.sh[start + (j + 1) * 3 + c] = row[rest[c * per_channel + j]];
            }
        }
    }
    Ok(cloud)
}

pub fn save_ply(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<(), PlyError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    write_ply(cloud, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_ply<W: Write>(cloud: &GaussianCloud, out: &mut W) -> Result<(), PlyError> {
    let per_channel = sh_coeff_count(cloud.sh_degree) / 3 - 1;
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for name in ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"] {
        header.push_str(&format!("property float {name}\n"));
    }
    for i in 0..3 * per_channel {
        header.push_str(&format!("property float f_rest_{i}\n"));
    }
    for name in ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"] {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())?;

    let mut row: Vec<f32> = Vec::with_capacity(17 + 3 * per_channel);
    for i in 0..cloud.len() {
        row.clear();
        let m = cloud.means[i];
        row.extend([m.x as f32, m.y as f32, m.z as f32]);
        let sh = cloud.sh_of(i);
        row.extend((0..3).map(|c| sh[c] as f32));
        for c in 0..3 {
            row.extend((0..per_channel).map(|j| sh[(j + 1) * 3 + c] as f32));
        }
        row.push(logit(cloud.opacities[i]) as f32);
        let s = cloud.scales[i];
        row.extend([s.x.ln() as f32, s.y.ln() as f32, s.z.ln() as f32]);
        row.extend(cloud.rotations[i].iter().map(|v| *v as f32));
        for v in &row {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}
