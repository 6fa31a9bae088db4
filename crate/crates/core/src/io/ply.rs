use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scene::{Splat, SplatSet};

/// Zeroth-order spherical-harmonic constant used for `f_dc_*` colors.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
    "rot_2", "rot_3",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlyPrecision {
    #[default]
    Float,
    Double,
}

fn splat_row(s: &Splat) -> [f64; 14] {
    let dc = s.color.map(|c| (c - 0.5) / SH_C0);
    let [x, y, z] = s.position;
    let [s0, s1, s2] = s.log_scale;
    let [r0, r1, r2, r3] = s.rotation;
    [x, y, z, dc[0], dc[1], dc[2], s.opacity_logit, s0, s1, s2, r0, r1, r2, r3]
}

/// Binary little-endian PLY with the usual splat property names.
pub fn encode_ply(splats: &[Splat], precision: PlyPrecision) -> crate::Result<Vec<u8>> {
    if splats.is_empty() {
        return Err(crate::Error::Data("refusing to write a PLY with no splats".into()));
    }
    let ty = match precision {
        PlyPrecision::Float => "float",
        PlyPrecision::Double => "double",
    };
    let mut out = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", splats.len()).into_bytes();
    for p in PROPERTIES {
        out.extend(format!("property {ty} {p}\n").bytes());
    }
    out.extend(b"end_header\n");
    for s in splats {
        for v in splat_row(s) {
            match precision {
                PlyPrecision::Float => out.extend((v as f32).to_le_bytes()),
                PlyPrecision::Double => out.extend(v.to_le_bytes()),
            }
        }
    }
    Ok(out)
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Parses a binary little-endian splat PLY. Properties are matched by name;
/// unknown ones are skipped.
pub fn decode_ply(bytes: &[u8]) -> crate::Result<SplatSet> {
    let bad = |m: String| crate::Error::Data(format!("ply: {m}"));
    let end = b"end_header\n";
    let header_len = bytes
        .windows(end.len())
        .position(|w| w == end)
        .map(|p| p + end.len())
        .ok_or_else(|| bad("missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..header_len]).map_err(|_| bad("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing magic".into()));
    }
    let mut count = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, _] => return Err(bad(format!("unsupported format {other}"))),
            ["element", name, n] => {
                // Elements after the vertex block are never read.
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad vertex count {n}")))?);
                } else if count.is_none() {
                    return Err(bad(format!("element {name} before vertex is not supported")));
                }
            }
            ["property", "list", ..] if in_vertex => return Err(bad("list properties are not supported".into())),
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown type {ty}")))?;
                props.push((name.to_string(), s));
            }
            _ => {}
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element".into()))?;
    let column = |name: &str| props.iter().position(|(n, _)| n == name);
    let cols: Vec<usize> = PROPERTIES
        .iter()
        .map(|p| column(p).ok_or_else(|| bad(format!("missing property {p}"))))
        .collect::<crate::Result<_>>()?;
    let offsets: Vec<usize> = props
        .iter()
        .scan(0, |acc, (_, s)| {
            let o = *acc;
            *acc += s.size();
            Some(o)
        })
        .collect();
    let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
    let body = &bytes[header_len..];
    if body.len() < count * stride {
        return Err(bad(format!("truncated body: {} bytes for {count} vertices", body.len())));
    }
    let mut splats = Vec::with_capacity(count);
    for i in 0..count {
        let row = &body[i * stride..(i + 1) * stride];
        let v: Vec<f64> = cols.iter().map(|&c| props[c].1.read(&row[offsets[c]..])).collect();
        splats.push(Splat {
            position: [v[0], v[1], v[2]],
            color: [v[3], v[4], v[5]].map(|d| 0.5 + SH_C0 * d),
            opacity_logit: v[6],
            log_scale: [v[7], v[8], v[9]],
            rotation: [v[10], v[11], v[12], v[13]],
        });
    }
    Ok(SplatSet::new(splats)?)
}

pub fn write_ply(path: impl AsRef<Path>, splats: &[Splat], precision: PlyPrecision) -> crate::Result<()> {
    let bytes = encode_ply(splats, precision)?;
    super::write_file(path.as_ref(), &bytes)
}

pub fn read_ply(path: impl AsRef<Path>) -> crate::Result<SplatSet> {
    decode_ply(&super::read_file(path.as_ref())?)
}
