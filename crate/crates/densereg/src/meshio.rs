//! Triangle mesh import/export: ASCII OBJ and binary little-endian PLY,
//! positions and faces only.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::Vec3;

#[derive(Debug, Error)]
pub enum MeshIoError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("face references vertex {index} but only {n_vertices} vertices exist")]
    InvalidIndex { index: i64, n_vertices: usize },
    #[error("unexpected end of file")]
    Truncated,
}

pub type Result<T> = std::result::Result<T, MeshIoError>;

fn parse_err(line: usize, reason: impl Into<String>) -> MeshIoError {
    MeshIoError::Parse { line, reason: reason.into() }
}

// ---------------------------------------------------------------------------
// OBJ

/// Parses an ASCII OBJ. Only `v` and `f` records are used; texture/normal
/// indices after `/` are ignored and polygons are fan-triangulated.
pub fn parse_obj(text: &str) -> Result<(Vec<Vec3>, Vec<[u32; 3]>)> {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let mut tokens = raw.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut coord = [0.0f64; 3];
                for c in &mut coord {
                    let tok = tokens.next().ok_or_else(|| parse_err(line, "vertex needs 3 coordinates"))?;
                    *c = tok
                        .parse()
                        .map_err(|_| parse_err(line, format!("bad coordinate {tok:?}")))?;
                }
                if !coord.iter().all(|c| c.is_finite()) {
                    return Err(parse_err(line, "non-finite vertex coordinate"));
                }
                vertices.push(Vec3::new(coord[0], coord[1], coord[2]));
            }
            Some("f") => {
                let mut idx: Vec<u32> = Vec::with_capacity(4);
                for tok in tokens {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first
                        .parse()
                        .map_err(|_| parse_err(line, format!("bad face index {tok:?}")))?;
                    if i < 1 || i as usize > vertices.len() {
                        return Err(MeshIoError::InvalidIndex { index: i, n_vertices: vertices.len() });
                    }
                    idx.push((i - 1) as u32);
                }
                if idx.len() < 3 {
                    return Err(parse_err(line, "face needs at least 3 indices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {} // comments, groups, normals, etc.
        }
    }
    Ok((vertices, faces))
}

/// Writes an ASCII OBJ. Coordinates use Rust's shortest round-trip float
/// formatting, so read-back is exact.
pub fn format_obj(vertices: &[Vec3], faces: &[[u32; 3]]) -> String {
    let mut out = String::with_capacity(vertices.len() * 32 + faces.len() * 16);
    for v in vertices {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for f in faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    out
}

pub fn load_obj(path: &Path) -> Result<(Vec<Vec3>, Vec<[u32; 3]>)> {
    parse_obj(&fs::read_to_string(path)?)
}

pub fn save_obj(path: &Path, vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<()> {
    Ok(fs::write(path, format_obj(vertices, faces))?)
}

// ---------------------------------------------------------------------------
// PLY (binary little-endian)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn parse(name: &str) -> Option<PlyScalar> {
        Some(match name {
            "char" | "int8" => PlyScalar::I8,
            "uchar" | "uint8" => PlyScalar::U8,
            "short" | "int16" => PlyScalar::I16,
            "ushort" | "uint16" => PlyScalar::U16,
            "int" | "int32" => PlyScalar::I32,
            "uint" | "uint32" => PlyScalar::U32,
            "float" | "float32" => PlyScalar::F32,
            "double" | "float64" => PlyScalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyScalar::I8 | PlyScalar::U8 => 1,
            PlyScalar::I16 | PlyScalar::U16 => 2,
            PlyScalar::I32 | PlyScalar::U32 | PlyScalar::F32 => 4,
            PlyScalar::F64 => 8,
        }
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(MeshIoError::Truncated)?;
        if end > self.data.len() {
            return Err(MeshIoError::Truncated);
        }
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn read_f64(&mut self, ty: PlyScalar) -> Result<f64> {
        let b = self.take(ty.size())?;
        Ok(match ty {
            PlyScalar::I8 => b[0] as i8 as f64,
            PlyScalar::U8 => b[0] as f64,
            PlyScalar::I16 => i16::from_le_bytes(b.try_into().unwrap()) as f64,
            PlyScalar::U16 => u16::from_le_bytes(b.try_into().unwrap()) as f64,
            PlyScalar::I32 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
            PlyScalar::U32 => u32::from_le_bytes(b.try_into().unwrap()) as f64,
            PlyScalar::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            PlyScalar::F64 => f64::from_le_bytes(b.try_into().unwrap()),
        })
    }

    fn read_index(&mut self, ty: PlyScalar) -> Result<i64> {
        let b = self.take(ty.size())?;
        Ok(match ty {
            PlyScalar::I8 => b[0] as i8 as i64,
            PlyScalar::U8 => b[0] as i64,
            PlyScalar::I16 => i16::from_le_bytes(b.try_into().unwrap()) as i64,
            PlyScalar::U16 => u16::from_le_bytes(b.try_into().unwrap()) as i64,
            PlyScalar::I32 => i32::from_le_bytes(b.try_into().unwrap()) as i64,
            PlyScalar::U32 => u32::from_le_bytes(b.try_into().unwrap()) as i64,
            _ => return Err(MeshIoError::Unsupported("float face index".into())),
        })
    }
}

struct VertexLayout {
    /// (scalar type, x/y/z coordinate slot if this property is one of them)
    props: Vec<(PlyScalar, Option<usize>)>,
}

struct FaceLayout {
    count_ty: PlyScalar,
    index_ty: PlyScalar,
}

/// Parses a binary little-endian PLY holding vertex positions and an index
/// list per face. Extra scalar vertex properties are skipped; polygons are
/// fan-triangulated.
pub fn parse_ply(data: &[u8]) -> Result<(Vec<Vec3>, Vec<[u32; 3]>)> {
    // Header is ASCII lines terminated by "end_header".
    let mut offset = 0usize;
    let mut lines: Vec<String> = Vec::new();
    loop {
        let rest = &data[offset.min(data.len())..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or(MeshIoError::Truncated)?;
        let line = String::from_utf8_lossy(&rest[..nl]).trim_end_matches('\r').to_string();
        offset += nl + 1;
        let done = line == "end_header";
        lines.push(line);
        if done {
            break;
        }
        if lines.len() > 1024 {
            return Err(MeshIoError::Unsupported("oversized ply header".into()));
        }
    }

    if lines.first().map(String::as_str) != Some("ply") {
        return Err(parse_err(1, "missing ply magic"));
    }

    let mut format_seen = false;
    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut vertex_layout: Option<VertexLayout> = None;
    let mut face_layout: Option<FaceLayout> = None;
    // element currently being defined: 0 none, 1 vertex, 2 face, 3 other
    let mut current = 0u8;

    for (i, line) in lines.iter().enumerate().skip(1) {
        let lineno = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            Some("format") => {
                if toks.get(1).copied() != Some("binary_little_endian") {
                    return Err(MeshIoError::Unsupported(format!(
                        "ply format {:?} (only binary_little_endian)",
                        toks.get(1).copied().unwrap_or("")
                    )));
                }
                format_seen = true;
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let kind = *toks.get(1).ok_or_else(|| parse_err(lineno, "element needs a name"))?;
                let count: usize = toks
                    .get(2)
                    .ok_or_else(|| parse_err(lineno, "element needs a count"))?
                    .parse()
                    .map_err(|_| parse_err(lineno, "bad element count"))?;
                match kind {
                    "vertex" => {
                        n_vertices = count;
                        vertex_layout = Some(VertexLayout { props: Vec::new() });
                        current = 1;
                    }
                    "face" => {
                        n_faces = count;
                        current = 2;
                    }
                    _ => {
                        if count != 0 {
                            return Err(MeshIoError::Unsupported(format!("ply element {kind:?}")));
                        }
                        current = 3;
                    }
                }
            }
            Some("property") => match current {
                1 => {
                    let layout = vertex_layout.as_mut().unwrap();
                    if toks.get(1).copied() == Some("list") {
                        return Err(MeshIoError::Unsupported("list property on vertices".into()));
                    }
                    let ty = PlyScalar::parse(toks.get(1).copied().unwrap_or(""))
                        .ok_or_else(|| parse_err(lineno, "unknown property type"))?;
                    let slot = match toks.get(2).copied() {
                        Some("x") => Some(0),
                        Some("y") => Some(1),
                        Some("z") => Some(2),
                        Some(_) => None,
                        None => return Err(parse_err(lineno, "property needs a name")),
                    };
                    layout.props.push((ty, slot));
                }
                2 => {
                    if toks.get(1).copied() != Some("list") {
                        return Err(MeshIoError::Unsupported("non-list face property".into()));
                    }
                    let count_ty = PlyScalar::parse(toks.get(2).copied().unwrap_or(""))
                        .ok_or_else(|| parse_err(lineno, "unknown list count type"))?;
                    let index_ty = PlyScalar::parse(toks.get(3).copied().unwrap_or(""))
                        .ok_or_else(|| parse_err(lineno, "unknown list index type"))?;
                    if face_layout.is_some() {
                        return Err(MeshIoError::Unsupported("multiple face properties".into()));
                    }
                    face_layout = Some(FaceLayout { count_ty, index_ty });
                }
                _ => return Err(parse_err(lineno, "property outside element")),
            },
            Some("end_header") => break,
            Some(other) => return Err(parse_err(lineno, format!("unknown header record {other:?}"))),
            None => {}
        }
    }

    if !format_seen {
        return Err(MeshIoError::Unsupported("missing ply format line".into()));
    }
    let vertex_layout = vertex_layout.ok_or(MeshIoError::Unsupported("ply without vertex element".into()))?;
    let have_xyz = (0..3).all(|s| vertex_layout.props.iter().any(|(_, slot)| *slot == Some(s)));
    if !have_xyz {
        return Err(MeshIoError::Unsupported("vertex element lacks x/y/z".into()));
    }
    let vertex_stride: usize = vertex_layout.props.iter().map(|(t, _)| t.size()).sum();
    if data.len().saturating_sub(offset) < n_vertices.saturating_mul(vertex_stride) {
        return Err(MeshIoError::Truncated);
    }

    let mut cur = Cursor { data, pos: offset };
    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let mut coord = [0.0f64; 3];
        for &(ty, slot) in &vertex_layout.props {
            let v = cur.read_f64(ty)?;
            if let Some(s) = slot {
                coord[s] = v;
            }
        }
        vertices.push(Vec3::new(coord[0], coord[1], coord[2]));
    }

    let mut faces = Vec::with_capacity(n_faces.min(1 << 20));
    if n_faces > 0 {
        let fl = face_layout.ok_or(MeshIoError::Unsupported("face element lacks index list".into()))?;
        for _ in 0..n_faces {
            let count = cur.read_index(fl.count_ty)?;
            if !(0..=255).contains(&count) {
                return Err(MeshIoError::Unsupported(format!("face vertex count {count}")));
            }
            let mut idx = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let i = cur.read_index(fl.index_ty)?;
                if i < 0 || i as usize >= vertices.len() {
                    return Err(MeshIoError::InvalidIndex { index: i, n_vertices: vertices.len() });
                }
                idx.push(i as u32);
            }
            for k in 1..idx.len().saturating_sub(1) {
                faces.push([idx[0], idx[k], idx[k + 1]]);
            }
        }
    }

    Ok((vertices, faces))
}

/// Serializes to binary little-endian PLY with double-precision positions.
pub fn format_ply(vertices: &[Vec3], faces: &[[u32; 3]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(vertices.len() * 24 + faces.len() * 13 + 256);
    out.extend_from_slice(b"ply\n");
    out.extend_from_slice(b"format binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", vertices.len()).as_bytes());
    out.extend_from_slice(b"property double x\nproperty double y\nproperty double z\n");
    out.extend_from_slice(format!("element face {}\n", faces.len()).as_bytes());
    out.extend_from_slice(b"property list uchar uint vertex_indices\n");
    out.extend_from_slice(b"end_header\n");
    for v in vertices {
        out.extend_from_slice(&v.x.to_le_bytes());
        out.extend_from_slice(&v.y.to_le_bytes());
        out.extend_from_slice(&v.z.to_le_bytes());
    }
    for f in faces {
        out.push(3u8);
        for &i in f {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    out
}

pub fn load_ply(path: &Path) -> Result<(Vec<Vec3>, Vec<[u32; 3]>)> {
    parse_ply(&fs::read(path)?)
}

pub fn save_ply(path: &Path, vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<()> {
    Ok(fs::write(path, format_ply(vertices, faces))?)
}
