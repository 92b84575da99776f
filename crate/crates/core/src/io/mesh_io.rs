//! OBJ and PLY meshes and point clouds.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, RigError};
use crate::mesh::MeshTopology;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Obj,
    Ply,
}

fn format_of(path: &Path) -> Result<Format> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("obj") => Ok(Format::Obj),
        Some("ply") => Ok(Format::Ply),
        _ => Err(RigError::Format(format!("{}: unsupported mesh extension (expected .obj or .ply)", path.display()))),
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> RigError {
    RigError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Vertex positions and polygon faces (0-based) as stored in the file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawMesh {
    pub verts: Vec<f64>,
    pub faces: Vec<Vec<usize>>,
}

impl RawMesh {
    /// Fan-triangulates non-triangular faces, with a warning.
    pub fn into_triangles(self, path: &Path) -> Result<(Vec<f64>, MeshTopology)> {
        let n = self.verts.len() / 3;
        let polys = self.faces.iter().filter(|f| f.len() != 3).count();
        if polys > 0 {
            log::warn!("{}: fan-triangulating {polys} non-triangular faces", path.display());
        }
        let topo = MeshTopology::from_polygons(n, &self.faces)?;
        Ok((self.verts, topo))
    }
}

fn parse_obj(path: &Path, text: &str) -> Result<RawMesh> {
    let mut mesh = RawMesh::default();
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let coords: Vec<&str> = it.collect();
                if coords.len() < 3 {
                    return Err(parse_err(path, lineno, "vertex needs three coordinates"));
                }
                for c in &coords[..3] {
                    let v: f64 = c.parse().map_err(|_| parse_err(path, lineno, format!("bad coordinate `{c}`")))?;
                    mesh.verts.push(v);
                }
            }
            Some("f") => {
                let n = (mesh.verts.len() / 3) as i64;
                let mut face = Vec::new();
                for tok in it {
                    let idx = tok.split('/').next().unwrap_or("");
                    let i: i64 = idx.parse().map_err(|_| parse_err(path, lineno, format!("bad face index `{tok}`")))?;
                    let resolved = if i > 0 { i - 1 } else { n + i };
                    if i == 0 || resolved < 0 || resolved >= n {
                        return Err(parse_err(path, lineno, format!("face index {i} out of range")));
                    }
                    face.push(resolved as usize);
                }
                if face.len() < 3 {
                    return Err(parse_err(path, lineno, "face needs at least three vertices"));
                }
                mesh.faces.push(face);
            }
            _ => {}
        }
    }
    Ok(mesh)
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

fn parse_ply(path: &Path, bytes: &[u8]) -> Result<RawMesh> {
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| parse_err(path, lines.len() + 1, "unterminated PLY header"))?;
        let line = String::from_utf8_lossy(&bytes[pos..pos + end]).trim().to_string();
        pos += end + 1;
        let done = line == "end_header";
        lines.push(line);
        if done {
            break;
        }
    }
    if lines.first().map(String::as_str) != Some("ply") {
        return Err(parse_err(path, 1, "missing `ply` magic"));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    for (k, line) in lines.iter().enumerate().skip(1) {
        let lineno = k + 1;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.first().copied() {
            Some("format") => {
                binary = Some(match tok.get(1).copied() {
                    Some("ascii") => false,
                    Some("binary_little_endian") => true,
                    other => return Err(parse_err(path, lineno, format!("unsupported PLY format {other:?}"))),
                })
            }
            Some("element") => {
                let (name, count) = match (tok.get(1), tok.get(2).and_then(|c| c.parse().ok())) {
                    (Some(n), Some(c)) => (n.to_string(), c),
                    _ => return Err(parse_err(path, lineno, "malformed element line")),
                };
                elements.push(Element { name, count, props: Vec::new() });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or_else(|| parse_err(path, lineno, "property before element"))?;
                let prop = if tok.get(1) == Some(&"list") {
                    match (tok.get(2).and_then(|s| Scalar::parse(s)), tok.get(3).and_then(|s| Scalar::parse(s)), tok.get(4)) {
                        (Some(c), Some(v), Some(n)) => Property::List(n.to_string(), c, v),
                        _ => return Err(parse_err(path, lineno, "malformed list property")),
                    }
                } else {
                    match (tok.get(1).and_then(|s| Scalar::parse(s)), tok.get(2)) {
                        (Some(t), Some(n)) => Property::Scalar(n.to_string(), t),
                        _ => return Err(parse_err(path, lineno, "malformed property")),
                    }
                };
                el.props.push(prop);
            }
            _ => {}
        }
    }
    let binary = binary.ok_or_else(|| parse_err(path, 2, "missing format line"))?;
    let header_lines = lines.len();
    let mut mesh = RawMesh::default();
    let mut ascii_tokens = if binary {
        None
    } else {
        Some(String::from_utf8_lossy(&bytes[pos..]).lines().map(str::to_string).collect::<Vec<_>>().into_iter().enumerate())
    };
    for el in &elements {
        for item in 0..el.count {
            let mut values: Vec<(String, Vec<f64>)> = Vec::with_capacity(el.props.len());
            match ascii_tokens.as_mut() {
                Some(lines_it) => {
                    let (k, line) = lines_it.next().ok_or_else(|| parse_err(path, header_lines + 1, format!("{} {item}: unexpected end of data", el.name)))?;
                    let lineno = header_lines + k + 1;
                    let mut toks = line.split_whitespace().map(|t| t.parse::<f64>().map_err(|_| parse_err(path, lineno, format!("bad number `{t}`"))));
                    let mut next = || toks.next().unwrap_or_else(|| Err(parse_err(path, lineno, "too few values")));
                    for p in &el.props {
                        match p {
                            Property::Scalar(n, _) => values.push((n.clone(), vec![next()?])),
                            Property::List(n, _, _) => {
                                let c = next()? as usize;
                                values.push((n.clone(), (0..c).map(|_| next()).collect::<Result<_>>()?));
                            }
                        }
                    }
                }
                None => {
                    let mut take = |t: Scalar| -> Result<f64> {
                        let s = t.size();
                        if pos + s > bytes.len() {
                            return Err(parse_err(path, header_lines, format!("binary data ends inside element `{}` {item}", el.name)));
                        }
                        let v = t.read_le(&bytes[pos..pos + s]);
                        pos += s;
                        Ok(v)
                    };
                    for p in &el.props {
                        match p {
                            Property::Scalar(n, t) => values.push((n.clone(), vec![take(*t)?])),
                            Property::List(n, ct, vt) => {
                                let c = take(*ct)? as usize;
                                values.push((n.clone(), (0..c).map(|_| take(*vt)).collect::<Result<_>>()?));
                            }
                        }
                    }
                }
            }
            match el.name.as_str() {
                "vertex" => {
                    for axis in ["x", "y", "z"] {
                        let v = values.iter().find(|(n, _)| n == axis).ok_or_else(|| parse_err(path, header_lines, format!("vertex element lacks `{axis}`")))?;
                        mesh.verts.push(v.1[0]);
                    }
                }
                "face" => {
                    let (_, idx) = values
                        .iter()
                        .find(|(n, _)| n == "vertex_indices" || n == "vertex_index")
                        .ok_or_else(|| parse_err(path, header_lines, "face element lacks vertex_indices"))?;
                    mesh.faces.push(idx.iter().map(|&i| i as usize).collect());
                }
                _ => {}
            }
        }
    }
    let n = mesh.verts.len() / 3;
    if let Some(f) = mesh.faces.iter().position(|f| f.len() < 3 || f.iter().any(|&i| i >= n)) {
        return Err(parse_err(path, header_lines, format!("face {f} has an invalid index list")));
    }
    Ok(mesh)
}

fn read_raw(path: &Path) -> Result<RawMesh> {
    let bytes = fs::read(path).map_err(|e| RigError::io(path, e))?;
    match format_of(path)? {
        Format::Obj => parse_obj(path, &String::from_utf8_lossy(&bytes)),
        Format::Ply => parse_ply(path, &bytes),
    }
}

/// Loads a triangle mesh from `.obj` or `.ply`.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<(Vec<f64>, MeshTopology)> {
    let path = path.as_ref();
    read_raw(path)?.into_triangles(path)
}

/// Loads only the vertex positions of an `.obj` or `.ply` file.
pub fn load_points(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    if raw.verts.is_empty() {
        return Err(RigError::Empty(format!("{}: no points", path.display())));
    }
    Ok(raw.verts)
}

/// Writes `.obj` (text, shortest round-trip decimals) or `.ply` (binary
/// little-endian, float32 positions).
pub fn save_mesh(path: impl AsRef<Path>, verts: &[f64], triangles: &[[usize; 3]]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    match format_of(path)? {
        Format::Obj => {
            for v in verts.chunks_exact(3) {
                writeln!(buf, "v {} {} {}", v[0], v[1], v[2]).expect("write to memory");
            }
            for t in triangles {
                writeln!(buf, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).expect("write to memory");
            }
        }
        Format::Ply => {
            write!(
                buf,
                "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
                verts.len() / 3,
                triangles.len()
            )
            .expect("write to memory");
            for v in verts {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            for t in triangles {
                buf.push(3);
                for &i in t {
                    let i = i32::try_from(i).map_err(|_| RigError::Format("vertex index exceeds PLY int range".into()))?;
                    buf.extend_from_slice(&i.to_le_bytes());
                }
            }
        }
    }
    fs::write(path, buf).map_err(|e| RigError::io(path, e))
}

/// Writes a point cloud (vertices only).
pub fn save_points(path: impl AsRef<Path>, points: &[f64]) -> Result<()> {
    save_mesh(path, points, &[])
}
