//! Text and binary formats for meshes, landmarks, AM definitions and AM tables.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

use super::{AmDefinition, AmKind, AmVector, LandmarkMap, Mesh, Point};

const MESH_MAGIC: &[u8; 8] = b"VXMESH1\0";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Read the `v x y z` lines of an OBJ file; everything else is ignored.
pub fn read_obj(path: &Path, topology_id: &str) -> Result<Mesh> {
    let text = read_text(path)?;
    let name = path.display().to_string();
    let mut vertices = Vec::new();
    for (lineno, line) in content_lines(&text) {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("v") {
            continue;
        }
        let coords: Vec<f64> = parts
            .take(3)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(&name, lineno, e.to_string()))?;
        if coords.len() != 3 {
            return Err(parse_err(&name, lineno, "vertex needs 3 coordinates"));
        }
        vertices.push(Point::new(coords[0], coords[1], coords[2]));
    }
    Mesh::new(vertices, topology_id)
}

pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    let mut out = format!("# topology {}\n", mesh.topology_id);
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    write_bytes(path, out.as_bytes())
}

/// OBJ with per-vertex colours encoding `scalars` on a blue-to-red ramp over
/// `[0, max]`. The raw scalar is kept in a trailing comment on each line.
pub fn write_obj_with_scalars(path: &Path, mesh: &Mesh, scalars: &[f64]) -> Result<()> {
    if scalars.len() != mesh.len() {
        return Err(Error::DimensionMismatch {
            expected: mesh.len(),
            actual: scalars.len(),
            context: "per-vertex scalars",
        });
    }
    let max = scalars.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let mut out = format!("# topology {}\n# scalar range 0 {}\n", mesh.topology_id, max);
    for (v, s) in mesh.vertices.iter().zip(scalars) {
        let t = (s / max).clamp(0.0, 1.0);
        out.push_str(&format!(
            "v {} {} {} {:.4} {:.4} {:.4} # {}\n",
            v.x,
            v.y,
            v.z,
            t,
            0.2 * (1.0 - (2.0 * t - 1.0).abs()),
            1.0 - t,
            s
        ));
    }
    write_bytes(path, out.as_bytes())
}

pub fn write_mesh_binary(path: &Path, mesh: &Mesh) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 24 * mesh.len());
    buf.extend_from_slice(MESH_MAGIC);
    buf.extend_from_slice(&(mesh.len() as u64).to_le_bytes());
    for v in &mesh.vertices {
        for c in v.iter() {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    write_bytes(path, &buf)
}

pub fn read_mesh_binary(path: &Path, topology_id: &str) -> Result<Mesh> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MESH_MAGIC {
        return Err(bad("missing mesh magic"));
    }
    let t = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 24 * t {
        return Err(bad("length does not match vertex count"));
    }
    let vertices = bytes[16..]
        .chunks_exact(24)
        .map(|c| {
            let f = |i: usize| f64::from_le_bytes(c[8 * i..8 * i + 8].try_into().unwrap());
            Point::new(f(0), f(1), f(2))
        })
        .collect();
    Mesh::new(vertices, topology_id)
}

/// Dispatch on extension: `.obj` is text, anything else the binary format.
pub fn read_mesh(path: &Path, topology_id: &str) -> Result<Mesh> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => read_obj(path, topology_id),
        _ => read_mesh_binary(path, topology_id),
    }
}

pub fn parse_landmarks(text: &str, source: &str) -> Result<LandmarkMap> {
    let mut map = LandmarkMap::new();
    for (lineno, line) in content_lines(text) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(parse_err(source, lineno, "expected `name index`"));
        }
        let idx = parts[1]
            .parse::<usize>()
            .map_err(|e| parse_err(source, lineno, e.to_string()))?;
        map.insert(parts[0], idx)
            .map_err(|e| parse_err(source, lineno, e.to_string()))?;
    }
    Ok(map)
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkMap> {
    parse_landmarks(&read_text(path)?, &path.display().to_string())
}

pub fn write_landmarks(path: &Path, map: &LandmarkMap) -> Result<()> {
    let out: String = map.iter().map(|(n, i)| format!("{n} {i}\n")).collect();
    write_bytes(path, out.as_bytes())
}

pub fn parse_am_definitions(text: &str, source: &str) -> Result<Vec<AmDefinition>> {
    let mut defs = Vec::new();
    for (lineno, line) in content_lines(text) {
        let p: Vec<&str> = line.split_whitespace().collect();
        let def = match (p.get(1).copied(), p.len()) {
            (Some("distance"), 4) => AmDefinition::distance(p[0], p[2], p[3]),
            (Some("proportion"), 6) => AmDefinition::proportion(p[0], p[2], p[3], p[4], p[5]),
            (Some("angle"), 5) => AmDefinition::angle(p[0], p[2], p[3], p[4]),
            _ => {
                return Err(parse_err(
                    source,
                    lineno,
                    "expected `id distance a b`, `id proportion a b c d` or `id angle a b c`",
                ))
            }
        };
        defs.push(def);
    }
    Ok(defs)
}

pub fn read_am_definitions(path: &Path) -> Result<Vec<AmDefinition>> {
    parse_am_definitions(&read_text(path)?, &path.display().to_string())
}

pub fn write_am_definitions(path: &Path, defs: &[AmDefinition]) -> Result<()> {
    let mut out = String::new();
    for d in defs {
        let names = d.landmark_names().join(" ");
        out.push_str(&format!("{} {} {}\n", d.id, d.kind_name(), names));
    }
    write_bytes(path, out.as_bytes())
}

/// AM table: header `speaker,<am ids...>`, one row per key.
pub fn write_am_csv(path: &Path, ids: &[String], rows: &[(String, AmVector)]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(BufWriter::new(&mut buf));
        let csv_err = |e: csv::Error| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let mut header = vec!["speaker".to_string()];
        header.extend(ids.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (key, v) in rows {
            if v.len() != ids.len() {
                return Err(Error::DimensionMismatch {
                    expected: ids.len(),
                    actual: v.len(),
                    context: "AM CSV row",
                });
            }
            let mut rec = vec![key.clone()];
            rec.extend(v.values.iter().map(|x| x.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    write_bytes(path, &buf)
}

#[allow(clippy::type_complexity)]
pub fn read_am_csv(path: &Path) -> Result<(Vec<String>, Vec<(String, AmVector)>)> {
    let text = read_text(path)?;
    let name = path.display().to_string();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| parse_err(&name, 1, e.to_string()))?
        .clone();
    let ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(&name, i + 2, e.to_string()))?;
        let values = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(&name, i + 2, e.to_string()))?;
        if values.len() != ids.len() {
            return Err(parse_err(&name, i + 2, "wrong number of columns"));
        }
        rows.push((rec[0].to_string(), AmVector { values }));
    }
    Ok((ids, rows))
}

impl std::fmt::Display for AmKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AmKind::Distance(a, b) => write!(f, "distance({a}, {b})"),
            AmKind::Proportion(a, b, c, d) => write!(f, "proportion({a}-{b} / {c}-{d})"),
            AmKind::Angle(a, b, c) => write!(f, "angle({a}, {b}, {c})"),
        }
    }
}
