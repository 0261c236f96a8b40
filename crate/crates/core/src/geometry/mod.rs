//! Landmarked facial meshes and anthropometric measurements (AMs).
//!
//! Three measurement families are supported, all computed from landmark
//! vertices of a single mesh (so they are invariant to rigid motion):
//!
//! * `Distance(a, b)`: Euclidean distance in millimetres.
//! * `Proportion(a, b, c, d)`: `dist(a, b) / dist(c, d)`, dimensionless.
//! * `Angle(a, b, c)`: angle at `b` between `a - b` and `c - b`.
//!
//! Angles are reported in **degrees** at the API boundary and handled in
//! radians internally. Every measurement has an analytic gradient with respect
//! to the vertex coordinates; the gradient is sparse (2 to 4 vertices).

mod io;
mod normalize;

pub use io::{
    parse_am_definitions, parse_landmarks, read_am_csv, read_am_definitions, read_landmarks,
    read_mesh, read_mesh_binary, read_obj, write_am_csv, write_am_definitions, write_landmarks,
    write_mesh_binary, write_obj, write_obj_with_scalars,
};
pub use normalize::AmNormalization;

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// Edges shorter than this (mm) make a measurement degenerate.
pub const MIN_EDGE: f64 = 1e-9;
/// Angles whose cosine is this close to +-1 are degenerate.
pub const COS_LIMIT: f64 = 1.0 - 1e-12;

/// Fixed-topology facial mesh. Vertex order is shared across a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub topology_id: String,
}

impl Mesh {
    pub fn new(vertices: Vec<Point>, topology_id: impl Into<String>) -> Result<Self> {
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("mesh vertices"));
        }
        Ok(Self {
            vertices,
            topology_id: topology_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn translated(&self, offset: Point) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| v + offset).collect(),
            topology_id: self.topology_id.clone(),
        }
    }

    /// Apply `x -> scale * rotation * x + offset` to every vertex.
    pub fn transformed(&self, rotation: &nalgebra::Rotation3<f64>, scale: f64, offset: Point) -> Mesh {
        Mesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| rotation * v * scale + offset)
                .collect(),
            topology_id: self.topology_id.clone(),
        }
    }

    pub fn check_same_topology(&self, other: &Mesh) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: other.len(),
                context: "mesh vertex count",
            });
        }
        if self.topology_id != other.topology_id {
            return Err(Error::InvalidDefinition(format!(
                "topology `{}` does not match `{}`",
                other.topology_id, self.topology_id
            )));
        }
        Ok(())
    }
}

/// Named landmark -> vertex index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LandmarkMap {
    entries: BTreeMap<String, usize>,
    order: Vec<String>,
}

impl LandmarkMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, index: usize) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidDefinition(format!("duplicate landmark `{name}`")));
        }
        self.entries.insert(name.clone(), index);
        self.order.push(name);
        Ok(())
    }

    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let mut map = Self::new();
        for (name, index) in pairs {
            map.insert(name, index)?;
        }
        Ok(map)
    }

    pub fn get(&self, name: &str) -> Result<usize> {
        self.entries
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLandmark(name.to_string()))
    }

    /// Landmarks in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.order.iter().map(|n| (n.as_str(), self.entries[n]))
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Check that every index addresses a vertex of a `vertex_count` mesh.
    pub fn validate(&self, vertex_count: usize) -> Result<()> {
        for (name, idx) in self.iter() {
            if idx >= vertex_count {
                return Err(Error::OutOfRange(format!(
                    "landmark `{name}` index {idx} >= vertex count {vertex_count}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AmKind {
    Distance(String, String),
    Proportion(String, String, String, String),
    Angle(String, String, String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AmDefinition {
    pub id: String,
    pub kind: AmKind,
}

impl AmDefinition {
    pub fn distance(id: &str, a: &str, b: &str) -> Self {
        Self {
            id: id.into(),
            kind: AmKind::Distance(a.into(), b.into()),
        }
    }

    pub fn proportion(id: &str, a: &str, b: &str, c: &str, d: &str) -> Self {
        Self {
            id: id.into(),
            kind: AmKind::Proportion(a.into(), b.into(), c.into(), d.into()),
        }
    }

    pub fn angle(id: &str, a: &str, b: &str, c: &str) -> Self {
        Self {
            id: id.into(),
            kind: AmKind::Angle(a.into(), b.into(), c.into()),
        }
    }

    pub fn landmark_names(&self) -> Vec<&str> {
        match &self.kind {
            AmKind::Distance(a, b) => vec![a, b],
            AmKind::Proportion(a, b, c, d) => vec![a, b, c, d],
            AmKind::Angle(a, b, c) => vec![a, b, c],
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            AmKind::Distance(..) => "distance",
            AmKind::Proportion(..) => "proportion",
            AmKind::Angle(..) => "angle",
        }
    }

    /// Bind landmark names to vertex indices, validating the definition.
    pub fn resolve(&self, landmarks: &LandmarkMap) -> Result<ResolvedAm> {
        let distinct = |names: &[&String]| {
            for i in 0..names.len() {
                for j in i + 1..names.len() {
                    if names[i] == names[j] {
                        return Err(Error::InvalidDefinition(format!(
                            "`{}` repeats landmark `{}`",
                            self.id, names[i]
                        )));
                    }
                }
            }
            Ok(())
        };
        let kind = match &self.kind {
            AmKind::Distance(a, b) => {
                distinct(&[a, b])?;
                ResolvedKind::Distance(landmarks.get(a)?, landmarks.get(b)?)
            }
            AmKind::Proportion(a, b, c, d) => {
                distinct(&[a, b])?;
                distinct(&[c, d])?;
                ResolvedKind::Proportion(
                    landmarks.get(a)?,
                    landmarks.get(b)?,
                    landmarks.get(c)?,
                    landmarks.get(d)?,
                )
            }
            AmKind::Angle(a, b, c) => {
                distinct(&[a, b, c])?;
                ResolvedKind::Angle(landmarks.get(a)?, landmarks.get(b)?, landmarks.get(c)?)
            }
        };
        Ok(ResolvedAm {
            id: self.id.clone(),
            kind,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolvedKind {
    Distance(usize, usize),
    Proportion(usize, usize, usize, usize),
    Angle(usize, usize, usize),
}

/// An AM definition bound to vertex indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedAm {
    pub id: String,
    pub kind: ResolvedKind,
}

/// Sparse gradient of one AM: `(vertex index, d value / d vertex)`.
/// Vertex indices are unique within one gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AmGradient {
    pub entries: Vec<(usize, Point)>,
}

impl AmGradient {
    fn add(&mut self, vertex: usize, g: Point) {
        match self.entries.iter_mut().find(|(v, _)| *v == vertex) {
            Some((_, acc)) => *acc += g,
            None => self.entries.push((vertex, g)),
        }
    }

    fn scaled(mut self, s: f64) -> Self {
        for (_, g) in &mut self.entries {
            *g *= s;
        }
        self
    }

    pub fn get(&self, vertex: usize) -> Point {
        self.entries
            .iter()
            .find(|(v, _)| *v == vertex)
            .map(|(_, g)| *g)
            .unwrap_or_else(Point::zeros)
    }

    /// Scatter into a dense flattened (row-major xyz) vector of length 3T.
    pub fn to_dense(&self, vertex_count: usize) -> Vec<f64> {
        let mut out = vec![0.0; 3 * vertex_count];
        for (v, g) in &self.entries {
            out[3 * v..3 * v + 3].copy_from_slice(g.as_slice());
        }
        out
    }
}

/// Vertex accessor over either a `Mesh` or a flattened coordinate vector.
pub trait VertexSource {
    fn vertex(&self, i: usize) -> Point;
    fn vertex_count(&self) -> usize;
}

impl VertexSource for Mesh {
    fn vertex(&self, i: usize) -> Point {
        self.vertices[i]
    }
    fn vertex_count(&self) -> usize {
        self.vertices.len()
    }
}

impl VertexSource for [f64] {
    fn vertex(&self, i: usize) -> Point {
        Point::new(self[3 * i], self[3 * i + 1], self[3 * i + 2])
    }
    fn vertex_count(&self) -> usize {
        self.len() / 3
    }
}

fn degenerate(id: &str, reason: impl Into<String>) -> Error {
    Error::DegenerateMeasurement {
        am: id.to_string(),
        reason: reason.into(),
    }
}

struct Edge {
    len: f64,
    unit: Point,
}

fn edge<S: VertexSource + ?Sized>(src: &S, id: &str, a: usize, b: usize) -> Result<Edge> {
    let d = src.vertex(b) - src.vertex(a);
    let len = d.norm();
    if !len.is_finite() {
        return Err(Error::NonFinite("landmark coordinates"));
    }
    if len < MIN_EDGE {
        return Err(degenerate(id, format!("vertices {a} and {b} coincide")));
    }
    Ok(Edge { len, unit: d / len })
}

struct AngleParts {
    radians: f64,
    cos: f64,
    sin: f64,
    u: Edge,
    v: Edge,
}

fn angle_parts<S: VertexSource + ?Sized>(
    src: &S,
    id: &str,
    a: usize,
    b: usize,
    c: usize,
) -> Result<AngleParts> {
    let u = edge(src, id, b, a)?;
    let v = edge(src, id, b, c)?;
    let cos = u.unit.dot(&v.unit);
    if cos.abs() >= COS_LIMIT {
        return Err(degenerate(id, "arms are collinear"));
    }
    let sin = u.unit.cross(&v.unit).norm();
    Ok(AngleParts {
        radians: sin.atan2(cos),
        cos,
        sin,
        u,
        v,
    })
}

impl ResolvedAm {
    pub fn value<S: VertexSource + ?Sized>(&self, src: &S) -> Result<f64> {
        match self.kind {
            ResolvedKind::Distance(a, b) => {
                let d = (src.vertex(b) - src.vertex(a)).norm();
                if !d.is_finite() {
                    return Err(Error::NonFinite("landmark coordinates"));
                }
                Ok(d)
            }
            ResolvedKind::Proportion(a, b, c, d) => {
                let num = (src.vertex(b) - src.vertex(a)).norm();
                let den = edge(src, &self.id, c, d)?;
                Ok(num / den.len)
            }
            ResolvedKind::Angle(a, b, c) => {
                Ok(angle_parts(src, &self.id, a, b, c)?.radians.to_degrees())
            }
        }
    }

    pub fn gradient<S: VertexSource + ?Sized>(&self, src: &S) -> Result<AmGradient> {
        let mut g = AmGradient::default();
        match self.kind {
            ResolvedKind::Distance(a, b) => {
                let e = edge(src, &self.id, a, b)?;
                g.add(a, -e.unit);
                g.add(b, e.unit);
            }
            ResolvedKind::Proportion(a, b, c, d) => {
                let num = edge(src, &self.id, a, b)?;
                let den = edge(src, &self.id, c, d)?;
                let q = num.len / den.len;
                g.add(a, -num.unit / den.len);
                g.add(b, num.unit / den.len);
                g.add(c, den.unit * (q / den.len));
                g.add(d, -den.unit * (q / den.len));
            }
            ResolvedKind::Angle(a, b, c) => {
                let p = angle_parts(src, &self.id, a, b, c)?;
                // d(theta)/d(a) = -(v_hat - cos u_hat) / (|u| sin)
                let ga = -(p.v.unit - p.u.unit * p.cos) / (p.u.len * p.sin);
                let gc = -(p.u.unit - p.v.unit * p.cos) / (p.v.len * p.sin);
                g.add(a, ga);
                g.add(c, gc);
                g.add(b, -(ga + gc));
                g = g.scaled(180.0 / std::f64::consts::PI);
            }
        }
        Ok(g)
    }
}

/// Ordered vector of K AM values.
#[derive(Debug, Clone, PartialEq)]
pub struct AmVector {
    pub values: Vec<f64>,
}

impl AmVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn compute_am(mesh: &Mesh, landmarks: &LandmarkMap, def: &AmDefinition) -> Result<f64> {
    landmarks.validate(mesh.len())?;
    def.resolve(landmarks)?.value(mesh)
}

pub fn compute_am_gradient(
    mesh: &Mesh,
    landmarks: &LandmarkMap,
    def: &AmDefinition,
) -> Result<AmGradient> {
    landmarks.validate(mesh.len())?;
    def.resolve(landmarks)?.gradient(mesh)
}

/// Resolve a whole definition list, failing on the first invalid entry.
pub fn resolve_all(landmarks: &LandmarkMap, defs: &[AmDefinition]) -> Result<Vec<ResolvedAm>> {
    let mut seen = std::collections::HashSet::new();
    for d in defs {
        if !seen.insert(d.id.as_str()) {
            return Err(Error::InvalidDefinition(format!("duplicate AM id `{}`", d.id)));
        }
    }
    defs.iter().map(|d| d.resolve(landmarks)).collect()
}

/// Evaluate every definition; failures are collected together with their ids.
pub fn compute_all_ams(mesh: &Mesh, landmarks: &LandmarkMap, defs: &[AmDefinition]) -> Result<AmVector> {
    landmarks.validate(mesh.len())?;
    let resolved = resolve_all(landmarks, defs)?;
    eval_resolved(mesh, &resolved)
}

pub fn eval_resolved<S: VertexSource + ?Sized>(src: &S, resolved: &[ResolvedAm]) -> Result<AmVector> {
    let mut values = Vec::with_capacity(resolved.len());
    let mut failures = Vec::new();
    for am in resolved {
        match am.value(src) {
            Ok(v) => values.push(v),
            Err(e) => failures.push((am.id.clone(), Box::new(e))),
        }
    }
    if failures.is_empty() {
        Ok(AmVector { values })
    } else {
        Err(Error::Measurements(failures))
    }
}


const CANONICAL_AMS: &str = include_str!("../../data/canonical_ams.txt");
const TEMPLATE_LANDMARKS: &str = include_str!("../../data/template_landmarks.txt");

/// The shipped 24-AM definition list.
pub fn canonical_definitions() -> Vec<AmDefinition> {
    parse_am_definitions(CANONICAL_AMS, "canonical_ams.txt").expect("shipped AM list parses")
}

/// Canonical landmark names with template positions (mm), in file order.
pub fn template_landmark_positions() -> Vec<(String, Point)> {
    TEMPLATE_LANDMARKS
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p: Vec<&str> = l.split_whitespace().collect();
            let c = |i: usize| p[i].parse::<f64>().expect("template coordinate");
            (p[0].to_string(), Point::new(c(1), c(2), c(3)))
        })
        .collect()
}
