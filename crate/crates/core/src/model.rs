//! Object models: loading ASCII PLY / XYZ point sets and keypoint selection.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed PLY header: {reason}")]
    MalformedHeader { line: usize, reason: String },
    #[error("line {line}: expected numeric vertex data, found {found:?}")]
    NonNumeric { line: usize, found: String },
    #[error("line {line}: non-finite coordinate")]
    NonFinite { line: usize },
    #[error("line {line}: model has no vertices")]
    NoVertices { line: usize },
    #[error("line {line}: expected {expected} vertices, file ended after {found}")]
    Truncated { line: usize, expected: usize, found: usize },
    #[error("model has no points")]
    Empty,
    #[error("keypoint index {index} is out of range or repeated (model has {available} points)")]
    BadKeypointIndex { index: usize, available: usize },
    #[error("keypoint count {requested} out of range 1..={available}")]
    KeypointCount { requested: usize, available: usize },
}

/// A rigid object as a set of model points (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub name: String,
    points: Vec<Vector3<f64>>,
    pub symmetric: bool,
    diameter: f64,
}

impl ObjectModel {
    pub fn new(name: impl Into<String>, points: Vec<Vector3<f64>>, symmetric: bool) -> Result<Self, ModelError> {
        if points.is_empty() {
            return Err(ModelError::Empty);
        }
        if points.iter().any(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(ModelError::NonFinite { line: 0 });
        }
        let diameter = diameter(&points);
        Ok(ObjectModel { name: name.into(), points, symmetric, diameter })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Largest pairwise point distance.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }
}

/// Exact O(m²) maximum pairwise distance.
pub fn diameter(points: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

/// Loads an ASCII PLY (vertex `x y z` properties; other elements skipped) or
/// a plain XYZ text file. The format is chosen by the `ply` magic line.
pub fn load_model(path: &Path, symmetric: bool) -> Result<ObjectModel, ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    let points = if text.lines().next().map(str::trim) == Some("ply") { parse_ply(&text)? } else { parse_xyz(&text)? };
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    ObjectModel::new(name, points, symmetric)
}

struct PlyElement {
    name: String,
    count: usize,
    /// Property names; list properties are recorded but make the line length variable.
    properties: Vec<(String, bool)>,
}

pub fn parse_ply(text: &str) -> Result<Vec<Vector3<f64>>, ModelError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let header_err = |line: usize, reason: &str| ModelError::MalformedHeader { line, reason: reason.to_string() };

    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        Some((n, _)) => return Err(header_err(n, "missing 'ply' magic")),
        None => return Err(header_err(1, "empty file")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    let mut last_line = 1;
    loop {
        let Some((n, line)) = lines.next() else {
            return Err(header_err(last_line, "missing end_header"));
        };
        last_line = n;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            ["format", "ascii", _] => saw_format = true,
            ["format", other, ..] => return Err(header_err(n, &format!("unsupported format '{other}' (ASCII only)"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = count.parse::<usize>().map_err(|_| header_err(n, "element count is not an integer"))?;
                elements.push(PlyElement { name: name.to_string(), count, properties: Vec::new() });
            }
            ["property", "list", _, _, name] => {
                let el = elements.last_mut().ok_or_else(|| header_err(n, "property before element"))?;
                el.properties.push((name.to_string(), true));
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| header_err(n, "property before element"))?;
                if el.name == "vertex" && ["x", "y", "z"].contains(name) && !is_float_type(ty) {
                    return Err(header_err(n, &format!("vertex property '{name}' must be a float type, found '{ty}'")));
                }
                el.properties.push((name.to_string(), false));
            }
            ["end_header"] => break,
            _ => return Err(header_err(n, &format!("unrecognized header line '{line}'"))),
        }
    }
    if !saw_format {
        return Err(header_err(last_line, "missing format line"));
    }
    let Some(vertex) = elements.iter().position(|e| e.name == "vertex") else {
        return Err(header_err(last_line, "no vertex element"));
    };
    let axis = |name: &str| {
        elements[vertex]
            .properties
            .iter()
            .position(|(p, list)| p == name && !list)
            .ok_or_else(|| header_err(last_line, &format!("vertex element lacks property '{name}'")))
    };
    let cols = [axis("x")?, axis("y")?, axis("z")?];
    if elements[vertex].properties.iter().any(|(_, list)| *list) {
        return Err(header_err(last_line, "list properties on vertices are not supported"));
    }
    if elements[vertex].count == 0 {
        return Err(ModelError::NoVertices { line: last_line });
    }

    let mut points = Vec::with_capacity(elements[vertex].count);
    for (ei, el) in elements.iter().enumerate() {
        for k in 0..el.count {
            let Some((n, line)) = lines.next() else {
                return Err(ModelError::Truncated { line: last_line, expected: el.count, found: k });
            };
            last_line = n;
            if ei != vertex {
                continue;
            }
            let values: Vec<&str> = line.split_whitespace().collect();
            if values.len() < el.properties.len() {
                return Err(ModelError::NonNumeric { line: n, found: line.to_string() });
            }
            let mut p = Vector3::zeros();
            for (a, &c) in cols.iter().enumerate() {
                p[a] = parse_coord(values[c], n, line)?;
            }
            points.push(p);
        }
    }
    Ok(points)
}

fn is_float_type(ty: &str) -> bool {
    matches!(ty, "float" | "float32" | "double" | "float64")
}

fn parse_coord(token: &str, line: usize, whole: &str) -> Result<f64, ModelError> {
    let v = token.parse::<f64>().map_err(|_| ModelError::NonNumeric { line, found: whole.to_string() })?;
    if !v.is_finite() {
        return Err(ModelError::NonFinite { line });
    }
    Ok(v)
}

/// One `x y z` triple per line; blank lines and `#` comments are skipped.
pub fn parse_xyz(text: &str) -> Result<Vec<Vector3<f64>>, ModelError> {
    let mut points = Vec::new();
    let mut last = 0;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        last = n;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(ModelError::NonNumeric { line: n, found: line.to_string() });
        }
        let mut p = Vector3::zeros();
        for a in 0..3 {
            p[a] = parse_coord(tokens[a], n, line)?;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(ModelError::NoVertices { line: last.max(1) });
    }
    Ok(points)
}

/// Writes points as XYZ text with round-trip (`{:?}`) float formatting.
pub fn write_xyz(path: &Path, points: &[Vector3<f64>]) -> std::io::Result<()> {
    let mut out = String::with_capacity(points.len() * 48);
    for p in points {
        out.push_str(&format!("{:?} {:?} {:?}\n", p.x, p.y, p.z));
    }
    fs::File::create(path)?.write_all(out.as_bytes())
}

/// Writes an ASCII PLY with a single vertex element.
pub fn write_ply(path: &Path, points: &[Vector3<f64>]) -> std::io::Result<()> {
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    );
    for p in points {
        out.push_str(&format!("{:?} {:?} {:?}\n", p.x, p.y, p.z));
    }
    fs::File::create(path)?.write_all(out.as_bytes())
}

/// Subset of model points used as 2D-3D correspondence anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub model_indices: Vec<usize>,
    pub positions: Vec<Vector3<f64>>,
}

impl KeypointSet {
    /// Builds from model indices, checking uniqueness and range.
    pub fn from_indices(model: &ObjectModel, indices: Vec<usize>) -> Result<Self, ModelError> {
        let mut seen = vec![false; model.len()];
        for &i in &indices {
            if i >= model.len() || seen[i] {
                return Err(ModelError::BadKeypointIndex { index: i, available: model.len() });
            }
            seen[i] = true;
        }
        let positions = indices.iter().map(|&i| model.points[i]).collect();
        Ok(KeypointSet { model_indices: indices, positions })
    }

    pub fn len(&self) -> usize {
        self.model_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model_indices.is_empty()
    }
}

/// Farthest-point sampling of `n` model points.
///
/// The first keypoint is the point farthest from the centroid; each next one
/// maximizes its distance to the already chosen set. Exact ties go to the
/// lowest model index, so the result is fully determined by the model and
/// `n`. `seed` is accepted for interface stability and does not influence the
/// selection.
pub fn sample_keypoints(model: &ObjectModel, n: usize, _seed: u64) -> Result<KeypointSet, ModelError> {
    let m = model.len();
    if n == 0 || n > m {
        return Err(ModelError::KeypointCount { requested: n, available: m });
    }
    let pts = model.points();
    let centroid = model.centroid();
    let argmax = |dist: &[f64], taken: &[bool]| {
        let mut best: Option<usize> = None;
        for i in 0..m {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| dist[i] > dist[b]) {
                best = Some(i);
            }
        }
        best.expect("n <= m leaves an untaken point")
    };
    let mut taken = vec![false; m];
    let from_centroid: Vec<f64> = pts.iter().map(|p| (p - centroid).norm_squared()).collect();
    let first = argmax(&from_centroid, &taken);
    let mut chosen = vec![first];
    taken[first] = true;
    let mut min_dist: Vec<f64> = pts.iter().map(|p| (p - pts[first]).norm_squared()).collect();
    while chosen.len() < n {
        let next = argmax(&min_dist, &taken);
        taken[next] = true;
        chosen.push(next);
        for (d, p) in min_dist.iter_mut().zip(pts) {
            *d = d.min((p - pts[next]).norm_squared());
        }
    }
    KeypointSet::from_indices(model, chosen)
}
