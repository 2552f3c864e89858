//! Mesh loading (Wavefront OBJ), normalization and the asset catalog.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{Point3, Vector3};
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Error)]
pub enum AssetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: vertex index {index} out of range ({count} vertices)")]
    IndexOutOfRange { line: usize, index: i64, count: usize },
    #[error("mesh has no vertices")]
    EmptyMesh,
    #[error("mesh has zero extent")]
    ZeroExtent,
    #[error("catalog line {line}: {message}")]
    Catalog { line: usize, message: String },
    #[error("duplicate asset id `{0}`")]
    DuplicateId(String),
    #[error("asset `{id}`: facing {facing:?} must be non-zero and horizontal")]
    InvalidFacing { id: String, facing: [f64; 3] },
    #[error("asset `{id}`: mesh file {path} not found")]
    MissingMesh { id: String, path: PathBuf },
    #[error("asset `{id}`: {source}")]
    AssetMesh {
        id: String,
        #[source]
        source: Box<AssetError>,
    },
}

/// Triangle mesh. When `normals` or `vertex_colors` are present they hold one
/// entry per vertex.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<Point3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    pub triangles: Vec<[u32; 3]>,
    pub vertex_colors: Option<Vec<[f32; 3]>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl Aabb {
    pub fn center(&self) -> Point3<f64> {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn size(&self) -> Vector3<f64> {
        self.max - self.min
    }

    /// Largest side length.
    pub fn extent(&self) -> f64 {
        self.size().max()
    }
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn bounding_box(&self) -> Option<Aabb> {
        let first = *self.vertices.first()?;
        let (min, max) = self
            .vertices
            .iter()
            .fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v)));
        Some(Aabb { min, max })
    }

    /// Check indices and attribute lengths, then drop zero-area triangles.
    /// Returns the cleaned mesh and the number of triangles dropped.
    pub fn validate(mut self) -> Result<(Mesh, usize), AssetError> {
        let count = self.vertices.len();
        for t in &self.triangles {
            if let Some(bad) = t.iter().find(|i| **i as usize >= count) {
                return Err(AssetError::IndexOutOfRange {
                    line: 0,
                    index: i64::from(*bad),
                    count,
                });
            }
        }
        if let Some(n) = &self.normals {
            if n.len() != count || n.iter().any(|n| (n.norm() - 1.0).abs() > 1e-6) {
                return Err(AssetError::Parse {
                    line: 0,
                    message: "normals must be unit length, one per vertex".into(),
                });
            }
        }
        if self.vertex_colors.as_ref().is_some_and(|c| c.len() != count) {
            return Err(AssetError::Parse {
                line: 0,
                message: "vertex colors must have one entry per vertex".into(),
            });
        }
        let before = self.triangles.len();
        let vertices = &self.vertices;
        self.triangles.retain(|t| !is_degenerate(vertices, t));
        let dropped = before - self.triangles.len();
        if dropped > 0 {
            warn!(dropped, "dropped degenerate triangles");
        }
        Ok((self, dropped))
    }
}

fn is_degenerate(vertices: &[Point3<f64>], t: &[u32; 3]) -> bool {
    if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
        return true;
    }
    let [a, b, c] = t.map(|i| vertices[i as usize]);
    let (e1, e2) = (b - a, c - a);
    let scale = e1.norm_squared().max(e2.norm_squared());
    e1.cross(&e2).norm() <= f64::EPSILON * scale
}

#[derive(Debug, Clone, Copy)]
struct FaceVertex {
    position: usize,
    normal: Option<usize>,
}

fn resolve_index(token: &str, count: usize, line: usize) -> Result<usize, AssetError> {
    let raw: i64 = token.parse().map_err(|_| AssetError::Parse {
        line,
        message: format!("bad face index `{token}`"),
    })?;
    let resolved = if raw < 0 { count as i64 + raw } else { raw - 1 };
    if raw == 0 || resolved < 0 || resolved >= count as i64 {
        return Err(AssetError::IndexOutOfRange {
            line,
            index: raw,
            count,
        });
    }
    Ok(resolved as usize)
}

fn parse_floats(parts: &[&str], line: usize, what: &str) -> Result<Vec<f64>, AssetError> {
    parts
        .iter()
        .map(|p| {
            p.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| AssetError::Parse {
                    line,
                    message: format!("bad {what} component `{p}`"),
                })
        })
        .collect()
}

/// Parse Wavefront OBJ text. Polygons are fan-triangulated; statements other
/// than `v`, `vn` and `f` are skipped.
///
/// When every face carries normal indices the output vertices are the
/// distinct (position, normal) pairs in ascending index order, and positions
/// no face references are dropped. Otherwise vertices are the `v` records as
/// written. `v x y z r g b` records provide vertex colors.
pub fn parse_obj(text: &str) -> Result<Mesh, AssetError> {
    let mut positions: Vec<Point3<f64>> = Vec::new();
    let mut colors: Vec<Option<[f32; 3]>> = Vec::new();
    let mut normals: Vec<Vector3<f64>> = Vec::new();
    let mut faces: Vec<Vec<FaceVertex>> = Vec::new();
    let mut skipped: BTreeMap<String, usize> = BTreeMap::new();

    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut parts = content.split_whitespace();
        let Some(keyword) = parts.next() else { continue };
        let args: Vec<&str> = parts.collect();
        match keyword {
            "v" => {
                if args.len() != 3 && args.len() != 6 && args.len() != 4 {
                    return Err(AssetError::Parse {
                        line,
                        message: format!("vertex needs 3, 4 or 6 values, got {}", args.len()),
                    });
                }
                let values = parse_floats(&args[..3], line, "vertex")?;
                positions.push(Point3::new(values[0], values[1], values[2]));
                let color = if args.len() == 6 {
                    let mut rgb = [0f32; 3];
                    for (slot, token) in rgb.iter_mut().zip(&args[3..]) {
                        *slot = token.parse().map_err(|_| AssetError::Parse {
                            line,
                            message: format!("bad color component `{token}`"),
                        })?;
                    }
                    Some(rgb)
                } else {
                    None
                };
                colors.push(color);
            }
            "vn" => {
                if args.len() != 3 {
                    return Err(AssetError::Parse {
                        line,
                        message: format!("normal needs 3 values, got {}", args.len()),
                    });
                }
                let values = parse_floats(&args, line, "normal")?;
                normals.push(Vector3::new(values[0], values[1], values[2]));
            }
            "f" => {
                if args.len() < 3 {
                    return Err(AssetError::Parse {
                        line,
                        message: format!("face needs at least 3 vertices, got {}", args.len()),
                    });
                }
                let mut face = Vec::with_capacity(args.len());
                for token in args {
                    let mut fields = token.split('/');
                    let position = resolve_index(fields.next().unwrap_or(""), positions.len(), line)?;
                    let _texcoord = fields.next();
                    let normal = match fields.next() {
                        Some(t) if !t.is_empty() => Some(resolve_index(t, normals.len(), line)?),
                        _ => None,
                    };
                    face.push(FaceVertex { position, normal });
                }
                faces.push(face);
            }
            other => *skipped.entry(other.to_string()).or_default() += 1,
        }
    }
    for (keyword, count) in &skipped {
        warn!(keyword = keyword.as_str(), count, "skipped unsupported OBJ statements");
    }

    let with_normals = faces.iter().flatten().filter(|v| v.normal.is_some()).count();
    let total = faces.iter().map(Vec::len).sum::<usize>();
    let use_normals = total > 0 && with_normals == total;
    if with_normals > 0 && !use_normals {
        warn!("only some faces reference normals; ignoring normals");
    }
    let use_colors = !colors.is_empty() && colors.iter().all(Option::is_some);
    if !use_colors && colors.iter().any(Option::is_some) {
        warn!("only some vertices carry colors; ignoring vertex colors");
    }

    let mut mesh = Mesh::default();
    let mut remap: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    if use_normals {
        for v in faces.iter().flatten() {
            remap.insert((v.position, v.normal.expect("checked")), 0);
        }
        let mut unit_normals = Vec::with_capacity(remap.len());
        for (slot, ((p, nrm), index)) in remap.iter_mut().enumerate() {
            *index = slot as u32;
            mesh.vertices.push(positions[*p]);
            unit_normals.push(normals[*nrm]);
        }
        if unit_normals.iter().all(|n| n.norm() > 0.0) {
            let unit = |n: Vector3<f64>| {
                if (n.norm() - 1.0).abs() > 1e-12 {
                    n.normalize()
                } else {
                    n
                }
            };
            mesh.normals = Some(unit_normals.into_iter().map(unit).collect());
        } else {
            warn!("zero-length normal present; ignoring normals");
        }
        if use_colors {
            mesh.vertex_colors = Some(remap.keys().map(|(p, _)| colors[*p].expect("checked")).collect());
        }
    } else {
        mesh.vertices = positions;
        if use_colors {
            mesh.vertex_colors = Some(colors.into_iter().map(|c| c.expect("checked")).collect());
        }
    }

    let index_of = |v: &FaceVertex| -> u32 {
        if use_normals {
            remap[&(v.position, v.normal.expect("checked"))]
        } else {
            v.position as u32
        }
    };
    for face in &faces {
        let first = index_of(&face[0]);
        for pair in face[1..].windows(2) {
            mesh.triangles.push([first, index_of(&pair[0]), index_of(&pair[1])]);
        }
    }
    Ok(mesh.validate()?.0)
}

pub fn load_obj(path: &Path) -> Result<Mesh, AssetError> {
    let text = std::fs::read_to_string(path).map_err(|source| AssetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_obj(&text)
}

/// Serialize the subset of OBJ that [`parse_obj`] reads.
pub fn write_obj(mesh: &Mesh) -> String {
    let mut out = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.vertex_colors {
            Some(c) => {
                let [r, g, b] = c[i];
                let _ = writeln!(out, "v {} {} {} {} {} {}", v.x, v.y, v.z, r, g, b);
            }
            None => {
                let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
            }
        }
    }
    if let Some(normals) = &mesh.normals {
        for n in normals {
            let _ = writeln!(out, "vn {} {} {}", n.x, n.y, n.z);
        }
    }
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| i + 1);
        if mesh.normals.is_some() {
            let _ = writeln!(out, "f {a}//{a} {b}//{b} {c}//{c}");
        } else {
            let _ = writeln!(out, "f {a} {b} {c}");
        }
    }
    out
}

/// Center the bounding box at the origin and scale its largest side to 1.
/// No rotation is applied: assets are expected to be authored upright.
pub fn normalize_mesh(mesh: &Mesh) -> Result<Mesh, AssetError> {
    let bbox = mesh.bounding_box().ok_or(AssetError::EmptyMesh)?;
    let extent = bbox.extent();
    if !(extent.is_finite() && extent > 0.0) {
        return Err(AssetError::ZeroExtent);
    }
    let center = bbox.center();
    let scale = 1.0 / extent;
    let mut out = mesh.clone();
    for v in &mut out.vertices {
        *v = Point3::from((*v - center) * scale);
    }
    Ok(out)
}

/// Default facing direction for catalog entries that omit one.
pub const DEFAULT_FACING: [f64; 3] = [0.0, -1.0, 0.0];

#[derive(Debug, Clone)]
pub struct Asset {
    pub id: String,
    /// Synset label, e.g. `chicken`.
    pub category: String,
    /// Normalized mesh.
    pub mesh: Arc<Mesh>,
    /// Unit horizontal vector the asset "looks" along.
    pub facing: Vector3<f64>,
    pub source: PathBuf,
}

impl Asset {
    pub fn new(
        id: impl Into<String>,
        category: impl Into<String>,
        mesh: Mesh,
        facing: Vector3<f64>,
    ) -> Result<Self, AssetError> {
        let id = id.into();
        let facing = checked_facing(&id, facing)?;
        let category = category.into();
        if category.trim().is_empty() {
            return Err(AssetError::Catalog {
                line: 0,
                message: format!("asset `{id}` has an empty category"),
            });
        }
        let mesh = normalize_mesh(&mesh).map_err(|e| AssetError::AssetMesh {
            id: id.clone(),
            source: Box::new(e),
        })?;
        Ok(Self {
            id,
            category,
            mesh: Arc::new(mesh),
            facing,
            source: PathBuf::new(),
        })
    }

    /// Largest bounding-box side of the normalized mesh (1 unless degenerate).
    pub fn extent(&self) -> f64 {
        self.mesh.bounding_box().map_or(1.0, |b| b.extent())
    }
}

fn checked_facing(id: &str, facing: Vector3<f64>) -> Result<Vector3<f64>, AssetError> {
    let norm = facing.norm();
    if !(norm.is_finite() && norm > 1e-12) || facing.z.abs() > 1e-9 * norm {
        return Err(AssetError::InvalidFacing {
            id: id.to_string(),
            facing: [facing.x, facing.y, facing.z],
        });
    }
    Ok(Vector3::new(facing.x, facing.y, 0.0) / facing.xy().norm())
}

#[derive(Debug, Clone, Default)]
pub struct AssetCatalog {
    pub assets: Vec<Asset>,
    pub categories: BTreeSet<String>,
}

impl AssetCatalog {
    pub fn from_assets(assets: Vec<Asset>) -> Result<Self, AssetError> {
        let mut seen = HashSet::new();
        for a in &assets {
            if !seen.insert(a.id.clone()) {
                return Err(AssetError::DuplicateId(a.id.clone()));
            }
        }
        let categories = assets.iter().map(|a| a.category.clone()).collect();
        Ok(Self { assets, categories })
    }

    pub fn get(&self, id: &str) -> Option<&Asset> {
        self.assets.iter().find(|a| a.id == id)
    }

    pub fn len(&self) -> usize {
        self.assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assets.is_empty()
    }
}

/// Load a catalog manifest and every mesh it lists.
///
/// One record per line: `id, mesh_path, synset[, fx, fy, fz]`, separated by
/// tabs when the line contains a tab and by commas otherwise. Blank lines and
/// lines starting with `#` are ignored, as is a first record whose id field is
/// literally `id`. Mesh paths are relative to the manifest's directory. The
/// facing defaults to `(0, -1, 0)`.
pub fn load_catalog(manifest_path: &Path) -> Result<AssetCatalog, AssetError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|source| AssetError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut assets = Vec::new();
    let mut ids = HashSet::new();
    let mut first_record = true;
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let sep = if raw.contains('\t') { '\t' } else { ',' };
        let fields: Vec<&str> = trimmed.split(sep).map(str::trim).collect();
        if std::mem::take(&mut first_record) && fields[0].eq_ignore_ascii_case("id") {
            continue;
        }
        if fields.len() != 3 && fields.len() != 6 {
            return Err(AssetError::Catalog {
                line,
                message: format!("expected 3 or 6 fields, got {}", fields.len()),
            });
        }
        let (id, rel_path, synset) = (fields[0], fields[1], fields[2]);
        if id.is_empty() || synset.is_empty() {
            return Err(AssetError::Catalog {
                line,
                message: "id and synset must be non-empty".into(),
            });
        }
        if !ids.insert(id.to_string()) {
            return Err(AssetError::DuplicateId(id.to_string()));
        }
        let facing = if fields.len() == 6 {
            let v = parse_floats(&fields[3..], line, "facing").map_err(|e| AssetError::Catalog {
                line,
                message: e.to_string(),
            })?;
            Vector3::new(v[0], v[1], v[2])
        } else {
            Vector3::from(DEFAULT_FACING)
        };
        let facing = checked_facing(id, facing)?;
        let path = base.join(rel_path);
        if !path.is_file() {
            return Err(AssetError::MissingMesh {
                id: id.to_string(),
                path,
            });
        }
        let mesh = load_obj(&path).map_err(|e| AssetError::AssetMesh {
            id: id.to_string(),
            source: Box::new(e),
        })?;
        let mut asset = Asset::new(id, synset, mesh, facing)?;
        asset.source = path;
        assets.push(asset);
    }
    AssetCatalog::from_assets(assets)
}

/// Axis-aligned box with corners `min` and `max`, 8 vertices and 12 triangles
/// wound counterclockwise seen from outside.
pub fn cuboid(min: Point3<f64>, max: Point3<f64>) -> Mesh {
    let corner = |i: usize| {
        Point3::new(
            if i & 1 == 0 { min.x } else { max.x },
            if i & 2 == 0 { min.y } else { max.y },
            if i & 4 == 0 { min.z } else { max.z },
        )
    };
    let quads: [[u32; 4]; 6] = [
        [0, 2, 3, 1], // z min
        [4, 5, 7, 6], // z max
        [0, 1, 5, 4], // y min
        [2, 6, 7, 3], // y max
        [0, 4, 6, 2], // x min
        [1, 3, 7, 5], // x max
    ];
    let mut triangles = Vec::with_capacity(12);
    for [a, b, c, d] in quads {
        triangles.push([a, b, c]);
        triangles.push([a, c, d]);
    }
    Mesh {
        vertices: (0..8).map(corner).collect(),
        normals: None,
        triangles,
        vertex_colors: None,
    }
}
