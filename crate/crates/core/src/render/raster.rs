use image::Rgb;
use nalgebra::{Point3, Vector3};
use tracing::warn;

use super::{PriorSet, RenderConfig, RenderError};
use crate::asset::Mesh;
use crate::geometry::{CameraBasis, CameraIntrinsics, CameraPose};

/// Geometry closer than this along the view axis is clipped.
pub const NEAR_PLANE: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
struct ClipVertex {
    cam: Vector3<f64>,
    /// Barycentric weights with respect to the source triangle.
    bary: Vector3<f64>,
}

/// Clip a triangle against `z >= NEAR_PLANE` (Sutherland-Hodgman, one plane).
fn clip_near(tri: [ClipVertex; 3]) -> Vec<ClipVertex> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let p = tri[i];
        let q = tri[(i + 1) % 3];
        let p_in = p.cam.z >= NEAR_PLANE;
        let q_in = q.cam.z >= NEAR_PLANE;
        if p_in {
            out.push(p);
        }
        if p_in != q_in {
            let t = (NEAR_PLANE - p.cam.z) / (q.cam.z - p.cam.z);
            let mut cam = p.cam + (q.cam - p.cam) * t;
            cam.z = NEAR_PLANE;
            out.push(ClipVertex {
                cam,
                bary: p.bary + (q.bary - p.bary) * t,
            });
        }
    }
    out
}

struct Projector {
    focal: f64,
    cx: f64,
    cy: f64,
}

impl Projector {
    fn new(intrinsics: &CameraIntrinsics) -> Self {
        Self {
            focal: intrinsics.focal_px(),
            cx: intrinsics.image_width as f64 / 2.0,
            cy: intrinsics.image_height as f64 / 2.0,
        }
    }

    /// Continuous pixel coordinates; pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.
    fn project(&self, cam: &Vector3<f64>) -> (f64, f64) {
        (
            self.cx + self.focal * cam.x / cam.z,
            self.cy - self.focal * cam.y / cam.z,
        )
    }
}

/// Continuous image coordinates of a world point, or `None` behind the near plane.
pub fn project_point(
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    point: &Point3<f64>,
) -> Result<Option<(f64, f64)>, RenderError> {
    intrinsics.validate()?;
    let basis = pose.basis()?;
    let cam = basis.to_camera(&pose.position, point);
    Ok((cam.z >= NEAR_PLANE).then(|| Projector::new(intrinsics).project(&cam)))
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

struct Shading<'a> {
    mesh: &'a Mesh,
    light: Vector3<f64>,
    ambient: f64,
    base: Vector3<f64>,
}

impl Shading<'_> {
    fn shade(&self, tri: &[u32; 3], face_normal: &Vector3<f64>, bary: &Vector3<f64>, to_eye: &Vector3<f64>) -> [u8; 3] {
        let mut normal = match &self.mesh.normals {
            Some(n) => {
                let v = n[tri[0] as usize] * bary.x + n[tri[1] as usize] * bary.y + n[tri[2] as usize] * bary.z;
                if v.norm() > 1e-12 {
                    v.normalize()
                } else {
                    *face_normal
                }
            }
            None => *face_normal,
        };
        if normal.dot(to_eye) < 0.0 {
            normal = -normal;
        }
        let base = match &self.mesh.vertex_colors {
            Some(c) => {
                let col = |i: u32| {
                    let [r, g, b] = c[i as usize];
                    Vector3::new(r as f64, g as f64, b as f64)
                };
                col(tri[0]) * bary.x + col(tri[1]) * bary.y + col(tri[2]) * bary.z
            }
            None => self.base,
        };
        let lambert = normal.dot(&self.light).max(0.0);
        let channel = |b: f64| ((b * lambert + self.ambient).clamp(0.0, 1.0) * 255.0).round() as u8;
        [channel(base.x), channel(base.y), channel(base.z)]
    }
}

/// Z-buffered perspective rasterization of `mesh` seen from `pose`.
///
/// Produces depth (view-axis distance), Lambert-shaded RGB with a flat base
/// color, and the coverage mask. Canny and depth-control channels are left
/// empty. Output size comes from `intrinsics`; both faces of every triangle
/// are drawn.
pub fn rasterize(
    mesh: &Mesh,
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    config: &RenderConfig,
) -> Result<PriorSet, RenderError> {
    config.validate()?;
    intrinsics.validate()?;
    let basis: CameraBasis = pose.basis()?;
    let (width, height) = (intrinsics.image_width, intrinsics.image_height);
    let mut prior = PriorSet::empty(width, height);
    if mesh.triangles.is_empty() {
        return Ok(prior);
    }

    let cam: Vec<Vector3<f64>> = mesh
        .vertices
        .iter()
        .map(|v| basis.to_camera(&pose.position, v))
        .collect();
    if cam.iter().all(|c| c.z < NEAR_PLANE) {
        warn!("mesh lies entirely behind the camera");
        prior.behind_camera = true;
        return Ok(prior);
    }

    let projector = Projector::new(intrinsics);
    let shading = Shading {
        mesh,
        light: Vector3::from(config.light_direction).normalize(),
        ambient: config.ambient,
        base: Vector3::from(config.base_color),
    };
    let unit = [Vector3::x(), Vector3::y(), Vector3::z()];

    for tri in &mesh.triangles {
        let [a, b, c] = tri.map(|i| mesh.vertices[i as usize]);
        let face_normal = (b - a).cross(&(c - a));
        if face_normal.norm() == 0.0 {
            continue;
        }
        let face_normal = face_normal.normalize();
        let source = [0, 1, 2].map(|k| ClipVertex {
            cam: cam[tri[k] as usize],
            bary: unit[k],
        });
        let polygon = clip_near(source);
        for k in 1..polygon.len().saturating_sub(1) {
            let sub = [polygon[0], polygon[k], polygon[k + 1]];
            let screen = sub.map(|v| projector.project(&v.cam));
            let area = edge(screen[0], screen[1], screen[2]);
            if area == 0.0 || !area.is_finite() {
                continue;
            }
            let min_x = screen
                .iter()
                .map(|s| s.0)
                .fold(f64::INFINITY, f64::min)
                .floor()
                .max(0.0);
            let max_x = screen
                .iter()
                .map(|s| s.0)
                .fold(f64::NEG_INFINITY, f64::max)
                .ceil()
                .min(width as f64);
            let min_y = screen
                .iter()
                .map(|s| s.1)
                .fold(f64::INFINITY, f64::min)
                .floor()
                .max(0.0);
            let max_y = screen
                .iter()
                .map(|s| s.1)
                .fold(f64::NEG_INFINITY, f64::max)
                .ceil()
                .min(height as f64);
            if min_x >= max_x || min_y >= max_y {
                continue;
            }
            let inv_z = sub.map(|v| 1.0 / v.cam.z);
            for py in min_y as u32..max_y as u32 {
                for px in min_x as u32..max_x as u32 {
                    let p = (px as f64 + 0.5, py as f64 + 0.5);
                    let w = [
                        edge(screen[1], screen[2], p) / area,
                        edge(screen[2], screen[0], p) / area,
                        edge(screen[0], screen[1], p) / area,
                    ];
                    if w.iter().any(|v| *v < 0.0) {
                        continue;
                    }
                    let denom = w[0] * inv_z[0] + w[1] * inv_z[1] + w[2] * inv_z[2];
                    let depth = 1.0 / denom;
                    let idx = prior.index(px, py);
                    if depth.is_nan() || depth >= prior.depth[idx] {
                        continue;
                    }
                    // perspective-correct weights of the clipped vertices
                    let pw = [0, 1, 2].map(|k| w[k] * inv_z[k] * depth);
                    let bary = sub[0].bary * pw[0] + sub[1].bary * pw[1] + sub[2].bary * pw[2];
                    let world = Point3::from(a.coords * bary.x + b.coords * bary.y + c.coords * bary.z);
                    let to_eye = pose.position - world;
                    prior.depth[idx] = depth;
                    prior.mask[idx] = true;
                    prior
                        .rgb
                        .put_pixel(px, py, Rgb(shading.shade(tri, &face_normal, &bary, &to_eye)));
                }
            }
        }
    }
    Ok(prior)
}
