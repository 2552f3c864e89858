//! Software renderer for the conditioning priors: depth, shaded RGB, coverage
//! mask, inverse-depth control image and Canny edges.

mod canny;
mod raster;

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraObjectRelation, GeometryError};

pub use canny::{
    canny, canny_edges, gaussian_blur, gaussian_kernel, gradient_magnitude, grayscale, hysteresis,
    non_maximum_suppression, Gradient,
};
pub use raster::{project_point, rasterize, NEAR_PLANE};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid render config: {0}")]
    Config(String),
    #[error("prior set is missing its {0} channel")]
    MissingChannel(&'static str),
    #[error("failed to write {path}: {message}")]
    Write { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Square output size in pixels.
    pub resolution: u32,
    /// Direction towards the light, world space.
    pub light_direction: [f64; 3],
    pub ambient: f64,
    /// Flat surface color used when the mesh has no vertex colors.
    pub base_color: [f64; 3],
    pub canny_low: f64,
    pub canny_high: f64,
    pub blur_sigma: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            resolution: 1024,
            light_direction: [-0.4, -0.4, 0.82],
            ambient: 0.25,
            base_color: [0.5, 0.5, 0.5],
            canny_low: 50.0,
            canny_high: 150.0,
            blur_sigma: 1.4,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.resolution < 16 {
            return Err(RenderError::Config(format!("resolution {} < 16", self.resolution)));
        }
        if !(self.canny_low >= 0.0 && self.canny_low < self.canny_high) {
            return Err(RenderError::Config(format!(
                "canny thresholds must satisfy 0 <= low < high, got {} / {}",
                self.canny_low, self.canny_high
            )));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(RenderError::Config(format!("ambient {} outside [0, 1]", self.ambient)));
        }
        if !(self.blur_sigma.is_finite() && self.blur_sigma >= 0.0) {
            return Err(RenderError::Config(format!("blur sigma {}", self.blur_sigma)));
        }
        let l = self.light_direction;
        if !(l.iter().all(|v| v.is_finite()) && l.iter().any(|v| *v != 0.0)) {
            return Err(RenderError::Config("light direction must be non-zero".into()));
        }
        Ok(())
    }
}

/// Rendered priors for one (asset, relation) pair.
///
/// `depth` holds the view-axis distance per pixel and `f64::INFINITY` where
/// nothing was hit; it is finite exactly where `mask` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f64>,
    pub rgb: RgbImage,
    pub mask: Vec<bool>,
    pub canny: Option<Vec<bool>>,
    pub depth_control: Option<GrayImage>,
    /// Set when the whole mesh lay behind the near plane.
    pub behind_camera: bool,
}

impl PriorSet {
    pub fn empty(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            depth: vec![f64::INFINITY; n],
            rgb: RgbImage::new(width, height),
            mask: vec![false; n],
            canny: None,
            depth_control: None,
            behind_camera: false,
        }
    }

    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn depth_at(&self, x: u32, y: u32) -> Option<f64> {
        let d = self.depth[self.index(x, y)];
        d.is_finite().then_some(d)
    }

    pub fn coverage(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn mask_image(&self) -> GrayImage {
        bool_image(self.width, self.height, &self.mask)
    }

    pub fn canny_image(&self) -> Option<GrayImage> {
        self.canny.as_ref().map(|c| bool_image(self.width, self.height, c))
    }
}

fn bool_image(width: u32, height: u32, bits: &[bool]) -> GrayImage {
    GrayImage::from_fn(width, height, |x, y| {
        Luma([if bits[y as usize * width as usize + x as usize] {
            255
        } else {
            0
        }])
    })
}

/// Fill `depth_control` with min-max normalized inverse depth: the nearest
/// masked pixel is 255, the farthest 1, background 0. A constant-depth object
/// maps to 255 everywhere.
pub fn encode_depth_control(mut prior: PriorSet) -> PriorSet {
    let inverse: Vec<f64> = prior.depth.iter().filter(|d| d.is_finite()).map(|d| 1.0 / d).collect();
    let lo = inverse.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = inverse.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = GrayImage::new(prior.width, prior.height);
    for (i, px) in out.pixels_mut().enumerate() {
        let d = prior.depth[i];
        if !d.is_finite() {
            continue;
        }
        let value = if hi > lo {
            1.0 + (254.0 * (1.0 / d - lo) / (hi - lo)).round()
        } else {
            255.0
        };
        px.0[0] = value.clamp(1.0, 255.0) as u8;
    }
    prior.depth_control = Some(out);
    prior
}

/// Relative paths of the PNG files written for one prior set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorPaths {
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub mask: PathBuf,
    pub canny: PathBuf,
}

/// `<asset_id>/<phi_deg>_<theta_deg>_<dist>` with three decimals each.
pub fn prior_stem(asset_id: &str, beta: &CameraObjectRelation) -> PathBuf {
    Path::new(asset_id).join(format!(
        "{:.3}_{:.3}_{:.3}",
        beta.phi_deg(),
        beta.theta_deg(),
        beta.dist_rel()
    ))
}

/// Write rgb, depth control, mask and canny PNGs under `root`. Returns paths
/// relative to `root`.
pub fn write_prior_pngs(
    prior: &PriorSet,
    root: &Path,
    asset_id: &str,
    beta: &CameraObjectRelation,
) -> Result<PriorPaths, RenderError> {
    let depth = prior
        .depth_control
        .as_ref()
        .ok_or(RenderError::MissingChannel("depth_control"))?;
    let canny = prior.canny_image().ok_or(RenderError::MissingChannel("canny"))?;
    let stem = prior_stem(asset_id, beta);
    let name = |kind: &str| {
        let mut p = stem.clone().into_os_string();
        p.push(format!("_{kind}.png"));
        PathBuf::from(p)
    };
    let paths = PriorPaths {
        rgb: name("rgb"),
        depth: name("depth"),
        mask: name("mask"),
        canny: name("canny"),
    };
    let dir = root
        .join(&stem)
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| root.to_path_buf());
    std::fs::create_dir_all(&dir).map_err(|e| RenderError::Write {
        path: dir.clone(),
        message: e.to_string(),
    })?;
    save(&prior.rgb, &root.join(&paths.rgb))?;
    save(depth, &root.join(&paths.depth))?;
    save(&prior.mask_image(), &root.join(&paths.mask))?;
    save(&canny, &root.join(&paths.canny))?;
    Ok(paths)
}

fn save<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<(), RenderError>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| RenderError::Write {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
