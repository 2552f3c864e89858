use std::collections::VecDeque;

use image::RgbImage;

use super::{PriorSet, RenderConfig};

/// Sobel gradients of a single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub width: u32,
    pub height: u32,
    pub magnitude: Vec<f64>,
    /// Quantized direction: 0 horizontal, 1 diagonal down-right, 2 vertical,
    /// 3 diagonal down-left.
    pub sector: Vec<u8>,
}

/// Luma in byte units (0..=255).
pub fn grayscale(rgb: &RgbImage) -> Vec<f64> {
    rgb.pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Normalized 1-D Gaussian of radius `ceil(3 sigma)`. Sigma 0 gives `[1.0]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut sum = 0.0;
    for w in &raw {
        sum += w;
    }
    raw.into_iter().map(|w| w / sum).collect()
}

fn clamp_index(i: i64, n: u32) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Separable Gaussian blur (horizontal pass, then vertical) with clamped borders.
pub fn gaussian_blur(width: u32, height: u32, data: &[f64], sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (w, h) = (width as usize, height as usize);
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kw) in kernel.iter().enumerate() {
                acc += kw * data[y * w + clamp_index(x as i64 + k as i64 - r, width)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kw) in kernel.iter().enumerate() {
                acc += kw * tmp[clamp_index(y as i64 + k as i64 - r, height) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn direction_sector(gx: f64, gy: f64) -> u8 {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        0
    } else if angle < 67.5 {
        1
    } else if angle < 112.5 {
        2
    } else {
        3
    }
}

/// 3x3 Sobel with clamped borders; `y` grows downwards.
pub fn gradient_magnitude(width: u32, height: u32, data: &[f64]) -> Gradient {
    let w = width as usize;
    let at = |x: i64, y: i64| data[clamp_index(y, height) * w + clamp_index(x, width)];
    let n = data.len();
    let mut magnitude = vec![0.0; n];
    let mut sector = vec![0u8; n];
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            magnitude[i] = gx.hypot(gy);
            sector[i] = direction_sector(gx, gy);
        }
    }
    Gradient {
        width,
        height,
        magnitude,
        sector,
    }
}

/// Offsets of the neighbour preceding a pixel in raster order along each sector.
const BEFORE: [(i64, i64); 4] = [(-1, 0), (-1, -1), (0, -1), (1, -1)];

/// Thin ridges to one pixel. A pixel survives when it is strictly greater than
/// its earlier neighbour along the gradient and not smaller than the later
/// one, so plateaus of width two keep exactly one pixel. Border pixels are
/// always suppressed.
pub fn non_maximum_suppression(gradient: &Gradient) -> Vec<f64> {
    let (w, h) = (gradient.width as i64, gradient.height as i64);
    let m = &gradient.magnitude;
    let mut out = vec![0.0; m.len()];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = (y * w + x) as usize;
            let (dx, dy) = BEFORE[gradient.sector[i] as usize];
            let before = m[((y + dy) * w + x + dx) as usize];
            let after = m[((y - dy) * w + x - dx) as usize];
            if m[i] > before && m[i] >= after {
                out[i] = m[i];
            }
        }
    }
    out
}

/// Double threshold: strong pixels (>= high) seed a flood fill through
/// 8-connected weak pixels (>= low).
pub fn hysteresis(width: u32, height: u32, thinned: &[f64], low: f64, high: f64) -> Vec<bool> {
    let (w, h) = (width as i64, height as i64);
    let mut edges = vec![false; thinned.len()];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, m) in thinned.iter().enumerate() {
        if *m > 0.0 && *m >= high {
            edges[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i as i64 % w, i as i64 / w);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let j = (ny * w + nx) as usize;
                if !edges[j] && thinned[j] > 0.0 && thinned[j] >= low {
                    edges[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    edges
}

/// Full edge pipeline on an RGB image.
pub fn canny_edges(rgb: &RgbImage, low: f64, high: f64, sigma: f64) -> Vec<bool> {
    let (w, h) = rgb.dimensions();
    let gray = grayscale(rgb);
    let blurred = gaussian_blur(w, h, &gray, sigma);
    let gradient = gradient_magnitude(w, h, &blurred);
    let thinned = non_maximum_suppression(&gradient);
    hysteresis(w, h, &thinned, low, high)
}

/// Fill the `canny` channel from the prior's RGB render.
pub fn canny(mut prior: PriorSet, config: &RenderConfig) -> PriorSet {
    prior.canny = Some(canny_edges(
        &prior.rgb,
        config.canny_low,
        config.canny_high,
        config.blur_sigma,
    ));
    prior
}
