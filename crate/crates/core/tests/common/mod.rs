#![allow(dead_code)]

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ultima_core::asset::{cuboid, write_obj, Mesh};
use ultima_core::config::PipelineConfig;

/// Brute-force edge detector written from the textbook description:
/// replicate-padded image, explicit 3x3 windows, and hysteresis by
/// repeated sweeps until nothing changes.
pub fn reference_canny(img: &RgbImage, low: f64, high: f64, sigma: f64) -> Vec<bool> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut gray = vec![vec![0.0f64; w]; h];
    for (y, row) in gray.iter_mut().enumerate() {
        for (x, g) in row.iter_mut().enumerate() {
            let p = img.get_pixel(x as u32, y as u32);
            *g = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
        }
    }

    let kernel: Vec<f64> = if sigma <= 0.0 {
        vec![1.0]
    } else {
        let r = (3.0 * sigma).ceil() as i64;
        let raw: Vec<f64> = (-r..=r)
            .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let mut s = 0.0;
        for v in &raw {
            s += v;
        }
        raw.iter().map(|v| v / s).collect()
    };
    let r = kernel.len() / 2;
    let pad_row = |row: &Vec<f64>| -> Vec<f64> {
        let mut out = vec![row[0]; r];
        out.extend_from_slice(row);
        out.extend(std::iter::repeat_n(row[w - 1], r));
        out
    };
    let mut horiz = vec![vec![0.0; w]; h];
    for y in 0..h {
        let padded = pad_row(&gray[y]);
        for x in 0..w {
            let mut acc = 0.0;
            for k in 0..kernel.len() {
                acc += kernel[k] * padded[x + k];
            }
            horiz[y][x] = acc;
        }
    }
    let mut blur = vec![vec![0.0; w]; h];
    for x in 0..w {
        let column: Vec<f64> = (0..h).map(|y| horiz[y][x]).collect();
        let mut padded = vec![column[0]; r];
        padded.extend_from_slice(&column);
        padded.extend(std::iter::repeat_n(column[h - 1], r));
        for y in 0..h {
            let mut acc = 0.0;
            for k in 0..kernel.len() {
                acc += kernel[k] * padded[y + k];
            }
            blur[y][x] = acc;
        }
    }

    let px = |x: i64, y: i64| blur[y.clamp(0, h as i64 - 1) as usize][x.clamp(0, w as i64 - 1) as usize];
    let mut mag = vec![vec![0.0; w]; h];
    let mut dir = vec![vec![0usize; w]; h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (nw, n, ne) = (px(x - 1, y - 1), px(x, y - 1), px(x + 1, y - 1));
            let (wv, ev) = (px(x - 1, y), px(x + 1, y));
            let (sw, s, se) = (px(x - 1, y + 1), px(x, y + 1), px(x + 1, y + 1));
            let gx = (ne + 2.0 * ev + se) - (nw + 2.0 * wv + sw);
            let gy = (sw + 2.0 * s + se) - (nw + 2.0 * n + ne);
            mag[y as usize][x as usize] = gx.hypot(gy);
            let mut deg = gy.atan2(gx).to_degrees();
            if deg < 0.0 {
                deg += 180.0;
            }
            dir[y as usize][x as usize] = ((deg + 22.5) / 45.0).floor() as usize % 4;
        }
    }

    let mut thin = vec![vec![0.0; w]; h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let m = mag[y][x];
            let (a, b) = match dir[y][x] {
                0 => (mag[y][x - 1], mag[y][x + 1]),
                1 => (mag[y - 1][x - 1], mag[y + 1][x + 1]),
                2 => (mag[y - 1][x], mag[y + 1][x]),
                _ => (mag[y - 1][x + 1], mag[y + 1][x - 1]),
            };
            if m > a && m >= b {
                thin[y][x] = m;
            }
        }
    }

    let mut edge = vec![vec![false; w]; h];
    for y in 0..h {
        for x in 0..w {
            edge[y][x] = thin[y][x] > 0.0 && thin[y][x] >= high;
        }
    }
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                if edge[y][x] || !(thin[y][x] > 0.0 && thin[y][x] >= low) {
                    continue;
                }
                let near = (y.saturating_sub(1)..=(y + 1).min(h - 1))
                    .any(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| edge[yy][xx]));
                if near {
                    edge[y][x] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    edge.into_iter().flatten().collect()
}

pub fn noise_image(seed: u64, size: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(size, size, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

/// Random axis-aligned rectangles of flat color over a flat background.
pub fn blocks_image(seed: u64, size: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::from_pixel(size, size, Rgb([rng.random(), rng.random(), rng.random()]));
    for _ in 0..6 {
        let (x0, y0) = (rng.random_range(0..size), rng.random_range(0..size));
        let (x1, y1) = (rng.random_range(x0..=size), rng.random_range(y0..=size));
        let c = Rgb([rng.random(), rng.random(), rng.random()]);
        for y in y0..y1 {
            for x in x0..x1 {
                img.put_pixel(x, y, c);
            }
        }
    }
    img
}

pub fn step_image(size: u32, at: u32) -> RgbImage {
    RgbImage::from_fn(size, size, |x, _| {
        if x < at {
            Rgb([20, 20, 20])
        } else {
            Rgb([230, 230, 230])
        }
    })
}

fn shape(i: usize) -> Mesh {
    let a = 0.2 + 0.07 * i as f64;
    let b = 0.3 + 0.05 * (4 - i.min(4)) as f64;
    let c = 0.4 + 0.1 * i as f64;
    let mut mesh = cuboid(Point3::new(-a, -b, 0.0), Point3::new(a, b, c));
    // a nose on the facing side keeps every asset asymmetric
    let nose = cuboid(Point3::new(-0.05, -b - 0.15, c * 0.4), Point3::new(0.05, -b, c * 0.6));
    let base = mesh.vertices.len() as u32;
    mesh.vertices.extend(nose.vertices);
    mesh.triangles
        .extend(nose.triangles.iter().map(|t| t.map(|v| v + base)));
    mesh
}

const CATEGORIES: [&str; 5] = ["chicken", "police_van", "armchair", "teapot", "golden_retriever"];

/// Write `n` box-shaped assets and a catalog listing them. Returns the
/// catalog path.
pub fn write_catalog(dir: &Path, n: usize) -> PathBuf {
    std::fs::create_dir_all(dir.join("meshes")).unwrap();
    let mut lines = String::from("id,mesh,synset\n");
    for i in 0..n {
        let mesh = shape(i);
        let file = format!("meshes/asset{i}.obj");
        std::fs::write(dir.join(&file), write_obj(&mesh)).unwrap();
        lines.push_str(&format!("asset{i},{file},{}\n", CATEGORIES[i % CATEGORIES.len()]));
    }
    let path = dir.join("catalog.csv");
    std::fs::write(&path, lines).unwrap();
    path
}

/// Mock-backed configuration at `resolution` writing under `out`.
pub fn mock_config(catalog: &Path, out: &Path, resolution: u32) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.paths.catalog = catalog.to_path_buf();
    c.paths.output = out.to_path_buf();
    c.render.resolution = resolution;
    c.mock.llm = true;
    c.mock.diffusion = true;
    c
}

/// Every file under `dir`, relative and sorted.
pub fn files_under(dir: &Path) -> Vec<PathBuf> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    if dir.exists() {
        walk(dir, dir, &mut out);
    }
    out.sort();
    out
}
