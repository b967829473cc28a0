//! Raymarching a decomposition to depth / normal / part-id rasters, plus
//! depth-derived normals for evaluation.
//!
//! Rays follow the pinhole model of the sampler in normalized scene space.
//! A pixel's ray is marched along the normalized z axis at a fixed step
//! until the union indicator crosses 0.5 (the smooth surface), then the
//! crossing is refined by interval halving.

use rayon::prelude::*;

use crate::geometry::{Decomposition, Vec3};
use crate::sampling::{Camera, DepthImage};
use crate::{Error, Result};

/// Part-id value of a pixel whose ray missed every convex.
pub const MISS_ID: u8 = 255;

/// Marching parameters, in normalized scene units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Fixed march step along normalized z.
    pub step: f64,
    /// March start along normalized z.
    pub z_start: f64,
    /// March end along normalized z.
    pub z_end: f64,
    /// Interval-halving refinements after the first crossing.
    pub bisect_iters: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            step: 0.005,
            z_start: -0.1,
            z_end: 1.3,
            bisect_iters: 20,
        }
    }
}

/// Three-channel unit-normal raster; an all-zero pixel is invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalImage {
    pub width: u32,
    pub height: u32,
    data: Vec<[f64; 3]>,
}

impl NormalImage {
    pub fn new(width: u32, height: u32, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(Error::Input(format!(
                "normal buffer has {} pixels for {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; (width as usize) * (height as usize)],
        }
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> [f64; 3] {
        self.data[v as usize * self.width as usize + u as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, n: [f64; 3]) {
        self.data[v as usize * self.width as usize + u as usize] = n;
    }

    #[inline]
    pub fn is_valid(&self, u: u32, v: u32) -> bool {
        let n = self.get(u, v);
        n != [0.0; 3] && n.iter().all(|c| c.is_finite())
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }
}

/// Raster of convex indices; [`MISS_ID`] marks a miss.
#[derive(Debug, Clone, PartialEq)]
pub struct IdImage {
    pub width: u32,
    pub height: u32,
    data: Vec<u8>,
}

impl IdImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(Error::Input(format!(
                "id buffer has {} pixels for {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> u8 {
        self.data[v as usize * self.width as usize + u as usize]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// Depth (world meters; 0 marks a miss), unit normals (camera frame, facing
/// the viewer), and per-pixel convex ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub depth: DepthImage,
    pub normals: NormalImage,
    pub ids: IdImage,
}

/// Normalized-space position of pixel `(u, v)` at normalized depth `z`.
#[inline]
fn ray_position(decomp: &Decomposition, cam: &Camera, u: f64, v: f64, z: f64) -> Vec3 {
    let t = &decomp.normalization;
    let world_z = z * t.scale.z + t.offset.z;
    let world = cam.back_project(u, v, world_z);
    t.to_norm(&world)
}

/// March every pixel ray and fill depth and ids; normals are left invalid
/// (see [`render_normals`]).
pub fn raymarch(decomp: &Decomposition, cam: &Camera, cfg: &RenderConfig) -> Result<RenderOutput> {
    decomp.validate()?;
    cam.validate()?;
    if decomp.convexes.len() >= MISS_ID as usize {
        return Err(Error::Input(format!(
            "cannot render {} convexes with an 8-bit id raster",
            decomp.convexes.len()
        )));
    }
    let width = cam.width;
    let height = cam.height;
    let steps = ((cfg.z_end - cfg.z_start) / cfg.step).ceil() as usize;
    let rows: Vec<(Vec<f32>, Vec<u8>)> = (0..height)
        .into_par_iter()
        .map(|v| {
            let mut depth_row = vec![0.0f32; width as usize];
            let mut id_row = vec![MISS_ID; width as usize];
            for u in 0..width {
                let pos = |z: f64| ray_position(decomp, cam, u as f64, v as f64, z);
                let mut prev_z = cfg.z_start;
                let mut hit = None;
                for i in 0..=steps {
                    let z = (cfg.z_start + i as f64 * cfg.step).min(cfg.z_end);
                    if decomp.indicator(&pos(z)) >= 0.5 {
                        hit = Some((prev_z, z, i == 0));
                        break;
                    }
                    prev_z = z;
                }
                if let Some((mut lo, mut hi, first)) = hit {
                    if !first {
                        for _ in 0..cfg.bisect_iters {
                            let mid = 0.5 * (lo + hi);
                            if decomp.indicator(&pos(mid)) >= 0.5 {
                                hi = mid;
                            } else {
                                lo = mid;
                            }
                        }
                    }
                    let z_hit = hi;
                    let (_, id) = decomp.indicator_argmax(&pos(z_hit));
                    let t = &decomp.normalization;
                    depth_row[u as usize] = (z_hit * t.scale.z + t.offset.z) as f32;
                    id_row[u as usize] = id as u8;
                }
            }
            (depth_row, id_row)
        })
        .collect();
    let mut depth = Vec::with_capacity((width * height) as usize);
    let mut ids = Vec::with_capacity((width * height) as usize);
    for (d, i) in rows {
        depth.extend(d);
        ids.extend(i);
    }
    Ok(RenderOutput {
        depth: DepthImage::new(width, height, depth)?,
        normals: NormalImage::zeros(width, height),
        ids: IdImage::new(width, height, ids)?,
    })
}

/// Fill the normals of a raymarch result: the normalized spatial gradient of
/// the hit convex's signed distance, mapped to the camera frame and flipped
/// to face the viewer.
pub fn render_normals(decomp: &Decomposition, cam: &Camera, render: &RenderOutput) -> NormalImage {
    let t = &decomp.normalization;
    let width = render.depth.width;
    let height = render.depth.height;
    let rows: Vec<Vec<[f64; 3]>> = (0..height)
        .into_par_iter()
        .map(|v| {
            let mut row = vec![[0.0f64; 3]; width as usize];
            for u in 0..width {
                let id = render.ids.get(u, v);
                if id == MISS_ID || !render.depth.is_valid(u, v) {
                    continue;
                }
                let world_z = render.depth.get(u, v) as f64;
                let world = cam.back_project(u as f64, v as f64, world_z);
                let pos = t.to_norm(&world);
                let g = decomp.convexes[id as usize].sdf_gradient(&pos);
                // Gradient of the normalized-space field in world coordinates.
                let mut n = Vec3::new(g.x / t.scale.x, g.y / t.scale.y, g.z / t.scale.z);
                let norm = n.norm();
                if norm < 1e-15 {
                    continue;
                }
                n /= norm;
                if n.dot(&world) > 0.0 {
                    n = -n;
                }
                row[u as usize] = [n.x, n.y, n.z];
            }
            row
        })
        .collect();
    let mut data = Vec::with_capacity((width * height) as usize);
    for r in rows {
        data.extend(r);
    }
    NormalImage {
        width,
        height,
        data,
    }
}

/// Raymarch and fill normals in one call.
pub fn render_all(decomp: &Decomposition, cam: &Camera, cfg: &RenderConfig) -> Result<RenderOutput> {
    let mut out = raymarch(decomp, cam, cfg)?;
    out.normals = render_normals(decomp, cam, &out);
    Ok(out)
}

/// Which image-gradient ratios form the depth-derived normal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalPairing {
    /// `(-Z_x / X_x, -Z_y / Y_y, 1)`: dimensionally consistent pairing.
    #[default]
    Consistent,
    /// `(-Z_x / Y_y, -Z_y / X_x, 1)`: swapped-denominator variant, kept for
    /// comparison.
    Printed,
}

/// Central-difference gradient of channel `f` along direction `axis`
/// (0 = u, 1 = v), falling back to one-sided differences at borders and
/// beside invalid pixels.
fn image_gradient(
    valid: &dyn Fn(i64, i64) -> bool,
    f: &dyn Fn(i64, i64) -> f64,
    u: i64,
    v: i64,
    axis: usize,
) -> Option<f64> {
    let (du, dv) = if axis == 0 { (1, 0) } else { (0, 1) };
    let plus = valid(u + du, v + dv);
    let minus = valid(u - du, v - dv);
    match (plus, minus) {
        (true, true) => Some((f(u + du, v + dv) - f(u - du, v - dv)) / 2.0),
        (true, false) => Some(f(u + du, v + dv) - f(u, v)),
        (false, true) => Some(f(u, v) - f(u - du, v - dv)),
        (false, false) => None,
    }
}

/// Per-pixel normals from a depth raster: back-project to camera-frame
/// coordinates, take image gradients, normalize the gradient-ratio normal,
/// and flip it toward the camera.
pub fn normals_from_depth(
    depth: &DepthImage,
    cam: &Camera,
    pairing: NormalPairing,
) -> Result<NormalImage> {
    if depth.width != cam.width || depth.height != cam.height {
        return Err(Error::Input(format!(
            "depth is {}x{} but camera expects {}x{}",
            depth.width, depth.height, cam.width, cam.height
        )));
    }
    let w = depth.width as i64;
    let h = depth.height as i64;
    let valid = |u: i64, v: i64| -> bool {
        u >= 0 && u < w && v >= 0 && v < h && depth.is_valid(u as u32, v as u32)
    };
    let zf = |u: i64, v: i64| depth.get(u as u32, v as u32) as f64;
    let xf = |u: i64, v: i64| (u as f64 - cam.cx) * zf(u, v) / cam.fx;
    let yf = |u: i64, v: i64| (v as f64 - cam.cy) * zf(u, v) / cam.fy;

    let mut out = NormalImage::zeros(depth.width, depth.height);
    for v in 0..h {
        for u in 0..w {
            if !valid(u, v) {
                continue;
            }
            let zx = image_gradient(&valid, &zf, u, v, 0);
            let zy = image_gradient(&valid, &zf, u, v, 1);
            let xx = image_gradient(&valid, &xf, u, v, 0);
            let yy = image_gradient(&valid, &yf, u, v, 1);
            let (Some(zx), Some(zy), Some(xx), Some(yy)) = (zx, zy, xx, yy) else {
                continue;
            };
            let (dx, dy) = match pairing {
                NormalPairing::Consistent => (xx, yy),
                NormalPairing::Printed => (yy, xx),
            };
            if dx.abs() < 1e-12 || dy.abs() < 1e-12 {
                continue;
            }
            let mut n = Vec3::new(-zx / dx, -zy / dy, 1.0);
            let norm = n.norm();
            if !norm.is_finite() || norm < 1e-15 {
                continue;
            }
            n /= norm;
            let view = cam.back_project(u as f64, v as f64, zf(u, v));
            if n.dot(&view) > 0.0 {
                n = -n;
            }
            out.set(u as u32, v as u32, [n.x, n.y, n.z]);
        }
    }
    Ok(out)
}
