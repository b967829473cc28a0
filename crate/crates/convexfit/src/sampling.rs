//! Depth-map sampling: converts depth (+ optional segmentation) rasters into
//! the labeled 3D sample sets that every loss consumes.
//!
//! Three sample families are produced in normalized scene units:
//!
//! * **surface** pairs — each drawn pixel yields one inside sample just
//!   behind the surface (`Z + eps`) and one outside sample just in front
//!   (`Z - eps`);
//! * **free-space** samples — drawn along orthographic per-pixel rays,
//!   labeled inside only within a thin slab `[Z, Z + t]` behind the surface;
//! * **shell** samples — outside-labeled points in a box shell that fences
//!   the scene in.
//!
//! Generation is deterministic: every family derives its own stream seed
//! from the master seed, so identical inputs and seed reproduce the exact
//! sample stream.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{SceneTransform, Vec3};
use crate::{Error, Result};

/// Normalized target ranges the scene bounding box is mapped onto, per axis.
pub const NORM_X_RANGE: (f64, f64) = (-2.0 / 3.0, 2.0 / 3.0);
pub const NORM_Y_RANGE: (f64, f64) = (-0.5, 0.5);
pub const NORM_Z_RANGE: (f64, f64) = (0.0, 0.8);

/// Default offset added to / subtracted from normalized depth for the
/// inside / outside surface sample of a pair.
pub const DEFAULT_EPS_SURF: f64 = 0.03;
/// Default thickness of the inside slab behind the surface for free-space
/// samples.
pub const DEFAULT_FREE_THICKNESS: f64 = 0.1;
/// Default lower end of the free-space ray range along z.
pub const DEFAULT_FREE_Z_MIN: f64 = -0.1;

/// Inner box of the outside shell; the shell extends every face outward by
/// [`SHELL_THICKNESS`]. Leaves at least a 0.4 margin beyond any normalized
/// inside sample.
pub const SHELL_INNER_X: f64 = 1.2;
pub const SHELL_INNER_Y: f64 = 1.0;
pub const SHELL_INNER_Z: (f64, f64) = (-0.5, 1.3);
pub const SHELL_THICKNESS: f64 = 0.3;

/// Number of segmentation classes including the background label 0.
pub const NUM_SEG_LABELS: usize = 41;

/// Pinhole intrinsics, pixel units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Input("camera focal lengths must be > 0".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::Input(format!("cx {} outside [0, width)", self.cx)));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::Input(format!("cy {} outside [0, height)", self.cy)));
        }
        Ok(())
    }

    /// Back-project pixel `(u, v)` at depth `z` (meters) to camera-frame
    /// coordinates: `X = (u - cx) z / fx`, `Y = (v - cy) z / fy`.
    #[inline]
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }
}

/// Row-major depth raster in meters; pixels with depth <= 0 or non-finite
/// values are invalid and never sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    values: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self> {
        if values.len() != (width as usize) * (height as usize) {
            return Err(Error::Input(format!(
                "depth buffer has {} values for {}x{}",
                values.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> f32 {
        self.values[v as usize * self.width as usize + u as usize]
    }

    #[inline]
    pub fn is_valid(&self, u: u32, v: u32) -> bool {
        let z = self.get(u, v);
        z.is_finite() && z > 0.0
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }
}

/// Row-major segmentation raster with labels in `0..=40`; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct SegImage {
    pub width: u32,
    pub height: u32,
    labels: Vec<u8>,
}

impl SegImage {
    pub fn new(width: u32, height: u32, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != (width as usize) * (height as usize) {
            return Err(Error::Input(format!(
                "segmentation buffer has {} labels for {}x{}",
                labels.len(),
                width,
                height
            )));
        }
        if let Some(pos) = labels.iter().position(|&l| l as usize >= NUM_SEG_LABELS) {
            return Err(Error::Input(format!(
                "segmentation label {} at pixel {} outside 0..=40",
                labels[pos], pos
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> u8 {
        self.labels[v as usize * self.width as usize + u as usize]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// Which generator a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    SurfaceIn,
    SurfaceOut,
    Free,
    Shell,
}

/// One labeled 3D point in normalized scene units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub position: Vec3,
    pub inside: bool,
    pub kind: SampleKind,
    pub seg_label: Option<u8>,
}

/// Per-kind sample counts of a [`SampleSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SampleCounts {
    pub surface_in: usize,
    pub surface_out: usize,
    pub free: usize,
    pub shell: usize,
}

/// A labeled sample collection plus the master seed it was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub seed: u64,
}

impl SampleSet {
    pub fn counts(&self) -> SampleCounts {
        let mut c = SampleCounts::default();
        for s in &self.samples {
            match s.kind {
                SampleKind::SurfaceIn => c.surface_in += 1,
                SampleKind::SurfaceOut => c.surface_out += 1,
                SampleKind::Free => c.free += 1,
                SampleKind::Shell => c.shell += 1,
            }
        }
        c
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Normalized per-pixel point cloud: one entry per valid depth pixel.
#[derive(Debug, Clone)]
pub struct PixelCloud {
    /// Normalized scene coordinates.
    pub points: Vec<Vec3>,
    /// Source pixel `(u, v)` of each point.
    pub pixels: Vec<(u32, u32)>,
}

impl PixelCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Back-project every valid depth pixel to camera-frame world coordinates
/// (meters). Returns the points and their source pixels.
pub fn depth_to_points(depth: &DepthImage, cam: &Camera) -> Result<(Vec<Vec3>, Vec<(u32, u32)>)> {
    if depth.width != cam.width || depth.height != cam.height {
        return Err(Error::Input(format!(
            "depth is {}x{} but camera expects {}x{}",
            depth.width, depth.height, cam.width, cam.height
        )));
    }
    cam.validate()?;
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            if !depth.is_valid(u, v) {
                continue;
            }
            let z = depth.get(u, v) as f64;
            points.push(cam.back_project(u as f64, v as f64, z));
            pixels.push((u, v));
        }
    }
    Ok((points, pixels))
}

/// Fit the affine normalization that maps the bounding box of `points` onto
/// the normalized target ranges, each axis independently. A degenerate axis
/// (zero extent) keeps scale 1 and is logged.
pub fn build_transform(points: &[Vec3]) -> Result<SceneTransform> {
    if points.is_empty() {
        return Err(Error::Input("cannot build transform from no points".into()));
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let ranges = [NORM_X_RANGE, NORM_Y_RANGE, NORM_Z_RANGE];
    let mut scale = Vec3::zeros();
    let mut offset = Vec3::zeros();
    for i in 0..3 {
        let (t_lo, t_hi) = ranges[i];
        let extent = hi[i] - lo[i];
        if extent <= 0.0 {
            warn!("axis {i} has zero extent; using scale 1");
            scale[i] = 1.0;
        } else {
            scale[i] = extent / (t_hi - t_lo);
        }
        offset[i] = lo[i] - t_lo * scale[i];
    }
    Ok(SceneTransform { scale, offset })
}

/// Normalize a back-projected cloud with `transform`.
pub fn normalize_cloud(
    points_world: &[Vec3],
    pixels: &[(u32, u32)],
    transform: &SceneTransform,
) -> PixelCloud {
    PixelCloud {
        points: points_world.iter().map(|p| transform.to_norm(p)).collect(),
        pixels: pixels.to_vec(),
    }
}

/// Full preparation path from rasters to a normalized cloud: back-project,
/// fit the transform, normalize.
pub fn prepare_cloud(depth: &DepthImage, cam: &Camera) -> Result<(PixelCloud, SceneTransform)> {
    let (points, pixels) = depth_to_points(depth, cam)?;
    let transform = build_transform(&points)?;
    Ok((normalize_cloud(&points, &pixels, &transform), transform))
}

/// Normalize a cloud with an externally supplied transform (used when the
/// start point ships its own normalization).
pub fn prepare_cloud_with_transform(
    depth: &DepthImage,
    cam: &Camera,
    transform: &SceneTransform,
) -> Result<PixelCloud> {
    let (points, pixels) = depth_to_points(depth, cam)?;
    Ok(normalize_cloud(&points, &pixels, transform))
}

fn derive_seed(master: u64, stream: u64) -> u64 {
    // splitmix64 step keyed by the stream index.
    let mut z = master.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draw `n/2` pixels uniformly with replacement; each yields the inside
/// sample `(X, Y, Z + eps, 1)` and the outside sample `(X, Y, Z - eps, 0)`,
/// emitted adjacently. Segmentation labels are copied from the source pixel
/// when a map is supplied.
pub fn surface_samples(
    cloud: &PixelCloud,
    n: usize,
    eps_surf: f64,
    seg: Option<&SegImage>,
    seed: u64,
) -> Result<SampleSet> {
    if n % 2 != 0 {
        return Err(Error::Input(format!("surface sample count {n} must be even")));
    }
    if cloud.is_empty() {
        return Err(Error::Input("cannot sample an empty cloud".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n / 2 {
        let idx = rng.random_range(0..cloud.len());
        let p = cloud.points[idx];
        let (u, v) = cloud.pixels[idx];
        let seg_label = seg.map(|s| s.get(u, v));
        samples.push(Sample {
            position: Vec3::new(p.x, p.y, p.z + eps_surf),
            inside: true,
            kind: SampleKind::SurfaceIn,
            seg_label,
        });
        samples.push(Sample {
            position: Vec3::new(p.x, p.y, p.z - eps_surf),
            inside: false,
            kind: SampleKind::SurfaceOut,
            seg_label,
        });
    }
    Ok(SampleSet { samples, seed })
}

/// Draw `n` free-space samples: pixel uniform with replacement, then `z`
/// uniform along the orthographic ray `[z_min, Z + t]`. The sample is inside
/// exactly when `z` falls in the occupied slab `[Z, Z + t]`.
pub fn free_space_samples(
    cloud: &PixelCloud,
    n: usize,
    t: f64,
    z_min: f64,
    seed: u64,
) -> Result<SampleSet> {
    if cloud.is_empty() {
        return Err(Error::Input("cannot sample an empty cloud".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let idx = rng.random_range(0..cloud.len());
        let p = cloud.points[idx];
        let z_max = p.z + t;
        if z_max <= z_min {
            return Err(Error::Input(format!(
                "free-space ray range [{z_min}, {z_max}] is empty at pixel {:?}",
                cloud.pixels[idx]
            )));
        }
        let z = rng.random_range(z_min..z_max);
        let inside = z >= p.z && z <= z_max;
        samples.push(Sample {
            position: Vec3::new(p.x, p.y, z),
            inside,
            kind: SampleKind::Free,
            seg_label: None,
        });
    }
    Ok(SampleSet { samples, seed })
}

/// Inner box of the shell region.
#[inline]
pub fn shell_inner_contains(p: &Vec3) -> bool {
    p.x.abs() <= SHELL_INNER_X
        && p.y.abs() <= SHELL_INNER_Y
        && p.z >= SHELL_INNER_Z.0
        && p.z <= SHELL_INNER_Z.1
}

/// Outer box of the shell region (inner box grown by the shell thickness).
#[inline]
pub fn shell_outer_contains(p: &Vec3) -> bool {
    p.x.abs() <= SHELL_INNER_X + SHELL_THICKNESS
        && p.y.abs() <= SHELL_INNER_Y + SHELL_THICKNESS
        && p.z >= SHELL_INNER_Z.0 - SHELL_THICKNESS
        && p.z <= SHELL_INNER_Z.1 + SHELL_THICKNESS
}

/// Draw `n` outside-labeled samples uniformly over the box shell (outer box
/// minus inner box) by rejection from the outer box.
pub fn shell_samples(n: usize, seed: u64) -> SampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xo = SHELL_INNER_X + SHELL_THICKNESS;
    let yo = SHELL_INNER_Y + SHELL_THICKNESS;
    let zo = (SHELL_INNER_Z.0 - SHELL_THICKNESS, SHELL_INNER_Z.1 + SHELL_THICKNESS);
    let mut samples = Vec::with_capacity(n);
    while samples.len() < n {
        let p = Vec3::new(
            rng.random_range(-xo..xo),
            rng.random_range(-yo..yo),
            rng.random_range(zo.0..zo.1),
        );
        if shell_inner_contains(&p) {
            continue;
        }
        samples.push(Sample {
            position: p,
            inside: false,
            kind: SampleKind::Shell,
            seg_label: None,
        });
    }
    SampleSet { samples, seed }
}

/// Composition and constants of one generated training/polish sample set.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MixConfig {
    /// Free-space sample count, shell included.
    pub n_free: usize,
    /// Surface sample count (inside + outside; must be even).
    pub n_surface: usize,
    /// Fraction of the free-space budget drawn from the outside shell.
    pub shell_fraction: f64,
    pub eps_surf: f64,
    /// Thickness of the inside slab behind the surface.
    pub t: f64,
    /// Lower end of the free-space ray range.
    pub free_z_min: f64,
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            n_free: 6_000,
            n_surface: 12_000,
            shell_fraction: 0.10,
            eps_surf: DEFAULT_EPS_SURF,
            t: DEFAULT_FREE_THICKNESS,
            free_z_min: DEFAULT_FREE_Z_MIN,
            seed: 0,
        }
    }
}

impl MixConfig {
    /// Split a total sample budget at the default 1:2 free:surface ratio,
    /// rounding toward surface.
    pub fn with_total(total: usize, seed: u64) -> Self {
        let n_free = total / 3;
        Self {
            n_free,
            n_surface: total - n_free,
            seed,
            ..Self::default()
        }
    }

    /// Number of shell samples inside the free-space budget.
    pub fn shell_count(&self) -> usize {
        (self.n_free as f64 * self.shell_fraction).round() as usize
    }
}

/// Generate the composed sample set: surface pairs, then free-space, then
/// shell. Each family runs on its own seed stream derived from the master
/// seed, so the full set is reproducible from `(inputs, seed)`.
pub fn training_mix(
    cloud: &PixelCloud,
    seg: Option<&SegImage>,
    cfg: &MixConfig,
) -> Result<SampleSet> {
    if cfg.n_free == 0 || cfg.n_surface == 0 {
        return Err(Error::Input("sample counts must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.shell_fraction) {
        return Err(Error::Input(format!(
            "shell fraction {} outside [0, 1]",
            cfg.shell_fraction
        )));
    }
    let n_shell = cfg.shell_count();
    let n_free = cfg.n_free - n_shell;
    let surface = surface_samples(cloud, cfg.n_surface, cfg.eps_surf, seg, derive_seed(cfg.seed, 1))?;
    let free = free_space_samples(cloud, n_free, cfg.t, cfg.free_z_min, derive_seed(cfg.seed, 2))?;
    let shell = shell_samples(n_shell, derive_seed(cfg.seed, 3));

    let mut samples = surface.samples;
    samples.extend(free.samples);
    samples.extend(shell.samples);
    Ok(SampleSet {
        samples,
        seed: cfg.seed,
    })
}

/// Relative weight (free, surface) of the two sample-loss groups at a given
/// iteration: linear from (0.9, 0.1) at iteration 0 to (0.5, 0.5) midway,
/// constant afterward.
pub fn anneal_weights(iter: usize, total_iters: usize) -> (f64, f64) {
    let half = total_iters as f64 / 2.0;
    let frac = if half > 0.0 {
        (iter as f64 / half).min(1.0)
    } else {
        1.0
    };
    (0.9 - 0.4 * frac, 0.1 + 0.4 * frac)
}
