//! Convex primitives, decompositions, and the scene normalization transform.
//!
//! A primitive is the intersection of six halfplanes arranged as a
//! parallelepiped: three axis normals, each paired with its negation, and
//! six positive face offsets measured from a translation point. The signed
//! distance is the logsumexp blend of the halfplane values, so the surface
//! is smooth and differentiable everywhere.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Default logsumexp sharpness of a primitive.
pub const DEFAULT_SMOOTHNESS: f64 = 100.0;
/// Default sigmoid sharpness of the inside/outside indicator.
pub const DEFAULT_SIGMA: f64 = 50.0;
/// Offsets are clamped to this floor after every optimizer step.
pub const MIN_OFFSET: f64 = 1e-4;
/// Upper projection bound for offsets; the whole normalized scene fits well
/// inside this radius, and it contains the kick of the steep 1/d offset
/// barrier when a face degenerates.
pub const MAX_OFFSET: f64 = 4.0;
/// Smoothness is clamped to this floor after every optimizer step.
pub const MIN_SMOOTHNESS: f64 = 1e-2;

/// Numerically safe logistic function.
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// One parallelepiped-shaped convex: halfplane `h < 3` has outward normal
/// `axes[h]`, halfplane `h + 3` has normal `-axes[h]`, and face `h` sits at
/// distance `offsets[h]` from `translation` along its normal.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPrimitive {
    /// Unit outward normals of the three positive faces.
    pub axes: [Vec3; 3],
    /// Positive face distances, order `[+a0, +a1, +a2, -a0, -a1, -a2]`.
    pub offsets: [f64; 6],
    /// Reference point the offsets are measured from.
    pub translation: Vec3,
    /// Logsumexp sharpness, larger is closer to the hard max.
    pub smoothness: f64,
}

impl ConvexPrimitive {
    /// Axis-aligned box with symmetric half extents, default smoothness.
    pub fn cuboid(center: Vec3, half_extents: Vec3) -> Self {
        Self {
            axes: [Vec3::x(), Vec3::y(), Vec3::z()],
            offsets: [
                half_extents.x,
                half_extents.y,
                half_extents.z,
                half_extents.x,
                half_extents.y,
                half_extents.z,
            ],
            translation: center,
            smoothness: DEFAULT_SMOOTHNESS,
        }
    }

    /// Unit cube centered at the origin (all offsets 0.5).
    pub fn unit_cube() -> Self {
        Self::cuboid(Vec3::zeros(), Vec3::new(0.5, 0.5, 0.5))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.axes.iter().enumerate() {
            if !a.iter().all(|v| v.is_finite()) {
                return Err(Error::Input(format!("axis {i} is not finite")));
            }
            if (a.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!(
                    "axis {i} has norm {} (must be unit within 1e-9)",
                    a.norm()
                )));
            }
        }
        for (h, d) in self.offsets.iter().enumerate() {
            if !(d.is_finite() && *d > 0.0) {
                return Err(Error::Input(format!("offset {h} = {d} must be > 0")));
            }
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("translation is not finite".into()));
        }
        if !(self.smoothness.is_finite() && self.smoothness > 0.0) {
            return Err(Error::Input(format!(
                "smoothness {} must be > 0",
                self.smoothness
            )));
        }
        Ok(())
    }

    /// Outward normal of halfplane `h` in `0..6`.
    #[inline]
    pub fn normal(&self, h: usize) -> Vec3 {
        if h < 3 {
            self.axes[h]
        } else {
            -self.axes[h - 3]
        }
    }

    /// Halfplane values `H_h(x) = n_h . (x - c) - d_h`. All six are <= 0
    /// exactly when `x` lies in the hard convex.
    #[inline]
    pub fn halfplanes(&self, x: &Vec3) -> [f64; 6] {
        let r = x - self.translation;
        let p0 = self.axes[0].dot(&r);
        let p1 = self.axes[1].dot(&r);
        let p2 = self.axes[2].dot(&r);
        [
            p0 - self.offsets[0],
            p1 - self.offsets[1],
            p2 - self.offsets[2],
            -p0 - self.offsets[3],
            -p1 - self.offsets[4],
            -p2 - self.offsets[5],
        ]
    }

    /// Hard membership value `max_h H_h(x)`.
    #[inline]
    pub fn hard_max(&self, x: &Vec3) -> f64 {
        self.halfplanes(x)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Smooth signed distance `(1/delta) log sum_h exp(delta H_h)`.
    ///
    /// Upper-bounds the hard max at every point; the gap is at most
    /// `ln(6)/delta`.
    #[inline]
    pub fn sdf(&self, x: &Vec3) -> f64 {
        self.lse(&self.halfplanes(x)).phi
    }

    /// Spatial gradient of the smooth signed distance: the softmax-weighted
    /// combination of the face normals. Its norm never exceeds 1.
    pub fn sdf_gradient(&self, x: &Vec3) -> Vec3 {
        let parts = self.lse(&self.halfplanes(x));
        let mut g = Vec3::zeros();
        for h in 0..6 {
            g += self.normal(h) * parts.weights[h];
        }
        g
    }

    /// Logsumexp of the halfplane values with the softmax weights, shared by
    /// the sdf, its gradient, and the loss backward pass.
    #[inline]
    pub(crate) fn lse(&self, planes: &[f64; 6]) -> LseParts {
        let delta = self.smoothness;
        let mut m = f64::NEG_INFINITY;
        for h in planes {
            m = m.max(delta * h);
        }
        let mut sum = 0.0;
        let mut w = [0.0; 6];
        for h in 0..6 {
            let e = (delta * planes[h] - m).exp();
            w[h] = e;
            sum += e;
        }
        for wh in &mut w {
            *wh /= sum;
        }
        LseParts {
            phi: (m + sum.ln()) / delta,
            weights: w,
        }
    }

    /// Box-volume estimate `(d0+d3)(d1+d4)(d2+d5)`; exact when the axes are
    /// orthonormal.
    #[inline]
    pub fn volume_estimate(&self) -> f64 {
        (self.offsets[0] + self.offsets[3])
            * (self.offsets[1] + self.offsets[4])
            * (self.offsets[2] + self.offsets[5])
    }

    /// Split into 8 children: same axes and smoothness, offsets halved,
    /// translations at the midpoints between the parent translation and each
    /// of the 8 corner points. Child `j` takes the corner on the negative
    /// side of axis `i` when bit `i` of `j` is set.
    pub fn split(&self) -> [ConvexPrimitive; 8] {
        std::array::from_fn(|j| {
            let mut corner = self.translation;
            for i in 0..3 {
                let ext = if (j >> i) & 1 == 0 {
                    self.offsets[i]
                } else {
                    -self.offsets[i + 3]
                };
                corner += self.axes[i] * ext;
            }
            ConvexPrimitive {
                axes: self.axes,
                offsets: std::array::from_fn(|h| self.offsets[h] / 2.0),
                translation: (self.translation + corner) / 2.0,
                smoothness: self.smoothness,
            }
        })
    }
}

/// Softmax decomposition of one logsumexp evaluation.
pub(crate) struct LseParts {
    pub phi: f64,
    pub weights: [f64; 6],
}

/// Per-axis affine map between world meters and normalized scene units:
/// `normalized = (world - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneTransform {
    pub scale: Vec3,
    pub offset: Vec3,
}

impl SceneTransform {
    pub fn identity() -> Self {
        Self {
            scale: Vec3::new(1.0, 1.0, 1.0),
            offset: Vec3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Input(format!(
                "transform scale {:?} must be strictly positive",
                self.scale
            )));
        }
        if !self.offset.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("transform offset is not finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn to_norm(&self, x_world: &Vec3) -> Vec3 {
        (x_world - self.offset).component_div(&self.scale)
    }

    #[inline]
    pub fn to_world(&self, x_norm: &Vec3) -> Vec3 {
        x_norm.component_mul(&self.scale) + self.offset
    }
}

/// An ordered union of convex primitives with a shared indicator sharpness,
/// a Manhattan frame the face normals are encouraged to follow, and the
/// normalization transform the primitives are expressed in.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub convexes: Vec<ConvexPrimitive>,
    pub manhattan: Mat3,
    pub normalization: SceneTransform,
    pub sigma: f64,
}

impl Decomposition {
    pub fn new(convexes: Vec<ConvexPrimitive>) -> Self {
        Self {
            convexes,
            manhattan: Mat3::identity(),
            normalization: SceneTransform::identity(),
            sigma: DEFAULT_SIGMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.convexes.is_empty() {
            return Err(Error::Input("decomposition has no convexes".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Input(format!("sigma {} must be > 0", self.sigma)));
        }
        if !self.manhattan.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("manhattan matrix is not finite".into()));
        }
        self.normalization.validate()?;
        for c in &self.convexes {
            c.validate()?;
        }
        Ok(())
    }

    /// Per-convex classification score `sigmoid(-sigma Phi_k(x))` in [0, 1].
    #[inline]
    pub fn score(&self, k: usize, x: &Vec3) -> f64 {
        sigmoid(-self.sigma * self.convexes[k].sdf(x))
    }

    /// Union indicator: the maximum per-convex score. Near 1 well inside
    /// some convex, near 0 outside all of them.
    #[inline]
    pub fn indicator(&self, x: &Vec3) -> f64 {
        self.indicator_argmax(x).0
    }

    /// Indicator together with the index of the claiming convex (ties break
    /// to the lowest index).
    #[inline]
    pub fn indicator_argmax(&self, x: &Vec3) -> (f64, usize) {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for (k, c) in self.convexes.iter().enumerate() {
            let s = sigmoid(-self.sigma * c.sdf(x));
            if s > best {
                best = s;
                arg = k;
            }
        }
        (best, arg)
    }
}

/// Uniformly random rotation matrix (columns orthonormal, det +1).
pub fn random_rotation<R: Rng>(rng: &mut R) -> Mat3 {
    // Random unit quaternion.
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let tau = std::f64::consts::TAU;
    let (s1, c1) = (tau * u2).sin_cos();
    let (s2, c2) = (tau * u3).sin_cos();
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = nalgebra::Quaternion::new(b * c2, a * s1, a * c1, b * s2);
    nalgebra::UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}
