//! Loss terms over a decomposition and a labeled sample set, and their
//! weighted total.
//!
//! The sample classification loss is the primary term; the rest regularize
//! the parametrization (offset uniqueness, Manhattan-world orthonormality
//! and alignment, volume ordering) or shape where primitives go
//! (segmentation entropy, overlap, guidance, localization).

use log::warn;
use nalgebra::DMatrix;

use crate::geometry::{sigmoid, Decomposition, Mat3, Vec3};
use crate::sampling::{Sample, SampleKind, NUM_SEG_LABELS};
use crate::{Error, Result};

/// Neighborhood size of the guidance loss.
pub const GUIDANCE_NEIGHBORS: usize = 50;
/// Rows of the entropy label matrix with less mass than this contribute 0.
pub const ENTROPY_MASS_FLOOR: f64 = 1e-8;

/// Weights of the loss terms in the total.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub sample: f64,
    pub unique: f64,
    pub ortho: f64,
    pub align: f64,
    pub volume: f64,
    pub entropy: f64,
    pub overlap: f64,
    pub guidance: f64,
    pub localization: f64,
    /// Compute the entropy loss per convex instead of per face.
    pub entropy_per_convex: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sample: 1.0,
            unique: 1e-5,
            ortho: 10.0,
            align: 1.0,
            volume: 1.0,
            entropy: 1.0,
            overlap: 0.1,
            guidance: 0.01,
            localization: 1.0,
            entropy_per_convex: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            ("sample", self.sample),
            ("unique", self.unique),
            ("ortho", self.ortho),
            ("align", self.align),
            ("volume", self.volume),
            ("entropy", self.entropy),
            ("overlap", self.overlap),
            ("guidance", self.guidance),
            ("localization", self.localization),
        ];
        for (name, v) in vals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Input(format!("loss weight {name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Unweighted value of every term plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct LossBreakdown {
    pub sample: f64,
    pub unique: f64,
    pub ortho: f64,
    pub align: f64,
    pub volume: f64,
    pub entropy: f64,
    pub overlap: f64,
    pub guidance: f64,
    pub localization: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombine the weighted total from the stored term values.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.sample * self.sample
            + w.unique * self.unique
            + w.ortho * self.ortho
            + w.align * self.align
            + w.volume * self.volume
            + w.entropy * self.entropy
            + w.overlap * self.overlap
            + w.guidance * self.guidance
            + w.localization * self.localization
    }
}

#[inline]
fn is_free_group(kind: SampleKind) -> bool {
    matches!(kind, SampleKind::Free | SampleKind::Shell)
}

#[inline]
fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Mean squared error between the union indicator and the binary label,
/// averaged separately over the free(+shell) and surface groups and
/// combined as `w_free * L_free + w_surface * L_surf`.
pub fn sample_loss(decomp: &Decomposition, samples: &[Sample], w_free: f64, w_surface: f64) -> f64 {
    let mut free_sum = 0.0;
    let mut free_n = 0usize;
    let mut surf_sum = 0.0;
    let mut surf_n = 0usize;
    for s in samples {
        let u = decomp.indicator(&s.position);
        let y = if s.inside { 1.0 } else { 0.0 };
        let e = (u - y) * (u - y);
        if is_free_group(s.kind) {
            free_sum += e;
            free_n += 1;
        } else {
            surf_sum += e;
            surf_n += 1;
        }
    }
    let free = if free_n > 0 { free_sum / free_n as f64 } else { 0.0 };
    let surf = if surf_n > 0 { surf_sum / surf_n as f64 } else { 0.0 };
    w_free * free + w_surface * surf
}

/// Offset parametrization penalty `(1/6) sum d^2 + (1/6) sum (1/d)^2`,
/// averaged over convexes. Minimum value 2 at all offsets 1; diverges as
/// any offset approaches 0.
pub fn unique_loss(decomp: &Decomposition) -> Result<f64> {
    let mut total = 0.0;
    for c in &decomp.convexes {
        let mut sq = 0.0;
        let mut inv_sq = 0.0;
        for &d in &c.offsets {
            if d <= 0.0 {
                return Err(Error::Numeric(format!("offset {d} <= 0 in unique loss")));
            }
            sq += d * d;
            inv_sq += 1.0 / (d * d);
        }
        total += sq / 6.0 + inv_sq / 6.0;
    }
    Ok(total / decomp.convexes.len() as f64)
}

/// Orthonormality penalty `(1/9) sum (I - M'M)^2`; zero exactly when the
/// Manhattan frame columns are orthonormal.
pub fn ortho_loss(m: &Mat3) -> f64 {
    let e = Mat3::identity() - m.transpose() * m;
    e.iter().map(|v| v * v).sum::<f64>() / 9.0
}

/// Normalized Manhattan frame columns; a zero-norm column is left as-is.
fn normalized_columns(m: &Mat3) -> [Vec3; 3] {
    std::array::from_fn(|j| {
        let col: Vec3 = m.column(j).into();
        let n = col.norm();
        if n > 0.0 {
            col / n
        } else {
            warn!("manhattan column {j} has zero norm; skipping normalization");
            col
        }
    })
}

/// Alignment penalty `1 - (1/6) sum N . W` per convex, averaged over
/// convexes: zero when every face normal matches its Manhattan counterpart
/// `W = [M; -M]` (columns normalized first).
pub fn align_loss(decomp: &Decomposition) -> f64 {
    let w = normalized_columns(&decomp.manhattan);
    let mut total = 0.0;
    for c in &decomp.convexes {
        let mut dot = 0.0;
        for h in 0..6 {
            let target = if h < 3 { w[h] } else { -w[h - 3] };
            dot += c.normal(h).dot(&target);
        }
        total += 1.0 - dot / 6.0;
    }
    total / decomp.convexes.len() as f64
}

/// Ordering penalty `(1/K) sum ReLU(V[1:] - V[:-1])`: zero exactly when the
/// estimated volumes are non-increasing.
pub fn volume_order_loss(decomp: &Decomposition) -> f64 {
    let vols: Vec<f64> = decomp.convexes.iter().map(|c| c.volume_estimate()).collect();
    let mut total = 0.0;
    for k in 1..vols.len() {
        total += relu(vols[k] - vols[k - 1]);
    }
    total / vols.len() as f64
}

/// Row index layout of the entropy label matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntropyMode {
    /// One row per convex face (6K rows); the printed default.
    Face,
    /// One row per convex (K rows).
    Convex,
}

/// Inside surface samples carrying a segmentation label, the population the
/// entropy loss is computed over.
#[inline]
pub(crate) fn is_entropy_sample(s: &Sample) -> bool {
    s.kind == SampleKind::SurfaceIn && s.inside && s.seg_label.is_some()
}

/// Index of the halfplane closest to `x` (largest halfplane value), ties
/// broken toward the lowest face index.
#[inline]
pub(crate) fn closest_face(planes: &[f64; 6]) -> usize {
    let mut best = 0;
    for h in 1..6 {
        if planes[h] > planes[best] {
            best = h;
        }
    }
    best
}

/// Label-mass matrix of the entropy loss: row `r`, column `l` holds the
/// summed indicator response of label-`l` samples claimed by row `r`.
pub(crate) fn entropy_mass(
    decomp: &Decomposition,
    samples: &[Sample],
    mode: EntropyMode,
) -> DMatrix<f64> {
    let k_count = decomp.convexes.len();
    let rows = match mode {
        EntropyMode::Face => 6 * k_count,
        EntropyMode::Convex => k_count,
    };
    let mut mass = DMatrix::zeros(rows, NUM_SEG_LABELS);
    for s in samples {
        if !is_entropy_sample(s) {
            continue;
        }
        let label = s.seg_label.unwrap() as usize;
        for (k, c) in decomp.convexes.iter().enumerate() {
            let planes = c.halfplanes(&s.position);
            let parts = c.lse(&planes);
            let score = sigmoid(-decomp.sigma * parts.phi);
            let row = match mode {
                EntropyMode::Face => 6 * k + closest_face(&planes),
                EntropyMode::Convex => k,
            };
            mass[(row, label)] += score;
        }
    }
    mass
}

/// Shannon entropy (natural log) of one renormalized mass row; rows below
/// the mass floor contribute zero.
pub(crate) fn row_entropy(row: &[f64]) -> f64 {
    let mu: f64 = row.iter().sum();
    if mu < ENTROPY_MASS_FLOOR {
        return 0.0;
    }
    let mut acc = 0.0;
    for &m in row {
        if m > 0.0 {
            acc += m * m.ln();
        }
    }
    mu.ln() - acc / mu
}

/// Segmentation entropy loss (Eq. layout per face by default): the summed
/// entropy of the renormalized per-row label distributions, divided by the
/// row count. Returns 0 with a warning when no labeled inside surface
/// samples exist.
pub fn entropy_loss(decomp: &Decomposition, samples: &[Sample]) -> f64 {
    entropy_loss_with_mode(decomp, samples, EntropyMode::Face)
}

pub fn entropy_loss_with_mode(
    decomp: &Decomposition,
    samples: &[Sample],
    mode: EntropyMode,
) -> f64 {
    if !samples.iter().any(is_entropy_sample) {
        warn!("entropy loss skipped: no labeled inside surface samples");
        return 0.0;
    }
    let mass = entropy_mass(decomp, samples, mode);
    let rows = mass.nrows();
    let mut total = 0.0;
    for r in 0..rows {
        let row: Vec<f64> = mass.row(r).iter().copied().collect();
        total += row_entropy(&row);
    }
    total / rows as f64
}

/// Mean over samples of `ReLU(sum_k score_k - 1)^2`: penalizes points
/// claimed by more than one convex.
pub fn overlap_loss(decomp: &Decomposition, samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for s in samples {
        let mut claimed = 0.0;
        for k in 0..decomp.convexes.len() {
            claimed += decomp.score(k, &s.position);
        }
        let over = relu(claimed - 1.0);
        total += over * over;
    }
    total / samples.len() as f64
}

/// Indices of inside-labeled samples.
pub(crate) fn inside_indices(samples: &[Sample]) -> Vec<usize> {
    samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.inside)
        .map(|(i, _)| i)
        .collect()
}

/// For each convex, the indices of its `GUIDANCE_NEIGHBORS` nearest inside
/// samples (all of them when fewer exist), measured from the translation.
pub(crate) fn guidance_neighbors(
    decomp: &Decomposition,
    samples: &[Sample],
    inside: &[usize],
) -> Vec<Vec<usize>> {
    decomp
        .convexes
        .iter()
        .map(|c| {
            let mut by_dist: Vec<(f64, usize)> = inside
                .iter()
                .map(|&i| ((samples[i].position - c.translation).norm_squared(), i))
                .collect();
            let take = GUIDANCE_NEIGHBORS.min(by_dist.len());
            if take < by_dist.len() {
                by_dist.select_nth_unstable_by(take - 1, |a, b| {
                    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
                });
                by_dist.truncate(take);
            }
            by_dist.into_iter().map(|(_, i)| i).collect()
        })
        .collect()
}

/// Mean over convexes of the mean squared hinge `ReLU(Phi)^2` over each
/// convex's nearest inside samples: zero when every convex contains its
/// neighborhood.
pub fn guidance_loss(decomp: &Decomposition, samples: &[Sample]) -> f64 {
    let inside = inside_indices(samples);
    if inside.is_empty() {
        return 0.0;
    }
    let neighbors = guidance_neighbors(decomp, samples, &inside);
    let mut total = 0.0;
    for (c, neigh) in decomp.convexes.iter().zip(&neighbors) {
        let mut acc = 0.0;
        for &i in neigh {
            let h = relu(c.sdf(&samples[i].position));
            acc += h * h;
        }
        total += acc / neigh.len() as f64;
    }
    total / decomp.convexes.len() as f64
}

/// For each convex, the index of the inside sample nearest to its
/// translation (ties toward the lowest index).
pub(crate) fn nearest_inside(
    decomp: &Decomposition,
    samples: &[Sample],
    inside: &[usize],
) -> Result<Vec<usize>> {
    if inside.is_empty() {
        return Err(Error::Input(
            "localization loss requires at least one inside sample".into(),
        ));
    }
    Ok(decomp
        .convexes
        .iter()
        .map(|c| {
            let mut best = inside[0];
            let mut best_d = f64::INFINITY;
            for &i in inside {
                let d = (samples[i].position - c.translation).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Mean over convexes of the squared distance from the translation to its
/// nearest inside sample.
pub fn localization_loss(decomp: &Decomposition, samples: &[Sample]) -> Result<f64> {
    let inside = inside_indices(samples);
    let nearest = nearest_inside(decomp, samples, &inside)?;
    let total: f64 = decomp
        .convexes
        .iter()
        .zip(&nearest)
        .map(|(c, &i)| (samples[i].position - c.translation).norm_squared())
        .sum();
    Ok(total / decomp.convexes.len() as f64)
}

/// All loss terms and their weighted sum. `w_free`/`w_surface` weight the
/// two groups inside the sample term.
pub fn total_loss(
    decomp: &Decomposition,
    samples: &[Sample],
    weights: &LossWeights,
    w_free: f64,
    w_surface: f64,
) -> Result<LossBreakdown> {
    let mode = if weights.entropy_per_convex {
        EntropyMode::Convex
    } else {
        EntropyMode::Face
    };
    let mut bd = LossBreakdown {
        sample: sample_loss(decomp, samples, w_free, w_surface),
        unique: unique_loss(decomp)?,
        ortho: ortho_loss(&decomp.manhattan),
        align: align_loss(decomp),
        volume: volume_order_loss(decomp),
        entropy: entropy_loss_with_mode(decomp, samples, mode),
        overlap: overlap_loss(decomp, samples),
        guidance: guidance_loss(decomp, samples),
        localization: localization_loss(decomp, samples)?,
        total: 0.0,
    };
    bd.total = bd.recombine(weights);
    Ok(bd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ConvexPrimitive;
    use crate::sampling::SampleKind;

    fn sample_at(p: Vec3, inside: bool, kind: SampleKind) -> Sample {
        Sample {
            position: p,
            inside,
            kind,
            seg_label: None,
        }
    }

    fn labeled_surface_in(p: Vec3, label: u8) -> Sample {
        Sample {
            position: p,
            inside: true,
            kind: SampleKind::SurfaceIn,
            seg_label: Some(label),
        }
    }

    fn cube_decomp() -> Decomposition {
        Decomposition::new(vec![ConvexPrimitive::unit_cube()])
    }

    #[test]
    fn sample_loss_saturated_correct() {
        let d = cube_decomp();
        let samples = vec![
            sample_at(Vec3::zeros(), true, SampleKind::SurfaceIn),
            sample_at(Vec3::new(3.0, 0.0, 0.0), false, SampleKind::Free),
        ];
        assert!(sample_loss(&d, &samples, 0.5, 0.5) < 1e-6);
    }

    #[test]
    fn sample_loss_half_indicator() {
        // Samples exactly on the face give U ~ 0.5, loss 0.25 for any
        // weights that sum to 1.
        let d = cube_decomp();
        let samples = vec![
            sample_at(Vec3::new(0.5, 0.0, 0.0), true, SampleKind::SurfaceIn),
            sample_at(Vec3::new(0.5, 0.1, 0.1), false, SampleKind::Free),
        ];
        for (wf, ws) in [(0.5, 0.5), (0.9, 0.1)] {
            assert!((sample_loss(&d, &samples, wf, ws) - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_loss_flipped_labels() {
        let d = cube_decomp();
        let samples = vec![
            sample_at(Vec3::zeros(), false, SampleKind::Free),
            sample_at(Vec3::new(3.0, 0.0, 0.0), true, SampleKind::SurfaceIn),
        ];
        assert!((sample_loss(&d, &samples, 0.5, 0.5) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sample_loss_empty_group() {
        let d = cube_decomp();
        let samples = vec![sample_at(Vec3::zeros(), true, SampleKind::SurfaceIn)];
        // No free samples: the free group contributes 0.
        let l = sample_loss(&d, &samples, 0.5, 0.5);
        assert!(l < 1e-6);
    }

    #[test]
    fn unique_minimum_at_one() {
        let mut d = cube_decomp();
        d.convexes[0].offsets = [1.0; 6];
        assert!((unique_loss(&d).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn unique_half_offsets() {
        let d = cube_decomp(); // all offsets 0.5
        assert!((unique_loss(&d).unwrap() - 4.25).abs() < 1e-12);
    }

    #[test]
    fn unique_diverges_at_zero() {
        let mut d = cube_decomp();
        d.convexes[0].offsets[0] = 1e-12;
        assert!(unique_loss(&d).unwrap() > 1e20);
        d.convexes[0].offsets[0] = 0.0;
        assert!(unique_loss(&d).is_err());
    }

    #[test]
    fn ortho_identity_is_zero() {
        assert_eq!(ortho_loss(&Mat3::identity()), 0.0);
    }

    #[test]
    fn ortho_scaled_identity() {
        assert!((ortho_loss(&(Mat3::identity() * 2.0)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ortho_zero_matrix() {
        assert!((ortho_loss(&Mat3::zeros()) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ortho_zero_implies_orthonormal() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let m = crate::geometry::random_rotation(&mut rng);
            assert!(ortho_loss(&m) < 1e-12);
            assert!((m.transpose() * m - Mat3::identity()).norm() < 1e-6);
        }
    }

    #[test]
    fn align_perfect() {
        let d = cube_decomp();
        assert!(align_loss(&d).abs() < 1e-12);
    }

    #[test]
    fn align_rotated_quarter_turn() {
        let mut d = cube_decomp();
        // Rotate the convex 90 degrees about z: x-face normal becomes e_y.
        d.convexes[0].axes = [Vec3::y(), -Vec3::x(), Vec3::z()];
        assert!((align_loss(&d) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn align_maximal_misalignment() {
        let mut d = cube_decomp();
        d.convexes[0].axes = [-Vec3::x(), -Vec3::y(), -Vec3::z()];
        assert!((align_loss(&d) - 2.0).abs() < 1e-12);
    }

    fn decomp_with_volumes(vols: &[f64]) -> Decomposition {
        let convexes = vols
            .iter()
            .map(|&v| {
                let half = (v / 8.0).cbrt();
                ConvexPrimitive::cuboid(Vec3::zeros(), Vec3::new(half, half, half))
            })
            .collect();
        Decomposition::new(convexes)
    }

    #[test]
    fn volume_order_sorted_descending() {
        let d = decomp_with_volumes(&[3.0, 2.0, 1.0]);
        assert_eq!(volume_order_loss(&d), 0.0);
    }

    #[test]
    fn volume_order_ascending() {
        let d = decomp_with_volumes(&[1.0, 2.0, 3.0]);
        assert!((volume_order_loss(&d) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn volume_order_single_convex() {
        let d = decomp_with_volumes(&[5.0]);
        assert_eq!(volume_order_loss(&d), 0.0);
    }

    #[test]
    fn entropy_single_label_is_zero() {
        let d = cube_decomp();
        let samples = vec![
            labeled_surface_in(Vec3::new(0.45, 0.0, 0.0), 7),
            labeled_surface_in(Vec3::new(0.45, 0.1, 0.0), 7),
            labeled_surface_in(Vec3::new(0.0, 0.45, 0.1), 7),
        ];
        assert!(entropy_loss(&d, &samples).abs() < 1e-12);
    }

    #[test]
    fn entropy_even_split_one_face() {
        // All samples closest to face 0 (+x), half label 3, half label 5:
        // one row with entropy ln(2), divided by 6K = 6.
        let d = cube_decomp();
        let samples = vec![
            labeled_surface_in(Vec3::new(0.45, 0.0, 0.0), 3),
            labeled_surface_in(Vec3::new(0.45, 0.0, 0.0), 5),
        ];
        let expect = 2.0_f64.ln() / 6.0;
        assert!((entropy_loss(&d, &samples) - expect).abs() < 1e-12);
    }

    #[test]
    fn entropy_no_labels_is_zero() {
        let d = cube_decomp();
        let samples = vec![sample_at(Vec3::zeros(), true, SampleKind::SurfaceIn)];
        assert_eq!(entropy_loss(&d, &samples), 0.0);
    }

    #[test]
    fn entropy_label_permutation_invariant() {
        let d = cube_decomp();
        let build = |a: u8, b: u8| {
            vec![
                labeled_surface_in(Vec3::new(0.45, 0.0, 0.0), a),
                labeled_surface_in(Vec3::new(0.45, 0.05, 0.0), b),
                labeled_surface_in(Vec3::new(0.0, 0.0, 0.45), a),
            ]
        };
        let l1 = entropy_loss(&d, &build(3, 5));
        let l2 = entropy_loss(&d, &build(22, 40));
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn entropy_convex_mode() {
        // In convex mode the (0.45, 0, 0) pair lands in one row of K rows.
        let d = cube_decomp();
        let samples = vec![
            labeled_surface_in(Vec3::new(0.45, 0.0, 0.0), 3),
            labeled_surface_in(Vec3::new(0.45, 0.0, 0.0), 5),
        ];
        let expect = 2.0_f64.ln();
        let got = entropy_loss_with_mode(&d, &samples, EntropyMode::Convex);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn overlap_disjoint_cubes() {
        let d = Decomposition::new(vec![
            ConvexPrimitive::cuboid(Vec3::new(-3.0, 0.0, 0.0), Vec3::new(0.5, 0.5, 0.5)),
            ConvexPrimitive::cuboid(Vec3::new(3.0, 0.0, 0.0), Vec3::new(0.5, 0.5, 0.5)),
        ]);
        let samples = vec![
            sample_at(Vec3::new(-3.0, 0.0, 0.0), true, SampleKind::SurfaceIn),
            sample_at(Vec3::new(3.0, 0.0, 0.0), true, SampleKind::SurfaceIn),
        ];
        assert!(overlap_loss(&d, &samples) < 1e-12);
    }

    #[test]
    fn overlap_coincident_cubes() {
        let d = Decomposition::new(vec![
            ConvexPrimitive::unit_cube(),
            ConvexPrimitive::unit_cube(),
        ]);
        let samples = vec![sample_at(Vec3::zeros(), true, SampleKind::SurfaceIn)];
        assert!((overlap_loss(&d, &samples) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn guidance_contained_is_zero() {
        let d = cube_decomp();
        let samples: Vec<Sample> = (0..60)
            .map(|i| {
                let f = i as f64 / 60.0 - 0.5;
                sample_at(Vec3::new(f * 0.8, 0.0, 0.0), true, SampleKind::SurfaceIn)
            })
            .collect();
        assert_eq!(guidance_loss(&d, &samples), 0.0);
    }

    #[test]
    fn guidance_far_convex() {
        // One inside sample at the origin, convex translated +10 along x:
        // Phi(origin) ~ 9.5, so the loss is ~ 90.25.
        let d = Decomposition::new(vec![ConvexPrimitive::cuboid(
            Vec3::new(10.0, 0.0, 0.0),
            Vec3::new(0.5, 0.5, 0.5),
        )]);
        let samples = vec![sample_at(Vec3::zeros(), true, SampleKind::SurfaceIn)];
        let l = guidance_loss(&d, &samples);
        assert!((l - 90.25).abs() < 0.01, "guidance {l}");
    }

    #[test]
    fn guidance_ignores_outside_samples() {
        let d = cube_decomp();
        let mut samples = vec![sample_at(Vec3::zeros(), true, SampleKind::SurfaceIn)];
        let base = guidance_loss(&d, &samples);
        samples.push(sample_at(Vec3::new(50.0, 0.0, 0.0), false, SampleKind::Shell));
        assert_eq!(guidance_loss(&d, &samples), base);
    }

    #[test]
    fn localization_at_sample_is_zero() {
        let d = cube_decomp();
        let samples = vec![sample_at(Vec3::zeros(), true, SampleKind::SurfaceIn)];
        assert_eq!(localization_loss(&d, &samples).unwrap(), 0.0);
    }

    #[test]
    fn localization_squared_distance() {
        let d = cube_decomp();
        let samples = vec![sample_at(Vec3::new(0.3, 0.0, 0.0), true, SampleKind::SurfaceIn)];
        assert!((localization_loss(&d, &samples).unwrap() - 0.09).abs() < 1e-12);
    }

    #[test]
    fn localization_ignores_outside() {
        let d = cube_decomp();
        let samples = vec![
            sample_at(Vec3::new(0.3, 0.0, 0.0), true, SampleKind::SurfaceIn),
            sample_at(Vec3::new(0.001, 0.0, 0.0), false, SampleKind::Free),
        ];
        assert!((localization_loss(&d, &samples).unwrap() - 0.09).abs() < 1e-12);
    }

    #[test]
    fn localization_requires_inside_samples() {
        let d = cube_decomp();
        let samples = vec![sample_at(Vec3::zeros(), false, SampleKind::Free)];
        assert!(localization_loss(&d, &samples).is_err());
    }

    #[test]
    fn total_sample_only() {
        let d = cube_decomp();
        let samples = vec![
            sample_at(Vec3::zeros(), true, SampleKind::SurfaceIn),
            sample_at(Vec3::new(2.0, 0.0, 0.0), false, SampleKind::Free),
        ];
        let w = LossWeights {
            sample: 1.0,
            unique: 0.0,
            ortho: 0.0,
            align: 0.0,
            volume: 0.0,
            entropy: 0.0,
            overlap: 0.0,
            guidance: 0.0,
            localization: 0.0,
            entropy_per_convex: false,
        };
        let bd = total_loss(&d, &samples, &w, 0.5, 0.5).unwrap();
        assert_eq!(bd.total, bd.sample);
    }

    #[test]
    fn total_linear_in_weights() {
        let d = cube_decomp();
        let samples = vec![
            labeled_surface_in(Vec3::new(0.45, 0.0, 0.0), 3),
            labeled_surface_in(Vec3::new(0.45, 0.0, 0.0), 5),
            sample_at(Vec3::new(2.0, 0.0, 0.0), false, SampleKind::Free),
        ];
        let w1 = LossWeights::default();
        let mut w2 = w1;
        w2.ortho *= 2.0;
        let b1 = total_loss(&d, &samples, &w1, 0.5, 0.5).unwrap();
        let b2 = total_loss(&d, &samples, &w2, 0.5, 0.5).unwrap();
        assert!((b2.total - b1.total - w1.ortho * b1.ortho).abs() < 1e-12);
        // Recombination matches the stored total exactly.
        assert_eq!(b1.recombine(&w1), b1.total);
    }

    #[test]
    fn total_matches_standalone_terms() {
        let mut d = Decomposition::new(vec![
            ConvexPrimitive::cuboid(Vec3::new(0.2, 0.0, 0.3), Vec3::new(0.3, 0.2, 0.25)),
            ConvexPrimitive::cuboid(Vec3::new(-0.4, 0.1, 0.5), Vec3::new(0.2, 0.3, 0.15)),
        ]);
        d.manhattan[(0, 1)] = 0.2;
        let samples = vec![
            labeled_surface_in(Vec3::new(0.2, 0.0, 0.35), 3),
            labeled_surface_in(Vec3::new(-0.35, 0.1, 0.5), 9),
            sample_at(Vec3::new(1.5, 0.5, 0.2), false, SampleKind::Free),
            sample_at(Vec3::new(0.2, 0.0, 0.3), true, SampleKind::Free),
            sample_at(Vec3::new(1.4, 0.0, 0.9), false, SampleKind::Shell),
        ];
        let w = LossWeights::default();
        let bd = total_loss(&d, &samples, &w, 0.7, 0.3).unwrap();
        assert_eq!(bd.sample, sample_loss(&d, &samples, 0.7, 0.3));
        assert_eq!(bd.unique, unique_loss(&d).unwrap());
        assert_eq!(bd.ortho, ortho_loss(&d.manhattan));
        assert_eq!(bd.align, align_loss(&d));
        assert_eq!(bd.volume, volume_order_loss(&d));
        assert_eq!(bd.entropy, entropy_loss(&d, &samples));
        assert_eq!(bd.overlap, overlap_loss(&d, &samples));
        assert_eq!(bd.guidance, guidance_loss(&d, &samples));
        assert_eq!(bd.localization, localization_loss(&d, &samples).unwrap());
    }

    #[test]
    fn all_terms_nonnegative() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let k = rng.random_range(1..4);
            let convexes: Vec<_> = (0..k)
                .map(|_| {
                    ConvexPrimitive::cuboid(
                        Vec3::new(
                            rng.random_range(-0.5..0.5),
                            rng.random_range(-0.5..0.5),
                            rng.random_range(0.0..0.8),
                        ),
                        Vec3::new(
                            rng.random_range(0.05..0.4),
                            rng.random_range(0.05..0.4),
                            rng.random_range(0.05..0.4),
                        ),
                    )
                })
                .collect();
            let d = Decomposition::new(convexes);
            let samples: Vec<Sample> = (0..50)
                .map(|i| {
                    let p = Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.5..1.3),
                    );
                    if i % 3 == 0 {
                        labeled_surface_in(p, rng.random_range(0..41) as u8)
                    } else {
                        sample_at(p, i % 2 == 0, SampleKind::Free)
                    }
                })
                .collect();
            let bd = total_loss(&d, &samples, &LossWeights::default(), 0.5, 0.5).unwrap();
            for v in [
                bd.sample,
                bd.unique,
                bd.ortho,
                bd.align,
                bd.volume,
                bd.entropy,
                bd.overlap,
                bd.guidance,
                bd.localization,
            ] {
                assert!(v >= 0.0, "negative loss term in {bd:?}");
            }
        }
    }
}
