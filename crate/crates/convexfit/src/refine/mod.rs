//! Polishing: gradient descent on the total loss from a given start point,
//! backward-selection pruning, convex splitting, and start-point generators.

mod grad;

pub use grad::{
    analytic_gradient, apply_params, central_diff, flatten_params, numeric_gradient, param_count,
    ConvexGrad, GradEval, ParamGrad, PARAMS_PER_CONVEX,
};

use std::time::{Duration, Instant};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{
    random_rotation, ConvexPrimitive, Decomposition, Mat3, Vec3, DEFAULT_SIGMA, MAX_OFFSET,
    MIN_OFFSET, MIN_SMOOTHNESS,
};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::sampling::{
    anneal_weights, Sample, SampleKind, SHELL_INNER_X, SHELL_INNER_Y, SHELL_INNER_Z,
};
use crate::{Error, Result};

/// Descent and pruning configuration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PolishConfig {
    pub iters: usize,
    pub learning_rate: f64,
    /// Total sample budget when the caller generates the mix from this
    /// config.
    pub n_samples: usize,
    pub prune_epsilon: f64,
    /// Number of 8-way split rounds applied before polishing.
    pub splits: usize,
    pub seed: u64,
    pub optimize_manhattan: bool,
    /// Run backward selection before and after the descent.
    pub prune: bool,
    /// Fixed sample-group weights, used when `anneal` is off.
    pub w_free: f64,
    pub w_surface: f64,
    /// Drive the group weights with the annealing schedule instead.
    pub anneal: bool,
}

impl Default for PolishConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            learning_rate: 0.01,
            n_samples: 250_000,
            prune_epsilon: 0.001,
            splits: 0,
            seed: 0,
            optimize_manhattan: true,
            prune: true,
            w_free: 0.5,
            w_surface: 0.5,
            anneal: false,
        }
    }
}

impl PolishConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Input("iters must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Input("learning rate must be positive".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Input("sample count must be positive".into()));
        }
        if !(self.prune_epsilon.is_finite() && self.prune_epsilon >= 0.0)
            && self.prune_epsilon != f64::INFINITY
        {
            return Err(Error::Input("prune epsilon must be >= 0".into()));
        }
        Ok(())
    }

    /// Sample-group weights at a given iteration.
    pub fn group_weights(&self, iter: usize) -> (f64, f64) {
        if self.anneal {
            anneal_weights(iter, self.iters)
        } else {
            (self.w_free, self.w_surface)
        }
    }
}

/// One backward-selection removal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneEvent {
    /// Position of the removed convex at removal time.
    pub index: usize,
    /// Total-loss change caused by the removal (may be negative).
    pub loss_delta: f64,
}

/// Loss history of a polish/pipeline run. `rows[i]` is the breakdown before
/// step `i`; the last row is the final state.
#[derive(Debug, Clone, Default)]
pub struct FitTrace {
    pub rows: Vec<LossBreakdown>,
    pub prune_events: Vec<PruneEvent>,
    pub wall: Duration,
    /// Set when the descent hit a non-finite loss and returned the last
    /// finite state.
    pub aborted: Option<String>,
}

impl FitTrace {
    pub fn initial_total(&self) -> f64 {
        self.rows.first().map(|r| r.total).unwrap_or(f64::NAN)
    }

    pub fn final_total(&self) -> f64 {
        self.rows.last().map(|r| r.total).unwrap_or(f64::NAN)
    }

    /// CSV export, one row per recorded iteration.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "iter,total,sample,unique,ortho,align,volume,entropy,overlap,guidance,localization\n",
        );
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                i,
                r.total,
                r.sample,
                r.unique,
                r.ortho,
                r.align,
                r.volume,
                r.entropy,
                r.overlap,
                r.guidance,
                r.localization
            ));
        }
        out
    }
}

fn apply_step(d: &mut Decomposition, g: &ParamGrad, lr: f64, optimize_manhattan: bool) {
    for (c, gc) in d.convexes.iter_mut().zip(&g.convexes) {
        for i in 0..3 {
            c.axes[i] -= gc.axes[i] * lr;
            let n = c.axes[i].norm();
            if n > 1e-12 {
                c.axes[i] /= n;
            } else {
                warn!("axis collapsed during step; leaving unnormalized");
            }
        }
        for h in 0..6 {
            c.offsets[h] = (c.offsets[h] - lr * gc.offsets[h]).clamp(MIN_OFFSET, MAX_OFFSET);
        }
        c.translation -= gc.translation * lr;
        c.smoothness = (c.smoothness - lr * gc.smoothness).max(MIN_SMOOTHNESS);
    }
    if optimize_manhattan {
        d.manhattan -= g.manhattan * lr;
    }
}

/// Plain fixed-step gradient descent on the total loss. After every step the
/// axes are re-normalized and the offsets and smoothness clamped to their
/// floors. On a non-finite loss the descent aborts and returns the last
/// finite state, with the diagnostic recorded on the trace.
pub fn polish(
    decomp: &Decomposition,
    samples: &[Sample],
    weights: &LossWeights,
    cfg: &PolishConfig,
) -> Result<(Decomposition, FitTrace)> {
    decomp.validate()?;
    weights.validate()?;
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("polish requires a nonempty sample set".into()));
    }
    let start = Instant::now();
    let mut d = decomp.clone();
    let mut last_good = d.clone();
    let mut rows = Vec::with_capacity(cfg.iters + 1);
    let mut aborted = None;
    for iter in 0..=cfg.iters {
        let (wf, ws) = cfg.group_weights(iter.min(cfg.iters));
        let ev = analytic_gradient(&d, samples, weights, wf, ws)?;
        if !ev.breakdown.total.is_finite() {
            let msg = format!(
                "non-finite loss {} at iteration {iter}; returning last finite state",
                ev.breakdown.total
            );
            log::error!("{msg}");
            aborted = Some(msg);
            d = last_good;
            break;
        }
        rows.push(ev.breakdown);
        if iter == cfg.iters {
            break;
        }
        last_good = d.clone();
        apply_step(&mut d, &ev.grad, cfg.learning_rate, cfg.optimize_manhattan);
    }
    Ok((
        d,
        FitTrace {
            rows,
            prune_events: Vec::new(),
            wall: start.elapsed(),
            aborted,
        },
    ))
}

/// Backward selection: walk the convexes in index order, evaluate the total
/// loss with each removed, and remove it when the loss increase stays within
/// `eps` (the baseline is re-evaluated after every removal). Never removes
/// the last convex.
pub fn prune(
    decomp: &Decomposition,
    samples: &[Sample],
    weights: &LossWeights,
    eps: f64,
    w_free: f64,
    w_surface: f64,
) -> Result<(Decomposition, Vec<PruneEvent>)> {
    let mut d = decomp.clone();
    let mut events = Vec::new();
    let mut baseline = losses::total_loss(&d, samples, weights, w_free, w_surface)?.total;
    let mut i = 0;
    while i < d.convexes.len() && d.convexes.len() > 1 {
        let mut candidate = d.clone();
        candidate.convexes.remove(i);
        let cand = losses::total_loss(&candidate, samples, weights, w_free, w_surface)?.total;
        let delta = cand - baseline;
        if delta <= eps {
            events.push(PruneEvent {
                index: i,
                loss_delta: delta,
            });
            d = candidate;
            baseline = cand;
        } else {
            i += 1;
        }
    }
    Ok((d, events))
}

/// Split every convex into its 8 children; children of convex 0 come first.
pub fn split_all(decomp: &Decomposition) -> Decomposition {
    Decomposition {
        convexes: decomp.convexes.iter().flat_map(|c| c.split()).collect(),
        ..decomp.clone()
    }
}

/// Full refinement: prune, split `cfg.splits` times, polish, prune again.
/// Pruning stages run only when `cfg.prune` is set.
pub fn pipeline(
    decomp: &Decomposition,
    samples: &[Sample],
    weights: &LossWeights,
    cfg: &PolishConfig,
) -> Result<(Decomposition, FitTrace)> {
    let start = Instant::now();
    let (wf, ws) = cfg.group_weights(cfg.iters);
    let mut d = decomp.clone();
    let mut events = Vec::new();
    if cfg.prune {
        let (pruned, e) = prune(&d, samples, weights, cfg.prune_epsilon, wf, ws)?;
        d = pruned;
        events.extend(e);
    }
    for _ in 0..cfg.splits {
        d = split_all(&d);
    }
    let (polished, mut trace) = polish(&d, samples, weights, cfg)?;
    d = polished;
    if cfg.prune {
        let (pruned, e) = prune(&d, samples, weights, cfg.prune_epsilon, wf, ws)?;
        d = pruned;
        events.extend(e);
    }
    trace.prune_events = events;
    trace.wall = start.elapsed();
    Ok((d, trace))
}

/// Random start point: identity axes, offsets uniform in [0.05, 0.2],
/// translations uniform over the inner sample box.
pub fn random_init(k: usize, seed: u64) -> Result<Decomposition> {
    if k == 0 {
        return Err(Error::Input("k must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let convexes = (0..k)
        .map(|_| {
            let translation = Vec3::new(
                rng.random_range(-SHELL_INNER_X..SHELL_INNER_X),
                rng.random_range(-SHELL_INNER_Y..SHELL_INNER_Y),
                rng.random_range(SHELL_INNER_Z.0..SHELL_INNER_Z.1),
            );
            let offsets: [f64; 6] = std::array::from_fn(|_| rng.random_range(0.05..0.2));
            ConvexPrimitive {
                axes: [Vec3::x(), Vec3::y(), Vec3::z()],
                offsets,
                translation,
                smoothness: crate::geometry::DEFAULT_SMOOTHNESS,
            }
        })
        .collect();
    Ok(Decomposition::new(convexes))
}

/// Deterministic k-means over a point set: the first center is the point
/// nearest the centroid, the rest come from farthest-point selection, then
/// 20 Lloyd iterations. Ties always break toward the lowest index.
fn kmeans_centroids(points: &[Vec3], k: usize) -> Vec<Vec3> {
    let n = points.len();
    let mut centers: Vec<Vec3> = Vec::with_capacity(k);
    if n < k {
        warn!("k-means asked for {k} centroids from {n} points; duplicating");
        for i in 0..k {
            centers.push(points[i % n]);
        }
        return centers;
    }
    let mean = points.iter().sum::<Vec3>() / n as f64;
    let first = (0..n)
        .min_by(|&a, &b| {
            (points[a] - mean)
                .norm_squared()
                .total_cmp(&(points[b] - mean).norm_squared())
                .then(a.cmp(&b))
        })
        .unwrap();
    centers.push(points[first]);
    let mut min_d: Vec<f64> = points
        .iter()
        .map(|p| (p - centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let far = (0..n)
            .max_by(|&a, &b| min_d[a].total_cmp(&min_d[b]).then(b.cmp(&a)))
            .unwrap();
        centers.push(points[far]);
        for (i, p) in points.iter().enumerate() {
            min_d[i] = min_d[i].min((p - centers.last().unwrap()).norm_squared());
        }
    }
    for _ in 0..20 {
        let mut sums = vec![Vec3::zeros(); k];
        let mut counts = vec![0usize; k];
        for p in points {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = (p - c).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            sums[best] += p;
            counts[best] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j] / counts[j] as f64;
            }
        }
    }
    centers
}

/// Clustered start point: translations at the k-means centroids of the
/// inside surface samples, identity axes, offsets 0.1.
pub fn grid_init(k: usize, samples: &[Sample]) -> Result<Decomposition> {
    if k == 0 {
        return Err(Error::Input("k must be >= 1".into()));
    }
    let points: Vec<Vec3> = samples
        .iter()
        .filter(|s| s.kind == SampleKind::SurfaceIn)
        .map(|s| s.position)
        .collect();
    if points.is_empty() {
        return Err(Error::Input(
            "grid init requires inside surface samples".into(),
        ));
    }
    let centers = kmeans_centroids(&points, k);
    let convexes = centers
        .into_iter()
        .map(|c| ConvexPrimitive {
            axes: [Vec3::x(), Vec3::y(), Vec3::z()],
            offsets: [0.1; 6],
            translation: c,
            smoothness: crate::geometry::DEFAULT_SMOOTHNESS,
        })
        .collect();
    Ok(Decomposition::new(convexes))
}

/// Add Gaussian noise to translations and offsets, re-projecting the offset
/// floor. Axes and the Manhattan frame are untouched.
pub fn perturb(
    decomp: &Decomposition,
    translation_noise: f64,
    offset_noise: f64,
    seed: u64,
) -> Decomposition {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = decomp.clone();
    for c in &mut d.convexes {
        if translation_noise > 0.0 {
            let n = Normal::new(0.0, translation_noise).unwrap();
            for i in 0..3 {
                c.translation[i] += n.sample(&mut rng);
            }
        }
        if offset_noise > 0.0 {
            let n = Normal::new(0.0, offset_noise).unwrap();
            for h in 0..6 {
                c.offsets[h] = (c.offsets[h] + n.sample(&mut rng)).max(MIN_OFFSET);
            }
        }
    }
    d
}

/// Configuration of the analytic-vs-numeric gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub max_convexes: usize,
    pub n_samples: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 7,
            max_convexes: 4,
            n_samples: 1000,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub instances: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub failures: usize,
    pub elapsed: Duration,
}

fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_instance(rng: &mut ChaCha8Rng, max_convexes: usize, n_samples: usize) -> (Decomposition, Vec<Sample>) {
    let k = rng.random_range(1..=max_convexes);
    let convexes: Vec<ConvexPrimitive> = (0..k)
        .map(|_| {
            let rot = random_rotation(rng);
            ConvexPrimitive {
                axes: [
                    rot.column(0).into(),
                    rot.column(1).into(),
                    rot.column(2).into(),
                ],
                offsets: std::array::from_fn(|_| rng.random_range(0.1..0.35)),
                translation: Vec3::new(
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.3..0.9),
                ),
                smoothness: rng.random_range(40.0..120.0),
            }
        })
        .collect();
    let mut d = Decomposition::new(convexes);
    d.sigma = DEFAULT_SIGMA;
    let noise = Mat3::from_fn(|_, _| rng.random_range(-0.1..0.1));
    d.manhattan = random_rotation(rng) + noise;

    // Surface pairs near face interiors of the convexes, labeled; the rest
    // scattered free and shell samples.
    let n_pairs = n_samples * 3 / 10 / 2;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_pairs {
        let ci = rng.random_range(0..k);
        let c = &d.convexes[ci];
        let h = rng.random_range(0..6);
        let normal = c.normal(h);
        let (t1, t2) = ((h + 1) % 3, (h + 2) % 3);
        let e1 = c.offsets[t1].min(c.offsets[t1 + 3]);
        let e2 = c.offsets[t2].min(c.offsets[t2 + 3]);
        let face_point = c.translation
            + normal * c.offsets[h]
            + c.axes[t1] * rng.random_range(-0.55 * e1..0.55 * e1)
            + c.axes[t2] * rng.random_range(-0.55 * e2..0.55 * e2);
        let eps = rng.random_range(0.01..0.04);
        let label = Some(rng.random_range(0..41) as u8);
        samples.push(Sample {
            position: face_point - normal * eps,
            inside: true,
            kind: SampleKind::SurfaceIn,
            seg_label: label,
        });
        samples.push(Sample {
            position: face_point + normal * eps,
            inside: false,
            kind: SampleKind::SurfaceOut,
            seg_label: label,
        });
    }
    let n_free = n_samples * 5 / 10;
    for _ in 0..n_free {
        samples.push(Sample {
            position: Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.6..1.2),
            ),
            inside: rng.random_bool(0.5),
            kind: SampleKind::Free,
            seg_label: None,
        });
    }
    while samples.len() < n_samples {
        samples.push(Sample {
            position: Vec3::new(
                rng.random_range(1.2..1.5),
                rng.random_range(-1.3..1.3),
                rng.random_range(-0.8..1.6),
            ),
            inside: false,
            kind: SampleKind::Shell,
            seg_label: None,
        });
    }
    (d, samples)
}

/// Reject instances that sit too close to a non-differentiable point of the
/// loss (argmax ties, ReLU kinks, neighborhood-membership ties), where
/// central differences are not a valid oracle.
fn instance_is_differentiable(d: &Decomposition, samples: &[Sample]) -> bool {
    let k = d.convexes.len();
    let sigma = d.sigma;
    let mut phis = vec![0.0; k];
    for s in samples {
        for (ki, c) in d.convexes.iter().enumerate() {
            phis[ki] = c.sdf(&s.position);
        }
        let mut sorted = phis.clone();
        sorted.sort_by(f64::total_cmp);
        if k > 1 && (sorted[1] - sorted[0]) < 1e-3 && sigma * sorted[0].abs() < 35.0 {
            return false;
        }
        let claimed: f64 = phis.iter().map(|&p| crate::geometry::sigmoid(-sigma * p)).sum();
        if (claimed - 1.0).abs() < 1e-4 {
            return false;
        }
        if losses::is_entropy_sample(s) {
            for c in &d.convexes {
                let planes = c.halfplanes(&s.position);
                let mut hs = planes;
                hs.sort_by(f64::total_cmp);
                if hs[5] - hs[4] < 1e-3 {
                    return false;
                }
            }
        }
    }
    // Volume ordering kinks.
    let vols: Vec<f64> = d.convexes.iter().map(|c| c.volume_estimate()).collect();
    for i in 1..k {
        if (vols[i] - vols[i - 1]).abs() < 1e-6 {
            return false;
        }
    }
    // Guidance neighborhood ties and hinge kinks; localization ties.
    let inside = losses::inside_indices(samples);
    if inside.is_empty() {
        return false;
    }
    for c in &d.convexes {
        let mut dists: Vec<f64> = inside
            .iter()
            .map(|&i| (samples[i].position - c.translation).norm_squared())
            .collect();
        dists.sort_by(f64::total_cmp);
        if dists.len() > losses::GUIDANCE_NEIGHBORS {
            let cut = losses::GUIDANCE_NEIGHBORS;
            if dists[cut] - dists[cut - 1] < 1e-6 {
                return false;
            }
        }
        if dists.len() > 1 && dists[1] - dists[0] < 1e-6 {
            return false;
        }
        let take = losses::GUIDANCE_NEIGHBORS.min(inside.len());
        let mut by_dist: Vec<(f64, usize)> = inside
            .iter()
            .map(|&i| ((samples[i].position - c.translation).norm_squared(), i))
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in by_dist.iter().take(take) {
            if c.sdf(&samples[i].position).abs() < 1e-6 {
                return false;
            }
        }
    }
    true
}

/// Compare the analytic gradient against central differences on random
/// instances; the oracle check of the whole gradient machinery.
pub fn gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let start = Instant::now();
    let weights = LossWeights {
        // All terms enabled with order-one weights so every code path is
        // exercised by the comparison.
        sample: 1.0,
        unique: 0.01,
        ortho: 10.0,
        align: 1.0,
        volume: 1.0,
        entropy: 1.0,
        overlap: 0.1,
        guidance: 0.01,
        localization: 1.0,
        entropy_per_convex: false,
    };
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut failures = 0;
    for inst in 0..cfg.instances {
        let mut attempt = 0;
        let (d, samples) = loop {
            let seed = derive_seed(cfg.seed, (inst as u64) * 1000 + attempt);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (d, samples) = random_instance(&mut rng, cfg.max_convexes, cfg.n_samples);
            if instance_is_differentiable(&d, &samples) {
                break (d, samples);
            }
            attempt += 1;
            if attempt > 100 {
                return Err(Error::Numeric(
                    "could not generate a differentiable instance".into(),
                ));
            }
        };
        let analytic = analytic_gradient(&d, &samples, &weights, 0.6, 0.4)?
            .grad
            .flatten();
        let numeric = numeric_gradient(&d, &samples, &weights, 0.6, 0.4, cfg.step)?;
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for (a, n) in analytic.iter().zip(&numeric) {
            diff2 += (a - n) * (a - n);
            norm2 += n * n;
        }
        let rel = diff2.sqrt() / norm2.sqrt().max(1e-12);
        max_rel = max_rel.max(rel);
        sum_rel += rel;
        if rel >= cfg.tolerance {
            failures += 1;
            log::warn!("gradcheck instance {inst}: relative L2 error {rel:.3e}");
        }
    }
    Ok(GradCheckReport {
        instances: cfg.instances,
        max_rel_error: max_rel,
        mean_rel_error: sum_rel / cfg.instances as f64,
        failures,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::total_loss;

    /// Free/surface samples consistent with the hard membership of a ground
    /// truth decomposition, mimicking the depth sampler on a synthetic
    /// scene.
    fn synthetic_samples(gt: &Decomposition, n_pairs: usize, n_free: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        for _ in 0..n_pairs {
            let ci = rng.random_range(0..gt.convexes.len());
            let c = &gt.convexes[ci];
            let h = rng.random_range(0..6);
            let normal = c.normal(h);
            let (t1, t2) = ((h + 1) % 3, (h + 2) % 3);
            let e1 = c.offsets[t1].min(c.offsets[t1 + 3]);
            let e2 = c.offsets[t2].min(c.offsets[t2 + 3]);
            let p = c.translation
                + normal * c.offsets[h]
                + c.axes[t1] * rng.random_range(-0.8 * e1..0.8 * e1)
                + c.axes[t2] * rng.random_range(-0.8 * e2..0.8 * e2);
            samples.push(Sample {
                position: p - normal * 0.03,
                inside: true,
                kind: SampleKind::SurfaceIn,
                seg_label: None,
            });
            samples.push(Sample {
                position: p + normal * 0.03,
                inside: false,
                kind: SampleKind::SurfaceOut,
                seg_label: None,
            });
        }
        for _ in 0..n_free {
            let p = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.5..1.3),
            );
            let inside = gt.convexes.iter().any(|c| c.hard_max(&p) <= 0.0);
            samples.push(Sample {
                position: p,
                inside,
                kind: SampleKind::Free,
                seg_label: None,
            });
        }
        samples
    }

    fn three_box_gt() -> Decomposition {
        Decomposition::new(vec![
            ConvexPrimitive::cuboid(Vec3::new(-0.5, 0.0, 0.3), Vec3::new(0.25, 0.2, 0.2)),
            ConvexPrimitive::cuboid(Vec3::new(0.4, 0.1, 0.5), Vec3::new(0.2, 0.25, 0.15)),
            ConvexPrimitive::cuboid(Vec3::new(0.0, -0.5, 0.6), Vec3::new(0.15, 0.15, 0.15)),
        ])
    }

    #[test]
    fn central_diff_quadratic() {
        let p = vec![0.3, -1.2, 2.0, 0.0];
        let grad = central_diff(|x| Ok(x.iter().map(|v| v * v).sum()), &p, 1e-5).unwrap();
        for (g, v) in grad.iter().zip(&p) {
            assert!((g - 2.0 * v).abs() < 1e-8);
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let d = three_box_gt();
        let p = flatten_params(&d);
        assert_eq!(p.len(), param_count(&d));
        let mut d2 = d.clone();
        apply_params(&mut d2, &p);
        assert_eq!(d, d2);
    }

    #[test]
    fn zero_weights_zero_gradient() {
        let d = three_box_gt();
        let samples = synthetic_samples(&d, 50, 100, 3);
        let w = LossWeights {
            sample: 0.0,
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
        let g = analytic_gradient(&d, &samples, &w, 0.5, 0.5).unwrap().grad.flatten();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unique_gradient_stationary_at_one() {
        let mut d = three_box_gt();
        for c in &mut d.convexes {
            c.offsets = [1.0; 6];
        }
        let samples = synthetic_samples(&d, 20, 40, 5);
        let mut w = LossWeights::default();
        w.sample = 0.0;
        w.ortho = 0.0;
        w.align = 0.0;
        w.volume = 0.0;
        w.entropy = 0.0;
        w.overlap = 0.0;
        w.guidance = 0.0;
        w.localization = 0.0;
        w.unique = 1.0;
        let g = analytic_gradient(&d, &samples, &w, 0.5, 0.5).unwrap();
        for gc in &g.grad.convexes {
            for h in 0..6 {
                assert!(gc.offsets[h].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn far_convex_has_no_sample_gradient() {
        let mut d = three_box_gt();
        d.convexes[0].translation += Vec3::new(10.0, 0.0, 0.0);
        let gt = three_box_gt();
        let samples = synthetic_samples(&gt, 100, 200, 7);
        let mut w = LossWeights::default();
        w.unique = 0.0;
        w.guidance = 0.0;
        w.localization = 0.0;
        w.ortho = 0.0;
        w.align = 0.0;
        w.volume = 0.0;
        w.entropy = 0.0;
        w.overlap = 0.0;
        let g = analytic_gradient(&d, &samples, &w, 0.5, 0.5).unwrap();
        assert!(g.grad.convexes[0].translation.norm() < 1e-20);
    }

    #[test]
    fn gradcheck_small() {
        let cfg = GradCheckConfig {
            instances: 8,
            seed: 7,
            n_samples: 400,
            ..GradCheckConfig::default()
        };
        let report = gradcheck(&cfg).unwrap();
        assert_eq!(report.failures, 0, "max rel error {}", report.max_rel_error);
        assert!(report.max_rel_error < 1e-4);
    }

    #[test]
    fn polish_from_optimum_does_no_harm() {
        let gt = three_box_gt();
        let samples = synthetic_samples(&gt, 500, 1000, 11);
        let cfg = PolishConfig {
            iters: 30,
            n_samples: samples.len(),
            prune: false,
            ..PolishConfig::default()
        };
        let (_, trace) = polish(&gt, &samples, &LossWeights::default(), &cfg).unwrap();
        assert!(trace.aborted.is_none());
        assert_eq!(trace.rows.len(), cfg.iters + 1);
        assert!(trace.final_total() <= trace.initial_total() + 1e-6);
    }

    #[test]
    fn polish_recovers_perturbed_start() {
        let gt = three_box_gt();
        let samples = synthetic_samples(&gt, 1500, 3000, 13);
        let start = perturb(&gt, 0.04, 0.015, 99);
        let cfg = PolishConfig {
            iters: 200,
            n_samples: samples.len(),
            prune: false,
            ..PolishConfig::default()
        };
        let w = LossWeights::default();
        let initial = total_loss(&start, &samples, &w, 0.5, 0.5).unwrap().sample;
        let (fit, trace) = polish(&start, &samples, &w, &cfg).unwrap();
        let final_sample = total_loss(&fit, &samples, &w, 0.5, 0.5).unwrap().sample;
        assert!(trace.aborted.is_none());
        assert!(
            final_sample < 0.5 * initial,
            "sample loss {initial} -> {final_sample}"
        );
    }

    #[test]
    fn prune_removes_duplicate() {
        let mut d = three_box_gt();
        d.convexes.push(d.convexes[1].clone());
        let samples = synthetic_samples(&three_box_gt(), 500, 1000, 17);
        let (pruned, events) =
            prune(&d, &samples, &LossWeights::default(), 0.001, 0.5, 0.5).unwrap();
        assert_eq!(pruned.convexes.len(), 3);
        assert_eq!(events.len(), 1);
    }

    #[test]
    fn prune_keeps_separated_convexes() {
        let d = three_box_gt();
        let samples = synthetic_samples(&d, 500, 1000, 19);
        let (pruned, events) =
            prune(&d, &samples, &LossWeights::default(), 0.001, 0.5, 0.5).unwrap();
        assert_eq!(pruned.convexes.len(), 3);
        assert!(events.is_empty());
    }

    #[test]
    fn prune_infinite_eps_leaves_one() {
        let d = three_box_gt();
        let samples = synthetic_samples(&d, 200, 400, 23);
        let (pruned, events) =
            prune(&d, &samples, &LossWeights::default(), f64::INFINITY, 0.5, 0.5).unwrap();
        assert_eq!(pruned.convexes.len(), 1);
        assert_eq!(events.len(), 2);
    }

    #[test]
    fn split_all_ordering_and_count() {
        let d = three_box_gt();
        let s = split_all(&d);
        assert_eq!(s.convexes.len(), 24);
        // Children of convex 0 come first: all are near its translation.
        for child in &s.convexes[..8] {
            assert!((child.translation - d.convexes[0].translation).norm() < 0.5);
        }
    }

    #[test]
    fn pipeline_never_grows() {
        let gt = three_box_gt();
        let samples = synthetic_samples(&gt, 500, 1000, 29);
        let mut start = gt.clone();
        start.convexes.push(ConvexPrimitive::cuboid(
            Vec3::new(0.9, 0.8, 1.0),
            Vec3::new(0.1, 0.1, 0.1),
        ));
        let cfg = PolishConfig {
            iters: 20,
            n_samples: samples.len(),
            ..PolishConfig::default()
        };
        let (fit, trace) = pipeline(&start, &samples, &LossWeights::default(), &cfg).unwrap();
        assert!(fit.convexes.len() <= start.convexes.len());
        assert!(!trace.rows.is_empty());
    }

    #[test]
    fn random_init_deterministic() {
        let a = random_init(8, 5).unwrap();
        let b = random_init(8, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.convexes.len(), 8);
        for c in &a.convexes {
            assert!(c.validate().is_ok());
            for h in 0..6 {
                assert!(c.offsets[h] >= 0.05 && c.offsets[h] <= 0.2);
            }
        }
    }

    #[test]
    fn grid_init_finds_clusters() {
        let centers = [
            Vec3::new(-0.5, 0.0, 0.2),
            Vec3::new(0.5, 0.2, 0.6),
            Vec3::new(0.0, -0.4, 0.4),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut samples = Vec::new();
        for c in &centers {
            for _ in 0..50 {
                samples.push(Sample {
                    position: c + Vec3::new(
                        rng.random_range(-0.02..0.02),
                        rng.random_range(-0.02..0.02),
                        rng.random_range(-0.02..0.02),
                    ),
                    inside: true,
                    kind: SampleKind::SurfaceIn,
                    seg_label: None,
                });
            }
        }
        let d = grid_init(3, &samples).unwrap();
        for target in &centers {
            let nearest = d
                .convexes
                .iter()
                .map(|c| (c.translation - target).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 0.05, "no centroid near {target:?}");
        }
    }

    #[test]
    fn grid_init_duplicates_when_short() {
        let samples = vec![Sample {
            position: Vec3::new(0.1, 0.2, 0.3),
            inside: true,
            kind: SampleKind::SurfaceIn,
            seg_label: None,
        }];
        let d = grid_init(3, &samples).unwrap();
        assert_eq!(d.convexes.len(), 3);
    }

    #[test]
    fn perturb_zero_noise_is_identity() {
        let d = three_box_gt();
        assert_eq!(perturb(&d, 0.0, 0.0, 1), d);
    }

    #[test]
    fn perturb_deterministic() {
        let d = three_box_gt();
        assert_eq!(perturb(&d, 0.05, 0.02, 9), perturb(&d, 0.05, 0.02, 9));
        assert_ne!(perturb(&d, 0.05, 0.02, 9), d);
    }

    #[test]
    fn trace_csv_shape() {
        let gt = three_box_gt();
        let samples = synthetic_samples(&gt, 100, 200, 37);
        let cfg = PolishConfig {
            iters: 3,
            n_samples: samples.len(),
            prune: false,
            ..PolishConfig::default()
        };
        let (_, trace) = polish(&gt, &samples, &LossWeights::default(), &cfg).unwrap();
        let csv = trace.to_csv();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines.len(), 5); // header + 4 rows
        assert!(lines[0].starts_with("iter,total,sample"));
    }
}
