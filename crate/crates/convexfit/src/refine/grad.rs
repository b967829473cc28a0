//! Analytic and finite-difference gradients of the total loss with respect
//! to every decomposition parameter.
//!
//! The parameter vector is, per convex: 3 axis vectors (9), 6 offsets, the
//! translation (3), and the smoothness (1); followed by the 9 Manhattan
//! entries row-major. Structures that select discrete support — the claiming
//! convex of a sample, the closest face of an entropy sample, guidance
//! neighborhoods, localization targets — are held fixed within one
//! evaluation, so the analytic gradient is the exact derivative of the loss
//! with those selections frozen.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::geometry::{sigmoid, ConvexPrimitive, Decomposition, Mat3, Vec3};
use crate::losses::{
    self, LossBreakdown, LossWeights, EntropyMode, ENTROPY_MASS_FLOOR,
};
use crate::sampling::{Sample, SampleKind, NUM_SEG_LABELS};
use crate::Result;

/// Samples per parallel accumulation chunk. Chunk partials are merged in
/// chunk order, so results are bitwise identical for any thread count.
const CHUNK: usize = 4096;

/// Number of flat parameters per convex.
pub const PARAMS_PER_CONVEX: usize = 19;

/// Gradient with respect to one convex's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexGrad {
    pub axes: [Vec3; 3],
    pub offsets: [f64; 6],
    pub translation: Vec3,
    pub smoothness: f64,
}

impl ConvexGrad {
    fn zeros() -> Self {
        Self {
            axes: [Vec3::zeros(); 3],
            offsets: [0.0; 6],
            translation: Vec3::zeros(),
            smoothness: 0.0,
        }
    }

    fn add(&mut self, other: &Self) {
        for i in 0..3 {
            self.axes[i] += other.axes[i];
        }
        for h in 0..6 {
            self.offsets[h] += other.offsets[h];
        }
        self.translation += other.translation;
        self.smoothness += other.smoothness;
    }
}

/// Gradient of the total loss with respect to the full parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub convexes: Vec<ConvexGrad>,
    pub manhattan: Mat3,
}

impl ParamGrad {
    pub fn zeros(k: usize) -> Self {
        Self {
            convexes: vec![ConvexGrad::zeros(); k],
            manhattan: Mat3::zeros(),
        }
    }

    fn add(&mut self, other: &Self) {
        for (a, b) in self.convexes.iter_mut().zip(&other.convexes) {
            a.add(b);
        }
        self.manhattan += other.manhattan;
    }

    /// Flatten in the canonical parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(param_count_for(self.convexes.len()));
        for c in &self.convexes {
            for a in &c.axes {
                out.extend_from_slice(&[a.x, a.y, a.z]);
            }
            out.extend_from_slice(&c.offsets);
            out.extend_from_slice(&[c.translation.x, c.translation.y, c.translation.z]);
            out.push(c.smoothness);
        }
        for r in 0..3 {
            for c in 0..3 {
                out.push(self.manhattan[(r, c)]);
            }
        }
        out
    }
}

pub fn param_count_for(k: usize) -> usize {
    PARAMS_PER_CONVEX * k + 9
}

pub fn param_count(decomp: &Decomposition) -> usize {
    param_count_for(decomp.convexes.len())
}

/// Flatten the decomposition parameters in the canonical order.
pub fn flatten_params(decomp: &Decomposition) -> Vec<f64> {
    let mut out = Vec::with_capacity(param_count(decomp));
    for c in &decomp.convexes {
        for a in &c.axes {
            out.extend_from_slice(&[a.x, a.y, a.z]);
        }
        out.extend_from_slice(&c.offsets);
        out.extend_from_slice(&[c.translation.x, c.translation.y, c.translation.z]);
        out.push(c.smoothness);
    }
    for r in 0..3 {
        for c in 0..3 {
            out.push(decomp.manhattan[(r, c)]);
        }
    }
    out
}

/// Write a flat parameter vector back into the decomposition, raw (no
/// projection).
pub fn apply_params(decomp: &mut Decomposition, params: &[f64]) {
    assert_eq!(params.len(), param_count(decomp));
    let mut i = 0;
    for c in &mut decomp.convexes {
        for a in &mut c.axes {
            *a = Vec3::new(params[i], params[i + 1], params[i + 2]);
            i += 3;
        }
        for h in 0..6 {
            c.offsets[h] = params[i];
            i += 1;
        }
        c.translation = Vec3::new(params[i], params[i + 1], params[i + 2]);
        i += 3;
        c.smoothness = params[i];
        i += 1;
    }
    for r in 0..3 {
        for col in 0..3 {
            decomp.manhattan[(r, col)] = params[i];
            i += 1;
        }
    }
}

/// Central finite differences of a scalar function over a flat vector.
pub fn central_diff<F>(mut f: F, p: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut work = p.to_vec();
    let mut grad = vec![0.0; p.len()];
    for i in 0..p.len() {
        let orig = work[i];
        work[i] = orig + step;
        let plus = f(&work)?;
        work[i] = orig - step;
        let minus = f(&work)?;
        work[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Central-difference gradient of the total loss over the flat parameter
/// vector; the verification oracle for [`analytic_gradient`].
pub fn numeric_gradient(
    decomp: &Decomposition,
    samples: &[Sample],
    weights: &LossWeights,
    w_free: f64,
    w_surface: f64,
    step: f64,
) -> Result<Vec<f64>> {
    let base = flatten_params(decomp);
    let mut scratch = decomp.clone();
    central_diff(
        |p| {
            apply_params(&mut scratch, p);
            Ok(losses::total_loss(&scratch, samples, weights, w_free, w_surface)?.total)
        },
        &base,
        step,
    )
}

/// One fused evaluation: the loss breakdown and the analytic gradient of the
/// weighted total.
pub struct GradEval {
    pub breakdown: LossBreakdown,
    pub grad: ParamGrad,
}

/// Per-convex cached evaluation at one sample position.
struct ConvexEval {
    planes: [f64; 6],
    weights: [f64; 6],
    phi: f64,
    score: f64,
}

#[inline]
fn eval_convex(c: &ConvexPrimitive, sigma: f64, x: &Vec3) -> ConvexEval {
    let planes = c.halfplanes(x);
    let parts = c.lse(&planes);
    ConvexEval {
        planes,
        weights: parts.weights,
        phi: parts.phi,
        score: sigmoid(-sigma * parts.phi),
    }
}

/// Accumulate `dphi * dPhi/dparam` into the convex gradient.
#[inline]
fn backprop_phi(c: &ConvexPrimitive, x: &Vec3, ev: &ConvexEval, dphi: f64, out: &mut ConvexGrad) {
    let r = x - c.translation;
    let mut spatial = Vec3::zeros();
    let mut wh_sum = 0.0;
    for h in 0..6 {
        let w = ev.weights[h];
        spatial += c.normal(h) * w;
        out.offsets[h] += dphi * (-w);
        wh_sum += w * ev.planes[h];
    }
    out.translation += -spatial * dphi;
    for i in 0..3 {
        out.axes[i] += r * (dphi * (ev.weights[i] - ev.weights[i + 3]));
    }
    out.smoothness += dphi * (wh_sum - ev.phi) / c.smoothness;
}

struct SamplePassAccum {
    free_sum: f64,
    surf_sum: f64,
    overlap_sum: f64,
    grad: ParamGrad,
}

/// Analytic gradient of the weighted total loss, together with the loss
/// breakdown of the same evaluation.
pub fn analytic_gradient(
    decomp: &Decomposition,
    samples: &[Sample],
    weights: &LossWeights,
    w_free: f64,
    w_surface: f64,
) -> Result<GradEval> {
    let k_count = decomp.convexes.len();
    let sigma = decomp.sigma;
    let mut grad = ParamGrad::zeros(k_count);
    let mut bd = LossBreakdown::default();

    // Group sizes drive the per-sample mean coefficients.
    let n_free = samples
        .iter()
        .filter(|s| matches!(s.kind, SampleKind::Free | SampleKind::Shell))
        .count();
    let n_surf = samples.len() - n_free;
    let n_all = samples.len();

    // Pass over all samples: sample classification + overlap.
    let partials: Vec<SamplePassAccum> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = SamplePassAccum {
                free_sum: 0.0,
                surf_sum: 0.0,
                overlap_sum: 0.0,
                grad: ParamGrad::zeros(k_count),
            };
            let mut evals: Vec<ConvexEval> = Vec::with_capacity(k_count);
            for s in chunk {
                evals.clear();
                for c in &decomp.convexes {
                    evals.push(eval_convex(c, sigma, &s.position));
                }
                // Union indicator: max score, ties to the lowest index.
                let mut best = 0;
                for k in 1..k_count {
                    if evals[k].score > evals[best].score {
                        best = k;
                    }
                }
                let u = evals[best].score;
                let y = if s.inside { 1.0 } else { 0.0 };
                let e = u - y;
                let free_group = matches!(s.kind, SampleKind::Free | SampleKind::Shell);
                let (group_w, group_n, sum) = if free_group {
                    (w_free, n_free, &mut acc.free_sum)
                } else {
                    (w_surface, n_surf, &mut acc.surf_sum)
                };
                *sum += e * e;
                if weights.sample > 0.0 && group_n > 0 {
                    let coef = weights.sample * group_w / group_n as f64;
                    let dphi = coef * 2.0 * e * (-sigma * u * (1.0 - u));
                    if dphi != 0.0 {
                        backprop_phi(
                            &decomp.convexes[best],
                            &s.position,
                            &evals[best],
                            dphi,
                            &mut acc.grad.convexes[best],
                        );
                    }
                }
                // Overlap: claimed mass beyond one convex.
                let claimed: f64 = evals.iter().map(|ev| ev.score).sum();
                let over = (claimed - 1.0).max(0.0);
                acc.overlap_sum += over * over;
                if weights.overlap > 0.0 && over > 0.0 {
                    let c0 = weights.overlap * 2.0 * over / n_all as f64;
                    for k in 0..k_count {
                        let ev = &evals[k];
                        let dphi = c0 * (-sigma * ev.score * (1.0 - ev.score));
                        if dphi != 0.0 {
                            backprop_phi(
                                &decomp.convexes[k],
                                &s.position,
                                ev,
                                dphi,
                                &mut acc.grad.convexes[k],
                            );
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut free_sum = 0.0;
    let mut surf_sum = 0.0;
    let mut overlap_sum = 0.0;
    for p in partials {
        free_sum += p.free_sum;
        surf_sum += p.surf_sum;
        overlap_sum += p.overlap_sum;
        grad.add(&p.grad);
    }
    let free_term = if n_free > 0 { free_sum / n_free as f64 } else { 0.0 };
    let surf_term = if n_surf > 0 { surf_sum / n_surf as f64 } else { 0.0 };
    bd.sample = w_free * free_term + w_surface * surf_term;
    bd.overlap = if n_all > 0 { overlap_sum / n_all as f64 } else { 0.0 };

    // Entropy over labeled inside surface samples.
    let mode = if weights.entropy_per_convex {
        EntropyMode::Convex
    } else {
        EntropyMode::Face
    };
    let entropy_idx: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| losses::is_entropy_sample(s))
        .map(|(i, _)| i)
        .collect();
    if !entropy_idx.is_empty() {
        let rows = match mode {
            EntropyMode::Face => 6 * k_count,
            EntropyMode::Convex => k_count,
        };
        // Mass pass.
        let mass_partials: Vec<DMatrix<f64>> = entropy_idx
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut mass = DMatrix::zeros(rows, NUM_SEG_LABELS);
                for &i in chunk {
                    let s = &samples[i];
                    let label = s.seg_label.unwrap() as usize;
                    for (k, c) in decomp.convexes.iter().enumerate() {
                        let ev = eval_convex(c, sigma, &s.position);
                        let row = match mode {
                            EntropyMode::Face => 6 * k + losses::closest_face(&ev.planes),
                            EntropyMode::Convex => k,
                        };
                        mass[(row, label)] += ev.score;
                    }
                }
                mass
            })
            .collect();
        let mut mass = DMatrix::zeros(rows, NUM_SEG_LABELS);
        for p in mass_partials {
            mass += p;
        }
        // Row statistics: total mass and entropy.
        let mut row_mu = vec![0.0; rows];
        let mut row_entropy = vec![0.0; rows];
        for r in 0..rows {
            let row: Vec<f64> = mass.row(r).iter().copied().collect();
            row_mu[r] = row.iter().sum();
            row_entropy[r] = losses::row_entropy(&row);
        }
        bd.entropy = row_entropy.iter().sum::<f64>() / rows as f64;

        if weights.entropy > 0.0 {
            // Gradient pass: dL/dC flows through the frozen face masks.
            let grad_partials: Vec<ParamGrad> = entropy_idx
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g = ParamGrad::zeros(k_count);
                    for &i in chunk {
                        let s = &samples[i];
                        let label = s.seg_label.unwrap() as usize;
                        for (k, c) in decomp.convexes.iter().enumerate() {
                            let ev = eval_convex(c, sigma, &s.position);
                            let row = match mode {
                                EntropyMode::Face => 6 * k + losses::closest_face(&ev.planes),
                                EntropyMode::Convex => k,
                            };
                            let mu = row_mu[row];
                            if mu < ENTROPY_MASS_FLOOR {
                                continue;
                            }
                            let m = mass[(row, label)];
                            if m <= 0.0 {
                                continue;
                            }
                            // dE/dm = -(E + ln p)/mu for the sample's label.
                            let de_dm = -(row_entropy[row] + (m / mu).ln()) / mu;
                            let dc = weights.entropy * de_dm / rows as f64;
                            let dphi = dc * (-sigma * ev.score * (1.0 - ev.score));
                            if dphi != 0.0 {
                                backprop_phi(c, &s.position, &ev, dphi, &mut g.convexes[k]);
                            }
                        }
                    }
                    g
                })
                .collect();
            for p in grad_partials {
                grad.add(&p);
            }
        }
    }

    // Guidance: frozen nearest inside neighborhoods per convex.
    let inside = losses::inside_indices(samples);
    if !inside.is_empty() {
        let neighbors = losses::guidance_neighbors(decomp, samples, &inside);
        let mut total = 0.0;
        for (k, (c, neigh)) in decomp.convexes.iter().zip(&neighbors).enumerate() {
            let mut acc = 0.0;
            for &i in neigh {
                let x = &samples[i].position;
                let ev = eval_convex(c, sigma, x);
                let h = ev.phi.max(0.0);
                acc += h * h;
                if weights.guidance > 0.0 && ev.phi > 0.0 {
                    let dphi = weights.guidance * 2.0 * ev.phi
                        / (k_count as f64 * neigh.len() as f64);
                    backprop_phi(c, x, &ev, dphi, &mut grad.convexes[k]);
                }
            }
            total += acc / neigh.len() as f64;
        }
        bd.guidance = total / k_count as f64;
    }

    // Localization: frozen nearest inside sample per translation.
    let nearest = losses::nearest_inside(decomp, samples, &inside)?;
    let mut loc = 0.0;
    for (k, (c, &i)) in decomp.convexes.iter().zip(&nearest).enumerate() {
        let diff = c.translation - samples[i].position;
        loc += diff.norm_squared();
        grad.convexes[k].translation +=
            diff * (weights.localization * 2.0 / k_count as f64);
    }
    bd.localization = loc / k_count as f64;

    // Unique parametrization.
    let mut unique = 0.0;
    for (k, c) in decomp.convexes.iter().enumerate() {
        let mut sq = 0.0;
        let mut inv_sq = 0.0;
        for (h, &d) in c.offsets.iter().enumerate() {
            if d <= 0.0 {
                return Err(crate::Error::Numeric(format!(
                    "offset {d} <= 0 in unique loss"
                )));
            }
            sq += d * d;
            inv_sq += 1.0 / (d * d);
            grad.convexes[k].offsets[h] += weights.unique
                * (2.0 * d - 2.0 / (d * d * d))
                / (6.0 * k_count as f64);
        }
        unique += sq / 6.0 + inv_sq / 6.0;
    }
    bd.unique = unique / k_count as f64;

    // Manhattan orthonormality: dL/dM = -(4/9) M (I - M'M).
    let m = decomp.manhattan;
    let e = Mat3::identity() - m.transpose() * m;
    bd.ortho = e.iter().map(|v| v * v).sum::<f64>() / 9.0;
    grad.manhattan += m * e * (-(4.0 / 9.0) * weights.ortho);

    // Alignment with the normalized Manhattan columns.
    let mut align = 0.0;
    let cols: [Vec3; 3] = std::array::from_fn(|j| m.column(j).into());
    let norms: [f64; 3] = std::array::from_fn(|j| cols[j].norm());
    let what: [Vec3; 3] =
        std::array::from_fn(|j| if norms[j] > 0.0 { cols[j] / norms[j] } else { cols[j] });
    let inv_3k = 1.0 / (3.0 * k_count as f64);
    let mut dcol = [Vec3::zeros(); 3];
    for (k, c) in decomp.convexes.iter().enumerate() {
        let mut dot = 0.0;
        for h in 0..6 {
            let target = if h < 3 { what[h] } else { -what[h - 3] };
            dot += c.normal(h).dot(&target);
        }
        align += 1.0 - dot / 6.0;
        for i in 0..3 {
            grad.convexes[k].axes[i] += what[i] * (-weights.align * inv_3k);
            dcol[i] += c.axes[i];
        }
    }
    bd.align = align / k_count as f64;
    for j in 0..3 {
        let da = if norms[j] > 0.0 {
            (dcol[j] - what[j] * what[j].dot(&dcol[j])) / norms[j]
        } else {
            dcol[j]
        };
        let dm_col = da * (-weights.align * inv_3k);
        for r in 0..3 {
            grad.manhattan[(r, j)] += dm_col[r];
        }
    }

    // Volume ordering.
    let vols: Vec<f64> = decomp.convexes.iter().map(|c| c.volume_estimate()).collect();
    let mut vol_loss = 0.0;
    let mut dv = vec![0.0; k_count];
    for k in 1..k_count {
        let diff = vols[k] - vols[k - 1];
        if diff > 0.0 {
            vol_loss += diff;
            dv[k] += weights.volume / k_count as f64;
            dv[k - 1] -= weights.volume / k_count as f64;
        }
    }
    bd.volume = vol_loss / k_count as f64;
    for (k, c) in decomp.convexes.iter().enumerate() {
        if dv[k] != 0.0 {
            let d = &c.offsets;
            let faces = [
                (d[1] + d[4]) * (d[2] + d[5]),
                (d[0] + d[3]) * (d[2] + d[5]),
                (d[0] + d[3]) * (d[1] + d[4]),
            ];
            for i in 0..3 {
                grad.convexes[k].offsets[i] += dv[k] * faces[i];
                grad.convexes[k].offsets[i + 3] += dv[k] * faces[i];
            }
        }
    }

    bd.total = bd.recombine(weights);
    Ok(GradEval {
        breakdown: bd,
        grad,
    })
}
