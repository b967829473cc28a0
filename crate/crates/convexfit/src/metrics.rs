//! Depth, normal, and segmentation error metrics between predicted and
//! ground-truth rasters, and the Chamfer-L1 point-cloud distance.

use std::collections::HashMap;

use crate::geometry::Vec3;
use crate::render::{IdImage, NormalImage, MISS_ID};
use crate::sampling::{depth_to_points, Camera, DepthImage, SegImage, NUM_SEG_LABELS};
use crate::{Error, Result};

/// Evaluation results of one rendered decomposition against ground truth.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitReport {
    /// Mean absolute relative depth error (meters over meters).
    pub abs_rel: f64,
    /// Root-mean-square depth error in meters.
    pub rmse: f64,
    /// Mean angular normal error in degrees.
    pub normal_mean: f64,
    /// Median angular normal error in degrees.
    pub normal_median: f64,
    /// Fraction of pixels with angular error <= 11.25 degrees.
    pub pct_11_25: f64,
    /// Fraction of pixels with angular error <= 22.5 degrees.
    pub pct_22_5: f64,
    /// Fraction of pixels with angular error <= 30 degrees.
    pub pct_30: f64,
    /// Pixel accuracy of the majority-label primitive relabeling, when
    /// id and segmentation rasters were supplied.
    pub seg_accuracy: Option<f64>,
    /// Symmetric Chamfer-L1 distance between back-projected clouds, meters.
    pub chamfer_l1: f64,
    /// Fraction of valid ground-truth pixels hit by the prediction.
    pub coverage: f64,
}

fn check_dims(aw: u32, ah: u32, bw: u32, bh: u32) -> Result<()> {
    if aw != bw || ah != bh {
        return Err(Error::Input(format!(
            "raster dimensions differ: {aw}x{ah} vs {bw}x{bh}"
        )));
    }
    Ok(())
}

/// AbsRel and RMSE over pixels that are valid in the ground truth and hit by
/// the prediction.
pub fn depth_metrics(pred: &DepthImage, gt: &DepthImage) -> Result<(f64, f64)> {
    check_dims(pred.width, pred.height, gt.width, gt.height)?;
    let mut abs_rel = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for v in 0..gt.height {
        for u in 0..gt.width {
            if !gt.is_valid(u, v) || !pred.is_valid(u, v) {
                continue;
            }
            let g = gt.get(u, v) as f64;
            let p = pred.get(u, v) as f64;
            abs_rel += (p - g).abs() / g;
            sq += (p - g) * (p - g);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Input("no overlapping valid depth pixels".into()));
    }
    Ok((abs_rel / n as f64, (sq / n as f64).sqrt()))
}

/// Fraction of valid ground-truth pixels hit by the prediction.
pub fn coverage(pred: &DepthImage, gt: &DepthImage) -> Result<f64> {
    check_dims(pred.width, pred.height, gt.width, gt.height)?;
    let mut hit = 0usize;
    let mut total = 0usize;
    for v in 0..gt.height {
        for u in 0..gt.width {
            if gt.is_valid(u, v) {
                total += 1;
                if pred.is_valid(u, v) {
                    hit += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Input("ground truth has no valid pixels".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Angular normal error statistics in degrees over pixels valid in both
/// rasters: mean, median, and the fraction within 11.25, 22.5, and 30
/// degrees (inclusive).
pub fn normal_metrics(pred: &NormalImage, gt: &NormalImage) -> Result<(f64, f64, f64, f64, f64)> {
    check_dims(pred.width, pred.height, gt.width, gt.height)?;
    let mut errors = Vec::new();
    for v in 0..gt.height {
        for u in 0..gt.width {
            if !gt.is_valid(u, v) || !pred.is_valid(u, v) {
                continue;
            }
            let p = pred.get(u, v);
            let g = gt.get(u, v);
            let dot: f64 = (0..3).map(|i| p[i] * g[i]).sum();
            errors.push(dot.clamp(-1.0, 1.0).acos().to_degrees());
        }
    }
    if errors.is_empty() {
        return Err(Error::Input("no overlapping valid normal pixels".into()));
    }
    let n = errors.len();
    let mean = errors.iter().sum::<f64>() / n as f64;
    errors.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        errors[n / 2]
    } else {
        0.5 * (errors[n / 2 - 1] + errors[n / 2])
    };
    let pct = |t: f64| errors.iter().filter(|&&e| e <= t).count() as f64 / n as f64;
    Ok((mean, median, pct(11.25), pct(22.5), pct(30.0)))
}

/// Majority ground-truth label of every visible primitive (ties toward the
/// smaller label), then pixel accuracy of the relabeled raster. Miss pixels
/// count as wrong.
pub fn seg_accuracy(ids: &IdImage, gt_seg: &SegImage) -> Result<f64> {
    check_dims(ids.width, ids.height, gt_seg.width, gt_seg.height)?;
    // Label histogram per primitive id.
    let mut hist: HashMap<u8, [usize; NUM_SEG_LABELS]> = HashMap::new();
    for v in 0..ids.height {
        for u in 0..ids.width {
            let id = ids.get(u, v);
            if id == MISS_ID {
                continue;
            }
            hist.entry(id).or_insert([0; NUM_SEG_LABELS])[gt_seg.get(u, v) as usize] += 1;
        }
    }
    let mut majority: HashMap<u8, u8> = HashMap::new();
    for (&id, counts) in &hist {
        let mut best = 0usize;
        for l in 1..NUM_SEG_LABELS {
            if counts[l] > counts[best] {
                best = l;
            }
        }
        majority.insert(id, best as u8);
    }
    let mut correct = 0usize;
    let total = (ids.width as usize) * (ids.height as usize);
    for v in 0..ids.height {
        for u in 0..ids.width {
            let id = ids.get(u, v);
            if id == MISS_ID {
                continue;
            }
            if majority[&id] == gt_seg.get(u, v) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Uniform-grid nearest-neighbor index over a point cloud, queried under the
/// L1 metric.
struct GridIndex<'a> {
    points: &'a [Vec3],
    cell: f64,
    map: HashMap<(i64, i64, i64), Vec<usize>>,
    key_lo: (i64, i64, i64),
    key_hi: (i64, i64, i64),
}

impl<'a> GridIndex<'a> {
    fn build(points: &'a [Vec3], cell: f64) -> Self {
        let mut map: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        let mut key_lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut key_hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let k = Self::key(p, cell);
            key_lo = (key_lo.0.min(k.0), key_lo.1.min(k.1), key_lo.2.min(k.2));
            key_hi = (key_hi.0.max(k.0), key_hi.1.max(k.1), key_hi.2.max(k.2));
            map.entry(k).or_default().push(i);
        }
        Self {
            points,
            cell,
            map,
            key_lo,
            key_hi,
        }
    }

    #[inline]
    fn key(p: &Vec3, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// L1 distance to the nearest indexed point, by scanning Chebyshev cell
    /// rings outward until the ring lower bound exceeds the best found.
    fn nearest_l1(&self, q: &Vec3) -> f64 {
        let qk = Self::key(q, self.cell);
        // Largest ring that can still contain occupied cells.
        let span = |lo: i64, hi: i64, c: i64| (c - lo).abs().max((hi - c).abs());
        let max_ring = span(self.key_lo.0, self.key_hi.0, qk.0)
            .max(span(self.key_lo.1, self.key_hi.1, qk.1))
            .max(span(self.key_lo.2, self.key_hi.2, qk.2));
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            if (ring - 1) as f64 * self.cell > best {
                break;
            }
            self.scan_ring(qk, ring, q, &mut best);
        }
        best
    }

    fn scan_cell(&self, k: (i64, i64, i64), q: &Vec3, best: &mut f64) {
        if let Some(idxs) = self.map.get(&k) {
            for &i in idxs {
                let p = self.points[i];
                let d = (p.x - q.x).abs() + (p.y - q.y).abs() + (p.z - q.z).abs();
                if d < *best {
                    *best = d;
                }
            }
        }
    }

    fn scan_ring(&self, c: (i64, i64, i64), r: i64, q: &Vec3, best: &mut f64) {
        if r == 0 {
            self.scan_cell(c, q, best);
            return;
        }
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    self.scan_cell((c.0 + dx, c.1 + dy, c.2 + dz), q, best);
                }
            }
        }
    }
}

fn directed_chamfer_l1(from: &[Vec3], to: &GridIndex) -> f64 {
    let total: f64 = from.iter().map(|p| to.nearest_l1(p)).sum();
    total / from.len() as f64
}

/// Symmetric Chamfer-L1 distance (meters) between the back-projected valid
/// pixels of two depth maps: the mean of both directed nearest-neighbor
/// means.
pub fn chamfer_l1(pred: &DepthImage, gt: &DepthImage, cam: &Camera) -> Result<f64> {
    let (pred_pts, _) = depth_to_points(pred, cam)?;
    let (gt_pts, _) = depth_to_points(gt, cam)?;
    if pred_pts.is_empty() || gt_pts.is_empty() {
        return Err(Error::Input("chamfer distance needs nonempty clouds".into()));
    }
    // Cell size from the joint bounding box; ~50 cells per axis keeps ring
    // scans short at typical raster densities.
    let mut lo = pred_pts[0];
    let mut hi = pred_pts[0];
    for p in pred_pts.iter().chain(&gt_pts) {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let diag = (hi - lo).norm();
    let cell = (diag / 50.0).max(1e-9);
    let pred_index = GridIndex::build(&pred_pts, cell);
    let gt_index = GridIndex::build(&gt_pts, cell);
    let a = directed_chamfer_l1(&pred_pts, &gt_index);
    let b = directed_chamfer_l1(&gt_pts, &pred_index);
    Ok(0.5 * (a + b))
}

/// Compose the full report from rendered and ground-truth rasters.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    pred_depth: &DepthImage,
    gt_depth: &DepthImage,
    pred_normals: &NormalImage,
    gt_normals: &NormalImage,
    pred_ids: Option<&IdImage>,
    gt_seg: Option<&SegImage>,
    cam: &Camera,
) -> Result<FitReport> {
    let (abs_rel, rmse) = depth_metrics(pred_depth, gt_depth)?;
    let (normal_mean, normal_median, pct_11_25, pct_22_5, pct_30) =
        normal_metrics(pred_normals, gt_normals)?;
    let seg = match (pred_ids, gt_seg) {
        (Some(ids), Some(seg)) => Some(seg_accuracy(ids, seg)?),
        _ => None,
    };
    Ok(FitReport {
        abs_rel,
        rmse,
        normal_mean,
        normal_median,
        pct_11_25,
        pct_22_5,
        pct_30,
        seg_accuracy: seg,
        chamfer_l1: chamfer_l1(pred_depth, gt_depth, cam)?,
        coverage: coverage(pred_depth, gt_depth)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(w: u32, h: u32) -> Camera {
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
        }
    }

    fn flat(w: u32, h: u32, z: f32) -> DepthImage {
        DepthImage::new(w, h, vec![z; (w * h) as usize]).unwrap()
    }

    #[test]
    fn depth_identity() {
        let gt = flat(8, 8, 2.0);
        let (abs_rel, rmse) = depth_metrics(&gt, &gt).unwrap();
        assert_eq!(abs_rel, 0.0);
        assert_eq!(rmse, 0.0);
    }

    #[test]
    fn depth_ten_percent_over() {
        let gt = flat(8, 8, 2.0);
        let pred = flat(8, 8, 2.2);
        let (abs_rel, rmse) = depth_metrics(&pred, &gt).unwrap();
        assert!((abs_rel - 0.1).abs() < 1e-6);
        assert!((rmse - 0.2).abs() < 1e-6);
    }

    #[test]
    fn depth_misses_excluded_and_coverage() {
        let gt = flat(4, 1, 2.0);
        let mut vals = vec![2.0f32; 4];
        vals[0] = 0.0; // miss
        vals[1] = 4.0;
        let pred = DepthImage::new(4, 1, vals).unwrap();
        let (abs_rel, _) = depth_metrics(&pred, &gt).unwrap();
        // Only three pixels counted, one of them off by 2 m.
        assert!((abs_rel - (1.0 / 3.0)).abs() < 1e-6);
        assert!((coverage(&pred, &gt).unwrap() - 0.75).abs() < 1e-12);
    }

    fn constant_normals(w: u32, h: u32, n: [f64; 3]) -> NormalImage {
        NormalImage::new(w, h, vec![n; (w * h) as usize]).unwrap()
    }

    #[test]
    fn normals_identity() {
        let n = constant_normals(6, 6, [0.0, 0.0, -1.0]);
        let (mean, median, p1, p2, p3) = normal_metrics(&n, &n).unwrap();
        assert!(mean.abs() < 1e-6);
        assert!(median.abs() < 1e-6);
        assert_eq!((p1, p2, p3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn normals_uniform_thirty_degrees() {
        let a = 30.0_f64.to_radians();
        let gt = constant_normals(6, 6, [0.0, 0.0, 1.0]);
        let pred = constant_normals(6, 6, [a.sin(), 0.0, a.cos()]);
        let (mean, median, p1, p2, p3) = normal_metrics(&pred, &gt).unwrap();
        assert!((mean - 30.0).abs() < 1e-4);
        assert!((median - 30.0).abs() < 1e-4);
        assert_eq!(p1, 0.0);
        assert_eq!(p2, 0.0);
        // The 30-degree threshold is inclusive.
        assert_eq!(p3, 1.0);
    }

    #[test]
    fn normals_antiparallel() {
        let gt = constant_normals(4, 4, [0.0, 0.0, 1.0]);
        let pred = constant_normals(4, 4, [0.0, 0.0, -1.0]);
        let (mean, _, _, _, _) = normal_metrics(&pred, &gt).unwrap();
        assert!((mean - 180.0).abs() < 1e-6);
    }

    #[test]
    fn seg_single_primitive_single_label() {
        let ids = IdImage::new(4, 4, vec![0; 16]).unwrap();
        let seg = SegImage::new(4, 4, vec![5; 16]).unwrap();
        assert_eq!(seg_accuracy(&ids, &seg).unwrap(), 1.0);
    }

    #[test]
    fn seg_majority_sixty_forty() {
        let ids = IdImage::new(10, 1, vec![0; 10]).unwrap();
        let mut labels = vec![3u8; 6];
        labels.extend(vec![4u8; 4]);
        let seg = SegImage::new(10, 1, labels).unwrap();
        assert!((seg_accuracy(&ids, &seg).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn seg_two_primitives_two_labels() {
        let mut ids = vec![0u8; 8];
        ids.extend(vec![1u8; 8]);
        let ids = IdImage::new(16, 1, ids).unwrap();
        let mut labels = vec![2u8; 8];
        labels.extend(vec![9u8; 8]);
        let seg = SegImage::new(16, 1, labels).unwrap();
        assert_eq!(seg_accuracy(&ids, &seg).unwrap(), 1.0);
    }

    #[test]
    fn seg_miss_counts_wrong() {
        let ids = IdImage::new(4, 1, vec![0, 0, MISS_ID, MISS_ID]).unwrap();
        let seg = SegImage::new(4, 1, vec![1, 1, 1, 1]).unwrap();
        assert!((seg_accuracy(&ids, &seg).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn seg_invariant_to_id_permutation() {
        let ids_a = IdImage::new(8, 1, vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        let ids_b = IdImage::new(8, 1, vec![3, 3, 3, 3, 0, 0, 0, 0]).unwrap();
        let seg = SegImage::new(8, 1, vec![2, 2, 2, 7, 9, 9, 9, 9]).unwrap();
        assert_eq!(
            seg_accuracy(&ids_a, &seg).unwrap(),
            seg_accuracy(&ids_b, &seg).unwrap()
        );
    }

    #[test]
    fn chamfer_identical_is_zero() {
        let c = cam(16, 12);
        let gt = flat(16, 12, 2.0);
        assert_eq!(chamfer_l1(&gt, &gt, &c).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_uniform_shift() {
        let c = cam(32, 24);
        let gt = flat(32, 24, 2.0);
        let pred = flat(32, 24, 2.1);
        let d = chamfer_l1(&pred, &gt, &c).unwrap();
        // A frontal plane shifted 0.1 m along z: lateral pitch is 0.02 m,
        // so the nearest neighbor is dominated by the z offset but includes
        // a small lateral quantization term.
        assert!(d > 0.08 && d < 0.13, "chamfer {d}");
    }

    #[test]
    fn chamfer_subsampled_below_pitch() {
        let c = cam(32, 24);
        let gt = flat(32, 24, 2.0);
        let mut vals = vec![0.0f32; 32 * 24];
        for v in 0..24 {
            for u in 0..32 {
                if (u + v) % 2 == 0 {
                    vals[(v * 32 + u) as usize] = 2.0;
                }
            }
        }
        let pred = DepthImage::new(32, 24, vals).unwrap();
        let d = chamfer_l1(&pred, &gt, &c).unwrap();
        // World pixel pitch at 2 m with fx = 100 is 0.02 m.
        assert!(d > 0.0 && d < 0.02, "chamfer {d}");
    }
}
