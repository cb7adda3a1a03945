//! Depth and point-cloud evaluation metrics, similarity alignment and a
//! 3-D nearest-neighbor index.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    /// Fraction with `max(p/g, g/p) < 1.25`.
    pub delta: f64,
}

impl DepthMetrics {
    /// Field-wise mean.
    pub fn mean(items: &[DepthMetrics]) -> Option<DepthMetrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let sum = |f: fn(&DepthMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(DepthMetrics {
            abs_rel: sum(|m| m.abs_rel),
            sq_rel: sum(|m| m.sq_rel),
            rmse: sum(|m| m.rmse),
            rmse_log: sum(|m| m.rmse_log),
            delta: sum(|m| m.delta),
        })
    }
}

/// Lower median (element at index `(n - 1) / 2` after sorting).
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    let k = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    Some(*m)
}

/// Standard monocular depth metrics over masked pixels. With
/// `median_scale`, predictions are first multiplied by
/// `median(gt) / median(pred)`.
pub fn depth_metrics(pred: &[f64], gt: &[f64], mask: &[bool], median_scale: bool) -> Result<DepthMetrics> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::dim("depth_metrics", &[pred.len(), gt.len()], &[mask.len()]));
    }
    let mut p = Vec::new();
    let mut g = Vec::new();
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        if !(pred[i] > 0.0 && gt[i] > 0.0) || !pred[i].is_finite() || !gt[i].is_finite() {
            return Err(Error::Domain(format!(
                "depth at masked pixel {i} must be positive and finite (pred {}, gt {})",
                pred[i], gt[i]
            )));
        }
        p.push(pred[i]);
        g.push(gt[i]);
    }
    if p.is_empty() {
        return Err(Error::Degenerate("depth mask selects no pixel".into()));
    }
    if median_scale {
        let ratio = lower_median(&g).unwrap_or(1.0) / lower_median(&p).unwrap_or(1.0);
        p.iter_mut().for_each(|v| *v *= ratio);
    }
    let n = p.len() as f64;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log, mut good) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (&pi, &gi) in p.iter().zip(&g) {
        let d = pi - gi;
        abs_rel += d.abs() / gi;
        sq_rel += d * d / gi;
        sq += d * d;
        let dl = pi.ln() - gi.ln();
        sq_log += dl * dl;
        if (pi / gi).max(gi / pi) < 1.25 {
            good += 1;
        }
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
        delta: good as f64 / n,
    })
}

/// `x -> scale * R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.scale * (self.rotation * Vector3::from(p)) + self.translation;
        [v.x, v.y, v.z]
    }
}

/// Least-squares similarity taking `src[i]` onto `dst[i]`, from the SVD of
/// the cross-covariance with a reflection guard.
pub fn umeyama_align(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::dim("umeyama_align", &[src.len()], &[dst.len()]));
    }
    if src.len() < 3 {
        return Err(Error::DegenerateGeometry(format!("{} correspondences, need at least 3", src.len())));
    }
    let n = src.len() as f64;
    let mean = |pts: &[[f64; 3]]| pts.iter().map(|p| Vector3::from(*p)).sum::<Vector3<f64>>() / n;
    let (mu_s, mu_d) = (mean(src), mean(dst));
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (cs, cd) = (Vector3::from(*s) - mu_s, Vector3::from(*d) - mu_d);
        cov += cd * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    if !(var_s > 0.0) || !(sv[order[1]] > 1e-12 * sv[order[0]].max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateGeometry(format!(
            "cross-covariance rank below 2 (singular values {:?})",
            sv.as_slice()
        )));
    }
    let mut fix = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        fix[(order[2], order[2])] = -1.0;
    }
    let rotation = u * fix * v_t;
    let trace: f64 = (0..3).map(|i| sv[i] * fix[(i, i)]).sum();
    let scale = trace / var_s;
    let translation = mu_d - scale * (rotation * mu_s);
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Static 3-D kd-tree answering exact nearest-neighbor queries.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    /// Point indices laid out so each subrange has its splitting point in
    /// the middle.
    order: Vec<usize>,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (x, y, z) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    x * x + y * y + z * z
}

impl KdTree {
    pub fn new(points: &[[f64; 3]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        Self::build(points, &mut order, 0);
        Self {
            points: points.to_vec(),
            order,
        }
    }

    fn build(points: &[[f64; 3]], idx: &mut [usize], axis: usize) {
        if idx.len() <= 1 {
            return;
        }
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let (lo, hi) = idx.split_at_mut(mid);
        Self::build(points, lo, (axis + 1) % 3);
        Self::build(points, &mut hi[1..], (axis + 1) % 3);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(index, distance)` of the closest point, `None` for an empty tree.
    pub fn nearest(&self, q: &[f64; 3]) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.order.len(), 0, &mut best);
        (best.0 != usize::MAX).then(|| (best.0, best.1.sqrt()))
    }

    fn search(&self, q: &[f64; 3], lo: usize, hi: usize, axis: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let i = self.order[mid];
        let p = &self.points[i];
        let d = dist2(q, p);
        if d < best.1 || (d == best.1 && i < best.0) {
            *best = (i, d);
        }
        let diff = q[axis] - p[axis];
        let next = (axis + 1) % 3;
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, next, best);
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, next, best);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudMetrics {
    /// Mean nearest-neighbor distance from aligned prediction to ground truth.
    pub med: f64,
    /// `(threshold, fraction of predicted points closer than it)`.
    pub delta: Vec<(f64, f64)>,
}

/// Aligns `pred` onto `gt` by a similarity fitted on index-corresponding
/// points, then measures pred-to-gt nearest-neighbor distances.
pub fn cloud_metrics(pred: &[[f64; 3]], gt: &[[f64; 3]], thresholds: &[f64]) -> Result<CloudMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Degenerate("empty point cloud".into()));
    }
    let sim = umeyama_align(pred, gt)?;
    let tree = KdTree::new(gt);
    let dists: Vec<f64> = pred
        .iter()
        .map(|p| tree.nearest(&sim.apply(*p)).map(|(_, d)| d).unwrap_or(f64::INFINITY))
        .collect();
    Ok(cloud_metrics_from_distances(&dists, thresholds))
}

pub fn cloud_metrics_from_distances(dists: &[f64], thresholds: &[f64]) -> CloudMetrics {
    let n = dists.len().max(1) as f64;
    CloudMetrics {
        med: dists.iter().sum::<f64>() / n,
        delta: thresholds
            .iter()
            .map(|&t| (t, dists.iter().filter(|&&d| d < t).count() as f64 / n))
            .collect(),
    }
}
