//! Depth and point-cloud evaluation of predicted depth maps against a
//! synthetic ground-truth directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode_heads::Intrinsics;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{cloud_metrics, depth_metrics, CloudMetrics, DepthMetrics};
use crate::synthdata::{frame_stem, Dataset};

/// Scene units (centimeters) per millimeter.
pub const UNITS_PER_MM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub median_scale: bool,
    /// Cloud accuracy thresholds in millimeters.
    pub thresholds_mm: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            median_scale: true,
            thresholds_mm: vec![1.0, 2.0, 5.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: usize,
    pub pixels: usize,
    pub depth: DepthMetrics,
    /// Absent when the frame has fewer than three usable points.
    pub cloud: Option<CloudMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub depth: DepthMetrics,
    pub cloud: Option<CloudMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub median_scale: bool,
    pub thresholds_mm: Vec<f64>,
    pub units_per_mm: f64,
    pub frames: Vec<FrameReport>,
    pub aggregate: Aggregate,
}

/// Camera-frame points of the masked pixels of a depth map.
pub fn back_project(depth: &[f64], mask: &[bool], k: &Intrinsics, width: usize) -> Vec<[f64; 3]> {
    (0..depth.len())
        .filter(|&p| mask[p])
        .map(|p| {
            let r = k.ray(p / width, p % width);
            [r[0] * depth[p], r[1] * depth[p], r[2] * depth[p]]
        })
        .collect()
}

/// Field-wise mean of cloud metrics that share one threshold list.
pub fn mean_cloud(items: &[CloudMetrics]) -> Option<CloudMetrics> {
    let first = items.first()?;
    let n = items.len() as f64;
    Some(CloudMetrics {
        med: items.iter().map(|c| c.med).sum::<f64>() / n,
        delta: first
            .delta
            .iter()
            .enumerate()
            .map(|(i, &(t, _))| (t, items.iter().map(|c| c.delta[i].1).sum::<f64>() / n))
            .collect(),
    })
}

fn count_depth_frames(dir: &Path) -> usize {
    (0..)
        .take_while(|&i| dir.join(format!("{}.depth.pfm", frame_stem(i))).exists())
        .count()
}

/// Per-frame and mean metrics. Pixels count when the ground truth hit a
/// wall (depth below the far plane) and the prediction is positive and
/// finite.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    if !pred_dir.is_dir() {
        return Err(Error::ingestion(pred_dir, "prediction directory not found"));
    }
    if opts.thresholds_mm.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Config(format!("thresholds must be positive: {:?}", opts.thresholds_mm)));
    }
    let gt = Dataset::load(gt_dir)?;
    let n_pred = count_depth_frames(pred_dir);
    if n_pred != gt.len() {
        return Err(Error::ingestion(
            pred_dir,
            format!("{n_pred} predicted depth maps for {} ground-truth frames", gt.len()),
        ));
    }
    let thresholds: Vec<f64> = opts.thresholds_mm.iter().map(|t| t * UNITS_PER_MM).collect();
    let width = gt.meta.sequence.width;
    let far = gt.far();
    let mut frames = Vec::with_capacity(gt.len());
    for i in 0..gt.len() {
        let path = pred_dir.join(format!("{}.depth.pfm", frame_stem(i)));
        let pred = io::read_pfm::<f64>(&path)?;
        if pred.shape() != gt.depths[i].shape() {
            return Err(Error::ingestion(
                &path,
                format!("shape {:?}, ground truth {:?}", pred.shape(), gt.depths[i].shape()),
            ));
        }
        let (p, g) = (pred.data(), gt.depths[i].data());
        let mask: Vec<bool> = (0..p.len())
            .map(|j| g[j] > 0.0 && g[j] < far && p[j] > 0.0 && p[j].is_finite())
            .collect();
        let pixels = mask.iter().filter(|&&m| m).count();
        if pixels == 0 {
            return Err(Error::Degenerate(format!("frame {i} has no pixel to evaluate")));
        }
        let depth = depth_metrics(p, g, &mask, opts.median_scale)?;
        let pc = back_project(p, &mask, &gt.intrinsics, width);
        let gc = back_project(g, &mask, &gt.intrinsics, width);
        let cloud = if pixels >= 3 { cloud_metrics(&pc, &gc, &thresholds).ok() } else { None };
        frames.push(FrameReport {
            frame: i,
            pixels,
            depth,
            cloud,
        });
    }
    let depths: Vec<DepthMetrics> = frames.iter().map(|f| f.depth).collect();
    let clouds: Vec<CloudMetrics> = frames.iter().filter_map(|f| f.cloud.clone()).collect();
    Ok(EvalReport {
        median_scale: opts.median_scale,
        thresholds_mm: opts.thresholds_mm.clone(),
        units_per_mm: UNITS_PER_MM,
        aggregate: Aggregate {
            depth: DepthMetrics::mean(&depths).expect("at least one frame"),
            cloud: mean_cloud(&clouds),
        },
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_sequence, write_dataset, SequenceConfig};

    fn gt_dir(dir: &Path, frames: usize) {
        let seq = SequenceConfig::new(4, frames, 12, 12);
        let (scene, samples) = generate_sequence(&seq).unwrap();
        write_dataset(dir, &seq, &scene, &samples).unwrap();
    }

    #[test]
    fn ground_truth_against_itself() {
        let dir = tempfile::tempdir().unwrap();
        gt_dir(dir.path(), 3);
        for median_scale in [true, false] {
            let opts = EvalOptions {
                median_scale,
                ..EvalOptions::default()
            };
            let r = evaluate(dir.path(), dir.path(), &opts).unwrap();
            assert_eq!(r.median_scale, median_scale);
            let a = r.aggregate.depth;
            assert!(a.abs_rel < 1e-12 && a.sq_rel < 1e-12 && a.rmse < 1e-12 && a.rmse_log < 1e-12);
            assert_eq!(a.delta, 1.0);
            let c = r.aggregate.cloud.unwrap();
            assert!(c.med < 1e-6);
            assert!(c.delta.iter().all(|&(_, f)| f == 1.0));
        }
    }

    #[test]
    fn aggregate_is_the_mean_of_frames() {
        let dir = tempfile::tempdir().unwrap();
        gt_dir(&dir.path().join("gt"), 3);
        let pred = dir.path().join("pred");
        for i in 0..3 {
            let stem = frame_stem(i);
            let d: crate::Tensor64 = io::read_pfm(&dir.path().join("gt").join(format!("{stem}.depth.pfm"))).unwrap();
            let noisy = d.map(|v| v * (1.0 + 0.05 * ((v * 37.0).sin() + i as f64 * 0.1)));
            io::write_pfm(&pred.join(format!("{stem}.depth.pfm")), &noisy).unwrap();
        }
        let r = evaluate(&pred, &dir.path().join("gt"), &EvalOptions::default()).unwrap();
        let n = r.frames.len() as f64;
        let mean = r.frames.iter().map(|f| f.depth.abs_rel).sum::<f64>() / n;
        assert!((mean - r.aggregate.depth.abs_rel).abs() <= 1e-12);
        let med = r.frames.iter().map(|f| f.cloud.as_ref().unwrap().med).sum::<f64>() / n;
        assert!((med - r.aggregate.cloud.as_ref().unwrap().med).abs() <= 1e-12);
        assert!(r.aggregate.depth.abs_rel > 0.0);
    }

    #[test]
    fn frame_count_mismatch_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        gt_dir(&dir.path().join("gt"), 2);
        let pred = dir.path().join("pred");
        let d: crate::Tensor64 = io::read_pfm(&dir.path().join("gt/frame_00000.depth.pfm")).unwrap();
        io::write_pfm(&pred.join("frame_00000.depth.pfm"), &d).unwrap();
        let err = evaluate(&pred, &dir.path().join("gt"), &EvalOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }), "{err}");
    }
}
