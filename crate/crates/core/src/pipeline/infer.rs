//! Streaming inference over a frame directory and artifact writing.

use std::path::{Path, PathBuf};

use super::config::ModelConfig;
use super::model::{FrameOutput, Model, StepStats, StreamState};
use super::train::load_checkpoint;
use crate::decode_heads::Intrinsics;
use crate::error::{Error, Result};
use crate::io::{self, PlyPoint};
use crate::numerics::{Scalar, Tensor};
use crate::synthdata::{default_intrinsics, frame_stem, PoseRecord};

pub const POSES_FILE: &str = "poses.json";
pub const CLOUD_FILE: &str = "cloud.ply";
pub const MEMORY_STATS_FILE: &str = "memory_stats.csv";

#[derive(Clone, Debug, Default)]
pub struct InferOptions {
    pub dump_memory_stats: bool,
    pub dump_light: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct InferSummary {
    pub frames: usize,
    pub confidence_threshold: f64,
    pub cloud_points: usize,
    pub stats: Vec<StepStats>,
}

/// Consecutive `frame_00000.png, frame_00001.png, ...` and the intrinsics
/// stored next to them (a default camera when `intrinsics.json` is absent).
pub fn read_frames<S: Scalar>(dir: &Path) -> Result<(Vec<Tensor<S>>, Option<Intrinsics>)> {
    if !dir.is_dir() {
        return Err(Error::ingestion(dir, "frame directory not found"));
    }
    let mut frames = Vec::new();
    loop {
        let path = dir.join(format!("{}.png", frame_stem(frames.len())));
        if !path.exists() {
            break;
        }
        frames.push(io::read_png(&path)?);
    }
    if frames.is_empty() {
        return Err(Error::ingestion(dir.join("frame_00000.png"), "no frames found"));
    }
    let k_path = dir.join("intrinsics.json");
    let k = if k_path.exists() {
        let k: Intrinsics = io::read_json(&k_path)?;
        k.validate().map_err(|e| Error::ingestion(&k_path, e.to_string()))?;
        Some(k)
    } else {
        None
    };
    Ok((frames, k))
}

/// Runs the stream over `frames` in index order.
pub fn run_stream<S: Scalar>(
    model: &Model,
    store: &crate::numerics::ParamStore<S>,
    frames: &[Tensor<S>],
    k: &Intrinsics,
) -> Result<(Vec<FrameOutput<S>>, Vec<StepStats>)> {
    let mut state = StreamState::new(model.cfg.dim);
    let mut outputs = Vec::with_capacity(frames.len());
    let mut stats = Vec::with_capacity(frames.len());
    for frame in frames {
        let (out, next, st) = model.step(store, &state, frame, k)?;
        outputs.push(out);
        stats.push(st);
        state = next;
    }
    Ok((outputs, stats))
}

/// Nearest-rank lower percentile: the value at index `floor(p/100 (n-1))`
/// of the sorted values.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let idx = ((p / 100.0) * (v.len() - 1) as f64).floor() as usize;
    Some(v[idx.min(v.len() - 1)])
}

/// Depth for writing: positive finite z, otherwise 0.
pub fn output_depth<S: Scalar>(out: &FrameOutput<S>) -> Tensor<f64> {
    out.depth.cast::<f64>().map(|d| if d > 0.0 && d.is_finite() { d } else { 0.0 })
}

/// Points of every frame whose confidence reaches `threshold`, colored by
/// the input frame.
pub fn fused_cloud<S: Scalar>(outputs: &[FrameOutput<S>], frames: &[Tensor<S>], threshold: f64) -> Vec<PlyPoint> {
    let mut points = Vec::new();
    for (out, img) in outputs.iter().zip(frames) {
        let hw = out.confidence.len();
        let (pm, conf, rgb) = (out.pointmap.data(), out.confidence.data(), img.data());
        for p in 0..hw {
            let position = [pm[p].as_f64(), pm[hw + p].as_f64(), pm[2 * hw + p].as_f64()];
            if conf[p].as_f64() >= threshold && position.iter().all(|v| v.is_finite()) {
                let c = |ch: usize| (rgb[ch * hw + p].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
                points.push(PlyPoint {
                    position: position.map(|v| v as f32),
                    color: [c(0), c(1), c(2)],
                });
            }
        }
    }
    points
}

/// Writes `frame_%05d.depth.pfm` per frame, `poses.json`, `cloud.ply`, and
/// optionally `memory_stats.csv` and light maps.
pub fn infer<S: Scalar>(
    cfg: &ModelConfig,
    ckpt: &Path,
    frames_dir: &Path,
    out_dir: &Path,
    opts: &InferOptions,
) -> Result<InferSummary> {
    let (store, model, _) = load_checkpoint::<S>(cfg, ckpt)?;
    let (frames, k) = read_frames::<S>(frames_dir)?;
    let k = k.unwrap_or_else(|| default_intrinsics(cfg.height, cfg.width));
    let (outputs, stats) = run_stream(&model, &store, &frames, &k)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (i, out) in outputs.iter().enumerate() {
        io::write_pfm(&out_dir.join(format!("{}.depth.pfm", frame_stem(i))), &output_depth(out))?;
        if let Some(dir) = &opts.dump_light {
            io::write_pfm(&dir.join(format!("{}.light.pfm", frame_stem(i))), &out.light)?;
        }
    }
    let poses: Vec<PoseRecord> = outputs.iter().enumerate().map(|(i, o)| PoseRecord::new(i, &o.pose)).collect();
    io::write_json(&out_dir.join(POSES_FILE), &poses)?;

    let confidences: Vec<f64> = outputs.iter().flat_map(|o| o.confidence.to_f64_vec()).collect();
    let threshold = percentile(&confidences, cfg.infer.confidence_percentile).unwrap_or(f64::INFINITY);
    let cloud = fused_cloud(&outputs, &frames, threshold);
    io::write_ply(&out_dir.join(CLOUD_FILE), &cloud)?;

    if opts.dump_memory_stats {
        let path = out_dir.join(MEMORY_STATS_FILE);
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        for s in &stats {
            w.serialize(s).map_err(|e| Error::format(&path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(InferSummary {
        frames: outputs.len(),
        confidence_threshold: threshold,
        cloud_points: cloud.len(),
        stats,
    })
}
