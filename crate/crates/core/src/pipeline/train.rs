//! Two-phase training: illumination pretraining, then clipped gradient
//! descent on the total loss over short streamed clips.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::Model;
use crate::decode_heads::CameraPose;
use crate::error::{Error, Result};
use crate::illumination::{pretrain_ias, PretrainReport, IAS_PREFIX};
use crate::loss::FrameTarget;
use crate::numerics::checkpoint::{self, Records};
use crate::numerics::{clipped_step, Graph, ParamStore, Scalar, Tensor};
use crate::synthdata::Dataset;

/// Checkpoint record holding the number of completed steps.
pub const STEP_RECORD: &str = "train.step";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Total step count to reach; defaults to the config value.
    pub steps: Option<usize>,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Load the frozen illumination model from here if the file exists,
    /// otherwise pretrain and save it here.
    pub ias_ckpt: Option<PathBuf>,
    /// CSV log path; defaults to the checkpoint path with a `csv` extension.
    pub log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub l_conf: f64,
    pub l_pose: f64,
    pub l_rgb: f64,
    pub total: f64,
    pub alpha: f64,
    pub cache_size: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub first_step: usize,
    pub rows: Vec<LogRow>,
    /// Mean total loss over the first and last smoothing windows of this run.
    pub initial_smoothed: Option<f64>,
    pub final_smoothed: Option<f64>,
    pub ias: Option<PretrainReport>,
}

/// Mean of the first and last `window` values.
pub fn smoothed_ends(values: &[f64], window: usize) -> Option<(f64, f64)> {
    if values.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(values.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..w]), mean(&values[values.len() - w..])))
}

/// Ground truth for frames `start..start + len`, re-expressed in the
/// camera frame of `start`.
pub fn clip_targets<S: Scalar>(data: &Dataset, start: usize, len: usize) -> Result<Vec<FrameTarget<S>>> {
    if start + len > data.len() {
        return Err(Error::Config(format!(
            "clip {start}..{} exceeds {} frames",
            start + len,
            data.len()
        )));
    }
    let base = data.poses[start].inverse();
    (start..start + len)
        .map(|i| {
            let pm = &data.pointmaps[i];
            let hw = pm.len() / 3;
            let d = pm.data();
            let mut out = vec![S::zero(); 3 * hw];
            for p in 0..hw {
                let q = base.transform([d[p], d[hw + p], d[2 * hw + p]]);
                for c in 0..3 {
                    out[c * hw + p] = S::lit(q[c]);
                }
            }
            let pose = if i == start {
                CameraPose::identity()
            } else {
                base.compose(&data.poses[i])
            };
            Ok(FrameTarget {
                pointmap: Tensor::from_vec(pm.shape(), out)?,
                valid: data.valid(i),
                pose,
                image: data.images[i].cast(),
            })
        })
        .collect()
}

/// Start frame of the clip used at `step`: every start is visited once per
/// epoch in an order shuffled by `(seed, epoch)`.
pub fn clip_start(seed: u64, step: usize, starts: usize) -> usize {
    let epoch = (step / starts) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..starts).collect();
    order.shuffle(&mut rng);
    order[step % starts]
}

pub fn checkpoint_records<S: Scalar>(store: &ParamStore<S>, step: usize) -> Records {
    let mut records = checkpoint::store_records(store);
    records.push((STEP_RECORD.to_string(), Tensor::scalar(step as f32)));
    records
}

/// Loads a full checkpoint into a freshly initialized model. Returns the
/// completed step count (0 when the record is absent).
pub fn load_checkpoint<S: Scalar>(cfg: &ModelConfig, path: &Path) -> Result<(ParamStore<S>, Model, usize)> {
    let (mut store, model) = Model::init::<S>(cfg)?;
    let records = checkpoint::read_records(path)?;
    checkpoint::apply_records(&mut store, &records, "", path)?;
    store.freeze_prefix(IAS_PREFIX);
    let step = records
        .iter()
        .find(|(n, _)| n == STEP_RECORD)
        .map(|(_, t)| t.data().first().copied().unwrap_or(0.0) as usize)
        .unwrap_or(0);
    Ok((store, model, step))
}

/// Runs (or resumes) training on an in-memory dataset and returns the final
/// store with a summary. `on_step` sees every log row as it is produced.
pub fn train_dataset<S: Scalar>(
    cfg: &ModelConfig,
    data: &Dataset,
    opts: &TrainOptions,
    on_step: &mut dyn FnMut(&LogRow),
) -> Result<(ParamStore<S>, Model, TrainSummary)> {
    cfg.validate()?;
    let (h, w) = (data.meta.sequence.height, data.meta.sequence.width);
    if (h, w) != (cfg.height, cfg.width) {
        return Err(Error::Config(format!(
            "dataset frames are {h}x{w}, config expects {}x{}",
            cfg.height, cfg.width
        )));
    }
    let clip_len = cfg.train.clip_len.min(data.len());
    if clip_len == 0 {
        return Err(Error::Config("dataset has no frames".into()));
    }

    let (mut store, model, first_step, ias) = match &opts.resume {
        Some(path) => {
            let (store, model, step) = load_checkpoint::<S>(cfg, path)?;
            (store, model, step, None)
        }
        None => {
            let (mut store, model) = Model::init::<S>(cfg)?;
            let report = match &opts.ias_ckpt {
                Some(path) if path.exists() => {
                    let records = checkpoint::read_records(path)?;
                    checkpoint::apply_records(&mut store, &records, IAS_PREFIX, path)?;
                    store.freeze_prefix(IAS_PREFIX);
                    None
                }
                _ => {
                    let images: Vec<Tensor<S>> = data.images.iter().map(|t| t.cast()).collect();
                    let report = pretrain_ias(&mut store, &model.ias, &images, cfg.seed.wrapping_add(1))?;
                    if let Some(path) = &opts.ias_ckpt {
                        let records: Records = checkpoint::store_records(&store)
                            .into_iter()
                            .filter(|(n, _)| n.starts_with(IAS_PREFIX))
                            .collect();
                        crate::io::write_file(path, &checkpoint::encode(&records))?;
                    }
                    Some(report)
                }
            };
            (store, model, 0, report)
        }
    };

    let total_steps = opts.steps.unwrap_or(cfg.train.steps);
    let starts = data.len() - clip_len + 1;
    let mut rows = Vec::new();
    for step in first_step..total_steps {
        let start = clip_start(cfg.seed, step, starts);
        let targets = clip_targets::<S>(data, start, clip_len)?;
        let (grads, terms, cache_size) = {
            let g = Graph::new(&store);
            let (loss, terms, stats) = model.clip_loss(&g, &targets)?;
            let reports: Vec<_> = terms.iter().map(|t| t.report(&g)).collect();
            (g.backward(loss)?, reports, stats.last().map_or(0, |s| s.cache_after))
        };
        let n = terms.len() as f64;
        let grad_norm = clipped_step(&mut store, &grads, cfg.train.learning_rate, cfg.train.clip_norm);
        let row = LogRow {
            step,
            l_conf: terms.iter().map(|t| t.conf).sum::<f64>() / n,
            l_pose: terms.iter().map(|t| t.pose).sum::<f64>() / n,
            l_rgb: terms.iter().map(|t| t.rgb).sum::<f64>() / n,
            total: terms.iter().map(|t| t.total).sum::<f64>() / n,
            alpha: Model::alpha(&store),
            cache_size,
            grad_norm,
        };
        if !row.total.is_finite() {
            return Err(Error::Degenerate(format!("loss became {} at step {step}", row.total)));
        }
        on_step(&row);
        rows.push(row);
    }
    let totals: Vec<f64> = rows.iter().map(|r| r.total).collect();
    let ends = smoothed_ends(&totals, cfg.train.smoothing);
    let summary = TrainSummary {
        first_step,
        rows,
        initial_smoothed: ends.map(|e| e.0),
        final_smoothed: ends.map(|e| e.1),
        ias,
    };
    Ok((store, model, summary))
}

/// Loads the dataset, trains, and writes the checkpoint and CSV log. A
/// resumed run appends to the existing log.
pub fn train<S: Scalar>(cfg: &ModelConfig, data_dir: &Path, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    let data = Dataset::load(data_dir)?;
    let log_path = opts.log.clone().unwrap_or_else(|| out.with_extension("csv"));
    let append = opts.resume.is_some() && log_path.exists();
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = csv::WriterBuilder::new().has_headers(!append).from_writer(file);
    let mut log_err = None;
    let (store, _, summary) = train_dataset::<S>(cfg, &data, opts, &mut |row| {
        if log_err.is_none() {
            log_err = log.serialize(row).and_then(|_| log.flush().map_err(csv::Error::from)).err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::format(&log_path, e.to_string()));
    }
    let step = summary.rows.last().map_or(summary.first_step, |r| r.step + 1);
    crate::io::write_file(out, &checkpoint::encode(&checkpoint_records(&store, step)))?;
    Ok(summary)
}

/// Reads a training log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<LogRow>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_sequence, write_dataset, SequenceConfig};

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig {
            height: 16,
            width: 16,
            patch: 4,
            dim: 8,
            heads: 2,
            window: 2,
            ..ModelConfig::default()
        };
        cfg.encoder.stages = 1;
        cfg.decoder.blocks = 1;
        cfg.ias.hidden = 4;
        cfg.train.clip_len = 2;
        cfg.train.steps = 3;
        cfg
    }

    fn dataset(dir: &Path) {
        let seq = SequenceConfig::new(3, 4, 16, 16);
        let (scene, samples) = generate_sequence(&seq).unwrap();
        write_dataset(dir, &seq, &scene, &samples).unwrap();
    }

    #[test]
    fn smoothing_and_clip_order() {
        assert_eq!(smoothed_ends(&[1.0, 2.0, 3.0, 4.0], 2), Some((1.5, 3.5)));
        assert_eq!(smoothed_ends(&[1.0], 5), Some((1.0, 1.0)));
        assert_eq!(smoothed_ends(&[], 5), None);
        let mut epoch: Vec<usize> = (0..5).map(|s| clip_start(9, s, 5)).collect();
        epoch.sort();
        assert_eq!(epoch, vec![0, 1, 2, 3, 4]);
        assert_eq!(clip_start(9, 7, 5), clip_start(9, 7, 5));
    }

    #[test]
    fn clip_targets_start_at_identity() {
        let dir = tempfile::tempdir().unwrap();
        dataset(dir.path());
        let data = Dataset::load(dir.path()).unwrap();
        let t = clip_targets::<f64>(&data, 1, 2).unwrap();
        assert_eq!(t[0].pose, CameraPose::identity());
        let (depth, _) = crate::decode_heads::pointmap_to_depth(&t[1].pointmap, &t[1].pose, &data.intrinsics).unwrap();
        for (a, b) in depth.data().iter().zip(data.depths[2].data()) {
            assert!((a - b).abs() < 1e-3 * b.max(1.0));
        }
        assert!(clip_targets::<f64>(&data, 3, 2).is_err());
    }

    #[test]
    fn resume_matches_an_uninterrupted_run_and_freezes_ias() {
        let dir = tempfile::tempdir().unwrap();
        dataset(&dir.path().join("data"));
        let cfg = tiny();
        let data = dir.path().join("data");
        let full = dir.path().join("full.ckpt");
        let part = dir.path().join("part.ckpt");
        let resumed = dir.path().join("resumed.ckpt");
        let ias = dir.path().join("ias.ckpt");
        let opts = |steps, resume: Option<&Path>| TrainOptions {
            steps: Some(steps),
            resume: resume.map(Path::to_path_buf),
            ias_ckpt: Some(ias.clone()),
            log: None,
        };
        let s = train::<f32>(&cfg, &data, &full, &opts(3, None)).unwrap();
        assert!(s.ias.is_some());
        assert_eq!(s.rows.len(), 3);
        assert!(s.rows.iter().all(|r| r.alpha > 0.0 && r.alpha < 1.0));
        let s = train::<f32>(&cfg, &data, &part, &opts(2, None)).unwrap();
        assert!(s.ias.is_none());
        let s = train::<f32>(&cfg, &data, &resumed, &opts(3, Some(&part))).unwrap();
        assert_eq!(s.first_step, 2);
        assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&resumed).unwrap());

        let ias_before = checkpoint::read_records(&ias).unwrap();
        let after = checkpoint::read_records(&full).unwrap();
        for (name, t) in &ias_before {
            let (_, u) = after.iter().find(|(n, _)| n == name).unwrap();
            assert_eq!(t, u, "{name} changed");
        }
        let log = read_log(&full.with_extension("csv")).unwrap();
        assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn missing_dataset_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = train::<f32>(&tiny(), &dir.path().join("nope"), &dir.path().join("c"), &TrainOptions::default()).unwrap_err();
        assert!(err.is_io());
        assert!(err.to_string().contains("nope"));
    }
}
