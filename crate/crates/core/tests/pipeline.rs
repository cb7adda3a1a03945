use std::path::Path;

use streamgeo::io::{read_pfm, read_ply};
use streamgeo::pipeline::eval::{evaluate, EvalOptions};
use streamgeo::pipeline::infer::{infer, percentile, InferOptions, CLOUD_FILE, MEMORY_STATS_FILE, POSES_FILE};
use streamgeo::pipeline::train::{load_checkpoint, train, TrainOptions};
use streamgeo::pipeline::{ModelConfig, StreamState};
use streamgeo::synthdata::{default_intrinsics, generate_sequence, write_dataset, SequenceConfig};
use streamgeo::{Error, Tensor};

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
    cfg.train.steps = 2;
    cfg
}

fn dataset(dir: &Path, frames: usize) {
    let seq = SequenceConfig::new(3, frames, 16, 16);
    let (scene, samples) = generate_sequence(&seq).unwrap();
    write_dataset(dir, &seq, &scene, &samples).unwrap();
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn train_infer_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt, out) = (tmp.path().join("data"), tmp.path().join("m.ckpt"), tmp.path().join("out"));
    dataset(&data, 4);
    let cfg = tiny();
    let summary = train::<f32>(&cfg, &data, &ckpt, &TrainOptions::default()).unwrap();
    assert_eq!(summary.rows.len(), 2);
    assert!(summary.rows.iter().all(|r| r.alpha > 0.0 && r.alpha < 1.0));

    let opts = InferOptions {
        dump_memory_stats: true,
        dump_light: None,
    };
    let s = infer::<f32>(&cfg, &ckpt, &data, &out, &opts).unwrap();
    assert_eq!(s.frames, 4);
    let names = files(&out);
    let depth_files = names.iter().filter(|n| n.ends_with(".depth.pfm")).count();
    assert_eq!(depth_files, 4);
    assert_eq!(names.len(), 4 + 3, "{names:?}");
    assert!(names.contains(&POSES_FILE.to_string()) && names.contains(&CLOUD_FILE.to_string()));
    assert!(names.contains(&MEMORY_STATS_FILE.to_string()));

    // cloud size equals the count of pixels at or above the threshold
    let (store, model, _) = load_checkpoint::<f32>(&cfg, &ckpt).unwrap();
    let k = default_intrinsics(16, 16);
    let mut state = StreamState::new(cfg.dim);
    let mut confidences = Vec::new();
    for i in 0..4 {
        let img: Tensor<f32> = streamgeo::io::read_png(&data.join(format!("frame_{i:05}.png"))).unwrap();
        let (o, next, _) = model.step(&store, &state, &img, &k).unwrap();
        confidences.extend(o.confidence.data().iter().map(|&c| c as f64));
        state = next;
    }
    let threshold = percentile(&confidences, cfg.infer.confidence_percentile).unwrap();
    let passing = confidences.iter().filter(|&&c| c >= threshold).count();
    assert_eq!(read_ply(&out.join(CLOUD_FILE)).unwrap().len(), passing);
    assert_eq!(s.cloud_points, passing);

    let depth: Tensor<f64> = read_pfm(&out.join("frame_00000.depth.pfm")).unwrap();
    assert_eq!(depth.shape(), &[16, 16]);

    let report = evaluate(&out, &data, &EvalOptions::default()).unwrap();
    assert_eq!(report.frames.len(), 4);
    assert!(report.median_scale);
    assert!(report.aggregate.depth.abs_rel.is_finite());
}

#[test]
fn inference_is_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, 3);
    let cfg = tiny();
    let ckpt = tmp.path().join("m.ckpt");
    train::<f32>(&cfg, &data, &ckpt, &TrainOptions::default()).unwrap();
    let light = tmp.path().join("light");
    for out in ["a", "b"] {
        let opts = InferOptions {
            dump_memory_stats: true,
            dump_light: Some(light.join(out)),
        };
        infer::<f32>(&cfg, &ckpt, &data, &tmp.path().join(out), &opts).unwrap();
    }
    for dir in [tmp.path(), light.as_path()] {
        let (a, b) = (dir.join("a"), dir.join("b"));
        let names = files(&a);
        assert_eq!(names, files(&b));
        for n in names {
            assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n}");
        }
    }
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, 2);
    let ckpt = tmp.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"SGEOCKPT garbage").unwrap();
    let err = infer::<f32>(&tiny(), &ckpt, &data, &tmp.path().join("out"), &InferOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err:?}");
    assert!(err.is_io());
}

#[test]
fn missing_frames_are_ingestion_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let err = train::<f32>(&tiny(), &tmp.path().join("nope"), &tmp.path().join("m.ckpt"), &TrainOptions::default())
        .unwrap_err();
    assert!(matches!(err, Error::Ingestion { .. }));
}
