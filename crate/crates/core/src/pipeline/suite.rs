//! Finite-difference gradient checks for every differentiable component,
//! run in 64-bit on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::model::Model;
use super::train::clip_targets;
use crate::attention::{AttentionConfig, MultiHeadAttention, TransformerBlock};
use crate::decode_heads::{CameraPose, Decoder, Heads};
use crate::error::{Error, Result};
use crate::illumination::{blend_confidence, ias_loss, Ias, IasConfig, Residual};
use crate::loss::{loss_conf, loss_pose, loss_rgb};
use crate::memory::{memory_read, memory_update, CacheVars, MemoryEncoders};
use crate::numerics::gradcheck::randomize;
use crate::numerics::{gradcheck, GradcheckConfig, GradcheckReport, Graph, ParamInit, ParamStore, Tensor, Var};
use crate::sap::{Encoder, EncoderConfig, LowFreqInput, SapBlock, SapConfig};
use crate::synthdata::{generate_sequence, write_dataset, Dataset, SequenceConfig};

pub const MODULES: [&str; 9] = [
    "numerics",
    "wavelet",
    "attention",
    "sap",
    "memory",
    "decode_heads",
    "illumination",
    "loss",
    "model",
];

#[derive(Debug)]
pub struct SuiteEntry {
    pub module: &'static str,
    pub case: String,
    pub report: GradcheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// `sum(out * r)` for a fixed random `r`.
fn probe(g: &Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let r = g.constant(uniform(&g.shape(out), seed, -1.0, 1.0));
    Ok(g.sum(g.mul(out, r)?))
}

fn built<M>(seed: u64, f: impl FnOnce(&mut ParamInit<'_, f64>) -> Result<M>) -> Result<(ParamStore<f64>, M)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut ParamInit::new(&mut store, &mut rng))?;
    Ok((store, m))
}

struct Runner {
    module: &'static str,
    entries: Vec<SuiteEntry>,
}

impl Runner {
    fn run(&mut self, case: &str, store: &mut ParamStore<f64>, f: impl Fn(&Graph<f64>) -> Result<Var>) -> Result<()> {
        let report = gradcheck(store, f, GradcheckConfig::default())?;
        self.entries.push(SuiteEntry {
            module: self.module,
            case: case.to_string(),
            report,
        });
        Ok(())
    }
}

fn numerics(r: &mut Runner) -> Result<()> {
    let mut store = ParamStore::new();
    store.insert("a", uniform(&[2, 3, 4], 1, -1.0, 1.0))?;
    store.insert("b", uniform(&[2, 3, 4], 2, -1.0, 1.0))?;
    store.insert("pos", uniform(&[2, 3, 4], 3, 0.5, 1.5))?;
    r.run("elementwise", &mut store, |g| {
        let (a, b, pos) = (g.param("a")?, g.param("b")?, g.param("pos")?);
        let terms = [
            g.add(a, b)?,
            g.sub(a, b)?,
            g.mul(a, b)?,
            g.div(a, pos)?,
            g.neg(a),
            g.exp(a),
            g.ln(pos),
            g.sqrt(pos),
            g.tanh(a),
            g.sigmoid(a),
            g.gelu(a),
            g.abs(a),
            g.square(b),
            g.add_scalar(g.scale(a, 1.7), 0.3),
        ];
        let mut total = probe(g, terms[0], 10)?;
        for (i, &t) in terms[1..].iter().enumerate() {
            total = g.add(total, probe(g, t, 11 + i as u64)?)?;
        }
        Ok(total)
    })?;
    r.run("broadcast_and_shape", &mut store, |g| {
        let (a, b) = (g.param("a")?, g.param("b")?);
        let row = g.reshape(g.slice(b, 0, 1, 1)?, &[3, 4])?;
        let terms = [
            g.add_bcast(a, row)?,
            g.mul_bcast(a, g.slice(g.reshape(b, &[24])?, 0, 3, 4)?)?,
            g.div_bcast(a, g.add_scalar(g.square(g.slice(g.reshape(b, &[24])?, 0, 0, 4)?), 1.0))?,
            g.permute(g.square(g.permute(a, &[2, 0, 1])?), &[1, 2, 0])?,
            g.concat(&[g.slice(a, 2, 0, 2)?, g.slice(b, 2, 2, 2)?], 2)?,
            g.select_rows(g.reshape(g.concat(&[a, b], 0)?, &[12, 4])?, &[3, 0, 3])?,
            g.crop(g.square(g.pad_replicate(a, 5, 6)?), 3, 4)?,
            g.sum_axis(g.square(a), 1)?,
            g.mean_axis(g.tanh(b), 2)?,
            g.transpose(g.mul(a, b)?)?,
        ];
        let mut total = g.add(g.sum(g.square(a)), g.mean(g.exp(b)))?;
        for (i, &t) in terms.iter().enumerate() {
            total = g.add(total, probe(g, t, 30 + i as u64)?)?;
        }
        Ok(total)
    })?;

    let mut store = ParamStore::new();
    store.insert("x", uniform(&[2, 3, 4], 4, -1.0, 1.0))?;
    store.insert("w", uniform(&[5, 4], 5, -1.0, 1.0))?;
    store.insert("bias", uniform(&[5], 6, -1.0, 1.0))?;
    store.insert("gain", uniform(&[5], 7, 0.5, 1.5))?;
    store.insert("m", uniform(&[2, 4, 5], 8, -1.0, 1.0))?;
    r.run("linear_matmul_softmax_layer_norm", &mut store, |g| {
        let x = g.param("x")?;
        let lin = g.linear(x, g.param("w")?, Some(g.param("bias")?))?;
        let sm = g.softmax(g.scale(lin, 2.0))?;
        let ln = g.layer_norm(lin, g.param("gain")?, g.param("bias")?)?;
        let mm = g.matmul(g.param("x")?, g.param("m")?)?;
        let nt = g.matmul_nt(lin, lin)?;
        let parts = [probe(g, sm, 40)?, probe(g, ln, 41)?, probe(g, mm, 42)?, probe(g, nt, 43)?];
        parts.iter().skip(1).try_fold(parts[0], |a, &b| g.add(a, b))
    })?;
    for (kh, kw) in [(1, 1), (7, 1), (1, 7), (3, 3)] {
        let mut store = ParamStore::new();
        store.insert("x", uniform(&[2, 5, 6], 20, -1.0, 1.0))?;
        store.insert("k", uniform(&[3, 2, kh, kw], 21, -1.0, 1.0))?;
        store.insert("b", uniform(&[3], 22, -1.0, 1.0))?;
        r.run(&format!("conv2d_{kh}x{kw}"), &mut store, |g| {
            let y = g.conv2d(g.param("x")?, g.param("k")?, Some(g.param("b")?))?;
            probe(g, y, 23)
        })?;
    }
    Ok(())
}

fn wavelet(r: &mut Runner) -> Result<()> {
    let mut store = ParamStore::new();
    store.insert("x", uniform(&[2, 6, 8], 50, -1.0, 1.0))?;
    r.run("dwt2_idwt2", &mut store, |g| {
        let bands = g.dwt2(g.param("x")?)?;
        let back = g.idwt2(g.square(bands))?;
        Ok(g.add(probe(g, bands, 51)?, probe(g, back, 52)?)?)
    })
}

fn attention(r: &mut Runner) -> Result<()> {
    let cfg = AttentionConfig {
        dim: 4,
        heads: 2,
        window: 2,
    };
    let (mut store, m) = built(60, |i| MultiHeadAttention::init(i, "a", cfg, 1.0))?;
    randomize(&mut store, 61, 0.8);
    store.insert("x", uniform(&[4, 4], 62, -1.0, 1.0))?;
    store.insert("ctx", uniform(&[3, 4], 63, -1.0, 1.0))?;
    store.insert("map", uniform(&[4, 5, 6], 64, -1.0, 1.0))?;
    r.run("mhsa_cross_windowed", &mut store, |g| {
        let y = m.mhsa(g, g.param("x")?)?;
        let z = m.cross(g, y, g.param("ctx")?)?;
        let w = m.windowed(g, g.param("map")?)?;
        g.add(probe(g, z, 65)?, probe(g, w, 66)?)
    })?;
    let (mut store, b) = built(67, |i| TransformerBlock::init(i, "b", cfg, true, 0.5))?;
    randomize(&mut store, 68, 0.8);
    store.insert("x", uniform(&[4, 4], 69, -1.0, 1.0))?;
    store.insert("ctx", uniform(&[3, 4], 70, -1.0, 1.0))?;
    r.run("transformer_block", &mut store, |g| {
        probe(g, b.forward(g, g.param("x")?, Some(g.param("ctx")?))?, 71)
    })
}

fn sap(r: &mut Runner) -> Result<()> {
    for (input, seed) in [(LowFreqInput::Ll, 80), (LowFreqInput::Hh, 90)] {
        let cfg = SapConfig {
            channels: 2,
            heads: 1,
            window: 2,
            lowfreq_input: input,
        };
        let (mut store, b) = built(seed, |i| SapBlock::init(i, "s", cfg))?;
        randomize(&mut store, seed + 1, 1.5);
        store.insert("x", uniform(&[2, 8, 8], seed + 2, -1.0, 1.0))?;
        r.run(&format!("sap_block_{input:?}").to_lowercase(), &mut store, |g| {
            probe(g, b.forward(g, g.param("x")?)?, seed + 3)
        })?;
    }
    let cfg = EncoderConfig {
        stages: 1,
        blocks_per_stage: 1,
        patch: 4,
        dim: 4,
        heads: 2,
        window: 2,
        height: 16,
        width: 16,
        lowfreq_input: LowFreqInput::Ll,
    };
    let (mut store, enc) = built(95, |i| Encoder::init(i, "enc", cfg))?;
    randomize(&mut store, 96, 0.5);
    store.insert("img", uniform(&[3, 16, 16], 97, 0.0, 1.0))?;
    r.run("encoder", &mut store, |g| probe(g, enc.encode(g, g.param("img")?)?, 98))
}

fn memory(r: &mut Runner) -> Result<()> {
    let (mut store, enc) = built(100, |i| MemoryEncoders::init(i, "mem", 4))?;
    randomize(&mut store, 101, 0.8);
    store.insert("keys", uniform(&[5, 4], 102, -1.0, 1.0))?;
    store.insert("values", uniform(&[5, 4], 103, -1.0, 1.0))?;
    store.insert("f_prev", uniform(&[3, 4], 104, -1.0, 1.0))?;
    store.insert("dec", uniform(&[3, 4], 105, -1.0, 1.0))?;
    r.run("read_update", &mut store, |g| {
        let cache = CacheVars {
            keys: g.param("keys")?,
            values: g.param("values")?,
        };
        let read = memory_read(g, g.param("f_prev")?, &cache)?;
        let next = memory_update(g, &cache, read.features, g.param("dec")?, &enc)?;
        let parts = [
            probe(g, read.features, 106)?,
            probe(g, next.keys, 107)?,
            probe(g, next.values, 108)?,
        ];
        parts.iter().skip(1).try_fold(parts[0], |a, &b| g.add(a, b))
    })
}

fn decode_heads(r: &mut Runner) -> Result<()> {
    let cfg = AttentionConfig {
        dim: 4,
        heads: 2,
        window: 2,
    };
    let (mut store, (dec, heads)) = built(110, |i| {
        Ok((Decoder::init(i, "dec", cfg, 2)?, Heads::init(i, "heads", 4, 4, (2, 2))?))
    })?;
    randomize(&mut store, 111, 0.8);
    // keep the raw quaternion away from w = 0, where the sign flip jumps
    store.get_mut("heads.pose.fc2.bias").expect("pose bias").value.data_mut()[0] = 3.0;
    store.insert("ft", uniform(&[4, 4], 112, -1.0, 1.0))?;
    store.insert("fp", uniform(&[4, 4], 113, -1.0, 1.0))?;
    r.run("decoder_heads", &mut store, |g| {
        let (x, y) = dec.decode_pair(g, g.param("ft")?, g.param("fp")?)?;
        let o = heads.forward(g, x)?;
        let parts = [
            probe(g, y, 114)?,
            probe(g, o.pointmap, 115)?,
            probe(g, o.confidence, 116)?,
            probe(g, o.rgb, 117)?,
            probe(g, o.rotation, 118)?,
            probe(g, o.translation, 119)?,
        ];
        parts.iter().skip(1).try_fold(parts[0], |a, &b| g.add(a, b))
    })
}

fn illumination(r: &mut Runner) -> Result<()> {
    for (residual, seed) in [(Residual::Abs, 120), (Residual::Square, 130)] {
        let cfg = IasConfig {
            hidden: 3,
            residual,
            ..IasConfig::default()
        };
        let (mut store, ias) = built(seed, |i| Ias::init(i, cfg))?;
        randomize(&mut store, seed + 1, 0.7);
        let img = uniform(&[3, 5, 5], seed + 2, 0.0, 1.0);
        r.run(&format!("ias_loss_{residual:?}").to_lowercase(), &mut store, |g| {
            let x = g.constant(img.clone());
            let out = ias.forward(g, x)?;
            ias_loss(g, x, &out, &cfg)
        })?;
    }
    let mut store = ParamStore::new();
    store.insert("c", uniform(&[3, 3], 140, 1.0, 3.0))?;
    store.insert("l", uniform(&[3, 3], 141, 0.0, 1.0))?;
    store.insert("alpha", Tensor::scalar(0.3))?;
    r.run("blend_confidence", &mut store, |g| {
        let b = blend_confidence(g, g.param("c")?, g.param("l")?, g.param("alpha")?)?;
        probe(g, b, 142)
    })
}

/// Small-width model on a 32x32 two-frame synthetic clip, checked at its
/// initial parameters.
pub fn gradcheck_model_config() -> ModelConfig {
    let mut cfg = ModelConfig {
        height: 32,
        width: 32,
        patch: 8,
        dim: 8,
        heads: 2,
        window: 2,
        ..ModelConfig::default()
    };
    cfg.encoder.stages = 1;
    cfg.decoder.blocks = 1;
    cfg.ias.hidden = 4;
    cfg.train.clip_len = 2;
    cfg
}

fn two_frame_sample() -> Result<Dataset> {
    let dir = std::env::temp_dir().join(format!("streamgeo-gradcheck-{}", std::process::id()));
    let seq = SequenceConfig::new(5, 2, 32, 32);
    let (scene, samples) = generate_sequence(&seq)?;
    write_dataset(&dir, &seq, &scene, &samples)?;
    let data = Dataset::load(&dir);
    let _ = std::fs::remove_dir_all(&dir);
    data
}

fn loss_terms(r: &mut Runner) -> Result<()> {
    let gt = uniform(&[3, 4, 5], 160, -2.0, 2.0);
    let valid: Vec<bool> = (0..20).map(|i| i % 7 != 3).collect();
    let mut store = ParamStore::new();
    store.insert("x", uniform(&[3, 4, 5], 161, -2.0, 2.0))?;
    store.insert("c", uniform(&[4, 5], 162, 1.0, 3.0))?;
    r.run("loss_conf", &mut store, |g| {
        loss_conf(g, g.param("x")?, &gt, &valid, g.param("c")?, 0.2)
    })?;

    let pose = CameraPose::new([0.9, 0.1, -0.3, 0.2], [0.4, -0.1, 0.7])?;
    for (name, sign) in [("loss_pose", 1.0), ("loss_pose_flipped", -1.0)] {
        let mut store = ParamStore::new();
        let q = uniform(&[4], 163, -0.2, 0.2);
        let q: Vec<f64> = q.data().iter().zip(&pose.q).map(|(d, v)| sign * v + d).collect();
        store.insert("q", Tensor::from_vec(&[4], q)?)?;
        store.insert("t", uniform(&[3], 164, -1.0, 1.0))?;
        r.run(name, &mut store, |g| loss_pose(g, g.param("q")?, g.param("t")?, &pose))?;
    }

    let img = uniform(&[3, 4, 4], 165, 0.0, 1.0);
    let mut store = ParamStore::new();
    store.insert("rgb", uniform(&[3, 4, 4], 166, 0.0, 1.0))?;
    r.run("loss_rgb", &mut store, |g| {
        let x = g.constant(img.clone());
        loss_rgb(g, g.param("rgb")?, x)
    })
}

fn full_loss(r: &mut Runner) -> Result<()> {
    let data = two_frame_sample()?;
    let targets = clip_targets::<f64>(&data, 0, 2)?;
    let cfg = gradcheck_model_config();
    let (mut store, model) = Model::init::<f64>(&cfg)?;
    store.get_mut("heads.pose.fc2.bias").expect("pose bias").value.data_mut()[0] = 3.0;
    store.freeze_prefix(crate::illumination::IAS_PREFIX);
    r.run("total_loss_32x32_two_frames", &mut store, |g| Ok(model.clip_loss(g, &targets)?.0))
}

/// Runs the checks of one module, or all of them.
pub fn run_suite(module: Option<&str>) -> Result<Vec<SuiteEntry>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::Config(format!("unknown module {m}; expected one of {}", MODULES.join(", "))));
        }
    }
    let mut entries = Vec::new();
    for &m in &MODULES {
        if module.is_some_and(|x| x != m) {
            continue;
        }
        let mut r = Runner {
            module: m,
            entries: Vec::new(),
        };
        match m {
            "numerics" => numerics(&mut r)?,
            "wavelet" => wavelet(&mut r)?,
            "attention" => attention(&mut r)?,
            "sap" => sap(&mut r)?,
            "memory" => memory(&mut r)?,
            "decode_heads" => decode_heads(&mut r)?,
            "illumination" => illumination(&mut r)?,
            "loss" => loss_terms(&mut r)?,
            _ => full_loss(&mut r)?,
        }
        entries.extend(r.entries);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_checks_pass() {
        for m in ["numerics", "wavelet", "attention", "sap", "memory", "decode_heads", "illumination", "loss"] {
            for e in run_suite(Some(m)).unwrap() {
                assert!(e.passed(), "{}/{}: {:?}", e.module, e.case, e.report.worst());
            }
        }
        assert!(run_suite(Some("nope")).is_err());
    }
}
