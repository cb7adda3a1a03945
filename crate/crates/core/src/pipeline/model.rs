//! Model assembly and the per-frame streaming step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::decode_heads::{pointmap_to_depth, CameraPose, Decoder, HeadOutput, Heads, Intrinsics};
use crate::error::{Error, Result};
use crate::illumination::Ias;
use crate::loss::{total_loss, FrameTarget, LossTerms};
use crate::memory::{memory_forget, memory_read, memory_update, CacheVars, MemoryCache, MemoryEncoders};
use crate::numerics::{Graph, ParamInit, ParamStore, Scalar, Tensor, Var};
use crate::sap::Encoder;

/// Name of the raw confidence blend parameter, `alpha = sigmoid(raw)`.
pub const ALPHA: &str = "alpha";

/// Stages of one streaming step, reported to a trace hook in call order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Encode,
    Read,
    Forget,
    Decode,
    Heads,
    Update,
}

/// Cache bookkeeping for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepStats {
    pub frame: usize,
    pub cache_before: usize,
    pub forgotten: usize,
    pub appended: usize,
    pub cache_after: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub heads: Heads,
    pub memory: MemoryEncoders,
    pub ias: Ias,
}

/// Stream state while a differentiable clip is being recorded.
#[derive(Clone, Copy, Debug)]
pub struct GraphState {
    pub cache: CacheVars,
    pub f_prev: Option<Var>,
    pub frame: usize,
}

impl GraphState {
    pub fn new<S: Scalar>(g: &Graph<'_, S>, dim: usize) -> Self {
        Self {
            cache: CacheVars::empty(g, dim),
            f_prev: None,
            frame: 0,
        }
    }
}

/// Outputs of one step on the graph. `light` is detached.
#[derive(Clone, Copy, Debug)]
pub struct FrameVars {
    pub heads: HeadOutput,
    pub light: Var,
}

/// Stream state between frames at inference time.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState<S> {
    pub cache: MemoryCache<S>,
    pub f_prev: Option<Tensor<S>>,
    pub frame: usize,
}

impl<S: Scalar> StreamState<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            cache: MemoryCache::empty(dim),
            f_prev: None,
            frame: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput<S> {
    /// `[3, H, W]` in the stream's reference frame.
    pub pointmap: Tensor<S>,
    /// `[H, W]`, at least 1.
    pub confidence: Tensor<S>,
    pub rgb: Tensor<S>,
    /// `[H, W]` light-influence map of the illumination model.
    pub light: Tensor<S>,
    pub pose: CameraPose,
    /// `[H, W]` z-depth in this frame's camera.
    pub depth: Tensor<S>,
    /// Pixels whose point lies in front of the camera and projects into
    /// the image.
    pub valid: Vec<bool>,
}

impl Model {
    /// Builds every module into a fresh store, seeded by `cfg.seed`.
    pub fn init<S: Scalar>(cfg: &ModelConfig) -> Result<(ParamStore<S>, Self)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = {
            let mut init = ParamInit::new(&mut store, &mut rng);
            let encoder = Encoder::init(&mut init, "encoder", cfg.encoder_config())?;
            let decoder = Decoder::init(&mut init, "decoder", cfg.attention(), cfg.decoder.blocks)?;
            let heads = Heads::init(&mut init, "heads", cfg.dim, cfg.patch, cfg.grid())?;
            let memory = MemoryEncoders::init(&mut init, "memory", cfg.dim)?;
            let ias = Ias::init(&mut init, cfg.ias)?;
            init.constant(ALPHA, Tensor::scalar(S::zero()))?;
            Self {
                cfg: *cfg,
                encoder,
                decoder,
                heads,
                memory,
                ias,
            }
        };
        Ok((store, model))
    }

    pub fn alpha<S: Scalar>(store: &ParamStore<S>) -> f64 {
        let raw = store.get(ALPHA).map(|p| p.value.item().as_f64()).unwrap_or(0.0);
        1.0 / (1.0 + (-raw).exp())
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape != [3, self.cfg.height, self.cfg.width] {
            return Err(Error::Config(format!(
                "frame has shape {shape:?}, model expects [3, {}, {}]",
                self.cfg.height, self.cfg.width
            )));
        }
        Ok(())
    }

    /// encode, read, forget, decode, heads, update. The first frame of a
    /// stream is paired with itself.
    pub fn step_graph<S: Scalar>(
        &self,
        g: &Graph<'_, S>,
        state: &GraphState,
        image: Var,
        trace: &mut dyn FnMut(Phase),
    ) -> Result<(FrameVars, GraphState, StepStats)> {
        self.check_image(&g.shape(image))?;
        trace(Phase::Encode);
        let f_t = self.encoder.encode(g, image)?;
        let f_prev = state.f_prev.unwrap_or(f_t);
        let cache_before = state.cache.len(g);

        trace(Phase::Read);
        let read = memory_read(g, f_prev, &state.cache)?;
        trace(Phase::Forget);
        let weights = g.value(read.weights);
        let (cache, _) = memory_forget(g, &state.cache, &weights, &self.cfg.memory)?;
        let kept = cache.len(g);

        trace(Phase::Decode);
        let (dec_t, dec_prev) = self.decoder.decode_pair(g, f_t, read.features)?;
        trace(Phase::Heads);
        let heads = self.heads.forward(g, dec_t)?;
        let light = {
            let out = self.ias.forward(g, image)?;
            g.constant(g.value(out.light).as_ref().clone())
        };

        trace(Phase::Update);
        let cache = memory_update(g, &cache, read.features, dec_prev, &self.memory)?;
        let cache_after = cache.len(g);
        let stats = StepStats {
            frame: state.frame,
            cache_before,
            forgotten: cache_before - kept,
            appended: cache_after - kept,
            cache_after,
        };
        let next = GraphState {
            cache,
            f_prev: Some(f_t),
            frame: state.frame + 1,
        };
        Ok((FrameVars { heads, light }, next, stats))
    }

    /// Streams a clip from an empty state and returns the mean total loss
    /// with per-frame terms and cache statistics.
    pub fn clip_loss<S: Scalar>(
        &self,
        g: &Graph<'_, S>,
        frames: &[FrameTarget<S>],
    ) -> Result<(Var, Vec<LossTerms>, Vec<StepStats>)> {
        if frames.is_empty() {
            return Err(Error::Config("clip has no frames".into()));
        }
        let alpha = g.param(ALPHA)?;
        let mut state = GraphState::new(g, self.cfg.dim);
        let mut terms = Vec::with_capacity(frames.len());
        let mut stats = Vec::with_capacity(frames.len());
        for target in frames {
            let image = g.constant(target.image.clone());
            let (out, next, st) = self.step_graph(g, &state, image, &mut |_| {})?;
            terms.push(total_loss(g, &out.heads, target, out.light, alpha, &self.cfg.loss)?);
            stats.push(st);
            state = next;
        }
        let sum = terms.iter().skip(1).try_fold(terms[0].total, |a, t| g.add(a, t.total))?;
        Ok((g.scale(sum, S::one() / S::lit(frames.len() as f64)), terms, stats))
    }

    pub fn step<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        state: &StreamState<S>,
        image: &Tensor<S>,
        k: &Intrinsics,
    ) -> Result<(FrameOutput<S>, StreamState<S>, StepStats)> {
        self.step_traced(store, state, image, k, &mut |_| {})
    }

    pub fn step_traced<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        state: &StreamState<S>,
        image: &Tensor<S>,
        k: &Intrinsics,
        trace: &mut dyn FnMut(Phase),
    ) -> Result<(FrameOutput<S>, StreamState<S>, StepStats)> {
        self.check_image(image.shape())?;
        if state.cache.dim() != self.cfg.dim {
            return Err(Error::Config(format!(
                "stream cache has width {}, model has {}",
                state.cache.dim(),
                self.cfg.dim
            )));
        }
        let g = Graph::inference(store);
        let gs = GraphState {
            cache: state.cache.lift(&g),
            f_prev: state.f_prev.as_ref().map(|f| g.constant(f.clone())),
            frame: state.frame,
        };
        let (out, next, stats) = self.step_graph(&g, &gs, g.constant(image.clone()), trace)?;
        let pose = out.heads.pose(&g)?;
        let pointmap = g.value(out.heads.pointmap).as_ref().clone();
        let (depth, valid) = pointmap_to_depth(&pointmap, &pose, k)?;
        let output = FrameOutput {
            pointmap,
            confidence: g.value(out.heads.confidence).as_ref().clone(),
            rgb: g.value(out.heads.rgb).as_ref().clone(),
            light: g.value(out.light).as_ref().clone(),
            pose,
            depth,
            valid,
        };
        let next = StreamState {
            cache: next.cache.to_cache(&g),
            f_prev: next.f_prev.map(|v| g.value(v).as_ref().clone()),
            frame: next.frame,
        };
        Ok((output, next, stats))
    }
}
