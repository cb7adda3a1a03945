//! Illumination-aware supervision: a small conv net splits an image into an
//! intrinsic image and a light-influence map, trained with a gradient-domain
//! Retinex loss, and the light map is blended into the confidence map.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{clipped_step, Graph, ParamInit, ParamStore, Scalar, Tensor, Var};
use crate::sap::Conv2d;

/// Penalty applied to the per-entry Retinex residual.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Residual {
    #[default]
    Abs,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IasConfig {
    pub hidden: usize,
    pub residual: Residual,
    /// Weight of the `mean(L)` regularizer.
    pub light_weight: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
}

impl Default for IasConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            residual: Residual::Abs,
            light_weight: 0.1,
            eps: 1e-3,
            epochs: 1,
            batch: 8,
            learning_rate: 0.05,
            clip_norm: 1.0,
        }
    }
}

impl IasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("ias hidden, batch and epochs must be positive".into()));
        }
        if !(self.eps > 0.0) || !(self.light_weight >= 0.0) || !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("invalid ias settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IasOutput {
    /// `[3, H, W]` in `(0, 1)`
    pub intrinsic: Var,
    /// `[H, W]` in `(0, 1)`
    pub light: Var,
}

/// Four stride-1 3x3 convolutions `3 -> h -> h -> h -> 4` with GELU between.
#[derive(Clone, Debug)]
pub struct Ias {
    pub cfg: IasConfig,
    layers: Vec<Conv2d>,
}

pub const IAS_PREFIX: &str = "ias";

impl Ias {
    pub fn init<S: Scalar>(init: &mut ParamInit<'_, S>, cfg: IasConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let dims = [(3, h), (h, h), (h, h), (h, 4)];
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| Conv2d::init(init, &format!("{IAS_PREFIX}.conv{i}"), [cout, cin, 3, 3], false))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, layers })
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<'_, S>, image: Var) -> Result<IasOutput> {
        let s = g.shape(image);
        let (h, w) = match *s {
            [3, h, w] => (h, w),
            _ => return Err(Error::dim("ias_forward", &s, &[3])),
        };
        let mut x = image;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i + 1 < self.layers.len() {
                x = g.gelu(x);
            }
        }
        let x = g.sigmoid(x);
        Ok(IasOutput {
            intrinsic: g.slice(x, 0, 0, 3)?,
            light: g.reshape(g.slice(x, 0, 3, 1)?, &[h, w])?,
        })
    }
}

/// `log(|forward difference| + eps)` horizontally and vertically:
/// `[C, H, W] -> [C, 2, H, W]`. The last column (row) is replicated, so its
/// difference is zero.
pub fn image_log_gradient<S: Scalar>(g: &Graph<'_, S>, x: Var, eps: f64) -> Result<Var> {
    let s = g.shape(x);
    let (c, h, w) = match *s {
        [c, h, w] if h > 0 && w > 0 => (c, h, w),
        _ => return Err(Error::dim("image_log_gradient", &s, &[])),
    };
    let padded = g.pad_replicate(x, h + 1, w + 1)?;
    let right = g.crop(g.slice(padded, 2, 1, w)?, h, w)?;
    let below = g.crop(g.slice(padded, 1, 1, h)?, h, w)?;
    let dx = g.sub(right, x)?;
    let dy = g.sub(below, x)?;
    let e = S::lit(eps);
    let lx = g.ln(g.add_scalar(g.abs(dx), e));
    let ly = g.ln(g.add_scalar(g.abs(dy), e));
    let lx = g.reshape(lx, &[c, 1, h, w])?;
    let ly = g.reshape(ly, &[c, 1, h, w])?;
    g.concat(&[lx, ly], 1)
}

/// Loss on precomputed log-gradient fields `[C, 2, H, W]` and a light map
/// `[H, W]`: `mean(rho((1 - L) grad_I - grad_A)) + light_weight * mean(L)`.
pub fn ias_loss_from_gradients<S: Scalar>(
    g: &Graph<'_, S>,
    grad_image: Var,
    grad_intrinsic: Var,
    light: Var,
    cfg: &IasConfig,
) -> Result<Var> {
    let shape = g.shape(grad_image);
    let l = g.broadcast_to(light, &shape)?;
    let one_minus = g.add_scalar(g.neg(l), S::one());
    let r = g.sub(g.mul(one_minus, grad_image)?, grad_intrinsic)?;
    let penalty = match cfg.residual {
        Residual::Abs => g.abs(r),
        Residual::Square => g.square(r),
    };
    let reg = g.scale(g.mean(light), S::lit(cfg.light_weight));
    g.add(g.mean(penalty), reg)
}

pub fn ias_loss<S: Scalar>(g: &Graph<'_, S>, image: Var, out: &IasOutput, cfg: &IasConfig) -> Result<Var> {
    let gi = image_log_gradient(g, image, cfg.eps)?;
    let ga = image_log_gradient(g, out.intrinsic, cfg.eps)?;
    ias_loss_from_gradients(g, gi, ga, out.light, cfg)
}

/// `alpha C + (1 - alpha) L` with `alpha = sigmoid(alpha_raw)`.
pub fn blend_confidence<S: Scalar>(g: &Graph<'_, S>, confidence: Var, light: Var, alpha_raw: Var) -> Result<Var> {
    let (cs, ls) = (g.shape(confidence), g.shape(light));
    if cs != ls {
        return Err(Error::dim("blend_confidence", &cs, &ls));
    }
    let alpha = g.sigmoid(alpha_raw);
    let beta = g.add_scalar(g.neg(alpha), S::one());
    g.add(g.mul_bcast(confidence, alpha)?, g.mul_bcast(light, beta)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// Mean IAS loss over `images` at the current parameters.
pub fn ias_dataset_loss<S: Scalar>(store: &ParamStore<S>, ias: &Ias, images: &[Tensor<S>]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Config("ias dataset is empty".into()));
    }
    let mut total = 0.0;
    for img in images {
        let g = Graph::inference(store);
        let x = g.constant(img.clone());
        let out = ias.forward(&g, x)?;
        total += g.value(ias_loss(&g, x, &out, &ias.cfg)?).item().as_f64();
    }
    Ok(total / images.len() as f64)
}

/// Minimizes the IAS loss over shuffled mini-batches, then freezes every
/// IAS parameter.
pub fn pretrain_ias<S: Scalar>(
    store: &mut ParamStore<S>,
    ias: &Ias,
    images: &[Tensor<S>],
    seed: u64,
) -> Result<PretrainReport> {
    let cfg = ias.cfg;
    let initial_loss = ias_dataset_loss(store, ias, images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            let grads = {
                let g = Graph::new(store);
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    let x = g.constant(images[i].clone());
                    let out = ias.forward(&g, x)?;
                    losses.push(ias_loss(&g, x, &out, &cfg)?);
                }
                let sum = losses.iter().skip(1).try_fold(losses[0], |a, &b| g.add(a, b))?;
                let loss = g.scale(sum, S::one() / S::lit(batch.len() as f64));
                g.backward(loss)?
            };
            clipped_step(store, &grads, cfg.learning_rate, cfg.clip_norm);
            steps += 1;
        }
    }
    store.freeze_prefix(IAS_PREFIX);
    Ok(PretrainReport {
        initial_loss,
        final_loss: ias_dataset_loss(store, ias, images)?,
        steps,
    })
}
