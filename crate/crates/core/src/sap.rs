//! Structure-aware perception (wavelet-split feature block) and the staged
//! patch encoder built from transformer blocks and SAP blocks.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, Linear, TransformerBlock};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamInit, Scalar, Var};

/// Which subband feeds the pointwise low-frequency MLP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LowFreqInput {
    /// Windowed-attention output of the LL band.
    #[default]
    Ll,
    /// Convolved HH band.
    Hh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SapConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub lowfreq_input: LowFreqInput,
}

impl SapConfig {
    fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.channels,
            heads: self.heads,
            window: self.window,
        }
    }
}

/// Same-size 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: String,
    pub bias: String,
}

impl Conv2d {
    /// Fan-in normal init, or all zeros.
    pub fn init<S: Scalar>(
        init: &mut ParamInit<'_, S>,
        name: &str,
        shape: [usize; 4],
        zero: bool,
    ) -> Result<Self> {
        let kname = format!("{name}.kernel");
        let kernel = if zero {
            init.zeros(&kname, &shape)?
        } else {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            init.normal(&kname, &shape, 1.0 / fan_in.sqrt())?
        };
        Ok(Self {
            kernel,
            bias: init.zeros(&format!("{name}.bias"), &[shape[0]])?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Result<Var> {
        g.conv2d(x, g.param(&self.kernel)?, Some(g.param(&self.bias)?))
    }
}

/// Intermediate values of one SAP evaluation, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct SapBranches {
    pub ll: Var,
    pub lh: Var,
    pub hl: Var,
    pub hh: Var,
    pub f_ll: Var,
    pub f_h: Var,
    pub f_l: Var,
    pub fused: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct SapBlock {
    pub cfg: SapConfig,
    attn: crate::attention::MultiHeadAttention,
    conv_hl: Conv2d,
    conv_lh: Conv2d,
    conv_hh: Conv2d,
    high_inner: Conv2d,
    high_outer: Conv2d,
    low_fc1: Linear,
    low_fc2: Linear,
    fuse: Conv2d,
}

impl SapBlock {
    /// The fusion convolution starts at zero, so a fresh block is the identity.
    pub fn init<S: Scalar>(init: &mut ParamInit<'_, S>, name: &str, cfg: SapConfig) -> Result<Self> {
        let c = cfg.channels;
        cfg.attention().validate()?;
        Ok(Self {
            cfg,
            attn: crate::attention::MultiHeadAttention::init(init, &format!("{name}.wmhsa"), cfg.attention(), 1.0)?,
            conv_hl: Conv2d::init(init, &format!("{name}.conv_hl"), [c, c, 7, 1], false)?,
            conv_lh: Conv2d::init(init, &format!("{name}.conv_lh"), [c, c, 1, 7], false)?,
            conv_hh: Conv2d::init(init, &format!("{name}.conv_hh"), [c, c, 3, 3], false)?,
            high_inner: Conv2d::init(init, &format!("{name}.high_inner"), [c, 3 * c, 1, 1], false)?,
            high_outer: Conv2d::init(init, &format!("{name}.high_outer"), [c, c, 1, 1], false)?,
            low_fc1: Linear::init(init, &format!("{name}.low_fc1"), c, c, true, 1.0)?,
            low_fc2: Linear::init(init, &format!("{name}.low_fc2"), c, c, true, 1.0)?,
            fuse: Conv2d::init(init, &format!("{name}.fuse"), [4 * c, 2 * c, 1, 1], true)?,
        })
    }

    pub fn branches<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Result<SapBranches> {
        let s = g.shape(x);
        let c = self.cfg.channels;
        let (h, w) = match *s {
            [ch, h, w] if ch == c && h > 0 && w > 0 => (h, w),
            _ => return Err(Error::dim("sap_forward", &s, &[c])),
        };
        let padded = g.pad_replicate(x, h + h % 2, w + w % 2)?;
        let bands = g.dwt2(padded)?;
        let ll = g.slice(bands, 0, 0, c)?;
        let lh = g.slice(bands, 0, c, c)?;
        let hl = g.slice(bands, 0, 2 * c, c)?;
        let hh = g.slice(bands, 0, 3 * c, c)?;

        let f_ll = self.attn.windowed(g, ll)?;
        let f_hl = self.conv_hl.forward(g, hl)?;
        let f_lh = self.conv_lh.forward(g, lh)?;
        let f_hh = self.conv_hh.forward(g, hh)?;

        let high = g.concat(&[f_hl, f_lh, f_hh], 0)?;
        let high = g.gelu(self.high_inner.forward(g, high)?);
        let f_h = self.high_outer.forward(g, high)?;

        let low_in = match self.cfg.lowfreq_input {
            LowFreqInput::Ll => f_ll,
            LowFreqInput::Hh => f_hh,
        };
        let pointwise = g.permute(low_in, &[1, 2, 0])?;
        let low = g.gelu(self.low_fc1.forward(g, pointwise)?);
        let low = self.low_fc2.forward(g, low)?;
        let f_l = g.permute(low, &[2, 0, 1])?;

        let fused = self.fuse.forward(g, g.concat(&[f_h, f_l], 0)?)?;
        let detail = g.crop(g.idwt2(fused)?, h, w)?;
        let output = g.add(x, detail)?;
        Ok(SapBranches {
            ll,
            lh,
            hl,
            hh,
            f_ll,
            f_h,
            f_l,
            fused,
            output,
        })
    }

    /// `x + idwt(fuse(f_h, f_l))`, shape-preserving for any extents.
    pub fn forward<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Result<Var> {
        Ok(self.branches(g, x)?.output)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub height: usize,
    pub width: usize,
    pub lowfreq_input: LowFreqInput,
}

impl EncoderConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not a multiple of patch {}",
                self.height, self.width, self.patch
            )));
        }
        AttentionConfig {
            dim: self.dim,
            heads: self.heads,
            window: self.window,
        }
        .validate()
    }
}

/// `[3, H, W]` image to `[N, 3 p^2]` row-major patch tokens.
pub fn patchify<S: Scalar>(g: &Graph<'_, S>, image: Var, patch: usize) -> Result<Var> {
    let s = g.shape(image);
    let (c, h, w) = match *s {
        [c, h, w] if patch > 0 && h % patch == 0 && w % patch == 0 => (c, h, w),
        _ => return Err(Error::dim("patchify (extents must be multiples of patch)", &s, &[patch])),
    };
    let (gh, gw) = (h / patch, w / patch);
    let x = g.reshape(image, &[c, gh, patch, gw, patch])?;
    let x = g.permute(x, &[1, 3, 0, 2, 4])?;
    g.reshape(x, &[gh * gw, c * patch * patch])
}

/// Inverse of [`patchify`] for `[N, k p^2]` tokens: returns `[k, H, W]`.
pub fn unpatchify<S: Scalar>(
    g: &Graph<'_, S>,
    tokens: Var,
    channels: usize,
    grid: (usize, usize),
    patch: usize,
) -> Result<Var> {
    let (gh, gw) = grid;
    let s = g.shape(tokens);
    if s != [gh * gw, channels * patch * patch] {
        return Err(Error::dim("unpatchify", &s, &[gh * gw, channels * patch * patch]));
    }
    let x = g.reshape(tokens, &[gh, gw, channels, patch, patch])?;
    let x = g.permute(x, &[2, 0, 3, 1, 4])?;
    g.reshape(x, &[channels, gh * patch, gw * patch])
}

/// Patch embedding, learned positions, then `stages` rounds of transformer
/// blocks followed by a SAP block on the token grid.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    embed: Linear,
    positions: String,
    stages: Vec<(Vec<TransformerBlock>, SapBlock)>,
}

impl Encoder {
    pub fn init<S: Scalar>(init: &mut ParamInit<'_, S>, name: &str, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch;
        let attn = AttentionConfig {
            dim: cfg.dim,
            heads: cfg.heads,
            window: cfg.window,
        };
        let sap = SapConfig {
            channels: cfg.dim,
            heads: cfg.heads,
            window: cfg.window,
            lowfreq_input: cfg.lowfreq_input,
        };
        let embed = Linear::init(init, &format!("{name}.embed"), 3 * p * p, cfg.dim, true, 1.0)?;
        let positions = init.normal(&format!("{name}.positions"), &[cfg.tokens(), cfg.dim], 0.5)?;
        let mut stages = Vec::with_capacity(cfg.stages);
        for s in 0..cfg.stages {
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| TransformerBlock::init(init, &format!("{name}.stage{s}.block{b}"), attn, false, 0.5))
                .collect::<Result<Vec<_>>>()?;
            let sap = SapBlock::init(init, &format!("{name}.stage{s}.sap"), sap)?;
            stages.push((blocks, sap));
        }
        Ok(Self {
            cfg,
            embed,
            positions,
            stages,
        })
    }

    /// `[3, H, W]` image to `[N, d]` features.
    pub fn encode<S: Scalar>(&self, g: &Graph<'_, S>, image: Var) -> Result<Var> {
        let s = g.shape(image);
        if s != [3, self.cfg.height, self.cfg.width] {
            return Err(Error::dim("encode (expected [3, H, W], multiples of patch)", &s, &[self.cfg.patch]));
        }
        let (gh, gw) = self.cfg.grid();
        let d = self.cfg.dim;
        let tokens = patchify(g, image, self.cfg.patch)?;
        let mut x = g.add(self.embed.forward(g, tokens)?, g.param(&self.positions)?)?;
        for (blocks, sap) in &self.stages {
            for block in blocks {
                x = block.forward(g, x, None)?;
            }
            let grid = g.reshape(g.transpose(x)?, &[d, gh, gw])?;
            let grid = sap.forward(g, grid)?;
            x = g.transpose(g.reshape(grid, &[d, gh * gw])?)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradcheck::randomize, ParamStore, Tensor};
    use crate::testutil::{assert_close, build, check, probe, random};

    fn sap_cfg(c: usize, window: usize) -> SapConfig {
        SapConfig {
            channels: c,
            heads: 1,
            window,
            lowfreq_input: LowFreqInput::Ll,
        }
    }

    fn sap(seed: u64, cfg: SapConfig, random_params: bool) -> (ParamStore<f64>, SapBlock) {
        let (mut store, b) = build(seed, |i| SapBlock::init(i, "s", cfg));
        if random_params {
            randomize(&mut store, seed + 1, 0.5);
        }
        (store, b)
    }

    #[test]
    fn fresh_block_is_exact_identity() {
        for (h, w) in [(8, 8), (7, 9)] {
            let (store, b) = sap(1, sap_cfg(2, 2), false);
            let g = Graph::inference(&store);
            let x = g.constant(random(&[2, h, w], 2));
            assert_eq!(g.value(b.forward(&g, x).unwrap()).data(), g.value(x).data());
        }
    }

    #[test]
    fn all_zero_weights_are_identity() {
        let (mut store, b) = sap(2, sap_cfg(2, 2), true);
        for p in store.iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let g = Graph::inference(&store);
        let x = g.constant(random(&[2, 8, 8], 3));
        assert_eq!(g.value(b.forward(&g, x).unwrap()).data(), g.value(x).data());
    }

    #[test]
    fn shape_is_preserved() {
        for (h, w) in [(7, 7), (8, 8), (16, 16), (7, 16)] {
            let (store, b) = sap(3, sap_cfg(2, 2), true);
            let g = Graph::inference(&store);
            let y = b.forward(&g, g.constant(random(&[2, h, w], 4))).unwrap();
            assert_eq!(g.shape(y), vec![2, h, w]);
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let (store, b) = sap(4, sap_cfg(2, 2), false);
        let g = Graph::inference(&store);
        assert!(matches!(
            b.forward(&g, g.constant(random(&[3, 8, 8], 5))),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn sap_passes_gradcheck() {
        let (mut store, b) = sap(5, sap_cfg(1, 2), false);
        randomize(&mut store, 5, 1.5);
        store.insert("x", random(&[1, 8, 8], 6)).unwrap();
        check(&mut store, |g| probe(g, b.forward(g, g.param("x")?)?, 7));
    }

    #[test]
    fn printed_variant_passes_gradcheck() {
        let mut cfg = sap_cfg(2, 2);
        cfg.lowfreq_input = LowFreqInput::Hh;
        let (mut store, b) = sap(6, cfg, true);
        store.insert("x", random(&[2, 6, 6], 8)).unwrap();
        check(&mut store, |g| probe(g, b.forward(g, g.param("x")?)?, 9));
    }

    #[test]
    fn subband_routing() {
        let (store, b) = sap(7, sap_cfg(2, 2), true);
        let g = Graph::inference(&store);
        let x = random(&[2, 8, 8], 10);
        let base = b.branches(&g, g.constant(x.clone())).unwrap();

        let shifted = b.branches(&g, g.constant(x.map(|v| v + 0.75))).unwrap();
        for (a, c) in [(base.lh, shifted.lh), (base.hl, shifted.hl), (base.hh, shifted.hh), (base.f_h, shifted.f_h)] {
            assert_close(&g.value(a), &g.value(c), 1e-12);
        }
        assert!((g.value(base.ll).data()[0] - g.value(shifted.ll).data()[0]).abs() > 1.0);

        let mut checker = x.clone();
        for c in 0..2 {
            for i in 0..8 {
                for j in 0..8 {
                    let s = if (i + j) % 2 == 0 { 0.3 } else { -0.3 };
                    checker.set(&[c, i, j], x.at(&[c, i, j]) + s);
                }
            }
        }
        let checked = b.branches(&g, g.constant(checker)).unwrap();
        assert_close(&g.value(base.ll), &g.value(checked.ll), 1e-12);
        assert_close(&g.value(base.f_ll), &g.value(checked.f_ll), 1e-12);
    }

    fn enc_cfg() -> EncoderConfig {
        EncoderConfig {
            stages: 2,
            blocks_per_stage: 1,
            patch: 4,
            dim: 4,
            heads: 2,
            window: 2,
            height: 16,
            width: 16,
            lowfreq_input: LowFreqInput::Ll,
        }
    }

    #[test]
    fn patchify_round_trips() {
        let g = Graph::<f64>::standalone();
        let img = g.constant(random(&[3, 8, 12], 11));
        let tok = patchify(&g, img, 4).unwrap();
        assert_eq!(g.shape(tok), vec![6, 48]);
        // token 1 is the patch at grid (0, 1): rows 0..4, cols 4..8
        assert_eq!(g.value(tok).at(&[1, 0]), g.value(img).at(&[0, 0, 4]));
        assert_eq!(g.value(tok).at(&[1, 16 + 4 + 1]), g.value(img).at(&[1, 1, 5]));
        let back = unpatchify(&g, tok, 3, (2, 3), 4).unwrap();
        assert_eq!(g.value(back).data(), g.value(img).data());
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let (store, enc) = build(12, |i| Encoder::init(i, "enc", enc_cfg()));
        let g = Graph::inference(&store);
        let img = random(&[3, 16, 16], 13);
        let a = g.value(enc.encode(&g, g.constant(img.clone())).unwrap());
        let b = g.value(enc.encode(&g, g.constant(img)).unwrap());
        assert_eq!(a.shape(), &[16, 4]);
        assert_eq!(a.data(), b.data());
        assert!(a.all_finite());
    }

    #[test]
    fn encoder_rejects_non_multiple_extents() {
        let mut cfg = enc_cfg();
        cfg.height = 18;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("patch"), "{err}");
        let (store, enc) = build(14, |i| Encoder::init(i, "enc", enc_cfg()));
        let g = Graph::inference(&store);
        let err = enc.encode(&g, g.constant(random(&[3, 18, 16], 1))).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }) && err.to_string().contains("patch"));
    }

    #[test]
    fn toy_encoder_passes_gradcheck() {
        let mut cfg = enc_cfg();
        cfg.stages = 1;
        let (mut store, enc) = build(15, |i| Encoder::init(i, "enc", cfg));
        randomize(&mut store, 16, 0.5);
        store.insert("img", random(&[3, 16, 16], 17)).unwrap();
        check(&mut store, |g| probe(g, enc.encode(g, g.param("img")?)?, 18));
    }
}
