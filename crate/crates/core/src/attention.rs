//! Multi-head attention, window-partitioned attention and pre-norm
//! transformer blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamInit, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    /// Tile side for windowed attention.
    pub window: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("attention window must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Dense layer `x W^T + b` with parameters looked up by name.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn init<S: Scalar>(
        init: &mut ParamInit<'_, S>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        let std = gain / (inputs as f64).sqrt();
        let weight = init.normal(&format!("{name}.weight"), &[outputs, inputs], std)?;
        let bias = if bias {
            Some(init.zeros(&format!("{name}.bias"), &[outputs])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = self.bias.as_deref().map(|b| g.param(b)).transpose()?;
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
}

impl LayerNorm {
    pub fn init<S: Scalar>(init: &mut ParamInit<'_, S>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: init.ones(&format!("{name}.gain"), &[dim])?,
            bias: init.zeros(&format!("{name}.bias"), &[dim])?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Result<Var> {
        g.layer_norm(x, g.param(&self.gain)?, g.param(&self.bias)?)
    }
}

/// `linear -> gelu -> linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn init<S: Scalar>(
        init: &mut ParamInit<'_, S>,
        name: &str,
        dims: (usize, usize, usize),
        out_bias: bool,
        out_gain: f64,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::init(init, &format!("{name}.fc1"), dims.0, dims.1, true, 1.0)?,
            fc2: Linear::init(init, &format!("{name}.fc2"), dims.1, dims.2, out_bias, out_gain)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention over the trailing token axis.
/// Leading axes are treated as independent batches.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub query: Linear,
    /// No bias: a key bias only shifts every logit of a row equally.
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn init<S: Scalar>(init: &mut ParamInit<'_, S>, name: &str, cfg: AttentionConfig, out_gain: f64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        Ok(Self {
            cfg,
            query: Linear::init(init, &format!("{name}.q"), d, d, true, 1.0)?,
            key: Linear::init(init, &format!("{name}.k"), d, d, false, 1.0)?,
            value: Linear::init(init, &format!("{name}.v"), d, d, true, 1.0)?,
            out: Linear::init(init, &format!("{name}.o"), d, d, true, out_gain)?,
        })
    }

    /// `[..., N, d] -> [..., heads, N, head_dim]`
    fn split_heads<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        let r = s.len();
        let mut shape = s[..r - 1].to_vec();
        shape.extend([self.cfg.heads, self.cfg.head_dim()]);
        let x = g.reshape(x, &shape)?;
        let b = r - 2;
        let mut perm: Vec<usize> = (0..b).collect();
        perm.extend([b + 1, b, b + 2]);
        g.permute(x, &perm)
    }

    fn merge_heads<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        let b = s.len() - 3;
        let mut perm: Vec<usize> = (0..b).collect();
        perm.extend([b + 1, b, b + 2]);
        let x = g.permute(x, &perm)?;
        let mut shape = s[..b].to_vec();
        shape.extend([s[b + 1], self.cfg.dim]);
        g.reshape(x, &shape)
    }

    fn check_tokens<S: Scalar>(&self, g: &Graph<'_, S>, x: Var, op: &'static str) -> Result<usize> {
        let s = g.shape(x);
        if s.len() < 2 || s[s.len() - 1] != self.cfg.dim {
            return Err(Error::dim(op, &s, &[self.cfg.dim]));
        }
        Ok(s[s.len() - 2])
    }

    /// Row-stochastic weights `[..., heads, Nq, Nk]`.
    pub fn weights<S: Scalar>(&self, g: &Graph<'_, S>, queries: Var, context: Var) -> Result<Var> {
        let q = self.split_heads(g, self.query.forward(g, queries)?)?;
        let k = self.split_heads(g, self.key.forward(g, context)?)?;
        let logits = g.matmul_nt(q, k)?;
        let logits = g.scale(logits, S::one() / S::lit(self.cfg.head_dim() as f64).sqrt());
        g.softmax(logits)
    }

    fn attend<S: Scalar>(&self, g: &Graph<'_, S>, queries: Var, context: Var) -> Result<Var> {
        let w = self.weights(g, queries, context)?;
        let v = self.split_heads(g, self.value.forward(g, context)?)?;
        let mixed = g.matmul(w, v)?;
        let merged = self.merge_heads(g, mixed)?;
        self.out.forward(g, merged)
    }

    /// Self-attention over `[..., N, d]`.
    pub fn mhsa<S: Scalar>(&self, g: &Graph<'_, S>, tokens: Var) -> Result<Var> {
        if self.check_tokens(g, tokens, "mhsa")? == 0 {
            return Err(Error::EmptyInput("mhsa"));
        }
        self.attend(g, tokens, tokens)
    }

    /// Queries from `queries`, keys and values from `context`.
    pub fn cross<S: Scalar>(&self, g: &Graph<'_, S>, queries: Var, context: Var) -> Result<Var> {
        if self.check_tokens(g, queries, "cross_attention")? == 0 {
            return Err(Error::EmptyInput("cross_attention"));
        }
        if self.check_tokens(g, context, "cross_attention")? == 0 {
            return Err(Error::EmptyContext);
        }
        self.attend(g, queries, context)
    }

    /// Window-partitioned self-attention on a `[C, H, W]` map with channels
    /// as the token features. Extents are edge-padded to multiples of the
    /// window and cropped back afterwards.
    pub fn windowed<S: Scalar>(&self, g: &Graph<'_, S>, map: Var) -> Result<Var> {
        let win = self.cfg.window;
        if win == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        let s = g.shape(map);
        let (c, h, w) = match *s {
            [c, h, w] if c == self.cfg.dim => (c, h, w),
            _ => return Err(Error::dim("w_mhsa", &s, &[self.cfg.dim])),
        };
        if win > h.min(w) {
            return Err(Error::Config(format!("window {win} exceeds feature map {h}x{w}")));
        }
        let (hp, wp) = (h.div_ceil(win) * win, w.div_ceil(win) * win);
        let (nh, nw) = (hp / win, wp / win);
        let x = g.pad_replicate(map, hp, wp)?;
        let x = g.reshape(x, &[c, nh, win, nw, win])?;
        let x = g.permute(x, &[1, 3, 2, 4, 0])?;
        let tokens = g.reshape(x, &[nh * nw, win * win, c])?;
        let y = self.mhsa(g, tokens)?;
        let y = g.reshape(y, &[nh, nw, win, win, c])?;
        let y = g.permute(y, &[4, 0, 2, 1, 3])?;
        let y = g.reshape(y, &[c, hp, wp])?;
        g.crop(y, h, w)
    }
}

/// Pre-norm residual block: self-attention, optional cross-attention,
/// and a 4x MLP.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn init<S: Scalar>(
        init: &mut ParamInit<'_, S>,
        name: &str,
        cfg: AttentionConfig,
        with_cross: bool,
        out_gain: f64,
    ) -> Result<Self> {
        let d = cfg.dim;
        let cross = if with_cross {
            Some((
                LayerNorm::init(init, &format!("{name}.norm_cross"), d)?,
                MultiHeadAttention::init(init, &format!("{name}.cross"), cfg, out_gain)?,
            ))
        } else {
            None
        };
        Ok(Self {
            norm_attn: LayerNorm::init(init, &format!("{name}.norm_attn"), d)?,
            attn: MultiHeadAttention::init(init, &format!("{name}.attn"), cfg, out_gain)?,
            cross,
            norm_mlp: LayerNorm::init(init, &format!("{name}.norm_mlp"), d)?,
            mlp: Mlp::init(init, &format!("{name}.mlp"), (d, 4 * d, d), true, out_gain)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<'_, S>, x: Var, ctx: Option<Var>) -> Result<Var> {
        let h = self.norm_attn.forward(g, x)?;
        let mut x = g.add(x, self.attn.mhsa(g, h)?)?;
        if let (Some((norm, cross)), Some(ctx)) = (&self.cross, ctx) {
            let h = norm.forward(g, x)?;
            x = g.add(x, cross.cross(g, h, ctx)?)?;
        }
        let h = self.norm_mlp.forward(g, x)?;
        g.add(x, self.mlp.forward(g, h)?)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numerics::{gradcheck::randomize, ParamStore, Tensor};
    use crate::testutil::{assert_close, build, check, probe, random, t};

    fn cfg(dim: usize, heads: usize, window: usize) -> AttentionConfig {
        AttentionConfig { dim, heads, window }
    }

    fn attn(seed: u64, c: AttentionConfig) -> (ParamStore<f64>, MultiHeadAttention) {
        let (mut store, m) = build(seed, |i| MultiHeadAttention::init(i, "a", c, 1.0));
        randomize(&mut store, seed + 100, 0.8);
        (store, m)
    }

    fn set(store: &mut ParamStore<f64>, name: &str, data: &[f64]) {
        let p = store.get_mut(name).unwrap();
        let shape = p.value.shape().to_vec();
        p.value = t(&shape, data);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(8, 3, 2).validate().is_err());
        assert!(cfg(8, 2, 0).validate().is_err());
        assert!(cfg(0, 1, 1).validate().is_err());
        assert!(cfg(8, 2, 2).validate().is_ok());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, m) = attn(1, cfg(4, 2, 2));
        let g = Graph::inference(&store);
        let x = g.constant(random(&[1, 4], 5));
        let expect = m.out.forward(&g, m.value.forward(&g, x).unwrap()).unwrap();
        assert_close(&g.value(m.mhsa(&g, x).unwrap()), &g.value(expect), 1e-12);
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let (store, m) = attn(2, cfg(4, 2, 2));
        let g = Graph::inference(&store);
        let row = random(&[4], 6);
        let x = g.constant(Tensor::from_vec(&[2, 4], [row.data(), row.data()].concat()).unwrap());
        let y = g.value(m.mhsa(&g, x).unwrap());
        assert_eq!(&y.data()[..4], &y.data()[4..]);
    }

    fn identity_head() -> (ParamStore<f64>, MultiHeadAttention) {
        let (mut store, m) = build(0, |i| MultiHeadAttention::init(i, "a", cfg(2, 1, 1), 1.0));
        for p in ["a.q.weight", "a.k.weight", "a.v.weight", "a.o.weight"] {
            set(&mut store, p, &[1., 0., 0., 1.]);
        }
        (store, m)
    }

    #[test]
    fn hand_computed_two_token_self_attention() {
        let (store, m) = identity_head();
        let g = Graph::inference(&store);
        let x = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let y = g.value(m.mhsa(&g, x).unwrap());
        // logits diag(1/sqrt 2), off-diagonal 0
        let e = (0.5f64).sqrt().exp();
        let a = e / (e + 1.0);
        assert_close(&y, &t(&[2, 2], &[a, 1. - a, 1. - a, a]), 1e-14);
    }

    #[test]
    fn hand_computed_cross_attention() {
        let (store, m) = identity_head();
        let g = Graph::inference(&store);
        let q = g.constant(t(&[2, 2], &[2f64.sqrt() * 3f64.ln(), 0., 0., 0.]));
        let kv = g.constant(t(&[2, 2], &[1., 0., 0., 2.]));
        let y = g.value(m.cross(&g, q, kv).unwrap());
        // row 0 logits (ln 3, 0) -> (3/4, 1/4); row 1 uniform
        assert_close(&y, &t(&[2, 2], &[0.75, 0.5, 0.5, 1.0]), 1e-14);
    }

    #[test]
    fn cross_with_single_context_token() {
        let (store, m) = attn(3, cfg(4, 2, 2));
        let g = Graph::inference(&store);
        let q = g.constant(random(&[3, 4], 7));
        let ctx = g.constant(random(&[1, 4], 8));
        let y = g.value(m.cross(&g, q, ctx).unwrap());
        let v = g.value(m.out.forward(&g, m.value.forward(&g, ctx).unwrap()).unwrap());
        for row in y.data().chunks(4) {
            for (a, b) in row.iter().zip(v.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_on_itself_is_self_attention() {
        let (store, m) = attn(4, cfg(4, 2, 2));
        let g = Graph::inference(&store);
        let x = g.constant(random(&[5, 4], 9));
        assert_eq!(g.value(m.cross(&g, x, x).unwrap()).data(), g.value(m.mhsa(&g, x).unwrap()).data());
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let (store, m) = attn(5, cfg(4, 2, 2));
        let g = Graph::inference(&store);
        let empty = g.constant(Tensor::zeros(&[0, 4]));
        let x = g.constant(random(&[2, 4], 1));
        assert!(matches!(m.mhsa(&g, empty), Err(Error::EmptyInput(_))));
        assert!(matches!(m.cross(&g, x, empty), Err(Error::EmptyContext)));
        let map = g.constant(random(&[4, 3, 3], 2));
        let mut wide = m.clone();
        wide.cfg.window = 4;
        assert!(matches!(wide.windowed(&g, map), Err(Error::Config(_))));
        wide.cfg.window = 0;
        assert!(matches!(wide.windowed(&g, map), Err(Error::Config(_))));
    }

    #[test]
    fn single_window_equals_flat_attention() {
        let (store, m) = attn(6, cfg(4, 2, 4));
        let g = Graph::inference(&store);
        let map = g.constant(random(&[4, 4, 4], 10));
        let y = m.windowed(&g, map).unwrap();
        let flat = g.transpose(g.reshape(map, &[4, 16]).unwrap()).unwrap();
        let z = m.mhsa(&g, flat).unwrap();
        let z = g.reshape(g.transpose(z).unwrap(), &[4, 4, 4]).unwrap();
        assert_close(&g.value(y), &g.value(z), 1e-12);
    }

    #[test]
    fn windows_are_independent() {
        let (store, m) = attn(7, cfg(4, 2, 4));
        let g = Graph::inference(&store);
        let base = random(&[4, 8, 8], 11);
        let y0 = g.value(m.windowed(&g, g.constant(base.clone())).unwrap());
        for (tile, seed) in [((0, 0), 1), ((0, 4), 2), ((4, 0), 3), ((4, 4), 4)] {
            for zero in [true, false] {
                let noise = random(&[4, 8, 8], 50 + seed);
                let mut x = base.clone();
                for c in 0..4 {
                    for i in tile.0..tile.0 + 4 {
                        for j in tile.1..tile.1 + 4 {
                            let v = if zero { 0.0 } else { x.at(&[c, i, j]) + noise.at(&[c, i, j]) };
                            x.set(&[c, i, j], v);
                        }
                    }
                }
                let y = g.value(m.windowed(&g, g.constant(x)).unwrap());
                for c in 0..4 {
                    for i in 0..8 {
                        for j in 0..8 {
                            let inside = (tile.0..tile.0 + 4).contains(&i) && (tile.1..tile.1 + 4).contains(&j);
                            if !inside {
                                assert_eq!(y.at(&[c, i, j]), y0.at(&[c, i, j]));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn constant_map_stays_constant() {
        let (store, m) = attn(8, cfg(4, 2, 4));
        let g = Graph::inference(&store);
        let v = random(&[4], 12);
        let map = Tensor::from_vec(&[4, 6, 6], v.data().iter().flat_map(|&x| [x; 36]).collect()).unwrap();
        let y = g.value(m.windowed(&g, g.constant(map)).unwrap());
        let tok = g.constant(t(&[1, 4], v.data()));
        let expect = g.value(m.out.forward(&g, m.value.forward(&g, tok).unwrap()).unwrap());
        for c in 0..4 {
            for p in 0..36 {
                assert!((y.data()[c * 36 + p] - expect.data()[c]).abs() < 1e-12);
            }
        }
    }

    fn block(seed: u64, cross: bool) -> (ParamStore<f64>, TransformerBlock) {
        build(seed, |i| TransformerBlock::init(i, "b", cfg(4, 2, 2), cross, 1.0))
    }

    #[test]
    fn block_with_zero_output_projections_is_identity() {
        let (mut store, b) = block(9, true);
        for p in ["b.attn.o", "b.cross.o", "b.mlp.fc2"] {
            for s in ["weight", "bias"] {
                let v = &mut store.get_mut(&format!("{p}.{s}")).unwrap().value;
                *v = Tensor::zeros(v.shape());
            }
        }
        let g = Graph::inference(&store);
        let x = g.constant(random(&[4, 4], 13));
        let ctx = g.constant(random(&[3, 4], 14));
        let y = b.forward(&g, x, Some(ctx)).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn block_without_context_skips_cross_attention() {
        let (store, b) = block(10, true);
        let g = Graph::inference(&store);
        let x = random(&[4, 4], 15);
        let y = g.value(b.forward(&g, g.constant(x.clone()), None).unwrap());
        let xv = g.constant(x.clone());
        let h = b.norm_attn.forward(&g, xv).unwrap();
        let x1 = g.add(xv, b.attn.mhsa(&g, h).unwrap()).unwrap();
        let h = b.norm_mlp.forward(&g, x1).unwrap();
        let x2 = g.add(x1, b.mlp.forward(&g, h).unwrap()).unwrap();
        assert_eq!(y.data(), g.value(x2).data());
    }

    #[test]
    fn attention_modules_pass_gradcheck() {
        let (mut store, m) = attn(11, cfg(4, 2, 2));
        store.insert("x", random(&[4, 4], 16)).unwrap();
        store.insert("ctx", random(&[3, 4], 17)).unwrap();
        check(&mut store, |g| {
            let x = g.param("x")?;
            let y = m.mhsa(g, x)?;
            let z = m.cross(g, y, g.param("ctx")?)?;
            probe(g, z, 18)
        });

        let (mut store, m) = attn(12, cfg(4, 2, 2));
        store.insert("map", random(&[4, 5, 6], 19)).unwrap();
        check(&mut store, |g| probe(g, m.windowed(g, g.param("map")?)?, 20));
    }

    #[test]
    fn transformer_block_passes_gradcheck() {
        let (mut store, b) = block(13, true);
        randomize(&mut store, 21, 0.8);
        store.insert("x", random(&[4, 4], 22)).unwrap();
        store.insert("ctx", random(&[3, 4], 23)).unwrap();
        check(&mut store, |g| {
            let y = b.forward(g, g.param("x")?, Some(g.param("ctx")?))?;
            probe(g, y, 24)
        });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn attention_rows_sum_to_one(seed in 0u64..1000, n in 1usize..8, k in 1usize..8) {
            let (store, m) = attn(seed, cfg(4, 2, 2));
            let g = Graph::inference(&store);
            let q = g.constant(random(&[n, 4], seed + 1).map(|v| 3.0 * v));
            let c = g.constant(random(&[k, 4], seed + 2).map(|v| 3.0 * v));
            let w = g.value(m.weights(&g, q, c).unwrap());
            prop_assert_eq!(w.shape(), &[2, n, k]);
            for row in w.data().chunks(k) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn self_attention_is_permutation_equivariant(
            seed in 0u64..1000,
            perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let (store, m) = attn(seed, cfg(4, 2, 2));
            let g = Graph::inference(&store);
            let x = g.constant(random(&[6, 4], seed + 3));
            let y = g.value(m.mhsa(&g, x).unwrap());
            let xp = g.select_rows(x, &perm).unwrap();
            let yp = g.value(m.mhsa(&g, xp).unwrap());
            for (r, &p) in perm.iter().enumerate() {
                for c in 0..4 {
                    prop_assert!((yp.at(&[r, c]) - y.at(&[p, c])).abs() < 1e-12);
                }
            }
        }
    }
}
