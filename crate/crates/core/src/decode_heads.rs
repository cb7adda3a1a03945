//! Dual-stream decoder, dense prediction heads and camera geometry.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, Linear, TransformerBlock};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamInit, Scalar, Tensor, Var};
use crate::sap::unpatchify;

/// Camera-to-world rigid transform, `x_world = R x_cam + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Unit quaternion `(w, x, y, z)` with `w >= 0`.
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            q: [1.0, 0.0, 0.0, 0.0],
            t: [0.0; 3],
        }
    }

    /// Normalizes `q` and flips it into the `w >= 0` hemisphere.
    pub fn new(q: [f64; 4], t: [f64; 3]) -> Result<Self> {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 1e-12) || !n.is_finite() || t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("invalid pose q={q:?} t={t:?}")));
        }
        let s = if q[0] < 0.0 { -1.0 / n } else { 1.0 / n };
        Ok(Self {
            q: q.map(|v| v * s),
            t,
        })
    }

    pub fn from_rotation(r: &Matrix3<f64>, t: [f64; 3]) -> Self {
        let uq = UnitQuaternion::from_matrix(r);
        let c = uq.quaternion().coords;
        Self::new([c.w, c.x, c.y, c.z], t).expect("rotation matrix yields a unit quaternion")
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.q;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.unit_quaternion().to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.t)
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation());
        m
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        Self::from_rotation(&rt, [t.x, t.y, t.z])
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &CameraPose) -> Self {
        let r = self.rotation() * other.rotation();
        let t = self.rotation() * other.translation() + self.translation();
        Self::from_rotation(&r, [t.x, t.y, t.z])
    }

    pub fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation() * Vector3::from(p) + self.translation();
        [v.x, v.y, v.z]
    }

    /// World point into this camera's frame: `R^T (p - t)`.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation().transpose() * (Vector3::from(p) - self.translation());
        [v.x, v.y, v.z]
    }
}

/// Pinhole intrinsics in pixels; pixel `(row i, col j)` has its center at
/// `(u, v) = (j + 0.5, i + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Config(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }

    /// Camera-frame direction through the pixel center, scaled to `z = 1`.
    pub fn ray(&self, row: usize, col: usize) -> [f64; 3] {
        [
            (col as f64 + 0.5 - self.cx) / self.fx,
            (row as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        ]
    }
}

/// Per-pixel z in the camera frame, and whether the point lies in front of
/// the camera and projects inside the image.
pub fn pointmap_to_depth<S: Scalar>(
    points: &Tensor<S>,
    pose: &CameraPose,
    k: &Intrinsics,
) -> Result<(Tensor<S>, Vec<bool>)> {
    let (h, w) = match *points.shape() {
        [3, h, w] => (h, w),
        _ => return Err(Error::dim("pointmap_to_depth", points.shape(), &[3])),
    };
    let hw = h * w;
    let d = points.data();
    let mut depth = Vec::with_capacity(hw);
    let mut valid = Vec::with_capacity(hw);
    for i in 0..hw {
        let p = [d[i].as_f64(), d[hw + i].as_f64(), d[2 * hw + i].as_f64()];
        let c = pose.to_camera(p);
        let (u, v) = k.project(c);
        valid.push(c[2] > 0.0 && (0.0..w as f64).contains(&u) && (0.0..h as f64).contains(&v));
        depth.push(S::lit(c[2]));
    }
    Ok((Tensor::from_vec(&[h, w], depth)?, valid))
}

/// Both streams run through one shared stack; in each block a stream
/// cross-attends to the other stream's current features.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<TransformerBlock>,
}

impl Decoder {
    pub fn init<S: Scalar>(
        init: &mut ParamInit<'_, S>,
        name: &str,
        cfg: AttentionConfig,
        depth: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("decoder needs at least one block".into()));
        }
        let blocks = (0..depth)
            .map(|b| TransformerBlock::init(init, &format!("{name}.block{b}"), cfg, true, 0.5))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn decode_pair<S: Scalar>(&self, g: &Graph<'_, S>, f_t: Var, f_prev: Var) -> Result<(Var, Var)> {
        let (a, b) = (g.shape(f_t), g.shape(f_prev));
        if a != b || a.len() != 2 {
            return Err(Error::dim("decode_pair", &a, &b));
        }
        let (mut x, mut y) = (f_t, f_prev);
        for block in &self.blocks {
            let nx = block.forward(g, x, Some(y))?;
            let ny = block.forward(g, y, Some(x))?;
            (x, y) = (nx, ny);
        }
        Ok((x, y))
    }
}

/// Head outputs for one frame, all on the graph.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[3, H, W]`
    pub pointmap: Var,
    /// `[H, W]`, `1 + exp(raw)`
    pub confidence: Var,
    /// `[3, H, W]` in `(0, 1)`
    pub rgb: Var,
    /// `[4]` unit quaternion, `w >= 0`
    pub rotation: Var,
    /// `[3]`
    pub translation: Var,
}

impl HeadOutput {
    pub fn pose<S: Scalar>(&self, g: &Graph<'_, S>) -> Result<CameraPose> {
        let q = g.value(self.rotation).to_f64_vec();
        let t = g.value(self.translation).to_f64_vec();
        CameraPose::new([q[0], q[1], q[2], q[3]], [t[0], t[1], t[2]])
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub patch: usize,
    pub grid: (usize, usize),
    pointmap: Linear,
    confidence: Linear,
    rgb: Linear,
    pose_hidden: Linear,
    pose_out: Linear,
}

impl Heads {
    /// Pointmap depth bias starts at 1 so an untrained model predicts
    /// points in front of the camera. The pose head starts at the identity.
    pub fn init<S: Scalar>(
        init: &mut ParamInit<'_, S>,
        name: &str,
        dim: usize,
        patch: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        let p2 = patch * patch;
        let pointmap = Linear {
            weight: init.normal(&format!("{name}.pointmap.weight"), &[3 * p2, dim], 0.1 / (dim as f64).sqrt())?,
            bias: Some(init.constant(
                &format!("{name}.pointmap.bias"),
                Tensor::from_vec(&[3 * p2], (0..3 * p2).map(|i| if i >= 2 * p2 { S::one() } else { S::zero() }).collect())?,
            )?),
            inputs: dim,
            outputs: 3 * p2,
        };
        let pose_out = Linear {
            weight: init.normal(&format!("{name}.pose.fc2.weight"), &[7, dim], 0.1 / (dim as f64).sqrt())?,
            bias: Some(init.constant(
                &format!("{name}.pose.fc2.bias"),
                Tensor::from_f64(&[7], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])?,
            )?),
            inputs: dim,
            outputs: 7,
        };
        Ok(Self {
            patch,
            grid,
            pointmap,
            confidence: Linear::init(init, &format!("{name}.confidence"), dim, p2, true, 0.1)?,
            rgb: Linear::init(init, &format!("{name}.rgb"), dim, 3 * p2, true, 1.0)?,
            pose_hidden: Linear::init(init, &format!("{name}.pose.fc1"), dim, dim, true, 1.0)?,
            pose_out,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<'_, S>, tokens: Var) -> Result<HeadOutput> {
        let s = g.shape(tokens);
        let n = self.grid.0 * self.grid.1;
        if s.len() != 2 || s[0] != n {
            return Err(Error::dim("heads (token count must equal the patch grid)", &s, &[n]));
        }
        let (p, grid) = (self.patch, self.grid);
        let pointmap = unpatchify(g, self.pointmap.forward(g, tokens)?, 3, grid, p)?;
        let raw = unpatchify(g, self.confidence.forward(g, tokens)?, 1, grid, p)?;
        let (h, w) = (grid.0 * p, grid.1 * p);
        let confidence = g.add_scalar(g.exp(g.reshape(raw, &[h, w])?), S::one());
        let rgb = g.sigmoid(unpatchify(g, self.rgb.forward(g, tokens)?, 3, grid, p)?);

        let pooled = g.mean_axis(tokens, 0)?;
        let hidden = g.gelu(self.pose_hidden.forward(g, pooled)?);
        let raw = self.pose_out.forward(g, hidden)?;
        let q = g.slice(raw, 0, 0, 4)?;
        let translation = g.slice(raw, 0, 4, 3)?;
        let norm = g.sqrt(g.sum(g.square(q)));
        let mut rotation = g.div_bcast(q, norm)?;
        if g.value(q).data()[0] < S::zero() {
            rotation = g.neg(rotation);
        }
        Ok(HeadOutput {
            pointmap,
            confidence,
            rgb,
            rotation,
            translation,
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numerics::{gradcheck::randomize, ParamStore};
    use crate::testutil::{build, check, probe, random};

    fn k32() -> Intrinsics {
        Intrinsics {
            fx: 32.0,
            fy: 32.0,
            cx: 16.0,
            cy: 16.0,
        }
    }

    fn single_point(p: [f64; 3]) -> Tensor<f64> {
        Tensor::from_f64(&[3, 1, 1], &p).unwrap()
    }

    #[test]
    fn depth_examples() {
        let k = k32();
        let (d, _) = pointmap_to_depth(&single_point([0., 0., 5.]), &CameraPose::identity(), &k).unwrap();
        assert_eq!(d.data(), &[5.0]);
        assert_eq!(k.project([0., 0., 5.]), (16.0, 16.0));
        let big = Tensor::from_vec(&[3, 32, 32], [vec![0.0; 1024], vec![0.0; 1024], vec![5.0; 1024]].concat()).unwrap();
        let (_, v) = pointmap_to_depth(&big, &CameraPose::identity(), &k).unwrap();
        assert!(v.iter().all(|&x| x));

        let shifted = CameraPose::new([1., 0., 0., 0.], [0., 0., 1.]).unwrap();
        let (d, _) = pointmap_to_depth(&single_point([0., 0., 5.]), &shifted, &k).unwrap();
        assert_eq!(d.data(), &[4.0]);

        let behind = pointmap_to_depth(&single_point([0., 0., -1.]), &CameraPose::identity(), &k).unwrap();
        assert!(!behind.1[0]);
    }

    #[test]
    fn rotated_camera_matches_matrix_oracle() {
        let half = std::f64::consts::FRAC_PI_4;
        // 90 degrees about x: camera z axis maps to world -y
        let pose = CameraPose::new([half.cos(), half.sin(), 0.0, 0.0], [1.0, 2.0, 3.0]).unwrap();
        let r = pose.rotation();
        let axis = r * Vector3::new(0.0, 0.0, 1.0);
        assert!((axis - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-15);
        let p = [1.0, 2.0 - 7.0, 3.0];
        let (d, _) = pointmap_to_depth(&single_point(p), &pose, &k32()).unwrap();
        assert!((d.data()[0] - 7.0).abs() < 1e-12);

        let m = Matrix4::new(
            1.0, 0.0, 0.0, 1.0, //
            0.0, 0.0, -1.0, 2.0, //
            0.0, 1.0, 0.0, 3.0, //
            0.0, 0.0, 0.0, 1.0,
        );
        assert!((m - pose.matrix()).norm() < 1e-12);
        let inv = m.try_inverse().unwrap();
        let mut rng_pts = random(&[3, 4, 4], 3).data().to_vec();
        rng_pts.iter_mut().for_each(|v| *v *= 10.0);
        let pts = Tensor::from_vec(&[3, 4, 4], rng_pts).unwrap();
        let (d, _) = pointmap_to_depth(&pts, &pose, &k32()).unwrap();
        for i in 0..16 {
            let hp = nalgebra::Vector4::new(pts.data()[i], pts.data()[16 + i], pts.data()[32 + i], 1.0);
            assert!(((inv * hp).z - d.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_algebra() {
        let a = CameraPose::new([0.9, 0.1, -0.3, 0.2], [1.0, -2.0, 0.5]).unwrap();
        let b = CameraPose::new([0.5, 0.5, 0.5, -0.5], [0.0, 3.0, 1.0]).unwrap();
        let id = a.compose(&a.inverse());
        assert!((id.matrix() - Matrix4::identity()).norm() < 1e-12);
        assert!((a.compose(&b).matrix() - a.matrix() * b.matrix()).norm() < 1e-12);
        let p = [0.3, -0.4, 2.0];
        let back = a.to_camera(a.transform(p));
        for i in 0..3 {
            assert!((back[i] - p[i]).abs() < 1e-12);
        }
        assert!(CameraPose::new([0.0; 4], [0.0; 3]).is_err());
        assert!(Intrinsics { fx: 0.0, ..k32() }.validate().is_err());
    }

    fn toy() -> (ParamStore<f64>, Decoder, Heads) {
        let cfg = AttentionConfig {
            dim: 4,
            heads: 2,
            window: 2,
        };
        let (store, (dec, heads)) = build(1, |i| {
            Ok((Decoder::init(i, "dec", cfg, 2)?, Heads::init(i, "heads", 4, 4, (2, 2))?))
        });
        (store, dec, heads)
    }

    #[test]
    fn swapped_inputs_swap_outputs() {
        let (store, dec, _) = toy();
        let g = Graph::inference(&store);
        let a = g.constant(random(&[4, 4], 2));
        let b = g.constant(random(&[4, 4], 3));
        let (x, y) = dec.decode_pair(&g, a, b).unwrap();
        let (y2, x2) = dec.decode_pair(&g, b, a).unwrap();
        assert_eq!(g.value(x).data(), g.value(x2).data());
        assert_eq!(g.value(y).data(), g.value(y2).data());
    }

    #[test]
    fn zero_cross_projection_decouples_streams() {
        let (mut store, dec, _) = toy();
        for p in store.iter_mut().filter(|p| p.name.contains(".cross.o.")) {
            p.value = Tensor::zeros(p.value.shape());
        }
        let g = Graph::inference(&store);
        let a = g.constant(random(&[4, 4], 4));
        let (x, _) = dec.decode_pair(&g, a, g.constant(random(&[4, 4], 5))).unwrap();
        let (x2, _) = dec.decode_pair(&g, a, g.constant(random(&[4, 4], 6))).unwrap();
        assert_eq!(g.value(x).data(), g.value(x2).data());
        let mut solo = a;
        for b in &dec.blocks {
            solo = b.forward(&g, solo, None).unwrap();
        }
        assert_eq!(g.value(x).data(), g.value(solo).data());
    }

    #[test]
    fn head_shapes_and_ranges() {
        let (mut store, _, heads) = toy();
        randomize(&mut store, 7, 2.0);
        let g = Graph::inference(&store);
        let out = heads.forward(&g, g.constant(random(&[4, 4], 8))).unwrap();
        assert_eq!(g.shape(out.pointmap), vec![3, 8, 8]);
        assert_eq!(g.shape(out.confidence), vec![8, 8]);
        assert_eq!(g.shape(out.rgb), vec![3, 8, 8]);
        assert!(g.value(out.confidence).data().iter().all(|&c| c >= 1.0));
        assert!(g.value(out.rgb).data().iter().all(|&c| c > 0.0 && c < 1.0));
        let q = g.value(out.rotation);
        assert!((q.data().iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(q.data()[0] >= 0.0);
        assert!(heads.forward(&g, g.constant(random(&[5, 4], 8))).is_err());
    }

    #[test]
    fn zero_raw_confidence_is_two() {
        let (mut store, _, heads) = toy();
        for p in store.iter_mut().filter(|p| p.name.starts_with("heads.confidence")) {
            p.value = Tensor::zeros(p.value.shape());
        }
        let g = Graph::inference(&store);
        let out = heads.forward(&g, g.constant(random(&[4, 4], 9))).unwrap();
        assert!(g.value(out.confidence).data().iter().all(|&c| c == 2.0));
    }

    #[test]
    fn sixteen_pixel_maps_from_patch_eight() {
        let (store, heads) = build(2, |i| Heads::init::<f64>(i, "h", 4, 8, (2, 2)));
        let g = Graph::inference(&store);
        let out = heads.forward(&g, g.constant(random(&[4, 4], 1))).unwrap();
        assert_eq!(g.shape(out.pointmap), vec![3, 16, 16]);
        assert_eq!(g.shape(out.confidence), vec![16, 16]);
    }

    #[test]
    fn decoder_and_heads_pass_gradcheck() {
        let (mut store, dec, heads) = toy();
        randomize(&mut store, 10, 0.8);
        // keep the raw quaternion away from w = 0, where the sign flip jumps
        store.get_mut("heads.pose.fc2.bias").unwrap().value.data_mut()[0] = 3.0;
        store.insert("ft", random(&[4, 4], 11)).unwrap();
        store.insert("fp", random(&[4, 4], 12)).unwrap();
        check(&mut store, |g| {
            let (x, _) = dec.decode_pair(g, g.param("ft")?, g.param("fp")?)?;
            let o = heads.forward(g, x)?;
            let parts = [
                probe(g, o.pointmap, 13)?,
                probe(g, o.confidence, 14)?,
                probe(g, o.rgb, 15)?,
                probe(g, o.rotation, 16)?,
                probe(g, o.translation, 17)?,
            ];
            parts.iter().skip(1).try_fold(parts[0], |acc, &p| g.add(acc, p))
        });
    }

    proptest! {
        #[test]
        fn quaternion_sign_is_canonical(q in prop::array::uniform4(-1.0f64..1.0), t in prop::array::uniform3(-5.0f64..5.0)) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            let a = CameraPose::new(q, t).unwrap();
            let b = CameraPose::new(q.map(|v| -v), t).unwrap();
            if q[0] != 0.0 {
                prop_assert_eq!(a, b);
            }
            prop_assert!((a.q.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
