//! Procedural colon-like tube scenes, a sphere-tracing point-light renderer
//! and dataset generation with exact ground truth.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode_heads::{CameraPose, Intrinsics};
use crate::error::{Error, Result};
use crate::io;
use crate::numerics::Tensor;

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Tube around the curve `c(s) = (x(s), y(s), s)` with cubic `x`, `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeScene {
    /// Coefficients of `s, s^2, s^3` for x and y.
    pub x_coef: [f64; 3],
    pub y_coef: [f64; 3],
    pub radius: f64,
    /// Relative fold amplitude `a` in `r(s) = r0 (1 + a sin(omega s))`.
    pub fold_amplitude: f64,
    pub fold_frequency: f64,
    pub far: f64,
    /// Attenuation `1 / (1 + k d^2)`.
    pub attenuation: f64,
    pub gamma: f64,
    pub tint: [f64; 3],
    pub texture_seed: u64,
}

impl TubeScene {
    /// A scene whose centerline wanders a few units over `length`.
    pub fn random(seed: u64, length: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coef = || {
            let mut c = [0.0; 3];
            for (k, v) in c.iter_mut().enumerate() {
                *v = rng.gen_range(-1.0..1.0) * 2.0 / length.powi(k as i32 + 1);
            }
            c
        };
        let (x_coef, y_coef) = (coef(), coef());
        Self {
            x_coef,
            y_coef,
            radius: 2.5,
            fold_amplitude: 0.1,
            fold_frequency: std::f64::consts::TAU / 4.0,
            far: 20.0,
            attenuation: 0.5,
            gamma: 2.2,
            tint: [1.0, 0.6, 0.5],
            texture_seed: rng.gen(),
        }
    }

    pub fn straight_cylinder(radius: f64, far: f64) -> Self {
        Self {
            x_coef: [0.0; 3],
            y_coef: [0.0; 3],
            radius,
            fold_amplitude: 0.0,
            fold_frequency: 1.0,
            far,
            attenuation: 0.5,
            gamma: 2.2,
            tint: [1.0, 1.0, 1.0],
            texture_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !(self.fold_amplitude.abs() < 1.0) || !(self.far > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::Config(format!("invalid tube scene {self:?}")));
        }
        Ok(())
    }

    pub fn centerline(&self, s: f64) -> Vector3<f64> {
        let poly = |c: &[f64; 3]| s * (c[0] + s * (c[1] + s * c[2]));
        Vector3::new(poly(&self.x_coef), poly(&self.y_coef), s)
    }

    pub fn tangent(&self, s: f64) -> Vector3<f64> {
        let d = |c: &[f64; 3]| c[0] + s * (2.0 * c[1] + 3.0 * s * c[2]);
        Vector3::new(d(&self.x_coef), d(&self.y_coef), 1.0).normalize()
    }

    pub fn radius_at(&self, s: f64) -> f64 {
        self.radius * (1.0 + self.fold_amplitude * (self.fold_frequency * s).sin())
    }

    /// Curve parameter of the closest centerline point, by golden-section
    /// search on three equal sub-brackets of `[p.z - w, p.z + w]`.
    pub fn nearest_parameter(&self, p: &Vector3<f64>) -> f64 {
        let w = 2.0 * self.radius;
        let f = |s: f64| (p - self.centerline(s)).norm_squared();
        let third = 2.0 * w / 3.0;
        (0..3)
            .map(|k| golden_section(f, p.z - w + k as f64 * third, p.z - w + (k + 1) as f64 * third, 1e-7))
            .min_by(|a, b| f(*a).total_cmp(&f(*b)))
            .expect("three brackets")
    }

    /// Positive inside the lumen, zero on the wall.
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        let s = self.nearest_parameter(p);
        self.radius_at(s) - (p - self.centerline(s)).norm()
    }

    fn sdf_with_parameter(&self, p: &Vector3<f64>) -> (f64, f64) {
        let s = self.nearest_parameter(p);
        (self.radius_at(s) - (p - self.centerline(s)).norm(), s)
    }

    /// Central-difference gradient of the signed distance.
    pub fn sdf_gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let h = 1e-5;
        let mut g = Vector3::zeros();
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            g[k] = (self.sdf(&(p + e)) - self.sdf(&(p - e))) / (2.0 * h);
        }
        g
    }

    /// Inward unit normal.
    pub fn normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.sdf_gradient(p).normalize()
    }

    /// Procedural albedo in `[0.3, 0.9]` from value noise on `(s, angle)`.
    pub fn albedo(&self, p: &Vector3<f64>, s: f64) -> f64 {
        let v = p - self.centerline(s);
        let angle = v.y.atan2(v.x) / std::f64::consts::TAU + 0.5;
        let mut n = 0.0;
        for (octave, (cells_s, cells_a, weight)) in [(1.5, 12u64, 0.65), (4.0, 32u64, 0.35)].into_iter().enumerate() {
            n += weight * value_noise(self.texture_seed + octave as u64, s * cells_s, angle * cells_a as f64, cells_a);
        }
        0.3 + 0.6 * n
    }

    /// Distance along the unit direction `dir` to the wall, `None` if the
    /// trace leaves the far range or fails to converge.
    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_dist: f64) -> Option<f64> {
        let mut t = 0.0;
        let mut last_inside = 0.0;
        for _ in 0..256 {
            let d = self.sdf(&(origin + dir * t));
            if d.abs() < 1e-5 {
                return Some(self.polish(origin, dir, t));
            }
            if d < 0.0 {
                return Some(self.polish(origin, dir, self.refine(origin, dir, last_inside, t)));
            }
            last_inside = t;
            t += 0.9 * d;
            if t > max_dist {
                return None;
            }
        }
        None
    }

    /// Newton steps along the ray. A small distance to the wall still means
    /// a long way along a grazing ray.
    fn polish(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, mut t: f64) -> f64 {
        for _ in 0..4 {
            let p = origin + dir * t;
            let d = self.sdf(&p);
            let slope = dir.dot(&self.sdf_gradient(&p));
            if d.abs() < 1e-12 || slope > -1e-3 {
                break;
            }
            t -= d / slope;
        }
        t
    }

    fn refine(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, mut lo: f64, mut hi: f64) -> f64 {
        while hi - lo > 1e-9 {
            let mid = 0.5 * (lo + hi);
            if self.sdf(&(origin + dir * mid)) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Minimizer of a unimodal `f` on `[a, b]` to interval width `tol`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

fn hash(seed: u64, i: i64, j: i64) -> f64 {
    let mut z = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in `[0, 1)`, periodic in `v` with
/// period `wrap`.
fn value_noise(seed: u64, u: f64, v: f64, wrap: u64) -> f64 {
    let (iu, iv) = (u.floor(), v.floor());
    let (fu, fv) = (u - iu, v - iv);
    let smooth = |x: f64| x * x * (3.0 - 2.0 * x);
    let (su, sv) = (smooth(fu), smooth(fv));
    let w = wrap as i64;
    let at = |du: i64, dv: i64| hash(seed, iu as i64 + du, (iv as i64 + dv).rem_euclid(w));
    let top = at(0, 0) * (1.0 - su) + at(1, 0) * su;
    let bottom = at(0, 1) * (1.0 - su) + at(1, 1) * su;
    top * (1.0 - sv) + bottom * sv
}

/// Rendered frame with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[3, H, W]` in `[0, 1]`, gamma encoded.
    pub image: Tensor<f64>,
    /// `[H, W]` z-depth, `far` where no wall was hit.
    pub depth: Tensor<f64>,
    /// Camera-to-world.
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
    /// `[3, H, W]` world coordinates.
    pub pointmap: Tensor<f64>,
    /// `[H, W]` in `[0, 1]`: `att * max(0, n.l)` over its frame maximum.
    pub light: Tensor<f64>,
}

impl SceneSample {
    pub fn valid(&self, far: f64) -> Vec<bool> {
        self.depth.data().iter().map(|&d| d < far).collect()
    }
}

/// Square-pixel intrinsics with a roughly 64 degree horizontal field of view.
pub fn default_intrinsics(height: usize, width: usize) -> Intrinsics {
    let f = 0.8 * width as f64;
    Intrinsics {
        fx: f,
        fy: f,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
    }
}

/// Per-pixel rays parameterized by z-depth, so the trace distance along the
/// unit direction is `t * |(x, y, 1)|`.
pub fn render(scene: &TubeScene, pose: &CameraPose, k: &Intrinsics, height: usize, width: usize) -> Result<SceneSample> {
    scene.validate()?;
    k.validate()?;
    let origin = pose.translation();
    if scene.sdf(&origin) <= 0.0 {
        return Err(Error::Config("camera is outside the lumen".into()));
    }
    let r = pose.rotation();
    let hw = height * width;
    let mut image = vec![0.0; 3 * hw];
    let mut depth = vec![0.0; hw];
    let mut points = vec![0.0; 3 * hw];
    let mut light = vec![0.0; hw];
    for i in 0..height {
        for j in 0..width {
            let p = i * width + j;
            let ray_cam = Vector3::from(k.ray(i, j));
            let scale = ray_cam.norm();
            let dir = r * ray_cam / scale;
            let hit = scene.trace(&origin, &dir, scene.far * scale);
            let z = hit.map_or(scene.far, |t| (t / scale).min(scene.far));
            let world = origin + r * ray_cam * z;
            depth[p] = z;
            for c in 0..3 {
                points[c * hw + p] = world[c];
            }
            if let (Some(t), true) = (hit, z < scene.far) {
                let (_, s) = scene.sdf_with_parameter(&world);
                let n = scene.normal(&world);
                let lambert = n.dot(&(-dir)).max(0.0);
                let att = 1.0 / (1.0 + scene.attenuation * t * t);
                let shade = scene.albedo(&world, s) * lambert * att;
                light[p] = lambert * att;
                for c in 0..3 {
                    image[c * hw + p] = (shade * scene.tint[c]).clamp(0.0, 1.0).powf(1.0 / scene.gamma);
                }
            }
        }
    }
    let max = light.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        light.iter_mut().for_each(|v| *v /= max);
    }
    Ok(SceneSample {
        image: Tensor::from_vec(&[3, height, width], image)?,
        depth: Tensor::from_vec(&[height, width], depth)?,
        pose: *pose,
        intrinsics: *k,
        pointmap: Tensor::from_vec(&[3, height, width], points)?,
        light: Tensor::from_vec(&[height, width], light)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Advance per frame along the centerline.
    pub step: f64,
    /// The second half of the sequence repeats the first half's viewpoints.
    #[serde(default)]
    pub looping: bool,
}

impl SequenceConfig {
    pub fn new(seed: u64, frames: usize, height: usize, width: usize) -> Self {
        Self {
            seed,
            frames,
            height,
            width,
            step: 0.3,
            looping: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config(format!("need at least 2 frames, got {}", self.frames)));
        }
        if self.height == 0 || self.width == 0 || !(self.step > 0.0) {
            return Err(Error::Config("image extents and step must be positive".into()));
        }
        Ok(())
    }
}

/// `meta.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub sequence: SequenceConfig,
    pub scene: TubeScene,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub frame: usize,
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl PoseRecord {
    pub fn new(frame: usize, p: &CameraPose) -> Self {
        Self { frame, q: p.q, t: p.t }
    }

    pub fn pose(&self) -> Result<CameraPose> {
        CameraPose::new(self.q, self.t)
    }
}

/// World-frame camera poses along the centerline with smooth seeded
/// offsets and small orientation wobble.
fn trajectory(scene: &TubeScene, cfg: &SequenceConfig) -> Vec<CameraPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_CA3E);
    let mut wave = || (rng.gen_range(0.05..0.15), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.2..0.6));
    let (ox, oy, yaw, pitch, roll) = (wave(), wave(), wave(), wave(), wave());
    let distinct = if cfg.looping { cfg.frames.div_ceil(2) } else { cfg.frames };
    (0..cfg.frames)
        .map(|f| {
            let i = (f % distinct) as f64;
            let at = |w: (f64, f64, f64)| w.0 * (w.1 + w.2 * i).sin();
            let s = 1.0 + cfg.step * i;
            let forward = scene.tangent(s);
            let side = Vector3::y().cross(&forward).normalize();
            let up = forward.cross(&side);
            let r = scene.radius_at(s);
            let position = scene.centerline(s) + side * at(ox) * 2.0 * r + up * at(oy) * 2.0 * r;
            let base = Matrix3::from_columns(&[side, up, forward]);
            let wobble = nalgebra::Rotation3::from_euler_angles(at(pitch) * 0.6, at(yaw) * 0.6, at(roll));
            let rot = base * wobble.into_inner();
            CameraPose::from_rotation(&rot, [position.x, position.y, position.z])
        })
        .collect()
}

/// Renders a sequence. Poses and pointmaps are expressed in the first
/// camera's frame.
pub fn generate_sequence(cfg: &SequenceConfig) -> Result<(TubeScene, Vec<SceneSample>)> {
    cfg.validate()?;
    let length = 2.0 + cfg.step * cfg.frames as f64 + 25.0;
    let scene = TubeScene::random(cfg.seed, length);
    let poses = trajectory(&scene, cfg);
    let k = default_intrinsics(cfg.height, cfg.width);
    let to_first = poses[0].inverse();
    let mut samples = Vec::with_capacity(cfg.frames);
    for (i, pose) in poses.iter().enumerate() {
        let mut s = render(&scene, pose, &k, cfg.height, cfg.width)?;
        s.pose = if i == 0 { CameraPose::identity() } else { to_first.compose(pose) };
        let hw = cfg.height * cfg.width;
        let pm = s.pointmap.data_mut();
        for p in 0..hw {
            let q = to_first.transform([pm[p], pm[hw + p], pm[2 * hw + p]]);
            for c in 0..3 {
                pm[c * hw + p] = q[c];
            }
        }
        samples.push(s);
    }
    Ok((scene, samples))
}

pub fn frame_stem(i: usize) -> String {
    format!("frame_{i:05}")
}

/// Writes the dataset layout: per-frame PNG and depth/points/light PFMs,
/// plus `poses.json`, `intrinsics.json` and `meta.json`.
pub fn write_dataset(dir: &Path, cfg: &SequenceConfig, scene: &TubeScene, samples: &[SceneSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let stem = frame_stem(i);
        io::write_png(&dir.join(format!("{stem}.png")), &s.image)?;
        io::write_pfm(&dir.join(format!("{stem}.depth.pfm")), &s.depth)?;
        io::write_pfm(&dir.join(format!("{stem}.points.pfm")), &s.pointmap)?;
        io::write_pfm(&dir.join(format!("{stem}.light.pfm")), &s.light)?;
    }
    let poses: Vec<PoseRecord> = samples.iter().enumerate().map(|(i, s)| PoseRecord::new(i, &s.pose)).collect();
    io::write_json(&dir.join("poses.json"), &poses)?;
    let k = samples.first().map(|s| s.intrinsics).unwrap_or_else(|| default_intrinsics(cfg.height, cfg.width));
    io::write_json(&dir.join("intrinsics.json"), &k)?;
    io::write_json(
        &dir.join("meta.json"),
        &DatasetMeta {
            sequence: cfg.clone(),
            scene: scene.clone(),
        },
    )
}

/// Ground truth loaded back from a dataset directory (f32 precision).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub intrinsics: Intrinsics,
    pub poses: Vec<CameraPose>,
    pub images: Vec<Tensor<f64>>,
    pub depths: Vec<Tensor<f64>>,
    pub pointmaps: Vec<Tensor<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn far(&self) -> f64 {
        self.meta.scene.far
    }

    pub fn valid(&self, i: usize) -> Vec<bool> {
        let far = self.far();
        self.depths[i].data().iter().map(|&d| d < far && d > 0.0).collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::ingestion(dir, "dataset directory not found"));
        }
        let meta: DatasetMeta = io::read_json(&dir.join("meta.json"))?;
        let intrinsics: Intrinsics = io::read_json(&dir.join("intrinsics.json"))?;
        let records: Vec<PoseRecord> = io::read_json(&dir.join("poses.json"))?;
        let n = meta.sequence.frames;
        if records.len() != n {
            return Err(Error::ingestion(
                dir.join("poses.json"),
                format!("{} poses for {n} frames", records.len()),
            ));
        }
        let mut poses = Vec::with_capacity(n);
        for (i, r) in records.iter().enumerate() {
            if r.frame != i {
                return Err(Error::ingestion(dir.join("poses.json"), format!("entry {i} has frame {}", r.frame)));
            }
            poses.push(r.pose().map_err(|e| Error::ingestion(dir.join("poses.json"), e.to_string()))?);
        }
        let (h, w) = (meta.sequence.height, meta.sequence.width);
        let mut images = Vec::with_capacity(n);
        let mut depths = Vec::with_capacity(n);
        let mut pointmaps = Vec::with_capacity(n);
        for i in 0..n {
            let stem = frame_stem(i);
            let check = |t: Tensor<f64>, name: String, shape: &[usize]| {
                if t.shape() == shape {
                    Ok(t)
                } else {
                    Err(Error::ingestion(dir.join(name), format!("shape {:?}, expected {shape:?}", t.shape())))
                }
            };
            images.push(check(io::read_png(&dir.join(format!("{stem}.png")))?, format!("{stem}.png"), &[3, h, w])?);
            depths.push(check(
                io::read_pfm(&dir.join(format!("{stem}.depth.pfm")))?,
                format!("{stem}.depth.pfm"),
                &[h, w],
            )?);
            pointmaps.push(check(
                io::read_pfm(&dir.join(format!("{stem}.points.pfm")))?,
                format!("{stem}.points.pfm"),
                &[3, h, w],
            )?);
        }
        Ok(Self {
            meta,
            intrinsics,
            poses,
            images,
            depths,
            pointmaps,
        })
    }
}
