//! Synthetic scenes with known ground truth, and the coarse-depth corruption
//! that stands in for a monocular depth estimator.

use std::f64::consts::PI;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::gaussian::{GaussianPrimitive, GaussianSet};
use crate::raster::{DepthMap, ImageBuffer, ScalarMap};
use crate::splat::render;

pub const SCENE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Primitives gathered around a handful of cluster centers.
    Clustered,
    /// Primitives uniform in the box.
    Uniform,
}

/// Synthetic coarse-depth corruption: `blur(scale·D + shift) + noise`,
/// clamped at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionModel {
    pub scale: f64,
    pub shift: f64,
    /// Gaussian blur standard deviation in pixels.
    pub blur_sigma: f64,
    /// Additive noise standard deviation in depth units.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CorruptionModel {
    fn default() -> Self {
        Self::identity()
    }
}

impl CorruptionModel {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            shift: 0.0,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.blur_sigma >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err("blur_sigma and noise_sigma must be non-negative".into());
        }
        if !self.scale.is_finite() || !self.shift.is_finite() {
            return Err("scale and shift must be finite".into());
        }
        Ok(())
    }
}

/// Wall of flat, overlapping primitives on the plane `z = depth` behind the
/// box, sized to fill every camera's view. Its primitives are part of the
/// `n_gaussians` budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backdrop {
    pub cols: usize,
    pub rows: usize,
    pub depth: f64,
}

impl Default for Backdrop {
    fn default() -> Self {
        Self {
            cols: 8,
            rows: 5,
            depth: 1.5,
        }
    }
}

impl Backdrop {
    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn default_backdrop() -> Option<Backdrop> {
    Some(Backdrop::default())
}

fn default_layout() -> Layout {
    Layout::Clustered
}
fn default_radius() -> f64 {
    4.0
}
fn default_arc() -> f64 {
    60.0
}
fn default_fov() -> f64 {
    0.5
}
fn default_init_fraction() -> f64 {
    0.25
}
fn default_init_noise() -> f64 {
    0.03
}

/// Scene description as read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub schema_version: u32,
    pub n_gaussians: usize,
    #[serde(default = "default_layout")]
    pub layout: Layout,
    pub n_train: usize,
    pub n_eval: usize,
    /// Square image side in pixels.
    pub resolution: usize,
    pub seed: u64,
    #[serde(default = "default_radius")]
    pub camera_radius: f64,
    /// Angle spanned by the training cameras, degrees.
    #[serde(default = "default_arc")]
    pub arc_degrees: f64,
    /// Horizontal field of view, radians.
    #[serde(default = "default_fov")]
    pub fov: f64,
    /// Fraction of ground-truth centers kept (with noise) as the initial set.
    #[serde(default = "default_init_fraction")]
    pub init_fraction: f64,
    #[serde(default = "default_init_noise")]
    pub init_noise: f64,
    #[serde(default)]
    pub corruption: CorruptionModel,
    /// `null` renders the object against an empty background.
    #[serde(default = "default_backdrop")]
    pub backdrop: Option<Backdrop>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            schema_version: SCENE_SCHEMA_VERSION,
            n_gaussians: 200,
            layout: default_layout(),
            n_train: 3,
            n_eval: 2,
            resolution: 64,
            seed: 7,
            camera_radius: default_radius(),
            arc_degrees: default_arc(),
            fov: default_fov(),
            init_fraction: default_init_fraction(),
            init_noise: default_init_noise(),
            corruption: CorruptionModel {
                scale: 0.8,
                shift: 0.5,
                blur_sigma: 2.0,
                noise_sigma: 0.1,
                seed: 11,
            },
            backdrop: default_backdrop(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != SCENE_SCHEMA_VERSION {
            return Err(format!(
                "unsupported schema_version {} (expected {SCENE_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.n_gaussians == 0 || self.n_train == 0 || self.resolution == 0 {
            return Err("n_gaussians, n_train and resolution must be at least 1".into());
        }
        if let Some(b) = &self.backdrop {
            if b.is_empty() || b.len() >= self.n_gaussians {
                return Err(format!(
                    "backdrop needs at least one tile and fewer than n_gaussians ({}) tiles, has {}",
                    self.n_gaussians,
                    b.len()
                ));
            }
            if !(b.depth > 0.5) {
                return Err("backdrop depth must lie behind the box (> 0.5)".into());
            }
        }
        if !(self.camera_radius > 1.0) {
            return Err("camera_radius must exceed 1 so cameras sit outside the box".into());
        }
        if !(self.fov > 0.0 && self.fov < PI) {
            return Err("fov must be in (0, π)".into());
        }
        if !(0.0..=1.0).contains(&self.init_fraction) {
            return Err("init_fraction must be in [0, 1]".into());
        }
        self.corruption.validate()
    }
}

/// One camera with its ground-truth buffers.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub image: ImageBuffer,
    pub depth: DepthMap,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub gt_set: GaussianSet,
    pub train: Vec<View>,
    pub eval: Vec<View>,
    /// Radius of the sphere around the origin that holds all primitive
    /// centers.
    pub scene_extent: f64,
    /// Sparse noisy subset of the ground truth used as the starting point.
    pub init_set: GaussianSet,
}

fn random_unit_quaternion(rng: &mut ChaCha8Rng) -> Vector4<f64> {
    loop {
        let q = Vector4::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = q.norm();
        if n > 1e-6 {
            return q / n;
        }
    }
}

fn sample_positions(spec: &SceneSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let uniform = |rng: &mut ChaCha8Rng| {
        Vector3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        )
    };
    match spec.layout {
        Layout::Uniform => (0..n).map(|_| uniform(rng)).collect(),
        Layout::Clustered => {
            let k = n.div_ceil(40).clamp(1, 8);
            let centers: Vec<Vector3<f64>> = (0..k).map(|_| 0.6 * uniform(rng)).collect();
            let spread = Normal::new(0.0, 0.15).unwrap();
            (0..n)
                .map(|i| {
                    let c = centers[i % k];
                    let p = c + Vector3::new(spread.sample(rng), spread.sample(rng), spread.sample(rng));
                    p.map(|v| v.clamp(-0.5, 0.5))
                })
                .collect()
        }
    }
}

/// Camera on the arc at azimuth `phi` (radians), looking at the origin.
pub fn arc_camera(spec: &SceneSpec, phi: f64) -> Camera {
    let r = spec.camera_radius;
    let eye = Vector3::new(r * phi.sin(), 0.25 * r, -r * phi.cos());
    let dist = eye.norm();
    Camera::look_at(
        eye,
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        spec.fov,
        spec.resolution,
        spec.resolution,
        (dist - 1.5).max(0.05),
        dist + 3.0,
    )
}

/// Training azimuths span the arc; evaluation azimuths sit between them.
pub fn camera_azimuths(spec: &SceneSpec) -> (Vec<f64>, Vec<f64>) {
    let arc = spec.arc_degrees.to_radians();
    let train = if spec.n_train == 1 {
        vec![0.0]
    } else {
        (0..spec.n_train)
            .map(|i| -0.5 * arc + arc * i as f64 / (spec.n_train - 1) as f64)
            .collect()
    };
    let eval = (0..spec.n_eval)
        .map(|k| -0.5 * arc + arc * (k as f64 + 0.5) / spec.n_eval as f64)
        .collect();
    (train, eval)
}

fn mean_nn_distance(points: &[Vector3<f64>], i: usize, k: usize) -> Option<f64> {
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, q)| (q - points[i]).norm())
        .collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    let k = k.min(d.len());
    Some(d[..k].iter().sum::<f64>() / k as f64)
}

/// Where the rays through the image corners of `cams` meet the plane
/// `z = depth`: `(x_min, x_max, y_min, y_max)`.
fn plane_footprint(cams: &[Camera], depth: f64) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for cam in cams {
        let o = cam.center();
        let (w, h) = (cam.width as f64, cam.height as f64);
        for (u, v) in [(-0.5, -0.5), (w - 0.5, -0.5), (-0.5, h - 0.5), (w - 0.5, h - 0.5)] {
            let d = cam.unproject(u, v, 1.0) - o;
            let t = (depth - o.z) / d.z;
            let p = o + d * t;
            b = (b.0.min(p.x), b.1.max(p.x), b.2.min(p.y), b.3.max(p.y));
        }
    }
    b
}

fn backdrop_tiles(b: &Backdrop, cams: &[Camera], rng: &mut ChaCha8Rng) -> Vec<GaussianPrimitive> {
    let (x0, x1, y0, y1) = plane_footprint(cams, b.depth);
    let (sx, sy) = ((x1 - x0) / b.cols as f64, (y1 - y0) / b.rows as f64);
    let mut tiles = Vec::with_capacity(b.len());
    for r in 0..b.rows {
        for c in 0..b.cols {
            let base: f64 = rng.random_range(0.35..0.65);
            let color = Vector3::new(
                base + rng.random_range(-0.1..0.1),
                base + rng.random_range(-0.1..0.1),
                base + rng.random_range(-0.1..0.1),
            );
            tiles.push(GaussianPrimitive {
                position: Vector3::new(x0 + sx * (c as f64 + 0.5), y0 + sy * (r as f64 + 0.5), b.depth),
                rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                log_scale: Vector3::new((0.9 * sx).ln(), (0.9 * sy).ln(), 0.01f64.ln()),
                opacity: 0.98,
                color,
            });
        }
    }
    tiles
}

pub fn make_scene(spec: &SceneSpec) -> Result<SyntheticScene, String> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_object = spec.n_gaussians - spec.backdrop.as_ref().map_or(0, Backdrop::len);
    let positions = sample_positions(spec, n_object, &mut rng);
    let mut primitives: Vec<GaussianPrimitive> = positions
        .iter()
        .map(|&position| {
            let log_scale = Vector3::new(
                rng.random_range(0.02f64..0.09).ln(),
                rng.random_range(0.02f64..0.09).ln(),
                rng.random_range(0.02f64..0.09).ln(),
            );
            GaussianPrimitive {
                position,
                rotation: random_unit_quaternion(&mut rng),
                log_scale,
                opacity: rng.random_range(0.6..0.95),
                color: Vector3::new(
                    rng.random_range(0.1..0.95),
                    rng.random_range(0.1..0.95),
                    rng.random_range(0.1..0.95),
                ),
            }
        })
        .collect();
    let (train_phi, eval_phi) = camera_azimuths(spec);
    if let Some(b) = &spec.backdrop {
        let cams: Vec<Camera> = train_phi
            .iter()
            .chain(&eval_phi)
            .map(|&phi| arc_camera(spec, phi))
            .collect();
        primitives.extend(backdrop_tiles(b, &cams, &mut rng));
    }
    let gt_set = GaussianSet::new(primitives);
    let scene_extent = gt_set
        .primitives
        .iter()
        .map(|p| p.position.norm())
        .fold(0.0, f64::max)
        .max(1e-3);

    let view = |phi: f64| {
        let camera = arc_camera(spec, phi);
        let out = render(&gt_set, &camera);
        View {
            camera,
            image: out.image,
            depth: out.depth,
        }
    };
    let train = train_phi.into_iter().map(view).collect();
    let eval = eval_phi.into_iter().map(view).collect();

    let init_set = initial_set(&gt_set, spec, &mut rng);
    Ok(SyntheticScene {
        spec: spec.clone(),
        gt_set,
        train,
        eval,
        scene_extent,
        init_set,
    })
}

/// Noisy subset of the ground-truth centers with isotropic scales from the
/// local point spacing, as a sparse reconstruction would provide.
fn initial_set(gt: &GaussianSet, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> GaussianSet {
    let n = ((gt.len() as f64 * spec.init_fraction).round() as usize).clamp(1, gt.len());
    let mut idx: Vec<usize> = (0..gt.len()).collect();
    for i in 0..n {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx.sort_unstable();
    let noise = Normal::new(0.0, spec.init_noise.max(0.0)).unwrap();
    let points: Vec<Vector3<f64>> = idx
        .iter()
        .map(|&i| gt.primitives[i].position + Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng)))
        .collect();
    let primitives = idx
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let scale = mean_nn_distance(&points, k, 3).unwrap_or(0.05).max(1e-3);
            GaussianPrimitive::isotropic(points[k], scale, 0.1, gt.primitives[i].color)
        })
        .collect();
    GaussianSet::new(primitives)
}

/// Separable Gaussian blur with replicate padding; `sigma = 0` is the
/// identity.
pub fn gaussian_blur(map: &ScalarMap, sigma: f64) -> ScalarMap {
    if sigma <= 0.0 {
        return map.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (w, h) = (map.width, map.height);
    let mut tmp = ScalarMap::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let v: f64 = (-r..=r)
                .map(|i| k[(i + r) as usize] * map.get_clamped(x as isize + i, y as isize))
                .sum();
            tmp.set(x, y, v);
        }
    }
    let mut out = ScalarMap::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let v: f64 = (-r..=r)
                .map(|i| k[(i + r) as usize] * tmp.get_clamped(x as isize, y as isize + i))
                .sum();
            out.set(x, y, v);
        }
    }
    out
}

pub fn corrupt_depth(gt: &DepthMap, model: &CorruptionModel) -> DepthMap {
    let affine = gt.map(|d| model.scale * d + model.shift);
    let mut out = gaussian_blur(&affine, model.blur_sigma);
    if model.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
        let noise = Normal::new(0.0, model.noise_sigma).unwrap();
        for v in &mut out.data {
            *v += noise.sample(&mut rng);
        }
    }
    out.map(|v| v.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::pearson_loss;
    use crate::testutil::random_map;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            n_gaussians: 30,
            resolution: 24,
            n_train: 3,
            n_eval: 1,
            backdrop: Some(Backdrop {
                cols: 4,
                rows: 3,
                ..Backdrop::default()
            }),
            ..SceneSpec::default()
        }
    }

    #[test]
    fn backdrop_fills_every_view() {
        let scene = make_scene(&SceneSpec::default()).unwrap();
        assert_eq!(scene.gt_set.len(), 200);
        for v in scene.train.iter().chain(&scene.eval) {
            let out = render(&scene.gt_set, &v.camera);
            let (lo, _) = out.acc_alpha.min_max();
            assert!(lo > 0.9, "acc_alpha min {lo}");
            let (dlo, dhi) = v.depth.min_max();
            assert!(dlo > 2.0 && dhi < v.camera.far, "{dlo} {dhi}");
        }
        let bare = SceneSpec {
            backdrop: None,
            ..SceneSpec::default()
        };
        assert_eq!(make_scene(&bare).unwrap().gt_set.len(), 200);
        let crowded = SceneSpec {
            n_gaussians: 40,
            ..SceneSpec::default()
        };
        assert!(make_scene(&crowded).is_err());
    }

    #[test]
    fn single_gaussian_depth_on_axis() {
        let spec = SceneSpec {
            n_gaussians: 1,
            resolution: 33,
            ..small_spec()
        };
        let gt = GaussianSet::new(vec![GaussianPrimitive::isotropic(
            Vector3::zeros(),
            0.1,
            0.9,
            Vector3::repeat(0.5),
        )]);
        let cam = arc_camera(&spec, 0.0);
        let out = render(&gt, &cam);
        assert!((out.depth.get(16, 16) - cam.center().norm()).abs() < 1e-9);
    }

    #[test]
    fn same_seed_same_scene_and_counts() {
        let a = make_scene(&small_spec()).unwrap();
        let b = make_scene(&small_spec()).unwrap();
        assert_eq!(a.gt_set, b.gt_set);
        assert_eq!(a.train[1].image, b.train[1].image);
        assert_eq!(a.init_set, b.init_set);
        assert_eq!((a.train.len(), a.eval.len()), (3, 1));
        // Ground-truth buffers are a pure function of the set.
        let again = render(&a.gt_set, &a.eval[0].camera);
        assert_eq!(again.image, a.eval[0].image);
        assert_eq!(again.depth, a.eval[0].depth);
    }

    #[test]
    fn corruption_examples() {
        let d = random_map(12, 9, 1, 0.5, 4.0);
        assert_eq!(corrupt_depth(&d, &CorruptionModel::identity()), d);
        let m = CorruptionModel {
            scale: 2.0,
            shift: 1.0,
            ..CorruptionModel::identity()
        };
        let c = corrupt_depth(&d, &m);
        for (a, b) in c.data.iter().zip(&d.data) {
            assert_eq!(*a, 2.0 * b + 1.0);
        }
        let p = pearson_loss(&d, &c, 1e-12).unwrap();
        assert!(p.value.abs() < 1e-9);
    }

    #[test]
    fn blur_preserves_constants_and_mean_of_interior() {
        let c = ScalarMap::filled(10, 10, 3.25);
        let b = gaussian_blur(&c, 1.7);
        assert!(b.data.iter().all(|&v| (v - 3.25).abs() < 1e-12));
        let noisy = corrupt_depth(
            &c,
            &CorruptionModel {
                noise_sigma: 0.1,
                seed: 3,
                ..CorruptionModel::identity()
            },
        );
        assert!((noisy.mean() - 3.25).abs() < 0.05);
        assert!(noisy.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn spec_requires_fields() {
        let err = serde_json::from_str::<SceneSpec>(
            r#"{"schema_version":1,"n_gaussians":3,"n_eval":1,"resolution":8,"seed":1}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("n_train"), "{err}");
    }
}
