//! Synthetic two-view scene oracle.
//!
//! Scenes are analytic surfaces (planes, optionally a sphere) painted with a
//! continuous multi-octave value-noise texture defined over the target image
//! plane. Both views are rendered backward — each pixel's ray is intersected
//! with the surface and the texture is sampled at the point's target-plane
//! projection — so the pair is geometrically consistent by construction, with
//! no resampling holes. Photometric perturbations and outlier patches apply
//! to the source view only.

use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::error::{Error, Result};
use crate::geometry::{
    exp_map, project, warp_image, DepthMap, Intrinsics, PoseSE3, PoseVec6, EPS_Z,
};
use crate::grid::{Grid, Image};

/// Multi-octave value-noise texture parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureSpec {
    pub octaves: usize,
    /// Output range is `0.5 +- contrast/2` before clamping to [0, 1].
    pub contrast: f64,
    /// Coarsest-octave cell size in full-resolution pixels; each octave
    /// halves it. Sharp enough that descriptor self-correlation under
    /// subpixel resampling lands near the mixture's Gaussian mean, smooth
    /// enough that warp interpolation error stays well under 2/255.
    pub base_cell: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec {
            octaves: 3,
            contrast: 0.8,
            base_cell: 32.0,
        }
    }
}

/// Analytic scene surface expressed in the target camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DepthModel {
    /// Plane z = depth.
    FrontoPlane { depth: f64 },
    /// Plane `normal . X = d0` (normal gets normalized; its z must dominate
    /// enough that every image ray hits the front side).
    SlantedPlane { normal: [f64; 3], d0: f64 },
    /// Fronto-parallel plane with a sphere floating in front of it.
    PlaneSphere {
        plane_depth: f64,
        center: [f64; 3],
        radius: f64,
    },
}

impl Default for DepthModel {
    fn default() -> Self {
        DepthModel::FrontoPlane { depth: 10.0 }
    }
}

/// How the relative motion is drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MotionSpec {
    /// Exact pose, no sampling.
    Fixed(PoseVec6),
    /// Per-coordinate uniform sampling in `[-bound, bound]`, rejecting draws
    /// whose rotation angle or translation norm falls below the floors.
    Bounds {
        rot: [f64; 3],
        trans: [f64; 3],
        min_rot_angle: f64,
        min_trans_norm: f64,
    },
    /// Random rotation axis and translation direction at fixed magnitudes.
    FixedMagnitude { rot_angle: f64, trans_norm: f64 },
}

impl Default for MotionSpec {
    fn default() -> Self {
        MotionSpec::FixedMagnitude {
            rot_angle: 3.0f64.to_radians(),
            trans_norm: 0.5,
        }
    }
}

/// Photometric perturbation of the source view: `clamp(gain*v + bias + noise)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Photometric {
    pub gain: f64,
    pub bias: f64,
    pub noise_std: f64,
}

impl Default for Photometric {
    fn default() -> Self {
        Photometric {
            gain: 1.0,
            bias: 0.0,
            noise_std: 0.0,
        }
    }
}

/// Moving-object stand-ins: square patches copied to non-overlapping random
/// destinations of the source view, covering exactly `count * patch_size^2`
/// pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutlierSpec {
    pub count: usize,
    pub patch_size: usize,
}

impl Default for OutlierSpec {
    fn default() -> Self {
        OutlierSpec {
            count: 0,
            patch_size: 12,
        }
    }
}

/// Complete scene recipe; fully deterministic given `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// (height, width), each at least 64.
    pub size: (usize, usize),
    /// Defaults to fx = fy = 3*width with a centered principal point.
    pub intrinsics: Option<Intrinsics>,
    pub depth_model: DepthModel,
    pub motion: MotionSpec,
    pub texture: TextureSpec,
    pub photometric: Photometric,
    pub outliers: OutlierSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            size: (96, 128),
            intrinsics: None,
            depth_model: DepthModel::default(),
            motion: MotionSpec::default(),
            texture: TextureSpec::default(),
            photometric: Photometric::default(),
            outliers: OutlierSpec::default(),
        }
    }
}

impl SceneSpec {
    pub fn intrinsics(&self) -> Intrinsics {
        self.intrinsics.unwrap_or_else(|| {
            let (h, w) = self.size;
            Intrinsics::new(
                3.0 * w as f64,
                3.0 * w as f64,
                (w as f64 - 1.0) / 2.0,
                (h as f64 - 1.0) / 2.0,
            )
            .expect("default intrinsics are valid")
        })
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h < 64 || w < 64 {
            return Err(Error::invalid(format!(
                "scene size must be at least 64x64, got {h}x{w}"
            )));
        }
        if self.texture.octaves == 0 || !(0.0..=1.0).contains(&self.texture.contrast) {
            return Err(Error::invalid(
                "texture needs octaves >= 1 and contrast in [0, 1]",
            ));
        }
        // The finest octave cell must stay above ~2 px or the texture
        // aliases under the renderer's point sampling.
        if !(self.texture.base_cell.is_finite()
            && self.texture.base_cell / (1 << (self.texture.octaves - 1)) as f64 >= 2.0)
        {
            return Err(Error::invalid(
                "texture base_cell too small for the octave count",
            ));
        }
        if self.photometric.gain <= 0.0 || self.photometric.noise_std < 0.0 {
            return Err(Error::invalid("photometric gain must be > 0, noise >= 0"));
        }
        let o = &self.outliers;
        if o.count > 0 {
            if o.patch_size == 0 || o.patch_size > h.min(w) / 2 {
                return Err(Error::invalid("outlier patch size out of range"));
            }
            if o.count * o.patch_size * o.patch_size > h * w / 2 {
                return Err(Error::invalid("outlier patches would cover over half the image"));
            }
        }
        match self.depth_model {
            DepthModel::FrontoPlane { depth } => {
                if depth <= 0.0 {
                    return Err(Error::invalid("plane depth must be positive"));
                }
            }
            DepthModel::SlantedPlane { normal, d0 } => {
                let n = Vector3::from(normal);
                if n.norm() < 1e-9 || d0 <= 0.0 {
                    return Err(Error::invalid("slanted plane needs a nonzero normal, d0 > 0"));
                }
            }
            DepthModel::PlaneSphere {
                plane_depth,
                center,
                radius,
            } => {
                if plane_depth <= 0.0 || radius <= 0.0 {
                    return Err(Error::invalid("plane depth and sphere radius must be positive"));
                }
                if center[2] <= radius {
                    return Err(Error::invalid(
                        "sphere must lie fully in front of the target camera",
                    ));
                }
                if center[2] + radius >= plane_depth {
                    return Err(Error::invalid("sphere must float in front of the plane"));
                }
            }
        }
        Ok(())
    }
}

/// Rendered pair with ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub target: Image,
    pub source: Image,
    pub depth_gt: DepthMap,
    pub pose_gt: PoseSE3,
    pub k: Intrinsics,
    /// Target pixels whose surface point is visible (in frame, in front, and
    /// unoccluded) in the source view.
    pub visibility: Grid<bool>,
}

// ---------------------------------------------------------------------------
// Texture

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Lattice value in [0, 1) for (octave, i, j), independent of evaluation order.
fn lattice(seed: u64, octave: usize, i: i64, j: i64) -> f64 {
    let k = seed
        ^ (octave as u64).wrapping_mul(0xD6E8FEB86659FD93)
        ^ (i as u64).wrapping_mul(0xA0761D6478BD642F)
        ^ (j as u64).wrapping_mul(0xE7037ED1A0B428DB);
    (splitmix64(k) >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Continuous band-limited texture over the target image plane.
struct Texture {
    seed: u64,
    octaves: usize,
    contrast: f64,
    base_cell: f64,
    lo: f64,
    hi: f64,
}

impl Texture {
    fn raw(&self, x: f64, y: f64) -> f64 {
        let mut sum = 0.0;
        let mut amp_total = 0.0;
        let mut amp = 1.0;
        let mut cell = self.base_cell;
        for o in 0..self.octaves {
            let sx = x / cell;
            let sy = y / cell;
            let i = sx.floor();
            let j = sy.floor();
            let fx = smoothstep(sx - i);
            let fy = smoothstep(sy - j);
            let (i, j) = (i as i64, j as i64);
            let v00 = lattice(self.seed, o, i, j);
            let v01 = lattice(self.seed, o, i, j + 1);
            let v10 = lattice(self.seed, o, i + 1, j);
            let v11 = lattice(self.seed, o, i + 1, j + 1);
            let v = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10)
                + fy * ((1.0 - fx) * v01 + fx * v11);
            sum += amp * v;
            amp_total += amp;
            amp *= 0.5;
            cell /= 2.0;
        }
        sum / amp_total
    }

    /// Calibrated so values over the padded image domain span `0.5 +- c/2`.
    fn eval(&self, x: f64, y: f64) -> f64 {
        let norm = (self.raw(x, y) - self.lo) / (self.hi - self.lo);
        (0.5 + self.contrast * (norm - 0.5)).clamp(0.0, 1.0)
    }

    fn calibrated(seed: u64, spec: &TextureSpec, h: usize, w: usize) -> Texture {
        let mut tex = Texture {
            seed,
            octaves: spec.octaves,
            contrast: spec.contrast,
            base_cell: spec.base_cell,
            lo: 0.0,
            hi: 1.0,
        };
        let pad_x = (w as i64) / 4;
        let pad_y = (h as i64) / 4;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in (-pad_y..h as i64 + pad_y).step_by(2) {
            for x in (-pad_x..w as i64 + pad_x).step_by(2) {
                let v = tex.raw(x as f64, y as f64);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        tex.lo = lo;
        tex.hi = (hi - lo).max(1e-6) + lo;
        tex
    }
}

// ---------------------------------------------------------------------------
// Surfaces

/// Normalized surface set in the target frame.
enum Surface {
    Plane { n: Vector3<f64>, d0: f64 },
    PlaneAndSphere {
        n: Vector3<f64>,
        d0: f64,
        center: Vector3<f64>,
        radius: f64,
    },
}

fn plane_hit(n: &Vector3<f64>, d0: f64, o: &Vector3<f64>, u: &Vector3<f64>) -> Option<f64> {
    let denom = n.dot(u);
    if denom.abs() < 1e-12 {
        return None;
    }
    let lam = (d0 - n.dot(o)) / denom;
    (lam > 1e-9).then_some(lam)
}

fn sphere_hit(
    center: &Vector3<f64>,
    radius: f64,
    o: &Vector3<f64>,
    u: &Vector3<f64>,
) -> Option<f64> {
    let oc = o - center;
    let a = u.dot(u);
    let b = oc.dot(u);
    let c = oc.dot(&oc) - radius * radius;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let near = (-b - sq) / a;
    if near > 1e-9 {
        return Some(near);
    }
    let far = (-b + sq) / a;
    (far > 1e-9).then_some(far)
}

impl Surface {
    fn from_model(model: &DepthModel) -> Surface {
        match *model {
            DepthModel::FrontoPlane { depth } => Surface::Plane {
                n: Vector3::z(),
                d0: depth,
            },
            DepthModel::SlantedPlane { normal, d0 } => {
                let n = Vector3::from(normal);
                let scale = n.norm();
                Surface::Plane {
                    n: n / scale,
                    d0: d0 / scale,
                }
            }
            DepthModel::PlaneSphere {
                plane_depth,
                center,
                radius,
            } => Surface::PlaneAndSphere {
                n: Vector3::z(),
                d0: plane_depth,
                center: Vector3::from(center),
                radius,
            },
        }
    }

    /// Nearest intersection parameter along `o + lam * u`, `lam > 0`.
    fn nearest(&self, o: &Vector3<f64>, u: &Vector3<f64>) -> Option<f64> {
        match self {
            Surface::Plane { n, d0 } => plane_hit(n, *d0, o, u),
            Surface::PlaneAndSphere {
                n,
                d0,
                center,
                radius,
            } => {
                let p = plane_hit(n, *d0, o, u);
                let s = sphere_hit(center, *radius, o, u);
                match (p, s) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Rendering

/// Renders the view whose camera maps target-frame points as `x_view = R x + t`
/// (identity for the target itself). Returns the image and per-pixel ray
/// parameters (equal to depth for the target view). Pixels that miss the
/// surface or see it behind the target camera render as 0 with parameter 0.
fn render_view(
    surface: &Surface,
    tex: &Texture,
    k: &Intrinsics,
    view_from_target: &PoseSE3,
    h: usize,
    w: usize,
) -> (Image, Grid<f64>) {
    let rt = view_from_target.rotation().transpose();
    let o = -(rt * view_from_target.translation());
    let mut img = Grid::filled(h, w, 0.0f32);
    let mut lam = Grid::filled(h, w, 0.0f64);
    for r in 0..h {
        for c in 0..w {
            let dir = Vector3::new(
                (c as f64 - k.cx) / k.fx,
                (r as f64 - k.cy) / k.fy,
                1.0,
            );
            let u = rt * dir;
            let Some(l) = surface.nearest(&o, &u) else { continue };
            let x = o + u * l;
            if x.z <= EPS_Z {
                continue;
            }
            let px = k.fx * x.x / x.z + k.cx;
            let py = k.fy * x.y / x.z + k.cy;
            img.set(r, c, tex.eval(px, py) as f32);
            lam.set(r, c, l);
        }
    }
    (img, lam)
}

fn sample_motion(motion: &MotionSpec, rng: &mut ChaCha8Rng) -> PoseVec6 {
    match *motion {
        MotionSpec::Fixed(v) => v,
        MotionSpec::Bounds {
            rot,
            trans,
            min_rot_angle,
            min_trans_norm,
        } => loop {
            let draw = |rng: &mut ChaCha8Rng, b: f64| {
                if b > 0.0 {
                    rng.random_range(-b..=b)
                } else {
                    0.0
                }
            };
            let v = PoseVec6::new(
                draw(rng, rot[0]),
                draw(rng, rot[1]),
                draw(rng, rot[2]),
                draw(rng, trans[0]),
                draw(rng, trans[1]),
                draw(rng, trans[2]),
            );
            if v.rotation_vector().norm() >= min_rot_angle
                && v.translation().norm() >= min_trans_norm
            {
                break v;
            }
        },
        MotionSpec::FixedMagnitude {
            rot_angle,
            trans_norm,
        } => {
            let axis: [f64; 3] = UnitSphere.sample(rng);
            let dir: [f64; 3] = UnitSphere.sample(rng);
            PoseVec6::new(
                axis[0] * rot_angle,
                axis[1] * rot_angle,
                axis[2] * rot_angle,
                dir[0] * trans_norm,
                dir[1] * trans_norm,
                dir[2] * trans_norm,
            )
        }
    }
}

/// Visibility of each target pixel's surface point in the source view: the
/// point must project in frame, in front of the source camera, and be the
/// nearest surface along its source ray (no occlusion).
fn visibility_mask(
    surface: &Surface,
    depth: &Grid<f64>,
    pose: &PoseSE3,
    k: &Intrinsics,
) -> Grid<bool> {
    let (h, w) = depth.dims();
    let rt = pose.rotation().transpose();
    let o = -(rt * pose.translation());
    Grid::from_fn(h, w, |r, c| {
        let d = depth.at(r, c);
        if d <= 0.0 {
            return false;
        }
        let Some(((px, py), _)) = project((c as f64, r as f64), d, pose, k) else {
            return false;
        };
        if !(px >= 0.0 && py >= 0.0 && px <= (w - 1) as f64 && py <= (h - 1) as f64) {
            return false;
        }
        // Occlusion: walk the source ray toward the point; the point sits at
        // parameter 1, so any strictly nearer surface hit occludes it.
        let x = Vector3::new(
            (c as f64 - k.cx) / k.fx * d,
            (r as f64 - k.cy) / k.fy * d,
            d,
        );
        let u = x - o;
        match surface.nearest(&o, &u) {
            Some(nearest) => nearest > 1.0 - 1e-6,
            None => false,
        }
    })
}

/// Renders a seeded, geometrically consistent pair.
pub fn gen_scene(spec: &SceneSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let (h, w) = spec.size;
    let k = spec.intrinsics();
    let surface = Surface::from_model(&spec.depth_model);
    let tex = Texture::calibrated(spec.seed, &spec.texture, h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let (target, lam) = render_view(&surface, &tex, &k, &PoseSE3::identity(), h, w);
    if lam.iter().any(|&l| l <= 0.0) {
        return Err(Error::Generation(
            "surface does not cover the target view with positive depth".into(),
        ));
    }
    let depth_values = lam; // target rays have unit z, so the parameter is depth

    let mut accepted = None;
    for _ in 0..100 {
        let v = sample_motion(&spec.motion, &mut rng);
        let pose = exp_map(&v)?;
        let vis = visibility_mask(&surface, &depth_values, &pose, &k);
        let frac = vis.iter().filter(|&&b| b).count() as f64 / (h * w) as f64;
        if frac >= 0.7 {
            accepted = Some((pose, vis));
            break;
        }
        if matches!(spec.motion, MotionSpec::Fixed(_)) {
            break; // a fixed pose cannot improve by resampling
        }
    }
    let Some((pose_gt, visibility)) = accepted else {
        return Err(Error::Generation(
            "no sampled motion kept 70% of pixels visible within 100 attempts".into(),
        ));
    };

    let (mut source, _) = render_view(&surface, &tex, &k, &pose_gt, h, w);

    let ph = &spec.photometric;
    if ph.gain != 1.0 || ph.bias != 0.0 {
        source = source.map(|v| ((v as f64 * ph.gain + ph.bias).clamp(0.0, 1.0)) as f32);
    }
    if ph.noise_std > 0.0 {
        let normal = Normal::new(0.0, ph.noise_std).expect("validated std");
        let mut noisy = source.clone();
        for r in 0..h {
            for c in 0..w {
                let n: f64 = normal.sample(&mut rng);
                noisy.set(r, c, ((source.at(r, c) as f64 + n).clamp(0.0, 1.0)) as f32);
            }
        }
        source = noisy;
    }
    if spec.outliers.count > 0 {
        apply_outlier_patches(&mut source, &spec.outliers, &mut rng)?;
    }

    Ok(SyntheticPair {
        target,
        source,
        depth_gt: DepthMap::new(depth_values, Grid::filled(h, w, true))?,
        pose_gt,
        k,
        visibility,
    })
}

fn apply_outlier_patches(
    img: &mut Image,
    spec: &OutlierSpec,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let (h, w) = img.dims();
    let s = spec.patch_size;
    let mut placed: Vec<(usize, usize)> = Vec::with_capacity(spec.count);
    let mut attempts = 0;
    while placed.len() < spec.count {
        attempts += 1;
        if attempts > 1000 {
            return Err(Error::Generation(
                "could not place non-overlapping outlier patches".into(),
            ));
        }
        let dr = rng.random_range(0..=h - s);
        let dc = rng.random_range(0..=w - s);
        let overlaps = placed
            .iter()
            .any(|&(r, c)| dr + s > r && r + s > dr && dc + s > c && c + s > dc);
        if overlaps {
            continue;
        }
        let sr = rng.random_range(0..=h - s);
        let sc = rng.random_range(0..=w - s);
        let block: Vec<f32> = (0..s)
            .flat_map(|i| (0..s).map(move |j| (i, j)))
            .map(|(i, j)| img.at(sr + i, sc + j))
            .collect();
        for i in 0..s {
            for j in 0..s {
                img.set(dr + i, dc + j, block[i * s + j]);
            }
        }
        placed.push((dr, dc));
    }
    Ok(())
}

/// Inverse-consistency report: the source view warped back by the ground
/// truth, compared against the target on the jointly visible set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub mean_abs_err: f64,
    pub max_abs_err: f64,
    /// Fraction of target pixels visible in the source view.
    pub visible_fraction: f64,
    /// Pixels entering the error statistics.
    pub compared: usize,
}

pub fn verify_pair(pair: &SyntheticPair) -> Result<ConsistencyReport> {
    let (warped, wvis) = warp_image(&pair.source, &pair.depth_gt, &pair.pose_gt, &pair.k)?;
    let (h, w) = pair.target.dims();
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut compared = 0usize;
    let mut visible = 0usize;
    for r in 0..h {
        for c in 0..w {
            if pair.visibility.at(r, c) {
                visible += 1;
                if wvis.at(r, c) {
                    let e = (pair.target.at(r, c) as f64 - warped.at(r, c) as f64).abs();
                    sum += e;
                    max = max.max(e);
                    compared += 1;
                }
            }
        }
    }
    if compared == 0 {
        return Err(Error::invalid("no jointly visible pixels to compare"));
    }
    Ok(ConsistencyReport {
        mean_abs_err: sum / compared as f64,
        max_abs_err: max,
        visible_fraction: visible as f64 / (h * w) as f64,
        compared,
    })
}
