//! SE(3) poses, axis-angle maps, pinhole projection, and dense image warping.
//!
//! Pixel convention throughout: `p = (column, row)`, origin at the center of
//! the top-left pixel. The 6-parameter pose coordinates are axis-angle for
//! rotation plus a plain additive translation (not an se(3) twist), so update
//! steps add directly onto the six coordinates.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::grid::{bilinear, Grid, Image};

/// Transformed points with z at or below this are treated as behind the camera.
pub const EPS_Z: f64 = 1e-6;

/// Pinhole intrinsics in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let all_finite = [fx, fy, cx, cy].iter().all(|v| v.is_finite());
        if !all_finite || fx <= 0.0 || fy <= 0.0 {
            return Err(Error::invalid(format!(
                "intrinsics must be finite with positive focal lengths, got \
                 fx={fx} fy={fy} cx={cx} cy={cy}"
            )));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    /// Rescales to the quarter-resolution grid under the pixel-center
    /// convention: full-resolution pixel x maps to quarter pixel (x-1.5)/4,
    /// hence cx' = (cx+0.5)/4 - 0.5.
    pub fn to_quarter(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx / 4.0,
            fy: self.fy / 4.0,
            cx: (self.cx + 0.5) / 4.0 - 0.5,
            cy: (self.cy + 0.5) / 4.0 - 0.5,
        }
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl PoseSE3 {
    /// Validates orthonormality (`R^T R = I` and `det R = 1` within 1e-9).
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        if !r.iter().all(|v| v.is_finite()) || !t.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("pose entries must be finite"));
        }
        let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det_dev = (r.determinant() - 1.0).abs();
        if dev > 1e-9 || det_dev > 1e-9 {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal: max|R^T R - I| = {dev:.3e}, |det - 1| = {det_dev:.3e}"
            )));
        }
        Ok(PoseSE3 { r, t })
    }

    pub fn identity() -> Self {
        PoseSE3 {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x + self.t
    }

    /// Inverse transform: `x -> R^T (x - t)`.
    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.r.transpose();
        PoseSE3 {
            r: rt,
            t: -(rt * self.t),
        }
    }

    fn is_identity_bits(&self) -> bool {
        self.r == Matrix3::identity() && self.t == Vector3::zeros()
    }
}

/// Axis-angle rotation coordinates (radians) plus translation (scene units).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseVec6 {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl PoseVec6 {
    pub fn new(rx: f64, ry: f64, rz: f64, tx: f64, ty: f64, tz: f64) -> Self {
        PoseVec6 {
            rx,
            ry,
            rz,
            tx,
            ty,
            tz,
        }
    }

    pub fn zero() -> Self {
        PoseVec6::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        PoseVec6::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.rx, self.ry, self.rz, self.tx, self.ty, self.tz]
    }

    pub fn rotation_vector(&self) -> Vector3<f64> {
        Vector3::new(self.rx, self.ry, self.rz)
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.tx, self.ty, self.tz)
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential on the rotation block; translation passes through.
/// Near zero rotation the `sin`/`cos` coefficients use second-order series to
/// avoid dividing by a vanishing angle.
pub fn exp_map(v: &PoseVec6) -> Result<PoseSE3> {
    if !v.as_array().iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("pose coordinates must be finite"));
    }
    let r = v.rotation_vector();
    let theta_sq = r.norm_squared();
    let k = skew(&r);
    let (a, b) = if theta_sq < 1e-12 {
        // sin(t)/t and (1-cos t)/t^2 expanded to second order in t^2.
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        let theta = theta_sq.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    };
    let rot = Matrix3::identity() + a * k + b * (k * k);
    Ok(PoseSE3 {
        r: rot,
        t: v.translation(),
    })
}

/// Inverse of [`exp_map`]; the returned rotation angle lies in `[0, pi]`.
///
/// At an angle of exactly pi both antipodal axes represent the same rotation;
/// this returns the axis whose first component of magnitude above 1e-6 is
/// positive.
pub fn log_map(t: &PoseSE3) -> PoseVec6 {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(t.r));
    // Canonical branch: angle in [0, pi] requires a non-negative scalar part.
    let q = if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    };
    let vec = q.imag();
    let n = vec.norm();
    let angle = 2.0 * n.atan2(q.w);
    let mut r = if n < 1e-9 {
        // theta -> 0: q_vec = axis * sin(theta/2) ~ axis * theta / 2.
        2.0 * vec
    } else {
        vec * (angle / n)
    };
    if (angle - std::f64::consts::PI).abs() < 1e-9 {
        // Pin the antipodal sign choice to the documented convention.
        for i in 0..3 {
            if r[i].abs() > 1e-6 {
                if r[i] < 0.0 {
                    r = -r;
                }
                break;
            }
        }
    }
    PoseVec6::new(r.x, r.y, r.z, t.t.x, t.t.y, t.t.z)
}

/// Back-projects `p` to depth `d`, transforms by `T`, and reprojects with `K`.
/// Returns the source-image pixel and the transformed depth, or `None` when
/// the point lands behind the camera (z <= [`EPS_Z`]).
pub fn project(
    p: (f64, f64),
    d: f64,
    t: &PoseSE3,
    k: &Intrinsics,
) -> Option<((f64, f64), f64)> {
    if t.is_identity_bits() {
        // Bit-exact identity path; the general chain rounds at the ulp level.
        return (d > EPS_Z).then_some((p, d));
    }
    let dir = Vector3::new((p.0 - k.cx) / k.fx, (p.1 - k.cy) / k.fy, 1.0);
    let x = t.r * (dir * d) + t.t;
    if x.z <= EPS_Z {
        return None;
    }
    Some(((k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy), x.z))
}

/// Per-pixel positive depth with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    values: Grid<f64>,
    valid: Grid<bool>,
}

impl DepthMap {
    /// Requires values to be finite everywhere and positive wherever valid.
    pub fn new(values: Grid<f64>, valid: Grid<bool>) -> Result<Self> {
        if values.dims() != valid.dims() {
            return Err(Error::invalid("depth and validity dimensions disagree"));
        }
        for (v, &ok) in values.iter().zip(valid.iter()) {
            if !v.is_finite() || (ok && *v <= 0.0) {
                return Err(Error::invalid(format!(
                    "depth values must be finite and positive where valid, got {v}"
                )));
            }
        }
        Ok(DepthMap { values, valid })
    }

    pub fn constant(h: usize, w: usize, depth: f64) -> Result<Self> {
        DepthMap::new(Grid::filled(h, w, depth), Grid::filled(h, w, true))
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }

    pub fn valid(&self) -> &Grid<bool> {
        &self.valid
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    pub fn at(&self, r: usize, c: usize) -> Option<f64> {
        self.valid.at(r, c).then(|| self.values.at(r, c))
    }

    /// Mean depth over valid pixels; `None` when no pixel is valid.
    pub fn mean_valid(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (v, &ok) in self.values.iter().zip(self.valid.iter()) {
            if ok {
                sum += v;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Warps the source image into the target frame: each target pixel samples
/// `I_s` bilinearly at its projected correspondence. Pixels that project out
/// of bounds, behind the camera, or from invalid depth are invisible and 0.
pub fn warp_image(
    source: &Image,
    depth: &DepthMap,
    t: &PoseSE3,
    k: &Intrinsics,
) -> Result<(Image, Grid<bool>)> {
    if source.dims() != depth.dims() {
        return Err(Error::invalid(format!(
            "image {:?} and depth {:?} dimensions disagree",
            source.dims(),
            depth.dims()
        )));
    }
    let (h, w) = source.dims();
    let mut out = Grid::filled(h, w, 0.0f32);
    let mut vis = Grid::filled(h, w, false);
    for r in 0..h {
        for c in 0..w {
            let Some(d) = depth.at(r, c) else { continue };
            let Some(((x, y), _)) = project((c as f64, r as f64), d, t, k) else {
                continue;
            };
            let Some(v) = bilinear(source, x, y) else {
                continue;
            };
            out.set(r, c, v as f32);
            vis.set(r, c, true);
        }
    }
    Ok((out, vis))
}
