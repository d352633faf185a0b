//! All-pairs correlation volumes, the 3-level pooled pyramid, and sub-pixel
//! lookup of correlation observations.
//!
//! Level 0 holds `V_0[i,j,k,l] = <F_t[i,j], F_s[k,l]>`; deeper levels average-
//! pool the source dimensions 2x2 (edge replication on odd sizes). Above a
//! size threshold the volume is never materialized: pooling commutes with the
//! dot product, so entries are computed on demand from pooled source features.

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{project, DepthMap, Intrinsics, PoseSE3};
use crate::grid::Grid;

pub const PYRAMID_LEVELS: usize = 3;

/// Quarter-grid pixel count above which the volume is evaluated lazily.
pub const DEFAULT_DENSE_THRESHOLD: usize = 128 * 160;

struct Volume {
    sh: usize,
    sw: usize,
    data: Vec<f32>,
}

impl Volume {
    #[inline]
    fn at(&self, ij: usize, k: usize, l: usize) -> f32 {
        self.data[(ij * self.sh + k) * self.sw + l]
    }
}

/// Pooled source descriptor grid for lazy evaluation (not unit-normalized;
/// its dot products equal pooled correlations by linearity).
struct PooledFeatures {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f32>,
}

impl PooledFeatures {
    #[inline]
    fn descriptor(&self, r: usize, c: usize) -> &[f32] {
        let base = (r * self.w + c) * self.d;
        &self.data[base..base + self.d]
    }
}

enum Repr {
    Dense(Vec<Volume>),
    Lazy {
        target: FeatureMap,
        source_levels: Vec<PooledFeatures>,
    },
}

/// Three-level correlation pyramid over a fixed target grid.
pub struct CorrelationPyramid {
    h: usize,
    w: usize,
    repr: Repr,
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum::<f64>()
}

fn pooled_dims(h: usize, w: usize, level: usize) -> (usize, usize) {
    let mut dims = (h, w);
    for _ in 0..level {
        dims = (dims.0.div_ceil(2), dims.1.div_ceil(2));
    }
    dims
}

/// Builds the pyramid with the default dense/lazy threshold.
pub fn build_pyramid(f_t: &FeatureMap, f_s: &FeatureMap) -> Result<CorrelationPyramid> {
    build_pyramid_with(f_t, f_s, DEFAULT_DENSE_THRESHOLD)
}

/// Builds the pyramid, materializing volumes only when the quarter grid has
/// at most `dense_threshold` pixels.
pub fn build_pyramid_with(
    f_t: &FeatureMap,
    f_s: &FeatureMap,
    dense_threshold: usize,
) -> Result<CorrelationPyramid> {
    if f_t.dims() != f_s.dims() || f_t.channels() != f_s.channels() {
        return Err(Error::invalid(format!(
            "feature shapes disagree: {:?}x{} vs {:?}x{}",
            f_t.dims(),
            f_t.channels(),
            f_s.dims(),
            f_s.channels()
        )));
    }
    let (h, w) = f_t.dims();
    if h * w <= dense_threshold {
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        let mut base = Vec::with_capacity(h * w * h * w);
        for i in 0..h {
            for j in 0..w {
                let td = f_t.descriptor(i, j);
                for k in 0..h {
                    for l in 0..w {
                        base.push(dot(td, f_s.descriptor(k, l)) as f32);
                    }
                }
            }
        }
        levels.push(Volume {
            sh: h,
            sw: w,
            data: base,
        });
        for level in 1..PYRAMID_LEVELS {
            let prev = &levels[level - 1];
            let (sh, sw) = pooled_dims(h, w, level);
            let mut data = Vec::with_capacity(h * w * sh * sw);
            for ij in 0..h * w {
                for k in 0..sh {
                    let k0 = 2 * k;
                    let k1 = (2 * k + 1).min(prev.sh - 1);
                    for l in 0..sw {
                        let l0 = 2 * l;
                        let l1 = (2 * l + 1).min(prev.sw - 1);
                        let sum = prev.at(ij, k0, l0) as f64
                            + prev.at(ij, k0, l1) as f64
                            + prev.at(ij, k1, l0) as f64
                            + prev.at(ij, k1, l1) as f64;
                        data.push((sum / 4.0) as f32);
                    }
                }
            }
            levels.push(Volume { sh, sw, data });
        }
        Ok(CorrelationPyramid {
            h,
            w,
            repr: Repr::Dense(levels),
        })
    } else {
        let d = f_s.channels();
        let mut source_levels = Vec::with_capacity(PYRAMID_LEVELS);
        source_levels.push(PooledFeatures {
            h,
            w,
            d,
            data: (0..h)
                .flat_map(|r| (0..w).flat_map(move |c| (0..d).map(move |ch| (r, c, ch))))
                .map(|(r, c, ch)| f_s.descriptor(r, c)[ch])
                .collect(),
        });
        for level in 1..PYRAMID_LEVELS {
            let prev = &source_levels[level - 1];
            let (sh, sw) = pooled_dims(h, w, level);
            let mut data = vec![0.0f32; sh * sw * d];
            for k in 0..sh {
                let k0 = 2 * k;
                let k1 = (2 * k + 1).min(prev.h - 1);
                for l in 0..sw {
                    let l0 = 2 * l;
                    let l1 = (2 * l + 1).min(prev.w - 1);
                    let base = (k * sw + l) * d;
                    for ch in 0..d {
                        let sum = prev.descriptor(k0, l0)[ch] as f64
                            + prev.descriptor(k0, l1)[ch] as f64
                            + prev.descriptor(k1, l0)[ch] as f64
                            + prev.descriptor(k1, l1)[ch] as f64;
                        data[base + ch] = (sum / 4.0) as f32;
                    }
                }
            }
            source_levels.push(PooledFeatures { h: sh, w: sw, d, data });
        }
        Ok(CorrelationPyramid {
            h,
            w,
            repr: Repr::Lazy {
                target: f_t.clone(),
                source_levels,
            },
        })
    }
}

impl CorrelationPyramid {
    /// Target-grid dimensions (also the level-0 source dimensions).
    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Source-grid dimensions at `level`.
    pub fn level_dims(&self, level: usize) -> (usize, usize) {
        pooled_dims(self.h, self.w, level)
    }

    /// Raw volume entry `V_level[i, j, k, l]`.
    pub fn value(&self, level: usize, i: usize, j: usize, k: usize, l: usize) -> f64 {
        debug_assert!(level < PYRAMID_LEVELS);
        match &self.repr {
            Repr::Dense(levels) => levels[level].at(i * self.w + j, k, l) as f64,
            Repr::Lazy {
                target,
                source_levels,
            } => dot(
                target.descriptor(i, j),
                source_levels[level].descriptor(k, l),
            ),
        }
    }

    /// Bilinear lookup over the source dimensions at `source_xy / 2^level`.
    /// `target_rc` is the (row, col) quarter-grid index of the target pixel;
    /// `source_xy` is a continuous (column, row) quarter-grid coordinate.
    /// Returns `None` when the scaled coordinate leaves `[0, dim-1]`.
    pub fn lookup(
        &self,
        target_rc: (usize, usize),
        source_xy: (f64, f64),
        level: usize,
    ) -> Option<f64> {
        let (sh, sw) = self.level_dims(level);
        let scale = (1usize << level) as f64;
        let x = source_xy.0 / scale;
        let y = source_xy.1 / scale;
        if !(x >= 0.0 && y >= 0.0 && x <= (sw - 1) as f64 && y <= (sh - 1) as f64) {
            return None;
        }
        let (i, j) = target_rc;
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(sw - 1);
        let y1 = (y0 + 1).min(sh - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let v00 = self.value(level, i, j, y0, x0);
        let v01 = self.value(level, i, j, y0, x1);
        let v10 = self.value(level, i, j, y1, x0);
        let v11 = self.value(level, i, j, y1, x1);
        Some((1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11))
    }
}

/// Correlation observations at the hypothesized correspondences.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMap {
    pub values: Grid<f64>,
    /// False where the projection left the image or went behind the camera.
    pub valid: Grid<bool>,
}

/// Looks up, for every valid quarter-grid pixel, the correlation at its
/// projected correspondence under `(depth, pose)`.
pub fn correlation_map(
    pyramid: &CorrelationPyramid,
    depth: &DepthMap,
    pose: &PoseSE3,
    k_quarter: &Intrinsics,
    level: usize,
) -> Result<CorrelationMap> {
    if depth.dims() != pyramid.dims() {
        return Err(Error::invalid(format!(
            "depth {:?} does not match the correlation grid {:?}",
            depth.dims(),
            pyramid.dims()
        )));
    }
    let (h, w) = pyramid.dims();
    let mut values = Grid::filled(h, w, 0.0f64);
    let mut valid = Grid::filled(h, w, false);
    for r in 0..h {
        for c in 0..w {
            let Some(d) = depth.at(r, c) else { continue };
            let Some((pp, _)) = project((c as f64, r as f64), d, pose, k_quarter) else {
                continue;
            };
            let Some(v) = pyramid.lookup((r, c), pp, level) else {
                continue;
            };
            values.set(r, c, v);
            valid.set(r, c, true);
        }
    }
    Ok(CorrelationMap { values, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_map, PoseVec6};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_features(seed: u64, h: usize, w: usize, d: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..h * w * d)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        FeatureMap::from_unnormalized(h, w, d, data).unwrap()
    }

    /// Brute-force 2x2 pooling (edge replication) of explicit level values.
    fn pool_oracle(p: &CorrelationPyramid, from_level: usize, i: usize, j: usize) -> Vec<f64> {
        let (sh, sw) = p.level_dims(from_level);
        let (th, tw) = (sh.div_ceil(2), sw.div_ceil(2));
        let mut out = Vec::with_capacity(th * tw);
        for k in 0..th {
            for l in 0..tw {
                let k1 = (2 * k + 1).min(sh - 1);
                let l1 = (2 * l + 1).min(sw - 1);
                out.push(
                    (p.value(from_level, i, j, 2 * k, 2 * l)
                        + p.value(from_level, i, j, 2 * k, l1)
                        + p.value(from_level, i, j, k1, 2 * l)
                        + p.value(from_level, i, j, k1, l1))
                        / 4.0,
                );
            }
        }
        out
    }

    #[test]
    fn self_pair_has_unit_diagonal() {
        let f = random_features(7, 6, 6, 4);
        let p = build_pyramid(&f, &f).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!((p.value(0, i, j, i, j) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn orthogonal_fields_correlate_to_zero() {
        let mut a = vec![0.0f32; 4 * 4 * 2];
        let mut b = vec![0.0f32; 4 * 4 * 2];
        for i in 0..16 {
            a[2 * i] = 1.0;
            b[2 * i + 1] = 1.0;
        }
        let fa = FeatureMap::from_unnormalized(4, 4, 2, a).unwrap();
        let fb = FeatureMap::from_unnormalized(4, 4, 2, b).unwrap();
        let p = build_pyramid(&fa, &fb).unwrap();
        for level in 0..PYRAMID_LEVELS {
            let (sh, sw) = p.level_dims(level);
            for k in 0..sh {
                for l in 0..sw {
                    assert_eq!(p.value(level, 1, 2, k, l), 0.0);
                }
            }
        }
    }

    #[test]
    fn pooling_matches_brute_force_and_stays_bounded() {
        let f_t = random_features(11, 8, 8, 4);
        let f_s = random_features(12, 8, 8, 4);
        let p = build_pyramid(&f_t, &f_s).unwrap();
        for level in 0..PYRAMID_LEVELS {
            let (sh, sw) = p.level_dims(level);
            for i in 0..8 {
                for j in 0..8 {
                    for k in 0..sh {
                        for l in 0..sw {
                            let v = p.value(level, i, j, k, l);
                            assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&v));
                        }
                    }
                    if level < PYRAMID_LEVELS - 1 {
                        let oracle = pool_oracle(&p, level, i, j);
                        let (nh, nw) = p.level_dims(level + 1);
                        for k in 0..nh {
                            for l in 0..nw {
                                let got = p.value(level + 1, i, j, k, l);
                                assert!((got - oracle[k * nw + l]).abs() < 1e-6);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn odd_dimensions_pool_with_edge_replication() {
        let f_t = random_features(21, 5, 7, 3);
        let f_s = random_features(22, 5, 7, 3);
        let p = build_pyramid(&f_t, &f_s).unwrap();
        assert_eq!(p.level_dims(1), (3, 4));
        assert_eq!(p.level_dims(2), (2, 2));
        let oracle = pool_oracle(&p, 0, 2, 3);
        for k in 0..3 {
            for l in 0..4 {
                assert!((p.value(1, 2, 3, k, l) - oracle[k * 4 + l]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn swapping_inputs_transposes_the_volume() {
        let f_t = random_features(31, 6, 5, 4);
        let f_s = random_features(32, 6, 5, 4);
        let st = build_pyramid(&f_t, &f_s).unwrap();
        let ts = build_pyramid(&f_s, &f_t).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                for k in 0..6 {
                    for l in 0..5 {
                        assert_eq!(st.value(0, i, j, k, l), ts.value(0, k, l, i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn lazy_matches_dense() {
        let f_t = random_features(41, 7, 9, 5);
        let f_s = random_features(42, 7, 9, 5);
        let dense = build_pyramid_with(&f_t, &f_s, usize::MAX).unwrap();
        let lazy = build_pyramid_with(&f_t, &f_s, 0).unwrap();
        assert!(matches!(dense.repr, Repr::Dense(_)));
        assert!(matches!(lazy.repr, Repr::Lazy { .. }));
        for level in 0..PYRAMID_LEVELS {
            let (sh, sw) = dense.level_dims(level);
            for i in 0..7 {
                for j in 0..9 {
                    for k in 0..sh {
                        for l in 0..sw {
                            let a = dense.value(level, i, j, k, l);
                            let b = lazy.value(level, i, j, k, l);
                            assert!((a - b).abs() < 1e-6);
                        }
                    }
                }
            }
        }
        // Sub-pixel lookups agree too.
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..200 {
            let level = rng.random_range(0..PYRAMID_LEVELS);
            let xy = (rng.random_range(0.0..8.0), rng.random_range(0.0..6.0));
            let a = dense.lookup((3, 4), xy, level);
            let b = lazy.lookup((3, 4), xy, level);
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-6),
                (a, b) => assert_eq!(a.is_some(), b.is_some()),
            }
        }
    }

    #[test]
    fn lookup_exact_at_nodes_and_midpoints() {
        let f_t = random_features(51, 6, 6, 4);
        let f_s = random_features(52, 6, 6, 4);
        let p = build_pyramid(&f_t, &f_s).unwrap();
        assert_eq!(
            p.lookup((2, 3), (4.0, 1.0), 0).unwrap(),
            p.value(0, 2, 3, 1, 4)
        );
        let mid = p.lookup((2, 3), (4.5, 1.0), 0).unwrap();
        let want = (p.value(0, 2, 3, 1, 4) + p.value(0, 2, 3, 1, 5)) / 2.0;
        assert!((mid - want).abs() < 1e-9);
        // Level-1 coordinates are halved before interpolation.
        assert_eq!(
            p.lookup((2, 3), (4.0, 2.0), 1).unwrap(),
            p.value(1, 2, 3, 1, 2)
        );
    }

    #[test]
    fn lookup_matches_independent_bilinear_oracle() {
        let f_t = random_features(61, 8, 8, 4);
        let f_s = random_features(62, 8, 8, 4);
        let p = build_pyramid(&f_t, &f_s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        for _ in 0..1000 {
            let level = rng.random_range(0..PYRAMID_LEVELS);
            let (sh, sw) = p.level_dims(level);
            let scale = (1usize << level) as f64;
            let x = rng.random_range(-0.5..(sw as f64) * scale);
            let y = rng.random_range(-0.5..(sh as f64) * scale);
            let got = p.lookup((5, 2), (x, y), level);
            let (xs, ys) = (x / scale, y / scale);
            if xs < 0.0 || ys < 0.0 || xs > (sw - 1) as f64 || ys > (sh - 1) as f64 {
                assert!(got.is_none());
                continue;
            }
            let x0 = xs.floor() as usize;
            let y0 = ys.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let y1 = (y0 + 1).min(sh - 1);
            let (fx, fy) = (xs - x0 as f64, ys - y0 as f64);
            let want = (1.0 - fy)
                * ((1.0 - fx) * p.value(level, 5, 2, y0, x0) + fx * p.value(level, 5, 2, y0, x1))
                + fy * ((1.0 - fx) * p.value(level, 5, 2, y1, x0)
                    + fx * p.value(level, 5, 2, y1, x1));
            assert!((got.unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let f_t = random_features(71, 6, 6, 4);
        let f_s = random_features(72, 6, 5, 4);
        assert!(build_pyramid(&f_t, &f_s).is_err());
        let f_s = random_features(73, 6, 6, 3);
        assert!(build_pyramid(&f_t, &f_s).is_err());
    }

    #[test]
    fn correlation_map_identity_self_pair_is_one() {
        let f = random_features(81, 8, 8, 6);
        let p = build_pyramid(&f, &f).unwrap();
        let depth = DepthMap::constant(8, 8, 5.0).unwrap();
        let k = Intrinsics::new(8.0, 8.0, 3.5, 3.5).unwrap();
        let m = correlation_map(&p, &depth, &PoseSE3::identity(), &k, 0).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert!(m.valid.at(r, c));
                assert!((m.values.at(r, c) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn correlation_map_out_of_frame_is_all_invalid() {
        let f = random_features(91, 8, 8, 4);
        let p = build_pyramid(&f, &f).unwrap();
        let depth = DepthMap::constant(8, 8, 1.0).unwrap();
        let k = Intrinsics::new(8.0, 8.0, 3.5, 3.5).unwrap();
        let pose = exp_map(&PoseVec6::new(0.0, 0.0, 0.0, 100.0, 0.0, 0.0)).unwrap();
        let m = correlation_map(&p, &depth, &pose, &k, 0).unwrap();
        assert!(m.valid.iter().all(|&v| !v));
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn correlation_validity_equals_projection_visibility() {
        let f_t = random_features(101, 10, 12, 4);
        let f_s = random_features(102, 10, 12, 4);
        let p = build_pyramid(&f_t, &f_s).unwrap();
        let depth = DepthMap::constant(10, 12, 4.0).unwrap();
        let k = Intrinsics::new(10.0, 10.0, 5.5, 4.5).unwrap();
        let pose = exp_map(&PoseVec6::new(0.02, -0.03, 0.01, 0.8, 0.2, -0.1)).unwrap();
        let m = correlation_map(&p, &depth, &pose, &k, 0).unwrap();
        for r in 0..10 {
            for c in 0..12 {
                let vis = project((c as f64, r as f64), 4.0, &pose, &k)
                    .map(|(pp, _)| {
                        pp.0 >= 0.0 && pp.1 >= 0.0 && pp.0 <= 11.0 && pp.1 <= 9.0
                    })
                    .unwrap_or(false);
                assert_eq!(m.valid.at(r, c), vis, "pixel ({r},{c})");
            }
        }
    }
}
