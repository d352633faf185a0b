//! Gaussian-Uniform mixture observation model and per-pixel uncertainty maps.
//!
//! An observation c has density `(1-rho) N(c | mu, sigma) + rho U(c | -1, 1)`
//! with the Uniform density 0.5 on its support. The Gaussian arm is not
//! truncated to [-1, 1]; outside the Uniform support only the Gaussian arm
//! contributes.

use crate::correlation::CorrelationMap;
use crate::error::{Error, Result};
use crate::grid::{Grid, Image};

/// Lower bound for the mixture weight inside [`UncertaintyMaps`]; keeps the
/// density (and hence the log-likelihood) away from zero.
pub const RHO_MIN: f64 = 1e-3;
pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 2.0;

/// Density of the pure-Uniform arm, used for pixels without an observation.
pub const UNIFORM_DENSITY: f64 = 0.5;

/// Per-pixel mixture parameters (rho, mu, sigma).
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMaps {
    rho: Grid<f64>,
    mu: Grid<f64>,
    sigma: Grid<f64>,
}

impl UncertaintyMaps {
    /// Validates `rho in [RHO_MIN, 1]`, `mu in [-1, 1]`,
    /// `sigma in [SIGMA_MIN, SIGMA_MAX]`.
    pub fn new(rho: Grid<f64>, mu: Grid<f64>, sigma: Grid<f64>) -> Result<Self> {
        if rho.dims() != mu.dims() || rho.dims() != sigma.dims() {
            return Err(Error::invalid("uncertainty map dimensions disagree"));
        }
        for ((&r, &m), &s) in rho.iter().zip(mu.iter()).zip(sigma.iter()) {
            if !(RHO_MIN..=1.0).contains(&r)
                || !(-1.0..=1.0).contains(&m)
                || !(SIGMA_MIN..=SIGMA_MAX).contains(&s)
            {
                return Err(Error::invalid(format!(
                    "uncertainty parameters out of range: rho={r} mu={m} sigma={s}"
                )));
            }
        }
        Ok(UncertaintyMaps { rho, mu, sigma })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.rho.dims()
    }

    pub fn rho(&self) -> &Grid<f64> {
        &self.rho
    }

    pub fn mu(&self) -> &Grid<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &Grid<f64> {
        &self.sigma
    }
}

/// Mixture density at a single observation.
///
/// `rho` is accepted on the full `[0, 1]` range (the [`RHO_MIN`] floor is a
/// map-construction invariant, and the degenerate endpoints are meaningful
/// densities in their own right).
pub fn mixture_pdf(c: f64, rho: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !c.is_finite() {
        return Err(Error::invalid(format!("observation must be finite, got {c}")));
    }
    if !(0.0..=1.0).contains(&rho)
        || !(-1.0..=1.0).contains(&mu)
        || !(SIGMA_MIN..=SIGMA_MAX).contains(&sigma)
    {
        return Err(Error::invalid(format!(
            "mixture parameters out of range: rho={rho} mu={mu} sigma={sigma}"
        )));
    }
    Ok(mixture_pdf_unchecked(c, rho, mu, sigma))
}

#[inline]
fn gaussian(c: f64, mu: f64, sigma: f64) -> f64 {
    let z = (c - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

#[inline]
pub(crate) fn mixture_pdf_unchecked(c: f64, rho: f64, mu: f64, sigma: f64) -> f64 {
    let uniform = if (-1.0..=1.0).contains(&c) {
        UNIFORM_DENSITY
    } else {
        0.0
    };
    (1.0 - rho) * gaussian(c, mu, sigma) + rho * uniform
}

/// Per-pixel mixture densities and their logs.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodMap {
    pub density: Grid<f64>,
    pub log_density: Grid<f64>,
    /// False where the observation was missing (failed projection); those
    /// pixels carry the pure-Uniform density.
    pub valid: Grid<bool>,
}

/// Evaluates the mixture pixelwise. Invalid observations receive the
/// pure-Uniform density [`UNIFORM_DENSITY`].
pub fn likelihood_map(corr: &CorrelationMap, unc: &UncertaintyMaps) -> Result<LikelihoodMap> {
    let (h, w) = corr.values.dims();
    if (h, w) != unc.dims() {
        return Err(Error::invalid(format!(
            "correlation {:?} and uncertainty {:?} dimensions disagree",
            (h, w),
            unc.dims()
        )));
    }
    let mut density = Grid::filled(h, w, 0.0f64);
    let mut log_density = Grid::filled(h, w, 0.0f64);
    for r in 0..h {
        for c in 0..w {
            let p = if corr.valid.at(r, c) {
                mixture_pdf_unchecked(
                    corr.values.at(r, c),
                    unc.rho.at(r, c),
                    unc.mu.at(r, c),
                    unc.sigma.at(r, c),
                )
            } else {
                UNIFORM_DENSITY
            };
            density.set(r, c, p);
            log_density.set(r, c, p.ln());
        }
    }
    Ok(LikelihoodMap {
        density,
        log_density,
        valid: corr.valid.clone(),
    })
}

/// Mean of the log-density over all pixels (V = full pixel count).
pub fn mean_log_likelihood(map: &LikelihoodMap) -> f64 {
    let (h, w) = map.log_density.dims();
    map.log_density.iter().sum::<f64>() / (h * w) as f64
}

/// Deterministic stand-in for a learned uncertainty predictor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UncertaintyParams {
    pub rho0: f64,
    pub kappa: f64,
    pub mu0: f64,
    pub sigma0: f64,
}

impl Default for UncertaintyParams {
    fn default() -> Self {
        UncertaintyParams {
            rho0: 0.1,
            kappa: 2.0,
            mu0: 0.9,
            sigma0: 0.3,
        }
    }
}

/// Residual-driven uncertainty heuristic:
/// `rho = clamp(rho0 + kappa * mean_3x3 |I_t - I_s'|, RHO_MIN, 0.9)`, forced
/// to 0.9 where the warp was invisible; `mu` and `sigma` are constant.
pub fn default_uncertainty(
    target: &Image,
    warped: &Image,
    visibility: &Grid<bool>,
    params: &UncertaintyParams,
) -> Result<UncertaintyMaps> {
    if target.dims() != warped.dims() || target.dims() != visibility.dims() {
        return Err(Error::invalid("uncertainty input dimensions disagree"));
    }
    let (h, w) = target.dims();
    let residual = Grid::from_fn(h, w, |r, c| {
        (target.at(r, c) as f64 - warped.at(r, c) as f64).abs()
    });
    let rho = Grid::from_fn(h, w, |r, c| {
        if !visibility.at(r, c) {
            return 0.9;
        }
        let mut sum = 0.0;
        let mut n = 0.0;
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
                let cc = (c as i64 + dc).clamp(0, w as i64 - 1) as usize;
                sum += residual.at(rr, cc);
                n += 1.0;
            }
        }
        (params.rho0 + params.kappa * sum / n).clamp(RHO_MIN, 0.9)
    });
    UncertaintyMaps::new(
        rho,
        Grid::filled(h, w, params.mu0),
        Grid::filled(h, w, params.sigma0),
    )
}

/// Ablation variant: the mixture weight pinned to its floor everywhere, so
/// the Uniform arm contributes (almost) nothing.
pub fn pinned_rho_uncertainty(h: usize, w: usize, params: &UncertaintyParams) -> UncertaintyMaps {
    UncertaintyMaps::new(
        Grid::filled(h, w, RHO_MIN),
        Grid::filled(h, w, params.mu0),
        Grid::filled(h, w, params.sigma0),
    )
    .expect("constant maps within range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const SQRT_TAU: f64 = 2.5066282746310002;

    #[test]
    fn pure_uniform_on_width_two_support() {
        assert_eq!(mixture_pdf(0.3, 1.0, 0.0, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn gaussian_peak_value() {
        let v = mixture_pdf(0.8, 0.0, 0.8, 0.2).unwrap();
        assert!((v - 1.0 / (0.2 * SQRT_TAU)).abs() < 1e-9);
        assert!((v - 1.99471).abs() < 1e-5);
    }

    #[test]
    fn mixture_matches_independent_oracle() {
        // Frozen from an independent script: 0.7*N(0.5|0.9,0.25) + 0.15.
        let v = mixture_pdf(0.5, 0.3, 0.9, 0.25).unwrap();
        assert!((v - 0.46057833710247553).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_parameters_rejected() {
        assert!(mixture_pdf(0.0, -0.1, 0.0, 0.3).is_err());
        assert!(mixture_pdf(0.0, 1.1, 0.0, 0.3).is_err());
        assert!(mixture_pdf(0.0, 0.5, 1.5, 0.3).is_err());
        assert!(mixture_pdf(0.0, 0.5, 0.0, 0.0).is_err());
        assert!(mixture_pdf(0.0, 0.5, 0.0, 2.5).is_err());
        assert!(mixture_pdf(f64::NAN, 0.5, 0.0, 0.3).is_err());
    }

    #[test]
    fn gaussian_arm_extends_beyond_uniform_support() {
        let inside = mixture_pdf(1.0, 0.5, 0.9, 0.3).unwrap();
        let outside = mixture_pdf(1.0000001, 0.5, 0.9, 0.3).unwrap();
        assert!((inside - outside - 0.5 * 0.5).abs() < 1e-6);
    }

    #[test]
    fn rho_monotonicity_at_peak_and_tail() {
        // At c = mu with a tall Gaussian, density decreases with rho; far in
        // the tail the Uniform arm dominates and density increases with rho.
        let eps = 1e-6;
        let at_peak = |rho: f64| mixture_pdf(0.0, rho, 0.0, 0.1).unwrap();
        assert!(at_peak(0.5 + eps) < at_peak(0.5));
        let in_tail = |rho: f64| mixture_pdf(0.9, rho, 0.0, 0.1).unwrap();
        assert!(in_tail(0.5 + eps) > in_tail(0.5));
    }

    fn map_from(values: Vec<f64>, valid: Vec<bool>, h: usize, w: usize) -> CorrelationMap {
        CorrelationMap {
            values: Grid::from_vec(h, w, values).unwrap(),
            valid: Grid::from_vec(h, w, valid).unwrap(),
        }
    }

    fn constant_unc(h: usize, w: usize, rho: f64, mu: f64, sigma: f64) -> UncertaintyMaps {
        UncertaintyMaps::new(
            Grid::filled(h, w, rho),
            Grid::filled(h, w, mu),
            Grid::filled(h, w, sigma),
        )
        .unwrap()
    }

    #[test]
    fn likelihood_map_peak_at_mean() {
        let corr = map_from(vec![0.7; 6], vec![true; 6], 2, 3);
        let unc = constant_unc(2, 3, RHO_MIN, 0.7, 0.25);
        let l = likelihood_map(&corr, &unc).unwrap();
        let want = (1.0 - RHO_MIN) / (0.25 * SQRT_TAU) + 0.5 * RHO_MIN;
        for &v in l.density.iter() {
            assert!((v - want).abs() < 1e-9);
        }
    }

    #[test]
    fn likelihood_map_invalid_pixels_are_uniform() {
        let corr = map_from(vec![0.9; 4], vec![false; 4], 2, 2);
        let unc = constant_unc(2, 2, 0.2, 0.9, 0.3);
        let l = likelihood_map(&corr, &unc).unwrap();
        for &v in l.density.iter() {
            assert_eq!(v, 0.5);
        }
        assert!((mean_log_likelihood(&l) - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn likelihood_map_equals_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 5;
        let w = 4;
        let values: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let valid: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.8)).collect();
        let rho = Grid::from_fn(h, w, |_, _| rng.random_range(RHO_MIN..1.0));
        let mu = Grid::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0));
        let sigma = Grid::from_fn(h, w, |_, _| rng.random_range(SIGMA_MIN..SIGMA_MAX));
        let corr = map_from(values.clone(), valid.clone(), h, w);
        let unc = UncertaintyMaps::new(rho.clone(), mu.clone(), sigma.clone()).unwrap();
        let l = likelihood_map(&corr, &unc).unwrap();
        for r in 0..h {
            for c in 0..w {
                let want = if valid[r * w + c] {
                    mixture_pdf(values[r * w + c], rho.at(r, c), mu.at(r, c), sigma.at(r, c))
                        .unwrap()
                } else {
                    0.5
                };
                assert!((l.density.at(r, c) - want).abs() < 1e-12);
                assert!((l.log_density.at(r, c) - want.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_log_likelihood_examples() {
        let corr = map_from(vec![0.0; 4], vec![false; 4], 2, 2);
        let unc = constant_unc(2, 2, 0.5, 0.0, 0.3);
        let l = likelihood_map(&corr, &unc).unwrap();
        assert!((mean_log_likelihood(&l) - (-0.6931471805599453)).abs() < 1e-12);

        // Densities {0.5, 2.0}: mean log is 0.
        let map = LikelihoodMap {
            density: Grid::from_vec(1, 2, vec![0.5, 2.0]).unwrap(),
            log_density: Grid::from_vec(1, 2, vec![0.5f64.ln(), 2.0f64.ln()]).unwrap(),
            valid: Grid::filled(1, 2, true),
        };
        assert!(mean_log_likelihood(&map).abs() < 1e-12);
    }

    #[test]
    fn mean_log_likelihood_matches_summation_oracle_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logs: Vec<f64> = (0..256).map(|_| rng.random_range(-3.0..0.5)).collect();
        let map = LikelihoodMap {
            density: Grid::from_vec(16, 16, logs.iter().map(|l| l.exp()).collect()).unwrap(),
            log_density: Grid::from_vec(16, 16, logs.clone()).unwrap(),
            valid: Grid::filled(16, 16, true),
        };
        let mut oracle = 0.0;
        for &l in &logs {
            oracle += l;
        }
        oracle /= 256.0;
        assert!((mean_log_likelihood(&map) - oracle).abs() < 1e-12);

        let mut shuffled = logs.clone();
        shuffled.shuffle(&mut rng);
        let map2 = LikelihoodMap {
            density: Grid::from_vec(16, 16, shuffled.iter().map(|l| l.exp()).collect()).unwrap(),
            log_density: Grid::from_vec(16, 16, shuffled).unwrap(),
            valid: Grid::filled(16, 16, true),
        };
        assert!((mean_log_likelihood(&map) - mean_log_likelihood(&map2)).abs() < 1e-12);
    }

    #[test]
    fn default_uncertainty_zero_residual() {
        let img = Image::from_fn(8, 8, |r, c| ((r + c) % 7) as f32 / 7.0);
        let unc =
            default_uncertainty(&img, &img, &Grid::filled(8, 8, true), &Default::default())
                .unwrap();
        for &r in unc.rho().iter() {
            assert!((r - 0.1).abs() < 1e-12);
        }
        assert!(unc.mu().iter().all(|&m| m == 0.9));
        assert!(unc.sigma().iter().all(|&s| s == 0.3));
    }

    #[test]
    fn default_uncertainty_invisible_is_max_rho() {
        let img = Image::filled(4, 4, 0.5);
        let unc =
            default_uncertainty(&img, &img, &Grid::filled(4, 4, false), &Default::default())
                .unwrap();
        assert!(unc.rho().iter().all(|&r| r == 0.9));
    }

    #[test]
    fn default_uncertainty_large_residual_saturates() {
        // Constant residual of 0.5 everywhere: rho = clamp(0.1 + 2*0.5) = 0.9.
        let target = Image::filled(8, 8, 0.75);
        let warped = Image::filled(8, 8, 0.25);
        let unc = default_uncertainty(
            &target,
            &warped,
            &Grid::filled(8, 8, true),
            &Default::default(),
        )
        .unwrap();
        assert!(unc.rho().iter().all(|&r| r == 0.9));
    }

    #[test]
    fn uncertainty_maps_validate_ranges() {
        let ok = Grid::filled(2, 2, 0.5);
        assert!(UncertaintyMaps::new(Grid::filled(2, 2, 0.0), ok.clone(), ok.clone()).is_err());
        assert!(UncertaintyMaps::new(ok.clone(), Grid::filled(2, 2, 1.5), ok.clone()).is_err());
        assert!(UncertaintyMaps::new(ok.clone(), ok.clone(), Grid::filled(2, 2, 3.0)).is_err());
        assert!(UncertaintyMaps::new(ok.clone(), Grid::filled(2, 2, 0.9), ok).is_ok());
    }
}
