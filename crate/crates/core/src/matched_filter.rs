//! Background statistics and the covariance-whitened matched filter.
//!
//! For a target spectrum `s`, background mean `μ` and covariance `Γ`, each
//! valid pixel `x` scores
//!
//! ```text
//! D(x) = sᵀ Γ⁻¹ (x − μ) / sqrt(sᵀ Γ⁻¹ s)
//! ```
//!
//! `Γ⁻¹ s` is obtained by a Cholesky solve; no explicit inverse is formed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{class_pixel_sets, AnnualMask, Coord, DetectionMap, Grid, Method, Scene, Spectrum};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchedFilterConfig {
    /// Relative ridge: `Γ + ε·(tr Γ / B)·I`.
    pub epsilon: f64,
    /// Background pixels within this Chebyshev distance of a mangrove pixel
    /// are left out of the background estimate.
    pub exclusion_radius: usize,
}

impl Default for MatchedFilterConfig {
    fn default() -> Self {
        MatchedFilterConfig {
            epsilon: DEFAULT_EPSILON,
            exclusion_radius: 0,
        }
    }
}

impl MatchedFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon {} must be finite and >= 0",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factors the row-major `n`×`n` matrix `a`.
    pub fn factor(a: &[f64], n: usize) -> Result<Self> {
        debug_assert_eq!(a.len(), n * n);
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a[i * n + j];
                for k in 0..j {
                    sum -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if !sum.is_finite() || sum <= 0.0 {
                        return Err(Error::NotPositiveDefinite);
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        Ok(Cholesky { n, lower: l })
    }

    /// Row-major `n`×`n` lower factor `L` with `A = L Lᵀ`.
    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= l[i * n + k] * y[k];
            }
            y[i] /= l[i * n + i];
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                y[i] -= l[k * n + i] * y[k];
            }
            y[i] /= l[i * n + i];
        }
        y
    }
}

/// Background mean and regularized covariance, with its factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundStats {
    pub mean: Spectrum,
    /// Row-major B×B, regularized.
    pub covariance: Vec<f64>,
    pub sample_count: usize,
    pub regularization_epsilon: f64,
    factor: Cholesky,
}

impl BackgroundStats {
    /// Builds stats from an already-regularized covariance.
    pub fn from_parts(mean: Spectrum, covariance: Vec<f64>, sample_count: usize, epsilon: f64) -> Result<Self> {
        let b = mean.len();
        if covariance.len() != b * b {
            return Err(Error::DimensionMismatch {
                expected: (b, b),
                actual: (covariance.len(), 1),
            });
        }
        let factor = Cholesky::factor(&covariance, b)?;
        Ok(BackgroundStats {
            mean,
            covariance,
            sample_count,
            regularization_epsilon: epsilon,
            factor,
        })
    }

    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.factor.solve(rhs)
    }
}

/// Mean and population covariance over `coords`, regularized by `epsilon`.
pub fn background_stats_from(scene: &Scene, coords: &[Coord], epsilon: f64) -> Result<BackgroundStats> {
    let b = scene.bands();
    let n = coords.len();
    if n < b + 1 {
        return Err(Error::InsufficientBackground {
            found: n,
            needed: b + 1,
        });
    }
    let mut buf = vec![0.0; b];
    let mut mean = vec![0.0; b];
    for &(r, c) in coords {
        scene.spectrum_into(r, c, &mut buf);
        mean.iter_mut().zip(&buf).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0; b * b];
    for &(r, c) in coords {
        scene.spectrum_into(r, c, &mut buf);
        buf.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
        for i in 0..b {
            for j in 0..=i {
                cov[i * b + j] += buf[i] * buf[j];
            }
        }
    }
    for i in 0..b {
        for j in 0..=i {
            let v = cov[i * b + j] / n as f64;
            cov[i * b + j] = v;
            cov[j * b + i] = v;
        }
    }
    let trace: f64 = (0..b).map(|i| cov[i * b + i]).sum();
    if !trace.is_finite() || trace <= 0.0 {
        return Err(Error::DegenerateBackground);
    }
    let ridge = epsilon * trace / b as f64;
    for i in 0..b {
        cov[i * b + i] += ridge;
    }
    BackgroundStats::from_parts(Spectrum::new(mean)?, cov, n, epsilon)
}

/// Square dilation with the window clipped at the tile border.
fn dilate(grid: &Grid<bool>, radius: usize) -> Grid<bool> {
    let (h, w) = grid.dims();
    Grid::from_fn(w, h, |r, c| {
        let rows = r.saturating_sub(radius)..(r + radius + 1).min(h);
        rows.into_iter().any(|rr| {
            let cols = c.saturating_sub(radius)..(c + radius + 1).min(w);
            cols.into_iter().any(|cc| *grid.get(rr, cc))
        })
    })
}

/// Background coordinates used for estimation: valid, non-mangrove, and
/// outside the optional exclusion band around the mask.
pub fn background_coords(scene: &Scene, mask: &AnnualMask, cfg: &MatchedFilterConfig) -> Result<Vec<Coord>> {
    let (_, background) = class_pixel_sets(mask, scene.valid())?;
    if cfg.exclusion_radius == 0 {
        return Ok(background);
    }
    let band = dilate(&mask.grid, cfg.exclusion_radius);
    Ok(background.into_iter().filter(|&(r, c)| !band.get(r, c)).collect())
}

pub fn background_stats(scene: &Scene, mask: &AnnualMask, cfg: &MatchedFilterConfig) -> Result<BackgroundStats> {
    let coords = background_coords(scene, mask, cfg)?;
    background_stats_from(scene, &coords, cfg.epsilon)
}

/// Matched-filter response for every valid pixel; `NaN` elsewhere.
pub fn detect(scene: &Scene, stats: &BackgroundStats, target: &Spectrum) -> Result<DetectionMap> {
    let b = scene.bands();
    if stats.bands() != b || target.len() != b {
        return Err(Error::DimensionMismatch {
            expected: (b, 1),
            actual: (target.len(), stats.bands()),
        });
    }
    let weights = stats.solve(target.as_slice());
    let energy: f64 = weights.iter().zip(target.as_slice()).map(|(w, s)| w * s).sum();
    if !energy.is_finite() || energy <= 0.0 {
        return Err(Error::DegenerateSignature);
    }
    let norm = energy.sqrt();
    let mean = stats.mean.as_slice();
    let (h, w) = scene.dims();
    let mut buf = vec![0.0; b];
    let grid = Grid::from_fn(w, h, |r, c| {
        if !scene.is_valid(r, c) {
            return f64::NAN;
        }
        scene.spectrum_into(r, c, &mut buf);
        let proj: f64 = (0..b).map(|i| weights[i] * (buf[i] - mean[i])).sum();
        proj / norm
    });
    Ok(DetectionMap {
        grid,
        method: Method::MatchedFilter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn date() -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 8, 8).unwrap()
    }

    fn random_scene(rng: &mut ChaCha8Rng, w: usize, h: usize, b: usize) -> Scene {
        let px = (0..w * h * b).map(|_| rng.random_range(0.0..1.0)).collect();
        Scene::all_valid("r", date(), w, h, b, px).unwrap()
    }

    #[test]
    fn two_pixel_background() {
        let s = Scene::all_valid("r", date(), 2, 1, 1, vec![0.0, 2.0]).unwrap();
        let stats = background_stats_from(&s, &[(0, 0), (0, 1)], DEFAULT_EPSILON).unwrap();
        assert_eq!(stats.mean.as_slice(), &[1.0]);
        assert!((stats.covariance[0] - (1.0 + 1e-6)).abs() < 1e-15);
        assert_eq!(stats.sample_count, 2);
    }

    #[test]
    fn default_ridge_variance_on_uniform_background() {
        // Independent uniform bands: well conditioned, so the ridge costs
        // at most 1e-4 of the unit variance.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let s = random_scene(&mut rng, 20, 20, 4);
        let coords: Vec<Coord> = (0..20).flat_map(|r| (0..20).map(move |c| (r, c))).collect();
        let stats = background_stats_from(&s, &coords, DEFAULT_EPSILON).unwrap();
        let target = Spectrum::new(vec![0.9, 0.1, 0.5, 0.7]).unwrap();
        let d = detect(&s, &stats, &target).unwrap();
        let vals = d.grid.as_slice();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((1.0 - 1e-4..=1.0).contains(&var), "{var}");
    }

    #[test]
    fn identical_background_is_degenerate() {
        let s = Scene::all_valid("r", date(), 4, 1, 2, vec![0.3; 8]).unwrap();
        let coords: Vec<Coord> = (0..4).map(|c| (0, c)).collect();
        assert!(matches!(
            background_stats_from(&s, &coords, DEFAULT_EPSILON),
            Err(Error::DegenerateBackground)
        ));
    }

    #[test]
    fn insufficient_background() {
        let s = Scene::all_valid("r", date(), 3, 1, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]).unwrap();
        let coords: Vec<Coord> = (0..3).map(|c| (0, c)).collect();
        assert!(matches!(
            background_stats_from(&s, &coords, DEFAULT_EPSILON),
            Err(Error::InsufficientBackground { found: 3, needed: 4 })
        ));
    }

    #[test]
    fn matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_scene(&mut rng, 10, 10, 2);
        let coords: Vec<Coord> = (0..100).map(|i| (i / 10, i % 10)).collect();
        let stats = background_stats_from(&s, &coords, 0.0).unwrap();
        let xs: Vec<[f64; 2]> = coords
            .iter()
            .map(|&(r, c)| [s.pixel(r, c, 0), s.pixel(r, c, 1)])
            .collect();
        let m0 = xs.iter().map(|x| x[0]).sum::<f64>() / 100.0;
        let m1 = xs.iter().map(|x| x[1]).sum::<f64>() / 100.0;
        let c00 = xs.iter().map(|x| (x[0] - m0).powi(2)).sum::<f64>() / 100.0;
        let c01 = xs.iter().map(|x| (x[0] - m0) * (x[1] - m1)).sum::<f64>() / 100.0;
        let c11 = xs.iter().map(|x| (x[1] - m1).powi(2)).sum::<f64>() / 100.0;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
        assert!(rel(stats.mean.as_slice()[0], m0) < 1e-12);
        assert!(rel(stats.mean.as_slice()[1], m1) < 1e-12);
        assert!(rel(stats.covariance[0], c00) < 1e-12);
        assert!(rel(stats.covariance[1], c01) < 1e-12);
        assert!(rel(stats.covariance[2], c01) < 1e-12);
        assert!(rel(stats.covariance[3], c11) < 1e-12);
    }

    #[test]
    fn identity_covariance_projection() {
        let stats =
            BackgroundStats::from_parts(Spectrum::new(vec![0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0, 1.0], 3, 0.0)
                .unwrap();
        let s = Scene::all_valid("r", date(), 2, 1, 2, vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let d = detect(&s, &stats, &Spectrum::new(vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(d.value(0, 0), Some(2.0));
        assert_eq!(d.value(0, 1), Some(0.0));
    }

    #[test]
    fn invalid_pixels_are_undefined() {
        let valid = Grid::new(2, 1, vec![true, false]).unwrap();
        let s = Scene::new("r", date(), 2, 1, 1, vec![1.0, 5.0], valid).unwrap();
        let stats = BackgroundStats::from_parts(Spectrum::new(vec![0.0]).unwrap(), vec![1.0], 2, 0.0).unwrap();
        let d = detect(&s, &stats, &Spectrum::new(vec![1.0]).unwrap()).unwrap();
        assert_eq!(d.value(0, 1), None);
        assert_eq!(d.defined_count(), 1);
    }

    #[test]
    fn zero_signature_is_degenerate() {
        let stats = BackgroundStats::from_parts(Spectrum::new(vec![0.0]).unwrap(), vec![1.0], 2, 0.0).unwrap();
        let s = Scene::all_valid("r", date(), 1, 1, 1, vec![1.0]).unwrap();
        assert!(matches!(
            detect(&s, &stats, &Spectrum::new(vec![0.0]).unwrap()),
            Err(Error::DegenerateSignature)
        ));
    }

    #[test]
    fn rank_deficient_without_ridge_fails() {
        // Band 1 duplicates band 0.
        let px = vec![0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4];
        let s = Scene::all_valid("r", date(), 4, 1, 2, px).unwrap();
        let coords: Vec<Coord> = (0..4).map(|c| (0, c)).collect();
        assert!(matches!(
            background_stats_from(&s, &coords, 0.0),
            Err(Error::NotPositiveDefinite)
        ));
        assert!(background_stats_from(&s, &coords, DEFAULT_EPSILON).is_ok());
    }

    #[test]
    fn detect_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = random_scene(&mut rng, 12, 9, 3);
        let coords: Vec<Coord> = (0..60).map(|i| (i / 12, i % 12)).collect();
        let stats = background_stats_from(&s, &coords, DEFAULT_EPSILON).unwrap();
        let target = Spectrum::new(vec![0.7, 0.2, 0.4]).unwrap();
        let d = detect(&s, &stats, &target).unwrap();

        let gamma = DMatrix::from_row_slice(3, 3, &stats.covariance);
        let inv = gamma.try_inverse().unwrap();
        let sv = DVector::from_column_slice(target.as_slice());
        let mu = DVector::from_column_slice(stats.mean.as_slice());
        let norm = (sv.transpose() * &inv * &sv)[0].sqrt();
        for r in 0..9 {
            for c in 0..12 {
                let x = DVector::from_vec(s.spectrum_at(r, c));
                let expected = (sv.transpose() * &inv * (x - &mu))[0] / norm;
                assert!((d.value(r, c).unwrap() - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn exclusion_band_removes_neighbours() {
        let mask = AnnualMask::new("r", Grid::from_fn(5, 5, |r, c| r == 2 && c == 2));
        let s = Scene::all_valid("r", date(), 5, 5, 1, (0..25).map(|i| i as f64).collect()).unwrap();
        let cfg = MatchedFilterConfig {
            exclusion_radius: 1,
            ..Default::default()
        };
        assert_eq!(background_coords(&s, &mask, &cfg).unwrap().len(), 16);
        assert_eq!(
            background_coords(&s, &mask, &MatchedFilterConfig::default())
                .unwrap()
                .len(),
            24
        );
    }

    #[test]
    fn cholesky_solves() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let f = Cholesky::factor(&a, 3).unwrap();
        let x = f.solve(&[1.0, 2.0, 3.0]);
        for i in 0..3 {
            let row: f64 = (0..3).map(|j| a[i * 3 + j] * x[j]).sum();
            assert!((row - [1.0, 2.0, 3.0][i]).abs() < 1e-12);
        }
        assert!(Cholesky::factor(&[1.0, 2.0, 2.0, 1.0], 2).is_err());
    }
}
