//! Mangrove Vegetation Index response map, the baseline scoring route.
//!
//! `MVI = (NIR − Green) / (SWIR1 − Green)`. Pixels whose denominator is
//! within a relative guard of zero are undefined and drop out of the class
//! statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{DetectionMap, Grid, Method, Scene};

/// Relative singular-denominator guard.
pub const MVI_GUARD: f64 = 1e-12;

/// Stack positions of the bands MVI reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandRoles {
    pub green_index: usize,
    pub nir_index: usize,
    pub swir1_index: usize,
}

impl Default for BandRoles {
    fn default() -> Self {
        BandRoles {
            green_index: 2,
            nir_index: 7,
            swir1_index: 10,
        }
    }
}

impl BandRoles {
    pub fn validate(&self, bands: usize) -> Result<()> {
        let BandRoles {
            green_index: g,
            nir_index: n,
            swir1_index: s,
        } = *self;
        if g == n || g == s || n == s {
            return Err(Error::Config(format!("band roles must be distinct, got {g}/{n}/{s}")));
        }
        if g.max(n).max(s) >= bands {
            return Err(Error::Config(format!(
                "band roles {g}/{n}/{s} out of range for {bands} bands"
            )));
        }
        Ok(())
    }
}

/// MVI for one pixel, `None` when the denominator is singular.
pub fn mvi(green: f64, nir: f64, swir1: f64) -> Option<f64> {
    let denom = swir1 - green;
    let scale = swir1.abs().max(green.abs());
    if denom.abs().partial_cmp(&(MVI_GUARD * scale)) != Some(std::cmp::Ordering::Greater) {
        return None;
    }
    Some((nir - green) / denom)
}

pub fn mvi_map(scene: &Scene, roles: &BandRoles) -> Result<DetectionMap> {
    roles.validate(scene.bands())?;
    let green = scene.band(roles.green_index);
    let nir = scene.band(roles.nir_index);
    let swir = scene.band(roles.swir1_index);
    let valid = scene.valid().as_slice();
    let data = (0..valid.len())
        .map(|i| {
            if !valid[i] {
                return f64::NAN;
            }
            mvi(green[i], nir[i], swir[i]).unwrap_or(f64::NAN)
        })
        .collect();
    Ok(DetectionMap {
        grid: Grid::new(scene.width(), scene.height(), data)?,
        method: Method::Mvi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    const ROLES: BandRoles = BandRoles {
        green_index: 0,
        nir_index: 1,
        swir1_index: 2,
    };

    fn scene(pixels: &[[f64; 3]], valid: Vec<bool>) -> Scene {
        let n = pixels.len();
        let mut px = Vec::new();
        for b in 0..3 {
            px.extend(pixels.iter().map(|p| p[b]));
        }
        let date = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        Scene::new("r", date, n, 1, 3, px, Grid::new(n, 1, valid).unwrap()).unwrap()
    }

    #[test]
    fn direct_evaluation() {
        let v = mvi(0.1, 0.5, 0.3).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        assert_eq!(mvi(0.2, 0.2, 0.4), Some(0.0));
        assert_eq!(mvi(0.3, 0.5, 0.3), None);
    }

    #[test]
    fn map_marks_undefined_and_invalid() {
        let s = scene(
            &[[0.1, 0.5, 0.3], [0.3, 0.5, 0.3], [0.1, 0.5, 0.3]],
            vec![true, true, false],
        );
        let m = mvi_map(&s, &ROLES).unwrap();
        assert_eq!(m.method, Method::Mvi);
        assert!((m.value(0, 0).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(m.value(0, 1), None);
        assert_eq!(m.value(0, 2), None);
    }

    #[test]
    fn role_validation() {
        assert!(BandRoles::default().validate(13).is_ok());
        assert!(BandRoles::default().validate(5).is_err());
        let dup = BandRoles {
            green_index: 1,
            nir_index: 1,
            swir1_index: 2,
        };
        assert!(dup.validate(3).is_err());
    }

    proptest! {
        #[test]
        fn scale_invariant(g in 0.01f64..1.0, n in 0.01f64..1.0, s in 0.01f64..1.0, c in prop_oneof![Just(1e-3), Just(1e3), 0.1f64..10.0]) {
            match (mvi(g, n, s), mvi(c * g, c * n, c * s)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0)),
                (None, None) => {}
                other => prop_assert!(false, "definedness changed: {:?}", other),
            }
        }

        #[test]
        fn defined_subset_of_valid(bits in proptest::collection::vec(any::<bool>(), 1..20)) {
            let px: Vec<[f64; 3]> = (0..bits.len()).map(|i| [0.1, 0.2 + i as f64 * 0.01, 0.3]).collect();
            let m = mvi_map(&scene(&px, bits.clone()), &ROLES).unwrap();
            for (i, &v) in bits.iter().enumerate() {
                prop_assert!(v || m.value(0, i).is_none());
            }
        }
    }
}
