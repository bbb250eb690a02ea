//! Raster data model shared by every stage: spectra, scenes, annual masks and
//! detection maps, plus the two per-tile measurements everything else builds
//! on (mangrove fraction and the class pixel partition).
//!
//! Pixels are held as `f64` in memory. The on-disk format is `f32`; widening
//! happens at load time so that all statistics run in double precision.

use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel-2 L2A band count.
pub const DEFAULT_BANDS: usize = 13;

/// Default tile edge in pixels.
pub const DEFAULT_TILE: usize = 256;

/// `(row, col)` pixel coordinate.
pub type Coord = (usize, usize);

/// Row-major 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: (height, width),
                actual: (data.len(), 1),
            });
        }
        Ok(Grid { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Grid { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn coord_of(&self, index: usize) -> Coord {
        (index / self.width, index % self.width)
    }
}

impl Grid<bool> {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Row-major list of coordinates holding `true`.
    pub fn true_coords(&self) -> Vec<Coord> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| self.coord_of(i))
            .collect()
    }
}

/// Per-band reflectance vector. All entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Spectrum(Vec<f64>);

impl Spectrum {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("spectrum has no bands".into()));
        }
        if let Some(band) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteReflectance { row: 0, col: 0, band });
        }
        Ok(Spectrum(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, factor: f64) -> Spectrum {
        Spectrum(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for Spectrum {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Spectrum::new(values)
    }
}

impl From<Spectrum> for Vec<f64> {
    fn from(s: Spectrum) -> Self {
        s.0
    }
}

/// One dated multispectral acquisition over a region tile.
///
/// `valid` marks pixels that were observed and cloud-free. `footprint`, when
/// present, marks pixels inside the sensor swath regardless of cloud; it lets
/// cloud and coverage be measured separately.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub region_id: String,
    pub sensing_date: NaiveDate,
    width: usize,
    height: usize,
    bands: usize,
    /// Band-sequential, row-major within band.
    pixels: Vec<f64>,
    valid: Grid<bool>,
    footprint: Option<Grid<bool>>,
}

impl Scene {
    pub fn new(
        region_id: impl Into<String>,
        sensing_date: NaiveDate,
        width: usize,
        height: usize,
        bands: usize,
        pixels: Vec<f64>,
        valid: Grid<bool>,
    ) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(Error::EmptyRaster);
        }
        if pixels.len() != width * height * bands {
            return Err(Error::Truncated {
                expected: width * height * bands,
                found: pixels.len(),
            });
        }
        if valid.dims() != (height, width) {
            return Err(Error::DimensionMismatch {
                expected: (height, width),
                actual: valid.dims(),
            });
        }
        let plane = width * height;
        for (i, v) in pixels.iter().enumerate() {
            let p = i % plane;
            if !v.is_finite() && valid.as_slice()[p] {
                return Err(Error::NonFiniteReflectance {
                    row: p / width,
                    col: p % width,
                    band: i / plane,
                });
            }
        }
        Ok(Scene {
            region_id: region_id.into(),
            sensing_date,
            width,
            height,
            bands,
            pixels,
            valid,
            footprint: None,
        })
    }

    /// Fully valid scene.
    pub fn all_valid(
        region_id: impl Into<String>,
        sensing_date: NaiveDate,
        width: usize,
        height: usize,
        bands: usize,
        pixels: Vec<f64>,
    ) -> Result<Self> {
        let valid = Grid::filled(width, height, true);
        Scene::new(region_id, sensing_date, width, height, bands, pixels, valid)
    }

    pub fn with_footprint(mut self, footprint: Grid<bool>) -> Result<Self> {
        if footprint.dims() != self.valid.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.valid.dims(),
                actual: footprint.dims(),
            });
        }
        self.footprint = Some(footprint);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel(&self, row: usize, col: usize, band: usize) -> f64 {
        self.pixels[band * self.width * self.height + row * self.width + col]
    }

    pub fn band(&self, band: usize) -> &[f64] {
        let plane = self.width * self.height;
        &self.pixels[band * plane..(band + 1) * plane]
    }

    /// Writes the spectrum at `(row, col)` into `out`.
    pub fn spectrum_into(&self, row: usize, col: usize, out: &mut [f64]) {
        let plane = self.width * self.height;
        let offset = row * self.width + col;
        for (b, slot) in out.iter_mut().enumerate().take(self.bands) {
            *slot = self.pixels[b * plane + offset];
        }
    }

    pub fn spectrum_at(&self, row: usize, col: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.bands];
        self.spectrum_into(row, col, &mut out);
        out
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn valid(&self) -> &Grid<bool> {
        &self.valid
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        *self.valid.get(row, col)
    }

    pub fn footprint(&self) -> Option<&Grid<bool>> {
        self.footprint.as_ref()
    }

    /// Copy with every reflectance multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Scene {
        let mut out = self.clone();
        out.pixels.iter_mut().for_each(|v| *v *= factor);
        out
    }
}

/// Annual binary label raster shared by every candidate of a region.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnualMask {
    pub region_id: String,
    pub grid: Grid<bool>,
}

impl AnnualMask {
    pub fn new(region_id: impl Into<String>, grid: Grid<bool>) -> Self {
        AnnualMask {
            region_id: region_id.into(),
            grid,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }

    pub fn has_target(&self) -> bool {
        self.grid.as_slice().iter().any(|&v| v)
    }
}

/// Which response map a detection map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "mf")]
    MatchedFilter,
    #[serde(rename = "mvi")]
    Mvi,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::MatchedFilter => f.write_str("mf"),
            Method::Mvi => f.write_str("mvi"),
        }
    }
}

/// Per-pixel real response. `NaN` is the undefined sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMap {
    pub grid: Grid<f64>,
    pub method: Method,
}

impl DetectionMap {
    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        let v = *self.grid.get(row, col);
        (!v.is_nan()).then_some(v)
    }

    pub fn defined_count(&self) -> usize {
        self.grid.as_slice().iter().filter(|v| !v.is_nan()).count()
    }
}

/// Mangrove-fraction stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    StrongPositive,
    MidPositive,
    WeakPositive,
    PureNegative,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::StrongPositive,
        Category::MidPositive,
        Category::WeakPositive,
        Category::PureNegative,
    ];

    pub fn is_positive(self) -> bool {
        self != Category::PureNegative
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMeta {
    pub region_id: String,
    pub country_iso3: String,
    pub mangrove_fraction: f64,
    pub category: Category,
}

/// Share of the tile labelled mangrove, over the full tile area.
pub fn mangrove_fraction(mask: &AnnualMask) -> Result<f64> {
    if mask.grid.is_empty() {
        return Err(Error::EmptyRaster);
    }
    Ok(mask.grid.count_true() as f64 / mask.grid.len() as f64)
}

/// Splits the valid pixels into `(mangrove, background)` coordinate lists,
/// both in row-major order.
pub fn class_pixel_sets(mask: &AnnualMask, valid: &Grid<bool>) -> Result<(Vec<Coord>, Vec<Coord>)> {
    if mask.dims() != valid.dims() {
        return Err(Error::DimensionMismatch {
            expected: mask.dims(),
            actual: valid.dims(),
        });
    }
    let mut mangrove = Vec::new();
    let mut background = Vec::new();
    for (i, (&m, &v)) in mask.grid.as_slice().iter().zip(valid.as_slice()).enumerate() {
        if !v {
            continue;
        }
        let c = valid.coord_of(i);
        if m {
            mangrove.push(c);
        } else {
            background.push(c);
        }
    }
    Ok((mangrove, background))
}
