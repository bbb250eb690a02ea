//! C ABI over the curation library.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Every fallible call returns a
//! [`MangoStatus`]; on failure [`mango_last_error`] describes the cause for
//! the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use chrono::NaiveDate;
use mango_curate::matched_filter::{background_stats, detect, MatchedFilterConfig};
use mango_curate::pipeline::{run_pipeline, PipelineConfig};
use mango_curate::ranking::{class_stats, fdr};
use mango_curate::raster::{mangrove_fraction, AnnualMask, DetectionMap, Grid, Scene};
use mango_curate::signature::{reference_pixels, target_spectrum, SignatureConfig};
use mango_curate::spectral_index::{mvi_map, BandRoles};
use mango_curate::{ingest, Error};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MangoStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Format = 5,
    Numerical = 6,
    NoTarget = 7,
    Config = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Opaque scene handle.
pub struct MangoScene(Scene);
/// Opaque annual mask handle.
pub struct MangoMask(AnnualMask);
/// Opaque response map handle.
pub struct MangoDetectionMap(DetectionMap);

/// Class statistics of a response map.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MangoClassStats {
    pub mu_m: f64,
    pub mu_b: f64,
    pub var_m: f64,
    pub var_b: f64,
    pub n_m: usize,
    pub n_b: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(MangoStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => MangoStatus::Io,
            Error::BadMagic(_)
            | Error::UnsupportedDtype(_)
            | Error::UnsupportedLayout(_)
            | Error::Truncated { .. }
            | Error::Manifest { .. }
            | Error::DuplicateRecord { .. }
            | Error::Json(_) => MangoStatus::Format,
            Error::NoTargetClass | Error::SignatureUnobservable => MangoStatus::NoTarget,
            Error::InsufficientBackground { .. }
            | Error::DegenerateBackground
            | Error::NotPositiveDefinite
            | Error::DegenerateSignature => MangoStatus::Numerical,
            Error::Config(_) | Error::EvenElement(_) => MangoStatus::Config,
            _ => MangoStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MangoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MangoStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MangoStatus::Panic
        }
    }
}

fn null(name: &str) -> Fail {
    Fail(MangoStatus::NullArgument, format!("{name} is null"))
}

unsafe fn as_ref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MangoStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn checked_len(parts: &[usize]) -> Result<usize, Fail> {
    parts
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| Fail(MangoStatus::InvalidArgument, "dimensions overflow".into()))
}

fn bool_grid(width: usize, height: usize, data: &[u8]) -> Result<Grid<bool>, Fail> {
    Ok(Grid::new(width, height, data.iter().map(|&v| v != 0).collect())?)
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mango_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mango_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a scene from band-sequential reflectances (`bands` planes of
/// `height`×`width`, row-major). `valid` holds one byte per pixel, nonzero
/// meaning observed; null means every pixel is valid. `date` is
/// `YYYY-MM-DD`.
///
/// # Safety
/// Pointers must be valid for the lengths implied by the dimensions.
#[no_mangle]
pub unsafe extern "C" fn mango_scene_new(
    region_id: *const c_char,
    date: *const c_char,
    width: usize,
    height: usize,
    bands: usize,
    pixels: *const f64,
    valid: *const u8,
    out: *mut *mut MangoScene,
) -> MangoStatus {
    guard(|| {
        let region = str_arg(region_id, "region_id")?;
        let date = parse_date(str_arg(date, "date")?)?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let plane = checked_len(&[width, height])?;
        let n = checked_len(&[plane, bands])?;
        let px = std::slice::from_raw_parts(pixels, n).to_vec();
        let valid = if valid.is_null() {
            Grid::filled(width, height, true)
        } else {
            bool_grid(width, height, std::slice::from_raw_parts(valid, plane))?
        };
        put(
            out,
            MangoScene(Scene::new(region, date, width, height, bands, px, valid)?),
        )
    })
}

fn parse_date(s: &str) -> Result<NaiveDate, Fail> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| Fail(MangoStatus::InvalidArgument, format!("date {s:?}: {e}")))
}

/// Reads an MSR1 image and optional validity file (`validity_path` may be
/// null).
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mango_scene_read(
    image_path: *const c_char,
    validity_path: *const c_char,
    region_id: *const c_char,
    date: *const c_char,
    out: *mut *mut MangoScene,
) -> MangoStatus {
    guard(|| {
        let image = str_arg(image_path, "image_path")?;
        let validity = opt_str_arg(validity_path, "validity_path")?;
        let region = str_arg(region_id, "region_id")?;
        let date = parse_date(str_arg(date, "date")?)?;
        let scene = ingest::read_scene(Path::new(image), validity.map(Path::new), region, date)?;
        put(out, MangoScene(scene))
    })
}

/// # Safety
/// `scene` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn mango_scene_free(scene: *mut MangoScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// # Safety
/// Out pointers may be null; non-null ones must be writable.
#[no_mangle]
pub unsafe extern "C" fn mango_scene_dims(
    scene: *const MangoScene,
    width: *mut usize,
    height: *mut usize,
    bands: *mut usize,
) -> MangoStatus {
    guard(|| {
        let s = &as_ref(scene, "scene")?.0;
        for (p, v) in [(width, s.width()), (height, s.height()), (bands, s.bands())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Builds a mask from one byte per pixel, nonzero meaning mangrove.
///
/// # Safety
/// `data` must hold `width * height` bytes.
#[no_mangle]
pub unsafe extern "C" fn mango_mask_new(
    region_id: *const c_char,
    width: usize,
    height: usize,
    data: *const u8,
    out: *mut *mut MangoMask,
) -> MangoStatus {
    guard(|| {
        let region = str_arg(region_id, "region_id")?;
        if data.is_null() {
            return Err(null("data"));
        }
        let n = checked_len(&[width, height])?;
        let grid = bool_grid(width, height, std::slice::from_raw_parts(data, n))?;
        put(out, MangoMask(AnnualMask::new(region, grid)))
    })
}

/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mango_mask_read(
    path: *const c_char,
    region_id: *const c_char,
    out: *mut *mut MangoMask,
) -> MangoStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let region = str_arg(region_id, "region_id")?;
        put(out, MangoMask(ingest::read_mask(Path::new(path), region)?))
    })
}

/// # Safety
/// `mask` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn mango_mask_free(mask: *mut MangoMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Share of mask pixels labelled mangrove.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mango_mask_fraction(mask: *const MangoMask, out: *mut f64) -> MangoStatus {
    guard(|| {
        let f = mangrove_fraction(&as_ref(mask, "mask")?.0)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = f;
        Ok(())
    })
}

/// Matched-filter response of `scene` with the target spectrum taken from
/// `k` reference pixels of the eroded mask. `seed_namespace` keys the
/// reference sampling; `epsilon` is the relative covariance ridge.
///
/// # Safety
/// Handles must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mango_detect_matched_filter(
    scene: *const MangoScene,
    mask: *const MangoMask,
    k: usize,
    element: usize,
    epsilon: f64,
    seed_namespace: u64,
    out: *mut *mut MangoDetectionMap,
) -> MangoStatus {
    guard(|| {
        let scene = &as_ref(scene, "scene")?.0;
        let mask = &as_ref(mask, "mask")?.0;
        let sig = SignatureConfig {
            k_pixels: k,
            structuring_element: element,
            rng_seed_namespace: seed_namespace,
        };
        sig.validate()?;
        let mf = MatchedFilterConfig {
            epsilon,
            ..Default::default()
        };
        mf.validate()?;
        let refs = reference_pixels(mask, &sig)?;
        let target = target_spectrum(scene, &refs)?;
        let stats = background_stats(scene, mask, &mf)?;
        put(out, MangoDetectionMap(detect(scene, &stats, &target)?))
    })
}

/// MVI response with the given band positions.
///
/// # Safety
/// `scene` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mango_detect_mvi(
    scene: *const MangoScene,
    green: usize,
    nir: usize,
    swir1: usize,
    out: *mut *mut MangoDetectionMap,
) -> MangoStatus {
    guard(|| {
        let scene = &as_ref(scene, "scene")?.0;
        let roles = BandRoles {
            green_index: green,
            nir_index: nir,
            swir1_index: swir1,
        };
        put(out, MangoDetectionMap(mvi_map(scene, &roles)?))
    })
}

/// # Safety
/// `map` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn mango_map_free(map: *mut MangoDetectionMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Copies the map row-major into `buf` (NaN marks undefined pixels).
/// Returns `BufferTooSmall` when `len` is below width × height.
///
/// # Safety
/// `buf` must be writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn mango_map_copy(map: *const MangoDetectionMap, buf: *mut f64, len: usize) -> MangoStatus {
    guard(|| {
        let data = as_ref(map, "map")?.0.grid.as_slice();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < data.len() {
            return Err(Fail(
                MangoStatus::BufferTooSmall,
                format!("need {} values, got {len}", data.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// Class statistics and Fisher ratio of a map against a mask. `j` receives
/// `+inf` when both classes are constant but distinct.
///
/// # Safety
/// Handles must be valid; out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn mango_map_score(
    map: *const MangoDetectionMap,
    mask: *const MangoMask,
    stats: *mut MangoClassStats,
    j: *mut f64,
) -> MangoStatus {
    guard(|| {
        let map = &as_ref(map, "map")?.0;
        let mask = &as_ref(mask, "mask")?.0;
        if map.grid.dims() != mask.dims() {
            return Err(Error::DimensionMismatch {
                expected: mask.dims(),
                actual: map.grid.dims(),
            }
            .into());
        }
        let (h, w) = mask.dims();
        let all = Grid::filled(w, h, true);
        let (m, b) = mango_curate::raster::class_pixel_sets(mask, &all)?;
        let s = class_stats(map, &m, &b)?;
        if !stats.is_null() {
            *stats = MangoClassStats {
                mu_m: s.mu_m,
                mu_b: s.mu_b,
                var_m: s.var_m,
                var_b: s.var_b,
                n_m: s.n_m,
                n_b: s.n_b,
            };
        }
        if !j.is_null() {
            *j = fdr(&s);
        }
        Ok(())
    })
}

/// Runs the whole pipeline. `masks_dir` and `config_json` may be null;
/// `workers` of 0 uses the default.
///
/// # Safety
/// String arguments must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mango_run_pipeline(
    manifest: *const c_char,
    masks_dir: *const c_char,
    out_dir: *const c_char,
    config_json: *const c_char,
    workers: usize,
) -> MangoStatus {
    guard(|| {
        let manifest = str_arg(manifest, "manifest")?;
        let masks = opt_str_arg(masks_dir, "masks_dir")?;
        let out_dir = str_arg(out_dir, "out_dir")?;
        let mut cfg: PipelineConfig = match opt_str_arg(config_json, "config_json")? {
            Some(text) => serde_json::from_str(text).map_err(|e| Fail(MangoStatus::Config, e.to_string()))?,
            None => PipelineConfig::default(),
        };
        if workers > 0 {
            cfg.workers = Some(workers);
        }
        run_pipeline(
            Path::new(manifest),
            masks.map(Path::new),
            Path::new(out_dir),
            &cfg,
            None,
        )?;
        Ok(())
    })
}
