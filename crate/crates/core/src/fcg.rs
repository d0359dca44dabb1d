//! Fatigue-crack-growth path generator and rasterized crack library builder.
//!
//! A single edge crack grows across a sliced plate. Each slice draws its own
//! Gaussian tension/shear load, the crack direction follows the maximum shear
//! stress criterion on handbook edge-crack SIFs, and the Paris law converts
//! the SIF range into cycle counts. One raster frame is recorded at the
//! start and each time the tip crosses a slice boundary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{DigitalLibrary, Field2D, FieldError, Manifest, SampleSequence};

#[derive(Debug, Error)]
pub enum FcgError {
    #[error("crack length {a_mm} mm reached the validity limit {limit_mm} mm")]
    CrackTooLong { a_mm: f64, limit_mm: f64 },
    #[error("crack length must be positive, got {0} mm")]
    NonPositiveLength(f64),
    #[error("both stress intensity factors are zero")]
    ZeroSif,
    #[error("SIF range must be positive, got {0}")]
    NonPositiveRange(f64),
    #[error("cycle count must be >= 1, got {0}")]
    BadCycles(f64),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("frame {frame} outside recorded range 0..{n}")]
    FrameOutOfRange { frame: usize, n: usize },
    #[error("no valid path after {0} attempts")]
    Exhausted(usize),
    #[error(transparent)]
    Field(#[from] FieldError),
}

pub type Result<T> = std::result::Result<T, FcgError>;

/// Plate geometry, slicing and raster window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateSpec {
    pub width_mm: f64,
    pub height_mm: f64,
    pub initial_crack_mm: f64,
    pub n_segments: usize,
    pub pixel_size_mm: f64,
    /// x position of the last slice boundary; slices split
    /// `[initial_crack_mm, growth_extent_mm]` evenly.
    pub growth_extent_mm: f64,
    /// Geometric growth increment per deflection update.
    pub step_mm: f64,
    pub raster_cols: usize,
    pub raster_rows: usize,
}

impl Default for PlateSpec {
    fn default() -> Self {
        Self {
            width_mm: 10.0,
            height_mm: 20.0,
            initial_crack_mm: 1.0,
            n_segments: 7,
            pixel_size_mm: 0.075,
            growth_extent_mm: 9.0,
            step_mm: 0.05,
            raster_cols: 132,
            raster_rows: 96,
        }
    }
}

impl PlateSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FcgError::InvalidSpec(m.to_string()));
        if !(self.width_mm > 0.0 && self.height_mm > 0.0 && self.pixel_size_mm > 0.0 && self.step_mm > 0.0) {
            return bad("dimensions, pixel size and step must be positive");
        }
        if !(self.initial_crack_mm > 0.0 && self.initial_crack_mm < self.width_mm) {
            return bad("initial crack must lie inside the width");
        }
        if self.n_segments == 0 {
            return bad("need at least one segment");
        }
        if !(self.growth_extent_mm > self.initial_crack_mm) {
            return bad("growth extent must exceed the initial crack");
        }
        if self.raster_cols == 0 || self.raster_rows == 0 {
            return bad("raster must be nonempty");
        }
        Ok(())
    }

    /// Crack length beyond which the edge-crack SIF surrogate is invalid.
    pub fn max_valid_length_mm(&self) -> f64 {
        0.95 * self.width_mm
    }

    /// x coordinates of the `n_segments` slice boundaries.
    pub fn segment_boundaries(&self) -> Vec<f64> {
        let span = self.growth_extent_mm - self.initial_crack_mm;
        (1..=self.n_segments)
            .map(|k| self.initial_crack_mm + span * k as f64 / self.n_segments as f64)
            .collect()
    }
}

/// Per-slice Gaussian load distribution (MPa).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadSpec {
    pub tension_mean: f64,
    pub shear_mean: f64,
    /// Standard deviation of both loads.
    pub std: f64,
    /// Min/max load ratio within a cycle.
    pub stress_ratio: f64,
}

impl Default for LoadSpec {
    fn default() -> Self {
        Self { tension_mean: 200.0, shear_mean: 100.0, std: 50.0, stress_ratio: 0.0 }
    }
}

impl LoadSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.tension_mean > 0.0 && self.shear_mean >= 0.0 && self.std >= 0.0) {
            return Err(FcgError::InvalidSpec("load means must be positive and std >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.stress_ratio) {
            return Err(FcgError::InvalidSpec("stress ratio must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Paris-law coefficients; `da/dN` in m/cycle for `ΔK` in MPa·√m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaterialParams {
    pub c: f64,
    pub m: f64,
    pub sif_units: String,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self { c: 9.7e-12, m: 3.0, sif_units: "MPa*sqrt(m)".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SifPair {
    pub k_i: f64,
    pub k_ii: f64,
}

/// Lowest tension drawn; compressive draws are clamped up to this.
pub const MIN_TENSION_MPA: f64 = 1.0;

/// Draw `(tension, shear)` for one slice.
pub fn sample_segment_loads(spec: &LoadSpec, rng: &mut impl rand::Rng) -> (f64, f64) {
    if spec.std == 0.0 {
        return (spec.tension_mean.max(MIN_TENSION_MPA), spec.shear_mean);
    }
    let tension = Normal::new(spec.tension_mean, spec.std).expect("std > 0").sample(rng);
    let shear = Normal::new(spec.shear_mean, spec.std).expect("std > 0").sample(rng);
    (tension.max(MIN_TENSION_MPA), shear)
}

/// Finite-width edge-crack geometry factor `Y(a/W)`.
pub fn edge_crack_geometry_factor(r: f64) -> f64 {
    1.12 - 0.231 * r + 10.55 * r.powi(2) - 21.72 * r.powi(3) + 30.39 * r.powi(4)
}

/// Handbook edge-crack SIFs for projected length `a_mm`.
pub fn sif_edge_crack(a_mm: f64, plate: &PlateSpec, tension: f64, shear: f64) -> Result<SifPair> {
    if a_mm <= 0.0 {
        return Err(FcgError::NonPositiveLength(a_mm));
    }
    let limit = plate.max_valid_length_mm();
    if a_mm >= limit {
        return Err(FcgError::CrackTooLong { a_mm, limit_mm: limit });
    }
    let root = (std::f64::consts::PI * a_mm * 1e-3).sqrt();
    Ok(SifPair {
        k_i: edge_crack_geometry_factor(a_mm / plate.width_mm) * tension * root,
        k_ii: 1.12 * shear * root,
    })
}

/// Maximum-shear-stress kink angle. Positive `K_II` kinks toward negative angles.
pub fn deflection_angle(sif: SifPair) -> Result<f64> {
    let SifPair { k_i, k_ii } = sif;
    if k_i == 0.0 && k_ii == 0.0 {
        return Err(FcgError::ZeroSif);
    }
    // sqrt(K_I^4 + 8 K_I^2 K_II^2) written as |K_I| sqrt(K_I^2 + 8 K_II^2):
    // pure mode I then gives a ratio of exactly one.
    let k1sq = k_i * k_i;
    let k2sq = k_ii * k_ii;
    let num = 3.0 * k2sq + k_i.abs() * (k1sq + 8.0 * k2sq).sqrt();
    let theta = (num / (k1sq + 9.0 * k2sq)).clamp(-1.0, 1.0).acos();
    Ok(if k_ii > 0.0 { -theta } else { theta })
}

/// Paris-law growth `cycles * C * ΔK^m`.
pub fn paris_increment(delta_k: f64, cycles: f64, mat: &MaterialParams) -> Result<f64> {
    if !(delta_k > 0.0) {
        return Err(FcgError::NonPositiveRange(delta_k));
    }
    if !(cycles >= 1.0) {
        return Err(FcgError::BadCycles(cycles));
    }
    Ok(cycles * mat.c * delta_k.powf(mat.m))
}

/// Cycles needed to grow `da_m` metres at constant `ΔK`.
pub fn paris_cycles(delta_k: f64, da_m: f64, mat: &MaterialParams) -> Result<f64> {
    if !(delta_k > 0.0) {
        return Err(FcgError::NonPositiveRange(delta_k));
    }
    Ok(da_m / (mat.c * delta_k.powf(mat.m)))
}

/// Vector description of a grown crack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrackPath {
    /// Tip positions in mm, starting at the initial edge-crack tip.
    pub vertices: Vec<(f64, f64)>,
    /// Vertex index of each recorded state (initial + one per slice crossing).
    pub segment_frames: Vec<usize>,
    /// Cycles consumed by each growth increment.
    pub cycle_counts: Vec<f64>,
    /// `(tension, shear)` drawn for each slice.
    pub segment_loads: Vec<(f64, f64)>,
}

impl CrackPath {
    pub fn n_frames(&self) -> usize {
        self.segment_frames.len()
    }

    pub fn total_cycles(&self) -> f64 {
        self.cycle_counts.iter().sum()
    }

    /// Crack y at abscissa `x` (mm); the initial edge crack is flat.
    pub fn y_at(&self, x: f64) -> f64 {
        let v = &self.vertices;
        if x <= v[0].0 {
            return v[0].1;
        }
        let i = v.partition_point(|p| p.0 < x);
        if i >= v.len() {
            return v[v.len() - 1].1;
        }
        let (x0, y0) = v[i - 1];
        let (x1, y1) = v[i];
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

/// Grow one crack path. Fails with [`FcgError::CrackTooLong`] if the tip
/// leaves the SIF validity range before the last slice boundary.
pub fn grow_crack(plate: &PlateSpec, loads: &LoadSpec, mat: &MaterialParams, seed: u64) -> Result<CrackPath> {
    plate.validate()?;
    loads.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut x, mut y) = (plate.initial_crack_mm, plate.height_mm / 2.0);
    let mut path = CrackPath {
        vertices: vec![(x, y)],
        segment_frames: vec![0],
        cycle_counts: Vec::new(),
        segment_loads: Vec::with_capacity(plate.n_segments),
    };
    for boundary in plate.segment_boundaries() {
        let (tension, shear) = sample_segment_loads(loads, &mut rng);
        path.segment_loads.push((tension, shear));
        while x < boundary {
            let sif = sif_edge_crack(x, plate, tension, shear)?;
            let theta = deflection_angle(sif)?;
            let (sin, cos) = theta.sin_cos();
            let ds = plate.step_mm.min((boundary - x) / cos);
            let delta_k = (1.0 - loads.stress_ratio) * sif.k_i.hypot(sif.k_ii);
            path.cycle_counts.push(paris_cycles(delta_k, ds * 1e-3, mat)?);
            if ds * cos >= boundary - x {
                x = boundary;
            } else {
                x += ds * cos;
            }
            y += ds * sin;
            path.vertices.push((x, y));
        }
        path.segment_frames.push(path.vertices.len() - 1);
    }
    Ok(path)
}

/// Binary raster of the crack up to recorded state `frame`, plus whether
/// any part of that crack fell outside the raster band.
///
/// Column `c` covers `x ∈ [c p, (c+1) p)` and is lit when its left edge lies
/// on the crack; the lit row holds the crack's y at that left edge. The band
/// is `raster_rows` pixels centred on mid-height, row 0 at the top.
pub fn rasterize_path_checked(path: &CrackPath, frame: usize, plate: &PlateSpec) -> Result<(Field2D, bool)> {
    if frame >= path.n_frames() {
        return Err(FcgError::FrameOutOfRange { frame, n: path.n_frames() });
    }
    let (rows, cols, p) = (plate.raster_rows, plate.raster_cols, plate.pixel_size_mm);
    let tip_x = path.vertices[path.segment_frames[frame]].0;
    let mid = plate.height_mm / 2.0;
    let mut values = vec![0.0f32; rows * cols];
    let mut outside = false;
    for c in 0..cols {
        let x = c as f64 * p;
        if x >= tip_x {
            break;
        }
        let row = (rows / 2) as i64 + (-(path.y_at(x) - mid) / p).floor() as i64;
        if row < 0 || row >= rows as i64 {
            outside = true;
            continue;
        }
        values[row as usize * cols + c] = 1.0;
    }
    if cols as f64 * p < tip_x {
        outside = true;
    }
    Ok((Field2D::new(rows, cols, p, values)?, outside))
}

pub fn rasterize_path(path: &CrackPath, frame: usize, plate: &PlateSpec) -> Result<Field2D> {
    rasterize_path_checked(path, frame, plate).map(|(f, _)| f)
}

/// Everything needed to regenerate an FCG library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FcgLibrarySpec {
    pub n_samples: usize,
    pub base_seed: u64,
    pub plate: PlateSpec,
    pub loads: LoadSpec,
    pub material: MaterialParams,
    pub max_attempts: usize,
}

impl Default for FcgLibrarySpec {
    fn default() -> Self {
        Self {
            n_samples: 908,
            base_seed: 0,
            plate: PlateSpec::default(),
            loads: LoadSpec::default(),
            material: MaterialParams::default(),
            max_attempts: 64,
        }
    }
}

/// Seed of regeneration `attempt` for sample seed `seed`; attempt 0 is the seed itself.
fn attempt_seed(seed: u64, attempt: usize) -> u64 {
    seed ^ ((attempt as u64) << 40)
}

/// One library sample: frames plus the vector path as annotation.
pub fn generate_sample(spec: &FcgLibrarySpec, index: usize, events: &mut Vec<String>) -> Result<SampleSequence> {
    let seed = spec.base_seed.wrapping_add(index as u64);
    for attempt in 0..spec.max_attempts {
        let s = attempt_seed(seed, attempt);
        let path = match grow_crack(&spec.plate, &spec.loads, &spec.material, s) {
            Ok(p) => p,
            Err(FcgError::CrackTooLong { a_mm, .. }) => {
                events.push(format!("sample {index}: seed {s} discarded (crack too long at {a_mm:.3} mm), regenerated"));
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut frames = Vec::with_capacity(path.n_frames());
        let mut flagged = false;
        for t in 0..path.n_frames() {
            let (f, out) = rasterize_path_checked(&path, t, &spec.plate)?;
            flagged |= out;
            frames.push(f);
        }
        if flagged {
            events.push(format!("sample {index}: seed {s} path exits raster band (flagged)"));
        }
        let annotation = serde_json::json!({
            "seed": s,
            "band_exit": flagged,
            "path": path,
        });
        return Ok(SampleSequence::new(frames, "slice-boundary crossing")?.with_annotation(annotation));
    }
    Err(FcgError::Exhausted(spec.max_attempts))
}

pub fn build_fcg_library(spec: &FcgLibrarySpec) -> Result<DigitalLibrary> {
    if spec.n_samples == 0 {
        return Err(FcgError::InvalidSpec("n_samples must be >= 1".into()));
    }
    spec.plate.validate()?;
    spec.loads.validate()?;
    let mut events = Vec::new();
    let samples = (0..spec.n_samples)
        .map(|i| generate_sample(spec, i, &mut events))
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = Manifest::new("fatigue-crack-growth", spec.base_seed, serde_json::to_value(spec).expect("spec serializes"));
    manifest.events = events;
    Ok(DigitalLibrary::new(samples, manifest)?)
}
