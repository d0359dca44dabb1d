//! Gray-Scott reaction-diffusion solver and the Turing-pattern library builder.
//!
//! Forward-Euler time stepping on a periodic grid with the 5-point Laplacian.
//! All arithmetic is `f32` with a fixed summation order, so a step is
//! bit-reproducible and commutes exactly with periodic translations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{DigitalLibrary, Field2D, FieldError, Manifest, SampleSequence};

#[derive(Debug, Error)]
pub enum TuringError {
    #[error("grid {0}x{1} is too small (need at least {2}x{2})")]
    GridTooSmall(usize, usize, usize),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("explicit Euler unstable: dt {dt} exceeds bound {bound}")]
    Unstable { dt: f64, bound: f64 },
    #[error("state shape {0:?} does not match parameter grid {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("non-finite concentration after step {0}")]
    NonFinite(u64),
    #[error("need at least {min} frames per sequence, got {got}")]
    TooFewFrames { min: usize, got: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
}

pub type Result<T> = std::result::Result<T, TuringError>;

/// Gray-Scott coefficients plus discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrayScottParams {
    pub diffusion_u: f64,
    pub diffusion_v: f64,
    pub feed: f64,
    pub kill: f64,
    pub dt: f64,
    pub height: usize,
    pub width: usize,
    /// Physical size stamped on the produced frames.
    pub pixel_size_mm: f64,
    /// Dimensionless distance between neighbouring cells in the stencil.
    pub grid_spacing: f64,
}

impl Default for GrayScottParams {
    fn default() -> Self {
        Self::standard()
    }
}

impl GrayScottParams {
    pub fn new(
        diffusion_u: f64,
        diffusion_v: f64,
        feed: f64,
        kill: f64,
        dt: f64,
        grid: (usize, usize),
        grid_spacing: f64,
    ) -> Result<Self> {
        let p = Self {
            diffusion_u,
            diffusion_v,
            feed,
            kill,
            dt,
            height: grid.0,
            width: grid.1,
            pixel_size_mm: 1.0,
            grid_spacing,
        };
        p.validate()?;
        Ok(p)
    }

    /// `D_u = 0.12, D_v = 0.08, f = 0.02, k = 0.05`, `dt = 1`, stencil spacing 2,
    /// 200x200 grid of 1 mm pixels.
    pub fn standard() -> Self {
        Self::new(0.12, 0.08, 0.02, 0.05, 1.0, (200, 200), 2.0).expect("defaults are valid")
    }

    pub fn with_grid(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.diffusion_u, self.diffusion_v, self.feed, self.kill, self.dt, self.pixel_size_mm, self.grid_spacing];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(TuringError::InvalidParams("non-finite coefficient".into()));
        }
        if self.diffusion_u < 0.0 || self.diffusion_v < 0.0 {
            return Err(TuringError::InvalidParams("diffusivities must be >= 0".into()));
        }
        if self.feed < 0.0 || self.kill < 0.0 {
            return Err(TuringError::InvalidParams("feed and kill rates must be >= 0".into()));
        }
        if self.dt <= 0.0 || self.pixel_size_mm <= 0.0 || self.grid_spacing <= 0.0 {
            return Err(TuringError::InvalidParams("dt, pixel size and spacing must be > 0".into()));
        }
        if self.height < 3 || self.width < 3 {
            return Err(TuringError::GridTooSmall(self.height, self.width, 3));
        }
        let dmax = self.diffusion_u.max(self.diffusion_v);
        if dmax > 0.0 {
            let bound = self.grid_spacing.powi(2) / (4.0 * dmax);
            if self.dt > bound {
                return Err(TuringError::Unstable { dt: self.dt, bound });
            }
        }
        Ok(())
    }
}

/// Concentrations of both species plus elapsed solver time.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayScottState {
    pub u: Field2D,
    pub v: Field2D,
    pub t: f64,
}

impl GrayScottState {
    pub fn new(u: Field2D, v: Field2D) -> Result<Self> {
        if !u.same_geometry(&v) {
            return Err(FieldError::ShapeMismatch(u.shape(), v.shape()).into());
        }
        Ok(Self { u, v, t: 0.0 })
    }

    /// Periodic shift by `(dy, dx)` cells.
    pub fn translated(&self, dy: usize, dx: usize) -> Self {
        let shift = |f: &Field2D| {
            let (h, w) = f.shape();
            Field2D::from_fn(h, w, f.pixel_size_mm(), |r, c| f.get((r + h - dy % h) % h, (c + w - dx % w) % w))
                .expect("shifted field is finite")
        };
        Self { u: shift(&self.u), v: shift(&self.v), t: self.t }
    }
}

/// Periodic 5-point Laplacian of `src` into `dst`, scaled by `1/spacing^2`.
///
/// Summation order is fixed: `up + down + left + right - 4*center`.
fn laplacian_into(src: &[f32], dst: &mut [f32], h: usize, w: usize, inv_h2: f32) {
    for r in 0..h {
        let up = if r == 0 { h - 1 } else { r - 1 } * w;
        let down = if r + 1 == h { 0 } else { r + 1 } * w;
        let row = r * w;
        for c in 0..w {
            let left = if c == 0 { w - 1 } else { c - 1 };
            let right = if c + 1 == w { 0 } else { c + 1 };
            let s = src[up + c] + src[down + c] + src[row + left] + src[row + right] - 4.0 * src[row + c];
            dst[row + c] = s * inv_h2;
        }
    }
}

/// Laplacian using the field's pixel size as the stencil spacing.
pub fn laplacian(field: &Field2D) -> Result<Field2D> {
    laplacian_with_spacing(field, field.pixel_size_mm())
}

pub fn laplacian_with_spacing(field: &Field2D, spacing: f64) -> Result<Field2D> {
    let (h, w) = field.shape();
    if h < 3 || w < 3 {
        return Err(TuringError::GridTooSmall(h, w, 3));
    }
    let mut out = vec![0.0; h * w];
    let inv = (1.0 / spacing.powi(2)) as f32;
    laplacian_into(field.values(), &mut out, h, w, inv);
    Ok(Field2D::new(h, w, field.pixel_size_mm(), out)?)
}

/// Diffusion tails decay into subnormals, which are orders of magnitude
/// slower on most FPUs; they are flushed to zero.
#[inline]
fn flush_subnormal(x: f32) -> f32 {
    if x.abs() < f32::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

/// In-place stepper with reusable scratch buffers; the library builder and
/// [`gs_step`] share this arithmetic.
#[derive(Debug, Clone)]
pub struct GrayScottSolver {
    params: GrayScottParams,
    u: Vec<f32>,
    v: Vec<f32>,
    lap_u: Vec<f32>,
    lap_v: Vec<f32>,
    steps: u64,
}

impl GrayScottSolver {
    pub fn new(state: &GrayScottState, params: GrayScottParams) -> Result<Self> {
        params.validate()?;
        if state.u.shape() != (params.height, params.width) || !state.u.same_geometry(&state.v) {
            return Err(TuringError::ShapeMismatch(state.u.shape(), (params.height, params.width)));
        }
        let n = params.height * params.width;
        Ok(Self {
            params,
            u: state.u.values().to_vec(),
            v: state.v.values().to_vec(),
            lap_u: vec![0.0; n],
            lap_v: vec![0.0; n],
            steps: 0,
        })
    }

    pub fn step(&mut self) -> Result<()> {
        let p = &self.params;
        let (h, w) = (p.height, p.width);
        let inv = (1.0 / p.grid_spacing.powi(2)) as f32;
        laplacian_into(&self.u, &mut self.lap_u, h, w, inv);
        laplacian_into(&self.v, &mut self.lap_v, h, w, inv);
        let (du, dv) = (p.diffusion_u as f32, p.diffusion_v as f32);
        let (f, fk, dt) = (p.feed as f32, (p.feed + p.kill) as f32, p.dt as f32);
        let mut finite = true;
        for i in 0..h * w {
            let u = self.u[i];
            let v = self.v[i];
            let uvv = u * v * v;
            let nu = u + dt * (du * self.lap_u[i] - uvv + f * (1.0 - u));
            let nv = v + dt * (dv * self.lap_v[i] + uvv - fk * v);
            finite &= nu.is_finite() & nv.is_finite();
            self.u[i] = flush_subnormal(nu);
            self.v[i] = flush_subnormal(nv);
        }
        self.steps += 1;
        if !finite {
            return Err(TuringError::NonFinite(self.steps));
        }
        Ok(())
    }

    pub fn run(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            self.step()?;
        }
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn u_field(&self) -> Field2D {
        Field2D::new(self.params.height, self.params.width, self.params.pixel_size_mm, self.u.clone())
            .expect("finite after successful steps")
    }

    pub fn state(&self, t0: f64) -> GrayScottState {
        GrayScottState {
            u: self.u_field(),
            v: Field2D::new(self.params.height, self.params.width, self.params.pixel_size_mm, self.v.clone())
                .expect("finite after successful steps"),
            t: t0 + self.steps as f64 * self.params.dt,
        }
    }
}

/// One forward-Euler step of both species.
pub fn gs_step(state: &GrayScottState, params: &GrayScottParams) -> Result<GrayScottState> {
    let mut solver = GrayScottSolver::new(state, *params)?;
    solver.step()?;
    Ok(solver.state(state.t))
}

/// Background `(u, v) = (1, 0)` with 3-8 seeded square patches (side 10-20
/// px) set to `(0.5, 0.25)` plus uniform noise in `[-0.02, 0.02]`.
pub fn random_initial_condition(height: usize, width: usize, pixel_size_mm: f64, seed: u64) -> Result<GrayScottState> {
    if height < 16 || width < 16 {
        return Err(TuringError::GridTooSmall(height, width, 16));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = vec![1.0f32; height * width];
    let mut v = vec![0.0f32; height * width];
    let n_patches = rng.random_range(3..=8);
    for _ in 0..n_patches {
        let side = rng.random_range(10..=20usize).min(height).min(width);
        let r0 = rng.random_range(0..=height - side);
        let c0 = rng.random_range(0..=width - side);
        for r in r0..r0 + side {
            for c in c0..c0 + side {
                let i = r * width + c;
                u[i] = 0.5 + rng.random_range(-0.02f32..=0.02);
                v[i] = 0.25 + rng.random_range(-0.02f32..=0.02);
            }
        }
    }
    GrayScottState::new(Field2D::new(height, width, pixel_size_mm, u)?, Field2D::new(height, width, pixel_size_mm, v)?)
}

/// Sampling schedule for the library builder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuringLibrarySpec {
    pub n_sequences: usize,
    pub frames_per_sequence: usize,
    pub burn_in_steps: u64,
    pub record_stride: u64,
    pub base_seed: u64,
}

impl Default for TuringLibrarySpec {
    fn default() -> Self {
        Self { n_sequences: 15, frames_per_sequence: 68, burn_in_steps: 2000, record_stride: 100, base_seed: 0 }
    }
}

pub const MIN_TURING_FRAMES: usize = 21;

/// Simulate one sequence: random IC, burn-in, then one `u` frame every `record_stride` steps.
pub fn simulate_sequence(spec: &TuringLibrarySpec, params: &GrayScottParams, seed: u64) -> Result<SampleSequence> {
    let ic = random_initial_condition(params.height, params.width, params.pixel_size_mm, seed)?;
    let mut solver = GrayScottSolver::new(&ic, *params)?;
    solver.run(spec.burn_in_steps)?;
    let mut frames = Vec::with_capacity(spec.frames_per_sequence);
    frames.push(solver.u_field());
    while frames.len() < spec.frames_per_sequence {
        solver.run(spec.record_stride)?;
        frames.push(solver.u_field());
    }
    Ok(SampleSequence::new(frames, format!("{} solver steps (dt = {})", spec.record_stride, params.dt))?)
}

pub fn build_turing_library(spec: &TuringLibrarySpec, params: &GrayScottParams) -> Result<DigitalLibrary> {
    if spec.n_sequences == 0 {
        return Err(TuringError::InvalidParams("n_sequences must be >= 1".into()));
    }
    if spec.frames_per_sequence < MIN_TURING_FRAMES {
        return Err(TuringError::TooFewFrames { min: MIN_TURING_FRAMES, got: spec.frames_per_sequence });
    }
    if spec.record_stride == 0 {
        return Err(TuringError::InvalidParams("record_stride must be >= 1".into()));
    }
    params.validate()?;
    let samples = (0..spec.n_sequences)
        .map(|i| simulate_sequence(spec, params, spec.base_seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let record = serde_json::json!({
        "gray_scott": params,
        "schedule": spec,
        "boundary": "periodic",
        "imaged_species": "u",
    });
    Ok(DigitalLibrary::new(samples, Manifest::new("gray-scott", spec.base_seed, record))?)
}
