//! Stationary Gaussian random fields on pixel grids, sampling designs, and
//! lookup of field values at sampling locations.
//!
//! Fields are simulated by circulant embedding of the covariance on a padded
//! torus. One complex FFT yields two independent realizations (the real and
//! imaginary parts), which is how field pairs are produced.

use std::sync::Arc;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ShiftVector, TorusShift, Window};

/// Truncated spectral mass above which a warning is logged.
pub const TRUNCATION_WARN: f64 = 1e-3;
/// Truncated spectral mass above which simulation is refused.
pub const TRUNCATION_LIMIT: f64 = 1e-2;
/// Default raster resolution on the unit square.
pub const DEFAULT_GRID: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceFamily {
    Exponential,
}

/// Isotropic covariance `C(r) = σ² exp(−r/s)`, set to zero beyond `range`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceModel {
    pub family: CovarianceFamily,
    pub variance: f64,
    pub scale: f64,
    pub range: f64,
}

impl CovarianceModel {
    pub fn exponential(variance: f64, scale: f64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(Error::param("variance", format!("{variance} is negative")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::param("scale", format!("{scale} is not positive")));
        }
        Ok(CovarianceModel {
            family: CovarianceFamily::Exponential,
            variance,
            scale,
            range: f64::INFINITY,
        })
    }

    /// Same model with the covariance cut to zero beyond `multiple · scale`.
    pub fn truncated(self, multiple: f64) -> Self {
        CovarianceModel {
            range: multiple * self.scale,
            ..self
        }
    }

    pub fn cov(&self, r: f64) -> f64 {
        if r > self.range {
            return 0.0;
        }
        match self.family {
            CovarianceFamily::Exponential => self.variance * (-r / self.scale).exp(),
        }
    }
}

/// Grid resolution of a raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub nx: usize,
    pub ny: usize,
}

impl GridDims {
    pub fn square(n: usize) -> Self {
        GridDims { nx: n, ny: n }
    }
}

/// Real values on a regular grid covering a window; row-major with row 0 at
/// the lowest `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRaster {
    pub window: Window,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
    pub model: Option<String>,
}

impl FieldRaster {
    pub fn new(window: Window, nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::param("grid", format!("{nx}x{ny} is smaller than 2x2")));
        }
        if values.len() != nx * ny {
            return Err(Error::param(
                "values",
                format!("expected {} values, got {}", nx * ny, values.len()),
            ));
        }
        Ok(FieldRaster {
            window,
            nx,
            ny,
            values,
            model: None,
        })
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (
            self.window.width() / self.nx as f64,
            self.window.height() / self.ny as f64,
        )
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        let (dx, dy) = self.cell_size();
        [
            self.window.x_min + (ix as f64 + 0.5) * dx,
            self.window.y_min + (iy as f64 + 0.5) * dy,
        ]
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    /// Index of the cell containing `p`, `None` outside the window.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        if !self.window.contains(p) {
            return None;
        }
        let (dx, dy) = self.cell_size();
        let ix = (((p[0] - self.window.x_min) / dx) as usize).min(self.nx - 1);
        let iy = (((p[1] - self.window.y_min) / dy) as usize).min(self.ny - 1);
        Some((ix, iy))
    }

    /// Nearest-cell value at `p`.
    pub fn value_at(&self, p: [f64; 2]) -> Option<f64> {
        self.cell_of(p).map(|(ix, iy)| self.get(ix, iy))
    }
}

impl TorusShift for FieldRaster {
    /// Rolls the raster by the shift rounded to whole cells.
    fn torus_shift(&self, v: ShiftVector, w: &Window) -> Result<Self> {
        if self.window != *w {
            return Err(Error::UnsupportedGeometry(
                "torus shift requires the raster's own rectangular window".into(),
            ));
        }
        let (dx, dy) = self.cell_size();
        let sx = ((v.dx / dx).round() as i64).rem_euclid(self.nx as i64) as usize;
        let sy = ((v.dy / dy).round() as i64).rem_euclid(self.ny as i64) as usize;
        let mut values = vec![0.0; self.values.len()];
        for iy in 0..self.ny {
            let ty = (iy + sy) % self.ny;
            for ix in 0..self.nx {
                let tx = (ix + sx) % self.nx;
                values[ty * self.nx + tx] = self.values[iy * self.nx + ix];
            }
        }
        Ok(FieldRaster {
            values,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Binomial,
    UserSupplied,
}

/// Sampling locations at which the first field is observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDesign {
    pub window: Window,
    pub locations: Vec<[f64; 2]>,
    pub kind: DesignKind,
}

impl SampleDesign {
    pub fn new(window: Window, locations: Vec<[f64; 2]>, kind: DesignKind) -> Result<Self> {
        if locations.len() < 2 {
            return Err(Error::param("design", "at least two sampling locations are required"));
        }
        if let Some(i) = locations.iter().position(|p| !window.contains(*p)) {
            return Err(Error::param("design", format!("location {i} lies outside the window")));
        }
        Ok(SampleDesign {
            window,
            locations,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

/// Values of both fields read off at the sampling locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkedSample {
    pub locations: Vec<[f64; 2]>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

impl MarkedSample {
    pub fn new(locations: Vec<[f64; 2]>, phi: Vec<f64>, psi: Vec<f64>) -> Result<Self> {
        if phi.len() != locations.len() || psi.len() != locations.len() {
            return Err(Error::param("sample", "value vectors must match the location count"));
        }
        Ok(MarkedSample {
            locations,
            phi,
            psi,
        })
    }
}

/// `n` i.i.d. uniform sampling locations in `w`.
pub fn draw_binomial_design<R: Rng + ?Sized>(n: usize, w: &Window, rng: &mut R) -> Result<SampleDesign> {
    if n < 2 {
        return Err(Error::param("n", format!("{n} < 2 sampling locations")));
    }
    let locations = (0..n)
        .map(|_| {
            [
                w.x_min + rng.random::<f64>() * w.width(),
                w.y_min + rng.random::<f64>() * w.height(),
            ]
        })
        .collect();
    Ok(SampleDesign {
        window: *w,
        locations,
        kind: DesignKind::Binomial,
    })
}

/// Nearest-cell values of `raster` at every design location.
pub fn read_field(raster: &FieldRaster, design: &SampleDesign) -> Result<Vec<f64>> {
    read_at(raster, &design.locations)
}

pub fn read_at(raster: &FieldRaster, locations: &[[f64; 2]]) -> Result<Vec<f64>> {
    locations
        .iter()
        .enumerate()
        .map(|(index, &p)| {
            raster.value_at(p).ok_or(Error::Lookup {
                index,
                x: p[0],
                y: p[1],
            })
        })
        .collect()
}

/// Reusable simulator for one covariance model on one grid.
///
/// Building it costs one FFT on the embedding torus; each draw costs one
/// more and produces two independent fields.
pub struct GrfSimulator {
    window: Window,
    dims: GridDims,
    model: CovarianceModel,
    kind: SimKind,
}

enum SimKind {
    /// Correlation below 1% at one cell: independent normals per cell.
    WhiteNoise,
    Circulant {
        mx: usize,
        my: usize,
        sqrt_eig: Vec<f64>,
        fft_x: Arc<dyn Fft<f64>>,
        fft_y: Arc<dyn Fft<f64>>,
        truncated_mass: f64,
    },
}

impl std::fmt::Debug for GrfSimulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GrfSimulator")
            .field("window", &self.window)
            .field("dims", &self.dims)
            .field("model", &self.model)
            .field("truncated_mass", &self.truncated_mass())
            .finish()
    }
}

impl GrfSimulator {
    pub fn new(model: CovarianceModel, window: Window, dims: GridDims) -> Result<Self> {
        if dims.nx < 2 || dims.ny < 2 {
            return Err(Error::param("grid", "grid must be at least 2x2"));
        }
        let dx = window.width() / dims.nx as f64;
        let dy = window.height() / dims.ny as f64;
        if model.scale <= 2.0 * dx.max(dy) || model.variance == 0.0 {
            return Ok(GrfSimulator {
                window,
                dims,
                model,
                kind: SimKind::WhiteNoise,
            });
        }
        let mut best: Option<SimKind> = None;
        for padding in [2usize, 3, 4] {
            let kind = Self::embed(&model, dims, dx, dy, padding);
            let mass = match &kind {
                SimKind::Circulant { truncated_mass, .. } => *truncated_mass,
                SimKind::WhiteNoise => 0.0,
            };
            let better = match &best {
                Some(SimKind::Circulant { truncated_mass, .. }) => mass < *truncated_mass,
                _ => true,
            };
            if better {
                best = Some(kind);
            }
            if mass <= TRUNCATION_WARN {
                break;
            }
        }
        let kind = best.expect("at least one embedding was tried");
        if let SimKind::Circulant { truncated_mass, .. } = &kind {
            if *truncated_mass > TRUNCATION_LIMIT {
                return Err(Error::SimulationQuality {
                    mass: *truncated_mass,
                    limit: TRUNCATION_LIMIT,
                });
            }
            if *truncated_mass > TRUNCATION_WARN {
                warn!("circulant embedding truncated {truncated_mass:.2e} of the spectral mass");
            }
        }
        Ok(GrfSimulator {
            window,
            dims,
            model,
            kind,
        })
    }

    fn embed(model: &CovarianceModel, dims: GridDims, dx: f64, dy: f64, padding: usize) -> SimKind {
        let (mx, my) = (padding * dims.nx, padding * dims.ny);
        let mut planner = FftPlanner::new();
        let fft_x = planner.plan_fft_forward(mx);
        let fft_y = planner.plan_fft_forward(my);
        let mut base = vec![Complex64::new(0.0, 0.0); mx * my];
        for j in 0..my {
            let hy = j.min(my - j) as f64 * dy;
            for i in 0..mx {
                let hx = i.min(mx - i) as f64 * dx;
                base[j * mx + i] = Complex64::new(model.cov(hx.hypot(hy)), 0.0);
            }
        }
        fft2(&mut base, mx, my, &*fft_x, &*fft_y);
        let (mut pos, mut neg) = (0.0, 0.0);
        let scale = 1.0 / (mx * my) as f64;
        let sqrt_eig = base
            .iter()
            .map(|z| {
                let l = z.re;
                if l >= 0.0 {
                    pos += l;
                    (l * scale).sqrt()
                } else {
                    neg -= l;
                    0.0
                }
            })
            .collect();
        SimKind::Circulant {
            mx,
            my,
            sqrt_eig,
            fft_x,
            fft_y,
            truncated_mass: neg / pos,
        }
    }

    pub fn truncated_mass(&self) -> f64 {
        match &self.kind {
            SimKind::WhiteNoise => 0.0,
            SimKind::Circulant { truncated_mass, .. } => *truncated_mass,
        }
    }

    pub fn model(&self) -> &CovarianceModel {
        &self.model
    }

    fn descriptor(&self) -> String {
        format!(
            "exponential(variance={}, scale={}) on {}x{}",
            self.model.variance, self.model.scale, self.dims.nx, self.dims.ny
        )
    }

    /// Two independent zero-mean realizations.
    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (FieldRaster, FieldRaster) {
        let GridDims { nx, ny } = self.dims;
        let (a, b) = match &self.kind {
            SimKind::WhiteNoise => {
                let sd = self.model.variance.sqrt();
                let mut draw = || -> Vec<f64> {
                    (0..nx * ny)
                        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                };
                let a = draw();
                (a, draw())
            }
            SimKind::Circulant {
                mx,
                my,
                sqrt_eig,
                fft_x,
                fft_y,
                ..
            } => {
                let mut buf: Vec<Complex64> = sqrt_eig
                    .iter()
                    .map(|&s| {
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        Complex64::new(s * re, s * im)
                    })
                    .collect();
                fft2(&mut buf, *mx, *my, &**fft_x, &**fft_y);
                let mut a = Vec::with_capacity(nx * ny);
                let mut b = Vec::with_capacity(nx * ny);
                for j in 0..ny {
                    for z in &buf[j * mx..j * mx + nx] {
                        a.push(z.re);
                        b.push(z.im);
                    }
                }
                (a, b)
            }
        };
        let desc = self.descriptor();
        let mk = |values| FieldRaster {
            window: self.window,
            nx,
            ny,
            values,
            model: Some(desc.clone()),
        };
        (mk(a), mk(b))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> FieldRaster {
        self.sample_pair(rng).0
    }
}

/// In-place unnormalized 2-D forward FFT of a row-major `mx × my` array.
fn fft2(data: &mut [Complex64], mx: usize, my: usize, fft_x: &dyn Fft<f64>, fft_y: &dyn Fft<f64>) {
    fft_x.process(data);
    let mut t = vec![Complex64::new(0.0, 0.0); mx * my];
    for j in 0..my {
        for i in 0..mx {
            t[i * my + j] = data[j * mx + i];
        }
    }
    fft_y.process(&mut t);
    for i in 0..mx {
        for j in 0..my {
            data[j * mx + i] = t[i * my + j];
        }
    }
}

/// One zero-mean Gaussian field with covariance `model` on `grid`.
pub fn simulate_grf<R: Rng + ?Sized>(
    model: CovarianceModel,
    w: &Window,
    grid: GridDims,
    rng: &mut R,
) -> Result<FieldRaster> {
    Ok(GrfSimulator::new(model, *w, grid)?.sample(rng))
}

/// `(Z₁, Z₁ + σZ₂)` for independent unit-variance fields with scale `s`.
pub fn simulate_power_pair<R: Rng + ?Sized>(
    scale: f64,
    sigma: f64,
    w: &Window,
    grid: GridDims,
    rng: &mut R,
) -> Result<(FieldRaster, FieldRaster)> {
    let sim = GrfSimulator::new(CovarianceModel::exponential(1.0, scale)?, *w, grid)?;
    power_pair_from(&sim, sigma, rng)
}

pub fn power_pair_from<R: Rng + ?Sized>(
    sim: &GrfSimulator,
    sigma: f64,
    rng: &mut R,
) -> Result<(FieldRaster, FieldRaster)> {
    if !(sigma > 0.0) {
        return Err(Error::param("sigma", format!("{sigma} is not positive")));
    }
    let (z1, z2) = sim.sample_pair(rng);
    let mut psi = z1.clone();
    for (p, z) in psi.values.iter_mut().zip(&z2.values) {
        *p += sigma * z;
    }
    Ok((z1, psi))
}
