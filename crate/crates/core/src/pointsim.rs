//! Point-process simulators: Poisson, log-Gaussian Cox, Strauss (hard core
//! included), random labelling, jittered copies and parent–offspring
//! cluster models.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussfield::{CovarianceModel, FieldRaster, GridDims, GrfSimulator};
use crate::geometry::{draw_shift_disk, Window};
use crate::pattern::PointPattern;

/// Default number of Metropolis–Hastings steps for Strauss sampling.
pub const DEFAULT_MCMC_STEPS: usize = 200_000;

fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    // rand_distr's Poisson is exact for every positive mean
    Poisson::new(mean).map(|d| d.sample(rng) as usize).unwrap_or(0)
}

fn uniform_in<R: Rng + ?Sized>(w: &Window, rng: &mut R) -> [f64; 2] {
    [
        w.x_min + rng.random::<f64>() * w.width(),
        w.y_min + rng.random::<f64>() * w.height(),
    ]
}

/// Homogeneous Poisson process with the given intensity.
pub fn sim_poisson<R: Rng + ?Sized>(intensity: f64, w: &Window, rng: &mut R) -> Result<PointPattern> {
    if !(intensity > 0.0 && intensity.is_finite()) {
        return Err(Error::param("intensity", format!("{intensity} is not positive")));
    }
    let n = poisson_count(intensity * w.area(), rng);
    let points = (0..n).map(|_| uniform_in(w, rng)).collect();
    Ok(PointPattern {
        window: *w,
        points,
        labels: None,
    })
}

/// Log-Gaussian Cox process driven by an exponential-covariance field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LgcpParams {
    /// Mean of the log-intensity field.
    pub mu: f64,
    /// Variance of the log-intensity field.
    pub variance: f64,
    /// Correlation scale of the log-intensity field.
    pub scale: f64,
}

impl LgcpParams {
    pub fn new(mu: f64, variance: f64, scale: f64) -> Result<Self> {
        let p = LgcpParams { mu, variance, scale };
        p.covariance()?;
        if !p.intensity().is_finite() {
            return Err(Error::param("mu", "intensity exp(mu + variance/2) overflows"));
        }
        Ok(p)
    }

    pub fn covariance(&self) -> Result<CovarianceModel> {
        CovarianceModel::exponential(self.variance, self.scale)
    }

    /// `λ = exp(μ + σ²/2)`.
    pub fn intensity(&self) -> f64 {
        (self.mu + 0.5 * self.variance).exp()
    }

    /// Pair-correlation function `g(r) = exp(σ² e^{−r/s})`.
    pub fn pcf(&self, r: f64) -> f64 {
        (self.variance * (-r / self.scale).exp()).exp()
    }
}

/// LGCP sampler holding a reusable field simulator.
#[derive(Debug)]
pub struct LgcpSimulator {
    params: LgcpParams,
    field: GrfSimulator,
}

impl LgcpSimulator {
    pub fn new(params: LgcpParams, w: &Window, grid: GridDims) -> Result<Self> {
        let field = GrfSimulator::new(params.covariance()?, *w, grid)?;
        Ok(LgcpSimulator { params, field })
    }

    pub fn params(&self) -> &LgcpParams {
        &self.params
    }

    /// Cox points given one realization of the log-intensity field.
    pub fn points_given<R: Rng + ?Sized>(&self, z: &FieldRaster, rng: &mut R) -> PointPattern {
        let (dx, dy) = z.cell_size();
        let cell_area = dx * dy;
        let mut points = Vec::new();
        for iy in 0..z.ny {
            for ix in 0..z.nx {
                let mean = (self.params.mu + z.get(ix, iy)).exp() * cell_area;
                let k = poisson_count(mean, rng);
                for _ in 0..k {
                    points.push([
                        z.window.x_min + (ix as f64 + rng.random::<f64>()) * dx,
                        z.window.y_min + (iy as f64 + rng.random::<f64>()) * dy,
                    ]);
                }
            }
        }
        PointPattern {
            window: z.window,
            points,
            labels: None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PointPattern {
        let z = self.field.sample(rng);
        self.points_given(&z, rng)
    }

    /// Two independent LGCPs (independent driving fields).
    pub fn sample_independent_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (PointPattern, PointPattern) {
        let (z1, z2) = self.field.sample_pair(rng);
        let a = self.points_given(&z1, rng);
        (a, self.points_given(&z2, rng))
    }

    /// Two conditionally independent Cox processes sharing one driving field.
    pub fn sample_shared_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (PointPattern, PointPattern) {
        let z = self.field.sample(rng);
        let a = self.points_given(&z, rng);
        (a, self.points_given(&z, rng))
    }
}

pub fn sim_lgcp<R: Rng + ?Sized>(
    params: LgcpParams,
    w: &Window,
    grid: GridDims,
    rng: &mut R,
) -> Result<PointPattern> {
    Ok(LgcpSimulator::new(params, w, grid)?.sample(rng))
}

pub fn sim_lgcp_pair_shared<R: Rng + ?Sized>(
    params: LgcpParams,
    w: &Window,
    grid: GridDims,
    rng: &mut R,
) -> Result<(PointPattern, PointPattern)> {
    Ok(LgcpSimulator::new(params, w, grid)?.sample_shared_pair(rng))
}

/// Strauss process parameters. `gamma = 0` is a hard-core process and
/// `gamma = 1` is Poisson with intensity `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StraussParams {
    pub beta: f64,
    pub gamma: f64,
    pub radius: f64,
    pub mcmc_steps: usize,
}

impl StraussParams {
    pub fn new(beta: f64, gamma: f64, radius: f64) -> Self {
        StraussParams {
            beta,
            gamma,
            radius,
            mcmc_steps: DEFAULT_MCMC_STEPS,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::param("beta", format!("{} is not positive", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::param(
                "gamma",
                format!("{} is outside [0, 1]; the density is not integrable", self.gamma),
            ));
        }
        if !(self.radius > 0.0) {
            return Err(Error::param("radius", "interaction radius must be positive"));
        }
        Ok(())
    }
}

/// Point configuration with a cell index for fixed-radius neighbour counts.
struct IndexedConfig {
    window: Window,
    radius: f64,
    ncx: usize,
    ncy: usize,
    cells: Vec<Vec<u32>>,
    points: Vec<[f64; 2]>,
    cell_of: Vec<usize>,
}

impl IndexedConfig {
    fn new(window: Window, radius: f64) -> Self {
        let ncx = ((window.width() / radius).floor() as usize).clamp(1, 1024);
        let ncy = ((window.height() / radius).floor() as usize).clamp(1, 1024);
        IndexedConfig {
            window,
            radius,
            ncx,
            ncy,
            cells: vec![Vec::new(); ncx * ncy],
            points: Vec::new(),
            cell_of: Vec::new(),
        }
    }

    fn cell_coords(&self, p: [f64; 2]) -> (usize, usize) {
        let cx = (((p[0] - self.window.x_min) / self.window.width() * self.ncx as f64) as usize)
            .min(self.ncx - 1);
        let cy = (((p[1] - self.window.y_min) / self.window.height() * self.ncy as f64) as usize)
            .min(self.ncy - 1);
        (cx, cy)
    }

    fn count_close(&self, p: [f64; 2], skip: Option<usize>) -> usize {
        let (cx, cy) = self.cell_coords(p);
        let r2 = self.radius * self.radius;
        let mut n = 0;
        for y in cy.saturating_sub(1)..=(cy + 1).min(self.ncy - 1) {
            for x in cx.saturating_sub(1)..=(cx + 1).min(self.ncx - 1) {
                for &k in &self.cells[y * self.ncx + x] {
                    if Some(k as usize) == skip {
                        continue;
                    }
                    let q = self.points[k as usize];
                    let (ddx, ddy) = (q[0] - p[0], q[1] - p[1]);
                    if ddx * ddx + ddy * ddy <= r2 {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    fn insert(&mut self, p: [f64; 2]) {
        let (cx, cy) = self.cell_coords(p);
        let c = cy * self.ncx + cx;
        self.cells[c].push(self.points.len() as u32);
        self.points.push(p);
        self.cell_of.push(c);
    }

    fn remove(&mut self, k: usize) {
        let c = self.cell_of[k];
        let slot = self.cells[c].iter().position(|&i| i as usize == k).expect("indexed point");
        self.cells[c].swap_remove(slot);
        let last = self.points.len() - 1;
        if k != last {
            let lc = self.cell_of[last];
            let slot = self.cells[lc]
                .iter()
                .position(|&i| i as usize == last)
                .expect("indexed point");
            self.cells[lc][slot] = k as u32;
        }
        self.points.swap_remove(k);
        self.cell_of.swap_remove(k);
    }

    fn relocate(&mut self, k: usize, p: [f64; 2]) {
        let c_old = self.cell_of[k];
        let (cx, cy) = self.cell_coords(p);
        let c_new = cy * self.ncx + cx;
        if c_old != c_new {
            let slot = self.cells[c_old].iter().position(|&i| i as usize == k).expect("indexed point");
            self.cells[c_old].swap_remove(slot);
            self.cells[c_new].push(k as u32);
            self.cell_of[k] = c_new;
        }
        self.points[k] = p;
    }
}

/// Approximate Strauss draw by birth–death–move Metropolis–Hastings from the
/// empty configuration, with equal birth, death and move probabilities.
pub fn sim_strauss<R: Rng + ?Sized>(params: StraussParams, w: &Window, rng: &mut R) -> Result<PointPattern> {
    params.validate()?;
    let StraussParams {
        beta, gamma, radius, ..
    } = params;
    let area = w.area();
    let mut cfg = IndexedConfig::new(*w, radius);
    // γ^t, with 0^0 = 1
    let weight = |t: usize| if t == 0 { 1.0 } else { gamma.powi(t as i32) };
    for _ in 0..params.mcmc_steps {
        let u: f64 = rng.random();
        let n = cfg.points.len();
        if u < 1.0 / 3.0 {
            let p = uniform_in(w, rng);
            let ratio = beta * weight(cfg.count_close(p, None)) * area / (n + 1) as f64;
            if rng.random::<f64>() < ratio {
                cfg.insert(p);
            }
        } else if u < 2.0 / 3.0 {
            if n == 0 {
                continue;
            }
            let k = rng.random_range(0..n);
            let t = cfg.count_close(cfg.points[k], Some(k));
            let ratio = n as f64 / (beta * weight(t) * area);
            if rng.random::<f64>() < ratio {
                cfg.remove(k);
            }
        } else {
            if n == 0 {
                continue;
            }
            let k = rng.random_range(0..n);
            let p = uniform_in(w, rng);
            let t_old = cfg.count_close(cfg.points[k], Some(k));
            let t_new = cfg.count_close(p, Some(k));
            let ratio = if t_new <= t_old {
                1.0
            } else {
                weight(t_new - t_old)
            };
            if rng.random::<f64>() < ratio {
                cfg.relocate(k, p);
            }
        }
    }
    Ok(PointPattern {
        window: *w,
        points: cfg.points,
        labels: None,
    })
}

/// Independent random labelling: each point goes to the first output with
/// probability `p`.
pub fn random_label_split<R: Rng + ?Sized>(
    pattern: &PointPattern,
    p: f64,
    rng: &mut R,
) -> Result<(PointPattern, PointPattern)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::param("p", format!("{p} is outside (0, 1)")));
    }
    let mut a = PointPattern::empty(pattern.window);
    let mut b = PointPattern::empty(pattern.window);
    for &q in &pattern.points {
        if rng.random::<f64>() < p {
            a.points.push(q);
        } else {
            b.points.push(q);
        }
    }
    Ok((a, b))
}

/// Displaces every point by an independent uniform-on-disk vector and wraps
/// the result back into the window.
pub fn jitter_copy<R: Rng + ?Sized>(pattern: &PointPattern, radius: f64, rng: &mut R) -> Result<PointPattern> {
    let w = pattern.window;
    let points = pattern
        .points
        .iter()
        .map(|&q| Ok(w.wrap(draw_shift_disk(rng, radius)?.apply(q))))
        .collect::<Result<_>>()?;
    Ok(PointPattern {
        window: w,
        points,
        labels: None,
    })
}

/// Parent–offspring model with hard-core parents and binary labels
/// inherited from the parent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub parent_hardcore: f64,
    pub parent_beta: f64,
    pub offspring_radius: f64,
    pub mean_offspring: f64,
}

impl ClusterParams {
    /// Parent activity giving each labelled component an offspring intensity
    /// close to 150 on the unit square with hard-core distance 0.05 and five
    /// offspring per parent (calibrated by simulation).
    pub const CALIBRATED_PARENT_BETA: f64 = 102.0;

    fn validate(&self) -> Result<()> {
        if !(self.parent_hardcore > 0.0 && self.offspring_radius > 0.0) {
            return Err(Error::param("cluster", "radii must be positive"));
        }
        if !(self.mean_offspring > 0.0 && self.parent_beta > 0.0) {
            return Err(Error::param("cluster", "activity and mean offspring must be positive"));
        }
        Ok(())
    }
}

pub fn sim_cluster_hardcore<R: Rng + ?Sized>(
    params: ClusterParams,
    w: &Window,
    rng: &mut R,
) -> Result<(PointPattern, PointPattern)> {
    params.validate()?;
    let parents = sim_strauss(
        StraussParams::new(params.parent_beta, 0.0, params.parent_hardcore),
        w,
        rng,
    )?;
    let mut a = PointPattern::empty(*w);
    let mut b = PointPattern::empty(*w);
    for &parent in &parents.points {
        let first = rng.random::<f64>() < 0.5;
        let k = poisson_count(params.mean_offspring, rng);
        for _ in 0..k {
            let q = w.wrap(draw_shift_disk(rng, params.offspring_radius)?.apply(parent));
            if first {
                a.points.push(q);
            } else {
                b.points.push(q);
            }
        }
    }
    Ok((a, b))
}

/// Expected count of a Poisson process in a disk, used by tests and
/// diagnostics.
pub fn poisson_disk_mean(intensity: f64, radius: f64) -> f64 {
    intensity * PI * radius * radius
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derived_rng, rng_from_seed};

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn poisson_counts_are_equidispersed() {
        let w = Window::unit();
        let counts: Vec<f64> = (0..1000)
            .map(|i| sim_poisson(150.0, &w, &mut derived_rng(1, &[i])).unwrap().len() as f64)
            .collect();
        let (m, v) = mean_var(&counts);
        let se = (150.0f64 / 1000.0).sqrt();
        assert!((m - 150.0).abs() < 3.0 * se, "{m}");
        // var of the sample variance of a Poisson(150) ≈ 2·150²/n
        assert!((v - m).abs() < 3.0 * (2.0 * 150.0f64.powi(2) / 1000.0).sqrt(), "{v}");
        let tiny = (0..100)
            .filter(|&i| sim_poisson(0.01, &w, &mut derived_rng(2, &[i])).unwrap().is_empty())
            .count();
        assert!(tiny > 90);
        assert!(sim_poisson(0.0, &w, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn lgcp_mean_intensity() {
        let w = Window::unit();
        let p = LgcpParams::new(4.5, 1.0, 0.1).unwrap();
        let sim = LgcpSimulator::new(p, &w, GridDims::square(128)).unwrap();
        let counts: Vec<f64> = (0..300)
            .map(|i| sim.sample(&mut derived_rng(3, &[i])).len() as f64)
            .collect();
        let (m, v) = mean_var(&counts);
        let se = (v / counts.len() as f64).sqrt();
        assert!((m - 5f64.exp()).abs() < 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn lgcp_zero_variance_is_poisson() {
        let w = Window::unit();
        let p = LgcpParams::new(5.0, 0.0, 0.1).unwrap();
        let sim = LgcpSimulator::new(p, &w, GridDims::square(64)).unwrap();
        let counts: Vec<f64> = (0..500)
            .map(|i| sim.sample(&mut derived_rng(4, &[i])).len() as f64)
            .collect();
        let (m, v) = mean_var(&counts);
        let lam = 5f64.exp();
        assert!((m - lam).abs() < 3.0 * (lam / 500.0).sqrt());
        assert!((v / m - 1.0).abs() < 0.2);
    }

    #[test]
    fn shared_lgcp_counts_correlate() {
        let w = Window::unit();
        let p = LgcpParams::new(4.5, 1.0, 0.3).unwrap();
        let sim = LgcpSimulator::new(p, &w, GridDims::square(64)).unwrap();
        let pairs: Vec<(f64, f64)> = (0..200)
            .map(|i| {
                let (a, b) = sim.sample_shared_pair(&mut derived_rng(5, &[i]));
                (a.len() as f64, b.len() as f64)
            })
            .collect();
        let (ma, _) = mean_var(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let (mb, _) = mean_var(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        let cov: f64 = pairs.iter().map(|(a, b)| (a - ma) * (b - mb)).sum::<f64>() / 199.0;
        assert!(cov > 0.0);
    }

    #[test]
    fn strauss_gamma_one_is_poisson() {
        let w = Window::unit();
        let mut params = StraussParams::new(100.0, 1.0, 0.05);
        params.mcmc_steps = 20_000;
        let counts: Vec<f64> = (0..200)
            .map(|i| sim_strauss(params, &w, &mut derived_rng(6, &[i])).unwrap().len() as f64)
            .collect();
        let (m, _) = mean_var(&counts);
        assert!((m - 100.0).abs() < 3.0 * (100.0f64 / 200.0).sqrt(), "{m}");
    }

    #[test]
    fn hard_core_is_respected() {
        let w = Window::unit();
        let pat = sim_strauss(StraussParams::new(300.0, 0.0, 0.05), &w, &mut rng_from_seed(7)).unwrap();
        assert!(pat.len() > 50);
        for (i, p) in pat.points.iter().enumerate() {
            for q in &pat.points[i + 1..] {
                assert!((p[0] - q[0]).hypot(p[1] - q[1]) > 0.05);
            }
        }
        let bad = StraussParams::new(100.0, 1.5, 0.05);
        assert!(sim_strauss(bad, &w, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn label_split_and_jitter() {
        let w = Window::unit();
        let pat = sim_poisson(400.0, &w, &mut rng_from_seed(8)).unwrap();
        let (a, b) = random_label_split(&pat, 0.5, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a.len() + b.len(), pat.len());
        let sd = (pat.len() as f64 * 0.25).sqrt();
        assert!((a.len() as f64 - pat.len() as f64 / 2.0).abs() < 3.0 * sd);
        let mut all: Vec<[f64; 2]> = a.points.iter().chain(&b.points).copied().collect();
        let mut orig = pat.points.clone();
        all.sort_by(|p, q| p.partial_cmp(q).unwrap());
        orig.sort_by(|p, q| p.partial_cmp(q).unwrap());
        assert_eq!(all, orig);
        assert!(random_label_split(&pat, 1.0, &mut rng_from_seed(0)).is_err());

        let j = jitter_copy(&pat, 0.1, &mut rng_from_seed(10)).unwrap();
        assert_eq!(j.len(), pat.len());
        for (p, q) in pat.points.iter().zip(&j.points) {
            let dx = (p[0] - q[0]).abs().min(1.0 - (p[0] - q[0]).abs());
            let dy = (p[1] - q[1]).abs().min(1.0 - (p[1] - q[1]).abs());
            assert!(dx.hypot(dy) <= 0.1 + 1e-12);
            assert!(w.contains(*q));
        }
        let still = jitter_copy(&pat, 1e-12, &mut rng_from_seed(11)).unwrap();
        for (p, q) in pat.points.iter().zip(&still.points) {
            assert!((p[0] - q[0]).abs() < 1e-9 || (p[0] - q[0]).abs() > 1.0 - 1e-9);
        }
    }

    #[test]
    fn cluster_offspring_stay_near_parents() {
        let w = Window::unit();
        let params = ClusterParams {
            parent_hardcore: 0.05,
            parent_beta: ClusterParams::CALIBRATED_PARENT_BETA,
            offspring_radius: 0.04,
            mean_offspring: 5.0,
        };
        let mut totals = (0.0, 0.0);
        for i in 0..400 {
            let (a, b) = sim_cluster_hardcore(params, &w, &mut derived_rng(12, &[i])).unwrap();
            totals.0 += a.len() as f64;
            totals.1 += b.len() as f64;
        }
        let (ma, mb) = (totals.0 / 40.0, totals.1 / 40.0);
        assert!((ma - mb).abs() < 0.25 * (ma + mb) / 2.0, "{ma} {mb}");
    }
}
