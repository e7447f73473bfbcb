//! Variance estimates used to standardize shifted statistics: the `1/n`
//! count rule, the plug-in double sum for the sample covariance, kernel
//! (Nadaraya–Watson) regression on the shift vectors, and second-order
//! moments of the cross-K numerator and denominator with the delta-method
//! variance of their ratio.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussfield::CovarianceModel;
use crate::geometry::{big_gamma, disc_window_area, set_covariance_gamma, ShiftVector, Window};
use crate::rng::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Epanechnikov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn epanechnikov(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::param("bandwidth", format!("{bandwidth} is not positive")));
        }
        Ok(KernelSpec {
            family: KernelFamily::Epanechnikov,
            bandwidth,
        })
    }

    /// Kernel at scaled distance `u = d / h`.
    pub fn eval(&self, u: f64) -> f64 {
        match self.family {
            KernelFamily::Epanechnikov => 0.75 * (1.0 - u * u).max(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    Count,
    Exact,
    Kernel,
    Theorem2,
}

/// Variance estimates for entries `0…N`; each row has one value per
/// component of the statistic (a single value for scalars).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub method: VarianceMethod,
    pub values: Vec<Vec<f64>>,
}

impl VarianceEstimate {
    pub fn scalar(method: VarianceMethod, values: Vec<f64>) -> Self {
        VarianceEstimate {
            method,
            values: values.into_iter().map(|v| vec![v]).collect(),
        }
    }
}

/// `var(T_i) = 1/n_i`.
pub fn var_count(counts: &[usize]) -> Result<VarianceEstimate> {
    let values = counts
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            if n < 2 {
                Err(Error::StatisticUndefined(format!("entry {i} has {n} sampling locations")))
            } else {
                Ok(1.0 / n as f64)
            }
        })
        .collect::<Result<_>>()?;
    Ok(VarianceEstimate::scalar(VarianceMethod::Count, values))
}

/// Leading term `1/(n−1)² Σ_i Σ_j C_Φ(x_i − x_j) C_Ψ(x_i − x_j)` of the
/// variance of the sample covariance under independence.
pub fn var_theorem1(locations: &[[f64; 2]], cov_phi: &CovarianceModel, cov_psi: &CovarianceModel) -> Result<f64> {
    let n = locations.len();
    if n < 2 {
        return Err(Error::StatisticUndefined(format!("{n} sampling locations")));
    }
    let reach = cov_phi.range.min(cov_psi.range);
    let mut sum = n as f64 * cov_phi.cov(0.0) * cov_psi.cov(0.0);
    for i in 0..n {
        let p = locations[i];
        for q in &locations[i + 1..] {
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            if d <= reach {
                sum += 2.0 * cov_phi.cov(d) * cov_psi.cov(d);
            }
        }
    }
    Ok(sum / ((n - 1) as f64).powi(2))
}

/// Exact variance of the sample covariance under independence,
/// `tr(H C_Φ H C_Ψ) / (n−1)²` with the centring matrix `H = I − 11ᵀ/n`.
/// Unlike [`var_theorem1`] this accounts for subtracting the sample means,
/// which matters for fields that are smooth at the scale of the window.
pub fn var_sample_covariance(
    locations: &[[f64; 2]],
    cov_phi: &CovarianceModel,
    cov_psi: &CovarianceModel,
) -> Result<f64> {
    let n = locations.len();
    if n < 2 {
        return Err(Error::StatisticUndefined(format!("{n} sampling locations")));
    }
    let (c0a, c0b) = (cov_phi.cov(0.0), cov_psi.cov(0.0));
    let mut trace = n as f64 * c0a * c0b;
    let mut rows_a = vec![c0a; n];
    let mut rows_b = vec![c0b; n];
    for i in 0..n {
        let p = locations[i];
        for (k, q) in locations[i + 1..].iter().enumerate() {
            let j = i + 1 + k;
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            let (a, b) = (cov_phi.cov(d), cov_psi.cov(d));
            trace += 2.0 * a * b;
            rows_a[i] += a;
            rows_a[j] += a;
            rows_b[i] += b;
            rows_b[j] += b;
        }
    }
    let nf = n as f64;
    let cross: f64 = rows_a.iter().zip(&rows_b).map(|(a, b)| a * b).sum();
    let (ta, tb) = (rows_a.iter().sum::<f64>(), rows_b.iter().sum::<f64>());
    let v = (trace - 2.0 * cross / nf + ta * tb / (nf * nf)) / ((nf - 1.0) * (nf - 1.0));
    Ok(v.max(0.0))
}

/// Row-stochastic Nadaraya–Watson weights
/// `w_ik = K(‖v_i − v_k‖/h) / Σ_j K(‖v_i − v_j‖/h)` over all indices.
pub fn nw_weights(shifts: &[ShiftVector], spec: &KernelSpec) -> Result<Vec<Vec<f64>>> {
    let h = spec.bandwidth;
    shifts
        .iter()
        .enumerate()
        .map(|(i, vi)| {
            let mut row: Vec<f64> = shifts.iter().map(|vk| spec.eval(vi.distance(vk) / h)).collect();
            let total: f64 = row.iter().sum();
            if !(total > 0.0) {
                return Err(Error::BandwidthTooSmall { index: i });
            }
            row.iter_mut().for_each(|w| *w /= total);
            Ok(row)
        })
        .collect()
}

fn check_kernel_input(n: usize, shifts: &[ShiftVector]) -> Result<()> {
    if n != shifts.len() {
        return Err(Error::param("shifts", "one shift vector per entry is required"));
    }
    if n < 11 {
        return Err(Error::param("N", "kernel variance needs at least 10 shifts"));
    }
    Ok(())
}

/// `var̂(T_i) = Σ_k (T_k − T̄)² w_ik` with `T̄` the mean over all entries.
pub fn var_kernel(values: &[f64], shifts: &[ShiftVector], spec: &KernelSpec) -> Result<VarianceEstimate> {
    check_kernel_input(values.len(), shifts)?;
    let weights = nw_weights(shifts, spec)?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let dev: Vec<f64> = values.iter().map(|t| (t - mean).powi(2)).collect();
    let est = weights
        .iter()
        .map(|row| row.iter().zip(&dev).map(|(w, d)| w * d).sum())
        .collect();
    Ok(VarianceEstimate::scalar(VarianceMethod::Kernel, est))
}

/// Kernel variance applied to every component of a functional statistic
/// with one shared weight matrix.
pub fn var_kernel_componentwise(
    curves: &[Vec<f64>],
    shifts: &[ShiftVector],
    spec: &KernelSpec,
) -> Result<VarianceEstimate> {
    check_kernel_input(curves.len(), shifts)?;
    let k = curves[0].len();
    if curves.iter().any(|c| c.len() != k) {
        return Err(Error::GridMismatch);
    }
    let weights = nw_weights(shifts, spec)?;
    let n = curves.len() as f64;
    let mean: Vec<f64> = (0..k).map(|j| curves.iter().map(|c| c[j]).sum::<f64>() / n).collect();
    let dev: Vec<Vec<f64>> = curves
        .iter()
        .map(|c| c.iter().zip(&mean).map(|(t, m)| (t - m).powi(2)).collect())
        .collect();
    let values = weights
        .par_iter()
        .map(|row| {
            let mut acc = vec![0.0; k];
            for (w, d) in row.iter().zip(&dev) {
                if *w > 0.0 {
                    for j in 0..k {
                        acc[j] += w * d[j];
                    }
                }
            }
            acc
        })
        .collect();
    Ok(VarianceEstimate {
        method: VarianceMethod::Kernel,
        values,
    })
}

/// `S_i = (T_i − T̄) / √var(T_i)` with `T̄` the mean over all entries.
pub fn standardize(values: &[f64], est: &VarianceEstimate) -> Result<Vec<f64>> {
    let curves: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
    Ok(standardize_componentwise(&curves, est)?.into_iter().map(|c| c[0]).collect())
}

/// Componentwise standardization of functional statistics. A component on
/// which every entry equals the mean carries no information and maps to 0.
pub fn standardize_componentwise(curves: &[Vec<f64>], est: &VarianceEstimate) -> Result<Vec<Vec<f64>>> {
    if curves.len() != est.values.len() {
        return Err(Error::param("variance", "one estimate per entry is required"));
    }
    let k = curves.first().map_or(0, Vec::len);
    if curves.iter().chain(&est.values).any(|c| c.len() != k) {
        return Err(Error::GridMismatch);
    }
    let n = curves.len() as f64;
    let mean: Vec<f64> = (0..k).map(|j| curves.iter().map(|c| c[j]).sum::<f64>() / n).collect();
    let flat: Vec<bool> = (0..k).map(|j| curves.iter().all(|c| c[j] == curves[0][j])).collect();
    curves
        .iter()
        .zip(&est.values)
        .enumerate()
        .map(|(i, (c, v))| {
            (0..k)
                .map(|j| {
                    if flat[j] {
                        return Ok(0.0);
                    }
                    if !(v[j] > 0.0) || !v[j].is_finite() {
                        return Err(Error::NonPositiveVariance { index: i, value: v[j] });
                    }
                    Ok((c[j] - mean[j]) / v[j].sqrt())
                })
                .collect()
        })
        .collect()
}

/// Pair-correlation functions known in closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairCorrelation {
    Poisson,
    /// `g(r) = exp(σ² e^{−r/s})`.
    Lgcp { variance: f64, scale: f64 },
}

impl PairCorrelation {
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            PairCorrelation::Poisson => 1.0,
            PairCorrelation::Lgcp { variance, scale } => (variance * (-r / scale).exp()).exp(),
        }
    }

    pub fn is_poisson(&self) -> bool {
        match *self {
            PairCorrelation::Poisson => true,
            PairCorrelation::Lgcp { variance, .. } => variance == 0.0,
        }
    }
}

/// Monte Carlo budget for the second-order integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Config {
    /// Samples per integral.
    pub mc_points: usize,
    /// Independent sub-streams the budget is split into.
    pub chunks: usize,
}

impl Default for Theorem2Config {
    fn default() -> Self {
        Theorem2Config {
            mc_points: 160_000,
            chunks: 16,
        }
    }
}

impl Theorem2Config {
    fn validate(&self) -> Result<()> {
        if self.mc_points < 100_000 {
            return Err(Error::param("mc_points", "at least 1e5 points are required"));
        }
        if self.chunks == 0 || self.chunks > self.mc_points {
            return Err(Error::param("chunks", "must be between 1 and mc_points"));
        }
        Ok(())
    }
}

/// Intensity-free integrals over one window, for every `r` on a grid.
/// Each MC integral comes with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Integrals {
    pub r: Vec<f64>,
    pub area: f64,
    /// `∫_{W²} f_r(u − v)`, exact.
    pub gamma: Vec<f64>,
    /// `∫_{W⁴} [g₁(u−u′)g₂(v−v′) − 1] f_r(u−v) f_r(u′−v′)`.
    pub quad: Vec<(f64, f64)>,
    /// `∫_{W³} g₁(u−u′) f_r(u−v) f_r(u′−v)`.
    pub triple1: Vec<(f64, f64)>,
    /// `∫_{W³} g₂(v−v′) f_r(u−v) f_r(u−v′)`.
    pub triple2: Vec<(f64, f64)>,
    /// `∫_{W⁴} [g₁(u−u′)g₂(v−v′) − 1] f_r(u−v)`.
    pub cov_quad: Vec<(f64, f64)>,
    /// `∫_{W³} g₁(u−u′) f_r(u−v)`.
    pub cov_triple1: Vec<(f64, f64)>,
    /// `∫_{W³} g₂(v−v′) f_r(u−v)`.
    pub cov_triple2: Vec<(f64, f64)>,
    /// `∫_{W²} g₁(u − v)` and `∫_{W²} g₂(u − v)`, by quadrature.
    pub g1_total: f64,
    pub g2_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Moments {
    pub mu_r: f64,
    pub mu_s: f64,
    pub var_r: f64,
    pub var_s: f64,
    pub cov_rs: f64,
    pub se_var_r: f64,
    pub se_cov_rs: f64,
}

/// Running sums of a value and its square at every grid index.
struct Sums {
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Sums {
    fn new(k: usize) -> Self {
        Sums {
            sum: vec![0.0; k],
            sq: vec![0.0; k],
        }
    }

    fn add(&mut self, j: usize, x: f64) {
        self.sum[j] += x;
        self.sq[j] += x * x;
    }

    fn merge(&mut self, other: &Sums) {
        for j in 0..self.sum.len() {
            self.sum[j] += other.sum[j];
            self.sq[j] += other.sq[j];
        }
    }

    /// Mean and standard error over `m` samples.
    fn finish(&self, m: usize) -> Vec<(f64, f64)> {
        let m = m as f64;
        self.sum
            .iter()
            .zip(&self.sq)
            .map(|(s, q)| {
                let mean = s / m;
                (mean, ((q / m - mean * mean).max(0.0) / m).sqrt())
            })
            .collect()
    }
}

/// First grid index whose argument is at least `d`.
fn bin(r: &[f64], d: f64) -> usize {
    r.partition_point(|&v| v < d)
}

/// Displacement radius drawn from an even mixture of U[0, r_max] and a
/// log-uniform law on [r_lo, r_max], so small-r bins get enough samples.
/// Returns the vector, its length and the importance weight `2π|ρ| / p(|ρ|)`.
#[derive(Clone, Copy)]
struct RadiusLaw {
    r_lo: f64,
    r_max: f64,
    log_span: f64,
}

impl RadiusLaw {
    fn new(r_lo: f64, r_max: f64) -> Self {
        let r_lo = r_lo.min(r_max);
        RadiusLaw {
            r_lo,
            r_max,
            log_span: (r_max / r_lo).ln(),
        }
    }

    fn density(&self, t: f64) -> f64 {
        let mut p = 0.5 / self.r_max;
        if self.log_span > 0.0 && t >= self.r_lo {
            p += 0.5 / (t * self.log_span);
        }
        p
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ([f64; 2], f64, f64) {
        let u: f64 = rng.random();
        let t = if u < 0.5 || self.log_span == 0.0 {
            self.r_max * rng.random::<f64>()
        } else {
            self.r_lo * (self.log_span * rng.random::<f64>()).exp()
        };
        let theta = 2.0 * PI * rng.random::<f64>();
        ([t * theta.cos(), t * theta.sin()], t, 2.0 * PI * t / self.density(t))
    }
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, w: &Window) -> [f64; 2] {
    let (x, y): (f64, f64) = (rng.random(), rng.random());
    [w.x_min + x * w.width(), w.y_min + y * w.height()]
}

fn add(p: [f64; 2], d: [f64; 2]) -> [f64; 2] {
    [p[0] + d[0], p[1] + d[1]]
}

fn dist(p: [f64; 2], q: [f64; 2]) -> f64 {
    (p[0] - q[0]).hypot(p[1] - q[1])
}

fn inside(w: &Window, p: [f64; 2]) -> bool {
    p[0] >= w.x_min && p[0] <= w.x_max && p[1] >= w.y_min && p[1] <= w.y_max
}

/// `∫_{W²} g(u − v) du dv = ∫ g(t) 2πt γ̄_W(t) dt` by composite Simpson,
/// split where the set covariance has kinks.
pub fn pcf_window_integral(g: &PairCorrelation, w: &Window) -> f64 {
    let area = w.area();
    if g.is_poisson() {
        return area * area;
    }
    let (a, b) = (w.width().min(w.height()), w.width().max(w.height()));
    let f = |t: f64| (g.eval(t) - 1.0) * 2.0 * PI * t * set_covariance_gamma(w, t);
    let simpson = |lo: f64, hi: f64, n: usize| {
        if hi <= lo {
            return 0.0;
        }
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    area * area + simpson(0.0, a, 256) + simpson(a, b, 128) + simpson(b, w.diameter(), 128)
}

/// Monte Carlo evaluation of all intensity-free integrals on `r_grid`.
///
/// Points are drawn in unit coordinates and mapped onto `w`, so calls with
/// the same seed on different windows use common random numbers. The work
/// is split into `cfg.chunks` sub-streams derived from `seed`; the result
/// does not depend on the number of threads.
pub fn theorem2_integrals(
    g1: &PairCorrelation,
    g2: &PairCorrelation,
    w: &Window,
    r_grid: &[f64],
    cfg: &Theorem2Config,
    seed: u64,
) -> Result<Theorem2Integrals> {
    cfg.validate()?;
    if r_grid.is_empty() || !(r_grid[0] > 0.0) || r_grid.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(Error::param("r_grid", "grid must be positive and strictly increasing"));
    }
    let k = r_grid.len();
    let r_max = r_grid[k - 1];
    let area = w.area();
    let poisson = g1.is_poisson() && g2.is_poisson();
    let law = RadiusLaw::new(0.5 * r_grid[0], r_max);
    let per_chunk = |c: usize| cfg.mc_points / cfg.chunks + usize::from(c < cfg.mc_points % cfg.chunks);

    let g1_0 = g1.eval(0.0);
    let g2_0 = g2.eval(0.0);
    let a2 = area * area;
    let a3 = a2 * area;

    // Every integral is split into a near-field part, where the displaced
    // points are collapsed onto their centres and the disc areas are exact,
    // and a residual sampled through displacements. The near-field parts
    // carry the large terms that nearly cancel in the ratio variance.
    let parts: Vec<[Sums; 6]> = (0..cfg.chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = derived_rng(seed, &[c as u64]);
            let mut acc = [0; 6].map(|_| Sums::new(k));
            let mut e_u = vec![0.0; k];
            let mut e_u2 = vec![0.0; k];
            for _ in 0..per_chunk(c) {
                let (u, u2) = (uniform_in(&mut rng, w), uniform_in(&mut rng, w));
                let (rho, t, wt) = law.draw(&mut rng);
                let (rho2, t2, wt2) = law.draw(&mut rng);
                let free = uniform_in(&mut rng, w);
                let centre = uniform_in(&mut rng, w);

                let d = dist(u, u2);
                let (g1d, g2d) = (g1.eval(d), g2.eval(d));
                let g2_free = g2.eval(dist(u, free));
                for j in 0..k {
                    e_u[j] = disc_window_area(w, u, r_grid[j]);
                    e_u2[j] = disc_window_area(w, u2, r_grid[j]);
                }

                // residuals
                let (mut quad_res, mut cov_res) = ((usize::MAX, 0.0), (usize::MAX, 0.0));
                if !poisson {
                    let v = add(u, rho);
                    let v2 = add(u2, rho2);
                    if inside(w, v) && inside(w, v2) {
                        let x = a2 * wt * wt2 * g1d * (g2.eval(dist(v, v2)) - g2d);
                        quad_res = (bin(r_grid, t.max(t2)), x);
                    }
                    if inside(w, v) {
                        let x = a3 * wt * g1d * (g2.eval(dist(v, free)) - g2_free);
                        cov_res = (bin(r_grid, t), x);
                    }
                }
                let (a, b) = (add(centre, rho), add(centre, rho2));
                let (mut t1_res, mut t2_res) = ((usize::MAX, 0.0), (usize::MAX, 0.0));
                if inside(w, a) && inside(w, b) {
                    let base = area * wt * wt2;
                    let jb = bin(r_grid, t.max(t2));
                    t1_res = (jb, base * (g1.eval(dist(a, b)) - g1_0));
                    t2_res = (jb, base * (g2.eval(dist(a, b)) - g2_0));
                }

                let res = |(jb, x): (usize, f64), j: usize| if j >= jb { x } else { 0.0 };
                for j in 0..k {
                    let (eu, eu2) = (e_u[j], e_u2[j]);
                    acc[0].add(j, a2 * (g1d * g2d - 1.0) * eu * eu2 + res(quad_res, j));
                    acc[1].add(j, area * g1_0 * eu * eu + res(t1_res, j));
                    acc[2].add(j, area * g2_0 * eu * eu + res(t2_res, j));
                    acc[3].add(j, a3 * (g1d * g2_free - 1.0) * eu + res(cov_res, j));
                    acc[4].add(j, a2 * g1d * eu);
                    acc[5].add(j, a2 * g2d * eu);
                }
            }
            acc
        })
        .collect();

    let mut total = [0; 6].map(|_| Sums::new(k));
    for part in &parts {
        for (t, p) in total.iter_mut().zip(part) {
            t.merge(p);
        }
    }
    let m = cfg.mc_points;
    let [quad, triple1, triple2, cov_quad, cov_triple1, cov_triple2] = total.map(|b| b.finish(m));
    Ok(Theorem2Integrals {
        r: r_grid.to_vec(),
        area,
        gamma: r_grid.iter().map(|&r| big_gamma(w, r)).collect(),
        quad,
        triple1,
        triple2,
        cov_quad,
        cov_triple1,
        cov_triple2,
        g1_total: pcf_window_integral(g1, w),
        g2_total: pcf_window_integral(g2, w),
    })
}

impl Theorem2Integrals {
    /// Moments of `R` and `S` at grid index `j` for intensities `λ₁, λ₂`.
    pub fn moments(&self, lambda1: f64, lambda2: f64, j: usize) -> Theorem2Moments {
        let (l1, l2) = (lambda1, lambda2);
        let w2 = self.area * self.area;
        let c4 = l1 * l1 * l2 * l2;
        let c31 = l1 * l1 * l2;
        let c32 = l1 * l2 * l2;
        let c2 = l1 * l2;
        let g = self.gamma[j];
        let var_r = c4 * self.quad[j].0 + c31 * self.triple1[j].0 + c32 * self.triple2[j].0 + c2 * g;
        let cov_rs =
            (c4 * self.cov_quad[j].0 + c31 * self.cov_triple1[j].0 + c32 * self.cov_triple2[j].0 + c2 * g) / w2;
        let e1 = l1 * l1 * self.g1_total + l1 * self.area;
        let e2 = l2 * l2 * self.g2_total + l2 * self.area;
        let var_s = e1 * e2 / (w2 * w2) - c4;
        let se = |a: f64, b: f64, c: f64| a.hypot(b).hypot(c);
        Theorem2Moments {
            mu_r: c2 * g,
            mu_s: c2,
            var_r,
            var_s,
            cov_rs,
            se_var_r: se(c4 * self.quad[j].1, c31 * self.triple1[j].1, c32 * self.triple2[j].1),
            se_cov_rs: se(c4 * self.cov_quad[j].1, c31 * self.cov_triple1[j].1, c32 * self.cov_triple2[j].1) / w2,
        }
    }

    /// Coefficients `[A₀, A₁, A₂]` of the delta-method variance
    /// `Var(R/S) / (μ_R/μ_S)² = A₀ + A₁/λ₂ + A₂/λ₁ + A₃/(λ₁λ₂)` at grid index
    /// `j`; `A₃ = 1/Γ − 1/|W|²` is exact.
    pub fn ratio_coefficients(&self, j: usize) -> [f64; 3] {
        let g = self.gamma[j];
        let w1 = self.area;
        let w2 = w1 * w1;
        [
            self.quad[j].0 / (g * g) - 2.0 * self.cov_quad[j].0 / (w2 * g) + self.g1_total * self.g2_total / (w2 * w2)
                - 1.0,
            self.triple1[j].0 / (g * g) - 2.0 * self.cov_triple1[j].0 / (w2 * g) + self.g1_total / (w2 * w1),
            self.triple2[j].0 / (g * g) - 2.0 * self.cov_triple2[j].0 / (w2 * g) + self.g2_total / (w2 * w1),
        ]
    }
}

/// Moments at a single `r` with a caller-supplied stream.
#[allow(clippy::too_many_arguments)]
pub fn theorem2_moments<R: Rng + ?Sized>(
    lambda1: f64,
    lambda2: f64,
    g1: &PairCorrelation,
    g2: &PairCorrelation,
    r: f64,
    w: &Window,
    mc_points: usize,
    rng: &mut R,
) -> Result<Theorem2Moments> {
    let cfg = Theorem2Config {
        mc_points,
        ..Theorem2Config::default()
    };
    let ints = theorem2_integrals(g1, g2, w, &[r], &cfg, rng.random())?;
    Ok(ints.moments(lambda1, lambda2, 0))
}

/// Delta-method approximation of `var(R/S)`.
pub fn var_ratio_taylor(m: &Theorem2Moments) -> Result<f64> {
    if !(m.mu_r > 0.0 && m.mu_s > 0.0) {
        return Err(Error::param("moments", "means must be positive"));
    }
    let q = m.mu_r / m.mu_s;
    Ok(q * q * (m.var_r / (m.mu_r * m.mu_r) - 2.0 * m.cov_rs / (m.mu_r * m.mu_s) + m.var_s / (m.mu_s * m.mu_s)))
}

/// Integrals tabulated over window widths and heights, bilinearly
/// interpolated. All nodes share one seed (common random numbers).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Theorem2Table {
    pub g1: PairCorrelation,
    pub g2: PairCorrelation,
    pub widths: Vec<f64>,
    pub heights: Vec<f64>,
    nodes: Vec<Theorem2Integrals>,
}

impl Theorem2Table {
    pub fn build(
        g1: PairCorrelation,
        g2: PairCorrelation,
        widths: Vec<f64>,
        heights: Vec<f64>,
        r_grid: &[f64],
        cfg: &Theorem2Config,
        seed: u64,
    ) -> Result<Self> {
        for axis in [&widths, &heights] {
            if axis.is_empty() || axis.windows(2).any(|p| !(p[1] > p[0])) || !(axis[0] > 0.0) {
                return Err(Error::param("table", "node coordinates must be positive and increasing"));
            }
        }
        let mut nodes = Vec::with_capacity(widths.len() * heights.len());
        for &a in &widths {
            for &b in &heights {
                let w = Window::new(0.0, 0.0, a, b)?;
                nodes.push(theorem2_integrals(&g1, &g2, &w, r_grid, cfg, seed)?);
            }
        }
        Ok(Theorem2Table {
            g1,
            g2,
            widths,
            heights,
            nodes,
        })
    }

    /// Evenly spaced nodes covering every intersection window `W ∩ (W + v)`
    /// with `|v_x| ≤ ex`, `|v_y| ≤ ey`.
    #[allow(clippy::too_many_arguments)]
    pub fn for_shift_extent(
        g1: PairCorrelation,
        g2: PairCorrelation,
        w: &Window,
        extent: (f64, f64),
        nodes_per_axis: usize,
        r_grid: &[f64],
        cfg: &Theorem2Config,
        seed: u64,
    ) -> Result<Self> {
        let axis = |side: f64, e: f64| -> Vec<f64> {
            let lo = (side - e).max(side * 0.01);
            let n = nodes_per_axis.max(2);
            (0..n).map(|i| lo + (side - lo) * i as f64 / (n - 1) as f64).collect()
        };
        Self::build(
            g1,
            g2,
            axis(w.width(), extent.0),
            axis(w.height(), extent.1),
            r_grid,
            cfg,
            seed,
        )
    }

    pub fn r(&self) -> &[f64] {
        &self.nodes[0].r
    }

    fn bracket(axis: &[f64], x: f64) -> Result<(usize, f64)> {
        let tol = 1e-9 * axis[axis.len() - 1];
        if x < axis[0] - tol || x > axis[axis.len() - 1] + tol {
            return Err(Error::UnsupportedGeometry(format!(
                "window side {x} outside the tabulated range [{}, {}]",
                axis[0],
                axis[axis.len() - 1]
            )));
        }
        if axis.len() == 1 {
            return Ok((0, 0.0));
        }
        let i = axis.partition_point(|&a| a <= x).clamp(1, axis.len() - 1) - 1;
        Ok((i, ((x - axis[i]) / (axis[i + 1] - axis[i])).clamp(0.0, 1.0)))
    }

    /// Ratio-variance coefficients at every `r`, bilinearly interpolated
    /// between nodes. Interpolating these rather than the raw integrals
    /// keeps the near-cancellation inside each node.
    pub fn coefficients_at(&self, width: f64, height: f64) -> Result<Vec<[f64; 3]>> {
        let (i, tx) = Self::bracket(&self.widths, width)?;
        let (j, ty) = Self::bracket(&self.heights, height)?;
        let nh = self.heights.len();
        let i1 = (i + 1).min(self.widths.len() - 1);
        let j1 = (j + 1).min(nh - 1);
        let corner = |a: usize, b: usize| {
            let node = &self.nodes[a * nh + b];
            (0..node.r.len()).map(|k| node.ratio_coefficients(k)).collect::<Vec<_>>()
        };
        let (c00, c01, c10, c11) = (corner(i, j), corner(i, j1), corner(i1, j), corner(i1, j1));
        Ok((0..c00.len())
            .map(|k| {
                std::array::from_fn(|m| {
                    let lo = c00[k][m] + ty * (c01[k][m] - c00[k][m]);
                    let hi = c10[k][m] + ty * (c11[k][m] - c10[k][m]);
                    lo + tx * (hi - lo)
                })
            })
            .collect())
    }

    /// Variance of `K̂₁₂(r)` on a window for every tabulated `r`, with
    /// intensities estimated from the point counts.
    pub fn cross_k_variance(&self, w: &Window, n1: usize, n2: usize) -> Result<Vec<f64>> {
        if n1 == 0 || n2 == 0 {
            return Err(Error::StatisticUndefined("empty pattern on a shifted window".into()));
        }
        let coef = self.coefficients_at(w.width(), w.height())?;
        let (l1, l2) = (n1 as f64 / w.area(), n2 as f64 / w.area());
        let w2 = w.area() * w.area();
        Ok(self
            .r()
            .iter()
            .zip(&coef)
            .map(|(&r, a)| {
                let a3 = 1.0 / big_gamma(w, r) - 1.0 / w2;
                (PI * r * r).powi(2) * (a[0] + a[1] / l2 + a[2] / l1 + a3 / (l1 * l2))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{draw_shift_disk, edge_factor_c};
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn shifts(n: usize, seed: u64, radius: f64) -> Vec<ShiftVector> {
        let mut rng = rng_from_seed(seed);
        let mut v = vec![ShiftVector::ORIGIN];
        v.extend((1..n).map(|_| draw_shift_disk(&mut rng, radius).unwrap()));
        v
    }

    #[test]
    fn count_rule() {
        let v = var_count(&[100, 100, 200]).unwrap();
        assert_eq!(v.values, vec![vec![0.01], vec![0.01], vec![0.005]]);
        assert!(var_count(&[100, 1]).is_err());
    }

    #[test]
    fn white_noise_plug_in() {
        let cov = CovarianceModel::exponential(1.0, 1e-9).unwrap().truncated(5.0);
        let locs: Vec<[f64; 2]> = (0..10).map(|i| [i as f64 * 0.1, 0.5]).collect();
        let v = var_theorem1(&locs, &cov, &cov).unwrap();
        assert!((v - 10.0 / 81.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_plug_in() {
        // a scale so large that C ≈ σ² at distance 0.1
        let cov = CovarianceModel::exponential(2.0, 1e12).unwrap();
        let v = var_theorem1(&[[0.0, 0.0], [0.1, 0.0]], &cov, &cov).unwrap();
        assert!((v - 16.0).abs() < 1e-9);
        assert!(var_theorem1(&[[0.0, 0.0]], &cov, &cov).is_err());
        // a constant field has no centred variability
        assert!(var_sample_covariance(&[[0.0, 0.0], [0.1, 0.0]], &cov, &cov).unwrap() < 1e-9);
    }

    #[test]
    fn centred_variance_of_white_noise() {
        let cov = CovarianceModel::exponential(1.0, 1e-9).unwrap().truncated(5.0);
        let locs: Vec<[f64; 2]> = (0..10).map(|i| [i as f64 * 0.1, 0.5]).collect();
        let v = var_sample_covariance(&locs, &cov, &cov).unwrap();
        assert!((v - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn centred_variance_matches_simulation() {
        use crate::gaussfield::{draw_binomial_design, read_field, GridDims, GrfSimulator};
        let w = Window::unit();
        let cov = CovarianceModel::exponential(1.0, 0.3).unwrap();
        let sim = GrfSimulator::new(cov, w, GridDims::square(64)).unwrap();
        let mut rng = rng_from_seed(21);
        let design = draw_binomial_design(40, &w, &mut rng).unwrap();
        let exact = var_sample_covariance(&design.locations, &cov, &cov).unwrap();
        let reps = 1500;
        let s: Vec<f64> = (0..reps)
            .map(|_| {
                let (a, b) = sim.sample_pair(&mut rng);
                let (x, y) = (read_field(&a, &design).unwrap(), read_field(&b, &design).unwrap());
                crate::summaries::sample_covariance(&x, &y).unwrap().value
            })
            .collect();
        let mean = s.iter().sum::<f64>() / reps as f64;
        let emp = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!((emp / exact - 1.0).abs() < 0.12, "{emp} vs {exact}");
        assert!(exact < var_theorem1(&design.locations, &cov, &cov).unwrap());
    }

    #[test]
    fn kernel_ratio_at_half_bandwidth() {
        let k = KernelSpec::epanechnikov(0.2).unwrap();
        assert!((k.eval(0.5) / k.eval(0.0) - 0.75).abs() < 1e-15);
        assert_eq!(k.eval(1.0), 0.0);
        assert!(KernelSpec::epanechnikov(0.0).is_err());
    }

    #[test]
    fn equal_shifts_give_uniform_weights() {
        let v = vec![ShiftVector::new(0.1, 0.1); 12];
        let t: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let est = var_kernel(&t, &v, &KernelSpec::epanechnikov(0.05).unwrap()).unwrap();
        let mean = 5.5;
        let msd = t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 12.0;
        for row in &est.values {
            assert!((row[0] - msd).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_shift_is_reported() {
        let mut v = vec![ShiftVector::ORIGIN; 11];
        v[4] = ShiftVector::new(0.4, 0.0);
        let est = var_kernel(&[1.0; 11], &v, &KernelSpec::epanechnikov(0.05).unwrap()).unwrap();
        // isolated index still has its own weight
        assert_eq!(est.values[4][0], 0.0);
    }

    #[test]
    fn standardize_examples() {
        let est = VarianceEstimate::scalar(VarianceMethod::Count, vec![0.5; 4]);
        assert_eq!(standardize(&[3.0; 4], &est).unwrap(), vec![0.0; 4]);
        let s = standardize(&[1.0, 2.0, 3.0, 6.0], &est).unwrap();
        assert!(s.iter().sum::<f64>().abs() < 1e-12);
        let doubled = VarianceEstimate::scalar(VarianceMethod::Count, vec![1.0; 4]);
        let s2 = standardize(&[1.0, 2.0, 3.0, 6.0], &doubled).unwrap();
        for (a, b) in s.iter().zip(&s2) {
            assert!((a / 2f64.sqrt() - b).abs() < 1e-12);
        }
        let bad = VarianceEstimate::scalar(VarianceMethod::Count, vec![0.5, 0.0, 0.5, 0.5]);
        assert_eq!(
            standardize(&[1.0, 2.0, 3.0, 6.0], &bad),
            Err(Error::NonPositiveVariance { index: 1, value: 0.0 })
        );
    }

    #[test]
    fn taylor_degenerate_cases() {
        let m = Theorem2Moments {
            mu_r: 2.0,
            mu_s: 4.0,
            var_r: 3.0,
            var_s: 0.0,
            cov_rs: 0.0,
            se_var_r: 0.0,
            se_cov_rs: 0.0,
        };
        assert!((var_ratio_taylor(&m).unwrap() - 3.0 / 16.0).abs() < 1e-15);
        // R = cS: var R = c² var S, cov = c var S, μ_R = c μ_S
        let (c, vs, ms) = (3.0, 2.0, 5.0);
        let m = Theorem2Moments {
            mu_r: c * ms,
            mu_s: ms,
            var_r: c * c * vs,
            var_s: vs,
            cov_rs: c * vs,
            se_var_r: 0.0,
            se_cov_rs: 0.0,
        };
        assert!(var_ratio_taylor(&m).unwrap().abs() < 1e-12);
        assert!(var_ratio_taylor(&Theorem2Moments { mu_r: 0.0, ..m }).is_err());
    }

    #[test]
    fn pcf_integral_of_poisson_is_area_squared() {
        let w = Window::new(0.0, 0.0, 2.0, 0.5).unwrap();
        assert_eq!(pcf_window_integral(&PairCorrelation::Poisson, &w), 1.0);
        // ∫∫ 1 by the quadrature path equals |W|²
        let tiny = PairCorrelation::Lgcp { variance: 1e-12, scale: 0.1 };
        assert!((pcf_window_integral(&tiny, &w) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn poisson_moments_match_closed_forms() {
        let w = Window::unit();
        let g = PairCorrelation::Poisson;
        let r = [0.05, 0.1];
        let ints = theorem2_integrals(&g, &g, &w, &r, &Theorem2Config::default(), 3).unwrap();
        let m = ints.moments(150.0, 150.0, 0);
        assert!((m.mu_r - 22500.0 * big_gamma(&w, 0.05)).abs() < 1e-9);
        assert_eq!(m.mu_s, 22500.0);
        // var S for Poisson counts: (λ² + λ)² − λ⁴ on the unit square
        assert!((m.var_s - ((22500.0 + 150.0) * (22500.0 + 150.0) - 22500.0 * 22500.0)).abs() < 1e-6);
        // cov(R, S) for Poisson: Γ (λ₁²λ₂ + λ₁λ₂² + λ₁λ₂) / |W|
        let exact_cov = big_gamma(&w, 0.05) * (2.0 * 150f64.powi(3) + 22500.0);
        assert!((m.cov_rs - exact_cov).abs() < 4.0 * m.se_cov_rs, "{} {} {}", m.cov_rs, exact_cov, m.se_cov_rs);
        assert!(m.var_r > 0.0 && m.cov_rs.abs() <= (m.var_r * m.var_s).sqrt() + 3.0 * m.se_cov_rs);
    }

    #[test]
    fn integrals_are_deterministic_across_pools() {
        let w = Window::unit();
        let g = PairCorrelation::Lgcp { variance: 1.0, scale: 0.1 };
        let cfg = Theorem2Config::default();
        let a = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| theorem2_integrals(&g, &g, &w, &[0.05], &cfg, 1).unwrap());
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| theorem2_integrals(&g, &g, &w, &[0.05], &cfg, 1).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn table_reproduces_its_nodes() {
        let g = PairCorrelation::Poisson;
        let cfg = Theorem2Config::default();
        let r = [0.05];
        let t = Theorem2Table::build(g, g, vec![0.5, 1.0], vec![0.5, 1.0], &r, &cfg, 9).unwrap();
        let direct = theorem2_integrals(&g, &g, &Window::new(0.0, 0.0, 1.0, 0.5).unwrap(), &r, &cfg, 9).unwrap();
        let at = t.coefficients_at(1.0, 0.5).unwrap()[0];
        let want = direct.ratio_coefficients(0);
        for m in 0..3 {
            assert!((at[m] - want[m]).abs() <= 1e-9 * want[m].abs() + 1e-12, "{at:?} {want:?}");
        }
        assert!(t.coefficients_at(0.4, 0.5).is_err());
    }

    #[test]
    fn interpolated_variance_matches_direct_off_nodes() {
        let w = Window::unit();
        let r = [0.03, 0.09, 0.15];
        let cfg = Theorem2Config::default();
        for g in [PairCorrelation::Poisson, PairCorrelation::Lgcp { variance: 1.0, scale: 0.3 }] {
            let t = Theorem2Table::for_shift_extent(g, g, &w, (0.5, 0.5), 6, &r, &cfg, 2).unwrap();
            for (a, b) in [(0.55, 0.62), (0.93, 0.71)] {
                let d = Window::new(0.0, 0.0, a, b).unwrap();
                let n = (150.0 * a * b) as usize;
                let table = t.cross_k_variance(&d, n, n).unwrap();
                let ints = theorem2_integrals(&g, &g, &d, &r, &cfg, 5).unwrap();
                let l = n as f64 / d.area();
                for j in 0..r.len() {
                    let c = edge_factor_c(&d, r[j]).unwrap();
                    let direct = c * c * var_ratio_taylor(&ints.moments(l, l, j)).unwrap();
                    let rel = (table[j] / direct - 1.0).abs();
                    assert!(rel < 0.1, "{g:?} {a}x{b} r={}: {} vs {direct}", r[j], table[j]);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn weight_rows_sum_to_one(seed in 0u64..10_000, h in 0.05f64..0.3) {
            let v = shifts(60, seed, 0.5);
            let w = nw_weights(&v, &KernelSpec::epanechnikov(h).unwrap()).unwrap();
            for row in &w {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn plug_in_is_symmetric(seed in 0u64..1000, s1 in 0.01f64..0.5, s2 in 0.01f64..0.5) {
            let mut rng = rng_from_seed(seed);
            let d = crate::gaussfield::draw_binomial_design(40, &Window::unit(), &mut rng).unwrap();
            let a = CovarianceModel::exponential(1.3, s1).unwrap().truncated(5.0);
            let b = CovarianceModel::exponential(0.7, s2).unwrap().truncated(5.0);
            let x = var_theorem1(&d.locations, &a, &b).unwrap();
            let y = var_theorem1(&d.locations, &b, &a).unwrap();
            prop_assert!((x - y).abs() <= 1e-12 * x.abs());
        }
    }
}
