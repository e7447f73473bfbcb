//! Test statistics: sample covariance of field marks, exponential variogram
//! fitting, the globally corrected cross-K function, the border-censored
//! Kaplan–Meier cross nearest-neighbour distribution and its mean.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussfield::CovarianceModel;
use crate::geometry::{edge_factor_c, Window};
use crate::pattern::PointPattern;

/// Number of arguments in the default functional grids.
pub const DEFAULT_GRID_LEN: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarStatistic {
    pub value: f64,
    /// Number of sampling locations or points the value is computed from.
    pub n: usize,
    pub area: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    CrossK,
    G12,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalStatistic {
    pub r: Vec<f64>,
    pub values: Vec<f64>,
    pub estimator: Estimator,
}

/// `k` equispaced arguments on `(0, r_max]`.
pub fn equispaced_grid(r_max: f64, k: usize) -> Vec<f64> {
    (1..=k).map(|j| r_max * j as f64 / k as f64).collect()
}

/// Default cross-K grid: 50 values on `(0, 0.15 · min side]`.
pub fn default_k_grid(w: &Window) -> Vec<f64> {
    equispaced_grid(0.15 * w.min_side(), DEFAULT_GRID_LEN)
}

/// Default G₁₂ grid: 50 values on `(0, 0.25 · min side]`.
pub fn default_g_grid(w: &Window) -> Vec<f64> {
    equispaced_grid(0.25 * w.min_side(), DEFAULT_GRID_LEN)
}

fn check_grid(r: &[f64]) -> Result<()> {
    if r.is_empty() {
        return Err(Error::param("r_grid", "grid is empty"));
    }
    if !(r[0] > 0.0) || r.windows(2).any(|p| !(p[1] > p[0])) || !r.iter().all(|v| v.is_finite()) {
        return Err(Error::param("r_grid", "grid must be positive and strictly increasing"));
    }
    Ok(())
}

/// Unbiased sample covariance `(1/(n−1)) Σ (φᵢ − φ̄)(ψᵢ − ψ̄)`.
pub fn sample_covariance(phi: &[f64], psi: &[f64]) -> Result<ScalarStatistic> {
    let n = phi.len();
    if n != psi.len() {
        return Err(Error::param("psi", "vectors differ in length"));
    }
    if n < 2 {
        return Err(Error::StatisticUndefined(format!(
            "sample covariance needs two values, got {n}"
        )));
    }
    let mp = phi.iter().sum::<f64>() / n as f64;
    let ms = psi.iter().sum::<f64>() / n as f64;
    let s: f64 = phi.iter().zip(psi).map(|(a, b)| (a - mp) * (b - ms)).sum();
    Ok(ScalarStatistic {
        value: s / (n - 1) as f64,
        n,
        area: None,
    })
}

/// Least-squares fit of `γ(h) = σ²(1 − e^{−h/s})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramFit {
    pub variance: f64,
    pub scale: f64,
    pub max_lag: f64,
    pub rss: f64,
}

impl VariogramFit {
    pub fn covariance(&self) -> CovarianceModel {
        CovarianceModel {
            family: crate::gaussfield::CovarianceFamily::Exponential,
            variance: self.variance,
            scale: self.scale,
            range: f64::INFINITY,
        }
    }
}

/// Binned empirical semivariogram: `(mean lag, semivariance, pair count)`
/// for every non-empty bin.
pub fn empirical_variogram(
    locations: &[[f64; 2]],
    values: &[f64],
    max_lag: f64,
    n_bins: usize,
) -> Vec<(f64, f64, usize)> {
    let width = max_lag / n_bins as f64;
    let mut lag = vec![0.0; n_bins];
    let mut gam = vec![0.0; n_bins];
    let mut cnt = vec![0usize; n_bins];
    for i in 0..locations.len() {
        for j in i + 1..locations.len() {
            let (p, q) = (locations[i], locations[j]);
            let h = (p[0] - q[0]).hypot(p[1] - q[1]);
            if h > max_lag {
                continue;
            }
            let b = ((h / width) as usize).min(n_bins - 1);
            lag[b] += h;
            gam[b] += 0.5 * (values[i] - values[j]).powi(2);
            cnt[b] += 1;
        }
    }
    (0..n_bins)
        .filter(|&b| cnt[b] > 0)
        .map(|b| (lag[b] / cnt[b] as f64, gam[b] / cnt[b] as f64, cnt[b]))
        .collect()
}

/// Pair-count weighted least squares over `(σ², s)`.
///
/// `σ²` is profiled out in closed form; `log s` is searched from the starts
/// `max_lag/10`, `max_lag/3` and `max_lag`, within `[max_lag/50, 10·max_lag]`.
pub fn fit_exponential_variogram(
    locations: &[[f64; 2]],
    values: &[f64],
    max_lag: f64,
    n_bins: usize,
) -> Result<VariogramFit> {
    if locations.len() != values.len() {
        return Err(Error::param("values", "one value per location is required"));
    }
    if locations.len() < 30 {
        return Err(Error::param("locations", "at least 30 locations are required"));
    }
    if !(max_lag > 0.0) || n_bins == 0 {
        return Err(Error::param("max_lag", "max_lag and n_bins must be positive"));
    }
    let bins = empirical_variogram(locations, values, max_lag, n_bins);
    if bins.is_empty() {
        return Err(Error::FitFailed);
    }
    let profile = |log_s: f64| -> (f64, f64) {
        let s = log_s.exp();
        let (mut num, mut den) = (0.0, 0.0);
        for &(h, g, c) in &bins {
            let f = 1.0 - (-h / s).exp();
            num += c as f64 * g * f;
            den += c as f64 * f * f;
        }
        let var = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
        let rss = bins
            .iter()
            .map(|&(h, g, c)| c as f64 * (g - var * (1.0 - (-h / s).exp())).powi(2))
            .sum();
        (var, rss)
    };
    let (lo, hi) = ((max_lag / 50.0).ln(), (10.0 * max_lag).ln());
    let mut best: Option<VariogramFit> = None;
    for start in [max_lag / 10.0, max_lag / 3.0, max_lag] {
        let mut x = start.ln();
        let mut fx = profile(x).1;
        let mut step = 0.5;
        let mut iters = 0;
        while step > 1e-7 && iters < 10_000 {
            iters += 1;
            let mut moved = false;
            for cand in [x - step, x + step] {
                let cand = cand.clamp(lo, hi);
                let fc = profile(cand).1;
                if fc < fx {
                    x = cand;
                    fx = fc;
                    moved = true;
                    break;
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        if step > 1e-7 || !fx.is_finite() {
            continue;
        }
        let (variance, rss) = profile(x);
        let fit = VariogramFit {
            variance,
            scale: x.exp(),
            max_lag,
            rss,
        };
        if best.is_none_or(|b| fit.rss < b.rss) {
            best = Some(fit);
        }
    }
    best.ok_or(Error::FitFailed)
}

/// Uniform cell index over a point set for range and nearest-neighbour queries.
pub(crate) struct PointGrid<'a> {
    points: &'a [[f64; 2]],
    x0: f64,
    y0: f64,
    cell: f64,
    ncx: usize,
    ncy: usize,
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> PointGrid<'a> {
    pub(crate) fn new(points: &'a [[f64; 2]], w: &Window, cell: f64) -> Self {
        let cell = cell.max(w.width().max(w.height()) / 2048.0);
        let ncx = ((w.width() / cell).ceil() as usize).max(1);
        let ncy = ((w.height() / cell).ceil() as usize).max(1);
        let idx = |p: &[f64; 2]| {
            let cx = (((p[0] - w.x_min) / cell).max(0.0) as usize).min(ncx - 1);
            let cy = (((p[1] - w.y_min) / cell).max(0.0) as usize).min(ncy - 1);
            cy * ncx + cx
        };
        let mut counts = vec![0usize; ncx * ncy + 1];
        for p in points {
            counts[idx(p) + 1] += 1;
        }
        for c in 1..counts.len() {
            counts[c] += counts[c - 1];
        }
        let mut fill = counts.clone();
        let mut order = vec![0usize; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = idx(p);
            order[fill[c]] = i;
            fill[c] += 1;
        }
        PointGrid {
            points,
            x0: w.x_min,
            y0: w.y_min,
            cell,
            ncx,
            ncy,
            starts: counts,
            order,
        }
    }

    fn coords(&self, p: [f64; 2]) -> (i64, i64) {
        (
            ((p[0] - self.x0) / self.cell).floor() as i64,
            ((p[1] - self.y0) / self.cell).floor() as i64,
        )
    }

    fn cell_points(&self, cx: i64, cy: i64) -> &[usize] {
        if cx < 0 || cy < 0 || cx >= self.ncx as i64 || cy >= self.ncy as i64 {
            return &[];
        }
        let c = cy as usize * self.ncx + cx as usize;
        &self.order[self.starts[c]..self.starts[c + 1]]
    }

    /// Calls `f(d)` for every indexed point within distance `r` of `p`.
    pub(crate) fn for_each_within(&self, p: [f64; 2], r: f64, mut f: impl FnMut(f64)) {
        let (cx, cy) = self.coords(p);
        let reach = (r / self.cell).ceil() as i64;
        let r2 = r * r;
        for y in cy - reach..=cy + reach {
            for x in cx - reach..=cx + reach {
                for &k in self.cell_points(x, y) {
                    let q = self.points[k];
                    let d2 = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
                    if d2 <= r2 {
                        f(d2.sqrt());
                    }
                }
            }
        }
    }

    /// Distance from `p` to the nearest indexed point.
    pub(crate) fn nearest(&self, p: [f64; 2]) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let (cx, cy) = self.coords(p);
        let max_ring = self.ncx.max(self.ncy) as i64 + 1;
        let mut best2 = f64::INFINITY;
        for k in 0..=max_ring {
            for y in cy - k..=cy + k {
                for x in cx - k..=cx + k {
                    if (y - cy).abs() != k && (x - cx).abs() != k {
                        continue;
                    }
                    for &i in self.cell_points(x, y) {
                        let q = self.points[i];
                        best2 = best2.min((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2));
                    }
                }
            }
            // every point in ring k + 1 or beyond is farther than k cells
            let reach = k as f64 * self.cell;
            if best2 <= reach * reach {
                break;
            }
        }
        Some(best2.sqrt())
    }
}

/// Globally corrected (Ohser-type) cross-K estimate
/// `K̂₁₂(r) = c(r) / (λ̂_Φ λ̂_Ψ) Σ_x Σ_y 𝕀(‖x − y‖ ≤ r)`.
pub fn cross_k(phi: &PointPattern, psi: &PointPattern, w: &Window, r_grid: &[f64]) -> Result<FunctionalStatistic> {
    check_grid(r_grid)?;
    if phi.is_empty() || psi.is_empty() {
        return Err(Error::StatisticUndefined("cross-K of an empty pattern".into()));
    }
    let counts = cross_pair_counts(&phi.points, &psi.points, w, r_grid);
    let area = w.area();
    let scale = area * area / (phi.len() as f64 * psi.len() as f64);
    let values = r_grid
        .iter()
        .zip(&counts)
        .map(|(&r, &c)| Ok(edge_factor_c(w, r)? * scale * c as f64))
        .collect::<Result<_>>()?;
    Ok(FunctionalStatistic {
        r: r_grid.to_vec(),
        values,
        estimator: Estimator::CrossK,
    })
}

/// `#{(x, y): ‖x − y‖ ≤ r}` for every `r` on the grid.
pub fn cross_pair_counts(a: &[[f64; 2]], b: &[[f64; 2]], w: &Window, r_grid: &[f64]) -> Vec<u64> {
    let r_max = *r_grid.last().expect("non-empty grid");
    let index = PointGrid::new(b, w, r_max);
    let mut hist = vec![0u64; r_grid.len()];
    for &p in a {
        index.for_each_within(p, r_max, |d| {
            let j = r_grid.partition_point(|&r| r < d);
            if j < hist.len() {
                hist[j] += 1;
            }
        });
    }
    for j in 1..hist.len() {
        hist[j] += hist[j - 1];
    }
    hist
}

/// Jump points `(r, Ĝ(r))` of a Kaplan–Meier product-limit curve.
#[derive(Debug, Clone, PartialEq)]
pub struct KmCurve {
    pub jumps: Vec<(f64, f64)>,
}

impl KmCurve {
    /// Product-limit estimate from observed times and event flags. Events
    /// are processed before censorings at tied times.
    pub fn from_observations(mut obs: Vec<(f64, bool)>) -> Self {
        obs.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        let mut at_risk = obs.len();
        let mut surv = 1.0;
        let mut jumps = Vec::new();
        let mut i = 0;
        while i < obs.len() {
            let t = obs[i].0;
            let mut events = 0;
            let mut total = 0;
            while i < obs.len() && obs[i].0 == t {
                if obs[i].1 {
                    events += 1;
                }
                total += 1;
                i += 1;
            }
            if events > 0 && at_risk > 0 {
                surv *= 1.0 - events as f64 / at_risk as f64;
                jumps.push((t, 1.0 - surv));
            }
            at_risk -= total;
        }
        KmCurve { jumps }
    }

    pub fn eval(&self, r: f64) -> f64 {
        let k = self.jumps.partition_point(|&(t, _)| t <= r);
        if k == 0 {
            0.0
        } else {
            self.jumps[k - 1].1
        }
    }

    /// `∫ r dĜ(r)` over `[0, r_max]`, with the mass Ĝ leaves above `r_max`
    /// placed at `r_max`.
    pub fn mean_up_to(&self, r_max: f64) -> (f64, f64) {
        let mut prev = 0.0;
        let mut sum = 0.0;
        for &(t, g) in &self.jumps {
            if t > r_max {
                break;
            }
            sum += t * (g - prev);
            prev = g;
        }
        let defect = (1.0 - prev).max(0.0);
        (sum + r_max * defect, defect)
    }
}

/// Border-censored observations `(min(d, b), d ≤ b)` for every Φ-point,
/// with `d` the distance to the nearest Ψ-point and `b` the distance to ∂W.
pub fn cross_nn_observations(phi: &PointPattern, psi: &PointPattern, w: &Window) -> Result<Vec<(f64, bool)>> {
    if phi.is_empty() || psi.is_empty() {
        return Err(Error::StatisticUndefined("nearest-neighbour distance with an empty pattern".into()));
    }
    let cell = (w.area() / psi.len() as f64 * 2.0).sqrt();
    let index = PointGrid::new(&psi.points, w, cell);
    Ok(phi
        .points
        .iter()
        .map(|&p| {
            let d = index.nearest(p).expect("non-empty");
            let b = w.border_distance(p).max(0.0);
            (d.min(b), d <= b)
        })
        .collect())
}

pub fn km_curve(phi: &PointPattern, psi: &PointPattern, w: &Window) -> Result<KmCurve> {
    Ok(KmCurve::from_observations(cross_nn_observations(phi, psi, w)?))
}

/// Kaplan–Meier estimate of the cross nearest-neighbour distance
/// distribution `G₁₂` on `r_grid`.
pub fn km_g12(phi: &PointPattern, psi: &PointPattern, w: &Window, r_grid: &[f64]) -> Result<FunctionalStatistic> {
    check_grid(r_grid)?;
    let km = km_curve(phi, psi, w)?;
    Ok(FunctionalStatistic {
        r: r_grid.to_vec(),
        values: r_grid.iter().map(|&r| km.eval(r)).collect(),
        estimator: Estimator::G12,
    })
}

/// Mean cross nearest-neighbour distance `∫ r Ĝ₁₂(dr)` up to the grid maximum.
pub fn mean_cross_nn(phi: &PointPattern, psi: &PointPattern, w: &Window, r_grid: &[f64]) -> Result<ScalarStatistic> {
    check_grid(r_grid)?;
    let km = km_curve(phi, psi, w)?;
    let r_max = *r_grid.last().expect("checked");
    let (value, defect) = km.mean_up_to(r_max);
    if defect > 0.0 {
        debug!("G12 leaves mass {defect:.3} above r = {r_max}; assigned to r_max");
    }
    Ok(ScalarStatistic {
        value,
        n: phi.len(),
        area: Some(w.area()),
    })
}
