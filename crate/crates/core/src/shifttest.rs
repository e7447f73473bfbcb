//! Random shift tests: builds the series `T₀…T_N` under the torus, minus or
//! variance-correction strategy and turns it into a Monte Carlo p-value
//! (rank test for scalars, extreme rank length envelope test for curves).

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussfield::{read_at, FieldRaster, SampleDesign};
use crate::geometry::{big_gamma, erode, intersect_shifted, ShiftLaw, ShiftVector, TorusShift, Window, MIN_INTERSECTION_FRACTION};
use crate::pattern::PointPattern;
use crate::rng::{derive_seed, derived_rng};
use crate::summaries::{
    cross_k, default_g_grid, default_k_grid, fit_exponential_variogram, mean_cross_nn, sample_covariance,
};
use crate::variance::{
    standardize_componentwise, var_count, var_kernel_componentwise, var_sample_covariance, KernelSpec, PairCorrelation,
    Theorem2Config, Theorem2Table, VarianceEstimate, VarianceMethod,
};

/// Smallest admissible number of shifts.
pub const MIN_SHIFTS: usize = 19;
pub const DEFAULT_SHIFTS: usize = 999;
/// Covariance models fitted for the plug-in variance are cut at this many
/// scale lengths.
pub const DEFAULT_COVARIANCE_TRUNCATION: f64 = 5.0;
pub const DEFAULT_MIN_EXPECTED_PAIRS: f64 = 10.0;
pub const VARIOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    Torus,
    Minus,
    VarCount,
    VarExact,
    VarKernel { bandwidth: f64 },
    VarTheorem2,
}

impl Strategy {
    pub fn is_variance(&self) -> bool {
        !matches!(self, Strategy::Torus | Strategy::Minus)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    /// Sample covariance of two fields at the sampling locations.
    Covariance,
    /// Cross-K function on an `r` grid.
    CrossK,
    /// Mean cross nearest-neighbour distance.
    #[serde(rename = "e_d12")]
    MeanNn,
}

impl StatisticKind {
    pub fn is_functional(&self) -> bool {
        matches!(self, StatisticKind::CrossK)
    }

    pub fn on_patterns(&self) -> bool {
        !matches!(self, StatisticKind::Covariance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    #[default]
    TwoSided,
    Greater,
    Less,
}

/// A named test method such as `RS_count`, `RS_K,ker(0.10)` or `RS_G,torus`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Method {
    pub statistic: StatisticKind,
    pub strategy: Strategy,
}

impl Method {
    pub fn new(statistic: StatisticKind, strategy: Strategy) -> Result<Self> {
        use Strategy::*;
        let ok = match statistic {
            StatisticKind::Covariance => !matches!(strategy, VarTheorem2),
            StatisticKind::CrossK => !matches!(strategy, VarCount | VarExact),
            StatisticKind::MeanNn => matches!(strategy, Torus | Minus | VarKernel { .. }),
        };
        if !ok {
            return Err(Error::Config(format!(
                "strategy {strategy:?} is not available for the {statistic:?} statistic"
            )));
        }
        Ok(Method { statistic, strategy })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.statistic {
            StatisticKind::Covariance => "",
            StatisticKind::CrossK => "K,",
            StatisticKind::MeanNn => "G,",
        };
        let tail = match self.strategy {
            Strategy::Torus => "torus".to_string(),
            Strategy::Minus => "minus".to_string(),
            Strategy::VarCount => "count".to_string(),
            Strategy::VarExact | Strategy::VarTheorem2 => "var".to_string(),
            Strategy::VarKernel { bandwidth } => format!("ker({bandwidth:.2})"),
        };
        write!(f, "RS_{prefix}{tail}")
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown method `{s}`"));
        let body = s.trim();
        let body = body
            .strip_prefix("RS_")
            .or_else(|| body.strip_prefix("rs_"))
            .ok_or_else(bad)?;
        let (statistic, tail) = if let Some(t) = body.strip_prefix("K,").or_else(|| body.strip_prefix("k,")) {
            (StatisticKind::CrossK, t)
        } else if let Some(t) = body.strip_prefix("G,").or_else(|| body.strip_prefix("g,")) {
            (StatisticKind::MeanNn, t)
        } else {
            (StatisticKind::Covariance, body)
        };
        let tail = tail.trim().to_ascii_lowercase();
        let strategy = match tail.as_str() {
            "torus" => Strategy::Torus,
            "minus" => Strategy::Minus,
            "count" => Strategy::VarCount,
            "var" if statistic == StatisticKind::CrossK => Strategy::VarTheorem2,
            "var" => Strategy::VarExact,
            t if t.starts_with("ker(") && t.ends_with(')') => {
                let bandwidth: f64 = t[4..t.len() - 1].trim().parse().map_err(|_| bad())?;
                KernelSpec::epanechnikov(bandwidth)?;
                Strategy::VarKernel { bandwidth }
            }
            _ => return Err(bad()),
        };
        Method::new(statistic, strategy)
    }
}

fn default_shifts() -> usize {
    DEFAULT_SHIFTS
}
fn default_redraws() -> usize {
    100
}
fn default_alpha() -> f64 {
    0.05
}
fn default_truncation() -> f64 {
    DEFAULT_COVARIANCE_TRUNCATION
}
fn default_min_pairs() -> f64 {
    DEFAULT_MIN_EXPECTED_PAIRS
}
fn default_table_nodes() -> usize {
    6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub statistic: StatisticKind,
    #[serde(rename = "N", default = "default_shifts")]
    pub n_shifts: usize,
    pub shift_law: ShiftLaw,
    /// Erosion margins `(x, y)` of the minus strategy.
    #[serde(default)]
    pub margins: Option<[f64; 2]>,
    #[serde(default)]
    pub alternative: Alternative,
    /// Argument grid for functional statistics; the last value is also the
    /// integration limit of the mean nearest-neighbour distance.
    #[serde(default)]
    pub r_grid: Option<Vec<f64>>,
    /// Pair-correlation functions of Φ and Ψ for the second-order variance.
    #[serde(default)]
    pub pair_correlation: Option<[PairCorrelation; 2]>,
    #[serde(default)]
    pub theorem2: Theorem2Config,
    #[serde(default = "default_table_nodes")]
    pub table_nodes: usize,
    #[serde(default = "default_redraws")]
    pub max_redraws: usize,
    /// Level of the reported global envelope.
    #[serde(default = "default_alpha")]
    pub envelope_alpha: f64,
    #[serde(default = "default_truncation")]
    pub covariance_truncation: f64,
    /// Second-order variance only: components of `K` where some entry
    /// expects fewer cross pairs than this are left out of the test, since
    /// the standardized ratio is far from normal there.
    #[serde(default = "default_min_pairs")]
    pub min_expected_pairs: f64,
}

impl StrategyConfig {
    /// Default configuration of a named method on `w`: shifts uniform on the
    /// disk of radius half the shorter side, except for the minus strategy,
    /// which erodes by a third of each side and shifts uniformly on the
    /// matching rectangle.
    pub fn for_method(method: Method, w: &Window) -> Self {
        let (shift_law, margins) = if method.strategy == Strategy::Minus {
            let (mx, my) = (w.width() / 3.0, w.height() / 3.0);
            (ShiftLaw::Rect { half_x: mx, half_y: my }, Some([mx, my]))
        } else {
            (
                ShiftLaw::Disk {
                    radius: 0.5 * w.min_side(),
                },
                None,
            )
        };
        StrategyConfig {
            strategy: method.strategy,
            statistic: method.statistic,
            n_shifts: DEFAULT_SHIFTS,
            shift_law,
            margins,
            alternative: Alternative::TwoSided,
            r_grid: None,
            pair_correlation: None,
            theorem2: Theorem2Config::default(),
            table_nodes: default_table_nodes(),
            max_redraws: default_redraws(),
            envelope_alpha: default_alpha(),
            covariance_truncation: DEFAULT_COVARIANCE_TRUNCATION,
            min_expected_pairs: DEFAULT_MIN_EXPECTED_PAIRS,
        }
    }

    pub fn method(&self) -> Result<Method> {
        Method::new(self.statistic, self.strategy)
    }

    pub fn with_shifts(mut self, n: usize) -> Self {
        self.n_shifts = n;
        self
    }

    pub fn validate(&self, w: &Window) -> Result<()> {
        self.method()?;
        if self.n_shifts < MIN_SHIFTS {
            return Err(Error::Config(format!("N = {} is below {MIN_SHIFTS}", self.n_shifts)));
        }
        let (ex, ey) = self.shift_law.extent();
        if !(ex > 0.0 && ey > 0.0 && ex.is_finite() && ey.is_finite()) {
            return Err(Error::Config("shift law must have a positive, finite extent".into()));
        }
        if self.strategy == Strategy::Minus {
            let [mx, my] = self
                .margins
                .ok_or_else(|| Error::Config("minus strategy requires erosion margins".into()))?;
            erode(w, mx, my)?;
            if ex > mx + 1e-12 || ey > my + 1e-12 {
                return Err(Error::Config(format!(
                    "shift extent ({ex}, {ey}) exceeds the erosion margins ({mx}, {my})"
                )));
            }
        }
        if let Strategy::VarKernel { bandwidth } = self.strategy {
            KernelSpec::epanechnikov(bandwidth)?;
        }
        if self.strategy == Strategy::VarTheorem2 && self.pair_correlation.is_none() {
            return Err(Error::Config("second-order variance requires pair-correlation functions".into()));
        }
        if let Some(r) = &self.r_grid {
            if r.is_empty() || !(r[0] > 0.0) || r.windows(2).any(|p| !(p[1] > p[0])) {
                return Err(Error::Config("r_grid must be positive and strictly increasing".into()));
            }
        }
        if !(self.envelope_alpha > 0.0 && self.envelope_alpha < 1.0) {
            return Err(Error::Config("envelope_alpha must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn grid(&self, w: &Window) -> Vec<f64> {
        match (&self.r_grid, self.statistic) {
            (Some(r), _) => r.clone(),
            (None, StatisticKind::MeanNn) => default_g_grid(w),
            (None, _) => default_k_grid(w),
        }
    }
}

/// The two components under test.
#[derive(Debug, Clone, PartialEq)]
pub enum TestData {
    /// Φ observed at the design locations, Ψ available as a full raster.
    Fields {
        design: SampleDesign,
        phi: Vec<f64>,
        psi: FieldRaster,
    },
    Patterns { phi: PointPattern, psi: PointPattern },
}

impl TestData {
    pub fn fields(design: SampleDesign, phi: Vec<f64>, psi: FieldRaster) -> Result<Self> {
        if phi.len() != design.locations.len() {
            return Err(Error::param("phi", "one value per sampling location is required"));
        }
        if psi.window != design.window {
            return Err(Error::UnsupportedGeometry("field raster and design windows differ".into()));
        }
        Ok(TestData::Fields { design, phi, psi })
    }

    pub fn patterns(phi: PointPattern, psi: PointPattern) -> Result<Self> {
        if phi.window != psi.window {
            return Err(Error::UnsupportedGeometry("patterns are observed in different windows".into()));
        }
        Ok(TestData::Patterns { phi, psi })
    }

    pub fn window(&self) -> Window {
        match self {
            TestData::Fields { design, .. } => design.window,
            TestData::Patterns { phi, .. } => phi.window,
        }
    }
}

/// One entry `T_i` of the series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesEntry {
    pub value: Vec<f64>,
    pub shift: ShiftVector,
    pub window: Window,
    /// Sampling locations, or Φ-points, the entry is computed from.
    pub n: usize,
    /// Ψ-points (equal to `n` for fields).
    pub n_psi: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestStatisticSeries {
    pub statistic: StatisticKind,
    /// Argument grid of functional statistics.
    pub r: Option<Vec<f64>>,
    pub entries: Vec<SeriesEntry>,
    pub standardized: Option<Vec<Vec<f64>>>,
    pub n_redraws: usize,
}

impl TestStatisticSeries {
    pub fn values(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn shifts(&self) -> Vec<ShiftVector> {
        self.entries.iter().map(|e| e.shift).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub r: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub observed: Vec<f64>,
    pub alpha: f64,
}

impl Envelope {
    /// Whether the observed curve stays within `[lo, hi]` at every `r`.
    pub fn contains_observed(&self) -> bool {
        self.observed
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(o, (l, h))| o >= l && o <= h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub p_value: f64,
    pub strategy: String,
    pub statistic: StatisticKind,
    #[serde(rename = "N")]
    pub n_shifts: usize,
    pub seed: u64,
    pub n_redraws: usize,
    pub envelope: Option<Envelope>,
    #[serde(default)]
    pub variance_method: Option<VarianceMethod>,
}

/// State shared by every test run with one configuration on one window.
#[derive(Debug, Clone, Default)]
pub struct Prepared {
    pub theorem2: Option<Arc<Theorem2Table>>,
}

/// Builds whatever a configuration needs ahead of the shift loop: the
/// tabulated second-order integrals for the cross-K variance.
pub fn prepare(cfg: &StrategyConfig, w: &Window, seed: u64) -> Result<Prepared> {
    cfg.validate(w)?;
    if cfg.strategy != Strategy::VarTheorem2 {
        return Ok(Prepared::default());
    }
    let [g1, g2] = cfg.pair_correlation.expect("validated");
    let table = Theorem2Table::for_shift_extent(
        g1,
        g2,
        w,
        cfg.shift_law.extent(),
        cfg.table_nodes,
        &cfg.grid(w),
        &cfg.theorem2,
        derive_seed(seed, &[u64::MAX]),
    )?;
    Ok(Prepared {
        theorem2: Some(Arc::new(table)),
    })
}

/// Where shifted data are compared.
#[derive(Clone, Copy)]
enum Domain {
    Torus,
    Fixed(Window),
    Intersection,
}

fn is_redrawable(e: &Error) -> bool {
    matches!(e, Error::StatisticUndefined(_) | Error::EmptyIntersection { .. })
}

/// Nearest-cell lookup that tolerates rounding just outside the window.
fn lookup(raster: &FieldRaster, p: [f64; 2], index: usize) -> Result<f64> {
    if let Some(v) = raster.value_at(p) {
        return Ok(v);
    }
    let w = &raster.window;
    let tol = 1e-9 * w.diameter();
    let q = [
        p[0].clamp(w.x_min, w.x_max),
        p[1].clamp(w.y_min, w.y_max),
    ];
    if (q[0] - p[0]).abs() <= tol && (q[1] - p[1]).abs() <= tol {
        if let Some(v) = raster.value_at(q) {
            return Ok(v);
        }
    }
    Err(Error::Lookup { index, x: p[0], y: p[1] })
}

fn evaluate(
    data: &TestData,
    cfg: &StrategyConfig,
    r: &[f64],
    domain: Domain,
    v: ShiftVector,
    index: usize,
) -> Result<SeriesEntry> {
    let w = data.window();
    let window = match domain {
        Domain::Torus => w,
        Domain::Fixed(wc) => wc,
        Domain::Intersection => {
            let d = intersect_shifted(&w, v, index)?;
            if d.area < MIN_INTERSECTION_FRACTION * w.area() {
                return Err(Error::EmptyIntersection { index });
            }
            d.window
        }
    };
    match data {
        TestData::Fields { design, phi, psi } => {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (k, &x) in design.locations.iter().enumerate() {
                let back = v.neg().apply(x);
                match domain {
                    Domain::Torus => {
                        a.push(phi[k]);
                        b.push(lookup(psi, w.wrap(back), k)?);
                    }
                    _ if window.contains(x) => {
                        a.push(phi[k]);
                        b.push(lookup(psi, back, k)?);
                    }
                    _ => {}
                }
            }
            let s = sample_covariance(&a, &b)?;
            Ok(SeriesEntry {
                value: vec![s.value],
                shift: v,
                window,
                n: a.len(),
                n_psi: b.len(),
            })
        }
        TestData::Patterns { phi, psi } => {
            let (x, y) = match domain {
                Domain::Torus => (phi.clone(), psi.torus_shift(v, &w)?),
                _ => (phi.restrict(&window), psi.shifted_into(v, &window)),
            };
            let value = match cfg.statistic {
                StatisticKind::CrossK => cross_k(&x, &y, &window, r)?.values,
                StatisticKind::MeanNn => vec![mean_cross_nn(&x, &y, &window, r)?.value],
                StatisticKind::Covariance => unreachable!("validated"),
            };
            Ok(SeriesEntry {
                value,
                shift: v,
                window,
                n: x.len(),
                n_psi: y.len(),
            })
        }
    }
}

fn check_kind(data: &TestData, cfg: &StrategyConfig) -> Result<()> {
    let patterns = matches!(data, TestData::Patterns { .. });
    if patterns != cfg.statistic.on_patterns() {
        return Err(Error::Config(format!(
            "the {:?} statistic cannot be computed from {}",
            cfg.statistic,
            if patterns { "point patterns" } else { "fields" }
        )));
    }
    Ok(())
}

fn run_series(data: &TestData, cfg: &StrategyConfig, domain: Domain, seed: u64) -> Result<TestStatisticSeries> {
    let w = data.window();
    cfg.validate(&w)?;
    check_kind(data, cfg)?;
    let r = cfg.grid(&w);
    let first = evaluate(data, cfg, &r, domain, ShiftVector::ORIGIN, 0)?;
    let rest: Vec<(SeriesEntry, usize)> = (1..=cfg.n_shifts)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(seed, &[i as u64]);
            let mut redraws = 0;
            loop {
                let v = cfg.shift_law.draw(&mut rng)?;
                match evaluate(data, cfg, &r, domain, v, i) {
                    Ok(e) => return Ok((e, redraws)),
                    Err(e) if is_redrawable(&e) => {
                        redraws += 1;
                        if redraws > cfg.max_redraws {
                            return Err(Error::TooManyRedraws { index: i, redraws });
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
        })
        .collect::<Result<_>>()?;
    let n_redraws = rest.iter().map(|(_, k)| k).sum();
    let mut entries = Vec::with_capacity(cfg.n_shifts + 1);
    entries.push(first);
    entries.extend(rest.into_iter().map(|(e, _)| e));
    Ok(TestStatisticSeries {
        statistic: cfg.statistic,
        r: cfg.statistic.is_functional().then_some(r),
        entries,
        standardized: None,
        n_redraws,
    })
}

/// Series under the torus strategy: Ψ translated with wrap-around, every
/// entry on the full window.
pub fn run_torus(data: &TestData, cfg: &StrategyConfig, seed: u64) -> Result<TestStatisticSeries> {
    run_series(data, cfg, Domain::Torus, seed)
}

/// Series under the minus strategy: every entry on the eroded window, Ψ
/// read without wrap-around.
pub fn run_minus(data: &TestData, cfg: &StrategyConfig, seed: u64) -> Result<TestStatisticSeries> {
    let [mx, my] = cfg
        .margins
        .ok_or_else(|| Error::Config("minus strategy requires erosion margins".into()))?;
    let wc = erode(&data.window(), mx, my)?;
    run_series(data, cfg, Domain::Fixed(wc), seed)
}

/// Series under variance correction: entries on `W ∩ (W + v_i)`,
/// standardized with the configured variance estimate.
pub fn run_variance(
    data: &TestData,
    cfg: &StrategyConfig,
    prepared: &Prepared,
    seed: u64,
) -> Result<TestStatisticSeries> {
    let mut series = run_series(data, cfg, Domain::Intersection, seed)?;
    let mut est = variance_estimate(data, cfg, prepared, &series)?;
    let sparse = sparse_components(cfg, &series);
    for v in &mut est.values {
        for (x, &skip) in v.iter_mut().zip(&sparse) {
            if skip {
                *x = 1.0;
            }
        }
    }
    let mut z = standardize_componentwise(&series.values(), &est)?;
    for row in &mut z {
        for (x, &skip) in row.iter_mut().zip(&sparse) {
            if skip {
                *x = 0.0;
            }
        }
    }
    series.standardized = Some(z);
    Ok(series)
}

/// Components of a second-order-standardized `K` series where the plug-in
/// expected cross-pair count `λ̂₁λ̂₂Γ_{W_i}(r)` drops below the threshold in
/// some entry.
fn sparse_components(cfg: &StrategyConfig, series: &TestStatisticSeries) -> Vec<bool> {
    let Some(r) = series.r.as_ref().filter(|_| cfg.strategy == Strategy::VarTheorem2) else {
        return vec![false; series.r.as_ref().map_or(1, Vec::len)];
    };
    r.iter()
        .map(|&r| {
            series.entries.iter().any(|e| {
                let a = e.window.area();
                e.n as f64 * e.n_psi as f64 * big_gamma(&e.window, r) / (a * a) < cfg.min_expected_pairs
            })
        })
        .collect()
}

fn variance_estimate(
    data: &TestData,
    cfg: &StrategyConfig,
    prepared: &Prepared,
    series: &TestStatisticSeries,
) -> Result<VarianceEstimate> {
    match cfg.strategy {
        Strategy::VarCount => var_count(&series.counts()),
        Strategy::VarKernel { bandwidth } => {
            var_kernel_componentwise(&series.values(), &series.shifts(), &KernelSpec::epanechnikov(bandwidth)?)
        }
        Strategy::VarExact => {
            let TestData::Fields { design, phi, psi } = data else {
                return Err(Error::Config("plug-in variance applies to fields only".into()));
            };
            let w = design.window;
            let max_lag = 0.5 * w.width().max(w.height());
            let psi_at_x = read_at(psi, &design.locations)?;
            let fit_phi = fit_exponential_variogram(&design.locations, phi, max_lag, VARIOGRAM_BINS)?;
            let fit_psi = fit_exponential_variogram(&design.locations, &psi_at_x, max_lag, VARIOGRAM_BINS)?;
            let c_phi = fit_phi.covariance().truncated(cfg.covariance_truncation);
            let c_psi = fit_psi.covariance().truncated(cfg.covariance_truncation);
            let values = series
                .entries
                .par_iter()
                .map(|e| {
                    let locs: Vec<[f64; 2]> =
                        design.locations.iter().copied().filter(|&x| e.window.contains(x)).collect();
                    var_sample_covariance(&locs, &c_phi, &c_psi)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(VarianceEstimate::scalar(VarianceMethod::Exact, values))
        }
        Strategy::VarTheorem2 => {
            let table = prepared
                .theorem2
                .as_ref()
                .ok_or_else(|| Error::Config("second-order table was not prepared".into()))?;
            let values = series
                .entries
                .par_iter()
                .map(|e| table.cross_k_variance(&e.window, e.n, e.n_psi))
                .collect::<Result<Vec<_>>>()?;
            Ok(VarianceEstimate {
                method: VarianceMethod::Theorem2,
                values,
            })
        }
        Strategy::Torus | Strategy::Minus => Err(Error::Config("no variance estimate for this strategy".into())),
    }
}

/// Monte Carlo rank p-value of a scalar series, entry 0 being observed.
/// Ties count as exceedances.
pub fn mc_pvalue_scalar(values: &[f64], alternative: Alternative) -> f64 {
    let n = values.len() as f64;
    let s0 = values[0];
    let above = values[1..].iter().filter(|&&s| s >= s0).count() as f64;
    let below = values[1..].iter().filter(|&&s| s <= s0).count() as f64;
    let (p_hi, p_lo) = ((1.0 + above) / n, (1.0 + below) / n);
    match alternative {
        Alternative::Greater => p_hi,
        Alternative::Less => p_lo,
        Alternative::TwoSided => (2.0 * p_hi.min(p_lo)).min(1.0),
    }
}

/// Two-sided pointwise extreme ranks, sorted ascending per curve.
fn erl_vectors(curves: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = curves.len();
    let k = curves[0].len();
    let mut ranks = vec![Vec::with_capacity(k); m];
    let mut order: Vec<usize> = (0..m).collect();
    #[allow(clippy::needless_range_loop)]
    for j in 0..k {
        order.sort_by(|&a, &b| curves[a][j].total_cmp(&curves[b][j]));
        let mut start = 0;
        while start < m {
            let mut end = start;
            while end + 1 < m && curves[order[end + 1]][j] == curves[order[start]][j] {
                end += 1;
            }
            // midrank of the tie block, 1-based
            let up = (start + end) as f64 / 2.0 + 1.0;
            let extreme = up.min(m as f64 + 1.0 - up);
            for &i in &order[start..=end] {
                ranks[i].push(extreme);
            }
            start = end + 1;
        }
    }
    for r in &mut ranks {
        r.sort_by(f64::total_cmp);
    }
    ranks
}

fn lex(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Global envelope test with the extreme rank length ordering.
///
/// Returns the p-value of curve 0 and the `1 − alpha` global envelope: the
/// pointwise range of all curves whose own ERL p-value exceeds `alpha`.
pub fn global_envelope_erl(curves: &[Vec<f64>], r: &[f64], alpha: f64) -> Result<(f64, Envelope)> {
    if curves.len() < 2 {
        return Err(Error::param("curves", "need the observed curve and at least one shifted curve"));
    }
    let k = r.len();
    if k == 0 || curves.iter().any(|c| c.len() != k) {
        return Err(Error::GridMismatch);
    }
    let m = curves.len();
    let e = erl_vectors(curves);
    let p0 = (1 + (1..m).filter(|&i| lex(&e[i], &e[0]) != Ordering::Greater).count()) as f64 / m as f64;

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| lex(&e[a], &e[b]));
    // p_j = #{i : e_i ⪯ e_j} / m, equal for lexicographic ties
    let mut p = vec![0.0; m];
    let mut start = 0;
    while start < m {
        let mut end = start;
        while end + 1 < m && lex(&e[order[end + 1]], &e[order[start]]) == Ordering::Equal {
            end += 1;
        }
        for &i in &order[start..=end] {
            p[i] = (end + 1) as f64 / m as f64;
        }
        start = end + 1;
    }
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    for (i, c) in curves.iter().enumerate() {
        if p[i] > alpha {
            for j in 0..k {
                lo[j] = lo[j].min(c[j]);
                hi[j] = hi[j].max(c[j]);
            }
        }
    }
    if lo[0].is_infinite() {
        lo = curves[0].clone();
        hi = curves[0].clone();
    }
    Ok((
        p0,
        Envelope {
            r: r.to_vec(),
            lo,
            hi,
            observed: curves[0].clone(),
            alpha,
        },
    ))
}

/// p-value of a finished series: rank test for scalars, ERL test for curves.
pub fn pvalue_of(series: &TestStatisticSeries, cfg: &StrategyConfig) -> Result<(f64, Option<Envelope>)> {
    let curves = series.standardized.clone().unwrap_or_else(|| series.values());
    match &series.r {
        Some(r) => {
            let (p, env) = global_envelope_erl(&curves, r, cfg.envelope_alpha)?;
            Ok((p, Some(env)))
        }
        None => {
            let s: Vec<f64> = curves.iter().map(|c| c[0]).collect();
            Ok((mc_pvalue_scalar(&s, cfg.alternative), None))
        }
    }
}

/// Runs one configured test with precomputed shared state.
pub fn run_test_prepared(data: &TestData, cfg: &StrategyConfig, prepared: &Prepared, seed: u64) -> Result<TestResult> {
    let series = match cfg.strategy {
        Strategy::Torus => run_torus(data, cfg, seed)?,
        Strategy::Minus => run_minus(data, cfg, seed)?,
        _ => run_variance(data, cfg, prepared, seed)?,
    };
    let (p_value, envelope) = pvalue_of(&series, cfg)?;
    let variance_method = match cfg.strategy {
        Strategy::VarCount => Some(VarianceMethod::Count),
        Strategy::VarExact => Some(VarianceMethod::Exact),
        Strategy::VarKernel { .. } => Some(VarianceMethod::Kernel),
        Strategy::VarTheorem2 => Some(VarianceMethod::Theorem2),
        _ => None,
    };
    Ok(TestResult {
        p_value,
        strategy: cfg.method()?.to_string(),
        statistic: cfg.statistic,
        n_shifts: cfg.n_shifts,
        seed,
        n_redraws: series.n_redraws,
        envelope,
        variance_method,
    })
}

/// Runs one configured test; deterministic in `seed` for any thread count.
pub fn run_test(data: &TestData, cfg: &StrategyConfig, seed: u64) -> Result<TestResult> {
    let prepared = prepare(cfg, &data.window(), seed)?;
    run_test_prepared(data, cfg, &prepared, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussfield::{draw_binomial_design, simulate_grf, CovarianceModel, DesignKind, GridDims};
    use crate::pointsim::sim_poisson;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn field_data(seed: u64, scale: f64) -> TestData {
        let w = Window::unit();
        let mut rng = rng_from_seed(seed);
        let model = CovarianceModel::exponential(1.0, scale).unwrap();
        let (a, b) = crate::gaussfield::GrfSimulator::new(model, w, GridDims::square(64))
            .unwrap()
            .sample_pair(&mut rng);
        let design = draw_binomial_design(100, &w, &mut rng).unwrap();
        let phi = crate::gaussfield::read_field(&a, &design).unwrap();
        TestData::fields(design, phi, b).unwrap()
    }

    fn pattern_data(seed: u64) -> TestData {
        let w = Window::unit();
        let mut rng = rng_from_seed(seed);
        TestData::patterns(
            sim_poisson(150.0, &w, &mut rng).unwrap(),
            sim_poisson(150.0, &w, &mut rng).unwrap(),
        )
        .unwrap()
    }

    fn cfg(name: &str, n: usize) -> StrategyConfig {
        StrategyConfig::for_method(name.parse().unwrap(), &Window::unit()).with_shifts(n)
    }

    #[test]
    fn method_names_round_trip() {
        for name in [
            "RS_torus",
            "RS_minus",
            "RS_count",
            "RS_var",
            "RS_ker(0.05)",
            "RS_K,torus",
            "RS_K,minus",
            "RS_K,ker(0.10)",
            "RS_K,var",
            "RS_G,torus",
            "RS_G,minus",
            "RS_G,ker(0.15)",
        ] {
            let m: Method = name.parse().unwrap();
            assert_eq!(m.to_string(), name);
        }
        assert_eq!("RS_K,var".parse::<Method>().unwrap().strategy, super::Strategy::VarTheorem2);
        for bad in ["RS_G,count", "RS_K,count", "RS_G,var", "torus", "RS_ker(0)", "RS_spin"] {
            assert!(bad.parse::<Method>().is_err(), "{bad}");
        }
    }

    #[test]
    fn scalar_pvalue_examples() {
        let mut v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        v[0] = 5000.0;
        assert!((mc_pvalue_scalar(&v, Alternative::TwoSided) - 0.002).abs() < 1e-15);
        assert!((mc_pvalue_scalar(&v, Alternative::Greater) - 0.001).abs() < 1e-15);
        let med: Vec<f64> = std::iter::once(500.0).chain((1..1000).map(|i| i as f64)).collect();
        assert_eq!(mc_pvalue_scalar(&med, Alternative::TwoSided), 1.0);
        assert_eq!(mc_pvalue_scalar(&[2.0; 100], Alternative::TwoSided), 1.0);
    }

    #[test]
    fn erl_extreme_curve() {
        let mut curves: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64, (i * 7 % 100) as f64, 0.5]).collect();
        curves[0] = vec![1000.0, 1000.0, 1000.0];
        let (p, env) = global_envelope_erl(&curves, &[1.0, 2.0, 3.0], 0.05).unwrap();
        assert!((p - 0.01).abs() < 1e-15);
        assert!(!env.contains_observed());
    }

    #[test]
    fn erl_with_one_component_matches_rank_test() {
        let mut rng = rng_from_seed(3);
        use rand_distr::{Distribution, StandardNormal};
        for _ in 0..50 {
            let v: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
            let curves: Vec<Vec<f64>> = v.iter().map(|&x| vec![x]).collect();
            let (p, _) = global_envelope_erl(&curves, &[1.0], 0.05).unwrap();
            let q = mc_pvalue_scalar(&v, Alternative::TwoSided);
            assert!((p - q).abs() <= 2.0 / 200.0 + 1e-12, "{p} {q}");
        }
    }

    #[test]
    fn erl_tie_counts_against_null() {
        let mut curves: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, i as f64]).collect();
        curves[0] = curves[7].clone();
        let (p, _) = global_envelope_erl(&curves, &[1.0, 2.0], 0.05).unwrap();
        let mut other = curves.clone();
        other.swap(0, 7);
        let (q, _) = global_envelope_erl(&other, &[1.0, 2.0], 0.05).unwrap();
        assert_eq!(p, q);
        assert!(global_envelope_erl(&curves, &[1.0], 0.05).is_err());
    }

    #[test]
    fn constant_psi_gives_zero_covariances() {
        let w = Window::unit();
        let mut rng = rng_from_seed(1);
        let design = draw_binomial_design(50, &w, &mut rng).unwrap();
        let phi: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let psi = FieldRaster::new(w, 8, 8, vec![3.0; 64]).unwrap();
        let data = TestData::fields(design, phi, psi).unwrap();
        let s = run_torus(&data, &cfg("RS_torus", 19), 5).unwrap();
        assert!(s.entries.iter().all(|e| e.value[0] == 0.0));
        assert_eq!(s.entries.len(), 20);
    }

    #[test]
    fn zero_shift_reproduces_observed_entry() {
        let data = field_data(2, 0.1);
        let c = cfg("RS_minus", 19);
        let wc = erode(&Window::unit(), 1.0 / 3.0, 1.0 / 3.0).unwrap();
        let s = run_minus(&data, &c, 1).unwrap();
        let again = evaluate(&data, &c, &[], Domain::Fixed(wc), ShiftVector::ORIGIN, 0).unwrap();
        assert_eq!(s.entries[0], again);
        let TestData::Fields { design, .. } = &data else { unreachable!() };
        let inside = design.locations.iter().filter(|&&x| wc.contains(x)).count();
        assert!(s.entries.iter().all(|e| e.n == inside));
    }

    #[test]
    fn variance_entry_zero_uses_full_window() {
        let data = pattern_data(4);
        let s = run_variance(&data, &cfg("RS_G,ker(0.10)", 49), &Prepared::default(), 2).unwrap();
        let TestData::Patterns { phi, .. } = &data else { unreachable!() };
        assert_eq!(s.entries[0].window, Window::unit());
        assert_eq!(s.entries[0].n, phi.len());
        assert!(s.entries[1..].iter().all(|e| e.window.area() < 1.0));
    }

    #[test]
    fn count_standardization_is_scaled_centering() {
        let data = field_data(5, 0.2);
        let s = run_variance(&data, &cfg("RS_count", 29), &Prepared::default(), 3).unwrap();
        let st = s.standardized.as_ref().unwrap();
        let mean = s.entries.iter().map(|e| e.value[0]).sum::<f64>() / 30.0;
        for (e, z) in s.entries.iter().zip(st) {
            assert!(((e.value[0] - mean) * (e.n as f64).sqrt() - z[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_shifts_approach_centering() {
        let data = field_data(6, 0.2);
        let mut c = cfg("RS_count", 29);
        c.shift_law = ShiftLaw::Disk { radius: 1e-9 };
        let s = run_variance(&data, &c, &Prepared::default(), 3).unwrap();
        assert!(s.entries.iter().all(|e| e.n == 100));
    }

    #[test]
    fn self_test_is_extreme() {
        let w = Window::unit();
        let mut rng = rng_from_seed(8);
        let raster = simulate_grf(CovarianceModel::exponential(1.0, 0.1).unwrap(), &w, GridDims::square(64), &mut rng).unwrap();
        let design = draw_binomial_design(100, &w, &mut rng).unwrap();
        let phi = crate::gaussfield::read_field(&raster, &design).unwrap();
        let data = TestData::fields(design, phi, raster).unwrap();
        let mut c = cfg("RS_count", 99);
        c.alternative = Alternative::Greater;
        let res = run_test(&data, &c, 1).unwrap();
        assert!(res.p_value <= 3.0 / 100.0, "{}", res.p_value);
    }

    #[test]
    fn minus_rejects_incompatible_margins() {
        let mut c = cfg("RS_minus", 19);
        c.margins = Some([0.2, 0.2]);
        assert!(c.validate(&Window::unit()).is_err());
        c.margins = None;
        assert!(c.validate(&Window::unit()).is_err());
        assert!(cfg("RS_torus", 18).validate(&Window::unit()).is_err());
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        assert!(run_test(&pattern_data(1), &cfg("RS_torus", 19), 1).is_err());
        assert!(run_test(&field_data(1, 0.1), &cfg("RS_G,torus", 19), 1).is_err());
    }

    #[test]
    fn result_json_shape() {
        let res = run_test(&pattern_data(3), &cfg("RS_K,torus", 19), 11).unwrap();
        let v: serde_json::Value = serde_json::to_value(&res).unwrap();
        for key in ["p_value", "strategy", "statistic", "N", "seed", "n_redraws", "envelope"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["envelope"]["r"].as_array().unwrap().len(), 50);
        let back: TestResult = serde_json::from_value(v).unwrap();
        assert_eq!(back, res);
    }

    #[test]
    fn user_design_is_accepted() {
        let w = Window::unit();
        let locs: Vec<[f64; 2]> = (0..30).map(|i| [(i as f64 + 0.5) / 30.0, 0.5]).collect();
        let design = SampleDesign::new(w, locs, DesignKind::UserSupplied).unwrap();
        let psi = FieldRaster::new(w, 4, 4, (0..16).map(|i| i as f64).collect()).unwrap();
        let data = TestData::fields(design, vec![1.0; 30], psi).unwrap();
        assert!(run_test(&data, &cfg("RS_torus", 19), 1).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn same_seed_same_pvalue(seed in 0u64..1000) {
            let data = pattern_data(seed);
            let c = cfg("RS_G,torus", 39);
            prop_assert_eq!(run_test(&data, &c, seed).unwrap(), run_test(&data, &c, seed).unwrap());
        }

        #[test]
        fn pvalue_invariant_under_monotone_maps(v in prop::collection::vec(-5.0f64..5.0, 20..60), a in 0.1f64..3.0, b in -2.0f64..2.0) {
            let mapped: Vec<f64> = v.iter().map(|x| (a * x + b).exp()).collect();
            for alt in [Alternative::TwoSided, Alternative::Greater, Alternative::Less] {
                prop_assert_eq!(mc_pvalue_scalar(&v, alt), mc_pvalue_scalar(&mapped, alt));
            }
        }

        #[test]
        fn erl_pvalue_bounds(seed in 0u64..1000, k in 1usize..6) {
            use rand::Rng;
            let mut rng = rng_from_seed(seed);
            let curves: Vec<Vec<f64>> = (0..40).map(|_| (0..k).map(|_| rng.random_range(0..4) as f64).collect()).collect();
            let r: Vec<f64> = (1..=k).map(|j| j as f64).collect();
            let (p, env) = global_envelope_erl(&curves, &r, 0.05).unwrap();
            prop_assert!((1.0 / 40.0..=1.0).contains(&p));
            if p > 0.05 {
                prop_assert!(env.contains_observed());
            }
        }

        #[test]
        fn common_variance_rescaling_keeps_pvalue(seed in 0u64..200, f in 0.1f64..10.0) {
            let data = field_data(seed, 0.1);
            let c = cfg("RS_count", 29);
            let s = run_series(&data, &c, Domain::Intersection, seed).unwrap();
            let est = var_count(&s.counts()).unwrap();
            let scaled = VarianceEstimate { values: est.values.iter().map(|v| vec![v[0] * f]).collect(), ..est.clone() };
            let a: Vec<f64> = standardize_componentwise(&s.values(), &est).unwrap().iter().map(|v| v[0]).collect();
            let b: Vec<f64> = standardize_componentwise(&s.values(), &scaled).unwrap().iter().map(|v| v[0]).collect();
            prop_assert_eq!(mc_pvalue_scalar(&a, Alternative::TwoSided), mc_pvalue_scalar(&b, Alternative::TwoSided));
        }
    }
}
