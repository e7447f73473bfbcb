//! Rejection-rate experiments: a registry of data-generating models, the
//! replicate loop, and CSV/JSON tables with binomial intervals.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::gaussfield::{
    draw_binomial_design, power_pair_from, read_field, CovarianceModel, FieldRaster, GridDims, GrfSimulator,
    DEFAULT_GRID,
};
use crate::geometry::Window;
use crate::io::{write_atomic, write_json};
use crate::pattern::PointPattern;
use crate::pointsim::{
    jitter_copy, random_label_split, sim_cluster_hardcore, sim_poisson, sim_strauss, ClusterParams, LgcpParams,
    LgcpSimulator, StraussParams,
};
use crate::rng::{derive_seed, derived_rng, SimRng};
use crate::shifttest::{prepare, run_test_prepared, Alternative, Method, Prepared, StrategyConfig, TestData};
use crate::stats::{binomial_band, clopper_pearson};
use crate::variance::{PairCorrelation, Theorem2Config};

/// Data regenerations allowed per replicate when the observed statistic is
/// undefined.
pub const MAX_REGENERATIONS: usize = 10;
pub const DEFAULT_REPLICATIONS: usize = 300;
pub const DEFAULT_SHIFTS: usize = 499;
pub const MIN_REPLICATIONS: usize = 50;

const LGCP_MU: f64 = 4.5;
const LGCP_VARIANCE: f64 = 1.0;
const POISSON_INTENSITY: f64 = 150.0;
const JITTER_RADIUS: f64 = 0.1;
const RF_SAMPLE_SIZE: usize = 100;

/// Identifier of a registered data-generating model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelId {
    /// Two independent unit-variance exponential fields with scale `s`.
    RfNull { scale: f64 },
    /// `Φ = Z₁`, `Ψ = Z₁ + σZ₂`.
    RfPower { sigma: f64, scale: f64 },
    /// Independent point-process pairs S1…S6.
    S(u8),
    /// Dependent point-process pairs P1…P9.
    P(u8),
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelId::RfNull { scale } => write!(f, "RF-null(s={scale})"),
            ModelId::RfPower { sigma, scale } => write!(f, "RF-power(sigma={sigma},s={scale})"),
            ModelId::S(k) => write!(f, "S{k}"),
            ModelId::P(k) => write!(f, "P{k}"),
        }
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "unknown model `{s}`; valid models are RF-null(s=..), RF-power(sigma=..,s=..), S1-S6, P1-P9"
            ))
        };
        let t = s.trim();
        let args = |inner: &str| -> Result<BTreeMap<String, f64>> {
            inner
                .split(',')
                .map(|kv| {
                    let (k, v) = kv.split_once('=').ok_or_else(bad)?;
                    let v: f64 = v.trim().parse().map_err(|_| bad())?;
                    Ok((k.trim().to_ascii_lowercase(), v))
                })
                .collect()
        };
        let positive = |v: Option<&f64>| v.copied().filter(|x| *x > 0.0 && x.is_finite()).ok_or_else(bad);
        if let Some(inner) = t.strip_prefix("RF-null(").and_then(|r| r.strip_suffix(')')) {
            let a = args(inner)?;
            if a.len() != 1 {
                return Err(bad());
            }
            return Ok(ModelId::RfNull {
                scale: positive(a.get("s"))?,
            });
        }
        if let Some(inner) = t.strip_prefix("RF-power(").and_then(|r| r.strip_suffix(')')) {
            let a = args(inner)?;
            if a.len() != 2 {
                return Err(bad());
            }
            return Ok(ModelId::RfPower {
                sigma: positive(a.get("sigma"))?,
                scale: positive(a.get("s"))?,
            });
        }
        let (head, num) = t.split_at(t.len().min(1));
        let k: u8 = num.parse().map_err(|_| bad())?;
        match head {
            "S" if (1..=6).contains(&k) => Ok(ModelId::S(k)),
            "P" if (1..=9).contains(&k) => Ok(ModelId::P(k)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for ModelId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Scale parameters of the random-field rows.
pub const RF_NULL_SCALES: [f64; 6] = [0.001, 0.1, 0.2, 0.3, 0.4, 0.5];
pub const RF_POWER_SCALES: [f64; 3] = [0.001, 0.2, 0.5];
pub const RF_POWER_SIGMAS: [f64; 3] = [2.0, 4.0, 6.0];

impl ModelId {
    /// Every registered point-process model.
    pub fn point_process_models() -> Vec<ModelId> {
        (1..=6).map(ModelId::S).chain((1..=9).map(ModelId::P)).collect()
    }

    /// Every model appearing in the reproduced tables.
    pub fn registry() -> Vec<ModelId> {
        let mut v: Vec<ModelId> = RF_NULL_SCALES.iter().map(|&scale| ModelId::RfNull { scale }).collect();
        for &sigma in &RF_POWER_SIGMAS {
            for &scale in &RF_POWER_SCALES {
                v.push(ModelId::RfPower { sigma, scale });
            }
        }
        v.extend(Self::point_process_models());
        v
    }

    /// Whether the components are independent.
    pub fn is_null(&self) -> bool {
        matches!(self, ModelId::RfNull { .. } | ModelId::S(_))
    }

    pub fn is_field(&self) -> bool {
        matches!(self, ModelId::RfNull { .. } | ModelId::RfPower { .. })
    }

    pub fn scale(&self) -> Option<f64> {
        match *self {
            ModelId::RfNull { scale } | ModelId::RfPower { scale, .. } => Some(scale),
            ModelId::S(1) => Some(0.5),
            ModelId::S(2) | ModelId::P(1) | ModelId::P(3) => Some(0.3),
            ModelId::S(3) | ModelId::P(2) | ModelId::P(4) => Some(0.1),
            _ => None,
        }
    }

    pub fn sigma(&self) -> Option<f64> {
        match *self {
            ModelId::RfPower { sigma, .. } => Some(sigma),
            _ => None,
        }
    }

    /// Pair-correlation functions of Φ and Ψ when known in closed form. The
    /// jittered copies of LGCPs are given the LGCP function as an
    /// approximation.
    pub fn pair_correlation(&self) -> Option<[PairCorrelation; 2]> {
        match *self {
            ModelId::S(1..=3) | ModelId::P(1..=4) => {
                let g = PairCorrelation::Lgcp {
                    variance: LGCP_VARIANCE,
                    scale: self.scale().expect("lgcp"),
                };
                Some([g, g])
            }
            ModelId::S(4) | ModelId::P(5) => Some([PairCorrelation::Poisson; 2]),
            _ => None,
        }
    }

    pub fn window(&self) -> Window {
        Window::unit()
    }
}

/// A model with its simulators set up once.
pub struct ModelGenerator {
    pub id: ModelId,
    window: Window,
    kind: GenKind,
}

enum GenKind {
    Fields { sim: GrfSimulator, sigma: Option<f64> },
    LgcpPair { sim: LgcpSimulator, shared: bool },
    LgcpJitter { sim: LgcpSimulator },
    PoissonPair,
    PoissonJitter,
    StraussPair(StraussParams),
    StraussLabelled(StraussParams),
    Cluster(ClusterParams),
}

impl ModelGenerator {
    pub fn new(id: ModelId, grid: usize) -> Result<Self> {
        let w = id.window();
        let dims = GridDims::square(grid);
        let lgcp = |s: f64| -> Result<LgcpSimulator> { LgcpSimulator::new(LgcpParams::new(LGCP_MU, LGCP_VARIANCE, s)?, &w, dims) };
        let cluster = |radius: f64| ClusterParams {
            parent_hardcore: 0.05,
            parent_beta: ClusterParams::CALIBRATED_PARENT_BETA,
            offspring_radius: radius,
            mean_offspring: 5.0,
        };
        let kind = match id {
            ModelId::RfNull { scale } => GenKind::Fields {
                sim: GrfSimulator::new(CovarianceModel::exponential(1.0, scale)?, w, dims)?,
                sigma: None,
            },
            ModelId::RfPower { sigma, scale } => GenKind::Fields {
                sim: GrfSimulator::new(CovarianceModel::exponential(1.0, scale)?, w, dims)?,
                sigma: Some(sigma),
            },
            ModelId::S(k @ 1..=3) => GenKind::LgcpPair {
                sim: lgcp([0.5, 0.3, 0.1][k as usize - 1])?,
                shared: false,
            },
            ModelId::S(4) => GenKind::PoissonPair,
            ModelId::S(5) => GenKind::StraussPair(StraussParams::new(200.0, 0.4, 0.03)),
            ModelId::S(6) => GenKind::StraussPair(StraussParams::new(350.0, 0.4, 0.05)),
            ModelId::P(k @ 1..=2) => GenKind::LgcpPair {
                sim: lgcp([0.3, 0.1][k as usize - 1])?,
                shared: true,
            },
            ModelId::P(k @ 3..=4) => GenKind::LgcpJitter {
                sim: lgcp([0.3, 0.1][k as usize - 3])?,
            },
            ModelId::P(5) => GenKind::PoissonJitter,
            ModelId::P(6) => GenKind::StraussLabelled(StraussParams::new(520.0, 0.4, 0.03)),
            ModelId::P(7) => GenKind::StraussLabelled(StraussParams::new(650.0, 0.7, 0.05)),
            ModelId::P(8) => GenKind::Cluster(cluster(0.04)),
            ModelId::P(9) => GenKind::Cluster(cluster(0.06)),
            other => return Err(Error::Config(format!("model {other} is not registered"))),
        };
        Ok(ModelGenerator { id, window: w, kind })
    }

    pub fn window(&self) -> Window {
        self.window
    }

    /// One draw of the model: two rasters for field models, two patterns
    /// otherwise.
    pub fn simulate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Simulated> {
        let w = &self.window;
        let pair = |a, b| Ok(Simulated::Patterns { phi: a, psi: b });
        match &self.kind {
            GenKind::Fields { sim, sigma } => {
                let (phi, psi) = match sigma {
                    None => sim.sample_pair(rng),
                    Some(s) => power_pair_from(sim, *s, rng)?,
                };
                Ok(Simulated::Fields { phi, psi })
            }
            GenKind::LgcpPair { sim, shared } => {
                let (a, b) = if *shared {
                    sim.sample_shared_pair(rng)
                } else {
                    sim.sample_independent_pair(rng)
                };
                pair(a, b)
            }
            GenKind::LgcpJitter { sim } => {
                let a = sim.sample(rng);
                let b = jitter_copy(&a, JITTER_RADIUS, rng)?;
                pair(a, b)
            }
            GenKind::PoissonPair => {
                let a = sim_poisson(POISSON_INTENSITY, w, rng)?;
                pair(a, sim_poisson(POISSON_INTENSITY, w, rng)?)
            }
            GenKind::PoissonJitter => {
                let a = sim_poisson(POISSON_INTENSITY, w, rng)?;
                let b = jitter_copy(&a, JITTER_RADIUS, rng)?;
                pair(a, b)
            }
            GenKind::StraussPair(p) => {
                let a = sim_strauss(*p, w, rng)?;
                pair(a, sim_strauss(*p, w, rng)?)
            }
            GenKind::StraussLabelled(p) => {
                let all = sim_strauss(*p, w, rng)?;
                let (a, b) = random_label_split(&all, 0.5, rng)?;
                pair(a, b)
            }
            GenKind::Cluster(p) => {
                let (a, b) = sim_cluster_hardcore(*p, w, rng)?;
                pair(a, b)
            }
        }
    }

    /// Test data for one replicate; field models observe Φ at a binomial
    /// design of 100 locations.
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TestData> {
        match self.simulate(rng)? {
            Simulated::Fields { phi, psi } => {
                let design = draw_binomial_design(RF_SAMPLE_SIZE, &self.window, rng)?;
                let values = read_field(&phi, &design)?;
                TestData::fields(design, values, psi)
            }
            Simulated::Patterns { phi, psi } => TestData::patterns(phi, psi),
        }
    }
}

/// Raw output of a model draw.
#[derive(Debug, Clone)]
pub enum Simulated {
    Fields { phi: FieldRaster, psi: FieldRaster },
    Patterns { phi: PointPattern, psi: PointPattern },
}

fn default_replications() -> usize {
    DEFAULT_REPLICATIONS
}
fn default_shifts() -> usize {
    DEFAULT_SHIFTS
}
fn default_alpha() -> f64 {
    0.05
}
fn default_seed() -> u64 {
    1
}
fn default_grid() -> usize {
    DEFAULT_GRID
}
fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub models: Vec<ModelId>,
    pub strategies: Vec<String>,
    #[serde(rename = "R", default = "default_replications")]
    pub replications: usize,
    #[serde(rename = "N", default = "default_shifts")]
    pub shifts: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Raster resolution for field and LGCP simulation.
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default)]
    pub alternative: Alternative,
    #[serde(default)]
    pub theorem2: Theorem2Config,
}

fn methods(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

impl ExperimentSpec {
    pub fn new(name: &str, models: Vec<ModelId>, strategies: Vec<String>) -> Self {
        ExperimentSpec {
            name: name.into(),
            models,
            strategies,
            replications: DEFAULT_REPLICATIONS,
            shifts: DEFAULT_SHIFTS,
            alpha: 0.05,
            seed: 1,
            workers: None,
            out_dir: None,
            grid: DEFAULT_GRID,
            alternative: Alternative::TwoSided,
            theorem2: Theorem2Config::default(),
        }
    }

    /// Named presets `table1`…`table4` at desk scale.
    pub fn preset(name: &str) -> Result<Self> {
        let field_methods = methods(&[
            "RS_torus",
            "RS_minus",
            "RS_count",
            "RS_var",
            "RS_ker(0.05)",
            "RS_ker(0.10)",
            "RS_ker(0.15)",
        ]);
        match name {
            "table1" => Ok(Self::new(
                name,
                RF_NULL_SCALES.iter().map(|&scale| ModelId::RfNull { scale }).collect(),
                field_methods,
            )),
            "table2" => Ok(Self::new(
                name,
                RF_POWER_SIGMAS
                    .iter()
                    .flat_map(|&sigma| RF_POWER_SCALES.iter().map(move |&scale| ModelId::RfPower { sigma, scale }))
                    .collect(),
                field_methods,
            )),
            "table3" => Ok(Self::new(
                name,
                ModelId::point_process_models(),
                methods(&[
                    "RS_K,torus",
                    "RS_K,minus",
                    "RS_K,ker(0.05)",
                    "RS_K,ker(0.10)",
                    "RS_K,ker(0.15)",
                    "RS_K,var",
                ]),
            )),
            "table4" => Ok(Self::new(
                name,
                ModelId::point_process_models(),
                methods(&[
                    "RS_G,torus",
                    "RS_G,minus",
                    "RS_G,ker(0.05)",
                    "RS_G,ker(0.10)",
                    "RS_G,ker(0.15)",
                ]),
            )),
            other => Err(Error::Config(format!(
                "unknown preset `{other}`; valid presets are table1, table2, table3, table4"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < MIN_REPLICATIONS {
            return Err(Error::Config(format!("R = {} is below {MIN_REPLICATIONS}", self.replications)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config("alpha must lie in (0, 1]".into()));
        }
        if self.models.is_empty() || self.strategies.is_empty() {
            return Err(Error::Config("at least one model and one strategy are required".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        for s in &self.strategies {
            s.parse::<Method>()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: ModelId,
    pub s: Option<f64>,
    pub sigma: Option<f64>,
    pub strategy: String,
    pub rate: f64,
    pub lo: f64,
    pub hi: f64,
    /// Set for null models: whether the rate falls outside the central 95%
    /// range of rejection rates of a test at the nominal level.
    pub flagged: Option<bool>,
    pub replicates: usize,
    pub shifts: usize,
    pub shift_redraws: usize,
    pub regenerated: usize,
    pub mean_count_phi: f64,
    pub mean_count_psi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionTable {
    pub name: String,
    pub alpha: f64,
    pub rows: Vec<TableRow>,
}

impl RejectionTable {
    pub fn row(&self, model: &ModelId, strategy: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| &r.model == model && r.strategy == strategy)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Io(e.to_string());
        w.write_record([
            "model",
            "s",
            "sigma",
            "strategy",
            "rate",
            "lo",
            "hi",
            "flagged",
            "replicates",
            "shifts",
            "shift_redraws",
            "regenerated",
            "mean_count_phi",
            "mean_count_psi",
        ])
        .map_err(err)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            w.write_record([
                r.model.to_string(),
                opt(r.s),
                opt(r.sigma),
                r.strategy.clone(),
                format!("{:.4}", r.rate),
                format!("{:.4}", r.lo),
                format!("{:.4}", r.hi),
                r.flagged.map_or(String::new(), |f| f.to_string()),
                r.replicates.to_string(),
                r.shifts.to_string(),
                r.shift_redraws.to_string(),
                r.regenerated.to_string(),
                format!("{:.2}", r.mean_count_phi),
                format!("{:.2}", r.mean_count_psi),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }
}

/// p-values of every replicate for one table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueRecord {
    pub model: ModelId,
    pub strategy: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub table: RejectionTable,
    pub p_values: Vec<PValueRecord>,
    pub wall_seconds: f64,
}

impl ExperimentOutcome {
    pub fn p_values_of(&self, model: &ModelId, strategy: &str) -> Option<&[f64]> {
        self.p_values
            .iter()
            .find(|r| &r.model == model && r.strategy == strategy)
            .map(|r| r.values.as_slice())
    }
}

/// Exact 95% interval for a rejection rate observed over `replications`.
pub fn binomial_ci(rate: f64, replications: usize) -> Result<(f64, f64)> {
    let k = (rate * replications as f64).round() as u64;
    clopper_pearson(k, replications as u64, 0.05)
}

/// Rates a level-`p` test produces in 95% of experiments of `replications`.
pub fn acceptance_band(p: f64, replications: usize) -> Result<(f64, f64)> {
    binomial_band(p, replications as u64)
}

/// Stable 64-bit key of a label, for seeding.
fn key(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct ReplicateOutcome {
    p: Vec<f64>,
    shift_redraws: Vec<usize>,
    regenerated: usize,
    counts: (usize, usize),
}

fn is_regenerable(e: &Error) -> bool {
    matches!(e, Error::StatisticUndefined(_) | Error::FitFailed | Error::EmptyIntersection { .. })
}

fn data_counts(d: &TestData) -> (usize, usize) {
    match d {
        TestData::Fields { design, .. } => (design.len(), design.len()),
        TestData::Patterns { phi, psi } => (phi.len(), psi.len()),
    }
}

fn run_replicate(
    spec: &ExperimentSpec,
    gen: &ModelGenerator,
    cells: &[(String, StrategyConfig, Prepared)],
    rep: usize,
) -> Result<ReplicateOutcome> {
    let mk = key(&gen.id.to_string());
    let mut last = None;
    for attempt in 0..=MAX_REGENERATIONS {
        let mut rng: SimRng = derived_rng(spec.seed, &[mk, rep as u64, attempt as u64]);
        let data = gen.generate(&mut rng)?;
        let mut p = Vec::with_capacity(cells.len());
        let mut redraws = Vec::with_capacity(cells.len());
        let mut failed = None;
        for (name, cfg, prep) in cells {
            let seed = derive_seed(spec.seed, &[mk, key(name), rep as u64, attempt as u64]);
            match run_test_prepared(&data, cfg, prep, seed) {
                Ok(r) => {
                    p.push(r.p_value);
                    redraws.push(r.n_redraws);
                }
                Err(e) if is_regenerable(&e) => {
                    failed = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        match failed {
            None => {
                return Ok(ReplicateOutcome {
                    p,
                    shift_redraws: redraws,
                    regenerated: attempt,
                    counts: data_counts(&data),
                })
            }
            Some(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Runs every (model, strategy) cell of the experiment. Strategies that do
/// not apply to a model (no closed-form pair correlation for the second-order
/// variance) are skipped.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let run = || run_experiment_inner(spec);
    match spec.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run),
        None => run(),
    }
}

fn run_experiment_inner(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut p_values = Vec::new();
    for model in &spec.models {
        let gen = ModelGenerator::new(*model, spec.grid)?;
        let w = model.window();
        let mk = key(&model.to_string());
        let mut cells = Vec::new();
        for name in &spec.strategies {
            let method: Method = name.parse()?;
            if method.statistic.on_patterns() == model.is_field() {
                return Err(Error::Config(format!("{name} does not apply to the data of {model}")));
            }
            let mut cfg = StrategyConfig::for_method(method, &w).with_shifts(spec.shifts);
            cfg.alternative = spec.alternative;
            cfg.theorem2 = spec.theorem2;
            if method.strategy == crate::shifttest::Strategy::VarTheorem2 {
                match model.pair_correlation() {
                    Some(g) => cfg.pair_correlation = Some(g),
                    None => {
                        warn!("skipping {name} on {model}: no closed-form pair correlation");
                        continue;
                    }
                }
            }
            let prep = prepare(&cfg, &w, derive_seed(spec.seed, &[mk, key(name)]))?;
            cells.push((method.to_string(), cfg, prep));
        }
        let done = AtomicUsize::new(0);
        let step = (spec.replications / 10).max(1);
        let outcomes: Vec<ReplicateOutcome> = (0..spec.replications)
            .into_par_iter()
            .map(|rep| {
                let out = run_replicate(spec, &gen, &cells, rep).map_err(|e| Error::Replicate {
                    replicate: rep,
                    source: Box::new(e),
                });
                let k = done.fetch_add(1, Ordering::Relaxed) + 1;
                if k.is_multiple_of(step) {
                    info!("{model}: {k}/{} replicates", spec.replications);
                }
                out
            })
            .collect::<Result<_>>()?;
        let r = spec.replications;
        let band = acceptance_band(spec.alpha.min(1.0), r)?;
        let regenerated = outcomes.iter().map(|o| o.regenerated).sum();
        let mean_phi = outcomes.iter().map(|o| o.counts.0 as f64).sum::<f64>() / r as f64;
        let mean_psi = outcomes.iter().map(|o| o.counts.1 as f64).sum::<f64>() / r as f64;
        for (j, (name, _, _)) in cells.iter().enumerate() {
            let ps: Vec<f64> = outcomes.iter().map(|o| o.p[j]).collect();
            let rejected = ps.iter().filter(|&&p| p <= spec.alpha).count();
            let rate = rejected as f64 / r as f64;
            let (lo, hi) = clopper_pearson(rejected as u64, r as u64, 0.05)?;
            rows.push(TableRow {
                model: *model,
                s: model.scale(),
                sigma: model.sigma(),
                strategy: name.clone(),
                rate,
                lo,
                hi,
                flagged: model.is_null().then_some(rate < band.0 || rate > band.1),
                replicates: r,
                shifts: spec.shifts,
                shift_redraws: outcomes.iter().map(|o| o.shift_redraws[j]).sum(),
                regenerated,
                mean_count_phi: mean_phi,
                mean_count_psi: mean_psi,
            });
            p_values.push(PValueRecord {
                model: *model,
                strategy: name.clone(),
                values: ps,
            });
        }
    }
    Ok(ExperimentOutcome {
        table: RejectionTable {
            name: spec.name.clone(),
            alpha: spec.alpha,
            rows,
        },
        p_values,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Json,
}

/// Writes a table as `<dir>/<name>.csv` or `<dir>/<name>.json`.
pub fn emit_table(table: &RejectionTable, dir: &Path, format: TableFormat) -> Result<PathBuf> {
    match format {
        TableFormat::Csv => {
            let path = dir.join(format!("{}.csv", table.name));
            write_atomic(&path, table.to_csv()?.as_bytes())?;
            Ok(path)
        }
        TableFormat::Json => {
            let path = dir.join(format!("{}.json", table.name));
            write_json(&path, table)?;
            Ok(path)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec: ExperimentSpec,
    pub version: String,
    pub workers: usize,
    pub wall_seconds: f64,
    pub outputs: Vec<PathBuf>,
}

/// Writes CSV and JSON tables, the per-replicate p-values and a manifest.
pub fn emit_outcome(spec: &ExperimentSpec, outcome: &ExperimentOutcome, dir: &Path) -> Result<RunManifest> {
    let mut outputs = vec![
        emit_table(&outcome.table, dir, TableFormat::Csv)?,
        emit_table(&outcome.table, dir, TableFormat::Json)?,
    ];
    let pv = dir.join(format!("{}_pvalues.json", outcome.table.name));
    write_json(&pv, &outcome.p_values)?;
    outputs.push(pv);
    let manifest = RunManifest {
        spec: spec.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        workers: spec.workers.unwrap_or_else(rayon::current_num_threads),
        wall_seconds: outcome.wall_seconds,
        outputs,
    };
    write_json(&dir.join(format!("{}_manifest.json", outcome.table.name)), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_ids_round_trip() {
        for m in ModelId::registry() {
            let back: ModelId = m.to_string().parse().unwrap();
            assert_eq!(back, m);
        }
        for bad in ["S7", "P0", "Q1", "RF-null(s=-1)", "RF-null(x=0.1)", "RF-power(s=0.1)", ""] {
            assert!(bad.parse::<ModelId>().is_err(), "{bad}");
        }
        let json = serde_json::to_string(&ModelId::RfPower { sigma: 2.0, scale: 0.5 }).unwrap();
        assert_eq!(json, "\"RF-power(sigma=2,s=0.5)\"");
    }

    #[test]
    fn every_registered_model_generates() {
        for m in ModelId::registry() {
            let gen = ModelGenerator::new(m, 64).unwrap();
            let mut rng = derived_rng(1, &[key(&m.to_string())]);
            let d = gen.generate(&mut rng).unwrap();
            assert_eq!(m.is_field(), matches!(d, TestData::Fields { .. }), "{m}");
        }
    }

    #[test]
    fn presets_cover_all_table_cells() {
        let mut n = 0;
        for t in ["table1", "table2", "table3", "table4"] {
            let spec = ExperimentSpec::preset(t).unwrap();
            spec.validate().unwrap();
            n += spec.models.len() * spec.strategies.len();
        }
        assert_eq!(n, 6 * 7 + 9 * 7 + 15 * 6 + 15 * 5);
        assert!(ExperimentSpec::preset("table5").is_err());
    }

    #[test]
    fn paper_scale_ci() {
        let (lo, hi) = binomial_ci(0.05, 1000).unwrap();
        assert!((lo - 0.0373).abs() < 0.002 && (hi - 0.0654).abs() < 0.002);
        assert_eq!(acceptance_band(0.05, 1000).unwrap(), (0.037, 0.064));
        let (lo, hi) = binomial_ci(0.0, 100).unwrap();
        assert!(lo == 0.0 && (hi - 0.036).abs() < 0.001);
        let (lo, hi) = binomial_ci(1.0, 100).unwrap();
        assert!(hi == 1.0 && (lo - 0.964).abs() < 0.001);
    }

    #[test]
    fn alpha_one_rejects_always() {
        let mut spec = ExperimentSpec::new("a1", vec![ModelId::S(4)], vec!["RS_G,torus".into()]);
        spec.replications = 50;
        spec.shifts = 19;
        spec.alpha = 1.0;
        let out = run_experiment(&spec).unwrap();
        assert_eq!(out.table.rows[0].rate, 1.0);
    }

    #[test]
    fn tables_round_trip_and_flag() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ExperimentSpec::new(
            "rt",
            vec![ModelId::RfNull { scale: 0.1 }],
            vec!["RS_torus".into(), "RS_count".into()],
        );
        spec.replications = 50;
        spec.shifts = 19;
        spec.grid = 64;
        let out = run_experiment(&spec).unwrap();
        let manifest = emit_outcome(&spec, &out, dir.path()).unwrap();
        assert_eq!(manifest.outputs.len(), 3);
        let back: RejectionTable = crate::io::read_json(&dir.path().join("rt.json")).unwrap();
        assert_eq!(back, out.table);
        let csv = std::fs::read_to_string(dir.path().join("rt.csv")).unwrap();
        assert!(csv.starts_with("model,s,sigma,strategy,rate,lo,hi,flagged"));
        let band = acceptance_band(0.05, 50).unwrap();
        for r in &out.table.rows {
            assert_eq!(r.flagged, Some(r.rate < band.0 || r.rate > band.1));
            assert!(r.lo <= r.rate && r.rate <= r.hi);
        }
    }

    #[test]
    fn pattern_method_on_fields_is_rejected() {
        let mut spec = ExperimentSpec::new("x", vec![ModelId::RfNull { scale: 0.1 }], vec!["RS_K,torus".into()]);
        spec.replications = 50;
        assert!(run_experiment(&spec).is_err());
        spec.replications = 10;
        assert!(spec.validate().is_err());
    }
}
