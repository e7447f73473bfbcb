use std::fs;
use std::path::{Path, PathBuf};

use rshift::gaussfield::{draw_binomial_design, read_field, DesignKind};
use rshift::harness::{emit_outcome, ModelGenerator, Simulated};
use rshift::io::{load_dataset, pattern_from_csv, save_pattern, save_raster, write_json, Dataset};
use rshift::rng::{derived_rng, rng_from_seed};
use rshift::{run_experiment, ExperimentSpec, Method, ModelId, SampleDesign, StrategyConfig, TestData, TestResult};
use serde::Deserialize;
use serde_json::Value;

use crate::config::{self, merge, Loaded};
use crate::error::{CliError, Result};

/// Flags shared by every subcommand; they take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    model: String,
    #[serde(default = "default_grid")]
    grid: usize,
    #[serde(default = "default_sim_name")]
    name: String,
    /// `csv` (long format) or `txt` for rasters.
    #[serde(default = "default_raster_ext")]
    raster_format: String,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    out: Option<PathBuf>,
}

fn default_grid() -> usize {
    256
}
fn default_sim_name() -> String {
    "sim".into()
}
fn default_raster_ext() -> String {
    "csv".into()
}

pub fn simulate(loaded: Loaded, o: &Overrides) -> Result<Vec<PathBuf>> {
    let cfg: SimulateConfig = config::parse(loaded.value, "simulate")?;
    let model: ModelId = cfg.model.parse()?;
    if !matches!(cfg.raster_format.as_str(), "csv" | "txt") {
        return Err(CliError::Usage(format!(
            "raster_format: expected `csv` or `txt`, got `{}`",
            cfg.raster_format
        )));
    }
    let seed = o.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let out = output_dir(o, cfg.out.as_deref(), &loaded.base);
    let generator = ModelGenerator::new(model, cfg.grid)?;
    let sim = generator.simulate(&mut rng_from_seed(seed))?;

    fs::create_dir_all(&out)?;
    let label = model.to_string();
    let mut written = Vec::new();
    match sim {
        Simulated::Patterns { phi, psi } => {
            for (tag, p) in [("phi", &phi), ("psi", &psi)] {
                let path = out.join(format!("{}_{tag}.csv", cfg.name));
                save_pattern(&path, p, Some(&label), Some(seed))?;
                written.push(path);
            }
        }
        Simulated::Fields { phi, psi } => {
            for (tag, r) in [("phi", &phi), ("psi", &psi)] {
                let path = out.join(format!("{}_{tag}.{}", cfg.name, cfg.raster_format));
                save_raster(&path, r, Some(&label), Some(seed))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TestConfig {
    method: String,
    phi: PathBuf,
    psi: PathBuf,
    /// Sampling locations (`x,y` CSV) for field tests; drawn uniformly when
    /// absent.
    #[serde(default)]
    design: Option<PathBuf>,
    #[serde(default = "default_sample_size")]
    sample_size: usize,
    /// Overlaid on the method's default strategy configuration.
    #[serde(default)]
    options: Value,
    #[serde(default = "default_result_name")]
    name: String,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    out: Option<PathBuf>,
}

fn default_sample_size() -> usize {
    100
}
fn default_result_name() -> String {
    "result".into()
}

pub struct TestRun {
    pub result: TestResult,
    pub path: PathBuf,
}

pub fn test(loaded: Loaded, o: &Overrides) -> Result<TestRun> {
    let cfg: TestConfig = config::parse(loaded.value, "test")?;
    let method: Method = cfg.method.parse()?;
    if !(cfg.options.is_null() || cfg.options.is_object()) {
        return Err(CliError::Usage("options must be an object".into()));
    }
    let seed = o.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let out = output_dir(o, cfg.out.as_deref(), &loaded.base);

    let phi = load_dataset(&config::resolve(&loaded.base, &cfg.phi))?;
    let psi = load_dataset(&config::resolve(&loaded.base, &cfg.psi))?;
    if phi.kind() != psi.kind() {
        return Err(CliError::KindMismatch(format!(
            "phi is a {:?}, psi is a {:?}",
            phi.kind(),
            psi.kind()
        )));
    }
    let on_patterns = matches!(phi, Dataset::Pattern(_));
    if method.statistic.on_patterns() != on_patterns {
        return Err(CliError::KindMismatch(format!(
            "{method} needs {} but the inputs are {:?}s",
            if method.statistic.on_patterns() { "point patterns" } else { "fields" },
            phi.kind()
        )));
    }
    let w = phi.window();
    if !same_window(&w, &psi.window()) {
        return Err(CliError::WindowMismatch(format!("{w:?} vs {:?}", psi.window())));
    }

    let mut strategy = serde_json::to_value(StrategyConfig::for_method(method, &w))
        .map_err(|e| CliError::Io(e.to_string()))?;
    if cfg.options.is_object() {
        merge(&mut strategy, cfg.options);
    }
    let strategy: StrategyConfig = config::parse(strategy, "options")?;
    if strategy.method()? != method {
        return Err(CliError::Usage("options may not change the statistic or strategy; set `method`".into()));
    }
    strategy.validate(&w)?;

    let data = match (phi, psi) {
        (Dataset::Pattern(a), Dataset::Pattern(b)) => TestData::patterns(a, b)?,
        (Dataset::Raster(a), Dataset::Raster(b)) => {
            let design = match &cfg.design {
                Some(p) => {
                    let path = config::resolve(&loaded.base, p);
                    let file = fs::File::open(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                    let pts = pattern_from_csv(file, w)?;
                    SampleDesign::new(w, pts.points, DesignKind::UserSupplied)?
                }
                None => draw_binomial_design(cfg.sample_size, &w, &mut derived_rng(seed, &[0]))?,
            };
            let values = read_field(&a, &design)?;
            TestData::fields(design, values, b)?
        }
        _ => unreachable!("kinds checked above"),
    };

    let result = rshift::run_test(&data, &strategy, seed)?;
    fs::create_dir_all(&out)?;
    let path = out.join(format!("{}.json", cfg.name));
    write_json(&path, &result)?;
    Ok(TestRun { result, path })
}

fn same_window(a: &rshift::Window, b: &rshift::Window) -> bool {
    let tol = 1e-9 * a.width().max(a.height());
    [(a.x_min, b.x_min), (a.y_min, b.y_min), (a.x_max, b.x_max), (a.y_max, b.y_max)]
        .iter()
        .all(|(u, v)| (u - v).abs() <= tol)
}

/// Resolves an experiment configuration: either a full specification or
/// `{"preset": "table1", ...}` whose other keys overlay the preset.
pub fn experiment_spec(loaded: Loaded, o: &Overrides) -> Result<(ExperimentSpec, PathBuf)> {
    let mut value = loaded.value;
    let preset = value.as_object_mut().and_then(|m| m.remove("preset"));
    let mut spec = match preset {
        Some(Value::String(name)) => {
            serde_json::to_value(ExperimentSpec::preset(&name)?).map_err(|e| CliError::Io(e.to_string()))?
        }
        Some(other) => return Err(CliError::Usage(format!("preset must be a string, got {other}"))),
        None => Value::Object(Default::default()),
    };
    merge(&mut spec, value);
    let obj = spec.as_object_mut().expect("object");
    if let Some(s) = o.seed {
        obj.insert("seed".into(), s.into());
    }
    if let Some(w) = o.workers {
        obj.insert("workers".into(), w.into());
    }
    let mut spec: ExperimentSpec = config::parse(spec, "experiment")?;
    spec.validate()?;
    let out = match (&o.out, &spec.out_dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => config::resolve(&loaded.base, d),
        (None, None) => PathBuf::from("out"),
    };
    spec.out_dir = Some(out.clone());
    Ok((spec, out))
}

pub fn experiment(loaded: Loaded, o: &Overrides) -> Result<Vec<PathBuf>> {
    let (spec, out) = experiment_spec(loaded, o)?;
    log::info!(
        "experiment `{}`: {} models x {} methods, R = {}, N = {}",
        spec.name,
        spec.models.len(),
        spec.strategies.len(),
        spec.replications,
        spec.shifts
    );
    let outcome = run_experiment(&spec)?;
    let manifest = emit_outcome(&spec, &outcome, &out)?;
    log::info!("finished in {:.1} s", outcome.wall_seconds);
    Ok(manifest.outputs)
}

fn output_dir(o: &Overrides, from_config: Option<&Path>, base: &Path) -> PathBuf {
    match (&o.out, from_config) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => config::resolve(base, d),
        (None, None) => PathBuf::from("."),
    }
}
