//! Run configuration: one TOML file with flat sections, overridden by the
//! environment and then by command-line flags.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use saddle_core::benchmarks::{init_directions, parse_case, Engine, PhaseFieldConfig, Problem};
use saddle_core::dynamics::ScheduleKind;
use saddle_core::landscape::LandscapeConfig;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkKind {
    Rosenbrock,
    Codesign,
    Phasefield,
    /// Quadratic energy read from a file (or inline in `[custom]`).
    #[serde(alias = "custom")]
    #[value(alias = "custom")]
    CustomFile,
}

/// Case given as a roman numeral or a number.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum CaseLabel {
    Number(usize),
    Label(String),
}

impl CaseLabel {
    fn resolve(&self, key: &str) -> Result<usize, CliError> {
        let label = match self {
            CaseLabel::Number(n) => n.to_string(),
            CaseLabel::Label(s) => s.clone(),
        };
        parse_case(&label).map_err(|e| CliError::config(key, e.to_string()))
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSection {
    pub case: Option<CaseLabel>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseFieldSection {
    pub inv_eta_sq: Option<f64>,
    pub alpha: Option<f64>,
    pub h: Option<f64>,
    pub kappa: Option<f64>,
    /// Target index of the search.
    pub k: Option<usize>,
    /// Use the landscape step size.
    pub landscape: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSection {
    /// TOML or JSON file holding `hessian`, `center`, `x0` and `k`.
    pub file: Option<PathBuf>,
    pub hessian: Option<Vec<Vec<f64>>>,
    pub center: Option<Vec<f64>>,
    pub x0: Option<Vec<f64>>,
    pub k: Option<usize>,
}

/// Contents of a custom quadratic file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSpec {
    pub hessian: Vec<Vec<f64>>,
    pub center: Vec<f64>,
    pub x0: Vec<f64>,
    pub k: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdSection {
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub k: Option<usize>,
    pub l0: Option<f64>,
    pub schedule: Option<ScheduleKind>,
    pub tol_x: Option<f64>,
    pub max_steps: Option<u64>,
    pub divergence_bound: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpsdSection {
    pub tol_l: Option<f64>,
    pub tol_u: Option<f64>,
    pub n_sam: Option<usize>,
    pub n_new: Option<usize>,
    /// Initial half width of the trust region.
    pub delta: Option<f64>,
    pub delta_min: Option<f64>,
    pub delta_max: Option<f64>,
    pub shrink_streak_cap: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSection {
    pub perturb_eps: Option<f64>,
    pub dedup_tol: Option<f64>,
    pub residual_bound: Option<f64>,
    pub exhaustive: Option<bool>,
    pub max_nodes: Option<usize>,
    /// Parent point; when absent the root is found by a search from the
    /// benchmark's start.
    pub root: Option<Vec<f64>>,
    pub jobs: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub benchmark: Option<BenchmarkKind>,
    pub engine: Option<Engine>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub emit_trajectory: Option<bool>,
    #[serde(default)]
    pub rosenbrock: CaseSection,
    #[serde(default)]
    pub codesign: CaseSection,
    #[serde(default)]
    pub phasefield: PhaseFieldSection,
    #[serde(default)]
    pub custom: CustomSection,
    #[serde(default)]
    pub sd: SdSection,
    #[serde(default)]
    pub gpsd: GpsdSection,
    #[serde(default)]
    pub landscape: LandscapeSection,
    /// Directory of the config file, for relative paths inside it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, CliError> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(&path, e.into_inner().message().trim().to_string())
    })
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, CliError> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(&path, e.into_inner().to_string())
    })
}

/// Parses TOML, or JSON when the file name ends in `.json`.
pub fn load_structured<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    if path.extension().is_some_and(|e| e == "json") {
        parse_json(&text)
    } else {
        parse_toml(&text)
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let mut cfg: Self = load_structured(path)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }
}

/// Settings given on the command line; each one beats the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub benchmark: Option<BenchmarkKind>,
    pub engine: Option<Engine>,
    pub case: Option<String>,
    /// Flag or `SADDLE_SEED`.
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub inv_eta_sq: Option<f64>,
    pub max_steps: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub trajectory: bool,
    pub landscape: bool,
}

/// A configured problem ready to run.
pub struct Resolved {
    pub engine: Engine,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub problem: Problem,
}

fn vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn custom_problem(cfg: &RunConfig, k_flag: Option<usize>, seed: u64) -> Result<Problem, CliError> {
    let spec = match &cfg.custom.file {
        Some(file) => {
            let path = if file.is_absolute() { file.clone() } else { cfg.base_dir.join(file) };
            load_structured::<QuadraticSpec>(&path)?
        }
        None => {
            let missing = |key: &str| CliError::config(&format!("custom.{key}"), "required for the custom benchmark");
            QuadraticSpec {
                hessian: cfg.custom.hessian.clone().ok_or_else(|| missing("hessian"))?,
                center: cfg.custom.center.clone().ok_or_else(|| missing("center"))?,
                x0: cfg.custom.x0.clone().ok_or_else(|| missing("x0"))?,
                k: cfg.custom.k.ok_or_else(|| missing("k"))?,
            }
        }
    };
    let n = spec.center.len();
    if spec.hessian.len() != n || spec.hessian.iter().any(|row| row.len() != n) {
        return Err(CliError::config("custom.hessian", format!("must be {n} x {n}")));
    }
    let h = DMatrix::from_fn(n, n, |i, j| spec.hessian[i][j]);
    let k = k_flag.or(cfg.custom.k).unwrap_or(spec.k);
    Ok(Problem::quadratic(h, vector(&spec.center), vector(&spec.x0), k, seed)?)
}

fn case_of(flag: &Option<String>, section: &CaseSection, key: &str) -> Result<usize, CliError> {
    match (flag, &section.case) {
        (Some(label), _) => parse_case(label).map_err(|e| CliError::config("--case", e.to_string())),
        (None, Some(c)) => c.resolve(key),
        (None, None) => Err(CliError::config(key, "a case is required (i, ii, ...)")),
    }
}

/// Applies flags over the config file and builds the problem.
pub fn resolve(cfg: &RunConfig, ov: &Overrides) -> Result<Resolved, CliError> {
    let benchmark = ov
        .benchmark
        .or(cfg.benchmark)
        .ok_or_else(|| CliError::config("benchmark", "no benchmark given"))?;
    let engine = ov.engine.or(cfg.engine).unwrap_or(Engine::Sd);
    let seed = ov.seed.or(cfg.seed).unwrap_or(0);
    let output_dir = ov
        .output_dir
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(|d| cfg.base_dir.join(d)))
        .unwrap_or_else(|| PathBuf::from("."));
    let k_flag = ov.k.or(cfg.sd.k);

    let mut problem = match benchmark {
        BenchmarkKind::Rosenbrock => Problem::rosenbrock(case_of(&ov.case, &cfg.rosenbrock, "rosenbrock.case")?, seed)?,
        BenchmarkKind::Codesign => Problem::codesign(case_of(&ov.case, &cfg.codesign, "codesign.case")?, seed)?,
        BenchmarkKind::Phasefield => {
            let s = &cfg.phasefield;
            let mut pf = PhaseFieldConfig::default();
            pf.inv_eta_sq = ov.inv_eta_sq.or(s.inv_eta_sq).unwrap_or(pf.inv_eta_sq);
            pf.alpha = s.alpha.unwrap_or(pf.alpha);
            pf.h = s.h.unwrap_or(pf.h);
            pf.kappa = s.kappa.unwrap_or(pf.kappa);
            let k = k_flag.or(s.k).unwrap_or(1);
            let landscape = ov.landscape || s.landscape.unwrap_or(false);
            Problem::phasefield(pf, k, landscape, seed).map_err(|e| CliError::config("phasefield", e.to_string()))?
        }
        BenchmarkKind::CustomFile => custom_problem(cfg, k_flag, seed)?,
    };

    if let Some(k) = k_flag {
        if k != problem.sd.k {
            let jac = problem.curvature.jacobian(&problem.field, &problem.x0)?;
            problem.frame = init_directions(&jac, k).map_err(|e| CliError::config("sd.k", e.to_string()))?;
            problem.sd.k = k;
            problem.gpsd.sd.k = k;
        }
    }
    apply_sd(&cfg.sd, ov, &mut problem);
    apply_gpsd(&cfg.gpsd, &mut problem);
    let trajectory = ov.trajectory || cfg.emit_trajectory.unwrap_or(false);
    problem.sd.record_trajectory = trajectory;
    problem.gpsd.sd.record_trajectory = trajectory;

    let dim = problem.x0.len();
    problem.sd.validate(dim).map_err(|e| CliError::config("sd", e.to_string()))?;
    problem.gpsd.validate(dim).map_err(|e| CliError::config("gpsd", e.to_string()))?;
    Ok(Resolved {
        engine,
        seed,
        output_dir,
        problem,
    })
}

fn apply_sd(s: &SdSection, ov: &Overrides, p: &mut Problem) {
    for sd in [&mut p.sd, &mut p.gpsd.sd] {
        if let Some(v) = s.beta {
            sd.beta = v;
        }
        if let Some(v) = s.gamma {
            sd.gamma = v;
        }
        if let Some(v) = s.tau {
            sd.tau = v;
        }
        if let Some(v) = s.l0 {
            sd.schedule.l0 = v;
        }
        if let Some(v) = s.schedule {
            sd.schedule.kind = v;
        }
        if let Some(v) = s.tol_x {
            sd.tol_x = v;
        }
        if let Some(v) = ov.max_steps.or(s.max_steps) {
            sd.max_steps = v;
        }
        if let Some(v) = s.divergence_bound {
            sd.divergence_bound = v;
        }
    }
}

fn apply_gpsd(s: &GpsdSection, p: &mut Problem) {
    let g = &mut p.gpsd;
    if let Some(v) = s.tol_l {
        g.tol_l = v;
    }
    if let Some(v) = s.tol_u {
        g.tol_u = v;
    }
    if let Some(v) = s.n_sam {
        g.n_sam = v;
    }
    if let Some(v) = s.n_new {
        g.n_new = v;
    }
    if let Some(v) = s.delta {
        g.initial_region.half_width = v;
        g.delta_max = 10.0 * v;
    }
    if let Some(v) = s.delta_min {
        g.delta_min = v;
    }
    if let Some(v) = s.delta_max {
        g.delta_max = v;
    }
    if let Some(v) = s.shrink_streak_cap {
        g.shrink_streak_cap = v;
    }
}

/// Landscape settings: problem defaults, then the `[landscape]` section.
pub fn landscape_config(r: &Resolved, s: &LandscapeSection, exhaustive_flag: bool) -> LandscapeConfig {
    let mut cfg = r.problem.landscape_config(r.engine, r.seed);
    if let Some(v) = s.perturb_eps {
        cfg.perturb_eps = v;
    }
    if let Some(v) = s.dedup_tol {
        cfg.dedup_tol = v;
    }
    if let Some(v) = s.residual_bound {
        cfg.residual_bound = v;
    }
    if let Some(v) = s.max_nodes {
        cfg.max_nodes = v;
    }
    cfg.exhaustive = exhaustive_flag || s.exhaustive.unwrap_or(false);
    cfg
}
