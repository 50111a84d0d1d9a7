use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use saddle_core::benchmarks::{solve, Engine, Solution};
use saddle_core::dynamics::{write_trajectory_csv, RunStatus, SaddleRunResult};
use saddle_core::landscape::{build_landscape, export_dot, export_json, SaddleRecord};
use serde::{Deserialize, Serialize};

use crate::config::{self, Overrides, Resolved, RunConfig};
use crate::error::CliError;

/// Result file of a single search.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub x_final: Vec<f64>,
    pub status: RunStatus,
    pub index: Option<usize>,
    pub degenerate: Option<usize>,
    pub eigenvalues: Option<Vec<f64>>,
    #[serde(rename = "N_f")]
    pub n_f: u64,
    #[serde(rename = "N_s", skip_serializing_if = "Option::is_none")]
    pub n_s: Option<u64>,
    pub n_steps: u64,
    pub residual_infnorm: Option<f64>,
}

impl RunReport {
    fn new(run: &SaddleRunResult, record: Option<&SaddleRecord>, n_s: Option<u64>) -> Self {
        Self {
            x_final: run.final_state.x.as_slice().to_vec(),
            status: run.status,
            index: record.map(|r| r.index),
            degenerate: record.map(|r| r.degenerate),
            eigenvalues: record.map(|r| r.eigenvalues.clone()),
            n_f: run.n_f,
            n_s,
            n_steps: run.n_steps,
            residual_infnorm: record.map(|r| r.residual_infnorm),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(format!("creating {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

fn write_outputs(dir: &Path, run: &SaddleRunResult, record: Option<&SaddleRecord>, n_s: Option<u64>) -> Result<PathBuf, CliError> {
    let path = dir.join("result.json");
    write_text(&path, &to_json(&RunReport::new(run, record, n_s)))?;
    if let Some(rows) = &run.trajectory {
        let tpath = dir.join("trajectory.csv");
        let mut w = create(&tpath)?;
        write_trajectory_csv(rows, &mut w).map_err(|e| CliError::io(format!("writing {}", tpath.display()), e))?;
        w.flush().map_err(|e| CliError::io(format!("writing {}", tpath.display()), e))?;
    }
    Ok(path)
}

/// `sd` and `gpsd`: one search, result JSON plus optional trajectory and log.
pub fn search(cfg: &RunConfig, ov: &Overrides) -> Result<(), CliError> {
    let r = config::resolve(cfg, ov)?;
    ensure_dir(&r.output_dir)?;
    let mut log = match r.engine {
        Engine::Gpsd => Some(create(&r.output_dir.join("subproblems.jsonl"))?),
        Engine::Sd => None,
    };
    let outcome = solve(&r.problem, r.engine, log.as_mut().map(|w| w as &mut dyn Write));
    if let Some(w) = log.as_mut() {
        w.flush().map_err(|e| CliError::io("writing subproblems.jsonl", e))?;
    }
    match outcome {
        Ok(sol) => finish_search(&r, &sol),
        Err(failure) => {
            // flush what the learner got before failing
            if let Some(partial) = &failure.partial {
                let x = &partial.run.final_state.x;
                let record = x
                    .iter()
                    .all(|v| v.is_finite())
                    .then(|| SaddleRecord::classify(&r.problem.field, &r.problem.curvature, x, partial.run.n_f, partial.run.n_steps).ok())
                    .flatten();
                write_outputs(&r.output_dir, &partial.run, record.as_ref(), r.problem.simulations().map(|_| partial.run.n_f))?;
            }
            Err(CliError::Other(failure.to_string()))
        }
    }
}

fn finish_search(r: &Resolved, sol: &Solution) -> Result<(), CliError> {
    let path = write_outputs(&r.output_dir, &sol.run, sol.record.as_ref(), sol.n_s)?;
    let index = sol.record.as_ref().map(|rec| rec.index.to_string()).unwrap_or_else(|| "?".into());
    eprintln!(
        "{:?} after {} steps, N_f {}, index {index}; wrote {}",
        sol.run.status,
        sol.run.n_steps,
        sol.run.n_f,
        path.display()
    );
    if sol.converged() {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!("search ended with status {:?}", sol.run.status)))
    }
}

/// A point given inline or as a file: a bare array or an object with `x_final` or `x`.
#[derive(Deserialize)]
#[serde(untagged)]
enum PointFile {
    Bare(Vec<f64>),
    Result { x_final: Vec<f64> },
    Record { x: Vec<f64> },
}

pub fn read_point(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let parsed: PointFile =
        serde_json::from_str(&text).map_err(|e| CliError::config(&path.display().to_string(), e.to_string()))?;
    Ok(match parsed {
        PointFile::Bare(x) | PointFile::Result { x_final: x } | PointFile::Record { x } => x,
    })
}

pub fn parse_point(list: &str) -> Result<Vec<f64>, CliError> {
    list.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| CliError::config("--x", format!("{s:?}: {e}"))))
        .collect()
}

#[derive(Serialize)]
struct IndexReport {
    index: usize,
    degenerate: usize,
    eigenvalues: Vec<f64>,
    residual_infnorm: f64,
}

pub fn verify_index(cfg: &RunConfig, ov: &Overrides, point: Vec<f64>) -> Result<(), CliError> {
    let r = config::resolve(cfg, ov)?;
    let x = DVector::from_vec(point);
    let rec = SaddleRecord::classify(&r.problem.field, &r.problem.curvature, &x, 0, 0)?;
    print!(
        "{}",
        to_json(&IndexReport {
            index: rec.index,
            degenerate: rec.degenerate,
            eigenvalues: rec.eigenvalues,
            residual_infnorm: rec.residual_infnorm,
        })
    );
    Ok(())
}

pub fn landscape(cfg: &RunConfig, ov: &Overrides, root: Option<Vec<f64>>, exhaustive: bool, jobs: Option<usize>) -> Result<(), CliError> {
    let r = config::resolve(cfg, ov)?;
    let lcfg = config::landscape_config(&r, &cfg.landscape, exhaustive);
    lcfg.validate().map_err(|e| CliError::config("landscape", e.to_string()))?;
    let root = match root.or_else(|| cfg.landscape.root.clone()) {
        Some(x) => DVector::from_vec(x),
        None => {
            // the parent comes from a direct search with the configured index
            let sol = solve(&r.problem, Engine::Sd, None).map_err(|e| CliError::Other(e.to_string()))?;
            let ok = sol.converged() && sol.record.as_ref().is_some_and(|rec| rec.residual_infnorm <= lcfg.residual_bound);
            if !ok {
                return Err(CliError::NotConverged(format!(
                    "root search ended {:?} with residual {:?}; no parent for the landscape",
                    sol.run.status,
                    sol.record.as_ref().map(|rec| rec.residual_infnorm)
                )));
            }
            sol.run.final_state.x
        }
    };
    let threads = jobs.or(cfg.landscape.jobs).unwrap_or(1).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Other(format!("thread pool: {e}")))?;
    let field = Arc::clone(&r.problem.field);
    let graph = pool.install(|| build_landscape(field, &root, &lcfg))?;

    ensure_dir(&r.output_dir)?;
    let stem = format!("landscape_{}_{}", r.problem.name, r.seed);
    let json = r.output_dir.join(format!("{stem}.json"));
    let dot = r.output_dir.join(format!("{stem}.dot"));
    write_text(&json, &export_json(&graph))?;
    write_text(&dot, &export_dot(&graph))?;
    let mut counts = Vec::new();
    let top = graph.nodes.iter().map(|n| n.index()).max().unwrap_or(0);
    for k in (0..=top).rev() {
        counts.push(format!("index {k}: {}", graph.nodes_with_index(k).len()));
    }
    eprintln!(
        "{} nodes ({}), {} edges, {} failed probes; wrote {} and {}",
        graph.nodes.len(),
        counts.join(", "),
        graph.edges.len(),
        graph.failed_probes.len(),
        json.display(),
        dot.display()
    );
    Ok(())
}
