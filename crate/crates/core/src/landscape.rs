//! Downward construction of solution landscapes.
//!
//! Starting from an index-k saddle, each probe perturbs the parent along one
//! of its unstable directions and runs an index-m search (m < k) with the
//! leading m unstable directions as the initial frame. Converged endpoints
//! are classified by the Jacobian spectrum, deduplicated, and searched in
//! turn until no new stationary points appear.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{residual_inf, run_sd, RunStatus, SdParams, SdState};
use crate::error::{Result, SaddleError};
use crate::force::{ForceField, ForceOracle};
use crate::learner::{run_gpsd, GpsdParams, RegionSampler, TrustRegion};
use crate::linalg::{default_zero_tol, fd_jacobian_sym, fix_sign, morse_index, sym_eigen, DirectionFrame, SymmetricMatrix};

/// Jacobian `dF/dx` used to classify stationary points.
pub type JacobianFn = Arc<dyn Fn(&DVector<f64>) -> Result<SymmetricMatrix> + Send + Sync>;

#[derive(Clone)]
pub enum Curvature {
    /// Central differences of the force with the given step.
    FiniteDifference(f64),
    Exact(JacobianFn),
}

impl Curvature {
    pub fn jacobian(&self, field: &Arc<dyn ForceField>, x: &DVector<f64>) -> Result<SymmetricMatrix> {
        match self {
            Curvature::FiniteDifference(step) => fd_jacobian_sym(&ForceOracle::from_arc(field.clone()), x, *step),
            Curvature::Exact(f) => f(x),
        }
    }
}

impl std::fmt::Debug for Curvature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Curvature::FiniteDifference(step) => write!(f, "FiniteDifference({step:e})"),
            Curvature::Exact(_) => f.write_str("Exact"),
        }
    }
}

/// A converged, classified stationary point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleRecord {
    pub x: Vec<f64>,
    pub index: usize,
    /// Eigenvalues within the zero tolerance.
    pub degenerate: usize,
    /// Jacobian eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    #[serde(rename = "N_f")]
    pub n_f: u64,
    pub n_steps: u64,
    pub residual_infnorm: f64,
}

impl SaddleRecord {
    /// Classifies `x` by the spectrum of the Jacobian at `x`.
    pub fn classify(
        field: &Arc<dyn ForceField>,
        curvature: &Curvature,
        x: &DVector<f64>,
        n_f: u64,
        n_steps: u64,
    ) -> Result<Self> {
        let jac = curvature.jacobian(field, x)?;
        let eig = sym_eigen(&jac)?;
        let mi = morse_index(&eig, default_zero_tol(&eig));
        Ok(Self {
            x: x.iter().copied().collect(),
            index: mi.index,
            degenerate: mi.degenerate,
            eigenvalues: eig.eigenvalues.to_vec(),
            n_f,
            n_steps,
            residual_infnorm: residual_inf(field.as_ref(), x)?,
        })
    }

    pub fn point(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x)
    }
}

/// Eigenvectors of the `count` largest Jacobian eigenvalues at `x`, largest first.
pub fn unstable_directions(
    field: &Arc<dyn ForceField>,
    curvature: &Curvature,
    x: &DVector<f64>,
    count: usize,
) -> Result<DirectionFrame> {
    let jac = curvature.jacobian(field, x)?;
    let n = jac.dim();
    if count > n {
        return Err(SaddleError::InvalidArgument(format!("{count} directions requested in dimension {n}")));
    }
    let eig = sym_eigen(&jac)?;
    let vectors = (0..count)
        .map(|i| {
            let mut v = eig.eigenvector(n - 1 - i);
            fix_sign(&mut v);
            v
        })
        .collect();
    DirectionFrame::from_orthonormal(n, vectors)
}

/// Parent-to-child link created by one probe. `direction` is 1-based in the
/// parent's unstable frame (largest eigenvalue first); `sign` is ±1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpawnEdge {
    pub parent: usize,
    pub child: usize,
    pub direction: usize,
    pub sign: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleNode {
    pub id: usize,
    #[serde(flatten)]
    pub record: SaddleRecord,
    pub parent_edges: Vec<SpawnEdge>,
}

impl SaddleNode {
    pub fn index(&self) -> usize {
        self.record.index
    }
}

/// A probe that did not produce a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedProbe {
    pub parent: usize,
    pub target_index: usize,
    pub direction: usize,
    pub sign: i8,
    pub status: Option<RunStatus>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGraph {
    pub nodes: Vec<SaddleNode>,
    pub edges: Vec<SpawnEdge>,
    #[serde(default)]
    pub failed_probes: Vec<FailedProbe>,
}

impl LandscapeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Node ids of each index, ascending by id.
    pub fn nodes_with_index(&self, index: usize) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.index() == index).map(|n| n.id).collect()
    }

    /// Adds `parent -> child` unless that exact spawn is already recorded.
    pub fn link(&mut self, edge: SpawnEdge) {
        if self.edges.contains(&edge) {
            return;
        }
        self.edges.push(edge);
        self.nodes[edge.child].parent_edges.push(edge);
    }
}

/// Returns the id of the node of equal index within `dedup_tol` (max-norm)
/// of `candidate`, inserting a new node when there is none.
pub fn register_node(graph: &mut LandscapeGraph, candidate: SaddleRecord, dedup_tol: f64) -> (usize, bool) {
    let existing = graph.nodes.iter().find(|n| {
        n.record.index == candidate.index
            && n.record.x.len() == candidate.x.len()
            && n.record.x.iter().zip(&candidate.x).all(|(a, b)| (a - b).abs() <= dedup_tol)
    });
    if let Some(node) = existing {
        return (node.id, false);
    }
    let id = graph.nodes.len();
    graph.nodes.push(SaddleNode {
        id,
        record: candidate,
        parent_edges: Vec::new(),
    });
    (id, true)
}

#[derive(Clone)]
pub enum SearchEngine {
    Sd,
    /// Surrogate-driven searches. The template supplies everything except
    /// the dynamics settings, the region center and the seed.
    Gpsd {
        template: GpsdParams,
        sampler: Arc<dyn RegionSampler>,
    },
}

impl std::fmt::Debug for SearchEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SearchEngine::Sd => f.write_str("Sd"),
            SearchEngine::Gpsd { template, .. } => f.debug_struct("Gpsd").field("template", template).finish(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LandscapeConfig {
    /// Dynamics settings; `k` is replaced by each probe's target index.
    pub sd: SdParams,
    pub engine: SearchEngine,
    pub perturb_eps: f64,
    pub dedup_tol: f64,
    /// Nodes must satisfy `|F(x*)|_inf <= residual_bound`.
    pub residual_bound: f64,
    /// Probe every target index below the parent's instead of only `k - 1`.
    pub exhaustive: bool,
    pub curvature: Curvature,
    pub max_nodes: usize,
    pub seed: u64,
}

impl LandscapeConfig {
    /// SD probes with `perturb_eps = 0.1`, `dedup_tol = 1e-3`, residual bound
    /// 1e-6 and finite-difference curvature.
    pub fn analytic(sd: SdParams) -> Self {
        Self {
            sd,
            engine: SearchEngine::Sd,
            perturb_eps: 0.1,
            dedup_tol: 1e-3,
            residual_bound: 1e-6,
            exhaustive: false,
            curvature: Curvature::FiniteDifference(1e-5),
            max_nodes: 10_000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("perturb_eps", self.perturb_eps),
            ("dedup_tol", self.dedup_tol),
            ("residual_bound", self.residual_bound),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SaddleError::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_nodes == 0 {
            return Err(SaddleError::InvalidArgument("max_nodes must be positive".into()));
        }
        Ok(())
    }
}

/// A converged probe endpoint, before deduplication.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHit {
    pub record: SaddleRecord,
    pub direction: usize,
    pub sign: i8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchOutcome {
    /// In probe order: direction ascending, `+` before `-`.
    pub hits: Vec<ProbeHit>,
    pub failed: Vec<FailedProbe>,
}

fn probe_seed(base: u64, parent: usize, m: usize, direction: usize, sign: i8) -> u64 {
    // splitmix64 finalizer over the probe coordinates
    let mut z = base
        ^ (parent as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((m as u64) << 40)
        ^ ((direction as u64) << 8)
        ^ u64::from(sign > 0);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Probes `parent` for index-`m` stationary points.
///
/// `unstable` holds the parent's unstable directions, largest eigenvalue
/// first. Each direction `v_i` with `m < i <= parent.index` is tried with
/// both signs; every run starts from the first `m` directions.
pub fn downward_search(
    field: &Arc<dyn ForceField>,
    parent: &SaddleNode,
    unstable: &DirectionFrame,
    m: usize,
    cfg: &LandscapeConfig,
) -> Result<SearchOutcome> {
    let k = parent.index();
    if m >= k {
        return Err(SaddleError::InvalidArgument(format!(
            "target index {m} must be below the parent index {k}"
        )));
    }
    if unstable.count() != k {
        return Err(SaddleError::InvalidArgument(format!(
            "parent has index {k} but {} unstable directions were given",
            unstable.count()
        )));
    }
    cfg.validate()?;
    let probes: Vec<(usize, i8)> = (m + 1..=k).flat_map(|i| [(i, 1i8), (i, -1i8)]).collect();
    let run = |&(direction, sign): &(usize, i8)| probe(field, parent, unstable, m, direction, sign, cfg);
    let results: Vec<Result<std::result::Result<ProbeHit, FailedProbe>>> = if field.reentrant() {
        probes.par_iter().map(run).collect()
    } else {
        probes.iter().map(run).collect()
    };
    let mut outcome = SearchOutcome::default();
    for r in results {
        match r? {
            Ok(hit) => outcome.hits.push(hit),
            Err(failed) => outcome.failed.push(failed),
        }
    }
    Ok(outcome)
}

fn probe(
    field: &Arc<dyn ForceField>,
    parent: &SaddleNode,
    unstable: &DirectionFrame,
    m: usize,
    direction: usize,
    sign: i8,
    cfg: &LandscapeConfig,
) -> Result<std::result::Result<ProbeHit, FailedProbe>> {
    let failed = |status: Option<RunStatus>, reason: String| FailedProbe {
        parent: parent.id,
        target_index: m,
        direction,
        sign,
        status,
        reason,
    };
    let x_star = parent.record.point();
    let start = &x_star + &unstable.vectors()[direction - 1] * (f64::from(sign) * cfg.perturb_eps);
    let mut params = cfg.sd.clone();
    params.k = m;
    params.record_trajectory = false;
    let init = SdState::new(start.clone(), unstable.truncated(m), 0, &params)?;
    let oracle = ForceOracle::from_arc(field.clone());

    let run = match &cfg.engine {
        SearchEngine::Sd => run_sd(&oracle, &init, &params, None)?,
        SearchEngine::Gpsd { template, sampler } => {
            let mut gp = template.clone();
            gp.sd = params;
            gp.initial_region = TrustRegion::new(start, template.initial_region.half_width)?;
            gp.seed = probe_seed(cfg.seed, parent.id, m, direction, sign);
            match run_gpsd(&oracle, &init, &gp, sampler.as_ref(), None) {
                Ok(res) => res.run,
                Err(e) => return Ok(Err(failed(None, e.to_string()))),
            }
        }
    };
    if run.status != RunStatus::Converged {
        let reason = run.error.map_or_else(|| "did not converge".to_string(), |e| e.to_string());
        return Ok(Err(failed(Some(run.status), reason)));
    }
    let record = SaddleRecord::classify(field, &cfg.curvature, &run.final_state.x, run.n_f, run.n_steps)?;
    if !(record.residual_infnorm <= cfg.residual_bound) {
        return Ok(Err(failed(
            Some(run.status),
            format!("residual {:e} above bound {:e}", record.residual_infnorm, cfg.residual_bound),
        )));
    }
    if record.index >= parent.index() {
        return Ok(Err(failed(
            Some(run.status),
            format!("endpoint index {} is not below the parent index {}", record.index, parent.index()),
        )));
    }
    Ok(Ok(ProbeHit { record, direction, sign }))
}

/// Builds the downward landscape below the stationary point `root`.
///
/// Pending nodes are processed highest index first (ties by id), so node
/// ids depend only on the configuration and seed.
pub fn build_landscape(field: Arc<dyn ForceField>, root: &DVector<f64>, cfg: &LandscapeConfig) -> Result<LandscapeGraph> {
    cfg.validate()?;
    if root.len() != field.dim() {
        return Err(SaddleError::DimensionMismatch {
            expected: field.dim(),
            got: root.len(),
        });
    }
    let record = SaddleRecord::classify(&field, &cfg.curvature, root, 0, 0)?;
    if !(record.residual_infnorm <= cfg.residual_bound) {
        return Err(SaddleError::InvalidArgument(format!(
            "root is not stationary: |F|_inf = {:e}",
            record.residual_infnorm
        )));
    }
    let mut graph = LandscapeGraph::new();
    let (root_id, _) = register_node(&mut graph, record, cfg.dedup_tol);
    let mut pending = vec![root_id];

    while let Some(pos) = next_pending(&graph, &pending) {
        let id = pending.swap_remove(pos);
        let node = graph.nodes[id].clone();
        let k = node.index();
        if k == 0 {
            continue;
        }
        let unstable = unstable_directions(&field, &cfg.curvature, &node.record.point(), k)?;
        let targets: Vec<usize> = if cfg.exhaustive { (0..k).rev().collect() } else { vec![k - 1] };
        for m in targets {
            let outcome = downward_search(&field, &node, &unstable, m, cfg)?;
            graph.failed_probes.extend(outcome.failed);
            for hit in outcome.hits {
                if graph.nodes.len() >= cfg.max_nodes {
                    log::warn!("landscape truncated at {} nodes", cfg.max_nodes);
                    return Ok(graph);
                }
                let (child, is_new) = register_node(&mut graph, hit.record, cfg.dedup_tol);
                graph.link(SpawnEdge {
                    parent: id,
                    child,
                    direction: hit.direction,
                    sign: hit.sign,
                });
                if is_new {
                    pending.push(child);
                }
            }
        }
    }
    Ok(graph)
}

fn next_pending(graph: &LandscapeGraph, pending: &[usize]) -> Option<usize> {
    pending
        .iter()
        .enumerate()
        .max_by(|(_, &a), (_, &b)| {
            graph.nodes[a]
                .index()
                .cmp(&graph.nodes[b].index())
                .then(b.cmp(&a))
        })
        .map(|(pos, _)| pos)
}

pub fn export_json(graph: &LandscapeGraph) -> String {
    serde_json::to_string_pretty(graph).expect("landscape graphs serialize")
}

/// Graphviz rendering with one rank per index, highest index on top.
pub fn export_dot(graph: &LandscapeGraph) -> String {
    let mut out = String::from("digraph landscape {\n  rankdir=TB;\n  node [shape=circle];\n");
    let mut indices: Vec<usize> = graph.nodes.iter().map(SaddleNode::index).collect();
    indices.sort_unstable_by(|a, b| b.cmp(a));
    indices.dedup();
    for idx in indices {
        out.push_str("  { rank=same;");
        for id in graph.nodes_with_index(idx) {
            let _ = write!(out, " n{id};");
        }
        out.push_str(" }\n");
    }
    for n in &graph.nodes {
        let _ = writeln!(out, "  n{} [label=\"idx={}\"];", n.id, n.index());
    }
    for e in &graph.edges {
        let sign = if e.sign > 0 { '+' } else { '-' };
        let _ = writeln!(out, "  n{} -> n{} [label=\"v{}{}\"];", e.parent, e.child, e.direction, sign);
    }
    out.push_str("}\n");
    out
}
