//! The force abstraction: analytic, simulation-backed or surrogate fields
//! behind one query-counting oracle, plus the dimer Hessian-vector product.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaddleError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Analytic,
    Simulation,
    Surrogate,
}

/// A vector field `F: R^N -> R^N`.
pub trait ForceField: Send + Sync {
    fn dim(&self) -> usize;

    fn kind(&self) -> OracleKind {
        OracleKind::Analytic
    }

    /// Whether concurrent calls are allowed. Simulation-backed fields
    /// default to serialized access.
    fn reentrant(&self) -> bool {
        self.kind() != OracleKind::Simulation
    }

    fn force(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
}

/// Adapts a closure into a [`ForceField`].
pub struct FnForce<F> {
    dim: usize,
    kind: OracleKind,
    f: F,
}

impl<F> FnForce<F>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self {
            dim,
            kind: OracleKind::Analytic,
            f,
        }
    }

    pub fn with_kind(mut self, kind: OracleKind) -> Self {
        self.kind = kind;
        self
    }
}

impl<F> ForceField for FnForce<F>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> OracleKind {
        self.kind
    }

    fn force(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok((self.f)(x))
    }
}

/// A force field with an exact, monotone query counter.
///
/// Every call to [`ForceOracle::evaluate`] adds exactly one to the counter,
/// whatever the dimension. Non-reentrant fields are evaluated under a lock.
pub struct ForceOracle {
    field: Arc<dyn ForceField>,
    queries: AtomicU64,
    gate: Mutex<()>,
}

impl fmt::Debug for ForceOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForceOracle")
            .field("dim", &self.dim())
            .field("kind", &self.kind())
            .field("queries", &self.queries())
            .finish()
    }
}

impl ForceOracle {
    pub fn new(field: impl ForceField + 'static) -> Self {
        Self::from_arc(Arc::new(field))
    }

    /// Shares a field with other oracles; each oracle keeps its own counter.
    pub fn from_arc(field: Arc<dyn ForceField>) -> Self {
        Self {
            field,
            queries: AtomicU64::new(0),
            gate: Mutex::new(()),
        }
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn kind(&self) -> OracleKind {
        self.field.kind()
    }

    pub fn reentrant(&self) -> bool {
        self.field.reentrant()
    }

    pub fn field(&self) -> &Arc<dyn ForceField> {
        &self.field
    }

    /// Number of `evaluate` calls so far.
    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }

    /// Evaluates `F(x)` and counts one query.
    pub fn evaluate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.dim();
        if x.len() != n {
            return Err(SaddleError::DimensionMismatch {
                expected: n,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SaddleError::InvalidArgument(
                "force queried at a non-finite point".into(),
            ));
        }
        self.queries.fetch_add(1, Ordering::SeqCst);
        let out = if self.reentrant() {
            self.field.force(x)?
        } else {
            let _guard = self.gate.lock().unwrap_or_else(|e| e.into_inner());
            self.field.force(x)?
        };
        if out.len() != n {
            return Err(SaddleError::DimensionMismatch {
                expected: n,
                got: out.len(),
            });
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(SaddleError::SimulationFailure(
                "force returned a non-finite value".into(),
            ));
        }
        Ok(out)
    }
}

/// Result of a dimer Hessian-vector estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct DimerEval {
    pub hv: DVector<f64>,
    pub length: f64,
}

/// `(F(x + l v) - F(x - l v)) / (2 l)`, costing exactly two queries.
pub fn dimer_hv(oracle: &ForceOracle, x: &DVector<f64>, v: &DVector<f64>, l: f64) -> Result<DimerEval> {
    if !(l > 0.0) {
        return Err(SaddleError::InvalidArgument(format!(
            "dimer length must be positive, got {l}"
        )));
    }
    let vn = v.norm();
    if (vn - 1.0).abs() > 1e-10 {
        return Err(SaddleError::InvalidArgument(format!(
            "dimer direction must be a unit vector, |v| = {vn}"
        )));
    }
    let plus = oracle.evaluate(&(x + v * l))?;
    let minus = oracle.evaluate(&(x - v * l))?;
    let hv = (plus - minus) / (2.0 * l);
    Ok(DimerEval { hv, length: l })
}
