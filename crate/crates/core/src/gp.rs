//! Multi-output Gaussian-process regression of force observations.
//!
//! Outputs are modelled as independent processes that share one squared
//! exponential kernel `(sigma_f, sigma_l)` and carry their own observation
//! noise. The kernel matrix `K(X, X)` is therefore common to every output,
//! and one symmetric eigendecomposition `K = U diag(lambda) U^T` factors every
//! noisy block `K + sigma_i^2 I = U diag(lambda + sigma_i^2) U^T` at once.
//!
//! Inputs are mapped affinely onto `[-1, 1]^N` (by default through the
//! trust region that produced them) and outputs are standardized per
//! component. Hyperparameters live in that normalized space; predictions are
//! always returned in original units.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaddleError};
use crate::force::{ForceField, OracleKind};

/// Two training locations closer than this in the max-norm are duplicates.
pub const DUPLICATE_TOL: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Squared-exponential kernel hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub sigma_f: f64,
    pub sigma_l: f64,
}

impl Hyperparams {
    pub fn new(sigma_f: f64, sigma_l: f64) -> Result<Self> {
        if !(sigma_f > 0.0 && sigma_l > 0.0 && sigma_f.is_finite() && sigma_l.is_finite()) {
            return Err(SaddleError::InvalidArgument(format!(
                "hyperparameters must be positive, got sigma_f={sigma_f}, sigma_l={sigma_l}"
            )));
        }
        Ok(Self { sigma_f, sigma_l })
    }
}

/// Per-output observation noise standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    sigmas: Vec<f64>,
}

impl NoiseModel {
    /// Clamps every entry to at least `floor`.
    pub fn new(sigmas: Vec<f64>, floor: f64) -> Self {
        Self {
            sigmas: sigmas.into_iter().map(|s| s.max(floor)).collect(),
        }
    }

    pub fn uniform(outputs: usize, sigma: f64) -> Self {
        Self {
            sigmas: vec![sigma; outputs],
        }
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }
}

/// Paired sample locations and force observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    input_dim: usize,
    output_dim: usize,
    locations: Vec<DVector<f64>>,
    observations: Vec<DVector<f64>>,
}

impl TrainingSet {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            locations: Vec::new(),
            observations: Vec::new(),
        }
    }

    pub fn from_pairs(
        input_dim: usize,
        output_dim: usize,
        locations: Vec<DVector<f64>>,
        observations: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if locations.len() != observations.len() {
            return Err(SaddleError::InvalidArgument(format!(
                "{} locations but {} observations",
                locations.len(),
                observations.len()
            )));
        }
        let mut set = Self::new(input_dim, output_dim);
        for (x, y) in locations.into_iter().zip(observations) {
            set.push(x, y)?;
        }
        Ok(set)
    }

    /// Appends a pair; duplicated locations are rejected.
    pub fn push(&mut self, x: DVector<f64>, y: DVector<f64>) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(SaddleError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        if y.len() != self.output_dim {
            return Err(SaddleError::DimensionMismatch {
                expected: self.output_dim,
                got: y.len(),
            });
        }
        if self.contains(&x) {
            return Err(SaddleError::DegenerateInput(
                "duplicate training location".into(),
            ));
        }
        self.locations.push(x);
        self.observations.push(y);
        Ok(())
    }

    /// Appends every pair of `other` whose location is new; returns how many were kept.
    pub fn merge(&mut self, other: &TrainingSet) -> Result<usize> {
        let mut added = 0;
        for (x, y) in other.iter() {
            if !self.contains(x) {
                self.push(x.clone(), y.clone())?;
                added += 1;
            }
        }
        Ok(added)
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.locations
            .iter()
            .any(|p| (p - x).amax() <= DUPLICATE_TOL)
    }

    /// The pairs whose location satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&DVector<f64>) -> bool) -> Self {
        let mut out = Self::new(self.input_dim, self.output_dim);
        for (x, y) in self.iter() {
            if keep(x) {
                out.locations.push(x.clone());
                out.observations.push(y.clone());
            }
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DVector<f64>, &DVector<f64>)> {
        self.locations.iter().zip(&self.observations)
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn locations(&self) -> &[DVector<f64>] {
        &self.locations
    }

    pub fn observations(&self) -> &[DVector<f64>] {
        &self.observations
    }

    /// Observations as an `m x N` matrix, one row per sample.
    fn observation_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.output_dim, |r, c| self.observations[r][c])
    }
}

/// `sigma_f^2 exp(-|x - x2|^2 / (2 sigma_l^2))`.
pub fn se_kernel(x: &DVector<f64>, x2: &DVector<f64>, hyper: &Hyperparams) -> f64 {
    let d2 = squared_distance(x, x2);
    hyper.sigma_f * hyper.sigma_f * (-d2 / (2.0 * hyper.sigma_l * hyper.sigma_l)).exp()
}

// without the temporary that `(a - b).norm_squared()` allocates
fn squared_distance(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Affine map of inputs onto the unit hypercube `[-1, 1]^N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub center: DVector<f64>,
    pub half_width: f64,
}

impl InputScaling {
    pub fn new(center: DVector<f64>, half_width: f64) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(SaddleError::InvalidArgument(format!(
                "half width must be positive, got {half_width}"
            )));
        }
        Ok(Self { center, half_width })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            center: DVector::zeros(dim),
            half_width: 1.0,
        }
    }

    /// Bounding-box scaling of the given points.
    pub fn from_points(points: &[DVector<f64>], dim: usize) -> Self {
        if points.is_empty() {
            return Self::identity(dim);
        }
        let mut lo = points[0].clone();
        let mut hi = points[0].clone();
        for p in points {
            for i in 0..dim {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let center = (&lo + &hi) * 0.5;
        let half = ((&hi - &lo) * 0.5).max();
        Self {
            center,
            half_width: if half > 0.0 { half } else { 1.0 },
        }
    }

    pub fn to_unit(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.center) / self.half_width
    }
}

/// Input map plus per-output standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input: InputScaling,
    pub output_mean: DVector<f64>,
    pub output_std: DVector<f64>,
}

impl Normalization {
    pub fn identity(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input: InputScaling::identity(input_dim),
            output_mean: DVector::zeros(output_dim),
            output_std: DVector::from_element(output_dim, 1.0),
        }
    }

    /// Standardizes outputs by the sample mean and standard deviation of
    /// `data`; a component with (near) zero spread keeps unit scale.
    pub fn from_data(data: &TrainingSet, input: InputScaling) -> Self {
        let n = data.output_dim();
        let m = data.len();
        if m == 0 {
            let mut out = Self::identity(data.input_dim(), n);
            out.input = input;
            return out;
        }
        let mut mean = DVector::zeros(n);
        for y in data.observations() {
            mean += y;
        }
        mean /= m as f64;
        let mut var = DVector::zeros(n);
        for y in data.observations() {
            let d = y - &mean;
            var += d.component_mul(&d);
        }
        var /= m as f64;
        let std = DVector::from_fn(n, |i, _| {
            let s = var[i].sqrt();
            if s > 1e-12 * mean[i].abs().max(1e-300) && s > 0.0 {
                s
            } else {
                1.0
            }
        });
        Self {
            input,
            output_mean: mean,
            output_std: std,
        }
    }
}

/// Settings for maximum-likelihood training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub min_points: usize,
    /// Random log-uniform starting points for a fresh fit.
    pub restarts: usize,
    /// Extra random starts on top of the warm start when refitting.
    pub warm_restarts: usize,
    pub max_iter: usize,
    pub sigma_f_bounds: (f64, f64),
    pub sigma_l_bounds: (f64, f64),
    /// Noise bounds in standardized output units; the lower bound is the floor.
    pub noise_bounds: (f64, f64),
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            min_points: 2,
            restarts: 4,
            warm_restarts: 0,
            max_iter: 200,
            sigma_f_bounds: (0.01, 100.0),
            sigma_l_bounds: (0.05, 5.0),
            noise_bounds: (1e-6, 1.0),
            seed: 0,
        }
    }
}

/// Log evidence and its gradient with respect to
/// `[ln sigma_f, ln sigma_l, ln sigma_s1, .., ln sigma_sN]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikelihood {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Eigen-factorization of the shared kernel matrix.
#[derive(Debug, Clone)]
struct KernelFactor {
    /// Eigenvalues of `K + jitter I`.
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    jitter: f64,
}

fn kernel_matrices(x: &[DVector<f64>], hyper: &Hyperparams) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = x.len();
    let mut k = DMatrix::zeros(m, m);
    let mut d2 = DMatrix::zeros(m, m);
    let sf2 = hyper.sigma_f * hyper.sigma_f;
    let inv = 1.0 / (2.0 * hyper.sigma_l * hyper.sigma_l);
    for i in 0..m {
        k[(i, i)] = sf2;
        for j in (i + 1)..m {
            let r2 = squared_distance(&x[i], &x[j]);
            let v = sf2 * (-r2 * inv).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
            d2[(i, j)] = r2;
            d2[(j, i)] = r2;
        }
    }
    (k, d2)
}

/// Factors `K`, escalating diagonal jitter from 1e-10 to 1e-4 (relative to
/// the mean diagonal) until every noisy block is numerically positive definite.
fn factor_kernel(k: &DMatrix<f64>, noise: &NoiseModel) -> Result<KernelFactor> {
    let m = k.nrows();
    if m == 0 {
        return Ok(KernelFactor {
            eigenvalues: DVector::zeros(0),
            eigenvectors: DMatrix::zeros(0, 0),
            jitter: 0.0,
        });
    }
    let eig = dense_eigen(k)?;
    let mean_diag = k.trace() / m as f64;
    let lmax = eig.eigenvalues.max().max(mean_diag);
    let min_noise = noise
        .sigmas()
        .iter()
        .fold(f64::INFINITY, |a, s| a.min(s * s));
    let lmin = eig.eigenvalues.min();
    let mut jitter = 1e-10 * mean_diag;
    loop {
        if lmin + jitter + min_noise > 1e-15 * lmax {
            let eigenvalues = eig.eigenvalues.map(|l| l + jitter);
            return Ok(KernelFactor {
                eigenvalues,
                eigenvectors: eig.eigenvectors,
                jitter,
            });
        }
        if jitter >= 1e-4 * mean_diag {
            return Err(SaddleError::FactorizationFailure { jitter });
        }
        jitter *= 10.0;
    }
}

struct DenseEigen {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

// Kernel matrices reach a few thousand rows, where faer's divide and conquer
// solver is several times faster than nalgebra's QR iteration.
fn dense_eigen(k: &DMatrix<f64>) -> Result<DenseEigen> {
    let m = k.nrows();
    let a = faer::Mat::<f64>::from_fn(m, m, |i, j| k[(i, j)]);
    let evd = a
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|_| SaddleError::FactorizationFailure { jitter: 0.0 })?;
    clear_upper_avx_state();
    let s = evd.S().column_vector();
    let u = evd.U();
    let eigenvalues = DVector::from_fn(m, |i, _| s[i]);
    if eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(SaddleError::FactorizationFailure { jitter: 0.0 });
    }
    Ok(DenseEigen {
        eigenvalues,
        eigenvectors: DMatrix::from_fn(m, m, |i, j| u[(i, j)]),
    })
}

// faer's AVX kernels can return with the upper register halves dirty. Every
// SSE instruction afterwards (libm's exp included) then pays a state
// transition, which made kernel evaluation about 20x slower.
#[cfg(target_arch = "x86_64")]
fn clear_upper_avx_state() {
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the instruction exists whenever AVX is available, checked above
        unsafe { std::arch::x86_64::_mm256_zeroupper() }
    }
}

#[cfg(not(target_arch = "x86_64"))]
fn clear_upper_avx_state() {}

/// Shared evaluation used by the public likelihood and by training.
fn likelihood_core(
    x: &[DVector<f64>],
    y: &DMatrix<f64>,
    hyper: &Hyperparams,
    noise: &NoiseModel,
    want_gradient: bool,
) -> Result<(LogLikelihood, KernelFactor)> {
    let m = x.len();
    let n_out = y.ncols();
    if noise.len() != n_out {
        return Err(SaddleError::DimensionMismatch {
            expected: n_out,
            got: noise.len(),
        });
    }
    let (k, d2) = kernel_matrices(x, hyper);
    let factor = factor_kernel(&k, noise)?;
    let u = &factor.eigenvectors;
    let lam = &factor.eigenvalues;

    // z = U^T Y, one column per output
    let z = u.transpose() * y;

    let mut value = 0.0;
    let mut gradient = vec![0.0; 2 + n_out];

    let (dk_l, diag_l) = if want_gradient {
        let inv_l2 = 1.0 / (hyper.sigma_l * hyper.sigma_l);
        let dk_l = k.component_mul(&d2) * inv_l2;
        let pu = &dk_l * u;
        let diag_l = DVector::from_fn(m, |j, _| u.column(j).dot(&pu.column(j)));
        (Some(dk_l), Some(diag_l))
    } else {
        (None, None)
    };

    for i in 0..n_out {
        let s2 = noise.sigmas()[i] * noise.sigmas()[i];
        let mut quad = 0.0;
        let mut logdet = 0.0;
        let mut tr_f = 0.0;
        let mut tr_l = 0.0;
        let mut tr_n = 0.0;
        let mut alpha_k_alpha = 0.0;
        let mut alpha_sq = 0.0;
        let mut coeff = DVector::zeros(m);
        for j in 0..m {
            let s = lam[j] + s2;
            let c = z[(j, i)] / s;
            coeff[j] = c;
            quad += z[(j, i)] * c;
            logdet += s.ln();
            if want_gradient {
                let kl = lam[j] - factor.jitter;
                tr_f += 2.0 * kl / s;
                tr_n += 1.0 / s;
                alpha_k_alpha += c * c * kl;
                alpha_sq += c * c;
                if let Some(d) = &diag_l {
                    tr_l += d[j] / s;
                }
            }
        }
        value += -0.5 * quad - 0.5 * logdet - 0.5 * m as f64 * LN_2PI;
        if want_gradient {
            gradient[0] += alpha_k_alpha - 0.5 * tr_f;
            if let Some(p) = &dk_l {
                let alpha = u * &coeff;
                let apa = alpha.dot(&(p * &alpha));
                gradient[1] += 0.5 * apa - 0.5 * tr_l;
            }
            gradient[2 + i] = s2 * (alpha_sq - tr_n);
        }
    }
    if !value.is_finite() {
        return Err(SaddleError::FactorizationFailure {
            jitter: factor.jitter,
        });
    }
    Ok((LogLikelihood { value, gradient }, factor))
}

/// Gaussian log evidence of `data`, summed over the independent outputs,
/// with its analytic gradient. Evaluated on the data as given.
pub fn log_marginal_likelihood(
    data: &TrainingSet,
    hyper: &Hyperparams,
    noise: &NoiseModel,
) -> Result<LogLikelihood> {
    if data.is_empty() {
        return Err(SaddleError::InvalidArgument(
            "likelihood needs at least one observation".into(),
        ));
    }
    let y = data.observation_matrix();
    likelihood_core(data.locations(), &y, hyper, noise, true).map(|(ll, _)| ll)
}

/// Posterior mean and latent variance per output, in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

/// A trained surrogate: data, normalization, hyperparameters and the cached
/// factorization. Immutable once built.
#[derive(Debug, Clone)]
pub struct GpSurrogate {
    data: TrainingSet,
    normalization: Normalization,
    hyper: Hyperparams,
    noise: NoiseModel,
    log_likelihood: f64,
    unit_locations: Vec<DVector<f64>>,
    factor: KernelFactor,
    /// `(K + Sigma_i)^{-1} y_i` in normalized units, one column per output.
    alpha: DMatrix<f64>,
}

/// Serializable snapshot of a surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpState {
    pub locations: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
    pub hyperparams: Hyperparams,
    pub noises: Vec<f64>,
    pub normalization: Normalization,
}

impl GpSurrogate {
    /// The zero-data prior: mean 0, variance `sigma_f^2` everywhere.
    pub fn prior(input_dim: usize, output_dim: usize, hyper: Hyperparams) -> Self {
        Self {
            data: TrainingSet::new(input_dim, output_dim),
            normalization: Normalization::identity(input_dim, output_dim),
            hyper,
            noise: NoiseModel::uniform(output_dim, 0.0),
            log_likelihood: 0.0,
            unit_locations: Vec::new(),
            factor: KernelFactor {
                eigenvalues: DVector::zeros(0),
                eigenvectors: DMatrix::zeros(0, 0),
                jitter: 0.0,
            },
            alpha: DMatrix::zeros(0, output_dim),
        }
    }

    /// Conditions on `data` with fixed hyperparameters and normalization.
    pub fn condition(
        data: TrainingSet,
        hyper: Hyperparams,
        noise: NoiseModel,
        normalization: Normalization,
    ) -> Result<Self> {
        let unit_locations: Vec<_> = data
            .locations()
            .iter()
            .map(|x| normalization.input.to_unit(x))
            .collect();
        let y = standardized(&data, &normalization);
        let (ll, factor) = likelihood_core(&unit_locations, &y, &hyper, &noise, false)?;
        let alpha = solve_all(&factor, &noise, &y);
        Ok(Self {
            data,
            normalization,
            hyper,
            noise,
            log_likelihood: ll.value,
            unit_locations,
            factor,
            alpha,
        })
    }

    pub fn data(&self) -> &TrainingSet {
        &self.data
    }

    pub fn hyperparams(&self) -> Hyperparams {
        self.hyper
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// Log evidence of the standardized data at the stored hyperparameters.
    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn input_dim(&self) -> usize {
        self.data.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.data.output_dim()
    }

    /// Prior variance of each output in original units.
    pub fn prior_variance(&self) -> DVector<f64> {
        let sf2 = self.hyper.sigma_f * self.hyper.sigma_f;
        self.normalization.output_std.map(|s| sf2 * s * s)
    }

    fn cross_kernel(&self, x: &DVector<f64>) -> DVector<f64> {
        let u = self.normalization.input.to_unit(x);
        DVector::from_iterator(
            self.unit_locations.len(),
            self.unit_locations.iter().map(|p| se_kernel(&u, p, &self.hyper)),
        )
    }

    /// Posterior mean only.
    pub fn predict_mean(&self, x: &DVector<f64>) -> DVector<f64> {
        let ks = self.cross_kernel(x);
        let mean_n = self.alpha.tr_mul(&ks);
        &self.normalization.output_mean + mean_n.component_mul(&self.normalization.output_std)
    }

    /// Posterior mean and (latent) variance at `x`.
    pub fn predict(&self, x: &DVector<f64>) -> Prediction {
        let ks = self.cross_kernel(x);
        let n_out = self.output_dim();
        let mean_n = self.alpha.tr_mul(&ks);
        let w = self.factor.eigenvectors.tr_mul(&ks);
        let sf2 = self.hyper.sigma_f * self.hyper.sigma_f;
        let var_n = DVector::from_fn(n_out, |i, _| {
            let s2 = self.noise.sigmas()[i].powi(2);
            let reduction: f64 = w
                .iter()
                .zip(self.factor.eigenvalues.iter())
                .map(|(wj, lj)| wj * wj / (lj + s2))
                .sum();
            (sf2 - reduction).max(0.0)
        });
        let std = &self.normalization.output_std;
        Prediction {
            mean: &self.normalization.output_mean + mean_n.component_mul(std),
            variance: var_n.component_mul(&std.component_mul(std)),
        }
    }

    /// Largest predictive variance over the outputs at `x`.
    pub fn uncertainty_radius(&self, x: &DVector<f64>) -> f64 {
        self.predict(x).variance.max()
    }

    /// Refits on the retained old data plus `additions`, warm-starting the
    /// optimizer from the current hyperparameters. Additions that duplicate a
    /// retained location are dropped.
    pub fn update_data(
        &self,
        additions: &TrainingSet,
        keep: impl Fn(&DVector<f64>) -> bool,
        config: &FitConfig,
        input: Option<InputScaling>,
    ) -> Result<Self> {
        let mut data = self.data.filtered(keep);
        data.merge(additions)?;
        let input = input.unwrap_or_else(|| self.normalization.input.clone());
        fit_from(data, config, input, Some((self.hyper, self.noise.clone())))
    }

    pub fn to_state(&self) -> GpState {
        GpState {
            locations: self.data.locations().iter().map(|v| v.as_slice().to_vec()).collect(),
            observations: self
                .data
                .observations()
                .iter()
                .map(|v| v.as_slice().to_vec())
                .collect(),
            hyperparams: self.hyper,
            noises: self.noise.sigmas().to_vec(),
            normalization: self.normalization.clone(),
        }
    }

    pub fn from_state(state: &GpState) -> Result<Self> {
        let input_dim = state.normalization.input.center.len();
        let output_dim = state.noises.len();
        let data = TrainingSet::from_pairs(
            input_dim,
            output_dim,
            state.locations.iter().map(|v| DVector::from_vec(v.clone())).collect(),
            state.observations.iter().map(|v| DVector::from_vec(v.clone())).collect(),
        )?;
        let noise = NoiseModel {
            sigmas: state.noises.clone(),
        };
        Self::condition(data, state.hyperparams, noise, state.normalization.clone())
    }
}

impl ForceField for GpSurrogate {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn kind(&self) -> OracleKind {
        OracleKind::Surrogate
    }

    fn force(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.predict_mean(x))
    }
}

fn standardized(data: &TrainingSet, norm: &Normalization) -> DMatrix<f64> {
    DMatrix::from_fn(data.len(), data.output_dim(), |r, c| {
        (data.observations()[r][c] - norm.output_mean[c]) / norm.output_std[c]
    })
}

fn solve_all(factor: &KernelFactor, noise: &NoiseModel, y: &DMatrix<f64>) -> DMatrix<f64> {
    let u = &factor.eigenvectors;
    let mut z = u.tr_mul(y);
    for i in 0..y.ncols() {
        let s2 = noise.sigmas()[i].powi(2);
        for j in 0..z.nrows() {
            z[(j, i)] /= factor.eigenvalues[j] + s2;
        }
    }
    u * z
}

/// Maximum-likelihood fit with multi-start projected gradient ascent.
///
/// Inputs are scaled by `input` when given, otherwise by the bounding box
/// of the data.
pub fn fit(data: &TrainingSet, config: &FitConfig, input: Option<InputScaling>) -> Result<GpSurrogate> {
    let input = input.unwrap_or_else(|| InputScaling::from_points(data.locations(), data.input_dim()));
    fit_from(data.clone(), config, input, None)
}

fn fit_from(
    data: TrainingSet,
    config: &FitConfig,
    input: InputScaling,
    warm: Option<(Hyperparams, NoiseModel)>,
) -> Result<GpSurrogate> {
    if data.len() < config.min_points.max(1) {
        return Err(SaddleError::FitFailure(format!(
            "{} training points, need at least {}",
            data.len(),
            config.min_points.max(1)
        )));
    }
    let normalization = Normalization::from_data(&data, input);
    let unit: Vec<_> = data
        .locations()
        .iter()
        .map(|x| normalization.input.to_unit(x))
        .collect();
    let y = standardized(&data, &normalization);
    let n_out = data.output_dim();

    let ln_sl = (config.sigma_l_bounds.0.ln(), config.sigma_l_bounds.1.ln());
    let mut inner_bounds = vec![(config.sigma_f_bounds.0.ln(), config.sigma_f_bounds.1.ln())];
    inner_bounds.extend(std::iter::repeat_n(
        (config.noise_bounds.0.ln(), config.noise_bounds.1.ln()),
        n_out,
    ));

    // inner starting points over (ln sigma_f, ln sigma_s..)
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut starts: Vec<Vec<f64>> = Vec::new();
    let noise_hi = config.noise_bounds.1.min(1e-1).max(config.noise_bounds.0).ln();
    let (grid, random_starts) = match &warm {
        Some((h, n)) => {
            let mut p = vec![h.sigma_f.ln()];
            p.extend(n.sigmas().iter().map(|s| s.max(config.noise_bounds.0).ln()));
            starts.push(p);
            let c = h.sigma_l.ln().clamp(ln_sl.0, ln_sl.1);
            let lo = (c - 4f64.ln()).max(ln_sl.0);
            let hi = (c + 4f64.ln()).min(ln_sl.1);
            (log_grid(lo, hi, 5), config.warm_restarts)
        }
        None => {
            let mut p = vec![0.0];
            p.extend(std::iter::repeat_n(1e-2f64.ln().max(inner_bounds[1].0), n_out));
            starts.push(p);
            (log_grid(ln_sl.0, ln_sl.1, 13), config.restarts)
        }
    };
    for _ in 0..random_starts {
        let mut p = vec![rng.random_range(inner_bounds[0].0..=inner_bounds[0].1)];
        let ln_noise = rng.random_range(inner_bounds[1].0..=noise_hi);
        p.extend(std::iter::repeat_n(ln_noise, n_out));
        starts.push(p);
    }

    // profile likelihood in ln sigma_l: one eigendecomposition per value
    let mut carried: Option<Vec<f64>> = None;
    let mut profile = |ln_l: f64, explore: bool| -> Option<(f64, Vec<f64>)> {
        let pr = KernelProfile::new(&unit, &y, ln_l.exp()).ok()?;
        let objective = |p: &[f64]| pr.evaluate(p);
        let mut best: Option<(Vec<f64>, f64)> = None;
        let candidates: Vec<&Vec<f64>> = if explore || carried.is_none() {
            carried.iter().chain(starts.iter()).collect()
        } else {
            carried.iter().collect()
        };
        for s in candidates {
            if let Some((p, v)) = ascend(&objective, s.clone(), &inner_bounds, config.max_iter) {
                if best.as_ref().is_none_or(|(_, bv)| v > *bv) {
                    best = Some((p, v));
                }
            }
        }
        let (p, v) = best?;
        carried = Some(p.clone());
        Some((v, p))
    };

    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    let mut scanned = Vec::with_capacity(grid.len());
    for &g in &grid {
        let r = profile(g, true);
        if let Some((v, p)) = &r {
            if best.as_ref().is_none_or(|(bv, _, _)| v > bv) {
                best = Some((*v, g, p.clone()));
            }
        }
        scanned.push(r.map(|(v, _)| v));
    }
    let Some((_, g_best, _)) = best.clone() else {
        return Err(SaddleError::FitFailure(
            "no length scale produced a finite likelihood".into(),
        ));
    };

    // golden-section refinement between the neighbours of the best grid point
    if grid.len() > 1 {
        let i = grid.iter().position(|&g| g == g_best).unwrap_or(0);
        let mut a = grid[i.saturating_sub(1)];
        let mut b = grid[(i + 1).min(grid.len() - 1)];
        const INV_PHI: f64 = 0.618_033_988_749_894_8;
        let mut c = b - INV_PHI * (b - a);
        let mut d = a + INV_PHI * (b - a);
        let mut fc = profile(c, false);
        let mut fd = profile(d, false);
        for _ in 0..GOLDEN_STEPS {
            if b - a < GOLDEN_TOL {
                break;
            }
            for (g, r) in [(c, &fc), (d, &fd)] {
                if let Some((v, p)) = r {
                    if best.as_ref().is_none_or(|(bv, _, _)| v > bv) {
                        best = Some((*v, g, p.clone()));
                    }
                }
            }
            let vc = fc.as_ref().map_or(f64::NEG_INFINITY, |r| r.0);
            let vd = fd.as_ref().map_or(f64::NEG_INFINITY, |r| r.0);
            if vc >= vd {
                b = d;
                d = c;
                fd = fc;
                c = b - INV_PHI * (b - a);
                fc = profile(c, false);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + INV_PHI * (b - a);
                fd = profile(d, false);
            }
        }
        for (g, r) in [(c, &fc), (d, &fd)] {
            if let Some((v, p)) = r {
                if best.as_ref().is_none_or(|(bv, _, _)| v > bv) {
                    best = Some((*v, g, p.clone()));
                }
            }
        }
    }

    let (_, ln_l, p) = best.expect("checked above");
    let hyper = Hyperparams {
        sigma_f: p[0].exp(),
        sigma_l: ln_l.exp(),
    };
    let noise = NoiseModel {
        sigmas: p[1..].iter().map(|v| v.exp()).collect(),
    };
    GpSurrogate::condition(data, hyper, noise, normalization)
}

const GOLDEN_STEPS: usize = 12;
// bracket width in ln sigma_l below which refinement stops (about 2 percent)
const GOLDEN_TOL: f64 = 0.02;

fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count < 2 || hi <= lo {
        return vec![lo];
    }
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Spectrum of the unit-amplitude kernel matrix at one length scale with the
/// standardized observations rotated into its eigenbasis. Since
/// `K = sigma_f^2 K_1`, the evidence for any `(sigma_f, sigma_s)` then costs
/// `O(N m)`.
struct KernelProfile {
    /// Eigenvalues of `K_1 + jitter I`.
    spectrum: DVector<f64>,
    /// Squared coordinates `(U^T y_i)_j^2`, one column per output.
    rotated_sq: DMatrix<f64>,
}

impl KernelProfile {
    fn new(unit: &[DVector<f64>], y: &DMatrix<f64>, sigma_l: f64) -> Result<Self> {
        let (k1, _) = kernel_matrices(unit, &Hyperparams { sigma_f: 1.0, sigma_l });
        let eig = dense_eigen(&k1)?;
        let lmax = eig.eigenvalues.max().max(1.0);
        let lmin = eig.eigenvalues.min();
        let mut jitter = 1e-10;
        while lmin + jitter <= 1e-15 * lmax {
            if jitter >= 1e-4 {
                return Err(SaddleError::FactorizationFailure { jitter });
            }
            jitter *= 10.0;
        }
        let z = eig.eigenvectors.tr_mul(y);
        Ok(Self {
            spectrum: eig.eigenvalues.map(|l| l + jitter),
            rotated_sq: z.map(|v| v * v),
        })
    }

    /// Evidence and gradient in `[ln sigma_f, ln sigma_s1..]`.
    fn evaluate(&self, p: &[f64]) -> Result<LogLikelihood> {
        let m = self.spectrum.len();
        let n_out = self.rotated_sq.ncols();
        let sf2 = (2.0 * p[0]).exp();
        let mut value = -0.5 * (m * n_out) as f64 * LN_2PI;
        let mut gradient = vec![0.0; 1 + n_out];
        for i in 0..n_out {
            let s2 = (2.0 * p[1 + i]).exp();
            let col = self.rotated_sq.column(i);
            let mut g_noise = 0.0;
            for j in 0..m {
                let mu = self.spectrum[j];
                let s = sf2 * mu + s2;
                let q = col[j] / s;
                value -= 0.5 * (q + s.ln());
                let t = (q - 1.0) / s;
                gradient[0] += sf2 * mu * t;
                g_noise += t;
            }
            gradient[1 + i] = s2 * g_noise;
        }
        if !value.is_finite() {
            return Err(SaddleError::FactorizationFailure { jitter: 0.0 });
        }
        Ok(LogLikelihood { value, gradient })
    }
}

fn project(p: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, (lo, hi)) in p.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Projected gradient ascent with Barzilai-Borwein trial steps and Armijo
/// backtracking. Returns the best point and value, or `None` when even the
/// start cannot be evaluated.
fn ascend(
    objective: &dyn Fn(&[f64]) -> Result<LogLikelihood>,
    mut p: Vec<f64>,
    bounds: &[(f64, f64)],
    max_iter: usize,
) -> Option<(Vec<f64>, f64)> {
    project(&mut p, bounds);
    let first = objective(&p).ok()?;
    let mut f = first.value;
    let mut g = first.gradient;
    let gmax = g.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut step = 0.1 / gmax.max(1.0);

    for _ in 0..max_iter {
        let mut pg = p.iter().zip(&g).map(|(a, b)| a + b).collect::<Vec<_>>();
        project(&mut pg, bounds);
        let pg_norm = pg.iter().zip(&p).fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        if pg_norm < 1e-6 {
            break;
        }

        let mut accepted = None;
        for _ in 0..40 {
            let mut cand: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a + step * b).collect();
            project(&mut cand, bounds);
            let dir: f64 = cand.iter().zip(&p).zip(&g).map(|((c, a), b)| (c - a) * b).sum();
            let moved = cand.iter().zip(&p).fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
            if moved < 1e-14 {
                break;
            }
            if let Ok(ll) = objective(&cand) {
                if ll.value >= f + 1e-4 * dir {
                    accepted = Some((cand, ll));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, ll)) = accepted else {
            break;
        };
        let s: Vec<f64> = cand.iter().zip(&p).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = ll.gradient.iter().zip(&g).map(|(a, b)| a - b).collect();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let gain = ll.value - f;
        p = cand;
        f = ll.value;
        g = ll.gradient;
        if gain.abs() < 1e-10 * (1.0 + f.abs()) {
            break;
        }
        // ascent on a locally concave objective gives s.y < 0
        step = if sy < 0.0 { (ss / -sy).clamp(1e-8, 1e4) } else { (step * 2.0).min(1e4) };
    }
    Some((p, f))
}
