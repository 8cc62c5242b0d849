//! Continuous-time cognitive model: behavioral parameters, rate-matrix
//! construction, the Lindblad generator, and an exact propagator used as the
//! discretization oracle.
//!
//! The model lives on a d-dimensional Hilbert space with d = n·m, where n is
//! the number of states of nature and m the number of actions. Basis index
//! r ∈ {0..d−1} maps to the pair (state l, action j) in state-major order:
//!
//! ```text
//! r = l·m + j,   l ∈ {0..n−1},  j ∈ {0..m−1}
//! ```
//!
//! All modules in this crate share this single ordering.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::{
    c, dagger, eye, hermitian_eigenvalues, kron, matrix_exp, max_abs, trace, unvec_col, vec_col,
    CMat,
};

/// Hermiticity tolerance for density operators (max-abs of ρ − ρ†).
pub const HERMITICITY_TOL: f64 = 1e-10;
/// Trace tolerance for density operators.
pub const TRACE_TOL: f64 = 1e-9;
/// Eigenvalue floor for density operators.
pub const PSD_TOL: f64 = -1e-10;

/// Problem dimensions: n states of nature, m actions, d = n·m basis states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Number of states of nature (n ≥ 1).
    pub states: usize,
    /// Number of actions (m ≥ 1).
    pub actions: usize,
}

impl ModelDims {
    pub fn new(states: usize, actions: usize) -> Result<Self> {
        if states == 0 {
            return Err(CoreError::InvalidParameter {
                name: "states",
                value: 0.0,
                requirement: "must be at least 1",
            });
        }
        if actions == 0 {
            return Err(CoreError::InvalidParameter {
                name: "actions",
                value: 0.0,
                requirement: "must be at least 1",
            });
        }
        Ok(Self { states, actions })
    }

    /// Hilbert-space dimension d = n·m.
    #[inline]
    pub fn dim(&self) -> usize {
        self.states * self.actions
    }

    /// Basis index of the (state, action) pair, state-major.
    #[inline]
    pub fn basis_index(&self, state: usize, action: usize) -> usize {
        debug_assert!(state < self.states && action < self.actions);
        state * self.actions + action
    }

    /// Inverse of [`basis_index`](Self::basis_index).
    #[inline]
    pub fn state_action(&self, r: usize) -> (usize, usize) {
        debug_assert!(r < self.dim());
        (r / self.actions, r % self.actions)
    }
}

/// Behavioral parameters of the decision maker.
///
/// `alpha` weights quantum (commutator) against dissipative dynamics,
/// `lambda` is the utility-discrimination exponent, and `phi` weights
/// state-discrimination against action preference in the rate matrix.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BehaviorParams {
    pub alpha: f64,
    pub lambda: f64,
    pub phi: f64,
}

impl BehaviorParams {
    pub fn new(alpha: f64, lambda: f64, phi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
            return Err(CoreError::InvalidParameter {
                name: "alpha",
                value: alpha,
                requirement: "must lie in [0, 1]",
            });
        }
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(CoreError::InvalidParameter {
                name: "lambda",
                value: lambda,
                requirement: "must be finite and nonnegative (use the argmax mode for λ → ∞)",
            });
        }
        if !(phi > 0.0 && phi < 1.0) {
            return Err(CoreError::InvalidParameter {
                name: "phi",
                value: phi,
                requirement: "must lie strictly inside (0, 1)",
            });
        }
        Ok(Self { alpha, lambda, phi })
    }
}

/// Strictly positive utility table, entry `u[(action j, state l)]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilityTable {
    values: Array2<f64>,
}

impl UtilityTable {
    /// `values` has shape m×n (rows: actions, columns: states).
    pub fn new(values: Array2<f64>) -> Result<Self> {
        for &v in values.iter() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CoreError::InvalidParameter {
                    name: "utility",
                    value: v,
                    requirement: "all utilities must be strictly positive and finite",
                });
            }
        }
        Ok(Self { values })
    }

    pub fn actions(&self) -> usize {
        self.values.nrows()
    }

    pub fn states(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Probability vector over states of nature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefVector {
    probs: Vec<f64>,
}

impl BeliefVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let mut sum = 0.0;
        for &p in &probs {
            if p < 0.0 || !p.is_finite() {
                return Err(CoreError::InvalidParameter {
                    name: "belief entry",
                    value: p,
                    requirement: "must be nonnegative and finite",
                });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(CoreError::InvalidParameter {
                name: "belief sum",
                value: sum,
                requirement: "must equal 1 within 1e-12",
            });
        }
        Ok(Self { probs })
    }

    pub fn uniform(states: usize) -> Self {
        Self {
            probs: vec![1.0 / states as f64; states],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Hermitian, PSD, trace-one psychological state.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    mat: CMat,
}

impl DensityOperator {
    /// Validating constructor.
    pub fn new(mat: CMat) -> Result<Self> {
        let rho = Self { mat };
        rho.validate()?;
        Ok(rho)
    }

    /// Wrap without validation. Callers take responsibility for validity;
    /// trajectory code re-validates on a sampling schedule.
    pub fn from_unchecked(mat: CMat) -> Self {
        Self { mat }
    }

    /// The maximally mixed state I/d used as the initial condition.
    pub fn maximally_mixed(d: usize) -> Self {
        Self {
            mat: eye(d).mapv(|z| z / c(d as f64)),
        }
    }

    /// Pure basis state |r⟩⟨r|.
    pub fn pure_basis(d: usize, r: usize) -> Self {
        let mut m: CMat = Array2::zeros((d, d));
        m[[r, r]] = c(1.0);
        Self { mat: m }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &CMat {
        &self.mat
    }

    pub fn into_matrix(self) -> CMat {
        self.mat
    }

    /// Diagonal in the state-action basis, as real occupation probabilities.
    pub fn diagonal(&self) -> Vec<f64> {
        self.mat.diag().iter().map(|z| z.re).collect()
    }

    /// Check Hermiticity (≤ 1e-10), unit trace (≤ 1e-9), and PSD (≥ −1e-10).
    pub fn validate(&self) -> Result<()> {
        let m = &self.mat;
        if m.nrows() != m.ncols() {
            return Err(CoreError::InvalidDensity(format!(
                "not square: {}×{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let herm = max_abs(&(m - &dagger(m)));
        if herm > HERMITICITY_TOL {
            return Err(CoreError::InvalidDensity(format!(
                "Hermiticity violated: ‖ρ−ρ†‖_max = {herm:.3e}"
            )));
        }
        let tr = trace(m);
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(CoreError::InvalidDensity(format!(
                "trace = {tr} (must be 1 within {TRACE_TOL:.0e})"
            )));
        }
        let eigs = hermitian_eigenvalues(m);
        if let Some(&min) = eigs.first() {
            if min < PSD_TOL {
                return Err(CoreError::InvalidDensity(format!(
                    "negative eigenvalue {min:.3e}"
                )));
            }
        }
        Ok(())
    }
}

/// Nonnegative cognitive transition-rate matrix.
///
/// Entry (m, n) is the rate of the jump carrying occupation from basis state
/// n to basis state m. Columns sum to one by construction.
#[derive(Debug, Clone)]
pub struct CognitiveRateMatrix {
    rates: Array2<f64>,
}

impl CognitiveRateMatrix {
    pub fn new(rates: Array2<f64>) -> Result<Self> {
        if rates.nrows() != rates.ncols() {
            return Err(CoreError::DimensionMismatch {
                context: "rate matrix",
                expected: rates.nrows(),
                got: rates.ncols(),
            });
        }
        for &v in rates.iter() {
            if v < 0.0 || !v.is_finite() {
                return Err(CoreError::InvalidParameter {
                    name: "rate",
                    value: v,
                    requirement: "rates must be nonnegative and finite",
                });
            }
        }
        Ok(Self { rates })
    }

    pub fn dim(&self) -> usize {
        self.rates.nrows()
    }

    pub fn rates(&self) -> &Array2<f64> {
        &self.rates
    }
}

/// The Lindblad generator: Hamiltonian, mixing weight, and jump rates.
///
/// The jump operator for the (m, n) entry is the rank-one |m⟩⟨n|; it is
/// implicit in the indices and never materialized. Self-jumps (m = n) are
/// retained and act as pure dephasing.
#[derive(Debug, Clone)]
pub struct LindbladGenerator {
    dims: ModelDims,
    hamiltonian: CMat,
    alpha: f64,
    rates: Array2<f64>,
}

impl LindbladGenerator {
    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn dim(&self) -> usize {
        self.dims.dim()
    }

    pub fn hamiltonian(&self) -> &CMat {
        &self.hamiltonian
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rates(&self) -> &Array2<f64> {
        &self.rates
    }

    /// Jump list {(m, n, γ_mn) : γ_mn > 0}, row-major order.
    pub fn jumps(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let d = self.dim();
        (0..d).flat_map(move |m| {
            (0..d).filter_map(move |n| {
                let g = self.rates[[m, n]];
                (g > 0.0).then_some((m, n, g))
            })
        })
    }

    /// Column sums Σ_m γ_mn, the total outflow rate from each basis state.
    pub fn column_sums(&self) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|n| (0..d).map(|m| self.rates[[m, n]]).sum())
            .collect()
    }
}

/// Block-diagonal Hamiltonian: n diagonal blocks, each the m×m all-ones
/// matrix. Entries are real.
pub fn build_hamiltonian(dims: ModelDims) -> CMat {
    let d = dims.dim();
    let m = dims.actions;
    let mut h: CMat = Array2::zeros((d, d));
    for l in 0..dims.states {
        for j1 in 0..m {
            for j2 in 0..m {
                h[[l * m + j1, l * m + j2]] = c(1.0);
            }
        }
    }
    h
}

/// Softmax action-choice probabilities p(a_j | E_l) ∝ u(a_j | E_l)^λ.
///
/// Returns an m×n column-stochastic matrix. Computed in log space so large λ
/// cannot overflow. λ must be finite; see [`action_choice_probs_argmax`] for
/// the hard-argmax limit.
pub fn action_choice_probs(util: &UtilityTable, lambda: f64) -> Result<Array2<f64>> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(CoreError::InvalidParameter {
            name: "lambda",
            value: lambda,
            requirement: "must be finite and nonnegative; use the argmax mode for λ = ∞",
        });
    }
    let (m, n) = (util.actions(), util.states());
    let mut probs = Array2::zeros((m, n));
    for l in 0..n {
        // log-sum-exp over λ·ln u(a_j | E_l)
        let logs: Vec<f64> = (0..m).map(|j| lambda * util.values()[[j, l]].ln()).collect();
        let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|&v| (v - mx).exp()).sum();
        for j in 0..m {
            probs[[j, l]] = (logs[j] - mx).exp() / z;
        }
    }
    Ok(probs)
}

/// Hard-argmax action choice, the λ → ∞ limit. Ties break toward the lowest
/// action index.
pub fn action_choice_probs_argmax(util: &UtilityTable) -> Array2<f64> {
    let (m, n) = (util.actions(), util.states());
    let mut probs = Array2::zeros((m, n));
    for l in 0..n {
        let mut best = 0usize;
        for j in 1..m {
            if util.values()[[j, l]] > util.values()[[best, l]] {
                best = j;
            }
        }
        probs[[best, l]] = 1.0;
    }
    probs
}

/// Action-preference matrix Π(λ): block-diagonal over states, block l being
/// the m×m matrix whose every row is the action-probability row for state l.
///
/// The blocks are `row ⊗ 1_{m×1}`; the m×1 ones factor (rather than n×1) is
/// what makes the assembly square at d×d for every (n, m). At n = m the two
/// readings coincide; the n = m = 2 hand expansion fixes this shape.
pub fn build_pi(probs: &Array2<f64>, dims: ModelDims) -> Result<Array2<f64>> {
    let (m, n) = (dims.actions, dims.states);
    if probs.nrows() != m || probs.ncols() != n {
        return Err(CoreError::DimensionMismatch {
            context: "action probability matrix",
            expected: m * n,
            got: probs.nrows() * probs.ncols(),
        });
    }
    let d = dims.dim();
    let mut pi = Array2::zeros((d, d));
    for l in 0..n {
        for j_row in 0..m {
            for j_col in 0..m {
                pi[[l * m + j_row, l * m + j_col]] = probs[[j_col, l]];
            }
        }
    }
    Ok(pi)
}

/// Belief matrix K: entry (r, c) = η(state of c) when r and c share an
/// action, else zero.
///
/// Assembled as `[η_1 … η_n] ⊗ 1_{n×1} ⊗ I_m`; the n×1 ones factor makes the
/// triple product square at d×d for every (n, m), coinciding with the m×1
/// reading at n = m. The n = m = 2 hand expansion fixes this shape.
pub fn build_k(eta: &BeliefVector, dims: ModelDims) -> Result<Array2<f64>> {
    if eta.len() != dims.states {
        return Err(CoreError::DimensionMismatch {
            context: "belief vector",
            expected: dims.states,
            got: eta.len(),
        });
    }
    let (m, n) = (dims.actions, dims.states);
    let d = dims.dim();
    let mut k = Array2::zeros((d, d));
    for l_row in 0..n {
        for l_col in 0..n {
            for j in 0..m {
                k[[l_row * m + j, l_col * m + j]] = eta.probs()[l_col];
            }
        }
    }
    Ok(k)
}

/// Rate matrix γ = (1−φ)·Πᵀ + φ·Kᵀ, entrywise.
pub fn build_gamma(
    pi: &Array2<f64>,
    k: &Array2<f64>,
    phi: f64,
) -> Result<CognitiveRateMatrix> {
    if pi.dim() != k.dim() {
        return Err(CoreError::DimensionMismatch {
            context: "rate-matrix operands",
            expected: pi.nrows(),
            got: k.nrows(),
        });
    }
    if !(phi > 0.0 && phi < 1.0) {
        return Err(CoreError::InvalidParameter {
            name: "phi",
            value: phi,
            requirement: "must lie strictly inside (0, 1)",
        });
    }
    let gamma = pi.t().mapv(|v| v * (1.0 - phi)) + k.t().mapv(|v| v * phi);
    CognitiveRateMatrix::new(gamma)
}

/// Assemble the Lindblad generator from behavior parameters and rates.
pub fn build_generator(
    params: &BehaviorParams,
    gamma: &CognitiveRateMatrix,
    dims: ModelDims,
) -> Result<LindbladGenerator> {
    if gamma.dim() != dims.dim() {
        return Err(CoreError::DimensionMismatch {
            context: "generator rates",
            expected: dims.dim(),
            got: gamma.dim(),
        });
    }
    Ok(LindbladGenerator {
        dims,
        hamiltonian: build_hamiltonian(dims),
        alpha: params.alpha,
        rates: gamma.rates().clone(),
    })
}

/// Right-hand side of the master equation:
///
/// ```text
/// dρ/dt = −i(1−α)[H, ρ] + α Σ_{m,n} γ_mn (L ρ L† − ½{L†L, ρ}),  L = |m⟩⟨n|
/// ```
///
/// The output is Hermitian and traceless up to rounding.
pub fn apply_generator(gen: &LindbladGenerator, rho: &DensityOperator) -> CMat {
    let d = gen.dim();
    let r = rho.matrix();
    let i = Complex64::new(0.0, 1.0);

    let mut out = if gen.alpha < 1.0 {
        crate::linalg::commutator(gen.hamiltonian(), r).mapv(|z| z * (-i) * c(1.0 - gen.alpha))
    } else {
        Array2::zeros((d, d))
    };

    if gen.alpha > 0.0 {
        let a = gen.alpha;
        // Inflow: Σ_mn γ_mn ρ_nn |m⟩⟨m|
        for m in 0..d {
            let mut inflow = 0.0;
            for n in 0..d {
                inflow += gen.rates[[m, n]] * r[[n, n]].re;
            }
            out[[m, m]] += c(a * inflow);
        }
        // Outflow: −(α/2){D, ρ} with D = diag of column sums.
        let col_sums = gen.column_sums();
        for p in 0..d {
            for q in 0..d {
                out[[p, q]] -= c(0.5 * a * (col_sums[p] + col_sums[q])) * r[[p, q]];
            }
        }
    }
    out
}

/// The d²×d² matrix of the vectorized generator under column stacking.
pub fn vectorized_generator(gen: &LindbladGenerator) -> CMat {
    let d = gen.dim();
    let i = Complex64::new(0.0, 1.0);
    let h = gen.hamiltonian();
    let id = eye(d);

    let mut sup = kron(&id, h) - kron(&h.t().to_owned(), &id);
    sup = sup.mapv(|z| z * (-i) * c(1.0 - gen.alpha));

    if gen.alpha > 0.0 {
        let a = gen.alpha;
        for (m, n, g) in gen.jumps() {
            // L ⊗ L (real jump operators): rank-one at (m + d·m, n + d·n).
            sup[[m + d * m, n + d * n]] += c(a * g);
        }
        let col_sums = gen.column_sums();
        for p in 0..d {
            for j in 0..d {
                // −½(I ⊗ L†L + (L†L)ᵀ ⊗ I) summed over jumps, all diagonal.
                sup[[p + d * j, p + d * j]] -= c(0.5 * a * (col_sums[p] + col_sums[j]));
            }
        }
    }
    sup
}

/// Exact propagation ρ(t) = exp(t·L)(ρ) through the vectorized generator.
///
/// This is the correctness oracle for the discrete-time channel.
pub fn exact_propagate(
    gen: &LindbladGenerator,
    rho: &DensityOperator,
    t: f64,
) -> Result<DensityOperator> {
    if t < 0.0 || !t.is_finite() {
        return Err(CoreError::InvalidParameter {
            name: "t",
            value: t,
            requirement: "propagation time must be finite and nonnegative",
        });
    }
    let d = gen.dim();
    if rho.dim() != d {
        return Err(CoreError::DimensionMismatch {
            context: "exact_propagate state",
            expected: d,
            got: rho.dim(),
        });
    }
    if t == 0.0 {
        return Ok(rho.clone());
    }
    let sup = vectorized_generator(gen).mapv(|z| z * c(t));
    let prop = matrix_exp(&sup);
    let v = prop.dot(&vec_col(rho.matrix()));
    let mut out = unvec_col(&Array1::from(v.to_vec()), d);
    // Clean rounding noise so long propagations stay inside tolerance.
    out = (&out + &dagger(&out)).mapv(|z| z * c(0.5));
    let tr = trace(&out).re;
    if !tr.is_finite() || tr.abs() < 1e-12 {
        return Err(CoreError::NumericFailure {
            context: "exact_propagate trace",
        });
    }
    out = out.mapv(|z| z / c(tr));
    DensityOperator::new(out)
}

/// Behavioral model bundle: dimensions, parameters, utilities, and cached
/// derived quantities. Beliefs vary step to step, so the generator is built
/// per belief via [`DecisionModel::generator`].
#[derive(Debug, Clone)]
pub struct DecisionModel {
    dims: ModelDims,
    params: BehaviorParams,
    utilities: UtilityTable,
    action_probs: Array2<f64>,
    pi: Array2<f64>,
}

impl DecisionModel {
    pub fn new(dims: ModelDims, params: BehaviorParams, utilities: UtilityTable) -> Result<Self> {
        if utilities.actions() != dims.actions || utilities.states() != dims.states {
            return Err(CoreError::DimensionMismatch {
                context: "utility table",
                expected: dims.actions * dims.states,
                got: utilities.actions() * utilities.states(),
            });
        }
        let action_probs = action_choice_probs(&utilities, params.lambda)?;
        let pi = build_pi(&action_probs, dims)?;
        Ok(Self {
            dims,
            params,
            utilities,
            action_probs,
            pi,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> BehaviorParams {
        self.params
    }

    pub fn utilities(&self) -> &UtilityTable {
        &self.utilities
    }

    pub fn action_probs(&self) -> &Array2<f64> {
        &self.action_probs
    }

    /// Rate matrix for the given belief.
    pub fn rate_matrix(&self, eta: &BeliefVector) -> Result<CognitiveRateMatrix> {
        let k = build_k(eta, self.dims)?;
        build_gamma(&self.pi, &k, self.params.phi)
    }

    /// Lindblad generator for the given belief.
    pub fn generator(&self, eta: &BeliefVector) -> Result<LindbladGenerator> {
        let gamma = self.rate_matrix(eta)?;
        build_generator(&self.params, &gamma, self.dims)
    }
}
