//! Discrete-time Kraus channel over random interaction intervals, plus the
//! projective action measurement.
//!
//! Two channel constructions are provided:
//!
//! - **paper-faithful** — the literal first-order operator set: a drift
//!   operator `M₀ = I − TΔt(i(1−α)H + ½Σ αγ L†L)` and one rank-one jump
//!   `√(TΔt αγ_mn)|m⟩⟨n|` per positive rate. Completeness holds only to
//!   O((TΔt)²), so outcome probabilities are renormalized and the factor is
//!   reported. This is the mode that converges to the exact propagator as
//!   Δt → 0.
//!
//! - **exact-cptp** — the dephasing form of the same dissipator: each jump
//!   column is flattened onto the diagonal, giving operators
//!   `D_m = Σ_n √(TΔt αγ_mn)|n⟩⟨n|` with the same outcome statistics as the
//!   jump set, plus `M₀ = √(I − Σ D†D)` and an optional control rotation
//!   applied ahead of every branch. At u = 0 all operators are diagonal in
//!   the state-action basis, so Σ M†M = I holds exactly and every diagonal
//!   entry of ρ is preserved in expectation. This is the mode the
//!   martingale, supermartingale, and feedback-control machinery runs on.

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::{c, dagger, eye, max_abs, spectral_norm, trace, CMat};
use crate::model::{DensityOperator, LindbladGenerator, ModelDims};

/// Which discrete-time operator set to build.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KrausMode {
    /// Literal first-order operators; probabilities renormalized.
    PaperFaithful,
    /// Exactly complete dephasing form with a unitary control rotation of
    /// strength `kick_scale`·u.
    ExactCptp { kick_scale: f64 },
}

impl Serialize for KrausMode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for KrausMode {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        match s.as_str() {
            "paper-faithful" => Ok(KrausMode::PaperFaithful),
            // The rotation strength is owned by the control coupling and is
            // substituted by the control layer; the config tag only chooses
            // the operator family.
            "exact-cptp" => Ok(KrausMode::exact_cptp()),
            other => Err(serde::de::Error::custom(format!(
                "unknown channel mode `{other}` (expected \"paper-faithful\" or \"exact-cptp\")"
            ))),
        }
    }
}

impl KrausMode {
    pub fn exact_cptp() -> Self {
        KrausMode::ExactCptp { kick_scale: 1.0 }
    }

    pub fn is_exact_cptp(&self) -> bool {
        matches!(self, KrausMode::ExactCptp { .. })
    }
}

impl std::fmt::Display for KrausMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KrausMode::PaperFaithful => write!(f, "paper-faithful"),
            KrausMode::ExactCptp { .. } => write!(f, "exact-cptp"),
        }
    }
}

/// Identity of a Kraus outcome branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeLabel {
    /// The no-jump drift branch (μ = 0).
    Drift,
    /// Rank-one jump |m⟩⟨n| (paper-faithful mode).
    Jump { to: usize, from: usize },
    /// Diagonal dephasing branch for destination pattern m (exact-cptp mode).
    Dephase { pattern: usize },
}

/// Discrete-time operator set for one interaction interval.
#[derive(Debug, Clone)]
pub struct KrausSet {
    mode: KrausMode,
    dims: ModelDims,
    u: f64,
    t_steps: u32,
    dt: f64,
    ops: Vec<CMat>,
    labels: Vec<OutcomeLabel>,
    completeness_residual: f64,
    /// Squared diagonal coefficients |c_{μ,n}|² per branch when every branch
    /// is diagonal after the control rotation (exact-cptp mode).
    diag_weights: Option<Vec<Vec<f64>>>,
    /// Control rotation applied ahead of every branch, if any.
    kick: Option<CMat>,
}

impl KrausSet {
    pub fn mode(&self) -> KrausMode {
        self.mode
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn control(&self) -> f64 {
        self.u
    }

    pub fn t_steps(&self) -> u32 {
        self.t_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Interval duration T·Δt.
    pub fn duration(&self) -> f64 {
        self.t_steps as f64 * self.dt
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn ops(&self) -> &[CMat] {
        &self.ops
    }

    pub fn labels(&self) -> &[OutcomeLabel] {
        &self.labels
    }

    /// ‖Σ M†M − I‖_max at build time.
    pub fn completeness_residual(&self) -> f64 {
        self.completeness_residual
    }

    /// Residual divided by (TΔt)², the leading completeness-defect
    /// coefficient of the first-order operator set.
    pub fn completeness_coefficient(&self) -> f64 {
        let s = self.duration();
        self.completeness_residual / (s * s)
    }

    pub fn kick(&self) -> Option<&CMat> {
        self.kick.as_ref()
    }

    pub fn diag_weights(&self) -> Option<&[Vec<f64>]> {
        self.diag_weights.as_deref()
    }
}

/// Coupling generator of the control rotation: the d×d Hilbert matrix
/// G_jk = 1/(j + k + 1).
///
/// G couples every pair of basis states across both the state and the
/// action register with distinct strengths, and its spectrum is simple with
/// eigenvectors aligned to no basis plane or lattice symmetry. That rules
/// out control-invariant ("dark") states: any density operator commuting
/// with G is diagonal in G's generic eigenbasis, which no measurement-
/// stationary state other than the basis vertices approaches — and at the
/// vertices the rotation always acts.
pub fn kick_generator(d: usize) -> CMat {
    let mut g: CMat = Array2::zeros((d, d));
    for j in 0..d {
        for k in 0..d {
            g[[j, k]] = c(1.0 / (j + k + 1) as f64);
        }
    }
    g
}

/// Unitary control rotation exp(−i·θ·G) with G the fixed coupling
/// generator of [`kick_generator`].
///
/// Evaluated through a per-dimension cached spectral decomposition of G, so
/// repeated calls (one per control-grid point per interaction) cost two
/// small matrix products.
pub fn kick_matrix(d: usize, theta: f64) -> CMat {
    thread_local! {
        static SPECTRA: std::cell::RefCell<std::collections::HashMap<usize, (Vec<f64>, CMat)>> =
            std::cell::RefCell::new(std::collections::HashMap::new());
    }
    SPECTRA.with(|cell| {
        let mut map = cell.borrow_mut();
        let (eigs, u) = map
            .entry(d)
            .or_insert_with(|| crate::linalg::hermitian_eigen(&kick_generator(d)));
        let mut phases: CMat = Array2::zeros((d, d));
        for (i, &lam) in eigs.iter().enumerate() {
            phases[[i, i]] = Complex64::new(0.0, -theta * lam).exp();
        }
        u.dot(&phases).dot(&dagger(u))
    })
}

/// Build the Kraus operator set for one interval of `t_steps` machine steps
/// of length `dt`, at control input `u`.
///
/// Fails with `ValidityBoundViolated` when `TΔt·(‖H‖ + ½Σγ) ≥ 1` or (in
/// exact-cptp mode) when a diagonal completeness weight would go negative.
pub fn build_kraus(
    gen: &LindbladGenerator,
    u: f64,
    t_steps: u32,
    dt: f64,
    mode: KrausMode,
) -> Result<KrausSet> {
    if t_steps == 0 {
        return Err(CoreError::InvalidParameter {
            name: "t_steps",
            value: 0.0,
            requirement: "interval length must be a positive integer",
        });
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(CoreError::InvalidParameter {
            name: "dt",
            value: dt,
            requirement: "time step must be positive and finite",
        });
    }
    let d = gen.dim();
    let span = t_steps as f64 * dt;
    let gamma_total: f64 = gen.rates().iter().sum();
    let bound = span * (spectral_norm(gen.hamiltonian()) + 0.5 * gamma_total);
    if bound >= 1.0 {
        return Err(CoreError::ValidityBoundViolated { value: bound });
    }

    let alpha = gen.alpha();
    let col_sums = gen.column_sums();

    let (ops, labels, diag_weights, kick) = match mode {
        KrausMode::PaperFaithful => {
            // M₀ = I − TΔt(i(1−α)H + D), D = diag((α/2)·Σ_m γ_mn)
            let mut m0 = eye(d);
            let i = Complex64::new(0.0, 1.0);
            let h = gen.hamiltonian();
            for p in 0..d {
                for q in 0..d {
                    m0[[p, q]] -= c(span) * i * c(1.0 - alpha) * h[[p, q]];
                }
                m0[[p, p]] -= c(span * 0.5 * alpha * col_sums[p]);
            }
            let mut ops = vec![m0];
            let mut labels = vec![OutcomeLabel::Drift];
            for (m, n, g) in gen.jumps() {
                let mut op: CMat = Array2::zeros((d, d));
                op[[m, n]] = c((span * alpha * g).sqrt());
                ops.push(op);
                labels.push(OutcomeLabel::Jump { to: m, from: n });
            }
            (ops, labels, None, None)
        }
        KrausMode::ExactCptp { kick_scale } => {
            // Branch weights w_m[n] = TΔt·α·γ_mn; drift weight completes
            // each diagonal column to exactly one.
            let mut weights: Vec<Vec<f64>> = Vec::new();
            let mut labels = vec![OutcomeLabel::Drift];
            let mut drift_w = vec![1.0_f64; d];
            for n in 0..d {
                let w = span * alpha * col_sums[n];
                drift_w[n] -= w;
                if drift_w[n] < 0.0 {
                    return Err(CoreError::ValidityBoundViolated {
                        value: span * alpha * col_sums[n],
                    });
                }
            }
            weights.push(drift_w);
            for m in 0..d {
                let row: Vec<f64> = (0..d).map(|n| span * alpha * gen.rates()[[m, n]]).collect();
                if row.iter().any(|&v| v > 0.0) {
                    weights.push(row);
                    labels.push(OutcomeLabel::Dephase { pattern: m });
                }
            }

            let theta = u * kick_scale;
            let kick = (theta != 0.0).then(|| kick_matrix(d, theta));
            let ops: Vec<CMat> = weights
                .iter()
                .map(|w| {
                    let mut diag: CMat = Array2::zeros((d, d));
                    for n in 0..d {
                        diag[[n, n]] = c(w[n].sqrt());
                    }
                    match &kick {
                        Some(r) => diag.dot(r),
                        None => diag,
                    }
                })
                .collect();
            (ops, labels, Some(weights), kick)
        }
    };

    // Completeness residual ‖Σ M†M − I‖_max.
    let mut total: CMat = Array2::zeros((d, d));
    for op in &ops {
        total = total + dagger(op).dot(op);
    }
    let completeness_residual = max_abs(&(&total - &eye(d)));

    Ok(KrausSet {
        mode,
        dims: gen.dims(),
        u,
        t_steps,
        dt,
        ops,
        labels,
        completeness_residual,
        diag_weights,
        kick,
    })
}

/// Projectors onto action subspaces: P_a = Σ_l |E_l, a⟩⟨E_l, a|.
#[derive(Debug, Clone)]
pub struct ActionProjectors {
    dims: ModelDims,
}

impl ActionProjectors {
    pub fn new(dims: ModelDims) -> Self {
        Self { dims }
    }

    pub fn actions(&self) -> usize {
        self.dims.actions
    }

    /// Basis indices belonging to action `a`.
    pub fn indices(&self, a: usize) -> impl Iterator<Item = usize> + '_ {
        let m = self.dims.actions;
        (0..self.dims.states).map(move |l| l * m + a)
    }

    /// Action of basis index `r`.
    #[inline]
    pub fn action_of(&self, r: usize) -> usize {
        r % self.dims.actions
    }

    /// Dense projector matrix (0/1 diagonal).
    pub fn matrix(&self, a: usize) -> CMat {
        let d = self.dims.dim();
        let mut p: CMat = Array2::zeros((d, d));
        for r in self.indices(a) {
            p[[r, r]] = c(1.0);
        }
        p
    }

    /// Tr(P_a ρ) for each action.
    pub fn action_masses(&self, rho: &DensityOperator) -> Vec<f64> {
        let diag = rho.diagonal();
        self.masses_from_diag(&diag)
    }

    pub fn masses_from_diag(&self, diag: &[f64]) -> Vec<f64> {
        let mut masses = vec![0.0; self.dims.actions];
        for (r, &x) in diag.iter().enumerate() {
            masses[self.action_of(r)] += x;
        }
        masses
    }

    /// Collapse ρ onto action `a`: P_a ρ P_a / Tr(P_a ρ).
    pub fn collapse(&self, rho: &DensityOperator, a: usize) -> Result<DensityOperator> {
        let d = self.dims.dim();
        let mass: f64 = self.indices(a).map(|r| rho.matrix()[[r, r]].re).sum();
        if mass <= 1e-14 {
            return Err(CoreError::ZeroProbabilityOutcome { index: a });
        }
        let mut out: CMat = Array2::zeros((d, d));
        for p in self.indices(a) {
            for q in self.indices(a) {
                out[[p, q]] = rho.matrix()[[p, q]] / c(mass);
            }
        }
        Ok(DensityOperator::from_unchecked(out))
    }
}

/// Outcome probabilities for one Kraus application.
#[derive(Debug, Clone)]
pub struct OutcomeDistribution {
    /// Normalized branch probabilities.
    pub probs: Vec<f64>,
    /// Raw probability total before renormalization. Deviates from one at
    /// O((TΔt)²) in paper-faithful mode.
    pub renormalization: f64,
}

/// p(μ) = Tr(M_μ ρ M_μ†), renormalized by the total.
pub fn outcome_probs(rho: &DensityOperator, ks: &KrausSet) -> Result<OutcomeDistribution> {
    let raw = raw_branch_probs(rho, ks);
    let total: f64 = raw.iter().sum();
    if total < 1e-12 {
        return Err(CoreError::DegenerateDistribution { total });
    }
    Ok(OutcomeDistribution {
        probs: raw.iter().map(|p| p / total).collect(),
        renormalization: total,
    })
}

fn raw_branch_probs(rho: &DensityOperator, ks: &KrausSet) -> Vec<f64> {
    match (&ks.diag_weights, &ks.kick) {
        (Some(weights), kick) => {
            let diag = kicked_diagonal(rho, kick.as_ref());
            weights
                .iter()
                .map(|w| w.iter().zip(&diag).map(|(wi, xi)| wi * xi).sum::<f64>().max(0.0))
                .collect()
        }
        _ => ks
            .ops
            .iter()
            .map(|m| {
                let branch = m.dot(rho.matrix()).dot(&dagger(m));
                trace(&branch).re.max(0.0)
            })
            .collect(),
    }
}

fn kicked_diagonal(rho: &DensityOperator, kick: Option<&CMat>) -> Vec<f64> {
    match kick {
        None => rho.diagonal(),
        Some(r) => {
            let d = rho.dim();
            let m = rho.matrix();
            (0..d)
                .map(|i| {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for a in 0..d {
                        for b in 0..d {
                            acc += r[[i, a]] * m[[a, b]] * r[[i, b]].conj();
                        }
                    }
                    acc.re
                })
                .collect()
        }
    }
}

/// Conditional state after branch μ: M_μ ρ M_μ† / Tr(·).
pub fn apply_outcome(rho: &DensityOperator, ks: &KrausSet, mu: usize) -> Result<DensityOperator> {
    let op = ks.ops.get(mu).ok_or(CoreError::ZeroProbabilityOutcome { index: mu })?;
    let branch = op.dot(rho.matrix()).dot(&dagger(op));
    let tr = trace(&branch).re;
    if tr <= 1e-14 {
        return Err(CoreError::ZeroProbabilityOutcome { index: mu });
    }
    Ok(DensityOperator::from_unchecked(branch.mapv(|z| z / c(tr))))
}

/// Pre-measurement ensemble average Σ_μ M_μ ρ M_μ†, trace-renormalized.
pub fn average_map(rho: &DensityOperator, ks: &KrausSet) -> DensityOperator {
    let d = rho.dim();
    let mut total: CMat = Array2::zeros((d, d));
    for op in &ks.ops {
        total = total + op.dot(rho.matrix()).dot(&dagger(op));
    }
    let tr = trace(&total).re;
    DensityOperator::from_unchecked(total.mapv(|z| z / c(tr)))
}

/// Sample the projective action measurement.
///
/// Returns the measured action and the collapsed state. Reproducible given
/// the RNG state.
pub fn measure_action<R: Rng + ?Sized>(
    rho: &DensityOperator,
    proj: &ActionProjectors,
    rng: &mut R,
) -> Result<(usize, DensityOperator)> {
    let masses = proj.action_masses(rho);
    let total: f64 = masses.iter().sum();
    if total < 1e-12 {
        return Err(CoreError::DegenerateDistribution { total });
    }
    let a = sample_index(&masses, total, rng);
    let post = proj.collapse(rho, a)?;
    Ok((a, post))
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], total: f64, rng: &mut R) -> usize {
    let draw: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if draw < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Result of one full interaction interval.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub mu: usize,
    pub action: usize,
    pub post: DensityOperator,
}

/// One interaction interval: sample a Kraus branch, apply it, then perform
/// the projective action measurement.
pub fn step_interval<R: Rng + ?Sized>(
    rho: &DensityOperator,
    ks: &KrausSet,
    proj: &ActionProjectors,
    rng: &mut R,
) -> Result<StepOutcome> {
    let dist = outcome_probs(rho, ks)?;
    let mu = sample_index(&dist.probs, 1.0, rng);
    let conditioned = apply_outcome(rho, ks, mu)?;
    let (action, post) = measure_action(&conditioned, proj, rng)?;
    Ok(StepOutcome { mu, action, post })
}

/// One joint (μ, a) outcome of the interval channel, carrying only the
/// diagonal of the post-measurement state.
#[derive(Debug, Clone)]
pub struct DiagOutcome {
    pub mu: usize,
    pub action: usize,
    pub prob: f64,
    pub diag: Vec<f64>,
}

/// Exact enumeration of all (branch, action) outcomes with post-state
/// diagonals. Probabilities sum to one; zero-probability outcomes are
/// dropped.
///
/// The Lyapunov function and the basis-occupation martingale depend on the
/// diagonal only, so this enumeration is what the controller and the
/// verification suites integrate over.
pub fn enumerate_interval_diag(
    rho: &DensityOperator,
    ks: &KrausSet,
    proj: &ActionProjectors,
) -> Result<Vec<DiagOutcome>> {
    let d = rho.dim();
    let raw = raw_branch_probs(rho, ks);
    let total: f64 = raw.iter().sum();
    if total < 1e-12 {
        return Err(CoreError::DegenerateDistribution { total });
    }

    // Branch diagonals, unnormalized (they sum to the raw branch weight).
    let branch_diags: Vec<Vec<f64>> = match (&ks.diag_weights, &ks.kick) {
        (Some(weights), kick) => {
            let diag = kicked_diagonal(rho, kick.as_ref());
            weights
                .iter()
                .map(|w| w.iter().zip(&diag).map(|(wi, xi)| wi * xi).collect())
                .collect()
        }
        _ => ks
            .ops
            .iter()
            .map(|m| {
                let branch = m.dot(rho.matrix()).dot(&dagger(m));
                (0..d).map(|r| branch[[r, r]].re).collect()
            })
            .collect(),
    };

    let mut outcomes = Vec::with_capacity(branch_diags.len() * proj.actions());
    for (mu, bdiag) in branch_diags.iter().enumerate() {
        for a in 0..proj.actions() {
            let mass: f64 = proj.indices(a).map(|r| bdiag[r].max(0.0)).sum();
            let prob = mass / total;
            if prob <= 0.0 {
                continue;
            }
            let mut diag = vec![0.0; d];
            for r in proj.indices(a) {
                diag[r] = bdiag[r].max(0.0) / mass;
            }
            outcomes.push(DiagOutcome {
                mu,
                action: a,
                prob,
                diag,
            });
        }
    }
    Ok(outcomes)
}

/// Largest deviation of any basis occupation from its one-interval
/// conditional expectation: max_r |Σ p·⟨b_r|ρ′|b_r⟩ − ⟨b_r|ρ|b_r⟩|.
///
/// Exactly zero (to rounding) in exact-cptp mode at u = 0; order TΔt in
/// paper-faithful mode, where the dissipator transports occupation.
pub fn martingale_deviation(
    rho: &DensityOperator,
    ks: &KrausSet,
    proj: &ActionProjectors,
) -> Result<f64> {
    let outcomes = enumerate_interval_diag(rho, ks, proj)?;
    let d = rho.dim();
    let before = rho.diagonal();
    let mut after = vec![0.0; d];
    for o in &outcomes {
        for r in 0..d {
            after[r] += o.prob * o.diag[r];
        }
    }
    Ok((0..d)
        .map(|r| (after[r] - before[r]).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matrix_exp, random_density};
    use crate::model::{
        exact_propagate, BehaviorParams, BeliefVector, DecisionModel, ModelDims, UtilityTable,
    };
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_model() -> DecisionModel {
        DecisionModel::new(
            ModelDims::new(2, 2).unwrap(),
            BehaviorParams::new(0.3, 1.0, 0.5).unwrap(),
            UtilityTable::new(array![[2.0, 1.0], [1.0, 2.0]]).unwrap(),
        )
        .unwrap()
    }

    fn default_gen() -> crate::model::LindbladGenerator {
        default_model().generator(&BeliefVector::uniform(2)).unwrap()
    }

    fn zero_rate_generator(alpha: f64) -> crate::model::LindbladGenerator {
        // Hand-built generator with no jumps, for the unitary-only limit.
        let dims = ModelDims::new(2, 2).unwrap();
        let params = BehaviorParams::new(alpha, 1.0, 0.5).unwrap();
        let gamma =
            crate::model::CognitiveRateMatrix::new(Array2::zeros((4, 4))).unwrap();
        crate::model::build_generator(&params, &gamma, dims).unwrap()
    }

    #[test]
    fn kick_matrix_matches_expm_and_is_unitary() {
        for &(d, theta) in &[(2usize, 0.3), (4, -0.9), (4, 1.0)] {
            let g = kick_generator(d);
            let direct = matrix_exp(&g.mapv(|z| z * Complex64::new(0.0, -theta)));
            let spectral = kick_matrix(d, theta);
            assert!(max_abs(&(&direct - &spectral)) < 1e-12);
            let uu = spectral.dot(&dagger(&spectral));
            assert!(max_abs(&(&uu - &eye(d))) < 1e-12);
        }
    }

    #[test]
    fn kick_generator_has_simple_spectrum() {
        // Distinct eigenvalues leave no control-invariant subspace beyond
        // G's own eigenbasis.
        for d in 2..=6 {
            let eigs = crate::linalg::hermitian_eigenvalues(&kick_generator(d));
            for w in eigs.windows(2) {
                assert!(w[1] - w[0] > 1e-6, "near-degenerate pair at d={d}: {w:?}");
            }
        }
    }

    #[test]
    fn no_jumps_gives_single_first_order_unitary_op() {
        let gen = zero_rate_generator(0.3);
        let ks = build_kraus(&gen, 0.0, 1, 0.01, KrausMode::PaperFaithful).unwrap();
        assert_eq!(ks.len(), 1);
        // M₀ = I − i·TΔt·(1−α)·H
        let expect = eye(4)
            - gen
                .hamiltonian()
                .mapv(|z| z * Complex64::new(0.0, 1.0) * c(0.01 * 0.7));
        assert!(max_abs(&(&ks.ops()[0] - &expect)) < 1e-15);

        // One application reproduces first-order unitary evolution.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rho = DensityOperator::new(random_density(4, &mut rng)).unwrap();
        let stepped = average_map(&rho, &ks);
        let exact = exact_propagate(&gen, &rho, 0.01).unwrap();
        assert!(max_abs(&(stepped.matrix() - exact.matrix())) < 1e-3);
    }

    #[test]
    fn validity_bound_is_a_hard_error() {
        let gen = default_gen();
        // ‖H‖ = 2 and Σγ = 4 here, so TΔt ≥ 1/4 violates the bound.
        let err = build_kraus(&gen, 0.0, 30, 0.01, KrausMode::PaperFaithful);
        assert!(matches!(err, Err(CoreError::ValidityBoundViolated { .. })));
    }

    #[test]
    fn one_step_error_against_exact_propagator_is_second_order() {
        let gen = default_gen();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rho = DensityOperator::new(random_density(4, &mut rng)).unwrap();

        let mut errs = Vec::new();
        for &dt in &[0.04, 0.02, 0.01, 0.005] {
            let ks = build_kraus(&gen, 0.0, 1, dt, KrausMode::PaperFaithful).unwrap();
            let approx = average_map(&rho, &ks);
            let exact = exact_propagate(&gen, &rho, dt).unwrap();
            errs.push(max_abs(&(approx.matrix() - exact.matrix())));
        }
        assert!(errs[2] <= 1e-3, "one-step error at dt=0.01: {}", errs[2]);
        // log-log slope across the ladder
        let slope = (errs[0] / errs[3]).ln() / (0.04_f64 / 0.005).ln();
        assert!(
            (1.8..=2.2).contains(&slope),
            "convergence order {slope:.3} outside [1.8, 2.2]"
        );
    }

    #[test]
    fn exact_cptp_completeness_on_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let n = 1 + (rng.random::<u32>() % 3) as usize;
            let m = 1 + (rng.random::<u32>() % 3) as usize;
            let dims = ModelDims::new(n, m).unwrap();
            let params = BehaviorParams::new(
                rng.random::<f64>(),
                2.0 * rng.random::<f64>(),
                0.05 + 0.9 * rng.random::<f64>(),
            )
            .unwrap();
            let mut vals = Array2::zeros((m, n));
            for v in vals.iter_mut() {
                *v = 0.2 + rng.random::<f64>();
            }
            let model =
                DecisionModel::new(dims, params, UtilityTable::new(vals).unwrap()).unwrap();
            let mut eta_raw: Vec<f64> = (0..n).map(|_| 0.1 + rng.random::<f64>()).collect();
            let s: f64 = eta_raw.iter().sum();
            eta_raw.iter_mut().for_each(|v| *v /= s);
            let eta = BeliefVector::new(eta_raw).unwrap();
            let gen = model.generator(&eta).unwrap();

            let ks = build_kraus(&gen, 0.4, 2, 0.01, KrausMode::exact_cptp()).unwrap();
            assert!(
                ks.completeness_residual() <= 1e-12,
                "residual {}",
                ks.completeness_residual()
            );
        }
    }

    #[test]
    fn paper_faithful_probability_sum_deviates_at_second_order() {
        let gen = default_gen();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &t_steps in &[1u32, 2, 3] {
            for _ in 0..20 {
                let rho = DensityOperator::new(random_density(4, &mut rng)).unwrap();
                let ks = build_kraus(&gen, 0.0, t_steps, 0.01, KrausMode::PaperFaithful).unwrap();
                let dist = outcome_probs(&rho, &ks).unwrap();
                let span = ks.duration();
                let dev = (dist.renormalization - 1.0).abs();
                assert!(
                    dev <= 10.0 * span * span,
                    "sum deviation {dev:.3e} exceeds 10(TΔt)²"
                );
            }
        }
    }

    #[test]
    fn outcome_probs_sum_to_one_in_cptp_mode() {
        let gen = default_gen();
        let ks = build_kraus(&gen, 0.3, 1, 0.01, KrausMode::exact_cptp()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rho = DensityOperator::new(random_density(4, &mut rng)).unwrap();
        let dist = outcome_probs(&rho, &ks).unwrap();
        assert!((dist.renormalization - 1.0).abs() < 1e-12);
        let s: f64 = dist.probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rates_single_branch_probability_one() {
        let gen = zero_rate_generator(0.5);
        let ks = build_kraus(&gen, 0.0, 1, 0.01, KrausMode::PaperFaithful).unwrap();
        let rho = DensityOperator::maximally_mixed(4);
        let dist = outcome_probs(&rho, &ks).unwrap();
        assert_eq!(dist.probs.len(), 1);
        assert!((dist.probs[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_branch_leaves_state_unchanged() {
        // α = 1 removes the Hamiltonian part; with no jumps M₀ = I.
        let gen = zero_rate_generator(1.0);
        let ks = build_kraus(&gen, 0.0, 1, 0.01, KrausMode::PaperFaithful).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rho = DensityOperator::new(random_density(4, &mut rng)).unwrap();
        let out = apply_outcome(&rho, &ks, 0).unwrap();
        assert!(max_abs(&(out.matrix() - rho.matrix())) < 1e-15);
    }

    #[test]
    fn jump_branch_collapses_to_destination() {
        let gen = default_gen();
        let ks = build_kraus(&gen, 0.0, 1, 0.01, KrausMode::PaperFaithful).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rho = DensityOperator::new(random_density(4, &mut rng)).unwrap();
        // Find a jump branch and check the post-state is the pure target.
        let (mu, &label) = ks
            .labels()
            .iter()
            .enumerate()
            .find(|(_, l)| matches!(l, OutcomeLabel::Jump { .. }))
            .unwrap();
        let OutcomeLabel::Jump { to, .. } = label else {
            unreachable!()
        };
        let out = apply_outcome(&rho, &ks, mu).unwrap();
        let pure = DensityOperator::pure_basis(4, to);
        assert!(max_abs(&(out.matrix() - pure.matrix())) < 1e-12);
        assert!((trace(out.matrix()).re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn average_map_is_probability_mix_of_outcomes() {
        let gen = default_gen();
        for mode in [KrausMode::PaperFaithful, KrausMode::exact_cptp()] {
            let ks = build_kraus(&gen, 0.2, 2, 0.01, mode).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let rho = DensityOperator::new(random_density(4, &mut rng)).unwrap();
            let avg = average_map(&rho, &ks);
            let dist = outcome_probs(&rho, &ks).unwrap();
            let mut mix: CMat = Array2::zeros((4, 4));
            for (mu, &p) in dist.probs.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let cond = apply_outcome(&rho, &ks, mu).unwrap();
                mix = mix + cond.matrix().mapv(|z| z * c(p));
            }
            assert!(max_abs(&(avg.matrix() - &mix)) < 1e-12);
        }
    }

    #[test]
    fn cptp_average_map_preserves_trace_without_renormalization() {
        let gen = default_gen();
        let ks = build_kraus(&gen, 0.0, 1, 0.01, KrausMode::exact_cptp()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rho = DensityOperator::new(random_density(4, &mut rng)).unwrap();
        let mut total: CMat = Array2::zeros((4, 4));
        for op in ks.ops() {
            total = total + op.dot(rho.matrix()).dot(&dagger(op));
        }
        assert!((trace(&total).re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn average_map_tracks_exact_propagator() {
        let gen = default_gen();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rho = DensityOperator::new(random_density(4, &mut rng)).unwrap();
        let ks = build_kraus(&gen, 0.0, 3, 0.01, KrausMode::PaperFaithful).unwrap();
        let avg = average_map(&rho, &ks);
        let exact = exact_propagate(&gen, &rho, ks.duration()).unwrap();
        let err = max_abs(&(avg.matrix() - exact.matrix()));
        let span = ks.duration();
        assert!(err < 5.0 * span * span, "error {err:.3e} not O((TΔt)²)");
    }

    #[test]
    fn measurement_of_basis_state_is_deterministic() {
        let dims = ModelDims::new(2, 2).unwrap();
        let proj = ActionProjectors::new(dims);
        let rho = DensityOperator::pure_basis(4, 2); // (state 1, action 0)
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (a, post) = measure_action(&rho, &proj, &mut rng).unwrap();
        assert_eq!(a, 0);
        assert!(max_abs(&(post.matrix() - rho.matrix())) < 1e-15);
    }

    #[test]
    fn measurement_of_mixed_state_is_uniform_over_actions() {
        let dims = ModelDims::new(2, 2).unwrap();
        let proj = ActionProjectors::new(dims);
        let rho = DensityOperator::maximally_mixed(4);
        let masses = proj.action_masses(&rho);
        for a in 0..2 {
            assert!((masses[a] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn measurement_frequencies_match_probabilities() {
        let dims = ModelDims::new(2, 2).unwrap();
        let proj = ActionProjectors::new(dims);
        // A state with unequal action masses.
        let mut m: CMat = Array2::zeros((4, 4));
        for (i, w) in [0.4, 0.1, 0.3, 0.2].iter().enumerate() {
            m[[i, i]] = c(*w);
        }
        let rho = DensityOperator::new(m).unwrap();
        let expected = proj.action_masses(&rho);

        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut counts = vec![0usize; 2];
        for _ in 0..n {
            let (a, _) = measure_action(&rho, &proj, &mut rng).unwrap();
            counts[a] += 1;
        }
        for a in 0..2 {
            let p = expected[a];
            let freq = counts[a] as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "action {a}: freq {freq:.4} vs p {p:.4}"
            );
        }
    }

    #[test]
    fn step_interval_marginal_action_law_matches_enumeration() {
        let gen = default_gen();
        let dims = gen.dims();
        let proj = ActionProjectors::new(dims);
        let ks = build_kraus(&gen, 0.0, 1, 0.01, KrausMode::exact_cptp()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let rho = DensityOperator::new(random_density(4, &mut rng)).unwrap();

        let outcomes = enumerate_interval_diag(&rho, &ks, &proj).unwrap();
        let mut law = vec![0.0; 2];
        for o in &outcomes {
            law[o.action] += o.prob;
        }

        let n = 100_000usize;
        let mut counts = vec![0usize; 2];
        for _ in 0..n {
            let out = step_interval(&rho, &ks, &proj, &mut rng).unwrap();
            counts[out.action] += 1;
        }
        for a in 0..2 {
            let p = law[a];
            let freq = counts[a] as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "action {a}: freq {freq:.4} vs exact {p:.4}"
            );
        }
    }

    #[test]
    fn martingale_exact_in_cptp_mode_and_first_order_otherwise() {
        let gen = default_gen();
        let proj = ActionProjectors::new(gen.dims());
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let rho = DensityOperator::new(random_density(4, &mut rng)).unwrap();
            for &t_steps in &[1u32, 2, 3] {
                let cptp = build_kraus(&gen, 0.0, t_steps, 0.01, KrausMode::exact_cptp()).unwrap();
                let dev = martingale_deviation(&rho, &cptp, &proj).unwrap();
                assert!(dev <= 1e-10, "cptp martingale deviation {dev:.3e}");

                let pf = build_kraus(&gen, 0.0, t_steps, 0.01, KrausMode::PaperFaithful).unwrap();
                let dev_pf = martingale_deviation(&rho, &pf, &proj).unwrap();
                // Occupation transport is first order in TΔt here.
                assert!(
                    dev_pf <= 2.0 * pf.duration(),
                    "paper-faithful deviation {dev_pf:.3e} vs TΔt {}",
                    pf.duration()
                );
            }
        }
    }

    #[test]
    fn enumeration_probabilities_sum_to_one() {
        let gen = default_gen();
        let proj = ActionProjectors::new(gen.dims());
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let rho = DensityOperator::new(random_density(4, &mut rng)).unwrap();
        for mode in [KrausMode::PaperFaithful, KrausMode::exact_cptp()] {
            let ks = build_kraus(&gen, 0.35, 2, 0.01, mode).unwrap();
            let outcomes = enumerate_interval_diag(&rho, &ks, &proj).unwrap();
            let total: f64 = outcomes.iter().map(|o| o.prob).sum();
            assert!((total - 1.0).abs() < 1e-12);
            for o in &outcomes {
                let s: f64 = o.diag.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projector_algebra_is_exact() {
        let dims = ModelDims::new(3, 2).unwrap();
        let proj = ActionProjectors::new(dims);
        let d = dims.dim();
        // Integer check: P_a idempotent, mutually orthogonal, complete.
        let mut seen = vec![0u32; d];
        for a in 0..dims.actions {
            let idx: Vec<usize> = proj.indices(a).collect();
            for &r in &idx {
                seen[r] += 1;
            }
            for b in 0..dims.actions {
                if a != b {
                    let other: Vec<usize> = proj.indices(b).collect();
                    assert!(idx.iter().all(|r| !other.contains(r)));
                }
            }
        }
        assert!(seen.iter().all(|&count| count == 1));
    }

    #[test]
    fn sampled_paths_stay_valid_densities() {
        let gen = default_gen();
        let proj = ActionProjectors::new(gen.dims());
        let ks = build_kraus(&gen, 0.1, 1, 0.01, KrausMode::exact_cptp()).unwrap();
        let ks_pf = build_kraus(&gen, 0.0, 1, 0.01, KrausMode::PaperFaithful).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut rho = DensityOperator::maximally_mixed(4);
        for step in 0..10_000 {
            let choose_pf = step % 2 == 1;
            let ks_ref = if choose_pf { &ks_pf } else { &ks };
            let out = step_interval(&rho, ks_ref, &proj, &mut rng).unwrap();
            rho = out.post;
            if step % 100 == 0 {
                rho.validate().unwrap_or_else(|e| panic!("step {step}: {e}"));
            }
        }
    }
}
