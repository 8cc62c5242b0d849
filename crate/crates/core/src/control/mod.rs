//! Lyapunov feedback control of the interval channel.
//!
//! The Lyapunov function over basis occupations x_r = ⟨b_r|ρ|b_r⟩ is
//!
//! ```text
//! V_ε(ρ) = Σ_r σ_r·x_r − (ε/2)·Σ_r x_r²
//! ```
//!
//! with σ_r ≥ 0 and ε > 0. With σ chosen so the target occupation has zero
//! weight and every other basis state carries weight above ε, the offset
//! value V_ε(ρ) − V_ε(target) is nonnegative on the state space and vanishes
//! exactly at the target pure state.
//!
//! Open loop (u = 0, exact-cptp channel) every x_r is a martingale and V_ε
//! is a supermartingale by concavity. The controller breaks the martingale
//! with a scalar input u: it tilts the belief weights inside the rate matrix
//! and rotates the state by `exp(−i·u·κ·G)` with G the all-ones coupling
//! generator. The feedback law picks u minimizing the exact one-interval
//! conditional expectation of V_ε, enumerated over every (branch, action,
//! interval-length) outcome — no Monte Carlo.
//!
//! σ-weights are produced by a small linear feasibility program over the
//! finite-difference curvatures of u ↦ E[V_ε | ρ = |b_r⟩⟨b_r|, u] at u = 0:
//! curvature must be positive at the target basis state (strict local
//! minimum) and negative elsewhere (strict local maximum), which pins the
//! closed-loop limit set to the target.

pub mod lp;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discrete::{
    build_kraus, enumerate_interval_diag, ActionProjectors, KrausMode, KrausSet,
};
use crate::error::{CoreError, Result};
use crate::linalg::{dagger, max_abs, CMat};
use crate::model::{BeliefVector, DecisionModel, DensityOperator};

use self::lp::{solve_lp, LpOutcome};

/// Finite-support distribution of interaction-interval lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalDistribution {
    support: Vec<u32>,
    probs: Vec<f64>,
}

impl IntervalDistribution {
    pub fn new(support: Vec<u32>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != probs.len() {
            return Err(CoreError::InvalidParameter {
                name: "interval pmf",
                value: support.len() as f64,
                requirement: "support and probabilities must be non-empty and equal length",
            });
        }
        if support.iter().any(|&t| t == 0) {
            return Err(CoreError::InvalidParameter {
                name: "interval length",
                value: 0.0,
                requirement: "interval lengths must be positive integers",
            });
        }
        let mut sum = 0.0;
        for &p in &probs {
            if p < 0.0 || !p.is_finite() {
                return Err(CoreError::InvalidParameter {
                    name: "interval probability",
                    value: p,
                    requirement: "must be nonnegative and finite",
                });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(CoreError::InvalidParameter {
                name: "interval pmf sum",
                value: sum,
                requirement: "must equal 1 within 1e-12",
            });
        }
        Ok(Self { support, probs })
    }

    pub fn uniform(lengths: &[u32]) -> Result<Self> {
        let p = 1.0 / lengths.len() as f64;
        Self::new(lengths.to_vec(), vec![p; lengths.len()])
    }

    pub fn point_mass(t: u32) -> Result<Self> {
        Self::new(vec![t], vec![1.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.support.iter().copied().zip(self.probs.iter().copied())
    }

    pub fn support(&self) -> &[u32] {
        &self.support
    }

    pub fn max_len(&self) -> u32 {
        self.support.iter().copied().max().unwrap_or(1)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let draw: f64 = rng.random();
        let mut acc = 0.0;
        for (t, p) in self.iter() {
            acc += p;
            if draw < acc {
                return t;
            }
        }
        *self.support.last().unwrap()
    }
}

/// How the scalar control input enters the channel.
///
/// `tilt` reshapes the machine-belief weights inside the rate matrix,
/// `η^u(s) ∝ η(s)·exp(u·g_s)`; `kick_scale` sets the strength of the unitary
/// rotation `exp(−i·u·κ·G)` applied ahead of the exact-cptp branch operators.
/// Both are smooth in u and vanish at u = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlCoupling {
    pub tilt: Vec<f64>,
    pub kick_scale: f64,
    pub bound: f64,
}

impl ControlCoupling {
    pub fn new(tilt: Vec<f64>, kick_scale: f64, bound: f64) -> Result<Self> {
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(CoreError::InvalidParameter {
                name: "control bound",
                value: bound,
                requirement: "must be positive and finite",
            });
        }
        if tilt.iter().any(|g| !g.is_finite()) || !kick_scale.is_finite() {
            return Err(CoreError::InvalidParameter {
                name: "coupling",
                value: f64::NAN,
                requirement: "tilt entries and kick scale must be finite",
            });
        }
        Ok(Self {
            tilt,
            kick_scale,
            bound,
        })
    }

    /// Centered per-state tilt g_s = s − (n−1)/2 with unit kick and bound.
    pub fn centered(states: usize) -> Self {
        let mid = (states as f64 - 1.0) / 2.0;
        Self {
            tilt: (0..states).map(|s| s as f64 - mid).collect(),
            kick_scale: 1.0,
            bound: 1.0,
        }
    }

    /// Degenerate coupling with no control authority.
    pub fn zero(states: usize) -> Self {
        Self {
            tilt: vec![0.0; states],
            kick_scale: 0.0,
            bound: 1.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.kick_scale == 0.0 && self.tilt.iter().all(|&g| g == 0.0)
    }

    /// Exponentially tilted belief η^u(s) ∝ η(s)·exp(u·g_s).
    pub fn tilted_belief(&self, eta: &BeliefVector, u: f64) -> Result<BeliefVector> {
        if u == 0.0 || self.tilt.iter().all(|&g| g == 0.0) {
            return Ok(eta.clone());
        }
        let logs: Vec<f64> = eta
            .probs()
            .iter()
            .zip(&self.tilt)
            .map(|(&p, &g)| if p > 0.0 { p.ln() + u * g } else { f64::NEG_INFINITY })
            .collect();
        let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logs.iter().map(|&l| (l - mx).exp()).collect();
        let z: f64 = weights.iter().sum();
        BeliefVector::new(weights.iter().map(|w| w / z).collect())
    }
}

/// Lyapunov weights, curvature regularizer, and target basis index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSpec {
    pub sigma: Vec<f64>,
    pub epsilon: f64,
    pub target: usize,
}

impl LyapunovSpec {
    pub fn new(sigma: Vec<f64>, epsilon: f64, target: usize) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(CoreError::InvalidParameter {
                name: "epsilon",
                value: epsilon,
                requirement: "must be strictly positive",
            });
        }
        if target >= sigma.len() {
            return Err(CoreError::DimensionMismatch {
                context: "Lyapunov target index",
                expected: sigma.len(),
                got: target,
            });
        }
        if sigma.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(CoreError::InvalidParameter {
                name: "sigma",
                value: f64::NAN,
                requirement: "weights must be nonnegative and finite",
            });
        }
        Ok(Self {
            sigma,
            epsilon,
            target,
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    /// Raw value Σσ_r x_r − (ε/2)Σx_r² from a diagonal.
    pub fn value_from_diag(&self, diag: &[f64]) -> f64 {
        let mut lin = 0.0;
        let mut sq = 0.0;
        for (s, &x) in self.sigma.iter().zip(diag) {
            lin += s * x;
            sq += x * x;
        }
        lin - 0.5 * self.epsilon * sq
    }

    /// Raw value at the target pure state: σ_r̄ − ε/2.
    pub fn target_value(&self) -> f64 {
        self.sigma[self.target] - 0.5 * self.epsilon
    }

    /// Offset value, zero exactly at the target pure state and nonnegative
    /// on the state space when σ_r̄ = 0 and σ_r > ε elsewhere.
    pub fn offset_from_diag(&self, diag: &[f64]) -> f64 {
        self.value_from_diag(diag) - self.target_value()
    }
}

/// Raw Lyapunov value V_ε(ρ).
pub fn lyapunov_value(spec: &LyapunovSpec, rho: &DensityOperator) -> f64 {
    spec.value_from_diag(&rho.diagonal())
}

/// Offset Lyapunov value V_ε(ρ) − V_ε(target).
pub fn lyapunov_offset_value(spec: &LyapunovSpec, rho: &DensityOperator) -> f64 {
    spec.offset_from_diag(&rho.diagonal())
}

/// Everything needed to evaluate and optimize the controlled channel.
#[derive(Debug, Clone)]
pub struct ControlProblem<'a> {
    model: &'a DecisionModel,
    coupling: &'a ControlCoupling,
    pi_t: &'a IntervalDistribution,
    dt: f64,
    mode: KrausMode,
    proj: ActionProjectors,
}

/// First and second conditional moments of the basis occupations after one
/// interval: E[x′_s] per s and E[Σ_s x′_s²].
#[derive(Debug, Clone)]
pub struct DiagMoments {
    pub mean: Vec<f64>,
    pub mean_square_sum: f64,
}

impl<'a> ControlProblem<'a> {
    pub fn new(
        model: &'a DecisionModel,
        coupling: &'a ControlCoupling,
        pi_t: &'a IntervalDistribution,
        dt: f64,
        mode: KrausMode,
    ) -> Self {
        // The coupling owns the kick strength; the mode tag only selects the
        // operator family.
        let mode = match mode {
            KrausMode::ExactCptp { .. } => KrausMode::ExactCptp {
                kick_scale: coupling.kick_scale,
            },
            pf => pf,
        };
        Self {
            model,
            coupling,
            pi_t,
            dt,
            mode,
            proj: ActionProjectors::new(model.dims()),
        }
    }

    pub fn mode(&self) -> KrausMode {
        self.mode
    }

    pub fn projectors(&self) -> &ActionProjectors {
        &self.proj
    }

    pub fn interval_distribution(&self) -> &IntervalDistribution {
        &self.pi_t
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn coupling(&self) -> &ControlCoupling {
        self.coupling
    }

    pub fn model(&self) -> &DecisionModel {
        self.model
    }

    /// Operator set for one interval at control u and length tau.
    pub fn channel(&self, eta: &BeliefVector, u: f64, tau: u32) -> Result<KrausSet> {
        let eta_u = self.coupling.tilted_belief(eta, u)?;
        let gen = self.model.generator(&eta_u)?;
        build_kraus(&gen, u, tau, self.dt, self.mode)
    }

    /// Exact conditional moments, mixed over the interval distribution.
    pub fn expected_moments(
        &self,
        rho: &DensityOperator,
        eta: &BeliefVector,
        u: f64,
    ) -> Result<DiagMoments> {
        match self.mode {
            KrausMode::ExactCptp { kick_scale } => {
                self.cptp_moments(rho, eta, u, kick_scale)
            }
            KrausMode::PaperFaithful => self.generic_moments(rho, eta, u),
        }
    }

    /// Closed-form path for the exact-cptp channel: the branch operators are
    /// diagonal after the control rotation, so all moments reduce to sums
    /// over the rotated diagonal. The linear moment is exactly that rotated
    /// diagonal (branch completeness sums each column to one).
    fn cptp_moments(
        &self,
        rho: &DensityOperator,
        eta: &BeliefVector,
        u: f64,
        kick_scale: f64,
    ) -> Result<DiagMoments> {
        let d = rho.dim();
        let eta_u = self.coupling.tilted_belief(eta, u)?;
        let gamma = self.model.rate_matrix(&eta_u)?;
        let alpha = self.model.params().alpha;

        // Rotated diagonal x̃ = diag(R ρ R†).
        let theta = u * kick_scale;
        let x = if theta == 0.0 {
            rho.diagonal()
        } else {
            let r = crate::discrete::kick_matrix(d, theta);
            let m = rho.matrix();
            (0..d)
                .map(|i| {
                    let mut acc = num_complex::Complex64::new(0.0, 0.0);
                    for a in 0..d {
                        for b in 0..d {
                            acc += r[[i, a]] * m[[a, b]] * r[[i, b]].conj();
                        }
                    }
                    acc.re.max(0.0)
                })
                .collect()
        };

        let col_sums: Vec<f64> = (0..d)
            .map(|n| (0..d).map(|m| gamma.rates()[[m, n]]).sum())
            .collect();

        let mut mean_square_sum = 0.0;
        for (tau, p_tau) in self.pi_t.iter() {
            let span = tau as f64 * self.dt;
            // Drift-branch weights must stay nonnegative.
            for n in 0..d {
                if span * alpha * col_sums[n] > 1.0 {
                    return Err(CoreError::ValidityBoundViolated {
                        value: span * alpha * col_sums[n],
                    });
                }
            }
            let mut q_tau = 0.0;
            // Drift branch: w_n = 1 − span·α·colsum_n.
            q_tau += branch_square_sum(&self.proj, &x, |n| 1.0 - span * alpha * col_sums[n]);
            // Dephasing branches: w_n = span·α·γ_mn.
            for mpat in 0..d {
                q_tau += branch_square_sum(&self.proj, &x, |n| {
                    span * alpha * gamma.rates()[[mpat, n]]
                });
            }
            mean_square_sum += p_tau * q_tau;
        }

        Ok(DiagMoments {
            mean: x,
            mean_square_sum,
        })
    }

    fn generic_moments(
        &self,
        rho: &DensityOperator,
        eta: &BeliefVector,
        u: f64,
    ) -> Result<DiagMoments> {
        let d = rho.dim();
        let mut mean = vec![0.0; d];
        let mut mean_square_sum = 0.0;
        for (tau, p_tau) in self.pi_t.iter() {
            let ks = self.channel(eta, u, tau)?;
            let outcomes = enumerate_interval_diag(rho, &ks, &self.proj)?;
            for o in &outcomes {
                let w = p_tau * o.prob;
                let mut sq = 0.0;
                for (s, &xs) in o.diag.iter().enumerate() {
                    mean[s] += w * xs;
                    sq += xs * xs;
                }
                mean_square_sum += w * sq;
            }
        }
        Ok(DiagMoments {
            mean,
            mean_square_sum,
        })
    }

    /// Exact conditional expectation E[V_ε(ρ_{k+T}) | ρ, u] over every
    /// (interval length, branch, action) outcome.
    pub fn expected_v(
        &self,
        rho: &DensityOperator,
        eta: &BeliefVector,
        u: f64,
        spec: &LyapunovSpec,
    ) -> Result<f64> {
        let m = self.expected_moments(rho, eta, u)?;
        Ok(spec
            .sigma
            .iter()
            .zip(&m.mean)
            .map(|(s, x)| s * x)
            .sum::<f64>()
            - 0.5 * spec.epsilon * m.mean_square_sum)
    }

    /// Feedback law: minimize expected V over a symmetric grid on
    /// [−ū, ū], then refine by golden section inside the winning cell.
    ///
    /// Ties prefer u = 0, then the smallest |u|, then the negative sign.
    pub fn select_control(
        &self,
        rho: &DensityOperator,
        eta: &BeliefVector,
        spec: &LyapunovSpec,
        grid_size: usize,
    ) -> Result<f64> {
        if grid_size < 3 || grid_size % 2 == 0 {
            return Err(CoreError::InvalidParameter {
                name: "grid_size",
                value: grid_size as f64,
                requirement: "must be an odd integer ≥ 3 so the grid contains u = 0",
            });
        }
        let ubar = self.coupling.bound;
        let step = 2.0 * ubar / (grid_size - 1) as f64;
        let mut best_val = f64::INFINITY;
        let mut values = Vec::with_capacity(grid_size);
        for i in 0..grid_size {
            let u = -ubar + step * i as f64;
            // The center point is exactly zero by construction.
            let u = if i == (grid_size - 1) / 2 { 0.0 } else { u };
            let v = self.expected_v(rho, eta, u, spec)?;
            values.push((u, v));
            if v < best_val {
                best_val = v;
            }
        }
        let tol = 1e-12 * best_val.abs().max(1.0);
        let mut candidates: Vec<f64> = values
            .iter()
            .filter(|(_, v)| *v <= best_val + tol)
            .map(|(u, _)| *u)
            .collect();
        candidates.sort_by(|a, b| {
            (a.abs(), *a)
                .partial_cmp(&(b.abs(), *b))
                .unwrap()
        });
        let base = if candidates.iter().any(|&u| u == 0.0) {
            0.0
        } else {
            candidates[0]
        };
        let base_val = self.expected_v(rho, eta, base, spec)?;

        let lo = (base - step).max(-ubar);
        let hi = (base + step).min(ubar);
        let (u_ref, v_ref) = self.golden_section(rho, eta, spec, lo, hi)?;
        if v_ref < base_val - 1e-15 {
            Ok(u_ref)
        } else {
            Ok(base)
        }
    }

    fn golden_section(
        &self,
        rho: &DensityOperator,
        eta: &BeliefVector,
        spec: &LyapunovSpec,
        mut lo: f64,
        mut hi: f64,
    ) -> Result<(f64, f64)> {
        const INVPHI: f64 = 0.618_033_988_749_894_9;
        let mut x1 = hi - INVPHI * (hi - lo);
        let mut x2 = lo + INVPHI * (hi - lo);
        let mut f1 = self.expected_v(rho, eta, x1, spec)?;
        let mut f2 = self.expected_v(rho, eta, x2, spec)?;
        for _ in 0..48 {
            if hi - lo < 1e-10 {
                break;
            }
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - INVPHI * (hi - lo);
                f1 = self.expected_v(rho, eta, x1, spec)?;
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + INVPHI * (hi - lo);
                f2 = self.expected_v(rho, eta, x2, spec)?;
            }
        }
        if f1 <= f2 {
            Ok((x1, f1))
        } else {
            Ok((x2, f2))
        }
    }

    /// Curvatures d²/du² E[V_ε | ρ = |b_r⟩⟨b_r|, u] at u = 0 for each r,
    /// decomposed into the σ-linear part and the ε-quadratic part:
    /// c_r(σ, ε) = Σ_s σ_s·A[r][s] − (ε/2)·B[r].
    fn curvature_coefficients(
        &self,
        eta: &BeliefVector,
        h: f64,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let d = self.model.dims().dim();
        let mut a = vec![vec![0.0; d]; d];
        let mut b = vec![0.0; d];
        for r in 0..d {
            let rho = DensityOperator::pure_basis(d, r);
            let m_minus = self.expected_moments(&rho, eta, -h)?;
            let m_zero = self.expected_moments(&rho, eta, 0.0)?;
            let m_plus = self.expected_moments(&rho, eta, h)?;
            for s in 0..d {
                a[r][s] = (m_plus.mean[s] - 2.0 * m_zero.mean[s] + m_minus.mean[s]) / (h * h);
            }
            b[r] = (m_plus.mean_square_sum - 2.0 * m_zero.mean_square_sum
                + m_minus.mean_square_sum)
                / (h * h);
        }
        Ok((a, b))
    }

    /// Solve for σ-weights certifying the target basis state.
    ///
    /// The curvature conditions {c_r̄ ≥ δ, c_r ≤ −δ ∀r ≠ r̄} together with
    /// σ_r̄ = 0 and σ_r ≥ ε + margin form a linear feasibility program, here
    /// solved with the slack maximized. The returned weights are rescaled
    /// (jointly with ε) so max σ_r = 1, and re-verified with an independent
    /// finite-difference step.
    pub fn select_sigma(
        &self,
        eta: &BeliefVector,
        target: usize,
        epsilon: f64,
    ) -> Result<SigmaSolution> {
        let d = self.model.dims().dim();
        if target >= d {
            return Err(CoreError::DimensionMismatch {
                context: "sigma target index",
                expected: d,
                got: target,
            });
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(CoreError::InvalidParameter {
                name: "epsilon",
                value: epsilon,
                requirement: "must be strictly positive",
            });
        }
        let h = 1e-3;
        let h_check = 1e-4;
        let (a, b) = self.curvature_coefficients(eta, h)?;
        let (a2, b2) = self.curvature_coefficients(eta, h_check)?;

        let mut delta = 1e-6;
        for attempt in 0..2 {
            match self.solve_sigma_lp(&a, &b, target, epsilon, delta)? {
                None => {
                    return Err(CoreError::InfeasibleWeights {
                        detail: infeasibility_detail(&a, &b, target, epsilon, delta),
                    })
                }
                Some((sigma, slack)) => {
                    let curv = |aa: &[Vec<f64>], bb: &[f64], r: usize| -> f64 {
                        let lin: f64 = (0..d).map(|s| sigma[s] * aa[r][s]).sum();
                        lin - 0.5 * epsilon * bb[r]
                    };
                    let c_h: Vec<f64> = (0..d).map(|r| curv(&a, &b, r)).collect();
                    let c_h2: Vec<f64> = (0..d).map(|r| curv(&a2, &b2, r)).collect();

                    let reliable = (0..d).all(|r| {
                        let scale = c_h[r].abs().max(c_h2[r].abs()).max(1e-9);
                        (c_h[r] - c_h2[r]).abs() <= 0.1 * scale
                    });
                    let pattern_ok = c_h2[target] >= delta
                        && (0..d).all(|r| r == target || c_h2[r] <= -delta);

                    if (reliable && pattern_ok) || attempt == 1 {
                        if !pattern_ok {
                            return Err(CoreError::InfeasibleWeights {
                                detail: format!(
                                    "curvature certificate failed re-verification at h = {h_check}: \
                                     curvatures {c_h2:?}"
                                ),
                            });
                        }
                        // Joint rescale so max σ = 1; all curvatures scale by
                        // the same positive factor, preserving the pattern.
                        let max_sigma = sigma.iter().cloned().fold(0.0, f64::max);
                        let scale = if max_sigma > 0.0 { 1.0 / max_sigma } else { 1.0 };
                        let sigma_s: Vec<f64> = sigma.iter().map(|s| s * scale).collect();
                        let spec = LyapunovSpec::new(sigma_s, epsilon * scale, target)?;
                        return Ok(SigmaSolution {
                            spec,
                            curvatures: c_h.iter().map(|c| c * scale).collect(),
                            curvatures_check: c_h2.iter().map(|c| c * scale).collect(),
                            fd_step: h,
                            fd_step_check: h_check,
                            slack: slack * scale,
                        });
                    }
                    // Curvatures disagreed between steps: tighten and retry.
                    delta *= 10.0;
                }
            }
        }
        unreachable!("sigma solve loop returns on every path");
    }

    fn solve_sigma_lp(
        &self,
        a: &[Vec<f64>],
        b: &[f64],
        target: usize,
        epsilon: f64,
        delta: f64,
    ) -> Result<Option<(Vec<f64>, f64)>> {
        let d = b.len();
        let margin = epsilon;
        let lower = epsilon + margin;
        let free: Vec<usize> = (0..d).filter(|&s| s != target).collect();
        let nv = free.len() + 1; // σ variables then the slack t
        let t_idx = free.len();

        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        for (i, _s) in free.iter().enumerate() {
            let mut lo = vec![0.0; nv];
            lo[i] = -1.0;
            rows.push(lo);
            rhs.push(-lower);
            let mut up = vec![0.0; nv];
            up[i] = 1.0;
            rows.push(up);
            rhs.push(1.0);
        }
        // Target curvature ≥ δ + t:  −Σσ_s·A[r̄][s] + t ≤ −δ − (ε/2)B[r̄]
        let mut row_t = vec![0.0; nv];
        for (i, &s) in free.iter().enumerate() {
            row_t[i] = -a[target][s];
        }
        row_t[t_idx] = 1.0;
        rows.push(row_t);
        rhs.push(-delta - 0.5 * epsilon * b[target]);
        // Non-target curvature ≤ −δ − t: Σσ_s·A[r][s] + t ≤ −δ + (ε/2)B[r]
        for r in 0..d {
            if r == target {
                continue;
            }
            let mut row = vec![0.0; nv];
            for (i, &s) in free.iter().enumerate() {
                row[i] = a[r][s];
            }
            row[t_idx] = 1.0;
            rows.push(row);
            rhs.push(-delta + 0.5 * epsilon * b[r]);
        }
        // Slack ceiling keeps phase 2 bounded.
        let mut cap = vec![0.0; nv];
        cap[t_idx] = 1.0;
        rows.push(cap);
        rhs.push(10.0);

        let mut obj = vec![0.0; nv];
        obj[t_idx] = 1.0;
        match solve_lp(&obj, &rows, &rhs) {
            LpOutcome::Optimal { x, .. } => {
                let mut sigma = vec![0.0; d];
                for (i, &s) in free.iter().enumerate() {
                    sigma[s] = x[i];
                }
                Ok(Some((sigma, x[t_idx])))
            }
            LpOutcome::Infeasible => Ok(None),
            LpOutcome::Unbounded => Err(CoreError::NumericFailure {
                context: "sigma LP unbounded despite slack ceiling",
            }),
        }
    }

    /// Per-basis-state escape margins V_ε(|b_r⟩⟨b_r|) − min_u E[V_ε | b_r, u]
    /// over the control grid, for r ≠ target. Positive margins certify that
    /// no non-target basis state sits in the closed-loop limit set.
    pub fn limit_set_margins(
        &self,
        eta: &BeliefVector,
        spec: &LyapunovSpec,
        grid_size: usize,
    ) -> Result<Vec<(usize, f64)>> {
        let d = self.model.dims().dim();
        let ubar = self.coupling.bound;
        let step = 2.0 * ubar / (grid_size - 1) as f64;
        let mut out = Vec::new();
        for r in 0..d {
            if r == spec.target {
                continue;
            }
            let rho = DensityOperator::pure_basis(d, r);
            let v0 = spec.value_from_diag(&rho.diagonal());
            let mut best = f64::INFINITY;
            for i in 0..grid_size {
                let u = -ubar + step * i as f64;
                best = best.min(self.expected_v(&rho, eta, u, spec)?);
            }
            out.push((r, v0 - best));
        }
        Ok(out)
    }

    /// Numeric report on the control-input constraints: completeness per u,
    /// diagonality at u = 0, basis distinguishability, and smoothness of the
    /// operator entries in u. Reports; never fails.
    pub fn check_control_constraints(
        &self,
        eta: &BeliefVector,
        u_samples: &[f64],
    ) -> Result<ConstraintReport> {
        let mut completeness = Vec::with_capacity(u_samples.len());
        for &u in u_samples {
            let ks = self.channel(eta, u, 1)?;
            completeness.push((u, ks.completeness_residual()));
        }

        let ks0 = self.channel(eta, 0.0, 1)?;
        let mut offdiag_fraction = Vec::with_capacity(ks0.len());
        for op in ks0.ops() {
            let total: f64 = op.iter().map(|z| z.norm_sqr()).sum();
            let diag: f64 = op.diag().iter().map(|z| z.norm_sqr()).sum();
            let frac = if total > 0.0 { (total - diag) / total } else { 0.0 };
            offdiag_fraction.push(frac.max(0.0));
        }
        let max_offdiag_fraction = offdiag_fraction.iter().cloned().fold(0.0, f64::max);

        // Distinguishability of basis pairs from the diagonal coefficients.
        let d = self.model.dims().dim();
        let mut margin = f64::INFINITY;
        for n1 in 0..d {
            for n2 in (n1 + 1)..d {
                let mut best = 0.0_f64;
                for op in ks0.ops() {
                    let c1 = op[[n1, n1]].norm_sqr();
                    let c2 = op[[n2, n2]].norm_sqr();
                    best = best.max((c1 - c2).abs());
                }
                margin = margin.min(best);
            }
        }
        if d < 2 {
            margin = f64::INFINITY;
        }

        // Second differences of every operator entry across the u samples.
        let mut max_second_difference = 0.0_f64;
        let mut all_finite = true;
        if u_samples.len() >= 3 {
            let mut us = u_samples.to_vec();
            us.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let sets: Vec<KrausSet> = us
                .iter()
                .map(|&u| self.channel(eta, u, 1))
                .collect::<Result<_>>()?;
            for w in 0..(us.len() - 2) {
                let (u0, u1, u2) = (us[w], us[w + 1], us[w + 2]);
                let h01 = u1 - u0;
                let h12 = u2 - u1;
                if h01 <= 0.0 || h12 <= 0.0 {
                    continue;
                }
                for mu in 0..sets[w].len().min(sets[w + 1].len()).min(sets[w + 2].len()) {
                    let (m0, m1, m2) =
                        (&sets[w].ops()[mu], &sets[w + 1].ops()[mu], &sets[w + 2].ops()[mu]);
                    for i in 0..d {
                        for j in 0..d {
                            // Second divided difference ×2 ≈ f''.
                            let dd = ((m2[[i, j]] - m1[[i, j]]) / crate::linalg::c(h12)
                                - (m1[[i, j]] - m0[[i, j]]) / crate::linalg::c(h01))
                                / crate::linalg::c(0.5 * (h01 + h12));
                            let mag = dd.norm();
                            if !mag.is_finite() {
                                all_finite = false;
                            }
                            max_second_difference = max_second_difference.max(mag);
                        }
                    }
                }
            }
        }

        Ok(ConstraintReport {
            mode: format!("{}", self.mode),
            completeness,
            offdiag_fraction,
            max_offdiag_fraction,
            distinguishability_margin: margin,
            max_second_difference,
            all_finite,
        })
    }
}

fn branch_square_sum<F: Fn(usize) -> f64>(
    proj: &ActionProjectors,
    x: &[f64],
    weight: F,
) -> f64 {
    // Σ_a (Σ_{s∈a}(w_s x_s)²) / (Σ_{s∈a} w_s x_s), skipping empty branches.
    let mut total = 0.0;
    for a in 0..proj.actions() {
        let mut mass = 0.0;
        let mut sq = 0.0;
        for s in proj.indices(a) {
            let v = (weight(s) * x[s]).max(0.0);
            mass += v;
            sq += v * v;
        }
        if mass > 0.0 {
            total += sq / mass;
        }
    }
    total
}

fn infeasibility_detail(
    a: &[Vec<f64>],
    b: &[f64],
    target: usize,
    epsilon: f64,
    delta: f64,
) -> String {
    let d = b.len();
    let mut rows = String::new();
    for r in 0..d {
        let tag = if r == target { "target" } else { "other" };
        rows.push_str(&format!(
            "\n  r={r} ({tag}): linear curvature row {:?}, quadratic term {:.3e}",
            a[r].iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>(),
            b[r]
        ));
    }
    format!(
        "no σ satisfies the curvature sign pattern at ε = {epsilon}, δ = {delta}; \
         curvature structure:{rows}"
    )
}

/// Outcome of [`ControlProblem::select_sigma`], including the curvature
/// certificate at both finite-difference steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaSolution {
    pub spec: LyapunovSpec,
    pub curvatures: Vec<f64>,
    pub curvatures_check: Vec<f64>,
    pub fd_step: f64,
    pub fd_step_check: f64,
    pub slack: f64,
}

/// Numeric control-constraint report. Callers decide severity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub mode: String,
    /// (u, ‖Σ M†M − I‖) per sampled control value, at unit interval length.
    pub completeness: Vec<(f64, f64)>,
    /// Off-diagonal norm fraction of each branch operator at u = 0.
    pub offdiag_fraction: Vec<f64>,
    pub max_offdiag_fraction: f64,
    /// min over basis pairs of max over branches of ||c_{μ,n1}|² − |c_{μ,n2}|²|.
    pub distinguishability_margin: f64,
    pub max_second_difference: f64,
    pub all_finite: bool,
}

impl ConstraintReport {
    /// Constraint (i): completeness at every sampled u.
    pub fn completeness_ok(&self, tol: f64) -> bool {
        self.completeness.iter().all(|(_, r)| *r <= tol)
    }

    /// Constraint (ii): all branch operators diagonal at u = 0.
    pub fn diagonality_ok(&self) -> bool {
        self.max_offdiag_fraction <= 1e-12
    }

    /// Constraint (iii): every basis pair distinguished by some branch.
    pub fn distinguishability_ok(&self) -> bool {
        self.distinguishability_margin > 1e-9
    }
}

/// Verify that a matrix is unitary within tolerance (test helper for the
/// control rotation).
pub fn unitarity_error(m: &CMat) -> f64 {
    let d = m.nrows();
    let prod = dagger(m).dot(m);
    let mut id: CMat = Array2::zeros((d, d));
    for i in 0..d {
        id[[i, i]] = crate::linalg::c(1.0);
    }
    max_abs(&(&prod - &id))
}
