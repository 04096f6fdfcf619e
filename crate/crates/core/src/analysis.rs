//! Convergence certificates for the gossip-based Gauss-Newton iteration.
//!
//! Everything here is a pure function of problem constants and run traces.
//! The constants are normally sampled (see [`crate::nlls::estimate_constants`]),
//! so a certificate is an empirical statement: it is checked against traces
//! rather than trusted a priori.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ggn::{GgnTrajectory, SharedSite};
use crate::gossip::consensus_prefactor;
use crate::nlls::{ProblemConstants, StateVector};

/// `(T1, T2)` of the perturbed error recursion
/// `e' <= T1 e^2 + T2 e + alpha * discrepancy`.
pub fn recursion_constants(pc: &ProblemConstants, alpha: f64, epsilon_min: f64) -> (f64, f64) {
    let t1 = alpha * pc.omega / (2.0 * pc.sigma_min);
    let t2 = (1.0 - alpha) * pc.sigma_max / pc.sigma_min
        + std::f64::consts::SQRT_2 * alpha * pc.omega * epsilon_min / (pc.sigma_min * pc.sigma_min);
    (t1, t2)
}

/// Lower end of the admissible step-size interval, `max{1 - 3 s_min/s_max, 0}`.
pub fn admissible_alpha(pc: &ProblemConstants) -> f64 {
    (1.0 - 3.0 * pc.sigma_min / pc.sigma_max).max(0.0)
}

/// `omega eps_min < s_min^2 / (sqrt2 alpha) [3 - (1 - alpha) s_max / s_min]`.
pub fn residual_condition(pc: &ProblemConstants, alpha: f64) -> bool {
    let rhs = pc.sigma_min * pc.sigma_min / (std::f64::consts::SQRT_2 * alpha)
        * (3.0 - (1.0 - alpha) * pc.sigma_max / pc.sigma_min);
    pc.omega * pc.epsilon_min < rhs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum EquilibriumRadii {
    Defined {
        rho_min: f64,
        rho_max: f64,
    },
    /// No contraction region: `T2 >= 1` or negative discriminant.
    Undefined {
        discriminant: f64,
    },
}

impl EquilibriumRadii {
    pub fn rho_min(&self) -> Option<f64> {
        match self {
            EquilibriumRadii::Defined { rho_min, .. } => Some(*rho_min),
            EquilibriumRadii::Undefined { .. } => None,
        }
    }

    pub fn rho_max(&self) -> Option<f64> {
        match self {
            EquilibriumRadii::Defined { rho_max, .. } => Some(*rho_max),
            EquilibriumRadii::Undefined { .. } => None,
        }
    }
}

/// Roots of `rho = T1 rho^2 + T2 rho + alpha kappa`.
pub fn equilibrium_radii(t1: f64, t2: f64, alpha: f64, kappa: f64) -> EquilibriumRadii {
    let discriminant = (1.0 - t2).powi(2) - 4.0 * alpha * t1 * kappa;
    if t2 >= 1.0 || !(discriminant >= 0.0) || !(t1 > 0.0) {
        return EquilibriumRadii::Undefined { discriminant };
    }
    let root = discriminant.sqrt();
    EquilibriumRadii::Defined {
        rho_min: ((1.0 - t2) - root) / (2.0 * t1),
        rho_max: ((1.0 - t2) + root) / (2.0 * t1),
    }
}

/// Gossip-error scale `C`. `None` for a single agent (no gossip needed);
/// infinite as `eta -> 1`.
pub fn gossip_error_scale(
    pc: &ProblemConstants,
    n_agents: usize,
    n_unknowns: usize,
    eta: f64,
    comm_interval: usize,
) -> Option<f64> {
    if n_agents <= 1 {
        return None;
    }
    let i = n_agents as f64;
    let inner = i * (pc.epsilon_max.powi(2) + n_unknowns as f64 * pc.sigma_max.powi(2));
    let prefactor = consensus_prefactor(eta, n_agents, comm_interval) / 2.0;
    Some(2.0 * i * pc.sigma_max * inner.sqrt() * prefactor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScheduleKind {
    /// `l_k = l_min` forever; `lambda_infty` diverges.
    Constant,
    /// `l_k = l_{k-1} + 1`; `lambda_infty = 1 / (1 - lambda_eta)`.
    Incrementing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExchangePlan {
    pub c1: f64,
    pub c2: f64,
    pub d: f64,
    pub lambda_infty: f64,
    /// `None` when `D` is not finite.
    pub ell_min: Option<u64>,
    /// Set when `lambda_infty` diverges and the plan cannot be met.
    pub conditional: bool,
}

/// `C1`, `C2`, `D`, `lambda_infty` and `l_min` for a tolerance `xi`.
pub fn assumption4_plan(
    pc: &ProblemConstants,
    n_agents: usize,
    c: f64,
    lambda_eta: f64,
    xi: f64,
    schedule: ScheduleKind,
) -> Result<ExchangePlan> {
    if !(xi > 0.0 && xi < 0.5) {
        return Err(Error::invalid(format!("xi = {xi} outside (0, 1/2)")));
    }
    let s2 = pc.sigma_min * pc.sigma_min;
    let c1 = 2.0 * (1.0 + pc.sigma_max * pc.epsilon_max / s2);
    let c2 = n_agents as f64 / s2;
    let lambda_infty = match schedule {
        ScheduleKind::Constant => f64::INFINITY,
        ScheduleKind::Incrementing => 1.0 / (1.0 - lambda_eta),
    };
    let d = c * c2 * (pc.nu() * lambda_infty * c1 * c2 + 1.0);
    let ell_min = ell_min_for(xi, d, lambda_eta);
    Ok(ExchangePlan {
        c1,
        c2,
        d,
        lambda_infty,
        ell_min,
        conditional: !lambda_infty.is_finite(),
    })
}

/// `ceil(log(xi / 4D) / log lambda)`, at least one.
pub fn ell_min_for(xi: f64, d: f64, lambda_eta: f64) -> Option<u64> {
    if !d.is_finite() || !(d > 0.0) || !(lambda_eta > 0.0 && lambda_eta < 1.0) {
        return None;
    }
    let ratio = (xi / (4.0 * d)).ln() / lambda_eta.ln();
    // absorb rounding in the logarithms before taking the ceiling
    let ell = (ratio - 1e-9).ceil();
    Some(ell.max(1.0) as u64)
}

/// `kappa = 4 C1 D lambda^(l_min + 1)`.
pub fn perturbation_bound(c1: f64, d: f64, lambda_eta: f64, ell_min: u64) -> f64 {
    4.0 * c1 * d * lambda_eta.powf(ell_min as f64 + 1.0)
}

/// `4 C C1 C2 sum_k lambda^(l_k + 1)` bound on pairwise disagreement after
/// the listed updates.
pub fn disagreement_bound(c: f64, c1: f64, c2: f64, lambda_eta: f64, exchanges: &[usize]) -> f64 {
    4.0 * c
        * c1
        * c2
        * exchanges
            .iter()
            .map(|l| lambda_eta.powf(*l as f64 + 1.0))
            .sum::<f64>()
}

/// Inputs that pin down a certificate.
#[derive(Debug, Clone, Serialize)]
pub struct CertificateInputs {
    pub constants: ProblemConstants,
    pub alpha: f64,
    pub n_agents: usize,
    pub n_unknowns: usize,
    pub eta: f64,
    pub comm_interval: usize,
    pub xi: f64,
    pub schedule: ScheduleKind,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceCertificate {
    pub t1: f64,
    pub t2: f64,
    pub rho_min: Option<f64>,
    pub rho_max: Option<f64>,
    pub discriminant: f64,
    pub kappa: f64,
    pub alpha_lower: f64,
    pub alpha_admissible: bool,
    pub residual_condition: bool,
    pub c: Option<f64>,
    pub c1: f64,
    pub c2: f64,
    pub d: f64,
    pub lambda_eta: Option<f64>,
    pub l0: usize,
    pub ell_min: Option<u64>,
    pub lambda_infty: f64,
    pub xi: f64,
    /// Constants came from sampling, not from analysis.
    pub estimated_constants: bool,
    /// `lambda_infty` diverges, so the exchange plan is not met.
    pub conditional: bool,
    pub inputs: CertificateInputs,
}

impl ConvergenceCertificate {
    pub fn compute(inputs: CertificateInputs) -> Result<Self> {
        let pc = &inputs.constants;
        let alpha = inputs.alpha;
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::invalid(format!("alpha = {alpha} outside (0, 1]")));
        }
        let (t1, t2) = recursion_constants(pc, alpha, pc.epsilon_min);
        let l0 = inputs.n_agents.saturating_sub(1) * inputs.comm_interval;
        let lambda =
            crate::gossip::lambda_eta(inputs.eta, inputs.n_agents, inputs.comm_interval).ok();
        let c = gossip_error_scale(
            pc,
            inputs.n_agents,
            inputs.n_unknowns,
            inputs.eta,
            inputs.comm_interval,
        );

        let (plan, kappa) = match (c, lambda) {
            (Some(c), Some(lambda)) => {
                let plan =
                    assumption4_plan(pc, inputs.n_agents, c, lambda, inputs.xi, inputs.schedule)?;
                let kappa = plan.ell_min.map_or(f64::INFINITY, |l| {
                    perturbation_bound(plan.c1, plan.d, lambda, l)
                });
                (plan, kappa)
            }
            // a single agent averages exactly: no perturbation
            _ => {
                let plan =
                    assumption4_plan(pc, inputs.n_agents, 0.0, 0.5, inputs.xi, inputs.schedule)?;
                (plan, 0.0)
            }
        };
        let radii = equilibrium_radii(t1, t2, alpha, kappa);
        let (rho_min, rho_max, discriminant) = match radii {
            EquilibriumRadii::Defined { rho_min, rho_max } => (
                Some(rho_min),
                Some(rho_max),
                (1.0 - t2).powi(2) - 4.0 * alpha * t1 * kappa,
            ),
            EquilibriumRadii::Undefined { discriminant } => (None, None, discriminant),
        };
        let alpha_lower = admissible_alpha(pc);
        Ok(Self {
            t1,
            t2,
            rho_min,
            rho_max,
            discriminant,
            kappa,
            alpha_lower,
            alpha_admissible: alpha > alpha_lower,
            residual_condition: residual_condition(pc, alpha),
            c,
            c1: plan.c1,
            c2: plan.c2,
            d: plan.d,
            lambda_eta: lambda,
            l0,
            ell_min: plan.ell_min,
            lambda_infty: plan.lambda_infty,
            xi: inputs.xi,
            estimated_constants: pc.n_samples > 0,
            conditional: plan.conditional,
            inputs,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.inputs.alpha
    }

    /// Flat `key = value` pairs in a fixed order.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
            v.map_or_else(|| "undefined".to_string(), |v| v.to_string())
        }
        let pc = &self.inputs.constants;
        vec![
            ("cert.epsilon_max", pc.epsilon_max.to_string()),
            ("cert.epsilon_min", pc.epsilon_min.to_string()),
            ("cert.sigma_min", pc.sigma_min.to_string()),
            ("cert.sigma_max", pc.sigma_max.to_string()),
            ("cert.omega", pc.omega.to_string()),
            ("cert.nu_delta", pc.nu_delta.to_string()),
            ("cert.nu_big_delta", pc.nu_big_delta.to_string()),
            ("cert.rank_deficient", pc.rank_deficient.to_string()),
            ("cert.alpha", self.inputs.alpha.to_string()),
            ("cert.alpha_lower", self.alpha_lower.to_string()),
            ("cert.alpha_admissible", self.alpha_admissible.to_string()),
            (
                "cert.residual_condition",
                self.residual_condition.to_string(),
            ),
            ("cert.t1", self.t1.to_string()),
            ("cert.t2", self.t2.to_string()),
            ("cert.kappa", self.kappa.to_string()),
            ("cert.rho_min", opt(self.rho_min)),
            ("cert.rho_max", opt(self.rho_max)),
            ("cert.discriminant", self.discriminant.to_string()),
            ("cert.eta", self.inputs.eta.to_string()),
            ("cert.l0", self.l0.to_string()),
            ("cert.lambda_eta", opt(self.lambda_eta)),
            ("cert.c", opt(self.c)),
            ("cert.c1", self.c1.to_string()),
            ("cert.c2", self.c2.to_string()),
            ("cert.d", self.d.to_string()),
            ("cert.lambda_infty", self.lambda_infty.to_string()),
            ("cert.xi", self.xi.to_string()),
            ("cert.ell_min", opt(self.ell_min)),
            (
                "cert.estimated_constants",
                self.estimated_constants.to_string(),
            ),
            ("cert.conditional", self.conditional.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum BoundStatus {
    Satisfied,
    Violated,
    /// Preconditions failed; no claim is made.
    NotApplicable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub bound_name: String,
    pub theoretical_value: f64,
    pub observed_value: f64,
    pub satisfied: bool,
    /// `theoretical - observed`.
    pub margin: f64,
    pub status: BoundStatus,
}

impl BoundReport {
    /// Compare `observed <= theoretical` with relative slack `rel_tol`.
    pub fn check(name: impl Into<String>, theoretical: f64, observed: f64, rel_tol: f64) -> Self {
        let satisfied = observed <= theoretical + rel_tol * theoretical.abs().max(observed.abs());
        Self {
            bound_name: name.into(),
            theoretical_value: theoretical,
            observed_value: observed,
            satisfied,
            margin: theoretical - observed,
            status: if satisfied {
                BoundStatus::Satisfied
            } else {
                BoundStatus::Violated
            },
        }
    }

    pub fn not_applicable(
        name: impl Into<String>,
        observed: f64,
        reason: impl Into<String>,
    ) -> Self {
        Self {
            bound_name: name.into(),
            theoretical_value: f64::NAN,
            observed_value: observed,
            satisfied: false,
            margin: f64::NAN,
            status: BoundStatus::NotApplicable(reason.into()),
        }
    }

    pub fn is_applicable(&self) -> bool {
        !matches!(self.status, BoundStatus::NotApplicable(_))
    }
}

/// Per-agent surrogate mismatch at a set of iterates together with the
/// Lipschitz bounds `(nu / I) sum_j ||x_i - x_j||`.
#[derive(Debug, Clone)]
pub struct MismatchReport {
    pub delta: Vec<f64>,
    pub big_delta: Vec<f64>,
    pub delta_bound: Vec<f64>,
    pub big_delta_bound: Vec<f64>,
}

impl MismatchReport {
    /// Largest observed/bound ratio over both mismatch terms (0 when every
    /// bound is 0 and met).
    pub fn max_ratio(&self) -> f64 {
        let ratio = |o: f64, b: f64| if o == 0.0 { 0.0 } else { o / b };
        self.delta
            .iter()
            .zip(&self.delta_bound)
            .chain(self.big_delta.iter().zip(&self.big_delta_bound))
            .map(|(o, b)| ratio(*o, *b))
            .fold(0.0, f64::max)
    }
}

/// Surrogate mismatch `delta_i = h_bar - q(x_i)` and `Delta_i = H_bar - Q(x_i)`
/// for agents sitting at `iterates`.
pub fn surrogate_mismatch(
    sites: &[SharedSite],
    iterates: &[StateVector],
    pc: &ProblemConstants,
) -> MismatchReport {
    let n = iterates[0].len();
    let n_agents = sites.len() as f64;
    let mut h_bar = nalgebra::DVector::zeros(n);
    let mut hess_bar = nalgebra::DMatrix::zeros(n, n);
    for (s, x) in sites.iter().zip(iterates) {
        let info = crate::ggn::local_init_info(s.as_ref(), x);
        h_bar += info.h;
        hess_bar += info.hess;
    }
    h_bar /= n_agents;
    hess_bar /= n_agents;
    let mismatch = crate::ggn::surrogate_mismatch_at(sites, iterates, &h_bar, &hess_bar);
    let spread: Vec<f64> = iterates
        .iter()
        .map(|xi| iterates.iter().map(|xj| (xi - xj).norm()).sum::<f64>() / n_agents)
        .collect();
    MismatchReport {
        delta: mismatch.iter().map(|m| m.0).collect(),
        big_delta: mismatch.iter().map(|m| m.1).collect(),
        delta_bound: spread.iter().map(|s| pc.nu_delta * s).collect(),
        big_delta_bound: spread.iter().map(|s| pc.nu_big_delta * s).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct Theorem1Report {
    /// (a) every agent starts strictly inside `rho_max`.
    pub initial_condition: BoundReport,
    /// (b) final per-agent error against `rho_min + tol`.
    pub asymptotic_error: BoundReport,
    /// (c) recursion inequality, worst case over (agent, update).
    pub recursion: BoundReport,
    pub recursion_checks: usize,
    pub recursion_violations: usize,
}

/// Check a recorded trajectory against the error recursion and the
/// equilibrium radii of `cert`.
///
/// The recursion check needs per-update descent discrepancies, i.e. the
/// trajectory must have been produced with diagnostics enabled.
pub fn verify_theorem1(
    trajectory: &GgnTrajectory,
    x_star: &StateVector,
    cert: &ConvergenceCertificate,
    limsup_tol: f64,
) -> Result<Theorem1Report> {
    let alpha = cert.alpha();
    let errors: Vec<Vec<f64>> = trajectory
        .iterates
        .iter()
        .map(|xs| xs.iter().map(|x| (x - x_star).norm()).collect())
        .collect();
    let initial_max = errors[0].iter().copied().fold(0.0, f64::max);
    let final_max = errors
        .last()
        .expect("nonempty")
        .iter()
        .copied()
        .fold(0.0, f64::max);

    let initial_condition = match cert.rho_max {
        Some(rho_max) => {
            let mut r = BoundReport::check("initial error < rho_max", rho_max, initial_max, 0.0);
            if initial_max >= rho_max {
                r.satisfied = false;
                r.status =
                    BoundStatus::NotApplicable("initial iterate outside rho_max; no claim".into());
            }
            r
        }
        None => {
            BoundReport::not_applicable("initial error < rho_max", initial_max, "rho_max undefined")
        }
    };
    let asymptotic_error = match (cert.rho_min, initial_condition.satisfied) {
        (Some(rho_min), true) => BoundReport::check(
            "limsup error <= rho_min",
            rho_min + limsup_tol,
            final_max,
            0.0,
        ),
        (None, _) => {
            BoundReport::not_applicable("limsup error <= rho_min", final_max, "rho_min undefined")
        }
        (_, false) => BoundReport::not_applicable(
            "limsup error <= rho_min",
            final_max,
            "initial condition unmet",
        ),
    };

    let mut checks = 0;
    let mut violations = 0;
    let mut worst_ratio: f64 = 0.0;
    let mut worst = (0.0, 0.0);
    for (k, rec) in trajectory.updates.iter().enumerate() {
        let diag = rec.diagnostics.as_ref().ok_or_else(|| {
            Error::invalid(
                "trajectory was recorded without diagnostics; rerun with diagnostics enabled",
            )
        })?;
        for (i, e_next) in errors[k + 1].iter().enumerate() {
            let e = errors[k][i];
            let rhs = cert.t1 * e * e + cert.t2 * e + alpha * diag.discrepancy[i];
            checks += 1;
            // rounding slack only
            if *e_next > rhs * (1.0 + 1e-12) + 1e-15 {
                violations += 1;
            }
            let ratio = if *e_next == 0.0 { 0.0 } else { e_next / rhs };
            if ratio > worst_ratio {
                worst_ratio = ratio;
                worst = (rhs, *e_next);
            }
        }
    }
    let mut recursion =
        BoundReport::check("error recursion (worst ratio)", worst.0, worst.1, 1e-12);
    recursion.satisfied = violations == 0;
    recursion.status = if violations == 0 {
        BoundStatus::Satisfied
    } else {
        BoundStatus::Violated
    };
    Ok(Theorem1Report {
        initial_condition,
        asymptotic_error,
        recursion,
        recursion_checks: checks,
        recursion_violations: violations,
    })
}
