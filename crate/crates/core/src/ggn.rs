//! The gossip-based Gauss-Newton iteration and a first-order diffusion baseline.
//!
//! Each update `k` runs three bulk-synchronous phases:
//!
//! 1. every agent forms its information vector `[G_i^T g_i; vec(G_i^T G_i)]`
//!    at its own iterate,
//! 2. `l_k` gossip exchanges mix the stacked information vectors,
//! 3. every agent solves its mixed normal system and takes a projected step.
//!
//! The mixing matrices for an update are drawn before phase 2 starts, so the
//! result does not depend on how the per-agent work is scheduled.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gossip::{mix_in_place, GossipProcess, WeightMatrix};
use crate::nlls::{
    exact_descent, project_unchecked, solve_normal, BoxSet, SiteModel, StateVector, NORMAL_COND_CAP,
};

pub type SharedSite = Arc<dyn SiteModel>;

/// Gossiped payload: gradient-like term `h` and Gauss-Newton Hessian `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoVector {
    pub h: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl InfoVector {
    pub fn dim(&self) -> usize {
        self.h.len()
    }

    /// Flatten to `[h; vec(H)]`, length `N (N + 1)`.
    pub fn to_payload(&self) -> DVector<f64> {
        let n = self.dim();
        let mut p = DVector::zeros(n * (n + 1));
        p.rows_mut(0, n).copy_from(&self.h);
        p.rows_mut(n, n * n).copy_from_slice(self.hess.as_slice());
        p
    }

    pub fn from_payload(n: usize, payload: &DVector<f64>) -> Result<Self> {
        if payload.len() != n * (n + 1) {
            return Err(Error::invalid(format!(
                "payload of length {} does not hold an information vector of dimension {n}",
                payload.len()
            )));
        }
        Ok(Self {
            h: payload.rows(0, n).into_owned(),
            hess: DMatrix::from_column_slice(n, n, &payload.as_slice()[n..]),
        })
    }
}

#[derive(Debug, Clone)]
pub struct AgentState {
    pub agent_id: usize,
    pub x: StateVector,
    pub info: InfoVector,
    pub last_descent: StateVector,
    /// Diagonal shift used for `last_descent` (0 unless the fallback fired).
    pub last_shift: f64,
}

impl AgentState {
    pub fn new(agent_id: usize, x: StateVector) -> Self {
        let n = x.len();
        Self {
            agent_id,
            info: InfoVector {
                h: DVector::zeros(n),
                hess: DMatrix::zeros(n, n),
            },
            last_descent: DVector::zeros(n),
            last_shift: 0.0,
            x,
        }
    }
}

/// Number of gossip exchanges `l_k` before update `k` (counted from 1).
#[derive(Debug, Clone, PartialEq)]
pub enum ExchangeSchedule {
    Constant(usize),
    /// `l_1 = start`, `l_k = l_{k-1} + 1`.
    Incrementing {
        start: usize,
    },
    /// Explicit list; the last entry repeats.
    Explicit(Vec<usize>),
}

impl ExchangeSchedule {
    pub fn exchanges(&self, k: usize) -> usize {
        match self {
            ExchangeSchedule::Constant(l) => *l,
            ExchangeSchedule::Incrementing { start } => start + k.saturating_sub(1),
            ExchangeSchedule::Explicit(v) => v[(k.saturating_sub(1)).min(v.len() - 1)],
        }
    }

    pub fn min_exchanges(&self) -> usize {
        match self {
            ExchangeSchedule::Constant(l) => *l,
            ExchangeSchedule::Incrementing { start } => *start,
            ExchangeSchedule::Explicit(v) => v.iter().copied().min().unwrap_or(0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            ExchangeSchedule::Explicit(v) => !v.is_empty() && v.iter().all(|l| *l >= 1),
            other => other.min_exchanges() >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("every update needs at least one exchange"))
        }
    }
}

/// Default relative ridge: when the mixed normal matrix is too ill-conditioned
/// to solve, `1e-8 * trace(H) / N` is added to its diagonal.
pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GgnConfig {
    pub alpha: f64,
    pub schedule: ExchangeSchedule,
    pub max_updates: usize,
    pub stop_tol: f64,
    /// Relative ridge factor for the ill-conditioning fallback; the absolute
    /// shift is `ridge * trace(H) / N`. Zero disables the fallback.
    pub ridge: f64,
    /// Record descent discrepancies, gossip errors and surrogate mismatch
    /// per update. Costs one exact descent per agent per update.
    pub diagnostics: bool,
}

impl Default for GgnConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            schedule: ExchangeSchedule::Constant(3),
            max_updates: 15,
            stop_tol: 1e-12,
            ridge: DEFAULT_RIDGE,
            diagnostics: false,
        }
    }
}

impl GgnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid(format!(
                "alpha = {} outside (0, 1]",
                self.alpha
            )));
        }
        if !(self.stop_tol > 0.0) {
            return Err(Error::invalid("stop tolerance must be positive"));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::invalid("ridge must be nonnegative"));
        }
        self.schedule.validate()
    }
}

/// `h = G_i^T g_i`, `H = G_i^T G_i` at the agent's iterate.
pub fn local_init_info(site: &dyn SiteModel, x: &StateVector) -> InfoVector {
    let (g, jac) = site.residual_and_jacobian(x);
    InfoVector {
        h: jac.tr_mul(&g),
        hess: jac.tr_mul(&jac),
    }
}

/// Absolute diagonal shift for relative ridge factor `ridge`. A vanishing
/// trace (an agent whose Jacobian is identically zero) falls back to `ridge`
/// itself.
pub fn ridge_shift(hess: &DMatrix<f64>, ridge: f64) -> f64 {
    let relative = ridge * hess.trace() / hess.nrows() as f64;
    if relative == 0.0 {
        ridge
    } else {
        relative
    }
}

/// Descent `H^{-1} h` from a (mixed) information vector, together with the
/// diagonal shift used. When `H` exceeds the condition cap and `ridge > 0`,
/// `(H + shift I)^{-1} h` is returned instead.
pub fn regularized_descent(info: &InfoVector, ridge: f64) -> Result<(DVector<f64>, f64)> {
    match solve_normal(&info.hess, &info.h, NORMAL_COND_CAP) {
        Ok(d) => Ok((d, 0.0)),
        Err(e @ Error::SingularSystem { .. }) => {
            let shift = ridge_shift(&info.hess, ridge);
            if !(shift > 0.0) {
                return Err(e);
            }
            let n = info.dim();
            let shifted = &info.hess + DMatrix::identity(n, n) * shift;
            Ok((solve_normal(&shifted, &info.h, NORMAL_COND_CAP)?, shift))
        }
        Err(e) => Err(e),
    }
}

/// Descent direction from a (mixed) information vector; see
/// [`regularized_descent`].
pub fn approximate_descent(info: &InfoVector, ridge: f64) -> Result<DVector<f64>> {
    regularized_descent(info, ridge).map(|(d, _)| d)
}

/// Local Gauss-Newton step from the agent's post-gossip information vector.
pub fn local_update(
    agent: &AgentState,
    alpha: f64,
    bounds: &BoxSet,
    ridge: f64,
) -> Result<AgentState> {
    let (d, shift) =
        regularized_descent(&agent.info, ridge).map_err(|e| e.at_agent(agent.agent_id))?;
    let x = project_unchecked(&(&agent.x - &d * alpha), bounds);
    Ok(AgentState {
        agent_id: agent.agent_id,
        x,
        info: agent.info.clone(),
        last_descent: d,
        last_shift: shift,
    })
}

/// `||d_i(l) - d_i||` per agent, with `d_i` the exact descent at the agent's
/// own iterate. NaN where the exact system is singular at that iterate (an
/// agent that has drifted onto a degenerate face of the box).
pub fn descent_discrepancy(
    sites: &[SharedSite],
    agents: &[AgentState],
    ridge: f64,
) -> Result<Vec<f64>> {
    agents
        .par_iter()
        .map(|a| {
            let approx = approximate_descent(&a.info, ridge).map_err(|e| e.at_agent(a.agent_id))?;
            match exact_descent(sites, &a.x) {
                Ok(exact) => Ok((approx - exact).norm()),
                Err(Error::SingularSystem { .. }) => Ok(f64::NAN),
                Err(e) => Err(e.at_agent(a.agent_id)),
            }
        })
        .collect()
}

/// Per-agent objective `||g_i(x_i)||^2` and gradient norm `||G_i^T g_i||`.
pub fn site_metrics(sites: &[SharedSite], iterates: &[StateVector]) -> (Vec<f64>, Vec<f64>) {
    sites
        .par_iter()
        .zip(iterates.par_iter())
        .map(|(s, x)| {
            let (g, jac) = s.residual_and_jacobian(x);
            (g.norm_squared(), jac.tr_mul(&g).norm())
        })
        .unzip()
}

pub fn max_pairwise_disagreement(iterates: &[StateVector]) -> f64 {
    let mut best: f64 = 0.0;
    for (a, xa) in iterates.iter().enumerate() {
        for xb in &iterates[a + 1..] {
            best = best.max((xa - xb).norm());
        }
    }
    best
}

/// Trace-level diagnostics for one update, evaluated at the pre-update
/// iterates `x_i^k` and the post-gossip information vectors.
#[derive(Debug, Clone)]
pub struct UpdateDiagnostics {
    pub discrepancy: Vec<f64>,
    /// `||e_k(l_k)||` over the stacked gradient terms.
    pub gossip_error_h: f64,
    /// `||E_k(l_k)||_F` over the stacked Hessian terms.
    pub gossip_error_hess: f64,
    /// Per agent `||h_bar - q(x_i)||`.
    pub mismatch_h: Vec<f64>,
    /// Per agent `||H_bar - Q(x_i)||` (spectral norm).
    pub mismatch_hess: Vec<f64>,
    /// Per agent `(1/I) sum_j ||x_i - x_j||`.
    pub mean_distance: Vec<f64>,
    /// Smallest nonzero mixing weight seen in this update.
    pub eta: f64,
}

#[derive(Debug, Clone)]
pub struct UpdateRecord {
    /// Update index, from 1.
    pub k: usize,
    pub exchanges: usize,
    pub cumulative_exchanges: usize,
    pub descents: Vec<StateVector>,
    pub ridge_shifts: Vec<f64>,
    pub max_step: f64,
    pub diagnostics: Option<UpdateDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct GgnTrajectory {
    /// `iterates[k][i]` is agent `i` after `k` updates; `iterates[0]` is the start.
    pub iterates: Vec<Vec<StateVector>>,
    /// Per-agent `||g_i(x_i^k)||^2`, aligned with `iterates`.
    pub val: Vec<Vec<f64>>,
    /// Per-agent `||G_i^T g_i||` at `x_i^k`, aligned with `iterates`.
    pub grad: Vec<Vec<f64>>,
    pub updates: Vec<UpdateRecord>,
    pub final_agents: Vec<AgentState>,
    pub stopped_early: bool,
}

impl GgnTrajectory {
    pub fn val_total(&self, k: usize) -> f64 {
        self.val[k].iter().sum()
    }

    pub fn grad_total(&self, k: usize) -> f64 {
        self.grad[k].iter().sum()
    }

    pub fn n_updates(&self) -> usize {
        self.updates.len()
    }
}

/// Run the iteration with every agent starting from `x0`.
pub fn ggn_run(
    sites: &[SharedSite],
    bounds: &BoxSet,
    gossip: &mut GossipProcess,
    config: &GgnConfig,
    x0: &StateVector,
) -> Result<GgnTrajectory> {
    ggn_run_from(sites, bounds, gossip, config, vec![x0.clone(); sites.len()])
}

/// Run the iteration from per-agent starting points (warm starts).
pub fn ggn_run_from(
    sites: &[SharedSite],
    bounds: &BoxSet,
    gossip: &mut GossipProcess,
    config: &GgnConfig,
    starts: Vec<StateVector>,
) -> Result<GgnTrajectory> {
    config.validate()?;
    let n_agents = sites.len();
    if n_agents == 0 || starts.len() != n_agents {
        return Err(Error::invalid("need one start point per site"));
    }
    if gossip.config().n_agents() != n_agents {
        return Err(Error::invalid(format!(
            "gossip network has {} agents but there are {n_agents} sites",
            gossip.config().n_agents()
        )));
    }
    let dim = bounds.dim();
    for (s, x) in sites.iter().zip(&starts) {
        if s.state_dim() != dim || x.len() != dim {
            return Err(Error::invalid("site, box and start dimensions disagree"));
        }
    }

    let mut agents: Vec<AgentState> = starts
        .into_iter()
        .enumerate()
        .map(|(i, x)| AgentState::new(i, project_unchecked(&x, bounds)))
        .collect();
    let mut iterates = vec![agents.iter().map(|a| a.x.clone()).collect::<Vec<_>>()];
    let mut val = Vec::new();
    let mut grad = Vec::new();
    let mut updates = Vec::new();
    let mut cumulative = 0;
    let mut stopped_early = false;

    for k in 1..=config.max_updates {
        // phase 1: local information vectors
        let infos: Vec<InfoVector> = sites
            .par_iter()
            .zip(agents.par_iter())
            .map(|(s, a)| local_init_info(s.as_ref(), &a.x))
            .collect();
        val.push(
            sites
                .par_iter()
                .zip(agents.par_iter())
                .map(|(s, a)| s.residual(&a.x).norm_squared())
                .collect(),
        );
        grad.push(infos.iter().map(|i| i.h.norm()).collect());

        // phase 2: gossip
        let l_k = config.schedule.exchanges(k);
        let weights = gossip.draw(l_k);
        let mut payloads: Vec<DVector<f64>> = infos.iter().map(InfoVector::to_payload).collect();
        for w in &weights {
            mix_in_place(&mut payloads, w)?;
        }
        cumulative += l_k;
        for (a, p) in agents.iter_mut().zip(&payloads) {
            a.info = InfoVector::from_payload(dim, p)?;
        }

        let diagnostics = if config.diagnostics {
            Some(update_diagnostics(
                sites,
                &agents,
                &infos,
                &weights,
                config.ridge,
            )?)
        } else {
            None
        };

        // phase 3: local updates
        let next: Vec<AgentState> = agents
            .par_iter()
            .map(|a| local_update(a, config.alpha, bounds, config.ridge))
            .collect::<Result<_>>()?;
        let max_step = next
            .iter()
            .zip(&agents)
            .map(|(n, a)| (&n.x - &a.x).norm())
            .fold(0.0, f64::max);
        updates.push(UpdateRecord {
            k,
            exchanges: l_k,
            cumulative_exchanges: cumulative,
            descents: next.iter().map(|a| a.last_descent.clone()).collect(),
            ridge_shifts: next.iter().map(|a| a.last_shift).collect(),
            max_step,
            diagnostics,
        });
        agents = next;
        iterates.push(agents.iter().map(|a| a.x.clone()).collect());
        if max_step <= config.stop_tol {
            stopped_early = k < config.max_updates;
            break;
        }
    }

    let (last_val, last_grad) = site_metrics(sites, iterates.last().expect("nonempty"));
    val.push(last_val);
    grad.push(last_grad);

    Ok(GgnTrajectory {
        iterates,
        val,
        grad,
        updates,
        final_agents: agents,
        stopped_early,
    })
}

fn update_diagnostics(
    sites: &[SharedSite],
    agents: &[AgentState],
    initial: &[InfoVector],
    weights: &[WeightMatrix],
    ridge: f64,
) -> Result<UpdateDiagnostics> {
    let n_agents = agents.len() as f64;
    let dim = agents[0].x.len();
    let h_bar = initial
        .iter()
        .fold(DVector::zeros(dim), |acc, i| acc + &i.h)
        / n_agents;
    let hess_bar = initial
        .iter()
        .fold(DMatrix::zeros(dim, dim), |acc, i| acc + &i.hess)
        / n_agents;

    let gossip_error_h = agents
        .iter()
        .map(|a| (&a.info.h - &h_bar).norm_squared())
        .sum::<f64>()
        .sqrt();
    let gossip_error_hess = agents
        .iter()
        .map(|a| (&a.info.hess - &hess_bar).norm_squared())
        .sum::<f64>()
        .sqrt();

    let discrepancy = descent_discrepancy(sites, agents, ridge)?;
    let iterates: Vec<StateVector> = agents.iter().map(|a| a.x.clone()).collect();
    let mismatch = surrogate_mismatch_at(sites, &iterates, &h_bar, &hess_bar);
    let mean_distance = iterates
        .iter()
        .map(|xi| iterates.iter().map(|xj| (xi - xj).norm()).sum::<f64>() / n_agents)
        .collect();

    Ok(UpdateDiagnostics {
        discrepancy,
        gossip_error_h,
        gossip_error_hess,
        mismatch_h: mismatch.iter().map(|m| m.0).collect(),
        mismatch_hess: mismatch.iter().map(|m| m.1).collect(),
        mean_distance,
        eta: crate::gossip::observed_eta(weights),
    })
}

/// `(||h_bar - q(x_i)||, ||H_bar - Q(x_i)||)` per agent, where `q`, `Q` are
/// the exact site averages at agent `i`'s iterate.
pub(crate) fn surrogate_mismatch_at(
    sites: &[SharedSite],
    iterates: &[StateVector],
    h_bar: &DVector<f64>,
    hess_bar: &DMatrix<f64>,
) -> Vec<(f64, f64)> {
    let n_agents = sites.len() as f64;
    iterates
        .par_iter()
        .map(|x| {
            let dim = x.len();
            let mut q = DVector::zeros(dim);
            let mut big_q = DMatrix::zeros(dim, dim);
            for s in sites {
                let info = local_init_info(s.as_ref(), x);
                q += info.h;
                big_q += info.hess;
            }
            q /= n_agents;
            big_q /= n_agents;
            (
                (h_bar - q).norm(),
                crate::nlls::spectral_norm(&(hess_bar - big_q)),
            )
        })
        .collect()
}

/// Step size for the diffusion baseline at exchange `l` (from 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    /// `c / l`.
    Diminishing(f64),
}

impl StepSchedule {
    pub fn step(&self, l: usize) -> f64 {
        match *self {
            StepSchedule::Constant(c) => c,
            StepSchedule::Diminishing(c) => c / l as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionTrajectory {
    /// `iterates[l][i]` after `l` exchanges.
    pub iterates: Vec<Vec<StateVector>>,
    pub val: Vec<Vec<f64>>,
    pub grad: Vec<Vec<f64>>,
}

impl DiffusionTrajectory {
    pub fn val_total(&self, l: usize) -> f64 {
        self.val[l].iter().sum()
    }

    pub fn grad_total(&self, l: usize) -> f64 {
        self.grad[l].iter().sum()
    }
}

/// First-order diffusion: per exchange,
/// `x_i <- P[sum_j W_ij x_j - a_l G_i^T(x_i) g_i(x_i)]`.
pub fn diffusion_baseline_run(
    sites: &[SharedSite],
    bounds: &BoxSet,
    gossip: &mut GossipProcess,
    steps: StepSchedule,
    total_exchanges: usize,
    starts: Vec<StateVector>,
) -> Result<DiffusionTrajectory> {
    let n_agents = sites.len();
    if starts.len() != n_agents || gossip.config().n_agents() != n_agents {
        return Err(Error::invalid(
            "sites, start points and gossip network disagree",
        ));
    }
    if steps.step(1) < 0.0 {
        return Err(Error::invalid("diffusion step sizes must be nonnegative"));
    }
    let mut xs: Vec<StateVector> = starts
        .iter()
        .map(|x| project_unchecked(x, bounds))
        .collect();
    let (v0, g0) = site_metrics(sites, &xs);
    let mut iterates = vec![xs.clone()];
    let mut val = vec![v0];
    let mut grad = vec![g0];
    for l in 1..=total_exchanges {
        let w = gossip.next_weights();
        let gradients: Vec<DVector<f64>> = sites
            .par_iter()
            .zip(xs.par_iter())
            .map(|(s, x)| local_init_info(s.as_ref(), x).h)
            .collect();
        mix_in_place(&mut xs, &w)?;
        let a = steps.step(l);
        for (x, gr) in xs.iter_mut().zip(&gradients) {
            *x = project_unchecked(&(&*x - gr * a), bounds);
        }
        let (v, g) = site_metrics(sites, &xs);
        iterates.push(xs.clone());
        val.push(v);
        grad.push(g);
    }
    Ok(DiffusionTrajectory {
        iterates,
        val,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gossip::{GossipConfig, Topology};
    use crate::nlls::{centralized_gn_step, FnSite, LinearSite};
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn square_minus_four() -> SharedSite {
        Arc::new(FnSite::new(
            0,
            1,
            1,
            |x| dvector![x[0] * x[0] - 4.0],
            |x| DMatrix::from_element(1, 1, 2.0 * x[0]),
        ))
    }

    #[test]
    fn payload_round_trip_and_length() {
        let info = InfoVector {
            h: dvector![1.0, 2.0],
            hess: DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 4.0, 5.0]),
        };
        let p = info.to_payload();
        assert_eq!(p.len(), 6);
        assert_eq!(InfoVector::from_payload(2, &p).unwrap(), info);
        assert!(InfoVector::from_payload(3, &p).is_err());
    }

    #[test]
    fn init_info_values() {
        let b = dvector![1.0, 2.0];
        let lin = LinearSite::new(0, DMatrix::identity(2, 2), b.clone());
        let x = dvector![3.0, -1.0];
        let info = local_init_info(&lin, &x);
        assert_eq!(info.h, &x - &b);
        assert_eq!(info.hess, DMatrix::identity(2, 2));

        let at_root = local_init_info(&lin, &b);
        assert_eq!(at_root.h, DVector::zeros(2));

        let info = local_init_info(square_minus_four().as_ref(), &dvector![3.0]);
        assert_eq!(info.h[0], 30.0);
        assert_eq!(info.hess[(0, 0)], 36.0);
    }

    #[test]
    fn local_update_cases() {
        let bounds = BoxSet::uniform(2, -10.0, 10.0).unwrap();
        let mut agent = AgentState::new(0, dvector![1.0, 2.0]);
        agent.info.hess = DMatrix::identity(2, 2);
        let next = local_update(&agent, 1.0, &bounds, 0.0).unwrap();
        assert_eq!(next.x, agent.x);

        let target = dvector![0.5, -0.25];
        agent.info.h = &agent.x - &target;
        let next = local_update(&agent, 1.0, &bounds, 0.0).unwrap();
        assert_relative_eq!(next.x, target, epsilon = 1e-15);

        let b1 = BoxSet::uniform(1, 0.0, 10.0).unwrap();
        let mut scalar = AgentState::new(0, dvector![3.0]);
        scalar.info = InfoVector {
            h: dvector![30.0],
            hess: DMatrix::from_element(1, 1, 36.0),
        };
        let next = local_update(&scalar, 1.0, &b1, 0.0).unwrap();
        assert_relative_eq!(next.x[0], 13.0 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(next.last_descent[0], 5.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn singular_update_names_agent() {
        let bounds = BoxSet::uniform(2, -1.0, 1.0).unwrap();
        let agent = AgentState::new(7, dvector![0.0, 0.0]);
        match local_update(&agent, 1.0, &bounds, 0.0) {
            Err(Error::SingularSystem { agent: Some(7), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_information_with_ridge_stays_put() {
        let bounds = BoxSet::uniform(2, -1.0, 1.0).unwrap();
        let agent = AgentState::new(3, dvector![0.25, -0.5]);
        let next = local_update(&agent, 1.0, &bounds, 1e-8).unwrap();
        assert_eq!(next.x, agent.x);
        assert_eq!(next.last_shift, 1e-8);
    }

    fn split_linear() -> (Vec<SharedSite>, BoxSet) {
        let a = DMatrix::from_row_slice(
            6,
            2,
            &[1.0, 0.2, 0.3, 1.0, 2.0, -1.0, 0.5, 0.5, -1.0, 3.0, 0.7, 0.1],
        );
        let b = dvector![1.0, -2.0, 0.5, 0.3, 1.1, -0.4];
        let sites: Vec<SharedSite> = (0..3)
            .map(|i| {
                Arc::new(LinearSite::new(
                    i,
                    a.rows(2 * i, 2).into_owned(),
                    b.rows(2 * i, 2).into_owned(),
                )) as SharedSite
            })
            .collect();
        (sites, BoxSet::uniform(2, -10.0, 10.0).unwrap())
    }

    #[test]
    fn single_agent_matches_centralized() {
        let site = square_minus_four();
        let bounds = BoxSet::uniform(1, 0.0, 10.0).unwrap();
        let mut gossip = GossipProcess::new(GossipConfig::cse(Topology::empty(1), 0.5)).unwrap();
        let cfg = GgnConfig {
            alpha: 0.7,
            max_updates: 6,
            ridge: 0.0,
            ..GgnConfig::default()
        };
        let sites = vec![site];
        let traj = ggn_run(&sites, &bounds, &mut gossip, &cfg, &dvector![3.0]).unwrap();
        let mut x = dvector![3.0];
        for k in 1..traj.iterates.len() {
            x = centralized_gn_step(&sites, &x, 0.7, &bounds).unwrap();
            assert!((traj.iterates[k][0][0] - x[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn perfect_averaging_gives_exact_descent() {
        let (sites, bounds) = split_linear();
        let mut gossip = GossipProcess::new(GossipConfig::cse(Topology::complete(3), 0.5)).unwrap();
        let x0 = dvector![0.0, 0.0];
        // one exchange with beta = 2/3 on K3 is exactly (1/3) 1 1^T
        let mut avg =
            GossipProcess::new(GossipConfig::cse(Topology::complete(3), 2.0 / 3.0)).unwrap();
        let w = avg.next_weights();
        assert_relative_eq!(
            *w.entries(),
            *WeightMatrix::averaging(3).entries(),
            epsilon = 1e-15
        );
        let cfg = GgnConfig {
            alpha: 1.0,
            schedule: ExchangeSchedule::Constant(1),
            max_updates: 2,
            ridge: 0.0,
            diagnostics: true,
            ..GgnConfig::default()
        };
        let traj = ggn_run(&sites, &bounds, &mut avg, &cfg, &x0).unwrap();
        let exact = exact_descent(&sites, &x0).unwrap();
        for i in 0..3 {
            assert_relative_eq!(traj.updates[0].descents[i], exact, epsilon = 1e-12);
        }
        let diag = traj.updates[0].diagnostics.as_ref().unwrap();
        assert!(diag.discrepancy.iter().all(|d| *d <= 1e-12));
        // a linear problem is solved in one exact step
        assert!(crate::nlls::stationarity_residual(&sites, &traj.iterates[1][0]) < 1e-10);

        // with partial mixing the agents disagree after the first step
        let traj = ggn_run(&sites, &bounds, &mut gossip, &cfg, &x0).unwrap();
        assert!(max_pairwise_disagreement(&traj.iterates[1]) > 0.0);
    }

    #[test]
    fn diffusion_zero_step_only_averages() {
        let (sites, bounds) = split_linear();
        let mut gossip = GossipProcess::new(GossipConfig::cse(Topology::complete(3), 0.3)).unwrap();
        let starts = vec![dvector![1.0, 0.0], dvector![0.0, 1.0], dvector![2.0, 2.0]];
        let traj = diffusion_baseline_run(
            &sites,
            &bounds,
            &mut gossip,
            StepSchedule::Constant(0.0),
            60,
            starts,
        )
        .unwrap();
        for x in traj.iterates.last().unwrap() {
            assert_relative_eq!(*x, dvector![1.0, 1.0], epsilon = 1e-12);
        }
    }

    #[test]
    fn diffusion_single_agent_reaches_least_squares() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = dvector![1.0, 2.0, 2.5];
        let sites: Vec<SharedSite> = vec![Arc::new(LinearSite::new(0, a.clone(), b.clone()))];
        let bounds = BoxSet::uniform(2, -10.0, 10.0).unwrap();
        let mut gossip = GossipProcess::new(GossipConfig::cse(Topology::empty(1), 0.5)).unwrap();
        let traj = diffusion_baseline_run(
            &sites,
            &bounds,
            &mut gossip,
            StepSchedule::Constant(0.2),
            400,
            vec![dvector![0.0, 0.0]],
        )
        .unwrap();
        let x_ls = (a.tr_mul(&a)).try_inverse().unwrap() * a.tr_mul(&b);
        assert_relative_eq!(traj.iterates.last().unwrap()[0], x_ls, epsilon = 1e-9);
    }

    #[test]
    fn schedules() {
        assert_eq!(ExchangeSchedule::Constant(3).exchanges(7), 3);
        let inc = ExchangeSchedule::Incrementing { start: 3 };
        assert_eq!(
            (1..=4).map(|k| inc.exchanges(k)).collect::<Vec<_>>(),
            vec![3, 4, 5, 6]
        );
        let ex = ExchangeSchedule::Explicit(vec![1, 2]);
        assert_eq!(ex.exchanges(5), 2);
        assert_relative_eq!(StepSchedule::Diminishing(0.3).step(3), 0.1);
        assert!(GgnConfig {
            schedule: ExchangeSchedule::Constant(0),
            ..GgnConfig::default()
        }
        .validate()
        .is_err());
    }
}
