//! Nonlinear least-squares problems split across sites.
//!
//! A problem is a list of [`SiteModel`]s that share one state vector. The
//! global residual is the concatenation of the site residuals, so the
//! Gauss-Newton normal matrix and gradient are plain sums of per-site terms.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub type StateVector = DVector<f64>;

/// Condition-number cap for inverting a Gauss-Newton normal matrix.
pub const NORMAL_COND_CAP: f64 = 1e12;

/// One agent's share of the residual: `g_i(x)` and its Jacobian `G_i(x)`.
pub trait SiteModel: Send + Sync {
    fn site_id(&self) -> usize;

    /// Length of the shared state vector.
    fn state_dim(&self) -> usize;

    /// Number of residual rows `M_i` held by this site.
    fn residual_dim(&self) -> usize;

    fn residual(&self, x: &StateVector) -> DVector<f64>;

    /// `M_i x N_u` Jacobian of [`SiteModel::residual`].
    fn jacobian(&self, x: &StateVector) -> DMatrix<f64>;

    fn residual_and_jacobian(&self, x: &StateVector) -> (DVector<f64>, DMatrix<f64>) {
        (self.residual(x), self.jacobian(x))
    }
}

/// Affine residual `g(x) = A x - b`.
#[derive(Debug, Clone)]
pub struct LinearSite {
    pub id: usize,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearSite {
    pub fn new(id: usize, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        assert_eq!(a.nrows(), b.len(), "A and b row counts differ");
        Self { id, a, b }
    }
}

impl SiteModel for LinearSite {
    fn site_id(&self) -> usize {
        self.id
    }
    fn state_dim(&self) -> usize {
        self.a.ncols()
    }
    fn residual_dim(&self) -> usize {
        self.a.nrows()
    }
    fn residual(&self, x: &StateVector) -> DVector<f64> {
        &self.a * x - &self.b
    }
    fn jacobian(&self, _x: &StateVector) -> DMatrix<f64> {
        self.a.clone()
    }
}

type ResidualFn = dyn Fn(&StateVector) -> DVector<f64> + Send + Sync;
type JacobianFn = dyn Fn(&StateVector) -> DMatrix<f64> + Send + Sync;

/// Site defined by a pair of closures. Handy for small analytic problems.
pub struct FnSite {
    id: usize,
    state_dim: usize,
    residual_dim: usize,
    residual: Box<ResidualFn>,
    jacobian: Box<JacobianFn>,
}

impl FnSite {
    pub fn new(
        id: usize,
        state_dim: usize,
        residual_dim: usize,
        residual: impl Fn(&StateVector) -> DVector<f64> + Send + Sync + 'static,
        jacobian: impl Fn(&StateVector) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            id,
            state_dim,
            residual_dim,
            residual: Box::new(residual),
            jacobian: Box::new(jacobian),
        }
    }
}

impl SiteModel for FnSite {
    fn site_id(&self) -> usize {
        self.id
    }
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn residual_dim(&self) -> usize {
        self.residual_dim
    }
    fn residual(&self, x: &StateVector) -> DVector<f64> {
        (self.residual)(x)
    }
    fn jacobian(&self, x: &StateVector) -> DMatrix<f64> {
        (self.jacobian)(x)
    }
}

impl std::fmt::Debug for FnSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnSite")
            .field("id", &self.id)
            .field("state_dim", &self.state_dim)
            .field("residual_dim", &self.residual_dim)
            .finish()
    }
}

/// Axis-aligned compact box `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::invalid(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(upper.iter()).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::invalid(format!("box bound {i} is not finite")));
            }
            if lo > hi {
                return Err(Error::invalid(format!(
                    "box bound {i}: lower {lo} > upper {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The same interval `[lo, hi]` on every coordinate.
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(dim, lo),
            DVector::from_element(dim, hi),
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn contains(&self, x: &StateVector) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> StateVector {
        DVector::from_iterator(
            self.dim(),
            self.lower.iter().zip(self.upper.iter()).map(|(lo, hi)| {
                if hi > lo {
                    rng.random_range(*lo..=*hi)
                } else {
                    *lo
                }
            }),
        )
    }
}

/// Euclidean projection onto the box (componentwise clamp).
pub fn project(x: &StateVector, bounds: &BoxSet) -> Result<StateVector> {
    if x.len() != bounds.dim() {
        return Err(Error::invalid(format!(
            "state has length {}, box has dimension {}",
            x.len(),
            bounds.dim()
        )));
    }
    Ok(project_unchecked(x, bounds))
}

pub(crate) fn project_unchecked(x: &StateVector, bounds: &BoxSet) -> StateVector {
    x.zip_zip_map(&bounds.lower, &bounds.upper, |v, lo, hi| v.clamp(lo, hi))
}

fn check_sites(sites: &[impl AsRef<dyn SiteModel>], x: &StateVector) -> Result<()> {
    if sites.is_empty() {
        return Err(Error::invalid("no sites"));
    }
    for s in sites {
        let s = s.as_ref();
        if s.state_dim() != x.len() {
            return Err(Error::invalid(format!(
                "site {} expects state length {}, got {}",
                s.site_id(),
                s.state_dim(),
                x.len()
            )));
        }
    }
    Ok(())
}

/// Sum over sites of `G_i^T G_i` and `G_i^T g_i` at a common state.
pub fn normal_terms(
    sites: &[impl AsRef<dyn SiteModel>],
    x: &StateVector,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_sites(sites, x)?;
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut grad = DVector::zeros(n);
    for s in sites {
        let (g, jac) = s.as_ref().residual_and_jacobian(x);
        hess += jac.tr_mul(&jac);
        grad += jac.tr_mul(&g);
    }
    Ok((hess, grad))
}

/// Solve `H d = rhs` for a symmetric positive definite `H` through its
/// eigendecomposition, rejecting systems whose condition number exceeds `cap`.
pub fn solve_normal(hess: &DMatrix<f64>, rhs: &DVector<f64>, cap: f64) -> Result<DVector<f64>> {
    let n = hess.nrows();
    if hess.ncols() != n || rhs.len() != n {
        return Err(Error::invalid("normal system dimensions do not agree"));
    }
    let sym = (hess + hess.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    // the eigensolver can emit NaN pairs on exactly singular input, and
    // min/max silently skip them
    let finite = eig
        .eigenvalues
        .iter()
        .chain(eig.eigenvectors.iter())
        .all(|v| v.is_finite());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !finite || !(min > 0.0) || !(max / min <= cap) {
        let condition = if finite && min > 0.0 {
            max / min
        } else {
            f64::INFINITY
        };
        return Err(Error::SingularSystem {
            agent: None,
            condition,
        });
    }
    let coeffs = eig.eigenvectors.tr_mul(rhs).component_div(&eig.eigenvalues);
    Ok(&eig.eigenvectors * coeffs)
}

/// Exact Gauss-Newton direction `(G^T G)^{-1} G^T g` with all sites summed.
pub fn exact_descent(sites: &[impl AsRef<dyn SiteModel>], x: &StateVector) -> Result<StateVector> {
    let (hess, grad) = normal_terms(sites, x)?;
    solve_normal(&hess, &grad, NORMAL_COND_CAP)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("step size {alpha} outside (0, 1]")))
    }
}

/// One projected undamped Gauss-Newton step `P[x - alpha d]`.
pub fn centralized_gn_step(
    sites: &[impl AsRef<dyn SiteModel>],
    x: &StateVector,
    alpha: f64,
    bounds: &BoxSet,
) -> Result<StateVector> {
    check_alpha(alpha)?;
    let d = exact_descent(sites, x)?;
    project(&(x - d * alpha), bounds)
}

/// `||G^T(x) g(x)||`, zero exactly at first-order stationary points.
pub fn stationarity_residual(sites: &[impl AsRef<dyn SiteModel>], x: &StateVector) -> f64 {
    sites
        .iter()
        .map(|s| {
            let (g, jac) = s.as_ref().residual_and_jacobian(x);
            jac.tr_mul(&g)
        })
        .fold(DVector::zeros(x.len()), |acc, v| acc + v)
        .norm()
}

/// `sum_i ||g_i(x)||^2`.
pub fn objective(sites: &[impl AsRef<dyn SiteModel>], x: &StateVector) -> f64 {
    sites
        .iter()
        .map(|s| s.as_ref().residual(x).norm_squared())
        .sum()
}

#[derive(Debug, Clone)]
pub struct CentralizedSolution {
    pub x: StateVector,
    pub iterations: usize,
    pub stationarity: f64,
    /// Iterates `x^0, x^1, ...` including the start point.
    pub trajectory: Vec<StateVector>,
}

/// Iterate [`centralized_gn_step`] until the stationarity residual drops to
/// `tol`, the step stalls, or `max_iter` steps have been taken.
pub fn solve_centralized(
    sites: &[impl AsRef<dyn SiteModel>],
    x0: &StateVector,
    alpha: f64,
    bounds: &BoxSet,
    tol: f64,
    max_iter: usize,
) -> Result<CentralizedSolution> {
    let mut x = project(x0, bounds)?;
    let mut trajectory = vec![x.clone()];
    let mut stationarity = stationarity_residual(sites, &x);
    let mut iterations = 0;
    while stationarity > tol && iterations < max_iter {
        let next = centralized_gn_step(sites, &x, alpha, bounds)?;
        let step = (&next - &x).norm();
        x = next;
        iterations += 1;
        trajectory.push(x.clone());
        stationarity = stationarity_residual(sites, &x);
        if step == 0.0 {
            break;
        }
    }
    Ok(CentralizedSolution {
        x,
        iterations,
        stationarity,
        trajectory,
    })
}

/// Central-difference Jacobian of one site.
pub fn finite_diff_jacobian(site: &dyn SiteModel, x: &StateVector, h: f64) -> DMatrix<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let m = site.residual_dim();
    let n = x.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.clone();
    for j in 0..n {
        let orig = xp[j];
        xp[j] = orig + h;
        let fp = site.residual(&xp);
        xp[j] = orig - h;
        let fm = site.residual(&xp);
        xp[j] = orig;
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    jac
}

/// Sampled estimates of the regularity constants of a problem over a box.
///
/// `epsilon_max` and `omega` are maxima over the samples and therefore lower
/// bounds on the true suprema; `sigma_min`/`sigma_max` bracket the sampled
/// singular values from the inside.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProblemConstants {
    pub epsilon_max: f64,
    pub epsilon_min: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub omega: f64,
    pub nu_delta: f64,
    pub nu_big_delta: f64,
    /// Set when some sampled Jacobian lost full column rank.
    pub rank_deficient: bool,
    pub n_samples: usize,
}

impl ProblemConstants {
    /// Build from the Jacobian-derived quantities, setting both Lipschitz
    /// constants of the information vector to their lower bounds.
    pub fn from_parts(
        epsilon_max: f64,
        epsilon_min: f64,
        sigma_min: f64,
        sigma_max: f64,
        omega: f64,
    ) -> Self {
        Self {
            epsilon_max,
            epsilon_min,
            sigma_min,
            sigma_max,
            omega,
            nu_delta: omega * (epsilon_max + sigma_max),
            nu_big_delta: 2.0 * sigma_max * omega,
            rank_deficient: sigma_min <= 0.0,
            n_samples: 0,
        }
    }

    /// Record `epsilon_min = ||g(x_star)||` at a reference fixed point.
    pub fn with_reference(
        mut self,
        sites: &[impl AsRef<dyn SiteModel>],
        x_star: &StateVector,
    ) -> Self {
        self.epsilon_min = objective(sites, x_star).sqrt();
        self
    }

    /// The larger of the two information-vector Lipschitz constants.
    pub fn nu(&self) -> f64 {
        self.nu_delta.max(self.nu_big_delta)
    }
}

fn stacked(sites: &[impl AsRef<dyn SiteModel>], x: &StateVector) -> (DVector<f64>, DMatrix<f64>) {
    let m: usize = sites.iter().map(|s| s.as_ref().residual_dim()).sum();
    let mut g = DVector::zeros(m);
    let mut jac = DMatrix::zeros(m, x.len());
    let mut row = 0;
    for s in sites {
        let (gi, ji) = s.as_ref().residual_and_jacobian(x);
        g.rows_mut(row, gi.len()).copy_from(&gi);
        jac.rows_mut(row, ji.nrows()).copy_from(&ji);
        row += gi.len();
    }
    (g, jac)
}

pub(crate) fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}

/// Estimate [`ProblemConstants`] from `n_samples` uniform draws in the box.
///
/// `omega` is the largest Jacobian difference quotient over all sample
/// pairs. `epsilon_min` is left at zero; see [`ProblemConstants::with_reference`].
pub fn estimate_constants(
    sites: &[impl AsRef<dyn SiteModel>],
    bounds: &BoxSet,
    n_samples: usize,
    rng_seed: u64,
) -> Result<ProblemConstants> {
    if n_samples < 2 {
        return Err(Error::invalid(
            "estimate_constants needs at least two samples",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let points: Vec<StateVector> = (0..n_samples)
        .map(|_| bounds.sample_uniform(&mut rng))
        .collect();
    check_sites(sites, &points[0])?;

    let mut epsilon_max: f64 = 0.0;
    let mut sigma_min = f64::INFINITY;
    let mut sigma_max: f64 = 0.0;
    let mut rank_deficient = false;
    let mut jacobians = Vec::with_capacity(n_samples);
    for x in &points {
        let (g, jac) = stacked(sites, x);
        epsilon_max = epsilon_max.max(g.norm());
        let sv = jac.singular_values();
        let (lo, hi) = (sv.min(), sv.max());
        // fewer rows than unknowns, or a numerically zero singular value
        if jac.nrows() < jac.ncols() || lo <= hi * 1e-12 {
            rank_deficient = true;
            sigma_min = 0.0;
        } else {
            sigma_min = sigma_min.min(lo);
        }
        sigma_max = sigma_max.max(hi);
        jacobians.push(jac);
    }
    if rank_deficient {
        log::warn!("sampled Jacobian lost full column rank; sigma_min reported as 0");
    }

    let mut omega: f64 = 0.0;
    for a in 0..n_samples {
        for b in a + 1..n_samples {
            let dist = (&points[a] - &points[b]).norm();
            if dist > 0.0 {
                omega = omega.max(spectral_norm(&(&jacobians[a] - &jacobians[b])) / dist);
            }
        }
    }

    let mut pc = ProblemConstants::from_parts(epsilon_max, 0.0, sigma_min, sigma_max, omega);
    pc.rank_deficient = rank_deficient;
    pc.n_samples = n_samples;
    Ok(pc)
}
