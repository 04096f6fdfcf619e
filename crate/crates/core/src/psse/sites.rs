//! Multi-site measurement plans, noisy measurement sets and the NLLS sites
//! they induce.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ggn::SharedSite;
use crate::gossip::Topology;
use crate::nlls::{BoxSet, SiteModel, StateVector};
use crate::psse::grid::{
    measurement_jacobian, measurement_value, GridModel, Measurement, PowerState,
};

/// Default angle bound (radians).
pub const THETA_MAX: f64 = std::f64::consts::FRAC_PI_2;
/// Default magnitude bound (per unit).
pub const V_MAX: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    /// Contiguous runs of bus indices, as even as possible.
    Contiguous,
    /// One bus per site; requires `I = N`.
    PerBus,
}

/// Selection of measurements held by one site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SitePlan {
    pub buses: Vec<usize>,
    /// Indices into the injection vector (length `2N`).
    pub injections: Vec<usize>,
    /// Indices into the flow vector (length `4L`).
    pub flows: Vec<usize>,
}

impl SitePlan {
    pub fn n_measurements(&self) -> usize {
        self.injections.len() + self.flows.len()
    }

    /// Selected entries as global measurement indices, injections first.
    pub fn global_indices(&self, grid: &GridModel) -> Vec<usize> {
        let offset = 2 * grid.n_buses();
        self.injections
            .iter()
            .copied()
            .chain(self.flows.iter().map(|f| f + offset))
            .collect()
    }

    pub fn measurements(&self, grid: &GridModel) -> Vec<Measurement> {
        self.global_indices(grid)
            .into_iter()
            .map(|i| Measurement::from_index(grid, i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasurementPlan {
    pub sites: Vec<SitePlan>,
}

impl MeasurementPlan {
    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn total_measurements(&self) -> usize {
        self.sites.iter().map(SitePlan::n_measurements).sum()
    }

    /// Site owning each bus.
    pub fn site_of_bus(&self, n_buses: usize) -> Vec<usize> {
        let mut owner = vec![usize::MAX; n_buses];
        for (i, s) in self.sites.iter().enumerate() {
            for &b in &s.buses {
                owner[b] = i;
            }
        }
        owner
    }
}

/// Split the buses into `n_sites` groups. Each site measures its own buses'
/// injections and the flows (both directions, P and Q) on every line with
/// an endpoint in the site; a line between two sites goes to the lower one.
pub fn partition_sites(
    grid: &GridModel,
    n_sites: usize,
    kind: PartitionKind,
) -> Result<MeasurementPlan> {
    let n = grid.n_buses();
    if n_sites == 0 || n_sites > n {
        return Err(Error::invalid(format!(
            "number of sites {n_sites} outside 1..={n}"
        )));
    }
    if kind == PartitionKind::PerBus && n_sites != n {
        return Err(Error::invalid(format!(
            "per-bus partition needs {n} sites, got {n_sites}"
        )));
    }
    let (size, extra) = (n / n_sites, n % n_sites);
    let mut owner = Vec::with_capacity(n);
    for site in 0..n_sites {
        let count = size + usize::from(site < extra);
        owner.extend(std::iter::repeat_n(site, count));
    }
    let mut sites: Vec<SitePlan> = (0..n_sites)
        .map(|_| SitePlan {
            buses: Vec::new(),
            injections: Vec::new(),
            flows: Vec::new(),
        })
        .collect();
    for (b, &s) in owner.iter().enumerate() {
        sites[s].buses.push(b);
    }
    for s in sites.iter_mut() {
        s.injections = s
            .buses
            .iter()
            .copied()
            .chain(s.buses.iter().map(|b| b + n))
            .collect();
    }
    let l2 = 2 * grid.n_branches();
    for (k, br) in grid.branches().iter().enumerate() {
        let s = owner[br.from].min(owner[br.to]);
        sites[s]
            .flows
            .extend([2 * k, 2 * k + 1, l2 + 2 * k, l2 + 2 * k + 1]);
    }
    for s in sites.iter_mut() {
        s.flows.sort_unstable();
    }
    Ok(MeasurementPlan { sites })
}

/// Communication graph between sites: two sites are neighbours when a
/// branch joins their bus sets.
pub fn site_topology(grid: &GridModel, plan: &MeasurementPlan) -> Result<Topology> {
    let owner = plan.site_of_bus(grid.n_buses());
    let edges = grid
        .branches()
        .iter()
        .map(|br| (owner[br.from], owner[br.to]))
        .filter(|(a, b)| a != b);
    let mut unique: Vec<(usize, usize)> = edges.map(|(a, b)| (a.min(b), a.max(b))).collect();
    unique.sort_unstable();
    unique.dedup();
    Topology::new(plan.n_sites(), unique)
}

/// Per-site measurement vectors for one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub z: Vec<DVector<f64>>,
    pub sigma2: f64,
    pub snapshot: usize,
}

/// Noise-free site measurements `f_i(x)`.
pub fn site_values(
    grid: &GridModel,
    state: &PowerState,
    plan: &MeasurementPlan,
) -> Vec<DVector<f64>> {
    plan.sites
        .iter()
        .map(|s| {
            let ms = s.measurements(grid);
            DVector::from_iterator(
                ms.len(),
                ms.iter().map(|&m| measurement_value(grid, state, m)),
            )
        })
        .collect()
}

fn noisy_snapshot(
    exact: &[DVector<f64>],
    sigma2: f64,
    snapshot: usize,
    rng: &mut ChaCha8Rng,
) -> MeasurementSet {
    let sd = sigma2.sqrt();
    let z = exact
        .iter()
        .map(|f| {
            f.map(|v| {
                let e: f64 = StandardNormal.sample(rng);
                v + sd * e
            })
        })
        .collect();
    MeasurementSet {
        z,
        sigma2,
        snapshot,
    }
}

/// `z_i = f_i(x_true) + e_i`, `e ~ N(0, sigma2 I)`, deterministic in `seed`.
pub fn generate_measurements(
    grid: &GridModel,
    true_state: &PowerState,
    plan: &MeasurementPlan,
    sigma2: f64,
    seed: u64,
) -> Result<MeasurementSet> {
    Ok(streaming_snapshots(grid, true_state, plan, sigma2, 1, seed)?.remove(0))
}

/// `count` snapshots of the same true state with independent noise. The
/// first snapshot equals [`generate_measurements`] with the same seed.
pub fn streaming_snapshots(
    grid: &GridModel,
    true_state: &PowerState,
    plan: &MeasurementPlan,
    sigma2: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<MeasurementSet>> {
    if !(sigma2 >= 0.0) {
        return Err(Error::invalid(format!("sigma2 = {sigma2} must be >= 0")));
    }
    if count == 0 {
        return Err(Error::invalid("at least one snapshot is required"));
    }
    let exact = site_values(grid, true_state, plan);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|t| noisy_snapshot(&exact, sigma2, t, &mut rng))
        .collect())
}

/// `d f_i / d x` for site `site_id` (rows in plan order).
pub fn psse_jacobian(
    grid: &GridModel,
    state: &PowerState,
    plan: &MeasurementPlan,
    site_id: usize,
) -> DMatrix<f64> {
    measurement_jacobian(grid, state, &plan.sites[site_id].measurements(grid))
}

/// Residual `z_i - f_i(x)` with Jacobian `-d f_i / d x`.
#[derive(Debug, Clone)]
pub struct PsseSite {
    id: usize,
    grid: Arc<GridModel>,
    measurements: Vec<Measurement>,
    z: DVector<f64>,
}

impl PsseSite {
    pub fn new(id: usize, grid: Arc<GridModel>, plan: &SitePlan, z: DVector<f64>) -> Result<Self> {
        let measurements = plan.measurements(&grid);
        if measurements.len() != z.len() {
            return Err(Error::invalid(format!(
                "site {id}: {} measurements selected but z has {} entries",
                measurements.len(),
                z.len()
            )));
        }
        Ok(Self {
            id,
            grid,
            measurements,
            z,
        })
    }

    pub fn measurements(&self) -> &[Measurement] {
        &self.measurements
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }
}

impl SiteModel for PsseSite {
    fn site_id(&self) -> usize {
        self.id
    }

    fn state_dim(&self) -> usize {
        self.grid.n_unknowns()
    }

    fn residual_dim(&self) -> usize {
        self.measurements.len()
    }

    fn residual(&self, x: &StateVector) -> DVector<f64> {
        let s = PowerState::from_x(&self.grid, x);
        DVector::from_iterator(
            self.z.len(),
            self.measurements
                .iter()
                .zip(self.z.iter())
                .map(|(&m, z)| z - measurement_value(&self.grid, &s, m)),
        )
    }

    fn jacobian(&self, x: &StateVector) -> DMatrix<f64> {
        let s = PowerState::from_x(&self.grid, x);
        -measurement_jacobian(&self.grid, &s, &self.measurements)
    }
}

/// One [`PsseSite`] per plan entry.
pub fn build_nlls_sites(
    grid: &Arc<GridModel>,
    plan: &MeasurementPlan,
    measurements: &MeasurementSet,
) -> Result<Vec<SharedSite>> {
    if plan.n_sites() != measurements.z.len() {
        return Err(Error::invalid(format!(
            "plan has {} sites but the measurement set has {}",
            plan.n_sites(),
            measurements.z.len()
        )));
    }
    plan.sites
        .iter()
        .zip(&measurements.z)
        .enumerate()
        .map(|(i, (sp, z))| {
            Ok(Arc::new(PsseSite::new(i, grid.clone(), sp, z.clone())?) as SharedSite)
        })
        .collect()
}

/// Box `|theta| <= theta_max`, `0 <= V <= v_max` over the unknowns.
pub fn state_box(grid: &GridModel, theta_max: f64, v_max: f64) -> Result<BoxSet> {
    let n = grid.n_buses();
    let nt = n - 1;
    let lower = DVector::from_fn(
        grid.n_unknowns(),
        |i, _| if i < nt { -theta_max } else { 0.0 },
    );
    let upper = DVector::from_fn(
        grid.n_unknowns(),
        |i, _| if i < nt { theta_max } else { v_max },
    );
    BoxSet::new(lower, upper)
}

pub fn default_box(grid: &GridModel) -> BoxSet {
    state_box(grid, THETA_MAX, V_MAX).expect("default bounds are valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseReport {
    pub mse_v: Vec<f64>,
    pub mse_theta: Vec<f64>,
    pub global_v: f64,
    pub global_theta: f64,
}

/// Per-agent mean squared magnitude and angle errors over all `N` buses
/// (the slack angle contributes 0), and their means over agents.
pub fn mse_metrics(grid: &GridModel, estimates: &[StateVector], truth: &PowerState) -> MseReport {
    let n = grid.n_buses() as f64;
    let (mut mse_v, mut mse_theta) = (Vec::new(), Vec::new());
    for x in estimates {
        let s = PowerState::from_x(grid, x);
        mse_v.push((&s.v - &truth.v).norm_squared() / n);
        mse_theta.push((&s.theta - &truth.theta).norm_squared() / n);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    MseReport {
        global_v: mean(&mse_v),
        global_theta: mean(&mse_theta),
        mse_v,
        mse_theta,
    }
}
