//! Gossip exchange: mixing matrices, protocols and consensus-rate checks.
//!
//! Agents are indexed from zero. A [`WeightMatrix`] is always symmetric,
//! nonnegative and doubly stochastic, so one exchange preserves the network
//! average of whatever payload is mixed.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Tolerance for the symmetric / doubly stochastic checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Undirected communication graph over `n_agents` agents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n_agents: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Topology {
    pub fn new(n_agents: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::invalid(format!("self-loop on agent {a}")));
            }
            if a >= n_agents || b >= n_agents {
                return Err(Error::invalid(format!(
                    "edge ({a}, {b}) outside {n_agents} agents"
                )));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self {
            n_agents,
            edges: set,
        })
    }

    pub fn empty(n_agents: usize) -> Self {
        Self {
            n_agents,
            edges: BTreeSet::new(),
        }
    }

    pub fn complete(n_agents: usize) -> Self {
        let edges = (0..n_agents)
            .flat_map(|a| (a + 1..n_agents).map(move |b| (a, b)))
            .collect();
        Self { n_agents, edges }
    }

    pub fn path(n_agents: usize) -> Self {
        let edges = (1..n_agents).map(|b| (b - 1, b)).collect();
        Self { n_agents, edges }
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_agents, self.n_agents);
        for &(i, j) in &self.edges {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
        a
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_agents];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn neighbors(&self, agent: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(i, j)| {
                if i == agent {
                    Some(j)
                } else if j == agent {
                    Some(i)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn union(&self, other: &Topology) -> Result<Topology> {
        if self.n_agents != other.n_agents {
            return Err(Error::invalid("topologies have different agent counts"));
        }
        Ok(Topology {
            n_agents: self.n_agents,
            edges: self.edges.union(&other.edges).copied().collect(),
        })
    }

    pub fn is_connected(&self) -> bool {
        if self.n_agents <= 1 {
            return true;
        }
        let mut adj = vec![Vec::new(); self.n_agents];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; self.n_agents];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == self.n_agents
    }
}

/// One exchange's mixing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    entries: DMatrix<f64>,
    eta: f64,
}

impl WeightMatrix {
    /// Validate `entries` as a symmetric, nonnegative, doubly stochastic
    /// matrix with a positive diagonal.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let n = entries.nrows();
        if entries.ncols() != n || n == 0 {
            return Err(Error::invalid("weight matrix must be square and nonempty"));
        }
        for i in 0..n {
            if entries[(i, i)] <= 0.0 {
                return Err(Error::invalid(format!(
                    "diagonal entry {i} is not positive"
                )));
            }
            let row: f64 = entries.row(i).sum();
            let col: f64 = entries.column(i).sum();
            if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!(
                    "row/column {i} does not sum to one"
                )));
            }
            for j in 0..n {
                let w = entries[(i, j)];
                if w < 0.0 || !w.is_finite() {
                    return Err(Error::invalid(format!(
                        "entry ({i}, {j}) = {w} is negative"
                    )));
                }
                if (w - entries[(j, i)]).abs() > STOCHASTIC_TOL {
                    return Err(Error::invalid(format!("entry ({i}, {j}) breaks symmetry")));
                }
            }
        }
        let eta = entries
            .iter()
            .copied()
            .filter(|w| *w > 0.0)
            .fold(f64::INFINITY, f64::min);
        Ok(Self { entries, eta })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            entries: DMatrix::identity(n, n),
            eta: 1.0,
        }
    }

    /// Perfect averaging `(1/I) 1 1^T`.
    pub fn averaging(n: usize) -> Self {
        Self {
            entries: DMatrix::from_element(n, n, 1.0 / n as f64),
            eta: 1.0 / n as f64,
        }
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn n_agents(&self) -> usize {
        self.entries.nrows()
    }

    /// Smallest nonzero entry.
    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Row and column sums all within [`STOCHASTIC_TOL`] of one, symmetric,
    /// nonnegative.
    pub fn is_doubly_stochastic(&self) -> bool {
        doubly_stochastic(&self.entries, STOCHASTIC_TOL)
    }

    /// Graph of the nonzero off-diagonal entries.
    pub fn topology(&self) -> Topology {
        let n = self.n_agents();
        let edges = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.entries[(i, j)] > 0.0);
        Topology::new(n, edges.collect::<Vec<_>>()).expect("valid indices")
    }

    fn active_rows(&self) -> Vec<usize> {
        (0..self.n_agents())
            .filter(|&i| self.entries[(i, i)] != 1.0)
            .collect()
    }
}

/// Symmetric, nonnegative, rows and columns summing to one within `tol`.
pub fn doubly_stochastic(m: &DMatrix<f64>, tol: f64) -> bool {
    let n = m.nrows();
    if m.ncols() != n {
        return false;
    }
    (0..n).all(|i| {
        (m.row(i).sum() - 1.0).abs() <= tol
            && (m.column(i).sum() - 1.0).abs() <= tol
            && (0..n).all(|j| m[(i, j)] >= 0.0 && (m[(i, j)] - m[(j, i)]).abs() <= tol)
    })
}

/// Laplacian weights `W = I - w L` with `w = beta / max degree`.
///
/// An edgeless topology yields the identity.
pub fn build_cse_weights(topology: &Topology, beta: f64) -> Result<WeightMatrix> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid(format!("beta = {beta} outside (0, 1)")));
    }
    let n = topology.n_agents();
    if topology.n_edges() == 0 {
        if n > 1 {
            log::warn!("CSE topology over {n} agents has no edges; mixing is the identity");
        }
        return Ok(WeightMatrix::identity(n));
    }
    let deg = topology.degrees();
    let max_deg = *deg.iter().max().expect("nonempty") as f64;
    let w = beta / max_deg;
    let mut entries = DMatrix::zeros(n, n);
    for i in 0..n {
        entries[(i, i)] = 1.0 - w * deg[i] as f64;
    }
    for (i, j) in topology.edges() {
        entries[(i, j)] = w;
        entries[(j, i)] = w;
    }
    WeightMatrix::new(entries)
}

/// Pairwise averaging `I - beta (e_i - e_j)(e_i - e_j)^T`.
pub fn pairwise_weights(n: usize, i: usize, j: usize, beta: f64) -> Result<WeightMatrix> {
    if i == j || i >= n || j >= n {
        return Err(Error::invalid(format!(
            "invalid pair ({i}, {j}) for {n} agents"
        )));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid(format!("beta = {beta} outside (0, 1)")));
    }
    let mut entries = DMatrix::identity(n, n);
    entries[(i, i)] = 1.0 - beta;
    entries[(j, j)] = 1.0 - beta;
    entries[(i, j)] = beta;
    entries[(j, i)] = beta;
    Ok(WeightMatrix {
        entries,
        eta: beta.min(1.0 - beta),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Coordinated static exchange.
    Cse,
    /// Uncoordinated random (pairwise) exchange.
    Ure,
}

#[derive(Debug, Clone)]
pub struct GossipConfig {
    pub protocol: Protocol,
    pub topology: Topology,
    pub beta: f64,
    /// Row-stochastic partner-choice matrix for URE. Derived uniformly over
    /// topology neighbors when absent.
    pub ure_pick_probs: Option<DMatrix<f64>>,
    pub link_failure_prob: f64,
    /// Connectivity interval `L`.
    pub comm_interval: usize,
    pub rng_seed: u64,
}

impl GossipConfig {
    pub fn cse(topology: Topology, beta: f64) -> Self {
        Self {
            protocol: Protocol::Cse,
            topology,
            beta,
            ure_pick_probs: None,
            link_failure_prob: 0.0,
            comm_interval: 1,
            rng_seed: 0,
        }
    }

    pub fn ure(topology: Topology, beta: f64, link_failure_prob: f64) -> Self {
        Self {
            protocol: Protocol::Ure,
            topology,
            beta,
            ure_pick_probs: None,
            link_failure_prob,
            comm_interval: 1,
            rng_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn n_agents(&self) -> usize {
        self.topology.n_agents()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::invalid(format!(
                "beta = {} outside (0, 1)",
                self.beta
            )));
        }
        if !(self.link_failure_prob >= 0.0 && self.link_failure_prob < 1.0) {
            return Err(Error::invalid(format!(
                "link failure probability {} outside [0, 1)",
                self.link_failure_prob
            )));
        }
        if self.comm_interval == 0 {
            return Err(Error::invalid("communication interval must be at least 1"));
        }
        if self.protocol == Protocol::Ure {
            let gamma = self.pick_probs();
            let n = self.n_agents();
            if gamma.nrows() != n || gamma.ncols() != n {
                return Err(Error::invalid("partner-choice matrix has wrong shape"));
            }
            for i in 0..n {
                if gamma[(i, i)] != 0.0 {
                    return Err(Error::invalid(format!(
                        "partner-choice row {i} has nonzero diagonal"
                    )));
                }
                if gamma.row(i).iter().any(|p| *p < 0.0) {
                    return Err(Error::invalid(format!(
                        "partner-choice row {i} is negative"
                    )));
                }
                if n > 1 && (gamma.row(i).sum() - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!(
                        "partner-choice row {i} does not sum to one"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Partner-choice matrix; uniform over neighbors unless given explicitly.
    pub fn pick_probs(&self) -> DMatrix<f64> {
        if let Some(g) = &self.ure_pick_probs {
            return g.clone();
        }
        let n = self.n_agents();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            let nb = self.topology.neighbors(i);
            for &j in &nb {
                g[(i, j)] = 1.0 / nb.len() as f64;
            }
        }
        g
    }
}

/// Draw one URE exchange.
///
/// Consumes exactly three draws in this order: the waking agent (uniform),
/// its partner (from row `i` of `gamma`), and the link-failure coin. A failed
/// link, or an agent without neighbors, produces the identity.
pub fn sample_ure_round<R: Rng + ?Sized>(
    config: &GossipConfig,
    gamma: &DMatrix<f64>,
    rng: &mut R,
) -> WeightMatrix {
    let n = config.n_agents();
    let i = rng.random_range(0..n);
    let u: f64 = rng.random();
    let fail: f64 = rng.random();
    let mut acc = 0.0;
    let mut partner = None;
    for j in 0..n {
        acc += gamma[(i, j)];
        if gamma[(i, j)] > 0.0 {
            partner = Some(j);
            if u < acc {
                break;
            }
        }
    }
    match partner {
        Some(j) if fail >= config.link_failure_prob => {
            pairwise_weights(n, i, j, config.beta).expect("validated configuration")
        }
        _ => WeightMatrix::identity(n),
    }
}

/// Analytic `E[W]` for URE: uniform wake-up, partner per `gamma`, links
/// surviving with probability `1 - p`.
pub fn expected_ure_matrix(config: &GossipConfig) -> DMatrix<f64> {
    let n = config.n_agents();
    let gamma = config.pick_probs();
    let keep = 1.0 - config.link_failure_prob;
    let mut expected = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            let p = gamma[(i, j)] * keep / n as f64;
            if p == 0.0 {
                continue;
            }
            let b = config.beta * p;
            expected[(i, i)] -= b;
            expected[(j, j)] -= b;
            expected[(i, j)] += b;
            expected[(j, i)] += b;
        }
    }
    expected
}

/// Stateful source of mixing matrices for one experiment.
#[derive(Debug, Clone)]
pub struct GossipProcess {
    config: GossipConfig,
    gamma: DMatrix<f64>,
    static_cse: WeightMatrix,
    rng: ChaCha8Rng,
}

impl GossipProcess {
    pub fn new(config: GossipConfig) -> Result<Self> {
        config.validate()?;
        let static_cse = match config.protocol {
            Protocol::Cse => build_cse_weights(&config.topology, config.beta)?,
            Protocol::Ure => WeightMatrix::identity(config.n_agents()),
        };
        Ok(Self {
            gamma: config.pick_probs(),
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            static_cse,
            config,
        })
    }

    pub fn config(&self) -> &GossipConfig {
        &self.config
    }

    pub fn next_weights(&mut self) -> WeightMatrix {
        match self.config.protocol {
            Protocol::Ure => sample_ure_round(&self.config, &self.gamma, &mut self.rng),
            Protocol::Cse if self.config.link_failure_prob == 0.0 => self.static_cse.clone(),
            Protocol::Cse => {
                // every edge fails independently, in edge order
                let p = self.config.link_failure_prob;
                let alive: Vec<_> = self
                    .config
                    .topology
                    .edges()
                    .filter(|_| self.rng.random::<f64>() >= p)
                    .collect();
                let topo =
                    Topology::new(self.config.n_agents(), alive).expect("subset of valid edges");
                build_cse_weights(&topo, self.config.beta).expect("validated beta")
            }
        }
    }

    /// Draw the next `count` matrices up front.
    pub fn draw(&mut self, count: usize) -> Vec<WeightMatrix> {
        (0..count).map(|_| self.next_weights()).collect()
    }
}

/// `output_i = sum_j W_ij payload_j`, i.e. `(W kron I) H`.
pub fn gossip_round(
    payloads: &[DVector<f64>],
    weights: &WeightMatrix,
) -> Result<Vec<DVector<f64>>> {
    let mut out = payloads.to_vec();
    mix_in_place(&mut out, weights)?;
    Ok(out)
}

/// In-place form of [`gossip_round`]; rows of `W` equal to the identity row
/// are left untouched.
pub fn mix_in_place(payloads: &mut [DVector<f64>], weights: &WeightMatrix) -> Result<()> {
    let n = weights.n_agents();
    if payloads.len() != n {
        return Err(Error::invalid(format!(
            "{} payloads for a {n}-agent weight matrix",
            payloads.len()
        )));
    }
    let len = payloads.first().map_or(0, |p| p.len());
    if payloads.iter().any(|p| p.len() != len) {
        return Err(Error::invalid("payloads have unequal lengths"));
    }
    let w = weights.entries();
    let active = weights.active_rows();
    let mixed: Vec<DVector<f64>> = active
        .iter()
        .map(|&i| {
            let mut acc = DVector::zeros(len);
            for j in 0..n {
                let wij = w[(i, j)];
                if wij != 0.0 {
                    acc.axpy(wij, &payloads[j], 1.0);
                }
            }
            acc
        })
        .collect();
    for (i, v) in active.into_iter().zip(mixed) {
        payloads[i] = v;
    }
    Ok(())
}

/// Geometric consensus rate `(1 - eta^L0)^(1/L0)` with `L0 = (I-1) L`.
pub fn lambda_eta(eta: f64, n_agents: usize, comm_interval: usize) -> Result<f64> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::invalid(format!("eta = {eta} outside (0, 1)")));
    }
    let l0 = n_agents.saturating_sub(1) * comm_interval;
    if l0 == 0 {
        return Err(Error::invalid("L0 = (I-1) L must be at least 1"));
    }
    let l0 = l0 as f64;
    Ok((1.0 - eta.powf(l0)).powf(1.0 / l0))
}

/// Prefactor `2 (1 + eta^-L0) / (1 - eta^L0)` of the consensus bound.
pub fn consensus_prefactor(eta: f64, n_agents: usize, comm_interval: usize) -> f64 {
    let l0 = (n_agents.saturating_sub(1) * comm_interval) as f64;
    2.0 * (1.0 + eta.powf(-l0)) / (1.0 - eta.powf(l0))
}

/// Smallest nonzero weight over a sequence of matrices.
pub fn observed_eta(weights: &[WeightMatrix]) -> f64 {
    weights
        .iter()
        .map(WeightMatrix::eta)
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone)]
pub struct ConsensusReport {
    /// `max_ij |[prod_{l'<=l} W(l')]_ij - 1/I|` for `l = 0, 1, ...`.
    pub deviations: Vec<f64>,
    /// Bound value for each `l`.
    pub bounds: Vec<f64>,
    /// Largest `deviation / bound`; must not exceed one.
    pub max_ratio: f64,
    /// Final product deviation is strictly below the first one.
    pub contracted: bool,
}

impl ConsensusReport {
    pub fn satisfied(&self) -> bool {
        self.max_ratio <= 1.0 && self.max_ratio.is_finite()
    }
}

/// Check running products of `weights` against the geometric consensus bound.
///
/// `deviations[l]` covers the product of the first `l + 1` matrices, matched
/// with the bound at exponent `l`.
pub fn verify_lemma1_bound(
    weights: &[WeightMatrix],
    eta: f64,
    n_agents: usize,
    comm_interval: usize,
) -> ConsensusReport {
    let target = 1.0 / n_agents as f64;
    let lambda = lambda_eta(eta, n_agents, comm_interval).unwrap_or(f64::NAN);
    let prefactor = consensus_prefactor(eta, n_agents, comm_interval);
    let mut product = DMatrix::<f64>::identity(n_agents, n_agents);
    let mut deviations = Vec::with_capacity(weights.len());
    let mut bounds = Vec::with_capacity(weights.len());
    let mut max_ratio: f64 = 0.0;
    for (l, w) in weights.iter().enumerate() {
        product = w.entries() * product;
        let dev = product
            .iter()
            .map(|v| (v - target).abs())
            .fold(0.0, f64::max);
        let bound = prefactor * lambda.powi(l as i32);
        let ratio = if dev == 0.0 { 0.0 } else { dev / bound };
        // NaN (degenerate eta) counts as a violation
        max_ratio = if ratio.is_nan() {
            f64::INFINITY
        } else {
            max_ratio.max(ratio)
        };
        deviations.push(dev);
        bounds.push(bound);
    }
    let contracted = match (deviations.first(), deviations.last()) {
        (Some(first), Some(last)) => deviations.len() == 1 && *first == 0.0 || last < first,
        _ => false,
    };
    ConsensusReport {
        deviations,
        bounds,
        max_ratio,
        contracted,
    }
}

/// True iff the union graph over every window of `comm_interval` consecutive
/// topologies is connected.
pub fn check_connectivity(window: &[Topology], comm_interval: usize) -> Result<bool> {
    if comm_interval == 0 || window.len() < comm_interval {
        return Err(Error::invalid(format!(
            "window of {} topologies is shorter than L = {comm_interval}",
            window.len()
        )));
    }
    for start in 0..=window.len() - comm_interval {
        let mut union = window[start].clone();
        for t in &window[start + 1..start + comm_interval] {
            union = union.union(t)?;
        }
        if !union.is_connected() {
            return Ok(false);
        }
    }
    Ok(true)
}
