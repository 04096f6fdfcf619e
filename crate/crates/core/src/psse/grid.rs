//! Grid model, per-unit admittances and the AC measurement functions.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::nlls::StateVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusType {
    Pq,
    Pv,
    Slack,
}

impl BusType {
    pub fn code(self) -> u8 {
        match self {
            BusType::Pq => 1,
            BusType::Pv => 2,
            BusType::Slack => 3,
        }
    }

    pub fn from_code(code: f64) -> Result<Self> {
        match code as i64 {
            1 if code == 1.0 => Ok(BusType::Pq),
            2 if code == 2.0 => Ok(BusType::Pv),
            3 if code == 3.0 => Ok(BusType::Slack),
            4 if code == 4.0 => Err(Error::Unsupported("isolated bus (type 4)".into())),
            _ => Err(Error::invalid(format!("unknown bus type {code}"))),
        }
    }
}

/// Bus record in case units (MW, MVAr, degrees).
#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    /// External bus number as written in the case file.
    pub number: usize,
    pub kind: BusType,
    pub pd: f64,
    pub qd: f64,
    pub gs: f64,
    pub bs: f64,
    pub vm: f64,
    pub va: f64,
    pub base_kv: f64,
}

impl Bus {
    pub fn new(number: usize, kind: BusType) -> Self {
        Self {
            number,
            kind,
            pd: 0.0,
            qd: 0.0,
            gs: 0.0,
            bs: 0.0,
            vm: 1.0,
            va: 0.0,
            base_kv: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    /// Internal (0-based) bus index.
    pub bus: usize,
    pub pg: f64,
    pub qg: f64,
    pub vg: f64,
    pub in_service: bool,
}

/// Pi-model branch between internal bus indices `from` and `to`, per unit.
///
/// An infinite reactance models an open series element (zero admittance),
/// leaving only the charging shunts.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance, split evenly between the ends.
    pub b: f64,
    /// Off-nominal tap ratio at the from end; 0 means nominal.
    pub tap: f64,
}

impl Branch {
    pub fn line(from: usize, to: usize, r: f64, x: f64, b: f64) -> Self {
        Self {
            from,
            to,
            r,
            x,
            b,
            tap: 0.0,
        }
    }

    pub fn series_admittance(&self) -> Complex64 {
        if !self.x.is_finite() || !self.r.is_finite() {
            return Complex64::new(0.0, 0.0);
        }
        Complex64::new(1.0, 0.0) / Complex64::new(self.r, self.x)
    }

    pub fn tap_ratio(&self) -> f64 {
        if self.tap == 0.0 {
            1.0
        } else {
            self.tap
        }
    }

    /// Two-port admittances `(Y_ff, Y_ft, Y_tf, Y_tt)`.
    pub fn two_port(&self) -> BranchAdmittance {
        let y = self.series_admittance();
        let half_charging = Complex64::new(0.0, self.b / 2.0);
        let tau = self.tap_ratio();
        BranchAdmittance {
            ff: (y + half_charging) / (tau * tau),
            ft: -y / tau,
            tf: -y / tau,
            tt: y + half_charging,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchAdmittance {
    pub ff: Complex64,
    pub ft: Complex64,
    pub tf: Complex64,
    pub tt: Complex64,
}

/// The PSSE instance: buses, in-service branches and the assembled bus
/// admittance matrix (stored by rows, sparse).
#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    pub base_mva: f64,
    buses: Vec<Bus>,
    generators: Vec<Generator>,
    branches: Vec<Branch>,
    slack: usize,
    admittances: Vec<BranchAdmittance>,
    ybus: Vec<Vec<(usize, Complex64)>>,
}

impl GridModel {
    pub fn new(
        base_mva: f64,
        buses: Vec<Bus>,
        generators: Vec<Generator>,
        branches: Vec<Branch>,
    ) -> Result<Self> {
        let n = buses.len();
        if n < 2 {
            return Err(Error::invalid(format!(
                "a grid needs at least 2 buses, got {n}"
            )));
        }
        if !(base_mva > 0.0) {
            return Err(Error::invalid(format!(
                "baseMVA must be positive, got {base_mva}"
            )));
        }
        let slacks: Vec<usize> = (0..n)
            .filter(|&i| buses[i].kind == BusType::Slack)
            .collect();
        let slack = match slacks.as_slice() {
            [s] => *s,
            [] => return Err(Error::invalid("no slack (type 3) bus")),
            _ => return Err(Error::Unsupported(format!("{} slack buses", slacks.len()))),
        };
        for (k, br) in branches.iter().enumerate() {
            if br.from >= n || br.to >= n {
                return Err(Error::invalid(format!(
                    "branch {k} references a bus outside 0..{n}"
                )));
            }
            if br.from == br.to {
                return Err(Error::invalid(format!(
                    "branch {k} is a self-loop at bus {}",
                    br.from
                )));
            }
        }
        for (k, g) in generators.iter().enumerate() {
            if g.bus >= n {
                return Err(Error::invalid(format!(
                    "generator {k} references a bus outside 0..{n}"
                )));
            }
        }

        let admittances: Vec<BranchAdmittance> = branches.iter().map(Branch::two_port).collect();
        let mut dense = vec![std::collections::BTreeMap::<usize, Complex64>::new(); n];
        for (br, y) in branches.iter().zip(&admittances) {
            *dense[br.from].entry(br.from).or_default() += y.ff;
            *dense[br.from].entry(br.to).or_default() += y.ft;
            *dense[br.to].entry(br.from).or_default() += y.tf;
            *dense[br.to].entry(br.to).or_default() += y.tt;
        }
        for (i, bus) in buses.iter().enumerate() {
            if bus.gs != 0.0 || bus.bs != 0.0 {
                *dense[i].entry(i).or_default() += Complex64::new(bus.gs, bus.bs) / base_mva;
            }
        }
        let ybus = dense
            .into_iter()
            .map(|row| row.into_iter().collect())
            .collect();
        Ok(Self {
            base_mva,
            buses,
            generators,
            branches,
            slack,
            admittances,
            ybus,
        })
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// Unknowns: every angle except the slack's, then every magnitude.
    pub fn n_unknowns(&self) -> usize {
        2 * self.n_buses() - 1
    }

    /// Length of the full measurement vector `[injections; flows]`.
    pub fn n_measurements(&self) -> usize {
        2 * self.n_buses() + 4 * self.n_branches()
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn generators(&self) -> &[Generator] {
        &self.generators
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branch_admittances(&self) -> &[BranchAdmittance] {
        &self.admittances
    }

    /// Nonzero entries of row `n` of the bus admittance matrix.
    pub fn ybus_row(&self, n: usize) -> &[(usize, Complex64)] {
        &self.ybus[n]
    }

    pub fn ybus_dense(&self) -> DMatrix<Complex64> {
        let n = self.n_buses();
        let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        for (i, row) in self.ybus.iter().enumerate() {
            for &(j, v) in row {
                y[(i, j)] = v;
            }
        }
        y
    }

    /// Column of `theta_n` in the unknown vector, `None` for the slack.
    pub fn theta_column(&self, n: usize) -> Option<usize> {
        match n.cmp(&self.slack) {
            std::cmp::Ordering::Less => Some(n),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(n - 1),
        }
    }

    pub fn v_column(&self, n: usize) -> usize {
        self.n_buses() - 1 + n
    }

    /// Index of bus `number` (external numbering).
    pub fn bus_index(&self, number: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.number == number)
    }
}

/// Bus voltage phasors in polar form.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerState {
    pub theta: DVector<f64>,
    pub v: DVector<f64>,
}

impl PowerState {
    pub fn new(theta: DVector<f64>, v: DVector<f64>) -> Result<Self> {
        if theta.len() != v.len() {
            return Err(Error::invalid("theta and V lengths differ"));
        }
        Ok(Self { theta, v })
    }

    /// `V = 1`, `theta = 0` everywhere.
    pub fn flat(grid: &GridModel) -> Self {
        let n = grid.n_buses();
        Self {
            theta: DVector::zeros(n),
            v: DVector::from_element(n, 1.0),
        }
    }

    /// Unpack `x = [theta without slack; V]`; the slack angle is 0.
    pub fn from_x(grid: &GridModel, x: &StateVector) -> Self {
        let n = grid.n_buses();
        debug_assert_eq!(x.len(), grid.n_unknowns());
        let theta = DVector::from_fn(n, |i, _| grid.theta_column(i).map_or(0.0, |c| x[c]));
        let v = x.rows(n - 1, n).into_owned();
        Self { theta, v }
    }

    /// Pack into `x`; the slack angle is dropped.
    pub fn to_x(&self, grid: &GridModel) -> StateVector {
        let n = grid.n_buses();
        let mut x = DVector::zeros(grid.n_unknowns());
        for i in 0..n {
            if let Some(c) = grid.theta_column(i) {
                x[c] = self.theta[i];
            }
            x[grid.v_column(i)] = self.v[i];
        }
        x
    }
}

/// One entry of the full measurement vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measurement {
    InjectionP(usize),
    InjectionQ(usize),
    /// Flow on `branch`; `reverse` means the to-to-from direction.
    FlowP {
        branch: usize,
        reverse: bool,
    },
    FlowQ {
        branch: usize,
        reverse: bool,
    },
}

impl Measurement {
    /// Decode a global index: `[P_1..P_N, Q_1..Q_N]`, then a flow-P block
    /// and a flow-Q block, each listing branches in case order with the
    /// forward direction first.
    pub fn from_index(grid: &GridModel, index: usize) -> Self {
        let n = grid.n_buses();
        let l2 = 2 * grid.n_branches();
        if index < n {
            Measurement::InjectionP(index)
        } else if index < 2 * n {
            Measurement::InjectionQ(index - n)
        } else {
            let f = index - 2 * n;
            let (within, is_p) = if f < l2 { (f, true) } else { (f - l2, false) };
            let branch = within / 2;
            let reverse = within % 2 == 1;
            if is_p {
                Measurement::FlowP { branch, reverse }
            } else {
                Measurement::FlowQ { branch, reverse }
            }
        }
    }

    pub fn index(&self, grid: &GridModel) -> usize {
        let n = grid.n_buses();
        let l2 = 2 * grid.n_branches();
        match *self {
            Measurement::InjectionP(b) => b,
            Measurement::InjectionQ(b) => n + b,
            Measurement::FlowP { branch, reverse } => 2 * n + 2 * branch + reverse as usize,
            Measurement::FlowQ { branch, reverse } => 2 * n + l2 + 2 * branch + reverse as usize,
        }
    }

    /// Buses whose injections or flows this entry depends on.
    pub fn buses(&self, grid: &GridModel) -> (usize, usize) {
        match *self {
            Measurement::InjectionP(b) | Measurement::InjectionQ(b) => (b, b),
            Measurement::FlowP { branch, .. } | Measurement::FlowQ { branch, .. } => {
                let br = &grid.branches[branch];
                (br.from, br.to)
            }
        }
    }
}

/// Active and reactive injection at bus `n`.
fn injection(grid: &GridModel, s: &PowerState, n: usize) -> (f64, f64) {
    let (mut p, mut q) = (0.0, 0.0);
    for &(m, y) in grid.ybus_row(n) {
        let t = s.theta[n] - s.theta[m];
        let (sin, cos) = t.sin_cos();
        let vv = s.v[n] * s.v[m];
        p += vv * (y.re * cos + y.im * sin);
        q += vv * (y.re * sin - y.im * cos);
    }
    (p, q)
}

/// Ends `(near, far)` and the admittances `(Y_near, Y_transfer)` seen from
/// the sending end of a branch flow.
fn flow_terms(
    grid: &GridModel,
    branch: usize,
    reverse: bool,
) -> (usize, usize, Complex64, Complex64) {
    let br = &grid.branches[branch];
    let y = &grid.admittances[branch];
    if reverse {
        (br.to, br.from, y.tt, y.tf)
    } else {
        (br.from, br.to, y.ff, y.ft)
    }
}

fn flow(grid: &GridModel, s: &PowerState, branch: usize, reverse: bool) -> (f64, f64) {
    let (n, m, yself, ytr) = flow_terms(grid, branch, reverse);
    let (sin, cos) = (s.theta[n] - s.theta[m]).sin_cos();
    let vn2 = s.v[n] * s.v[n];
    let vv = s.v[n] * s.v[m];
    let p = vn2 * yself.re + vv * (ytr.re * cos + ytr.im * sin);
    let q = -vn2 * yself.im + vv * (ytr.re * sin - ytr.im * cos);
    (p, q)
}

/// `[P_1..P_N, Q_1..Q_N]` in per unit.
pub fn power_injections(grid: &GridModel, state: &PowerState) -> DVector<f64> {
    let n = grid.n_buses();
    let mut out = DVector::zeros(2 * n);
    for b in 0..n {
        let (p, q) = injection(grid, state, b);
        out[b] = p;
        out[n + b] = q;
    }
    out
}

/// Branch flows: a P block then a Q block of length `2L` each, branches in
/// case order, forward direction before reverse.
pub fn line_flows(grid: &GridModel, state: &PowerState) -> DVector<f64> {
    let l2 = 2 * grid.n_branches();
    let mut out = DVector::zeros(2 * l2);
    for k in 0..grid.n_branches() {
        for reverse in [false, true] {
            let (p, q) = flow(grid, state, k, reverse);
            let j = 2 * k + reverse as usize;
            out[j] = p;
            out[l2 + j] = q;
        }
    }
    out
}

/// Full measurement vector `[injections; flows]`.
pub fn all_measurements(grid: &GridModel, state: &PowerState) -> DVector<f64> {
    let inj = power_injections(grid, state);
    let flows = line_flows(grid, state);
    DVector::from_iterator(
        inj.len() + flows.len(),
        inj.iter().chain(flows.iter()).copied(),
    )
}

pub fn measurement_value(grid: &GridModel, state: &PowerState, m: Measurement) -> f64 {
    match m {
        Measurement::InjectionP(b) => injection(grid, state, b).0,
        Measurement::InjectionQ(b) => injection(grid, state, b).1,
        Measurement::FlowP { branch, reverse } => flow(grid, state, branch, reverse).0,
        Measurement::FlowQ { branch, reverse } => flow(grid, state, branch, reverse).1,
    }
}

/// Partial derivatives of one measurement as `(d/d theta_k, d/d V_k)` pairs
/// per bus `k`, before removing the slack column.
fn measurement_partials(
    grid: &GridModel,
    s: &PowerState,
    m: Measurement,
    mut emit: impl FnMut(usize, f64, f64),
) {
    match m {
        Measurement::InjectionP(n) | Measurement::InjectionQ(n) => {
            let is_p = matches!(m, Measurement::InjectionP(_));
            let (mut d_theta_n, mut d_v_n) = (0.0, 0.0);
            for &(k, y) in grid.ybus_row(n) {
                if k == n {
                    d_v_n += if is_p {
                        2.0 * s.v[n] * y.re
                    } else {
                        -2.0 * s.v[n] * y.im
                    };
                    continue;
                }
                let (sin, cos) = (s.theta[n] - s.theta[k]).sin_cos();
                // a = G cos + B sin, b = G sin - B cos
                let a = y.re * cos + y.im * sin;
                let b = y.re * sin - y.im * cos;
                let vv = s.v[n] * s.v[k];
                if is_p {
                    d_theta_n -= vv * b;
                    d_v_n += s.v[k] * a;
                    emit(k, vv * b, s.v[n] * a);
                } else {
                    d_theta_n += vv * a;
                    d_v_n += s.v[k] * b;
                    emit(k, -vv * a, s.v[n] * b);
                }
            }
            emit(n, d_theta_n, d_v_n);
        }
        Measurement::FlowP { branch, reverse } | Measurement::FlowQ { branch, reverse } => {
            let is_p = matches!(m, Measurement::FlowP { .. });
            let (n, k, yself, ytr) = flow_terms(grid, branch, reverse);
            let (sin, cos) = (s.theta[n] - s.theta[k]).sin_cos();
            let a = ytr.re * cos + ytr.im * sin;
            let b = ytr.re * sin - ytr.im * cos;
            let vv = s.v[n] * s.v[k];
            if is_p {
                emit(n, -vv * b, 2.0 * s.v[n] * yself.re + s.v[k] * a);
                emit(k, vv * b, s.v[n] * a);
            } else {
                emit(n, vv * a, -2.0 * s.v[n] * yself.im + s.v[k] * b);
                emit(k, -vv * a, s.v[n] * b);
            }
        }
    }
}

/// `d f_m / d x` for each listed measurement, one row each
/// (`len x N_u`, slack angle excluded).
pub fn measurement_jacobian(
    grid: &GridModel,
    state: &PowerState,
    measurements: &[Measurement],
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(measurements.len(), grid.n_unknowns());
    for (row, &m) in measurements.iter().enumerate() {
        measurement_partials(grid, state, m, |bus, d_theta, d_v| {
            if let Some(c) = grid.theta_column(bus) {
                jac[(row, c)] += d_theta;
            }
            jac[(row, grid.v_column(bus))] += d_v;
        });
    }
    jac
}
