//! Newton-Raphson AC power flow, used to manufacture the true state.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::psse::grid::{
    measurement_jacobian, power_injections, BusType, GridModel, Measurement, PowerState,
};

#[derive(Debug, Clone, Copy)]
pub struct PowerFlowOptions {
    /// Multiplies every load and every generator active output.
    pub load_scale: f64,
    /// Infinity-norm mismatch tolerance in per unit.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self {
            load_scale: 1.0,
            tol: 1e-10,
            max_iter: 30,
        }
    }
}

/// Solve the power flow of `grid` from a flat start (generator buses at
/// their voltage set-points). Reactive limits are not enforced.
pub fn solve_power_flow(grid: &GridModel, opts: &PowerFlowOptions) -> Result<PowerState> {
    if !(opts.load_scale >= 0.0) {
        return Err(Error::invalid(format!(
            "load_scale = {} must be >= 0",
            opts.load_scale
        )));
    }
    let n = grid.n_buses();
    let base = grid.base_mva;
    let mut p_spec = DVector::<f64>::zeros(n);
    let mut q_spec = DVector::<f64>::zeros(n);
    let mut state = PowerState::flat(grid);
    let mut kind: Vec<BusType> = grid.buses().iter().map(|b| b.kind).collect();
    for (i, b) in grid.buses().iter().enumerate() {
        p_spec[i] -= opts.load_scale * b.pd / base;
        q_spec[i] -= opts.load_scale * b.qd / base;
    }
    let mut has_gen = vec![false; n];
    for g in grid.generators().iter().filter(|g| g.in_service) {
        p_spec[g.bus] += opts.load_scale * g.pg / base;
        q_spec[g.bus] += g.qg / base;
        state.v[g.bus] = g.vg;
        has_gen[g.bus] = true;
    }
    for i in 0..n {
        if kind[i] == BusType::Pv && !has_gen[i] {
            kind[i] = BusType::Pq;
        }
    }

    // equations: P at non-slack buses, Q at PQ buses;
    // unknowns: theta at non-slack buses, V at PQ buses
    let p_buses: Vec<usize> = (0..n).filter(|&i| kind[i] != BusType::Slack).collect();
    let q_buses: Vec<usize> = (0..n).filter(|&i| kind[i] == BusType::Pq).collect();
    let rows: Vec<Measurement> = p_buses
        .iter()
        .map(|&b| Measurement::InjectionP(b))
        .chain(q_buses.iter().map(|&b| Measurement::InjectionQ(b)))
        .collect();
    let cols: Vec<usize> = p_buses
        .iter()
        .map(|&b| grid.theta_column(b).expect("non-slack"))
        .chain(q_buses.iter().map(|&b| grid.v_column(b)))
        .collect();

    let mut mismatch_norm = f64::INFINITY;
    for _ in 0..=opts.max_iter {
        let inj = power_injections(grid, &state);
        let mismatch = DVector::from_iterator(
            rows.len(),
            p_buses
                .iter()
                .map(|&b| p_spec[b] - inj[b])
                .chain(q_buses.iter().map(|&b| q_spec[b] - inj[n + b])),
        );
        mismatch_norm = mismatch.amax();
        if mismatch_norm < opts.tol {
            return Ok(state);
        }
        let full = measurement_jacobian(grid, &state, &rows);
        let jac = DMatrix::from_fn(rows.len(), cols.len(), |r, c| full[(r, cols[c])]);
        let dx = jac.lu().solve(&mismatch).ok_or(Error::SingularSystem {
            agent: None,
            condition: f64::INFINITY,
        })?;
        for (j, &b) in p_buses.iter().enumerate() {
            state.theta[b] += dx[j];
        }
        for (j, &b) in q_buses.iter().enumerate() {
            state.v[b] += dx[p_buses.len() + j];
        }
    }
    Err(Error::PowerFlowDiverged {
        iterations: opts.max_iter,
        mismatch: mismatch_norm,
    })
}

/// Read a true state from CSV rows `bus,theta,V` (external bus numbers,
/// radians, per unit). A header row is allowed; every bus must appear once.
pub fn parse_true_state(grid: &GridModel, text: &str) -> Result<PowerState> {
    let n = grid.n_buses();
    let mut theta = DVector::from_element(n, f64::NAN);
    let mut v = DVector::from_element(n, f64::NAN);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let line = record.position().map_or(idx + 1, |p| p.line() as usize);
        let err = |m: String| Error::Parse { line, message: m };
        if record.len() != 3 {
            return Err(err(format!(
                "expected 3 fields (bus, theta, V), got {}",
                record.len()
            )));
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(str::parse::<f64>).collect();
        let Ok(vals) = parsed else {
            if idx == 0 {
                continue;
            }
            return Err(err(format!(
                "non-numeric row {:?}",
                record.iter().collect::<Vec<_>>()
            )));
        };
        let number = vals[0] as usize;
        let bus = grid
            .bus_index(number)
            .filter(|_| vals[0].fract() == 0.0)
            .ok_or_else(|| err(format!("unknown bus {}", vals[0])))?;
        if !theta[bus].is_nan() {
            return Err(err(format!("bus {number} listed twice")));
        }
        theta[bus] = vals[1];
        v[bus] = vals[2];
    }
    if let Some(i) = (0..n).find(|&i| theta[i].is_nan()) {
        return Err(Error::Parse {
            line: 0,
            message: format!(
                "bus {} missing from true-state file",
                grid.buses()[i].number
            ),
        });
    }
    if theta[grid.slack()] != 0.0 {
        return Err(Error::invalid("true-state slack angle must be 0"));
    }
    PowerState::new(theta, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psse::case::ieee30;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ieee30_matches_reference_solution() {
        let g = ieee30();
        let s = solve_power_flow(&g, &PowerFlowOptions::default()).unwrap();
        // independent Newton solution of the same case (no Q limits)
        let reference = [
            (1, 1.0, 0.0),
            (2, 1.0, -0.007251681058252319),
            (5, 0.982406196788543, -0.03252984229525809),
            (10, 0.9844042957926608, -0.058903744377223406),
            (30, 0.9678828791877787, -0.053084600815754286),
        ];
        for (bus, vm, va) in reference {
            let i = g.bus_index(bus).unwrap();
            assert_abs_diff_eq!(s.v[i], vm, epsilon = 1e-9);
            assert_abs_diff_eq!(s.theta[i], va, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_load_flat_solution() {
        let g = ieee30();
        let opts = PowerFlowOptions {
            load_scale: 0.0,
            ..Default::default()
        };
        let s = solve_power_flow(&g, &opts).unwrap();
        assert!(s.theta.amax() < 0.05);
    }

    #[test]
    fn true_state_csv() {
        let g =
            crate::psse::case::parse_matpower_case(&crate::psse::case::to_matpower_case(&ieee30()))
                .unwrap();
        let s = solve_power_flow(&g, &PowerFlowOptions::default()).unwrap();
        let mut text = String::from("bus,theta,V\n");
        for (i, b) in g.buses().iter().enumerate() {
            text.push_str(&format!("{},{},{}\n", b.number, s.theta[i], s.v[i]));
        }
        assert_eq!(parse_true_state(&g, &text).unwrap(), s);
        let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(parse_true_state(&g, &truncated).is_err());
    }
}
