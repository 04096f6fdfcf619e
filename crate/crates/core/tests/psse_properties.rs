use std::collections::BTreeSet;
use std::sync::Arc;

use ggn_core::nlls::finite_diff_jacobian;
use ggn_core::psse::{
    all_measurements, build_nlls_sites, ieee30, parse_matpower_case, partition_sites, site_values,
    to_matpower_case, Branch, Bus, BusType, Generator, GridModel, MeasurementSet, PartitionKind,
    PowerState,
};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Complex-power oracle built from raw branch and shunt data.
fn oracle(grid: &GridModel, s: &PowerState) -> DVector<f64> {
    let n = grid.n_buses();
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    let mut ports = Vec::new();
    for br in grid.branches() {
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let tau = if br.tap == 0.0 { 1.0 } else { br.tap };
        let half = Complex64::new(0.0, br.b / 2.0);
        let (yff, yft, ytt) = ((ys + half) / (tau * tau), -ys / tau, ys + half);
        y[(br.from, br.from)] += yff;
        y[(br.to, br.to)] += ytt;
        y[(br.from, br.to)] += yft;
        y[(br.to, br.from)] += yft;
        ports.push((br.from, br.to, yff, yft, ytt));
    }
    for (k, b) in grid.buses().iter().enumerate() {
        y[(k, k)] += Complex64::new(b.gs, b.bs) / grid.base_mva;
    }
    let v = DVector::from_fn(n, |k, _| Complex64::from_polar(s.v[k], s.theta[k]));
    let current = &y * &v;
    let l = ports.len();
    let mut out = DVector::zeros(2 * n + 4 * l);
    for k in 0..n {
        let sk = v[k] * current[k].conj();
        out[k] = sk.re;
        out[n + k] = sk.im;
    }
    for (j, &(f, t, yff, yft, ytt)) in ports.iter().enumerate() {
        let sf = v[f] * (yff * v[f] + yft * v[t]).conj();
        let st = v[t] * (yft * v[f] + ytt * v[t]).conj();
        out[2 * n + 2 * j] = sf.re;
        out[2 * n + 2 * j + 1] = st.re;
        out[2 * n + 2 * l + 2 * j] = sf.im;
        out[2 * n + 2 * l + 2 * j + 1] = st.im;
    }
    out
}

/// Random connected grid with taps, line charging and bus shunts.
fn random_grid(seed: u64) -> GridModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=7);
    let buses: Vec<Bus> = (0..n)
        .map(|k| {
            let mut b = Bus::new(k + 1, if k == 0 { BusType::Slack } else { BusType::Pq });
            b.pd = rng.random_range(0.0..50.0);
            b.qd = rng.random_range(-10.0..20.0);
            if rng.random_bool(0.4) {
                b.gs = rng.random_range(-5.0..5.0);
                b.bs = rng.random_range(-20.0..30.0);
            }
            b
        })
        .collect();
    let mut pairs = BTreeSet::new();
    for k in 1..n {
        pairs.insert((rng.random_range(0..k), k));
    }
    for _ in 0..rng.random_range(0..n) {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let branches = pairs
        .into_iter()
        .map(|(a, b)| {
            let mut br = Branch::line(
                a,
                b,
                rng.random_range(0.001..0.1),
                rng.random_range(0.01..0.5),
                rng.random_range(0.0..0.1),
            );
            if rng.random_bool(0.3) {
                br.tap = rng.random_range(0.9..1.1);
            }
            br
        })
        .collect();
    let gen = Generator {
        bus: 0,
        pg: rng.random_range(0.0..100.0),
        qg: 0.0,
        vg: 1.0,
        in_service: true,
    };
    GridModel::new(100.0, buses, vec![gen], branches).expect("valid random grid")
}

fn random_state(
    grid: &GridModel,
    rng: &mut ChaCha8Rng,
    theta: f64,
    vlo: f64,
    vhi: f64,
) -> PowerState {
    let slack = grid.slack();
    let th = DVector::from_fn(grid.n_buses(), |k, _| {
        if k == slack {
            0.0
        } else {
            rng.random_range(-theta..theta)
        }
    });
    let v = DVector::from_fn(grid.n_buses(), |_, _| rng.random_range(vlo..vhi));
    PowerState::new(th, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn measurements_match_complex_oracle(grid_seed in any::<u64>(), state_seed in any::<u64>(), use_ieee in any::<bool>()) {
        let grid = if use_ieee { ieee30() } else { random_grid(grid_seed) };
        let mut rng = ChaCha8Rng::seed_from_u64(state_seed);
        let s = random_state(&grid, &mut rng, std::f64::consts::FRAC_PI_2, 0.5, 1.5);
        let diff = (all_measurements(&grid, &s) - oracle(&grid, &s)).amax();
        prop_assert!(diff <= 1e-10, "max deviation {diff:e}");
    }

    #[test]
    fn site_jacobians_match_finite_differences(grid_seed in any::<u64>(), state_seed in any::<u64>(), sites in 1usize..4) {
        let grid = Arc::new(random_grid(grid_seed));
        let plan = partition_sites(&grid, sites.min(grid.n_buses()), PartitionKind::Contiguous).unwrap();
        let z = MeasurementSet {
            z: plan.sites.iter().map(|p| DVector::zeros(p.n_measurements())).collect(),
            sigma2: 0.0,
            snapshot: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(state_seed);
        let x = random_state(&grid, &mut rng, 0.6, 0.8, 1.2).to_x(&grid);
        for site in build_nlls_sites(&grid, &plan, &z).unwrap() {
            let jac = site.jacobian(&x);
            if jac.nrows() == 0 {
                continue;
            }
            let fd = finite_diff_jacobian(site.as_ref(), &x, 1e-6);
            let rel = (&jac - &fd).norm() / jac.norm().max(1.0);
            prop_assert!(rel <= 1e-6, "relative error {rel:e}");
        }
    }

    #[test]
    fn sites_partition_the_measurement_vector(grid_seed in any::<u64>(), sites in 1usize..8, per_bus in any::<bool>()) {
        let grid = random_grid(grid_seed);
        let plan = if per_bus {
            partition_sites(&grid, grid.n_buses(), PartitionKind::PerBus).unwrap()
        } else {
            partition_sites(&grid, sites.min(grid.n_buses()), PartitionKind::Contiguous).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(grid_seed ^ 0xabc);
        let s = random_state(&grid, &mut rng, 0.5, 0.9, 1.1);
        let full = all_measurements(&grid, &s);
        let values = site_values(&grid, &s, &plan);
        let mut seen: Vec<usize> = Vec::new();
        for (site, vals) in plan.sites.iter().zip(&values) {
            let idx = site.global_indices(&grid);
            prop_assert_eq!(idx.len(), vals.len());
            for (i, v) in idx.iter().zip(vals.iter()) {
                prop_assert_eq!(full[*i], *v);
            }
            seen.extend(idx);
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..full.len()).collect::<Vec<_>>());
    }

    #[test]
    fn canonical_form_round_trips(grid_seed in any::<u64>()) {
        let grid = random_grid(grid_seed);
        let text = to_matpower_case(&grid);
        let parsed = parse_matpower_case(&text).unwrap();
        prop_assert_eq!(&parsed, &grid);
        prop_assert_eq!(to_matpower_case(&parsed), text);
    }
}

#[test]
fn ieee30_round_trips() {
    let grid = ieee30();
    assert_eq!(parse_matpower_case(&to_matpower_case(&grid)).unwrap(), grid);
}

#[test]
fn residual_sign_convention() {
    let grid = Arc::new(ieee30());
    let plan = partition_sites(&grid, 3, PartitionKind::Contiguous).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = random_state(&grid, &mut rng, 0.3, 0.95, 1.05);
    let z = MeasurementSet {
        z: site_values(&grid, &s, &plan)
            .into_iter()
            .map(|v| v.add_scalar(0.5))
            .collect(),
        sigma2: 0.0,
        snapshot: 0,
    };
    for site in build_nlls_sites(&grid, &plan, &z).unwrap() {
        let r = site.residual(&s.to_x(&grid));
        assert!(r.iter().all(|v| (v - 0.5).abs() < 1e-12));
    }
}
