use std::sync::Arc;

use ggn_core::analysis::{
    assumption4_plan, disagreement_bound, equilibrium_radii, gossip_error_scale,
    perturbation_bound, CertificateInputs, ConvergenceCertificate, ScheduleKind,
};
use ggn_core::ggn::{ggn_run, max_pairwise_disagreement, GgnConfig};
use ggn_core::gossip::{lambda_eta, GossipConfig, GossipProcess};
use ggn_core::nlls::{estimate_constants, BoxSet, ProblemConstants};
use ggn_core::psse::{
    build_nlls_sites, default_box, generate_measurements, ieee30, partition_sites, site_topology,
    solve_power_flow, PartitionKind, PowerFlowOptions, PowerState,
};
use nalgebra::DVector;
use proptest::prelude::*;

fn constants() -> impl Strategy<Value = ProblemConstants> {
    (
        0.1f64..10.0,
        0.0f64..1.0,
        0.1f64..2.0,
        1.0f64..20.0,
        0.01f64..5.0,
    )
        .prop_map(|(eps_max, eps_min, s_min, ratio, omega)| {
            ProblemConstants::from_parts(eps_max, eps_min.min(eps_max), s_min, s_min * ratio, omega)
        })
}

proptest! {
    #[test]
    fn certificates_are_deterministic(
        pc in constants(), alpha in 0.05f64..1.0, n in 1usize..8, eta in 0.05f64..0.5, incrementing in any::<bool>()
    ) {
        let inputs = || CertificateInputs {
            constants: pc.clone(),
            alpha,
            n_agents: n,
            n_unknowns: 5,
            eta,
            comm_interval: 1,
            xi: 0.25,
            schedule: if incrementing { ScheduleKind::Incrementing } else { ScheduleKind::Constant },
        };
        let a = ConvergenceCertificate::compute(inputs()).unwrap();
        let b = ConvergenceCertificate::compute(inputs()).unwrap();
        prop_assert_eq!(a.to_key_values(), b.to_key_values());
        prop_assert_eq!(a.kappa.to_bits(), b.kappa.to_bits());
        prop_assert_eq!(a.t2.to_bits(), b.t2.to_bits());
    }

    #[test]
    fn kappa_strictly_decreases_with_more_exchanges(
        c1 in 0.1f64..1e3, d in 0.1f64..1e6, lambda in 0.05f64..0.99, ell in 1u64..200
    ) {
        prop_assert!(perturbation_bound(c1, d, lambda, ell + 1) < perturbation_bound(c1, d, lambda, ell));
    }

    #[test]
    fn radii_move_apart_as_kappa_shrinks(
        t1 in 0.01f64..10.0, t2 in 0.0f64..0.9, alpha in 0.1f64..1.0, u in 0.0f64..1.0, v in 0.0f64..1.0
    ) {
        let k_max = (1.0 - t2).powi(2) / (4.0 * alpha * t1);
        let (lo, hi) = (u.min(v) * k_max, u.max(v) * k_max);
        prop_assume!(hi > lo);
        let small = equilibrium_radii(t1, t2, alpha, lo);
        let large = equilibrium_radii(t1, t2, alpha, hi);
        let (rmin_s, rmax_s) = (small.rho_min().unwrap(), small.rho_max().unwrap());
        let (rmin_l, rmax_l) = (large.rho_min().unwrap(), large.rho_max().unwrap());
        prop_assert!(rmin_l >= rmin_s);
        prop_assert!(rmax_l <= rmax_s);
        prop_assert!(rmin_s <= rmax_s);
    }
}

#[test]
fn observed_gossip_error_and_disagreement_respect_their_bounds() {
    let grid = Arc::new(ieee30());
    let truth = solve_power_flow(&grid, &PowerFlowOptions::default()).unwrap();
    let plan = partition_sites(&grid, 3, PartitionKind::Contiguous).unwrap();
    let ms = generate_measurements(&grid, &truth, &plan, 1e-6, 23).unwrap();
    let sites = build_nlls_sites(&grid, &plan, &ms).unwrap();
    let nt = grid.n_buses() - 1;
    let nu = grid.n_unknowns();
    let lower = DVector::from_fn(nu, |i, _| if i < nt { -0.5 } else { 0.8 });
    let upper = DVector::from_fn(nu, |i, _| if i < nt { 0.5 } else { 1.2 });
    let pc = estimate_constants(&sites, &BoxSet::new(lower, upper).unwrap(), 24, 5).unwrap();

    let topo = site_topology(&grid, &plan).unwrap();
    let mut gp = GossipProcess::new(GossipConfig::cse(topo, 0.3)).unwrap();
    let cfg = GgnConfig {
        diagnostics: true,
        ..Default::default()
    };
    let tr = ggn_run(
        &sites,
        &default_box(&grid),
        &mut gp,
        &cfg,
        &PowerState::flat(&grid).to_x(&grid),
    )
    .unwrap();

    let eta = tr.updates[0].diagnostics.as_ref().unwrap().eta;
    let lambda = lambda_eta(eta, 3, 1).unwrap();
    let c = gossip_error_scale(&pc, 3, nu, eta, 1).unwrap();
    let plan4 = assumption4_plan(&pc, 3, c, lambda, 0.25, ScheduleKind::Constant).unwrap();
    let mut exchanges = Vec::new();
    for (k, u) in tr.updates.iter().enumerate() {
        let d = u.diagnostics.as_ref().unwrap();
        let bound = c * lambda.powf(u.exchanges as f64);
        assert!(d.gossip_error_h <= bound && d.gossip_error_hess <= bound);
        exchanges.push(u.exchanges);
        let observed = max_pairwise_disagreement(&tr.iterates[k + 1]);
        assert!(observed <= disagreement_bound(c, plan4.c1, plan4.c2, lambda, &exchanges));
    }
}
