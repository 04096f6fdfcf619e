//! Power-system state estimation on top of the NLLS abstraction.
//!
//! The unknown vector is `x = [theta_2..theta_N, V_1..V_N]` (slack angle
//! fixed at zero and dropped), so `N_u = 2N - 1`. Measurements are active
//! and reactive bus injections and branch flows in per unit.

pub mod case;
pub mod grid;
pub mod powerflow;
pub mod sites;

pub use case::{ieee30, parse_matpower_case, to_matpower_case, IEEE30_CASE};
pub use grid::{
    all_measurements, line_flows, measurement_jacobian, power_injections, Branch, Bus, BusType,
    Generator, GridModel, Measurement, PowerState,
};
pub use powerflow::{parse_true_state, solve_power_flow, PowerFlowOptions};
pub use sites::{
    build_nlls_sites, default_box, generate_measurements, mse_metrics, partition_sites,
    psse_jacobian, site_topology, site_values, state_box, streaming_snapshots, MeasurementPlan,
    MeasurementSet, MseReport, PartitionKind, PsseSite, SitePlan, THETA_MAX, V_MAX,
};
