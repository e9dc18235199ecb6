//! Simulation and analysis toolkit for a gain-driven microwave cavity
//! coupled to a magnon mode, either directly or through traveling waves in
//! a cable.
//!
//! The crate is organized around the experiment it models:
//!
//! - [`model`]: system rates, traveling-wave link algebra, strong coupling
//!   reports, and cable distance budgets;
//! - [`sync`]: steady synchronized states of the two modes, branch
//!   structure, fold points, and dispersion curves;
//! - [`dynamics`]: time-domain integration of the full nonlinear equations
//!   plus steady-state extraction and linear stability;
//! - [`experiments`]: scenario files, presets, hysteresis sweeps,
//!   transmission sweeps, and spectral maps;
//! - [`fitting`]: dispersion-curve fits with a multi-start simplex search.
//!
//! Unit conventions, everywhere: frequencies and rates are cyclic (MHz),
//! phases radians, times microseconds, lengths meters, and transmission
//! `sigma` is a dimensionless amplitude factor in `[0, 1]`. The `2*pi`
//! angular conversion lives inside the numerical kernels only.
//!
//! Everything numeric is generic over the [`real::Real`] scalar; aliases
//! below pin the common types to `f64`, which the command line tool and the
//! default tolerances assume.

// Validation deliberately writes `!(x > 0)` rather than `x <= 0`: the
// negated form also rejects NaN inputs.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod experiments;
pub mod fitting;
pub mod model;
pub mod real;
pub mod sync;

pub use real::Real;

pub type SystemParams64 = model::SystemParams<f64>;
pub type LinkSettings64 = model::LinkSettings<f64>;
pub type CouplingSet64 = model::CouplingSet<f64>;
pub type CouplingReport64 = model::CouplingReport<f64>;
pub type DistanceBudget64 = model::DistanceBudget<f64>;
pub type SyncSolution64 = sync::SyncSolution<f64>;
pub type FoldPoints64 = sync::FoldPoints<f64>;
pub type GainSettings64 = sync::GainSettings<f64>;
pub type TimeTrace64 = dynamics::TimeTrace<f64>;
pub type SteadyEstimate64 = dynamics::SteadyEstimate<f64>;
pub type IntegrationSpec64 = dynamics::IntegrationSpec<f64>;
pub type Scenario64 = experiments::Scenario<f64>;
pub type SweepTrace64 = experiments::SweepTrace<f64>;
pub type DispersionData64 = fitting::DispersionData<f64>;
pub type FitResult64 = fitting::FitResult<f64>;
