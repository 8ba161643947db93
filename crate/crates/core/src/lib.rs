//! Parallel domain decomposition solver for entropy-regularized optimal
//! transport on discrete 2D grids.
//!
//! The solver minimizes `eps * KL(pi | K)` over couplings with prescribed
//! marginals, where `K = exp(-c/eps) * (mu (x) nu)`. The X marginal is cut
//! into basic cells grouped by two overlapping composite tilings; alternating
//! sweeps re-solve each composite cell with a log-stabilized Sinkhorn solver
//! while only the per-cell Y-marginals and dual potentials persist between
//! sweeps. A quad-tree hierarchy with an epsilon-scaling schedule provides
//! initialization, and a discrete Helmholtz fit glues the per-cell duals into
//! a global certificate of solution quality.
//!
//! Modules:
//! - [`measures`]: measures, costs, kernels, KL divergence, dual objective
//! - [`partition`]: basic/composite partitions, partition graph, rate bounds
//! - [`sinkhorn`]: stabilized sub-solver with truncated kernels
//! - [`engine`]: alternating cell sweeps, balancing, truncation
//! - [`multiscale`]: image hierarchy, refinement, epsilon schedule
//! - [`dualglue`]: Helmholtz gluing of cell duals, primal-dual certificates
//! - [`worstcase`]: adversarial instances and convergence-rate traces
//! - [`executor`]: deterministic worker pool for cell tasks
//! - [`pipeline`]: end-to-end multiscale solve

pub mod dualglue;
pub mod engine;
pub mod error;
pub mod executor;
pub mod measures;
pub mod multiscale;
pub mod partition;
pub mod pipeline;
pub mod sinkhorn;
pub mod worstcase;

pub use error::{Error, Result};
