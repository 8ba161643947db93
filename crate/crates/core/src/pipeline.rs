//! End-to-end multiscale solve: coarsen the marginals, walk the epsilon
//! schedule with alternating sweeps, refine marginals and glued potentials at
//! layer transitions, and certify the final iterate.

use crate::dualglue;
use crate::engine::{self, CellState, ProblemData, SweepConfig};
use crate::error::{Error, Result};
use crate::measures::DiscreteMeasure;
use crate::multiscale::{self, Layer, MultiscaleHierarchy, Schedule};
use crate::partition::Label;
use crate::sinkhorn::SinkhornConfig;
use std::time::Instant;

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Basic cell edge length in pixels.
    pub cell_size: usize,
    /// Global L1 marginal error budget for the sub-solves.
    pub err_tol: f64,
    /// Sparsity floor for stored basic marginals.
    pub marginal_floor: f64,
    /// Kernel truncation threshold.
    pub theta: f64,
    pub workers: usize,
    pub safeguard_attempts: usize,
    pub max_iterations: usize,
    pub check_every: usize,
    pub absorption_bound: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            cell_size: 4,
            err_tol: 1e-4,
            marginal_floor: 1e-15,
            theta: 1e-10,
            workers: 1,
            safeguard_attempts: 3,
            max_iterations: 10_000,
            check_every: 10,
            absorption_bound: 20.0,
        }
    }
}

impl SolveOptions {
    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            err_tol: self.err_tol,
            marginal_floor: self.marginal_floor,
            sinkhorn: SinkhornConfig {
                truncation_theta: self.theta,
                absorption_bound: self.absorption_bound,
                check_every: self.check_every,
                max_iterations: self.max_iterations,
                stop: crate::sinkhorn::StopRule::L1,
            },
            workers: self.workers,
            safeguard_attempts: self.safeguard_attempts,
            capture_couplings: false,
        }
    }
}

/// Accumulated statistics of one schedule stage.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub level: usize,
    pub epsilon: f64,
    pub sweeps: usize,
    pub total_iterations: usize,
    pub x_error_last_sweep: f64,
    pub mass_balanced: f64,
    pub safeguard_invocations: usize,
    pub max_entries: usize,
    pub sinkhorn_seconds: f64,
    pub balance_seconds: f64,
    pub truncate_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub certificate: dualglue::Certificate,
    pub stages: Vec<StageReport>,
    pub refine_seconds: f64,
    pub certificate_seconds: f64,
    pub total_seconds: f64,
    /// Largest total entry count of the stored marginals at any sweep end.
    pub max_entries: usize,
    /// Entry count after the final sweep.
    pub final_entries: usize,
    /// `final_entries` per X pixel of the finest layer.
    pub entries_per_pixel: f64,
    pub sweeps_executed: usize,
    pub final_epsilon: f64,
    pub final_state: CellState,
    pub hierarchy: MultiscaleHierarchy,
}

fn layer_data<'a>(layer: &'a Layer, cost: &'a crate::measures::CostOracle) -> ProblemData<'a> {
    ProblemData {
        mu: &layer.mu,
        nu: &layer.nu,
        cost,
        basic: &layer.basic,
        comp_a: &layer.comp_a,
        comp_b: &layer.comp_b,
    }
}

fn layer_cost(layer: &Layer) -> crate::measures::CostOracle {
    crate::measures::CostOracle::SqEuclidean {
        x: layer.geometry.clone(),
        y: layer.geometry.clone(),
    }
}

/// Glue the stored A-potentials of a layer into a global per-pixel potential.
fn glued_layer_potential(state: &CellState, data: &ProblemData, epsilon: f64) -> Result<Vec<f64>> {
    let a_potentials: Vec<Vec<f64>> = state
        .potentials_a
        .iter()
        .enumerate()
        .map(|(j, p)| {
            p.clone().ok_or_else(|| {
                Error::Inconsistent(format!("A-cell {j} has no stored potential before refinement"))
            })
        })
        .collect::<Result<_>>()?;
    let graph = dualglue::build_glue_graph(&a_potentials, &state.potentials_b, data, epsilon, 0)?;
    let fit = dualglue::helmholtz_fit(&graph)?;
    let mut global = vec![0.0; data.mu.len()];
    for (j, pot) in a_potentials.iter().enumerate() {
        let shift = epsilon * fit.potential[j];
        let mut cursor = 0usize;
        for &i in data.comp_a.group(j) {
            for &x in data.basic.cell(i) {
                global[x as usize] = pot[cursor] + shift;
                cursor += 1;
            }
        }
    }
    Ok(global)
}

/// Solve the transport problem between two images on a `2^n` grid.
///
/// The inputs are normalized and floored here, so every pixel ends up with
/// strictly positive mass and both totals are exactly comparable.
pub fn solve_pair(
    mu_raw: &DiscreteMeasure,
    nu_raw: &DiscreteMeasure,
    side: usize,
    opts: &SolveOptions,
) -> Result<SolveOutcome> {
    let start = Instant::now();
    let mu = mu_raw.with_mass_floor(1e-9)?;
    let nu = nu_raw.with_mass_floor(1e-9)?;
    let hierarchy = multiscale::build_hierarchy(&mu, &nu, side, opts.cell_size)?;
    let n = hierarchy.finest_level;
    let schedule: Schedule = multiscale::build_schedule(n)?;
    let cfg = opts.sweep_config();

    let mut layer_index = 0usize;
    let coarsest = &hierarchy.layers[0];
    let mut state = engine::initialize_product_state(
        &coarsest.basic,
        &coarsest.nu,
        coarsest.comp_a.group_count(),
        coarsest.comp_b.group_count(),
        schedule.stages[0].epsilon,
    );

    let mut stage_reports = Vec::with_capacity(schedule.stages.len());
    let mut refine_seconds = 0.0;
    let mut max_entries = 0usize;
    let mut sweeps_executed = 0usize;

    for stage in &schedule.stages {
        // Layer transition: glue + interpolate potentials, refine marginals.
        while hierarchy.layers[layer_index].level < stage.level {
            let t0 = Instant::now();
            let coarse = &hierarchy.layers[layer_index];
            let cost = layer_cost(coarse);
            let data = layer_data(coarse, &cost);
            let glued = glued_layer_potential(&state, &data, state.epsilon)?;
            let fine_potential = multiscale::refine_potentials(&glued, coarse.geometry.side());

            let mut fine_state = multiscale::refine_marginals(&state, &hierarchy, layer_index)?;
            // The sparsity floor applies to stored marginals; refinement can
            // produce entries below it.
            for m in &mut fine_state.marginals {
                *m = engine::truncate_marginal(m, opts.marginal_floor);
            }
            let fine = &hierarchy.layers[layer_index + 1];
            fine_state.potentials_a =
                multiscale::restrict_potential(&fine_potential, &fine.basic, &fine.comp_a);
            fine_state.potentials_b =
                multiscale::restrict_potential(&fine_potential, &fine.basic, &fine.comp_b);
            fine_state.epsilon = state.epsilon;
            state = fine_state;
            layer_index += 1;
            refine_seconds += t0.elapsed().as_secs_f64();
        }

        state.epsilon = stage.epsilon;
        let layer = &hierarchy.layers[layer_index];
        let cost = layer_cost(layer);
        let data = layer_data(layer, &cost);

        let mut report = StageReport {
            level: stage.level,
            epsilon: stage.epsilon,
            sweeps: stage.sweeps,
            total_iterations: 0,
            x_error_last_sweep: 0.0,
            mass_balanced: 0.0,
            safeguard_invocations: 0,
            max_entries: 0,
            sinkhorn_seconds: 0.0,
            balance_seconds: 0.0,
            truncate_seconds: 0.0,
        };
        for k in 0..stage.sweeps {
            let label = if k % 2 == 0 { Label::A } else { Label::B };
            let stats = engine::sweep(&mut state, label, &data, &cfg)?;
            sweeps_executed += 1;
            report.total_iterations += stats.per_cell_iterations.iter().sum::<usize>();
            report.x_error_last_sweep = stats.x_marginal_error_sum;
            report.mass_balanced += stats.mass_balanced;
            report.safeguard_invocations += stats.safeguard_invocations;
            report.sinkhorn_seconds += stats.sinkhorn_seconds;
            report.balance_seconds += stats.balance_seconds;
            report.truncate_seconds += stats.truncate_seconds;
            let entries = state.entry_count();
            report.max_entries = report.max_entries.max(entries);
            max_entries = max_entries.max(entries);
        }
        stage_reports.push(report);
    }

    let t_cert = Instant::now();
    let layer = &hierarchy.layers[layer_index];
    let cost = layer_cost(layer);
    let data = layer_data(layer, &cost);
    let certificate = dualglue::certificate(&state, &data, &cfg, None)?;
    let certificate_seconds = t_cert.elapsed().as_secs_f64();

    let final_entries = state.entry_count();
    let pixels = layer.geometry.len();
    Ok(SolveOutcome {
        certificate,
        stages: stage_reports,
        refine_seconds,
        certificate_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
        max_entries,
        final_entries,
        entries_per_pixel: final_entries as f64 / pixels as f64,
        sweeps_executed,
        final_epsilon: state.epsilon,
        final_state: state,
        hierarchy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(side: usize, seed: u64) -> DiscreteMeasure {
        // Small deterministic blobby test images without pulling in an RNG.
        let s = side as f64;
        let centers = [
            (s * 0.3, s * 0.4, s * 0.15),
            (s * 0.7, s * 0.6, s * 0.2),
            (s * (0.2 + 0.1 * (seed % 5) as f64), s * 0.8, s * 0.1),
        ];
        let weights: Vec<f64> = (0..side * side)
            .map(|i| {
                let r = (i / side) as f64;
                let c = (i % side) as f64;
                centers
                    .iter()
                    .map(|&(cr, cc, sig)| {
                        let d2 = (r - cr).powi(2) + (c - cc).powi(2);
                        (-d2 / (2.0 * sig * sig)).exp()
                    })
                    .sum::<f64>()
            })
            .collect();
        DiscreteMeasure::new(weights).unwrap()
    }

    #[test]
    fn full_solve_on_16x16_produces_tight_certificate() {
        let mu = test_image(16, 1);
        let nu = test_image(16, 3);
        let outcome = solve_pair(&mu, &nu, 16, &SolveOptions::default()).unwrap();
        assert_eq!(outcome.sweeps_executed, 18);
        assert_eq!(outcome.final_epsilon, 0.25);
        let cert = &outcome.certificate;
        assert!(cert.primal_score - cert.kernel_mass > 0.0);
        assert!(
            cert.relative_pd_gap < 1e-3,
            "gap {} too large",
            cert.relative_pd_gap
        );
        assert!(cert.x_marginal_l1 <= 1e-4);
        assert!(cert.y_marginal_l1 <= 1e-6);
    }

    #[test]
    fn multiscale_and_flat_runs_agree() {
        // A flat run on the finest layer only, walking the same epsilon
        // ladder from the coarsest value, must land on the same score.
        let mu = test_image(32, 2);
        let nu = test_image(32, 7);
        let opts = SolveOptions::default();
        let multi = solve_pair(&mu, &nu, 32, &opts).unwrap();

        // Flat: product initialization on the finest layer, same schedule
        // epsilon values, all run at the finest level.
        let mu_f = mu.with_mass_floor(1e-9).unwrap();
        let nu_f = nu.with_mass_floor(1e-9).unwrap();
        let hierarchy = multiscale::build_hierarchy(&mu_f, &nu_f, 32, 4).unwrap();
        let layer = hierarchy.finest();
        let cost = layer_cost(layer);
        let data = layer_data(layer, &cost);
        let schedule = multiscale::build_schedule(5).unwrap();
        let cfg = opts.sweep_config();
        let mut state = engine::initialize_product_state(
            &layer.basic,
            &layer.nu,
            layer.comp_a.group_count(),
            layer.comp_b.group_count(),
            schedule.stages[0].epsilon,
        );
        for stage in &schedule.stages {
            state.epsilon = stage.epsilon;
            for k in 0..stage.sweeps {
                let label = if k % 2 == 0 { Label::A } else { Label::B };
                engine::sweep(&mut state, label, &data, &cfg).unwrap();
            }
        }
        let cert = dualglue::certificate(&state, &data, &cfg, None).unwrap();
        let rel = (cert.primal_score - multi.certificate.primal_score).abs()
            / multi.certificate.primal_score.abs();
        assert!(rel <= 1e-3, "flat vs multiscale differ by {rel}");
    }
}
