//! The domain decomposition engine: alternating A/B sweeps over composite
//! cells, each consisting of a warm-started Sinkhorn sub-solve, extraction of
//! basic-cell Y-marginals, mass balancing, and truncation.
//!
//! Between sweeps only the per-basic-cell Y-marginals and the per-composite-
//! cell X-potentials survive; cell couplings are transient. Cell tasks within
//! one sweep touch disjoint state and run through the executor, and the merge
//! is keyed by cell id, so results are independent of the worker count.

use crate::error::{Error, Result};
use crate::executor;
use crate::measures::{CostOracle, DiscreteMeasure, KahanSum, SparseMarginal};
use crate::partition::{BasicPartition, CompositePartition, Label};
use crate::sinkhorn::{self, SinkhornConfig, SinkhornProblem, SinkhornResult};
use std::time::Instant;

/// Immutable description of the transport problem one layer operates on.
#[derive(Debug, Clone, Copy)]
pub struct ProblemData<'a> {
    pub mu: &'a DiscreteMeasure,
    pub nu: &'a DiscreteMeasure,
    pub cost: &'a CostOracle,
    pub basic: &'a BasicPartition,
    pub comp_a: &'a CompositePartition,
    pub comp_b: &'a CompositePartition,
}

impl<'a> ProblemData<'a> {
    pub fn partition(&self, label: Label) -> &'a CompositePartition {
        match label {
            Label::A => self.comp_a,
            Label::B => self.comp_b,
        }
    }
}

/// Mutable per-sweep state: sparse basic Y-marginals plus the stored
/// X-potentials of both composite partitions.
#[derive(Debug, Clone)]
pub struct CellState {
    pub marginals: Vec<SparseMarginal>,
    pub potentials_a: Vec<Option<Vec<f64>>>,
    pub potentials_b: Vec<Option<Vec<f64>>>,
    pub epsilon: f64,
}

impl CellState {
    pub fn new(
        marginals: Vec<SparseMarginal>,
        a_groups: usize,
        b_groups: usize,
        epsilon: f64,
    ) -> Self {
        Self {
            marginals,
            potentials_a: vec![None; a_groups],
            potentials_b: vec![None; b_groups],
            epsilon,
        }
    }

    pub fn potentials(&self, label: Label) -> &[Option<Vec<f64>>] {
        match label {
            Label::A => &self.potentials_a,
            Label::B => &self.potentials_b,
        }
    }

    /// Total number of stored marginal entries.
    pub fn entry_count(&self) -> usize {
        self.marginals.iter().map(|m| m.len()).sum()
    }

    /// Verify the feasibility contract: per-cell masses match the basic cell
    /// masses and the marginals sum to `nu`.
    pub fn check_feasible(&self, basic: &BasicPartition, nu: &DiscreteMeasure, tol: f64) -> Result<()> {
        if self.marginals.len() != basic.cell_count() {
            return Err(Error::Shape(format!(
                "{} marginals for {} basic cells",
                self.marginals.len(),
                basic.cell_count()
            )));
        }
        for (i, m) in self.marginals.iter().enumerate() {
            let target = basic.cell_mass(i);
            if (m.total_mass() - target).abs() > tol * target.max(1e-300) {
                return Err(Error::Inconsistent(format!(
                    "cell {i} carries mass {} but its basic cell holds {target}",
                    m.total_mass()
                )));
            }
        }
        let refs: Vec<&SparseMarginal> = self.marginals.iter().collect();
        let summed = SparseMarginal::merge_sum(&refs);
        let mut l1 = 0.0;
        let mut cursor = 0usize;
        let entries = summed.entries();
        for (y, &w) in nu.weights().iter().enumerate() {
            let got = if cursor < entries.len() && entries[cursor].0 as usize == y {
                let v = entries[cursor].1;
                cursor += 1;
                v
            } else {
                0.0
            };
            l1 += (got - w).abs();
        }
        if l1 > tol * nu.total_mass().max(1e-300) {
            return Err(Error::Inconsistent(format!(
                "summed marginals deviate from nu by L1 {l1}"
            )));
        }
        Ok(())
    }
}

/// The canonical cold start: scaled copies of `nu` on every basic cell,
/// `nu_i = |mu_i| * nu`, with zero potentials.
pub fn initialize_product_state(
    basic: &BasicPartition,
    nu: &DiscreteMeasure,
    a_groups: usize,
    b_groups: usize,
    epsilon: f64,
) -> CellState {
    let nu_sparse = SparseMarginal::from_dense(nu.weights());
    let marginals = (0..basic.cell_count())
        .map(|i| nu_sparse.scaled(basic.cell_mass(i)))
        .collect();
    CellState::new(marginals, a_groups, b_groups, epsilon)
}

#[derive(Debug, Clone, Copy)]
pub struct SweepConfig {
    /// Global marginal error budget `Err`; every cell solve stops at
    /// `|mu_J| * err_tol`.
    pub err_tol: f64,
    /// Sparsity floor applied to the basic marginals after balancing.
    pub marginal_floor: f64,
    pub sinkhorn: SinkhornConfig,
    pub workers: usize,
    /// Doublings of epsilon the infeasibility safeguard may attempt.
    pub safeguard_attempts: usize,
    /// Retain per-cell couplings in the sweep stats (convergence traces only).
    pub capture_couplings: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            err_tol: 1e-4,
            marginal_floor: 1e-15,
            sinkhorn: SinkhornConfig::default(),
            workers: 1,
            safeguard_attempts: 3,
            capture_couplings: false,
        }
    }
}

impl SweepConfig {
    /// Exact-subsolve configuration for convergence traces.
    pub fn trace() -> Self {
        Self {
            err_tol: 1e-12,
            marginal_floor: 0.0,
            sinkhorn: SinkhornConfig::trace(),
            workers: 1,
            safeguard_attempts: 0,
            capture_couplings: true,
        }
    }
}

/// Transient coupling of one composite cell, kept only when traces ask for it.
#[derive(Debug, Clone)]
pub struct CellCoupling {
    pub group: usize,
    /// `(x_id, y_id, mass)` in global indices.
    pub entries: Vec<(u32, u32, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct SweepStats {
    pub per_cell_iterations: Vec<usize>,
    pub x_marginal_error_sum: f64,
    pub mass_balanced: f64,
    pub entries_before_truncation: usize,
    pub entries_after_truncation: usize,
    /// Cells whose solve needed the epsilon-doubling safeguard.
    pub safeguard_invocations: usize,
    pub sinkhorn_seconds: f64,
    pub balance_seconds: f64,
    pub truncate_seconds: f64,
    pub couplings: Option<Vec<CellCoupling>>,
}

struct CellOutcome {
    group: usize,
    marginals: Vec<SparseMarginal>,
    potential: Vec<f64>,
    iterations: usize,
    x_error: f64,
    moved: f64,
    entries_before: usize,
    entries_after: usize,
    safeguarded: bool,
    sinkhorn_seconds: f64,
    balance_seconds: f64,
    truncate_seconds: f64,
    coupling: Option<Vec<(u32, u32, f64)>>,
}

/// Gathered inputs of one composite cell problem.
struct CellInputs {
    x_ids: Vec<u32>,
    mu_vals: Vec<f64>,
    /// Basic cell ids of the group in group order.
    members: Vec<usize>,
    /// X-local range occupied by each member.
    member_ranges: Vec<(usize, usize)>,
    y_ids: Vec<u32>,
    nu_hat: Vec<f64>,
    nu_ref: Vec<f64>,
}

fn gather_cell(state: &CellState, data: &ProblemData, label: Label, group: usize) -> CellInputs {
    let part = data.partition(label);
    let members: Vec<usize> = part.group(group).to_vec();
    let mut x_ids = Vec::new();
    let mut member_ranges = Vec::with_capacity(members.len());
    for &i in &members {
        let start = x_ids.len();
        x_ids.extend_from_slice(data.basic.cell(i));
        member_ranges.push((start, x_ids.len()));
    }
    let mu_vals: Vec<f64> = x_ids.iter().map(|&x| data.mu.get(x as usize)).collect();
    let parts: Vec<&SparseMarginal> = members.iter().map(|&i| &state.marginals[i]).collect();
    let nu_cell = SparseMarginal::merge_sum(&parts);
    let mut y_ids = Vec::with_capacity(nu_cell.len());
    let mut nu_hat = Vec::with_capacity(nu_cell.len());
    let mut nu_ref = Vec::with_capacity(nu_cell.len());
    for &(y, m) in nu_cell.entries() {
        y_ids.push(y);
        nu_hat.push(m);
        nu_ref.push(data.nu.get(y as usize));
    }
    CellInputs {
        x_ids,
        mu_vals,
        members,
        member_ranges,
        y_ids,
        nu_hat,
        nu_ref,
    }
}

/// Solve one cell with the epsilon-doubling safeguard: on a numerically
/// infeasible kernel (or an exhausted iteration budget) retry at doubled
/// epsilon and re-solve at the target using the elevated potential, which is
/// invariant under the change in the absorbed representation. If no doubling
/// rescues the cell, fall back to an untruncated kernel at the target
/// epsilon: the cell problems are small, so a dense local fix is cheap and
/// always representable.
fn solve_with_safeguard(
    problem: &SinkhornProblem,
    init: &[f64],
    err_tol: f64,
    cfg: &SweepConfig,
    group: usize,
    label: Label,
) -> Result<(SinkhornResult, bool)> {
    match sinkhorn::solve(problem, init, err_tol, &cfg.sinkhorn) {
        Ok(res) => Ok((res, false)),
        Err(e @ (Error::Infeasible(_) | Error::Convergence { .. })) => {
            let mut warm = init.to_vec();
            let mut last = e;
            for attempt in 1..=cfg.safeguard_attempts {
                let elevated_eps = problem.epsilon * f64::powi(2.0, attempt as i32);
                let elevated = SinkhornProblem {
                    epsilon: elevated_eps,
                    ..*problem
                };
                match sinkhorn::solve(&elevated, &warm, err_tol, &cfg.sinkhorn) {
                    Ok(res) => {
                        warm = res.x_potential;
                        match sinkhorn::solve(problem, &warm, err_tol, &cfg.sinkhorn) {
                            Ok(res) => return Ok((res, true)),
                            Err(e2) => last = e2,
                        }
                    }
                    Err(e2) => last = e2,
                }
            }
            let dense = SinkhornConfig {
                truncation_theta: 0.0,
                max_iterations: cfg.sinkhorn.max_iterations.max(1_000_000),
                ..cfg.sinkhorn
            };
            match sinkhorn::solve(problem, &warm, err_tol, &dense) {
                Ok(res) => Ok((res, true)),
                Err(_) => Err(Error::Infeasible(format!(
                    "cell {group} of partition {label} failed after {} safeguard attempts at eps {}: {last}",
                    cfg.safeguard_attempts, problem.epsilon
                ))),
            }
        }
        Err(e) => Err(e),
    }
}

fn run_cell(
    state: &CellState,
    data: &ProblemData,
    label: Label,
    group: usize,
    cfg: &SweepConfig,
) -> Result<CellOutcome> {
    let inputs = gather_cell(state, data, label, group);
    let problem = SinkhornProblem {
        x_ids: &inputs.x_ids,
        y_ids: &inputs.y_ids,
        mu_hat: &inputs.mu_vals,
        mu_ref: &inputs.mu_vals,
        nu_hat: &inputs.nu_hat,
        nu_ref: &inputs.nu_ref,
        cost: data.cost,
        epsilon: state.epsilon,
    };
    let zeros;
    let init: &[f64] = match &state.potentials(label)[group] {
        Some(p) if p.len() == inputs.x_ids.len() => p,
        _ => {
            zeros = vec![0.0; inputs.x_ids.len()];
            &zeros
        }
    };

    let t0 = Instant::now();
    let (result, safeguarded) = solve_with_safeguard(&problem, init, cfg.err_tol, cfg, group, label)?;
    let sinkhorn_seconds = t0.elapsed().as_secs_f64();

    // Extract the new basic partial marginals from the transient coupling.
    let mut accum: Vec<Vec<f64>> = inputs
        .members
        .iter()
        .map(|_| vec![0.0; inputs.y_ids.len()])
        .collect();
    let mut member_of_xlocal = vec![0usize; inputs.x_ids.len()];
    for (mi, &(start, end)) in inputs.member_ranges.iter().enumerate() {
        for slot in &mut member_of_xlocal[start..end] {
            *slot = mi;
        }
    }
    for &(xl, yl, s) in &result.kernel.entries {
        let mass = s * inputs.mu_vals[xl as usize] * inputs.nu_ref[yl as usize];
        accum[member_of_xlocal[xl as usize]][yl as usize] += mass;
    }
    let coupling = cfg.capture_couplings.then(|| result.coupling_entries(&problem));

    let mut marginals: Vec<SparseMarginal> = accum
        .into_iter()
        .map(|dense_on_support| {
            let entries: Vec<(u32, f64)> = dense_on_support
                .iter()
                .enumerate()
                .filter(|&(_, &m)| m > 0.0)
                .map(|(yl, &m)| (inputs.y_ids[yl], m))
                .collect();
            let mut sm = SparseMarginal::empty();
            sm.set_entries_raw(entries);
            sm
        })
        .collect();

    let t1 = Instant::now();
    let targets: Vec<f64> = inputs.members.iter().map(|&i| data.basic.cell_mass(i)).collect();
    let moved = balance_measures(&mut marginals, &targets)?;
    let balance_seconds = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let entries_before: usize = marginals.iter().map(|m| m.len()).sum();
    let marginals: Vec<SparseMarginal> = marginals
        .iter()
        .map(|m| truncate_marginal(m, cfg.marginal_floor))
        .collect();
    let entries_after: usize = marginals.iter().map(|m| m.len()).sum();
    let truncate_seconds = t2.elapsed().as_secs_f64();

    Ok(CellOutcome {
        group,
        marginals,
        potential: result.x_potential,
        iterations: result.iterations,
        x_error: result.x_marginal_error,
        moved,
        entries_before,
        entries_after,
        safeguarded,
        sinkhorn_seconds,
        balance_seconds,
        truncate_seconds,
        coupling,
    })
}

/// One half-iteration over all composite cells of the chosen partition.
pub fn sweep(
    state: &mut CellState,
    label: Label,
    data: &ProblemData,
    cfg: &SweepConfig,
) -> Result<SweepStats> {
    let part = data.partition(label);
    let groups = part.group_count();
    let outcomes = executor::run_batch_collect(cfg.workers.max(1), groups, |g| {
        run_cell(state, data, label, g, cfg)
    })?;

    let mut stats = SweepStats {
        couplings: cfg.capture_couplings.then(Vec::new),
        ..SweepStats::default()
    };
    for outcome in outcomes {
        let members = part.group(outcome.group).to_vec();
        for (mi, marginal) in outcome.marginals.into_iter().enumerate() {
            state.marginals[members[mi]] = marginal;
        }
        let slot = match label {
            Label::A => &mut state.potentials_a[outcome.group],
            Label::B => &mut state.potentials_b[outcome.group],
        };
        *slot = Some(outcome.potential);

        stats.per_cell_iterations.push(outcome.iterations);
        stats.x_marginal_error_sum += outcome.x_error;
        stats.mass_balanced += outcome.moved;
        stats.entries_before_truncation += outcome.entries_before;
        stats.entries_after_truncation += outcome.entries_after;
        stats.safeguard_invocations += usize::from(outcome.safeguarded);
        stats.sinkhorn_seconds += outcome.sinkhorn_seconds;
        stats.balance_seconds += outcome.balance_seconds;
        stats.truncate_seconds += outcome.truncate_seconds;
        if let (Some(all), Some(cell)) = (stats.couplings.as_mut(), outcome.coupling) {
            all.push(CellCoupling {
                group: outcome.group,
                entries: cell,
            });
        }
    }
    Ok(stats)
}

/// Move mass among the marginals of one composite cell so every `|nu_i|`
/// matches its target exactly, preserving non-negativity and the pointwise
/// sum.
///
/// Deterministic greedy: donors and receivers are visited in ascending cell
/// index; each transfer drains the donor's largest entries first and lands on
/// the same Y-point of the receiver. Returns the total mass moved.
pub fn balance_measures(marginals: &mut [SparseMarginal], targets: &[f64]) -> Result<f64> {
    if marginals.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} marginals for {} targets",
            marginals.len(),
            targets.len()
        )));
    }
    let mut deviations: Vec<f64> = marginals
        .iter()
        .zip(targets)
        .map(|(m, &t)| m.total_mass() - t)
        .collect();
    let total_dev: f64 = deviations.iter().sum();
    let scale: f64 = targets.iter().sum::<f64>().max(1e-300);
    // Sparsity truncation leaks up to floor * entry-count of mass per sweep,
    // which on low-mass cells dwarfs any relative tolerance; the check guards
    // against real inconsistencies, not that drift.
    if total_dev.abs() > 1e-9 + 1e-7 * scale {
        return Err(Error::Inconsistent(format!(
            "cannot balance: total deviation {total_dev} exceeds tolerance"
        )));
    }

    let mut moved = 0.0;
    let n = marginals.len();
    for donor in 0..n {
        if deviations[donor] <= 0.0 {
            continue;
        }
        // Donor entry positions, largest mass first (ties by index).
        let mut order: Vec<usize> = (0..marginals[donor].len()).collect();
        {
            let entries = marginals[donor].entries();
            order.sort_by(|&a, &b| {
                entries[b]
                    .1
                    .partial_cmp(&entries[a].1)
                    .unwrap()
                    .then(entries[a].0.cmp(&entries[b].0))
            });
        }
        let mut donor_entries = marginals[donor].entries().to_vec();
        let mut cursor = 0usize;
        for receiver in 0..n {
            if deviations[receiver] >= 0.0 || deviations[donor] <= 0.0 {
                continue;
            }
            let mut want = deviations[donor].min(-deviations[receiver]);
            let granted = want;
            while want > 0.0 && cursor < order.len() {
                let pos = order[cursor];
                let (y, available) = donor_entries[pos];
                let take = available.min(want);
                donor_entries[pos].1 -= take;
                marginals[receiver].add(y, take);
                want -= take;
                if donor_entries[pos].1 <= 0.0 {
                    cursor += 1;
                }
            }
            let transferred = granted - want;
            deviations[donor] -= transferred;
            deviations[receiver] += transferred;
            moved += transferred;
        }
        donor_entries.retain(|&(_, m)| m > 0.0);
        marginals[donor].set_entries_raw(donor_entries);
    }
    Ok(moved)
}

/// Drop marginal entries below `floor`, leaving the rest untouched.
pub fn truncate_marginal(m: &SparseMarginal, floor: f64) -> SparseMarginal {
    m.truncated(floor)
}

/// One composite cell's contribution to the assembled coupling.
#[derive(Debug, Clone)]
pub struct CellDual {
    pub group: usize,
    /// X-potential over the group's concatenated pixel list.
    pub x_potential: Vec<f64>,
    /// Y-potential over the cell's Y support.
    pub y_potential: Vec<f64>,
    pub y_ids: Vec<u32>,
    /// Cell Y-marginal masses aligned with `y_ids`.
    pub nu_cell: Vec<f64>,
}

/// Assembled primal iterate: scores are accumulated cell-wise without ever
/// materializing the global coupling unless entries are requested.
#[derive(Debug, Clone)]
pub struct AssembledCoupling {
    /// `sum over entries of pi * log(d pi / d K)`.
    pub pi_log_sum: f64,
    /// Total coupling mass.
    pub pi_mass: f64,
    /// L1 error of the X-marginal against `mu`.
    pub x_marginal_l1: f64,
    /// L1 error of the Y-marginal against `nu`.
    pub y_marginal_l1: f64,
    pub entries: Option<Vec<(u32, u32, f64)>>,
    pub cell_duals: Option<Vec<CellDual>>,
    /// `KL(pi | K) - |K|`; add the reference mass for the absolute score.
    pub primal_minus_kernel_mass: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AssembleOptions {
    pub collect_entries: bool,
    pub collect_duals: bool,
}

/// Re-solve the cells of one partition (warm-started, state untouched) and
/// accumulate the primal score `KL(pi|K)` cell-wise.
pub fn assemble_coupling(
    state: &CellState,
    label: Label,
    data: &ProblemData,
    cfg: &SweepConfig,
    options: AssembleOptions,
) -> Result<AssembledCoupling> {
    let part = data.partition(label);
    let groups = part.group_count();
    struct CellScore {
        log_sum: f64,
        mass: f64,
        x_err: f64,
        entries: Option<Vec<(u32, u32, f64)>>,
        dual: Option<CellDual>,
    }
    let outcomes = executor::run_batch_collect(cfg.workers.max(1), groups, |g| {
        let inputs = gather_cell(state, data, label, g);
        let problem = SinkhornProblem {
            x_ids: &inputs.x_ids,
            y_ids: &inputs.y_ids,
            mu_hat: &inputs.mu_vals,
            mu_ref: &inputs.mu_vals,
            nu_hat: &inputs.nu_hat,
            nu_ref: &inputs.nu_ref,
            cost: data.cost,
            epsilon: state.epsilon,
        };
        let zeros;
        let init: &[f64] = match &state.potentials(label)[g] {
            Some(p) if p.len() == inputs.x_ids.len() => p,
            _ => {
                zeros = vec![0.0; inputs.x_ids.len()];
                &zeros
            }
        };
        let (result, _) = solve_with_safeguard(&problem, init, cfg.err_tol, cfg, g, label)?;
        let inv_eps = 1.0 / state.epsilon;
        let mut log_sum = KahanSum::new();
        let mut mass = KahanSum::new();
        for &(xl, yl, s) in &result.kernel.entries {
            let m = s * inputs.mu_vals[xl as usize] * inputs.nu_ref[yl as usize];
            // log(d pi / d K) = (alpha + beta)/eps on the stored support.
            log_sum.add(
                m * (result.x_potential[xl as usize] + result.y_potential[yl as usize]) * inv_eps,
            );
            mass.add(m);
        }
        let entries = options.collect_entries.then(|| result.coupling_entries(&problem));
        let dual = options.collect_duals.then(|| CellDual {
            group: g,
            x_potential: result.x_potential.clone(),
            y_potential: result.y_potential.clone(),
            y_ids: inputs.y_ids.clone(),
            nu_cell: inputs.nu_hat.clone(),
        });
        Ok(CellScore {
            log_sum: log_sum.value(),
            mass: mass.value(),
            x_err: result.x_marginal_error,
            entries,
            dual,
        })
    })?;

    let mut pi_log = KahanSum::new();
    let mut pi_mass = KahanSum::new();
    let mut x_l1 = 0.0;
    let mut all_entries = options.collect_entries.then(Vec::new);
    let mut all_duals = options.collect_duals.then(Vec::new);
    for outcome in outcomes {
        pi_log.add(outcome.log_sum);
        pi_mass.add(outcome.mass);
        x_l1 += outcome.x_err;
        if let (Some(list), Some(e)) = (all_entries.as_mut(), outcome.entries) {
            list.extend(e);
        }
        if let (Some(list), Some(d)) = (all_duals.as_mut(), outcome.dual) {
            list.push(d);
        }
    }

    // Y-marginal of the assembled coupling is the sum of the stored cell
    // marginals (the re-solve reproduces them exactly after a Y-iteration).
    let refs: Vec<&SparseMarginal> = state.marginals.iter().collect();
    let summed = SparseMarginal::merge_sum(&refs);
    let mut y_l1 = 0.0;
    let mut cursor = 0usize;
    let entries = summed.entries();
    for (y, &w) in data.nu.weights().iter().enumerate() {
        let got = if cursor < entries.len() && entries[cursor].0 as usize == y {
            let v = entries[cursor].1;
            cursor += 1;
            v
        } else {
            0.0
        };
        y_l1 += (got - w).abs();
    }

    let pi_log_sum = pi_log.value();
    let mass = pi_mass.value();
    Ok(AssembledCoupling {
        pi_log_sum,
        pi_mass: mass,
        x_marginal_l1: x_l1,
        y_marginal_l1: y_l1,
        entries: all_entries,
        cell_duals: all_duals,
        primal_minus_kernel_mass: pi_log_sum - mass,
    })
}
