//! Gluing per-composite-cell dual potentials into one global dual pair and
//! the primal-dual certificates built from it.
//!
//! The sweep never produces a global dual iterate: each composite cell keeps
//! its own scaling, consistent only up to a constant per cell. On the graph
//! whose vertices are the A-cells and whose edges come from overlapping
//! B-cells, the pairwise inconsistencies define oriented edge weights. A
//! least-squares vertex potential (discrete Helmholtz decomposition of the
//! weights) distributes the inconsistency evenly; shifting each cell's
//! potential by it yields a global dual candidate and a weak-duality
//! certificate.

use crate::engine::{self, AssembleOptions, CellDual, CellState, ProblemData, SweepConfig};
use crate::error::{Error, Result};
use crate::executor;
use crate::measures::{KahanSum, KernelRef};
use crate::partition::Label;

/// Graph on A-cells; each overlapping B-cell contributes one edge per
/// A-cell pair it touches, so multi-edges between the same vertices persist.
#[derive(Debug, Clone)]
pub struct GlueGraph {
    pub vertex_count: usize,
    pub edges: Vec<GlueEdge>,
    pub root: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GlueEdge {
    pub from: usize,
    pub to: usize,
    /// B-group inducing this edge.
    pub via_b: usize,
    /// Mass-weighted mean log-ratio of the two cells' scalings over their
    /// overlaps with the inducing B-cell, oriented so that a potential fitted
    /// to `V(from) - V(to) = log_weight` glues cells by `alpha + eps V`:
    /// for consistent scalings `u_A,J = lambda_J u*` the weight equals
    /// `log(lambda_to / lambda_from)` and the shifts cancel the factors.
    pub log_weight: f64,
}

/// X-pixel offsets of each basic cell inside a group's concatenated support.
fn member_offsets(data: &ProblemData, label: Label, group: usize) -> Vec<(usize, usize, usize)> {
    let part = data.partition(label);
    let mut out = Vec::new();
    let mut offset = 0;
    for &i in part.group(group) {
        let len = data.basic.cell(i).len();
        out.push((i, offset, offset + len));
        offset += len;
    }
    out
}

/// Mass-normalized integral of `(pa - pb)/eps` over one basic cell, where
/// the potentials are slices over the cell's pixels.
fn mean_log_ratio(data: &ProblemData, cell: usize, pa: &[f64], pb: &[f64], eps: f64) -> (f64, f64) {
    let pixels = data.basic.cell(cell);
    let mut num = 0.0;
    let mut mass = 0.0;
    for (k, &x) in pixels.iter().enumerate() {
        let m = data.mu.get(x as usize);
        num += m * (pa[k] - pb[k]) / eps;
        mass += m;
    }
    (num, mass)
}

/// Build the glue graph from per-A-cell potentials and the stored B-cell
/// potentials. Both live on their group's concatenated pixel lists.
pub fn build_glue_graph(
    a_potentials: &[Vec<f64>],
    b_potentials: &[Option<Vec<f64>>],
    data: &ProblemData,
    epsilon: f64,
    root: usize,
) -> Result<GlueGraph> {
    let na = data.comp_a.group_count();
    if a_potentials.len() != na || b_potentials.len() != data.comp_b.group_count() {
        return Err(Error::Shape("potential lists do not match the partitions".into()));
    }
    // A-group of every basic cell.
    let mut a_group_of = vec![usize::MAX; data.basic.cell_count()];
    for (j, group) in data.comp_a.groups().iter().enumerate() {
        for &i in group {
            a_group_of[i] = j;
        }
    }
    let a_offsets: Vec<Vec<(usize, usize, usize)>> =
        (0..na).map(|j| member_offsets(data, Label::A, j)).collect();

    let mut edges = Vec::new();
    for (jb, b_group) in data.comp_b.groups().iter().enumerate() {
        let pb = match &b_potentials[jb] {
            Some(p) => p,
            None => {
                return Err(Error::Inconsistent(format!(
                    "B-cell {jb} has no stored potential; gluing needs one full A+B round"
                )))
            }
        };
        let b_offsets = member_offsets(data, Label::B, jb);
        // Distinct A-groups this B-cell touches, in ascending order.
        let mut touched: Vec<usize> = b_group.iter().map(|&i| a_group_of[i]).collect();
        touched.sort_unstable();
        touched.dedup();
        if touched.len() < 2 {
            continue;
        }
        // Mean log-ratio of u_A/u_B over each overlap.
        let mut overlap_ratio = Vec::with_capacity(touched.len());
        for &ja in &touched {
            let mut num = 0.0;
            let mut mass = 0.0;
            for &(cell, b_start, b_end) in &b_offsets {
                if a_group_of[cell] != ja {
                    continue;
                }
                let (a_start, a_end) = a_offsets[ja]
                    .iter()
                    .find(|&&(c, _, _)| c == cell)
                    .map(|&(_, s, e)| (s, e))
                    .expect("cell belongs to its A-group");
                debug_assert_eq!(a_end - a_start, b_end - b_start);
                let (n, m) = mean_log_ratio(
                    data,
                    cell,
                    &a_potentials[ja][a_start..a_end],
                    &pb[b_start..b_end],
                    epsilon,
                );
                num += n;
                mass += m;
            }
            if mass > 0.0 {
                overlap_ratio.push((ja, num / mass));
            }
        }
        for (k, &(j1, r1)) in overlap_ratio.iter().enumerate() {
            for &(j2, r2) in &overlap_ratio[k + 1..] {
                edges.push(GlueEdge {
                    from: j1,
                    to: j2,
                    via_b: jb,
                    log_weight: r2 - r1,
                });
            }
        }
    }
    Ok(GlueGraph {
        vertex_count: na,
        edges,
        root,
    })
}

/// Result of the least-squares vertex-potential fit.
#[derive(Debug, Clone)]
pub struct HelmholtzFit {
    pub potential: Vec<f64>,
    /// Value of the least-squares objective at the minimizer.
    pub objective: f64,
    /// Maximum residual of the normal equations over the free vertices.
    pub normal_residual: f64,
    /// Number of connected components (each gauged independently).
    pub components: usize,
}

/// Minimize `sum over edges of ((V(from) - V(to)) - log_weight)^2` with the
/// gauge `V(root) = 0` (one gauge per connected component).
pub fn helmholtz_fit(graph: &GlueGraph) -> Result<HelmholtzFit> {
    let n = graph.vertex_count;
    if n == 0 {
        return Err(Error::Config("empty glue graph".into()));
    }
    // Connected components.
    let mut adjacency = vec![Vec::new(); n];
    for e in &graph.edges {
        adjacency[e.from].push(e.to);
        adjacency[e.to].push(e.from);
    }
    let mut component = vec![usize::MAX; n];
    let mut components = 0usize;
    for start in 0..n {
        if component[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        component[start] = components;
        while let Some(v) = stack.pop() {
            for &w in &adjacency[v] {
                if component[w] == usize::MAX {
                    component[w] = components;
                    stack.push(w);
                }
            }
        }
        components += 1;
    }
    // Gauge vertex per component: the root for its component, the smallest
    // vertex index otherwise.
    let mut gauge = vec![usize::MAX; components];
    gauge[component[graph.root]] = graph.root;
    for v in 0..n {
        let c = component[v];
        if gauge[c] == usize::MAX {
            gauge[c] = v;
        }
    }
    let is_gauge: Vec<bool> = (0..n).map(|v| gauge[component[v]] == v).collect();

    // Normal equations L V = b over the free vertices.
    let free: Vec<usize> = (0..n).filter(|&v| !is_gauge[v]).collect();
    let index_of: Vec<usize> = {
        let mut m = vec![usize::MAX; n];
        for (k, &v) in free.iter().enumerate() {
            m[v] = k;
        }
        m
    };
    let nf = free.len();
    let mut b = vec![0.0; n];
    for e in &graph.edges {
        b[e.from] += e.log_weight;
        b[e.to] -= e.log_weight;
    }
    let mut potential = vec![0.0; n];
    if nf > 0 {
        let solution = if nf <= 4096 {
            let mut a = vec![0.0; nf * nf];
            for e in &graph.edges {
                let (f, t) = (e.from, e.to);
                if !is_gauge[f] {
                    let fi = index_of[f];
                    a[fi * nf + fi] += 1.0;
                }
                if !is_gauge[t] {
                    let ti = index_of[t];
                    a[ti * nf + ti] += 1.0;
                }
                if !is_gauge[f] && !is_gauge[t] {
                    let (fi, ti) = (index_of[f], index_of[t]);
                    a[fi * nf + ti] -= 1.0;
                    a[ti * nf + fi] -= 1.0;
                }
            }
            let rhs: Vec<f64> = free.iter().map(|&v| b[v]).collect();
            cholesky_solve(&mut a, nf, &rhs)?
        } else {
            cg_solve(graph, &is_gauge, &index_of, &free, &b)?
        };
        for (k, &v) in free.iter().enumerate() {
            potential[v] = solution[k];
        }
    }

    // Residual of the normal equations and objective value.
    let mut lv = vec![0.0; n];
    for e in &graph.edges {
        let d = potential[e.from] - potential[e.to];
        lv[e.from] += d;
        lv[e.to] -= d;
    }
    let normal_residual = free
        .iter()
        .map(|&v| (lv[v] - b[v]).abs())
        .fold(0.0f64, f64::max);
    let objective: f64 = graph
        .edges
        .iter()
        .map(|e| {
            let r = potential[e.from] - potential[e.to] - e.log_weight;
            r * r
        })
        .sum();
    Ok(HelmholtzFit {
        potential,
        objective,
        normal_residual,
        components,
    })
}

/// Dense Cholesky solve of a symmetric positive definite system (row-major,
/// overwritten in place).
fn cholesky_solve(a: &mut [f64], n: usize, rhs: &[f64]) -> Result<Vec<f64>> {
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Validation(format!(
                        "normal-equation matrix lost positive definiteness at pivot {i}"
                    )));
                }
                a[i * n + i] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
    }
    let mut x = rhs.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= a[i * n + k] * x[k];
        }
        x[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            x[i] -= a[k * n + i] * x[k];
        }
        x[i] /= a[i * n + i];
    }
    Ok(x)
}

/// Conjugate gradient on the reduced graph Laplacian, matrix-free.
fn cg_solve(
    graph: &GlueGraph,
    is_gauge: &[bool],
    index_of: &[usize],
    free: &[usize],
    b: &[f64],
) -> Result<Vec<f64>> {
    let nf = free.len();
    let matvec = |x: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for e in &graph.edges {
            let xf = if is_gauge[e.from] { 0.0 } else { x[index_of[e.from]] };
            let xt = if is_gauge[e.to] { 0.0 } else { x[index_of[e.to]] };
            let d = xf - xt;
            if !is_gauge[e.from] {
                out[index_of[e.from]] += d;
            }
            if !is_gauge[e.to] {
                out[index_of[e.to]] -= d;
            }
        }
    };
    let rhs: Vec<f64> = free.iter().map(|&v| b[v]).collect();
    let mut x = vec![0.0; nf];
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0; nf];
    let norm_b: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let mut rs: f64 = r.iter().map(|v| v * v).sum();
    for _ in 0..10 * nf.max(100) {
        if rs.sqrt() <= 1e-13 * norm_b {
            return Ok(x);
        }
        matvec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rs / pap;
        for k in 0..nf {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rs_new / rs;
        rs = rs_new;
        for k in 0..nf {
            p[k] = r[k] + beta * p[k];
        }
    }
    if rs.sqrt() <= 1e-10 * norm_b {
        Ok(x)
    } else {
        Err(Error::Convergence {
            iterations: 10 * nf.max(100),
            last_error: rs.sqrt(),
            context: "conjugate gradient on the glue Laplacian stalled".into(),
        })
    }
}

/// Assemble the global dual pair from per-A-cell duals and the fitted vertex
/// potential: `alpha(x) = alpha_J(x) + eps V_J` on cell `J`, and per Y-point
/// the column-optimal potential for the glued `alpha` (the exact partial
/// maximizer of the dual objective over the Y side, computed by a stabilized
/// log-sum-exp over the column).
///
/// Any per-point Y-gluing of the cell potentials is dominated by this choice
/// and coincides with it once the cells are consistent; unlike an average of
/// the per-cell values it stays bounded on the marginal tails, where cells
/// disagree wildly before convergence.
pub fn glue_duals(
    cell_duals: &[CellDual],
    potential: &[f64],
    data: &ProblemData,
    epsilon: f64,
    workers: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let nx = data.mu.len();
    let ny = data.nu.len();
    let mut alpha = vec![0.0; nx];
    for dual in cell_duals {
        let shift = epsilon * potential[dual.group];
        let offsets = member_offsets(data, Label::A, dual.group);
        for &(cell, start, _end) in &offsets {
            for (k, &x) in data.basic.cell(cell).iter().enumerate() {
                alpha[x as usize] = dual.x_potential[start + k] + shift;
            }
        }
    }
    let beta = column_optimal_potential(&alpha, data, epsilon, workers)?;
    Ok((alpha, beta))
}

/// `beta(y) = -eps log integral of exp((alpha - c(., y))/eps) d mu` on the
/// support of `nu` (zero elsewhere), evaluated in fixed Y blocks.
fn column_optimal_potential(
    alpha: &[f64],
    data: &ProblemData,
    epsilon: f64,
    workers: usize,
) -> Result<Vec<f64>> {
    let nx = data.mu.len();
    let ny = data.nu.len();
    let inv_eps = 1.0 / epsilon;
    const BLOCK: usize = 64;
    let blocks = ny.div_ceil(BLOCK);
    let parts = executor::run_batch_collect(workers.max(1), blocks, |b| {
        let lo = b * BLOCK;
        let hi = (lo + BLOCK).min(ny);
        let mut out = vec![0.0; hi - lo];
        for (slot, y) in out.iter_mut().zip(lo..hi) {
            if data.nu.get(y) == 0.0 {
                continue;
            }
            let mut m = f64::NEG_INFINITY;
            for x in 0..nx {
                if data.mu.get(x) > 0.0 {
                    let v = alpha[x] - data.cost.cost(x, y);
                    if v > m {
                        m = v;
                    }
                }
            }
            let mut sum = 0.0;
            for x in 0..nx {
                let w = data.mu.get(x);
                if w > 0.0 {
                    sum += ((alpha[x] - data.cost.cost(x, y) - m) * inv_eps).exp() * w;
                }
            }
            *slot = -m - epsilon * sum.ln();
        }
        Ok(out)
    })?;
    let mut beta = Vec::with_capacity(ny);
    for part in parts {
        beta.extend(part);
    }
    Ok(beta)
}

/// Primal and dual scores of the current state with the relative gap
/// `(KL(pi|K) - J(u,v)) / (KL(pi|K) - |K|)`.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub primal_score: f64,
    pub dual_score: f64,
    pub relative_pd_gap: f64,
    pub x_marginal_l1: f64,
    pub y_marginal_l1: f64,
    /// Total mass of the reference measure at this epsilon.
    pub kernel_mass: f64,
    /// Relative dual score of a supplied baseline dual versus the glued one:
    /// `(J_base - J_glued) / (J_glued - |K|)`.
    pub relative_dual_score: Option<f64>,
    /// Glued global potentials, available for downstream refinement.
    pub glued_x_potential: Vec<f64>,
    pub glued_y_potential: Vec<f64>,
    pub helmholtz_objective: f64,
    pub glue_components: usize,
}

/// Deterministic (worker-count independent) dense pass for `|K|` and the
/// scaled mass: fixed row blocks, ordered reduction.
pub fn kernel_masses(
    kref: &KernelRef,
    alpha: &[f64],
    beta: &[f64],
    workers: usize,
) -> Result<(f64, f64)> {
    let (nx, _) = kref.cost.shape();
    const BLOCK: usize = 64;
    let blocks = nx.div_ceil(BLOCK);
    let partial = executor::run_batch_collect(workers.max(1), blocks, |b| {
        let lo = b * BLOCK;
        let hi = (lo + BLOCK).min(nx);
        Ok(kref.block_mass(lo..hi, Some(alpha), Some(beta)))
    })?;
    let mut k_sum = KahanSum::new();
    let mut uv_sum = KahanSum::new();
    for (k, uv) in partial {
        k_sum.add(k);
        uv_sum.add(uv);
    }
    Ok((k_sum.value(), uv_sum.value()))
}

/// Build the full primal-dual certificate for a state: re-solve the A-cells,
/// glue their duals through the Helmholtz fit, and evaluate both scores.
pub fn certificate(
    state: &CellState,
    data: &ProblemData,
    cfg: &SweepConfig,
    baseline_dual: Option<f64>,
) -> Result<Certificate> {
    let assembled = engine::assemble_coupling(
        state,
        Label::A,
        data,
        cfg,
        AssembleOptions {
            collect_entries: false,
            collect_duals: true,
        },
    )?;
    let duals = assembled.cell_duals.as_ref().expect("duals requested");
    let a_potentials: Vec<Vec<f64>> = duals.iter().map(|d| d.x_potential.clone()).collect();
    let graph = build_glue_graph(&a_potentials, &state.potentials_b, data, state.epsilon, 0)?;
    let fit = helmholtz_fit(&graph)?;
    let (alpha, beta) = glue_duals(duals, &fit.potential, data, state.epsilon, cfg.workers)?;

    let kref = KernelRef::new(data.cost, data.mu, data.nu, state.epsilon)?;
    let (k_mass, uv_mass) = kernel_masses(&kref, &alpha, &beta, cfg.workers)?;

    let inv_eps = 1.0 / state.epsilon;
    let mut lin = KahanSum::new();
    for (x, &a) in alpha.iter().enumerate() {
        let m = data.mu.get(x);
        if m > 0.0 {
            lin.add(m * a * inv_eps);
        }
    }
    for (y, &b) in beta.iter().enumerate() {
        let m = data.nu.get(y);
        if m > 0.0 {
            lin.add(m * b * inv_eps);
        }
    }
    let dual_score = lin.value() - uv_mass + k_mass;
    let primal_score = assembled.primal_minus_kernel_mass + k_mass;
    let relative_pd_gap = (primal_score - dual_score) / assembled.primal_minus_kernel_mass;
    let relative_dual_score = baseline_dual.map(|j_base| (j_base - dual_score) / (dual_score - k_mass));

    Ok(Certificate {
        primal_score,
        dual_score,
        relative_pd_gap,
        x_marginal_l1: assembled.x_marginal_l1,
        y_marginal_l1: assembled.y_marginal_l1,
        kernel_mass: k_mass,
        relative_dual_score,
        glued_x_potential: alpha,
        glued_y_potential: beta,
        helmholtz_objective: fit.objective,
        glue_components: fit.components,
    })
}
