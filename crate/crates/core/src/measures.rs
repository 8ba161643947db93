//! Core value types: discrete measures on grids, costs, kernels, and the
//! Kullback-Leibler divergence machinery that all scores are built from.
//!
//! Dual quantities are handled throughout in the absorbed representation
//! `alpha = eps * log(u)`: a change of the regularization parameter leaves
//! potentials untouched, and `u = exp(alpha/eps)` is only ever formed inside
//! kernel evaluations.

use crate::error::{Error, Result};

/// Square 2D pixel grid embedded into the plane.
///
/// A point with flat index `i` sits at `(row * spacing, col * spacing)`
/// where `row = i / side`, `col = i % side`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry {
    side: usize,
    spacing: f64,
}

impl GridGeometry {
    pub fn new(side: usize, spacing: f64) -> Result<Self> {
        if side < 8 || !side.is_power_of_two() {
            return Err(Error::Config(format!(
                "grid side must be a power of two >= 8, got {side}"
            )));
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::Config(format!("grid spacing must be positive, got {spacing}")));
        }
        Ok(Self { side, spacing })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, index: usize) -> (f64, f64) {
        let r = index / self.side;
        let c = index % self.side;
        (r as f64 * self.spacing, c as f64 * self.spacing)
    }

    pub fn sq_dist(&self, i: usize, other: &GridGeometry, j: usize) -> f64 {
        let (xr, xc) = self.point(i);
        let (yr, yc) = other.point(j);
        let dr = xr - yr;
        let dc = xc - yc;
        dr * dr + dc * dc
    }
}

/// Non-negative weights over an indexed support (grid pixels or abstract points).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    weights: Vec<f64>,
    total: f64,
}

impl DiscreteMeasure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::Validation(format!("non-finite weight {w} at index {i}")));
            }
            if w < 0.0 {
                return Err(Error::Validation(format!("negative weight {w} at index {i}")));
            }
        }
        let total = compensated_sum(weights.iter().copied());
        Ok(Self { weights, total })
    }

    pub fn uniform(len: usize) -> Self {
        let w = 1.0 / len as f64;
        Self {
            weights: vec![w; len],
            total: w * len as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.weights[index]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.total
    }

    pub fn is_probability(&self, tol: f64) -> bool {
        (self.total - 1.0).abs() <= tol
    }

    /// Scale all weights so the total mass becomes one.
    pub fn normalized(&self) -> Result<Self> {
        if self.total <= 0.0 {
            return Err(Error::Validation("cannot normalize a zero measure".into()));
        }
        let inv = 1.0 / self.total;
        Self::new(self.weights.iter().map(|w| w * inv).collect())
    }

    /// Normalize, add a uniform floor of `floor_total / len` to every point,
    /// and renormalize. Guarantees every weight is strictly positive.
    pub fn with_mass_floor(&self, floor_total: f64) -> Result<Self> {
        let normalized = self.normalized()?;
        let floor = floor_total / self.len() as f64;
        let scale = 1.0 / (1.0 + floor_total);
        Self::new(normalized.weights.iter().map(|w| (w + floor) * scale).collect())
    }
}

/// Sparse non-negative measure over `u32` indices, sorted by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseMarginal {
    entries: Vec<(u32, f64)>,
    total: f64,
}

impl SparseMarginal {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Entries must be strictly positive; they are sorted and must not repeat.
    pub fn from_entries(mut entries: Vec<(u32, f64)>) -> Result<Self> {
        entries.sort_unstable_by_key(|&(i, _)| i);
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::Validation(format!("duplicate index {}", pair[0].0)));
            }
        }
        for &(i, m) in &entries {
            if !m.is_finite() || m <= 0.0 {
                return Err(Error::Validation(format!("entry at {i} must be positive and finite, got {m}")));
            }
        }
        let total = compensated_sum(entries.iter().map(|&(_, m)| m));
        Ok(Self { entries, total })
    }

    /// Keep the strictly positive entries of a dense vector.
    pub fn from_dense(dense: &[f64]) -> Self {
        let entries: Vec<(u32, f64)> = dense
            .iter()
            .enumerate()
            .filter(|&(_, &m)| m > 0.0)
            .map(|(i, &m)| (i as u32, m))
            .collect();
        let total = compensated_sum(entries.iter().map(|&(_, m)| m));
        Self { entries, total }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.total
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn get(&self, index: u32) -> f64 {
        match self.entries.binary_search_by_key(&index, |&(i, _)| i) {
            Ok(pos) => self.entries[pos].1,
            Err(_) => 0.0,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let entries: Vec<(u32, f64)> = self.entries.iter().map(|&(i, m)| (i, m * factor)).collect();
        let total = compensated_sum(entries.iter().map(|&(_, m)| m));
        Self { entries, total }
    }

    /// Drop entries strictly below `floor`. Remaining entries are unchanged.
    pub fn truncated(&self, floor: f64) -> Self {
        let entries: Vec<(u32, f64)> = self
            .entries
            .iter()
            .filter(|&&(_, m)| m >= floor)
            .copied()
            .collect();
        let total = compensated_sum(entries.iter().map(|&(_, m)| m));
        Self { entries, total }
    }

    /// Pointwise sum of several sparse marginals (k-way sorted merge).
    pub fn merge_sum(parts: &[&SparseMarginal]) -> Self {
        match parts.len() {
            0 => Self::empty(),
            1 => parts[0].clone(),
            _ => {
                let mut acc: Vec<(u32, f64)> = parts[0].entries.clone();
                for part in &parts[1..] {
                    acc = merge_two(&acc, &part.entries);
                }
                let total = compensated_sum(acc.iter().map(|&(_, m)| m));
                Self { entries: acc, total }
            }
        }
    }

    /// Add `mass` at `index`, creating the entry if absent.
    pub fn add(&mut self, index: u32, mass: f64) {
        match self.entries.binary_search_by_key(&index, |&(i, _)| i) {
            Ok(pos) => self.entries[pos].1 += mass,
            Err(pos) => self.entries.insert(pos, (index, mass)),
        }
        self.total = compensated_sum(self.entries.iter().map(|&(_, m)| m));
    }

    pub(crate) fn set_entries_raw(&mut self, entries: Vec<(u32, f64)>) {
        self.total = compensated_sum(entries.iter().map(|&(_, m)| m));
        self.entries = entries;
    }
}

fn merge_two(a: &[(u32, f64)], b: &[(u32, f64)]) -> Vec<(u32, f64)> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push((a[i].0, a[i].1 + b[j].1));
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Transport cost between X and Y support points.
///
/// Image problems use the squared Euclidean distance between grid embeddings;
/// worst-case instances carry an explicit dense matrix.
#[derive(Debug, Clone)]
pub enum CostOracle {
    SqEuclidean { x: GridGeometry, y: GridGeometry },
    Dense(DenseMatrix),
}

impl CostOracle {
    pub fn dense(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let m = DenseMatrix::new(rows, cols, data)?;
        for &c in &m.data {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::Validation(format!("cost entries must be finite and >= 0, got {c}")));
            }
        }
        Ok(CostOracle::Dense(m))
    }

    pub fn cost(&self, x: usize, y: usize) -> f64 {
        match self {
            CostOracle::SqEuclidean { x: gx, y: gy } => gx.sq_dist(x, gy, y),
            CostOracle::Dense(m) => m.get(x, y),
        }
    }

    /// Upper bound on the cost over the full product of supports.
    pub fn sup_bound(&self) -> f64 {
        match self {
            CostOracle::SqEuclidean { x, y } => {
                let ex = (x.side() - 1) as f64 * x.spacing();
                let ey = (y.side() - 1) as f64 * y.spacing();
                let e = ex.max(ey);
                2.0 * e * e
            }
            CostOracle::Dense(m) => m.data.iter().copied().fold(0.0, f64::max),
        }
    }

    /// (X size, Y size) of the product space.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            CostOracle::SqEuclidean { x, y } => (x.len(), y.len()),
            CostOracle::Dense(m) => (m.rows, m.cols),
        }
    }
}

/// Dense row-major matrix. Used for worst-case couplings and small kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn sum(&self) -> f64 {
        compensated_sum(self.data.iter().copied())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// The reference measure `K = exp(-c/eps) * (mu (x) nu)` of the entropic problem.
#[derive(Debug, Clone, Copy)]
pub struct KernelRef<'a> {
    pub cost: &'a CostOracle,
    pub mu: &'a DiscreteMeasure,
    pub nu: &'a DiscreteMeasure,
    pub epsilon: f64,
}

impl<'a> KernelRef<'a> {
    pub fn new(cost: &'a CostOracle, mu: &'a DiscreteMeasure, nu: &'a DiscreteMeasure, epsilon: f64) -> Result<Self> {
        let (nx, ny) = cost.shape();
        if mu.len() != nx || nu.len() != ny {
            return Err(Error::Shape(format!(
                "cost is {nx}x{ny} but measures have {} and {} points",
                mu.len(),
                nu.len()
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { cost, mu, nu, epsilon })
    }

    /// Total mass of the reference measure.
    pub fn mass(&self) -> f64 {
        self.mass_and_scaled_mass(None, None).0
    }

    /// One dense pass over the rows in `x_range` returning partial sums of
    /// `(|K|, integral of (u (x) v) dK)` for potentials `alpha = eps log u`,
    /// `beta = eps log v`.
    pub fn block_mass(
        &self,
        x_range: std::ops::Range<usize>,
        alpha: Option<&[f64]>,
        beta: Option<&[f64]>,
    ) -> (f64, f64) {
        let (_, ny) = self.cost.shape();
        let inv_eps = 1.0 / self.epsilon;
        let mut k_sum = KahanSum::new();
        let mut uv_sum = KahanSum::new();
        for x in x_range {
            let mx = self.mu.get(x);
            if mx == 0.0 {
                continue;
            }
            let a = alpha.map_or(0.0, |a| a[x]);
            let mut row_k = 0.0;
            let mut row_uv = 0.0;
            for y in 0..ny {
                let my = self.nu.get(y);
                if my == 0.0 {
                    continue;
                }
                let c = self.cost.cost(x, y);
                let k = (-c * inv_eps).exp() * my;
                row_k += k;
                if alpha.is_some() {
                    let b = beta.map_or(0.0, |b| b[y]);
                    row_uv += ((a + b - c) * inv_eps).exp() * my;
                }
            }
            k_sum.add(row_k * mx);
            uv_sum.add(row_uv * mx);
        }
        if alpha.is_some() {
            (k_sum.value(), uv_sum.value())
        } else {
            (k_sum.value(), k_sum.value())
        }
    }

    /// Full-product version of [`KernelRef::block_mass`].
    pub fn mass_and_scaled_mass(&self, alpha: Option<&[f64]>, beta: Option<&[f64]>) -> (f64, f64) {
        let (nx, _) = self.cost.shape();
        self.block_mass(0..nx, alpha, beta)
    }

    /// Materialize the reference measure as a dense matrix (small instances only).
    pub fn to_dense(&self) -> DenseMatrix {
        let (nx, ny) = self.cost.shape();
        let inv_eps = 1.0 / self.epsilon;
        let mut out = DenseMatrix::zeros(nx, ny);
        for x in 0..nx {
            for y in 0..ny {
                let v = (-self.cost.cost(x, y) * inv_eps).exp() * self.mu.get(x) * self.nu.get(y);
                out.set(x, y, v);
            }
        }
        out
    }
}

/// Truncated sparse block of the stabilized kernel of one sub-problem.
///
/// `value` holds `(u (x) v) * k` for the current potentials, so the coupling
/// density against `mu (x) nu` is read off directly. The truncation rule keeps
/// an entry iff `value >= theta`.
#[derive(Debug, Clone)]
pub struct KernelBlock {
    /// Global X indices of the block rows.
    pub x_ids: Vec<u32>,
    /// Global Y indices of the block columns.
    pub y_ids: Vec<u32>,
    /// Entries `(x_local, y_local, value)` in row-major order.
    pub entries: Vec<(u32, u32, f64)>,
    pub epsilon: f64,
}

impl KernelBlock {
    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }
}

/// The integrand of the Kullback-Leibler divergence:
/// `phi(s) = s log s - s + 1` for `s > 0`, `phi(0) = 1`, `+inf` outside `[0, inf)`.
pub fn phi(s: f64) -> f64 {
    if s > 0.0 {
        s * s.ln() - s + 1.0
    } else if s == 0.0 {
        1.0
    } else {
        f64::INFINITY
    }
}

/// `KL(pi | reference)` over dense couplings on the same index space.
///
/// Returns `+inf` when `pi` carries mass outside the support of `reference`.
pub fn kl_divergence(pi: &DenseMatrix, reference: &DenseMatrix) -> Result<f64> {
    if pi.rows != reference.rows || pi.cols != reference.cols {
        return Err(Error::Shape(format!(
            "coupling is {}x{} but reference is {}x{}",
            pi.rows, pi.cols, reference.rows, reference.cols
        )));
    }
    let mut sum = KahanSum::new();
    for (p, r) in pi.data.iter().zip(reference.data.iter()) {
        if *r == 0.0 {
            if *p != 0.0 {
                return Ok(f64::INFINITY);
            }
            continue;
        }
        if *p < 0.0 {
            return Ok(f64::INFINITY);
        }
        sum.add(phi(p / r) * r);
    }
    Ok(sum.value())
}

/// The dual objective
/// `J(u, v) = <mu_hat, log u> + <nu_hat, log v> - integral of u(x)v dK + |K|`
/// evaluated from the absorbed potentials `alpha = eps log u`, `beta = eps log v`.
///
/// A non-finite potential on a positive-mass point yields `-inf` (a valid,
/// vacuous dual bound) rather than an error.
pub fn dual_score(
    alpha: &[f64],
    beta: &[f64],
    mu_hat: &DiscreteMeasure,
    nu_hat: &DiscreteMeasure,
    kernel: &KernelRef,
) -> f64 {
    let inv_eps = 1.0 / kernel.epsilon;
    let mut lin = KahanSum::new();
    for (x, &a) in alpha.iter().enumerate() {
        let m = mu_hat.get(x);
        if m > 0.0 {
            if !a.is_finite() {
                return f64::NEG_INFINITY;
            }
            lin.add(m * a * inv_eps);
        }
    }
    for (y, &b) in beta.iter().enumerate() {
        let m = nu_hat.get(y);
        if m > 0.0 {
            if !b.is_finite() {
                return f64::NEG_INFINITY;
            }
            lin.add(m * b * inv_eps);
        }
    }
    let (k_mass, uv_mass) = kernel.mass_and_scaled_mass(Some(alpha), Some(beta));
    lin.value() - uv_mass + k_mass
}

/// Compensated (Kahan-Neumaier) accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut acc = KahanSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}
