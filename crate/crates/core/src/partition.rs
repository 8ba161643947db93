//! Basic and composite partitions of the X marginal, the induced partition
//! graph, and the evaluable contraction-rate bounds.
//!
//! Grid marginals are cut into `s x s` pixel blocks (basic cells). The two
//! overlapping composite partitions group basic cells into 2x2 blocks: the A
//! tiling is aligned with the origin, the B tiling is offset by one basic
//! cell per axis, leaving singletons in the corners and dominoes along the
//! boundaries. Chains use the interleaved pair pattern.

use crate::error::{Error, Result};
use crate::measures::{DiscreteMeasure, GridGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    A,
    B,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::A => write!(f, "A"),
            Label::B => write!(f, "B"),
        }
    }
}

/// Partition of the X index set into cells of positive mass.
#[derive(Debug, Clone)]
pub struct BasicPartition {
    cells: Vec<Vec<u32>>,
    cell_masses: Vec<f64>,
    cell_size: usize,
    /// For grid-built partitions: basic cells per axis.
    cells_per_axis: Option<usize>,
}

impl BasicPartition {
    /// Validated constructor for arbitrary cell lists (chains, custom splits).
    pub fn new(cells: Vec<Vec<u32>>, mu: &DiscreteMeasure) -> Result<Self> {
        let mut seen = vec![false; mu.len()];
        let mut cell_masses = Vec::with_capacity(cells.len());
        for (ci, cell) in cells.iter().enumerate() {
            if cell.is_empty() {
                return Err(Error::Config(format!("basic cell {ci} is empty")));
            }
            let mut mass = 0.0;
            for &i in cell {
                let i = i as usize;
                if i >= mu.len() {
                    return Err(Error::Shape(format!("index {i} out of range in cell {ci}")));
                }
                if seen[i] {
                    return Err(Error::Config(format!("index {i} appears in two basic cells")));
                }
                seen[i] = true;
                mass += mu.get(i);
            }
            if mass <= 0.0 {
                return Err(Error::Config(format!("basic cell {ci} has zero mass")));
            }
            cell_masses.push(mass);
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::Config("basic cells do not cover the index set".into()));
        }
        Ok(Self {
            cells,
            cell_masses,
            cell_size: 0,
            cells_per_axis: None,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, i: usize) -> &[u32] {
        &self.cells[i]
    }

    pub fn cells(&self) -> &[Vec<u32>] {
        &self.cells
    }

    pub fn cell_mass(&self, i: usize) -> f64 {
        self.cell_masses[i]
    }

    pub fn cell_masses(&self) -> &[f64] {
        &self.cell_masses
    }

    pub fn cell_size(&self) -> usize {
        self.cell_size
    }

    pub fn cells_per_axis(&self) -> Option<usize> {
        self.cells_per_axis
    }

    /// Grid position `(row, col)` of a basic cell, for grid-built partitions.
    pub fn cell_position(&self, i: usize) -> Option<(usize, usize)> {
        self.cells_per_axis.map(|m| (i / m, i % m))
    }
}

/// Grouping of basic cells solved jointly in one sweep.
#[derive(Debug, Clone)]
pub struct CompositePartition {
    label: Label,
    groups: Vec<Vec<usize>>,
}

impl CompositePartition {
    pub fn new(label: Label, groups: Vec<Vec<usize>>, cell_count: usize) -> Result<Self> {
        let mut seen = vec![false; cell_count];
        for group in &groups {
            if group.is_empty() {
                return Err(Error::Config("empty composite group".into()));
            }
            for &i in group {
                if i >= cell_count {
                    return Err(Error::Shape(format!("basic cell {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::Config(format!("basic cell {i} appears in two groups")));
                }
                seen[i] = true;
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::Config("composite groups do not cover all basic cells".into()));
        }
        Ok(Self { label, groups })
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, j: usize) -> &[usize] {
        &self.groups[j]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Group index containing basic cell `i`.
    pub fn group_of(&self, i: usize) -> usize {
        for (j, g) in self.groups.iter().enumerate() {
            if g.contains(&i) {
                return j;
            }
        }
        unreachable!("composite partition covers all basic cells")
    }
}

/// Graph on basic cells with edges induced by shared composite cells, plus
/// breadth-first cell distances from the root composite cell.
#[derive(Debug, Clone)]
pub struct PartitionGraph {
    vertex_count: usize,
    /// `(i, j, label, group)` with `i < j`; one edge per inducing composite cell.
    edges: Vec<(usize, usize, Label, usize)>,
    root_group: Vec<usize>,
    distance: Vec<usize>,
    diameter: usize,
}

impl PartitionGraph {
    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn edges(&self) -> &[(usize, usize, Label, usize)] {
        &self.edges
    }

    pub fn root_group(&self) -> &[usize] {
        &self.root_group
    }

    pub fn distance(&self, i: usize) -> usize {
        self.distance[i]
    }

    pub fn distances(&self) -> &[usize] {
        &self.distance
    }

    /// `M`, the maximum cell distance from the root.
    pub fn diameter(&self) -> usize {
        self.diameter
    }
}

/// Axis grouping for the A tiling: pairs from the start, trailing singleton
/// for odd counts.
fn axis_groups_a(m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < m {
        if i + 1 < m {
            out.push(vec![i, i + 1]);
            i += 2;
        } else {
            out.push(vec![i]);
            i += 1;
        }
    }
    out
}

/// Axis grouping for the B tiling: singleton at the start, then pairs,
/// trailing singleton when the count is even.
fn axis_groups_b(m: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0]];
    let mut i = 1;
    while i < m {
        if i + 1 < m {
            out.push(vec![i, i + 1]);
            i += 2;
        } else {
            out.push(vec![i]);
            i += 1;
        }
    }
    out
}

/// Build the basic `s x s` block partition of a grid marginal together with
/// the two offset composite tilings.
pub fn build_grid_partitions(
    geometry: &GridGeometry,
    mu: &DiscreteMeasure,
    cell_size: usize,
) -> Result<(BasicPartition, CompositePartition, CompositePartition)> {
    let side = geometry.side();
    if mu.len() != geometry.len() {
        return Err(Error::Shape(format!(
            "measure has {} points but grid has {}",
            mu.len(),
            geometry.len()
        )));
    }
    if cell_size == 0 || side % cell_size != 0 {
        return Err(Error::Config(format!(
            "cell size {cell_size} does not divide grid side {side}"
        )));
    }
    let m = side / cell_size;
    if m < 2 {
        return Err(Error::Config(format!(
            "cell size {cell_size} yields a single basic cell on side {side}; no overlapping tilings exist"
        )));
    }

    let mut cells = Vec::with_capacity(m * m);
    let mut cell_masses = Vec::with_capacity(m * m);
    for cr in 0..m {
        for cc in 0..m {
            let mut cell = Vec::with_capacity(cell_size * cell_size);
            let mut mass = 0.0;
            for r in cr * cell_size..(cr + 1) * cell_size {
                for c in cc * cell_size..(cc + 1) * cell_size {
                    let idx = r * side + c;
                    cell.push(idx as u32);
                    mass += mu.get(idx);
                }
            }
            if mass <= 0.0 {
                return Err(Error::Config(format!(
                    "basic cell ({cr},{cc}) has zero mass; apply a mass floor at ingestion"
                )));
            }
            cells.push(cell);
            cell_masses.push(mass);
        }
    }
    let basic = BasicPartition {
        cells,
        cell_masses,
        cell_size,
        cells_per_axis: Some(m),
    };

    let cross = |rows: Vec<Vec<usize>>, cols: Vec<Vec<usize>>| -> Vec<Vec<usize>> {
        let mut groups = Vec::with_capacity(rows.len() * cols.len());
        for rg in &rows {
            for cg in &cols {
                let mut group = Vec::with_capacity(rg.len() * cg.len());
                for &r in rg {
                    for &c in cg {
                        group.push(r * m + c);
                    }
                }
                groups.push(group);
            }
        }
        groups
    };

    let comp_a = CompositePartition::new(Label::A, cross(axis_groups_a(m), axis_groups_a(m)), m * m)?;
    let comp_b = CompositePartition::new(Label::B, cross(axis_groups_b(m), axis_groups_b(m)), m * m)?;
    Ok((basic, comp_a, comp_b))
}

/// Interleaved pair partitions over a chain of `n` singleton cells:
/// `A = {{0,1},{2,3},...}`, `B = {{0},{1,2},...}` (trailing cells adapted).
pub fn build_chain_partitions(
    n: usize,
    mu: &DiscreteMeasure,
) -> Result<(BasicPartition, CompositePartition, CompositePartition)> {
    if n < 3 {
        return Err(Error::Config(format!("chain needs at least 3 cells, got {n}")));
    }
    if mu.len() != n {
        return Err(Error::Shape(format!("measure has {} points, chain has {n}", mu.len())));
    }
    let cells: Vec<Vec<u32>> = (0..n as u32).map(|i| vec![i]).collect();
    let basic = BasicPartition::new(cells, mu)?;
    let comp_a = CompositePartition::new(Label::A, axis_groups_a(n), n)?;
    let comp_b = CompositePartition::new(Label::B, axis_groups_b(n), n)?;
    Ok((basic, comp_a, comp_b))
}

/// Edge set, breadth-first distances from the root composite cell, and the
/// diameter `M`. Rejects pairs covered by both tilings and disconnected graphs.
pub fn build_partition_graph(
    basic: &BasicPartition,
    comp_a: &CompositePartition,
    comp_b: &CompositePartition,
    root: usize,
) -> Result<PartitionGraph> {
    let n = basic.cell_count();
    if root >= comp_a.group_count() {
        return Err(Error::Config(format!("root group {root} out of range")));
    }

    let mut edges = Vec::new();
    let mut pair_label = std::collections::BTreeMap::new();
    for (part, label) in [(comp_a, Label::A), (comp_b, Label::B)] {
        for (gi, group) in part.groups().iter().enumerate() {
            for (k, &i) in group.iter().enumerate() {
                for &j in &group[k + 1..] {
                    let key = (i.min(j), i.max(j));
                    if let Some(prev) = pair_label.insert(key, label) {
                        if prev != label {
                            return Err(Error::Config(format!(
                                "basic cells {} and {} share both an A and a B composite cell; merge them",
                                key.0, key.1
                            )));
                        }
                    }
                    edges.push((key.0, key.1, label, gi));
                }
            }
        }
    }

    let mut adjacency = vec![Vec::new(); n];
    for &(i, j, _, _) in &edges {
        adjacency[i].push(j);
        adjacency[j].push(i);
    }

    let mut distance = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    for &i in comp_a.group(root) {
        distance[i] = 0;
        queue.push_back(i);
    }
    while let Some(i) = queue.pop_front() {
        for &j in &adjacency[i] {
            if distance[j] == usize::MAX {
                distance[j] = distance[i] + 1;
                queue.push_back(j);
            }
        }
    }
    if distance.iter().any(|&d| d == usize::MAX) {
        return Err(Error::Disconnected(
            "partition graph is disconnected; the sweep would not converge globally".into(),
        ));
    }
    let diameter = distance.iter().copied().max().unwrap_or(0);

    Ok(PartitionGraph {
        vertex_count: n,
        edges,
        root_group: comp_a.group(root).to_vec(),
        distance,
        diameter,
    })
}

/// Evaluable contraction-factor upper bounds.
#[derive(Debug, Clone, Copy)]
pub struct RateBounds {
    /// Three-cell per-sweep bound; present only for the interleaved
    /// three-cell shape `A = {{0,1},{2}}`, `B = {{0},{1,2}}`.
    pub three_cell: Option<f64>,
    /// General bound comparing suboptimality `M` sweeps apart. Rounds to 1.0
    /// once the complement drops below machine precision; `n_cell_complement`
    /// keeps the value strictly inside (0, 1) whenever it mathematically is.
    pub n_cell: f64,
    /// `1 - n_cell` evaluated stably: `mu_min^(2M+1) / (mu_min^(2M+1) + 2MN e^...)`.
    pub n_cell_complement: f64,
    /// Set when even the complement underflows and the bound is vacuous.
    pub n_cell_vacuous: bool,
}

/// Evaluate the per-sweep three-cell bound
/// `(1 + exp(-2|c|/eps) * m_mid / m_outer)^-1`
/// and the general `M`-sweep bound
/// `2MN e^((6M+7)|c|/eps) / (mu_min^(2M+1) + 2MN e^((6M+7)|c|/eps))`.
///
/// The general bound is formed in log space, so the exponential never
/// overflows; when the complement underflows the bound is reported as 1
/// and flagged vacuous.
pub fn rate_bounds(
    graph: &PartitionGraph,
    masses: &[f64],
    comp_a: &CompositePartition,
    comp_b: &CompositePartition,
    c_norm: f64,
    eps: f64,
) -> Result<RateBounds> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
    }
    if masses.len() != graph.vertex_count() {
        return Err(Error::Shape(format!(
            "{} masses for {} vertices",
            masses.len(),
            graph.vertex_count()
        )));
    }

    let three_cell = if masses.len() == 3
        && comp_a.groups() == [vec![0, 1], vec![2]]
        && comp_b.groups() == [vec![0], vec![1, 2]]
    {
        let q = masses[1];
        let outer = masses[0] + masses[2];
        Some(1.0 / (1.0 + (-2.0 * c_norm / eps).exp() * q / outer))
    } else {
        None
    };

    let m = graph.diameter() as f64;
    let n = graph.vertex_count() as f64;
    let mu_min = masses.iter().copied().fold(f64::INFINITY, f64::min);
    // bound = 1 / (1 + exp(t)), complement = exp(t) / (1 + exp(t)), with
    // t = (2M+1) ln(mu_min) - ln(2MN) - (6M+7)|c|/eps.
    let (n_cell, n_cell_complement, n_cell_vacuous) = if m == 0.0 {
        // Root covers the whole graph; a single sweep solves exactly and the
        // formula degenerates (2MN = 0). Report 0 contraction.
        (0.0, 1.0, false)
    } else {
        let t = (2.0 * m + 1.0) * mu_min.ln() - (2.0 * m * n).ln() - (6.0 * m + 7.0) * c_norm / eps;
        let et = t.exp();
        let b = 1.0 / (1.0 + et);
        let complement = if t <= 0.0 { et / (1.0 + et) } else { 1.0 - b };
        (b, complement, complement <= 0.0)
    };

    Ok(RateBounds {
        three_cell,
        n_cell,
        n_cell_complement,
        n_cell_vacuous,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize) -> DiscreteMeasure {
        DiscreteMeasure::uniform(n)
    }

    #[test]
    fn grid_side8_cell4() {
        let g = GridGeometry::new(8, 1.0).unwrap();
        let mu = uniform(64);
        let (basic, a, b) = build_grid_partitions(&g, &mu, 4).unwrap();
        assert_eq!(basic.cell_count(), 4);
        assert_eq!(a.groups(), &[vec![0, 1, 2, 3]]);
        assert_eq!(b.groups(), &[vec![0], vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn grid_side16_cell4() {
        let g = GridGeometry::new(16, 1.0).unwrap();
        let mu = uniform(256);
        let (basic, a, b) = build_grid_partitions(&g, &mu, 4).unwrap();
        assert_eq!(basic.cell_count(), 16);
        assert_eq!(a.group_count(), 4);
        assert_eq!(b.group_count(), 9);
        let sizes = |p: &CompositePartition| {
            let mut v: Vec<usize> = p.groups().iter().map(|g| g.len()).collect();
            v.sort_unstable();
            v
        };
        assert_eq!(sizes(&a), vec![4, 4, 4, 4]);
        // 4 singleton corners, 4 boundary dominoes, 1 interior 2x2.
        assert_eq!(sizes(&b), vec![1, 1, 1, 1, 2, 2, 2, 2, 4]);
    }

    #[test]
    fn grid_single_cell_rejected() {
        let g = GridGeometry::new(8, 1.0).unwrap();
        let mu = uniform(64);
        assert!(build_grid_partitions(&g, &mu, 8).is_err());
        assert!(build_grid_partitions(&g, &mu, 3).is_err());
    }

    #[test]
    fn chain_patterns() {
        let (_, a, b) = build_chain_partitions(4, &uniform(4)).unwrap();
        assert_eq!(a.groups(), &[vec![0, 1], vec![2, 3]]);
        assert_eq!(b.groups(), &[vec![0], vec![1, 2], vec![3]]);

        let (_, a, b) = build_chain_partitions(3, &uniform(3)).unwrap();
        assert_eq!(a.groups(), &[vec![0, 1], vec![2]]);
        assert_eq!(b.groups(), &[vec![0], vec![1, 2]]);

        let (_, a, b) = build_chain_partitions(5, &uniform(5)).unwrap();
        assert_eq!(a.groups(), &[vec![0, 1], vec![2, 3], vec![4]]);
        assert_eq!(b.groups(), &[vec![0], vec![1, 2], vec![3, 4]]);

        assert!(build_chain_partitions(2, &uniform(2)).is_err());
    }

    #[test]
    fn chain_distances() {
        let mu = uniform(4);
        let (basic, a, b) = build_chain_partitions(4, &mu).unwrap();
        let graph = build_partition_graph(&basic, &a, &b, 0).unwrap();
        assert_eq!(graph.distances(), &[0, 0, 1, 2]);
        assert_eq!(graph.diameter(), 2);
    }

    #[test]
    fn three_cell_distances() {
        let mu = uniform(3);
        let (basic, a, b) = build_chain_partitions(3, &mu).unwrap();
        let graph = build_partition_graph(&basic, &a, &b, 0).unwrap();
        assert_eq!(graph.distances(), &[0, 0, 1]);
        assert_eq!(graph.diameter(), 1);
    }

    #[test]
    fn root_covering_everything_gives_zero_distances() {
        let mu = uniform(3);
        let cells: Vec<Vec<u32>> = (0..3u32).map(|i| vec![i]).collect();
        let basic = BasicPartition::new(cells, &mu).unwrap();
        let a = CompositePartition::new(Label::A, vec![vec![0, 1, 2]], 3).unwrap();
        let b = CompositePartition::new(Label::B, vec![vec![0], vec![1], vec![2]], 3).unwrap();
        let graph = build_partition_graph(&basic, &a, &b, 0).unwrap();
        assert_eq!(graph.distances(), &[0, 0, 0]);
        assert_eq!(graph.diameter(), 0);
    }

    #[test]
    fn shared_pair_rejected() {
        let mu = uniform(4);
        let cells: Vec<Vec<u32>> = (0..4u32).map(|i| vec![i]).collect();
        let basic = BasicPartition::new(cells, &mu).unwrap();
        let a = CompositePartition::new(Label::A, vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let b = CompositePartition::new(Label::B, vec![vec![0, 1], vec![2], vec![3]], 4).unwrap();
        assert!(build_partition_graph(&basic, &a, &b, 0).is_err());
    }

    #[test]
    fn three_cell_bound_values() {
        let mu = DiscreteMeasure::new(vec![0.35, 0.3, 0.35]).unwrap();
        let (basic, a, b) = build_chain_partitions(3, &mu).unwrap();
        let graph = build_partition_graph(&basic, &a, &b, 0).unwrap();

        let bounds = rate_bounds(&graph, basic.cell_masses(), &a, &b, 10.0, 10.0).unwrap();
        let expect = 1.0 / (1.0 + (-2.0f64).exp() * 0.3 / 0.7);
        let got = bounds.three_cell.unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.94517).abs() < 1e-4);

        // eps -> infinity limit: exp term -> 1, bound -> (1 + 3/7)^-1 = 0.7.
        let limit = rate_bounds(&graph, basic.cell_masses(), &a, &b, 10.0, 1e18).unwrap();
        assert!((limit.three_cell.unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn n_cell_bound_range_and_monotonicity() {
        let mu = uniform(4);
        let (basic, a, b) = build_chain_partitions(4, &mu).unwrap();
        let graph = build_partition_graph(&basic, &a, &b, 0).unwrap();
        let masses = basic.cell_masses();

        let at = |eps: f64| rate_bounds(&graph, masses, &a, &b, 10.0, eps).unwrap();
        // N = 4, M = 2, mu_min = 1/4, |c| = 10, eps = 1.4: the value lies in
        // (0,1); in f64 the bound itself rounds to 1 and the complement
        // carries the distance from 1.
        let b14 = at(1.4);
        assert!(b14.n_cell > 0.0 && b14.n_cell <= 1.0);
        assert!(
            b14.n_cell_complement > 0.0 && b14.n_cell_complement < 1.0,
            "complement {} outside (0,1)",
            b14.n_cell_complement
        );
        assert!(!b14.n_cell_vacuous);
        // Bound increases toward 1 as eps decreases: complement decreases.
        let mut prev = at(8.0).n_cell_complement;
        for &eps in &[4.0, 2.0, 1.4, 1.0] {
            let cur = at(eps).n_cell_complement;
            assert!(cur <= prev, "bound not increasing as eps decreases");
            prev = cur;
        }
        // Strongly stressed regime is vacuous but never overflows.
        let stressed = rate_bounds(&graph, masses, &a, &b, 1e6, 1e-6).unwrap();
        assert_eq!(stressed.n_cell, 1.0);
        assert!(stressed.n_cell_vacuous);
    }

    #[test]
    fn partition_masses_sum_to_total() {
        let g = GridGeometry::new(16, 1.0).unwrap();
        let mu = DiscreteMeasure::new((0..256).map(|i| (i % 7 + 1) as f64).collect())
            .unwrap()
            .normalized()
            .unwrap();
        let (basic, _, _) = build_grid_partitions(&g, &mu, 4).unwrap();
        let total: f64 = basic.cell_masses().iter().sum();
        assert!((total - mu.total_mass()).abs() < 1e-12);
    }

    #[test]
    fn distance_is_graph_lipschitz() {
        for side in [8usize, 16, 32] {
            let g = GridGeometry::new(side, 1.0).unwrap();
            let mu = uniform(side * side);
            let (basic, a, b) = build_grid_partitions(&g, &mu, 4).unwrap();
            if basic.cell_count() < 4 {
                continue;
            }
            let graph = build_partition_graph(&basic, &a, &b, 0).unwrap();
            for &(i, j, _, _) in graph.edges() {
                let di = graph.distance(i) as i64;
                let dj = graph.distance(j) as i64;
                assert!((di - dj).abs() <= 1, "edge ({i},{j}) jumps distance");
            }
        }
    }

    #[test]
    fn ab_exclusivity_on_grids() {
        for side in [16usize, 32, 64] {
            let g = GridGeometry::new(side, 1.0).unwrap();
            let mu = uniform(side * side);
            let (basic, a, b) = build_grid_partitions(&g, &mu, 4).unwrap();
            // build_partition_graph errors if any pair co-occurs in A and B.
            build_partition_graph(&basic, &a, &b, 0).unwrap();
        }
    }

    #[test]
    fn grid_refinement_maps_fine_cells_into_coarse() {
        // Splitting each basic cell into four children at the next layer must
        // map every fine cell into exactly one coarse cell.
        let gc = GridGeometry::new(8, 2.0).unwrap();
        let gf = GridGeometry::new(16, 1.0).unwrap();
        let (coarse, _, _) = build_grid_partitions(&gc, &uniform(64), 4).unwrap();
        let (fine, _, _) = build_grid_partitions(&gf, &uniform(256), 4).unwrap();
        for fc in 0..fine.cell_count() {
            let mut parents = std::collections::BTreeSet::new();
            for &pix in fine.cell(fc) {
                let (r, c) = ((pix as usize) / 16, (pix as usize) % 16);
                let coarse_pix = (r / 2) * 8 + (c / 2);
                for cc in 0..coarse.cell_count() {
                    if coarse.cell(cc).contains(&(coarse_pix as u32)) {
                        parents.insert(cc);
                    }
                }
            }
            assert_eq!(parents.len(), 1, "fine cell {fc} spans {parents:?}");
        }
    }
}
