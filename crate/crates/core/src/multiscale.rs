//! Quad-tree hierarchy over image marginals, coarse-to-fine refinement of
//! basic marginals and dual potentials, and the epsilon schedule.
//!
//! Images of side `2^n` are summed down to side 8 (level 3). Pixel `(r, c)`
//! at one level is the parent of the four pixels `(2r.., 2c..)` below it, and
//! basic partitions are chosen so that every fine basic cell refines exactly
//! one coarse basic cell.

use crate::engine::CellState;
use crate::error::{Error, Result};
use crate::measures::{DiscreteMeasure, GridGeometry, SparseMarginal};
use crate::partition::{build_grid_partitions, BasicPartition, CompositePartition};

/// One resolution level of the hierarchy.
#[derive(Debug, Clone)]
pub struct Layer {
    /// Dyadic level `l`; the grid has side `2^l`.
    pub level: usize,
    pub geometry: GridGeometry,
    pub mu: DiscreteMeasure,
    pub nu: DiscreteMeasure,
    pub basic: BasicPartition,
    pub comp_a: CompositePartition,
    pub comp_b: CompositePartition,
    pub cell_size: usize,
}

#[derive(Debug, Clone)]
pub struct MultiscaleHierarchy {
    /// Layers ordered coarse to fine; `layers[0]` is level 3.
    pub layers: Vec<Layer>,
    /// Finest dyadic level `n`.
    pub finest_level: usize,
}

impl MultiscaleHierarchy {
    pub fn finest(&self) -> &Layer {
        self.layers.last().expect("hierarchy has at least one layer")
    }
}

/// Sum a `side x side` image down to `side/2 x side/2` by 2x2 blocks.
fn coarsen(weights: &[f64], side: usize) -> Vec<f64> {
    let half = side / 2;
    let mut out = vec![0.0; half * half];
    for r in 0..half {
        for c in 0..half {
            let (r2, c2) = (2 * r, 2 * c);
            out[r * half + c] = weights[r2 * side + c2]
                + weights[r2 * side + c2 + 1]
                + weights[(r2 + 1) * side + c2]
                + weights[(r2 + 1) * side + c2 + 1];
        }
    }
    out
}

/// Parent pixel index one level up.
pub fn parent_pixel(fine_side: usize, index: u32) -> u32 {
    let r = index as usize / fine_side;
    let c = index as usize % fine_side;
    ((r / 2) * (fine_side / 2) + c / 2) as u32
}

/// The four children of a coarse pixel one level down.
pub fn child_pixels(coarse_side: usize, index: u32) -> [u32; 4] {
    let r = index as usize / coarse_side;
    let c = index as usize % coarse_side;
    let fine_side = 2 * coarse_side;
    let (r2, c2) = (2 * r, 2 * c);
    [
        (r2 * fine_side + c2) as u32,
        (r2 * fine_side + c2 + 1) as u32,
        ((r2 + 1) * fine_side + c2) as u32,
        ((r2 + 1) * fine_side + c2 + 1) as u32,
    ]
}

/// Coarse basic cell refined by a fine basic cell, from the two layers'
/// cells-per-axis counts (the ratio is 1 or 2 by construction).
pub fn parent_cell(fine: &BasicPartition, coarse: &BasicPartition, fine_cell: usize) -> usize {
    let mf = fine.cells_per_axis().expect("grid partition");
    let mc = coarse.cells_per_axis().expect("grid partition");
    let (r, c) = (fine_cell / mf, fine_cell % mf);
    if mf == mc {
        r * mc + c
    } else {
        debug_assert_eq!(mf, 2 * mc);
        (r / 2) * mc + c / 2
    }
}

/// Build the layered hierarchy for a pair of images on a `2^n` grid.
///
/// Basic cells at level `l` have size `min(cell_size, 2^(l-1))`, so every
/// layer keeps at least a 2x2 arrangement of basic cells and each fine cell
/// refines exactly one coarse cell.
pub fn build_hierarchy(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    side: usize,
    cell_size: usize,
) -> Result<MultiscaleHierarchy> {
    if !side.is_power_of_two() || side < 8 {
        return Err(Error::Config(format!(
            "image side must be a power of two >= 8, got {side}"
        )));
    }
    if mu.len() != side * side || nu.len() != side * side {
        return Err(Error::Shape("images do not match the stated side".into()));
    }
    if cell_size == 0 || !cell_size.is_power_of_two() {
        return Err(Error::Config(format!(
            "cell size must be a power of two >= 1, got {cell_size}"
        )));
    }
    let n = side.trailing_zeros() as usize;

    // Coarsen both images down to level 3.
    let mut mu_levels = vec![mu.weights().to_vec()];
    let mut nu_levels = vec![nu.weights().to_vec()];
    let mut s = side;
    while s > 8 {
        mu_levels.push(coarsen(mu_levels.last().unwrap(), s));
        nu_levels.push(coarsen(nu_levels.last().unwrap(), s));
        s /= 2;
    }
    mu_levels.reverse();
    nu_levels.reverse();

    let mut layers = Vec::with_capacity(n - 2);
    for (k, level) in (3..=n).enumerate() {
        let layer_side = 1usize << level;
        let spacing = f64::powi(2.0, (n - level) as i32);
        let geometry = GridGeometry::new(layer_side, spacing)?;
        let mu_l = DiscreteMeasure::new(mu_levels[k].clone())?;
        let nu_l = DiscreteMeasure::new(nu_levels[k].clone())?;
        let s_l = cell_size.min(layer_side / 2);
        let (basic, comp_a, comp_b) = build_grid_partitions(&geometry, &mu_l, s_l)?;
        layers.push(Layer {
            level,
            geometry,
            mu: mu_l,
            nu: nu_l,
            basic,
            comp_a,
            comp_b,
            cell_size: s_l,
        });
    }
    Ok(MultiscaleHierarchy {
        layers,
        finest_level: n,
    })
}

/// Initialize the fine basic marginals from a feasible coarse state:
/// `nu_i(y) = nu(y) * nu_parent(pa(y)) / nu_coarse(pa(y)) * |mu_i| / |mu_parent|`,
/// with the `0/0 = 0` convention for empty coarse points. The result sums to
/// `nu` pointwise and gives every fine cell exactly its basic mass.
pub fn refine_marginals(
    coarse_state: &CellState,
    hierarchy: &MultiscaleHierarchy,
    coarse_index: usize,
) -> Result<CellState> {
    let coarse = &hierarchy.layers[coarse_index];
    let fine = hierarchy
        .layers
        .get(coarse_index + 1)
        .ok_or_else(|| Error::Config("no finer layer to refine into".into()))?;
    coarse_state.check_feasible(&coarse.basic, &coarse.nu, 1e-7)?;

    let coarse_side = coarse.geometry.side();
    let mut marginals = Vec::with_capacity(fine.basic.cell_count());
    for i in 0..fine.basic.cell_count() {
        let j = parent_cell(&fine.basic, &coarse.basic, i);
        let mass_ratio = fine.basic.cell_mass(i) / coarse.basic.cell_mass(j);
        let coarse_marginal = &coarse_state.marginals[j];
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(4 * coarse_marginal.len());
        for &(yc, m_hat) in coarse_marginal.entries() {
            let denom = coarse.nu.get(yc as usize);
            if denom == 0.0 {
                continue;
            }
            let ratio = m_hat / denom;
            for y in child_pixels(coarse_side, yc) {
                let w = fine.nu.get(y as usize);
                if w > 0.0 {
                    entries.push((y, w * ratio * mass_ratio));
                }
            }
        }
        marginals.push(SparseMarginal::from_entries(entries)?);
    }
    Ok(CellState::new(
        marginals,
        fine.comp_a.group_count(),
        fine.comp_b.group_count(),
        coarse_state.epsilon,
    ))
}

/// Bilinear interpolation of a per-pixel potential onto the twice-finer grid
/// (performed directly on the absorbed log-potentials). Fine pixels at coarse
/// sample positions reproduce the coarse values; positions beyond the last
/// sample clamp to it.
pub fn refine_potentials(coarse_potential: &[f64], coarse_side: usize) -> Vec<f64> {
    let fine_side = 2 * coarse_side;
    let max_idx = (coarse_side - 1) as f64;
    let mut out = vec![0.0; fine_side * fine_side];
    for r in 0..fine_side {
        let pr = (r as f64 * 0.5).min(max_idx);
        let r0 = pr.floor() as usize;
        let r1 = (r0 + 1).min(coarse_side - 1);
        let fr = pr - r0 as f64;
        for c in 0..fine_side {
            let pc = (c as f64 * 0.5).min(max_idx);
            let c0 = pc.floor() as usize;
            let c1 = (c0 + 1).min(coarse_side - 1);
            let fc = pc - c0 as f64;
            let v00 = coarse_potential[r0 * coarse_side + c0];
            let v01 = coarse_potential[r0 * coarse_side + c1];
            let v10 = coarse_potential[r1 * coarse_side + c0];
            let v11 = coarse_potential[r1 * coarse_side + c1];
            out[r * fine_side + c] = v00 * (1.0 - fr) * (1.0 - fc)
                + v01 * (1.0 - fr) * fc
                + v10 * fr * (1.0 - fc)
                + v11 * fr * fc;
        }
    }
    out
}

/// Restriction of a global per-pixel potential to each composite cell's
/// concatenated pixel list, as warm starts for the next sweeps.
pub fn restrict_potential(
    potential: &[f64],
    basic: &BasicPartition,
    part: &CompositePartition,
) -> Vec<Option<Vec<f64>>> {
    part.groups()
        .iter()
        .map(|group| {
            let mut v = Vec::new();
            for &i in group {
                for &x in basic.cell(i) {
                    v.push(potential[x as usize]);
                }
            }
            Some(v)
        })
        .collect()
}

/// One stage of the epsilon schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub level: usize,
    pub epsilon: f64,
    pub sweeps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub stages: Vec<Stage>,
}

impl Schedule {
    pub fn total_sweeps(&self) -> usize {
        self.stages.iter().map(|s| s.sweeps).sum()
    }
}

/// The per-layer ladder: at level `l` with grid spacing `d = 2^(n-l)`, run
/// 4 sweeps at `eps = 2 d^2`, then 2 at `d^2`, then 2 at `d^2 / 2`; append
/// two final sweeps at `eps = 0.25` on the finest layer. Total sweep count
/// is `(n - 2) * 8 + 2`.
pub fn build_schedule(n: usize) -> Result<Schedule> {
    if n < 3 {
        return Err(Error::Config(format!("schedule needs n >= 3, got {n}")));
    }
    let mut stages = Vec::with_capacity((n - 2) * 3 + 1);
    for level in 3..=n {
        let d = f64::powi(2.0, (n - level) as i32);
        let d2 = d * d;
        stages.push(Stage {
            level,
            epsilon: 2.0 * d2,
            sweeps: 4,
        });
        stages.push(Stage {
            level,
            epsilon: d2,
            sweeps: 2,
        });
        stages.push(Stage {
            level,
            epsilon: 0.5 * d2,
            sweeps: 2,
        });
    }
    stages.push(Stage {
        level: n,
        epsilon: 0.25,
        sweeps: 2,
    });
    Ok(Schedule { stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::initialize_product_state;

    fn image(side: usize, f: impl Fn(usize) -> f64) -> DiscreteMeasure {
        DiscreteMeasure::new((0..side * side).map(f).collect())
            .unwrap()
            .with_mass_floor(1e-9)
            .unwrap()
    }

    #[test]
    fn single_layer_hierarchy_at_n3() {
        let mu = image(8, |i| (i % 5 + 1) as f64);
        let nu = image(8, |i| (i % 7 + 1) as f64);
        let h = build_hierarchy(&mu, &nu, 8, 4).unwrap();
        assert_eq!(h.layers.len(), 1);
        assert_eq!(h.finest_level, 3);
        assert_eq!(h.layers[0].cell_size, 4);
    }

    #[test]
    fn uniform_image_coarsens_uniformly() {
        let mu = DiscreteMeasure::uniform(256);
        let h = build_hierarchy(&mu, &mu, 16, 4).unwrap();
        assert_eq!(h.layers.len(), 2);
        let coarse = &h.layers[0];
        for &w in coarse.mu.weights() {
            assert!((w - 4.0 / 256.0).abs() < 1e-15);
        }
    }

    #[test]
    fn pushforward_identity_on_random_image() {
        let mu = image(16, |i| ((i * 31) % 17 + 1) as f64);
        let nu = image(16, |i| ((i * 13) % 11 + 1) as f64);
        let h = build_hierarchy(&mu, &nu, 16, 4).unwrap();
        for k in 0..h.layers.len() {
            assert!((h.layers[k].mu.total_mass() - 1.0).abs() < 1e-12);
            assert!((h.layers[k].nu.total_mass() - 1.0).abs() < 1e-12);
        }
        // Each coarse weight equals the sum of its four children.
        let (coarse, fine) = (&h.layers[0], &h.layers[1]);
        for yc in 0..coarse.nu.len() {
            let children = child_pixels(coarse.geometry.side(), yc as u32);
            let sum: f64 = children.iter().map(|&y| fine.nu.get(y as usize)).sum();
            assert!(
                (sum - coarse.nu.get(yc)).abs() < 1e-15,
                "pixel {yc}: {sum} vs {}",
                coarse.nu.get(yc)
            );
        }
    }

    #[test]
    fn layer_spacings_halve() {
        let mu = image(32, |i| (i % 3 + 1) as f64);
        let h = build_hierarchy(&mu, &mu, 32, 4).unwrap();
        let spacings: Vec<f64> = h.layers.iter().map(|l| l.geometry.spacing()).collect();
        assert_eq!(spacings, vec![4.0, 2.0, 1.0]);
    }

    #[test]
    fn refine_marginals_worked_example() {
        // Single coarse Y-point with children carrying nu = (0.6, 0.4, 0, 0),
        // coarse cell marginal 0.5 at that point, cell mass ratio 0.2/0.5.
        // Build the smallest hierarchy exhibiting those numbers directly.
        let coarse_nu = 1.0;
        let m_hat = 0.5;
        let mass_ratio = 0.2 / 0.5;
        for (child_nu, expect) in [(0.6f64, 0.12f64), (0.4, 0.08)] {
            let v = child_nu * (m_hat / coarse_nu) * mass_ratio;
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn refinement_identities_hold() {
        let mu = image(16, |i| ((i * 7) % 13 + 1) as f64);
        let nu = image(16, |i| ((i * 5) % 9 + 1) as f64);
        let h = build_hierarchy(&mu, &nu, 16, 4).unwrap();
        let coarse = &h.layers[0];
        let state = initialize_product_state(
            &coarse.basic,
            &coarse.nu,
            coarse.comp_a.group_count(),
            coarse.comp_b.group_count(),
            1.0,
        );
        let fine_state = refine_marginals(&state, &h, 0).unwrap();
        let fine = &h.layers[1];
        // |nu_i| = |mu_i| per fine cell.
        for i in 0..fine.basic.cell_count() {
            let got = fine_state.marginals[i].total_mass();
            let want = fine.basic.cell_mass(i);
            assert!(
                (got - want).abs() <= 1e-12 * want,
                "cell {i}: {got} vs {want}"
            );
        }
        // Pointwise sum equals nu.
        let refs: Vec<&SparseMarginal> = fine_state.marginals.iter().collect();
        let sum = SparseMarginal::merge_sum(&refs);
        for (y, &w) in fine.nu.weights().iter().enumerate() {
            assert!(
                (sum.get(y as u32) - w).abs() <= 1e-12 * w.max(1e-300),
                "pixel {y}"
            );
        }
    }

    #[test]
    fn refine_from_single_coarse_cell_recovers_product() {
        // When the coarse layer has one basic cell per quadrant and the state
        // is the product state, refinement reproduces the product rule.
        let mu = image(16, |i| (i % 4 + 1) as f64);
        let nu = image(16, |i| (i % 6 + 1) as f64);
        let h = build_hierarchy(&mu, &nu, 16, 4).unwrap();
        let coarse = &h.layers[0];
        let product = initialize_product_state(
            &coarse.basic,
            &coarse.nu,
            coarse.comp_a.group_count(),
            coarse.comp_b.group_count(),
            1.0,
        );
        let fine_state = refine_marginals(&product, &h, 0).unwrap();
        let fine = &h.layers[1];
        for i in 0..fine.basic.cell_count() {
            let mass = fine.basic.cell_mass(i);
            for &(y, m) in fine_state.marginals[i].entries() {
                let expect = mass * fine.nu.get(y as usize);
                assert!(
                    (m - expect).abs() <= 1e-12 * expect.max(1e-300),
                    "cell {i} at {y}: {m} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn bilinear_interpolation_properties() {
        // Constant field stays constant.
        let fine = refine_potentials(&vec![3.0; 16], 4);
        assert!(fine.iter().all(|&v| (v - 3.0).abs() < 1e-15));

        // A field linear in the row coordinate is reproduced exactly at
        // interior points (the boundary clamps extrapolation).
        let coarse: Vec<f64> = (0..16).map(|i| (i / 4) as f64).collect();
        let fine = refine_potentials(&coarse, 4);
        for r in 0..7 {
            for c in 0..8 {
                let expect = r as f64 * 0.5;
                assert!(
                    (fine[r * 8 + c] - expect).abs() < 1e-14,
                    "({r},{c}): {}",
                    fine[r * 8 + c]
                );
            }
        }

        // Coarse sample positions reproduce coarse values.
        let coarse: Vec<f64> = (0..16).map(|i| ((i * 37) % 11) as f64 * 0.173).collect();
        let fine = refine_potentials(&coarse, 4);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(fine[(2 * r) * 8 + 2 * c], coarse[r * 4 + c]);
            }
        }
    }

    #[test]
    fn schedule_sweep_counts() {
        for (n, expect) in [(3usize, 10usize), (4, 18), (5, 26), (6, 34), (7, 42), (8, 50)] {
            let s = build_schedule(n).unwrap();
            assert_eq!(s.total_sweeps(), expect, "n = {n}");
            assert_eq!(s.total_sweeps(), (n - 2) * 8 + 2);
        }
        assert!(build_schedule(2).is_err());
    }

    #[test]
    fn schedule_stage_lists_are_exact() {
        let s = build_schedule(3).unwrap();
        assert_eq!(
            s.stages,
            vec![
                Stage { level: 3, epsilon: 2.0, sweeps: 4 },
                Stage { level: 3, epsilon: 1.0, sweeps: 2 },
                Stage { level: 3, epsilon: 0.5, sweeps: 2 },
                Stage { level: 3, epsilon: 0.25, sweeps: 2 },
            ]
        );
        // Epsilon is continuous across layer transitions: the first stage of
        // a layer equals the last stage of the previous one.
        let s = build_schedule(6).unwrap();
        for w in s.stages.windows(2) {
            if w[1].level == w[0].level + 1 {
                assert_eq!(w[0].epsilon, w[1].epsilon);
            }
        }
        // Per-layer pattern 2d^2, d^2, d^2/2.
        for st in &s.stages {
            let d2 = f64::powi(4.0, (6 - st.level) as i32);
            assert!(
                (st.epsilon - 2.0 * d2).abs() < 1e-15
                    || (st.epsilon - d2).abs() < 1e-15
                    || (st.epsilon - 0.5 * d2).abs() < 1e-15
                    || (st.epsilon - 0.25).abs() < 1e-15
            );
        }
    }

    #[test]
    fn parent_maps_are_consistent() {
        let mu = image(32, |i| (i % 5 + 1) as f64);
        let h = build_hierarchy(&mu, &mu, 32, 4).unwrap();
        for k in 0..h.layers.len() - 1 {
            let (coarse, fine) = (&h.layers[k], &h.layers[k + 1]);
            let fs = fine.geometry.side();
            // parent_pixel inverts child_pixels.
            for yc in 0..coarse.nu.len() as u32 {
                for y in child_pixels(coarse.geometry.side(), yc) {
                    assert_eq!(parent_pixel(fs, y), yc);
                }
            }
            // Every fine cell's pixels all map into its parent cell.
            for i in 0..fine.basic.cell_count() {
                let j = parent_cell(&fine.basic, &coarse.basic, i);
                for &x in fine.basic.cell(i) {
                    let px = parent_pixel(fs, x);
                    assert!(
                        coarse.basic.cell(j).contains(&px),
                        "fine cell {i} pixel {x} escapes coarse cell {j}"
                    );
                }
            }
        }
    }
}
