use domdec::engine::{self, ProblemData, SweepConfig};
use domdec::partition::Label;
use domdec::measures::{CostOracle, DiscreteMeasure};
use domdec::{dualglue, multiscale, pipeline};

fn test_image(side: usize, seed: u64) -> DiscreteMeasure {
    let s = side as f64;
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    let mut next = || {
        state ^= state << 13; state ^= state >> 7; state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let ncomp = 5 + (next() * 10.0) as usize;
    let comps: Vec<(f64, f64, f64, f64, f64)> = (0..ncomp)
        .map(|_| (next() * s, next() * s,
                  s / 32.0 + next() * (s / 6.0 - s / 32.0),
                  s / 32.0 + next() * (s / 6.0 - s / 32.0),
                  (0.1f64.ln() + next() * (1.0f64.ln() - 0.1f64.ln())).exp()))
        .collect();
    let weights: Vec<f64> = (0..side * side)
        .map(|i| {
            let r = (i / side) as f64;
            let c = (i % side) as f64;
            comps.iter().map(|&(cr, cc, sr, sc, m)| {
                let d2 = ((r - cr) / sr).powi(2) + ((c - cc) / sc).powi(2);
                m * (-0.5 * d2).exp()
            }).sum::<f64>()
        })
        .collect();
    DiscreteMeasure::new(weights).unwrap()
}

fn main() {
    // replicate the pipeline manually with per-stage certificates
    let side = 32usize;
    let mu = test_image(side, 1001).with_mass_floor(1e-9).unwrap();
    let nu = test_image(side, 2001).with_mass_floor(1e-9).unwrap();
    let h = multiscale::build_hierarchy(&mu, &nu, side, 4).unwrap();
    let n = h.finest_level;
    let schedule = multiscale::build_schedule(n).unwrap();
    let mut opts = pipeline::SolveOptions::default(); 
    let cfg: SweepConfig = opts.sweep_config();

    let mut layer_index = 0usize;
    let coarsest = &h.layers[0];
    let mut state = engine::initialize_product_state(
        &coarsest.basic, &coarsest.nu,
        coarsest.comp_a.group_count(), coarsest.comp_b.group_count(),
        schedule.stages[0].epsilon);

    let flat = std::env::var("FLAT").is_ok();
    if flat {
        // jump straight to the finest layer with a product state
        let fine = h.finest();
        layer_index = h.layers.len() - 1;
        state = engine::initialize_product_state(
            &fine.basic, &fine.nu,
            fine.comp_a.group_count(), fine.comp_b.group_count(),
            schedule.stages[0].epsilon);
    }
    for stage in &schedule.stages {
        while !flat && h.layers[layer_index].level < stage.level {
            // refine
            let coarse = &h.layers[layer_index];
            let cost = CostOracle::SqEuclidean { x: coarse.geometry.clone(), y: coarse.geometry.clone() };
            let data = ProblemData { mu: &coarse.mu, nu: &coarse.nu, cost: &cost, basic: &coarse.basic, comp_a: &coarse.comp_a, comp_b: &coarse.comp_b };
            // glue potentials like the pipeline does
            let a_pots: Vec<Vec<f64>> = state.potentials_a.iter().map(|p| p.clone().unwrap()).collect();
            let graph = dualglue::build_glue_graph(&a_pots, &state.potentials_b, &data, state.epsilon, 0).unwrap();
            let fit = dualglue::helmholtz_fit(&graph).unwrap();
            let mut glued = vec![0.0; coarse.mu.len()];
            for (j, pot) in a_pots.iter().enumerate() {
                let shift = state.epsilon * fit.potential[j];
                let mut cursor = 0usize;
                for &i in coarse.comp_a.group(j) {
                    for &x in coarse.basic.cell(i) {
                        glued[x as usize] = pot[cursor] + shift;
                        cursor += 1;
                    }
                }
            }
            let fine_potential = multiscale::refine_potentials(&glued, coarse.geometry.side());
            let mut fine_state = multiscale::refine_marginals(&state, &h, layer_index).unwrap();
            for m in &mut fine_state.marginals {
                *m = engine::truncate_marginal(m, opts.marginal_floor);
            }
            let fine = &h.layers[layer_index + 1];
            fine_state.potentials_a = multiscale::restrict_potential(&fine_potential, &fine.basic, &fine.comp_a);
            fine_state.potentials_b = multiscale::restrict_potential(&fine_potential, &fine.basic, &fine.comp_b);
            fine_state.epsilon = state.epsilon;
            state = fine_state;
            layer_index += 1;
        }
        state.epsilon = stage.epsilon;
        let layer = &h.layers[layer_index];
        let cost = CostOracle::SqEuclidean { x: layer.geometry.clone(), y: layer.geometry.clone() };
        let data = ProblemData { mu: &layer.mu, nu: &layer.nu, cost: &cost, basic: &layer.basic, comp_a: &layer.comp_a, comp_b: &layer.comp_b };
        for k in 0..stage.sweeps {
            let label = if k % 2 == 0 { Label::A } else { Label::B };
            engine::sweep(&mut state, label, &data, &cfg).unwrap();
        }
        let cert = dualglue::certificate(&state, &data, &cfg, None).unwrap();
        // dense oracle at this layer/eps
        let (_p, sa, sb) = domdec::worstcase::dense_reference(&cost, &layer.mu, &layer.nu, stage.epsilon, 1e-9).unwrap();
        let kref = domdec::measures::KernelRef::new(&cost, &layer.mu, &layer.nu, stage.epsilon).unwrap();
        let j_star = domdec::measures::dual_score(&sa, &sb, &layer.mu, &layer.nu, &kref);
        println!("stage l={} eps={:<8} gap={:.3e} primal_excess={:.4e} dual_loose={:.4e}",
                 stage.level, stage.epsilon, cert.relative_pd_gap, cert.primal_score - j_star, j_star - cert.dual_score);
    }
}
