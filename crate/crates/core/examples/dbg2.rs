use domdec::engine::{self, AssembleOptions, ProblemData, SweepConfig};
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
    let side = 32usize;
    let mu = test_image(side, 1001);
    let nu = test_image(side, 2001);
    let out = pipeline::solve_pair(&mu, &nu, side, &pipeline::SolveOptions::default()).unwrap();
    let state = &out.final_state;
    let layer = out.hierarchy.finest();
    let cost = CostOracle::SqEuclidean { x: layer.geometry.clone(), y: layer.geometry.clone() };
    let data = ProblemData { mu: &layer.mu, nu: &layer.nu, cost: &cost, basic: &layer.basic, comp_a: &layer.comp_a, comp_b: &layer.comp_b };
    let cfg = pipeline::SolveOptions::default().sweep_config();
    let assembled = engine::assemble_coupling(state, Label::A, &data, &cfg, AssembleOptions { collect_entries: false, collect_duals: true }).unwrap();
    let duals = assembled.cell_duals.as_ref().unwrap();
    let a_pots: Vec<Vec<f64>> = duals.iter().map(|d| d.x_potential.clone()).collect();
    let graph = dualglue::build_glue_graph(&a_pots, &state.potentials_b, &data, state.epsilon, 0).unwrap();
    let fit = dualglue::helmholtz_fit(&graph).unwrap();
    println!("components={} objective={:.3e} maxV={:.3} minV={:.3}", fit.components, fit.objective,
             fit.potential.iter().cloned().fold(f64::MIN, f64::max),
             fit.potential.iter().cloned().fold(f64::MAX, f64::min));
    let (alpha, beta) = dualglue::glue_duals(duals, &fit.potential, &data, state.epsilon).unwrap();
    // find max (alpha+beta-c)/eps
    let mut worst = (f64::MIN, 0usize, 0usize);
    for x in 0..alpha.len() {
        for y in 0..beta.len() {
            let e = (alpha[x] + beta[y] - cost.cost(x, y)) / state.epsilon;
            if e > worst.0 { worst = (e, x, y); }
        }
    }
    println!("max exponent {:.2} at x={} y={}", worst.0, worst.1, worst.2);
    let (_, x, y) = worst;
    println!("alpha[x]={:.3} beta[y]={:.3} c={:.3} nu(y)={:.3e} mu(x)={:.3e}", alpha[x], beta[y], cost.cost(x,y), layer.nu.get(y), layer.mu.get(x));
    // which cells cover y, with what weights/values?
    for d in duals {
        if let Ok(pos) = d.y_ids.binary_search(&(y as u32)) {
            println!("  cell {}: beta_J(y)={:.3} nu_J(y)={:.3e} V={:.3}", d.group, d.y_potential[pos], d.nu_cell[pos], fit.potential[d.group]);
        }
    }

    // edge weight distribution
    let mut ws: Vec<f64> = graph.edges.iter().map(|e| e.log_weight).collect();
    ws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("edges={} w_min={:.2} w_med={:.2} w_max={:.2}", ws.len(), ws[0], ws[ws.len()/2], ws[ws.len()-1]);
    // inspect one overlap profile: basic cell in both A group of edge.from and B group edge.via_b
    let e = graph.edges.iter().max_by(|a, b| a.log_weight.abs().partial_cmp(&b.log_weight.abs()).unwrap()).unwrap();
    println!("worst edge {}->{} via B{} w={:.2}", e.from, e.to, e.via_b, e.log_weight);
    // find a shared basic cell
    let a_group: Vec<usize> = data.comp_a.group(e.from).to_vec();
    let b_group: Vec<usize> = data.comp_b.group(e.via_b).to_vec();
    let shared: Vec<usize> = a_group.iter().cloned().filter(|i| b_group.contains(i)).collect();
    println!("shared cells {:?}", shared);
    let cell = shared[0];
    // positions
    let apos = data.comp_a.group(e.from).iter().position(|&i| i == cell).unwrap();
    let bpos = data.comp_b.group(e.via_b).iter().position(|&i| i == cell).unwrap();
    let cell_len = data.basic.cell(cell).len();
    let a_off: usize = data.comp_a.group(e.from)[..apos].iter().map(|&i| data.basic.cell(i).len()).sum();
    let b_off: usize = data.comp_b.group(e.via_b)[..bpos].iter().map(|&i| data.basic.cell(i).len()).sum();
    let pa = &a_pots[e.from][a_off..a_off+cell_len];
    let pb = state.potentials_b[e.via_b].as_ref().unwrap();
    let pb = &pb[b_off..b_off+cell_len];
    let diffs: Vec<f64> = pa.iter().zip(pb.iter()).map(|(a, b)| a - b).collect();
    let dmin = diffs.iter().cloned().fold(f64::MAX, f64::min);
    let dmax = diffs.iter().cloned().fold(f64::MIN, f64::max);
    println!("overlap profile alphaA-alphaB: min={dmin:.3} max={dmax:.3} first5={:?}", &diffs[..5.min(diffs.len())]);
    // alpha stats
    let amax = alpha.iter().cloned().fold(f64::MIN, f64::max);
    let amin = alpha.iter().cloned().fold(f64::MAX, f64::min);
    let bmax = beta.iter().cloned().fold(f64::MIN, f64::max);
    let bmin = beta.iter().cloned().fold(f64::MAX, f64::min);
    println!("alpha range [{amin:.2},{amax:.2}] beta range [{bmin:.2},{bmax:.2}]");
}

#[allow(dead_code)]
fn unused() {}
