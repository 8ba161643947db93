use domdec::measures::{dual_score, CostOracle, DiscreteMeasure, KernelRef};
use domdec::{multiscale, pipeline, worstcase};

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
    let c = &out.certificate;
    println!("primal={:.6} dual={:.6} gap={:.3e}", c.primal_score, c.dual_score, c.relative_pd_gap);

    let mu_f = mu.with_mass_floor(1e-9).unwrap();
    let nu_f = nu.with_mass_floor(1e-9).unwrap();
    let h = multiscale::build_hierarchy(&mu_f, &nu_f, side, 4).unwrap();
    let layer = h.finest();
    let cost = CostOracle::SqEuclidean { x: layer.geometry.clone(), y: layer.geometry.clone() };
    let (_pi, a_star, b_star) = worstcase::dense_reference(&cost, &mu_f, &nu_f, 0.25, 1e-9).unwrap();
    let kref = KernelRef::new(&cost, &mu_f, &nu_f, 0.25).unwrap();
    let j_star = dual_score(&a_star, &b_star, &mu_f, &nu_f, &kref);
    println!("J* = {:.6}", j_star);
    println!("primal - J* (primal subopt) = {:.4e}", c.primal_score - j_star);
    println!("J* - dual (dual looseness)  = {:.4e}", j_star - c.dual_score);
    println!("denominator = {:.4e}", c.primal_score - c.kernel_mass);
}
