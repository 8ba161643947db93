use domdec::measures::DiscreteMeasure;
use domdec::pipeline;

fn test_image(side: usize, seed: u64) -> DiscreteMeasure {
    // Blobby multi-component image, deterministic from the seed.
    let s = side as f64;
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let ncomp = 5 + (next() * 10.0) as usize;
    let comps: Vec<(f64, f64, f64, f64, f64)> = (0..ncomp)
        .map(|_| {
            (
                next() * s,
                next() * s,
                s / 32.0 + next() * (s / 6.0 - s / 32.0),
                s / 32.0 + next() * (s / 6.0 - s / 32.0),
                (0.1f64.ln() + next() * (1.0f64.ln() - 0.1f64.ln())).exp(),
            )
        })
        .collect();
    let weights: Vec<f64> = (0..side * side)
        .map(|i| {
            let r = (i / side) as f64;
            let c = (i % side) as f64;
            comps
                .iter()
                .map(|&(cr, cc, sr, sc, m)| {
                    let d2 = ((r - cr) / sr).powi(2) + ((c - cc) / sc).powi(2);
                    m * (-0.5 * d2).exp()
                })
                .sum::<f64>()
        })
        .collect();
    DiscreteMeasure::new(weights).unwrap()
}

fn main() {
    for side in [32usize, 64] {
        for pair in 0..3u64 {
            let mu = test_image(side, 1000 + pair);
            let nu = test_image(side, 2000 + pair);
            let t = std::time::Instant::now();
            let out = pipeline::solve_pair(&mu, &nu, side, &pipeline::SolveOptions::default()).unwrap();
            let c = &out.certificate;
            println!(
                "side={side} pair={pair}: gap={:.3e} x_l1={:.3e} y_l1={:.3e} entries/px={:.2} max_e={} denom={:.3e} time={:.2}s",
                c.relative_pd_gap,
                c.x_marginal_l1,
                c.y_marginal_l1,
                out.entries_per_pixel,
                out.max_entries,
                c.primal_score - c.kernel_mass,
                t.elapsed().as_secs_f64()
            );
        }
    }
}
