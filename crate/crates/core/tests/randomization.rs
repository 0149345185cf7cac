use std::collections::HashMap;

use splitplot::oracle::design_b;
use splitplot::randomize::{draw_assignment, enumerate_assignments, Assignment};

const DRAWS: u64 = 100_000;

fn frequencies() -> HashMap<Assignment, u64> {
    let d = design_b();
    let mut counts = HashMap::new();
    for stream in 0..DRAWS {
        *counts.entry(draw_assignment(&d, 99, stream)).or_insert(0) += 1;
    }
    counts
}

#[test]
fn draws_are_uniform_over_the_support() {
    let d = design_b();
    let support: Vec<(Assignment, f64)> = enumerate_assignments(&d, 1000).unwrap().collect();
    let counts = frequencies();
    assert!(counts.keys().all(|a| support.iter().any(|(s, _)| s == a)));
    let mut chi2 = 0.0;
    for (a, p) in &support {
        let expected = DRAWS as f64 * p;
        let se = (DRAWS as f64 * p * (1.0 - p)).sqrt();
        let observed = *counts.get(a).unwrap_or(&0) as f64;
        assert!(
            (observed - expected).abs() <= 5.0 * se,
            "{a:?}: {observed} vs {expected}"
        );
        chi2 += (observed - expected).powi(2) / expected;
    }
    // 215 degrees of freedom: mean 215, sd about 20.7
    assert!(chi2 < 215.0 + 5.0 * 20.7, "chi-square {chi2}");
}

#[test]
fn sub_plot_draws_are_independent_across_whole_plots() {
    // joint frequency of the first sub-plot labels of plots 2 and 3
    // against the product of the marginals
    let counts = frequencies();
    let mut joint = [[0.0f64; 2]; 2];
    for (a, c) in &counts {
        joint[a.subplot_z2(2)[0]][a.subplot_z2(3)[0]] += *c as f64;
    }
    let n = DRAWS as f64;
    for (i, row) in joint.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            let pi = joint[i].iter().sum::<f64>() / n;
            let pj = (joint[0][j] + joint[1][j]) / n;
            let p = pi * pj;
            let se = (p * (1.0 - p) / n).sqrt();
            assert!((x / n - p).abs() <= 5.0 * se, "cell {i},{j}");
        }
    }
    // marginal: one of three positions gets level 0 in a plot of size 3
    let p0 = (joint[0][0] + joint[0][1]) / n;
    assert!((p0 - 1.0 / 3.0).abs() < 0.01);
}
