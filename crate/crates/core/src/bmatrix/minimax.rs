//! Selection of the correction matrix with the smallest largest eigenvalue
//! among those produced by the sign-vector / mixing-weight construction.

use rayon::prelude::*;

use super::construct::{
    assemble_b, assemble_dense, find_sign_vectors, lambda_max_of, largest_and_rest,
    solve_a_segment, sort_order, ASegment, EXHAUSTIVE_SIGN_LIMIT,
};
use super::{b_balanced, BMatrix, Provenance};
use crate::error::{Error, Result};

const GOLDEN_ITERATIONS: usize = 60;
const POLISH_STEP: f64 = 1e-6;
const POLISH_HALF_WIDTH: usize = 50;
/// Relative slack under which two `λ_max` values count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

/// Minimizes a convex function of `t ∈ [0, 1]`.
///
/// Golden-section search, then a fine grid around its result. Endpoints are
/// always candidates, and among candidates tied with the minimum the earliest
/// of `[0, 1, golden, grid...]` wins so that exact endpoint optima are
/// returned exactly.
pub fn minimize_on_segment<F>(mut f: F) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    for _ in 0..GOLDEN_ITERATIONS {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c)?;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d)?;
        }
    }
    let golden = 0.5 * (lo + hi);

    let mut candidates = vec![0.0, 1.0, golden];
    for k in 1..=POLISH_HALF_WIDTH {
        for t in [
            golden - k as f64 * POLISH_STEP,
            golden + k as f64 * POLISH_STEP,
        ] {
            if (0.0..=1.0).contains(&t) {
                candidates.push(t);
            }
        }
    }
    let values = candidates
        .iter()
        .map(|&t| f(t))
        .collect::<Result<Vec<_>>>()?;
    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    let slack = TIE_TOLERANCE * best.abs();
    let idx = values
        .iter()
        .position(|&v| v <= best + slack)
        .expect("at least one candidate");
    Ok((candidates[idx], values[idx]))
}

struct Candidate {
    x: Vec<i8>,
    a: (f64, f64),
    lambda: f64,
}

fn best_on_segment(x: &[i8], seg: &ASegment, sorted: &[usize]) -> Result<Candidate> {
    let (t, lambda) = minimize_on_segment(|t| {
        let (a1, a2) = seg.point(t);
        lambda_max_of(&assemble_dense(x, a1, a2, sorted))
    })?;
    Ok(Candidate {
        x: x.to_vec(),
        a: seg.point(t),
        lambda,
    })
}

/// The `B` with the smallest `λ_max` reachable by the construction, in the
/// caller's whole-plot order. Equal sizes give the balanced matrix.
///
/// Ties across sign vectors go to the lexicographically smallest `x`
/// (with `-1 < +1`).
pub fn minimax_b(sizes: &[usize]) -> Result<BMatrix> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::domain(
            "minimax B needs at least 2 whole plots with positive sizes",
        ));
    }
    if sizes.windows(2).all(|p| p[0] == p[1]) {
        return b_balanced(sizes[0], sizes.len());
    }
    if sizes.len() < 3 {
        return Err(Error::domain(
            "unequal sizes with 2 whole plots admit no matrix with zero row sums",
        ));
    }
    let (largest, rest) = largest_and_rest(sizes);
    if largest >= rest {
        return Err(Error::NoCorrectionMatrix { largest, rest });
    }
    let (order, position) = sort_order(sizes);
    let sorted: Vec<usize> = order.iter().map(|&i| sizes[i]).collect();
    let exhaustive = sorted.len() - 1 <= EXHAUSTIVE_SIGN_LIMIT;

    let xs = find_sign_vectors(&sorted)?;
    let candidates = xs
        .par_iter()
        .map(|x| {
            let seg = solve_a_segment(x, &sorted)?;
            best_on_segment(x, &seg, &sorted)
        })
        .collect::<Result<Vec<_>>>()?;

    // sign vectors are generated in lexicographic order
    let min_lambda = candidates
        .iter()
        .map(|c| c.lambda)
        .fold(f64::INFINITY, f64::min);
    let best = candidates
        .iter()
        .find(|c| c.lambda <= min_lambda + TIE_TOLERANCE * min_lambda.abs())
        .expect("at least one sign vector");

    let b = assemble_b(&best.x, best.a.0, best.a.1, &sorted)?;
    let b = b.permuted(&position)?;
    let rows = b.to_dense();
    BMatrix::from_dense(
        &rows,
        Provenance::Constructed {
            x: best.x.clone(),
            a1: best.a.0,
            a2: best.a.1,
            exhaustive,
        },
    )
}
