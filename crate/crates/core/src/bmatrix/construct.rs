//! Closed-form constructions of `B` and the sign-vector / mixing-weight
//! construction for unequal whole-plot sizes.

use super::{eigen_sym, verify_c1_c2_c3, BMatrix, Provenance};
use crate::error::{Error, Result};

/// Largest `W - 1` for which every sign vector is enumerated.
pub const EXHAUSTIVE_SIGN_LIMIT: usize = 20;

/// Smallest interior margin keeping `a1 + a2` strictly below one.
const SEGMENT_MARGIN: f64 = 1e-9;

/// The margin is widened to `RANK_SAFETY * Σ M^2 / M_1^2` so that the
/// smallest nonzero eigenvalue of `B`, which is at least `(1 - a1 - a2) M_1^2`,
/// stays above `RANK_SAFETY * trace(B)`.
const RANK_SAFETY: f64 = 1e-6;

fn check_positive(sizes: &[usize]) -> Result<()> {
    if sizes.contains(&0) {
        return Err(Error::domain("whole-plot sizes must be positive"));
    }
    Ok(())
}

fn check_sorted(sorted: &[usize]) -> Result<()> {
    check_positive(sorted)?;
    if sorted.windows(2).any(|p| p[0] > p[1]) {
        return Err(Error::domain("whole-plot sizes must be sorted ascending"));
    }
    Ok(())
}

fn sq(m: usize) -> f64 {
    (m as f64) * (m as f64)
}

/// `Σ M_w^2 / (W - 1)`, a lower bound on `λ_max(B)`.
pub fn lambda_lower_bound(sizes: &[usize]) -> Result<f64> {
    if sizes.len() < 2 {
        return Err(Error::domain("need at least 2 whole plots"));
    }
    Ok(sizes.iter().map(|&m| sq(m)).sum::<f64>() / (sizes.len() - 1) as f64)
}

/// Whether a PSD `B` with diagonal `M_w^2`, zero row sums and rank `W - 1`
/// exists: the largest size must be strictly below the sum of the others.
pub fn exists_b(sizes: &[usize]) -> Result<bool> {
    if sizes.len() < 3 {
        return Err(Error::domain(
            "existence test is defined for at least 3 whole plots",
        ));
    }
    check_positive(sizes)?;
    let (largest, rest) = largest_and_rest(sizes);
    Ok(largest < rest)
}

pub(crate) fn largest_and_rest(sizes: &[usize]) -> (usize, usize) {
    let largest = *sizes.iter().max().expect("non-empty");
    (largest, sizes.iter().sum::<usize>() - largest)
}

fn require_exists(sizes: &[usize]) -> Result<()> {
    if !exists_b(sizes)? {
        let (largest, rest) = largest_and_rest(sizes);
        return Err(Error::NoCorrectionMatrix { largest, rest });
    }
    Ok(())
}

/// Equal sizes: `M^2` on the diagonal and `-M^2 / (W - 1)` elsewhere.
pub fn b_balanced(m: usize, w: usize) -> Result<BMatrix> {
    if w < 2 || m == 0 {
        return Err(Error::domain("balanced B needs W >= 2 and M > 0"));
    }
    let d = sq(m);
    let off = -d / (w - 1) as f64;
    let rows: Vec<Vec<f64>> = (0..w)
        .map(|i| (0..w).map(|j| if i == j { d } else { off }).collect())
        .collect();
    BMatrix::from_dense(&rows, Provenance::Balanced)
}

/// The unique `B` for three whole plots: `b_ij = (M_k^2 - M_i^2 - M_j^2) / 2`
/// with `k` the remaining index.
pub fn b_three(sizes: &[usize]) -> Result<BMatrix> {
    if sizes.len() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            got: sizes.len(),
        });
    }
    require_exists(sizes)?;
    let mut rows = vec![vec![0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rows[i][j] = if i == j {
                sq(sizes[i])
            } else {
                let k = 3 - i - j;
                (sq(sizes[k]) - sq(sizes[i]) - sq(sizes[j])) / 2.0
            };
        }
    }
    BMatrix::from_dense(&rows, Provenance::ThreePlot)
}

/// The direct generalisation of the three-plot matrix to `W` plots. Always
/// has the right diagonal and row sums but may fail to be PSD; the flag
/// reports whether it is.
pub fn b_naive(sizes: &[usize]) -> Result<(BMatrix, bool)> {
    let w = sizes.len();
    if w < 3 {
        return Err(Error::domain(
            "naive extension needs at least 3 whole plots",
        ));
    }
    check_positive(sizes)?;
    let total: f64 = sizes.iter().map(|&m| sq(m)).sum();
    let wf = w as f64;
    let rows: Vec<Vec<f64>> = (0..w)
        .map(|i| {
            (0..w)
                .map(|j| {
                    if i == j {
                        sq(sizes[i])
                    } else {
                        total / ((wf - 1.0) * (wf - 2.0))
                            - (sq(sizes[i]) + sq(sizes[j])) / (wf - 2.0)
                    }
                })
                .collect()
        })
        .collect();
    let b = BMatrix::from_dense(&rows, Provenance::NaiveExtension)?;
    let psd = b.eigenvalues()[0] >= -1e-9 * b.trace().abs();
    Ok((b, psd))
}

fn signed_dot(mu: &[usize], x: &[i8]) -> i128 {
    mu.iter().zip(x).map(|(&m, &s)| m as i128 * s as i128).sum()
}

/// All `±1` vectors `x` (with `x[0] = +1`; `x` and `-x` are equivalent)
/// satisfying `|μᵀx| < M_W`, where `μ` holds all but the largest sorted size.
///
/// The search is exhaustive while `W - 1 <= EXHAUSTIVE_SIGN_LIMIT`; beyond
/// that a single witness from the constructive procedure is returned.
pub fn find_sign_vectors(sorted: &[usize]) -> Result<Vec<Vec<i8>>> {
    check_sorted(sorted)?;
    let w = sorted.len();
    if w < 3 {
        return Err(Error::domain("sign vectors need at least 3 whole plots"));
    }
    if sorted[0] == sorted[w - 1] {
        return Err(Error::domain(
            "sign vectors are only needed for unequal sizes; use the balanced matrix",
        ));
    }
    let n = w - 1;
    let mu = &sorted[..n];
    let mw = sorted[n] as i128;
    if n > EXHAUSTIVE_SIGN_LIMIT {
        return Ok(vec![constructive_sign_vector(sorted)?]);
    }
    let free = n - 1;
    let mut out = Vec::new();
    for mask in 0u64..(1u64 << free) {
        let x: Vec<i8> = std::iter::once(1)
            .chain((0..free).map(|k| {
                if mask >> (free - 1 - k) & 1 == 1 {
                    1
                } else {
                    -1
                }
            }))
            .collect();
        if signed_dot(mu, &x).abs() < mw {
            out.push(x);
        }
    }
    if out.is_empty() {
        return Err(Error::Internal("no admissible sign vector found".into()));
    }
    Ok(out)
}

/// One admissible sign vector built by the partition walk that proves such
/// a vector exists whenever the sizes are not all equal. Normalized so that
/// `x[0] = +1`.
pub fn constructive_sign_vector(sorted: &[usize]) -> Result<Vec<i8>> {
    check_sorted(sorted)?;
    let w = sorted.len();
    if w < 3 || sorted[0] == sorted[w - 1] {
        return Err(Error::domain(
            "constructive sign vector needs W >= 3 and unequal sizes",
        ));
    }
    // 1-based accessors to mirror the index arithmetic of the construction
    let m = |k: usize| sorted[k - 1];
    let mw = m(w);
    let mut x = vec![0i8; w - 1];
    let mut set = |k: usize, s: i8| x[k - 1] = s;

    // h = number of (−, +) pairs of sizes tied with the largest
    let mut h = 0;
    while 2 * (h + 1) < w && m(w - 2 * (h + 1)) == mw {
        h += 1;
    }
    for k in (w - h)..w {
        set(k, 1);
    }
    for k in (w - 2 * h)..(w - h) {
        set(k, -1);
    }
    let l = w - 2 * h - 1;
    if l == 1 {
        set(1, 1);
    } else {
        let prefix: Vec<usize> = std::iter::once(0)
            .chain((1..=l).scan(0, |acc, k| {
                *acc += m(k);
                Some(*acc)
            }))
            .collect();
        let head = |j: usize| prefix[j];
        let tail = |j: usize| prefix[l] - prefix[j];
        let w1 = (1..l)
            .rev()
            .find(|&j| head(j) <= tail(j))
            .ok_or_else(|| Error::Internal("partition walk found no split".into()))?;
        let balanced_enough = (tail(w1) as i128 - head(w1) as i128).unsigned_abs() < mw as u128;
        let split = if w1 == l - 1 || balanced_enough {
            w1
        } else {
            w1 + 1
        };
        for k in 1..=l {
            set(k, if k <= split { -1 } else { 1 });
        }
    }
    if x[0] < 0 {
        x.iter_mut().for_each(|s| *s = -*s);
    }
    if signed_dot(&sorted[..w - 1], &x).abs() >= mw as i128 {
        return Err(Error::Internal(format!(
            "constructed sign vector {x:?} is not admissible"
        )));
    }
    Ok(x)
}

/// Feasible mixing weights for one sign vector: the segment of `(a1, a2)`
/// with `a1, a2 >= 0`, `a1 + a2 < 1` and `a1 φ1 + a2 φ2 = φ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ASegment {
    pub phi1: f64,
    pub phi2: f64,
    pub phi: f64,
    /// Distance kept between `a1 + a2` and one at the far end.
    pub margin: f64,
    pub start: (f64, f64),
    pub end: (f64, f64),
}

impl ASegment {
    /// Point at fraction `t` of the way from `start` to `end`.
    pub fn point(&self, t: f64) -> (f64, f64) {
        if t == 0.0 {
            return self.start;
        }
        if t == 1.0 {
            return self.end;
        }
        let a1 = self.start.0 + t * (self.end.0 - self.start.0);
        // a2 from the linear constraint keeps the point exactly on the line
        let a2 = ((self.phi - a1 * self.phi1) / self.phi2).max(0.0);
        (a1, a2)
    }

    /// `a1 φ1 + a2 φ2 - φ`.
    pub fn residual(&self, a1: f64, a2: f64) -> f64 {
        a1 * self.phi1 + a2 * self.phi2 - self.phi
    }
}

pub fn solve_a_segment(x: &[i8], sorted: &[usize]) -> Result<ASegment> {
    check_sorted(sorted)?;
    let w = sorted.len();
    if x.len() + 1 != w {
        return Err(Error::DimensionMismatch {
            expected: w - 1,
            got: x.len(),
        });
    }
    require_exists(sorted)?;
    let mu = &sorted[..w - 1];
    let mw = sorted[w - 1];
    let mux = signed_dot(mu, x);
    if mux.unsigned_abs() >= mw as u128 {
        return Err(Error::domain(format!(
            "sign vector {x:?} gives |μᵀx| = {} >= {mw}",
            mux.abs()
        )));
    }
    let mumu: f64 = mu.iter().map(|&m| sq(m)).sum();
    let mue: f64 = mu.iter().map(|&m| m as f64).sum();
    let phi1 = (mux as f64) * (mux as f64) - mumu;
    let phi2 = mue * mue - mumu;
    let phi = sq(mw) - mumu;

    let a2_of = |a1: f64| (phi - a1 * phi1) / phi2;
    let (lo, lo_on_axis) = if phi1 < 0.0 && phi / phi1 > 0.0 {
        (phi / phi1, true)
    } else {
        (0.0, false)
    };
    let total_sq: f64 = sorted.iter().map(|&m| sq(m)).sum();
    let margin = SEGMENT_MARGIN.max(RANK_SAFETY * total_sq / sq(sorted[0]));
    let mut hi = (phi2 * (1.0 - margin) - phi) / (phi2 - phi1);
    if phi1 > 0.0 {
        hi = hi.min(phi / phi1);
    }
    if lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(Error::Internal(format!(
            "empty mixing-weight segment [{lo}, {hi}] for x = {x:?}"
        )));
    }
    let start = (lo, if lo_on_axis { 0.0 } else { a2_of(lo) });
    let end = (hi, a2_of(hi).max(0.0));
    Ok(ASegment {
        phi1,
        phi2,
        phi,
        margin,
        start,
        end,
    })
}

/// Dense `B` for sorted sizes, without verification.
pub(crate) fn assemble_dense(x: &[i8], a1: f64, a2: f64, sorted: &[usize]) -> Vec<Vec<f64>> {
    let n = sorted.len() - 1;
    let rest = 1.0 - a1 - a2;
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let inner = a1 * f64::from(x[i] * x[j]) + a2 + if i == j { rest } else { 0.0 };
            a[i][j] = sorted[i] as f64 * sorted[j] as f64 * inner;
        }
    }
    let mut b = vec![vec![0.0; n + 1]; n + 1];
    let mut corner = Vec::with_capacity(n);
    for i in 0..n {
        let row_sum = crate::numeric::compensated_sum(a[i].iter().copied());
        b[i][..n].copy_from_slice(&a[i]);
        b[i][n] = -row_sum;
        b[n][i] = -row_sum;
        corner.push(row_sum);
    }
    b[n][n] = crate::numeric::compensated_sum(corner);
    b
}

/// Builds `B` from a sign vector and mixing weights for sorted sizes and
/// verifies the three conditions.
pub fn assemble_b(x: &[i8], a1: f64, a2: f64, sorted: &[usize]) -> Result<BMatrix> {
    check_sorted(sorted)?;
    if x.len() + 1 != sorted.len() {
        return Err(Error::DimensionMismatch {
            expected: sorted.len() - 1,
            got: x.len(),
        });
    }
    if x.iter().any(|&s| s != 1 && s != -1) {
        return Err(Error::domain("sign vector entries must be +1 or -1"));
    }
    let rows = assemble_dense(x, a1, a2, sorted);
    let b = BMatrix::from_dense(
        &rows,
        Provenance::Constructed {
            x: x.to_vec(),
            a1,
            a2,
            exhaustive: false,
        },
    )?;
    let report = verify_c1_c2_c3(&b, sorted)?;
    if !report.all_pass() {
        return Err(Error::Internal(format!(
            "assembled matrix fails its conditions: {report:?}"
        )));
    }
    Ok(b)
}

/// Ascending order of the sizes: `order[k]` is the caller's index of the
/// `k`-th smallest, `position[i]` is the sorted rank of caller index `i`.
pub(crate) fn sort_order(sizes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| sizes[i]);
    let mut position = vec![0; sizes.len()];
    for (k, &i) in order.iter().enumerate() {
        position[i] = k;
    }
    (order, position)
}

/// Runs the construction for caller-ordered sizes with a given sign vector
/// (relative to the ascending sort) and weights, returning `B` in the
/// caller's order.
pub fn steps_b(sizes: &[usize], x: &[i8], a1: f64, a2: f64) -> Result<BMatrix> {
    check_positive(sizes)?;
    if sizes.len() < 3 {
        return Err(Error::domain("construction needs at least 3 whole plots"));
    }
    require_exists(sizes)?;
    let (order, position) = sort_order(sizes);
    let sorted: Vec<usize> = order.iter().map(|&i| sizes[i]).collect();
    let seg = solve_a_segment(x, &sorted)?;
    if a1 < 0.0 || a2 < 0.0 || a1 + a2 >= 1.0 {
        return Err(Error::domain(format!(
            "weights must satisfy a1, a2 >= 0 and a1 + a2 < 1 (got {a1}, {a2})"
        )));
    }
    let scale = seg.phi.abs().max(seg.phi1.abs()).max(seg.phi2.abs());
    if seg.residual(a1, a2).abs() > 1e-10 * scale {
        return Err(Error::domain(format!(
            "weights ({a1}, {a2}) violate a1 φ1 + a2 φ2 = φ with φ1 = {}, φ2 = {}, φ = {}",
            seg.phi1, seg.phi2, seg.phi
        )));
    }
    assemble_b(x, a1, a2, &sorted)?.permuted(&position)
}

pub(crate) fn lambda_max_of(rows: &[Vec<f64>]) -> Result<f64> {
    Ok(*eigen_sym(rows)?.last().expect("non-empty"))
}
