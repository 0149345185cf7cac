//! Small numeric helpers shared across modules.

/// Neumaier-compensated summation.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn mean(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// `|a - b| <= max(rel * max(|a|, |b|), abs_floor)`.
pub fn approx_eq(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    (a - b).abs() <= (rel * a.abs().max(b.abs())).max(abs_floor)
}
