//! Observed-data statistics: the point estimator, the between-plot variance
//! estimator and its correction built from a `B` matrix.
//!
//! Every function here reads only an [`ObservedDataset`] and the design it
//! carries, never a full potential-outcome table.

use crate::bmatrix::BMatrix;
use crate::design::{mean_whole_plot_size, ContrastSpec, Treatment};
use crate::error::{Error, Result};
use crate::numeric::compensated_sum;
use crate::randomize::ObservedDataset;

/// Relative tolerance for the diagonal check on `B`.
pub const B_DIAGONAL_TOLERANCE: f64 = 1e-9;

/// `Ȳ_w^obs(z_{1w} z2)`: mean of the observed outcomes of whole plot `w`
/// among its sub-plots assigned `z2`.
pub fn ybar_w_obs(data: &ObservedDataset, w: usize, z2: usize) -> Result<f64> {
    let d = data.design();
    if w >= d.n_whole_plots() || z2 >= d.structure().n_z2() {
        return Err(Error::domain(format!(
            "unknown whole plot {w} or sub-plot level {z2}"
        )));
    }
    data.plot_mean(w, z2).ok_or_else(|| {
        Error::domain(format!(
            "sub-plot level {} has no replication in whole plot {w}",
            d.structure().z2_levels()[z2]
        ))
    })
}

/// `Ū_w^obs = (M_w / M̄) Ȳ_w^obs`.
pub fn ubar_w_obs(data: &ObservedDataset, w: usize, z2: usize) -> Result<f64> {
    Ok(data.design().size_ratio(w) * ybar_w_obs(data, w, z2)?)
}

fn t1_nonempty(data: &ObservedDataset, z1: usize) -> Result<Vec<usize>> {
    let s = data.design().structure();
    if z1 >= s.n_z1() {
        return Err(Error::domain(format!("unknown whole-plot level {z1}")));
    }
    let t1 = data.t1(z1);
    if t1.is_empty() {
        return Err(Error::domain(format!(
            "whole-plot level {} is not assigned to any whole plot",
            s.z1_levels()[z1]
        )));
    }
    Ok(t1)
}

/// `Ȳ^obs(z1 z2) = W / (N r1(z1)) Σ_{w ∈ T1(z1)} M_w Ȳ_w^obs(z1 z2)`.
pub fn ybar_obs(data: &ObservedDataset, z1: usize, z2: usize) -> Result<f64> {
    let t1 = t1_nonempty(data, z1)?;
    let terms = t1
        .iter()
        .map(|&w| ubar_w_obs(data, w, z2))
        .collect::<Result<Vec<_>>>()?;
    Ok(compensated_sum(terms) / t1.len() as f64)
}

fn nonzero_terms(contrast: &ContrastSpec, data: &ObservedDataset) -> Vec<(Treatment, f64)> {
    let s = data.design().structure();
    s.treatments()
        .map(|t| (t, contrast.coefficient(s, t)))
        .filter(|(_, g)| *g != 0.0)
        .collect()
}

fn check_contrast(data: &ObservedDataset, contrast: &ContrastSpec) -> Result<()> {
    let k = data.design().structure().n_treatments();
    if contrast.coefficients().len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: contrast.coefficients().len(),
        });
    }
    Ok(())
}

/// Point estimator `Σ g(z1 z2) Ȳ^obs(z1 z2)`.
pub fn point_estimate(data: &ObservedDataset, contrast: &ContrastSpec) -> Result<f64> {
    check_contrast(data, contrast)?;
    let terms = nonzero_terms(contrast, data)
        .into_iter()
        .map(|(t, g)| Ok(g * ybar_obs(data, t.z1, t.z2)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(compensated_sum(terms))
}

/// `Ŝ(z1 z2, z1 z2*)`: sample covariance over `w ∈ T1(z1)` of the adjusted
/// observed whole-plot means, divisor `r1(z1) - 1`.
pub fn s_hat(data: &ObservedDataset, z1: usize, z2: usize, z2_star: usize) -> Result<f64> {
    let t1 = t1_nonempty(data, z1)?;
    if t1.len() < 2 {
        return Err(Error::domain(format!(
            "variance not estimable at whole-plot level: level {} has a single whole plot",
            data.design().structure().z1_levels()[z1]
        )));
    }
    let a = t1
        .iter()
        .map(|&w| ubar_w_obs(data, w, z2))
        .collect::<Result<Vec<_>>>()?;
    let b = t1
        .iter()
        .map(|&w| ubar_w_obs(data, w, z2_star))
        .collect::<Result<Vec<_>>>()?;
    let r = t1.len() as f64;
    let (ma, mb) = (
        compensated_sum(a.iter().copied()) / r,
        compensated_sum(b.iter().copied()) / r,
    );
    Ok(compensated_sum(a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb))) / (r - 1.0))
}

/// Variance estimator `V̂ = Σ_{z1} Σ_{z2, z2*} g g Ŝ / r1(z1)`.
pub fn v_hat(data: &ObservedDataset, contrast: &ContrastSpec) -> Result<f64> {
    check_contrast(data, contrast)?;
    let terms = nonzero_terms(contrast, data);
    let mut out = Vec::with_capacity(terms.len() * terms.len());
    for &(a, ga) in &terms {
        for &(b, gb) in &terms {
            if a.z1 != b.z1 {
                continue;
            }
            let r1 = data.t1(a.z1).len() as f64;
            out.push(ga * gb * s_hat(data, a.z1, a.z2, b.z2)? / r1);
        }
    }
    Ok(compensated_sum(out))
}

/// `G_w^obs = Σ_{z2} g(z_{1w} z2) Ȳ_w^obs(z_{1w} z2)`.
pub fn g_w_obs(data: &ObservedDataset, contrast: &ContrastSpec, w: usize) -> Result<f64> {
    check_contrast(data, contrast)?;
    let d = data.design();
    if w >= d.n_whole_plots() {
        return Err(Error::domain(format!("unknown whole plot {w}")));
    }
    let s = d.structure();
    let z1 = data.plot_z1()[w];
    let mut terms = Vec::with_capacity(s.n_z2());
    for z2 in 0..s.n_z2() {
        let g = contrast.coefficient(s, Treatment { z1, z2 });
        if g != 0.0 {
            terms.push(g * ybar_w_obs(data, w, z2)?);
        }
    }
    Ok(compensated_sum(terms))
}

fn h_divisor(data: &ObservedDataset, w: usize, w_star: usize) -> f64 {
    let (a, b) = (data.plot_z1()[w], data.plot_z1()[w_star]);
    let ra = data.t1(a).len() as f64;
    let rb = data.t1(b).len() as f64;
    if a == b {
        ra * (rb - 1.0)
    } else {
        ra * rb
    }
}

/// Unbiased estimator of `τ̄_w τ̄_{w*}` for `w ≠ w*`:
/// `W (W - 1) G_w G_{w*} / (r1(z_{1w}) (r1(z_{1w*}) - δ))`.
pub fn h_ww(
    data: &ObservedDataset,
    contrast: &ContrastSpec,
    w: usize,
    w_star: usize,
) -> Result<f64> {
    if w == w_star {
        return Err(Error::domain(
            "the product estimator needs two distinct whole plots",
        ));
    }
    let gw = g_w_obs(data, contrast, w)?;
    let gs = g_w_obs(data, contrast, w_star)?;
    let wf = data.design().n_whole_plots() as f64;
    Ok(wf * (wf - 1.0) * gw * gs / h_divisor(data, w, w_star))
}

/// Checks that `B` is `W x W` with diagonal `M_w^2`.
pub fn check_b_diagonal(data: &ObservedDataset, b: &BMatrix) -> Result<()> {
    let sizes = data.design().whole_plot_sizes();
    if b.dim() != sizes.len() {
        return Err(Error::DimensionMismatch {
            expected: sizes.len(),
            got: b.dim(),
        });
    }
    let scale = sizes.iter().map(|&m| (m * m) as f64).fold(1.0, f64::max);
    for (w, &m) in sizes.iter().enumerate() {
        let want = (m * m) as f64;
        if (b.get(w, w) - want).abs() > B_DIAGONAL_TOLERANCE * scale {
            return Err(Error::domain(format!(
                "B diagonal entry {w} is {}, expected M_w^2 = {want}",
                b.get(w, w)
            )));
        }
    }
    Ok(())
}

/// Corrected estimator
/// `Ṽ = V̂ + N^-2 Σ_{w ≠ w*} (b_{ww*} + M_w M_{w*} / (W - 1)) H_{ww*}`.
/// Returned unclamped; it can be negative on individual assignments.
pub fn v_tilde(data: &ObservedDataset, contrast: &ContrastSpec, b: &BMatrix) -> Result<f64> {
    check_b_diagonal(data, b)?;
    let vh = v_hat(data, contrast)?;
    let d = data.design();
    let w_count = d.n_whole_plots();
    let wf = w_count as f64;
    let n = d.n_units() as f64;
    let g = (0..w_count)
        .map(|w| g_w_obs(data, contrast, w))
        .collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::with_capacity(w_count * w_count);
    for w in 0..w_count {
        for v in 0..w_count {
            if v == w {
                continue;
            }
            let coef = b.get(w, v) + (d.size(w) * d.size(v)) as f64 / (wf - 1.0);
            if coef == 0.0 {
                continue;
            }
            let h = wf * (wf - 1.0) * g[w] * g[v] / h_divisor(data, w, v);
            terms.push(coef * h);
        }
    }
    Ok(vh + compensated_sum(terms) / (n * n))
}

/// Observed mean for one treatment combination.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMean {
    pub treatment: Treatment,
    pub label: String,
    /// `None` when the combination was not observed.
    pub ybar_obs: Option<f64>,
}

/// Everything `analyze` reports for one observed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub tau_hat: f64,
    pub v_hat: f64,
    pub v_tilde: Option<f64>,
    pub v_tilde_clamped: Option<f64>,
    pub b_used: Option<BMatrix>,
    pub cell_means: Vec<CellMean>,
    pub n_units: usize,
    pub n_whole_plots: usize,
    pub mean_whole_plot_size: f64,
}

/// Computes `τ̂`, `V̂` and, when `b` is given, `Ṽ`. `clamp` additionally
/// reports `max(Ṽ, 0)`.
pub fn estimate(
    data: &ObservedDataset,
    contrast: &ContrastSpec,
    b: Option<&BMatrix>,
    clamp: bool,
) -> Result<EstimateReport> {
    let tau_hat = point_estimate(data, contrast)?;
    let v_hat = v_hat(data, contrast)?;
    let v_tilde = b.map(|b| v_tilde(data, contrast, b)).transpose()?;
    let d = data.design();
    let s = d.structure();
    let cell_means = s
        .treatments()
        .map(|t| CellMean {
            treatment: t,
            label: s.label(t),
            ybar_obs: ybar_obs(data, t.z1, t.z2).ok(),
        })
        .collect();
    Ok(EstimateReport {
        tau_hat,
        v_hat,
        v_tilde_clamped: if clamp {
            v_tilde.map(|v| v.max(0.0))
        } else {
            None
        },
        v_tilde,
        b_used: b.cloned(),
        cell_means,
        n_units: d.n_units(),
        n_whole_plots: d.n_whole_plots(),
        mean_whole_plot_size: mean_whole_plot_size(d),
    })
}
