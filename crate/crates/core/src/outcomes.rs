//! Potential-outcome algebra over a full science table: adjusted outcomes,
//! whole-plot means, variance components, the estimand, the heterogeneity
//! biases and the exact sampling variance of the point estimator.

use std::sync::Arc;

use crate::bmatrix::BMatrix;
use crate::design::{ContrastSpec, SplitPlotDesign, Treatment};
use crate::error::{Error, Result};
use crate::numeric::compensated_sum;

/// Tolerance used by [`check_between_wp_additivity`].
pub const ADDITIVITY_TOLERANCE: f64 = 1e-9;

/// Every potential outcome `Y_i(z1 z2)` of every unit, plus the unit to
/// whole-plot map.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomeTable {
    design: Arc<SplitPlotDesign>,
    unit_whole_plot: Vec<usize>,
    members: Vec<Vec<usize>>,
    /// Row-major `N x K`, `K` = number of treatment combinations.
    y: Vec<f64>,
    /// Row-major `W x K` whole-plot means `Ȳ_w(z1 z2)`.
    wp_means: Vec<f64>,
}

impl PotentialOutcomeTable {
    pub fn new(
        design: Arc<SplitPlotDesign>,
        unit_whole_plot: Vec<usize>,
        y: Vec<f64>,
    ) -> Result<Self> {
        let n = design.n_units();
        let k = design.structure().n_treatments();
        let w_count = design.n_whole_plots();
        if unit_whole_plot.len() != n {
            return Err(Error::InvalidTable(format!(
                "{} units listed, design has {n}",
                unit_whole_plot.len()
            )));
        }
        if y.len() != n * k {
            return Err(Error::InvalidTable(format!(
                "{} outcomes given, need {n} units x {k} treatments",
                y.len()
            )));
        }
        if let Some(v) = y.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidTable(format!("non-finite outcome {v}")));
        }
        let mut members = vec![Vec::new(); w_count];
        for (i, &w) in unit_whole_plot.iter().enumerate() {
            if w >= w_count {
                return Err(Error::InvalidTable(format!(
                    "unit {i} assigned to unknown whole plot {w}"
                )));
            }
            members[w].push(i);
        }
        for (w, m) in members.iter().enumerate() {
            if m.len() != design.size(w) {
                return Err(Error::InvalidTable(format!(
                    "whole plot {w} has {} units, design says {}",
                    m.len(),
                    design.size(w)
                )));
            }
        }
        let mut wp_means = vec![0.0; w_count * k];
        for (w, m) in members.iter().enumerate() {
            for t in 0..k {
                wp_means[w * k + t] =
                    compensated_sum(m.iter().map(|&i| y[i * k + t])) / m.len() as f64;
            }
        }
        Ok(PotentialOutcomeTable {
            design,
            unit_whole_plot,
            members,
            y,
            wp_means,
        })
    }

    /// Units numbered consecutively whole plot by whole plot; `rows[i]` holds
    /// unit `i`'s outcomes in treatment-index order.
    pub fn contiguous(design: Arc<SplitPlotDesign>, rows: &[Vec<f64>]) -> Result<Self> {
        let unit_whole_plot = contiguous_membership(&design);
        let y = rows.iter().flatten().copied().collect();
        Self::new(design, unit_whole_plot, y)
    }

    pub fn design(&self) -> &SplitPlotDesign {
        &self.design
    }

    pub fn design_arc(&self) -> &Arc<SplitPlotDesign> {
        &self.design
    }

    pub fn n_units(&self) -> usize {
        self.unit_whole_plot.len()
    }

    pub fn whole_plot_of(&self, unit: usize) -> usize {
        self.unit_whole_plot[unit]
    }

    pub fn unit_whole_plot(&self) -> &[usize] {
        &self.unit_whole_plot
    }

    /// Units of whole plot `w`, ascending.
    pub fn members(&self, w: usize) -> &[usize] {
        &self.members[w]
    }

    fn k(&self) -> usize {
        self.design.structure().n_treatments()
    }

    pub fn y(&self, unit: usize, t: Treatment) -> f64 {
        self.y[unit * self.k() + self.design.structure().index(t)]
    }

    pub fn y_flat(&self, unit: usize, k: usize) -> f64 {
        self.y[unit * self.k() + k]
    }

    pub fn unit_row(&self, unit: usize) -> &[f64] {
        let k = self.k();
        &self.y[unit * k..(unit + 1) * k]
    }

    fn wp_mean_flat(&self, w: usize, k: usize) -> f64 {
        self.wp_means[w * self.k() + k]
    }

    fn recompute_means(&mut self) {
        let k = self.k();
        for (w, m) in self.members.iter().enumerate() {
            for t in 0..k {
                self.wp_means[w * k + t] =
                    compensated_sum(m.iter().map(|&i| self.y[i * k + t])) / m.len() as f64;
            }
        }
    }

    /// Applies `f(unit, treatment_index, value) -> new value` to every cell.
    pub fn map_outcomes(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        let k = self.k();
        for (idx, v) in out.y.iter_mut().enumerate() {
            *v = f(idx / k, idx % k, *v);
        }
        out.recompute_means();
        out
    }
}

pub(crate) fn contiguous_membership(design: &SplitPlotDesign) -> Vec<usize> {
    design
        .whole_plot_sizes()
        .iter()
        .enumerate()
        .flat_map(|(w, &m)| std::iter::repeat_n(w, m))
        .collect()
}

fn check_unit(table: &PotentialOutcomeTable, unit: usize, t: Treatment) -> Result<()> {
    let s = table.design().structure();
    if unit >= table.n_units() {
        return Err(Error::domain(format!("unknown unit {unit}")));
    }
    if t.z1 >= s.n_z1() || t.z2 >= s.n_z2() {
        return Err(Error::domain(format!("unknown treatment {t:?}")));
    }
    Ok(())
}

/// `U_i = (M_w / M̄) Y_i(z1 z2)` for the whole plot `w` containing unit `i`.
pub fn adjusted_outcome(table: &PotentialOutcomeTable, unit: usize, t: Treatment) -> Result<f64> {
    check_unit(table, unit, t)?;
    Ok(table.design().size_ratio(table.whole_plot_of(unit)) * table.y(unit, t))
}

/// `Ȳ(z1 z2)`, the average over all `N` units.
pub fn population_mean(table: &PotentialOutcomeTable, t: Treatment) -> f64 {
    let k = table.design().structure().index(t);
    compensated_sum((0..table.n_units()).map(|i| table.y_flat(i, k))) / table.n_units() as f64
}

/// `Ȳ_w(z1 z2)`, the average over the units of whole plot `w`.
pub fn whole_plot_mean(table: &PotentialOutcomeTable, w: usize, t: Treatment) -> f64 {
    table.wp_mean_flat(w, table.design().structure().index(t))
}

/// Unit-level contrast `τ_i = Σ g(z1 z2) Y_i(z1 z2)`.
pub fn unit_contrast(table: &PotentialOutcomeTable, contrast: &ContrastSpec, unit: usize) -> f64 {
    compensated_sum(
        contrast
            .coefficients()
            .iter()
            .zip(table.unit_row(unit))
            .map(|(g, y)| g * y),
    )
}

/// The estimand `τ̄ = Σ g(z1 z2) Ȳ(z1 z2)`.
pub fn finite_population_contrast(table: &PotentialOutcomeTable, contrast: &ContrastSpec) -> f64 {
    let s = table.design().structure();
    compensated_sum(
        s.treatments()
            .map(|t| contrast.coefficient(s, t) * population_mean(table, t)),
    )
}

/// Whole-plot contrasts `τ̄_w = Σ g(z1 z2) Ȳ_w(z1 z2)`, one per whole plot.
pub fn whole_plot_contrasts(table: &PotentialOutcomeTable, contrast: &ContrastSpec) -> Vec<f64> {
    let g = contrast.coefficients();
    (0..table.design().n_whole_plots())
        .map(|w| {
            compensated_sum(
                g.iter()
                    .enumerate()
                    .map(|(k, c)| c * table.wp_mean_flat(w, k)),
            )
        })
        .collect()
}

/// Between-whole-plot covariance `S_bt` of the adjusted whole-plot means.
pub fn s_between(table: &PotentialOutcomeTable, t: Treatment, t_star: Treatment) -> f64 {
    let d = table.design();
    let s = d.structure();
    let (a, b) = (s.index(t), s.index(t_star));
    let w_count = d.n_whole_plots();
    let ubar_w = |w: usize, k: usize| d.size_ratio(w) * table.wp_mean_flat(w, k);
    let ubar = |k: usize| compensated_sum((0..w_count).map(|w| ubar_w(w, k))) / w_count as f64;
    let (ua, ub) = (ubar(a), ubar(b));
    let m_bar = crate::design::mean_whole_plot_size(d);
    m_bar / (w_count - 1) as f64
        * compensated_sum((0..w_count).map(|w| (ubar_w(w, a) - ua) * (ubar_w(w, b) - ub)))
}

/// Within-whole-plot covariance `S_in,w` of the adjusted unit outcomes.
pub fn s_within(table: &PotentialOutcomeTable, w: usize, t: Treatment, t_star: Treatment) -> f64 {
    let d = table.design();
    let s = d.structure();
    let (a, b) = (s.index(t), s.index(t_star));
    let ratio = d.size_ratio(w);
    let (ma, mb) = (
        ratio * table.wp_mean_flat(w, a),
        ratio * table.wp_mean_flat(w, b),
    );
    let units = table.members(w);
    compensated_sum(
        units
            .iter()
            .map(|&i| (ratio * table.y_flat(i, a) - ma) * (ratio * table.y_flat(i, b) - mb)),
    ) / (units.len() - 1) as f64
}

/// Heterogeneity bias `Δ = Σ_w ((M_w/M̄) τ̄_w - τ̄)^2 / (W (W - 1))`.
pub fn delta(table: &PotentialOutcomeTable, contrast: &ContrastSpec) -> f64 {
    let d = table.design();
    let tau_w = whole_plot_contrasts(table, contrast);
    delta_from_contrasts(d, &tau_w)
}

/// `Δ` computed from already-known whole-plot contrasts.
pub fn delta_from_contrasts(design: &SplitPlotDesign, tau_w: &[f64]) -> f64 {
    let w_count = design.n_whole_plots() as f64;
    let scaled: Vec<f64> = tau_w
        .iter()
        .enumerate()
        .map(|(w, t)| design.size_ratio(w) * t)
        .collect();
    let tau = compensated_sum(scaled.iter().copied()) / w_count;
    compensated_sum(scaled.iter().map(|s| (s - tau) * (s - tau))) / (w_count * (w_count - 1.0))
}

/// Bias `Δ̃ = τ̄_wᵀ B τ̄_w / N^2` of the corrected variance estimator.
pub fn delta_tilde(
    table: &PotentialOutcomeTable,
    contrast: &ContrastSpec,
    b: &BMatrix,
) -> Result<f64> {
    let tau_w = whole_plot_contrasts(table, contrast);
    delta_tilde_from_contrasts(table.design(), &tau_w, b)
}

pub fn delta_tilde_from_contrasts(
    design: &SplitPlotDesign,
    tau_w: &[f64],
    b: &BMatrix,
) -> Result<f64> {
    if b.dim() != tau_w.len() {
        return Err(Error::DimensionMismatch {
            expected: tau_w.len(),
            got: b.dim(),
        });
    }
    let n = design.n_units() as f64;
    Ok(b.quadratic_form(tau_w) / (n * n))
}

fn require_observable(design: &SplitPlotDesign, contrast: &ContrastSpec) -> Result<()> {
    let s = design.structure();
    for t in s.treatments() {
        if contrast.coefficient(s, t) == 0.0 {
            continue;
        }
        if design.r1(t.z1) == 0 {
            return Err(Error::domain(format!(
                "treatment {} has nonzero weight but whole-plot level {} is never assigned",
                s.label(t),
                s.z1_levels()[t.z1]
            )));
        }
        if let Some(w) = (0..design.n_whole_plots()).find(|&w| design.r2(w, t.z2) == 0) {
            return Err(Error::domain(format!(
                "treatment {} has nonzero weight but sub-plot level {} has no replication in whole plot {w}",
                s.label(t),
                s.z2_levels()[t.z2]
            )));
        }
    }
    Ok(())
}

/// Exact randomization variance of the point estimator: between term plus
/// within term minus `Δ`.
pub fn theoretical_variance(table: &PotentialOutcomeTable, contrast: &ContrastSpec) -> Result<f64> {
    let d = table.design();
    require_observable(d, contrast)?;
    let s = d.structure();
    let w_count = d.n_whole_plots();
    let wf = w_count as f64;
    let m_bar = crate::design::mean_whole_plot_size(d);

    let mut terms = Vec::new();
    for z1 in 0..s.n_z1() {
        let r1 = d.r1(z1) as f64;
        for z2 in 0..s.n_z2() {
            let t = Treatment { z1, z2 };
            let g = contrast.coefficient(s, t);
            if g == 0.0 {
                continue;
            }
            for z2s in 0..s.n_z2() {
                let ts = Treatment { z1, z2: z2s };
                let gs = contrast.coefficient(s, ts);
                if gs == 0.0 {
                    continue;
                }
                let within = compensated_sum(
                    (0..w_count).map(|w| s_within(table, w, t, ts) / (wf * d.size(w) as f64)),
                );
                terms.push(g * gs / r1 * (s_between(table, t, ts) / m_bar - within));
            }
            let diag = compensated_sum(
                (0..w_count).map(|w| s_within(table, w, t, t) / d.r2(w, z2) as f64),
            );
            terms.push(g * g / (wf * r1) * diag);
        }
    }
    terms.push(-delta(table, contrast));
    Ok(compensated_sum(terms))
}

/// Randomization covariance of the adjusted observed means `Ū^obs(t)` and
/// `Ū^obs(t*)`. Summing `g g cov` over all pairs reproduces
/// [`theoretical_variance`].
pub fn mean_covariance(
    table: &PotentialOutcomeTable,
    t: Treatment,
    t_star: Treatment,
) -> Result<f64> {
    let d = table.design();
    let w_count = d.n_whole_plots();
    let wf = w_count as f64;
    let n = d.n_units() as f64;
    let m_bar = crate::design::mean_whole_plot_size(d);
    let sbt = s_between(table, t, t_star);
    let mut out = -sbt / n;
    if t.z1 == t_star.z1 {
        let r1 = d.r1(t.z1);
        if r1 == 0 {
            return Err(Error::domain("whole-plot level never assigned"));
        }
        let r1 = r1 as f64;
        let within = compensated_sum(
            (0..w_count).map(|w| s_within(table, w, t, t_star) / (wf * d.size(w) as f64 * r1)),
        );
        out += sbt / (m_bar * r1) - within;
        if t.z2 == t_star.z2 {
            let mut terms = Vec::with_capacity(w_count);
            for w in 0..w_count {
                let r2 = d.r2(w, t.z2);
                if r2 == 0 {
                    return Err(Error::domain(format!(
                        "sub-plot level has no replication in whole plot {w}"
                    )));
                }
                terms.push(s_within(table, w, t, t) / (wf * r1 * r2 as f64));
            }
            out += compensated_sum(terms);
        }
    }
    Ok(out)
}

/// True when `Ȳ_w(t) - Ȳ_w(t*)` is the same in every whole plot for every pair
/// of treatments, within [`ADDITIVITY_TOLERANCE`].
pub fn check_between_wp_additivity(table: &PotentialOutcomeTable) -> bool {
    let d = table.design();
    let k = d.structure().n_treatments();
    (1..k).all(|t| {
        let diff = |w: usize| table.wp_mean_flat(w, t) - table.wp_mean_flat(w, 0);
        let first = diff(0);
        (1..d.n_whole_plots()).all(|w| (diff(w) - first).abs() <= ADDITIVITY_TOLERANCE)
    })
}

/// Builds a table whose whole-plot means are `base[t] + shifts[w]`.
///
/// Units are numbered contiguously by whole plot. `deviations` (row-major
/// `N x K`) supplies unit-level variation; it is centred within each whole
/// plot and treatment so it never moves the whole-plot means.
pub fn make_between_wp_additive(
    design: Arc<SplitPlotDesign>,
    base: &[f64],
    shifts: &[f64],
    deviations: &[f64],
) -> Result<PotentialOutcomeTable> {
    let k = design.structure().n_treatments();
    let n = design.n_units();
    if base.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: base.len(),
        });
    }
    if shifts.len() != design.n_whole_plots() {
        return Err(Error::DimensionMismatch {
            expected: design.n_whole_plots(),
            got: shifts.len(),
        });
    }
    if deviations.len() != n * k {
        return Err(Error::DimensionMismatch {
            expected: n * k,
            got: deviations.len(),
        });
    }
    let membership = contiguous_membership(&design);
    let mut y = vec![0.0; n * k];
    let mut start = 0;
    for (w, &m) in design.whole_plot_sizes().iter().enumerate() {
        for t in 0..k {
            let centre =
                compensated_sum((start..start + m).map(|i| deviations[i * k + t])) / m as f64;
            for i in start..start + m {
                y[i * k + t] = base[t] + shifts[w] + (deviations[i * k + t] - centre);
            }
        }
        start += m;
    }
    PotentialOutcomeTable::new(design, membership, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bmatrix::{b_balanced, BMatrix, Provenance};
    use crate::design::FactorialStructure;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn design(sizes: Vec<usize>, r2: Vec<Vec<usize>>) -> Arc<SplitPlotDesign> {
        Arc::new(
            SplitPlotDesign::new(FactorialStructure::two_by_two(), sizes, vec![2, 2], r2).unwrap(),
        )
    }

    fn school() -> Arc<SplitPlotDesign> {
        design(
            vec![8, 8, 12, 12],
            vec![vec![4, 4], vec![4, 4], vec![6, 6], vec![6, 6]],
        )
    }

    fn random_table(d: &Arc<SplitPlotDesign>, seed: u64) -> PotentialOutcomeTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..d.n_units())
            .map(|_| (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        PotentialOutcomeTable::contiguous(d.clone(), &rows).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        crate::numeric::approx_eq(a, b, 1e-12, 1e-12)
    }

    const T00: Treatment = Treatment { z1: 0, z2: 0 };

    #[test]
    fn adjusted_outcome_scales_by_size_ratio() {
        let d = school();
        let rows = vec![vec![5.0; 4]; 40];
        let table = PotentialOutcomeTable::contiguous(d, &rows).unwrap();
        // unit 30 sits in the third whole plot (M = 12, mean size 10)
        assert!(close(adjusted_outcome(&table, 30, T00).unwrap(), 6.0));
        assert!(close(adjusted_outcome(&table, 0, T00).unwrap(), 4.0));
        assert!(adjusted_outcome(&table, 40, T00).is_err());
        assert!(adjusted_outcome(&table, 0, Treatment { z1: 2, z2: 0 }).is_err());
    }

    #[test]
    fn population_mean_is_size_weighted_average_of_plot_means() {
        let d = school();
        let table = random_table(&d, 1);
        for t in d.structure().treatments() {
            let brute: f64 = (0..40).map(|i| table.y(i, t)).sum::<f64>() / 40.0;
            assert!(close(population_mean(&table, t), brute));
            let weighted: f64 = (0..4)
                .map(|w| d.size_ratio(w) * whole_plot_mean(&table, w, t))
                .sum::<f64>()
                / 4.0;
            assert!(close(population_mean(&table, t), weighted));
            // the plot-level average of adjusted whole-plot means equals the plain mean
            let u: f64 = (0..4)
                .map(|w| {
                    let m = table.members(w);
                    m.iter()
                        .map(|&i| adjusted_outcome(&table, i, t).unwrap())
                        .sum::<f64>()
                        / m.len() as f64
                })
                .sum::<f64>()
                / 4.0;
            assert!(close(u, brute));
        }
    }

    #[test]
    fn estimand_matches_unit_contrasts_and_plot_contrasts() {
        let d = school();
        let g = ContrastSpec::interaction_2x2();
        for seed in 0..5 {
            let table = random_table(&d, seed);
            let tau = finite_population_contrast(&table, &g);
            let units: f64 = (0..40).map(|i| unit_contrast(&table, &g, i)).sum::<f64>() / 40.0;
            assert!(close(tau, units));
            let tw = whole_plot_contrasts(&table, &g);
            let via_plots: f64 = tw
                .iter()
                .enumerate()
                .map(|(w, t)| d.size_ratio(w) * t)
                .sum::<f64>()
                / 4.0;
            assert!(close(tau, via_plots));
        }
    }

    #[test]
    fn variance_components_match_brute_force() {
        let d = design(
            vec![2, 3, 4, 5],
            vec![vec![1, 1], vec![1, 2], vec![2, 2], vec![2, 3]],
        );
        let table = random_table(&d, 7);
        let m_bar = 14.0 / 4.0;
        let ts: Vec<Treatment> = d.structure().treatments().collect();
        for &a in &ts {
            for &b in &ts {
                // direct evaluation of the display formulas
                let u = |i: usize, t: Treatment| {
                    let w = table.whole_plot_of(i);
                    d.size(w) as f64 / m_bar * table.y(i, t)
                };
                let ubar_w = |w: usize, t: Treatment| {
                    table.members(w).iter().map(|&i| u(i, t)).sum::<f64>() / d.size(w) as f64
                };
                let ubar = |t: Treatment| (0..4).map(|w| ubar_w(w, t)).sum::<f64>() / 4.0;
                let sbt = m_bar / 3.0
                    * (0..4)
                        .map(|w| (ubar_w(w, a) - ubar(a)) * (ubar_w(w, b) - ubar(b)))
                        .sum::<f64>();
                assert!(close(s_between(&table, a, b), sbt));
                for w in 0..4 {
                    let sin = table
                        .members(w)
                        .iter()
                        .map(|&i| (u(i, a) - ubar_w(w, a)) * (u(i, b) - ubar_w(w, b)))
                        .sum::<f64>()
                        / (d.size(w) - 1) as f64;
                    assert!(close(s_within(&table, w, a, b), sin));
                }
            }
            assert!(s_between(&table, a, a) >= 0.0);
        }
    }

    #[test]
    fn delta_for_equal_plot_contrasts_in_school_design() {
        let d = school();
        let got = delta_from_contrasts(&d, &[1.0; 4]);
        assert!(close(got, 16.0 / 1200.0));
        let balanced = design(vec![3; 4], vec![vec![1, 2]; 4]);
        assert!(close(delta_from_contrasts(&balanced, &[2.5; 4]), 0.0));
    }

    #[test]
    fn delta_matches_quadratic_expansion() {
        let d = design(
            vec![2, 3, 4, 5],
            vec![vec![1, 1], vec![1, 2], vec![2, 2], vec![2, 3]],
        );
        let g = ContrastSpec::interaction_2x2();
        for seed in 0..5 {
            let table = random_table(&d, 100 + seed);
            let tw = whole_plot_contrasts(&table, &g);
            let m: Vec<f64> = d.whole_plot_sizes().iter().map(|&x| x as f64).collect();
            let mut diag = 0.0;
            let mut off = 0.0;
            for w in 0..4 {
                diag += m[w] * m[w] * tw[w] * tw[w];
                for v in 0..4 {
                    if v != w {
                        off += m[w] * m[v] * tw[w] * tw[v];
                    }
                }
            }
            let expansion = (diag - off / 3.0) / (14.0 * 14.0);
            let got = delta(&table, &g);
            assert!(close(got, expansion));
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn delta_tilde_with_balanced_matrix_equals_delta() {
        let d = design(vec![3; 4], vec![vec![1, 2]; 4]);
        let g = ContrastSpec::interaction_2x2();
        let b = b_balanced(3, 4).unwrap();
        for seed in 0..5 {
            let table = random_table(&d, 200 + seed);
            assert!(close(
                delta_tilde(&table, &g, &b).unwrap(),
                delta(&table, &g)
            ));
        }
        let wrong =
            BMatrix::from_dense(&[vec![1.0, -1.0], vec![-1.0, 1.0]], Provenance::Explicit).unwrap();
        let table = random_table(&d, 0);
        assert!(matches!(
            delta_tilde(&table, &g, &wrong),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn covariance_identity_sums_to_theoretical_variance() {
        let d = design(
            vec![2, 3, 4, 5],
            vec![vec![1, 1], vec![1, 2], vec![2, 2], vec![2, 3]],
        );
        let s = d.structure().clone();
        let g = ContrastSpec::new(&s, vec![0.5, -0.25, 0.25, -0.5]).unwrap();
        let table = random_table(&d, 9);
        let mut total = 0.0;
        for a in s.treatments() {
            for b in s.treatments() {
                total += g.coefficient(&s, a)
                    * g.coefficient(&s, b)
                    * mean_covariance(&table, a, b).unwrap();
            }
        }
        let v = theoretical_variance(&table, &g).unwrap();
        assert!(crate::numeric::approx_eq(total, v, 1e-10, 1e-12));
        assert!(v >= 0.0);
    }

    #[test]
    fn theoretical_variance_of_constant_table_is_zero() {
        let d = school();
        let table = PotentialOutcomeTable::contiguous(d, &vec![vec![3.0; 4]; 40]).unwrap();
        let v = theoretical_variance(&table, &ContrastSpec::interaction_2x2()).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn balanced_variance_specialization() {
        // M_w = M, r2 constant: var = Σ g g' S_bt / (M r1) + Σ g² S_in(t,t)/(W r1 r2)
        // - Σ g g' S_in / (W M r1) over same-z1 pairs, with Δ = 0 under equal τ̄_w absent;
        // here Δ is subtracted explicitly
        let d = design(vec![4; 4], vec![vec![2, 2]; 4]);
        let s = d.structure().clone();
        let g = ContrastSpec::interaction_2x2();
        let table = random_table(&d, 5);
        let mut v = 0.0;
        for a in s.treatments() {
            for b in s.treatments() {
                if a.z1 != b.z1 {
                    continue;
                }
                let gg = g.coefficient(&s, a) * g.coefficient(&s, b);
                let sin: f64 = (0..4).map(|w| s_within(&table, w, a, b)).sum::<f64>() / 4.0;
                v += gg / 2.0 * (s_between(&table, a, b) / 4.0 - sin / 4.0);
                if a == b {
                    v += gg / 2.0 * sin / 2.0;
                }
            }
        }
        v -= delta(&table, &g);
        assert!(crate::numeric::approx_eq(
            theoretical_variance(&table, &g).unwrap(),
            v,
            1e-12,
            1e-12
        ));
    }

    #[test]
    fn unobservable_treatment_is_rejected() {
        let d = Arc::new(
            SplitPlotDesign::new(
                FactorialStructure::two_by_two(),
                vec![2; 4],
                vec![2, 2],
                vec![vec![2, 0], vec![1, 1], vec![1, 1], vec![1, 1]],
            )
            .unwrap(),
        );
        let table = PotentialOutcomeTable::contiguous(d, &vec![vec![1.0; 4]; 8]).unwrap();
        assert!(theoretical_variance(&table, &ContrastSpec::interaction_2x2()).is_err());
    }

    #[test]
    fn additive_tables_and_remark_formula() {
        let d = design(
            vec![2, 3, 4, 5],
            vec![vec![1, 1], vec![1, 2], vec![2, 2], vec![2, 3]],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dev: Vec<f64> = (0..14 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = [1.0, 2.0, -0.5, 3.5];
        let table =
            make_between_wp_additive(d.clone(), &base, &[0.0, 1.0, -2.0, 0.5], &dev).unwrap();
        assert!(check_between_wp_additivity(&table));
        let g = ContrastSpec::interaction_2x2();
        let tw = whole_plot_contrasts(&table, &g);
        assert!(tw.iter().all(|t| close(*t, tw[0])));
        let tau = finite_population_contrast(&table, &g);
        let m_bar = 3.5;
        let spread: f64 = d
            .whole_plot_sizes()
            .iter()
            .map(|&m| (m as f64 - m_bar).powi(2))
            .sum();
        let remark = tau * tau * spread / (4.0 * 3.0 * m_bar * m_bar);
        assert!(close(delta(&table, &g), remark));

        let perturbed = table.map_outcomes(|i, k, v| if i == 0 && k == 3 { v + 1.0 } else { v });
        assert!(!check_between_wp_additivity(&perturbed));
    }

    #[test]
    fn strictly_additive_table_has_unit_contrast() {
        let d = school();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Y_i(t) = a_i + 4 g(t): every unit contrast under g equals 4 Σ g² = 1
        let g = ContrastSpec::interaction_2x2();
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let a: f64 = rng.gen_range(-3.0..3.0);
                g.coefficients().iter().map(|c| a + 4.0 * c).collect()
            })
            .collect();
        let table = PotentialOutcomeTable::contiguous(d, &rows).unwrap();
        assert!(close(finite_population_contrast(&table, &g), 1.0));
        assert!(check_between_wp_additivity(&table));
    }

    #[test]
    fn table_construction_is_validated() {
        let d = school();
        assert!(PotentialOutcomeTable::contiguous(d.clone(), &vec![vec![0.0; 4]; 39]).is_err());
        assert!(PotentialOutcomeTable::new(d.clone(), vec![0; 40], vec![0.0; 160]).is_err());
        let mut rows = vec![vec![0.0; 4]; 40];
        rows[3][1] = f64::NAN;
        assert!(PotentialOutcomeTable::contiguous(d, &rows).is_err());
    }
}
