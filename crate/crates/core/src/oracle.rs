//! Exhaustive-enumeration checks of the expectation identities on designs
//! small enough to list every assignment.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bmatrix::{minimax_b, BMatrix};
use crate::design::{
    mean_whole_plot_size, ContrastSpec, FactorialStructure, SplitPlotDesign, Treatment,
};
use crate::error::{Error, Result};
use crate::estimators;
use crate::numeric::compensated_sum;
use crate::outcomes::{self, PotentialOutcomeTable};
use crate::randomize::{
    enumerate_assignments, observe, ObservedDataset, DEFAULT_ENUMERATION_GUARD,
};

pub const RELATIVE_TOLERANCE: f64 = 1e-9;
pub const ABSOLUTE_FLOOR: f64 = 1e-12;

/// Balanced design: four whole plots of two units, one unit per sub-plot level.
pub fn design_a() -> SplitPlotDesign {
    SplitPlotDesign::new(
        FactorialStructure::two_by_two(),
        vec![2; 4],
        vec![2, 2],
        vec![vec![1, 1]; 4],
    )
    .expect("fixed design is valid")
}

/// Unbalanced design with sizes (2, 2, 3, 3).
pub fn design_b() -> SplitPlotDesign {
    SplitPlotDesign::new(
        FactorialStructure::two_by_two(),
        vec![2, 2, 3, 3],
        vec![2, 2],
        vec![vec![1, 1], vec![1, 1], vec![1, 2], vec![1, 2]],
    )
    .expect("fixed design is valid")
}

/// A science table, a contrast and an optional correction matrix.
#[derive(Debug, Clone)]
pub struct OracleFixture {
    pub table: PotentialOutcomeTable,
    pub contrast: ContrastSpec,
    pub b: Option<BMatrix>,
}

impl OracleFixture {
    pub fn design(&self) -> &SplitPlotDesign {
        self.table.design()
    }
}

/// Statistics whose exact expectation can be requested by name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Statistic {
    One,
    TauHat,
    VHat,
    VTilde,
    H(usize, usize),
    SHat {
        z1: usize,
        z2: usize,
        z2_star: usize,
    },
}

impl Statistic {
    fn eval(&self, fixture: &OracleFixture, data: &ObservedDataset) -> Result<f64> {
        let c = &fixture.contrast;
        match *self {
            Statistic::One => Ok(1.0),
            Statistic::TauHat => estimators::point_estimate(data, c),
            Statistic::VHat => estimators::v_hat(data, c),
            Statistic::VTilde => {
                let b = fixture
                    .b
                    .as_ref()
                    .ok_or_else(|| Error::domain("the fixture carries no B matrix"))?;
                estimators::v_tilde(data, c, b)
            }
            Statistic::H(w, v) => estimators::h_ww(data, c, w, v),
            Statistic::SHat { z1, z2, z2_star } => estimators::s_hat(data, z1, z2, z2_star),
        }
    }
}

/// Probability-weighted sum of `f` over every assignment.
pub fn exact_expectation_with<F>(fixture: &OracleFixture, mut f: F) -> Result<f64>
where
    F: FnMut(&ObservedDataset) -> Result<f64>,
{
    let mut terms = Vec::new();
    for (a, p) in enumerate_assignments(fixture.design(), DEFAULT_ENUMERATION_GUARD)? {
        terms.push(p * f(&observe(&fixture.table, &a)?)?);
    }
    Ok(compensated_sum(terms))
}

pub fn exact_expectation(fixture: &OracleFixture, statistic: Statistic) -> Result<f64> {
    exact_expectation_with(fixture, |d| statistic.eval(fixture, d))
}

/// Randomization variance of the point estimator by enumeration.
pub fn exact_variance(fixture: &OracleFixture) -> Result<f64> {
    let mean = exact_expectation(fixture, Statistic::TauHat)?;
    exact_expectation_with(fixture, |d| {
        let e = estimators::point_estimate(d, &fixture.contrast)? - mean;
        Ok(e * e)
    })
}

/// One enumerated quantity against its closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub enumerated: f64,
    pub formula: f64,
    pub abs_error: f64,
    pub pass: bool,
}

impl CheckReport {
    pub fn new(name: impl Into<String>, enumerated: f64, formula: f64) -> Self {
        let abs_error = (enumerated - formula).abs();
        let scale = enumerated.abs().max(formula.abs());
        CheckReport {
            name: name.into(),
            enumerated,
            formula,
            abs_error,
            pass: abs_error <= (RELATIVE_TOLERANCE * scale).max(ABSOLUTE_FLOOR),
        }
    }
}

/// Per-assignment values gathered in one enumeration pass.
struct Enumerated {
    p: Vec<f64>,
    tau_hat: Vec<f64>,
    v_hat: Vec<f64>,
    v_tilde: Vec<f64>,
    /// Indexed `w * W + v`; diagonal unused.
    h: Vec<Vec<f64>>,
    /// Indexed `(z1 * K2 + z2) * K2 + z2*`.
    s_hat: Vec<Vec<f64>>,
    max_adjusted_mean_gap: f64,
}

fn expect(p: &[f64], x: &[f64]) -> f64 {
    compensated_sum(p.iter().zip(x).map(|(p, x)| p * x))
}

/// Largest gap between the size-weighted observed mean and the plain average
/// of within-plot means of adjusted outcomes.
fn adjusted_mean_gap(data: &ObservedDataset) -> Result<f64> {
    let d = data.design();
    let s = d.structure();
    let mut gap: f64 = 0.0;
    for z1 in 0..s.n_z1() {
        let t1 = data.t1(z1);
        if t1.is_empty() {
            continue;
        }
        for z2 in 0..s.n_z2() {
            if t1.iter().any(|&w| data.plot_mean(w, z2).is_none()) {
                continue;
            }
            let means: Vec<f64> = t1
                .iter()
                .map(|&w| {
                    let u: Vec<f64> = data
                        .units()
                        .iter()
                        .filter(|u| u.whole_plot == w && u.z2 == z2)
                        .map(|u| d.size_ratio(w) * u.y)
                        .collect();
                    compensated_sum(u.iter().copied()) / u.len() as f64
                })
                .collect();
            let direct = compensated_sum(means) / t1.len() as f64;
            gap = gap.max((estimators::ybar_obs(data, z1, z2)? - direct).abs());
        }
    }
    Ok(gap)
}

fn enumerate_all(fixture: &OracleFixture) -> Result<Enumerated> {
    let d = fixture.design();
    let w_count = d.n_whole_plots();
    let k2 = d.structure().n_z2();
    let n_s = d.structure().n_z1() * k2 * k2;
    let mut out = Enumerated {
        p: Vec::new(),
        tau_hat: Vec::new(),
        v_hat: Vec::new(),
        v_tilde: Vec::new(),
        h: vec![Vec::new(); w_count * w_count],
        s_hat: vec![Vec::new(); n_s],
        max_adjusted_mean_gap: 0.0,
    };
    let c = &fixture.contrast;
    for (a, p) in enumerate_assignments(d, DEFAULT_ENUMERATION_GUARD)? {
        let data = observe(&fixture.table, &a)?;
        out.p.push(p);
        out.tau_hat.push(estimators::point_estimate(&data, c)?);
        out.v_hat.push(estimators::v_hat(&data, c)?);
        if let Some(b) = &fixture.b {
            out.v_tilde.push(estimators::v_tilde(&data, c, b)?);
        }
        for w in 0..w_count {
            for v in 0..w_count {
                if w != v {
                    out.h[w * w_count + v].push(estimators::h_ww(&data, c, w, v)?);
                }
            }
        }
        for z1 in 0..d.structure().n_z1() {
            for z2 in 0..k2 {
                for z2s in 0..k2 {
                    // cells unobservable in this design are skipped
                    if let Ok(v) = estimators::s_hat(&data, z1, z2, z2s) {
                        out.s_hat[(z1 * k2 + z2) * k2 + z2s].push(v);
                    }
                }
            }
        }
        out.max_adjusted_mean_gap = out.max_adjusted_mean_gap.max(adjusted_mean_gap(&data)?);
    }
    Ok(out)
}

/// Closed form of `E[Ŝ(z1 z2, z1 z2*)]`: the between-plot component plus the
/// average within-plot sampling covariance of the adjusted sub-plot means.
pub fn expected_s_hat(table: &PotentialOutcomeTable, z1: usize, z2: usize, z2_star: usize) -> f64 {
    let d = table.design();
    let t = Treatment { z1, z2 };
    let ts = Treatment { z1, z2: z2_star };
    let wf = d.n_whole_plots() as f64;
    let within = compensated_sum((0..d.n_whole_plots()).map(|w| {
        let mut v = -outcomes::s_within(table, w, t, ts) / d.size(w) as f64;
        if z2 == z2_star {
            v += outcomes::s_within(table, w, t, t) / d.r2(w, z2) as f64;
        }
        v
    }));
    outcomes::s_between(table, t, ts) / mean_whole_plot_size(d) + within / wf
}

/// Runs every identity on one fixture.
pub fn check_fixture(fixture: &OracleFixture) -> Result<Vec<CheckReport>> {
    let e = enumerate_all(fixture)?;
    let table = &fixture.table;
    let c = &fixture.contrast;
    let d = fixture.design();
    let mut out = Vec::new();

    out.push(CheckReport::new(
        "probabilities sum to one",
        compensated_sum(e.p.iter().copied()),
        1.0,
    ));

    let tau = outcomes::finite_population_contrast(table, c);
    let mean = expect(&e.p, &e.tau_hat);
    out.push(CheckReport::new("unbiased point estimator", mean, tau));

    let var_formula = outcomes::theoretical_variance(table, c)?;
    let dev: Vec<f64> = e.tau_hat.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var_enum = expect(&e.p, &dev);
    out.push(CheckReport::new(
        "exact sampling variance",
        var_enum,
        var_formula,
    ));

    let delta = outcomes::delta(table, c);
    out.push(CheckReport::new(
        "variance estimator bias is delta",
        expect(&e.p, &e.v_hat),
        var_formula + delta,
    ));

    if let Some(b) = &fixture.b {
        let delta_tilde = outcomes::delta_tilde(table, c, b)?;
        out.push(CheckReport::new(
            "corrected estimator bias is delta tilde",
            expect(&e.p, &e.v_tilde),
            var_formula + delta_tilde,
        ));
    }

    let w_count = d.n_whole_plots();
    let tau_w = outcomes::whole_plot_contrasts(table, c);
    let mut worst: Option<CheckReport> = None;
    for w in 0..w_count {
        for v in 0..w_count {
            if w == v {
                continue;
            }
            let r = CheckReport::new(
                format!("product estimator unbiased for plots {w},{v}"),
                expect(&e.p, &e.h[w * w_count + v]),
                tau_w[w] * tau_w[v],
            );
            // keep the first failure, otherwise the largest error
            if worst
                .as_ref()
                .is_none_or(|x| x.pass && (!r.pass || r.abs_error > x.abs_error))
            {
                worst = Some(r);
            }
        }
    }
    out.extend(worst);

    let k2 = d.structure().n_z2();
    for z1 in 0..d.structure().n_z1() {
        for z2 in 0..k2 {
            for z2s in 0..k2 {
                let vals = &e.s_hat[(z1 * k2 + z2) * k2 + z2s];
                if vals.len() == e.p.len() {
                    out.push(CheckReport::new(
                        format!("covariance estimator mean for {z1}|{z2},{z1}|{z2s}"),
                        expect(&e.p, vals),
                        expected_s_hat(table, z1, z2, z2s),
                    ));
                }
            }
        }
    }

    out.push(CheckReport::new(
        "weighted mean equals adjusted mean on every assignment",
        e.max_adjusted_mean_gap,
        0.0,
    ));
    Ok(out)
}

fn contrast_for(structure: &FactorialStructure, index: usize) -> ContrastSpec {
    let g = match index % 3 {
        0 => vec![0.25, -0.25, -0.25, 0.25],
        1 => vec![-0.5, -0.5, 0.5, 0.5],
        _ => vec![0.5, -0.5, 0.5, -0.5],
    };
    ContrastSpec::new(structure, g).expect("fixed contrasts are valid")
}

fn minimax_or_none(design: &SplitPlotDesign) -> Option<BMatrix> {
    minimax_b(design.whole_plot_sizes()).ok()
}

/// Table with entries drawn uniformly from `0..=9`. The contrast cycles
/// through interaction, whole-plot main effect and sub-plot main effect
/// with `index`; on 2x2 structures only.
pub fn random_integer_fixture(
    design: Arc<SplitPlotDesign>,
    seed: u64,
    index: u64,
) -> Result<OracleFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let k = design.structure().n_treatments();
    let rows: Vec<Vec<f64>> = (0..design.n_units())
        .map(|_| (0..k).map(|_| f64::from(rng.gen_range(0u8..=9))).collect())
        .collect();
    let contrast = if k == 4 {
        contrast_for(design.structure(), index as usize)
    } else {
        let mut g = vec![0.0; k];
        g[0] = 1.0;
        g[k - 1] = -1.0;
        ContrastSpec::new(design.structure(), g)?
    };
    let b = minimax_or_none(&design);
    Ok(OracleFixture {
        table: PotentialOutcomeTable::contiguous(design, &rows)?,
        contrast,
        b,
    })
}

/// Table satisfying between-whole-plot additivity, with integer base means,
/// integer plot shifts and integer unit deviations (centred within plots).
/// Uses the interaction contrast, with the base chosen so the estimand is 1.
pub fn additive_fixture(
    design: Arc<SplitPlotDesign>,
    seed: u64,
    index: u64,
) -> Result<OracleFixture> {
    let k = design.structure().n_treatments();
    if k != 4 {
        return Err(Error::domain(
            "additive fixtures use the 2x2 interaction contrast",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let base0: f64 = rng.gen_range(0..=9).into();
    let base = [base0 + 4.0, base0, base0, base0];
    let shifts: Vec<f64> = (0..design.n_whole_plots())
        .map(|_| f64::from(rng.gen_range(0u8..=9)))
        .collect();
    let dev: Vec<f64> = (0..design.n_units() * k)
        .map(|_| f64::from(rng.gen_range(0u8..=9)))
        .collect();
    let table = outcomes::make_between_wp_additive(design.clone(), &base, &shifts, &dev)?;
    Ok(OracleFixture {
        table,
        contrast: ContrastSpec::interaction_2x2(),
        b: minimax_or_none(&design),
    })
}

/// Outcome of a batch of fixtures.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub design_label: String,
    pub assignments: u128,
    pub fixtures: Vec<Vec<CheckReport>>,
}

impl OracleReport {
    pub fn all_pass(&self) -> bool {
        self.fixtures.iter().flatten().all(|c| c.pass)
    }

    pub fn n_checks(&self) -> usize {
        self.fixtures.iter().map(Vec::len).sum()
    }
}

/// Checks `n_fixtures` random integer tables on `design`.
pub fn run_oracle(
    design: Arc<SplitPlotDesign>,
    label: &str,
    seed: u64,
    n_fixtures: usize,
) -> Result<OracleReport> {
    let assignments = enumerate_assignments(&design, DEFAULT_ENUMERATION_GUARD)?.total();
    let fixtures = (0..n_fixtures as u64)
        .map(|i| check_fixture(&random_integer_fixture(design.clone(), seed, i)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleReport {
        design_label: label.to_string(),
        assignments,
        fixtures,
    })
}
