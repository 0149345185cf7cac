//! Strategies and property bodies shared by the property suite and the
//! acceptance harness.

#![allow(dead_code)]

use std::sync::Arc;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splitplot::bmatrix::{
    b_balanced, eigen_sym_vectors, exists_b, find_sign_vectors, minimax_b, solve_a_segment,
    steps_b, verify_c1_c2_c3,
};
use splitplot::design::{ContrastSpec, FactorialStructure, SplitPlotDesign};
use splitplot::estimators::{point_estimate, v_hat, ybar_obs};
use splitplot::outcomes::{
    delta, delta_tilde, finite_population_contrast, whole_plot_contrasts, PotentialOutcomeTable,
};
use splitplot::randomize::{draw_assignment, observe};

/// Cases per property; seven properties give 1400 cases in total.
pub const CASES: u32 = 200;

/// A random design with at least two whole plots per whole-plot level,
/// a random table, a random zero-sum contrast and an assignment seed.
#[derive(Debug, Clone)]
pub struct Case {
    pub table: PotentialOutcomeTable,
    pub contrast: ContrastSpec,
    pub assignment_seed: u64,
}

fn build_design(sizes: Vec<usize>, split1: usize, split2: Vec<usize>) -> SplitPlotDesign {
    let w = sizes.len();
    let a = 2 + split1 % (w - 3);
    let r2 = sizes
        .iter()
        .zip(&split2)
        .map(|(&m, &s)| {
            let b = 1 + s % (m - 1);
            vec![b, m - b]
        })
        .collect();
    SplitPlotDesign::new(FactorialStructure::two_by_two(), sizes, vec![a, w - a], r2)
        .expect("valid by construction")
}

pub fn case_strategy() -> impl Strategy<Value = Case> {
    (4usize..=7)
        .prop_flat_map(|w| {
            (
                prop::collection::vec(2usize..=9, w),
                any::<usize>(),
                prop::collection::vec(any::<usize>(), w),
                any::<u64>(),
                prop::array::uniform4(-1.0f64..1.0),
                any::<u64>(),
            )
        })
        .prop_filter("contrast must not vanish", |(.., g, _)| {
            let m = g.iter().sum::<f64>() / 4.0;
            g.iter().any(|x| (x - m).abs() > 1e-3)
        })
        .prop_map(|(sizes, split1, split2, table_seed, g, assignment_seed)| {
            let design = Arc::new(build_design(sizes, split1, split2));
            let mut rng = ChaCha8Rng::seed_from_u64(table_seed);
            let rows: Vec<Vec<f64>> = (0..design.n_units())
                .map(|_| (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect())
                .collect();
            let table =
                PotentialOutcomeTable::contiguous(design.clone(), &rows).expect("valid table");
            let m = g.iter().sum::<f64>() / 4.0;
            let mut g: Vec<f64> = g.iter().map(|x| x - m).collect();
            let drift: f64 = g.iter().sum();
            g[3] -= drift;
            let contrast = ContrastSpec::new(design.structure(), g).expect("zero-sum contrast");
            Case {
                table,
                contrast,
                assignment_seed,
            }
        })
}

/// Whole-plot sizes for which a correction matrix exists.
pub fn sizes_with_b() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=30, 3..=8)
        .prop_filter("largest size must be below the sum of the others", |s| {
            exists_b(s).unwrap()
        })
}

pub fn symmetric_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=8).prop_flat_map(|n| {
        prop::collection::vec(-10.0f64..10.0, n * (n + 1) / 2).prop_map(move |upper| {
            let mut a = vec![vec![0.0; n]; n];
            let mut k = 0;
            for i in 0..n {
                for j in i..n {
                    a[i][j] = upper[k];
                    a[j][i] = upper[k];
                    k += 1;
                }
            }
            a
        })
    })
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn plot_contrast_identity(case: Case) -> Result<(), TestCaseError> {
    let d = case.table.design();
    let tau = finite_population_contrast(&case.table, &case.contrast);
    let tw = whole_plot_contrasts(&case.table, &case.contrast);
    let w = d.n_whole_plots() as f64;
    let via: f64 = tw
        .iter()
        .enumerate()
        .map(|(i, t)| d.size_ratio(i) * t)
        .sum::<f64>()
        / w;
    prop_assert!(rel_close(tau, via, 1e-12), "{tau} vs {via}");
    Ok(())
}

pub fn adjusted_mean_identity(case: Case) -> Result<(), TestCaseError> {
    let d = case.table.design_arc().clone();
    let obs = observe(&case.table, &draw_assignment(&d, case.assignment_seed, 0)).unwrap();
    for z1 in 0..2 {
        let t1 = obs.t1(z1);
        for z2 in 0..2 {
            let direct: f64 = t1
                .iter()
                .map(|&w| {
                    let u: Vec<f64> = obs
                        .units()
                        .iter()
                        .filter(|u| u.whole_plot == w && u.z2 == z2)
                        .map(|u| d.size_ratio(w) * u.y)
                        .collect();
                    u.iter().sum::<f64>() / u.len() as f64
                })
                .sum::<f64>()
                / t1.len() as f64;
            let got = ybar_obs(&obs, z1, z2).unwrap();
            prop_assert!(rel_close(got, direct, 1e-12), "{got} vs {direct}");
        }
    }
    Ok(())
}

pub fn biases_nonnegative(case: Case) -> Result<(), TestCaseError> {
    let d = case.table.design();
    let dl = delta(&case.table, &case.contrast);
    prop_assert!(dl >= 0.0, "delta {dl}");
    if exists_b(d.whole_plot_sizes()).unwrap() {
        let b = minimax_b(d.whole_plot_sizes()).unwrap();
        let dt = delta_tilde(&case.table, &case.contrast, &b).unwrap();
        let scale: f64 = whole_plot_contrasts(&case.table, &case.contrast)
            .iter()
            .map(|t| t * t)
            .sum::<f64>()
            * b.lambda_max()
            / (d.n_units() * d.n_units()) as f64;
        prop_assert!(dt >= -1e-12 * scale.max(1.0), "delta tilde {dt}");
    }
    Ok(())
}

pub fn v_hat_nonnegative(case: Case) -> Result<(), TestCaseError> {
    let d = case.table.design_arc().clone();
    let obs = observe(&case.table, &draw_assignment(&d, case.assignment_seed, 1)).unwrap();
    let v = v_hat(&obs, &case.contrast).unwrap();
    prop_assert!(v >= -1e-12, "v_hat {v}");
    prop_assert!(point_estimate(&obs, &case.contrast).unwrap().is_finite());
    Ok(())
}

pub fn constructed_b_verifies((sizes, t): (Vec<usize>, f64)) -> Result<(), TestCaseError> {
    let b = minimax_b(&sizes).unwrap();
    let r = verify_c1_c2_c3(&b, &sizes).unwrap();
    prop_assert!(r.all_pass(), "minimax for {sizes:?}: {r:?}");
    let lower: f64 = sizes.iter().map(|&m| (m * m) as f64).sum::<f64>() / (sizes.len() - 1) as f64;
    prop_assert!(b.lambda_max() >= lower - 1e-9 * lower);

    let mut sorted = sizes.clone();
    sorted.sort_unstable();
    let x = find_sign_vectors(&sorted).unwrap().remove(0);
    let seg = solve_a_segment(&x, &sorted).unwrap();
    let (a1, a2) = seg.point(t);
    let b = steps_b(&sizes, &x, a1, a2).unwrap();
    let r = verify_c1_c2_c3(&b, &sizes).unwrap();
    prop_assert!(r.all_pass(), "steps for {sizes:?} at t={t}: {r:?}");
    Ok(())
}

pub fn eigen_checks(a: Vec<Vec<f64>>) -> Result<(), TestCaseError> {
    let n = a.len();
    let e = eigen_sym_vectors(&a).unwrap();
    let v = e.vectors.unwrap();
    let trace: f64 = (0..n).map(|i| a[i][i]).sum();
    let norm: f64 = a
        .iter()
        .flatten()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(1.0);
    prop_assert!((e.values.iter().sum::<f64>() - trace).abs() <= 1e-10 * norm);
    prop_assert!(e.values.windows(2).all(|p| p[0] <= p[1]));
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..n).map(|k| v[i][k] * v[j][k]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            prop_assert!((dot - want).abs() <= 1e-10, "orthogonality {i},{j}: {dot}");
        }
        // A v = λ v
        for r in 0..n {
            let av: f64 = (0..n).map(|k| a[r][k] * v[i][k]).sum();
            prop_assert!((av - e.values[i] * v[i][r]).abs() <= 1e-9 * norm);
        }
    }
    Ok(())
}

pub fn balanced_biases_agree((m, w, seed): (usize, usize, u64)) -> Result<(), TestCaseError> {
    let d = Arc::new(
        SplitPlotDesign::new(
            FactorialStructure::two_by_two(),
            vec![m; w],
            vec![2, w - 2],
            vec![vec![1, m - 1]; w],
        )
        .unwrap(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..d.n_units())
        .map(|_| (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect())
        .collect();
    let table = PotentialOutcomeTable::contiguous(d, &rows).unwrap();
    let g = ContrastSpec::interaction_2x2();
    let b = b_balanced(m, w).unwrap();
    let (dl, dt) = (delta(&table, &g), delta_tilde(&table, &g, &b).unwrap());
    prop_assert!(rel_close(dl, dt, 1e-10), "{dl} vs {dt}");
    Ok(())
}

/// Runs every property for `cases` cases each; returns `(name, cases run,
/// failure message)`.
pub fn run_all(cases: u32) -> Vec<(&'static str, u32, Option<String>)> {
    fn go<S: Strategy>(
        name: &'static str,
        cases: u32,
        strategy: S,
        test: impl Fn(S::Value) -> Result<(), TestCaseError>,
    ) -> (&'static str, u32, Option<String>) {
        let mut runner = TestRunner::new(Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        });
        let outcome = runner.run(&strategy, test);
        (name, cases, outcome.err().map(|e| e.to_string()))
    }
    vec![
        go(
            "plot-contrast identity",
            cases,
            case_strategy(),
            plot_contrast_identity,
        ),
        go(
            "adjusted-mean identity",
            cases,
            case_strategy(),
            adjusted_mean_identity,
        ),
        go(
            "nonnegative biases",
            cases,
            case_strategy(),
            biases_nonnegative,
        ),
        go(
            "nonnegative variance estimate",
            cases,
            case_strategy(),
            v_hat_nonnegative,
        ),
        go(
            "constructed B meets all conditions",
            cases,
            (sizes_with_b(), 0.0f64..=1.0),
            constructed_b_verifies,
        ),
        go(
            "eigensolver trace and orthogonality",
            cases,
            symmetric_matrix(),
            eigen_checks,
        ),
        go(
            "balanced biases agree",
            cases,
            (2usize..=6, 4usize..=8, any::<u64>()),
            balanced_biases_agree,
        ),
    ]
}
