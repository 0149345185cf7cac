//! Monte-Carlo comparison of the two heterogeneity biases on the
//! four-county school design, with compound-symmetry normal populations.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::bmatrix::{minimax_b, BMatrix};
use crate::design::{ContrastSpec, FactorialStructure, SplitPlotDesign};
use crate::error::{Error, Result};
use crate::outcomes::{self, PotentialOutcomeTable};
use crate::randomize::rng_for;

/// Ratios are recorded as missing when `Δ` falls below this value.
pub const RATIO_DELTA_FLOOR: f64 = 1e-15;
pub const DEFAULT_REPLICATES: usize = 200;
pub const DEFAULT_SEED: u64 = 20190101;
pub const QUARTILE_METHOD: &str = "linear interpolation between order statistics (inclusive)";
pub const PRESET_NAMES: [&str; 8] = ["I", "II", "III", "IV", "V", "VI", "VII", "VIII"];

/// Four whole plots of sizes 8, 8, 12, 12; two whole plots per whole-plot
/// level; each sub-plot level on half the units of each whole plot.
pub fn school_design() -> SplitPlotDesign {
    SplitPlotDesign::new(
        FactorialStructure::two_by_two(),
        vec![8, 8, 12, 12],
        vec![2, 2],
        vec![vec![4, 4], vec![4, 4], vec![6, 6], vec![6, 6]],
    )
    .expect("fixed design is valid")
}

/// Per whole plot: mean vector, variance and equicorrelation of the normal
/// model generating potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    pub name: String,
    pub theta: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    pub rho: Vec<f64>,
    /// When set, every `τ̄_w` is shifted to this value after sampling.
    pub enforce_wp_means: Option<f64>,
}

impl PopulationSpec {
    pub fn validate(&self, design: &SplitPlotDesign) -> Result<()> {
        let w_count = design.n_whole_plots();
        let k = design.structure().n_treatments();
        if self.theta.len() != w_count || self.sigma2.len() != w_count || self.rho.len() != w_count
        {
            return Err(Error::domain(format!(
                "population needs theta, sigma2 and rho for each of the {w_count} whole plots"
            )));
        }
        for w in 0..w_count {
            if self.theta[w].len() != k {
                return Err(Error::domain(format!(
                    "theta for whole plot {w} has {} entries, need {k}",
                    self.theta[w].len()
                )));
            }
            if self.theta[w].iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(format!(
                    "theta for whole plot {w} is not finite"
                )));
            }
            let (s, r) = (self.sigma2[w], self.rho[w]);
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::domain(format!(
                    "sigma2 for whole plot {w} must be nonnegative"
                )));
            }
            if !(r.is_finite() && r <= 1.0 && 1.0 + (k as f64 - 1.0) * r > 0.0) {
                return Err(Error::domain(format!(
                    "rho = {r} for whole plot {w} gives a covariance that is not positive definite"
                )));
            }
        }
        if let Some(t) = self.enforce_wp_means {
            if !t.is_finite() {
                return Err(Error::domain("enforced whole-plot contrast must be finite"));
            }
        }
        Ok(())
    }
}

/// A named simulation scenario.
#[derive(Debug, Clone)]
pub struct Preset {
    pub design: SplitPlotDesign,
    pub contrast: ContrastSpec,
    pub population: PopulationSpec,
}

pub fn preset(name: &str) -> Result<Preset> {
    let base = vec![10.0, 5.0, 9.0, 8.0];
    let varied = vec![
        base.clone(),
        vec![5.0, 9.0, 10.0, 8.0],
        vec![10.0, 9.0, 8.0, 5.0],
        vec![10.0, 5.0, 8.0, 9.0],
    ];
    let sig = vec![2.5, 2.0, 2.0, 3.0];
    let (theta, sigma2, rho, enforce) = match name {
        "I" => (vec![base; 4], vec![2.0; 4], vec![1.0; 4], None),
        "II" => (
            vec![
                base,
                vec![9.0, 7.0, 4.0, 6.0],
                vec![11.0, 8.0, 7.0, 8.0],
                vec![8.0, 7.0, 6.0, 9.0],
            ],
            sig,
            vec![0.5; 4],
            Some(1.0),
        ),
        "III" => (varied, sig, vec![1.0; 4], None),
        "IV" => (varied, sig, vec![0.5; 4], None),
        "V" => (varied, sig, vec![0.2, 0.4, 0.6, 0.8], None),
        "VI" => (varied, sig, vec![0.0; 4], None),
        "VII" => (varied, sig, vec![-0.3; 4], None),
        "VIII" => (varied, sig, vec![-0.3, 0.3, -0.3, 0.3], None),
        other => {
            return Err(Error::domain(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(Preset {
        design: school_design(),
        contrast: ContrastSpec::interaction_2x2(),
        population: PopulationSpec {
            name: name.to_string(),
            theta,
            sigma2,
            rho,
            enforce_wp_means: enforce,
        },
    })
}

/// Standard normals by the Box–Muller transform, caching the second value
/// of each pair.
struct BoxMuller<'a, R: Rng> {
    rng: &'a mut R,
    spare: Option<f64>,
}

impl<'a, R: Rng> BoxMuller<'a, R> {
    fn new(rng: &'a mut R) -> Self {
        BoxMuller { rng, spare: None }
    }

    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - U lies in (0, 1], keeping the logarithm finite
        let u1 = 1.0 - self.rng.gen::<f64>();
        let u2 = self.rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(r * angle.sin());
        r * angle.cos()
    }
}

/// Lower Cholesky factor of the `k x k` equicorrelation matrix.
fn equicorrelation_cholesky(k: usize, rho: f64) -> Result<Vec<Vec<f64>>> {
    let mut l = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..=i {
            let a = if i == j { 1.0 } else { rho };
            let s: f64 = (0..j).map(|p| l[i][p] * l[j][p]).sum();
            if i == j {
                let d = a - s;
                if d <= 0.0 {
                    return Err(Error::domain(format!(
                        "equicorrelation {rho} is not positive definite"
                    )));
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Draws one science table: for unit `i` in whole plot `w`,
/// `Y_i = θ_w + σ_w L_w ε_i` with `L_w L_wᵀ` the equicorrelation matrix.
/// With `ρ_w = 1` a single shared normal drives all treatments of a unit.
/// Units are numbered contiguously by whole plot; deterministic in
/// `(seed, replicate)`.
pub fn sample_population(
    spec: &PopulationSpec,
    design: Arc<SplitPlotDesign>,
    seed: u64,
    replicate: u64,
) -> Result<PotentialOutcomeTable> {
    spec.validate(&design)?;
    let k = design.structure().n_treatments();
    let mut rng = rng_for(seed, replicate);
    let mut normals = BoxMuller::new(&mut rng);
    let mut rows = Vec::with_capacity(design.n_units());
    for (w, &m) in design.whole_plot_sizes().iter().enumerate() {
        let sigma = spec.sigma2[w].sqrt();
        let theta = &spec.theta[w];
        let chol = if spec.rho[w] == 1.0 {
            None
        } else {
            Some(equicorrelation_cholesky(k, spec.rho[w])?)
        };
        for _ in 0..m {
            let row = match &chol {
                None => {
                    let z = normals.next();
                    theta.iter().map(|t| t + sigma * z).collect()
                }
                Some(l) => {
                    let eps: Vec<f64> = (0..k).map(|_| normals.next()).collect();
                    (0..k)
                        .map(|i| theta[i] + sigma * (0..=i).map(|j| l[i][j] * eps[j]).sum::<f64>())
                        .collect()
                }
            };
            rows.push(row);
        }
    }
    PotentialOutcomeTable::contiguous(design, &rows)
}

/// Adds a whole-plot constant to the outcomes of the last treatment
/// combination so that every `τ̄_w` equals `target`.
pub fn enforce_wp_means(
    table: &PotentialOutcomeTable,
    contrast: &ContrastSpec,
    target: f64,
) -> Result<PotentialOutcomeTable> {
    let k = table.design().structure().n_treatments();
    let channel = k - 1;
    let g = contrast.coefficients()[channel];
    if g == 0.0 {
        return Err(Error::domain(format!(
            "the contrast puts no weight on {}, so whole-plot contrasts cannot be shifted",
            table
                .design()
                .structure()
                .label(table.design().structure().treatment(channel))
        )));
    }
    let shift: Vec<f64> = outcomes::whole_plot_contrasts(table, contrast)
        .iter()
        .map(|t| (target - t) / g)
        .collect();
    Ok(table.map_outcomes(|i, t, v| {
        if t == channel {
            v + shift[table.whole_plot_of(i)]
        } else {
            v
        }
    }))
}

/// Where the correction matrix comes from.
#[derive(Debug, Clone)]
pub enum BSource {
    Minimax,
    Explicit(BMatrix),
}

#[derive(Debug, Clone)]
pub struct SimulationSettings {
    pub design: Arc<SplitPlotDesign>,
    pub contrast: ContrastSpec,
    pub population: PopulationSpec,
    pub replicates: usize,
    pub seed: u64,
    pub b_source: BSource,
}

impl SimulationSettings {
    pub fn from_preset(name: &str, replicates: usize, seed: u64) -> Result<Self> {
        let p = preset(name)?;
        Ok(SimulationSettings {
            design: Arc::new(p.design),
            contrast: p.contrast,
            population: p.population,
            replicates,
            seed,
            b_source: BSource::Minimax,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub tau: f64,
    pub delta: f64,
    pub delta_tilde: f64,
    /// `None` when `Δ` is below [`RATIO_DELTA_FLOOR`].
    pub ratio: Option<f64>,
}

/// Minimum, quartiles and maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile of sorted data by linear interpolation at position `p (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn five_number(values: &[f64]) -> Option<FiveNumber> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(FiveNumber {
        min: v[0],
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q3: quantile_sorted(&v, 0.75),
        max: v[v.len() - 1],
    })
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub population: String,
    pub seed: u64,
    pub b: BMatrix,
    pub records: Vec<ReplicateRecord>,
    pub delta_summary: FiveNumber,
    pub delta_tilde_summary: FiveNumber,
    pub ratio_summary: Option<FiveNumber>,
    pub median_ratio: Option<f64>,
    pub missing_ratios: usize,
}

/// Generates `replicates` tables on independent streams and records both
/// biases for each.
pub fn run_bias_study(settings: &SimulationSettings) -> Result<StudyResult> {
    if settings.replicates == 0 {
        return Err(Error::domain("at least one replicate is required"));
    }
    settings.population.validate(&settings.design)?;
    let b = match &settings.b_source {
        BSource::Minimax => minimax_b(settings.design.whole_plot_sizes())?,
        BSource::Explicit(b) => b.clone(),
    };
    let records = (0..settings.replicates)
        .into_par_iter()
        .map(|r| {
            let mut table = sample_population(
                &settings.population,
                settings.design.clone(),
                settings.seed,
                r as u64,
            )?;
            if let Some(target) = settings.population.enforce_wp_means {
                table = enforce_wp_means(&table, &settings.contrast, target)?;
            }
            let tau_w = outcomes::whole_plot_contrasts(&table, &settings.contrast);
            let delta = outcomes::delta_from_contrasts(&settings.design, &tau_w);
            let delta_tilde = outcomes::delta_tilde_from_contrasts(&settings.design, &tau_w, &b)?;
            Ok(ReplicateRecord {
                replicate: r,
                tau: outcomes::finite_population_contrast(&table, &settings.contrast),
                delta,
                delta_tilde,
                ratio: (delta >= RATIO_DELTA_FLOOR).then(|| delta_tilde / delta),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let deltas: Vec<f64> = records.iter().map(|r| r.delta).collect();
    let tildes: Vec<f64> = records.iter().map(|r| r.delta_tilde).collect();
    let ratios: Vec<f64> = records.iter().filter_map(|r| r.ratio).collect();
    let ratio_summary = five_number(&ratios);
    Ok(StudyResult {
        population: settings.population.name.clone(),
        seed: settings.seed,
        b,
        delta_summary: five_number(&deltas).expect("replicates >= 1"),
        delta_tilde_summary: five_number(&tildes).expect("replicates >= 1"),
        median_ratio: ratio_summary.map(|s| s.median),
        ratio_summary,
        missing_ratios: records.len() - ratios.len(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn presets_match_the_settings_table() {
        let p = preset("III").unwrap();
        assert_eq!(p.population.theta[1], vec![5.0, 9.0, 10.0, 8.0]);
        assert_eq!(p.population.rho, vec![1.0; 4]);
        let p = preset("VIII").unwrap();
        assert_eq!(p.population.rho, vec![-0.3, 0.3, -0.3, 0.3]);
        let p = preset("I").unwrap();
        assert!(p
            .population
            .theta
            .iter()
            .all(|t| t == &p.population.theta[0]));
        assert_eq!(p.population.sigma2, vec![2.0; 4]);
        assert_eq!(p.population.rho, vec![1.0; 4]);
        assert_eq!(preset("II").unwrap().population.enforce_wp_means, Some(1.0));
        assert!(preset("IX").is_err());
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            p.population.validate(&p.design).unwrap();
        }
    }

    #[test]
    fn population_three_plot_contrasts() {
        let p = preset("III").unwrap();
        let d = Arc::new(p.design);
        let table = sample_population(&p.population, d.clone(), 1, 0).unwrap();
        let tw = outcomes::whole_plot_contrasts(&table, &p.contrast);
        for (got, want) in tw.iter().zip([1.0, -1.5, -0.5, 1.5]) {
            assert!(close(*got, want, 1e-12));
        }
        // rank-one draws give the same unit contrast throughout a whole plot
        for w in 0..4 {
            let tau: Vec<f64> = table
                .members(w)
                .iter()
                .map(|&i| outcomes::unit_contrast(&table, &p.contrast, i))
                .collect();
            let spread = tau.iter().cloned().fold(f64::MIN, f64::max)
                - tau.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread <= 1e-9);
        }
    }

    #[test]
    fn sample_covariance_matches_model() {
        let d = Arc::new(
            SplitPlotDesign::new(
                FactorialStructure::two_by_two(),
                vec![50_000, 50_000],
                vec![1, 1],
                vec![vec![25_000, 25_000]; 2],
            )
            .unwrap(),
        );
        let spec = PopulationSpec {
            name: "check".into(),
            theta: vec![vec![0.0, 1.0, 2.0, 3.0]; 2],
            sigma2: vec![2.0; 2],
            rho: vec![0.5; 2],
            enforce_wp_means: None,
        };
        let table = sample_population(&spec, d, 9, 0).unwrap();
        let n = table.n_units() as f64;
        let means: Vec<f64> = (0..4)
            .map(|k| {
                (0..table.n_units())
                    .map(|i| table.y_flat(i, k))
                    .sum::<f64>()
                    / n
            })
            .collect();
        for a in 0..4 {
            for b in 0..4 {
                let cov = (0..table.n_units())
                    .map(|i| (table.y_flat(i, a) - means[a]) * (table.y_flat(i, b) - means[b]))
                    .sum::<f64>()
                    / (n - 1.0);
                let want = if a == b { 2.0 } else { 1.0 };
                assert!(close(cov, want, 0.05), "{a},{b}: {cov}");
            }
        }
    }

    #[test]
    fn correlation_bounds() {
        let mut p = preset("VII").unwrap().population;
        let d = school_design();
        p.rho = vec![-0.3; 4];
        assert!(p.validate(&d).is_ok());
        assert!(equicorrelation_cholesky(4, -0.3).is_ok());
        p.rho = vec![-1.0 / 3.0; 4];
        assert!(p.validate(&d).is_err());
        p.rho = vec![1.2; 4];
        assert!(p.validate(&d).is_err());
    }

    #[test]
    fn draws_are_deterministic() {
        let p = preset("IV").unwrap();
        let d = Arc::new(p.design);
        let a = sample_population(&p.population, d.clone(), 5, 3).unwrap();
        let b = sample_population(&p.population, d.clone(), 5, 3).unwrap();
        let c = sample_population(&p.population, d, 5, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn enforcement_sets_every_plot_contrast() {
        let p = preset("IV").unwrap();
        let d = Arc::new(p.design);
        let table = sample_population(&p.population, d.clone(), 2, 0).unwrap();
        let fixed = enforce_wp_means(&table, &p.contrast, 1.0).unwrap();
        for t in outcomes::whole_plot_contrasts(&fixed, &p.contrast) {
            assert!(close(t, 1.0, 1e-12));
        }
        for i in 0..40 {
            for k in 0..3 {
                assert_eq!(fixed.y_flat(i, k), table.y_flat(i, k));
            }
        }
        let again = enforce_wp_means(&fixed, &p.contrast, 1.0).unwrap();
        for i in 0..40 {
            assert!(close(again.y_flat(i, 3), fixed.y_flat(i, 3), 1e-12));
        }
        assert!(close(
            outcomes::delta(&fixed, &p.contrast),
            16.0 / 1200.0,
            1e-12
        ));
        let no_channel = ContrastSpec::new(d.structure(), vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        assert!(enforce_wp_means(&table, &no_channel, 1.0).is_err());
    }

    #[test]
    fn quartiles_interpolate_linearly() {
        let s = five_number(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(
            (s.min, s.q1, s.median, s.q3, s.max),
            (1.0, 1.75, 2.5, 3.25, 4.0)
        );
        let s = five_number(&[7.0]).unwrap();
        assert_eq!(s.q1, 7.0);
        assert!(five_number(&[]).is_none());
    }

    #[test]
    fn study_is_reproducible_and_population_one_is_exact() {
        let settings = SimulationSettings::from_preset("I", 20, 11).unwrap();
        let a = run_bias_study(&settings).unwrap();
        let b = run_bias_study(&settings).unwrap();
        assert_eq!(a.records, b.records);
        for r in &a.records {
            assert!(r.delta_tilde.abs() <= 1e-12);
            assert!(close(r.delta, 16.0 / 1200.0, 1e-12));
        }
        let zero = SimulationSettings {
            replicates: 0,
            ..settings
        };
        assert!(run_bias_study(&zero).is_err());
    }
}
