//! Split-plot design structure: factor level sets, whole-plot sizes, and the
//! replication counts of the two randomization stages.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered tuple of 0-based per-factor level indices, serialized as `"0-1"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LevelCombo(Vec<usize>);

impl LevelCombo {
    pub fn new(levels: Vec<usize>) -> Self {
        LevelCombo(levels)
    }

    pub fn levels(&self) -> &[usize] {
        &self.0
    }
}

impl fmt::Display for LevelCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

impl FromStr for LevelCombo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split('-')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad level combination {s:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(LevelCombo)
    }
}

/// A treatment combination `z1 z2`, addressed by positions in the level sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Treatment {
    pub z1: usize,
    pub z2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorialStructure {
    z1_levels: Vec<LevelCombo>,
    z2_levels: Vec<LevelCombo>,
}

impl FactorialStructure {
    pub fn new(z1_levels: Vec<LevelCombo>, z2_levels: Vec<LevelCombo>) -> Result<Self> {
        for (stage, levels) in [("whole-plot", &z1_levels), ("sub-plot", &z2_levels)] {
            if levels.len() < 2 {
                return Err(Error::InvalidDesign(vec![DesignViolation::TooFewLevels {
                    stage,
                    count: levels.len(),
                }]));
            }
            let mut seen = HashSet::new();
            for l in levels {
                if !seen.insert(l) {
                    return Err(Error::InvalidDesign(vec![
                        DesignViolation::DuplicateLevel {
                            stage,
                            label: l.to_string(),
                        },
                    ]));
                }
            }
        }
        Ok(FactorialStructure {
            z1_levels,
            z2_levels,
        })
    }

    /// Full two-level factorial at each stage with one factor per stage: `{0, 1} x {0, 1}`.
    pub fn two_by_two() -> Self {
        let lv = || vec![LevelCombo::new(vec![0]), LevelCombo::new(vec![1])];
        FactorialStructure {
            z1_levels: lv(),
            z2_levels: lv(),
        }
    }

    pub fn z1_levels(&self) -> &[LevelCombo] {
        &self.z1_levels
    }

    pub fn z2_levels(&self) -> &[LevelCombo] {
        &self.z2_levels
    }

    pub fn n_z1(&self) -> usize {
        self.z1_levels.len()
    }

    pub fn n_z2(&self) -> usize {
        self.z2_levels.len()
    }

    pub fn n_treatments(&self) -> usize {
        self.n_z1() * self.n_z2()
    }

    /// Flat index of a treatment, z1-major.
    pub fn index(&self, t: Treatment) -> usize {
        t.z1 * self.n_z2() + t.z2
    }

    pub fn treatment(&self, index: usize) -> Treatment {
        Treatment {
            z1: index / self.n_z2(),
            z2: index % self.n_z2(),
        }
    }

    pub fn treatments(&self) -> impl Iterator<Item = Treatment> + '_ {
        (0..self.n_treatments()).map(move |k| self.treatment(k))
    }

    pub fn z1_position(&self, level: &LevelCombo) -> Option<usize> {
        self.z1_levels.iter().position(|l| l == level)
    }

    pub fn z2_position(&self, level: &LevelCombo) -> Option<usize> {
        self.z2_levels.iter().position(|l| l == level)
    }

    /// `"z1|z2"` label, e.g. `"0|1"`.
    pub fn label(&self, t: Treatment) -> String {
        format!("{}|{}", self.z1_levels[t.z1], self.z2_levels[t.z2])
    }

    pub fn parse_label(&self, label: &str) -> Result<Treatment> {
        let (a, b) = label
            .split_once('|')
            .ok_or_else(|| Error::Parse(format!("treatment label {label:?} lacks '|'")))?;
        let z1 = self
            .z1_position(&a.parse()?)
            .ok_or_else(|| Error::Parse(format!("unknown whole-plot level {a:?}")))?;
        let z2 = self
            .z2_position(&b.parse()?)
            .ok_or_else(|| Error::Parse(format!("unknown sub-plot level {b:?}")))?;
        Ok(Treatment { z1, z2 })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DesignViolation {
    TooFewLevels {
        stage: &'static str,
        count: usize,
    },
    DuplicateLevel {
        stage: &'static str,
        label: String,
    },
    TooFewWholePlots(usize),
    WholePlotTooSmall {
        whole_plot: usize,
        size: usize,
    },
    Shape(String),
    WholePlotReplicationSum {
        sum: usize,
        whole_plots: usize,
    },
    SubPlotReplicationSum {
        whole_plot: usize,
        sum: usize,
        size: usize,
    },
}

impl fmt::Display for DesignViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use DesignViolation::*;
        match self {
            TooFewLevels { stage, count } => {
                write!(f, "{stage} level set has {count} combinations, need at least 2")
            }
            DuplicateLevel { stage, label } => {
                write!(f, "{stage} level combination {label} listed twice")
            }
            TooFewWholePlots(w) => write!(f, "design has {w} whole plots, need at least 2"),
            WholePlotTooSmall { whole_plot, size } => {
                write!(f, "whole plot {whole_plot} has size {size}, need at least 2")
            }
            Shape(msg) => write!(f, "shape mismatch: {msg}"),
            WholePlotReplicationSum { sum, whole_plots } => write!(
                f,
                "whole-plot replication sum is {sum} but the design has {whole_plots} whole plots"
            ),
            SubPlotReplicationSum {
                whole_plot,
                sum,
                size,
            } => write!(
                f,
                "sub-plot replication sum in whole plot {whole_plot} is {sum} but its size is {size}"
            ),
        }
    }
}

/// A two-stage split-plot randomization plan.
///
/// `r1[a]` whole plots receive whole-plot level `a`; within whole plot `w`,
/// `r2[w][b]` sub-plots receive sub-plot level `b`. A replication count of
/// zero is allowed; such a level is simply never observed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlotDesign {
    structure: FactorialStructure,
    whole_plot_sizes: Vec<usize>,
    r1: Vec<usize>,
    r2: Vec<Vec<usize>>,
}

impl SplitPlotDesign {
    /// Builds a design and rejects it if [`validate_design`] reports anything.
    pub fn new(
        structure: FactorialStructure,
        whole_plot_sizes: Vec<usize>,
        r1: Vec<usize>,
        r2: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let d = Self::unchecked(structure, whole_plot_sizes, r1, r2);
        let violations = validate_design(&d);
        if violations.is_empty() {
            Ok(d)
        } else {
            Err(Error::InvalidDesign(violations))
        }
    }

    /// Builds a design without validation so that it can be inspected with
    /// [`validate_design`].
    pub fn unchecked(
        structure: FactorialStructure,
        whole_plot_sizes: Vec<usize>,
        r1: Vec<usize>,
        r2: Vec<Vec<usize>>,
    ) -> Self {
        SplitPlotDesign {
            structure,
            whole_plot_sizes,
            r1,
            r2,
        }
    }

    pub fn structure(&self) -> &FactorialStructure {
        &self.structure
    }

    pub fn whole_plot_sizes(&self) -> &[usize] {
        &self.whole_plot_sizes
    }

    pub fn size(&self, w: usize) -> usize {
        self.whole_plot_sizes[w]
    }

    pub fn n_whole_plots(&self) -> usize {
        self.whole_plot_sizes.len()
    }

    pub fn n_units(&self) -> usize {
        self.whole_plot_sizes.iter().sum()
    }

    pub fn r1(&self, z1: usize) -> usize {
        self.r1[z1]
    }

    pub fn r1_all(&self) -> &[usize] {
        &self.r1
    }

    pub fn r2(&self, w: usize, z2: usize) -> usize {
        self.r2[w][z2]
    }

    pub fn r2_all(&self) -> &[Vec<usize>] {
        &self.r2
    }

    /// `M_w / M̄`, the weight that turns raw outcomes into adjusted outcomes.
    pub fn size_ratio(&self, w: usize) -> f64 {
        (self.whole_plot_sizes[w] * self.n_whole_plots()) as f64 / self.n_units() as f64
    }
}

/// Lists every violated structural constraint; empty means valid.
pub fn validate_design(design: &SplitPlotDesign) -> Vec<DesignViolation> {
    let mut out = Vec::new();
    let k1 = design.structure.n_z1();
    let k2 = design.structure.n_z2();
    let w_count = design.whole_plot_sizes.len();

    if w_count < 2 {
        out.push(DesignViolation::TooFewWholePlots(w_count));
    }
    for (w, &m) in design.whole_plot_sizes.iter().enumerate() {
        if m < 2 {
            out.push(DesignViolation::WholePlotTooSmall {
                whole_plot: w,
                size: m,
            });
        }
    }
    if design.r1.len() != k1 {
        out.push(DesignViolation::Shape(format!(
            "r1 has {} entries for {k1} whole-plot levels",
            design.r1.len()
        )));
    } else {
        let sum: usize = design.r1.iter().sum();
        if sum != w_count {
            out.push(DesignViolation::WholePlotReplicationSum {
                sum,
                whole_plots: w_count,
            });
        }
    }
    if design.r2.len() != w_count {
        out.push(DesignViolation::Shape(format!(
            "r2 has {} entries for {w_count} whole plots",
            design.r2.len()
        )));
    } else {
        for (w, row) in design.r2.iter().enumerate() {
            if row.len() != k2 {
                out.push(DesignViolation::Shape(format!(
                    "r2 of whole plot {w} has {} entries for {k2} sub-plot levels",
                    row.len()
                )));
                continue;
            }
            let sum: usize = row.iter().sum();
            if sum != design.whole_plot_sizes[w] {
                out.push(DesignViolation::SubPlotReplicationSum {
                    whole_plot: w,
                    sum,
                    size: design.whole_plot_sizes[w],
                });
            }
        }
    }
    out
}

/// Equal whole-plot sizes and identical sub-plot replication in every whole plot.
pub fn is_balanced(design: &SplitPlotDesign) -> bool {
    let sizes = &design.whole_plot_sizes;
    sizes.windows(2).all(|p| p[0] == p[1]) && design.r2.windows(2).all(|p| p[0] == p[1])
}

/// Average whole-plot size `N / W`.
pub fn mean_whole_plot_size(design: &SplitPlotDesign) -> f64 {
    design.n_units() as f64 / design.n_whole_plots() as f64
}

/// Coefficients `g(z1 z2)` of a treatment contrast, indexed like
/// [`FactorialStructure::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastSpec {
    g: Vec<f64>,
}

impl ContrastSpec {
    pub const ZERO_SUM_TOLERANCE: f64 = 1e-12;

    pub fn new(structure: &FactorialStructure, g: Vec<f64>) -> Result<Self> {
        if g.len() != structure.n_treatments() {
            return Err(Error::InvalidContrast(format!(
                "{} coefficients for {} treatment combinations",
                g.len(),
                structure.n_treatments()
            )));
        }
        if g.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidContrast("non-finite coefficient".into()));
        }
        if g.iter().all(|&c| c == 0.0) {
            return Err(Error::InvalidContrast("all coefficients are zero".into()));
        }
        let sum = crate::numeric::compensated_sum(g.iter().copied());
        if sum.abs() > Self::ZERO_SUM_TOLERANCE {
            return Err(Error::InvalidContrast(format!(
                "coefficients sum to {sum:e}, not zero"
            )));
        }
        Ok(ContrastSpec { g })
    }

    /// Builds a contrast from `"z1|z2" -> coefficient` pairs; unlisted
    /// combinations get coefficient zero.
    pub fn from_labels<'a, I>(structure: &FactorialStructure, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        let mut g = vec![0.0; structure.n_treatments()];
        for (label, c) in pairs {
            let t = structure.parse_label(label)?;
            g[structure.index(t)] = c;
        }
        Self::new(structure, g)
    }

    /// The 2x2 interaction `{Y(00) - Y(01) - Y(10) + Y(11)} / 4`.
    pub fn interaction_2x2() -> Self {
        ContrastSpec {
            g: vec![0.25, -0.25, -0.25, 0.25],
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.g
    }

    pub fn coefficient(&self, structure: &FactorialStructure, t: Treatment) -> f64 {
        self.g[structure.index(t)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn school() -> SplitPlotDesign {
        SplitPlotDesign::new(
            FactorialStructure::two_by_two(),
            vec![8, 8, 12, 12],
            vec![2, 2],
            vec![vec![4, 4], vec![4, 4], vec![6, 6], vec![6, 6]],
        )
        .unwrap()
    }

    #[test]
    fn school_design_is_valid_and_unbalanced() {
        let d = school();
        assert!(validate_design(&d).is_empty());
        assert!(!is_balanced(&d));
        assert_eq!(mean_whole_plot_size(&d), 10.0);
        assert_eq!(d.n_units(), 40);
    }

    #[test]
    fn whole_plot_replication_sum_violation() {
        let d = SplitPlotDesign::unchecked(
            FactorialStructure::two_by_two(),
            vec![8, 8, 12, 12],
            vec![2, 1],
            vec![vec![4, 4], vec![4, 4], vec![6, 6], vec![6, 6]],
        );
        let v = validate_design(&d);
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().contains("whole-plot replication sum"));
    }

    #[test]
    fn sub_plot_replication_sum_violation() {
        let d = SplitPlotDesign::unchecked(
            FactorialStructure::two_by_two(),
            vec![8, 8, 5, 12],
            vec![2, 2],
            vec![vec![4, 4], vec![4, 4], vec![2, 2], vec![6, 6]],
        );
        let v = validate_design(&d);
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().contains("sub-plot replication sum"));
        assert!(matches!(
            SplitPlotDesign::new(
                d.structure().clone(),
                d.whole_plot_sizes().to_vec(),
                d.r1_all().to_vec(),
                d.r2_all().to_vec()
            ),
            Err(Error::InvalidDesign(_))
        ));
    }

    #[test]
    fn balance_requires_equal_sizes_and_equal_r2() {
        let s = FactorialStructure::two_by_two();
        let bal =
            SplitPlotDesign::new(s.clone(), vec![10; 4], vec![2, 2], vec![vec![5, 5]; 4]).unwrap();
        assert!(is_balanced(&bal));
        assert_eq!(mean_whole_plot_size(&bal), 10.0);

        let unequal_r2 = SplitPlotDesign::new(
            s,
            vec![10; 4],
            vec![2, 2],
            vec![vec![4, 6], vec![5, 5], vec![5, 5], vec![5, 5]],
        )
        .unwrap();
        assert!(!is_balanced(&unequal_r2));
    }

    #[test]
    fn mean_size_of_uneven_small_design() {
        let d = SplitPlotDesign::new(
            FactorialStructure::two_by_two(),
            vec![2, 2, 3, 3],
            vec![2, 2],
            vec![vec![1, 1], vec![1, 1], vec![1, 2], vec![1, 2]],
        )
        .unwrap();
        assert_eq!(mean_whole_plot_size(&d), 2.5);
    }

    #[test]
    fn level_combo_round_trips_through_text() {
        let c: LevelCombo = "0-2-1".parse().unwrap();
        assert_eq!(c.levels(), &[0, 2, 1]);
        assert_eq!(c.to_string(), "0-2-1");
        assert!("0-x".parse::<LevelCombo>().is_err());
    }

    #[test]
    fn structure_rejects_duplicates_and_singletons() {
        let a = LevelCombo::new(vec![0]);
        assert!(FactorialStructure::new(vec![a.clone()], vec![a.clone(), a.clone()]).is_err());
        assert!(FactorialStructure::new(
            vec![a.clone(), a.clone()],
            vec![a.clone(), LevelCombo::new(vec![1])]
        )
        .is_err());
    }

    #[test]
    fn contrast_validation() {
        let s = FactorialStructure::two_by_two();
        assert!(ContrastSpec::new(&s, vec![0.0; 4]).is_err());
        assert!(ContrastSpec::new(&s, vec![1.0, 0.0, 0.0, 0.0]).is_err());
        assert!(ContrastSpec::new(&s, vec![1.0, -1.0, 0.0]).is_err());
        let c = ContrastSpec::from_labels(&s, [("0|0", 0.5), ("1|1", -0.5)]).unwrap();
        assert_eq!(c.coefficients(), &[0.5, 0.0, 0.0, -0.5]);
        assert_eq!(
            ContrastSpec::interaction_2x2().coefficient(&s, Treatment { z1: 1, z2: 0 }),
            -0.25
        );
    }
}
