//! Two-stage split-plot randomization: seeded draws, exhaustive enumeration
//! and extraction of the observed data an assignment reveals.
//!
//! Random streams come from ChaCha8 keyed by a 64-bit seed, with the stream
//! index selecting an independent ChaCha stream. Partitions are drawn by a
//! Fisher–Yates shuffle of the index list, sliced into groups of the
//! required sizes in level order.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::design::SplitPlotDesign;
use crate::error::{Error, Result};
use crate::outcomes::PotentialOutcomeTable;

pub const DEFAULT_ENUMERATION_GUARD: u128 = 10_000_000;

/// Deterministic generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A realized two-stage assignment.
///
/// Sub-plots are addressed by their position `0..M_w` within the whole
/// plot; [`observe`] maps position `j` to the `j`-th smallest unit index of
/// that whole plot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment {
    plot_z1: Vec<usize>,
    subplot_z2: Vec<Vec<usize>>,
}

impl Assignment {
    pub fn new(
        design: &SplitPlotDesign,
        plot_z1: Vec<usize>,
        subplot_z2: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let s = design.structure();
        let w_count = design.n_whole_plots();
        if plot_z1.len() != w_count || subplot_z2.len() != w_count {
            return Err(Error::InvalidAssignment(format!(
                "expected {w_count} whole plots"
            )));
        }
        let mut c1 = vec![0; s.n_z1()];
        for &a in &plot_z1 {
            *c1.get_mut(a).ok_or_else(|| {
                Error::InvalidAssignment(format!("unknown whole-plot level {a}"))
            })? += 1;
        }
        if c1 != design.r1_all() {
            return Err(Error::InvalidAssignment(format!(
                "whole-plot level counts {c1:?} differ from r1 {:?}",
                design.r1_all()
            )));
        }
        for (w, labels) in subplot_z2.iter().enumerate() {
            if labels.len() != design.size(w) {
                return Err(Error::InvalidAssignment(format!(
                    "whole plot {w} has {} sub-plot labels for {} units",
                    labels.len(),
                    design.size(w)
                )));
            }
            let mut c2 = vec![0; s.n_z2()];
            for &b in labels {
                *c2.get_mut(b).ok_or_else(|| {
                    Error::InvalidAssignment(format!("unknown sub-plot level {b}"))
                })? += 1;
            }
            if c2 != design.r2_all()[w] {
                return Err(Error::InvalidAssignment(format!(
                    "whole plot {w} sub-plot counts {c2:?} differ from r2 {:?}",
                    design.r2_all()[w]
                )));
            }
        }
        Ok(Assignment {
            plot_z1,
            subplot_z2,
        })
    }

    /// Whole-plot level `z_{1w}` of each whole plot.
    pub fn plot_z1(&self) -> &[usize] {
        &self.plot_z1
    }

    /// Sub-plot level of each position within whole plot `w`.
    pub fn subplot_z2(&self, w: usize) -> &[usize] {
        &self.subplot_z2[w]
    }

    /// `T_1(z1)`: whole plots assigned level `z1`, ascending.
    pub fn t1(&self, z1: usize) -> Vec<usize> {
        positions_with(&self.plot_z1, z1)
    }

    /// `T_{w2}(z2)`: positions within whole plot `w` assigned level `z2`.
    pub fn t2(&self, w: usize, z2: usize) -> Vec<usize> {
        positions_with(&self.subplot_z2[w], z2)
    }
}

fn positions_with(labels: &[usize], level: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == level)
        .map(|(i, _)| i)
        .collect()
}

/// Uniform labelling of `counts.iter().sum()` slots: shuffle the slot
/// indices and hand out consecutive slices of sizes `counts[0], counts[1], ...`.
fn shuffled_labels<R: rand::Rng + ?Sized>(counts: &[usize], rng: &mut R) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut labels = vec![0; n];
    let mut start = 0;
    for (level, &c) in counts.iter().enumerate() {
        for &slot in &idx[start..start + c] {
            labels[slot] = level;
        }
        start += c;
    }
    labels
}

/// Draws an assignment using an explicit generator.
pub fn draw_assignment_with<R: rand::Rng + ?Sized>(
    design: &SplitPlotDesign,
    rng: &mut R,
) -> Assignment {
    let plot_z1 = shuffled_labels(design.r1_all(), rng);
    let subplot_z2 = design
        .r2_all()
        .iter()
        .map(|r2| shuffled_labels(r2, rng))
        .collect();
    Assignment {
        plot_z1,
        subplot_z2,
    }
}

/// Draws an assignment uniformly at random; deterministic in `(seed, stream)`.
pub fn draw_assignment(design: &SplitPlotDesign, seed: u64, stream: u64) -> Assignment {
    draw_assignment_with(design, &mut rng_for(seed, stream))
}

/// One unit's revealed outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedUnit {
    pub unit: usize,
    pub whole_plot: usize,
    pub z1: usize,
    pub z2: usize,
    pub y: f64,
}

/// The outcomes revealed by one assignment, plus design metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedDataset {
    design: Arc<SplitPlotDesign>,
    units: Vec<ObservedUnit>,
    plot_z1: Vec<usize>,
    /// `W x K2` within-plot observed means; `None` where `r2_w(z2) = 0`.
    plot_means: Vec<Option<f64>>,
}

impl ObservedDataset {
    /// Validates that the records are consistent with one assignment of the
    /// design: a single whole-plot level per whole plot, whole-plot sizes
    /// `M_w`, sub-plot counts `r2_w` and whole-plot counts `r1`.
    pub fn new(design: Arc<SplitPlotDesign>, units: Vec<ObservedUnit>) -> Result<Self> {
        let w_count = design.n_whole_plots();
        let s = design.structure();
        let mut plot_z1: Vec<Option<usize>> = vec![None; w_count];
        let mut sizes = vec![0usize; w_count];
        let mut counts = vec![vec![0usize; s.n_z2()]; w_count];
        let mut sums = vec![vec![Vec::new(); s.n_z2()]; w_count];
        for u in &units {
            if u.whole_plot >= w_count || u.z1 >= s.n_z1() || u.z2 >= s.n_z2() {
                return Err(Error::InvalidAssignment(format!(
                    "unit {} refers to an unknown whole plot or level",
                    u.unit
                )));
            }
            if !u.y.is_finite() {
                return Err(Error::InvalidAssignment(format!(
                    "unit {} has non-finite outcome",
                    u.unit
                )));
            }
            match plot_z1[u.whole_plot] {
                None => plot_z1[u.whole_plot] = Some(u.z1),
                Some(a) if a != u.z1 => {
                    return Err(Error::InvalidAssignment(format!(
                        "whole plot {} mixes whole-plot levels",
                        u.whole_plot
                    )))
                }
                _ => {}
            }
            sizes[u.whole_plot] += 1;
            counts[u.whole_plot][u.z2] += 1;
            sums[u.whole_plot][u.z2].push(u.y);
        }
        let plot_z1: Vec<usize> = plot_z1
            .into_iter()
            .enumerate()
            .map(|(w, a)| {
                a.ok_or_else(|| Error::InvalidAssignment(format!("whole plot {w} has no units")))
            })
            .collect::<Result<_>>()?;
        if sizes != design.whole_plot_sizes() {
            return Err(Error::InvalidAssignment(format!(
                "whole-plot sizes {sizes:?} differ from the design {:?}",
                design.whole_plot_sizes()
            )));
        }
        if counts != design.r2_all() {
            return Err(Error::InvalidAssignment(
                "sub-plot counts differ from the design's r2".into(),
            ));
        }
        let mut c1 = vec![0; s.n_z1()];
        for &a in &plot_z1 {
            c1[a] += 1;
        }
        if c1 != design.r1_all() {
            return Err(Error::InvalidAssignment(format!(
                "whole-plot level counts {c1:?} differ from r1 {:?}",
                design.r1_all()
            )));
        }
        let plot_means = sums
            .iter()
            .flatten()
            .map(|v| (!v.is_empty()).then(|| crate::numeric::mean(v)))
            .collect();
        Ok(ObservedDataset {
            design,
            units,
            plot_z1,
            plot_means,
        })
    }

    pub fn design(&self) -> &SplitPlotDesign {
        &self.design
    }

    pub fn design_arc(&self) -> &Arc<SplitPlotDesign> {
        &self.design
    }

    pub fn units(&self) -> &[ObservedUnit] {
        &self.units
    }

    /// `z_{1w}` for each whole plot.
    pub fn plot_z1(&self) -> &[usize] {
        &self.plot_z1
    }

    /// `Ȳ_w^obs(z_{1w} z2)`, or `None` when no sub-plot of `w` got `z2`.
    pub fn plot_mean(&self, w: usize, z2: usize) -> Option<f64> {
        self.plot_means[w * self.design.structure().n_z2() + z2]
    }

    /// `T_1(z1)`.
    pub fn t1(&self, z1: usize) -> Vec<usize> {
        positions_with(&self.plot_z1, z1)
    }
}

/// Reveals `Y_i(z1 z2)` for each unit's assigned pair.
pub fn observe(table: &PotentialOutcomeTable, assignment: &Assignment) -> Result<ObservedDataset> {
    let design = table.design_arc().clone();
    if assignment.plot_z1.len() != design.n_whole_plots() {
        return Err(Error::InvalidAssignment(
            "assignment does not match the table's design".into(),
        ));
    }
    let s = design.structure();
    let mut units = Vec::with_capacity(table.n_units());
    for w in 0..design.n_whole_plots() {
        let z1 = assignment.plot_z1[w];
        let labels = &assignment.subplot_z2[w];
        let members = table.members(w);
        if labels.len() != members.len() {
            return Err(Error::InvalidAssignment(format!(
                "whole plot {w}: {} labels for {} units",
                labels.len(),
                members.len()
            )));
        }
        for (&unit, &z2) in members.iter().zip(labels) {
            if z1 >= s.n_z1() || z2 >= s.n_z2() {
                return Err(Error::InvalidAssignment("unknown level".into()));
            }
            units.push(ObservedUnit {
                unit,
                whole_plot: w,
                z1,
                z2,
                y: table.y(unit, crate::design::Treatment { z1, z2 }),
            });
        }
    }
    units.sort_by_key(|u| u.unit);
    ObservedDataset::new(design, units)
}

fn multinomial(counts: &[usize]) -> u128 {
    // product of binomials C(n_so_far + c, c), saturating
    let mut total = 1u128;
    let mut n = 0u128;
    for &c in counts {
        for k in 1..=c as u128 {
            n += 1;
            total = match total.checked_mul(n) {
                Some(v) => v / k,
                None => return u128::MAX,
            };
        }
    }
    total
}

/// Number of distinct two-stage assignments (saturating at `u128::MAX`).
pub fn assignment_count(design: &SplitPlotDesign) -> u128 {
    design
        .r2_all()
        .iter()
        .fold(multinomial(design.r1_all()), |acc, r2| {
            acc.saturating_mul(multinomial(r2))
        })
}

/// Every distinct labelling of slots with the given level counts, in
/// lexicographic order.
fn all_labellings(counts: &[usize]) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(l, &c)| std::iter::repeat_n(l, c))
        .collect();
    let mut out = vec![current.clone()];
    while next_permutation(&mut current) {
        out.push(current.clone());
    }
    out
}

fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Lazy stream of every assignment with its probability.
pub struct Enumeration {
    stage1: Vec<Vec<usize>>,
    stage2: Vec<Vec<Vec<usize>>>,
    odometer: Vec<usize>,
    probability: f64,
    done: bool,
    count: u128,
}

impl Enumeration {
    /// Total number of assignments the stream yields.
    pub fn total(&self) -> u128 {
        self.count
    }
}

impl Iterator for Enumeration {
    type Item = (Assignment, f64);

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let a = Assignment {
            plot_z1: self.stage1[self.odometer[0]].clone(),
            subplot_z2: self
                .stage2
                .iter()
                .zip(&self.odometer[1..])
                .map(|(lists, &k)| lists[k].clone())
                .collect(),
        };
        // advance, last digit fastest
        let mut pos = self.odometer.len();
        loop {
            if pos == 0 {
                self.done = true;
                break;
            }
            pos -= 1;
            let len = if pos == 0 {
                self.stage1.len()
            } else {
                self.stage2[pos - 1].len()
            };
            self.odometer[pos] += 1;
            if self.odometer[pos] < len {
                break;
            }
            self.odometer[pos] = 0;
        }
        Some((a, self.probability))
    }
}

/// Enumerates every assignment once with probability `1 / count`.
/// Refuses when the count exceeds `guard`.
pub fn enumerate_assignments(design: &SplitPlotDesign, guard: u128) -> Result<Enumeration> {
    let count = assignment_count(design);
    if count > guard {
        return Err(Error::EnumerationTooLarge { count, guard });
    }
    let stage1 = all_labellings(design.r1_all());
    let stage2: Vec<Vec<Vec<usize>>> = design
        .r2_all()
        .iter()
        .map(|r2| all_labellings(r2))
        .collect();
    let probability = stage2
        .iter()
        .fold(1.0 / stage1.len() as f64, |p, l| p / l.len() as f64);
    Ok(Enumeration {
        odometer: vec![0; stage2.len() + 1],
        stage1,
        stage2,
        probability,
        done: false,
        count,
    })
}
