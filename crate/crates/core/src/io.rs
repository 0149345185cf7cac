//! File formats: design and contrast JSON, potential-outcome and observed
//! CSV, correction-matrix JSON, and the reports written by the command line.
//!
//! Every floating-point number is written with 17 significant digits in the
//! style of C's `%.17g`, so values survive a write/read cycle bit for bit.
//! JSON objects are written with keys in sorted order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::{json, Map, Value};

use crate::bmatrix::{lambda_lower_bound, verify_c1_c2_c3, BMatrix, Provenance};
use crate::design::{ContrastSpec, FactorialStructure, LevelCombo, SplitPlotDesign};
use crate::error::{Error, Result};
use crate::estimators::EstimateReport;
use crate::oracle::OracleReport;
use crate::outcomes::PotentialOutcomeTable;
use crate::randomize::{ObservedDataset, ObservedUnit};
use crate::simulation::{
    preset, BSource, FiveNumber, PopulationSpec, SimulationSettings, StudyResult,
    DEFAULT_REPLICATES, DEFAULT_SEED, PRESET_NAMES, QUARTILE_METHOD, RATIO_DELTA_FLOOR,
};

/// Version stamped into every report this module writes.
pub const SCHEMA_VERSION: u64 = 1;

/// Formats like C's `%.17g`: 17 significant digits, trailing zeros removed,
/// exponent notation when the decimal exponent is below -4 or above 16.
pub fn format_g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0" } else { "0" }.into();
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..17).contains(&exp) {
        let mantissa = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        strip_zeros(&format!("{x:.*}", (16 - exp) as usize)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Pretty printer whose floats go through [`format_g17`].
struct G17Formatter(PrettyFormatter<'static>);

impl Formatter for G17Formatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        writer.write_all(format_g17(value).as_bytes())
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Pretty JSON with sorted keys, 17-digit floats and a trailing newline.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    // routing through Value sorts object keys
    let value = serde_json::to_value(value)?;
    let mut buf = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut buf, G17Formatter(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| Error::Internal(e.to_string()))
}

fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

fn opt_num(x: Option<f64>) -> Value {
    x.map_or(Value::Null, num)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

// ---------------------------------------------------------------- design

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DesignFile {
    r1: BTreeMap<String, usize>,
    r2: Vec<BTreeMap<String, usize>>,
    whole_plot_sizes: Vec<usize>,
    z1_levels: Vec<Vec<usize>>,
    z2_levels: Vec<Vec<usize>>,
}

fn counts_by_level(
    levels: &[LevelCombo],
    map: &BTreeMap<String, usize>,
    what: &str,
) -> Result<Vec<usize>> {
    let mut out = vec![0; levels.len()];
    for (key, &count) in map {
        let level: LevelCombo = key.parse()?;
        let pos = levels
            .iter()
            .position(|l| *l == level)
            .ok_or_else(|| Error::Parse(format!("{what} refers to unknown level {key:?}")))?;
        out[pos] = count;
    }
    Ok(out)
}

fn level_map(levels: &[LevelCombo], counts: &[usize]) -> BTreeMap<String, usize> {
    levels
        .iter()
        .zip(counts)
        .map(|(l, &c)| (l.to_string(), c))
        .collect()
}

pub fn design_from_value(value: Value) -> Result<SplitPlotDesign> {
    let file: DesignFile = serde_json::from_value(value)?;
    let z1: Vec<LevelCombo> = file.z1_levels.into_iter().map(LevelCombo::new).collect();
    let z2: Vec<LevelCombo> = file.z2_levels.into_iter().map(LevelCombo::new).collect();
    let structure = FactorialStructure::new(z1.clone(), z2.clone())?;
    let r1 = counts_by_level(&z1, &file.r1, "r1")?;
    let r2 = file
        .r2
        .iter()
        .map(|m| counts_by_level(&z2, m, "r2"))
        .collect::<Result<Vec<_>>>()?;
    SplitPlotDesign::new(structure, file.whole_plot_sizes, r1, r2)
}

pub fn design_from_json(text: &str) -> Result<SplitPlotDesign> {
    design_from_value(serde_json::from_str(text)?)
}

pub fn read_design(path: &Path) -> Result<SplitPlotDesign> {
    design_from_json(&read_text(path)?)
}

pub fn design_to_value(design: &SplitPlotDesign) -> Value {
    let s = design.structure();
    let file = DesignFile {
        r1: level_map(s.z1_levels(), design.r1_all()),
        r2: design
            .r2_all()
            .iter()
            .map(|r| level_map(s.z2_levels(), r))
            .collect(),
        whole_plot_sizes: design.whole_plot_sizes().to_vec(),
        z1_levels: s.z1_levels().iter().map(|l| l.levels().to_vec()).collect(),
        z2_levels: s.z2_levels().iter().map(|l| l.levels().to_vec()).collect(),
    };
    serde_json::to_value(file).expect("plain data serializes")
}

/// Canonical text: reading it back and writing again gives the same bytes.
pub fn design_to_json(design: &SplitPlotDesign) -> Result<String> {
    to_json_string(&design_to_value(design))
}

// -------------------------------------------------------------- contrast

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContrastFile {
    g: BTreeMap<String, f64>,
}

pub fn contrast_from_value(structure: &FactorialStructure, value: Value) -> Result<ContrastSpec> {
    let file: ContrastFile = serde_json::from_value(value)?;
    ContrastSpec::from_labels(structure, file.g.iter().map(|(k, &v)| (k.as_str(), v)))
}

pub fn contrast_from_json(structure: &FactorialStructure, text: &str) -> Result<ContrastSpec> {
    contrast_from_value(structure, serde_json::from_str(text)?)
}

pub fn read_contrast(structure: &FactorialStructure, path: &Path) -> Result<ContrastSpec> {
    contrast_from_json(structure, &read_text(path)?)
}

pub fn contrast_to_value(structure: &FactorialStructure, contrast: &ContrastSpec) -> Value {
    let g: Map<String, Value> = structure
        .treatments()
        .map(|t| (structure.label(t), num(contrast.coefficient(structure, t))))
        .collect();
    json!({ "g": g })
}

// ------------------------------------------------------------------- csv

fn parse_index(field: &str, what: &str, row: usize) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("row {row}: bad {what} {field:?}")))
}

fn parse_float(field: &str, row: usize) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("row {row}: bad number {field:?}")))?;
    if !v.is_finite() {
        return Err(Error::Parse(format!("row {row}: non-finite outcome")));
    }
    Ok(v)
}

fn check_unit_ids(ids: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in ids {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Parse(format!(
                "unit ids must be 0..{} with each listed once (problem at {i})",
                n.saturating_sub(1)
            )));
        }
    }
    if ids.len() != n {
        return Err(Error::Parse(format!(
            "{} units listed, design has {n}",
            ids.len()
        )));
    }
    Ok(())
}

/// Reads `unit,whole_plot,<z1|z2 ...>`; treatment columns may come in any order.
pub fn read_potential_outcomes_csv<R: Read>(
    design: Arc<SplitPlotDesign>,
    reader: R,
) -> Result<PotentialOutcomeTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "unit" || &headers[1] != "whole_plot" {
        return Err(Error::Parse(
            "header must start with unit,whole_plot".into(),
        ));
    }
    let s = design.structure();
    let k = s.n_treatments();
    let mut columns = vec![None; k];
    for (c, label) in headers.iter().enumerate().skip(2) {
        let idx = s.index(s.parse_label(label)?);
        if columns[idx].replace(c).is_some() {
            return Err(Error::Parse(format!("duplicate column {label:?}")));
        }
    }
    let columns: Vec<usize> = columns
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            c.ok_or_else(|| Error::Parse(format!("missing column {}", s.label(s.treatment(i)))))
        })
        .collect::<Result<_>>()?;
    let n = design.n_units();
    let mut ids = Vec::new();
    let mut wp = vec![0; n];
    let mut y = vec![0.0; n * k];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let unit = parse_index(&rec[0], "unit", row + 1)?;
        ids.push(unit);
        if unit >= n {
            continue;
        }
        wp[unit] = parse_index(&rec[1], "whole_plot", row + 1)?;
        for (t, &c) in columns.iter().enumerate() {
            y[unit * k + t] = parse_float(&rec[c], row + 1)?;
        }
    }
    check_unit_ids(&ids, n)?;
    PotentialOutcomeTable::new(design, wp, y)
}

pub fn read_potential_outcomes(
    design: Arc<SplitPlotDesign>,
    path: &Path,
) -> Result<PotentialOutcomeTable> {
    read_potential_outcomes_csv(design, fs::File::open(path)?)
}

pub fn write_potential_outcomes_csv<W: Write>(
    table: &PotentialOutcomeTable,
    writer: W,
) -> Result<()> {
    let s = table.design().structure();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["unit".to_string(), "whole_plot".to_string()];
    header.extend(s.treatments().map(|t| s.label(t)));
    w.write_record(&header)?;
    for i in 0..table.n_units() {
        let mut rec = vec![i.to_string(), table.whole_plot_of(i).to_string()];
        rec.extend(table.unit_row(i).iter().map(|&v| format_g17(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `unit,whole_plot,z1,z2,y` with hyphen-serialized level tuples.
pub fn read_observed_csv<R: Read>(
    design: Arc<SplitPlotDesign>,
    reader: R,
) -> Result<ObservedDataset> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["unit", "whole_plot", "z1", "z2", "y"] {
        return Err(Error::Parse(
            "header must be unit,whole_plot,z1,z2,y".into(),
        ));
    }
    let s = design.structure().clone();
    let mut units = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let r = row + 1;
        let z1 = s.z1_position(&rec[2].trim().parse()?).ok_or_else(|| {
            Error::Parse(format!("row {r}: unknown whole-plot level {:?}", &rec[2]))
        })?;
        let z2 = s.z2_position(&rec[3].trim().parse()?).ok_or_else(|| {
            Error::Parse(format!("row {r}: unknown sub-plot level {:?}", &rec[3]))
        })?;
        units.push(ObservedUnit {
            unit: parse_index(&rec[0], "unit", r)?,
            whole_plot: parse_index(&rec[1], "whole_plot", r)?,
            z1,
            z2,
            y: parse_float(&rec[4], r)?,
        });
    }
    let ids: Vec<usize> = units.iter().map(|u| u.unit).collect();
    check_unit_ids(&ids, design.n_units())?;
    ObservedDataset::new(design, units)
}

pub fn read_observed(design: Arc<SplitPlotDesign>, path: &Path) -> Result<ObservedDataset> {
    read_observed_csv(design, fs::File::open(path)?)
}

pub fn write_observed_csv<W: Write>(data: &ObservedDataset, writer: W) -> Result<()> {
    let s = data.design().structure();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["unit", "whole_plot", "z1", "z2", "y"])?;
    for u in data.units() {
        w.write_record([
            u.unit.to_string(),
            u.whole_plot.to_string(),
            s.z1_levels()[u.z1].to_string(),
            s.z2_levels()[u.z2].to_string(),
            format_g17(u.y),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// -------------------------------------------------------------- B matrix

fn provenance_value(p: &Provenance) -> Value {
    match p {
        Provenance::Constructed {
            x,
            a1,
            a2,
            exhaustive,
        } => json!({
            "kind": p.name(),
            "x": x,
            "a1": num(*a1),
            "a2": num(*a2),
            "exhaustive_sign_search": exhaustive,
        }),
        _ => json!({ "kind": p.name() }),
    }
}

fn five_value(s: &FiveNumber) -> Value {
    json!({
        "min": num(s.min),
        "q1": num(s.q1),
        "median": num(s.median),
        "q3": num(s.q3),
        "max": num(s.max),
    })
}

/// Matrix, spectrum, provenance and (when `sizes` is given) the condition
/// report against those whole-plot sizes.
pub fn b_to_value(b: &BMatrix, sizes: Option<&[usize]>) -> Result<Value> {
    let mut v = json!({
        "schema_version": SCHEMA_VERSION,
        "matrix": b.to_dense().iter().map(|r| r.iter().map(|&x| num(x)).collect::<Vec<_>>()).collect::<Vec<_>>(),
        "eigenvalues": b.eigenvalues().iter().map(|&x| num(x)).collect::<Vec<_>>(),
        "lambda_max": num(b.lambda_max()),
        "provenance": provenance_value(b.provenance()),
    });
    if let Some(sizes) = sizes {
        let r = verify_c1_c2_c3(b, sizes)?;
        let obj = v.as_object_mut().expect("object");
        obj.insert("whole_plot_sizes".into(), json!(sizes));
        if sizes.len() >= 2 {
            obj.insert("lambda_lower_bound".into(), num(lambda_lower_bound(sizes)?));
        }
        obj.insert(
            "conditions".into(),
            json!({
                "diagonal": r.diagonal,
                "zero_row_sums": r.row_sums,
                "psd": r.psd,
                "rank_w_minus_1": r.rank_w_minus_1,
                "all_pass": r.all_pass(),
                "rank": r.rank,
                "min_eigenvalue": num(r.min_eigenvalue),
                "max_diagonal_error": num(r.max_diagonal_error),
                "max_abs_row_sum": num(r.max_abs_row_sum),
            }),
        );
    }
    Ok(v)
}

/// Reads the `matrix` field of a B file (other fields are ignored).
pub fn b_from_json(text: &str) -> Result<BMatrix> {
    let v: Value = serde_json::from_str(text)?;
    let rows: Vec<Vec<f64>> = serde_json::from_value(
        v.get("matrix")
            .cloned()
            .ok_or_else(|| Error::Parse("B file lacks a \"matrix\" field".into()))?,
    )?;
    let w = rows.len();
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::Parse("B matrix must be square".into()));
    }
    BMatrix::from_dense(&rows, Provenance::Explicit)
}

pub fn read_b(path: &Path) -> Result<BMatrix> {
    b_from_json(&read_text(path)?)
}

// --------------------------------------------------------------- reports

pub fn estimate_report_value(report: &EstimateReport, design: &SplitPlotDesign) -> Result<Value> {
    let cell: Map<String, Value> = report
        .cell_means
        .iter()
        .map(|c| (c.label.clone(), opt_num(c.ybar_obs)))
        .collect();
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "tau_hat": num(report.tau_hat),
        "v_hat": num(report.v_hat),
        "v_tilde": opt_num(report.v_tilde),
        "v_tilde_clamped": opt_num(report.v_tilde_clamped),
        "b_used": report.b_used.as_ref().map(|b| b_to_value(b, Some(design.whole_plot_sizes()))).transpose()?,
        "observed_means": cell,
        "n_units": report.n_units,
        "n_whole_plots": report.n_whole_plots,
        "mean_whole_plot_size": num(report.mean_whole_plot_size),
    }))
}

pub fn population_value(p: &PopulationSpec) -> Value {
    json!({
        "name": p.name,
        "theta": p.theta.iter().map(|r| r.iter().map(|&x| num(x)).collect::<Vec<_>>()).collect::<Vec<_>>(),
        "sigma2": p.sigma2.iter().map(|&x| num(x)).collect::<Vec<_>>(),
        "rho": p.rho.iter().map(|&x| num(x)).collect::<Vec<_>>(),
        "enforce_wp_means": opt_num(p.enforce_wp_means),
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PopulationFile {
    name: Option<String>,
    theta: Vec<Vec<f64>>,
    sigma2: Vec<f64>,
    rho: Vec<f64>,
    enforce_wp_means: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulationFile {
    preset: Option<String>,
    design: Option<Value>,
    contrast: Option<Value>,
    population: Option<PopulationFile>,
    b_matrix: Option<Vec<Vec<f64>>>,
    replicates: Option<usize>,
    seed: Option<u64>,
}

/// Simulation settings from JSON: either `{"preset": "IV"}` or a full
/// `design`/`contrast`/`population` description, with optional
/// `replicates`, `seed` and an explicit `b_matrix`.
pub fn simulation_settings_from_json(text: &str) -> Result<SimulationSettings> {
    let f: SimulationFile = serde_json::from_str(text)?;
    let replicates = f.replicates.unwrap_or(DEFAULT_REPLICATES);
    let seed = f.seed.unwrap_or(DEFAULT_SEED);
    let mut settings = if let Some(name) = &f.preset {
        if f.population.is_some() || f.design.is_some() || f.contrast.is_some() {
            return Err(Error::Parse(
                "give either a preset or design/contrast/population, not both".into(),
            ));
        }
        SimulationSettings::from_preset(name, replicates, seed)?
    } else {
        let p = f
            .population
            .ok_or_else(|| Error::Parse("configuration needs a preset or a population".into()))?;
        let design = match f.design {
            Some(v) => design_from_value(v)?,
            None => crate::simulation::school_design(),
        };
        let contrast = match f.contrast {
            Some(v) => contrast_from_value(design.structure(), v)?,
            None => ContrastSpec::interaction_2x2(),
        };
        SimulationSettings {
            design: Arc::new(design),
            contrast,
            population: PopulationSpec {
                name: p.name.unwrap_or_else(|| "custom".into()),
                theta: p.theta,
                sigma2: p.sigma2,
                rho: p.rho,
                enforce_wp_means: p.enforce_wp_means,
            },
            replicates,
            seed,
            b_source: BSource::Minimax,
        }
    };
    if let Some(rows) = f.b_matrix {
        settings.b_source = BSource::Explicit(BMatrix::from_dense(&rows, Provenance::Explicit)?);
    }
    settings.population.validate(&settings.design)?;
    Ok(settings)
}

pub fn study_summary_value(result: &StudyResult, settings: &SimulationSettings) -> Result<Value> {
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "population": population_value(&settings.population),
        "design": design_to_value(&settings.design),
        "contrast": contrast_to_value(settings.design.structure(), &settings.contrast),
        "replicates": result.records.len(),
        "seed": result.seed,
        "b": b_to_value(&result.b, Some(settings.design.whole_plot_sizes()))?,
        "delta": five_value(&result.delta_summary),
        "delta_tilde": five_value(&result.delta_tilde_summary),
        "ratio": result.ratio_summary.as_ref().map(five_value),
        "median_ratio": opt_num(result.median_ratio),
        "missing_ratios": result.missing_ratios,
        "ratio_delta_floor": num(RATIO_DELTA_FLOOR),
        "quartile_method": QUARTILE_METHOD,
    }))
}

pub fn write_replicates_csv<W: Write>(result: &StudyResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["replicate", "delta", "delta_tilde", "ratio"])?;
    for r in &result.records {
        w.write_record([
            r.replicate.to_string(),
            format_g17(r.delta),
            format_g17(r.delta_tilde),
            r.ratio.map_or_else(|| "NA".to_string(), format_g17),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per estimator: `v_hat` summarizes `Δ`, `v_tilde` summarizes `Δ̃`.
pub fn write_boxplot_csv<W: Write>(result: &StudyResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "population",
        "estimator",
        "min",
        "q1",
        "median",
        "q3",
        "max",
    ])?;
    for (name, s) in [
        ("v_hat", &result.delta_summary),
        ("v_tilde", &result.delta_tilde_summary),
    ] {
        w.write_record([
            result.population.clone(),
            name.to_string(),
            format_g17(s.min),
            format_g17(s.q1),
            format_g17(s.median),
            format_g17(s.q3),
            format_g17(s.max),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `replicates.csv`, `summary.json` and `boxplot.csv` into `dir`.
pub fn write_study(result: &StudyResult, settings: &SimulationSettings, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_replicates_csv(result, fs::File::create(dir.join("replicates.csv"))?)?;
    write_boxplot_csv(result, fs::File::create(dir.join("boxplot.csv"))?)?;
    fs::write(
        dir.join("summary.json"),
        to_json_string(&study_summary_value(result, settings)?)?,
    )?;
    Ok(())
}

pub fn oracle_report_value(report: &OracleReport, seed: u64) -> Value {
    let fixtures: Vec<Value> = report
        .fixtures
        .iter()
        .enumerate()
        .map(|(i, checks)| {
            json!({
                "index": i,
                "all_pass": checks.iter().all(|c| c.pass),
                "checks": checks.iter().map(|c| json!({
                    "name": c.name,
                    "enumerated": num(c.enumerated),
                    "formula": num(c.formula),
                    "abs_error": num(c.abs_error),
                    "pass": c.pass,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({
        "schema_version": SCHEMA_VERSION,
        "design": report.design_label,
        "assignments": report.assignments.to_string(),
        "seed": seed,
        "n_checks": report.n_checks(),
        "all_pass": report.all_pass(),
        "fixtures": fixtures,
    })
}

/// The eight simulation scenarios with their shared design and contrast.
pub fn presets_value() -> Result<Value> {
    let populations = PRESET_NAMES
        .iter()
        .map(|n| preset(n).map(|p| population_value(&p.population)))
        .collect::<Result<Vec<_>>>()?;
    let p = preset("I")?;
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "design": design_to_value(&p.design),
        "contrast": contrast_to_value(p.design.structure(), &p.contrast),
        "treatment_order": p.design.structure().treatments().map(|t| p.design.structure().label(t)).collect::<Vec<_>>(),
        "populations": populations,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bmatrix::minimax_b;
    use crate::randomize::{draw_assignment, observe};
    use crate::simulation::school_design;

    #[test]
    fn g17_matches_c_printf() {
        assert_eq!(format_g17(192.0), "192");
        assert_eq!(format_g17(0.1), "0.10000000000000001");
        assert_eq!(format_g17(-0.5), "-0.5");
        assert_eq!(format_g17(1e-5), "1.0000000000000001e-05");
        assert_eq!(format_g17(1e17), "1e+17");
        assert_eq!(format_g17(123456789012345678.0), "1.2345678901234568e+17");
        assert_eq!(format_g17(0.0001), "0.0001");
        assert_eq!(format_g17(16.0 / 1200.0), "0.013333333333333334");
        assert_eq!(format_g17(0.0), "0");
        for x in [0.1, 1.0 / 3.0, 2.5e-300, 6.02e23, -7.0e-7] {
            assert_eq!(format_g17(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn design_json_round_trips_byte_for_byte() {
        let d = school_design();
        let text = design_to_json(&d).unwrap();
        let back = design_from_json(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(design_to_json(&back).unwrap(), text);
        assert!(text.contains("\"r1\""));
        let shuffled = r#"{"z2_levels":[[0],[1]],"z1_levels":[[0],[1]],"whole_plot_sizes":[8,8,12,12],
            "r2":[{"1":4,"0":4},{"0":4,"1":4},{"0":6,"1":6},{"0":6,"1":6}],"r1":{"1":2,"0":2}}"#;
        assert_eq!(
            design_to_json(&design_from_json(shuffled).unwrap()).unwrap(),
            text
        );
    }

    #[test]
    fn design_json_rejects_bad_input() {
        assert!(design_from_json(r#"{"z1_levels":[[0],[1]]}"#).is_err());
        let bad_sum = r#"{"z1_levels":[[0],[1]],"z2_levels":[[0],[1]],"whole_plot_sizes":[2,2,2,2],
            "r1":{"0":1,"1":2},"r2":[{"0":1,"1":1},{"0":1,"1":1},{"0":1,"1":1},{"0":1,"1":1}]}"#;
        let err = design_from_json(bad_sum).unwrap_err();
        assert!(err.to_string().contains("whole-plot replication sum"));
        let unknown = bad_sum.replace("\"1\":2}", "\"7\":2}");
        assert!(design_from_json(&unknown).is_err());
    }

    #[test]
    fn contrast_json() {
        let s = FactorialStructure::two_by_two();
        let g = contrast_from_json(
            &s,
            r#"{"g":{"0|0":0.25,"0|1":-0.25,"1|0":-0.25,"1|1":0.25}}"#,
        )
        .unwrap();
        assert_eq!(g, ContrastSpec::interaction_2x2());
        let text = to_json_string(&contrast_to_value(&s, &g)).unwrap();
        assert_eq!(contrast_from_json(&s, &text).unwrap(), g);
        assert!(contrast_from_json(&s, r#"{"g":{"0|0":1}}"#).is_err());
        assert!(contrast_from_json(&s, r#"{"g":{"2|0":1,"0|0":-1}}"#).is_err());
    }

    #[test]
    fn csv_round_trips() {
        let d = Arc::new(school_design());
        let p = preset("V").unwrap();
        let table = crate::simulation::sample_population(&p.population, d.clone(), 3, 1).unwrap();
        let mut buf = Vec::new();
        write_potential_outcomes_csv(&table, &mut buf).unwrap();
        let back = read_potential_outcomes_csv(d.clone(), buf.as_slice()).unwrap();
        assert_eq!(back, table);

        let obs = observe(&table, &draw_assignment(&d, 1, 1)).unwrap();
        let mut buf = Vec::new();
        write_observed_csv(&obs, &mut buf).unwrap();
        let back = read_observed_csv(d.clone(), buf.as_slice()).unwrap();
        assert_eq!(back, obs);

        let text = String::from_utf8(buf).unwrap();
        let dup = text.replacen("\n1,", "\n0,", 1);
        assert!(read_observed_csv(d, dup.as_bytes()).is_err());
    }

    #[test]
    fn b_json_round_trip() {
        let b = minimax_b(&[8, 8, 12, 12]).unwrap();
        let v = b_to_value(&b, Some(&[8, 8, 12, 12])).unwrap();
        assert!((v["lambda_max"].as_f64().unwrap() - 192.0).abs() < 1e-9);
        assert_eq!(v["conditions"]["all_pass"], json!(true));
        let back = b_from_json(&to_json_string(&v).unwrap()).unwrap();
        assert_eq!(back.to_dense(), b.to_dense());
        assert!(b_from_json(r#"{"matrix":[[1,2],[3]]}"#).is_err());
    }

    #[test]
    fn simulation_config() {
        let s = simulation_settings_from_json(r#"{"preset":"VI","replicates":5}"#).unwrap();
        assert_eq!((s.replicates, s.seed), (5, DEFAULT_SEED));
        let custom = r#"{"population":{"theta":[[1,2,3,4],[1,2,3,4],[1,2,3,4],[1,2,3,4]],
            "sigma2":[1,1,1,1],"rho":[0,0,0,0]},"seed":3}"#;
        let s = simulation_settings_from_json(custom).unwrap();
        assert_eq!(s.population.name, "custom");
        assert!(simulation_settings_from_json(r#"{"preset":"VI","population":{}}"#).is_err());
        assert!(simulation_settings_from_json(r#"{"preset":"VI","bogus":1}"#).is_err());
    }
}
