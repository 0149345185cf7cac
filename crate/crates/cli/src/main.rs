//! `splitplot` command-line tool.
//!
//! Exit status: 0 on success, 2 for invalid input (bad files, designs that
//! violate a requirement, refused computations), 1 for internal failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use splitplot::bmatrix::{b_balanced, b_naive, b_three, exists_b, minimax_b, steps_b, BMatrix};
use splitplot::estimators::estimate;
use splitplot::io;
use splitplot::oracle::{design_a, design_b, run_oracle};
use splitplot::simulation::{run_bias_study, SimulationSettings, DEFAULT_REPLICATES, DEFAULT_SEED};
use splitplot::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "splitplot",
    version,
    about = "Randomization-based analysis of split-plot experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate a contrast and its variance from observed data.
    Analyze {
        /// Design JSON.
        #[arg(long)]
        design: PathBuf,
        /// Observed-data CSV with columns unit,whole_plot,z1,z2,y.
        #[arg(long)]
        data: PathBuf,
        /// Contrast JSON of the form {"g": {"z1|z2": coefficient}}.
        #[arg(long)]
        contrast: PathBuf,
        /// Correction matrix JSON; enables the corrected estimator.
        #[arg(long, conflicts_with = "minimax_b")]
        b: Option<PathBuf>,
        /// Build the minimax correction matrix for the design's sizes.
        #[arg(long)]
        minimax_b: bool,
        /// Also report the corrected estimate truncated at zero.
        #[arg(long)]
        clamp: bool,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build and verify a correction matrix for given whole-plot sizes.
    ConstructB {
        /// Comma-separated whole-plot sizes.
        #[arg(
            long,
            value_delimiter = ',',
            required_unless_present = "design",
            conflicts_with = "design"
        )]
        sizes: Option<Vec<usize>>,
        /// Take the sizes from a design JSON.
        #[arg(long)]
        design: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Minimax)]
        mode: Mode,
        /// Sign vector for `steps`, over the sizes sorted ascending with the
        /// largest left out, e.g. 1,1,-1.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x: Option<Vec<i8>>,
        #[arg(long, allow_negative_numbers = true)]
        a1: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        a2: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo comparison of the two variance-estimator biases.
    Simulate {
        /// Built-in scenario I to VIII.
        #[arg(long, required_unless_present = "config", conflicts_with = "config")]
        preset: Option<String>,
        /// Scenario JSON (a preset name or a full population description).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for replicates.csv, summary.json and boxplot.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every expectation identity by exhaustive enumeration.
    Oracle {
        /// `A`, `B` or a path to a design JSON.
        #[arg(long, default_value = "B")]
        design: String,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        fixtures: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the built-in simulation scenarios.
    Presets {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Balanced,
    Three,
    Naive,
    Minimax,
    Steps,
}

fn emit(value: &Value, out: Option<&Path>) -> Result<()> {
    let text = io::to_json_string(value)?;
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn construct(
    sizes: &[usize],
    mode: Mode,
    x: Option<Vec<i8>>,
    a1: Option<f64>,
    a2: Option<f64>,
) -> Result<(BMatrix, Option<bool>)> {
    Ok(match mode {
        Mode::Balanced => {
            let m = sizes[0];
            if sizes.iter().any(|&s| s != m) {
                return Err(Error::Domain(
                    "balanced mode needs equal whole-plot sizes".into(),
                ));
            }
            (b_balanced(m, sizes.len())?, None)
        }
        Mode::Three => (b_three(sizes)?, None),
        Mode::Naive => {
            let (b, psd) = b_naive(sizes)?;
            (b, Some(psd))
        }
        Mode::Minimax => (minimax_b(sizes)?, None),
        Mode::Steps => {
            let (x, a1, a2) = match (x, a1, a2) {
                (Some(x), Some(a1), Some(a2)) => (x, a1, a2),
                _ => return Err(Error::Domain("steps mode needs --x, --a1 and --a2".into())),
            };
            (steps_b(sizes, &x, a1, a2)?, None)
        }
    })
}

fn oracle_design(name: &str) -> Result<(splitplot::design::SplitPlotDesign, String)> {
    Ok(match name {
        "A" | "a" => (design_a(), "A".into()),
        "B" | "b" => (design_b(), "B".into()),
        path => (io::read_design(Path::new(path))?, path.to_string()),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze {
            design,
            data,
            contrast,
            b,
            minimax_b: use_minimax,
            clamp,
            out,
        } => {
            let design = Arc::new(io::read_design(&design)?);
            let contrast = io::read_contrast(design.structure(), &contrast)?;
            let data = io::read_observed(design.clone(), &data)?;
            let b = match (b, use_minimax) {
                (Some(p), _) => Some(io::read_b(&p)?),
                (None, true) => Some(minimax_b(design.whole_plot_sizes())?),
                (None, false) => None,
            };
            let report = estimate(&data, &contrast, b.as_ref(), clamp)?;
            emit(
                &io::estimate_report_value(&report, &design)?,
                out.as_deref(),
            )
        }
        Command::ConstructB {
            sizes,
            design,
            mode,
            x,
            a1,
            a2,
            out,
        } => {
            let sizes = match (sizes, design) {
                (Some(s), _) => s,
                (None, Some(p)) => io::read_design(&p)?.whole_plot_sizes().to_vec(),
                (None, None) => unreachable!("clap requires one of --sizes and --design"),
            };
            if sizes.len() < 2 || sizes.contains(&0) {
                return Err(Error::Domain(
                    "need at least two positive whole-plot sizes".into(),
                ));
            }
            let exists = if sizes.len() >= 3 {
                Some(exists_b(&sizes)?)
            } else {
                None
            };
            let (b, naive_psd) = construct(&sizes, mode, x, a1, a2)?;
            let mut v = io::b_to_value(&b, Some(&sizes))?;
            let obj = v.as_object_mut().expect("object");
            let psd =
                naive_psd.unwrap_or_else(|| obj["conditions"]["psd"].as_bool().unwrap_or(false));
            obj.insert("psd".into(), Value::Bool(psd));
            obj.insert("exists".into(), exists.map_or(Value::Null, Value::Bool));
            obj.insert(
                "mode".into(),
                Value::String(format!("{mode:?}").to_lowercase()),
            );
            emit(&v, out.as_deref())
        }
        Command::Simulate {
            preset,
            config,
            replicates,
            seed,
            out,
        } => {
            let mut settings = match (preset, config) {
                (Some(name), _) => {
                    SimulationSettings::from_preset(&name, DEFAULT_REPLICATES, DEFAULT_SEED)?
                }
                (None, Some(p)) => io::simulation_settings_from_json(&fs::read_to_string(&p)?)?,
                (None, None) => unreachable!("clap requires one of --preset and --config"),
            };
            if let Some(r) = replicates {
                settings.replicates = r;
            }
            if let Some(s) = seed {
                settings.seed = s;
            }
            let result = run_bias_study(&settings)?;
            io::write_study(&result, &settings, &out)?;
            let median = result
                .median_ratio
                .map_or_else(|| "undefined".to_string(), io::format_g17);
            eprintln!(
                "population {}: {} replicates, median bias ratio {median}, output in {}",
                result.population,
                result.records.len(),
                out.display()
            );
            Ok(())
        }
        Command::Oracle {
            design,
            seed,
            fixtures,
            out,
        } => {
            let (d, label) = oracle_design(&design)?;
            let report = run_oracle(Arc::new(d), &label, seed, fixtures)?;
            emit(&io::oracle_report_value(&report, seed), out.as_deref())?;
            if report.all_pass() {
                Ok(())
            } else {
                Err(Error::Internal(
                    "enumerated expectations disagree with the closed forms".into(),
                ))
            }
        }
        Command::Presets { out } => emit(&io::presets_value()?, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
