//! Command-line front end. `main.rs` only forwards to [`run`].

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{Experiment, ExperimentSpec};
use crate::constants::ConstantReport;
use crate::error::{DyadError, Result};
use crate::lattice::Grid;
use crate::measures::{generate, MeasureSpec};
use crate::report::write_atomic;
use crate::verify::{run_suite, t1_bundle, SuiteReport, SUITES};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dyadlab", version, about = "Two-weight dyadic harmonic analysis experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a lattice measure in the DYADMEAS text format.
    GenMeasure(GenMeasureArgs),
    /// Compute the operator, weight and testing constants of a config.
    Constants(RunArgs),
    /// Run one check suite.
    Verify {
        /// t1 | goodlambda | truncation | polytesting | cancellation | wavelets | corona
        suite: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Report utilities.
    Report {
        #[command(subcommand)]
        action: ReportAction,
    },
}

#[derive(Debug, Args)]
pub struct GenMeasureArgs {
    /// measure family, e.g. `lebesgue`, `power:0.5:0`, `cascade:0.3:7`
    #[arg(long)]
    pub family: String,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long = "L", short = 'L')]
    pub depth: u32,
    /// overrides the seed of a cascade family
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    pub side: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// experiment config (TOML); defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// overrides `output.dir`
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// overrides the config seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum ReportAction {
    /// Concatenate CSV record files sharing one header.
    Merge {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Maps an error to its exit code.
pub fn exit_code(e: &DyadError) -> i32 {
    match e {
        DyadError::BudgetExceeded { .. } => EXIT_BUDGET,
        DyadError::UnknownSuite(_) | DyadError::Parse(_) | DyadError::BadParameter(_) => EXIT_USAGE,
        _ => EXIT_FAIL,
    }
}

fn load_spec(args: &RunArgs) -> Result<ExperimentSpec> {
    let mut spec = match &args.config {
        Some(p) => ExperimentSpec::load(p)?,
        None => ExperimentSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(d) = &args.out_dir {
        spec.output.dir = d.clone();
    }
    if spec.id.is_empty() {
        spec.id = "experiment".into();
    }
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_gen_measure(a: &GenMeasureArgs) -> Result<()> {
    let mut spec = MeasureSpec::parse(&a.family)?;
    if let (Some(s), MeasureSpec::Cascade { seed, .. }) = (a.seed, &mut spec) {
        *seed = s;
    }
    let grid = Grid::new(a.n, a.depth, &vec![0.0; a.n], a.side)?;
    generate(&spec, &grid)?.save(&a.out)
}

pub fn constants_csv(reports: &[ConstantReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["name", "value", "lower_bound", "witness", "seed", "samples", "params"]).expect("in-memory csv");
    for r in reports {
        let params: Vec<String> = r.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        w.write_record([
            r.name.clone(),
            format!("{:e}", r.value),
            r.lower_bound.to_string(),
            r.witness.clone().unwrap_or_default(),
            r.seed.to_string(),
            r.samples.to_string(),
            params.join(";"),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

/// The T1 bundle of a config; written as `<id>-constants.{json,csv}`.
pub fn cmd_constants(spec: &ExperimentSpec) -> Result<Vec<ConstantReport>> {
    let ex = Experiment::new(spec)?;
    let s = &spec.samplers;
    let max_level = s.max_level.min(ex.grid.depth());
    let fam = if s.cubes == 0 {
        crate::constants::SampleFamily::exhaustive(&ex.grid, max_level, s.random_subsets, spec.seed)
    } else {
        crate::constants::SampleFamily::sampled(&ex.grid, s.cubes, max_level, s.random_subsets, spec.seed)
    };
    let reports = t1_bundle(&ex, &fam, spec.params.kappa)?.all();
    let dir = &spec.output.dir;
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    write_atomic(&dir.join(format!("{}-constants.json", spec.id)), json.as_bytes())?;
    write_atomic(&dir.join(format!("{}-constants.csv", spec.id)), constants_csv(&reports).as_bytes())?;
    Ok(reports)
}

pub fn write_suite(rep: &SuiteReport, dir: &Path) -> Result<()> {
    let stem = format!("{}-{}", rep.id, rep.suite);
    write_atomic(&dir.join(format!("{stem}.json")), rep.to_json().as_bytes())?;
    write_atomic(&dir.join(format!("{stem}.csv")), rep.to_csv().as_bytes())
}

pub fn cmd_verify(suite: &str, spec: &ExperimentSpec) -> Result<SuiteReport> {
    if !SUITES.contains(&suite) {
        return Err(DyadError::UnknownSuite(suite.into()));
    }
    let rep = run_suite(suite, spec)?;
    write_suite(&rep, &spec.output.dir)?;
    Ok(rep)
}

/// Appends the data rows of every input after a single header.
pub fn cmd_merge(out: &Path, inputs: &[PathBuf]) -> Result<usize> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Option<csv::StringRecord> = None;
    let mut rows = 0;
    for p in inputs {
        let mut r = csv::Reader::from_path(p).map_err(|e| DyadError::Parse(format!("{}: {e}", p.display())))?;
        let h = r.headers().map_err(|e| DyadError::Parse(e.to_string()))?.clone();
        match &header {
            None => {
                w.write_record(&h).expect("in-memory csv");
                header = Some(h);
            }
            Some(first) if *first != h => {
                return Err(DyadError::Parse(format!("{}: header differs from the first input", p.display())));
            }
            _ => {}
        }
        for rec in r.records() {
            w.write_record(&rec.map_err(|e| DyadError::Parse(e.to_string()))?).expect("in-memory csv");
            rows += 1;
        }
    }
    write_atomic(out, &w.into_inner().expect("flush"))?;
    Ok(rows)
}

fn init_threads() {
    if let Some(k) = std::env::var("DYADLAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if k > 0 {
            // fails only if a pool already exists, which is harmless
            let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
        }
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    init_threads();
    let outcome = match &cli.command {
        Command::GenMeasure(a) => cmd_gen_measure(a).map(|_| EXIT_PASS),
        Command::Constants(a) => load_spec(a).and_then(|s| cmd_constants(&s)).map(|reports| {
            for r in &reports {
                println!("{:<16} {:e}", r.name, r.value);
            }
            EXIT_PASS
        }),
        Command::Verify { suite, run } => load_spec(run).and_then(|s| cmd_verify(suite, &s)).map(|rep| {
            for r in &rep.records {
                println!("{:<5} {}  ratio={:e}", if r.passed() { "PASS" } else { "FAIL" }, r.name, r.ratio);
            }
            for n in &rep.notes {
                eprintln!("note: {n}");
            }
            if rep.all_pass() {
                EXIT_PASS
            } else {
                EXIT_FAIL
            }
        }),
        Command::Report { action: ReportAction::Merge { out, inputs } } => cmd_merge(out, inputs).map(|rows| {
            println!("merged {rows} rows into {}", out.display());
            EXIT_PASS
        }),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
