//! The `simlab` command line: Monte Carlo recovery studies, adaptive versus
//! linear comparisons and bank utilities.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use adaptcat_core::bank::{generate_bank, load_bank_file, serialize_bank, validate_bank, BankSpec, Format, Severity};
use adaptcat_core::simlab::{
    emit_report, run_condition, BankSource, ExamineeRecord, ReportFormat, SimError, SimulationReport, SimulationSpec,
};
use adaptcat_core::Model;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "simlab", version, about = "Monte Carlo studies for adaptive tests")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every condition of a spec file and report recovery metrics.
    Run {
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        opts: RunOpts,
        /// Directory for report.{txt,csv,json} and records.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare adaptive length with the fixed-order linear comparator.
    Compare {
        #[arg(long)]
        adaptive: PathBuf,
        /// Use the seeded fixed-order linear form as the baseline.
        #[arg(long)]
        linear: bool,
        /// SEM both forms must reach; defaults to the study's min_sem.
        #[arg(long)]
        target_sem: Option<f64>,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Validate a spec file without running it.
    Check {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Item bank utilities.
    #[command(subcommand)]
    Bank(BankCommand),
}

#[derive(Debug, Args)]
pub struct RunOpts {
    /// Master seed; overrides the spec.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "table")]
    pub format: ReportFormat,
    /// Examinees per replication; overrides the spec.
    #[arg(long)]
    pub examinees: Option<usize>,
    /// Replications; overrides the spec.
    #[arg(long)]
    pub replications: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum BankCommand {
    /// Write a synthetic bank to stdout.
    Generate {
        #[arg(long, default_value = "2PL")]
        model: Model,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Response categories of GRM items.
        #[arg(long, default_value_t = 5)]
        categories: usize,
        /// Comma-separated content groups, assigned round-robin.
        #[arg(long, value_delimiter = ',')]
        groups: Vec<String>,
        #[arg(long, default_value = "csv")]
        format: Format,
    },
    /// Report every rule violation in a bank file.
    Check { file: PathBuf },
}

/// Why a command failed. Spec problems map to exit code 2.
#[derive(Debug)]
pub enum Failure {
    Spec(String),
    Other(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Spec(_) => 2,
            Failure::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Spec(m) => write!(f, "invalid spec: {m}"),
            Failure::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.into())
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Spec(problems) => Failure::Spec(problems.join("; ")),
            SimError::Bank(e) => Failure::Spec(e.to_string()),
            other => Failure::Other(other.into()),
        }
    }
}

/// Reads a spec file. A file holds either one condition at the top level or
/// several under `[[condition]]`. Relative bank paths resolve against the
/// file's directory.
pub fn load_specs(path: &Path) -> Result<Vec<SimulationSpec>, Failure> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Spec(format!("cannot read {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Failure::Spec(format!("{}: {}", path.display(), e.message())))?;
    let mut specs = match table.get("condition") {
        Some(toml::Value::Array(list)) => {
            let mut out = Vec::new();
            for (i, v) in list.iter().enumerate() {
                let spec: SimulationSpec = v
                    .clone()
                    .try_into()
                    .map_err(|e: toml::de::Error| Failure::Spec(format!("condition {}: {}", i + 1, e.message())))?;
                out.push(spec);
            }
            out
        }
        Some(_) => return Err(Failure::Spec("`condition` must be an array of tables".into())),
        None => vec![SimulationSpec::from_toml(&text)?],
    };
    if specs.is_empty() {
        return Err(Failure::Spec("no conditions".into()));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    for spec in &mut specs {
        if let BankSource::File { file } = &mut spec.bank {
            if file.is_relative() {
                *file = base.join(&*file);
            }
        }
    }
    Ok(specs)
}

fn apply(specs: &mut [SimulationSpec], opts: &RunOpts) {
    for s in specs {
        if let Some(seed) = opts.seed {
            s.seed = seed;
        }
        if let Some(n) = opts.examinees {
            s.n_examinees = n;
        }
        if let Some(n) = opts.replications {
            s.replications = n;
        }
    }
}

/// Validates every condition before any of them runs.
fn prepare_all(specs: &[SimulationSpec]) -> Result<(), Failure> {
    let mut problems = Vec::new();
    for s in specs {
        if let Err(e) = s.prepare() {
            problems.push(format!("[{}] {e}", s.name));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Failure::Spec(problems.join("\n")))
    }
}

fn run_all(specs: &[SimulationSpec]) -> Result<Vec<SimulationReport>, Failure> {
    prepare_all(specs)?;
    specs.iter().map(|s| run_condition(s).map_err(Failure::from)).collect()
}

fn records_csv(reports: &[SimulationReport]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "condition",
        "replication",
        "examinee",
        "theta_true",
        "theta_hat",
        "se",
        "length",
        "retest_theta",
    ])?;
    for rep in reports {
        for ExamineeRecord {
            replication,
            examinee,
            theta_true,
            theta_hat,
            se,
            length,
            retest_theta,
            ..
        } in &rep.records
        {
            w.write_record([
                rep.name.clone(),
                replication.to_string(),
                examinee.to_string(),
                theta_true.to_string(),
                theta_hat.to_string(),
                se.to_string(),
                length.to_string(),
                retest_theta.map(|t| t.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn write_outputs(dir: &Path, reports: &[SimulationReport]) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.txt"), emit_report(reports, ReportFormat::Table))?;
    fs::write(dir.join("report.csv"), emit_report(reports, ReportFormat::Csv))?;
    fs::write(dir.join("report.json"), emit_report(reports, ReportFormat::Json))?;
    fs::write(dir.join("records.csv"), records_csv(reports)?)?;
    Ok(())
}

fn comparison(reports: &[SimulationReport], format: ReportFormat) -> String {
    if format != ReportFormat::Table {
        return emit_report(reports, format);
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:>8} {:>9} {:>9} {:>11}",
        "Condition", "SEM", "Adaptive", "Linear", "Efficiency"
    );
    for r in reports {
        let (Some(lin), Some(eff)) = (r.linear_length, r.efficiency) else {
            continue;
        };
        let _ = writeln!(
            out,
            "{:<20} {:>8.3} {:>9.2} {:>9.2} {:>10.1}%",
            r.name,
            r.mean_se,
            r.length,
            lin,
            100.0 * eff
        );
    }
    out
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), Failure> {
    match cli.command {
        Command::Run { spec, opts, out } => {
            let mut specs = load_specs(&spec)?;
            apply(&mut specs, &opts);
            let reports = run_all(&specs)?;
            if let Some(dir) = out {
                write_outputs(&dir, &reports)?;
            }
            stdout.write_all(emit_report(&reports, opts.format).as_bytes())?;
        }
        Command::Compare {
            adaptive,
            linear,
            target_sem,
            opts,
        } => {
            if !linear {
                return Err(Failure::Spec("compare needs a baseline; pass --linear".into()));
            }
            let mut specs = load_specs(&adaptive)?;
            apply(&mut specs, &opts);
            for s in &mut specs {
                s.linear = true;
                if target_sem.is_some() {
                    s.linear_target_sem = target_sem;
                    s.config.min_sem = target_sem.unwrap_or(s.config.min_sem);
                }
            }
            let reports = run_all(&specs)?;
            stdout.write_all(comparison(&reports, opts.format).as_bytes())?;
        }
        Command::Check { spec } => {
            let specs = load_specs(&spec)?;
            prepare_all(&specs)?;
            for s in &specs {
                writeln!(
                    stdout,
                    "{}: ok ({} x {} examinees, seed {})",
                    s.name, s.replications, s.n_examinees, s.seed
                )?;
            }
        }
        Command::Bank(BankCommand::Generate {
            model,
            items,
            seed,
            categories,
            groups,
            format,
        }) => {
            let spec = BankSpec {
                categories,
                groups,
                ..BankSpec::new(model, items, seed)
            };
            let bank = generate_bank(&spec).map_err(|e| Failure::Spec(e.to_string()))?;
            stdout.write_all(serialize_bank(&bank, format).as_bytes())?;
        }
        Command::Bank(BankCommand::Check { file }) => {
            let bank = load_bank_file(&file).map_err(|e| Failure::Spec(e.to_string()))?;
            let violations = validate_bank(&bank);
            for v in &violations {
                let sev = match v.severity {
                    Severity::Error => "error",
                    Severity::Warning => "warning",
                };
                writeln!(stdout, "{sev}: {}: {}", v.item_id.as_deref().unwrap_or("-"), v.message)?;
            }
            let errors = violations.iter().filter(|v| v.is_error()).count();
            writeln!(stdout, "{} items, {errors} errors", bank.len())?;
            if errors > 0 {
                return Err(Failure::Spec(format!("{errors} bank errors")));
            }
        }
    }
    Ok(())
}
