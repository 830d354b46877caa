//! Command-line front end.
//!
//! Exit codes: 0 success, 2 input error, 3 numerical failure, 4 oracle
//! failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adjustment::{
    structural_covariates, top_k_spectrum, AdjustmentError, Covariates, SpectralBasis,
    SpectrumOptions, StructuralKind,
};
use crate::design::{replication_stream, Design, RNG_ID};
use crate::estimators::{ev_adjusted_indirect, ht_direct, ht_indirect};
use crate::generators::{random_instance, ScenarioConfig};
use crate::hate_model::{BoundDiagnostic, Estimands};
use crate::io::{
    read_assignment, read_edge_list, read_outcomes, read_parameters, read_strata, StrataFile,
};
use crate::montecarlo::{
    run_replications, write_replications_csv, write_summary_csv, RunOptions, SimulationError,
};
use crate::oracle::{identity_checks, Mutation};
use crate::variance::{
    var_dir_hat, var_ev_hat, var_ind_hat, var_tot_hat, wald_ci, Estimand, EstimateReport, EvKind,
};

#[derive(Debug, Parser)]
#[command(
    name = "netfx",
    version,
    about = "Design-based treatment effect estimation under network interference"
)]
pub struct Cli {
    /// Master seed for every random draw.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads for Monte Carlo replications.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Point estimates, variance estimates and Wald intervals for observed data.
    Estimate(EstimateArgs),
    /// Monte Carlo summary table for a scenario config.
    Simulate(SimulateArgs),
    /// Top eigenvalues of E Eᵀ.
    Spectrum(SpectrumArgs),
    /// Exact identity checks on a seeded random instance.
    OracleCheck(OracleCheckArgs),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Edge list CSV (`source,target`).
    #[arg(long)]
    pub network: PathBuf,
    /// Outcomes CSV (`i,y`).
    #[arg(long)]
    pub outcomes: PathBuf,
    /// Assignment CSV (`i,z`).
    #[arg(long)]
    pub assignment: PathBuf,
    /// Number of units; inferred from the edge list when absent.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub r1: f64,
    /// Eigenvectors used for adjustment; 0 means intercept only.
    #[arg(long, default_value_t = 0, conflicts_with = "strata")]
    pub k: usize,
    /// Stratum file (`i,stratum` or `i,row_stratum,col_stratum`).
    #[arg(long)]
    pub strata: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Use doubled variance estimates for the primary intervals.
    #[arg(long)]
    pub doubled: bool,
    /// Known parameters (`i,alpha,theta`) for debugging against the truth.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Sparse spillovers (`i,j,gamma`) to go with `--truth`.
    #[arg(long, requires = "truth")]
    pub gamma: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario TOML file.
    #[arg(long)]
    pub config: PathBuf,
    /// Number of replications.
    #[arg(short = 'R', long = "replications", default_value_t = 2000)]
    pub replications: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Also write the per-replication matrix here.
    #[arg(long)]
    pub dump_reps: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub network: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: usize,
    /// Write the whitened covariates `[1, V_K]` here.
    #[arg(long)]
    pub w_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
}

#[derive(Debug, Args)]
pub struct OracleCheckArgs {
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 0.5)]
    pub r1: f64,
    #[arg(long, default_value_t = 0.35)]
    pub edge_prob: f64,
    #[arg(long, default_value_t = 0.7)]
    pub keep_prob: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    /// Negative control: drop the second-order variance component.
    #[arg(long, hide = true)]
    pub mutate: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("input error: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("oracle failure: {0}")]
    Oracle(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Oracle(_) => 4,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

fn numerical<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Numerical(e.to_string())
}

impl From<AdjustmentError> for CliError {
    fn from(e: AdjustmentError) -> Self {
        match e {
            AdjustmentError::LengthMismatch { .. }
            | AdjustmentError::EmptyStratum(_)
            | AdjustmentError::LabelOutOfRange { .. }
            | AdjustmentError::InvalidK { .. } => input(e),
            _ => numerical(e),
        }
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::Generator(_)
            | SimulationError::Io(_)
            | SimulationError::TooFewReplications(_) => input(e),
            SimulationError::Adjustment(a) => a.into(),
            _ => numerical(e),
        }
    }
}

/// Provenance of an output file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the input files, in argument order.
    pub config_digest: String,
    pub seed: u64,
    pub rng: String,
    pub version: String,
    pub started: String,
    pub finished: String,
}

impl RunManifest {
    fn start(command: &str, inputs: &[&Path], seed: u64) -> Result<Self, CliError> {
        let mut hasher = Sha256::new();
        for path in inputs {
            let bytes = fs::read(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
            hasher.update(&bytes);
        }
        let now = timestamp();
        Ok(RunManifest {
            command: command.to_string(),
            config_digest: hex::encode(hasher.finalize()),
            seed,
            rng: RNG_ID.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started: now.clone(),
            finished: now,
        })
    }

    fn finish(mut self) -> Self {
        self.finished = timestamp();
        self
    }
}

fn timestamp() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// `<path>.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| input(format!("{}: {e}", p.display()))),
        None => std::io::stdout().write_all(bytes).map_err(input),
    }
}

fn write_manifest(beside: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(manifest).map_err(input)?;
    let path = manifest_path(beside);
    fs::write(&path, text + "\n").map_err(|e| input(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
struct SpectrumSummary {
    k: usize,
    lambda: Vec<f64>,
    next_bound: f64,
    residual_norms: Vec<f64>,
    iterations: usize,
    degenerate: bool,
    rank_reduced: bool,
}

impl From<&SpectralBasis> for SpectrumSummary {
    fn from(b: &SpectralBasis) -> Self {
        SpectrumSummary {
            k: b.k,
            lambda: b.eigenvalues.clone(),
            next_bound: b.next_eigenvalue_bound,
            residual_norms: b.residual_norms.clone(),
            iterations: b.iterations,
            degenerate: b.degenerate,
            rank_reduced: b.rank_reduced,
        }
    }
}

#[derive(Debug, Serialize)]
struct Truth {
    estimands: Estimands,
    bounds: BoundDiagnostic,
}

/// Output of `estimate`.
#[derive(Debug, Serialize)]
struct EstimateOutput {
    manifest: RunManifest,
    n: usize,
    edges: usize,
    adjustment: String,
    /// DIR, IND, TOT, EV_IND, EV_TOT.
    reports: Vec<EstimateReport>,
    /// The same estimates with the alternate interval convention.
    alternate: Vec<EstimateReport>,
    spectrum: Option<SpectrumSummary>,
    warnings: Vec<String>,
    truth: Option<Truth>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Estimate(a) => cmd_estimate(cli, a),
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Spectrum(a) => cmd_spectrum(cli, a),
        Command::OracleCheck(a) => cmd_oracle_check(cli, a),
    }
}

fn cmd_estimate(cli: &Cli, a: &EstimateArgs) -> Result<(), CliError> {
    let mut inputs: Vec<&Path> = vec![&a.network, &a.outcomes, &a.assignment];
    inputs.extend(a.strata.as_deref());
    inputs.extend(a.truth.as_deref());
    inputs.extend(a.gamma.as_deref());
    let manifest = RunManifest::start("estimate", &inputs, cli.seed)?;
    let d = Design::new(a.r1).map_err(input)?;
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(input(format!("level {} outside (0, 1)", a.level)));
    }
    let load = read_edge_list(&a.network, a.n).map_err(input)?;
    let g = load.graph;
    let n = g.n();
    let y = read_outcomes(&a.outcomes, Some(n)).map_err(input)?;
    let z = read_assignment(&a.assignment, Some(n)).map_err(input)?;
    let mut warnings = Vec::new();
    if load.duplicates > 0 {
        warnings.push(format!("collapsed {} duplicate edges", load.duplicates));
    }

    let mut spectrum = None;
    let (w, adjustment) = match (&a.strata, a.k) {
        (Some(path), _) => {
            let strata = read_strata(path, Some(n)).map_err(input)?;
            let s = match &strata {
                StrataFile::Merged(l) => structural_covariates(StructuralKind::MergedGroups(l))?,
                StrataFile::TwoWay { rows, cols } => {
                    structural_covariates(StructuralKind::TwoWay { rows, cols })?
                }
            };
            warnings.extend(s.warnings);
            (s.covariates, format!("strata (rank {})", s.rank))
        }
        (None, 0) => (Covariates::intercept_only(n), "intercept".to_string()),
        (None, k) => {
            let mut rng = replication_stream(cli.seed, 0);
            let basis = top_k_spectrum(&g, k, &SpectrumOptions::default(), &mut rng)?;
            if basis.degenerate {
                warnings.push("requested eigenvectors include a zero eigenvalue".into());
            }
            let w = basis.covariates.clone();
            spectrum = Some(SpectrumSummary::from(&basis));
            (w, format!("spectral (k = {k})"))
        }
    };

    let dir = ht_direct(&y, &z, &d).map_err(input)?;
    let ind = ht_indirect(&y, &z, &g, &d).map_err(input)?;
    let (ev_ind, fit) = ev_adjusted_indirect(&y, &z, &g, &w, &d).map_err(numerical)?;
    warnings.extend(fit.warnings());
    let estimates = [
        (
            Estimand::Dir,
            dir,
            var_dir_hat(&y, &z, &d).map_err(numerical)?,
        ),
        (
            Estimand::Ind,
            ind,
            var_ind_hat(&y, &z, &g, &d).map_err(numerical)?,
        ),
        (
            Estimand::Tot,
            dir + ind,
            var_tot_hat(&y, &z, &g, &d).map_err(numerical)?,
        ),
        (
            Estimand::EvInd,
            ev_ind,
            var_ev_hat(&y, &fit.residuals, &z, &g, &d, EvKind::Ind).map_err(numerical)?,
        ),
        (
            Estimand::EvTot,
            dir + ev_ind,
            var_ev_hat(&y, &fit.residuals, &z, &g, &d, EvKind::Tot).map_err(numerical)?,
        ),
    ];
    let reports_with = |doubled: bool| -> Result<Vec<EstimateReport>, CliError> {
        estimates
            .iter()
            .map(|&(e, point, var)| wald_ci(e, point, var, a.level, doubled).map_err(numerical))
            .collect()
    };
    let reports = reports_with(a.doubled)?;
    let alternate = reports_with(!a.doubled)?;

    let truth = match &a.truth {
        Some(units) => {
            let p = read_parameters(units, a.gamma.as_deref(), &g).map_err(input)?;
            Some(Truth {
                estimands: p.true_estimands(),
                bounds: p.bound_diagnostic(),
            })
        }
        None => None,
    };

    let out = EstimateOutput {
        manifest: manifest.finish(),
        n,
        edges: g.edge_count(),
        adjustment,
        reports,
        alternate,
        spectrum,
        warnings,
        truth,
    };
    let text = serde_json::to_string_pretty(&out).map_err(input)? + "\n";
    write_output(cli.output.as_deref(), text.as_bytes())
}

fn cmd_simulate(cli: &Cli, a: &SimulateArgs) -> Result<(), CliError> {
    let manifest = RunManifest::start("simulate", &[&a.config], cli.seed)?;
    let text =
        fs::read_to_string(&a.config).map_err(|e| input(format!("{}: {e}", a.config.display())))?;
    let cfg = ScenarioConfig::from_toml(&text).map_err(input)?;
    let opts = RunOptions {
        replications: a.replications,
        seed: cli.seed,
        threads: cli.threads,
        level: a.level,
    };
    let (pop, sim) = run_replications(&cfg, &opts)?;
    for w in &pop.warnings {
        eprintln!("warning: {w}");
    }
    let mut csv = Vec::new();
    write_summary_csv(&mut csv, &sim.summaries)?;
    write_output(cli.output.as_deref(), &csv)?;
    let manifest = manifest.finish();
    if let Some(path) = &cli.output {
        write_manifest(path, &manifest)?;
    }
    if let Some(path) = &a.dump_reps {
        let mut reps = Vec::new();
        write_replications_csv(&mut reps, &sim)?;
        write_output(Some(path), &reps)?;
        write_manifest(path, &manifest)?;
    }
    Ok(())
}

fn cmd_spectrum(cli: &Cli, a: &SpectrumArgs) -> Result<(), CliError> {
    let load = read_edge_list(&a.network, a.n).map_err(input)?;
    let opts = SpectrumOptions {
        tol: a.tol,
        max_iter: a.max_iter,
    };
    let mut rng = replication_stream(cli.seed, 0);
    let basis = top_k_spectrum(&load.graph, a.k, &opts, &mut rng)?;
    let text = serde_json::to_string_pretty(&SpectrumSummary::from(&basis)).map_err(input)? + "\n";
    write_output(cli.output.as_deref(), text.as_bytes())?;
    if let Some(path) = &a.w_csv {
        let w = basis.covariates.matrix();
        let mut writer = csv::Writer::from_path(path).map_err(input)?;
        let mut header = vec!["i".to_string()];
        header.extend((0..w.ncols()).map(|c| format!("w{c}")));
        writer.write_record(&header).map_err(input)?;
        for i in 0..w.nrows() {
            let mut rec = vec![i.to_string()];
            rec.extend((0..w.ncols()).map(|c| w[(i, c)].to_string()));
            writer.write_record(&rec).map_err(input)?;
        }
        writer.flush().map_err(input)?;
    }
    Ok(())
}

fn cmd_oracle_check(cli: &Cli, a: &OracleCheckArgs) -> Result<(), CliError> {
    let d = Design::new(a.r1).map_err(input)?;
    if a.n < 3 || a.n > crate::oracle::DEFAULT_MAX_N {
        return Err(input(format!(
            "n = {} outside [3, {}]",
            a.n,
            crate::oracle::DEFAULT_MAX_N
        )));
    }
    let mut rng = replication_stream(cli.seed, 0);
    let (g, p) = random_instance(a.n, a.edge_prob, a.keep_prob, &mut rng).map_err(input)?;
    let basis = top_k_spectrum(&g, 1, &SpectrumOptions::default(), &mut rng)?;
    let mutation = if a.mutate {
        Mutation::DropSecondOrder
    } else {
        Mutation::None
    };
    let rows =
        identity_checks(&p, &g, &basis.covariates, &d, a.tol, mutation).map_err(numerical)?;
    let mut table = format!(
        "# n = {}, edges = {}, hidden edges = {}, r1 = {}, seed = {}\n",
        g.n(),
        g.edge_count(),
        p.hidden().edge_count(),
        a.r1,
        cli.seed
    );
    table.push_str(&format!(
        "{:<6} {:<30} {:>23}    {:>23}\n",
        "status", "check", "lhs", "rhs"
    ));
    for r in &rows {
        let status = if r.pass { "PASS" } else { "FAIL" };
        let rel = if r.inequality { ">=" } else { "==" };
        table.push_str(&format!(
            "{status:<6} {:<30} {:>23.15e} {rel} {:>23.15e}\n",
            r.name, r.lhs, r.rhs
        ));
    }
    write_output(cli.output.as_deref(), table.as_bytes())?;
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Oracle(format!(
            "failed checks: {}",
            failed.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("netfx").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn global_flags_parse_after_subcommand() {
        let cli = parse(&[
            "simulate",
            "--config",
            "c.toml",
            "-R",
            "10",
            "--seed",
            "7",
            "--threads",
            "2",
        ]);
        assert_eq!(cli.seed, 7);
        assert_eq!(cli.threads, 2);
        match cli.command {
            Command::Simulate(s) => assert_eq!(s.replications, 10),
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn k_and_strata_conflict() {
        let r = Cli::try_parse_from([
            "netfx",
            "estimate",
            "--network",
            "e",
            "--outcomes",
            "y",
            "--assignment",
            "z",
            "--r1",
            "0.5",
            "--k",
            "2",
            "--strata",
            "s",
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["netfx", "spectrum"]), 2);
        assert_eq!(CliError::Numerical(String::new()).exit_code(), 3);
        assert_eq!(CliError::Oracle(String::new()).exit_code(), 4);
    }

    #[test]
    fn manifest_sits_beside_output() {
        assert_eq!(
            manifest_path(Path::new("out/table.csv")),
            PathBuf::from("out/table.csv.manifest.json")
        );
    }

    #[test]
    fn oracle_check_passes_and_mutation_fails() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("table.txt");
        let out_s = out.to_str().unwrap();
        assert_eq!(
            run(["netfx", "oracle-check", "--seed", "3", "--output", out_s]),
            0
        );
        let text = fs::read_to_string(&out).unwrap();
        assert!(!text.contains("FAIL"), "{text}");
        assert_eq!(
            run([
                "netfx",
                "oracle-check",
                "--seed",
                "3",
                "--mutate",
                "--output",
                out_s
            ]),
            4
        );
        let text = fs::read_to_string(&out).unwrap();
        assert!(text.contains("FAIL"));
    }

    #[test]
    fn invalid_r1_is_an_input_error() {
        assert_eq!(run(["netfx", "oracle-check", "--r1", "1.5"]), 2);
    }
}
