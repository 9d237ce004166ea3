//! Command-line surface. Every command writes its outputs and a
//! `manifest.json` into `--out-dir`; `replay` re-runs a manifest and checks
//! the outputs bit for bit.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lmmsdp_core::calibration::{calibrate, CalibrationProblem, CalibrationResult, CalibrationSpec, Mode, Objective, VariableForm};
use lmmsdp_core::cone::{IterationLog, SolverOptions};
use lmmsdp_core::hedging::{gamma_hedge, instrument_omega, price_bounds, static_hedge_portfolio, BoundSetup, Direction, GammaHedgeSpec};
use lmmsdp_core::market::{SwaptionInstrument, SwaptionQuote};
use lmmsdp_core::sensitivity::{scenario_sweep, PerturbationScenario};
use lmmsdp_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::io::{
    fmt_f64, format_years, input_digests, parse_market_data, parse_target, read_block_matrix, read_manifest, read_matrix_csv,
    read_scenarios, read_vector_csv, target_indices, FileDigest, ManifestOptions, OutputDir, ResolvedMarket, RunManifest,
    MANIFEST_NAME,
};
use crate::simulation::{run_bounds_sweep, run_hedging_experiment, HedgingExperiment, Method};

#[derive(Debug, Parser)]
#[command(name = "lmmsdp", version, about = "Semidefinite calibration, bounds and hedging for the Libor Market Model")]
pub struct Cli {
    /// Print solver iterations to standard error (also LMMSDP_VERBOSE=1).
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Calibrate the forward covariance to caplets and swaptions.
    Calibrate(CalibrateArgs),
    /// Price bounds for one swaption, or a sweep over the whole grid.
    Bounds(BoundsArgs),
    /// Dual sensitivities and Newton covariance updates under scenarios.
    Sensitivity(SensitivityArgs),
    /// Static hedge portfolio read from the bound duals.
    Hedge(HedgeArgs),
    /// Diagonal vanilla hedge minimizing the worst-case Gamma exposure.
    GammaHedge(GammaArgs),
    /// Monte-Carlo delta-hedging experiment.
    Simulate(SimulateArgs),
    /// Re-run a manifest and compare outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveArg {
    MinTrace,
    MinNorm,
    MaxLinf,
    MaxL1,
    MaxConfidence,
    MaximizeTarget,
    MinimizeTarget,
    Parametric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Equality,
    Bidask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormArg {
    Stationary,
    Nonstationary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionArg {
    Upper,
    Lower,
    Both,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct Common {
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1e-8)]
    pub tol_gap: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub tol_feas: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    /// Encoding of the report files.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

impl Common {
    fn options(&self, verbose: bool) -> AppResult<SolverOptions> {
        if !(self.tol_gap > 0.0) || !(self.tol_feas > 0.0) || self.max_iter == 0 {
            return Err(AppError::Usage("tolerances and --max-iter must be positive".into()));
        }
        Ok(SolverOptions { tol_gap: self.tol_gap, tol_feas: self.tol_feas, max_iter: self.max_iter, verbose })
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct MarketArgs {
    /// Market data file (JSON, or CSV by extension).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Equality)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = FormArg::Stationary)]
    pub form: FormArg,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ObjectiveArgs {
    #[arg(long, value_enum, default_value_t = ObjectiveArg::MinTrace)]
    pub objective: ObjectiveArg,
    /// Swaption `EXPIRYxTENOR` in years, for the target objectives.
    #[arg(long)]
    pub target: Option<String>,
    /// Prior matrix `C` for min-trace (CSV, or JSON list of blocks).
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Covariance of quoted variances for max-confidence (CSV).
    #[arg(long)]
    pub confidence_cov: Option<PathBuf>,
    /// Seed of the parametric fit.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub market: MarketArgs,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BoundsArgs {
    #[command(flatten)]
    pub market: MarketArgs,
    /// Swaption `EXPIRYxTENOR` in years.
    #[arg(long, conflicts_with = "sweep", required_unless_present = "sweep")]
    pub target: Option<String>,
    /// Bounds for every expiry/tenor pair inside the horizon.
    #[arg(long)]
    pub sweep: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub market: MarketArgs,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    /// Scenario file; defaults to ±1 vol point bumps of every instrument.
    #[arg(long)]
    pub scenarios: Option<PathBuf>,
    /// Also write each covariance update as CSV.
    #[arg(long)]
    pub dump_delta: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct HedgeArgs {
    #[command(flatten)]
    pub market: MarketArgs,
    /// Swaption `EXPIRYxTENOR` in years.
    #[arg(long)]
    pub target: String,
    #[arg(long, value_enum, default_value_t = DirectionArg::Both)]
    pub direction: DirectionArg,
    #[arg(long, default_value_t = 1.0)]
    pub notional: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GammaArgs {
    /// Portfolio Gamma matrix (CSV).
    #[arg(long)]
    pub gamma: PathBuf,
    /// Per-asset vanilla gammas (CSV row or column).
    #[arg(long)]
    pub gammas: PathBuf,
    /// Asset covariance (CSV).
    #[arg(long)]
    pub sigma: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Experiment configuration (JSON); defaults to the five-asset basket setup.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Histogram bins of the P&L distribution.
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where to write the replayed outputs (default: `<manifest dir>/replay`).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn absolute(p: &mut PathBuf) -> AppResult<()> {
    *p = std::fs::canonicalize(&*p).map_err(|e| AppError::io(p.clone(), e))?;
    Ok(())
}

fn absolute_opt(p: &mut Option<PathBuf>) -> AppResult<()> {
    if let Some(p) = p {
        absolute(p)?;
    }
    Ok(())
}

impl Command {
    /// Makes input paths absolute so the command can be replayed from any
    /// working directory.
    fn absolutize(&mut self) -> AppResult<()> {
        match self {
            Command::Calibrate(a) => {
                absolute(&mut a.market.data)?;
                absolute_opt(&mut a.objective.prior)?;
                absolute_opt(&mut a.objective.confidence_cov)
            }
            Command::Bounds(a) => absolute(&mut a.market.data),
            Command::Sensitivity(a) => {
                absolute(&mut a.market.data)?;
                absolute_opt(&mut a.objective.prior)?;
                absolute_opt(&mut a.objective.confidence_cov)?;
                absolute_opt(&mut a.scenarios)
            }
            Command::Hedge(a) => absolute(&mut a.market.data),
            Command::GammaHedge(a) => {
                absolute(&mut a.gamma)?;
                absolute(&mut a.gammas)?;
                absolute(&mut a.sigma)
            }
            Command::Simulate(a) => absolute_opt(&mut a.config),
            Command::Replay(a) => absolute(&mut a.manifest),
        }
    }

    fn inputs(&self) -> Vec<PathBuf> {
        let mut v = Vec::new();
        match self {
            Command::Calibrate(a) => {
                v.push(a.market.data.clone());
                v.extend(a.objective.prior.iter().cloned());
                v.extend(a.objective.confidence_cov.iter().cloned());
            }
            Command::Bounds(a) => v.push(a.market.data.clone()),
            Command::Sensitivity(a) => {
                v.push(a.market.data.clone());
                v.extend(a.objective.prior.iter().cloned());
                v.extend(a.objective.confidence_cov.iter().cloned());
                v.extend(a.scenarios.iter().cloned());
            }
            Command::Hedge(a) => v.push(a.market.data.clone()),
            Command::GammaHedge(a) => v.extend([a.gamma.clone(), a.gammas.clone(), a.sigma.clone()]),
            Command::Simulate(a) => v.extend(a.config.iter().cloned()),
            Command::Replay(a) => v.push(a.manifest.clone()),
        }
        v
    }

    fn common(&self) -> Option<&Common> {
        match self {
            Command::Calibrate(a) => Some(&a.common),
            Command::Bounds(a) => Some(&a.common),
            Command::Sensitivity(a) => Some(&a.common),
            Command::Hedge(a) => Some(&a.common),
            Command::GammaHedge(a) => Some(&a.common),
            Command::Simulate(a) => Some(&a.common),
            Command::Replay(_) => None,
        }
    }

    fn common_mut(&mut self) -> Option<&mut Common> {
        match self {
            Command::Calibrate(a) => Some(&mut a.common),
            Command::Bounds(a) => Some(&mut a.common),
            Command::Sensitivity(a) => Some(&mut a.common),
            Command::Hedge(a) => Some(&mut a.common),
            Command::GammaHedge(a) => Some(&mut a.common),
            Command::Simulate(a) => Some(&mut a.common),
            Command::Replay(_) => None,
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            Command::Calibrate(a) if a.objective.objective == ObjectiveArg::Parametric => Some(a.objective.seed),
            Command::Sensitivity(a) if a.objective.objective == ObjectiveArg::Parametric => Some(a.objective.seed),
            Command::Simulate(a) => a.seed,
            _ => None,
        }
    }
}

/// Per-run state shared by the command handlers.
struct Run {
    out: OutputDir,
    labels: Vec<String>,
    verbose: bool,
    format: Format,
}

impl Run {
    fn trace(&self, log: &[IterationLog]) {
        if !self.verbose {
            return;
        }
        for it in log {
            eprintln!(
                "iter {:3}  pobj {:+.10e}  dobj {:+.10e}  gap {:.3e}  pres {:.3e}  dres {:.3e}  sigma {:.3}  ap {:.3}  ad {:.3}",
                it.iter,
                it.primal_objective,
                it.dual_objective,
                it.gap,
                it.primal_residual,
                it.dual_residual,
                it.sigma,
                it.step_primal,
                it.step_dual
            );
        }
    }

    fn trace_result(&self, r: &CalibrationResult) {
        if let Some(s) = &r.solution {
            self.trace(&s.trace);
        }
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let verbose = cli.verbose || std::env::var("LMMSDP_VERBOSE").is_ok_and(|v| !v.is_empty() && v != "0");
    match cli.command {
        Command::Replay(args) => match replay(&args, verbose) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        cmd => match execute(cmd, argv, verbose) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
    }
}

/// Runs a (non-replay) command, writes its manifest and returns the exit
/// code. Errors before any output is produced are returned as `Err`.
pub fn execute(mut cmd: Command, argv: Vec<String>, verbose: bool) -> AppResult<i32> {
    cmd.absolutize()?;
    let common = cmd.common().expect("replay is handled separately").clone();
    let options = common.options(verbose)?;
    let inputs = input_digests(&cmd.inputs())?;
    let mut run = Run { out: OutputDir::create(&common.out_dir)?, labels: Vec::new(), verbose, format: common.format };
    let result = match &cmd {
        Command::Calibrate(a) => cmd_calibrate(&mut run, a, &options),
        Command::Bounds(a) => cmd_bounds(&mut run, a, &options),
        Command::Sensitivity(a) => cmd_sensitivity(&mut run, a, &options),
        Command::Hedge(a) => cmd_hedge(&mut run, a, &options),
        Command::GammaHedge(a) => cmd_gamma(&mut run, a, &options),
        Command::Simulate(a) => cmd_simulate(&mut run, a),
        Command::Replay(_) => unreachable!("replay is handled separately"),
    };
    let exit_code = match result {
        Ok(()) => 0,
        Err(AppError::Core(Error::InfeasibleCalibration { certificate })) => {
            write_certificate(&mut run, &certificate)?;
            eprintln!("error: calibration is infeasible; Farkas certificate written to {}", run.out.dir.join("certificate.json").display());
            2
        }
        Err(e) => return Err(e),
    };
    let mut stored = cmd.clone();
    if let Some(c) = stored.common_mut() {
        c.out_dir = PathBuf::from(".");
    }
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: serde_json::to_value(&stored).expect("command serializes"),
        argv: argv.into_iter().skip(1).collect(),
        inputs,
        options: ManifestOptions { tol_gap: options.tol_gap, tol_feas: options.tol_feas, max_iter: options.max_iter },
        seed: cmd.seed(),
        exit_code,
        outputs: run.out.written.clone(),
    };
    let path = run.out.dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    std::fs::write(&path, text).map_err(|e| AppError::io(&path, e))?;
    Ok(exit_code)
}

#[derive(Serialize)]
struct CertificateReport<'a> {
    status: &'static str,
    /// `y` with `Σ y_k A_k ⪯ 0` and `bᵀy > 0`: a combination of quotes no
    /// covariance can match.
    certificate: Vec<CertificateEntry<'a>>,
}

#[derive(Serialize)]
struct CertificateEntry<'a> {
    instrument: &'a str,
    y: f64,
}

fn write_certificate(run: &mut Run, certificate: &[f64]) -> AppResult<()> {
    let labels: Vec<String> = if run.labels.len() == certificate.len() {
        run.labels.clone()
    } else {
        (0..certificate.len()).map(|k| format!("row {}", k + 1)).collect()
    };
    let report = CertificateReport {
        status: "infeasible",
        certificate: labels.iter().zip(certificate).map(|(l, y)| CertificateEntry { instrument: l, y: *y + 0.0 }).collect(),
    };
    run.out.write_json("certificate.json", &report)?;
    Ok(())
}

/// Re-runs a manifest into a fresh directory and compares output digests.
pub fn replay(args: &ReplayArgs, verbose: bool) -> AppResult<i32> {
    let manifest = read_manifest(&args.manifest)?;
    if manifest.version != env!("CARGO_PKG_VERSION") {
        eprintln!("warning: manifest was written by version {}, this is {}", manifest.version, env!("CARGO_PKG_VERSION"));
    }
    for input in &manifest.inputs {
        let now = crate::io::file_digest(Path::new(&input.path))?;
        if now != input.sha256 {
            return Err(AppError::Validation(format!("input {} changed since the recorded run", input.path)));
        }
    }
    let mut cmd: Command = serde_json::from_value(manifest.command.clone())
        .map_err(|e| AppError::parse(&args.manifest, format!("unreadable command: {e}")))?;
    let out_dir = match &args.out_dir {
        Some(d) => d.clone(),
        None => args.manifest.parent().unwrap_or(Path::new(".")).join("replay"),
    };
    match cmd.common_mut() {
        Some(c) => c.out_dir = out_dir.clone(),
        None => return Err(AppError::Validation("a replay manifest cannot be replayed".into())),
    }
    let mut argv = vec!["lmmsdp".to_string()];
    argv.extend(manifest.argv.iter().cloned());
    let code = execute(cmd, argv, verbose)?;
    let fresh = read_manifest(&out_dir.join(MANIFEST_NAME))?;
    let mut mismatches: Vec<String> = Vec::new();
    if code != manifest.exit_code {
        mismatches.push(format!("exit code {code} (recorded {})", manifest.exit_code));
    }
    let lookup = |list: &[FileDigest], p: &str| list.iter().find(|f| f.path == p).map(|f| f.sha256.clone());
    for f in &manifest.outputs {
        match lookup(&fresh.outputs, &f.path) {
            Some(d) if d == f.sha256 => {}
            Some(_) => mismatches.push(format!("{} differs", f.path)),
            None => mismatches.push(format!("{} was not produced", f.path)),
        }
    }
    for f in &fresh.outputs {
        if lookup(&manifest.outputs, &f.path).is_none() {
            mismatches.push(format!("{} is new", f.path));
        }
    }
    if mismatches.is_empty() {
        println!("replay identical: {} outputs match", manifest.outputs.len());
        Ok(0)
    } else {
        for m in &mismatches {
            eprintln!("replay mismatch: {m}");
        }
        Ok(1)
    }
}

fn form_of(f: FormArg) -> VariableForm {
    match f {
        FormArg::Stationary => VariableForm::Stationary,
        FormArg::Nonstationary => VariableForm::NonStationary,
    }
}

fn mode_of(m: ModeArg) -> Mode {
    match m {
        ModeArg::Equality => Mode::Equality,
        ModeArg::Bidask => Mode::BidAsk,
    }
}

fn load_market(run: &mut Run, args: &MarketArgs) -> AppResult<(ResolvedMarket, Vec<SwaptionInstrument>)> {
    let market = parse_market_data(&args.data)?;
    if market.market.quotes.is_empty() {
        return Err(AppError::Validation("the market file has no quotes".into()));
    }
    let insts = market.market.instruments()?;
    run.labels = market.labels.clone();
    Ok((market, insts))
}

/// The target swaption on the market's curve; its own vol is the market
/// quote when there is one.
fn target_instrument(market: &ResolvedMarket, target: &str) -> AppResult<SwaptionInstrument> {
    let years = parse_target(target)?;
    let (s, l) = target_indices(years, market.market.curve.delta())?;
    if s == 0 || l == 0 || s + l - 1 > market.market.horizon {
        return Err(AppError::Validation(format!("target {target} is outside the calibration horizon")));
    }
    let vol = market.find(s, l).map(|k| market.market.quotes[k].vol).unwrap_or(0.1);
    Ok(SwaptionInstrument::new(&market.market.curve, SwaptionQuote::new(s, l, vol))?)
}

fn label_of(market: &ResolvedMarket, inst: &SwaptionInstrument) -> String {
    let d = market.market.curve.delta();
    format!("{}x{}", format_years(inst.quote.expiry as f64 * d), format_years(inst.quote.tenor() as f64 * d))
}

fn build_spec(
    market: &ResolvedMarket,
    insts: &[SwaptionInstrument],
    margs: &MarketArgs,
    oargs: &ObjectiveArgs,
    options: &SolverOptions,
) -> AppResult<CalibrationSpec> {
    let form = form_of(margs.form);
    let horizon = market.market.horizon;
    let problem = CalibrationProblem::from_instruments(insts, form, horizon)?;
    let target_omega = || -> AppResult<_> {
        let t = oargs.target.as_deref().ok_or_else(|| AppError::Usage("this objective needs --target".into()))?;
        Ok(instrument_omega(&target_instrument(market, t)?, form, horizon)?)
    };
    let objective = match oargs.objective {
        ObjectiveArg::MinTrace => Objective::MinTrace(oargs.prior.as_deref().map(read_block_matrix).transpose()?),
        ObjectiveArg::MinNorm => Objective::MinSpectralNorm,
        ObjectiveArg::MaxLinf => Objective::MaxLinfMargin,
        ObjectiveArg::MaxL1 => Objective::MaxL1Margin,
        ObjectiveArg::MaxConfidence => {
            let path = oargs
                .confidence_cov
                .as_deref()
                .ok_or_else(|| AppError::Usage("max-confidence needs --confidence-cov".into()))?;
            Objective::MaxConfidence(read_matrix_csv(path)?)
        }
        ObjectiveArg::MaximizeTarget => Objective::MaximizeTarget(target_omega()?),
        ObjectiveArg::MinimizeTarget => Objective::MinimizeTarget(target_omega()?),
        ObjectiveArg::Parametric => Objective::ParametricTwoFactor { seed: oargs.seed },
    };
    let mut spec = CalibrationSpec::new(problem, objective, mode_of(margs.mode));
    spec.options = *options;
    Ok(spec)
}

#[derive(Serialize)]
struct InstrumentRow<'a> {
    instrument: &'a str,
    /// Quoted cumulative variance `σ²T`.
    target: f64,
    /// Model cumulative variance `Tr(Ω_k X)`.
    model: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    bid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ask: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dual: Option<f64>,
}

#[derive(Serialize)]
struct CalibrationReport<'a> {
    objective: ObjectiveArg,
    mode: ModeArg,
    form: FormArg,
    objective_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    margins: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit_residual: Option<f64>,
    min_eigenvalue: f64,
    iterations: Option<usize>,
    instruments: Vec<InstrumentRow<'a>>,
}

fn calibration_report<'a>(
    labels: &'a [String],
    spec: &'a CalibrationSpec,
    margs: &MarketArgs,
    oargs: &ObjectiveArgs,
    res: &'a CalibrationResult,
) -> CalibrationReport<'a> {
    let p = &spec.problem;
    let variances = p.variances(&res.x);
    let instruments = labels
        .iter()
        .enumerate()
        .map(|(k, l)| InstrumentRow {
            instrument: l,
            target: p.targets[k],
            model: variances[k],
            bid: p.bids.as_ref().map(|b| b[k]),
            ask: p.asks.as_ref().map(|a| a[k]),
            dual: res.y.get(k).copied(),
        })
        .collect();
    CalibrationReport {
        objective: oargs.objective,
        mode: margs.mode,
        form: margs.form,
        objective_value: res.objective_value,
        gap: res.has_duals().then_some(res.gap),
        margin: res.margin,
        margins: res.margins.as_deref(),
        confidence: res.confidence,
        fit_residual: res.fit_residual,
        min_eigenvalue: res.x.min_eigenvalue(),
        iterations: res.solution.as_ref().map(|s| s.iterations),
        instruments,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn cmd_calibrate(run: &mut Run, a: &CalibrateArgs, options: &SolverOptions) -> AppResult<()> {
    let (market, insts) = load_market(run, &a.market)?;
    let spec = build_spec(&market, &insts, &a.market, &a.objective, options)?;
    let res = calibrate(&spec)?;
    run.trace_result(&res);
    run.out.write_blocks("x", &res.x)?;
    let report = calibration_report(&market.labels, &spec, &a.market, &a.objective, &res);
    match run.format {
        Format::Json => {
            run.out.write_json("duals.json", &report)?;
        }
        Format::Csv => {
            run.out.write_json("duals.json", &report)?;
            let mut csv = String::from("instrument,target,model,dual\n");
            for r in &report.instruments {
                csv.push_str(&format!("{},{},{},{}\n", r.instrument, fmt_f64(r.target), fmt_f64(r.model), opt(r.dual)));
            }
            run.out.write("calibration.csv", &csv)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct BoundSide<'a> {
    direction: &'static str,
    cumulative_variance: f64,
    price: f64,
    vol: f64,
    residual_gap: f64,
    duals: Vec<(&'a str, f64)>,
}

#[derive(Serialize)]
struct BoundsReport<'a> {
    target: String,
    market_vol: Option<f64>,
    lower: BoundSide<'a>,
    upper: BoundSide<'a>,
}

fn bound_setup(insts: Vec<SwaptionInstrument>, market: &ResolvedMarket, margs: &MarketArgs, options: &SolverOptions) -> AppResult<BoundSetup> {
    let mut setup = BoundSetup::new(insts, form_of(margs.form), market.market.horizon, mode_of(margs.mode))?;
    setup.options = *options;
    Ok(setup)
}

fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::Upper => "upper",
        Direction::Lower => "lower",
    }
}

fn cmd_bounds(run: &mut Run, a: &BoundsArgs, options: &SolverOptions) -> AppResult<()> {
    let (market, insts) = load_market(run, &a.market)?;
    let setup = bound_setup(insts, &market, &a.market, options)?;
    let d = market.market.curve.delta();
    if a.sweep {
        // An inconsistent calibration set fails every cell; report it once.
        calibrate(&CalibrationSpec { options: *options, ..CalibrationSpec::new(setup.problem.clone(), Objective::MinTrace(None), setup.mode) })?;
        let quoted: Vec<(usize, usize, f64)> = market.market.quotes.iter().map(|q| (q.expiry, q.tenor(), q.vol)).collect();
        let rows = run_bounds_sweep(&market.market.curve, &setup, &quoted);
        let mut csv = String::from("expiry,tenor,lower_vol,upper_vol,market_vol,calibrated,error\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.expiry as f64 * d,
                r.tenor as f64 * d,
                opt(r.lower_vol),
                opt(r.upper_vol),
                opt(r.market_vol),
                r.calibrated,
                r.error.as_deref().unwrap_or("").replace(',', ";")
            ));
        }
        run.out.write("bounds_sweep.csv", &csv)?;
        if run.format == Format::Json {
            run.out.write_json("bounds_sweep.json", &rows)?;
        }
        let failed = rows.iter().filter(|r| r.error.is_some()).count();
        if failed > 0 {
            eprintln!("warning: {failed} of {} sweep cells failed; see the error column", rows.len());
        }
        return Ok(());
    }
    let target_str = a.target.as_deref().expect("clap enforces --target without --sweep");
    let target = target_instrument(&market, target_str)?;
    let side = |dir: Direction| -> AppResult<BoundSide> {
        let r = price_bounds(&target, &setup, dir)?;
        Ok(BoundSide {
            direction: direction_name(dir),
            cumulative_variance: r.bound_cumvar,
            price: r.bound_price,
            vol: r.bound_vol,
            residual_gap: r.residual_gap,
            duals: market.labels.iter().map(String::as_str).zip(r.y.iter().copied()).collect(),
        })
    };
    let (lower, upper) = (side(Direction::Lower)?, side(Direction::Upper)?);
    let report = BoundsReport {
        target: label_of(&market, &target),
        market_vol: market.find(target.quote.expiry, target.quote.tenor()).map(|k| market.market.quotes[k].vol),
        lower,
        upper,
    };
    match run.format {
        Format::Json => {
            run.out.write_json("bounds.json", &report)?;
        }
        Format::Csv => {
            let mut csv = String::from("direction,cumulative_variance,price,vol,residual_gap\n");
            for s in [&report.lower, &report.upper] {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    s.direction,
                    fmt_f64(s.cumulative_variance),
                    fmt_f64(s.price),
                    fmt_f64(s.vol),
                    fmt_f64(s.residual_gap)
                ));
            }
            run.out.write("bounds.csv", &csv)?;
        }
    }
    Ok(())
}

/// ±1 vol point on each instrument, in cumulative variance.
fn vega_point_scenarios(market: &ResolvedMarket, insts: &[SwaptionInstrument]) -> AppResult<Vec<PerturbationScenario>> {
    let m = insts.len();
    let mut out = Vec::with_capacity(2 * m);
    for (k, inst) in insts.iter().enumerate() {
        let (v, t) = (inst.quote.vol, inst.expiry_time());
        for (sign, tag) in [(1.0, "+1"), (-1.0, "-1")] {
            let bumped = (v + sign * 0.01).max(0.0);
            let mut u = vec![0.0; m];
            u[k] = (bumped * bumped - v * v) * t;
            out.push(PerturbationScenario::new(format!("{} {tag}vol", market.labels[k]), u)?);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct ScenarioRow<'a> {
    name: &'a str,
    objective_change: f64,
    positivity_ratio: f64,
    feasible_step: bool,
    min_eigenvalue: f64,
    delta_x_norm: f64,
}

#[derive(Serialize)]
struct SensitivityOut<'a> {
    objective_value: f64,
    gradient: Vec<(&'a str, f64)>,
    scenarios: Vec<ScenarioRow<'a>>,
}

fn cmd_sensitivity(run: &mut Run, a: &SensitivityArgs, options: &SolverOptions) -> AppResult<()> {
    let (market, insts) = load_market(run, &a.market)?;
    let spec = build_spec(&market, &insts, &a.market, &a.objective, options)?;
    let scenarios = match &a.scenarios {
        Some(p) => read_scenarios(p, insts.len())?,
        None => vega_point_scenarios(&market, &insts)?,
    };
    let res = calibrate(&spec)?;
    run.trace_result(&res);
    let reports = scenario_sweep(&res, &scenarios)?;
    let gradient = reports.first().map(|r| r.objective_gradient.clone()).unwrap_or_else(|| res.y.clone());
    let out = SensitivityOut {
        objective_value: res.objective_value,
        gradient: market.labels.iter().map(String::as_str).zip(gradient).collect(),
        scenarios: reports
            .iter()
            .map(|r| ScenarioRow {
                name: &r.name,
                objective_change: r.objective_change,
                positivity_ratio: r.positivity_ratio,
                feasible_step: r.feasible_step,
                min_eigenvalue: r.min_eigenvalue,
                delta_x_norm: r.delta_x.frob_norm(),
            })
            .collect(),
    };
    match run.format {
        Format::Json => {
            run.out.write_json("sensitivity.json", &out)?;
        }
        Format::Csv => {
            let mut csv = String::from("scenario,objective_change,positivity_ratio,feasible_step,min_eigenvalue,delta_x_norm\n");
            for s in &out.scenarios {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    s.name.replace(',', ";"),
                    fmt_f64(s.objective_change),
                    fmt_f64(s.positivity_ratio),
                    s.feasible_step,
                    fmt_f64(s.min_eigenvalue),
                    fmt_f64(s.delta_x_norm)
                ));
            }
            run.out.write("sensitivity.csv", &csv)?;
        }
    }
    if a.dump_delta {
        for (i, r) in reports.iter().enumerate() {
            run.out.write_blocks(&format!("delta_x_{}", i + 1), &r.delta_x)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct HedgeLeg<'a> {
    instrument: &'a str,
    notional: f64,
    price: f64,
}

#[derive(Serialize)]
struct HedgeOut<'a> {
    target: String,
    direction: &'static str,
    notional: f64,
    bound_vol: f64,
    bound_price: f64,
    hedge_cost: f64,
    residual_gap: f64,
    portfolio: Vec<HedgeLeg<'a>>,
}

fn cmd_hedge(run: &mut Run, a: &HedgeArgs, options: &SolverOptions) -> AppResult<()> {
    if !a.notional.is_finite() {
        return Err(AppError::Usage("--notional must be finite".into()));
    }
    let (market, insts) = load_market(run, &a.market)?;
    let target = target_instrument(&market, &a.target)?;
    let setup = bound_setup(insts, &market, &a.market, options)?;
    let dirs: &[Direction] = match a.direction {
        DirectionArg::Upper => &[Direction::Upper],
        DirectionArg::Lower => &[Direction::Lower],
        DirectionArg::Both => &[Direction::Lower, Direction::Upper],
    };
    let mut outs = Vec::new();
    for &dir in dirs {
        let r = price_bounds(&target, &setup, dir)?;
        let lambda = static_hedge_portfolio(&r, &target, &setup.instruments, a.notional)?;
        let prices: Vec<f64> = setup.instruments.iter().map(|i| i.price(i.target())).collect::<Result<_, _>>()?;
        outs.push(HedgeOut {
            target: label_of(&market, &target),
            direction: direction_name(dir),
            notional: a.notional,
            bound_vol: r.bound_vol,
            bound_price: r.bound_price * a.notional,
            hedge_cost: lambda.iter().zip(&prices).map(|(l, p)| l * p).sum(),
            residual_gap: r.residual_gap,
            portfolio: market
                .labels
                .iter()
                .zip(lambda.iter().zip(&prices))
                .map(|(l, (n, p))| HedgeLeg { instrument: l, notional: *n, price: *p })
                .collect(),
        });
    }
    match run.format {
        Format::Json => {
            run.out.write_json("hedge.json", &outs)?;
        }
        Format::Csv => {
            let mut csv = String::from("direction,instrument,notional,price\n");
            for o in &outs {
                for leg in &o.portfolio {
                    csv.push_str(&format!("{},{},{},{}\n", o.direction, leg.instrument, fmt_f64(leg.notional), fmt_f64(leg.price)));
                }
            }
            run.out.write("hedge.csv", &csv)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct GammaOut {
    t: f64,
    y: Vec<f64>,
    gap: f64,
    exposure_unhedged: f64,
    exposure_hedged: f64,
}

fn cmd_gamma(run: &mut Run, a: &GammaArgs, options: &SolverOptions) -> AppResult<()> {
    let spec = GammaHedgeSpec::new(read_matrix_csv(&a.gamma)?, read_vector_csv(&a.gammas)?, read_matrix_csv(&a.sigma)?)?;
    let h = gamma_hedge(&spec, options)?;
    let out = GammaOut {
        t: h.t,
        exposure_unhedged: spec.exposure(&vec![0.0; spec.dim()]),
        exposure_hedged: spec.exposure(&h.y),
        y: h.y,
        gap: h.gap,
    };
    match run.format {
        Format::Json => {
            run.out.write_json("gamma_hedge.json", &out)?;
        }
        Format::Csv => {
            let mut csv = String::from("asset,y\n");
            for (i, y) in out.y.iter().enumerate() {
                csv.push_str(&format!("{},{}\n", i + 1, fmt_f64(*y)));
            }
            csv.push_str(&format!("t,{}\n", fmt_f64(out.t)));
            run.out.write("gamma_hedge.csv", &csv)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct PnLSummary<'a> {
    paths: usize,
    seed: u64,
    premium: f64,
    methods: &'a [crate::simulation::MethodStats],
}

fn cmd_simulate(run: &mut Run, a: &SimulateArgs) -> AppResult<()> {
    let mut exp = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| AppError::io(p, e))?;
            serde_json::from_str::<HedgingExperiment>(&text).map_err(|e| AppError::parse(p, format!("line {}: {e}", e.line())))?
        }
        None => HedgingExperiment::paper(10_000, 0),
    };
    if let Some(n) = a.paths {
        exp.paths = n;
    }
    if let Some(s) = a.seed {
        exp.seed = s;
    }
    if a.threads.is_some() {
        exp.threads = a.threads;
    }
    let report = run_hedging_experiment(&exp)?;
    let summary = PnLSummary { paths: exp.paths, seed: exp.seed, premium: report.premium, methods: &report.methods };
    match run.format {
        Format::Json => {
            run.out.write_json("pnl_report.json", &summary)?;
        }
        Format::Csv => {
            let mut csv = String::from("method,mean_pnl,stdev_pnl,fraction_positive,mean_cov_change,fallbacks,flagged_paths\n");
            for m in &report.methods {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    m.method.name(),
                    fmt_f64(m.mean_pnl),
                    fmt_f64(m.stdev_pnl),
                    fmt_f64(m.fraction_positive),
                    fmt_f64(m.mean_cov_change),
                    m.fallbacks,
                    m.flagged_paths
                ));
            }
            run.out.write("pnl_report.csv", &csv)?;
        }
    }
    let names: Vec<&str> = exp.methods.iter().map(|m: &Method| m.name()).collect();
    let mut paths = format!("path,{}\n", names.join(","));
    for (p, row) in report.per_path.iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        paths.push_str(&format!("{p},{}\n", vals.join(",")));
    }
    run.out.write("pnl_paths.csv", &paths)?;
    let mut hist = format!("lower,upper,{}\n", names.join(","));
    for (lo, hi, counts) in report.histogram(a.bins) {
        let c: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
        hist.push_str(&format!("{},{},{}\n", fmt_f64(lo), fmt_f64(hi), c.join(",")));
    }
    run.out.write("pnl_histogram.csv", &hist)?;
    Ok(())
}
