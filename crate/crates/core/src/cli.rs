//! Command-line front end. Every command reads its inputs, runs the library
//! and writes CSV or JSON files. Each output carries the hash of a
//! [`RunManifest`] describing the run, and `--out` directories also get the
//! manifest itself so the run can be replayed.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::{calibrate, ObjectiveSpace, OptimizerConfig, ParamBounds, QuoteSet};
use crate::charfn::CFContext;
use crate::dependence::{copula_from_cf, dependence_measures, implied_correlation, CopulaSpec, PriceMarginals};
use crate::error::{Error, Result};
use crate::model::{CsoContract, FuturesCurve, ModelParams, NumericsConfig, OptionKind, VanillaContract};
use crate::montecarlo::{instantaneous_correlation_study, mc_price_cso, mc_price_vanilla, McSettings};
use crate::pricers::{price_cso_ladder, price_vanilla_fourier, CsoMethod, PriceResult};

/// Strike shifts around the at-the-money spread used by `implied-correlation`.
pub const DEFAULT_SHIFTS: &str = "-10,-5,-2.5,0,2.5,5,10";

/// Flags whose values name input files.
const PATH_FLAGS: [&str; 7] = ["--model", "--curve", "--quotes", "--config", "--bounds", "--optimizer", "--observed"];

#[derive(Debug, Parser)]
#[command(name = "commodity-sv", version, about = "Stochastic volatility futures curve: pricing, dependence and calibration")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Numerics configuration (JSON); defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the Monte Carlo and optimizer seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory. Without it results go to standard output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Monte Carlo path count.
    #[arg(long, global = true)]
    pub paths: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Call,
    Put,
}

impl From<Kind> for OptionKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Call => OptionKind::Call,
            Kind::Put => OptionKind::Put,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CsoMethodArg {
    Cf,
    Hz,
    Si,
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    Price,
    Vol,
}

#[derive(Debug, Clone, Args)]
pub struct Strikes {
    #[arg(long, allow_hyphen_values = true)]
    pub strike: Option<f64>,
    /// Inclusive ladder `start:end:step`; negative values are allowed.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "strike")]
    pub strikes: Option<String>,
}

impl Strikes {
    fn resolve(&self, default: f64) -> Result<Vec<f64>> {
        match (&self.strikes, self.strike) {
            (Some(s), _) => parse_strikes(s),
            (None, Some(k)) => Ok(vec![k]),
            (None, None) => Ok(vec![default]),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prices European options on one futures contract.
    PriceVanilla {
        /// Model JSON, or `sv2f` / `cs2f` for the built-in reference models.
        #[arg(long)]
        model: String,
        /// Curve CSV (`maturity,price`), or `flat:<price>`.
        #[arg(long)]
        curve: String,
        #[arg(long)]
        expiry: f64,
        /// Futures maturity; defaults to the expiry.
        #[arg(long)]
        maturity: Option<f64>,
        #[command(flatten)]
        strikes: Strikes,
        #[arg(long, value_enum, default_value = "call")]
        kind: Kind,
        #[arg(long, default_value_t = 0.0)]
        rate: f64,
        /// Adds Monte Carlo prices and standard errors.
        #[arg(long)]
        validate_mc: bool,
    },
    /// Prices calendar spread options on `F(T, T1) - F(T, T2)`.
    PriceCso {
        #[arg(long)]
        model: String,
        #[arg(long)]
        curve: String,
        #[arg(long)]
        expiry: f64,
        #[arg(long)]
        t1: f64,
        #[arg(long)]
        t2: f64,
        #[command(flatten)]
        strikes: Strikes,
        #[arg(long, value_enum, default_value = "call")]
        kind: Kind,
        #[arg(long, default_value_t = 0.0)]
        rate: f64,
        #[arg(long, value_enum, default_value = "cf")]
        method: CsoMethodArg,
        #[arg(long)]
        validate_mc: bool,
    },
    /// Copula grid and dependence measures of two log returns, or a term
    /// structure of the measures over a ladder of contracts.
    Dependence {
        #[arg(long)]
        model: String,
        /// Single design point, or the fixed expiry of a gap ladder.
        #[arg(long)]
        expiry: Option<f64>,
        #[arg(long)]
        t1: Option<f64>,
        #[arg(long)]
        t2: Option<f64>,
        /// Gap ladder: `T` and `T1` fixed, `T2 = T1 + gap`.
        #[arg(long, value_delimiter = ',')]
        gaps: Option<Vec<f64>>,
        /// Expiry ladder: `T = T1` varies, `T2 = T1 + gap`.
        #[arg(long, value_delimiter = ',', requires = "gap")]
        expiries: Option<Vec<f64>>,
        #[arg(long)]
        gap: Option<f64>,
        /// Interior grid points per axis.
        #[arg(long, default_value_t = 101)]
        grid: usize,
        #[arg(long, default_value_t = 0.005)]
        v_min: f64,
        /// Skips the copula density.
        #[arg(long)]
        no_density: bool,
    },
    /// Fits model parameters to option quotes.
    Calibrate {
        /// Initial guess; also fixes the number of factors.
        #[arg(long)]
        model: String,
        #[arg(long)]
        curve: String,
        /// Quote CSV.
        #[arg(long)]
        quotes: String,
        #[arg(long, default_value_t = 0.0)]
        rate: f64,
        /// Parameter box (JSON); defaults to a wide box.
        #[arg(long)]
        bounds: Option<String>,
        /// Optimizer settings (JSON).
        #[arg(long)]
        optimizer: Option<String>,
        #[arg(long)]
        starts: Option<usize>,
        #[arg(long)]
        max_evals: Option<usize>,
        #[arg(long, value_enum)]
        space: Option<SpaceArg>,
    },
    /// Gaussian-copula correlation implied by spread option prices.
    ImpliedCorrelation {
        #[arg(long)]
        model: String,
        #[arg(long)]
        curve: String,
        #[arg(long)]
        expiry: Option<f64>,
        #[arg(long)]
        t1: Option<f64>,
        #[arg(long)]
        t2: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        gaps: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', requires = "gap")]
        expiries: Option<Vec<f64>>,
        #[arg(long)]
        gap: Option<f64>,
        /// Strike shifts around the at-the-money spread `F1 - F2`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = DEFAULT_SHIFTS)]
        shifts: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        rate: f64,
        /// Pricer for the model prices that are inverted.
        #[arg(long, value_enum, default_value = "cf")]
        method: CsoMethodArg,
        /// Observed call prices (`T,T1,T2,K,price`) instead of model prices.
        #[arg(long)]
        observed: Option<String>,
    },
    /// Monte Carlo distribution of the instantaneous correlation of two
    /// futures returns.
    Correlation {
        #[arg(long)]
        model: String,
        /// Time at which the variance factors are sampled.
        #[arg(long)]
        t: f64,
        #[arg(long)]
        t1: f64,
        #[arg(long)]
        t2: f64,
        #[arg(long, default_value_t = crate::montecarlo::HISTOGRAM_BINS)]
        bins: usize,
    },
    /// Re-runs the command recorded in a manifest, after checking that its
    /// inputs are unchanged.
    Replay {
        manifest: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PriceVanilla { .. } => "price-vanilla",
            Command::PriceCso { .. } => "price-cso",
            Command::Dependence { .. } => "dependence",
            Command::Calibrate { .. } => "calibrate",
            Command::ImpliedCorrelation { .. } => "implied-correlation",
            Command::Correlation { .. } => "correlation",
            Command::Replay { .. } => "replay",
        }
    }
}

/// Parses `start:end:step` into an inclusive ladder.
pub fn parse_strikes(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidInput(format!("strike ladder '{s}' is not start:end:step")))?;
    let [a, b, h] = nums[..] else {
        return Err(Error::InvalidInput(format!("strike ladder '{s}' is not start:end:step")));
    };
    if !(h > 0.0) || !(b >= a) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidInput(format!("strike ladder '{s}' needs start <= end and step > 0")));
    }
    let n = ((b - a) / h + 1e-9).floor() as usize + 1;
    if n > 100_000 {
        return Err(Error::InvalidInput(format!("strike ladder '{s}' has {n} strikes")));
    }
    Ok((0..n).map(|i| a + i as f64 * h).collect())
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub hash: String,
}

/// What a run read and how it was configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Command-line arguments without the program name and `--out`.
    pub args: Vec<String>,
    pub inputs: Vec<InputFile>,
    pub config: NumericsConfig,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Hash of the command, argument values, input contents, config and
    /// seed. Output paths do not enter it.
    pub hash: String,
}

impl RunManifest {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Hash of `bytes` framed like a git blob, with SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn strip_out(args: &[String]) -> Vec<String> {
    let mut kept = Vec::with_capacity(args.len());
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
        } else if !a.starts_with("--out=") {
            kept.push(a.clone());
        }
    }
    kept
}

struct Session {
    command: String,
    args: Vec<String>,
    inputs: Vec<InputFile>,
    config: NumericsConfig,
    seed: u64,
    out: Option<PathBuf>,
    hash: Option<String>,
}

impl Session {
    fn read_input(&mut self, path: &str) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::InvalidInput(format!("cannot read '{path}': {e}")))?;
        self.inputs.push(InputFile {
            path: path.to_string(),
            hash: content_hash(&bytes),
        });
        Ok(bytes)
    }

    fn model(&mut self, spec: &str) -> Result<ModelParams> {
        let model = match spec {
            "sv2f" => ModelParams::reference_sv2f(),
            "cs2f" => ModelParams::clewlow_strickland(&[(0.4, 0.1), (0.3, 2.0)]),
            path => {
                let bytes = self.read_input(path)?;
                ModelParams::from_json_reader(&bytes[..]).map_err(|e| in_file(path, e))?
            }
        };
        model.ensure_valid()?;
        Ok(model)
    }

    fn curve(&mut self, spec: &str) -> Result<FuturesCurve> {
        if let Some(p) = spec.strip_prefix("flat:") {
            let price: f64 = p
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad flat curve '{spec}'")))?;
            if !(price > 0.0 && price.is_finite()) {
                return Err(Error::InvalidInput(format!("flat curve price must be positive, got {price}")));
            }
            return Ok(FuturesCurve::flat(price));
        }
        let bytes = self.read_input(spec)?;
        FuturesCurve::from_csv_reader(&bytes[..]).map_err(|e| in_file(spec, e))
    }

    fn json<T: for<'de> Deserialize<'de>>(&mut self, path: &str) -> Result<T> {
        let bytes = self.read_input(path)?;
        serde_json::from_slice(&bytes).map_err(|e| in_file(path, e.into()))
    }

    fn mc(&self) -> McSettings {
        McSettings::from_config(&self.config)
    }

    fn hash(&mut self) -> String {
        if let Some(h) = &self.hash {
            return h.clone();
        }
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        let mut it = self.args.iter().peekable();
        while let Some(a) = it.next() {
            h.update(b"\0");
            h.update(a.as_bytes());
            if PATH_FLAGS.contains(&a.as_str()) {
                if let Some(v) = it.next() {
                    let content = self.inputs.iter().find(|f| &f.path == v).map_or(v.as_str(), |f| f.hash.as_str());
                    h.update(b"\0");
                    h.update(content.as_bytes());
                }
            }
        }
        h.update(serde_json::to_string(&self.config).unwrap_or_default().as_bytes());
        h.update(self.seed.to_le_bytes());
        let hash = hex::encode(h.finalize());
        self.hash = Some(hash.clone());
        hash
    }

    fn manifest(&mut self) -> RunManifest {
        RunManifest {
            hash: self.hash(),
            command: self.command.clone(),
            args: self.args.clone(),
            inputs: self.inputs.clone(),
            config: self.config.clone(),
            seed: self.seed,
            out_dir: self.out.clone(),
        }
    }

    fn emit(&mut self, name: &str, body: &[u8]) -> Result<()> {
        match &self.out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                fs::write(dir.join(name), body)?;
            }
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(body)?;
                out.flush()?;
            }
        }
        Ok(())
    }

    /// Writes a CSV file whose first line is a `#` comment with the hash.
    fn csv(&mut self, name: &str, fill: impl FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<()>) -> Result<()> {
        let mut buf = format!("# manifest {}\n", self.hash()).into_bytes();
        {
            let mut wtr = csv::Writer::from_writer(&mut buf);
            fill(&mut wtr)?;
            wtr.flush()?;
        }
        self.emit(name, &buf)
    }

    /// Writes a JSON object with a `manifest_hash` key added.
    fn json_out(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        if let serde_json::Value::Object(map) = &mut v {
            map.insert("manifest_hash".into(), self.hash().into());
        }
        let mut buf = serde_json::to_vec_pretty(&v)?;
        buf.push(b'\n');
        self.emit(name, &buf)
    }

    fn finish(&mut self) -> Result<()> {
        if self.out.is_some() {
            let m = self.manifest();
            let mut buf = serde_json::to_vec_pretty(&m)?;
            buf.push(b'\n');
            self.emit("manifest.json", &buf)?;
        }
        Ok(())
    }
}

fn in_file(path: &str, e: Error) -> Error {
    match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{path}: {msg}"),
        },
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Entry points

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors are reported on standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let raw: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, &raw) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command. `raw` is the argument list it was parsed from,
/// without the program name; it is recorded in the manifest.
pub fn execute(cli: Cli, raw: &[String]) -> Result<()> {
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest, cli.common.out.clone());
    }
    let mut config = match &cli.common.config {
        Some(p) => NumericsConfig::from_json_file(p)?,
        None => NumericsConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        config.mc_seed = seed;
    }
    if let Some(paths) = cli.common.paths {
        config.mc_paths = paths;
    }
    let mut session = Session {
        command: cli.command.name().to_string(),
        args: strip_out(raw),
        inputs: Vec::new(),
        seed: config.mc_seed,
        config,
        out: cli.common.out.clone(),
        hash: None,
    };
    if let Some(p) = &cli.common.config {
        let p = p.to_string_lossy().into_owned();
        session.read_input(&p)?;
    }
    match cli.command {
        Command::PriceVanilla {
            model,
            curve,
            expiry,
            maturity,
            strikes,
            kind,
            rate,
            validate_mc,
        } => {
            let model = session.model(&model)?;
            let curve = session.curve(&curve)?;
            let tm = maturity.unwrap_or(expiry);
            let ks = strikes.resolve(curve.price(tm))?;
            cmd_price_vanilla(&mut session, &model, &curve, expiry, tm, &ks, kind.into(), rate, validate_mc)?
        }
        Command::PriceCso {
            model,
            curve,
            expiry,
            t1,
            t2,
            strikes,
            kind,
            rate,
            method,
            validate_mc,
        } => {
            let model = session.model(&model)?;
            let curve = session.curve(&curve)?;
            let ks = strikes.resolve(curve.price(t1) - curve.price(t2))?;
            let cso = CsoContract {
                expiry,
                t1,
                t2,
                strike: ks[0],
                kind: kind.into(),
                rate,
            };
            cmd_price_cso(&mut session, &model, &curve, &cso, &ks, method, validate_mc)?
        }
        Command::Dependence {
            model,
            expiry,
            t1,
            t2,
            gaps,
            expiries,
            gap,
            grid,
            v_min,
            no_density,
        } => {
            let model = session.model(&model)?;
            let spec = CopulaSpec {
                n: grid,
                v_min,
                density: !no_density,
                ..CopulaSpec::default()
            };
            let points = design_points(expiry, t1, t2, gaps, expiries, gap)?;
            cmd_dependence(&mut session, &model, &points, &spec)?
        }
        Command::Calibrate {
            model,
            curve,
            quotes,
            rate,
            bounds,
            optimizer,
            starts,
            max_evals,
            space,
        } => {
            let model = session.model(&model)?;
            let curve = session.curve(&curve)?;
            let bytes = session.read_input(&quotes)?;
            let quotes = QuoteSet::from_csv_reader(&bytes[..], rate, curve).map_err(|e| in_file(&quotes, e))?;
            let bounds = match bounds {
                Some(p) => session.json::<ParamBounds>(&p)?,
                None => ParamBounds::default_for(&model),
            };
            let mut opt = match optimizer {
                Some(p) => session.json::<OptimizerConfig>(&p)?,
                None => OptimizerConfig::default(),
            };
            if let Some(s) = cli.common.seed {
                opt.seed = s;
            }
            if let Some(s) = starts {
                opt.starts = s;
            }
            if let Some(m) = max_evals {
                opt.max_evals = m;
            }
            if let Some(s) = space {
                opt.space = match s {
                    SpaceArg::Price => ObjectiveSpace::Price,
                    SpaceArg::Vol => ObjectiveSpace::Vol,
                };
            }
            session.seed = opt.seed;
            let result = calibrate(&model, &quotes, &bounds, &opt, &session.config)?;
            session.json_out("calibration.json", &result)?;
        }
        Command::ImpliedCorrelation {
            model,
            curve,
            expiry,
            t1,
            t2,
            gaps,
            expiries,
            gap,
            shifts,
            rate,
            method,
            observed,
        } => {
            let model = session.model(&model)?;
            let curve = session.curve(&curve)?;
            let targets = match observed {
                Some(p) => {
                    let bytes = session.read_input(&p)?;
                    read_observed(&bytes).map_err(|e| in_file(&p, e))?
                }
                None => {
                    let points = design_points(expiry, t1, t2, gaps, expiries, gap)?;
                    model_targets(&session, &model, &curve, &points, &shifts, rate, method)?
                }
            };
            cmd_implied_correlation(&mut session, &model, &curve, &targets, rate)?
        }
        Command::Correlation { model, t, t1, t2, bins } => {
            let model = session.model(&model)?;
            cmd_correlation(&mut session, &model, t, t1, t2, bins)?
        }
        Command::Replay { .. } => unreachable!("handled above"),
    }
    session.finish()
}

fn replay(path: &Path, out: Option<PathBuf>) -> Result<()> {
    let m = RunManifest::from_json_file(path)?;
    for f in &m.inputs {
        let bytes = fs::read(&f.path).map_err(|e| Error::InvalidInput(format!("cannot read '{}': {e}", f.path)))?;
        if content_hash(&bytes) != f.hash {
            return Err(Error::InvalidInput(format!("input '{}' changed since the recorded run", f.path)));
        }
    }
    let mut args = vec!["commodity-sv".to_string()];
    args.extend(m.args.iter().cloned());
    if let Some(dir) = &out {
        args.push("--out".into());
        args.push(dir.to_string_lossy().into_owned());
    }
    let cli = Cli::try_parse_from(&args).map_err(|e| Error::InvalidInput(format!("manifest arguments: {e}")))?;
    if matches!(cli.command, Command::Replay { .. }) {
        return Err(Error::InvalidInput("a manifest cannot replay another replay".into()));
    }
    execute(cli, &args[1..])
}

/// `(T, T1, T2)` points from a single point or one of the two ladders.
fn design_points(
    expiry: Option<f64>,
    t1: Option<f64>,
    t2: Option<f64>,
    gaps: Option<Vec<f64>>,
    expiries: Option<Vec<f64>>,
    gap: Option<f64>,
) -> Result<Vec<(f64, f64, f64)>> {
    match (gaps, expiries) {
        (Some(_), Some(_)) => Err(Error::InvalidInput("use either --gaps or --expiries".into())),
        (Some(gaps), None) => {
            let t = expiry.ok_or_else(|| Error::InvalidInput("--gaps needs --expiry".into()))?;
            let t1 = t1.unwrap_or(t);
            Ok(gaps.iter().map(|g| (t, t1, t1 + g)).collect())
        }
        (None, Some(ts)) => {
            let g = gap.ok_or_else(|| Error::InvalidInput("--expiries needs --gap".into()))?;
            Ok(ts.iter().map(|&t| (t, t, t + g)).collect())
        }
        (None, None) => match (expiry, t1, t2) {
            (Some(t), Some(t1), Some(t2)) => Ok(vec![(t, t1, t2)]),
            _ => Err(Error::InvalidInput("need --expiry, --t1 and --t2, or a ladder".into())),
        },
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.10}")
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

fn kind_tag(k: OptionKind) -> &'static str {
    match k {
        OptionKind::Call => "call",
        OptionKind::Put => "put",
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_price_vanilla(
    s: &mut Session,
    model: &ModelParams,
    curve: &FuturesCurve,
    expiry: f64,
    maturity: f64,
    strikes: &[f64],
    kind: OptionKind,
    rate: f64,
    validate_mc: bool,
) -> Result<()> {
    let mut rows = Vec::with_capacity(strikes.len());
    for &k in strikes {
        let c = VanillaContract {
            expiry,
            futures_maturity: maturity,
            strike: k,
            kind,
            rate,
        };
        let fourier = price_vanilla_fourier(model, curve, &c, &s.config)?;
        let mc = if validate_mc {
            Some(mc_price_vanilla(model, curve, &c, &s.mc())?)
        } else {
            None
        };
        rows.push((c, fourier, mc));
    }
    s.csv("vanilla.csv", |w| {
        let mut header = vec!["method", "T", "Tm", "K", "kind", "price"];
        if validate_mc {
            header.extend(["mc_price", "mc_stderr"]);
        }
        w.write_record(&header)?;
        for (c, p, mc) in &rows {
            let mut rec = vec![
                p.method.tag().to_string(),
                c.expiry.to_string(),
                c.futures_maturity.to_string(),
                c.strike.to_string(),
                kind_tag(c.kind).to_string(),
                fmt(p.price),
            ];
            if let Some(m) = mc {
                rec.extend([fmt(m.price), opt(m.stderr)]);
            }
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

fn cso_method(m: CsoMethodArg) -> Option<CsoMethod> {
    match m {
        CsoMethodArg::Cf => Some(CsoMethod::CaldanaFusai),
        CsoMethodArg::Hz => Some(CsoMethod::HurdZhou),
        CsoMethodArg::Si => Some(CsoMethod::SingleIntegral),
        CsoMethodArg::Mc => None,
    }
}

fn cso_prices(
    s: &Session,
    model: &ModelParams,
    curve: &FuturesCurve,
    cso: &CsoContract,
    strikes: &[f64],
    method: CsoMethodArg,
) -> Result<Vec<PriceResult>> {
    match cso_method(method) {
        Some(m) => price_cso_ladder(model, curve, cso, strikes, m, &s.config),
        None => strikes
            .iter()
            .map(|&k| mc_price_cso(model, curve, &cso.with_strike(k), &s.mc()))
            .collect(),
    }
}

fn cmd_price_cso(
    s: &mut Session,
    model: &ModelParams,
    curve: &FuturesCurve,
    cso: &CsoContract,
    strikes: &[f64],
    method: CsoMethodArg,
    validate_mc: bool,
) -> Result<()> {
    cso.validate()?;
    let prices = cso_prices(s, model, curve, cso, strikes, method)?;
    let mc = if validate_mc && method != CsoMethodArg::Mc {
        Some(cso_prices(s, model, curve, cso, strikes, CsoMethodArg::Mc)?)
    } else {
        None
    };
    s.csv("cso.csv", |w| {
        let mut header = vec!["method", "T", "T1", "T2", "K", "kind", "price", "stderr"];
        if mc.is_some() {
            header.extend(["mc_price", "mc_stderr"]);
        }
        w.write_record(&header)?;
        for (i, (&k, p)) in strikes.iter().zip(&prices).enumerate() {
            let mut rec = vec![
                p.method.tag().to_string(),
                cso.expiry.to_string(),
                cso.t1.to_string(),
                cso.t2.to_string(),
                k.to_string(),
                kind_tag(cso.kind).to_string(),
                fmt(p.price),
                opt(p.stderr),
            ];
            if let Some(mc) = &mc {
                rec.extend([fmt(mc[i].price), opt(mc[i].stderr)]);
            }
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

#[derive(Serialize)]
struct MeasuresOut {
    #[serde(rename = "T")]
    t: f64,
    #[serde(rename = "T1")]
    t1: f64,
    #[serde(rename = "T2")]
    t2: f64,
    #[serde(flatten)]
    measures: crate::dependence::DependenceMeasures,
    masked_fraction: f64,
}

fn cmd_dependence(s: &mut Session, model: &ModelParams, points: &[(f64, f64, f64)], spec: &CopulaSpec) -> Result<()> {
    if let [(t, t1, t2)] = points {
        let ctx = CFContext::new(model.clone(), *t, *t1, *t2)?.with_backend(s.config.cf_backend);
        let grid = copula_from_cf(&ctx, spec, &s.config)?;
        let measures = dependence_measures(&grid)?;
        let mut buf = Vec::new();
        grid.to_csv_writer(&mut buf)?;
        let body = String::from_utf8_lossy(&buf).into_owned();
        s.csv("copula.csv", |w| {
            // The grid writes its own CSV; pass the rows through unchanged.
            for line in body.lines() {
                w.write_record(line.split(','))?;
            }
            Ok(())
        })?;
        return s.json_out(
            "measures.json",
            &MeasuresOut {
                t: *t,
                t1: *t1,
                t2: *t2,
                measures,
                masked_fraction: grid.masked_fraction,
            },
        );
    }
    let mut rows = Vec::with_capacity(points.len());
    for &(t, t1, t2) in points {
        let ctx = CFContext::new(model.clone(), t, t1, t2)?.with_backend(s.config.cf_backend);
        let grid = copula_from_cf(&ctx, spec, &s.config)?;
        rows.push(((t, t1, t2), dependence_measures(&grid)?));
    }
    s.csv("term_structure.csv", |w| {
        w.write_record(["T", "T1", "T2", "gap", "tau_K", "rho_S", "sigma_SW", "phi_H_squared_form"])?;
        for ((t, t1, t2), m) in &rows {
            w.write_record([
                t.to_string(),
                t1.to_string(),
                t2.to_string(),
                fmt(t2 - t1),
                fmt(m.tau_k),
                fmt(m.rho_s),
                fmt(m.sigma_sw),
                fmt(m.phi_h_squared_form),
            ])?;
        }
        Ok(())
    })
}

/// A spread call price to invert.
#[derive(Debug, Clone, Copy)]
struct Target {
    t: f64,
    t1: f64,
    t2: f64,
    strike: f64,
    shift: Option<f64>,
    price: f64,
}

fn read_observed(bytes: &[u8]) -> Result<Vec<Target>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(bytes);
    let headers = rdr.headers()?.clone();
    let want = ["T", "T1", "T2", "K", "price"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::Parse {
            line: Some(1),
            msg: format!("expected header `{}`", want.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize);
        let mut v = [0.0; 5];
        for (i, x) in v.iter_mut().enumerate() {
            *x = rec.get(i).and_then(|f| f.parse().ok()).ok_or_else(|| Error::Parse {
                line,
                msg: format!("field {} is not a number", want[i]),
            })?;
        }
        out.push(Target {
            t: v[0],
            t1: v[1],
            t2: v[2],
            strike: v[3],
            shift: None,
            price: v[4],
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("no observed prices".into()));
    }
    Ok(out)
}

fn model_targets(
    s: &Session,
    model: &ModelParams,
    curve: &FuturesCurve,
    points: &[(f64, f64, f64)],
    shifts: &[f64],
    rate: f64,
    method: CsoMethodArg,
) -> Result<Vec<Target>> {
    let mut out = Vec::new();
    for &(t, t1, t2) in points {
        let atm = curve.price(t1) - curve.price(t2);
        let strikes: Vec<f64> = shifts.iter().map(|d| atm + d).collect();
        let cso = CsoContract {
            expiry: t,
            t1,
            t2,
            strike: atm,
            kind: OptionKind::Call,
            rate,
        };
        cso.validate()?;
        let prices = cso_prices(s, model, curve, &cso, &strikes, method)?;
        for ((&d, &k), p) in shifts.iter().zip(&strikes).zip(prices) {
            out.push(Target {
                t,
                t1,
                t2,
                strike: k,
                shift: Some(d),
                price: p.price,
            });
        }
    }
    Ok(out)
}

fn cmd_implied_correlation(
    s: &mut Session,
    model: &ModelParams,
    curve: &FuturesCurve,
    targets: &[Target],
    rate: f64,
) -> Result<()> {
    let mut rows = Vec::with_capacity(targets.len());
    let mut marginals: Option<((f64, f64, f64), PriceMarginals)> = None;
    for tg in targets {
        let key = (tg.t, tg.t1, tg.t2);
        if marginals.as_ref().map(|(k, _)| *k) != Some(key) {
            let ctx = CFContext::new(model.clone(), tg.t, tg.t1, tg.t2)?.with_backend(s.config.cf_backend);
            let m = PriceMarginals::from_context(&ctx, curve.price(tg.t1), curve.price(tg.t2), &s.config)?;
            marginals = Some((key, m));
        }
        let m = &marginals.as_ref().expect("set above").1;
        let cso = CsoContract {
            expiry: tg.t,
            t1: tg.t1,
            t2: tg.t2,
            strike: tg.strike,
            kind: OptionKind::Call,
            rate,
        };
        let ic = implied_correlation(m, &cso, tg.price, &s.config).map_err(|e| match e {
            Error::NoSolution(msg) => Error::NoSolution(format!(
                "T = {}, T1 = {}, T2 = {}, K = {}: {msg}",
                tg.t, tg.t1, tg.t2, tg.strike
            )),
            other => other,
        })?;
        rows.push((*tg, ic));
    }
    s.csv("implied_correlation.csv", |w| {
        w.write_record([
            "T", "T1", "T2", "K", "shift", "price", "rho", "near_boundary", "band_low", "band_high",
        ])?;
        for (tg, ic) in &rows {
            w.write_record([
                tg.t.to_string(),
                tg.t1.to_string(),
                tg.t2.to_string(),
                tg.strike.to_string(),
                tg.shift.map(|d| d.to_string()).unwrap_or_default(),
                fmt(tg.price),
                fmt(ic.rho),
                ic.near_boundary.to_string(),
                fmt(ic.band.0),
                fmt(ic.band.1),
            ])?;
        }
        Ok(())
    })
}

#[derive(Serialize)]
struct CorrelationOut {
    t: f64,
    #[serde(rename = "T1")]
    t1: f64,
    #[serde(rename = "T2")]
    t2: f64,
    mean: f64,
    stderr: f64,
    paths: usize,
    degenerate: usize,
}

fn cmd_correlation(s: &mut Session, model: &ModelParams, t: f64, t1: f64, t2: f64, bins: usize) -> Result<()> {
    let settings = s.mc();
    let study = instantaneous_correlation_study(model, t, t1, t2, &settings)?;
    let hist = crate::montecarlo::Histogram::from_samples(&study.samples, bins)?;
    let mut buf = Vec::new();
    hist.to_csv_writer(&mut buf)?;
    let body = String::from_utf8_lossy(&buf).into_owned();
    s.csv("correlation_histogram.csv", |w| {
        for line in body.lines() {
            w.write_record(line.split(','))?;
        }
        Ok(())
    })?;
    s.json_out(
        "correlation.json",
        &CorrelationOut {
            t,
            t1,
            t2,
            mean: study.mean.mean,
            stderr: study.mean.stderr,
            paths: settings.paths,
            degenerate: study.degenerate,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strike_ladders() {
        assert_eq!(parse_strikes("-2:2:1").unwrap(), vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert_eq!(parse_strikes("0:1:0.25").unwrap().len(), 5);
        assert_eq!(parse_strikes("3:3:1").unwrap(), vec![3.0]);
        for bad in ["1:0:1", "0:1:0", "0:1", "a:b:c", "0:1:-1"] {
            assert!(parse_strikes(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn blob_hash_matches_git_framing() {
        // `printf 'hello\n' | git hash-object --stdin` with SHA-256 object format.
        assert_eq!(
            content_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn out_flag_is_not_recorded() {
        let args: Vec<String> = ["price-vanilla", "--out", "x", "--seed", "1", "--out=y"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(strip_out(&args), vec!["price-vanilla", "--seed", "1"]);
    }
}
