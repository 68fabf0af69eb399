//! Command-line front end. Every subcommand reads a long-format panel CSV (or
//! a generative spec), runs one estimation pipeline, prints a one-screen
//! summary, and writes its artifacts under an output directory with a
//! content-hash manifest. A config file plus a seed reproduces every emitted
//! byte at any worker count.
//!
//! Option precedence is flags > config file > defaults, with the
//! `TRANSITION_ATT_SEED` environment variable as a fallback seed between file
//! and default.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_panel_csv, CsvSchema, PanelDataset};
use crate::dgp::{self, DgpSpec, StaggeredDgpSpec};
use crate::effects::{
    did_att, history_contributions, placebo_att, pre_transition_differences, ti_att, EffectSeries,
    EmptyCellPolicy, PreTrendReport,
};
use crate::error::{Error, Result};
use crate::inference::{run_bootstrap, EstimationConfig, DEFAULT_ALPHA, DEFAULT_B};
use crate::mixture::{
    multistart_fit, select_num_types, EmFit, MultistartSchedule, DEFAULT_EPS_FLOOR,
};
use crate::mixture_effects::{second_stage, type_pre_transitions};
use crate::report::{
    band_rows, flow_series, panel_summary, BootstrapSummary, FlowReport, MixtureEffectsReport,
    MixtureFitReport, PlaceboReport,
};
use crate::staggered::{cohort_effect_table, ControlMode};

pub const SEED_ENV_VAR: &str = "TRANSITION_ATT_SEED";
const DEFAULT_SELECT_J_MAX: usize = 3;

/// Parses argv, runs the subcommand, and returns the process exit code:
/// 0 success, 2 data/configuration error, 3 estimation error, 64 usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                3
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "transition-att",
    version,
    about = "Treatment-effect estimation for discrete panel outcomes from transition structure",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Load a panel and report its shape without estimating anything
    Validate(CommonArgs),
    /// Difference-in-differences comparator (level trends, no conditioning)
    Did(CommonArgs),
    /// ATT from transition structure: nonparametric at --types 1, latent-type aggregate above
    Att(CommonArgs),
    /// Fit the latent-type Markov mixture and report parameters plus second-stage effects
    Mixture(CommonArgs),
    /// Choose the number of latent types by BIC over 1..=--types
    SelectTypes(CommonArgs),
    /// Weighted bootstrap: standard errors, pointwise and uniform sup-t bands
    Bootstrap {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write every replicate's coordinates to bootstrap_draws.csv
        #[arg(long)]
        dump_draws: bool,
    },
    /// Pre-treatment transition differences between arms (per type when --types > 1)
    Pretest(CommonArgs),
    /// Placebo effect at the last pre-treatment period (zero under the identifying assumption)
    Placebo(CommonArgs),
    /// Flow decomposition of one category's ATT into inflows and outflows
    Flows {
        #[command(flatten)]
        common: CommonArgs,
        /// Focal category, as a label or 0-based index [default: the last category]
        #[arg(long, value_name = "CATEGORY")]
        focal: Option<String>,
    },
    /// Cohort-by-period effects under staggered adoption, plus calendar-time aggregates
    Staggered(CommonArgs),
    /// Draw a synthetic panel from a generative spec file
    Simulate(SimulateArgs),
}

/// Options shared by the estimation subcommands. Each maps 1:1 onto a config
/// file key; flag values override file values, file values override defaults.
#[derive(Debug, Clone, Default, Args)]
struct CommonArgs {
    /// JSON config file holding any of the other options under the same names
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Input panel CSV: long format with header unit,time,outcome,treated[,cluster][,cohort]
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
    /// Rename input columns: comma-separated key=value over unit,time,outcome,treated,cluster,cohort
    #[arg(long, value_name = "MAP", value_parser = parse_schema_arg)]
    schema: Option<SchemaMap>,
    /// Outcome labels in category order, comma-separated [default: distinct outcomes, sorted]
    #[arg(long, value_name = "LABELS", value_delimiter = ',')]
    alphabet: Option<Vec<String>>,
    /// Pre-treatment periods to condition on [default: 1]
    #[arg(long, value_name = "L")]
    lag: Option<usize>,
    /// Latent types J; for select-types, the largest J considered [default: 1; select-types: 3]
    #[arg(long, value_name = "J")]
    types: Option<usize>,
    /// Probability floor for every fitted kernel entry [default: 1e-6]
    #[arg(long, value_name = "EPS")]
    eps: Option<f64>,
    /// Bootstrap replicate count [default: 500]
    #[arg(long = "bootstrap-B", value_name = "B")]
    bootstrap_b: Option<usize>,
    /// Band level: 1-alpha simultaneous coverage [default: 0.05]
    #[arg(long, value_name = "ALPHA")]
    alpha: Option<f64>,
    /// Draw one bootstrap weight per cluster instead of per unit [default: off]
    #[arg(long)]
    cluster: bool,
    /// Seed for every random stage [default: $TRANSITION_ATT_SEED, else 0]
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Worker threads for multistart/bootstrap/simulation [default: all cores]
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Treated history with no control match: refuse, or drop and renormalize [default: error]
    #[arg(long, value_name = "POLICY", value_parser = parse_empty_cell)]
    empty_cell: Option<EmptyCellPolicy>,
    /// Staggered control pool: never-treated, not-yet-treated, or both [default: never]
    #[arg(long, value_name = "MODE", value_parser = parse_mode)]
    mode: Option<ControlMode>,
    /// Output directory for artifacts and manifest.json [default: .]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct SimulateArgs {
    /// JSON config file holding any of the other options under the same names
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Generative spec JSON: a mixture spec (with "params") or a staggered spec (with "cohorts")
    #[arg(long, value_name = "FILE")]
    spec: PathBuf,
    /// Override the spec's unit count
    #[arg(long, value_name = "N")]
    n: Option<usize>,
    /// Override the spec's seed [default: $TRANSITION_ATT_SEED if set]
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Worker threads for simulation [default: all cores]
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Output CSV file (path ending in .csv), or a directory for simulate.csv + manifest [default: .]
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn parse_schema_arg(s: &str) -> std::result::Result<SchemaMap, String> {
    let mut map = SchemaMap::default();
    for pair in s.split(',').filter(|p| !p.is_empty()) {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| format!("schema entry '{pair}' is not key=value"))?;
        let slot = match key.trim() {
            "unit" => &mut map.unit,
            "time" => &mut map.time,
            "outcome" => &mut map.outcome,
            "treated" => &mut map.treated,
            "cluster" => &mut map.cluster,
            "cohort" => &mut map.cohort,
            other => {
                return Err(format!(
                    "unknown schema key '{other}' (expected unit, time, outcome, treated, cluster, or cohort)"
                ))
            }
        };
        *slot = Some(value.trim().to_string());
    }
    Ok(map)
}

fn parse_empty_cell(s: &str) -> std::result::Result<EmptyCellPolicy, String> {
    match s {
        "error" => Ok(EmptyCellPolicy::Error),
        "drop" => Ok(EmptyCellPolicy::Drop),
        other => Err(format!("'{other}' is not a policy (expected error or drop)")),
    }
}

fn parse_mode(s: &str) -> std::result::Result<ControlMode, String> {
    ControlMode::from_str(s).map_err(|e| e.to_string())
}

/// Config-file form of the options: same names as the flags, all optional,
/// unknown keys rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub schema: Option<SchemaMap>,
    pub alphabet: Option<Vec<String>>,
    pub lag: Option<usize>,
    pub types: Option<usize>,
    pub multistart: Option<ScheduleConfig>,
    /// Reduced schedule for each bootstrap replicate's top-up.
    pub replicate_multistart: Option<ScheduleConfig>,
    pub eps: Option<f64>,
    pub bootstrap: Option<BootstrapConfig>,
    pub empty_cell: Option<EmptyCellPolicy>,
    pub mode: Option<ControlMode>,
    pub focal: Option<String>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaMap {
    pub unit: Option<String>,
    pub time: Option<String>,
    pub outcome: Option<String>,
    pub treated: Option<String>,
    pub cluster: Option<String>,
    pub cohort: Option<String>,
}

impl SchemaMap {
    pub fn into_csv_schema(self) -> CsvSchema {
        CsvSchema {
            unit: self.unit,
            time: self.time,
            outcome: self.outcome,
            treated: self.treated,
            cluster: self.cluster,
            cohort: self.cohort,
        }
    }
}

/// Partial multistart schedule; missing keys keep the defaults
/// {n_short: 6000, n_long: 20, short_iters: 10, tol: 1e-3, max_iter: 100}
/// (replicate top-up default: n_short 50, n_long 5).
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub n_short: Option<usize>,
    pub n_long: Option<usize>,
    pub short_iters: Option<usize>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
}

impl ScheduleConfig {
    pub fn apply(&self, mut base: MultistartSchedule) -> MultistartSchedule {
        if let Some(v) = self.n_short {
            base.n_short = v;
        }
        if let Some(v) = self.n_long {
            base.n_long = v;
        }
        if let Some(v) = self.short_iters {
            base.short_iters = v;
        }
        if let Some(v) = self.tol {
            base.tol = v;
        }
        if let Some(v) = self.max_iter {
            base.max_iter = v;
        }
        base
    }
}

/// Bootstrap block: {b: 500, alpha: 0.05, cluster: false, seed: top-level seed}.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub b: Option<usize>,
    pub alpha: Option<f64>,
    pub cluster: Option<bool>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV_VAR) {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV_VAR}='{text}' is not a u64 seed"))),
        Err(_) => Ok(None),
    }
}

/// Fully resolved options for one invocation.
struct Resolved {
    input: Option<PathBuf>,
    schema: CsvSchema,
    alphabet: Option<Vec<String>>,
    lag: usize,
    types: Option<usize>,
    schedule: MultistartSchedule,
    replicate_schedule: MultistartSchedule,
    eps: f64,
    b: usize,
    alpha: f64,
    cluster: bool,
    policy: EmptyCellPolicy,
    mode: ControlMode,
    focal: Option<String>,
    /// Seed if any source set one; commands that always need a seed fall back to 0.
    seed: Option<u64>,
    bootstrap_seed: u64,
    workers: Option<usize>,
    out: PathBuf,
}

impl Resolved {
    fn new(args: &CommonArgs, focal_flag: Option<&String>) -> Result<Self> {
        let file = match &args.config {
            Some(path) => RunConfig::from_path(path)?,
            None => RunConfig::default(),
        };
        let seed = args
            .seed
            .or(file.seed)
            .map(Ok)
            .or_else(|| env_seed().transpose())
            .transpose()?;
        let boot = file.bootstrap.clone().unwrap_or_default();
        let replicate_default = MultistartSchedule {
            n_short: 50,
            n_long: 5,
            ..MultistartSchedule::default()
        };
        Ok(Self {
            input: args.input.clone().or(file.input),
            schema: args
                .schema
                .clone()
                .or(file.schema)
                .unwrap_or_default()
                .into_csv_schema(),
            alphabet: args.alphabet.clone().or(file.alphabet),
            lag: args.lag.or(file.lag).unwrap_or(1),
            types: args.types.or(file.types),
            schedule: file
                .multistart
                .as_ref()
                .map(|c| c.apply(MultistartSchedule::default()))
                .unwrap_or_default(),
            replicate_schedule: file
                .replicate_multistart
                .as_ref()
                .map(|c| c.apply(replicate_default.clone()))
                .unwrap_or(replicate_default),
            eps: args.eps.or(file.eps).unwrap_or(DEFAULT_EPS_FLOOR),
            b: args.bootstrap_b.or(boot.b).unwrap_or(DEFAULT_B),
            alpha: args.alpha.or(boot.alpha).unwrap_or(DEFAULT_ALPHA),
            cluster: args.cluster || boot.cluster.unwrap_or(false),
            policy: args.empty_cell.or(file.empty_cell).unwrap_or_default(),
            mode: args.mode.or(file.mode).unwrap_or(ControlMode::Never),
            focal: focal_flag.cloned().or(file.focal),
            bootstrap_seed: args.seed.or(boot.seed).or(seed).unwrap_or(0),
            seed,
            workers: args.workers.or(file.workers),
            out: args.out.clone().or(file.out).unwrap_or_else(|| ".".into()),
        })
    }

    fn seed_or_zero(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn n_types(&self) -> usize {
        self.types.unwrap_or(1)
    }

    fn load(&self) -> Result<PanelDataset> {
        let path = self.input.as_ref().ok_or_else(|| {
            Error::Config("no input panel: pass --input or set \"input\" in the config".into())
        })?;
        load_panel_csv(path, &self.schema, self.alphabet.as_deref())
    }
}

/// Runs `f` on a dedicated rayon pool of `workers` threads; `None`/`Some(0)`
/// use the global pool. Owning the pool keeps parallel reductions associated
/// with a fixed thread count, so outputs are reproducible per worker setting.
pub fn with_workers<T, F>(workers: Option<usize>, f: F) -> Result<T>
where
    T: Send,
    F: FnOnce() -> Result<T> + Send,
{
    match workers {
        None | Some(0) => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(f),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Validate(c) => {
            let r = Resolved::new(&c, None)?;
            with_workers(r.workers, || cmd_validate(&r))
        }
        Cmd::Did(c) => {
            let r = Resolved::new(&c, None)?;
            with_workers(r.workers, || cmd_did(&r))
        }
        Cmd::Att(c) => {
            let r = Resolved::new(&c, None)?;
            with_workers(r.workers, || cmd_att(&r))
        }
        Cmd::Mixture(c) => {
            let r = Resolved::new(&c, None)?;
            with_workers(r.workers, || cmd_mixture(&r))
        }
        Cmd::SelectTypes(c) => {
            let r = Resolved::new(&c, None)?;
            with_workers(r.workers, || cmd_select_types(&r))
        }
        Cmd::Bootstrap { common, dump_draws } => {
            let r = Resolved::new(&common, None)?;
            with_workers(r.workers, || cmd_bootstrap(&r, dump_draws))
        }
        Cmd::Pretest(c) => {
            let r = Resolved::new(&c, None)?;
            with_workers(r.workers, || cmd_pretest(&r))
        }
        Cmd::Placebo(c) => {
            let r = Resolved::new(&c, None)?;
            with_workers(r.workers, || cmd_placebo(&r))
        }
        Cmd::Flows { common, focal } => {
            let r = Resolved::new(&common, focal.as_ref())?;
            with_workers(r.workers, || cmd_flows(&r))
        }
        Cmd::Staggered(c) => {
            let r = Resolved::new(&c, None)?;
            with_workers(r.workers, || cmd_staggered(&r))
        }
        Cmd::Simulate(args) => cmd_simulate(&args),
    }
}

// ---------------------------------------------------------------------------
// Artifact emission

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

/// What a run wrote: every artifact with its size and content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

/// Collects artifacts in memory, then writes them plus manifest.json.
/// JSON is pretty-printed with stable key order; every file ends in a newline.
pub struct Report {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Report {
    pub fn new<P: Into<PathBuf>>(dir: P) -> Self {
        Self {
            dir: dir.into(),
            files: Vec::new(),
        }
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Config(format!("serializing {name}: {e}")))?;
        text.push('\n');
        self.files.push((name.to_string(), text.into_bytes()));
        Ok(())
    }

    pub fn add_csv(&mut self, name: &str, header: &str, rows: &[String]) {
        let mut text = String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>() + 1);
        text.push_str(header);
        text.push('\n');
        for row in rows {
            text.push_str(row);
            text.push('\n');
        }
        self.files.push((name.to_string(), text.into_bytes()));
    }

    /// Writes every artifact and a manifest listing them (sorted by name)
    /// with SHA-256 content hashes.
    pub fn write(self) -> Result<Manifest> {
        std::fs::create_dir_all(&self.dir)?;
        let mut entries = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            std::fs::write(self.dir.join(name), bytes)?;
            entries.push(ManifestEntry {
                name: name.clone(),
                bytes: bytes.len(),
                sha256: hex_sha256(bytes),
            });
        }
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        let manifest = Manifest { files: entries };
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Config(format!("serializing manifest: {e}")))?;
        text.push('\n');
        std::fs::write(self.dir.join("manifest.json"), text)?;
        Ok(manifest)
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write as _;
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Shortest round-trip decimal; −0 normalized to 0 so byte output is stable.
fn fmt_num(v: f64) -> String {
    format!("{}", v + 0.0)
}

/// Labels come from user data; quote them if they would break a CSV row.
fn escape_csv(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

// ---------------------------------------------------------------------------
// Summary printing

fn describe_panel(ds: &PanelDataset) -> String {
    format!(
        "{} units ({} treated / {} control), T={} with T0={}, {} categories",
        ds.n(),
        ds.n_treated(),
        ds.n() - ds.n_treated(),
        ds.t_total(),
        ds.t_pre(),
        ds.n_cats()
    )
}

fn print_series(ds: &PanelDataset, series: &EffectSeries) {
    let labels = ds.alphabet().labels();
    let width = labels.iter().map(|l| l.len()).max().unwrap_or(0);
    for pe in &series.periods {
        for (k, label) in labels.iter().enumerate() {
            let lead = if k == 0 {
                format!("t={}", pe.period)
            } else {
                String::new()
            };
            let cf = match &pe.counterfactual {
                Some(cf) => format!("   counterfactual {:.4}", cf[k]),
                None => String::new(),
            };
            println!("  {lead:<6}{label:<width$}  {:+.4}{cf}", pe.effect[k]);
        }
    }
}

fn print_manifest(manifest: &Manifest, dir: &Path) {
    let names: Vec<&str> = manifest.files.iter().map(|f| f.name.as_str()).collect();
    println!("wrote {} + manifest.json in {}", names.join(", "), dir.display());
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_validate(r: &Resolved) -> Result<()> {
    let ds = r.load()?;
    let report = panel_summary(&ds);
    println!("valid panel: {}", describe_panel(&ds));
    println!("  labels: {}", ds.alphabet().labels().join(", "));
    if let Some(nc) = report.n_clusters {
        println!("  clusters: {nc}");
    }
    if !report.cohorts.is_empty() {
        let gs: Vec<String> = report.cohorts.iter().map(|g| g.to_string()).collect();
        println!("  adoption cohorts: {}", gs.join(", "));
    }
    let mut out = Report::new(&r.out);
    out.add_json("validate.json", &report)?;
    print_manifest(&out.write()?, &r.out);
    Ok(())
}

fn cmd_did(r: &Resolved) -> Result<()> {
    let ds = r.load()?;
    let series = did_att(&ds)?;
    println!("difference-in-differences: {}", describe_panel(&ds));
    print_series(&ds, &series);
    let mut out = Report::new(&r.out);
    out.add_json("did.json", &series)?;
    print_manifest(&out.write()?, &r.out);
    Ok(())
}

/// Per-history contribution table: history,weight,effect_0..effect_{K-1}.
fn history_table(ds: &PanelDataset, lag: usize, t: usize, policy: EmptyCellPolicy) -> Result<(String, Vec<String>)> {
    let k = ds.n_cats();
    let mut header = String::from("history,weight");
    for c in 0..k {
        header.push_str(&format!(",effect_{c}"));
    }
    let cells = history_contributions(ds, lag, t, policy)?;
    let rows = cells
        .iter()
        .map(|cell| {
            let mut row = format!("{},{}", escape_csv(&cell.history.label(ds.alphabet())), fmt_num(cell.weight));
            for v in &cell.effect {
                row.push(',');
                row.push_str(&fmt_num(*v));
            }
            row
        })
        .collect();
    Ok((header, rows))
}

fn fit_mixture(r: &Resolved, ds: &PanelDataset) -> Result<EmFit> {
    multistart_fit(
        ds,
        r.n_types(),
        r.lag,
        &r.schedule,
        r.seed_or_zero(),
        None,
        r.eps,
    )
}

fn cmd_att(r: &Resolved) -> Result<()> {
    let ds = r.load()?;
    let mut out = Report::new(&r.out);
    if r.n_types() == 1 {
        let series = ti_att(&ds, r.lag, r.policy)?;
        println!(
            "ATT under transition independence (lag {}): {}",
            r.lag,
            describe_panel(&ds)
        );
        print_series(&ds, &series);
        out.add_json("att.json", &series)?;
        for (idx, t) in ds.post_periods().enumerate() {
            let (header, rows) = history_table(&ds, r.lag, t, r.policy)?;
            let name = if idx == 0 {
                "att.csv".to_string()
            } else {
                format!("att_t{t}.csv")
            };
            out.add_csv(&name, &header, &rows);
        }
    } else {
        let fit = fit_mixture(r, &ds)?;
        let stage = second_stage(&ds, &fit.posteriors, r.lag, r.policy, None)?;
        println!(
            "ATT with {} latent types (lag {}): {}",
            r.n_types(),
            r.lag,
            describe_panel(&ds)
        );
        println!("aggregate:");
        print_series(&ds, &stage.aggregate);
        for (j, series) in stage.types.iter().enumerate() {
            println!("type {} (weight {:.4}):", j + 1, stage.type_weights[j]);
            print_series(&ds, series);
        }
        out.add_json("att.json", &MixtureEffectsReport::new(&stage))?;
    }
    print_manifest(&out.write()?, &r.out);
    Ok(())
}

fn cmd_mixture(r: &Resolved) -> Result<()> {
    let ds = r.load()?;
    let fit = fit_mixture(r, &ds)?;
    let stage = second_stage(&ds, &fit.posteriors, r.lag, r.policy, None)?;
    let report = MixtureFitReport::new(&ds, &fit, &stage);
    println!(
        "markov mixture fit, J={} (lag {}): {}",
        r.n_types(),
        r.lag,
        describe_panel(&ds)
    );
    println!(
        "  loglik {:.4}, BIC {:.4}, {} iterations{}",
        report.loglik,
        report.bic,
        report.iterations,
        if report.converged { "" } else { " (NOT converged)" }
    );
    let pis: Vec<String> = fit.params.pi.iter().map(|p| format!("{p:.4}")).collect();
    let ws: Vec<String> = stage.type_weights.iter().map(|w| format!("{w:.4}")).collect();
    println!("  pi: [{}]   treated-type weights: [{}]", pis.join(", "), ws.join(", "));
    println!("aggregate ATT:");
    print_series(&ds, &stage.aggregate);
    let mut out = Report::new(&r.out);
    out.add_json("mixture.json", &report)?;
    print_manifest(&out.write()?, &r.out);
    Ok(())
}

fn cmd_select_types(r: &Resolved) -> Result<()> {
    let ds = r.load()?;
    let j_max = r.types.unwrap_or(DEFAULT_SELECT_J_MAX);
    let (selection, _fits) =
        select_num_types(&ds, r.lag, j_max, &r.schedule, r.seed_or_zero(), r.eps)?;
    println!(
        "model selection over J=1..={j_max} (lag {}): {}",
        r.lag,
        describe_panel(&ds)
    );
    println!("  {:>3} {:>14} {:>8} {:>14}", "J", "loglik", "params", "BIC");
    for row in &selection.table {
        let marker = if row.n_types == selection.chosen { "  <- chosen" } else { "" };
        println!(
            "  {:>3} {:>14.4} {:>8} {:>14.4}{}{}",
            row.n_types,
            row.loglik,
            row.n_params,
            row.bic,
            if row.converged { "" } else { "  (not converged)" },
            marker
        );
    }
    let mut out = Report::new(&r.out);
    out.add_json("select-types.json", &selection)?;
    print_manifest(&out.write()?, &r.out);
    Ok(())
}

fn cmd_bootstrap(r: &Resolved, dump_draws: bool) -> Result<()> {
    let ds = r.load()?;
    let mut cfg = EstimationConfig::new(r.n_types(), r.lag);
    cfg.schedule = r.schedule.clone();
    cfg.replicate_schedule = r.replicate_schedule.clone();
    cfg.eps = r.eps;
    cfg.policy = r.policy;
    cfg.cluster = r.cluster;
    let run = run_bootstrap(&ds, &cfg, r.b, r.bootstrap_seed)?;
    let (crit_values, bands) = band_rows(&ds, &run.draws, r.n_types(), r.alpha)?;

    let report = BootstrapSummary {
        b: r.b,
        seed: r.bootstrap_seed,
        alpha: r.alpha,
        failures: run.draws.failures,
        weights: &run.stage.type_weights,
        theta_hat: &run.draws.theta_hat,
        sigma: &run.draws.sigma,
        crit_values,
        pi_gaps: &run.draws.pi_gaps,
    };

    println!(
        "bootstrap, B={} ({} failures), J={}, lag {}, alpha {}: {}",
        r.b,
        run.draws.failures,
        r.n_types(),
        r.lag,
        r.alpha,
        describe_panel(&ds)
    );
    println!(
        "  {:>10} {:>4} {:>12} {:>10} {:>10} {:>24} {:>24}",
        "series", "t", "category", "estimate", "se", "pointwise", "uniform"
    );
    for row in &bands {
        println!(
            "  {:>10} {:>4} {:>12} {:>10.4} {:>10.4} {:>24} {:>24}",
            row.series,
            row.period,
            row.category,
            row.estimate,
            row.se,
            format!("[{:+.4}, {:+.4}]", row.pw_lo, row.pw_hi),
            format!("[{:+.4}, {:+.4}]", row.unif_lo, row.unif_hi),
        );
    }

    let rows: Vec<String> = bands
        .iter()
        .map(|row| {
            format!(
                "{},{},{},{},{},{},{},{},{},{}",
                row.series,
                row.period,
                escape_csv(&row.category),
                fmt_num(row.estimate),
                fmt_num(row.se),
                fmt_num(row.pw_lo),
                fmt_num(row.pw_hi),
                fmt_num(row.unif_lo),
                fmt_num(row.unif_hi),
                fmt_num(row.crit_value),
            )
        })
        .collect();
    let mut out = Report::new(&r.out);
    out.add_json("bootstrap.json", &report)?;
    out.add_csv(
        "bootstrap.csv",
        "series,period,category,estimate,se,pw_lo,pw_hi,unif_lo,unif_hi,crit_value",
        &rows,
    );
    if dump_draws {
        let layout = crate::mixture_effects::theta_layout(r.n_types(), ds.t_pre(), ds.t_total(), ds.n_cats());
        let mut draw_rows = Vec::with_capacity(run.draws.draws.len() * layout.len());
        for (b_idx, draw) in run.draws.draws.iter().enumerate() {
            for (coord, value) in layout.iter().zip(draw) {
                draw_rows.push(format!(
                    "{},{},{},{},{}",
                    b_idx,
                    coord.series,
                    coord.period,
                    escape_csv(ds.alphabet().label(coord.category)),
                    fmt_num(*value)
                ));
            }
        }
        out.add_csv(
            "bootstrap_draws.csv",
            "replicate,series,period,category,value",
            &draw_rows,
        );
    }
    print_manifest(&out.write()?, &r.out);
    Ok(())
}

fn pretrend_max_diff(report: &PreTrendReport) -> Option<f64> {
    report
        .layers
        .iter()
        .flat_map(|l| l.cells.iter().filter_map(|c| c.diff))
        .map(f64::abs)
        .max_by(|a, b| a.partial_cmp(b).unwrap())
}

fn cmd_pretest(r: &Resolved) -> Result<()> {
    let ds = r.load()?;
    let report = if r.n_types() == 1 {
        pre_transition_differences(&ds)
    } else {
        let fit = fit_mixture(r, &ds)?;
        type_pre_transitions(&ds, &fit.posteriors, None)?
    };
    println!(
        "pre-treatment transition differences (J={}): {}",
        r.n_types(),
        describe_panel(&ds)
    );
    if report.insufficient_pre_periods {
        println!("  T0={} leaves no pre-treatment transitions to compare", ds.t_pre());
    } else {
        match pretrend_max_diff(&report) {
            Some(max) => println!("  max |treated - control| transition gap: {max:.4}"),
            None => println!("  no transition cell is occupied in both arms"),
        }
        let flagged: usize = report
            .layers
            .iter()
            .flat_map(|l| &l.cells)
            .filter(|c| c.diff.is_none())
            .count();
        if flagged > 0 {
            println!("  {flagged} cells lack one arm's conditioning state (flagged, not fabricated)");
        }
    }
    let mut out = Report::new(&r.out);
    out.add_json("pretest.json", &report)?;
    print_manifest(&out.write()?, &r.out);
    Ok(())
}

fn cmd_placebo(r: &Resolved) -> Result<()> {
    let ds = r.load()?;
    let placebo = placebo_att(&ds, r.lag, r.policy)?;
    println!(
        "placebo effect at t=T0={} (lag {}): {}",
        ds.t_pre(),
        r.lag,
        describe_panel(&ds)
    );
    let labels = ds.alphabet().labels();
    let width = labels.iter().map(|l| l.len()).max().unwrap_or(0);
    for (k, label) in labels.iter().enumerate() {
        println!("  {label:<width$}  {:+.4}", placebo.effect[k]);
    }
    let mut out = Report::new(&r.out);
    out.add_json("placebo.json", &PlaceboReport { lag: r.lag, placebo })?;
    print_manifest(&out.write()?, &r.out);
    Ok(())
}

fn resolve_focal(ds: &PanelDataset, spec: Option<&String>) -> Result<usize> {
    match spec {
        None => Ok(ds.n_cats() - 1),
        Some(text) => {
            if let Some(idx) = ds.alphabet().index_of(text) {
                return Ok(idx);
            }
            match text.parse::<usize>() {
                Ok(idx) if idx < ds.n_cats() => Ok(idx),
                _ => Err(Error::Config(format!(
                    "focal category '{text}' is neither a label ({}) nor an index below {}",
                    ds.alphabet().labels().join(", "),
                    ds.n_cats()
                ))),
            }
        }
    }
}

fn cmd_flows(r: &Resolved) -> Result<()> {
    let ds = r.load()?;
    let focal = resolve_focal(&ds, r.focal.as_ref())?;
    let fit = if r.n_types() == 1 {
        None
    } else {
        Some(fit_mixture(r, &ds)?)
    };
    let (weights, decompositions) = flow_series(&ds, fit.as_ref(), focal)?;

    let mut rows = Vec::new();
    for flow in &decompositions {
        let series = match flow.type_index {
            Some(j) => format!("type{}", j + 1),
            None => "aggregate".to_string(),
        };
        for channel in &flow.channels {
            for (direction, value) in [("inflow", channel.inflow), ("outflow", channel.outflow)] {
                rows.push(format!(
                    "{},{},{},{},{}",
                    series,
                    flow.period,
                    escape_csv(ds.alphabet().label(channel.state)),
                    direction,
                    fmt_num(value)
                ));
            }
        }
    }

    println!(
        "flow decomposition of the '{}' effect (J={}): {}",
        ds.alphabet().label(focal),
        r.n_types(),
        describe_panel(&ds)
    );
    for flow in &decompositions {
        let series = match flow.type_index {
            Some(j) => format!("type{}", j + 1),
            None => "aggregate".to_string(),
        };
        println!("  {series} t={}: net {:+.4} (residual {:+.1e})", flow.period, flow.net, flow.residual);
        for ch in &flow.channels {
            println!(
                "    {:<12} inflow {:+.4}   outflow {:+.4}",
                ds.alphabet().label(ch.state),
                ch.inflow,
                ch.outflow
            );
        }
    }

    let mut out = Report::new(&r.out);
    out.add_json(
        "flows.json",
        &FlowReport {
            focal,
            focal_label: ds.alphabet().label(focal),
            weights: weights.as_deref(),
            decompositions: &decompositions,
        },
    )?;
    out.add_csv("flows.csv", "type,period,channel,direction,effect", &rows);
    print_manifest(&out.write()?, &r.out);
    Ok(())
}

fn cmd_staggered(r: &Resolved) -> Result<()> {
    let ds = r.load()?;
    let table = cohort_effect_table(&ds, r.lag, r.mode)?;
    println!(
        "staggered adoption, mode {} (lag {}): {}",
        table.mode,
        r.lag,
        describe_panel(&ds)
    );
    let labels = ds.alphabet().labels();
    let mut rows = Vec::new();
    for cell in &table.entries {
        for (k, label) in labels.iter().enumerate() {
            rows.push(format!(
                "{},{},{},{},{},{},{}",
                cell.cohort,
                cell.period,
                escape_csv(label),
                fmt_num(cell.effect[k]),
                cell.n_treated,
                cell.n_control,
                table.mode
            ));
        }
        let effects: Vec<String> = labels
            .iter()
            .zip(&cell.effect)
            .map(|(l, e)| format!("{l} {e:+.4}"))
            .collect();
        println!(
            "  g={} t={}: {}   ({} treated vs {} control{})",
            cell.cohort,
            cell.period,
            effects.join(", "),
            cell.n_treated,
            cell.n_control,
            if cell.renormalized_histories > 0 {
                format!(", {} histories renormalized", cell.renormalized_histories)
            } else {
                String::new()
            }
        );
    }
    for agg in &table.aggregate {
        let effects: Vec<String> = labels
            .iter()
            .zip(&agg.effect)
            .map(|(l, e)| format!("{l} {e:+.4}"))
            .collect();
        println!("  aggregate t={}: {}", agg.period, effects.join(", "));
    }
    let mut out = Report::new(&r.out);
    out.add_json("staggered.json", &table)?;
    out.add_csv(
        "staggered.csv",
        "g,t,category,att,n_treated,n_control,mode",
        &rows,
    );
    print_manifest(&out.write()?, &r.out);
    Ok(())
}

enum AnySpec {
    Mixture(DgpSpec),
    Staggered(StaggeredDgpSpec),
}

fn load_spec(path: &Path) -> Result<AnySpec> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("spec {}: {e}", path.display())))?;
    if value.get("params").is_some() {
        Ok(AnySpec::Mixture(DgpSpec::from_json(&text)?))
    } else if value.get("cohorts").is_some() {
        let spec: StaggeredDgpSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("spec {}: {e}", path.display())))?;
        spec.validate()?;
        Ok(AnySpec::Staggered(spec))
    } else {
        Err(Error::Config(format!(
            "spec {}: neither a mixture spec (no \"params\" key) nor a staggered spec (no \"cohorts\" key)",
            path.display()
        )))
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    let seed = args
        .seed
        .or(file.seed)
        .map(Ok)
        .or_else(|| env_seed().transpose())
        .transpose()?;
    let out = args.out.clone().or(file.out).unwrap_or_else(|| ".".into());
    let workers = args.workers.or(file.workers);
    let mut spec = load_spec(&args.spec)?;
    match &mut spec {
        AnySpec::Mixture(s) => {
            if let Some(n) = args.n {
                s.n = n;
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
        }
        AnySpec::Staggered(s) => {
            if let Some(n) = args.n {
                s.n = n;
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
        }
    }
    with_workers(workers, || {
        let ds = match &spec {
            AnySpec::Mixture(s) => dgp::simulate(s)?.0,
            AnySpec::Staggered(s) => dgp::simulate_staggered(s)?,
        };
        println!("simulated panel: {}", describe_panel(&ds));
        if let AnySpec::Mixture(s) = &spec {
            match dgp::true_att(s) {
                Ok(truth) => {
                    println!("population ATT implied by the spec:");
                    print_series(&ds, &truth.aggregate);
                }
                Err(Error::EnumerationTooLarge { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        let is_file = out.extension().is_some_and(|e| e == "csv");
        if is_file {
            ds.write_csv_path(&out)?;
            println!("wrote {}", out.display());
        } else {
            let mut bytes = Vec::new();
            ds.write_csv(&mut bytes)?;
            let mut report = Report::new(&out);
            report.files.push(("simulate.csv".to_string(), bytes));
            print_manifest(&report.write()?, &out);
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_and_policy_flag_parsing() {
        let map = parse_schema_arg("unit=uid,time= month ,treated=d").unwrap();
        assert_eq!(map.unit.as_deref(), Some("uid"));
        assert_eq!(map.time.as_deref(), Some("month"));
        assert_eq!(map.treated.as_deref(), Some("d"));
        assert!(map.outcome.is_none());
        assert!(parse_schema_arg("unit").is_err());
        assert!(parse_schema_arg("panel=x").is_err());

        assert_eq!(parse_empty_cell("drop").unwrap(), EmptyCellPolicy::Drop);
        assert!(parse_empty_cell("ignore").is_err());
        assert_eq!(parse_mode("not_yet").unwrap(), ControlMode::NotYet);
    }

    #[test]
    fn config_precedence_is_flag_file_default() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.json");
        std::fs::write(
            &cfg_path,
            r#"{"lag": 2, "seed": 9, "bootstrap": {"b": 77}, "multistart": {"n_short": 12, "n_long": 3}}"#,
        )
        .unwrap();
        let args = CommonArgs {
            config: Some(cfg_path.clone()),
            lag: Some(3),
            ..CommonArgs::default()
        };
        let r = Resolved::new(&args, None).unwrap();
        assert_eq!(r.lag, 3); // flag beats file
        assert_eq!(r.seed, Some(9)); // file beats default
        assert_eq!(r.bootstrap_seed, 9); // bootstrap block inherits the seed
        assert_eq!(r.b, 77);
        assert_eq!(r.alpha, DEFAULT_ALPHA);
        assert_eq!(r.schedule.n_short, 12);
        assert_eq!(r.schedule.n_long, 3);
        assert_eq!(r.schedule.short_iters, 10); // untouched key keeps default
        assert_eq!(r.replicate_schedule.n_short, 50);
        assert_eq!(r.mode, ControlMode::Never);

        // Unknown keys are rejected.
        std::fs::write(&cfg_path, r#"{"lags": 2}"#).unwrap();
        let args = CommonArgs {
            config: Some(cfg_path),
            ..CommonArgs::default()
        };
        assert!(matches!(Resolved::new(&args, None), Err(Error::Config(_))));
    }

    #[test]
    fn report_writes_manifest_with_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = Report::new(dir.path());
        report.add_json("a.json", &serde_json::json!({"x": 1})).unwrap();
        report.add_csv("b.csv", "k,v", &["1,2".to_string()]);
        let manifest = report.write().unwrap();
        assert_eq!(manifest.files.len(), 2);
        assert_eq!(manifest.files[0].name, "a.json"); // sorted
        let a = std::fs::read_to_string(dir.path().join("a.json")).unwrap();
        assert!(a.ends_with('\n'));
        let b = std::fs::read(dir.path().join("b.csv")).unwrap();
        assert_eq!(b, b"k,v\n1,2\n");
        assert_eq!(manifest.files[1].sha256, hex_sha256(&b));
        assert!(dir.path().join("manifest.json").exists());

        // Same content, same bytes, same hashes.
        let mut again = Report::new(dir.path());
        again.add_json("a.json", &serde_json::json!({"x": 1})).unwrap();
        again.add_csv("b.csv", "k,v", &["1,2".to_string()]);
        assert_eq!(again.write().unwrap(), manifest);
    }

    #[test]
    fn number_formatting_is_shortest_roundtrip() {
        assert_eq!(fmt_num(0.125), "0.125");
        assert_eq!(fmt_num(-0.0), "0");
        assert_eq!(fmt_num(1.0 / 24.0), "0.041666666666666664");
        assert_eq!(fmt_num(1.0 / 24.0).parse::<f64>().unwrap(), 1.0 / 24.0);
    }

    #[test]
    fn usage_and_help_exit_codes() {
        assert_eq!(run(["transition-att", "--help"]), 0);
        assert_eq!(run(["transition-att", "att", "--help"]), 0);
        assert_eq!(run(["transition-att", "frobnicate"]), 64);
        assert_eq!(run(["transition-att", "att", "--lag"]), 64);
        assert_eq!(run(["transition-att", "staggered", "--mode", "sometimes"]), 64);
    }
}
