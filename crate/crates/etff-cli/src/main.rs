//! `etff` — operator entry point for the forcefield toolkit.
//!
//! Six subcommands cover the full experiment cycle: `gen-data` samples
//! labeled reference trajectories from the analytic potential, `train` fits
//! a model to a dataset manifest, `eval` scores a checkpoint, `simulate`
//! runs dynamics under either potential, `calibrate` fits the energy line,
//! and `stability` scans a trajectory for collapse.
//!
//! Every run echoes its fully-resolved configuration as one JSON line to
//! stderr before doing any work, so logs double as reproduction recipes.
//! Defaults can be supplied by a flat `key = value` file via `--config`;
//! explicit flags always override the file. Exit codes: 0 success, 2 bad
//! flags or configuration, 3 runtime failure, 4 malformed input file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use etff_core::calibrate::{
    self, CalibrationConfig, CalibrationError, CalibrationModel, TaylorSign,
};
use etff_core::io::{read_extxyz, write_extxyz, DatasetManifest, IoError, Role};
use etff_core::md::{simulate_observed, MdError, SimConfig, Thermostat, VelocityInit};
use etff_core::metrics::{self, rmsd, stability_series, MetricsError};
use etff_core::model::{Model, ModelConfig, ModelError, ModelProvider};
use etff_core::oracle::{
    builtin_molecule, builtin_names, generate_reference_trajectory, initial_conformation,
    MoleculeSpec, OracleError, OraclePotential, ReferenceConfig,
};
use etff_core::train::{self, write_log_csv, Objective, TrainConfig, TrainError};
use etff_core::{ChemError, Conformation, ElementTable, Trajectory};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

// ---------------------------------------------------------------------------
// Flags
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "etff",
    version,
    about = "Neural forcefield toolkit: reference data, training, dynamics, \
             calibration and stability analysis"
)]
struct Cli {
    /// RNG seed for every stochastic stage (flag > config file > 0).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel force evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Flat `key = value` file supplying defaults for long flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a labeled reference trajectory from the analytic potential.
    GenData(GenDataArgs),
    /// Train a model on the `train` entries of a dataset manifest.
    Train(TrainArgs),
    /// Score a checkpoint against every entry of a dataset manifest.
    Eval(EvalArgs),
    /// Run molecular dynamics under a checkpoint or the analytic potential.
    Simulate(SimulateArgs),
    /// Fit the affine energy calibration on a labeled trajectory.
    Calibrate(CalibrateArgs),
    /// Compute the deviation/collapse indicator series of a trajectory.
    Stability(StabilityArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Built-in molecule name or path to a molecule definition file.
    #[arg(long)]
    spec: String,
    /// Sampling temperature in kelvin [default: 300].
    #[arg(long)]
    temp: Option<f64>,
    /// Integration steps; the output holds steps + 1 frames [default: 1999].
    #[arg(long)]
    steps: Option<usize>,
    /// Timestep in femtoseconds [default: 0.5].
    #[arg(long)]
    dt: Option<f64>,
    /// Output extended-XYZ path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest; only entries with role `train` are consumed.
    #[arg(long)]
    data_manifest: PathBuf,
    /// Where the best-validation checkpoint is written.
    #[arg(long)]
    out_ckpt: PathBuf,
    /// Optional step/loss/validation CSV log.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Loss objective: `force_only` or `joint` [default: force_only].
    #[arg(long)]
    objective: Option<String>,
    /// Passes over the training set [default: 3].
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate [default: 1e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// Conformations per optimizer step [default: 8].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Steps between validation passes [default: 500].
    #[arg(long)]
    val_every: Option<usize>,
    /// Fraction of each trajectory's tail held out [default: 0.05].
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Validations without improvement before a decay [default: 30].
    #[arg(long)]
    patience: Option<usize>,
    /// Learning-rate decay multiplier [default: 0.8].
    #[arg(long)]
    decay_factor: Option<f64>,
    /// Weight of the energy term under `joint` [default: 1].
    #[arg(long)]
    joint_energy_weight: Option<f64>,
    /// Global L2 gradient-norm clip [default: 100].
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Message-passing layers [default: 6].
    #[arg(long)]
    layers: Option<usize>,
    /// Feature width [default: 128].
    #[arg(long)]
    dim: Option<usize>,
    /// Attention heads [default: 8].
    #[arg(long)]
    heads: Option<usize>,
    /// Radial basis functions [default: 32].
    #[arg(long)]
    rbf: Option<usize>,
    /// Interaction cutoff in Å [default: 5].
    #[arg(long)]
    cutoff: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint to score.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset manifest; every entry is evaluated regardless of role.
    #[arg(long)]
    data: PathBuf,
    /// Per-entry force-error JSON report.
    #[arg(long)]
    report: PathBuf,
    /// Optional per-component scatter CSV (predicted vs reference forces).
    #[arg(long)]
    scatter: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Model checkpoint to drive the dynamics.
    #[arg(long, conflicts_with = "oracle")]
    ckpt: Option<PathBuf>,
    /// Drive the dynamics with the analytic potential instead.
    #[arg(long)]
    oracle: bool,
    /// Built-in molecule name or path to a molecule definition file.
    #[arg(long)]
    spec: String,
    /// Extended-XYZ file whose first frame replaces the relaxed start.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Integration steps [default: 1000].
    #[arg(long)]
    steps: Option<usize>,
    /// Temperature in kelvin for velocities and thermostat [default: 300].
    #[arg(long)]
    temp: Option<f64>,
    /// Timestep in femtoseconds [default: 0.5].
    #[arg(long)]
    dt: Option<f64>,
    /// Record every k-th step [default: 1].
    #[arg(long)]
    snapshot_every: Option<usize>,
    /// `on` couples a Nosé–Hoover thermostat at --temp; `off` runs NVE
    /// [default: on].
    #[arg(long)]
    thermostat: Option<String>,
    /// Output trajectory path (extended XYZ).
    #[arg(long)]
    out: PathBuf,
    /// Optional per-snapshot energy/temperature/RMSD CSV.
    #[arg(long)]
    energy_csv: Option<PathBuf>,
    /// Optional calibration JSON applied to reported model energies.
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Model checkpoint whose pseudo-energy is calibrated.
    #[arg(long)]
    ckpt: PathBuf,
    /// Labeled trajectory; its first frame anchors the energy estimate.
    #[arg(long)]
    traj: PathBuf,
    /// Fit intervals; m + 1 frames are sampled [default: 8].
    #[arg(long)]
    m: Option<usize>,
    /// Sign convention of the first-order update: `plus` or `minus`
    /// [default: plus].
    #[arg(long)]
    taylor_sign: Option<String>,
    /// Output calibration JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StabilityArgs {
    /// Trajectory to scan (extended XYZ).
    #[arg(long)]
    traj: PathBuf,
    /// Rolling window length of the collapse indicator [default: 200].
    #[arg(long)]
    p: Option<usize>,
    /// Per-frame deviation/indicator CSV.
    #[arg(long)]
    report: PathBuf,
    /// Optional JSON summary (frames, window, verdict).
    #[arg(long)]
    summary: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

/// Failures grouped by exit code: bad flags or configuration (2), malformed
/// input files (4), and everything that goes wrong at runtime (3). Flag
/// syntax errors never reach this type — clap exits with code 2 itself.
#[derive(Debug)]
enum CliError {
    Config(String),
    Parse(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Parse(_) => 4,
            CliError::Runtime(_) => 3,
        }
    }

    /// Prefixes the message with the file (or other subject) it concerns.
    fn context(self, subject: impl Display) -> CliError {
        match self {
            CliError::Config(m) => CliError::Config(format!("{subject}: {m}")),
            CliError::Parse(m) => CliError::Parse(format!("{subject}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{subject}: {m}")),
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            CliError::Parse(msg) => write!(f, "cannot parse input: {msg}"),
            CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Parse { .. } | IoError::InconsistentSpecies { .. } => {
                CliError::Parse(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Parse { .. } => CliError::Parse(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BadConfig(_) => CliError::Config(e.to_string()),
            // A checkpoint that fails to load is a malformed input file.
            ModelError::Checkpoint(_) | ModelError::Json(_) => CliError::Parse(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::Json(_) => CliError::Parse(e.to_string()),
            CalibrationError::Model(m) => CliError::from(m),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<MdError> for CliError {
    fn from(e: MdError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ChemError> for CliError {
    fn from(e: ChemError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Config file and flag resolution
// ---------------------------------------------------------------------------

/// Defaults loaded from `--config`: one `key = value` per line, `#` comments,
/// keys named after long flags. Keys for other subcommands are tolerated so
/// one file can describe a whole experiment.
struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self(BTreeMap::new()));
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "config file line {}: expected `key = value`, got `{raw}`",
                    idx + 1
                )));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| {
                CliError::Config(format!("config key `{key}`: cannot parse `{raw}`: {e}"))
            }),
        }
    }
}

/// Flag beats config file beats built-in default.
fn resolve<T: FromStr>(
    flag: Option<T>,
    file: &FileConfig,
    key: &str,
    default: T,
) -> Result<T, CliError>
where
    T::Err: Display,
{
    Ok(match flag {
        Some(v) => v,
        None => file.get(key)?.unwrap_or(default),
    })
}

fn require_positive(name: &str, value: f64) -> Result<(), CliError> {
    if !(value > 0.0 && value.is_finite()) {
        return Err(CliError::Config(format!("{name} must be positive, got {value}")));
    }
    Ok(())
}

fn require_non_negative(name: &str, value: f64) -> Result<(), CliError> {
    if !(value >= 0.0 && value.is_finite()) {
        return Err(CliError::Config(format!(
            "{name} must be zero or positive, got {value}"
        )));
    }
    Ok(())
}

/// One JSON line to stderr before any work; `serde_json` maps sort their
/// keys, so the line is byte-stable for a given configuration.
fn echo(resolved: serde_json::Value) {
    eprintln!("{resolved}");
}

// ---------------------------------------------------------------------------
// Shared loading helpers
// ---------------------------------------------------------------------------

fn load_spec(arg: &str) -> Result<MoleculeSpec, CliError> {
    if let Some(spec) = builtin_molecule(arg) {
        return Ok(spec);
    }
    let path = Path::new(arg);
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "--spec `{arg}` is neither a built-in molecule ({}) nor an existing file",
            builtin_names().join(", ")
        )));
    }
    let text = std::fs::read_to_string(path)?;
    Ok(MoleculeSpec::parse(&text)?)
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    Model::load(path).map_err(|e| CliError::from(e).context(path.display()))
}

fn read_traj(path: &Path, table: &ElementTable) -> Result<Trajectory, CliError> {
    read_extxyz(path, table).map_err(|e| CliError::from(e).context(path.display()))
}

/// Manifest entries may use paths relative to the manifest file itself.
fn manifest_entry_path(manifest: &Path, entry: &Path) -> PathBuf {
    if entry.is_absolute() {
        entry.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(entry)
    }
}

fn read_manifest_trajectories(
    manifest_path: &Path,
    table: &ElementTable,
    role: Option<Role>,
) -> Result<(DatasetManifest, Vec<(String, Trajectory)>), CliError> {
    let manifest = DatasetManifest::load(manifest_path)
        .map_err(|e| CliError::from(e).context(manifest_path.display()))?;
    let mut out = Vec::new();
    for entry in &manifest.entries {
        if role.is_some_and(|r| r != entry.role) {
            continue;
        }
        let path = manifest_entry_path(manifest_path, &entry.path);
        out.push((entry.molecule.clone(), read_traj(&path, table)?));
    }
    Ok((manifest, out))
}

fn create_writer(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = match cli.seed {
        Some(s) => s,
        None => file.get("seed")?.unwrap_or(0),
    };
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => file.get("threads")?,
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args, &file, seed, threads),
        Command::Train(args) => cmd_train(args, &file, seed, threads),
        Command::Eval(args) => cmd_eval(args, &file, seed, threads),
        Command::Simulate(args) => cmd_simulate(args, &file, seed, threads),
        Command::Calibrate(args) => cmd_calibrate(args, &file, seed, threads),
        Command::Stability(args) => cmd_stability(args, &file, seed, threads),
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cmd_gen_data(
    args: GenDataArgs,
    file: &FileConfig,
    seed: u64,
    threads: Option<usize>,
) -> Result<(), CliError> {
    let temp = resolve(args.temp, file, "temp", 300.0)?;
    let steps = resolve(args.steps, file, "steps", 1999)?;
    let dt = resolve(args.dt, file, "dt", 0.5)?;
    require_non_negative("--temp", temp)?;
    require_positive("--dt", dt)?;
    echo(json!({
        "command": "gen-data",
        "spec": args.spec,
        "temp": temp,
        "steps": steps,
        "dt": dt,
        "out": args.out,
        "seed": seed,
        "threads": threads,
    }));

    let table = ElementTable::standard();
    let spec = load_spec(&args.spec)?;
    let config = ReferenceConfig {
        n_frames: steps + 1,
        timestep_fs: dt,
        temperature_k: temp,
        seed,
    };
    let traj = generate_reference_trajectory(&spec, &table, &config)?;
    write_extxyz(&traj, &args.out, &table)?;
    println!("wrote {} frames to {}", traj.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn parse_objective(s: &str) -> Result<Objective, CliError> {
    match s {
        "force_only" => Ok(Objective::ForceOnly),
        "joint" => Ok(Objective::Joint),
        other => Err(CliError::Config(format!(
            "--objective must be `force_only` or `joint`, got `{other}`"
        ))),
    }
}

fn cmd_train(
    args: TrainArgs,
    file: &FileConfig,
    seed: u64,
    threads: Option<usize>,
) -> Result<(), CliError> {
    let objective_name: String = resolve(args.objective, file, "objective", "force_only".into())?;
    let objective = parse_objective(&objective_name)?;
    let epochs = resolve(args.epochs, file, "epochs", 3)?;
    let lr = resolve(args.lr, file, "lr", 1e-4)?;
    let batch_size = resolve(args.batch_size, file, "batch-size", 8)?;
    let val_every = resolve(args.val_every, file, "val-every", 500)?;
    let val_fraction = resolve(args.val_fraction, file, "val-fraction", 0.05)?;
    let patience = resolve(args.patience, file, "patience", 30)?;
    let decay_factor = resolve(args.decay_factor, file, "decay-factor", 0.8)?;
    let joint_energy_weight =
        resolve(args.joint_energy_weight, file, "joint-energy-weight", 1.0)?;
    let grad_clip = resolve(args.grad_clip, file, "grad-clip", train::DEFAULT_GRAD_CLIP)?;
    let layers = resolve(args.layers, file, "layers", 6)?;
    let dim = resolve(args.dim, file, "dim", 128)?;
    let heads = resolve(args.heads, file, "heads", 8)?;
    let rbf = resolve(args.rbf, file, "rbf", 32)?;
    let cutoff = resolve(args.cutoff, file, "cutoff", 5.0)?;
    echo(json!({
        "command": "train",
        "data_manifest": args.data_manifest,
        "out_ckpt": args.out_ckpt,
        "metrics": args.metrics,
        "objective": objective_name,
        "epochs": epochs,
        "lr": lr,
        "batch_size": batch_size,
        "val_every": val_every,
        "val_fraction": val_fraction,
        "patience": patience,
        "decay_factor": decay_factor,
        "joint_energy_weight": joint_energy_weight,
        "grad_clip": grad_clip,
        "layers": layers,
        "dim": dim,
        "heads": heads,
        "rbf": rbf,
        "cutoff": cutoff,
        "seed": seed,
        "threads": threads,
    }));

    let table = ElementTable::standard();
    let (_, dataset) = read_manifest_trajectories(&args.data_manifest, &table, Some(Role::Train))?;
    if dataset.is_empty() {
        return Err(CliError::Config(format!(
            "manifest {} has no `train` entries",
            args.data_manifest.display()
        )));
    }

    let model_config = ModelConfig {
        n_layers: layers,
        dim,
        n_heads: heads,
        n_rbf: rbf,
        cutoff,
        n_species: table.len(),
    };
    let model = Model::initialize(model_config, seed)?;
    let train_config = TrainConfig {
        epochs,
        lr0: lr,
        decay_factor,
        patience,
        val_fraction,
        val_every,
        batch_size,
        seed,
        objective,
        joint_energy_weight,
        grad_clip,
        checkpoint: Some(args.out_ckpt.clone()),
    };
    let result = train::train(model, &dataset, &train_config)?;
    result.best.save(&args.out_ckpt)?;
    if let Some(metrics_path) = &args.metrics {
        let mut out = create_writer(metrics_path)?;
        write_log_csv(&result.log, &mut out)?;
        out.flush()?;
    }
    println!(
        "steps={} best_val_force_mae={:.12e} final_lr={:.12e} checkpoint={}",
        result.steps,
        result.best_val_mae,
        result.final_lr,
        args.out_ckpt.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(
    args: EvalArgs,
    _file: &FileConfig,
    seed: u64,
    threads: Option<usize>,
) -> Result<(), CliError> {
    echo(json!({
        "command": "eval",
        "ckpt": args.ckpt,
        "data": args.data,
        "report": args.report,
        "scatter": args.scatter,
        "seed": seed,
        "threads": threads,
    }));

    let table = ElementTable::standard();
    let model = load_model(&args.ckpt)?;
    let (manifest, dataset) = read_manifest_trajectories(&args.data, &table, None)?;

    let mut scatter = args.scatter.as_deref().map(create_writer).transpose()?;
    if let Some(out) = scatter.as_mut() {
        writeln!(out, "molecule,frame,atom,axis,pred,ref")?;
    }

    let mut rows = Vec::new();
    for (entry, (molecule, traj)) in manifest.entries.iter().zip(&dataset) {
        let (force_mae, cosine_distance) = train::evaluate_forces(&model, traj.frames())?;
        rows.push(json!({
            "molecule": molecule,
            "role": entry.role.to_string(),
            "path": entry.path,
            "frames": traj.len(),
            "force_mae": force_mae,
            "cosine_distance": cosine_distance,
        }));
        println!(
            "{molecule} ({}) frames={} force_mae={:.12e} cosine_distance={:.12e}",
            entry.role,
            traj.len(),
            force_mae,
            cosine_distance
        );
        if let Some(out) = scatter.as_mut() {
            for (frame, c) in traj.frames().iter().enumerate() {
                let reference = c.ref_forces().ok_or_else(|| {
                    CliError::Runtime(format!(
                        "{molecule} frame {frame} carries no reference forces"
                    ))
                })?;
                let pred = model.predict(c)?.forces;
                for atom in 0..pred.nrows() {
                    for axis in 0..3 {
                        writeln!(
                            out,
                            "{molecule},{frame},{atom},{axis},{:.12e},{:.12e}",
                            pred[[atom, axis]],
                            reference[[atom, axis]]
                        )?;
                    }
                }
            }
        }
    }
    if let Some(mut out) = scatter {
        out.flush()?;
    }

    let mut report = create_writer(&args.report)?;
    serde_json::to_writer_pretty(&mut report, &rows)?;
    writeln!(report)?;
    report.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct EnergyRow {
    step: usize,
    time_fs: f64,
    potential: f64,
    kinetic: f64,
    total: f64,
    temperature: f64,
    rmsd: f64,
}

fn run_dynamics<P: etff_core::md::ForceProvider>(
    provider: &mut P,
    initial: &Conformation,
    table: &ElementTable,
    config: &SimConfig,
) -> Result<(Trajectory, Vec<EnergyRow>), CliError> {
    let base = initial.positions().clone();
    let dt = config.timestep_fs;
    let every = config.snapshot_every;
    let mut rows = Vec::new();
    let traj = simulate_observed(provider, initial, table, config, |step, state| {
        if step % every == 0 {
            rows.push(EnergyRow {
                step,
                time_fs: step as f64 * dt,
                potential: state.potential_ev,
                kinetic: state.kinetic_ev,
                total: state.total_energy_ev(),
                temperature: state.temperature_k(),
                rmsd: rmsd(&state.positions, &base).expect("positions keep their shape"),
            });
        }
    })?;
    Ok((traj, rows))
}

fn cmd_simulate(
    args: SimulateArgs,
    file: &FileConfig,
    seed: u64,
    threads: Option<usize>,
) -> Result<(), CliError> {
    let steps = resolve(args.steps, file, "steps", 1000)?;
    let temp = resolve(args.temp, file, "temp", 300.0)?;
    let dt = resolve(args.dt, file, "dt", 0.5)?;
    let snapshot_every = resolve(args.snapshot_every, file, "snapshot-every", 1)?;
    let thermostat_name: String = resolve(args.thermostat, file, "thermostat", "on".into())?;
    require_non_negative("--temp", temp)?;
    require_positive("--dt", dt)?;
    let thermostat_on = match thermostat_name.as_str() {
        "on" => true,
        "off" => false,
        other => {
            return Err(CliError::Config(format!(
                "--thermostat must be `on` or `off`, got `{other}`"
            )))
        }
    };
    if args.ckpt.is_none() && !args.oracle {
        return Err(CliError::Config(
            "either --ckpt or --oracle must select the force provider".into(),
        ));
    }
    echo(json!({
        "command": "simulate",
        "ckpt": args.ckpt,
        "oracle": args.oracle,
        "spec": args.spec,
        "init": args.init,
        "steps": steps,
        "temp": temp,
        "dt": dt,
        "snapshot_every": snapshot_every,
        "thermostat": thermostat_name,
        "out": args.out,
        "energy_csv": args.energy_csv,
        "calibration": args.calibration,
        "seed": seed,
        "threads": threads,
    }));

    let table = ElementTable::standard();
    let spec = load_spec(&args.spec)?;
    let initial = match &args.init {
        Some(path) => {
            let traj = read_traj(path, &table)?;
            let first = traj.frames()[0].clone();
            if first.species() != spec.species(&table)?.as_slice() {
                return Err(CliError::Config(format!(
                    "first frame of {} does not match the species of --spec {}",
                    path.display(),
                    args.spec
                )));
            }
            first
        }
        None => initial_conformation(&spec, &table)?,
    };

    let config = SimConfig {
        n_steps: steps,
        timestep_fs: dt,
        snapshot_every,
        init: if temp > 0.0 {
            VelocityInit::MaxwellBoltzmann { temperature_k: temp, seed }
        } else {
            VelocityInit::Zero
        },
        thermostat: thermostat_on.then_some(Thermostat { temperature_k: temp, tau_fs: None }),
        source_tag: format!("sim:{}", spec.name()),
    };

    let (traj, rows) = if let Some(ckpt) = &args.ckpt {
        let model = load_model(ckpt)?;
        let mut provider = ModelProvider::new(model, spec.species(&table)?)?;
        if let Some(cal_path) = &args.calibration {
            let cal = CalibrationModel::load(cal_path)
                .map_err(|e| CliError::from(e).context(cal_path.display()))?;
            provider = provider.with_calibration(cal);
        }
        run_dynamics(&mut provider, &initial, &table, &config)?
    } else {
        if args.calibration.is_some() {
            return Err(CliError::Config(
                "--calibration applies to model energies; it cannot combine with --oracle".into(),
            ));
        }
        let mut provider = OraclePotential::new(&spec, &table)?;
        run_dynamics(&mut provider, &initial, &table, &config)?
    };

    write_extxyz(&traj, &args.out, &table)?;
    if let Some(csv_path) = &args.energy_csv {
        let mut out = create_writer(csv_path)?;
        writeln!(out, "step,time_fs,potential,kinetic,total,temperature,rmsd")?;
        for r in &rows {
            writeln!(
                out,
                "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                r.step, r.time_fs, r.potential, r.kinetic, r.total, r.temperature, r.rmsd
            )?;
        }
        out.flush()?;
    }
    let last = rows.last().expect("at least the initial snapshot is recorded");
    println!(
        "{} steps, {} frames, final_total={:.12e} eV, final_rmsd={:.12e} A -> {}",
        steps,
        traj.len(),
        last.total,
        last.rmsd,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

fn cmd_calibrate(
    args: CalibrateArgs,
    file: &FileConfig,
    seed: u64,
    threads: Option<usize>,
) -> Result<(), CliError> {
    let m = resolve(args.m, file, "m", calibrate::DEFAULT_FIT_INTERVALS)?;
    let sign_name: String = resolve(args.taylor_sign, file, "taylor-sign", "plus".into())?;
    let taylor_sign = match sign_name.as_str() {
        "plus" => TaylorSign::Plus,
        "minus" => TaylorSign::Minus,
        other => {
            return Err(CliError::Config(format!(
                "--taylor-sign must be `plus` or `minus`, got `{other}`"
            )))
        }
    };
    if m == 0 {
        return Err(CliError::Config("--m must be at least 1".into()));
    }
    echo(json!({
        "command": "calibrate",
        "ckpt": args.ckpt,
        "traj": args.traj,
        "m": m,
        "taylor_sign": sign_name,
        "out": args.out,
        "seed": seed,
        "threads": threads,
    }));

    let table = ElementTable::standard();
    let model = load_model(&args.ckpt)?;
    let traj = read_traj(&args.traj, &table)?;
    let config = CalibrationConfig { intervals: m, taylor_sign };
    let cal = calibrate::calibrate(&model, &traj, &config)?;
    cal.save(&args.out)?;
    println!(
        "w={:.12e} b={:.12e} fit_residual_mae={:.12e} -> {}",
        cal.w,
        cal.b,
        cal.fit_residual_mae,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// stability
// ---------------------------------------------------------------------------

fn cmd_stability(
    args: StabilityArgs,
    file: &FileConfig,
    seed: u64,
    threads: Option<usize>,
) -> Result<(), CliError> {
    let p = resolve(args.p, file, "p", metrics::DEFAULT_WINDOW)?;
    echo(json!({
        "command": "stability",
        "traj": args.traj,
        "p": p,
        "report": args.report,
        "summary": args.summary,
        "seed": seed,
        "threads": threads,
    }));

    let table = ElementTable::standard();
    let traj = read_traj(&args.traj, &table)?;
    let report = stability_series(&traj, p)?;
    let mut out = create_writer(&args.report)?;
    report.write_csv(&mut out)?;
    out.flush()?;
    if let Some(summary_path) = &args.summary {
        let mut out = create_writer(summary_path)?;
        serde_json::to_writer_pretty(&mut out, &report.summary())?;
        writeln!(out)?;
        out.flush()?;
    }
    match report.collapse_step {
        Some(step) => println!("collapse detected at frame {step} (window {p})"),
        None => println!("no collapse over {} frames (window {p})", traj.len()),
    }
    Ok(())
}
