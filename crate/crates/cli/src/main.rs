//! Command line front end: scenario ingestion, dispatch, CSV emission.
//!
//! Exit codes: 0 success, 1 usage error (arguments, files, schema), 2
//! numerical failure (no lock, blow-up, fold search failure). Every verb
//! prints a one-line summary to stdout; bulk data goes to `--out` files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;

use magnonlink::dynamics::{
    extract_steady_state, integrate, write_trace_csv, DynamicsError, IntegrationSpec,
};
use magnonlink::experiments::{
    default_linewidth, hysteresis_sweep, preset, sigma_sweep, spectra_map, write_map_csv,
    write_sigma_csv, write_sweep_csv, ExperimentError, Scenario, ScenarioJson, SweepDirection,
    SweepTrace, PRESET_NAMES,
};
use magnonlink::fitting::{
    fit_dispersion, read_dispersion_csv, FitError, FitOptions, FitSetup, FreeParam,
};
use magnonlink::model::{max_strong_coupling_distance, CouplingMode, DistanceBudget, ModelError};
use magnonlink::sync::{dispersion_curve, fold_points, theta_interval, GainSettings, SyncError};

#[derive(Parser)]
#[command(
    name = "magnonlink",
    version,
    about = "Gain-driven cavity magnonics over a traveling-wave link: \
             synchronization branches, hysteresis, link budgets, and fits"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve every synchronization branch over the scenario's detuning grid
    Dispersion {
        #[command(flatten)]
        source: Source,
        /// Output CSV path
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Quasi-static hysteresis sweep with jump detection
    Sweep {
        #[command(flatten)]
        source: Source,
        /// Output CSV path (selected branch per grid point)
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Also write a spectral map (rows = detunings, columns = probe MHz);
        /// with a both-ways sweep the direction is suffixed to the stem
        #[arg(long, value_name = "FILE")]
        map: Option<PathBuf>,
        /// Lorentzian linewidth for the map, MHz (default: cavity line / 2.8e4)
        #[arg(long, value_name = "MHZ")]
        linewidth: Option<f64>,
    },
    /// Integrate the equations of motion and dump the envelope trace
    Timetrace {
        #[command(flatten)]
        source: Source,
        /// Output CSV path (t_us, re_a, im_a, re_m, im_m)
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Detuning of the magnon line from the cavity, MHz
        /// (default: the scenario's nu_m - nu_c)
        #[arg(long, value_name = "MHZ", allow_negative_numbers = true)]
        delta: Option<f64>,
        /// Integration time, microseconds
        #[arg(long, value_name = "US", default_value_t = 30.0)]
        duration: f64,
        /// Output samples (the trace has samples + 1 rows)
        #[arg(long, default_value_t = 8192)]
        samples: usize,
        /// Initial cavity/magnon seed amplitude
        #[arg(long, value_name = "AMP", default_value_t = 1e-3)]
        kick: f64,
    },
    /// Sweep the link transmission and report the derived couplings
    Sigma {
        #[command(flatten)]
        source: Source,
        /// Output CSV path
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Number of transmission points on [0, 1]
        #[arg(long, default_value_t = 41)]
        points: usize,
    },
    /// Longest cable that keeps the link strongly coupled
    Distance {
        #[command(flatten)]
        source: Source,
        /// Evaluate the cable length at this transmission instead of
        /// solving for the strong-coupling threshold
        #[arg(long, value_name = "SIGMA")]
        sigma: Option<f64>,
        /// Which coupling must stay strong
        #[arg(long, value_enum, default_value_t = ModeArg::Coherent)]
        mode: ModeArg,
    },
    /// Fit couplings to a measured dispersion CSV
    Fit {
        #[command(flatten)]
        source: Source,
        /// Dispersion data CSV (delta_mhz, nu_s_mhz, branch)
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Comma-separated free parameters:
        /// direct, coherent, dissipative, damping, nu_c
        #[arg(
            long,
            value_name = "LIST",
            default_value = "direct,coherent,dissipative,damping"
        )]
        free: String,
        /// Simplex restarts (the first starts at the scenario template)
        #[arg(long)]
        starts: Option<usize>,
        /// Seed for the start perturbations
        #[arg(long)]
        seed: Option<u64>,
        /// Optional JSON output with the full fit result
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// List the built-in reference scenarios
    Presets,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum ModeArg {
    Coherent,
    Dissipative,
}

impl From<ModeArg> for CouplingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Coherent => CouplingMode::Coherent,
            ModeArg::Dissipative => CouplingMode::Dissipative,
        }
    }
}

/// Scenario source: exactly one of a built-in preset or a JSON file.
#[derive(Args)]
struct Source {
    /// Built-in scenario name (see `magnonlink presets`)
    #[arg(long, value_name = "NAME", conflicts_with = "scenario")]
    preset: Option<String>,
    /// Flat JSON scenario file; unknown keys are rejected
    #[arg(long, value_name = "FILE")]
    scenario: Option<PathBuf>,
}

impl Source {
    /// Loads the scenario plus a short label for summary lines.
    fn load(&self) -> Result<(Scenario<f64>, String), CliError> {
        match (&self.preset, &self.scenario) {
            (Some(name), None) => Ok((preset(name)?, name.clone())),
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
                let parsed: ScenarioJson = serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                let label = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string());
                Ok((parsed.into_scenario()?, label))
            }
            _ => Err(CliError::Usage(
                "exactly one of --preset or --scenario is required".into(),
            )),
        }
    }
}

enum CliError {
    Usage(String),
    Numerical(String),
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::UnknownPreset(_)
            | ExperimentError::Grid(_)
            | ExperimentError::GridSpec(_)
            | ExperimentError::Model(_) => CliError::Usage(e.to_string()),
            ExperimentError::NoSynchronization | ExperimentError::Sync(_) => {
                CliError::Numerical(e.to_string())
            }
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<SyncError> for CliError {
    fn from(e: SyncError) -> Self {
        match e {
            // Scenario values that describe an unphysical system are input
            // errors, same as typing the dressed value directly.
            SyncError::InvalidDamping { .. }
            | SyncError::NonFinite { .. }
            | SyncError::BadGain { .. } => CliError::Usage(e.to_string()),
            SyncError::Decoupled | SyncError::OutsideWindow { .. } => {
                CliError::Numerical(e.to_string())
            }
        }
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::NonFinite { .. }
            | DynamicsError::NonPositive { .. }
            | DynamicsError::TooFewSamples { .. }
            | DynamicsError::WindowTooLong { .. }
            | DynamicsError::Model(_) => CliError::Usage(e.to_string()),
            DynamicsError::Blowup { .. }
            | DynamicsError::StepUnderflow { .. }
            | DynamicsError::StepBudget { .. }
            | DynamicsError::InconsistentSolution { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Sync(_) => CliError::Numerical(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(format!("output write failed: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code: u8 = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    cap_threads();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Applies MAGNONLINK_THREADS as a cap on the global worker pool.
fn cap_threads() {
    if let Ok(v) = std::env::var("MAGNONLINK_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => eprintln!("ignoring MAGNONLINK_THREADS={v}: not a positive integer"),
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Dispersion { source, out } => dispersion_cmd(&source, &out),
        Cmd::Sweep {
            source,
            out,
            map,
            linewidth,
        } => sweep_cmd(&source, &out, map.as_deref(), linewidth),
        Cmd::Timetrace {
            source,
            out,
            delta,
            duration,
            samples,
            kick,
        } => timetrace_cmd(&source, &out, delta, duration, samples, kick),
        Cmd::Sigma {
            source,
            out,
            points,
        } => sigma_cmd(&source, &out, points),
        Cmd::Distance {
            source,
            sigma,
            mode,
        } => distance_cmd(&source, sigma, mode),
        Cmd::Fit {
            source,
            data,
            free,
            starts,
            seed,
            out,
        } => fit_cmd(&source, &data, &free, starts, seed, out.as_deref()),
        Cmd::Presets => presets_cmd(),
    }
}

/// Opens an output file after checking its parent directory exists.
fn create_out(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            return Err(CliError::Usage(format!(
                "output directory {} does not exist; create it first",
                parent.display()
            )));
        }
    }
    let file = File::create(path)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

/// Normalizes -0.0 for display.
fn z(v: f64) -> f64 {
    v + 0.0
}

/// Rounds derived parameters for the presets listing, where float noise
/// (cos(pi/2), back-solved rates) would obscure the quoted values.
fn disp(v: f64) -> f64 {
    (v * 1e9).round() / 1e9 + 0.0
}

fn dispersion_cmd(source: &Source, out: &Path) -> Result<(), CliError> {
    let (sc, label) = source.load()?;
    sc.validate()?;
    let c = sc.coupling()?;
    let gain = GainSettings::from(&sc.params);
    let curve = dispersion_curve(&sc.delta_grid, &c, &gain)?;

    let mut w = create_out(out)?;
    writeln!(
        w,
        "delta_mhz,branch,nu_s_mhz,theta_rad,ratio,cavity_amp,magnon_amp,stable"
    )?;
    for set in &curve {
        for (i, b) in set.branches.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                set.delta,
                i,
                sc.params.nu_c + b.nu_s,
                b.theta,
                b.ratio,
                b.cavity_amp,
                b.magnon_amp,
                b.stable
            )?;
        }
    }
    w.flush()?;

    let folds = fold_points(&c)?;
    let fold_note = if folds.exists {
        format!("folds at {:.3}/{:.3} MHz", folds.delta_down, folds.delta_up)
    } else {
        "no folds".to_string()
    };
    println!(
        "dispersion {label}: {} detunings, {} -> {}",
        curve.len(),
        fold_note,
        out.display()
    );
    Ok(())
}

/// Builds `<stem>_<direction><ext>` when a both-ways sweep writes two maps.
fn direction_path(base: &Path, dir: SweepDirection, multi: bool) -> PathBuf {
    if !multi {
        return base.to_path_buf();
    }
    let stem = base.file_stem().unwrap_or_default().to_string_lossy();
    let suffix = match dir {
        SweepDirection::Up => "up",
        SweepDirection::Down => "down",
        SweepDirection::Both => "both",
    };
    let name = match base.extension() {
        Some(ext) => format!("{stem}_{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{suffix}"),
    };
    base.with_file_name(name)
}

fn sweep_cmd(
    source: &Source,
    out: &Path,
    map: Option<&Path>,
    linewidth: Option<f64>,
) -> Result<(), CliError> {
    let (sc, label) = source.load()?;
    let traces = hysteresis_sweep(&sc)?;

    let mut w = create_out(out)?;
    write_sweep_csv(&traces, &mut w)?;
    w.flush()?;

    let mut notes = Vec::new();
    for trace in &traces {
        let (word, value) = match trace.direction {
            SweepDirection::Up => ("up jump", trace.jumps.delta_up),
            SweepDirection::Down => ("down jump", trace.jumps.delta_down),
            SweepDirection::Both => ("jump", f64::NAN),
        };
        if trace.jumps.exists {
            notes.push(format!("{word} at {value} MHz"));
        } else {
            notes.push(format!("no {word}"));
        }
    }

    if let Some(map_base) = map {
        let lw = match linewidth {
            Some(v) if v > 0.0 => v,
            Some(v) => {
                return Err(CliError::Usage(format!(
                    "--linewidth must be positive, got {v}"
                )))
            }
            None => default_linewidth(sc.params.nu_c),
        };
        for trace in &traces {
            let path = direction_path(map_base, trace.direction, traces.len() > 1);
            write_one_map(trace, lw, &path)?;
        }
        notes.push(format!(
            "maps (linewidth {lw:.4} MHz) -> {}",
            map_base.display()
        ));
    }

    println!("sweep {label}: {} -> {}", notes.join(", "), out.display());
    Ok(())
}

fn write_one_map(trace: &SweepTrace<f64>, linewidth: f64, path: &Path) -> Result<(), CliError> {
    let centers: Vec<f64> = trace
        .points
        .iter()
        .map(|pt| trace.nu_c + pt.selected.nu_s)
        .collect();
    let lo = centers.iter().cloned().fold(f64::INFINITY, f64::min) - 8.0 * linewidth;
    let hi = centers.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 8.0 * linewidth;
    let cols = 401;
    let nu_grid: Vec<f64> = (0..cols)
        .map(|j| lo + (hi - lo) * j as f64 / (cols - 1) as f64)
        .collect();
    let map = spectra_map(trace, &nu_grid, linewidth)?;
    let mut w = create_out(path)?;
    write_map_csv(trace, &nu_grid, &map, &mut w)?;
    w.flush()?;
    Ok(())
}

fn timetrace_cmd(
    source: &Source,
    out: &Path,
    delta: Option<f64>,
    duration: f64,
    samples: usize,
    kick: f64,
) -> Result<(), CliError> {
    let (sc, label) = source.load()?;
    let c = sc.coupling()?;
    let delta = delta.unwrap_or(sc.params.nu_m - sc.params.nu_c);
    if !kick.is_finite() || kick <= 0.0 {
        return Err(CliError::Usage(format!(
            "--kick must be a positive amplitude, got {kick}"
        )));
    }

    let mut spec = IntegrationSpec::new(duration);
    spec.samples = samples;
    // Deterministic, slightly lopsided seed: breaks the symmetry that would
    // otherwise park the state on an unstable balanced branch.
    let a0 = Complex64::new(kick, 0.0);
    let m0 = Complex64::new(0.6 * kick, -0.4 * kick);
    let trace = integrate(&sc.params, &c, delta, a0, m0, &spec)?;

    let mut w = create_out(out)?;
    write_trace_csv(&trace, &mut w)?;
    w.flush()?;

    let window = theta_interval(&c).ok();
    let est = extract_steady_state(&trace, duration / 4.0, window)?;
    let steady = if est.converged {
        if est.theta.is_nan() {
            format!(
                "steady nu_s = {} MHz, |a| = {:.4} (magnon dark)",
                est.nu_s, est.cavity_amp
            )
        } else {
            format!(
                "steady nu_s = {} MHz, theta = {:.4} rad, |a| = {:.4}",
                est.nu_s, est.theta, est.cavity_amp
            )
        }
    } else {
        format!(
            "not settled after {duration} us (drift {:.2e} MHz)",
            est.drift
        )
    };
    println!(
        "timetrace {label}: delta = {delta} MHz, {} -> {}",
        steady,
        out.display()
    );
    Ok(())
}

fn sigma_cmd(source: &Source, out: &Path, points: usize) -> Result<(), CliError> {
    let (sc, label) = source.load()?;
    if points < 2 {
        return Err(CliError::Usage(format!(
            "--points must be at least 2, got {points}"
        )));
    }
    let grid: Vec<f64> = (0..points)
        .map(|i| i as f64 / (points - 1) as f64)
        .collect();
    let swept = sigma_sweep(&sc, &grid)?;
    let mut w = create_out(out)?;
    write_sigma_csv(&swept, &mut w)?;
    w.flush()?;

    let coherent =
        max_strong_coupling_distance(&sc.params, &sc.link, CouplingMode::Coherent, None)?;
    let dissipative =
        max_strong_coupling_distance(&sc.params, &sc.link, CouplingMode::Dissipative, None)?;
    println!(
        "sigma {label}: {points} points, coherent {}, dissipative {} -> {}",
        budget_phrase(&coherent),
        budget_phrase(&dissipative),
        out.display()
    );
    Ok(())
}

fn budget_phrase(b: &DistanceBudget<f64>) -> String {
    match b {
        DistanceBudget::Threshold { sigma, length_m } => {
            format!("strong out to {length_m:.1} m (sigma {sigma})")
        }
        DistanceBudget::Solved { sigma, length_m } => {
            format!("strong out to {length_m:.1} m (threshold sigma {sigma:.4})")
        }
        DistanceBudget::Unbounded => "strong at any length".to_string(),
        DistanceBudget::NeverStrong => "never strong".to_string(),
    }
}

fn distance_cmd(source: &Source, sigma: Option<f64>, mode: ModeArg) -> Result<(), CliError> {
    let (sc, label) = source.load()?;
    let budget = max_strong_coupling_distance(&sc.params, &sc.link, mode.into(), sigma)?;
    let mode_word = match mode {
        ModeArg::Coherent => "coherent",
        ModeArg::Dissipative => "dissipative",
    };
    match budget {
        DistanceBudget::Threshold { sigma, length_m } => println!(
            "distance {label}: {length_m:.1} m at sigma = {sigma} ({mode_word})"
        ),
        DistanceBudget::Solved { sigma, length_m } => println!(
            "distance {label}: {length_m:.1} m at solved threshold sigma = {sigma:.6} ({mode_word})"
        ),
        DistanceBudget::Unbounded => println!(
            "distance {label}: unbounded — {mode_word} coupling stays strong at any attenuation"
        ),
        DistanceBudget::NeverStrong => println!(
            "distance {label}: never strong — {mode_word} coupling is below threshold even at sigma = 1"
        ),
    }
    Ok(())
}

fn parse_free(list: &str) -> Result<Vec<FreeParam>, CliError> {
    let mut free = Vec::new();
    for raw in list.split(',') {
        let name = raw.trim();
        let param = match name {
            "direct" => FreeParam::Direct,
            "coherent" => FreeParam::Coherent,
            "dissipative" => FreeParam::Dissipative,
            "damping" => FreeParam::Damping,
            "nu_c" => FreeParam::NuC,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown free parameter `{other}` (expected direct, coherent, \
                     dissipative, damping, nu_c)"
                )))
            }
        };
        if free.contains(&param) {
            return Err(CliError::Usage(format!(
                "free parameter `{name}` listed twice"
            )));
        }
        free.push(param);
    }
    Ok(free)
}

fn fit_cmd(
    source: &Source,
    data_path: &Path,
    free: &str,
    starts: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (sc, label) = source.load()?;
    let file = File::open(data_path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", data_path.display())))?;
    let data = read_dispersion_csv(BufReader::new(file))?;

    let mut options = FitOptions::default();
    if let Some(n) = starts {
        if n == 0 {
            return Err(CliError::Usage("--starts must be at least 1".into()));
        }
        options.starts = n;
    }
    if let Some(s) = seed {
        options.seed = s;
    }
    let setup = FitSetup {
        template: sc.coupling()?,
        nu_c: sc.params.nu_c,
        free: parse_free(free)?,
        options,
    };
    let result = fit_dispersion(&data, &setup)?;

    if let Some(path) = out {
        let mut w = create_out(path)?;
        serde_json::to_writer_pretty(&mut w, &result)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
        writeln!(w)?;
        w.flush()?;
    }

    println!(
        "fit {label}: g = {} MHz, J = {} MHz, Gamma = {} MHz, alpha' = {} MHz, \
         nu_c = {} MHz, rms = {:.4} MHz over {} points{}",
        z(result.direct),
        z(result.coherent),
        z(result.dissipative),
        z(result.damping),
        z(result.nu_c),
        result.rms_residual,
        data.points.len(),
        if result.converged {
            ""
        } else {
            " (not converged)"
        }
    );
    Ok(())
}

fn presets_cmd() -> Result<(), CliError> {
    for name in PRESET_NAMES {
        let sc: Scenario<f64> = preset(name)?;
        let c = sc.coupling()?;
        let first = *sc.delta_grid.first().unwrap();
        let last = *sc.delta_grid.last().unwrap();
        let step = sc.delta_grid.get(1).map(|d| d - first).unwrap_or(0.0);
        println!("{}", sc.name);
        println!(
            "    g = {} MHz, J = {} MHz, Gamma = {} MHz, alpha' = {} MHz \
             (phi = {:.4} rad, sigma = {})",
            disp(c.direct),
            disp(c.coherent),
            disp(c.dissipative),
            disp(c.damping()),
            sc.link.phi,
            sc.link.sigma
        );
        println!(
            "    nu_c = {} MHz, kappa = {} MHz, beta = {} MHz, pump = {} MHz, \
             grid {}..{} MHz step {}, {} dB/m + {} m baseline",
            sc.params.nu_c,
            sc.params.kappa,
            sc.params.beta,
            sc.params.gain,
            first,
            last,
            step,
            sc.link.atten_db_per_m,
            sc.link.baseline_m
        );
    }
    Ok(())
}
