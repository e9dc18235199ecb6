//! Measurement protocols built on the steady-state solver: hysteresis
//! sweeps with history-dependent branch selection, transmission sweeps,
//! figure-style spectral maps, and the named parameter presets.
//!
//! Sweeps are treated as quasi-static: each grid point is solved
//! independently and the branch is chosen by continuity in the locked
//! phase, which is single-valued along a branch (the frequency is not).

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    coupling_from_link, equivalent_cable_length, strong_coupling_report, CouplingReport,
    CouplingSet, LinkSettings, ModelError, SystemParams,
};
use crate::real::Real;
use crate::sync::{solve_branches, FoldPoints, GainSettings, SyncError, SyncSolution};

#[derive(Debug, Error, PartialEq)]
pub enum ExperimentError {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("no synchronization: the modes are uncoupled or never lock")]
    NoSynchronization,
    #[error("bad detuning grid: {0}")]
    Grid(&'static str),
    #[error("scenario must provide either `delta_mhz` or the start/stop/step trio, not {0}")]
    GridSpec(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sync(#[from] SyncError),
}

/// Traversal order of the detuning grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepDirection {
    Up,
    Down,
    #[default]
    Both,
}

/// A fully specified numerical experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Scenario<T> {
    pub name: String,
    pub params: SystemParams<T>,
    pub link: LinkSettings<T>,
    /// Detuning grid, MHz; strictly increasing for `Up`/`Both`, strictly
    /// decreasing for `Down`.
    pub delta_grid: Vec<T>,
    pub sweep: SweepDirection,
}

impl<T: Real> Scenario<T> {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.params.validate()?;
        self.link.validate()?;
        if self.delta_grid.is_empty() {
            return Err(ExperimentError::Grid("grid is empty"));
        }
        if self.delta_grid.iter().any(|d| !d.is_finite()) {
            return Err(ExperimentError::Grid("grid contains non-finite values"));
        }
        let ascending = !matches!(self.sweep, SweepDirection::Down);
        for pair in self.delta_grid.windows(2) {
            let ok = if ascending {
                pair[1] > pair[0]
            } else {
                pair[1] < pair[0]
            };
            if !ok {
                return Err(ExperimentError::Grid(
                    "grid must be strictly monotone in the sweep direction",
                ));
            }
        }
        Ok(())
    }

    /// Couplings implied by the scenario's system and link settings.
    pub fn coupling(&self) -> Result<CouplingSet<T>, ExperimentError> {
        Ok(coupling_from_link(&self.params, &self.link)?)
    }
}

/// One solved grid point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct SweepPoint<T> {
    pub delta: T,
    /// The branch the quasi-static sweep sits on; always stable.
    pub selected: SyncSolution<T>,
    /// Every root at this detuning, stable or not, ordered by phase.
    pub branches: Vec<SyncSolution<T>>,
}

/// A single directional pass over the detuning grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct SweepTrace<T> {
    pub direction: SweepDirection,
    pub points: Vec<SweepPoint<T>>,
    /// Observed jump detunings, recorded at the midpoint between the last
    /// grid point on the vanished branch and the first after it. An up
    /// sweep can only populate `delta_up`, a down sweep only `delta_down`;
    /// the unobserved side stays NaN and `exists` flags any jump at all.
    pub jumps: FoldPoints<T>,
    /// Cavity frequency, MHz, for converting offsets to absolute lines.
    pub nu_c: T,
}

/// Phase distance beyond which branch continuity is considered broken.
const JUMP_THETA_RAD: f64 = 0.5;

fn sweep_one_direction<T: Real>(
    sc: &Scenario<T>,
    c: &CouplingSet<T>,
    gain: &GainSettings<T>,
    direction: SweepDirection,
) -> Result<SweepTrace<T>, ExperimentError> {
    let grid: Vec<T> = match (direction, sc.sweep) {
        // A `Both` scenario stores the grid ascending; the down pass
        // traverses it in reverse.
        (SweepDirection::Down, SweepDirection::Both) => {
            sc.delta_grid.iter().rev().copied().collect()
        }
        _ => sc.delta_grid.clone(),
    };
    let mut points: Vec<SweepPoint<T>> = Vec::with_capacity(grid.len());
    let mut previous: Option<(T, T)> = None; // (delta, theta)
    let mut jump: Option<T> = None;

    for &delta in &grid {
        let branches = match solve_branches(delta, c, gain) {
            Ok(b) => b,
            Err(SyncError::Decoupled) => return Err(ExperimentError::NoSynchronization),
            Err(e) => return Err(e.into()),
        };
        let stable: Vec<&SyncSolution<T>> = branches.iter().filter(|s| s.stable).collect();
        if stable.is_empty() {
            continue;
        }
        let selected = match previous {
            None => {
                // The sweep enters from outside the grid, where exactly one
                // branch survives: the detuning balance diverges to -inf at
                // the low-phase end of the window and +inf at the high end,
                // so an up sweep arrives on the lowest-phase branch and a
                // down sweep on the highest.
                match direction {
                    SweepDirection::Down => **stable.last().unwrap(),
                    _ => **stable.first().unwrap(),
                }
            }
            Some((prev_delta, prev_theta)) => {
                let nearest = **stable
                    .iter()
                    .min_by(|a, b| {
                        (a.theta - prev_theta)
                            .abs()
                            .partial_cmp(&(b.theta - prev_theta).abs())
                            .unwrap()
                    })
                    .unwrap();
                if (nearest.theta - prev_theta).abs() > T::of(JUMP_THETA_RAD) && jump.is_none() {
                    jump = Some((prev_delta + delta) / T::of(2.0));
                }
                nearest
            }
        };
        previous = Some((delta, selected.theta));
        points.push(SweepPoint {
            delta,
            selected,
            branches,
        });
    }

    if points.is_empty() {
        return Err(ExperimentError::NoSynchronization);
    }
    let nan = T::nan();
    let jumps = match direction {
        SweepDirection::Down => FoldPoints {
            delta_down: jump.unwrap_or(nan),
            delta_up: nan,
            exists: jump.is_some(),
        },
        _ => FoldPoints {
            delta_down: nan,
            delta_up: jump.unwrap_or(nan),
            exists: jump.is_some(),
        },
    };
    Ok(SweepTrace {
        direction,
        points,
        jumps,
        nu_c: sc.params.nu_c,
    })
}

/// Quasi-static passes over the detuning grid with history-dependent
/// branch selection. Returns one trace per direction: `[up]`, `[down]`, or
/// `[up, down]` for a `Both` scenario.
pub fn hysteresis_sweep<T: Real>(sc: &Scenario<T>) -> Result<Vec<SweepTrace<T>>, ExperimentError> {
    sc.validate()?;
    let c = sc.coupling()?;
    let gain = GainSettings::from(&sc.params);
    let directions: &[SweepDirection] = match sc.sweep {
        SweepDirection::Up => &[SweepDirection::Up],
        SweepDirection::Down => &[SweepDirection::Down],
        SweepDirection::Both => &[SweepDirection::Up, SweepDirection::Down],
    };
    directions
        .iter()
        .map(|&d| sweep_one_direction(sc, &c, &gain, d))
        .collect()
}

/// Per-transmission coupling budget along a link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct SigmaPoint<T> {
    pub sigma: T,
    pub coupling: CouplingSet<T>,
    pub report: CouplingReport<T>,
    /// Cable length with this transmission, meters; infinite at sigma = 0.
    pub cable_m: T,
}

/// Evaluates couplings, strong-coupling criteria, and the equivalent cable
/// length on a grid of transmission amplitudes.
pub fn sigma_sweep<T: Real>(
    sc: &Scenario<T>,
    sigma_grid: &[T],
) -> Result<Vec<SigmaPoint<T>>, ExperimentError> {
    sc.params.validate()?;
    sc.link.validate()?;
    let mut out = Vec::with_capacity(sigma_grid.len());
    for &sigma in sigma_grid {
        let link = LinkSettings { sigma, ..sc.link };
        let coupling = coupling_from_link(&sc.params, &link)?;
        let report = strong_coupling_report(&coupling);
        let cable_m = match equivalent_cable_length(sigma, &link) {
            Ok(l) => l,
            Err(ModelError::UnboundedLength) => T::infinity(),
            Err(e) => return Err(e.into()),
        };
        out.push(SigmaPoint {
            sigma,
            coupling,
            report,
            cable_m,
        });
    }
    Ok(out)
}

/// Default spectral linewidth: the cavity line divided by its effective
/// quality factor of 2.8e4, MHz.
pub fn default_linewidth<T: Real>(nu_c: T) -> T {
    nu_c / T::of(2.8e4)
}

/// Renders a sweep as a figure-style map: one row per grid point, one
/// column per probe frequency (absolute MHz), each row a Lorentzian of the
/// given linewidth centered on the selected line with peak height equal to
/// the cavity power.
pub fn spectra_map<T: Real>(
    sweep: &SweepTrace<T>,
    nu_grid: &[T],
    linewidth: T,
) -> Result<Vec<Vec<T>>, ExperimentError> {
    if !(linewidth > T::zero()) {
        return Err(ExperimentError::Grid("linewidth must be positive"));
    }
    Ok(sweep
        .points
        .iter()
        .map(|pt| {
            let center = sweep.nu_c + pt.selected.nu_s;
            let peak = pt.selected.cavity_amp * pt.selected.cavity_amp;
            nu_grid
                .iter()
                .map(|&nu| {
                    let x = (nu - center) / linewidth;
                    peak / (T::one() + x * x)
                })
                .collect()
        })
        .collect())
}

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 4] = [
    "positionA",
    "positionB",
    "remote_coherent",
    "remote_dissipative",
];

/// Builds one of the named reference scenarios. All four share the same
/// cavity (3.82 GHz, pump clamping beta = 85.4 MHz at twice threshold,
/// kappa = 18.7 MHz); the magnon-side rates are back-solved so the derived
/// couplings land on the quoted values at full transmission, and that
/// back-solve is recorded in the scenario name.
pub fn preset<T: Real>(name: &str) -> Result<Scenario<T>, ExperimentError> {
    let of = T::of;
    let base = SystemParams {
        nu_c: of(3820.0),
        beta: of(85.4),
        gain: of(170.8),
        saturation: of(1.0),
        kappa: of(18.7),
        nu_m: of(3820.0),
        alpha: T::zero(),
        gamma: T::zero(),
        g: T::zero(),
    };
    let link = |phi: T, sigma: f64| LinkSettings {
        phi,
        sigma: of(sigma),
        atten_db_per_m: of(0.56),
        baseline_m: of(1.0),
    };
    let grid = |half: f64, step: f64| {
        let n = (2.0 * half / step).round() as usize;
        (0..=n).map(|k| of(-half + step * k as f64)).collect()
    };
    let (full_name, params, link) = match name {
        // Direct coherent coupling at the cavity's field antinode:
        // g = 11 MHz, bare magnon damping 1.8 MHz, no traveling-wave route.
        "positionA" => (
            "positionA [g=11, alpha_eff=1.8; sigma*sqrt(kappa*gamma)=0]".to_string(),
            SystemParams {
                alpha: of(1.8),
                g: of(11.0),
                ..base
            },
            link(T::FRAC_PI_2(), 1.0),
        ),
        // Dissipative coupling at the current antinode: Gamma = 6.2 MHz and
        // dressed damping 3 MHz at sigma = 1, phi = 0, so
        // gamma = 6.2^2 / 18.7 and alpha = 3 - gamma.
        "positionB" => {
            let gamma = 6.2 * 6.2 / 18.7;
            (
                format!("positionB [Gamma=6.2, alpha_eff=3; gamma back-solved to {gamma:.6}]"),
                SystemParams {
                    alpha: of(3.0 - gamma),
                    gamma: of(gamma),
                    ..base
                },
                link(T::zero(), 1.0),
            )
        }
        // Cable-mediated coherent coupling: |J| = 7.1 MHz and dressed
        // damping 1.3 MHz at sigma = 1, phi = pi/2, so
        // gamma = 7.1^2 / 18.7 and alpha = 1.3 + gamma (the e^{i2phi}
        // feedback reduces the damping at this phase).
        "remote_coherent" => {
            let gamma = 7.1 * 7.1 / 18.7;
            (
                format!(
                    "remote_coherent [|J|=7.1, alpha_eff=1.3; gamma back-solved to {gamma:.6}]"
                ),
                SystemParams {
                    alpha: of(1.3 + gamma),
                    gamma: of(gamma),
                    ..base
                },
                link(T::FRAC_PI_2(), 1.0),
            )
        }
        // Cable-mediated dissipative coupling: Gamma = 7.4 MHz, dressed
        // damping 6.2 MHz at sigma = 1, phi = 0.
        "remote_dissipative" => {
            let gamma = 7.4 * 7.4 / 18.7;
            (
                format!(
                    "remote_dissipative [Gamma=7.4, alpha_eff=6.2; gamma back-solved to {gamma:.6}]"
                ),
                SystemParams {
                    alpha: of(6.2 - gamma),
                    gamma: of(gamma),
                    ..base
                },
                link(T::zero(), 1.0),
            )
        }
        other => return Err(ExperimentError::UnknownPreset(other.to_string())),
    };
    let sc = Scenario {
        name: full_name,
        params,
        link,
        delta_grid: grid(60.0, 0.5),
        sweep: SweepDirection::Both,
    };
    sc.validate()?;
    Ok(sc)
}

/// Flat on-disk scenario schema. Frequencies carry a `_mhz` suffix; the
/// detuning grid is either an explicit `delta_mhz` array or the
/// `delta_start_mhz`/`delta_stop_mhz`/`delta_step_mhz` trio (inclusive of
/// the endpoint, generated descending when `sweep` is `down`). Unknown
/// keys are rejected to catch typos in physics parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioJson {
    #[serde(default = "default_scenario_name")]
    pub name: String,
    pub nu_c_mhz: f64,
    pub beta_mhz: f64,
    pub gain_mhz: f64,
    #[serde(default = "default_saturation")]
    pub saturation: f64,
    pub kappa_mhz: f64,
    /// Defaults to the cavity frequency; sweeps override it via the grid.
    #[serde(default)]
    pub nu_m_mhz: Option<f64>,
    pub alpha_mhz: f64,
    pub gamma_mhz: f64,
    pub g_mhz: f64,
    pub phi_rad: f64,
    pub sigma: f64,
    #[serde(default = "default_atten")]
    pub atten_db_per_m: f64,
    #[serde(default = "default_baseline")]
    pub baseline_m: f64,
    #[serde(default)]
    pub delta_mhz: Option<Vec<f64>>,
    #[serde(default)]
    pub delta_start_mhz: Option<f64>,
    #[serde(default)]
    pub delta_stop_mhz: Option<f64>,
    #[serde(default)]
    pub delta_step_mhz: Option<f64>,
    #[serde(default)]
    pub sweep: SweepDirection,
}

fn default_scenario_name() -> String {
    "scenario".to_string()
}
fn default_saturation() -> f64 {
    1.0
}
fn default_atten() -> f64 {
    0.56
}
fn default_baseline() -> f64 {
    1.0
}

impl ScenarioJson {
    pub fn into_scenario(self) -> Result<Scenario<f64>, ExperimentError> {
        let trio = (
            self.delta_start_mhz,
            self.delta_stop_mhz,
            self.delta_step_mhz,
        );
        let delta_grid = match (self.delta_mhz, trio) {
            (Some(grid), (None, None, None)) => grid,
            (None, (Some(start), Some(stop), Some(step))) => {
                if !(step > 0.0) || !step.is_finite() {
                    return Err(ExperimentError::Grid("delta_step_mhz must be positive"));
                }
                if !(stop > start) {
                    return Err(ExperimentError::Grid(
                        "delta_stop_mhz must exceed delta_start_mhz",
                    ));
                }
                let n = ((stop - start) / step).round() as usize;
                let mut grid: Vec<f64> = (0..=n).map(|k| start + step * k as f64).collect();
                if let Some(last) = grid.last_mut() {
                    *last = last.min(stop);
                }
                grid.dedup_by(|a, b| a == b);
                if self.sweep == SweepDirection::Down {
                    grid.reverse();
                }
                grid
            }
            (None, (None, None, None)) => return Err(ExperimentError::GridSpec("neither")),
            (Some(_), _) => return Err(ExperimentError::GridSpec("both")),
            _ => return Err(ExperimentError::GridSpec("an incomplete trio")),
        };
        let sc = Scenario {
            name: self.name,
            params: SystemParams {
                nu_c: self.nu_c_mhz,
                beta: self.beta_mhz,
                gain: self.gain_mhz,
                saturation: self.saturation,
                kappa: self.kappa_mhz,
                nu_m: self.nu_m_mhz.unwrap_or(self.nu_c_mhz),
                alpha: self.alpha_mhz,
                gamma: self.gamma_mhz,
                g: self.g_mhz,
            },
            link: LinkSettings {
                phi: self.phi_rad,
                sigma: self.sigma,
                atten_db_per_m: self.atten_db_per_m,
                baseline_m: self.baseline_m,
            },
            delta_grid,
            sweep: self.sweep,
        };
        sc.validate()?;
        Ok(sc)
    }
}

fn direction_label(d: SweepDirection) -> &'static str {
    match d {
        SweepDirection::Up => "up",
        SweepDirection::Down => "down",
        SweepDirection::Both => "both",
    }
}

/// Writes sweep traces as CSV: one row per grid point with the selected
/// branch, absolute synchronization frequency, and the root multiplicity.
pub fn write_sweep_csv<T: Real, W: Write>(traces: &[SweepTrace<T>], out: &mut W) -> io::Result<()> {
    writeln!(
        out,
        "direction,delta_mhz,nu_s_mhz,theta_rad,ratio,stable,branch_count"
    )?;
    for trace in traces {
        for pt in &trace.points {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                direction_label(trace.direction),
                pt.delta,
                trace.nu_c + pt.selected.nu_s,
                pt.selected.theta,
                pt.selected.ratio,
                pt.selected.stable,
                pt.branches.len()
            )?;
        }
    }
    Ok(())
}

/// Writes a spectral map as CSV: header row of absolute probe frequencies,
/// then one row per detuning.
pub fn write_map_csv<T: Real, W: Write>(
    sweep: &SweepTrace<T>,
    nu_grid: &[T],
    map: &[Vec<T>],
    out: &mut W,
) -> io::Result<()> {
    write!(out, "delta_mhz")?;
    for nu in nu_grid {
        write!(out, ",{nu}")?;
    }
    writeln!(out)?;
    for (pt, row) in sweep.points.iter().zip(map) {
        write!(out, "{}", pt.delta)?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Writes a transmission sweep as CSV.
pub fn write_sigma_csv<T: Real, W: Write>(points: &[SigmaPoint<T>], out: &mut W) -> io::Result<()> {
    writeln!(
        out,
        "sigma,coherent_mhz,dissipative_mhz,direct_mhz,damping_mhz,cable_m,strong_coherent,strong_dissipative,cooperativity"
    )?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            p.sigma,
            p.coupling.coherent,
            p.coupling.dissipative,
            p.coupling.direct,
            p.coupling.damping(),
            p.cable_m,
            p.report.strong_coherent,
            p.report.strong_dissipative,
            p.report.cooperativity
        )?;
    }
    Ok(())
}
