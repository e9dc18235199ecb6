//! Recovery of coupling parameters from measured dispersion points.
//!
//! The observable is the synchronized line `nu_s` against detuning; the
//! locked phase is not measurable and never enters the loss. Because the
//! curve is multivalued in the bistable window, each data point may carry a
//! sweep-direction hint, and the model prediction replays the same
//! quasi-static branch selection before computing residuals. The branch
//! choice makes the loss only piecewise smooth, so the minimizer is a
//! derivative-free simplex search restarted from several seeded initial
//! guesses.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::CouplingSet;
use crate::real::Real;
use crate::sync::{solve_branches_with, GainSettings, SolverOptions, SyncError, SyncSolution};

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("{what} must be finite")]
    NonFinite { what: &'static str },
    #[error("degenerate data: all points share one detuning")]
    DegenerateData,
    #[error("weights must match points ({points}) and be finite and non-negative")]
    BadWeights { points: usize },
    #[error("noise level must be non-negative")]
    NegativeNoise,
    #[error("initial damping must be positive")]
    BadInit,
    #[error("nothing to fit: the free parameter set is empty")]
    NoFreeParameters,
    #[error("csv line {line}: {what}")]
    Csv { line: usize, what: String },
    #[error(transparent)]
    Sync(#[from] SyncError),
}

/// Which sweep direction recorded a dispersion point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchHint {
    Up,
    Down,
    #[default]
    None,
}

/// One measured point of the synchronized line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct DispersionPoint<T> {
    /// Detuning, MHz.
    pub delta: T,
    /// Absolute synchronized frequency, MHz.
    pub nu_s: T,
    pub hint: BranchHint,
}

/// A dispersion dataset with optional per-point weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct DispersionData<T> {
    pub points: Vec<DispersionPoint<T>>,
    pub weights: Option<Vec<T>>,
}

const MIN_POINTS: usize = 4;

impl<T: Real> DispersionData<T> {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.points.len() < MIN_POINTS {
            return Err(FitError::TooFewPoints {
                needed: MIN_POINTS,
                got: self.points.len(),
            });
        }
        for p in &self.points {
            if !p.delta.is_finite() || !p.nu_s.is_finite() {
                return Err(FitError::NonFinite { what: "data point" });
            }
        }
        let first = self.points[0].delta;
        if self.points.iter().all(|p| p.delta == first) {
            return Err(FitError::DegenerateData);
        }
        if let Some(w) = &self.weights {
            if w.len() != self.points.len() || w.iter().any(|x| !x.is_finite() || *x < T::zero()) {
                return Err(FitError::BadWeights {
                    points: self.points.len(),
                });
            }
        }
        Ok(())
    }
}

/// Model parameters exposed to the fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeParam {
    /// Direct coherent coupling `g`.
    Direct,
    /// Link-mediated coherent coupling.
    Coherent,
    /// Link-mediated dissipative coupling.
    Dissipative,
    /// Dressed magnon damping (real part).
    Damping,
    /// Cavity frequency.
    NuC,
}

/// Fit configuration: the parameter template, which entries float, and the
/// search tunables.
#[derive(Clone, Debug)]
pub struct FitSetup<T> {
    /// Starting couplings; fixed parameters keep these values.
    pub template: CouplingSet<T>,
    /// Starting cavity frequency, MHz.
    pub nu_c: T,
    pub free: Vec<FreeParam>,
    pub options: FitOptions<T>,
}

/// Search tunables. The defaults favor robustness at dispersion-curve
/// scale; `scan_cells` is deliberately coarser than the solver default
/// because the fit calls the branch solver thousands of times.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions<T> {
    /// Simplex restarts; the first starts exactly at the template.
    pub starts: usize,
    /// Seed for the deterministic start perturbations.
    pub seed: u64,
    /// Iteration cap per start.
    pub max_iters: usize,
    /// Convergence threshold on the simplex loss spread.
    pub loss_tol: T,
    /// Bracketing scan density passed to the branch solver.
    pub scan_cells: usize,
}

impl<T: Real> Default for FitOptions<T> {
    fn default() -> Self {
        FitOptions {
            starts: 8,
            seed: 0x6d61_676e,
            max_iters: 400,
            loss_tol: T::of(1e-14),
            scan_cells: 1024,
        }
    }
}

/// Damping bounds, MHz; outside them the loss is a steep penalty.
const DAMPING_BOUNDS: (f64, f64) = (1e-4, 1e3);
/// Coupling bounds, MHz.
const COUPLING_BOUNDS: (f64, f64) = (-1e3, 1e3);

/// Fit outcome. `params` carries every model parameter, fitted or kept
/// from the template.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct FitResult<T> {
    pub direct: T,
    pub coherent: T,
    pub dissipative: T,
    pub damping: T,
    pub nu_c: T,
    /// Weighted root-mean-square frequency residual, MHz.
    pub rms_residual: T,
    /// Simplex iterations summed over all starts.
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Real> FitResult<T> {
    pub fn coupling(&self) -> CouplingSet<T> {
        CouplingSet::real(self.direct, self.coherent, self.dissipative, self.damping)
    }
}

fn apply<T: Real>(setup: &FitSetup<T>, x: &[T]) -> (CouplingSet<T>, T) {
    let mut c = setup.template;
    let mut damping = setup.template.alpha_eff.re;
    let mut nu_c = setup.nu_c;
    for (param, &value) in setup.free.iter().zip(x) {
        match param {
            FreeParam::Direct => c.direct = value,
            FreeParam::Coherent => c.coherent = value,
            FreeParam::Dissipative => c.dissipative = value,
            FreeParam::Damping => damping = value,
            FreeParam::NuC => nu_c = value,
        }
    }
    c.alpha_eff = num_complex::Complex::new(damping, setup.template.alpha_eff.im);
    (c, nu_c)
}

fn bounds_penalty<T: Real>(c: &CouplingSet<T>) -> Option<T> {
    let mut penalty = T::zero();
    let (d_lo, d_hi) = (T::of(DAMPING_BOUNDS.0), T::of(DAMPING_BOUNDS.1));
    let (c_lo, c_hi) = (T::of(COUPLING_BOUNDS.0), T::of(COUPLING_BOUNDS.1));
    let damping = c.alpha_eff.re;
    if damping <= d_lo {
        penalty += (d_lo - damping) + T::one();
    }
    if damping >= d_hi {
        penalty += (damping - d_hi) + T::one();
    }
    for v in [c.direct, c.coherent, c.dissipative] {
        if v <= c_lo {
            penalty += (c_lo - v) + T::one();
        }
        if v >= c_hi {
            penalty += (v - c_hi) + T::one();
        }
    }
    (penalty > T::zero()).then_some(penalty)
}

/// Quasi-static branch selection over an ordered detuning slice, mirroring
/// the sweep engine: continuity in phase, seeded at the branch a sweep
/// enters on.
fn continuation_select<T: Real>(
    deltas: &[T],
    descending: bool,
    c: &CouplingSet<T>,
    gain: &GainSettings<T>,
    opts: &SolverOptions<T>,
) -> Result<Vec<Option<T>>, SyncError> {
    let mut out = Vec::with_capacity(deltas.len());
    let mut prev_theta: Option<T> = None;
    for &delta in deltas {
        let branches = solve_branches_with(opts, delta, c, gain)?;
        let stable: Vec<&SyncSolution<T>> = branches.iter().filter(|s| s.stable).collect();
        let selected = match (&prev_theta, stable.is_empty()) {
            (_, true) => None,
            (None, _) => Some(if descending {
                **stable.last().unwrap()
            } else {
                **stable.first().unwrap()
            }),
            (Some(prev), _) => Some(
                **stable
                    .iter()
                    .min_by(|a, b| {
                        (a.theta - *prev)
                            .abs()
                            .partial_cmp(&(b.theta - *prev).abs())
                            .unwrap()
                    })
                    .unwrap(),
            ),
        };
        if let Some(s) = &selected {
            prev_theta = Some(s.theta);
        }
        out.push(selected.map(|s| s.nu_s));
    }
    Ok(out)
}

struct LossContext<T> {
    up: Vec<(usize, T)>,
    down: Vec<(usize, T)>,
    free_deltas: Vec<usize>,
    weights: Vec<T>,
    weight_total: T,
}

impl<T: Real> LossContext<T> {
    fn new(data: &DispersionData<T>) -> Self {
        let mut up: Vec<(usize, T)> = Vec::new();
        let mut down: Vec<(usize, T)> = Vec::new();
        let mut free_deltas = Vec::new();
        for (i, p) in data.points.iter().enumerate() {
            match p.hint {
                BranchHint::Up => up.push((i, p.delta)),
                BranchHint::Down => down.push((i, p.delta)),
                BranchHint::None => free_deltas.push(i),
            }
        }
        up.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        down.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let weights: Vec<T> = match &data.weights {
            Some(w) => w.clone(),
            None => vec![T::one(); data.points.len()],
        };
        let weight_total = weights.iter().fold(T::zero(), |acc, &w| acc + w);
        LossContext {
            up,
            down,
            free_deltas,
            weights,
            weight_total,
        }
    }

    /// Weighted sum of squared frequency residuals; a large finite penalty
    /// when parameters leave bounds or no locked state exists.
    fn loss(
        &self,
        data: &DispersionData<T>,
        setup: &FitSetup<T>,
        opts: &SolverOptions<T>,
        x: &[T],
    ) -> T {
        let (c, nu_c) = apply(setup, x);
        let big = T::of(1e12);
        if let Some(p) = bounds_penalty(&c) {
            return big * (T::one() + p);
        }
        let gain = GainSettings::normalized();
        let mut total = T::zero();
        let mut add = |idx: usize, nu_model_offset: Option<T>| match nu_model_offset {
            Some(nu) => {
                let r = nu_c + nu - data.points[idx].nu_s;
                total += self.weights[idx] * r * r;
            }
            None => total += big,
        };

        for (hinted, descending) in [(&self.up, false), (&self.down, true)] {
            if hinted.is_empty() {
                continue;
            }
            let deltas: Vec<T> = hinted.iter().map(|&(_, d)| d).collect();
            match continuation_select(&deltas, descending, &c, &gain, opts) {
                Ok(line) => {
                    for (&(idx, _), nu) in hinted.iter().zip(line) {
                        add(idx, nu);
                    }
                }
                Err(_) => return big * T::of(2.0),
            }
        }

        for &idx in &self.free_deltas {
            let p = &data.points[idx];
            match solve_branches_with(opts, p.delta, &c, &gain) {
                Ok(branches) => {
                    let nearest =
                        branches
                            .iter()
                            .filter(|s| s.stable)
                            .map(|s| s.nu_s)
                            .min_by(|a, b| {
                                (nu_c + *a - p.nu_s)
                                    .abs()
                                    .partial_cmp(&(nu_c + *b - p.nu_s).abs())
                                    .unwrap()
                            });
                    add(idx, nearest);
                }
                Err(_) => return big * T::of(2.0),
            }
        }
        total
    }

    fn rms(&self, loss: T) -> T {
        if self.weight_total > T::zero() {
            (loss / self.weight_total).sqrt()
        } else {
            T::zero()
        }
    }
}

struct SimplexOutcome<T> {
    x: Vec<T>,
    loss: T,
    iterations: usize,
    converged: bool,
}

/// Standard Nelder-Mead with adaptive stopping on the loss spread.
fn nelder_mead<T: Real>(
    f: &dyn Fn(&[T]) -> T,
    x0: &[T],
    step: &[T],
    max_iters: usize,
    loss_tol: T,
) -> SimplexOutcome<T> {
    let n = x0.len();
    let mut simplex: Vec<(Vec<T>, T)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step[i];
        let fv = f(&v);
        simplex.push((v, fv));
    }

    let (alpha, gamma, rho, sigma) = (T::one(), T::of(2.0), T::of(0.5), T::of(0.5));
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let best = simplex[0].1;
        let worst = simplex[n].1;
        if (worst - best).abs() <= loss_tol * (T::one() + best.abs()) {
            converged = true;
            break;
        }

        let mut centroid = vec![T::zero(); n];
        for (v, _) in &simplex[..n] {
            for (ci, vi) in centroid.iter_mut().zip(v) {
                *ci += *vi;
            }
        }
        for ci in centroid.iter_mut() {
            *ci /= T::of(n as f64);
        }
        let blend = |a: T, b: T| -> Vec<T> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(&ci, &wi)| ci * (a + b) - wi * b)
                .collect()
        };

        let reflected = blend(T::one(), alpha);
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = blend(T::one(), gamma);
            let fe = f(&expanded);
            simplex[n] = if fe < fr {
                (expanded, fe)
            } else {
                (reflected, fr)
            };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
            continue;
        }
        let contracted: Vec<T> = centroid
            .iter()
            .zip(&simplex[n].0)
            .map(|(&ci, &wi)| ci + (wi - ci) * rho)
            .collect();
        let fc = f(&contracted);
        if fc < simplex[n].1 {
            simplex[n] = (contracted, fc);
            continue;
        }
        let anchor = simplex[0].0.clone();
        for entry in simplex.iter_mut().skip(1) {
            let shrunk: Vec<T> = anchor
                .iter()
                .zip(&entry.0)
                .map(|(&bi, &vi)| bi + (vi - bi) * sigma)
                .collect();
            entry.1 = f(&shrunk);
            entry.0 = shrunk;
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let (x, loss) = simplex.swap_remove(0);
    SimplexOutcome {
        x,
        loss,
        iterations,
        converged,
    }
}

/// Fits the free parameters to a dispersion dataset by weighted least
/// squares on the synchronized frequency.
///
/// Runs `options.starts` simplex searches concurrently — the first from
/// the template itself, the rest from deterministic perturbations of it —
/// and keeps the best final loss. `converged = false` with best-so-far
/// values when no start met the loss-spread criterion.
pub fn fit_dispersion<T: Real>(
    data: &DispersionData<T>,
    setup: &FitSetup<T>,
) -> Result<FitResult<T>, FitError> {
    data.validate()?;
    if setup.free.is_empty() {
        return Err(FitError::NoFreeParameters);
    }
    if !(setup.template.alpha_eff.re > T::zero()) {
        return Err(FitError::BadInit);
    }
    for v in [
        setup.template.direct,
        setup.template.coherent,
        setup.template.dissipative,
        setup.nu_c,
    ] {
        if !v.is_finite() {
            return Err(FitError::NonFinite {
                what: "initial guess",
            });
        }
    }

    let ctx = LossContext::new(data);
    let opts = SolverOptions {
        scan_cells: setup.options.scan_cells,
        ..SolverOptions::default()
    };
    let (x0, _) = {
        let mut x0 = Vec::with_capacity(setup.free.len());
        for param in &setup.free {
            x0.push(match param {
                FreeParam::Direct => setup.template.direct,
                FreeParam::Coherent => setup.template.coherent,
                FreeParam::Dissipative => setup.template.dissipative,
                FreeParam::Damping => setup.template.alpha_eff.re,
                FreeParam::NuC => setup.nu_c,
            });
        }
        (x0, ())
    };

    let starts: Vec<Vec<T>> = (0..setup.options.starts.max(1))
        .map(|k| {
            if k == 0 {
                return x0.clone();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(setup.options.seed.wrapping_add(k as u64));
            x0.iter()
                .zip(&setup.free)
                .map(|(&v, param)| {
                    let spread: f64 = rng.gen_range(-1.0..1.0);
                    let scale = match param {
                        // The cavity line is known to within its own width;
                        // couplings and dampings only to order of magnitude.
                        FreeParam::NuC => T::of(2.0),
                        _ => (v.abs() + T::one()) * T::of(0.5),
                    };
                    let out = v + scale * T::of(spread);
                    if matches!(param, FreeParam::Damping) {
                        out.max(T::of(DAMPING_BOUNDS.0 * 10.0))
                    } else {
                        out
                    }
                })
                .collect()
        })
        .collect();

    let objective = |x: &[T]| ctx.loss(data, setup, &opts, x);
    let outcomes: Vec<SimplexOutcome<T>> = starts
        .par_iter()
        .map(|start| {
            let step: Vec<T> = start
                .iter()
                .zip(&setup.free)
                .map(|(&v, param)| match param {
                    FreeParam::NuC => T::of(0.5),
                    _ => (v.abs() * T::of(0.1)).max(T::of(0.2)),
                })
                .collect();
            nelder_mead(
                &objective,
                start,
                &step,
                setup.options.max_iters,
                setup.options.loss_tol,
            )
        })
        .collect();

    let iterations = outcomes.iter().map(|o| o.iterations).sum();
    let best = outcomes
        .into_iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.loss.partial_cmp(&b.loss).unwrap().then_with(|| i.cmp(j)))
        .map(|(_, o)| o)
        .unwrap();

    let (c, nu_c) = apply(setup, &best.x);
    Ok(FitResult {
        direct: c.direct,
        coherent: c.coherent,
        dissipative: c.dissipative,
        damping: c.alpha_eff.re,
        nu_c,
        rms_residual: ctx.rms(best.loss),
        iterations,
        converged: best.converged,
    })
}

/// Generates a synthetic dispersion dataset by replaying quasi-static up
/// and down sweeps over the grid and adding Gaussian frequency noise.
/// Deterministic for a given seed.
pub fn synthesize_dispersion<T: Real>(
    c: &CouplingSet<T>,
    nu_c: T,
    delta_grid: &[T],
    noise_mhz: T,
    seed: u64,
) -> Result<DispersionData<T>, FitError> {
    if !(noise_mhz >= T::zero()) {
        return Err(FitError::NegativeNoise);
    }
    if delta_grid.is_empty() {
        return Err(FitError::TooFewPoints {
            needed: MIN_POINTS,
            got: 0,
        });
    }
    let mut ascending = delta_grid.to_vec();
    ascending.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let descending: Vec<T> = ascending.iter().rev().copied().collect();
    let gain = GainSettings::normalized();
    let opts = SolverOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = move || {
        // Box-Muller transform on two uniform draws.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        T::of((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
    };

    let mut points = Vec::new();
    for (deltas, hint, descending_pass) in [
        (&ascending, BranchHint::Up, false),
        (&descending, BranchHint::Down, true),
    ] {
        let line = continuation_select(deltas, descending_pass, c, &gain, &opts)?;
        for (&delta, nu) in deltas.iter().zip(line) {
            if let Some(nu) = nu {
                points.push(DispersionPoint {
                    delta,
                    nu_s: nu_c + nu + noise_mhz * gauss(),
                    hint,
                });
            }
        }
    }
    Ok(DispersionData {
        points,
        weights: None,
    })
}

/// Reads a dispersion CSV with header `delta_mhz,nu_s_mhz,branch`, where
/// `branch` is `up`, `down`, or empty/`none`.
pub fn read_dispersion_csv<R: BufRead>(reader: R) -> Result<DispersionData<f64>, FitError> {
    let mut points = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| FitError::Csv {
            line: i + 1,
            what: e.to_string(),
        })?;
        let text = line.trim();
        if i == 0 {
            if text != "delta_mhz,nu_s_mhz,branch" {
                return Err(FitError::Csv {
                    line: 1,
                    what: format!("expected header `delta_mhz,nu_s_mhz,branch`, got `{text}`"),
                });
            }
            continue;
        }
        if text.is_empty() {
            continue;
        }
        let fields: Vec<&str> = text.split(',').collect();
        if fields.len() != 3 {
            return Err(FitError::Csv {
                line: i + 1,
                what: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| {
            s.trim().parse::<f64>().map_err(|_| FitError::Csv {
                line: i + 1,
                what: format!("bad {what}: `{s}`"),
            })
        };
        let hint = match fields[2].trim() {
            "up" => BranchHint::Up,
            "down" => BranchHint::Down,
            "" | "none" => BranchHint::None,
            other => {
                return Err(FitError::Csv {
                    line: i + 1,
                    what: format!("bad branch hint: `{other}`"),
                })
            }
        };
        points.push(DispersionPoint {
            delta: parse(fields[0], "delta_mhz")?,
            nu_s: parse(fields[1], "nu_s_mhz")?,
            hint,
        });
    }
    let data = DispersionData {
        points,
        weights: None,
    };
    data.validate()?;
    Ok(data)
}

/// Writes a dispersion dataset in the format [`read_dispersion_csv`]
/// accepts.
pub fn write_dispersion_csv<T: Real, W: Write>(
    data: &DispersionData<T>,
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "delta_mhz,nu_s_mhz,branch")?;
    for p in &data.points {
        let hint = match p.hint {
            BranchHint::Up => "up",
            BranchHint::Down => "down",
            BranchHint::None => "none",
        };
        writeln!(out, "{},{},{}", p.delta, p.nu_s, hint)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn coherent() -> CouplingSet<f64> {
        CouplingSet::real(11.0, 0.0, 0.0, 1.8)
    }

    fn dissipative() -> CouplingSet<f64> {
        CouplingSet::real(0.0, 0.0, 6.2, 3.0)
    }

    fn grid(n: usize, half: f64) -> Vec<f64> {
        (0..=n)
            .map(|k| -half + 2.0 * half * k as f64 / n as f64)
            .collect()
    }

    fn coherent_setup(free: Vec<FreeParam>) -> FitSetup<f64> {
        FitSetup {
            template: CouplingSet::real(8.0, 0.0, 0.0, 2.5),
            nu_c: 3821.0,
            free,
            options: FitOptions::default(),
        }
    }

    #[test]
    fn noiseless_synthesis_lies_on_the_solver_curve() {
        let c = coherent();
        let data = synthesize_dispersion(&c, 3820.0, &grid(40, 50.0), 0.0, 7).unwrap();
        let gain = GainSettings::normalized();
        for p in &data.points {
            let branches =
                solve_branches_with(&SolverOptions::default(), p.delta, &c, &gain).unwrap();
            let hit = branches
                .iter()
                .filter(|s| s.stable)
                .any(|s| (3820.0 + s.nu_s - p.nu_s).abs() < 1e-6);
            assert!(hit, "point at delta {} off-curve", p.delta);
        }
        let again = synthesize_dispersion(&c, 3820.0, &grid(40, 50.0), 0.0, 7).unwrap();
        assert_eq!(data, again);

        let noisy = synthesize_dispersion(&c, 3820.0, &grid(40, 50.0), 0.05, 7).unwrap();
        let same_seed = synthesize_dispersion(&c, 3820.0, &grid(40, 50.0), 0.05, 7).unwrap();
        let other_seed = synthesize_dispersion(&c, 3820.0, &grid(40, 50.0), 0.05, 8).unwrap();
        assert_eq!(noisy, same_seed);
        assert_ne!(noisy, other_seed);
    }

    #[test]
    fn hinted_synthesis_is_hysteretic_in_the_bistable_window() {
        let data = synthesize_dispersion(&coherent(), 3820.0, &grid(120, 60.0), 0.0, 1).unwrap();
        let up: Vec<_> = data
            .points
            .iter()
            .filter(|p| p.hint == BranchHint::Up && (p.delta - 20.0).abs() < 0.26)
            .collect();
        let down: Vec<_> = data
            .points
            .iter()
            .filter(|p| p.hint == BranchHint::Down && (p.delta - 20.0).abs() < 0.26)
            .collect();
        assert!(!up.is_empty() && !down.is_empty());
        // Inside the window the two passes sit on different branches.
        assert!((up[0].nu_s - down[0].nu_s).abs() > 1.0);
    }

    #[test]
    fn noiseless_round_trip_recovers_parameters_exactly() {
        let truth = coherent();
        let data = synthesize_dispersion(&truth, 3820.0, &grid(60, 50.0), 0.0, 3).unwrap();
        let setup = coherent_setup(vec![FreeParam::Direct, FreeParam::Damping, FreeParam::NuC]);
        let fit = fit_dispersion(&data, &setup).unwrap();
        assert!(fit.converged);
        assert!(fit.rms_residual < 1e-6, "rms {}", fit.rms_residual);
        assert_abs_diff_eq!(fit.direct, 11.0, epsilon = 11.0 * 1e-3);
        assert_abs_diff_eq!(fit.damping, 1.8, epsilon = 1.8 * 1e-3);
        assert_abs_diff_eq!(fit.nu_c, 3820.0, epsilon = 1e-2);
    }

    #[test]
    fn noisy_round_trip_recovers_within_five_percent() {
        let truth = dissipative();
        let data = synthesize_dispersion(&truth, 3820.0, &grid(60, 40.0), 0.05, 11).unwrap();
        let setup = FitSetup {
            template: CouplingSet::real(0.0, 0.0, 4.0, 2.0),
            nu_c: 3819.0,
            free: vec![FreeParam::Dissipative, FreeParam::Damping, FreeParam::NuC],
            options: FitOptions::default(),
        };
        let fit = fit_dispersion(&data, &setup).unwrap();
        assert!(
            (fit.dissipative - 6.2).abs() <= 0.05 * 6.2,
            "{}",
            fit.dissipative
        );
        assert!((fit.damping - 3.0).abs() <= 0.05 * 3.0, "{}", fit.damping);
        assert!((fit.nu_c - 3820.0).abs() < 0.5);
    }

    #[test]
    fn fit_is_deterministic() {
        let data = synthesize_dispersion(&coherent(), 3820.0, &grid(40, 50.0), 0.05, 5).unwrap();
        let setup = coherent_setup(vec![FreeParam::Direct, FreeParam::Damping]);
        let a = fit_dispersion(&data, &setup).unwrap();
        let b = fit_dispersion(&data, &setup).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fitted_cavity_line_is_translation_equivariant() {
        let mut data = synthesize_dispersion(&coherent(), 3820.0, &grid(50, 50.0), 0.0, 9).unwrap();
        let setup = coherent_setup(vec![FreeParam::Direct, FreeParam::Damping, FreeParam::NuC]);
        let base = fit_dispersion(&data, &setup).unwrap();
        for p in &mut data.points {
            p.nu_s += 5.0;
        }
        let mut shifted_setup = setup;
        shifted_setup.nu_c += 5.0;
        let shifted = fit_dispersion(&data, &shifted_setup).unwrap();
        assert_abs_diff_eq!(shifted.nu_c - base.nu_c, 5.0, epsilon = 1e-4);
        assert_abs_diff_eq!(shifted.direct, base.direct, epsilon = 1e-4);
        assert_abs_diff_eq!(shifted.damping, base.damping, epsilon = 1e-4);
    }

    #[test]
    fn doubled_weight_equals_duplicated_point() {
        let base = synthesize_dispersion(&coherent(), 3820.0, &grid(30, 50.0), 0.05, 13).unwrap();
        let n = base.points.len();

        let mut duplicated = base.clone();
        duplicated.points.push(base.points[0]);
        let mut weighted = base.clone();
        weighted.weights = Some((0..n).map(|i| if i == 0 { 2.0 } else { 1.0 }).collect());

        let setup = coherent_setup(vec![FreeParam::Direct, FreeParam::Damping]);
        let fit_dup = fit_dispersion(&duplicated, &setup).unwrap();
        let fit_w = fit_dispersion(&weighted, &setup).unwrap();
        assert_abs_diff_eq!(fit_dup.direct, fit_w.direct, epsilon = 1e-6);
        assert_abs_diff_eq!(fit_dup.damping, fit_w.damping, epsilon = 1e-6);
    }

    #[test]
    fn degenerate_and_undersized_data_are_rejected() {
        let flat = DispersionData {
            points: (0..6)
                .map(|k| DispersionPoint {
                    delta: 5.0,
                    nu_s: 3820.0 + k as f64,
                    hint: BranchHint::None,
                })
                .collect(),
            weights: None,
        };
        let setup = coherent_setup(vec![FreeParam::Direct]);
        assert_eq!(
            fit_dispersion(&flat, &setup).unwrap_err(),
            FitError::DegenerateData
        );

        let tiny = DispersionData {
            points: vec![DispersionPoint {
                delta: 0.0,
                nu_s: 3820.0,
                hint: BranchHint::None,
            }],
            weights: None,
        };
        assert!(matches!(
            fit_dispersion(&tiny, &setup).unwrap_err(),
            FitError::TooFewPoints { .. }
        ));

        let mut empty_free = coherent_setup(vec![]);
        empty_free.free.clear();
        let ok_data = synthesize_dispersion(&coherent(), 3820.0, &grid(10, 40.0), 0.0, 2).unwrap();
        assert_eq!(
            fit_dispersion(&ok_data, &empty_free).unwrap_err(),
            FitError::NoFreeParameters
        );
    }

    #[test]
    fn csv_round_trip_preserves_data_and_rejects_garbage() {
        let data = synthesize_dispersion(&coherent(), 3820.0, &grid(12, 45.0), 0.05, 21).unwrap();
        let mut buf = Vec::new();
        write_dispersion_csv(&data, &mut buf).unwrap();
        let back = read_dispersion_csv(&buf[..]).unwrap();
        assert_eq!(back.points.len(), data.points.len());
        for (a, b) in back.points.iter().zip(&data.points) {
            assert_eq!(a.delta, b.delta);
            assert_eq!(a.nu_s, b.nu_s);
            assert_eq!(a.hint, b.hint);
        }

        let bad_header = b"delta,nu,branch\n1,2,up\n";
        assert!(matches!(
            read_dispersion_csv(&bad_header[..]),
            Err(FitError::Csv { line: 1, .. })
        ));
        let bad_field = b"delta_mhz,nu_s_mhz,branch\n1,2,sideways\n";
        assert!(matches!(
            read_dispersion_csv(&bad_field[..]),
            Err(FitError::Csv { line: 2, .. })
        ));
    }
}
