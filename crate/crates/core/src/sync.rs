//! Steady synchronized states of the coupled cavity-magnon system.
//!
//! A synchronized state oscillates at one shared frequency with a constant
//! cavity-magnon phase difference `theta` and amplitude ratio `r`. For a
//! given detuning the admissible `theta` window is scanned densely, every
//! root of the phase balance is refined by bisection, and each root is
//! classified by the slope rule. Frequencies here are offsets from the
//! cavity resonance; callers that need absolute values add `nu_c`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CouplingSet, SystemParams};
use crate::real::Real;

#[derive(Debug, Error, PartialEq)]
pub enum SyncError {
    #[error("magnon receives no drive: g, J and Gamma cancel identically")]
    Decoupled,
    #[error("dressed magnon damping must be positive, got {damping} MHz")]
    InvalidDamping { damping: f64 },
    #[error("{what} must be finite")]
    NonFinite { what: &'static str },
    #[error("theta = {theta} rad leaves the admissible window (r <= 0)")]
    OutsideWindow { theta: f64 },
    #[error("gain settings invalid: {what}")]
    BadGain { what: &'static str },
}

/// Gain-balance inputs needed to turn a phase solution into absolute
/// amplitudes: pump rate, linear loss, and the saturation coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct GainSettings<T> {
    /// Linear negative-damping (pump) rate, MHz.
    pub pump: T,
    /// Linear loss rate the pump must overcome, MHz.
    pub loss: T,
    /// Dimensionless saturation coefficient.
    pub saturation: T,
}

impl<T: Real> GainSettings<T> {
    /// Unit-scale gain used when amplitudes are irrelevant (e.g. fitting,
    /// where only frequencies enter the loss function).
    pub fn normalized() -> Self {
        GainSettings {
            pump: T::of(2.0),
            loss: T::one(),
            saturation: T::one(),
        }
    }

    fn validate(&self) -> Result<(), SyncError> {
        if !(self.pump > T::zero()) {
            return Err(SyncError::BadGain {
                what: "pump must be positive",
            });
        }
        if !(self.loss >= T::zero()) {
            return Err(SyncError::BadGain {
                what: "loss must not be negative",
            });
        }
        if !(self.saturation > T::zero()) {
            return Err(SyncError::BadGain {
                what: "saturation must be positive",
            });
        }
        Ok(())
    }
}

impl<T: Real> From<&SystemParams<T>> for GainSettings<T> {
    fn from(p: &SystemParams<T>) -> Self {
        GainSettings {
            pump: p.gain,
            loss: p.beta,
            saturation: p.saturation,
        }
    }
}

/// One steady synchronized state at a fixed detuning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct SyncSolution<T> {
    /// Cavity-magnon phase difference, radians, inside the admissible window.
    pub theta: T,
    /// Amplitude ratio |m|/|a|, dimensionless, nonnegative.
    pub ratio: T,
    /// Synchronization frequency measured from the cavity resonance, MHz.
    pub nu_s: T,
    /// Cavity amplitude |a|; zero when the gain cannot sustain this state.
    pub cavity_amp: T,
    /// Magnon amplitude |m| = ratio * cavity_amp.
    pub magnon_amp: T,
    /// Slope-rule classification: residual slope positive at the root.
    ///
    /// The slope flips sign exactly where a branch folds, so this tracks
    /// saddle-type instability (the middle branch of a bistable window).
    /// It cannot see oscillatory instabilities; those need the Jacobian
    /// spectrum from the dynamics module.
    pub stable: bool,
}

/// Detunings bounding the bistable window, when one exists.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct FoldPoints<T> {
    /// Smallest local minimum of the detuning curve (down-sweep jump), MHz.
    pub delta_down: T,
    /// Largest local maximum of the detuning curve (up-sweep jump), MHz.
    pub delta_up: T,
    /// False when the detuning curve is monotonic; the deltas are NaN then.
    pub exists: bool,
}

/// Branch set at one grid detuning, ordered by theta.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct BranchSet<T> {
    pub delta: T,
    pub branches: Vec<SyncSolution<T>>,
}

/// Tunables for the scan-plus-bisection root finder.
#[derive(Clone, Copy, Debug)]
pub struct SolverOptions<T> {
    /// Subintervals of the dense bracketing scan.
    pub scan_cells: usize,
    /// Guard band excluded at each window endpoint, radians. The residual
    /// diverges at the endpoints, so roots inside the guard correspond to
    /// degenerate near-zero magnon amplitude and are ignored.
    pub guard: T,
    /// Bisection target on |residual - delta|, MHz.
    pub residual_tol: T,
    /// Scan density for fold location.
    pub fold_scan_cells: usize,
    /// Golden-section bracket width target for folds, radians.
    pub fold_theta_tol: T,
    /// Step for the central-difference residual slope, radians.
    pub slope_step: T,
}

impl<T: Real> Default for SolverOptions<T> {
    fn default() -> Self {
        SolverOptions {
            scan_cells: 4096,
            guard: T::of(1e-6),
            residual_tol: T::of(1e-9),
            fold_scan_cells: 8192,
            fold_theta_tol: T::of(1e-8),
            slope_step: T::of(1e-6),
        }
    }
}

fn check_coupling<T: Real>(c: &CouplingSet<T>) -> Result<(), SyncError> {
    for (value, what) in [
        (c.coherent, "coherent coupling"),
        (c.dissipative, "dissipative coupling"),
        (c.direct, "direct coupling"),
        (c.alpha_eff.re, "alpha_eff"),
        (c.alpha_eff.im, "alpha_eff"),
    ] {
        if !value.is_finite() {
            return Err(SyncError::NonFinite { what });
        }
    }
    Ok(())
}

/// Admissible phase window `(lo, lo + pi)` on which the amplitude ratio is
/// positive.
///
/// The ratio is proportional to `(g - Gamma) sin(theta) + J cos(theta)`, a
/// single sinusoid, so it is positive on exactly one half period. The
/// window is empty only when that sinusoid vanishes identically, i.e. the
/// cavity exerts no net drive on the magnon.
pub fn theta_interval<T: Real>(c: &CouplingSet<T>) -> Result<(T, T), SyncError> {
    check_coupling(c)?;
    let s = c.direct - c.dissipative;
    if s == T::zero() && c.coherent == T::zero() {
        return Err(SyncError::Decoupled);
    }
    let mut lo = -c.coherent.atan2(s);
    // atan2 maps signed zero onto opposite ends of the branch cut; pin the
    // window start to [-pi, pi) so phi = 0 links always quote the purely
    // dissipative root as -pi/2 rather than 3pi/2.
    if lo >= T::PI() {
        lo -= T::two_pi();
    }
    let hi = lo + T::PI();
    Ok((lo, hi))
}

/// Amplitude ratio |m|/|a| at a phase difference.
fn ratio_at<T: Real>(theta: T, c: &CouplingSet<T>) -> T {
    ((c.direct - c.dissipative) * theta.sin() + c.coherent * theta.cos()) / c.damping()
}

/// Detuning that would make `theta` a steady state; diverges toward the
/// window endpoints.
fn residual_at<T: Real>(theta: T, c: &CouplingSet<T>) -> T {
    let r = ratio_at(theta, c);
    let spread = r - r.recip();
    let total = r + r.recip();
    (c.direct * theta.cos() - c.coherent * theta.sin()) * spread
        + c.dissipative * theta.cos() * total
}

/// Synchronization frequency offset from the cavity at a solved phase.
fn nu_offset_at<T: Real>(theta: T, r: T, c: &CouplingSet<T>) -> T {
    ((c.direct + c.dissipative) * theta.cos() - c.coherent * theta.sin()) * r
}

/// Coupling load the gain must balance, `(g + Gamma) sin(theta) + J
/// cos(theta)` times the amplitude ratio.
fn gain_load_at<T: Real>(theta: T, r: T, c: &CouplingSet<T>) -> T {
    ((c.direct + c.dissipative) * theta.sin() + c.coherent * theta.cos()) * r
}

/// Left-hand side of the phase balance: the detuning at which `theta` would
/// be a steady state.
pub fn eq1a_residual<T: Real>(theta: T, c: &CouplingSet<T>) -> Result<T, SyncError> {
    check_coupling(c)?;
    if !(c.damping() > T::zero()) {
        return Err(SyncError::InvalidDamping {
            damping: c.damping().to_f64().unwrap_or(f64::NAN),
        });
    }
    if !(ratio_at(theta, c) > T::zero()) {
        return Err(SyncError::OutsideWindow {
            theta: theta.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(residual_at(theta, c))
}

fn validated_window<T: Real>(
    c: &CouplingSet<T>,
    opts: &SolverOptions<T>,
) -> Result<(T, T), SyncError> {
    if !(c.damping() > T::zero()) {
        return Err(SyncError::InvalidDamping {
            damping: c.damping().to_f64().unwrap_or(f64::NAN),
        });
    }
    let (lo, hi) = theta_interval(c)?;
    Ok((lo + opts.guard, hi - opts.guard))
}

fn solution_at<T: Real>(
    theta: T,
    window: (T, T),
    c: &CouplingSet<T>,
    gain: &GainSettings<T>,
    opts: &SolverOptions<T>,
) -> SyncSolution<T> {
    let r = ratio_at(theta, c);
    let nu_s = nu_offset_at(theta, r, c);
    let load = gain_load_at(theta, r, c);
    let amp_sq = (gain.pump - gain.loss - load) / (gain.pump * gain.saturation);
    let (cavity_amp, magnon_amp) = if amp_sq > T::zero() {
        let a = amp_sq.sqrt();
        (a, r * a)
    } else {
        (T::zero(), T::zero())
    };
    let h = opts
        .slope_step
        .min((theta - window.0) / T::of(2.0))
        .min((window.1 - theta) / T::of(2.0))
        .max(T::of(1e-9));
    let slope = (residual_at(theta + h, c) - residual_at(theta - h, c)) / (h + h);
    SyncSolution {
        theta,
        ratio: r,
        nu_s,
        cavity_amp,
        magnon_amp,
        stable: slope > T::zero(),
    }
}

/// All steady states at a detuning, ordered by theta.
pub fn solve_branches<T: Real>(
    delta: T,
    c: &CouplingSet<T>,
    gain: &GainSettings<T>,
) -> Result<Vec<SyncSolution<T>>, SyncError> {
    solve_branches_with(&SolverOptions::default(), delta, c, gain)
}

/// [`solve_branches`] with explicit solver tunables.
pub fn solve_branches_with<T: Real>(
    opts: &SolverOptions<T>,
    delta: T,
    c: &CouplingSet<T>,
    gain: &GainSettings<T>,
) -> Result<Vec<SyncSolution<T>>, SyncError> {
    if !delta.is_finite() {
        return Err(SyncError::NonFinite { what: "delta" });
    }
    gain.validate()?;
    let (lo, hi) = validated_window(c, opts)?;
    let n = opts.scan_cells.max(2);
    let span = hi - lo;
    let step = span / T::of(n as f64);
    let node = |k: usize| {
        if k == n {
            hi
        } else {
            lo + step * T::of(k as f64)
        }
    };
    let f = |theta: T| residual_at(theta, c) - delta;

    let mut thetas = Vec::new();
    let mut prev = f(node(0));
    if prev == T::zero() {
        thetas.push(node(0));
    }
    for k in 1..=n {
        let x = node(k);
        let next = f(x);
        if next == T::zero() {
            thetas.push(x);
        } else if prev != T::zero() && (prev < T::zero()) != (next < T::zero()) {
            let (mut a, mut b) = (node(k - 1), x);
            let mut fa = prev;
            let mut root = (a + b) / T::of(2.0);
            for _ in 0..128 {
                root = (a + b) / T::of(2.0);
                if root <= a || root >= b {
                    break;
                }
                let fm = f(root);
                if fm.abs() <= opts.residual_tol {
                    break;
                }
                if (fm < T::zero()) == (fa < T::zero()) {
                    a = root;
                    fa = fm;
                } else {
                    b = root;
                }
            }
            thetas.push(root);
        }
        prev = next;
    }
    thetas.dedup_by(|a, b| (*a - *b).abs() < step * T::of(1e-9));

    Ok(thetas
        .into_iter()
        .map(|theta| solution_at(theta, (lo, hi), c, gain, opts))
        .collect())
}

fn golden_extremum<T: Real>(
    mut a: T,
    mut b: T,
    tol: T,
    maximize: bool,
    value: impl Fn(T) -> T,
) -> (T, T) {
    let inv_phi = T::of(0.618_033_988_749_894_9);
    let score = |x: T| {
        let v = value(x);
        if maximize {
            v
        } else {
            -v
        }
    };
    let mut x1 = b - (b - a) * inv_phi;
    let mut x2 = a + (b - a) * inv_phi;
    let mut f1 = score(x1);
    let mut f2 = score(x2);
    while b - a > tol {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + (b - a) * inv_phi;
            f2 = score(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - (b - a) * inv_phi;
            f1 = score(x1);
        }
    }
    let x = (a + b) / T::of(2.0);
    (x, value(x))
}

/// Locates the detunings where branches fold (the bistable window edges).
pub fn fold_points<T: Real>(c: &CouplingSet<T>) -> Result<FoldPoints<T>, SyncError> {
    fold_points_with(&SolverOptions::default(), c)
}

/// [`fold_points`] with explicit solver tunables.
pub fn fold_points_with<T: Real>(
    opts: &SolverOptions<T>,
    c: &CouplingSet<T>,
) -> Result<FoldPoints<T>, SyncError> {
    let (lo, hi) = validated_window(c, opts)?;
    let n = opts.fold_scan_cells.max(8);
    let step = (hi - lo) / T::of(n as f64);
    let node = |k: usize| lo + step * T::of(k as f64);
    let values: Vec<T> = (0..=n).map(|k| residual_at(node(k), c)).collect();

    let mut best_max: Option<T> = None;
    let mut best_min: Option<T> = None;
    for k in 1..n {
        let (left, mid, right) = (values[k - 1], values[k], values[k + 1]);
        if mid > left && mid > right {
            let (_, v) =
                golden_extremum(node(k - 1), node(k + 1), opts.fold_theta_tol, true, |x| {
                    residual_at(x, c)
                });
            best_max = Some(best_max.map_or(v, |m: T| m.max(v)));
        } else if mid < left && mid < right {
            let (_, v) =
                golden_extremum(node(k - 1), node(k + 1), opts.fold_theta_tol, false, |x| {
                    residual_at(x, c)
                });
            best_min = Some(best_min.map_or(v, |m: T| m.min(v)));
        }
    }

    match (best_min, best_max) {
        (Some(delta_down), Some(delta_up)) => Ok(FoldPoints {
            delta_down,
            delta_up,
            exists: true,
        }),
        _ => Ok(FoldPoints {
            delta_down: T::nan(),
            delta_up: T::nan(),
            exists: false,
        }),
    }
}

/// Branch sets over a detuning grid; grid points are independent and are
/// evaluated in parallel.
pub fn dispersion_curve<T: Real>(
    delta_grid: &[T],
    c: &CouplingSet<T>,
    gain: &GainSettings<T>,
) -> Result<Vec<BranchSet<T>>, SyncError> {
    dispersion_curve_with(&SolverOptions::default(), delta_grid, c, gain)
}

/// [`dispersion_curve`] with explicit solver tunables.
pub fn dispersion_curve_with<T: Real>(
    opts: &SolverOptions<T>,
    delta_grid: &[T],
    c: &CouplingSet<T>,
    gain: &GainSettings<T>,
) -> Result<Vec<BranchSet<T>>, SyncError> {
    delta_grid
        .par_iter()
        .map(|&delta| {
            Ok(BranchSet {
                delta,
                branches: solve_branches_with(opts, delta, c, gain)?,
            })
        })
        .collect()
}

/// Residual of the frequency balance for one solution; zero for every
/// solution returned by the solver (tested, not assumed).
pub fn eq1b_residual<T: Real>(s: &SyncSolution<T>, c: &CouplingSet<T>) -> T {
    s.nu_s - nu_offset_at(s.theta, s.ratio, c)
}

/// Residual of the gain balance relation defining the cavity amplitude.
pub fn gain_balance_residual<T: Real>(
    s: &SyncSolution<T>,
    c: &CouplingSet<T>,
    gain: &GainSettings<T>,
) -> T {
    let amp_sq = s.cavity_amp * s.cavity_amp;
    gain.pump * (T::one() - gain.saturation * amp_sq)
        - gain.loss
        - gain_load_at(s.theta, s.ratio, c)
}
