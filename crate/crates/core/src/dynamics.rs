//! Time-domain integration of the coupled cavity-magnon equations and
//! steady-state extraction.
//!
//! The equations of motion are integrated in the frame rotating at the
//! cavity frequency, which removes the GHz carrier and lets the adaptive
//! step follow the MHz-scale envelope:
//!
//! ```text
//! da/dt = 2*pi * { [N (1 - eps |a|^2) - beta] a - i (g + Gamma - i J) m }
//! dm/dt = 2*pi * { [-i delta - Re(alpha_eff)] m - i (g - Gamma + i J) a }
//! ```
//!
//! with time in microseconds and every rate cyclic in MHz. `delta` is the
//! detuning of the (calibrated) magnon line from the cavity; the imaginary
//! part of the dressed damping is a frequency pull already absorbed into
//! that calibration. This module doubles as the independent oracle for the
//! steady-state solver: extracted frequencies and phases must reproduce the
//! phase-balance solutions, which is enforced in tests.

use std::io::{self, Write};

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CouplingSet, SystemParams};
use crate::real::Real;
use crate::sync::{eq1a_residual, theta_interval, GainSettings, SyncSolution};

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("{what} must be finite")]
    NonFinite { what: &'static str },
    #[error("{what} must be positive")]
    NonPositive { what: &'static str },
    #[error("need at least two samples, got {samples}")]
    TooFewSamples { samples: usize },
    #[error("state became non-finite at t = {t_us} us")]
    Blowup { t_us: f64 },
    #[error("step size underflow at t = {t_us} us (h = {h_us} us)")]
    StepUnderflow { t_us: f64, h_us: f64 },
    #[error("step budget exhausted at t = {t_us} us after {steps} steps")]
    StepBudget { t_us: f64, steps: u64 },
    #[error("window of {window_us} us needs a trace at least twice as long")]
    WindowTooLong { window_us: f64 },
    #[error("solution inconsistent with the phase balance: {what}")]
    InconsistentSolution { what: &'static str },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Integration request: duration, output grid, and error control.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct IntegrationSpec<T> {
    /// Total integration time, microseconds.
    pub duration: T,
    /// Number of equal output intervals; the trace has `samples + 1` rows
    /// including t = 0. Sampling must resolve the rotating-frame envelope
    /// (more than two samples per beat period) for phase extraction to
    /// unwrap correctly.
    pub samples: usize,
    /// Relative error tolerance per step.
    pub rtol: T,
    /// Absolute error tolerance per step.
    pub atol: T,
    /// Adds the constant pump seed `N sqrt(eps/2)` to the cavity equation.
    /// It only kicks the oscillator off the unstable zero state and is
    /// negligible once the limit cycle forms; a small nonzero `a0` does the
    /// same job, so this defaults to off.
    pub gain_seed: bool,
}

impl<T: Real> IntegrationSpec<T> {
    pub fn new(duration: T) -> Self {
        IntegrationSpec {
            duration,
            samples: 4096,
            rtol: T::of(1e-9),
            atol: T::of(1e-12),
            gain_seed: false,
        }
    }

    fn validate(&self) -> Result<(), DynamicsError> {
        if !self.duration.is_finite() || !(self.duration > T::zero()) {
            return Err(DynamicsError::NonPositive { what: "duration" });
        }
        if self.samples < 2 {
            return Err(DynamicsError::TooFewSamples {
                samples: self.samples,
            });
        }
        if !(self.rtol > T::zero()) {
            return Err(DynamicsError::NonPositive { what: "rtol" });
        }
        if !(self.atol > T::zero()) {
            return Err(DynamicsError::NonPositive { what: "atol" });
        }
        Ok(())
    }
}

/// Integrator bookkeeping attached to every trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct TraceMeta<T> {
    /// Accepted steps.
    pub steps: u64,
    /// Rejected (error-controlled) step attempts.
    pub rejected: u64,
    pub rtol: T,
    pub atol: T,
    /// Cavity frequency of the rotating frame, MHz; add it to recover
    /// absolute frequencies from the stored envelope.
    pub frame_nu_c: T,
    /// Detuning the trace was integrated at, MHz.
    pub delta: T,
    /// Whether the bare cavity is above the self-oscillation threshold.
    pub self_oscillating: bool,
}

/// Sampled trajectory in the cavity rotating frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct TimeTrace<T> {
    /// Sample times, microseconds, strictly increasing from zero.
    pub t: Vec<T>,
    /// Cavity envelope samples.
    pub a: Vec<Complex<T>>,
    /// Magnon envelope samples.
    pub m: Vec<Complex<T>>,
    pub meta: TraceMeta<T>,
}

/// Steady state summarized from the tail of a trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct SteadyEstimate<T> {
    /// Absolute synchronization frequency (frame offset added back), MHz.
    pub nu_s: T,
    /// Cavity-magnon phase difference, radians; NaN when the magnon
    /// amplitude is too small to define one.
    pub theta: T,
    /// Mean cavity amplitude over the window.
    pub cavity_amp: T,
    /// Mean magnon amplitude over the window.
    pub magnon_amp: T,
    /// Drift threshold met and amplitudes well above the noise floor.
    pub converged: bool,
    /// Frequency difference between the two halves of the window, MHz.
    pub drift: T,
}

/// Frequency drift below which an estimate counts as converged, MHz.
pub const DRIFT_THRESHOLD: f64 = 1e-4;

/// Amplitude floor below which a window is considered empty.
pub const AMPLITUDE_FLOOR: f64 = 1e-6;

const MAX_STEPS: u64 = 50_000_000;

struct Eom<T> {
    net_gain: T,
    saturation: T,
    seed: T,
    delta: T,
    damping: T,
    cavity_from_magnon: Complex<T>,
    magnon_from_cavity: Complex<T>,
}

impl<T: Real> Eom<T> {
    fn new(p: &SystemParams<T>, c: &CouplingSet<T>, delta: T, gain_seed: bool) -> Self {
        let seed = if gain_seed {
            p.gain * (p.saturation / T::of(2.0)).sqrt()
        } else {
            T::zero()
        };
        Eom {
            net_gain: p.gain - p.beta,
            saturation: p.gain * p.saturation,
            seed,
            delta,
            damping: c.alpha_eff.re,
            cavity_from_magnon: Complex::new(T::zero(), -T::one())
                * Complex::new(c.direct + c.dissipative, -c.coherent),
            magnon_from_cavity: Complex::new(T::zero(), -T::one())
                * Complex::new(c.direct - c.dissipative, c.coherent),
        }
    }

    #[inline]
    fn rhs(&self, y: &[Complex<T>; 2]) -> [Complex<T>; 2] {
        let two_pi = T::two_pi();
        let (a, m) = (y[0], y[1]);
        let gain = self.net_gain - self.saturation * a.norm_sqr();
        let da = a * gain + self.cavity_from_magnon * m + Complex::new(self.seed, T::zero());
        let dm = m * Complex::new(-self.damping, -self.delta) + self.magnon_from_cavity * a;
        [da * two_pi, dm * two_pi]
    }

    fn gain_at(&self, amp_sq: T) -> T {
        self.net_gain - self.saturation * amp_sq
    }
}

#[inline]
fn finite<T: Real>(y: &[Complex<T>; 2]) -> bool {
    y.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Integrates the coupled equations with an adaptive embedded Runge-Kutta
/// pair (Dormand-Prince 5(4)), stepping exactly onto the requested output
/// grid.
pub fn integrate<T: Real>(
    p: &SystemParams<T>,
    c: &CouplingSet<T>,
    delta: T,
    a0: Complex<T>,
    m0: Complex<T>,
    spec: &IntegrationSpec<T>,
) -> Result<TimeTrace<T>, DynamicsError> {
    p.validate()?;
    spec.validate()?;
    if !delta.is_finite() {
        return Err(DynamicsError::NonFinite { what: "delta" });
    }
    for (z, what) in [(a0, "a0"), (m0, "m0")] {
        if !z.re.is_finite() || !z.im.is_finite() {
            return Err(DynamicsError::NonFinite { what });
        }
    }
    for (v, what) in [
        (c.coherent, "coherent coupling"),
        (c.dissipative, "dissipative coupling"),
        (c.direct, "direct coupling"),
        (c.alpha_eff.re, "alpha_eff"),
        (c.alpha_eff.im, "alpha_eff"),
    ] {
        if !v.is_finite() {
            return Err(DynamicsError::NonFinite { what });
        }
    }

    let eom = Eom::new(p, c, delta, spec.gain_seed);
    let n = spec.samples;
    let dt_out = spec.duration / T::of(n as f64);

    let mut t = T::zero();
    let mut y = [a0, m0];
    let mut ts = Vec::with_capacity(n + 1);
    let mut cavity = Vec::with_capacity(n + 1);
    let mut magnon = Vec::with_capacity(n + 1);
    ts.push(t);
    cavity.push(y[0]);
    magnon.push(y[1]);

    // Dormand-Prince coefficients.
    let of = T::of;
    let a21 = of(1.0 / 5.0);
    let (a31, a32) = (of(3.0 / 40.0), of(9.0 / 40.0));
    let (a41, a42, a43) = (of(44.0 / 45.0), of(-56.0 / 15.0), of(32.0 / 9.0));
    let (a51, a52, a53, a54) = (
        of(19372.0 / 6561.0),
        of(-25360.0 / 2187.0),
        of(64448.0 / 6561.0),
        of(-212.0 / 729.0),
    );
    let (a61, a62, a63, a64, a65) = (
        of(9017.0 / 3168.0),
        of(-355.0 / 33.0),
        of(46732.0 / 5247.0),
        of(49.0 / 176.0),
        of(-5103.0 / 18656.0),
    );
    let (b1, b3, b4, b5, b6) = (
        of(35.0 / 384.0),
        of(500.0 / 1113.0),
        of(125.0 / 192.0),
        of(-2187.0 / 6784.0),
        of(11.0 / 84.0),
    );
    let (e1, e3, e4, e5, e6, e7) = (
        of(71.0 / 57600.0),
        of(-71.0 / 16695.0),
        of(71.0 / 1920.0),
        of(-17253.0 / 339200.0),
        of(22.0 / 525.0),
        of(-1.0 / 40.0),
    );

    let mut steps: u64 = 0;
    let mut rejected: u64 = 0;
    let mut h_ctrl = dt_out.min(of(1e-3));
    let h_floor = spec.duration * of(1e-15);
    let mut k1 = eom.rhs(&y);

    let lc = |y: &[Complex<T>; 2], c: &[(T, [Complex<T>; 2])]| -> [Complex<T>; 2] {
        let mut out = *y;
        for &(w, k) in c {
            out[0] += k[0] * w;
            out[1] += k[1] * w;
        }
        out
    };

    for sample in 1..=n {
        let t_target = if sample == n {
            spec.duration
        } else {
            dt_out * of(sample as f64)
        };
        while t < t_target {
            let h = h_ctrl.min(t_target - t);
            if h < h_floor {
                return Err(DynamicsError::StepUnderflow {
                    t_us: t.to_f64().unwrap_or(f64::NAN),
                    h_us: h.to_f64().unwrap_or(f64::NAN),
                });
            }
            if steps + rejected > MAX_STEPS {
                return Err(DynamicsError::StepBudget {
                    t_us: t.to_f64().unwrap_or(f64::NAN),
                    steps: steps + rejected,
                });
            }

            let k2 = eom.rhs(&lc(&y, &[(h * a21, k1)]));
            let k3 = eom.rhs(&lc(&y, &[(h * a31, k1), (h * a32, k2)]));
            let k4 = eom.rhs(&lc(&y, &[(h * a41, k1), (h * a42, k2), (h * a43, k3)]));
            let k5 = eom.rhs(&lc(
                &y,
                &[(h * a51, k1), (h * a52, k2), (h * a53, k3), (h * a54, k4)],
            ));
            let k6 = eom.rhs(&lc(
                &y,
                &[
                    (h * a61, k1),
                    (h * a62, k2),
                    (h * a63, k3),
                    (h * a64, k4),
                    (h * a65, k5),
                ],
            ));
            let y5 = lc(
                &y,
                &[
                    (h * b1, k1),
                    (h * b3, k3),
                    (h * b4, k4),
                    (h * b5, k5),
                    (h * b6, k6),
                ],
            );
            let k7 = eom.rhs(&y5);

            if !finite(&y5) || !finite(&k7) {
                rejected += 1;
                h_ctrl = h * of(0.25);
                continue;
            }

            let err = lc(
                &[Complex::new(T::zero(), T::zero()); 2],
                &[
                    (h * e1, k1),
                    (h * e3, k3),
                    (h * e4, k4),
                    (h * e5, k5),
                    (h * e6, k6),
                    (h * e7, k7),
                ],
            );
            let mut err_norm_sq = T::zero();
            for i in 0..2 {
                for (e, y_old, y_new) in [
                    (err[i].re, y[i].re, y5[i].re),
                    (err[i].im, y[i].im, y5[i].im),
                ] {
                    let scale = spec.atol + spec.rtol * y_old.abs().max(y_new.abs());
                    let ratio = e / scale;
                    err_norm_sq += ratio * ratio;
                }
            }
            let err_norm = (err_norm_sq / of(4.0)).sqrt();

            if err_norm <= T::one() {
                t += h;
                y = y5;
                k1 = k7;
                steps += 1;
                let factor = if err_norm == T::zero() {
                    of(5.0)
                } else {
                    (of(0.9) * err_norm.powf(of(-0.2)))
                        .min(of(5.0))
                        .max(of(0.2))
                };
                h_ctrl = h * factor;
            } else {
                rejected += 1;
                h_ctrl = h * (of(0.9) * err_norm.powf(of(-0.2))).max(of(0.1));
            }
        }
        if !finite(&y) {
            return Err(DynamicsError::Blowup {
                t_us: t.to_f64().unwrap_or(f64::NAN),
            });
        }
        ts.push(t_target);
        cavity.push(y[0]);
        magnon.push(y[1]);
        t = t_target;
    }

    Ok(TimeTrace {
        t: ts,
        a: cavity,
        m: magnon,
        meta: TraceMeta {
            steps,
            rejected,
            rtol: spec.rtol,
            atol: spec.atol,
            frame_nu_c: p.nu_c,
            delta,
            self_oscillating: p.self_oscillating(),
        },
    })
}

fn regression_frequency<T: Real>(t: &[T], phase: &[T]) -> T {
    let n = T::of(t.len() as f64);
    let mut t_mean = T::zero();
    let mut p_mean = T::zero();
    for (&ti, &pi) in t.iter().zip(phase) {
        t_mean += ti;
        p_mean += pi;
    }
    t_mean /= n;
    p_mean /= n;
    let mut num = T::zero();
    let mut den = T::zero();
    for (&ti, &pi) in t.iter().zip(phase) {
        num += (ti - t_mean) * (pi - p_mean);
        den += (ti - t_mean) * (ti - t_mean);
    }
    // Envelope phase advances as -2*pi*(nu_s - nu_c)*t.
    -(num / den) / T::two_pi()
}

/// Summarizes the synchronized state over the final `window` microseconds
/// of a trace.
///
/// The frequency comes from a linear fit to the unwrapped envelope phase
/// (incremental unwrapping via sample-to-sample phase products). When a
/// phase window is supplied, the extracted `theta` is shifted by whole
/// turns into it.
pub fn extract_steady_state<T: Real>(
    trace: &TimeTrace<T>,
    window: T,
    theta_window: Option<(T, T)>,
) -> Result<SteadyEstimate<T>, DynamicsError> {
    let t_end = *trace
        .t
        .last()
        .ok_or(DynamicsError::TooFewSamples { samples: 0 })?;
    let t_start = trace.t[0];
    if !(window > T::zero()) {
        return Err(DynamicsError::NonPositive { what: "window" });
    }
    if t_end - t_start < window + window {
        return Err(DynamicsError::WindowTooLong {
            window_us: window.to_f64().unwrap_or(f64::NAN),
        });
    }
    let from = trace
        .t
        .iter()
        .position(|&ti| ti >= t_end - window)
        .unwrap_or(0);
    let t = &trace.t[from..];
    let a = &trace.a[from..];
    let m = &trace.m[from..];
    if t.len() < 8 {
        return Err(DynamicsError::TooFewSamples { samples: t.len() });
    }

    let n = T::of(t.len() as f64);
    let mut cavity_amp = T::zero();
    let mut magnon_amp = T::zero();
    for (ai, mi) in a.iter().zip(m) {
        cavity_amp += ai.norm();
        magnon_amp += mi.norm();
    }
    cavity_amp /= n;
    magnon_amp /= n;

    let floor = T::of(AMPLITUDE_FLOOR);
    if cavity_amp < floor {
        return Ok(SteadyEstimate {
            nu_s: trace.meta.frame_nu_c,
            theta: T::nan(),
            cavity_amp,
            magnon_amp,
            converged: false,
            drift: T::nan(),
        });
    }

    // Unwrap the envelope phase by accumulating principal increments.
    let mut phase = Vec::with_capacity(t.len());
    let mut acc = a[0].arg();
    phase.push(acc);
    for pair in a.windows(2) {
        acc += (pair[1] * pair[0].conj()).arg();
        phase.push(acc);
    }

    let offset = regression_frequency(t, &phase);
    let half = t.len() / 2;
    let drift = (regression_frequency(&t[..half], &phase[..half])
        - regression_frequency(&t[half..], &phase[half..]))
    .abs();

    // Circular mean of the cavity-magnon phase difference. The steady
    // ansatz has phase(a) - phase(m) = theta.
    let mut dir = Complex::new(T::zero(), T::zero());
    for (ai, mi) in a.iter().zip(m) {
        let w = *ai * mi.conj();
        let norm = w.norm();
        if norm > T::zero() {
            dir += w / norm;
        }
    }
    let mut theta = if magnon_amp > cavity_amp * T::of(1e-9) && dir.norm() > T::zero() {
        dir.arg()
    } else {
        T::nan()
    };
    if let (Some((lo, hi)), true) = (theta_window, theta.is_finite()) {
        let span = T::two_pi();
        let k = ((lo - theta) / span).ceil();
        let mapped = theta + span * k;
        if mapped < hi {
            theta = mapped;
        }
    }

    Ok(SteadyEstimate {
        nu_s: trace.meta.frame_nu_c + offset,
        theta,
        cavity_amp,
        magnon_amp,
        converged: drift < T::of(DRIFT_THRESHOLD) && cavity_amp >= floor,
        drift,
    })
}

/// Characteristic polynomial of a 4x4 matrix by the Faddeev-LeVerrier
/// recursion; returns monic coefficients `[1, c1, c2, c3, c4]`.
fn charpoly4<T: Real>(a: &[[T; 4]; 4]) -> [T; 5] {
    let mul = |x: &[[T; 4]; 4], y: &[[T; 4]; 4]| {
        let mut out = [[T::zero(); 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                let mut s = T::zero();
                for (k, yk) in y.iter().enumerate() {
                    s += x[i][k] * yk[j];
                }
                out[i][j] = s;
            }
        }
        out
    };
    let trace = |x: &[[T; 4]; 4]| x[0][0] + x[1][1] + x[2][2] + x[3][3];
    let add_diag = |x: &[[T; 4]; 4], c: T| {
        let mut out = *x;
        for (i, row) in out.iter_mut().enumerate() {
            row[i] += c;
        }
        out
    };

    let m1 = *a;
    let c1 = -trace(&m1);
    let m2 = mul(a, &add_diag(&m1, c1));
    let c2 = -trace(&m2) / T::of(2.0);
    let m3 = mul(a, &add_diag(&m2, c2));
    let c3 = -trace(&m3) / T::of(3.0);
    let m4 = mul(a, &add_diag(&m3, c3));
    let c4 = -trace(&m4) / T::of(4.0);
    [T::one(), c1, c2, c3, c4]
}

/// All roots of a monic quartic by Durand-Kerner iteration.
fn quartic_roots<T: Real>(c: &[T; 5]) -> Vec<Complex<T>> {
    let bound = T::one()
        + c[1]
            .abs()
            .max(c[2].abs().sqrt())
            .max(c[3].abs().powf(T::of(1.0 / 3.0)))
            .max(c[4].abs().powf(T::of(0.25)));
    let eval = |z: Complex<T>| {
        let mut p = Complex::new(c[0], T::zero());
        for &ck in &c[1..] {
            p = p * z + Complex::new(ck, T::zero());
        }
        p
    };
    let seed = Complex::new(T::of(0.4), T::of(0.9));
    let mut z: Vec<Complex<T>> = (0..4)
        .scan(Complex::new(T::one(), T::zero()), |acc, _| {
            *acc *= seed;
            Some(*acc * bound)
        })
        .collect();
    for _ in 0..500 {
        let mut shift = T::zero();
        for j in 0..4 {
            let mut denom = Complex::new(T::one(), T::zero());
            for k in 0..4 {
                if k != j {
                    denom *= z[j] - z[k];
                }
            }
            if denom.norm() == T::zero() {
                continue;
            }
            let dz = eval(z[j]) / denom;
            z[j] -= dz;
            shift = shift.max(dz.norm());
        }
        if shift < bound * T::of(1e-15) {
            break;
        }
    }
    z
}

/// Eigenvalues (rad/us) of the real 4x4 Jacobian of the equations of
/// motion, linearized around a solved steady state in the frame rotating at
/// its synchronization frequency.
///
/// One eigenvalue is always (numerically) zero: the global phase of the
/// limit cycle. The state is stable when every other eigenvalue has a
/// negative real part; see [`spectrum_is_stable`].
///
/// Relation to the solver's slope rule: the residual slope changes sign
/// exactly where the product of the non-rotational eigenvalues does, so
/// the two classifications agree on every fold (real eigenvalue crossing).
/// A slope-stable branch can nevertheless shed stability through a complex
/// pair when the magnon amplitude relaxes slowly — strong coherent
/// coupling with a light magnon line near a fold is the typical case — and
/// there this spectrum, not the slope, matches the integrated dynamics.
pub fn jacobian_eigenvalues<T: Real>(
    s: &SyncSolution<T>,
    p: &SystemParams<T>,
    c: &CouplingSet<T>,
    delta: T,
) -> Result<Vec<Complex<T>>, DynamicsError> {
    p.validate()?;
    let tol = T::of(1e-6);
    let decoupled = theta_interval(c).is_err();
    if decoupled {
        // Bare limit cycle: accept only the trivial solution shape.
        if s.ratio.abs() > tol || s.nu_s.abs() > tol || s.magnon_amp.abs() > tol {
            return Err(DynamicsError::InconsistentSolution {
                what: "couplings vanish but the solution has magnon content",
            });
        }
    } else {
        let residual =
            eq1a_residual(s.theta, c).map_err(|_| DynamicsError::InconsistentSolution {
                what: "theta outside the admissible window",
            })?;
        if (residual - delta).abs() > tol {
            return Err(DynamicsError::InconsistentSolution {
                what: "phase balance residual does not match delta",
            });
        }
    }
    let gain = GainSettings::from(p);
    let eom = Eom::new(p, c, delta, false);
    let amp_sq = s.cavity_amp * s.cavity_amp;
    let load = if s.cavity_amp > T::zero() {
        eom.gain_at(amp_sq)
    } else {
        return Err(DynamicsError::InconsistentSolution {
            what: "gain cannot sustain this state (zero amplitude)",
        });
    };
    let expected_load =
        s.ratio * ((c.direct + c.dissipative) * s.theta.sin() + c.coherent * s.theta.cos());
    if (load - expected_load).abs() > tol * (T::one() + gain.pump) {
        return Err(DynamicsError::InconsistentSolution {
            what: "amplitude violates the gain balance",
        });
    }

    let two_pi = T::two_pi();
    let p_lin = two_pi * (p.gain - p.beta);
    let q_sat = two_pi * p.gain * p.saturation;
    let d_cav = two_pi * s.nu_s;
    let d_mag = two_pi * (s.nu_s - delta);
    let a_damp = two_pi * c.alpha_eff.re;
    let cam = eom.cavity_from_magnon * two_pi;
    let cma = eom.magnon_from_cavity * two_pi;

    // Steady state with the cavity phase as gauge reference: u = A real,
    // v = M e^{-i theta}. The saturable gain linearizes anisotropically
    // around a real u (3A^2 along it, A^2 across); the magnon line is
    // linear, so its block is plain complex multiplication.
    let ux = s.cavity_amp;
    let j = [
        [
            p_lin - q_sat * T::of(3.0) * ux * ux,
            -d_cav,
            cam.re,
            -cam.im,
        ],
        [d_cav, p_lin - q_sat * ux * ux, cam.im, cam.re],
        [cma.re, -cma.im, -a_damp, -d_mag],
        [cma.im, cma.re, d_mag, -a_damp],
    ];
    Ok(quartic_roots(&charpoly4(&j)))
}

/// Stability of a Jacobian spectrum: drop the rotational zero mode (the
/// eigenvalue of smallest |Re|) and require every remaining real part to be
/// negative.
pub fn spectrum_is_stable<T: Real>(eigenvalues: &[Complex<T>]) -> bool {
    if eigenvalues.is_empty() {
        return false;
    }
    let mut zero_idx = 0;
    for (i, ev) in eigenvalues.iter().enumerate() {
        if ev.re.abs() < eigenvalues[zero_idx].re.abs() {
            zero_idx = i;
        }
    }
    eigenvalues
        .iter()
        .enumerate()
        .all(|(i, ev)| i == zero_idx || ev.re < T::zero())
}

/// Writes a trace as CSV with full round-trip precision.
pub fn write_trace_csv<T: Real, W: Write>(trace: &TimeTrace<T>, out: &mut W) -> io::Result<()> {
    writeln!(out, "t_us,re_a,im_a,re_m,im_m")?;
    for i in 0..trace.t.len() {
        writeln!(
            out,
            "{},{},{},{},{}",
            trace.t[i], trace.a[i].re, trace.a[i].im, trace.m[i].re, trace.m[i].im
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sync::solve_branches;
    use approx::assert_abs_diff_eq;
    use num_complex::Complex64;
    use std::f64::consts::{FRAC_PI_2, TAU};

    fn uncoupled(gain: f64, beta: f64, saturation: f64) -> SystemParams<f64> {
        SystemParams {
            nu_c: 3820.0,
            beta,
            gain,
            saturation,
            kappa: 0.0,
            nu_m: 3820.0,
            alpha: 1.8,
            gamma: 0.0,
            g: 0.0,
        }
    }

    fn no_coupling() -> CouplingSet<f64> {
        CouplingSet::real(0.0, 0.0, 0.0, 1.8)
    }

    fn coherent_system() -> (SystemParams<f64>, CouplingSet<f64>) {
        let p = SystemParams {
            nu_c: 3820.0,
            beta: 85.4,
            gain: 170.8,
            saturation: 1.0,
            kappa: 18.7,
            nu_m: 3820.0,
            alpha: 1.8,
            gamma: 0.0,
            g: 11.0,
        };
        (p, CouplingSet::real(11.0, 0.0, 0.0, 1.8))
    }

    #[test]
    fn limit_cycle_amplitude_matches_closed_form() {
        for (gain, beta, saturation) in [(170.8, 85.4, 1.0), (10.0, 2.0, 0.5), (1.2, 0.4, 2.0)] {
            let p = uncoupled(gain, beta, saturation);
            let target_sq = (gain - beta) / (gain * saturation);
            let settle = 30.0 / (gain - beta);
            let mut spec = IntegrationSpec::new(2.0 * settle);
            spec.samples = 2048;
            let trace = integrate(
                &p,
                &no_coupling(),
                0.0,
                Complex64::new(0.1 * target_sq.sqrt(), 0.0),
                Complex64::new(0.0, 0.0),
                &spec,
            )
            .unwrap();
            let est = extract_steady_state(&trace, 0.25 * settle, None).unwrap();
            assert!(est.converged);
            let amp_sq = est.cavity_amp * est.cavity_amp;
            assert!(
                (amp_sq - target_sq).abs() <= 1e-3 * target_sq,
                "|a|^2 = {amp_sq}, closed form {target_sq}"
            );
            assert_abs_diff_eq!(est.nu_s, p.nu_c, epsilon = 1e-4);
        }
    }

    #[test]
    fn below_threshold_field_decays_monotonically() {
        let p = uncoupled(2.0, 7.0, 1.0);
        let spec = IntegrationSpec::new(3.0);
        let trace = integrate(
            &p,
            &no_coupling(),
            0.0,
            Complex64::new(0.3, 0.1),
            Complex64::new(0.0, 0.0),
            &spec,
        )
        .unwrap();
        assert!(!trace.meta.self_oscillating);
        for pair in trace.a.windows(2) {
            assert!(pair[1].norm() <= pair[0].norm() * (1.0 + 1e-12));
        }
        let est = extract_steady_state(&trace, 1.0, None).unwrap();
        assert!(!est.converged);
        assert!(est.cavity_amp < 1e-6);
    }

    #[test]
    fn synthetic_trace_extraction_is_exact() {
        let nu = 3.7;
        let n = 1000;
        let t: Vec<f64> = (0..=n).map(|k| 0.01 * k as f64).collect();
        let a: Vec<Complex64> = t
            .iter()
            .map(|&ti| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * nu * ti))
            .collect();
        let m: Vec<Complex64> = t
            .iter()
            .map(|&ti| Complex64::from_polar(0.5, -(2.0 * std::f64::consts::PI * nu * ti + 0.3)))
            .collect();
        let trace = TimeTrace {
            t,
            a,
            m,
            meta: TraceMeta {
                steps: 0,
                rejected: 0,
                rtol: 1e-9,
                atol: 1e-12,
                frame_nu_c: 0.0,
                delta: 0.0,
                self_oscillating: true,
            },
        };
        let est = extract_steady_state(&trace, 3.0, None).unwrap();
        assert_abs_diff_eq!(est.nu_s, nu, epsilon = 1e-10);
        assert_abs_diff_eq!(est.theta, 0.3, epsilon = 1e-10);
        assert_abs_diff_eq!(est.cavity_amp, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(est.magnon_amp, 0.5, epsilon = 1e-12);
        assert!(est.converged);

        // Window longer than half the trace violates the precondition.
        assert!(matches!(
            extract_steady_state(&trace, 6.0, None),
            Err(DynamicsError::WindowTooLong { .. })
        ));
    }

    #[test]
    fn generic_start_converges_to_the_single_dissipative_root() {
        let p = SystemParams {
            nu_c: 3820.0,
            beta: 85.4,
            gain: 170.8,
            saturation: 1.0,
            kappa: 18.7,
            nu_m: 3820.0,
            alpha: 0.9442,
            gamma: 6.2 * 6.2 / 18.7,
            g: 0.0,
        };
        let c = crate::model::coupling_from_link(
            &p,
            &crate::model::LinkSettings {
                phi: 0.0,
                sigma: 1.0,
                atten_db_per_m: 0.56,
                baseline_m: 1.0,
            },
        )
        .unwrap();
        let mut spec = IntegrationSpec::new(40.0);
        spec.samples = 8192;
        let trace = integrate(
            &p,
            &c,
            0.0,
            Complex64::new(0.2, 0.05),
            Complex64::new(0.1, -0.02),
            &spec,
        )
        .unwrap();
        let window = crate::sync::theta_interval(&c).unwrap();
        let est = extract_steady_state(&trace, 10.0, Some(window)).unwrap();
        assert!(est.converged);
        assert_abs_diff_eq!(est.nu_s, p.nu_c, epsilon = 1e-3);
        assert_abs_diff_eq!(est.theta, -FRAC_PI_2, epsilon = 1e-2);

        let roots = solve_branches(0.0, &c, &GainSettings::from(&p)).unwrap();
        assert_eq!(roots.len(), 1);
        assert_abs_diff_eq!(est.cavity_amp, roots[0].cavity_amp, epsilon = 1e-3);
        assert_abs_diff_eq!(est.magnon_amp, roots[0].magnon_amp, epsilon = 1e-3);
    }

    #[test]
    fn seeded_starts_reach_both_stable_branches() {
        let (p, c) = coherent_system();
        let gain = GainSettings::from(&p);
        let roots = solve_branches(10.0, &c, &gain).unwrap();
        let stable: Vec<_> = roots.iter().filter(|s| s.stable).collect();
        assert_eq!(stable.len(), 2);
        let window = crate::sync::theta_interval(&c).unwrap();
        for root in stable {
            let a0 = Complex64::new(root.cavity_amp * 1.02, 0.0);
            let m0 = Complex64::from_polar(root.magnon_amp * 0.98, -root.theta + 0.05);
            let mut spec = IntegrationSpec::new(60.0);
            spec.samples = 16384;
            let trace = integrate(&p, &c, 10.0, a0, m0, &spec).unwrap();
            let est = extract_steady_state(&trace, 15.0, Some(window)).unwrap();
            assert!(est.converged);
            assert_abs_diff_eq!(est.nu_s - p.nu_c, root.nu_s, epsilon = 1e-3);
            assert_abs_diff_eq!(est.theta, root.theta, epsilon = 1e-2);
        }
    }

    #[test]
    fn tolerance_refinement_shifts_frequency_below_threshold() {
        let (p, c) = coherent_system();
        let run = |rtol: f64, atol: f64| {
            let mut spec = IntegrationSpec::new(40.0);
            spec.samples = 8192;
            spec.rtol = rtol;
            spec.atol = atol;
            let trace = integrate(
                &p,
                &c,
                10.0,
                Complex64::new(0.7, 0.0),
                Complex64::new(0.1, 0.1),
                &spec,
            )
            .unwrap();
            extract_steady_state(&trace, 10.0, None).unwrap().nu_s
        };
        let coarse = run(1e-8, 1e-11);
        let fine = run(5e-9, 5e-12);
        assert!(
            (coarse - fine).abs() < 1e-5,
            "frequency moved by {} under tolerance refinement",
            (coarse - fine).abs()
        );
    }

    #[test]
    fn uncoupled_jacobian_matches_analytic_spectrum() {
        let p = uncoupled(170.8, 85.4, 1.0);
        let amp = ((p.gain - p.beta) / (p.gain * p.saturation)).sqrt();
        let s = SyncSolution {
            theta: 0.0,
            ratio: 0.0,
            nu_s: 0.0,
            cavity_amp: amp,
            magnon_amp: 0.0,
            stable: true,
        };
        let mut eigs = jacobian_eigenvalues(&s, &p, &no_coupling(), 0.0).unwrap();
        eigs.sort_by(|x, y| x.re.partial_cmp(&y.re).unwrap());
        let two_pi = std::f64::consts::TAU;
        assert_abs_diff_eq!(eigs[0].re, -2.0 * two_pi * 85.4, epsilon = 1e-6);
        assert_abs_diff_eq!(eigs[1].re, -two_pi * 1.8, epsilon = 1e-6);
        assert_abs_diff_eq!(eigs[2].re, -two_pi * 1.8, epsilon = 1e-6);
        assert_abs_diff_eq!(eigs[3].re, 0.0, epsilon = 1e-6);
        assert!(spectrum_is_stable(&eigs));
    }

    #[test]
    fn jacobian_agrees_with_slope_rule_on_reference_branches() {
        let (p, c) = coherent_system();
        let roots = solve_branches(10.0, &c, &GainSettings::from(&p)).unwrap();
        assert_eq!(roots.len(), 3);
        for s in &roots {
            let eigs = jacobian_eigenvalues(s, &p, &c, 10.0).unwrap();
            assert_eq!(spectrum_is_stable(&eigs), s.stable);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_of_the_flow() {
        // Rebuild the right-hand side in the frame rotating at the solved
        // frequency and difference it around the fixed point; the analytic
        // Jacobian used for eigenvalues must match entry for entry.
        let (p, c) = coherent_system();
        let roots = solve_branches(10.0, &c, &GainSettings::from(&p)).unwrap();
        for s in &roots {
            let eom = Eom::new(&p, &c, 10.0, false);
            let omega = TAU * s.nu_s;
            let rhs_sync = |x: &[f64; 4]| -> [f64; 4] {
                let y = [Complex64::new(x[0], x[1]), Complex64::new(x[2], x[3])];
                let f = eom.rhs(&y);
                let rot = Complex64::new(0.0, omega);
                let fu = f[0] + rot * y[0];
                let fv = f[1] + rot * y[1];
                [fu.re, fu.im, fv.re, fv.im]
            };
            let x0 = [
                s.cavity_amp,
                0.0,
                s.magnon_amp * s.theta.cos(),
                -s.magnon_amp * s.theta.sin(),
            ];
            // Fixed point check first.
            let f0 = rhs_sync(&x0);
            for v in f0 {
                assert_abs_diff_eq!(v, 0.0, epsilon = 1e-6);
            }

            let eps = 1e-6;
            let mut fd = [[0.0; 4]; 4];
            for col in 0..4 {
                let mut hi = x0;
                let mut lo = x0;
                hi[col] += eps;
                lo[col] -= eps;
                let (fh, fl) = (rhs_sync(&hi), rhs_sync(&lo));
                for row in 0..4 {
                    fd[row][col] = (fh[row] - fl[row]) / (2.0 * eps);
                }
            }

            let two_pi = TAU;
            let p_lin = two_pi * (p.gain - p.beta);
            let q_sat = two_pi * p.gain * p.saturation;
            let d_cav = two_pi * s.nu_s;
            let d_mag = two_pi * (s.nu_s - 10.0);
            let a_damp = two_pi * c.alpha_eff.re;
            let cam = eom.cavity_from_magnon * two_pi;
            let cma = eom.magnon_from_cavity * two_pi;
            let ux = s.cavity_amp;
            let analytic = [
                [p_lin - q_sat * 3.0 * ux * ux, -d_cav, cam.re, -cam.im],
                [d_cav, p_lin - q_sat * ux * ux, cam.im, cam.re],
                [cma.re, -cma.im, -a_damp, -d_mag],
                [cma.im, cma.re, d_mag, -a_damp],
            ];
            for row in 0..4 {
                for col in 0..4 {
                    assert_abs_diff_eq!(fd[row][col], analytic[row][col], epsilon = 1e-3);
                }
            }

            // And the quartic solver itself, judged by backward error: each
            // returned root must exactly solve a polynomial whose
            // coefficients differ only in the last few bits.
            let coeffs = charpoly4(&analytic);
            for root in quartic_roots(&coeffs) {
                let mut val = Complex64::new(coeffs[0], 0.0);
                let mut mag = coeffs[0].abs();
                for &ck in &coeffs[1..] {
                    val = val * root + Complex64::new(ck, 0.0);
                    mag = mag * root.norm() + ck.abs();
                }
                assert!(
                    val.norm() <= 1e-10 * mag,
                    "backward error {} vs scale {mag}",
                    val.norm()
                );
            }
        }
    }

    #[test]
    fn jacobian_rejects_inconsistent_solutions() {
        let (p, c) = coherent_system();
        let mut s = solve_branches(10.0, &c, &GainSettings::from(&p)).unwrap()[0];
        s.theta += 0.3;
        assert!(matches!(
            jacobian_eigenvalues(&s, &p, &c, 10.0),
            Err(DynamicsError::InconsistentSolution { .. })
        ));
    }

    #[test]
    fn trace_csv_has_header_and_all_rows() {
        let p = uncoupled(10.0, 2.0, 0.5);
        let mut spec = IntegrationSpec::new(1.0);
        spec.samples = 16;
        let trace = integrate(
            &p,
            &no_coupling(),
            0.0,
            Complex64::new(0.5, 0.0),
            Complex64::new(0.0, 0.0),
            &spec,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t_us,re_a,im_a,re_m,im_m");
        assert_eq!(lines.len(), trace.t.len() + 1);
        for pair in trace.t.windows(2) {
            assert!(pair[1] > pair[0]);
        }
    }

    #[test]
    fn rejects_invalid_requests() {
        let p = uncoupled(10.0, 2.0, 0.5);
        let mut spec = IntegrationSpec::new(1.0);
        spec.rtol = 0.0;
        assert!(matches!(
            integrate(
                &p,
                &no_coupling(),
                0.0,
                Complex64::new(0.1, 0.0),
                Complex64::new(0.0, 0.0),
                &spec
            ),
            Err(DynamicsError::NonPositive { what: "rtol" })
        ));
        let spec = IntegrationSpec::new(1.0);
        assert!(matches!(
            integrate(
                &p,
                &no_coupling(),
                f64::NAN,
                Complex64::new(0.1, 0.0),
                Complex64::new(0.0, 0.0),
                &spec
            ),
            Err(DynamicsError::NonFinite { what: "delta" })
        ));
    }
}
