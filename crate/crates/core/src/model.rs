//! System parameters and the traveling-wave coupling algebra.
//!
//! Frequencies and rates are cyclic (MHz), phases are radians, lengths are
//! meters, and the link transmission `sigma` is a dimensionless amplitude
//! factor in `[0, 1]`. Angular factors of `2*pi` appear only inside the
//! time-domain kernels, never in stored parameters.

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;

/// Floor applied to `Re(alpha_eff)` when it reaches zero, in MHz.
pub const DAMPING_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{what} must be finite")]
    NonFinite { what: &'static str },
    #[error("{what} must not be negative")]
    NegativeRate { what: &'static str },
    #[error("{what} must be positive")]
    NonPositive { what: &'static str },
    #[error("sigma = {sigma} outside [0, 1]")]
    SigmaOutOfRange { sigma: f64 },
    #[error("cable length diverges as sigma approaches zero")]
    UnboundedLength,
}

/// Cavity, gain, and magnon rates. All frequencies cyclic, in MHz.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct SystemParams<T> {
    /// Cavity resonance frequency.
    pub nu_c: T,
    /// Cavity intrinsic loss rate.
    pub beta: T,
    /// Linear negative-damping (gain) rate of the embedded amplifier.
    pub gain: T,
    /// Dimensionless gain saturation coefficient.
    pub saturation: T,
    /// Cavity decay rate into the traveling-wave channel.
    pub kappa: T,
    /// Magnon resonance frequency (informational; sweeps set it via detuning).
    pub nu_m: T,
    /// Magnon intrinsic damping rate.
    pub alpha: T,
    /// Magnon decay rate into the traveling-wave channel.
    pub gamma: T,
    /// Direct near-field photon-magnon coupling rate.
    pub g: T,
}

impl<T: Real> SystemParams<T> {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields: [(T, &'static str); 9] = [
            (self.nu_c, "nu_c"),
            (self.beta, "beta"),
            (self.gain, "gain"),
            (self.saturation, "saturation"),
            (self.kappa, "kappa"),
            (self.nu_m, "nu_m"),
            (self.alpha, "alpha"),
            (self.gamma, "gamma"),
            (self.g, "g"),
        ];
        for (value, what) in fields {
            if !value.is_finite() {
                return Err(ModelError::NonFinite { what });
            }
        }
        for (value, what) in [
            (self.beta, "beta"),
            (self.gain, "gain"),
            (self.kappa, "kappa"),
            (self.alpha, "alpha"),
            (self.gamma, "gamma"),
        ] {
            if value < T::zero() {
                return Err(ModelError::NegativeRate { what });
            }
        }
        if self.saturation <= T::zero() {
            return Err(ModelError::NonPositive { what: "saturation" });
        }
        Ok(())
    }

    /// Whether the bare cavity self-oscillates (gain exceeds loss). Callers
    /// must check this rather than assume it; below threshold the cavity
    /// field decays to zero.
    pub fn self_oscillating(&self) -> bool {
        self.gain > self.beta
    }
}

/// Traveling-wave link between the cavity and the magnon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct LinkSettings<T> {
    /// One-way propagation phase of the link, radians.
    pub phi: T,
    /// One-way amplitude transmission, in [0, 1].
    pub sigma: T,
    /// Cable attenuation in dB per meter (amplitude dB, 20 log10).
    pub atten_db_per_m: T,
    /// Physical length already present at sigma = 1, meters.
    pub baseline_m: T,
}

impl<T: Real> LinkSettings<T> {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.phi.is_finite() {
            return Err(ModelError::NonFinite { what: "phi" });
        }
        check_sigma(self.sigma)?;
        if !(self.atten_db_per_m > T::zero()) {
            return Err(ModelError::NonPositive {
                what: "atten_db_per_m",
            });
        }
        if !(self.baseline_m >= T::zero()) {
            return Err(ModelError::NegativeRate { what: "baseline_m" });
        }
        Ok(())
    }
}

fn check_sigma<T: Real>(sigma: T) -> Result<(), ModelError> {
    if !sigma.is_finite() || sigma < T::zero() || sigma > T::one() {
        return Err(ModelError::SigmaOutOfRange {
            sigma: sigma.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

/// Effective photon-magnon couplings after eliminating the traveling wave.
///
/// The wave mediates a coherent exchange `coherent` and a dissipative
/// channel `dissipative`, and dresses the magnon damping into the complex
/// `alpha_eff`. The near-field coupling `direct` passes through unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct CouplingSet<T> {
    /// Coherent indirect coupling J, MHz.
    pub coherent: T,
    /// Dissipative indirect coupling, MHz.
    pub dissipative: T,
    /// Dressed magnon damping; the imaginary part is a frequency pull that
    /// is treated as absorbed into the magnon frequency calibration, so all
    /// rate criteria use the real part.
    pub alpha_eff: Complex<T>,
    /// Direct near-field coupling g, MHz.
    pub direct: T,
}

impl<T: Real> CouplingSet<T> {
    /// Real part of the dressed magnon damping, the rate every strong
    /// coupling criterion compares against.
    pub fn damping(&self) -> T {
        self.alpha_eff.re
    }

    /// Convenience constructor for a set with purely real dressed damping.
    pub fn real(direct: T, coherent: T, dissipative: T, damping: T) -> Self {
        CouplingSet {
            coherent,
            dissipative,
            alpha_eff: Complex::new(damping, T::zero()),
            direct,
        }
    }
}

/// Strong coupling assessment for one [`CouplingSet`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct CouplingReport<T> {
    /// Coherent strong coupling: |J| exceeds the dressed magnon damping.
    pub strong_coherent: bool,
    /// Dissipative strong coupling: |Gamma| exceeds the dressed damping.
    pub strong_dissipative: bool,
    /// (g^2 + J^2 + Gamma^2) / Re(alpha_eff)^2, dimensionless.
    pub cooperativity: T,
    /// max(|J|, |Gamma|, |g|) - Re(alpha_eff), MHz.
    pub margin: T,
    /// True when Re(alpha_eff) <= 0 and the cooperativity denominator was
    /// floored at [`DAMPING_FLOOR`].
    pub damping_floored: bool,
}

/// Derives the effective couplings for a link with transmission `sigma`.
///
/// One-way quantities scale once with `sigma`; the back-action the magnon
/// receives from its own radiated wave makes a round trip and scales with
/// `sigma^2` and twice the propagation phase.
pub fn coupling_from_link<T: Real>(
    p: &SystemParams<T>,
    link: &LinkSettings<T>,
) -> Result<CouplingSet<T>, ModelError> {
    p.validate()?;
    link.validate()?;
    let root = (p.kappa * p.gamma).sqrt();
    let one_way = link.sigma * root;
    let two_phi = link.phi + link.phi;
    Ok(CouplingSet {
        coherent: -one_way * link.phi.sin(),
        dissipative: one_way * link.phi.cos(),
        alpha_eff: Complex::new(p.alpha, T::zero())
            + Complex::new(two_phi.cos(), two_phi.sin()) * (link.sigma * link.sigma * p.gamma),
        direct: p.g,
    })
}

/// Classifies a coupling set against the strong coupling criteria.
pub fn strong_coupling_report<T: Real>(c: &CouplingSet<T>) -> CouplingReport<T> {
    let damping = c.damping();
    let floor = T::of(DAMPING_FLOOR);
    let floored = damping <= T::zero();
    let denom = if damping > floor { damping } else { floor };
    let power = c.direct * c.direct + c.coherent * c.coherent + c.dissipative * c.dissipative;
    let strongest = c
        .coherent
        .abs()
        .max(c.dissipative.abs())
        .max(c.direct.abs());
    CouplingReport {
        strong_coherent: c.coherent.abs() > damping,
        strong_dissipative: c.dissipative.abs() > damping,
        cooperativity: power / (denom * denom),
        margin: strongest - damping,
        damping_floored: floored,
    }
}

/// Cable length equivalent to an amplitude transmission `sigma`.
///
/// Attenuation is amplitude dB, so `length = baseline - 20 log10(sigma) /
/// atten`. `sigma = 1` maps to the baseline; `sigma = 0` has no finite
/// equivalent.
pub fn equivalent_cable_length<T: Real>(sigma: T, link: &LinkSettings<T>) -> Result<T, ModelError> {
    link.validate()?;
    check_sigma(sigma)?;
    if sigma == T::zero() {
        return Err(ModelError::UnboundedLength);
    }
    let twenty = T::of(20.0);
    Ok(link.baseline_m + (-twenty * sigma.log10()) / link.atten_db_per_m)
}

/// Which strong coupling criterion a distance budget is solved against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    Coherent,
    Dissipative,
}

/// Result of [`max_strong_coupling_distance`], recording how the limiting
/// transmission was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
#[serde(tag = "path", rename_all = "snake_case")]
pub enum DistanceBudget<T> {
    /// Caller supplied the limiting transmission directly.
    Threshold { sigma: T, length_m: T },
    /// Limiting transmission solved from the strong coupling criterion.
    Solved { sigma: T, length_m: T },
    /// Strong coupling holds for every transmission down to zero.
    Unbounded,
    /// No transmission in (0, 1] reaches strong coupling.
    NeverStrong,
}

impl<T: Copy> DistanceBudget<T> {
    pub fn length_m(&self) -> Option<T> {
        match self {
            DistanceBudget::Threshold { length_m, .. }
            | DistanceBudget::Solved { length_m, .. } => Some(*length_m),
            _ => None,
        }
    }

    pub fn sigma(&self) -> Option<T> {
        match self {
            DistanceBudget::Threshold { sigma, .. } | DistanceBudget::Solved { sigma, .. } => {
                Some(*sigma)
            }
            _ => None,
        }
    }
}

/// Margin of the selected coupling over the dressed damping at one `sigma`.
fn strong_margin<T: Real>(
    p: &SystemParams<T>,
    link: &LinkSettings<T>,
    mode: CouplingMode,
    sigma: T,
) -> T {
    let root = (p.kappa * p.gamma).sqrt();
    let projection = match mode {
        CouplingMode::Coherent => link.phi.sin().abs(),
        CouplingMode::Dissipative => link.phi.cos().abs(),
    };
    let two_phi = link.phi + link.phi;
    let damping = p.alpha + sigma * sigma * p.gamma * two_phi.cos();
    sigma * root * projection - damping
}

/// Longest cable that still supports strong coupling of the requested kind.
///
/// With `sigma_threshold` given, this is just the equivalent length of that
/// transmission. Otherwise the smallest transmission whose selected coupling
/// still matches the dressed damping is solved by a dense scan plus
/// bisection, and the equivalent length of that threshold is returned.
pub fn max_strong_coupling_distance<T: Real>(
    p: &SystemParams<T>,
    link: &LinkSettings<T>,
    mode: CouplingMode,
    sigma_threshold: Option<T>,
) -> Result<DistanceBudget<T>, ModelError> {
    p.validate()?;
    link.validate()?;
    if let Some(sigma) = sigma_threshold {
        let length_m = equivalent_cable_length(sigma, link)?;
        return Ok(DistanceBudget::Threshold { sigma, length_m });
    }

    let n = 4096;
    let mut lo = T::zero();
    let mut bracket = None;
    for k in 1..=n {
        let sigma = T::of(k as f64 / n as f64);
        if strong_margin(p, link, mode, sigma) >= T::zero() {
            bracket = Some((lo, sigma));
            break;
        }
        lo = sigma;
    }
    let (mut lo, mut hi) = match bracket {
        Some(b) => b,
        None => return Ok(DistanceBudget::NeverStrong),
    };
    for _ in 0..200 {
        let mid = (lo + hi) / T::of(2.0);
        if mid <= lo || mid >= hi {
            break;
        }
        if strong_margin(p, link, mode, mid) >= T::zero() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let sigma = hi;
    if sigma < T::of(1e-12) {
        return Ok(DistanceBudget::Unbounded);
    }
    let length_m = equivalent_cable_length(sigma, link)?;
    Ok(DistanceBudget::Solved { sigma, length_m })
}
