//! Zero-field cross-relaxation feature: the Gaussian dip in normalized
//! fluorescence traced out by scanning a background field, and its response
//! to sample fields parallel and transverse to the scan axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 1 / sqrt(2 pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// FWHM of a Gaussian in units of its sigma: 2 sqrt(2 ln 2).
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// The four feature parameters. `amplitude` is the signed area-like factor
/// multiplying the unit-area Gaussian: negative for a fluorescence dip, so
/// the model reads y0 + C * exp(-(b - center)^2 / 2 w^2) / (w sqrt(2 pi))
/// with C carrying units of [y] * tesla. `sigma_t` is the Gaussian sigma in
/// tesla; FWHM is always derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroFieldFeature {
    pub y0: f64,
    #[serde(rename = "amplitude_yT")]
    pub amplitude: f64,
    #[serde(rename = "center_T")]
    pub center_t: f64,
    #[serde(rename = "sigma_T")]
    pub sigma_t: f64,
}

impl ZeroFieldFeature {
    pub fn new(y0: f64, amplitude: f64, center_t: f64, sigma_t: f64) -> Result<Self> {
        let f = ZeroFieldFeature {
            y0,
            amplitude,
            center_t,
            sigma_t,
        };
        f.validate()?;
        Ok(f)
    }

    /// Builds a dip from reportable quantities: fractional peak depth
    /// (e.g. 0.01 for a 1% dip) and FWHM in tesla.
    pub fn from_peak_contrast(y0: f64, contrast: f64, center_t: f64, fwhm_t: f64) -> Result<Self> {
        if !(fwhm_t > 0.0) {
            return Err(Error::InvalidArgument("FWHM must be positive".into()));
        }
        let sigma_t = fwhm_t / FWHM_PER_SIGMA;
        let amplitude = -contrast * y0 * sigma_t / INV_SQRT_2PI;
        ZeroFieldFeature::new(y0, amplitude, center_t, sigma_t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_t > 0.0) {
            return Err(Error::InvalidArgument("feature width must be positive".into()));
        }
        if !(self.y0 > 0.0) {
            return Err(Error::InvalidArgument("feature offset must be positive".into()));
        }
        if !self.center_t.is_finite() || !self.amplitude.is_finite() {
            return Err(Error::InvalidArgument("feature parameters must be finite".into()));
        }
        // Fluorescence must stay positive at the extremum.
        if self.amplitude.abs() * INV_SQRT_2PI / self.sigma_t >= self.y0 {
            return Err(Error::InvalidArgument(
                "peak depth exceeds the offset; fluorescence would go negative".into(),
            ));
        }
        Ok(())
    }

    /// Model value at scan field `b_scan` (tesla). Exactly symmetric about
    /// the center.
    pub fn evaluate(&self, b_scan: f64) -> f64 {
        let t = (b_scan - self.center_t) / self.sigma_t;
        self.y0 + self.amplitude * INV_SQRT_2PI / self.sigma_t * (-0.5 * t * t).exp()
    }

    /// Full width at half maximum, 2 sqrt(2 ln 2) * sigma.
    pub fn fwhm(&self) -> f64 {
        FWHM_PER_SIGMA * self.sigma_t
    }

    /// Extremum excursion |C| / (w sqrt(2 pi)), in y units.
    pub fn peak_depth(&self) -> f64 {
        self.amplitude.abs() * INV_SQRT_2PI / self.sigma_t
    }

    /// Fractional peak depth relative to the offset; the reportable
    /// contrast (0.01 = 1%).
    pub fn peak_contrast(&self) -> f64 {
        self.peak_depth() / self.y0
    }

    /// Column names matching [`ZeroFieldFeature::to_csv_row`].
    pub fn csv_header() -> &'static str {
        "y0,amplitude_yT,center_T,sigma_T,fwhm_T,contrast"
    }

    /// One CSV row of the parameters plus the derived FWHM and contrast.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{:e},{:e},{:e},{:e},{:e},{:e}",
            self.y0,
            self.amplitude,
            self.center_t,
            self.sigma_t,
            self.fwhm(),
            self.peak_contrast()
        )
    }
}

/// Empirical response of the feature to the in-plane (transverse) field
/// component: linear broadening and contrast loss above a knee. The slopes
/// are scene knobs, not measured constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransverseResponse {
    /// Added sigma per tesla of transverse field (dimensionless).
    pub width_slope: f64,
    /// Fractional contrast lost per tesla of transverse field (1/T).
    #[serde(rename = "contrast_slope_per_T")]
    pub contrast_slope_per_t: f64,
    /// Transverse field below which the feature is unaffected (tesla).
    #[serde(rename = "knee_T")]
    pub knee_t: f64,
}

impl Default for TransverseResponse {
    fn default() -> Self {
        TransverseResponse {
            width_slope: 0.8,
            contrast_slope_per_t: 500.0,
            knee_t: 0.0,
        }
    }
}

impl TransverseResponse {
    pub fn validate(&self) -> Result<()> {
        if self.width_slope < 0.0 || self.contrast_slope_per_t < 0.0 || self.knee_t < 0.0 {
            return Err(Error::InvalidArgument(
                "transverse response slopes and knee must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Applies a sample field to the base feature.
///
/// The parallel component moves the center by exactly `b_par`; the
/// transverse component (must be >= 0) broadens the feature and scales its
/// fractional peak depth down, flooring at zero. The amplitude is recomputed
/// so the scaled depth holds at the broadened width.
pub fn respond(
    base: &ZeroFieldFeature,
    resp: &TransverseResponse,
    b_par: f64,
    b_perp: f64,
) -> ZeroFieldFeature {
    debug_assert!(b_perp >= 0.0);
    let excess = (b_perp - resp.knee_t).max(0.0);
    let sigma = base.sigma_t + resp.width_slope * excess;
    let depth_scale = (1.0 - resp.contrast_slope_per_t * excess).max(0.0);
    let depth = base.peak_depth() * depth_scale;
    let amplitude = base.amplitude.signum() * depth * sigma / INV_SQRT_2PI;
    ZeroFieldFeature {
        y0: base.y0,
        amplitude,
        center_t: base.center_t + b_par,
        sigma_t: sigma,
    }
}
