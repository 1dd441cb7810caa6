//! Run configuration: one TOML file drives every pipeline stage. All
//! physical values carry unit-suffixed keys; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitstack::FitOptions;
use crate::lineshape::{TransverseResponse, ZeroFieldFeature};
use crate::magnetostatics::{CrossPattern, GridSpec, Route, Vec3};
use crate::synth::{CameraModel, ClusterSpec, ScanProtocol, SceneSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub arm_length_m: f64,
    pub wire_width_m: f64,
    pub n_filaments: usize,
    pub route: Route,
    #[serde(rename = "current_A")]
    pub current_a: f64,
    pub nx: usize,
    pub ny: usize,
    pub pitch_m: f64,
    pub standoff_m: f64,
    pub base_rate_hz: f64,
    pub cluster_sigma: f64,
    /// Pool the pattern field over blocks of this many camera pixels
    /// (usually the fit bin factor) so each superpixel sees one field value.
    pub field_block: usize,
}

impl Default for SceneSection {
    fn default() -> Self {
        // Desk-scale default: a quarter of the camera's pixels at 4x the
        // pitch, preserving the full field of view so the maps span the
        // same field range as the full frame. Full 2448x2048 at 0.15 um
        // works through the same config.
        let pattern = CrossPattern::default();
        SceneSection {
            arm_length_m: pattern.arm_length_m,
            wire_width_m: pattern.wire_width_m,
            n_filaments: pattern.n_filaments,
            route: Route::P34,
            current_a: 0.5,
            nx: 612,
            ny: 512,
            pitch_m: 0.6e-6,
            standoff_m: 0.11e-3,
            base_rate_hz: 2.0e5,
            cluster_sigma: 0.2,
            field_block: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSection {
    pub y0: f64,
    pub contrast_pct: f64,
    #[serde(rename = "fwhm_T")]
    pub fwhm_t: f64,
    #[serde(rename = "center_T")]
    pub center_t: f64,
}

impl Default for FeatureSection {
    fn default() -> Self {
        FeatureSection {
            y0: 1.0,
            contrast_pct: 1.0,
            fwhm_t: 2.0e-3,
            center_t: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub bin_factor: usize,
    pub max_iter: usize,
    pub poisson_weights: bool,
    pub min_significance: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        let opts = FitOptions::default();
        FitSection {
            bin_factor: 16,
            max_iter: opts.max_iter,
            poisson_weights: opts.poisson_weights,
            min_significance: opts.min_significance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    pub min_contrast_pct: f64,
    #[serde(rename = "max_fwhm_T")]
    pub max_fwhm_t: f64,
    #[serde(rename = "max_center_err_T")]
    pub max_center_err_t: f64,
}

impl Default for MaskSection {
    fn default() -> Self {
        MaskSection {
            min_contrast_pct: 0.2,
            max_fwhm_t: 6e-3,
            max_center_err_t: 0.5e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundtripSection {
    pub min_pearson_r: f64,
    /// Shift-map RMSE bound as a fraction of the peak simulated |Bz|.
    pub max_rmse_frac_of_peak: f64,
    /// Absolute override for the RMSE bound, in tesla. When set, the
    /// tighter of the two bounds applies.
    #[serde(rename = "max_rmse_T")]
    pub max_rmse_t: Option<f64>,
    /// Minimum shift-vs-current R^2 for the optional linearity pass.
    pub min_shift_r2: f64,
    /// Minimum width/contrast R^2 for the optional linearity pass.
    pub min_trend_r2: f64,
}

impl Default for RoundtripSection {
    fn default() -> Self {
        RoundtripSection {
            min_pearson_r: 0.98,
            max_rmse_frac_of_peak: 0.05,
            max_rmse_t: None,
            min_shift_r2: 0.999999,
            min_trend_r2: 0.999,
        }
    }
}

/// The full run configuration. Every section has defaults, so an empty
/// file (or no file) is a valid desk-scale run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub scene: SceneSection,
    pub feature: FeatureSection,
    pub response: TransverseResponse,
    pub protocol: ScanProtocol,
    pub camera: CameraModel,
    pub fit: FitSection,
    pub mask: MaskSection,
    pub roundtrip: RoundtripSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn pattern(&self) -> CrossPattern {
        CrossPattern {
            arm_length_m: self.scene.arm_length_m,
            wire_width_m: self.scene.wire_width_m,
            n_filaments: self.scene.n_filaments,
            center: Vec3::ZERO,
        }
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            nx: self.scene.nx,
            ny: self.scene.ny,
            pitch_m: self.scene.pitch_m,
            standoff_m: self.scene.standoff_m,
            origin: Vec3::ZERO,
        }
    }

    pub fn base_feature(&self) -> Result<ZeroFieldFeature> {
        ZeroFieldFeature::from_peak_contrast(
            self.feature.y0,
            self.feature.contrast_pct / 100.0,
            self.feature.center_t,
            self.feature.fwhm_t,
        )
    }

    pub fn scene_spec(&self) -> Result<SceneSpec> {
        Ok(SceneSpec {
            pattern: self.pattern(),
            route: self.scene.route,
            current_a: self.scene.current_a,
            grid: self.grid(),
            base_rate_hz: self.scene.base_rate_hz,
            cluster: ClusterSpec {
                sigma_ln: self.scene.cluster_sigma,
            },
            feature: self.base_feature()?,
            response: self.response,
            field_block: self.scene.field_block,
        })
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            max_iter: self.fit.max_iter,
            poisson_weights: self.fit.poisson_weights,
            min_significance: self.fit.min_significance,
            ..FitOptions::default()
        }
    }
}
