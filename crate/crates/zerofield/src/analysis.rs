//! Deliverables built from fitted maps: cross-section profiles,
//! current-linearity reports, comparison against simulated fields,
//! photon-shot-noise sensitivity estimates, and PNG rendering.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitstack::ParameterMaps;

/// Planck constant (J s), exact SI.
pub const H_PLANCK: f64 = 6.626_070_15e-34;
/// Bohr magneton (J/T), CODATA 2018.
pub const MU_B: f64 = 9.274_010_078_3e-24;
/// Electron g-factor magnitude used for the frequency-unit conversion.
pub const G_FACTOR_DEFAULT: f64 = 2.003;
/// Lineshape factor for a Gaussian resonance.
pub const P_F_GAUSSIAN: f64 = 0.70;

/// Inputs to the shot-noise sensitivity formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityInputs {
    pub p_f: f64,
    /// FWHM linewidth: tesla in FieldUnits mode, hertz in FrequencyUnits mode.
    pub gamma_fwhm: f64,
    /// Fractional contrast (0.01 = 1%).
    pub contrast: f64,
    /// Detected photon rate (counts/s).
    pub photon_rate: f64,
    pub h_planck: f64,
    pub g_factor: f64,
    pub mu_b: f64,
}

impl SensitivityInputs {
    pub fn field_units(gamma_fwhm_t: f64, contrast: f64, photon_rate: f64) -> Self {
        SensitivityInputs {
            p_f: P_F_GAUSSIAN,
            gamma_fwhm: gamma_fwhm_t,
            contrast,
            photon_rate,
            h_planck: H_PLANCK,
            g_factor: G_FACTOR_DEFAULT,
            mu_b: MU_B,
        }
    }
}

/// Which units the linewidth is measured in. The zero-field feature is
/// traced against a *field* scan, so its width is already a field and
/// FieldUnits is the default; FrequencyUnits applies the h/(g muB)
/// conversion used for microwave resonances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SensitivityMode {
    FieldUnits,
    FrequencyUnits,
}

/// Photon shot-noise limited field sensitivity, tesla per sqrt(Hz):
/// FieldUnits  : dB = p_f * Gamma_T / (C sqrt(I0))
/// FrequencyUnits: dB = p_f * (h / g muB) * Gamma_Hz / (C sqrt(I0))
pub fn sensitivity(inputs: &SensitivityInputs, mode: SensitivityMode) -> Result<f64> {
    if !(inputs.contrast > 0.0) {
        return Err(Error::InvalidArgument("contrast must be positive".into()));
    }
    if !(inputs.photon_rate > 0.0) {
        return Err(Error::InvalidArgument("photon rate must be positive".into()));
    }
    if !(inputs.gamma_fwhm > 0.0) {
        return Err(Error::InvalidArgument("linewidth must be positive".into()));
    }
    if !(inputs.p_f > 0.0) || inputs.p_f > 1.0 {
        return Err(Error::InvalidArgument(
            "lineshape factor must be in (0, 1]".into(),
        ));
    }
    let base = inputs.p_f * inputs.gamma_fwhm / (inputs.contrast * inputs.photon_rate.sqrt());
    Ok(match mode {
        SensitivityMode::FieldUnits => base,
        SensitivityMode::FrequencyUnits => base * inputs.h_planck / (inputs.g_factor * inputs.mu_b),
    })
}

/// Per-superpixel sensitivity from fitted FWHM and contrast plus a photon
/// rate map (counts/s per superpixel). Masked or non-detected pixels give
/// NaN.
pub fn sensitivity_map(maps: &ParameterMaps, rate_hz: &[f64], p_f: f64) -> Result<Vec<f64>> {
    if rate_hz.len() != maps.fwhm_t.len() {
        return Err(Error::Dimension(
            "rate map does not match the parameter maps".into(),
        ));
    }
    Ok((0..rate_hz.len())
        .map(|i| {
            let fwhm = maps.fwhm_t[i];
            let contrast = maps.contrast_pct[i] / 100.0;
            let rate = rate_hz[i];
            if fwhm.is_finite() && contrast > 0.0 && rate > 0.0 {
                p_f * fwhm / (contrast * rate.sqrt())
            } else {
                f64::NAN
            }
        })
        .collect())
}

/// One row of a map as (signed distance from the map center in um, value),
/// mask gaps preserved as NaN, values copied bit-exactly.
pub fn cross_section(
    data: &[f64],
    nx: usize,
    ny: usize,
    row: usize,
    pitch_m: f64,
) -> Result<Vec<(f64, f64)>> {
    if data.len() != nx * ny {
        return Err(Error::Dimension("raster size mismatch".into()));
    }
    if row >= ny {
        return Err(Error::InvalidArgument(format!(
            "row {row} outside 0..{ny}"
        )));
    }
    let mid = (nx as f64 - 1.0) / 2.0;
    Ok((0..nx)
        .map(|j| ((j as f64 - mid) * pitch_m * 1e6, data[row * nx + j]))
        .collect())
}

/// Ordinary least squares of y against x: (slope, intercept, R^2).
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        ((sxy * sxy) / (sxx * syy)).min(1.0)
    };
    (slope, intercept, r2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n_used: usize,
}

/// Fit-parameter trends against applied current at one superpixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    #[serde(rename = "currents_A")]
    pub currents_a: Vec<f64>,
    pub pixel: (usize, usize),
    pub shift: LineFit,
    pub fwhm: LineFit,
    pub contrast: LineFit,
}

/// Current below which the width/contrast trends are not taken at face
/// value; their lines are fitted on currents at or above this.
pub const LINEARITY_MIN_CURRENT_A: f64 = 0.1;

/// OLS line per fitted parameter versus current at superpixel (i, j).
/// The shift line uses every current; width and contrast use only currents
/// at or above 0.1 A (falling back to the full series if that leaves fewer
/// than two points).
pub fn linearity(series: &[(f64, &ParameterMaps)], i: usize, j: usize) -> Result<LinearityReport> {
    if series.len() < 3 {
        return Err(Error::InvalidArgument(
            "linearity needs at least 3 currents".into(),
        ));
    }
    let idx = {
        let maps = series[0].1;
        if i >= maps.ny || j >= maps.nx {
            return Err(Error::InvalidArgument(format!(
                "superpixel ({i}, {j}) outside {}x{} map",
                maps.ny, maps.nx
            )));
        }
        i * maps.nx + j
    };
    let gather = |get: &dyn Fn(&ParameterMaps) -> f64, restrict: bool| -> Result<LineFit> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &(current, maps) in series {
            if restrict && current < LINEARITY_MIN_CURRENT_A - 1e-12 {
                continue;
            }
            let v = get(maps);
            if v.is_finite() {
                xs.push(current);
                ys.push(v);
            }
        }
        if xs.len() < 2 {
            // Not enough points above the knee; use the whole series.
            for &(current, maps) in series {
                let v = get(maps);
                if v.is_finite() && !xs.contains(&current) {
                    xs.push(current);
                    ys.push(v);
                }
            }
        }
        if xs.len() < 2 {
            return Err(Error::InvalidArgument(
                "degenerate series: fewer than 2 usable points".into(),
            ));
        }
        let (slope, intercept, r2) = ols(&xs, &ys);
        Ok(LineFit {
            slope,
            intercept,
            r2,
            n_used: xs.len(),
        })
    };
    Ok(LinearityReport {
        currents_a: series.iter().map(|&(c, _)| c).collect(),
        pixel: (i, j),
        shift: gather(&|m| m.shift_t[idx], false)?,
        fwhm: gather(&|m| m.fwhm_t[idx], true)?,
        contrast: gather(&|m| m.contrast_pct[idx], true)?,
    })
}

/// Agreement metrics between a fitted shift map and a simulated Bz map
/// (already resampled to the superpixel grid), over unmasked pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareMetrics {
    #[serde(rename = "rmse_T")]
    pub rmse_t: f64,
    pub pearson_r: f64,
    #[serde(rename = "max_abs_err_T")]
    pub max_abs_err_t: f64,
    pub n_pixels: usize,
}

pub fn compare(shift_t: &[f64], sim_bz_t: &[f64], mask: &[bool]) -> Result<CompareMetrics> {
    if shift_t.len() != sim_bz_t.len() || shift_t.len() != mask.len() {
        return Err(Error::Dimension("compare inputs differ in size".into()));
    }
    let pairs: Vec<(f64, f64)> = shift_t
        .iter()
        .zip(sim_bz_t)
        .zip(mask)
        .filter(|((a, b), &m)| !m && a.is_finite() && b.is_finite())
        .map(|((a, b), _)| (*a, *b))
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "no unmasked pixels to compare".into(),
        ));
    }
    let n = pairs.len() as f64;
    let mut sq = 0.0;
    let mut max_abs: f64 = 0.0;
    for &(a, b) in &pairs {
        let d = a - b;
        sq += d * d;
        max_abs = max_abs.max(d.abs());
    }
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for &(a, b) in &pairs {
        cov += (a - ma) * (b - mb);
        va += (a - ma) * (a - ma);
        vb += (b - mb) * (b - mb);
    }
    let pearson_r = if va == 0.0 && vb == 0.0 {
        1.0
    } else if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va.sqrt() * vb.sqrt())
    };
    Ok(CompareMetrics {
        rmse_t: (sq / n).sqrt(),
        pearson_r,
        max_abs_err_t: max_abs,
        n_pixels: pairs.len(),
    })
}

/// Color scales for map rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Colormap {
    /// Blue-white-red, centered on zero. Mirroring the data mirrors the
    /// red and blue channels.
    Diverging,
    /// Dark-to-light perceptual ramp.
    Sequential,
}

/// Maps t in [0, 1] to RGB for the sequential ramp (viridis-like stops).
fn sequential_rgb(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let x = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let k = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - k as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        rgb[c] = (STOPS[k][c] + f * (STOPS[k + 1][c] - STOPS[k][c])).round() as u8;
    }
    rgb
}

/// Maps t in [-1, 1] to blue-white-red; exactly channel-mirrored under
/// t -> -t so a sign-flipped raster renders with red and blue exchanged.
fn diverging_rgb(t: f64) -> [u8; 3] {
    let t = t.clamp(-1.0, 1.0);
    let a = (255.0 * (1.0 - t.abs())).round() as u8;
    if t >= 0.0 {
        [255, a, a]
    } else {
        [a, a, 255]
    }
}

/// Neutral color for masked / NaN pixels.
const MASK_GRAY: [u8; 3] = [128, 128, 128];

/// Renders a raster to an 8-bit RGB PNG. For `Diverging` the scale is
/// symmetric about zero (an all-zero raster is uniform white); `range`
/// overrides the automatic data range. Deterministic bytes for fixed
/// inputs.
pub fn render_png(
    path: &Path,
    data: &[f64],
    nx: usize,
    ny: usize,
    colormap: Colormap,
    range: Option<(f64, f64)>,
) -> Result<()> {
    if data.len() != nx * ny {
        return Err(Error::Dimension("raster size mismatch".into()));
    }
    let finite: Vec<f64> = data.iter().copied().filter(|v| v.is_finite()).collect();
    let (lo, hi) = match range {
        Some((lo, hi)) if lo.is_finite() && hi.is_finite() && lo <= hi => (lo, hi),
        Some(_) => {
            return Err(Error::InvalidArgument("range must be finite".into()));
        }
        None => {
            let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if finite.is_empty() {
                (0.0, 0.0)
            } else {
                (lo, hi)
            }
        }
    };

    let mut rgb = Vec::with_capacity(nx * ny * 3);
    match colormap {
        Colormap::Diverging => {
            let amp = lo.abs().max(hi.abs());
            for &v in data {
                let px = if v.is_finite() {
                    diverging_rgb(if amp > 0.0 { v / amp } else { 0.0 })
                } else {
                    MASK_GRAY
                };
                rgb.extend_from_slice(&px);
            }
        }
        Colormap::Sequential => {
            let span = hi - lo;
            for &v in data {
                let px = if v.is_finite() {
                    sequential_rgb(if span > 0.0 { (v - lo) / span } else { 0.5 })
                } else {
                    MASK_GRAY
                };
                rgb.extend_from_slice(&px);
            }
        }
    }

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), nx as u32, ny as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::InvalidArgument(format!("png header: {e}")))?;
    writer
        .write_image_data(&rgb)
        .map_err(|e| Error::InvalidArgument(format!("png data: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn headline_sensitivity_in_field_units() {
        // FWHM 2 mT, contrast 1%, 9.68e8 counts/s -> about 4.5 uT/sqrt(Hz).
        let inputs = SensitivityInputs::field_units(2.0e-3, 0.01, 9.68e8);
        let db = sensitivity(&inputs, SensitivityMode::FieldUnits).unwrap();
        assert_relative_eq!(db, 4.5e-6, max_relative = 0.01);
    }

    #[test]
    fn doubling_contrast_halves_sensitivity() {
        let a = SensitivityInputs::field_units(2.0e-3, 0.01, 9.68e8);
        let b = SensitivityInputs::field_units(2.0e-3, 0.02, 9.68e8);
        let da = sensitivity(&a, SensitivityMode::FieldUnits).unwrap();
        let db = sensitivity(&b, SensitivityMode::FieldUnits).unwrap();
        assert_relative_eq!(da, 2.0 * db, max_relative = 1e-12);
    }

    #[test]
    fn frequency_mode_is_the_field_mode_with_the_gyromagnetic_conversion() {
        let gamma_t = 2.0e-3;
        let gamma_hz = G_FACTOR_DEFAULT * MU_B / H_PLANCK * gamma_t;
        let field = SensitivityInputs::field_units(gamma_t, 0.01, 9.68e8);
        let freq = SensitivityInputs {
            gamma_fwhm: gamma_hz,
            ..field
        };
        let a = sensitivity(&field, SensitivityMode::FieldUnits).unwrap();
        let b = sensitivity(&freq, SensitivityMode::FrequencyUnits).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }

    #[test]
    fn sensitivity_rejects_nonpositive_inputs() {
        let mut inputs = SensitivityInputs::field_units(2.0e-3, 0.0, 9.68e8);
        assert!(sensitivity(&inputs, SensitivityMode::FieldUnits).is_err());
        inputs.contrast = 0.01;
        inputs.photon_rate = -1.0;
        assert!(sensitivity(&inputs, SensitivityMode::FieldUnits).is_err());
    }

    #[test]
    fn compare_of_a_map_with_itself_is_exact() {
        let data = vec![1.0e-3, -2.0e-4, 3.0e-4, 0.0];
        let m = compare(&data, &data, &[false; 4]).unwrap();
        assert_eq!(m.rmse_t, 0.0);
        assert_eq!(m.pearson_r, 1.0);
        assert_eq!(m.max_abs_err_t, 0.0);
        assert_eq!(m.n_pixels, 4);
    }

    #[test]
    fn compare_requires_overlap() {
        let data = vec![1.0, 2.0];
        assert!(compare(&data, &data, &[true, true]).is_err());
    }

    #[test]
    fn ols_on_exact_line_is_exact() {
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 0.05).collect();
        let (slope, intercept, r2) = ols(&x, &y);
        assert_relative_eq!(slope, 3.0, max_relative = 1e-12);
        assert_relative_eq!(intercept, -0.05, max_relative = 1e-9);
        assert!(r2 > 1.0 - 1e-12);
    }

    #[test]
    fn cross_section_copies_bit_exact_with_gaps() {
        let data = vec![1.0, f64::NAN, 3.0, 4.0, 5.0, 6.0];
        let prof = cross_section(&data, 3, 2, 0, 2.4e-6).unwrap();
        assert_eq!(prof.len(), 3);
        assert_eq!(prof[0].1, 1.0);
        assert!(prof[1].1.is_nan());
        assert_relative_eq!(prof[0].0, -2.4, max_relative = 1e-12);
        assert_relative_eq!(prof[2].0, 2.4, max_relative = 1e-12);
        assert!(cross_section(&data, 3, 2, 2, 2.4e-6).is_err());
    }

    #[test]
    fn shift_profile_crosses_zero_on_the_wire_axis() {
        use crate::magnetostatics::{build_cross, field_on_grid, CrossPattern, GridSpec, Route};
        // Straight run along y (P12): a row profile crosses the wire
        // perpendicularly, so Bz flips sign at the axis and the two lobes
        // mirror each other.
        let paths = build_cross(&CrossPattern::default(), Route::P12, 0.5).unwrap();
        let grid = GridSpec {
            nx: 144,
            ny: 48,
            pitch_m: 2.4e-6,
            ..GridSpec::default()
        };
        let pooled = field_on_grid(&paths, &grid).unwrap().mean_pool(16).unwrap();
        let profile = cross_section(
            &pooled.bz,
            pooled.grid.nx,
            pooled.grid.ny,
            1,
            pooled.grid.pitch_m,
        )
        .unwrap();
        assert_eq!(profile.len(), 9);
        // Middle superpixel straddles the axis: essentially zero.
        let peak = profile.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
        assert!(profile[4].1.abs() < 1e-6 * peak, "center value {:.3e}", profile[4].1);
        assert!(profile[3].1 * profile[5].1 < 0.0, "no sign change at the axis");
        // Extrema antisymmetric within 2%.
        let (min, max) = profile
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.1), hi.max(p.1))
            });
        assert!((min + max).abs() <= 0.02 * max.abs());
    }

    fn toy_maps(n: usize) -> crate::fitstack::ParameterMaps {
        crate::fitstack::ParameterMaps {
            nx: n,
            ny: 1,
            bin_factor: 16,
            pitch_m: 0.6e-6,
            standoff_m: 0.11e-3,
            exposure_s: 0.01,
            shift_t: vec![0.0; n],
            shift_stderr_t: vec![1e-5; n],
            contrast_pct: vec![1.0; n],
            fwhm_t: vec![2.0e-3; n],
            y0_counts: vec![2000.0; n],
            rss: vec![0.0; n],
            quality: vec![0; n],
        }
    }

    #[test]
    fn sensitivity_map_properties() {
        // Uniform inputs give a uniform map equal to the scalar formula.
        let maps = toy_maps(6);
        let rate = vec![9.68e8; 6];
        let sens = sensitivity_map(&maps, &rate, P_F_GAUSSIAN).unwrap();
        let scalar = sensitivity(
            &SensitivityInputs::field_units(2.0e-3, 0.01, 9.68e8),
            SensitivityMode::FieldUnits,
        )
        .unwrap();
        assert!(sens.iter().all(|&v| v == sens[0]));
        assert_relative_eq!(sens[0], scalar, max_relative = 1e-12);

        // Brighter pixels are strictly more sensitive at equal lineshape.
        let graded: Vec<f64> = (0..6).map(|k| 1e8 * (k + 1) as f64).collect();
        let sens = sensitivity_map(&maps, &graded, P_F_GAUSSIAN).unwrap();
        assert!(sens.windows(2).all(|w| w[1] < w[0]));

        // Masked pixels come back NaN.
        let mut masked = toy_maps(2);
        masked.contrast_pct[1] = f64::NAN;
        let sens = sensitivity_map(&masked, &[9.68e8; 2], P_F_GAUSSIAN).unwrap();
        assert!(sens[0].is_finite() && sens[1].is_nan());
    }

    #[test]
    fn sensitivity_map_mean_stays_near_the_scalar_of_means() {
        // Spread the parameters; the map mean lands within 30% of the
        // scalar built from the mean parameters (the averaging order
        // introduces only a modest convexity gap at these spreads).
        let n = 64;
        let mut maps = toy_maps(n);
        let mut rate = vec![0.0; n];
        for (k, r) in rate.iter_mut().enumerate() {
            let t = k as f64 / (n - 1) as f64;
            maps.contrast_pct[k] = 0.6 + 0.8 * t;
            maps.fwhm_t[k] = (1.5 + 1.0 * t) * 1e-3;
            *r = 5e8 + 1e9 * t;
        }
        let sens = sensitivity_map(&maps, &rate, P_F_GAUSSIAN).unwrap();
        let map_mean = sens.iter().sum::<f64>() / n as f64;
        let mean_contrast = maps.contrast_pct.iter().sum::<f64>() / n as f64 / 100.0;
        let mean_fwhm = maps.fwhm_t.iter().sum::<f64>() / n as f64;
        let mean_rate = rate.iter().sum::<f64>() / n as f64;
        let scalar = sensitivity(
            &SensitivityInputs::field_units(mean_fwhm, mean_contrast, mean_rate),
            SensitivityMode::FieldUnits,
        )
        .unwrap();
        assert!(
            (map_mean - scalar).abs() <= 0.3 * scalar,
            "map mean {map_mean:.3e} vs scalar-of-means {scalar:.3e}"
        );
    }

    #[test]
    fn diverging_colormap_mirrors_under_sign_flip() {
        for t in [0.0, 0.2, 0.77, 1.0] {
            let pos = diverging_rgb(t);
            let neg = diverging_rgb(-t);
            assert_eq!(pos[0], neg[2]);
            assert_eq!(pos[1], neg[1]);
            assert_eq!(pos[2], neg[0]);
        }
        assert_eq!(diverging_rgb(0.0), [255, 255, 255]);
    }

    #[test]
    fn png_rendering_is_deterministic_and_handles_masks() {
        let dir = tempfile::tempdir().unwrap();
        let data = vec![0.0, 1.0, -1.0, f64::NAN];
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        render_png(&p1, &data, 2, 2, Colormap::Diverging, None).unwrap();
        render_png(&p2, &data, 2, 2, Colormap::Diverging, None).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        // The NaN pixel renders as neutral gray.
        let decoder =
            png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&p1).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        reader.next_frame(&mut buf).unwrap();
        assert_eq!(&buf[9..12], &[128, 128, 128]);

        // All-zero raster renders as the uniform mid color.
        let p3 = dir.path().join("zero.png");
        render_png(&p3, &[0.0; 4], 2, 2, Colormap::Diverging, None).unwrap();
        let decoder =
            png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&p3).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert!(buf[..info.buffer_size()].iter().all(|&b| b == 255));
    }
}
