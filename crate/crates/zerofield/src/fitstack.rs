//! The analysis core: bin the stack, extract per-superpixel spectra, and
//! fit the zero-field feature by damped Gauss-Newton least squares with the
//! analytic Jacobian, at scale and in parallel.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lineshape::{ZeroFieldFeature, FWHM_PER_SIGMA};
use crate::pgm;
use crate::raster::{write_csv_raster, write_f32_raster, RasterMeta};
use crate::synth::{FloatStack, ImageStack};

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Stack reduced to superpixels: real-valued mean counts per block.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedStack {
    pub nx: usize,
    pub ny: usize,
    pub bin_factor: usize,
    /// Camera pixel pitch (m); the superpixel pitch is `bin_factor` times this.
    pub pitch_m: f64,
    pub standoff_m: f64,
    pub exposure_s: f64,
    pub frames: Vec<Vec<f64>>,
    pub b_values: Vec<f64>,
}

impl BinnedStack {
    pub fn superpixel_pitch_m(&self) -> f64 {
        self.pitch_m * self.bin_factor as f64
    }

    pub fn n_superpixels(&self) -> usize {
        self.nx * self.ny
    }
}

fn bin_frames<T: Copy + Into<f64> + Sync>(
    frames: &[Vec<T>],
    nx: usize,
    ny: usize,
    factor: usize,
) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    if factor == 0 {
        return Err(Error::InvalidArgument("bin factor must be >= 1".into()));
    }
    let bnx = nx / factor;
    let bny = ny / factor;
    if bnx == 0 || bny == 0 {
        return Err(Error::Dimension(format!(
            "bin factor {factor} larger than the {nx}x{ny} image"
        )));
    }
    let norm = 1.0 / (factor * factor) as f64;
    let binned = frames
        .par_iter()
        .map(|frame| {
            let mut out = Vec::with_capacity(bnx * bny);
            for by in 0..bny {
                for bx in 0..bnx {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        let row = (by * factor + dy) * nx + bx * factor;
                        for dx in 0..factor {
                            acc += frame[row + dx].into();
                        }
                    }
                    out.push(acc * norm);
                }
            }
            out
        })
        .collect();
    Ok((bnx, bny, binned))
}

/// Mean-bins an integer stack over factor x factor blocks; trailing partial
/// blocks are dropped. 2448x2048 at factor 16 becomes 153x128.
pub fn bin(stack: &ImageStack, factor: usize) -> Result<BinnedStack> {
    let (nx, ny, frames) = bin_frames(&stack.frames, stack.grid.nx, stack.grid.ny, factor)?;
    Ok(BinnedStack {
        nx,
        ny,
        bin_factor: factor,
        pitch_m: stack.grid.pitch_m,
        standoff_m: stack.grid.standoff_m,
        exposure_s: stack.exposure_s,
        frames,
        b_values: stack.b_values.clone(),
    })
}

/// Same, for the continuous expected-value stack.
pub fn bin_rates(stack: &FloatStack, factor: usize) -> Result<BinnedStack> {
    let (nx, ny, frames) = bin_frames(&stack.frames, stack.grid.nx, stack.grid.ny, factor)?;
    Ok(BinnedStack {
        nx,
        ny,
        bin_factor: factor,
        pitch_m: stack.grid.pitch_m,
        standoff_m: stack.grid.standoff_m,
        exposure_s: stack.exposure_s,
        frames,
        b_values: stack.b_values.clone(),
    })
}

/// One superpixel's scan: counts versus scanned field, ascending in b.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub b: Vec<f64>,
    pub y: Vec<f64>,
}

impl Spectrum {
    pub fn new(b: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if b.len() != y.len() {
            return Err(Error::Dimension("spectrum b/y length mismatch".into()));
        }
        if b.len() < 5 {
            return Err(Error::InvalidArgument(
                "a spectrum needs at least 5 samples".into(),
            ));
        }
        if !b.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "spectrum b values must be strictly increasing".into(),
            ));
        }
        Ok(Spectrum { b, y })
    }

    pub fn span(&self) -> f64 {
        self.b[self.b.len() - 1] - self.b[0]
    }

    pub fn mean_step(&self) -> f64 {
        self.span() / (self.b.len() as f64 - 1.0)
    }
}

/// Pulls the (row i, column j) superpixel spectrum out of the binned stack.
pub fn extract(binned: &BinnedStack, i: usize, j: usize) -> Result<Spectrum> {
    if i >= binned.ny || j >= binned.nx {
        return Err(Error::InvalidArgument(format!(
            "superpixel ({i}, {j}) outside {}x{} map",
            binned.ny, binned.nx
        )));
    }
    let idx = i * binned.nx + j;
    let y = binned.frames.iter().map(|f| f[idx]).collect();
    Spectrum::new(binned.b_values.clone(), y)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Starting point for the fit, with a flat-spectrum flag.
#[derive(Debug, Clone, PartialEq)]
pub struct InitGuess {
    pub feature: ZeroFieldFeature,
    /// Dip depth does not clear 3x the robust noise estimate.
    pub low_snr: bool,
    /// Robust per-sample noise estimate (MAD-based), in counts.
    pub noise: f64,
}

/// Data-driven initial guess: offset from the outer samples, center from a
/// 3-point moving-average minimum, width from the half-depth crossing span.
pub fn init_guess(s: &Spectrum) -> InitGuess {
    let n = s.b.len();
    let edge = (n / 10).max(1);
    let mut outer: Vec<f64> = s.y[..edge].iter().chain(&s.y[n - edge..]).copied().collect();
    let y0 = median(&mut outer);
    let mut deviations: Vec<f64> = outer.iter().map(|v| (v - y0).abs()).collect();
    let noise = 1.4826 * median(&mut deviations);

    // Center: minimum of the 3-point moving average.
    let mut best_k = 1;
    let mut best = f64::INFINITY;
    for k in 1..n - 1 {
        let m = (s.y[k - 1] + s.y[k] + s.y[k + 1]) / 3.0;
        if m < best {
            best = m;
            best_k = k;
        }
    }
    let center = s.b[best_k];

    let y_min = s.y.iter().cloned().fold(f64::INFINITY, f64::min);
    let depth = (y0 - y_min).max(0.0);
    let low_snr = depth <= 3.0 * noise;

    // Half-depth crossings, walking outward from the center sample with
    // linear interpolation; missing crossings fall back to the scan edges.
    let level = y0 - 0.5 * depth;
    let mut left = s.b[0];
    for k in (0..best_k).rev() {
        if s.y[k] >= level {
            let (x0, x1, f0, f1) = (s.b[k], s.b[k + 1], s.y[k], s.y[k + 1]);
            left = if f1 != f0 {
                x0 + (level - f0) / (f1 - f0) * (x1 - x0)
            } else {
                x0
            };
            break;
        }
    }
    let mut right = s.b[n - 1];
    for k in best_k + 1..n {
        if s.y[k] >= level {
            let (x0, x1, f0, f1) = (s.b[k - 1], s.b[k], s.y[k - 1], s.y[k]);
            right = if f1 != f0 {
                x0 + (level - f0) / (f1 - f0) * (x1 - x0)
            } else {
                x1
            };
            break;
        }
    }
    let step = s.mean_step();
    let sigma = ((right - left) / FWHM_PER_SIGMA).clamp(step, s.span() / 2.0);
    let amplitude = -depth * sigma * SQRT_2PI;

    InitGuess {
        feature: ZeroFieldFeature {
            y0: y0.max(f64::MIN_POSITIVE),
            amplitude,
            center_t: center,
            sigma_t: sigma,
        },
        low_snr,
        noise,
    }
}

/// Why a per-pixel fit was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitFailure {
    MaxIter,
    Singular,
    BoundsHit,
    LowSnr,
}

impl FitFailure {
    pub fn code(self) -> u8 {
        match self {
            FitFailure::MaxIter => 1,
            FitFailure::Singular => 2,
            FitFailure::BoundsHit => 3,
            FitFailure::LowSnr => 4,
        }
    }
}

/// Fit output. Failures are data, never panics: `feature` holds the best
/// parameters reached either way.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub feature: ZeroFieldFeature,
    /// 1-sigma standard errors for [y0, amplitude, center, sigma].
    pub stderr: [f64; 4],
    pub rss: f64,
    pub n_iter: usize,
    pub converged: bool,
    pub failure: Option<FitFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative RSS-change convergence threshold.
    pub rss_rel_tol: f64,
    /// Relative parameter-step convergence threshold.
    pub step_rel_tol: f64,
    /// Weight residuals by 1/max(y, 1) instead of plain least squares.
    pub poisson_weights: bool,
    /// Fitted |amplitude| must clear this many of its own standard errors,
    /// otherwise the pixel is flagged LowSnr.
    pub min_significance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 200,
            rss_rel_tol: 1e-10,
            step_rel_tol: 1e-8,
            poisson_weights: false,
            min_significance: 5.0,
        }
    }
}

/// Solves a 4x4 system in place by Gaussian elimination with partial
/// pivoting. None when the pivot degenerates.
#[allow(clippy::needless_range_loop)]
fn solve4(a: &[[f64; 4]; 4], rhs: &[f64; 4]) -> Option<[f64; 4]> {
    let mut m = *a;
    let mut b = *rhs;
    for col in 0..4 {
        let mut piv = col;
        for row in col + 1..4 {
            if m[row][col].abs() > m[piv][col].abs() {
                piv = row;
            }
        }
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..4 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for i in (0..4).rev() {
        let mut s = b[i];
        for k in i + 1..4 {
            s -= m[i][k] * x[k];
        }
        x[i] = s / m[i][i];
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Inverts a 4x4 by solving against the identity.
#[allow(clippy::needless_range_loop)]
fn invert4(a: &[[f64; 4]; 4]) -> Option<[[f64; 4]; 4]> {
    let mut inv = [[0.0; 4]; 4];
    for j in 0..4 {
        let mut e = [0.0; 4];
        e[j] = 1.0;
        let col = solve4(a, &e)?;
        for i in 0..4 {
            inv[i][j] = col[i];
        }
    }
    Some(inv)
}

struct Bounds {
    sigma_min: f64,
    sigma_max: f64,
    center_min: f64,
    center_max: f64,
    y0_min: f64,
}

impl Bounds {
    fn for_spectrum(s: &Spectrum) -> Bounds {
        let span = s.span();
        Bounds {
            sigma_min: 0.1 * s.mean_step(),
            sigma_max: span,
            center_min: s.b[0] - span / 2.0,
            center_max: s.b[s.b.len() - 1] + span / 2.0,
            y0_min: f64::MIN_POSITIVE,
        }
    }

    fn clamp(&self, p: &mut [f64; 4]) {
        p[0] = p[0].max(self.y0_min);
        p[2] = p[2].clamp(self.center_min, self.center_max);
        p[3] = p[3].clamp(self.sigma_min, self.sigma_max);
    }

    fn pinned(&self, p: &[f64; 4]) -> bool {
        let near = |v: f64, bound: f64, scale: f64| (v - bound).abs() <= 1e-9 * scale;
        near(p[3], self.sigma_min, self.sigma_max)
            || near(p[3], self.sigma_max, self.sigma_max)
            || near(p[2], self.center_min, self.center_max - self.center_min)
            || near(p[2], self.center_max, self.center_max - self.center_min)
    }
}

/// Model and residual machinery for p = [y0, amplitude, center, sigma].
struct Problem<'a> {
    s: &'a Spectrum,
    weights: Option<Vec<f64>>,
}

impl<'a> Problem<'a> {
    fn new(s: &'a Spectrum, poisson_weights: bool) -> Self {
        let weights = poisson_weights
            .then(|| s.y.iter().map(|&y| 1.0 / y.max(1.0)).collect::<Vec<_>>());
        Problem { s, weights }
    }

    fn rss(&self, p: &[f64; 4]) -> f64 {
        let mut acc = 0.0;
        for (k, (&b, &y)) in self.s.b.iter().zip(&self.s.y).enumerate() {
            let t = (b - p[2]) / p[3];
            let g = (-0.5 * t * t).exp() / (p[3] * SQRT_2PI);
            let r = y - (p[0] + p[1] * g);
            let w = self.weights.as_ref().map_or(1.0, |w| w[k]);
            acc += w * r * r;
        }
        acc
    }

    /// Accumulates the normal equations J^T J and J^T r at p.
    #[allow(clippy::needless_range_loop)]
    fn normal_equations(&self, p: &[f64; 4]) -> ([[f64; 4]; 4], [f64; 4]) {
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        let sigma = p[3];
        for (k, (&b, &y)) in self.s.b.iter().zip(&self.s.y).enumerate() {
            let d = b - p[2];
            let t = d / sigma;
            let g = (-0.5 * t * t).exp() / (sigma * SQRT_2PI);
            let model = p[0] + p[1] * g;
            let r = y - model;
            let j = [
                1.0,
                g,
                p[1] * g * d / (sigma * sigma),
                p[1] * g * (d * d / (sigma * sigma * sigma) - 1.0 / sigma),
            ];
            let w = self.weights.as_ref().map_or(1.0, |w| w[k]);
            for a in 0..4 {
                jtr[a] += w * j[a] * r;
                for bcol in a..4 {
                    jtj[a][bcol] += w * j[a] * j[bcol];
                }
            }
        }
        for a in 0..4 {
            for bcol in 0..a {
                jtj[a][bcol] = jtj[bcol][a];
            }
        }
        (jtj, jtr)
    }
}

/// Damped Gauss-Newton (Levenberg-Marquardt) fit of the four feature
/// parameters with the analytic Jacobian.
///
/// Convergence: relative RSS change below `rss_rel_tol` or relative step
/// norm below `step_rel_tol`, capped at `max_iter`. Only improving steps
/// are accepted, so the returned RSS never exceeds the guess's. Bounds keep
/// sigma within [0.1 step, span] and the center within half a span of the
/// scan window; a solution pinned to a bound reports `BoundsHit`.
pub fn fit(s: &Spectrum, guess: &ZeroFieldFeature, opts: &FitOptions) -> FitResult {
    let problem = Problem::new(s, opts.poisson_weights);
    let bounds = Bounds::for_spectrum(s);
    let mut p = [guess.y0, guess.amplitude, guess.center_t, guess.sigma_t];
    bounds.clamp(&mut p);

    let mut rss = problem.rss(&p);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut failure: Option<FitFailure> = None;
    let mut n_iter = 0;

    'outer: for iter in 0..opts.max_iter {
        n_iter = iter + 1;
        let (jtj, jtr) = problem.normal_equations(&p);
        // Inner damping search: retry with stronger damping until a step
        // both solves and improves.
        loop {
            let mut damped = jtj;
            for d in 0..4 {
                damped[d][d] = jtj[d][d] * (1.0 + lambda) + 1e-300;
            }
            let delta = match solve4(&damped, &jtr) {
                Some(d) => d,
                None => {
                    lambda *= 10.0;
                    if lambda > 1e14 {
                        failure = Some(FitFailure::Singular);
                        break 'outer;
                    }
                    continue;
                }
            };
            let mut candidate = [
                p[0] + delta[0],
                p[1] + delta[1],
                p[2] + delta[2],
                p[3] + delta[3],
            ];
            bounds.clamp(&mut candidate);
            let new_rss = problem.rss(&candidate);
            if new_rss.is_finite() && new_rss <= rss {
                let scales = [
                    p[0].abs().max(1e-300),
                    p[1].abs().max(1e-300),
                    p[2].abs().max(p[3]),
                    p[3].abs(),
                ];
                let step_rel = (0..4)
                    .map(|i| ((candidate[i] - p[i]) / scales[i]).abs())
                    .fold(0.0_f64, f64::max);
                let rss_drop = rss - new_rss;
                p = candidate;
                let rss_converged = rss_drop <= opts.rss_rel_tol * rss.max(f64::MIN_POSITIVE);
                rss = new_rss;
                lambda = (lambda * 0.25).max(1e-12);
                if rss_converged || step_rel < opts.step_rel_tol {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e14 {
                // No direction improves: the current point is the minimum
                // to working precision.
                converged = true;
                break 'outer;
            }
        }
    }

    if !converged && failure.is_none() {
        failure = Some(FitFailure::MaxIter);
    }

    // Curvature-based standard errors, scaled by the residual variance.
    let n = s.b.len() as f64;
    let mut stderr = [f64::NAN; 4];
    if converged {
        let (jtj, _) = problem.normal_equations(&p);
        match invert4(&jtj) {
            Some(cov) => {
                let variance = rss / (n - 4.0);
                for i in 0..4 {
                    let v = cov[i][i] * variance;
                    stderr[i] = if v >= 0.0 { v.sqrt() } else { f64::NAN };
                }
                if stderr.iter().any(|v| !v.is_finite()) {
                    converged = false;
                    failure = Some(FitFailure::Singular);
                }
            }
            None => {
                converged = false;
                failure = Some(FitFailure::Singular);
            }
        }
    }

    if converged && bounds.pinned(&p) {
        converged = false;
        failure = Some(FitFailure::BoundsHit);
    }

    // Detection cut: an amplitude that does not clear its own error bar by
    // min_significance is noise, not a feature.
    if converged
        && stderr[1].is_finite()
        && stderr[1] > 0.0
        && p[1].abs() / stderr[1] < opts.min_significance
    {
        converged = false;
        failure = Some(FitFailure::LowSnr);
    }

    FitResult {
        feature: ZeroFieldFeature {
            y0: p[0],
            amplitude: p[1],
            center_t: p[2],
            sigma_t: p[3],
        },
        stderr,
        rss,
        n_iter,
        converged,
        failure,
    }
}

/// Quality code per superpixel: 0 converged, otherwise the failure code.
pub type QualityRaster = Vec<u8>;

/// Per-superpixel fitted maps. Rejected pixels carry NaN; `quality` keeps
/// the reason. The reported shift is the negated fitted center, so the map
/// reads in the pattern's own field: the dip sits where the scan cancels
/// the along-scan component, hence shift = Bz. This is the one place that
/// negation happens.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMaps {
    pub nx: usize,
    pub ny: usize,
    pub bin_factor: usize,
    pub pitch_m: f64,
    pub standoff_m: f64,
    pub exposure_s: f64,
    pub shift_t: Vec<f64>,
    pub shift_stderr_t: Vec<f64>,
    pub contrast_pct: Vec<f64>,
    pub fwhm_t: Vec<f64>,
    pub y0_counts: Vec<f64>,
    pub rss: Vec<f64>,
    pub quality: QualityRaster,
}

impl ParameterMaps {
    pub fn superpixel_pitch_m(&self) -> f64 {
        self.pitch_m * self.bin_factor as f64
    }

    pub fn converged_fraction(&self) -> f64 {
        let ok = self.quality.iter().filter(|&&q| q == 0).count();
        ok as f64 / self.quality.len().max(1) as f64
    }
}

/// Fits every superpixel independently. Failures become NaN pixels with a
/// quality code; nothing aborts the map. The tiling is rayon's, but each
/// fit depends only on its own spectrum, so output is bitwise identical for
/// any thread count.
pub fn fit_all(binned: &BinnedStack, opts: &FitOptions) -> ParameterMaps {
    let n = binned.n_superpixels();
    let results: Vec<FitResult> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let i = idx / binned.nx;
            let j = idx % binned.nx;
            let spectrum = extract(binned, i, j).expect("index in range");
            let guess = init_guess(&spectrum);
            fit(&spectrum, &guess.feature, opts)
        })
        .collect();

    let mut maps = ParameterMaps {
        nx: binned.nx,
        ny: binned.ny,
        bin_factor: binned.bin_factor,
        pitch_m: binned.pitch_m,
        standoff_m: binned.standoff_m,
        exposure_s: binned.exposure_s,
        shift_t: vec![f64::NAN; n],
        shift_stderr_t: vec![f64::NAN; n],
        contrast_pct: vec![f64::NAN; n],
        fwhm_t: vec![f64::NAN; n],
        y0_counts: vec![f64::NAN; n],
        rss: vec![f64::NAN; n],
        quality: vec![0; n],
    };
    for (idx, r) in results.iter().enumerate() {
        maps.rss[idx] = r.rss;
        if r.converged {
            maps.shift_t[idx] = -r.feature.center_t;
            maps.shift_stderr_t[idx] = r.stderr[2];
            maps.contrast_pct[idx] = r.feature.peak_contrast() * 100.0;
            maps.fwhm_t[idx] = r.feature.fwhm();
            maps.y0_counts[idx] = r.feature.y0;
        } else {
            maps.quality[idx] = r.failure.map_or(1, FitFailure::code);
        }
    }
    maps
}

/// Marks superpixels failing convergence or the reporting thresholds.
/// `true` means masked (rejected). Pure function of the maps, hence
/// idempotent under re-application.
pub fn quality_mask(
    maps: &ParameterMaps,
    min_contrast_pct: f64,
    max_fwhm_t: f64,
    max_center_err_t: f64,
) -> Vec<bool> {
    (0..maps.quality.len())
        .map(|i| {
            maps.quality[i] != 0
                || !maps.contrast_pct[i].is_finite()
                || !maps.fwhm_t[i].is_finite()
                || !maps.shift_stderr_t[i].is_finite()
                || maps.contrast_pct[i] < min_contrast_pct
                || maps.fwhm_t[i] > max_fwhm_t
                || maps.shift_stderr_t[i] > max_center_err_t
        })
        .collect()
}

/// Applies a mask: masked pixels become NaN in every value raster.
pub fn apply_mask(maps: &ParameterMaps, mask: &[bool]) -> ParameterMaps {
    let mut out = maps.clone();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            out.shift_t[i] = f64::NAN;
            out.shift_stderr_t[i] = f64::NAN;
            out.contrast_pct[i] = f64::NAN;
            out.fwhm_t[i] = f64::NAN;
            out.y0_counts[i] = f64::NAN;
        }
    }
    out
}

/// Writes the per-quantity rasters (f32 raw + JSON sidecar + CSV) and the
/// mask as an 8-bit PGM (0 = kept, 255 = masked), plus the raw quality
/// codes.
pub fn export_maps(maps: &ParameterMaps, mask: &[bool], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = |component: &str, units: &str| RasterMeta {
        nx: maps.nx,
        ny: maps.ny,
        pitch_m: maps.superpixel_pitch_m(),
        standoff_m: Some(maps.standoff_m),
        component: component.into(),
        units: units.into(),
        bin_factor: Some(maps.bin_factor),
        mask_encoding: Some("NaN = masked".into()),
    };
    let quantities: [(&str, &str, &Vec<f64>); 5] = [
        ("shift", "T", &maps.shift_t),
        ("shift_stderr", "T", &maps.shift_stderr_t),
        ("contrast", "%", &maps.contrast_pct),
        ("fwhm", "T", &maps.fwhm_t),
        ("y0", "counts", &maps.y0_counts),
    ];
    for (name, units, data) in quantities {
        let m = meta(name, units);
        write_f32_raster(&dir.join(name), data, &m)?;
        write_csv_raster(&dir.join(format!("{name}.csv")), data, &m)?;
    }
    let mask_px: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    pgm::write_pgm8(&dir.join("mask.pgm"), maps.nx, maps.ny, &mask_px)?;
    pgm::write_pgm8(&dir.join("quality.pgm"), maps.nx, maps.ny, &maps.quality)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::magnetostatics::GridSpec;
    use crate::synth::CameraModel;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn model_spectrum(f: &ZeroFieldFeature, n: usize) -> Spectrum {
        let b: Vec<f64> = (0..n)
            .map(|k| -4e-3 + 8e-3 * k as f64 / (n as f64 - 1.0))
            .collect();
        let y = b.iter().map(|&x| f.evaluate(x)).collect();
        Spectrum::new(b, y).unwrap()
    }

    fn dip() -> ZeroFieldFeature {
        ZeroFieldFeature::from_peak_contrast(1500.0, 0.01, 0.4e-3, 2.0e-3).unwrap()
    }

    #[test]
    fn bin_factor_one_is_identity() {
        let grid = GridSpec {
            nx: 6,
            ny: 4,
            ..GridSpec::default()
        };
        let stack = ImageStack {
            grid,
            camera: CameraModel::default(),
            exposure_s: 0.01,
            frame_averages: 1,
            frames: vec![(0u16..24).collect(), vec![100; 24]],
            b_values: vec![-1e-3, 1e-3],
            n_saturated: vec![0, 0],
        };
        let binned = bin(&stack, 1).unwrap();
        assert_eq!(binned.nx, 6);
        assert_eq!(binned.ny, 4);
        assert_eq!(binned.frames[0][7], 7.0);
        assert!(binned.frames[1].iter().all(|&v| v == 100.0));
    }

    #[test]
    fn bin_reduces_full_sensor_to_153_by_128() {
        let grid = GridSpec {
            nx: 2448,
            ny: 2048,
            ..GridSpec::default()
        };
        let stack = ImageStack {
            grid,
            camera: CameraModel::default(),
            exposure_s: 0.01,
            frame_averages: 1,
            frames: vec![vec![7u16; 2448 * 2048]],
            b_values: vec![0.0],
            n_saturated: vec![0],
        };
        let binned = bin(&stack, 16).unwrap();
        assert_eq!((binned.nx, binned.ny), (153, 128));
        assert!(binned.frames[0].iter().all(|&v| v == 7.0));
    }

    #[test]
    fn bin_rejects_oversized_factor() {
        let grid = GridSpec {
            nx: 8,
            ny: 8,
            ..GridSpec::default()
        };
        let stack = ImageStack {
            grid,
            camera: CameraModel::default(),
            exposure_s: 0.01,
            frame_averages: 1,
            frames: vec![vec![0u16; 64]],
            b_values: vec![0.0],
            n_saturated: vec![0],
        };
        assert!(bin(&stack, 9).is_err());
    }

    #[test]
    fn extract_matches_direct_indexing() {
        let binned = BinnedStack {
            nx: 3,
            ny: 2,
            bin_factor: 1,
            pitch_m: 1e-6,
            standoff_m: 0.0,
            exposure_s: 0.01,
            frames: (0..6)
                .map(|k| (0..6).map(|i| (k * 10 + i) as f64).collect())
                .collect(),
            b_values: (0..6).map(|k| k as f64 * 1e-4).collect(),
        };
        let s = extract(&binned, 1, 2).unwrap();
        assert_eq!(s.y.len(), 6);
        for (k, &v) in s.y.iter().enumerate() {
            assert_eq!(v, binned.frames[k][5]);
        }
        assert!(extract(&binned, 2, 0).is_err());
        assert!(extract(&binned, 0, 3).is_err());
    }

    #[test]
    fn guess_recovers_center_on_exact_data() {
        let f = dip();
        let s = model_spectrum(&f, 81);
        let g = init_guess(&s);
        assert!(!g.low_snr);
        assert!((g.feature.center_t - f.center_t).abs() <= s.mean_step());
        assert_relative_eq!(g.feature.y0, f.y0, max_relative = 1e-3);
        assert_relative_eq!(g.feature.sigma_t, f.sigma_t, max_relative = 0.25);
    }

    #[test]
    fn flat_spectrum_flags_low_snr() {
        let b: Vec<f64> = (0..81).map(|k| k as f64 * 1e-4).collect();
        let y = vec![1000.0; 81];
        let g = init_guess(&Spectrum::new(b, y).unwrap());
        assert!(g.low_snr);
    }

    #[test]
    fn exact_model_is_recovered_to_machine_precision() {
        let truth = dip();
        let s = model_spectrum(&truth, 81);
        let g = init_guess(&s);
        let r = fit(&s, &g.feature, &FitOptions::default());
        assert!(r.converged, "failure: {:?}", r.failure);
        assert_relative_eq!(r.feature.y0, truth.y0, max_relative = 1e-9);
        assert_relative_eq!(r.feature.amplitude, truth.amplitude, max_relative = 1e-9);
        assert_abs_diff_eq!(r.feature.center_t, truth.center_t, epsilon = 1e-12);
        assert_relative_eq!(r.feature.sigma_t, truth.sigma_t, max_relative = 1e-9);
        assert!(r.rss < 1e-15);
    }

    #[test]
    fn returned_rss_never_exceeds_the_guess() {
        let truth = dip();
        let mut s = model_spectrum(&truth, 81);
        // Deterministic rough corruption.
        for (k, y) in s.y.iter_mut().enumerate() {
            *y += ((k * 2654435761) % 17) as f64 - 8.0;
        }
        let g = init_guess(&s);
        let problem = Problem::new(&s, false);
        let p0 = [
            g.feature.y0,
            g.feature.amplitude,
            g.feature.center_t,
            g.feature.sigma_t,
        ];
        let rss0 = problem.rss(&p0);
        let r = fit(&s, &g.feature, &FitOptions::default());
        assert!(r.rss <= rss0);
    }

    #[test]
    fn fit_is_scan_offset_equivariant() {
        let truth = dip();
        let mut s = model_spectrum(&truth, 81);
        for (k, y) in s.y.iter_mut().enumerate() {
            *y += (((k * 40503) % 13) as f64 - 6.0) * 0.2;
        }
        let r0 = fit(&s, &init_guess(&s).feature, &FitOptions::default());
        let delta = 1.7e-3;
        let shifted = Spectrum::new(s.b.iter().map(|b| b + delta).collect(), s.y.clone()).unwrap();
        let r1 = fit(&shifted, &init_guess(&shifted).feature, &FitOptions::default());
        assert_relative_eq!(
            r1.feature.center_t - delta,
            r0.feature.center_t,
            max_relative = 1e-9,
            epsilon = 1e-12
        );
        assert_relative_eq!(r1.feature.sigma_t, r0.feature.sigma_t, max_relative = 1e-9);
        assert_relative_eq!(r1.feature.y0, r0.feature.y0, max_relative = 1e-9);
        assert_relative_eq!(r1.feature.amplitude, r0.feature.amplitude, max_relative = 1e-9);
    }

    #[test]
    fn fit_is_intensity_scale_equivariant() {
        let truth = dip();
        let mut s = model_spectrum(&truth, 81);
        for (k, y) in s.y.iter_mut().enumerate() {
            *y += (((k * 92821) % 11) as f64 - 5.0) * 0.3;
        }
        let r0 = fit(&s, &init_guess(&s).feature, &FitOptions::default());
        let scale = 3.5;
        let scaled = Spectrum::new(s.b.clone(), s.y.iter().map(|y| y * scale).collect()).unwrap();
        let r1 = fit(&scaled, &init_guess(&scaled).feature, &FitOptions::default());
        assert_relative_eq!(r1.feature.y0, scale * r0.feature.y0, max_relative = 1e-9);
        assert_relative_eq!(
            r1.feature.amplitude,
            scale * r0.feature.amplitude,
            max_relative = 1e-9
        );
        assert_relative_eq!(r1.feature.center_t, r0.feature.center_t, max_relative = 1e-9);
        assert_relative_eq!(r1.feature.sigma_t, r0.feature.sigma_t, max_relative = 1e-9);
    }

    #[test]
    fn stderr_scales_with_noise_floor() {
        // Same data with doubled residuals must double the center error bar.
        let truth = dip();
        let clean = model_spectrum(&truth, 81);
        let noisy = |amp: f64| {
            let mut s = clean.clone();
            for (k, y) in s.y.iter_mut().enumerate() {
                *y += amp * ((((k * 48271) % 19) as f64 - 9.0) / 9.0);
            }
            s
        };
        let s1 = noisy(1.0);
        let s2 = noisy(2.0);
        let r1 = fit(&s1, &init_guess(&s1).feature, &FitOptions::default());
        let r2 = fit(&s2, &init_guess(&s2).feature, &FitOptions::default());
        assert!(r1.converged && r2.converged);
        assert_relative_eq!(r2.stderr[2], 2.0 * r1.stderr[2], max_relative = 0.05);
    }

    #[test]
    fn quality_mask_is_idempotent_and_all_pass_keeps_converged() {
        let truth = dip();
        let binned = BinnedStack {
            nx: 2,
            ny: 1,
            bin_factor: 16,
            pitch_m: 0.15e-6,
            standoff_m: 0.11e-3,
            exposure_s: 0.01,
            frames: model_spectrum(&truth, 81)
                .y
                .iter()
                .map(|&v| vec![v, 1000.0]) // pixel 1 is flat
                .collect(),
            b_values: model_spectrum(&truth, 81).b,
        };
        let maps = fit_all(&binned, &FitOptions::default());
        assert_eq!(maps.quality[0], 0);
        assert_ne!(maps.quality[1], 0, "flat pixel must fail");
        // All-pass thresholds mask only the unconverged pixel.
        let mask = quality_mask(&maps, 0.0, f64::INFINITY, f64::INFINITY);
        assert_eq!(mask, vec![false, true]);
        // Idempotent: masking the masked maps reproduces the mask.
        let masked = apply_mask(&maps, &mask);
        let mask2 = quality_mask(&masked, 0.0, f64::INFINITY, f64::INFINITY);
        assert_eq!(mask, mask2);
    }

    #[test]
    fn export_writes_all_artifacts() {
        let truth = dip();
        let s = model_spectrum(&truth, 81);
        let binned = BinnedStack {
            nx: 1,
            ny: 1,
            bin_factor: 16,
            pitch_m: 0.15e-6,
            standoff_m: 0.11e-3,
            exposure_s: 0.01,
            frames: s.y.iter().map(|&v| vec![v]).collect(),
            b_values: s.b.clone(),
        };
        let maps = fit_all(&binned, &FitOptions::default());
        let mask = quality_mask(&maps, 0.2, 6e-3, 0.5e-3);
        let dir = tempfile::tempdir().unwrap();
        export_maps(&maps, &mask, dir.path()).unwrap();
        for f in [
            "shift.f32",
            "shift.json",
            "shift.csv",
            "contrast.f32",
            "fwhm.csv",
            "y0.json",
            "mask.pgm",
            "quality.pgm",
        ] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        let (data, meta) = crate::raster::read_f32_raster(&dir.path().join("shift")).unwrap();
        assert_eq!(meta.bin_factor, Some(16));
        assert_relative_eq!(data[0], -truth.center_t, max_relative = 1e-6);
    }
}
