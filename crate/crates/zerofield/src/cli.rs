//! Command-line pipeline: simulate, synth, fit, report, roundtrip.
//!
//! Every command is deterministic given (config, seed): artifacts carry no
//! timestamps or timings, so reruns and different `--threads` values are
//! byte-identical. Timings go to stdout only.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    compare, cross_section, linearity, render_png, sensitivity_map, Colormap, CompareMetrics,
    LinearityReport, P_F_GAUSSIAN,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fitstack::{
    bin, bin_rates, export_maps, fit_all, quality_mask, BinnedStack, ParameterMaps,
};
use crate::magnetostatics::{build_cross, field_on_grid, FieldMap, Route};
use crate::pgm;
use crate::raster::{read_f32_raster, write_csv_raster, write_f32_raster, RasterMeta};
use crate::synth::{expected_stack, make_scene, read_stack, render_stack, write_stack};

/// Environment variable that re-roots relative output directories.
pub const OUT_ROOT_ENV: &str = "ZEROFIELD_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(
    name = "zerofield",
    version,
    about = "Wide-field near-zero-field magnetometry pipeline: simulate current patterns, synthesize fluorescence scans, fit feature maps, report"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results are identical for any N.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute the pattern's field map and export Bx/By/Bz rasters.
    Simulate {
        /// Current route through the cross (P34, P14, P12, P13, P23, P24).
        #[arg(long)]
        route: Option<String>,
        /// Drive current in amperes.
        #[arg(long)]
        current: Option<f64>,
    },
    /// Render a field-scanned fluorescence stack to a directory.
    Synth {
        /// Disable all noise: frames are rounded expected counts.
        #[arg(long)]
        noiseless: bool,
    },
    /// Bin a stack, fit every superpixel, and export parameter maps.
    Fit {
        /// Stack directory produced by `synth`.
        stack_dir: PathBuf,
    },
    /// Cross-sections, sensitivity, PNGs, and optional comparison /
    /// linearity from fitted maps.
    Report {
        /// Maps directory produced by `fit`.
        maps_dir: PathBuf,
        /// Simulation directory (from `simulate`) to compare the shift map
        /// against.
        #[arg(long)]
        sim: Option<PathBuf>,
        /// Map row for the cross-section profiles (default: middle row).
        #[arg(long)]
        row: Option<usize>,
        /// Current series for a linearity report:
        /// "0.1=mapsdir1,0.3=mapsdir2,...".
        #[arg(long)]
        series: Option<String>,
        /// Superpixel "row,col" for the linearity report (default: the
        /// strongest unmasked shift pixel).
        #[arg(long)]
        pixel: Option<String>,
    },
    /// Full loop (simulate, synth, fit, compare) with pass/fail against the
    /// configured tolerances.
    Roundtrip {
        /// Extra comma-separated currents for a linearity series
        /// (e.g. "0.1,0.2,0.3,0.4,0.5"), fitted on the expected-value path.
        #[arg(long)]
        currents: Option<String>,
        /// Run the stack stage without noise.
        #[arg(long)]
        noiseless: bool,
    },
}

/// Process exit codes: 0 success, 1 validation error, 2 runtime failure.
fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

/// Entry point used by `main` and by tests.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };

    let body = || -> Result<()> {
        let mut cfg = match &cli.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        let out = resolve_out(cli.out.clone(), &cfg);
        dispatch(&cli.command, &cfg, &out)
    };

    let result = match cli.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build();
            match pool {
                Ok(pool) => pool.install(body),
                Err(e) => Err(Error::Config(format!("thread pool: {e}"))),
            }
        }
        None => body(),
    };

    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn resolve_out(cli_out: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    let base = cli_out
        .or_else(|| cfg.out_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("zerofield-out"));
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if base.is_relative() => PathBuf::from(root).join(base),
        _ => base,
    }
}

fn dispatch(command: &Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    match command {
        Command::Simulate { route, current } => {
            let mut cfg = cfg.clone();
            if let Some(r) = route {
                cfg.scene.route = r.parse::<Route>()?;
            }
            if let Some(c) = current {
                cfg.scene.current_a = *c;
            }
            cmd_simulate(&cfg, &out.join("sim"))
        }
        Command::Synth { noiseless } => cmd_synth(cfg, *noiseless, &out.join("stack")),
        Command::Fit { stack_dir } => cmd_fit(cfg, stack_dir, &out.join("maps")).map(|_| ()),
        Command::Report {
            maps_dir,
            sim,
            row,
            series,
            pixel,
        } => cmd_report(
            cfg,
            maps_dir,
            sim.as_deref(),
            *row,
            series.as_deref(),
            pixel.as_deref(),
            &out.join("report"),
        ),
        Command::Roundtrip {
            currents,
            noiseless,
        } => cmd_roundtrip(cfg, currents.as_deref(), *noiseless, &out.join("roundtrip")),
    }
}

fn write_summary<S: Serialize>(dir: &Path, summary: &S) -> Result<()> {
    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(path, e))
}

/// Exports one field component as raw f32 + sidecar + CSV.
fn export_component(dir: &Path, name: &str, data: &[f64], map: &FieldMap) -> Result<()> {
    let meta = RasterMeta {
        nx: map.grid.nx,
        ny: map.grid.ny,
        pitch_m: map.grid.pitch_m,
        standoff_m: Some(map.grid.standoff_m),
        component: name.to_string(),
        units: "T".to_string(),
        bin_factor: None,
        mask_encoding: None,
    };
    write_f32_raster(&dir.join(name), data, &meta)?;
    write_csv_raster(&dir.join(format!("{name}.csv")), data, &meta)
}

/// Writes the simulated field map for the configured scene.
pub fn cmd_simulate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let t0 = Instant::now();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = build_cross(&cfg.pattern(), cfg.scene.route, cfg.scene.current_a)?;
    let map = field_on_grid(&paths, &cfg.grid())?;
    export_component(dir, "bx", &map.bx, &map)?;
    export_component(dir, "by", &map.by, &map)?;
    export_component(dir, "bz", &map.bz, &map)?;

    #[derive(Serialize)]
    struct Summary {
        command: &'static str,
        route: String,
        #[serde(rename = "current_A")]
        current_a: f64,
        nx: usize,
        ny: usize,
        pitch_m: f64,
        standoff_m: f64,
        #[serde(rename = "peak_abs_bz_T")]
        peak_abs_bz_t: f64,
    }
    let peak = map.bz.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    write_summary(
        dir,
        &Summary {
            command: "simulate",
            route: cfg.scene.route.to_string(),
            current_a: cfg.scene.current_a,
            nx: map.grid.nx,
            ny: map.grid.ny,
            pitch_m: map.grid.pitch_m,
            standoff_m: map.grid.standoff_m,
            peak_abs_bz_t: peak,
        },
    )?;
    println!(
        "simulate: {} at {} A, {}x{} grid, peak |Bz| = {:.3e} T -> {} ({:.2?})",
        cfg.scene.route,
        cfg.scene.current_a,
        map.grid.nx,
        map.grid.ny,
        peak,
        dir.display(),
        t0.elapsed()
    );
    Ok(())
}

/// Renders and writes the stack for the configured scene.
pub fn cmd_synth(cfg: &RunConfig, noiseless: bool, dir: &Path) -> Result<()> {
    let t0 = Instant::now();
    let scene = make_scene(&cfg.scene_spec()?, cfg.seed)?;
    let stack = render_stack(&scene, &cfg.protocol, &cfg.camera, cfg.seed, noiseless)?;
    write_stack(&stack, dir)?;

    #[derive(Serialize)]
    struct Summary {
        command: &'static str,
        seed: u64,
        noiseless: bool,
        n_frames: usize,
        nx: usize,
        ny: usize,
        frame_averages: u32,
        n_saturated_total: u64,
    }
    write_summary(
        dir,
        &Summary {
            command: "synth",
            seed: cfg.seed,
            noiseless,
            n_frames: stack.frames.len(),
            nx: stack.grid.nx,
            ny: stack.grid.ny,
            frame_averages: stack.frame_averages,
            n_saturated_total: stack.n_saturated.iter().map(|&v| v as u64).sum(),
        },
    )?;
    println!(
        "synth: {} frames of {}x{} ({}) -> {} ({:.2?})",
        stack.frames.len(),
        stack.grid.nx,
        stack.grid.ny,
        if noiseless { "noiseless" } else { "shot noise" },
        dir.display(),
        t0.elapsed()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct FitSummary {
    command: String,
    nx: usize,
    ny: usize,
    bin_factor: usize,
    pitch_m: f64,
    standoff_m: f64,
    exposure_s: f64,
    n_steps: usize,
    converged_fraction: f64,
    n_masked: usize,
    failures_max_iter: usize,
    failures_singular: usize,
    failures_bounds_hit: usize,
    failures_low_snr: usize,
}

/// Bins, fits, masks, and exports the parameter maps. Returns the maps and
/// mask for in-process callers.
pub fn cmd_fit(cfg: &RunConfig, stack_dir: &Path, dir: &Path) -> Result<(ParameterMaps, Vec<bool>)> {
    let t0 = Instant::now();
    let stack = read_stack(stack_dir)?;
    let binned = bin(&stack, cfg.fit.bin_factor)?;
    let maps = fit_all(&binned, &cfg.fit_options());
    let mask = quality_mask(
        &maps,
        cfg.mask.min_contrast_pct,
        cfg.mask.max_fwhm_t,
        cfg.mask.max_center_err_t,
    );
    export_maps(&maps, &mask, dir)?;
    let count = |code: u8| maps.quality.iter().filter(|&&q| q == code).count();
    let summary = FitSummary {
        command: "fit".into(),
        nx: maps.nx,
        ny: maps.ny,
        bin_factor: maps.bin_factor,
        pitch_m: maps.pitch_m,
        standoff_m: maps.standoff_m,
        exposure_s: maps.exposure_s,
        n_steps: binned.b_values.len(),
        converged_fraction: maps.converged_fraction(),
        n_masked: mask.iter().filter(|&&m| m).count(),
        failures_max_iter: count(1),
        failures_singular: count(2),
        failures_bounds_hit: count(3),
        failures_low_snr: count(4),
    };
    write_summary(dir, &summary)?;
    println!(
        "fit: {}x{} superpixels (bin {}), {:.1}% converged, {} masked -> {} ({:.2?})",
        maps.nx,
        maps.ny,
        maps.bin_factor,
        100.0 * maps.converged_fraction(),
        summary.n_masked,
        dir.display(),
        t0.elapsed()
    );
    Ok((maps, mask))
}

/// Reads a maps directory (rasters + quality + summary) back into memory.
pub fn import_maps(dir: &Path) -> Result<(ParameterMaps, Vec<bool>)> {
    let summary_path = dir.join("summary.json");
    let text = std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let summary: FitSummary = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", summary_path.display())))?;
    let load = |name: &str| -> Result<Vec<f64>> {
        let (data, meta) = read_f32_raster(&dir.join(name))?;
        if meta.nx != summary.nx || meta.ny != summary.ny {
            return Err(Error::Dimension(format!(
                "{name}: raster {}x{} does not match summary {}x{}",
                meta.nx, meta.ny, summary.nx, summary.ny
            )));
        }
        Ok(data)
    };
    let shift_t = load("shift")?;
    let shift_stderr_t = load("shift_stderr")?;
    let contrast_pct = load("contrast")?;
    let fwhm_t = load("fwhm")?;
    let y0_counts = load("y0")?;
    let (qx, qy, quality) = pgm::read_pgm8(&dir.join("quality.pgm"))?;
    let (mx, my, mask_px) = pgm::read_pgm8(&dir.join("mask.pgm"))?;
    if (qx, qy) != (summary.nx, summary.ny) || (mx, my) != (summary.nx, summary.ny) {
        return Err(Error::Dimension("quality/mask PGM size mismatch".into()));
    }
    let n = summary.nx * summary.ny;
    let maps = ParameterMaps {
        nx: summary.nx,
        ny: summary.ny,
        bin_factor: summary.bin_factor,
        pitch_m: summary.pitch_m,
        standoff_m: summary.standoff_m,
        exposure_s: summary.exposure_s,
        shift_t,
        shift_stderr_t,
        contrast_pct,
        fwhm_t,
        y0_counts,
        rss: vec![f64::NAN; n],
        quality,
    };
    Ok((maps, mask_px.iter().map(|&v| v != 0).collect()))
}

/// Loads a `simulate` output directory's Bz raster and pools it to the
/// superpixel grid of `maps`.
fn load_sim_bz_pooled(sim_dir: &Path, maps: &ParameterMaps) -> Result<Vec<f64>> {
    let (bz, meta) = read_f32_raster(&sim_dir.join("bz"))?;
    let f = maps.bin_factor;
    if meta.nx / f != maps.nx || meta.ny / f != maps.ny {
        return Err(Error::Dimension(format!(
            "simulated {}x{} grid does not pool by {f} onto the {}x{} map",
            meta.nx, meta.ny, maps.nx, maps.ny
        )));
    }
    let mut pooled = Vec::with_capacity(maps.nx * maps.ny);
    for by in 0..maps.ny {
        for bx in 0..maps.nx {
            let mut acc = 0.0;
            for dy in 0..f {
                let row = (by * f + dy) * meta.nx + bx * f;
                for dx in 0..f {
                    acc += bz[row + dx];
                }
            }
            pooled.push(acc / (f * f) as f64);
        }
    }
    Ok(pooled)
}

fn parse_pixel(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "pixel must be \"row,col\", got '{s}'"
        )));
    }
    let i = parts[0]
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad pixel row '{}'", parts[0])))?;
    let j = parts[1]
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad pixel col '{}'", parts[1])))?;
    Ok((i, j))
}

fn parse_currents(s: &str) -> Result<Vec<f64>> {
    let currents: std::result::Result<Vec<f64>, _> =
        s.split(',').map(|p| p.trim().parse::<f64>()).collect();
    let currents =
        currents.map_err(|_| Error::InvalidArgument(format!("bad currents list '{s}'")))?;
    if currents.len() < 3 {
        return Err(Error::InvalidArgument(
            "a linearity series needs at least 3 currents".into(),
        ));
    }
    Ok(currents)
}

/// Picks the strongest unmasked |shift| superpixel.
fn strongest_pixel(maps: &ParameterMaps, mask: &[bool]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, f64)> = None;
    for (idx, &v) in maps.shift_t.iter().enumerate() {
        if !mask[idx] && v.is_finite() && best.is_none_or(|(_, b)| v.abs() > b) {
            best = Some((idx, v.abs()));
        }
    }
    best.map(|(idx, _)| (idx / maps.nx, idx % maps.nx))
}

#[derive(Serialize)]
struct ReportSummary {
    command: &'static str,
    row: usize,
    #[serde(rename = "mean_sensitivity_T_per_sqrtHz", skip_serializing_if = "Option::is_none")]
    mean_sensitivity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<CompareMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    linearity: Option<LinearityReport>,
}

pub fn cmd_report(
    _cfg: &RunConfig,
    maps_dir: &Path,
    sim_dir: Option<&Path>,
    row: Option<usize>,
    series: Option<&str>,
    pixel: Option<&str>,
    dir: &Path,
) -> Result<()> {
    let t0 = Instant::now();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (maps, mask) = import_maps(maps_dir)?;
    let masked = crate::fitstack::apply_mask(&maps, &mask);
    let row = row.unwrap_or(maps.ny / 2);
    if row >= maps.ny {
        return Err(Error::InvalidArgument(format!(
            "row {row} outside the {}x{} map",
            maps.ny, maps.nx
        )));
    }

    // Cross-section profiles along the chosen row.
    let pitch = maps.superpixel_pitch_m();
    for (name, data) in [
        ("shift", &masked.shift_t),
        ("contrast", &masked.contrast_pct),
        ("fwhm", &masked.fwhm_t),
    ] {
        let profile = cross_section(data, maps.nx, maps.ny, row, pitch)?;
        let mut buf = String::new();
        buf.push_str(&format!("# component = {name}\n# row = {row}\n"));
        buf.push_str("# columns = distance_um,value\n");
        for (x, v) in profile {
            buf.push_str(&format!("{x:e},{v:e}\n"));
        }
        let path = dir.join(format!("{name}_profile.csv"));
        std::fs::write(&path, buf).map_err(|e| Error::io(path, e))?;
    }

    // Per-superpixel sensitivity from the fitted lineshape and the
    // superpixel photon rate (the binned mean offset times the block size).
    let block = (maps.bin_factor * maps.bin_factor) as f64;
    let rate: Vec<f64> = masked
        .y0_counts
        .iter()
        .map(|y0| y0 * block / maps.exposure_s)
        .collect();
    let sens = sensitivity_map(&masked, &rate, P_F_GAUSSIAN)?;
    let finite: Vec<f64> = sens.iter().copied().filter(|v| v.is_finite()).collect();
    let mean_sensitivity = if finite.is_empty() {
        None
    } else {
        Some(finite.iter().sum::<f64>() / finite.len() as f64)
    };
    let sens_meta = RasterMeta {
        nx: maps.nx,
        ny: maps.ny,
        pitch_m: pitch,
        standoff_m: Some(maps.standoff_m),
        component: "sensitivity".into(),
        units: "T/sqrt(Hz)".into(),
        bin_factor: Some(maps.bin_factor),
        mask_encoding: Some("NaN = masked".into()),
    };
    write_f32_raster(&dir.join("sensitivity"), &sens, &sens_meta)?;
    write_csv_raster(&dir.join("sensitivity.csv"), &sens, &sens_meta)?;

    // Rendered maps: diverging for the signed shift, sequential otherwise.
    render_png(
        &dir.join("shift.png"),
        &masked.shift_t,
        maps.nx,
        maps.ny,
        Colormap::Diverging,
        None,
    )?;
    for (name, data) in [
        ("contrast", &masked.contrast_pct),
        ("fwhm", &masked.fwhm_t),
        ("sensitivity", &sens),
    ] {
        render_png(
            &dir.join(format!("{name}.png")),
            data,
            maps.nx,
            maps.ny,
            Colormap::Sequential,
            None,
        )?;
    }

    let comparison = match sim_dir {
        Some(sim) => {
            let pooled = load_sim_bz_pooled(sim, &maps)?;
            Some(compare(&maps.shift_t, &pooled, &mask)?)
        }
        None => None,
    };

    let linearity_report = match series {
        Some(series) => {
            let mut entries = Vec::new();
            for item in series.split(',') {
                let (current, path) = item.split_once('=').ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "series entries must be current=mapsdir, got '{item}'"
                    ))
                })?;
                let current: f64 = current.trim().parse().map_err(|_| {
                    Error::InvalidArgument(format!("bad series current '{current}'"))
                })?;
                entries.push((current, import_maps(Path::new(path.trim()))?.0));
            }
            if entries.len() < 3 {
                return Err(Error::InvalidArgument(
                    "a linearity series needs at least 3 currents".into(),
                ));
            }
            let (i, j) = match pixel {
                Some(p) => parse_pixel(p)?,
                None => strongest_pixel(&maps, &mask).ok_or_else(|| {
                    Error::InvalidArgument("no unmasked pixels for linearity".into())
                })?,
            };
            let series_refs: Vec<(f64, &ParameterMaps)> =
                entries.iter().map(|(c, m)| (*c, m)).collect();
            Some(linearity(&series_refs, i, j)?)
        }
        None => None,
    };

    let summary = ReportSummary {
        command: "report",
        row,
        mean_sensitivity,
        comparison,
        linearity: linearity_report,
    };
    write_summary(dir, &summary)?;
    if let Some(m) = &summary.comparison {
        println!(
            "report: comparison rmse = {:.3e} T, r = {:.4}, max |err| = {:.3e} T over {} px",
            m.rmse_t, m.pearson_r, m.max_abs_err_t, m.n_pixels
        );
    }
    if let Some(l) = &summary.linearity {
        println!(
            "report: linearity at ({}, {}): shift R^2 = {:.7}, fwhm R^2 = {:.5}, contrast R^2 = {:.5}",
            l.pixel.0, l.pixel.1, l.shift.r2, l.fwhm.r2, l.contrast.r2
        );
    }
    if let Some(s) = summary.mean_sensitivity {
        println!("report: mean per-pixel sensitivity = {s:.3e} T/sqrt(Hz)");
    }
    println!("report: row {row} profiles -> {} ({:.2?})", dir.display(), t0.elapsed());
    Ok(())
}

#[derive(Serialize)]
struct Check {
    name: String,
    pass: bool,
    value: f64,
    bound: f64,
}

impl Check {
    fn le(name: &str, value: f64, bound: f64) -> Check {
        Check {
            name: name.into(),
            pass: value <= bound,
            value,
            bound,
        }
    }

    fn ge(name: &str, value: f64, bound: f64) -> Check {
        Check {
            name: name.into(),
            pass: value >= bound,
            value,
            bound,
        }
    }

    fn print(&self) {
        println!(
            "[{}] {}: {:.6e} vs bound {:.6e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.bound
        );
    }
}

/// The consolidated loop: simulate -> synth -> fit -> compare, plus an
/// optional expected-value linearity series. Fails (exit 2) when any
/// configured tolerance is missed.
pub fn cmd_roundtrip(
    cfg: &RunConfig,
    currents: Option<&str>,
    noiseless: bool,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sim_dir = dir.join("sim");
    let stack_dir = dir.join("stack");
    let maps_dir = dir.join("maps");

    cmd_simulate(cfg, &sim_dir).map_err(|e| stage("simulate", e))?;
    cmd_synth(cfg, noiseless, &stack_dir).map_err(|e| stage("synth", e))?;
    let (maps, mask) = cmd_fit(cfg, &stack_dir, &maps_dir).map_err(|e| stage("fit", e))?;

    let pooled = load_sim_bz_pooled(&sim_dir, &maps)?;
    let metrics = compare(&maps.shift_t, &pooled, &mask)?;
    let peak = pooled.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut rmse_bound = cfg.roundtrip.max_rmse_frac_of_peak * peak;
    if let Some(abs) = cfg.roundtrip.max_rmse_t {
        rmse_bound = rmse_bound.min(abs);
    }

    let mut checks = vec![
        Check::ge("pearson_r", metrics.pearson_r, cfg.roundtrip.min_pearson_r),
        Check::le("shift_rmse_T", metrics.rmse_t, rmse_bound),
    ];

    let linearity_report = match currents {
        Some(list) => {
            let currents = parse_currents(list)?;
            let report = expected_value_linearity(cfg, &currents, &maps, &mask)?;
            checks.push(Check::ge("shift_r2", report.shift.r2, cfg.roundtrip.min_shift_r2));
            checks.push(Check::ge("fwhm_r2", report.fwhm.r2, cfg.roundtrip.min_trend_r2));
            checks.push(Check::ge(
                "contrast_r2",
                report.contrast.r2,
                cfg.roundtrip.min_trend_r2,
            ));
            Some(report)
        }
        None => None,
    };

    for c in &checks {
        c.print();
    }
    let all_pass = checks.iter().all(|c| c.pass);

    #[derive(Serialize)]
    struct Summary {
        command: &'static str,
        pass: bool,
        comparison: CompareMetrics,
        #[serde(rename = "peak_abs_bz_T")]
        peak_abs_bz_t: f64,
        checks: Vec<Check>,
        #[serde(skip_serializing_if = "Option::is_none")]
        linearity: Option<LinearityReport>,
    }
    write_summary(
        dir,
        &Summary {
            command: "roundtrip",
            pass: all_pass,
            comparison: metrics,
            peak_abs_bz_t: peak,
            checks,
            linearity: linearity_report,
        },
    )?;

    if all_pass {
        println!("ROUNDTRIP: PASS");
        Ok(())
    } else {
        println!("ROUNDTRIP: FAIL");
        Err(Error::Manifest(
            "roundtrip tolerances not met (see pass/fail lines above)".into(),
        ))
    }
}

fn stage(name: &str, e: Error) -> Error {
    Error::Manifest(format!("stage {name}: {e}"))
}

/// Noise-free linearity series on the expected-value path, fitted at the
/// strongest unmasked pixel of the main run.
fn expected_value_linearity(
    cfg: &RunConfig,
    currents: &[f64],
    maps: &ParameterMaps,
    mask: &[bool],
) -> Result<LinearityReport> {
    let (i, j) = strongest_pixel(maps, mask)
        .ok_or_else(|| Error::InvalidArgument("no unmasked pixels for linearity".into()))?;
    let mut series: Vec<(f64, ParameterMaps)> = Vec::new();
    for &current in currents {
        let mut spec = cfg.scene_spec()?;
        spec.current_a = current;
        spec.cluster.sigma_ln = 0.0;
        let scene = make_scene(&spec, cfg.seed)?;
        let float = expected_stack(&scene, &cfg.protocol, &cfg.camera)?;
        let binned: BinnedStack = bin_rates(&float, cfg.fit.bin_factor)?;
        series.push((current, fit_all(&binned, &cfg.fit_options())));
    }
    let refs: Vec<(f64, &ParameterMaps)> = series.iter().map(|(c, m)| (*c, m)).collect();
    linearity(&refs, i, j)
}
