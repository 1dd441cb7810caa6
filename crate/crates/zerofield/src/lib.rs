//! Microwave-free wide-field magnetometry, end to end in software.
//!
//! The pipeline mirrors a desk-scale instrument that images the magnetic
//! field of a current-carrying cross pattern through the near-zero-field
//! fluorescence dip of a nanodiamond layer:
//!
//! 1. **magnetostatics** - Biot-Savart fields of filament bundles (cross
//!    routes, square bias coil) on raster grids.
//! 2. **lineshape** - the zero-field feature (offset, amplitude, center,
//!    width) and its response to parallel and transverse fields.
//! 3. **synth** - field-scanned fluorescence stacks with photon shot noise,
//!    camera quantization, and counter-keyed reproducible randomness.
//! 4. **fitstack** - 16x16 binning and damped Gauss-Newton per-superpixel
//!    fits with the analytic Jacobian, in parallel.
//! 5. **analysis** - shift/contrast/width maps, cross-sections, linearity,
//!    simulation comparison, and shot-noise sensitivity estimates.
//! 6. **cli** - the `zerofield` command wiring it all together.

// Validation uses the `!(x > 0.0)` form throughout so NaN fails closed.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod fitstack;
pub mod lineshape;
pub mod magnetostatics;
pub mod pgm;
pub mod raster;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use lineshape::{TransverseResponse, ZeroFieldFeature};
pub use magnetostatics::{CrossPattern, CurrentPath, FieldMap, GridSpec, Route, Segment, Vec3};
