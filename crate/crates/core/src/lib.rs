#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Channel gain map (CGM) reconstruction from sparse channel-power
//! measurements using a virtual-scatterer propagation model.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: scene description, grid partition, line-of-sight tests and
//!   angle-of-departure sectorization.
//! * [`channel`]: the virtual-scatterer parameterization and the forward map
//!   from scatterer parameters to per-grid power gain.
//! * [`estimation`]: least-squares response estimation, projected-gradient
//!   position refinement and the progressive outer loop.
//! * [`gpr`]: Gaussian-process completion of unobserved response
//!   coefficients and the end-to-end reconstruction.
//! * [`baselines`]: fixed-position scatterer models and ordinary kriging.
//! * [`synth`]: synthetic scenes, ground truth and measurement sampling.
//! * [`metrics`]: NMSE and the seeded experiment sweep.
//! * [`io`]: the JSON / CSV file formats.
//!
//! Data-parallel inner loops (per-grid visibility, map prediction, kriging
//! solves, sweep runs) use rayon when the `parallel` feature is enabled and
//! fall back to plain iterators otherwise. Results are identical either way.

pub mod baselines;
pub mod channel;
mod error;
pub mod estimation;
pub mod geometry;
pub mod gpr;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod par;
pub mod seed;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
