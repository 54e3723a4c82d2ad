//! Simulation and estimation toolkit for single- and few-photon detector
//! calibration.
//!
//! The crate covers three calibration families:
//!
//! * two-photon (Klyshko) efficiency calibration with a correlated
//!   uncertainty budget ([`klyshko`]),
//! * heralded per-peak efficiency estimation for photon-number-resolving
//!   detectors ([`pnrd`]),
//! * detector tomography from coherent probes ([`povm_tomo`]) and from twin
//!   beams ([`twin_beam`]).
//!
//! [`sim`] generates synthetic data for each of them against the detector
//! models in [`detector`].

pub mod detector;
pub mod error;
pub mod estimate;
pub mod klyshko;
pub mod optimize;
pub mod photon_stats;
pub mod pnrd;
pub mod povm_tomo;
pub mod rng;
pub mod sim;
pub mod twin_beam;

pub use error::{CalError, Result};
