//! Domain-decomposed physics-informed neural network training engine.
//!
//! One small network is trained per subdomain with one worker per subdomain.
//! Workers couple through interface terms (solution averaging plus either
//! flux continuity or residual continuity) whose neighbor halves are
//! exchanged once per epoch as non-blocking point-to-point messages over a
//! pluggable transport (in-process mailboxes or one OS process per rank over
//! TCP sockets).
//!
//! Module map:
//! * [`autodiff`] - scalar reverse-mode tape plus forward-mode second-order jets
//! * [`network`] - feed-forward networks with layer-wise adaptive slopes
//! * [`geometry`] - domain decomposition, interface wiring, point sampling
//! * [`pde`] - problem definitions (residuals, fluxes, reference fields)
//! * [`losses`] - loss terms, coupling methods, global stitching
//! * [`transport`] - envelope exchange, matching, deadlock diagnostics
//! * [`solver`] - Adam, the per-epoch training loop, evaluation
//! * [`metrics`] - scaling efficiencies and benchmark reports
//! * [`config`] - run configuration parsing and validation
//! * [`commands`] - CLI subcommand drivers (train/eval/bench/decompose/export)

pub mod autodiff;
pub mod commands;
pub mod config;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod pde;
pub mod real;
pub mod solver;
pub mod transport;

mod error;

pub use error::{Error, Result};
