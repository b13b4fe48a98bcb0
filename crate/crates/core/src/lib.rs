//! Lag-coupled Markov chain Monte Carlo for dated phylogenies under the
//! Stochastic Dollo model of binary trait evolution.
//!
//! The crate is organised bottom-up:
//!
//! * [`tree`]: dated bifurcating trees, Newick I/O, clades, splits and the
//!   housekeeping relabelling that aligns two trees before a coupled move.
//! * [`model`]: the Stochastic Dollo likelihood, priors and forward simulator.
//! * [`coupling`]: maximal couplings and the per-pair random stream.
//! * [`kernel`]: the mixture of Metropolis-Hastings moves, each usable alone
//!   or coupled across two chains.
//! * [`chains`]: lag-l coupled chains, meeting times and the experiment runner.
//! * [`diagnostics`]: total-variation bounds, survival curves and ASDSF.
//! * [`config`] and [`io`]: experiment files and CSV outputs.

pub mod chains;
pub mod config;
pub mod coupling;
pub mod diagnostics;
pub mod io;
pub mod kernel;
pub mod model;
pub mod tree;
