//! Estimation of the cumulative average treatment effect of a two-phase
//! treatment sequence in multisite randomized trials where Phase-II receipt is
//! subject to noncompliance.
//!
//! The estimator runs in two stages. Stage 1 estimates, site by site, the
//! intent-to-treat effects of the Phase-I assignment `Z` on the intermediate
//! outcome `V`, on Phase-II receipt `D` and on the final outcome `Y`. Stage 2
//! regresses the site ITT effects on `Y` against the site ITT effects on `D`,
//! the treated-arm take-up rates and the site ITT effects on `V`, and combines
//! the coefficients into the cumulative effect.
//!
//! Also included: comparison estimators (naive contrasts and IPTW), the
//! simulation data-generating process with assumption-violation variants, a
//! multilevel bootstrap with BCa intervals, the omitted-`V` bias calculator and
//! a Monte Carlo study harness.

// Index loops mirror the matrix algebra they implement.
#![allow(clippy::needless_range_loop)]

pub mod bootstrap;
pub mod comparators;
pub mod data;
pub mod error;
pub mod harness;
pub mod regression;
pub mod seeding;
pub mod sensitivity;
pub mod simgen;
pub mod stage1;
pub mod stage2;

pub use data::{ColumnMapping, DatasetReport, IndividualRecord, MultisiteDataset, SiteData};
pub use error::{Error, Result};
pub use stage1::{SiteEffects, Stage1Result};
pub use stage2::{AteResult, Estimate, Interval, Stage2Fit};
