//! Command-line pipeline around `posbias-core`: simulate click logs,
//! estimate the propensity curve, build debiased training sets, train and
//! evaluate rankers and run a simulated A/B test.
//!
//! Every step reads and writes files under one output directory and keeps
//! `manifest.json` there up to date.

use std::fmt;

pub mod commands;
pub mod config;
pub mod formats;
pub mod store;

/// An error tagged with the module that raised it.
#[derive(Debug)]
pub struct Failure {
    pub module: &'static str,
    pub cause: anyhow::Error,
}

impl Failure {
    pub fn new(module: &'static str, cause: anyhow::Error) -> Self {
        Self { module, cause }
    }

    /// Adapter for `map_err`.
    pub fn in_module<E: Into<anyhow::Error>>(module: &'static str) -> impl Fn(E) -> Failure {
        move |e| Failure::new(module, e.into())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {:#}", self.module, self.cause)
    }
}

impl std::error::Error for Failure {}
