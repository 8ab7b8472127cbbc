#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is how validation rejects NaN along with the bad range
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Counterfactual learning-to-rank under position bias.
//!
//! This crate holds the pure algorithmic pieces of the pipeline and only
//! needs `alloc`:
//!
//! * [`simclick`] generates a hotel inventory and position-biased click logs
//!   from a user model whose examination curve is known.
//! * [`propensity`] estimates the examination curve from regular clicks,
//!   dividing the click curve by a booking-count relevance curve.
//! * [`debias`] turns logs into labeled training sets, keeping everything at
//!   or above the last click and sampling below it.
//! * [`ranker`] is a pairwise (lambda-gradient) gradient-boosted tree ranker.
//! * [`embed`] trains skip-gram hotel embeddings with within-geo negatives.
//! * [`evalab`] evaluates models and runs the paired simulated A/B test.
//!
//! File formats, the CLI and all IO live in the `posbias` crate.
//!
//! With the `parallel` feature (default) gradient computation and split
//! finding run on the current rayon pool. Results are bit-identical for any
//! thread count.

extern crate alloc;

pub mod debias;
pub mod embed;
mod error;
pub mod evalab;
pub mod isotonic;
pub(crate) mod math;
mod par;
pub mod propensity;
pub mod ranker;
pub mod rng;
pub mod simclick;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    validate_session, Event, GeoId, Hotel, HotelId, Impression, PropensityCurve, SessionId,
    SessionLog, Violation, DEFAULT_PAGE_SIZE,
};
