//! Simulated hotel inventory and position-biased users.
//!
//! The user model is known exactly, so the examination curve used to
//! generate the logs can be compared with what the estimator recovers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::math::{exp, powf, sigmoid, sqrt};
use crate::rng;
use crate::types::{Event, GeoId, Hotel, HotelId, Impression, SessionId, SessionLog};
use crate::{Error, Result, DEFAULT_PAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Examination at rank `k` is independent with probability `(1/k)^eta`.
    #[default]
    Pbm,
    /// Top-down scan that stops after the first click.
    Cascade,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UserModelConfig {
    pub model_kind: ModelKind,
    pub eta: f64,
    pub click_sharpness: f64,
    pub booking_page_prob: f64,
    pub booking_prob: f64,
}

impl Default for UserModelConfig {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::Pbm,
            eta: 1.0,
            click_sharpness: 6.0,
            booking_page_prob: 0.4,
            booking_prob: 0.25,
        }
    }
}

impl UserModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(self.click_sharpness > 0.0 && self.click_sharpness.is_finite()) {
            return Err(Error::Config(format!(
                "click_sharpness must be > 0, got {}",
                self.click_sharpness
            )));
        }
        for (name, p) in [
            ("booking_page_prob", self.booking_page_prob),
            ("booking_prob", self.booking_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    /// Ground-truth examination probability at 1-based `position` under pbm.
    pub fn examination(&self, position: usize) -> f64 {
        powf(1.0 / position as f64, self.eta)
    }

    /// Click probability once a hotel has been examined.
    pub fn click_given_examined(&self, latent_quality: f64) -> f64 {
        sigmoid(self.click_sharpness * (latent_quality - 0.5))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniverseConfig {
    pub num_geos: usize,
    pub hotels_per_geo: usize,
    pub feature_dimension: usize,
    pub page_size: usize,
    /// Standard deviation of the logging policy's score noise.
    pub logging_policy_noise: f64,
    /// Share of the logging noise that is a persistent per-hotel offset
    /// (correlation between the noise of two sessions for the same hotel).
    /// The offset is visible to models as the `legacy_boost` feature.
    pub logging_persistence: f64,
    /// Slope of the quality -> booking-rate logistic.
    pub booking_sharpness: f64,
    /// Log-normal spread of per-hotel booking counts around the curve.
    pub booking_noise: f64,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            num_geos: 20,
            hotels_per_geo: 100,
            feature_dimension: 6,
            page_size: DEFAULT_PAGE_SIZE,
            logging_policy_noise: 0.25,
            logging_persistence: 0.8,
            booking_sharpness: 6.0,
            booking_noise: 0.1,
        }
    }
}

impl UniverseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_geos < 1 {
            return Err(Error::Config("num_geos must be >= 1".into()));
        }
        if self.page_size < 1 {
            return Err(Error::Config("page_size must be >= 1".into()));
        }
        if self.hotels_per_geo < self.page_size {
            return Err(Error::Config(format!(
                "hotels_per_geo ({}) must be >= page_size ({})",
                self.hotels_per_geo, self.page_size
            )));
        }
        if self.feature_dimension < 1 {
            return Err(Error::Config("feature_dimension must be >= 1".into()));
        }
        if !(self.logging_policy_noise >= 0.0 && self.logging_policy_noise.is_finite()) {
            return Err(Error::Config("logging_policy_noise must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.logging_persistence) {
            return Err(Error::Config(
                "logging_persistence must be in [0, 1]".into(),
            ));
        }
        if !(self.booking_sharpness > 0.0) || !(self.booking_noise >= 0.0) {
            return Err(Error::Config(
                "booking_sharpness must be > 0 and booking_noise >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Names of the generated feature columns, in order. Columns beyond this
/// list are pure noise.
pub const FEATURE_NAMES: [&str; 4] = ["star_rating", "review_score", "price_level", "legacy_boost"];

/// The simulated inventory. Hotel ids are dense: `hotels[i].hotel_id == i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HotelUniverse {
    pub hotels: Vec<Hotel>,
    pub feature_dimension: usize,
    pub page_size: usize,
    pub logging_policy_noise: f64,
    pub logging_persistence: f64,
    /// Persistent per-hotel logging offset (unit variance), aligned with
    /// `hotels`.
    pub legacy_boost: Vec<f64>,
    pub seed: u64,
}

impl HotelUniverse {
    pub fn hotel(&self, id: HotelId) -> Option<&Hotel> {
        self.hotels.get(id.0 as usize).filter(|h| h.hotel_id == id)
    }

    pub fn geos(&self) -> Vec<GeoId> {
        let mut geos: Vec<GeoId> = self.hotels.iter().map(|h| h.geo_id).collect();
        geos.dedup();
        geos
    }

    pub fn num_geos(&self) -> usize {
        self.geos().len()
    }

    /// Index range of `geo`'s hotels in `hotels` (hotels are grouped by geo).
    pub fn geo_range(&self, geo: GeoId) -> Option<Range<usize>> {
        let start = self.hotels.iter().position(|h| h.geo_id == geo)?;
        let len = self.hotels[start..]
            .iter()
            .take_while(|h| h.geo_id == geo)
            .count();
        Some(start..start + len)
    }

    pub fn geo_hotels(&self, geo: GeoId) -> Option<&[Hotel]> {
        self.geo_range(geo).map(|r| &self.hotels[r])
    }

    pub fn geo_index(&self) -> BTreeMap<HotelId, GeoId> {
        self.hotels.iter().map(|h| (h.hotel_id, h.geo_id)).collect()
    }

    pub fn bookings(&self) -> BTreeMap<HotelId, f64> {
        self.hotels
            .iter()
            .map(|h| (h.hotel_id, h.historical_bookings))
            .collect()
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

/// Generates the hotel inventory.
///
/// Features are noisy functions of latent quality (plus the persistent
/// logging offset and pure-noise columns); booking counts are a logistic of
/// quality scaled by a per-geo popularity factor.
pub fn gen_universe(config: &UniverseConfig, seed: u64) -> Result<HotelUniverse> {
    config.validate()?;
    let d = config.feature_dimension;
    let mut hotels = Vec::with_capacity(config.num_geos * config.hotels_per_geo);
    let mut legacy_boost = Vec::with_capacity(hotels.capacity());
    for g in 0..config.num_geos {
        let mut geo_rng = rng::stream(seed, "universe.geo", &[g as u64]);
        let popularity = exp(0.5 * normal(&mut geo_rng));
        for i in 0..config.hotels_per_geo {
            let id = (g * config.hotels_per_geo + i) as u64;
            let mut r = rng::stream(seed, "universe.hotel", &[id]);
            let q: f64 = r.random_range(0.01..0.99);
            let boost = normal(&mut r);
            let mut features = Vec::with_capacity(d);
            for j in 0..d {
                let z = normal(&mut r);
                let x = match j {
                    0 => 1.0 + 4.0 * q + 0.6 * z,
                    1 => 10.0 * q + 1.0 * z,
                    2 => 0.5 * q + 0.2 * z,
                    3 => boost,
                    _ => z,
                };
                features.push(x);
            }
            let s = config.booking_noise;
            let bookings = 1000.0
                * popularity
                * sigmoid(config.booking_sharpness * (q - 0.5))
                * exp(s * normal(&mut r) - 0.5 * s * s);
            hotels.push(Hotel {
                hotel_id: HotelId(id),
                geo_id: GeoId(g as u32),
                latent_quality: q,
                features,
                historical_bookings: bookings,
            });
            legacy_boost.push(boost);
        }
    }
    Ok(HotelUniverse {
        hotels,
        feature_dimension: d,
        page_size: config.page_size,
        logging_policy_noise: config.logging_policy_noise,
        logging_persistence: config.logging_persistence,
        legacy_boost,
        seed,
    })
}

/// Sorts `(score, id)` pairs by descending score, ties by ascending id.
pub(crate) fn sort_desc_by_score(scored: &mut [(f64, HotelId)]) {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
}

/// The production ranker that produced the logs: latent quality plus
/// Gaussian noise, top `page_size`, ties broken by hotel id.
pub fn rank_logging_policy(
    universe: &HotelUniverse,
    geo: GeoId,
    seed: u64,
) -> Result<Vec<HotelId>> {
    let range = universe
        .geo_range(geo)
        .ok_or_else(|| Error::Lookup(format!("unknown geo {geo}")))?;
    let sigma = universe.logging_policy_noise;
    let rho = universe.logging_persistence;
    let fresh = sqrt(1.0 - rho * rho);
    let mut r = rng::stream(seed, "logging.noise", &[u64::from(geo.0)]);
    let mut scored: Vec<(f64, HotelId)> = universe.hotels[range.clone()]
        .iter()
        .zip(&universe.legacy_boost[range])
        .map(|(h, boost)| {
            let noise = rho * boost + fresh * normal(&mut r);
            (h.latent_quality + sigma * noise, h.hotel_id)
        })
        .collect();
    sort_desc_by_score(&mut scored);
    Ok(scored
        .into_iter()
        .take(universe.page_size)
        .map(|(_, id)| id)
        .collect())
}

/// A simulated session together with the hidden examination trace.
///
/// The trace is ground truth for debugging and oracles; estimation and
/// training only ever receive `log`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSession {
    pub log: SessionLog,
    pub examined: Vec<bool>,
}

/// Runs one user over `ranking`.
///
/// Four uniforms are drawn per position regardless of outcome, so two
/// rankings simulated with the same `user_seed` share their randomness
/// position by position.
pub fn simulate_session(
    universe: &HotelUniverse,
    ranking: &[HotelId],
    user: &UserModelConfig,
    session_id: SessionId,
    user_seed: u64,
) -> Result<SimulatedSession> {
    if ranking.len() != universe.page_size {
        return Err(Error::Config(format!(
            "ranking has {} hotels, page size is {}",
            ranking.len(),
            universe.page_size
        )));
    }
    user.validate()?;
    let mut r = rng::stream(user_seed, "user", &[]);
    let mut impressions = Vec::with_capacity(ranking.len());
    let mut examined = Vec::with_capacity(ranking.len());
    let mut stopped = false;
    let mut query_geo = None;
    for (i, &id) in ranking.iter().enumerate() {
        let hotel = universe
            .hotel(id)
            .ok_or_else(|| Error::Lookup(format!("unknown hotel {id}")))?;
        query_geo.get_or_insert(hotel.geo_id);
        let position = i + 1;
        let (u_exam, u_click, u_type, u_book): (f64, f64, f64, f64) =
            (r.random(), r.random(), r.random(), r.random());
        let exam = match user.model_kind {
            ModelKind::Pbm => u_exam < user.examination(position),
            ModelKind::Cascade => !stopped,
        };
        let clicked = exam && u_click < user.click_given_examined(hotel.latent_quality);
        let event = if !clicked {
            Event::None
        } else if u_type < user.booking_page_prob {
            if u_book < user.booking_prob {
                Event::Booked
            } else {
                Event::ClickBooking
            }
        } else {
            Event::ClickReview
        };
        if clicked && user.model_kind == ModelKind::Cascade {
            stopped = true;
        }
        examined.push(exam);
        impressions.push(Impression {
            hotel_id: id,
            position: position as u32,
            event,
            features_snapshot: hotel.features.clone(),
        });
    }
    Ok(SimulatedSession {
        log: SessionLog {
            session_id,
            query_geo: query_geo.unwrap_or(GeoId(0)),
            impressions,
            user_seed,
        },
        examined,
    })
}

/// Per-session draws derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionDraw {
    pub session_id: SessionId,
    pub geo: GeoId,
    pub ranking_seed: u64,
    pub user_seed: u64,
}

/// Geo and seeds of session `index` for master `seed`. Geos are uniform.
pub fn session_draw(geos: &[GeoId], seed: u64, index: u64) -> SessionDraw {
    let g = rng::stream(seed, "session.geo", &[index]).random_range(0..geos.len());
    SessionDraw {
        session_id: SessionId(index),
        geo: geos[g],
        ranking_seed: rng::derive(seed, "session.rank", &[index]),
        user_seed: rng::derive(seed, "session.user", &[index]),
    }
}

/// Lazily simulates `num_sessions` logged sessions under the logging policy.
pub fn simulate_log<'a>(
    universe: &'a HotelUniverse,
    user: &'a UserModelConfig,
    num_sessions: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Result<SimulatedSession>> + 'a> {
    if num_sessions < 1 {
        return Err(Error::Config("num_sessions must be >= 1".into()));
    }
    user.validate()?;
    let geos = universe.geos();
    Ok((0..num_sessions as u64).map(move |i| {
        let draw = session_draw(&geos, seed, i);
        let ranking = rank_logging_policy(universe, draw.geo, draw.ranking_seed)?;
        simulate_session(universe, &ranking, user, draw.session_id, draw.user_seed)
    }))
}

/// Examination counts by position, accumulated from hidden traces.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExaminationTally {
    pub examined: Vec<u64>,
    pub shown: Vec<u64>,
}

impl ExaminationTally {
    pub fn add(&mut self, trace: &[bool]) {
        if self.shown.len() < trace.len() {
            self.shown.resize(trace.len(), 0);
            self.examined.resize(trace.len(), 0);
        }
        for (i, &e) in trace.iter().enumerate() {
            self.shown[i] += 1;
            self.examined[i] += u64::from(e);
        }
    }

    pub fn rates(&self) -> Vec<f64> {
        self.examined
            .iter()
            .zip(&self.shown)
            .map(|(&e, &n)| if n == 0 { 0.0 } else { e as f64 / n as f64 })
            .collect()
    }
}

/// True examination curve by position, normalized to position 1.
///
/// Closed form under pbm; under cascade it depends on the rankings, so the
/// empirical rate from `tally` is used.
pub fn prop_true(
    user: &UserModelConfig,
    page_size: usize,
    tally: Option<&ExaminationTally>,
) -> Vec<f64> {
    match (user.model_kind, tally) {
        (ModelKind::Cascade, Some(t)) => {
            let rates = t.rates();
            let first = rates.first().copied().unwrap_or(1.0);
            rates
                .iter()
                .map(|r| if first > 0.0 { r / first } else { 0.0 })
                .collect()
        }
        _ => (1..=page_size).map(|k| user.examination(k)).collect(),
    }
}
