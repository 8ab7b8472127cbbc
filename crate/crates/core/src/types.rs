//! Domain types shared by every stage: hotels, impressions, session logs and
//! the propensity curve, plus session validation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Results shown on one page.
pub const DEFAULT_PAGE_SIZE: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HotelId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GeoId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u64);

impl fmt::Display for HotelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for GeoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One hotel of the simulated inventory.
///
/// `latent_quality` is simulation ground truth. Training code only ever sees
/// `features` (through impression snapshots) and `historical_bookings`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hotel {
    pub hotel_id: HotelId,
    pub geo_id: GeoId,
    pub latent_quality: f64,
    pub features: Vec<f64>,
    pub historical_bookings: f64,
}

/// The strongest action a user took on an impression.
///
/// A booking implies the booking-page click, so only the maximal event is
/// stored.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    #[default]
    None,
    ClickReview,
    ClickBooking,
    Booked,
}

impl Event {
    /// Any event other than `None` counts as a click.
    #[inline]
    pub fn is_click(self) -> bool {
        self != Event::None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub hotel_id: HotelId,
    /// 1-based rank on the page.
    pub position: u32,
    pub event: Event,
    pub features_snapshot: Vec<f64>,
}

/// One search: the ordered impression list and what the user did with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub session_id: SessionId,
    pub query_geo: GeoId,
    pub impressions: Vec<Impression>,
    pub user_seed: u64,
}

impl SessionLog {
    pub fn has_click(&self) -> bool {
        self.impressions.iter().any(|imp| imp.event.is_click())
    }

    pub fn clicks(&self) -> usize {
        self.impressions
            .iter()
            .filter(|imp| imp.event.is_click())
            .count()
    }

    pub fn bookings(&self) -> usize {
        self.impressions
            .iter()
            .filter(|imp| imp.event == Event::Booked)
            .count()
    }
}

/// A broken invariant found by [`validate_session`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

fn violation(field: &str, rule: String) -> Violation {
    Violation {
        field: field.into(),
        rule,
    }
}

/// Checks every session and impression invariant and reports all breaks.
///
/// An empty result means the session is well formed.
pub fn validate_session(session: &SessionLog, page_size: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut expected: u32 = 1;
    for (index, imp) in session.impressions.iter().enumerate() {
        let p = imp.position;
        if p == 0 {
            out.push(violation(
                "position",
                format!("position must be >= 1 (impression {index})"),
            ));
            continue;
        }
        if p as usize > page_size {
            out.push(violation(
                "position",
                format!("position {p} exceeds page size {page_size}"),
            ));
        }
        if p > expected {
            for missing in expected..p {
                out.push(violation("position", format!("position gap at {missing}")));
            }
            expected = p + 1;
        } else if p < expected {
            out.push(violation(
                "position",
                format!("position {p} out of order at impression {index}"),
            ));
        } else {
            expected += 1;
        }
        if imp.features_snapshot.iter().any(|x| !x.is_finite()) {
            out.push(violation(
                "features_snapshot",
                format!("non-finite feature at position {p}"),
            ));
        }
    }

    let mut seen: BTreeMap<HotelId, u32> = BTreeMap::new();
    for imp in &session.impressions {
        if let Some(first) = seen.get(&imp.hotel_id) {
            out.push(violation(
                "hotel_id",
                format!(
                    "duplicate hotel_id {} at positions {} and {}",
                    imp.hotel_id, first, imp.position
                ),
            ));
        } else {
            seen.insert(imp.hotel_id, imp.position);
        }
    }
    out
}

/// Examination probability by position, normalized so position 1 is exactly
/// one, every value in `(0, 1]`, non-increasing in position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCurve", into = "RawCurve")]
pub struct PropensityCurve {
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCurve {
    values: Vec<f64>,
}

impl TryFrom<RawCurve> for PropensityCurve {
    type Error = Error;
    fn try_from(raw: RawCurve) -> Result<Self> {
        PropensityCurve::new(raw.values)
    }
}

impl From<PropensityCurve> for RawCurve {
    fn from(c: PropensityCurve) -> Self {
        RawCurve { values: c.values }
    }
}

impl PropensityCurve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("propensity curve is empty".into()));
        }
        if values[0] != 1.0 {
            return Err(Error::Data(format!(
                "propensity at position 1 must be 1, got {}",
                values[0]
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if !(*v > 0.0 && *v <= 1.0) {
                return Err(Error::Data(format!(
                    "propensity at position {} outside (0, 1]: {v}",
                    i + 1
                )));
            }
        }
        if let Some(i) = values.windows(2).position(|w| w[1] > w[0]) {
            return Err(Error::Data(format!(
                "propensity increases from position {} to {}",
                i + 1,
                i + 2
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Examination probability at 1-based `position`.
    ///
    /// Panics if `position` is 0 or beyond the curve.
    pub fn at(&self, position: usize) -> f64 {
        self.values[position - 1]
    }

    /// Probability that `k` was examined given the deepest click sits at
    /// `last_click`: one at or above the click, the propensity ratio below.
    pub fn conditional(&self, k: usize, last_click: usize) -> f64 {
        if k <= last_click {
            1.0
        } else {
            (self.at(k) / self.at(last_click)).min(1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn imp(hotel: u64, position: u32) -> Impression {
        Impression {
            hotel_id: HotelId(hotel),
            position,
            event: Event::None,
            features_snapshot: vec![0.0],
        }
    }

    fn session(imps: Vec<Impression>) -> SessionLog {
        SessionLog {
            session_id: SessionId(1),
            query_geo: GeoId(0),
            impressions: imps,
            user_seed: 0,
        }
    }

    #[test]
    fn well_formed_session_has_no_violations() {
        let s = session(vec![imp(10, 1), imp(11, 2), imp(12, 3)]);
        assert!(validate_session(&s, 30).is_empty());
    }

    #[test]
    fn position_gap_is_reported() {
        let s = session(vec![imp(10, 1), imp(11, 3)]);
        let v = validate_session(&s, 30);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "position");
        assert_eq!(v[0].rule, "position gap at 2");
    }

    #[test]
    fn duplicate_hotel_is_reported_by_name() {
        let s = session(vec![
            imp(10, 1),
            imp(42, 2),
            imp(11, 3),
            imp(12, 4),
            imp(42, 5),
        ]);
        let v = validate_session(&s, 30);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "hotel_id");
        assert!(v[0].rule.contains("42"), "{}", v[0]);
        assert!(v[0].rule.contains("2 and 5"), "{}", v[0]);
    }

    #[test]
    fn out_of_range_and_reordered_positions() {
        let s = session(vec![imp(1, 1), imp(2, 2), imp(3, 2)]);
        assert_eq!(validate_session(&s, 30).len(), 1);
        let s = session(vec![imp(1, 1), imp(2, 2)]);
        assert_eq!(validate_session(&s, 1).len(), 1);
        let s = session(vec![imp(1, 0)]);
        assert_eq!(validate_session(&s, 30).len(), 1);
    }

    #[test]
    fn event_ordering_and_serde_names() {
        assert!(Event::None < Event::ClickReview);
        assert!(Event::ClickReview < Event::ClickBooking);
        assert!(Event::ClickBooking < Event::Booked);
        assert!(!Event::None.is_click());
        assert!(Event::Booked.is_click());
    }

    #[test]
    fn curve_invariants_enforced() {
        assert!(PropensityCurve::new(vec![1.0, 0.5, 0.25]).is_ok());
        assert!(PropensityCurve::new(vec![0.9, 0.5]).is_err());
        assert!(PropensityCurve::new(vec![1.0, 0.5, 0.6]).is_err());
        assert!(PropensityCurve::new(vec![1.0, 0.0]).is_err());
        assert!(PropensityCurve::new(vec![]).is_err());
    }

    #[test]
    fn conditional_follows_last_click() {
        let c = PropensityCurve::new(vec![1.0, 0.5, 0.25]).unwrap();
        assert_eq!(c.conditional(2, 3), 1.0);
        assert_eq!(c.conditional(3, 1), 0.25);
        assert_eq!(c.conditional(3, 2), 0.5);
    }
}
