//! Session logs to labeled training data under the bias-handling modes.
//!
//! Everything at or above the deepest click of a session is kept; the modes
//! differ only in what they keep below it.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::rng;
use crate::types::{Event, HotelId, Impression, PropensityCurve, SessionId, SessionLog};
use crate::{Error, Result};

/// Labels per event: booking 5, booking-page click 2, review click 1.
pub fn assign_label(impression: &Impression) -> u8 {
    match impression.event {
        Event::Booked => 5,
        Event::ClickBooking => 2,
        Event::ClickReview => 1,
        Event::None => 0,
    }
}

/// Deepest position carrying any click or booking.
pub fn last_click_position(session: &SessionLog) -> Option<u32> {
    session
        .impressions
        .iter()
        .filter(|imp| imp.event.is_click())
        .map(|imp| imp.position)
        .max()
}

/// How impressions below the last click are treated.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplingMode {
    /// Keep everything.
    Control,
    /// Keep each impression below the last click with a constant rate.
    Fixed(f64),
    /// Drop everything below the last click.
    Truncate,
    /// Keep below the last click with the conditional examination
    /// propensity `p(k) / p(last_click)`.
    Propensity(PropensityCurve),
}

/// A sampling mode without its curve: what configs and CLI flags name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModeSpec {
    Control,
    Fixed(f64),
    Truncate,
    Propensity,
}

impl ModeSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModeSpec::Control => "control",
            ModeSpec::Fixed(_) => "fixed",
            ModeSpec::Truncate => "truncate",
            ModeSpec::Propensity => "propensity",
        }
    }

    pub fn rate(&self) -> Option<f64> {
        match self {
            ModeSpec::Fixed(r) => Some(*r),
            _ => None,
        }
    }

    /// File-name friendly label, e.g. `fixed-0.8`.
    pub fn slug(&self) -> String {
        match self {
            ModeSpec::Fixed(r) => format!("fixed-{r}"),
            other => other.kind().into(),
        }
    }

    /// Attaches a curve; required for `propensity`, ignored otherwise.
    pub fn with_curve(&self, curve: Option<&PropensityCurve>) -> Result<SamplingMode> {
        Ok(match self {
            ModeSpec::Control => SamplingMode::Control,
            ModeSpec::Fixed(r) => SamplingMode::Fixed(*r),
            ModeSpec::Truncate => SamplingMode::Truncate,
            ModeSpec::Propensity => SamplingMode::Propensity(
                curve
                    .cloned()
                    .ok_or_else(|| Error::Config("propensity mode needs a curve".into()))?,
            ),
        })
    }
}

impl fmt::Display for ModeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModeSpec::Fixed(r) => write!(f, "fixed:{r}"),
            other => f.write_str(other.kind()),
        }
    }
}

impl FromStr for ModeSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "control" => Ok(ModeSpec::Control),
            "truncate" => Ok(ModeSpec::Truncate),
            "propensity" => Ok(ModeSpec::Propensity),
            _ => {
                let rate = s
                    .strip_prefix("fixed:")
                    .and_then(|r| r.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown sampling mode '{s}'")))?;
                if !(rate > 0.0 && rate <= 1.0) {
                    return Err(Error::Config(format!(
                        "fixed rate must be in (0, 1], got {rate}"
                    )));
                }
                Ok(ModeSpec::Fixed(rate))
            }
        }
    }
}

impl TryFrom<String> for ModeSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModeSpec> for String {
    fn from(m: ModeSpec) -> String {
        format!("{m}")
    }
}

impl SamplingMode {
    pub fn spec(&self) -> ModeSpec {
        match self {
            SamplingMode::Control => ModeSpec::Control,
            SamplingMode::Fixed(r) => ModeSpec::Fixed(*r),
            SamplingMode::Truncate => ModeSpec::Truncate,
            SamplingMode::Propensity(_) => ModeSpec::Propensity,
        }
    }

    /// Probability of keeping position `k` when the last click is at `p`.
    pub fn keep_probability(&self, k: u32, p: u32) -> f64 {
        if k <= p {
            return 1.0;
        }
        match self {
            SamplingMode::Control => 1.0,
            SamplingMode::Fixed(r) => *r,
            SamplingMode::Truncate => 0.0,
            SamplingMode::Propensity(curve) => {
                if k as usize > curve.len() || p as usize > curve.len() {
                    // beyond the estimated page: treat as unexamined
                    0.0
                } else {
                    curve.conditional(k as usize, p as usize)
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            SamplingMode::Fixed(r) if !(*r > 0.0 && *r <= 1.0) => Err(Error::Config(format!(
                "fixed rate must be in (0, 1], got {r}"
            ))),
            _ => Ok(()),
        }
    }
}

/// One labeled impression. `position` is kept for analysis; it is not part
/// of `features`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub session_id: SessionId,
    pub hotel_id: HotelId,
    pub label: u8,
    pub features: Vec<f64>,
    pub position: u32,
}

/// Labeled examples grouped by session (groups are contiguous and ordered by
/// session id).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingDataset {
    pub examples: Vec<TrainingExample>,
    pub feature_dimension: usize,
}

impl TrainingDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// `[start, end)` index ranges of each session group.
    pub fn group_ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.examples.len() {
            if i == self.examples.len()
                || self.examples[i].session_id != self.examples[start].session_id
            {
                out.push((start, i));
                start = i;
            }
        }
        out
    }

    pub fn label_counts(&self) -> BTreeMap<u8, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.examples {
            *counts.entry(e.label).or_insert(0) += 1;
        }
        counts
    }
}

/// Builds a training set from `log`.
///
/// Sessions without any click are dropped first. The keep decision for a
/// cell below the last click uses a uniform keyed by
/// `(seed, session_id, position)`, so runs of different modes on the same
/// seed share their draws.
pub fn prepare_training<'a, I>(log: I, mode: &SamplingMode, seed: u64) -> Result<TrainingDataset>
where
    I: IntoIterator<Item = &'a SessionLog>,
{
    mode.validate()?;
    let mut groups: Vec<(SessionId, Vec<TrainingExample>)> = Vec::new();
    let mut dim: Option<usize> = None;
    for session in log {
        let Some(p) = last_click_position(session) else {
            continue;
        };
        let mut kept = Vec::with_capacity(session.impressions.len());
        for imp in &session.impressions {
            match dim {
                None => dim = Some(imp.features_snapshot.len()),
                Some(d) if d != imp.features_snapshot.len() => {
                    return Err(Error::Data(format!(
                        "session {} has {} features at position {}, expected {d}",
                        session.session_id,
                        imp.features_snapshot.len(),
                        imp.position
                    )))
                }
                _ => {}
            }
            let keep_p = mode.keep_probability(imp.position, p);
            let keep = keep_p >= 1.0
                || (keep_p > 0.0
                    && rng::uniform(
                        seed,
                        "debias.keep",
                        &[session.session_id.0, u64::from(imp.position)],
                    ) < keep_p);
            if keep {
                kept.push(TrainingExample {
                    session_id: session.session_id,
                    hotel_id: imp.hotel_id,
                    label: assign_label(imp),
                    features: imp.features_snapshot.clone(),
                    position: imp.position,
                });
            }
        }
        groups.push((session.session_id, kept));
    }
    groups.sort_by_key(|(id, _)| *id);
    if let Some(w) = groups.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Data(format!("duplicate session id {}", w[0].0)));
    }
    Ok(TrainingDataset {
        examples: groups.into_iter().flat_map(|(_, g)| g).collect(),
        feature_dimension: dim.unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::GeoId;
    use alloc::vec;

    fn session(id: u64, events: &[Event]) -> SessionLog {
        SessionLog {
            session_id: SessionId(id),
            query_geo: GeoId(0),
            impressions: events
                .iter()
                .enumerate()
                .map(|(i, &e)| Impression {
                    hotel_id: HotelId(100 + i as u64),
                    position: i as u32 + 1,
                    event: e,
                    features_snapshot: vec![i as f64, 1.0],
                })
                .collect(),
            user_seed: 0,
        }
    }

    use Event::*;

    #[test]
    fn last_click_rules() {
        assert_eq!(
            last_click_position(&session(0, &[ClickReview, None, ClickReview, None])),
            Some(3)
        );
        assert_eq!(
            last_click_position(&session(0, &[None, None])),
            Option::None
        );
        let mut evs = [None; 8];
        evs[1] = Booked;
        evs[6] = ClickReview;
        assert_eq!(last_click_position(&session(0, &evs)), Some(7));
    }

    #[test]
    fn labels() {
        let mut s = session(0, &[Booked, ClickBooking, ClickReview, None]);
        let labels: Vec<u8> = s.impressions.iter().map(assign_label).collect();
        assert_eq!(labels, vec![5, 2, 1, 0]);
        s.impressions.clear();
    }

    #[test]
    fn truncate_keeps_up_to_last_click() {
        let log = vec![session(1, &[None, None, ClickReview, None, None])];
        let ds = prepare_training(&log, &SamplingMode::Truncate, 1).unwrap();
        let positions: Vec<u32> = ds.examples.iter().map(|e| e.position).collect();
        assert_eq!(positions, vec![1, 2, 3]);
    }

    #[test]
    fn no_click_sessions_are_dropped() {
        let log = vec![session(1, &[None, None]), session(2, &[ClickReview, None])];
        let ds = prepare_training(&log, &SamplingMode::Control, 1).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.examples.iter().all(|e| e.session_id == SessionId(2)));
        assert_eq!(ds.feature_dimension, 2);
    }

    #[test]
    fn features_exclude_position() {
        let log = vec![session(1, &[ClickReview, None, None])];
        let ds = prepare_training(&log, &SamplingMode::Control, 1).unwrap();
        for e in &ds.examples {
            assert_eq!(
                e.features,
                log[0].impressions[e.position as usize - 1].features_snapshot
            );
        }
    }

    #[test]
    fn mode_strings_round_trip() {
        for s in ["control", "fixed:0.8", "truncate", "propensity"] {
            let m: ModeSpec = s.parse().unwrap();
            assert_eq!(format!("{m}"), s);
        }
        assert_eq!("fixed:0.8".parse::<ModeSpec>().unwrap().rate(), Some(0.8));
        assert!("fixed:0".parse::<ModeSpec>().is_err());
        assert!("fixed:1.5".parse::<ModeSpec>().is_err());
        assert!("ipw".parse::<ModeSpec>().is_err());
        assert!(matches!(
            ModeSpec::Propensity.with_curve(Option::None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_fixed_rate_is_config_error() {
        let log = vec![session(1, &[ClickReview])];
        assert!(matches!(
            prepare_training(&log, &SamplingMode::Fixed(0.0), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn groups_are_sorted_by_session() {
        let log = vec![session(5, &[ClickReview, None]), session(2, &[ClickReview])];
        let ds = prepare_training(&log, &SamplingMode::Control, 1).unwrap();
        assert_eq!(ds.group_ranges(), vec![(0, 1), (1, 3)]);
        assert_eq!(ds.examples[0].session_id, SessionId(2));
    }
}
