//! Examination-propensity estimation from regular clicks.
//!
//! Under the position-based click model the click rate at rank `k` is the
//! examination probability times the mean relevance of what is shown there.
//! Using historical booking counts as the relevance signal, the examination
//! curve is the click curve divided by the booking-relevance curve,
//! normalized to rank 1 and projected onto non-increasing curves.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::isotonic::pava_non_increasing;
use crate::math::{exp, ln};
use crate::types::{HotelId, PropensityCurve, SessionLog};
use crate::{Error, Result, DEFAULT_PAGE_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveConfig {
    pub page_size: usize,
    /// Additive smoothing on the click curve.
    pub alpha: f64,
    /// Impressions a position needs before its ratio is trusted.
    pub min_support: u64,
    /// Floor on estimated propensities.
    pub epsilon: f64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            page_size: DEFAULT_PAGE_SIZE,
            alpha: 0.5,
            min_support: 100,
            epsilon: 1e-3,
        }
    }
}

/// Per-position ratio `(numerator + alpha) / (denominator + 2 alpha)`,
/// defined only where the denominator reaches `min_support`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionCurve {
    pub numerator: Vec<f64>,
    pub denominator: Vec<u64>,
    pub alpha: f64,
    pub min_support: u64,
}

impl PositionCurve {
    pub fn new(numerator: Vec<f64>, denominator: Vec<u64>, alpha: f64, min_support: u64) -> Self {
        assert_eq!(numerator.len(), denominator.len());
        Self {
            numerator,
            denominator,
            alpha,
            min_support,
        }
    }

    pub fn len(&self) -> usize {
        self.numerator.len()
    }

    pub fn is_empty(&self) -> bool {
        self.numerator.is_empty()
    }

    /// Value at 1-based `position`, `None` when unsupported.
    pub fn value(&self, position: usize) -> Option<f64> {
        let i = position.checked_sub(1)?;
        let n = *self.denominator.get(i)?;
        if n == 0 || n < self.min_support {
            return None;
        }
        Some((self.numerator[i] + self.alpha) / (n as f64 + 2.0 * self.alpha))
    }

    pub fn values(&self) -> Vec<Option<f64>> {
        (1..=self.len()).map(|k| self.value(k)).collect()
    }
}

/// Counts needed for both curves. Merging is exact (integer counts only),
/// so partial aggregation in any grouping gives the sequential result.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionStats {
    shown: Vec<u64>,
    clicks: Vec<u64>,
    hotel_counts: Vec<BTreeMap<HotelId, u64>>,
    sessions: u64,
}

impl PositionStats {
    pub fn new(page_size: usize) -> Self {
        Self {
            shown: vec![0; page_size],
            clicks: vec![0; page_size],
            hotel_counts: vec![BTreeMap::new(); page_size],
            sessions: 0,
        }
    }

    /// Impressions beyond `page_size` are ignored.
    pub fn add(&mut self, session: &SessionLog) {
        self.sessions += 1;
        for imp in &session.impressions {
            let Some(i) = (imp.position as usize).checked_sub(1) else {
                continue;
            };
            if i >= self.shown.len() {
                continue;
            }
            self.shown[i] += 1;
            self.clicks[i] += u64::from(imp.event.is_click());
            *self.hotel_counts[i].entry(imp.hotel_id).or_insert(0) += 1;
        }
    }

    pub fn merge(&mut self, other: &PositionStats) {
        assert_eq!(self.shown.len(), other.shown.len());
        self.sessions += other.sessions;
        for i in 0..self.shown.len() {
            self.shown[i] += other.shown[i];
            self.clicks[i] += other.clicks[i];
            for (h, c) in &other.hotel_counts[i] {
                *self.hotel_counts[i].entry(*h).or_insert(0) += c;
            }
        }
    }

    pub fn sessions(&self) -> u64 {
        self.sessions
    }

    pub fn click_curve(&self, cfg: &CurveConfig) -> Result<PositionCurve> {
        if self.sessions == 0 {
            return Err(Error::Estimation("click log is empty".into()));
        }
        Ok(PositionCurve::new(
            self.clicks.iter().map(|&c| c as f64).collect(),
            self.shown.clone(),
            cfg.alpha,
            cfg.min_support,
        ))
    }

    pub fn relevance_curve(
        &self,
        bookings: &BTreeMap<HotelId, f64>,
        cfg: &CurveConfig,
    ) -> Result<PositionCurve> {
        if self.sessions == 0 {
            return Err(Error::Estimation("click log is empty".into()));
        }
        let mean = mean_bookings(bookings)?;
        let mut numerator = Vec::with_capacity(self.shown.len());
        for counts in &self.hotel_counts {
            let mut sum = 0.0;
            for (h, &c) in counts {
                let b = bookings
                    .get(h)
                    .ok_or_else(|| Error::Data(format!("no booking count for hotel {h}")))?;
                sum += c as f64 * (b / mean);
            }
            numerator.push(sum);
        }
        Ok(PositionCurve::new(
            numerator,
            self.shown.clone(),
            0.0,
            cfg.min_support,
        ))
    }
}

fn mean_bookings(bookings: &BTreeMap<HotelId, f64>) -> Result<f64> {
    if bookings.is_empty() {
        return Err(Error::Data("booking map is empty".into()));
    }
    if let Some((h, b)) = bookings
        .iter()
        .find(|(_, b)| !(**b >= 0.0 && b.is_finite()))
    {
        return Err(Error::Data(format!(
            "invalid booking count {b} for hotel {h}"
        )));
    }
    let mean = bookings.values().sum::<f64>() / bookings.len() as f64;
    if mean <= 0.0 {
        return Err(Error::Data("mean booking count is zero".into()));
    }
    Ok(mean)
}

fn stats<'a, I>(log: I, cfg: &CurveConfig) -> PositionStats
where
    I: IntoIterator<Item = &'a SessionLog>,
{
    let mut s = PositionStats::new(cfg.page_size);
    for session in log {
        s.add(session);
    }
    s
}

/// Empirical click-through rate by position (any event counts as a click).
pub fn click_curve<'a, I>(log: I, cfg: &CurveConfig) -> Result<PositionCurve>
where
    I: IntoIterator<Item = &'a SessionLog>,
{
    stats(log, cfg).click_curve(cfg)
}

/// Mean normalized historical booking count of the hotels shown at each
/// position. Each count is divided by the mean over `bookings`.
pub fn booking_relevance_curve<'a, I>(
    log: I,
    bookings: &BTreeMap<HotelId, f64>,
    cfg: &CurveConfig,
) -> Result<PositionCurve>
where
    I: IntoIterator<Item = &'a SessionLog>,
{
    stats(log, cfg).relevance_curve(bookings, cfg)
}

/// Estimated curve plus the intermediate columns used for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityEstimate {
    pub click_rate: Vec<Option<f64>>,
    pub relevance: Vec<Option<f64>>,
    /// Click rate over relevance, gaps filled by log-linear interpolation.
    pub raw: Vec<f64>,
    /// Which entries of `raw` were measured rather than filled.
    pub supported: Vec<bool>,
    pub curve: PropensityCurve,
}

/// Divides the click curve by the relevance curve, normalizes to position
/// 1, projects onto non-increasing curves and floors at `epsilon`.
pub fn estimate_propensity(
    click: &PositionCurve,
    relevance: &PositionCurve,
    cfg: &CurveConfig,
) -> Result<PropensityEstimate> {
    let n = cfg.page_size;
    if click.len() < n || relevance.len() < n {
        return Err(Error::Estimation(format!(
            "curves cover {} and {} positions, need {n}",
            click.len(),
            relevance.len()
        )));
    }
    let click_rate: Vec<Option<f64>> = (1..=n).map(|k| click.value(k)).collect();
    let rel: Vec<Option<f64>> = (1..=n).map(|k| relevance.value(k)).collect();
    let measured: Vec<Option<f64>> = click_rate
        .iter()
        .zip(&rel)
        .map(|(c, r)| match (c, r) {
            (Some(c), Some(r)) if *r > 0.0 && *c > 0.0 => Some(c / r),
            _ => None,
        })
        .collect();
    match measured[0] {
        Some(r1) if r1 > 0.0 => {}
        _ => {
            return Err(Error::Estimation(
                "propensity at position 1 is not positive or lacks support".into(),
            ))
        }
    }
    let raw = fill_log_linear(&measured);
    let r1 = raw[0];
    let normalized: Vec<f64> = raw.iter().map(|r| r / r1).collect();
    let values: Vec<f64> = pava_non_increasing(&normalized)
        .into_iter()
        .map(|v| v.clamp(cfg.epsilon, 1.0))
        .collect();
    let curve = PropensityCurve::new(values)?;
    Ok(PropensityEstimate {
        click_rate,
        relevance: rel,
        supported: measured.iter().map(Option::is_some).collect(),
        raw,
        curve,
    })
}

/// Fills gaps by linear interpolation of `ln(value)` between supported
/// neighbours; past the last supported point the last slope is continued.
/// `values[0]` must be present.
fn fill_log_linear(values: &[Option<f64>]) -> Vec<f64> {
    let known: Vec<(usize, f64)> = values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i, ln(v))))
        .collect();
    let tail_slope = match known.as_slice() {
        [.., (i0, y0), (i1, y1)] => (y1 - y0) / (i1 - i0) as f64,
        _ => 0.0,
    };
    let mut out = Vec::with_capacity(values.len());
    let mut next = 0;
    for i in 0..values.len() {
        while next < known.len() && known[next].0 < i {
            next += 1;
        }
        let y = if next < known.len() && known[next].0 == i {
            known[next].1
        } else if next < known.len() {
            let (i0, y0) = known[next - 1];
            let (i1, y1) = known[next];
            y0 + (y1 - y0) * (i - i0) as f64 / (i1 - i0) as f64
        } else {
            let (il, yl) = known[known.len() - 1];
            yl + tail_slope * (i - il) as f64
        };
        out.push(exp(y));
    }
    // measured entries pass through unchanged
    for (o, v) in out.iter_mut().zip(values) {
        if let Some(v) = v {
            *o = *v;
        }
    }
    out
}

/// Examination probability of position `k` given the deepest click at
/// `last_click`.
pub fn conditional_propensity(curve: &PropensityCurve, k: usize, last_click: usize) -> f64 {
    curve.conditional(k, last_click)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Event, GeoId, Impression, SessionId};

    fn curve(num: Vec<f64>, den: Vec<u64>) -> PositionCurve {
        PositionCurve::new(num, den, 0.0, 1)
    }

    fn cfg(n: usize) -> CurveConfig {
        CurveConfig {
            page_size: n,
            ..CurveConfig::default()
        }
    }

    fn session(hotels_and_events: &[(u64, Event)]) -> SessionLog {
        SessionLog {
            session_id: SessionId(0),
            query_geo: GeoId(0),
            impressions: hotels_and_events
                .iter()
                .enumerate()
                .map(|(i, &(h, e))| Impression {
                    hotel_id: HotelId(h),
                    position: i as u32 + 1,
                    event: e,
                    features_snapshot: vec![],
                })
                .collect(),
            user_seed: 0,
        }
    }

    #[test]
    fn click_curve_direct_ratio() {
        let mut log = Vec::new();
        for i in 0..100 {
            let e = if i < 30 {
                Event::ClickReview
            } else {
                Event::None
            };
            log.push(session(&[(1, e)]));
        }
        let c = click_curve(
            &log,
            &CurveConfig {
                page_size: 1,
                alpha: 0.0,
                ..CurveConfig::default()
            },
        )
        .unwrap();
        assert_eq!(c.value(1), Some(0.30));
    }

    #[test]
    fn unsupported_position_is_undefined() {
        let log = vec![session(&[(1, Event::None)])];
        let c = click_curve(
            &log,
            &CurveConfig {
                page_size: 30,
                alpha: 1.0,
                min_support: 0,
                ..CurveConfig::default()
            },
        )
        .unwrap();
        assert_eq!(c.denominator[29], 0);
        assert_eq!(c.value(30), None);
        assert_eq!(c.value(1), Some(1.0 / 3.0));
    }

    #[test]
    fn empty_log_is_an_error() {
        let log: Vec<SessionLog> = vec![];
        assert!(matches!(
            click_curve(&log, &cfg(3)),
            Err(Error::Estimation(_))
        ));
    }

    #[test]
    fn equal_bookings_give_unit_relevance() {
        let log = vec![session(&[(1, Event::None), (2, Event::None)]); 3];
        let bookings: BTreeMap<HotelId, f64> =
            [(HotelId(1), 7.0), (HotelId(2), 7.0)].into_iter().collect();
        let r = booking_relevance_curve(
            &log,
            &bookings,
            &CurveConfig {
                page_size: 2,
                min_support: 1,
                ..CurveConfig::default()
            },
        )
        .unwrap();
        assert_eq!(r.value(1), Some(1.0));
        assert_eq!(r.value(2), Some(1.0));
    }

    #[test]
    fn single_impression_of_double_mean_hotel() {
        // hotel 9 at position 5 with twice the mean count
        let log = vec![session(&[
            (1, Event::None),
            (2, Event::None),
            (3, Event::None),
            (4, Event::None),
            (9, Event::None),
        ])];
        let bookings: BTreeMap<HotelId, f64> = [
            (HotelId(1), 1.0),
            (HotelId(2), 1.0),
            (HotelId(3), 1.0),
            (HotelId(4), 1.0),
            (HotelId(9), 4.0),
            (HotelId(10), 4.0),
        ]
        .into_iter()
        .collect();
        let r = booking_relevance_curve(
            &log,
            &bookings,
            &CurveConfig {
                page_size: 5,
                min_support: 1,
                ..CurveConfig::default()
            },
        )
        .unwrap();
        assert_eq!(r.value(5), Some(2.0));
    }

    #[test]
    fn missing_booking_count_names_hotel() {
        let log = vec![session(&[(1, Event::None), (77, Event::None)])];
        let bookings: BTreeMap<HotelId, f64> = [(HotelId(1), 1.0)].into_iter().collect();
        match booking_relevance_curve(&log, &bookings, &cfg(2)) {
            Err(Error::Data(msg)) => assert!(msg.contains("77"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn inverse_rank_clicks_over_flat_relevance() {
        let n = 10;
        let click = curve((1..=n).map(|k| 1.0 / k as f64).collect(), vec![1; n]);
        let rel = curve(vec![1.0; n], vec![1; n]);
        let est = estimate_propensity(&click, &rel, &cfg(n)).unwrap();
        for k in 1..=n {
            assert_eq!(est.curve.at(k), 1.0 / k as f64);
        }
    }

    #[test]
    fn propensity_is_flatter_than_click_curve_when_relevance_decreases() {
        let n = 8;
        let click = curve((1..=n).map(|k| 0.3 / k as f64).collect(), vec![1; n]);
        let rel = curve((1..=n).map(|k| 1.5 - 0.1 * k as f64).collect(), vec![1; n]);
        let est = estimate_propensity(&click, &rel, &cfg(n)).unwrap();
        let c1 = click.value(1).unwrap();
        for k in 1..=n {
            assert!(est.curve.at(k) >= click.value(k).unwrap() / c1 - 1e-15);
        }
    }

    #[test]
    fn non_positive_first_position_is_an_error() {
        let click = curve(vec![0.0, 0.1], vec![1, 1]);
        let rel = curve(vec![1.0, 1.0], vec![1, 1]);
        assert!(matches!(
            estimate_propensity(&click, &rel, &cfg(2)),
            Err(Error::Estimation(_))
        ));
    }

    #[test]
    fn gaps_are_filled_log_linearly() {
        let n = 6;
        // supported at 1, 3 and 4 only
        let click = PositionCurve::new(
            vec![8.0, 0.0, 2.0, 1.0, 0.0, 0.0],
            vec![10, 0, 10, 10, 0, 0],
            0.0,
            1,
        );
        let rel = curve(vec![10.0; n], vec![10; n]);
        let est = estimate_propensity(&click, &rel, &cfg(n)).unwrap();
        let expect = [0.8, 0.4, 0.2, 0.1, 0.05, 0.025];
        for (r, e) in est.raw.iter().zip(expect) {
            assert!((r - e).abs() < 1e-12, "{:?}", est.raw);
        }
        assert_eq!(est.supported, vec![true, false, true, true, false, false]);
    }

    #[test]
    fn increasing_tail_is_projected_and_floored() {
        let click = curve(vec![1.0, 0.5, 0.6, 0.00001], vec![1; 4]);
        let rel = curve(vec![1.0; 4], vec![1; 4]);
        let est = estimate_propensity(&click, &rel, &cfg(4)).unwrap();
        let v = est.curve.values();
        assert_eq!(v[0], 1.0);
        assert!((v[1] - 0.55).abs() < 1e-12 && (v[2] - 0.55).abs() < 1e-12);
        assert_eq!(v[3], 1e-3);
    }

    #[test]
    fn merge_equals_sequential() {
        let mut all = PositionStats::new(3);
        let mut a = PositionStats::new(3);
        let mut b = PositionStats::new(3);
        for i in 0..20u64 {
            let s = session(&[
                (
                    i % 5,
                    if i % 3 == 0 {
                        Event::Booked
                    } else {
                        Event::None
                    },
                ),
                (5 + i % 4, Event::None),
                (9 + i % 2, Event::ClickReview),
            ]);
            all.add(&s);
            if i % 2 == 0 {
                a.add(&s)
            } else {
                b.add(&s)
            }
        }
        a.merge(&b);
        assert_eq!(a, all);
    }
}
