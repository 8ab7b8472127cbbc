//! Offline evaluation, two-stage ranking and the paired simulated A/B test.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::debias::assign_label;
use crate::embed::{EmbeddingTable, SimilarityFeature};
use crate::ranker::{ndcg_at_k, RankerModel};
use crate::rng;
use crate::simclick::{
    session_draw, simulate_session, sort_desc_by_score, HotelUniverse, UserModelConfig,
};
use crate::types::{GeoId, Hotel, HotelId, Impression, SessionLog};
use crate::{Error, Result};

/// Graded ground-truth relevance of a hotel: quality bucketed into 0..=4.
pub fn ground_truth_grade(latent_quality: f64) -> u8 {
    ((latent_quality * 5.0) as u8).min(4)
}

/// Anything that scores a hotel from its feature vector.
pub trait Scorer: Sync {
    fn feature_dimension(&self) -> usize;
    fn score(&self, hotel: HotelId, features: &[f64]) -> f64;
}

impl Scorer for RankerModel {
    fn feature_dimension(&self) -> usize {
        self.feature_dimension
    }
    fn score(&self, _hotel: HotelId, features: &[f64]) -> f64 {
        self.predict_unchecked(features)
    }
}

/// Least-squares weights from hotel features to historical bookings (with
/// an intercept that is dropped, as it does not change any ranking).
pub fn fit_stage1(universe: &HotelUniverse) -> Result<Vec<f64>> {
    let d = universe.feature_dimension;
    let p = d + 1;
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    let mut row = vec![0.0; p];
    for h in &universe.hotels {
        row[0] = 1.0;
        row[1..].copy_from_slice(&h.features);
        for i in 0..p {
            xty[i] += row[i] * h.historical_bookings;
            for j in 0..p {
                xtx[i * p + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..p {
        xtx[i * p + i] += 1e-9;
    }
    let beta = solve(xtx, xty, p)
        .ok_or_else(|| Error::Estimation("stage-1 normal equations are singular".into()))?;
    Ok(beta[1..].to_vec())
}

/// Gaussian elimination with partial pivoting on a dense `n x n` system.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let pivot =
            (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = b[r];
        for k in r + 1..n {
            s -= a[r * n + k] * x[k];
        }
        x[r] = s / a[r * n + r];
    }
    Some(x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Candidate generation by a linear model, then re-ranking by `stage2`.
///
/// Stage 1 keeps the `m` best hotels by `stage1_weights . features` (ties
/// by hotel id); stage 2 orders them and the top `page_size` are returned.
pub fn two_stage_rank<S: Scorer + ?Sized>(
    stage1_weights: &[f64],
    stage2: &S,
    inventory: &[Hotel],
    m: usize,
    page_size: usize,
) -> Result<Vec<HotelId>> {
    two_stage_rank_with(stage1_weights, inventory, m, page_size, |h| {
        stage2.score(h.hotel_id, &h.features)
    })
}

fn two_stage_rank_with<F: FnMut(&Hotel) -> f64>(
    stage1_weights: &[f64],
    inventory: &[Hotel],
    m: usize,
    page_size: usize,
    mut stage2: F,
) -> Result<Vec<HotelId>> {
    if m < page_size {
        return Err(Error::Config(format!(
            "candidate count {m} is below the page size {page_size}"
        )));
    }
    if inventory.len() < m {
        return Err(Error::Config(format!(
            "inventory has {} hotels, fewer than {m} candidates",
            inventory.len()
        )));
    }
    let mut by_id: BTreeMap<HotelId, &Hotel> = BTreeMap::new();
    let mut stage1: Vec<(f64, HotelId)> = Vec::with_capacity(inventory.len());
    for h in inventory {
        if h.features.len() != stage1_weights.len() {
            return Err(Error::Usage(format!(
                "stage-1 weights have dimension {}, hotel {} has {}",
                stage1_weights.len(),
                h.hotel_id,
                h.features.len()
            )));
        }
        stage1.push((dot(stage1_weights, &h.features), h.hotel_id));
        by_id.insert(h.hotel_id, h);
    }
    sort_desc_by_score(&mut stage1);
    let mut stage2_scored: Vec<(f64, HotelId)> = stage1
        .iter()
        .take(m)
        .map(|&(_, id)| (stage2(by_id[&id]), id))
        .collect();
    sort_desc_by_score(&mut stage2_scored);
    Ok(stage2_scored
        .into_iter()
        .take(page_size)
        .map(|(_, id)| id)
        .collect())
}

/// NDCG at 5, 10 and 30.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NdcgAt {
    #[serde(rename = "ndcg@5")]
    pub at5: f64,
    #[serde(rename = "ndcg@10")]
    pub at10: f64,
    #[serde(rename = "ndcg@30")]
    pub at30: f64,
}

impl NdcgAt {
    fn of(labels: &[u8], scores: &[f64]) -> Result<Self> {
        Ok(Self {
            at5: ndcg_at_k(labels, scores, 5)?,
            at10: ndcg_at_k(labels, scores, 10)?,
            at30: ndcg_at_k(labels, scores, 30)?,
        })
    }

    fn add(&mut self, o: &NdcgAt) {
        self.at5 += o.at5;
        self.at10 += o.at10;
        self.at30 += o.at30;
    }

    fn scale(&mut self, s: f64) {
        self.at5 *= s;
        self.at10 *= s;
        self.at30 *= s;
    }
}

/// Held-out evaluation of a scorer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub sessions: usize,
    pub clicked_sessions: usize,
    /// Against the recorded labels, over sessions with at least one click.
    pub label_ndcg: NdcgAt,
    /// Against ground-truth quality grades, over all sessions.
    pub ground_truth_ndcg: NdcgAt,
}

/// Re-scores every held-out impression list with `score` and averages NDCG.
pub fn evaluate_with<F>(
    heldout: &[SessionLog],
    universe: &HotelUniverse,
    score: F,
) -> Result<EvalMetrics>
where
    F: Fn(&SessionLog, &Impression) -> f64,
{
    let mut m = EvalMetrics::default();
    for s in heldout {
        if s.impressions.is_empty() {
            continue;
        }
        let scores: Vec<f64> = s.impressions.iter().map(|i| score(s, i)).collect();
        let mut grades = Vec::with_capacity(scores.len());
        for i in &s.impressions {
            let h = universe
                .hotel(i.hotel_id)
                .ok_or_else(|| Error::Lookup(format!("unknown hotel {}", i.hotel_id)))?;
            grades.push(ground_truth_grade(h.latent_quality));
        }
        m.sessions += 1;
        m.ground_truth_ndcg.add(&NdcgAt::of(&grades, &scores)?);
        if s.has_click() {
            let labels: Vec<u8> = s.impressions.iter().map(assign_label).collect();
            m.clicked_sessions += 1;
            m.label_ndcg.add(&NdcgAt::of(&labels, &scores)?);
        }
    }
    if m.sessions > 0 {
        m.ground_truth_ndcg.scale(1.0 / m.sessions as f64);
    }
    if m.clicked_sessions > 0 {
        m.label_ndcg.scale(1.0 / m.clicked_sessions as f64);
    }
    Ok(m)
}

/// Evaluates `model` on the impression feature snapshots of `heldout`.
pub fn evaluate_model(
    model: &RankerModel,
    heldout: &[SessionLog],
    universe: &HotelUniverse,
) -> Result<EvalMetrics> {
    for s in heldout {
        if let Some(i) = s
            .impressions
            .iter()
            .find(|i| i.features_snapshot.len() != model.feature_dimension)
        {
            return Err(Error::Usage(format!(
                "session {} has {} features, model expects {}",
                s.session_id,
                i.features_snapshot.len(),
                model.feature_dimension
            )));
        }
    }
    evaluate_with(heldout, universe, |_, i| {
        model.predict_unchecked(&i.features_snapshot)
    })
}

/// The logged order itself, scored the same way.
pub fn evaluate_logging_policy(
    heldout: &[SessionLog],
    universe: &HotelUniverse,
) -> Result<EvalMetrics> {
    evaluate_with(heldout, universe, |_, i| -f64::from(i.position))
}

/// Mean over geos of the ground-truth NDCG@30 of the page `scorer` shows
/// after stage 1 keeps `candidates` hotels. Unlike [`evaluate_model`] this
/// judges the page against the whole geo inventory, so hotels the logging
/// policy never showed count too.
pub fn inventory_ndcg<S: Scorer + ?Sized>(
    scorer: &S,
    universe: &HotelUniverse,
    candidates: usize,
) -> Result<f64> {
    if scorer.feature_dimension() != universe.feature_dimension {
        return Err(Error::Usage(format!(
            "scorer expects {} features, universe provides {}",
            scorer.feature_dimension(),
            universe.feature_dimension
        )));
    }
    let stage1 = fit_stage1(universe)?;
    let geos = universe.geos();
    let mut total = 0.0;
    for g in &geos {
        let inventory = universe
            .geo_hotels(*g)
            .ok_or_else(|| Error::Lookup(format!("unknown geo {g}")))?;
        let page = two_stage_rank(&stage1, scorer, inventory, candidates, universe.page_size)?;
        total += page_ndcg(universe, &page, inventory);
    }
    Ok(total / geos.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbConfig {
    pub num_sessions: usize,
    pub seed: u64,
    /// Stage-1 candidate count.
    pub candidates: usize,
    pub bootstrap_reps: usize,
    pub confidence: f64,
}

impl Default for AbConfig {
    fn default() -> Self {
        Self {
            num_sessions: 20_000,
            seed: 0,
            candidates: 60,
            bootstrap_reps: 1000,
            confidence: 0.95,
        }
    }
}

/// Relative lift over control with a percentile bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Lift {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Lift {
    pub fn excludes_zero(&self) -> bool {
        self.ci_low > 0.0 || self.ci_high < 0.0
    }

    pub fn contains_zero(&self) -> bool {
        !self.excludes_zero()
    }

    pub fn width(&self) -> f64 {
        self.ci_high - self.ci_low
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub clicks: u64,
    pub bookings: u64,
    /// Mean NDCG@30 of the shown page against quality grades of the whole
    /// geo inventory.
    pub mean_ground_truth_ndcg: f64,
    pub click_lift: Lift,
    pub booking_lift: Lift,
    pub ndcg_lift: Lift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbReport {
    pub arms: Vec<ArmReport>,
    pub confidence: f64,
    pub config: AbConfig,
    pub user: UserModelConfig,
    pub universe_seed: u64,
    pub personalized: bool,
}

impl AbReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }
}

/// Ground-truth NDCG@30 of a page chosen from `inventory`.
fn page_ndcg(universe: &HotelUniverse, page: &[HotelId], inventory: &[Hotel]) -> f64 {
    let mut labels: Vec<u8> = Vec::with_capacity(inventory.len());
    for id in page {
        labels.push(ground_truth_grade(
            universe.hotel(*id).map_or(0.0, |h| h.latent_quality),
        ));
    }
    for h in inventory {
        if !page.contains(&h.hotel_id) {
            labels.push(ground_truth_grade(h.latent_quality));
        }
    }
    let scores: Vec<f64> = (0..labels.len()).map(|i| -(i as f64)).collect();
    ndcg_at_k(&labels, &scores, 30).unwrap_or(0.0)
}

struct Tally {
    clicks: Vec<Vec<f64>>,
    bookings: Vec<Vec<f64>>,
    ndcg: Vec<Vec<f64>>,
}

/// Paired three-way (or n-way) simulated experiment.
///
/// Each session draws a geo and a user seed from `config.seed`; every arm
/// ranks that geo with [`two_stage_rank`] (shared stage 1) and the same user
/// seed drives the click model over each arm's page. Lifts are relative to
/// the `control` arm with paired bootstrap intervals over sessions.
pub fn simulated_abtest(
    arms: &[(String, &dyn Scorer)],
    universe: &HotelUniverse,
    user: &UserModelConfig,
    config: &AbConfig,
    personalization: Option<&EmbeddingTable>,
) -> Result<AbReport> {
    let control = arms
        .iter()
        .position(|(name, _)| name == "control")
        .ok_or_else(|| Error::Config("A/B arms must include 'control'".into()))?;
    if config.num_sessions < 1 {
        return Err(Error::Config("num_sessions must be >= 1".into()));
    }
    if !(config.confidence > 0.0 && config.confidence < 1.0) || config.bootstrap_reps < 1 {
        return Err(Error::Config(
            "confidence must be in (0, 1) and bootstrap_reps >= 1".into(),
        ));
    }
    let extra = usize::from(personalization.is_some());
    for (name, model) in arms {
        if model.feature_dimension() != universe.feature_dimension + extra {
            return Err(Error::Usage(format!(
                "arm '{name}' expects {} features, universe provides {}",
                model.feature_dimension(),
                universe.feature_dimension + extra
            )));
        }
    }
    let stage1 = fit_stage1(universe)?;
    let geos = universe.geos();
    let similarity = personalization.map(SimilarityFeature::new);
    let n = config.num_sessions;
    let mut tally = Tally {
        clicks: vec![vec![0.0; n]; arms.len()],
        bookings: vec![vec![0.0; n]; arms.len()],
        ndcg: vec![vec![0.0; n]; arms.len()],
    };
    // (arm, geo) -> (page, ndcg); fixed unless personalization is on
    let mut fixed_pages: BTreeMap<(usize, GeoId), (Vec<HotelId>, f64)> = BTreeMap::new();
    if similarity.is_none() {
        for (a, (_, model)) in arms.iter().enumerate() {
            for g in &geos {
                let inventory = universe
                    .geo_hotels(*g)
                    .ok_or_else(|| Error::Lookup(format!("unknown geo {g}")))?;
                let page = two_stage_rank(
                    &stage1,
                    *model,
                    inventory,
                    config.candidates,
                    universe.page_size,
                )?;
                let ndcg = page_ndcg(universe, &page, inventory);
                fixed_pages.insert((a, *g), (page, ndcg));
            }
        }
    }
    let mut recent: Vec<BTreeMap<GeoId, Vec<HotelId>>> = vec![BTreeMap::new(); arms.len()];
    let mut scratch = Vec::new();
    for i in 0..n {
        let draw = session_draw(&geos, config.seed, i as u64);
        let inventory = universe
            .geo_hotels(draw.geo)
            .ok_or_else(|| Error::Lookup(format!("unknown geo {}", draw.geo)))?;
        for (a, (_, model)) in arms.iter().enumerate() {
            let personalized;
            let (page, ndcg) = match &similarity {
                None => {
                    let (p, v) = &fixed_pages[&(a, draw.geo)];
                    (p.as_slice(), *v)
                }
                Some(sim) => {
                    let clicks = recent[a].get(&draw.geo).cloned().unwrap_or_default();
                    personalized = two_stage_rank_with(
                        &stage1,
                        inventory,
                        config.candidates,
                        universe.page_size,
                        |h| {
                            scratch.clear();
                            scratch.extend_from_slice(&h.features);
                            scratch.push(sim.score(&clicks, h.hotel_id));
                            model.score(h.hotel_id, &scratch)
                        },
                    )?;
                    let ndcg = page_ndcg(universe, &personalized, inventory);
                    (personalized.as_slice(), ndcg)
                }
            };
            let s = simulate_session(universe, page, user, draw.session_id, draw.user_seed)?;
            if similarity.is_some() {
                let clicked: Vec<HotelId> = s
                    .log
                    .impressions
                    .iter()
                    .filter(|imp| imp.event.is_click())
                    .map(|imp| imp.hotel_id)
                    .collect();
                if !clicked.is_empty() {
                    recent[a].insert(draw.geo, clicked);
                }
            }
            tally.clicks[a][i] = s.log.clicks() as f64;
            tally.bookings[a][i] = s.log.bookings() as f64;
            tally.ndcg[a][i] = ndcg;
        }
    }

    let click_lifts = bootstrap_lifts(&tally.clicks, control, config, "clicks");
    let booking_lifts = bootstrap_lifts(&tally.bookings, control, config, "bookings");
    let ndcg_lifts = bootstrap_lifts(&tally.ndcg, control, config, "ndcg");
    let arms_out = arms
        .iter()
        .enumerate()
        .map(|(a, (name, _))| ArmReport {
            name: name.clone(),
            clicks: tally.clicks[a].iter().sum::<f64>() as u64,
            bookings: tally.bookings[a].iter().sum::<f64>() as u64,
            mean_ground_truth_ndcg: tally.ndcg[a].iter().sum::<f64>() / n as f64,
            click_lift: click_lifts[a],
            booking_lift: booking_lifts[a],
            ndcg_lift: ndcg_lifts[a],
        })
        .collect();
    Ok(AbReport {
        arms: arms_out,
        confidence: config.confidence,
        config: config.clone(),
        user: user.clone(),
        universe_seed: universe.seed,
        personalized: personalization.is_some(),
    })
}

fn relative(arm: f64, control: f64) -> f64 {
    if control == 0.0 {
        if arm == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        arm / control - 1.0
    }
}

/// Relative lift of each arm's total over the control total, with a paired
/// percentile bootstrap over sessions.
pub fn bootstrap_lifts(
    per_session: &[Vec<f64>],
    control: usize,
    config: &AbConfig,
    metric: &str,
) -> Vec<Lift> {
    let arms = per_session.len();
    let n = per_session[control].len();
    let totals: Vec<f64> = per_session.iter().map(|v| v.iter().sum()).collect();
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(config.bootstrap_reps); arms];
    let mut sums = vec![0.0; arms];
    for rep in 0..config.bootstrap_reps {
        let mut r = rng::stream(
            config.seed,
            "abtest.bootstrap",
            &[rep as u64, metric.len() as u64],
        );
        sums.iter_mut().for_each(|s| *s = 0.0);
        for _ in 0..n {
            let j = r.random_range(0..n);
            for (a, s) in sums.iter_mut().enumerate() {
                *s += per_session[a][j];
            }
        }
        for a in 0..arms {
            samples[a].push(relative(sums[a], sums[control]));
        }
    }
    let alpha = (1.0 - config.confidence) / 2.0;
    samples
        .into_iter()
        .enumerate()
        .map(|(a, mut s)| {
            s.sort_by(f64::total_cmp);
            Lift {
                point: relative(totals[a], totals[control]),
                ci_low: quantile(&s, alpha),
                ci_high: quantile(&s, 1.0 - alpha),
            }
        })
        .collect()
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grades_cover_zero_to_four() {
        assert_eq!(ground_truth_grade(0.01), 0);
        assert_eq!(ground_truth_grade(0.5), 2);
        assert_eq!(ground_truth_grade(0.99), 4);
    }

    #[test]
    fn solve_small_system() {
        let x = solve(vec![2.0, 1.0, 1.0, 3.0], vec![3.0, 5.0], 2).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
        assert!(solve(vec![0.0; 4], vec![1.0, 1.0], 2).is_none());
    }

    #[test]
    fn quantiles() {
        let s = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.0), 0.0);
        assert_eq!(quantile(&s, 0.5), 2.0);
        assert_eq!(quantile(&s, 0.625), 2.5);
        assert_eq!(quantile(&s, 1.0), 4.0);
    }

    #[test]
    fn control_lift_is_zero() {
        let data = vec![vec![1.0, 0.0, 2.0, 1.0], vec![2.0, 1.0, 2.0, 1.0]];
        let cfg = AbConfig {
            bootstrap_reps: 50,
            ..AbConfig::default()
        };
        let lifts = bootstrap_lifts(&data, 0, &cfg, "x");
        assert_eq!(lifts[0], Lift::default());
        assert!((lifts[1].point - 0.5).abs() < 1e-15);
        assert!(lifts[1].ci_low <= lifts[1].point && lifts[1].point <= lifts[1].ci_high);
    }
}
