use std::collections::BTreeMap;

use posbias_core::evalab::{
    evaluate_logging_policy, evaluate_model, evaluate_with, fit_stage1, ground_truth_grade,
    inventory_ndcg, simulated_abtest, two_stage_rank, AbConfig, Scorer,
};
use posbias_core::ranker::{ndcg_at_k, ModelMetadata, RankerModel, RankerParams, Tree};
use posbias_core::simclick::{
    gen_universe, simulate_log, HotelUniverse, UniverseConfig, UserModelConfig,
};
use posbias_core::{Error, Hotel, HotelId, SessionLog};

fn universe(seed: u64) -> HotelUniverse {
    gen_universe(&UniverseConfig::default(), seed).unwrap()
}

/// Scores by true quality.
struct Oracle(BTreeMap<HotelId, f64>, usize);

impl Oracle {
    fn new(u: &HotelUniverse) -> Self {
        Oracle(
            u.hotels
                .iter()
                .map(|h| (h.hotel_id, h.latent_quality))
                .collect(),
            u.feature_dimension,
        )
    }
}

impl Scorer for Oracle {
    fn feature_dimension(&self) -> usize {
        self.1
    }
    fn score(&self, hotel: HotelId, _: &[f64]) -> f64 {
        self.0[&hotel]
    }
}

/// Scores by a hash of the hotel id: an arbitrary fixed order.
struct Scrambled(usize);

impl Scorer for Scrambled {
    fn feature_dimension(&self) -> usize {
        self.0
    }
    fn score(&self, hotel: HotelId, _: &[f64]) -> f64 {
        (hotel.0.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 11) as f64
    }
}

/// Scores by one feature column.
struct Column(usize, usize);

impl Scorer for Column {
    fn feature_dimension(&self) -> usize {
        self.1
    }
    fn score(&self, _: HotelId, x: &[f64]) -> f64 {
        x[self.0]
    }
}

fn stage2_order<S: Scorer>(s: &S, hotels: &[Hotel]) -> Vec<HotelId> {
    let mut v: Vec<(f64, HotelId)> = hotels
        .iter()
        .map(|h| (s.score(h.hotel_id, &h.features), h.hotel_id))
        .collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    v.into_iter().map(|(_, h)| h).collect()
}

/// Ground-truth NDCG@30 of a page against the whole inventory.
fn page_quality(u: &HotelUniverse, page: &[HotelId], inventory: &[Hotel]) -> f64 {
    let gain = |h: &HotelId| {
        ((1u64 << ground_truth_grade(u.hotel(*h).unwrap().latent_quality)) - 1) as f64
    };
    let dcg: f64 = page
        .iter()
        .enumerate()
        .map(|(r, h)| gain(h) / ((r + 2) as f64).log2())
        .sum();
    let mut best: Vec<f64> = inventory.iter().map(|h| gain(&h.hotel_id)).collect();
    best.sort_by(|a, b| b.total_cmp(a));
    let ideal: f64 = best
        .iter()
        .take(30)
        .enumerate()
        .map(|(r, g)| g / ((r + 2) as f64).log2())
        .sum();
    dcg / ideal
}

#[test]
fn full_candidate_set_equals_pure_stage_two() {
    let u = universe(1);
    let w = fit_stage1(&u).unwrap();
    let s = Column(1, u.feature_dimension);
    for g in u.geos() {
        let inv = u.geo_hotels(g).unwrap();
        let page = two_stage_rank(&w, &s, inv, inv.len(), 30).unwrap();
        assert_eq!(page, stage2_order(&s, inv)[..30].to_vec());
    }
}

#[test]
fn zero_stage_one_keeps_lowest_ids() {
    let u = universe(2);
    let inv = u.geo_hotels(u.geos()[3]).unwrap();
    let zero = vec![0.0; u.feature_dimension];
    let s = Column(0, u.feature_dimension);
    let page = two_stage_rank(&zero, &s, inv, 40, 30).unwrap();
    let mut ids: Vec<HotelId> = inv.iter().map(|h| h.hotel_id).collect();
    ids.sort();
    let lowest: Vec<Hotel> = inv
        .iter()
        .filter(|h| ids[..40].contains(&h.hotel_id))
        .cloned()
        .collect();
    assert_eq!(page, stage2_order(&s, &lowest)[..30].to_vec());
}

#[test]
fn candidate_count_below_page_is_config_error() {
    let u = universe(2);
    let inv = u.geo_hotels(u.geos()[0]).unwrap();
    let w = fit_stage1(&u).unwrap();
    assert!(matches!(
        two_stage_rank(&w, &Oracle::new(&u), inv, 29, 30),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        two_stage_rank(&w, &Oracle::new(&u), inv, 101, 30),
        Err(Error::Config(_))
    ));
}

#[test]
fn quality_correlated_stage_one_loses_little() {
    let u = universe(3);
    let w = fit_stage1(&u).unwrap();
    let s = Column(1, u.feature_dimension);
    let (mut two, mut full) = (0.0, 0.0);
    for g in u.geos() {
        let inv = u.geo_hotels(g).unwrap();
        two += page_quality(&u, &two_stage_rank(&w, &s, inv, 60, 30).unwrap(), inv);
        full += page_quality(&u, &stage2_order(&s, inv)[..30], inv);
    }
    assert!((two / full - 1.0).abs() < 0.02, "{two} vs {full}");
    let got = inventory_ndcg(&s, &u, 60).unwrap();
    assert!((got - two / u.geos().len() as f64).abs() < 1e-12);
}

fn heldout(u: &HotelUniverse, n: usize) -> Vec<SessionLog> {
    simulate_log(u, &UserModelConfig::default(), n, 55)
        .unwrap()
        .map(|s| s.unwrap().log)
        .collect()
}

#[test]
fn evaluation_examples() {
    let u = universe(4);
    let log = heldout(&u, 1000);
    let logging = evaluate_logging_policy(&log, &u).unwrap();
    let same = evaluate_with(&log, &u, |_, i| -f64::from(i.position)).unwrap();
    assert_eq!(logging, same);
    let oracle =
        evaluate_with(&log, &u, |_, i| u.hotel(i.hotel_id).unwrap().latent_quality).unwrap();
    assert_eq!(oracle.ground_truth_ndcg.at30, 1.0);
    let scrambled = Scrambled(u.feature_dimension);
    let random = evaluate_with(&log, &u, |_, i| scrambled.score(i.hotel_id, &[])).unwrap();
    assert!(random.ground_truth_ndcg.at30 < logging.ground_truth_ndcg.at30);
    assert_eq!(logging.sessions, 1000);
    assert!(logging.clicked_sessions > 0 && logging.clicked_sessions <= 1000);
    // label NDCG only looks at sessions with a click
    let mut labels_total = 0.0;
    for s in log.iter().filter(|s| s.has_click()) {
        let labels: Vec<u8> = s
            .impressions
            .iter()
            .map(posbias_core::debias::assign_label)
            .collect();
        let scores: Vec<f64> = s
            .impressions
            .iter()
            .map(|i| -f64::from(i.position))
            .collect();
        labels_total += ndcg_at_k(&labels, &scores, 10).unwrap();
    }
    assert!(
        (logging.label_ndcg.at10 - labels_total / logging.clicked_sessions as f64).abs() < 1e-12
    );
}

#[test]
fn model_dimension_mismatch_is_usage_error() {
    let u = universe(4);
    let log = heldout(&u, 10);
    let model = RankerModel {
        trees: vec![Tree::leaf(1.0)],
        learning_rate: 0.1,
        feature_dimension: 3,
        params: RankerParams::default(),
        metadata: ModelMetadata::default(),
    };
    assert!(matches!(
        evaluate_model(&model, &log, &u),
        Err(Error::Usage(_))
    ));
}

fn ab(
    u: &HotelUniverse,
    arms: &[(&str, &dyn Scorer)],
    n: usize,
    seed: u64,
) -> posbias_core::evalab::AbReport {
    let arms: Vec<(String, &dyn Scorer)> = arms.iter().map(|(n, s)| (n.to_string(), *s)).collect();
    simulated_abtest(
        &arms,
        u,
        &UserModelConfig::default(),
        &AbConfig {
            num_sessions: n,
            seed,
            bootstrap_reps: 500,
            ..AbConfig::default()
        },
        None,
    )
    .unwrap()
}

#[test]
fn identical_arms_have_zero_lift() {
    let u = universe(5);
    let s = Column(1, u.feature_dimension);
    let r = ab(&u, &[("control", &s), ("same", &s), ("again", &s)], 2000, 1);
    for a in &r.arms {
        assert_eq!(a.click_lift.point, 0.0);
        assert_eq!(a.click_lift.ci_low, 0.0);
        assert_eq!(a.click_lift.ci_high, 0.0);
        assert_eq!(a.ndcg_lift.point, 0.0);
    }
    assert_eq!(r.arms[0].clicks, r.arms[1].clicks);
}

#[test]
fn quality_beats_scrambled() {
    let u = universe(6);
    let oracle = Oracle::new(&u);
    let scrambled = Scrambled(u.feature_dimension);
    let r = ab(
        &u,
        &[("control", &scrambled), ("quality", &oracle)],
        5000,
        2,
    );
    let q = r.arm("quality").unwrap();
    assert!(
        q.click_lift.point > 0.0 && q.click_lift.ci_low > 0.0,
        "{q:?}"
    );
    assert!(q.mean_ground_truth_ndcg > r.arm("control").unwrap().mean_ground_truth_ndcg);
    assert_eq!(r.arm("control").unwrap().click_lift.point, 0.0);
}

#[test]
fn missing_control_is_config_error() {
    let u = universe(5);
    let s = Column(1, u.feature_dimension);
    let arms: Vec<(String, &dyn Scorer)> = vec![("treatment".into(), &s)];
    assert!(matches!(
        simulated_abtest(
            &arms,
            &u,
            &UserModelConfig::default(),
            &AbConfig::default(),
            None
        ),
        Err(Error::Config(_))
    ));
}

#[test]
fn report_is_deterministic() {
    let u = universe(7);
    let a = Column(1, u.feature_dimension);
    let b = Column(0, u.feature_dimension);
    let r1 = ab(&u, &[("control", &a), ("stars", &b)], 1500, 3);
    let r2 = ab(&u, &[("control", &a), ("stars", &b)], 1500, 3);
    assert_eq!(r1, r2);
}

#[test]
fn interval_width_shrinks_with_root_n() {
    let u = universe(8);
    let a = Column(1, u.feature_dimension);
    let b = Oracle::new(&u);
    let small = ab(&u, &[("control", &a), ("quality", &b)], 10_000, 4);
    let large = ab(&u, &[("control", &a), ("quality", &b)], 40_000, 4);
    let ratio = small.arm("quality").unwrap().click_lift.width()
        / large.arm("quality").unwrap().click_lift.width();
    assert!((ratio / 2.0 - 1.0).abs() <= 0.25, "width ratio {ratio}");
}
