//! Skip-gram hotel embeddings with within-geo negative sampling, and the
//! cosine-similarity personalization feature built on them.
//!
//! Users rarely compare hotels across geographies, so negatives for a
//! center hotel are drawn only from its own geo (unigram^0.75 within the
//! geo, never the positive context hotel itself).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::debias::TrainingDataset;
use crate::math::{powf, sigmoid, softplus, sqrt};
use crate::rng;
use crate::types::{GeoId, HotelId, SessionId, SessionLog};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Single-threaded, reproducible.
    #[default]
    Deterministic,
    /// Lock-free asynchronous updates across threads. Not reproducible.
    /// Falls back to deterministic without the `parallel` feature.
    Fast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives_per_positive: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Floor of the linear decay, as a fraction of `learning_rate`.
    pub min_learning_rate_ratio: f64,
    pub mode: TrainMode,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            window: 5,
            negatives_per_positive: 5,
            epochs: 5,
            learning_rate: 0.025,
            min_learning_rate_ratio: 1e-4,
            mode: TrainMode::Deterministic,
        }
    }
}

impl SkipGramConfig {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.window == 0 || self.epochs == 0 {
            return Err(Error::Config("dim, window and epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: BTreeMap<HotelId, Vec<f64>>,
    pub geo_index: BTreeMap<GeoId, Vec<HotelId>>,
    pub config: SkipGramConfig,
    pub seed: u64,
}

impl EmbeddingTable {
    pub fn get(&self, hotel: HotelId) -> Option<&[f64]> {
        self.vectors.get(&hotel).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Dimensions agree and every hotel sits in exactly one geo.
    pub fn validate(&self) -> Result<()> {
        if let Some((h, v)) = self.vectors.iter().find(|(_, v)| v.len() != self.dim) {
            return Err(Error::Data(format!(
                "hotel {h} has dimension {}, table dimension is {}",
                v.len(),
                self.dim
            )));
        }
        let mut seen: BTreeMap<HotelId, GeoId> = BTreeMap::new();
        for (g, members) in &self.geo_index {
            for h in members {
                if let Some(other) = seen.insert(*h, *g) {
                    return Err(Error::Data(format!("hotel {h} is in geos {other} and {g}")));
                }
            }
        }
        if let Some(h) = self.vectors.keys().find(|h| !seen.contains_key(h)) {
            return Err(Error::Data(format!("hotel {h} has no geo")));
        }
        Ok(())
    }
}

/// Per-session clicked hotels in position order; sequences shorter than two
/// are dropped.
pub fn build_sequences<'a, I>(log: I) -> Vec<Vec<HotelId>>
where
    I: IntoIterator<Item = &'a SessionLog>,
{
    log.into_iter()
        .filter_map(|s| {
            let mut clicked: Vec<(u32, HotelId)> = s
                .impressions
                .iter()
                .filter(|i| i.event.is_click())
                .map(|i| (i.position, i.hotel_id))
                .collect();
            clicked.sort();
            (clicked.len() >= 2).then(|| clicked.into_iter().map(|(_, h)| h).collect())
        })
        .collect()
}

/// Loss of one (center, context, negatives) term and its gradients:
/// `-ln s(v.u_pos) - sum ln s(-v.u_neg)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGradient {
    pub loss: f64,
    pub center: Vec<f64>,
    pub context: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn pair_gradient(center: &[f64], context: &[f64], negatives: &[&[f64]]) -> PairGradient {
    let d = center.len();
    let mut g_center = vec![0.0; d];
    let s = dot(center, context);
    let mut loss = softplus(-s);
    // d/ds of softplus(-s) = -(1 - sigmoid(s))
    let coef = -(1.0 - sigmoid(s));
    let g_context: Vec<f64> = center.iter().map(|v| coef * v).collect();
    for (gc, u) in g_center.iter_mut().zip(context) {
        *gc += coef * u;
    }
    let mut g_negs = Vec::with_capacity(negatives.len());
    for u in negatives {
        let s = dot(center, u);
        loss += softplus(s);
        let coef = sigmoid(s);
        g_negs.push(center.iter().map(|v| coef * v).collect());
        for (gc, x) in g_center.iter_mut().zip(u.iter()) {
            *gc += coef * x;
        }
    }
    PairGradient {
        loss,
        center: g_center,
        context: g_context,
        negatives: g_negs,
    }
}

/// Counts of negatives drawn during training, by whether they shared the
/// center hotel's geo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NegativeAudit {
    pub within_geo: u64,
    pub out_of_geo: u64,
}

/// Unigram^0.75 sampler restricted to one geo.
struct GeoSampler {
    members: Vec<usize>,
    cumulative: Vec<f64>,
}

impl GeoSampler {
    fn draw<R: Rng>(&self, r: &mut R, exclude: usize) -> Option<usize> {
        if self.members.iter().all(|&m| m == exclude) {
            return None;
        }
        let total = *self.cumulative.last()?;
        for _ in 0..64 {
            let x = r.random::<f64>() * total;
            let i = self
                .cumulative
                .partition_point(|&c| c <= x)
                .min(self.members.len() - 1);
            let m = self.members[i];
            if m != exclude {
                return Some(m);
            }
        }
        // context dominates the geo's mass: take the first other member
        self.members.iter().copied().find(|&m| m != exclude)
    }
}

/// Parameter storage the SGD step writes into.
trait Store {
    fn get(&self, i: usize) -> f64;
    fn add(&mut self, i: usize, delta: f64);
}

impl Store for Vec<f64> {
    #[inline]
    fn get(&self, i: usize) -> f64 {
        self[i]
    }
    #[inline]
    fn add(&mut self, i: usize, delta: f64) {
        self[i] += delta;
    }
}

/// Hogwild storage: racy read-modify-write of f64 bits held in atomics.
#[cfg(feature = "parallel")]
struct SharedStore<'a>(&'a [AtomicU64]);

#[cfg(feature = "parallel")]
impl Store for SharedStore<'_> {
    #[inline]
    fn get(&self, i: usize) -> f64 {
        f64::from_bits(self.0[i].load(Ordering::Relaxed))
    }
    #[inline]
    fn add(&mut self, i: usize, delta: f64) {
        let v = self.get(i) + delta;
        self.0[i].store(v.to_bits(), Ordering::Relaxed);
    }
}

struct Vocab {
    hotels: Vec<HotelId>,
    index: BTreeMap<HotelId, usize>,
    geo: Vec<GeoId>,
    samplers: BTreeMap<GeoId, GeoSampler>,
}

fn build_vocab(sequences: &[Vec<HotelId>], geo_of: &BTreeMap<HotelId, GeoId>) -> Result<Vocab> {
    let mut counts: BTreeMap<HotelId, u64> = BTreeMap::new();
    for s in sequences {
        for h in s {
            *counts.entry(*h).or_insert(0) += 1;
        }
    }
    let hotels: Vec<HotelId> = counts.keys().copied().collect();
    let index: BTreeMap<HotelId, usize> = hotels.iter().enumerate().map(|(i, h)| (*h, i)).collect();
    let mut geo = Vec::with_capacity(hotels.len());
    let mut by_geo: BTreeMap<GeoId, Vec<usize>> = BTreeMap::new();
    for (i, h) in hotels.iter().enumerate() {
        let g = *geo_of
            .get(h)
            .ok_or_else(|| Error::Data(format!("hotel {h} has no known geo")))?;
        geo.push(g);
        by_geo.entry(g).or_default().push(i);
    }
    let samplers = by_geo
        .into_iter()
        .map(|(g, members)| {
            let mut acc = 0.0;
            let cumulative = members
                .iter()
                .map(|&m| {
                    acc += powf(counts[&hotels[m]] as f64, 0.75);
                    acc
                })
                .collect();
            (
                g,
                GeoSampler {
                    members,
                    cumulative,
                },
            )
        })
        .collect();
    Ok(Vocab {
        hotels,
        index,
        geo,
        samplers,
    })
}

struct Shared<'a> {
    vocab: &'a Vocab,
    cfg: &'a SkipGramConfig,
    total_steps: f64,
}

/// Runs skip-gram over `sequences`, counting processed center/context pairs
/// in `step` for the learning-rate schedule.
#[allow(clippy::too_many_arguments)]
fn train_sequences<R: Rng, S: Store>(
    shared: &Shared<'_>,
    sequences: &[Vec<HotelId>],
    r: &mut R,
    input: &mut S,
    output: &mut S,
    step: &mut u64,
    audit: &mut NegativeAudit,
    step_offset: u64,
) {
    let d = shared.cfg.dim;
    let lr0 = shared.cfg.learning_rate;
    let mut center = vec![0.0; d];
    let mut context = vec![0.0; d];
    let mut negs: Vec<(usize, Vec<f64>)> = Vec::new();
    for seq in sequences {
        let ids: Vec<usize> = seq.iter().map(|h| shared.vocab.index[h]).collect();
        for (c, &h) in ids.iter().enumerate() {
            let lo = c.saturating_sub(shared.cfg.window);
            let hi = (c + shared.cfg.window + 1).min(ids.len());
            for (o_pos, &o) in ids.iter().enumerate().take(hi).skip(lo) {
                if o_pos == c {
                    continue;
                }
                let progress = (*step + step_offset) as f64 / shared.total_steps;
                let lr = lr0 * (1.0 - progress).max(shared.cfg.min_learning_rate_ratio);
                *step += 1;
                let g = shared.vocab.geo[h];
                negs.clear();
                let sampler = &shared.vocab.samplers[&g];
                for _ in 0..shared.cfg.negatives_per_positive {
                    if let Some(n) = sampler.draw(r, o) {
                        if shared.vocab.geo[n] == g {
                            audit.within_geo += 1;
                        } else {
                            audit.out_of_geo += 1;
                        }
                        negs.push((n, (0..d).map(|k| output.get(n * d + k)).collect()));
                    }
                }
                for k in 0..d {
                    center[k] = input.get(h * d + k);
                    context[k] = output.get(o * d + k);
                }
                let neg_refs: Vec<&[f64]> = negs.iter().map(|(_, v)| v.as_slice()).collect();
                let grad = pair_gradient(&center, &context, &neg_refs);
                for k in 0..d {
                    output.add(o * d + k, -lr * grad.context[k]);
                }
                for ((n, _), gn) in negs.iter().zip(&grad.negatives) {
                    for k in 0..d {
                        output.add(n * d + k, -lr * gn[k]);
                    }
                }
                for k in 0..d {
                    input.add(h * d + k, -lr * grad.center[k]);
                }
            }
        }
    }
}

fn count_pairs(sequences: &[Vec<HotelId>], window: usize) -> u64 {
    sequences
        .iter()
        .map(|s| {
            (0..s.len())
                .map(|c| {
                    let lo = c.saturating_sub(window);
                    let hi = (c + window + 1).min(s.len());
                    (hi - lo - 1) as u64
                })
                .sum::<u64>()
        })
        .sum()
}

/// Trains embeddings; see [`train_skipgram_audited`].
pub fn train_skipgram(
    sequences: &[Vec<HotelId>],
    geo_of: &BTreeMap<HotelId, GeoId>,
    cfg: &SkipGramConfig,
    seed: u64,
) -> Result<EmbeddingTable> {
    train_skipgram_audited(sequences, geo_of, cfg, seed).map(|(t, _)| t)
}

/// Trains embeddings and reports every negative drawn, by geo agreement with
/// its center hotel.
pub fn train_skipgram_audited(
    sequences: &[Vec<HotelId>],
    geo_of: &BTreeMap<HotelId, GeoId>,
    cfg: &SkipGramConfig,
    seed: u64,
) -> Result<(EmbeddingTable, NegativeAudit)> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::Data("no click sequences to train on".into()));
    }
    let vocab = build_vocab(sequences, geo_of)?;
    let d = cfg.dim;
    let n = vocab.hotels.len();
    let mut init = rng::stream(seed, "embed.init", &[]);
    let mut input: Vec<f64> = (0..n * d)
        .map(|_| (init.random::<f64>() - 0.5) / d as f64)
        .collect();
    let mut output = vec![0.0; n * d];
    let per_epoch = count_pairs(sequences, cfg.window);
    let shared = Shared {
        vocab: &vocab,
        cfg,
        total_steps: (per_epoch * cfg.epochs as u64).max(1) as f64,
    };
    let mut audit = NegativeAudit::default();
    match cfg.mode {
        #[cfg(feature = "parallel")]
        TrainMode::Fast => {
            audit = train_fast(&shared, sequences, seed, &mut input, &mut output, per_epoch);
        }
        _ => {
            let mut r = rng::stream(seed, "embed.sgd", &[]);
            let mut step = 0;
            for _ in 0..cfg.epochs {
                train_sequences(
                    &shared,
                    sequences,
                    &mut r,
                    &mut input,
                    &mut output,
                    &mut step,
                    &mut audit,
                    0,
                );
            }
        }
    }
    let mut geo_index: BTreeMap<GeoId, Vec<HotelId>> = BTreeMap::new();
    for (i, h) in vocab.hotels.iter().enumerate() {
        geo_index.entry(vocab.geo[i]).or_default().push(*h);
    }
    let vectors = vocab
        .hotels
        .iter()
        .enumerate()
        .map(|(i, h)| (*h, input[i * d..(i + 1) * d].to_vec()))
        .collect();
    Ok((
        EmbeddingTable {
            dim: d,
            vectors,
            geo_index,
            config: cfg.clone(),
            seed,
        },
        audit,
    ))
}

#[cfg(feature = "parallel")]
fn train_fast(
    shared: &Shared<'_>,
    sequences: &[Vec<HotelId>],
    seed: u64,
    input: &mut [f64],
    output: &mut [f64],
    per_epoch: u64,
) -> NegativeAudit {
    use rayon::prelude::*;
    let to_atomic =
        |v: &[f64]| -> Vec<AtomicU64> { v.iter().map(|x| AtomicU64::new(x.to_bits())).collect() };
    let shared_in = to_atomic(input);
    let shared_out = to_atomic(output);
    let workers = rayon::current_num_threads().max(1);
    let chunk = sequences.len().div_ceil(workers).max(1);
    let audits: Vec<NegativeAudit> = sequences
        .par_chunks(chunk)
        .enumerate()
        .map(|(w, part)| {
            let mut r = rng::stream(seed, "embed.sgd.fast", &[w as u64]);
            let mut audit = NegativeAudit::default();
            let mut step = 0;
            // approximate global progress: each worker covers its share of an epoch
            let scale = (part.len() as f64 / sequences.len() as f64).max(1e-12);
            for epoch in 0..shared.cfg.epochs {
                let offset = (epoch as f64 * per_epoch as f64 * (1.0 - scale)) as u64;
                train_sequences(
                    shared,
                    part,
                    &mut r,
                    &mut SharedStore(&shared_in),
                    &mut SharedStore(&shared_out),
                    &mut step,
                    &mut audit,
                    offset,
                );
            }
            audit
        })
        .collect();
    for (dst, src) in input.iter_mut().zip(&shared_in) {
        *dst = f64::from_bits(src.load(Ordering::Relaxed));
    }
    for (dst, src) in output.iter_mut().zip(&shared_out) {
        *dst = f64::from_bits(src.load(Ordering::Relaxed));
    }
    audits
        .iter()
        .fold(NegativeAudit::default(), |a, b| NegativeAudit {
            within_geo: a.within_geo + b.within_geo,
            out_of_geo: a.out_of_geo + b.out_of_geo,
        })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = sqrt(dot(a, a));
    let nb = sqrt(dot(b, b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Cosine similarity between a candidate and the user's recent clicks.
///
/// Unknown candidates score 0 and bump `cold_starts`.
pub struct SimilarityFeature<'a> {
    pub table: &'a EmbeddingTable,
    /// How many of the most recent clicks are averaged.
    pub window: usize,
    cold_starts: AtomicU64,
}

impl<'a> SimilarityFeature<'a> {
    pub const DEFAULT_WINDOW: usize = 10;

    pub fn new(table: &'a EmbeddingTable) -> Self {
        Self {
            table,
            window: Self::DEFAULT_WINDOW,
            cold_starts: AtomicU64::new(0),
        }
    }

    pub fn cold_starts(&self) -> u64 {
        self.cold_starts.load(Ordering::Relaxed)
    }

    pub fn score(&self, recent_clicks: &[HotelId], candidate: HotelId) -> f64 {
        let Some(c) = self.table.get(candidate) else {
            self.cold_starts.fetch_add(1, Ordering::Relaxed);
            return 0.0;
        };
        let mut mean = vec![0.0; self.table.dim];
        let mut used = 0;
        for h in recent_clicks.iter().rev() {
            if used == self.window {
                break;
            }
            if let Some(v) = self.table.get(*h) {
                for (m, x) in mean.iter_mut().zip(v) {
                    *m += x;
                }
                used += 1;
            }
        }
        if used == 0 {
            return 0.0;
        }
        cosine(c, &mean)
    }
}

/// Convenience wrapper with the default window.
pub fn similarity_feature(
    table: &EmbeddingTable,
    recent_clicks: &[HotelId],
    candidate: HotelId,
) -> f64 {
    SimilarityFeature::new(table).score(recent_clicks, candidate)
}

/// Recent clicks for each session: the clicked hotels of the previous
/// session on the same geo, in log order.
pub fn recent_clicks_by_session<'a, I>(log: I) -> BTreeMap<SessionId, Vec<HotelId>>
where
    I: IntoIterator<Item = &'a SessionLog>,
{
    let mut last: BTreeMap<GeoId, Vec<HotelId>> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for s in log {
        out.insert(
            s.session_id,
            last.get(&s.query_geo).cloned().unwrap_or_default(),
        );
        let clicked: Vec<HotelId> = s
            .impressions
            .iter()
            .filter(|i| i.event.is_click())
            .map(|i| i.hotel_id)
            .collect();
        if !clicked.is_empty() {
            last.insert(s.query_geo, clicked);
        }
    }
    out
}

/// Appends the similarity feature to every example of `dataset`.
pub fn personalize_dataset(
    dataset: &mut TrainingDataset,
    recent: &BTreeMap<SessionId, Vec<HotelId>>,
    feature: &SimilarityFeature<'_>,
) {
    for e in &mut dataset.examples {
        let clicks = recent.get(&e.session_id).map(Vec::as_slice).unwrap_or(&[]);
        e.features.push(feature.score(clicks, e.hotel_id));
    }
    dataset.feature_dimension += 1;
}
