//! On-disk formats for every artifact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use posbias_core::debias::{TrainingDataset, TrainingExample};
use posbias_core::embed::{EmbeddingTable, SkipGramConfig};
use posbias_core::evalab::{AbReport, EvalMetrics, NdcgAt};
use posbias_core::propensity::PropensityEstimate;
use posbias_core::ranker::{ModelMetadata, Node, RankerModel, RankerParams, Tree};
use posbias_core::simclick::{HotelUniverse, ModelKind};
use posbias_core::{validate_session, GeoId, HotelId, PropensityCurve, SessionId, SessionLog};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::store::{write_atomic, AtomicFile};

const SESSION_KEYS: [&str; 4] = ["session_id", "query_geo", "impressions", "user_seed"];
const IMPRESSION_KEYS: [&str; 4] = ["hotel_id", "position", "event", "features_snapshot"];

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f))
        .with_context(|| format!("malformed {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn unknown_keys(v: &Value, allowed: &[&str]) -> Vec<String> {
    match v.as_object() {
        Some(o) => o
            .keys()
            .filter(|k| !allowed.contains(&k.as_str()))
            .cloned()
            .collect(),
        None => vec![],
    }
}

/// Parses one JSONL session line. Unknown keys are an error unless
/// `lenient`, and every session must pass validation.
pub fn parse_session(line: &str, page_size: usize, lenient: bool) -> anyhow::Result<SessionLog> {
    let v: Value = serde_json::from_str(line)?;
    if !lenient {
        let mut unknown = unknown_keys(&v, &SESSION_KEYS);
        if let Some(imps) = v.get("impressions").and_then(Value::as_array) {
            for imp in imps {
                unknown.extend(
                    unknown_keys(imp, &IMPRESSION_KEYS)
                        .into_iter()
                        .map(|k| format!("impressions[].{k}")),
                );
            }
        }
        if !unknown.is_empty() {
            unknown.dedup();
            bail!("unknown keys {unknown:?} (use --lenient to ignore)");
        }
    }
    let s: SessionLog = serde_json::from_value(v)?;
    let violations = validate_session(&s, page_size);
    if !violations.is_empty() {
        let list: Vec<String> = violations
            .iter()
            .map(|v| format!("{}: {}", v.field, v.rule))
            .collect();
        bail!("session {} is invalid: {}", s.session_id, list.join("; "));
    }
    Ok(s)
}

pub fn read_sessions(
    path: &Path,
    page_size: usize,
    lenient: bool,
) -> anyhow::Result<Vec<SessionLog>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            parse_session(&line, page_size, lenient)
                .with_context(|| format!("{} line {}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

/// Writes sessions one line at a time; the file only appears once every
/// session has been written.
pub fn write_sessions<I>(path: &Path, sessions: I) -> anyhow::Result<usize>
where
    I: IntoIterator<Item = anyhow::Result<SessionLog>>,
{
    let mut f = AtomicFile::create(path)?;
    let mut n = 0;
    for s in sessions {
        serde_json::to_writer(&mut f, &s?)?;
        f.write_all(b"\n")?;
        n += 1;
    }
    f.finish()?;
    Ok(n)
}

/// Ground-truth sidecar: what the simulator knows and the estimator must
/// recover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub model_kind: ModelKind,
    pub eta: f64,
    /// True examination by position, normalized to position 1.
    pub prop_true: Vec<f64>,
    /// Examination rates measured on the hidden traces of the training log.
    pub empirical_examination: Vec<f64>,
    pub universe: UniverseSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniverseSummary {
    pub num_geos: usize,
    pub num_hotels: usize,
    pub page_size: usize,
    pub feature_dimension: usize,
    pub seed: u64,
    pub mean_latent_quality: f64,
    pub mean_historical_bookings: f64,
}

impl UniverseSummary {
    pub fn of(u: &HotelUniverse) -> Self {
        let n = u.hotels.len() as f64;
        Self {
            num_geos: u.num_geos(),
            num_hotels: u.hotels.len(),
            page_size: u.page_size,
            feature_dimension: u.feature_dimension,
            seed: u.seed,
            mean_latent_quality: u.hotels.iter().map(|h| h.latent_quality).sum::<f64>() / n,
            mean_historical_bookings: u.hotels.iter().map(|h| h.historical_bookings).sum::<f64>()
                / n,
        }
    }
}

/// One line of the debug examination side file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExaminationTrace {
    pub session_id: SessionId,
    pub examined: Vec<bool>,
}

pub const CURVE_HEADER: [&str; 5] = [
    "position",
    "click_rate",
    "relevance",
    "raw_propensity",
    "propensity",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_curves_csv(path: &Path, est: &PropensityEstimate) -> anyhow::Result<()> {
    let mut f = AtomicFile::create(path)?;
    {
        let mut w = csv::Writer::from_writer(&mut f);
        w.write_record(CURVE_HEADER)?;
        for k in 0..est.curve.len() {
            w.write_record([
                (k + 1).to_string(),
                opt(est.click_rate[k]),
                opt(est.relevance[k]),
                est.raw[k].to_string(),
                est.curve.at(k + 1).to_string(),
            ])?;
        }
        w.flush()?;
    }
    f.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub position: usize,
    pub click_rate: Option<f64>,
    pub relevance: Option<f64>,
    pub raw_propensity: f64,
    pub propensity: f64,
}

pub fn read_curves_csv(path: &Path) -> anyhow::Result<Vec<CurveRow>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != CURVE_HEADER {
        bail!(
            "{} has header {header:?}, expected {CURVE_HEADER:?}",
            path.display()
        );
    }
    let field = |s: &str| -> anyhow::Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            Ok(Some(s.parse()?))
        }
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(CurveRow {
            position: rec[0].parse()?,
            click_rate: field(&rec[1])?,
            relevance: field(&rec[2])?,
            raw_propensity: rec[3].parse()?,
            propensity: rec[4].parse()?,
        });
    }
    Ok(out)
}

pub fn read_propensity(path: &Path) -> anyhow::Result<PropensityCurve> {
    read_json(path)
}

/// Row of the training dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRow {
    session_id: SessionId,
    hotel_id: HotelId,
    label: u8,
    features: Vec<f64>,
    position: u32,
}

pub fn write_dataset(path: &Path, ds: &TrainingDataset) -> anyhow::Result<()> {
    let mut f = AtomicFile::create(path)?;
    for e in &ds.examples {
        let row = DatasetRow {
            session_id: e.session_id,
            hotel_id: e.hotel_id,
            label: e.label,
            features: e.features.clone(),
            position: e.position,
        };
        serde_json::to_writer(&mut f, &row)?;
        f.write_all(b"\n")?;
    }
    f.finish()
}

pub fn read_dataset(path: &Path) -> anyhow::Result<TrainingDataset> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut examples = Vec::new();
    let mut dim = None;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DatasetRow = serde_json::from_str(&line)
            .with_context(|| format!("{} line {}", path.display(), i + 1))?;
        match dim {
            None => dim = Some(r.features.len()),
            Some(d) if d != r.features.len() => {
                bail!(
                    "{} line {}: {} features, expected {d}",
                    path.display(),
                    i + 1,
                    r.features.len()
                )
            }
            _ => {}
        }
        examples.push(TrainingExample {
            session_id: r.session_id,
            hotel_id: r.hotel_id,
            label: r.label,
            features: r.features,
            position: r.position,
        });
    }
    Ok(TrainingDataset {
        examples,
        feature_dimension: dim.unwrap_or(0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub mode: String,
    pub rate: Option<f64>,
    pub seed: u64,
    pub curve_sha256: Option<String>,
    pub personalized: bool,
    pub sessions: usize,
    pub rows: usize,
    pub feature_dimension: usize,
    /// Row counts per label, keyed by label.
    pub label_counts: BTreeMap<String, usize>,
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A tree node as a JSON array: `[feature, threshold, left, right]` for a
/// split, `[value]` for a leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum NodeRepr {
    Split(usize, f64, usize, usize),
    Leaf([f64; 1]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    feature_dimension: usize,
    learning_rate: f64,
    params: RankerParams,
    metadata: ModelMetadata,
    trees: Vec<Vec<NodeRepr>>,
}

pub fn model_to_json(model: &RankerModel) -> anyhow::Result<Vec<u8>> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        feature_dimension: model.feature_dimension,
        learning_rate: model.learning_rate,
        params: model.params.clone(),
        metadata: model.metadata.clone(),
        trees: model
            .trees
            .iter()
            .map(|t| {
                t.nodes
                    .iter()
                    .map(|n| match *n {
                        Node::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        } => NodeRepr::Split(feature, threshold, left, right),
                        Node::Leaf(v) => NodeRepr::Leaf([v]),
                    })
                    .collect()
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec(&file)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn model_from_json(bytes: &[u8]) -> anyhow::Result<RankerModel> {
    let v: Value =
        serde_json::from_slice(bytes).map_err(|e| anyhow!("malformed model file: {e}"))?;
    match v.get("format_version").and_then(Value::as_u64) {
        Some(ver) if ver == u64::from(MODEL_FORMAT_VERSION) => {}
        Some(ver) => bail!(
            "unsupported model format version {ver} (this build reads {MODEL_FORMAT_VERSION})"
        ),
        None => bail!("malformed model file: missing format_version"),
    }
    let file: ModelFile =
        serde_json::from_value(v).map_err(|e| anyhow!("malformed model file: {e}"))?;
    let model = RankerModel {
        trees: file
            .trees
            .into_iter()
            .map(|nodes| Tree {
                nodes: nodes
                    .into_iter()
                    .map(|n| match n {
                        NodeRepr::Split(feature, threshold, left, right) => Node::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        },
                        NodeRepr::Leaf([v]) => Node::Leaf(v),
                    })
                    .collect(),
            })
            .collect(),
        learning_rate: file.learning_rate,
        feature_dimension: file.feature_dimension,
        params: file.params,
        metadata: file.metadata,
    };
    model
        .validate()
        .map_err(|e| anyhow!("malformed model file: {e}"))?;
    Ok(model)
}

pub fn read_model(path: &Path) -> anyhow::Result<RankerModel> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot open {}", path.display()))?;
    model_from_json(&bytes).with_context(|| format!("{}", path.display()))
}

/// Training-set metrics written next to a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMetrics {
    pub mode: String,
    pub rows: usize,
    pub groups: usize,
    pub train: NdcgAt,
}

/// Held-out evaluation of every model plus the logging policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub heldout_sessions: usize,
    pub logging_policy: EvalMetrics,
    pub models: BTreeMap<String, EvalMetrics>,
    /// Mean ground-truth NDCG@30 of each model's two-stage page over the
    /// whole geo inventory.
    pub inventory_ndcg: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingHeader {
    pub dim: usize,
    pub count: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingFile {
    header: EmbeddingHeader,
    config: SkipGramConfig,
    geo_index: BTreeMap<GeoId, Vec<HotelId>>,
    vectors: BTreeMap<HotelId, Vec<f64>>,
}

pub fn write_embeddings(path: &Path, table: &EmbeddingTable) -> anyhow::Result<()> {
    let file = EmbeddingFile {
        header: EmbeddingHeader {
            dim: table.dim,
            count: table.len(),
            seed: table.seed,
            config_hash: crate::store::params_hash(&table.config),
        },
        config: table.config.clone(),
        geo_index: table.geo_index.clone(),
        vectors: table.vectors.clone(),
    };
    let mut bytes = serde_json::to_vec(&file)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_embeddings(path: &Path) -> anyhow::Result<EmbeddingTable> {
    let file: EmbeddingFile = read_json(path)?;
    if file.header.count != file.vectors.len() {
        bail!(
            "{}: header says {} vectors, file has {}",
            path.display(),
            file.header.count,
            file.vectors.len()
        );
    }
    let table = EmbeddingTable {
        dim: file.header.dim,
        vectors: file.vectors,
        geo_index: file.geo_index,
        config: file.config,
        seed: file.header.seed,
    };
    table
        .validate()
        .with_context(|| format!("{}", path.display()))?;
    Ok(table)
}

/// The A/B report as a table shaped like an experiment summary.
pub fn ab_table(report: &AbReport) -> String {
    let pct = |x: f64| format!("{:+.2}%", 100.0 * x);
    let mut out = format!(
        "{:<16} {:>9} {:>9} {:>12} {:>22} {:>10}\n",
        "arm", "clicks", "bookings", "click lift", "95% CI", "ndcg@30"
    );
    for a in &report.arms {
        let ci = format!(
            "[{}, {}]",
            pct(a.click_lift.ci_low),
            pct(a.click_lift.ci_high)
        );
        out.push_str(&format!(
            "{:<16} {:>9} {:>9} {:>12} {:>22} {:>10.4}\n",
            a.name,
            a.clicks,
            a.bookings,
            pct(a.click_lift.point),
            ci,
            a.mean_ground_truth_ndcg
        ));
    }
    out
}

pub const PLOT_HEADER: [&str; 4] = [
    "position",
    "click_curve",
    "propensity_curve",
    "true_examination",
];

/// Click curve and propensity curve by position, both relative to
/// position 1, with the simulator's truth alongside.
pub fn write_plot_data(path: &Path, curves: &[CurveRow], truth: &[f64]) -> anyhow::Result<()> {
    let c1 = curves
        .first()
        .and_then(|r| r.click_rate)
        .ok_or_else(|| anyhow!("click rate at position 1 is undefined"))?;
    let mut f = AtomicFile::create(path)?;
    {
        let mut w = csv::Writer::from_writer(&mut f);
        w.write_record(PLOT_HEADER)?;
        for r in curves {
            w.write_record([
                r.position.to_string(),
                opt(r.click_rate.map(|c| c / c1)),
                r.propensity.to_string(),
                opt(truth.get(r.position - 1).copied()),
            ])?;
        }
        w.flush()?;
    }
    f.finish()
}
