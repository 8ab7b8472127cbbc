//! The pipeline steps. Each reads its inputs from the output directory,
//! writes its artifacts atomically and records them in the manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use posbias_core::debias::{prepare_training, ModeSpec};
use posbias_core::embed::{
    build_sequences, personalize_dataset, recent_clicks_by_session, train_skipgram, EmbeddingTable,
    SimilarityFeature,
};
use posbias_core::evalab::{
    evaluate_logging_policy, evaluate_with, inventory_ndcg, simulated_abtest, AbConfig, NdcgAt,
    Scorer,
};
use posbias_core::propensity::{booking_relevance_curve, click_curve, estimate_propensity};
use posbias_core::ranker::{fit_with_trace, mean_ndcg, RankerModel};
use posbias_core::simclick::{
    gen_universe, prop_true, simulate_log, ExaminationTally, HotelUniverse,
};
use posbias_core::{rng, HotelId, SessionLog};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::formats::{
    self, DatasetManifest, EvaluationReport, ExaminationTrace, GroundTruth, TrainMetrics,
};
use crate::store::{params_hash, AtomicFile, Plan, StepKey, Store};
use crate::Failure;

pub const UNIVERSE: &str = "universe.json";
pub const GROUND_TRUTH: &str = "ground_truth.json";
pub const TRAIN_LOG: &str = "sessions/train.jsonl";
pub const HELDOUT_LOG: &str = "sessions/heldout.jsonl";
pub const EXAMINATION: &str = "sessions/examination.jsonl";
pub const CURVES: &str = "propensity/curves.csv";
pub const PROPENSITY: &str = "propensity/propensity.json";
pub const EMBEDDINGS: &str = "embeddings.json";
pub const EVALUATION: &str = "evaluation.json";
pub const ABTEST: &str = "abtest.json";
pub const PLOT_DATA: &str = "plot_data.csv";

pub fn dataset_path(mode: &ModeSpec) -> String {
    format!("datasets/{}.jsonl", mode.slug())
}

pub fn dataset_manifest_path(mode: &ModeSpec) -> String {
    format!("datasets/{}.manifest.json", mode.slug())
}

pub fn model_path(mode: &ModeSpec) -> String {
    format!("models/{}.json", mode.slug())
}

pub fn model_metrics_path(mode: &ModeSpec) -> String {
    format!("models/{}.metrics.json", mode.slug())
}

/// Arm name of a mode in the A/B report.
pub fn arm_name(mode: &ModeSpec) -> String {
    mode.slug()
}

/// Everything a step needs: the config, the output directory and flags.
pub struct Context {
    pub cfg: PipelineConfig,
    pub store: Store,
    pub lenient: bool,
    /// Print progress and tables to stdout.
    pub verbose: bool,
}

impl Context {
    pub fn open(
        cfg: PipelineConfig,
        out: Option<PathBuf>,
        force: bool,
        lenient: bool,
    ) -> Result<Self, Failure> {
        cfg.validate().map_err(Failure::in_module("config"))?;
        let out = out.unwrap_or_else(|| cfg.out_dir.clone());
        let store =
            Store::open(&out, force, cfg.hash(), cfg.seed).map_err(Failure::in_module("io"))?;
        Ok(Self {
            cfg,
            store,
            lenient,
            verbose: true,
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        self.store.path("")
    }

    fn seed(&self, stream: &str) -> u64 {
        rng::derive(self.cfg.seed, stream, &[])
    }

    fn say(&self, msg: impl AsRef<str>) {
        if self.verbose {
            // a closed stdout must not abort a step
            let _ = writeln!(std::io::stdout(), "{}", msg.as_ref());
        }
    }

    /// Runs `body` unless every output is up to date, then records the
    /// outputs. Errors are tagged with `module`.
    #[allow(clippy::too_many_arguments)]
    fn step<P: Serialize>(
        &mut self,
        module: &'static str,
        step: &str,
        seed: u64,
        params: &P,
        inputs: &[(&str, &str)],
        outputs: Vec<String>,
        body: impl FnOnce(&Self) -> anyhow::Result<()>,
    ) -> Result<(), Failure> {
        let wrap = Failure::in_module(module);
        let mut hashes = BTreeMap::new();
        for (rel, producer) in inputs {
            hashes.insert(
                rel.to_string(),
                self.store.require(rel, producer).map_err(&wrap)?,
            );
        }
        let key = StepKey {
            step: step.to_string(),
            seed,
            params_hash: params_hash(params),
            inputs: hashes,
        };
        match self.store.plan(&key, &outputs).map_err(&wrap)? {
            Plan::UpToDate => {
                self.say(format!("{step}: up to date"));
                Ok(())
            }
            Plan::Run => {
                body(self).map_err(&wrap)?;
                self.store.commit(&key, &outputs).map_err(&wrap)?;
                self.say(format!("{step}: wrote {}", outputs.join(", ")));
                Ok(())
            }
        }
    }

    fn universe(&self) -> anyhow::Result<HotelUniverse> {
        formats::read_json(&self.store.path(UNIVERSE))
    }

    fn sessions(&self, rel: &str) -> anyhow::Result<Vec<SessionLog>> {
        formats::read_sessions(
            &self.store.path(rel),
            self.cfg.universe.page_size,
            self.lenient,
        )
    }

    fn embeddings(&self) -> anyhow::Result<Option<EmbeddingTable>> {
        if self.cfg.personalization {
            formats::read_embeddings(&self.store.path(EMBEDDINGS)).map(Some)
        } else {
            Ok(None)
        }
    }
}

pub fn simulate(ctx: &mut Context) -> Result<(), Failure> {
    let cfg = &ctx.cfg;
    let params = (
        cfg.universe.clone(),
        cfg.user.clone(),
        cfg.train_sessions,
        cfg.heldout_sessions,
        cfg.debug_examination,
    );
    let mut outputs = vec![
        UNIVERSE.into(),
        GROUND_TRUTH.into(),
        TRAIN_LOG.into(),
        HELDOUT_LOG.into(),
    ];
    if cfg.debug_examination {
        outputs.push(EXAMINATION.into());
    }
    let seed = ctx.seed("simulate");
    ctx.step("simclick", "simulate", seed, &params, &[], outputs, |ctx| {
        let cfg = &ctx.cfg;
        let universe = gen_universe(&cfg.universe, rng::derive(seed, "universe", &[]))?;
        formats::write_json(&ctx.store.path(UNIVERSE), &universe)?;

        let mut tally = ExaminationTally::default();
        let mut log = AtomicFile::create(&ctx.store.path(TRAIN_LOG))?;
        let mut exam = if cfg.debug_examination {
            Some(AtomicFile::create(&ctx.store.path(EXAMINATION))?)
        } else {
            None
        };
        for s in simulate_log(
            &universe,
            &cfg.user,
            cfg.train_sessions,
            rng::derive(seed, "train", &[]),
        )? {
            let s = s?;
            tally.add(&s.examined);
            serde_json::to_writer(&mut log, &s.log)?;
            log.write_all(b"\n")?;
            if let Some(f) = exam.as_mut() {
                let trace = ExaminationTrace {
                    session_id: s.log.session_id,
                    examined: s.examined,
                };
                serde_json::to_writer(&mut *f, &trace)?;
                f.write_all(b"\n")?;
            }
        }
        log.finish()?;
        if let Some(f) = exam {
            f.finish()?;
        }

        let heldout = simulate_log(
            &universe,
            &cfg.user,
            cfg.heldout_sessions,
            rng::derive(seed, "heldout", &[]),
        )?;
        formats::write_sessions(
            &ctx.store.path(HELDOUT_LOG),
            heldout.map(|s| s.map(|s| s.log).map_err(anyhow::Error::from)),
        )?;

        let truth = GroundTruth {
            model_kind: cfg.user.model_kind,
            eta: cfg.user.eta,
            prop_true: prop_true(&cfg.user, universe.page_size, Some(&tally)),
            empirical_examination: tally.rates(),
            universe: formats::UniverseSummary::of(&universe),
        };
        formats::write_json(&ctx.store.path(GROUND_TRUTH), &truth)
    })
}

pub fn estimate(ctx: &mut Context) -> Result<(), Failure> {
    let params = ctx.cfg.curve.clone();
    let inputs = [(UNIVERSE, "simulate"), (TRAIN_LOG, "simulate")];
    ctx.step(
        "propensity",
        "estimate",
        0,
        &params,
        &inputs,
        vec![CURVES.into(), PROPENSITY.into()],
        |ctx| {
            let universe = ctx.universe()?;
            let log = ctx.sessions(TRAIN_LOG)?;
            let cfg = &ctx.cfg.curve;
            let click = click_curve(&log, cfg)?;
            let relevance = booking_relevance_curve(&log, &universe.bookings(), cfg)?;
            let est = estimate_propensity(&click, &relevance, cfg)?;
            formats::write_curves_csv(&ctx.store.path(CURVES), &est)?;
            formats::write_json(&ctx.store.path(PROPENSITY), &est.curve)
        },
    )
}

pub fn embed(ctx: &mut Context) -> Result<(), Failure> {
    let params = ctx.cfg.embedding.clone();
    let inputs = [(UNIVERSE, "simulate"), (TRAIN_LOG, "simulate")];
    let seed = ctx.seed("embed");
    ctx.step(
        "embed",
        "embed",
        seed,
        &params,
        &inputs,
        vec![EMBEDDINGS.into()],
        |ctx| {
            let universe = ctx.universe()?;
            let log = ctx.sessions(TRAIN_LOG)?;
            let sequences = build_sequences(&log);
            let table =
                train_skipgram(&sequences, &universe.geo_index(), &ctx.cfg.embedding, seed)?;
            formats::write_embeddings(&ctx.store.path(EMBEDDINGS), &table)
        },
    )
}

fn modes_or_config(ctx: &Context, mode: Option<ModeSpec>) -> Vec<ModeSpec> {
    mode.map(|m| vec![m])
        .unwrap_or_else(|| ctx.cfg.modes.clone())
}

pub fn prepare(ctx: &mut Context, mode: Option<ModeSpec>) -> Result<(), Failure> {
    for m in modes_or_config(ctx, mode) {
        prepare_one(ctx, m)?;
    }
    Ok(())
}

fn prepare_one(ctx: &mut Context, mode: ModeSpec) -> Result<(), Failure> {
    let personalized = ctx.cfg.personalization;
    let mut inputs = vec![(TRAIN_LOG, "simulate")];
    if mode == ModeSpec::Propensity {
        inputs.push((PROPENSITY, "estimate"));
    }
    if personalized {
        inputs.push((EMBEDDINGS, "embed"));
    }
    let seed = ctx.seed("prepare");
    let outputs = vec![dataset_path(&mode), dataset_manifest_path(&mode)];
    let step = format!("prepare {mode}");
    ctx.step(
        "debias",
        &step,
        seed,
        &(mode, personalized),
        &inputs,
        outputs,
        |ctx| {
            let log = ctx.sessions(TRAIN_LOG)?;
            let (curve, curve_sha) = if mode == ModeSpec::Propensity {
                (
                    Some(formats::read_propensity(&ctx.store.path(PROPENSITY))?),
                    Some(ctx.store.require(PROPENSITY, "estimate")?),
                )
            } else {
                (None, None)
            };
            let sampling = mode.with_curve(curve.as_ref())?;
            let mut ds = prepare_training(&log, &sampling, seed)?;
            if let Some(table) = ctx.embeddings()? {
                let recent = recent_clicks_by_session(&log);
                personalize_dataset(&mut ds, &recent, &SimilarityFeature::new(&table));
            }
            formats::write_dataset(&ctx.store.path(&dataset_path(&mode)), &ds)?;
            let manifest = DatasetManifest {
                mode: mode.kind().into(),
                rate: mode.rate(),
                seed,
                curve_sha256: curve_sha,
                personalized,
                sessions: ds.group_ranges().len(),
                rows: ds.len(),
                feature_dimension: ds.feature_dimension,
                label_counts: ds
                    .label_counts()
                    .into_iter()
                    .map(|(l, c)| (l.to_string(), c))
                    .collect(),
            };
            formats::write_json(&ctx.store.path(&dataset_manifest_path(&mode)), &manifest)
        },
    )
}

pub fn train(ctx: &mut Context, mode: Option<ModeSpec>) -> Result<(), Failure> {
    for m in modes_or_config(ctx, mode) {
        train_one(ctx, m)?;
    }
    Ok(())
}

fn train_one(ctx: &mut Context, mode: ModeSpec) -> Result<(), Failure> {
    let data = dataset_path(&mode);
    let manifest = dataset_manifest_path(&mode);
    let prep = format!("prepare --mode {mode}");
    let inputs = [
        (data.as_str(), prep.as_str()),
        (manifest.as_str(), prep.as_str()),
    ];
    let seed = ctx.seed("train");
    let params = ctx.cfg.ranker.clone();
    let outputs = vec![model_path(&mode), model_metrics_path(&mode)];
    let step = format!("train {mode}");
    ctx.step("ranker", &step, seed, &params, &inputs, outputs, |ctx| {
        let ds = formats::read_dataset(&ctx.store.path(&data))?;
        let (mut model, trace) = fit_with_trace(&ds, &ctx.cfg.ranker, seed)?;
        model.metadata.training_manifest_hash = Some(ctx.store.require(&manifest, &prep)?);
        std::fs::create_dir_all(ctx.store.path("models"))?;
        crate::store::write_atomic(
            &ctx.store.path(&model_path(&mode)),
            &formats::model_to_json(&model)?,
        )?;
        let labels: Vec<u8> = ds.examples.iter().map(|e| e.label).collect();
        let groups = ds.group_ranges();
        let at = |k| mean_ndcg(&labels, &trace.final_scores, &groups, k);
        let metrics = TrainMetrics {
            mode: mode.to_string(),
            rows: ds.len(),
            groups: groups.len(),
            train: NdcgAt {
                at5: at(5),
                at10: at(10),
                at30: at(30),
            },
        };
        formats::write_json(&ctx.store.path(&model_metrics_path(&mode)), &metrics)
    })
}

/// A personalized model seen without any recent clicks: the similarity
/// feature is zero. Used to judge pages against the whole inventory.
struct ColdStart<'a>(&'a RankerModel);

impl Scorer for ColdStart<'_> {
    fn feature_dimension(&self) -> usize {
        self.0.feature_dimension - 1
    }
    fn score(&self, _: HotelId, features: &[f64]) -> f64 {
        let mut x = features.to_vec();
        x.push(0.0);
        self.0.predict_unchecked(&x)
    }
}

fn load_models(ctx: &Context) -> anyhow::Result<Vec<(ModeSpec, RankerModel)>> {
    ctx.cfg
        .modes
        .iter()
        .map(|m| Ok((*m, formats::read_model(&ctx.store.path(&model_path(m)))?)))
        .collect()
}

fn model_inputs(ctx: &Context) -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = ctx
        .cfg
        .modes
        .iter()
        .map(|m| (model_path(m), format!("train --mode {m}")))
        .collect();
    v.push((UNIVERSE.into(), "simulate".into()));
    if ctx.cfg.personalization {
        v.push((EMBEDDINGS.into(), "embed".into()));
    }
    v
}

pub fn evaluate(ctx: &mut Context) -> Result<(), Failure> {
    let mut owned = model_inputs(ctx);
    owned.push((HELDOUT_LOG.into(), "simulate".into()));
    let inputs: Vec<(&str, &str)> = owned
        .iter()
        .map(|(a, b)| (a.as_str(), b.as_str()))
        .collect();
    let params = (
        ctx.cfg.modes.clone(),
        ctx.cfg.abtest.candidates,
        ctx.cfg.personalization,
    );
    ctx.step(
        "evalab",
        "evaluate",
        0,
        &params,
        &inputs,
        vec![EVALUATION.into()],
        |ctx| {
            let universe = ctx.universe()?;
            let heldout = ctx.sessions(HELDOUT_LOG)?;
            let table = ctx.embeddings()?;
            let models = load_models(ctx)?;
            let recent = recent_clicks_by_session(&heldout);
            let mut report = EvaluationReport {
                heldout_sessions: heldout.len(),
                logging_policy: evaluate_logging_policy(&heldout, &universe)?,
                models: BTreeMap::new(),
                inventory_ndcg: BTreeMap::new(),
            };
            for (mode, model) in &models {
                let metrics = match &table {
                    None => {
                        check_dimension(model, universe.feature_dimension)?;
                        evaluate_with(&heldout, &universe, |_, i| {
                            model.predict_unchecked(&i.features_snapshot)
                        })?
                    }
                    Some(t) => {
                        check_dimension(model, universe.feature_dimension + 1)?;
                        let sim = SimilarityFeature::new(t);
                        evaluate_with(&heldout, &universe, |s, i| {
                            let mut x = i.features_snapshot.clone();
                            x.push(sim.score(
                                recent.get(&s.session_id).map(Vec::as_slice).unwrap_or(&[]),
                                i.hotel_id,
                            ));
                            model.predict_unchecked(&x)
                        })?
                    }
                };
                let inv = match &table {
                    None => inventory_ndcg(model, &universe, ctx.cfg.abtest.candidates)?,
                    Some(_) => {
                        inventory_ndcg(&ColdStart(model), &universe, ctx.cfg.abtest.candidates)?
                    }
                };
                report.models.insert(arm_name(mode), metrics);
                report.inventory_ndcg.insert(arm_name(mode), inv);
            }
            formats::write_json(&ctx.store.path(EVALUATION), &report)
        },
    )
}

fn check_dimension(model: &RankerModel, expected: usize) -> anyhow::Result<()> {
    if model.feature_dimension != expected {
        bail!(
            "model expects {} features, the data provides {expected}",
            model.feature_dimension
        );
    }
    Ok(())
}

pub fn abtest(ctx: &mut Context) -> Result<(), Failure> {
    if !ctx.cfg.modes.contains(&ModeSpec::Control) {
        return Err(Failure::new(
            "evalab",
            anyhow::anyhow!("the A/B test needs a control mode"),
        ));
    }
    let owned = model_inputs(ctx);
    let inputs: Vec<(&str, &str)> = owned
        .iter()
        .map(|(a, b)| (a.as_str(), b.as_str()))
        .collect();
    let seed = ctx.seed("abtest");
    let params = (
        ctx.cfg.modes.clone(),
        ctx.cfg.user.clone(),
        ctx.cfg.abtest.clone(),
        ctx.cfg.personalization,
    );
    ctx.step(
        "evalab",
        "abtest",
        seed,
        &params,
        &inputs,
        vec![ABTEST.into()],
        |ctx| {
            let universe = ctx.universe()?;
            let table = ctx.embeddings()?;
            let models = load_models(ctx)?;
            let arms: Vec<(String, &dyn Scorer)> = models
                .iter()
                .map(|(m, model)| (arm_name(m), model as &dyn Scorer))
                .collect();
            let s = &ctx.cfg.abtest;
            let config = AbConfig {
                num_sessions: s.num_sessions,
                seed,
                candidates: s.candidates,
                bootstrap_reps: s.bootstrap_reps,
                confidence: s.confidence,
            };
            let report =
                simulated_abtest(&arms, &universe, &ctx.cfg.user, &config, table.as_ref())?;
            formats::write_json(&ctx.store.path(ABTEST), &report)?;
            ctx.say(formats::ab_table(&report));
            Ok(())
        },
    )
}

pub fn plot_data(ctx: &mut Context) -> Result<(), Failure> {
    let inputs = [(CURVES, "estimate"), (GROUND_TRUTH, "simulate")];
    ctx.step(
        "propensity",
        "plot-data",
        0,
        &(),
        &inputs,
        vec![PLOT_DATA.into()],
        |ctx| {
            let curves = formats::read_curves_csv(&ctx.store.path(CURVES))?;
            let truth: GroundTruth = formats::read_json(&ctx.store.path(GROUND_TRUTH))?;
            formats::write_plot_data(&ctx.store.path(PLOT_DATA), &curves, &truth.prop_true)
        },
    )
}

/// Every step in dependency order.
pub fn pipeline(ctx: &mut Context) -> Result<(), Failure> {
    simulate(ctx)?;
    estimate(ctx)?;
    embed(ctx)?;
    prepare(ctx, None)?;
    train(ctx, None)?;
    evaluate(ctx)?;
    abtest(ctx)?;
    plot_data(ctx)
}

/// Loads a config file, applying a seed override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig, Failure> {
    let wrap = Failure::in_module("config");
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p).map_err(&wrap)?,
        None => {
            let seed =
                seed.ok_or_else(|| wrap(anyhow::anyhow!("either --config or --seed is required")))?;
            serde_json::from_value(serde_json::json!({ "seed": seed }))
                .context("default config")
                .map_err(&wrap)?
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}
