use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use posbias::formats::{
    model_from_json, model_to_json, read_model, read_sessions, write_sessions, DatasetManifest,
};
use posbias::store::{file_sha256, Manifest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TINY: &str = r#"{
  "seed": 11,
  "universe": { "num_geos": 3, "hotels_per_geo": 50 },
  "train_sessions": 600,
  "heldout_sessions": 100,
  "curve": { "min_support": 10 },
  "modes": ["control", "fixed:0.8", "propensity"],
  "ranker": { "num_trees": 5, "max_leaves": 7 },
  "embedding": { "dim": 4, "epochs": 1 },
  "abtest": { "num_sessions": 300, "candidates": 40, "bootstrap_reps": 50 }
}"#;

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config.json");
        fs::write(&config, TINY).unwrap();
        Run { dir, config }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn posbias(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_posbias"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(self.out())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.posbias(args);
        assert!(
            o.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }

    fn fails(&self, args: &[&str]) -> String {
        let o = self.posbias(args);
        assert!(!o.status.success(), "{args:?} succeeded");
        String::from_utf8(o.stderr).unwrap()
    }
}

fn read_manifest(out: &Path) -> Manifest {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn estimate_without_simulate_names_missing_file() {
    let r = Run::new();
    let err = r.fails(&["estimate"]);
    assert!(err.starts_with("error: [propensity]"), "{err}");
    assert!(
        err.contains("universe.json") && err.contains("posbias simulate"),
        "{err}"
    );
}

#[test]
fn prepare_fixed_records_mode_and_rate() {
    let r = Run::new();
    r.ok(&["simulate"]);
    r.ok(&["prepare", "--mode", "fixed:0.8"]);
    let m: DatasetManifest = serde_json::from_str(
        &fs::read_to_string(r.out().join("datasets/fixed-0.8.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(m.mode, "fixed");
    assert_eq!(m.rate, Some(0.8));
    assert!(m.rows > 0 && m.feature_dimension == 6);
    assert_eq!(m.label_counts.values().sum::<usize>(), m.rows);
}

#[test]
fn propensity_mode_needs_the_curve() {
    let r = Run::new();
    r.ok(&["simulate"]);
    let err = r.fails(&["prepare", "--mode", "propensity"]);
    assert!(
        err.contains("propensity.json") && err.contains("posbias estimate"),
        "{err}"
    );
}

#[test]
fn pipeline_records_every_artifact() {
    let r = Run::new();
    r.ok(&["pipeline"]);
    let out = r.out();
    let manifest = read_manifest(&out);
    for rel in [
        "universe.json",
        "ground_truth.json",
        "sessions/train.jsonl",
        "sessions/heldout.jsonl",
        "propensity/curves.csv",
        "propensity/propensity.json",
        "embeddings.json",
        "datasets/control.jsonl",
        "datasets/propensity.manifest.json",
        "models/control.json",
        "models/fixed-0.8.json",
        "models/propensity.metrics.json",
        "evaluation.json",
        "abtest.json",
        "plot_data.csv",
    ] {
        let rec = manifest
            .artifacts
            .get(rel)
            .unwrap_or_else(|| panic!("{rel} not in manifest"));
        assert_eq!(rec.sha256, file_sha256(&out.join(rel)).unwrap(), "{rel}");
    }
    assert_eq!(manifest.seed, 11);
    // the model input hashes point at the dataset that produced it
    let rec = &manifest.artifacts["models/propensity.json"];
    assert_eq!(
        rec.inputs["datasets/propensity.jsonl"],
        manifest.artifacts["datasets/propensity.jsonl"].sha256
    );
    // no partial files are left behind
    let partial = walk(&out)
        .into_iter()
        .find(|p| p.to_string_lossy().ends_with(".partial"));
    assert!(partial.is_none(), "{partial:?}");
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn rerun_is_a_no_op_and_overwrite_needs_force() {
    let r = Run::new();
    r.ok(&["pipeline"]);
    let before = fs::read(r.out().join("manifest.json")).unwrap();
    let stdout = r.ok(&["pipeline"]);
    assert!(
        stdout.lines().all(|l| l.ends_with("up to date")),
        "{stdout}"
    );
    assert_eq!(fs::read(r.out().join("manifest.json")).unwrap(), before);

    let err = r.fails(&["--seed", "12", "simulate"]);
    assert!(err.contains("--force"), "{err}");
    r.ok(&["--seed", "12", "--force", "simulate"]);
    // downstream steps now see a changed input
    let err = r.fails(&["--seed", "12", "estimate"]);
    assert!(err.contains("--force"), "{err}");
}

#[test]
fn model_file_round_trip_predicts_identically() {
    let r = Run::new();
    r.ok(&["simulate"]);
    r.ok(&["prepare", "--mode", "control"]);
    r.ok(&["train", "--mode", "control"]);
    let model = read_model(&r.out().join("models/control.json")).unwrap();
    let back = model_from_json(&model_to_json(&model).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let x: Vec<f64> = (0..model.feature_dimension)
            .map(|_| rng.random_range(-1.0..2.0))
            .collect();
        assert_eq!(
            model.predict(&x).unwrap().to_bits(),
            back.predict(&x).unwrap().to_bits()
        );
    }
}

#[test]
fn damaged_model_fails_evaluation() {
    let r = Run::new();
    r.ok(&["pipeline"]);
    let path = r.out().join("models/fixed-0.8.json");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(
        &path,
        text.replace("\"format_version\":1", "\"format_version\":9"),
    )
    .unwrap();
    let err = r.fails(&["--force", "evaluate"]);
    assert!(
        err.contains("[evalab]") && err.contains("unsupported model format version 9"),
        "{err}"
    );
    fs::write(&path, &text[..text.len() / 3]).unwrap();
    let err = r.fails(&["--force", "evaluate"]);
    assert!(err.contains("malformed model file"), "{err}");
}

#[test]
fn unknown_session_keys_need_lenient() {
    let r = Run::new();
    r.ok(&["simulate"]);
    let path = r.out().join("sessions/train.jsonl");
    let sessions = read_sessions(&path, 30, false).unwrap();
    assert_eq!(sessions.len(), 600);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(
        &path,
        text.replacen("{\"session_id\"", "{\"browser\":\"x\",\"session_id\"", 1),
    )
    .unwrap();
    let err = r.fails(&["--force", "estimate"]);
    assert!(err.contains("browser") && err.contains("line 1"), "{err}");
    r.ok(&["--force", "--lenient", "estimate"]);

    // lenient reading drops the key, so a rewrite matches the original
    let copy = r.dir.path().join("copy.jsonl");
    let lenient = read_sessions(&path, 30, true).unwrap();
    write_sessions(&copy, lenient.iter().cloned().map(Ok)).unwrap();
    assert_eq!(fs::read_to_string(&copy).unwrap(), text);
    assert_eq!(lenient, sessions);
}

#[test]
fn config_errors_name_the_config() {
    let r = Run::new();
    fs::write(
        &r.config,
        TINY.replace("\"seed\": 11", "\"seed\": 11, \"colour\": 1"),
    )
    .unwrap();
    let err = r.fails(&["simulate"]);
    assert!(
        err.starts_with("error: [config]") && err.contains("colour"),
        "{err}"
    );
    fs::write(&r.config, TINY.replace("\"fixed:0.8\"", "\"fixed:1.5\"")).unwrap();
    assert!(r.fails(&["simulate"]).contains("fixed rate"));
}
