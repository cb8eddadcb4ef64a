use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "d_model=8",
    "heads=2",
    "layers=1",
    "ffn_dim=16",
    "head_hidden=16",
    "epochs=1",
    "tsne_iterations=250",
    "tsne_perplexity=10",
    "permutations=99",
    "eps_steps=6",
    "min_pts=3,5",
];

fn discourse(out: &Path, sets: &[String], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_discourse"));
    cmd.arg("--out-dir").arg(out);
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args).env_remove("DISCOURSE_OUT").output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small synthetic corpus plus the overrides pointing at it.
fn setup(root: &Path) -> Vec<String> {
    let data = root.join("data");
    let o = discourse(&root.join("synth-out"), &[], &["synth", "dialogues", "--dir", data.to_str().unwrap(), "--size", "24"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut sets: Vec<String> = SMALL.iter().map(|s| s.to_string()).collect();
    sets.push(format!("corpus={}", data.join("dialogues.jsonl").display()));
    sets.push(format!("function_labels={}", data.join("function_labels.csv").display()));
    sets
}

fn read_json(p: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = discourse(dir.path(), &["no_such_key=1".into()], &["keys"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_key"));
}

#[test]
fn bad_value_and_unknown_subcommand_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(discourse(dir.path(), &["epochs=many".into()], &["keys"]).status.code(), Some(2));
    assert_eq!(discourse(dir.path(), &[], &["frobnicate"]).status.code(), Some(2));
    assert_eq!(discourse(dir.path(), &[], &["cluster", "--task", "ppred", "--archive", "x.emb"]).status.code(), Some(2));
}

#[test]
fn keys_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = discourse(dir.path(), &[], &["keys"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("tsne_perplexity"));
    assert!(text.contains("max_noise_fraction"));
}

#[test]
fn missing_corpus_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = discourse(dir.path(), &[], &["ingest", "--corpus", "/nonexistent/corpus.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/corpus.jsonl"), "{}", stderr(&o));
}

#[test]
fn stage_order_is_enforced_by_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let sets = setup(dir.path());
    let o = discourse(&dir.path().join("out"), &sets, &["train", "--task", "ppred"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing input"), "{}", stderr(&o));
}

#[test]
fn manifests_version_only_on_change() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = setup(dir.path());
    let out = dir.path().join("out");
    for _ in 0..2 {
        assert!(discourse(&out, &sets, &["ingest"]).status.success());
    }
    assert!(out.join("manifests/ingest.json").exists());
    assert!(!out.join("manifests/ingest.1.json").exists());
    sets.push("min_frequency=2".into());
    assert!(discourse(&out, &sets, &["ingest"]).status.success());
    assert!(out.join("manifests/ingest.1.json").exists());
    let m = read_json(out.join("manifests/ingest.1.json"));
    assert_eq!(m["config"]["min_frequency"], "2");
    assert!(m["inputs"].as_object().unwrap().values().all(|d| d.as_str().unwrap().len() == 64));
}

#[test]
fn clustering_an_external_archive() {
    let dir = tempfile::tempdir().unwrap();
    let sets = setup(dir.path());
    let out = dir.path().join("out");
    for args in [
        &["ingest"][..],
        &["make-tasks"],
        &["train", "--task", "ppred"],
        &["embed", "--task", "ppred"],
    ] {
        let o = discourse(&out, &sets, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let emb = out.join("embeddings/ppred.emb");
    let o = discourse(&out, &sets, &["lir", "--task", "ppred", "--archive", emb.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let reps = out.join("lir/ppred/representations.emb");
    let manifest = out.join("lir/ppred/manifest.json");
    assert!(reps.exists() && manifest.exists());

    let o = discourse(
        &out,
        &sets,
        &[
            "cluster",
            "--task",
            "ppred",
            "--method",
            "lir-word",
            "--scope",
            "all",
            "--archive",
            reps.to_str().unwrap(),
            "--lir-manifest",
            manifest.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let base = out.join("cluster/ppred/lir-word/all");
    for f in ["points.csv", "particles.svg", "sweep.json"] {
        assert!(base.join(f).exists(), "{f}");
    }
    let points = std::fs::read_to_string(base.join("points.csv")).unwrap();
    assert!(points.starts_with("id,x,y,particle"));
    let m = read_json(out.join("metrics/cluster-ppred-lir-word.json"));
    assert_eq!(m["scopes"]["all"]["silhouette_space"], "tsne-2d");

    // A manifest that does not describe the archive is rejected.
    std::fs::write(dir.path().join("bad.json"), "{}").unwrap();
    let o = discourse(
        &out,
        &sets,
        &[
            "cluster",
            "--task",
            "ppred",
            "--archive",
            reps.to_str().unwrap(),
            "--lir-manifest",
            dir.path().join("bad.json").to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}
