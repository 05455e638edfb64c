mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use halprobe::store::Manifest;
use halprobe::synthetic::FixtureSpec;
use serde_json::Value;

use common::{halprobe, s, stdout_json, write_fixture, Fixture};

fn small_fixture(dir: &Path) -> Fixture {
    write_fixture(
        dir,
        &FixtureSpec {
            records: 200,
            hidden_dim: 16,
            signal_dims: 4,
            shift: 1.5,
            seed: 5,
            ..FixtureSpec::default()
        },
    )
}

fn labeled(dir: &Path, fx: &Fixture) -> std::path::PathBuf {
    let out = dir.join("labeled.jsonl");
    stdout_json(&halprobe(&["label", "--manifest", s(&fx.manifest), "--grouping", "global", "--out", s(&out)]));
    out
}

fn train_small(dir: &Path, fx: &Fixture, manifest: &Path, extra: &[&str]) -> (std::path::PathBuf, Value) {
    let probe = dir.join("probe.bin");
    let mut args = vec![
        "train", "--activations", s(&fx.activations), "--manifest", s(manifest), "--layer", "0",
        "--hidden", "32", "--epochs", "3", "--lr", "1e-3", "--out", s(&probe),
    ];
    args.extend_from_slice(extra);
    let report = stdout_json(&halprobe(&args));
    (probe, report)
}

fn code(out: &std::process::Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn help_lists_every_flag() {
    let expected: &[(&str, &[&str])] = &[
        ("label", &["--manifest", "--grouping", "--out"]),
        (
            "train",
            &[
                "--activations", "--manifest", "--layer", "--filter", "--epochs", "--batch", "--lr", "--seed",
                "--backbone", "--mode", "--target-metric", "--target-form", "--out",
            ],
        ),
        ("eval", &["--activations", "--manifest", "--probe", "--filter", "--out"]),
        ("sweep-layers", &["--activations", "--manifest", "--layers", "--out"]),
        ("select-neurons", &["--activations", "--manifest", "--layer", "--k", "--out"]),
        ("ppl-baseline", &["--manifest", "--out"]),
        ("attribute", &["--scores", "--format", "--out"]),
        ("rates", &["--manifest", "--out"]),
    ];
    for (sub, flags) in expected {
        let out = halprobe(&[sub, "--help"]);
        assert_eq!(code(&out), 0);
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in *flags {
            assert!(text.contains(flag), "{sub} --help lacks {flag}");
        }
        assert!(text.contains("--no-timestamps"));
    }
    assert_eq!(code(&halprobe(&["--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&halprobe(&[])), 1);
    assert_eq!(code(&halprobe(&["frobnicate"])), 1);
    assert_eq!(code(&halprobe(&["rates", "--manifest", "m.jsonl"])), 1);
    assert_eq!(code(&halprobe(&["rates", "--manifest", "m", "--out", "o", "--bogus"])), 1);
    let bad_filter = halprobe(&["rates", "--manifest", "m", "--out", "o", "--filter", "colour=red"]);
    assert_eq!(code(&bad_filter), 1);
    assert!(stderr(&bad_filter).contains("colour"));
}

#[test]
fn regression_without_metric_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let fx = small_fixture(dir.path());
    let out = halprobe(&[
        "train", "--activations", s(&fx.activations), "--manifest", s(&fx.manifest), "--layer", "0",
        "--mode", "reg", "--out", s(&dir.path().join("p.bin")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--target-metric"));
    assert!(!dir.path().join("p.bin").exists());

    let contradictory = halprobe(&[
        "train", "--activations", s(&fx.activations), "--manifest", s(&fx.manifest), "--layer", "0",
        "--mode", "cls", "--target-metric", "rouge_l", "--out", s(&dir.path().join("p.bin")),
    ]);
    assert_eq!(code(&contradictory), 1);
}

#[test]
fn eval_dimension_mismatch_names_both_dims() {
    let dir = tempfile::tempdir().unwrap();
    let fx = small_fixture(dir.path());
    let manifest = labeled(dir.path(), &fx);
    let (probe, _) = train_small(dir.path(), &fx, &manifest, &[]);

    let other = dir.path().join("other");
    fs::create_dir(&other).unwrap();
    let wide = write_fixture(
        &other,
        &FixtureSpec {
            records: 200,
            hidden_dim: 24,
            signal_dims: 4,
            seed: 5,
            ..FixtureSpec::default()
        },
    );
    let out = halprobe(&[
        "eval", "--activations", s(&wide.activations), "--manifest", s(&manifest), "--probe", s(&probe),
        "--out", s(&dir.path().join("r.json")),
    ]);
    assert_eq!(code(&out), 1);
    let msg = stderr(&out);
    assert!(msg.contains("16") && msg.contains("24"), "{msg}");
}

#[test]
fn malformed_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let fx = small_fixture(dir.path());
    let junk = dir.path().join("junk.actv");
    fs::write(&junk, b"not an activation file at all").unwrap();
    let out = halprobe(&[
        "select-neurons", "--activations", s(&junk), "--manifest", s(&fx.manifest), "--layer", "0",
        "--out", s(&dir.path().join("n.csv")),
    ]);
    assert_eq!(code(&out), 2);

    let bytes = fs::read(&fx.activations).unwrap();
    fs::write(&junk, &bytes[..bytes.len() - 3]).unwrap();
    let out = halprobe(&[
        "select-neurons", "--activations", s(&junk), "--manifest", s(&fx.manifest), "--layer", "0",
        "--out", s(&dir.path().join("n.csv")),
    ]);
    assert_eq!(code(&out), 2);

    let bad_manifest = dir.path().join("bad.jsonl");
    fs::write(&bad_manifest, "{\"record_id\": 0,\n").unwrap();
    assert_eq!(code(&halprobe(&["rates", "--manifest", s(&bad_manifest), "--out", "o.json"])), 2);
    assert_eq!(code(&halprobe(&["rates", "--manifest", s(&dir.path().join("missing.jsonl")), "--out", "o.json"])), 2);
}

#[test]
fn label_train_eval_on_planted_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_fixture(
        dir.path(),
        &FixtureSpec {
            records: 2500,
            seed: 3,
            ..FixtureSpec::default()
        },
    );
    let manifest = dir.path().join("labeled.jsonl");
    let label = stdout_json(&halprobe(&["label", "--manifest", s(&fx.manifest), "--out", s(&manifest)]));
    assert_eq!(label["subcommand"], "label");
    assert_eq!(label["details"]["totals"]["discarded"], 0);
    assert_eq!(label["details"]["splits"]["train"], 2000);
    let m = Manifest::read_path(&manifest).unwrap();
    assert!(m.entries.iter().all(|e| e.label.is_some() && e.split.is_some()));

    let probe = dir.path().join("probe.bin");
    let history = dir.path().join("history.json");
    let train = stdout_json(&halprobe(&[
        "train", "--activations", s(&fx.activations), "--manifest", s(&manifest), "--layer", "0",
        "--out", s(&probe), "--history", s(&history),
    ]));
    assert_eq!(train["config"]["epochs"], 10);
    assert_eq!(train["config"]["batch"], 128);
    assert_eq!(train["config"]["lr"], 1e-5);
    assert_eq!(train["config"]["hidden"], 11008);
    assert_eq!(train["outputs"].as_array().unwrap().len(), 2);
    assert!(train["timing"]["elapsed_seconds"].as_f64().unwrap() > 0.0);
    let epochs: Value = serde_json::from_slice(&fs::read(&history).unwrap()).unwrap();
    assert_eq!(epochs.as_array().unwrap().len(), 10);

    let report = dir.path().join("eval.json");
    let eval = stdout_json(&halprobe(&[
        "eval", "--activations", s(&fx.activations), "--manifest", s(&manifest), "--probe", s(&probe),
        "--out", s(&report),
    ]));
    let acc = eval["reports"]["accuracy"].as_f64().unwrap();
    assert!(acc >= 0.90, "test accuracy {acc}");
    assert_eq!(eval["reports"]["n"], 250);
    assert!(eval["reports"]["per_sample_inference_seconds"].as_f64().unwrap() > 0.0);
}

#[test]
fn no_timestamps_nulls_every_timing() {
    let dir = tempfile::tempdir().unwrap();
    let fx = small_fixture(dir.path());
    let manifest = labeled(dir.path(), &fx);
    let (probe, train) = train_small(dir.path(), &fx, &manifest, &["--no-timestamps"]);
    assert!(train["timing"].is_null());
    for epoch in train["reports"]["history"].as_array().unwrap() {
        assert!(epoch["val_report"]["per_sample_inference_seconds"].is_null());
    }
    let out = dir.path().join("r.json");
    let eval = stdout_json(&halprobe(&[
        "eval", "--no-timestamps", "--activations", s(&fx.activations), "--manifest", s(&manifest),
        "--probe", s(&probe), "--split", "all", "--out", s(&out),
    ]));
    assert!(eval["timing"].is_null());
    let file: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert!(file["per_sample_inference_seconds"].is_null());
    assert_eq!(file["n"], 200);
}

#[test]
fn regression_probe_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_fixture(
        dir.path(),
        &FixtureSpec {
            records: 600,
            hidden_dim: 16,
            signal_dims: 4,
            shift: 1.5,
            seed: 5,
            ..FixtureSpec::default()
        },
    );
    let probe = dir.path().join("probe.bin");
    let report = stdout_json(&halprobe(&[
        "train", "--activations", s(&fx.activations), "--manifest", s(&fx.manifest), "--layer", "0",
        "--hidden", "32", "--epochs", "40", "--batch", "32", "--lr", "1e-3", "--mode", "reg",
        "--target-metric", "rouge_l", "--target-form", "rank", "--out", s(&probe),
    ]));
    assert_eq!(report["details"]["targets"]["kind"], "golden");
    let out = dir.path().join("r.json");
    let base = [
        "eval", "--activations", s(&fx.activations), "--manifest", s(&fx.manifest), "--probe", s(&probe),
        "--out", s(&out),
    ];
    let missing = halprobe(&base);
    assert_eq!(code(&missing), 1);
    assert!(stderr(&missing).contains("--target-metric"));
    let mut args = base.to_vec();
    args.extend(["--target-metric", "rouge_l", "--target-form", "rank"]);
    let eval = stdout_json(&halprobe(&args));
    let rmse = eval["reports"]["rmse"].as_f64().unwrap();
    // The untrained probe outputs 0, which scores about 0.58 on uniform rank
    // targets; the bias-free network cannot shift its output freely, so it
    // only gets part of the way to the 0.14 noise floor.
    assert!(rmse < 0.4, "rmse {rmse}: {eval}");
    let history = report["reports"]["history"].as_array().unwrap();
    assert!(history.last().unwrap()["train_loss"].as_f64() < history[0]["train_loss"].as_f64());
    assert!(eval["reports"]["accuracy"].is_null());
}

#[test]
fn filters_compose() {
    let dir = tempfile::tempdir().unwrap();
    let fx = small_fixture(dir.path());
    let manifest = labeled(dir.path(), &fx);
    let out = dir.path().join("r.json");
    let rates = |filters: &[&str]| {
        let mut args = vec!["rates", "--manifest", s(&manifest), "--out", s(&out)];
        for f in filters {
            args.extend(["--filter", f]);
        }
        stdout_json(&halprobe(&args))
    };
    let all = rates(&[]);
    assert_eq!(all["reports"]["rates"].as_object().unwrap().len(), 2);
    let qa = rates(&["task=qa"]);
    assert_eq!(qa["reports"]["rates"].as_object().unwrap().keys().collect::<Vec<_>>(), ["qa"]);
    let qa_faithful = rates(&["task=qa", "label=1"]);
    assert_eq!(qa_faithful["reports"]["rates"]["qa"], 0.0);
    let none = rates(&["task=qa", "task=summarization"]);
    assert!(none["reports"]["rates"].as_object().unwrap().is_empty());
}

#[test]
fn select_neurons_exports_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let fx = small_fixture(dir.path());
    let manifest = labeled(dir.path(), &fx);
    let csv = dir.path().join("neurons.csv");
    let report = stdout_json(&halprobe(&[
        "select-neurons", "--activations", s(&fx.activations), "--manifest", s(&manifest), "--layer", "0",
        "--k", "4", "--out", s(&csv),
    ]));
    let text = fs::read_to_string(&csv).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("record_id,label,dim_"));
    assert_eq!(text.lines().count(), 201);
    let top: Vec<u64> = report["details"]["top"].as_array().unwrap().iter().map(|t| t["dim"].as_u64().unwrap()).collect();
    assert!(top.iter().filter(|&&d| d < 4).count() >= 3, "{top:?}");

    let json_path = dir.path().join("neurons.json");
    stdout_json(&halprobe(&[
        "select-neurons", "--activations", s(&fx.activations), "--manifest", s(&manifest), "--layer", "0",
        "--k", "4", "--out", s(&json_path),
    ]));
    let doc: Value = serde_json::from_slice(&fs::read(&json_path).unwrap()).unwrap();
    assert_eq!(doc["dims"].as_array().unwrap().len(), 4);
    assert_eq!(doc["rows"].as_array().unwrap().len(), 200);

    let too_many = halprobe(&[
        "select-neurons", "--activations", s(&fx.activations), "--manifest", s(&manifest), "--layer", "0",
        "--k", "17", "--out", s(&csv),
    ]);
    assert_eq!(code(&too_many), 1);
}

#[test]
fn baselines_run_from_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let fx = small_fixture(dir.path());
    let manifest = labeled(dir.path(), &fx);
    let out = dir.path().join("t.json");
    let ppl = stdout_json(&halprobe(&["ppl-baseline", "--manifest", s(&manifest), "--out", s(&out)]));
    let model = &ppl["reports"]["model"];
    assert!(model["threshold"].as_f64().unwrap() > 0.0);
    assert!(model["polarity"].is_string());
    assert_eq!(ppl["details"]["samples"]["test"], 20);

    let replies = dir.path().join("replies.jsonl");
    let m = Manifest::read_path(&manifest).unwrap();
    let lines: Vec<String> = m
        .entries
        .iter()
        .map(|e| {
            let reply = match e.record_id % 3 {
                0 => "Yes.",
                1 => "no",
                _ => "I am not sure",
            };
            serde_json::json!({"record_id": e.record_id, "reply": reply}).to_string()
        })
        .collect();
    fs::write(&replies, lines.join("\n")).unwrap();
    let prompt = stdout_json(&halprobe(&[
        "prompt-baseline", "--manifest", s(&manifest), "--replies", s(&replies), "--split", "all", "--out", s(&out),
    ]));
    assert_eq!(prompt["reports"]["report"]["n"], 200);
    assert_eq!(prompt["reports"]["unparseable"], (0..200).filter(|i| i % 3 == 2).count());

    fs::write(&replies, "{\"record_id\": 1}\n").unwrap();
    let bad = halprobe(&["prompt-baseline", "--manifest", s(&manifest), "--replies", s(&replies), "--out", s(&out)]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("line 1"));
}

#[test]
fn attribute_renders_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("s.jsonl");
    fs::write(
        &scores,
        r#"{"record_id": 4, "tokens": ["Which", "ligament"], "scores": [0.0, 2.0], "reply": "the ligaments", "hallucinated_spans": [[4, 13]]}"#,
    )
    .unwrap();
    let html = dir.path().join("h.html");
    let report = stdout_json(&halprobe(&["attribute", "--scores", s(&scores), "--out", s(&html)]));
    assert_eq!(report["details"]["records"], 1);
    let text = fs::read_to_string(&html).unwrap();
    assert!(text.contains("ligaments</span>"));
    let ansi = dir.path().join("h.txt");
    stdout_json(&halprobe(&["attribute", "--scores", s(&scores), "--format", "ansi", "--out", s(&ansi)]));
    assert_eq!(fs::read_to_string(&ansi).unwrap().matches("\x1b[0m").count(), 2);

    fs::write(&scores, "{\"record_id\": 1, \"tokens\": [\"a\"], \"scores\": []}\n").unwrap();
    let bad = halprobe(&["attribute", "--scores", s(&scores), "--out", s(&html)]);
    assert_ne!(code(&bad), 0);
}

#[test]
fn split_assignment_rules() {
    let dir = tempfile::tempdir().unwrap();
    let fx = small_fixture(dir.path());
    let manifest = labeled(dir.path(), &fx);
    let mut m = Manifest::read_path(&manifest).unwrap();
    m.entries[0].split = None;
    let partial = dir.path().join("partial.jsonl");
    m.write_path(&partial).unwrap();
    let out = halprobe(&[
        "train", "--activations", s(&fx.activations), "--manifest", s(&partial), "--layer", "0",
        "--hidden", "8", "--epochs", "1", "--out", s(&dir.path().join("p.bin")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("split"));

    let relabel = halprobe(&["label", "--manifest", s(&partial), "--out", s(&dir.path().join("x.jsonl"))]);
    assert_eq!(code(&relabel), 1);
}

#[test]
fn unlabeled_manifest_is_rejected_for_classification() {
    let dir = tempfile::tempdir().unwrap();
    let fx = small_fixture(dir.path());
    let out = halprobe(&[
        "train", "--activations", s(&fx.activations), "--manifest", s(&fx.manifest), "--layer", "0",
        "--out", s(&dir.path().join("p.bin")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("halprobe label"));
}

#[test]
fn thread_variable_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let fx = small_fixture(dir.path());
    let out = dir.path().join("r.json");
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_halprobe"))
            .args(["rates", "--manifest", s(&fx.manifest), "--out", s(&out)])
            .env("HALPROBE_THREADS", threads)
            .output()
            .unwrap()
    };
    let zero = run("0");
    assert!(zero.status.success());
    let v: Value = serde_json::from_slice(&zero.stdout).unwrap();
    assert_eq!(v["config"]["HALPROBE_THREADS"], "0");
    assert_eq!(run("many").status.code(), Some(1));
}

#[test]
fn unknown_layer_in_sweep_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let fx = small_fixture(dir.path());
    let manifest = labeled(dir.path(), &fx);
    let out = halprobe(&[
        "sweep-layers", "--activations", s(&fx.activations), "--manifest", s(&manifest), "--layers", "0..=1",
        "--hidden", "8", "--epochs", "1", "--out", s(&dir.path().join("s.json")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("layer 1"));
}
