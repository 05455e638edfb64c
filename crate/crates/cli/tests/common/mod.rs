#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use halprobe::store::write_activation_path;
use halprobe::synthetic::{planted_fixture, FixtureSpec};

pub struct Fixture {
    pub activations: PathBuf,
    pub manifest: PathBuf,
}

/// Writes a planted fixture into `dir`.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> Fixture {
    let (records, manifest) = planted_fixture(spec).unwrap();
    let activations = dir.join("acts.actv");
    let manifest_path = dir.join("manifest.jsonl");
    write_activation_path(&records, spec.hidden_dim, &activations).unwrap();
    manifest.write_path(&manifest_path).unwrap();
    Fixture {
        activations,
        manifest: manifest_path,
    }
}

pub fn halprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_halprobe"))
        .args(args)
        .env_remove("HALPROBE_THREADS")
        .output()
        .expect("the halprobe binary runs")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "halprobe failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}
