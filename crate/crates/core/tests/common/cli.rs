//! Runs every CLI command twice from separate directories and compares
//! what they write byte for byte.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use polarbev::config::RunConfig;

use super::Check;

pub fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_polarbev")
}

/// Narrow model, two scenes and a few training steps.
pub fn small_config() -> RunConfig {
    let mut c = RunConfig::reference();
    c.train.steps = 3;
    c.synth.n_scenes = 2;
    c.stream.n_sectors = vec![1, 2];
    c.resolution.scales = vec![1, 2];
    c
}

pub fn run_in(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(binary()).args(args).current_dir(dir).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

pub const SCENE: &str = "scenes/scene_000007.json";

pub const COMMANDS: [&[&str]; 8] = [
    &["synth", "--config", "config.json", "--seed", "7", "--out", "scenes"],
    &["train", "--config", "config.json", "--out", "ckpt", "scenes"],
    &["infer", "--ckpt", "ckpt", "--out", "dets.jsonl", SCENE],
    &["stream", "--ckpt", "ckpt", "--sectors", "1,2", "--out", "stream.csv", SCENE],
    &["resolution", "--ckpt", "ckpt", "--out", "resolution.csv", "scenes"],
    &["resolution", "--config", "config.json", "--scales", "1,3", "--out", "density.csv", "scenes"],
    &["eval", "--config", "config.json", "--dets", "dets.jsonl", "--scene", SCENE, "--out", "metrics.json"],
    &["ablate", "--config", "config.json", "--out", "ablate.csv", SCENE],
];

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Runs the whole command sequence in a fresh directory.
pub fn run_all(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    std::fs::write(dir.join("config.json"), small_config().to_json()).map_err(|e| e.to_string())?;
    for args in COMMANDS {
        run_in(dir, args)?;
    }
    Ok(snapshot(dir))
}

pub fn check_reproducible() -> Check {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_all(a.path())?;
    let second = run_all(b.path())?;
    if first.keys().ne(second.keys()) {
        return Err(format!("file sets differ: {:?} vs {:?}", first.keys(), second.keys()));
    }
    for (name, bytes) in &first {
        if second[name] != *bytes {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok(format!("{} commands, {} output files byte-identical", COMMANDS.len(), first.len()))
}
