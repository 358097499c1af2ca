//! Runs the `cdnz` binary and checks deterministic reruns.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn cdnz(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdnz"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("cdnz binary runs")
}

pub fn describe(out: &Output) -> String {
    format!(
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

/// A small classification experiment covering every subcommand.
pub const TINY_CONFIG: &str = r#"
seed = 17

[data]
task = "classification"
toy_train = 24
toy_heldout = 8
toy_test = 8
toy_seed = 4

[train]
iterations = 12
decay_every = 6
batch_size = 4

[head]
target = 0.0

[head.schedule]
iterations = 12
batch_size = 4

[cascade]
lambda = 0.25

[cascade.schedule]
iterations = 8
batch_size = 4

[eval]
sigmas = [25.0, 50.0]

[checkpoints]
denoiser = "den/denoiser.ckpt"
head = "head/head.ckpt"
separate = "den/denoiser.ckpt"
joint = "cascade/cascade.ckpt"
"#;

const STEPS: [&[&str]; 6] = [
    &["generate-toy", "--out", "toy"],
    &["train-denoiser", "--out", "den"],
    &["pretrain-head", "--out", "head"],
    &["train-cascade", "--out", "cascade"],
    &["evaluate", "--out", "eval"],
    &["denoise", "den/denoiser.ckpt", "toy/test/img_00000.ppm", "restored.ppm"],
];

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, into: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, into);
            } else {
                into.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut files = BTreeMap::new();
    walk(dir, dir, &mut files);
    files
}

/// Runs the whole tiny pipeline in `work` with `--deterministic`.
pub fn run_pipeline(work: &Path) -> Result<(), String> {
    std::fs::create_dir_all(work).map_err(|e| e.to_string())?;
    std::fs::write(work.join("exp.toml"), TINY_CONFIG).map_err(|e| e.to_string())?;
    for step in STEPS {
        let mut args: Vec<&str> = step.to_vec();
        if step[0] != "denoise" {
            args.extend(["--config", "exp.toml"]);
        }
        args.push("--deterministic");
        let out = cdnz(work, &args);
        if !out.status.success() {
            return Err(format!("{}: {}", step[0], describe(&out)));
        }
    }
    Ok(())
}

/// Runs the pipeline twice in the same directory and compares every output byte.
pub fn reproducible(root: &Path) -> Result<usize, String> {
    let work = root.join("work");
    run_pipeline(&work)?;
    let first = snapshot(&work);
    std::fs::remove_dir_all(&work).map_err(|e| e.to_string())?;
    run_pipeline(&work)?;
    let second = snapshot(&work);
    if first.keys().ne(second.keys()) {
        return Err("the two runs wrote different files".into());
    }
    for (path, bytes) in &first {
        if second[path] != *bytes {
            return Err(format!("{} differs between runs", path.display()));
        }
    }
    for needed in [
        "den/denoiser.ckpt",
        "head/head.ckpt",
        "cascade/cascade.ckpt",
        "eval/report.tsv",
    ] {
        if !first.contains_key(Path::new(needed)) {
            return Err(format!("{needed} was not written"));
        }
    }
    Ok(first.len())
}
