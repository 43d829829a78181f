//! Shared helpers for the CLI test targets.
#![allow(dead_code)]

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvwin::music::{click_track, AudioBuffer};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_mvwin"))
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn run(args: &[String]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn mvwin")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn write_wav(path: &Path, audio: &AudioBuffer) {
    audio.write_wav(BufWriter::new(File::create(path).unwrap())).unwrap();
}

/// Writes the generated audio inputs used by the golden cases into `dir`.
pub fn write_audio_inputs(dir: &Path) {
    write_wav(&dir.join("click60.wav"), &click_track(60.0, 8000, 120.0));
    write_wav(&dir.join("click8.wav"), &click_track(8.0, 8000, 120.0));
}

/// One CLI invocation whose outputs are pinned by golden files.
pub struct GoldenCase {
    pub name: &'static str,
    pub args: Vec<String>,
    pub outputs: &'static [&'static str],
}

fn s(x: impl AsRef<std::ffi::OsStr>) -> String {
    x.as_ref().to_string_lossy().into_owned()
}

pub fn golden_cases(inputs: &Path) -> Vec<GoldenCase> {
    vec![
        GoldenCase {
            name: "plan_fixture",
            args: vec![s("plan")],
            outputs: &["schedule.json"],
        },
        GoldenCase {
            name: "demo_fixture",
            args: vec![s("demo"), s("--steps"), s("32"), s("--seed"), s("3")],
            outputs: &["report.json", "latents.bin"],
        },
        GoldenCase {
            name: "demo_overwrite",
            args: vec![s("demo"), s("--steps"), s("8"), s("--seed"), s("3"), s("--fusion"), s("overwrite")],
            outputs: &["report.json", "latents.bin"],
        },
        GoldenCase {
            name: "camera_2frame",
            args: vec![
                s("camera"),
                s(fixture("trajectory_2frame.jsonl")),
                s("--config"),
                s(fixture("camera_config.json")),
            ],
            outputs: &["camera.json", "pluecker.bin", "embedding.bin"],
        },
        GoldenCase {
            name: "dpo",
            args: vec![s("dpo"), s(fixture("scores.json")), s("--losses"), s(fixture("losses.json"))],
            outputs: &["dpo.json"],
        },
        GoldenCase {
            name: "segment_click",
            args: vec![s("segment"), s(inputs.join("click60.wav")), s("--bpm"), s("120")],
            outputs: &["segments.json"],
        },
        GoldenCase {
            name: "pipeline_click",
            args: vec![s("pipeline"), s(inputs.join("click8.wav")), s("--bpm"), s("120"), s("--seed"), s("11")],
            outputs: &["pipeline.json", "latents_000.bin", "latents_001.bin", "latents_002.bin", "latents_003.bin"],
        },
    ]
}

fn run_into(case: &GoldenCase, out: &Path) -> Result<(), String> {
    let mut args = case.args.clone();
    args.extend([s("--out"), s(out)]);
    let o = run(&args);
    if !o.status.success() {
        return Err(format!("{}: exit {:?}: {}", case.name, o.status.code(), stderr(&o)));
    }
    Ok(())
}

/// Runs every golden case twice, requires byte-identical outputs across the
/// runs and against `tests/golden/<case>/`. With `MVWIN_BLESS=1` the golden
/// files are rewritten instead of compared.
pub fn check_golden_cases() -> Result<usize, String> {
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let inputs = scratch.path().join("inputs");
    fs::create_dir_all(&inputs).unwrap();
    write_audio_inputs(&inputs);
    let bless = std::env::var_os("MVWIN_BLESS").is_some_and(|v| v == "1");
    let cases = golden_cases(&inputs);
    for case in &cases {
        let (a, b) = (scratch.path().join(case.name).join("a"), scratch.path().join(case.name).join("b"));
        run_into(case, &a)?;
        run_into(case, &b)?;
        let golden = golden_dir().join(case.name);
        for file in case.outputs {
            let first = fs::read(a.join(file)).map_err(|e| format!("{}: {file}: {e}", case.name))?;
            let second = fs::read(b.join(file)).map_err(|e| format!("{}: {file}: {e}", case.name))?;
            if first != second {
                return Err(format!("{}: {file} differs between two runs", case.name));
            }
            let pinned = golden.join(file);
            if bless {
                fs::create_dir_all(&golden).unwrap();
                fs::write(&pinned, &first).unwrap();
                continue;
            }
            let want = fs::read(&pinned).map_err(|e| format!("missing golden {}: {e}", pinned.display()))?;
            if want != first {
                return Err(format!("{}: {file} does not match {}", case.name, pinned.display()));
            }
        }
    }
    Ok(cases.len())
}
