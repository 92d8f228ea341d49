#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hooligan::features::synthetic::{write_harmonic_corpus, CorpusConfig};

pub fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hooligan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// A model small enough to train for hundreds of steps in seconds.
pub const TINY_CONFIG: &str = "\
hop=32
n_mels=8
k_harmonics=4
encoder_channels=8
wavenet.stacks=1
wavenet.layers=3
wavenet.channels=4
wavenet.kernel=3
train.batch=2
train.crop=2048
train.pretrain_steps=200
train.total_steps=400
train.checkpoint_every=100
train.lr_gen=0.001
train.lr_disc=0.001
train.seed=3
loss.fft_sizes=512,256,128,64
disc.channels=2,4,4,4,4
";

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Writes a small harmonic corpus and prepares it with `config`; returns the
/// manifest path.
pub fn prepared_corpus(dir: &Path, config: &Path, utterances: usize, seconds: f64) -> PathBuf {
    let wavs = dir.join("wavs");
    let cfg = CorpusConfig {
        utterances,
        seconds_each: seconds,
        seed: 21,
        ..CorpusConfig::default()
    };
    write_harmonic_corpus(&wavs, &cfg).unwrap();
    let data = dir.join("data");
    let out = run(&["prepare", "--wav-dir", s(&wavs), "--out-dir", s(&data), "--config", s(config)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    data.join("manifest.tsv")
}
