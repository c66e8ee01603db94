use std::path::{Path, PathBuf};
use std::process::Command;

use emodarts_cli::{run, Manifest, EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
use emodarts_core::features::Dataset;

const TINY: &str = "[search]\ncnn_cells = 2\nseq_cells = 1\ncnn_nodes = 2\nseq_nodes = 2\nchannels = 4\nhidden = 8\nepochs = 1\n\n[derived]\nepochs = 1\n";

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("emodarts").chain(args.iter().copied()))
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(w.path("tiny.toml"), TINY).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn gen(&self, name: &str, speakers: &str) {
        let code = cli(&["gen-data", "--speakers", speakers, "--per-class", "2", "--dims", "8", "--seed", "1", "--out", &self.s(name)]);
        assert_eq!(code, EXIT_OK);
    }
}

#[test]
fn gen_data_defaults_are_deterministic() {
    let w = Work::new();
    assert_eq!(cli(&["gen-data", "--seed", "5", "--out", &w.s("a.edset")]), EXIT_OK);
    assert_eq!(cli(&["gen-data", "--seed", "5", "--out", &w.s("b.edset")]), EXIT_OK);
    assert_eq!(std::fs::read(w.path("a.edset")).unwrap(), std::fs::read(w.path("b.edset")).unwrap());

    let ds = Dataset::load(&w.path("a.edset")).unwrap();
    assert_eq!(ds.maps.len(), 10 * 4 * 10);
    assert_eq!(ds.dims(), Some((32, 32)));
    let m = Manifest::load(&w.path("a.edset.manifest.json")).unwrap();
    assert_eq!((m.command.as_str(), m.seed, m.status.as_str()), ("gen-data", 5, "ok"));
}

#[test]
fn too_few_speakers_for_the_folds() {
    let w = Work::new();
    w.gen("d.edset", "4");
    let code = cli(&[
        "search", "--data", &w.s("d.edset"), "--config", &w.s("tiny.toml"), "--seed", "1", "--out-genome", &w.s("g.json"), "--out-history", &w.s("h.csv"),
    ]);
    assert_eq!(code, EXIT_USAGE);
    assert!(!w.path("g.json").exists());
}

#[test]
fn missing_inputs_are_io_errors() {
    let w = Work::new();
    let code = cli(&["baseline", "--kind", "cnn", "--data", &w.s("absent.edset"), "--out-metrics", &w.s("m.json")]);
    assert_eq!(code, EXIT_IO);
    assert_eq!(cli(&["baseline", "--kind", "resnet", "--data", &w.s("absent.edset"), "--out-metrics", &w.s("m.json")]), EXIT_USAGE);
}

fn write_wav(path: &Path, seconds: f64, rate: u32) {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for i in 0..(seconds * f64::from(rate)) as usize {
        let v = (i as f64 * 0.03).sin() * 8000.0;
        w.write_sample(v as i16).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn features_extract_skip_and_refuse() {
    let w = Work::new();
    let wavs = w.path("wavs");
    std::fs::create_dir(&wavs).unwrap();
    write_wav(&wavs.join("a.wav"), 8.0, 16_000);
    std::fs::write(wavs.join("broken.wav"), b"RIFF????WAVEjunk").unwrap();
    std::fs::write(w.path("labels.csv"), "path,class,speaker\na.wav,happiness,s1\nbroken.wav,0,s2\n").unwrap();
    let code = cli(&["features", "--wav-dir", &wavs.to_string_lossy(), "--labels", &w.s("labels.csv"), "--seed", "0", "--out", &w.s("f.edset")]);
    assert_eq!(code, EXIT_OK);
    let ds = Dataset::load(&w.path("f.edset")).unwrap();
    assert_eq!(ds.maps.len(), 1);
    assert_eq!(ds.dims(), Some((128, 128)));
    assert_eq!(ds.maps[0].speaker, "s1");
    let m = Manifest::load(&w.path("f.edset.manifest.json")).unwrap();
    assert_eq!(m.details["skipped"], 1);

    let empty = w.path("empty");
    std::fs::create_dir(&empty).unwrap();
    let code = cli(&["features", "--wav-dir", &empty.to_string_lossy(), "--labels", &w.s("labels.csv"), "--out", &w.s("e.edset")]);
    assert_eq!(code, EXIT_IO);
}

#[test]
fn search_variants() {
    let w = Work::new();
    w.gen("d.edset", "5");
    let base = |g: &str, h: &str| {
        [
            "search", "--data", &w.s("d.edset"), "--config", &w.s("tiny.toml"), "--seed", "2", "--out-genome", &w.s(g), "--out-history", &w.s(h),
        ]
        .map(String::from)
        .to_vec()
    };
    let mut a = base("g0.json", "h0.csv");
    a.extend(["--epochs", "0"].map(String::from));
    assert_eq!(cli(&a.iter().map(String::as_str).collect::<Vec<_>>()), EXIT_OK);
    let history = std::fs::read_to_string(w.path("h0.csv")).unwrap();
    assert_eq!(history.lines().count(), 1);

    let mut b = base("g1.json", "h1.csv");
    b.extend(["--scope", "RNN Only"].map(String::from));
    assert_eq!(cli(&b.iter().map(String::as_str).collect::<Vec<_>>()), EXIT_OK);
    let g = emodarts_core::genome::deserialize(&std::fs::read_to_string(w.path("g1.json")).unwrap()).unwrap();
    assert!(g.seqnn.iter().all(|e| e.op_name.starts_with("rnn_") || e.op_name == "skip_connect"));

    assert_eq!(cli(&["export-dot", "--genome", &w.s("g1.json"), "--out-dir", &w.s("dots")]), EXIT_OK);
    for f in ["cnn_normal.dot", "cnn_reduce.dot", "seqnn.dot"] {
        assert!(std::fs::read_to_string(w.path("dots").join(f)).unwrap().starts_with("digraph"));
    }
}

#[test]
fn numeric_fault_flushes_history() {
    let w = Work::new();
    w.gen("d.edset", "5");
    std::fs::write(w.path("hot.toml"), format!("{TINY}\n").replace("epochs = 1\n\n[derived]", "epochs = 2\nlr_max = 1e300\n\n[derived]")).unwrap();
    let code = cli(&[
        "search", "--data", &w.s("d.edset"), "--config", &w.s("hot.toml"), "--seed", "2", "--out-genome", &w.s("g.json"), "--out-history", &w.s("h.csv"),
    ]);
    assert_eq!(code, EXIT_NUMERIC);
    assert!(w.path("h.csv").exists());
    assert!(!w.path("g.json").exists());
    let m = Manifest::load(&w.path("h.csv.manifest.json")).unwrap();
    assert_eq!(m.status, "numeric_fault");
}

#[test]
fn study_writes_a_row_per_scope_and_fold() {
    let w = Work::new();
    w.gen("d.edset", "5");
    let code = cli(&[
        "study", "--data", &w.s("d.edset"), "--config", &w.s("tiny.toml"), "--folds", "2", "--scopes", "RNN Only;LSTM Only", "--seed", "3", "--out-results", &w.s("r.csv"),
        "--out-scatter", &w.s("s.csv"),
    ]);
    assert_eq!(code, EXIT_OK);
    let results = std::fs::read_to_string(w.path("r.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 2 * 2);
    let scatter = std::fs::read_to_string(w.path("s.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 1 + 2);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let w = Work::new();
    let bin = env!("CARGO_BIN_EXE_emodarts");
    let gen = |out: &str, env: Option<&str>| {
        let mut c = Command::new(bin);
        c.args(["gen-data", "--speakers", "2", "--per-class", "1", "--dims", "4", "--out", out]);
        c.env_remove("EMODARTS_SEED");
        if let Some(v) = env {
            c.env("EMODARTS_SEED", v);
        }
        c.status().unwrap().code()
    };
    assert_eq!(gen(&w.s("e.edset"), Some("17")), Some(EXIT_OK));
    assert_eq!(Manifest::load(&w.path("e.edset.manifest.json")).unwrap().seed, 17);
    assert_eq!(gen(&w.s("z.edset"), None), Some(EXIT_OK));
    assert_eq!(Manifest::load(&w.path("z.edset.manifest.json")).unwrap().seed, 0);
    assert_eq!(gen(&w.s("x.edset"), Some("minus one")), Some(EXIT_USAGE));
}
