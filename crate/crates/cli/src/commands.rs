use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use emodarts_core::config::RunConfig;
use emodarts_core::derived::{instantiate, train_derived};
use emodarts_core::features::{load_wav, utterance_features, synth_dataset, Dataset, FeatureMap, MfccConfig, SynthParams, Utterance, CLASS_NAMES};
use emodarts_core::genome::{self, export_dot, Genome};
use emodarts_core::harness::{
    fold_seed, mean_std, run_fold, run_jobs, run_scope_study, scope_by_name, speaker_cv_split, table_scopes, write_results_csv,
    write_scatter_csv, BaselineKind, Fold, RunMode, SplitPlan,
};
use emodarts_core::network::CellType;
use emodarts_core::search::search;
use emodarts_core::train::write_history_csv;
use emodarts_core::{Error, Result};
use serde::Deserialize;
use serde_json::json;

use crate::manifest::{Manifest, Output, Versions};
use crate::{BaselineArgs, Cli, Command, DataArgs, DeriveArgs, ExportDotArgs, FeaturesArgs, GenDataArgs, Invocation, ReplayArgs, SearchArgs, StudyArgs};

pub(crate) fn execute(cmd: Command, inv: Invocation) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a, &inv),
        Command::Features(a) => features(a, &inv),
        Command::Search(a) => search_cmd(a, &inv),
        Command::Derive(a) => derive(a, &inv),
        Command::Baseline(a) => baseline(a, &inv),
        Command::Study(a) => study(a, &inv),
        Command::ExportDot(a) => export(a, &inv),
        Command::Replay(a) => replay(a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

struct Record<'a> {
    command: &'static str,
    config: Option<&'a RunConfig>,
    outputs: Vec<(&'static str, &'a Path)>,
    status: &'static str,
    details: serde_json::Value,
}

/// Writes the manifest beside the first output, or at `at` when given.
fn record(inv: &Invocation, r: Record<'_>, at: Option<PathBuf>) -> Result<()> {
    let path = at.unwrap_or_else(|| Manifest::path_for(r.outputs[0].1));
    let m = Manifest {
        command: r.command.to_string(),
        argv: inv.argv.clone(),
        seed: inv.seed,
        jobs: inv.jobs,
        config: r.config.map(RunConfig::to_text),
        versions: Versions::default(),
        outputs: r
            .outputs
            .iter()
            .map(|(flag, p)| Output {
                flag: flag.to_string(),
                path: p.to_path_buf(),
            })
            .collect(),
        status: r.status.to_string(),
        details: r.details,
    };
    m.save(&path)
}

/// Prefixes I/O failures with the path involved.
fn at_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn load_config(data: &DataArgs, inv: &Invocation) -> Result<RunConfig> {
    if let Some(cfg) = &inv.config {
        return Ok(cfg.clone());
    }
    match &data.config {
        Some(p) => RunConfig::parse(&at_path(p, fs::read_to_string(p).map_err(Error::from))?),
        None => Ok(RunConfig::default()),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let ds = at_path(path, Dataset::load(path))?;
    if ds.maps.is_empty() {
        return Err(Error::Ingestion(format!("{} holds no records", path.display())));
    }
    Ok(ds)
}

fn pick_fold(plan: &SplitPlan, k: usize) -> Result<&Fold> {
    plan.folds
        .get(k)
        .ok_or_else(|| Error::Config(format!("fold {k} out of range for {} folds", plan.folds.len())))
}

fn subset<'a>(maps: &'a [FeatureMap], idx: &[usize]) -> Vec<&'a FeatureMap> {
    idx.iter().map(|&i| &maps[i]).collect()
}

fn gen_data(a: GenDataArgs, inv: &Invocation) -> Result<()> {
    if a.speakers == 0 || a.per_class == 0 {
        return Err(Error::Config("--speakers and --per-class must be at least 1".into()));
    }
    let p = SynthParams {
        speakers: a.speakers,
        per_class: a.per_class,
        sigma: a.sigma,
        rows: a.dims.0,
        cols: a.dims.1,
        classes: a.classes,
    };
    let maps = synth_dataset(&p, inv.seed)?;
    let ds = Dataset {
        maps,
        class_names: CLASS_NAMES[..a.classes].iter().map(|s| s.to_string()).collect(),
        seed: Some(inv.seed),
        generator: Some(serde_json::to_value(&p).map_err(|e| Error::Contract(e.to_string()))?),
    };
    ds.save(&a.out)?;
    record(
        inv,
        Record {
            command: "gen-data",
            config: None,
            outputs: vec![("--out", &a.out)],
            status: "ok",
            details: json!({ "records": ds.maps.len(), "generator": p }),
        },
        None,
    )
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    path: String,
    class: String,
    speaker: String,
}

fn class_index(s: &str) -> Option<usize> {
    CLASS_NAMES
        .iter()
        .position(|c| c.eq_ignore_ascii_case(s.trim()))
        .or_else(|| s.trim().parse().ok().filter(|&i: &usize| i < CLASS_NAMES.len()))
}

fn features(a: FeaturesArgs, inv: &Invocation) -> Result<()> {
    let cfg = MfccConfig::default();
    let is_wav = |p: &Path| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    let on_disk: BTreeSet<PathBuf> = at_path(&a.wav_dir, fs::read_dir(&a.wav_dir).map_err(Error::from))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_wav(p))
        .collect();
    if on_disk.is_empty() {
        return Err(Error::Ingestion(format!("no .wav files in {}", a.wav_dir.display())));
    }
    let opened = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&a.labels).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            field: "labels".into(),
            message: format!("{other:?}"),
        },
    });
    let mut reader = at_path(&a.labels, opened)?;
    let mut rows = Vec::new();
    for (line, row) in reader.deserialize::<LabelRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            field: "labels".into(),
            message: format!("row {}: {e}", line + 1),
        })?;
        let label = class_index(&row.class).ok_or_else(|| Error::Parse {
            field: "labels".into(),
            message: format!("row {}: unknown class `{}`", line + 1, row.class),
        })?;
        rows.push((a.wav_dir.join(&row.path), row, label));
    }
    let listed: BTreeSet<&PathBuf> = rows.iter().map(|(p, _, _)| p).collect();
    let unlabelled: Vec<String> = on_disk
        .iter()
        .filter(|p| !listed.contains(p))
        .map(|p| p.display().to_string())
        .collect();
    for p in &unlabelled {
        log::warn!("{p} has no entry in the labels file; skipped");
    }

    let outcomes = run_jobs(inv.jobs, rows, |(path, row, label)| {
        let extracted = load_wav(&path, cfg.sample_rate).and_then(|(samples, _)| {
            utterance_features(
                &Utterance {
                    samples,
                    sample_rate: cfg.sample_rate,
                    label,
                    speaker: row.speaker.clone(),
                },
                &cfg,
            )
        });
        (row.path, extracted)
    });
    let mut maps = Vec::new();
    let mut skipped = Vec::new();
    for (name, r) in outcomes {
        match r {
            Ok(m) => maps.push(m),
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                skipped.push(json!({ "path": name, "reason": e.to_string() }));
            }
        }
    }
    if maps.is_empty() {
        return Err(Error::Ingestion("no readable labelled wav files".into()));
    }
    let ds = Dataset {
        maps,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        seed: None,
        generator: None,
    };
    ds.save(&a.out)?;
    record(
        inv,
        Record {
            command: "features",
            config: None,
            outputs: vec![("--out", &a.out)],
            status: "ok",
            details: json!({
                "records": ds.maps.len(),
                "skipped": skipped.len(),
                "skipped_files": skipped,
                "unlabelled": unlabelled,
                "mfcc": cfg,
            }),
        },
        None,
    )
}

/// A table scope name, or a comma-separated op list taken as is.
fn resolve_scope(s: &str) -> Result<Vec<String>> {
    match scope_by_name(s.trim()) {
        Ok(scope) => Ok(scope.search_ops()),
        Err(_) if s.contains(',') || !s.contains(' ') => Ok(s.split(',').map(|o| o.trim().to_string()).filter(|o| !o.is_empty()).collect()),
        Err(e) => Err(e),
    }
}

fn search_cmd(a: SearchArgs, inv: &Invocation) -> Result<()> {
    let mut cfg = load_config(&a.data, inv)?;
    if let Some(e) = a.epochs {
        cfg.search.epochs = e;
    }
    if a.retain_all_edges {
        cfg.search.retain_all_edges = true;
    }
    if let Some(s) = &a.scope {
        cfg.search.scope_seqnn = resolve_scope(s)?;
    }
    cfg.search.validate()?;
    let ds = load_dataset(&a.data.data)?;
    let plan = speaker_cv_split(&ds.maps, a.data.folds, inv.seed)?;
    let fold = pick_fold(&plan, a.fold)?;
    let (s_split, t_split) = (subset(&ds.maps, &fold.search_indices), subset(&ds.maps, &fold.train_indices));
    let outputs = vec![("--out-genome", a.out_genome.as_path()), ("--out-history", a.out_history.as_path())];
    match search(&cfg.search, &s_split, &t_split, ds.num_classes(), inv.seed) {
        Ok(o) => {
            write_text(&a.out_genome, &genome::serialize(&o.genome))?;
            o.history.write_csv(create(&a.out_history)?)?;
            record(
                inv,
                Record {
                    command: "search",
                    config: Some(&cfg),
                    outputs,
                    status: "ok",
                    details: json!({
                        "fold": fold.index,
                        "test_speakers": fold.test_speakers,
                        "epochs_completed": o.history.len(),
                        "degenerate": o.degeneracy.any(),
                        "degenerate_cnn": o.degeneracy.cnn,
                        "degenerate_seqnn": o.degeneracy.seqnn,
                    }),
                },
                None,
            )
        }
        Err(aborted) if aborted.error.is_numeric_fault() => {
            aborted.history.write_csv(create(&a.out_history)?)?;
            record(
                inv,
                Record {
                    command: "search",
                    config: Some(&cfg),
                    outputs,
                    status: "numeric_fault",
                    details: json!({
                        "fold": fold.index,
                        "epochs_completed": aborted.history.len(),
                        "error": aborted.error.to_string(),
                    }),
                },
                Some(Manifest::path_for(&a.out_history)),
            )?;
            Err(aborted.error)
        }
        Err(aborted) => Err(aborted.error),
    }
}

fn read_genome(path: &Path) -> Result<Genome> {
    genome::deserialize(&at_path(path, fs::read_to_string(path).map_err(Error::from))?)
}

fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    m
}

fn derive(a: DeriveArgs, inv: &Invocation) -> Result<()> {
    let genome = read_genome(&a.genome)?;
    let mut cfg = load_config(&a.data, inv)?;
    if let Some(e) = a.epochs {
        cfg.derived.epochs = e;
    }
    cfg.derived.validate()?;
    let ds = load_dataset(&a.data.data)?;
    let plan = speaker_cv_split(&ds.maps, a.data.folds, inv.seed)?;
    let fold = pick_fold(&plan, a.fold)?;
    let (train, test) = (subset(&ds.maps, &fold.train_indices), subset(&ds.maps, &fold.test_indices));
    let input = (ds.maps[0].cols(), ds.maps[0].rows());
    let mut model = instantiate(&genome, &cfg.derived, input, ds.num_classes(), inv.seed)?;

    let mut outputs = vec![("--out-metrics", a.out_metrics.as_path())];
    if let Some(p) = &a.out_history {
        outputs.push(("--out-history", p));
    }
    if let Some(p) = &a.out_model {
        outputs.push(("--out-model", p));
    }
    let history = match train_derived(&mut model, &train, &cfg.derived) {
        Ok(h) => h,
        Err(aborted) => {
            if !aborted.error.is_numeric_fault() {
                return Err(aborted.error);
            }
            if let Some(p) = &a.out_history {
                write_history_csv(&aborted.history, create(p)?)?;
            }
            record(
                inv,
                Record {
                    command: "derive",
                    config: Some(&cfg),
                    outputs,
                    status: "numeric_fault",
                    details: json!({ "epochs_completed": aborted.history.len(), "error": aborted.error.to_string() }),
                },
                None,
            )?;
            return Err(aborted.error);
        }
    };
    let eval = model.evaluate(&test)?;
    let labels: Vec<usize> = test.iter().map(|m| m.label).collect();
    let metrics = json!({
        "fold": fold.index,
        "test_speakers": fold.test_speakers,
        "test_samples": test.len(),
        "ua": eval.ua,
        "wa": eval.wa,
        "params": model.count_params(),
        "param_breakdown": model.param_breakdown(),
        "confusion": confusion(&eval.predictions, &labels, ds.num_classes()),
    });
    write_json(&a.out_metrics, &metrics)?;
    if let Some(p) = &a.out_history {
        write_history_csv(&history, create(p)?)?;
    }
    if let Some(p) = &a.out_model {
        model.write_checkpoint(create(p)?)?;
    }
    record(
        inv,
        Record {
            command: "derive",
            config: Some(&cfg),
            outputs,
            status: "ok",
            details: json!({ "fold": fold.index, "ua": eval.ua, "wa": eval.wa }),
        },
        None,
    )
}

fn baseline(a: BaselineArgs, inv: &Invocation) -> Result<()> {
    let kind: BaselineKind = a.kind.parse()?;
    let mut cfg = load_config(&a.data, inv)?;
    if let Some(e) = a.epochs {
        cfg.derived.epochs = e;
    }
    cfg.derived.validate()?;
    cfg.baseline.validate()?;
    let ds = load_dataset(&a.data.data)?;
    let plan = speaker_cv_split(&ds.maps, a.data.folds, inv.seed)?;
    let folds: Vec<&Fold> = match a.fold {
        Some(k) => vec![pick_fold(&plan, k)?],
        None => plan.folds.iter().collect(),
    };
    let results = run_jobs(inv.jobs, folds, |f| {
        run_fold(&ds.maps, ds.num_classes(), f, RunMode::Baseline(kind), &cfg, fold_seed(inv.seed, f.index))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let uas: Vec<f64> = results.iter().map(|r| r.ua).collect();
    let was: Vec<f64> = results.iter().map(|r| r.wa).collect();
    let (mean_ua, std_ua) = mean_std(&uas);
    let metrics = json!({
        "kind": kind.as_str(),
        "params": results[0].params,
        "mean_ua": mean_ua,
        "std_ua": std_ua,
        "mean_wa": mean_std(&was).0,
        "folds": results.iter().map(|r| json!({ "fold": r.fold, "ua": r.ua, "wa": r.wa, "seed": r.seed })).collect::<Vec<_>>(),
    });
    write_json(&a.out_metrics, &metrics)?;
    record(
        inv,
        Record {
            command: "baseline",
            config: Some(&cfg),
            outputs: vec![("--out-metrics", &a.out_metrics)],
            status: "ok",
            details: json!({ "kind": kind.as_str(), "folds": results.len() }),
        },
        None,
    )
}

fn study(a: StudyArgs, inv: &Invocation) -> Result<()> {
    let mut cfg = load_config(&a.data, inv)?;
    if let Some(e) = a.search_epochs {
        cfg.search.epochs = e;
    }
    if let Some(e) = a.derived_epochs {
        cfg.derived.epochs = e;
    }
    let scopes = match &a.scopes {
        Some(list) => list.split(';').map(|s| scope_by_name(s.trim())).collect::<Result<Vec<_>>>()?,
        None => table_scopes(),
    };
    let ds = load_dataset(&a.data.data)?;
    let plan = speaker_cv_split(&ds.maps, a.data.folds, inv.seed)?;
    let res = run_scope_study(&ds.maps, ds.num_classes(), &plan, &scopes, &cfg, inv.seed, inv.jobs)?;
    write_results_csv(&res.rows, create(&a.out_results)?)?;
    write_scatter_csv(&res.summary, create(&a.out_scatter)?)?;
    let failures: Vec<_> = res
        .rows
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| json!({ "scope": r.scope, "fold": r.fold, "error": e })))
        .collect();
    let degenerate = res.rows.iter().filter(|r| r.degenerate_cnn || r.degenerate_seqnn).count();
    record(
        inv,
        Record {
            command: "study",
            config: Some(&cfg),
            outputs: vec![("--out-results", &a.out_results), ("--out-scatter", &a.out_scatter)],
            status: "ok",
            details: json!({
                "summary": res.summary,
                "failures": failures,
                "degenerate_runs": degenerate,
                "seqnn_ops": res.rows.iter().map(|r| json!({ "scope": r.scope, "fold": r.fold, "ops": r.seqnn_ops })).collect::<Vec<_>>(),
            }),
        },
        None,
    )
}

fn export(a: ExportDotArgs, inv: &Invocation) -> Result<()> {
    let g = read_genome(&a.genome)?;
    fs::create_dir_all(&a.out_dir)?;
    let mut files = Vec::new();
    for t in CellType::ALL {
        let name = format!("{}.dot", t.as_str());
        write_text(&a.out_dir.join(&name), &export_dot(&g, t))?;
        files.push(name);
    }
    record(
        inv,
        Record {
            command: "export-dot",
            config: None,
            outputs: vec![("--out-dir", &a.out_dir)],
            status: "ok",
            details: json!({ "files": files }),
        },
        Some(a.out_dir.join("manifest.json")),
    )
}

fn replay(a: ReplayArgs) -> Result<()> {
    let m = at_path(&a.manifest, Manifest::load(&a.manifest))?;
    if m.command == "replay" {
        return Err(Error::Config("a replay manifest cannot itself be replayed".into()));
    }
    if m.versions != Versions::default() {
        log::warn!("manifest was written by {:?}; replaying with {:?}", m.versions, Versions::default());
    }
    let argv = match &a.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            m.argv_redirected(dir)
        }
        None => m.argv.clone(),
    };
    let cli = Cli::try_parse_from(std::iter::once("emodarts".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| Error::Config(format!("manifest argv no longer parses: {e}")))?;
    let config = m.config.as_deref().map(RunConfig::parse).transpose()?;
    let inv = Invocation {
        argv,
        seed: m.seed,
        jobs: cli.jobs.max(1),
        config,
    };
    execute(cli.command, inv)
}
