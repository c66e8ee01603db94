use emodarts_core::config::{RunConfig, SearchConfig};
use emodarts_core::derived::{instantiate, train_derived, DerivedModel};
use emodarts_core::features::{synth_dataset, Dataset, FeatureMap, SynthParams};
use emodarts_core::genome;
use emodarts_core::harness::{run_fold, speaker_cv_split, BaselineKind, RunMode};
use emodarts_core::search::search;

fn data() -> Vec<FeatureMap> {
    let p = SynthParams {
        speakers: 5,
        per_class: 4,
        sigma: 0.1,
        rows: 8,
        cols: 8,
        classes: 4,
    };
    synth_dataset(&p, 9).unwrap()
}

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.search = SearchConfig {
        cnn_cells: 2,
        seq_cells: 1,
        cnn_nodes: 2,
        seq_nodes: 2,
        channels: 4,
        hidden: 8,
        epochs: 2,
        ..SearchConfig::default()
    };
    cfg.derived.epochs = 3;
    cfg
}

#[test]
fn edset_round_trips_after_quantization() {
    let ds = Dataset {
        maps: data(),
        class_names: ["a", "b", "c", "d"].map(String::from).to_vec(),
        seed: Some(9),
        generator: Some(serde_json::json!({"sigma": 0.1})),
    }
    .quantized();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.edset");
    ds.save(&p).unwrap();
    assert_eq!(Dataset::load(&p).unwrap(), ds);

    let mut bytes = std::fs::read(&p).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(Dataset::read_from(&bytes[..]).is_err());
}

#[test]
fn search_derive_checkpoint() {
    let maps = data();
    let cfg = tiny();
    let plan = speaker_cv_split(&maps, 5, 1).unwrap();
    let fold = &plan.folds[0];
    let pick = |idx: &[usize]| idx.iter().map(|&i| &maps[i]).collect::<Vec<_>>();
    let out = search(&cfg.search, &pick(&fold.search_indices), &pick(&fold.train_indices), 4, 1).unwrap();
    assert_eq!(out.history.len(), 2);

    let text = genome::serialize(&out.genome);
    let g = genome::deserialize(&text).unwrap();
    assert_eq!(g, out.genome);

    let mut model = instantiate(&g, &cfg.derived, (8, 8), 4, 1).unwrap();
    train_derived(&mut model, &pick(&fold.train_indices), &cfg.derived).unwrap();
    let test = pick(&fold.test_indices);
    let before = model.predict(&test).unwrap();

    let mut buf = Vec::new();
    model.write_checkpoint(&mut buf).unwrap();
    let mut back = DerivedModel::read_checkpoint(&buf[..]).unwrap();
    assert_eq!(back.predict(&test).unwrap(), before);
    assert_eq!(back.count_params(), model.count_params());
}

#[test]
fn baseline_folds_are_reproducible() {
    let maps = data();
    let cfg = tiny();
    let plan = speaker_cv_split(&maps, 5, 3).unwrap();
    let run = || run_fold(&maps, 4, &plan.folds[1], RunMode::Baseline(BaselineKind::CnnLstm), &cfg, 3).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!((0.0..=100.0).contains(&a.ua));
    assert!(a.genome.is_none());
}
