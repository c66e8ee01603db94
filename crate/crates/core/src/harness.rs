//! Speaker-independent cross-validation, the comparison baselines and the
//! SeqNN scope study.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::config::{BaselineConfig, DerivedConfig, RunConfig};
use crate::derived::{instantiate, train_derived};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::genome::{Degeneracy, Genome};
use crate::metrics::{ua, wa};
use crate::network::flatten_bridge;
use crate::nn::{dropout, CellKind, Conv2d, ConvSpec, Ctx, Linear, RecurrentLayer, Attention};
use crate::params::{ParamStore, Role};
use crate::search::{search, SearchHistory};
use crate::tensor::Tensor;
use crate::train::{fit, predict, probabilities, Classifier, EpochRecord, FitConfig};

/// Share of the non-test samples that goes to the search split, in tenths.
const SEARCH_TENTHS: usize = 7;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub test_speakers: Vec<String>,
    pub search_indices: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
}

/// Groups speakers into `n_folds` test groups and splits the rest 70/30 into
/// search and train, stratified over `(class, speaker)`.
pub fn speaker_cv_split(maps: &[FeatureMap], n_folds: usize, seed: u64) -> Result<SplitPlan> {
    if n_folds < 2 {
        return Err(Error::Protocol(format!("need at least 2 folds, got {n_folds}")));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for m in maps {
        *counts.entry(m.speaker.as_str()).or_insert(0) += 1;
    }
    if counts.len() < n_folds {
        return Err(Error::Protocol(format!(
            "{} speakers cannot fill {n_folds} speaker-disjoint folds",
            counts.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut speakers: Vec<(&str, usize)> = counts.into_iter().collect();
    speakers.shuffle(&mut rng);
    speakers.sort_by(|a, b| b.1.cmp(&a.1));
    let mut groups = vec![Vec::new(); n_folds];
    for (i, (s, _)) in speakers.iter().enumerate() {
        groups[i % n_folds].push(s.to_string());
    }
    let folds = groups
        .into_iter()
        .enumerate()
        .map(|(index, mut test_speakers)| {
            test_speakers.sort();
            let (test_indices, rest): (Vec<usize>, Vec<usize>) =
                (0..maps.len()).partition(|&i| test_speakers.contains(&maps[i].speaker));
            let (search_indices, train_indices) = stratified_split(maps, &rest, &mut rng);
            Fold {
                index,
                test_speakers,
                search_indices,
                train_indices,
                test_indices,
            }
        })
        .collect();
    Ok(SplitPlan { folds })
}

/// Exactly `round(0.7·n)` indices go to the first half; each `(class,
/// speaker)` stratum contributes its floor share and leftover slots go to the
/// largest remainders.
pub fn stratified_split<R: Rng>(maps: &[FeatureMap], indices: &[usize], rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut strata: BTreeMap<(usize, &str), Vec<usize>> = BTreeMap::new();
    for &i in indices {
        strata.entry((maps[i].label, maps[i].speaker.as_str())).or_default().push(i);
    }
    let target = (SEARCH_TENTHS * indices.len() + 5) / 10;
    let mut quotas: Vec<(usize, usize)> = strata.values().map(|v| ((SEARCH_TENTHS * v.len()) / 10, (SEARCH_TENTHS * v.len()) % 10)).collect();
    let assigned: usize = quotas.iter().map(|q| q.0).sum();
    // Equal remainders are served one class at a time so that leftovers
    // spread over classes instead of draining one class from the train half.
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let rank: Vec<(usize, usize)> = strata
        .keys()
        .map(|&(label, _)| {
            let r = seen.entry(label).or_insert(0);
            *r += 1;
            (*r, label)
        })
        .collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.cmp(&quotas[a].1).then(rank[a].cmp(&rank[b])));
    for &k in order.iter().take(target - assigned) {
        quotas[k].0 += 1;
    }
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (members, (q, _)) in strata.into_values().zip(quotas) {
        let mut members = members;
        members.shuffle(rng);
        first.extend_from_slice(&members[..q]);
        second.extend_from_slice(&members[q..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Cnn,
    CnnLstm,
    CnnLstmAtt,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::Cnn, BaselineKind::CnnLstm, BaselineKind::CnnLstmAtt];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Cnn => "cnn",
            BaselineKind::CnnLstm => "cnn_lstm",
            BaselineKind::CnnLstmAtt => "cnn_lstm_att",
        }
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline `{s}` (cnn, cnn_lstm, cnn_lstm_att)")))
    }
}

/// conv(k2, s2, p2) → ReLU → max-pool(2, 2) → [BiLSTM → [attention]] →
/// dropout → dense → ReLU → dense.
#[derive(Clone, Debug)]
pub struct Baseline {
    pub kind: BaselineKind,
    pub input: (usize, usize),
    pub conv: Conv2d,
    pub lstm: Option<(RecurrentLayer, RecurrentLayer)>,
    pub attention: Option<Attention>,
    pub dense: Linear,
    pub out: Linear,
    pub dropout: f64,
}

impl Baseline {
    pub fn build<R: Rng + ?Sized>(
        kind: BaselineKind,
        cfg: &BaselineConfig,
        input: (usize, usize),
        num_classes: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = pooled_hw(input);
        if h == 0 || w == 0 {
            return Err(Error::Build(format!("input {input:?} too small for the baseline")));
        }
        let f = cfg.filters;
        let conv = Conv2d::new(store, "conv", ConvSpec::new(1, f, (2, 2)).stride((2, 2)).padding((2, 2)), rng);
        let (lstm, attention, flat) = match kind {
            BaselineKind::Cnn => (None, None, f * h * w),
            _ => {
                let u = cfg.lstm_units;
                let fwd = RecurrentLayer::new(store, "lstm.fwd", CellKind::Lstm, f * w, u, false, rng);
                let bwd = RecurrentLayer::new(store, "lstm.bwd", CellKind::Lstm, f * w, u, true, rng);
                let att = (kind == BaselineKind::CnnLstmAtt).then(|| Attention::new(store, "attention", 2 * u, rng));
                (Some((fwd, bwd)), att, h * 2 * u)
            }
        };
        let dense = Linear::new(store, "dense", flat, cfg.dense, true, rng);
        let out = Linear::new(store, "out", cfg.dense, num_classes, true, rng);
        Ok(Self {
            kind,
            input,
            conv,
            lstm,
            attention,
            dense,
            out,
            dropout: cfg.dropout,
        })
    }

    /// Analytic trainable-scalar count.
    pub fn param_count(&self) -> usize {
        let linear = |l: &Linear| l.in_features * l.out_features + l.bias.map_or(0, |_| l.out_features);
        let conv = self.conv.in_channels * self.conv.out_channels * self.conv.kernel.0 * self.conv.kernel.1;
        let lstm = self.lstm.as_ref().map_or(0, |(a, b)| a.param_count() + b.param_count());
        let att = self.attention.as_ref().map_or(0, Attention::param_count);
        conv + lstm + att + linear(&self.dense) + linear(&self.out)
    }
}

/// Spatial size after the conv and pooling layers.
pub fn pooled_hw(input: (usize, usize)) -> (usize, usize) {
    let conv = |n: usize| (n + 4 - 2) / 2 + 1;
    let pool = |n: usize| if n < 2 { 0 } else { (n - 2) / 2 + 1 };
    (pool(conv(input.0)), pool(conv(input.1)))
}

impl Classifier for Baseline {
    fn logits(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 || (shape[2], shape[3]) != self.input {
            return Err(Error::Shape(format!(
                "baseline expects (B, 1, {}, {}), got {shape:?}",
                self.input.0, self.input.1
            )));
        }
        let batch = shape[0];
        let y = self.conv.forward(ctx, x)?;
        let y = ctx.g.relu(y);
        let y = ctx.g.max_pool2d(y, 2, 2, 0)?;
        let y = match &self.lstm {
            None => {
                let n = ctx.g.value(y).numel() / batch;
                ctx.g.reshape(y, &[batch, n])?
            }
            Some((fwd, bwd)) => {
                let seq = flatten_bridge(ctx, y)?;
                let a = fwd.forward(ctx, seq)?;
                let b = bwd.forward(ctx, seq)?;
                let mut h = ctx.g.concat(&[a, b], 2)?;
                if let Some(att) = &self.attention {
                    h = att.forward(ctx, h)?;
                }
                let n = ctx.g.value(h).numel() / batch;
                ctx.g.reshape(h, &[batch, n])?
            }
        };
        let y = dropout(ctx, y, self.dropout)?;
        let y = self.dense.forward(ctx, y)?;
        let y = ctx.g.relu(y);
        let logits = self.out.forward(ctx, y)?;
        if !ctx.g.value(logits).is_finite() {
            return Err(Error::NumericFault("non-finite baseline logits".into()));
        }
        Ok(logits)
    }
}

pub struct BaselineModel {
    pub net: Baseline,
    pub store: ParamStore,
    pub seed: u64,
}

pub fn build_baseline(kind: BaselineKind, cfg: &BaselineConfig, input: (usize, usize), num_classes: usize, seed: u64) -> Result<BaselineModel> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Baseline::build(kind, cfg, input, num_classes, &mut store, &mut rng)?;
    Ok(BaselineModel { net, store, seed })
}

impl BaselineModel {
    pub fn count_params(&self) -> usize {
        self.store.count(Role::Weight)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        probabilities(&self.net, &mut self.store, x)
    }

    /// Trains with the derived-model optimizer settings.
    pub fn train(&mut self, maps: &[&FeatureMap], cfg: &DerivedConfig) -> Result<Vec<EpochRecord>> {
        fit(&self.net, &mut self.store, maps, &fit_config(cfg), self.seed.wrapping_add(1)).map_err(|a| a.error)
    }

    pub fn predict(&mut self, maps: &[&FeatureMap], batch: usize) -> Result<Vec<usize>> {
        predict(&self.net, &mut self.store, maps, batch)
    }
}

pub fn fit_config(cfg: &DerivedConfig) -> FitConfig {
    FitConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr_max: cfg.lr_max,
        lr_min: cfg.lr_min,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        grad_clip: cfg.grad_clip,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    Emodarts,
    Baseline(BaselineKind),
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunMode::Emodarts => f.write_str("emodarts"),
            RunMode::Baseline(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "emodarts" {
            Ok(RunMode::Emodarts)
        } else {
            s.parse().map(RunMode::Baseline)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub ua: f64,
    pub wa: f64,
    pub params: usize,
    pub genome: Option<Genome>,
    pub degeneracy: Degeneracy,
    pub search_history: Option<SearchHistory>,
    pub train_history: Vec<EpochRecord>,
    pub seed: u64,
}

/// Seed used for fold `fold` of a run seeded with `seed`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add((fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// `num_classes` is the size of the dataset's class list.
pub fn run_fold(maps: &[FeatureMap], num_classes: usize, fold: &Fold, mode: RunMode, cfg: &RunConfig, seed: u64) -> Result<FoldResult> {
    run_fold_inner(maps, num_classes, fold, mode, cfg, seed).map_err(|e| e.in_fold(fold.index))
}

fn run_fold_inner(maps: &[FeatureMap], num_classes: usize, fold: &Fold, mode: RunMode, cfg: &RunConfig, seed: u64) -> Result<FoldResult> {
    let pick = |idx: &[usize]| idx.iter().map(|&i| &maps[i]).collect::<Vec<&FeatureMap>>();
    let (s_split, t_split, test) = (pick(&fold.search_indices), pick(&fold.train_indices), pick(&fold.test_indices));
    if test.is_empty() {
        return Err(Error::Protocol("empty test split".into()));
    }
    if s_split.iter().chain(&t_split).any(|m| fold.test_speakers.contains(&m.speaker)) {
        return Err(Error::Protocol("a test speaker appears outside the test split".into()));
    }
    let input = (test[0].cols(), test[0].rows());
    let labels: Vec<usize> = test.iter().map(|m| m.label).collect();
    match mode {
        RunMode::Emodarts => {
            let outcome = search(&cfg.search, &s_split, &t_split, num_classes, seed).map_err(|a| a.error)?;
            let mut model = instantiate(&outcome.genome, &cfg.derived, input, num_classes, seed)?;
            let train_history = train_derived(&mut model, &t_split, &cfg.derived).map_err(|a| a.error)?;
            let eval = model.evaluate(&test)?;
            Ok(FoldResult {
                fold: fold.index,
                ua: eval.ua,
                wa: eval.wa,
                params: model.count_params(),
                genome: Some(outcome.genome),
                degeneracy: outcome.degeneracy,
                search_history: Some(outcome.history),
                train_history,
                seed,
            })
        }
        RunMode::Baseline(kind) => {
            let mut model = build_baseline(kind, &cfg.baseline, input, num_classes, seed)?;
            let all: Vec<&FeatureMap> = s_split.iter().chain(&t_split).copied().collect();
            let train_history = model.train(&all, &cfg.derived)?;
            let preds = model.predict(&test, cfg.derived.batch_size)?;
            Ok(FoldResult {
                fold: fold.index,
                ua: ua(&preds, &labels)?,
                wa: wa(&preds, &labels)?,
                params: model.count_params(),
                genome: None,
                degeneracy: Degeneracy::default(),
                search_history: None,
                train_history,
                seed,
            })
        }
    }
}

/// Runs `f` over `items` on at most `jobs` threads, keeping input order.
pub fn run_jobs<T, R, F>(jobs: usize, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if jobs > 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
                return pool.install(|| items.into_par_iter().map(&f).collect());
            }
        }
    }
    let _ = jobs;
    items.into_iter().map(f).collect()
}

/// A named SeqNN candidate list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scope {
    pub name: String,
    pub ops: Vec<String>,
}

impl Scope {
    fn new(name: &str, ops: &[&str]) -> Self {
        Self {
            name: name.into(),
            ops: ops.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Ops handed to the search: the listed ones plus identity and zero.
    pub fn search_ops(&self) -> Vec<String> {
        let mut ops = self.ops.clone();
        for extra in ["skip_connect", "none"] {
            if !ops.iter().any(|o| o == extra) {
                ops.push(extra.into());
            }
        }
        ops
    }
}

/// The five SeqNN scopes compared in the study.
pub fn table_scopes() -> Vec<Scope> {
    vec![
        Scope::new(
            "emoDARTS",
            &[
                "lstm_1", "lstm_2", "lstm_3", "lstm_4", "lstm_att_1", "lstm_att_2", "rnn_1", "rnn_2", "rnn_3", "rnn_4", "rnn_att_1",
                "rnn_att_2",
            ],
        ),
        Scope::new("LSTM Only", &["lstm_1", "lstm_2", "lstm_3", "lstm_4"]),
        Scope::new("LSTM-Att. Only", &["lstm_att_1", "lstm_att_2"]),
        Scope::new("RNN Only", &["rnn_1", "rnn_2", "rnn_3", "rnn_4"]),
        Scope::new("RNN-Att. Only", &["rnn_att_1", "rnn_att_2"]),
    ]
}

pub fn scope_by_name(name: &str) -> Result<Scope> {
    table_scopes()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Config(format!("unknown scope `{name}`")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub scope: String,
    pub fold: usize,
    pub ua: Option<f64>,
    pub wa: Option<f64>,
    pub params: Option<usize>,
    pub degenerate_cnn: bool,
    pub degenerate_seqnn: bool,
    pub seed: u64,
    pub error: Option<String>,
    pub seqnn_ops: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScopeSummary {
    pub scope: String,
    pub mean_ua: f64,
    pub std_ua: f64,
    pub mean_wa: f64,
    pub params: usize,
    pub folds_ok: usize,
    pub folds_failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResults {
    pub rows: Vec<StudyRow>,
    pub summary: Vec<ScopeSummary>,
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Every scope on every fold; failed folds stay in the table with their
/// error message.
pub fn run_scope_study(
    maps: &[FeatureMap],
    num_classes: usize,
    plan: &SplitPlan,
    scopes: &[Scope],
    cfg: &RunConfig,
    seed: u64,
    jobs: usize,
) -> Result<StudyResults> {
    if plan.folds.len() < 2 {
        return Err(Error::Protocol(format!("scope study needs at least 2 folds, got {}", plan.folds.len())));
    }
    let jobs_list: Vec<(&Scope, &Fold)> = scopes.iter().flat_map(|s| plan.folds.iter().map(move |f| (s, f))).collect();
    let rows = run_jobs(jobs, jobs_list, |(scope, fold)| {
        let mut run = cfg.clone();
        run.search.scope_seqnn = scope.search_ops();
        let fseed = fold_seed(seed, fold.index);
        match run_fold(maps, num_classes, fold, RunMode::Emodarts, &run, fseed) {
            Ok(r) => StudyRow {
                scope: scope.name.clone(),
                fold: fold.index,
                ua: Some(r.ua),
                wa: Some(r.wa),
                params: Some(r.params),
                degenerate_cnn: r.degeneracy.cnn,
                degenerate_seqnn: r.degeneracy.seqnn,
                seed: fseed,
                error: None,
                seqnn_ops: r
                    .genome
                    .map(|g| g.seqnn.iter().map(|e| e.op_name.clone()).collect::<BTreeSet<_>>().into_iter().collect())
                    .unwrap_or_default(),
            },
            Err(e) => StudyRow {
                scope: scope.name.clone(),
                fold: fold.index,
                ua: None,
                wa: None,
                params: None,
                degenerate_cnn: false,
                degenerate_seqnn: false,
                seed: fseed,
                error: Some(e.to_string()),
                seqnn_ops: Vec::new(),
            },
        }
    });
    let summary = summarize(scopes, &rows);
    Ok(StudyResults { rows, summary })
}

pub fn summarize(scopes: &[Scope], rows: &[StudyRow]) -> Vec<ScopeSummary> {
    scopes
        .iter()
        .map(|s| {
            let mine: Vec<&StudyRow> = rows.iter().filter(|r| r.scope == s.name).collect();
            let ok: Vec<&StudyRow> = mine.iter().copied().filter(|r| r.error.is_none()).collect();
            let uas: Vec<f64> = ok.iter().filter_map(|r| r.ua).collect();
            let was: Vec<f64> = ok.iter().filter_map(|r| r.wa).collect();
            let params: Vec<f64> = ok.iter().filter_map(|r| r.params).map(|p| p as f64).collect();
            let (mean_ua, std_ua) = mean_std(&uas);
            ScopeSummary {
                scope: s.name.clone(),
                mean_ua,
                std_ua,
                mean_wa: mean_std(&was).0,
                params: if params.is_empty() { 0 } else { mean_std(&params).0.round() as usize },
                folds_ok: ok.len(),
                folds_failed: mine.len() - ok.len(),
            }
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "failed".to_string(), |x| x.to_string())
}

/// One row per `(scope, fold)`; failed folds carry `failed` markers.
pub fn write_results_csv<W: Write>(rows: &[StudyRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scope", "fold", "ua", "wa", "params", "degenerate_cnn", "degenerate_seqnn", "seed"])
        .map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.scope.clone(),
            r.fold.to_string(),
            opt(r.ua),
            opt(r.wa),
            opt(r.params),
            r.degenerate_cnn.to_string(),
            r.degenerate_seqnn.to_string(),
            r.seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Mean UA against its standard deviation, sized by parameter count.
pub fn write_scatter_csv<W: Write>(summary: &[ScopeSummary], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scope", "mean_ua", "std_ua", "params"]).map_err(csv_err)?;
    for s in summary {
        out.write_record([s.scope.clone(), s.mean_ua.to_string(), s.std_ua.to_string(), s.params.to_string()])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
