//! First-order bilevel search: α steps on the search split, weight steps on
//! the training split.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::SearchConfig;
use crate::error::{Error, Result};
use crate::features::{batch_tensor, FeatureMap};
use crate::genome::{detect_degenerate, extract_genome, Degeneracy, Genome};
use crate::metrics::ua;
use crate::nn::GradTarget;
use crate::optim::{clip_grad_norm, Adam, CosineSchedule, Sgd};
use crate::params::ParamStore;
use crate::supernet::Supernet;
use crate::train::{annotate, gather, train_step, Aborted, BatchStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub epoch: usize,
    pub search_loss: f64,
    pub search_ua: f64,
    pub train_loss: f64,
    pub train_ua: f64,
    pub lr: f64,
    pub entropy_cnn: f64,
    pub entropy_seqnn: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchHistory {
    pub records: Vec<SearchRecord>,
}

pub const HISTORY_COLUMNS: [&str; 8] = [
    "epoch",
    "search_loss",
    "search_ua",
    "train_loss",
    "train_ua",
    "lr",
    "entropy_cnn",
    "entropy_seqnn",
];

impl SearchHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(HISTORY_COLUMNS).map_err(csv_err)?;
        for r in &self.records {
            out.write_record([
                r.epoch.to_string(),
                r.search_loss.to_string(),
                r.search_ua.to_string(),
                r.train_loss.to_string(),
                r.train_ua.to_string(),
                r.lr.to_string(),
                r.entropy_cnn.to_string(),
                r.entropy_seqnn.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Points at which an observer sees the parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchEvent {
    Start,
    AlphaStep { epoch: usize, step: usize },
    WeightStep { epoch: usize, step: usize },
}

pub struct SearchOutcome {
    pub genome: Genome,
    pub history: SearchHistory,
    pub degeneracy: Degeneracy,
    pub net: Supernet,
}

pub type SearchResult = std::result::Result<SearchOutcome, Aborted<SearchHistory>>;

pub fn search(
    config: &SearchConfig,
    search_split: &[&FeatureMap],
    train_split: &[&FeatureMap],
    num_classes: usize,
    seed: u64,
) -> SearchResult {
    search_with_observer(config, search_split, train_split, num_classes, seed, &mut |_, _| {})
}

fn abort<T>(error: Error, history: SearchHistory) -> std::result::Result<T, Aborted<SearchHistory>> {
    Err(Aborted { error, history })
}

pub fn search_with_observer(
    config: &SearchConfig,
    search_split: &[&FeatureMap],
    train_split: &[&FeatureMap],
    num_classes: usize,
    seed: u64,
    observer: &mut dyn FnMut(SearchEvent, &ParamStore),
) -> SearchResult {
    let mut history = SearchHistory::default();
    if let Err(e) = check_splits(search_split, train_split) {
        return abort(e, history);
    }
    let input = (search_split[0].cols(), search_split[0].rows());
    let mut net = match Supernet::build(config, input, num_classes, seed) {
        Ok(n) => n,
        Err(e) => return abort(e, history),
    };
    observer(SearchEvent::Start, &net.store);

    if config.epochs > 0 {
        let (arch, weights) = net.param_partition();
        let schedule = CosineSchedule::spanning(config.lr_max, config.lr_min, config.epochs);
        let mut adam = Adam::new(
            config.alpha_lr,
            config.alpha_beta1,
            config.alpha_beta2,
            1e-8,
            config.alpha_weight_decay,
        );
        let mut sgd = Sgd::new(config.momentum, config.weight_decay);
        let mut s_stream = BatchStream::new(search_split.len(), config.batch_size, seed ^ 0x5EA2C4);
        let mut t_stream = BatchStream::new(train_split.len(), config.batch_size, seed ^ 0x7EA1F);
        let steps = s_stream.batches_per_pass().max(t_stream.batches_per_pass());
        let started = Instant::now();
        let mut tick = 0u64;

        for epoch in 0..config.epochs {
            let lr = schedule.lr(epoch).expect("epoch within schedule");
            let mut s_acc = Running::default();
            let mut t_acc = Running::default();
            for step in 0..steps {
                let Supernet { stack, store, .. } = &mut net;

                let (batch, y) = gather(search_split, &s_stream.next_batch());
                let r = batch_tensor(&batch)
                    .and_then(|x| train_step(&*stack, store, &x, &y, GradTarget::Arch, mix(seed, tick)));
                match r {
                    Ok((loss, p)) => s_acc.add(loss, p, y),
                    Err(e) => return abort(annotate(e, epoch), history),
                }
                adam.step(store, &arch).expect("α gradients populated");
                if !store.all_finite() {
                    return abort(Error::NumericFault(format!("non-finite α in epoch {epoch}")), history);
                }
                observer(SearchEvent::AlphaStep { epoch, step }, store);
                tick += 1;

                let (batch, y) = gather(train_split, &t_stream.next_batch());
                let r = batch_tensor(&batch)
                    .and_then(|x| train_step(&*stack, store, &x, &y, GradTarget::Weights, mix(seed, tick)));
                match r {
                    Ok((loss, p)) => t_acc.add(loss, p, y),
                    Err(e) => return abort(annotate(e, epoch), history),
                }
                if let Some(max) = config.grad_clip {
                    clip_grad_norm(store, &weights, max);
                }
                sgd.step(store, &weights, lr).expect("weight gradients populated");
                if !store.all_finite() {
                    return abort(Error::NumericFault(format!("non-finite weights in epoch {epoch}")), history);
                }
                observer(SearchEvent::WeightStep { epoch, step }, store);
                tick += 1;
            }
            let (entropy_cnn, entropy_seqnn) = net.alpha_entropy();
            let (search_loss, search_ua) = s_acc.finish();
            let (train_loss, train_ua) = t_acc.finish();
            history.records.push(SearchRecord {
                epoch,
                search_loss,
                search_ua,
                train_loss,
                train_ua,
                lr,
                entropy_cnn,
                entropy_seqnn,
                seconds: started.elapsed().as_secs_f64(),
            });
            log::debug!("search epoch {epoch}: search UA {search_ua:.1}, train UA {train_ua:.1}");
        }
    }

    let genome = match extract_genome(&net, config.retain_all_edges) {
        Ok(g) => g,
        Err(e) => return abort(e, history),
    };
    let degeneracy = detect_degenerate(&genome);
    if degeneracy.any() {
        log::warn!("searched genome is degenerate: {degeneracy:?}");
    }
    Ok(SearchOutcome {
        genome,
        history,
        degeneracy,
        net,
    })
}

fn check_splits(search_split: &[&FeatureMap], train_split: &[&FeatureMap]) -> Result<()> {
    if search_split.is_empty() || train_split.is_empty() {
        return Err(Error::Contract("search and train splits must be non-empty".into()));
    }
    let labels = |s: &[&FeatureMap]| s.iter().map(|m| m.label).collect::<BTreeSet<_>>();
    if labels(search_split) != labels(train_split) {
        return Err(Error::Contract("search and train splits cover different label sets".into()));
    }
    let dims = (search_split[0].rows(), search_split[0].cols());
    if search_split.iter().chain(train_split).any(|m| (m.rows(), m.cols()) != dims) {
        return Err(Error::Contract("feature maps differ in shape".into()));
    }
    Ok(())
}

fn mix(seed: u64, tick: u64) -> u64 {
    seed ^ tick.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Default)]
struct Running {
    loss: f64,
    preds: Vec<usize>,
    labels: Vec<usize>,
}

impl Running {
    fn add(&mut self, loss: f64, preds: Vec<usize>, labels: Vec<usize>) {
        self.loss += loss * labels.len() as f64;
        self.preds.extend(preds);
        self.labels.extend(labels);
    }

    fn finish(self) -> (f64, f64) {
        let n = self.labels.len().max(1) as f64;
        (self.loss / n, ua(&self.preds, &self.labels).unwrap_or(0.0))
    }
}
