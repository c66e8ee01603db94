//! Mini-batch training and inference shared by every model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::features::{batch_tensor, FeatureMap};
use crate::metrics::ua;
use crate::network::{CellForward, Stack};
use crate::nn::{Ctx, GradTarget, Mode};
use crate::optim::{clip_grad_norm, CosineSchedule, Sgd};
use crate::params::{ParamStore, Role};
use crate::tensor::Tensor;

/// Anything that maps a `(B, 1, H, W)` batch to class logits.
pub trait Classifier {
    fn logits(&self, ctx: &mut Ctx, x: Var) -> Result<Var>;
}

impl<C: CellForward> Classifier for Stack<C> {
    fn logits(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        Stack::logits(self, ctx, x)
    }
}

/// Shuffled pass over `n` indices that reshuffles whenever it runs out.
#[derive(Clone, Debug)]
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            batch: batch.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn batches_per_pass(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }

    /// Next batch; the last batch of a pass may be short.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        b
    }
}

pub fn gather<'a>(maps: &[&'a FeatureMap], idx: &[usize]) -> (Vec<&'a FeatureMap>, Vec<usize>) {
    let picked: Vec<&FeatureMap> = idx.iter().map(|&i| maps[i]).collect();
    let labels = picked.iter().map(|m| m.label).collect();
    (picked, labels)
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = *t.shape().last().expect("2-D logits");
    t.data()
        .chunks(cols)
        .map(|row| (0..cols).fold(0, |b, i| if row[i] > row[b] { i } else { b }))
        .collect()
}

/// Forward, loss and backward on one batch in training mode. Gradients of
/// the parameters selected by `target` are left in the store.
pub fn train_step<M: Classifier>(
    model: &M,
    store: &mut ParamStore,
    x: &Tensor,
    labels: &[usize],
    target: GradTarget,
    seed: u64,
) -> Result<(f64, Vec<usize>)> {
    store.zero_grad();
    let mut ctx = Ctx::new(store, Mode::Train, target, seed);
    let xv = ctx.input(x.clone());
    let logits = model.logits(&mut ctx, xv)?;
    let preds = argmax_rows(ctx.g.value(logits));
    let loss = ctx.g.softmax_cross_entropy(logits, labels)?;
    let value = ctx.g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NumericFault(format!("non-finite loss {value}")));
    }
    ctx.backward(loss)?;
    Ok((value, preds))
}

/// Class probabilities in evaluation mode.
pub fn probabilities<M: Classifier>(model: &M, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut ctx = Ctx::new(store, Mode::Eval, GradTarget::Nothing, 0);
    let xv = ctx.input(x.clone());
    let logits = model.logits(&mut ctx, xv)?;
    let p = ctx.g.softmax(logits);
    Ok(ctx.g.value(p).clone())
}

pub fn predict<M: Classifier>(model: &M, store: &mut ParamStore, maps: &[&FeatureMap], batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(maps.len());
    for chunk in maps.chunks(batch.max(1)) {
        let x = batch_tensor(chunk)?;
        out.extend(argmax_rows(&probabilities(model, store, &x)?));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ua: f64,
    pub lr: f64,
}

/// Training that stopped early, with everything recorded before the fault.
#[derive(Debug)]
pub struct Aborted<H> {
    pub error: Error,
    pub history: H,
}

impl<H> std::fmt::Display for Aborted<H> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl<H: std::fmt::Debug> std::error::Error for Aborted<H> {}

/// SGD with momentum under a cosine schedule spanning `epochs`.
pub fn fit<M: Classifier>(
    model: &M,
    store: &mut ParamStore,
    maps: &[&FeatureMap],
    cfg: &FitConfig,
    seed: u64,
) -> std::result::Result<Vec<EpochRecord>, Aborted<Vec<EpochRecord>>> {
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if maps.is_empty() {
        return Err(Aborted {
            error: Error::Contract("training split is empty".into()),
            history,
        });
    }
    let schedule = CosineSchedule::spanning(cfg.lr_max, cfg.lr_min, cfg.epochs);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut stream = BatchStream::new(maps.len(), cfg.batch_size, seed);
    let weights = store.ids(Role::Weight);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch).expect("epoch within schedule");
        let (mut loss_sum, mut preds, mut labels) = (0.0, Vec::new(), Vec::new());
        for _ in 0..stream.batches_per_pass() {
            let (batch, y) = gather(maps, &stream.next_batch());
            let outcome = batch_tensor(&batch).and_then(|x| {
                train_step(model, store, &x, &y, GradTarget::Weights, seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            });
            let (loss, p) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    return Err(Aborted {
                        error: annotate(e, epoch),
                        history,
                    })
                }
            };
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(store, &weights, max);
            }
            sgd.step(store, &weights, lr).expect("gradients populated by train_step");
            if !store.all_finite() {
                return Err(Aborted {
                    error: Error::NumericFault(format!("non-finite weights after step in epoch {epoch}")),
                    history,
                });
            }
            loss_sum += loss * y.len() as f64;
            preds.extend(p);
            labels.extend(y);
            step += 1;
        }
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / labels.len() as f64,
            ua: ua(&preds, &labels).unwrap_or(0.0),
            lr,
        });
    }
    Ok(history)
}

/// `epoch,loss,ua,lr`, one row per epoch.
pub fn write_history_csv<W: std::io::Write>(records: &[EpochRecord], w: W) -> Result<()> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "loss", "ua", "lr"]).map_err(io)?;
    for r in records {
        out.write_record([r.epoch.to_string(), r.loss.to_string(), r.ua.to_string(), r.lr.to_string()])
            .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn annotate(e: Error, epoch: usize) -> Error {
    match e {
        Error::NumericFault(m) => Error::NumericFault(format!("{m} (epoch {epoch})")),
        other => other,
    }
}
