//! Optimization loop, configuration, optimizer and checkpoints.
//!
//! One epoch is one pass over the labeled sequences. Each labeled batch is
//! followed by `unlabeled_ratio` reconstruction-only batches drawn from a
//! cycling, reshuffled stream of unlabeled sequences.

mod checkpoint;
mod config;
mod optimizer;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, SavedParam, TrainedModel};
pub use config::TrainConfig;
pub use optimizer::{clip_global_norm, Adam};

use crate::autodiff::{Graph, Tensor};
use crate::data::{batch_iter, Batch, FeatureScaler, MarkedSequence, SplitView};
use crate::error::{Error, Result};
use crate::layers::ParamId;
use crate::model::SslMtpp;

/// Mean loss terms over one epoch's optimizer steps.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_marker: f64,
    pub l_time: f64,
    /// `None` when reconstruction is not trained.
    pub l_recon: Option<f64>,
    pub l_total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochLosses>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_marker,l_time,l_recon,l_total\n");
        for e in &self.epochs {
            let recon = e.l_recon.map(|r| r.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{}", e.epoch, e.l_marker, e.l_time, recon, e.l_total).expect("string write");
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.epochs.iter().all(|e| {
            [e.l_marker, e.l_time, e.l_total, e.l_recon.unwrap_or(0.0)].iter().all(|v| v.is_finite())
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trained: TrainedModel,
    pub history: History,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Endless batches over a sequence set, reshuffled on every pass.
struct Cycle<'a> {
    seqs: &'a [MarkedSequence],
    scaler: &'a FeatureScaler,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<'a> Cycle<'a> {
    fn new(seqs: &'a [MarkedSequence], scaler: &'a FeatureScaler, batch_size: usize, rng: ChaCha8Rng) -> Self {
        Cycle { seqs, scaler, batch_size, order: (0..seqs.len()).collect(), pos: seqs.len(), rng }
    }

    fn next_batch(&mut self) -> Batch {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let members: Vec<&MarkedSequence> = self.order[self.pos..end].iter().map(|&i| &self.seqs[i]).collect();
        self.pos = end;
        Batch::from_sequences(&members, self.scaler).expect("non-empty chunk")
    }
}

#[derive(Default)]
struct Tally {
    marker: f64,
    time: f64,
    labeled_steps: usize,
    recon: f64,
    recon_steps: usize,
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, batch, source: Box::new(e) },
        other => other,
    }
}

fn take_grads(
    binding: &crate::layers::Binding,
    grads: &mut crate::autodiff::Gradients,
    ids: &[ParamId],
) -> Vec<Option<Tensor>> {
    binding.gradients(grads, ids)
}

fn clip(groups: &mut [&mut Vec<Option<Tensor>>], max_norm: f64) {
    clip_global_norm(groups.iter_mut().flat_map(|g| g.iter_mut().flatten()), max_norm);
}

/// Trains on a split. See [`train_with`].
pub fn train(view: &SplitView, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(view, config, |_| {})
}

/// Trains on a split, calling `on_epoch` after every epoch. The scaler is
/// fitted on all training gaps; the result depends only on the split,
/// the config and its seed.
pub fn train_with(view: &SplitView, config: &TrainConfig, mut on_epoch: impl FnMut(&EpochLosses)) -> Result<TrainOutcome> {
    config.validate()?;
    if view.labeled.is_empty() {
        return Err(Error::InvalidConfig("labeled set is empty".into()));
    }
    let scaler = FeatureScaler::fit(view.training());
    let mut model = SslMtpp::new(config.model_config(view.num_classes), config.seed)?;
    let ssl = !config.baseline && model.has_autoencoder();
    let sup_ids = model.supervised_params().to_vec();
    let ae_ids = model.autoencoder_params().to_vec();
    let mut sup_opt = Adam::new(model.params(), &sup_ids, config.learning_rate);
    let mut ae_opt = Adam::new(model.params(), &ae_ids, config.learning_rate);

    let mut labeled_rng = stream(config.seed, 20);
    let mut dropout_rng = stream(config.seed, 22);
    let mut unlabeled = Cycle::new(&view.unlabeled, &scaler, config.batch_size, stream(config.seed, 21));
    let use_unlabeled = ssl && !view.unlabeled.is_empty();

    let mut history = History::default();
    for epoch in 1..=config.epochs {
        let mut tally = Tally::default();
        for (b, batch) in batch_iter(&view.labeled, &scaler, config.batch_size, &mut labeled_rng)?.enumerate() {
            let guard = diverged(epoch, b);
            let mut g = Graph::new();
            let p = model.bind(&mut g)?;
            let terms = model.labeled_loss(&mut g, &p, &batch, ssl, Some(&mut dropout_rng)).map_err(&guard)?;
            let mut grads = g.backward(terms.total).map_err(&guard)?;
            let mut sup = take_grads(&p, &mut grads, &sup_ids);
            let mut ae = if ssl { take_grads(&p, &mut grads, &ae_ids) } else { Vec::new() };
            clip(&mut [&mut sup, &mut ae], config.clip_norm);
            sup_opt.step(model.params_mut(), &sup)?;
            if ssl {
                ae_opt.step(model.params_mut(), &ae)?;
            }
            tally.marker += g.value(terms.marker).data()[0];
            tally.time += g.value(terms.time).data()[0];
            tally.labeled_steps += 1;
            if let Some(r) = terms.recon {
                tally.recon += g.value(r).data()[0];
                tally.recon_steps += 1;
            }

            if use_unlabeled {
                for _ in 0..config.unlabeled_ratio {
                    let ub = unlabeled.next_batch();
                    let mut g = Graph::new();
                    let p = model.bind(&mut g)?;
                    let loss = model.reconstruction_loss(&mut g, &p, &ub).map_err(&guard)?;
                    let mut grads = g.backward(loss).map_err(&guard)?;
                    let mut ae = take_grads(&p, &mut grads, &ae_ids);
                    clip(&mut [&mut ae], config.clip_norm);
                    ae_opt.step(model.params_mut(), &ae)?;
                    tally.recon += g.value(loss).data()[0];
                    tally.recon_steps += 1;
                }
            }
        }
        let n = tally.labeled_steps as f64;
        let (l_marker, l_time) = (tally.marker / n, tally.time / n);
        let l_recon = ssl.then(|| tally.recon / tally.recon_steps as f64);
        let row = EpochLosses { epoch, l_marker, l_time, l_recon, l_total: l_marker + l_time + l_recon.unwrap_or(0.0) };
        if !row.l_total.is_finite() {
            return Err(Error::Diverged { epoch, batch: tally.labeled_steps, source: Box::new(Error::NonFinite { op: "loss" }) });
        }
        on_epoch(&row);
        history.epochs.push(row);
    }
    let trained = TrainedModel { model, scaler, config: config.clone(), protocol: view.protocol.clone() };
    Ok(TrainOutcome { trained, history })
}
