//! The semi-supervised marked point process network.
//!
//! Two branches share the inter-event gap feature of each sequence:
//!
//! * a supervised LSTM stack over `[gap, marker embedding]`, whose step-`j`
//!   output predicts the marker and gap of event `j + 1`;
//! * a plain recurrent encoder over gaps only, paired with a decoder that
//!   starts from the encoder's final states and reconstructs the gap sequence.
//!
//! When `lambda > 0` the encoder's step-`j` state is added to the supervised
//! step-`j` output, scaled by `lambda`, before the heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, Tensor, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::layers::{
    dropout, Activation, Binding, CellKind, CellState, DenseLayer, EmbeddingTable, ParamId, ParamStore,
    RecurrentStack,
};

/// How the decoder is fed during reconstruction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// Step `t` receives the true gap of step `t - 1`.
    #[default]
    TeacherForced,
    /// Step `t` receives the decoder's own previous output.
    FreeRunning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub embed_dim: usize,
    pub sup_hidden: usize,
    pub sup_layers: usize,
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub lambda: f64,
    pub decoder: DecoderMode,
    /// Whether the encoder-decoder exists at all.
    pub autoencoder: bool,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        ModelConfig {
            num_classes,
            embed_dim: 16,
            sup_hidden: 64,
            sup_layers: 5,
            enc_hidden: 32,
            enc_layers: 2,
            head_hidden: 32,
            dropout: 0.1,
            lambda: 0.1,
            decoder: DecoderMode::TeacherForced,
            autoencoder: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_classes < 2 {
            return bad("need at least 2 marker classes");
        }
        let dims = [self.embed_dim, self.sup_hidden, self.sup_layers, self.enc_hidden, self.enc_layers, self.head_hidden];
        if dims.contains(&0) {
            return bad("layer sizes and counts must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad("lambda must be finite and non-negative");
        }
        Ok(())
    }

    /// Encoder (and decoder) layer widths. The top layer matches the
    /// supervised width so the two embeddings can be added.
    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.enc_hidden; self.enc_layers - 1];
        dims.push(self.sup_hidden);
        dims
    }
}

/// Prediction for the event following step `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPrediction {
    pub probs: Vec<f64>,
    /// Next gap in standardized units.
    pub gap: f64,
}

impl StepPrediction {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (c, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = c;
            }
        }
        best
    }
}

#[derive(Clone, Debug)]
struct Autoencoder {
    encoder: RecurrentStack,
    decoder: RecurrentStack,
    output: DenseLayer,
}

/// Per-step encoder states plus the per-layer state after each sequence's last event.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub steps: Vec<Var>,
    pub summary: Vec<CellState>,
}

/// Loss terms of one optimization step, all scalar graph variables.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub marker: Var,
    pub time: Var,
    pub recon: Option<Var>,
    pub total: Var,
}

/// Masked sum of squared errors and the number of positions it covers.
#[derive(Clone, Copy, Debug)]
pub struct SquaredError {
    pub sse: Var,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct SslMtpp {
    config: ModelConfig,
    params: ParamStore,
    embedding: EmbeddingTable,
    supervised: RecurrentStack,
    marker_head: [DenseLayer; 2],
    time_head: [DenseLayer; 2],
    autoencoder: Option<Autoencoder>,
    supervised_ids: Vec<ParamId>,
    autoencoder_ids: Vec<ParamId>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn column(g: &mut Graph, values: Vec<f64>) -> Result<Var> {
    let n = values.len();
    g.constant(Tensor::new(vec![n, 1], values)?)
}

/// `sum(mask * (pred - target)^2)` over `[N x 1]` columns.
pub fn masked_squared_error(g: &mut Graph, pred: Var, target: &[f64], mask: &[bool]) -> Result<SquaredError> {
    let count = mask.iter().filter(|&&m| m).count();
    let target = column(g, target.to_vec())?;
    let weights = column(g, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let sq = g.mul(sq, weights)?;
    Ok(SquaredError { sse: g.sum(sq)?, count })
}

/// `f + lambda * e`. With `lambda == 0` the result is `f` itself.
pub fn fuse(g: &mut Graph, f: Var, e: Var, lambda: f64) -> Result<Var> {
    if g.shape(f) != g.shape(e) {
        return Err(Error::shape("fuse", format!("{:?} vs {:?}", g.shape(f), g.shape(e))));
    }
    if lambda == 0.0 {
        return Ok(f);
    }
    let scaled = g.scale(e, lambda)?;
    g.add(f, scaled)
}

impl SslMtpp {
    /// Initializes all weights from `seed`. Supervised and encoder-decoder
    /// weights use separate random streams, so the supervised branch is
    /// identical whether or not the encoder-decoder exists.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = stream(seed, 10);
        let embedding = EmbeddingTable::new(&mut params, "marker_embedding", config.num_classes, config.embed_dim, &mut rng);
        let supervised = RecurrentStack::build(
            &mut params,
            "supervised",
            CellKind::Lstm,
            1 + config.embed_dim,
            &vec![config.sup_hidden; config.sup_layers],
            &mut rng,
        )?;
        let (h, hh) = (config.sup_hidden, config.head_hidden);
        let marker_head = [
            DenseLayer::new(&mut params, "marker_head.0", h, hh, Activation::Tanh, &mut rng),
            DenseLayer::new(&mut params, "marker_head.1", hh, config.num_classes, Activation::None, &mut rng),
        ];
        let time_head = [
            DenseLayer::new(&mut params, "time_head.0", h, hh, Activation::Tanh, &mut rng),
            DenseLayer::new(&mut params, "time_head.1", hh, 1, Activation::None, &mut rng),
        ];
        let supervised_ids: Vec<ParamId> = params.ids().collect();

        let autoencoder = if config.autoencoder {
            let mut rng = stream(seed, 11);
            let dims = config.encoder_dims();
            let encoder = RecurrentStack::build(&mut params, "encoder", CellKind::Plain, 1, &dims, &mut rng)?;
            let decoder = RecurrentStack::build(&mut params, "decoder", CellKind::Plain, 1, &dims, &mut rng)?;
            let output = DenseLayer::new(&mut params, "decoder.output", h, 1, Activation::None, &mut rng);
            Some(Autoencoder { encoder, decoder, output })
        } else {
            None
        };
        let autoencoder_ids = params.ids().skip(supervised_ids.len()).collect();
        Ok(SslMtpp {
            config,
            params,
            embedding,
            supervised,
            marker_head,
            time_head,
            autoencoder,
            supervised_ids,
            autoencoder_ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn supervised_params(&self) -> &[ParamId] {
        &self.supervised_ids
    }

    /// Empty when the model has no encoder-decoder.
    pub fn autoencoder_params(&self) -> &[ParamId] {
        &self.autoencoder_ids
    }

    pub fn has_autoencoder(&self) -> bool {
        self.autoencoder.is_some()
    }

    pub fn lambda(&self) -> f64 {
        self.config.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::InvalidConfig(format!("lambda {lambda} must be finite and non-negative")));
        }
        self.config.lambda = lambda;
        Ok(())
    }

    fn fusion_active(&self) -> bool {
        self.autoencoder.is_some() && self.config.lambda != 0.0
    }

    fn autoencoder(&self) -> Result<&Autoencoder> {
        self.autoencoder
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("model was built without an encoder-decoder".into()))
    }

    pub fn bind(&self, g: &mut Graph) -> Result<Binding> {
        self.params.bind(g)
    }

    fn gap_steps(g: &mut Graph, batch: &Batch, steps: usize) -> Result<Vec<Var>> {
        (0..steps).map(|t| column(g, batch.step_features(t))).collect()
    }

    /// Runs the encoder over the gap feature; markers are never read.
    pub fn encode(&self, g: &mut Graph, p: &Binding, batch: &Batch) -> Result<Encoded> {
        let ae = self.autoencoder()?;
        let inputs = Self::gap_steps(g, batch, batch.max_len)?;
        let mask: Vec<Vec<bool>> = (0..batch.max_len).map(|t| batch.step_mask(t)).collect();
        let un = ae.encoder.unroll(g, p, &inputs, None, Some(&mask))?;
        Ok(Encoded { steps: un.outputs, summary: un.finals })
    }

    /// Decoder output for every position, `[T*B x 1]` with row `t*B + b`.
    pub fn reconstruct(&self, g: &mut Graph, p: &Binding, batch: &Batch, encoded: &Encoded) -> Result<Var> {
        let ae = self.autoencoder()?;
        let b = batch.batch_size();
        let outputs = match self.config.decoder {
            DecoderMode::TeacherForced => {
                let mut inputs = vec![g.constant(Tensor::zeros(&[b, 1]))?];
                for t in 1..batch.max_len {
                    inputs.push(column(g, batch.step_features(t - 1))?);
                }
                let un = ae.decoder.unroll(g, p, &inputs, Some(&encoded.summary), None)?;
                let rows = g.concat(&un.outputs, Axis::First)?;
                ae.output.forward(g, p, rows)?
            }
            DecoderMode::FreeRunning => {
                let mut states = encoded.summary.clone();
                let mut input = g.constant(Tensor::zeros(&[b, 1]))?;
                let mut outs = Vec::with_capacity(batch.max_len);
                for _ in 0..batch.max_len {
                    let mut x = input;
                    for (cell, state) in ae.decoder.cells.iter().zip(states.iter_mut()) {
                        *state = cell.step(g, p, x, state)?;
                        x = state.hidden;
                    }
                    input = ae.output.forward(g, p, x)?;
                    outs.push(input);
                }
                g.concat(&outs, Axis::First)?
            }
        };
        Ok(outputs)
    }

    fn time_major(batch: &Batch, values: &[f64]) -> Vec<f64> {
        let b = batch.batch_size();
        (0..batch.max_len * b).map(|r| values[batch.index(r % b, r / b)]).collect()
    }

    fn time_major_mask(batch: &Batch) -> Vec<bool> {
        let b = batch.batch_size();
        (0..batch.max_len * b).map(|r| batch.mask[batch.index(r % b, r / b)]).collect()
    }

    /// Masked squared reconstruction error of an encoded batch.
    pub fn reconstruction_error(&self, g: &mut Graph, p: &Binding, batch: &Batch, encoded: &Encoded) -> Result<SquaredError> {
        let pred = self.reconstruct(g, p, batch, encoded)?;
        let target = Self::time_major(batch, &batch.features);
        masked_squared_error(g, pred, &target, &Self::time_major_mask(batch))
    }

    /// Mean squared reconstruction error over real positions.
    pub fn reconstruction_loss(&self, g: &mut Graph, p: &Binding, batch: &Batch) -> Result<Var> {
        let encoded = self.encode(g, p, batch)?;
        let err = self.reconstruction_error(g, p, batch, &encoded)?;
        if err.count == 0 {
            return Err(Error::EmptyMask);
        }
        g.scale(err.sse, 1.0 / err.count as f64)
    }

    fn supervised_steps(
        &self,
        g: &mut Graph,
        p: &Binding,
        batch: &Batch,
        steps: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        let mut inputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let mask = batch.step_mask(t);
            let markers = batch.step_markers(t);
            for (b, (&real, m)) in mask.iter().zip(&markers).enumerate() {
                if real && m.is_none() {
                    return Err(Error::MissingMarkers(format!(
                        "sequence `{}` has no marker at event {t}; the supervised branch needs labeled input",
                        batch.ids[b]
                    )));
                }
            }
            let gap = column(g, batch.step_features(t))?;
            let emb = self.embedding.lookup(g, p, &markers)?;
            inputs.push(g.concat(&[gap, emb], Axis::Last)?);
        }
        let mut out = self.supervised.unroll(g, p, &inputs, None, None)?.outputs;
        if let Some(rng) = rng {
            for v in &mut out {
                *v = dropout(g, *v, self.config.dropout, true, rng)?;
            }
        }
        Ok(out)
    }

    /// Supervised LSTM output for every step of a fully labeled batch.
    /// Passing `rng` switches dropout on.
    pub fn supervised_embedding(
        &self,
        g: &mut Graph,
        p: &Binding,
        batch: &Batch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        self.supervised_steps(g, p, batch, batch.max_len, rng)
    }

    /// Fused embeddings for the steps that have a next event (`0..T-1`),
    /// plus the encoder output when it was needed.
    fn fused_steps(
        &self,
        g: &mut Graph,
        p: &Binding,
        batch: &Batch,
        need_encoder: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<Var>, Option<Encoded>)> {
        let steps = batch.max_len - 1;
        let encoded = if need_encoder || self.fusion_active() { Some(self.encode(g, p, batch)?) } else { None };
        let mut fused = self.supervised_steps(g, p, batch, steps, rng)?;
        if self.fusion_active() {
            let enc = encoded.as_ref().expect("encoded when fusion is active");
            for (f, &e) in fused.iter_mut().zip(&enc.steps) {
                *f = fuse(g, *f, e, self.config.lambda)?;
            }
        }
        Ok((fused, encoded))
    }

    /// Marker log-probabilities `[N x M]` and predicted gaps `[N x 1]` for
    /// fused embeddings `[N x H]`.
    pub fn heads(&self, g: &mut Graph, p: &Binding, fused: Var) -> Result<(Var, Var)> {
        let m = self.marker_head[0].forward(g, p, fused)?;
        let m = self.marker_head[1].forward(g, p, m)?;
        let log_probs = g.log_softmax(m)?;
        let t = self.time_head[0].forward(g, p, fused)?;
        let gaps = self.time_head[1].forward(g, p, t)?;
        Ok((log_probs, gaps))
    }

    /// Predictions from a single step's fused embedding `[B x H]`.
    pub fn predict_step(&self, g: &mut Graph, p: &Binding, fused: Var) -> Result<Vec<StepPrediction>> {
        let (log_probs, gaps) = self.heads(g, p, fused)?;
        let (lp, gv) = (g.value(log_probs), g.value(gaps));
        Ok((0..lp.rows())
            .map(|r| StepPrediction { probs: lp.row(r).iter().map(|v| v.exp()).collect(), gap: gv.data()[r] })
            .collect())
    }

    /// Next-event predictions for each sequence of a labeled batch; sequence
    /// `b` gets `lengths[b] - 1` entries.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Vec<StepPrediction>>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g)?;
        let (fused, _) = self.fused_steps(&mut g, &p, batch, false, None)?;
        let rows = g.concat(&fused, Axis::First)?;
        let flat = self.predict_step(&mut g, &p, rows)?;
        let b = batch.batch_size();
        Ok((0..b)
            .map(|s| (0..batch.lengths[s] - 1).map(|t| flat[t * b + s].clone()).collect())
            .collect())
    }

    fn supervised_terms(&self, g: &mut Graph, p: &Binding, batch: &Batch, fused: &[Var]) -> Result<(Var, Var)> {
        let b = batch.batch_size();
        let n = fused.len() * b;
        let mut targets = Vec::with_capacity(n);
        let mut gaps = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        for r in 0..n {
            let k = batch.index(r % b, r / b + 1);
            mask.push(batch.mask[k]);
            targets.push(if batch.mask[k] { batch.markers[k] } else { None });
            gaps.push(if batch.mask[k] { batch.features[k] } else { 0.0 });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::NoTargets);
        }
        if let Some(r) = (0..n).find(|&r| mask[r] && targets[r].is_none()) {
            return Err(Error::MissingMarkers(format!("sequence `{}` lacks marker targets", batch.ids[r % b])));
        }
        let rows = g.concat(fused, Axis::First)?;
        let (log_probs, pred) = self.heads(g, p, rows)?;
        let picked = g.gather(log_probs, &targets)?;
        let nll = g.sum(picked)?;
        let marker = g.scale(nll, -1.0 / count as f64)?;

        let target = column(g, gaps)?;
        let weights = column(g, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
        let diff = g.sub(pred, target)?;
        let abs = g.abs(diff)?;
        let abs = g.mul(abs, weights)?;
        let total = g.sum(abs)?;
        let time = g.scale(total, 1.0 / count as f64)?;
        Ok((marker, time))
    }

    /// Mean next-marker cross-entropy and mean absolute next-gap error.
    pub fn supervised_losses(
        &self,
        g: &mut Graph,
        p: &Binding,
        batch: &Batch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let (fused, _) = self.fused_steps(g, p, batch, false, rng)?;
        self.supervised_terms(g, p, batch, &fused)
    }

    /// Loss of a labeled step. With `recon`, the reconstruction error of the
    /// same batch's gaps is added.
    pub fn labeled_loss(
        &self,
        g: &mut Graph,
        p: &Binding,
        batch: &Batch,
        recon: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossTerms> {
        self.composite_inner(g, p, batch, None, recon, rng)
    }

    /// `L_marker + L_time + L_recon`, the reconstruction mean taken over the
    /// real positions of both batches together.
    pub fn composite_loss(
        &self,
        g: &mut Graph,
        p: &Binding,
        labeled: &Batch,
        unlabeled: Option<&Batch>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossTerms> {
        self.composite_inner(g, p, labeled, unlabeled, true, rng)
    }

    fn composite_inner(
        &self,
        g: &mut Graph,
        p: &Binding,
        labeled: &Batch,
        unlabeled: Option<&Batch>,
        recon: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossTerms> {
        let (fused, encoded) = self.fused_steps(g, p, labeled, recon, rng)?;
        let (marker, time) = self.supervised_terms(g, p, labeled, &fused)?;
        let sup = g.add(marker, time)?;
        if !recon {
            return Ok(LossTerms { marker, time, recon: None, total: sup });
        }
        let enc = encoded.expect("encoder runs when reconstruction is on");
        let mut err = self.reconstruction_error(g, p, labeled, &enc)?;
        if let Some(u) = unlabeled {
            let enc_u = self.encode(g, p, u)?;
            let e = self.reconstruction_error(g, p, u, &enc_u)?;
            err = SquaredError { sse: g.add(err.sse, e.sse)?, count: err.count + e.count };
        }
        let r = g.scale(err.sse, 1.0 / err.count as f64)?;
        let total = g.add(sup, r)?;
        Ok(LossTerms { marker, time, recon: Some(r), total })
    }
}
