//! Autoencoder-adversarial network.
//!
//! A tanh encoder maps an embedding to a latent code, a decoder reconstructs
//! the embedding from it, and three branch heads (gender, accent, speaker)
//! classify the latent code through a gradient-reversal layer. Heads descend
//! their cross-entropy; the encoder descends the reconstruction error while
//! ascending `lambda` times the summed branch losses; the decoder only sees
//! the reconstruction error.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Attribute, Corpus};
use crate::error::{Error, Result};
use crate::neural::{
    mse_loss, softmax_cross_entropy, Activation, AdamConfig, Batch, DenseCache, DenseLayer,
    GradStore, GradientReversal, LayerGrads, Optimizer, OptimizerConfig,
};

/// Default trade-off between reconstruction and the adversarial branches.
pub const DEFAULT_LAMBDA: f64 = 8.0;

/// Architecture descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AanDims {
    pub input: usize,
    pub hidden: usize,
    pub latent: usize,
    pub branch_hidden: usize,
    pub gender_classes: usize,
    pub accent_classes: usize,
    pub speaker_classes: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
}

impl AanDims {
    /// 512-wide 2+2 autoencoder, 128-wide branches, 2/30/1251 classes.
    pub fn paper_scale() -> Self {
        AanDims {
            input: 512,
            hidden: 512,
            latent: 512,
            branch_hidden: 128,
            gender_classes: 2,
            accent_classes: 30,
            speaker_classes: 1251,
            encoder_depth: 2,
            decoder_depth: 2,
        }
    }

    /// Desk-scale widths for a corpus of dimension `input`.
    pub fn desk(input: usize, gender: usize, accent: usize, speaker: usize) -> Self {
        AanDims {
            input,
            hidden: 256,
            latent: 96,
            branch_hidden: 64,
            gender_classes: gender,
            accent_classes: accent,
            speaker_classes: speaker,
            encoder_depth: 2,
            decoder_depth: 2,
        }
    }

    /// Desk-scale widths sized to the vocabularies of `corpus`.
    pub fn for_corpus(corpus: &Corpus) -> Self {
        let v = corpus.vocabs();
        Self::desk(
            corpus.dim(),
            v.gender.len(),
            v.accent.len(),
            v.speaker.len(),
        )
    }

    pub fn classes(&self, attribute: Attribute) -> usize {
        match attribute {
            Attribute::Speaker => self.speaker_classes,
            Attribute::Gender => self.gender_classes,
            Attribute::Accent => self.accent_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("input", self.input),
            ("hidden", self.hidden),
            ("latent", self.latent),
            ("branch_hidden", self.branch_hidden),
            ("gender_classes", self.gender_classes),
            ("accent_classes", self.accent_classes),
            ("speaker_classes", self.speaker_classes),
            ("encoder_depth", self.encoder_depth),
            ("decoder_depth", self.decoder_depth),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(std::iter::repeat_n(self.hidden, self.encoder_depth - 1));
        w.push(self.latent);
        w
    }

    fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent];
        w.extend(std::iter::repeat_n(self.hidden, self.decoder_depth - 1));
        w.push(self.input);
        w
    }
}

/// Two-layer classifier head: ReLU hidden layer, then linear logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub hidden: DenseLayer,
    pub logits: DenseLayer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` per layer.
    FanIn,
    /// Uniform in `±bound` for every layer.
    Uniform(f64),
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AanModel {
    pub encoder: Vec<DenseLayer>,
    pub decoder: Vec<DenseLayer>,
    pub gender_head: Branch,
    pub accent_head: Branch,
    pub speaker_head: Branch,
    pub lambda: f64,
    dims: AanDims,
}

/// Parameter groups with distinct roles in the min-max objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Head(Attribute),
}

#[derive(Debug, Clone)]
pub struct AanOutput {
    pub reconstruction: Batch,
    pub latent: Batch,
    pub gender_logits: Batch,
    pub accent_logits: Batch,
    pub speaker_logits: Batch,
}

impl AanOutput {
    pub fn logits(&self, attribute: Attribute) -> &Batch {
        match attribute {
            Attribute::Speaker => &self.speaker_logits,
            Attribute::Gender => &self.gender_logits,
            Attribute::Accent => &self.accent_logits,
        }
    }
}

/// Mean losses over a batch. `total_reported` is the plain sum; it is not
/// the min-max objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_au: f64,
    pub l_gender: f64,
    pub l_accent: f64,
    pub l_speaker: f64,
    pub total_reported: f64,
}

impl LossBreakdown {
    fn new(l_au: f64, l_gender: f64, l_accent: f64, l_speaker: f64) -> Self {
        LossBreakdown {
            l_au,
            l_gender,
            l_accent,
            l_speaker,
            total_reported: l_au + l_gender + l_accent + l_speaker,
        }
    }

    pub fn l_z(&self) -> f64 {
        self.l_gender + self.l_accent + self.l_speaker
    }

    pub fn is_finite(&self) -> bool {
        [self.l_au, self.l_gender, self.l_accent, self.l_speaker]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Class indices for the three branches, one per batch row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchLabels {
    pub gender: Vec<usize>,
    pub accent: Vec<usize>,
    pub speaker: Vec<usize>,
}

impl BatchLabels {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        BatchLabels {
            gender: corpus.label_indices(Attribute::Gender),
            accent: corpus.label_indices(Attribute::Accent),
            speaker: corpus.label_indices(Attribute::Speaker),
        }
    }

    pub fn get(&self, attribute: Attribute) -> &[usize] {
        match attribute {
            Attribute::Speaker => &self.speaker,
            Attribute::Gender => &self.gender,
            Attribute::Accent => &self.accent,
        }
    }

    pub fn len(&self) -> usize {
        self.gender.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gender.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |v: &[usize]| rows.iter().map(|&i| v[i]).collect();
        BatchLabels {
            gender: pick(&self.gender),
            accent: pick(&self.accent),
            speaker: pick(&self.speaker),
        }
    }
}

fn make_layer(
    input: usize,
    output: usize,
    act: Activation,
    init: Init,
    rng: &mut ChaCha8Rng,
) -> DenseLayer {
    let bound = match init {
        Init::FanIn => 1.0 / (input as f64).sqrt(),
        Init::Uniform(b) => b,
        Init::Zeros => 0.0,
    };
    DenseLayer::uniform(input, output, act, bound, rng)
}

/// Builds an AAN with fan-in uniform weights and zero biases.
pub fn build_aan(dims: AanDims, lambda: f64, seed: u64) -> Result<AanModel> {
    AanModel::with_init(dims, lambda, seed, Init::FanIn)
}

struct ForwardTrace {
    encoder: Vec<DenseCache>,
    decoder: Vec<DenseCache>,
    heads: [(DenseCache, DenseCache); 3],
    output: AanOutput,
}

impl AanModel {
    pub fn with_init(dims: AanDims, lambda: f64, seed: u64, init: Init) -> Result<Self> {
        dims.validate()?;
        GradientReversal::new(lambda)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain =
            |widths: Vec<usize>, last: Activation, rng: &mut ChaCha8Rng| -> Vec<DenseLayer> {
                let n = widths.len() - 1;
                widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| {
                        let act = if i + 1 == n { last } else { Activation::Tanh };
                        make_layer(w[0], w[1], act, init, rng)
                    })
                    .collect()
            };
        let encoder = chain(dims.encoder_widths(), Activation::Tanh, &mut rng);
        let decoder = chain(dims.decoder_widths(), Activation::Linear, &mut rng);
        let mut branch = |classes: usize| Branch {
            hidden: make_layer(
                dims.latent,
                dims.branch_hidden,
                Activation::Relu,
                init,
                &mut rng,
            ),
            logits: make_layer(
                dims.branch_hidden,
                classes,
                Activation::Linear,
                init,
                &mut rng,
            ),
        };
        let gender_head = branch(dims.gender_classes);
        let accent_head = branch(dims.accent_classes);
        let speaker_head = branch(dims.speaker_classes);
        Ok(AanModel {
            encoder,
            decoder,
            gender_head,
            accent_head,
            speaker_head,
            lambda,
            dims,
        })
    }

    pub fn dims(&self) -> AanDims {
        self.dims
    }

    pub fn head(&self, attribute: Attribute) -> &Branch {
        match attribute {
            Attribute::Speaker => &self.speaker_head,
            Attribute::Gender => &self.gender_head,
            Attribute::Accent => &self.accent_head,
        }
    }

    /// All layers in declaration order: encoder, decoder, then the gender,
    /// accent and speaker heads (hidden, logits).
    pub fn layers(&self) -> Vec<&DenseLayer> {
        let mut out: Vec<&DenseLayer> = self.encoder.iter().chain(&self.decoder).collect();
        for b in [&self.gender_head, &self.accent_head, &self.speaker_head] {
            out.push(&b.hidden);
            out.push(&b.logits);
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        let mut out: Vec<&mut DenseLayer> = self
            .encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .collect();
        for b in [
            &mut self.gender_head,
            &mut self.accent_head,
            &mut self.speaker_head,
        ] {
            out.push(&mut b.hidden);
            out.push(&mut b.logits);
        }
        out
    }

    /// Range of [`AanModel::layers`] indices belonging to `group`.
    pub fn layer_range(&self, group: ParamGroup) -> std::ops::Range<usize> {
        let e = self.encoder.len();
        let d = self.decoder.len();
        match group {
            ParamGroup::Encoder => 0..e,
            ParamGroup::Decoder => e..e + d,
            ParamGroup::Head(a) => {
                let k = match a {
                    Attribute::Gender => 0,
                    Attribute::Accent => 1,
                    Attribute::Speaker => 2,
                };
                e + d + 2 * k..e + d + 2 * k + 2
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers().iter().all(|l| l.is_finite())
    }

    /// Parameters of `layers[range]`, each layer weights row-major then bias.
    pub fn flat_params(&self, range: std::ops::Range<usize>) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers()[range] {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_flat_params(&mut self, range: std::ops::Range<usize>, flat: &[f64]) -> Result<()> {
        let mut layers = self.layers_mut();
        let expected: usize = layers[range.clone()].iter().map(|l| l.param_count()).sum();
        if flat.len() != expected {
            return Err(Error::Shape {
                context: "flat parameter vector",
                expected,
                actual: flat.len(),
            });
        }
        let mut pos = 0;
        for l in &mut layers[range] {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = flat[pos];
                pos += 1;
            }
        }
        Ok(())
    }

    pub fn group_params(&self, group: ParamGroup) -> Vec<f64> {
        self.flat_params(self.layer_range(group))
    }

    pub fn set_group_params(&mut self, group: ParamGroup, flat: &[f64]) -> Result<()> {
        let range = self.layer_range(group);
        self.set_flat_params(range, flat)
    }

    fn check_input(&self, x: &Batch) -> Result<()> {
        if x.ncols() != self.dims.input {
            return Err(Error::Shape {
                context: "aan input",
                expected: self.dims.input,
                actual: x.ncols(),
            });
        }
        if x.nrows() == 0 {
            return Err(Error::invalid("batch", "must contain at least one row"));
        }
        Ok(())
    }

    fn trace(&self, x: &Batch) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let run = |layers: &[DenseLayer], input: &Batch| -> Result<(Batch, Vec<DenseCache>)> {
            let mut caches = Vec::with_capacity(layers.len());
            let mut h = input.clone();
            for layer in layers {
                let (out, cache) = layer.forward(&h)?;
                caches.push(cache);
                h = out;
            }
            Ok((h, caches))
        };
        let (latent, encoder) = run(&self.encoder, x)?;
        let (reconstruction, decoder) = run(&self.decoder, &latent)?;
        let grl = GradientReversal::new(self.lambda)?;
        let branch = |b: &Branch| -> Result<(Batch, (DenseCache, DenseCache))> {
            let (h, c1) = b.hidden.forward(grl.forward(&latent))?;
            let (logits, c2) = b.logits.forward(&h)?;
            Ok((logits, (c1, c2)))
        };
        let (gender_logits, gc) = branch(&self.gender_head)?;
        let (accent_logits, ac) = branch(&self.accent_head)?;
        let (speaker_logits, sc) = branch(&self.speaker_head)?;
        Ok(ForwardTrace {
            encoder,
            decoder,
            heads: [gc, ac, sc],
            output: AanOutput {
                reconstruction,
                latent,
                gender_logits,
                accent_logits,
                speaker_logits,
            },
        })
    }

    pub fn forward(&self, x: &Batch) -> Result<AanOutput> {
        Ok(self.trace(x)?.output)
    }

    /// Reconstructions only.
    pub fn reconstruct(&self, x: &Batch) -> Result<Batch> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in self.encoder.iter().chain(&self.decoder) {
            h = layer.forward(&h)?.0;
        }
        Ok(h)
    }

    fn check_labels(&self, x: &Batch, labels: &BatchLabels) -> Result<()> {
        for a in Attribute::ALL {
            let l = labels.get(a);
            if l.len() != x.nrows() {
                return Err(Error::Shape {
                    context: "batch labels",
                    expected: x.nrows(),
                    actual: l.len(),
                });
            }
        }
        Ok(())
    }

    pub fn losses(&self, x: &Batch, labels: &BatchLabels) -> Result<LossBreakdown> {
        self.check_labels(x, labels)?;
        let out = self.forward(x)?;
        let l_au = mse_loss(&out.reconstruction, x)?.0;
        let l_g = softmax_cross_entropy(&out.gender_logits, &labels.gender)?.0;
        let l_a = softmax_cross_entropy(&out.accent_logits, &labels.accent)?.0;
        let l_s = softmax_cross_entropy(&out.speaker_logits, &labels.speaker)?.0;
        Ok(LossBreakdown::new(l_au, l_g, l_a, l_s))
    }

    /// Losses and the gradient each parameter group descends: heads get
    /// `d l_k / d theta_k`, the decoder `d l_au / d theta_d`, the encoder
    /// `d l_au / d theta_e - lambda * sum_k d l_k / d theta_e` through the
    /// reversal layer.
    pub fn loss_and_grads(
        &self,
        x: &Batch,
        labels: &BatchLabels,
    ) -> Result<(LossBreakdown, GradStore)> {
        self.check_labels(x, labels)?;
        let trace = self.trace(x)?;
        let out = &trace.output;
        let (l_au, g_rec) = mse_loss(&out.reconstruction, x)?;

        let mut decoder_grads = Vec::with_capacity(self.decoder.len());
        let mut g = g_rec;
        for (layer, cache) in self.decoder.iter().zip(&trace.decoder).rev() {
            let (gin, grads) = layer.backward(cache, &g)?;
            decoder_grads.push(grads);
            g = gin;
        }
        decoder_grads.reverse();
        let mut g_latent = g;

        let grl = GradientReversal::new(self.lambda)?;
        let mut head_losses = [0.0; 3];
        let mut head_grads: Vec<LayerGrads> = Vec::with_capacity(6);
        let heads = [&self.gender_head, &self.accent_head, &self.speaker_head];
        let head_labels = [&labels.gender, &labels.accent, &labels.speaker];
        for (k, (branch, (c_hidden, c_logits))) in heads.iter().zip(&trace.heads).enumerate() {
            let (loss, g_logits) = softmax_cross_entropy(c_logits.output(), head_labels[k])?;
            head_losses[k] = loss;
            let (g_h, grads_logits) = branch.logits.backward(c_logits, &g_logits)?;
            let (g_z, grads_hidden) = branch.hidden.backward(c_hidden, &g_h)?;
            head_grads.push(grads_hidden);
            head_grads.push(grads_logits);
            g_latent += &grl.backward(&g_z);
        }

        let mut encoder_grads = Vec::with_capacity(self.encoder.len());
        let mut g = g_latent;
        for (layer, cache) in self.encoder.iter().zip(&trace.encoder).rev() {
            let (gin, grads) = layer.backward(cache, &g)?;
            encoder_grads.push(grads);
            g = gin;
        }
        encoder_grads.reverse();

        let losses = LossBreakdown::new(l_au, head_losses[0], head_losses[1], head_losses[2]);
        if !losses.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss {losses:?}")));
        }
        let mut layers = encoder_grads;
        layers.extend(decoder_grads);
        layers.extend(head_grads);
        Ok((losses, GradStore { layers }))
    }

    /// Top-1 accuracy of each head on `(x, labels)`: (gender, accent, speaker).
    pub fn head_accuracies(&self, x: &Batch, labels: &BatchLabels) -> Result<HeadAccuracy> {
        self.check_labels(x, labels)?;
        let out = self.forward(x)?;
        let acc = |a: Attribute| accuracy(out.logits(a), labels.get(a));
        Ok(HeadAccuracy {
            gender: acc(Attribute::Gender),
            accent: acc(Attribute::Accent),
            speaker: acc(Attribute::Speaker),
        })
    }

    fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.dim() != self.dims.input {
            return Err(Error::Shape {
                context: "corpus dimension",
                expected: self.dims.input,
                actual: corpus.dim(),
            });
        }
        for a in Attribute::ALL {
            let n = corpus.vocabs().get(a).len();
            if n > self.dims.classes(a) {
                return Err(Error::invalid(
                    "corpus",
                    format!(
                        "{} vocabulary has {n} labels, model head has {}",
                        a.name(),
                        self.dims.classes(a)
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Index of the row maximum (first on ties).
pub fn argmax_rows(logits: &Batch) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &Batch, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HeadAccuracy {
    pub gender: f64,
    pub accent: f64,
    pub speaker: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// L2 penalty added to every weight gradient (biases excluded).
    pub weight_decay: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: DEFAULT_LAMBDA,
            epochs: 600,
            batch_size: 32,
            optimizer: OptimizerConfig::Adam(AdamConfig {
                lr: 3e-4,
                beta1: 0.5,
                ..AdamConfig::default()
            }),
            weight_decay: 0.0,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "weight_decay",
                "must be finite and non-negative",
            ));
        }
        GradientReversal::new(self.lambda)?;
        self.optimizer.validate()
    }
}

/// Mean losses and validation head accuracies after one epoch. Epoch 0 is
/// the untrained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub valid: LossBreakdown,
    pub valid_accuracy: HeadAccuracy,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (lowest valid `l_au`).
    pub best_epoch: usize,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

impl TrainingHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }
}

/// Minibatch training with per-epoch evaluation. Returns the parameters of
/// the epoch with the lowest validation reconstruction loss; on divergence
/// training stops early and that checkpoint is returned with
/// [`TrainingHistory::diverged`] set.
pub fn train(
    model: &AanModel,
    train_corpus: &Corpus,
    valid_corpus: &Corpus,
    config: &TrainConfig,
) -> Result<(AanModel, TrainingHistory)> {
    config.validate()?;
    model.check_corpus(train_corpus)?;
    model.check_corpus(valid_corpus)?;
    if valid_corpus.is_empty() {
        return Err(Error::invalid("valid_corpus", "must not be empty"));
    }
    let mut model = model.clone();
    model.lambda = config.lambda;

    let x_train = train_corpus.matrix();
    let y_train = BatchLabels::from_corpus(train_corpus);
    let x_valid = valid_corpus.matrix();
    let y_valid = BatchLabels::from_corpus(valid_corpus);

    let evaluate = |m: &AanModel, epoch: usize| -> Result<EpochRecord> {
        Ok(EpochRecord {
            epoch,
            train: m.losses(&x_train, &y_train)?,
            valid: m.losses(&x_valid, &y_valid)?,
            valid_accuracy: m.head_accuracies(&x_valid, &y_valid)?,
        })
    };

    let mut history = TrainingHistory::default();
    let first = evaluate(&model, 0)?;
    if !first.train.is_finite() || !first.valid.is_finite() {
        return Err(Error::Divergence(
            "non-finite loss at initialization".into(),
        ));
    }
    history.epochs.push(first);
    let mut best = model.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..x_train.nrows()).collect();
    let mut optimizer = Optimizer::new(config.optimizer, model.layers());

    'epochs: for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(config.batch_size) {
            let xb = x_train.select(Axis(0), chunk);
            let yb = y_train.select(chunk);
            let step = model.loss_and_grads(&xb, &yb).and_then(|(_, mut grads)| {
                if config.weight_decay > 0.0 {
                    for (g, layer) in grads.layers.iter_mut().zip(model.layers()) {
                        g.weights.scaled_add(config.weight_decay, &layer.weights);
                    }
                }
                optimizer.step(&mut model.layers_mut(), &grads)
            });
            if let Err(e) = step {
                match e {
                    Error::Divergence(reason) => {
                        log::warn!(
                            "epoch {epoch}: {reason}; keeping epoch {}",
                            history.best_epoch
                        );
                        history.diverged = Some(reason);
                        break 'epochs;
                    }
                    other => return Err(other),
                }
            }
        }
        let record = evaluate(&model, epoch)?;
        if !record.train.is_finite() || !record.valid.is_finite() || !model.is_finite() {
            history.diverged = Some(format!("non-finite loss after epoch {epoch}"));
            break;
        }
        if record.valid.l_au < history.best().valid.l_au {
            history.best_epoch = epoch;
            best = model.clone();
        }
        log::debug!(
            "epoch {epoch}: train l_au {:.4} valid l_au {:.4} spk acc {:.3}",
            record.train.l_au,
            record.valid.l_au,
            record.valid_accuracy.speaker
        );
        history.epochs.push(record);
    }
    Ok((best, history))
}

const MAGIC: &[u8; 4] = b"AAN1";
const FORMAT_VERSION: u32 = 1;

impl AanModel {
    /// Serializes to the checkpoint layout: magic `AAN1`, `u32` version,
    /// nine `u64` architecture fields, `f64` lambda, `u64` parameter count,
    /// then every parameter as `f64`, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dims;
        let mut out = Vec::with_capacity(4 + 4 + 9 * 8 + 8 + 8 + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [
            d.input,
            d.hidden,
            d.latent,
            d.branch_hidden,
            d.gender_classes,
            d.accent_classes,
            d.speaker_classes,
            d.encoder_depth,
            d.decoder_depth,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.extend_from_slice(&(self.param_count() as u64).to_le_bytes());
        for l in self.layers() {
            for v in l.weights.iter().chain(l.bias.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(what.to_owned());
        let mut cursor = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(corrupt("truncated file"));
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(corrupt("bad magic, not an AAN checkpoint"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mut field = || -> Result<usize> {
            let v = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            usize::try_from(v).map_err(|_| corrupt("architecture field overflows usize"))
        };
        let dims = AanDims {
            input: field()?,
            hidden: field()?,
            latent: field()?,
            branch_hidden: field()?,
            gender_classes: field()?,
            accent_classes: field()?,
            speaker_classes: field()?,
            encoder_depth: field()?,
            decoder_depth: field()?,
        };
        let lambda = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut model = AanModel::with_init(dims, lambda, 0, Init::Zeros)?;
        if count != model.param_count() {
            return Err(corrupt("parameter count does not match architecture"));
        }
        let raw = take(count * 8)?;
        if !cursor.is_empty() {
            return Err(corrupt("trailing bytes after parameters"));
        }
        let flat: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let n = model.layers().len();
        model.set_flat_params(0..n, &flat)?;
        if !model.is_finite() {
            return Err(corrupt("non-finite parameters"));
        }
        Ok(model)
    }
}

pub fn save_model(model: &AanModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AanModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    AanModel::from_bytes(&bytes)
}

/// Maximum relative finite-difference errors per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub encoder: f64,
    pub decoder: f64,
    pub gender_head: f64,
    pub accent_head: f64,
    pub speaker_head: f64,
}

impl GradcheckReport {
    pub fn max(&self) -> f64 {
        [
            self.encoder,
            self.decoder,
            self.gender_head,
            self.accent_head,
            self.speaker_head,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Checks [`AanModel::loss_and_grads`] against central differences of the
/// scalar each group descends: `l_au - lambda * l_z` for the encoder,
/// `l_au` for the decoder and `l_k` for head `k`.
pub fn gradcheck(
    model: &AanModel,
    x: &Batch,
    labels: &BatchLabels,
    eps: f64,
) -> Result<GradcheckReport> {
    let (_, grads) = model.loss_and_grads(x, labels)?;
    let lambda = model.lambda;
    let check = |group: ParamGroup, objective: &dyn Fn(&LossBreakdown) -> f64| -> Result<f64> {
        let range = model.layer_range(group);
        let analytic = GradStore {
            layers: grads.layers[range].to_vec(),
        }
        .to_flat();
        let mut probe = model.clone();
        crate::neural::finite_difference_check(
            |p| {
                probe.set_group_params(group, p).expect("same length");
                objective(&probe.losses(x, labels).expect("validated batch"))
            },
            &model.group_params(group),
            &analytic,
            eps,
        )
    };
    Ok(GradcheckReport {
        encoder: check(ParamGroup::Encoder, &|l| l.l_au - lambda * l.l_z())?,
        decoder: check(ParamGroup::Decoder, &|l| l.l_au)?,
        gender_head: check(ParamGroup::Head(Attribute::Gender), &|l| l.l_gender)?,
        accent_head: check(ParamGroup::Head(Attribute::Accent), &|l| l.l_accent)?,
        speaker_head: check(ParamGroup::Head(Attribute::Speaker), &|l| l.l_speaker)?,
    })
}

/// The tiny configuration used for gradient verification: D = 8,
/// hidden = 8, latent = 4, classes (2, 3, 5), batch of 4, weights uniform
/// in `±0.1`, random biases and inputs.
pub fn tiny_gradcheck_problem(seed: u64, lambda: f64) -> Result<(AanModel, Batch, BatchLabels)> {
    use rand::Rng;
    let dims = AanDims {
        input: 8,
        hidden: 8,
        latent: 4,
        branch_hidden: 8,
        gender_classes: 2,
        accent_classes: 3,
        speaker_classes: 5,
        encoder_depth: 2,
        decoder_depth: 2,
    };
    let mut model = AanModel::with_init(dims, lambda, seed, Init::Uniform(0.1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for layer in model.layers_mut() {
        layer.bias = Array1::from_shape_simple_fn(layer.bias.len(), || rng.random_range(-0.1..0.1));
    }
    let x = Array2::from_shape_simple_fn((4, 8), || rng.random_range(-1.0..1.0));
    let labels = BatchLabels {
        gender: (0..4).map(|_| rng.random_range(0..2)).collect(),
        accent: (0..4).map(|_| rng.random_range(0..3)).collect(),
        speaker: (0..4).map(|_| rng.random_range(0..5)).collect(),
    };
    Ok((model, x, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_corpus, split_corpus, CorpusSpec};
    use ndarray::s;

    fn tiny() -> (AanModel, Batch, BatchLabels) {
        tiny_gradcheck_problem(5, 8.0).unwrap()
    }

    #[test]
    fn paper_scale_head_widths() {
        let m = build_aan(AanDims::paper_scale(), DEFAULT_LAMBDA, 1).unwrap();
        assert_eq!(m.speaker_head.logits.output_size(), 1251);
        assert_eq!(m.accent_head.logits.output_size(), 30);
        assert_eq!(m.gender_head.logits.output_size(), 2);
        assert_eq!(m.encoder.len() + m.decoder.len(), 4);
        assert!(m
            .encoder
            .iter()
            .chain(&m.decoder)
            .all(|l| l.output_size() == 512));
        assert_eq!(m.gender_head.hidden.output_size(), 128);
    }

    #[test]
    fn build_is_deterministic() {
        let dims = AanDims::desk(16, 2, 3, 6);
        assert_eq!(
            build_aan(dims, 8.0, 3).unwrap(),
            build_aan(dims, 8.0, 3).unwrap()
        );
        assert_ne!(
            build_aan(dims, 8.0, 3).unwrap(),
            build_aan(dims, 8.0, 4).unwrap()
        );
    }

    #[test]
    fn build_rejects_bad_dims() {
        let mut dims = AanDims::desk(16, 2, 3, 6);
        dims.latent = 0;
        assert!(build_aan(dims, 8.0, 0).is_err());
        assert!(build_aan(AanDims::desk(16, 2, 3, 6), -1.0, 0).is_err());
    }

    #[test]
    fn output_shapes() {
        let (m, x, _) = tiny();
        let out = m.forward(&x).unwrap();
        assert_eq!(out.reconstruction.dim(), (4, 8));
        assert_eq!(out.latent.dim(), (4, 4));
        assert_eq!(out.gender_logits.ncols(), 2);
        assert_eq!(out.accent_logits.ncols(), 3);
        assert_eq!(out.speaker_logits.ncols(), 5);
        assert!(m.forward(&Array2::zeros((2, 7))).is_err());
    }

    #[test]
    fn zero_weight_model_outputs_biases() {
        let dims = AanDims::desk(6, 2, 3, 4);
        let mut m = AanModel::with_init(dims, 8.0, 0, Init::Zeros).unwrap();
        m.decoder[1].bias = Array1::from(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        m.speaker_head.logits.bias = Array1::from(vec![0.5, -0.5, 0.0, 1.0]);
        let x = Array2::from_shape_fn((3, 6), |(i, j)| (i * 7 + j) as f64 - 4.0);
        let out = m.forward(&x).unwrap();
        for row in out.reconstruction.rows() {
            assert_eq!(row.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        }
        for row in out.speaker_logits.rows() {
            assert_eq!(row.to_vec(), vec![0.5, -0.5, 0.0, 1.0]);
        }
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let (m, x, _) = tiny();
        let mut xx = x.clone();
        let r0 = x.row(0).to_owned();
        xx.row_mut(2).assign(&r0);
        let out = m.forward(&xx).unwrap();
        assert_eq!(out.reconstruction.row(0), out.reconstruction.row(2));
        assert_eq!(out.speaker_logits.row(0), out.speaker_logits.row(2));
    }

    #[test]
    fn zero_lambda_detaches_branches_from_encoder() {
        let (mut m, x, y) = tiny();
        m.lambda = 0.0;
        let (_, with_heads) = m.loss_and_grads(&x, &y).unwrap();

        // Pure autoencoder gradient: backprop of l_au through decoder and encoder only.
        let mut h = x.clone();
        let mut enc_caches = Vec::new();
        for l in &m.encoder {
            let (o, c) = l.forward(&h).unwrap();
            enc_caches.push(c);
            h = o;
        }
        let mut dec_caches = Vec::new();
        for l in &m.decoder {
            let (o, c) = l.forward(&h).unwrap();
            dec_caches.push(c);
            h = o;
        }
        let (_, mut g) = mse_loss(&h, &x).unwrap();
        for (l, c) in m.decoder.iter().zip(&dec_caches).rev() {
            g = l.backward(c, &g).unwrap().0;
        }
        let mut pure = Vec::new();
        for (l, c) in m.encoder.iter().zip(&enc_caches).rev() {
            let (gin, grads) = l.backward(c, &g).unwrap();
            pure.push(grads);
            g = gin;
        }
        pure.reverse();
        assert_eq!(&with_heads.layers[..m.encoder.len()], &pure[..]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (m, x, y) = tiny();
        let report = gradcheck(&m, &x, &y, 1e-5).unwrap();
        assert!(report.max() < 1e-4, "{report:?}");
    }

    #[test]
    fn duplicated_batch_has_same_losses() {
        let (m, x, y) = tiny();
        let xx = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let rows: Vec<usize> = (0..4).chain(0..4).collect();
        let yy = y.select(&rows);
        let a = m.losses(&x, &y).unwrap();
        let b = m.losses(&xx, &yy).unwrap();
        for (p, q) in [
            (a.l_au, b.l_au),
            (a.l_gender, b.l_gender),
            (a.l_accent, b.l_accent),
            (a.l_speaker, b.l_speaker),
        ] {
            assert!((p - q).abs() <= 1e-14 * p.abs().max(1.0), "{p} vs {q}");
        }
    }

    #[test]
    fn label_out_of_range_is_error() {
        let (m, x, mut y) = tiny();
        y.speaker[0] = 5;
        assert!(matches!(
            m.loss_and_grads(&x, &y),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, _, _) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.aan");
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);

        let mut bytes = m.to_bytes();
        bytes[0] = b'X';
        assert!(AanModel::from_bytes(&bytes)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut bytes = m.to_bytes();
        bytes[4] = 9;
        assert!(AanModel::from_bytes(&bytes)
            .unwrap_err()
            .to_string()
            .contains("version"));
        let bytes = m.to_bytes();
        assert!(AanModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    fn small_corpora() -> (Corpus, Corpus) {
        let c = generate_corpus(&CorpusSpec {
            n_speakers: 6,
            utterances_per_speaker: 8,
            dim: 8,
            ..CorpusSpec::default()
        })
        .unwrap();
        let (train, valid, _) = split_corpus(&c, 2).unwrap();
        (train, valid)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (train_c, valid_c) = small_corpora();
        let m = build_aan(AanDims::for_corpus(&train_c), 8.0, 1).unwrap();
        for optimizer in [
            OptimizerConfig::Adam(crate::neural::AdamConfig {
                lr: 0.0,
                ..Default::default()
            }),
            OptimizerConfig::Sgd { lr: 0.0 },
        ] {
            let cfg = TrainConfig {
                epochs: 1,
                optimizer,
                ..TrainConfig::default()
            };
            let (trained, hist) = train(&m, &train_c, &valid_c, &cfg).unwrap();
            assert_eq!(trained, m);
            assert_eq!(hist.epochs.len(), 2);
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let (train_c, valid_c) = small_corpora();
        let m = build_aan(AanDims::for_corpus(&train_c), 8.0, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train(&m, &train_c, &valid_c, &cfg).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let (train_c, valid_c) = small_corpora();
        let m = build_aan(AanDims::for_corpus(&train_c), 8.0, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let a = train(&m, &train_c, &valid_c, &cfg).unwrap();
        let b = train(&m, &train_c, &valid_c, &cfg).unwrap();
        assert_eq!(a.0.to_bytes(), b.0.to_bytes());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn training_rejects_wider_corpus() {
        let (train_c, valid_c) = small_corpora();
        let m = build_aan(AanDims::desk(9, 2, 4, 6), 8.0, 1).unwrap();
        assert!(train(&m, &train_c, &valid_c, &TrainConfig::default()).is_err());
        let m = build_aan(AanDims::desk(8, 2, 4, 3), 8.0, 1).unwrap();
        assert!(train(&m, &train_c, &valid_c, &TrainConfig::default()).is_err());
    }

    #[test]
    fn reconstruct_matches_forward() {
        let (m, x, _) = tiny();
        let a = m.reconstruct(&x).unwrap();
        let b = m.forward(&x).unwrap().reconstruction;
        assert_eq!(a, b);
        assert_eq!(a.slice(s![.., ..]).ncols(), 8);
    }
}
