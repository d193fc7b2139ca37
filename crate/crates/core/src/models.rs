//! Prognosis heads: the single-image classifier with its fine-tuning
//! ablations, and the image-sequence transformer with continuous positional
//! embedding and DropImage.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{self, AffineRanges, AugmentConfig};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::evalstats;
use crate::image::Image;
use crate::nn::{dropout, BnMode, ConvEncoder, Linear, ParamId, ParamStore, Session, TransformerBlock};
use crate::optim::{cosine_annealing_lr, Adam, Sgd};
use crate::pretrain::{stack_images, EncoderTensors};
use crate::tape::TensorId;
use crate::tensor::{Scalar, Tensor};

/// Upper bound on hours-before-final; sequences are cut at this horizon.
pub use crate::cohort::SEQUENCE_CUTOFF_HOURS;

// ---- continuous positional embedding ----

/// Sinusoidal embedding of a continuous relative scan time. `t` is hours
/// before the final scan (the final scan itself embeds t = 0); `d` must be
/// even so sin/cos pair up.
pub fn cpe_embed(t: f64, d: usize) -> Result<Vec<f64>> {
    if !(0.0..SEQUENCE_CUTOFF_HOURS).contains(&t) {
        return Err(Error::contract(format!(
            "relative time {t} outside [0, {SEQUENCE_CUTOFF_HOURS})"
        )));
    }
    if d == 0 || d % 2 != 0 {
        return Err(Error::contract(format!("embedding dimension {d} must be even")));
    }
    let mut e = vec![0.0; d];
    for i in 0..d / 2 {
        let freq = t / 10000f64.powf(2.0 * i as f64 / d as f64);
        e[2 * i] = freq.sin();
        e[2 * i + 1] = freq.cos();
    }
    Ok(e)
}

// ---- DropImage ----

/// Keep-mask over a sequence: every non-final position is dropped
/// independently with probability `p_drop`; the final position is always
/// kept.
pub fn drop_image_mask<R: Rng>(n: usize, p_drop: f64, rng: &mut R) -> Vec<bool> {
    debug_assert!((0.0..1.0).contains(&p_drop));
    if n == 0 {
        return Vec::new();
    }
    let mut mask: Vec<bool> = (0..n - 1)
        .map(|_| !(p_drop > 0.0 && rng.random_bool(p_drop)))
        .collect();
    mask.push(true);
    mask
}

// ---- datasets ----

/// One scan with its window labels; `mask` marks which labels are defined.
#[derive(Clone, Debug)]
pub struct SipExample {
    pub example_id: String,
    pub image: Image,
    pub labels: Vec<f32>,
    pub mask: Vec<f32>,
}

/// One scan sequence, oldest first, final scan at 0 hours before final.
#[derive(Clone, Debug)]
pub struct MipSequence {
    pub sequence_id: String,
    pub images: Vec<Image>,
    pub hours_before_final: Vec<f64>,
    pub labels: Vec<f32>,
    pub mask: Vec<f32>,
}

/// Deterministic evaluation preprocessing: resize plus value normalization,
/// no stochastic stages.
pub fn preprocess_eval(img: &Image, size: usize) -> Result<Image> {
    let cfg = AugmentConfig::eval(size);
    let mut rng = augment::sample_rng(0, 0, 0);
    augment::augment_once(img, &mut rng, &cfg)
}

// ---- single-image model ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    /// Frozen encoder (weights and BN statistics), linear classifier only.
    Cl,
    /// Full fine-tune.
    Ft,
    /// Full fine-tune with extra affine augmentation.
    FtRa,
    /// No pretrained initialization; follows the FT recipe.
    Scratch,
}

impl FinetuneMode {
    pub fn default_epochs(self) -> usize {
        match self {
            FinetuneMode::Cl => 5,
            FinetuneMode::Ft => 20,
            FinetuneMode::FtRa => 40,
            FinetuneMode::Scratch => 20,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneMode::Cl => "cl",
            FinetuneMode::Ft => "ft",
            FinetuneMode::FtRa => "ft_ra",
            FinetuneMode::Scratch => "scratch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cl" => Ok(FinetuneMode::Cl),
            "ft" => Ok(FinetuneMode::Ft),
            "ft_ra" => Ok(FinetuneMode::FtRa),
            "scratch" => Ok(FinetuneMode::Scratch),
            other => Err(Error::invalid(format!("unknown fine-tune mode {other:?}"))),
        }
    }
}

pub struct SipModel {
    pub encoder: ConvEncoder,
    pub classifier: Linear,
    pub widths: Vec<usize>,
    pub image_size: usize,
    pub n_labels: usize,
}

impl SipModel {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        widths: &[usize],
        n_labels: usize,
        image_size: usize,
        rng: &mut R,
    ) -> Self {
        let encoder = ConvEncoder::new(store, "encoder", 1, widths, rng);
        let classifier = Linear::new(store, "classifier", encoder.embedding_dim(), n_labels, rng);
        SipModel {
            encoder,
            classifier,
            widths: widths.to_vec(),
            image_size,
            n_labels,
        }
    }

    /// Overwrite the encoder with transferred pretraining tensors.
    pub fn init_from_pretrained<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        src: &EncoderTensors<T>,
    ) -> Result<()> {
        if src.widths != self.widths {
            return Err(Error::contract(format!(
                "pretrained widths {:?} do not match model widths {:?}",
                src.widths, self.widths
            )));
        }
        crate::pretrain::copy_encoder_into(src, store, "encoder")
    }
}

/// Batched logits on the tape: encoder then linear classifier.
pub fn sip_logits<T: Scalar>(
    model: &SipModel,
    sess: &mut Session<T>,
    batch: Tensor<T>,
    bn: BnMode,
) -> Result<TensorId> {
    let x = sess.input(batch);
    let h = model.encoder.forward(sess, x, bn)?;
    model.classifier.forward(sess, h)
}

/// Evaluation logits for preprocessed (target-size) images.
pub fn sip_forward<T: Scalar>(
    model: &SipModel,
    store: &mut ParamStore<T>,
    images: &[Image],
) -> Result<Tensor<T>> {
    let mut rows: Vec<Tensor<T>> = Vec::new();
    for chunk in images.chunks(64) {
        let mut sess = Session::new(store, false);
        let logits = sip_logits(model, &mut sess, stack_images(chunk, model.image_size)?, BnMode::Eval)?;
        rows.push(sess.tape.value(logits).clone());
    }
    let mut data = Vec::with_capacity(images.len() * model.n_labels);
    for r in &rows {
        data.extend_from_slice(r.data());
    }
    Tensor::new(vec![images.len(), model.n_labels], data)
}

/// Evaluation logits for raw examples (preprocessing included), in f64.
pub fn sip_eval_logits<T: Scalar>(
    model: &SipModel,
    store: &mut ParamStore<T>,
    examples: &[SipExample],
) -> Result<Vec<Vec<f64>>> {
    let images: Vec<Image> = examples
        .iter()
        .map(|e| preprocess_eval(&e.image, model.image_size))
        .collect::<Result<_>>()?;
    let logits = sip_forward(model, store, &images)?;
    Ok(logits
        .data()
        .chunks(model.n_labels)
        .map(|row| row.iter().map(|v| v.to_f()).collect())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptChoice {
    Adam,
    SgdMomentum,
}

#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub optimizer: OptChoice,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Overrides the mode's epoch count when set.
    pub epochs: Option<usize>,
    pub affine: AffineRanges,
    /// Label index whose validation AUC is tracked per epoch.
    pub val_label: usize,
}

impl FinetuneConfig {
    pub fn new(mode: FinetuneMode) -> Self {
        FinetuneConfig {
            mode,
            optimizer: OptChoice::Adam,
            lr: 1e-3,
            lr_min: 0.0,
            weight_decay: 1e-5,
            batch_size: 32,
            epochs: None,
            affine: AffineRanges::default(),
            val_label: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FinetuneHistory {
    pub epoch_losses: Vec<f64>,
    /// NaN where the validation label is degenerate.
    pub val_aucs: Vec<f64>,
}

enum Optimizer<T: Scalar> {
    Adam(Adam<T>),
    Sgd(Sgd<T>),
}

impl<T: Scalar> Optimizer<T> {
    fn new(choice: OptChoice, weight_decay: f64) -> Self {
        match choice {
            OptChoice::Adam => Optimizer::Adam(Adam::new(weight_decay)),
            OptChoice::SgdMomentum => Optimizer::Sgd(Sgd::new(0.9, weight_decay)),
        }
    }

    fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &crate::nn::Grads<T>,
        lr: f64,
    ) -> Result<()> {
        match self {
            Optimizer::Adam(o) => o.step(store, grads, lr),
            Optimizer::Sgd(o) => o.step(store, grads, lr),
        }
    }
}

fn check_examples(examples: &[SipExample], n_labels: usize, what: &str) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::invalid(format!("{what} split is empty")));
    }
    for e in examples {
        if e.labels.len() != n_labels || e.mask.len() != n_labels {
            return Err(Error::dim(format!(
                "example {} carries {} labels / {} mask entries, expected {n_labels}",
                e.example_id,
                e.labels.len(),
                e.mask.len()
            )));
        }
    }
    Ok(())
}

fn val_auc_for_label(scores: &[Vec<f64>], examples: &[SipExample], label: usize) -> f64 {
    let mut s = Vec::new();
    let mut y = Vec::new();
    for (row, e) in scores.iter().zip(examples) {
        if e.mask[label] == 1.0 {
            s.push(row[label]);
            y.push(e.labels[label] as u8);
        }
    }
    let ids = (0..s.len()).map(|i| i.to_string()).collect();
    match evalstats::ScoredSet::new(ids, s, y).and_then(|set| evalstats::roc_auc(&set)) {
        Ok(a) => a,
        Err(_) => f64::NAN,
    }
}

/// Masked-BCE fine-tuning of the single-image model. CL freezes the encoder
/// (weights and statistics) bitwise; FT_RA adds affine jitter to the flip
/// augmentation; SCRATCH is FT without pretrained initialization.
pub fn finetune<T: Scalar>(
    model: &SipModel,
    store: &mut ParamStore<T>,
    train: &[SipExample],
    val: &[SipExample],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneHistory> {
    check_examples(train, model.n_labels, "training")?;
    check_examples(val, model.n_labels, "validation")?;
    if cfg.val_label >= model.n_labels {
        return Err(Error::contract(format!(
            "validation label {} out of range for {} labels",
            cfg.val_label, model.n_labels
        )));
    }
    let frozen = cfg.mode == FinetuneMode::Cl;
    for id in model.encoder.param_ids() {
        store.set_trainable(id, !frozen);
    }
    let bn = if frozen { BnMode::Eval } else { BnMode::Train };
    let aug = AugmentConfig {
        target: model.image_size,
        ..AugmentConfig::default()
    };
    let epochs = cfg.epochs.unwrap_or(cfg.mode.default_epochs());
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    let mut history = FinetuneHistory::default();

    for epoch in 0..epochs {
        let lr = cosine_annealing_lr(epoch, epochs, cfg.lr, cfg.lr_min)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut augment::sample_rng(seed, epoch as u64, u64::MAX));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut targets: Vec<T> = Vec::with_capacity(chunk.len() * model.n_labels);
            let mut mask: Vec<T> = Vec::with_capacity(chunk.len() * model.n_labels);
            for &i in chunk {
                let mut rng = augment::sample_rng(seed, epoch as u64, i as u64);
                let img = match cfg.mode {
                    FinetuneMode::FtRa => {
                        augment::flips_affine(&train[i].image, &mut rng, &aug, &cfg.affine)?
                    }
                    _ => augment::flips_only(&train[i].image, &mut rng, &aug)?,
                };
                imgs.push(img);
                targets.extend(train[i].labels.iter().map(|&v| T::from_f(v as f64)));
                mask.extend(train[i].mask.iter().map(|&v| T::from_f(v as f64)));
            }
            let mut sess = Session::new(store, true);
            let logits = sip_logits(model, &mut sess, stack_images(&imgs, model.image_size)?, bn)?;
            let loss = sess.tape.bce_with_logits(logits, &targets, Some(&mask))?;
            sess.backward(loss)?;
            total += sess.tape.value(loss).data()[0].to_f();
            let grads = sess.into_grads();
            opt.step(store, &grads, lr)?;
            batches += 1;
        }
        history.epoch_losses.push(total / batches as f64);
        let scores = sip_eval_logits(model, store, val)?;
        history.val_aucs.push(val_auc_for_label(&scores, val, cfg.val_label));
    }
    Ok(history)
}

// ---- image-sequence model ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Sum,
    Last,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Sum => "sum",
            Pooling::Last => "last",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Pooling::Sum),
            "last" => Ok(Pooling::Last),
            other => Err(Error::invalid(format!("unknown pooling {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MipConfig {
    pub widths: Vec<usize>,
    pub n_labels: usize,
    pub cpe_dim: usize,
    pub d_proj: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward width as a multiple of d_proj.
    pub ff_mult: usize,
    /// Dropout on the concatenated [embedding; time] vector and inside the
    /// transformer blocks.
    pub dropout: f64,
    /// DropImage probability during training.
    pub p_drop: f64,
    pub pooling: Pooling,
    pub image_size: usize,
    /// Train only the sequence head on cached embeddings.
    pub freeze_encoder: bool,
}

impl Default for MipConfig {
    fn default() -> Self {
        MipConfig {
            widths: ConvEncoder::DEFAULT_WIDTHS.to_vec(),
            n_labels: 20,
            cpe_dim: 64,
            d_proj: 64,
            n_layers: 2,
            n_heads: 4,
            ff_mult: 4,
            dropout: 0.5,
            p_drop: 0.1,
            pooling: Pooling::Sum,
            image_size: 64,
            freeze_encoder: true,
        }
    }
}

impl MipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cpe_dim == 0 || self.cpe_dim % 2 != 0 {
            return Err(Error::contract(format!(
                "time embedding dimension {} must be even",
                self.cpe_dim
            )));
        }
        if self.n_heads == 0 || self.d_proj % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "projection width {} not divisible into {} heads",
                self.d_proj, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::contract(format!("p_drop {} outside [0, 1)", self.p_drop)));
        }
        if self.n_layers == 0 || self.n_labels == 0 || self.ff_mult == 0 {
            return Err(Error::contract("degenerate sequence model shape"));
        }
        Ok(())
    }
}

pub struct MipModel {
    pub encoder: ConvEncoder,
    pub projection: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub classifier: Linear,
    pub cfg: MipConfig,
}

impl MipModel {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &MipConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = ConvEncoder::new(store, "encoder", 1, &cfg.widths, rng);
        let projection = Linear::new(
            store,
            "projection",
            encoder.embedding_dim() + cfg.cpe_dim,
            cfg.d_proj,
            rng,
        );
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            blocks.push(TransformerBlock::new(
                store,
                &format!("transformer.block{i}"),
                cfg.d_proj,
                cfg.n_heads,
                cfg.ff_mult * cfg.d_proj,
                cfg.dropout,
                rng,
            )?);
        }
        let classifier = Linear::new(store, "classifier", cfg.d_proj, cfg.n_labels, rng);
        Ok(MipModel {
            encoder,
            projection,
            blocks,
            classifier,
            cfg: cfg.clone(),
        })
    }

    pub fn init_from_pretrained<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        src: &EncoderTensors<T>,
    ) -> Result<()> {
        if src.widths != self.cfg.widths {
            return Err(Error::contract(format!(
                "pretrained widths {:?} do not match model widths {:?}",
                src.widths, self.cfg.widths
            )));
        }
        crate::pretrain::copy_encoder_into(src, store, "encoder")
    }

    /// Everything except the encoder: projection, transformer, classifier.
    pub fn head_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.projection.param_ids();
        for b in &self.blocks {
            ids.extend(b.param_ids());
        }
        ids.extend(self.classifier.param_ids());
        ids
    }
}

fn check_sequence_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::contract("empty scan sequence"));
    }
    for &t in times {
        if !(0.0..SEQUENCE_CUTOFF_HOURS).contains(&t) {
            return Err(Error::contract(format!(
                "relative time {t} outside [0, {SEQUENCE_CUTOFF_HOURS})"
            )));
        }
    }
    if *times.last().unwrap() != 0.0 {
        return Err(Error::contract("final scan must sit at 0 hours before final"));
    }
    Ok(())
}

/// Sequence head on the tape: concat embeddings with time codes, dropout,
/// project, run the transformer, pool, classify. `embeddings` is [K, emb]
/// for the kept scans, `times` their hours-before-final.
pub fn mip_logits<T: Scalar, R: Rng>(
    model: &MipModel,
    sess: &mut Session<T>,
    embeddings: TensorId,
    times: &[f64],
    rng: &mut R,
) -> Result<TensorId> {
    let (k, _) = sess.tape.value(embeddings).dims2()?;
    if k != times.len() {
        return Err(Error::dim(format!(
            "{k} embeddings but {} relative times",
            times.len()
        )));
    }
    let mut cpe_data: Vec<T> = Vec::with_capacity(k * model.cfg.cpe_dim);
    for &t in times {
        cpe_data.extend(cpe_embed(t, model.cfg.cpe_dim)?.iter().map(|&v| T::from_f(v)));
    }
    let cpe = sess.constant(Tensor::new(vec![k, model.cfg.cpe_dim], cpe_data)?);
    let cat = sess.tape.concat_cols(&[embeddings, cpe])?;
    let cat = dropout(sess, cat, model.cfg.dropout, rng)?;
    let mut h = self_projection(model, sess, cat)?;
    for block in &model.blocks {
        h = block.forward(sess, h, rng)?;
    }
    let pooled = match model.cfg.pooling {
        Pooling::Sum => {
            let ones = sess.constant(Tensor::full(vec![1, k], T::one()));
            sess.tape.matmul(ones, h)?
        }
        Pooling::Last => sess.tape.gather_rows(h, &[k - 1])?,
    };
    model.classifier.forward(sess, pooled)
}

fn self_projection<T: Scalar>(
    model: &MipModel,
    sess: &mut Session<T>,
    x: TensorId,
) -> Result<TensorId> {
    model.projection.forward(sess, x)
}

/// Full forward for one sequence of target-size images. Training mode
/// applies DropImage and dropout; evaluation is deterministic. Returns the
/// logits as f64.
pub fn mip_forward<T: Scalar, R: Rng>(
    model: &MipModel,
    store: &mut ParamStore<T>,
    images: &[Image],
    hours_before_final: &[f64],
    training: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if images.len() != hours_before_final.len() {
        return Err(Error::dim(format!(
            "{} images but {} relative times",
            images.len(),
            hours_before_final.len()
        )));
    }
    check_sequence_times(hours_before_final)?;
    let keep = if training {
        drop_image_mask(images.len(), model.cfg.p_drop, rng)
    } else {
        vec![true; images.len()]
    };
    let kept_images: Vec<Image> = images
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(img, _)| img.clone())
        .collect();
    let kept_times: Vec<f64> = hours_before_final
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&t, _)| t)
        .collect();

    let bn = if training && !model.cfg.freeze_encoder {
        BnMode::Train
    } else {
        BnMode::Eval
    };
    let mut sess = Session::new(store, training);
    let x = sess.input(stack_images(&kept_images, model.cfg.image_size)?);
    let emb = model.encoder.forward(&mut sess, x, bn)?;
    let logits = mip_logits(model, &mut sess, emb, &kept_times, rng)?;
    Ok(sess.tape.value(logits).data().iter().map(|v| v.to_f()).collect())
}

fn check_sequences(seqs: &[MipSequence], n_labels: usize, what: &str) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::invalid(format!("{what} split is empty")));
    }
    for s in seqs {
        if s.images.len() != s.hours_before_final.len() {
            return Err(Error::dim(format!(
                "sequence {} has {} images but {} times",
                s.sequence_id,
                s.images.len(),
                s.hours_before_final.len()
            )));
        }
        check_sequence_times(&s.hours_before_final)?;
        if s.labels.len() != n_labels || s.mask.len() != n_labels {
            return Err(Error::dim(format!(
                "sequence {} carries {} labels, expected {n_labels}",
                s.sequence_id,
                s.labels.len()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct MipTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub val_label: usize,
}

impl Default for MipTrainConfig {
    fn default() -> Self {
        MipTrainConfig {
            lr: 1e-3,
            epochs: 50,
            batch_size: 32,
            weight_decay: 1e-5,
            val_label: 0,
        }
    }
}

/// Per-scan embeddings for every sequence, computed once with the frozen
/// encoder (deterministic preprocessing, frozen statistics).
fn cache_embeddings<T: Scalar>(
    model: &MipModel,
    store: &mut ParamStore<T>,
    seqs: &[MipSequence],
) -> Result<Vec<Tensor<T>>> {
    let mut flat: Vec<Image> = Vec::new();
    for s in seqs {
        for img in &s.images {
            flat.push(preprocess_eval(img, model.cfg.image_size)?);
        }
    }
    let emb_dim = model.encoder.embedding_dim();
    let mut rows: Vec<T> = Vec::with_capacity(flat.len() * emb_dim);
    for chunk in flat.chunks(64) {
        let mut sess = Session::new(store, false);
        let x = sess.input(stack_images(chunk, model.cfg.image_size)?);
        let emb = model.encoder.forward(&mut sess, x, BnMode::Eval)?;
        rows.extend_from_slice(sess.tape.value(emb).data());
    }
    let mut out = Vec::with_capacity(seqs.len());
    let mut offset = 0usize;
    for s in seqs {
        let n = s.images.len();
        out.push(Tensor::new(
            vec![n, emb_dim],
            rows[offset * emb_dim..(offset + n) * emb_dim].to_vec(),
        )?);
        offset += n;
    }
    Ok(out)
}

fn gather_kept<T: Scalar>(emb: &Tensor<T>, keep: &[bool]) -> Result<Tensor<T>> {
    let (n, c) = emb.dims2()?;
    debug_assert_eq!(n, keep.len());
    let mut data = Vec::new();
    for (i, &k) in keep.iter().enumerate() {
        if k {
            data.extend_from_slice(&emb.data()[i * c..(i + 1) * c]);
        }
    }
    let rows = data.len() / c;
    Tensor::new(vec![rows, c], data)
}

fn mip_val_auc<T: Scalar>(
    model: &MipModel,
    store: &mut ParamStore<T>,
    val: &[MipSequence],
    val_emb: &[Tensor<T>],
    label: usize,
) -> Result<f64> {
    let mut s = Vec::new();
    let mut y = Vec::new();
    let mut rng = augment::sample_rng(0, 0, 0);
    for (seq, emb) in val.iter().zip(val_emb) {
        let mut sess = Session::new(store, false);
        let e = sess.input(emb.clone());
        let logits = mip_logits(model, &mut sess, e, &seq.hours_before_final, &mut rng)?;
        if seq.mask[label] == 1.0 {
            s.push(sess.tape.value(logits).data()[label].to_f());
            y.push(seq.labels[label] as u8);
        }
    }
    let ids = (0..s.len()).map(|i| i.to_string()).collect();
    Ok(
        match evalstats::ScoredSet::new(ids, s, y).and_then(|set| evalstats::roc_auc(&set)) {
            Ok(a) => a,
            Err(_) => f64::NAN,
        },
    )
}

/// Adam training of the sequence head on cached frozen-encoder embeddings
/// (default), or end-to-end when the config says so. Masked BCE over all
/// labels; DropImage applied per sequence per epoch.
pub fn finetune_mip<T: Scalar>(
    model: &MipModel,
    store: &mut ParamStore<T>,
    train: &[MipSequence],
    val: &[MipSequence],
    cfg: &MipTrainConfig,
    seed: u64,
) -> Result<FinetuneHistory> {
    check_sequences(train, model.cfg.n_labels, "training")?;
    check_sequences(val, model.cfg.n_labels, "validation")?;
    if cfg.val_label >= model.cfg.n_labels {
        return Err(Error::contract(format!(
            "validation label {} out of range for {} labels",
            cfg.val_label, model.cfg.n_labels
        )));
    }
    if !model.cfg.freeze_encoder {
        return finetune_mip_end_to_end(model, store, train, val, cfg, seed);
    }
    for id in model.encoder.param_ids() {
        store.set_trainable(id, false);
    }
    let train_emb = cache_embeddings(model, store, train)?;
    let val_emb = cache_embeddings(model, store, val)?;

    let mut adam = Adam::new(cfg.weight_decay);
    let mut history = FinetuneHistory::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut augment::sample_rng(seed, epoch as u64, u64::MAX));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut sess = Session::new(store, true);
            let mut per_seq = Vec::with_capacity(chunk.len());
            let mut targets: Vec<T> = Vec::new();
            let mut mask: Vec<T> = Vec::new();
            for &i in chunk {
                let seq = &train[i];
                let mut rng = augment::sample_rng(seed, epoch as u64, i as u64);
                let keep = drop_image_mask(seq.images.len(), model.cfg.p_drop, &mut rng);
                let kept_times: Vec<f64> = seq
                    .hours_before_final
                    .iter()
                    .zip(&keep)
                    .filter(|(_, &k)| k)
                    .map(|(&t, _)| t)
                    .collect();
                let emb = sess.input(gather_kept(&train_emb[i], &keep)?);
                per_seq.push(mip_logits(model, &mut sess, emb, &kept_times, &mut rng)?);
                targets.extend(seq.labels.iter().map(|&v| T::from_f(v as f64)));
                mask.extend(seq.mask.iter().map(|&v| T::from_f(v as f64)));
            }
            let logits = sess.tape.concat_rows(&per_seq)?;
            let loss = sess.tape.bce_with_logits(logits, &targets, Some(&mask))?;
            sess.backward(loss)?;
            total += sess.tape.value(loss).data()[0].to_f();
            let grads = sess.into_grads();
            adam.step(store, &grads, cfg.lr)?;
            batches += 1;
        }
        history.epoch_losses.push(total / batches as f64);
        history
            .val_aucs
            .push(mip_val_auc(model, store, val, &val_emb, cfg.val_label)?);
    }
    Ok(history)
}

/// End-to-end variant: per batch, encode kept images of each sequence on the
/// tape so the encoder receives gradients too.
fn finetune_mip_end_to_end<T: Scalar>(
    model: &MipModel,
    store: &mut ParamStore<T>,
    train: &[MipSequence],
    val: &[MipSequence],
    cfg: &MipTrainConfig,
    seed: u64,
) -> Result<FinetuneHistory> {
    for id in model.encoder.param_ids() {
        store.set_trainable(id, true);
    }
    let mut pre_train: Vec<Vec<Image>> = Vec::with_capacity(train.len());
    for s in train {
        pre_train.push(
            s.images
                .iter()
                .map(|img| preprocess_eval(img, model.cfg.image_size))
                .collect::<Result<_>>()?,
        );
    }
    let mut adam = Adam::new(cfg.weight_decay);
    let mut history = FinetuneHistory::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut augment::sample_rng(seed, epoch as u64, u64::MAX));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut sess = Session::new(store, true);
            let mut per_seq = Vec::with_capacity(chunk.len());
            let mut targets: Vec<T> = Vec::new();
            let mut mask: Vec<T> = Vec::new();
            for &i in chunk {
                let seq = &train[i];
                let mut rng = augment::sample_rng(seed, epoch as u64, i as u64);
                let keep = drop_image_mask(seq.images.len(), model.cfg.p_drop, &mut rng);
                let kept_images: Vec<Image> = pre_train[i]
                    .iter()
                    .zip(&keep)
                    .filter(|(_, &k)| k)
                    .map(|(img, _)| img.clone())
                    .collect();
                let kept_times: Vec<f64> = seq
                    .hours_before_final
                    .iter()
                    .zip(&keep)
                    .filter(|(_, &k)| k)
                    .map(|(&t, _)| t)
                    .collect();
                let x = sess.input(stack_images(&kept_images, model.cfg.image_size)?);
                let emb = model.encoder.forward(&mut sess, x, BnMode::BatchOnly)?;
                per_seq.push(mip_logits(model, &mut sess, emb, &kept_times, &mut rng)?);
                targets.extend(seq.labels.iter().map(|&v| T::from_f(v as f64)));
                mask.extend(seq.mask.iter().map(|&v| T::from_f(v as f64)));
            }
            let logits = sess.tape.concat_rows(&per_seq)?;
            let loss = sess.tape.bce_with_logits(logits, &targets, Some(&mask))?;
            sess.backward(loss)?;
            total += sess.tape.value(loss).data()[0].to_f();
            let grads = sess.into_grads();
            adam.step(store, &grads, cfg.lr)?;
            batches += 1;
        }
        history.epoch_losses.push(total / batches as f64);
        let val_emb = cache_embeddings(model, store, val)?;
        history
            .val_aucs
            .push(mip_val_auc(model, store, val, &val_emb, cfg.val_label)?);
    }
    Ok(history)
}

/// Evaluation logits for raw sequences (preprocessing included), in f64.
pub fn mip_eval_logits<T: Scalar>(
    model: &MipModel,
    store: &mut ParamStore<T>,
    seqs: &[MipSequence],
) -> Result<Vec<Vec<f64>>> {
    check_sequences(seqs, model.cfg.n_labels, "evaluation")?;
    let mut out = Vec::with_capacity(seqs.len());
    let mut rng = augment::sample_rng(0, 0, 0);
    for s in seqs {
        let imgs: Vec<Image> = s
            .images
            .iter()
            .map(|img| preprocess_eval(img, model.cfg.image_size))
            .collect::<Result<_>>()?;
        out.push(mip_forward(
            model,
            store,
            &imgs,
            &s.hours_before_final,
            false,
            &mut rng,
        )?);
    }
    Ok(out)
}

// ---- checkpoints ----

pub const SIP_KIND: &str = "sip";
pub const MIP_KIND: &str = "mip";

fn meta_get<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))
}

fn meta_num<F: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<F> {
    meta_get(meta, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("metadata key {key} is not a number")))
}

fn meta_widths(meta: &BTreeMap<String, String>) -> Result<Vec<usize>> {
    meta_get(meta, "widths")?
        .split(',')
        .map(|w| {
            w.parse()
                .map_err(|_| Error::Checkpoint(format!("bad width list entry {w:?}")))
        })
        .collect()
}

fn widths_string(widths: &[usize]) -> String {
    widths
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// `task` names the clinical task ("sip" or "orp"), which fixes both the
/// label layout and the cohort inclusion filter at evaluation time.
pub fn save_sip<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    model: &SipModel,
    task: &str,
    mode: FinetuneMode,
) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), SIP_KIND.into());
    meta.insert("widths".into(), widths_string(&model.widths));
    meta.insert("image_size".into(), model.image_size.to_string());
    meta.insert("n_labels".into(), model.n_labels.to_string());
    meta.insert("task".into(), task.to_string());
    meta.insert("mode".into(), mode.as_str().to_string());
    checkpoint::save(path, store, &meta)
}

pub fn load_sip<T: Scalar>(
    path: &Path,
) -> Result<(ParamStore<T>, SipModel, String, FinetuneMode)> {
    let meta = checkpoint::load::<T>(path)?.meta;
    if meta_get(&meta, "kind")? != SIP_KIND {
        return Err(Error::Checkpoint(format!(
            "expected a {SIP_KIND} checkpoint, found kind {:?}",
            meta.get("kind")
        )));
    }
    let widths = meta_widths(&meta)?;
    let image_size = meta_num(&meta, "image_size")?;
    let n_labels = meta_num(&meta, "n_labels")?;
    let task = meta_get(&meta, "task")?.to_string();
    let mode = FinetuneMode::parse(meta_get(&meta, "mode")?)?;
    let mut store = ParamStore::new();
    let mut rng = augment::sample_rng(0, 0, 0);
    let model = SipModel::new(&mut store, &widths, n_labels, image_size, &mut rng);
    checkpoint::load_into_store(path, &mut store)?;
    Ok((store, model, task, mode))
}

pub fn save_mip<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    cfg: &MipConfig,
    task: &str,
) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), MIP_KIND.into());
    meta.insert("widths".into(), widths_string(&cfg.widths));
    meta.insert("n_labels".into(), cfg.n_labels.to_string());
    meta.insert("cpe_dim".into(), cfg.cpe_dim.to_string());
    meta.insert("d_proj".into(), cfg.d_proj.to_string());
    meta.insert("n_layers".into(), cfg.n_layers.to_string());
    meta.insert("n_heads".into(), cfg.n_heads.to_string());
    meta.insert("ff_mult".into(), cfg.ff_mult.to_string());
    meta.insert("dropout".into(), cfg.dropout.to_string());
    meta.insert("p_drop".into(), cfg.p_drop.to_string());
    meta.insert("pooling".into(), cfg.pooling.as_str().to_string());
    meta.insert("image_size".into(), cfg.image_size.to_string());
    meta.insert("freeze_encoder".into(), cfg.freeze_encoder.to_string());
    meta.insert("task".into(), task.to_string());
    checkpoint::save(path, store, &meta)
}

pub fn load_mip<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, MipModel, String)> {
    let meta = checkpoint::load::<T>(path)?.meta;
    if meta_get(&meta, "kind")? != MIP_KIND {
        return Err(Error::Checkpoint(format!(
            "expected a {MIP_KIND} checkpoint, found kind {:?}",
            meta.get("kind")
        )));
    }
    let cfg = MipConfig {
        widths: meta_widths(&meta)?,
        n_labels: meta_num(&meta, "n_labels")?,
        cpe_dim: meta_num(&meta, "cpe_dim")?,
        d_proj: meta_num(&meta, "d_proj")?,
        n_layers: meta_num(&meta, "n_layers")?,
        n_heads: meta_num(&meta, "n_heads")?,
        ff_mult: meta_num(&meta, "ff_mult")?,
        dropout: meta_num(&meta, "dropout")?,
        p_drop: meta_num(&meta, "p_drop")?,
        pooling: Pooling::parse(meta_get(&meta, "pooling")?)?,
        image_size: meta_num(&meta, "image_size")?,
        freeze_encoder: meta_get(&meta, "freeze_encoder")? == "true",
    };
    let task = meta_get(&meta, "task")?.to_string();
    let mut store = ParamStore::new();
    let mut rng = augment::sample_rng(0, 0, 0);
    let model = MipModel::new(&mut store, &cfg, &mut rng)?;
    checkpoint::load_into_store(path, &mut store)?;
    Ok((store, model, task))
}
