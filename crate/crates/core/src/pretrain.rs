//! Contrastive pretraining with a momentum encoder and a FIFO queue of key
//! representations, plus the supervised multi-label baseline used for
//! transfer comparisons.
//!
//! During contrastive epochs batch norm runs on batch statistics without
//! touching the running buffers, so an epoch with lr = 0 and m = 1 is a pure
//! queue rotation. A calibration pass after the final epoch fills in the
//! running statistics that the frozen-encoder ablation needs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{self, AugmentConfig};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{BnMode, ConvEncoder, Linear, ParamId, ParamStore, Session};
use crate::optim::{Adam, Sgd};
use crate::tape::TensorId;
use crate::tensor::{Scalar, Tensor};

/// Two-layer MLP projection with a unit-norm output.
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

impl ProjectionHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        emb_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        ProjectionHead {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), emb_dim, emb_dim, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), emb_dim, out_dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: TensorId) -> Result<TensorId> {
        let h = self.fc1.forward(sess, x)?;
        let h = sess.tape.relu(h)?;
        let h = self.fc2.forward(sess, h)?;
        sess.tape.l2_normalize_rows(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.fc1.param_ids();
        ids.extend(self.fc2.param_ids());
        ids
    }
}

#[derive(Clone, Debug)]
pub struct MoCoConfig {
    pub widths: Vec<usize>,
    /// Projection output dimension C.
    pub feature_dim: usize,
    /// Queue length K; must be a multiple of the batch size.
    pub queue_size: usize,
    pub tau: f64,
    /// Momentum-encoder coefficient m.
    pub momentum: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub image_size: usize,
}

impl Default for MoCoConfig {
    fn default() -> Self {
        MoCoConfig {
            widths: ConvEncoder::DEFAULT_WIDTHS.to_vec(),
            feature_dim: 128,
            queue_size: 1024,
            tau: 0.2,
            momentum: 0.999,
            batch_size: 32,
            lr: 1e-2,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            image_size: 64,
        }
    }
}

impl MoCoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::contract("encoder needs at least one width"));
        }
        if self.feature_dim == 0 {
            return Err(Error::contract("feature_dim must be positive"));
        }
        if self.tau <= 0.0 {
            return Err(Error::contract(format!("temperature {} must be positive", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::contract(format!("momentum {} outside [0,1]", self.momentum)));
        }
        if self.batch_size == 0 || self.queue_size < self.batch_size
            || self.queue_size % self.batch_size != 0
        {
            return Err(Error::contract(format!(
                "queue size {} must be a positive multiple of batch size {}",
                self.queue_size, self.batch_size
            )));
        }
        Ok(())
    }

    fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            target: self.image_size,
            ..AugmentConfig::default()
        }
    }
}

/// Parameter ids for the two encoder/head pairs plus the key queue.
pub struct MoCoModel {
    pub encoder: ConvEncoder,
    pub head: ProjectionHead,
    pub key_encoder: ConvEncoder,
    pub key_head: ProjectionHead,
    pub queue: ParamId,
    pub queue_ptr: ParamId,
    pub feature_dim: usize,
    pub image_size: usize,
}

impl MoCoModel {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &MoCoConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.widths.is_empty() || cfg.feature_dim == 0 || cfg.queue_size == 0 {
            return Err(Error::contract("degenerate contrastive model shape"));
        }
        let encoder = ConvEncoder::new(store, "query.encoder", 1, &cfg.widths, rng);
        let head = ProjectionHead::new(
            store,
            "query.head",
            encoder.embedding_dim(),
            cfg.feature_dim,
            rng,
        );
        let key_encoder = ConvEncoder::new(store, "key.encoder", 1, &cfg.widths, rng);
        let key_head = ProjectionHead::new(
            store,
            "key.head",
            key_encoder.embedding_dim(),
            cfg.feature_dim,
            rng,
        );
        // Queue starts as random unit keys so the loss is well defined from
        // the first batch.
        let mut q = Tensor::<T>::rand_normal(
            vec![cfg.queue_size, cfg.feature_dim],
            T::one(),
            rng,
        );
        normalize_rows(&mut q);
        let queue = store.add_buffer("queue", q);
        let queue_ptr = store.add_buffer("queue_ptr", Tensor::zeros(vec![1]));

        let model = MoCoModel {
            encoder,
            head,
            key_encoder,
            key_head,
            queue,
            queue_ptr,
            feature_dim: cfg.feature_dim,
            image_size: cfg.image_size,
        };
        // The key side starts as an exact copy and never trains.
        momentum_update(store, &model.query_param_ids(), &model.key_param_ids(), 0.0)?;
        for id in model.key_param_ids() {
            store.set_trainable(id, false);
        }
        Ok(model)
    }

    pub fn query_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        ids.extend(self.head.param_ids());
        ids
    }

    pub fn key_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.key_encoder.param_ids();
        ids.extend(self.key_head.param_ids());
        ids
    }
}

fn normalize_rows<T: Scalar>(t: &mut Tensor<T>) {
    let (r, c) = t.dims2().expect("matrix");
    let data = t.data_mut();
    for i in 0..r {
        let row = &mut data[i * c..(i + 1) * c];
        let norm = row.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b).sqrt();
        if norm > T::zero() {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
}

/// `[B,1,S,S]` batch from equally sized images.
pub fn stack_images<T: Scalar>(imgs: &[Image], size: usize) -> Result<Tensor<T>> {
    if imgs.is_empty() {
        return Err(Error::invalid("empty image batch"));
    }
    let mut data = Vec::with_capacity(imgs.len() * size * size);
    for img in imgs {
        if img.height() != size || img.width() != size {
            return Err(Error::dim(format!(
                "expected {size}x{size} image, got {}x{}",
                img.height(),
                img.width()
            )));
        }
        data.extend(img.pixels().iter().map(|&p| T::from_f(p as f64)));
    }
    Tensor::new(vec![imgs.len(), 1, size, size], data)
}

/// Encoder plus projection for a batch of images, outside any training
/// session. Used for key extraction and for tests.
pub fn encode_and_project<T: Scalar>(
    store: &mut ParamStore<T>,
    encoder: &ConvEncoder,
    head: &ProjectionHead,
    batch: Tensor<T>,
    bn: BnMode,
) -> Result<Tensor<T>> {
    let mut sess = Session::new(store, false);
    let x = sess.input(batch);
    let h = encoder.forward(&mut sess, x, bn)?;
    let r = head.forward(&mut sess, h)?;
    Ok(sess.tape.value(r).clone())
}

/// K+1-way classification loss: the positive similarity first, then the
/// queue similarities, all divided by the temperature. Returns the loss and
/// the scaled logits.
pub fn info_nce_loss<T: Scalar>(
    sess: &mut Session<T>,
    r_q: TensorId,
    r_k_pos: TensorId,
    queue: TensorId,
    tau: f64,
) -> Result<(TensorId, TensorId)> {
    if tau <= 0.0 {
        return Err(Error::contract(format!("temperature {tau} must be positive")));
    }
    let rows = sess.tape.value(r_q).dims2()?.0;
    let prod = sess.tape.mul(r_q, r_k_pos)?;
    let l_pos = sess.tape.sum_rows(prod)?;
    let qt = sess.tape.transpose(queue)?;
    let l_neg = sess.tape.matmul(r_q, qt)?;
    let logits = sess.tape.concat_cols(&[l_pos, l_neg])?;
    let scaled = sess.tape.scale(logits, T::from_f(1.0 / tau))?;
    let targets = vec![0usize; rows];
    let loss = sess.tape.softmax_cross_entropy(scaled, &targets)?;
    Ok((loss, scaled))
}

/// θ_k ← m·θ_k + (1−m)·θ_q over aligned parameter lists. m = 1 is the exact
/// identity and m = 0 an exact copy; the blend is computed in delta form so
/// an already-converged pair stays bitwise stable.
pub fn momentum_update<T: Scalar>(
    store: &mut ParamStore<T>,
    query: &[ParamId],
    key: &[ParamId],
    m: f64,
) -> Result<()> {
    if query.len() != key.len() {
        return Err(Error::contract(format!(
            "parameter lists differ in length: {} vs {}",
            query.len(),
            key.len()
        )));
    }
    for (&q, &k) in query.iter().zip(key) {
        if store.value(q).shape() != store.value(k).shape() {
            return Err(Error::contract(format!(
                "shape mismatch between {} and {}",
                store.get(q).name,
                store.get(k).name
            )));
        }
        if m == 1.0 {
            continue;
        }
        let qv = store.value(q).data().to_vec();
        let blend = T::from_f(1.0 - m);
        for (kv, &src) in store.value_mut(k).data_mut().iter_mut().zip(&qv) {
            if m == 0.0 {
                *kv = src;
            } else {
                *kv += blend * (src - *kv);
            }
        }
    }
    Ok(())
}

/// Replace queue rows [ptr, ptr+B) with the new keys and advance the
/// pointer modulo K. The batch must divide the queue length, so a batch
/// never wraps.
pub fn enqueue<T: Scalar>(
    store: &mut ParamStore<T>,
    queue: ParamId,
    queue_ptr: ParamId,
    keys: &Tensor<T>,
) -> Result<()> {
    let (k_rows, c) = store.value(queue).dims2()?;
    let (b, kc) = keys.dims2()?;
    if kc != c {
        return Err(Error::dim(format!(
            "key dimension {kc} does not match queue dimension {c}"
        )));
    }
    if b == 0 || k_rows % b != 0 {
        return Err(Error::contract(format!(
            "batch of {b} keys must divide queue length {k_rows}"
        )));
    }
    let ptr = store.value(queue_ptr).data()[0].to_f() as usize;
    debug_assert!(ptr < k_rows && ptr % b == 0);
    store.value_mut(queue).data_mut()[ptr * c..(ptr + b) * c].copy_from_slice(keys.data());
    let next = (ptr + b) % k_rows;
    store.value_mut(queue_ptr).data_mut()[0] = T::from_f(next as f64);
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub top1_acc: f64,
}

/// One pass over the corpus: query/key views per image, InfoNCE against the
/// queue, SGD on the query side only, momentum update, enqueue. Keys are
/// computed outside the gradient tape. Sample augmentations depend only on
/// (seed, epoch, corpus index), not on batch order.
pub fn pretrain_epoch<T: Scalar>(
    model: &MoCoModel,
    store: &mut ParamStore<T>,
    sgd: &mut Sgd<T>,
    corpus: &[Image],
    cfg: &MoCoConfig,
    epoch: u64,
    seed: u64,
) -> Result<EpochStats> {
    cfg.validate()?;
    if corpus.len() < cfg.batch_size {
        return Err(Error::invalid(format!(
            "corpus of {} images is smaller than one batch of {}",
            corpus.len(),
            cfg.batch_size
        )));
    }
    let aug = cfg.augment();
    let query_ids = model.query_param_ids();
    let key_ids = model.key_param_ids();
    let n_batches = corpus.len() / cfg.batch_size;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut augment::sample_rng(seed, epoch, u64::MAX));

    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    for b in 0..n_batches {
        let idxs = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
        let mut queries = Vec::with_capacity(idxs.len());
        let mut keys = Vec::with_capacity(idxs.len());
        for &i in idxs {
            let mut rng = augment::sample_rng(seed, epoch, i as u64);
            let (q, k) = augment::make_query_key_pair(&corpus[i], &mut rng, &aug)?;
            queries.push(q);
            keys.push(k);
        }
        // Keys come from the momentum encoder with gradients severed: they
        // re-enter the loss below as plain values.
        let r_k = encode_and_project(
            store,
            &model.key_encoder,
            &model.key_head,
            stack_images(&keys, cfg.image_size)?,
            BnMode::BatchOnly,
        )?;

        let mut sess = Session::new(store, true);
        let x = sess.input(stack_images(&queries, cfg.image_size)?);
        let h = model.encoder.forward(&mut sess, x, BnMode::BatchOnly)?;
        let r_q = model.head.forward(&mut sess, h)?;
        let k_pos = sess.input(r_k.clone());
        let queue_vals = sess.store().value(model.queue).clone();
        let queue_id = sess.constant(queue_vals);
        let (loss, logits) = info_nce_loss(&mut sess, r_q, k_pos, queue_id, cfg.tau)?;
        sess.backward(loss)?;
        total_loss += sess.tape.value(loss).data()[0].to_f();
        let logit_vals = sess.tape.value(logits).clone();
        let grads = sess.into_grads();

        sgd.step(store, &grads, cfg.lr)?;
        momentum_update(store, &query_ids, &key_ids, cfg.momentum)?;
        enqueue(store, model.queue, model.queue_ptr, &r_k)?;

        let (rows, cols) = logit_vals.dims2()?;
        for i in 0..rows {
            let row = &logit_vals.data()[i * cols..(i + 1) * cols];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            if best == 0 {
                correct += 1;
            }
        }
        seen += rows;
    }
    Ok(EpochStats {
        mean_loss: total_loss / n_batches as f64,
        top1_acc: correct as f64 / seen as f64,
    })
}

/// Fill encoder running statistics with one pass of deterministic
/// (augmentation-free) batches, for consumers that freeze the encoder.
pub fn calibrate_encoder_bn<T: Scalar>(
    encoder: &ConvEncoder,
    store: &mut ParamStore<T>,
    corpus: &[Image],
    image_size: usize,
    batch_size: usize,
) -> Result<()> {
    let eval_cfg = AugmentConfig::eval(image_size);
    for chunk in corpus.chunks(batch_size.max(1)) {
        if chunk.len() < 2 {
            continue;
        }
        let imgs: Vec<Image> = chunk
            .iter()
            .map(|img| {
                let mut rng = augment::sample_rng(0, 0, 0);
                augment::augment_once(img, &mut rng, &eval_cfg)
            })
            .collect::<Result<_>>()?;
        let mut sess = Session::new(store, true);
        let x = sess.input(stack_images(&imgs, image_size)?);
        encoder.forward(&mut sess, x, BnMode::Train)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub epoch_top1: Vec<f64>,
}

/// Multi-epoch contrastive driver: runs the epochs with one persistent SGD
/// state, then calibrates the query encoder's normalization statistics.
pub fn pretrain_moco<T: Scalar>(
    model: &MoCoModel,
    store: &mut ParamStore<T>,
    corpus: &[Image],
    cfg: &MoCoConfig,
    epochs: usize,
    seed: u64,
) -> Result<PretrainReport> {
    let mut sgd = Sgd::new(cfg.sgd_momentum, cfg.weight_decay);
    let mut report = PretrainReport::default();
    for epoch in 0..epochs {
        let stats = pretrain_epoch(model, store, &mut sgd, corpus, cfg, epoch as u64, seed)?;
        report.epoch_losses.push(stats.mean_loss);
        report.epoch_top1.push(stats.top1_acc);
    }
    calibrate_encoder_bn(&model.encoder, store, corpus, cfg.image_size, cfg.batch_size)?;
    Ok(report)
}

// ---- supervised baseline ----

#[derive(Clone, Debug)]
pub struct SupervisedConfig {
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub image_size: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            widths: ConvEncoder::DEFAULT_WIDTHS.to_vec(),
            epochs: 10,
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 64,
            image_size: 64,
        }
    }
}

/// The learning rate drops by a factor of ten every epoch.
pub fn supervised_lr_schedule(base: f64, epochs: usize) -> Vec<f64> {
    (0..epochs).map(|e| base / 10f64.powi(e as i32)).collect()
}

pub struct SupervisedModel {
    pub encoder: ConvEncoder,
    pub head: Linear,
    pub image_size: usize,
    pub n_findings: usize,
}

impl SupervisedModel {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        widths: &[usize],
        n_findings: usize,
        image_size: usize,
        rng: &mut R,
    ) -> Self {
        let encoder = ConvEncoder::new(store, "encoder", 1, widths, rng);
        let head = Linear::new(store, "findings_head", encoder.embedding_dim(), n_findings, rng);
        SupervisedModel {
            encoder,
            head,
            image_size,
            n_findings,
        }
    }
}

/// Multi-label BCE training on per-image finding vectors, flips-only
/// augmentation, Adam with a tenfold learning-rate drop per epoch. Returns
/// per-epoch mean losses.
pub fn supervised_pretrain<T: Scalar>(
    model: &SupervisedModel,
    store: &mut ParamStore<T>,
    corpus: &[(Image, Vec<u8>)],
    cfg: &SupervisedConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::invalid("supervised pretraining needs a nonempty corpus"));
    }
    if let Some((_, f)) = corpus.iter().find(|(_, f)| f.len() != model.n_findings) {
        return Err(Error::dim(format!(
            "finding vector of length {} does not match head width {}",
            f.len(),
            model.n_findings
        )));
    }
    let aug = AugmentConfig {
        target: cfg.image_size,
        ..AugmentConfig::default()
    };
    let mut adam = Adam::new(cfg.weight_decay);
    let lrs = supervised_lr_schedule(cfg.lr, cfg.epochs);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for (epoch, &lr) in lrs.iter().enumerate() {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut augment::sample_rng(seed, epoch as u64, u64::MAX));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut targets: Vec<T> = Vec::with_capacity(chunk.len() * model.n_findings);
            for &i in chunk {
                let mut rng = augment::sample_rng(seed, epoch as u64, i as u64);
                imgs.push(augment::flips_only(&corpus[i].0, &mut rng, &aug)?);
                targets.extend(corpus[i].1.iter().map(|&v| T::from_f(v as f64)));
            }
            let mut sess = Session::new(store, true);
            let x = sess.input(stack_images(&imgs, cfg.image_size)?);
            let h = model.encoder.forward(&mut sess, x, BnMode::Train)?;
            let logits = model.head.forward(&mut sess, h)?;
            let loss = sess.tape.bce_with_logits(logits, &targets, None)?;
            sess.backward(loss)?;
            total += sess.tape.value(loss).data()[0].to_f();
            let grads = sess.into_grads();
            adam.step(store, &grads, lr)?;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(epoch_losses)
}

// ---- checkpoints and transfer ----

pub const MOCO_KIND: &str = "moco";
pub const SUPERVISED_KIND: &str = "supervised";

fn parse_meta<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))
}

fn parse_num<F: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<F> {
    parse_meta(meta, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("metadata key {key} is not a number")))
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
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

pub fn save_moco<T: Scalar>(path: &Path, store: &ParamStore<T>, cfg: &MoCoConfig) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), MOCO_KIND.into());
    meta.insert("widths".into(), widths_string(&cfg.widths));
    meta.insert("feature_dim".into(), cfg.feature_dim.to_string());
    meta.insert("queue_size".into(), cfg.queue_size.to_string());
    meta.insert("image_size".into(), cfg.image_size.to_string());
    meta.insert("tau".into(), cfg.tau.to_string());
    meta.insert("momentum".into(), cfg.momentum.to_string());
    checkpoint::save(path, store, &meta)
}

pub fn load_moco<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, MoCoModel, MoCoConfig)> {
    let meta = checkpoint::load::<T>(path)?.meta;
    if parse_meta(&meta, "kind")? != MOCO_KIND {
        return Err(Error::Checkpoint(format!(
            "expected a {MOCO_KIND} checkpoint, found kind {:?}",
            meta.get("kind")
        )));
    }
    let cfg = MoCoConfig {
        widths: parse_widths(parse_meta(&meta, "widths")?)?,
        feature_dim: parse_num(&meta, "feature_dim")?,
        queue_size: parse_num(&meta, "queue_size")?,
        image_size: parse_num(&meta, "image_size")?,
        tau: parse_num(&meta, "tau")?,
        momentum: parse_num(&meta, "momentum")?,
        ..MoCoConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = augment::sample_rng(0, 0, 0);
    let model = MoCoModel::new(&mut store, &cfg, &mut rng)?;
    checkpoint::load_into_store(path, &mut store)?;
    Ok((store, model, cfg))
}

pub fn save_supervised<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    cfg: &SupervisedConfig,
    n_findings: usize,
) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), SUPERVISED_KIND.into());
    meta.insert("widths".into(), widths_string(&cfg.widths));
    meta.insert("image_size".into(), cfg.image_size.to_string());
    meta.insert("n_findings".into(), n_findings.to_string());
    checkpoint::save(path, store, &meta)
}

pub fn load_supervised<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, SupervisedModel)> {
    let meta = checkpoint::load::<T>(path)?.meta;
    if parse_meta(&meta, "kind")? != SUPERVISED_KIND {
        return Err(Error::Checkpoint(format!(
            "expected a {SUPERVISED_KIND} checkpoint, found kind {:?}",
            meta.get("kind")
        )));
    }
    let widths = parse_widths(parse_meta(&meta, "widths")?)?;
    let image_size = parse_num(&meta, "image_size")?;
    let n_findings = parse_num(&meta, "n_findings")?;
    let mut store = ParamStore::new();
    let mut rng = augment::sample_rng(0, 0, 0);
    let model = SupervisedModel::new(&mut store, &widths, n_findings, image_size, &mut rng);
    checkpoint::load_into_store(path, &mut store)?;
    Ok((store, model))
}

/// Encoder tensors pulled out of a pretraining checkpoint, keyed by the
/// name suffix below the encoder prefix ("block0.conv.weight", ...).
pub struct EncoderTensors<T: Scalar> {
    pub by_suffix: Vec<(String, Tensor<T>)>,
    pub widths: Vec<usize>,
    pub image_size: usize,
    pub kind: String,
}

pub fn load_encoder_tensors<T: Scalar>(path: &Path) -> Result<EncoderTensors<T>> {
    let ckpt = checkpoint::load::<T>(path)?;
    let kind = parse_meta(&ckpt.meta, "kind")?.to_string();
    let prefix = match kind.as_str() {
        MOCO_KIND => "query.encoder.",
        SUPERVISED_KIND => "encoder.",
        other => {
            return Err(Error::Checkpoint(format!(
                "checkpoint kind {other:?} carries no transferable encoder"
            )))
        }
    };
    let widths = parse_widths(parse_meta(&ckpt.meta, "widths")?)?;
    let image_size = parse_num(&ckpt.meta, "image_size")?;
    let by_suffix: Vec<(String, Tensor<T>)> = ckpt
        .entries
        .into_iter()
        .filter_map(|(name, t)| {
            name.strip_prefix(prefix).map(|s| (s.to_string(), t))
        })
        .collect();
    if by_suffix.is_empty() {
        return Err(Error::Checkpoint(format!(
            "no tensors under prefix {prefix:?} in {}",
            path.display()
        )));
    }
    Ok(EncoderTensors {
        by_suffix,
        widths,
        image_size,
        kind,
    })
}

/// Copy transferred encoder tensors onto store parameters named
/// `{dst_prefix}.{suffix}`. Every suffix must land, and every store
/// parameter under the prefix must be covered.
pub fn copy_encoder_into<T: Scalar>(
    src: &EncoderTensors<T>,
    store: &mut ParamStore<T>,
    dst_prefix: &str,
) -> Result<()> {
    let mut covered = 0usize;
    for (suffix, tensor) in &src.by_suffix {
        let name = format!("{dst_prefix}.{suffix}");
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("no destination parameter {name}")))?;
        store.load_value(id, tensor.clone())?;
        covered += 1;
    }
    let expected = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(&format!("{dst_prefix}.")))
        .count();
    if covered != expected {
        return Err(Error::Checkpoint(format!(
            "transfer covered {covered} of {expected} parameters under {dst_prefix}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> MoCoConfig {
        MoCoConfig {
            widths: vec![4, 8],
            feature_dim: 8,
            queue_size: 16,
            batch_size: 4,
            lr: 0.05,
            image_size: 16,
            ..MoCoConfig::default()
        }
    }

    /// Distinct textured corpus: one bright blob per image at its own grid
    /// position plus mild noise, so instances are separable.
    fn blob_corpus(n: usize, size: usize, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let cy = (i * 7 + 3) % size;
                let cx = (i * 11 + 5) % size;
                let pixels = (0..size * size)
                    .map(|p| {
                        let (y, x) = (p / size, p % size);
                        let d2 = (y as f32 - cy as f32).powi(2) + (x as f32 - cx as f32).powi(2);
                        let blob = (-d2 / 18.0).exp();
                        (0.2 + 0.7 * blob + 0.05 * rng.random::<f32>()).min(1.0)
                    })
                    .collect();
                Image::new(size, size, pixels).unwrap()
            })
            .collect()
    }

    fn store_snapshot(store: &ParamStore<f32>, skip: &[ParamId]) -> Vec<(String, Vec<u8>)> {
        store
            .iter()
            .filter(|(id, _)| !skip.contains(id))
            .map(|(_, p)| {
                let bytes = p
                    .value
                    .data()
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect();
                (p.name.clone(), bytes)
            })
            .collect()
    }

    #[test]
    fn projections_are_unit_norm_and_deterministic() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let model = MoCoModel::new(&mut store, &cfg, &mut rng).unwrap();
        let corpus = blob_corpus(6, cfg.image_size, 2);
        let batch = stack_images::<f32>(&corpus, cfg.image_size).unwrap();
        let r = encode_and_project(&mut store, &model.encoder, &model.head, batch.clone(), BnMode::BatchOnly)
            .unwrap();
        let (rows, c) = r.dims2().unwrap();
        assert_eq!((rows, c), (6, cfg.feature_dim));
        for i in 0..rows {
            let norm: f32 = r.data()[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "row {i} norm {norm}");
        }
        let r2 = encode_and_project(&mut store, &model.encoder, &model.head, batch, BnMode::BatchOnly)
            .unwrap();
        assert_eq!(r.data(), r2.data());
        // Distinct inputs land on distinct representations.
        assert!(r.data()[..c] != r.data()[c..2 * c]);
    }

    #[test]
    fn info_nce_uniform_and_dominant_positive() {
        // All K+1 similarities equal: loss is exactly ln(K+1).
        for k in [1usize, 3, 15] {
            let mut store = ParamStore::<f64>::new();
            let mut sess = Session::new(&mut store, false);
            let dim = 4;
            let unit = {
                let mut v = vec![0.0; dim];
                v[0] = 1.0;
                v
            };
            let r_q = sess.input(Tensor::new(vec![1, dim], unit.clone()).unwrap());
            let r_k = sess.input(Tensor::new(vec![1, dim], unit.clone()).unwrap());
            let queue = sess.constant(Tensor::new(vec![k, dim], unit.repeat(k)).unwrap());
            let (loss, _) = info_nce_loss(&mut sess, r_q, r_k, queue, 0.2).unwrap();
            let got = sess.tape.value(loss).data()[0];
            assert!(
                (got - ((k + 1) as f64).ln()).abs() < 1e-6,
                "K={k}: {got} vs ln {}",
                (k + 1) as f64
            );
        }

        // Dominant positive at low temperature drives the loss to zero.
        let mut store = ParamStore::<f64>::new();
        let mut sess = Session::new(&mut store, false);
        let dim = 3;
        let e1 = vec![1.0, 0.0, 0.0];
        let neg = vec![-1.0, 0.0, 0.0];
        let r_q = sess.input(Tensor::new(vec![1, dim], e1.clone()).unwrap());
        let r_k = sess.input(Tensor::new(vec![1, dim], e1).unwrap());
        let queue = sess.constant(Tensor::new(vec![8, dim], neg.repeat(8)).unwrap());
        let (loss, _) = info_nce_loss(&mut sess, r_q, r_k, queue, 0.07).unwrap();
        assert!(sess.tape.value(loss).data()[0] < 1e-9);

        assert!(info_nce_loss(&mut sess, r_q, r_k, queue, 0.0).is_err());
    }

    #[test]
    fn no_gradient_reaches_key_side_or_queue() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let model = MoCoModel::new(&mut store, &cfg, &mut rng).unwrap();
        let corpus = blob_corpus(4, cfg.image_size, 4);

        // Bind the key network inside the same session: its parameters are
        // non-trainable, so backward must leave them without gradients.
        let key_ids = model.key_param_ids();
        let mut sess = Session::new(&mut store, true);
        let x = sess.input(stack_images::<f32>(&corpus, cfg.image_size).unwrap());
        let hq = model.encoder.forward(&mut sess, x, BnMode::BatchOnly).unwrap();
        let rq = model.head.forward(&mut sess, hq).unwrap();
        let xk = sess.input(stack_images::<f32>(&corpus, cfg.image_size).unwrap());
        let hk = model.key_encoder.forward(&mut sess, xk, BnMode::BatchOnly).unwrap();
        let rk = model.key_head.forward(&mut sess, hk).unwrap();
        let queue_vals = sess.store().value(model.queue).clone();
        let queue_id = sess.constant(queue_vals);
        let (loss, _) = info_nce_loss(&mut sess, rq, rk, queue_id, cfg.tau).unwrap();
        sess.backward(loss).unwrap();
        assert!(sess.tape.grad(queue_id).is_none());
        let grads = sess.into_grads();
        for id in key_ids {
            assert!(grads.get(id).is_none(), "key parameter received a gradient");
        }
        for id in model.query_param_ids() {
            let p = store.get(id);
            if p.kind == crate::nn::ParamKind::Weight {
                assert!(grads.get(id).is_some(), "{} missing gradient", p.name);
            }
        }
    }

    #[test]
    fn momentum_update_examples() {
        let mut store = ParamStore::<f32>::new();
        let q = store.add_weight("q", Tensor::full(vec![3], 1.0));
        let k = store.add_weight("k", Tensor::zeros(vec![3]));

        momentum_update(&mut store, &[q], &[k], 1.0).unwrap();
        assert_eq!(store.value(k).data(), &[0.0, 0.0, 0.0]);

        momentum_update(&mut store, &[q], &[k], 0.999).unwrap();
        for &v in store.value(k).data() {
            assert!((v - 0.001).abs() < 1e-9);
        }

        momentum_update(&mut store, &[q], &[k], 0.0).unwrap();
        assert_eq!(store.value(k).data(), &[1.0, 1.0, 1.0]);

        let bad = store.add_weight("bad", Tensor::zeros(vec![2]));
        assert!(momentum_update(&mut store, &[q], &[bad], 0.5).is_err());
        assert!(momentum_update(&mut store, &[q], &[k, bad], 0.5).is_err());
    }

    #[test]
    fn enqueue_ring_semantics() {
        let mut store = ParamStore::<f32>::new();
        let queue = store.add_buffer("queue", Tensor::zeros(vec![4, 2]));
        let ptr = store.add_buffer("queue_ptr", Tensor::zeros(vec![1]));

        let b1 = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b2 = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        enqueue(&mut store, queue, ptr, &b1).unwrap();
        assert_eq!(store.value(ptr).data()[0], 2.0);
        assert_eq!(&store.value(queue).data()[..4], b1.data());
        enqueue(&mut store, queue, ptr, &b2).unwrap();
        assert_eq!(store.value(ptr).data()[0], 0.0);
        assert_eq!(&store.value(queue).data()[4..], b2.data());

        // After K/B enqueues every original row has been replaced.
        let fresh = Tensor::new(vec![2, 2], vec![9.0; 4]).unwrap();
        enqueue(&mut store, queue, ptr, &fresh).unwrap();
        enqueue(&mut store, queue, ptr, &fresh).unwrap();
        assert!(store.value(queue).data().iter().all(|&v| v == 9.0));

        let bad = Tensor::new(vec![3, 2], vec![0.0; 6]).unwrap();
        assert!(enqueue(&mut store, queue, ptr, &bad).is_err());
    }

    #[test]
    fn lr_zero_epoch_changes_nothing_but_the_queue() {
        let cfg = MoCoConfig {
            lr: 0.0,
            ..tiny_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let model = MoCoModel::new(&mut store, &cfg, &mut rng).unwrap();
        let corpus = blob_corpus(8, cfg.image_size, 6);
        let before = store_snapshot(&store, &[model.queue, model.queue_ptr]);
        let mut sgd = Sgd::new(cfg.sgd_momentum, cfg.weight_decay);
        pretrain_epoch(&model, &mut store, &mut sgd, &corpus, &cfg, 0, 7).unwrap();
        let after = store_snapshot(&store, &[model.queue, model.queue_ptr]);
        assert_eq!(before, after);
        // The queue did rotate.
        assert_eq!(store.value(model.queue_ptr).data()[0], 8.0);
    }

    #[test]
    fn full_freeze_epoch_is_a_pure_queue_rotation() {
        let cfg = MoCoConfig {
            lr: 0.0,
            momentum: 1.0,
            ..tiny_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f32>::new();
        let model = MoCoModel::new(&mut store, &cfg, &mut rng).unwrap();
        // Desynchronize the key side first so m = 1 is load-bearing.
        store.value_mut(model.key_param_ids()[0]).data_mut()[0] += 0.25;
        let corpus = blob_corpus(8, cfg.image_size, 9);
        let before = store_snapshot(&store, &[model.queue, model.queue_ptr]);
        let mut sgd = Sgd::new(cfg.sgd_momentum, cfg.weight_decay);
        pretrain_epoch(&model, &mut store, &mut sgd, &corpus, &cfg, 0, 10).unwrap();
        assert_eq!(before, store_snapshot(&store, &[model.queue, model.queue_ptr]));
    }

    #[test]
    fn instance_discrimination_beats_chance_within_five_epochs() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f32>::new();
        let model = MoCoModel::new(&mut store, &cfg, &mut rng).unwrap();
        let corpus = blob_corpus(16, cfg.image_size, 12);
        let report = pretrain_moco(&model, &mut store, &corpus, &cfg, 5, 13).unwrap();
        let chance = 1.0 / (cfg.queue_size + 1) as f64;
        let best = report.epoch_top1.iter().cloned().fold(0.0, f64::max);
        assert!(best > 2.0 * chance, "top-1 {best} never rose above chance {chance}");
        // Queue rows stay unit norm through training.
        let q = store.value(model.queue);
        let (rows, c) = q.dims2().unwrap();
        for i in 0..rows {
            let norm: f32 = q.data()[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "queue row {i} norm {norm}");
        }
    }

    #[test]
    fn key_side_converges_toward_query_under_training() {
        // Gentle learning rate so the training-induced lag is small next to
        // the planted offset.
        let cfg = MoCoConfig {
            momentum: 0.85,
            lr: 0.005,
            ..tiny_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::<f32>::new();
        let model = MoCoModel::new(&mut store, &cfg, &mut rng).unwrap();
        // Start the key side a fixed distance away from the query side.
        for id in model.key_param_ids() {
            for v in store.value_mut(id).data_mut() {
                *v += 0.3;
            }
        }
        let gap = |store: &ParamStore<f32>| {
            model
                .query_param_ids()
                .iter()
                .zip(model.key_param_ids())
                .flat_map(|(&q, k)| {
                    store
                        .value(q)
                        .data()
                        .iter()
                        .zip(store.value(k).data())
                        .map(|(&a, &b)| (a - b).abs())
                        .collect::<Vec<_>>()
                })
                .fold(0.0f32, f32::max)
        };
        let initial = gap(&store);
        assert!(initial >= 0.3);
        let corpus = blob_corpus(16, cfg.image_size, 15);
        let mut sgd = Sgd::new(cfg.sgd_momentum, cfg.weight_decay);
        let mut gaps = Vec::new();
        for epoch in 0..10 {
            pretrain_epoch(&model, &mut store, &mut sgd, &corpus, &cfg, epoch, 16).unwrap();
            gaps.push(gap(&store));
        }
        // The lag shrinks from the planted offset toward a small stable value.
        assert!(gaps[9] < 0.1 * initial, "gap stayed at {} from {initial}", gaps[9]);
        for w in gaps.windows(2) {
            assert!(w[1] <= w[0] * 1.05, "gap trajectory not settling: {gaps:?}");
        }
    }

    #[test]
    fn epoch_rejects_undersized_corpus() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::<f32>::new();
        let model = MoCoModel::new(&mut store, &cfg, &mut rng).unwrap();
        let corpus = blob_corpus(2, cfg.image_size, 18);
        let mut sgd = Sgd::new(cfg.sgd_momentum, cfg.weight_decay);
        assert!(matches!(
            pretrain_epoch(&model, &mut store, &mut sgd, &corpus, &cfg, 0, 19),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn moco_checkpoint_round_trip_and_transfer() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut store = ParamStore::<f32>::new();
        let model = MoCoModel::new(&mut store, &cfg, &mut rng).unwrap();
        let corpus = blob_corpus(8, cfg.image_size, 21);
        pretrain_moco(&model, &mut store, &corpus, &cfg, 1, 22).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("moco.ckpt");
        save_moco(&path, &store, &cfg).unwrap();
        let (loaded_store, loaded_model, loaded_cfg) = load_moco::<f32>(&path).unwrap();
        assert_eq!(loaded_cfg.widths, cfg.widths);
        assert_eq!(loaded_cfg.feature_dim, cfg.feature_dim);
        assert_eq!(loaded_cfg.queue_size, cfg.queue_size);
        assert_eq!(loaded_cfg.tau, cfg.tau);
        for (id, p) in store.iter() {
            let lid = loaded_store.find(&p.name).unwrap();
            assert_eq!(
                store.value(id).data(),
                loaded_store.value(lid).data(),
                "{} differs after reload",
                p.name
            );
        }
        // Key side stays frozen after reload.
        for id in loaded_model.key_param_ids() {
            assert!(!loaded_store.get(id).trainable);
        }

        let enc = load_encoder_tensors::<f32>(&path).unwrap();
        assert_eq!(enc.kind, MOCO_KIND);
        assert_eq!(enc.widths, cfg.widths);
        let mut dst = ParamStore::<f32>::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(23);
        let dst_enc = ConvEncoder::new(&mut dst, "encoder", 1, &cfg.widths, &mut rng2);
        copy_encoder_into(&enc, &mut dst, "encoder").unwrap();
        let src_first = store.value(model.encoder.param_ids()[0]).data().to_vec();
        let dst_first = dst.value(dst_enc.param_ids()[0]).data().to_vec();
        assert_eq!(src_first, dst_first);
    }

    #[test]
    fn supervised_schedule_and_training() {
        let lrs = supervised_lr_schedule(1e-3, 10);
        assert_eq!(lrs.len(), 10);
        for (e, lr) in lrs.iter().enumerate() {
            let expect = 1e-3 / 10f64.powi(e as i32);
            assert!((lr - expect).abs() < expect * 1e-12);
        }
        assert!((lrs[9] - 1e-12).abs() < 1e-24);

        let cfg = SupervisedConfig {
            widths: vec![4, 8],
            epochs: 4,
            batch_size: 8,
            image_size: 16,
            ..SupervisedConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut store = ParamStore::<f32>::new();
        let model = SupervisedModel::new(&mut store, &cfg.widths, 2, cfg.image_size, &mut rng);

        // Separable labels: finding 0 marks a bright upper half, finding 1 a
        // bright left half.
        let corpus: Vec<(Image, Vec<u8>)> = (0..24)
            .map(|i| {
                let up = (i % 2) as u8;
                let left = ((i / 2) % 2) as u8;
                let size = cfg.image_size;
                let pixels = (0..size * size)
                    .map(|p| {
                        let (y, x) = (p / size, p % size);
                        let mut v = 0.2;
                        if up == 1 && y < size / 2 {
                            v += 0.5;
                        }
                        if left == 1 && x < size / 2 {
                            v += 0.3;
                        }
                        v + 0.01 * ((i * 31 + p) % 7) as f32
                    })
                    .collect();
                (Image::new(size, size, pixels).unwrap(), vec![up, left])
            })
            .collect();

        let losses = supervised_pretrain(&model, &mut store, &corpus, &cfg, 25).unwrap();
        assert_eq!(losses.len(), cfg.epochs);
        // Epoch means non-increasing within tolerance on a separable corpus.
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] * 1.05, "loss rose: {:?}", losses);
        }

        // lr = 0 leaves weights untouched.
        let zero = SupervisedConfig { lr: 0.0, epochs: 1, ..cfg.clone() };
        let weights_before: Vec<Vec<f32>> = store
            .iter()
            .filter(|(_, p)| p.kind == crate::nn::ParamKind::Weight)
            .map(|(id, _)| store.value(id).data().to_vec())
            .collect();
        supervised_pretrain(&model, &mut store, &corpus, &zero, 26).unwrap();
        let weights_after: Vec<Vec<f32>> = store
            .iter()
            .filter(|(_, p)| p.kind == crate::nn::ParamKind::Weight)
            .map(|(id, _)| store.value(id).data().to_vec())
            .collect();
        assert_eq!(weights_before, weights_after);

        assert!(supervised_pretrain(&model, &mut store, &[], &zero, 27).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sup.ckpt");
        save_supervised(&path, &store, &cfg, 2).unwrap();
        let (loaded, loaded_model) = load_supervised::<f32>(&path).unwrap();
        assert_eq!(loaded.len(), store.len());
        assert_eq!(loaded_model.n_findings, 2);
        let enc = load_encoder_tensors::<f32>(&path).unwrap();
        assert_eq!(enc.kind, SUPERVISED_KIND);
    }
}
