//! Layers, parameter storage, and the forward-pass session.
//!
//! Parameters live in a [`ParamStore`] that outlives any single forward pass.
//! A [`Session`] wraps a fresh tape, binds parameters to tape leaves on first
//! use, and hands gradients back aligned to the store after backward.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned via gradients (unless frozen).
    Weight,
    /// State updated by rules outside the optimizer: running stats, queues.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub trainable: bool,
}

pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add_weight(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.add(name.into(), value, ParamKind::Weight, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.add(name.into(), value, ParamKind::Buffer, false)
    }

    fn add(&mut self, name: String, value: Tensor<T>, kind: ParamKind, trainable: bool) -> ParamId {
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            kind,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    /// Replace a parameter's contents in place; shape must match.
    pub fn load_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let current = &self.params[id.0];
        if current.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "load of {}: shape {:?} does not match stored {:?}",
                current.name,
                value.shape(),
                current.value.shape()
            )));
        }
        self.params[id.0].value = value;
        Ok(())
    }
}

/// Gradients of one backward pass, aligned to [`ParamStore`] entries.
pub struct Grads<T> {
    per_param: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.per_param.get(id.0).and_then(|g| g.as_deref())
    }
}

/// One forward (and optionally backward) pass over a fresh tape.
pub struct Session<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    bound: Vec<Option<TensorId>>,
    pub training: bool,
}

impl<'s, T: Scalar> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, training: bool) -> Self {
        let n = store.len();
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
            training,
        }
    }

    /// Bind a parameter to the tape (memoized per session). The tensor value
    /// is copied at bind time; later store mutations do not affect the tape.
    pub fn param(&mut self, id: ParamId) -> TensorId {
        if let Some(t) = self.bound[id.0] {
            return t;
        }
        let p = &self.store.params[id.0];
        let t = self.tape.leaf(p.value.clone(), p.trainable);
        self.bound[id.0] = Some(t);
        t
    }

    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.tape.constant(value)
    }

    pub fn input(&mut self, value: Tensor<T>) -> TensorId {
        self.tape.leaf(value, false)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Consume the session, returning parameter gradients from the last
    /// backward call and releasing the store borrow.
    pub fn into_grads(self) -> Grads<T> {
        let per_param = self
            .bound
            .iter()
            .map(|b| b.and_then(|tid| self.tape.grad(tid).map(|g| g.to_vec())))
            .collect();
        Grads { per_param }
    }
}

/// Inverted dropout: identity outside training, otherwise zeroes entries with
/// probability `p` and rescales survivors by 1/(1-p).
pub fn dropout<T: Scalar, R: Rng>(
    sess: &mut Session<T>,
    x: TensorId,
    p: f64,
    rng: &mut R,
) -> Result<TensorId> {
    if !sess.training || p == 0.0 {
        return Ok(x);
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::contract(format!("dropout rate {p} outside [0, 1)")));
    }
    let keep = 1.0 - p;
    let inv = T::from_f(1.0 / keep);
    let shape = sess.tape.value(x).shape().to_vec();
    let n = sess.tape.value(x).numel();
    let mask: Vec<T> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < keep {
                inv
            } else {
                T::zero()
            }
        })
        .collect();
    let m = sess.constant(Tensor::new(shape, mask)?);
    sess.tape.mul(x, m)
}

/// Kaiming-uniform tensor: U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform<T: Scalar, R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::new(shape, data).expect("kaiming init produced invalid tensor")
}

/// Fully connected layer storing its weight as [in, out] so the forward pass
/// is a plain `x @ w + b`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_weight(
            format!("{name}.weight"),
            kaiming_uniform(vec![in_dim, out_dim], in_dim, rng),
        );
        let b = store.add_weight(format!("{name}.bias"), Tensor::zeros(vec![out_dim]));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: TensorId) -> Result<TensorId> {
        let w = sess.param(self.w);
        let b = sess.param(self.b);
        let xw = sess.tape.matmul(x, w)?;
        sess.tape.add_row_broadcast(xw, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Convolution without bias; always followed by batch norm here, whose shift
/// makes a bias redundant.
pub struct Conv2dLayer {
    pub kernel: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * ksize * ksize;
        let kernel = store.add_weight(
            format!("{name}.weight"),
            kaiming_uniform(vec![out_ch, in_ch, ksize, ksize], fan_in, rng),
        );
        Conv2dLayer {
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: TensorId) -> Result<TensorId> {
        let k = sess.param(self.kernel);
        sess.tape.conv2d(x, k, self.stride, self.padding)
    }
}

/// How batch normalization treats its statistics. `BatchOnly` exists for
/// contrastive pretraining, whose update step must be the only thing that
/// mutates parameters: it normalizes with batch statistics but leaves the
/// running buffers untouched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    BatchOnly,
    Eval,
}

/// Per-channel batch normalization over [B,C,H,W].
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add_weight(format!("{name}.gamma"), Tensor::full(vec![channels], T::one())),
            beta: store.add_weight(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: store.add_buffer(
                format!("{name}.running_var"),
                Tensor::full(vec![channels], T::one()),
            ),
        }
    }

    /// `Train` uses batch statistics and folds them into the running
    /// buffers; `BatchOnly` uses batch statistics without mutating anything;
    /// `Eval` normalizes with the frozen running statistics.
    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        x: TensorId,
        mode: BnMode,
    ) -> Result<TensorId> {
        let g = sess.param(self.gamma);
        let b = sess.param(self.beta);
        match mode {
            BnMode::Train | BnMode::BatchOnly => {
                let (y, stats) = sess.tape.batch_norm_train(x, g, b)?;
                if mode == BnMode::Train {
                    let m = T::from_f(BN_MOMENTUM);
                    let keep = T::one() - m;
                    let store = sess.store_mut();
                    for (buf, fresh) in [
                        (self.running_mean, &stats.mean),
                        (self.running_var, &stats.var),
                    ] {
                        for (o, &v) in store.value_mut(buf).data_mut().iter_mut().zip(fresh) {
                            *o = keep * *o + m * v;
                        }
                    }
                }
                Ok(y)
            }
            BnMode::Eval => {
                let rm = sess.store().value(self.running_mean).data().to_vec();
                let rv = sess.store().value(self.running_var).data().to_vec();
                sess.tape.batch_norm_eval(x, g, b, &rm, &rv)
            }
        }
    }
}

/// Strided conv -> batch norm -> relu blocks followed by global average
/// pooling. Each block halves the spatial extent.
pub struct ConvEncoder {
    blocks: Vec<(Conv2dLayer, BatchNorm2d)>,
    widths: Vec<usize>,
}

impl ConvEncoder {
    pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 128];

    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(!widths.is_empty(), "encoder needs at least one block");
        let mut blocks = Vec::with_capacity(widths.len());
        let mut c_in = in_channels;
        for (i, &c_out) in widths.iter().enumerate() {
            let conv = Conv2dLayer::new(store, &format!("{prefix}.block{i}.conv"), c_in, c_out, 3, 2, 1, rng);
            let bn = BatchNorm2d::new(store, &format!("{prefix}.block{i}.bn"), c_out);
            blocks.push((conv, bn));
            c_in = c_out;
        }
        ConvEncoder {
            blocks,
            widths: widths.to_vec(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// `[B,1,H,W] -> [B, embedding_dim]`.
    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        x: TensorId,
        bn: BnMode,
    ) -> Result<TensorId> {
        let mut h = x;
        for (conv, norm) in &self.blocks {
            h = conv.forward(sess, h)?;
            h = norm.forward(sess, h, bn)?;
            h = sess.tape.relu(h)?;
        }
        sess.tape.global_avg_pool(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (conv, bn) in &self.blocks {
            ids.push(conv.kernel);
            ids.push(bn.gamma);
            ids.push(bn.beta);
            ids.push(bn.running_mean);
            ids.push(bn.running_var);
        }
        ids
    }
}

/// Post-norm transformer encoder block: x = LN(x + Drop(MHA(x))) followed by
/// x = LN(x + Drop(FF(x))).
pub struct TransformerBlock {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ff1: Linear,
    ff2: Linear,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    pub heads: usize,
    pub dim: usize,
    pub dropout_p: f64,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        dropout_p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::contract(format!(
                "attention width {dim} not divisible into {heads} heads"
            )));
        }
        Ok(TransformerBlock {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, rng),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ff_dim, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff_dim, dim, rng),
            ln1_gamma: store.add_weight(format!("{name}.ln1.gamma"), Tensor::full(vec![dim], T::one())),
            ln1_beta: store.add_weight(format!("{name}.ln1.beta"), Tensor::zeros(vec![dim])),
            ln2_gamma: store.add_weight(format!("{name}.ln2.gamma"), Tensor::full(vec![dim], T::one())),
            ln2_beta: store.add_weight(format!("{name}.ln2.beta"), Tensor::zeros(vec![dim])),
            heads,
            dim,
            dropout_p,
        })
    }

    fn attention<T: Scalar>(&self, sess: &mut Session<T>, x: TensorId) -> Result<TensorId> {
        let q = self.wq.forward(sess, x)?;
        let k = self.wk.forward(sess, x)?;
        let v = self.wv.forward(sess, x)?;
        let dh = self.dim / self.heads;
        let scale = T::from_f(1.0 / (dh as f64).sqrt());
        let mut ctx = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = sess.tape.slice_cols(q, h * dh, dh)?;
            let kh = sess.tape.slice_cols(k, h * dh, dh)?;
            let vh = sess.tape.slice_cols(v, h * dh, dh)?;
            let kt = sess.tape.transpose(kh)?;
            let scores = sess.tape.matmul(qh, kt)?;
            let scores = sess.tape.scale(scores, scale)?;
            let attn = sess.tape.softmax_rows(scores)?;
            ctx.push(sess.tape.matmul(attn, vh)?);
        }
        let merged = sess.tape.concat_cols(&ctx)?;
        self.wo.forward(sess, merged)
    }

    /// `x` is one sequence as [len, dim].
    pub fn forward<T: Scalar, R: Rng>(
        &self,
        sess: &mut Session<T>,
        x: TensorId,
        rng: &mut R,
    ) -> Result<TensorId> {
        let attn = self.attention(sess, x)?;
        let attn = dropout(sess, attn, self.dropout_p, rng)?;
        let res1 = sess.tape.add(x, attn)?;
        let g1 = sess.param(self.ln1_gamma);
        let b1 = sess.param(self.ln1_beta);
        let x1 = sess.tape.layer_norm(res1, g1, b1)?;

        let h = self.ff1.forward(sess, x1)?;
        let h = sess.tape.relu(h)?;
        let h = self.ff2.forward(sess, h)?;
        let h = dropout(sess, h, self.dropout_p, rng)?;
        let res2 = sess.tape.add(x1, h)?;
        let g2 = sess.param(self.ln2_gamma);
        let b2 = sess.param(self.ln2_beta);
        sess.tape.layer_norm(res2, g2, b2)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for lin in [&self.wq, &self.wk, &self.wv, &self.wo, &self.ff1, &self.ff2] {
            ids.extend(lin.param_ids());
        }
        ids.extend([self.ln1_gamma, self.ln1_beta, self.ln2_gamma, self.ln2_beta]);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_applies_weight_and_bias() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 2, 2, &mut rng);
        store
            .load_value(lin.w, Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        store
            .load_value(lin.b, Tensor::new(vec![2], vec![0.5, -0.5]).unwrap())
            .unwrap();
        let mut sess = Session::new(&mut store, false);
        let x = sess.input(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let y = lin.forward(&mut sess, x).unwrap();
        assert_eq!(sess.tape.value(y).data(), &[3.5, 3.5]);
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f32> = kaiming_uniform(vec![64, 32], 32, &mut rng);
        let bound = (6.0f32 / 32.0).sqrt();
        assert!(t.data().iter().all(|&v| v.abs() <= bound));
        // Not degenerate: values spread over the range.
        let mx = t.data().iter().cloned().fold(f32::MIN, f32::max);
        assert!(mx > bound * 0.5);
    }

    #[test]
    fn encoder_halves_spatial_and_pools() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = ConvEncoder::new(&mut store, "enc", 1, &[4, 8], &mut rng);
        assert_eq!(enc.embedding_dim(), 8);
        let mut sess = Session::new(&mut store, true);
        let x = sess.input(Tensor::rand_uniform(vec![2, 1, 16, 16], 0.0, 1.0, &mut rng));
        let emb = enc.forward(&mut sess, x, BnMode::Train).unwrap();
        assert_eq!(sess.tape.value(emb).shape(), &[2, 8]);
    }

    #[test]
    fn bn_running_stats_update_only_in_train_mode() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1);
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();

        let mut sess = Session::new(&mut store, false);
        let xid = sess.input(x.clone());
        bn.forward(&mut sess, xid, BnMode::Eval).unwrap();
        drop(sess);
        assert_eq!(store.value(bn.running_mean).data(), &[0.0]);
        assert_eq!(store.value(bn.running_var).data(), &[1.0]);

        let mut sess = Session::new(&mut store, true);
        let xid = sess.input(x.clone());
        bn.forward(&mut sess, xid, BnMode::BatchOnly).unwrap();
        drop(sess);
        // batch-statistics mode without tracking leaves the buffers alone
        assert_eq!(store.value(bn.running_mean).data(), &[0.0]);
        assert_eq!(store.value(bn.running_var).data(), &[1.0]);

        let mut sess = Session::new(&mut store, true);
        let xid = sess.input(x);
        bn.forward(&mut sess, xid, BnMode::Train).unwrap();
        drop(sess);
        // batch mean 2, unbiased var 2: running = 0.9 * old + 0.1 * batch
        assert!((store.value(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        assert!((store.value(bn.running_var).data()[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_get_no_grads() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lin = Linear::new(&mut store, "l", 2, 1, &mut rng);
        store.set_trainable(lin.w, false);
        let mut sess = Session::new(&mut store, true);
        let x = sess.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let y = lin.forward(&mut sess, x).unwrap();
        let loss = sess.tape.sum_all(y).unwrap();
        sess.backward(loss).unwrap();
        let grads = sess.into_grads();
        assert!(grads.get(lin.w).is_none());
        assert!(grads.get(lin.b).is_some());
    }

    #[test]
    fn dropout_identity_in_eval_and_rescales_in_train() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);

        let mut sess = Session::new(&mut store, false);
        let x = sess.input(Tensor::full(vec![8], 1.0));
        let y = dropout(&mut sess, x, 0.5, &mut rng).unwrap();
        assert_eq!(x, y);
        drop(sess);

        let mut sess = Session::new(&mut store, true);
        let x = sess.input(Tensor::full(vec![1000], 1.0));
        let y = dropout(&mut sess, x, 0.5, &mut rng).unwrap();
        let out = sess.tape.value(y).data();
        assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
        let mean: f64 = out.iter().sum::<f64>() / out.len() as f64;
        assert!((mean - 1.0).abs() < 0.15);
    }

    #[test]
    fn transformer_block_preserves_shape() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = TransformerBlock::new(&mut store, "t", 8, 2, 32, 0.0, &mut rng).unwrap();
        let mut sess = Session::new(&mut store, false);
        let x = sess.input(Tensor::rand_normal(vec![3, 8], 1.0, &mut rng));
        let y = block.forward(&mut sess, x, &mut rng).unwrap();
        assert_eq!(sess.tape.value(y).shape(), &[3, 8]);
    }

    #[test]
    fn transformer_rejects_indivisible_heads() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(TransformerBlock::new(&mut store, "t", 10, 4, 16, 0.0, &mut rng).is_err());
    }
}
