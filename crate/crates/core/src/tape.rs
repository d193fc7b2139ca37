//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations append nodes in execution order, so reverse insertion order is
//! a valid reverse topological order for the chain rule. Each node stores its
//! forward value, the op that produced it, and any intermediates the backward
//! rule needs. Gradients are allocated lazily: a tensor that does not require
//! grad never gets a buffer.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Batch statistics produced by a train-mode batch norm, for running-stat
/// updates by the owning layer.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance when n > 1, biased otherwise.
    pub var: Vec<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    AddN(Vec<TensorId>),
    /// a: [r, c], bias: [c]
    AddRowBroadcast(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, T),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: usize,
    },
    BatchNormTrain {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
    BatchNormFrozen {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
    Relu(TensorId),
    Sigmoid(TensorId),
    SoftmaxRows(TensorId),
    LayerNorm {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
    L2NormalizeRows(TensorId),
    GlobalAvgPool(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    SumRows(TensorId),
    GatherRows {
        input: TensorId,
        indices: Vec<usize>,
    },
    SliceCols {
        input: TensorId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<TensorId>),
    ConcatRows(Vec<TensorId>),
    BceWithLogits {
        logits: TensorId,
        targets: Vec<T>,
        mask: Option<Vec<T>>,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
    saved: Vec<Vec<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. `requires_grad` marks it as a differentiation
    /// target; constants should pass false.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf, Vec::new())
    }

    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` call w.r.t. this tensor, if allocated.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        op: Op<T>,
        saved: Vec<Vec<T>>,
    ) -> TensorId {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
            saved,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: TensorId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    // ---- elementwise and structural ops ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, self.rg(&[a, b]), Op::Add(a, b), Vec::new()))
    }

    pub fn add_n(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        let first = *ids
            .first()
            .ok_or_else(|| Error::contract("add_n: empty operand list"))?;
        let shape = self.shape(first).to_vec();
        for &id in ids {
            if self.shape(id) != shape.as_slice() {
                return Err(Error::dim("add_n: operand shapes differ"));
            }
        }
        let mut data = self.data(first).to_vec();
        for &id in &ids[1..] {
            for (o, &v) in data.iter_mut().zip(self.data(id)) {
                *o += v;
            }
        }
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, self.rg(ids), Op::AddN(ids.to_vec()), Vec::new()))
    }

    /// `a[r,c] + bias[c]`, broadcasting the bias over rows.
    pub fn add_row_broadcast(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, c) = self.nodes[a.0].value.dims2()?;
        if self.shape(bias) != [c] {
            return Err(Error::dim(format!(
                "bias shape {:?} does not match row width {c}",
                self.shape(bias)
            )));
        }
        let bdat = self.data(bias).to_vec();
        let mut data = self.data(a).to_vec();
        for row in data.chunks_exact_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&bdat) {
                *o += bv;
            }
        }
        let value = Tensor::from_parts(vec![r, c], data);
        Ok(self.push(value, self.rg(&[a, bias]), Op::AddRowBroadcast(a, bias), Vec::new()))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, self.rg(&[a, b]), Op::Mul(a, b), Vec::new()))
    }

    pub fn scale(&mut self, a: TensorId, factor: T) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| x * factor).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, self.rg(&[a]), Op::Scale(a, factor), Vec::new()))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.nodes[a.0].value.dims2()?;
        let (k2, n) = self.nodes[b.0].value.dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dims {k} vs {k2} (a {:?}, b {:?})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nn(self.data(a), self.data(b), m, k, n, &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(value, self.rg(&[a, b]), Op::Matmul(a, b), Vec::new()))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.nodes[a.0].value.dims2()?;
        let src = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::from_parts(vec![c, r], out);
        Ok(self.push(value, self.rg(&[a]), Op::Transpose(a), Vec::new()))
    }

    /// Cross-correlation of `input [B,C,H,W]` with `kernel [O,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let (b, c, h, w) = self.nodes[input.0].value.dims4()?;
        let (o, ck, kh, kw) = self.nodes[kernel.0].value.dims4()?;
        if ck != c {
            return Err(Error::dim(format!(
                "conv2d: kernel expects {ck} input channels, input has {c}"
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be positive"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let ckk = c * kh * kw;
        let plane = ho * wo;

        let mut cols = vec![T::zero(); b * ckk * plane];
        let mut out = vec![T::zero(); b * o * plane];
        let x = self.data(input);
        let kmat = self.data(kernel);
        for bi in 0..b {
            let colb = &mut cols[bi * ckk * plane..(bi + 1) * ckk * plane];
            kernels::im2col(
                &x[bi * c * h * w..(bi + 1) * c * h * w],
                c,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                ho,
                wo,
                colb,
            );
            kernels::matmul_nn(
                kmat,
                colb,
                o,
                ckk,
                plane,
                &mut out[bi * o * plane..(bi + 1) * o * plane],
            );
        }
        let value = Tensor::from_parts(vec![b, o, ho, wo], out);
        Ok(self.push(
            value,
            self.rg(&[input, kernel]),
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            vec![cols],
        ))
    }

    /// Train-mode batch norm over `[B,C,H,W]`: normalizes by per-channel batch
    /// statistics and returns them so the layer can update its running stats.
    pub fn batch_norm_train(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<(TensorId, BatchStats<T>)> {
        let (b, c, h, w) = self.nodes[input.0].value.dims4()?;
        self.check_bn_params(c, gamma, beta)?;
        let n = b * h * w;
        if n == 0 {
            return Err(Error::invalid("batch_norm: empty batch in train mode"));
        }
        let x = self.data(input);
        let plane = h * w;
        let eps = T::from_f(crate::nn::BN_EPS);

        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let slice = &x[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                for &v in slice {
                    mean[ci] += v;
                }
            }
        }
        let inv_n = T::one() / T::from_f(n as f64);
        for m in mean.iter_mut() {
            *m *= inv_n;
        }
        for bi in 0..b {
            for ci in 0..c {
                let slice = &x[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                let m = mean[ci];
                for &v in slice {
                    let d = v - m;
                    var[ci] += d * d;
                }
            }
        }
        for v in var.iter_mut() {
            *v *= inv_n;
        }

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let be = self.data(beta);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let (m, istd, gc, bc) = (mean[ci], inv_std[ci], g[ci], be[ci]);
                for j in 0..plane {
                    let xh = (x[base + j] - m) * istd;
                    xhat[base + j] = xh;
                    out[base + j] = gc * xh + bc;
                }
            }
        }

        // Running stats use the unbiased variance, matching common framework
        // behavior; fall back to biased when n == 1.
        let var_running = if n > 1 {
            let corr = T::from_f(n as f64 / (n as f64 - 1.0));
            var.iter().map(|&v| v * corr).collect()
        } else {
            var.clone()
        };
        let stats = BatchStats {
            mean: mean.clone(),
            var: var_running,
        };
        let value = Tensor::from_parts(vec![b, c, h, w], out);
        let id = self.push(
            value,
            self.rg(&[input, gamma, beta]),
            Op::BatchNormTrain { input, gamma, beta },
            vec![xhat, inv_std],
        );
        Ok((id, stats))
    }

    /// Frozen-statistics batch norm: normalizes by the provided running stats
    /// and never mutates them.
    pub fn batch_norm_eval(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<TensorId> {
        let (b, c, h, w) = self.nodes[input.0].value.dims4()?;
        self.check_bn_params(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm: running stats length mismatch"));
        }
        let eps = T::from_f(crate::nn::BN_EPS);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let x = self.data(input);
        let g = self.data(gamma);
        let be = self.data(beta);
        let plane = h * w;
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let (m, istd, gc, bc) = (running_mean[ci], inv_std[ci], g[ci], be[ci]);
                for j in 0..plane {
                    let xh = (x[base + j] - m) * istd;
                    xhat[base + j] = xh;
                    out[base + j] = gc * xh + bc;
                }
            }
        }
        let value = Tensor::from_parts(vec![b, c, h, w], out);
        Ok(self.push(
            value,
            self.rg(&[input, gamma, beta]),
            Op::BatchNormFrozen { input, gamma, beta },
            vec![xhat, inv_std],
        ))
    }

    fn check_bn_params(&self, c: usize, gamma: TensorId, beta: TensorId) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "batch_norm: gamma {:?} / beta {:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(())
    }

    // ---- activations and normalizations ----

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self
            .data(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, self.rg(&[a]), Op::Relu(a), Vec::new()))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, self.rg(&[a]), Op::Sigmoid(a), Vec::new()))
    }

    /// Rowwise softmax over a 2-D tensor.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.nodes[a.0].value.dims2()?;
        if c == 0 {
            return Err(Error::dim("softmax over empty rows"));
        }
        let mut data = self.data(a).to_vec();
        for row in data.chunks_exact_mut(c) {
            kernels::softmax_in_place(row);
        }
        let value = Tensor::from_parts(vec![r, c], data);
        Ok(self.push(value, self.rg(&[a]), Op::SoftmaxRows(a), Vec::new()))
    }

    /// Rowwise layer norm over a 2-D tensor with learned gain/bias of width c.
    pub fn layer_norm(&mut self, input: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let (r, c) = self.nodes[input.0].value.dims2()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("layer_norm: gain/bias width mismatch"));
        }
        let eps = T::from_f(crate::nn::LN_EPS);
        let x = self.data(input);
        let g = self.data(gamma).to_vec();
        let be = self.data(beta).to_vec();
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); x.len()];
        let inv_c = T::one() / T::from_f(c as f64);
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_c;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_c;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat[i * c + j] = xh;
                out[i * c + j] = g[j] * xh + be[j];
            }
        }
        let value = Tensor::from_parts(vec![r, c], out);
        Ok(self.push(
            value,
            self.rg(&[input, gamma, beta]),
            Op::LayerNorm { input, gamma, beta },
            vec![xhat, inv_std],
        ))
    }

    /// Normalize each row of a 2-D tensor to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.nodes[a.0].value.dims2()?;
        let x = self.data(a);
        let floor = T::from_f(1e-12);
        let mut inv_norm = vec![T::zero(); r];
        let mut out = vec![T::zero(); x.len()];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mut sq = T::zero();
            for &v in row {
                sq += v * v;
            }
            let inv = T::one() / sq.sqrt().max(floor);
            inv_norm[i] = inv;
            for j in 0..c {
                out[i * c + j] = row[j] * inv;
            }
        }
        let value = Tensor::from_parts(vec![r, c], out);
        Ok(self.push(value, self.rg(&[a]), Op::L2NormalizeRows(a), vec![inv_norm]))
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: TensorId) -> Result<TensorId> {
        let (b, c, h, w) = self.nodes[a.0].value.dims4()?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::dim("global_avg_pool: empty spatial extent"));
        }
        let x = self.data(a);
        let inv = T::one() / T::from_f(plane as f64);
        let mut out = vec![T::zero(); b * c];
        for (i, chunk) in x.chunks_exact(plane).enumerate() {
            let mut s = T::zero();
            for &v in chunk {
                s += v;
            }
            out[i] = s * inv;
        }
        let value = Tensor::from_parts(vec![b, c], out);
        Ok(self.push(value, self.rg(&[a]), Op::GlobalAvgPool(a), Vec::new()))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let mut s = T::zero();
        for &v in self.data(a) {
            s += v;
        }
        let value = Tensor::scalar(s);
        Ok(self.push(value, self.rg(&[a]), Op::SumAll(a), Vec::new()))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.nodes[a.0].value.numel();
        if n == 0 {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let mut s = T::zero();
        for &v in self.data(a) {
            s += v;
        }
        let value = Tensor::scalar(s / T::from_f(n as f64));
        Ok(self.push(value, self.rg(&[a]), Op::MeanAll(a), Vec::new()))
    }

    /// `[r,c] -> [r,1]` row sums.
    pub fn sum_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.nodes[a.0].value.dims2()?;
        let x = self.data(a);
        let mut out = vec![T::zero(); r];
        for i in 0..r {
            let mut s = T::zero();
            for &v in &x[i * c..(i + 1) * c] {
                s += v;
            }
            out[i] = s;
        }
        let value = Tensor::from_parts(vec![r, 1], out);
        Ok(self.push(value, self.rg(&[a]), Op::SumRows(a), Vec::new()))
    }

    // ---- indexing and concatenation ----

    /// Select rows of a 2-D tensor by index (duplicates allowed).
    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (r, c) = self.nodes[a.0].value.dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!(
                "gather_rows: index {bad} out of range for {r} rows"
            )));
        }
        let x = self.data(a);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let value = Tensor::from_parts(vec![indices.len(), c], out);
        Ok(self.push(
            value,
            self.rg(&[a]),
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
            Vec::new(),
        ))
    }

    /// Column slice `[r, start..start+len]` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.nodes[a.0].value.dims2()?;
        if start + len > c {
            return Err(Error::dim(format!(
                "slice_cols: {start}..{} exceeds width {c}",
                start + len
            )));
        }
        let x = self.data(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let value = Tensor::from_parts(vec![r, len], out);
        Ok(self.push(
            value,
            self.rg(&[a]),
            Op::SliceCols {
                input: a,
                start,
                len,
            },
            Vec::new(),
        ))
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        if ids.is_empty() {
            return Err(Error::contract("concat_cols: empty operand list"));
        }
        let (r, _) = self.nodes[ids[0].0].value.dims2()?;
        let mut widths = Vec::with_capacity(ids.len());
        for &id in ids {
            let (ri, ci) = self.nodes[id.0].value.dims2()?;
            if ri != r {
                return Err(Error::dim("concat_cols: row counts differ"));
            }
            widths.push(ci);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&id, &ci) in ids.iter().zip(&widths) {
                let x = self.data(id);
                out.extend_from_slice(&x[i * ci..(i + 1) * ci]);
            }
        }
        let value = Tensor::from_parts(vec![r, total], out);
        Ok(self.push(value, self.rg(ids), Op::ConcatCols(ids.to_vec()), Vec::new()))
    }

    /// Stack 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        if ids.is_empty() {
            return Err(Error::contract("concat_rows: empty operand list"));
        }
        let (_, c) = self.nodes[ids[0].0].value.dims2()?;
        let mut total = 0;
        for &id in ids {
            let (ri, ci) = self.nodes[id.0].value.dims2()?;
            if ci != c {
                return Err(Error::dim("concat_rows: column counts differ"));
            }
            total += ri;
        }
        let mut out = Vec::with_capacity(total * c);
        for &id in ids {
            out.extend_from_slice(self.data(id));
        }
        let value = Tensor::from_parts(vec![total, c], out);
        Ok(self.push(value, self.rg(ids), Op::ConcatRows(ids.to_vec()), Vec::new()))
    }

    // ---- losses ----

    /// Mean binary cross entropy from logits, in the overflow-free form
    /// `max(z,0) - z*t + ln(1 + exp(-|z|))`. A mask of the same shape zeroes
    /// masked entries and the mean runs over unmasked entries only.
    pub fn bce_with_logits(
        &mut self,
        logits: TensorId,
        targets: &[T],
        mask: Option<&[T]>,
    ) -> Result<TensorId> {
        let z = self.data(logits);
        if targets.len() != z.len() {
            return Err(Error::dim("bce_with_logits: target length mismatch"));
        }
        if let Some(m) = mask {
            if m.len() != z.len() {
                return Err(Error::dim("bce_with_logits: mask length mismatch"));
            }
        }
        let mut n_eff = T::zero();
        match mask {
            Some(m) => {
                for &v in m {
                    n_eff += v;
                }
            }
            None => n_eff = T::from_f(z.len() as f64),
        }
        if n_eff <= T::zero() {
            return Err(Error::invalid("bce_with_logits: all entries masked"));
        }
        let mut total = T::zero();
        for (i, (&zi, &ti)) in z.iter().zip(targets).enumerate() {
            let w = mask.map_or(T::one(), |m| m[i]);
            if w == T::zero() {
                continue;
            }
            let term = zi.max(T::zero()) - zi * ti + (-zi.abs()).exp().ln_1p();
            total += w * term;
        }
        let value = Tensor::scalar(total / n_eff);
        Ok(self.push(
            value,
            self.rg(&[logits]),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                mask: mask.map(|m| m.to_vec()),
            },
            vec![vec![n_eff]],
        ))
    }

    /// Mean cross entropy of rowwise softmax against integer class targets.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let (r, c) = self.nodes[logits.0].value.dims2()?;
        if targets.len() != r {
            return Err(Error::dim("softmax_cross_entropy: one target per row required"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::contract(format!(
                "softmax_cross_entropy: target {bad} out of range for {c} classes"
            )));
        }
        let z = self.data(logits);
        let mut probs = z.to_vec();
        let mut total = T::zero();
        for (i, row) in probs.chunks_exact_mut(c).enumerate() {
            let lse = kernels::softmax_in_place(row);
            // loss_row = lse - z[target]; softmax_in_place returns max+ln(sum).
            total += lse - z[i * c + targets[i]];
        }
        let value = Tensor::scalar(total / T::from_f(r as f64));
        Ok(self.push(
            value,
            self.rg(&[logits]),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            vec![probs],
        ))
    }

    // ---- backward ----

    /// Populate gradients of every grad-requiring tensor reachable from the
    /// scalar `loss`. Clears gradients from any previous call first.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            // Nothing depends on a differentiable input.
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn acc<'g>(
        grads: &'g mut [Option<Vec<T>>],
        nodes: &[Node<T>],
        id: TensorId,
    ) -> Option<&'g mut [T]> {
        if !nodes[id.0].requires_grad {
            return None;
        }
        let n = nodes[id.0].value.numel();
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &id in &[*a, *b] {
                    if let Some(dst) = Self::acc(grads, nodes, id) {
                        for (o, &gv) in dst.iter_mut().zip(g) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::AddN(ids) => {
                for &id in ids {
                    if let Some(dst) = Self::acc(grads, nodes, id) {
                        for (o, &gv) in dst.iter_mut().zip(g) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::AddRowBroadcast(a, bias) => {
                if let Some(dst) = Self::acc(grads, nodes, *a) {
                    for (o, &gv) in dst.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                let c = nodes[bias.0].value.numel();
                if let Some(dst) = Self::acc(grads, nodes, *bias) {
                    for row in g.chunks_exact(c) {
                        for (o, &gv) in dst.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(dst) = Self::acc(grads, nodes, *a) {
                    for ((o, &gv), &y) in dst.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                }
                if let Some(dst) = Self::acc(grads, nodes, *b) {
                    for ((o, &gv), &x) in dst.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                if let Some(dst) = Self::acc(grads, nodes, *a) {
                    for (o, &gv) in dst.iter_mut().zip(g) {
                        *o += gv * f;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(dst) = Self::acc(grads, nodes, *a) {
                    // dA += g [m,n] @ B^T [n,k]
                    kernels::matmul_nt(g, bv, m, n, k, dst);
                }
                if let Some(dst) = Self::acc(grads, nodes, *b) {
                    // dB += A^T [k,m] @ g [m,n]
                    kernels::matmul_tn(av, g, m, k, n, dst);
                }
            }
            Op::Transpose(a) => {
                let (c, r) = (nodes[i].value.shape()[0], nodes[i].value.shape()[1]);
                if let Some(dst) = Self::acc(grads, nodes, *a) {
                    // g has shape [c, r]; dst has shape [r, c].
                    for jj in 0..c {
                        for ii in 0..r {
                            dst[ii * c + jj] += g[jj * r + ii];
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (b, c, h, w) = nodes[input.0].value.dims4().expect("conv input 4d");
                let (o, _, kh, kw) = nodes[kernel.0].value.dims4().expect("conv kernel 4d");
                let (_, _, ho, wo) = nodes[i].value.dims4().expect("conv out 4d");
                let ckk = c * kh * kw;
                let plane = ho * wo;
                let cols = &nodes[i].saved[0];
                let kmat = nodes[kernel.0].value.data();

                if nodes[kernel.0].requires_grad {
                    let dst = Self::acc(grads, nodes, *kernel).expect("kernel grad");
                    for bi in 0..b {
                        kernels::matmul_nt(
                            &g[bi * o * plane..(bi + 1) * o * plane],
                            &cols[bi * ckk * plane..(bi + 1) * ckk * plane],
                            o,
                            plane,
                            ckk,
                            dst,
                        );
                    }
                }
                if nodes[input.0].requires_grad {
                    let dst = Self::acc(grads, nodes, *input).expect("input grad");
                    let mut dcols = vec![T::zero(); ckk * plane];
                    for bi in 0..b {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        kernels::matmul_tn(
                            kmat,
                            &g[bi * o * plane..(bi + 1) * o * plane],
                            o,
                            ckk,
                            plane,
                            &mut dcols,
                        );
                        kernels::col2im(
                            &dcols,
                            c,
                            h,
                            w,
                            kh,
                            kw,
                            *stride,
                            *padding,
                            ho,
                            wo,
                            &mut dst[bi * c * h * w..(bi + 1) * c * h * w],
                        );
                    }
                }
            }
            Op::BatchNormTrain { input, gamma, beta } => {
                let (b, c, h, w) = nodes[input.0].value.dims4().expect("bn input 4d");
                let plane = h * w;
                let n = b * plane;
                let xhat = &nodes[i].saved[0];
                let inv_std = &nodes[i].saved[1];
                let gv = nodes[gamma.0].value.data();

                // Per-channel sums of g and g*xhat.
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        for j in 0..plane {
                            sum_g[ci] += g[base + j];
                            sum_gx[ci] += g[base + j] * xhat[base + j];
                        }
                    }
                }
                if let Some(dst) = Self::acc(grads, nodes, *gamma) {
                    for ci in 0..c {
                        dst[ci] += sum_gx[ci];
                    }
                }
                if let Some(dst) = Self::acc(grads, nodes, *beta) {
                    for ci in 0..c {
                        dst[ci] += sum_g[ci];
                    }
                }
                if let Some(dst) = Self::acc(grads, nodes, *input) {
                    let inv_n = T::one() / T::from_f(n as f64);
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            let coef = gv[ci] * inv_std[ci] * inv_n;
                            let nf = T::from_f(n as f64);
                            for j in 0..plane {
                                dst[base + j] += coef
                                    * (nf * g[base + j]
                                        - sum_g[ci]
                                        - xhat[base + j] * sum_gx[ci]);
                            }
                        }
                    }
                }
            }
            Op::BatchNormFrozen { input, gamma, beta } => {
                let (b, c, h, w) = nodes[input.0].value.dims4().expect("bn input 4d");
                let plane = h * w;
                let xhat = &nodes[i].saved[0];
                let inv_std = &nodes[i].saved[1];
                let gv = nodes[gamma.0].value.data();
                if let Some(dst) = Self::acc(grads, nodes, *input) {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            let coef = gv[ci] * inv_std[ci];
                            for j in 0..plane {
                                dst[base + j] += g[base + j] * coef;
                            }
                        }
                    }
                }
                if let Some(dst) = Self::acc(grads, nodes, *gamma) {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            for j in 0..plane {
                                dst[ci] += g[base + j] * xhat[base + j];
                            }
                        }
                    }
                }
                if let Some(dst) = Self::acc(grads, nodes, *beta) {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            for j in 0..plane {
                                dst[ci] += g[base + j];
                            }
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                if let Some(dst) = Self::acc(grads, nodes, *a) {
                    for ((o, &gv), &xv) in dst.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = nodes[i].value.data();
                if let Some(dst) = Self::acc(grads, nodes, *a) {
                    for ((o, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (T::one() - yv);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = nodes[i].value.dims2().expect("softmax 2d");
                let y = nodes[i].value.data();
                if let Some(dst) = Self::acc(grads, nodes, *a) {
                    for ri in 0..r {
                        let yrow = &y[ri * c..(ri + 1) * c];
                        let grow = &g[ri * c..(ri + 1) * c];
                        let mut dot = T::zero();
                        for (&gv, &yv) in grow.iter().zip(yrow) {
                            dot += gv * yv;
                        }
                        let drow = &mut dst[ri * c..(ri + 1) * c];
                        for ((o, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { input, gamma, beta } => {
                let (r, c) = nodes[input.0].value.dims2().expect("ln 2d");
                let xhat = &nodes[i].saved[0];
                let inv_std = &nodes[i].saved[1];
                let gv = nodes[gamma.0].value.data();
                if let Some(dst) = Self::acc(grads, nodes, *gamma) {
                    for ri in 0..r {
                        for j in 0..c {
                            dst[j] += g[ri * c + j] * xhat[ri * c + j];
                        }
                    }
                }
                if let Some(dst) = Self::acc(grads, nodes, *beta) {
                    for ri in 0..r {
                        for j in 0..c {
                            dst[j] += g[ri * c + j];
                        }
                    }
                }
                if let Some(dst) = Self::acc(grads, nodes, *input) {
                    let cf = T::from_f(c as f64);
                    for ri in 0..r {
                        let base = ri * c;
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..c {
                            let dxh = g[base + j] * gv[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[base + j];
                        }
                        let coef = inv_std[ri] / cf;
                        for j in 0..c {
                            let dxh = g[base + j] * gv[j];
                            dst[base + j] +=
                                coef * (cf * dxh - sum_dxh - xhat[base + j] * sum_dxh_xh);
                        }
                    }
                }
            }
            Op::L2NormalizeRows(a) => {
                let (r, c) = nodes[i].value.dims2().expect("l2n 2d");
                let y = nodes[i].value.data();
                let inv_norm = &nodes[i].saved[0];
                if let Some(dst) = Self::acc(grads, nodes, *a) {
                    for ri in 0..r {
                        let yrow = &y[ri * c..(ri + 1) * c];
                        let grow = &g[ri * c..(ri + 1) * c];
                        let mut dot = T::zero();
                        for (&gv, &yv) in grow.iter().zip(yrow) {
                            dot += gv * yv;
                        }
                        let drow = &mut dst[ri * c..(ri + 1) * c];
                        for ((o, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += (gv - yv * dot) * inv_norm[ri];
                        }
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                let (_, _, h, w) = nodes[a.0].value.dims4().expect("gap 4d");
                let plane = h * w;
                let inv = T::one() / T::from_f(plane as f64);
                if let Some(dst) = Self::acc(grads, nodes, *a) {
                    for (chunk, &gv) in dst.chunks_exact_mut(plane).zip(g) {
                        for o in chunk {
                            *o += gv * inv;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(dst) = Self::acc(grads, nodes, *a) {
                    for o in dst {
                        *o += g[0];
                    }
                }
            }
            Op::MeanAll(a) => {
                let n = nodes[a.0].value.numel();
                let gv = g[0] / T::from_f(n as f64);
                if let Some(dst) = Self::acc(grads, nodes, *a) {
                    for o in dst {
                        *o += gv;
                    }
                }
            }
            Op::SumRows(a) => {
                let (r, c) = nodes[a.0].value.dims2().expect("sum_rows 2d");
                if let Some(dst) = Self::acc(grads, nodes, *a) {
                    for ri in 0..r {
                        for o in &mut dst[ri * c..(ri + 1) * c] {
                            *o += g[ri];
                        }
                    }
                }
            }
            Op::GatherRows { input, indices } => {
                let c = nodes[input.0].value.shape()[1];
                if let Some(dst) = Self::acc(grads, nodes, *input) {
                    for (k, &ri) in indices.iter().enumerate() {
                        let grow = &g[k * c..(k + 1) * c];
                        let drow = &mut dst[ri * c..(ri + 1) * c];
                        for (o, &gv) in drow.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::SliceCols { input, start, len } => {
                let (r, c) = nodes[input.0].value.dims2().expect("slice 2d");
                if let Some(dst) = Self::acc(grads, nodes, *input) {
                    for ri in 0..r {
                        let grow = &g[ri * len..(ri + 1) * len];
                        let drow = &mut dst[ri * c + start..ri * c + start + len];
                        for (o, &gv) in drow.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::ConcatCols(ids) => {
                let r = nodes[i].value.shape()[0];
                let total = nodes[i].value.shape()[1];
                let mut start = 0;
                for &id in ids {
                    let ci = nodes[id.0].value.shape()[1];
                    if let Some(dst) = Self::acc(grads, nodes, id) {
                        for ri in 0..r {
                            let grow = &g[ri * total + start..ri * total + start + ci];
                            let drow = &mut dst[ri * ci..(ri + 1) * ci];
                            for (o, &gv) in drow.iter_mut().zip(grow) {
                                *o += gv;
                            }
                        }
                    }
                    start += ci;
                }
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for &id in ids {
                    let n = nodes[id.0].value.numel();
                    if let Some(dst) = Self::acc(grads, nodes, id) {
                        for (o, &gv) in dst.iter_mut().zip(&g[offset..offset + n]) {
                            *o += gv;
                        }
                    }
                    offset += n;
                }
            }
            Op::BceWithLogits {
                logits,
                targets,
                mask,
            } => {
                let z = nodes[logits.0].value.data();
                let n_eff = nodes[i].saved[0][0];
                let scale = g[0] / n_eff;
                if let Some(dst) = Self::acc(grads, nodes, *logits) {
                    for (j, ((o, &zj), &tj)) in dst.iter_mut().zip(z).zip(targets).enumerate() {
                        let w = mask.as_ref().map_or(T::one(), |m| m[j]);
                        if w == T::zero() {
                            continue;
                        }
                        *o += w * scale * (kernels::sigmoid(zj) - tj);
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let (r, c) = nodes[logits.0].value.dims2().expect("sce 2d");
                let probs = &nodes[i].saved[0];
                let scale = g[0] / T::from_f(r as f64);
                if let Some(dst) = Self::acc(grads, nodes, *logits) {
                    for ri in 0..r {
                        let prow = &probs[ri * c..(ri + 1) * c];
                        let drow = &mut dst[ri * c..(ri + 1) * c];
                        for (j, (o, &pv)) in drow.iter_mut().zip(prow).enumerate() {
                            let onehot = if j == targets[ri] { T::one() } else { T::zero() };
                            *o += scale * (pv - onehot);
                        }
                    }
                }
            }
        }
    }
}

/// Dense kernels shared by forward and backward passes.
pub(crate) mod kernels {
    use crate::tensor::Scalar;

    /// out[m,n] += a[m,k] @ b[k,n]
    pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    /// out[m,n] += a[m,k] @ b[n,k]^T
    pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (j, o) in orow.iter_mut().enumerate() {
                *o += dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    }

    /// out[m,n] += a[k,m]^T @ b[k,n]
    pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
        for p in 0..k {
            let arow = &a[p * m..(p + 1) * m];
            let brow = &b[p * n..(p + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    /// Four-lane unrolled dot product; breaks the serial FP dependency chain.
    pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
        let mut ia = a.chunks_exact(4);
        let mut ib = b.chunks_exact(4);
        let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
        for (ca, cb) in (&mut ia).zip(&mut ib) {
            s0 += ca[0] * cb[0];
            s1 += ca[1] * cb[1];
            s2 += ca[2] * cb[2];
            s3 += ca[3] * cb[3];
        }
        let mut s = (s0 + s1) + (s2 + s3);
        for (&x, &y) in ia.remainder().iter().zip(ib.remainder()) {
            s += x * y;
        }
        s
    }

    pub fn sigmoid<T: Scalar>(z: T) -> T {
        if z >= T::zero() {
            T::one() / (T::one() + (-z).exp())
        } else {
            let e = z.exp();
            e / (T::one() + e)
        }
    }

    /// In-place stable softmax of one row; returns logsumexp of the row.
    pub fn softmax_in_place<T: Scalar>(row: &mut [T]) -> T {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
        mx + sum.ln()
    }

    /// Unfold conv patches of one image [C,H,W] into cols [C*kh*kw, ho*wo].
    #[allow(clippy::too_many_arguments)]
    pub fn im2col<T: Scalar>(
        x: &[T],
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        ho: usize,
        wo: usize,
        cols: &mut [T],
    ) {
        let mut r = 0;
        for ci in 0..c {
            let chan = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let dst = &mut cols[r * ho * wo..(r + 1) * ho * wo];
                    let mut idx = 0;
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            for _ in 0..wo {
                                dst[idx] = T::zero();
                                idx += 1;
                            }
                            continue;
                        }
                        let src_row = &chan[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            dst[idx] = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                            idx += 1;
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    /// Scatter-add of cols gradients back onto the image gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn col2im<T: Scalar>(
        cols: &[T],
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        ho: usize,
        wo: usize,
        dx: &mut [T],
    ) {
        let mut r = 0;
        for ci in 0..c {
            let chan_base = ci * h * w;
            for ki in 0..kh {
                for kj in 0..kw {
                    let src = &cols[r * ho * wo..(r + 1) * ho * wo];
                    let mut idx = 0;
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            idx += wo;
                            continue;
                        }
                        let row_base = chan_base + iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[row_base + ix as usize] += src[idx];
                            }
                            idx += 1;
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}
