use rand::Rng;

use super::Tensor;
use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding chosen so the spatial size is preserved (stride 1).
    Same,
    /// No padding; output shrinks by kernel-1.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Average,
}

/// Per-channel batch statistics produced by a train-mode batch norm, so
/// the caller can fold them into its running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op {
    Conv2d { x: NodeId, w: NodeId, b: NodeId, out: NodeId, dims: ConvDims },
    Pool2 { x: NodeId, out: NodeId, mode: PoolMode, argmax: Vec<usize> },
    Relu { x: NodeId, out: NodeId },
    Gap { x: NodeId, out: NodeId },
    Dense { x: NodeId, w: NodeId, b: NodeId, out: NodeId },
    Softmax { x: NodeId, out: NodeId },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        out: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout { x: NodeId, out: NodeId, mask: Vec<u8>, scale: f64 },
    CrossEntropy { probs: NodeId, out: NodeId, targets: Vec<usize>, clamp: f64 },
    Affine { x: NodeId, out: NodeId, mul: f64 },
    MulElem { a: NodeId, b: NodeId, out: NodeId },
    SumAll { x: NodeId, out: NodeId },
    DotConst { x: NodeId, out: NodeId, weights: Vec<f64> },
}

/// Recorded computation. Operations execute eagerly when inserted; the
/// record exists so `backward` can replay them in reverse. Node ids are
/// indices into an append-only list, so the graph is acyclic by
/// construction.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

/// Interprets a rank 3 or 4 shape as a batched image, and rank 1 or 2 as
/// a batched vector. Rank 3 and 1 carry an implied batch of one.
fn as_images(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::Shape(format!("expected [C,H,W] or [B,C,H,W], got {shape:?}"))),
    }
}

fn as_rows(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [d] => Ok((1, d)),
        [b, d] => Ok((b, d)),
        _ => Err(Error::Shape(format!("expected [D] or [B,D], got {shape:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    /// Gradient of the last `backward` target with respect to node `id`.
    /// Empty until `backward` has run.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id]
    }

    pub fn all_values_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    fn push(&mut self, value: Tensor) -> NodeId {
        self.values.push(value);
        self.values.len() - 1
    }

    /// Cross-correlation with stride 1. Accepts [C,H,W] or [B,C,H,W]
    /// input; kernels are [C_out,C_in,kh,kw], bias [C_out].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, padding: Padding) -> Result<NodeId> {
        let (bs, cin, h, wd) = as_images(self.values[x].shape())?;
        let kshape = self.values[w].shape();
        let [cout, kcin, kh, kw] = *kshape else {
            return Err(Error::Shape(format!("kernels must be rank 4, got {kshape:?}")));
        };
        if kcin != cin {
            return Err(Error::Shape(format!(
                "kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if self.values[b].shape() != [cout] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {cout} output channels",
                self.values[b].shape()
            )));
        }
        let (ho, wo, pad_top, pad_left) = match padding {
            Padding::Same => (h, wd, (kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => {
                if kh > h || kw > wd {
                    return Err(Error::Shape(format!(
                        "valid padding: kernel {kh}x{kw} larger than input {h}x{wd}"
                    )));
                }
                (h - kh + 1, wd - kw + 1, 0, 0)
            }
        };
        let dims = ConvDims { b: bs, cin, h, w: wd, cout, kh, kw, ho, wo, pad_top, pad_left };

        let rank3 = self.values[x].shape().len() == 3;
        let mut out = vec![0.0; bs * cout * ho * wo];
        let mut cols = vec![0.0; dims.k() * dims.spatial_out()];
        let wdata = self.values[w].data();
        let xdata = self.values[x].data();
        let bias = self.values[b].data();
        let sample = cin * h * wd;
        let out_sample = cout * ho * wo;
        for bi in 0..bs {
            im2col(&xdata[bi * sample..(bi + 1) * sample], &dims, &mut cols);
            let n = dims.spatial_out();
            let k = dims.k();
            unsafe {
                matrixmultiply::dgemm(
                    cout,
                    k,
                    n,
                    1.0,
                    wdata.as_ptr(),
                    k as isize,
                    1,
                    cols.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out[bi * out_sample..].as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for co in 0..cout {
                let base = bi * out_sample + co * n;
                let bv = bias[co];
                for v in &mut out[base..base + n] {
                    *v += bv;
                }
            }
        }
        let shape = if rank3 { vec![cout, ho, wo] } else { vec![bs, cout, ho, wo] };
        let id = self.push(Tensor::new(shape, out)?);
        self.ops.push(Op::Conv2d { x, w, b, out: id, dims });
        Ok(id)
    }

    /// 2x2 window, stride 2, edge windows clipped (ceil semantics for odd
    /// extents). Max pooling remembers its argmax (first in row-major
    /// order on ties) for the backward pass.
    pub fn stride2_pool(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        let (bs, c, h, w) = as_images(self.values[x].shape())?;
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("pooling needs spatial extents >= 2, got {h}x{w}")));
        }
        let rank3 = self.values[x].shape().len() == 3;
        let ho = h.div_ceil(2);
        let wo = w.div_ceil(2);
        let xdata = self.values[x].data();
        let mut out = vec![0.0; bs * c * ho * wo];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax = vec![0usize; out.len()];
        }
        for bc in 0..bs * c {
            let in_base = bc * h * w;
            let out_base = bc * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let y1 = (2 * oy + 2).min(h);
                    let x1 = (2 * ox + 2).min(w);
                    match mode {
                        PoolMode::Max => {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0;
                            for iy in 2 * oy..y1 {
                                for ix in 2 * ox..x1 {
                                    let idx = in_base + iy * w + ix;
                                    if xdata[idx] > best {
                                        best = xdata[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            out[out_base + oy * wo + ox] = best;
                            argmax[out_base + oy * wo + ox] = best_idx;
                        }
                        PoolMode::Average => {
                            let mut sum = 0.0;
                            let mut count = 0;
                            for iy in 2 * oy..y1 {
                                for ix in 2 * ox..x1 {
                                    sum += xdata[in_base + iy * w + ix];
                                    count += 1;
                                }
                            }
                            out[out_base + oy * wo + ox] = sum / count as f64;
                        }
                    }
                }
            }
        }
        let shape = if rank3 { vec![c, ho, wo] } else { vec![bs, c, ho, wo] };
        let id = self.push(Tensor::new(shape, out)?);
        self.ops.push(Op::Pool2 { x, out: id, mode, argmax });
        Ok(id)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.values[x].data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.values[x].shape().to_vec();
        let id = self.push(Tensor::new(shape, out).expect("same shape"));
        self.ops.push(Op::Relu { x, out: id });
        id
    }

    /// Spatial mean of each channel map: [C,H,W] -> [C], [B,C,H,W] -> [B,C].
    pub fn global_average_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (bs, c, h, w) = as_images(self.values[x].shape())?;
        let rank3 = self.values[x].shape().len() == 3;
        let xdata = self.values[x].data();
        let inv = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; bs * c];
        for bc in 0..bs * c {
            let mut sum = 0.0;
            for v in &xdata[bc * h * w..(bc + 1) * h * w] {
                sum += v;
            }
            out[bc] = sum * inv;
        }
        let shape = if rank3 { vec![c] } else { vec![bs, c] };
        let id = self.push(Tensor::new(shape, out)?);
        self.ops.push(Op::Gap { x, out: id });
        Ok(id)
    }

    /// Affine map: [D_in] or [B,D_in] times weights [D_out,D_in] plus
    /// bias [D_out].
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (bs, din) = as_rows(self.values[x].shape())?;
        let [dout, wdin] = *self.values[w].shape() else {
            return Err(Error::Shape(format!(
                "dense weights must be rank 2, got {:?}",
                self.values[w].shape()
            )));
        };
        if wdin != din {
            return Err(Error::Shape(format!("dense weights expect {wdin} inputs, got {din}")));
        }
        if self.values[b].shape() != [dout] {
            return Err(Error::Shape(format!(
                "dense bias shape {:?} does not match {dout} outputs",
                self.values[b].shape()
            )));
        }
        let rank1 = self.values[x].shape().len() == 1;
        let xdata = self.values[x].data();
        let wdata = self.values[w].data();
        let bias = self.values[b].data();
        let mut out = vec![0.0; bs * dout];
        for bi in 0..bs {
            let row = &xdata[bi * din..(bi + 1) * din];
            for o in 0..dout {
                let wrow = &wdata[o * din..(o + 1) * din];
                let mut acc = 0.0;
                for i in 0..din {
                    acc += wrow[i] * row[i];
                }
                out[bi * dout + o] = acc + bias[o];
            }
        }
        let shape = if rank1 { vec![dout] } else { vec![bs, dout] };
        let id = self.push(Tensor::new(shape, out)?);
        self.ops.push(Op::Dense { x, w, b, out: id });
        Ok(id)
    }

    /// Row-wise softmax with max subtraction: [C] or [B,C].
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (bs, c) = as_rows(self.values[x].shape())?;
        if c < 2 {
            return Err(Error::Shape(format!("softmax needs at least 2 classes, got {c}")));
        }
        let xdata = self.values[x].data();
        let mut out = vec![0.0; bs * c];
        for bi in 0..bs {
            let row = &xdata[bi * c..(bi + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                *o = (v - m).exp();
                sum += *o;
            }
            for o in &mut out[bi * c..(bi + 1) * c] {
                *o /= sum;
            }
        }
        let shape = self.values[x].shape().to_vec();
        let id = self.push(Tensor::new(shape, out)?);
        self.ops.push(Op::Softmax { x, out: id });
        Ok(id)
    }

    /// Batch normalization over the batch (and spatial, for images) axes.
    /// `running` supplies the eval-mode statistics; train mode returns the
    /// batch statistics so the caller can update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        mode: Mode,
        eps: f64,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let shape = self.values[x].shape().to_vec();
        let (channels, reduce) = bn_geometry(&shape)?;
        if self.values[gamma].shape() != [channels] || self.values[beta].shape() != [channels] {
            return Err(Error::Shape(format!(
                "batch norm scale/shift must have shape [{channels}]"
            )));
        }
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::Shape(format!(
                "running statistics must have length {channels}"
            )));
        }
        if mode == Mode::Train && reduce < 2 {
            return Err(Error::Shape(
                "train-mode batch norm needs at least 2 values per channel".into(),
            ));
        }

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut sum = 0.0;
                    for_channel(&shape, c, self.values[x].data(), |v| sum += v);
                    let m = sum / reduce as f64;
                    let mut sq = 0.0;
                    for_channel(&shape, c, self.values[x].data(), |v| {
                        let d = v - m;
                        sq += d * d;
                    });
                    mean[c] = m;
                    var[c] = sq / reduce as f64;
                }
                (mean, var)
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

        let g = self.values[gamma].data().to_vec();
        let sh = self.values[beta].data().to_vec();
        let xdata = self.values[x].data();
        let mut out = vec![0.0; xdata.len()];
        map_channels(&shape, xdata, &mut out, |c, v| (v - mean[c]) * inv_std[c] * g[c] + sh[c]);

        let stats = match mode {
            Mode::Train => Some(BatchStats { mean: mean.clone(), var: var.clone() }),
            Mode::Eval => None,
        };
        let id = self.push(Tensor::new(shape, out)?);
        self.ops.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            out: id,
            mean,
            inv_std,
            train: mode == Mode::Train,
        });
        Ok((id, stats))
    }

    /// Inverted dropout: survivors scaled by 1/(1-p). Eval mode and p=0
    /// are the identity and record nothing. Mask elements are drawn in
    /// row-major order.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must be in [0,1), got {p}")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let xdata = self.values[x].data();
        let mut mask = vec![0u8; xdata.len()];
        let mut out = vec![0.0; xdata.len()];
        for i in 0..xdata.len() {
            if rng.random::<f64>() >= p {
                mask[i] = 1;
                out[i] = xdata[i] * scale;
            }
        }
        let shape = self.values[x].shape().to_vec();
        let id = self.push(Tensor::new(shape, out)?);
        self.ops.push(Op::Dropout { x, out: id, mask, scale });
        Ok(id)
    }

    /// Mean categorical cross-entropy over the batch, reading the true
    /// class probability of each row. Probabilities below `clamp` are
    /// clamped before the log so a confident miss cannot produce inf.
    pub fn cross_entropy(&mut self, probs: NodeId, targets: &[usize]) -> Result<NodeId> {
        let clamp = 1e-12;
        let (bs, c) = as_rows(self.values[probs].shape())?;
        if targets.len() != bs {
            return Err(Error::Shape(format!(
                "{} targets for a batch of {bs} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Shape(format!("target class {t} out of range for {c} classes")));
        }
        let pdata = self.values[probs].data();
        let mut loss = 0.0;
        for (bi, &t) in targets.iter().enumerate() {
            loss -= pdata[bi * c + t].max(clamp).ln();
        }
        loss /= bs as f64;
        let id = self.push(Tensor::scalar(loss));
        self.ops.push(Op::CrossEntropy { probs, out: id, targets: targets.to_vec(), clamp });
        Ok(id)
    }

    /// Elementwise mul*x + add. Used to assemble composite losses whose
    /// extra terms are constants with respect to the parameters.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let out: Vec<f64> = self.values[x].data().iter().map(|&v| mul * v + add).collect();
        let shape = self.values[x].shape().to_vec();
        let id = self.push(Tensor::new(shape, out).expect("same shape"));
        self.ops.push(Op::Affine { x, out: id, mul });
        id
    }

    /// Elementwise product of two same-shaped nodes.
    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.values[a].shape() != self.values[b].shape() {
            return Err(Error::Shape(format!(
                "elementwise product of {:?} and {:?}",
                self.values[a].shape(),
                self.values[b].shape()
            )));
        }
        let out: Vec<f64> = self.values[a]
            .data()
            .iter()
            .zip(self.values[b].data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.values[a].shape().to_vec();
        let id = self.push(Tensor::new(shape, out)?);
        self.ops.push(Op::MulElem { a, b, out: id });
        Ok(id)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.values[x].data().iter().sum();
        let id = self.push(Tensor::scalar(s));
        self.ops.push(Op::SumAll { x, out: id });
        id
    }

    /// Fixed-weight inner product with the flattened input; handy for
    /// building scalar probes in gradient tests.
    pub fn dot_const(&mut self, x: NodeId, weights: &[f64]) -> Result<NodeId> {
        if weights.len() != self.values[x].numel() {
            return Err(Error::Shape(format!(
                "probe weights length {} does not match {} values",
                weights.len(),
                self.values[x].numel()
            )));
        }
        let s: f64 = self.values[x].data().iter().zip(weights).map(|(a, b)| a * b).sum();
        let id = self.push(Tensor::scalar(s));
        self.ops.push(Op::DotConst { x, out: id, weights: weights.to_vec() });
        Ok(id)
    }

    /// Reverse pass from a scalar loss node. Fills `grad` for every node;
    /// earlier gradients are discarded, so one tape supports repeated
    /// backward calls without accumulation across them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss >= self.values.len() {
            return Err(Error::Shape(format!("backward target {loss} is not a node")));
        }
        if self.values[loss].numel() != 1 {
            return Err(Error::Shape(format!(
                "backward target must be scalar, has shape {:?}",
                self.values[loss].shape()
            )));
        }
        let lv = self.values[loss].data()[0];
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss before backward".into()));
        }
        self.grads = self.values.iter().map(|t| vec![0.0; t.numel()]).collect();
        self.grads[loss][0] = 1.0;

        for opi in (0..self.ops.len()).rev() {
            // Each node is produced by exactly one op and ops run in
            // reverse creation order, so the output gradient is final
            // here. Cloning it sidesteps aliased borrows.
            match &self.ops[opi] {
                Op::Conv2d { x, w, b, out, dims } => {
                    let gy = self.grads[*out].clone();
                    let dims = *dims;
                    self.backward_conv(*x, *w, *b, &gy, &dims);
                }
                Op::Pool2 { x, out, mode, argmax } => {
                    let gy = self.grads[*out].clone();
                    let (x, out, mode) = (*x, *out, *mode);
                    match mode {
                        PoolMode::Max => {
                            let argmax = argmax.clone();
                            let gx = &mut self.grads[x];
                            for (o, &src) in argmax.iter().enumerate() {
                                gx[src] += gy[o];
                            }
                        }
                        PoolMode::Average => {
                            let (bs, c, h, w) =
                                as_images(self.values[x].shape()).expect("checked on insert");
                            let wo = w.div_ceil(2);
                            let ho = h.div_ceil(2);
                            let gx = &mut self.grads[x];
                            for bc in 0..bs * c {
                                let in_base = bc * h * w;
                                let out_base = bc * ho * wo;
                                for oy in 0..ho {
                                    for ox in 0..wo {
                                        let y1 = (2 * oy + 2).min(h);
                                        let x1 = (2 * ox + 2).min(w);
                                        let count = ((y1 - 2 * oy) * (x1 - 2 * ox)) as f64;
                                        let g = gy[out_base + oy * wo + ox] / count;
                                        for iy in 2 * oy..y1 {
                                            for ix in 2 * ox..x1 {
                                                gx[in_base + iy * w + ix] += g;
                                            }
                                        }
                                    }
                                }
                            }
                            let _ = out;
                        }
                    }
                }
                Op::Relu { x, out } => {
                    let gy = self.grads[*out].clone();
                    let x = *x;
                    let xdata = self.values[x].data().to_vec();
                    let gx = &mut self.grads[x];
                    for i in 0..gx.len() {
                        if xdata[i] > 0.0 {
                            gx[i] += gy[i];
                        }
                    }
                }
                Op::Gap { x, out } => {
                    let gy = self.grads[*out].clone();
                    let x = *x;
                    let (bs, c, h, w) = as_images(self.values[x].shape()).expect("checked");
                    let inv = 1.0 / (h * w) as f64;
                    let gx = &mut self.grads[x];
                    for bc in 0..bs * c {
                        let g = gy[bc] * inv;
                        for v in &mut gx[bc * h * w..(bc + 1) * h * w] {
                            *v += g;
                        }
                    }
                }
                Op::Dense { x, w, b, out } => {
                    let gy = self.grads[*out].clone();
                    let (x, w, b) = (*x, *w, *b);
                    let (bs, din) = as_rows(self.values[x].shape()).expect("checked");
                    let dout = self.values[b].numel();
                    let xdata = self.values[x].data().to_vec();
                    let wdata = self.values[w].data().to_vec();
                    {
                        let gx = &mut self.grads[x];
                        for bi in 0..bs {
                            for o in 0..dout {
                                let g = gy[bi * dout + o];
                                let wrow = &wdata[o * din..(o + 1) * din];
                                for i in 0..din {
                                    gx[bi * din + i] += g * wrow[i];
                                }
                            }
                        }
                    }
                    {
                        let gw = &mut self.grads[w];
                        for bi in 0..bs {
                            let row = &xdata[bi * din..(bi + 1) * din];
                            for o in 0..dout {
                                let g = gy[bi * dout + o];
                                for i in 0..din {
                                    gw[o * din + i] += g * row[i];
                                }
                            }
                        }
                    }
                    let gb = &mut self.grads[b];
                    for bi in 0..bs {
                        for o in 0..dout {
                            gb[o] += gy[bi * dout + o];
                        }
                    }
                }
                Op::Softmax { x, out } => {
                    let gy = self.grads[*out].clone();
                    let x = *x;
                    let (bs, c) = as_rows(self.values[x].shape()).expect("checked");
                    let s = self.values[*out].data().to_vec();
                    let gx = &mut self.grads[x];
                    for bi in 0..bs {
                        let srow = &s[bi * c..(bi + 1) * c];
                        let grow = &gy[bi * c..(bi + 1) * c];
                        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for i in 0..c {
                            gx[bi * c + i] += srow[i] * (grow[i] - dot);
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, out, mean, inv_std, train } => {
                    let gy = self.grads[*out].clone();
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let train = *train;
                    let mean = mean.clone();
                    let inv_std = inv_std.clone();
                    let shape = self.values[x].shape().to_vec();
                    let (channels, reduce) = bn_geometry(&shape).expect("checked");
                    let g = self.values[gamma].data().to_vec();
                    let xdata = self.values[x].data().to_vec();

                    for c in 0..channels {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for_channel_idx(&shape, c, |i| {
                            let xh = (xdata[i] - mean[c]) * inv_std[c];
                            s1 += gy[i];
                            s2 += gy[i] * xh;
                        });
                        self.grads[beta][c] += s1;
                        self.grads[gamma][c] += s2;
                        let m = reduce as f64;
                        let gc = g[c] * inv_std[c];
                        let gx = &mut self.grads[x];
                        if train {
                            // Batch statistics depend on x, so the
                            // centered terms feed back into the gradient.
                            for_channel_idx(&shape, c, |i| {
                                let xh = (xdata[i] - mean[c]) * inv_std[c];
                                gx[i] += gc * (gy[i] - s1 / m - xh * s2 / m);
                            });
                        } else {
                            for_channel_idx(&shape, c, |i| {
                                gx[i] += gc * gy[i];
                            });
                        }
                    }
                }
                Op::Dropout { x, out, mask, scale } => {
                    let gy = self.grads[*out].clone();
                    let (x, scale) = (*x, *scale);
                    let mask = mask.clone();
                    let gx = &mut self.grads[x];
                    for i in 0..gx.len() {
                        if mask[i] == 1 {
                            gx[i] += gy[i] * scale;
                        }
                    }
                }
                Op::CrossEntropy { probs, out, targets, clamp } => {
                    let gy = self.grads[*out][0];
                    let (probs, clamp) = (*probs, *clamp);
                    let targets = targets.clone();
                    let (bs, c) = as_rows(self.values[probs].shape()).expect("checked");
                    let pdata = self.values[probs].data().to_vec();
                    let gp = &mut self.grads[probs];
                    for (bi, &t) in targets.iter().enumerate() {
                        let p = pdata[bi * c + t].max(clamp);
                        gp[bi * c + t] -= gy / (bs as f64 * p);
                    }
                }
                Op::Affine { x, out, mul } => {
                    let gy = self.grads[*out].clone();
                    let (x, mul) = (*x, *mul);
                    let gx = &mut self.grads[x];
                    for i in 0..gx.len() {
                        gx[i] += mul * gy[i];
                    }
                }
                Op::MulElem { a, b, out } => {
                    let gy = self.grads[*out].clone();
                    let (a, b) = (*a, *b);
                    let av = self.values[a].data().to_vec();
                    let bv = self.values[b].data().to_vec();
                    {
                        let ga = &mut self.grads[a];
                        for i in 0..ga.len() {
                            ga[i] += gy[i] * bv[i];
                        }
                    }
                    let gb = &mut self.grads[b];
                    for i in 0..gb.len() {
                        gb[i] += gy[i] * av[i];
                    }
                }
                Op::SumAll { x, out } => {
                    let gy = self.grads[*out][0];
                    let gx = &mut self.grads[*x];
                    for v in gx.iter_mut() {
                        *v += gy;
                    }
                }
                Op::DotConst { x, out, weights } => {
                    let gy = self.grads[*out][0];
                    let weights = weights.clone();
                    let gx = &mut self.grads[*x];
                    for (v, w) in gx.iter_mut().zip(&weights) {
                        *v += gy * w;
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_conv(&mut self, x: NodeId, w: NodeId, b: NodeId, gy: &[f64], dims: &ConvDims) {
        let k = dims.k();
        let n = dims.spatial_out();
        let sample = dims.cin * dims.h * dims.w;
        let out_sample = dims.cout * n;
        let xdata = self.values[x].data().to_vec();
        let wdata = self.values[w].data().to_vec();
        let mut cols = vec![0.0; k * n];
        let mut dcols = vec![0.0; k * n];

        {
            let gb = &mut self.grads[b];
            for bi in 0..dims.b {
                for co in 0..dims.cout {
                    let base = bi * out_sample + co * n;
                    let mut s = 0.0;
                    for v in &gy[base..base + n] {
                        s += v;
                    }
                    gb[co] += s;
                }
            }
        }
        // Weight and input gradients sample by sample, in batch order, so
        // the accumulation order is fixed.
        for bi in 0..dims.b {
            im2col(&xdata[bi * sample..(bi + 1) * sample], dims, &mut cols);
            let gyb = &gy[bi * out_sample..(bi + 1) * out_sample];
            unsafe {
                // dW += gy_b (cout x n) * cols^T (n x k)
                matrixmultiply::dgemm(
                    dims.cout,
                    n,
                    k,
                    1.0,
                    gyb.as_ptr(),
                    n as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    n as isize,
                    1.0,
                    self.grads[w].as_mut_ptr(),
                    k as isize,
                    1,
                );
                // dcols = W^T (k x cout) * gy_b (cout x n)
                matrixmultiply::dgemm(
                    k,
                    dims.cout,
                    n,
                    1.0,
                    wdata.as_ptr(),
                    1,
                    k as isize,
                    gyb.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    dcols.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            col2im_add(&dcols, dims, &mut self.grads[x][bi * sample..(bi + 1) * sample]);
        }
    }
}

fn bn_geometry(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [d] => Ok((d, 1)),
        [b, d] => Ok((d, b)),
        [c, h, w] => Ok((c, h * w)),
        [b, c, h, w] => Ok((c, b * h * w)),
        _ => Err(Error::Shape(format!("batch norm expects rank 1-4, got {shape:?}"))),
    }
}

fn for_channel_idx(shape: &[usize], c: usize, mut f: impl FnMut(usize)) {
    match *shape {
        [_] => f(c),
        [b, d] => {
            for bi in 0..b {
                f(bi * d + c);
            }
        }
        [_, h, w] => {
            for i in c * h * w..(c + 1) * h * w {
                f(i);
            }
        }
        [b, ch, h, w] => {
            let hw = h * w;
            for bi in 0..b {
                let base = (bi * ch + c) * hw;
                for i in base..base + hw {
                    f(i);
                }
            }
        }
        _ => unreachable!("geometry validated on insert"),
    }
}

fn for_channel(shape: &[usize], c: usize, data: &[f64], mut f: impl FnMut(f64)) {
    for_channel_idx(shape, c, |i| f(data[i]));
}

fn map_channels(shape: &[usize], data: &[f64], out: &mut [f64], f: impl Fn(usize, f64) -> f64) {
    match *shape {
        [d] => {
            for c in 0..d {
                out[c] = f(c, data[c]);
            }
        }
        [b, d] => {
            for bi in 0..b {
                for c in 0..d {
                    out[bi * d + c] = f(c, data[bi * d + c]);
                }
            }
        }
        [ch, h, w] => {
            let hw = h * w;
            for c in 0..ch {
                for i in c * hw..(c + 1) * hw {
                    out[i] = f(c, data[i]);
                }
            }
        }
        [b, ch, h, w] => {
            let hw = h * w;
            for bi in 0..b {
                for c in 0..ch {
                    let base = (bi * ch + c) * hw;
                    for i in base..base + hw {
                        out[i] = f(c, data[i]);
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

/// Unrolls one sample into patch columns: row (ci,ky,kx), column (oy,ox).
/// Out-of-frame taps stay zero, implementing the zero padding.
fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let n = d.spatial_out();
    cols.fill(0.0);
    for ci in 0..d.cin {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let r = (ci * d.kh + ky) * d.kw + kx;
                let row = &mut cols[r * n..(r + 1) * n];
                for oy in 0..d.ho {
                    let iy = oy as isize + ky as isize - d.pad_top as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    // Valid output columns are those whose input column
                    // ix = ox + kx - pad_left lands inside the frame.
                    let ox_lo = d.pad_left.saturating_sub(kx);
                    let ox_hi = (d.w + d.pad_left - kx).min(d.wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix_lo = ox_lo + kx - d.pad_left;
                    let src_base = (ci * d.h + iy as usize) * d.w + ix_lo;
                    let dst_base = oy * d.wo + ox_lo;
                    let len = ox_hi - ox_lo;
                    row[dst_base..dst_base + len]
                        .copy_from_slice(&x[src_base..src_base + len]);
                }
            }
        }
    }
}

/// Scatter-add of patch-column gradients back onto the input sample;
/// exact transpose of `im2col`.
fn col2im_add(dcols: &[f64], d: &ConvDims, gx: &mut [f64]) {
    let n = d.spatial_out();
    for ci in 0..d.cin {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let r = (ci * d.kh + ky) * d.kw + kx;
                let row = &dcols[r * n..(r + 1) * n];
                for oy in 0..d.ho {
                    let iy = oy as isize + ky as isize - d.pad_top as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let ox_lo = d.pad_left.saturating_sub(kx);
                    let ox_hi = (d.w + d.pad_left - kx).min(d.wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix_lo = ox_lo + kx - d.pad_left;
                    let dst_base = (ci * d.h + iy as usize) * d.w + ix_lo;
                    let src_base = oy * d.wo + ox_lo;
                    for i in 0..ox_hi - ox_lo {
                        gx[dst_base + i] += row[src_base + i];
                    }
                }
            }
        }
    }
}
