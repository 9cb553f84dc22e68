//! Building pieces shared by every block: per-channel normalisation,
//! convolution units, ReLU, the pooled linear head and softmax cross-entropy.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::pooling::BackwardMode;
use crate::rng;
use crate::tensor::{conv3d, conv3d_backward, ConvKernel, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Standardise with the statistics of the current batch.
    Batch,
    /// Standardise with the stored statistics (an affine map).
    Frozen,
    /// Skip normalisation entirely.
    Bypass,
}

/// Execution switches threaded through every forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub norm: NormMode,
    pub pool_backward: BackwardMode,
}

impl Mode {
    pub const TRAIN: Mode = Mode { norm: NormMode::Batch, pool_backward: BackwardMode::ExactAutodiff };
    pub const GRADCHECK: Mode = Mode { norm: NormMode::Frozen, pool_backward: BackwardMode::ExactAutodiff };
}

impl Default for Mode {
    fn default() -> Self {
        Mode { norm: NormMode::Batch, pool_backward: BackwardMode::PaperWeighted }
    }
}

/// Per-channel standardisation over `(B, T, H, W)` with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    mode: NormMode,
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl ChannelNorm {
    pub fn new(channels: usize) -> Self {
        ChannelNorm {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::ones(vec![channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<(Tensor, NormCache)> {
        let [b, c, t, h, w] = x.dims5("channel norm")?;
        if c != self.channels() {
            return shape_err(format!("channel norm over {} channels given {c}", self.channels()));
        }
        let plane = t * h * w;
        let n = (b * plane) as f64;
        let xd = x.data();
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            NormMode::Bypass => (vec![0.0; c], vec![1.0 - NORM_EPS; c]),
            NormMode::Frozen => (self.mean.data().to_vec(), self.var.data().to_vec()),
            NormMode::Batch => (0..c)
                .map(|ci| {
                    let vals = (0..b).flat_map(|bi| &xd[(bi * c + ci) * plane..(bi * c + ci + 1) * plane]);
                    let m = vals.clone().sum::<f64>() / n;
                    let v = vals.map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                    (m, v)
                })
                .unzip(),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        if mode == NormMode::Bypass {
            return Ok((y, NormCache { mode, xhat, inv_std: vec![1.0; c] }));
        }
        for (i, (xh, yy)) in xhat.data_mut().chunks_mut(plane).zip(y.data_mut().chunks_mut(plane)).enumerate() {
            let ci = i % c;
            let (g, be) = (self.gamma.data()[ci], self.beta.data()[ci]);
            for (a, o) in xh.iter_mut().zip(yy.iter_mut()) {
                *a = (*a - mean[ci]) * inv_std[ci];
                *o = g * *a + be;
            }
        }
        Ok((y, NormCache { mode, xhat, inv_std }))
    }

    /// Returns `(dx, [dgamma, dbeta])`.
    pub fn backward(&self, cache: &NormCache, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let c = self.channels();
        if cache.mode == NormMode::Bypass {
            return Ok((grad.clone(), vec![Tensor::zeros(vec![c]), Tensor::zeros(vec![c])]));
        }
        let [b, _, t, h, w] = grad.dims5("channel norm backward")?;
        grad.expect_shape(cache.xhat.shape(), "channel norm upstream")?;
        let plane = t * h * w;
        let n = (b * plane) as f64;
        let (gd, xh) = (grad.data(), cache.xhat.data());
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (i, (gp, xp)) in gd.chunks(plane).zip(xh.chunks(plane)).enumerate() {
            let ci = i % c;
            dbeta[ci] += gp.iter().sum::<f64>();
            dgamma[ci] += gp.iter().zip(xp).map(|(g, x)| g * x).sum::<f64>();
        }
        let mut dx = grad.clone();
        for (i, (dp, xp)) in dx.data_mut().chunks_mut(plane).zip(xh.chunks(plane)).enumerate() {
            let ci = i % c;
            let scale = self.gamma.data()[ci] * cache.inv_std[ci];
            for (d, &x) in dp.iter_mut().zip(xp) {
                *d = match cache.mode {
                    NormMode::Batch => scale * (*d - dbeta[ci] / n - x * dgamma[ci] / n),
                    _ => scale * *d,
                };
            }
        }
        Ok((dx, vec![Tensor::from_vec1(dgamma)?, Tensor::from_vec1(dbeta)?]))
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Masks `grad` where the ReLU output was not positive.
pub fn relu_backward(out: &Tensor, grad: &Tensor) -> Result<Tensor> {
    grad.zip_map(out, |g, o| if o > 0.0 { g } else { 0.0 })
}

/// Uniform fan-in initialised 'same' convolution kernel.
pub fn init_kernel(out_ch: usize, in_ch: usize, extent: [usize; 3], rng: &mut impl Rng) -> ConvKernel {
    let fan_in = (in_ch * extent.iter().product::<usize>()) as f64;
    let bound = (3.0 / fan_in).sqrt();
    let w = rng::uniform(rng, vec![out_ch, in_ch, extent[0], extent[1], extent[2]], bound);
    ConvKernel::same(w, Tensor::zeros(vec![out_ch]), 1).expect("odd extents")
}

/// Convolution followed by optional normalisation and optional ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub kernel: ConvKernel,
    pub norm: Option<ChannelNorm>,
    pub relu: bool,
}

#[derive(Debug, Clone)]
pub struct ConvUnitCache {
    input: Tensor,
    norm: Option<NormCache>,
    out: Tensor,
}

impl ConvUnitCache {
    pub fn output(&self) -> &Tensor {
        &self.out
    }
}

impl ConvUnit {
    pub fn new(kernel: ConvKernel, norm: bool, relu: bool) -> Self {
        let c = kernel.out_channels();
        ConvUnit { kernel, norm: norm.then(|| ChannelNorm::new(c)), relu }
    }

    pub fn init(out_ch: usize, in_ch: usize, extent: [usize; 3], norm: bool, relu: bool, rng: &mut impl Rng) -> Self {
        Self::new(init_kernel(out_ch, in_ch, extent, rng), norm, relu)
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.out_channels()
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.in_channels()
    }

    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<(Tensor, ConvUnitCache)> {
        let mut y = conv3d(x, &self.kernel)?;
        let norm = match &self.norm {
            Some(n) => {
                let (z, c) = n.forward(&y, mode)?;
                y = z;
                Some(c)
            }
            None => None,
        };
        if self.relu {
            y = relu(&y);
        }
        Ok((y.clone(), ConvUnitCache { input: x.clone(), norm, out: y }))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.kernel.weights, &self.kernel.bias];
        if let Some(n) = &self.norm {
            p.extend([&n.gamma, &n.beta]);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.kernel.weights, &mut self.kernel.bias];
        if let Some(n) = &mut self.norm {
            p.extend([&mut n.gamma, &mut n.beta]);
        }
        p
    }

    pub fn backward(&self, cache: &ConvUnitCache, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = if self.relu { relu_backward(&cache.out, grad)? } else { grad.clone() };
        let mut norm_grads = Vec::new();
        if let (Some(n), Some(nc)) = (&self.norm, &cache.norm) {
            let (dx, ng) = n.backward(nc, &g)?;
            g = dx;
            norm_grads = ng;
        }
        let cg = conv3d_backward(&cache.input, &self.kernel, &g)?;
        let mut grads = vec![cg.weights, cg.bias];
        grads.extend(norm_grads);
        Ok((cg.input, grads))
    }

    /// Multiply-adds of the convolution on a `[T, H, W]` volume (per clip).
    pub fn macs(&self, extents: [usize; 3]) -> usize {
        let [kt, kh, kw] = self.kernel.extent();
        let out = self.kernel.output_extents(extents).map(|e| e.iter().product::<usize>()).unwrap_or(0);
        self.out_channels() * self.kernel.in_channels_per_group() * kt * kh * kw * out
    }
}

/// Global average pool over `(T, H, W)`: `[B, C, T, H, W] -> [B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [b, c, t, h, w] = x.dims5("global average pool")?;
    let plane = t * h * w;
    let data = x.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
    Tensor::new(vec![b, c], data)
}

pub fn global_avg_pool_backward(grad: &Tensor, extents: [usize; 3]) -> Result<Tensor> {
    let [b, c] = grad.dims2("global average pool backward")?;
    let plane: usize = extents.iter().product();
    let mut data = Vec::with_capacity(b * c * plane);
    for &g in grad.data() {
        data.extend(std::iter::repeat_n(g / plane as f64, plane));
    }
    Tensor::new(vec![b, c, extents[0], extents[1], extents[2]], data)
}

/// Fully connected classifier `logits = W·x + b` with `W: [N, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(classes: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        Linear { weights: rng::uniform(rng, vec![classes, channels], bound), bias: Tensor::zeros(vec![classes]) }
    }

    pub fn classes(&self) -> usize {
        self.weights.dim(0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [b, c] = x.dims2("linear input")?;
        let mut out = Vec::with_capacity(b * self.classes());
        for row in x.data().chunks(c) {
            let y = self.weights.matvec(row)?;
            out.extend(y.iter().zip(self.bias.data()).map(|(a, b)| a + b));
        }
        Tensor::new(vec![b, self.classes()], out)
    }

    /// Returns `(dx, [dW, db])`.
    pub fn backward(&self, x: &Tensor, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let [b, c] = x.dims2("linear input")?;
        let n = self.classes();
        grad.expect_shape(&[b, n], "linear upstream")?;
        let mut dw = Tensor::zeros(vec![n, c]);
        let mut db = Tensor::zeros(vec![n]);
        let mut dx = Vec::with_capacity(b * c);
        for (row, g) in x.data().chunks(c).zip(grad.data().chunks(n)) {
            for k in 0..n {
                db.data_mut()[k] += g[k];
                for j in 0..c {
                    dw.data_mut()[k * c + j] += g[k] * row[j];
                }
            }
            dx.extend(self.weights.matvec_t(g)?);
        }
        Ok((Tensor::new(vec![b, c], dx)?, vec![dw, db]))
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [b, n] = logits.dims2("logits")?;
    if labels.len() != b || labels.iter().any(|&l| l >= n) {
        return shape_err(format!("{} labels for {b} rows of {n} classes", labels.len()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * n);
    for (row, &y) in logits.data().chunks(n).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let log_z = m + z.ln();
        loss += log_z - row[y];
        grad.extend(row.iter().enumerate().map(|(k, v)| ((v - log_z).exp() - if k == y { 1.0 } else { 0.0 }) / b as f64));
    }
    Ok((loss / b as f64, Tensor::new(vec![b, n], grad)?))
}

/// Index of the largest logit per row, ties to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let n = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, max_relative_error};

    fn check_unit(mode: NormMode) {
        let mut r = rng::stream(11, "unit");
        let mut unit = ConvUnit::init(3, 2, [3, 3, 3], true, true, &mut r);
        if let Some(n) = &mut unit.norm {
            n.gamma = rng::uniform(&mut r, vec![3], 1.0).map(|v| v + 1.5);
            n.beta = rng::uniform(&mut r, vec![3], 0.5);
            n.mean = rng::uniform(&mut r, vec![3], 0.2);
            n.var = rng::uniform(&mut r, vec![3], 0.2).map(|v| v + 1.0);
        }
        let x = rng::uniform(&mut r, vec![2, 2, 3, 3, 3], 1.0);
        let up = rng::uniform(&mut r, vec![2, 3, 3, 3, 3], 1.0);
        let (_, cache) = unit.forward(&x, mode).unwrap();
        let (dx, grads) = unit.backward(&cache, &up).unwrap();
        let fdx = finite_difference_grad(|p| unit.forward(p, mode).unwrap().0.dot(&up).unwrap(), &x, 1e-5);
        assert!(max_relative_error(&dx, &fdx, 1e-4) < 1e-5, "{mode:?}");
        for (k, g) in grads.iter().enumerate() {
            let fd = finite_difference_grad(
                |p| {
                    let mut u = unit.clone();
                    *u.params_mut()[k] = p.clone();
                    u.forward(&x, mode).unwrap().0.dot(&up).unwrap()
                },
                unit.params()[k],
                1e-5,
            );
            assert!(max_relative_error(g, &fd, 1e-4) < 1e-5, "{mode:?} param {k}");
        }
    }

    #[test]
    fn conv_unit_gradients_batch_norm() {
        check_unit(NormMode::Batch);
    }

    #[test]
    fn conv_unit_gradients_frozen_norm() {
        check_unit(NormMode::Frozen);
    }

    #[test]
    fn batch_norm_standardises() {
        let x = Tensor::from_fn(vec![2, 2, 2, 2, 2], |i| (i as f64 * 0.37).sin() * 3.0 + 1.0);
        let (y, _) = ChannelNorm::new(2).forward(&x, NormMode::Batch).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..2).flat_map(|b| y.narrow(0, b..b + 1).unwrap().narrow(1, c..c + 1).unwrap().into_data()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap();
        let labels = [2, 0];
        let (loss, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!(loss > 0.0);
        let fd = finite_difference_grad(|p| softmax_cross_entropy(p, &labels).unwrap().0, &logits, 1e-5);
        assert!(max_relative_error(&g, &fd, 1e-6) < 1e-6);
    }

    #[test]
    fn linear_and_pool_gradients() {
        let mut r = rng::stream(2, "lin");
        let lin = Linear::init(3, 4, &mut r);
        let x = rng::uniform(&mut r, vec![2, 4, 2, 2, 2], 1.0);
        let up = rng::uniform(&mut r, vec![2, 3], 1.0);
        let f = |p: &Tensor| lin.forward(&global_avg_pool(p).unwrap()).unwrap().dot(&up).unwrap();
        let pooled = global_avg_pool(&x).unwrap();
        let (dp, _) = lin.backward(&pooled, &up).unwrap();
        let dx = global_avg_pool_backward(&dp, [2, 2, 2]).unwrap();
        assert!(max_relative_error(&dx, &finite_difference_grad(f, &x, 1e-5), 1e-6) < 1e-6);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
