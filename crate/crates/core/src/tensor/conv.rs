use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{arg_err, shape_err, Result};

/// Grouped 3D convolution kernel: weights `[K, C/groups, kt, kh, kw]`, bias `[K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<S: Scalar = f64> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl<S: Scalar> ConvKernel<S> {
    pub fn new(
        weights: Tensor<S>,
        bias: Tensor<S>,
        stride: [usize; 3],
        padding: [usize; 3],
        groups: usize,
    ) -> Result<Self> {
        let [k, _, _, _, _] = weights.dims5("conv kernel weights")?;
        bias.expect_shape(&[k], "conv kernel bias")?;
        if groups == 0 || k % groups != 0 {
            return arg_err(format!("groups={groups} must divide output channels {k}"));
        }
        if stride.contains(&0) {
            return arg_err("conv stride must be >= 1");
        }
        Ok(ConvKernel { weights, bias, stride, padding, groups })
    }

    /// Stride-1 kernel padded so every extent is preserved; extents must be odd.
    pub fn same(weights: Tensor<S>, bias: Tensor<S>, groups: usize) -> Result<Self> {
        let [_, _, kt, kh, kw] = weights.dims5("conv kernel weights")?;
        if kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return arg_err(format!(
                "'same' padding needs odd kernel extents, got {kt}x{kh}x{kw}; give padding explicitly"
            ));
        }
        Self::new(weights, bias, [1, 1, 1], [kt / 2, kh / 2, kw / 2], groups)
    }

    /// Zero-initialised stride-1 'same' kernel.
    pub fn zeros(out_ch: usize, in_ch: usize, extent: [usize; 3]) -> Result<Self> {
        Self::same(
            Tensor::zeros(vec![out_ch, in_ch, extent[0], extent[1], extent[2]]),
            Tensor::zeros(vec![out_ch]),
            1,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dim(0)
    }

    pub fn in_channels_per_group(&self) -> usize {
        self.weights.dim(1)
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dim(1) * self.groups
    }

    pub fn extent(&self) -> [usize; 3] {
        [self.weights.dim(2), self.weights.dim(3), self.weights.dim(4)]
    }

    /// `(extent + 2·pad − k) / stride + 1` per axis.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let k = self.extent();
        let mut out = [0; 3];
        for i in 0..3 {
            let padded = input[i] + 2 * self.padding[i];
            if padded < k[i] {
                return shape_err(format!(
                    "conv3d: padded extent {padded} smaller than kernel extent {} on axis {i}",
                    k[i]
                ));
            }
            out[i] = (padded - k[i]) / self.stride[i] + 1;
        }
        Ok(out)
    }

    fn check_input(&self, input: &Tensor<S>) -> Result<[usize; 5]> {
        let dims = input.dims5("conv3d input")?;
        if dims[1] != self.in_channels() {
            return shape_err(format!(
                "conv3d: input has {} channels, kernel expects {} ({} per group x {} groups)",
                dims[1],
                self.in_channels(),
                self.in_channels_per_group(),
                self.groups
            ));
        }
        Ok(dims)
    }
}

/// Input index hit by output position `o` and tap `d`, if inside the volume.
#[inline]
fn source(o: usize, d: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + d).checked_sub(pad)?;
    (i < extent).then_some(i)
}

/// Direct-sum 3D convolution over `[B, C, T, H, W]`.
pub fn conv3d<S: Scalar>(input: &Tensor<S>, kernel: &ConvKernel<S>) -> Result<Tensor<S>> {
    let [b, _, t, h, w] = kernel.check_input(input)?;
    let [to, ho, wo] = kernel.output_extents([t, h, w])?;
    let k = kernel.out_channels();
    let cpg = kernel.in_channels_per_group();
    let kpg = k / kernel.groups;
    let [kt, kh, kw] = kernel.extent();
    let [st, sh, sw] = kernel.stride;
    let [pt, ph, pw] = kernel.padding;
    let c_total = kernel.in_channels();
    let plane = to * ho * wo;
    let x = input.data();
    let wt = kernel.weights.data();
    let bias = kernel.bias.data();

    let mut out = vec![S::zero(); b * k * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(bk, dst)| {
        let (bi, ko) = (bk / k, bk % k);
        let g = ko / kpg;
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias[ko];
                    for ci in 0..cpg {
                        let cin = g * cpg + ci;
                        let xbase = (bi * c_total + cin) * t;
                        let wbase = (ko * cpg + ci) * kt;
                        for dt in 0..kt {
                            let Some(it) = source(ot, dt, st, pt, t) else { continue };
                            for dh in 0..kh {
                                let Some(ih) = source(oh, dh, sh, ph, h) else { continue };
                                let xrow = ((xbase + it) * h + ih) * w;
                                let wrow = ((wbase + dt) * kh + dh) * kw;
                                for dw in 0..kw {
                                    let Some(iw) = source(ow, dw, sw, pw, w) else { continue };
                                    acc = acc + x[xrow + iw] * wt[wrow + dw];
                                }
                            }
                        }
                    }
                    dst[(ot * ho + oh) * wo + ow] = acc;
                }
            }
        }
    });
    Tensor::new(vec![b, k, to, ho, wo], out)
}

/// Exact gradients of [`conv3d`].
#[derive(Debug, Clone)]
pub struct ConvGrads<S: Scalar = f64> {
    pub input: Tensor<S>,
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

pub fn conv3d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &ConvKernel<S>,
    upstream: &Tensor<S>,
) -> Result<ConvGrads<S>> {
    let [b, c_total, t, h, w] = kernel.check_input(input)?;
    let [to, ho, wo] = kernel.output_extents([t, h, w])?;
    let k = kernel.out_channels();
    upstream.expect_shape(&[b, k, to, ho, wo], "conv3d_backward upstream gradient")?;
    let cpg = kernel.in_channels_per_group();
    let kpg = k / kernel.groups;
    let [kt, kh, kw] = kernel.extent();
    let [st, sh, sw] = kernel.stride;
    let [pt, ph, pw] = kernel.padding;
    let x = input.data();
    let wt = kernel.weights.data();
    let dy = upstream.data();
    let oplane = to * ho * wo;
    let iplane = t * h * w;

    // grad_input: one task per (b, c_in) plane.
    let mut dx = vec![S::zero(); b * c_total * iplane];
    dx.par_chunks_mut(iplane).enumerate().for_each(|(bc, dst)| {
        let (bi, cin) = (bc / c_total, bc % c_total);
        let g = cin / cpg;
        let ci = cin % cpg;
        for ko in g * kpg..(g + 1) * kpg {
            let ybase = (bi * k + ko) * oplane;
            let wbase = (ko * cpg + ci) * kt;
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let gy = dy[ybase + (ot * ho + oh) * wo + ow];
                        if gy == S::zero() {
                            continue;
                        }
                        for dt in 0..kt {
                            let Some(it) = source(ot, dt, st, pt, t) else { continue };
                            for dh in 0..kh {
                                let Some(ih) = source(oh, dh, sh, ph, h) else { continue };
                                let wrow = ((wbase + dt) * kh + dh) * kw;
                                let xrow = (it * h + ih) * w;
                                for dw in 0..kw {
                                    let Some(iw) = source(ow, dw, sw, pw, w) else { continue };
                                    dst[xrow + iw] = dst[xrow + iw] + gy * wt[wrow + dw];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    // grad_weights: one task per output channel.
    let wlen = cpg * kt * kh * kw;
    let mut dw_all = vec![S::zero(); k * wlen];
    dw_all.par_chunks_mut(wlen).enumerate().for_each(|(ko, dst)| {
        let g = ko / kpg;
        for bi in 0..b {
            let ybase = (bi * k + ko) * oplane;
            for ci in 0..cpg {
                let xbase = (bi * c_total + g * cpg + ci) * iplane;
                for dt in 0..kt {
                    for dh in 0..kh {
                        for dw in 0..kw {
                            let mut acc = S::zero();
                            for ot in 0..to {
                                let Some(it) = source(ot, dt, st, pt, t) else { continue };
                                for oh in 0..ho {
                                    let Some(ih) = source(oh, dh, sh, ph, h) else { continue };
                                    let yrow = ybase + (ot * ho + oh) * wo;
                                    let xrow = xbase + (it * h + ih) * w;
                                    for ow in 0..wo {
                                        let Some(iw) = source(ow, dw, sw, pw, w) else { continue };
                                        acc = acc + dy[yrow + ow] * x[xrow + iw];
                                    }
                                }
                            }
                            let idx = ((ci * kt + dt) * kh + dh) * kw + dw;
                            dst[idx] = dst[idx] + acc;
                        }
                    }
                }
            }
        }
    });

    let mut db = vec![S::zero(); k];
    for (ko, slot) in db.iter_mut().enumerate() {
        for bi in 0..b {
            let base = (bi * k + ko) * oplane;
            *slot = *slot + dy[base..base + oplane].iter().copied().sum::<S>();
        }
    }

    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        weights: Tensor::new(kernel.weights.shape().to_vec(), dw_all)?,
        bias: Tensor::new(vec![k], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, max_relative_error};

    fn ramp(shape: Vec<usize>, scale: f64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f64 * 0.618).fract() - 0.5) * scale)
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = ramp(vec![1, 1, 3, 4, 5], 2.0);
        let k = ConvKernel::same(Tensor::ones(vec![1, 1, 1, 1, 1]), Tensor::zeros(vec![1]), 1).unwrap();
        assert_eq!(conv3d(&x, &k).unwrap(), x);
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let x = ramp(vec![2, 3, 3, 3, 3], 1.0);
        let k = ConvKernel::same(
            Tensor::zeros(vec![2, 3, 3, 3, 3]),
            Tensor::new(vec![2], vec![0.5, -1.5]).unwrap(),
            1,
        )
        .unwrap();
        let y = conv3d(&x, &k).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3, 3, 3]);
        for (i, v) in y.data().iter().enumerate() {
            let ch = (i / 27) % 2;
            assert_eq!(*v, if ch == 0 { 0.5 } else { -1.5 });
        }
    }

    #[test]
    fn output_extents_follow_stride_arithmetic() {
        let k = ConvKernel::new(
            Tensor::<f64>::zeros(vec![1, 1, 3, 3, 3]),
            Tensor::zeros(vec![1]),
            [1, 2, 2],
            [1, 1, 0],
            1,
        )
        .unwrap();
        assert_eq!(k.output_extents([4, 7, 7]).unwrap(), [4, 4, 3]);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 3, 3, 3]);
        let k = ConvKernel::zeros(1, 3, [1, 1, 1]).unwrap();
        assert!(matches!(conv3d(&x, &k), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn even_kernel_needs_explicit_padding() {
        assert!(ConvKernel::<f64>::same(Tensor::zeros(vec![1, 1, 2, 3, 3]), Tensor::zeros(vec![1]), 1).is_err());
    }

    #[test]
    fn backward_identity_kernel_passes_gradient() {
        let x = ramp(vec![1, 1, 2, 3, 3], 1.0);
        let k = ConvKernel::same(Tensor::ones(vec![1, 1, 1, 1, 1]), Tensor::zeros(vec![1]), 1).unwrap();
        let up = Tensor::full(vec![1, 1, 2, 3, 3], 0.75);
        let g = conv3d_backward(&x, &k, &up).unwrap();
        assert_eq!(g.input, up);
    }

    #[test]
    fn backward_zero_upstream() {
        let x = ramp(vec![1, 2, 3, 3, 3], 1.0);
        let k = ConvKernel::same(ramp(vec![2, 2, 3, 3, 3], 1.0), Tensor::zeros(vec![2]), 1).unwrap();
        let g = conv3d_backward(&x, &k, &Tensor::zeros(vec![1, 2, 3, 3, 3])).unwrap();
        assert!(g.input.data().iter().chain(g.weights.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn grouped_strided_backward_matches_finite_differences() {
        let x = ramp(vec![2, 4, 3, 5, 4], 2.0);
        let w = ramp(vec![2, 2, 3, 3, 2], 1.3);
        let bias = ramp(vec![2], 1.0);
        let up = ramp(vec![2, 2, 2, 3, 2], 1.7);
        let make = |w: &Tensor, b: &Tensor| ConvKernel::new(w.clone(), b.clone(), [2, 2, 2], [1, 1, 0], 2).unwrap();
        let kern = make(&w, &bias);
        assert_eq!(conv3d(&x, &kern).unwrap().shape(), up.shape());
        let g = conv3d_backward(&x, &kern, &up).unwrap();
        let fx = finite_difference_grad(|p| conv3d(p, &kern).unwrap().dot(&up).unwrap(), &x, 1e-5);
        let fw = finite_difference_grad(|p| conv3d(&x, &make(p, &bias)).unwrap().dot(&up).unwrap(), &w, 1e-5);
        let fb = finite_difference_grad(|p| conv3d(&x, &make(&w, p)).unwrap().dot(&up).unwrap(), &bias, 1e-5);
        assert!(max_relative_error(&g.input, &fx, 1e-6) < 1e-6);
        assert!(max_relative_error(&g.weights, &fw, 1e-6) < 1e-6);
        assert!(max_relative_error(&g.bias, &fb, 1e-6) < 1e-6);
    }

    #[test]
    fn f32_matches_f64() {
        let x = ramp(vec![1, 2, 3, 4, 4], 1.0);
        let k = ConvKernel::same(ramp(vec![3, 2, 3, 3, 3], 1.0), ramp(vec![3], 1.0), 1).unwrap();
        let y64 = conv3d(&x, &k).unwrap();
        let k32 = ConvKernel::same(k.weights.cast::<f32>(), k.bias.cast::<f32>(), 1).unwrap();
        let y32 = conv3d(&x.cast::<f32>(), &k32).unwrap();
        assert!(y64.max_abs_diff(&y32.cast::<f64>()) < 1e-5);
    }
}
