//! Spatial SoftPool (with average and max baselines) and temporal frame
//! selection by triplet cosine similarity.


use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::{EmbeddingSequence, Scalar, Tensor};

/// Denominator guard for cosine similarities.
pub const COSINE_EPS: f64 = 1e-4;
/// Triplet scores closer than this count as tied and fall back to frame order.
pub const SCORE_RESOLUTION: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    SoftPool,
    Average,
    Max,
}

/// How SoftPool routes gradients back to a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardMode {
    /// Each member receives the upstream gradient scaled by its softmax weight.
    PaperWeighted,
    /// True derivative `w_r·(1 + a_r − out)`.
    ExactAutodiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolConfig {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub mode: PoolMode,
    pub backward_mode: BackwardMode,
}

impl PoolConfig {
    pub fn new(kernel: [usize; 2], stride: [usize; 2], mode: PoolMode, backward_mode: BackwardMode) -> Result<Self> {
        if kernel.contains(&0) || stride.contains(&0) {
            return arg_err(format!("pool kernel {kernel:?} and stride {stride:?} must be >= 1"));
        }
        Ok(PoolConfig { kernel, stride, mode, backward_mode })
    }

    /// 2×2 SoftPool with stride 2.
    pub fn softpool_halving(backward_mode: BackwardMode) -> Self {
        PoolConfig { kernel: [2, 2], stride: [2, 2], mode: PoolMode::SoftPool, backward_mode }
    }

    pub fn output_extents(&self, h: usize, w: usize) -> Result<[usize; 2]> {
        if h < self.kernel[0] || w < self.kernel[1] {
            return shape_err(format!("pool: spatial extents {h}x{w} smaller than kernel {:?}", self.kernel));
        }
        Ok([(h - self.kernel[0]) / self.stride[0] + 1, (w - self.kernel[1]) / self.stride[1] + 1])
    }
}

/// Softmax of a region with max-subtraction.
pub fn region_weights<S: Scalar>(values: &[S]) -> Vec<S> {
    let m = values.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = values.iter().map(|&v| (v - m).exp()).collect();
    let z: S = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Forward state needed by [`softpool_backward`].
#[derive(Debug, Clone)]
pub struct PoolCache<S: Scalar = f64> {
    cfg: PoolConfig,
    input_shape: Vec<usize>,
    out_hw: [usize; 2],
    /// Per output position, one weight per region member (row-major in the region).
    weights: Vec<S>,
    /// Region values and outputs, kept only when exact SoftPool gradients were requested.
    exact: Option<(Vec<S>, Vec<S>)>,
}

impl<S: Scalar> PoolCache<S> {
    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn region_len(&self) -> usize {
        self.cfg.kernel[0] * self.cfg.kernel[1]
    }

    pub fn config(&self) -> &PoolConfig {
        &self.cfg
    }
}

/// Flat plane offsets of the region pooled into output `(oh, ow)`.
fn region_indices(cfg: &PoolConfig, w: usize, oh: usize, ow: usize) -> impl Iterator<Item = usize> + '_ {
    let y0 = oh * cfg.stride[0];
    let x0 = ow * cfg.stride[1];
    (0..cfg.kernel[0]).flat_map(move |dy| (0..cfg.kernel[1]).map(move |dx| (y0 + dy) * w + x0 + dx))
}

/// Spatial pooling of `[B, C, T, H, W]` per frame. In SoftPool mode each region
/// yields `Σ softmax(a)_r · a_r`; the temporal axis is untouched.
pub fn softpool_forward<S: Scalar>(a: &Tensor<S>, cfg: &PoolConfig) -> Result<(Tensor<S>, PoolCache<S>)> {
    let [b, c, t, h, w] = a.dims5("softpool_forward")?;
    let [oh, ow] = cfg.output_extents(h, w)?;
    let rlen = cfg.kernel[0] * cfg.kernel[1];
    let keep_exact = cfg.mode == PoolMode::SoftPool && cfg.backward_mode == BackwardMode::ExactAutodiff;
    let planes = b * c * t;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut weights = Vec::with_capacity(planes * oh * ow * rlen);
    let mut saved = Vec::new();
    let mut region = Vec::with_capacity(rlen);
    for plane in a.data().chunks(h * w) {
        for y in 0..oh {
            for x in 0..ow {
                region.clear();
                region.extend(region_indices(cfg, w, y, x).map(|i| plane[i]));
                let wts = match cfg.mode {
                    PoolMode::SoftPool => region_weights(&region),
                    PoolMode::Average => vec![S::one() / S::from_f64(rlen as f64); rlen],
                    PoolMode::Max => {
                        // first maximum wins
                        let mut best = 0;
                        for (i, &v) in region.iter().enumerate() {
                            if v > region[best] {
                                best = i;
                            }
                        }
                        (0..rlen).map(|i| if i == best { S::one() } else { S::zero() }).collect()
                    }
                };
                let y_val = if cfg.mode == PoolMode::Max {
                    region.iter().copied().fold(S::neg_infinity(), S::max)
                } else {
                    // a weighted mean; the clamp removes rounding past the region's range
                    let lo = region.iter().copied().fold(S::infinity(), S::min);
                    let hi = region.iter().copied().fold(S::neg_infinity(), S::max);
                    wts.iter().zip(&region).map(|(&w, &v)| w * v).sum::<S>().max(lo).min(hi)
                };
                out.push(y_val);
                weights.extend_from_slice(&wts);
                if keep_exact {
                    saved.extend_from_slice(&region);
                }
            }
        }
    }
    let exact = keep_exact.then(|| (saved, out.clone()));
    let cache = PoolCache { cfg: *cfg, input_shape: a.shape().to_vec(), out_hw: [oh, ow], weights, exact };
    Ok((Tensor::new(vec![b, c, t, oh, ow], out)?, cache))
}

/// Routes `upstream` back through the pooled regions. Overlapping regions accumulate.
pub fn softpool_backward<S: Scalar>(cache: &PoolCache<S>, upstream: &Tensor<S>, mode: BackwardMode) -> Result<Tensor<S>> {
    let &[b, c, t, h, w] = cache.input_shape.as_slice() else {
        unreachable!("pool cache always holds a rank-5 shape")
    };
    let [oh, ow] = cache.out_hw;
    upstream.expect_shape(&[b, c, t, oh, ow], "softpool_backward upstream")?;
    let exact = match (mode, cache.cfg.mode, &cache.exact) {
        (BackwardMode::ExactAutodiff, PoolMode::SoftPool, None) => {
            return Err(Error::InvalidArgument(
                "exact SoftPool backward requested but the forward pass saved only paper weights".into(),
            ))
        }
        (BackwardMode::ExactAutodiff, PoolMode::SoftPool, Some(saved)) => Some(saved),
        _ => None,
    };
    let rlen = cache.region_len();
    let mut grad = vec![S::zero(); b * c * t * h * w];
    let up = upstream.data();
    for (p, dst) in grad.chunks_mut(h * w).enumerate() {
        for y in 0..oh {
            for x in 0..ow {
                let o = (p * oh + y) * ow + x;
                let g = up[o];
                let wts = &cache.weights[o * rlen..(o + 1) * rlen];
                for (r, i) in region_indices(&cache.cfg, w, y, x).enumerate() {
                    let factor = match exact {
                        Some((vals, outs)) => wts[r] * (S::one() + vals[o * rlen + r] - outs[o]),
                        None => wts[r],
                    };
                    dst[i] = dst[i] + g * factor;
                }
            }
        }
    }
    Tensor::new(cache.input_shape.clone(), grad)
}

/// Cosine similarity of two vectors with the product of norms floored at [`COSINE_EPS`].
pub fn cosine(x1: &[f64], x2: &[f64]) -> f64 {
    let dot: f64 = x1.iter().zip(x2).map(|(a, b)| a * b).sum();
    let n1 = x1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = x2.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (n1 * n2).max(COSINE_EPS)
}

/// Cosine similarity of each adjacent frame pair: `[B, T−1]`.
pub fn frame_cosine_pairs<S: Scalar>(gp: &EmbeddingSequence<S>) -> Result<Tensor<f64>> {
    let (b, t) = (gp.batch(), gp.frames());
    if t < 2 {
        return shape_err(format!("frame_cosine_pairs needs at least 2 frames, got {t}"));
    }
    let mut out = Vec::with_capacity(b * (t - 1));
    for bi in 0..b {
        let frames: Vec<Vec<f64>> = gp.frames_of(bi).into_iter().map(|f| f.into_iter().map(S::as_f64).collect()).collect();
        out.extend(frames.windows(2).map(|p| cosine(&p[0], &p[1])));
    }
    Tensor::new(vec![b, t - 1], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectOrder {
    /// Keep the frames with the lowest triplet similarity (most change).
    Min,
    /// Keep the highest scores.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletOptions {
    pub keep_ratio: f64,
    /// Score with squared cosines.
    pub square_cosines: bool,
    pub select: SelectOrder,
}

impl TripletOptions {
    pub fn new(keep_ratio: f64) -> Self {
        TripletOptions { keep_ratio, square_cosines: false, select: SelectOrder::Min }
    }
}

/// Frames kept per batch item, plus the scores of interior frames `1..T−1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSelection {
    pub keep_ratio: f64,
    pub frames: usize,
    /// `kept[b]` strictly increasing.
    pub kept: Vec<Vec<usize>>,
    /// `scores[b][t − 1]` is the triplet score of interior frame `t`.
    pub scores: Vec<Vec<f64>>,
}

impl FrameSelection {
    pub fn kept_len(&self) -> usize {
        self.kept.first().map_or(0, Vec::len)
    }
}

/// Number of frames kept out of `t` at ratio `r`: `⌊t·r⌋`.
pub fn kept_count(t: usize, r: f64) -> Result<usize> {
    if !(r > 0.0 && r <= 1.0) {
        return arg_err(format!("keep ratio must lie in (0, 1], got {r}"));
    }
    // tolerate representation error in ratios such as 0.3·10
    let n = (t as f64 * r + 1e-9).floor() as usize;
    if t < 3 {
        return shape_err(format!("triplet selection needs at least 3 frames, got {t}"));
    }
    if n == 0 || n > t - 2 {
        return arg_err(format!("keeping {n} of {t} frames: only the {} interior frames are candidates", t - 2));
    }
    Ok(n)
}

pub fn triplet_select<S: Scalar>(gp: &EmbeddingSequence<S>, keep_ratio: f64) -> Result<FrameSelection> {
    triplet_select_with(gp, &TripletOptions::new(keep_ratio))
}

pub fn triplet_select_with<S: Scalar>(gp: &EmbeddingSequence<S>, opts: &TripletOptions) -> Result<FrameSelection> {
    let t = gp.frames();
    let n = kept_count(t, opts.keep_ratio)?;
    let pairs = frame_cosine_pairs(gp)?;
    let mut kept = Vec::with_capacity(gp.batch());
    let mut scores = Vec::with_capacity(gp.batch());
    for row in pairs.data().chunks(t - 1) {
        let cos: Vec<f64> = row.iter().map(|&c| if opts.square_cosines { c * c } else { c }).collect();
        let s: Vec<f64> = (1..t - 1).map(|i| cos[i - 1] + cos[i]).collect();
        let key = |i: usize| (s[i - 1] / SCORE_RESOLUTION).round() as i64;
        let mut order: Vec<usize> = (1..t - 1).collect();
        order.sort_by(|&i, &j| {
            let by_score = match opts.select {
                SelectOrder::Min => key(i).cmp(&key(j)),
                SelectOrder::Max => key(j).cmp(&key(i)),
            };
            by_score.then(i.cmp(&j))
        });
        let mut pick = order[..n].to_vec();
        pick.sort_unstable();
        kept.push(pick);
        scores.push(s);
    }
    Ok(FrameSelection { keep_ratio: opts.keep_ratio, frames: t, kept, scores })
}

/// Copies the kept frames of each batch item: `[B, C, |N|, H, W]`.
pub fn gather_frames<S: Scalar>(a: &Tensor<S>, sel: &FrameSelection) -> Result<Tensor<S>> {
    let [b, c, t, h, w] = a.dims5("gather_frames")?;
    check_selection(sel, b, t)?;
    let n = sel.kept_len();
    let hw = h * w;
    let mut out = Vec::with_capacity(b * c * n * hw);
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * t;
            for &f in &sel.kept[bi] {
                out.extend_from_slice(&a.data()[(base + f) * hw..(base + f + 1) * hw]);
            }
        }
    }
    Tensor::new(vec![b, c, n, h, w], out)
}

/// Scatters gradients of gathered frames back to a `T`-frame volume.
pub fn gather_frames_backward<S: Scalar>(grad: &Tensor<S>, sel: &FrameSelection) -> Result<Tensor<S>> {
    let [b, c, n, h, w] = grad.dims5("gather_frames_backward")?;
    let t = sel.frames;
    check_selection(sel, b, t)?;
    if n != sel.kept_len() {
        return shape_err(format!("gradient has {n} frames, selection keeps {}", sel.kept_len()));
    }
    let hw = h * w;
    let mut out = vec![S::zero(); b * c * t * hw];
    for bi in 0..b {
        for ci in 0..c {
            for (k, &f) in sel.kept[bi].iter().enumerate() {
                let src = &grad.data()[(((bi * c + ci) * n) + k) * hw..][..hw];
                let dst = &mut out[(((bi * c + ci) * t) + f) * hw..][..hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
    }
    Tensor::new(vec![b, c, t, h, w], out)
}

fn check_selection(sel: &FrameSelection, b: usize, t: usize) -> Result<()> {
    if sel.kept.len() != b || sel.frames != t {
        return shape_err(format!(
            "selection for {} items of {} frames applied to {b} items of {t} frames",
            sel.kept.len(),
            sel.frames
        ));
    }
    if sel.kept.iter().any(|k| k.len() != sel.kept_len() || k.iter().any(|&f| f >= t)) {
        return shape_err("ragged or out-of-range frame selection");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, max_relative_error};

    fn pool_one(values: &[f64], h: usize, w: usize, mode: BackwardMode) -> (Tensor, PoolCache) {
        let a = Tensor::new(vec![1, 1, 1, h, w], values.to_vec()).unwrap();
        let cfg = PoolConfig::new([h, w], [1, 1], PoolMode::SoftPool, mode).unwrap();
        softpool_forward(&a, &cfg).unwrap()
    }

    #[test]
    fn uniform_region_returns_value() {
        let (y, _) = pool_one(&[0.3; 4], 2, 2, BackwardMode::PaperWeighted);
        assert!((y.data()[0] - 0.3).abs() < 1e-15);
        let (y, _) = pool_one(&[0.0, 0.0], 1, 2, BackwardMode::PaperWeighted);
        assert_eq!(y.data()[0], 0.0);
    }

    #[test]
    fn two_member_region() {
        let (y, _) = pool_one(&[1.0, 2.0], 1, 2, BackwardMode::PaperWeighted);
        let e = std::f64::consts::E;
        let expect = (e * 1.0 + e * e * 2.0) / (e + e * e);
        assert!((y.data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn paper_weighted_uniform_split() {
        let (_, cache) = pool_one(&[0.5; 4], 2, 2, BackwardMode::PaperWeighted);
        let g = softpool_backward(&cache, &Tensor::full(vec![1, 1, 1, 1, 1], 2.0), BackwardMode::PaperWeighted).unwrap();
        assert!(g.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn exact_mode_needs_saved_values() {
        let (_, cache) = pool_one(&[0.5, 1.0], 1, 2, BackwardMode::PaperWeighted);
        let up = Tensor::ones(vec![1, 1, 1, 1, 1]);
        assert!(softpool_backward(&cache, &up, BackwardMode::ExactAutodiff).is_err());
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let vals = [0.3, -0.8, 0.9, 0.1, 0.4, -0.2, 0.7, -0.5, 0.0, 0.6, -0.9, 0.2, 0.5, 0.8, -0.1, -0.4];
        let a = Tensor::new(vec![1, 1, 1, 4, 4], vals.to_vec()).unwrap();
        let cfg = PoolConfig::new([2, 2], [1, 2], PoolMode::SoftPool, BackwardMode::ExactAutodiff).unwrap();
        let (y, cache) = softpool_forward(&a, &cfg).unwrap();
        let up = Tensor::from_fn(y.shape().to_vec(), |i| 0.3 + 0.1 * i as f64);
        let g = softpool_backward(&cache, &up, BackwardMode::ExactAutodiff).unwrap();
        let fd = finite_difference_grad(|p| softpool_forward(p, &cfg).unwrap().0.dot(&up).unwrap(), &a, 1e-5);
        assert!(max_relative_error(&g, &fd, 1e-6) < 1e-6);
    }

    #[test]
    fn average_and_max_baselines() {
        let a = Tensor::new(vec![1, 1, 1, 2, 2], vec![1.0, 4.0, 2.0, 3.0]).unwrap();
        let avg = PoolConfig::new([2, 2], [2, 2], PoolMode::Average, BackwardMode::PaperWeighted).unwrap();
        let max = PoolConfig { mode: PoolMode::Max, ..avg };
        assert_eq!(softpool_forward(&a, &avg).unwrap().0.data(), &[2.5]);
        let (y, cache) = softpool_forward(&a, &max).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = softpool_backward(&cache, &Tensor::ones(vec![1, 1, 1, 1, 1]), BackwardMode::PaperWeighted).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn constant_video_picks_lowest_interior() {
        let e = EmbeddingSequence::<f64>::new(Tensor::ones(vec![1, 3, 6])).unwrap();
        let sel = triplet_select(&e, 0.5).unwrap();
        assert_eq!(sel.kept, vec![vec![1, 2, 3]]);
    }

    #[test]
    fn neighbour_of_changed_frame_is_kept_first() {
        // frames u, u, v, u with u ⟂ v
        let (u, v) = (vec![1.0, 0.0], vec![0.0, 1.0]);
        let e = EmbeddingSequence::from_frames(&[vec![u.clone(), u.clone(), v, u]]).unwrap();
        let sel = triplet_select(&e, 0.25).unwrap();
        // P(1) = 1 + 0, P(2) = 0 + 0
        assert_eq!(sel.scores[0], vec![1.0, 0.0]);
        assert_eq!(sel.kept[0], vec![2]);
    }

    #[test]
    fn too_many_frames_is_an_error() {
        let e = EmbeddingSequence::<f64>::new(Tensor::ones(vec![1, 2, 4])).unwrap();
        assert!(triplet_select(&e, 0.75).is_err());
        assert!(triplet_select(&e, 0.0).is_err());
    }

    #[test]
    fn max_order_with_squares() {
        let e = EmbeddingSequence::from_frames(&[vec![
            vec![1.0, 0.0],
            vec![1.0, 0.1],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ]])
        .unwrap();
        let min = triplet_select(&e, 0.2).unwrap();
        let opts = TripletOptions { keep_ratio: 0.2, square_cosines: true, select: SelectOrder::Max };
        let max = triplet_select_with(&e, &opts).unwrap();
        assert_eq!(min.kept[0], vec![2]);
        assert_eq!(max.kept[0], vec![1]);
    }

    #[test]
    fn gather_and_scatter() {
        let a = Tensor::<f64>::from_fn(vec![2, 2, 5, 2, 1], |i| i as f64);
        let sel = FrameSelection { keep_ratio: 0.4, frames: 5, kept: vec![vec![1, 3], vec![2, 3]], scores: vec![] };
        let g = gather_frames(&a, &sel).unwrap();
        assert_eq!(g.shape(), &[2, 2, 2, 2, 1]);
        assert_eq!(g.get(&[1, 0, 0, 1, 0]), a.get(&[1, 0, 2, 1, 0]));
        let back = gather_frames_backward(&Tensor::<f64>::ones(g.shape().to_vec()), &sel).unwrap();
        assert_eq!(back.get(&[0, 1, 1, 0, 0]), 1.0);
        assert_eq!(back.get(&[0, 1, 2, 0, 0]), 0.0);
    }
}
