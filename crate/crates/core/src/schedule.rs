//! Training schedules: multigrid batch/shape cycles, learning-rate rules,
//! start-frame sampling and per-clip augmentation plans.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, Result};
use crate::tensor::Tensor;

/// One multigrid shape: batch, frames, height and width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridEntry {
    pub batch: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl GridEntry {
    pub fn new(batch: usize, frames: usize, height: usize, width: usize) -> Result<Self> {
        if batch == 0 || frames == 0 || height == 0 || width == 0 {
            return arg_err(format!("grid entries must be positive, got {batch}x{frames}x{height}x{width}"));
        }
        Ok(GridEntry { batch, frames, height, width })
    }

    /// Parses `BxTxHxW`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s.split('x').map(|p| p.trim().parse::<usize>()).collect::<std::result::Result<_, _>>()
            .or_else(|_| arg_err(format!("expected BxTxHxW, got {s:?}")))?;
        match parts[..] {
            [b, t, h, w] => GridEntry::new(b, t, h, w),
            _ => arg_err(format!("expected BxTxHxW, got {s:?}")),
        }
    }

    pub fn volume(&self) -> usize {
        self.batch * self.frames * self.height * self.width
    }

    /// Relative deviation of this entry's volume from `base`'s.
    pub fn drift(&self, base: &GridEntry) -> f64 {
        (self.volume() as f64 - base.volume() as f64).abs() / base.volume() as f64
    }
}

impl fmt::Display for GridEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.batch, self.frames, self.height, self.width)
    }
}

/// Nearest even integer, at least 2.
pub fn round_even(x: f64) -> usize {
    ((x / 2.0).round() as usize * 2).max(2)
}

/// Largest relative area error accepted before falling back to the closest area.
pub const AREA_TOLERANCE: f64 = 0.0195;

/// Scales height and width by `factor` onto even integers. Candidates are the
/// ten even values around each scaled extent; among pairs whose area is within
/// [`AREA_TOLERANCE`] of the scaled area the one nearest per axis wins,
/// otherwise the pair with the closest area.
pub fn scale_extents(height: usize, width: usize, factor: f64) -> (usize, usize) {
    let (th, tw) = (height as f64 * factor, width as f64 * factor);
    let area = th * tw;
    let evens = |x: f64| {
        let below = (x / 2.0).floor() as i64 * 2;
        (-4..=5).map(move |d| (below + 2 * d).max(2) as usize)
    };
    let err = |(h, w): (usize, usize)| ((h * w) as f64 - area).abs() / area;
    let near = |(h, w): (usize, usize)| (h as f64 - th).abs() + (w as f64 - tw).abs();
    let pairs: Vec<(usize, usize)> = evens(th).flat_map(|h| evens(tw).map(move |w| (h, w))).collect();
    let by = |f: &dyn Fn((usize, usize)) -> (f64, f64)| {
        pairs.iter().copied().min_by(|&p, &q| f(p).partial_cmp(&f(q)).expect("finite keys"))
    };
    pairs
        .iter()
        .any(|&p| err(p) <= AREA_TOLERANCE)
        .then(|| by(&|p| if err(p) <= AREA_TOLERANCE { (near(p), err(p)) } else { (f64::INFINITY, 0.0) }))
        .flatten()
        .or_else(|| by(&|p| (err(p), near(p))))
        .expect("candidate pairs exist")
}

/// Four shapes trading frames and resolution for batch size, ending at the base.
pub fn long_cycle(base: GridEntry) -> [GridEntry; 4] {
    let GridEntry { batch: b, frames: t, height: h, width: w } = base;
    let (hs, ws) = scale_extents(h, w, 1.0 / SQRT_2);
    [
        GridEntry { batch: 8 * b, frames: (t / 4).max(1), height: hs, width: ws },
        GridEntry { batch: 4 * b, frames: (t / 2).max(1), height: hs, width: ws },
        GridEntry { batch: 2 * b, frames: (t / 2).max(1), height: h, width: w },
        base,
    ]
}

/// Three shapes that shrink only the spatial extents, ending at the base.
pub fn short_cycle(base: GridEntry) -> [GridEntry; 3] {
    let GridEntry { batch: b, frames: t, height: h, width: w } = base;
    let (hh, wh) = scale_extents(h, w, 0.5);
    let (hs, ws) = scale_extents(h, w, 1.0 / SQRT_2);
    [
        GridEntry { batch: 4 * b, frames: t, height: hh, width: wh },
        GridEntry { batch: 2 * b, frames: t, height: hs, width: ws },
        base,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycleKind {
    Long,
    Short,
    /// A short cycle inside every long-cycle shape.
    Both,
}

impl CycleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "long" => Ok(CycleKind::Long),
            "short" => Ok(CycleKind::Short),
            "both" => Ok(CycleKind::Both),
            _ => arg_err(format!("unknown cycle kind {s:?}; expected long, short or both")),
        }
    }
}

/// The shapes visited by one pass of the chosen cycle.
pub fn multigrid(base: GridEntry, kind: CycleKind) -> Vec<GridEntry> {
    match kind {
        CycleKind::Long => long_cycle(base).to_vec(),
        CycleKind::Short => short_cycle(base).to_vec(),
        CycleKind::Both => {
            // every spatial size is scaled from the base so that rounding does not compound
            let GridEntry { batch: b, frames: t, height: h, width: w } = base;
            let long = [(8, (t / 4).max(1), 1.0 / SQRT_2), (4, (t / 2).max(1), 1.0 / SQRT_2), (2, (t / 2).max(1), 1.0), (1, t, 1.0)];
            let short = [(4, 0.5), (2, 1.0 / SQRT_2), (1, 1.0)];
            long.iter()
                .flat_map(|&(lb, lt, lf)| {
                    short.iter().map(move |&(sb, sf)| {
                        let f: f64 = lf * sf;
                        let (height, width) = if f == 1.0 { (h, w) } else { scale_extents(h, w, f) };
                        GridEntry { batch: lb * sb * b, frames: lt, height, width }
                    })
                })
                .collect()
        }
    }
}

/// Linear scaling rule.
pub fn scaled_lr(lr: f64, batch_new: usize, batch_old: usize) -> f64 {
    lr * (batch_new as f64 / batch_old as f64)
}

/// CSV of `iteration,batch,frames,height,width,lr` with the rate scaled by batch size.
pub fn schedule_csv(base: GridEntry, kind: CycleKind, lr: f64) -> String {
    let mut s = String::from("iteration,batch,frames,height,width,lr\n");
    for (i, e) in multigrid(base, kind).iter().enumerate() {
        let rate = scaled_lr(lr, e.batch, base.batch);
        s.push_str(&format!("{i},{},{},{},{},{rate}\n", e.batch, e.frames, e.height, e.width));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub enum LrMode {
    Cosine,
    /// Divide by ten at each listed iteration.
    Step(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
    pub mode: LrMode,
}

pub const DEFAULT_WARMUP: usize = 8000;

impl LrSchedule {
    /// A fixed rate.
    pub fn constant(base: f64) -> Self {
        LrSchedule { base, warmup: 0, total: usize::MAX, mode: LrMode::Step(Vec::new()) }
    }

    pub fn cosine(base: f64, warmup: usize, total: usize) -> Result<Self> {
        if total <= warmup {
            return arg_err(format!("schedule length {total} must exceed warmup {warmup}"));
        }
        Ok(LrSchedule { base, warmup, total, mode: LrMode::Cosine })
    }

    pub fn step(base: f64, warmup: usize, total: usize, steps: Vec<usize>) -> Result<Self> {
        if total <= warmup {
            return arg_err(format!("schedule length {total} must exceed warmup {warmup}"));
        }
        Ok(LrSchedule { base, warmup, total, mode: LrMode::Step(steps) })
    }

    /// Rate at iteration `n`: a linear ramp from zero over the warmup, then the
    /// chosen decay with progress measured from the end of the warmup.
    pub fn rate(&self, n: usize) -> f64 {
        if n < self.warmup {
            return self.base * n as f64 / self.warmup as f64;
        }
        match &self.mode {
            LrMode::Cosine => {
                if n >= self.total {
                    return 0.0;
                }
                let progress = (n - self.warmup) as f64 / (self.total - self.warmup) as f64;
                self.base * 0.5 * ((PI * progress).cos() + 1.0)
            }
            LrMode::Step(steps) => self.base * 0.1f64.powi(steps.iter().filter(|&&s| s <= n).count() as i32),
        }
    }
}

/// Where clips start and how their frames are spaced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameSamplerConfig {
    pub clip_len: usize,
    pub frames: usize,
    pub stride: usize,
    /// Spread of the start-frame distribution; `clip_len / 6` by default.
    pub spread: f64,
}

impl FrameSamplerConfig {
    pub fn new(clip_len: usize, frames: usize, stride: usize) -> Result<Self> {
        if clip_len < frames {
            return arg_err(format!("clip of {clip_len} frames cannot supply {frames}"));
        }
        if frames == 0 || stride == 0 {
            return arg_err("frames and stride must be positive");
        }
        Ok(FrameSamplerConfig { clip_len, frames, stride, spread: clip_len as f64 / 6.0 })
    }

    pub fn centre(&self) -> f64 {
        self.clip_len as f64 / 4.0
    }

    pub fn upper(&self) -> f64 {
        self.clip_len as f64 / 2.0
    }
}

/// Start position drawn from a normal around a quarter of the clip, resampled
/// until it lands in the first half.
pub fn sample_start(cfg: &FrameSamplerConfig, rng: &mut impl Rng) -> Result<f64> {
    if !(cfg.spread >= 0.0) {
        return arg_err(format!("sampler spread must be non-negative, got {}", cfg.spread));
    }
    let normal = Normal::new(cfg.centre(), cfg.spread).or_else(|e| arg_err(e.to_string()))?;
    loop {
        let s = normal.sample(rng);
        if (0.0..=cfg.upper()).contains(&s) {
            return Ok(s);
        }
    }
}

/// Frame indices of one clip: `frames` steps of `stride` from the sampled start,
/// clamped to the clip.
pub fn sample_clip(cfg: &FrameSamplerConfig, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if cfg.clip_len < cfg.frames {
        return arg_err(format!("clip of {} frames cannot supply {}", cfg.clip_len, cfg.frames));
    }
    let start = sample_start(cfg, rng)?.floor() as usize;
    Ok((0..cfg.frames).map(|i| (start + i * cfg.stride).min(cfg.clip_len - 1)).collect())
}

/// A fired augmentation with its drawn parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum AugOp {
    /// Relative crop offsets in [0, 1] along height and width.
    Crop { y: f64, x: f64 },
    Flip,
    GaussianBlur { sigma: f64 },
    /// Additive offset on the 0-255 scale.
    Brightness { offset: i32 },
    MeanBlur { size: usize },
    Contrast { factor: f64 },
    Gamma { gamma: f64 },
    HueSaturation { shift: i32 },
    LinearContrast { alpha: f64 },
    Perspective { scale: f64 },
    Rotate { degrees: f64 },
}

impl AugOp {
    pub fn name(&self) -> &'static str {
        match self {
            AugOp::Crop { .. } => "crop",
            AugOp::Flip => "flip",
            AugOp::GaussianBlur { .. } => "gaussian_blur",
            AugOp::Brightness { .. } => "brightness",
            AugOp::MeanBlur { .. } => "mean_blur",
            AugOp::Contrast { .. } => "contrast",
            AugOp::Gamma { .. } => "gamma",
            AugOp::HueSaturation { .. } => "hue_saturation",
            AugOp::LinearContrast { .. } => "linear_contrast",
            AugOp::Perspective { .. } => "perspective",
            AugOp::Rotate { .. } => "rotate",
        }
    }
}

/// Names of the ops drawn inside the sequence gate, in draw order. The last
/// slot fires one of perspective or rotation.
pub const GATED_OPS: [&str; 7] =
    ["gaussian_blur", "brightness", "mean_blur", "contrast", "gamma", "hue_saturation", "linear_contrast"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationPlan {
    pub p_seq: f64,
    pub p_op: f64,
}

impl AugmentationPlan {
    pub const DEFAULT: AugmentationPlan = AugmentationPlan { p_seq: 0.8, p_op: 0.4 };
    /// Sequence probability used for the multi-temporal networks.
    pub const MULTI_TEMPORAL: AugmentationPlan = AugmentationPlan { p_seq: 0.7, p_op: 0.4 };

    /// Draws the ops for one clip. The crop position is always drawn, then the
    /// sequence gate, then each gated op, then the flip.
    pub fn draw(&self, rng: &mut impl Rng) -> Vec<AugOp> {
        let mut ops = vec![AugOp::Crop { y: rng.random(), x: rng.random() }];
        if rng.random_bool(self.p_seq) {
            let fire = |rng: &mut _| -> bool { Rng::random_bool(rng, self.p_op) };
            if fire(rng) {
                ops.push(AugOp::GaussianBlur { sigma: [0.1, 0.2, 0.3][rng.random_range(0..3)] });
            }
            if fire(rng) {
                ops.push(AugOp::Brightness { offset: rng.random_range(-5..=15) });
            }
            if fire(rng) {
                ops.push(AugOp::MeanBlur { size: rng.random_range(1..=2) });
            }
            if fire(rng) {
                ops.push(AugOp::Contrast { factor: rng.random_range(0.8..=1.2) });
            }
            if fire(rng) {
                ops.push(AugOp::Gamma { gamma: rng.random_range(0.85..=1.15) });
            }
            if fire(rng) {
                ops.push(AugOp::HueSaturation { shift: rng.random_range(-16..=16) });
            }
            if fire(rng) {
                ops.push(AugOp::LinearContrast { alpha: rng.random_range(0.85..=1.115) });
            }
            if fire(rng) {
                ops.push(if rng.random_bool(0.5) {
                    AugOp::Perspective { scale: rng.random_range(0.02..=0.05) }
                } else {
                    AugOp::Rotate { degrees: rng.random_range(-10.0..=10.0) }
                });
            }
        }
        if rng.random_bool(0.5) {
            ops.push(AugOp::Flip);
        }
        ops
    }
}

/// Applies the crop, flip, brightness, contrast and blur ops of a plan to a
/// `[C, T, H, W]` clip with values on the unit scale; other ops are skipped.
/// `crop` gives the output height and width.
pub fn apply_ops(clip: &Tensor, ops: &[AugOp], crop: [usize; 2]) -> Result<Tensor> {
    let [c, t, h, w] = clip.dims4("augmentation clip")?;
    if crop[0] == 0 || crop[1] == 0 || crop[0] > h || crop[1] > w {
        return arg_err(format!("crop {crop:?} does not fit {h}x{w}"));
    }
    let mut cur = clip.clone();
    for op in ops {
        cur = match *op {
            AugOp::Crop { y, x } => {
                let oy = (y.clamp(0.0, 1.0) * (h - crop[0]) as f64).round() as usize;
                let ox = (x.clamp(0.0, 1.0) * (w - crop[1]) as f64).round() as usize;
                let (ch, cw) = (cur.dim(2), cur.dim(3));
                let src = cur.clone();
                Tensor::from_fn(vec![c, t, crop[0], crop[1]], |i| {
                    let (plane, r) = (i / (crop[0] * crop[1]), i % (crop[0] * crop[1]));
                    src.data()[plane * ch * cw + (r / crop[1] + oy) * cw + r % crop[1] + ox]
                })
            }
            AugOp::Flip => {
                let wd = cur.dim(3);
                let src = cur.clone();
                Tensor::from_fn(src.shape().to_vec(), |i| src.data()[i - i % wd + (wd - 1 - i % wd)])
            }
            AugOp::Brightness { offset } => cur.map(|v| v + offset as f64 / 255.0),
            AugOp::Contrast { factor } => cur.map(|v| v * factor),
            AugOp::GaussianBlur { sigma } => {
                let radius = (3.0 * sigma).ceil() as isize;
                let taps: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
                let norm: f64 = taps.iter().sum();
                let taps: Vec<f64> = taps.iter().map(|v| v / norm).collect();
                blur(&cur, &taps, radius)
            }
            AugOp::MeanBlur { size } => {
                let taps = vec![1.0 / size as f64; size];
                blur(&cur, &taps, 0)
            }
            _ => cur,
        };
    }
    Ok(cur)
}

/// Separable spatial filter with replicated borders; tap `k` reads offset `k - origin`.
fn blur(x: &Tensor, taps: &[f64], origin: isize) -> Tensor {
    let (h, w) = (x.dim(2), x.dim(3));
    let pass = |src: &Tensor, horizontal: bool| {
        Tensor::from_fn(src.shape().to_vec(), |i| {
            let (plane, r) = (i / (h * w), i % (h * w));
            let (row, col) = (r / w, r % w);
            taps.iter()
                .enumerate()
                .map(|(k, &wt)| {
                    let d = k as isize - origin;
                    let (rr, cc) = if horizontal {
                        (row, (col as isize + d).clamp(0, w as isize - 1) as usize)
                    } else {
                        ((row as isize + d).clamp(0, h as isize - 1) as usize, col)
                    };
                    wt * src.data()[plane * h * w + rr * w + cc]
                })
                .sum()
        })
    };
    pass(&pass(x, true), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn long_cycle_example() {
        let base = GridEntry::new(32, 16, 224, 224).unwrap();
        let c = long_cycle(base);
        let want = [(256, 4, 158), (128, 8, 158), (64, 8, 224), (32, 16, 224)];
        for (e, (b, t, s)) in c.iter().zip(want) {
            assert_eq!((e.batch, e.frames, e.height, e.width), (b, t, s, s));
            assert!(e.drift(&base) <= 0.02);
        }
    }

    #[test]
    fn short_cycle_ends_at_base() {
        let base = GridEntry::new(8, 8, 112, 112).unwrap();
        let c = short_cycle(base);
        assert_eq!(c[2], base);
        assert_eq!((c[0].batch, c[0].height), (32, 56));
        assert!(c.iter().all(|e| e.drift(&base) <= 0.02));
        assert_eq!(scale_extents(112, 112, 1.0 / SQRT_2), (78, 80));
    }

    #[test]
    fn parse_grid() {
        assert_eq!(GridEntry::parse("32x16x224x224").unwrap(), GridEntry::new(32, 16, 224, 224).unwrap());
        assert!(GridEntry::parse("32x16").is_err());
    }

    #[test]
    fn cosine_landmarks() {
        let s = LrSchedule::cosine(0.4, 100, 1100).unwrap();
        assert_eq!(s.rate(0), 0.0);
        assert_eq!(s.rate(100), 0.4);
        assert!((s.rate(600) - 0.2).abs() < 1e-12);
        assert_eq!(s.rate(1100), 0.0);
        assert!((s.rate(50) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn step_schedule_divides_by_ten() {
        let s = LrSchedule::step(1.0, 0, 200, vec![40, 70, 120]).unwrap();
        assert_eq!(s.rate(39), 1.0);
        assert!((s.rate(70) - 0.01).abs() < 1e-15);
        assert!((s.rate(150) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn halved_batch_halves_rate() {
        assert_eq!(scaled_lr(0.1, 16, 32), 0.05);
        assert_eq!(scaled_lr(0.1, 32, 32), 0.1);
        assert_eq!(scaled_lr(0.1, 256, 32), 0.8);
    }

    #[test]
    fn zero_spread_start_is_quarter() {
        let mut cfg = FrameSamplerConfig::new(50, 8, 2).unwrap();
        cfg.spread = 0.0;
        let mut r = rng::stream(1, "s");
        assert_eq!(sample_clip(&cfg, &mut r).unwrap()[0], 12);
        assert!(FrameSamplerConfig::new(4, 8, 1).is_err());
    }

    #[test]
    fn closed_gate_leaves_crop_and_flip() {
        let plan = AugmentationPlan { p_seq: 0.0, p_op: 0.4 };
        let mut r = rng::stream(2, "aug");
        for _ in 0..50 {
            let ops = plan.draw(&mut r);
            assert!(ops.iter().all(|o| matches!(o, AugOp::Crop { .. } | AugOp::Flip)));
        }
    }

    #[test]
    fn flip_and_crop_ops() {
        let clip = Tensor::from_fn(vec![1, 1, 2, 3], |i| i as f64);
        let f = apply_ops(&clip, &[AugOp::Flip], [2, 3]).unwrap();
        assert_eq!(f.data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        let c = apply_ops(&clip, &[AugOp::Crop { y: 1.0, x: 1.0 }], [1, 2]).unwrap();
        assert_eq!(c.data(), &[4.0, 5.0]);
        let b = apply_ops(&Tensor::full(vec![1, 1, 3, 3], 0.5), &[AugOp::GaussianBlur { sigma: 0.3 }, AugOp::MeanBlur { size: 2 }], [3, 3]).unwrap();
        assert!(b.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }
}
