//! Saliency tubes and class feature pyramids.
//!
//! A saliency tube weights the last convolutional activations by a class's
//! prediction weights and upsamples the result to the clip. A feature pyramid
//! walks back from a class through the network, keeping at every layer the
//! input channels that most strongly feed the features kept above.

use std::fmt::Write as _;
use std::time::Duration;

use crate::error::{arg_err, Error, Result};
use crate::tensor::{spline3_resize, Tensor};

/// Min-max normalisation into [0, 1]; a constant input maps to zeros.
pub fn min_max_normalise(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// `y·a` min-max normalised over the whole map.
pub fn normalized_class_weighting(a: &Tensor, y: f64) -> Tensor {
    let f: Vec<f64> = a.data().iter().map(|&v| y * v).collect();
    Tensor::new(a.shape().to_vec(), min_max_normalise(&f)).expect("shape unchanged")
}

/// Per-channel class weighting of `a: [C, ...]` with `weights: [C]`.
pub fn class_activation_map(a: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let c = check_channels(a, weights.len(), "class activation map")?;
    let plane = a.len() / c.max(1);
    let mut out = Vec::with_capacity(a.len());
    for (j, &y) in weights.iter().enumerate() {
        let f: Vec<f64> = a.data()[j * plane..(j + 1) * plane].iter().map(|&v| y * v).collect();
        out.extend(min_max_normalise(&f));
    }
    Tensor::new(a.shape().to_vec(), out)
}

fn check_channels(a: &Tensor, expected: usize, what: &str) -> Result<usize> {
    if a.rank() == 0 || a.dim(0) != expected {
        return Err(Error::Shape(format!("{what}: activation shape {:?} does not have {expected} channels", a.shape())));
    }
    Ok(expected)
}

/// Mean of every channel of `a: [C, ...]`.
pub fn channel_summaries(a: &Tensor) -> Vec<f64> {
    if a.rank() == 0 || a.dim(0) == 0 {
        return Vec::new();
    }
    let c = a.dim(0);
    let plane = a.len() / c;
    a.data().chunks(plane.max(1)).take(c).map(|ch| ch.iter().sum::<f64>() / plane.max(1) as f64).collect()
}

/// Indices whose score exceeds the threshold, ascending.
pub fn select_features(scores: &[f64], threshold: f64) -> Vec<usize> {
    (0..scores.len()).filter(|&j| scores[j] > threshold).collect()
}

/// Upsampled, normalised class saliency over a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyVolume {
    /// `[T, H, W]` with every value in [0, 1].
    pub values: Tensor,
    pub class: usize,
    pub threshold: f64,
    /// Set when the threshold excluded every channel.
    pub empty: bool,
}

/// Sum of squared class-weighted maps of `a_last: [C', T', H', W']`, scaled to
/// [0, 1] and resized to `extents` with cubic splines.
///
/// A channel is kept when its strongest weighted response reaches `tau` times
/// the strongest response over all channels; `tau = 0` keeps every channel.
pub fn saliency_tube(
    a_last: &Tensor,
    weights: &[f64],
    class: usize,
    tau: f64,
    extents: [usize; 3],
) -> Result<SaliencyVolume> {
    if !(tau >= 0.0) {
        return arg_err(format!("saliency threshold must be non-negative, got {tau}"));
    }
    let [c, t, h, w] = a_last.dims4("saliency activation")?;
    check_channels(a_last, weights.len(), "saliency tube")?;
    let plane = t * h * w;
    let peaks: Vec<f64> = (0..c)
        .map(|j| a_last.data()[j * plane..(j + 1) * plane].iter().map(|&v| weights[j] * v).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let global = peaks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = (0..c).filter(|&j| tau == 0.0 || peaks[j] >= tau * global).collect();
    if kept.is_empty() {
        return Ok(SaliencyVolume { values: Tensor::zeros(extents.to_vec()), class, threshold: tau, empty: true });
    }
    let mut sum = vec![0.0; plane];
    for &j in &kept {
        let f: Vec<f64> = a_last.data()[j * plane..(j + 1) * plane].iter().map(|&v| weights[j] * v).collect();
        for (s, z) in sum.iter_mut().zip(min_max_normalise(&f)) {
            *s += z * z;
        }
    }
    let peak = sum.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        sum.iter_mut().for_each(|s| *s /= peak);
    }
    let small = Tensor::new(vec![t, h, w], sum)?;
    let values = spline3_resize(&small, extents)?.map(|v| v.clamp(0.0, 1.0));
    Ok(SaliencyVolume { values, class, threshold: tau, empty: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraversalMode {
    /// Every kept feature selects its own children.
    FeatureWise,
    /// Scores are averaged over the kept features of a layer before selecting.
    LayerWise,
}

impl TraversalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "feature" | "feature-wise" | "featurewise" => Ok(TraversalMode::FeatureWise),
            "layer" | "layer-wise" | "layerwise" => Ok(TraversalMode::LayerWise),
            _ => arg_err(format!("unknown traversal mode {s:?}; expected feature or layer")),
        }
    }
}

/// Per-input-channel mean of kernel `k` in `kernels: [K, C, ...]`.
pub fn pooled_kernel(kernels: &Tensor, k: usize) -> Vec<f64> {
    let c = kernels.dim(1);
    let taps = kernels.len() / (kernels.dim(0) * c).max(1);
    let row = &kernels.data()[k * c * taps..(k + 1) * c * taps];
    row.chunks(taps.max(1)).map(|ch| ch.iter().sum::<f64>() / taps.max(1) as f64).collect()
}

/// Normalised contribution of every input channel of `a_prev: [C, ...]` to the
/// selected kernels of `kernels: [K, C, ...]`. Feature-wise mode returns one
/// vector per selected kernel, layer-wise mode their mean.
pub fn backstep_layer(a_prev: &Tensor, kernels: &Tensor, selected: &[usize], mode: TraversalMode) -> Result<Vec<Vec<f64>>> {
    if kernels.rank() < 2 {
        return Err(Error::Shape(format!("kernels must be [K, C, ...], got {:?}", kernels.shape())));
    }
    let c = check_channels(a_prev, kernels.dim(1), "back-step")?;
    if let Some(&k) = selected.iter().find(|&&k| k >= kernels.dim(0)) {
        return arg_err(format!("kernel index {k} out of range for {} kernels", kernels.dim(0)));
    }
    let pooled = channel_summaries(a_prev);
    let vectors: Vec<Vec<f64>> = selected
        .iter()
        .map(|&k| {
            let kb = pooled_kernel(kernels, k);
            min_max_normalise(&(0..c).map(|j| pooled[j] * kb[j]).collect::<Vec<_>>())
        })
        .collect();
    Ok(match mode {
        TraversalMode::FeatureWise => vectors,
        TraversalMode::LayerWise if vectors.is_empty() => Vec::new(),
        TraversalMode::LayerWise => {
            let n = vectors.len() as f64;
            vec![(0..c).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n).collect()]
        }
    })
}

/// One convolution as seen by the back-step: its kernels and the activation
/// that entered it, without the batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    /// `[K, C / groups, kt, kh, kw]`.
    pub kernels: Tensor,
    /// `[C, ...]`.
    pub input: Tensor,
}

impl Stage {
    /// Pass-through stage over `channels` features: identity kernels fed by ones.
    pub fn identity(channels: usize) -> Self {
        let kernels = Tensor::from_fn(vec![channels, channels, 1, 1, 1], |i| if i / channels == i % channels { 1.0 } else { 0.0 });
        Stage { kernels, input: Tensor::ones(vec![channels, 1, 1, 1]) }
    }

    pub fn in_channels(&self) -> usize {
        self.input.dim(0)
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.dim(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Plain,
    /// One main branch plus an identity skip.
    Residual,
    /// Grouped convolutions with the given group count.
    Grouped(usize),
    /// Several branches summed at the block output.
    Branched,
}

/// Brings a block to a list of equally deep, full-width branches.
///
/// Residual blocks gain an identity skip branch. Grouped kernels are widened
/// with zeros to cover every input channel. Shorter branches are padded on
/// their input side with identity stages.
pub fn adapt_block(kind: BlockKind, branches: Vec<Vec<Stage>>) -> Result<Vec<Vec<Stage>>> {
    if branches.is_empty() || branches.iter().any(Vec::is_empty) {
        return arg_err("every branch needs at least one stage");
    }
    let mut branches = branches;
    match kind {
        BlockKind::Plain => {
            if branches.len() != 1 {
                return arg_err("a plain block has exactly one branch");
            }
        }
        BlockKind::Residual => {
            if branches.len() != 1 {
                return arg_err("a residual block takes its main branch only");
            }
            let main = &branches[0];
            let (cin, cout) = (main[0].in_channels(), main.last().expect("non-empty").out_channels());
            if cin != cout {
                return arg_err(format!("identity skip needs equal widths, got {cin} -> {cout}"));
            }
            let depth = main.len();
            branches.push((0..depth).map(|_| Stage::identity(cin)).collect());
        }
        BlockKind::Grouped(groups) => {
            for stage in branches.iter_mut().flatten() {
                stage.kernels = inflate_groups(&stage.kernels, stage.in_channels(), groups)?;
            }
        }
        BlockKind::Branched => {}
    }
    let width = branches[0].last().expect("non-empty").out_channels();
    if branches.iter().any(|b| b.last().expect("non-empty").out_channels() != width) {
        return arg_err("branches must end in the same number of features");
    }
    let depth = branches.iter().map(Vec::len).max().unwrap_or(0);
    for b in &mut branches {
        let missing = depth - b.len();
        if missing > 0 {
            let cin = b[0].in_channels();
            b.splice(0..0, (0..missing).map(|_| Stage::identity(cin)));
        }
    }
    for stage in branches.iter().flatten() {
        if stage.kernels.dim(1) != stage.in_channels() {
            return Err(Error::Shape(format!(
                "stage kernels read {} channels but the activation has {}",
                stage.kernels.dim(1),
                stage.in_channels()
            )));
        }
    }
    Ok(branches)
}

/// `[K, C/g, ...] → [K, C, ...]`, with zeros outside each kernel's group.
pub fn inflate_groups(kernels: &Tensor, channels: usize, groups: usize) -> Result<Tensor> {
    let k = kernels.dim(0);
    if groups == 0 || !k.is_multiple_of(groups) || !channels.is_multiple_of(groups) || kernels.dim(1) != channels / groups {
        return arg_err(format!(
            "cannot inflate kernels {:?} over {channels} channels in {groups} groups",
            kernels.shape()
        ));
    }
    let per_group = channels / groups;
    let taps = kernels.len() / (k * per_group).max(1);
    let mut shape = kernels.shape().to_vec();
    shape[1] = channels;
    let mut out = Tensor::zeros(shape);
    for o in 0..k {
        let g = o / (k / groups);
        for ci in 0..per_group {
            let src = (o * per_group + ci) * taps;
            let dst = (o * channels + g * per_group + ci) * taps;
            out.data_mut()[dst..dst + taps].copy_from_slice(&kernels.data()[src..src + taps]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceBlock {
    pub kind: BlockKind,
    /// Each branch lists its stages from input to output.
    pub branches: Vec<Vec<Stage>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackstepConfig {
    pub threshold: f64,
    /// Layers to report, counting the prediction layer.
    pub depth: usize,
    pub mode: TraversalMode,
}

impl BackstepConfig {
    pub fn new(threshold: f64, depth: usize, mode: TraversalMode) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return arg_err(format!("back-step threshold must lie in (0, 1), got {threshold}"));
        }
        if depth == 0 {
            return arg_err("back-step depth must be at least 1");
        }
        Ok(BackstepConfig { threshold, depth, mode })
    }
}

/// Link from a kept feature in layer `layer - 1` to a kept feature in `layer`.
/// Layer 0 links the class to features of the last activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub layer: usize,
    pub parent: usize,
    pub child: usize,
    pub score: f64,
}

/// Scores are stored at the printed precision so that reports survive a text round trip.
fn printed(score: f64) -> f64 {
    format!("{score:.6}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone)]
pub struct PyramidReport {
    pub class: usize,
    pub edges: Vec<Edge>,
    /// Set when the requested depth exceeded the network.
    pub truncated: bool,
    pub elapsed: Duration,
}

impl PartialEq for PyramidReport {
    fn eq(&self, other: &Self) -> bool {
        self.class == other.class && self.edges == other.edges && self.truncated == other.truncated
    }
}

impl PyramidReport {
    pub fn layers(&self) -> usize {
        self.edges.iter().map(|e| e.layer + 1).max().unwrap_or(0)
    }

    /// Distinct features kept at `layer`, ascending.
    pub fn selected(&self, layer: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.edges.iter().filter(|e| e.layer == layer).map(|e| e.child).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Text form: two `#` header lines, then `layer,parent,child,score` per edge.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# class={} truncated={}\n# layer,parent,child,score\n", self.class, self.truncated);
        for e in &self.edges {
            writeln!(s, "{},{},{},{:.6}", e.layer, e.parent, e.child, e.score).expect("write to string");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut class = None;
        let mut truncated = false;
        let mut edges = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("class", v)) => class = Some(v.parse().map_err(|_| fmt_err(n, "class"))?),
                        Some(("truncated", v)) => truncated = v.parse().map_err(|_| fmt_err(n, "truncated flag"))?,
                        _ => {}
                    }
                }
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(fmt_err(n, "edge with four fields"));
            }
            let int = |i: usize| f[i].trim().parse::<usize>().map_err(|_| fmt_err(n, "integer field"));
            let score = f[3].trim().parse::<f64>().map_err(|_| fmt_err(n, "score"))?;
            edges.push(Edge { layer: int(0)?, parent: int(1)?, child: int(2)?, score });
        }
        let class = class.ok_or_else(|| Error::Format("report lacks a class header".into()))?;
        Ok(PyramidReport { class, edges, truncated, elapsed: Duration::ZERO })
    }
}

fn fmt_err(line: usize, what: &str) -> Error {
    Error::Format(format!("edge report line {}: expected {what}", line + 1))
}

/// Walk back from `class` through `blocks` (listed input to output).
///
/// Layer 0 scores the channels of `final_activation: [C', ...]` against the
/// class's prediction weights. Each later layer back-steps through one stage of
/// every branch of the current block; features reached by any branch are kept
/// for the block below.
pub fn backstep_traverse(
    blocks: &[TraceBlock],
    head_weights: &Tensor,
    final_activation: &Tensor,
    class: usize,
    cfg: &BackstepConfig,
) -> Result<PyramidReport> {
    let start = std::time::Instant::now();
    let [n, c_last] = head_weights.dims2("prediction weights")?;
    if class >= n {
        return arg_err(format!("class {class} out of range for {n} classes"));
    }
    let head = head_weights.reshape(vec![n, c_last, 1])?;
    let root_scores = backstep_layer(final_activation, &head, &[class], cfg.mode)?;
    let mut edges = Vec::new();
    let mut parents = Vec::new();
    for j in select_features(&root_scores[0], cfg.threshold) {
        edges.push(Edge { layer: 0, parent: class, child: j, score: printed(root_scores[0][j]) });
        parents.push(j);
    }

    let adapted: Vec<Vec<Vec<Stage>>> =
        blocks.iter().map(|b| adapt_block(b.kind, b.branches.clone())).collect::<Result<_>>()?;
    let available = 1 + adapted.iter().map(|b| b[0].len()).sum::<usize>();
    let truncated = cfg.depth > available;
    let mut layer = 1;
    'blocks: for block in adapted.iter().rev() {
        let depth = block[0].len();
        let mut fronts: Vec<Vec<usize>> = vec![parents.clone(); block.len()];
        for s in (0..depth).rev() {
            if layer >= cfg.depth {
                break 'blocks;
            }
            for (b, branch) in block.iter().enumerate() {
                fronts[b] = step(&branch[s], &fronts[b], layer, cfg, &mut edges)?;
            }
            layer += 1;
        }
        let mut merged: Vec<usize> = fronts.into_iter().flatten().collect();
        merged.sort_unstable();
        merged.dedup();
        parents = merged;
    }
    Ok(PyramidReport { class, edges, truncated, elapsed: start.elapsed() })
}

fn step(stage: &Stage, parents: &[usize], layer: usize, cfg: &BackstepConfig, edges: &mut Vec<Edge>) -> Result<Vec<usize>> {
    let vectors = backstep_layer(&stage.input, &stage.kernels, parents, cfg.mode)?;
    let mut children = Vec::new();
    match cfg.mode {
        TraversalMode::FeatureWise => {
            for (&p, v) in parents.iter().zip(&vectors) {
                for j in select_features(v, cfg.threshold) {
                    edges.push(Edge { layer, parent: p, child: j, score: printed(v[j]) });
                    children.push(j);
                }
            }
        }
        TraversalMode::LayerWise => {
            if let Some(v) = vectors.first() {
                let kept = select_features(v, cfg.threshold);
                for &p in parents {
                    for &j in &kept {
                        edges.push(Edge { layer, parent: p, child: j, score: printed(v[j]) });
                    }
                }
                children = kept;
            }
        }
    }
    children.sort_unstable();
    children.dedup();
    Ok(children)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn ramp_is_already_normalised() {
        let a = Tensor::new(vec![5], vec![0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
        assert_eq!(normalized_class_weighting(&a, 1.0), a);
        assert!(normalized_class_weighting(&Tensor::full(vec![3], 2.0), 1.5).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_map_examples() {
        let mut r = rng::stream(1, "cam");
        let a = rng::uniform(&mut r, vec![3, 2, 2, 2], 1.0);
        assert!(class_activation_map(&a, &[0.0; 3]).unwrap().data().iter().all(|&v| v == 0.0));
        let m = class_activation_map(&a, &[0.0, 1.0, 0.0]).unwrap();
        assert!(m.narrow(0, 0..1).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(m.narrow(0, 1..2).unwrap().max() == 1.0);
    }

    #[test]
    fn selection_examples() {
        assert!(select_features(&[0.0, 0.0], 0.6).is_empty());
        assert_eq!(select_features(&[0.7, 0.5], 0.6), vec![0]);
    }

    #[test]
    fn single_channel_tube_is_squared_activation() {
        let a = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        let tube = saliency_tube(&a, &[1.0], 0, 0.0, [1, 2, 2]).unwrap();
        assert_eq!(tube.values.data(), &[0.0, 0.25, 1.0, 0.0625]);
        let none = saliency_tube(&a, &[1.0], 0, 2.0, [2, 4, 4]).unwrap();
        assert!(none.empty && none.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backstep_examples() {
        let a = Tensor::ones(vec![3, 2, 2]);
        let mut k = Tensor::zeros(vec![1, 3, 1, 1, 1]);
        k.set(&[0, 2, 0, 0, 0], 1.0);
        assert_eq!(backstep_layer(&a, &k, &[0], TraversalMode::FeatureWise).unwrap(), vec![vec![0.0, 0.0, 1.0]]);
        let flat = Tensor::ones(vec![2, 3, 1, 1, 1]);
        let v = backstep_layer(&a, &flat, &[0, 1], TraversalMode::LayerWise).unwrap();
        assert_eq!(v, vec![vec![0.0; 3]]);
    }

    #[test]
    fn single_group_inflation_is_identity() {
        let mut r = rng::stream(2, "inflate");
        let k = rng::uniform(&mut r, vec![4, 3, 1, 1, 1], 1.0);
        assert_eq!(inflate_groups(&k, 3, 1).unwrap(), k);
        let g = inflate_groups(&Tensor::ones(vec![4, 1, 1, 1, 1]), 2, 2).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn short_branch_gains_identity_stage() {
        let s = |k: usize, c: usize| Stage { kernels: Tensor::ones(vec![k, c, 1, 1, 1]), input: Tensor::ones(vec![c, 2]) };
        let out = adapt_block(BlockKind::Branched, vec![vec![s(3, 2), s(4, 3)], vec![s(4, 2)]]).unwrap();
        assert_eq!(out[1].len(), 2);
        assert_eq!(out[1][0], Stage::identity(2));
        let res = adapt_block(BlockKind::Residual, vec![vec![s(2, 2), s(2, 2)]]).unwrap();
        assert_eq!(res.len(), 2);
        assert!(res[1].iter().all(|st| *st == Stage::identity(2)));
    }

    #[test]
    fn report_round_trip() {
        let report = PyramidReport {
            class: 1,
            edges: vec![Edge { layer: 0, parent: 1, child: 3, score: 1.0 }, Edge { layer: 1, parent: 3, child: 0, score: printed(0.7123456) }],
            truncated: true,
            elapsed: Duration::from_millis(3),
        };
        assert_eq!(PyramidReport::parse(&report.to_csv()).unwrap(), report);
    }
}
