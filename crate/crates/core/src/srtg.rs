//! Squeeze-and-Recursion temporal gates: recurrent attention over spatially
//! squeezed frames, fused into the volume only when the attended and original
//! frame embeddings are cycle-consistent, plus residual blocks that insert the
//! gate at one of six points.

use rand::Rng;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::layers::{relu, relu_backward, ConvUnit, ConvUnitCache, Mode};
use crate::recurrence::{run_sequence_backward, run_sequence_cached, CellKind, RecurrentStack, SequenceCache};
use crate::tensor::{squeeze_spatial, squeeze_spatial_backward, EmbeddingSequence, Tensor};

/// Soft match of a query against a bank of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMatch {
    /// Softmax of negative squared distances; a probability vector.
    pub weights: Vec<f64>,
    /// Weighted sum of the bank frames.
    pub point: Vec<f64>,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn soft_nearest_neighbour(query: &[f64], bank: &[Vec<f64>]) -> Result<SoftMatch> {
    if bank.is_empty() {
        return arg_err("soft nearest neighbour over an empty bank");
    }
    if bank.iter().any(|f| f.len() != query.len()) {
        return shape_err("soft nearest neighbour: bank frames differ in width from the query");
    }
    let logits: Vec<f64> = bank.iter().map(|f| -squared_distance(query, f)).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let weights: Vec<f64> = e.into_iter().map(|v| v / z).collect();
    let mut point = vec![0.0; query.len()];
    for (w, f) in weights.iter().zip(bank) {
        for (p, v) in point.iter_mut().zip(f) {
            *p += w * v;
        }
    }
    Ok(SoftMatch { weights, point })
}

/// Index of the bank frame closest to `point`, ties to the lowest index.
pub fn nn_index(point: &[f64], bank: &[Vec<f64>]) -> Result<usize> {
    if bank.is_empty() {
        return arg_err("nearest neighbour over an empty bank");
    }
    let mut best = (0, f64::INFINITY);
    for (i, f) in bank.iter().enumerate() {
        let d = squared_distance(point, f);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

/// Per batch item: where each frame of one sequence lands in the other.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub consistent: Vec<bool>,
    /// `forward[b][t]`: index in B matched by A's frame `t`.
    pub forward: Vec<Vec<usize>>,
    /// `backward[b][t]`: index in A matched by B's frame `t`.
    pub backward: Vec<Vec<usize>>,
    /// Squared distance from each forward soft point to its matched frame.
    pub distances: Vec<Vec<f64>>,
}

fn match_map(from: &[Vec<f64>], to: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut idx = Vec::with_capacity(from.len());
    let mut dist = Vec::with_capacity(from.len());
    for q in from {
        let soft = soft_nearest_neighbour(q, to)?;
        let i = nn_index(&soft.point, to)?;
        dist.push(squared_distance(&soft.point, &to[i]));
        idx.push(i);
    }
    Ok((idx, dist))
}

/// Consistent iff every frame maps to its own time index in both directions.
pub fn cyclic_consistent(a: &EmbeddingSequence, b: &EmbeddingSequence) -> Result<ConsistencyReport> {
    if a.batch() != b.batch() || a.frames() != b.frames() || a.channels() != b.channels() {
        return shape_err(format!(
            "cyclic consistency between {:?} and {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        ));
    }
    let mut report = ConsistencyReport { consistent: vec![], forward: vec![], backward: vec![], distances: vec![] };
    for bi in 0..a.batch() {
        let (fa, fb) = (a.frames_of(bi), b.frames_of(bi));
        let (fwd, dist) = match_map(&fa, &fb)?;
        let (bwd, _) = match_map(&fb, &fa)?;
        let identity = |m: &[usize]| m.iter().enumerate().all(|(t, &i)| t == i);
        report.consistent.push(identity(&fwd) && identity(&bwd));
        report.forward.push(fwd);
        report.backward.push(bwd);
        report.distances.push(dist);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateState {
    Inactive,
    ActiveClosed,
    ActiveOpen,
}

impl GateState {
    pub fn name(self) -> &'static str {
        match self {
            GateState::Inactive => "inactive",
            GateState::ActiveClosed => "closed",
            GateState::ActiveOpen => "open",
        }
    }
}

/// How the gate decides. `ForceOpen`/`ForceClosed` skip the consistency test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateControl {
    Disabled,
    Enabled,
    ForceOpen,
    ForceClosed,
}

/// Runs the stack over the squeezed volume and multiplies the hidden states back in.
pub fn recursion_attention(a: &Tensor, stack: &RecurrentStack) -> Result<(EmbeddingSequence, Tensor)> {
    let (h, _) = run_sequence_cached(stack, &squeeze_spatial(a)?)?;
    let a_star = crate::tensor::broadcast_mul(a, h.tensor())?;
    Ok((h, a_star))
}

/// Chooses per item between `a_star` (open) and `a` (closed).
pub fn temporal_gate(a: &Tensor, h: &EmbeddingSequence, a_star: &Tensor, enabled: bool) -> Result<(Tensor, Vec<GateState>)> {
    let b = a.dims5("temporal_gate")?[0];
    a_star.expect_shape(a.shape(), "temporal_gate attended volume")?;
    if !enabled {
        return Ok((a.clone(), vec![GateState::Inactive; b]));
    }
    let report = cyclic_consistent(&squeeze_spatial(a)?, h)?;
    let states: Vec<GateState> =
        report.consistent.iter().map(|&c| if c { GateState::ActiveOpen } else { GateState::ActiveClosed }).collect();
    Ok((select_items(a, a_star, &states), states))
}

fn select_items(closed: &Tensor, open: &Tensor, states: &[GateState]) -> Tensor {
    let item = closed.len() / states.len();
    let mut out = closed.clone();
    for (bi, s) in states.iter().enumerate() {
        if *s == GateState::ActiveOpen {
            out.data_mut()[bi * item..(bi + 1) * item].copy_from_slice(&open.data()[bi * item..(bi + 1) * item]);
        }
    }
    out
}

/// Recurrent attention with its temporal gate. The stack reads the squeezed
/// `source` volume; its hidden states scale the `target` volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SrModule {
    pub stack: RecurrentStack,
    pub control: GateControl,
}

#[derive(Debug, Clone)]
pub struct SrCache {
    source_hw: [usize; 2],
    target: Tensor,
    h: Option<(Tensor, SequenceCache)>,
    pub states: Vec<GateState>,
}

impl SrModule {
    pub fn init(kind: CellKind, layers: usize, source_ch: usize, target_ch: usize, control: GateControl, rng: &mut impl Rng) -> Self {
        SrModule { stack: RecurrentStack::init(kind, layers, source_ch, target_ch, rng), control }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.stack.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.stack.params_mut()
    }

    pub fn forward(&self, source: &Tensor, target: &Tensor) -> Result<(Tensor, SrCache)> {
        let [sb, _, st, sh, sw] = source.dims5("attention source")?;
        let [b, c, t, _, _] = target.dims5("attention target")?;
        if sb != b || st != t {
            return shape_err(format!("attention source {:?} and target {:?} disagree", source.shape(), target.shape()));
        }
        if self.stack.hidden_width() != c {
            return shape_err(format!("recurrent hidden width {} cannot scale {c} channels", self.stack.hidden_width()));
        }
        if self.control == GateControl::Disabled {
            let cache = SrCache { source_hw: [sh, sw], target: target.clone(), h: None, states: vec![GateState::Inactive; b] };
            return Ok((target.clone(), cache));
        }
        let (h, seq) = run_sequence_cached(&self.stack, &squeeze_spatial(source)?)?;
        let a_star = crate::tensor::broadcast_mul(target, h.tensor())?;
        let (out, states) = match self.control {
            GateControl::Enabled => temporal_gate(target, &h, &a_star, true)?,
            GateControl::ForceOpen => (a_star, vec![GateState::ActiveOpen; b]),
            GateControl::ForceClosed => (target.clone(), vec![GateState::ActiveClosed; b]),
            GateControl::Disabled => unreachable!(),
        };
        let cache = SrCache { source_hw: [sh, sw], target: target.clone(), h: Some((h.into_tensor(), seq)), states };
        Ok((out, cache))
    }

    /// Returns `(d_source, d_target, stack gradients)`. Closed items pass the
    /// gradient straight to the target; the gate decision itself is not differentiated.
    pub fn backward(&self, cache: &SrCache, grad: &Tensor) -> Result<(Tensor, Tensor, Vec<Tensor>)> {
        let [b, _, t, _, _] = cache.target.dims5("attention target")?;
        let in_ch = self.stack.input_width();
        let [sh, sw] = cache.source_hw;
        let zero_source = || Tensor::zeros(vec![b, in_ch, t, sh, sw]);
        let Some((h, seq)) = &cache.h else {
            let grads = self.params().into_iter().map(Tensor::zeros_like).collect();
            return Ok((zero_source(), grad.clone(), grads));
        };
        let (da, mut dh) = crate::tensor::broadcast_mul_backward(&cache.target, h, grad)?;
        let d_target = select_items(grad, &da, &cache.states);
        let per_item = dh.len() / b;
        for (bi, s) in cache.states.iter().enumerate() {
            if *s != GateState::ActiveOpen {
                dh.data_mut()[bi * per_item..(bi + 1) * per_item].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (dseq, stack_grads) = run_sequence_backward(&self.stack, seq, &dh)?;
        let d_source = squeeze_spatial_backward(&dseq, sh, sw)?;
        Ok((d_source, d_target, stack_grads.params().into_iter().cloned().collect()))
    }

    /// FLOPs on a `[T, H, W]` clip: squeeze, recurrence, the consistency test
    /// and the broadcast multiply. Exponentials and divisions count 1 each.
    pub fn flops(&self, source_ch: usize, target_ch: usize, extents: [usize; 3]) -> u64 {
        if self.control == GateControl::Disabled {
            return 0;
        }
        let [t, h, w] = extents.map(|e| e as u64);
        let squeeze = source_ch as u64 * t * h * w;
        let rec_macs = self.stack.step_macs() as u64 * t;
        let rec_elementwise: u64 =
            self.stack.layers.iter().map(|l| 8 * l.hidden as u64 * l.kind.gate_count() as u64).sum::<u64>() * t;
        let c = target_ch as u64;
        // both directions: T queries against T frames, distances, softmax, soft point, hard match
        let consistency = 2 * t * (t * 3 * c + 3 * t + 2 * t * c + t * 3 * c);
        let target_squeeze = c * t * h * w;
        let multiply = c * t * h * w;
        squeeze + 2 * rec_macs + rec_elementwise + consistency + target_squeeze + multiply
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3×3×3 convolutions without a skip connection.
    Plain,
    /// Two 3×3×3 convolutions with a skip connection.
    Simple,
    /// 1×1×1, 3×3×3, 1×1×1 convolutions with a skip connection.
    Bottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Start,
    Top,
    Mid,
    End,
    Res,
    Final,
}

impl Placement {
    pub const ALL: [Placement; 6] =
        [Placement::Start, Placement::Top, Placement::Mid, Placement::End, Placement::Res, Placement::Final];

    pub fn parse(s: &str) -> Result<Option<Self>> {
        Ok(Some(match s {
            "none" => return Ok(None),
            "start" => Placement::Start,
            "top" => Placement::Top,
            "mid" => Placement::Mid,
            "end" => Placement::End,
            "res" => Placement::Res,
            "final" => Placement::Final,
            other => return arg_err(format!("unknown SRTG placement {other:?}")),
        }))
    }

    pub fn name(self) -> &'static str {
        match self {
            Placement::Start => "start",
            Placement::Top => "top",
            Placement::Mid => "mid",
            Placement::End => "end",
            Placement::Res => "res",
            Placement::Final => "final",
        }
    }

    pub fn valid_for(self, kind: BlockKind) -> bool {
        match kind {
            BlockKind::Bottleneck => true,
            BlockKind::Simple => !matches!(self, Placement::Top | Placement::End),
            BlockKind::Plain => matches!(self, Placement::Start | Placement::Mid | Placement::Final),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SrtgConfig {
    pub placement: Placement,
    pub block: BlockKind,
}

impl SrtgConfig {
    pub fn new(placement: Placement, block: BlockKind) -> Result<Self> {
        if !placement.valid_for(block) {
            return arg_err(format!("SRTG placement {} is not available for {block:?} blocks", placement.name()));
        }
        Ok(SrtgConfig { placement, block })
    }
}

/// Where the gate sits in the block's dataflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tap {
    Input,
    /// After convolution `k`; `from_prev` reads the attention source from convolution `k − 1`.
    AfterConv { k: usize, from_prev: bool },
    Skip,
    Output,
}

fn tap_of(p: Placement, kind: BlockKind) -> Tap {
    match (p, kind) {
        (Placement::Start, _) => Tap::Input,
        (Placement::Top, _) => Tap::AfterConv { k: 1, from_prev: true },
        (Placement::Mid, BlockKind::Bottleneck) => Tap::AfterConv { k: 1, from_prev: false },
        (Placement::Mid, _) => Tap::AfterConv { k: 0, from_prev: false },
        (Placement::End, _) => Tap::AfterConv { k: 2, from_prev: false },
        (Placement::Res, _) => Tap::Skip,
        (Placement::Final, _) => Tap::Output,
    }
}

/// A convolutional block with an optional SRTG insertion.
#[derive(Debug, Clone, PartialEq)]
pub struct SrtgBlock {
    pub kind: BlockKind,
    pub convs: Vec<ConvUnit>,
    /// 1×1×1 projection on the skip path when input and output widths differ.
    pub projection: Option<ConvUnit>,
    pub sr: Option<(Placement, SrModule)>,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    input: Tensor,
    convs: Vec<ConvUnitCache>,
    projection: Option<ConvUnitCache>,
    sr: Option<SrCache>,
    has_skip: bool,
    out_relu: Tensor,
    pub gate_states: Vec<GateState>,
}

impl SrtgBlock {
    /// Randomly initialised block for `channels = [in, mid, out]`. The SR stack
    /// is an LSTM with `sr_layers` layers.
    pub fn init(
        kind: BlockKind,
        channels: [usize; 3],
        srtg: Option<(Placement, GateControl)>,
        sr_layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let [cin, mid, cout] = channels;
        if channels.contains(&0) {
            return arg_err(format!("block channels must be positive, got {channels:?}"));
        }
        let convs = match kind {
            BlockKind::Plain => vec![
                ConvUnit::init(mid, cin, [3, 3, 3], true, true, rng),
                ConvUnit::init(cout, mid, [3, 3, 3], true, true, rng),
            ],
            BlockKind::Simple => vec![
                ConvUnit::init(mid, cin, [3, 3, 3], true, true, rng),
                ConvUnit::init(cout, mid, [3, 3, 3], true, false, rng),
            ],
            BlockKind::Bottleneck => vec![
                ConvUnit::init(mid, cin, [1, 1, 1], true, true, rng),
                ConvUnit::init(mid, mid, [3, 3, 3], true, true, rng),
                ConvUnit::init(cout, mid, [1, 1, 1], true, false, rng),
            ],
        };
        let projection =
            (kind != BlockKind::Plain && cin != cout).then(|| ConvUnit::init(cout, cin, [1, 1, 1], true, false, rng));
        let sr = match srtg {
            None => None,
            Some((p, control)) => {
                SrtgConfig::new(p, kind)?;
                let (src, tgt) = match tap_of(p, kind) {
                    Tap::Input => (cin, cin),
                    Tap::AfterConv { k, from_prev: true } => (convs[k - 1].out_channels(), convs[k].out_channels()),
                    Tap::AfterConv { k, .. } => (convs[k].out_channels(), convs[k].out_channels()),
                    Tap::Skip | Tap::Output => (cout, cout),
                };
                Some((p, SrModule::init(CellKind::Lstm, sr_layers, src, tgt, control, rng)))
            }
        };
        Ok(SrtgBlock { kind, convs, projection, sr })
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().map_or(0, ConvUnit::out_channels)
    }

    pub fn set_gate(&mut self, control: GateControl) {
        if let Some((_, sr)) = &mut self.sr {
            sr.control = control;
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.convs.iter().flat_map(ConvUnit::params).collect();
        if let Some(u) = &self.projection {
            p.extend(u.params());
        }
        if let Some((_, sr)) = &self.sr {
            p.extend(sr.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.convs.iter_mut().flat_map(ConvUnit::params_mut).collect();
        if let Some(u) = &mut self.projection {
            p.extend(u.params_mut());
        }
        if let Some((_, sr)) = &mut self.sr {
            p.extend(sr.params_mut());
        }
        p
    }

    fn tap(&self) -> Option<(Tap, &SrModule)> {
        self.sr.as_ref().map(|(p, m)| (tap_of(*p, self.kind), m))
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BlockCache)> {
        let tap = self.tap();
        let mut sr_cache = None;
        let mut cur = x.clone();
        if let Some((Tap::Input, m)) = tap {
            let (y, c) = m.forward(x, x)?;
            cur = y;
            sr_cache = Some(c);
        }
        let mut conv_caches: Vec<ConvUnitCache> = Vec::with_capacity(self.convs.len());
        for (k, unit) in self.convs.iter().enumerate() {
            let (y, c) = unit.forward(&cur, mode.norm)?;
            cur = y;
            conv_caches.push(c);
            if let Some((Tap::AfterConv { k: tk, from_prev }, m)) = tap {
                if tk == k {
                    let source = if from_prev { conv_caches[k - 1].output().clone() } else { cur.clone() };
                    let (y, c) = m.forward(&source, &cur)?;
                    cur = y;
                    sr_cache = Some(c);
                }
            }
        }
        let (has_skip, proj_cache) = if self.kind == BlockKind::Plain {
            (false, None)
        } else {
            let (mut skip, proj_cache) = match &self.projection {
                Some(u) => {
                    let (y, c) = u.forward(x, mode.norm)?;
                    (y, Some(c))
                }
                None => (x.clone(), None),
            };
            if let Some((Tap::Skip, m)) = tap {
                let (y, c) = m.forward(&skip, &skip)?;
                skip = y;
                sr_cache = Some(c);
            }
            cur = relu(&cur.add(&skip)?);
            (true, proj_cache)
        };
        let out_relu = cur.clone();
        if let Some((Tap::Output, m)) = tap {
            let (y, c) = m.forward(&cur, &cur)?;
            cur = y;
            sr_cache = Some(c);
        }
        let gate_states = sr_cache.as_ref().map(|c| c.states.clone()).unwrap_or_default();
        if !cur.all_finite() {
            return Err(Error::Numerical("non-finite block output".into()));
        }
        let cache = BlockCache { input: x.clone(), convs: conv_caches, projection: proj_cache, sr: sr_cache, has_skip, out_relu, gate_states };
        Ok((cur, cache))
    }

    /// Returns `(dx, parameter gradients in params() order)`.
    pub fn backward(&self, cache: &BlockCache, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let tap = self.tap();
        let mut sr_grads: Vec<Tensor> = Vec::new();
        let sr_step = |m: &SrModule, g: &Tensor| -> Result<(Tensor, Tensor, Vec<Tensor>)> {
            m.backward(cache.sr.as_ref().expect("SR cache recorded"), g)
        };
        let mut g = grad.clone();
        if let Some((Tap::Output, m)) = tap {
            let (ds, dt, sg) = sr_step(m, &g)?;
            g = ds.add(&dt)?;
            sr_grads = sg;
        }
        let mut dx = Tensor::zeros_like(&cache.input);
        let mut proj_grads = Vec::new();
        if cache.has_skip {
            g = relu_backward(&cache.out_relu, &g)?;
            let mut gskip = g.clone();
            if let Some((Tap::Skip, m)) = tap {
                let (ds, dt, sg) = sr_step(m, &gskip)?;
                gskip = ds.add(&dt)?;
                sr_grads = sg;
            }
            match (&self.projection, &cache.projection) {
                (Some(u), Some(c)) => {
                    let (d, pg) = u.backward(c, &gskip)?;
                    dx.add_assign(&d)?;
                    proj_grads = pg;
                }
                _ => dx.add_assign(&gskip)?,
            }
        }
        let mut conv_grads = vec![Vec::new(); self.convs.len()];
        // gradient reaching conv k's output from an attention source read at k + 1
        let mut pending_source: Option<(usize, Tensor)> = None;
        for k in (0..self.convs.len()).rev() {
            if let Some((Tap::AfterConv { k: tk, from_prev }, m)) = tap {
                if tk == k {
                    let (ds, dt, sg) = sr_step(m, &g)?;
                    sr_grads = sg;
                    if from_prev {
                        g = dt;
                        pending_source = Some((k - 1, ds));
                    } else {
                        g = ds.add(&dt)?;
                    }
                }
            }
            if let Some((pk, ds)) = &pending_source {
                if *pk == k {
                    g.add_assign(ds)?;
                }
            }
            let (d, cg) = self.convs[k].backward(&cache.convs[k], &g)?;
            conv_grads[k] = cg;
            g = d;
        }
        if let Some((Tap::Input, m)) = tap {
            let (ds, dt, sg) = sr_step(m, &g)?;
            g = ds.add(&dt)?;
            sr_grads = sg;
        }
        dx.add_assign(&g)?;
        let mut grads: Vec<Tensor> = conv_grads.into_iter().flatten().collect();
        grads.extend(proj_grads);
        if let Some((_, module)) = &self.sr {
            if sr_grads.is_empty() {
                sr_grads = module.params().into_iter().map(Tensor::zeros_like).collect();
            }
            grads.extend(sr_grads);
        }
        Ok((dx, grads))
    }

    /// Convolution multiply-adds plus the residual sum, per clip.
    pub fn plain_flops(&self, extents: [usize; 3]) -> u64 {
        let vol: u64 = extents.iter().product::<usize>() as u64;
        let convs: u64 = self.convs.iter().map(|u| 2 * u.macs(extents) as u64).sum();
        let proj = self.projection.as_ref().map_or(0, |u| 2 * u.macs(extents) as u64);
        let sum = if self.kind == BlockKind::Plain { 0 } else { self.out_channels() as u64 * vol };
        convs + proj + sum
    }

    /// FLOPs of the SRTG insertion alone.
    pub fn srtg_flops(&self, extents: [usize; 3]) -> u64 {
        match &self.sr {
            None => 0,
            Some((_, m)) => m.flops(m.stack.input_width(), m.stack.hidden_width(), extents),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::NormMode;
    use crate::pooling::BackwardMode;
    use crate::rng;
    use crate::tensor::{finite_difference_grad, max_relative_error};

    const FROZEN: Mode = Mode { norm: NormMode::Frozen, pool_backward: BackwardMode::ExactAutodiff };

    #[test]
    fn dominant_match() {
        let bank = vec![vec![0.0, 0.0], vec![50.0, 0.0], vec![0.0, 50.0]];
        let m = soft_nearest_neighbour(&[0.0, 0.0], &bank).unwrap();
        assert!((m.weights[0] - 1.0).abs() < 1e-12);
        assert!(m.point.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn equidistant_points_average() {
        let bank = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let m = soft_nearest_neighbour(&[0.0, 0.0], &bank).unwrap();
        assert!(m.point.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(nn_index(&m.point, &bank).unwrap(), 0);
        assert!(soft_nearest_neighbour(&[0.0], &[]).is_err());
    }

    #[test]
    fn identical_sequences_are_consistent() {
        let e = EmbeddingSequence::from_frames(&[vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 3.0]]]).unwrap();
        assert!(cyclic_consistent(&e, &e).unwrap().consistent[0]);
    }

    #[test]
    fn swapped_frames_break_consistency() {
        let a = EmbeddingSequence::from_frames(&[vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 3.0]]]).unwrap();
        let b = EmbeddingSequence::from_frames(&[vec![vec![3.0, 0.0], vec![0.0, 0.0], vec![0.0, 3.0]]]).unwrap();
        let r = cyclic_consistent(&a, &b).unwrap();
        assert!(!r.consistent[0]);
        assert_eq!(r.forward[0], vec![1, 0, 2]);
    }

    #[test]
    fn gate_open_closed_inactive() {
        // frames 3·(t, −t) apart, well separated
        let a = Tensor::from_fn(vec![1, 2, 3, 2, 2], |i| {
            let (c, t) = (i / 12, (i / 4) % 3);
            if c == 0 { 3.0 * t as f64 } else { -3.0 * t as f64 }
        });
        let h = squeeze_spatial(&a).unwrap();
        let a_star = crate::tensor::broadcast_mul(&a, h.tensor()).unwrap();
        let (out, s) = temporal_gate(&a, &h, &a_star, true).unwrap();
        assert_eq!(s, vec![GateState::ActiveOpen]);
        assert_eq!(out, a_star);
        let (out, s) = temporal_gate(&a, &h, &a_star, false).unwrap();
        assert_eq!((out, s), (a.clone(), vec![GateState::Inactive]));
    }

    #[test]
    fn invalid_pairings_rejected() {
        let mut r = rng::stream(1, "pair");
        for p in [Placement::Top, Placement::End] {
            assert!(SrtgBlock::init(BlockKind::Simple, [2, 2, 2], Some((p, GateControl::Enabled)), 2, &mut r).is_err());
        }
    }

    #[test]
    fn all_placements_keep_shape() {
        let mut r = rng::stream(2, "shape");
        let x = rng::uniform(&mut r, vec![2, 3, 4, 3, 3], 1.0);
        for p in Placement::ALL {
            let block = SrtgBlock::init(BlockKind::Bottleneck, [3, 2, 4], Some((p, GateControl::Enabled)), 2, &mut r).unwrap();
            assert_eq!(block.forward(&x, FROZEN).unwrap().0.shape(), &[2, 4, 4, 3, 3], "{p:?}");
        }
    }

    #[test]
    fn closed_final_gate_equals_plain_block() {
        let mut r = rng::stream(3, "closed");
        let block = SrtgBlock::init(BlockKind::Simple, [2, 3, 2], Some((Placement::Final, GateControl::ForceClosed)), 2, &mut r).unwrap();
        let mut plain = block.clone();
        plain.sr = None;
        let x = rng::uniform(&mut r, vec![1, 2, 4, 3, 3], 1.0);
        assert_eq!(block.forward(&x, FROZEN).unwrap().0, plain.forward(&x, FROZEN).unwrap().0);
    }

    fn gradient_check(kind: BlockKind, placement: Placement, control: GateControl) {
        let mut r = rng::stream(9, placement.name());
        let block = SrtgBlock::init(kind, [2, 3, 3], Some((placement, control)), 2, &mut r).unwrap();
        let x = rng::uniform(&mut r, vec![1, 2, 4, 3, 3], 1.0);
        let (y, cache) = block.forward(&x, FROZEN).unwrap();
        let up = rng::uniform(&mut r, y.shape().to_vec(), 1.0);
        let (dx, grads) = block.backward(&cache, &up).unwrap();
        let fd = finite_difference_grad(|p| block.forward(p, FROZEN).unwrap().0.dot(&up).unwrap(), &x, 1e-5);
        let e = max_relative_error(&dx, &fd, 1e-4);
        assert!(e < 1e-4, "{kind:?} {placement:?} input {e}");
        for (k, g) in grads.iter().enumerate() {
            let fd = finite_difference_grad(
                |p| {
                    let mut b = block.clone();
                    *b.params_mut()[k] = p.clone();
                    b.forward(&x, FROZEN).unwrap().0.dot(&up).unwrap()
                },
                block.params()[k],
                1e-5,
            );
            let e = max_relative_error(g, &fd, 1e-4);
            assert!(e < 1e-4, "{kind:?} {placement:?} param {k}: {e}");
        }
    }

    #[test]
    fn open_gate_gradients_every_placement() {
        for p in Placement::ALL {
            gradient_check(BlockKind::Bottleneck, p, GateControl::ForceOpen);
        }
        gradient_check(BlockKind::Simple, Placement::Mid, GateControl::ForceOpen);
        gradient_check(BlockKind::Plain, Placement::Start, GateControl::ForceOpen);
    }

    #[test]
    fn closed_and_disabled_gradients() {
        gradient_check(BlockKind::Simple, Placement::Res, GateControl::ForceClosed);
        gradient_check(BlockKind::Simple, Placement::Final, GateControl::Disabled);
    }

    #[test]
    fn res_open_equals_manual_composition() {
        let mut r = rng::stream(6, "res");
        let block = SrtgBlock::init(BlockKind::Simple, [2, 2, 2], Some((Placement::Res, GateControl::ForceOpen)), 2, &mut r).unwrap();
        let x = rng::uniform(&mut r, vec![1, 2, 4, 2, 2], 1.0);
        let (y, _) = block.forward(&x, FROZEN).unwrap();
        let (a, _) = block.convs[0].forward(&x, NormMode::Frozen).unwrap();
        let (main, _) = block.convs[1].forward(&a, NormMode::Frozen).unwrap();
        let (_, a_star) = recursion_attention(&x, &block.sr.as_ref().unwrap().1.stack).unwrap();
        assert_eq!(y, relu(&main.add(&a_star).unwrap()));
    }
}
