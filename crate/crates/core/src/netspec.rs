//! Declarative toy networks: a line-oriented block description, the network it
//! builds, FLOP counting, a synthetic motion dataset, a small SGD training loop
//! and activation recording.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::classreg::{validate_schedule, ClassReg, ClassRegCache};
use crate::error::{arg_err, Error, Result};
use crate::interpret::{BlockKind as TraceKind, Stage, TraceBlock};
use crate::layers::{
    argmax_rows, global_avg_pool, global_avg_pool_backward, softmax_cross_entropy, Linear, Mode, NormMode,
};
use crate::mtconv::{MtBlock, MtBlockCache};
use crate::pooling::{BackwardMode, PoolConfig};
use crate::rng;
use crate::schedule::LrSchedule;
use crate::srtg::{BlockCache, BlockKind, GateControl, GateState, Placement, SrtgBlock};
use crate::tensor::io::Bundle;
use crate::tensor::Tensor;

/// Depth of every recurrent stack inside a block.
pub const SR_LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockType {
    Plain,
    Residual,
    Bottleneck,
    MtConv,
}

impl BlockType {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(BlockType::Plain),
            "residual" => Ok(BlockType::Residual),
            "bottleneck" => Ok(BlockType::Bottleneck),
            "mtconv" => Ok(BlockType::MtConv),
            _ => arg_err(format!("unknown block kind {s:?}; expected plain, residual, bottleneck or mtconv")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockType::Plain => "plain",
            BlockType::Residual => "residual",
            BlockType::Bottleneck => "bottleneck",
            BlockType::MtConv => "mtconv",
        }
    }

    fn conv_kind(self) -> Option<BlockKind> {
        match self {
            BlockType::Plain => Some(BlockKind::Plain),
            BlockType::Residual => Some(BlockKind::Simple),
            BlockType::Bottleneck => Some(BlockKind::Bottleneck),
            BlockType::MtConv => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockType,
    /// `[in, mid, out]`.
    pub channels: [usize; 3],
    pub srtg: Option<Placement>,
    pub delta: Option<f64>,
    pub classreg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub blocks: Vec<BlockSpec>,
    pub classes: usize,
}

fn parse_ratio(s: &str) -> Result<Option<f64>> {
    if s == "none" {
        return Ok(None);
    }
    let value = match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().or_else(|_| arg_err(format!("bad numerator in {s:?}")))?;
            let d: f64 = d.trim().parse().or_else(|_| arg_err(format!("bad denominator in {s:?}")))?;
            if d == 0.0 {
                return arg_err(format!("zero denominator in {s:?}"));
            }
            n / d
        }
        None => s.parse().or_else(|_| arg_err(format!("expected a number, a fraction or none, got {s:?}")))?,
    };
    Ok(Some(value))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

impl NetSpec {
    /// Parses one block per line, `key=value` fields separated by whitespace.
    /// `#` starts a comment. A line holding only `classes=<n>` sets the head width
    /// (two classes otherwise).
    pub fn parse(text: &str) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut classes = 2;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let ctx = |e: Error| Error::InvalidArgument(format!("line {}: {e}", n + 1));
            let mut kind = None;
            let mut channels = None;
            let mut srtg = None;
            let mut delta = None;
            let mut classreg = None;
            for field in line.split_whitespace() {
                let (key, value) = field
                    .split_once('=')
                    .ok_or_else(|| ctx(Error::InvalidArgument(format!("expected key=value, got {field:?}"))))?;
                match key {
                    "kind" => kind = Some(BlockType::parse(value).map_err(ctx)?),
                    "channels" => {
                        let parts: Vec<usize> = value
                            .split(':')
                            .map(|p| p.parse::<usize>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| ctx(Error::InvalidArgument(format!("bad channel plan {value:?}"))))?;
                        let plan: [usize; 3] = parts
                            .try_into()
                            .map_err(|_| ctx(Error::InvalidArgument(format!("channel plan {value:?} needs in:mid:out"))))?;
                        channels = Some(plan);
                    }
                    "srtg" => srtg = Placement::parse(value).map_err(ctx)?,
                    "delta" => delta = parse_ratio(value).map_err(ctx)?,
                    "classreg" => classreg = parse_ratio(value).map_err(ctx)?,
                    "classes" => {
                        classes = value.parse().map_err(|_| ctx(Error::InvalidArgument(format!("bad class count {value:?}"))))?
                    }
                    _ => return Err(ctx(Error::InvalidArgument(format!("unknown field {key:?}")))),
                }
            }
            match (kind, channels) {
                (Some(kind), Some(channels)) => blocks.push(BlockSpec { kind, channels, srtg, delta, classreg }),
                (None, None) if line.starts_with("classes=") => {}
                _ => return Err(ctx(Error::InvalidArgument("a block needs kind and channels".into()))),
            }
        }
        let spec = NetSpec { blocks, classes };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if self.classes != 2 {
            writeln!(s, "classes={}", self.classes).expect("write to string");
        }
        for b in &self.blocks {
            let [i, m, o] = b.channels;
            writeln!(
                s,
                "kind={} channels={i}:{m}:{o} srtg={} delta={} classreg={}",
                b.kind.name(),
                b.srtg.map_or("none", Placement::name),
                fmt_opt(b.delta),
                fmt_opt(b.classreg)
            )
            .expect("write to string");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return arg_err("a network needs at least one block");
        }
        if self.classes < 2 {
            return arg_err(format!("need at least two classes, got {}", self.classes));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels.contains(&0) {
                return arg_err(format!("block {i}: channels must be positive"));
            }
            if i > 0 && self.blocks[i - 1].channels[2] != b.channels[0] {
                return arg_err(format!(
                    "block {i} expects {} input channels but block {} emits {}",
                    b.channels[0],
                    i - 1,
                    self.blocks[i - 1].channels[2]
                ));
            }
            match b.kind.conv_kind() {
                Some(kind) => {
                    if b.delta.is_some() {
                        return arg_err(format!("block {i}: only mtconv blocks take a channel ratio"));
                    }
                    if let Some(p) = b.srtg {
                        if !p.valid_for(kind) {
                            return arg_err(format!("block {i}: placement {} does not exist in a {} block", p.name(), b.kind.name()));
                        }
                    }
                }
                None => {
                    let Some(d) = b.delta else {
                        return arg_err(format!("block {i}: mtconv blocks need a channel ratio"));
                    };
                    crate::mtconv::split_channels(b.channels[1], d)?;
                    if b.srtg.is_some_and(|p| p != Placement::Final) {
                        return arg_err(format!("block {i}: mtconv blocks take srtg=final or none"));
                    }
                }
            }
        }
        let rates: Vec<f64> = self.blocks.iter().filter_map(|b| b.classreg).collect();
        validate_schedule(&rates)
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn input_channels(&self) -> usize {
        self.blocks[0].channels[0]
    }

    pub fn output_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.channels[2])
    }
}

/// Two residual blocks with attention on their outputs.
pub const SRTG_DEMO_SPEC: &str = "\
kind=residual channels=1:4:4 srtg=final delta=none classreg=none
kind=residual channels=4:4:4 srtg=final delta=none classreg=none
";

/// Two multi-temporal blocks splitting their channels evenly.
pub const MTCONV_DEMO_SPEC: &str = "\
kind=mtconv channels=1:4:4 srtg=final delta=1/2 classreg=none
kind=mtconv channels=4:4:4 srtg=final delta=1/2 classreg=none
";

#[derive(Debug, Clone, PartialEq)]
pub enum NetBlock {
    Conv(SrtgBlock),
    Mt(MtBlock),
}

#[derive(Debug, Clone)]
enum NetBlockCache {
    Conv(BlockCache),
    Mt(MtBlockCache),
}

impl NetBlock {
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            NetBlock::Conv(b) => b.params(),
            NetBlock::Mt(b) => b.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            NetBlock::Conv(b) => b.params_mut(),
            NetBlock::Mt(b) => b.params_mut(),
        }
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, NetBlockCache)> {
        Ok(match self {
            NetBlock::Conv(b) => {
                let (y, c) = b.forward(x, mode)?;
                (y, NetBlockCache::Conv(c))
            }
            NetBlock::Mt(b) => {
                let (y, c) = b.forward(x, mode)?;
                (y, NetBlockCache::Mt(c))
            }
        })
    }

    fn backward(&self, cache: &NetBlockCache, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        match (self, cache) {
            (NetBlock::Conv(b), NetBlockCache::Conv(c)) => b.backward(c, grad),
            (NetBlock::Mt(b), NetBlockCache::Mt(c)) => b.backward(c, grad),
            _ => Err(Error::InvalidArgument("block cache does not match the block".into())),
        }
    }

    pub fn set_gate(&mut self, control: GateControl) {
        match self {
            NetBlock::Conv(b) => b.set_gate(control),
            NetBlock::Mt(b) => b.set_gate(control),
        }
    }

    /// `(block without attention, attention)` FLOPs on a `[T, H, W]` clip.
    pub fn flops(&self, extents: [usize; 3]) -> (u64, u64) {
        match self {
            NetBlock::Conv(b) => (b.plain_flops(extents), b.srtg_flops(extents)),
            NetBlock::Mt(b) => (b.base_flops(extents), b.sr_flops(extents)),
        }
    }
}

/// A built network: blocks, optional class regularisation after each block,
/// global average pooling and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub spec: NetSpec,
    pub blocks: Vec<NetBlock>,
    pub classregs: Vec<Option<ClassReg>>,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct NetCache {
    blocks: Vec<NetBlockCache>,
    classregs: Vec<Option<ClassRegCache>>,
    pooled: Tensor,
    extents: [usize; 3],
    /// Output of every block, after class regularisation.
    pub activations: Vec<Tensor>,
}

impl NetCache {
    /// Gate decisions per block (empty where a block has no attention).
    pub fn gate_states(&self) -> Vec<Vec<GateState>> {
        self.blocks
            .iter()
            .map(|c| match c {
                NetBlockCache::Conv(c) => c.gate_states.clone(),
                NetBlockCache::Mt(c) => c.gate_states().to_vec(),
            })
            .collect()
    }

    /// Classes selected by each class-regularised block, per sample.
    pub fn selected_classes(&self) -> Vec<Option<Vec<usize>>> {
        self.classregs.iter().map(|c| c.as_ref().map(|c| c.classes.clone())).collect()
    }
}

impl Net {
    /// Every part draws from its own seeded stream, so adding or removing a
    /// class-regularisation insertion leaves all other initial weights unchanged.
    pub fn build(spec: &NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let pool = PoolConfig::softpool_halving(BackwardMode::PaperWeighted);
        let final_ch = spec.output_channels();
        let mut blocks = Vec::new();
        let mut classregs = Vec::new();
        for (i, b) in spec.blocks.iter().enumerate() {
            let mut r = rng::stream(seed, &format!("block{i}"));
            let control = b.srtg.map(|p| (p, GateControl::Enabled));
            blocks.push(match b.kind.conv_kind() {
                Some(kind) => NetBlock::Conv(SrtgBlock::init(kind, b.channels, control, SR_LAYERS, &mut r)?),
                None => NetBlock::Mt(MtBlock::init(
                    b.channels,
                    b.delta.expect("validated"),
                    control.map(|(_, c)| c),
                    SR_LAYERS,
                    pool,
                    &mut r,
                )?),
            });
            let mut r = rng::stream(seed, &format!("classreg{i}"));
            classregs.push(b.classreg.map(|l| ClassReg::init(b.channels[2], final_ch, l, &mut r)).transpose()?);
        }
        let head = Linear::init(spec.classes, final_ch, &mut rng::stream(seed, "head"));
        Ok(Net { spec: spec.clone(), blocks, classregs, head })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.blocks.iter().flat_map(NetBlock::params).collect();
        p.extend(self.classregs.iter().flatten().flat_map(ClassReg::params));
        p.push(&self.head.weights);
        p.push(&self.head.bias);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.blocks.iter_mut().flat_map(NetBlock::params_mut).collect();
        p.extend(self.classregs.iter_mut().flatten().flat_map(ClassReg::params_mut));
        p.push(&mut self.head.weights);
        p.push(&mut self.head.bias);
        p
    }

    pub fn set_gates(&mut self, control: GateControl) {
        self.blocks.iter_mut().for_each(|b| b.set_gate(control));
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, NetCache)> {
        let [_, c, _, _, _] = x.dims5("network input")?;
        if c != self.spec.input_channels() {
            return Err(Error::Shape(format!("network expects {} input channels, got {c}", self.spec.input_channels())));
        }
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cr_caches = Vec::with_capacity(self.blocks.len());
        let mut activations = Vec::with_capacity(self.blocks.len());
        for (block, cr) in self.blocks.iter().zip(&self.classregs) {
            let (y, cache) = block.forward(&cur, mode)?;
            caches.push(cache);
            cur = match cr {
                Some(cr) => {
                    let (z, c) = cr.forward(&y, &self.head.weights)?;
                    cr_caches.push(Some(c));
                    z
                }
                None => {
                    cr_caches.push(None);
                    y
                }
            };
            activations.push(cur.clone());
        }
        let [_, _, to, ho, wo] = cur.dims5("final activation")?;
        let pooled = global_avg_pool(&cur)?;
        let logits = self.head.forward(&pooled)?;
        if !logits.all_finite() {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        Ok((logits, NetCache { blocks: caches, classregs: cr_caches, pooled, extents: [to, ho, wo], activations }))
    }

    /// Returns `(d_input, gradients in params() order)`.
    pub fn backward(&self, cache: &NetCache, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (d_pooled, head_grads) = self.head.backward(&cache.pooled, grad)?;
        let mut g = global_avg_pool_backward(&d_pooled, cache.extents)?;
        let mut block_grads = vec![Vec::new(); self.blocks.len()];
        let mut cr_grads = vec![Vec::new(); self.blocks.len()];
        for i in (0..self.blocks.len()).rev() {
            if let (Some(cr), Some(c)) = (&self.classregs[i], &cache.classregs[i]) {
                let (d, gr) = cr.backward(c, &g)?;
                g = d;
                cr_grads[i] = gr;
            }
            let (d, gb) = self.blocks[i].backward(&cache.blocks[i], &g)?;
            g = d;
            block_grads[i] = gb;
        }
        let mut grads: Vec<Tensor> = block_grads.into_iter().flatten().collect();
        grads.extend(cr_grads.into_iter().flatten());
        grads.extend(head_grads);
        Ok((g, grads))
    }

    /// Mean cross-entropy, logits and parameter gradients for one batch.
    pub fn loss_and_grads(&self, x: &Tensor, labels: &[usize], mode: Mode) -> Result<(f64, Tensor, Vec<Tensor>)> {
        let (logits, cache) = self.forward(x, mode)?;
        let (loss, g) = softmax_cross_entropy(&logits, labels)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss}")));
        }
        let (_, grads) = self.backward(&cache, &g)?;
        Ok((loss, logits, grads))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockFlops {
    pub base: u64,
    pub attention: u64,
    pub classreg: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.base + self.attention + self.classreg
    }
}

/// Per-clip FLOPs, counting a multiply-add as two.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub blocks: Vec<BlockFlops>,
    pub head: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.blocks.iter().map(BlockFlops::total).sum::<u64>() + self.head
    }

    pub fn total_without_aux(&self) -> u64 {
        self.blocks.iter().map(|b| b.base).sum::<u64>() + self.head
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,base,attention,classreg,total\n");
        for (i, b) in self.blocks.iter().enumerate() {
            writeln!(s, "{i},{},{},{},{}", b.base, b.attention, b.classreg, b.total()).expect("write to string");
        }
        writeln!(s, "head,{},0,0,{}", self.head, self.head).expect("write to string");
        writeln!(s, "total,{},{},{},{}", self.total_without_aux() , self.blocks.iter().map(|b| b.attention).sum::<u64>(), self.blocks.iter().map(|b| b.classreg).sum::<u64>(), self.total())
            .expect("write to string");
        s
    }
}

fn classreg_flops(channels: usize, class_channels: usize, classes: usize, extents: [usize; 3]) -> u64 {
    let (c, cw, n) = (channels as u64, class_channels as u64, classes as u64);
    let vol = extents.iter().product::<usize>() as u64;
    // remap, pooling, class scores, normalisation, channel scaling
    2 * n * c * cw + c * vol + 2 * n * c + 3 * c + c * vol
}

/// FLOPs of a network on one `[T, H, W]` clip; weights do not matter.
pub fn count_flops(spec: &NetSpec, extents: [usize; 3]) -> Result<FlopReport> {
    let net = Net::build(spec, 0)?;
    Ok(net_flops(&net, extents))
}

pub fn net_flops(net: &Net, extents: [usize; 3]) -> FlopReport {
    let final_ch = net.spec.output_channels();
    let blocks = net
        .blocks
        .iter()
        .zip(&net.spec.blocks)
        .map(|(b, s)| {
            let (base, attention) = b.flops(extents);
            let classreg = s.classreg.map_or(0, |_| classreg_flops(s.channels[2], final_ch, net.spec.classes, extents));
            BlockFlops { base, attention, classreg }
        })
        .collect();
    let vol = extents.iter().product::<usize>() as u64;
    let head = final_ch as u64 * vol + 2 * (net.spec.classes * final_ch) as u64;
    FlopReport { blocks, head }
}

/// Clips of a bright square drifting left (class 0) or right (class 1) over a
/// dark, slightly noisy background.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// `[N, 1, T, H, W]`.
    pub clips: Tensor,
    pub labels: Vec<usize>,
    pub seed: u64,
}

pub const NOISE: f64 = 0.05;

impl SyntheticDataset {
    pub fn generate(count: usize, extents: [usize; 3], seed: u64) -> Result<Self> {
        let [t, h, w] = extents;
        let side = (h.min(w) / 4).max(1);
        if count == 0 || !count.is_multiple_of(2) {
            return arg_err(format!("need a positive, even clip count, got {count}"));
        }
        if t < 2 || side + t - 1 > w || side > h {
            return arg_err(format!("a {side}-pixel square cannot travel {t} frames across {h}x{w}"));
        }
        let mut r = rng::stream(seed, "dataset");
        let mut labels: Vec<usize> = (0..count).map(|i| i % 2).collect();
        labels.shuffle(&mut r);
        let frame = h * w;
        let mut data = vec![0.0; count * t * frame];
        for (n, &label) in labels.iter().enumerate() {
            let x0 = r.random_range(0..=w - side - (t - 1));
            let y0 = r.random_range(0..=h - side);
            for f in 0..t {
                let x = if label == 1 { x0 + f } else { x0 + t - 1 - f };
                let base = (n * t + f) * frame;
                for dy in 0..side {
                    for dx in 0..side {
                        data[base + (y0 + dy) * w + x + dx] = 1.0;
                    }
                }
            }
            for v in &mut data[n * t * frame..(n + 1) * t * frame] {
                *v += r.random_range(-NOISE..=NOISE);
            }
        }
        Ok(SyntheticDataset { clips: Tensor::new(vec![count, 1, t, h, w], data)?, labels, seed })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Clips `range` as one batch.
    pub fn batch(&self, range: std::ops::Range<usize>) -> Result<(Tensor, Vec<usize>)> {
        Ok((self.clips.narrow(0, range.clone())?, self.labels[range].to_vec()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Stop after the first epoch whose accuracy reaches this value.
    pub stop_at: Option<f64>,
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64) -> Self {
        TrainConfig { epochs, batch: 8, lr: LrSchedule::constant(lr), momentum: 0.9, weight_decay: 1e-5, stop_at: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainCurve {
    pub epochs: Vec<EpochStats>,
}

impl TrainCurve {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.accuracy)
    }

    pub fn best_accuracy(&self) -> f64 {
        self.epochs.iter().map(|e| e.accuracy).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,accuracy,lr\n");
        for e in &self.epochs {
            writeln!(s, "{},{:.6},{:.4},{}", e.epoch, e.loss, e.accuracy, e.lr).expect("write to string");
        }
        s
    }
}

/// Mini-batch SGD with momentum and weight decay over the dataset in order.
/// Normalisation uses batch statistics. Loss and accuracy of an epoch are
/// averaged over its batches before each update.
pub fn train_demo(net: &mut Net, data: &SyntheticDataset, cfg: &TrainConfig) -> Result<TrainCurve> {
    if cfg.batch == 0 || cfg.batch > data.len() {
        return arg_err(format!("batch size {} does not fit {} clips", cfg.batch, data.len()));
    }
    let mut velocity: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros_like(p)).collect();
    let mut curve = TrainCurve::default();
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut batches = 0;
        let mut lr = 0.0;
        for start in (0..data.len()).step_by(cfg.batch) {
            let (x, labels) = data.batch(start..(start + cfg.batch).min(data.len()))?;
            let (loss, logits, grads) = net.loss_and_grads(&x, &labels, Mode::TRAIN).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("training diverged at epoch {epoch}: {m}")),
                other => other,
            })?;
            loss_sum += loss;
            correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, y)| p == y).count();
            batches += 1;
            lr = cfg.lr.rate(iteration);
            for ((p, v), g) in net.params_mut().into_iter().zip(&mut velocity).zip(&grads) {
                for ((w, v), &g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
                    *w -= lr * *v;
                }
            }
            iteration += 1;
        }
        let stats = EpochStats { epoch, loss: loss_sum / batches as f64, accuracy: correct as f64 / data.len() as f64, lr };
        curve.epochs.push(stats);
        if cfg.stop_at.is_some_and(|target| stats.accuracy >= target) {
            break;
        }
    }
    Ok(curve)
}

/// Block outputs for `clip`, named `block0`, `block1`, ...
pub fn record_activations(net: &Net, clip: &Tensor) -> Result<Bundle> {
    let (_, cache) = net.forward(clip, Mode::default())?;
    let mut bundle = Bundle::default();
    for (i, a) in cache.activations.into_iter().enumerate() {
        bundle.push(format!("block{i}"), a);
    }
    Ok(bundle)
}

/// Batch item `b` of `x` without its batch axis.
pub fn batch_item(x: &Tensor, b: usize) -> Result<Tensor> {
    let shape = x.shape()[1..].to_vec();
    x.narrow(0, b..b + 1)?.into_reshape(shape)
}

/// Back-step view of the network for batch item `item`. Block inputs come from
/// `clip` and the recorded outputs; activations inside a block are recomputed
/// with batch statistics. Attention and class regularisation only rescale
/// channels and are left out.
pub fn trace_blocks(net: &Net, clip: &Tensor, recorded: &Bundle, item: usize) -> Result<(Vec<TraceBlock>, Tensor)> {
    let mut traces = Vec::with_capacity(net.blocks.len());
    for (i, block) in net.blocks.iter().enumerate() {
        let input = if i == 0 {
            clip
        } else {
            recorded.get(&format!("block{}", i - 1)).ok_or_else(|| Error::Format(format!("recording lacks block{}", i - 1)))?
        };
        if input.dim(0) <= item {
            return arg_err(format!("batch item {item} out of range for {} clips", input.dim(0)));
        }
        traces.push(trace_block(block, input, item)?);
    }
    let last = format!("block{}", net.blocks.len() - 1);
    let final_act = recorded.get(&last).ok_or_else(|| Error::Format(format!("recording lacks {last}")))?;
    Ok((traces, batch_item(final_act, item)?))
}

fn trace_block(block: &NetBlock, input: &Tensor, item: usize) -> Result<TraceBlock> {
    let stage = |kernels: &Tensor, x: &Tensor| -> Result<Stage> { Ok(Stage { kernels: kernels.clone(), input: batch_item(x, item)? }) };
    let (main, projection, has_skip) = match block {
        NetBlock::Conv(b) => {
            let mut cur = input.clone();
            let mut stages = Vec::new();
            for u in &b.convs {
                stages.push(stage(&u.kernel.weights, &cur)?);
                cur = u.forward(&cur, NormMode::Batch)?.0;
            }
            (stages, b.projection.as_ref().map(|p| p.kernel.weights.clone()), b.kind != BlockKind::Plain)
        }
        NetBlock::Mt(b) => {
            let mode = Mode { norm: NormMode::Batch, pool_backward: BackwardMode::PaperWeighted };
            let mut stages = vec![stage(&b.reduce.kernel.weights, input)?];
            let reduced = b.reduce.forward(input, NormMode::Batch)?.0;
            let mut kernels = vec![&b.mtconv.local.kernel.weights];
            if let Some(p) = &b.mtconv.prolonged {
                kernels.push(&p.from_input.kernel.weights);
            }
            stages.push(stage(&Tensor::concat(&kernels, 0)?, &reduced)?);
            let mixed = b.mtconv.forward(&reduced, mode)?.0;
            stages.push(stage(&b.expand.kernel.weights, &mixed)?);
            (stages, b.projection.as_ref().map(|p| p.kernel.weights.clone()), true)
        }
    };
    Ok(match (has_skip, projection) {
        (false, _) => TraceBlock { kind: TraceKind::Plain, branches: vec![main] },
        (true, None) => TraceBlock { kind: TraceKind::Residual, branches: vec![main] },
        (true, Some(p)) => TraceBlock { kind: TraceKind::Branched, branches: vec![main, vec![stage(&p, input)?]] },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, max_relative_error};

    #[test]
    fn parse_and_print_round_trip() {
        let text = "# toy\nkind=residual channels=1:4:4 srtg=final delta=none classreg=0.9\nkind=mtconv channels=4:8:4 srtg=none delta=7/8 classreg=0.8\n";
        let spec = NetSpec::parse(text).unwrap();
        assert_eq!(spec.blocks[1].delta, Some(0.875));
        assert_eq!(NetSpec::parse(&spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(NetSpec::parse("kind=plain channels=1:4:4\nkind=plain channels=2:4:4\n").is_err());
        assert!(NetSpec::parse("kind=plain channels=1:4:4 srtg=res\n").is_err());
        assert!(NetSpec::parse("kind=mtconv channels=1:4:4\n").is_err());
        assert!(NetSpec::parse("kind=plain channels=1:4:4 classreg=0.7\nkind=plain channels=4:4:4 classreg=0.8\n").is_err());
        assert!(NetSpec::parse("kind=conv channels=1:4:4\n").is_err());
        assert!(NetSpec::parse("").is_err());
    }

    #[test]
    fn mtconv_split_at_64() {
        let spec = NetSpec::parse("kind=mtconv channels=8:64:8 srtg=final delta=7/8 classreg=none\n").unwrap();
        let net = Net::build(&spec, 0).unwrap();
        let NetBlock::Mt(b) = &net.blocks[0] else { panic!("expected an mtconv block") };
        assert_eq!(b.mtconv.local.out_channels(), 56);
        assert_eq!(b.mtconv.prolonged.as_ref().unwrap().from_input.out_channels(), 8);
    }

    #[test]
    fn single_plain_block_shapes() {
        let spec = NetSpec::parse("kind=plain channels=1:2:3 classes=4\nclasses=4\n").unwrap();
        let net = Net::build(&spec, 1).unwrap();
        let x = Tensor::zeros(vec![2, 1, 4, 4, 4]);
        let (logits, cache) = net.forward(&x, Mode::default()).unwrap();
        assert_eq!(logits.shape(), &[2, 4]);
        assert_eq!(cache.activations[0].shape(), &[2, 3, 4, 4, 4]);
    }

    #[test]
    fn dataset_is_balanced_and_deterministic() {
        let a = SyntheticDataset::generate(16, [8, 16, 16], 3).unwrap();
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 8);
        assert_eq!(a, SyntheticDataset::generate(16, [8, 16, 16], 3).unwrap());
        assert_ne!(a.clips, SyntheticDataset::generate(16, [8, 16, 16], 4).unwrap().clips);
    }

    #[test]
    fn zero_rate_keeps_loss_constant() {
        let spec = NetSpec::parse(SRTG_DEMO_SPEC).unwrap();
        let mut net = Net::build(&spec, 0).unwrap();
        let data = SyntheticDataset::generate(8, [4, 8, 8], 0).unwrap();
        let curve = train_demo(&mut net, &data, &TrainConfig::new(3, 0.0)).unwrap();
        assert!(curve.epochs.windows(2).all(|w| w[0].loss == w[1].loss));
    }

    #[test]
    fn two_block_gradients() {
        for text in [SRTG_DEMO_SPEC, MTCONV_DEMO_SPEC] {
            let spec = NetSpec::parse(text).unwrap();
            let mut net = Net::build(&spec, 2).unwrap();
            net.set_gates(GateControl::Disabled);
            // zero biases put ReLUs exactly on their kink wherever an input is zero
            let mut r = rng::stream(3, "jitter");
            for p in net.params_mut() {
                let noise = rng::uniform(&mut r, p.shape().to_vec(), 0.1);
                p.add_assign(&noise).unwrap();
            }
            // random clips: the synthetic motion clips tie in frame selection
            let x = rng::uniform(&mut rng::stream(1, "x"), vec![2, 1, 4, 4, 4], 1.0);
            let labels = [0, 1];
            let (_, _, grads) = net.loss_and_grads(&x, &labels, Mode::GRADCHECK).unwrap();
            let loss = |n: &Net| {
                let (logits, _) = n.forward(&x, Mode::GRADCHECK).unwrap();
                softmax_cross_entropy(&logits, &labels).unwrap().0
            };
            for k in 0..grads.len() {
                let fd = finite_difference_grad(
                    |p| {
                        let mut m = net.clone();
                        *m.params_mut()[k] = p.clone();
                        loss(&m)
                    },
                    net.params()[k],
                    1e-5,
                );
                assert!(max_relative_error(&grads[k], &fd, 1e-4) < 1e-4, "param {k}");
            }
        }
    }

    #[test]
    fn record_has_one_entry_per_block() {
        let net = Net::build(&NetSpec::parse(MTCONV_DEMO_SPEC).unwrap(), 0).unwrap();
        let data = SyntheticDataset::generate(2, [4, 8, 8], 0).unwrap();
        let bundle = record_activations(&net, &data.clips).unwrap();
        assert_eq!(bundle.len(), 2);
        let (traces, last) = trace_blocks(&net, &data.clips, &bundle, 1).unwrap();
        assert_eq!(traces.len(), 2);
        assert_eq!(last.shape(), &[4, 4, 8, 8]);
    }
}
