//! Multi-temporal convolutions: a local branch at full resolution and a
//! prolonged branch over spatially and temporally halved volumes, concatenated
//! along channels, plus the residual block that aligns them with recurrent
//! attention.

use rand::Rng;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::layers::{relu, relu_backward, ConvUnit, ConvUnitCache, Mode};
use crate::pooling::{
    gather_frames, gather_frames_backward, softpool_backward, softpool_forward, triplet_select, FrameSelection,
    BackwardMode, PoolCache, PoolConfig,
};
use crate::recurrence::CellKind;
use crate::srtg::{GateControl, GateState, SrCache, SrModule};
use crate::tensor::{squeeze_spatial, trilinear_resize, trilinear_resize_backward, Tensor};

/// Local/prolonged channel split: `(⌊δ·C⌋, C − ⌊δ·C⌋)`.
pub fn split_channels(total: usize, delta: f64) -> Result<(usize, usize)> {
    if !(delta > 0.0 && delta <= 1.0) {
        return arg_err(format!("channel ratio must lie in (0, 1], got {delta}"));
    }
    // absorb representation error so that e.g. 0.875·64 stays 56
    let local = ((delta * total as f64) + 1e-9).floor() as usize;
    if local == 0 {
        return arg_err(format!("ratio {delta} leaves no local channels out of {total}"));
    }
    Ok((local, total - local))
}

/// Prolonged-branch convolutions: `w^P` on the pooled block input and the
/// pointwise `w^{L→P}` on the pooled local output, both emitting `C_P` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Prolonged {
    pub from_input: ConvUnit,
    pub from_local: ConvUnit,
    pub pool: PoolConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtConv {
    pub delta: f64,
    pub local: ConvUnit,
    pub prolonged: Option<Prolonged>,
}

#[derive(Debug, Clone)]
struct ProlongedCache {
    pool_x: PoolCache,
    pool_l: PoolCache,
    sel_x: FrameSelection,
    sel_l: FrameSelection,
    conv_x: ConvUnitCache,
    conv_l: ConvUnitCache,
    reduced: [usize; 3],
    pool_backward: BackwardMode,
}

#[derive(Debug, Clone)]
pub struct MtConvCache {
    local: ConvUnitCache,
    prolonged: Option<ProlongedCache>,
}

impl MtConvCache {
    /// Frames kept from the pooled block input and from the pooled local output.
    pub fn selections(&self) -> Option<(&FrameSelection, &FrameSelection)> {
        self.prolonged.as_ref().map(|p| (&p.sel_x, &p.sel_l))
    }
}

impl MtConv {
    pub fn init(in_ch: usize, total: usize, delta: f64, pool: PoolConfig, rng: &mut impl Rng) -> Result<Self> {
        let (cl, cp) = split_channels(total, delta)?;
        let local = ConvUnit::init(cl, in_ch, [3, 3, 3], true, true, rng);
        let prolonged = (cp > 0).then(|| Prolonged {
            from_input: ConvUnit::init(cp, in_ch, [3, 3, 3], true, true, rng),
            from_local: ConvUnit::init(cp, cl, [1, 1, 1], true, true, rng),
            pool,
        });
        Ok(MtConv { delta, local, prolonged })
    }

    pub fn in_channels(&self) -> usize {
        self.local.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.local.out_channels() + self.prolonged.as_ref().map_or(0, |p| p.from_input.out_channels())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.local.params();
        if let Some(pr) = &self.prolonged {
            p.extend(pr.from_input.params());
            p.extend(pr.from_local.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.local.params_mut();
        if let Some(pr) = &mut self.prolonged {
            p.extend(pr.from_input.params_mut());
            p.extend(pr.from_local.params_mut());
        }
        p
    }

    pub fn local_branch(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, ConvUnitCache)> {
        self.local.forward(x, mode.norm)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, MtConvCache)> {
        let [_, _, t, h, w] = x.dims5("mtconv input")?;
        let (a_l, local) = self.local_branch(x, mode)?;
        let Some(pr) = &self.prolonged else {
            return Ok((a_l, MtConvCache { local, prolonged: None}));
        };
        if t < 4 || h < 2 || w < 2 {
            return shape_err(format!("prolonged branch needs T >= 4 and H, W >= 2, got {t}x{h}x{w}"));
        }
        let (a_p, pc) = prolonged_branch(pr, x, &a_l, mode)?;
        let out = Tensor::concat(&[&a_l, &a_p], 1)?;
        Ok((out, MtConvCache { local, prolonged: Some(pc)}))
    }

    /// Returns `(dx, gradients in params() order)`.
    pub fn backward(&self, cache: &MtConvCache, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let cl = self.local.out_channels();
        let (g_local, g_prol) = match (&self.prolonged, &cache.prolonged) {
            (Some(_), Some(_)) => (grad.narrow(1, 0..cl)?, Some(grad.narrow(1, cl..grad.dim(1))?)),
            _ => (grad.clone(), None),
        };
        let mut g_local = g_local;
        let mut dx_extra = None;
        let mut prol_grads = Vec::new();
        if let (Some(pr), Some(pc), Some(gp)) = (&self.prolonged, &cache.prolonged, g_prol) {
            let g_sum = trilinear_resize_backward(&gp, pc.reduced)?;
            let (dgx, gx) = pr.from_input.backward(&pc.conv_x, &g_sum)?;
            let (dgl, gl) = pr.from_local.backward(&pc.conv_l, &g_sum)?;
            let mode = pc.pool_backward;
            let dx = softpool_backward(&pc.pool_x, &gather_frames_backward(&dgx, &pc.sel_x)?, mode)?;
            let dl = softpool_backward(&pc.pool_l, &gather_frames_backward(&dgl, &pc.sel_l)?, mode)?;
            g_local.add_assign(&dl)?;
            dx_extra = Some(dx);
            prol_grads.extend(gx);
            prol_grads.extend(gl);
        }
        let (mut dx, mut grads) = self.local.backward(&cache.local, &g_local)?;
        if let Some(d) = dx_extra {
            dx.add_assign(&d)?;
        }
        grads.extend(prol_grads);
        Ok((dx, grads))
    }

    /// Convolution multiply-adds ×2 plus pooling, selection and interpolation
    /// costs on a `[T, H, W]` clip.
    pub fn flops(&self, extents: [usize; 3]) -> u64 {
        let [t, h, w] = extents;
        let mut total = 2 * self.local.macs(extents) as u64;
        if let Some(pr) = &self.prolonged {
            let (ho, wo) = (h / 2, w / 2);
            let tr = t / 2;
            let reduced = [tr, ho, wo];
            let cin = self.in_channels() as u64;
            let cl = self.local.out_channels() as u64;
            let cp = pr.from_input.out_channels() as u64;
            let region = (pr.pool.kernel[0] * pr.pool.kernel[1]) as u64;
            // per output: exponentials, normaliser, weighted sum
            let pool = (cin + cl) * (t * ho * wo) as u64 * (4 * region + 1);
            let squeeze = (cin + cl) * (t * ho * wo) as u64;
            let select = 2 * (t as u64 - 1) * 3 * (cin + cl);
            let convs = 2 * (pr.from_input.macs(reduced) + pr.from_local.macs(reduced)) as u64;
            let add = cp * (tr * ho * wo) as u64;
            // eight taps and seven adds per interpolated value
            let interp = cp * (t * h * w) as u64 * 15;
            total += pool + squeeze + select + convs + add + interp;
        }
        total
    }
}

fn prolonged_branch(pr: &Prolonged, x: &Tensor, a_l: &Tensor, mode: Mode) -> Result<(Tensor, ProlongedCache)> {
    let [_, _, t, h, w] = x.dims5("prolonged branch input")?;
    let pool = PoolConfig { backward_mode: mode.pool_backward, ..pr.pool };
    let (px, pool_x) = softpool_forward(x, &pool)?;
    let (pl, pool_l) = softpool_forward(a_l, &pool)?;
    let sel_x = triplet_select(&squeeze_spatial(&px)?, 0.5)?;
    let sel_l = triplet_select(&squeeze_spatial(&pl)?, 0.5)?;
    let gx = gather_frames(&px, &sel_x)?;
    let gl = gather_frames(&pl, &sel_l)?;
    let (zx, conv_x) = pr.from_input.forward(&gx, mode.norm)?;
    let (zl, conv_l) = pr.from_local.forward(&gl, mode.norm)?;
    let sum = zx.add(&zl)?;
    let [_, _, tr, hr, wr] = sum.dims5("prolonged sum")?;
    let a_p = trilinear_resize(&sum, [t, h, w])?;
    Ok((a_p, ProlongedCache { pool_x, pool_l, sel_x, sel_l, conv_x, conv_l, reduced: [tr, hr, wr], pool_backward: pool.backward_mode }))
}

/// `1×1×1 → MTConv → 1×1×1`, residual sum and ReLU, then optionally GRU
/// attention over the squeezed block input scaling the block output behind a
/// temporal gate.
#[derive(Debug, Clone, PartialEq)]
pub struct MtBlock {
    pub reduce: ConvUnit,
    pub mtconv: MtConv,
    pub expand: ConvUnit,
    pub projection: Option<ConvUnit>,
    pub sr: Option<SrModule>,
}

#[derive(Debug, Clone)]
pub struct MtBlockCache {
    reduce: ConvUnitCache,
    pub mtconv: MtConvCache,
    expand: ConvUnitCache,
    projection: Option<ConvUnitCache>,
    out_relu: Tensor,
    sr: Option<SrCache>,
    input_shape: Vec<usize>,
}

impl MtBlockCache {
    pub fn gate_states(&self) -> &[GateState] {
        self.sr.as_ref().map_or(&[], |c| &c.states)
    }
}

impl MtBlock {
    pub fn init(
        channels: [usize; 3],
        delta: f64,
        control: Option<GateControl>,
        sr_layers: usize,
        pool: PoolConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let [cin, mid, cout] = channels;
        if channels.contains(&0) {
            return arg_err(format!("block channels must be positive, got {channels:?}"));
        }
        let reduce = ConvUnit::init(mid, cin, [1, 1, 1], true, true, rng);
        let mtconv = MtConv::init(mid, mid, delta, pool, rng)?;
        let expand = ConvUnit::init(cout, mid, [1, 1, 1], true, false, rng);
        let projection = (cin != cout).then(|| ConvUnit::init(cout, cin, [1, 1, 1], true, false, rng));
        let sr = control.map(|c| SrModule::init(CellKind::Gru, sr_layers, cin, cout, c, rng));
        Ok(MtBlock { reduce, mtconv, expand, projection, sr })
    }

    pub fn in_channels(&self) -> usize {
        self.reduce.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.expand.out_channels()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.reduce.params();
        p.extend(self.mtconv.params());
        p.extend(self.expand.params());
        if let Some(u) = &self.projection {
            p.extend(u.params());
        }
        if let Some(sr) = &self.sr {
            p.extend(sr.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.reduce.params_mut();
        p.extend(self.mtconv.params_mut());
        p.extend(self.expand.params_mut());
        if let Some(u) = &mut self.projection {
            p.extend(u.params_mut());
        }
        if let Some(sr) = &mut self.sr {
            p.extend(sr.params_mut());
        }
        p
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, MtBlockCache)> {
        let (r, reduce) = self.reduce.forward(x, mode.norm)?;
        let (m, mtconv) = self.mtconv.forward(&r, mode)?;
        let (e, expand) = self.expand.forward(&m, mode.norm)?;
        let (skip, projection) = match &self.projection {
            Some(u) => {
                let (y, c) = u.forward(x, mode.norm)?;
                (y, Some(c))
            }
            None => (x.clone(), None),
        };
        let out_relu = relu(&e.add(&skip)?);
        let (out, sr) = match &self.sr {
            Some(m) => {
                let (y, c) = m.forward(x, &out_relu)?;
                (y, Some(c))
            }
            None => (out_relu.clone(), None),
        };
        if !out.all_finite() {
            return Err(Error::Numerical("non-finite MTBlock output".into()));
        }
        let cache = MtBlockCache { reduce, mtconv, expand, projection, out_relu, sr, input_shape: x.shape().to_vec() };
        Ok((out, cache))
    }

    pub fn backward(&self, cache: &MtBlockCache, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut dx = Tensor::zeros(cache.input_shape.clone());
        let (d_target, sr_grads) = match (&self.sr, &cache.sr) {
            (Some(m), Some(c)) => {
                let (d_source, d_target, g) = m.backward(c, grad)?;
                dx.add_assign(&d_source)?;
                (d_target, g)
            }
            _ => (grad.clone(), Vec::new()),
        };
        let g = relu_backward(&cache.out_relu, &d_target)?;
        let mut proj_grads = Vec::new();
        match (&self.projection, &cache.projection) {
            (Some(u), Some(c)) => {
                let (d, pg) = u.backward(c, &g)?;
                dx.add_assign(&d)?;
                proj_grads = pg;
            }
            _ => dx.add_assign(&g)?,
        }
        let (dm, eg) = self.expand.backward(&cache.expand, &g)?;
        let (dr, mg) = self.mtconv.backward(&cache.mtconv, &dm)?;
        let (d_in, rg) = self.reduce.backward(&cache.reduce, &dr)?;
        dx.add_assign(&d_in)?;
        let mut grads = rg;
        grads.extend(mg);
        grads.extend(eg);
        grads.extend(proj_grads);
        grads.extend(sr_grads);
        Ok((dx, grads))
    }

    /// Everything except the attention module.
    pub fn base_flops(&self, extents: [usize; 3]) -> u64 {
        let vol = extents.iter().product::<usize>() as u64;
        let convs = 2 * (self.reduce.macs(extents) + self.expand.macs(extents)) as u64
            + self.projection.as_ref().map_or(0, |u| 2 * u.macs(extents) as u64);
        let sum = self.out_channels() as u64 * vol;
        convs + self.mtconv.flops(extents) + sum
    }

    pub fn sr_flops(&self, extents: [usize; 3]) -> u64 {
        self.sr.as_ref().map_or(0, |m| m.flops(self.in_channels(), self.out_channels(), extents))
    }

    pub fn set_gate(&mut self, control: GateControl) {
        if let Some(sr) = &mut self.sr {
            sr.control = control;
        }
    }
}
