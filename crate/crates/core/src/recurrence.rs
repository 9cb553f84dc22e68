//! LSTM, GRU, plain tanh RNN and peephole LSTM cells acting on the
//! concatenation `[h; x]`, stacked into multi-layer sequence runners with
//! backpropagation through time.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{EmbeddingSequence, Tensor};

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn concat(h: &[f64], x: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(h.len() + x.len());
    z.extend_from_slice(h);
    z.extend_from_slice(x);
    z
}

/// `W·z + b` for `W: [H, H+I]`.
fn affine(w: &Tensor, b: &Tensor, z: &[f64]) -> Vec<f64> {
    let mut out = w.matvec(z).expect("gate weight shapes validated at construction");
    for (o, &bb) in out.iter_mut().zip(b.data()) {
        *o += bb;
    }
    out
}

/// Accumulates `dW += d ⊗ z`, `db += d` and returns `Wᵀ d`.
fn affine_backward(w: &Tensor, d: &[f64], z: &[f64], dw: &mut Tensor, db: &mut Tensor) -> Vec<f64> {
    let cols = z.len();
    let dwd = dw.data_mut();
    for (r, &dr) in d.iter().enumerate() {
        for (c, &zc) in z.iter().enumerate() {
            dwd[r * cols + c] += dr * zc;
        }
    }
    for (b, &dr) in db.data_mut().iter_mut().zip(d) {
        *b += dr;
    }
    w.matvec_t(d).expect("gate weight shapes validated at construction")
}

fn check_width(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return shape_err(format!("{what}: width {got}, expected {want}"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Gru,
    PlainRnn,
    LstmPeephole,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
            CellKind::PlainRnn => "rnn",
            CellKind::LstmPeephole => "lstm-peephole",
        }
    }

    /// Gate matrices per cell.
    pub fn gate_count(self) -> usize {
        match self {
            CellKind::Lstm | CellKind::LstmPeephole => 4,
            CellKind::Gru => 3,
            CellKind::PlainRnn => 1,
        }
    }
}

/// Gate weights `[H, H+I]` and biases `[H]` of one cell. Gate order:
/// LSTM `f, i, candidate, o`; GRU `z, r, candidate`; plain RNN a single gate.
/// Peephole LSTMs add diagonal cell-state weights for `f, i, o`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub kind: CellKind,
    pub hidden: usize,
    pub input: usize,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub peepholes: Vec<Tensor>,
}

pub type LstmParams = CellParams;
pub type GruParams = CellParams;

impl CellParams {
    pub fn zeros(kind: CellKind, hidden: usize, input: usize) -> Self {
        let g = kind.gate_count();
        CellParams {
            kind,
            hidden,
            input,
            weights: (0..g).map(|_| Tensor::zeros(vec![hidden, hidden + input])).collect(),
            biases: (0..g).map(|_| Tensor::zeros(vec![hidden])).collect(),
            peepholes: if kind == CellKind::LstmPeephole {
                (0..3).map(|_| Tensor::zeros(vec![hidden])).collect()
            } else {
                Vec::new()
            },
        }
    }

    /// Uniform fan-in initialisation in `[−1/√(H+I), 1/√(H+I)]`.
    pub fn init(kind: CellKind, hidden: usize, input: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(kind, hidden, input);
        let bound = 1.0 / ((hidden + input) as f64).sqrt();
        for t in p.params_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        }
        p
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().chain(&self.biases).chain(&self.peepholes).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).chain(self.peepholes.iter_mut()).collect()
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.kind, self.hidden, self.input)
    }

    fn add_assign(&mut self, other: &CellParams) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.add_assign(b).expect("matching cell layouts");
        }
    }

    fn is_lstm(&self) -> bool {
        matches!(self.kind, CellKind::Lstm | CellKind::LstmPeephole)
    }
}

/// Recurrent state of one cell: hidden vector and, for LSTMs, the cell state.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl CellState {
    pub fn zeros(p: &CellParams) -> Self {
        CellState { h: vec![0.0; p.hidden], c: if p.is_lstm() { vec![0.0; p.hidden] } else { Vec::new() } }
    }
}

/// Intermediate values of one step, enough for its backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    z: Vec<f64>,
    prev: CellState,
    gates: Vec<Vec<f64>>,
    next: CellState,
    /// GRU: the concatenation `[r ⊙ h; x]` fed to the candidate gate.
    z_reset: Vec<f64>,
}

impl StepCache {
    /// Activated gates: LSTM `[f, i, g, o]`, GRU `[z, r, candidate]`.
    pub fn gates(&self) -> &[Vec<f64>] {
        &self.gates
    }
}

/// One step of any cell kind.
pub fn cell_step(x: &[f64], prev: &CellState, p: &CellParams) -> Result<(CellState, StepCache)> {
    check_width("cell input", x.len(), p.input)?;
    check_width("cell hidden state", prev.h.len(), p.hidden)?;
    let z = concat(&prev.h, x);
    let hsz = p.hidden;
    let (next, gates, z_reset) = match p.kind {
        CellKind::Lstm | CellKind::LstmPeephole => {
            check_width("cell state", prev.c.len(), hsz)?;
            let mut f = affine(&p.weights[0], &p.biases[0], &z);
            let mut i = affine(&p.weights[1], &p.biases[1], &z);
            let g: Vec<f64> = affine(&p.weights[2], &p.biases[2], &z).into_iter().map(f64::tanh).collect();
            let mut o = affine(&p.weights[3], &p.biases[3], &z);
            if p.kind == CellKind::LstmPeephole {
                for k in 0..hsz {
                    f[k] += p.peepholes[0].data()[k] * prev.c[k];
                    i[k] += p.peepholes[1].data()[k] * prev.c[k];
                }
            }
            f.iter_mut().chain(i.iter_mut()).for_each(|v| *v = sigmoid(*v));
            let c: Vec<f64> = (0..hsz).map(|k| f[k] * prev.c[k] + i[k] * g[k]).collect();
            if p.kind == CellKind::LstmPeephole {
                for k in 0..hsz {
                    o[k] += p.peepholes[2].data()[k] * c[k];
                }
            }
            o.iter_mut().for_each(|v| *v = sigmoid(*v));
            let h = (0..hsz).map(|k| o[k] * c[k].tanh()).collect();
            (CellState { h, c }, vec![f, i, g, o], Vec::new())
        }
        CellKind::Gru => {
            let zg: Vec<f64> = affine(&p.weights[0], &p.biases[0], &z).into_iter().map(sigmoid).collect();
            let r: Vec<f64> = affine(&p.weights[1], &p.biases[1], &z).into_iter().map(sigmoid).collect();
            let rh: Vec<f64> = r.iter().zip(&prev.h).map(|(a, b)| a * b).collect();
            let z_reset = concat(&rh, x);
            let cand: Vec<f64> = affine(&p.weights[2], &p.biases[2], &z_reset).into_iter().map(f64::tanh).collect();
            let h = (0..hsz).map(|k| zg[k] * prev.h[k] + (1.0 - zg[k]) * cand[k]).collect();
            (CellState { h, c: Vec::new() }, vec![zg, r, cand], z_reset)
        }
        CellKind::PlainRnn => {
            let h: Vec<f64> = affine(&p.weights[0], &p.biases[0], &z).into_iter().map(f64::tanh).collect();
            (CellState { h: h.clone(), c: Vec::new() }, vec![h], Vec::new())
        }
    };
    let cache = StepCache { z, prev: prev.clone(), gates, next: next.clone(), z_reset };
    Ok((next, cache))
}

/// Gradients flowing out of one step: to the input, to the previous state,
/// and accumulated into `grads`.
pub fn cell_step_backward(
    cache: &StepCache,
    p: &CellParams,
    dh: &[f64],
    dc: &[f64],
    grads: &mut CellParams,
) -> (Vec<f64>, CellState) {
    let hsz = p.hidden;
    let mut dprev = CellState::zeros(p);
    let dz = match p.kind {
        CellKind::Lstm | CellKind::LstmPeephole => {
            let [f, i, g, o] = [&cache.gates[0], &cache.gates[1], &cache.gates[2], &cache.gates[3]];
            let c = &cache.next.c;
            let mut dpre = vec![vec![0.0; hsz]; 4];
            let mut dc_total = vec![0.0; hsz];
            for k in 0..hsz {
                let tc = c[k].tanh();
                let do_ = dh[k] * tc;
                dpre[3][k] = do_ * o[k] * (1.0 - o[k]);
                dc_total[k] = dc[k] + dh[k] * o[k] * (1.0 - tc * tc);
                if p.kind == CellKind::LstmPeephole {
                    dc_total[k] += dpre[3][k] * p.peepholes[2].data()[k];
                }
                dpre[0][k] = dc_total[k] * cache.prev.c[k] * f[k] * (1.0 - f[k]);
                dpre[1][k] = dc_total[k] * g[k] * i[k] * (1.0 - i[k]);
                dpre[2][k] = dc_total[k] * i[k] * (1.0 - g[k] * g[k]);
                dprev.c[k] = dc_total[k] * f[k];
            }
            if p.kind == CellKind::LstmPeephole {
                for k in 0..hsz {
                    grads.peepholes[0].data_mut()[k] += dpre[0][k] * cache.prev.c[k];
                    grads.peepholes[1].data_mut()[k] += dpre[1][k] * cache.prev.c[k];
                    grads.peepholes[2].data_mut()[k] += dpre[3][k] * c[k];
                    dprev.c[k] += dpre[0][k] * p.peepholes[0].data()[k] + dpre[1][k] * p.peepholes[1].data()[k];
                }
            }
            let mut dz = vec![0.0; cache.z.len()];
            for (gate, d) in dpre.iter().enumerate() {
                let (gw, gb) = (&mut grads.weights[gate], &mut grads.biases[gate]);
                let part = affine_backward(&p.weights[gate], d, &cache.z, gw, gb);
                dz.iter_mut().zip(part).for_each(|(a, b)| *a += b);
            }
            dz
        }
        CellKind::Gru => {
            let [zg, r, cand] = [&cache.gates[0], &cache.gates[1], &cache.gates[2]];
            let hp = &cache.prev.h;
            let mut dz_pre = vec![0.0; hsz];
            let mut dcand_pre = vec![0.0; hsz];
            for k in 0..hsz {
                dz_pre[k] = dh[k] * (hp[k] - cand[k]) * zg[k] * (1.0 - zg[k]);
                dcand_pre[k] = dh[k] * (1.0 - zg[k]) * (1.0 - cand[k] * cand[k]);
                dprev.h[k] += dh[k] * zg[k];
            }
            let dzr = affine_backward(&p.weights[2], &dcand_pre, &cache.z_reset, &mut grads.weights[2], &mut grads.biases[2]);
            let mut dr_pre = vec![0.0; hsz];
            for k in 0..hsz {
                // z_reset[k] = r[k]·h[k] for the hidden part
                dr_pre[k] = dzr[k] * hp[k] * r[k] * (1.0 - r[k]);
                dprev.h[k] += dzr[k] * r[k];
            }
            let mut dz = vec![0.0; cache.z.len()];
            dz[hsz..].copy_from_slice(&dzr[hsz..]);
            for (gate, d) in [(0, &dz_pre), (1, &dr_pre)] {
                let part = affine_backward(&p.weights[gate], d, &cache.z, &mut grads.weights[gate], &mut grads.biases[gate]);
                dz.iter_mut().zip(part).for_each(|(a, b)| *a += b);
            }
            dz
        }
        CellKind::PlainRnn => {
            let h = &cache.gates[0];
            let dpre: Vec<f64> = (0..hsz).map(|k| dh[k] * (1.0 - h[k] * h[k])).collect();
            affine_backward(&p.weights[0], &dpre, &cache.z, &mut grads.weights[0], &mut grads.biases[0])
        }
    };
    for k in 0..hsz {
        dprev.h[k] += dz[k];
    }
    (dz[hsz..].to_vec(), dprev)
}

/// LSTM step returning `(h_t, C_t)`.
pub fn lstm_step(x: &[f64], h_prev: &[f64], c_prev: &[f64], p: &LstmParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let prev = CellState { h: h_prev.to_vec(), c: c_prev.to_vec() };
    let (next, _) = cell_step(x, &prev, p)?;
    Ok((next.h, next.c))
}

pub fn gru_step(x: &[f64], h_prev: &[f64], p: &GruParams) -> Result<Vec<f64>> {
    let prev = CellState { h: h_prev.to_vec(), c: Vec::new() };
    Ok(cell_step(x, &prev, p)?.0.h)
}

/// Layers of cells; layer 0 reads the input sequence, each later layer reads
/// the hidden states of the one below.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentStack {
    pub layers: Vec<CellParams>,
}

impl RecurrentStack {
    pub fn zeros(kind: CellKind, num_layers: usize, input: usize, hidden: usize) -> Self {
        let layers = (0..num_layers)
            .map(|l| CellParams::zeros(kind, hidden, if l == 0 { input } else { hidden }))
            .collect();
        RecurrentStack { layers }
    }

    pub fn init(kind: CellKind, num_layers: usize, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..num_layers)
            .map(|l| CellParams::init(kind, hidden, if l == 0 { input } else { hidden }, rng))
            .collect();
        RecurrentStack { layers }
    }

    pub fn kind(&self) -> CellKind {
        self.layers[0].kind
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn hidden_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zeros_like(&self) -> Self {
        RecurrentStack { layers: self.layers.iter().map(CellParams::zeros_like).collect() }
    }

    /// Multiply-adds of one time step (gate products only).
    pub fn step_macs(&self) -> usize {
        self.layers.iter().map(|l| l.kind.gate_count() * l.hidden * (l.hidden + l.input)).sum()
    }
}

/// Per item and time step, the step caches of every layer.
#[derive(Debug, Clone)]
pub struct SequenceCache {
    steps: Vec<Vec<Vec<StepCache>>>,
    input_width: usize,
}

/// Runs every batch item from zero states and returns the top layer's hidden
/// states `[B, H, T]`.
pub fn run_sequence(stack: &RecurrentStack, inputs: &EmbeddingSequence) -> Result<EmbeddingSequence> {
    Ok(run_sequence_cached(stack, inputs)?.0)
}

pub fn run_sequence_cached(stack: &RecurrentStack, inputs: &EmbeddingSequence) -> Result<(EmbeddingSequence, SequenceCache)> {
    check_width("recurrent stack input", inputs.channels(), stack.input_width())?;
    let t = inputs.frames();
    let mut outputs = Vec::with_capacity(inputs.batch());
    let mut steps = Vec::with_capacity(inputs.batch());
    for b in 0..inputs.batch() {
        let mut states: Vec<CellState> = stack.layers.iter().map(CellState::zeros).collect();
        let mut item_out = Vec::with_capacity(t);
        let mut item_steps = Vec::with_capacity(t);
        for ti in 0..t {
            let mut x = inputs.frame(b, ti);
            let mut layer_steps = Vec::with_capacity(stack.layers.len());
            for (l, p) in stack.layers.iter().enumerate() {
                let (next, cache) = cell_step(&x, &states[l], p)?;
                x = next.h.clone();
                states[l] = next;
                layer_steps.push(cache);
            }
            item_out.push(x);
            item_steps.push(layer_steps);
        }
        outputs.push(item_out);
        steps.push(item_steps);
    }
    Ok((EmbeddingSequence::from_frames(&outputs)?, SequenceCache { steps, input_width: stack.input_width() }))
}

/// Backpropagation through time. Returns the input gradient `[B, I, T]` and the
/// parameter gradients laid out like `stack`.
pub fn run_sequence_backward(
    stack: &RecurrentStack,
    cache: &SequenceCache,
    grad_out: &Tensor,
) -> Result<(Tensor, RecurrentStack)> {
    let b = cache.steps.len();
    let t = cache.steps.first().map_or(0, Vec::len);
    let hsz = stack.hidden_width();
    grad_out.expect_shape(&[b, hsz, t], "run_sequence_backward upstream")?;
    let upstream = EmbeddingSequence::new(grad_out.clone())?;
    let mut grads = stack.zeros_like();
    let mut dx_items = Vec::with_capacity(b);
    for (bi, item) in cache.steps.iter().enumerate() {
        // gradient arriving at each layer's state from the following step
        let mut carry: Vec<CellState> = stack.layers.iter().map(CellState::zeros).collect();
        let mut dx_item = vec![vec![0.0; cache.input_width]; t];
        for ti in (0..t).rev() {
            let mut dh_above = upstream.frame(bi, ti);
            for l in (0..stack.layers.len()).rev() {
                let p = &stack.layers[l];
                let dh: Vec<f64> = dh_above.iter().zip(&carry[l].h).map(|(a, b)| a + b).collect();
                let mut layer_grads = p.zeros_like();
                let (dx, dprev) = cell_step_backward(&item[ti][l], p, &dh, &carry[l].c, &mut layer_grads);
                grads.layers[l].add_assign(&layer_grads);
                carry[l] = dprev;
                dh_above = dx;
            }
            dx_item[ti] = dh_above;
        }
        dx_items.push(dx_item);
    }
    Ok((EmbeddingSequence::from_frames(&dx_items)?.into_tensor(), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::{finite_difference_grad, max_relative_error};

    #[test]
    fn zero_lstm_step() {
        let p = CellParams::zeros(CellKind::Lstm, 3, 3);
        let (h, c) = lstm_step(&[0.5, -1.0, 2.0], &[0.0; 3], &[0.0; 3], &p).unwrap();
        assert_eq!(h, vec![0.0; 3]);
        assert_eq!(c, vec![0.0; 3]);
    }

    #[test]
    fn saturated_lstm_carries_memory() {
        let mut p = CellParams::zeros(CellKind::Lstm, 2, 2);
        p.biases[0] = Tensor::full(vec![2], 60.0);
        p.biases[1] = Tensor::full(vec![2], -60.0);
        let (_, c) = lstm_step(&[0.3, 0.9], &[0.1, 0.2], &[1.0, 1.0], &p).unwrap();
        assert!(c.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn gru_full_carry() {
        let mut rng = rng::stream(1, "gru");
        let mut p = CellParams::init(CellKind::Gru, 3, 2, &mut rng);
        p.biases[0] = Tensor::full(vec![3], 800.0);
        let h = gru_step(&[0.4, -0.2], &[0.1, -0.5, 0.3], &p).unwrap();
        assert_eq!(h, vec![0.1, -0.5, 0.3]);
        let z = CellParams::zeros(CellKind::Gru, 3, 2);
        assert_eq!(gru_step(&[1.0, 1.0], &[0.0; 3], &z).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let p = CellParams::zeros(CellKind::Lstm, 3, 2);
        assert!(lstm_step(&[0.0; 3], &[0.0; 3], &[0.0; 3], &p).is_err());
    }

    fn check_stack_gradients(kind: CellKind) {
        let mut rng = rng::stream(3, kind.name());
        let stack = RecurrentStack::init(kind, 2, 3, 4, &mut rng);
        let x = rng::uniform(&mut rng, vec![2, 3, 4], 1.0);
        let up = rng::uniform(&mut rng, vec![2, 4, 4], 1.0);
        let loss = |s: &RecurrentStack, x: &Tensor| {
            run_sequence(s, &EmbeddingSequence::new(x.clone()).unwrap()).unwrap().tensor().dot(&up).unwrap()
        };
        let (_, cache) = run_sequence_cached(&stack, &EmbeddingSequence::new(x.clone()).unwrap()).unwrap();
        let (dx, grads) = run_sequence_backward(&stack, &cache, &up).unwrap();
        let fdx = finite_difference_grad(|p| loss(&stack, p), &x, 1e-5);
        assert!(max_relative_error(&dx, &fdx, 1e-4) < 1e-5, "{kind:?} input");
        for (k, g) in grads.params().into_iter().enumerate() {
            let base = stack.params()[k].clone();
            let fd = finite_difference_grad(
                |p| {
                    let mut s = stack.clone();
                    *s.params_mut()[k] = p.clone();
                    loss(&s, &x)
                },
                &base,
                1e-5,
            );
            assert!(max_relative_error(g, &fd, 1e-4) < 1e-5, "{kind:?} param {k}");
        }
    }

    #[test]
    fn lstm_stack_gradients() {
        check_stack_gradients(CellKind::Lstm);
    }

    #[test]
    fn gru_stack_gradients() {
        check_stack_gradients(CellKind::Gru);
    }

    #[test]
    fn plain_rnn_stack_gradients() {
        check_stack_gradients(CellKind::PlainRnn);
    }

    #[test]
    fn peephole_stack_gradients() {
        check_stack_gradients(CellKind::LstmPeephole);
    }

    #[test]
    fn single_frame_equals_one_step() {
        let mut rng = rng::stream(5, "t1");
        let stack = RecurrentStack::init(CellKind::Lstm, 1, 3, 3, &mut rng);
        let x = vec![0.2, -0.7, 0.5];
        let seq = EmbeddingSequence::from_frames(&[vec![x.clone()]]).unwrap();
        let out = run_sequence(&stack, &seq).unwrap();
        let (h, _) = lstm_step(&x, &[0.0; 3], &[0.0; 3], &stack.layers[0]).unwrap();
        assert_eq!(out.frame(0, 0), h);
    }
}
