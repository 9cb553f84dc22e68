//! Randomised gradient checks: hand-written backward passes against central
//! finite differences.

use rand::Rng;

use crate::error::{arg_err, Error, Result};
use crate::layers::{softmax_cross_entropy, Mode};
use crate::netspec::{BlockSpec, BlockType, Net, NetSpec};
use crate::pooling::{softpool_backward, softpool_forward, BackwardMode, PoolConfig, PoolMode};
use crate::recurrence::{cell_step, cell_step_backward, CellKind, CellParams, CellState};
use crate::rng::{self, StreamRng};
use crate::srtg::{GateControl, Placement};
use crate::tensor::{conv3d, conv3d_backward, finite_difference_grad, relative_error, ConvKernel, Tensor};

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const SUITES: [&str; 5] = ["conv3d", "softpool", "lstm", "gru", "net"];

/// Attempts per case before a run of non-smooth draws is reported as an error.
pub const MAX_REDRAWS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub worst_case: usize,
    /// Draws discarded because a finite-difference step crossed a kink.
    pub redrawn: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

/// Outcome of one drawn case: the largest relative error, or `None` when the
/// loss is not smooth within one step of the drawn point.
type CaseResult = Result<Option<f64>>;

/// Runs `cases` random instances of a suite; each case draws from its own stream.
///
/// Piecewise-smooth losses (ReLU, max) can put a kink within one step of a
/// coordinate. A coordinate that fails at [`STEP`] but agrees at a tenth of it
/// marks such a draw; it is discarded and the case drawn again from the same
/// stream.
pub fn run_suite(name: &str, cases: usize, seed: u64) -> Result<SuiteReport> {
    let case: fn(&mut StreamRng) -> CaseResult = match name {
        "conv3d" => conv_case,
        "softpool" => softpool_case,
        "lstm" => |r| cell_case(CellKind::Lstm, r),
        "gru" => |r| cell_case(CellKind::Gru, r),
        "net" => net_case,
        _ => return arg_err(format!("unknown gradient suite {name:?}; expected one of {SUITES:?}")),
    };
    let mut report = SuiteReport { name: name.to_string(), cases, max_error: 0.0, worst_case: 0, redrawn: 0 };
    for i in 0..cases {
        let mut r = rng::stream(seed, &format!("{name}/{i}"));
        let mut attempt = 0;
        let e = loop {
            if let Some(e) = case(&mut r)? {
                break e;
            }
            attempt += 1;
            report.redrawn += 1;
            if attempt == MAX_REDRAWS {
                return Err(Error::Numerical(format!("{name} case {i}: {MAX_REDRAWS} draws in a row were not smooth")));
            }
        };
        if e > report.max_error || e.is_nan() {
            report.max_error = e;
            report.worst_case = i;
        }
    }
    Ok(report)
}

fn central_difference(loss: &impl Fn(&[Tensor]) -> f64, points: &[Tensor], k: usize, i: usize, step: f64) -> f64 {
    let eval = |d: f64| {
        let mut ps = points.to_vec();
        ps[k].data_mut()[i] += d;
        loss(&ps)
    };
    (eval(step) - eval(-step)) / (2.0 * step)
}

/// Largest relative error between `analytic` and central differences of `loss`
/// at `points`, or `None` when a failing coordinate passes at a tenth of the
/// step (a kink lies within one step).
pub fn check_gradients(points: &[Tensor], analytic: &[Tensor], loss: impl Fn(&[Tensor]) -> f64) -> Option<f64> {
    let mut worst: f64 = 0.0;
    for (k, (p, g)) in points.iter().zip(analytic).enumerate() {
        let fd = finite_difference_grad(
            |q| {
                let mut ps = points.to_vec();
                ps[k] = q.clone();
                loss(&ps)
            },
            p,
            STEP,
        );
        for (i, (&a, &n)) in g.data().iter().zip(fd.data()).enumerate() {
            let e = relative_error(a, n, FLOOR);
            if e >= TOLERANCE && relative_error(a, central_difference(&loss, points, k, i, STEP / 10.0), FLOOR) < TOLERANCE {
                return None;
            }
            worst = worst.max(e);
        }
    }
    Some(worst)
}

fn conv_case(r: &mut StreamRng) -> CaseResult {
    let groups = r.random_range(1..=2);
    let cin = groups * r.random_range(1..=2);
    let k = groups * r.random_range(1..=2);
    let ext = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3)];
    let stride = [r.random_range(1..=2), r.random_range(1..=2), r.random_range(1..=2)];
    let padding = [r.random_range(0..=1), r.random_range(0..=1), r.random_range(0..=1)];
    let input = [0, 1, 2].map(|i| ext[i] + r.random_range(0..=3));
    let shape = vec![r.random_range(1..=2), cin, input[0], input[1], input[2]];
    let x = rng::uniform(r, shape, 1.0);
    let w = rng::uniform(r, vec![k, cin / groups, ext[0], ext[1], ext[2]], 1.0);
    let b = rng::uniform(r, vec![k], 1.0);
    let kernel = ConvKernel::new(w.clone(), b.clone(), stride, padding, groups)?;
    let y = conv3d(&x, &kernel)?;
    let up = rng::uniform(r, y.shape().to_vec(), 1.0);
    let g = conv3d_backward(&x, &kernel, &up)?;
    Ok(check_gradients(&[x, w, b], &[g.input, g.weights, g.bias], |p| {
        let kernel = ConvKernel::new(p[1].clone(), p[2].clone(), stride, padding, groups).expect("valid kernel");
        conv3d(&p[0], &kernel).expect("valid conv").dot(&up).expect("same shape")
    }))
}

fn softpool_case(r: &mut StreamRng) -> CaseResult {
    let kernel = [r.random_range(1..=3), r.random_range(1..=3)];
    let stride = [r.random_range(1..=2), r.random_range(1..=2)];
    let cfg = PoolConfig::new(kernel, stride, PoolMode::SoftPool, BackwardMode::ExactAutodiff)?;
    let (h, w) = (kernel[0] + r.random_range(0..=4), kernel[1] + r.random_range(0..=4));
    let shape = vec![r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3), h, w];
    let x = rng::uniform(r, shape, 2.0);
    let (y, cache) = softpool_forward(&x, &cfg)?;
    let up = rng::uniform(r, y.shape().to_vec(), 1.0);
    let dx = softpool_backward(&cache, &up, BackwardMode::ExactAutodiff)?;
    Ok(check_gradients(&[x], &[dx], |p| softpool_forward(&p[0], &cfg).expect("valid pool").0.dot(&up).expect("same shape")))
}

fn cell_case(kind: CellKind, r: &mut StreamRng) -> CaseResult {
    let (hidden, input) = (r.random_range(1..=5), r.random_range(1..=5));
    let params = CellParams::init(kind, hidden, input, r);
    let x = rng::uniform(r, vec![input], 1.0);
    let mut prev = CellState::zeros(&params);
    prev.h = rng::uniform(r, vec![hidden], 1.0).data().to_vec();
    if !prev.c.is_empty() {
        prev.c = rng::uniform(r, vec![hidden], 1.0).data().to_vec();
    }
    let up_h = rng::uniform(r, vec![hidden], 1.0);
    let up_c: Vec<f64> = if prev.c.is_empty() { Vec::new() } else { rng::uniform(r, vec![hidden], 1.0).data().to_vec() };
    let (_, cache) = cell_step(x.data(), &prev, &params)?;
    let mut grads = CellParams::zeros(kind, hidden, input);
    let (dx, dprev) = cell_step_backward(&cache, &params, up_h.data(), &up_c, &mut grads);
    let n = params.params().len();
    let mut points: Vec<Tensor> = params.params().into_iter().cloned().collect();
    let mut analytic: Vec<Tensor> = grads.params().into_iter().cloned().collect();
    points.push(x);
    analytic.push(Tensor::from_vec1(dx)?);
    points.push(Tensor::from_vec1(prev.h.clone())?);
    analytic.push(Tensor::from_vec1(dprev.h)?);
    let lstm = !prev.c.is_empty();
    if lstm {
        points.push(Tensor::from_vec1(prev.c.clone())?);
        analytic.push(Tensor::from_vec1(dprev.c)?);
    }
    Ok(check_gradients(&points, &analytic, |p| {
        let mut q = params.clone();
        for (dst, src) in q.params_mut().into_iter().zip(&p[..n]) {
            *dst = src.clone();
        }
        let state = CellState { h: p[n + 1].data().to_vec(), c: if lstm { p[n + 2].data().to_vec() } else { Vec::new() } };
        let (next, _) = cell_step(p[n].data(), &state, &q).expect("valid step");
        let c_term: f64 = next.c.iter().zip(&up_c).map(|(a, b)| a * b).sum();
        next.h.iter().zip(up_h.data()).map(|(a, b)| a * b).sum::<f64>() + c_term
    }))
}

/// A random two-block network on `[B, C, 4, 4, 4]` clips with at most 8 channels.
pub fn random_two_block_spec(r: &mut impl Rng) -> NetSpec {
    let kinds = [BlockType::Plain, BlockType::Residual, BlockType::Bottleneck, BlockType::MtConv];
    let mut c = r.random_range(1..=3);
    let blocks = (0..2)
        .map(|_| {
            let kind = kinds[r.random_range(0..kinds.len())];
            let mid = 2 * r.random_range(1..=2);
            let out = r.random_range(2..=4);
            let srtg = match kind {
                BlockType::Plain => [None, Some(Placement::Start), Some(Placement::Final)][r.random_range(0..3)],
                BlockType::Residual => [None, Some(Placement::Res), Some(Placement::Final)][r.random_range(0..3)],
                BlockType::Bottleneck => [None, Some(Placement::Mid), Some(Placement::Final)][r.random_range(0..3)],
                BlockType::MtConv => [None, Some(Placement::Final)][r.random_range(0..2)],
            };
            let delta = (kind == BlockType::MtConv).then_some(0.5);
            let b = BlockSpec { kind, channels: [c, mid, out], srtg, delta, classreg: None };
            c = out;
            b
        })
        .collect();
    NetSpec { blocks, classes: r.random_range(2..=3) }
}

/// Whole-network gradient of the cross-entropy loss, gates disabled and
/// normalisation frozen. Parameters are jittered so no ReLU sits exactly on its
/// kink.
fn net_case(r: &mut StreamRng) -> CaseResult {
    let spec = random_two_block_spec(r);
    let mut net = Net::build(&spec, r.random())?;
    net.set_gates(GateControl::Disabled);
    for p in net.params_mut() {
        let noise = rng::uniform(r, p.shape().to_vec(), 0.1);
        p.add_assign(&noise)?;
    }
    let batch = 2;
    let x = rng::uniform(r, vec![batch, spec.input_channels(), 4, 4, 4], 1.0);
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..spec.classes)).collect();
    let (_, _, grads) = net.loss_and_grads(&x, &labels, Mode::GRADCHECK)?;
    let points: Vec<Tensor> = net.params().into_iter().cloned().collect();
    Ok(check_gradients(&points, &grads, |p| {
        let mut m = net.clone();
        for (dst, src) in m.params_mut().into_iter().zip(p) {
            *dst = src.clone();
        }
        let (logits, _) = m.forward(&x, Mode::GRADCHECK).expect("valid forward");
        softmax_cross_entropy(&logits, &labels).expect("valid loss").0
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for name in SUITES {
            let report = run_suite(name, 3, 11).unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn kinks_within_a_step_are_detected() {
        let x = Tensor::from_vec1(vec![0.5, 3e-6]).unwrap();
        let abs_sum = |p: &[Tensor]| p[0].data().iter().map(|v| v.abs()).sum::<f64>();
        assert_eq!(check_gradients(std::slice::from_ref(&x), &[Tensor::from_vec1(vec![1.0, 1.0]).unwrap()], abs_sum), None);
        let wrong = Tensor::from_vec1(vec![2.0, 1.0]).unwrap();
        assert!(check_gradients(&[Tensor::from_vec1(vec![0.5, 0.5]).unwrap()], &[wrong], abs_sum).unwrap() > 0.4);
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suite("attention", 1, 0).is_err());
    }
}
