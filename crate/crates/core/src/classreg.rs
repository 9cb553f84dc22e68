//! Class regularisation: scale a layer's channels by the normalised weights of
//! the class the layer currently agrees with most.

use rand::Rng;

use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor;

/// Affection rates for four successive insertion points, shallow to deep.
pub const DEFAULT_SCHEDULE: [f64; 4] = [0.9, 0.8, 0.7, 0.6];

/// Each rate must lie in (0, 1] and no rate may exceed the one before it.
pub fn validate_schedule(rates: &[f64]) -> Result<()> {
    for (i, &l) in rates.iter().enumerate() {
        if !(l > 0.0 && l <= 1.0) {
            return arg_err(format!("affection rate {l} at position {i} outside (0, 1]"));
        }
        if i > 0 && l > rates[i - 1] {
            return arg_err(format!("affection rate rises from {} to {l} at position {i}", rates[i - 1]));
        }
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return arg_err(format!("affection rate must lie in [0, 1], got {lambda}"));
    }
    Ok(())
}

/// `ReLU(remap · W_n)` for every class row: `[N, C'] → [N, C]` with `remap: [C, C']`.
pub fn remap_class_weights(class_weights: &Tensor, remap: &Tensor) -> Result<Tensor> {
    let [n, cw] = class_weights.dims2("class weights")?;
    let [c, cr] = remap.dims2("remap weights")?;
    if cw != cr {
        return Err(Error::Shape(format!("remap expects {cr} class-weight columns, got {cw}")));
    }
    let (w, r) = (class_weights.data(), remap.data());
    Ok(Tensor::from_fn(vec![n, c], |i| {
        let (row, ch) = (i / c, i % c);
        let s: f64 = (0..cw).map(|k| r[ch * cw + k] * w[row * cw + k]).sum();
        s.max(0.0)
    }))
}

/// Mean over every axis after the channel axis: `[B, C, ...] → [B, C]`.
pub fn pool_channels(a: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 {
        return Err(Error::Shape(format!("expected [B, C, ...], got {:?}", a.shape())));
    }
    let (b, c) = (a.dim(0), a.dim(1));
    let plane = a.len() / (b * c).max(1);
    let d = a.data();
    Ok(Tensor::from_fn(vec![b, c], |i| d[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64))
}

/// Per batch item, the class whose remapped row has the largest summed product
/// with the pooled activation. Ties go to the lowest class index.
pub fn select_class(a: &Tensor, mapped: &Tensor) -> Result<Vec<usize>> {
    let pooled = pool_channels(a)?;
    let [n, c] = mapped.dims2("remapped class weights")?;
    if pooled.dim(1) != c {
        return Err(Error::Shape(format!("activation has {} channels, class weights {c}", pooled.dim(1))));
    }
    if n == 0 {
        return arg_err("no classes to select from");
    }
    let m = mapped.data();
    Ok((0..pooled.dim(0))
        .map(|b| {
            let abar = &pooled.data()[b * c..(b + 1) * c];
            let mut best = (0, f64::NEG_INFINITY);
            for k in 0..n {
                let s: f64 = m[k * c..(k + 1) * c].iter().zip(abar).map(|(w, x)| w * x).sum();
                if s > best.1 {
                    best = (k, s);
                }
            }
            best.0
        })
        .collect())
}

/// Min-max map of a weight row into `[λ, 1]`. A constant row maps to ones.
pub fn normalise_weights(row: &[f64], lambda: f64) -> Vec<f64> {
    let (lo, hi) = min_max(row);
    if !(hi > lo) {
        return vec![1.0; row.len()];
    }
    row.iter().map(|&w| lambda + (w - lo) * (1.0 - lambda) / (hi - lo)).collect()
}

fn min_max(row: &[f64]) -> (f64, f64) {
    row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| (lo.min(w), hi.max(w)))
}

/// Index of the first minimum and first maximum.
fn arg_min_max(row: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, &w) in row.iter().enumerate() {
        if w < row[lo] {
            lo = i;
        }
        if w > row[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

/// Multiply every channel of `a: [B, C, ...]` by the matching per-sample factor in `scales: [B, C]`.
pub fn scale_channels(a: &Tensor, scales: &Tensor) -> Result<Tensor> {
    let (b, c) = (a.dim(0), a.dim(1));
    scales.expect_shape(&[b, c], "channel scales")?;
    let plane = a.len() / (b * c).max(1);
    let s = scales.data();
    Ok(Tensor::from_fn(a.shape().to_vec(), |i| a.data()[i] * s[i / plane]))
}

/// One-shot functional form: remap, select, normalise and scale.
pub fn class_regularise(a: &Tensor, class_weights: &Tensor, remap: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok(ClassReg { remap: remap.clone(), lambda }.forward(a, class_weights)?.0)
}

/// Trainable remap with a fixed affection rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReg {
    /// `[C, C']`: layer channels by prediction-layer channels.
    pub remap: Tensor,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct ClassRegCache {
    input: Tensor,
    class_weights: Tensor,
    mapped: Tensor,
    pub classes: Vec<usize>,
    scales: Tensor,
}

impl ClassRegCache {
    /// Per-sample channel multipliers, `[B, C]`.
    pub fn scales(&self) -> &Tensor {
        &self.scales
    }
}

impl ClassReg {
    pub fn init(channels: usize, class_channels: usize, lambda: f64, rng: &mut impl Rng) -> Result<Self> {
        check_lambda(lambda)?;
        let bound = (3.0 / class_channels as f64).sqrt();
        Ok(ClassReg { remap: crate::rng::uniform(rng, vec![channels, class_channels], bound), lambda })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.remap]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.remap]
    }

    pub fn forward(&self, a: &Tensor, class_weights: &Tensor) -> Result<(Tensor, ClassRegCache)> {
        check_lambda(self.lambda)?;
        let mapped = remap_class_weights(class_weights, &self.remap)?;
        let classes = select_class(a, &mapped)?;
        let c = mapped.dim(1);
        let mut scales = Vec::with_capacity(classes.len() * c);
        for &k in &classes {
            scales.extend(normalise_weights(&mapped.data()[k * c..(k + 1) * c], self.lambda));
        }
        let scales = Tensor::new(vec![classes.len(), c], scales)?;
        let out = scale_channels(a, &scales)?;
        let cache =
            ClassRegCache { input: a.clone(), class_weights: class_weights.clone(), mapped, classes, scales };
        Ok((out, cache))
    }

    /// Returns `(d_input, [d_remap])`. The class weights receive no gradient.
    pub fn backward(&self, cache: &ClassRegCache, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let a = &cache.input;
        grad.expect_shape(a.shape(), "class regularisation gradient")?;
        let d_input = scale_channels(grad, &cache.scales)?;
        let [n, c] = cache.mapped.dims2("remapped class weights")?;
        let cw = cache.class_weights.dim(1);
        let plane = a.len() / (a.dim(0) * c).max(1);
        let mut d_mapped = vec![0.0; n * c];
        for (b, &k) in cache.classes.iter().enumerate() {
            let row = &cache.mapped.data()[k * c..(k + 1) * c];
            let (lo, hi) = min_max(row);
            if !(hi > lo) {
                continue;
            }
            let range = hi - lo;
            let (ilo, ihi) = arg_min_max(row);
            let coef = (1.0 - self.lambda) / range;
            let mut d_lo = 0.0;
            let mut d_hi = 0.0;
            for j in 0..c {
                let base = (b * c + j) * plane;
                let gs: f64 =
                    grad.data()[base..base + plane].iter().zip(&a.data()[base..base + plane]).map(|(g, x)| g * x).sum();
                let u = (row[j] - lo) / range;
                d_mapped[k * c + j] += coef * gs;
                d_lo -= coef * gs * (1.0 - u);
                d_hi -= coef * gs * u;
            }
            d_mapped[k * c + ilo] += d_lo;
            d_mapped[k * c + ihi] += d_hi;
        }
        let w = cache.class_weights.data();
        let mut d_remap = Tensor::zeros(vec![c, cw]);
        for row in 0..n {
            for ch in 0..c {
                let g = d_mapped[row * c + ch];
                if g == 0.0 || cache.mapped.data()[row * c + ch] <= 0.0 {
                    continue;
                }
                for kk in 0..cw {
                    d_remap.data_mut()[ch * cw + kk] += g * w[row * cw + kk];
                }
            }
        }
        Ok((d_input, vec![d_remap]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::{finite_difference_grad, max_relative_error};

    #[test]
    fn identity_remap_keeps_nonnegative_weights() {
        let w = Tensor::new(vec![2, 3], vec![0.5, 0.0, 2.0, 1.0, 3.0, 0.25]).unwrap();
        let eye = Tensor::from_fn(vec![3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(remap_class_weights(&w, &eye).unwrap(), w);
        let neg = w.scale(-1.0);
        assert!(remap_class_weights(&neg, &eye).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn selection_examples() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::new(vec![1, 2, 1, 1, 1], vec![1.0, 0.0]).unwrap();
        assert_eq!(select_class(&a, &m).unwrap(), vec![0]);
        let flat = Tensor::ones(vec![3, 2]);
        let a = Tensor::new(vec![1, 2, 1, 1, 1], vec![0.3, 0.7]).unwrap();
        assert_eq!(select_class(&a, &flat).unwrap(), vec![0]);
    }

    #[test]
    fn normalisation_examples() {
        let v = normalise_weights(&[1.0, 2.0, 3.0], 0.6);
        for (x, e) in v.iter().zip([0.6, 0.8, 1.0]) {
            assert!((x - e).abs() < 1e-12);
        }
        assert_eq!(normalise_weights(&[1.0, 5.0, 3.0], 1.0), vec![1.0; 3]);
        assert_eq!(normalise_weights(&[0.0, 4.0, 1.0], 0.0), vec![0.0, 1.0, 0.25]);
        assert_eq!(normalise_weights(&[2.0, 2.0], 0.3), vec![1.0, 1.0]);
    }

    #[test]
    fn unit_rate_passes_through() {
        let mut r = rng::stream(1, "cr");
        let a = rng::uniform(&mut r, vec![2, 3, 2, 2, 2], 1.0);
        let w = rng::uniform(&mut r, vec![4, 5], 1.0);
        let remap = rng::uniform(&mut r, vec![3, 5], 1.0);
        assert_eq!(class_regularise(&a, &w, &remap, 1.0).unwrap(), a);
    }

    #[test]
    fn schedule_validation() {
        assert!(validate_schedule(&DEFAULT_SCHEDULE).is_ok());
        assert!(validate_schedule(&[0.8, 0.9]).is_err());
        assert!(validate_schedule(&[0.0]).is_err());
    }

    #[test]
    fn gradients_reach_input_and_remap_only() {
        let mut r = rng::stream(2, "crgrad");
        let mut cr = ClassReg::init(3, 4, 0.6, &mut r).unwrap();
        cr.remap = cr.remap.map(f64::abs);
        let a = rng::uniform(&mut r, vec![2, 3, 2, 2, 2], 1.0);
        let w = rng::uniform(&mut r, vec![3, 4], 1.0).map(f64::abs);
        let (y, cache) = cr.forward(&a, &w).unwrap();
        let up = rng::uniform(&mut r, y.shape().to_vec(), 1.0);
        let (da, grads) = cr.backward(&cache, &up).unwrap();
        let fd = finite_difference_grad(|p| cr.forward(p, &w).unwrap().0.dot(&up).unwrap(), &a, 1e-5);
        assert!(max_relative_error(&da, &fd, 1e-4) < 1e-4);
        let fd = finite_difference_grad(
            |p| ClassReg { remap: p.clone(), lambda: 0.6 }.forward(&a, &w).unwrap().0.dot(&up).unwrap(),
            &cr.remap,
            1e-5,
        );
        assert!(max_relative_error(&grads[0], &fd, 1e-4) < 1e-4);
        assert!(grads[0].data().iter().any(|&g| g != 0.0));
    }
}
