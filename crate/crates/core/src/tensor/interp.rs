use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Per output index: the source indices and weights that produce it.
type Taps = Vec<Vec<(usize, f64)>>;

/// Align-corners source coordinate of target index `j` when resizing `n -> m`.
fn source_coord(j: usize, n: usize, m: usize) -> f64 {
    if m == 1 || n == 1 {
        0.0
    } else {
        j as f64 * (n - 1) as f64 / (m - 1) as f64
    }
}

fn linear_taps(n: usize, m: usize) -> Taps {
    (0..m)
        .map(|j| {
            let s = source_coord(j, n, m);
            let i0 = (s.floor() as usize).min(n - 1);
            let frac = s - i0 as f64;
            if i0 + 1 < n && frac > 0.0 {
                vec![(i0, 1.0 - frac), (i0 + 1, frac)]
            } else {
                vec![(i0, 1.0)]
            }
        })
        .collect()
}

/// Second derivatives of the natural cubic spline through unit-spaced knots.
fn natural_second_derivatives(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // Thomas algorithm on the interior system M[i-1] + 4 M[i] + M[i+1] = 6 Δ²y.
    let k = n - 2;
    let mut c = vec![0.0; k];
    let mut d = vec![0.0; k];
    for r in 0..k {
        let rhs = 6.0 * (y[r + 2] - 2.0 * y[r + 1] + y[r]);
        let (prev_c, prev_d) = if r == 0 { (0.0, 0.0) } else { (c[r - 1], d[r - 1]) };
        let denom = 4.0 - prev_c;
        c[r] = 1.0 / denom;
        d[r] = (rhs - prev_d) / denom;
    }
    for r in (0..k).rev() {
        let next = if r + 1 < k { m[r + 2] } else { 0.0 };
        m[r + 1] = d[r] - c[r] * next;
    }
    m
}

/// Evaluates the natural cubic spline through knots `y` (at 0, 1, …, n−1) at
/// each position. A single knot extends as a constant.
pub fn natural_spline_eval(y: &[f64], positions: &[f64]) -> Vec<f64> {
    let n = y.len();
    if n == 0 {
        return vec![0.0; positions.len()];
    }
    if n == 1 {
        return vec![y[0]; positions.len()];
    }
    let m = natural_second_derivatives(y);
    positions
        .iter()
        .map(|&s| {
            let s = s.clamp(0.0, (n - 1) as f64);
            let i = (s.floor() as usize).min(n - 2);
            let t = s - i as f64;
            let u = 1.0 - t;
            u * y[i] + t * y[i + 1] + ((u * u * u - u) * m[i] + (t * t * t - t) * m[i + 1]) / 6.0
        })
        .collect()
}

/// The spline is linear in the knot values, so its taps are the responses to unit knots.
fn spline_taps(n: usize, m: usize) -> Taps {
    let positions: Vec<f64> = (0..m).map(|j| source_coord(j, n, m)).collect();
    let mut taps = vec![Vec::new(); m];
    let mut unit = vec![0.0; n];
    for i in 0..n {
        unit[i] = 1.0;
        for (j, w) in natural_spline_eval(&unit, &positions).into_iter().enumerate() {
            if w != 0.0 {
                taps[j].push((i, w));
            }
        }
        unit[i] = 0.0;
    }
    taps
}

fn apply_axis<S: Scalar>(input: &Tensor<S>, axis: usize, taps: &Taps) -> Tensor<S> {
    let shape = input.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    let m = taps.len();
    let x = input.data();
    let mut out = vec![S::zero(); outer * m * inner];
    for o in 0..outer {
        for (j, row) in taps.iter().enumerate() {
            let dst = &mut out[(o * m + j) * inner..(o * m + j + 1) * inner];
            for &(i, w) in row {
                let w = S::from_f64(w);
                let src = &x[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + w * s;
                }
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = m;
    Tensor::new(new_shape, out).expect("resized shape is valid")
}

/// Adjoint of [`apply_axis`]: scatters gradients back through the taps.
fn apply_axis_transposed<S: Scalar>(grad: &Tensor<S>, axis: usize, taps: &Taps, n: usize) -> Tensor<S> {
    let shape = grad.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let m = taps.len();
    let g = grad.data();
    let mut out = vec![S::zero(); outer * n * inner];
    for o in 0..outer {
        for (j, row) in taps.iter().enumerate() {
            let src = &g[(o * m + j) * inner..(o * m + j + 1) * inner];
            for &(i, w) in row {
                let w = S::from_f64(w);
                let dst = &mut out[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + w * s;
                }
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = n;
    Tensor::new(new_shape, out).expect("resized shape is valid")
}

fn check_target<S: Scalar>(input: &Tensor<S>, target: [usize; 3], what: &str) -> Result<usize> {
    if input.rank() < 3 {
        return shape_err(format!("{what}: need at least 3 axes (…, T, H, W), got {:?}", input.shape()));
    }
    if target.contains(&0) {
        return shape_err(format!("{what}: target extents must be >= 1, got {target:?}"));
    }
    Ok(input.rank() - 3)
}

/// Separable align-corners linear interpolation of the last three axes to `target`.
pub fn trilinear_resize<S: Scalar>(input: &Tensor<S>, target: [usize; 3]) -> Result<Tensor<S>> {
    let base = check_target(input, target, "trilinear_resize")?;
    let mut cur = input.clone();
    for k in 0..3 {
        let axis = base + k;
        let n = cur.dim(axis);
        if n != target[k] {
            cur = apply_axis(&cur, axis, &linear_taps(n, target[k]));
        }
    }
    Ok(cur)
}

/// Gradient of [`trilinear_resize`] with respect to its input.
pub fn trilinear_resize_backward<S: Scalar>(
    grad: &Tensor<S>,
    input_extents: [usize; 3],
) -> Result<Tensor<S>> {
    let base = check_target(grad, input_extents, "trilinear_resize_backward")?;
    let mut cur = grad.clone();
    for k in (0..3).rev() {
        let axis = base + k;
        let m = cur.dim(axis);
        let n = input_extents[k];
        if n != m {
            cur = apply_axis_transposed(&cur, axis, &linear_taps(n, m), n);
        }
    }
    Ok(cur)
}

/// Separable natural cubic spline resize of the last three axes, spatial axes
/// first and then time.
pub fn spline3_resize<S: Scalar>(input: &Tensor<S>, target: [usize; 3]) -> Result<Tensor<S>> {
    let base = check_target(input, target, "spline3_resize")?;
    let mut cur = input.clone();
    for k in [1, 2, 0] {
        let axis = base + k;
        let n = cur.dim(axis);
        if n != target[k] {
            cur = apply_axis(&cur, axis, &spline_taps(n, target[k]));
        }
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, max_relative_error};

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::full(vec![2, 3, 2, 3], 0.7);
        for y in [trilinear_resize(&x, [5, 4, 7]).unwrap(), spline3_resize(&x, [5, 4, 7]).unwrap()] {
            assert_eq!(y.shape(), &[2, 5, 4, 7]);
            assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-14));
        }
    }

    #[test]
    fn linear_ramp_is_fixed_point() {
        let x = Tensor::<f64>::from_fn(vec![3, 4, 2], |i| {
            let (t, h, w) = (i / 8, (i / 2) % 4, i % 2);
            t as f64 * 0.5 - h as f64 + 2.0 * w as f64
        });
        let y = trilinear_resize(&x, [5, 7, 3]).unwrap();
        for t in 0..5 {
            for h in 0..7 {
                for w in 0..3 {
                    let (st, sh, sw) = (t as f64 * 2.0 / 4.0, h as f64 * 3.0 / 6.0, w as f64 * 1.0 / 2.0);
                    let expect = st * 0.5 - sh + 2.0 * sw;
                    assert!((y.get(&[t, h, w]) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn corners_are_preserved() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 3], |i| (i as f64).sin());
        let y = trilinear_resize(&x, [4, 5, 5]).unwrap();
        assert_eq!(y.get(&[0, 0, 0]), x.get(&[0, 0, 0]));
        assert_eq!(y.get(&[3, 4, 4]), x.get(&[1, 2, 2]));
    }

    #[test]
    fn unit_extent_axis_extends_constantly() {
        let x = Tensor::<f64>::from_fn(vec![1, 2, 2], |i| i as f64);
        let y = spline3_resize(&x, [3, 2, 2]).unwrap();
        for t in 0..3 {
            for h in 0..2 {
                for w in 0..2 {
                    assert_eq!(y.get(&[t, h, w]), x.get(&[0, h, w]));
                }
            }
        }
    }

    #[test]
    fn spline_reproduces_knots() {
        let y = [1.0, -2.0, 0.5, 3.0, 2.0];
        let pos: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let out = natural_spline_eval(&y, &pos);
        for (a, b) in out.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn trilinear_backward_matches_finite_differences() {
        let x = Tensor::<f64>::from_fn(vec![1, 3, 2, 3], |i| ((i * 7 % 5) as f64) * 0.3 - 0.4);
        let up = Tensor::<f64>::from_fn(vec![1, 4, 5, 2], |i| ((i * 3 % 7) as f64) * 0.2 - 0.5);
        let g = trilinear_resize_backward(&up, [3, 2, 3]).unwrap();
        let fd = finite_difference_grad(|p| trilinear_resize(p, [4, 5, 2]).unwrap().dot(&up).unwrap(), &x, 1e-5);
        let e = max_relative_error(&g, &fd, 1e-4);
        assert!(e < 1e-6, "{e}");
    }
}
