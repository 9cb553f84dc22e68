//! A 3×3×3 convolution on a random clip, checked against finite differences.

use chronokit::rng;
use chronokit::tensor::{conv3d, conv3d_backward, finite_difference_grad, max_relative_error, ConvKernel};

fn main() -> chronokit::Result<()> {
    let mut r = rng::stream(0, "example");
    let x = rng::uniform(&mut r, vec![1, 2, 4, 6, 6], 1.0);
    let kernel = ConvKernel::same(rng::uniform(&mut r, vec![3, 2, 3, 3, 3], 0.5), rng::uniform(&mut r, vec![3], 0.1), 1)?;
    let y = conv3d(&x, &kernel)?;
    println!("input {:?} -> output {:?}", x.shape(), y.shape());
    let up = rng::uniform(&mut r, y.shape().to_vec(), 1.0);
    let grads = conv3d_backward(&x, &kernel, &up)?;
    let fd = finite_difference_grad(|p| conv3d(p, &kernel).unwrap().dot(&up).unwrap(), &x, 1e-5);
    println!("input-gradient relative error {:.2e}", max_relative_error(&grads.input, &fd, 1e-4));
    Ok(())
}
