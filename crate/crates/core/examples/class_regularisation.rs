//! Class regularisation rescales channels by the remapped weights of the
//! most likely class; at lambda = 1 it leaves activations untouched.

use chronokit::classreg::{normalise_weights, ClassReg, DEFAULT_SCHEDULE};
use chronokit::rng;

fn main() -> chronokit::Result<()> {
    println!("row [0.2, 1.0, 0.6] at lambda 0.8 -> {:?}", normalise_weights(&[0.2, 1.0, 0.6], 0.8));
    let mut r = rng::stream(5, "example");
    let a = rng::uniform(&mut r, vec![2, 4, 4, 5, 5], 1.0).map(f64::abs);
    let w = rng::uniform(&mut r, vec![3, 6], 1.0);
    for lambda in DEFAULT_SCHEDULE.iter().copied().chain([1.0]) {
        let cr = ClassReg::init(4, 6, lambda, &mut rng::stream(5, "remap"))?;
        let (out, cache) = cr.forward(&a, &w)?;
        println!("lambda {lambda}: classes {:?}, max change {:.4}", cache.classes, out.max_abs_diff(&a));
    }
    Ok(())
}
