//! Saliency tube of a planted hot spot, written as PGM frames to a temporary
//! directory.

use chronokit::interpret::saliency_tube;
use chronokit::tensor::io::write_pgm_frames;
use chronokit::Tensor;

fn main() -> chronokit::Result<()> {
    let mut act = Tensor::zeros(vec![2, 4, 4, 4]);
    act.set(&[0, 2, 1, 2], 3.0);
    act.set(&[1, 2, 1, 1], 1.0);
    let tube = saliency_tube(&act, &[1.0, 0.5], 0, 0.0, [8, 16, 16])?;
    let peak = (0..8).max_by(|&a, &b| {
        let s = |t: usize| tube.values.narrow(0, t..t + 1).unwrap().sum();
        s(a).total_cmp(&s(b))
    });
    println!("values in [{:.3}, {:.3}], brightest frame {peak:?}", tube.values.min(), tube.values.max());
    let dir = std::env::temp_dir().join("chronokit-saliency-example");
    let names = write_pgm_frames(&dir, &tube.values)?;
    println!("wrote {} frames to {}", names.len(), dir.display());
    Ok(())
}
