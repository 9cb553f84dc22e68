//! Multigrid cycles, the warm-up cosine learning rate and frame sampling.

use chronokit::rng;
use chronokit::schedule::{multigrid, sample_clip, CycleKind, FrameSamplerConfig, GridEntry, LrSchedule};

fn main() -> chronokit::Result<()> {
    let base = GridEntry::parse("32x16x224x224")?;
    for e in multigrid(base, CycleKind::Both) {
        println!("{e} volume drift {:+.2}%", 100.0 * e.drift(&base));
    }
    let lr = LrSchedule::cosine(0.1, 100, 1000)?;
    for n in [0, 50, 100, 550, 1000] {
        println!("iteration {n:4}: lr {:.4}", lr.rate(n));
    }
    let cfg = FrameSamplerConfig::new(120, 16, 2)?;
    let mut r = rng::stream(6, "example");
    for _ in 0..3 {
        println!("frames {:?}", sample_clip(&cfg, &mut r)?);
    }
    Ok(())
}
