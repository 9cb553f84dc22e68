//! Channel split of a multi-temporal convolution and its cost as the local
//! share shrinks.

use chronokit::layers::Mode;
use chronokit::mtconv::{split_channels, MtConv};
use chronokit::pooling::{BackwardMode, PoolConfig};
use chronokit::rng;

fn main() -> chronokit::Result<()> {
    let pool = PoolConfig::softpool_halving(BackwardMode::PaperWeighted);
    for delta in [1.0, 7.0 / 8.0, 3.0 / 4.0, 1.0 / 2.0] {
        let (local, prolonged) = split_channels(64, delta)?;
        let m = MtConv::init(64, 64, delta, pool, &mut rng::stream(4, "example"))?;
        println!("delta {delta:.3}: local {local:2} prolonged {prolonged:2} flops {:>12}", m.flops([8, 14, 14]));
    }
    let m = MtConv::init(2, 8, 0.5, pool, &mut rng::stream(4, "small"))?;
    let x = rng::uniform(&mut rng::stream(4, "x"), vec![1, 2, 8, 8, 8], 1.0);
    let (y, cache) = m.forward(&x, Mode::default())?;
    let (sx, sl) = cache.selections().expect("prolonged branch present");
    println!("output {:?}; frames kept from input {:?}, from local branch {:?}", y.shape(), sx.kept[0], sl.kept[0]);
    Ok(())
}
