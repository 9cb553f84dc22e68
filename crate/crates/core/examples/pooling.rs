//! SoftPool halves a clip spatially; triplet selection then keeps the frames
//! that change the most.

use chronokit::pooling::{gather_frames, softpool_forward, triplet_select, BackwardMode, PoolConfig};
use chronokit::rng;
use chronokit::tensor::squeeze_spatial;

fn main() -> chronokit::Result<()> {
    let x = rng::uniform(&mut rng::stream(1, "example"), vec![1, 3, 8, 8, 8], 1.0);
    let (pooled, cache) = softpool_forward(&x, &PoolConfig::softpool_halving(BackwardMode::PaperWeighted))?;
    let first: f64 = cache.weights()[..cache.region_len()].iter().sum();
    println!("pooled {:?}; weights of the first region sum to {first:.6}", pooled.shape());
    let sel = triplet_select(&squeeze_spatial(&pooled)?, 0.5)?;
    println!("interior frame scores {:?}", sel.scores[0].iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>());
    println!("kept frames {:?}", sel.kept[0]);
    println!("gathered {:?}", gather_frames(&pooled, &sel)?.shape());
    Ok(())
}
