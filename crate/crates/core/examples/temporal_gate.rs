//! Cyclic consistency between frame embeddings, and a residual block whose
//! recurrent attention is fused only when the gate opens.

use chronokit::layers::Mode;
use chronokit::srtg::{cyclic_consistent, BlockKind, GateControl, Placement, SrtgBlock};
use chronokit::{rng, EmbeddingSequence, Tensor};

fn main() -> chronokit::Result<()> {
    let distinct = EmbeddingSequence::new(Tensor::from_fn(vec![1, 2, 5], |i| if i < 5 { 2.0 * i as f64 } else { -2.0 * (i - 5) as f64 }))?;
    println!("a sequence against itself: {:?}", cyclic_consistent(&distinct, &distinct)?.consistent);
    let reversed = EmbeddingSequence::new(Tensor::from_fn(vec![1, 2, 5], |i| {
        let t = 4 - i % 5;
        if i < 5 { 2.0 * t as f64 } else { -2.0 * t as f64 }
    }))?;
    let report = cyclic_consistent(&distinct, &reversed)?;
    println!("against its reversal: {:?}, forward matches {:?}", report.consistent, report.forward[0]);

    let mut r = rng::stream(3, "example");
    let x = rng::uniform(&mut r, vec![2, 4, 8, 6, 6], 1.0);
    for control in [GateControl::Enabled, GateControl::ForceClosed, GateControl::Disabled] {
        let block = SrtgBlock::init(BlockKind::Simple, [4, 4, 4], Some((Placement::Final, control)), 2, &mut rng::stream(3, "block"))?;
        let (_, cache) = block.forward(&x, Mode::default())?;
        println!("{control:?}: gate states {:?}", cache.gate_states.iter().map(|s| s.name()).collect::<Vec<_>>());
    }
    Ok(())
}
