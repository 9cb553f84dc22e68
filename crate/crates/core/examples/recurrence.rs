//! Two-layer LSTM and GRU stacks over a short embedding sequence.

use chronokit::recurrence::{run_sequence, CellKind, RecurrentStack};
use chronokit::{rng, EmbeddingSequence};

fn main() -> chronokit::Result<()> {
    let mut r = rng::stream(2, "example");
    let seq = EmbeddingSequence::new(rng::uniform(&mut r, vec![1, 4, 6], 1.0))?;
    for kind in [CellKind::Lstm, CellKind::Gru] {
        let stack = RecurrentStack::init(kind, 2, 4, 4, &mut r);
        let h = run_sequence(&stack, &seq)?;
        let last: Vec<String> = h.frames_of(0).last().unwrap().iter().map(|v| format!("{v:+.3}")).collect();
        println!("{}: final hidden state [{}]", kind.name(), last.join(", "));
    }
    Ok(())
}
