//! Trains the two toy networks on the synthetic motion clips and prints their curves.

use chronokit::netspec::{train_demo, Net, NetSpec, SyntheticDataset, TrainConfig, MTCONV_DEMO_SPEC, SRTG_DEMO_SPEC};

fn main() -> chronokit::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let data = SyntheticDataset::generate(64, [8, 16, 16], 0)?;
    for (name, text) in [("srtg", SRTG_DEMO_SPEC), ("mtconv", MTCONV_DEMO_SPEC)] {
        let mut net = Net::build(&NetSpec::parse(text)?, 0)?;
        let mut cfg = TrainConfig::new(epochs, 0.05);
        cfg.stop_at = Some(1.0);
        let start = std::time::Instant::now();
        let curve = train_demo(&mut net, &data, &cfg)?;
        for e in &curve.epochs {
            println!("{name} epoch {:3} loss {:.4} acc {:.3}", e.epoch, e.loss, e.accuracy);
        }
        println!("{name}: {} epochs in {:.1?}", curve.epochs.len(), start.elapsed());
    }
    Ok(())
}
