//! McNemar's test on paired classifier outcomes.

use chronokit::stats::{mcnemar, ContingencyTable};

fn main() -> chronokit::Result<()> {
    for (a, b, c, d) in [(8112, 659, 576, 4314), (8775, 473, 134, 4279), (50, 20, 18, 12)] {
        let r = mcnemar(&ContingencyTable { a, b, c, d })?;
        println!("b={b} c={c}: {}", r.to_csv_row());
    }
    Ok(())
}
