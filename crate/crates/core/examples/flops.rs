//! FLOP counts of a plain residual block with and without recurrent gating.

use chronokit::netspec::{count_flops, NetSpec};

fn main() -> chronokit::Result<()> {
    let spec = NetSpec::parse("kind=residual channels=256:256:256 srtg=final delta=none classreg=none\n")?;
    let report = count_flops(&spec, [8, 14, 14])?;
    let b = report.blocks[0];
    println!("block {} FLOPs, attention {} ({:.3}%)", b.base, b.attention, 100.0 * b.attention as f64 / b.base as f64);
    print!("{}", report.to_csv());
    Ok(())
}
