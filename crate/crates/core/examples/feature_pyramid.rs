//! Records a toy network on synthetic clips and traces the class feature
//! pyramid back from the prediction layer.

use chronokit::interpret::{backstep_traverse, BackstepConfig, PyramidReport, TraversalMode};
use chronokit::netspec::{record_activations, trace_blocks, Net, NetSpec, SyntheticDataset, SRTG_DEMO_SPEC};

fn main() -> chronokit::Result<()> {
    let net = Net::build(&NetSpec::parse(SRTG_DEMO_SPEC)?, 0)?;
    let data = SyntheticDataset::generate(2, [8, 16, 16], 0)?;
    let recording = record_activations(&net, &data.clips)?;
    let (blocks, last) = trace_blocks(&net, &data.clips, &recording, 0)?;
    for mode in [TraversalMode::FeatureWise, TraversalMode::LayerWise] {
        let report = backstep_traverse(&blocks, &net.head.weights, &last, data.labels[0], &BackstepConfig::new(0.6, 4, mode)?)?;
        println!("{mode:?}: {} edges over {} layers in {:.2?}", report.edges.len(), report.layers(), report.elapsed);
        for layer in 0..report.layers() {
            println!("  layer {layer}: features {:?}", report.selected(layer));
        }
        assert_eq!(PyramidReport::parse(&report.to_csv())?, report);
    }
    Ok(())
}
