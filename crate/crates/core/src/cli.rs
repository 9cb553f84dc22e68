//! Command-line entry point. Every subcommand prints its resolved configuration
//! to stderr, writes tabular results as CSV to stdout, and writes files only
//! below `--out-dir`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::classreg::ClassReg;
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, SUITES};
use crate::interpret::{backstep_traverse, saliency_tube, BackstepConfig, TraversalMode};
use crate::layers::Mode;
use crate::mtconv::MtBlock;
use crate::netspec::{
    batch_item, count_flops, record_activations, trace_blocks, train_demo, Net, NetSpec, SyntheticDataset,
    TrainConfig, MTCONV_DEMO_SPEC, SRTG_DEMO_SPEC,
};
use crate::pooling::{gather_frames, softpool_forward, triplet_select, BackwardMode, PoolConfig, PoolMode};
use crate::rng;
use crate::schedule::{
    sample_clip, schedule_csv, CycleKind, FrameSamplerConfig, GridEntry, LrSchedule, DEFAULT_WARMUP,
};
use crate::srtg::{BlockKind, GateControl, Placement, SrtgBlock};
use crate::stats::{mcnemar_with_alpha, read_tables_csv, ContingencyTable, DEFAULT_ALPHA};
use crate::tensor::io::{read_stv1_any, write_pgm_frames, write_stv1, Bundle};
use crate::tensor::{squeeze_spatial, Tensor};

/// Environment variable capping the worker-thread count (0 = one per core).
pub const THREADS_VAR: &str = "CHRONOKIT_THREADS";

/// File holding the input clip inside a recording directory.
pub const CLIP_FILE: &str = "clip.stv1";

#[derive(Debug, Parser)]
#[command(name = "chronokit", version, about = "Spatio-temporal network blocks, interpretation and schedules")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare backward passes with finite differences.
    Gradcheck(GradcheckArgs),
    /// SoftPool and/or triplet frame selection on an STV1 tensor.
    Pool(PoolArgs),
    /// Run one convolutional block with a recurrent temporal gate.
    SrtgDemo(SrtgDemoArgs),
    /// Run a stack of multi-temporal blocks.
    MtconvDemo(MtconvDemoArgs),
    /// Class-regularise recorded activations.
    ClassregDemo(ClassregDemoArgs),
    /// Saliency tube of a recorded clip as PGM frames.
    Saliency(SaliencyArgs),
    /// Class feature pyramid edge report of a recorded clip.
    Backstep(BackstepArgs),
    /// Multigrid batch schedule as CSV.
    Schedule(ScheduleArgs),
    /// Draw frame indices for training clips.
    Sample(SampleArgs),
    /// McNemar's test on paired outcomes.
    Mcnemar(McnemarArgs),
    /// Per-block FLOP counts of a network.
    Flops(FlopsArgs),
    /// Train a toy network on synthetic motion clips.
    TrainDemo(TrainDemoArgs),
    /// Record the block activations of a network on a clip.
    Record(RecordArgs),
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run every suite.
    #[arg(long)]
    pub all: bool,
    /// Suites to run (conv3d, softpool, lstm, gru, net).
    #[arg(long = "suite")]
    pub suites: Vec<String>,
    #[arg(long, default_value_t = 50)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct OutDir {
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    /// `[B, C, T, H, W]` tensor.
    #[arg(long)]
    pub input: PathBuf,
    /// softpool, max, avg or none.
    #[arg(long, default_value = "softpool")]
    pub mode: String,
    #[arg(long, default_value_t = 2)]
    pub kernel: usize,
    #[arg(long, default_value_t = 2)]
    pub stride: usize,
    /// Fraction of frames kept by triplet selection; no selection when absent.
    #[arg(long)]
    pub keep: Option<f64>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct SrtgDemoArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// plain, residual or bottleneck.
    #[arg(long, default_value = "residual")]
    pub kind: String,
    /// `mid:out` widths.
    #[arg(long, default_value = "8:8")]
    pub widths: String,
    #[arg(long, default_value = "final")]
    pub placement: String,
    /// enabled, disabled, open or closed.
    #[arg(long, default_value = "enabled")]
    pub gate: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct MtconvDemoArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Local share of the mtconv channels, e.g. 7/8.
    #[arg(long, default_value = "7/8")]
    pub delta: String,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value = "enabled")]
    pub gate: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct ClassregDemoArgs {
    /// `[B, C, T, H, W]` activations.
    #[arg(long)]
    pub activation: PathBuf,
    /// `[N, C']` prediction weights.
    #[arg(long)]
    pub weights: PathBuf,
    /// `[C, C']` remapping; drawn from the seed when absent.
    #[arg(long)]
    pub remap: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct RecordingArgs {
    /// Network description file.
    #[arg(long)]
    pub spec: PathBuf,
    /// Directory written by `record`.
    #[arg(long)]
    pub recording: PathBuf,
    /// Seed the network was built with.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub class: usize,
    /// Batch item of the recording.
    #[arg(long, default_value_t = 0)]
    pub item: usize,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[command(flatten)]
    pub rec: RecordingArgs,
    /// Channel threshold as a fraction of the strongest response.
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct BackstepArgs {
    #[command(flatten)]
    pub rec: RecordingArgs,
    #[arg(long, default_value_t = 0.6)]
    pub theta: f64,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    /// feature or layer.
    #[arg(long, default_value = "feature")]
    pub mode: String,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Base `BxTxHxW`.
    #[arg(long)]
    pub base: String,
    /// long, short or both.
    #[arg(long, default_value = "long")]
    pub cycles: String,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub clip_len: usize,
    #[arg(long)]
    pub frames: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct McnemarArgs {
    #[arg(long)]
    pub a: Option<u64>,
    #[arg(long)]
    pub b: Option<u64>,
    #[arg(long)]
    pub c: Option<u64>,
    #[arg(long)]
    pub d: Option<u64>,
    /// CSV of tables with an `a,b,c,d` header.
    #[arg(long)]
    pub tables: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Clip extents `TxHxW`.
    #[arg(long, default_value = "8x14x14")]
    pub extents: String,
}

#[derive(Debug, Args)]
pub struct TrainDemoArgs {
    /// Network description file; overrides `--preset`.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// srtg or mtconv.
    #[arg(long, default_value = "srtg")]
    pub preset: String,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// constant or cosine.
    #[arg(long, default_value = "constant")]
    pub schedule: String,
    #[arg(long, default_value_t = 0)]
    pub warmup: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub clips: usize,
    /// Clip extents `TxHxW`.
    #[arg(long, default_value = "8x16x16")]
    pub extents: String,
    /// Stop once an epoch reaches this accuracy.
    #[arg(long)]
    pub target: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write curve.csv here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecordArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// `[B, C, T, H, W]` clip; synthetic clips when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub clips: usize,
    #[arg(long, default_value = "8x16x16")]
    pub extents: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutDir,
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit status: 0 on success, 1 on invalid input, 2 on numerical failure.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    eprintln!("config: {:?}", cli.command);
    match run(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => 2,
        _ => 1,
    }
}

fn configure_threads() {
    let Ok(raw) = std::env::var(THREADS_VAR) else { return };
    match raw.trim().parse::<usize>() {
        // the global pool can only be built once per process
        Ok(n) => drop(rayon::ThreadPoolBuilder::new().num_threads(n).build_global()),
        Err(_) => eprintln!("warning: ignoring {THREADS_VAR}={raw:?}; expected a non-negative integer"),
    }
}

fn run(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Gradcheck(a) => gradcheck(a),
        Command::Pool(a) => pool(a).map(|_| 0),
        Command::SrtgDemo(a) => srtg_demo(a).map(|_| 0),
        Command::MtconvDemo(a) => mtconv_demo(a).map(|_| 0),
        Command::ClassregDemo(a) => classreg_demo(a).map(|_| 0),
        Command::Saliency(a) => saliency(a).map(|_| 0),
        Command::Backstep(a) => backstep(a).map(|_| 0),
        Command::Schedule(a) => schedule(a).map(|_| 0),
        Command::Sample(a) => sample(a).map(|_| 0),
        Command::Mcnemar(a) => mcnemar_cmd(a).map(|_| 0),
        Command::Flops(a) => flops(a).map(|_| 0),
        Command::TrainDemo(a) => train(a).map(|_| 0),
        Command::Record(a) => record(a).map(|_| 0),
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return invalid(format!("input file {} does not exist", path.display()));
    }
    Ok(())
}

fn require_dir(path: &Path) -> Result<()> {
    if !path.is_dir() {
        return invalid(format!("directory {} does not exist", path.display()));
    }
    Ok(())
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn read_spec(path: &Path) -> Result<NetSpec> {
    require_file(path)?;
    NetSpec::parse(&fs::read_to_string(path)?)
}

fn parse_extents(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s.split('x').map(|p| p.parse().map_err(|_| ())).collect::<std::result::Result<_, _>>().or_else(|_| invalid(format!("extents {s:?} must look like TxHxW")))?;
    match parts[..] {
        [t, h, w] if t > 0 && h > 0 && w > 0 => Ok([t, h, w]),
        _ => invalid(format!("extents {s:?} must be three positive integers TxHxW")),
    }
}

fn parse_ratio(s: &str) -> Result<f64> {
    let v = match s.split_once('/') {
        Some((n, d)) => match (n.parse::<f64>(), d.parse::<f64>()) {
            (Ok(n), Ok(d)) if d != 0.0 => n / d,
            _ => return invalid(format!("bad fraction {s:?}")),
        },
        None => s.parse().or_else(|_| invalid(format!("bad number {s:?}")))?,
    };
    Ok(v)
}

fn parse_gate(s: &str) -> Result<GateControl> {
    match s {
        "enabled" => Ok(GateControl::Enabled),
        "disabled" => Ok(GateControl::Disabled),
        "open" => Ok(GateControl::ForceOpen),
        "closed" => Ok(GateControl::ForceClosed),
        _ => invalid(format!("gate must be enabled, disabled, open or closed, got {s:?}")),
    }
}

fn read_clip(path: &Path) -> Result<Tensor> {
    require_file(path)?;
    let t = read_stv1_any(path)?;
    t.dims5("input clip")?;
    Ok(t)
}

fn gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let names: Vec<String> = if a.all || a.suites.is_empty() { SUITES.iter().map(|s| s.to_string()).collect() } else { a.suites.clone() };
    if a.cases == 0 {
        return invalid("need at least one case per suite");
    }
    println!("suite,cases,max_relative_error,redrawn,passed");
    let mut ok = true;
    for name in &names {
        let r = run_suite(name, a.cases, a.seed)?;
        println!("{},{},{:.3e},{},{}", r.name, r.cases, r.max_error, r.redrawn, r.passed());
        ok &= r.passed();
    }
    Ok(if ok { 0 } else { 2 })
}

fn pool(a: &PoolArgs) -> Result<()> {
    let x = read_clip(&a.input)?;
    let mode = match a.mode.as_str() {
        "softpool" => Some(PoolMode::SoftPool),
        "max" => Some(PoolMode::Max),
        "avg" => Some(PoolMode::Average),
        "none" => None,
        m => return invalid(format!("pool mode must be softpool, max, avg or none, got {m:?}")),
    };
    if mode.is_none() && a.keep.is_none() {
        return invalid("nothing to do: give a pooling mode or --keep");
    }
    prepare_out(&a.out.out_dir)?;
    let mut y = match mode {
        Some(m) => softpool_forward(&x, &PoolConfig::new([a.kernel; 2], [a.stride; 2], m, BackwardMode::PaperWeighted)?)?.0,
        None => x,
    };
    let mut csv = String::from("item,frame,score,kept\n");
    if let Some(keep) = a.keep {
        let sel = triplet_select(&squeeze_spatial(&y)?, keep)?;
        for (b, (kept, scores)) in sel.kept.iter().zip(&sel.scores).enumerate() {
            for (i, s) in scores.iter().enumerate() {
                let frame = i + 1;
                csv.push_str(&format!("{b},{frame},{s:.6},{}\n", kept.contains(&frame)));
            }
        }
        y = gather_frames(&y, &sel)?;
    }
    write_stv1(a.out.out_dir.join("pooled.stv1"), &y)?;
    fs::write(a.out.out_dir.join("selection.csv"), csv)?;
    println!("{}", shape_string(&y));
    Ok(())
}

fn shape_string(t: &Tensor) -> String {
    t.shape().iter().map(|e| e.to_string()).collect::<Vec<_>>().join("x")
}

fn srtg_demo(a: &SrtgDemoArgs) -> Result<()> {
    let x = read_clip(&a.input)?;
    let kind = match a.kind.as_str() {
        "plain" => BlockKind::Plain,
        "residual" => BlockKind::Simple,
        "bottleneck" => BlockKind::Bottleneck,
        k => return invalid(format!("block kind must be plain, residual or bottleneck, got {k:?}")),
    };
    let widths: Vec<usize> = a.widths.split(':').map(|s| s.parse().unwrap_or(0)).collect();
    let [mid, out] = widths[..] else { return invalid(format!("widths {:?} must be mid:out", a.widths)) };
    let gate = parse_gate(&a.gate)?;
    let placement = Placement::parse(&a.placement)?.map(|p| (p, gate));
    prepare_out(&a.out.out_dir)?;
    let block = SrtgBlock::init(kind, [x.dim(1), mid, out], placement, crate::netspec::SR_LAYERS, &mut rng::stream(a.seed, "srtg-demo"))?;
    let (y, cache) = block.forward(&x, Mode::default())?;
    write_stv1(a.out.out_dir.join("output.stv1"), &y)?;
    let mut csv = String::from("item,state\n");
    for (b, s) in cache.gate_states.iter().enumerate() {
        csv.push_str(&format!("{b},{}\n", s.name()));
    }
    fs::write(a.out.out_dir.join("gates.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn mtconv_demo(a: &MtconvDemoArgs) -> Result<()> {
    let x = read_clip(&a.input)?;
    let delta = parse_ratio(&a.delta)?;
    let gate = parse_gate(&a.gate)?;
    if a.blocks == 0 || a.width == 0 {
        return invalid("need at least one block and a positive width");
    }
    prepare_out(&a.out.out_dir)?;
    let pool = PoolConfig::softpool_halving(BackwardMode::PaperWeighted);
    let mut r = rng::stream(a.seed, "mtconv-demo");
    let mut cur = x;
    let mut csv = String::from("block,item,source,frame\n");
    for i in 0..a.blocks {
        let block = MtBlock::init([cur.dim(1), a.width, a.width], delta, Some(gate), crate::netspec::SR_LAYERS, pool, &mut r)?;
        let (y, cache) = block.forward(&cur, Mode::default())?;
        if let Some((sx, sl)) = cache.mtconv.selections() {
            for (source, sel) in [("input", sx), ("local", sl)] {
                for (b, kept) in sel.kept.iter().enumerate() {
                    for f in kept {
                        csv.push_str(&format!("{i},{b},{source},{f}\n"));
                    }
                }
            }
        }
        cur = y;
    }
    write_stv1(a.out.out_dir.join("output.stv1"), &cur)?;
    fs::write(a.out.out_dir.join("frames.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn classreg_demo(a: &ClassregDemoArgs) -> Result<()> {
    let act = read_clip(&a.activation)?;
    require_file(&a.weights)?;
    let weights = read_stv1_any(&a.weights)?;
    let [_, class_ch] = weights.dims2("prediction weights")?;
    let mut cr = ClassReg::init(act.dim(1), class_ch, a.lambda, &mut rng::stream(a.seed, "classreg-demo"))?;
    if let Some(path) = &a.remap {
        require_file(path)?;
        let remap = read_stv1_any(path)?;
        remap.expect_shape(cr.remap.shape(), "remapping")?;
        cr.remap = remap;
    }
    prepare_out(&a.out.out_dir)?;
    let (y, cache) = cr.forward(&act, &weights)?;
    write_stv1(a.out.out_dir.join("regularised.stv1"), &y)?;
    let mut csv = String::from("item,class\n");
    for (b, c) in cache.classes.iter().enumerate() {
        csv.push_str(&format!("{b},{c}\n"));
    }
    fs::write(a.out.out_dir.join("classes.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

struct Loaded {
    net: Net,
    clip: Tensor,
    bundle: Bundle,
}

fn load_recording(rec: &RecordingArgs) -> Result<Loaded> {
    let spec = read_spec(&rec.spec)?;
    require_dir(&rec.recording)?;
    let clip_path = rec.recording.join(CLIP_FILE);
    let clip = read_clip(&clip_path)?;
    let bundle = Bundle::read(&rec.recording)?;
    if bundle.len() != spec.depth() {
        return invalid(format!("recording holds {} layers but the network has {}", bundle.len(), spec.depth()));
    }
    if rec.item >= clip.dim(0) {
        return invalid(format!("item {} out of range for {} recorded clips", rec.item, clip.dim(0)));
    }
    if rec.class >= spec.classes {
        return invalid(format!("class {} out of range for {} classes", rec.class, spec.classes));
    }
    Ok(Loaded { net: Net::build(&spec, rec.seed)?, clip, bundle })
}

fn saliency(a: &SaliencyArgs) -> Result<()> {
    let l = load_recording(&a.rec)?;
    let last = &l.bundle.entries.last().expect("non-empty bundle").1;
    let act = batch_item(last, a.rec.item)?;
    let c = l.net.head.weights.dim(1);
    let weights = &l.net.head.weights.data()[a.rec.class * c..(a.rec.class + 1) * c];
    let [_, _, t, h, w] = l.clip.dims5("clip")?;
    let vol = saliency_tube(&act, weights, a.rec.class, a.tau, [t, h, w])?;
    prepare_out(&a.out.out_dir)?;
    let names = write_pgm_frames(&a.out.out_dir, &vol.values)?;
    if vol.empty {
        eprintln!("warning: threshold {} excluded every channel; frames are blank", a.tau);
    }
    for n in names {
        println!("{n}");
    }
    Ok(())
}

fn backstep(a: &BackstepArgs) -> Result<()> {
    let cfg = BackstepConfig::new(a.theta, a.depth, TraversalMode::parse(&a.mode)?)?;
    let l = load_recording(&a.rec)?;
    let (blocks, final_act) = trace_blocks(&l.net, &l.clip, &l.bundle, a.rec.item)?;
    let report = backstep_traverse(&blocks, &l.net.head.weights, &final_act, a.rec.class, &cfg)?;
    prepare_out(&a.out.out_dir)?;
    let text = report.to_csv();
    fs::write(a.out.out_dir.join("report.csv"), &text)?;
    eprintln!("traversal: {} edges in {:.3?}{}", report.edges.len(), report.elapsed, if report.truncated { " (depth truncated)" } else { "" });
    print!("{text}");
    Ok(())
}

fn schedule(a: &ScheduleArgs) -> Result<()> {
    let base = GridEntry::parse(&a.base)?;
    let kind = CycleKind::parse(&a.cycles)?;
    if !(a.lr > 0.0 && a.lr.is_finite()) {
        return invalid(format!("learning rate must be positive, got {}", a.lr));
    }
    print!("{}", schedule_csv(base, kind, a.lr));
    Ok(())
}

fn sample(a: &SampleArgs) -> Result<()> {
    let cfg = FrameSamplerConfig::new(a.clip_len, a.frames, a.stride)?;
    let mut r = rng::stream(a.seed, "sample");
    let header: Vec<String> = (0..a.frames).map(|i| format!("frame_{i}")).collect();
    println!("draw,{}", header.join(","));
    for d in 0..a.count {
        let idx: Vec<String> = sample_clip(&cfg, &mut r)?.iter().map(|i| i.to_string()).collect();
        println!("{d},{}", idx.join(","));
    }
    Ok(())
}

fn mcnemar_cmd(a: &McnemarArgs) -> Result<()> {
    let tables = match (&a.tables, a.a, a.b, a.c, a.d) {
        (Some(path), None, None, None, None) => {
            require_file(path)?;
            read_tables_csv(&fs::read_to_string(path)?)?
        }
        (None, Some(a_), Some(b), Some(c), Some(d)) => vec![ContingencyTable { a: a_, b, c, d }],
        _ => return invalid("give either all of --a --b --c --d or --tables"),
    };
    for t in &tables {
        println!("{}", mcnemar_with_alpha(t, a.alpha)?.to_csv_row());
    }
    Ok(())
}

fn flops(a: &FlopsArgs) -> Result<()> {
    let spec = read_spec(&a.spec)?;
    let report = count_flops(&spec, parse_extents(&a.extents)?)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn train(a: &TrainDemoArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => read_spec(p)?,
        None => match a.preset.as_str() {
            "srtg" => NetSpec::parse(SRTG_DEMO_SPEC)?,
            "mtconv" => NetSpec::parse(MTCONV_DEMO_SPEC)?,
            p => return invalid(format!("preset must be srtg or mtconv, got {p:?}")),
        },
    };
    if spec.input_channels() != 1 {
        return invalid("the synthetic clips have one channel; the first block must take 1 input channel");
    }
    if let Some(dir) = &a.out_dir {
        prepare_out(dir)?;
    }
    let data = SyntheticDataset::generate(a.clips, parse_extents(&a.extents)?, a.seed)?;
    let mut cfg = TrainConfig::new(a.epochs, a.lr);
    cfg.batch = a.batch;
    cfg.stop_at = a.target;
    cfg.lr = match a.schedule.as_str() {
        "constant" => LrSchedule::constant(a.lr),
        "cosine" => {
            let per_epoch = a.clips.div_ceil(a.batch.max(1));
            let warmup = if a.warmup == 0 { (a.epochs * per_epoch / 10).min(DEFAULT_WARMUP) } else { a.warmup };
            LrSchedule::cosine(a.lr, warmup, a.epochs * per_epoch)?
        }
        s => return invalid(format!("schedule must be constant or cosine, got {s:?}")),
    };
    let mut net = Net::build(&spec, a.seed)?;
    let curve = train_demo(&mut net, &data, &cfg)?;
    let csv = curve.to_csv();
    if let Some(dir) = &a.out_dir {
        fs::write(dir.join("curve.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn record(a: &RecordArgs) -> Result<()> {
    let spec = read_spec(&a.spec)?;
    let clip = match &a.input {
        Some(p) => read_clip(p)?,
        None => SyntheticDataset::generate(a.clips, parse_extents(&a.extents)?, a.seed)?.clips,
    };
    let net = Net::build(&spec, a.seed)?;
    let bundle = record_activations(&net, &clip)?;
    prepare_out(&a.out.out_dir)?;
    bundle.write(&a.out.out_dir)?;
    write_stv1(a.out.out_dir.join(CLIP_FILE), &clip)?;
    println!("position,name,shape");
    for (i, (name, t)) in bundle.entries.iter().enumerate() {
        println!("{i},{name},{}", shape_string(t));
    }
    Ok(())
}
