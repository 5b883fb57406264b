use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use domino::isa::{self, Bundle, IsaError};
use domino::mapper::{self, MapError, MapOptions, SyncMode};
use domino::metrics::{self, EnergyReport, EnergyTable, MetricsError, RunInfo};
use domino::nn_model::{self, ChipConfig, Layout, ModelError, NetworkParams, NetworkSpec, QuantTensor};
use domino::oracle;
use domino::sim::{self, SimConfig, SimError, TraceLevel};

/// Environment variable naming a chip file used when `--chip` is absent.
const CHIP_ENV: &str = "DOMINO_CHIP";

mod code {
    pub const IO: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const PARSE: u8 = 3;
    pub const CAPACITY: u8 = 4;
    pub const SIMULATION: u8 = 5;
    pub const MISMATCH: u8 = 6;
}

/// Stdout writes that end the process quietly when the reader goes away.
macro_rules! out {
    ($($t:tt)*) => { emit(format_args!($($t)*)) };
}

macro_rules! outln {
    ($($t:tt)*) => { emit(format_args!("{}\n", format_args!($($t)*))) };
}

fn emit(args: std::fmt::Arguments) {
    use std::io::Write;
    if let Err(e) = std::io::stdout().lock().write_fmt(args) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: stdout: {e}");
        std::process::exit(code::IO as i32);
    }
}

#[derive(Parser)]
#[command(name = "domino", version, about = "Compile, simulate and report on CIM tile meshes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Column,
    Square,
}

#[derive(Clone, Copy, ValueEnum)]
enum TraceArg {
    Off,
    Hash,
    Events,
    Full,
}

#[derive(Subcommand)]
enum Cmd {
    /// Map a network, generate schedule tables and write a bundle.
    Compile {
        /// Network file, or the name of a bundled network.
        net: String,
        /// Chip file; defaults to $DOMINO_CHIP, then a 30x30 mesh of 256x256 tiles.
        #[arg(long)]
        chip: Option<PathBuf>,
        /// full-sync or reuse=N.
        #[arg(long, default_value = "full-sync", value_parser = parse_mode)]
        mode: SyncMode,
        /// Force one layout for every CONV layer.
        #[arg(long, value_enum)]
        layout: Option<LayoutArg>,
        /// Store schedule tables without run-length compression.
        #[arg(long)]
        no_compress: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run a bundle and check every result against the reference model.
    Run {
        bundle: PathBuf,
        /// Input feature map file.
        #[arg(long, conflicts_with = "random")]
        ifm: Option<PathBuf>,
        /// Seed for random input images.
        #[arg(long)]
        random: Option<u64>,
        /// Number of random images.
        #[arg(long, default_value_t = 1)]
        images: usize,
        /// Seed for the random weights.
        #[arg(long, default_value_t = 0)]
        weights: u64,
        #[arg(long, value_enum, default_value = "hash")]
        trace: TraceArg,
        /// Where to write trace lines (with --trace full).
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Where to write the output feature maps.
        #[arg(long)]
        ofm_out: Option<PathBuf>,
        /// Skip the reference check and carry no values.
        #[arg(long)]
        timing_only: bool,
        #[arg(long, default_value_t = 10_000_000)]
        max_steps: u64,
        /// Flat key = value report file.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compare flat report files side by side.
    Report { files: Vec<PathBuf> },
    /// List the schedule tables of a bundle.
    Disasm { bundle: PathBuf },
    /// Weight utilization per layer for several crossbar sizes.
    Sweep {
        net: String,
        #[arg(long, value_delimiter = ',', default_value = "128,256,512")]
        sizes: Vec<usize>,
    },
}

struct Fail {
    code: u8,
    msg: String,
}

impl Fail {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Fail { code, msg: msg.into() }
    }
}

/// Every model error is a problem with the input description.
fn model_code(_: &ModelError) -> u8 {
    code::PARSE
}

fn map_code(e: &MapError) -> u8 {
    match e {
        MapError::Model(m) => model_code(m),
        MapError::Capacity { .. } | MapError::TooTall { .. } => code::CAPACITY,
    }
}

fn isa_code(e: &IsaError) -> u8 {
    match e {
        IsaError::Capacity { .. } | IsaError::NoPort { .. } | IsaError::NoTile { .. } => code::CAPACITY,
        _ => code::PARSE,
    }
}

impl From<ModelError> for Fail {
    fn from(e: ModelError) -> Self {
        Fail::new(model_code(&e), e.to_string())
    }
}

impl From<MapError> for Fail {
    fn from(e: MapError) -> Self {
        Fail::new(map_code(&e), e.to_string())
    }
}

impl From<IsaError> for Fail {
    fn from(e: IsaError) -> Self {
        Fail::new(isa_code(&e), e.to_string())
    }
}

impl From<MetricsError> for Fail {
    fn from(e: MetricsError) -> Self {
        let c = match &e {
            MetricsError::Model(m) => model_code(m),
            MetricsError::Map(m) => map_code(m),
            MetricsError::ZeroDivision(_) => code::SIMULATION,
            _ => code::PARSE,
        };
        Fail::new(c, e.to_string())
    }
}

impl From<SimError> for Fail {
    fn from(e: SimError) -> Self {
        let c = match &e {
            SimError::Model(m) => model_code(m),
            SimError::Map(m) => map_code(m),
            SimError::Isa(i) => isa_code(i),
            _ => code::SIMULATION,
        };
        Fail::new(c, e.to_string())
    }
}

fn parse_mode(s: &str) -> Result<SyncMode, String> {
    match s {
        "full-sync" | "full" => Ok(SyncMode::FullSync),
        _ => match s.strip_prefix("reuse=").and_then(|r| r.parse::<usize>().ok()) {
            Some(r) if r > 0 => Ok(SyncMode::Reuse(r)),
            _ => Err(format!("expected full-sync or reuse=N, got `{s}`")),
        },
    }
}

fn read(path: &Path) -> Result<String, Fail> {
    fs::read_to_string(path).map_err(|e| Fail::new(code::IO, format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Fail> {
    fs::write(path, text).map_err(|e| Fail::new(code::IO, format!("{}: {e}", path.display())))
}

fn load_net(arg: &str) -> Result<NetworkSpec, Fail> {
    let path = Path::new(arg);
    if path.exists() {
        let text = read(path)?;
        nn_model::parse_network(&text).map_err(|e| Fail::new(code::PARSE, format!("{arg}: {e}")))
    } else if nn_model::BUNDLED.contains(&arg) {
        Ok(nn_model::bundled(arg)?)
    } else {
        Err(Fail::new(code::IO, format!("{arg}: no such file or bundled network ({})", nn_model::BUNDLED.join(", "))))
    }
}

fn load_chip(arg: Option<PathBuf>) -> Result<ChipConfig, Fail> {
    let path = arg.or_else(|| std::env::var_os(CHIP_ENV).map(PathBuf::from));
    match path {
        None => Ok(ChipConfig::default()),
        Some(p) => {
            let text = read(&p)?;
            ChipConfig::parse(&text).map_err(|e| Fail::new(code::PARSE, format!("{}: {e}", p.display())))
        }
    }
}

fn load_bundle(path: &Path) -> Result<Bundle, Fail> {
    let text = read(path)?;
    Bundle::from_text(&text).map_err(|e| Fail::new(code::PARSE, format!("{}: {e}", path.display())))
}

fn compile(
    net: String,
    chip: Option<PathBuf>,
    mode: SyncMode,
    layout: Option<LayoutArg>,
    no_compress: bool,
    output: Option<PathBuf>,
) -> Result<(), Fail> {
    let net = load_net(&net)?;
    let chip = load_chip(chip)?;
    let map = MapOptions {
        layout: layout.map(|l| match l {
            LayoutArg::Column => Layout::Column,
            LayoutArg::Square => Layout::Square,
        }),
        ..Default::default()
    };
    let (mut plans, sync) = mapper::plan_network(&net, chip.pe, mode, map)?;
    mapper::place_blocks(&mut plans, chip.a_r, chip.a_c)?;
    let bundle = isa::compile(&net, &plans, &chip, mode, map, isa::GenOptions { compress: !no_compress })?;
    let util = mapper::utilization(&plans, &net, chip.pe);
    outln!(
        "{}: {} tiles on a {}x{} mesh, {}, interval {} steps",
        net.name,
        sync.total_tiles,
        chip.a_r,
        chip.a_c,
        isa::mode_text(mode),
        sync.interval
    );
    outln!("{:<6} {:>6} {:>6} {:>6} {:>7}", "layer", "d", "r", "tiles", "util");
    for (l, p) in sync.layers.iter().zip(&plans) {
        let u = util.layers.iter().find(|u| u.layer == p.layer).map_or(0.0, |u| u.utilization);
        outln!("{:<6} {:>6} {:>6} {:>6} {:>6.1}%", p.layer, l.d, l.r, p.tiles, 100.0 * u);
    }
    outln!("average utilization {:.1}%", 100.0 * util.average);
    if let Some(out) = output {
        write(&out, &bundle.to_text())?;
        outln!("wrote {}", out.display());
    }
    Ok(())
}

struct RunArgs {
    bundle: PathBuf,
    ifm: Option<PathBuf>,
    random: Option<u64>,
    images: usize,
    weights: u64,
    trace: TraceArg,
    trace_out: Option<PathBuf>,
    ofm_out: Option<PathBuf>,
    timing_only: bool,
    max_steps: u64,
    output: Option<PathBuf>,
}

fn run(a: RunArgs) -> Result<(), Fail> {
    let bundle = load_bundle(&a.bundle)?;
    let net = &bundle.network;
    let params = NetworkParams::random(net, a.weights);
    let inputs: Vec<QuantTensor> = match (&a.ifm, a.random) {
        (Some(p), _) => {
            let t = QuantTensor::from_text(&read(p)?).map_err(|e| Fail::new(code::PARSE, format!("{}: {e}", p.display())))?;
            vec![t]
        }
        (None, seed) => (0..a.images as u64).map(|i| nn_model::random_input(net, seed.unwrap_or(0) + i)).collect(),
    };
    let mut cfg = SimConfig::new(bundle.chip, bundle.mode);
    cfg.gen = isa::GenOptions { compress: bundle.compress };
    cfg.max_steps = a.max_steps;
    cfg.timing_only = a.timing_only;
    cfg.trace = match a.trace {
        TraceArg::Off => TraceLevel::Off,
        TraceArg::Hash => TraceLevel::Hash,
        TraceArg::Events => TraceLevel::Events,
        TraceArg::Full => TraceLevel::Full,
    };
    let res = sim::run_bundle(&bundle, &params, &inputs, &cfg)?;
    let tiles = res.plans.iter().map(|p| p.tiles).sum();
    let info = RunInfo {
        network: net.name.clone(),
        images: inputs.len(),
        tiles,
        f_step: bundle.chip.f_step,
        analytic_interval: Some(res.sync.interval as u64),
    };
    let report = metrics::report(&res.stats, &EnergyTable::default(), &info)?;
    out!("{}", report.to_table());
    outln!("trace hash {:016x}", res.trace.hash);
    if let Some(p) = &a.trace_out {
        let mut text = res.trace.lines.join("\n");
        text.push('\n');
        write(p, &text)?;
    }
    if let Some(p) = &a.ofm_out {
        let text: Vec<String> = res.outputs.iter().map(QuantTensor::to_text).collect();
        write(p, &text.join("\n"))?;
    }
    let mut verdict = "UNCHECKED";
    if !a.timing_only {
        verdict = "EQUIVALENT";
        for (i, (x, out)) in inputs.iter().zip(&res.outputs).enumerate() {
            let want = oracle::forward(net, &params, x)?;
            if want.last().map(|t| &t.values) != Some(&out.values) {
                verdict = "MISMATCH";
                eprintln!("image {i}: simulator output differs from the reference");
            }
        }
    }
    outln!("{verdict}");
    if let Some(p) = &a.output {
        write(p, &format!("{}verdict = {verdict}\ntrace_hash = {:016x}\n", report.to_kv(), res.trace.hash))?;
    }
    if verdict == "MISMATCH" {
        return Err(Fail::new(code::MISMATCH, "equivalence check failed"));
    }
    Ok(())
}

fn report(files: Vec<PathBuf>) -> Result<(), Fail> {
    if files.is_empty() {
        return Err(Fail::new(code::USAGE, "report: at least one report file is required"));
    }
    let mut reports = Vec::new();
    for f in &files {
        let text = read(f)?;
        // run adds lines the energy report does not know about
        let body: String =
            text.lines().filter(|l| !l.starts_with("verdict") && !l.starts_with("trace_hash")).map(|l| format!("{l}\n")).collect();
        reports.push(EnergyReport::from_kv(&body).map_err(|e| Fail::new(code::PARSE, format!("{}: {e}", f.display())))?);
    }
    out!("{}", metrics::comparison_table(&reports));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Compile { net, chip, mode, layout, no_compress, output } => compile(net, chip, mode, layout, no_compress, output),
        Cmd::Run { bundle, ifm, random, images, weights, trace, trace_out, ofm_out, timing_only, max_steps, output } => {
            run(RunArgs { bundle, ifm, random, images, weights, trace, trace_out, ofm_out, timing_only, max_steps, output })
        }
        Cmd::Report { files } => report(files),
        Cmd::Disasm { bundle } => load_bundle(&bundle).map(|b| out!("{}", isa::disassemble(&b))),
        Cmd::Sweep { net, sizes } => load_net(&net).and_then(|n| {
            let r = metrics::utilization_report(&n, &sizes, MapOptions::default())?;
            out!("{}", r.to_text());
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
