//! Command-line front end. Exit codes: 0 success, 2 usage or missing input,
//! 3 compile error, 4 runtime fault, 5 output mismatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{self, Table};
use crate::compiler::{compile, CompileOptions, Graph, OpKind, Pass, DEFAULT_PASSES};
use crate::machine::MachineConfig;
use crate::program::ScheduledProgram;
use crate::sim::engine::decode_tensor;
use crate::sim::oracle::{self, Values};
use crate::sim::tensorio::{self, TensorIoError};
use crate::sim::verify::verify_with;
use crate::sim::{run, RunOptions};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_COMPILE: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;
pub const EXIT_MISMATCH: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "npusim", version, about = "Dataflow NPU simulator and graph compiler")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Compile a graph file into a program file.
    Compile {
        graph: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        machine: MachineArgs,
        #[command(flatten)]
        passes: PassArgs,
    },
    /// Simulate a program file.
    Run {
        program: PathBuf,
        #[command(flatten)]
        machine: MachineArgs,
        /// Directory with `<input>.bin` (and optional `<input>.json`) files.
        #[arg(long)]
        inputs: PathBuf,
        /// Trace-event JSON output.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Directory for output tensors.
        #[arg(long)]
        outputs: Option<PathBuf>,
        /// Issue one instruction or descriptor at a time machine-wide.
        #[arg(long)]
        serialize: bool,
    },
    /// Compile, simulate and compare against the reference evaluation.
    Check {
        graph: PathBuf,
        #[command(flatten)]
        machine: MachineArgs,
        #[command(flatten)]
        passes: PassArgs,
        /// Input tensor directory; seeded random inputs when absent.
        #[arg(long)]
        inputs: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a benchmark suite and print its cycle table.
    Bench {
        #[arg(value_parser = ["micro", "pipeline", "all"])]
        suite: String,
        #[command(flatten)]
        machine: MachineArgs,
    },
}

#[derive(Debug, Args)]
struct MachineArgs {
    /// Machine configuration (TOML); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PassArgs {
    /// Comma-separated pass list (simplify, layout, fuse, dce).
    #[arg(long, value_delimiter = ',', conflicts_with = "no_opt")]
    passes: Option<Vec<Pass>>,
    /// Skip all graph passes.
    #[arg(long)]
    no_opt: bool,
    #[arg(long)]
    tpbs: Option<u32>,
    #[arg(long)]
    chunks: Option<u32>,
}

impl PassArgs {
    fn options(&self) -> CompileOptions {
        let passes = if self.no_opt { Vec::new() } else { self.passes.clone().unwrap_or_else(|| DEFAULT_PASSES.to_vec()) };
        CompileOptions { passes, tpbs: self.tpbs, chunks: self.chunks }
    }
}

struct Failure(i32, String);

impl Failure {
    fn usage(msg: impl ToString) -> Self {
        Failure(EXIT_USAGE, msg.to_string())
    }
}

impl From<TensorIoError> for Failure {
    fn from(e: TensorIoError) -> Self {
        Failure::usage(e)
    }
}

fn machine(a: &MachineArgs) -> Result<MachineConfig, Failure> {
    match &a.config {
        Some(p) => MachineConfig::load(p).map_err(Failure::usage),
        None => Ok(MachineConfig::default()),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn load_graph(path: &Path) -> Result<Graph, Failure> {
    Graph::parse(&read(path)?).map_err(|e| Failure(EXIT_COMPILE, format!("{}: {e}", path.display())))
}

/// Runs the command line `args` (program name first), writing reports to
/// `out` and diagnostics to `err`. Returns the exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    match dispatch(cli.cmd, out) {
        Ok(code) => code,
        Err(Failure(code, msg)) => {
            let _ = writeln!(err, "error: {msg}");
            code
        }
    }
}

fn dispatch(cmd: Cmd, out: &mut dyn Write) -> Result<i32, Failure> {
    match cmd {
        Cmd::Compile { graph, output, machine: m, passes } => {
            let cfg = machine(&m)?;
            let g = load_graph(&graph)?;
            let c = compile(&g, &cfg, &passes.options()).map_err(|e| Failure(EXIT_COMPILE, e.to_string()))?;
            std::fs::write(&output, c.program.to_text())
                .map_err(|e| Failure::usage(format!("{}: {e}", output.display())))?;
            let _ = writeln!(
                out,
                "{}: {} instructions, {} DMA descriptors, {} TPBs, {} chunks, estimated {} cycles",
                output.display(),
                c.program.instruction_count(),
                c.program.dmas.len(),
                c.placement.tpbs_used,
                c.plan.chunks,
                c.estimated_cycles(&cfg)
            );
            Ok(0)
        }
        Cmd::Run { program, machine: m, inputs, trace, outputs, serialize } => {
            let cfg = machine(&m)?;
            let p = ScheduledProgram::from_text(&read(&program)?)
                .map_err(|e| Failure::usage(format!("{}: {e}", program.display())))?;
            let raw = tensorio::read_inputs(&inputs, &p.inputs)?;
            let report = run(&p, &cfg, &raw, RunOptions { serialize });
            if let Some(t) = &trace {
                report.trace.write(t).map_err(|e| Failure(EXIT_RUNTIME, format!("{}: {e}", t.display())))?;
            }
            if let Some(f) = report.fault {
                return Err(Failure(EXIT_RUNTIME, f.to_string()));
            }
            if let Some(dir) = &outputs {
                tensorio::write_outputs(dir, &p.outputs, &report.outputs).map_err(|e| Failure(EXIT_RUNTIME, e.to_string()))?;
            }
            let _ = writeln!(out, "makespan {} cycles", report.makespan);
            let _ = writeln!(out, "instructions {}", report.stats.instructions);
            let _ = writeln!(out, "dma_descriptors {}", report.stats.dma_descriptors);
            let _ = writeln!(out, "trace_sha256 {}", report.trace.hash());
            Ok(0)
        }
        Cmd::Check { graph, machine: m, passes, inputs, seed, trace } => {
            let cfg = machine(&m)?;
            let g = load_graph(&graph)?;
            let values = match &inputs {
                Some(dir) => read_graph_inputs(&g, dir)?,
                None => oracle::random_inputs(&g, seed),
            };
            let v = verify_with(&g, &cfg, &passes.options(), values, RunOptions::default())
                .map_err(|e| Failure(EXIT_COMPILE, e.to_string()))?;
            if let Some(t) = &trace {
                v.report.trace.write(t).map_err(|e| Failure(EXIT_RUNTIME, format!("{}: {e}", t.display())))?;
            }
            if let Some(f) = &v.report.fault {
                return Err(Failure(EXIT_RUNTIME, f.to_string()));
            }
            for m in &v.mismatches {
                let _ = writeln!(out, "MISMATCH {}: error {:e} > tolerance {:e}", m.output, m.error, m.tolerance);
            }
            let _ = writeln!(out, "{}: makespan {} cycles, {} outputs", graph.display(), v.report.makespan, v.outputs.len());
            Ok(if v.mismatches.is_empty() { 0 } else { EXIT_MISMATCH })
        }
        Cmd::Bench { suite, machine: m } => {
            let cfg = machine(&m)?;
            let mut rows = Vec::new();
            if suite != "pipeline" {
                rows.extend(bench::micro(&cfg).map_err(|e| Failure(EXIT_RUNTIME, e))?);
            }
            if suite != "micro" {
                rows.extend(bench::pipeline(&cfg).map_err(|e| Failure(EXIT_RUNTIME, e))?.rows());
            }
            let _ = write!(out, "{}", Table(&rows));
            Ok(0)
        }
    }
}

fn read_graph_inputs(g: &Graph, dir: &Path) -> Result<Values, Failure> {
    let mut values = Values::new();
    for n in g.nodes.iter().filter(|n| n.op == OpKind::Input) {
        let bytes = tensorio::read_tensor(dir, &n.name, n.dtype, &n.shape)?;
        values.insert(n.name.clone(), decode_tensor(n.dtype, &bytes));
    }
    Ok(values)
}
