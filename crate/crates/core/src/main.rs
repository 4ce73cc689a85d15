use aquarius_core::bench::{run_bench, BenchConfig};
use aquarius_core::estimator_loop::EstimatorKind;
use aquarius_core::experiment::{run_experiment, write_outputs, ExperimentConfig, OutputSet, RunError};
use aquarius_core::packet_model::{TraceConfig, TraceKind};
use aquarius_core::policies::PolicyKind;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "aquarius", version, about = "Simulated layer-4 load balancer with closed-loop server weighting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write report.json, metrics.csv and features.csv.
    Run(RunArgs),
    /// Run the simulation only to export the feature dataset.
    Export(RunArgs),
    /// Measure the per-packet cost of the parser and telemetry writes.
    Bench(BenchArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Workload: forloop, file or mixture.
    #[arg(long, value_parser = clap::value_parser!(TraceKind))]
    trace: Option<TraceKind>,
    /// Offered load in queries per second.
    #[arg(long)]
    rate: Option<f64>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Mean work per query in core-seconds.
    #[arg(long)]
    mean_work: Option<f64>,
    /// Server groups such as "6x2,4x4".
    #[arg(long)]
    servers: Option<String>,
    /// ecmp, wcmp, maglev or aquarius.
    #[arg(long)]
    policy: Option<PolicyKind>,
    /// Weight source for the aquarius policy: off, linear or oracle.
    #[arg(long)]
    estimator: Option<EstimatorKind>,
    /// Coefficient file for the linear estimator.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Normalization stats for the linear estimator.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Telemetry frame length (default 50).
    #[arg(long)]
    frame_ms: Option<u64>,
    /// Control loop period (default 250).
    #[arg(long)]
    period_ms: Option<u64>,
    /// Seed for the trace and all sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default "out").
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn into_config(self) -> Result<ExperimentConfig, RunError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => ExperimentConfig::new(
                TraceConfig::new(TraceKind::PoissonForloop, 400.0, 60.0, 0),
                "6x2,4x4",
                PolicyKind::Ecmp,
                EstimatorKind::Off,
                0,
            ),
        };
        if let Some(v) = self.trace {
            c.trace.kind = v;
        }
        if let Some(v) = self.rate {
            c.trace.rate_qps = v;
        }
        if let Some(v) = self.duration {
            c.trace.duration = v;
        }
        if let Some(v) = self.mean_work {
            c.trace.mean_work = v;
        }
        if let Some(v) = self.servers {
            c.servers = v;
        }
        if let Some(v) = self.policy {
            c.policy = v;
        }
        if let Some(v) = self.estimator {
            c.estimator = v;
        }
        if self.model.is_some() {
            c.model = self.model;
        }
        if self.stats.is_some() {
            c.stats = self.stats;
        }
        if let Some(v) = self.frame_ms {
            c.frame_ms = v;
        }
        if let Some(v) = self.period_ms {
            c.period_ms = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if self.out.is_some() {
            c.out = self.out;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 100_000)]
    flows: usize,
    #[arg(long, default_value = "6x2,4x4")]
    servers: String,
    #[arg(long, default_value_t = 5)]
    repeat: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

fn run(args: RunArgs, set: OutputSet) -> Result<(), RunError> {
    let config = args.into_config()?;
    let out = config.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    log::info!(
        "{} trace at {} qps for {} s on {} with {} / {}",
        config.trace.kind,
        config.trace.rate_qps,
        config.trace.duration,
        config.servers,
        config.policy,
        config.estimator
    );
    let result = run_experiment(&config)?;
    write_outputs(&result, &out, set)?;
    let s = result.summary();
    let f = &result.report.flows;
    match set {
        OutputSet::Full => println!(
            "jain {:.4}  overprovision {:.3}  cpu {:.3}  fct {:.4} s  rst {}  flows {}/{}  -> {}",
            s.mean_jain_busy,
            s.mean_overprovision_busy,
            s.mean_cpu,
            s.fct_mean,
            s.rst_total,
            f.completed,
            f.generated,
            out.display()
        ),
        OutputSet::DatasetOnly => {
            println!("{} rows -> {}", result.dataset.len(), out.join("features.csv").display())
        }
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<(), RunError> {
    let cfg = BenchConfig {
        flows: args.flows,
        servers: args.servers,
        seed: args.seed,
        repeat: args.repeat,
        ..Default::default()
    };
    let r = run_bench(&cfg).map_err(RunError::Config)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&r).expect("serializable"));
    } else {
        println!(
            "{} packets  parser+telemetry {:.1} ns/packet (median of {})  select {:.1} ns/flow",
            r.packets, r.median_ns_per_packet, cfg.repeat, r.select_ns_per_flow
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AQUARIUS_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a, OutputSet::Full),
        Command::Export(a) => run(a, OutputSet::DatasetOnly),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("aquarius: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
