use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use splitvit::adc::MergeVector;
use splitvit::check::run_checks;
use splitvit::codec::CodecKind;
use splitvit::config::RunConfig;
use splitvit::data::generate_synthetic;
use splitvit::harness::{self, load_dataset, run_client, run_experiment, RunSummary, CONNECT_PATIENCE};
use splitvit::transport::{tcp_connect, TcpServer, TransportKind};
use splitvit::wire::Dtype;
use splitvit::Error;

#[derive(Parser)]
#[command(name = "splitvit", version, about = "Split learning of a small vision transformer under a communication budget")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration with both roles in this process.
    Run(RunArgs),
    /// Train every combination of codecs, ratios and seeds.
    Sweep(SweepArgs),
    /// Serve the server role over TCP.
    Serve(ServeArgs),
    /// Train as the client role against a `serve` process.
    Client(RunArgs),
    /// Write the synthetic dataset to a file.
    GenData(GenArgs),
    /// Run the numerical self-checks.
    Check,
}

fn parse_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

#[derive(Args)]
struct Common {
    /// Flat JSON configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Merged activations per batch.
    #[arg(long)]
    clusters: Option<usize>,
    /// Tokens kept per merged activation.
    #[arg(long)]
    tokens: Option<usize>,
    /// Values kept per sample for topk and randtopk.
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    bottleneck_width: Option<usize>,
    /// Samples superposed per slot.
    #[arg(long)]
    superposition: Option<usize>,
    /// cls_score, cls_token or avg_token.
    #[arg(long, value_parser = parse_name::<MergeVector>)]
    merge_vector: Option<MergeVector>,
    #[arg(long)]
    split_point: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Budget in base epochs of communication.
    #[arg(long)]
    budget_epochs: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    max_iterations: Option<u64>,
    /// in-process or tcp.
    #[arg(long)]
    transport: Option<TransportKind>,
    #[arg(long)]
    addr: Option<String>,
    /// f32 or f64 payloads on the wire.
    #[arg(long, value_parser = parse_name::<Dtype>)]
    wire: Option<Dtype>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset file; the synthetic set is used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
}

impl Common {
    fn base(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_env();
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            )*};
        }
        macro_rules! set_opt {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = Some(v.clone());
                }
            )*};
        }
        set!(merge_vector, split_point, batch_size, budget_epochs, lr, eval_every, transport, addr, wire, out);
        set!(samples_per_class, noise, data_seed);
        set_opt!(clusters, tokens, topk, bottleneck_width, superposition, max_iterations, data);
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// base, adc, topk, randtopk, bottlenet or c3sl.
    #[arg(long)]
    codec: Option<CodecKind>,
    /// Target compression ratio.
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, Error> {
        let mut cfg = self.common.base()?;
        if let Some(codec) = self.codec {
            cfg.codec = codec;
        }
        if self.xi.is_some() {
            cfg.xi = self.xi;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.setup()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated codecs.
    #[arg(long, value_delimiter = ',')]
    codec: Vec<CodecKind>,
    /// Comma-separated ratios.
    #[arg(long, value_delimiter = ',')]
    xi: Vec<f64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    addr: String,
    /// Sessions to serve before exiting; 0 serves forever.
    #[arg(long, default_value_t = 1)]
    sessions: usize,
}

#[derive(Args)]
struct GenArgs {
    /// Flat JSON configuration file supplying the dataset settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn print_summary(s: &RunSummary, dir: &std::path::Path) {
    println!(
        "{} xi={:.4} [{}] seed={} iterations={} bits={:.4e} val={:.4} test={:.4} -> {}",
        s.codec,
        s.xi,
        s.params,
        s.seed,
        s.iterations,
        s.bits,
        s.val_accuracy,
        s.test_accuracy,
        dir.display()
    );
}

fn run(args: RunArgs) -> Result<(), Error> {
    let cfg = args.config()?;
    let data = load_dataset(&cfg)?;
    let dir = harness::run_dir(&cfg);
    let outcome = run_experiment(&cfg, &data, Some(&dir))?;
    print_summary(&outcome.summary, &dir);
    Ok(())
}

fn client(args: RunArgs) -> Result<(), Error> {
    let cfg = args.config()?;
    let data = load_dataset(&cfg)?;
    let dir = harness::run_dir(&cfg);
    let mut endpoint = tcp_connect(&cfg.addr, cfg.wire, CONNECT_PATIENCE)?;
    let outcome = run_client(&cfg, &data, &mut endpoint, Some(&dir))?;
    print_summary(&outcome.summary, &dir);
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), Error> {
    let base = args.common.base()?;
    let codecs = if args.codec.is_empty() { vec![base.codec] } else { args.codec };
    let ratios: Vec<f64> = if args.xi.is_empty() { base.xi.into_iter().collect() } else { args.xi };
    let seeds = if args.seed.is_empty() { vec![base.seed] } else { args.seed };
    if ratios.is_empty() && codecs.iter().any(|&c| c != CodecKind::Base) {
        return Err(Error::Config("a sweep over compressing codecs needs --xi".into()));
    }
    let configs = harness::sweep_configs(&base, &codecs, &ratios, &seeds);
    harness::sweep(&base, &configs, |s| print_summary(s, &base.out.join(&s.run)))?;
    println!("summary written to {}", base.out.join(harness::SUMMARY_FILE).display());
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), Error> {
    let server = TcpServer::bind(&args.addr)?;
    println!("listening on {}", server.local_addr()?);
    let mut served = 0;
    while args.sessions == 0 || served < args.sessions {
        let mut endpoint = server.accept(Dtype::default())?;
        served += 1;
        match harness::serve(&mut endpoint) {
            Ok(_) => eprintln!("session {served} finished"),
            Err(e) if args.sessions == 1 => return Err(e),
            Err(e) => eprintln!("session {served} failed: {e}"),
        }
    }
    Ok(())
}

fn gen_data(args: GenArgs) -> Result<(), Error> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.samples_per_class {
        cfg.samples_per_class = v;
    }
    if let Some(v) = args.noise {
        cfg.noise = v;
    }
    if let Some(v) = args.seed {
        cfg.data_seed = v;
    }
    let data = generate_synthetic(&cfg.synthetic())?;
    data.save(&args.out)?;
    println!(
        "wrote {} samples ({} train, {} val, {} test) to {}",
        data.len(),
        data.split.train.len(),
        data.split.val.len(),
        data.split.test.len(),
        args.out.display()
    );
    Ok(())
}

fn check() -> Result<(), Error> {
    let results = run_checks();
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if failed > 0 {
        return Err(Error::Contract(format!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Serve(a) => serve(a),
        Command::Client(a) => client(a),
        Command::GenData(a) => gen_data(a),
        Command::Check => check(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
