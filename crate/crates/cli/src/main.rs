mod exit;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tracksearch::cost::{cost_report, genome_cost, space_extrema, Budget, BudgetPreset, Cost};
use tracksearch::evaluator::{
    load_evalset, save_evalset, synthetic_calibration, synthetic_evalset, template_matching_store, Evaluator,
    LookupEvaluator, ProxyEvaluator, SyntheticData, SyntheticEvaluator,
};
use tracksearch::evolution::{brute_force, run_search, write_history_csv, SearchConfig, DEFAULT_ENUMERATION_CAP};
use tracksearch::space::{describe_space, Genome, SpaceDescriptor, SpaceFile, SCHEMA_VERSION};
use tracksearch::tensor::{forward_tracker_counted, instrumented_macs, PathStats, Tensor};
use tracksearch::{Execution, WeightStore};

use exit::{CliError, ExitKind, EXIT_CODES_HELP};

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "tracksearch", version, about = "One-shot architecture search for lightweight Siamese trackers")]
#[command(after_help = EXIT_CODES_HELP)]
struct Cli {
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search-space inspection.
    #[command(subcommand)]
    Space(SpaceCommand),
    /// Draw a uniformly random genome.
    Sample {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        space: SpaceArg,
    },
    /// Analytic MACs and parameters of a genome.
    Cost { genome: PathBuf },
    /// Run the genome through the tensor engine and compare MAC counts.
    Validate {
        genome: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Create a weight store.
    InitWeights {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Build the template-matching store instead of random weights.
        #[arg(long)]
        template_matching: bool,
        #[command(flatten)]
        space: SpaceArg,
    },
    /// Summarize a weight store.
    InspectWeights {
        path: PathBuf,
        #[command(flatten)]
        space: SpaceArg,
    },
    /// Write a synthetic planted-exemplar evaluation set.
    MakeEvalset {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 4.0)]
        snr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evolutionary search under a budget.
    Search {
        /// Search config JSON; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's rng_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        space: SpaceArg,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Exhaustive search of a reduced space.
    BruteForce {
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        space: SpaceArg,
        #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
        cap: u128,
    },
    /// Architecture statistics of a genome.
    Report { genome: PathBuf },
}

#[derive(Subcommand)]
enum SpaceCommand {
    /// Cardinalities and cost extrema.
    Info {
        #[command(flatten)]
        space: SpaceArg,
    },
    /// Write a space file for editing into a reduced space.
    Export {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SpaceArg {
    /// Space file; the full space when omitted.
    #[arg(long = "space", id = "space_file")]
    path: Option<PathBuf>,
}

impl SpaceArg {
    fn load(&self) -> CliResult<SpaceDescriptor> {
        match &self.path {
            None => Ok(SpaceDescriptor::full()),
            Some(p) => {
                let file: SpaceFile = serde_json::from_str(&read(p)?)?;
                Ok(SpaceDescriptor::try_from(file)?)
            }
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EvaluatorChoice {
    Synthetic,
    Lookup,
    Proxy,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    evaluator: EvaluatorChoice,
    /// Budget preset; unlimited (or the config's budget) when omitted.
    #[arg(long, value_parser = parse_preset)]
    budget_preset: Option<BudgetPreset>,
    /// Seed of the synthetic landscape.
    #[arg(long, default_value_t = 0)]
    landscape_seed: u64,
    /// Score table (genome,score) for the lookup evaluator.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Weight store for the proxy evaluator; freshly initialized when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Evaluation set directory for the proxy evaluator; synthetic when omitted.
    #[arg(long)]
    evalset: Option<PathBuf>,
    /// Seed of the proxy's synthetic data and of a fresh weight store.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 16)]
    eval_count: usize,
    #[arg(long, default_value_t = 2)]
    calib_count: usize,
}

fn parse_preset(s: &str) -> Result<BudgetPreset, String> {
    s.parse()
}

fn read(p: &Path) -> CliResult<String> {
    fs::read_to_string(p).map_err(|e| CliError::new(ExitKind::Io, format!("{}: {e}", p.display())))
}

fn read_genome(p: &Path) -> CliResult<Genome> {
    Ok(Genome::decode(&read(p)?)?)
}

fn print_line(text: &str) -> CliResult {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn print_json<T: Serialize>(v: &T) -> CliResult {
    print_line(&serde_json::to_string_pretty(v)?)
}

fn build_evaluator(a: &EvalArgs, space: &SpaceDescriptor, exec: Execution) -> CliResult<Box<dyn Evaluator>> {
    Ok(match a.evaluator {
        EvaluatorChoice::Synthetic => Box::new(SyntheticEvaluator::new(a.landscape_seed)),
        EvaluatorChoice::Lookup => {
            let path = a
                .table
                .as_ref()
                .ok_or_else(|| CliError::new(ExitKind::Usage, "--evaluator lookup requires --table"))?;
            Box::new(LookupEvaluator::load(path)?)
        }
        EvaluatorChoice::Proxy => {
            let store = match &a.weights {
                Some(p) => WeightStore::load(p, space)?,
                None => WeightStore::init(space, a.data_seed),
            };
            let data = |seed, count| SyntheticData { seed, count, snr: 4.0 };
            let evalset = match &a.evalset {
                Some(dir) => load_evalset(dir)?,
                None => synthetic_evalset(&data(a.data_seed, a.eval_count)),
            };
            let calib = synthetic_calibration(&data(a.data_seed.wrapping_add(1), a.calib_count));
            Box::new(ProxyEvaluator { store: Arc::new(store), calib, evalset, exec })
        }
    })
}

#[derive(Serialize)]
struct SpaceInfo {
    schema_version: u32,
    flops_convention: &'static str,
    #[serde(flatten)]
    summary: tracksearch::space::SpaceSummary,
    min_cost: Cost,
    max_cost: Cost,
    layers: Vec<tracksearch::space::LayerSpec>,
}

#[derive(Serialize)]
struct Validation {
    schema_version: u32,
    cls_shape: (usize, usize, usize),
    reg_shape: (usize, usize, usize),
    analytic_macs: u64,
    instrumented_macs: u64,
    macs_match: bool,
    shapes_match: bool,
}

#[derive(Serialize)]
struct WeightsInfo {
    schema_version: u32,
    seed: u64,
    fingerprint: String,
    entries: usize,
    scalars: usize,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn run(cli: Cli) -> CliResult {
    let exec = Execution::from_jobs(cli.jobs);
    match cli.command {
        Command::Space(SpaceCommand::Info { space }) => {
            let space = space.load()?;
            let (min_cost, max_cost) = space_extrema(&space);
            print_json(&SpaceInfo {
                schema_version: SCHEMA_VERSION,
                flops_convention: "1 MAC = 1 Flop",
                summary: describe_space(&space),
                min_cost,
                max_cost,
                layers: space.layers(),
            })
        }
        Command::Space(SpaceCommand::Export { out }) => {
            fs::write(out, serde_json::to_string_pretty(&SpaceFile::from(&SpaceDescriptor::full()))?)?;
            Ok(())
        }
        Command::Sample { seed, space } => {
            let space = space.load()?;
            print_line(&space.sample_seeded(seed).encode())
        }
        Command::Cost { genome } => print_json(&cost_report(&read_genome(&genome)?)?),
        Command::Validate { genome, seed } => {
            let g = read_genome(&genome)?;
            let store = WeightStore::init(&SpaceDescriptor::singleton(&g)?, seed);
            let view = store.path_view(&g)?;
            let (z, x) = (Tensor::zeros(112, 112, 3), Tensor::zeros(256, 256, 3));
            let (out, counted) = forward_tracker_counted(&view, &PathStats::unit(), &z, &x)?;
            let analytic = genome_cost(&g)?.macs;
            debug_assert_eq!(counted, instrumented_macs(&view)?);
            let v = Validation {
                schema_version: SCHEMA_VERSION,
                cls_shape: out.cls.shape(),
                reg_shape: out.reg.shape(),
                analytic_macs: analytic,
                instrumented_macs: counted,
                macs_match: analytic == counted,
                shapes_match: out.cls.shape() == (16, 16, 1) && out.reg.shape() == (16, 16, 4),
            };
            print_json(&v)?;
            if v.macs_match && v.shapes_match {
                Ok(())
            } else {
                Err(CliError::new(ExitKind::VerificationFailed, "tensor engine disagrees with the cost model"))
            }
        }
        Command::InitWeights { seed, out, template_matching, space } => {
            let space = space.load()?;
            let store = if template_matching {
                template_matching_store(&space, seed)?
            } else {
                WeightStore::init(&space, seed)
            };
            store.save(&out)?;
            log::info!("wrote {} entries to {}", store.len(), out.display());
            Ok(())
        }
        Command::InspectWeights { path, space } => {
            let store = WeightStore::load(&path, &space.load()?)?;
            let scalars = store.keys().map(|k| store.entry(&k.layer, k.choice).unwrap().scalar_count()).sum();
            print_json(&WeightsInfo {
                schema_version: SCHEMA_VERSION,
                seed: store.seed(),
                fingerprint: hex(&store.fingerprint()),
                entries: store.len(),
                scalars,
            })
        }
        Command::MakeEvalset { seed, count, snr, out } => {
            save_evalset(&out, &synthetic_evalset(&SyntheticData { seed, count, snr }))?;
            Ok(())
        }
        Command::Search { config, seed, eval, space, out_dir } => {
            let space = space.load()?;
            let mut cfg: SearchConfig = match &config {
                Some(p) => serde_json::from_str(&read(p)?)?,
                None => SearchConfig::default(),
            };
            if let Some(s) = seed {
                cfg.rng_seed = s;
            }
            if let Some(p) = eval.budget_preset {
                cfg.budget = p.budget();
            }
            let evaluator = build_evaluator(&eval, &space, exec)?;
            log::info!("search: population {} generations {}", cfg.population_size, cfg.generations);
            let result = run_search(&cfg, &space, evaluator.as_ref(), exec)?;
            fs::create_dir_all(&out_dir)?;
            write_history_csv(out_dir.join("search_log.csv"), &result.history)?;
            fs::write(out_dir.join("best_genome.json"), result.best.genome.encode())?;
            fs::write(out_dir.join("search_result.json"), serde_json::to_string_pretty(&result)?)?;
            print_json(&result.best)
        }
        Command::BruteForce { eval, space, cap } => {
            let space = space.load()?;
            let budget = eval.budget_preset.map(BudgetPreset::budget).unwrap_or_else(Budget::unlimited);
            let evaluator = build_evaluator(&eval, &space, exec)?;
            print_json(&brute_force(&space, evaluator.as_ref(), &budget, cap, exec)?)
        }
        Command::Report { genome } => print_json(&tracksearch::report::report(&read_genome(&genome)?)?),
    }
}

fn init_pool(jobs: usize) {
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    if jobs > 1 {
        log::warn!("built without the parallel feature; --jobs {jobs} runs sequentially");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NAS_TRACKSEARCH_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", CliError::new(ExitKind::Usage, first).to_json_line());
            return ExitCode::from(ExitKind::Usage as u8);
        }
    };
    init_pool(cli.jobs);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.code() as u8)
        }
    }
}
