//! `moe-sim`: trace generation, cache simulation runs, sweeps, ablations,
//! comparisons, and trace diagnostics from the command line.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags or parameter
//! domains), 2 on data errors (unreadable or malformed traces, unsupported
//! policy/strategy combinations). Every invocation prints a `# config`
//! reproducibility line with a hash of the resolved configuration and input
//! data plus the seed in effect.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moe_cache_sim::cache::IntraBatchOrder;
use moe_cache_sim::model::ModelConfig;
use moe_cache_sim::report::{
    emit_ablation_csv, emit_compare_csv, emit_run_csv, emit_sweep_csv, series_from_sweep,
    write_report, write_svg_tradeoff, CompareRow, ComparisonTable, RunRow, TradeoffSeries,
};
use moe_cache_sim::routing::{DeltaMode, StrategyParams};
use moe_cache_sim::sim::{
    cache_size_ablation, run, sweep, CachePolicy, InitCache, LatencyModel, PhaseGate, RunConfig,
    RunMetrics, SimError, SweepKind,
};
use moe_cache_sim::trace::{
    generate_synthetic, locality_stats, range_stats, write_trace_file, LogitTrace, SynthParams,
};

#[derive(Parser)]
#[command(
    name = "moe-sim",
    version,
    about = "Trace-driven simulator for cache-aware MoE expert routing"
)]
struct Cli {
    /// Worker threads for sweeps (falls back to MOE_SIM_JOBS, then all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic router-logit trace (.moet).
    Gen(GenArgs),
    /// Simulate one run of a trace under a strategy and cache policy.
    Run(RunArgs),
    /// Sweep a strategy's hyperparameter grid and report the Pareto front.
    Sweep(SweepArgs),
    /// Compare policies and a cache-aware strategy across cache sizes.
    AblateCacheSize(AblateArgs),
    /// Run several strategies at fixed parameters; emit a comparison table.
    Compare(CompareArgs),
    /// Print a trace's header, logit-range, and temporal-locality statistics.
    Stats(StatsArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Architecture preset (mixtral-8x7b, phi-3.5-moe, deepseek-v2-lite,
    /// qwen1.5-moe) or "custom" with --experts/--top-k.
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 1024)]
    tokens: u32,
    /// Boundary between prompt and generation phases.
    #[arg(long, default_value_t = 0)]
    prompt_len: u32,
    /// AR(1) persistence of the latent expert preference, in [0,1].
    #[arg(long, default_value_t = 0.7)]
    locality: f64,
    /// Fraction of experts with an elevated base preference, in (0,1].
    #[arg(long, default_value_t = 1.0)]
    hot_fraction: f64,
    /// Multiplier on the logits (controls the max-min range).
    #[arg(long, default_value_t = 4.0)]
    logit_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// MoE layers for --model custom.
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Routed experts per layer for --model custom.
    #[arg(long)]
    experts: Option<usize>,
    /// Experts selected per token for --model custom.
    #[arg(long)]
    top_k: Option<usize>,
    /// Shared (pinned) experts for --model custom.
    #[arg(long, default_value_t = 0)]
    shared: usize,
    /// Default guaranteed top-J for --model custom.
    #[arg(long)]
    top_j: Option<usize>,
}

/// Flags shared by every simulating subcommand.
#[derive(Args, Clone)]
struct SimArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Per-layer cache capacity in routed experts (default: N/2).
    #[arg(long)]
    cache_size: Option<usize>,
    /// Guaranteed top-J experts (default: per-architecture convention).
    #[arg(long)]
    top_j: Option<usize>,
    /// Eviction policy: lru or belady.
    #[arg(long, default_value = "lru")]
    policy: String,
    /// Strategy application phase: all or gen-only.
    #[arg(long, default_value = "all")]
    phase: String,
    /// Initial cache state: empty or random.
    #[arg(long, default_value = "empty")]
    init_cache: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Δ estimation for the cache prior: running-mean, ema[:decay],
    /// calibrated, or exact-per-token.
    #[arg(long, default_value = "running-mean")]
    delta_mode: String,
    /// Tokens excluded from metrics at the start of the trace.
    #[arg(long, default_value_t = 0)]
    warmup: usize,
    /// Renormalize selected gate weights to sum to one.
    #[arg(long, default_value_t = true)]
    renormalize: bool,
    /// Same-token recency order: high-first (higher weight evicted first)
    /// or low-first.
    #[arg(long, default_value = "high-first")]
    intra_batch: String,
    /// Compute seconds per token for the latency estimate.
    #[arg(long, default_value_t = 0.01)]
    t_compute: f64,
    /// Load seconds per expert fetched from slow storage.
    #[arg(long, default_value_t = 0.005)]
    t_load: f64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// original, prune, maxrank, cumsum, prior, or swap-random.
    #[arg(long, default_value = "original")]
    strategy: String,
    /// Strategy parameter: h, M, p, lambda, or the swapped rank.
    #[arg(long, default_value_t = 0.0)]
    param: f64,
    /// Append one CSV row here (run.csv schema).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit a single-point trade-off SVG here.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// prune, maxrank, cumsum, or prior.
    #[arg(long)]
    strategy: String,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Cache-aware strategy to ablate: prune, maxrank, cumsum, or prior.
    #[arg(long, default_value = "prior")]
    strategy: String,
    /// Comma-separated cache sizes (default: 1,K,N/4,N/2,N).
    #[arg(long)]
    sizes: Option<String>,
    /// Comma-separated retained-mass thresholds.
    #[arg(long, default_value = "0.99,0.95,0.90")]
    thresholds: String,
    #[arg(long, default_value = "ablation.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    sim: SimArgs,
    /// Comma-separated strategies, parameterized with '@':
    /// e.g. "original,prior@0.5,maxrank@2".
    #[arg(long)]
    strategies: String,
    #[arg(long, default_value = "compare.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    trace: PathBuf,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Routing(inner) => CliError::Usage(inner.to_string()),
            SimError::Config(inner) => CliError::Usage(inner.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    // Die quietly when stdout closes early (e.g. piped into `head`).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let jobs = cli.jobs.or_else(|| {
        std::env::var("MOE_SIM_JOBS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => with_jobs(jobs, || cmd_sweep(args)),
        Command::AblateCacheSize(args) => with_jobs(jobs, || cmd_ablate(args)),
        Command::Compare(args) => cmd_compare(args),
        Command::Stats(args) => cmd_stats(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("usage error: {msg}"),
                CliError::Data(msg) => eprintln!("error: {msg}"),
            }
            ExitCode::from(e.code())
        }
    }
}

fn with_jobs<T>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> T
where
    T: Send,
{
    match jobs {
        Some(n) if n >= 1 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(f),
        _ => f(),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn fnv1a64(bytes: &[u8], mut hash: u64) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

const FNV_OFFSET: u64 = 0xCBF2_9CE4_8422_2325;

fn config_hash(parts: &[String], trace_bytes: Option<&[u8]>) -> u64 {
    let mut h = FNV_OFFSET;
    for p in parts {
        h = fnv1a64(p.as_bytes(), h);
        h = fnv1a64(b"|", h);
    }
    if let Some(bytes) = trace_bytes {
        h = fnv1a64(bytes, h);
    }
    h
}

fn print_repro_line(parts: &[String], trace_bytes: Option<&[u8]>, seed: u64) {
    println!(
        "# config {:016x} seed {seed}",
        config_hash(parts, trace_bytes)
    );
}

/// Read a trace, dispatching on extension: `.jsonl` for the interchange
/// format, the binary layout otherwise.
fn load_trace(path: &PathBuf) -> Result<(LogitTrace, Vec<u8>), CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let trace = if path.extension().is_some_and(|e| e == "jsonl") {
        moe_cache_sim::trace::import_jsonl(&mut bytes.as_slice())
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
    } else {
        moe_cache_sim::trace::parse_trace(&bytes)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
    };
    Ok((trace, bytes))
}

/// Human-facing model name: the matching preset, else "custom".
fn model_name(model: &ModelConfig) -> String {
    for preset in ModelConfig::preset_names() {
        let p = ModelConfig::preset(preset).unwrap();
        if p.experts_per_layer == model.experts_per_layer
            && p.top_k == model.top_k
            && p.shared_experts == model.shared_experts
        {
            return preset.to_string();
        }
    }
    "custom".to_string()
}

fn parse_delta_mode(s: &str) -> Result<DeltaMode, CliError> {
    match s {
        "running-mean" => Ok(DeltaMode::RunningMean),
        "calibrated" => Ok(DeltaMode::Calibrated),
        "exact-per-token" => Ok(DeltaMode::ExactPerToken),
        "ema" => Ok(DeltaMode::Ema { decay: 0.9 }),
        other => {
            if let Some(decay) = other.strip_prefix("ema:") {
                let decay: f64 = decay
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad ema decay '{decay}'")))?;
                Ok(DeltaMode::Ema { decay })
            } else {
                Err(CliError::Usage(format!(
                    "unknown delta mode '{other}' (running-mean, ema[:decay], calibrated, exact-per-token)"
                )))
            }
        }
    }
}

fn parse_strategy(
    name: &str,
    param: f64,
    top_j: usize,
    delta_mode: DeltaMode,
) -> Result<StrategyParams, CliError> {
    let non_negative_int = |what: &str| -> Result<usize, CliError> {
        if param < 0.0 || param.fract() != 0.0 {
            Err(CliError::Usage(format!(
                "{what} takes a non-negative integer parameter, got {param}"
            )))
        } else {
            Ok(param as usize)
        }
    };
    match name {
        "original" => Ok(StrategyParams::original()),
        "prune" => Ok(StrategyParams::prune(non_negative_int("prune")?)),
        "maxrank" => Ok(StrategyParams::max_rank(non_negative_int("maxrank")?, top_j)),
        "cumsum" => Ok(StrategyParams::cumsum(param, top_j)),
        "prior" => Ok(StrategyParams::cache_prior(param, delta_mode, top_j)),
        "swap-random" => Ok(StrategyParams::swap_random(non_negative_int(
            "swap-random",
        )?)),
        other => Err(CliError::Usage(format!(
            "unknown strategy '{other}' (original, prune, maxrank, cumsum, prior, swap-random)"
        ))),
    }
}

fn parse_sweep_kind(name: &str) -> Result<SweepKind, CliError> {
    match name {
        "prune" => Ok(SweepKind::Prune),
        "maxrank" => Ok(SweepKind::MaxRank),
        "cumsum" => Ok(SweepKind::Cumsum),
        "prior" => Ok(SweepKind::CachePrior),
        other => Err(CliError::Usage(format!(
            "'{other}' has no sweep grid (prune, maxrank, cumsum, prior)"
        ))),
    }
}

struct ResolvedSim {
    trace: LogitTrace,
    trace_bytes: Vec<u8>,
    model: ModelConfig,
    config: RunConfig,
    delta_mode: DeltaMode,
    top_j: usize,
}

fn resolve_sim(args: &SimArgs) -> Result<ResolvedSim, CliError> {
    let (trace, trace_bytes) = load_trace(&args.trace)?;
    let model = trace
        .header()
        .to_model("trace")
        .map_err(|e| CliError::Data(e.to_string()))?;
    let top_j = args.top_j.unwrap_or(model.default_top_j);
    if top_j > model.top_k {
        return Err(CliError::Usage(format!(
            "top_j {top_j} exceeds K={}",
            model.top_k
        )));
    }
    let cache_size = args.cache_size.unwrap_or_else(|| model.default_cache_size());
    if cache_size == 0 {
        return Err(CliError::Usage("cache size must be >= 1".into()));
    }
    let policy = match args.policy.as_str() {
        "lru" => CachePolicy::Lru,
        "belady" => CachePolicy::Belady,
        other => {
            return Err(CliError::Usage(format!(
                "unknown policy '{other}' (lru, belady)"
            )))
        }
    };
    let phase = match args.phase.as_str() {
        "all" => PhaseGate::WholeSequence,
        "gen-only" => PhaseGate::GenerationOnly,
        other => {
            return Err(CliError::Usage(format!(
                "unknown phase '{other}' (all, gen-only)"
            )))
        }
    };
    let init_cache = match args.init_cache.as_str() {
        "empty" => InitCache::Empty,
        // The fill generator derives from the run seed with a fixed offset
        // so the swap-random stream stays independent.
        "random" => InitCache::Random {
            seed: args.seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
        },
        other => {
            return Err(CliError::Usage(format!(
                "unknown init-cache '{other}' (empty, random)"
            )))
        }
    };
    let intra_batch_order = match args.intra_batch.as_str() {
        "high-first" => IntraBatchOrder::HighWeightEvictedFirst,
        "low-first" => IntraBatchOrder::LowWeightEvictedFirst,
        other => {
            return Err(CliError::Usage(format!(
                "unknown intra-batch order '{other}' (high-first, low-first)"
            )))
        }
    };
    let delta_mode = parse_delta_mode(&args.delta_mode)?;
    let latency =
        LatencyModel::new(args.t_compute, args.t_load).map_err(|e| CliError::Usage(e.to_string()))?;

    let mut config = RunConfig::new(StrategyParams::original(), cache_size);
    config.policy = policy;
    config.phase = phase;
    config.init_cache = init_cache;
    config.renormalize = args.renormalize;
    config.intra_batch_order = intra_batch_order;
    config.warmup_skip = args.warmup;
    config.seed = args.seed;
    config.latency = Some(latency);
    Ok(ResolvedSim {
        trace,
        trace_bytes,
        model,
        config,
        delta_mode,
        top_j,
    })
}

fn sim_config_parts(args: &SimArgs, strategy_desc: &str) -> Vec<String> {
    vec![
        format!("strategy={strategy_desc}"),
        format!("cache_size={:?}", args.cache_size),
        format!("top_j={:?}", args.top_j),
        format!("policy={}", args.policy),
        format!("phase={}", args.phase),
        format!("init_cache={}", args.init_cache),
        format!("seed={}", args.seed),
        format!("delta_mode={}", args.delta_mode),
        format!("warmup={}", args.warmup),
        format!("renormalize={}", args.renormalize),
        format!("intra_batch={}", args.intra_batch),
        format!("t_compute={}", args.t_compute),
        format!("t_load={}", args.t_load),
    ]
}

fn summarize(model: &ModelConfig, args: &SimArgs, label: &str, m: &RunMetrics) {
    println!(
        "model {}  layers {}  experts {}+{}  top_k {}",
        model_name(model),
        model.num_layers,
        model.experts_per_layer,
        model.shared_experts,
        model.top_k
    );
    println!(
        "strategy {label}  cache {}/{}  policy {}  phase {}",
        args.cache_size.unwrap_or(model.default_cache_size()),
        model.experts_per_layer,
        args.policy,
        args.phase
    );
    println!(
        "tokens {} (counted {})  miss rate {:.3}%  hit rate {:.3}%",
        m.num_tokens,
        m.counted_tokens,
        m.miss_rate * 100.0,
        m.hit_rate * 100.0
    );
    println!(
        "lifetime {:.1} (+/- {:.1}) tokens over {} closed samples ({} censored)",
        m.lifetime_mean, m.lifetime_std, m.closed_samples, m.censored_samples
    );
    println!(
        "retained mass {:.6}  swap rate {:.6}",
        m.retained_mass, m.swap_rate
    );
    if let Some(t) = m.est_token_latency {
        println!(
            "est. latency {:.6} s/token ({:.1} tokens/s)",
            t,
            1.0 / t
        );
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    if args.tokens == 0 {
        return Err(CliError::Usage("--tokens must be >= 1".into()));
    }
    let model = if args.model == "custom" {
        let experts = args
            .experts
            .ok_or_else(|| CliError::Usage("--model custom requires --experts".into()))?;
        let top_k = args
            .top_k
            .ok_or_else(|| CliError::Usage("--model custom requires --top-k".into()))?;
        let top_j = args.top_j.unwrap_or_else(|| 1.min(top_k));
        ModelConfig::new("custom", args.layers, experts, top_k, args.shared, top_j)
            .map_err(|e| CliError::Usage(e.to_string()))?
    } else {
        ModelConfig::preset(&args.model).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown model '{}'; presets: {} (or 'custom')",
                args.model,
                ModelConfig::preset_names().join(", ")
            ))
        })?
    };
    let params = SynthParams::new(args.locality, args.hot_fraction, args.logit_scale, args.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let trace = generate_synthetic(&model, args.tokens, args.prompt_len, &params)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let bytes = write_trace_file(&trace, &args.out)
        .map_err(|e| CliError::Data(e.to_string()))?;

    let parts = vec![
        format!("gen model={}", model.name),
        format!("tokens={}", args.tokens),
        format!("prompt_len={}", args.prompt_len),
        format!("locality={}", args.locality),
        format!("hot_fraction={}", args.hot_fraction),
        format!("logit_scale={}", args.logit_scale),
    ];
    print_repro_line(&parts, None, args.seed);
    let h = trace.header();
    println!(
        "wrote {} ({bytes} bytes): layers {}, experts {}, top_k {}, shared {}, tokens {}, prompt_len {}",
        args.out.display(),
        h.num_layers,
        h.experts_per_layer,
        h.top_k,
        h.shared_experts,
        h.num_tokens,
        h.prompt_len
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let mut resolved = resolve_sim(&args.sim)?;
    let strategy = parse_strategy(&args.strategy, args.param, resolved.top_j, resolved.delta_mode)?;
    for warning in strategy
        .validate(resolved.model.top_k, resolved.model.experts_per_layer)
        .map_err(|e| CliError::Usage(e.to_string()))?
    {
        eprintln!("warning: {warning}");
    }
    resolved.config.strategy = strategy.clone();

    let label = format!("{}({:.6})", strategy.name(), args.param);
    let parts = sim_config_parts(&args.sim, &label);
    print_repro_line(&parts, Some(&resolved.trace_bytes), args.sim.seed);

    let metrics = run(&resolved.trace, &resolved.model, &resolved.config)?;
    summarize(&resolved.model, &args.sim, &label, &metrics);

    if let Some(out) = &args.out {
        let row = RunRow {
            model: model_name(&resolved.model),
            strategy: strategy.name().to_string(),
            param: args.param,
            top_j: resolved.top_j,
            cache_size: resolved.config.cache_size,
            policy: args.sim.policy.clone(),
            phase: args.sim.phase.clone(),
            init_cache: args.sim.init_cache.clone(),
            renormalize: args.sim.renormalize,
            delta_mode: args.sim.delta_mode.clone(),
            seed: args.sim.seed,
            metrics: metrics.clone(),
        };
        let n = write_report(out, |w| emit_run_csv(&[row], w))
            .map_err(|e| CliError::Data(e.to_string()))?;
        println!("wrote {} ({n} bytes)", out.display());
    }
    if let Some(svg_path) = &args.svg {
        let series = vec![TradeoffSeries {
            label,
            points: vec![(metrics.miss_rate, metrics.retained_mass)],
        }];
        let n = write_svg_tradeoff(&series, svg_path)
            .map_err(|e| CliError::Data(e.to_string()))?;
        println!("wrote {} ({n} bytes)", svg_path.display());
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let mut resolved = resolve_sim(&args.sim)?;
    let kind = parse_sweep_kind(&args.strategy)?;
    // Base strategy carries top-J and the Δ mode into every grid point.
    resolved.config.strategy =
        StrategyParams::cache_prior(0.0, resolved.delta_mode, resolved.top_j);

    let parts = sim_config_parts(&args.sim, &format!("sweep:{}", kind.name()));
    print_repro_line(&parts, Some(&resolved.trace_bytes), args.sim.seed);

    let result = sweep(&resolved.trace, &resolved.model, kind, &resolved.config)?;
    println!(
        "{} sweep: {} points, {} on the Pareto front",
        kind.name(),
        result.points.len(),
        result.pareto.len()
    );
    for p in result.pareto_points() {
        println!(
            "  param {:.6}  miss {:.3}%  retained {:.6}",
            p.param,
            p.metrics.miss_rate * 100.0,
            p.metrics.retained_mass
        );
    }
    let n = write_report(&args.out, |w| emit_sweep_csv(&result, w))
        .map_err(|e| CliError::Data(e.to_string()))?;
    println!("wrote {} ({n} bytes)", args.out.display());
    if let Some(svg_path) = &args.svg {
        let series = vec![series_from_sweep(kind.name(), &result)];
        let n = write_svg_tradeoff(&series, svg_path)
            .map_err(|e| CliError::Data(e.to_string()))?;
        println!("wrote {} ({n} bytes)", svg_path.display());
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let mut resolved = resolve_sim(&args.sim)?;
    let kind = parse_sweep_kind(&args.strategy)?;
    resolved.config.strategy =
        StrategyParams::cache_prior(0.0, resolved.delta_mode, resolved.top_j);

    let n_experts = resolved.model.experts_per_layer;
    let sizes: Vec<usize> = match &args.sizes {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Usage(format!("bad cache size '{s}'")))
            })
            .collect::<Result<_, _>>()?,
        None => {
            let mut v = vec![
                1,
                resolved.model.top_k,
                (n_experts / 4).max(1),
                (n_experts / 2).max(1),
                n_experts,
            ];
            v.sort_unstable();
            v.dedup();
            v
        }
    };
    let thresholds: Vec<f64> = args
        .thresholds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad threshold '{s}'")))
        })
        .collect::<Result<_, _>>()?;

    let parts = sim_config_parts(&args.sim, &format!("ablate:{}:{sizes:?}", kind.name()));
    print_repro_line(&parts, Some(&resolved.trace_bytes), args.sim.seed);

    let table = cache_size_ablation(
        &resolved.trace,
        &resolved.model,
        kind,
        &sizes,
        &thresholds,
        &resolved.config,
    )?;
    for row in &table.rows {
        let best = row
            .strategy_best
            .iter()
            .zip(&table.thresholds)
            .map(|(b, th)| match b {
                Some((param, miss)) => {
                    format!("{}>={th}: {:.3}% @ {param:.4}", kind.name(), miss * 100.0)
                }
                None => format!("{}>={th}: -", kind.name()),
            })
            .collect::<Vec<_>>()
            .join("  ");
        println!(
            "size {:>4}: lru {:.3}%  belady {:.3}%  {best}",
            row.cache_size,
            row.lru_miss_rate * 100.0,
            row.belady_miss_rate * 100.0
        );
    }
    let n = write_report(&args.out, |w| emit_ablation_csv(&table, w))
        .map_err(|e| CliError::Data(e.to_string()))?;
    println!("wrote {} ({n} bytes)", args.out.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let resolved = resolve_sim(&args.sim)?;
    let mut entries: Vec<(String, StrategyParams)> = Vec::new();
    for spec in args.strategies.split(',') {
        let spec = spec.trim();
        let (name, param) = match spec.split_once('@') {
            Some((name, param)) => {
                let param: f64 = param.parse().map_err(|_| {
                    CliError::Usage(format!("bad parameter in strategy '{spec}'"))
                })?;
                (name, param)
            }
            None => (spec, 0.0),
        };
        let strategy = parse_strategy(name, param, resolved.top_j, resolved.delta_mode)?;
        strategy
            .validate(resolved.model.top_k, resolved.model.experts_per_layer)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        entries.push((spec.to_string(), strategy));
    }
    if entries.is_empty() {
        return Err(CliError::Usage("no strategies given".into()));
    }

    let parts = sim_config_parts(&args.sim, &format!("compare:{}", args.strategies));
    print_repro_line(&parts, Some(&resolved.trace_bytes), args.sim.seed);

    let name = model_name(&resolved.model);
    let cache_label = format!(
        "{} / {}",
        resolved.config.cache_size, resolved.model.experts_per_layer
    );
    let mut table = ComparisonTable::default();
    for (label, strategy) in entries {
        let mut cfg = resolved.config.clone();
        cfg.strategy = strategy;
        let m = run(&resolved.trace, &resolved.model, &cfg)?;
        println!(
            "{label:>16}: lifetime {:6.1} (+/- {:.1})  miss {:.3}%  retained {:.6}",
            m.lifetime_mean,
            m.lifetime_std,
            m.miss_rate * 100.0,
            m.retained_mass
        );
        table.rows.push(CompareRow {
            model: name.clone(),
            cache_size: cache_label.clone(),
            routing: label,
            lifetime_mean: m.lifetime_mean,
            lifetime_std: m.lifetime_std,
            miss_rate_pct: m.miss_rate * 100.0,
        });
    }
    let n = write_report(&args.out, |w| emit_compare_csv(&table, w))
        .map_err(|e| CliError::Data(e.to_string()))?;
    println!("wrote {} ({n} bytes)", args.out.display());
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<(), CliError> {
    let (trace, bytes) = load_trace(&args.trace)?;
    let parts = vec![format!("stats {}", args.trace.display())];
    print_repro_line(&parts, Some(&bytes), 0);

    let h = trace.header();
    println!(
        "trace {}: layers {}, experts {}, top_k {}, shared {}, tokens {}, prompt_len {}",
        args.trace.display(),
        h.num_layers,
        h.experts_per_layer,
        h.top_k,
        h.shared_experts,
        h.num_tokens,
        h.prompt_len
    );
    println!("layer  mean_range  min_range  max_range");
    for (l, s) in range_stats(&trace).iter().enumerate() {
        println!(
            "{l:>5}  {:>10.4}  {:>9.4}  {:>9.4}",
            s.mean_range, s.min_range, s.max_range
        );
    }
    let loc = locality_stats(&trace, h.top_k as usize);
    println!(
        "consecutive-token top-1 agreement {:.6} (chance {:.6})",
        loc.top1_agreement,
        1.0 / h.experts_per_layer as f64
    );
    println!("consecutive-token top-{} jaccard {:.6}", h.top_k, loc.topk_jaccard);
    Ok(())
}
