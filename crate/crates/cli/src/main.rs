//! Operator entry points for the federated question answering engine.
//!
//! Every command takes `--config <file.json>` (see `RunConfig`); flags
//! override the corresponding config fields. Log verbosity comes from the
//! `RUST_LOG` environment variable.
//!
//! Exit codes: 0 success, 1 pipeline error, 2 configuration error, 3
//! monotonicity violation (the `monotonicity` command in fixed-beam
//! oracle-judge mode only).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use verdict_core::config::RunConfig;
use verdict_core::engine::{Deployment, Engine};
use verdict_core::error::{Error, Result};
use verdict_core::eval::{
    self, load_dataset, monotonicity_harness, run_eval, MonotonicityReport, NoiseSpec,
};
use verdict_core::judge::{SelectionMode, SelectionResult};
use verdict_core::knowledge::{Corpus, SourceId};
use verdict_core::retrieval::{build_index, Index};
use verdict_core::service::{Coordinator, NetConfig, SpecialistService};

#[derive(Parser)]
#[command(
    name = "verdict",
    version,
    about = "Federated question answering: specialists per source, one judge"
)]
struct Cli {
    /// Run configuration file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Active sources, comma separated (overrides the config chain).
    #[arg(long)]
    chain: Option<String>,
    /// Selection mode: p_s, p_j, p_js, or oracle.
    #[arg(long)]
    mode: Option<String>,
    /// Total candidate budget.
    #[arg(long)]
    budget: Option<u32>,
    /// Unified retrieval depth.
    #[arg(long)]
    retrieval_k: Option<u32>,
    /// Smoothing constant for the reference scorer.
    #[arg(long)]
    alpha: Option<f64>,
    /// Disable answer dedup before judging.
    #[arg(long)]
    no_dedupe: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build and persist the per-source indices and the unified index.
    Index {
        /// Output directory (overrides `index_dir`; default `indices`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Answer one question and print the ranked candidates.
    Ask {
        question: String,
        /// Question id used to key fixture readers; defaults to the id of
        /// the dataset question with identical text, else "adhoc".
        #[arg(long)]
        id: Option<String>,
        /// Print the full selection result as JSON.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a dataset on the configured chain and write a report.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Report path (overrides `output`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Typo noise rate applied to questions.
        #[arg(long)]
        noise_rate: Option<f64>,
        #[arg(long)]
        noise_seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate an inclusion sequence of chains and check monotonicity.
    Monotonicity {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Chains as `a|a,b|a,b,c`; defaults to prefixes of the config
        /// chain.
        #[arg(long)]
        chains: Option<String>,
        /// Hold per-source beams fixed across chains (allocated once over
        /// the final chain).
        #[arg(long)]
        fixed_beams: bool,
        /// Judge candidates by gold match instead of the scorer.
        #[arg(long)]
        oracle_judge: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        noise_rate: Option<f64>,
        #[arg(long)]
        noise_seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Apply seeded typo noise to a question or a whole dataset.
    Corrupt {
        /// Expected corruptions per character, in [0, 0.5].
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// A single question to corrupt (prints the result).
        #[arg(long)]
        question: Option<String>,
        /// Dataset to corrupt line by line.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Where to write the corrupted dataset.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve one source's specialist over HTTP.
    ServeSpecialist {
        #[arg(long)]
        source: String,
        /// Bind address; port 0 picks an ephemeral port.
        #[arg(long, default_value = "127.0.0.1:0")]
        addr: String,
    },
    /// Serve the coordinator over HTTP, fanning out to specialists.
    ServeCoordinator {
        #[arg(long, default_value = "127.0.0.1:0")]
        addr: String,
        /// Specialist endpoints as `source=host:port`, comma separated.
        #[arg(long)]
        endpoints: String,
        /// Per-attempt timeout in milliseconds.
        #[arg(long, default_value_t = 5000)]
        timeout_ms: u64,
        /// Retries after the first attempt.
        #[arg(long, default_value_t = 1)]
        retries: u32,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    let path = path
        .as_ref()
        .ok_or_else(|| Error::Config("--config <file.json> is required for this command".into()))?;
    RunConfig::from_path(path)
}

fn apply_overrides(config: &mut RunConfig, overrides: &Overrides) -> Result<()> {
    if let Some(chain) = &overrides.chain {
        config.chain = chain.split(',').map(|s| s.trim().to_string()).collect();
    }
    if let Some(mode) = &overrides.mode {
        config.mode = mode.parse()?;
    }
    if let Some(budget) = overrides.budget {
        config.budget = budget;
    }
    if let Some(k) = overrides.retrieval_k {
        config.retrieval_k = k;
    }
    if let Some(alpha) = overrides.alpha {
        config.alpha = alpha;
    }
    if overrides.no_dedupe {
        config.dedupe = false;
    }
    config.validate()
}

/// Build the engine for the configured chain, preferring persisted indices
/// from `index_dir` (written by `verdict index`) over re-reading corpora.
fn build_engine(config: &RunConfig) -> Result<(Deployment, Engine)> {
    let mut deployment = config.build_deployment()?;
    if let Some(dir) = &config.index_dir {
        for source in config.chain_ids()? {
            let path = dir.join(format!("{source}.idx"));
            if path.is_file() {
                let index = Index::load(&path)?;
                let passages = index.passages().to_vec();
                deployment
                    .corpora
                    .insert(source.clone(), Corpus::new(source.clone(), passages)?);
                log::info!("loaded index for `{source}` from {}", path.display());
            }
        }
    }
    let engine = deployment.engine_for_chain(&config.chain_ids()?)?;
    Ok((deployment, engine))
}

fn noise_from(
    config: &RunConfig,
    rate: Option<f64>,
    seed: Option<u64>,
) -> Result<Option<NoiseSpec>> {
    match (rate, &config.noise) {
        (Some(rate), existing) => {
            let seed = seed
                .or_else(|| existing.as_ref().map(|n| n.seed))
                .unwrap_or(0);
            Ok(Some(NoiseSpec::typo(rate, seed)?))
        }
        (None, Some(existing)) => {
            let seed = seed.unwrap_or(existing.seed);
            Ok(Some(NoiseSpec::typo(existing.rate, seed)?))
        }
        (None, None) => Ok(None),
    }
}

fn write_or_print(path: Option<&PathBuf>, contents: &str) -> Result<()> {
    match path {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, contents)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        None => {
            println!("{contents}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Index { out, overrides } => {
            let mut config = load_config(&cli.config)?;
            apply_overrides(&mut config, &overrides)?;
            cmd_index(&config, out)
        }
        Command::Ask {
            question,
            id,
            json,
            overrides,
        } => {
            let mut config = load_config(&cli.config)?;
            apply_overrides(&mut config, &overrides)?;
            cmd_ask(&config, &question, id, json)
        }
        Command::Eval {
            dataset,
            out,
            noise_rate,
            noise_seed,
            overrides,
        } => {
            let mut config = load_config(&cli.config)?;
            apply_overrides(&mut config, &overrides)?;
            if let Some(dataset) = dataset {
                config.dataset = Some(dataset);
            }
            if let Some(out) = out {
                config.output = Some(out);
            }
            let noise = noise_from(&config, noise_rate, noise_seed)?;
            cmd_eval(&config, noise)
        }
        Command::Monotonicity {
            dataset,
            chains,
            fixed_beams,
            oracle_judge,
            out,
            noise_rate,
            noise_seed,
            overrides,
        } => {
            let mut config = load_config(&cli.config)?;
            apply_overrides(&mut config, &overrides)?;
            if let Some(dataset) = dataset {
                config.dataset = Some(dataset);
            }
            if let Some(out) = out {
                config.output = Some(out);
            }
            if oracle_judge {
                config.mode = SelectionMode::Oracle;
            }
            let fixed_beams = fixed_beams || config.fixed_beams;
            let noise = noise_from(&config, noise_rate, noise_seed)?;
            cmd_monotonicity(&config, chains, fixed_beams, noise)
        }
        Command::Corrupt {
            rate,
            seed,
            question,
            dataset,
            out,
        } => cmd_corrupt(rate, seed, question, dataset, out),
        Command::ServeSpecialist { source, addr } => {
            let config = load_config(&cli.config)?;
            cmd_serve_specialist(&config, &source, &addr)
        }
        Command::ServeCoordinator {
            addr,
            endpoints,
            timeout_ms,
            retries,
            overrides,
        } => {
            let mut config = load_config(&cli.config)?;
            apply_overrides(&mut config, &overrides)?;
            cmd_serve_coordinator(&config, &addr, &endpoints, timeout_ms, retries)
        }
    }
}

fn cmd_index(config: &RunConfig, out: Option<PathBuf>) -> Result<u8> {
    let deployment = config.build_deployment()?;
    let dir = out
        .or_else(|| config.index_dir.clone())
        .unwrap_or_else(|| PathBuf::from("indices"));
    std::fs::create_dir_all(&dir)?;

    for (source, corpus) in &deployment.corpora {
        let index = build_index([corpus])?;
        let path = dir.join(format!("{source}.idx"));
        index.save(&path)?;
        println!("{source}: {} passages -> {}", corpus.len(), path.display());
    }

    let chain = config.chain_ids()?;
    let unified = build_index(chain.iter().map(|s| &deployment.corpora[s]))?;
    let path = dir.join("unified.idx");
    unified.save(&path)?;
    println!(
        "unified [{}]: {} passages -> {}",
        config.chain.join("+"),
        unified.doc_count(),
        path.display()
    );
    Ok(0)
}

fn resolve_question_id(config: &RunConfig, question: &str, id: Option<String>) -> Result<String> {
    if let Some(id) = id {
        return Ok(id);
    }
    if let Some(dataset) = &config.dataset {
        if dataset.is_file() {
            for q in load_dataset(dataset)? {
                if q.text == question {
                    return Ok(q.id);
                }
            }
        }
    }
    Ok("adhoc".to_string())
}

fn print_selection(result: &SelectionResult) {
    println!("final answer: {}", result.final_answer);
    println!("mode: {}", result.mode);
    if let Some(allocation) = &result.trace.allocation {
        let beams: Vec<String> = allocation
            .per_source
            .iter()
            .map(|(s, b)| format!("{s}={b}"))
            .collect();
        println!(
            "beams (budget {}): {}",
            allocation.total_budget,
            beams.join(", ")
        );
    }
    println!(
        "{:<4} {:<28} {:<9} {:>9} {:>9} {:>9}",
        "rank", "answer", "origin", "p_j", "p_s", "combined"
    );
    for (rank, judged) in result.ranked.iter().enumerate() {
        let mut answer = judged.candidate.answer.clone();
        if answer.len() > 28 {
            answer.truncate(25);
            answer.push_str("...");
        }
        println!(
            "{:<4} {:<28} {:<9} {:>9.5} {:>9.5} {:>9.5}",
            rank + 1,
            answer,
            judged.candidate.origin.as_str(),
            judged.p_j,
            judged.p_s,
            judged.combined
        );
    }
    for failure in &result.trace.failures {
        println!(
            "warning: source `{}` failed at {}: {}",
            failure.source, failure.stage, failure.message
        );
    }
    for dropped in &result.trace.dropped {
        println!(
            "warning: dropped `{}` from `{}`: {}",
            dropped.answer, dropped.origin, dropped.reason
        );
    }
}

fn cmd_ask(config: &RunConfig, question: &str, id: Option<String>, json: bool) -> Result<u8> {
    if config.mode == SelectionMode::Oracle {
        return Err(Error::Config(
            "mode `oracle` needs gold answers; it is only available to eval commands".into(),
        ));
    }
    let (_deployment, engine) = build_engine(config)?;
    let question_id = resolve_question_id(config, question, id)?;
    let result = engine.answer(&question_id, question)?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&result).map_err(json_err)?
        );
    } else {
        print_selection(&result);
    }
    Ok(0)
}

fn cmd_eval(config: &RunConfig, noise: Option<NoiseSpec>) -> Result<u8> {
    let dataset_path = config.dataset.as_ref().ok_or_else(|| {
        Error::Config("eval needs a dataset (config `dataset` or --dataset)".into())
    })?;
    let questions = load_dataset(dataset_path)?;
    let (_deployment, engine) = build_engine(config)?;
    let outcome = run_eval(&questions, &engine, noise.as_ref());

    print!(
        "{}",
        eval::render_chain_table(std::slice::from_ref(&outcome.report))
    );
    let report_json = serde_json::to_string_pretty(&outcome).map_err(json_err)?;
    if let Some(path) = &config.output {
        write_or_print(Some(path), &report_json)?;
    }
    Ok(0)
}

fn parse_chains(spec: &str) -> Result<Vec<Vec<SourceId>>> {
    spec.split('|')
        .map(|chain| {
            chain
                .split(',')
                .map(|name| SourceId::new(name.trim()))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

fn cmd_monotonicity(
    config: &RunConfig,
    chains: Option<String>,
    fixed_beams: bool,
    noise: Option<NoiseSpec>,
) -> Result<u8> {
    let dataset_path = config.dataset.as_ref().ok_or_else(|| {
        Error::Config("monotonicity needs a dataset (config `dataset` or --dataset)".into())
    })?;
    let questions = load_dataset(dataset_path)?;
    let chains = match chains {
        Some(spec) => parse_chains(&spec)?,
        None => config.prefix_chains()?,
    };

    let mut deployment = config.build_deployment()?;
    deployment.config = config.engine_config()?;
    let report: MonotonicityReport = monotonicity_harness(
        &questions,
        &deployment,
        &chains,
        fixed_beams,
        noise.as_ref(),
    )?;

    print!("{}", eval::render_text_table(&report));
    if let Some(path) = &config.output {
        let json = serde_json::to_string_pretty(&report).map_err(json_err)?;
        write_or_print(Some(path), &json)?;
    }

    Ok(monotonicity_exit_code(&report, config.mode, fixed_beams))
}

/// Exit 3 only when the theorem-shaped setup (oracle judge, fixed beams)
/// reports a violation; empirical non-monotonicity elsewhere is data, not
/// an error.
fn monotonicity_exit_code(
    report: &MonotonicityReport,
    mode: SelectionMode,
    fixed_beams: bool,
) -> u8 {
    if mode == SelectionMode::Oracle && fixed_beams && !report.monotone {
        3
    } else {
        0
    }
}

fn cmd_corrupt(
    rate: f64,
    seed: u64,
    question: Option<String>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<u8> {
    let spec = NoiseSpec::typo(rate, seed)?;
    match (question, dataset) {
        (Some(question), None) => {
            println!("{}", eval::corrupt(&question, &spec));
            Ok(0)
        }
        (None, Some(path)) => {
            let questions = load_dataset(&path)?;
            let mut lines = String::new();
            for mut q in questions {
                q.text = eval::corrupt(&q.text, &spec);
                lines.push_str(&serde_json::to_string(&q).map_err(json_err)?);
                lines.push('\n');
            }
            write_or_print(out.as_ref(), lines.trim_end())?;
            Ok(0)
        }
        _ => Err(Error::Config(
            "corrupt needs exactly one of --question or --dataset".into(),
        )),
    }
}

fn cmd_serve_specialist(config: &RunConfig, source: &str, addr: &str) -> Result<u8> {
    let deployment = config.build_deployment()?;
    let source = SourceId::new(source)?;
    let corpus = deployment
        .corpora
        .get(&source)
        .ok_or_else(|| Error::Config(format!("`{source}` is not a configured source")))?;
    let reader = Arc::clone(&deployment.readers[&source]);
    let service = SpecialistService::new(source.clone(), corpus, reader)?;
    let handle = service.serve(addr)?;
    println!("specialist `{source}` listening on {}", handle.addr());
    std::io::stdout().flush()?;
    park_forever(handle)
}

fn parse_endpoints(spec: &str) -> Result<BTreeMap<SourceId, String>> {
    let mut endpoints = BTreeMap::new();
    for pair in spec.split(',') {
        let (source, addr) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("endpoint `{pair}` is not source=host:port")))?;
        endpoints.insert(SourceId::new(source.trim())?, addr.trim().to_string());
    }
    Ok(endpoints)
}

fn cmd_serve_coordinator(
    config: &RunConfig,
    addr: &str,
    endpoints: &str,
    timeout_ms: u64,
    retries: u32,
) -> Result<u8> {
    if config.mode == SelectionMode::Oracle {
        return Err(Error::Config(
            "the coordinator cannot run the oracle judge".into(),
        ));
    }
    let deployment = config.build_deployment()?;
    let endpoints = parse_endpoints(endpoints)?;
    let net = NetConfig {
        timeout_ms,
        retries,
        ..NetConfig::default()
    };
    let coordinator =
        Coordinator::from_deployment(&deployment, &config.chain_ids()?, endpoints, net)?;
    let handle = coordinator.serve(addr)?;
    println!("coordinator listening on {}", handle.addr());
    std::io::stdout().flush()?;
    park_forever(handle)
}

fn park_forever(_handle: verdict_core::service::http::ServerHandle) -> Result<u8> {
    loop {
        std::thread::park();
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
