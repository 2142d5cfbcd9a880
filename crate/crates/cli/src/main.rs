//! `lilt` — a desk-scale lab for lifelong multilingual translation.

mod config;
mod pipeline;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use lilt_core::checkpoint::load_checkpoint;
use lilt_core::corpus::Lang;
use lilt_core::decoding::{DecodeConfig, DecodeMode};
use lilt_core::distill::{
    build_many2one_distill_set, build_one2many_distill_set, build_reverse_distill_set,
    DistillKind, Teacher,
};
use lilt_core::report::evaluate_stage;
use lilt_core::trainer::{load_system, Method, TaskSpec};
use lilt_core::vocab::{RankMapping, Vocabulary};

use config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments (exit code 2).
    Config(String),
    /// Failure during execution (exit code 3).
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<lilt_core::Error> for CliError {
    fn from(e: lilt_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "lilt",
    about = "Lifelong incremental translation lab: sequential task pipelines, \
             distillation-based continual learning, forgetting reports",
    version
)]
struct Cli {
    /// Worker threads for decoding and batch math (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task directories referenced by a config.
    GenSynthetic {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full experiment: baselines, every method, reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's global seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Restrict to these methods (repeatable).
        #[arg(long)]
        method: Vec<String>,
        /// Reuse completed stages instead of retraining them.
        #[arg(long)]
        resume: bool,
    },
    /// Score a saved system on every task it has learned.
    Evaluate {
        /// A system directory written by `run` (contains state.json).
        #[arg(long)]
        system: PathBuf,
        #[arg(long, default_value_t = 4)]
        beam_size: usize,
        #[arg(long, default_value_t = 0.6)]
        length_penalty: f64,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render comparison tables from a (possibly partial) run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a distillation set from a saved system, standalone.
    Distill {
        #[arg(long)]
        system: PathBuf,
        /// Directory holding the new task's train/dev/test files.
        #[arg(long)]
        task_dir: PathBuf,
        #[arg(long)]
        src_lang: String,
        #[arg(long)]
        tgt_lang: String,
        /// One of: multi, direct, pseudo, reverse.
        #[arg(long)]
        method: String,
        /// One of: greedy, beam, kbest.
        #[arg(long, default_value = "beam")]
        mode: String,
        #[arg(long, default_value_t = 4)]
        beam_size: usize,
        #[arg(long, default_value_t = 1)]
        k_best: usize,
        #[arg(long, default_value_t = 0.6)]
        length_penalty: f64,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify and summarize a checkpoint or system directory.
    InspectCheckpoint {
        #[arg(long)]
        path: PathBuf,
    },
}

fn parse_method(name: &str) -> Result<Method, CliError> {
    Ok(match name {
        "finetune" => Method::Finetune,
        "joint" => Method::Joint,
        "ewc" => Method::Ewc,
        "multi_distill" => Method::MultiDistill,
        "direct_distill" => Method::DirectDistill,
        "pseudo_distill" => Method::PseudoDistill,
        "reverse_distill" => Method::ReverseDistill,
        other => return Err(CliError::Config(format!("unknown method {other:?}"))),
    })
}

/// Output-directory override: CLI flag beats the LILT_OUT environment
/// variable beats the config file.
fn resolve_out_dir(config: &mut ExperimentConfig, cli_out: Option<PathBuf>) -> Option<String> {
    if let Some(out) = cli_out {
        config.out_dir = out.clone();
        return Some(out.display().to_string());
    }
    if let Ok(env_out) = std::env::var("LILT_OUT") {
        if !env_out.is_empty() {
            config.out_dir = PathBuf::from(&env_out);
            return Some(env_out);
        }
    }
    None
}

fn cmd_gen_synthetic(config_path: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let mut config = ExperimentConfig::load(config_path)?;
    resolve_out_dir(&mut config, out);
    for line in pipeline::generate_tasks(&config)? {
        println!("{line}");
    }
    Ok(())
}

fn cmd_run(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    method_names: &[String],
    resume: bool,
) -> Result<(), CliError> {
    let mut config = ExperimentConfig::load(config_path)?;
    let mut overrides = BTreeMap::new();
    if let Some(seed) = seed {
        config.seed = seed;
        overrides.insert("seed".to_string(), seed.to_string());
    }
    if let Some(dir) = resolve_out_dir(&mut config, out) {
        overrides.insert("out_dir".to_string(), dir);
    }
    let filter: Option<Vec<Method>> = if method_names.is_empty() {
        None
    } else {
        let methods = method_names
            .iter()
            .map(|m| parse_method(m))
            .collect::<Result<Vec<_>, _>>()?;
        overrides.insert("methods".to_string(), method_names.join(","));
        Some(methods)
    };
    let table = pipeline::run_experiment(&config, filter.as_deref(), resume, overrides)?;
    println!("{table}");
    Ok(())
}

fn cmd_evaluate(
    system: &Path,
    beam_size: usize,
    length_penalty: f64,
    max_len: usize,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let state = load_system(system)?;
    let decode = DecodeConfig {
        mode: DecodeMode::Beam,
        beam_size,
        k_best: 1,
        length_penalty,
        max_len,
    };
    decode.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let report = evaluate_stage(&state, &decode)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    match out {
        Some(path) => {
            std::fs::write(path, json).map_err(|e| CliError::Runtime(e.to_string()))?
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_distill(args: DistillArgs) -> Result<(), CliError> {
    let state = load_system(&args.system)?;
    let src_lang = Lang::new(args.src_lang.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let tgt_lang = Lang::new(args.tgt_lang.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let task = TaskSpec {
        task_id: "standalone".into(),
        src_lang: src_lang.clone(),
        tgt_lang: tgt_lang.clone(),
        dir: args.task_dir.clone(),
    };
    let raw = task.load_split("train")?;
    let mode = match args.mode.as_str() {
        "greedy" => DecodeMode::Greedy,
        "beam" => DecodeMode::Beam,
        "kbest" => DecodeMode::KBest,
        other => return Err(CliError::Config(format!("unknown decode mode {other:?}"))),
    };
    let decode = DecodeConfig {
        mode,
        beam_size: if mode == DecodeMode::KBest { args.beam_size.max(args.k_best) } else { args.beam_size },
        k_best: args.k_best,
        length_penalty: args.length_penalty,
        max_len: args.max_len,
    };
    decode.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let fwd = state
        .forward
        .as_ref()
        .ok_or_else(|| CliError::Config("system has no trained model".into()))?;
    let teacher =
        Teacher { model: &fwd.model, src_vocab: &fwd.src_vocab, tgt_vocab: &fwd.tgt_vocab };
    let learned = state.learned_langs();
    let sources: Vec<_> = raw.pairs.iter().map(|(s, _)| s.without_indicator()).collect();

    match args.method.as_str() {
        "multi" => {
            let set =
                build_one2many_distill_set(teacher, &sources, &src_lang, &learned, &decode)?;
            set.save(&args.out)?;
        }
        "direct" => {
            let set = build_many2one_distill_set(
                teacher,
                &sources,
                &learned,
                &tgt_lang,
                DistillKind::Direct,
                &[],
                &decode,
            )?;
            set.save(&args.out)?;
        }
        "pseudo" => {
            let task_vocab = Vocabulary::build(
                src_lang.clone(),
                raw.pairs.iter().map(|(s, _)| s),
                usize::MAX,
            );
            let mappings: Vec<RankMapping> = learned
                .iter()
                .map(|lang| {
                    state
                        .lang_vocabs
                        .get(lang.as_str())
                        .map(|old| RankMapping::build(&task_vocab, old))
                        .ok_or_else(|| {
                            CliError::Config(format!(
                                "system has no persisted vocabulary for {lang}"
                            ))
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let set = build_many2one_distill_set(
                teacher,
                &sources,
                &learned,
                &tgt_lang,
                DistillKind::Pseudo,
                &mappings,
                &decode,
            )?;
            set.save(&args.out)?;
        }
        "reverse" => {
            let rev = state
                .reverse
                .as_ref()
                .ok_or_else(|| CliError::Config("system keeps no reverse model".into()))?;
            let rev_teacher =
                Teacher { model: &rev.model, src_vocab: &rev.src_vocab, tgt_vocab: &rev.tgt_vocab };
            let targets: Vec<_> = raw.pairs.iter().map(|(_, t)| t.without_indicator()).collect();
            let built =
                build_reverse_distill_set(rev_teacher, &targets, &tgt_lang, &learned, &decode)?;
            built.forward.save(&args.out.join("forward"))?;
            built.reverse.save(&args.out.join("reverse"))?;
        }
        other => return Err(CliError::Config(format!("unknown distill method {other:?}"))),
    }
    println!("distillation set written to {}", args.out.display());
    Ok(())
}

struct DistillArgs {
    system: PathBuf,
    task_dir: PathBuf,
    src_lang: String,
    tgt_lang: String,
    method: String,
    mode: String,
    beam_size: usize,
    k_best: usize,
    length_penalty: f64,
    max_len: usize,
    out: PathBuf,
}

fn cmd_inspect(path: &Path) -> Result<(), CliError> {
    if path.join("state.json").exists() {
        let state = load_system(path)?;
        println!("system directory: {}", path.display());
        println!("scenario: {:?}", state.scenario);
        println!("learned tasks: {}", state.learned.len());
        for task in &state.learned {
            println!("  {} ({} => {})", task.task_id, task.src_lang, task.tgt_lang);
        }
        if let Some(fwd) = &state.forward {
            println!(
                "forward model: {} parameters, src vocab {}, tgt vocab {}, checksum {}",
                fwd.model.param_count(),
                fwd.src_vocab.len(),
                fwd.tgt_vocab.len(),
                lilt_core::checkpoint::param_checksum(&fwd.model)
            );
        }
        if let Some(rev) = &state.reverse {
            println!(
                "reverse model: {} parameters, checksum {}",
                rev.model.param_count(),
                lilt_core::checkpoint::param_checksum(&rev.model)
            );
        }
        println!("fisher store: {}", if state.fisher.is_some() { "present" } else { "absent" });
        println!("checksums verified: ok");
    } else if path.join("manifest").exists() {
        let contents = load_checkpoint(path)?;
        println!("checkpoint directory: {}", path.display());
        println!("config: {:?}", contents.model.config());
        println!("parameters: {}", contents.model.param_count());
        println!(
            "vocabularies: src {} ({}), tgt {} ({})",
            contents.src_vocab.len(),
            contents.src_vocab.lang(),
            contents.tgt_vocab.len(),
            contents.tgt_vocab.lang()
        );
        println!("optimizer state: {}", if contents.opt.is_some() { "present" } else { "absent" });
        println!("fisher arrays: {}", if contents.fisher.is_some() { "present" } else { "absent" });
        println!("param checksum: {}", lilt_core::checkpoint::param_checksum(&contents.model));
        println!("checksums verified: ok");
    } else {
        return Err(CliError::Config(format!(
            "{} is neither a system directory nor a checkpoint",
            path.display()
        )));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::GenSynthetic { config, out } => cmd_gen_synthetic(&config, out),
        Command::Run { config, seed, out, method, resume } => {
            cmd_run(&config, seed, out, &method, resume)
        }
        Command::Evaluate { system, beam_size, length_penalty, max_len, out } => {
            cmd_evaluate(&system, beam_size, length_penalty, max_len, out)
        }
        Command::Report { out } => {
            let table = pipeline::report_run(&out)?;
            println!("{table}");
            Ok(())
        }
        Command::Distill {
            system,
            task_dir,
            src_lang,
            tgt_lang,
            method,
            mode,
            beam_size,
            k_best,
            length_penalty,
            max_len,
            out,
        } => cmd_distill(DistillArgs {
            system,
            task_dir,
            src_lang,
            tgt_lang,
            method,
            mode,
            beam_size,
            k_best,
            length_penalty,
            max_len,
            out,
        }),
        Command::InspectCheckpoint { path } => cmd_inspect(&path),
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(err @ CliError::Config(_)) => {
            eprintln!("{err}");
            std::process::exit(2);
        }
        Err(err @ CliError::Runtime(_)) => {
            eprintln!("{err}");
            std::process::exit(3);
        }
    }
}
