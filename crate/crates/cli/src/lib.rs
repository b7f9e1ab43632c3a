//! Command-line front end. [`command`] builds the flag table and [`run`]
//! dispatches one invocation and returns the process exit code.

mod overrides;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use crosstill::accountant::{self, SizeReport, TSV_HEADER};
use crosstill::corpus::gen_parallel_corpus;
use crosstill::encoder::{load_checkpoint, SentenceEncoder};
use crosstill::error::{Error, Result};
use crosstill::eval::{depth_sweep, retrieval_evaluate, sts_evaluate, EvalReport};
use crosstill::gradcheck::{check_suite, GradCheckOptions, LossKind};
use crosstill::pipeline::{
    generate_sts, run_single_stage, run_stages, Dataset, PipelineConfig, PipelineOutcome, SingleStageMode,
    StageSelection,
};

pub use overrides::leaves as override_paths;

pub const SEED_ENV: &str = "CROSSTILL_SEED";

/// Maximum relative gradient error accepted by `grad-check`.
pub const GRAD_TOLERANCE: f64 = 1e-6;

fn seed_arg(help: &'static str) -> Arg {
    Arg::new("seed")
        .long("seed")
        .value_name("N")
        .env(SEED_ENV)
        .value_parser(value_parser!(u64))
        .help(help)
}

fn config_arg() -> Arg {
    Arg::new("config")
        .long("config")
        .value_name("PATH")
        .help("Pipeline config JSON; the built-in toy config when omitted")
}

fn with_config(cmd: Command) -> Command {
    overrides::add_args(cmd.arg(config_arg()))
}

pub fn command() -> Command {
    Command::new("crosstill")
        .about("Multi-stage cross-lingual distillation of compact sentence encoders")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_config(
            Command::new("gen-corpus")
                .about("Generate the synthetic parallel corpus and vocabulary, then the STS set")
                .arg(seed_arg("Corpus seed (overrides corpus.seed)"))
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("DIR")
                        .help("Output directory (overrides data_dir)"),
                ),
        ))
        .subcommand(with_config(
            Command::new("gen-sts")
                .about("Generate the synthetic STS set for an existing vocabulary")
                .arg(seed_arg("STS seed (overrides sts.seed)"))
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("DIR")
                        .help("Data directory holding vocab.json (overrides data_dir)"),
                ),
        ))
        .subcommand(with_config(
            Command::new("train")
                .about("Run distillation stages; prints the final checkpoint digest and path")
                .arg(
                    Arg::new("stage")
                        .long("stage")
                        .value_name("STAGE")
                        .default_value("all")
                        .value_parser(["all", "1", "2", "3", "4", "random-init", "pre-distill"])
                        .help("Stages to run: all, a single stage 1-4, or a single-stage baseline"),
                )
                .arg(seed_arg("Run seed (overrides seed)")),
        ))
        .subcommand(with_config(
            Command::new("eval")
                .about("Score a checkpoint on STS and held-out retrieval")
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("PATH")
                        .required(true)
                        .help("Encoder checkpoint (.xdst)"),
                )
                .arg(
                    Arg::new("task")
                        .long("task")
                        .value_name("TASK")
                        .default_value("all")
                        .value_parser(["all", "sts", "retrieval"])
                        .help("Which scores to compute"),
                )
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_name("SPLIT")
                        .default_value("test")
                        .value_parser(["test", "dev"])
                        .help("Parallel split used for retrieval"),
                )
                .arg(
                    Arg::new("report")
                        .long("report")
                        .value_name("PATH")
                        .help("Write the reports as JSON to this file"),
                ),
        ))
        .subcommand(
            Command::new("count-params")
                .about("Print embedding and encoder parameter counts as TSV")
                .arg(
                    Arg::new("preset")
                        .long("preset")
                        .value_name("NAME")
                        .action(ArgAction::Append)
                        .help("Size preset such as xlmr-b128-ru3 (repeatable)"),
                )
                .arg(
                    Arg::new("all")
                        .long("all")
                        .action(ArgAction::SetTrue)
                        .help("Every built-in preset"),
                )
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("PATH")
                        .action(ArgAction::Append)
                        .help("Audit a checkpoint's registry against the formulas (repeatable)"),
                )
                .arg(
                    Arg::new("list")
                        .long("list")
                        .action(ArgAction::SetTrue)
                        .help("List preset names and exit"),
                ),
        )
        .subcommand(
            Command::new("grad-check")
                .about("Finite-difference check of every training objective")
                .arg(
                    Arg::new("loss")
                        .long("loss")
                        .value_name("NAME")
                        .default_value("all")
                        .value_parser(
                            std::iter::once("all")
                                .chain(LossKind::ALL.iter().map(|k| k.name()))
                                .collect::<Vec<_>>(),
                        )
                        .help("Objective to check"),
                )
                .arg(
                    Arg::new("width")
                        .long("width")
                        .value_name("WIDTH")
                        .default_value("64bit")
                        .value_parser(["64bit", "32bit"])
                        .help("Element width"),
                )
                .arg(
                    Arg::new("step")
                        .long("step")
                        .value_name("H")
                        .value_parser(value_parser!(f64))
                        .help("Finite-difference step (default 1e-5 at 64-bit, 1e-2 at 32-bit)"),
                )
                .arg(
                    Arg::new("instances")
                        .long("instances")
                        .value_name("K")
                        .default_value("3")
                        .value_parser(value_parser!(u64))
                        .help("Random batches per (N, D) grid point"),
                )
                .arg(seed_arg("First input seed")),
        )
        .subcommand(with_config(
            Command::new("sweep-depth")
                .about("Train the directly distilled baseline at several depths and score each")
                .arg(
                    Arg::new("depths")
                        .long("depths")
                        .value_name("LIST")
                        .default_value("1,2,4")
                        .help("Comma-separated numbers of layers"),
                )
                .arg(seed_arg("Run seed (overrides seed)"))
                .arg(
                    Arg::new("report")
                        .long("report")
                        .value_name("PATH")
                        .help("Write the per-depth reports as JSON to this file"),
                ),
        ))
}

/// Parses `argv`, runs the command and returns the exit code. Errors are
/// reported on standard error.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    run_to(argv, &mut std::io::stdout().lock())
}

/// Like [`run`], with command output written to `out` instead of standard output.
pub fn run_to<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&matches, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(matches: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match name {
        "gen-corpus" => gen_corpus(sub, out),
        "gen-sts" => gen_sts(sub, out),
        "train" => train(sub, out),
        "eval" => eval(sub, out),
        "count-params" => count_params(sub, out),
        "grad-check" => grad_check(sub, out),
        "sweep-depth" => sweep_depth(sub, out),
        other => unreachable!("unknown subcommand {other}"),
    }
}

fn seed(m: &ArgMatches) -> Option<u64> {
    m.get_one::<u64>("seed").copied()
}

fn data_config(m: &ArgMatches) -> Result<PipelineConfig> {
    let mut cfg = overrides::resolve(m)?;
    if let Some(dir) = m.get_one::<String>("out") {
        cfg.data_dir = PathBuf::from(dir);
    }
    Ok(cfg)
}

fn gen_corpus(m: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = data_config(m)?;
    if let Some(s) = seed(m) {
        cfg.corpus.seed = s;
    }
    let summary = gen_parallel_corpus(&cfg.corpus, &cfg.data_dir)?;
    generate_sts(&cfg)?;
    writeln!(out, "{}", serde_json::to_string(&summary)?)?;
    Ok(0)
}

fn gen_sts(m: &ArgMatches, _out: &mut dyn Write) -> Result<i32> {
    let mut cfg = data_config(m)?;
    if let Some(s) = seed(m) {
        cfg.sts.seed = s;
    }
    generate_sts(&cfg)?;
    eprintln!("wrote {}", cfg.sts_path().display());
    Ok(0)
}

fn run_config(m: &ArgMatches) -> Result<PipelineConfig> {
    let mut cfg = overrides::resolve(m)?;
    if let Some(s) = seed(m) {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn train(m: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    let cfg = run_config(m)?;
    let stage = m.get_one::<String>("stage").expect("defaulted");
    let outcome: PipelineOutcome = match stage.as_str() {
        "all" => run_stages::<f32>(&cfg, StageSelection::All)?,
        "random-init" => run_single_stage::<f32>(SingleStageMode::RandomInit, &cfg)?,
        "pre-distill" => run_single_stage::<f32>(SingleStageMode::PreDistill, &cfg)?,
        k => run_stages::<f32>(&cfg, StageSelection::Only(k.parse().expect("validated")))?,
    };
    for (name, scores) in &outcome.held_out {
        eprintln!("{name}: held-out {}", serde_json::to_string(scores)?);
    }
    writeln!(out, "{}\t{}", outcome.digest, outcome.final_checkpoint.display())?;
    Ok(0)
}

fn write_report(path: Option<&String>, value: &impl serde::Serialize) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, serde_json::to_string_pretty(value)? + "\n")?;
    }
    Ok(())
}

fn eval(m: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    let cfg = overrides::resolve(m)?;
    let checkpoint = m.get_one::<String>("checkpoint").expect("required");
    let model: SentenceEncoder<f32> = load_checkpoint(Path::new(checkpoint))?;
    let data = Dataset::<f32>::load(&cfg)?;
    let task = m.get_one::<String>("task").expect("defaulted");
    let split = m.get_one::<String>("split").expect("defaulted");
    let echo = serde_json::json!({ "checkpoint": checkpoint, "split": split, "encoder": model.config() });
    let mut reports: Vec<EvalReport> = Vec::new();
    if task == "all" || task == "sts" {
        reports.push(sts_evaluate(&model, &data.sts, "sts", echo.clone())?);
    }
    if task == "all" || task == "retrieval" {
        let pairs = if split == "dev" { &data.dev } else { &data.test };
        reports.push(retrieval_evaluate(&model, pairs, cfg.eval.block_size, "retrieval", echo)?);
    }
    for r in &reports {
        writeln!(out, "{}", r.summary())?;
    }
    write_report(m.get_one::<String>("report"), &reports)?;
    Ok(0)
}

fn count_params(m: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    if m.get_flag("list") {
        for name in accountant::preset_names() {
            writeln!(out, "{name}")?;
        }
        return Ok(0);
    }
    let mut names: Vec<String> = m
        .get_many::<String>("preset")
        .map(|v| v.cloned().collect())
        .unwrap_or_default();
    if m.get_flag("all") {
        names.extend(accountant::preset_names());
    }
    let checkpoints: Vec<String> = m
        .get_many::<String>("checkpoint")
        .map(|v| v.cloned().collect())
        .unwrap_or_default();
    if names.is_empty() && checkpoints.is_empty() {
        return Err(Error::Config("give --preset, --all or --checkpoint".into()));
    }
    let mut rows: Vec<SizeReport> = Vec::new();
    for name in &names {
        let preset = accountant::preset(name)
            .ok_or_else(|| Error::Config(format!("unknown preset `{name}`; see count-params --list")))?;
        rows.push(accountant::model_report(&preset));
    }
    for path in &checkpoints {
        let model: SentenceEncoder<f32> = load_checkpoint(Path::new(path))?;
        let mut report = accountant::audit(&model)?;
        report.preset = path.clone();
        rows.push(report);
    }
    writeln!(out, "{TSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.tsv_row())?;
    }
    Ok(0)
}

fn grad_check(m: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    let wide = m.get_one::<String>("width").expect("defaulted") == "64bit";
    let step = m
        .get_one::<f64>("step")
        .copied()
        .unwrap_or(if wide { 1e-5 } else { 1e-2 });
    let options = GradCheckOptions {
        step,
        seed: seed(m).unwrap_or(0),
        ..GradCheckOptions::default()
    };
    let instances = *m.get_one::<u64>("instances").expect("defaulted");
    let kinds: Vec<LossKind> = match m.get_one::<String>("loss").expect("defaulted").as_str() {
        "all" => LossKind::ALL.to_vec(),
        name => vec![LossKind::parse(name).expect("validated")],
    };
    writeln!(out, "loss\tmax_rel_error\tmax_raw_rel_error\tcoords\tbelow_noise\tworst_n_d_seed")?;
    let mut worst = 0.0f64;
    for kind in kinds {
        let s = if wide {
            check_suite::<f64>(kind, &options, instances)?
        } else {
            check_suite::<f32>(kind, &options, instances)?
        };
        let (n, d, sd) = s.worst_instance;
        writeln!(
            out,
            "{}\t{:.3e}\t{:.3e}\t{}\t{}\t{n},{d},{sd}",
            kind.name(),
            s.max_error,
            s.max_raw_error,
            s.coords_checked,
            s.below_noise
        )?;
        worst = worst.max(s.max_error);
    }
    let pass = worst <= GRAD_TOLERANCE;
    writeln!(out, "max\t{worst:.3e}\t{}", if pass { "PASS" } else { "FAIL" })?;
    Ok(if pass { 0 } else { 1 })
}

fn sweep_depth(m: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    let cfg = run_config(m)?;
    let depths: Vec<usize> = m
        .get_one::<String>("depths")
        .expect("defaulted")
        .split(',')
        .map(|d| {
            d.trim()
                .parse()
                .map_err(|_| Error::Config(format!("--depths: `{d}` is not a layer count")))
        })
        .collect::<Result<_>>()?;
    let points = depth_sweep::<f32>(&cfg, &depths)?;
    writeln!(out, "depth\tsts_rho_x100\tretrieval_acc")?;
    for p in &points {
        writeln!(
            out,
            "{}\t{:.1}\t{:.4}",
            p.depth,
            p.sts.rho_x100.unwrap_or(f64::NAN),
            p.retrieval.retrieval_accuracy.unwrap_or(f64::NAN)
        )?;
    }
    write_report(m.get_one::<String>("report"), &points)?;
    Ok(0)
}
