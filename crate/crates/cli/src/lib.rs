//! Subcommands of the `iptt` binary.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::Serialize;

use iptt_core::autodiff::GradCheckConfig;
use iptt_core::experiments::induction::theorem_bench;
use iptt_core::experiments::probes::{causality_probe, scan_bench, scan_bench_csv, CausalityReport};
use iptt_core::experiments::recall::{ablation_csv, ablation_run, ppl_csv, sliding_window_ppl_docs, AblationVariant};
use iptt_core::model::{model_grad_check, ModelParams};
use iptt_core::training::{load_model, metrics_csv, Checkpoint, Corpus, Trainer};
use iptt_core::{BoundaryMask, SeededRng};

pub use config::{load_config, parse_config, ConfigError, RunConfig};

/// Worker-count environment variable. Results never depend on it.
pub const WORKERS_ENV: &str = "IPTT_WORKERS";

const DEFAULT_VARIANTS: &str = "full,no-conv,no-proj,reconstruction";

fn config_args(cmd: Command) -> Command {
    let keys = RunConfig::default().keys();
    let cmd = cmd
        .arg(Arg::new("config").long("config").value_name("FILE").help("JSON config file"))
        .arg(Arg::new("out").long("out").value_name("DIR").default_value(".").help("Directory for artifacts"));
    keys.into_iter().fold(cmd, |cmd, (key, default)| {
        cmd.arg(
            Arg::new(key.clone())
                .long(key)
                .value_name("VALUE")
                .help(format!("[default: {default}]"))
                .help_heading("Config keys"),
        )
    })
}

fn opt(name: &'static str, default: Option<&'static str>, help: &'static str) -> Arg {
    let a = Arg::new(name).long(name).help(help).action(ArgAction::Set);
    match default {
        Some(d) => a.default_value(d),
        None => a,
    }
}

pub fn command() -> Command {
    let sub = |name: &'static str, about: &'static str| config_args(Command::new(name).about(about));
    Command::new("iptt")
        .about("In-place test-time training: train, evaluate and probe toy models")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            sub("train", "Train a byte-level model; writes checkpoint.iptt and metrics.csv")
                .arg(opt("corpus", None, "Text file or directory of documents").required(true))
                .arg(opt("resume", None, "Continue from this checkpoint (its config wins)"))
                .arg(opt("stop-at", None, "Stop after this step instead of train.total_steps")),
        )
        .subcommand(
            sub("eval-ppl", "Sliding-window perplexity; writes ppl_curve.csv")
                .arg(opt("checkpoint", None, "Model checkpoint").required(true))
                .arg(opt("corpus", None, "Evaluate on these documents instead of the recall probe"))
                .arg(opt("block", None, "Scored block length [default: recall probe block]"))
                .arg(opt("label", Some("model"), "Model name in the CSV")),
        )
        .subcommand(
            sub("induction", "Monte Carlo check of the induction logit bounds; writes theorem_report.json")
                .arg(opt("trials", Some("1000"), "Number of trials"))
                .arg(opt("seed", Some("0"), "Random seed")),
        )
        .subcommand(
            sub("ablate", "Train target/chunk/placement variants on the recall corpus; writes ablation.csv")
                .arg(opt("variants", Some(DEFAULT_VARIANTS), "Comma list: full, no-conv, no-proj, reconstruction, chunk=N, ttt_every=N"))
                .arg(opt("corpus", None, "Train on these documents instead of the recall corpus")),
        )
        .subcommand(
            sub("causality", "Flip one token and report the first changed logit row; writes causality.json")
                .arg(opt("checkpoint", None, "Model checkpoint [default: random model from the config]"))
                .arg(opt("n", Some("512"), "Sequence length"))
                .arg(opt("positions", None, "Comma list of flip positions [default: 0,1,C-1,C,C+1,n-1]"))
                .arg(opt("documents", Some("1"), "Split the sequence into this many equal documents"))
                .arg(opt("seed", Some("0"), "Random seed for tokens and the random model")),
        )
        .subcommand(
            sub("bench-scan", "Time the sequential recurrence against both scan modes; writes scan_bench.csv")
                .arg(opt("chunks", Some("64"), "Number of chunks"))
                .arg(opt("workers", Some("1"), "Comma list of worker counts"))
                .arg(opt("reps", Some("3"), "Repetitions per timing (best is kept)"))
                .arg(opt("seed", Some("0"), "Random seed")),
        )
        .subcommand(
            sub("grad-check", "Finite-difference check of all model gradients; writes grad_check.json")
                .arg(opt("tokens", Some("8"), "Sequence length"))
                .arg(opt("conv-std", Some("1.0"), "Std of the random conv kernels (0 keeps the zero init)"))
                .arg(opt("seed", Some("0"), "Random seed")),
        )
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    RunConfig::default()
        .keys()
        .into_keys()
        .filter(|k| m.value_source(k) == Some(ValueSource::CommandLine))
        .map(|k| {
            let v = m.get_one::<String>(&k).cloned().unwrap_or_default();
            (k, v)
        })
        .collect()
}

fn run_config(m: &ArgMatches) -> anyhow::Result<RunConfig> {
    let path = m.get_one::<String>("config").map(PathBuf::from);
    Ok(load_config(path.as_deref(), &overrides(m))?)
}

fn out_dir(m: &ArgMatches) -> anyhow::Result<PathBuf> {
    let out = PathBuf::from(m.get_one::<String>("out").expect("has default"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn parsed<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> anyhow::Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    m.get_one::<String>(name)
        .map(|s| s.trim().parse::<T>().map_err(|e| anyhow::anyhow!("--{name} {s:?}: {e}")))
        .transpose()
}

fn list<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> anyhow::Result<Option<Vec<T>>>
where
    T::Err: std::fmt::Display,
{
    m.get_one::<String>(name)
        .map(|s| {
            s.split(',')
                .map(|x| x.trim().parse::<T>().map_err(|e| anyhow::anyhow!("--{name} {x:?}: {e}")))
                .collect()
        })
        .transpose()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, s)
}

/// Sizes the global thread pool from [`WORKERS_ENV`].
pub fn init_workers() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.trim().parse().with_context(|| format!("{WORKERS_ENV}={v:?} is not a count"))?;
        if n == 0 {
            bail!("{WORKERS_ENV} must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    Ok(())
}

fn progress(total: u64) -> impl FnMut(&iptt_core::training::StepMetrics) {
    let every = (total / 10).max(1);
    move |m| {
        if m.step % every == 0 || m.step == total {
            eprintln!("step {} loss {:.4} grad_norm {:.3} lr {:.3e}", m.step, m.loss, m.grad_norm, m.lr);
        }
    }
}

fn train(m: &ArgMatches) -> anyhow::Result<()> {
    let out = out_dir(m)?;
    let corpus_path = PathBuf::from(m.get_one::<String>("corpus").expect("required"));
    let corpus = Corpus::load(&corpus_path).with_context(|| format!("loading corpus {}", corpus_path.display()))?;
    let mut trainer = match m.get_one::<String>("resume") {
        Some(p) => Trainer::from_checkpoint(&Checkpoint::load(Path::new(p))?)?,
        None => {
            let cfg = run_config(m)?;
            Trainer::new(cfg.model, cfg.train)?
        }
    };
    let until = parsed::<u64>(m, "stop-at")?;
    let total = until.unwrap_or(trainer.train.total_steps);
    let metrics = trainer.run(&corpus, until, progress(total))?;
    trainer.to_checkpoint().save(&out.join("checkpoint.iptt"))?;
    write(&out.join("metrics.csv"), metrics_csv(&metrics))
}

fn eval_ppl(m: &ArgMatches) -> anyhow::Result<()> {
    let cfg = run_config(m)?;
    let out = out_dir(m)?;
    let (model, params) = load_model(Path::new(m.get_one::<String>("checkpoint").expect("required")))?;
    let protocol = &cfg.recall;
    let block = parsed::<usize>(m, "block")?.unwrap_or_else(|| protocol.ppl_block());
    let docs = match m.get_one::<String>("corpus") {
        Some(p) => {
            let corpus = Corpus::load(Path::new(p))?;
            let need = protocol.prefix_lens.iter().max().copied().unwrap_or(0) + block;
            let mut ends = corpus.document_starts()[1..].to_vec();
            ends.push(corpus.len());
            let docs: Vec<Vec<usize>> = corpus
                .document_starts()
                .iter()
                .zip(ends)
                .map(|(&s, e)| corpus.tokens()[s..e].to_vec())
                .filter(|d| d.len() >= need)
                .collect();
            if docs.is_empty() {
                bail!("no document in {p} has the {need} tokens needed for recall.prefix_lens and a block of {block}");
            }
            docs
        }
        None => protocol.ppl_documents()?,
    };
    let curve = sliding_window_ppl_docs(&params, &protocol.eval_config(&model), &docs, block, &protocol.prefix_lens, docs.len())?;
    let label = m.get_one::<String>("label").expect("has default").clone();
    write(&out.join("ppl_curve.csv"), ppl_csv(&[(label, curve)]))
}

fn induction(m: &ArgMatches) -> anyhow::Result<()> {
    let cfg = run_config(m)?;
    let out = out_dir(m)?;
    let trials = parsed::<usize>(m, "trials")?.expect("has default");
    let seed = parsed::<u64>(m, "seed")?.expect("has default");
    let report = theorem_bench(&cfg.induction, trials, seed)?;
    write_json(&out.join("theorem_report.json"), &report)
}

fn ablate(m: &ArgMatches) -> anyhow::Result<()> {
    let cfg = run_config(m)?;
    let out = out_dir(m)?;
    let variants: Vec<AblationVariant> = m
        .get_one::<String>("variants")
        .expect("has default")
        .split(',')
        .map(|s| AblationVariant::parse(s.trim()))
        .collect::<Result<_, _>>()?;
    let corpus = match m.get_one::<String>("corpus") {
        Some(p) => Corpus::load(Path::new(p))?,
        None => cfg.recall.train_corpus()?,
    };
    let rows = ablation_run(&cfg.model, &cfg.train, &cfg.recall, &corpus, &variants)?;
    write(&out.join("ablation.csv"), ablation_csv(&rows))
}

#[derive(Serialize)]
struct CausalityOutput {
    n: usize,
    documents: usize,
    chunk_size: usize,
    reports: Vec<CausalityReport>,
    passed: bool,
}

fn causality(m: &ArgMatches) -> anyhow::Result<()> {
    let cfg = run_config(m)?;
    let out = out_dir(m)?;
    let seed = parsed::<u64>(m, "seed")?.expect("has default");
    let n = parsed::<usize>(m, "n")?.expect("has default");
    let n_docs = parsed::<usize>(m, "documents")?.expect("has default");
    if n == 0 || n_docs == 0 || n_docs > n {
        bail!("need 1 <= --documents <= --n and --n >= 1");
    }
    let (model, params) = match m.get_one::<String>("checkpoint") {
        Some(p) => load_model(Path::new(p))?,
        None => (cfg.model.clone(), random_model(&cfg, seed, 0.5)),
    };
    let c = model.ttt.chunk_size;
    let positions = list::<usize>(m, "positions")?.unwrap_or_else(|| {
        let mut p = vec![0, 1, c - 1, c, c + 1, n - 1];
        p.retain(|&q| q < n);
        p.dedup();
        p
    });
    let mut rng = SeededRng::derive(seed, 1);
    let tokens: Vec<usize> = (0..n).map(|_| rng.below(model.vocab_size)).collect();
    let lengths: Vec<usize> = (0..n_docs).map(|i| (i + 1) * n / n_docs - i * n / n_docs).collect();
    let mask = BoundaryMask::from_lengths(&lengths);
    let reports = positions
        .iter()
        .map(|&q| causality_probe(&params, &model, &tokens, q, Some(&mask)))
        .collect::<Result<Vec<_>, _>>()?;
    let passed = reports.iter().all(|r| r.passed);
    write_json(
        &out.join("causality.json"),
        &CausalityOutput {
            n,
            documents: n_docs,
            chunk_size: c,
            reports,
            passed,
        },
    )?;
    if !passed {
        bail!("causality violated; see causality.json");
    }
    Ok(())
}

/// Initial parameters with random conv kernels, so the fast-weight path is
/// active from the first token.
fn random_model(cfg: &RunConfig, seed: u64, conv_std: f64) -> ModelParams {
    let mut rng = SeededRng::derive(seed, 0);
    let mut params = ModelParams::init(&cfg.model, &cfg.train.init, &mut rng);
    if conv_std > 0.0 {
        for (i, l) in params.layers.iter_mut().enumerate() {
            if let Some(t) = &mut l.target {
                if !cfg.model.is_frozen(&format!("layers.{i}.conv")) {
                    t.conv = rng.normal_matrix(t.conv.rows(), t.conv.cols(), conv_std);
                }
            }
        }
    }
    params
}

fn bench_scan(m: &ArgMatches) -> anyhow::Result<()> {
    let cfg = run_config(m)?;
    let out = out_dir(m)?;
    let workers = list::<usize>(m, "workers")?.expect("has default");
    let rows = scan_bench(
        &cfg.model.layer_config(),
        parsed(m, "chunks")?.expect("has default"),
        &workers,
        parsed(m, "reps")?.expect("has default"),
        parsed(m, "seed")?.expect("has default"),
    )?;
    write(&out.join("scan_bench.csv"), scan_bench_csv(&rows))
}

#[derive(Serialize)]
struct ParamError {
    name: String,
    max_rel_error: f64,
}

#[derive(Serialize)]
struct GradCheckOutput {
    step: f64,
    tolerance: f64,
    max_rel_error: f64,
    params: Vec<ParamError>,
    passed: bool,
}

fn grad_check(m: &ArgMatches) -> anyhow::Result<()> {
    let cfg = run_config(m)?;
    let out = out_dir(m)?;
    let seed = parsed::<u64>(m, "seed")?.expect("has default");
    let n = parsed::<usize>(m, "tokens")?.expect("has default");
    let conv_std = parsed::<f64>(m, "conv-std")?.expect("has default");
    let params = random_model(&cfg, seed, conv_std);
    let mut rng = SeededRng::derive(seed, 1);
    let tokens: Vec<usize> = (0..n).map(|_| rng.below(cfg.model.vocab_size)).collect();
    let check = GradCheckConfig::default();
    let report = model_grad_check(&params, &cfg.model, &tokens, None, &check)?;
    let output = GradCheckOutput {
        step: check.step,
        tolerance: report.tolerance,
        max_rel_error: report.max_rel_error,
        params: report
            .params
            .iter()
            .map(|p| ParamError {
                name: p.name.clone(),
                max_rel_error: p.max_rel_error,
            })
            .collect(),
        passed: report.passed,
    };
    write_json(&out.join("grad_check.json"), &output)?;
    if !report.passed {
        bail!("gradient check failed: max relative error {:.3e}", report.max_rel_error);
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(argv)?;
    let (name, m) = matches.subcommand().expect("subcommand required");
    match name {
        "train" => train(m),
        "eval-ppl" => eval_ppl(m),
        "induction" => induction(m),
        "ablate" => ablate(m),
        "causality" => causality(m),
        "bench-scan" => bench_scan(m),
        "grad-check" => grad_check(m),
        other => bail!("unknown subcommand {other}"),
    }
}
