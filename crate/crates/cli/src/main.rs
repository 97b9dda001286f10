mod config;
mod manifest;
mod report;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::json;

use tacticraft_core::adapter::AdapterSet;
use tacticraft_core::buildorder::{filter_by_mmr, parse_dir, read_corpus, write_corpus, DEFAULT_MIN_MMR};
use tacticraft_core::labeler::{label_corpus, ClassifierEndpoint, LabelStrategy, RuleSet};
use tacticraft_core::policy::{BasePolicy, PolicyDims};
use tacticraft_core::synth::{evaluate_modulation, generate_dataset, pretrain_base, PretrainConfig, ScriptSet};
use tacticraft_core::taxonomy::write_labels;
use tacticraft_core::trainer::{train, Dataset, TrainError, TrainOptions};

use manifest::{now_unix, sidecar, RunManifest};

#[derive(Debug)]
enum CliError {
    /// Bad invocation or configuration; exit 2.
    Usage(String),
    /// Validation, evaluation or runtime failure; exit 1.
    Failure(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::UnknownKeys(_) => CliError::Usage(e.to_string()),
            other => CliError::Failure(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn fail(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

fn io_ctx(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Failure(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "tacticraft", version, about = "Tactic-conditioned adapters for a frozen RTS policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LabelMode {
    Rules,
    Endpoint,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReportFormat {
    Text,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a directory of build-order files into a JSONL corpus.
    Parse {
        in_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_MMR)]
        min_mmr: i64,
    },
    /// Attach tactic distributions to every build order of a corpus.
    Label {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = LabelMode::Rules)]
        mode: LabelMode,
        #[arg(long, env = "TACTICRAFT_ENDPOINT_URL")]
        endpoint_url: Option<String>,
        #[arg(long, default_value = "gpt-4")]
        model: String,
        #[arg(long, env = "TACTICRAFT_API_KEY", hide_env_values = true)]
        api_key: Option<String>,
        /// Rule file; the bundled rules otherwise.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Train adapters on a dataset (synthetic unless --data is given).
    Train {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// KL weight preset A, B, C or D.
        #[arg(long)]
        preset: Option<String>,
        /// Config override, e.g. `--set grad_clip.threshold=2.0`.
        #[arg(long = "set", value_name = "KEY=VALUE", value_parser = config::parse_assignment)]
        sets: Vec<(String, toml::Value)>,
        /// JSONL trajectories.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Frozen base checkpoint; pre-trained on the data if absent.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value_t = 900)]
        trajectories: usize,
        #[arg(long)]
        scripts: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        pretrain_steps: u64,
        #[arg(long)]
        resume: bool,
    },
    /// Measure tactical modulation; exit 0 iff diagonal dominance holds.
    Eval {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapters: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scripts: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        n_eval: usize,
        #[arg(long, default_value_t = 8)]
        traj_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Categories blended 50/50 for the hybrid check.
        #[arg(long, num_args = 2, value_names = ["A", "B"], default_values_t = [5, 7])]
        blend: Vec<usize>,
    },
    /// Summarize metrics logs into text or CSV tables.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        format: Option<ReportFormat>,
        /// Curve rows every this many steps.
        #[arg(long, default_value_t = 1000)]
        every: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("TACTICRAFT_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let (CliError::Usage(m) | CliError::Failure(m)) = &e;
            eprintln!("error: {m}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: Command) -> Result<u8> {
    let started = now_unix();
    match cmd {
        Command::Parse { in_dir, out, min_mmr } => cmd_parse(&in_dir, &out, min_mmr, started),
        Command::Label {
            corpus,
            out,
            mode,
            endpoint_url,
            model,
            api_key,
            rules,
            temperature,
        } => {
            let strategy = match mode {
                LabelMode::Rules => {
                    let mut rs = match &rules {
                        Some(p) => RuleSet::from_toml(&fs::read_to_string(p).map_err(io_ctx(p))?)
                            .map_err(|e| CliError::Usage(e.to_string()))?,
                        None => RuleSet::default_rules(),
                    };
                    if let Some(t) = temperature {
                        rs.temperature = t;
                    }
                    LabelStrategy::RuleBased {
                        temperature: rs.temperature,
                        rules: rs,
                    }
                }
                LabelMode::Endpoint => {
                    let url = endpoint_url
                        .ok_or_else(|| CliError::Usage("--mode endpoint needs --endpoint-url".into()))?;
                    let mut ep = ClassifierEndpoint::new(url, model);
                    ep.api_key = api_key;
                    LabelStrategy::Endpoint(ep)
                }
            };
            cmd_label(&corpus, &out, &strategy, rules.as_deref(), started)
        }
        Command::Train {
            out_dir,
            config,
            preset,
            mut sets,
            data,
            base,
            trajectories,
            scripts,
            pretrain_steps,
            resume,
        } => {
            if let Some(p) = preset {
                if tacticraft_core::trainer::HeadWeights::preset(&p).is_none() {
                    return Err(CliError::Usage(format!("unknown preset `{p}` (expected A, B, C or D)")));
                }
                sets.push(("head_weights".into(), toml::Value::String(p)));
            }
            let text = match &config {
                Some(p) => Some(fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?),
                None => None,
            };
            let (cfg, flat) = config::build(text.as_deref(), std::env::vars(), &sets)?;
            cfg.validate()?;
            let job = TrainJob {
                out_dir,
                config_file: config,
                data,
                base,
                trajectories,
                scripts,
                pretrain_steps,
                resume,
                overrides: flat,
            };
            cmd_train(&job, &cfg, started)
        }
        Command::Eval {
            base,
            adapters,
            out,
            scripts,
            n_eval,
            traj_len,
            seed,
            blend,
        } => cmd_eval(&base, &adapters, &out, scripts.as_deref(), n_eval, traj_len, seed, (blend[0], blend[1]), started),
        Command::Report {
            metrics,
            out,
            format,
            every,
        } => {
            let format = format.unwrap_or(if out.extension().is_some_and(|e| e == "csv") {
                ReportFormat::Csv
            } else {
                ReportFormat::Text
            });
            cmd_report(&metrics, &out, format, every, started)
        }
    }
}

fn cmd_parse(in_dir: &Path, out: &Path, min_mmr: i64, started: u64) -> Result<u8> {
    if !in_dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", in_dir.display())));
    }
    let parsed = parse_dir(in_dir).map_err(io_ctx(in_dir))?;
    for (p, e) in &parsed.failures {
        warn!("skipping {}: {e}", p.display());
    }
    let n_parsed = parsed.orders.len();
    let filtered = filter_by_mmr(parsed.orders, min_mmr);
    let f = fs::File::create(out).map_err(io_ctx(out))?;
    write_corpus(std::io::BufWriter::new(f), &filtered.kept).map_err(io_ctx(out))?;
    let stats = json!({
        "parsed": n_parsed,
        "failed": parsed.failures.len(),
        "below_min_mmr": filtered.below_threshold,
        "unrated": filtered.unrated,
        "kept": filtered.kept.len(),
    });
    println!("{stats}");
    RunManifest::new("parse", None, json!({ "min_mmr": min_mmr, "stats": stats }), &[in_dir.to_path_buf()], started)
        .and_then(|m| m.write(&sidecar(out)))
        .map_err(io_ctx(out))?;
    Ok(0)
}

fn cmd_label(corpus: &Path, out: &Path, strategy: &LabelStrategy, rules: Option<&Path>, started: u64) -> Result<u8> {
    if !corpus.is_file() {
        return Err(CliError::Usage(format!("corpus {} does not exist", corpus.display())));
    }
    let f = fs::File::open(corpus).map_err(io_ctx(corpus))?;
    let orders = read_corpus(BufReader::new(f)).map_err(|e| fail(format!("{}: {e}", corpus.display())))?;
    let labels = label_corpus(&orders, strategy);
    for e in &labels.failures {
        warn!("{e}");
    }
    let f = fs::File::create(out).map_err(io_ctx(out))?;
    write_labels(std::io::BufWriter::new(f), &labels.labels).map_err(io_ctx(out))?;
    println!("{}", serde_json::to_string(&labels.summary).map_err(fail)?);
    let config = match strategy {
        LabelStrategy::RuleBased { temperature, .. } => json!({ "mode": "rules", "temperature": temperature }),
        LabelStrategy::Endpoint(ep) => json!({ "mode": "endpoint", "endpoint_url": ep.base_url, "model": ep.model }),
    };
    let mut inputs = vec![corpus.to_path_buf()];
    inputs.extend(rules.map(Path::to_path_buf));
    RunManifest::new("label", None, config, &inputs, started)
        .and_then(|m| m.write(&sidecar(out)))
        .map_err(io_ctx(out))?;
    if labels.summary.total > 0 && labels.summary.labeled == 0 {
        return Err(fail("no build order could be labeled"));
    }
    Ok(0)
}

struct TrainJob {
    out_dir: PathBuf,
    config_file: Option<PathBuf>,
    data: Option<PathBuf>,
    base: Option<PathBuf>,
    trajectories: usize,
    scripts: Option<PathBuf>,
    pretrain_steps: u64,
    resume: bool,
    overrides: std::collections::BTreeMap<String, toml::Value>,
}

fn load_scripts(path: Option<&Path>, d: &PolicyDims) -> Result<ScriptSet> {
    match path {
        Some(p) => Ok(ScriptSet::from_toml(&fs::read_to_string(p).map_err(io_ctx(p))?, d)?),
        None => Ok(ScriptSet::default_for(d)?),
    }
}

fn cmd_train(job: &TrainJob, cfg: &tacticraft_core::trainer::TrainConfig, started: u64) -> Result<u8> {
    let out = &job.out_dir;
    fs::create_dir_all(out).map_err(io_ctx(out))?;
    let given_base = match &job.base {
        Some(p) => Some(BasePolicy::load(p).map_err(fail)?),
        None => None,
    };
    let dims = given_base.as_ref().map_or_else(PolicyDims::toy, |b| b.dims.clone());

    let mut inputs: Vec<PathBuf> = job.config_file.iter().cloned().collect();
    let data_source;
    let dataset = match &job.data {
        Some(p) => {
            inputs.push(p.clone());
            data_source = json!({ "file": p.display().to_string() });
            Dataset::read_jsonl(p).map_err(io_ctx(p))?
        }
        None => {
            let scripts = load_scripts(job.scripts.as_deref(), &dims)?;
            inputs.extend(job.scripts.iter().cloned());
            fs::write(out.join("scripts.toml"), scripts.to_toml()).map_err(io_ctx(out))?;
            data_source = json!({
                "synthetic": { "trajectories": job.trajectories, "trajectory_length": cfg.trajectory_length, "seed": cfg.seed }
            });
            info!("generating {} synthetic trajectories", job.trajectories);
            generate_dataset(&scripts, &dims, job.trajectories, cfg.trajectory_length, cfg.seed)?.dataset
        }
    };

    let base_stem = out.join("base");
    let base = match given_base {
        Some(b) => {
            inputs.extend(job.base.iter().cloned());
            b
        }
        None if job.resume && base_stem.with_extension("manifest").is_file() => {
            BasePolicy::load(&base_stem.with_extension("manifest")).map_err(fail)?
        }
        None => {
            info!("pre-training the base policy for {} steps", job.pretrain_steps);
            let pc = PretrainConfig {
                steps: job.pretrain_steps,
                seed: cfg.seed,
                ..PretrainConfig::default()
            };
            let b = pretrain_base(&dataset, &dims, &pc)?.base;
            b.save(&base_stem).map_err(fail)?;
            b
        }
    };

    fs::write(out.join(report::CONFIG_FILE), cfg.to_toml_string()).map_err(io_ctx(out))?;
    info!("training {} steps into {}", cfg.total_steps, out.display());
    let outcome = train(
        &dataset,
        &base,
        cfg,
        &TrainOptions {
            checkpoint_dir: Some(out.clone()),
            resume: job.resume,
            stop_at: None,
        },
    )?;
    let mut final_adapters = outcome.adapters;
    final_adapters.store.round_to_f32();
    final_adapters.save(&out.join("adapters")).map_err(fail)?;
    if let Some(m) = outcome.metrics.last() {
        println!(
            "{}",
            json!({ "step": m.step, "loss": m.loss, "checkpoints": outcome.checkpoints.len() })
        );
    }

    let config = json!({
        "train": toml::from_str::<toml::Table>(&cfg.to_toml_string()).map_err(fail)?,
        "overrides": job.overrides.iter().map(|(k, v)| (k.clone(), v.to_string())).collect::<std::collections::BTreeMap<_, _>>(),
        "data": data_source,
        "base": job.base.as_ref().map_or_else(|| json!({ "pretrain_steps": job.pretrain_steps }), |p| json!(p.display().to_string())),
    });
    RunManifest::new("train", Some(cfg.seed), config, &inputs, started)
        .and_then(|m| m.write(&out.join("manifest.json")))
        .map_err(io_ctx(out))?;
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    base_path: &Path,
    adapters_path: &Path,
    out: &Path,
    scripts: Option<&Path>,
    n_eval: usize,
    traj_len: usize,
    seed: u64,
    blend: (usize, usize),
    started: u64,
) -> Result<u8> {
    if blend.0 >= 9 || blend.1 >= 9 || n_eval == 0 || traj_len == 0 {
        return Err(CliError::Usage("blend categories must be below 9 and n-eval, traj-len positive".into()));
    }
    let base = BasePolicy::load(base_path).map_err(|e| fail(format!("base {}: {e}", base_path.display())))?;
    let adapters = AdapterSet::load(adapters_path, &base.dims)
        .map_err(|e| fail(format!("adapters {}: {e}", adapters_path.display())))?;
    let scripts_set = load_scripts(scripts, &base.dims)?;
    let report = evaluate_modulation(&base, &adapters, &scripts_set, n_eval, traj_len, seed, blend)?;
    let mut text = serde_json::to_string_pretty(&report).map_err(fail)?;
    text.push('\n');
    fs::write(out, text).map_err(io_ctx(out))?;
    print!("{}", report.render_table());

    let mut inputs = vec![base_path.to_path_buf(), adapters_path.to_path_buf()];
    inputs.extend(scripts.map(Path::to_path_buf));
    for p in [base_path, adapters_path] {
        inputs.push(p.with_extension("bin"));
    }
    let config = json!({ "n_eval": n_eval, "traj_len": traj_len, "blend": [blend.0, blend.1] });
    RunManifest::new("eval", Some(seed), config, &inputs, started)
        .and_then(|m| m.write(&sidecar(out)))
        .map_err(io_ctx(out))?;
    if report.diagonal_dominant {
        Ok(0)
    } else {
        eprintln!("no diagonal dominance: conditioning does not single out each archetype");
        Ok(1)
    }
}

fn cmd_report(metrics: &[PathBuf], out: &Path, format: ReportFormat, every: u64, started: u64) -> Result<u8> {
    let runs = report::load_runs(metrics).map_err(fail)?;
    let text = match format {
        ReportFormat::Text => report::render_text(&runs, every),
        ReportFormat::Csv => report::render_csv(&runs, every),
    };
    fs::write(out, &text).map_err(io_ctx(out))?;
    if matches!(format, ReportFormat::Text) {
        print!("{text}");
    }
    let inputs: Vec<PathBuf> = metrics.to_vec();
    RunManifest::new("report", None, json!({ "every": every }), &inputs, started)
        .and_then(|m| m.write(&sidecar(out)))
        .map_err(io_ctx(out))?;
    Ok(0)
}
