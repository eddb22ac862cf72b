use clap::{error::ErrorKind, Parser, Subcommand};
use codebias::attribution::{self, AttributionRecord};
use codebias::biasmetrics;
use codebias::corpus::{self, Task};
use codebias::debias;
use codebias::harness::{self, ExperimentConfig, HarnessError, Mitigation, Prepared, SuiteReport};
use codebias::model::{self, Checkpoint};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser, Debug)]
#[command(
    name = "codebias",
    version,
    about = "Project-specific bias experiments on synthetic code corpora",
    arg_required_else_help = true
)]
struct Cli {
    /// Experiment configuration in JSON; absent fields keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Use this single seed instead of the configured seed list.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (falls back to the config's out_dir, then ./out).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and write it as JSON lines.
    Gen,
    /// Train one model with the configured mitigation and save a checkpoint.
    Train {
        #[arg(long)]
        mitigation: Option<Mitigation>,
        /// Add batch partition regularization.
        #[arg(long)]
        bpr: bool,
    },
    /// Attack the inter-project test split with single-identifier renames.
    Attack {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Integrated-gradient attributions, Cond-Idf tables and bias diagnostics.
    Analyze {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Re-render tables and plots from a metrics.json.
    Report {
        #[arg(long, value_name = "PATH")]
        metrics: Option<PathBuf>,
    },
    /// Every standard setting on both tasks, then the full report.
    RunAll {
        /// Skip the batch-size sweep.
        #[arg(long)]
        no_sweep: bool,
        /// Restrict to these tasks (comma separated).
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<Task>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(m) => Failure::Usage(format!("invalid configuration: {m}")),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(
    codebias::Error,
    corpus::CorpusError,
    model::ModelError,
    debias::DebiasError,
    biasmetrics::MetricsError,
    serde_json::Error
);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    let _ = e.print();
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("usage: codebias [--config PATH] [--seed N] [--out DIR] <gen|train|attack|analyze|report|run-all>");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg: ExperimentConfig = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    cfg.generator.task = cfg.task;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn echo_config(out: &Path, cfg: &ExperimentConfig) -> Result<(), Failure> {
    fs::create_dir_all(out)?;
    let mut cfg = cfg.clone();
    cfg.out_dir = Some(out.display().to_string());
    fs::write(out.join("config.resolved.json"), serde_json::to_string_pretty(&cfg)?)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn first_seed(cfg: &ExperimentConfig) -> Result<u64, Failure> {
    cfg.seeds
        .first()
        .copied()
        .ok_or_else(|| Failure::Usage("the seed list is empty".into()))
}

fn load_checkpoint(path: &Path, prep: &Prepared) -> Result<Checkpoint, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let ck = Checkpoint::from_json(&text)?;
    if ck.vocab.tokens() != prep.vocab.tokens() {
        return Err(Failure::Runtime(
            "checkpoint vocabulary does not match the configured corpus".into(),
        ));
    }
    Ok(ck)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli)?;
    let out = out_dir(&cli, &cfg);
    match &cli.command {
        Command::Gen => {
            cfg.validate()?;
            echo_config(&out, &cfg)?;
            let c = corpus::generate_corpus(&cfg.generator)?;
            let path = out.join("corpus.jsonl");
            corpus::save_corpus(&c, &path)?;
            eprintln!("wrote {} ({} samples)", path.display(), c.samples.len());
        }
        Command::Train { mitigation, bpr } => {
            if let Some(m) = mitigation {
                cfg.mitigation = *m;
            }
            cfg.bpr |= *bpr;
            cfg.validate()?;
            echo_config(&out, &cfg)?;
            let seed = first_seed(&cfg)?;
            let prep = harness::prepare(&cfg)?;
            let (params, history) = harness::train_model(&cfg, &prep, seed)?;
            let summary = serde_json::json!({
                "setting": cfg.setting_name(),
                "task": cfg.task,
                "seed": seed,
                "train_loss": history,
                "intra": harness::accuracy(&params, &prep.iid)?,
                "inter": harness::accuracy(&params, &prep.ood)?,
            });
            fs::write(out.join("checkpoint.json"), Checkpoint::new(params, prep.vocab.clone()).to_json())?;
            eprintln!("wrote {}", out.join("checkpoint.json").display());
            write_json(&out.join("train.json"), &summary)?;
            println!("{summary}");
        }
        Command::Attack { checkpoint } => {
            cfg.validate()?;
            echo_config(&out, &cfg)?;
            let prep = harness::prepare(&cfg)?;
            let ck = load_checkpoint(
                &checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.json")),
                &prep,
            )?;
            let (eval, advs) = harness::adversarial_eval(&cfg, &prep, &ck.params, &prep.ood)?;
            let path = out.join("adversarial.jsonl");
            debias::write_adversarial_set(&advs, BufWriter::new(fs::File::create(&path)?))?;
            eprintln!("wrote {}", path.display());
            let summary = serde_json::json!({
                "inter": harness::accuracy(&ck.params, &prep.ood)?,
                "adv": eval.accuracy,
                "attack_success": eval.attack_success,
                "perturbed": eval.perturbed,
            });
            write_json(&out.join("attack.json"), &summary)?;
            println!("{summary}");
        }
        Command::Analyze { checkpoint } => {
            cfg.validate()?;
            echo_config(&out, &cfg)?;
            let prep = harness::prepare(&cfg)?;
            let ck = load_checkpoint(
                &checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.json")),
                &prep,
            )?;
            let mut records = Vec::with_capacity(prep.iid.len());
            for inst in &prep.iid {
                let pred = model::predict(&ck.params, &inst.input)?;
                let a = attribution::integrated_gradients(&ck.params, &inst.input, pred, cfg.ig_steps)?;
                records.push(AttributionRecord {
                    sample_id: prep.sample(inst).sample_id.clone(),
                    target: inst.target,
                    m: a.m_used,
                    per_token: a.per_token,
                });
            }
            let path = out.join("attributions.jsonl");
            let mut w = BufWriter::new(fs::File::create(&path)?);
            attribution::write_attributions(&records, &mut w)?;
            w.flush()?;
            eprintln!("wrote {}", path.display());

            let train: Vec<&corpus::Sample> = prep.train.iter().map(|i| prep.sample(i)).collect();
            for l in 0..cfg.task.num_classes() {
                let table = biasmetrics::cond_idf(&train, cfg.task, l)?;
                let path = out.join(format!("cond_idf_{}.csv", cfg.task.class_name(l)));
                fs::write(&path, table.to_csv()?)?;
                eprintln!("wrote {}", path.display());
            }
            let (diag, plot, cases) = harness::diagnostics(&cfg, &prep, &ck.params)?;
            if let Some(p) = &plot {
                let path = out.join("distribution.svg");
                fs::write(&path, harness::render_distribution_svg(p, cfg.plot_limit))?;
                eprintln!("wrote {}", path.display());
            }
            fs::create_dir_all(out.join("cases"))?;
            for c in &cases {
                fs::write(out.join("cases").join(format!("{}.html", c.sample_id)), harness::render_case_html(c))?;
            }
            write_json(&out.join("analysis.json"), &serde_json::json!({ "diagnostics": diag, "distribution": plot }))?;
            println!("{}", serde_json::to_string(&diag)?);
        }
        Command::Report { metrics } => {
            let path = metrics.clone().unwrap_or_else(|| out.join("metrics.json"));
            let text = fs::read_to_string(&path)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            let suite: SuiteReport = serde_json::from_str(&text)?;
            echo_config(&out, &suite.base)?;
            for p in harness::emit_report(&suite, &out)? {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::RunAll { no_sweep, tasks } => {
            let tasks = if tasks.is_empty() {
                vec![Task::VulnDet, Task::TypeInf]
            } else {
                tasks.clone()
            };
            let mut check = cfg.clone();
            check.bpr_mode = None;
            check.validate()?;
            echo_config(&out, &cfg)?;
            let start = Instant::now();
            let suite = harness::run_suite(&cfg, &tasks, !no_sweep)?;
            let written = harness::emit_report(&suite, &out)?;
            println!(
                "{:<8} {:<14} {:>6} {:>6} {:>6} {:>7}",
                "task", "setting", "INTRA", "INTER", "ADV", "Δ"
            );
            for r in &suite.reports {
                let a = &r.aggregate;
                println!(
                    "{:<8} {:<14} {:>6.3} {:>6.3} {:>6.3} {:>+7.3}{}",
                    format!("{:?}", r.task),
                    r.setting,
                    a.intra.mean,
                    a.inter.mean,
                    a.adv.mean,
                    r.delta_adv.unwrap_or(0.0),
                    if r.valid { "" } else { "  (invalid)" }
                );
            }
            eprintln!(
                "wrote {} files to {} in {:.1}s",
                written.len(),
                out.display(),
                start.elapsed().as_secs_f64()
            );
            if let Some(r) = suite.reports.iter().find(|r| !r.valid) {
                return Err(Failure::Runtime(format!(
                    "{:?} {}: {}",
                    r.task,
                    r.setting,
                    r.error.as_deref().unwrap_or("failed")
                )));
            }
        }
    }
    Ok(())
}
