use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use increvec::data::{generate, ingest_jsonl, write_jsonl, Corpus, SyntheticSpec};
use increvec::encoder::Vocab;
use increvec::error::{Error, Result};
use increvec::harness::verify::{all_property_checks, grad_check_suite, CheckOutcome};
use increvec::harness::{
    compare, encoder_checkpoint, encoder_from_checkpoint, evaluate_checkpoint, pretrain_encoder, run, to_csv,
    to_markdown, Checkpoint, CheckpointKind, Method, MetricsReport, RunConfig,
};

#[derive(Parser)]
#[command(name = "increvec", version, about = "Incremental user embedding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus as JSONL
    Generate(GenerateArgs),
    /// Normalize an external JSONL corpus into canonical form
    Ingest {
        path: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Warm up a text encoder on a corpus and save it frozen
    PretrainEncoder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train one method and write its checkpoint and metrics
    Train(TrainArgs),
    /// Recompute test metrics of a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Tabulate metrics reports against a baseline
    Compare {
        #[arg(long)]
        baseline: String,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        markdown: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every trainable module
    GradCheck {
        #[arg(long)]
        json: bool,
    },
    /// Store, momentum, reduction, loss and chronology property checks
    Check {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 100)]
    users: usize,
    #[arg(long, default_value_t = 40)]
    events: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Events between interest shifts; 0 disables drift
    #[arg(long, default_value_t = 12)]
    drift_period: usize,
    #[arg(long, default_value_t = 3)]
    topics_per_user: usize,
    #[arg(long, default_value_t = 30)]
    vocab_per_topic: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    overlap: f64,
    #[arg(long, default_value_t = 0.07)]
    topic_token_rate: f64,
    #[arg(long, default_value_t = 0.8)]
    focus: f64,
    #[arg(long, default_value_t = 0.0)]
    imbalance: f64,
    /// Complete spec as JSON; overrides the flags above
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

impl GenerateArgs {
    fn spec(&self) -> Result<SyntheticSpec> {
        if let Some(p) = &self.spec {
            return Ok(serde_json::from_str(&fs::read_to_string(p)?)?);
        }
        Ok(SyntheticSpec {
            num_users: self.users,
            events_per_user: self.events,
            num_classes: self.classes,
            seed: self.seed,
            topic_drift_period: (self.drift_period > 0).then_some(self.drift_period),
            topics_per_user: self.topics_per_user,
            vocab_per_topic: self.vocab_per_topic,
            noise_rate: self.noise,
            topic_overlap: self.overlap,
            topic_token_rate: self.topic_token_rate,
            focus_weight: self.focus,
            imbalance_exponent: self.imbalance,
            ..SyntheticSpec::default()
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Pretrained encoder checkpoint; required by stream methods
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    prepend_category: bool,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(short, long)]
    output: PathBuf,
}

impl TrainArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = &self.method {
            cfg.method = Method::parse(m)?;
        }
        if let Some(n) = &self.name {
            cfg.name = Some(n.clone());
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if self.prepend_category {
            cfg.prepend_category = true;
        }
        if let Some(e) = self.max_epochs {
            cfg.max_epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let (corpus, report) = ingest_jsonl(path)?;
    info!("loaded {} events ({} malformed, {} missing fields)", report.events, report.malformed, report.missing_field);
    Ok(corpus)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn report_checks(outcomes: &[CheckOutcome], json: bool) -> Result<bool> {
    if json {
        println!("{}", serde_json::to_string_pretty(outcomes)?);
    } else {
        for c in outcomes {
            let status = if c.passed { "PASS" } else { "FAIL" };
            println!("{status} {} max_error={:.3e} tol={:.0e} {}", c.name, c.max_error, c.tolerance, c.detail);
        }
    }
    Ok(outcomes.iter().all(|c| c.passed))
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate(args) => {
            let corpus = generate(&args.spec()?)?;
            write_jsonl(&corpus, BufWriter::new(File::create(&args.output)?))?;
            println!("wrote {} events to {}", corpus.len(), args.output.display());
        }
        Command::Ingest { path, output } => {
            let (corpus, report) = ingest_jsonl(&path)?;
            write_jsonl(&corpus, BufWriter::new(File::create(&output)?))?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::PretrainEncoder { data, config, seed, output } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let corpus = load_corpus(&data)?;
            let (bundle, report) = pretrain_encoder(&cfg, &corpus)?;
            let crc = encoder_checkpoint(&cfg, &bundle, &corpus.classes).save(&output)?;
            bundle.vocab.save(&output.with_extension("vocab.txt"))?;
            println!("{}", serde_json::to_string(&report)?);
            println!("checkpoint {} crc32={crc:08x}", output.display());
        }
        Command::Train(args) => {
            let cfg = args.config()?;
            let corpus = load_corpus(&args.data)?;
            let bundle = match &args.encoder {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    if ck.header.kind != CheckpointKind::Encoder {
                        return Err(Error::Checkpoint(format!("{} is not an encoder checkpoint", p.display())));
                    }
                    Some(encoder_from_checkpoint(&ck)?)
                }
                None => None,
            };
            let out = run(&cfg, &corpus, bundle.as_ref())?;
            fs::create_dir_all(&args.output)?;
            let crc = out.checkpoint.save(&args.output.join("model.ckpt"))?;
            write_json(&args.output.join("metrics.json"), &out.report)?;
            write_json(&args.output.join("config.json"), &cfg)?;
            Vocab::from_tokens(out.checkpoint.header.vocab.clone())?.save(&args.output.join("vocab.txt"))?;
            println!(
                "{} accuracy={:.4} samples={} crc32={crc:08x}",
                out.report.name, out.report.accuracy, out.report.samples
            );
        }
        Command::Eval { checkpoint, data, output } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let report = evaluate_checkpoint(&ck, &load_corpus(&data)?)?;
            match output {
                Some(p) => write_json(&p, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::Compare { baseline, reports, csv, markdown } => {
            let loaded: Vec<MetricsReport> = reports
                .iter()
                .map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?))
                .collect::<Result<_>>()?;
            let rows = compare(&loaded, &baseline)?;
            let md = to_markdown(&rows);
            if let Some(p) = csv {
                fs::write(p, to_csv(&rows))?;
            }
            if let Some(p) = markdown {
                fs::write(p, &md)?;
            }
            print!("{md}");
        }
        Command::GradCheck { json } => return report_checks(&grad_check_suite(), json),
        Command::Check { json } => return report_checks(&all_property_checks()?, json),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(io::stderr(), "error kind={} message={msg:?}", e.kind());
            ExitCode::from(1)
        }
    }
}
