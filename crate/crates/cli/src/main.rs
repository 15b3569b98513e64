use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use tsr_core::config::RunConfig;
use tsr_core::grammar::{tokenize, vocab};
use tsr_core::pipeline::{self, InitSpec, RecipeLayout};
use tsr_core::synth::SynthConfig;
use tsr_core::teds::{evaluate_corpus, format_table, EvalPair, TedsReport};
use tsr_core::tsr::Schedule;
use tsr_core::TokenSeq;

#[derive(Parser)]
#[command(name = "tsr", version, about = "Table structure recognition experiments")]
struct Cli {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set finetune.epochs=3`.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Start from the full-size settings instead of the small defaults.
    #[arg(long, global = true)]
    full_size: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the structure vocabulary.
    Vocab,
    /// Tokenize an HTML structure string (argument or stdin).
    Tokenize { html: Option<String> },
    /// Score predictions against ground truth, both JSON lines of {"id", "tokens"}.
    Teds {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Write a synthetic labeled dataset.
    Synth(SynthArgs),
    /// Train the patch tokenizer.
    TrainVqvae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked-image pretraining of the encoder.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune for structure recognition.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// `scratch` or `mim:<checkpoint>`.
        #[arg(long, default_value = "scratch")]
        init: InitSpec,
        #[arg(long, default_value = "full")]
        schedule: Schedule,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset, or saved predictions against labels.
    Evaluate {
        #[arg(long, requires = "data", conflicts_with_all = ["pred", "gt"])]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        /// Also write per-sample predictions as JSON lines.
        #[arg(long)]
        save_predictions: Option<PathBuf>,
    },
    /// Run every phase end to end and print the comparison table.
    Recipe {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long)]
    min_rows: Option<usize>,
    #[arg(long)]
    max_rows: Option<usize>,
    #[arg(long)]
    min_cols: Option<usize>,
    #[arg(long)]
    max_cols: Option<usize>,
    #[arg(long)]
    span_prob: Option<f64>,
    #[arg(long)]
    max_span: Option<u8>,
    #[arg(long)]
    header_rows: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    header_shading: Option<bool>,
    #[arg(long)]
    content_bars: Option<bool>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SynthArgs {
    fn apply(&self, base: &SynthConfig) -> SynthConfig {
        let mut c = base.clone();
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(min_rows, max_rows, min_cols, max_cols, span_prob, max_span, header_rows, height, width, header_shading, content_bars, val_fraction, seed);
        c
    }
}

#[derive(Deserialize)]
struct Line {
    id: String,
    tokens: Vec<String>,
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<(String, TokenSeq)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(line).map_err(|e| tsr_core::Error::MalformedRecord { line: i + 1, reason: e.to_string() })?;
        out.push((l.id, TokenSeq::from_strings(&l.tokens)));
    }
    Ok(out)
}

fn score_files(pred: &Path, gt: &Path) -> anyhow::Result<TedsReport> {
    let preds: std::collections::HashMap<String, TokenSeq> = read_lines(pred)?.into_iter().collect();
    let pairs = read_lines(gt)?
        .into_iter()
        .map(|(id, g)| {
            let p = preds.get(&id).cloned().unwrap_or_else(|| TokenSeq::unframed(vec![]));
            EvalPair::new(id, p, g)
        })
        .collect::<Vec<_>>();
    Ok(evaluate_corpus(&pairs)?)
}

fn print_report(name: &str, report: &TedsReport) -> anyhow::Result<()> {
    let summary = json!({
        "samples": report.samples.len(),
        "teds_simple": report.mean_simple,
        "teds_complex": report.mean_complex,
        "teds_all": report.mean_all,
    });
    eprint!("{}", format_table(&[(name, report)]));
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None if cli.full_size => RunConfig::full_size(),
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&cli.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig, out: &Option<PathBuf>, phase: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| cfg.output_root().join(cfg.artifact_name(phase)))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let start = std::time::Instant::now();
    let mut log = |line: &str| eprintln!("[{:>7.1}s] {line}", start.elapsed().as_secs_f64());
    match &cli.command {
        Command::Vocab => {
            let v: Vec<_> = vocab().iter().map(|(id, s)| json!({ "id": id.0, "token": s })).collect();
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
        Command::Tokenize { html } => {
            let html = match html {
                Some(h) => h.clone(),
                None => {
                    let mut s = String::new();
                    io::stdin().read_to_string(&mut s)?;
                    s.trim().to_string()
                }
            };
            let seq = tokenize(&html);
            println!("{}", json!({ "tokens": seq.to_strings(), "unknown": seq.count_unknown() }));
        }
        Command::Teds { pred, gt } => print_report("Predictions", &score_files(pred, gt)?)?,
        Command::Synth(args) => {
            let cfg = load_config(&cli)?;
            let synth = args.apply(&cfg.synth);
            let summary = pipeline::synth_phase(&args.out, args.n, &synth)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::TrainVqvae { data, out } => {
            let cfg = load_config(&cli)?;
            let out = out_dir(&cfg, out, "vqvae");
            let a = pipeline::vqvae_phase(&cfg, data, &out, &mut log)?;
            let loss = a.history.last().map(|e| e.loss);
            println!("{}", json!({ "checkpoint": out, "final_loss": loss }));
        }
        Command::Pretrain { data, vqvae, out } => {
            let cfg = load_config(&cli)?;
            let out = out_dir(&cfg, out, "mim");
            let a = pipeline::pretrain_phase(&cfg, data, vqvae, &out, &mut log)?;
            println!("{}", json!({ "checkpoint": out, "summary": a.summary }));
        }
        Command::Finetune { data, init, schedule, out } => {
            let cfg = load_config(&cli)?;
            let phase = match init {
                InitSpec::Scratch => format!("tsr-scratch-{schedule:?}"),
                InitSpec::Mim(_) => format!("tsr-mim-{schedule:?}"),
            }
            .to_lowercase();
            let out = out_dir(&cfg, out, &phase);
            let s = pipeline::finetune_phase(&cfg, data, init, *schedule, &out, &mut log)?;
            fs::write(out.join("summary.json"), serde_json::to_string_pretty(&s)?)?;
            println!(
                "{}",
                json!({
                    "checkpoint": out,
                    "history": s.history,
                    "encoder_hash_before": s.encoder_hash_before,
                    "encoder_hash_after": s.encoder_hash_after,
                })
            );
        }
        Command::Evaluate { model, data, pred, gt, save_predictions } => match (model, data, pred, gt) {
            (Some(m), Some(d), None, None) => {
                let cfg = load_config(&cli)?;
                let (report, preds) = pipeline::evaluate_checkpoint(m, d, cfg.eval.max_samples)?;
                if let Some(p) = save_predictions {
                    let mut f = fs::File::create(p)?;
                    for (id, seq) in &preds {
                        writeln!(f, "{}", json!({ "id": id, "tokens": seq.to_strings() }))?;
                    }
                }
                print_report("Model", &report)?;
            }
            (None, None, Some(p), Some(g)) => print_report("Predictions", &score_files(p, g)?)?,
            _ => bail!(tsr_core::Error::Config("evaluate needs --model with --data, or --pred with --gt".into())),
        },
        Command::Recipe { out } => {
            let cfg = load_config(&cli)?;
            let layout = RecipeLayout { root: out.clone().unwrap_or_else(|| RecipeLayout::new(&cfg).root) };
            let metrics = pipeline::recipe(&cfg, &layout, &mut log)?;
            print!("{}", metrics.table());
            println!(
                "{}",
                json!({
                    "metrics": layout.metrics(),
                    "ssp_gain": metrics.ssp_gain(),
                    "schedule_gap": metrics.schedule_gap(),
                    "heldout_mim_accuracy": metrics.heldout_mim_accuracy(),
                })
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<tsr_core::Error>().map_or("error", tsr_core::Error::kind);
            let report = json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
