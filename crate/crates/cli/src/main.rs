use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tracklet_fusion::config::RunConfig;
use tracklet_fusion::data::{export_manifest, generate, load_manifest, split, Dataset, Split};
use tracklet_fusion::eval::Report;
use tracklet_fusion::experiment::{embed_split, eval_frames, evaluate_records, evaluate_split, run_ablation, AblationProgress};
use tracklet_fusion::gradcheck::run_gradcheck;
use tracklet_fusion::model::Model;
use tracklet_fusion::semantic_fusion::{forward_pipeline, write_embeddings, Variant};
use tracklet_fusion::temporal_attention::{write_attention_dump, AttentionRecord};
use tracklet_fusion::tensor::{load_checkpoint, save_checkpoint};
use tracklet_fusion::training::{fine_tune, warm_up, LogRecord, Phase, TrainHooks};

const THREADS_VAR: &str = "TRACKLET_FUSION_THREADS";

#[derive(Parser)]
#[command(name = "tracklet-fusion", version, about = "Multi-stage temporal fusion for tracklet embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PNG frames + manifest.tsv).
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm up and fine-tune one variant; writes checkpoints and metrics.jsonl.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Embed the test split with a checkpoint and print retrieval metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        /// Directory for the embedding dump.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the fusion and attention variant grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump per-stage frame weights and branch weights for one tracklet.
    InspectAttention {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tracklet id, e.g. `id0003_t01`.
        #[arg(long)]
        tracklet: String,
        #[arg(long)]
        variant: Option<Variant>,
        /// Directory for attention.jsonl; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op and all pipeline parameters.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Run config (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory holding manifest.tsv (or the manifest itself);
    /// synthetic data from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

impl DataArg {
    fn load(&self, cfg: &RunConfig) -> Result<Dataset> {
        match &self.data {
            Some(path) => {
                let manifest = if path.is_dir() { path.join("manifest.tsv") } else { path.clone() };
                Ok(load_manifest(&manifest, cfg.backbone.input_shape())?)
            }
            None => Ok(generate(&cfg.data.synthetic, cfg.seed)?),
        }
    }
}

fn test_split(dataset: &Dataset, cfg: &RunConfig) -> Result<Split> {
    Ok(split(dataset, cfg.data.train_fraction, cfg.seed)?)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let params = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Model::from_params(cfg.model_config(), params)?)
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("{THREADS_VAR} must be a positive integer, got `{value}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// Streams metrics records and evaluates on the test split every
/// `eval_every` epochs and after the last one.
struct MetricsLog<'a> {
    out: BufWriter<File>,
    split: &'a Split,
    cfg: &'a RunConfig,
    variant: Variant,
    error: Option<std::io::Error>,
}

impl TrainHooks for MetricsLog<'_> {
    fn on_step(&mut self, record: &LogRecord) {
        let line = serde_json::to_string(record).expect("record serializes");
        if let Err(e) = writeln!(self.out, "{line}") {
            self.error.get_or_insert(e);
        }
    }

    fn on_epoch_end(&mut self, model: &Model, phase: Phase, epoch: usize) -> Option<(f64, f64)> {
        let (every, last) = match phase {
            Phase::Warmup => (self.cfg.train.eval_every, self.cfg.train.warmup_epochs),
            Phase::EndToEnd => (self.cfg.train.eval_every, self.cfg.train.epochs),
        };
        if every == 0 || ((epoch + 1) % every != 0 && epoch + 1 != last) {
            return None;
        }
        let variant = match phase {
            Phase::Warmup => Variant::FEATURE_AVERAGE,
            Phase::EndToEnd => self.variant,
        };
        match evaluate_split(self.split, model, variant, self.cfg) {
            Ok(r) => Some((r.map, r.rank(1).unwrap_or(f64::NAN))),
            Err(e) => {
                log::debug!("epoch {epoch}: evaluation skipped: {e}");
                None
            }
        }
    }
}

fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dataset = generate(&cfg.data.synthetic, cfg.seed)?;
    let manifest = export_manifest(&dataset, out)?;
    cfg.echo(out)?;
    println!("wrote {} tracklets to {}", dataset.len(), manifest.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, dataset: &Dataset, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    cfg.echo(out)?;
    let sp = test_split(dataset, cfg)?;
    if sp.train.is_empty() {
        bail!("no training identities (train_fraction {})", cfg.data.train_fraction);
    }
    let variant = cfg.fusion.variant;
    let mut model = Model::init(cfg.model_config(), cfg.seed)?;
    let mut log = MetricsLog {
        out: BufWriter::new(File::create(out.join("metrics.jsonl"))?),
        split: &sp,
        cfg,
        variant,
        error: None,
    };
    let warm = warm_up(&sp.train, &mut model, &cfg.train, cfg.seed, &mut log)?;
    save_checkpoint(&model.params, &out.join("warmup.ckpt"))?;
    let e2e = fine_tune(&sp.train, &mut model, variant, &cfg.train, cfg.seed, &mut log)?;
    save_checkpoint(&model.params, &out.join("model.ckpt"))?;
    log.out.flush()?;
    if let Some(e) = log.error {
        return Err(e).context("writing metrics.jsonl");
    }
    let last = |s: &[f64]| s.last().map_or("-".to_string(), |l| format!("{l:.4}"));
    println!(
        "variant {variant}: warm-up {} steps (final loss {}), end-to-end {} steps (final loss {})",
        warm.step,
        last(&warm.epoch_losses),
        e2e.step,
        last(&e2e.epoch_losses)
    );
    println!("checkpoint {}", out.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, dataset: &Dataset, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let model = load_model(cfg, checkpoint)?;
    let sp = test_split(dataset, cfg)?;
    let records = embed_split(&sp, &model, cfg.fusion.variant, cfg.data.eval_frames)?;
    let report = evaluate_records(&records, cfg.eval.metric, &cfg.eval.ranks)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_embeddings(BufWriter::new(File::create(dir.join("embeddings.tsv"))?), &records)?;
        fs::write(dir.join("report.txt"), report.key_values())?;
    }
    print_report(cfg.fusion.variant, &report);
    Ok(())
}

fn print_report(variant: Variant, report: &Report) {
    println!("variant {variant}");
    print!("{}", report.table());
    print!("{}", report.key_values());
}

struct Progress;

impl AblationProgress for Progress {
    fn on_result(&mut self, split: usize, variant: Variant, report: &Report) {
        eprintln!("split {split} {variant}: mAP {:.2}", 100.0 * report.map);
    }
}

fn cmd_ablate(cfg: &RunConfig, dataset: &Dataset, out: Option<&Path>) -> Result<()> {
    let report = run_ablation(dataset, cfg, &mut Progress)?;
    let table = report.table();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        cfg.echo(dir)?;
        fs::write(dir.join("ablation.txt"), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_inspect(cfg: &RunConfig, dataset: &Dataset, checkpoint: &Path, tracklet: &str, out: Option<&Path>) -> Result<()> {
    let model = load_model(cfg, checkpoint)?;
    let t = dataset
        .tracklets
        .iter()
        .find(|t| t.id == tracklet)
        .ok_or_else(|| anyhow!("no tracklet `{tracklet}` in the dataset"))?;
    let frames = eval_frames(t, cfg.data.eval_frames)?;
    let output = forward_pipeline(&frames, &model, cfg.fusion.variant)?;
    let mut records: Vec<AttentionRecord> = output.attention.iter().map(|a| AttentionRecord::frame(tracklet, a)).collect();
    if let Some(u) = &output.u {
        records.push(AttentionRecord::Semantic {
            tracklet_id: tracklet.to_string(),
            u: u.data().to_vec(),
        });
    }
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("attention.jsonl");
            write_attention_dump(BufWriter::new(File::create(&path)?), &records)?;
            let fmt = |x: &[f64]| x.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ");
            for a in &output.attention {
                println!("stage {} â: {}", a.stage, fmt(a.normalized.data()));
            }
            if let Some(u) = &output.u {
                println!("u: {}", fmt(u.data()));
            }
            println!("wrote {}", path.display());
        }
        None => write_attention_dump(std::io::stdout().lock(), &records)?,
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let report = run_gradcheck(cfg, cfg.seed)?;
    print!("{}", report.table());
    if !report.passed() {
        bail!("gradient check failed: max relative error {:.3e}", report.max_rel_err());
    }
    Ok(())
}

fn with_variant(mut cfg: RunConfig, variant: Option<Variant>) -> RunConfig {
    if let Some(v) = variant {
        cfg.fusion.variant = v;
    }
    cfg
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Generate { common, out } => cmd_generate(&common.load()?, &out),
        Command::Train {
            common,
            data,
            out,
            variant,
        } => {
            let cfg = with_variant(common.load()?, variant);
            cmd_train(&cfg, &data.load(&cfg)?, &out)
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            variant,
            out,
        } => {
            let cfg = with_variant(common.load()?, variant);
            cmd_eval(&cfg, &data.load(&cfg)?, &checkpoint, out.as_deref())
        }
        Command::Ablate { common, data, out } => {
            let cfg = common.load()?;
            cmd_ablate(&cfg, &data.load(&cfg)?, out.as_deref())
        }
        Command::InspectAttention {
            common,
            data,
            checkpoint,
            tracklet,
            variant,
            out,
        } => {
            let cfg = with_variant(common.load()?, variant);
            cmd_inspect(&cfg, &data.load(&cfg)?, &checkpoint, &tracklet, out.as_deref())
        }
        Command::Gradcheck { common } => cmd_gradcheck(&common.load()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
