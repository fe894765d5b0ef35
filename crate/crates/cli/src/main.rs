use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use comeir::checkpoint;
use comeir::config::{Ablations, Variant};
use comeir::engram::{EngramSpec, MemoryKind};
use comeir::harness::io;
use comeir::harness::latency::{self, LatencyOptions};
use comeir::harness::scaling::{self, INTER_GRID, INTRA_GRID};
use comeir::harness::{eval_limit, quantize, run_training, Dataset, QuantizerKind, RunConfig};
use comeir::quantizer::QuantizedCatalog;
use comeir::trainer::{evaluate, popularity_metrics, LOG_HEADER};

#[derive(Parser)]
#[command(name = "comeir", version, about = "Semantic-ID generative recommendation with hashed n-gram memory")]
struct Cli {
    /// Seed for data generation, quantization, initialization and batching.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, global = true, value_enum)]
    quantizer: Option<QuantizerArg>,
    /// Comma-separated ablation flags, e.g. no-enc-inter,linear-merge.
    #[arg(long, global = true, value_parser = parse_ablations)]
    ablate: Option<Ablations>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Normal,
    Nezha,
}

#[derive(Clone, Copy, ValueEnum)]
enum QuantizerArg {
    RqKmeans,
    RqVae,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Intra,
    Inter,
}

fn parse_ablations(s: &str) -> Result<Ablations, String> {
    Ablations::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalog and interaction log.
    Synth(DataDir),
    /// Assign semantic IDs to every item.
    Quantize(DataDir),
    /// Train a model and write a checkpoint plus a training log.
    Train(TrainArgs),
    /// Rank held-out targets with a trained checkpoint.
    Eval(EvalArgs),
    /// Sparse-memory parameter counts over a scale grid.
    ScalingReport(ScalingArgs),
    /// Encoder token counts and decoding time against the flattened baseline.
    Latency(LatencyArgs),
}

#[derive(Args)]
struct DataDir {
    /// Directory holding items.tsv, interactions.tsv, sids.tsv and codebooks.tsv.
    #[arg(long, default_value = "data")]
    data: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    dir: DataDir,
    #[arg(long, default_value = "model.ckpt")]
    checkpoint: PathBuf,
    /// Training log CSV; stdout when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    dir: DataDir,
    #[arg(long, default_value = "model.ckpt")]
    checkpoint: PathBuf,
    /// Per-user CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScalingArgs {
    #[arg(long, value_enum, default_value = "inter")]
    kind: KindArg,
    /// Comma-separated scales; defaults to the standard grid for the kind.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Count tables of the configured model instead of the full-size layout.
    #[arg(long)]
    desk: bool,
    /// Also train at every grid point on --data (desk layout implied).
    #[arg(long)]
    train: bool,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LatencyArgs {
    #[command(flatten)]
    dir: DataDir,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    beam: usize,
    #[arg(long, default_value_t = 20)]
    batches: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::parse(&io::read(p)?).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(v) = cli.variant {
        cfg.model.variant = match v {
            VariantArg::Normal => Variant::Normal,
            VariantArg::Nezha => Variant::Nezha,
        };
    }
    if let Some(q) = cli.quantizer {
        cfg.quantizer = match q {
            QuantizerArg::RqKmeans => QuantizerKind::RqKMeans,
            QuantizerArg::RqVae => QuantizerKind::RqVae,
        };
    }
    if let Some(a) = &cli.ablate {
        cfg.model.ablations = a.clone();
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.synth.validate()?;
    Ok(cfg)
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => io::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let rd = |name: &str| {
        let p = dir.join(name);
        io::read(&p).with_context(|| format!("reading {}", p.display()))
    };
    let items = io::parse_items(&rd("items.tsv")?)?;
    let users = io::parse_interactions(&rd("interactions.tsv")?)?;
    let sids = io::parse_sids(&rd("sids.tsv")?)?;
    let books = io::parse_codebooks(&rd("codebooks.tsv")?)?;
    let size = books.layers.iter().map(Vec::len).max().unwrap_or(0).max(cfg.model.codebook_size);
    Ok(Dataset::from_parts(&items, &users, &sids, &books, size)?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth(a) => {
            let data = cfg.synth.generate()?;
            std::fs::create_dir_all(&a.data)?;
            let users: Vec<(String, Vec<String>)> = data
                .users
                .iter()
                .map(|(u, seq)| (u.clone(), seq.iter().map(|&i| data.items[i].item_id.clone()).collect()))
                .collect();
            io::write(&a.data.join("items.tsv"), &io::format_items(&data.items))?;
            io::write(&a.data.join("interactions.tsv"), &io::format_interactions(&users))?;
            eprintln!("wrote {} items and {} users to {}", data.items.len(), users.len(), a.data.display());
        }
        Command::Quantize(a) => {
            let items = io::parse_items(&io::read(&a.data.join("items.tsv")).context("reading items.tsv")?)?;
            let (books, q): (_, QuantizedCatalog) = quantize(&items, &cfg.quantize_options())?;
            io::write(&a.data.join("sids.tsv"), &io::format_sids(&q))?;
            io::write(&a.data.join("collisions.tsv"), &io::format_collisions(&q))?;
            io::write(&a.data.join("codebooks.tsv"), &io::format_codebooks(&books))?;
            let colliding: usize = q.collisions.iter().map(|(_, ids)| ids.len()).sum();
            eprintln!("{} items, {} distinct sids, {colliding} items share a sid", items.len(), q.sids.len() - colliding + q.collisions.len());
        }
        Command::Train(a) => {
            let ds = load_dataset(&a.dir.data, &cfg)?;
            let mut log = format!("{LOG_HEADER}\n");
            let r = run_training(&ds, &cfg.model, &cfg.train, cfg.seed(), |row| {
                eprintln!("step {} loss {:.4} H@5 {:.4} H@10 {:.4}", row.step, row.loss, row.metrics.hit5, row.metrics.hit10);
                log.push_str(&row.csv());
                log.push('\n');
            })?;
            checkpoint::save(&r.trainer, &a.checkpoint).with_context(|| format!("writing {}", a.checkpoint.display()))?;
            emit(a.log.as_deref(), &log)?;
        }
        Command::Eval(a) => {
            let trainer = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
            let model = &trainer.model;
            let ds = load_dataset(&a.dir.data, &cfg)?;
            if ds.configure(&model.cfg) != model.cfg {
                bail!("checkpoint was trained on data with a different layout");
            }
            let (_, test) = ds.examples(model.cfg.max_history());
            let test = &test[..eval_limit(&trainer.cfg, test.len())];
            let (metrics, ranks) = evaluate(model, &ds.catalog, test, trainer.cfg.beam)?;
            let rows: Vec<_> = test
                .iter()
                .zip(ranks)
                .map(|(ex, r)| (ds.users[ex.user].clone(), ds.catalog.items[ex.target].id.clone(), r))
                .collect();
            let pop = popularity_metrics(&ds.catalog, &ds.train_sequences(), test)?;
            eprintln!("model H@5 {:.4} N@5 {:.4}; popularity H@5 {:.4}", metrics.hit5, metrics.ndcg5, pop.hit5);
            emit(a.out.as_deref(), &io::format_eval(&rows, &metrics))?;
        }
        Command::ScalingReport(a) => {
            let kind = match a.kind {
                KindArg::Intra => MemoryKind::Intra,
                KindArg::Inter => MemoryKind::Inter,
            };
            let grid = a.grid.clone().unwrap_or_else(|| match kind {
                MemoryKind::Intra => INTRA_GRID.to_vec(),
                MemoryKind::Inter => INTER_GRID.to_vec(),
            });
            if grid.is_empty() {
                bail!("scale grid is empty");
            }
            if a.train {
                let ds = load_dataset(&a.data, &cfg)?;
                let mut out = format!("{}\n", scaling::SWEEP_HEADER);
                scaling::sweep(&ds, &cfg.model, &cfg.train, kind, &grid, cfg.seed(), |p| {
                    eprintln!("scale {} params {} H@5 {:.4}", p.scale, p.params_total, p.hit5);
                    out.push_str(&format!("{},{},{},{},{}\n", p.scale, kind.name(), p.params_total, p.hit5, p.seed));
                })?;
                emit(a.out.as_deref(), &out)?;
            } else {
                let rows = if a.desk {
                    scaling::report(&grid, |s| scaling::desk_spec(&cfg.model, kind, s))?
                } else {
                    scaling::report(&grid, |s| EngramSpec::full_size(kind, s))?
                };
                emit(a.out.as_deref(), &scaling::to_csv(&rows))?;
            }
        }
        Command::Latency(a) => {
            let ds = load_dataset(&a.dir.data, &cfg)?;
            let opts = LatencyOptions { batch: a.batch, beam: a.beam, batches: a.batches, warmup: a.warmup };
            let (_, test) = ds.examples(usize::MAX);
            let histories: Vec<Vec<usize>> = test.into_iter().map(|e| e.history).collect();
            let r = latency::measure(&ds.catalog, &ds.code_vectors, &ds.configure(&cfg.model), &histories, &opts)?;
            emit(a.out.as_deref(), &r.to_csv())?;
        }
    }
    Ok(())
}
