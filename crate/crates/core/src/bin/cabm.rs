use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cabm::checkpoint::Checkpoint;
use cabm::config::RunConfig;
use cabm::lut::{self, build_lut_detailed, Beta, LutParams, Strategy};
use cabm::pipeline::{run_sr_with, BitSource, EvalSummary};
use cabm::recipe::{self, evaluate_held_out, held_out, HeldOut};
use cabm::selector::SelectorBank;
use cabm::train::{self, DifficultyLevels, SubnetSampling};
use cabm::{image_io, metrics, BitConfig, EdgeToBitLut, Supernet};

#[derive(Parser)]
#[command(name = "cabm", version, about = "Content-aware mixed-precision super-resolution toolkit")]
struct Cli {
    /// RNG seed; overrides the config file.
    #[arg(long, global = true, env = cabm::SEED_ENV)]
    seed: Option<u64>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Warm up and jointly train the supernet and selectors.
    Train(TrainArgs),
    /// Write the selectors' per-patch choices as a records CSV.
    Collect(CollectArgs),
    /// Build a lookup table from a records CSV.
    BuildLut(BuildLutArgs),
    /// Fine-tune network weights under a lookup table.
    Finetune(FinetuneArgs),
    /// Super-resolve one image.
    Infer(InferArgs),
    /// Compare two images, or print a quality/cost table.
    Eval(EvalArgs),
    /// Run the ablation studies.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output checkpoint (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also train the fixed-width baseline and save it here.
    #[arg(long)]
    baseline_out: Option<PathBuf>,
}

#[derive(Args)]
struct CollectArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Records CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildLutArgs {
    /// Records CSV (`edge,bitops,b1,...,bL`).
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "S1")]
    strategy: Strategy,
    /// Expansion in edge-score precision steps.
    #[arg(long, default_value_t = 10)]
    de: u32,
    /// Expansion threshold index, or `auto`.
    #[arg(long, default_value = "auto")]
    beta: Beta,
    #[arg(long, default_value_t = cabm::edge::DEFAULT_PRECISION)]
    precision: f64,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    lut: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Low-resolution input image (PNG or PPM/PGM).
    #[arg(long)]
    input: PathBuf,
    /// Super-resolved output image.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    lut: Option<PathBuf>,
    /// `lut`, `selectors`, `fp` or `fixed=<b1,...,bL>`.
    #[arg(long, default_value = "lut")]
    mode: String,
    /// High-resolution reference for PSNR/SSIM.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Summary CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Per-patch CSV.
    #[arg(long)]
    patch_csv: Option<PathBuf>,
    #[arg(long, default_value_t = cabm::pipeline::DEFAULT_PATCH)]
    patch: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Image to score against `--reference`.
    #[arg(long, requires = "reference")]
    image: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Evaluate this checkpoint instead of training from scratch.
    #[arg(long, conflicts_with = "image")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    lut: Option<PathBuf>,
    /// Number of held-out synthetic images.
    #[arg(long, default_value_t = 12)]
    images: usize,
    /// Output CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// `de`, `strategy`, `finetune`, `sampling` or `all`.
    #[arg(long, default_value = "all")]
    study: String,
    #[arg(long, default_value_t = 12)]
    images: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(arg: &ConfigArg, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match &arg.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn selectors_of(ck: &Checkpoint) -> Result<&SelectorBank> {
    ck.selectors
        .as_ref()
        .context("checkpoint has no selectors; run `cabm train` first")
}

fn held_out_for(cfg: &RunConfig, count: usize) -> Result<Vec<HeldOut>> {
    Ok(held_out(
        count,
        cfg.data.hr_size,
        cfg.model.scale,
        cfg.seed.wrapping_add(1000),
    )?)
}

const TABLE_HEADER: &str = "method,psnr,ssim,fab,bitops\n";

fn table_row(out: &mut String, name: &str, s: &EvalSummary) {
    let _ = writeln!(out, "{name},{:.4},{:.4},{:.4},{:.6e}", s.psnr, s.ssim, s.fab, s.bitops);
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let data = cfg.dataset()?;
    let (mut net, pre_log) = recipe::pretrain(&cfg, &data)?;
    if let Some(p) = &a.baseline_out {
        let mut base = net.clone();
        let mut sched = cfg.pretrain.to_schedule(cfg.seed.wrapping_add(1))?;
        sched.epochs = cfg.train.epochs + cfg.finetune.epochs;
        train::train_fixed(&mut base, &data, &sched, &recipe::top_config(&net))?;
        Checkpoint::new(base, None).save(p)?;
    }
    let mut bank = SelectorBank::for_net(&net, cfg.precision, cfg.seed.wrapping_add(2))?;
    let log = train::train_supernet(&mut net, &mut bank, &data, &cfg.train.to_schedule(cfg.seed.wrapping_add(1))?)?;
    if let Some(p) = &a.log {
        let mut csv = String::from("phase,");
        let pre = pre_log.to_csv();
        let mut lines = pre.lines();
        csv.push_str(lines.next().unwrap_or_default());
        csv.push('\n');
        for l in lines {
            let _ = writeln!(csv, "pretrain,{l}");
        }
        for l in log.to_csv().lines().skip(1) {
            let _ = writeln!(csv, "supernet,{l}");
        }
        std::fs::write(p, csv)?;
    }
    let last = log.epoch_mean(log.epochs().saturating_sub(1)).unwrap_or(f64::NAN);
    println!("trained {} patches; final epoch loss {last:.5}", data.len());
    Checkpoint::new(net, Some(bank)).save(&a.out)?;
    Ok(())
}

fn cmd_collect(a: CollectArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = cfg.dataset()?;
    let records = lut::collect_records(&ck.net, selectors_of(&ck)?, &data.lr)?;
    std::fs::write(&a.out, lut::records_to_csv(&records))?;
    println!("{} records", records.len());
    Ok(())
}

fn cmd_build_lut(a: BuildLutArgs, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(&a.records).with_context(|| format!("reading {}", a.records.display()))?;
    let records = lut::records_from_csv(&text, a.precision)?;
    let params = LutParams {
        strategy: a.strategy,
        precision: a.precision,
        de: a.de,
        beta: a.beta,
        seed: seed.unwrap_or(cabm::DEFAULT_SEED),
    };
    let built = build_lut_detailed(&records, &params)?;
    let filled = built.selections.iter().filter(|s| s.candidates == 0).count();
    built.lut.save(&a.out)?;
    println!(
        "R={} beta={} filled={} mean entry FAB={:.3}",
        built.lut.num_subintervals(),
        built.lut.beta(),
        filled,
        cabm::bitops::mean_fab(built.lut.entries())
    );
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let mut ck = Checkpoint::load(&a.checkpoint)?;
    let table = EdgeToBitLut::load(&a.lut)?;
    let data = cfg.dataset()?;
    let log = train::finetune_cabm(&mut ck.net, &table, &data, &cfg.finetune.to_schedule(cfg.seed.wrapping_add(3))?)?;
    if let Some(p) = &a.log {
        std::fs::write(p, log.to_csv())?;
    }
    ck.save(&a.out)?;
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let image = image_io::load_rgb(&a.input)?;
    let reference = a.reference.as_ref().map(image_io::load_rgb).transpose()?;
    let table = a.lut.as_ref().map(EdgeToBitLut::load).transpose()?;
    let fixed;
    let source = match a.mode.as_str() {
        "lut" => BitSource::Lut(table.as_ref().context("--mode lut needs --lut")?),
        "selectors" => BitSource::Selectors(selectors_of(&ck)?),
        "fp" => BitSource::FullPrecision,
        m => match m.strip_prefix("fixed=") {
            Some(bits) => {
                fixed = bits.parse::<BitConfig>()?;
                BitSource::Fixed(&fixed)
            }
            None => bail!("unknown mode {m:?}; expected lut, selectors, fp or fixed=<bits>"),
        },
    };
    let (sr, result) = run_sr_with(&image, &ck.net, source, reference.as_ref(), a.patch)?;
    image_io::save(&sr, &a.output)?;
    if let Some(p) = &a.csv {
        std::fs::write(p, result.summary_csv())?;
    }
    if let Some(p) = &a.patch_csv {
        std::fs::write(p, result.patches_csv())?;
    }
    print!("{}", result.summary_csv());
    Ok(())
}

fn cmd_eval(a: EvalArgs, seed: Option<u64>) -> Result<()> {
    if let (Some(img), Some(reference)) = (&a.image, &a.reference) {
        let x = image_io::load_rgb(img)?;
        let y = image_io::load_rgb(reference)?;
        let text = format!(
            "image,reference,psnr,ssim\n{},{},{:.4},{:.6}\n",
            img.display(),
            reference.display(),
            metrics::psnr(&x, &y, 1.0)?,
            metrics::ssim(&x, &y, 1.0)?
        );
        return write_or_print(a.out.as_deref(), &text);
    }
    let cfg = load_config(&a.config, seed)?;
    let images = held_out_for(&cfg, a.images)?;
    let patch = cfg.data.lr_patch;
    let mut out = String::from(TABLE_HEADER);
    if let Some(p) = &a.checkpoint {
        let ck = Checkpoint::load(p)?;
        let top = recipe::top_config(&ck.net);
        let fp = evaluate_held_out(&images, &ck.net, BitSource::FullPrecision, patch)?;
        table_row(&mut out, "full-precision", &fp.summary);
        let fixed = evaluate_held_out(&images, &ck.net, BitSource::Fixed(&top), patch)?;
        table_row(&mut out, &format!("fixed-{}", top.bits()[0]), &fixed.summary);
        if let Some(bank) = &ck.selectors {
            let sel = evaluate_held_out(&images, &ck.net, BitSource::Selectors(bank), patch)?;
            table_row(&mut out, "selectors", &sel.summary);
        }
        if let Some(l) = &a.lut {
            let table = EdgeToBitLut::load(l)?;
            let r = evaluate_held_out(&images, &ck.net, BitSource::Lut(&table), patch)?;
            table_row(&mut out, "cabm", &r.summary);
        }
        return write_or_print(a.out.as_deref(), &out);
    }
    let art = recipe::run(&cfg)?;
    let top = recipe::top_config(&art.baseline);
    let rows: [(&str, &Supernet, BitSource); 4] = [
        ("fixed", &art.baseline, BitSource::Fixed(&top)),
        ("selectors", &art.supernet, BitSource::Selectors(&art.selectors)),
        ("cabm-no-finetune", &art.supernet, BitSource::Lut(&art.lut)),
        ("cabm", &art.finetuned, BitSource::Lut(&art.lut)),
    ];
    for (name, net, src) in rows {
        let r = evaluate_held_out(&images, net, src, patch)?;
        table_row(&mut out, name, &r.summary);
    }
    write_or_print(a.out.as_deref(), &out)
}

fn cmd_ablate(a: AblateArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let studies: Vec<&str> = match a.study.as_str() {
        "all" => vec!["de", "strategy", "finetune", "sampling"],
        s @ ("de" | "strategy" | "finetune" | "sampling") => vec![s],
        other => bail!("unknown study {other:?}"),
    };
    let images = held_out_for(&cfg, a.images)?;
    let patch = cfg.data.lr_patch;
    let art = recipe::run(&cfg)?;
    let base = cfg.lut_params()?;
    let mut out = String::from("study,setting,psnr,ssim,fab,bitops\n");
    let mut row = |study: &str, setting: &str, s: &EvalSummary| {
        let _ = writeln!(
            out,
            "{study},{setting},{:.4},{:.4},{:.4},{:.6e}",
            s.psnr, s.ssim, s.fab, s.bitops
        );
    };
    for study in studies {
        match study {
            "de" => {
                for de in [0, 10, 20, 30, 40, 80] {
                    let t = lut::build_lut(&art.records, &LutParams { de, ..base })?;
                    let r = evaluate_held_out(&images, &art.supernet, BitSource::Lut(&t), patch)?;
                    row("de", &de.to_string(), &r.summary);
                }
            }
            "strategy" => {
                for strategy in [Strategy::S1, Strategy::S2, Strategy::S3] {
                    let t = lut::build_lut(&art.records, &LutParams { strategy, ..base })?;
                    let r = evaluate_held_out(&images, &art.supernet, BitSource::Lut(&t), patch)?;
                    row("strategy", &strategy.to_string(), &r.summary);
                }
            }
            "finetune" => {
                let before = evaluate_held_out(&images, &art.supernet, BitSource::Lut(&art.lut), patch)?;
                row("finetune", "without", &before.summary);
                let after = evaluate_held_out(&images, &art.finetuned, BitSource::Lut(&art.lut), patch)?;
                row("finetune", "with", &after.summary);
            }
            "sampling" => {
                let data = cfg.dataset()?;
                let (warm, _) = recipe::pretrain(&cfg, &data)?;
                let levels = DifficultyLevels::for_net(&warm, patch, patch)?;
                let mut sched = cfg.train.to_schedule(cfg.seed.wrapping_add(4))?;
                sched.lambda = 0.0;
                for (name, sampling) in [("uniform", SubnetSampling::Uniform), ("bitops", SubnetSampling::BitOps)] {
                    let mut net = warm.clone();
                    train::train_with_sampling(&mut net, &data, &levels, sampling, &sched)?;
                    let r = evaluate_held_out(&images, &net, BitSource::Lut(&art.lut), patch)?;
                    row("sampling", name, &r.summary);
                }
            }
            _ => unreachable!(),
        }
    }
    write_or_print(a.out.as_deref(), &out)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();
    let seed = cli.seed;
    match cli.command {
        Command::Train(a) => cmd_train(a, seed),
        Command::Collect(a) => cmd_collect(a, seed),
        Command::BuildLut(a) => cmd_build_lut(a, seed),
        Command::Finetune(a) => cmd_finetune(a, seed),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a, seed),
        Command::Ablate(a) => cmd_ablate(a, seed),
    }
}
