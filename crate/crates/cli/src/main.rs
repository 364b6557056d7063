use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dmm_core::config::RunConfig;
use dmm_core::infer::DEFAULT_EPSILON;
use dmm_core::metrics::{ged_squared, mode_stats, WeightedMaskSet};
use dmm_core::synthdata::{gen_shapes, gen_twomode, load_dataset, save_dataset};
use dmm_core::train::{TelemetryWriter, TrainData, Trainer};
use dmm_core::{predict, Checkpoint, Image, Mask, TrainConfig};

#[derive(Parser)]
#[command(name = "dmm", version, about = "Train and query dynamic multi-valued mapping models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Shapes,
    Twomode,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Small-scale defaults for 32×32 inputs.
    Desk,
    /// Full-scale hyperparameters (256 codes, 1e-4 schedule).
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a run configuration file.
    Train {
        config: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Base hyperparameters that the config file overrides.
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        /// Minimize the log of the reconstruction loss.
        #[arg(long)]
        log_recon: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f32,
    },
    /// Predict every output for one input image (binary PGM).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f32,
        /// Rescale surviving probabilities to sum to one.
        #[arg(long)]
        renormalize: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    let result = match cli.command {
        Command::GenData {
            task,
            n,
            size,
            seed,
            out,
        } => gen_data(task, n, size, seed, &out),
        Command::Train {
            config,
            resume,
            preset,
            log_recon,
        } => train(&config, resume.as_deref(), preset, log_recon),
        Command::Eval {
            checkpoint,
            dataset,
            out,
            epsilon,
        } => eval(&checkpoint, &dataset, &out, epsilon),
        Command::Predict {
            checkpoint,
            input,
            out,
            epsilon,
            renormalize,
        } => predict_cmd(&checkpoint, &input, &out, epsilon, renormalize),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("DMM_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("DMM_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("cannot configure the thread pool")
}

fn gen_data(task: TaskArg, n: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    let ds = match task {
        TaskArg::Shapes => gen_shapes(n, size, seed)?,
        TaskArg::Twomode => gen_twomode(n, size, seed)?,
    };
    save_dataset(&ds, out)?;
    println!(
        "wrote {} entries ({} pairs, {}x{}) to {}",
        ds.len(),
        ds.pair_count(),
        size,
        size,
        out.display()
    );
    Ok(())
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_{epoch:05}.dmmc"))
}

fn train(config_path: &Path, resume: Option<&Path>, preset: Preset, log_recon: bool) -> Result<()> {
    let base = match preset {
        Preset::Desk => TrainConfig::default(),
        Preset::Paper => TrainConfig::paper_preset(),
    };
    let mut run = RunConfig::load(config_path, base)?;
    run.train.log_recon |= log_recon;
    if !run.dataset.exists() {
        bail!("dataset {} does not exist", run.dataset.display());
    }
    let ds = load_dataset(&run.dataset).with_context(|| format!("reading {}", run.dataset.display()))?;
    if !run.explicit_image_size {
        run.train.dims.height = ds.height();
        run.train.dims.width = ds.width();
    }

    fs::create_dir_all(&run.output_dir).with_context(|| format!("creating {}", run.output_dir.display()))?;
    let (mut trainer, mut telemetry) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
            let telemetry = TelemetryWriter::append(run.output_dir.join("telemetry.csv"))?;
            (Trainer::from_checkpoint(ckpt), telemetry)
        }
        None => (Trainer::new(run.train.clone())?, TelemetryWriter::create(run.output_dir.join("telemetry.csv"))?),
    };
    let dims = &trainer.config().dims;
    if (dims.height, dims.width) != (ds.height(), ds.width()) {
        bail!(
            "model expects {}x{} inputs but the dataset is {}x{}",
            dims.height,
            dims.width,
            ds.height(),
            ds.width()
        );
    }

    let data = TrainData::new(&ds)?;
    let every = run.checkpoint_every;
    let out_dir = run.output_dir.clone();
    trainer.run(&data, |t, row| {
        telemetry.write(row)?;
        println!(
            "epoch {:>4}  loss {:.5}  recon {:.5}  ce {:.4}  active codes {}",
            row.epoch, row.total, row.recon, row.ce, row.active_code_count
        );
        if every > 0 && t.epoch() % every == 0 && !t.is_finished() {
            t.checkpoint().save(checkpoint_path(&out_dir, row.epoch))?;
        }
        Ok(())
    })?;
    let final_path = out_dir.join("final.dmmc");
    trainer.checkpoint().save(&final_path)?;
    println!("wrote {}", final_path.display());
    Ok(())
}

fn eval(checkpoint: &Path, dataset: &Path, out: &Path, epsilon: f32) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let ds = load_dataset(dataset).with_context(|| format!("reading {}", dataset.display()))?;
    if ds.is_empty() {
        bail!("dataset {} has no entries", dataset.display());
    }
    let dims = ckpt.model.dims();
    if (dims.height, dims.width) != (ds.height(), ds.width()) {
        bail!(
            "checkpoint expects {}x{} inputs but the dataset is {}x{}",
            dims.height,
            dims.width,
            ds.height(),
            ds.width()
        );
    }

    let modes = ds.entries().iter().map(|e| e.labels.len()).max().unwrap_or(0);
    let mut csv = String::from("entry,n_x,ged_squared");
    for k in 0..modes {
        csv.push_str(&format!(",mode_{k}"));
    }
    csv.push('\n');

    let mut matched = Vec::with_capacity(ds.len());
    let mut geds = Vec::with_capacity(ds.len());
    for (i, e) in ds.entries().iter().enumerate() {
        let prediction = predict(&ckpt.model, &e.input, epsilon)?;
        let binary: Vec<(Mask, f64)> = prediction
            .renormalized()
            .binarized(0.5)
            .into_iter()
            .map(|(m, p)| (m, p as f64))
            .collect();
        let labels = WeightedMaskSet::uniform(e.labels.clone())?;
        let preds = WeightedMaskSet::new(
            binary.iter().map(|(m, _)| m.clone()).collect(),
            binary.iter().map(|(_, p)| *p).collect(),
        )?;
        let ged = ged_squared(&labels, &preds)?;
        geds.push(ged);
        let raw: Vec<(Mask, f64)> = prediction
            .binarized(0.5)
            .into_iter()
            .map(|(m, p)| (m, p as f64))
            .collect();
        let per_mode = mode_stats(&[(raw.clone(), e.labels.clone())])?.per_entry.remove(0);
        csv.push_str(&format!("{i},{},{ged}", prediction.n_x()));
        for k in 0..modes {
            csv.push_str(&format!(",{}", per_mode.get(k).copied().unwrap_or(0.0)));
        }
        csv.push('\n');
        matched.push((raw, e.labels.clone()));
    }
    fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;

    let n = geds.len() as f64;
    let mean = geds.iter().sum::<f64>() / n;
    let std = (geds.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n).sqrt();
    println!("entries {}  GED^2 mean {mean:.4} std {std:.4}", ds.len());
    if ds.entries().iter().all(|e| e.labels.len() == modes) {
        let stats = mode_stats(&matched)?;
        for k in 0..modes {
            println!("mode {k}: probability mean {:.4} std {:.4}", stats.mean[k], stats.std[k]);
        }
        println!("mean matched IoU {:.4}", stats.mean_matched_iou);
    }
    Ok(())
}

fn predict_cmd(checkpoint: &Path, input: &Path, out: &Path, epsilon: f32, renormalize: bool) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let image = Image::load_pgm(input).with_context(|| format!("reading {}", input.display()))?;
    let mut prediction = predict(&ckpt.model, &image, epsilon)?;
    if renormalize {
        prediction = prediction.renormalized();
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut listing = String::from("rank,code,probability\n");
    for (rank, item) in prediction.items.iter().enumerate() {
        let name = format!("pred_{rank}_p{:.6}.pgm", item.probability);
        item.mask.save_pgm(out.join(&name))?;
        listing.push_str(&format!("{rank},{},{}\n", item.code, item.probability));
    }
    let sidecar = out.join("predictions.txt");
    fs::File::create(&sidecar)
        .and_then(|mut f| f.write_all(listing.as_bytes()))
        .with_context(|| format!("writing {}", sidecar.display()))?;
    println!("{} outputs written to {}", prediction.n_x(), out.display());
    for item in &prediction.items {
        println!("  code {:>3}  p = {:.6}", item.code, item.probability);
    }
    Ok(())
}
