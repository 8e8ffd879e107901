use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand};
use serde_json::json;

use pbe_core::checkpoint::Checkpoint;
use pbe_core::config::RunConfig;
use pbe_core::data::{
    load_dataset, load_sample, load_split, read_ids, read_pgm, resize_nearest, synth_generate, write_dataset,
    write_pgm, Sample,
};
use pbe_core::gradcheck::{self, TOLERANCE};
use pbe_core::metrics::aggregate;
use pbe_core::ops::resample::upsample_bilinear_forward;
use pbe_core::pbe::count_params_flops;
use pbe_core::train::{evaluate_samples, predict, train, Progress};
use pbe_core::Tensor;

#[derive(Parser)]
#[command(name = "pbe", version, about = "Boundary-guided lesion segmentation on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a model and write checkpoints plus history.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Print per-sample and aggregate metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
    },
    /// Segment one PGM image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Writes `<prefix>stage1.pgm` … `<prefix>stage4.pgm`, coarsest first.
        #[arg(long)]
        boundary_out: Option<String>,
    },
    /// Finite-difference check of every operation and module.
    Gradcheck,
    /// Parameter count and forward FLOPs for one image.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    All,
    Train,
    Val,
}

fn usage_error(msg: &str) -> ! {
    Cli::command()
        .error(clap::error::ErrorKind::MissingRequiredArgument, msg)
        .exit()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let samples = synth_generate(&cfg.synth)?;
    write_dataset(out, &samples, cfg.synth.train_fraction, cfg.synth.seed)?;
    eprintln!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn run_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let tc = &cfg.train;
    let (train_set, val_set) = load_split(data, tc.image_size, cfg.synth.train_fraction, tc.seed)?;
    eprintln!(
        "{} train / {} val samples, config {}",
        train_set.len(),
        val_set.len(),
        cfg.digest_hex()
    );
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.json"), cfg.to_json()).context("writing config.json")?;
    let max_iter = tc.max_iter(train_set.len());
    let report = train(cfg, &train_set, &val_set, Some(out), |p| match p {
        Progress::Step(h) if h.iter % 10 == 0 => {
            eprintln!("iter {}/{} loss {:.5} lr {:.3e}", h.iter, max_iter, h.loss, h.lr)
        }
        Progress::Eval(e) => eprintln!(
            "eval at {}: dice {:.4} iou {:.4} hd95 {:.2}",
            e.iter, e.report.dice, e.report.iou, e.report.hd95
        ),
        _ => {}
    })?;
    let summary = json!({
        "iterations": report.iterations,
        "final_loss": report.history.last().map(|h| h.loss),
        "best": report.best,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, split: Split) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let net = ck.network()?;
    let size = ck.config.train.image_size;
    let samples: Vec<Sample> = match split {
        Split::All => load_dataset(data, size)?,
        Split::Train | Split::Val => {
            let name = if matches!(split, Split::Train) {
                "train.txt"
            } else {
                "val.txt"
            };
            let ids = read_ids(&data.join(name))?;
            ids.iter()
                .map(|id| load_sample(data, id, size))
                .collect::<pbe_core::Result<_>>()?
        }
    };
    if samples.is_empty() {
        bail!("no samples found in {}", data.display());
    }
    let mut params = ck.params.clone();
    let reports = evaluate_samples(&net, &mut params, &samples, ck.config.train.batch_size)?;
    let out = json!({
        "checkpoint": checkpoint,
        "config_digest": ck.config.digest_hex(),
        "samples": reports,
        "aggregate": aggregate(&reports),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn resize_plane(t: &Tensor<f32>, out_h: usize, out_w: usize, nearest: bool) -> Result<Tensor<f32>> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let data = if (h, w) == (out_h, out_w) {
        t.data().to_vec()
    } else if nearest {
        resize_nearest(t.data(), h, w, out_h, out_w)
    } else {
        upsample_bilinear_forward(t.data(), [1, 1, h, w], out_h, out_w)
    };
    Ok(Tensor::from_vec(&[1, 1, out_h, out_w], data)?)
}

fn run_predict(checkpoint: &Path, image: &Path, out: &Path, boundary_out: Option<&str>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let net = ck.network()?;
    if boundary_out.is_some() && !ck.config.model.enable_bd {
        bail!("--boundary-out needs a model with boundary detection enabled");
    }
    let img = read_pgm(image)?;
    let (h, w) = (img.shape()[2], img.shape()[3]);
    let size = ck.config.train.image_size;
    let input = resize_plane(&img, size, size, false)?;
    let mut params = ck.params.clone();
    let (prob, maps) = predict(&net, &mut params, input)?;
    let binary = prob.map(|p| if p >= 0.5 { 1.0 } else { 0.0 });
    write_pgm(out, &resize_plane(&binary, h, w, true)?)?;
    if let Some(prefix) = boundary_out {
        for (k, m) in maps.iter().enumerate() {
            write_pgm(Path::new(&format!("{prefix}stage{}.pgm", k + 1)), m)?;
        }
    }
    Ok(())
}

fn run_gradcheck() -> Result<bool> {
    let reports = gradcheck::suite()?;
    let mut ok = true;
    for r in &reports {
        let pass = r.passed();
        ok &= pass;
        println!(
            "{:<32} max_rel_err {:.3e}  probes {:>4}  skipped {:>3}  {}",
            r.name,
            r.max_rel_error,
            r.checked,
            r.skipped,
            if pass { "ok" } else { "FAIL" }
        );
    }
    println!(
        "{} checks, tolerance {TOLERANCE:e}: {}",
        reports.len(),
        if ok { "all passed" } else { "FAILED" }
    );
    Ok(ok)
}

fn flops(cfg: &RunConfig, size: usize) -> Result<()> {
    let (params, flops) = count_params_flops(&cfg.model, size, size)?;
    let out = json!({ "param_count": params, "flops": flops, "input": [1, cfg.model.in_channels, size, size] });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth {
            config,
            out,
            seed,
            count,
            size,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            if let Some(c) = count {
                cfg.synth.count = c;
            }
            if let Some(s) = size {
                cfg.synth.size = s;
            }
            cfg.validate()?;
            let out = out
                .or(cfg.paths.out_dir.clone())
                .unwrap_or_else(|| usage_error("synth needs --out DIR"));
            synth(&cfg, &out)?;
        }
        Command::Train {
            config,
            data,
            out,
            epochs,
            lr,
            seed,
            batch_size,
            image_size,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(l) = lr {
                cfg.train.lr0 = l;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(s) = image_size {
                cfg.train.image_size = s;
            }
            cfg.validate()?;
            let data = data
                .or(cfg.paths.data_dir.clone())
                .unwrap_or_else(|| usage_error("train needs --data DIR"));
            let out = out
                .or(cfg.paths.out_dir.clone())
                .unwrap_or_else(|| usage_error("train needs --out DIR"));
            run_train(&cfg, &data, &out)?;
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => eval(&checkpoint, &data, split)?,
        Command::Predict {
            checkpoint,
            image,
            out,
            boundary_out,
        } => run_predict(&checkpoint, &image, &out, boundary_out.as_deref())?,
        Command::Gradcheck => return run_gradcheck(),
        Command::Flops { config, size } => {
            let cfg = load_config(config.as_deref())?;
            flops(&cfg, size.unwrap_or(cfg.train.image_size))?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
