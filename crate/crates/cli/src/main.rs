use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use canvasinfill::checkpoint::Archive;
use canvasinfill::config::TrainConfig;
use canvasinfill::data::ingest_dataset;
use canvasinfill::evaluation::{evaluate, GeneratorInpainter};
use canvasinfill::generator::inpaint;
use canvasinfill::image::{Image, Mask};
use canvasinfill::losses::FeatureExtractor;
use canvasinfill::mask::{MaskKind, MaskMode, MaskSampler};
use canvasinfill::training::{run_joint, run_pretrain, JointRun, PRETRAIN_FILE};
use canvasinfill::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

/// Free-form image inpainting: mask generation, two-stage training,
/// inference and evaluation.
///
/// Config keys can be overridden with CANVASINFILL_<KEY> environment
/// variables (for example CANVASINFILL_SEED=3).
#[derive(Parser, Debug)]
#[command(name = "canvasinfill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write seeded hole masks as 8-bit PNGs (255 = hole).
    MakeMasks {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        count: usize,
        /// HxW, e.g. 64x64.
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pretraining of the encoder.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Joint generator/critic training.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Pretraining checkpoint (required when use_contrastive_init = true).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from a joint-training checkpoint.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
    },
    /// Fill the holes of one image.
    Inpaint {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep the network output at known pixels too.
        #[arg(long)]
        no_composite: bool,
    },
    /// Report L1, PSNR, SSIM and FID over an image folder.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = MasksArg::Both)]
        masks: MasksArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Rect,
    Irregular,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MasksArg {
    Rect,
    Irregular,
    Both,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let dim = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| format!("bad dimension `{v}`"));
    Ok((dim(h)?, dim(w)?))
}

/// Writes to stdout and a log file.
struct Tee {
    file: File,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stdout().write_all(buf)?;
        self.file.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stdout().flush()?;
        self.file.flush()
    }
}

fn tee(dir: &Path, name: &str) -> Result<Tee> {
    let io_err = |source| Error::Io { path: dir.to_path_buf(), source };
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let path = dir.join(name);
    let file = File::create(&path).map_err(|source| Error::Io { path, source })?;
    Ok(Tee { file })
}

fn data_dir(cfg: &TrainConfig) -> Result<&Path> {
    cfg.data_dir.as_deref().ok_or_else(|| Error::Config("data_dir must be set for training".into()))
}

fn run_config(archive: &Archive, path: &Path) -> Result<TrainConfig> {
    TrainConfig::from_toml_with_env(archive.require_meta(path, "config")?, [])
}

fn make_masks(kind: KindArg, count: usize, (h, w): (usize, usize), seed: u64, out: &Path) -> Result<()> {
    let kind = match kind {
        KindArg::Rect => MaskKind::Rectangular,
        KindArg::Irregular => MaskKind::Irregular,
    };
    std::fs::create_dir_all(out).map_err(|source| Error::Io { path: out.to_path_buf(), source })?;
    let sampler = MaskSampler::for_size(MaskMode::Mixed, h, w);
    for i in 0..count {
        let mask = sampler.spec(kind, seed.wrapping_add(i as u64)).generate(h, w)?;
        mask.save_png(&out.join(format!("mask_{i:05}.png")))?;
    }
    Ok(())
}

fn pretrain(config: &Path) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let data = ingest_dataset(data_dir(&cfg)?, cfg.image_size, cfg.val_fraction)?;
    let mut log = tee(&cfg.out_dir, "pretrain.log")?;
    let (_, path) = run_pretrain(&cfg, &data.train, &mut log)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn train(config: &Path, init: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let data = ingest_dataset(data_dir(&cfg)?, cfg.image_size, cfg.val_fraction)?;
    let run = match (resume, init) {
        (Some(p), _) => JointRun::resume(&cfg, &Archive::load(p)?, p)?,
        (None, Some(p)) => JointRun::new(&cfg, Some(&Archive::load(p)?))?,
        (None, None) => {
            let default = cfg.out_dir.join(PRETRAIN_FILE);
            if cfg.use_contrastive_init && default.exists() {
                log::info!("using {}", default.display());
                JointRun::new(&cfg, Some(&Archive::load(&default)?))?
            } else {
                JointRun::new(&cfg, None)?
            }
        }
    };
    let mut log = tee(&cfg.out_dir, "train.log")?;
    let (_, path) = run_joint(&cfg, &data.train, Some(&data.val), run, &mut log, |_, _| std::ops::ControlFlow::Continue(()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn inpaint_one(image: &Path, mask: &Path, ckpt: &Path, out: &Path, no_composite: bool) -> Result<()> {
    let archive = Archive::load(ckpt)?;
    let cfg = run_config(&archive, ckpt)?;
    let params = archive.tensors.subset("gen/");
    let image = Image::load_png(image)?;
    let mask = Mask::load_png(mask)?;
    let result = inpaint(&params, &cfg.generator(), &image, &mask, !no_composite)?;
    result.save_png(out)
}

fn evaluate_dir(ckpt: &Path, data: &Path, masks: MasksArg, seed: u64, out: &Path) -> Result<()> {
    let archive = Archive::load(ckpt)?;
    let cfg = run_config(&archive, ckpt)?;
    let params = archive.tensors.subset("gen/");
    let images = ingest_dataset(data, cfg.image_size, 0.0)?.train.all()?;
    let kinds = match masks {
        MasksArg::Rect => vec![MaskKind::Rectangular],
        MasksArg::Irregular => vec![MaskKind::Irregular],
        MasksArg::Both => vec![MaskKind::Rectangular, MaskKind::Irregular],
    };
    let gen_cfg = cfg.generator();
    let inpainter = GeneratorInpainter { params: &params, cfg: &gen_cfg, composite: cfg.composite };
    let phi = FeatureExtractor::load(&cfg.extractor, cfg.extractor_seed, cfg.extractor_path.as_deref())?;
    let report = evaluate(&inpainter, &images, &kinds, seed, &phi, cfg.to_toml())?;
    report.save(out)?;
    print!("{}", report.table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeMasks { kind, count, size, seed, out } => make_masks(kind, count, size, seed, &out),
        Command::Pretrain { config } => pretrain(&config),
        Command::Train { config, init, resume } => train(&config, init.as_deref(), resume.as_deref()),
        Command::Inpaint { image, mask, ckpt, out, no_composite } => inpaint_one(&image, &mask, &ckpt, &out, no_composite),
        Command::Evaluate { ckpt, data, masks, seed, out } => evaluate_dir(&ckpt, &data, masks, seed, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
