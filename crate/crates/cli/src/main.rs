use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use freqcodec::codec::{decode_container, encode_image, Container, EncodeStats, ImageBuffer, MAGIC};
use freqcodec::config::{parse_pairs, ModelConfig};
use freqcodec::metrics::complexity::{count_params_macs, describe_attention, describe_decoder, describe_encoder};
use freqcodec::metrics::{ms_ssim, msssim_db, psd_bands, psnr, split_bit_allocation};
use freqcodec::model::Codec;
use freqcodec::split::{Split, SplitMask};
use freqcodec::training::{reports_to_csv, train, Dataset, Metric, RdReport, TrainConfig, TrainHooks};
use freqcodec::Error;

#[derive(Parser)]
#[command(name = "freqcodec", version, about = "Learned image codec with scalable frequency splits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Trained checkpoint; without one a freshly initialized model is used.
    #[arg(short = 'm', long)]
    checkpoint: Option<PathBuf>,
    /// key=value file with model (and training) settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for an untrained model.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a PPM/PNG image.
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Comma-separated subset of low,mid,high.
        #[arg(long, default_value = "low,mid,high")]
        splits: String,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Reconstruct an image from a compressed file.
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Splits to reconstruct; defaults to all stored ones.
        #[arg(long)]
        splits: Option<String>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Rate-distortion training.
    Train {
        /// Image directory, or `synthetic` for generated textures.
        data: String,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Use the single-core desk schedule.
        #[arg(long)]
        desk: bool,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Per-image bpp, PSNR and MS-SSIM over a directory, as CSV.
    Eval {
        dir: PathBuf,
        #[arg(long, default_value = "low,mid,high")]
        splits: String,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Frequency band energy of an image and, for compressed files, the
    /// per-split bit allocation.
    Analyze {
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        bands: usize,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Parameter and MAC counts.
    Count {
        /// Only the attention module.
        #[arg(long)]
        attention: bool,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        reduction: usize,
        /// Input height for the attention count, or image height otherwise.
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        /// Network description file to count instead.
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_model(args: &ModelArgs) -> Result<Codec, Error> {
    let cfg = args.config.as_deref().map(ModelConfig::load).transpose()?;
    match (&args.checkpoint, cfg) {
        (Some(path), Some(cfg)) => Codec::load_expecting(path, &cfg),
        (Some(path), None) => Codec::load(path),
        (None, cfg) => Codec::new(cfg.unwrap_or_default(), args.seed),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(Error::from),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no .ppm or .png images in {}", dir.display())));
    }
    Ok(paths)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Encode { input, out, splits, model } => {
            let codec = load_model(&model)?;
            let mask = SplitMask::parse(&splits)?;
            let img = ImageBuffer::load(&input)?;
            let c = encode_image(&codec, &img, mask, true)?;
            std::fs::write(&out, c.to_bytes()?)?;
            let s = EncodeStats::of(&c);
            println!("{} bytes, {:.4} bpp, splits {}", s.bytes, s.bpp, mask);
        }
        Command::Decode { input, out, splits, model } => {
            let codec = load_model(&model)?;
            let c = Container::from_bytes(&std::fs::read(&input)?)?;
            let request = splits.as_deref().map(SplitMask::parse).transpose()?;
            let img = decode_container(&codec, &c, request, true)?;
            img.save(&out)?;
            println!("{}x{} image, splits {}", img.width(), img.height(), request.unwrap_or(c.mask));
        }
        Command::Train { data, out, lambda, metric, iterations, desk, model } => {
            let text = model.config.as_deref().map(std::fs::read_to_string).transpose()?.unwrap_or_default();
            let pairs = parse_pairs(&text)?;
            let base = if desk { TrainConfig::desk() } else { TrainConfig::default() };
            let mut cfg = TrainConfig::from_pairs(&pairs, TrainConfig { seed: model.seed, ..base })?;
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            if let Some(m) = metric {
                cfg.metric = Metric::parse(&m)?;
            }
            if let Some(n) = iterations {
                cfg.max_iterations = n;
            }
            cfg.validate()?;
            let dataset = if data == "synthetic" {
                Dataset::synthetic(16, 4, cfg.crop, cfg.seed)
            } else {
                Dataset::from_dir(Path::new(&data), 5)?
            };
            let mut codec = match &model.checkpoint {
                Some(p) => Codec::load(p)?,
                None => Codec::new(ModelConfig::from_pairs(&pairs)?, cfg.seed)?,
            };
            println!("{}", RdReport::CSV_HEADER);
            let hooks = TrainHooks {
                checkpoint: Some(out.clone()),
                on_report: Some(Box::new(|r: &RdReport| println!("{}", r.csv_row()))),
            };
            let outcome = train(&mut codec, &dataset, &cfg, hooks)?;
            codec.save(&out)?;
            std::fs::write(out.with_extension("csv"), reports_to_csv(&outcome.reports))?;
        }
        Command::Eval { dir, splits, out, model } => {
            let codec = load_model(&model)?;
            let mask = SplitMask::parse(&splits)?;
            let mut csv = String::from("image,bpp,psnr,msssim_db\n");
            let (mut sb, mut sp, mut sm) = (0.0, 0.0, 0.0);
            let paths = images_in(&dir)?;
            for p in &paths {
                let img = ImageBuffer::load(p)?;
                let c = encode_image(&codec, &img, SplitMask::FULL, true)?;
                let rec = decode_container(&codec, &c, Some(mask), true)?;
                let (bpp, q, m) = (c.bpp(), psnr(&img, &rec)?, msssim_db(ms_ssim(&img, &rec)?));
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let _ = writeln!(csv, "{name},{bpp:.6},{q:.4},{m:.4}");
                sb += bpp;
                sp += q;
                sm += m;
            }
            let n = paths.len() as f64;
            let _ = writeln!(csv, "mean,{:.6},{:.4},{:.4}", sb / n, sp / n, sm / n);
            emit(out.as_deref(), &csv)?;
        }
        Command::Analyze { input, bands, out } => {
            let bytes = std::fs::read(&input)?;
            let text = if bytes.starts_with(MAGIC) {
                let c = Container::from_bytes(&bytes)?;
                let a = split_bit_allocation(&c)?;
                let mut s = String::from("split,bytes,proportion\n");
                for sp in [Split::Low, Split::Mid, Split::High] {
                    let _ = writeln!(s, "{sp},{},{:.9}", c.split_payload_bytes(sp), a[sp]);
                }
                s
            } else {
                let img = ImageBuffer::load(&input)?;
                let r = psd_bands(&img, bands)?;
                format!("{}# dc_energy={:.6e} non_dc_energy={:.6e}\n", r.to_csv(), r.dc_energy, r.non_dc_energy)
            };
            emit(out.as_deref(), &text)?;
        }
        Command::Count { attention, channels, reduction, height, width, network, config } => {
            if let Some(path) = network {
                let c = count_params_macs(&std::fs::read_to_string(path)?)?;
                for l in &c.layers {
                    println!("{:<10} {:>14} params {:>16} macs  -> {:?}", l.kind, l.params, l.macs, l.output);
                }
                println!("total {} params {} macs", c.params, c.macs);
            } else if attention {
                let (h, w) = (height.unwrap_or(16), width.unwrap_or(16));
                let c = count_params_macs(&describe_attention(channels, reduction, h, w))?;
                println!("attention C={channels} r={reduction} [1,{channels},{h},{w}]: {} params, {} macs", c.params, c.macs);
            } else {
                let cfg = config.as_deref().map(ModelConfig::load).transpose()?.unwrap_or_default();
                let (h, w) = (height.unwrap_or(512), width.unwrap_or(768));
                println!("split,part,params,macs");
                for s in [Split::Low, Split::Mid, Split::High] {
                    let e = count_params_macs(&describe_encoder(&cfg, s, h, w))?;
                    let d = count_params_macs(&describe_decoder(&cfg, s, h, w))?;
                    println!("{s},encoder,{},{}", e.params, e.macs);
                    println!("{s},decoder,{},{}", d.params, d.macs);
                }
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ModelMismatch(_) => 4,
        Error::InvalidArgument(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
