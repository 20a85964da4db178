use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use lcnn_core::align::{self, GrayImage, ManifestRecord, NormSpec};
use lcnn_core::bench;
use lcnn_core::eval::{self, EmbeddingSet};
use lcnn_core::model_io::{self, CropPolicy, Preprocessing, SolverState};
use lcnn_core::trainer::{self, Dataset, TrainOptions, TrainSample, TRAIN_IMAGE_SIZE};
use lcnn_core::zoo::{ArchConfig, ArchName, NetworkModel, EMBEDDING_DIM};
use lcnn_core::{Rng, Tensor};

/// File name of the manifest inside a data directory.
const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Parser)]
#[command(name = "lcnn", version, about = "Lightened CNN face representation toolkit")]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for align and extract.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpecName {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    LfwVerify,
    LfwClosed,
    LfwOpen,
    Ytf,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize faces by their five landmarks.
    Align {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        spec: SpecName,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on an aligned data directory.
    Train {
        #[arg(long)]
        arch: ArchName,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Training log (default: `<out>.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write fc1 embeddings for every manifest image.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
    /// Score embeddings with a verification or identification protocol.
    Eval {
        #[arg(long, value_enum)]
        protocol: Protocol,
        #[arg(long)]
        embeddings: PathBuf,
        /// Pair list for lfw-verify and ytf.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Gallery/probe list for lfw-closed and lfw-open.
        #[arg(long)]
        gallery: Option<PathBuf>,
        /// Target false accept rate (default 0.001, or 0.01 for lfw-open).
        #[arg(long)]
        far: Option<f64>,
        /// Frames sampled per video (ytf).
        #[arg(long, default_value_t = 100)]
        frames: usize,
        /// Per-fold results as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Time single-image forward passes on one thread.
    Bench {
        #[arg(long)]
        arch: ArchName,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Histograms of MFM values and gradients.
    MfmStats {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.workers == 0 {
        bail!("--workers must be at least 1");
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build()?;
    match cli.command {
        Command::Align { manifest, spec, out } => pool.install(|| align_cmd(&manifest, spec, &out, cli.workers)),
        Command::Train {
            arch,
            data,
            config,
            out,
            resume,
            log,
        } => train_cmd(arch, &data, &config, &out, resume.as_deref(), log, cli.seed),
        Command::Extract {
            model,
            manifest,
            out,
            batch,
        } => pool.install(|| extract_cmd(&model, &manifest, &out, batch, cli.workers)),
        Command::Eval {
            protocol,
            embeddings,
            pairs,
            gallery,
            far,
            frames,
            csv,
        } => eval_cmd(protocol, &embeddings, pairs, gallery, far, frames, csv, cli.seed.unwrap_or(42)),
        Command::Bench { arch, iters, threads } => bench_cmd(arch, iters, threads, cli.seed.unwrap_or(42)),
        Command::MfmStats {
            model,
            manifest,
            out,
            bins,
            batch,
        } => mfm_stats_cmd(&model, &manifest, &out, bins, batch),
    }
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn align_cmd(manifest: &Path, spec: SpecName, out: &Path, workers: usize) -> Result<()> {
    let norm = match spec {
        SpecName::Train => NormSpec::TRAIN,
        SpecName::Test => NormSpec::TEST,
    };
    println!("command=align");
    println!("spec=size:{} ec_mc_y:{} ec_y:{}", norm.size, norm.ec_mc_y, norm.ec_y);
    println!("workers={workers}");
    let records = align::read_manifest(manifest)?;
    let root = manifest_dir(manifest);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let results: Vec<Option<ManifestRecord>> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let aligned = (|| -> Result<ManifestRecord> {
                let image = align::load_gray(&root.join(&r.path))?;
                let (face, landmarks) = align::normalize_face(&image, &r.landmarks, &norm)?;
                let name = format!("{:06}_{}.png", i, Path::new(&r.path).file_stem().unwrap_or_default().to_string_lossy());
                align::save_gray(&out.join(&name), &face)?;
                Ok(ManifestRecord {
                    path: name,
                    label: r.label,
                    landmarks,
                })
            })();
            match aligned {
                Ok(rec) => Some(rec),
                Err(e) => {
                    log::warn!("skipping {}: {e:#}", r.path);
                    None
                }
            }
        })
        .collect();
    let kept: Vec<ManifestRecord> = results.into_iter().flatten().collect();
    fs::write(out.join(MANIFEST_NAME), align::format_manifest(&kept))?;
    println!("aligned={}", kept.len());
    println!("skipped={}", records.len() - kept.len());
    Ok(())
}

fn load_images(records: &[ManifestRecord], root: &Path) -> Result<Vec<GrayImage>> {
    records
        .par_iter()
        .map(|r| align::load_gray(&root.join(&r.path)).with_context(|| format!("loading {}", r.path)))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    arch: ArchName,
    data: &Path,
    config_path: &Path,
    out: &Path,
    resume: Option<&Path>,
    log_path: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let text = fs::read_to_string(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let (mut solver, overrides) = trainer::parse_config(&text, &config_path.display().to_string())?;
    if let Some(s) = seed {
        solver.seed = s;
    }
    let manifest = data.join(MANIFEST_NAME);
    let records = align::read_manifest(&manifest)?;
    if records.is_empty() {
        bail!("{} lists no images", manifest.display());
    }
    let images = load_images(&records, data)?;
    let dataset = Dataset::new(
        records
            .iter()
            .zip(images)
            .map(|(r, image)| TrainSample { image, label: r.label })
            .collect(),
    );

    let (mut model, prep, start_iter) = match resume {
        Some(path) => {
            let (model, prep, state) = model_io::load_checkpoint(path)?;
            if model.config().arch != arch {
                bail!("checkpoint is network {}, not {arch}", model.config().arch);
            }
            if state.seed != solver.seed {
                log::warn!("using checkpoint seed {} instead of {}", state.seed, solver.seed);
                solver.seed = state.seed;
            }
            (model, prep, state.iteration as usize)
        }
        None => {
            let config = overrides.apply(ArchConfig::new(arch), dataset.num_classes);
            let mut model = NetworkModel::<f32>::from_config(config)?;
            model.init_weights(&mut Rng::new(solver.seed));
            let prep = Preprocessing {
                crop: if solver.augment {
                    CropPolicy::RandomCropMirror {
                        source: TRAIN_IMAGE_SIZE as u32,
                    }
                } else {
                    CropPolicy::None
                },
                ..Preprocessing::default()
            };
            (model, prep, 0)
        }
    };

    println!("command=train");
    println!("arch={arch}");
    println!("seed={}", solver.seed);
    println!("images={}", dataset.samples.len());
    println!("identities={}", dataset.num_classes);
    println!("start_iter={start_iter}");
    print!("{}", trainer::format_config(&solver, &overrides));

    let checkpoint_every = solver.checkpoint_interval;
    let max_iters = solver.max_iters;
    let mut save = |m: &NetworkModel<f32>, state: &SolverState| -> lcnn_core::Result<()> {
        let done = state.iteration as usize == max_iters;
        if checkpoint_every > 0 && !done {
            let mut name = out.as_os_str().to_owned();
            name.push(format!(".iter{}", state.iteration));
            model_io::save_checkpoint(m, &prep, state, Path::new(&name))?;
        }
        if done {
            model_io::save_checkpoint(m, &prep, state, out)?;
        }
        Ok(())
    };
    let log = trainer::train_loop(
        &mut model,
        &dataset,
        &solver,
        TrainOptions {
            start_iter,
            pixel_scale: Some(prep.pixel_scale),
            checkpoint: Some(&mut save),
        },
    )?;
    let log_path = log_path.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".csv");
        p.into()
    });
    fs::write(&log_path, log.to_csv())?;
    if let Some(loss) = log.last_loss() {
        println!("final_loss={loss}");
    }
    if let Some(acc) = log.rows.last().and_then(|r| r.val_accuracy) {
        println!("val_accuracy={acc}");
    }
    println!("model={}", out.display());
    println!("log={}", log_path.display());
    Ok(())
}

fn extract_cmd(model_path: &Path, manifest: &Path, out: &Path, batch: usize, workers: usize) -> Result<()> {
    if batch == 0 {
        bail!("--batch must be at least 1");
    }
    let (model, prep) = model_io::load(model_path)?;
    println!("command=extract");
    println!("arch={}", model.config().arch);
    println!("workers={workers}");
    let records = align::read_manifest(manifest)?;
    let root = manifest_dir(manifest);
    // Fixed batch boundaries keep results independent of the worker count.
    let chunks: Vec<Vec<Vec<f32>>> = records
        .par_chunks(batch)
        .map(|chunk| -> Result<Vec<Vec<f32>>> {
            let inputs = chunk
                .iter()
                .map(|r| {
                    let image = align::load_gray(&root.join(&r.path))?;
                    trainer::eval_input(&image, prep.pixel_scale).with_context(|| r.path.clone())
                })
                .collect::<Result<Vec<Tensor<f32>>>>()?;
            Ok(eval::extract_embeddings(&model, &Tensor::stack(&inputs)?)?)
        })
        .collect::<Result<_>>()?;
    let mut set = EmbeddingSet::new(EMBEDDING_DIM);
    for (r, e) in records.iter().zip(chunks.into_iter().flatten()) {
        set.push(r.path.clone(), &e).with_context(|| format!("embedding of {}", r.path))?;
    }
    set.write(out)?;
    println!("embeddings={}", set.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    protocol: Protocol,
    embeddings: &Path,
    pairs: Option<PathBuf>,
    gallery: Option<PathBuf>,
    far: Option<f64>,
    frames: usize,
    csv: Option<PathBuf>,
    seed: u64,
) -> Result<()> {
    let set = EmbeddingSet::read(embeddings).with_context(|| format!("reading {}", embeddings.display()))?;
    let read_list = |p: Option<PathBuf>, flag: &str| -> Result<(String, String)> {
        let p = p.with_context(|| format!("this protocol needs {flag}"))?;
        Ok((fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?, p.display().to_string()))
    };
    println!("command=eval");
    println!("seed={seed}");
    let mut fold_csv = None;
    match protocol {
        Protocol::LfwVerify => {
            let far = far.unwrap_or(0.001);
            let (text, src) = read_list(pairs, "--pairs")?;
            let (v, roc) = eval::run_pair_verification(&set, &eval::parse_pairs(&text, &src)?, far)?;
            println!("protocol=lfw-verify");
            println!("accuracy={}", v.mean_accuracy);
            println!("far={far}");
            println!("tpr_at_far={}", roc.tpr);
            println!("threshold_at_far={}", roc.threshold);
            fold_csv = Some(v);
        }
        Protocol::Ytf => {
            let (text, src) = read_list(pairs, "--pairs")?;
            let v = eval::run_video_verification(&set, &eval::parse_pairs(&text, &src)?, frames, seed)?;
            println!("protocol=ytf");
            println!("frames={frames}");
            println!("accuracy={}", v.mean_accuracy);
            fold_csv = Some(v);
        }
        Protocol::LfwClosed => {
            let (text, src) = read_list(gallery, "--gallery")?;
            let rank1 = eval::run_closed_set(&set, &eval::parse_gallery(&text, &src)?)?;
            println!("protocol=lfw-closed");
            println!("rank1={rank1}");
        }
        Protocol::LfwOpen => {
            let far = far.unwrap_or(0.01);
            let (text, src) = read_list(gallery, "--gallery")?;
            let r = eval::run_open_set(&set, &eval::parse_gallery(&text, &src)?, far)?;
            println!("protocol=lfw-open");
            println!("far={far}");
            println!("dir={}", r.dir);
            println!("threshold={}", r.threshold);
        }
    }
    if let Some(path) = csv {
        let Some(v) = fold_csv else {
            bail!("--csv is only produced by fold-based protocols");
        };
        let mut s = String::from("fold,threshold,accuracy\n");
        for (i, (t, a)) in v.thresholds.iter().zip(&v.fold_accuracies).enumerate() {
            s.push_str(&format!("{i},{t},{a}\n"));
        }
        fs::write(&path, s)?;
    }
    Ok(())
}

fn bench_cmd(arch: ArchName, iters: usize, threads: usize, seed: u64) -> Result<()> {
    if threads != 1 {
        bail!("bench always runs on one thread (got --threads {threads})");
    }
    let mut model = NetworkModel::<f32>::from_config(ArchConfig::new(arch))?;
    model.init_weights(&mut Rng::new(seed));
    println!("command=bench");
    println!("seed={seed}");
    println!("threads=1");
    print!("{}", bench::run(&model, iters, seed)?.to_text());
    Ok(())
}

fn mfm_stats_cmd(model_path: &Path, manifest: &Path, out: &Path, bins: usize, batch: usize) -> Result<()> {
    let (mut model, prep) = model_io::load(model_path)?;
    println!("command=mfm-stats");
    println!("arch={}", model.config().arch);
    let records = align::read_manifest(manifest)?;
    if records.is_empty() {
        bail!("{} lists no images", manifest.display());
    }
    let root = manifest_dir(manifest);
    let images = load_images(&records, &root)?
        .iter()
        .map(|img| trainer::eval_input(img, prep.pixel_scale))
        .collect::<lcnn_core::Result<Vec<_>>>()?;
    // Identities outside the classifier (e.g. evaluation sets) use the
    // predicted class as the loss target.
    let k = model.num_classes();
    let labels = records
        .iter()
        .zip(&images)
        .map(|(r, img)| {
            if r.label < k {
                return Ok(r.label);
            }
            let logits = model.infer(img)?;
            let row = logits.item(0);
            Ok((0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b }))
        })
        .collect::<lcnn_core::Result<Vec<usize>>>()?;
    let stats = eval::mfm_stats(&mut model, &images, &labels, bins, batch)?;
    fs::write(out, stats.to_csv())?;
    println!("images={}", images.len());
    println!("value_zero_fraction={}", stats.zero_fraction(eval::HistKind::Value));
    println!("gradient_zero_fraction={}", stats.zero_fraction(eval::HistKind::Gradient));
    println!("out={}", out.display());
    Ok(())
}
