use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use panoscrub::dataset::{
    is_sequence_dir, load_sequence, read_gray, read_image, read_mask, sequence_dirs, write_gray, write_image, write_mask,
    write_sequence,
};
use panoscrub::eval::{mean_iou, MetricReport};
use panoscrub::features::{BankConfig, FeatureBank};
use panoscrub::inpaint::{load_model, make_dataset, SilhouettePool, TrainConfig, Trainer};
use panoscrub::moving::{block_sweep, ScoreMask};
use panoscrub::pipeline::{
    detect, fill_with_mask, ids_under, interior_frames, removal_reprojections, run_sequence, DetectConfig,
    PipelineReport,
};
use panoscrub::raster::{to_byte, Plane};
use panoscrub::sequence::Sequence;
use panoscrub::synth::{suite, SuiteConfig};
use panoscrub::{Error, ErrorKind, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "panoscrub", version, about = "Find and remove moving objects in panorama sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic street sequences.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write N sequences into `scene_<i>` subdirectories.
        #[arg(long)]
        suite: Option<usize>,
    },
    /// Score frame K and classify its instances.
    Detect {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        t: usize,
        #[arg(long, default_value_t = 0.7, allow_negative_numbers = true)]
        tau: f64,
        #[arg(long, default_value_t = 0.2, allow_negative_numbers = true)]
        epsilon: f64,
        #[arg(long, default_value_t = 4)]
        block: usize,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy per encoder block and threshold over a suite.
    SweepBlocks {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill the holes of frame K.
    Inpaint {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Checkpoint directory, or any file inside one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the inpainting GAN.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted images with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect, composite and evaluate every interior frame.
    Pipeline {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Composite,
    Gan,
}

const BANK_SEED: u64 = 0;
const SWEEP_TAUS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::Internal => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("panoscrub: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { seed, out, suite } => synth(seed, &out, suite),
        Command::Detect {
            seq,
            t,
            tau,
            epsilon,
            block,
            bank,
            out,
        } => {
            let config = DetectConfig { tau, epsilon, block };
            detect_cmd(&seq, t, &config, bank.as_deref(), &out)
        }
        Command::SweepBlocks { suite, out } => sweep(&suite, &out),
        Command::Inpaint {
            seq,
            t,
            mask,
            method,
            checkpoint,
            out,
        } => inpaint(&seq, t, &mask, method, checkpoint.as_deref(), &out),
        Command::Train { data, config, out } => train(&data, &config, &out),
        Command::Eval { pred, gt, out } => eval(&pred, &gt, &out),
        Command::Pipeline { seq, out } => pipeline(&seq, &out),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn synth(seed: u64, out: &Path, count: Option<usize>) -> Result<()> {
    let config = SuiteConfig {
        count: count.unwrap_or(1),
        ..SuiteConfig::standard(seed)
    };
    if config.count == 0 {
        return Err(Error::config("--suite needs at least one sequence"));
    }
    let scenes = suite(&config)?;
    for (i, scene) in scenes.iter().enumerate() {
        let dir = match count {
            Some(_) => out.join(format!("scene_{i:03}")),
            None => out.to_path_buf(),
        };
        write_sequence(&scene.sequence, &dir)?;
        write_json(&dir.join("scene.json"), &scene.spec)?;
    }
    Ok(())
}

/// A sequence directory, or every sequence directory under a suite root.
fn sequences_at(path: &Path) -> Result<Vec<(String, Sequence)>> {
    if is_sequence_dir(path)? {
        let name = path.file_name().map_or("sequence".into(), |n| n.to_string_lossy().into_owned());
        return Ok(vec![(name, load_sequence(path)?)]);
    }
    let dirs = sequence_dirs(path)?;
    if dirs.is_empty() {
        return Err(Error::format(format!("no sequences under {}", path.display())));
    }
    dirs.iter()
        .map(|d| Ok((d.file_name().unwrap().to_string_lossy().into_owned(), load_sequence(d)?)))
        .collect()
}

fn bank(path: Option<&Path>) -> Result<FeatureBank> {
    match path {
        Some(p) => FeatureBank::load(p),
        None => FeatureBank::seeded(&BankConfig::desk(BANK_SEED)),
    }
}

fn score_image(score: &ScoreMask) -> Plane<u8> {
    score.full.map(|&v| to_byte(v))
}

fn detect_cmd(seq_dir: &Path, t: usize, config: &DetectConfig, bank_path: Option<&Path>, out: &Path) -> Result<()> {
    if !(config.epsilon > 0.0) {
        return Err(Error::config("--epsilon must be positive"));
    }
    let seq = load_sequence(seq_dir)?;
    let bank = bank(bank_path)?;
    let d = detect(&seq, t, &bank, config)?;
    fs::create_dir_all(out)?;
    write_gray(&out.join("score.pgm"), &score_image(&d.score))?;
    write_mask(&out.join("holes.pgm"), &d.holes)?;
    write_json(&out.join("verdicts.json"), &d.verdicts)?;
    let moving = d.verdicts.iter().filter(|v| v.is_moving).count();
    eprintln!("frame {t}: {moving} of {} instances moving", d.verdicts.len());
    Ok(())
}

#[derive(Serialize)]
struct SweepReport {
    taus: Vec<f64>,
    blocks: Vec<usize>,
    scenes: usize,
    rows: Vec<panoscrub::moving::SweepRow>,
}

fn sweep(suite_dir: &Path, out: &Path) -> Result<()> {
    let seqs = sequences_at(suite_dir)?;
    let bank = bank(None)?;
    let scenes: Vec<(&Sequence, usize)> = seqs
        .iter()
        .flat_map(|(_, s)| interior_frames(s).into_iter().map(move |t| (s, t)))
        .collect();
    let blocks: Vec<usize> = (1..=bank.num_blocks()).collect();
    let rows = block_sweep(&scenes, &bank, &SWEEP_TAUS, &blocks, DetectConfig::default().epsilon)?;
    for r in rows.iter().filter(|r| r.tau == DetectConfig::default().tau) {
        eprintln!("block {} (1/{}): {}/{} = {:.3}", r.block, r.stride, r.correct, r.total, r.accuracy);
    }
    write_json(
        out,
        &SweepReport {
            taus: SWEEP_TAUS.to_vec(),
            blocks,
            scenes: scenes.len(),
            rows,
        },
    )
}

fn inpaint(seq_dir: &Path, t: usize, mask_path: &Path, method: Method, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let seq = load_sequence(seq_dir)?;
    let holes = read_mask(mask_path)?;
    let view = seq.view(t)?;
    if !view.rgb.same_dims(&holes) {
        return Err(Error::dimension("mask size differs from the frame"));
    }
    let epsilon = DetectConfig::default().epsilon;
    fs::create_dir_all(out)?;
    let rgb = match method {
        Method::Composite => {
            let (rgb, residual) = fill_with_mask(&seq, t, &holes, epsilon)?;
            write_mask(&out.join("residual.pgm"), &residual)?;
            rgb
        }
        Method::Gan => {
            let dir = checkpoint.ok_or_else(|| Error::config("--method gan needs --checkpoint"))?;
            let dir = if dir.is_file() { dir.parent().unwrap_or(Path::new(".")) } else { dir };
            let model = load_model(dir)?;
            let removed = ids_under(&seq, t, &holes)?;
            let reps: Vec<_> = removal_reprojections(&seq, t, &holes, &removed, epsilon)?
                .into_iter()
                .map(|r| r.rgb)
                .collect();
            model.inpaint(&view.rgb.with_holes(&holes)?, &holes, &reps)?
        }
    };
    write_image(&out.join("inpainted.ppm"), &rgb)?;
    write_mask(&out.join("holes.pgm"), &holes)
}

fn train(data_dir: &Path, config_path: &Path, out: &Path) -> Result<()> {
    let config: TrainConfig = serde_json::from_slice(&fs::read(config_path)?)
        .map_err(|e| Error::config(format!("{}: {e}", config_path.display())))?;
    config.validate()?;
    let seqs: Vec<Sequence> = sequences_at(data_dir)?.into_iter().map(|(_, s)| s).collect();
    let pool = SilhouettePool::from_sequences(&seqs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let data = make_dataset(&seqs, config.num_samples, config.tile, &pool, config.epsilon, &mut rng)?;
    let mut trainer = Trainer::new(config)?;
    for epoch in 0..trainer.config.epochs {
        trainer.epoch(&data, Some(out))?;
        if let Some(s) = trainer.history.last() {
            eprintln!(
                "epoch {}: step {} critic {:.4} adversarial {:.4} l1 {:.5}",
                epoch + 1,
                s.step,
                s.critic_loss,
                s.gen_adversarial,
                s.discounted_l1
            );
        }
    }
    trainer.save(out)
}

#[derive(Serialize)]
struct ImageRecord {
    name: String,
    #[serde(flatten)]
    metrics: MetricReport,
}

#[derive(Serialize)]
struct LabelRecord {
    name: String,
    mean_iou: f64,
}

#[derive(Serialize)]
struct EvalReport {
    images: Vec<ImageRecord>,
    labels: Vec<LabelRecord>,
    mean_psnr_db: Option<f64>,
    mean_psnr_holes_db: Option<f64>,
    mean_l1_percent: Option<f64>,
    mean_iou: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn files_with(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().map(|e| e.to_string_lossy().to_lowercase());
        if path.is_file() && ext.is_some_and(|e| exts.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Images pair up by file name, falling back to the clean render of a frame
/// directory. A `holes.pgm` in `pred` selects the hole region; every other
/// `.pgm` present in both directories is a label map.
fn eval(pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let holes_path = pred.join("holes.pgm");
    let holes = if holes_path.is_file() { Some(read_mask(&holes_path)?) } else { None };
    let mut images = Vec::new();
    for p in files_with(pred, &["ppm", "png"])? {
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        let Some(g) = [name.as_str(), "clean.ppm", "clean.png"].iter().map(|n| gt.join(n)).find(|g| g.is_file()) else {
            continue;
        };
        let metrics = MetricReport::compare(&read_image(&p)?, &read_image(&g)?, holes.as_ref())?;
        images.push(ImageRecord { name, metrics });
    }
    let mut labels = Vec::new();
    for p in files_with(pred, &["pgm"])? {
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        let g = gt.join(&name);
        if name == "holes.pgm" || !g.is_file() {
            continue;
        }
        let (a, b) = (read_gray(&p)?, read_gray(&g)?);
        let mut classes: Vec<u8> = b.data().iter().copied().filter(|&c| c != 0).collect();
        classes.sort_unstable();
        classes.dedup();
        labels.push(LabelRecord {
            name,
            mean_iou: mean_iou(&a, &b, &classes)?,
        });
    }
    if images.is_empty() && labels.is_empty() {
        return Err(Error::format(format!(
            "no file in {} has a counterpart in {}",
            pred.display(),
            gt.display()
        )));
    }
    let report = EvalReport {
        mean_psnr_db: mean(images.iter().map(|r| r.metrics.psnr_db)),
        mean_psnr_holes_db: mean(images.iter().filter_map(|r| r.metrics.psnr_holes_db)),
        mean_l1_percent: mean(images.iter().map(|r| r.metrics.l1_percent)),
        mean_iou: mean(labels.iter().map(|r| r.mean_iou)),
        images,
        labels,
    };
    write_json(out, &report)
}

fn pipeline(seq_path: &Path, out: &Path) -> Result<()> {
    let config = DetectConfig::default();
    let bank = bank(None)?;
    let mut reports = Vec::new();
    for (name, seq) in sequences_at(seq_path)? {
        let (report, outputs) = run_sequence(&name, &seq, &bank, &config)?;
        for o in &outputs {
            let dir = out.join(&name).join(format!("frame_{}", o.report.frame));
            fs::create_dir_all(&dir)?;
            write_image(&dir.join("inpainted.ppm"), &o.fill.rgb)?;
            write_mask(&dir.join("holes.pgm"), &o.detection.holes)?;
            write_gray(&dir.join("score.pgm"), &score_image(&o.detection.score))?;
            write_json(&dir.join("verdicts.json"), &o.detection.verdicts)?;
        }
        reports.push(report);
    }
    let report = PipelineReport::new(config, reports);
    let s = &report.summary;
    eprintln!(
        "{} frames, {} composited, {} beat the black-hole baseline",
        s.frames, s.composited_frames, s.frames_beating_baseline
    );
    write_json(&out.join("report.json"), &report)
}
