use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fundus_core::dataset_io::{
    generate_synthetic, load_dataset, load_split, save_unified, write_dataset, write_manifest, CsvSource, DatasetRecord, RunConfig,
    WorkingSample, IMAGE_DIR, TEST_CSV, TRAIN_CSV,
};
use fundus_core::evaluation::render_overlay;
use fundus_core::imaging::{load_image, save_image};
use fundus_core::pipeline::{self, ImagePrediction, TwoStage};
use fundus_core::{autodiff::load_checkpoint, Error};

const DETECTOR_CKPT: &str = "detector.ckpt";
const REGRESSOR_CKPT: &str = "regressor.ckpt";
const BASELINE_CKPT: &str = "baseline.ckpt";
const PREDICTIONS: &str = "predictions.csv";

#[derive(Parser)]
#[command(name = "fundus", version, about = "Optic disc and fovea localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args)]
struct Data {
    /// Dataset directory with images/, train.csv and test.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which CSV of --data to use.
    #[arg(long, value_enum)]
    split: Option<Split>,
    /// Image directory for explicit CSVs.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Unified CSV (image,od_x,od_y,fov_x,fov_y).
    #[arg(long, conflicts_with_all = ["od_csv", "fovea_csv"])]
    csv: Option<PathBuf>,
    #[arg(long, requires = "fovea_csv")]
    od_csv: Option<PathBuf>,
    #[arg(long, requires = "od_csv")]
    fovea_csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic fundus dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Resize and equalize a split; writes working-resolution images and CSV.
    Preprocess {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the detector and its duplicate-removal head; writes detector.ckpt.
    TrainDetector {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: PathBuf,
        /// Skip per-epoch validation on the test split.
        #[arg(long)]
        no_val: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train both crop regressors on jittered ground-truth boxes; writes regressor.ckpt.
    TrainRegressor {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the direct whole-image regressor; writes baseline.ckpt.
    TrainBaseline {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Two-stage inference (or the direct baseline) to a predictions CSV.
    Predict {
        #[command(flatten)]
        data: Data,
        /// Directory holding detector.ckpt and regressor.ckpt.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        regressor: Option<PathBuf>,
        /// Predict with the direct baseline checkpoint instead.
        #[arg(long, conflicts_with_all = ["detector", "regressor"])]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write native-resolution overlays (GT red, predictions green).
        #[arg(long)]
        overlays: bool,
        #[command(flatten)]
        common: Common,
    },
    /// mAP and mean Euclidean distance of a predictions CSV against ground truth.
    Evaluate {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        predictions: PathBuf,
        /// Report directory; defaults to the predictions' directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn run_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read {}: {io}", p.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

impl Data {
    fn load(&self, cfg: &RunConfig, default_split: Split) -> anyhow::Result<Vec<DatasetRecord>> {
        let priors = cfg.priors();
        let loaded = if let Some(dir) = &self.data {
            let csv = match self.split.unwrap_or(default_split) {
                Split::Train => TRAIN_CSV,
                Split::Test => TEST_CSV,
            };
            load_split(dir, csv, &priors)?
        } else {
            let images = self.images.as_ref().ok_or_else(|| Error::Config("give --data, or --images with a CSV".into()))?;
            let source = match (&self.csv, &self.od_csv, &self.fovea_csv) {
                (Some(c), _, _) => CsvSource::Unified(c.clone()),
                (None, Some(od), Some(fov)) => CsvSource::Split { optic_disc: od.clone(), fovea: fov.clone() },
                _ => return Err(Error::Config("--images needs --csv or --od-csv/--fovea-csv".into()).into()),
            };
            load_dataset(images, &source, &priors)?
        };
        for r in &loaded.rejected {
            log::warn!("skipped {}: {}", r.image_id, r.reason);
        }
        if !loaded.unmatched.is_empty() {
            log::warn!("{} CSV rows without a partner", loaded.unmatched.len());
        }
        if loaded.records.is_empty() {
            return Err(Error::Data("no usable records".into()).into());
        }
        log::info!("{} records", loaded.records.len());
        Ok(loaded.records)
    }

    fn working(&self, cfg: &RunConfig, default_split: Split) -> anyhow::Result<(Vec<DatasetRecord>, Vec<WorkingSample>)> {
        let recs = self.load(cfg, default_split)?;
        let samples = cfg.preprocess().records(&recs)?;
        Ok((recs, samples))
    }

    fn has_test_split(&self) -> bool {
        self.data.as_ref().is_some_and(|d| d.join(TEST_CSV).exists())
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { n, out, common } => {
            let cfg = run_config(&common)?;
            if n == 0 {
                bail!(Error::Config("--n must be at least 1".into()));
            }
            let samples = generate_synthetic(&cfg.synth(), n)?;
            let (train, test) = write_dataset(&out, &samples, cfg.synth_train_fraction)?;
            println!("wrote {train} train / {test} test images to {}", out.display());
            write_manifest(&out, "synth", &cfg, &[("n", n.to_string())])?;
        }
        Command::Preprocess { data, out, common } => {
            let cfg = run_config(&common)?;
            let (_, samples) = data.working(&cfg, Split::Train)?;
            let img_dir = out.join(IMAGE_DIR);
            create_dir(&img_dir)?;
            for s in &samples {
                save_image(&s.image, &img_dir.join(format!("{}.png", s.annotation.image_id)))?;
            }
            let anns: Vec<_> = samples.iter().map(|s| &s.annotation).collect();
            save_unified(&out.join("annotations.csv"), &anns)?;
            println!("wrote {} working images to {}", samples.len(), out.display());
            write_manifest(&out, "preprocess", &cfg, &[])?;
        }
        Command::TrainDetector { data, out, no_val, common } => {
            let cfg = run_config(&common)?;
            let (_, train) = data.working(&cfg, Split::Train)?;
            let val = if !no_val && data.has_test_split() {
                Data { split: Some(Split::Test), ..data }.working(&cfg, Split::Test)?.1
            } else {
                Vec::new()
            };
            create_dir(&out)?;
            let (store, logs) = pipeline::train_detector_stage(&cfg, &train, &val, |l| println!("{}", l.to_line()))?;
            pipeline::save_store(&store, &out.join(DETECTOR_CKPT))?;
            let log_text: String = logs.iter().map(|l| l.to_line() + "\n").collect();
            std::fs::write(out.join("detector_log.txt"), log_text)?;
            write_manifest(&out, "train-detector", &cfg, &[("checkpoint", DETECTOR_CKPT.into())])?;
        }
        Command::TrainRegressor { data, out, common } => {
            let cfg = run_config(&common)?;
            let (_, train) = data.working(&cfg, Split::Train)?;
            create_dir(&out)?;
            let (store, logs) = pipeline::train_regressor_stage(&cfg, &train)?;
            for (name, l) in ["optic_disc", "fovea"].iter().zip(&logs) {
                println!("{name}: final loss {:.6}, skipped {}", l.epoch_loss.last().copied().unwrap_or(f64::NAN), l.skipped);
            }
            pipeline::save_store(&store, &out.join(REGRESSOR_CKPT))?;
            write_manifest(&out, "train-regressor", &cfg, &[("checkpoint", REGRESSOR_CKPT.into())])?;
        }
        Command::TrainBaseline { data, out, common } => {
            let cfg = run_config(&common)?;
            let (_, train) = data.working(&cfg, Split::Train)?;
            create_dir(&out)?;
            let (store, l) = pipeline::train_baseline_stage(&cfg, &train)?;
            println!("baseline: final loss {:.6}", l.epoch_loss.last().copied().unwrap_or(f64::NAN));
            pipeline::save_store(&store, &out.join(BASELINE_CKPT))?;
            write_manifest(&out, "train-baseline", &cfg, &[("checkpoint", BASELINE_CKPT.into())])?;
        }
        Command::Predict { data, models, detector, regressor, baseline, out, overlays, common } => {
            let cfg = run_config(&common)?;
            let in_models = |name: &str| models.as_ref().map(|m| m.join(name));
            let (recs, samples) = data.working(&cfg, Split::Test)?;
            let preds = if let Some(b) = &baseline {
                let store = load_checkpoint(b).map_err(|e| missing_checkpoint(e, "baseline", b))?;
                pipeline::predict_baseline(&cfg, &store, &samples)?
            } else {
                let det = detector
                    .or_else(|| in_models(DETECTOR_CKPT))
                    .ok_or_else(|| Error::Data("no detector checkpoint: give --detector or --models".into()))?;
                let reg = regressor
                    .or_else(|| in_models(REGRESSOR_CKPT))
                    .ok_or_else(|| Error::Data("no regressor checkpoint: give --regressor or --models".into()))?;
                pipeline::predict_two_stage(&TwoStage::load(&cfg, &det, &reg)?, &samples)?
            };
            create_dir(&out)?;
            std::fs::write(out.join(PREDICTIONS), pipeline::predictions_csv(&preds))?;
            if overlays {
                write_overlays(&out.join("overlays"), &recs, &preds)?;
            }
            let fallbacks =
                preds.iter().flat_map(|p| &p.classes).filter(|c| c.source != fundus_core::detector::FinalSource::Detected).count();
            println!("wrote {} predictions ({fallbacks} fallbacks) to {}", preds.len(), out.join(PREDICTIONS).display());
            let model = if baseline.is_some() { "baseline" } else { "two-stage" };
            write_manifest(&out, "predict", &cfg, &[("model", model.into())])?;
        }
        Command::Evaluate { data, predictions, out, common } => {
            let cfg = run_config(&common)?;
            let gts: Vec<_> = data.load(&cfg, Split::Test)?.into_iter().map(|r| r.annotation).collect();
            let report = pipeline::evaluate_predictions(&predictions, &gts)?;
            print!("{}", report.to_text());
            let out = out.unwrap_or_else(|| predictions.parent().map(Path::to_path_buf).unwrap_or_default());
            create_dir(&out)?;
            std::fs::write(out.join("metrics.txt"), report.to_text())?;
            std::fs::write(out.join("metrics.csv"), report.to_csv())?;
            write_manifest(&out, "evaluate", &cfg, &[("predictions", predictions.display().to_string())])?;
        }
    }
    Ok(())
}

fn missing_checkpoint(e: Error, what: &str, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Data(format!("cannot read {what} checkpoint {}: {io}", path.display())),
        other => other,
    }
}

fn write_overlays(dir: &Path, recs: &[DatasetRecord], preds: &[ImagePrediction]) -> anyhow::Result<()> {
    create_dir(dir)?;
    for (rec, p) in recs.iter().zip(preds) {
        let img = load_image(&rec.image_path)?;
        let dets: Vec<_> = p.classes.iter().filter_map(|c| c.detection).collect();
        let points: Vec<_> = p.classes.iter().map(|c| c.point).collect();
        save_image(&render_overlay(&img, &rec.annotation, &dets, &points), &dir.join(format!("{}.png", p.image_id)))?;
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
