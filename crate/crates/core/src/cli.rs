//! `tilecov` subcommands. Each `cmd_*` function is what the binary runs; they
//! are public so pipelines can be driven from tests without a subprocess.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::coverage::{
    compute_coverage, dominant_labels, read_coverage_csv, validate_ground_truth_within,
    write_coverage_csv, write_labels_csv, TileGridSpec, DEFAULT_HTILES, DEFAULT_VTILES,
    GROUND_TRUTH_SUM_TOLERANCE,
};
use crate::dataset::{
    load_corpus, stratified_split, synth_corpus, write_corpus, RgbImage, SplitManifest,
    SynthConfig, DEFAULT_RATIOS,
};
use crate::error::{Error, Result};
use crate::geometry::{parse_annotation_file, rasterize};
use crate::metrics::{evaluate, MetricsReport, Pooling};
use crate::trainer::{
    load_checkpoint, predict_to_files, save_checkpoint, train_two_phase_logged, AugmentConfig,
    HeadMode, ModelConfig, PredictSummary, TrainConfig,
};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";

#[derive(Debug, Parser)]
#[command(
    name = "tilecov",
    version,
    about = "Tile-level camera soiling coverage toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic soiling corpus.
    Synth(SynthArgs),
    /// Rasterize polygon annotations into tile coverage and label CSVs.
    Coverage(CoverageArgs),
    /// Stratified train/val/test split of a corpus.
    Split(SplitArgs),
    /// Two-phase training; writes a checkpoint and a JSONL epoch log.
    Train(TrainArgs),
    /// Predict tile coverage for PPM images with a trained checkpoint.
    Predict(PredictArgs),
    /// Compare predicted coverage CSVs with ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TilingArgs {
    /// Tile rows per image.
    #[arg(long, default_value_t = DEFAULT_VTILES)]
    pub vtiles: usize,
    /// Tile columns per image.
    #[arg(long, default_value_t = DEFAULT_HTILES)]
    pub htiles: usize,
}

#[derive(Debug, Clone, Args)]
#[command(after_help = synth_defaults())]
pub struct SynthArgs {
    /// Output corpus directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[command(flatten)]
    pub tiling: TilingArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct CoverageArgs {
    /// Annotation JSON file, or a directory of them.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Writes `coverage/<id>.csv` and `labels/<id>.csv` here.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub tiling: TilingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Corpus directory.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output manifest JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RATIOS)]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Coverage,
    Classification,
}

impl From<ModeArg> for HeadMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Coverage => HeadMode::Coverage,
            ModeArg::Classification => HeadMode::Classification,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    /// Mean of per-image RMSE values.
    PerImage,
    /// One RMSE over all tiles.
    Pooled,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::PerImage => Pooling::PerImageMean,
            PoolingArg::Pooled => Pooling::PooledTiles,
        }
    }
}

#[derive(Debug, Clone, Args)]
#[command(after_help = augment_defaults())]
pub struct TrainArgs {
    /// Corpus directory.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Split manifest from `tilecov split`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the checkpoint, log and resolved config.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    /// Soiling-head epochs.
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    /// Encoder pretraining epochs on the surrogate task.
    #[arg(long, default_value_t = TrainConfig::default().surrogate_epochs)]
    pub surrogate_epochs: usize,
    /// Soiling-head learning rate.
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub lr: f64,
    /// Encoder pretraining learning rate.
    #[arg(long, default_value_t = TrainConfig::default().surrogate_learning_rate)]
    pub surrogate_lr: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Coverage)]
    pub mode: ModeArg,
    /// Enable photometric and flip augmentation.
    #[arg(long)]
    pub augment: bool,
    /// Output channels of the stride-2 encoder blocks.
    #[arg(long, value_delimiter = ',', default_value = "16,32,32,32")]
    pub encoder_channels: Vec<usize>,
    #[arg(long, default_value_t = ModelConfig::default().head_channels)]
    pub head_channels: usize,
    #[arg(long, default_value_t = ModelConfig::default().head_depth)]
    pub head_depth: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of PPM images, or a corpus directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Restrict to one subset of this manifest.
    #[arg(long, requires = "split")]
    pub manifest: Option<PathBuf>,
    /// Subset name: train, val or test.
    #[arg(long, requires = "manifest")]
    pub split: Option<String>,
    /// Writes `coverage/<id>.csv` and `labels/<id>.csv` here.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Ground-truth coverage CSVs (a corpus or prediction directory also works).
    #[arg(long)]
    pub truth: PathBuf,
    /// Predicted coverage CSVs; every file must have a ground-truth match.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, value_enum, default_value_t = PoolingArg::PerImage)]
    pub pooling: PoolingArg,
    /// Allowed deviation of a ground-truth tile's coverage sum from 1.
    #[arg(long, default_value_t = GROUND_TRUTH_SUM_TOLERANCE)]
    pub sum_tolerance: f64,
    /// Also write the JSON report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Print the JSON report instead of the text tables.
    #[arg(long)]
    pub json: bool,
}

fn synth_defaults() -> String {
    let cfg = SynthConfig::default();
    let mut s = String::from("Generator settings:\n");
    for (name, spec) in [
        ("transparent", cfg.transparent),
        ("semitransparent", cfg.semitransparent),
        ("opaque", cfg.opaque),
    ] {
        s += &format!(
            "  {name} blobs: {}..={} per image, radius {}..{} px\n",
            spec.count.0, spec.count.1, spec.radius.0, spec.radius.1
        );
    }
    s += &format!(
        "  vertices per blob: {}..={}\n  placement retries: {}",
        cfg.vertices.0, cfg.vertices.1, cfg.max_retries
    );
    s
}

fn augment_defaults() -> String {
    let a = AugmentConfig::default();
    format!(
        "Augmentation (with --augment), per image:\n  \
         horizontal flip p={}\n  \
         brightness p={} shift up to +/-{}\n  \
         contrast p={} factor 1+/-{}\n  \
         color p={} hue up to +/-{} deg, saturation 1+/-{}\n  \
         gaussian noise p={} std {}\n\
         Image size and tiling are taken from the corpus.",
        a.flip_prob,
        a.brightness_prob,
        a.brightness_delta,
        a.contrast_prob,
        a.contrast_range,
        a.color_prob,
        a.hue_delta,
        a.saturation_range,
        a.noise_prob,
        a.noise_std
    )
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
        Command::Coverage(a) => cmd_coverage(&a).map(|_| ()),
        Command::Split(a) => cmd_split(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a).map(|_| ()),
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            let mut stdout = std::io::stdout().lock();
            let text = if a.json {
                serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
            } else {
                report.to_text()
            };
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn not_found(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found")),
    )
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(not_found(path, what))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(not_found(path, what))
    }
}

/// Files in `dir` with extension `ext`, sorted by name.
fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `dir/<sub>` when it exists, else `dir`.
fn nested(dir: &Path, sub: &str) -> PathBuf {
    let inner = dir.join(sub);
    if inner.is_dir() {
        inner
    } else {
        dir.to_path_buf()
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<usize> {
    if a.count == 0 {
        return Err(Error::Argument("--count must be positive".into()));
    }
    let cfg = SynthConfig {
        width: a.width,
        height: a.height,
        vtiles: a.tiling.vtiles,
        htiles: a.tiling.htiles,
        seed: a.seed,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    let scenes = synth_corpus(&cfg, a.count)?;
    let index = write_corpus(&a.out, &scenes)?;
    eprintln!("wrote {} scenes to {}", index.items.len(), a.out.display());
    Ok(index.items.len())
}

pub fn cmd_coverage(a: &CoverageArgs) -> Result<usize> {
    let files = if a.annotations.is_dir() {
        list_files(&a.annotations, "json")?
    } else {
        require_file(&a.annotations, "annotation file")?;
        vec![a.annotations.clone()]
    };
    if files.is_empty() {
        return Err(Error::Argument(format!(
            "{}: no annotation files",
            a.annotations.display()
        )));
    }
    let parsed = files
        .iter()
        .map(|f| parse_annotation_file(f))
        .collect::<Result<Vec<_>>>()?;
    let cov_dir = a.out.join("coverage");
    let lab_dir = a.out.join("labels");
    for dir in [&cov_dir, &lab_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for (file, ann) in files.iter().zip(&parsed) {
        let spec = TileGridSpec::for_image(ann.height, ann.width, a.tiling.vtiles, a.tiling.htiles)
            .map_err(|e| Error::Validation(format!("{}: {e}", file.display())))?;
        let map = rasterize(ann)?;
        let grid = compute_coverage(&map, &spec)?;
        let id = &ann.image_id;
        write_coverage_csv(&grid, &cov_dir.join(format!("{id}.csv")))?;
        write_labels_csv(&dominant_labels(&grid), &lab_dir.join(format!("{id}.csv")))?;
    }
    eprintln!("wrote coverage for {} annotations", parsed.len());
    Ok(parsed.len())
}

pub fn cmd_split(a: &SplitArgs) -> Result<SplitManifest> {
    let ratios: [f64; 3] = a
        .ratios
        .as_slice()
        .try_into()
        .map_err(|_| Error::Argument("--ratios takes exactly three values".into()))?;
    require_dir(&a.corpus, "corpus directory")?;
    let corpus = load_corpus(&a.corpus)?;
    let outcome = stratified_split(&corpus.items(), ratios, a.seed)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    outcome.manifest.write(&a.out)?;
    let m = &outcome.manifest;
    eprintln!(
        "split {} images: {} train, {} val, {} test",
        m.len(),
        m.train.len(),
        m.val.len(),
        m.test.len()
    );
    Ok(outcome.manifest)
}

pub fn train_config(a: &TrainArgs, model: ModelConfig) -> TrainConfig {
    TrainConfig {
        batch_size: a.batch_size,
        epochs: a.epochs,
        surrogate_epochs: a.surrogate_epochs,
        learning_rate: a.lr,
        surrogate_learning_rate: a.surrogate_lr,
        seed: a.seed,
        mode: a.mode.into(),
        augmentation: a.augment,
        augment: AugmentConfig::default(),
        model: ModelConfig {
            encoder_channels: a.encoder_channels.clone(),
            head_channels: a.head_channels,
            head_depth: a.head_depth,
            ..model
        },
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    require_dir(&a.corpus, "corpus directory")?;
    require_file(&a.manifest, "split manifest")?;
    let corpus = load_corpus(&a.corpus)?;
    let manifest = SplitManifest::read(&a.manifest)?;
    let train = corpus.select(&manifest.train)?;
    let val = corpus.select(&manifest.val)?;
    let cfg = train_config(
        a,
        ModelConfig {
            height: corpus.index.height,
            width: corpus.index.width,
            vtiles: corpus.index.vtiles,
            htiles: corpus.index.htiles,
            ..ModelConfig::default()
        },
    );
    cfg.validate()?;

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let cfg_path = a.out.join(TRAIN_CONFIG_FILE);
    let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
    std::fs::write(&cfg_path, text + "\n").map_err(|e| Error::io(&cfg_path, e))?;

    // Lines go out as epochs finish so a divergent run keeps its history.
    let log_path = a.out.join(TRAIN_LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut write_err = None;
    let outcome = train_two_phase_logged(&train, &val, &cfg, &mut |entry| {
        let line = serde_json::to_string(entry).expect("log entries serialize");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_err.get_or_insert(e);
        }
        match entry.val_rmse {
            Some(v) => eprintln!(
                "{:?} epoch {}: loss {:.5} val rmse {v:.5}",
                entry.phase, entry.epoch, entry.loss
            ),
            None => eprintln!(
                "{:?} epoch {}: loss {:.5}",
                entry.phase, entry.epoch, entry.loss
            ),
        }
    });
    if let Some(e) = write_err {
        return Err(Error::io(&log_path, e));
    }
    let outcome = outcome?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    save_checkpoint(&outcome.model, &ckpt)?;
    eprintln!(
        "kept soiling epoch {}; checkpoint {}",
        outcome.best_epoch,
        ckpt.display()
    );
    Ok(())
}

pub fn cmd_predict(a: &PredictArgs) -> Result<PredictSummary> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_dir(&a.input, "input directory")?;
    let image_dir = nested(&a.input, "images");
    let mut files = list_files(&image_dir, "ppm")?;
    if let (Some(manifest), Some(split)) = (&a.manifest, &a.split) {
        require_file(manifest, "split manifest")?;
        let m = SplitManifest::read(manifest)?;
        let ids = m.subset(split)?;
        let mut selected = Vec::with_capacity(ids.len());
        for id in ids {
            let path = image_dir.join(format!("{id}.ppm"));
            require_file(&path, "image listed in manifest")?;
            selected.push(path);
        }
        selected.sort();
        files = selected;
    }
    if files.is_empty() {
        return Err(Error::Argument(format!(
            "{}: no PPM images",
            image_dir.display()
        )));
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let images = files
        .iter()
        .map(|f| Ok((stem(f), RgbImage::read_ppm(f)?)))
        .collect::<Result<Vec<_>>>()?;
    for (id, img) in &images {
        if (img.height, img.width) != (model.config.height, model.config.width) {
            return Err(Error::Dimension(format!(
                "{}: image is {}x{}, checkpoint expects {}x{}",
                image_dir.join(format!("{id}.ppm")).display(),
                img.height,
                img.width,
                model.config.height,
                model.config.width
            )));
        }
    }
    let summary = predict_to_files(&model, &images, &a.out)?;
    eprintln!(
        "predicted {} images ({} values clamped) into {}",
        summary.images,
        summary.clamped,
        a.out.display()
    );
    Ok(summary)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<MetricsReport> {
    require_dir(&a.truth, "ground-truth directory")?;
    require_dir(&a.pred, "prediction directory")?;
    if !(a.sum_tolerance >= 0.0) {
        return Err(Error::Argument(format!(
            "--sum-tolerance must be non-negative, got {}",
            a.sum_tolerance
        )));
    }
    let truth_dir = nested(&a.truth, "coverage");
    let pred_files = list_files(&nested(&a.pred, "coverage"), "csv")?;
    if pred_files.is_empty() {
        return Err(Error::Argument(format!(
            "{}: no prediction CSVs",
            a.pred.display()
        )));
    }
    let mut pairs = Vec::with_capacity(pred_files.len());
    for pred_path in &pred_files {
        let truth_path = truth_dir.join(format!("{}.csv", stem(pred_path)));
        require_file(&truth_path, "ground truth for prediction")?;
        let truth = read_coverage_csv(&truth_path)?;
        validate_ground_truth_within(&truth, &truth_path, a.sum_tolerance)?;
        let pred = read_coverage_csv(pred_path)?;
        if !truth.same_shape(&pred) {
            return Err(Error::Dimension(format!(
                "{}: {}x{} tiles, ground truth {} has {}x{}",
                pred_path.display(),
                pred.vtiles,
                pred.htiles,
                truth_path.display(),
                truth.vtiles,
                truth.htiles
            )));
        }
        pairs.push((truth, pred));
    }
    let report = evaluate(pairs.iter().map(|(t, p)| (t, p)), a.pooling.into())?;
    if let Some(path) = &a.report {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_lists_defaults() {
        let mut cmd = Cli::command();
        let train = cmd.find_subcommand_mut("train").unwrap();
        let help = train.render_long_help().to_string();
        for needle in [
            "[default: 64]",
            "[default: 0.001]",
            "[default: 0.005]",
            "[default: coverage]",
            "[default: 16,32,32,32]",
            "flip p=0.5",
        ] {
            assert!(help.contains(needle), "missing {needle} in\n{help}");
        }
        let synth = cmd.find_subcommand_mut("synth").unwrap();
        let help = synth.render_long_help().to_string();
        assert!(help.contains("[default: 4]"), "{help}");
        assert!(help.contains("radius 7..16"), "{help}");
    }

    #[test]
    fn train_defaults_match_library() {
        let cli = Cli::try_parse_from([
            "tilecov",
            "train",
            "--corpus",
            "c",
            "--manifest",
            "m",
            "--out",
            "o",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else {
            panic!("not train")
        };
        let cfg = train_config(&a, ModelConfig::default());
        assert_eq!(cfg, TrainConfig::default());
    }

    #[test]
    fn ratios_parse_as_three_values() {
        let cli = Cli::try_parse_from([
            "tilecov",
            "split",
            "--corpus",
            "c",
            "--out",
            "m.json",
            "--ratios",
            "0.5,0.25,0.25",
        ])
        .unwrap();
        match cli.command {
            Command::Split(a) => assert_eq!(a.ratios, vec![0.5, 0.25, 0.25]),
            other => panic!("{other:?}"),
        }
        let cli = Cli::try_parse_from([
            "tilecov", "split", "--corpus", "c", "--out", "m.json", "--ratios", "0.5,0.5",
        ])
        .unwrap();
        match cli.command {
            Command::Split(a) => {
                let err = cmd_split(&a).unwrap_err();
                assert_eq!(err.exit_code(), 1, "{err}");
            }
            other => panic!("{other:?}"),
        }
    }
}
