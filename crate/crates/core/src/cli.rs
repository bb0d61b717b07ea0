//! The `pyfu` command: synthesis, training, evaluation, inference and
//! self-verification driven by one TOML run configuration.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    gen_synthetic, list_frames, load_frame, read_label_file, render_labels, semantic_class, write_frame, write_ppm,
    write_predictions, FrameBundle, LabelMap, SyntheticSceneSpec, SYNTHETIC_CLASSES,
};
use crate::error::{Error, Result};
use crate::numcore::ParamStore;
use crate::postprocess::{knn_postprocess, KnnConfig};
use crate::pyfu::{Checkpoint, Head, Preset, PyFu, PyFuConfig};
use crate::rangeview::{ProjectionIndex, Sample};
use crate::selftest::{gradient_suite, knn_suite, projection_suite, SuiteReport};
use crate::traineval::{
    confusion_update, evaluate, iou_miou, targets_for, train_loop, ConfusionMatrix, IouReport, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.pyfu";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Where class ids come from: the synthetic classes, SemanticKITTI, or a
/// label-map TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    #[default]
    Synthetic,
    SemanticKitti,
    #[serde(untagged)]
    File(PathBuf),
}

impl LabelSource {
    pub fn load(&self) -> Result<LabelMap> {
        match self {
            LabelSource::Synthetic => Ok(LabelMap::identity(&SYNTHETIC_CLASSES)),
            LabelSource::SemanticKitti => Ok(LabelMap::semantic_kitti()),
            LabelSource::File(p) => LabelMap::load(p),
        }
    }
}

/// Parameters copied into the freshly built network before training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitCheckpoint {
    pub path: PathBuf,
    /// Only entries whose name starts with this are copied.
    #[serde(default)]
    pub prefix: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training split root (`velodyne/`, `labels/`, `image_2/`, `calib.txt`).
    pub train: Option<PathBuf>,
    /// Validation split root; evaluation falls back to `train` without it.
    pub val: Option<PathBuf>,
    pub labels: LabelSource,
    /// Run directory for checkpoints, logs, reports and predictions.
    pub out: PathBuf,
    pub init: Vec<InitCheckpoint>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            val: None,
            labels: LabelSource::Synthetic,
            out: PathBuf::from("runs/pyfu"),
            init: Vec::new(),
        }
    }
}

/// Everything one invocation needs. Relative paths resolve against the
/// working directory. `seed` drives model initialisation, training and
/// synthesis alike; the seeds inside `train` and `synth` are overwritten.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Overrides the `model.fusion` switches.
    pub preset: Option<Preset>,
    pub model: PyFuConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub knn: KnnConfig,
    pub synth: SyntheticSceneSpec,
}

impl Default for RunConfig {
    /// Desk scale: 32×256 range view, 96×192 camera, the synthetic classes.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            preset: None,
            model: PyFuConfig::desk(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            knn: KnnConfig::default(),
            synth: SyntheticSceneSpec::default(),
        }
    }
}

impl RunConfig {
    /// Keys given in `text` override [`RunConfig::default`] one by one, so a
    /// partial `[model]` table keeps the desk values for everything else.
    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Format(e.to_string()))?;
        merge(&mut base, over);
        RunConfig::deserialize(base).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Applies the preset and seed, then validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(p) = self.preset {
            p.apply(&mut self.model.fusion);
        }
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        self.knn.validate()?;
        let labels = self.data.labels.load()?;
        if labels.num_classes() != self.model.classes {
            return Err(Error::Config(format!(
                "label map has {} classes, model.classes is {}",
                labels.num_classes(),
                self.model.classes
            )));
        }
        Ok(self)
    }

    /// Head trained and evaluated by default.
    pub fn head(&self) -> Head {
        self.train.head.unwrap_or_else(|| self.model.primary_head())
    }
}

/// Deep merge of TOML tables; arrays and scalars in `over` replace `base`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "pyfu", version, about = "Lidar-camera pyramid fusion for range-view semantic segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML); built-in desk defaults without it.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Run directory, overriding `data.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_head(s: &str) -> std::result::Result<Head, String> {
    match s {
        "lidar" => Ok(Head::Lidar),
        "camera" => Ok(Head::Camera),
        "fused" => Ok(Head::Fused),
        _ => Err(format!("unknown head {s:?} (lidar, camera, fused)")),
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of frames, overriding `synth.frames`.
        #[arg(long)]
        frames: Option<usize>,
        /// Dataset root (default: `data.train`).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Train and write a checkpoint plus a JSONL metrics log to the run directory.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Per-class IoU on the overlap field of view.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Default: `<run dir>/checkpoint.pyfu`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset root (default: `data.val`, then `data.train`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_parser = parse_head)]
        head: Option<Head>,
        /// Score stored `<id>.label` point predictions instead of running the network.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Write predicted range-view label images (PPM) here.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Per-point predictions refined by kNN, written as `.label` files.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Default: `<run dir>/predictions`.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Run the gradient, projection and kNN oracle suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        threads: Option<usize>,
        /// Random points in the projection suite.
        #[arg(long, default_value_t = 10_000)]
        points: usize,
        /// Random kNN instances.
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// status: 0 success, 1 runtime failure, 2 usage or configuration error.
pub fn run_cli<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    match run(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

fn set_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("--threads must be ≥ 1".into()));
        }
        // A pool built by an earlier call in the same process stays in place.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn load_config(common: &Common) -> Result<RunConfig> {
    set_threads(common.threads)?;
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = common.preset {
        cfg.preset = Some(p);
    }
    if let Some(o) = &common.out {
        cfg.data.out = o.clone();
    }
    cfg.resolve()
}

fn run(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Synth { common, frames, dest } => {
            let mut cfg = load_config(&common)?;
            if let Some(f) = frames {
                cfg.synth.frames = f;
            }
            let dest = dest
                .or(cfg.data.train.clone())
                .ok_or_else(|| Error::Config("synth needs --dest or data.train".into()))?;
            synth(&cfg, &dest, out)
        }
        Command::Train { common } => train(&load_config(&common)?, out),
        Command::Eval {
            common,
            checkpoint,
            data,
            head,
            predictions,
            render,
        } => {
            let cfg = load_config(&common)?;
            let args = EvalArgs {
                checkpoint,
                data,
                head,
                predictions,
                render,
            };
            eval(&cfg, &args, out)
        }
        Command::Infer {
            common,
            checkpoint,
            data,
            dest,
        } => infer(&load_config(&common)?, checkpoint, data, dest, out),
        Command::Selftest {
            seed,
            threads,
            points,
            instances,
        } => {
            set_threads(threads)?;
            selftest(seed, points, instances, out)
        }
    }
}

fn say(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("stdout", e))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn synth(cfg: &RunConfig, dest: &Path, out: &mut dyn Write) -> Result<i32> {
    let frames = gen_synthetic(&cfg.synth)?;
    let labels = cfg.data.labels.load()?;
    create_dir(dest)?;
    for f in &frames {
        write_frame(dest, f, &labels)?;
    }
    say(out, format!("wrote {} frames to {}", frames.len(), dest.display()))?;
    Ok(EXIT_OK)
}

fn load_split(root: &Path, labels: &LabelMap) -> Result<Vec<FrameBundle>> {
    let ids = list_frames(root)?;
    if ids.is_empty() {
        return Err(Error::Format(format!("{}: no frames under velodyne/", root.display())));
    }
    ids.iter().map(|id| load_frame(root, id, labels)).collect()
}

fn to_samples(cfg: &RunConfig, frames: &[FrameBundle]) -> Result<Vec<(Sample, ProjectionIndex)>> {
    frames
        .iter()
        .map(|f| {
            let s = f.image.shape();
            if (s.h, s.w) != (cfg.model.camera_height, cfg.model.camera_width) {
                return Err(Error::Config(format!(
                    "frame {}: image is {}x{}, model.camera_height/width are {}x{}",
                    f.id, s.h, s.w, cfg.model.camera_height, cfg.model.camera_width
                )));
            }
            f.to_sample(&cfg.model.sensor)
        })
        .collect()
}

fn samples_only(pairs: Vec<(Sample, ProjectionIndex)>) -> Vec<Sample> {
    pairs.into_iter().map(|(s, _)| s).collect()
}

fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let labels = cfg.data.labels.load()?;
    let train_root = cfg
        .data
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("train needs data.train".into()))?;
    let train = samples_only(to_samples(cfg, &load_split(train_root, &labels)?)?);
    let val = match &cfg.data.val {
        Some(v) => samples_only(to_samples(cfg, &load_split(v, &labels)?)?),
        None => Vec::new(),
    };
    let (model, mut store) = PyFu::build::<f32>(cfg.model.clone(), cfg.seed)?;
    for init in &cfg.data.init {
        let ck = Checkpoint::load(&init.path)?;
        let picked = Checkpoint {
            entries: ck.entries.into_iter().filter(|e| e.name.starts_with(&init.prefix)).collect(),
        };
        let n = picked.apply_to(&mut store, false)?;
        say(out, format!("initialised {n} tensors from {}", init.path.display()))?;
    }
    create_dir(&cfg.data.out)?;
    fs::write(cfg.data.out.join("run.toml"), cfg.to_toml()?).map_err(|e| Error::io(cfg.data.out.join("run.toml"), e))?;
    let log_path = cfg.data.out.join(METRICS_FILE);
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let report = train_loop(&model, &mut store, &train, &val, &cfg.train, &mut log)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let ck_path = cfg.data.out.join(CHECKPOINT_FILE);
    Checkpoint::from_store(&store).save(&ck_path)?;
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    say(
        out,
        format!(
            "trained {} steps on {} frames ({} skipped draws), final loss {last:.4}",
            cfg.train.iterations,
            train.len(),
            report.skipped
        ),
    )?;
    if let Some(r) = &report.last_eval {
        say(out, format!("validation mIoU {:.4}", r.miou))?;
    }
    say(out, format!("checkpoint {}", ck_path.display()))?;
    say(out, format!("metrics {}", log_path.display()))?;
    Ok(EXIT_OK)
}

fn load_model(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<(PyFu, ParamStore<f32>)> {
    let (model, mut store) = PyFu::build::<f32>(cfg.model.clone(), cfg.seed)?;
    let path = checkpoint.unwrap_or_else(|| cfg.data.out.join(CHECKPOINT_FILE));
    Checkpoint::load(&path)?.apply_to(&mut store, true)?;
    Ok((model, store))
}

fn data_root(cfg: &RunConfig, data: Option<PathBuf>) -> Result<PathBuf> {
    data.or(cfg.data.val.clone())
        .or(cfg.data.train.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data.val / data.train".into()))
}

struct EvalArgs {
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    head: Option<Head>,
    predictions: Option<PathBuf>,
    render: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    head: Head,
    frames: usize,
    pixels: u64,
    accuracy: f64,
    miou: f64,
    classes: &'a [String],
    iou: &'a [Option<f64>],
    confusion: &'a ConfusionMatrix,
}

/// Point predictions from a `.label` file, carried to the pixels whose kept
/// point they belong to.
fn stored_pixel_predictions(path: &Path, index: &ProjectionIndex, labels: &LabelMap) -> Result<Vec<u8>> {
    let words = read_label_file(path)?;
    if words.len() != index.point_pixel.len() {
        return Err(Error::Format(format!(
            "{}: {} predictions for {} points",
            path.display(),
            words.len(),
            index.point_pixel.len()
        )));
    }
    Ok(index
        .pixel_point
        .iter()
        .map(|p| p.map_or(crate::IGNORE_LABEL, |i| labels.to_train(semantic_class(words[i as usize]) as u32)))
        .collect())
}

/// Class colours: the synthetic palette first, then evenly spread hues.
pub fn class_palette(classes: usize) -> Vec<[f32; 3]> {
    let base = SyntheticSceneSpec::default().palette;
    (0..classes)
        .map(|c| {
            base.get(c).copied().unwrap_or_else(|| {
                let h = (c as f32 * 0.618_034).fract() * 6.0;
                let x = 1.0 - (h % 2.0 - 1.0).abs();
                match h as usize {
                    0 => [1.0, x, 0.0],
                    1 => [x, 1.0, 0.0],
                    2 => [0.0, 1.0, x],
                    3 => [0.0, x, 1.0],
                    4 => [x, 0.0, 1.0],
                    _ => [1.0, 0.0, x],
                }
            })
        })
        .collect()
}

pub fn format_iou_table(classes: &[String], report: &IouReport, accuracy: f64, pixels: u64) -> String {
    let width = classes.iter().map(|c| c.len()).max().unwrap_or(0).max(8);
    let mut s = format!("{:<width$}  {:>8}\n", "class", "IoU");
    for (name, iou) in classes.iter().zip(&report.iou) {
        let v = iou.map_or("     n/a".to_string(), |v| format!("{v:>8.4}"));
        s.push_str(&format!("{name:<width$}  {v}\n"));
    }
    s.push_str(&format!("{:<width$}  {:>8.4}\n", "mIoU", report.miou));
    s.push_str(&format!("{:<width$}  {:>8.4}\n", "accuracy", accuracy));
    s.push_str(&format!("{:<width$}  {:>8}\n", "pixels", pixels));
    s
}

fn eval(cfg: &RunConfig, args: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let labels = cfg.data.labels.load()?;
    let root = data_root(cfg, args.data.clone())?;
    let frames = load_split(&root, &labels)?;
    let pairs = to_samples(cfg, &frames)?;
    let head = args.head.unwrap_or_else(|| cfg.head());
    let classes = cfg.model.classes;
    let mut cm = ConfusionMatrix::new(classes);
    let model = match &args.predictions {
        Some(_) => None,
        None => Some(load_model(cfg, args.checkpoint.clone())?),
    };
    if let Some(r) = &args.render {
        create_dir(r)?;
    }
    let palette = class_palette(classes);
    for (frame, (sample, index)) in frames.iter().zip(&pairs) {
        let pixel_pred = match (&args.predictions, &model) {
            (Some(dir), _) => {
                if head != Head::Lidar {
                    return Err(Error::Config("stored predictions are scored with --head lidar".into()));
                }
                let p = stored_pixel_predictions(&dir.join(format!("{}.label", frame.id)), index, &labels)?;
                let Some((targets, mask)) = targets_for(sample, head)? else {
                    continue;
                };
                confusion_update(&mut cm, &p, &targets, Some(&mask))?;
                Some(p)
            }
            (None, Some((m, store))) => {
                cm.merge(&evaluate(m, store, std::slice::from_ref(sample), head)?)?;
                match args.render {
                    Some(_) => Some(m.predict_sample(store, sample.clone(), index.clone())?.pixel_labels),
                    None => None,
                }
            }
            (None, None) => unreachable!("a model is loaded without stored predictions"),
        };
        if let (Some(dir), Some(p)) = (&args.render, pixel_pred) {
            let (h, w) = (sample.range.height, sample.range.width);
            let shown: Vec<u8> = p
                .iter()
                .zip(&sample.range.mask)
                .map(|(l, m)| if *m { *l } else { crate::IGNORE_LABEL })
                .collect();
            write_ppm(&dir.join(format!("{}.ppm", frame.id)), &render_labels(h, w, &shown, &palette))?;
        }
    }
    let report = iou_miou(&cm)?;
    say(out, format_iou_table(&labels.classes, &report, cm.accuracy(), cm.total()))?;
    let summary = EvalSummary {
        head,
        frames: frames.len(),
        pixels: cm.total(),
        accuracy: cm.accuracy(),
        miou: report.miou,
        classes: &labels.classes,
        iou: &report.iou,
        confusion: &cm,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    create_dir(&cfg.data.out)?;
    let path = cfg.data.out.join("eval.json");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    say(out, format!("report {}", path.display()))?;
    Ok(EXIT_OK)
}

fn infer(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    dest: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<i32> {
    let labels = cfg.data.labels.load()?;
    let root = data_root(cfg, data)?;
    let (model, store) = load_model(cfg, checkpoint)?;
    let dest = dest.unwrap_or_else(|| cfg.data.out.join("predictions"));
    create_dir(&dest)?;
    let ids = list_frames(&root)?;
    for id in &ids {
        let frame = load_frame(&root, id, &labels)?;
        let (sample, index) = to_samples(cfg, std::slice::from_ref(&frame))?.remove(0);
        let pred = model.predict_sample(&store, sample, index)?;
        let refined = knn_postprocess(&frame.cloud, &pred.index, &pred.range, &pred.pixel_labels, &cfg.knn)?;
        let raw: Vec<u16> = refined.iter().map(|c| labels.to_raw(*c)).collect();
        write_predictions(&raw, &dest.join(format!("{id}.label")))?;
    }
    say(out, format!("wrote {} prediction files to {}", ids.len(), dest.display()))?;
    Ok(EXIT_OK)
}

fn print_suite(out: &mut dyn Write, r: &SuiteReport) -> Result<()> {
    for c in &r.checks {
        say(out, format!("{} {}: {} ({})", if c.passed { "ok  " } else { "FAIL" }, r.suite, c.name, c.detail))?;
    }
    say(out, format!("{} suite {} in {:.1}s", r.suite, if r.passed() { "passed" } else { "FAILED" }, r.seconds))
}

fn selftest(seed: u64, points: usize, instances: usize, out: &mut dyn Write) -> Result<i32> {
    let mut ok = true;
    for r in [gradient_suite(seed), projection_suite(seed, points), knn_suite(seed, instances)] {
        print_suite(out, &r)?;
        ok &= r.passed();
    }
    Ok(if ok { EXIT_OK } else { EXIT_FAILURE })
}
