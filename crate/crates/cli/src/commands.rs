//! The four verbs. Each writes its files under the configured output
//! directory and returns what it wrote.

use std::path::{Path, PathBuf};
use std::time::Instant;

use segbench_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use segbench_core::cost::{compare_models, external_references, network_cost, CostError, CostReport};
use segbench_core::data::{load_cityscapes, resolve_root, synth_shapes, DataError, DatasetAdapter, Split};
use segbench_core::engine::{EngineError, Executor, ModelParams, Tensor};
use segbench_core::evaluation::{cityscapes_metrics, iou_metrics, CategoryMap, ConfusionMatrix, EvalError, MetricReport};
use segbench_core::graph::{infer_shapes, TensorShape};
use segbench_core::meta_arch::{build_model, build_segnet_reference, MetaArchError, SegmentationModel, DEFAULT_NUM_CLASSES};
use segbench_core::training::{predict, LossConfig, TrainError, TrainState, Trainer};
use thiserror::Error;

use crate::config::{ConfigError, DatasetKind, ExperimentConfig};
use crate::report::{comparison_csv, comparison_markdown, ResultRow, SkippedModel};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] MetaArchError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("checkpoint does not fit {model}: {message}")]
    CheckpointMismatch { model: String, message: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn write(path: &Path, contents: &str) -> Result<()> {
    let io = |e: std::io::Error| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, contents).map_err(io)
}

/// Builds the configured model and checks that it maps the configured
/// resolution to per-pixel scores at the same size.
pub fn build_configured_model(cfg: &ExperimentConfig) -> Result<SegmentationModel> {
    let model = build_model(cfg.encoder, cfg.decoder, &cfg.encoder_options, cfg.model_classes())?;
    let (h, w) = cfg.data.resolution;
    let bad = |why: String| CliError::Usage(format!("resolution {h}x{w} does not fit {}: {why}", model.id()));
    let shapes = infer_shapes(&model.graph, &[TensorShape::new(1, 3, h, w)]).map_err(|e| bad(e.to_string()))?;
    let out = shapes[model.output()];
    if (out.height, out.width) != (h, w) {
        return Err(bad(format!("output is {}x{}", out.height, out.width)));
    }
    Ok(model)
}

pub fn open_dataset(cfg: &ExperimentConfig, split: Split) -> Result<Box<dyn DatasetAdapter>> {
    Ok(match cfg.data.kind {
        // the synthetic set has no splits; eval reuses the training images
        DatasetKind::Synthetic => Box::new(synth_shapes(
            cfg.data.num_images,
            cfg.data.resolution,
            cfg.data.classes,
            cfg.data_seed(),
        )?),
        DatasetKind::Cityscapes => Box::new(load_cityscapes(
            &resolve_root(&cfg.data.root),
            split,
            Some(cfg.data.resolution),
        )?),
    })
}

pub struct AnalyzeOutput {
    pub csv_path: PathBuf,
    pub markdown_path: PathBuf,
    pub csv: String,
    pub markdown: String,
    pub skipped: Vec<SkippedModel>,
}

pub fn analyze(cfg: &ExperimentConfig) -> Result<AnalyzeOutput> {
    let spec = &cfg.analyze;
    let (h, w) = spec.resolution;
    let classes = cfg.num_classes.unwrap_or(DEFAULT_NUM_CLASSES);
    let mut reports: Vec<CostReport> = Vec::new();
    let mut skipped = Vec::new();
    let mut cost = |id: String, built: std::result::Result<SegmentationModel, MetaArchError>| {
        let outcome = built
            .map_err(|e| e.to_string())
            .and_then(|m| network_cost(&id, &m.graph, TensorShape::new(1, 3, h, w)).map_err(|e| e.to_string()));
        match outcome {
            Ok(r) => reports.push(r),
            Err(reason) => skipped.push(SkippedModel { model: id, reason }),
        }
    };
    for &enc in &spec.encoders {
        for &dec in &spec.decoders {
            let id = format!("{}-{}", dec.display_name(), enc.display_name());
            cost(id, build_model(enc, dec, &cfg.encoder_options, classes));
        }
    }
    if spec.include_segnet {
        cost("SegNet-VGG16".into(), build_segnet_reference(classes));
    }
    let externals = if spec.include_external { external_references() } else { Vec::new() };
    let table = compare_models(&reports, &externals)?;
    let csv = comparison_csv(&table, &skipped);
    let markdown = comparison_markdown(&table, &skipped);
    let stem = format!("cost_{h}x{w}");
    let csv_path = cfg.out.join(format!("{stem}.csv"));
    let markdown_path = cfg.out.join(format!("{stem}.md"));
    write(&csv_path, &csv)?;
    write(&markdown_path, &markdown)?;
    Ok(AnalyzeOutput {
        csv_path,
        markdown_path,
        csv,
        markdown,
        skipped,
    })
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_LOG: &str = "loss.csv";

pub fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in history.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

/// Loads a checkpoint and checks it against `model`.
pub fn load_model_state(dir: &Path, model: &SegmentationModel) -> Result<TrainState> {
    let ckpt = load_checkpoint(dir)?;
    let mismatch = |message: String| CliError::CheckpointMismatch {
        model: model.id(),
        message,
    };
    ckpt.expect_model(&model.id()).map_err(|e| mismatch(e.to_string()))?;
    ckpt.state.params.check(&model.graph).map_err(|e| mismatch(e.to_string()))?;
    Ok(ckpt.state)
}

pub struct TrainOutput {
    pub state: TrainState,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

/// Runs `cfg.steps` further steps, from scratch or from `resume`.
pub fn train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate_for_execution()?;
    let model = build_configured_model(cfg)?;
    let data = open_dataset(cfg, cfg.data.train_split)?;
    let loss = LossConfig::from_dataset(data.as_ref(), cfg.weight_constant)?;
    let trainer = Trainer::new(&model, data.as_ref(), cfg.optim.clone(), loss);
    let start = match resume {
        Some(dir) => load_model_state(dir, &model)?,
        None => trainer.initial_state()?,
    };
    let state = trainer.resume(start, cfg.steps)?;
    let checkpoint = cfg.out.join(CHECKPOINT_DIR);
    save_checkpoint(&checkpoint, &model.id(), &state)?;
    let loss_log = cfg.out.join(LOSS_LOG);
    write(&loss_log, &loss_csv(&state.loss_history))?;
    Ok(TrainOutput {
        state,
        checkpoint,
        loss_log,
    })
}

pub struct EvalOutput {
    pub report: MetricReport,
    pub row: ResultRow,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Streams the evaluation split through the model one image at a time.
pub fn evaluate(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalOutput> {
    cfg.validate_for_execution()?;
    let model = build_configured_model(cfg)?;
    let state = load_model_state(checkpoint, &model)?;
    let data = open_dataset(cfg, cfg.data.eval_split)?;
    let k = data.num_classes();
    let mut cm = ConfusionMatrix::new(k);
    for i in 0..data.len() {
        for (pred, label) in predict(&model, &state.params, data.as_ref(), &[i], &cfg.data.normalization)? {
            cm.update(&pred, &label, data.ignore_index())?;
        }
    }
    let report = match cfg.data.kind {
        DatasetKind::Cityscapes => cityscapes_metrics(&cm)?,
        DatasetKind::Synthetic => {
            let names: Vec<String> = (0..k).map(|c| format!("class_{c}")).collect();
            iou_metrics(&cm, &CategoryMap::identity(&names), &names)?
        }
    };
    let (h, w) = cfg.data.resolution;
    let cost = network_cost(&model.id(), &model.graph, TensorShape::new(1, 3, h, w))?;
    let row = ResultRow {
        model: model.id(),
        resolution: (h, w),
        gflops: cost.gflops(),
        params: cost.totals.params,
        metrics: Some(report.clone()),
        ms_per_frame: None,
    };
    let metrics_path = cfg.out.join("metrics.csv");
    let summary_path = cfg.out.join("summary.csv");
    write(&metrics_path, &report.to_csv(&model.id()))?;
    write(&summary_path, &row.to_csv())?;
    Ok(EvalOutput {
        report,
        row,
        metrics_path,
        summary_path,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub model: String,
    pub resolution: (usize, usize),
    pub warmup: usize,
    /// Wall-clock milliseconds of each timed run.
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    /// Sample standard deviation; zero for a single run.
    pub stdev_ms: f64,
    pub fps: f64,
}

impl BenchmarkReport {
    pub fn from_samples(model: String, resolution: (usize, usize), warmup: usize, samples_ms: Vec<f64>) -> Self {
        let n = samples_ms.len() as f64;
        let mean_ms = samples_ms.iter().sum::<f64>() / n;
        let stdev_ms = if samples_ms.len() > 1 {
            (samples_ms.iter().map(|s| (s - mean_ms).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            model,
            resolution,
            warmup,
            samples_ms,
            mean_ms,
            stdev_ms,
            fps: 1000.0 / mean_ms,
        }
    }

    pub fn samples_csv(&self) -> String {
        let mut s = String::from("run,ms_per_frame\n");
        for (i, ms) in self.samples_ms.iter().enumerate() {
            s.push_str(&format!("{},{ms:.6}\n", i + 1));
        }
        s
    }

    pub fn markdown(&self) -> String {
        format!(
            "# Inference timing: {} at {}x{}\n\n\
             Hardware-dependent measurement; not comparable across machines.\n\n\
             - warmup runs: {}\n- timed runs: {}\n- ms/frame: {:.3} +- {:.3}\n- frames/s: {:.3}\n- version: `{}`\n",
            self.model,
            self.resolution.0,
            self.resolution.1,
            self.warmup,
            self.samples_ms.len(),
            self.mean_ms,
            self.stdev_ms,
            self.fps,
            crate::report::version()
        )
    }
}

pub fn benchmark(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<BenchmarkReport> {
    cfg.validate_for_execution()?;
    if cfg.benchmark_runs == 0 {
        return Err(CliError::Usage("benchmark needs at least one timed run".into()));
    }
    let model = build_configured_model(cfg)?;
    let params = match checkpoint {
        Some(dir) => load_model_state(dir, &model)?.params,
        None => ModelParams::for_model(&model, cfg.seed)?,
    };
    let (h, w) = cfg.data.resolution;
    let input = [Tensor::filled(&[1, 3, h, w], 0.5)];
    let ex = Executor::new(&model.graph)?;
    for _ in 0..cfg.benchmark_warmup {
        ex.infer(&params, &input)?;
    }
    let mut samples = Vec::with_capacity(cfg.benchmark_runs);
    for _ in 0..cfg.benchmark_runs {
        let t = Instant::now();
        ex.infer(&params, &input)?;
        samples.push(t.elapsed().as_secs_f64() * 1000.0);
    }
    let report = BenchmarkReport::from_samples(model.id(), (h, w), cfg.benchmark_warmup, samples);
    write(&cfg.out.join("benchmark.csv"), &report.samples_csv())?;
    write(&cfg.out.join("benchmark.md"), &report.markdown())?;
    Ok(report)
}
