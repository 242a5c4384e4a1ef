//! Subcommand bodies behind the `crossinput` binary.
//!
//! Configuration is one JSON object with flat, dot-namespaced keys such as
//! `simulator.seed` or `train.model.spatial_scale`. File values are applied
//! first, then `--seed`, then `--set key=value` overrides. Unknown keys are
//! rejected. Every output directory receives the effective configuration as
//! `effective_config.json`.

use crate::datamodel::{self, FormatError, FrameDetections, Track};
use crate::inference::{self, InferenceConfig};
use crate::metrics::{self, EvalReport};
use crate::model::{ModelError, ModelParams};
use crate::simulator::{self, WorldConfig};
use crate::trainer::{TrainConfig, TrainError, Trainer};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";
pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed config: {0}")]
    Config(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("cannot parse {path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("no sequences found under {0}")]
    EmptyCorpus(PathBuf),
    #[error("cannot read checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: ModelError },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Inference(#[from] inference::InferenceError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Simulation(#[from] simulator::SimError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path.to_path_buf())
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_sequences: usize,
    pub num_frames: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_sequences: 100,
            num_frames: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub iou_threshold: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub iou_threshold: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            iou_threshold: metrics::DEFAULT_IOU_THRESHOLD,
        }
    }
}

/// Every configurable value of every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub simulator: WorldConfig,
    pub train: TrainConfig,
    pub infer: InferenceConfig,
    pub baseline: BaselineConfig,
    pub evaluate: EvaluateConfig,
}

fn flatten_into(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), value.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("flattened keys never nest under a leaf");
            }
        }
    }
    Value::Object(root)
}

impl RunConfig {
    /// Flat `key → value` view of the configuration.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten_into(
            "",
            &serde_json::to_value(self).expect("config serializes"),
            &mut out,
        );
        out
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        serde_json::from_value(unflatten(flat)).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Applies `updates` on top of `self`, rejecting keys the configuration
    /// does not have.
    pub fn with_updates(&self, updates: &BTreeMap<String, Value>) -> Result<Self> {
        let mut flat = self.to_flat();
        for (key, value) in updates {
            let slot = flat
                .get_mut(key)
                .ok_or_else(|| CliError::UnknownKey(key.clone()))?;
            *slot = value.clone();
        }
        Self::from_flat(&flat)
    }

    /// Builds the effective configuration from an optional JSON file, an
    /// optional seed applied to every component, and `key=value` overrides.
    pub fn load(path: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<Self> {
        let mut config = RunConfig::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let Value::Object(map) = value else {
                return Err(CliError::Config(format!(
                    "{}: expected a JSON object",
                    path.display()
                )));
            };
            config = config.with_updates(&map.into_iter().collect())?;
        }
        if let Some(seed) = seed {
            config.simulator.seed = seed;
            config.train.seed = seed;
            config.infer.seed = seed;
        }
        let mut updates = BTreeMap::new();
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
            let value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            updates.insert(key.trim().to_string(), value);
        }
        config.with_updates(&updates)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("config serializes")
    }

    /// Writes `effective_config.json` into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        let path = dir.join(EFFECTIVE_CONFIG);
        fs::write(&path, self.to_json()).map_err(io_err(&path))
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    ensure_dir(&parent_dir(path))?;
    fs::write(path, text).map_err(io_err(path))
}

/// Generates `corpus.num_sequences` sequences into `out_dir/seq_XXXX/`,
/// each with `det.txt` (appearance after the tenth column) and `gt.txt`.
pub fn simulate(config: &RunConfig, out_dir: &Path) -> Result<usize> {
    ensure_dir(out_dir)?;
    let sims = simulator::generate_many(
        &config.simulator,
        config.corpus.num_sequences,
        config.corpus.num_frames,
    )?;
    for (i, sim) in sims.iter().enumerate() {
        let dir = out_dir.join(format!("seq_{i:04}"));
        ensure_dir(&dir)?;
        write_file(
            &dir.join("det.txt"),
            &datamodel::write_mot_detections(&sim.frames),
        )?;
        write_file(
            &dir.join("gt.txt"),
            &datamodel::write_mot_ground_truth(&sim.ground_truth.frames),
        )?;
    }
    config.echo_into(out_dir)?;
    Ok(sims.len())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

/// Reads a detection file whose appearance width must be `appearance_dim`.
pub fn read_detections(path: &Path, appearance_dim: usize) -> Result<Vec<FrameDetections>> {
    datamodel::read_mot_detections(open(path)?, appearance_dim).map_err(|source| match source {
        FormatError::AppearanceLength {
            line,
            expected,
            found,
        } => CliError::Dimension(format!(
            "{} line {line}: appearance has {found} values, model expects {expected}",
            path.display()
        )),
        source => CliError::Format {
            path: path.to_path_buf(),
            source,
        },
    })
}

/// Reads a detection file, taking the appearance width from its first
/// record.
pub fn read_detections_any(path: &Path) -> Result<Vec<FrameDetections>> {
    let records = datamodel::read_mot_records(open(path)?).map_err(|source| CliError::Format {
        path: path.to_path_buf(),
        source,
    })?;
    let k = records.first().map_or(0, |r| r.extra.len());
    read_detections(path, k)
}

pub fn read_tracks(path: &Path) -> Result<Vec<Track>> {
    datamodel::read_mot_tracks(open(path)?).map_err(|source| CliError::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Sequence directories (`seq_*` holding `det.txt`) under `dir`, sorted.
pub fn sequence_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.join("det.txt").is_file() {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::EmptyCorpus(dir.to_path_buf()));
    }
    Ok(out)
}

/// Loads every `det.txt` under `dir` into an unlabeled corpus. Ground-truth
/// files are never opened.
pub fn load_corpus(dir: &Path, appearance_dim: usize) -> Result<datamodel::Corpus> {
    let seqs = sequence_dirs(dir)?
        .iter()
        .map(|d| read_detections(&d.join("det.txt"), appearance_dim))
        .collect::<Result<Vec<_>>>()?;
    Ok(datamodel::Corpus::new(seqs))
}

/// Trains on `corpus_dir`, writing the checkpoint after every held-out
/// evaluation and at the end. The step log goes next to the checkpoint.
pub fn train(
    config: &RunConfig,
    corpus_dir: &Path,
    checkpoint: &Path,
    heldout_dir: Option<&Path>,
) -> Result<Trainer> {
    let k = config.train.model.appearance_dim;
    let corpus = load_corpus(corpus_dir, k)?;
    let heldout = heldout_dir.map(|d| load_corpus(d, k)).transpose()?;
    let out_dir = parent_dir(checkpoint);
    ensure_dir(&out_dir)?;
    config.echo_into(&out_dir)?;
    let log_path = out_dir.join(TRAIN_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let mut trainer = Trainer::new(config.train.clone(), &corpus, heldout.as_ref())?;
    trainer.run(&corpus, &mut log, |t| {
        let e = t.evaluations.last().expect("called after an evaluation");
        log::info!(
            "step {}: held-out loss {:.4}, lr {}",
            e.step,
            e.heldout_loss,
            e.lr
        );
        t.params.save(checkpoint).map_err(TrainError::from)
    })?;
    log.flush().map_err(io_err(&log_path))?;
    trainer
        .params
        .save(checkpoint)
        .map_err(|source| CliError::Checkpoint {
            path: checkpoint.to_path_buf(),
            source,
        })?;
    Ok(trainer)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    if !path.is_file() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    ModelParams::load(path).map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

/// Tracks one detection file with a checkpoint, or with the IoU baseline
/// when `checkpoint` is `None`.
pub fn track(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    det: &Path,
    result: &Path,
) -> Result<Vec<Track>> {
    let tracks = match checkpoint {
        Some(ckpt) => {
            let params = load_checkpoint(ckpt)?;
            let frames = read_detections(det, params.config.appearance_dim)?;
            inference::track_sequence(&params, &frames, &config.infer)?
        }
        None => inference::iou_baseline(&read_detections_any(det)?, config.baseline.iou_threshold),
    };
    write_file(result, &datamodel::write_mot_tracks(&tracks))?;
    config.echo_into(&parent_dir(result))?;
    Ok(tracks)
}

/// Ground truth as per-frame `(id, box)` lists.
pub fn ground_truth_frames(gt: &[Track]) -> Vec<Vec<(u64, datamodel::BBox)>> {
    let frames = gt
        .iter()
        .filter_map(|t| t.last_frame())
        .max()
        .map_or(0, |f| f + 1);
    metrics::tracks_to_frames(gt, frames).expect("range covers every entry")
}

/// Scores a result file against a ground-truth file and writes the CSV
/// report.
pub fn evaluate(config: &RunConfig, result: &Path, gt: &Path, report: &Path) -> Result<EvalReport> {
    let pred = read_tracks(result)?;
    let gt_frames = ground_truth_frames(&read_tracks(gt)?);
    let name = result.file_stem().map_or_else(
        || "result".to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    let report_data =
        metrics::evaluate_many(&[(name, pred, gt_frames)], config.evaluate.iou_threshold)?;
    write_file(report, &report_data.to_csv())?;
    config.echo_into(&parent_dir(report))?;
    Ok(report_data)
}

fn color(id: u64) -> String {
    let hue = (id as f64 * 137.508) % 360.0;
    format!("hsl({hue:.0},70%,45%)")
}

fn polyline(points: &[(f64, f64)]) -> String {
    points
        .iter()
        .map(|(x, y)| format!("{x:.1},{y:.1}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Static SVG of box-center trajectories: predicted tracks solid and
/// colored by id, ground truth dashed grey.
pub fn render_svg(pred: &[Track], gt: &[Track]) -> String {
    let (mut w, mut h) = (1.0f64, 1.0f64);
    for t in pred.iter().chain(gt) {
        for e in &t.entries {
            w = w.max(e.bbox.right());
            h = h.max(e.bbox.bottom());
        }
    }
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">
<rect width="100%" height="100%" fill="white"/>"#
    )
    .expect("write to string");
    let centers = |t: &Track| {
        t.entries
            .iter()
            .map(|e| (e.bbox.x, e.bbox.y))
            .collect::<Vec<_>>()
    };
    writeln!(svg, r#"<g id="ground-truth" fill="none" stroke="grey" stroke-width="1.5" stroke-dasharray="6 4">"#)
        .expect("write to string");
    for t in gt {
        writeln!(
            svg,
            r#"<polyline data-id="{}" points="{}"/>"#,
            t.id,
            polyline(&centers(t))
        )
        .expect("write to string");
    }
    writeln!(
        svg,
        "</g>\n<g id=\"tracks\" fill=\"none\" stroke-width=\"2\">"
    )
    .expect("write to string");
    for t in pred {
        writeln!(
            svg,
            r#"<polyline data-id="{}" stroke="{}" points="{}"/>"#,
            t.id,
            color(t.id),
            polyline(&centers(t))
        )
        .expect("write to string");
    }
    svg.push_str("</g>\n</svg>\n");
    svg
}

pub fn plot(config: &RunConfig, result: &Path, gt: &Path, svg: &Path) -> Result<()> {
    let pred = read_tracks(result)?;
    let gt = read_tracks(gt)?;
    write_file(svg, &render_svg(&pred, &gt))?;
    config.echo_into(&parent_dir(svg))
}
