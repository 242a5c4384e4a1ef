//! Self-supervised training loop. Each step cuts one window from the
//! unlabeled corpus, builds its two input variations and applies one Adam
//! update on the cross-input consistency loss.

use crate::consistency::{
    self, ConsistencyError, HidingPlan, OcclusionPlanConfig, RolloutConfig, Scheme,
};
use crate::datamodel::{BBox, Corpus, FrameDetections, SequenceSample};
use crate::diffcore::Tape;
use crate::inference::{self, InferenceConfig, InferenceError};
use crate::metrics::{self, EvalReport, MetricsError};
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::simulator::{self, SimError};
use crate::transition::Normalization;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no usable training window after {0} attempts")]
    NoUsableSample(usize),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub n_min: usize,
    pub n_max: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    /// Multiplier applied to the rate when the held-out loss plateaus.
    pub decay_factor: f64,
    /// Evaluations without improvement before decaying.
    pub patience: usize,
    pub eval_interval: usize,
    /// Fixed windows scored at each evaluation.
    pub heldout_windows: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub artificial_detections: bool,
    pub spatial_mask: bool,
    /// Minimum temporal distance of artificial-detection templates;
    /// `None` means five times `n_max`.
    pub t_far: Option<usize>,
    pub normalization: Normalization,
    pub intermediate_threshold: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub occlusion: OcclusionPlanConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::VisualSpatial,
            n_min: 4,
            n_max: 16,
            learning_rate: 1e-4,
            min_learning_rate: 1e-5,
            decay_factor: 0.1,
            patience: 3,
            eval_interval: 500,
            heldout_windows: 50,
            max_steps: 10_000,
            seed: 0,
            artificial_detections: true,
            spatial_mask: true,
            t_far: None,
            normalization: Normalization::RowColumnMin,
            intermediate_threshold: 0.0,
            grad_clip: None,
            occlusion: OcclusionPlanConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.n_min < 1 || self.n_min > self.n_max {
            return bad("need 1 <= n_min <= n_max");
        }
        if self.scheme == Scheme::Occlusion && self.n_min < 2 {
            return bad("occlusion scheme needs n_min >= 2");
        }
        if !(self.learning_rate > 0.0 && self.min_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive");
        }
        if self.occlusion.windows_min == 0 || self.occlusion.window_len_min == 0 {
            return bad("occlusion windows must be non-empty");
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return bad("grad_clip must be positive");
            }
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn t_far(&self) -> usize {
        self.t_far.unwrap_or(5 * self.n_max)
    }

    fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            normalization: self.normalization,
            intermediate_threshold: self.intermediate_threshold,
        }
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter length");
        assert_eq!(grad.len(), self.m.len(), "gradient length");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Decays the rate once an evaluation metric (lower is better) has failed
/// to improve `patience` times in a row.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub min_lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad_evals: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, min_lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            min_lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_evals: 0,
        }
    }

    /// Records one evaluation; returns true when the rate was decayed.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.bad_evals = 0;
            return false;
        }
        self.bad_evals += 1;
        if self.bad_evals >= self.patience && self.lr > self.min_lr {
            self.lr = (self.lr * self.factor).max(self.min_lr);
            self.bad_evals = 0;
            return true;
        }
        false
    }
}

/// A window with its hiding plan, ready for the loss.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample: SequenceSample,
    pub plan: HidingPlan,
}

const SAMPLE_ATTEMPTS: usize = 1000;

/// Draws a window and plan. Windows whose first or last frame is empty, or
/// that admit no valid plan, are redrawn.
pub fn prepare_sample(
    corpus: &Corpus,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<PreparedSample> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    for _ in 0..SAMPLE_ATTEMPTS {
        let sample = simulator::sample_training_sequence(corpus, config.n_min, config.n_max, rng)?;
        if sample.last().is_empty() {
            continue;
        }
        let plan = match HidingPlan::sample(config.scheme, &sample, &config.occlusion, rng) {
            Ok(p) => p,
            Err(ConsistencyError::Plan(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        let sample = if config.artificial_detections {
            consistency::add_artificial_detections(&sample, corpus, config.t_far(), rng)
        } else {
            sample
        };
        return Ok(PreparedSample { sample, plan });
    }
    Err(TrainError::NoUsableSample(SAMPLE_ATTEMPTS))
}

/// Loss and flat gradient for one prepared sample.
pub fn loss_and_gradient(
    params: &ModelParams,
    prepared: &PreparedSample,
    config: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape, true);
    let graph = consistency::example_graph(
        &mut tape,
        &bp,
        &prepared.sample,
        &prepared.plan,
        config.rollout(),
        config.spatial_mask,
    )?;
    let loss = tape.value(graph.loss)[[0, 0]];
    let grads = tape.backward(graph.loss).expect("loss is a scalar");
    Ok((loss, bp.flat_gradient(&tape, &grads)))
}

/// Loss of one prepared sample without gradients.
pub fn sample_loss(
    params: &ModelParams,
    prepared: &PreparedSample,
    config: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape, false);
    let graph = consistency::example_graph(
        &mut tape,
        &bp,
        &prepared.sample,
        &prepared.plan,
        config.rollout(),
        config.spatial_mask,
    )?;
    Ok(tape.value(graph.loss)[[0, 0]])
}

fn clip(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// One sample, one Adam update. Returns the loss before the update.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut Adam,
    lr: f64,
    corpus: &Corpus,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let prepared = prepare_sample(corpus, config, rng)?;
    let (loss, mut grad) = loss_and_gradient(params, &prepared, config)?;
    if let Some(c) = config.grad_clip {
        clip(&mut grad, c);
    }
    let mut flat = params.to_flat();
    opt.step(&mut flat, &grad, lr);
    params.set_flat(&flat)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub heldout_loss: f64,
    pub lr: f64,
}

/// Training state: parameters, optimizer, schedule and held-out windows.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub opt: Adam,
    pub scheduler: PlateauScheduler,
    pub step: usize,
    pub history: Vec<StepRecord>,
    pub evaluations: Vec<EvalRecord>,
    rng: ChaCha8Rng,
    heldout: Vec<PreparedSample>,
}

impl Trainer {
    /// Held-out windows come from `heldout` when given, otherwise from the
    /// training corpus with an independent stream.
    pub fn new(config: TrainConfig, corpus: &Corpus, heldout: Option<&Corpus>) -> Result<Self> {
        config.validate()?;
        if let Some(k) = corpus.appearance_dim() {
            if k != config.model.appearance_dim {
                return Err(ModelError::AppearanceDim {
                    expected: config.model.appearance_dim,
                    found: k,
                }
                .into());
            }
        }
        let params = ModelParams::new(config.model.clone(), config.seed);
        let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005E_ED0F_4E1D);
        let source = heldout.unwrap_or(corpus);
        let heldout = (0..config.heldout_windows)
            .map(|_| prepare_sample(source, &config, &mut eval_rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            opt: Adam::new(params.num_params()),
            scheduler: PlateauScheduler::new(
                config.learning_rate,
                config.min_learning_rate,
                config.decay_factor,
                config.patience,
            ),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params,
            config,
            step: 0,
            history: Vec::new(),
            evaluations: Vec::new(),
            heldout,
        })
    }

    pub fn heldout_loss(&self) -> Result<f64> {
        if self.heldout.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for p in &self.heldout {
            total += sample_loss(&self.params, p, &self.config)?;
        }
        Ok(total / self.heldout.len() as f64)
    }

    /// One update; every `eval_interval` steps also scores the held-out
    /// windows and lets the scheduler decay the rate.
    pub fn step_once(&mut self, corpus: &Corpus) -> Result<StepRecord> {
        let lr = self.scheduler.lr;
        let loss = train_step(
            &mut self.params,
            &mut self.opt,
            lr,
            corpus,
            &self.config,
            &mut self.rng,
        )?;
        self.step += 1;
        let record = StepRecord {
            step: self.step,
            loss,
            lr,
        };
        self.history.push(record);
        if self.step.is_multiple_of(self.config.eval_interval) {
            let heldout_loss = self.heldout_loss()?;
            if self.scheduler.observe(heldout_loss) {
                log::info!(
                    "step {}: learning rate decayed to {}",
                    self.step,
                    self.scheduler.lr
                );
            }
            self.evaluations.push(EvalRecord {
                step: self.step,
                heldout_loss,
                lr: self.scheduler.lr,
            });
        }
        Ok(record)
    }

    /// Trains for `max_steps`, writing one CSV line per step to `log`.
    /// `on_eval` runs after every held-out evaluation.
    pub fn run(
        &mut self,
        corpus: &Corpus,
        log: &mut dyn Write,
        mut on_eval: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        if self.step == 0 {
            writeln!(log, "step,loss,lr")?;
        }
        while self.step < self.config.max_steps {
            let r = self.step_once(corpus)?;
            writeln!(log, "{},{},{}", r.step, r.loss, r.lr)?;
            if r.step % self.config.eval_interval == 0 {
                on_eval(self)?;
            }
        }
        Ok(())
    }
}

/// Tracks every held-out sequence with `params` and scores the result.
pub fn evaluate_checkpoint(
    params: &ModelParams,
    sequences: &[Vec<FrameDetections>],
    ground_truth: &[Vec<Vec<(u64, BBox)>>],
    config: &InferenceConfig,
) -> Result<EvalReport> {
    use rayon::prelude::*;
    if sequences.len() != ground_truth.len() {
        return Err(MetricsError::SequenceCount {
            predicted: sequences.len(),
            ground_truth: ground_truth.len(),
        }
        .into());
    }
    let runs = sequences
        .par_iter()
        .zip(ground_truth)
        .enumerate()
        .map(|(i, (frames, gt))| {
            inference::track_sequence(params, frames, config)
                .map(|t| (format!("seq_{i:04}"), t, gt.clone()))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(metrics::evaluate_many(
        &runs,
        metrics::DEFAULT_IOU_THRESHOLD,
    )?)
}
