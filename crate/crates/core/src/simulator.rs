//! Synthetic detection sequences with held-out ground truth.
//!
//! Objects move with noisy constant velocity and reflect off the frame
//! border. Each object carries an appearance signature; every observation is
//! the signature plus Gaussian noise. Occlusion events hide an object for a
//! contiguous window, the detector misses visible objects at a fixed rate and
//! emits false positives with random appearance.

use crate::datamodel::{BBox, Corpus, Detection, FrameDetections, SequenceSample, SourceId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("corpus has no sequence with at least {needed} frames")]
    CorpusTooShort { needed: usize },
    #[error("no window with a non-empty first frame after {0} attempts")]
    NoUsableWindow(usize),
    #[error("n_min ({n_min}) must be >= 1 and <= n_max ({n_max})")]
    BadLengthRange { n_min: usize, n_max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub frame_width: f64,
    pub frame_height: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability per frame of spawning one extra object while below
    /// `max_objects`.
    pub spawn_rate: f64,
    /// Mean object lifetime in frames; the per-frame despawn probability is
    /// its reciprocal.
    pub mean_lifetime: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub velocity_noise_std: f64,
    pub box_width_min: f64,
    pub box_width_max: f64,
    pub box_height_min: f64,
    pub box_height_max: f64,
    pub appearance_dim: usize,
    pub signature_std: f64,
    /// When non-zero, signatures are drawn around this many shared prototypes,
    /// making objects visually similar.
    pub appearance_prototypes: usize,
    pub prototype_spread: f64,
    pub appearance_noise_std: f64,
    pub miss_rate: f64,
    pub false_positive_rate: f64,
    pub box_jitter_std: f64,
    /// Per-object, per-frame probability that an occlusion starts.
    pub occlusion_rate: f64,
    pub occlusion_min_frames: usize,
    pub occlusion_max_frames: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frame_width: 640.0,
            frame_height: 480.0,
            min_objects: 4,
            max_objects: 8,
            spawn_rate: 0.2,
            mean_lifetime: 32.0,
            speed_min: 1.0,
            speed_max: 4.0,
            velocity_noise_std: 0.2,
            box_width_min: 30.0,
            box_width_max: 50.0,
            box_height_min: 60.0,
            box_height_max: 100.0,
            appearance_dim: 16,
            signature_std: 1.0,
            appearance_prototypes: 0,
            prototype_spread: 0.3,
            appearance_noise_std: 0.3,
            miss_rate: 0.05,
            false_positive_rate: 0.1,
            box_jitter_std: 1.0,
            occlusion_rate: 0.02,
            occlusion_min_frames: 1,
            occlusion_max_frames: 10,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        for (name, rate) in [
            ("spawn_rate", self.spawn_rate),
            ("miss_rate", self.miss_rate),
            ("false_positive_rate", self.false_positive_rate),
            ("occlusion_rate", self.occlusion_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.frame_width > 0.0 && self.frame_height > 0.0) {
            return bad("frame size must be positive");
        }
        if self.mean_lifetime.is_nan() || self.mean_lifetime <= 0.0 {
            return bad("mean_lifetime must be positive");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if self.speed_min > self.speed_max
            || self.box_width_min > self.box_width_max
            || self.box_height_min > self.box_height_max
            || self.occlusion_min_frames > self.occlusion_max_frames
        {
            return bad("range lower bound exceeds upper bound");
        }
        if self.occlusion_min_frames == 0 {
            return bad("occlusion_min_frames must be >= 1");
        }
        for (name, v) in [
            ("velocity_noise_std", self.velocity_noise_std),
            ("signature_std", self.signature_std),
            ("prototype_spread", self.prototype_spread),
            ("appearance_noise_std", self.appearance_noise_std),
            ("box_jitter_std", self.box_jitter_std),
        ] {
            if v.is_nan() || v < 0.0 {
                return bad(&format!("{name} must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Labels the trainer never sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GroundTruth {
    /// Visible objects per frame as `(object id, true box)`.
    pub frames: Vec<Vec<(u64, BBox)>>,
    /// Object id of every detection, `None` for false positives.
    pub detection_labels: Vec<Vec<Option<u64>>>,
}

impl GroundTruth {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn total_objects(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionEvent {
    pub object_id: u64,
    /// First occluded frame.
    pub start: usize,
    /// Last occluded frame, inclusive (may exceed the sequence length).
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub frames: Vec<FrameDetections>,
    pub ground_truth: GroundTruth,
    pub occlusions: Vec<OcclusionEvent>,
}

#[derive(Debug, Clone)]
struct Object {
    id: u64,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
    signature: Vec<f64>,
    occluded_through: Option<usize>,
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("std validated non-negative")
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Generates one synthetic sequence. Deterministic in `config.seed`.
pub fn generate(config: &WorldConfig, num_frames: usize) -> Result<Simulation, SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.appearance_dim;
    let sig_dist = normal(config.signature_std);
    let prototypes: Vec<Vec<f64>> = (0..config.appearance_prototypes)
        .map(|_| (0..k).map(|_| sig_dist.sample(&mut rng)).collect())
        .collect();
    let despawn_p = (1.0 / config.mean_lifetime).min(1.0);
    let vel_noise = normal(config.velocity_noise_std);
    let app_noise = normal(config.appearance_noise_std);
    let jitter = normal(config.box_jitter_std);
    let spread = normal(config.prototype_spread);

    let (fw, fh) = (config.frame_width, config.frame_height);
    let mut next_id = 1u64;
    let mut spawn = |rng: &mut ChaCha8Rng| -> Object {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let speed = uniform(rng, config.speed_min, config.speed_max);
        let signature = if prototypes.is_empty() {
            (0..k).map(|_| sig_dist.sample(rng)).collect()
        } else {
            let p = &prototypes[rng.random_range(0..prototypes.len())];
            p.iter().map(|v| v + spread.sample(rng)).collect()
        };
        let obj = Object {
            id: next_id,
            x: uniform(rng, 0.0, fw),
            y: uniform(rng, 0.0, fh),
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            w: uniform(rng, config.box_width_min, config.box_width_max),
            h: uniform(rng, config.box_height_min, config.box_height_max),
            signature,
            occluded_through: None,
        };
        next_id += 1;
        obj
    };

    let mut objects: Vec<Object> = Vec::new();
    let initial = if config.max_objects > config.min_objects {
        rng.random_range(config.min_objects..=config.max_objects)
    } else {
        config.min_objects
    };
    for _ in 0..initial {
        let o = spawn(&mut rng);
        objects.push(o);
    }

    let mut frames = Vec::with_capacity(num_frames);
    let mut gt = GroundTruth::default();
    let mut occlusions = Vec::new();

    for f in 0..num_frames {
        if f > 0 {
            objects.retain(|_| rng.random::<f64>() >= despawn_p);
            for o in &mut objects {
                o.vx += vel_noise.sample(&mut rng);
                o.vy += vel_noise.sample(&mut rng);
                let speed = o.vx.hypot(o.vy);
                if speed > config.speed_max && speed > 0.0 {
                    o.vx *= config.speed_max / speed;
                    o.vy *= config.speed_max / speed;
                }
                o.x += o.vx;
                o.y += o.vy;
                reflect(&mut o.x, &mut o.vx, fw);
                reflect(&mut o.y, &mut o.vy, fh);
            }
            while objects.len() < config.min_objects {
                let o = spawn(&mut rng);
                objects.push(o);
            }
            if objects.len() < config.max_objects && rng.random::<f64>() < config.spawn_rate {
                let o = spawn(&mut rng);
                objects.push(o);
            }
        }

        let mut dets: Vec<(Detection, Option<u64>)> = Vec::new();
        let mut visible = Vec::new();
        for o in &mut objects {
            if o.occluded_through.is_some_and(|end| f > end) {
                o.occluded_through = None;
            }
            if o.occluded_through.is_none() && rng.random::<f64>() < config.occlusion_rate {
                let len =
                    rng.random_range(config.occlusion_min_frames..=config.occlusion_max_frames);
                let end = f + len - 1;
                o.occluded_through = Some(end);
                occlusions.push(OcclusionEvent {
                    object_id: o.id,
                    start: f,
                    end,
                });
            }
            if o.occluded_through.is_some() {
                continue;
            }
            let truth = BBox::new(o.x, o.y, o.w, o.h);
            visible.push((o.id, truth));
            if rng.random::<f64>() < config.miss_rate {
                continue;
            }
            let bbox = BBox::new(
                (o.x + jitter.sample(&mut rng)).clamp(0.0, fw),
                (o.y + jitter.sample(&mut rng)).clamp(0.0, fh),
                (o.w + jitter.sample(&mut rng)).max(1.0),
                (o.h + jitter.sample(&mut rng)).max(1.0),
            );
            let appearance = o
                .signature
                .iter()
                .map(|s| s + app_noise.sample(&mut rng))
                .collect();
            dets.push((Detection::new(f, bbox, appearance), Some(o.id)));
        }
        if rng.random::<f64>() < config.false_positive_rate {
            let bbox = BBox::new(
                uniform(&mut rng, 0.0, fw),
                uniform(&mut rng, 0.0, fh),
                uniform(&mut rng, config.box_width_min, config.box_width_max),
                uniform(&mut rng, config.box_height_min, config.box_height_max),
            );
            let appearance = (0..k).map(|_| sig_dist.sample(&mut rng)).collect();
            dets.push((Detection::new(f, bbox, appearance), None));
        }
        dets.shuffle(&mut rng);
        let (mut detections, labels): (Vec<Detection>, Vec<Option<u64>>) = dets.into_iter().unzip();
        for (i, d) in detections.iter_mut().enumerate() {
            d.source_id = SourceId {
                sequence: 0,
                frame: f,
                index: i,
            };
        }
        frames.push(FrameDetections::new(f, detections));
        gt.frames.push(visible);
        gt.detection_labels.push(labels);
    }

    Ok(Simulation {
        frames,
        ground_truth: gt,
        occlusions,
    })
}

fn reflect(pos: &mut f64, vel: &mut f64, limit: f64) {
    if *pos < 0.0 {
        *pos = -*pos;
        *vel = -*vel;
    }
    if *pos > limit {
        *pos = 2.0 * limit - *pos;
        *vel = -*vel;
    }
    *pos = pos.clamp(0.0, limit);
}

/// Seed of the `index`-th sequence of a corpus generated from `base`.
pub fn sequence_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index as u64)
}

/// Generates `count` independent sequences with derived seeds, in parallel.
pub fn generate_many(
    config: &WorldConfig,
    count: usize,
    num_frames: usize,
) -> Result<Vec<Simulation>, SimError> {
    use rayon::prelude::*;
    config.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let cfg = WorldConfig {
                seed: sequence_seed(config.seed, i),
                ..config.clone()
            };
            generate(&cfg, num_frames)
        })
        .collect()
}

/// Splits simulations into an unlabeled corpus and the matching labels.
pub fn into_corpus(sims: Vec<Simulation>) -> (Corpus, Vec<GroundTruth>) {
    let (frames, gts): (Vec<_>, Vec<_>) =
        sims.into_iter().map(|s| (s.frames, s.ground_truth)).unzip();
    (Corpus::new(frames), gts)
}

const MAX_WINDOW_ATTEMPTS: usize = 100_000;

/// Cuts a random window of `n + 1` frames, `n` uniform in `[n_min, n_max]`,
/// resampling until the first frame holds at least one detection.
pub fn sample_training_sequence(
    corpus: &Corpus,
    n_min: usize,
    n_max: usize,
    rng: &mut impl Rng,
) -> Result<SequenceSample, SimError> {
    if n_min < 1 || n_min > n_max {
        return Err(SimError::BadLengthRange { n_min, n_max });
    }
    let eligible: Vec<usize> = (0..corpus.len())
        .filter(|&s| corpus.sequences[s].len() > n_max)
        .collect();
    if eligible.is_empty() {
        return Err(SimError::CorpusTooShort { needed: n_max + 1 });
    }
    for _ in 0..MAX_WINDOW_ATTEMPTS {
        let seq = eligible[rng.random_range(0..eligible.len())];
        let n = rng.random_range(n_min..=n_max);
        let frames = &corpus.sequences[seq];
        let start = rng.random_range(0..frames.len() - n);
        if frames[start].is_empty() {
            continue;
        }
        return Ok(SequenceSample::new(
            frames[start..=start + n].to_vec(),
            seq,
            start,
        ));
    }
    Err(SimError::NoUsableWindow(MAX_WINDOW_ATTEMPTS))
}
