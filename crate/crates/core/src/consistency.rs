//! Cross-input consistency: two variations of one detection window are
//! tracked independently and the model is rewarded when their first-to-last
//! frame transition matrices agree.
//!
//! Two hiding schemes produce the variations. Visual-spatial hiding gives one
//! tracker boxes only and the other appearance only; the appearance-only
//! tracker has no recurrence and compares first- and last-frame detections
//! directly. Occlusion hiding drops every detection in different intermediate
//! frames for each variation and splits the rollout at a hand-off frame,
//! chaining the two halves by a matrix product.

use crate::datamodel::{Corpus, Detection, FrameDetections, SequenceSample};
use crate::diffcore::{self, Matrix, Tape, Var};
use crate::model::{BoundParams, Hide, ModelError};
use crate::transition::{self, Normalization};
use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

/// Added inside the logarithm of every row term.
pub const LOSS_EPSILON: f64 = 1e-8;
/// How many preceding frames the mask floodfill looks back.
pub const MASK_LOOKBACK: usize = 10;

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("first frame of the rollout has no detections")]
    EmptyFirstFrame,
    #[error("final frame of the rollout has no detections")]
    EmptyFinalFrame,
    #[error("matrices have shapes {a:?} and {b:?}, mask {mask:?}")]
    ShapeMismatch {
        a: (usize, usize),
        b: (usize, usize),
        mask: (usize, usize),
    },
    #[error("cannot build hiding plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
}

pub type Result<T> = std::result::Result<T, ConsistencyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    VisualSpatial,
    Occlusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variation {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HidingPlan {
    /// A sees appearance only, B sees boxes only.
    VisualSpatial,
    Occlusion {
        occluded_a: BTreeSet<usize>,
        occluded_b: BTreeSet<usize>,
        /// Frame where the rollout is split; `None` when the window is too
        /// short to hold one.
        handoff: Option<usize>,
    },
}

/// Occlusion-plan sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionPlanConfig {
    pub windows_min: usize,
    pub windows_max: usize,
    pub window_len_min: usize,
    pub window_len_max: usize,
}

impl Default for OcclusionPlanConfig {
    fn default() -> Self {
        Self {
            windows_min: 1,
            windows_max: 2,
            window_len_min: 1,
            window_len_max: 3,
        }
    }
}

const PLAN_ATTEMPTS: usize = 200;

impl HidingPlan {
    /// Draws a plan for `sample`. For occlusion the hand-off frame is a
    /// non-empty frame in `2..n`, never occluded in either variation.
    pub fn sample(
        scheme: Scheme,
        sample: &SequenceSample,
        cfg: &OcclusionPlanConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        match scheme {
            Scheme::VisualSpatial => Ok(HidingPlan::VisualSpatial),
            Scheme::Occlusion => sample_occlusion_plan(sample, cfg, rng),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if let HidingPlan::Occlusion {
            occluded_a,
            occluded_b,
            handoff,
        } = self
        {
            let inner = |s: &BTreeSet<usize>| s.iter().all(|&k| k > 0 && k < n);
            if !inner(occluded_a) || !inner(occluded_b) {
                return Err(ConsistencyError::Plan(
                    "only intermediate frames may be occluded".into(),
                ));
            }
            if occluded_a == occluded_b {
                return Err(ConsistencyError::Plan(
                    "variations must occlude different frames".into(),
                ));
            }
            if let Some(h) = handoff {
                if !(1 < *h && *h < n) {
                    return Err(ConsistencyError::Plan(format!(
                        "hand-off {h} outside 2..{n}"
                    )));
                }
                if occluded_a.contains(h) || occluded_b.contains(h) {
                    return Err(ConsistencyError::Plan("hand-off frame is occluded".into()));
                }
            }
        }
        Ok(())
    }
}

fn sample_windows(
    n: usize,
    handoff: Option<usize>,
    cfg: &OcclusionPlanConfig,
    rng: &mut impl Rng,
) -> BTreeSet<usize> {
    let mut set = BTreeSet::new();
    let count = rng.random_range(cfg.windows_min..=cfg.windows_max.max(cfg.windows_min));
    for _ in 0..count {
        let len = rng
            .random_range(cfg.window_len_min..=cfg.window_len_max.max(cfg.window_len_min))
            .clamp(1, n - 1);
        let start = rng.random_range(1..=n - len);
        set.extend(start..start + len);
    }
    if let Some(h) = handoff {
        set.remove(&h);
    }
    set
}

fn sample_occlusion_plan(
    sample: &SequenceSample,
    cfg: &OcclusionPlanConfig,
    rng: &mut impl Rng,
) -> Result<HidingPlan> {
    let n = sample.n;
    if n < 2 {
        return Err(ConsistencyError::Plan(format!(
            "window of {n} frames has no intermediate frame"
        )));
    }
    let handoff = if n >= 3 {
        let candidates: Vec<usize> = (2..n).filter(|&k| !sample.frames[k].is_empty()).collect();
        candidates.choose(rng).copied()
    } else {
        None
    };
    for _ in 0..PLAN_ATTEMPTS {
        let a = sample_windows(n, handoff, cfg, rng);
        let b = sample_windows(n, handoff, cfg, rng);
        if a != b {
            return Ok(HidingPlan::Occlusion {
                occluded_a: a,
                occluded_b: b,
                handoff,
            });
        }
    }
    // Too few free frames for two distinct draws: leave B unoccluded.
    let a = sample_windows(n, handoff, cfg, rng);
    if a.is_empty() {
        return Err(ConsistencyError::Plan("no occludable frame".into()));
    }
    Ok(HidingPlan::Occlusion {
        occluded_a: a,
        occluded_b: BTreeSet::new(),
        handoff,
    })
}

/// One input variation: frames with hidden content removed, plus the hiding
/// mode the model should assume when encoding them.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenInput {
    pub frames: Vec<FrameDetections>,
    pub hide: Hide,
}

fn hide_fields(frames: &[FrameDetections], hide: Hide) -> Vec<FrameDetections> {
    frames
        .iter()
        .map(|f| {
            let detections = f
                .detections
                .iter()
                .map(|d| {
                    let mut d = d.clone();
                    match hide {
                        Hide::Spatial => d.bbox = Default::default(),
                        Hide::Appearance => d.appearance.iter_mut().for_each(|a| *a = 0.0),
                        Hide::None => {}
                    }
                    d
                })
                .collect();
            FrameDetections::new(f.frame_index, detections)
        })
        .collect()
}

fn drop_frames(frames: &[FrameDetections], occluded: &BTreeSet<usize>) -> Vec<FrameDetections> {
    frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            if occluded.contains(&k) {
                FrameDetections::empty(f.frame_index)
            } else {
                f.clone()
            }
        })
        .collect()
}

/// Builds the two input variations of `sample` under `plan`.
pub fn apply_hiding(sample: &SequenceSample, plan: &HidingPlan) -> (HiddenInput, HiddenInput) {
    match plan {
        HidingPlan::VisualSpatial => (
            HiddenInput {
                frames: hide_fields(&sample.frames, Hide::Spatial),
                hide: Hide::Spatial,
            },
            HiddenInput {
                frames: hide_fields(&sample.frames, Hide::Appearance),
                hide: Hide::Appearance,
            },
        ),
        HidingPlan::Occlusion {
            occluded_a,
            occluded_b,
            ..
        } => (
            HiddenInput {
                frames: drop_frames(&sample.frames, occluded_a),
                hide: Hide::None,
            },
            HiddenInput {
                frames: drop_frames(&sample.frames, occluded_b),
                hide: Hide::None,
            },
        ),
    }
}

/// Binary feasibility matrix `|D_0| × (|D_n| + 1)`; the last column is exit.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix(pub Matrix);

impl MaskMatrix {
    pub fn all_ones(rows: usize, dets: usize) -> Self {
        Self(Matrix::ones((rows, dets + 1)))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

#[derive(Clone, Debug)]
struct LabelSet(Vec<u64>);

impl LabelSet {
    fn empty(labels: usize) -> Self {
        Self(vec![0; labels.div_ceil(64).max(1)])
    }

    fn singleton(labels: usize, i: usize) -> Self {
        let mut s = Self::empty(labels);
        s.0[i / 64] |= 1 << (i % 64);
        s
    }

    fn union_with(&mut self, other: &LabelSet) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a |= b;
        }
    }

    fn contains(&self, i: usize) -> bool {
        self.0[i / 64] & (1 << (i % 64)) != 0
    }
}

/// Propagates first-frame labels through chains of intersecting boxes up to
/// [`MASK_LOOKBACK`] frames apart. Artificial detections neither receive nor
/// pass on labels, so their columns are zero.
pub fn floodfill_mask(sample: &SequenceSample) -> MaskMatrix {
    floodfill_mask_with(sample, MASK_LOOKBACK)
}

pub fn floodfill_mask_with(sample: &SequenceSample, lookback: usize) -> MaskMatrix {
    let n = sample.n;
    let roots = sample.frames[0].len();
    let mut labels: Vec<Vec<LabelSet>> = Vec::with_capacity(n + 1);
    labels.push((0..roots).map(|i| LabelSet::singleton(roots, i)).collect());
    for k in 1..=n {
        let mut frame_labels = Vec::with_capacity(sample.frames[k].len());
        for d in &sample.frames[k].detections {
            let mut set = LabelSet::empty(roots);
            if !d.is_artificial {
                for l in 1..=lookback.min(k) {
                    for (prev, prev_set) in
                        sample.frames[k - l].detections.iter().zip(&labels[k - l])
                    {
                        if !prev.is_artificial && prev.bbox.intersects(&d.bbox) {
                            set.union_with(prev_set);
                        }
                    }
                }
            }
            frame_labels.push(set);
        }
        labels.push(frame_labels);
    }
    let last = &labels[n];
    let mut c = Matrix::zeros((roots, last.len() + 1));
    for i in 0..roots {
        for (j, set) in last.iter().enumerate() {
            if set.contains(i) {
                c[[i, j]] = 1.0;
            }
        }
        c[[i, last.len()]] = 1.0;
    }
    MaskMatrix(c)
}

/// Appends one artificial detection per real final-frame detection: same
/// box, appearance copied from a detection at least `t_far` frames outside
/// the window or from another corpus sequence. Returns the sample unchanged,
/// with `artificial_skipped` set, when no such template exists.
pub fn add_artificial_detections(
    sample: &SequenceSample,
    corpus: &Corpus,
    t_far: usize,
    rng: &mut impl Rng,
) -> SequenceSample {
    let mut out = sample.clone();
    let window_start = sample.start;
    let window_end = sample.start + sample.n;
    let eligible = |seq: usize, frame: usize| {
        seq != sample.sequence || frame + t_far <= window_start || frame >= window_end + t_far
    };
    let real: Vec<Detection> = out.frames[sample.n]
        .detections
        .iter()
        .filter(|d| !d.is_artificial)
        .cloned()
        .collect();
    let mut made = Vec::with_capacity(real.len());
    for d in &real {
        let Some(template) = pick_template(corpus, &eligible, rng) else {
            out.artificial_skipped = true;
            return out;
        };
        made.push(Detection {
            frame_index: d.frame_index,
            bbox: d.bbox,
            appearance: template.appearance.clone(),
            is_artificial: true,
            source_id: template.source_id,
        });
    }
    out.frames[sample.n].detections.extend(made);
    out
}

fn pick_template<'a>(
    corpus: &'a Corpus,
    eligible: &impl Fn(usize, usize) -> bool,
    rng: &mut impl Rng,
) -> Option<&'a Detection> {
    if corpus.is_empty() {
        return None;
    }
    for _ in 0..256 {
        let s = rng.random_range(0..corpus.len());
        let seq = &corpus.sequences[s];
        if seq.is_empty() {
            continue;
        }
        let f = rng.random_range(0..seq.len());
        if eligible(s, f) {
            if let Some(d) = seq[f].detections.choose(rng) {
                return Some(d);
            }
        }
    }
    let pool: Vec<&Detection> = corpus
        .sequences
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| {
            seq.iter()
                .enumerate()
                .filter(move |(f, _)| eligible(s, *f))
                .flat_map(|(_, fr)| fr.detections.iter())
        })
        .collect();
    pool.choose(rng).copied()
}

/// Discrete-routing settings shared by every rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    pub normalization: Normalization,
    /// Acceptance threshold for intermediate-frame matches.
    pub intermediate_threshold: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            normalization: Normalization::RowColumnMin,
            intermediate_threshold: 0.0,
        }
    }
}

fn refs(frame: &FrameDetections) -> Vec<&Detection> {
    frame.detections.iter().collect()
}

/// Recurrent tracking from the first to the last of `frames` without
/// spawning tracks after the first frame. Intermediate frames are matched by
/// Hungarian assignment on the model's own transition matrices; only matched
/// tracks advance their recurrent state. Returns the differentiable
/// transition matrix of the last frame.
pub fn recurrent_rollout(
    tape: &mut Tape,
    bp: &BoundParams,
    frames: &[FrameDetections],
    hide: Hide,
    cfg: RolloutConfig,
) -> Result<Var> {
    let first = frames.first().ok_or(ConsistencyError::EmptyFirstFrame)?;
    if first.is_empty() {
        return Err(ConsistencyError::EmptyFirstFrame);
    }
    let last_index = frames.len() - 1;
    if frames[last_index].is_empty() {
        return Err(ConsistencyError::EmptyFinalFrame);
    }
    let rows = first.len();
    let hid = bp.config.lstm_hidden;

    let first_refs = refs(first);
    let x0 = bp.encode_detections(tape, &first_refs, hide)?;
    let zero = bp.zero_state(tape, rows);
    let mut state = bp.lstm_step(tape, x0, zero)?;
    let (_, mut last_spatial) = bp.detection_inputs(&first_refs, hide)?;

    for frame in &frames[1..last_index] {
        if frame.is_empty() {
            continue;
        }
        let dets = refs(frame);
        let feats = bp.encode_detections(tape, &dets, hide)?;
        let spatial = tape.constant(last_spatial.clone());
        let side = bp.recurrent_track_side(tape, state.hidden, spatial)?;
        let scores = bp.score_matrix(tape, side, feats)?;
        let m = transition::build_transition(tape.value(scores), cfg.normalization)?;
        let assignment = transition::match_frame(&m, cfg.intermediate_threshold);
        if assignment.pairs.is_empty() {
            continue;
        }
        let (_, det_spatial) = bp.detection_inputs(&dets, hide)?;
        let mut gather = vec![0usize; rows];
        let mut gate = Matrix::zeros((rows, hid));
        for &(r, c) in &assignment.pairs {
            gather[r] = c;
            gate.row_mut(r).fill(1.0);
            last_spatial.row_mut(r).assign(&det_spatial.row(c));
        }
        let x = tape.select_rows(feats, &gather)?;
        let stepped = bp.lstm_step(tape, x, state)?;
        let gate = tape.constant(gate);
        state.hidden = gated_update(tape, state.hidden, stepped.hidden, gate)?;
        state.cell = gated_update(tape, state.cell, stepped.cell, gate)?;
    }

    let dets = refs(&frames[last_index]);
    let feats = bp.encode_detections(tape, &dets, hide)?;
    let spatial = tape.constant(last_spatial);
    let side = bp.recurrent_track_side(tape, state.hidden, spatial)?;
    let scores = bp.score_matrix(tape, side, feats)?;
    Ok(transition::build_transition_var(
        tape,
        scores,
        cfg.normalization,
    )?)
}

/// `old + gate ⊙ (new − old)`.
fn gated_update(tape: &mut Tape, old: Var, new: Var, gate: Var) -> diffcore::Result<Var> {
    let delta = tape.sub(new, old)?;
    let masked = tape.mul(gate, delta)?;
    tape.add(old, masked)
}

/// Non-recurrent appearance-only transition between two frames.
pub fn visual_transition(
    tape: &mut Tape,
    bp: &BoundParams,
    first: &FrameDetections,
    last: &FrameDetections,
    cfg: RolloutConfig,
) -> Result<Var> {
    if first.is_empty() {
        return Err(ConsistencyError::EmptyFirstFrame);
    }
    if last.is_empty() {
        return Err(ConsistencyError::EmptyFinalFrame);
    }
    let side = bp.encode_detections(tape, &refs(first), Hide::Spatial)?;
    let feats = bp.encode_detections(tape, &refs(last), Hide::Spatial)?;
    let scores = bp.score_matrix(tape, side, feats)?;
    Ok(transition::build_transition_var(
        tape,
        scores,
        cfg.normalization,
    )?)
}

/// Chains `first` (R × (H+1)) and `second` (H × (C+1)) through the hand-off
/// frame. The exit state is absorbing: a track that left before the hand-off
/// stays gone.
pub fn merge_handoff(tape: &mut Tape, first: Var, second: Var) -> Result<Var> {
    let cols = tape.shape(second).1;
    let mut absorbing = Matrix::zeros((1, cols));
    absorbing[[0, cols - 1]] = 1.0;
    let absorbing = tape.constant(absorbing);
    let extended = tape.concat_rows(&[second, absorbing])?;
    Ok(tape.matmul(first, extended)?)
}

/// Plain-matrix version of [`merge_handoff`].
pub fn merge_handoff_values(first: &Matrix, second: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let a = tape.constant(first.clone());
    let b = tape.constant(second.clone());
    let m = merge_handoff(&mut tape, a, b)?;
    Ok(tape.value(m).clone())
}

/// Transition matrix of one variation over the whole window.
pub fn track_variation(
    tape: &mut Tape,
    bp: &BoundParams,
    input: &HiddenInput,
    plan: &HidingPlan,
    variation: Variation,
    cfg: RolloutConfig,
) -> Result<Var> {
    let frames = &input.frames;
    let n = frames.len() - 1;
    match (plan, variation) {
        (HidingPlan::VisualSpatial, Variation::A) => {
            visual_transition(tape, bp, &frames[0], &frames[n], cfg)
        }
        (HidingPlan::VisualSpatial, Variation::B) => {
            recurrent_rollout(tape, bp, frames, Hide::Appearance, cfg)
        }
        (HidingPlan::Occlusion { handoff, .. }, _) => match handoff {
            Some(h) => {
                let first = recurrent_rollout(tape, bp, &frames[..=*h], input.hide, cfg)?;
                let second = recurrent_rollout(tape, bp, &frames[*h..], input.hide, cfg)?;
                merge_handoff(tape, first, second)
            }
            None => recurrent_rollout(tape, bp, frames, input.hide, cfg),
        },
    }
}

fn check_loss_shapes(a: (usize, usize), b: (usize, usize), mask: (usize, usize)) -> Result<()> {
    if a != b || a != mask {
        return Err(ConsistencyError::ShapeMismatch { a, b, mask });
    }
    Ok(())
}

/// `−Σ_i log(ε + Σ_j A_ij B_ij C_ij)`.
pub fn consistency_loss(tape: &mut Tape, a: Var, b: Var, mask: &MaskMatrix) -> Result<Var> {
    check_loss_shapes(tape.shape(a), tape.shape(b), mask.dim())?;
    let ab = tape.mul(a, b)?;
    let c = tape.constant(mask.0.clone());
    let abc = tape.mul(ab, c)?;
    let dots = tape.row_sums(abc);
    let shifted = tape.add_scalar(dots, LOSS_EPSILON);
    let logs = tape.log(shifted);
    let total = tape.sum(logs);
    Ok(tape.neg(total))
}

/// Plain-matrix version of [`consistency_loss`].
pub fn consistency_loss_value(a: &Matrix, b: &Matrix, mask: &MaskMatrix) -> Result<f64> {
    check_loss_shapes(a.dim(), b.dim(), mask.dim())?;
    let prod: Array2<f64> = a * b * &mask.0;
    Ok(-prod
        .rows()
        .into_iter()
        .map(|r| (LOSS_EPSILON + r.sum()).ln())
        .sum::<f64>())
}

/// Everything one training example produces.
pub struct ExampleGraph {
    pub loss: Var,
    pub a: Var,
    pub b: Var,
    pub mask: MaskMatrix,
}

/// Builds the loss graph for one prepared sample (artificial detections
/// already appended).
pub fn example_graph(
    tape: &mut Tape,
    bp: &BoundParams,
    sample: &SequenceSample,
    plan: &HidingPlan,
    cfg: RolloutConfig,
    use_mask: bool,
) -> Result<ExampleGraph> {
    plan.validate(sample.n)?;
    let (input_a, input_b) = apply_hiding(sample, plan);
    let a = track_variation(tape, bp, &input_a, plan, Variation::A, cfg)?;
    let b = track_variation(tape, bp, &input_b, plan, Variation::B, cfg)?;
    let mask = if use_mask {
        floodfill_mask(sample)
    } else {
        let mut m = MaskMatrix::all_ones(sample.first().len(), sample.last().len());
        for (j, d) in sample.last().detections.iter().enumerate() {
            if d.is_artificial {
                m.0.column_mut(j).fill(0.0);
            }
        }
        m
    };
    let loss = consistency_loss(tape, a, b, &mask)?;
    Ok(ExampleGraph { loss, a, b, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{BBox, SourceId};
    use crate::model::tests::{random_detection, small_config};
    use crate::model::ModelParams;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(frame: usize, x: f64, y: f64, w: f64) -> Detection {
        Detection::new(frame, BBox::new(x, y, w, w), vec![0.0; 3])
    }

    fn sample_from(frames: Vec<Vec<Detection>>) -> SequenceSample {
        let frames = frames
            .into_iter()
            .enumerate()
            .map(|(k, d)| FrameDetections::new(k, d))
            .collect();
        SequenceSample::new(frames, 0, 0)
    }

    /// Brute-force reachability: depth-first search over chains of
    /// intersecting boxes with strictly increasing frames.
    fn reachability_oracle(sample: &SequenceSample, lookback: usize) -> Matrix {
        let n = sample.n;
        let roots = sample.frames[0].len();
        let last = sample.frames[n].len();
        let mut out = Matrix::zeros((roots, last + 1));
        fn dfs(s: &SequenceSample, k: usize, j: usize, lookback: usize, hit: &mut Vec<bool>) {
            let d = &s.frames[k].detections[j];
            if k == s.n {
                hit[j] = true;
                return;
            }
            for k2 in k + 1..=(k + lookback).min(s.n) {
                for (j2, d2) in s.frames[k2].detections.iter().enumerate() {
                    if !d2.is_artificial && d.bbox.intersects(&d2.bbox) {
                        dfs(s, k2, j2, lookback, hit);
                    }
                }
            }
        }
        for i in 0..roots {
            let mut hit = vec![false; last];
            dfs(sample, 0, i, lookback, &mut hit);
            for j in 0..last {
                out[[i, j]] = if hit[j] { 1.0 } else { 0.0 };
            }
            out[[i, last]] = 1.0;
        }
        out
    }

    #[test]
    fn mask_follows_overlapping_chain() {
        let s = sample_from(vec![
            vec![det(0, 0.0, 0.0, 4.0)],
            vec![det(1, 2.0, 0.0, 4.0)],
            vec![det(2, 4.0, 0.0, 4.0)],
        ]);
        assert_eq!(floodfill_mask(&s).0, array![[1.0, 1.0]]);
    }

    #[test]
    fn disjoint_final_detection_gets_zero_column() {
        let s = sample_from(vec![
            vec![det(0, 0.0, 0.0, 4.0)],
            vec![det(1, 2.0, 0.0, 4.0)],
            vec![det(2, 4.0, 0.0, 4.0), det(2, 100.0, 100.0, 4.0)],
        ]);
        assert_eq!(floodfill_mask(&s).0, array![[1.0, 0.0, 1.0]]);
    }

    #[test]
    fn lookback_bridges_missing_frame() {
        let s = sample_from(vec![
            vec![det(0, 0.0, 0.0, 4.0)],
            vec![],
            vec![det(2, 3.0, 0.0, 4.0)],
        ]);
        assert_eq!(floodfill_mask(&s).0, reachability_oracle(&s, 10));
        assert_eq!(floodfill_mask(&s).0[[0, 0]], 1.0);
        // With lookback 1 the gap is not bridged.
        assert_eq!(floodfill_mask_with(&s, 1).0[[0, 0]], 0.0);
    }

    #[test]
    fn mask_matches_oracle_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let n = rng.random_range(1..9);
            let frames = (0..=n)
                .map(|k| {
                    let count = if k == 0 {
                        rng.random_range(1..4)
                    } else {
                        rng.random_range(0..4)
                    };
                    (0..count)
                        .map(|_| {
                            det(
                                k,
                                rng.random_range(0.0..40.0),
                                rng.random_range(0.0..40.0),
                                8.0,
                            )
                        })
                        .collect()
                })
                .collect();
            let s = sample_from(frames);
            assert_eq!(floodfill_mask(&s).0, reachability_oracle(&s, MASK_LOOKBACK));
        }
    }

    fn corpus_for_artificial() -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq: Vec<FrameDetections> = (0..200)
            .map(|f| {
                FrameDetections::new(f, (0..3).map(|_| random_detection(&mut rng, 3)).collect())
            })
            .collect();
        Corpus::new(vec![seq])
    }

    #[test]
    fn artificial_detections_copy_far_appearance() {
        let corpus = corpus_for_artificial();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let start = 90;
        let n = 8;
        let sample = SequenceSample::new(corpus.sequences[0][start..=start + n].to_vec(), 0, start);
        for _ in 0..20 {
            let out = add_artificial_detections(&sample, &corpus, 80, &mut rng);
            assert!(!out.artificial_skipped);
            let last = out.last();
            assert_eq!(last.len(), 6);
            for (k, d) in last.detections.iter().enumerate() {
                assert_eq!(d.is_artificial, k >= 3);
                if d.is_artificial {
                    let template = &sample.last().detections[k - 3];
                    assert_eq!(d.bbox, template.bbox);
                    let f = d.source_id.frame;
                    assert!(f + 80 <= start || f >= start + n + 80, "template frame {f}");
                    let src = &corpus.sequences[0][f].detections[d.source_id.index];
                    assert_eq!(src.appearance, d.appearance);
                }
            }
            let mask = floodfill_mask(&out);
            assert_eq!(mask.dim(), (3, 7));
            for j in 3..6 {
                assert!(mask.0.column(j).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn artificial_detections_skip_without_far_frames() {
        let corpus = Corpus::new(vec![corpus_for_artificial().sequences[0][..30].to_vec()]);
        let sample = SequenceSample::new(corpus.sequences[0][5..=10].to_vec(), 0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = add_artificial_detections(&sample, &corpus, 80, &mut rng);
        assert!(out.artificial_skipped);
        assert_eq!(out.frames, sample.frames);
    }

    #[test]
    fn other_sequences_are_eligible_templates() {
        let base = corpus_for_artificial();
        let corpus = Corpus::new(vec![
            base.sequences[0][..30].to_vec(),
            base.sequences[0][..30].to_vec(),
        ]);
        let sample = SequenceSample::new(corpus.sequences[0][5..=10].to_vec(), 0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = add_artificial_detections(&sample, &corpus, 80, &mut rng);
        assert!(!out.artificial_skipped);
        assert!(out
            .last()
            .detections
            .iter()
            .filter(|d| d.is_artificial)
            .all(|d| d.source_id.sequence == 1));
    }

    fn random_sample(rng: &mut ChaCha8Rng, n: usize, per_frame: usize) -> SequenceSample {
        let frames = (0..=n)
            .map(|k| {
                FrameDetections::new(
                    k,
                    (0..per_frame)
                        .map(|i| {
                            let mut d = random_detection(rng, 3);
                            d.frame_index = k;
                            d.source_id = SourceId {
                                sequence: 0,
                                frame: k,
                                index: i,
                            };
                            d
                        })
                        .collect(),
                )
            })
            .collect();
        SequenceSample::new(frames, 0, 0)
    }

    #[test]
    fn visual_spatial_hiding_zeroes_the_right_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_sample(&mut rng, 5, 3);
        let (a, b) = apply_hiding(&s, &HidingPlan::VisualSpatial);
        assert!(a
            .frames
            .iter()
            .flat_map(|f| &f.detections)
            .all(|d| d.bbox == BBox::new(0.0, 0.0, 0.0, 0.0)));
        assert!(b
            .frames
            .iter()
            .flat_map(|f| &f.detections)
            .all(|d| d.appearance.iter().all(|&x| x == 0.0)));
        for k in [0, 5] {
            let ids =
                |f: &FrameDetections| f.detections.iter().map(|d| d.source_id).collect::<Vec<_>>();
            assert_eq!(ids(&a.frames[k]), ids(&s.frames[k]));
            assert_eq!(ids(&b.frames[k]), ids(&s.frames[k]));
        }
    }

    #[test]
    fn occlusion_hiding_drops_frames_and_keeps_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_sample(&mut rng, 6, 2);
        let plan = HidingPlan::Occlusion {
            occluded_a: [2].into(),
            occluded_b: [4, 5].into(),
            handoff: Some(3),
        };
        plan.validate(6).unwrap();
        let (a, b) = apply_hiding(&s, &plan);
        assert!(a.frames[2].is_empty());
        assert!(!a.frames[4].is_empty());
        assert!(b.frames[4].is_empty() && b.frames[5].is_empty());
        for k in [0, 6] {
            assert_eq!(a.frames[k], s.frames[k]);
            assert_eq!(b.frames[k], s.frames[k]);
        }
    }

    #[test]
    fn sampled_occlusion_plans_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = OcclusionPlanConfig::default();
        for n in 2..17 {
            let s = random_sample(&mut rng, n, 2);
            for _ in 0..20 {
                let plan = HidingPlan::sample(Scheme::Occlusion, &s, &cfg, &mut rng).unwrap();
                plan.validate(n).unwrap();
                if let HidingPlan::Occlusion { handoff, .. } = plan {
                    assert_eq!(handoff.is_some(), n >= 3);
                }
            }
        }
        let s = random_sample(&mut rng, 1, 2);
        assert!(HidingPlan::sample(Scheme::Occlusion, &s, &cfg, &mut rng).is_err());
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let bad = HidingPlan::Occlusion {
            occluded_a: [0].into(),
            occluded_b: [2].into(),
            handoff: None,
        };
        assert!(bad.validate(4).is_err());
        let same = HidingPlan::Occlusion {
            occluded_a: [1].into(),
            occluded_b: [1].into(),
            handoff: None,
        };
        assert!(same.validate(4).is_err());
        let occluded_handoff = HidingPlan::Occlusion {
            occluded_a: [2].into(),
            occluded_b: [1].into(),
            handoff: Some(2),
        };
        assert!(occluded_handoff.validate(4).is_err());
    }

    #[test]
    fn handoff_merge_examples() {
        let eye = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(merge_handoff_values(&eye, &eye).unwrap(), eye);
        let m = merge_handoff_values(&array![[0.3, 0.7]], &array![[0.6, 0.4]]).unwrap();
        assert_abs_diff_eq!(m, array![[0.18, 0.82]], epsilon = 1e-12);
    }

    #[test]
    fn loss_examples() {
        let eye = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let ones = MaskMatrix::all_ones(2, 2);
        assert_abs_diff_eq!(
            consistency_loss_value(&eye, &eye, &ones).unwrap(),
            0.0,
            epsilon = 1e-7
        );
        let uniform = array![[0.5, 0.5, 0.0], [0.5, 0.5, 0.0]];
        assert_abs_diff_eq!(
            consistency_loss_value(&eye, &uniform, &ones).unwrap(),
            2.0 * 2f64.ln(),
            epsilon = 1e-7
        );
        let half = array![[0.5, 0.5]];
        let mask = MaskMatrix(array![[1.0, 0.0]]);
        assert_abs_diff_eq!(
            consistency_loss_value(&half, &half, &mask).unwrap(),
            0.25f64.recip().ln(),
            epsilon = 1e-6
        );
        assert!(consistency_loss_value(&eye, &half, &ones).is_err());
    }

    #[test]
    fn loss_is_finite_when_masked_out_and_symmetric() {
        let a = array![[0.2, 0.8]];
        let b = array![[0.6, 0.1]];
        let mask = MaskMatrix(array![[0.0, 0.0]]);
        assert!(consistency_loss_value(&a, &b, &mask).unwrap().is_finite());
        let mask = MaskMatrix(array![[1.0, 1.0]]);
        assert_eq!(
            consistency_loss_value(&a, &b, &mask).unwrap(),
            consistency_loss_value(&b, &a, &mask).unwrap()
        );
    }

    #[test]
    fn visual_branch_ignores_boxes_of_every_frame() {
        let params = ModelParams::new(small_config(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_sample(&mut rng, 4, 3);
        let mut moved = s.clone();
        for f in &mut moved.frames {
            for d in &mut f.detections {
                d.bbox.x += 13.0;
                d.bbox.w *= 2.0;
            }
        }
        let run = |sample: &SequenceSample| {
            let mut tape = Tape::new();
            let bp = params.bind(&mut tape, false);
            let (a, _) = apply_hiding(sample, &HidingPlan::VisualSpatial);
            let m = track_variation(
                &mut tape,
                &bp,
                &a,
                &HidingPlan::VisualSpatial,
                Variation::A,
                RolloutConfig::default(),
            )
            .unwrap();
            tape.value(m).clone()
        };
        assert_eq!(run(&s), run(&moved));
    }

    #[test]
    fn spatial_branch_ignores_appearance() {
        let params = ModelParams::new(small_config(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_sample(&mut rng, 4, 3);
        let mut recolored = s.clone();
        for f in &mut recolored.frames {
            for d in &mut f.detections {
                d.appearance
                    .iter_mut()
                    .for_each(|a| *a = rng.random_range(-5.0..5.0));
            }
        }
        let run = |sample: &SequenceSample| {
            let mut tape = Tape::new();
            let bp = params.bind(&mut tape, false);
            let (_, b) = apply_hiding(sample, &HidingPlan::VisualSpatial);
            let m = track_variation(
                &mut tape,
                &bp,
                &b,
                &HidingPlan::VisualSpatial,
                Variation::B,
                RolloutConfig::default(),
            )
            .unwrap();
            tape.value(m).clone()
        };
        assert_eq!(run(&s), run(&recolored));
    }

    #[test]
    fn empty_first_frame_is_an_error() {
        let params = ModelParams::new(small_config(), 3);
        let mut tape = Tape::new();
        let bp = params.bind(&mut tape, false);
        let frames = vec![FrameDetections::empty(0), FrameDetections::empty(1)];
        assert!(matches!(
            recurrent_rollout(
                &mut tape,
                &bp,
                &frames,
                Hide::None,
                RolloutConfig::default()
            ),
            Err(ConsistencyError::EmptyFirstFrame)
        ));
    }

    #[test]
    fn occlusion_variation_rows_are_substochastic() {
        let params = ModelParams::new(small_config(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let s = random_sample(&mut rng, 6, 3);
            let plan = HidingPlan::sample(
                Scheme::Occlusion,
                &s,
                &OcclusionPlanConfig::default(),
                &mut rng,
            )
            .unwrap();
            let mut tape = Tape::new();
            let bp = params.bind(&mut tape, false);
            let (a, b) = apply_hiding(&s, &plan);
            for (input, v) in [(a, Variation::A), (b, Variation::B)] {
                let m = track_variation(&mut tape, &bp, &input, &plan, v, RolloutConfig::default())
                    .unwrap();
                let m = tape.value(m);
                assert_eq!(m.dim(), (3, 4));
                for r in m.rows() {
                    assert!(r.sum() <= 1.0 + 1e-6);
                }
            }
        }
    }
}
