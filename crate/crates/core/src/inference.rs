//! Online tracking with a trained model, plus a greedy IoU baseline.
//!
//! The tracking loop is generic over [`Scorer`], which turns the active
//! tracks and the current frame's detections into a transition matrix. The
//! model scorer fuses a visual-only matrix (scores averaged over a few
//! stored past detections of each track) with a spatial-only recurrent one
//! by taking their elementwise minimum.

use crate::datamodel::{Detection, FrameDetections, Track, TrackEntry};
use crate::diffcore::{Matrix, Tape};
use crate::model::{BoundParams, Hide, LstmState, ModelError, ModelParams};
use crate::transition::{self, Normalization};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid inference config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    /// min(visual-only, spatial-only); for visual-spatial trained models.
    #[default]
    Fused,
    /// One recurrent branch seeing full detections; for occlusion-trained
    /// models.
    Recurrent,
    SpatialOnly,
    VisualOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub accept_threshold: f64,
    /// Past detections per track averaged by the visual branch.
    pub visual_samples: usize,
    /// Consecutive unmatched frames after which a track ends.
    pub t_miss: usize,
    pub mode: InferenceMode,
    pub normalization: Normalization,
    /// The recurrent branch runs over at most this many of a track's latest
    /// detections; `None` carries the state over the whole track.
    pub recurrent_window: Option<usize>,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            accept_threshold: 0.5,
            visual_samples: 5,
            t_miss: 30,
            mode: InferenceMode::Fused,
            normalization: Normalization::RowOnly,
            recurrent_window: Some(8),
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accept_threshold) {
            return Err(InferenceError::InvalidConfig(
                "accept_threshold must lie in [0, 1]".into(),
            ));
        }
        if self.visual_samples == 0 {
            return Err(InferenceError::InvalidConfig(
                "visual_samples must be at least 1".into(),
            ));
        }
        if self.recurrent_window == Some(0) {
            return Err(InferenceError::InvalidConfig(
                "recurrent_window must be at least 1".into(),
            ));
        }
        if self.t_miss == 0 {
            return Err(InferenceError::InvalidConfig(
                "t_miss must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Produces transition matrices for the tracking loop and follows its
/// decisions.
pub trait Scorer {
    /// Called once per frame before [`Scorer::transition`].
    fn begin_frame(&mut self, frame: &FrameDetections) -> Result<()>;
    /// `tracks.len() × (detections + 1)` matrix for the active tracks in the
    /// given order against the current frame.
    fn transition(&mut self, tracks: &[u64]) -> Result<Matrix>;
    /// Track `id` was created from detection `det` of the current frame.
    fn start_track(&mut self, id: u64, det: usize) -> Result<()>;
    /// Track `id` was matched to detection `det` of the current frame.
    fn extend_track(&mut self, id: u64, det: usize) -> Result<()>;
    fn end_track(&mut self, id: u64);
}

struct Active {
    track: Track,
    missed: usize,
}

/// Runs the online loop: every frame's detections are matched to active
/// tracks, unmatched detections start tracks, and tracks unmatched for
/// `t_miss` consecutive frames end.
pub fn track_with<S: Scorer>(
    scorer: &mut S,
    frames: &[FrameDetections],
    config: &InferenceConfig,
) -> Result<Vec<Track>> {
    config.validate()?;
    let mut active: Vec<Active> = Vec::new();
    let mut done: Vec<Track> = Vec::new();
    let mut next_id = 1u64;
    for (t, frame) in frames.iter().enumerate() {
        scorer.begin_frame(frame)?;
        let mut claimed = vec![false; frame.len()];
        let mut matched_rows = vec![false; active.len()];
        if !active.is_empty() && !frame.is_empty() {
            let ids: Vec<u64> = active.iter().map(|a| a.track.id).collect();
            let m = scorer.transition(&ids)?;
            let assignment = transition::match_frame(&m, config.accept_threshold);
            for &(r, c) in &assignment.pairs {
                let a = &mut active[r];
                a.track.push(TrackEntry {
                    frame_index: t,
                    detection: Some(c),
                    bbox: frame.detections[c].bbox,
                });
                a.missed = 0;
                scorer.extend_track(a.track.id, c)?;
                claimed[c] = true;
                matched_rows[r] = true;
            }
        }
        let mut kept = Vec::with_capacity(active.len());
        for (mut a, matched) in active.into_iter().zip(matched_rows) {
            if !matched {
                a.missed += 1;
            }
            if a.missed >= config.t_miss {
                scorer.end_track(a.track.id);
                a.track.terminated = true;
                done.push(a.track);
            } else {
                kept.push(a);
            }
        }
        active = kept;
        for (c, d) in frame.detections.iter().enumerate() {
            if claimed[c] {
                continue;
            }
            let mut track = Track::new(next_id);
            track.push(TrackEntry {
                frame_index: t,
                detection: Some(c),
                bbox: d.bbox,
            });
            scorer.start_track(next_id, c)?;
            next_id += 1;
            active.push(Active { track, missed: 0 });
        }
    }
    done.extend(active.into_iter().map(|a| a.track));
    done.sort_by_key(|t| t.id);
    Ok(done)
}

struct ModelTrack {
    /// Visual features (spatial part zeroed) of every member detection.
    visual: Vec<Vec<f64>>,
    /// Recurrent-branch inputs of the latest members, within the window.
    inputs: VecDeque<Vec<f64>>,
    hidden: Vec<f64>,
    cell: Vec<f64>,
    last_spatial: Vec<f64>,
}

/// Scorer backed by a trained model.
pub struct ModelScorer<'a> {
    params: &'a ModelParams,
    config: InferenceConfig,
    rng: ChaCha8Rng,
    tape: Tape,
    bp: BoundParams,
    /// Tape length right after binding; everything later is scratch.
    mark: usize,
    tracks: HashMap<u64, ModelTrack>,
    /// Recurrent updates of the current frame as `(track, detection, fresh)`,
    /// applied as one batch before the next frame.
    pending: Vec<(u64, usize, bool)>,
    frame_visual: Matrix,
    frame_recurrent: Matrix,
    frame_spatial: Matrix,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams, config: &InferenceConfig) -> Self {
        let mut tape = Tape::new();
        let bp = params.bind(&mut tape, false);
        Self {
            params,
            config: config.clone(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            mark: tape.len(),
            tape,
            bp,
            tracks: HashMap::new(),
            pending: Vec::new(),
            frame_visual: Matrix::zeros((0, 0)),
            frame_recurrent: Matrix::zeros((0, 0)),
            frame_spatial: Matrix::zeros((0, 0)),
        }
    }

    fn recurrent_hide(&self) -> Hide {
        match self.config.mode {
            InferenceMode::Recurrent => Hide::None,
            _ => Hide::Appearance,
        }
    }

    fn uses_visual(&self) -> bool {
        matches!(
            self.config.mode,
            InferenceMode::Fused | InferenceMode::VisualOnly
        )
    }

    fn uses_recurrent(&self) -> bool {
        !matches!(self.config.mode, InferenceMode::VisualOnly)
    }

    fn record(&mut self, id: u64, det: usize, fresh: bool) {
        let (recurrent, window) = (self.uses_recurrent(), self.config.recurrent_window);
        let visual = self.frame_visual.row(det).to_vec();
        let last_spatial = self.frame_spatial.row(det).to_vec();
        let entry = self.tracks.entry(id).or_insert_with(|| ModelTrack {
            visual: Vec::new(),
            inputs: VecDeque::new(),
            hidden: Vec::new(),
            cell: Vec::new(),
            last_spatial: Vec::new(),
        });
        entry.visual.push(visual);
        entry.last_spatial = last_spatial;
        if recurrent {
            if let Some(w) = window {
                entry
                    .inputs
                    .push_back(self.frame_recurrent.row(det).to_vec());
                if entry.inputs.len() > w {
                    entry.inputs.pop_front();
                }
            }
            self.pending.push((id, det, fresh));
        }
    }

    fn flush(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        if self.config.recurrent_window.is_some() {
            return self.flush_windowed();
        }
        let hid = self.params.config.lstm_hidden;
        let n = self.pending.len();
        let mut h0 = Matrix::zeros((n, hid));
        let mut c0 = Matrix::zeros((n, hid));
        let mut rows = Vec::with_capacity(n);
        for (i, &(id, det, fresh)) in self.pending.iter().enumerate() {
            let t = &self.tracks[&id];
            if !fresh {
                h0.row_mut(i).assign(&ndarray::ArrayView1::from(&t.hidden));
                c0.row_mut(i).assign(&ndarray::ArrayView1::from(&t.cell));
            }
            rows.push(det);
        }
        let tape = &mut self.tape;
        let x = tape.constant(self.frame_recurrent.select(ndarray::Axis(0), &rows));
        let hidden = tape.constant(h0);
        let cell = tape.constant(c0);
        let s = self.bp.lstm_step(tape, x, LstmState { hidden, cell })?;
        let (h, c) = (tape.value(s.hidden), tape.value(s.cell));
        for (i, &(id, _, _)) in self.pending.iter().enumerate() {
            let t = self.tracks.get_mut(&id).expect("pending track exists");
            t.hidden = h.row(i).to_vec();
            t.cell = c.row(i).to_vec();
        }
        self.tape.truncate(self.mark);
        self.pending.clear();
        Ok(())
    }

    /// Reruns the LSTM from a zero state over each pending track's window.
    /// Shorter windows start later so every row ends on the same step.
    fn flush_windowed(&mut self) -> Result<()> {
        let hid = self.params.config.lstm_hidden;
        let width = self.params.config.feature_dim();
        let n = self.pending.len();
        let lens: Vec<usize> = self
            .pending
            .iter()
            .map(|p| self.tracks[&p.0].inputs.len())
            .collect();
        let steps = lens.iter().copied().max().unwrap_or(0);
        let mut h = Matrix::zeros((n, hid));
        let mut c = Matrix::zeros((n, hid));
        for s in 0..steps {
            let mut x = Matrix::zeros((n, width));
            for (i, p) in self.pending.iter().enumerate() {
                if let Some(k) = (s + lens[i]).checked_sub(steps) {
                    let row = &self.tracks[&p.0].inputs[k];
                    x.row_mut(i).assign(&ndarray::ArrayView1::from(row));
                }
            }
            let tape = &mut self.tape;
            let x = tape.constant(x);
            let hidden = tape.constant(h.clone());
            let cell = tape.constant(c.clone());
            let st = self.bp.lstm_step(tape, x, LstmState { hidden, cell })?;
            for (i, &len) in lens.iter().enumerate().take(n) {
                if s + len >= steps {
                    h.row_mut(i).assign(&tape.value(st.hidden).row(i));
                    c.row_mut(i).assign(&tape.value(st.cell).row(i));
                }
            }
            self.tape.truncate(self.mark);
        }
        for (i, &(id, _, _)) in self.pending.iter().enumerate() {
            let t = self.tracks.get_mut(&id).expect("pending track exists");
            t.hidden = h.row(i).to_vec();
            t.cell = c.row(i).to_vec();
        }
        self.pending.clear();
        Ok(())
    }

    fn visual_scores(&mut self, tracks: &[u64]) -> Result<Matrix> {
        let k = self.config.visual_samples;
        let mut sides = Vec::new();
        let mut owners = Vec::new();
        for (r, id) in tracks.iter().enumerate() {
            let t = &self.tracks[id];
            let picks: Vec<usize> = if t.visual.len() <= k {
                (0..t.visual.len()).collect()
            } else {
                sample(&mut self.rng, t.visual.len(), k).into_vec()
            };
            for p in picks {
                sides.extend_from_slice(&t.visual[p]);
                owners.push(r);
            }
        }
        let width = self.params.config.track_side_dim();
        let side = Matrix::from_shape_vec((owners.len(), width), sides).expect("track side rows");
        let s = self.pair_scores(side, self.frame_visual.clone())?;
        let mut sum = Matrix::zeros((tracks.len(), s.ncols()));
        let mut count = vec![0.0; tracks.len()];
        for (i, &r) in owners.iter().enumerate() {
            let mut row = sum.row_mut(r);
            row += &s.row(i);
            count[r] += 1.0;
        }
        for (r, c) in count.iter().enumerate() {
            sum.row_mut(r).mapv_inplace(|v| v / c);
        }
        Ok(sum)
    }

    fn recurrent_scores(&mut self, tracks: &[u64]) -> Result<Matrix> {
        let width = self.params.config.track_side_dim();
        let mut side = Vec::with_capacity(tracks.len() * width);
        for id in tracks {
            let t = &self.tracks[id];
            side.extend_from_slice(&t.hidden);
            side.extend_from_slice(&t.last_spatial);
        }
        let side = Matrix::from_shape_vec((tracks.len(), width), side).expect("track side rows");
        self.pair_scores(side, self.frame_recurrent.clone())
    }

    fn pair_scores(&mut self, side: Matrix, dets: Matrix) -> Result<Matrix> {
        let tape = &mut self.tape;
        let side = tape.constant(side);
        let dets = tape.constant(dets);
        let s = self.bp.match_scores(tape, side, dets)?;
        let out = tape.value(s).clone();
        tape.truncate(self.mark);
        Ok(out)
    }

    fn with_exit(&self, scores: Matrix) -> Matrix {
        let exit = self.params.exit_bias[[0, 0]];
        let (r, c) = scores.dim();
        Matrix::from_shape_fn(
            (r, c + 1),
            |(i, j)| if j < c { scores[[i, j]] } else { exit },
        )
    }
}

impl Scorer for ModelScorer<'_> {
    fn begin_frame(&mut self, frame: &FrameDetections) -> Result<()> {
        self.flush()?;
        let dets: Vec<&Detection> = frame.detections.iter().collect();
        let hide = self.recurrent_hide();
        let tape = &mut self.tape;
        let v = self.bp.encode_detections(tape, &dets, Hide::Spatial)?;
        self.frame_visual = tape.value(v).clone();
        let r = self.bp.encode_detections(tape, &dets, hide)?;
        self.frame_recurrent = tape.value(r).clone();
        tape.truncate(self.mark);
        self.frame_spatial = self.bp.detection_inputs(&dets, hide)?.1;
        Ok(())
    }

    fn transition(&mut self, tracks: &[u64]) -> Result<Matrix> {
        let norm = self.config.normalization;
        let visual = if self.uses_visual() {
            let s = self.visual_scores(tracks)?;
            Some(transition::build_transition(&self.with_exit(s), norm)?)
        } else {
            None
        };
        let recurrent = if self.uses_recurrent() {
            let s = self.recurrent_scores(tracks)?;
            Some(transition::build_transition(&self.with_exit(s), norm)?)
        } else {
            None
        };
        Ok(match (visual, recurrent) {
            (Some(a), Some(b)) => fuse(&a, &b),
            (Some(m), None) | (None, Some(m)) => m,
            (None, None) => unreachable!("every mode uses a branch"),
        })
    }

    fn start_track(&mut self, id: u64, det: usize) -> Result<()> {
        self.record(id, det, true);
        Ok(())
    }

    fn extend_track(&mut self, id: u64, det: usize) -> Result<()> {
        self.record(id, det, false);
        Ok(())
    }

    fn end_track(&mut self, id: u64) {
        self.pending.retain(|p| p.0 != id);
        self.tracks.remove(&id);
    }
}

/// Elementwise minimum of two transition matrices.
pub fn fuse(a: &Matrix, b: &Matrix) -> Matrix {
    ndarray::Zip::from(a).and(b).map_collect(|&x, &y| x.min(y))
}

/// Tracks one sequence with a trained model.
pub fn track_sequence(
    params: &ModelParams,
    frames: &[FrameDetections],
    config: &InferenceConfig,
) -> Result<Vec<Track>> {
    let mut scorer = ModelScorer::new(params, config);
    track_with(&mut scorer, frames, config)
}

/// Scorer that knows the true identity of every detection. Useful as an
/// upper bound when testing the tracking loop and the metrics.
pub struct OracleScorer<'a> {
    labels: &'a [Vec<Option<u64>>],
    frame: usize,
    current: Vec<Option<u64>>,
    identity: HashMap<u64, Option<u64>>,
    started: bool,
}

impl<'a> OracleScorer<'a> {
    /// `labels[t][j]` is the object behind detection `j` of frame `t`, or
    /// `None` for a false positive.
    pub fn new(labels: &'a [Vec<Option<u64>>]) -> Self {
        Self {
            labels,
            frame: 0,
            current: Vec::new(),
            identity: HashMap::new(),
            started: false,
        }
    }
}

impl Scorer for OracleScorer<'_> {
    fn begin_frame(&mut self, _frame: &FrameDetections) -> Result<()> {
        if self.started {
            self.frame += 1;
        }
        self.started = true;
        self.current = self.labels.get(self.frame).cloned().unwrap_or_default();
        Ok(())
    }

    fn transition(&mut self, tracks: &[u64]) -> Result<Matrix> {
        let cols = self.current.len();
        let mut m = Matrix::zeros((tracks.len(), cols + 1));
        for (r, id) in tracks.iter().enumerate() {
            let who = self.identity.get(id).copied().flatten();
            match who.and_then(|w| self.current.iter().position(|&l| l == Some(w))) {
                Some(c) => m[[r, c]] = 1.0,
                None => m[[r, cols]] = 1.0,
            }
        }
        Ok(m)
    }

    fn start_track(&mut self, id: u64, det: usize) -> Result<()> {
        self.identity
            .insert(id, self.current.get(det).copied().flatten());
        Ok(())
    }

    fn extend_track(&mut self, _id: u64, _det: usize) -> Result<()> {
        Ok(())
    }

    fn end_track(&mut self, id: u64) {
        self.identity.remove(&id);
    }
}

/// Scorer emitting uniformly random scores through the transition
/// normalization; a floor for learned models.
pub struct RandomScorer {
    rng: ChaCha8Rng,
    cols: usize,
    normalization: Normalization,
}

impl RandomScorer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            cols: 0,
            normalization: Normalization::RowColumnMin,
        }
    }
}

impl Scorer for RandomScorer {
    fn begin_frame(&mut self, frame: &FrameDetections) -> Result<()> {
        self.cols = frame.len();
        Ok(())
    }

    fn transition(&mut self, tracks: &[u64]) -> Result<Matrix> {
        let s = Matrix::from_shape_fn((tracks.len(), self.cols + 1), |_| {
            self.rng.random_range(-3.0..3.0)
        });
        Ok(transition::build_transition(&s, self.normalization)?)
    }

    fn start_track(&mut self, _id: u64, _det: usize) -> Result<()> {
        Ok(())
    }

    fn extend_track(&mut self, _id: u64, _det: usize) -> Result<()> {
        Ok(())
    }

    fn end_track(&mut self, _id: u64) {}
}

/// Greedy frame-to-frame IoU association. Only tracks matched in the
/// previous frame can continue, so any gap ends a track.
pub fn iou_baseline(frames: &[FrameDetections], iou_threshold: f64) -> Vec<Track> {
    let mut tracks: Vec<Track> = Vec::new();
    // (track index, box) of tracks matched in the previous frame.
    let mut live: Vec<usize> = Vec::new();
    for (t, frame) in frames.iter().enumerate() {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (li, &ti) in live.iter().enumerate() {
            let last = tracks[ti]
                .entries
                .last()
                .expect("live tracks are non-empty")
                .bbox;
            for (c, d) in frame.detections.iter().enumerate() {
                let iou = last.iou(&d.bbox);
                if iou > iou_threshold {
                    pairs.push((iou, li, c));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut track_used = vec![false; live.len()];
        let mut det_used = vec![false; frame.len()];
        let mut next_live = Vec::new();
        for (_, li, c) in pairs {
            if track_used[li] || det_used[c] {
                continue;
            }
            track_used[li] = true;
            det_used[c] = true;
            let ti = live[li];
            tracks[ti].push(TrackEntry {
                frame_index: t,
                detection: Some(c),
                bbox: frame.detections[c].bbox,
            });
            next_live.push(ti);
        }
        for (li, used) in track_used.iter().enumerate() {
            if !used {
                tracks[live[li]].terminated = true;
            }
        }
        for (c, d) in frame.detections.iter().enumerate() {
            if det_used[c] {
                continue;
            }
            let mut track = Track::new(tracks.len() as u64 + 1);
            track.push(TrackEntry {
                frame_index: t,
                detection: Some(c),
                bbox: d.bbox,
            });
            next_live.push(tracks.len());
            tracks.push(track);
        }
        live = next_live;
    }
    tracks
}
