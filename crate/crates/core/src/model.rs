//! Tracker model: appearance encoder, LSTM track encoder, matching network
//! and the shared exit score.
//!
//! A detection feature is the encoded appearance (64 values) followed by the
//! four scaled box coordinates. The matching network scores a track-side
//! 68-vector against a detection feature, with the pairwise box offset as
//! an extra first-layer input. For recurrent tracks the track
//! side is the LSTM output followed by the box of the track's latest
//! detection; for the non-recurrent visual branch it is the detection
//! feature of a past track member.

use crate::datamodel::Detection;
use crate::diffcore::{self, Gradients, Matrix, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const SPATIAL_DIM: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("appearance has {found} values, model expects {expected}")]
    AppearanceDim { expected: usize, found: usize },
    #[error("track has no detections")]
    EmptyTrack,
    #[error("flat parameter vector has {found} values, model has {expected}")]
    FlatLength { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which part of a detection is withheld from the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Hide {
    #[default]
    None,
    /// Box coordinates replaced by zeros.
    Spatial,
    /// Appearance vector replaced by zeros before encoding.
    Appearance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub appearance_dim: usize,
    /// Hidden widths of the appearance encoder before its 64-wide output.
    pub encoder_hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub lstm_hidden: usize,
    /// Hidden widths of the matching network before its scalar output.
    pub match_hidden: Vec<usize>,
    /// Multiplier applied to pixel coordinates before they enter the model.
    pub spatial_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            appearance_dim: 16,
            encoder_hidden: vec![64],
            embedding_dim: 64,
            lstm_hidden: 64,
            match_hidden: vec![64, 64, 32],
            spatial_scale: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.embedding_dim + SPATIAL_DIM
    }

    pub fn track_side_dim(&self) -> usize {
        self.lstm_hidden + SPATIAL_DIM
    }

    /// The visual branch feeds detection features where track sides go, so
    /// both must have the same width.
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim != self.lstm_hidden {
            return Err(ModelError::InvalidConfig(format!(
                "embedding_dim {} must equal lstm_hidden {}",
                self.embedding_dim, self.lstm_hidden
            )));
        }
        if self.appearance_dim == 0 || self.embedding_dim == 0 || self.match_hidden.is_empty() {
            return Err(ModelError::InvalidConfig(
                "dimensions must be positive".into(),
            ));
        }
        if !(self.spatial_scale.is_finite() && self.spatial_scale > 0.0) {
            return Err(ModelError::InvalidConfig(
                "spatial_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: uniform_init(rng, fan_in, (inputs, outputs)),
            bias: uniform_init(rng, fan_in, (1, outputs)),
        }
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, fan_in: usize, shape: (usize, usize)) -> Matrix {
    let s = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_shape_fn(shape, |_| rng.random_range(-s..=s))
}

/// All trainable weights. [`ModelParams::tensors`] fixes the flat ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Vec<Dense>,
    /// Input-to-gates weights, gate order input, forget, cell, output.
    pub lstm_input: Matrix,
    pub lstm_recurrent: Matrix,
    pub lstm_bias: Matrix,
    /// First matching layer split by input half: track side, detection side.
    pub match_track_in: Matrix,
    pub match_det_in: Matrix,
    pub match_in_bias: Matrix,
    /// First-layer weights on the pairwise box offset (detection box minus
    /// the track side's box).
    pub match_offset_in: Matrix,
    pub matcher: Vec<Dense>,
    pub exit_bias: Matrix,
}

impl ModelParams {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::new();
        let mut width = config.appearance_dim;
        for &h in config
            .encoder_hidden
            .iter()
            .chain([config.embedding_dim].iter())
        {
            encoder.push(Dense::init(&mut rng, width, width, h));
            width = h;
        }
        let f = config.feature_dim();
        let hid = config.lstm_hidden;
        let lstm_fan = f + hid;
        let lstm_input = uniform_init(&mut rng, lstm_fan, (f, 4 * hid));
        let lstm_recurrent = uniform_init(&mut rng, lstm_fan, (hid, 4 * hid));
        let lstm_bias = uniform_init(&mut rng, lstm_fan, (1, 4 * hid));

        let match_fan = config.track_side_dim() + f;
        let first = config.match_hidden.first().copied().unwrap_or(1);
        let match_track_in = uniform_init(&mut rng, match_fan, (config.track_side_dim(), first));
        let match_det_in = uniform_init(&mut rng, match_fan, (f, first));
        let match_in_bias = uniform_init(&mut rng, match_fan, (1, first));
        let match_offset_in = uniform_init(&mut rng, match_fan, (SPATIAL_DIM, first));
        let mut matcher = Vec::new();
        let mut width = first;
        if !config.match_hidden.is_empty() {
            for &h in config.match_hidden.iter().skip(1).chain([1usize].iter()) {
                matcher.push(Dense::init(&mut rng, width, width, h));
                width = h;
            }
        }
        Self {
            config,
            encoder,
            lstm_input,
            lstm_recurrent,
            lstm_bias,
            match_track_in,
            match_det_in,
            match_in_bias,
            match_offset_in,
            matcher,
            exit_bias: Matrix::zeros((1, 1)),
        }
    }

    /// Named tensors in flat-vector order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        out.push(("lstm.input".into(), &self.lstm_input));
        out.push(("lstm.recurrent".into(), &self.lstm_recurrent));
        out.push(("lstm.bias".into(), &self.lstm_bias));
        out.push(("match.in.track".into(), &self.match_track_in));
        out.push(("match.in.det".into(), &self.match_det_in));
        out.push(("match.in.bias".into(), &self.match_in_bias));
        out.push(("match.in.offset".into(), &self.match_offset_in));
        for (i, l) in self.matcher.iter().enumerate() {
            out.push((format!("match.{}.weight", i + 1), &l.weight));
            out.push((format!("match.{}.bias", i + 1), &l.bias));
        }
        out.push(("exit_bias".into(), &self.exit_bias));
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.named_tensors().into_iter().map(|(_, m)| m).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for l in &mut self.encoder {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.lstm_input);
        out.push(&mut self.lstm_recurrent);
        out.push(&mut self.lstm_bias);
        out.push(&mut self.match_track_in);
        out.push(&mut self.match_det_in);
        out.push(&mut self.match_in_bias);
        out.push(&mut self.match_offset_in);
        for l in &mut self.matcher {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.exit_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for m in self.tensors() {
            out.extend(m.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(ModelError::FlatLength {
                expected,
                found: flat.len(),
            });
        }
        let mut offset = 0;
        for m in self.tensors_mut() {
            for (dst, src) in m.iter_mut().zip(&flat[offset..]) {
                *dst = *src;
            }
            offset += m.len();
        }
        Ok(())
    }

    pub fn manifest(&self) -> Vec<TensorShape> {
        self.named_tensors()
            .into_iter()
            .map(|(name, m)| TensorShape {
                name,
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect()
    }

    /// Places every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let encoder: Vec<(Var, Var)> = self
            .encoder
            .iter()
            .map(|l| (leaf(&l.weight), leaf(&l.bias)))
            .collect();
        let lstm_input = leaf(&self.lstm_input);
        let lstm_recurrent = leaf(&self.lstm_recurrent);
        let lstm_bias = leaf(&self.lstm_bias);
        let match_track_in = leaf(&self.match_track_in);
        let match_det_in = leaf(&self.match_det_in);
        let match_in_bias = leaf(&self.match_in_bias);
        let match_offset_in = leaf(&self.match_offset_in);
        let matcher: Vec<(Var, Var)> = self
            .matcher
            .iter()
            .map(|l| (leaf(&l.weight), leaf(&l.bias)))
            .collect();
        let exit_bias = leaf(&self.exit_bias);
        BoundParams {
            config: self.config.clone(),
            encoder,
            lstm_input,
            lstm_recurrent,
            lstm_bias,
            match_track_in,
            match_det_in,
            match_in_bias,
            match_offset_in,
            matcher,
            exit_bias,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            manifest: self.manifest(),
            values: self.to_flat(),
        };
        std::fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint_str(&text)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        ckpt.config.validate()?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!(
                "unknown format {:?}",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {}",
                ckpt.version
            )));
        }
        let mut params = ModelParams::new(ckpt.config, 0);
        if params.manifest() != ckpt.manifest {
            return Err(ModelError::Checkpoint(
                "tensor manifest does not match the model configuration".into(),
            ));
        }
        params.set_flat(&ckpt.values)?;
        Ok(params)
    }
}

const CHECKPOINT_FORMAT: &str = "crossinput-checkpoint";
const CHECKPOINT_VERSION: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    manifest: Vec<TensorShape>,
    values: Vec<f64>,
}

/// Model tensors placed on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub config: ModelConfig,
    encoder: Vec<(Var, Var)>,
    lstm_input: Var,
    lstm_recurrent: Var,
    lstm_bias: Var,
    match_track_in: Var,
    match_det_in: Var,
    match_in_bias: Var,
    match_offset_in: Var,
    matcher: Vec<(Var, Var)>,
    exit_bias: Var,
}

/// Carried LSTM state for a batch of tracks (one row per track).
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

impl BoundParams {
    fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in &self.encoder {
            out.extend([w, b]);
        }
        out.extend([
            self.lstm_input,
            self.lstm_recurrent,
            self.lstm_bias,
            self.match_track_in,
            self.match_det_in,
            self.match_in_bias,
            self.match_offset_in,
        ]);
        for &(w, b) in &self.matcher {
            out.extend([w, b]);
        }
        out.push(self.exit_bias);
        out
    }

    /// Gradients flattened in [`ModelParams::to_flat`] order.
    pub fn flat_gradient(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for v in self.vars() {
            match grads.get(v) {
                Some(g) => out.extend(g.iter().copied()),
                None => out.extend(std::iter::repeat_n(0.0, tape.value(v).len())),
            }
        }
        out
    }

    /// Raw inputs for a batch of detections: appearance (N × k) and scaled
    /// boxes (N × 4), with the hidden part zeroed.
    pub fn detection_inputs(&self, dets: &[&Detection], hide: Hide) -> Result<(Matrix, Matrix)> {
        let k = self.config.appearance_dim;
        let mut app = Matrix::zeros((dets.len(), k));
        let mut spatial = Matrix::zeros((dets.len(), SPATIAL_DIM));
        for (i, d) in dets.iter().enumerate() {
            if d.appearance.len() != k {
                return Err(ModelError::AppearanceDim {
                    expected: k,
                    found: d.appearance.len(),
                });
            }
            if hide != Hide::Appearance {
                for (j, a) in d.appearance.iter().enumerate() {
                    app[[i, j]] = *a;
                }
            }
            if hide != Hide::Spatial {
                for (j, v) in d.bbox.as_array().iter().enumerate() {
                    spatial[[i, j]] = v * self.config.spatial_scale;
                }
            }
        }
        Ok((app, spatial))
    }

    /// Detection features `f(d)` for a batch, N × 68.
    pub fn encode_detections(
        &self,
        tape: &mut Tape,
        dets: &[&Detection],
        hide: Hide,
    ) -> Result<Var> {
        let (app, spatial) = self.detection_inputs(dets, hide)?;
        let mut h = tape.constant(app);
        let last = self.encoder.len() - 1;
        for (i, &(w, b)) in self.encoder.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        let s = tape.constant(spatial);
        Ok(tape.concat_cols(&[h, s])?)
    }

    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> LstmState {
        let hid = self.config.lstm_hidden;
        LstmState {
            hidden: tape.constant(Matrix::zeros((rows, hid))),
            cell: tape.constant(Matrix::zeros((rows, hid))),
        }
    }

    /// One LSTM step for every row of `input` (R × 68).
    pub fn lstm_step(&self, tape: &mut Tape, input: Var, state: LstmState) -> Result<LstmState> {
        let hid = self.config.lstm_hidden;
        let a = tape.matmul(input, self.lstm_input)?;
        let b = tape.matmul(state.hidden, self.lstm_recurrent)?;
        let z = tape.add(a, b)?;
        let z = tape.add_row(z, self.lstm_bias)?;
        let gi = tape.slice_cols(z, 0, hid)?;
        let gf = tape.slice_cols(z, hid, 2 * hid)?;
        let gg = tape.slice_cols(z, 2 * hid, 3 * hid)?;
        let go = tape.slice_cols(z, 3 * hid, 4 * hid)?;
        let i = tape.sigmoid(gi);
        let f = tape.sigmoid(gf);
        let g = tape.tanh(gg);
        let o = tape.sigmoid(go);
        let fc = tape.mul(f, state.cell)?;
        let ig = tape.mul(i, g)?;
        let cell = tape.add(fc, ig)?;
        let tc = tape.tanh(cell);
        let hidden = tape.mul(o, tc)?;
        Ok(LstmState { hidden, cell })
    }

    /// Match scores for every (track side row, detection row) pair, R × C.
    pub fn match_scores(&self, tape: &mut Tape, track_side: Var, det_features: Var) -> Result<Var> {
        let rows = tape.shape(track_side).0;
        let cols = tape.shape(det_features).0;
        let t = tape.matmul(track_side, self.match_track_in)?;
        let d = tape.matmul(det_features, self.match_det_in)?;
        let d = tape.add_row(d, self.match_in_bias)?;
        // The offset term is linear, so it splits into a track half and a
        // detection half before the pairwise sum.
        let (tw, dw) = (tape.shape(track_side).1, tape.shape(det_features).1);
        let t_box = tape.slice_cols(track_side, tw - SPATIAL_DIM, tw)?;
        let d_box = tape.slice_cols(det_features, dw - SPATIAL_DIM, dw)?;
        let t_off = tape.matmul(t_box, self.match_offset_in)?;
        let d_off = tape.matmul(d_box, self.match_offset_in)?;
        let t = tape.sub(t, t_off)?;
        let d = tape.add(d, d_off)?;
        let mut h = tape.pair_add(t, d)?;
        for &(w, b) in &self.matcher {
            h = tape.relu(h);
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
        }
        Ok(tape.reshape(h, rows, cols)?)
    }

    /// `R × 1` column filled with the exit bias.
    pub fn exit_column(&self, tape: &mut Tape, rows: usize) -> Result<Var> {
        let ones = tape.constant(Matrix::ones((rows, 1)));
        Ok(tape.matmul(ones, self.exit_bias)?)
    }

    /// Score matrix with the exit column appended.
    pub fn score_matrix(&self, tape: &mut Tape, track_side: Var, det_features: Var) -> Result<Var> {
        let rows = tape.shape(track_side).0;
        let exit = self.exit_column(tape, rows)?;
        if tape.shape(det_features).0 == 0 {
            return Ok(exit);
        }
        let s = self.match_scores(tape, track_side, det_features)?;
        Ok(tape.concat_cols(&[s, exit])?)
    }

    /// Track side for recurrent tracks: LSTM output followed by the spatial
    /// part of each track's latest detection feature.
    pub fn recurrent_track_side(
        &self,
        tape: &mut Tape,
        hidden: Var,
        last_spatial: Var,
    ) -> Result<Var> {
        Ok(tape.concat_cols(&[hidden, last_spatial])?)
    }
}

/// Feature of a single detection, length 68.
pub fn encode_detection(params: &ModelParams, d: &Detection, hide: Hide) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape, false);
    let v = bp.encode_detections(&mut tape, &[d], hide)?;
    Ok(tape.value(v).iter().copied().collect())
}

/// Last-step LSTM output over a sequence of detection features.
pub fn encode_track(params: &ModelParams, features: &[Vec<f64>]) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(ModelError::EmptyTrack);
    }
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape, false);
    let mut state = bp.zero_state(&mut tape, 1);
    for f in features {
        let x = tape.constant(row_matrix(f));
        state = bp.lstm_step(&mut tape, x, state)?;
    }
    Ok(tape.value(state.hidden).iter().copied().collect())
}

/// Score for one track-side vector (length 68) against one detection feature.
pub fn match_score(params: &ModelParams, track_side: &[f64], det_feature: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape, false);
    let t = tape.constant(row_matrix(track_side));
    let d = tape.constant(row_matrix(det_feature));
    let s = bp.match_scores(&mut tape, t, d)?;
    Ok(tape.value(s)[[0, 0]])
}

/// Score matrix for recurrent tracks (each a list of detections) against
/// candidate detections, with the exit column appended.
pub fn score_matrix(
    params: &ModelParams,
    tracks: &[Vec<&Detection>],
    detections: &[&Detection],
    hide: Hide,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape, false);
    let mut sides = Vec::with_capacity(tracks.len());
    for track in tracks {
        let last = track.last().ok_or(ModelError::EmptyTrack)?;
        let feats = bp.encode_detections(&mut tape, track, hide)?;
        let mut state = bp.zero_state(&mut tape, 1);
        for r in 0..track.len() {
            let x = tape.select_rows(feats, &[r])?;
            state = bp.lstm_step(&mut tape, x, state)?;
        }
        let (_, spatial) = bp.detection_inputs(&[last], hide)?;
        let s = tape.constant(spatial);
        sides.push(bp.recurrent_track_side(&mut tape, state.hidden, s)?);
    }
    let track_side = tape.concat_rows(&sides)?;
    let dets = bp.encode_detections(&mut tape, detections, hide)?;
    let s = bp.score_matrix(&mut tape, track_side, dets)?;
    Ok(tape.value(s).clone())
}

pub(crate) fn row_matrix(v: &[f64]) -> Matrix {
    Matrix::from_shape_vec((1, v.len()), v.to_vec()).expect("1 × n")
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::datamodel::BBox;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, Normal};

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            appearance_dim: 3,
            encoder_hidden: vec![5],
            embedding_dim: 4,
            lstm_hidden: 4,
            match_hidden: vec![6, 4],
            spatial_scale: 0.1,
        }
    }

    pub(crate) fn random_detection(rng: &mut ChaCha8Rng, k: usize) -> Detection {
        let n = Normal::new(0.0, 1.0).unwrap();
        Detection::new(
            0,
            BBox::new(
                rng.random_range(0.0..50.0),
                rng.random_range(0.0..50.0),
                rng.random_range(2.0..10.0),
                rng.random_range(2.0..10.0),
            ),
            (0..k).map(|_| n.sample(rng)).collect(),
        )
    }

    #[test]
    fn default_shapes_follow_architecture() {
        let p = ModelParams::new(ModelConfig::default(), 0);
        assert_eq!(p.config.feature_dim(), 68);
        assert_eq!(p.lstm_input.dim(), (68, 256));
        assert_eq!(p.lstm_recurrent.dim(), (64, 256));
        assert_eq!(p.match_track_in.nrows() + p.match_det_in.nrows(), 136);
        let widths: Vec<usize> = std::iter::once(p.match_track_in.ncols())
            .chain(p.matcher.iter().map(|l| l.weight.ncols()))
            .collect();
        assert_eq!(widths, vec![64, 64, 32, 1]);
        assert_eq!(p.encoder.len(), 2);
        assert_eq!(p.encoder[1].weight.dim(), (64, 64));
    }

    #[test]
    fn flat_round_trip_is_lossless() {
        let p = ModelParams::new(ModelConfig::default(), 3);
        let flat = p.to_flat();
        let mut q = ModelParams::new(ModelConfig::default(), 4);
        assert_ne!(p, q);
        q.set_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let p = ModelParams::new(small_config(), 9);
        p.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), p);

        let text = std::fs::read_to_string(&path).unwrap();
        let broken = text.replace("\"lstm.input\"", "\"lstm.other\"");
        assert!(ModelParams::from_checkpoint_str(&broken).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["values"].as_array_mut().unwrap().pop();
        assert!(ModelParams::from_checkpoint_str(&v.to_string()).is_err());
    }

    #[test]
    fn detection_feature_length_and_hiding() {
        let p = ModelParams::new(ModelConfig::default(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_detection(&mut rng, 16);
        let f = encode_detection(&p, &d, Hide::None).unwrap();
        assert_eq!(f.len(), 68);
        let f = encode_detection(&p, &d, Hide::Spatial).unwrap();
        assert_eq!(&f[64..], &[0.0; 4]);

        let mut zero_bias = p.clone();
        for l in &mut zero_bias.encoder {
            l.bias.fill(0.0);
        }
        let zero = Detection::new(0, BBox::default(), vec![0.0; 16]);
        let enc0 = encode_detection(&zero_bias, &zero, Hide::None).unwrap();
        for _ in 0..3 {
            let d = random_detection(&mut rng, 16);
            let f = encode_detection(&zero_bias, &d, Hide::Appearance).unwrap();
            assert_eq!(&f[..64], &enc0[..64]);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = ModelParams::new(ModelConfig::default(), 1);
        let d = Detection::new(0, BBox::default(), vec![0.0; 3]);
        assert!(matches!(
            encode_detection(&p, &d, Hide::None),
            Err(ModelError::AppearanceDim {
                expected: 16,
                found: 3
            })
        ));
    }

    #[test]
    fn zero_lstm_stays_at_origin() {
        let mut p = ModelParams::new(ModelConfig::default(), 1);
        p.lstm_input.fill(0.0);
        p.lstm_recurrent.fill(0.0);
        p.lstm_bias.fill(0.0);
        let h = encode_track(&p, &[vec![0.0; 68], vec![0.0; 68]]).unwrap();
        assert!(h.iter().all(|&x| x == 0.0));
        assert!(matches!(encode_track(&p, &[]), Err(ModelError::EmptyTrack)));
    }

    #[test]
    fn incremental_lstm_equals_recomputation() {
        let p = ModelParams::new(ModelConfig::default(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..68).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let scratch = encode_track(&p, &feats).unwrap();

        let mut tape = Tape::new();
        let bp = p.bind(&mut tape, false);
        let mut state = bp.zero_state(&mut tape, 1);
        for f in &feats[..5] {
            let x = tape.constant(row_matrix(f));
            state = bp.lstm_step(&mut tape, x, state).unwrap();
        }
        // Carry the state into a fresh tape and extend by one step.
        let (h, c) = (
            tape.value(state.hidden).clone(),
            tape.value(state.cell).clone(),
        );
        let mut tape2 = Tape::new();
        let bp2 = p.bind(&mut tape2, false);
        let carried = LstmState {
            hidden: tape2.constant(h),
            cell: tape2.constant(c),
        };
        let x = tape2.constant(row_matrix(&feats[5]));
        let next = bp2.lstm_step(&mut tape2, x, carried).unwrap();
        for (a, b) in tape2.value(next.hidden).iter().zip(&scratch) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn match_score_is_pure_and_finite() {
        let p = ModelParams::new(ModelConfig::default(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let t: Vec<f64> = (0..68).map(|_| rng.random_range(-10.0..10.0)).collect();
            let d: Vec<f64> = (0..68).map(|_| rng.random_range(-10.0..10.0)).collect();
            let s = match_score(&p, &t, &d).unwrap();
            assert!(s.is_finite());
            assert_eq!(s, match_score(&p, &t, &d).unwrap());
        }
    }

    #[test]
    fn permuting_detections_permutes_scores() {
        let p = ModelParams::new(ModelConfig::default(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let track: Vec<Detection> = (0..3).map(|_| random_detection(&mut rng, 16)).collect();
        let d0 = random_detection(&mut rng, 16);
        let d1 = random_detection(&mut rng, 16);
        let tr: Vec<&Detection> = track.iter().collect();
        let a = score_matrix(&p, std::slice::from_ref(&tr), &[&d0, &d1], Hide::None).unwrap();
        let b = score_matrix(&p, &[tr], &[&d1, &d0], Hide::None).unwrap();
        assert_eq!(a[[0, 0]], b[[0, 1]]);
        assert_eq!(a[[0, 1]], b[[0, 0]]);
        assert_eq!(a[[0, 2]], b[[0, 2]]);
    }

    #[test]
    fn score_matrix_shapes_and_exit_column() {
        let mut p = ModelParams::new(ModelConfig::default(), 7);
        p.exit_bias[[0, 0]] = 0.75;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dets: Vec<Detection> = (0..7).map(|_| random_detection(&mut rng, 16)).collect();
        let tracks: Vec<Vec<&Detection>> =
            vec![vec![&dets[0]], vec![&dets[1], &dets[2]], vec![&dets[3]]];
        let cands: Vec<&Detection> = dets[3..7].iter().collect();
        let s = score_matrix(&p, &tracks, &cands, Hide::None).unwrap();
        assert_eq!(s.dim(), (3, 5));
        assert!(s.column(4).iter().all(|&x| x == 0.75));
        let s = score_matrix(&p, &tracks, &[], Hide::None).unwrap();
        assert_eq!(s.dim(), (3, 1));
        assert!(s.iter().all(|&x| x == 0.75));
    }
}
