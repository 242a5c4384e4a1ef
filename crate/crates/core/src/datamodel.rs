//! Tracking data types and MOTChallenge text I/O.
//!
//! Boxes are stored center-point internally and converted to the top-left
//! convention only at file boundaries.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::BufRead;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: expected at least 10 comma-separated fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: field {field} is not numeric: {value:?}")]
    NotNumeric {
        line: usize,
        field: usize,
        value: String,
    },
    #[error("line {line}: frame numbers are 1-based, found {frame}")]
    BadFrame { line: usize, frame: i64 },
    #[error("line {line}: expected {expected} appearance values, found {found}")]
    AppearanceLength {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: negative box size")]
    NegativeSize { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box, center-point convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_top_left(left: f64, top: f64, w: f64, h: f64) -> Self {
        Self::new(left + w / 2.0, top + h / 2.0, w, h)
    }

    pub fn left(&self) -> f64 {
        self.x - self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.y - self.h / 2.0
    }

    pub fn right(&self) -> f64 {
        self.x + self.w / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Closed-rectangle intersection test (touching edges count).
    pub fn intersects(&self, other: &BBox) -> bool {
        self.left() <= other.right()
            && other.left() <= self.right()
            && self.top() <= other.bottom()
            && other.top() <= self.bottom()
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.left().max(other.left())).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.top().max(other.top())).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Provenance of a detection: which corpus sequence, frame and slot it came
/// from. Artificial detections keep the provenance of the detection their
/// appearance was copied from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct SourceId {
    pub sequence: usize,
    pub frame: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_index: usize,
    pub bbox: BBox,
    pub appearance: Vec<f64>,
    pub is_artificial: bool,
    pub source_id: SourceId,
}

impl Detection {
    pub fn new(frame_index: usize, bbox: BBox, appearance: Vec<f64>) -> Self {
        Self {
            frame_index,
            bbox,
            appearance,
            is_artificial: false,
            source_id: SourceId::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FrameDetections {
    pub frame_index: usize,
    pub detections: Vec<Detection>,
}

impl FrameDetections {
    pub fn new(frame_index: usize, detections: Vec<Detection>) -> Self {
        Self {
            frame_index,
            detections,
        }
    }

    pub fn empty(frame_index: usize) -> Self {
        Self::new(frame_index, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub frame_index: usize,
    /// Slot of the detection within its frame, when known.
    pub detection: Option<usize>,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: u64,
    pub entries: Vec<TrackEntry>,
    pub terminated: bool,
}

impl Track {
    pub fn new(id: u64) -> Self {
        Self {
            id,
            entries: Vec::new(),
            terminated: false,
        }
    }

    /// Appends an entry, keeping frame indices strictly increasing.
    pub fn push(&mut self, entry: TrackEntry) -> bool {
        if let Some(last) = self.entries.last() {
            if last.frame_index >= entry.frame_index {
                return false;
            }
        }
        self.entries.push(entry);
        true
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.entries.last().map(|e| e.frame_index)
    }
}

/// A contiguous window of `n + 1` frames used as one training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub frames: Vec<FrameDetections>,
    pub n: usize,
    /// Corpus sequence the window was cut from.
    pub sequence: usize,
    /// Corpus frame index of the window's first frame.
    pub start: usize,
    /// Set when artificial detections were requested but none could be made.
    pub artificial_skipped: bool,
}

impl SequenceSample {
    pub fn new(frames: Vec<FrameDetections>, sequence: usize, start: usize) -> Self {
        let n = frames.len().saturating_sub(1);
        Self {
            frames,
            n,
            sequence,
            start,
            artificial_skipped: false,
        }
    }

    pub fn first(&self) -> &FrameDetections {
        &self.frames[0]
    }

    pub fn last(&self) -> &FrameDetections {
        &self.frames[self.n]
    }
}

/// Unlabeled detection sequences used for training. Construction stamps
/// every detection's [`SourceId`] with its position in the corpus.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub sequences: Vec<Vec<FrameDetections>>,
}

impl Corpus {
    pub fn new(mut sequences: Vec<Vec<FrameDetections>>) -> Self {
        for (s, seq) in sequences.iter_mut().enumerate() {
            for (f, frame) in seq.iter_mut().enumerate() {
                frame.frame_index = f;
                for (i, d) in frame.detections.iter_mut().enumerate() {
                    d.frame_index = f;
                    d.source_id = SourceId {
                        sequence: s,
                        frame: f,
                        index: i,
                    };
                }
            }
        }
        Self { sequences }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Appearance dimension of the first detection found, if any.
    pub fn appearance_dim(&self) -> Option<usize> {
        self.sequences
            .iter()
            .flatten()
            .flat_map(|f| f.detections.first())
            .map(|d| d.appearance.len())
            .next()
    }
}

/// One parsed MOTChallenge line.
#[derive(Debug, Clone, PartialEq)]
pub struct MotRecord {
    /// 0-based frame.
    pub frame: usize,
    pub id: i64,
    pub bbox: BBox,
    pub extra: Vec<f64>,
}

fn parse_field(line: usize, field: usize, raw: &str) -> Result<f64, FormatError> {
    raw.trim()
        .parse::<f64>()
        .map_err(|_| FormatError::NotNumeric {
            line,
            field,
            value: raw.to_string(),
        })
}

/// Parses MOTChallenge lines `frame,id,left,top,w,h,conf,x,y,z[,extra...]`.
/// Blank lines are skipped; columns after the tenth are returned as `extra`.
pub fn read_mot_records(reader: impl BufRead) -> Result<Vec<MotRecord>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() < 10 {
            return Err(FormatError::FieldCount {
                line: line_no,
                found: fields.len(),
            });
        }
        let values = fields
            .iter()
            .enumerate()
            .map(|(f, raw)| parse_field(line_no, f + 1, raw))
            .collect::<Result<Vec<f64>, _>>()?;
        let frame = values[0];
        if frame < 1.0 || frame.fract() != 0.0 {
            return Err(FormatError::BadFrame {
                line: line_no,
                frame: frame as i64,
            });
        }
        if values[4] < 0.0 || values[5] < 0.0 {
            return Err(FormatError::NegativeSize { line: line_no });
        }
        out.push(MotRecord {
            frame: frame as usize - 1,
            id: values[1] as i64,
            bbox: BBox::from_top_left(values[2], values[3], values[4], values[5]),
            extra: values[10..].to_vec(),
        });
    }
    Ok(out)
}

/// Reads a detection file into per-frame lists, filling gaps with empty
/// frames. Columns after the tenth carry the appearance vector; when they are
/// absent the appearance is `appearance_dim` zeros.
pub fn read_mot_detections(
    reader: impl BufRead,
    appearance_dim: usize,
) -> Result<Vec<FrameDetections>, FormatError> {
    let records = read_mot_records(reader)?;
    let num_frames = records.iter().map(|r| r.frame + 1).max().unwrap_or(0);
    let mut frames: Vec<FrameDetections> = (0..num_frames).map(FrameDetections::empty).collect();
    for (line, rec) in records.into_iter().enumerate() {
        let appearance = if rec.extra.is_empty() {
            vec![0.0; appearance_dim]
        } else if rec.extra.len() == appearance_dim {
            rec.extra
        } else {
            return Err(FormatError::AppearanceLength {
                line: line + 1,
                expected: appearance_dim,
                found: rec.extra.len(),
            });
        };
        let frame = &mut frames[rec.frame];
        let index = frame.detections.len();
        let mut det = Detection::new(rec.frame, rec.bbox, appearance);
        det.source_id = SourceId {
            sequence: 0,
            frame: rec.frame,
            index,
        };
        frame.detections.push(det);
    }
    Ok(frames)
}

/// Reads a result or ground-truth file into tracks keyed by the id column.
pub fn read_mot_tracks(reader: impl BufRead) -> Result<Vec<Track>, FormatError> {
    let records = read_mot_records(reader)?;
    let mut by_id: std::collections::BTreeMap<i64, Vec<TrackEntry>> = Default::default();
    for rec in records {
        by_id.entry(rec.id).or_default().push(TrackEntry {
            frame_index: rec.frame,
            detection: None,
            bbox: rec.bbox,
        });
    }
    Ok(by_id
        .into_iter()
        .map(|(id, mut entries)| {
            entries.sort_by_key(|e| e.frame_index);
            entries.dedup_by_key(|e| e.frame_index);
            Track {
                id: id as u64,
                entries,
                terminated: true,
            }
        })
        .collect())
}

fn write_line(out: &mut String, frame: usize, id: i64, b: &BBox, tail: &str) {
    let _ = write!(
        out,
        "{},{},{:.2},{:.2},{:.2},{:.2},{}",
        frame + 1,
        id,
        b.left(),
        b.top(),
        b.w,
        b.h,
        tail
    );
    out.push('\n');
}

/// MOTChallenge result lines, sorted by frame then track id.
pub fn write_mot_tracks(tracks: &[Track]) -> String {
    let mut rows: Vec<(usize, u64, BBox)> = tracks
        .iter()
        .flat_map(|t| t.entries.iter().map(move |e| (e.frame_index, t.id, e.bbox)))
        .collect();
    rows.sort_by_key(|&(f, id, _)| (f, id));
    let mut out = String::new();
    for (frame, id, b) in rows {
        write_line(&mut out, frame, id as i64, &b, "1,-1,-1,-1");
    }
    out
}

/// Detection lines with the appearance vector appended after the tenth
/// column; ids are written as -1.
pub fn write_mot_detections(frames: &[FrameDetections]) -> String {
    let mut out = String::new();
    for frame in frames {
        for d in &frame.detections {
            let mut tail = String::from("1,-1,-1,-1");
            for a in &d.appearance {
                let _ = write!(tail, ",{a:.6}");
            }
            write_line(&mut out, frame.frame_index, -1, &d.bbox, &tail);
        }
    }
    out
}

/// Ground-truth lines `frame,id,left,top,w,h,1,1,1,-1` for per-frame
/// `(object id, box)` lists.
pub fn write_mot_ground_truth(frames: &[Vec<(u64, BBox)>]) -> String {
    let mut out = String::new();
    for (f, objects) in frames.iter().enumerate() {
        let mut sorted = objects.clone();
        sorted.sort_by_key(|(id, _)| *id);
        for (id, b) in sorted {
            write_line(&mut out, f, id as i64, &b, "1,1,1,-1");
        }
    }
    out
}
