//! CLEAR MOT and identity metrics.

use crate::datamodel::{BBox, Track};
use crate::transition::hungarian;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use thiserror::Error;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
const MOSTLY_TRACKED: f64 = 0.8;
const MOSTLY_LOST: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction references frame {frame} but ground truth has {gt_frames} frames")]
    FrameRange { frame: usize, gt_frames: usize },
    #[error("track {id} appears twice in frame {frame}")]
    DuplicateId { id: u64, frame: usize },
    #[error("{predicted} predicted sequences for {ground_truth} ground-truth sequences")]
    SequenceCount {
        predicted: usize,
        ground_truth: usize,
    },
}

/// Raw event counts; they add across sequences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub gt_detections: usize,
    pub pred_detections: usize,
    pub matches: usize,
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
    pub frag: usize,
    pub gt_tracks: usize,
    pub mt: usize,
    pub ml: usize,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.gt_detections += o.gt_detections;
        self.pred_detections += o.pred_detections;
        self.matches += o.matches;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.idsw += o.idsw;
        self.frag += o.frag;
        self.gt_tracks += o.gt_tracks;
        self.mt += o.mt;
        self.ml += o.ml;
        self.idtp += o.idtp;
        self.idfp += o.idfp;
        self.idfn += o.idfn;
    }
}

impl Counts {
    /// `1 − (FP + FN + IDSW) / GT`. With no ground truth, 1 when there are
    /// no errors and −∞ otherwise.
    pub fn mota(&self) -> f64 {
        let errors = (self.fp + self.fn_ + self.idsw) as f64;
        if self.gt_detections == 0 {
            return if errors == 0.0 {
                1.0
            } else {
                f64::NEG_INFINITY
            };
        }
        1.0 - errors / self.gt_detections as f64
    }

    /// `2·IDTP / (2·IDTP + IDFP + IDFN)`; 1 when both sides are empty.
    pub fn idf1(&self) -> f64 {
        let denom = 2 * self.idtp + self.idfp + self.idfn;
        if denom == 0 {
            return 1.0;
        }
        2.0 * self.idtp as f64 / denom as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub counts: Counts,
    pub per_sequence: Vec<SequenceReport>,
}

impl EvalReport {
    pub fn mota(&self) -> f64 {
        self.counts.mota()
    }

    pub fn idf1(&self) -> f64 {
        self.counts.idf1()
    }

    fn rows(&self) -> Vec<(&str, &Counts)> {
        let mut rows: Vec<(&str, &Counts)> = self
            .per_sequence
            .iter()
            .map(|s| (s.name.as_str(), &s.counts))
            .collect();
        rows.push(("OVERALL", &self.counts));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("sequence,mota,idf1,fp,fn,idsw,frag,mt,ml,gt_tracks,gt_detections\n");
        for (name, c) in self.rows() {
            writeln!(
                out,
                "{name},{:.6},{:.6},{},{},{},{},{},{},{},{}",
                c.mota(),
                c.idf1(),
                c.fp,
                c.fn_,
                c.idsw,
                c.frag,
                c.mt,
                c.ml,
                c.gt_tracks,
                c.gt_detections
            )
            .expect("write to string");
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self
            .rows()
            .iter()
            .map(|(n, _)| n.len())
            .max()
            .unwrap_or(8)
            .max(8);
        let mut out = format!(
            "{:<width$} {:>7} {:>7} {:>6} {:>6} {:>5} {:>5} {:>4} {:>4}\n",
            "sequence", "MOTA", "IDF1", "FP", "FN", "IDSW", "Frag", "MT", "ML"
        );
        for (name, c) in self.rows() {
            writeln!(
                out,
                "{name:<width$} {:>7.3} {:>7.3} {:>6} {:>6} {:>5} {:>5} {:>4} {:>4}",
                c.mota(),
                c.idf1(),
                c.fp,
                c.fn_,
                c.idsw,
                c.frag,
                c.mt,
                c.ml
            )
            .expect("write to string");
        }
        out
    }
}

/// Per-frame `(id, box)` lists from tracks.
pub fn tracks_to_frames(
    tracks: &[Track],
    num_frames: usize,
) -> Result<Vec<Vec<(u64, BBox)>>, MetricsError> {
    let mut frames = vec![Vec::new(); num_frames];
    for t in tracks {
        for e in &t.entries {
            let frame = frames
                .get_mut(e.frame_index)
                .ok_or(MetricsError::FrameRange {
                    frame: e.frame_index,
                    gt_frames: num_frames,
                })?;
            frame.push((t.id, e.bbox));
        }
    }
    Ok(frames)
}

fn check_unique(frames: &[Vec<(u64, BBox)>]) -> Result<(), MetricsError> {
    for (frame, objs) in frames.iter().enumerate() {
        let mut seen = std::collections::HashSet::new();
        for (id, _) in objs {
            if !seen.insert(*id) {
                return Err(MetricsError::DuplicateId { id: *id, frame });
            }
        }
    }
    Ok(())
}

/// Scores `predicted` against per-frame ground truth `(id, box)` lists.
pub fn evaluate(
    predicted: &[Track],
    gt: &[Vec<(u64, BBox)>],
    iou_threshold: f64,
) -> Result<EvalReport, MetricsError> {
    let pred = tracks_to_frames(predicted, gt.len())?;
    let counts = evaluate_frames(&pred, gt, iou_threshold)?;
    Ok(EvalReport {
        counts,
        per_sequence: Vec::new(),
    })
}

/// One named sequence: predicted tracks and per-frame ground truth.
pub type SequenceRun = (String, Vec<Track>, Vec<Vec<(u64, BBox)>>);

/// Evaluates several sequences and sums their counts.
pub fn evaluate_many(
    sequences: &[SequenceRun],
    iou_threshold: f64,
) -> Result<EvalReport, MetricsError> {
    use rayon::prelude::*;
    let per_sequence = sequences
        .par_iter()
        .map(|(name, tracks, gt)| {
            evaluate(tracks, gt, iou_threshold).map(|r| SequenceReport {
                name: name.clone(),
                counts: r.counts,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut counts = Counts::default();
    for s in &per_sequence {
        counts += s.counts;
    }
    Ok(EvalReport {
        counts,
        per_sequence,
    })
}

/// Frame-by-frame CLEAR matching followed by global identity matching.
pub fn evaluate_frames(
    pred: &[Vec<(u64, BBox)>],
    gt: &[Vec<(u64, BBox)>],
    iou_threshold: f64,
) -> Result<Counts, MetricsError> {
    if pred.len() > gt.len() {
        return Err(MetricsError::FrameRange {
            frame: pred.len() - 1,
            gt_frames: gt.len(),
        });
    }
    check_unique(pred)?;
    check_unique(gt)?;
    let empty = Vec::new();
    let mut c = Counts::default();
    // Last matched prediction of each GT id, and whether it was tracked in
    // its previous present frame.
    let mut last_match: HashMap<u64, u64> = HashMap::new();
    let mut was_tracked: HashMap<u64, bool> = HashMap::new();
    let mut gt_present: BTreeMap<u64, usize> = BTreeMap::new();
    let mut gt_matched: BTreeMap<u64, usize> = BTreeMap::new();
    // Identity overlap counts for IDF1.
    let mut overlap: HashMap<(u64, u64), usize> = HashMap::new();
    let mut pred_len: BTreeMap<u64, usize> = BTreeMap::new();

    for (t, g) in gt.iter().enumerate() {
        let p = pred.get(t).unwrap_or(&empty);
        c.gt_detections += g.len();
        c.pred_detections += p.len();
        for (id, _) in g {
            *gt_present.entry(*id).or_default() += 1;
        }
        for (id, _) in p {
            *pred_len.entry(*id).or_default() += 1;
        }
        let iou: Vec<Vec<f64>> = g
            .iter()
            .map(|(_, gb)| p.iter().map(|(_, pb)| gb.iou(pb)).collect())
            .collect();
        for (gi, (gid, _)) in g.iter().enumerate() {
            for (pi, (pid, _)) in p.iter().enumerate() {
                if iou[gi][pi] >= iou_threshold {
                    *overlap.entry((*gid, *pid)).or_default() += 1;
                }
            }
        }

        let mut g_match: Vec<Option<usize>> = vec![None; g.len()];
        let mut p_used = vec![false; p.len()];
        for (gi, (gid, _)) in g.iter().enumerate() {
            if let Some(prev) = last_match.get(gid) {
                if let Some(pi) = p.iter().position(|(pid, _)| pid == prev) {
                    if !p_used[pi] && iou[gi][pi] >= iou_threshold {
                        g_match[gi] = Some(pi);
                        p_used[pi] = true;
                    }
                }
            }
        }
        let free_g: Vec<usize> = (0..g.len()).filter(|&i| g_match[i].is_none()).collect();
        let free_p: Vec<usize> = (0..p.len()).filter(|&i| !p_used[i]).collect();
        if !free_g.is_empty() && !free_p.is_empty() {
            // Pairs below threshold get a cost no valid assignment would pick.
            let cost = Array2::from_shape_fn((free_g.len(), free_p.len()), |(a, b)| {
                let v = iou[free_g[a]][free_p[b]];
                if v >= iou_threshold {
                    1.0 - v
                } else {
                    1e6
                }
            });
            for (a, b) in hungarian(&cost).pairs {
                let (gi, pi) = (free_g[a], free_p[b]);
                if iou[gi][pi] >= iou_threshold {
                    g_match[gi] = Some(pi);
                    p_used[pi] = true;
                }
            }
        }

        for (gi, (gid, _)) in g.iter().enumerate() {
            let tracked = g_match[gi].is_some();
            if let Some(pi) = g_match[gi] {
                let pid = p[pi].0;
                c.matches += 1;
                *gt_matched.entry(*gid).or_default() += 1;
                if let Some(prev) = last_match.insert(*gid, pid) {
                    if prev != pid {
                        c.idsw += 1;
                    }
                }
                if was_tracked.get(gid) == Some(&false) && gt_matched[gid] > 1 {
                    c.frag += 1;
                }
            } else {
                c.fn_ += 1;
            }
            was_tracked.insert(*gid, tracked);
        }
        c.fp += p_used.iter().filter(|u| !**u).count();
    }

    c.gt_tracks = gt_present.len();
    for (id, &present) in &gt_present {
        let ratio = gt_matched.get(id).copied().unwrap_or(0) as f64 / present as f64;
        if ratio >= MOSTLY_TRACKED {
            c.mt += 1;
        } else if ratio <= MOSTLY_LOST {
            c.ml += 1;
        }
    }

    let gt_ids: Vec<u64> = gt_present.keys().copied().collect();
    let pred_ids: Vec<u64> = pred_len.keys().copied().collect();
    c.idtp = 0;
    if !gt_ids.is_empty() && !pred_ids.is_empty() {
        let cost = Array2::from_shape_fn((gt_ids.len(), pred_ids.len()), |(a, b)| {
            -(overlap.get(&(gt_ids[a], pred_ids[b])).copied().unwrap_or(0) as f64)
        });
        c.idtp = hungarian(&cost)
            .pairs
            .iter()
            .map(|&(a, b)| overlap.get(&(gt_ids[a], pred_ids[b])).copied().unwrap_or(0))
            .sum();
    }
    c.idfp = c.pred_detections - c.idtp;
    c.idfn = c.gt_detections - c.idtp;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::TrackEntry;
    use proptest::prelude::*;

    fn track(id: u64, frames: std::ops::Range<usize>, x: impl Fn(usize) -> f64) -> Track {
        let mut t = Track::new(id);
        for f in frames {
            t.push(TrackEntry {
                frame_index: f,
                detection: None,
                bbox: BBox::new(x(f), 50.0, 10.0, 10.0),
            });
        }
        t
    }

    fn gt_from(tracks: &[Track], frames: usize) -> Vec<Vec<(u64, BBox)>> {
        tracks_to_frames(tracks, frames).unwrap()
    }

    #[test]
    fn identical_prediction_is_perfect() {
        let gt_tracks = vec![
            track(1, 0..10, |f| f as f64 * 3.0),
            track(2, 2..8, |f| 200.0 - f as f64),
        ];
        let gt = gt_from(&gt_tracks, 10);
        let r = evaluate(&gt_tracks, &gt, 0.5).unwrap();
        assert_eq!(r.mota(), 1.0);
        assert_eq!(r.idf1(), 1.0);
        let c = r.counts;
        assert_eq!((c.fp, c.fn_, c.idsw, c.frag, c.ml), (0, 0, 0, 0, 0));
        assert_eq!(c.mt, 2);
    }

    #[test]
    fn split_track_costs_one_switch_and_half_identity() {
        let gt = gt_from(&[track(1, 0..10, |_| 0.0)], 10);
        let pred = vec![track(7, 0..5, |_| 0.0), track(8, 5..10, |_| 0.0)];
        let c = evaluate(&pred, &gt, 0.5).unwrap().counts;
        assert_eq!(c.idsw, 1);
        assert_eq!((c.idtp, c.idfp, c.idfn), (5, 5, 5));
        assert!((c.mota() - 0.9).abs() < 1e-12);
        assert!((c.idf1() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_prediction_misses_everything() {
        let gt = gt_from(&[track(1, 0..10, |_| 0.0)], 10);
        let c = evaluate(&[], &gt, 0.5).unwrap().counts;
        assert_eq!(c.fn_, 10);
        assert_eq!(c.mota(), 0.0);
        assert_eq!(c.idf1(), 0.0);
        assert_eq!(c.ml, 1);
    }

    #[test]
    fn fragmentation_counts_resumed_tracking() {
        let gt = gt_from(&[track(1, 0..10, |_| 0.0)], 10);
        let mut pred = track(3, 0..10, |_| 0.0);
        pred.entries
            .retain(|e| e.frame_index != 4 && e.frame_index != 5);
        let c = evaluate(&[pred], &gt, 0.5).unwrap().counts;
        assert_eq!((c.frag, c.fn_, c.idsw), (1, 2, 0));
    }

    #[test]
    fn continuity_keeps_previous_correspondence() {
        // Two predictions overlap the GT box from frame 2 on; the closer one
        // is new, but the established one is kept.
        let gt = gt_from(&[track(1, 0..4, |_| 0.0)], 4);
        let old = track(5, 0..4, |f| if f < 2 { 0.0 } else { 2.0 });
        let new = track(6, 2..4, |_| 0.0);
        let c = evaluate(&[old, new], &gt, 0.5).unwrap().counts;
        assert_eq!((c.idsw, c.fp), (0, 2));
    }

    #[test]
    fn out_of_range_prediction_is_rejected() {
        let gt = gt_from(&[track(1, 0..3, |_| 0.0)], 3);
        assert!(matches!(
            evaluate(&[track(1, 0..5, |_| 0.0)], &gt, 0.5),
            Err(MetricsError::FrameRange { .. })
        ));
    }

    #[test]
    fn evaluate_many_sums_sequences() {
        let a = gt_from(&[track(1, 0..10, |_| 0.0)], 10);
        let seqs = vec![
            ("a".to_string(), vec![track(1, 0..10, |_| 0.0)], a.clone()),
            ("b".to_string(), vec![], a),
        ];
        let r = evaluate_many(&seqs, 0.5).unwrap();
        assert_eq!(r.per_sequence.len(), 2);
        assert_eq!(r.counts.gt_detections, 20);
        assert!((r.mota() - 0.5).abs() < 1e-12);
        assert!(r.to_csv().lines().count() == 4);
        assert!(r.to_table().contains("OVERALL"));
    }

    fn scene() -> (Vec<Track>, Vec<Vec<(u64, BBox)>>) {
        let gt_tracks = vec![
            track(1, 0..12, |f| f as f64 * 4.0),
            track(2, 3..12, |f| 300.0 - f as f64 * 4.0),
            track(3, 0..6, |_| 150.0),
        ];
        let gt = gt_from(&gt_tracks, 12);
        let pred = vec![
            track(10, 0..7, |f| f as f64 * 4.0),
            track(11, 7..12, |f| f as f64 * 4.0 + 1.0),
            track(12, 3..12, |f| 300.0 - f as f64 * 4.0),
            track(13, 0..9, |_| 151.0),
        ];
        (pred, gt)
    }

    proptest! {
        #[test]
        fn relabeling_ids_changes_nothing(offset in 1u64..1000, swap in any::<bool>()) {
            let (pred, gt) = scene();
            let base = evaluate(&pred, &gt, 0.5).unwrap().counts;
            let mut relabeled = pred.clone();
            for t in &mut relabeled {
                t.id += offset;
            }
            if swap {
                let a = relabeled[0].id;
                relabeled[0].id = relabeled[1].id;
                relabeled[1].id = a;
            }
            prop_assert_eq!(evaluate(&relabeled, &gt, 0.5).unwrap().counts, base);
        }

        #[test]
        fn injected_false_positives_lower_mota(k in 1usize..20) {
            let (_, gt) = scene();
            let perfect: Vec<Track> = {
                let mut by_id: BTreeMap<u64, Track> = BTreeMap::new();
                for (f, objs) in gt.iter().enumerate() {
                    for (id, b) in objs {
                        by_id.entry(*id).or_insert_with(|| Track::new(*id)).push(TrackEntry {
                            frame_index: f,
                            detection: None,
                            bbox: *b,
                        });
                    }
                }
                by_id.into_values().collect()
            };
            let mut last = evaluate(&perfect, &gt, 0.5).unwrap().mota();
            prop_assert_eq!(last, 1.0);
            let mut with_fp = perfect.clone();
            for i in 0..k {
                with_fp.push(track(1000 + i as u64, (i % 12)..(i % 12 + 1), |_| 900.0));
                let m = evaluate(&with_fp, &gt, 0.5).unwrap().mota();
                prop_assert!(m < last);
                last = m;
            }
        }
    }

    #[test]
    fn idf1_is_one_only_for_a_covering_bijection() {
        let (pred, gt) = scene();
        assert!(evaluate(&pred, &gt, 0.5).unwrap().idf1() < 1.0);
        let mut merged = pred.clone();
        let tail = merged.remove(1);
        merged[0].entries.extend(tail.entries);
        merged[2].entries.truncate(6);
        assert_eq!(evaluate(&merged, &gt, 0.5).unwrap().idf1(), 1.0);
    }
}
