//! Tracking metrics: GOSPA with its decomposition and a CLEAR-style score
//! sweep (AMOTA-lite, identity switches, fragmentations).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::bp::Estimate;
use crate::simulator::GroundTruth;
use crate::TrackId;

/// A labelled position, optionally scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub id: TrackId,
    pub pos: [f64; 2],
    pub score: f64,
}

pub fn estimate_points(frames: &[Vec<Estimate>]) -> Vec<Vec<TrackPoint>> {
    frames
        .iter()
        .map(|f| {
            f.iter()
                .map(|e| TrackPoint {
                    id: e.track_id,
                    pos: [e.state.px, e.state.py],
                    score: e.score,
                })
                .collect()
        })
        .collect()
}

pub fn truth_points(gt: &GroundTruth) -> Vec<Vec<TrackPoint>> {
    gt.frames
        .iter()
        .map(|f| {
            f.iter()
                .map(|o| TrackPoint {
                    id: o.id,
                    pos: [o.state.px, o.state.py],
                    score: 1.0,
                })
                .collect()
        })
        .collect()
}

fn dist(a: &TrackPoint, b: &TrackPoint) -> f64 {
    (a.pos[0] - b.pos[0]).hypot(a.pos[1] - b.pos[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GospaParams {
    pub c: f64,
    pub p: f64,
}

impl Default for GospaParams {
    fn default() -> Self {
        GospaParams { c: 10.0, p: 2.0 }
    }
}

/// GOSPA (alpha = 2) of one frame, in p-th power units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GospaTerms {
    pub localization: f64,
    pub false_: f64,
    pub missed: f64,
}

impl GospaTerms {
    pub fn total(&self) -> f64 {
        self.localization + self.false_ + self.missed
    }

    /// The metric value itself (p-th root of the total).
    pub fn distance(&self, p: f64) -> f64 {
        self.total().powf(1.0 / p)
    }

    fn add(&mut self, o: &GospaTerms) {
        self.localization += o.localization;
        self.false_ += o.false_;
        self.missed += o.missed;
    }
}

pub fn gospa_frame(est: &[TrackPoint], gt: &[TrackPoint], gp: GospaParams) -> GospaTerms {
    let cp = gp.c.powf(gp.p);
    let cost: Vec<Vec<f64>> = est
        .iter()
        .map(|e| gt.iter().map(|g| dist(e, g).min(gp.c).powf(gp.p)).collect())
        .collect();
    let mut t = GospaTerms::default();
    let mut matched = 0;
    if !est.is_empty() && !gt.is_empty() {
        for (r, c) in assignment::solve(&cost).into_iter().enumerate() {
            if let Some(c) = c {
                if dist(&est[r], &gt[c]) < gp.c {
                    t.localization += cost[r][c];
                    matched += 1;
                }
            }
        }
    }
    t.false_ = 0.5 * cp * (est.len() - matched) as f64;
    t.missed = 0.5 * cp * (gt.len() - matched) as f64;
    t
}

/// Per-frame GOSPA terms and their sum over frames. Missing trailing frames
/// on either side count as empty.
pub fn gospa(est: &[Vec<TrackPoint>], gt: &[Vec<TrackPoint>], gp: GospaParams) -> (GospaTerms, Vec<GospaTerms>) {
    let n = est.len().max(gt.len());
    let empty = Vec::new();
    let per: Vec<GospaTerms> = (0..n)
        .map(|k| gospa_frame(est.get(k).unwrap_or(&empty), gt.get(k).unwrap_or(&empty), gp))
        .collect();
    let mut sum = GospaTerms::default();
    per.iter().for_each(|t| sum.add(t));
    (sum, per)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClearParams {
    pub dist_thresh: f64,
    pub n_recall_points: usize,
    /// Upper bound on the number of score thresholds evaluated.
    pub max_thresholds: usize,
}

impl Default for ClearParams {
    fn default() -> Self {
        ClearParams {
            dist_thresh: 2.0,
            n_recall_points: 40,
            max_thresholds: 200,
        }
    }
}

/// CLEAR counts at one score threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClearCounts {
    pub gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    pub frag: usize,
}

impl ClearCounts {
    pub fn recall(&self) -> f64 {
        if self.gt == 0 {
            1.0
        } else {
            self.tp as f64 / self.gt as f64
        }
    }

    pub fn mota(&self) -> f64 {
        if self.gt == 0 {
            return if self.fp == 0 { 1.0 } else { 0.0 };
        }
        1.0 - (self.fn_ + self.fp + self.ids) as f64 / self.gt as f64
    }
}

/// Frame-by-frame matching of estimates with score at least `threshold`.
pub fn clear_counts(
    est: &[Vec<TrackPoint>],
    gt: &[Vec<TrackPoint>],
    threshold: f64,
    dist_thresh: f64,
) -> ClearCounts {
    let mut c = ClearCounts::default();
    let mut last_match: HashMap<TrackId, TrackId> = HashMap::new();
    let mut matched_prev: HashMap<TrackId, bool> = HashMap::new();
    let empty = Vec::new();
    for k in 0..est.len().max(gt.len()) {
        let e: Vec<&TrackPoint> = est
            .get(k)
            .unwrap_or(&empty)
            .iter()
            .filter(|p| p.score >= threshold)
            .collect();
        let g = gt.get(k).unwrap_or(&empty);
        c.gt += g.len();
        let mut gt_match: Vec<Option<usize>> = vec![None; g.len()];
        if !e.is_empty() && !g.is_empty() {
            let cost: Vec<Vec<f64>> = g
                .iter()
                .map(|gp| {
                    e.iter()
                        .map(|ep| {
                            let d = dist(gp, ep);
                            if d <= dist_thresh {
                                d
                            } else {
                                1e6
                            }
                        })
                        .collect()
                })
                .collect();
            for (r, col) in assignment::solve(&cost).into_iter().enumerate() {
                if let Some(col) = col {
                    if dist(&g[r], e[col]) <= dist_thresh {
                        gt_match[r] = Some(col);
                    }
                }
            }
        }
        let n_matched = gt_match.iter().flatten().count();
        c.tp += n_matched;
        c.fn_ += g.len() - n_matched;
        c.fp += e.len() - n_matched;
        let mut now: HashMap<TrackId, bool> = HashMap::new();
        for (r, m) in gt_match.iter().enumerate() {
            let gid = g[r].id;
            match m {
                Some(col) => {
                    let tid = e[*col].id;
                    if let Some(prev) = last_match.insert(gid, tid) {
                        if prev != tid {
                            c.ids += 1;
                        }
                    }
                }
                None => {
                    if matched_prev.get(&gid).copied().unwrap_or(false) {
                        c.frag += 1;
                    }
                }
            }
            now.insert(gid, m.is_some());
        }
        matched_prev = now;
    }
    c
}

/// Result of a score sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearSweep {
    pub amota: f64,
    /// `(recall target, MOTAR)` pairs.
    pub curve: Vec<(f64, f64)>,
    /// Counts at the threshold with the highest MOTA.
    pub best: ClearCounts,
}

/// Candidate thresholds: distinct scores, thinned by rank so the result
/// depends only on the score ordering.
fn thresholds(est: &[Vec<TrackPoint>], max: usize) -> Vec<f64> {
    let mut s: Vec<f64> = est.iter().flatten().map(|p| p.score).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.dedup();
    if s.len() <= max || max < 2 {
        return s;
    }
    let step = (s.len() - 1) as f64 / (max - 1) as f64;
    let mut out: Vec<f64> = (0..max).map(|k| s[(k as f64 * step).round() as usize]).collect();
    out.dedup();
    out
}

pub fn clear_sweep(est: &[Vec<TrackPoint>], gt: &[Vec<TrackPoint>], cp: ClearParams) -> ClearSweep {
    let ths = thresholds(est, cp.max_thresholds);
    let counts: Vec<ClearCounts> = if ths.is_empty() {
        vec![clear_counts(est, gt, f64::INFINITY, cp.dist_thresh)]
    } else {
        ths.iter()
            .map(|t| clear_counts(est, gt, *t, cp.dist_thresh))
            .collect()
    };
    // thresholds run from high to low, so the last maximum is the lowest
    // threshold among ties
    let best = *counts
        .iter()
        .rev()
        .max_by(|a, b| a.mota().total_cmp(&b.mota()))
        .expect("at least one threshold");
    let n = cp.n_recall_points.max(1);
    let curve: Vec<(f64, f64)> = (1..=n)
        .map(|k| {
            let r = k as f64 / n as f64;
            let motar = counts
                .iter()
                .find(|c| c.recall() >= r - 1e-12)
                .map_or(0.0, |c| motar(c, r));
            (r, motar)
        })
        .collect();
    let amota = curve.iter().map(|(_, m)| m).sum::<f64>() / n as f64;
    ClearSweep { amota, curve, best }
}

/// MOTA corrected for the recall target, clipped to `[0, 1]`.
fn motar(c: &ClearCounts, r: f64) -> f64 {
    if c.gt == 0 {
        return c.mota();
    }
    let p = c.gt as f64;
    let err = (c.ids + c.fp + c.fn_) as f64 - (1.0 - r) * p;
    (1.0 - err / (r * p)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_frames: usize,
    pub gospa_total: f64,
    pub gospa_localization: f64,
    pub gospa_false: f64,
    pub gospa_missed: f64,
    pub mota_at_recall: Vec<(f64, f64)>,
    pub amota: f64,
    pub mota: f64,
    pub ids: usize,
    pub frag: usize,
}

impl EvalReport {
    pub const CSV_HEADER: [&'static str; 10] = [
        "n_frames",
        "gospa_total",
        "gospa_localization",
        "gospa_false",
        "gospa_missed",
        "amota",
        "mota",
        "ids",
        "frag",
        "label",
    ];

    pub fn csv_row(&self, label: &str) -> Vec<String> {
        vec![
            self.n_frames.to_string(),
            self.gospa_total.to_string(),
            self.gospa_localization.to_string(),
            self.gospa_false.to_string(),
            self.gospa_missed.to_string(),
            self.amota.to_string(),
            self.mota.to_string(),
            self.ids.to_string(),
            self.frag.to_string(),
            label.to_string(),
        ]
    }

    /// Mean of several reports; counts are summed.
    pub fn mean(reports: &[EvalReport]) -> Option<EvalReport> {
        let n = reports.len();
        if n == 0 {
            return None;
        }
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
        Some(EvalReport {
            n_frames: reports.iter().map(|r| r.n_frames).sum(),
            gospa_total: avg(|r| r.gospa_total),
            gospa_localization: avg(|r| r.gospa_localization),
            gospa_false: avg(|r| r.gospa_false),
            gospa_missed: avg(|r| r.gospa_missed),
            mota_at_recall: Vec::new(),
            amota: avg(|r| r.amota),
            mota: avg(|r| r.mota),
            ids: reports.iter().map(|r| r.ids).sum(),
            frag: reports.iter().map(|r| r.frag).sum(),
        })
    }
}

/// GOSPA terms are summed over frames.
pub fn evaluate(est: &[Vec<TrackPoint>], gt: &[Vec<TrackPoint>], gp: GospaParams, cp: ClearParams) -> EvalReport {
    let (g, _) = gospa(est, gt, gp);
    let s = clear_sweep(est, gt, cp);
    EvalReport {
        n_frames: est.len().max(gt.len()),
        gospa_total: g.total(),
        gospa_localization: g.localization,
        gospa_false: g.false_,
        gospa_missed: g.missed,
        mota_at_recall: s.curve,
        amota: s.amota,
        mota: s.best.mota(),
        ids: s.best.ids,
        frag: s.best.frag,
    }
}
