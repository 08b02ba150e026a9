//! Detection and proposal metrics: CorLoc, VOC-style AP at one or many IoU
//! thresholds, and average recall of ranked proposals.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::synthdata::GtObject;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    AllPoints,
    ElevenPoint,
}

/// IoU grid 0.50, 0.55, ..., 0.95.
pub fn iou_grid() -> Vec<f64> {
    (0..10).map(|k| f64::from(50 + 5 * k) / 100.0).collect()
}

fn box_key(b: &BBox) -> [f64; 4] {
    [b.x0, b.y0, b.x1, b.y1]
}

/// Confidence descending, then image, then box coordinates, so results do
/// not depend on input order.
fn ranked<'a>(dets: impl Iterator<Item = &'a Detection>) -> Vec<&'a Detection> {
    let mut v: Vec<&Detection> = dets.collect();
    v.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image.cmp(&b.image))
            .then_with(|| box_key(&a.bbox).iter().zip(box_key(&b.bbox).iter()).map(|(x, y)| x.total_cmp(y)).find(|o| *o != Ordering::Equal).unwrap_or(Ordering::Equal))
    });
    v
}

/// True-positive flags for one category's ranked detections, plus the number
/// of ground-truth objects of that category.
fn match_category(dets: &[Detection], gts: &[Vec<GtObject>], category: usize, thr: f64) -> (Vec<bool>, usize) {
    let npos = gts.iter().flatten().filter(|g| g.category == category).count();
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::new();
    for d in ranked(dets.iter().filter(|d| d.category == category)) {
        let mut best: Option<(usize, f64)> = None;
        if let Some(objects) = gts.get(d.image) {
            for (k, g) in objects.iter().enumerate() {
                if g.category != category || used[d.image][k] {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((k, v));
                }
            }
        }
        if let Some((k, _)) = best {
            used[d.image][k] = true;
        }
        tp.push(best.is_some());
    }
    (tp, npos)
}

fn curve(tp: &[bool], npos: usize) -> (Vec<f64>, Vec<f64>) {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / npos as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    (recall, precision)
}

fn area(recall: &[f64], precision: &[f64], interp: Interpolation) -> f64 {
    match interp {
        Interpolation::AllPoints => {
            let mut mrec = vec![0.0];
            mrec.extend_from_slice(recall);
            mrec.push(1.0);
            let mut mpre = vec![0.0];
            mpre.extend_from_slice(precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len()).filter(|&i| mrec[i] != mrec[i - 1]).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let t = f64::from(k) / 10.0;
                    recall.iter().zip(precision).filter(|(r, _)| **r >= t).map(|(_, p)| *p).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// AP for one category; `None` when it has no ground truth.
pub fn voc_ap(dets: &[Detection], gts: &[Vec<GtObject>], category: usize, thr: f64, interp: Interpolation) -> Option<f64> {
    let (tp, npos) = match_category(dets, gts, category, thr);
    if npos == 0 {
        return None;
    }
    let (recall, precision) = curve(&tp, npos);
    Some(area(&recall, &precision, interp))
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Mean AP over `categories` at one threshold.
pub fn mean_ap(dets: &[Detection], gts: &[Vec<GtObject>], categories: &[usize], thr: f64, interp: Interpolation) -> Option<f64> {
    mean(categories.iter().map(|&c| voc_ap(dets, gts, c, thr, interp)))
}

/// All-points AP for one category averaged over the 0.50:0.95 grid.
pub fn ap_range(dets: &[Detection], gts: &[Vec<GtObject>], category: usize) -> Option<f64> {
    mean(iou_grid().into_iter().map(|t| voc_ap(dets, gts, category, t, Interpolation::AllPoints)))
}

/// Fraction of the category's images whose top-confidence detection of that
/// category hits one of its objects at IoU >= 0.5.
pub fn corloc_category(dets: &[Detection], gts: &[Vec<GtObject>], category: usize) -> Option<f64> {
    let images: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].iter().any(|g| g.category == category)).collect();
    if images.is_empty() {
        return None;
    }
    let ranked_dets = ranked(dets.iter().filter(|d| d.category == category));
    let hits = images
        .iter()
        .filter(|&&i| {
            ranked_dets
                .iter()
                .find(|d| d.image == i)
                .is_some_and(|d| gts[i].iter().any(|g| g.category == category && iou(&d.bbox, &g.bbox) >= 0.5))
        })
        .count();
    Some(hits as f64 / images.len() as f64)
}

/// Mean CorLoc over categories that occur in at least one image.
pub fn corloc(dets: &[Detection], gts: &[Vec<GtObject>], categories: &[usize]) -> Option<f64> {
    mean(categories.iter().map(|&c| corloc_category(dets, gts, c)))
}

/// Size of a maximum one-to-one matching between ground truth and
/// proposals with IoU >= `thr` (augmenting paths).
pub fn max_matching(gts: &[BBox], proposals: &[BBox], thr: f64) -> usize {
    let adj: Vec<Vec<usize>> = gts.iter().map(|g| (0..proposals.len()).filter(|&p| iou(g, &proposals[p]) >= thr).collect()).collect();
    let mut owner: Vec<Option<usize>> = vec![None; proposals.len()];
    fn augment(g: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &p in &adj[g] {
            if seen[p] {
                continue;
            }
            seen[p] = true;
            if owner[p].map_or(true, |o| augment(o, adj, seen, owner)) {
                owner[p] = Some(g);
                return true;
            }
        }
        false
    }
    (0..gts.len())
        .filter(|&g| {
            let mut seen = vec![false; proposals.len()];
            augment(g, &adj, &mut seen, &mut owner)
        })
        .count()
}

/// Ranked proposals of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredProposals {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
}

impl ScoredProposals {
    /// Top `n` boxes by score; equal scores keep input order.
    pub fn top(&self, n: usize) -> Vec<BBox> {
        let mut order: Vec<usize> = (0..self.boxes.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        order.into_iter().take(n).map(|k| self.boxes[k]).collect()
    }
}

/// Recall at one IoU threshold of the top-`n` proposals per image.
pub fn recall_at(proposals: &[ScoredProposals], gts: &[Vec<BBox>], n: usize, thr: f64) -> f64 {
    let total: usize = gts.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let covered: usize = proposals.iter().zip(gts).map(|(p, g)| max_matching(g, &p.top(n), thr)).sum();
    covered as f64 / total as f64
}

/// Recall averaged over `thrs`.
pub fn avg_recall(proposals: &[ScoredProposals], gts: &[Vec<BBox>], n: usize, thrs: &[f64]) -> f64 {
    if thrs.is_empty() {
        return 0.0;
    }
    thrs.iter().map(|&t| recall_at(proposals, gts, n, t)).sum::<f64>() / thrs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub name: String,
    pub novel: bool,
    pub ap50: Option<f64>,
    pub ap_range: Option<f64>,
    pub corloc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub categories: usize,
    pub map50: Option<f64>,
    pub ap_range: Option<f64>,
    pub corloc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallMetrics {
    pub n: usize,
    pub at50: f64,
    pub averaged: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub categories: Vec<CategoryMetrics>,
    pub all: SplitMetrics,
    pub base: SplitMetrics,
    pub novel: SplitMetrics,
    pub recall: Vec<RecallMetrics>,
}

/// Which categories a report covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Base,
    Novel,
    All,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "base" => Some(Split::Base),
            "novel" => Some(Split::Novel),
            "all" => Some(Split::All),
            _ => None,
        }
    }

    fn admits(self, novel: bool) -> bool {
        match self {
            Split::Base => !novel,
            Split::Novel => novel,
            Split::All => true,
        }
    }
}

pub const RECALL_POINTS: [usize; 3] = [10, 100, 1000];

impl MetricReport {
    /// `names[c]` and `novel[c]` describe category `c`; `split` restricts
    /// which categories appear.
    pub fn compute(
        dets: &[Detection],
        gts: &[Vec<GtObject>],
        names: &[String],
        novel: &[bool],
        split: Split,
        proposals: Option<&[ScoredProposals]>,
    ) -> MetricReport {
        let cats: Vec<usize> = (0..names.len()).filter(|&c| split.admits(novel[c])).collect();
        let categories: Vec<CategoryMetrics> = cats
            .iter()
            .map(|&c| CategoryMetrics {
                name: names[c].clone(),
                novel: novel[c],
                ap50: voc_ap(dets, gts, c, 0.5, Interpolation::AllPoints),
                ap_range: ap_range(dets, gts, c),
                corloc: corloc_category(dets, gts, c),
            })
            .collect();
        let summarize = |keep: &dyn Fn(bool) -> bool| {
            let sel: Vec<&CategoryMetrics> = categories.iter().filter(|m| keep(m.novel)).collect();
            SplitMetrics {
                categories: sel.len(),
                map50: mean(sel.iter().map(|m| m.ap50)),
                ap_range: mean(sel.iter().map(|m| m.ap_range)),
                corloc: mean(sel.iter().map(|m| m.corloc)),
            }
        };
        let recall = match proposals {
            Some(p) => {
                let boxes: Vec<Vec<BBox>> = gts.iter().map(|g| g.iter().map(|o| o.bbox).collect()).collect();
                RECALL_POINTS
                    .iter()
                    .map(|&n| RecallMetrics {
                        n,
                        at50: recall_at(p, &boxes, n, 0.5),
                        averaged: avg_recall(p, &boxes, n, &iou_grid()),
                    })
                    .collect()
            }
            None => Vec::new(),
        };
        MetricReport {
            all: summarize(&|_| true),
            base: summarize(&|n| !n),
            novel: summarize(&|n| n),
            categories,
            recall,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// `category,metric,value` rows; absent values are omitted.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,metric,value\n");
        for m in &self.categories {
            for (k, v) in [("ap50", m.ap50), ("ap_range", m.ap_range), ("corloc", m.corloc)] {
                if let Some(v) = v {
                    let _ = writeln!(out, "{},{k},{v}", m.name);
                }
            }
        }
        for (split, s) in [("all", &self.all), ("base", &self.base), ("novel", &self.novel)] {
            for (k, v) in [("map50", s.map50), ("ap_range", s.ap_range), ("corloc", s.corloc)] {
                if let Some(v) = v {
                    let _ = writeln!(out, "{split},{k},{v}");
                }
            }
        }
        for r in &self.recall {
            let _ = writeln!(out, "proposals,ar{}_50,{}", r.n, r.at50);
            let _ = writeln!(out, "proposals,ar{},{}", r.n, r.averaged);
        }
        out
    }

    /// Aligned human-readable table.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let width = self.categories.iter().map(|m| m.name.len()).max().unwrap_or(0).max(8);
        let mut out = format!("{:<width$}  {:>8}  {:>8}  {:>8}\n", "category", "AP50", "AP", "CorLoc");
        for m in &self.categories {
            let name = if m.novel { format!("{}*", m.name) } else { m.name.clone() };
            let _ = writeln!(out, "{name:<width$}  {:>8}  {:>8}  {:>8}", fmt(m.ap50), fmt(m.ap_range), fmt(m.corloc));
        }
        for (split, s) in [("[all]", &self.all), ("[base]", &self.base), ("[novel]", &self.novel)] {
            let _ = writeln!(out, "{split:<width$}  {:>8}  {:>8}  {:>8}", fmt(s.map50), fmt(s.ap_range), fmt(s.corloc));
        }
        for r in &self.recall {
            let _ = writeln!(out, "AR@{:<5} IoU.5 {:.4}  IoU.5:.95 {:.4}", r.n, r.at50, r.averaged);
        }
        out
    }
}
