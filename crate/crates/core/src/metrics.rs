//! 6D-aware detection metrics: IoU, greedy pose matching, all-points AP,
//! mAP over classes and threshold pairs, translation MAE, rotation error
//! statistics, precision and recall.
//!
//! A prediction is a true positive for a ladder pair when it matches an
//! unclaimed same-class ground-truth object within both the translation and
//! the rotation threshold. Ties in confidence keep dataset order: images in
//! evaluation order, then detections in file order.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::geometry::{angular_error, BBox2D};
use crate::records::{Annotation, Detection, ImageRecord};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no classes: ground truth and predictions are both empty")]
    NoClasses,
    #[error("no matched pairs")]
    NoMatches,
    #[error("invalid threshold ladder: {0}")]
    InvalidLadder(String),
    #[error("ladder file: {0}")]
    LadderFile(#[from] serde_json::Error),
}

/// Translation (meters) and rotation (radians) thresholds for one TP rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LadderPair {
    pub trans_m: f64,
    pub rot_rad: f64,
}

impl LadderPair {
    pub fn new(trans_m: f64, rot_rad: f64) -> Self {
        Self { trans_m, rot_rad }
    }

    pub fn from_degrees(trans_m: f64, rot_deg: f64) -> Self {
        Self::new(trans_m, rot_deg.to_radians())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLadderPair {
    trans_m: f64,
    rot_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdLadder {
    pairs: Vec<LadderPair>,
}

impl ThresholdLadder {
    pub fn new(pairs: Vec<LadderPair>) -> Result<Self, MetricsError> {
        if pairs.is_empty() {
            return Err(MetricsError::InvalidLadder("ladder is empty".into()));
        }
        for (i, p) in pairs.iter().enumerate() {
            if !(p.trans_m > 0.0 && p.rot_rad > 0.0) || !p.trans_m.is_finite() || !p.rot_rad.is_finite() {
                return Err(MetricsError::InvalidLadder(format!(
                    "pair {i} has non-positive threshold ({}, {})",
                    p.trans_m, p.rot_rad
                )));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[LadderPair] {
        &self.pairs
    }

    /// Strictest pair by position: the first one.
    pub fn strictest(&self) -> LadderPair {
        self.pairs[0]
    }

    /// Reads `[{"trans_m": .., "rot_deg": ..}, ..]`.
    pub fn from_json<R: Read>(reader: R) -> Result<Self, MetricsError> {
        let raw: Vec<RawLadderPair> = serde_json::from_reader(reader)?;
        Self::new(raw.into_iter().map(|p| LadderPair::from_degrees(p.trans_m, p.rot_deg)).collect())
    }

    pub fn to_json(&self) -> String {
        let raw: Vec<RawLadderPair> = self
            .pairs
            .iter()
            .map(|p| RawLadderPair { trans_m: p.trans_m, rot_deg: p.rot_rad.to_degrees() })
            .collect();
        serde_json::to_string(&raw).expect("ladder serializes")
    }
}

impl Default for ThresholdLadder {
    /// (0.5 m, 5°), (1 m, 10°), (2 m, 20°), (4 m, 40°).
    fn default() -> Self {
        Self::new(vec![
            LadderPair::from_degrees(0.5, 5.0),
            LadderPair::from_degrees(1.0, 10.0),
            LadderPair::from_degrees(2.0, 20.0),
            LadderPair::from_degrees(4.0, 40.0),
        ])
        .unwrap()
    }
}

pub fn iou_2d(a: &BBox2D, b: &BBox2D) -> f64 {
    let inter = a.intersection(b).map_or(0.0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    /// Euclidean translation error, meters.
    pub trans_err: f64,
    /// Angular error, radians.
    pub rot_err: f64,
}

/// Matching outcome for one image and one ladder pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageMatch {
    /// In matching order (descending confidence).
    pub pairs: Vec<MatchedPair>,
    /// Ascending prediction indices.
    pub unmatched_preds: Vec<usize>,
    /// Ascending ground-truth indices.
    pub unmatched_gts: Vec<usize>,
}

impl ImageMatch {
    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.pairs.len(),
            fp: self.unmatched_preds.len(),
            fn_: self.unmatched_gts.len(),
        }
    }

    /// Per-prediction TP flag, indexed like the prediction list.
    pub fn tp_flags(&self, n_preds: usize) -> Vec<bool> {
        let mut flags = vec![false; n_preds];
        for p in &self.pairs {
            flags[p.pred] = true;
        }
        flags
    }
}

/// Indices of `preds` by descending confidence; equal confidences keep
/// their input order.
pub fn confidence_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    order
}

/// Greedy matching of one image's predictions against its ground truth.
///
/// Predictions are visited by descending confidence. Each claims the
/// nearest (by translation) unclaimed same-class object that lies within
/// `pair.trans_m` and `pair.rot_rad`; distance ties go to the lower index.
pub fn match_image(preds: &[Detection], gts: &[Annotation], pair: LadderPair) -> ImageMatch {
    let mut claimed = vec![false; gts.len()];
    let mut matched_pred = vec![false; preds.len()];
    let mut pairs = Vec::new();
    for pi in confidence_order(preds) {
        let p = &preds[pi];
        let mut best: Option<(usize, f64, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if claimed[gi] || g.class_id != p.class_id {
                continue;
            }
            let d = g.pose.translation.distance(&p.pose.translation);
            if d > pair.trans_m || best.is_some_and(|(_, bd, _)| d >= bd) {
                continue;
            }
            let r = angular_error(g.pose.rotation, p.pose.rotation);
            if r <= pair.rot_rad {
                best = Some((gi, d, r));
            }
        }
        if let Some((gi, d, r)) = best {
            claimed[gi] = true;
            matched_pred[pi] = true;
            pairs.push(MatchedPair { pred: pi, gt: gi, trans_err: d, rot_err: r });
        }
    }
    ImageMatch {
        pairs,
        unmatched_preds: (0..preds.len()).filter(|&i| !matched_pred[i]).collect(),
        unmatched_gts: (0..gts.len()).filter(|&i| !claimed[i]).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
    }
}

/// `(precision, recall)`, each `None` when its denominator is zero.
pub fn precision_recall(c: Counts) -> (Option<f64>, Option<f64>) {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

/// Mean Euclidean translation error over matched pairs.
pub fn translation_mae(pairs: &[MatchedPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoMatches);
    }
    Ok(pairs.iter().map(|p| p.trans_err).sum::<f64>() / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RotationStats {
    pub mean: f64,
    pub median: f64,
}

pub fn rotation_error_stats(pairs: &[MatchedPair]) -> Result<RotationStats, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoMatches);
    }
    let mut errs: Vec<f64> = pairs.iter().map(|p| p.rot_err).collect();
    errs.sort_by(f64::total_cmp);
    let n = errs.len();
    let median = if n % 2 == 1 { errs[n / 2] } else { 0.5 * (errs[n / 2 - 1] + errs[n / 2]) };
    Ok(RotationStats { mean: errs.iter().sum::<f64>() / n as f64, median })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredFlag {
    pub confidence: f64,
    pub tp: bool,
}

/// All-points AP over flags already ranked best-first.
///
/// Precision at each rank is replaced by its envelope (the maximum precision
/// at that or any later rank) and integrated over recall. With no ground
/// truth the AP is 0 if anything was predicted and 1 if nothing was.
pub fn average_precision_ranked(ranked: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (i, &is_tp) in ranked.iter().enumerate() {
        tp += usize::from(is_tp);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap.clamp(0.0, 1.0)
}

/// Ranks by descending confidence (stable) and computes
/// [`average_precision_ranked`].
pub fn average_precision(flags: &[ScoredFlag], n_gt: usize) -> f64 {
    let mut sorted = flags.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let ranked: Vec<bool> = sorted.iter().map(|f| f.tp).collect();
    average_precision_ranked(&ranked, n_gt)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairStats {
    pub trans_m: f64,
    pub rot_deg: f64,
    pub map: f64,
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub mae_trans: Option<f64>,
    pub rot_err_mean: Option<f64>,
    pub rot_err_median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub class_id: u32,
    pub n_gt: usize,
    pub n_pred: usize,
    /// AP for each ladder pair, in ladder order.
    pub ap: Vec<f64>,
    pub mean_ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub map: f64,
    pub n_images: usize,
    pub classes: Vec<ClassReport>,
    pub ladder: Vec<PairStats>,
    /// Statistics of the last (loosest) ladder pair.
    pub summary: PairStats,
}

struct ImageUnit<'a> {
    preds: &'a [Detection],
    gts: &'a [Annotation],
}

/// Pairs prediction and ground-truth images by id: ground-truth images in
/// file order, then prediction-only images in file order.
fn image_units<'a>(preds: &'a [ImageRecord<Detection>], gts: &'a [ImageRecord<Annotation>]) -> Vec<ImageUnit<'a>> {
    let by_id: HashMap<&str, &ImageRecord<Detection>> = preds.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut units: Vec<ImageUnit<'a>> = gts
        .iter()
        .map(|g| ImageUnit {
            preds: by_id.get(g.image_id.as_str()).map_or(&[][..], |p| &p.items[..]),
            gts: &g.items,
        })
        .collect();
    let gt_ids: std::collections::HashSet<&str> = gts.iter().map(|g| g.image_id.as_str()).collect();
    units.extend(
        preds
            .iter()
            .filter(|p| !gt_ids.contains(p.image_id.as_str()))
            .map(|p| ImageUnit { preds: &p.items, gts: &[] }),
    );
    units
}

/// Matches every image under every ladder pair. Indexed `[pair][image]`.
fn match_all(units: &[ImageUnit<'_>], ladder: &ThresholdLadder, exec: Exec) -> Vec<Vec<ImageMatch>> {
    let n_img = units.len();
    let flat = exec.map_range(ladder.pairs().len() * n_img, |k| {
        let (p, i) = (k / n_img.max(1), k % n_img.max(1));
        match_image(units[i].preds, units[i].gts, ladder.pairs()[p])
    });
    let mut it = flat.into_iter();
    (0..ladder.pairs().len()).map(|_| it.by_ref().take(n_img).collect()).collect()
}

/// Evaluates predictions against ground truth over the whole ladder.
///
/// mAP is the mean over classes of the mean over ladder pairs of AP.
/// Classes are those present in either the ground truth or the
/// predictions; a class with predictions but no ground truth scores 0.
pub fn mean_average_precision(
    preds: &[ImageRecord<Detection>],
    gts: &[ImageRecord<Annotation>],
    ladder: &ThresholdLadder,
    exec: Exec,
) -> Result<EvaluationReport, MetricsError> {
    let units = image_units(preds, gts);
    let classes: BTreeSet<u32> = units
        .iter()
        .flat_map(|u| u.preds.iter().map(|d| d.class_id).chain(u.gts.iter().map(|g| g.class_id)))
        .collect();
    if classes.is_empty() {
        return Err(MetricsError::NoClasses);
    }
    let matches = match_all(&units, ladder, exec);

    let count_class = |f: &dyn Fn(&ImageUnit<'_>) -> usize| -> usize { units.iter().map(f).sum() };
    let mut class_reports = Vec::with_capacity(classes.len());
    for &c in &classes {
        let n_gt = count_class(&|u| u.gts.iter().filter(|g| g.class_id == c).count());
        let n_pred = count_class(&|u| u.preds.iter().filter(|d| d.class_id == c).count());
        let ap: Vec<f64> = matches
            .iter()
            .map(|per_image| {
                let mut flags = Vec::with_capacity(n_pred);
                for (u, m) in units.iter().zip(per_image) {
                    let tp = m.tp_flags(u.preds.len());
                    flags.extend(
                        u.preds
                            .iter()
                            .zip(tp)
                            .filter(|(d, _)| d.class_id == c)
                            .map(|(d, tp)| ScoredFlag { confidence: d.confidence, tp }),
                    );
                }
                average_precision(&flags, n_gt)
            })
            .collect();
        let mean_ap = ap.iter().sum::<f64>() / ap.len() as f64;
        class_reports.push(ClassReport { class_id: c, n_gt, n_pred, ap, mean_ap });
    }

    let n_classes = class_reports.len() as f64;
    let ladder_stats: Vec<PairStats> = ladder
        .pairs()
        .iter()
        .zip(&matches)
        .enumerate()
        .map(|(pi, (pair, per_image))| {
            let mut counts = Counts::default();
            let mut matched = Vec::new();
            for m in per_image {
                counts += m.counts();
                matched.extend_from_slice(&m.pairs);
            }
            let (precision, recall) = precision_recall(counts);
            let rot = rotation_error_stats(&matched).ok();
            PairStats {
                trans_m: pair.trans_m,
                rot_deg: pair.rot_rad.to_degrees(),
                map: class_reports.iter().map(|c| c.ap[pi]).sum::<f64>() / n_classes,
                counts,
                precision,
                recall,
                mae_trans: translation_mae(&matched).ok(),
                rot_err_mean: rot.map(|r| r.mean),
                rot_err_median: rot.map(|r| r.median),
            }
        })
        .collect();

    Ok(EvaluationReport {
        map: class_reports.iter().map(|c| c.mean_ap).sum::<f64>() / n_classes,
        n_images: units.len(),
        summary: ladder_stats.last().cloned().expect("ladder is nonempty"),
        classes: class_reports,
        ladder: ladder_stats,
    })
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        fn opt(v: Option<f64>, scale: f64) -> String {
            v.map_or_else(|| "-".to_string(), |x| format!("{:.4}", x * scale))
        }
        let mut out = String::new();
        let _ = writeln!(out, "mAP {:.3}  ({} images, {} classes)", self.map, self.n_images, self.classes.len());
        let _ = writeln!(
            out,
            "{:>8} {:>8} {:>7} {:>6} {:>6} {:>6} {:>9} {:>8} {:>9} {:>10} {:>10}",
            "trans_m", "rot_deg", "mAP", "TP", "FP", "FN", "precision", "recall", "MAE_m", "rot_mean", "rot_median"
        );
        for p in &self.ladder {
            let _ = writeln!(
                out,
                "{:>8.3} {:>8.2} {:>7.4} {:>6} {:>6} {:>6} {:>9} {:>8} {:>9} {:>10} {:>10}",
                p.trans_m,
                p.rot_deg,
                p.map,
                p.counts.tp,
                p.counts.fp,
                p.counts.fn_,
                opt(p.precision, 1.0),
                opt(p.recall, 1.0),
                opt(p.mae_trans, 1.0),
                opt(p.rot_err_mean, 180.0 / std::f64::consts::PI),
                opt(p.rot_err_median, 180.0 / std::f64::consts::PI),
            );
        }
        let _ = writeln!(out, "{:>8} {:>6} {:>6} {:>7}  AP per ladder pair", "class", "n_gt", "n_pred", "meanAP");
        for c in &self.classes {
            let aps: Vec<String> = c.ap.iter().map(|a| format!("{a:.4}")).collect();
            let _ = writeln!(out, "{:>8} {:>6} {:>6} {:>7.4}  {}", c.class_id, c.n_gt, c.n_pred, c.mean_ap, aps.join(" "));
        }
        out
    }
}
