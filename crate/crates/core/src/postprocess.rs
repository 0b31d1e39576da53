//! Post-processing stages applied to predictions before scoring: depth-based
//! x,y recovery, confidence thresholding, ignore-region filtering, max
//! ensembling across models, and the confidence-threshold sweep.

use std::collections::HashMap;

use thiserror::Error;

use crate::exec::Exec;
use crate::geometry::{backproject, bbox_center, BBox2D, CameraIntrinsics, GeometryError};
use crate::metrics::{iou_2d, mean_average_precision, MetricsError, ThresholdLadder};
use crate::records::{Annotation, Boxed, Detection, IgnoreRegions, ImageRecord};

pub const DEFAULT_ENSEMBLE_IOU: f64 = 0.5;
pub const DEFAULT_IGNORE_OVERLAP: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("ensemble needs at least one model")]
    EmptyEnsemble,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Replaces x and y of the translation with the back-projection of the box
/// center at the predicted depth. Everything else is kept as is.
pub fn recover_xy(d: &Detection, k: &CameraIntrinsics) -> Result<Detection, GeometryError> {
    let (u, v) = bbox_center(&d.bbox);
    let mut out = *d;
    out.pose.translation = backproject(u, v, d.pose.translation.z, k)?;
    Ok(out)
}

pub fn recover_xy_all(
    records: &[ImageRecord<Detection>],
    k: &CameraIntrinsics,
) -> Result<Vec<ImageRecord<Detection>>, GeometryError> {
    records
        .iter()
        .map(|r| {
            let items = r.items.iter().map(|d| recover_xy(d, k)).collect::<Result<_, _>>()?;
            Ok(ImageRecord::new(r.image_id.clone(), items))
        })
        .collect()
}

/// Keeps detections with `confidence >= t`. Images are kept even when they
/// end up empty.
pub fn apply_confidence_threshold(records: &[ImageRecord<Detection>], t: f64) -> Vec<ImageRecord<Detection>> {
    records
        .iter()
        .map(|r| ImageRecord::new(r.image_id.clone(), r.items.iter().filter(|d| d.confidence >= t).copied().collect()))
        .collect()
}

/// Area of the union of `rects` clipped to `window`.
fn clipped_union_area(window: &BBox2D, rects: &[BBox2D]) -> f64 {
    let clipped: Vec<BBox2D> = rects.iter().filter_map(|r| r.intersection(window)).collect();
    if clipped.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = clipped.iter().flat_map(|r| [r.x1(), r.x2()]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut area = 0.0;
    for w in xs.windows(2) {
        let (xa, xb) = (w[0], w[1]);
        let mut spans: Vec<(f64, f64)> = clipped
            .iter()
            .filter(|r| r.x1() <= xa && r.x2() >= xb)
            .map(|r| (r.y1(), r.y2()))
            .collect();
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut covered = 0.0;
        let mut cur: Option<(f64, f64)> = None;
        for (lo, hi) in spans {
            match cur {
                Some((clo, chi)) if lo <= chi => cur = Some((clo, chi.max(hi))),
                Some((clo, chi)) => {
                    covered += chi - clo;
                    cur = Some((lo, hi));
                }
                None => cur = Some((lo, hi)),
            }
        }
        if let Some((clo, chi)) = cur {
            covered += chi - clo;
        }
        area += covered * (xb - xa);
    }
    area
}

/// Fraction of `b` covered by the union of `rects`.
pub fn ignore_overlap_fraction(b: &BBox2D, rects: &[BBox2D]) -> f64 {
    (clipped_union_area(b, rects) / b.area()).clamp(0.0, 1.0)
}

/// Drops every item whose box is covered by the image's ignore rectangles by
/// more than `overlap_frac`. Items without a box and images without ignore
/// entries pass through.
pub fn filter_ignore<T: Boxed + Clone>(
    records: &[ImageRecord<T>],
    regions: &[IgnoreRegions],
    overlap_frac: f64,
) -> Vec<ImageRecord<T>> {
    let by_id: HashMap<&str, &[BBox2D]> = regions.iter().map(|r| (r.image_id.as_str(), &r.rects[..])).collect();
    records
        .iter()
        .map(|r| match by_id.get(r.image_id.as_str()) {
            Some(rects) if !rects.is_empty() => ImageRecord::new(
                r.image_id.clone(),
                r.items
                    .iter()
                    .filter(|it| it.bbox().is_none_or(|b| ignore_overlap_fraction(b, rects) <= overlap_frac))
                    .cloned()
                    .collect(),
            ),
            _ => r.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnsembleMode {
    /// Keep the highest-confidence member of each cluster unchanged.
    #[default]
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleConfig {
    pub iou_threshold: f64,
    pub mode: EnsembleMode,
}

impl EnsembleConfig {
    pub fn new(iou_threshold: f64, mode: EnsembleMode) -> Result<Self, PostprocessError> {
        if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
            return Err(PostprocessError::InvalidConfig(format!("iou threshold {iou_threshold} not in (0, 1]")));
        }
        Ok(Self { iou_threshold, mode })
    }
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { iou_threshold: DEFAULT_ENSEMBLE_IOU, mode: EnsembleMode::Max }
    }
}

#[derive(Clone, Copy)]
struct Pooled<'a> {
    model: usize,
    index: usize,
    det: &'a Detection,
}

/// Clusters one image's pooled detections.
///
/// Detections are visited by descending confidence (ties: lower model, then
/// lower input index). An unassigned detection seeds a cluster, which then
/// absorbs, in the same order, unassigned same-class detections from other
/// models whose IoU with the seed reaches the threshold, at most one per
/// model. Seeds are returned in (model, index) order.
fn cluster_image<'a>(pool: &[Pooled<'a>], cfg: &EnsembleConfig) -> Vec<&'a Detection> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&pool[a], &pool[b]);
        pb.det
            .confidence
            .total_cmp(&pa.det.confidence)
            .then(pa.model.cmp(&pb.model))
            .then(pa.index.cmp(&pb.index))
    });
    let mut assigned = vec![false; pool.len()];
    let mut seeds = Vec::new();
    for (pos, &si) in order.iter().enumerate() {
        if assigned[si] {
            continue;
        }
        assigned[si] = true;
        let seed = pool[si];
        let mut members = vec![seed.model];
        for &oi in &order[pos + 1..] {
            let other = pool[oi];
            if assigned[oi] || other.det.class_id != seed.det.class_id || members.contains(&other.model) {
                continue;
            }
            if iou_2d(&seed.det.bbox, &other.det.bbox) >= cfg.iou_threshold {
                assigned[oi] = true;
                members.push(other.model);
            }
        }
        seeds.push(seed);
    }
    seeds.sort_by_key(|p| (p.model, p.index));
    seeds.into_iter().map(|p| p.det).collect()
}

/// Merges several models' predictions. Images appear in first-seen order
/// across the inputs; every output detection is an unmodified input
/// detection.
pub fn ensemble_max(
    inputs: &[Vec<ImageRecord<Detection>>],
    cfg: &EnsembleConfig,
) -> Result<Vec<ImageRecord<Detection>>, PostprocessError> {
    if inputs.is_empty() {
        return Err(PostprocessError::EmptyEnsemble);
    }
    let mut image_order: Vec<&str> = Vec::new();
    let mut pools: HashMap<&str, Vec<Pooled<'_>>> = HashMap::new();
    for (model, records) in inputs.iter().enumerate() {
        for rec in records {
            let pool = pools.entry(rec.image_id.as_str()).or_insert_with(|| {
                image_order.push(rec.image_id.as_str());
                Vec::new()
            });
            pool.extend(rec.items.iter().enumerate().map(|(index, det)| Pooled { model, index, det }));
        }
    }
    Ok(image_order
        .into_iter()
        .map(|id| {
            let seeds = cluster_image(&pools[id], cfg);
            ImageRecord::new(id, seeds.into_iter().copied().collect())
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSweep {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl ThresholdSweep {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self, PostprocessError> {
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(PostprocessError::InvalidConfig(format!("need 0 <= lo < hi <= 1, got lo={lo} hi={hi}")));
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(PostprocessError::InvalidConfig(format!("step {step} must be positive")));
        }
        Ok(Self { lo, hi, step })
    }

    /// `lo, lo + step, ...` up to and including `hi` (with a small tolerance
    /// for accumulated rounding).
    pub fn thresholds(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.lo + i as f64 * self.step).collect()
    }
}

impl Default for ThresholdSweep {
    /// 0.1 to 0.8 in steps of 0.05.
    fn default() -> Self {
        Self { lo: 0.1, hi: 0.8, step: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub curve: Vec<(f64, f64)>,
    pub best_threshold: f64,
    pub best_map: f64,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,map\n");
        for (t, m) in &self.curve {
            s.push_str(&format!("{t:.4},{m}\n"));
        }
        s
    }
}

/// Evaluates mAP at every threshold of the sweep. The best threshold is the
/// smallest one reaching the maximum mAP.
pub fn sweep_threshold(
    preds: &[ImageRecord<Detection>],
    gts: &[ImageRecord<Annotation>],
    sweep: &ThresholdSweep,
    ladder: &ThresholdLadder,
    exec: Exec,
) -> Result<SweepResult, PostprocessError> {
    let ts = sweep.thresholds();
    let maps = exec.map(&ts, |&t| {
        let kept = apply_confidence_threshold(preds, t);
        match mean_average_precision(&kept, gts, ladder, Exec::Sequential) {
            Ok(r) => Ok(r.map),
            Err(MetricsError::NoClasses) => Ok(0.0),
            Err(e) => Err(e),
        }
    });
    let mut curve = Vec::with_capacity(ts.len());
    for (t, m) in ts.into_iter().zip(maps) {
        curve.push((t, m?));
    }
    let (best_threshold, best_map) = curve
        .iter()
        .copied()
        .fold(None, |best: Option<(f64, f64)>, (t, m)| match best {
            Some((_, bm)) if m <= bm => best,
            _ => Some((t, m)),
        })
        .expect("sweep has at least one threshold");
    Ok(SweepResult { curve, best_threshold, best_map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Quaternion, Translation};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 960.0, 540.0).unwrap()
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox2D {
        BBox2D::new(x1, y1, x2, y2).unwrap()
    }

    fn det(class_id: u32, confidence: f64, b: BBox2D, t: [f64; 3]) -> Detection {
        Detection { class_id, confidence, bbox: b, pose: Pose::new(Quaternion::IDENTITY, Translation::from_array(t)) }
    }

    #[test]
    fn recover_xy_examples() {
        let d = det(0, 0.5, bx(940.0, 520.0, 980.0, 560.0), [5.0, -3.0, 10.0]);
        let r = recover_xy(&d, &k()).unwrap();
        assert_eq!(r.pose.translation, Translation::new(0.0, 0.0, 10.0));

        let d = det(0, 0.5, bx(1140.0, 600.0, 1180.0, 680.0), [0.0, 0.0, 10.0]);
        let r = recover_xy(&d, &k()).unwrap();
        assert_eq!(r.pose.translation, Translation::new(2.0, 1.0, 10.0));
        assert_eq!((r.bbox, r.confidence, r.class_id, r.pose.rotation), (d.bbox, d.confidence, d.class_id, d.pose.rotation));
        assert_eq!(recover_xy(&r, &k()).unwrap(), r);
    }

    #[test]
    fn recover_xy_rejects_bad_depth() {
        let mut d = det(0, 0.5, bx(0.0, 0.0, 1.0, 1.0), [0.0, 0.0, 1.0]);
        d.pose.translation.z = 0.0;
        assert!(matches!(recover_xy(&d, &k()), Err(GeometryError::NonPositiveDepth(_))));
    }

    fn three() -> Vec<ImageRecord<Detection>> {
        let b = bx(0.0, 0.0, 1.0, 1.0);
        vec![
            ImageRecord::new(
                "a",
                vec![det(0, 0.05, b, [0.0, 0.0, 1.0]), det(0, 0.5, b, [0.0, 0.0, 1.0]), det(0, 0.95, b, [0.0, 0.0, 1.0])],
            ),
            ImageRecord::new("b", vec![]),
        ]
    }

    #[test]
    fn threshold_examples() {
        let recs = three();
        assert_eq!(apply_confidence_threshold(&recs, 0.0), recs);
        let kept = apply_confidence_threshold(&recs, 0.5);
        let confs: Vec<f64> = kept[0].items.iter().map(|d| d.confidence).collect();
        assert_eq!(confs, vec![0.5, 0.95]);
        let none = apply_confidence_threshold(&recs, 1.0);
        assert_eq!(none.len(), 2);
        assert!(none.iter().all(|r| r.items.is_empty()));
    }

    #[test]
    fn union_area() {
        let w = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(clipped_union_area(&w, &[]), 0.0);
        assert_eq!(clipped_union_area(&w, &[bx(-5.0, -5.0, 5.0, 5.0)]), 25.0);
        // overlapping rects are not double counted
        assert_eq!(clipped_union_area(&w, &[bx(0.0, 0.0, 4.0, 4.0), bx(2.0, 2.0, 6.0, 6.0)]), 28.0);
        assert_eq!(clipped_union_area(&w, &[bx(0.0, 0.0, 4.0, 4.0), bx(0.0, 0.0, 4.0, 4.0)]), 16.0);
        assert_eq!(clipped_union_area(&w, &[bx(0.0, 0.0, 4.0, 2.0), bx(0.0, 3.0, 4.0, 5.0)]), 16.0);
    }

    #[test]
    fn ignore_examples() {
        let inside = det(0, 0.9, bx(1.0, 1.0, 2.0, 2.0), [0.0, 0.0, 1.0]);
        let partial = det(0, 0.9, bx(0.0, 0.0, 2.0, 2.0), [0.0, 0.0, 1.0]);
        let recs = vec![ImageRecord::new("a", vec![inside]), ImageRecord::new("b", vec![partial])];
        let regions = vec![
            IgnoreRegions { image_id: "a".into(), rects: vec![bx(0.0, 0.0, 5.0, 5.0)] },
            IgnoreRegions { image_id: "b".into(), rects: vec![bx(1.0, 1.0, 3.0, 3.0)] },
        ];
        let out = filter_ignore(&recs, &regions, 0.5);
        assert!(out[0].items.is_empty());
        assert_eq!(out[1].items, vec![partial]);
        assert_abs_diff_eq!(ignore_overlap_fraction(&partial.bbox, &regions[1].rects), 0.25, epsilon = 1e-15);
        // no entry for the image
        assert_eq!(filter_ignore(&recs, &[], 0.0), recs);
    }

    #[test]
    fn ignore_filters_boxed_annotations_only() {
        let pose = Pose::new(Quaternion::IDENTITY, Translation::new(0.0, 0.0, 5.0));
        let gt = vec![ImageRecord::new(
            "a",
            vec![
                Annotation { class_id: 0, pose, bbox: None },
                Annotation { class_id: 0, pose, bbox: Some(bx(1.0, 1.0, 2.0, 2.0)) },
            ],
        )];
        let regions = vec![IgnoreRegions { image_id: "a".into(), rects: vec![bx(0.0, 0.0, 5.0, 5.0)] }];
        let out = filter_ignore(&gt, &regions, 0.5);
        assert_eq!(out[0].items.len(), 1);
        assert!(out[0].items[0].bbox.is_none());
    }

    #[test]
    fn ensemble_examples() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let m0 = vec![ImageRecord::new("a", vec![det(0, 0.6, b, [0.0, 0.0, 5.0])])];
        let m1 = vec![ImageRecord::new("a", vec![det(0, 0.9, b, [0.1, 0.0, 5.0])])];
        let cfg = EnsembleConfig::default();

        assert_eq!(ensemble_max(std::slice::from_ref(&m0), &cfg).unwrap(), m0);

        let merged = ensemble_max(&[m0.clone(), m1.clone()], &cfg).unwrap();
        assert_eq!(merged[0].items, m1[0].items);

        let far = vec![ImageRecord::new("a", vec![det(0, 0.9, bx(50.0, 50.0, 60.0, 60.0), [3.0, 0.0, 5.0])])];
        let merged = ensemble_max(&[m0.clone(), far.clone()], &cfg).unwrap();
        assert_eq!(merged[0].items.len(), 2);

        assert!(matches!(ensemble_max(&[], &cfg), Err(PostprocessError::EmptyEnsemble)));
        assert!(EnsembleConfig::new(0.0, EnsembleMode::Max).is_err());
        assert!(EnsembleConfig::new(1.0, EnsembleMode::Max).is_ok());
    }

    #[test]
    fn ensemble_respects_class_and_union_of_images() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let m0 = vec![ImageRecord::new("a", vec![det(0, 0.6, b, [0.0, 0.0, 5.0])])];
        let m1 = vec![
            ImageRecord::new("a", vec![det(1, 0.9, b, [0.0, 0.0, 5.0])]),
            ImageRecord::new("c", vec![det(0, 0.3, b, [0.0, 0.0, 5.0])]),
        ];
        let merged = ensemble_max(&[m0, m1], &EnsembleConfig::default()).unwrap();
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].items.len(), 2);
        assert_eq!(merged[1].image_id, "c");
    }

    #[test]
    fn ensemble_keeps_overlapping_detections_within_one_model() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let model = vec![ImageRecord::new(
            "a",
            vec![det(0, 0.4, b, [0.0, 0.0, 5.0]), det(0, 0.8, bx(1.0, 0.0, 11.0, 10.0), [0.0, 0.0, 6.0])],
        )];
        let copies = vec![model.clone(), model.clone(), model.clone()];
        assert_eq!(ensemble_max(&copies, &EnsembleConfig::default()).unwrap(), model);
    }

    #[test]
    fn sweep_thresholds_default_grid() {
        let ts = ThresholdSweep::default().thresholds();
        assert_eq!(ts.len(), 15);
        assert_abs_diff_eq!(ts[0], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(ts[14], 0.8, epsilon = 1e-12);
        assert!(ThresholdSweep::new(0.5, 0.5, 0.1).is_err());
        assert!(ThresholdSweep::new(0.1, 0.8, 0.0).is_err());
        assert!(ThresholdSweep::new(-0.1, 0.8, 0.1).is_err());
    }

    fn perfect_scene(conf: f64) -> (Vec<ImageRecord<Detection>>, Vec<ImageRecord<Annotation>>) {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let gts = vec![ImageRecord::new(
            "a",
            vec![
                Annotation { class_id: 0, pose: Pose::new(Quaternion::IDENTITY, Translation::new(0.0, 0.0, 10.0)), bbox: None },
                Annotation { class_id: 0, pose: Pose::new(Quaternion::IDENTITY, Translation::new(5.0, 0.0, 20.0)), bbox: None },
            ],
        )];
        let preds = vec![ImageRecord::new(
            "a",
            gts[0].items.iter().map(|a| det(0, conf, b, a.pose.translation.to_array())).collect(),
        )];
        (preds, gts)
    }

    #[test]
    fn sweep_constant_quality_picks_lowest() {
        let (preds, gts) = perfect_scene(0.9);
        let res = sweep_threshold(&preds, &gts, &ThresholdSweep::new(0.1, 0.8, 0.1).unwrap(), &ThresholdLadder::default(), Exec::Sequential)
            .unwrap();
        assert_eq!(res.curve.len(), 8);
        assert!(res.curve.iter().all(|&(_, m)| m == 1.0));
        assert_abs_diff_eq!(res.best_threshold, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn sweep_empty_predictions() {
        let (_, gts) = perfect_scene(0.9);
        let res = sweep_threshold(&[], &gts, &ThresholdSweep::default(), &ThresholdLadder::default(), Exec::Parallel(2)).unwrap();
        assert!(res.curve.iter().all(|&(_, m)| m == 0.0));
        assert_abs_diff_eq!(res.best_threshold, 0.1, epsilon = 1e-12);
        let csv = res.to_csv();
        assert!(csv.starts_with("threshold,map\n0.1000,0\n"));
    }

    proptest! {
        #[test]
        fn threshold_is_monotone(confs in prop::collection::vec(0.0f64..=1.0, 0..20), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let b = bx(0.0, 0.0, 1.0, 1.0);
            let recs = vec![ImageRecord::new("a", confs.iter().map(|&c| det(0, c, b, [0.0, 0.0, 1.0])).collect())];
            let kept_lo = apply_confidence_threshold(&recs, lo);
            let kept_hi = apply_confidence_threshold(&recs, hi);
            for d in &kept_hi[0].items {
                prop_assert!(kept_lo[0].items.contains(d));
            }
        }

        #[test]
        fn ensemble_outputs_are_inputs(
            boxes in prop::collection::vec((0usize..3, 0u32..2, 0.0f64..1.0, 0.0f64..20.0, 0.0f64..20.0, 1.0f64..10.0), 0..15),
            iou in 0.1f64..=1.0,
        ) {
            let mut models = vec![vec![ImageRecord::new("a", vec![])]; 3];
            for (m, c, conf, x, y, s) in boxes {
                models[m][0].items.push(det(c, conf, bx(x, y, x + s, y + s), [x, y, 10.0]));
            }
            let cfg = EnsembleConfig::new(iou, EnsembleMode::Max).unwrap();
            let out = ensemble_max(&models, &cfg).unwrap();
            for d in &out[0].items {
                prop_assert!(models.iter().any(|m| m[0].items.contains(d)));
            }
            // k copies of one model reproduce it
            let copies = vec![models[0].clone(); 3];
            prop_assert_eq!(ensemble_max(&copies, &cfg).unwrap(), models[0].clone());
        }

        #[test]
        fn recover_xy_is_idempotent(u in 0.0f64..1900.0, v in 0.0f64..1000.0, w in 1.0f64..200.0, z in 0.5f64..100.0) {
            let d = det(0, 0.5, bx(u, v, u + w, v + w), [3.0, -2.0, z]);
            let once = recover_xy(&d, &k()).unwrap();
            prop_assert_eq!(once.pose.translation.z, z);
            prop_assert_eq!(recover_xy(&once, &k()).unwrap(), once);
        }
    }
}
