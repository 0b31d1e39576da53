//! Synthetic scenes, prediction perturbation and a brute-force mAP oracle.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with the
//! scene seed. Each image draws from its own ChaCha stream (stream `2·i` for
//! scene content, `2·i + 1` for perturbation), so the content of image `i`
//! does not depend on how many images are generated or in which order.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::exec::Exec;
use crate::geometry::{
    angular_error, backproject, project_centered_box, quat_from_euler, quat_normalize_if_needed, BBox2D,
    CameraIntrinsics, EulerAngles, Pose, Quaternion, Translation, CAR_EXTENT,
};
use crate::metrics::{LadderPair, ThresholdLadder};
use crate::records::{Annotation, Detection, GroundTruth, IgnoreRegions, ImageRecord, Predictions};

/// Largest prediction count the oracle accepts.
pub const ORACLE_MAX_DETECTIONS: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("oracle is limited to {ORACLE_MAX_DETECTIONS} detections, got {0}")]
    TooLarge(usize),
    #[error("no classes: ground truth and predictions are both empty")]
    NoClasses,
}

/// Confidence ranges for true and false detections, sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceModel {
    pub tp: (f64, f64),
    pub fp: (f64, f64),
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        Self { tp: (0.5, 1.0), fp: (0.05, 0.6) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Per-axis Gaussian translation noise, meters.
    pub trans_sigma: f64,
    /// Gaussian rotation noise about a random axis, radians.
    pub rot_sigma: f64,
    pub confidence: ConfidenceModel,
    /// Probability that a ground-truth object also spawns a false positive.
    pub fp_rate: f64,
    /// Probability that a ground-truth object is not detected.
    pub miss_rate: f64,
}

impl NoiseSpec {
    /// Predictions identical to the ground truth, all with confidence 1.
    pub fn zero() -> Self {
        Self {
            trans_sigma: 0.0,
            rot_sigma: 0.0,
            confidence: ConfidenceModel { tp: (1.0, 1.0), fp: (0.0, 0.0) },
            fp_rate: 0.0,
            miss_rate: 0.0,
        }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            trans_sigma: 0.2,
            rot_sigma: 0.03,
            confidence: ConfidenceModel::default(),
            fp_rate: 0.2,
            miss_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_images: usize,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    /// Depth range of object centers, meters.
    pub depth_range: (f64, f64),
    pub n_classes: u32,
    pub camera: CameraIntrinsics,
    pub noise: NoiseSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 10,
            objects_per_image: (1, 5),
            depth_range: (5.0, 60.0),
            n_classes: 1,
            camera: default_camera(),
            noise: NoiseSpec::default(),
        }
    }
}

/// 1920×1080 camera with a 1000 px focal length.
pub fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics { fx: 1000.0, fy: 1000.0, cx: 960.0, cy: 540.0 }
}

fn in_unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        self.camera.validate().map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        let (lo, hi) = self.depth_range;
        let min_depth = CAR_EXTENT.half_diagonal();
        if !(lo > min_depth && lo <= hi && hi.is_finite()) {
            return bad(format!("depth range ({lo}, {hi}) must satisfy {min_depth:.3} < lo <= hi"));
        }
        if self.objects_per_image.0 > self.objects_per_image.1 {
            return bad("objects_per_image min exceeds max".into());
        }
        if self.n_classes == 0 {
            return bad("need at least one class".into());
        }
        let n = &self.noise;
        if !(n.trans_sigma >= 0.0 && n.rot_sigma >= 0.0 && n.trans_sigma.is_finite() && n.rot_sigma.is_finite()) {
            return bad("noise magnitudes must be nonnegative".into());
        }
        if !(in_unit(n.fp_rate) && in_unit(n.miss_rate)) {
            return bad("fp_rate and miss_rate must lie in [0, 1]".into());
        }
        for (lo, hi) in [n.confidence.tp, n.confidence.fp] {
            if !(in_unit(lo) && in_unit(hi) && lo <= hi) {
                return bad(format!("confidence range ({lo}, {hi}) must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    fn image_rng(&self, image: usize, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * image as u64 + purpose);
        rng
    }
}

pub fn image_id(i: usize) -> String {
    format!("synth_{i:05}")
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// A random object somewhere inside the image at a depth within range.
fn random_object(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> (u32, Pose, BBox2D) {
    let k = &spec.camera;
    let class_id = rng.random_range(0..spec.n_classes);
    let z = uniform(rng, spec.depth_range);
    let u = uniform(rng, (0.0, 2.0 * k.cx));
    let v = uniform(rng, (0.0, 2.0 * k.cy));
    let euler = EulerAngles::new(uniform(rng, (-0.1, 0.1)), uniform(rng, (-0.1, 0.1)), uniform(rng, (-PI, PI)));
    let t = backproject(u, v, z, k).expect("depth range is positive");
    let pose = Pose::new(quat_from_euler(euler), t);
    let bbox = project_centered_box(&pose, &CAR_EXTENT, k).expect("depth exceeds the car half-diagonal");
    (class_id, pose, bbox)
}

fn generate_image(spec: &SceneSpec, i: usize) -> ImageRecord<Annotation> {
    let mut rng = spec.image_rng(i, 0);
    let (lo, hi) = spec.objects_per_image;
    let n = rng.random_range(lo..=hi);
    let items = (0..n)
        .map(|_| {
            let (class_id, pose, bbox) = random_object(&mut rng, spec);
            Annotation { class_id, pose, bbox: Some(bbox) }
        })
        .collect();
    ImageRecord::new(image_id(i), items)
}

/// Ground truth for `spec`. Every annotation carries the projected
/// car-extent box.
pub fn generate_scene(spec: &SceneSpec) -> Result<(GroundTruth, CameraIntrinsics), SynthError> {
    generate_scene_with(spec, Exec::Sequential)
}

pub fn generate_scene_with(spec: &SceneSpec, exec: Exec) -> Result<(GroundTruth, CameraIntrinsics), SynthError> {
    spec.validate()?;
    Ok((exec.map_range(spec.n_images, |i| generate_image(spec, i)), spec.camera))
}

fn normal3(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.sample(StandardNormal))
}

/// Noisy copy of one ground-truth object. Draws the same number of random
/// values whatever the noise magnitudes are.
fn jitter(rng: &mut ChaCha8Rng, a: &Annotation, spec: &SceneSpec, confidence: f64) -> Detection {
    let n = &spec.noise;
    let dt = normal3(rng);
    let axis = normal3(rng);
    let angle: f64 = n.rot_sigma * rng.sample::<f64, _>(StandardNormal);
    let t = a.pose.translation;
    let mut translation = Translation::new(
        t.x + n.trans_sigma * dt[0],
        t.y + n.trans_sigma * dt[1],
        t.z + n.trans_sigma * dt[2],
    );
    let rotation = if angle == 0.0 {
        a.pose.rotation
    } else {
        let dq = Quaternion::from_axis_angle(axis, angle).unwrap_or(Quaternion::IDENTITY);
        quat_normalize_if_needed(dq * a.pose.rotation).unwrap_or(a.pose.rotation)
    };
    let min_z = CAR_EXTENT.half_diagonal() + 0.1;
    if translation.z < min_z {
        translation.z = min_z;
    }
    let pose = Pose::new(rotation, translation);
    let bbox = project_centered_box(&pose, &CAR_EXTENT, &spec.camera)
        .ok()
        .or(a.bbox)
        .expect("noisy pose projects in front of the camera");
    Detection { class_id: a.class_id, confidence, bbox, pose }
}

fn perturb_image(spec: &SceneSpec, i: usize, gt: &ImageRecord<Annotation>, skip: &dyn Fn(usize) -> bool) -> ImageRecord<Detection> {
    let n = &spec.noise;
    let mut rng = spec.image_rng(i, 1);
    let mut items = Vec::with_capacity(gt.items.len());
    let mut false_positives = Vec::new();
    for (j, a) in gt.items.iter().enumerate() {
        let missed = rng.random::<f64>() < n.miss_rate;
        let conf = uniform(&mut rng, n.confidence.tp);
        let det = jitter(&mut rng, a, spec, conf);
        if !missed && !skip(j) {
            items.push(det);
        }
        let spawn_fp = rng.random::<f64>() < n.fp_rate;
        let (class_id, pose, bbox) = random_object(&mut rng, spec);
        let fp_conf = uniform(&mut rng, n.confidence.fp);
        if spawn_fp {
            false_positives.push(Detection { class_id, confidence: fp_conf, bbox, pose });
        }
    }
    items.extend(false_positives);
    ImageRecord::new(gt.image_id.clone(), items)
}

/// Noisy predictions for `gt`: jittered poses, dropped objects, injected
/// false positives, and confidences drawn from the true/false ranges.
/// Image `i` of the output corresponds to image `i` of `gt`.
pub fn perturb(gt: &[ImageRecord<Annotation>], spec: &SceneSpec) -> Result<Predictions, SynthError> {
    perturb_with(gt, spec, Exec::Sequential)
}

pub fn perturb_with(gt: &[ImageRecord<Annotation>], spec: &SceneSpec, exec: Exec) -> Result<Predictions, SynthError> {
    spec.validate()?;
    let idx: Vec<usize> = (0..gt.len()).collect();
    Ok(exec.map(&idx, |&i| perturb_image(spec, i, &gt[i], &|_| false)))
}

/// Shifts each prediction's x and y by a random planar offset whose length
/// is uniform in `offset_range`, leaving depth, box and everything else
/// untouched.
pub fn corrupt_xy(preds: &[ImageRecord<Detection>], offset_range: (f64, f64), seed: u64) -> Predictions {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    preds
        .iter()
        .map(|r| {
            let items = r
                .items
                .iter()
                .map(|d| {
                    let mut d = *d;
                    let len = uniform(&mut rng, offset_range);
                    let dir = uniform(&mut rng, (-PI, PI));
                    d.pose.translation.x += len * dir.cos();
                    d.pose.translation.y += len * dir.sin();
                    d
                })
                .collect();
            ImageRecord::new(r.image_id.clone(), items)
        })
        .collect()
}

/// Predictions from `n_models` models where model `m` misses exactly the
/// objects whose running index (across the whole scene) is `m` modulo
/// `n_models`. Each model has its own perturbation seed.
pub fn complementary_miss_models(
    gt: &[ImageRecord<Annotation>],
    spec: &SceneSpec,
    n_models: usize,
) -> Result<Vec<Predictions>, SynthError> {
    spec.validate()?;
    let mut offsets = Vec::with_capacity(gt.len());
    let mut running = 0;
    for r in gt {
        offsets.push(running);
        running += r.items.len();
    }
    Ok((0..n_models)
        .map(|m| {
            let mut model_spec = *spec;
            model_spec.seed = spec.seed.wrapping_add(1 + m as u64);
            model_spec.noise.miss_rate = 0.0;
            gt.iter()
                .enumerate()
                .map(|(i, r)| perturb_image(&model_spec, i, r, &|j| (offsets[i] + j) % n_models == m))
                .collect()
        })
        .collect())
}

/// Zero-pose-noise predictions with true-detection confidences in
/// [0.7, 1.0] and false positives below 0.3 whose class never appears in
/// the ground truth.
pub fn low_confidence_fp_scene(seed: u64, n_images: usize) -> (Predictions, GroundTruth) {
    let spec = SceneSpec {
        seed,
        n_images,
        objects_per_image: (2, 4),
        n_classes: 1,
        noise: NoiseSpec {
            confidence: ConfidenceModel { tp: (0.7, 1.0), fp: (0.05, 0.29) },
            fp_rate: 0.5,
            ..NoiseSpec::zero()
        },
        ..SceneSpec::default()
    };
    let (gt, _) = generate_scene(&spec).expect("valid spec");
    let mut preds = perturb(&gt, &spec).expect("valid spec");
    for r in &mut preds {
        for d in r.items.iter_mut().filter(|d| d.confidence < 0.3) {
            d.class_id = spec.n_classes;
        }
    }
    (preds, gt)
}

/// A scene where one object per image sits under an ignore rectangle. The
/// detector misses those objects and instead fires a high-confidence false
/// positive inside each rectangle.
pub fn ignore_scenario(seed: u64, n_images: usize) -> (Predictions, GroundTruth, Vec<IgnoreRegions>) {
    let spec = SceneSpec {
        seed,
        n_images,
        objects_per_image: (2, 4),
        noise: NoiseSpec { confidence: ConfidenceModel { tp: (0.5, 0.9), fp: (0.0, 0.0) }, ..NoiseSpec::zero() },
        ..SceneSpec::default()
    };
    let (gt, _) = generate_scene(&spec).expect("valid spec");
    let mut preds = Vec::with_capacity(gt.len());
    let mut regions = Vec::with_capacity(gt.len());
    for (i, r) in gt.iter().enumerate() {
        let mut rec = perturb_image(&spec, i, r, &|j| j == 0);
        let hidden = &r.items[0];
        let b = hidden.bbox.expect("generated annotations carry boxes");
        let margin = 2.0;
        let rect = BBox2D::new(b.x1() - margin, b.y1() - margin, b.x2() + margin, b.y2() + margin).expect("grown box");
        // a false positive at the hidden object's box but far off in depth
        let mut t = hidden.pose.translation;
        t.z += 15.0;
        let fp_pose = Pose::new(hidden.pose.rotation, t);
        let fp_box = BBox2D::new(b.x1() + 1.0, b.y1() + 1.0, b.x2() - 1.0, b.y2() - 1.0).unwrap_or(b);
        rec.items.push(Detection { class_id: hidden.class_id, confidence: 0.99, bbox: fp_box, pose: fp_pose });
        preds.push(rec);
        regions.push(IgnoreRegions { image_id: r.image_id.clone(), rects: vec![rect] });
    }
    (preds, gt, regions)
}

/// Brute-force mAP used to cross-check the metrics module.
///
/// Written independently: pairing by linear search, greedy matching by
/// repeated maximum selection, and the precision envelope evaluated
/// separately at every recall step. It follows the same conventions
/// (dataset-order tie breaking, classes from the union of ground truth and
/// predictions, mean over classes of the mean over ladder pairs).
pub fn oracle_map(
    preds: &[ImageRecord<Detection>],
    gts: &[ImageRecord<Annotation>],
    ladder: &ThresholdLadder,
) -> Result<f64, SynthError> {
    let total: usize = preds.iter().map(|r| r.items.len()).sum();
    if total > ORACLE_MAX_DETECTIONS {
        return Err(SynthError::TooLarge(total));
    }

    // (gt items, pred items) per image, GT images first
    let empty_d: Vec<Detection> = Vec::new();
    let empty_a: Vec<Annotation> = Vec::new();
    let mut images: Vec<(&Vec<Annotation>, &Vec<Detection>)> = Vec::new();
    for g in gts {
        let mut found = &empty_d;
        for p in preds {
            if p.image_id == g.image_id {
                found = &p.items;
            }
        }
        images.push((&g.items, found));
    }
    for p in preds {
        if !gts.iter().any(|g| g.image_id == p.image_id) {
            images.push((&empty_a, &p.items));
        }
    }

    let mut classes: Vec<u32> = Vec::new();
    for (g, p) in &images {
        for c in g.iter().map(|a| a.class_id).chain(p.iter().map(|d| d.class_id)) {
            if !classes.contains(&c) {
                classes.push(c);
            }
        }
    }
    if classes.is_empty() {
        return Err(SynthError::NoClasses);
    }
    classes.sort();

    let mut class_sum = 0.0;
    for &c in &classes {
        let mut pair_sum = 0.0;
        for pair in ladder.pairs() {
            pair_sum += oracle_class_ap(&images, c, *pair);
        }
        class_sum += pair_sum / ladder.pairs().len() as f64;
    }
    Ok(class_sum / classes.len() as f64)
}

fn oracle_class_ap(images: &[(&Vec<Annotation>, &Vec<Detection>)], class: u32, pair: LadderPair) -> f64 {
    // (confidence, image, index, is_tp) for every prediction of this class
    let mut table: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut n_gt = 0usize;
    for (img, (gt, pr)) in images.iter().enumerate() {
        let gt_idx: Vec<usize> = (0..gt.len()).filter(|&j| gt[j].class_id == class).collect();
        n_gt += gt_idx.len();
        let pr_idx: Vec<usize> = (0..pr.len()).filter(|&j| pr[j].class_id == class).collect();
        let mut taken = vec![false; gt_idx.len()];
        let mut done = vec![false; pr_idx.len()];
        for _ in 0..pr_idx.len() {
            // highest remaining confidence, first in file order on ties
            let mut pick: Option<usize> = None;
            for k in 0..pr_idx.len() {
                if !done[k] && pick.is_none_or(|b| pr[pr_idx[k]].confidence > pr[pr_idx[b]].confidence) {
                    pick = Some(k);
                }
            }
            let k = pick.expect("a prediction remains");
            done[k] = true;
            let d = &pr[pr_idx[k]];
            let mut best: Option<(usize, f64)> = None;
            for (slot, &gj) in gt_idx.iter().enumerate() {
                if taken[slot] {
                    continue;
                }
                let a = &gt[gj].pose.translation;
                let b = &d.pose.translation;
                let dist = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
                let ang = angular_error(gt[gj].pose.rotation, d.pose.rotation);
                if dist <= pair.trans_m && ang <= pair.rot_rad && best.is_none_or(|(_, bd)| dist < bd) {
                    best = Some((slot, dist));
                }
            }
            if let Some((slot, _)) = best {
                taken[slot] = true;
            }
            table.push((d.confidence, img, pr_idx[k], best.is_some()));
        }
    }

    if n_gt == 0 {
        return if table.is_empty() { 1.0 } else { 0.0 };
    }

    // rank: confidence descending, then image, then index
    let mut ranked: Vec<bool> = Vec::with_capacity(table.len());
    let mut used = vec![false; table.len()];
    for _ in 0..table.len() {
        let mut pick: Option<usize> = None;
        for (i, row) in table.iter().enumerate() {
            if used[i] {
                continue;
            }
            let better = match pick {
                None => true,
                Some(p) => {
                    let q = &table[p];
                    row.0 > q.0 || (row.0 == q.0 && (row.1, row.2) < (q.1, q.2))
                }
            };
            if better {
                pick = Some(i);
            }
        }
        let p = pick.expect("a row remains");
        used[p] = true;
        ranked.push(table[p].3);
    }

    let precision_at = |rank: usize| -> f64 {
        let hits = ranked[..=rank].iter().filter(|&&t| t).count();
        hits as f64 / (rank + 1) as f64
    };
    let mut ap = 0.0;
    for (rank, &is_tp) in ranked.iter().enumerate() {
        if !is_tp {
            continue;
        }
        let envelope = (rank..ranked.len()).map(precision_at).fold(0.0, f64::max);
        ap += envelope / n_gt as f64;
    }
    ap
}
