//! Prediction, ground-truth, ignore-region and camera files.
//!
//! The canonical format is JSON Lines with one object per image:
//!
//! ```text
//! {"image_id":"img1","detections":[{"class_id":0,"confidence":0.9,"bbox":[x1,y1,x2,y2],
//!   "quaternion":[w,x,y,z],"translation":[x,y,z]}]}
//! {"image_id":"img1","annotations":[{"class_id":0,"euler":[roll,pitch,yaw],"translation":[x,y,z]}]}
//! {"image_id":"img1","rects":[[x1,y1,x2,y2]]}
//! ```
//!
//! Every item carries exactly one of `quaternion` or `euler`. Writers always
//! emit `quaternion`, using the shortest float representation that re-parses
//! to the same bits. Annotation `bbox` is optional.

use std::collections::HashSet;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    euler_from_quat, project_centered_box, quat_from_euler, quat_normalize_if_needed, BBox2D,
    CameraIntrinsics, EulerAngles, GeometryError, Pose, Quaternion, Translation, CAR_EXTENT,
};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: parse error at `{path}`: {message}")]
    Parse { line: usize, path: String, message: String },
    #[error("line {line}: invalid `{field}`: {message}")]
    Validation { line: usize, field: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RecordError {
    fn validation(line: usize, field: impl Into<String>, message: impl ToString) -> Self {
        RecordError::Validation { line, field: field.into(), message: message.to_string() }
    }
}

/// One predicted object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: u32,
    pub confidence: f64,
    pub bbox: BBox2D,
    pub pose: Pose,
}

/// One ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub class_id: u32,
    pub pose: Pose,
    pub bbox: Option<BBox2D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord<T> {
    pub image_id: String,
    pub items: Vec<T>,
}

impl<T> ImageRecord<T> {
    pub fn new(image_id: impl Into<String>, items: Vec<T>) -> Self {
        Self { image_id: image_id.into(), items }
    }
}

pub type Predictions = Vec<ImageRecord<Detection>>;
pub type GroundTruth = Vec<ImageRecord<Annotation>>;

/// Rectangles excluded from evaluation on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct IgnoreRegions {
    pub image_id: String,
    pub rects: Vec<BBox2D>,
}

/// Items that may carry an image box.
pub trait Boxed {
    fn bbox(&self) -> Option<&BBox2D>;
}

impl Boxed for Detection {
    fn bbox(&self) -> Option<&BBox2D> {
        Some(&self.bbox)
    }
}

impl Boxed for Annotation {
    fn bbox(&self) -> Option<&BBox2D> {
        self.bbox.as_ref()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    class_id: u32,
    confidence: f64,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quaternion: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    euler: Option<[f64; 3]>,
    translation: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnnotation {
    class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quaternion: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    euler: Option<[f64; 3]>,
    translation: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPredictionImage {
    image_id: String,
    detections: Vec<RawDetection>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnnotationImage {
    image_id: String,
    annotations: Vec<RawAnnotation>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIgnore {
    image_id: String,
    rects: Vec<[f64; 4]>,
}

fn parse_line<T: for<'de> Deserialize<'de>>(line_no: usize, line: &str) -> Result<T, RecordError> {
    let de = &mut serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(de).map_err(|e| RecordError::Parse {
        line: line_no,
        path: e.path().to_string(),
        message: e.into_inner().to_string(),
    })
}

/// Calls `f` with `(line number, line)` for every non-blank line.
fn for_each_line<R: BufRead>(
    reader: R,
    mut f: impl FnMut(usize, &str) -> Result<(), RecordError>,
) -> Result<(), RecordError> {
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        f(i + 1, trimmed)?;
    }
    Ok(())
}

fn check_image_id(line: usize, id: &str, seen: &mut HashSet<String>) -> Result<(), RecordError> {
    if id.is_empty() {
        return Err(RecordError::validation(line, "image_id", "must be nonempty"));
    }
    if !seen.insert(id.to_string()) {
        return Err(RecordError::validation(line, "image_id", format!("duplicate image id {id:?}")));
    }
    Ok(())
}

fn rotation(
    line: usize,
    prefix: &str,
    quaternion: Option<[f64; 4]>,
    euler: Option<[f64; 3]>,
) -> Result<Quaternion, RecordError> {
    match (quaternion, euler) {
        (Some(q), None) => quat_normalize_if_needed(Quaternion::from_array(q))
            .map_err(|e| RecordError::validation(line, format!("{prefix}.quaternion"), e)),
        (None, Some(e)) => {
            if e.iter().any(|a| !a.is_finite()) {
                return Err(RecordError::validation(line, format!("{prefix}.euler"), "angles must be finite"));
            }
            Ok(quat_from_euler(EulerAngles::new(e[0], e[1], e[2])))
        }
        _ => Err(RecordError::validation(
            line,
            format!("{prefix}.rotation"),
            "exactly one of `quaternion` or `euler` is required",
        )),
    }
}

fn translation(line: usize, prefix: &str, t: [f64; 3]) -> Result<Translation, RecordError> {
    for (axis, v) in ["x", "y", "z"].iter().zip(t) {
        if !v.is_finite() {
            return Err(RecordError::validation(line, format!("{prefix}.translation.{axis}"), "must be finite"));
        }
    }
    if !(t[2] > 0.0) {
        return Err(RecordError::validation(
            line,
            format!("{prefix}.translation.z"),
            GeometryError::NonPositiveDepth(t[2]),
        ));
    }
    Ok(Translation::from_array(t))
}

fn bbox(line: usize, prefix: &str, b: [f64; 4]) -> Result<BBox2D, RecordError> {
    BBox2D::from_array(b).map_err(|e| RecordError::validation(line, format!("{prefix}.bbox"), e))
}

fn confidence(line: usize, prefix: &str, c: f64) -> Result<f64, RecordError> {
    if !(0.0..=1.0).contains(&c) {
        return Err(RecordError::validation(
            line,
            format!("{prefix}.confidence"),
            format!("{c} is outside [0, 1]"),
        ));
    }
    Ok(c)
}

fn detection_from_raw(line: usize, idx: usize, raw: RawDetection) -> Result<Detection, RecordError> {
    let prefix = format!("detections[{idx}]");
    Ok(Detection {
        class_id: raw.class_id,
        confidence: confidence(line, &prefix, raw.confidence)?,
        bbox: bbox(line, &prefix, raw.bbox)?,
        pose: Pose::new(
            rotation(line, &prefix, raw.quaternion, raw.euler)?,
            translation(line, &prefix, raw.translation)?,
        ),
    })
}

fn annotation_from_raw(line: usize, idx: usize, raw: RawAnnotation) -> Result<Annotation, RecordError> {
    let prefix = format!("annotations[{idx}]");
    Ok(Annotation {
        class_id: raw.class_id,
        pose: Pose::new(
            rotation(line, &prefix, raw.quaternion, raw.euler)?,
            translation(line, &prefix, raw.translation)?,
        ),
        bbox: raw.bbox.map(|b| bbox(line, &prefix, b)).transpose()?,
    })
}

pub fn parse_predictions<R: BufRead>(reader: R) -> Result<Predictions, RecordError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for_each_line(reader, |line, text| {
        let raw: RawPredictionImage = parse_line(line, text)?;
        check_image_id(line, &raw.image_id, &mut seen)?;
        let items = raw
            .detections
            .into_iter()
            .enumerate()
            .map(|(i, d)| detection_from_raw(line, i, d))
            .collect::<Result<_, _>>()?;
        out.push(ImageRecord::new(raw.image_id, items));
        Ok(())
    })?;
    Ok(out)
}

pub fn parse_ground_truth<R: BufRead>(reader: R) -> Result<GroundTruth, RecordError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for_each_line(reader, |line, text| {
        let raw: RawAnnotationImage = parse_line(line, text)?;
        check_image_id(line, &raw.image_id, &mut seen)?;
        let items = raw
            .annotations
            .into_iter()
            .enumerate()
            .map(|(i, a)| annotation_from_raw(line, i, a))
            .collect::<Result<_, _>>()?;
        out.push(ImageRecord::new(raw.image_id, items));
        Ok(())
    })?;
    Ok(out)
}

pub fn parse_ignore_regions<R: BufRead>(reader: R) -> Result<Vec<IgnoreRegions>, RecordError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for_each_line(reader, |line, text| {
        let raw: RawIgnore = parse_line(line, text)?;
        check_image_id(line, &raw.image_id, &mut seen)?;
        let rects = raw
            .rects
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                BBox2D::from_array(r).map_err(|e| RecordError::validation(line, format!("rects[{i}]"), e))
            })
            .collect::<Result<_, _>>()?;
        out.push(IgnoreRegions { image_id: raw.image_id, rects });
        Ok(())
    })?;
    Ok(out)
}

fn write_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

pub fn serialize_predictions<W: Write>(records: &[ImageRecord<Detection>], mut w: W) -> std::io::Result<()> {
    for rec in records {
        let raw = RawPredictionImage {
            image_id: rec.image_id.clone(),
            detections: rec
                .items
                .iter()
                .map(|d| RawDetection {
                    class_id: d.class_id,
                    confidence: d.confidence,
                    bbox: d.bbox.to_array(),
                    quaternion: Some(d.pose.rotation.to_array()),
                    euler: None,
                    translation: d.pose.translation.to_array(),
                })
                .collect(),
        };
        write_line(&mut w, &raw)?;
    }
    w.flush()
}

pub fn serialize_ground_truth<W: Write>(records: &[ImageRecord<Annotation>], mut w: W) -> std::io::Result<()> {
    for rec in records {
        let raw = RawAnnotationImage {
            image_id: rec.image_id.clone(),
            annotations: rec
                .items
                .iter()
                .map(|a| RawAnnotation {
                    class_id: a.class_id,
                    bbox: a.bbox.map(BBox2D::to_array),
                    quaternion: Some(a.pose.rotation.to_array()),
                    euler: None,
                    translation: a.pose.translation.to_array(),
                })
                .collect(),
        };
        write_line(&mut w, &raw)?;
    }
    w.flush()
}

pub fn serialize_ignore_regions<W: Write>(regions: &[IgnoreRegions], mut w: W) -> std::io::Result<()> {
    for r in regions {
        let raw = RawIgnore {
            image_id: r.image_id.clone(),
            rects: r.rects.iter().map(|b| b.to_array()).collect(),
        };
        write_line(&mut w, &raw)?;
    }
    w.flush()
}

pub fn parse_camera<R: Read>(reader: R) -> Result<CameraIntrinsics, RecordError> {
    let de = &mut serde_json::Deserializer::from_reader(reader);
    let k: CameraIntrinsics = serde_path_to_error::deserialize(de).map_err(|e| RecordError::Parse {
        line: e.inner().line(),
        path: e.path().to_string(),
        message: e.into_inner().to_string(),
    })?;
    k.validate().map_err(|e| RecordError::validation(1, "camera", e))?;
    Ok(k)
}

pub fn serialize_camera<W: Write>(k: &CameraIntrinsics, mut w: W) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut w, k)?;
    w.write_all(b"\n")?;
    w.flush()
}

const CSV_GROUP: usize = 7;

/// Reads ApolloScape-style submission rows `image_id, "pitch yaw roll x y z
/// confidence ..."`. Each 7-tuple becomes a class-0 detection whose box is
/// the projected car extent, centered on the projected translation. An
/// optional `ImageId,PredictionString` header row is skipped.
pub fn parse_csv_compat<R: Read>(reader: R, camera: &CameraIntrinsics) -> Result<Predictions, RecordError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (row_idx, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| RecordError::Parse {
            line: e.position().map_or(row_idx + 1, |p| p.line() as usize),
            path: String::new(),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(row_idx + 1, |p| p.line() as usize);
        if row.iter().all(str::is_empty) {
            continue;
        }
        if row_idx == 0 && row.get(0) == Some("ImageId") {
            continue;
        }
        if row.len() > 2 {
            return Err(RecordError::Parse {
                line,
                path: String::new(),
                message: format!("expected 2 fields, found {}", row.len()),
            });
        }
        let image_id = row.get(0).unwrap_or_default().to_string();
        check_image_id(line, &image_id, &mut seen)?;
        let tokens = row
            .get(1)
            .unwrap_or_default()
            .split_whitespace()
            .enumerate()
            .map(|(i, t)| {
                t.parse::<f64>().map_err(|e| RecordError::Parse {
                    line,
                    path: format!("PredictionString[{i}]"),
                    message: format!("{t:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if tokens.len() % CSV_GROUP != 0 {
            return Err(RecordError::Parse {
                line,
                path: "PredictionString".into(),
                message: format!("{} tokens is not a multiple of {CSV_GROUP}", tokens.len()),
            });
        }
        let mut items = Vec::with_capacity(tokens.len() / CSV_GROUP);
        for (i, g) in tokens.chunks_exact(CSV_GROUP).enumerate() {
            let prefix = format!("detections[{i}]");
            let (pitch, yaw, roll) = (g[0], g[1], g[2]);
            if ![pitch, yaw, roll].iter().all(|a| a.is_finite()) {
                return Err(RecordError::validation(line, format!("{prefix}.euler"), "angles must be finite"));
            }
            let pose = Pose::new(
                quat_from_euler(EulerAngles::new(roll, pitch, yaw)),
                translation(line, &prefix, [g[3], g[4], g[5]])?,
            );
            let bbox = project_centered_box(&pose, &CAR_EXTENT, camera)
                .map_err(|e| RecordError::validation(line, format!("{prefix}.bbox"), e))?;
            items.push(Detection { class_id: 0, confidence: confidence(line, &prefix, g[6])?, bbox, pose });
        }
        out.push(ImageRecord::new(image_id, items));
    }
    Ok(out)
}

/// Writes the CSV compatibility format. Rotations pass through Euler angles,
/// so a reload matches only to rounding, and class ids are dropped.
pub fn serialize_csv_compat<W: Write>(records: &[ImageRecord<Detection>], w: W) -> Result<(), RecordError> {
    let mut wtr = csv::Writer::from_writer(w);
    let to_io = |e: csv::Error| RecordError::Io(e.into());
    wtr.write_record(["ImageId", "PredictionString"]).map_err(to_io)?;
    for rec in records {
        let mut s = Vec::with_capacity(rec.items.len() * CSV_GROUP);
        for d in &rec.items {
            let e = euler_from_quat(d.pose.rotation).angles;
            let t = d.pose.translation;
            for v in [e.pitch, e.yaw, e.roll, t.x, t.y, t.z, d.confidence] {
                s.push(v.to_string());
            }
        }
        wtr.write_record([rec.image_id.as_str(), s.join(" ").as_str()]).map_err(to_io)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Fills absent annotation boxes with the projected car extent.
pub fn fill_missing_bboxes(gt: &mut [ImageRecord<Annotation>], camera: &CameraIntrinsics) -> Result<(), GeometryError> {
    for rec in gt.iter_mut() {
        for a in rec.items.iter_mut().filter(|a| a.bbox.is_none()) {
            a.bbox = Some(project_centered_box(&a.pose, &CAR_EXTENT, camera)?);
        }
    }
    Ok(())
}
