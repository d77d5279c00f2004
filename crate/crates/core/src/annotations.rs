//! YOLO-format labels: class maps, normalized and pixel boxes, label-file
//! parsing and serialization, and class consolidation.
//!
//! A label file holds one `class_id cx cy w h` line per object, all
//! coordinates expressed as fractions of the image size. Prediction files use
//! the same layout with a trailing confidence field.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for coordinates that drift just outside `[0, 1]`.
pub const EPSILON: f64 = 1e-6;

/// Target name in a [`ClassRemap`] that removes the box instead of relabeling it.
pub const DROP_CLASS: &str = "DROP";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnnotationError {
    #[error("malformed label line: {0}")]
    Malformed(String),
    #[error("unknown class id {0}")]
    UnknownClass(u32),
    #[error("{field} = {value} is out of range")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<AnnotationError>,
    },
    #[error("box has zero area after clamping to the image")]
    DegenerateBox,
    #[error("class `{0}` has no mapping")]
    UnmappedClass(String),
    #[error("invalid class map: {0}")]
    InvalidClassMap(String),
    #[error("invalid remap spec: {0}")]
    InvalidRemap(String),
    #[error("image dimensions must be positive, got {width}x{height}")]
    InvalidDimensions { width: u32, height: u32 },
}

impl AnnotationError {
    /// Line number for errors raised while reading a whole file.
    pub fn line(&self) -> Option<usize> {
        match self {
            AnnotationError::AtLine { line, .. } => Some(*line),
            _ => None,
        }
    }

    /// The underlying error with any line annotation stripped.
    pub fn root(&self) -> &AnnotationError {
        match self {
            AnnotationError::AtLine { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Ordered class alphabet; the position of a name is its class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, AnnotationError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(AnnotationError::InvalidClassMap("no classes".into()));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.trim().is_empty() {
                return Err(AnnotationError::InvalidClassMap("empty class name".into()));
            }
            if name.chars().any(char::is_whitespace) {
                return Err(AnnotationError::InvalidClassMap(format!(
                    "class name `{name}` contains whitespace"
                )));
            }
            if !seen.insert(name.as_str()) {
                return Err(AnnotationError::InvalidClassMap(format!("duplicate class `{name}`")));
            }
        }
        Ok(Self { names })
    }

    /// The two-class door/handle alphabet.
    pub fn door_handle() -> Self {
        Self {
            names: vec!["door".to_string(), "handle".to_string()],
        }
    }

    /// Parses a class-name file: one name per line, line index = class id.
    /// Trailing blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self, AnnotationError> {
        let mut lines: Vec<&str> = text.lines().map(str::trim).collect();
        while lines.last().is_some_and(|l| l.is_empty()) {
            lines.pop();
        }
        Self::new(lines)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for name in &self.names {
            out.push_str(name);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, class_id: u32) -> Option<&str> {
        self.names.get(class_id as usize).map(String::as_str)
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32)
    }

    pub fn contains(&self, class_id: u32) -> bool {
        (class_id as usize) < self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `(class_id, name)` pairs in id order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.names.iter().enumerate().map(|(i, n)| (i as u32, n.as_str()))
    }
}

impl Default for ClassMap {
    fn default() -> Self {
        Self::door_handle()
    }
}

impl TryFrom<Vec<String>> for ClassMap {
    type Error = AnnotationError;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(names)
    }
}

impl From<ClassMap> for Vec<String> {
    fn from(map: ClassMap) -> Self {
        map.names
    }
}

/// Box in YOLO center format, coordinates as fractions of the image size.
///
/// The struct itself carries no guarantees; use [`NormalizedBox::validated`]
/// (or the label parsers, which call it) to obtain a box that satisfies the
/// label-file invariants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormalizedBox {
    pub fn new(class_id: u32, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { class_id, cx, cy, w, h }
    }

    /// Checks the box against `class_map` and the geometry rules, returning the
    /// stored form. Coordinates outside `[0, 1]` by at most [`EPSILON`] are
    /// clamped; anything further out is rejected.
    pub fn validated(self, class_map: &ClassMap) -> Result<Self, AnnotationError> {
        if !class_map.contains(self.class_id) {
            return Err(AnnotationError::UnknownClass(self.class_id));
        }
        let (cx, w) = validate_axis("cx", "w", self.cx, self.w)?;
        let (cy, h) = validate_axis("cy", "h", self.cy, self.h)?;
        Ok(Self { class_id: self.class_id, cx, cy, w, h })
    }

    pub fn x_min(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn x_max(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y_min(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn y_max(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

fn validate_axis(
    center_name: &'static str,
    size_name: &'static str,
    center: f64,
    size: f64,
) -> Result<(f64, f64), AnnotationError> {
    if !center.is_finite() || !(-EPSILON..=1.0 + EPSILON).contains(&center) {
        return Err(AnnotationError::OutOfRange { field: center_name, value: center });
    }
    if !size.is_finite() || size <= 0.0 || size > 1.0 + EPSILON {
        return Err(AnnotationError::OutOfRange { field: size_name, value: size });
    }
    let lo = center - size / 2.0;
    let hi = center + size / 2.0;
    if lo < -EPSILON {
        return Err(AnnotationError::OutOfRange { field: center_name, value: center });
    }
    if hi > 1.0 + EPSILON {
        return Err(AnnotationError::OutOfRange { field: center_name, value: center });
    }
    if lo >= 0.0 && hi <= 1.0 {
        return Ok((center, size));
    }
    let lo = lo.max(0.0);
    let hi = hi.min(1.0);
    if hi <= lo {
        return Err(AnnotationError::OutOfRange { field: size_name, value: size });
    }
    Ok(((lo + hi) / 2.0, hi - lo))
}

/// Box in pixel corner format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub class_id: u32,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl PixelBox {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }
}

/// A model prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: NormalizedBox,
    pub confidence: f64,
    pub model_version: String,
}

/// A saved, annotated image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub sample_id: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<NormalizedBox>,
}

impl LabeledImage {
    pub fn new(
        sample_id: impl Into<String>,
        width: u32,
        height: u32,
        boxes: Vec<NormalizedBox>,
        class_map: &ClassMap,
    ) -> Result<Self, AnnotationError> {
        if width == 0 || height == 0 {
            return Err(AnnotationError::InvalidDimensions { width, height });
        }
        let boxes = boxes
            .into_iter()
            .map(|b| b.validated(class_map))
            .collect::<Result<_, _>>()?;
        Ok(Self { sample_id: sample_id.into(), width, height, boxes })
    }
}

fn parse_class_id(field: &str) -> Result<u32, AnnotationError> {
    field
        .parse::<u32>()
        .map_err(|_| AnnotationError::Malformed(format!("class id `{field}` is not a nonnegative integer")))
}

fn parse_real(field: &str) -> Result<f64, AnnotationError> {
    let value = field
        .parse::<f64>()
        .map_err(|_| AnnotationError::Malformed(format!("`{field}` is not a number")))?;
    if !value.is_finite() {
        return Err(AnnotationError::Malformed(format!("`{field}` is not finite")));
    }
    Ok(value)
}

/// Parses one `class_id cx cy w h` line.
pub fn parse_label_line(line: &str, class_map: &ClassMap) -> Result<NormalizedBox, AnnotationError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(AnnotationError::Malformed(format!("expected 5 fields, found {}", fields.len())));
    }
    parse_box_fields(&fields, class_map)
}

fn parse_box_fields(fields: &[&str], class_map: &ClassMap) -> Result<NormalizedBox, AnnotationError> {
    let class_id = parse_class_id(fields[0])?;
    let cx = parse_real(fields[1])?;
    let cy = parse_real(fields[2])?;
    let w = parse_real(fields[3])?;
    let h = parse_real(fields[4])?;
    NormalizedBox::new(class_id, cx, cy, w, h).validated(class_map)
}

/// Parses a whole label file. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn parse_label_file(text: &str, class_map: &ClassMap) -> Result<Vec<NormalizedBox>, AnnotationError> {
    parse_lines(text, |line| parse_label_line(line, class_map))
}

fn parse_lines<T>(
    text: &str,
    mut parse: impl FnMut(&str) -> Result<T, AnnotationError>,
) -> Result<Vec<T>, AnnotationError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let item = parse(line).map_err(|e| AnnotationError::AtLine { line: idx + 1, source: Box::new(e) })?;
        out.push(item);
    }
    Ok(out)
}

/// Canonical label-file text: 6 decimal digits per coordinate, `\n` after
/// every line.
pub fn serialize_label_file(boxes: &[NormalizedBox]) -> String {
    let mut out = String::with_capacity(boxes.len() * 40);
    for b in boxes {
        out.push_str(&format!("{} {:.6} {:.6} {:.6} {:.6}\n", b.class_id, b.cx, b.cy, b.w, b.h));
    }
    out
}

/// Parses one `class_id cx cy w h conf` prediction line.
pub fn parse_prediction_line(
    line: &str,
    class_map: &ClassMap,
    model_version: &str,
) -> Result<Detection, AnnotationError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(AnnotationError::Malformed(format!("expected 6 fields, found {}", fields.len())));
    }
    let bbox = parse_box_fields(&fields[..5], class_map)?;
    let confidence = parse_real(fields[5])?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(AnnotationError::OutOfRange { field: "confidence", value: confidence });
    }
    Ok(Detection { bbox, confidence, model_version: model_version.to_string() })
}

pub fn parse_prediction_file(
    text: &str,
    class_map: &ClassMap,
    model_version: &str,
) -> Result<Vec<Detection>, AnnotationError> {
    parse_lines(text, |line| parse_prediction_line(line, class_map, model_version))
}

pub fn serialize_prediction_file(detections: &[Detection]) -> String {
    let mut out = String::new();
    for d in detections {
        let b = &d.bbox;
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            b.class_id, b.cx, b.cy, b.w, b.h, d.confidence
        ));
    }
    out
}

/// Converts to pixel corners, clamped to the image.
pub fn normalized_to_pixel(b: &NormalizedBox, width: u32, height: u32) -> Result<PixelBox, AnnotationError> {
    if width == 0 || height == 0 {
        return Err(AnnotationError::InvalidDimensions { width, height });
    }
    let (wf, hf) = (f64::from(width), f64::from(height));
    let px = PixelBox {
        class_id: b.class_id,
        x_min: (b.x_min() * wf).clamp(0.0, wf),
        y_min: (b.y_min() * hf).clamp(0.0, hf),
        x_max: (b.x_max() * wf).clamp(0.0, wf),
        y_max: (b.y_max() * hf).clamp(0.0, hf),
    };
    if px.x_max <= px.x_min || px.y_max <= px.y_min {
        return Err(AnnotationError::DegenerateBox);
    }
    Ok(px)
}

pub fn pixel_to_normalized(b: &PixelBox, width: u32, height: u32) -> Result<NormalizedBox, AnnotationError> {
    if width == 0 || height == 0 {
        return Err(AnnotationError::InvalidDimensions { width, height });
    }
    if b.x_max <= b.x_min || b.y_max <= b.y_min {
        return Err(AnnotationError::DegenerateBox);
    }
    let (wf, hf) = (f64::from(width), f64::from(height));
    Ok(NormalizedBox {
        class_id: b.class_id,
        cx: (b.x_min + b.x_max) / 2.0 / wf,
        cy: (b.y_min + b.y_max) / 2.0 / hf,
        w: (b.x_max - b.x_min) / wf,
        h: (b.y_max - b.y_min) / hf,
    })
}

/// Class-name substitution table, written `old=new,old=new`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassRemap {
    entries: BTreeMap<String, String>,
}

impl ClassRemap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Maps every name in `map` to itself.
    pub fn identity(map: &ClassMap) -> Self {
        Self {
            entries: map.names().iter().map(|n| (n.clone(), n.clone())).collect(),
        }
    }

    pub fn insert(&mut self, old: impl Into<String>, new: impl Into<String>) -> &mut Self {
        self.entries.insert(old.into(), new.into());
        self
    }

    pub fn get(&self, old: &str) -> Option<&str> {
        self.entries.get(old).map(String::as_str)
    }

    /// Entries of `overrides` replace the ones here.
    pub fn merged(mut self, overrides: &ClassRemap) -> Self {
        for (k, v) in &overrides.entries {
            self.entries.insert(k.clone(), v.clone());
        }
        self
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl FromStr for ClassRemap {
    type Err = AnnotationError;

    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let mut remap = ClassRemap::new();
        for pair in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let parts: Vec<&str> = pair.split('=').map(str::trim).collect();
            match parts.as_slice() {
                [old, new] if !old.is_empty() && !new.is_empty() => {
                    if remap.entries.insert(old.to_string(), new.to_string()).is_some() {
                        return Err(AnnotationError::InvalidRemap(format!("`{old}` mapped twice")));
                    }
                }
                _ => return Err(AnnotationError::InvalidRemap(format!("`{pair}` is not of the form old=new"))),
            }
        }
        Ok(remap)
    }
}

impl fmt::Display for ClassRemap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pairs: Vec<String> = self.entries.iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&pairs.join(","))
    }
}

/// Relabels boxes from `old_map` into `new_map` through `remap`. Boxes whose
/// class maps to [`DROP_CLASS`] are removed; geometry is never touched.
pub fn remap_classes(
    boxes: &[NormalizedBox],
    old_map: &ClassMap,
    remap: &ClassRemap,
    new_map: &ClassMap,
) -> Result<Vec<NormalizedBox>, AnnotationError> {
    let mut out = Vec::with_capacity(boxes.len());
    for b in boxes {
        let old_name = old_map.name(b.class_id).ok_or(AnnotationError::UnknownClass(b.class_id))?;
        let new_name = remap
            .get(old_name)
            .ok_or_else(|| AnnotationError::UnmappedClass(old_name.to_string()))?;
        if new_name == DROP_CLASS {
            continue;
        }
        let class_id = new_map
            .id_of(new_name)
            .ok_or_else(|| AnnotationError::UnmappedClass(new_name.to_string()))?;
        out.push(NormalizedBox { class_id, ..*b });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dh() -> ClassMap {
        ClassMap::door_handle()
    }

    #[test]
    fn parses_positional_fields() {
        let b = parse_label_line("0 0.5 0.5 0.25 0.5", &dh()).unwrap();
        assert_eq!(b, NormalizedBox::new(0, 0.5, 0.5, 0.25, 0.5));
    }

    #[test]
    fn rejects_out_of_range_center() {
        let err = parse_label_line("1 1.2 0.5 0.1 0.1", &dh()).unwrap_err();
        assert!(matches!(err, AnnotationError::OutOfRange { field: "cx", .. }), "{err:?}");
    }

    #[test]
    fn rejects_wrong_field_count() {
        assert!(matches!(parse_label_line("0 0.5 0.5", &dh()), Err(AnnotationError::Malformed(_))));
        assert!(matches!(
            parse_label_line("0 0.5 0.5 0.1 0.1 0.9", &dh()),
            Err(AnnotationError::Malformed(_))
        ));
    }

    #[test]
    fn rejects_non_integer_class_and_unknown_class() {
        assert!(matches!(parse_label_line("0.0 0.5 0.5 0.1 0.1", &dh()), Err(AnnotationError::Malformed(_))));
        assert!(matches!(parse_label_line("-1 0.5 0.5 0.1 0.1", &dh()), Err(AnnotationError::Malformed(_))));
        assert_eq!(parse_label_line("2 0.5 0.5 0.1 0.1", &dh()), Err(AnnotationError::UnknownClass(2)));
        assert!(matches!(parse_label_line("0 nan 0.5 0.1 0.1", &dh()), Err(AnnotationError::Malformed(_))));
    }

    #[test]
    fn rejects_non_positive_size() {
        assert!(matches!(
            parse_label_line("0 0.5 0.5 0 0.1", &dh()),
            Err(AnnotationError::OutOfRange { field: "w", .. })
        ));
        assert!(matches!(
            parse_label_line("0 0.5 0.5 0.1 -0.1", &dh()),
            Err(AnnotationError::OutOfRange { field: "h", .. })
        ));
    }

    #[test]
    fn clamps_within_epsilon_and_rejects_beyond() {
        let b = parse_label_line("0 0.0499995 0.5 0.1 0.1", &dh()).unwrap();
        assert!(b.x_min() >= 0.0);
        assert!((b.w - (0.1 - 5e-7)).abs() < 1e-12);
        let b = NormalizedBox::new(0, 0.95 + 5e-7, 0.5, 0.1, 0.1).validated(&dh()).unwrap();
        assert!(b.x_max() <= 1.0 + 1e-15);
        assert!((b.w - (0.1 - 5e-7)).abs() < 1e-12);
        assert!(NormalizedBox::new(0, 0.95 + 2e-6, 0.5, 0.1, 0.1).validated(&dh()).is_err());
    }

    #[test]
    fn file_parsing_skips_blank_lines_and_reports_line() {
        assert!(parse_label_file("", &dh()).unwrap().is_empty());
        let boxes = parse_label_file("0 0.5 0.5 0.2 0.2\n\n1 0.1 0.1 0.1 0.1\n", &dh()).unwrap();
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[1].class_id, 1);
        let err = parse_label_file("0 0.5 0.5 0.2 0.2\n0 0.5\n", &dh()).unwrap_err();
        assert_eq!(err.line(), Some(2));
        assert!(matches!(err.root(), AnnotationError::Malformed(_)));
    }

    #[test]
    fn serializes_fixed_six_decimals() {
        let text = serialize_label_file(&[NormalizedBox::new(0, 0.5, 0.5, 0.25, 0.5)]);
        assert_eq!(text, "0 0.500000 0.500000 0.250000 0.500000\n");
        assert_eq!(serialize_label_file(&[]), "");
    }

    #[test]
    fn pixel_conversion_cases() {
        let px = normalized_to_pixel(&NormalizedBox::new(0, 0.5, 0.5, 0.25, 0.5), 640, 480).unwrap();
        assert_eq!((px.x_min, px.y_min, px.x_max, px.y_max), (240.0, 120.0, 400.0, 360.0));
        let px = normalized_to_pixel(&NormalizedBox::new(0, 0.5, 0.5, 1.0, 1.0), 640, 480).unwrap();
        assert_eq!((px.x_min, px.y_min, px.x_max, px.y_max), (0.0, 0.0, 640.0, 480.0));
        let px = normalized_to_pixel(&NormalizedBox::new(0, 0.0, 0.0, 0.1, 0.1), 640, 480).unwrap();
        assert_eq!((px.x_min, px.y_min, px.x_max, px.y_max), (0.0, 0.0, 32.0, 24.0));
        assert_eq!(
            normalized_to_pixel(&NormalizedBox::new(0, 1.2, 0.5, 0.2, 0.2), 640, 480),
            Err(AnnotationError::DegenerateBox)
        );
        assert!(normalized_to_pixel(&NormalizedBox::new(0, 0.5, 0.5, 0.2, 0.2), 0, 480).is_err());
    }

    fn dd_map() -> ClassMap {
        ClassMap::new(["door", "handle", "cabinet_door", "refrigerator_door"]).unwrap()
    }

    #[test]
    fn consolidates_door_family() {
        let boxes: Vec<NormalizedBox> =
            (0..4).map(|c| NormalizedBox::new(c, 0.5, 0.5, 0.1 + 0.1 * f64::from(c), 0.2)).collect();
        let remap: ClassRemap =
            "cabinet_door=door,refrigerator_door=door,door=door,handle=handle".parse().unwrap();
        let out = remap_classes(&boxes, &dd_map(), &remap, &dh()).unwrap();
        let ids: Vec<u32> = out.iter().map(|b| b.class_id).collect();
        assert_eq!(ids, vec![0, 1, 0, 0]);
        for (a, b) in boxes.iter().zip(&out) {
            assert_eq!((a.cx, a.cy, a.w, a.h), (b.cx, b.cy, b.w, b.h));
        }
    }

    #[test]
    fn identity_remap_and_drop() {
        let boxes = vec![NormalizedBox::new(0, 0.2, 0.2, 0.1, 0.1), NormalizedBox::new(1, 0.7, 0.7, 0.1, 0.1)];
        assert_eq!(remap_classes(&boxes, &dh(), &ClassRemap::identity(&dh()), &dh()).unwrap(), boxes);
        let drop_handles: ClassRemap = "door=door,handle=DROP".parse().unwrap();
        let out = remap_classes(&boxes, &dh(), &drop_handles, &dh()).unwrap();
        assert_eq!(out, vec![boxes[0]]);
        let partial: ClassRemap = "door=door".parse().unwrap();
        assert_eq!(
            remap_classes(&boxes, &dh(), &partial, &dh()),
            Err(AnnotationError::UnmappedClass("handle".into()))
        );
    }

    #[test]
    fn remap_spec_grammar() {
        assert!("a=b=c".parse::<ClassRemap>().is_err());
        assert!("a=".parse::<ClassRemap>().is_err());
        assert!("a=b,a=c".parse::<ClassRemap>().is_err());
        let r: ClassRemap = " a = b , c=d ".parse().unwrap();
        assert_eq!(r.get("a"), Some("b"));
        assert_eq!(r.to_string(), "a=b,c=d");
        assert!("".parse::<ClassRemap>().unwrap().is_empty());
    }

    #[test]
    fn class_map_rules() {
        assert!(ClassMap::new(Vec::<String>::new()).is_err());
        assert!(ClassMap::new(["door", "door"]).is_err());
        assert!(ClassMap::new(["door", ""]).is_err());
        let m = ClassMap::parse("door\nhandle\n\n").unwrap();
        assert_eq!(m, ClassMap::door_handle());
        assert_eq!(m.to_text(), "door\nhandle\n");
        assert_eq!(m.id_of("handle"), Some(1));
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"["door","handle"]"#);
        assert!(serde_json::from_str::<ClassMap>(r#"["a","a"]"#).is_err());
    }

    #[test]
    fn prediction_lines() {
        let d = parse_prediction_line("1 0.5 0.5 0.2 0.2 0.75", &dh(), "v1").unwrap();
        assert_eq!(d.confidence, 0.75);
        assert_eq!(d.model_version, "v1");
        assert!(parse_prediction_line("1 0.5 0.5 0.2 0.2 1.5", &dh(), "v1").is_err());
        assert!(parse_prediction_line("1 0.5 0.5 0.2 0.2", &dh(), "v1").is_err());
        let text = serialize_prediction_file(std::slice::from_ref(&d));
        assert_eq!(parse_prediction_file(&text, &dh(), "v1").unwrap(), vec![d]);
    }

    fn arb_valid_box() -> impl Strategy<Value = NormalizedBox> {
        (0u32..2, 0.001f64..=1.0, 0.001f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(c, w, h, fx, fy)| {
            let cx = w / 2.0 + fx * (1.0 - w);
            let cy = h / 2.0 + fy * (1.0 - h);
            NormalizedBox::new(c, cx, cy, w, h)
        })
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(boxes in proptest::collection::vec(arb_valid_box(), 0..20)) {
            let text = serialize_label_file(&boxes);
            let parsed = parse_label_file(&text, &dh()).unwrap();
            prop_assert_eq!(parsed.len(), boxes.len());
            for (a, b) in boxes.iter().zip(&parsed) {
                prop_assert_eq!(a.class_id, b.class_id);
                prop_assert!((a.cx - b.cx).abs() <= 5e-7 + 1e-12);
                prop_assert!((a.cy - b.cy).abs() <= 5e-7 + 1e-12);
                prop_assert!((a.w - b.w).abs() <= 5e-7 + 1e-12);
                prop_assert!((a.h - b.h).abs() <= 5e-7 + 1e-12);
            }
            prop_assert_eq!(serialize_label_file(&parsed), text);
        }

        #[test]
        fn pixel_round_trip_within_half_pixel(b in arb_valid_box(), width in 16u32..2000, height in 16u32..2000) {
            let px = match normalized_to_pixel(&b, width, height) {
                Ok(px) => px,
                Err(_) => return Ok(()),
            };
            let back = pixel_to_normalized(&px, width, height).unwrap();
            let tol = 1.0 / (2.0 * f64::from(width.min(height)));
            prop_assert!((back.cx - b.cx).abs() <= tol);
            prop_assert!((back.cy - b.cy).abs() <= tol);
            prop_assert!((back.w - b.w).abs() <= tol);
            prop_assert!((back.h - b.h).abs() <= tol);
        }

        // Offsets inside the tolerance pass, offsets clearly outside fail.
        #[test]
        fn validation_boundary(which in 0usize..4, inside in any::<bool>(), frac in 0.05f64..0.95) {
            let off = if inside { frac * EPSILON } else { EPSILON * (1.0 + 1.0 + frac) };
            let b = match which {
                0 => NormalizedBox::new(0, 0.05 - off, 0.5, 0.1, 0.1),
                1 => NormalizedBox::new(0, 0.95 + off, 0.5, 0.1, 0.1),
                2 => NormalizedBox::new(0, 0.5, 0.5, 1.0 + off, 0.1),
                _ => NormalizedBox::new(0, 0.5, 0.95 + off, 0.1, 0.1),
            };
            let res = b.validated(&dh());
            prop_assert_eq!(res.is_ok(), inside, "{:?} -> {:?}", b, res);
            if let Ok(v) = res {
                prop_assert!(v.x_min() >= -1e-15 && v.x_max() <= 1.0 + 1e-15);
                prop_assert!(v.y_min() >= -1e-15 && v.y_max() <= 1.0 + 1e-15);
            }
        }

        #[test]
        fn remap_without_drop_preserves_geometry(boxes in proptest::collection::vec(arb_valid_box(), 0..20)) {
            let swap: ClassRemap = "door=handle,handle=door".parse().unwrap();
            let out = remap_classes(&boxes, &dh(), &swap, &dh()).unwrap();
            prop_assert_eq!(out.len(), boxes.len());
            for (a, b) in boxes.iter().zip(&out) {
                prop_assert_eq!((a.cx, a.cy, a.w, a.h), (b.cx, b.cy, b.w, b.h));
                prop_assert_eq!(a.class_id, 1 - b.class_id);
            }
        }
    }
}
