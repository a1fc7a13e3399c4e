//! Landmark containers, affine coordinate transforms, the landmark-driven
//! face crop, and evaluation metrics (NMSE, ECDF).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Landmark numbering scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// The 68-point 300-W scheme.
    Face68,
    /// Ten-point scheme of the synthetic faces: outer/inner corners of both
    /// eyes, nose tip, mouth corners, upper and lower lip, chin.
    Toy10,
    /// Any other count; the first and last points act as the eye corners.
    Generic { count: usize },
}

impl Scheme {
    pub fn len(&self) -> usize {
        match self {
            Scheme::Face68 => 68,
            Scheme::Toy10 => 10,
            Scheme::Generic { count } => *count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Indices of the two outer eye corners (zero-based); 36 and 45 for
    /// the 68-point scheme.
    pub fn outer_eye_corners(&self) -> [usize; 2] {
        match self {
            Scheme::Face68 => [36, 45],
            Scheme::Toy10 => [0, 3],
            Scheme::Generic { count } => [0, count.saturating_sub(1)],
        }
    }

    /// Landmarks outlining the two eyes; 36..=47 for the 68-point scheme.
    pub fn eye_anchors(&self) -> Vec<usize> {
        match self {
            Scheme::Face68 => (36..48).collect(),
            Scheme::Toy10 => vec![0, 1, 2, 3],
            Scheme::Generic { .. } => self.outer_eye_corners().to_vec(),
        }
    }

    /// The scheme of a file with `count` points.
    pub fn for_count(count: usize) -> Self {
        match count {
            68 => Scheme::Face68,
            10 => Scheme::Toy10,
            n => Scheme::Generic { count: n },
        }
    }

    pub fn name(&self) -> String {
        match self {
            Scheme::Face68 => "face68".into(),
            Scheme::Toy10 => "toy10".into(),
            Scheme::Generic { count } => format!("generic{count}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "face68" => Some(Scheme::Face68),
            "toy10" => Some(Scheme::Toy10),
            _ => s.strip_prefix("generic")?.parse().ok().map(|count| Scheme::Generic { count }),
        }
    }
}

/// Image-space point; `x` is the column and `y` the row, in pixels, with
/// pixel centers at integer coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Ordered landmark coordinates under a [`Scheme`].
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    scheme: Scheme,
    points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(scheme: Scheme, points: Vec<Point>) -> Result<Self> {
        if points.len() != scheme.len() {
            return Err(Error::InvalidLandmarks(format!(
                "scheme {} needs {} points, got {}",
                scheme.name(),
                scheme.len(),
                points.len()
            )));
        }
        let [a, b] = scheme.outer_eye_corners();
        if a == b || b >= points.len() {
            return Err(Error::InvalidLandmarks(format!(
                "scheme {} has no two distinct outer eye corners",
                scheme.name()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::InvalidLandmarks(format!("landmark {i} is not finite")));
        }
        Ok(LandmarkSet { scheme, points })
    }

    /// Builds a set from interleaved `x0, y0, x1, y1, ...` values.
    pub fn from_flat(scheme: Scheme, flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(2) {
            return Err(Error::InvalidLandmarks("odd number of coordinates".into()));
        }
        Self::new(scheme, flat.chunks(2).map(|c| Point::new(c[0], c[1])).collect())
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let (sx, sy) = self.points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
        Point::new(sx / n, sy / n)
    }

    /// Horizontal and vertical extents `(d_h, d_v)`.
    pub fn extent(&self) -> (f64, f64) {
        let fold = |f: fn(&Point) -> f64| {
            self.points.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (x0, x1) = fold(|p| p.x);
        let (y0, y1) = fold(|p| p.y);
        (x1 - x0, y1 - y0)
    }

    /// Inter-ocular distance: distance between the outer eye corners.
    pub fn iod(&self) -> f64 {
        let [a, b] = self.scheme.outer_eye_corners();
        self.points[a].dist(self.points[b])
    }

    pub fn transform(&self, t: &Affine) -> LandmarkSet {
        LandmarkSet { scheme: self.scheme, points: self.points.iter().map(|&p| t.apply(p)).collect() }
    }
}

/// 2-D affine map `(x, y) -> (a x + b y + c, d x + e y + f)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub m: [f64; 6],
}

impl Affine {
    pub const IDENTITY: Affine = Affine { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0] };

    pub fn scale_translate(sx: f64, sy: f64, tx: f64, ty: f64) -> Self {
        Affine { m: [sx, 0.0, tx, 0.0, sy, ty] }
    }

    /// Rotation by `angle` radians (counter-clockwise in `x`-right, `y`-down
    /// pixel axes maps `(1, 0)` to `(cos, sin)`) followed by uniform
    /// scaling, both about `center`.
    pub fn rotate_scale_about(center: Point, angle: f64, scale: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let (a, b, d, e) = (scale * c, -scale * s, scale * s, scale * c);
        Affine { m: [a, b, center.x - a * center.x - b * center.y, d, e, center.y - d * center.x - e * center.y] }
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.m;
        Point::new(m[0] * p.x + m[1] * p.y + m[2], m[3] * p.x + m[4] * p.y + m[5])
    }

    /// `other ∘ self`: apply `self` first.
    pub fn then(&self, other: &Affine) -> Affine {
        let (a, b) = (&self.m, &other.m);
        Affine {
            m: [
                b[0] * a[0] + b[1] * a[3],
                b[0] * a[1] + b[1] * a[4],
                b[0] * a[2] + b[1] * a[5] + b[2],
                b[3] * a[0] + b[4] * a[3],
                b[3] * a[1] + b[4] * a[4],
                b[3] * a[2] + b[4] * a[5] + b[5],
            ],
        }
    }

    pub fn inverse(&self) -> Option<Affine> {
        let m = &self.m;
        let det = m[0] * m[4] - m[1] * m[3];
        if det.abs() < 1e-300 || !det.is_finite() {
            return None;
        }
        let (a, b, d, e) = (m[4] / det, -m[1] / det, -m[3] / det, m[0] / det);
        Some(Affine { m: [a, b, -(a * m[2] + b * m[5]), d, e, -(d * m[2] + e * m[5])] })
    }
}

/// Square crop region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub center: Point,
    pub side: f64,
}

impl CropBox {
    /// Map from original coordinates into a square output of `out_size`
    /// pixels: the box's top-left corner goes to the origin and its side
    /// to `out_size`.
    pub fn transform(&self, out_size: usize) -> Affine {
        let s = out_size as f64 / self.side;
        let x0 = self.center.x - self.side / 2.0;
        let y0 = self.center.y - self.side / 2.0;
        Affine::scale_translate(s, s, -x0 * s, -y0 * s)
    }

    pub fn contains(&self, p: Point) -> bool {
        let h = self.side / 2.0;
        (p.x - self.center.x).abs() <= h && (p.y - self.center.y).abs() <= h
    }
}

/// Side-length multiplier applied to the larger landmark extent.
pub const CROP_MARGIN: f64 = 1.3;

/// Square box centred on the landmark centroid with side
/// `1.3 * max(d_h, d_v)`.
pub fn crop_box(landmarks: &LandmarkSet) -> Result<CropBox> {
    if landmarks.len() < 2 {
        return Err(Error::InvalidLandmarks("crop needs at least two landmarks".into()));
    }
    let (dh, dv) = landmarks.extent();
    let side = CROP_MARGIN * dh.max(dv);
    if !(side > 0.0) {
        return Err(Error::DegenerateShape);
    }
    Ok(CropBox { center: landmarks.centroid(), side })
}

/// Crops `box` out of `image` and resamples it (bilinear, black outside
/// the source) to `out_size x out_size`. Returns the image and the
/// transform from original to output coordinates.
pub fn apply_crop(image: &Image, crop: &CropBox, out_size: usize) -> Result<(Image, Affine)> {
    if out_size == 0 {
        return Err(Error::InvalidArgument("crop output size must be > 0".into()));
    }
    let h = crop.side / 2.0;
    let (w, ht) = (image.width() as f64, image.height() as f64);
    if crop.center.x + h < 0.0 || crop.center.x - h > w - 1.0 || crop.center.y + h < 0.0 || crop.center.y - h > ht - 1.0 {
        return Err(Error::OutOfFrame { width: image.width(), height: image.height() });
    }
    let t = crop.transform(out_size);
    let inv = t.inverse().ok_or(Error::DegenerateShape)?;
    Ok((image.warp(out_size, out_size, &inv), t))
}

/// Mean per-landmark Euclidean error over the given indices, normalized by
/// the ground truth's inter-ocular distance.
pub fn nmse_subset(detected: &LandmarkSet, truth: &LandmarkSet, indices: &[usize]) -> Result<f64> {
    if detected.scheme() != truth.scheme() || detected.len() != truth.len() {
        return Err(Error::InvalidLandmarks(format!(
            "scheme mismatch: {} vs {}",
            detected.scheme().name(),
            truth.scheme().name()
        )));
    }
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty landmark subset".into()));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= truth.len()) {
        return Err(Error::InvalidArgument(format!("landmark index {i} out of range")));
    }
    let iod = truth.iod();
    if !(iod > 0.0) {
        return Err(Error::DegenerateIod);
    }
    let (d, t) = (detected.points(), truth.points());
    let sum: f64 = indices.iter().map(|&i| d[i].dist(t[i])).sum();
    Ok(sum / indices.len() as f64 / iod)
}

/// NMSE over all landmarks.
pub fn nmse(detected: &LandmarkSet, truth: &LandmarkSet) -> Result<f64> {
    let all: Vec<usize> = (0..truth.len()).collect();
    nmse_subset(detected, truth, &all)
}

/// Right-continuous empirical CDF: one `(threshold, fraction)` step per
/// distinct value, `fraction = #{v <= threshold} / n`.
pub fn ecdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("ecdf of an empty list".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("ecdf of non-finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        if i + 1 < n && sorted[i + 1] == v {
            continue;
        }
        let frac = if i + 1 == n { 1.0 } else { (i + 1) as f64 / n as f64 };
        out.push((v, frac));
    }
    Ok(out)
}

pub fn ecdf_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("threshold,fraction\n");
    for (t, f) in curve {
        let _ = writeln!(s, "{t},{f}");
    }
    s
}

/// Which landmarks an NMSE value covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LandmarkSubset {
    All,
    EyeAnchors,
}

impl LandmarkSubset {
    pub fn indices(&self, scheme: Scheme) -> Vec<usize> {
        match self {
            LandmarkSubset::All => (0..scheme.len()).collect(),
            LandmarkSubset::EyeAnchors => scheme.eye_anchors(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            LandmarkSubset::All => "all",
            LandmarkSubset::EyeAnchors => "eye_anchors",
        }
    }
}

/// Per-sample NMSE values of one evaluation subset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NmseReport {
    pub subset: String,
    pub landmarks: LandmarkSubset,
    pub per_sample: Vec<(String, f64)>,
    pub mean: f64,
    pub detected: usize,
    pub total: usize,
}

impl NmseReport {
    /// `per_sample` holds only successfully detected samples; `total`
    /// counts every sample attempted.
    pub fn new(subset: impl Into<String>, landmarks: LandmarkSubset, per_sample: Vec<(String, f64)>, total: usize) -> Self {
        let detected = per_sample.len();
        let mean = if detected == 0 {
            f64::NAN
        } else {
            per_sample.iter().map(|(_, v)| v).sum::<f64>() / detected as f64
        };
        NmseReport { subset: subset.into(), landmarks, per_sample, mean, detected, total: total.max(detected) }
    }

    pub fn detection_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.detected as f64 / self.total as f64
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.per_sample.iter().map(|(_, v)| *v).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,nmse\n");
        for (id, v) in &self.per_sample {
            let _ = writeln!(s, "{id},{v}");
        }
        let _ = writeln!(s, "#mean={}", self.mean);
        let _ = writeln!(s, "#detection_rate={}", self.detection_rate());
        s
    }
}
