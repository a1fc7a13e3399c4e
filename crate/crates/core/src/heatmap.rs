//! Ground-truth encodings for heatmap heads and coordinate decoding.
//!
//! Maps use the same pixel-center convention as landmarks: entry `(row,
//! col)` sits at `(x, y) = (col, row)`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LandmarkSet, Point, Scheme};

/// What a [`HeatmapStack`] holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Semantics {
    /// One spatial probability distribution per landmark.
    Distribution,
    /// Peak-normalized Gaussians plus a trailing background channel.
    HeatmapRegression,
    /// Per-pixel class probabilities over landmarks plus background.
    PwcProbability,
}

/// Per-landmark score maps, stored `(height, width, channels)` with the
/// channel index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    semantics: Semantics,
    scheme: Scheme,
}

impl HeatmapStack {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>, semantics: Semantics, scheme: Scheme) -> Result<Self> {
        let expected = match semantics {
            Semantics::Distribution => scheme.len(),
            _ => scheme.len() + 1,
        };
        if channels != expected {
            return Err(Error::shape("heatmap", format!("{semantics:?} over {} needs {expected} channels, got {channels}", scheme.name())));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape("heatmap", format!("{height}x{width}x{channels} needs {} values, got {}", height * width * channels, data.len())));
        }
        Ok(HeatmapStack { height, width, channels, data, semantics, scheme })
    }

    /// Builds a stack from planar `[channels, height, width]` values.
    pub fn from_planar(height: usize, width: usize, planar: &[f64], semantics: Semantics, scheme: Scheme) -> Result<Self> {
        let hw = height * width;
        if hw == 0 || !planar.len().is_multiple_of(hw) {
            return Err(Error::shape("heatmap", format!("{} values do not tile {height}x{width}", planar.len())));
        }
        let c = planar.len() / hw;
        let mut data = vec![0.0; planar.len()];
        for ci in 0..c {
            for p in 0..hw {
                data[p * c + ci] = planar[ci * hw + p];
            }
        }
        Self::new(height, width, c, data, semantics, scheme)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn semantics(&self) -> Semantics {
        self.semantics
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Number of landmark channels (the background channel excluded).
    pub fn landmark_channels(&self) -> usize {
        self.scheme.len()
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn channel(&self, channel: usize) -> Vec<f64> {
        self.data.iter().skip(channel).step_by(self.channels).copied().collect()
    }

    /// Planar `[channels, height, width]` copy.
    pub fn to_planar(&self) -> Vec<f64> {
        (0..self.channels).flat_map(|c| self.channel(c)).collect()
    }

    /// Writes one grayscale PGM per channel, named `<sample>_<channel>.pgm`
    /// and scaled so each channel's maximum is 255.
    pub fn dump_pgm(&self, dir: &Path, sample: &str) -> Result<Vec<PathBuf>> {
        let mut paths = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let plane = self.channel(c);
            let max = plane.iter().copied().fold(0.0, f64::max);
            let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
            bytes.extend(plane.iter().map(|&v| if max > 0.0 { (v.max(0.0) / max * 255.0).round() as u8 } else { 0 }));
            let path = dir.join(format!("{sample}_{c}.pgm"));
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Class id per pixel; class `|L|` is background.
#[derive(Clone, Debug, PartialEq)]
pub struct PwcLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    scheme: Scheme,
    off_map: Vec<usize>,
}

impl PwcLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>, scheme: Scheme) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("pwc labels", format!("{height}x{width} needs {} labels, got {}", height * width, labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize > scheme.len()) {
            return Err(Error::InvalidArgument(format!("class {l} exceeds background class {}", scheme.len())));
        }
        Ok(PwcLabelMap { height, width, labels, scheme, off_map: Vec::new() })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn background(&self) -> u32 {
        self.scheme.len() as u32
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Landmarks whose rounded position fell outside the map.
    pub fn off_map(&self) -> &[usize] {
        &self.off_map
    }
}

/// Map size in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapSize {
    pub height: usize,
    pub width: usize,
}

impl MapSize {
    pub const fn square(side: usize) -> Self {
        MapSize { height: side, width: side }
    }
}

fn gaussian_planes(landmarks: &LandmarkSet, size: MapSize, sigma: f64) -> Result<Vec<Vec<f64>>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    landmarks
        .points()
        .iter()
        .enumerate()
        .map(|(l, p)| {
            let mut plane = vec![0.0; size.height * size.width];
            for row in 0..size.height {
                let dy = row as f64 - p.y;
                for col in 0..size.width {
                    let dx = col as f64 - p.x;
                    plane[row * size.width + col] = (-(dx * dx + dy * dy) * inv).exp();
                }
            }
            if plane.iter().all(|&v| v == 0.0) {
                return Err(Error::OffMap { index: l, width: size.width, height: size.height });
            }
            Ok(plane)
        })
        .collect()
}

fn interleave(planes: &[Vec<f64>], hw: usize) -> Vec<f64> {
    let c = planes.len();
    let mut data = vec![0.0; hw * c];
    for (ci, plane) in planes.iter().enumerate() {
        for (p, &v) in plane.iter().enumerate() {
            data[p * c + ci] = v;
        }
    }
    data
}

/// Isotropic Gaussian per landmark (coordinates in map pixels), truncated
/// to the map and renormalized to sum to one.
pub fn encode_gaussian(landmarks: &LandmarkSet, size: MapSize, sigma: f64) -> Result<HeatmapStack> {
    let mut planes = gaussian_planes(landmarks, size, sigma)?;
    for plane in &mut planes {
        let total: f64 = plane.iter().sum();
        plane.iter_mut().for_each(|v| *v /= total);
    }
    let data = interleave(&planes, size.height * size.width);
    HeatmapStack::new(size.height, size.width, planes.len(), data, Semantics::Distribution, landmarks.scheme())
}

/// Peak-one Gaussians (not renormalized) followed by a background channel
/// `1 - max_l h_l`.
pub fn encode_hreg(landmarks: &LandmarkSet, size: MapSize, sigma: f64) -> Result<HeatmapStack> {
    let mut planes = gaussian_planes(landmarks, size, sigma)?;
    let hw = size.height * size.width;
    let bg = (0..hw).map(|p| (1.0 - planes.iter().map(|pl| pl[p]).fold(0.0, f64::max)).clamp(0.0, 1.0)).collect();
    planes.push(bg);
    let data = interleave(&planes, hw);
    HeatmapStack::new(size.height, size.width, planes.len(), data, Semantics::HeatmapRegression, landmarks.scheme())
}

/// Labels every pixel within Chebyshev distance `radius` of a rounded
/// landmark position with that landmark's class; lower indices win ties.
/// Rounding is half away from zero.
pub fn encode_pwc(landmarks: &LandmarkSet, size: MapSize, radius: usize) -> PwcLabelMap {
    let bg = landmarks.len() as u32;
    let mut labels = vec![bg; size.height * size.width];
    let mut off_map = Vec::new();
    let r = radius as i64;
    for (l, p) in landmarks.points().iter().enumerate().rev() {
        let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
        if cx < 0 || cy < 0 || cx >= size.width as i64 || cy >= size.height as i64 {
            off_map.push(l);
            continue;
        }
        for y in (cy - r).max(0)..=(cy + r).min(size.height as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(size.width as i64 - 1) {
                labels[y as usize * size.width + x as usize] = l as u32;
            }
        }
    }
    off_map.reverse();
    PwcLabelMap { height: size.height, width: size.width, labels, scheme: landmarks.scheme(), off_map }
}

/// One-hot probability stack with `classes` channels.
pub fn onehot(labels: &PwcLabelMap, classes: usize) -> Result<HeatmapStack> {
    if let Some(&l) = labels.labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidArgument(format!("label {l} needs more than {classes} classes")));
    }
    let mut data = vec![0.0; labels.labels.len() * classes];
    for (p, &l) in labels.labels.iter().enumerate() {
        data[p * classes + l as usize] = 1.0;
    }
    HeatmapStack::new(labels.height, labels.width, classes, data, Semantics::PwcProbability, labels.scheme)
}

/// Position of each landmark channel's maximum; ties resolve to the lowest
/// row-major index. The background channel, if any, is ignored.
pub fn decode_argmax(maps: &HeatmapStack) -> Result<LandmarkSet> {
    let points = (0..maps.landmark_channels())
        .map(|c| {
            let mut best = (f64::NEG_INFINITY, 0);
            for p in 0..maps.height * maps.width {
                let v = maps.data[p * maps.channels + c];
                if v > best.0 {
                    best = (v, p);
                }
            }
            Point::new((best.1 % maps.width) as f64, (best.1 / maps.width) as f64)
        })
        .collect();
    LandmarkSet::new(maps.scheme, points)
}

/// Expected position under a spatial softmax of each landmark channel at
/// `temperature`.
pub fn decode_softargmax(maps: &HeatmapStack, temperature: f64) -> Result<LandmarkSet> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("soft-argmax temperature must be > 0, got {temperature}")));
    }
    let points = (0..maps.landmark_channels())
        .map(|c| {
            let plane = maps.channel(c);
            let max = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (mut z, mut ex, mut ey) = (0.0, 0.0, 0.0);
            for (p, &v) in plane.iter().enumerate() {
                let e = ((v - max) / temperature).exp();
                z += e;
                ex += e * (p % maps.width) as f64;
                ey += e * (p / maps.width) as f64;
            }
            Point::new(ex / z, ey / z)
        })
        .collect();
    LandmarkSet::new(maps.scheme, points)
}
