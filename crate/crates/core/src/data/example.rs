use serde::{Deserialize, Serialize};

use crate::data::FaceSample;
use crate::error::{Error, Result};
use crate::geometry::{Affine, LandmarkSet, Point};
use crate::heatmap::{encode_gaussian, encode_hreg, encode_pwc, HeatmapStack, MapSize, PwcLabelMap};
use crate::models::HeadKind;

/// Ground-truth encoding parameters of the heatmap heads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    /// Gaussian sigma in map pixels (distribution and heatmap regression).
    pub sigma: f64,
    /// Chebyshev label radius in map pixels (pixel-wise classification).
    pub pwc_radius: usize,
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec { sigma: 1.0, pwc_radius: 0 }
    }
}

/// Crop pixel coordinate to the unit interval: `0` is the crop's left (or
/// top) edge and `1` its right (or bottom) edge.
pub fn crop_to_unit(c: f64, input_size: usize) -> f64 {
    (c + 0.5) / input_size as f64
}

pub fn unit_to_crop(u: f64, input_size: usize) -> f64 {
    u * input_size as f64 - 0.5
}

/// Unit coordinate to map pixels; map pixel `j` covers `[j, j + 1) / map`.
pub fn unit_to_map(u: f64, map_size: usize) -> f64 {
    u * map_size as f64 - 0.5
}

pub fn map_to_unit(m: f64, map_size: usize) -> f64 {
    (m + 0.5) / map_size as f64
}

fn map_points(set: &LandmarkSet, f: impl Fn(f64) -> f64) -> Result<LandmarkSet> {
    LandmarkSet::new(set.scheme(), set.points().iter().map(|p| Point::new(f(p.x), f(p.y))).collect())
}

/// Crop-pixel landmarks to map pixels.
pub fn crop_to_map(set: &LandmarkSet, input_size: usize, map_size: usize) -> Result<LandmarkSet> {
    map_points(set, |c| unit_to_map(crop_to_unit(c, input_size), map_size))
}

/// Map-pixel landmarks to crop pixels.
pub fn map_to_crop(set: &LandmarkSet, input_size: usize, map_size: usize) -> Result<LandmarkSet> {
    map_points(set, |m| unit_to_crop(map_to_unit(m, map_size), input_size))
}

/// Flat unit coordinates to crop-pixel landmarks.
pub fn unit_to_landmarks(set_like: &LandmarkSet, unit: &[f64], input_size: usize) -> Result<LandmarkSet> {
    let flat: Vec<f64> = unit.iter().map(|&u| unit_to_crop(u, input_size)).collect();
    LandmarkSet::from_flat(set_like.scheme(), &flat)
}

#[derive(Clone, Debug)]
pub enum Target {
    /// Regression heads train on [`Example::unit`] directly.
    Coords,
    Distribution(HeatmapStack),
    HeatmapRegression(HeatmapStack),
    Pwc(PwcLabelMap),
}

/// One network input with its ground truth.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub input_size: usize,
    pub map_size: usize,
    /// Planar RGB `[3, S, S]`.
    pub image: Vec<f32>,
    /// Landmarks in crop pixels.
    pub crop_landmarks: LandmarkSet,
    /// Landmarks in map pixels.
    pub map_landmarks: LandmarkSet,
    /// Flat `(x, y)` unit coordinates, `2 |L|` values.
    pub unit: Vec<f64>,
    pub target: Target,
    /// Sample frame to crop pixels.
    pub to_crop: Affine,
}

/// Crops `sample` with its crop box, resamples to `input_size` and encodes
/// the ground truth for `head` in the crop (regression) or map (heatmap)
/// frame.
pub fn make_example(sample: &FaceSample, input_size: usize, map_size: usize, head: HeadKind, spec: TargetSpec) -> Result<Example> {
    if input_size == 0 || map_size == 0 {
        return Err(Error::InvalidArgument("input and map sizes must be > 0".into()));
    }
    let crop = sample.crop_box()?;
    let to_crop = crop.transform(input_size);
    let full = sample.frame().then(&to_crop);
    let inv = full.inverse().ok_or(Error::DegenerateShape)?;
    let image = sample.source().warp(input_size, input_size, &inv).to_planar();
    let crop_landmarks = sample.landmarks.transform(&to_crop);
    let map_landmarks = crop_to_map(&crop_landmarks, input_size, map_size)?;
    let unit = crop_landmarks.to_flat().into_iter().map(|c| crop_to_unit(c, input_size)).collect();
    let size = MapSize::square(map_size);
    let target = match head {
        HeadKind::Direct | HeadKind::Cascaded => Target::Coords,
        HeadKind::Distribution => Target::Distribution(encode_gaussian(&map_landmarks, size, spec.sigma)?),
        HeadKind::HeatmapRegression => Target::HeatmapRegression(encode_hreg(&map_landmarks, size, spec.sigma)?),
        HeadKind::Pwc => Target::Pwc(encode_pwc(&map_landmarks, size, spec.pwc_radius)),
    };
    Ok(Example { id: sample.meta.id.clone(), input_size, map_size, image, crop_landmarks, map_landmarks, unit, target, to_crop })
}
