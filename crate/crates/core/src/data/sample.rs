use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{crop_box, Affine, CropBox, LandmarkSet};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub dataset: String,
    pub split: Split,
    pub id: String,
    pub occluded: bool,
}

/// An annotated face image.
///
/// The stored image is never resampled in place: `frame` maps source pixel
/// coordinates to the sample's coordinates (where `landmarks` live), so
/// augmentation and cropping compose into one resampling step.
#[derive(Clone, Debug)]
pub struct FaceSample {
    source: Arc<Image>,
    frame: Affine,
    crop: Option<CropBox>,
    pub landmarks: LandmarkSet,
    pub meta: SampleMeta,
}

impl FaceSample {
    pub fn new(image: Image, landmarks: LandmarkSet, meta: SampleMeta) -> Result<Self> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::InvalidArgument(format!("sample {} has an empty image", meta.id)));
        }
        Ok(FaceSample { source: Arc::new(image), frame: Affine::IDENTITY, crop: None, landmarks, meta })
    }

    pub fn source(&self) -> &Image {
        &self.source
    }

    /// Source-to-sample coordinate map.
    pub fn frame(&self) -> Affine {
        self.frame
    }

    /// The crop used by [`make_example`](super::make_example): pinned by
    /// augmentation, otherwise derived from the landmarks.
    pub fn crop_box(&self) -> Result<CropBox> {
        match self.crop {
            Some(c) => Ok(c),
            None => crop_box(&self.landmarks),
        }
    }

    pub(crate) fn transformed(&self, t: &Affine, crop: CropBox) -> FaceSample {
        FaceSample {
            source: Arc::clone(&self.source),
            frame: self.frame.then(t),
            crop: Some(crop),
            landmarks: self.landmarks.transform(t),
            meta: self.meta.clone(),
        }
    }

    /// The sample image at source resolution, resampled through `frame`.
    pub fn render(&self) -> Result<Image> {
        let inv = self.frame.inverse().ok_or(Error::DegenerateShape)?;
        Ok(self.source.warp(self.source.width(), self.source.height(), &inv))
    }
}
