use crate::autodiff::Tensor;
use crate::data::{Example, Target};
use crate::error::{Error, Result};

/// Network-ready tensors of a list of examples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    /// `[3, B, S, S]`.
    pub images: Tensor<f32>,
    /// Unit coordinates `[B, 2L]`.
    pub unit: Tensor<f32>,
    /// Map-pixel coordinates `[B, 2L]`.
    pub map_coords: Tensor<f32>,
    /// Heatmap targets `[C, B, M, M]` (distribution and heatmap regression).
    pub maps: Option<Tensor<f32>>,
    /// Class per map pixel in `(b, row, col)` order (pixel-wise
    /// classification).
    pub labels: Option<Vec<u32>>,
}

/// Stacks examples along the batch axis.
pub fn collate(examples: &[&Example]) -> Result<Batch> {
    let first = examples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (b, s, m) = (examples.len(), first.input_size, first.map_size);
    let l2 = first.unit.len();
    if examples.iter().any(|e| e.input_size != s || e.map_size != m || e.unit.len() != l2) {
        return Err(Error::InvalidArgument("examples in one batch differ in size".into()));
    }
    let ss = s * s;
    let mut images = vec![0.0f32; 3 * b * ss];
    for (bi, e) in examples.iter().enumerate() {
        for c in 0..3 {
            images[(c * b + bi) * ss..][..ss].copy_from_slice(&e.image[c * ss..][..ss]);
        }
    }
    let unit: Vec<f32> = examples.iter().flat_map(|e| e.unit.iter().map(|&v| v as f32)).collect();
    let map_coords: Vec<f32> = examples.iter().flat_map(|e| e.map_landmarks.to_flat().into_iter().map(|v| v as f32)).collect();
    let mm = m * m;
    let (mut maps, mut labels) = (None, None);
    match &first.target {
        Target::Distribution(first_stack) | Target::HeatmapRegression(first_stack) => {
            let c = first_stack.channels();
            let mut data = vec![0.0f32; c * b * mm];
            for (bi, e) in examples.iter().enumerate() {
                let (Target::Distribution(st) | Target::HeatmapRegression(st)) = &e.target else {
                    return Err(Error::InvalidArgument("mixed targets in one batch".into()));
                };
                for (ci, plane) in st.to_planar().chunks(mm).enumerate() {
                    for (d, &v) in data[(ci * b + bi) * mm..][..mm].iter_mut().zip(plane) {
                        *d = v as f32;
                    }
                }
            }
            maps = Some(Tensor::new(vec![c, b, m, m], data)?);
        }
        Target::Pwc(_) => {
            let mut all = Vec::with_capacity(b * mm);
            for e in examples {
                let Target::Pwc(l) = &e.target else {
                    return Err(Error::InvalidArgument("mixed targets in one batch".into()));
                };
                all.extend_from_slice(l.labels());
            }
            labels = Some(all);
        }
        Target::Coords => {}
    }
    Ok(Batch {
        size: b,
        images: Tensor::new(vec![3, b, s, s], images)?,
        unit: Tensor::new(vec![b, l2], unit)?,
        map_coords: Tensor::new(vec![b, l2], map_coords)?,
        maps,
        labels,
    })
}
