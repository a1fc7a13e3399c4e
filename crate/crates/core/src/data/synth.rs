use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{FaceSample, SampleMeta, Split};
use crate::error::Result;
use crate::geometry::{Affine, LandmarkSet, Point, Scheme};
use crate::image::Image;

/// Dataset name of generated samples.
pub const SYNTH_DATASET: &str = "synthetic";

/// Every fifth generated sample goes to the validation split.
pub const SYNTH_VAL_EVERY: usize = 5;

const SUPERSAMPLE: usize = 4;

/// Face-local layout in pixels: origin at the head center, `y` down,
/// before rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceLayout {
    pub head: (f64, f64),
    pub eye_offset: (f64, f64),
    pub eye_axes: (f64, f64),
    /// Nose top half-width, top `y`, tip `y`.
    pub nose: (f64, f64, f64),
    /// Mouth half-width, center `y`, upper and lower lip heights.
    pub mouth: (f64, f64, f64, f64),
}

/// Generation parameters of one synthetic face.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthFace {
    pub size: usize,
    pub center: Point,
    pub angle: f64,
    pub layout: FaceLayout,
    pub background: ([f32; 3], [f32; 3]),
    pub skin: [f32; 3],
    pub eye: [f32; 3],
    pub nose: [f32; 3],
    pub mouth: [f32; 3],
    pub noise: f32,
    pub noise_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Feature {
    Head,
    LeftEye,
    RightEye,
    Nose,
    Mouth,
}

/// Feature whose boundary each toy landmark lies on.
const LANDMARK_FEATURE: [Feature; 10] = [
    Feature::LeftEye,
    Feature::LeftEye,
    Feature::RightEye,
    Feature::RightEye,
    Feature::Nose,
    Feature::Mouth,
    Feature::Mouth,
    Feature::Mouth,
    Feature::Mouth,
    Feature::Head,
];

fn in_ellipse(p: Point, c: Point, (a, b): (f64, f64)) -> bool {
    let (dx, dy) = ((p.x - c.x) / a, (p.y - c.y) / b);
    dx * dx + dy * dy <= 1.0
}

/// Point-in-convex-polygon for counter-clockwise or clockwise vertices.
fn in_convex(p: Point, poly: &[Point]) -> bool {
    let mut sign = 0.0;
    for (i, a) in poly.iter().enumerate() {
        let b = poly[(i + 1) % poly.len()];
        let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

fn jitter(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn color(rng: &mut impl Rng, base: f32, spread: f32) -> [f32; 3] {
    std::array::from_fn(|_| (base + rng.gen_range(-spread..spread)).clamp(0.0, 1.0))
}

/// Level at least `gap` away from `from`, in `[0, 1]`.
fn contrasting(rng: &mut impl Rng, from: f32, gap: f32) -> f32 {
    let up = 1.0 - from - gap;
    let down = from - gap;
    if up > 0.0 && (down <= 0.0 || rng.gen_bool(0.5)) {
        from + gap + rng.gen_range(0.0..=up)
    } else {
        (from - gap - rng.gen_range(0.0..=down.max(0.0))).max(0.0)
    }
}

fn mean(c: &[f32; 3]) -> f32 {
    c.iter().sum::<f32>() / 3.0
}

impl SynthFace {
    /// Random face for a `size x size` image.
    pub fn random(rng: &mut impl Rng, size: usize) -> Self {
        let s = size as f64;
        let a = s * jitter(rng, 0.24, 0.32);
        let b = a * jitter(rng, 1.15, 1.35);
        let center = Point::new(s / 2.0 + jitter(rng, -0.08, 0.08) * s, s / 2.0 + jitter(rng, -0.06, 0.06) * s);
        let angle = jitter(rng, -20.0, 20.0).to_radians();
        let eye_axes = (a * jitter(rng, 0.16, 0.22), a * jitter(rng, 0.07, 0.11));
        let eye_offset = (a * jitter(rng, 0.38, 0.46), b * jitter(rng, 0.18, 0.30));
        let nose_top = -b * jitter(rng, 0.05, 0.12);
        let nose = (a * jitter(rng, 0.10, 0.16), nose_top, b * jitter(rng, 0.18, 0.26));
        let mouth = (a * jitter(rng, 0.30, 0.42), b * jitter(rng, 0.48, 0.56), b * jitter(rng, 0.05, 0.09), b * jitter(rng, 0.07, 0.12));
        let layout = FaceLayout { head: (a, b), eye_offset, eye_axes, nose, mouth };

        let bg = rng.gen_range(0.1f32..0.9);
        let background = (color(rng, bg, 0.1), color(rng, bg, 0.1));
        let skin_level = contrasting(rng, bg, 0.2);
        let skin = color(rng, skin_level, 0.08);
        let level = contrasting(rng, skin_level, 0.3);
        let eye = color(rng, level, 0.05);
        let level = contrasting(rng, skin_level, 0.12);
        let nose = color(rng, level, 0.04);
        let level = contrasting(rng, skin_level, 0.25);
        let mouth = color(rng, level, 0.08);
        let noise = rng.gen_range(0.0f32..0.04);
        let noise_seed = rng.gen();
        SynthFace { size, center, angle, layout, background, skin, eye, nose, mouth, noise, noise_seed }
    }

    /// Face-local to image coordinates.
    pub fn to_image(&self) -> Affine {
        let rot = Affine::rotate_scale_about(Point::new(0.0, 0.0), self.angle, 1.0);
        rot.then(&Affine::scale_translate(1.0, 1.0, self.center.x, self.center.y))
    }

    fn eye_centers(&self) -> (Point, Point) {
        let (ex, ey) = self.layout.eye_offset;
        (Point::new(-ex, -ey), Point::new(ex, -ey))
    }

    fn nose_poly(&self) -> [Point; 3] {
        let (w, top, tip) = self.layout.nose;
        [Point::new(-w, top), Point::new(w, top), Point::new(0.0, tip)]
    }

    fn mouth_poly(&self) -> [Point; 4] {
        let (w, y, up, low) = self.layout.mouth;
        [Point::new(-w, y), Point::new(0.0, y - up), Point::new(w, y), Point::new(0.0, y + low)]
    }

    /// Face-local landmark positions in toy scheme order.
    fn local_landmarks(&self) -> [Point; 10] {
        let (l, r) = self.eye_centers();
        let ew = self.layout.eye_axes.0;
        let m = self.mouth_poly();
        [
            Point::new(l.x - ew, l.y),
            Point::new(l.x + ew, l.y),
            Point::new(r.x - ew, r.y),
            Point::new(r.x + ew, r.y),
            self.nose_poly()[2],
            m[0],
            m[2],
            m[1],
            m[3],
            Point::new(0.0, self.layout.head.1),
        ]
    }

    pub fn landmarks(&self) -> LandmarkSet {
        let t = self.to_image();
        let pts = self.local_landmarks().iter().map(|&p| t.apply(p)).collect();
        LandmarkSet::new(Scheme::Toy10, pts).expect("toy landmarks are valid")
    }

    fn contains(&self, f: Feature, local: Point) -> bool {
        let (l, r) = self.eye_centers();
        match f {
            Feature::Head => in_ellipse(local, Point::new(0.0, 0.0), self.layout.head),
            Feature::LeftEye => in_ellipse(local, l, self.layout.eye_axes),
            Feature::RightEye => in_ellipse(local, r, self.layout.eye_axes),
            Feature::Nose => in_convex(local, &self.nose_poly()),
            Feature::Mouth => in_convex(local, &self.mouth_poly()),
        }
    }

    fn shade(&self, local: Point, gx: f64) -> [f32; 3] {
        for (f, c) in [
            (Feature::LeftEye, self.eye),
            (Feature::RightEye, self.eye),
            (Feature::Mouth, self.mouth),
            (Feature::Nose, self.nose),
            (Feature::Head, self.skin),
        ] {
            if self.contains(f, local) {
                return c;
            }
        }
        let (a, b) = self.background;
        let t = gx.clamp(0.0, 1.0) as f32;
        std::array::from_fn(|c| a[c] * (1.0 - t) + b[c] * t)
    }

    /// Anti-aliased rendering with uniform pixel noise.
    pub fn render(&self) -> Image {
        let inv = self.to_image().inverse().expect("rotation is invertible");
        let n = self.size;
        let k = SUPERSAMPLE as f64;
        let mut noise = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let mut img = Image::new(n, n);
        for y in 0..n {
            for x in 0..n {
                let mut acc = [0.0f32; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / k - 0.5;
                        let py = y as f64 + (sy as f64 + 0.5) / k - 0.5;
                        let c = self.shade(inv.apply(Point::new(px, py)), px / n as f64);
                        for (a, v) in acc.iter_mut().zip(c) {
                            *a += v;
                        }
                    }
                }
                let e = if self.noise > 0.0 { noise.gen_range(-self.noise..self.noise) } else { 0.0 };
                for (c, a) in acc.iter().enumerate() {
                    img.set(x, y, c, (a / (SUPERSAMPLE * SUPERSAMPLE) as f32 + e).clamp(0.0, 1.0));
                }
            }
        }
        img
    }

    /// Largest distance from a landmark to the boundary of its feature,
    /// measured as the smallest probe radius whose circle has points both
    /// inside and outside the feature; `None` if some landmark has no
    /// boundary within `max_radius`.
    pub fn boundary_distance(&self, max_radius: f64) -> Option<f64> {
        let mut worst: f64 = 0.0;
        for (p, &f) in self.local_landmarks().iter().zip(&LANDMARK_FEATURE) {
            let hit = (1..=20).map(|i| max_radius * i as f64 / 20.0).find(|&r| {
                let (mut inside, mut outside) = (false, false);
                for k in 0..64 {
                    let t = k as f64 * std::f64::consts::TAU / 64.0;
                    let q = Point::new(p.x + r * t.cos(), p.y + r * t.sin());
                    if self.contains(f, q) {
                        inside = true;
                    } else {
                        outside = true;
                    }
                }
                inside && outside
            })?;
            worst = worst.max(hit);
        }
        Some(worst)
    }

    /// Mean intensity gap between a feature and the surface it sits on.
    pub fn min_contrast(&self) -> f32 {
        let skin = mean(&self.skin);
        let bg = (mean(&self.background.0) + mean(&self.background.1)) / 2.0;
        [(skin - bg).abs(), (mean(&self.eye) - skin).abs(), (mean(&self.nose) - skin).abs(), (mean(&self.mouth) - skin).abs()]
            .into_iter()
            .fold(f32::INFINITY, f32::min)
    }
}

/// Generator state of sample `index`: the master seed's stream `index`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generation parameters of the first `count` faces under `seed`.
pub fn synth_params(count: usize, size: usize, seed: u64) -> Vec<SynthFace> {
    (0..count).map(|i| SynthFace::random(&mut sample_rng(seed, i), size)).collect()
}

/// `count` rendered toy faces of `size x size` pixels; every fifth sample
/// is a validation sample.
pub fn synth_faces(count: usize, size: usize, seed: u64) -> Result<Vec<FaceSample>> {
    synth_params(count, size, seed)
        .into_iter()
        .enumerate()
        .map(|(i, face)| {
            let split = if i % SYNTH_VAL_EVERY == SYNTH_VAL_EVERY - 1 { Split::Val } else { Split::Train };
            let meta = SampleMeta { dataset: SYNTH_DATASET.into(), split, id: format!("face_{i:05}"), occluded: false };
            FaceSample::new(face.render(), face.landmarks(), meta)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::nmse;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synth_faces(4, 48, 9).unwrap();
        let b = synth_faces(4, 48, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.source().data(), y.source().data());
            assert_eq!(x.landmarks, y.landmarks);
        }
        let c = synth_faces(4, 48, 10).unwrap();
        assert_ne!(a[0].landmarks, c[0].landmarks);
    }

    #[test]
    fn landmarks_lie_on_feature_boundaries() {
        for face in synth_params(200, 64, 1) {
            let d = face.boundary_distance(0.5).expect("boundary within half a pixel");
            assert!(d <= 0.5);
            assert!(face.min_contrast() > 0.0);
        }
    }

    #[test]
    fn splits_every_fifth_to_validation() {
        let faces = synth_faces(25, 32, 2).unwrap();
        assert_eq!(faces.iter().filter(|f| f.meta.split == Split::Val).count(), 5);
    }

    #[test]
    fn toy_scheme_supports_nmse() {
        let f = &synth_faces(1, 64, 2).unwrap()[0];
        assert_eq!(nmse(&f.landmarks, &f.landmarks).unwrap(), 0.0);
        assert!(f.landmarks.iod() > 0.0);
    }
}
