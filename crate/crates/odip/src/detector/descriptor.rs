//! Fixed-length appearance descriptors.
//!
//! A candidate box is summarised by a 69-dimensional vector:
//!
//! * 64 entries — a 4x4x4 RGB histogram over the box's *foreground* pixels,
//!   L1-normalised so object size does not change the embedding;
//! * 1 entry — log aspect ratio of the box, clamped to `[-1.4, 1.4]`;
//! * 1 entry — fill ratio (foreground pixels / box pixels);
//! * 3 entries — normalised central second moments of the foreground mask
//!   (eta20, eta02, eta11), which are translation- and scale-invariant and
//!   separate solid, elongated and hollow silhouettes.
//!
//! Foreground is decided per pixel by Euclidean RGB distance from the image's
//! background color, estimated once per image as the modal exact color of the
//! border band. The flat, lightly-noised table makes this estimate reliable;
//! everything here is integer- or f64-deterministic.

use crate::geom::BBox;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Total descriptor length.
pub const DESCRIPTOR_LEN: usize = 69;
/// Histogram bins per channel (4^3 = 64 total).
const BINS_PER_CHANNEL: usize = 4;
/// Clamp for the log aspect component.
const ASPECT_CLAMP: f64 = 1.4;

/// A fixed-length embedding of one image window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Descriptor {
    values: Vec<f64>,
}

impl Descriptor {
    fn new(values: Vec<f64>) -> Self {
        assert_eq!(values.len(), DESCRIPTOR_LEN, "descriptor length is fixed");
        Descriptor { values }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

impl From<Descriptor> for Vec<f64> {
    fn from(d: Descriptor) -> Self {
        d.values
    }
}

impl TryFrom<Vec<f64>> for Descriptor {
    type Error = String;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        if values.len() != DESCRIPTOR_LEN {
            return Err(format!("descriptor must have {DESCRIPTOR_LEN} entries, got {}", values.len()));
        }
        Ok(Descriptor { values })
    }
}

/// Modal exact border color of `img`: the most frequent `(r, g, b)` triple in
/// the outer `band`-pixel frame, smallest triple on ties. With per-pixel
/// noise a few counts apart this still lands on a color within the noise ball
/// of the true background, which is all the foreground test needs.
pub fn border_background_color(img: &RgbImage, band: u32) -> [u8; 3] {
    let (w, h) = img.dimensions();
    let band = band.max(1);
    let mut counts: BTreeMap<[u8; 3], u32> = BTreeMap::new();
    for (x, y, px) in img.enumerate_pixels() {
        let in_band = x < band || y < band || x >= w.saturating_sub(band) || y >= h.saturating_sub(band);
        if in_band {
            *counts.entry(px.0).or_insert(0) += 1;
        }
    }
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) // strict max; first (smallest) key wins ties
        .map(|(color, _)| *color)
        .unwrap_or([0, 0, 0])
}

#[inline]
fn is_foreground(px: [u8; 3], bg: [u8; 3], threshold: f64) -> bool {
    let d2: f64 = px
        .iter()
        .zip(bg)
        .map(|(a, b)| {
            let d = f64::from(*a) - f64::from(b);
            d * d
        })
        .sum();
    d2 > threshold * threshold
}

/// Integer pixel window of a box, clipped to the image. Boxes are validated
/// non-empty, so the window always holds at least one pixel.
fn pixel_window(bbox: &BBox, w: u32, h: u32) -> (u32, u32, u32, u32) {
    let x0 = bbox.x_min().floor().max(0.0) as u32;
    let y0 = bbox.y_min().floor().max(0.0) as u32;
    let x1 = (bbox.x_max().ceil() as u32).clamp(x0 + 1, w);
    let y1 = (bbox.y_max().ceil() as u32).clamp(y0 + 1, h);
    (x0.min(w - 1), y0.min(h - 1), x1, y1)
}

/// Embeds the window `bbox` of `img`, treating pixels further than
/// `fg_threshold` (Euclidean RGB) from `bg` as foreground.
pub fn embed(img: &RgbImage, bbox: &BBox, bg: [u8; 3], fg_threshold: f64) -> Descriptor {
    let (x0, y0, x1, y1) = pixel_window(bbox, img.width(), img.height());
    let mut hist = [0.0f64; BINS_PER_CHANNEL * BINS_PER_CHANNEL * BINS_PER_CHANNEL];
    let mut n = 0.0f64;
    let mut sum_x = 0.0f64;
    let mut sum_y = 0.0f64;
    // First pass: histogram and centroid of the foreground.
    for y in y0..y1 {
        for x in x0..x1 {
            let px = img.get_pixel(x, y).0;
            if is_foreground(px, bg, fg_threshold) {
                let bin = |c: u8| usize::from(c) * BINS_PER_CHANNEL / 256;
                hist[(bin(px[0]) * BINS_PER_CHANNEL + bin(px[1])) * BINS_PER_CHANNEL + bin(px[2])] += 1.0;
                n += 1.0;
                sum_x += f64::from(x) + 0.5;
                sum_y += f64::from(y) + 0.5;
            }
        }
    }
    let mut values = Vec::with_capacity(DESCRIPTOR_LEN);
    if n > 0.0 {
        values.extend(hist.iter().map(|c| c / n));
    } else {
        values.extend_from_slice(&hist);
    }

    let aspect = (bbox.width() / bbox.height()).ln().clamp(-ASPECT_CLAMP, ASPECT_CLAMP);
    values.push(aspect);
    let window_px = f64::from((x1 - x0) * (y1 - y0));
    values.push(n / window_px);

    // Second pass: central second moments, normalised by n^2 so they are
    // scale-invariant (eta_pq = mu_pq / mu_00^2 for p + q = 2).
    let (mut mu20, mut mu02, mut mu11) = (0.0f64, 0.0f64, 0.0f64);
    if n > 0.0 {
        let (cx, cy) = (sum_x / n, sum_y / n);
        for y in y0..y1 {
            for x in x0..x1 {
                let px = img.get_pixel(x, y).0;
                if is_foreground(px, bg, fg_threshold) {
                    let dx = f64::from(x) + 0.5 - cx;
                    let dy = f64::from(y) + 0.5 - cy;
                    mu20 += dx * dx;
                    mu02 += dy * dy;
                    mu11 += dx * dy;
                }
            }
        }
        let n2 = n * n;
        mu20 /= n2;
        mu02 /= n2;
        mu11 /= n2;
    }
    values.push(mu20);
    values.push(mu02);
    values.push(mu11);
    Descriptor::new(values)
}

/// Embeds a whole support image: estimates the background from the border
/// band, finds the tight box of all foreground pixels, and embeds that box.
/// Falls back to the full image when nothing clears the threshold.
pub fn support_descriptor(img: &RgbImage, band: u32, fg_threshold: f64) -> (Descriptor, BBox) {
    let bg = border_background_color(img, band);
    let (w, h) = img.dimensions();
    let mut bounds: Option<(u32, u32, u32, u32)> = None;
    for (x, y, px) in img.enumerate_pixels() {
        if is_foreground(px.0, bg, fg_threshold) {
            let b = bounds.get_or_insert((x, y, x, y));
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x);
            b.3 = b.3.max(y);
        }
    }
    let bbox = match bounds {
        Some((x0, y0, x1, y1)) => {
            BBox::new(f64::from(x0), f64::from(y0), f64::from(x1 + 1), f64::from(y1 + 1))
                .expect("non-empty foreground bounds")
        }
        None => BBox::new(0.0, 0.0, f64::from(w), f64::from(h)).expect("image box"),
    };
    (embed(img, &bbox, bg, fg_threshold), bbox)
}

/// Shared foreground machinery for the proposal stage.
pub(crate) fn foreground_mask(img: &RgbImage, bg: [u8; 3], fg_threshold: f64) -> Vec<bool> {
    img.pixels().map(|px| is_foreground(px.0, bg, fg_threshold)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::ShapeArchetype;
    use crate::scenegen::{render_scene, ObjectSpec, PlacedObject, SceneGenConfig, SceneSpec};
    use crate::geom::CategoryId;

    const THR: f64 = 40.0;

    fn noiseless_cfg() -> SceneGenConfig {
        SceneGenConfig { background_noise: 0, object_noise: 0, ..SceneGenConfig::default() }
    }

    fn single_object_scene(archetype: ShapeArchetype, scale: f64, rotation: f64) -> RgbImage {
        let spec = SceneSpec {
            width: 96,
            height: 96,
            background: [168, 160, 152],
            noise_seed: 1,
            objects: vec![PlacedObject {
                spec: ObjectSpec {
                    category: CategoryId(2),
                    archetype,
                    color: [200, 60, 60],
                    scale,
                    rotation,
                },
                cx: 48.0,
                cy: 48.0,
            }],
        };
        render_scene(&spec, &noiseless_cfg()).unwrap().raster
    }

    #[test]
    fn border_mode_recovers_the_background_color() {
        let img = single_object_scene(ShapeArchetype::Square, 30.0, 0.3);
        assert_eq!(border_background_color(&img, 4), [168, 160, 152]);
    }

    #[test]
    fn border_mode_survives_pixel_noise() {
        let cfg = SceneGenConfig::default(); // noise on
        let spec = SceneSpec {
            width: 96,
            height: 96,
            background: [168, 160, 152],
            noise_seed: 33,
            objects: vec![],
        };
        let img = render_scene(&spec, &cfg).unwrap().raster;
        let est = border_background_color(&img, 4);
        for (e, b) in est.iter().zip([168u8, 160, 152]) {
            assert!((i16::from(*e) - i16::from(b)).abs() <= i16::from(cfg.background_noise));
        }
    }

    #[test]
    fn square_embedding_has_expected_analytic_components() {
        let img = single_object_scene(ShapeArchetype::Square, 32.0, 0.0);
        let window = BBox::new(32.0, 32.0, 64.0, 64.0).unwrap();
        let d = embed(&img, &window, [168, 160, 152], THR);
        let v = d.as_slice();
        // Exactly one occupied histogram bin, fully normalised.
        let hist = &v[..64];
        assert!((hist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(hist.iter().filter(|&&c| c > 0.0).count(), 1);
        // Square window: zero log aspect, full fill.
        assert_eq!(v[64], 0.0);
        assert!((v[65] - 1.0).abs() < 1e-12);
        // Second moments of a filled s x s square: eta20 = eta02 -> 1/12.
        assert!((v[66] - 1.0 / 12.0).abs() < 2e-3, "eta20 = {}", v[66]);
        assert!((v[67] - 1.0 / 12.0).abs() < 2e-3, "eta02 = {}", v[67]);
        assert!(v[68].abs() < 1e-6, "eta11 = {}", v[68]);
    }

    #[test]
    fn disc_fill_ratio_is_pi_over_four_of_the_square_fill() {
        let sq = single_object_scene(ShapeArchetype::Square, 40.0, 0.0);
        let disc = single_object_scene(ShapeArchetype::Disc, 40.0, 0.0);
        let window = BBox::new(28.0, 28.0, 68.0, 68.0).unwrap();
        let f_sq = embed(&sq, &window, [168, 160, 152], THR).as_slice()[65];
        let f_disc = embed(&disc, &window, [168, 160, 152], THR).as_slice()[65];
        let ratio = f_disc / f_sq;
        assert!(
            (ratio - std::f64::consts::FRAC_PI_4).abs() < 0.05,
            "disc/square fill ratio {ratio} should be close to pi/4"
        );
    }

    #[test]
    fn log_aspect_is_clamped() {
        let img = single_object_scene(ShapeArchetype::Square, 30.0, 0.0);
        let wide = BBox::new(0.0, 40.0, 96.0, 44.0).unwrap(); // aspect 24
        let v = embed(&img, &wide, [168, 160, 152], THR);
        assert_eq!(v.as_slice()[64], 1.4);
        let tall = BBox::new(40.0, 0.0, 44.0, 96.0).unwrap();
        assert_eq!(embed(&img, &tall, [168, 160, 152], THR).as_slice()[64], -1.4);
    }

    #[test]
    fn empty_window_embeds_to_zero_foreground() {
        let img = single_object_scene(ShapeArchetype::Square, 20.0, 0.0);
        let corner = BBox::new(0.0, 0.0, 12.0, 12.0).unwrap();
        let v = embed(&img, &corner, [168, 160, 152], THR);
        assert!(v.as_slice()[..64].iter().all(|&c| c == 0.0));
        assert_eq!(v.as_slice()[65], 0.0);
        assert_eq!(v.as_slice()[66], 0.0);
    }

    #[test]
    fn hollow_ring_moments_exceed_solid_disc_moments() {
        let ring = single_object_scene(ShapeArchetype::Ring, 36.0, 0.0);
        let disc = single_object_scene(ShapeArchetype::Disc, 36.0, 0.0);
        let window = BBox::new(28.0, 28.0, 68.0, 68.0).unwrap();
        let m_ring = embed(&ring, &window, [168, 160, 152], THR).as_slice()[66];
        let m_disc = embed(&disc, &window, [168, 160, 152], THR).as_slice()[66];
        assert!(
            m_ring > m_disc * 1.3,
            "ring eta20 {m_ring} should clearly exceed disc eta20 {m_disc}"
        );
    }

    #[test]
    fn support_descriptor_finds_the_tight_object_box() {
        let img = single_object_scene(ShapeArchetype::Square, 32.0, 0.0);
        let (_, bbox) = support_descriptor(&img, 4, THR);
        assert_eq!((bbox.x_min(), bbox.x_max()), (32.0, 64.0));
        assert_eq!((bbox.y_min(), bbox.y_max()), (32.0, 64.0));
    }

    #[test]
    fn descriptor_serde_round_trips_and_validates_length() {
        let img = single_object_scene(ShapeArchetype::Disc, 30.0, 0.0);
        let (d, _) = support_descriptor(&img, 4, THR);
        let json = serde_json::to_string(&d).unwrap();
        let back: Descriptor = serde_json::from_str(&json).unwrap();
        assert_eq!(d, back);
        assert!(serde_json::from_str::<Descriptor>("[1.0, 2.0]").is_err());
    }
}
