//! Pinhole-consistent synthetic street scenes.
//!
//! Sky, building and road bands fill the background; objects are solid
//! rectangles standing on a flat ground plane. An object of real size
//! `S` metres at distance `D` spans `f·S/D` pixels and carries disparity
//! `b·f/D`. The disparity is drawn first as an `f32` and the planted
//! distance is derived from it, so reading it back is exact.

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scene::{distance_from_disparity, CameraModel, DisparityMap, GtBox, Scene};
use crate::encoder::ENCODER_STRIDE;
use crate::error::{Error, Result};

const SKY: u8 = 10;
const BUILDING: u8 = 2;
const ROAD: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthClass {
    /// Detection label.
    pub label: usize,
    /// Segmentation id painted under the object.
    pub seg_id: u8,
    /// Real width and height in metres.
    pub size_m: (f64, f64),
    pub color: [u8; 3],
}

/// Disparity corruption: a fraction of pixels invalidated, another fraction
/// replaced by random values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisparityNoise {
    pub invalid: f64,
    pub salt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub camera: CameraModel,
    pub classes: Vec<SynthClass>,
    pub max_objects: usize,
    /// Camera height above the road, metres.
    pub camera_height: f64,
    /// Amplitude of uniform per-pixel colour jitter.
    pub pixel_noise: u8,
    pub disparity_noise: Option<DisparityNoise>,
}

impl SynthConfig {
    pub fn new(width: usize, height: usize, camera: CameraModel) -> Result<Self> {
        for extent in [width, height] {
            if extent == 0 || extent % ENCODER_STRIDE != 0 {
                return Err(Error::Indivisible {
                    op: "synth_generate",
                    extent,
                    divisor: ENCODER_STRIDE,
                });
            }
        }
        Ok(Self {
            width,
            height,
            camera,
            classes: vec![
                SynthClass {
                    label: 1,
                    seg_id: 11,
                    size_m: (0.7, 1.75),
                    color: [220, 20, 60],
                },
                SynthClass {
                    label: 3,
                    seg_id: 13,
                    size_m: (1.8, 1.5),
                    color: [30, 60, 220],
                },
                SynthClass {
                    label: 4,
                    seg_id: 14,
                    size_m: (2.5, 3.2),
                    color: [0, 170, 150],
                },
                SynthClass {
                    label: 5,
                    seg_id: 15,
                    size_m: (3.0, 3.0),
                    color: [240, 170, 20],
                },
            ],
            max_objects: 6,
            camera_height: 1.5,
            pixel_noise: 6,
            disparity_noise: None,
        })
    }

    fn horizon(&self) -> f64 {
        (0.45 * self.height as f64).round()
    }

    /// Scene `index` of the stream seeded by `seed`; scenes are independent
    /// of how many others are generated.
    pub fn scene(&self, seed: u64, index: usize) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let (w, h) = (self.width as u32, self.height as u32);
        let cam = self.camera;
        let horizon = self.horizon();
        let sky_end = (0.25 * self.height as f64).round();
        let far = (cam.b * cam.f / 60.0) as f32;

        let mut image = RgbImage::new(w, h);
        let mut mask = GrayImage::new(w, h);
        let mut disparity = DisparityMap::new(w, h);
        for y in 0..h {
            let yc = y as f64 + 0.5;
            let (label, color, d) = if yc < sky_end {
                (SKY, [135, 180, 235], 0.0)
            } else if yc < horizon {
                (BUILDING, [120, 110, 100], far)
            } else {
                (ROAD, [90, 90, 95], (cam.b * (yc - horizon) / self.camera_height) as f32)
            };
            for x in 0..w {
                image.put_pixel(x, y, Rgb(self.jitter(color, &mut rng)));
                mask.put_pixel(x, y, Luma([label]));
                disparity.put_pixel(x, y, Luma([d]));
            }
        }

        let target = rng.random_range(1..=self.max_objects.max(1));
        let mut boxes: Vec<GtBox> = Vec::new();
        let mut painted = Vec::new();
        for _ in 0..100 {
            if boxes.len() == target || self.classes.is_empty() {
                break;
            }
            let class = &self.classes[rng.random_range(0..self.classes.len())];
            let Some((bbox, d32)) = self.place(class, &boxes, &mut rng) else {
                continue;
            };
            boxes.push(bbox);
            painted.push((class.clone(), d32));
        }
        for (bbox, (class, d32)) in boxes.iter().zip(&painted) {
            let (xs, ys) = bbox.pixel_span(w, h);
            for y in ys {
                for x in xs.clone() {
                    image.put_pixel(x, y, Rgb(self.jitter(class.color, &mut rng)));
                    mask.put_pixel(x, y, Luma([class.seg_id]));
                    disparity.put_pixel(x, y, Luma([*d32]));
                }
            }
        }
        if let Some(noise) = self.disparity_noise {
            corrupt_disparity(&mut disparity, noise, &mut rng);
        }
        Scene {
            name: format!("{index:04}"),
            image,
            boxes,
            mask,
            disparity,
            camera: cam,
        }
    }

    fn jitter(&self, color: [u8; 3], rng: &mut impl Rng) -> [u8; 3] {
        let n = self.pixel_noise as i32;
        color.map(|c| {
            let delta = if n == 0 { 0 } else { rng.random_range(-n..=n) };
            (c as i32 + delta).clamp(0, 255) as u8
        })
    }

    /// One placement attempt; `None` if the draw does not fit.
    fn place(&self, class: &SynthClass, existing: &[GtBox], rng: &mut impl Rng) -> Option<(GtBox, f32)> {
        let (sw, sh) = class.size_m;
        let (width, height) = (self.width as f64, self.height as f64);
        let cam = self.camera;
        let lo = (0.125 * height).max(10.0 * sh / sw);
        let hi = 0.6 * height;
        if lo >= hi {
            return None;
        }
        let nominal = rng.random_range(lo..hi);
        let d32 = (cam.b * nominal / sh) as f32;
        let depth = distance_from_disparity(&cam, d32 as f64).ok()?;
        let bh = cam.f * sh / depth;
        let bw = cam.f * sw / depth;
        let bottom = self.horizon() + cam.f * self.camera_height / depth;
        let top = bottom - bh;
        if top < 0.0 || bottom > height || bw >= width {
            return None;
        }
        let x = rng.random_range(0.0..width - bw);
        let bbox = GtBox {
            class: class.label,
            x,
            y: top,
            w: bw,
            h: bh,
            depth: Some(depth),
        };
        let margin = 2.0;
        let overlaps = existing.iter().any(|o| {
            bbox.x < o.x + o.w + margin
                && o.x < bbox.x + bbox.w + margin
                && bbox.y < o.y + o.h + margin
                && o.y < bbox.y + bbox.h + margin
        });
        (!overlaps).then_some((bbox, d32))
    }
}

/// Invalidates or randomizes a fraction of the disparity pixels in place.
pub fn corrupt_disparity(map: &mut DisparityMap, noise: DisparityNoise, rng: &mut impl Rng) {
    for p in map.pixels_mut() {
        let u: f64 = rng.random();
        if u < noise.invalid {
            p[0] = 0.0;
        } else if u < noise.invalid + noise.salt {
            p[0] = rng.random_range(0.5f32..200.0);
        }
    }
}

pub fn synth_generate(seed: u64, count: usize, size: (usize, usize), camera: CameraModel) -> Result<Vec<Scene>> {
    let config = SynthConfig::new(size.0, size.1, camera)?;
    Ok((0..count).map(|i| config.scene(seed, i)).collect())
}
