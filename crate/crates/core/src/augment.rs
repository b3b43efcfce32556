//! Geometric augmentation applied coherently to image, mask, disparity,
//! boxes and box depths.
//!
//! The transform is one affine map: optional horizontal mirror, rotation
//! about the image centre, anisotropic resize, then a seeded crop/pad back
//! to the original canvas. Box depths follow the pinhole model: mirror and
//! rotation keep them, a resize by `(s_x, s_y)` divides them by
//! `√(s_x·s_y)`. The crop/pad window is centred on the resized image and
//! jittered by at most a quarter of the size difference.

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{DisparityMap, GtBox, Scene};
use crate::error::{Error, Result};
use crate::losses::IGNORE_LABEL;

pub const MAX_ANGLE_DEG: f64 = 5.0;
pub const SCALE_RANGE: (f64, f64) = (0.5, 2.0);
pub const MIN_BOX_AREA: f64 = 100.0;
/// Fill colour for pixels exposed by rotation or padding.
pub const MEAN_COLOR: [u8; 3] = [123, 116, 103];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_deg: f64,
    pub scale_x: f64,
    pub scale_y: f64,
    /// Seeds the crop/pad placement.
    pub seed: u64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            flip: false,
            angle_deg: 0.0,
            scale_x: 1.0,
            scale_y: 1.0,
            seed: 0,
        }
    }

    /// Mirror with probability ½, angle uniform in ±5°, each scale uniform in [0.5, 2].
    pub fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            flip: rng.random_bool(0.5),
            angle_deg: rng.random_range(-MAX_ANGLE_DEG..=MAX_ANGLE_DEG),
            scale_x: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            scale_y: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_scale = |s: f64| (SCALE_RANGE.0..=SCALE_RANGE.1).contains(&s);
        if !(self.angle_deg.abs() <= MAX_ANGLE_DEG) || !in_scale(self.scale_x) || !in_scale(self.scale_y) {
            return Err(Error::invalid("augment", format!("parameters out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.angle_deg == 0.0 && self.scale_x == 1.0 && self.scale_y == 1.0
    }

    /// Factor dividing every box depth.
    pub fn depth_divisor(&self) -> f64 {
        (self.scale_x * self.scale_y).sqrt()
    }
}

/// `out = m · src + t`.
#[derive(Clone, Copy, Debug)]
struct Affine {
    m: [[f64; 2]; 2],
    t: [f64; 2],
}

impl Affine {
    fn new(params: &AugmentParams, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        let (cx, cy) = (w / 2.0, h / 2.0);
        let (sin, cos) = params.angle_deg.to_radians().sin_cos();
        let fx = if params.flip { -1.0 } else { 1.0 };
        let (sx, sy) = (params.scale_x, params.scale_y);

        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(1);
        let mut offset = |scaled: f64, extent: f64| {
            let slack = (scaled - extent) / 2.0;
            let u: f64 = rng.random_range(-1.0..=1.0);
            slack + 0.5 * u * slack.abs()
        };
        let ox = offset(sx * w, w);
        let oy = offset(sy * h, h);

        // Mirror: x → w − x. Rotation about (cx, cy), then scale, then crop.
        let r = [[cos, -sin], [sin, cos]];
        let m = [
            [sx * r[0][0] * fx, sx * r[0][1]],
            [sy * r[1][0] * fx, sy * r[1][1]],
        ];
        let flip_t = if params.flip { w } else { 0.0 };
        // Image of the origin: mirror gives (flip_t, 0), then rotate about the centre.
        let px = flip_t - cx;
        let py = -cy;
        let t = [
            sx * (cx + r[0][0] * px + r[0][1] * py) - ox,
            sy * (cy + r[1][0] * px + r[1][1] * py) - oy,
        ];
        Self { m, t }
    }

    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * p[0] + self.m[0][1] * p[1] + self.t[0],
            self.m[1][0] * p[0] + self.m[1][1] * p[1] + self.t[1],
        ]
    }

    fn inverse(&self) -> Self {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        let m = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(m[0][0] * self.t[0] + m[0][1] * self.t[1]),
            -(m[1][0] * self.t[0] + m[1][1] * self.t[1]),
        ];
        Self { m, t }
    }
}

/// Transformed, clipped boxes in input order; `None` for boxes that end up
/// entirely outside the canvas.
pub fn transform_boxes(boxes: &[GtBox], params: &AugmentParams, width: usize, height: usize) -> Vec<Option<GtBox>> {
    if params.is_identity() {
        return boxes.iter().copied().map(Some).collect();
    }
    let fwd = Affine::new(params, width, height);
    let divisor = params.depth_divisor();
    boxes
        .iter()
        .map(|b| {
            let corners = [[b.x, b.y], [b.x + b.w, b.y], [b.x, b.y + b.h], [b.x + b.w, b.y + b.h]].map(|c| fwd.apply(c));
            let x0 = corners.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min).max(0.0);
            let y0 = corners.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min).max(0.0);
            let x1 = corners.iter().map(|c| c[0]).fold(f64::NEG_INFINITY, f64::max).min(width as f64);
            let y1 = corners.iter().map(|c| c[1]).fold(f64::NEG_INFINITY, f64::max).min(height as f64);
            (x1 > x0 && y1 > y0).then(|| GtBox {
                class: b.class,
                x: x0,
                y: y0,
                w: x1 - x0,
                h: y1 - y0,
                depth: b.depth.map(|d| d / divisor),
            })
        })
        .collect()
}

/// Keeps boxes with `w·h ≥ min_area`, preserving order.
pub fn filter_small_boxes(boxes: &[GtBox], min_area: f64) -> Vec<GtBox> {
    boxes.iter().filter(|b| b.area() >= min_area).copied().collect()
}

pub fn apply_augmentation(scene: &Scene, params: &AugmentParams) -> Result<Scene> {
    params.validate()?;
    if params.is_identity() {
        return Ok(scene.clone());
    }
    let (w, h) = scene.image.dimensions();
    let inv = Affine::new(params, w as usize, h as usize).inverse();
    let scale_disp = params.depth_divisor() as f32;

    let mut image = RgbImage::new(w, h);
    let mut mask = GrayImage::new(w, h);
    let mut disparity = DisparityMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let [sx, sy] = inv.apply([x as f64 + 0.5, y as f64 + 0.5]);
            let inside = sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64;
            if !inside {
                image.put_pixel(x, y, Rgb(MEAN_COLOR));
                mask.put_pixel(x, y, Luma([IGNORE_LABEL]));
                continue;
            }
            image.put_pixel(x, y, Rgb(bilinear(&scene.image, sx, sy)));
            let (nx, ny) = (sx as u32, sy as u32);
            mask.put_pixel(x, y, *scene.mask.get_pixel(nx, ny));
            let d = scene.disparity.get_pixel(nx, ny)[0];
            disparity.put_pixel(x, y, Luma([if d > 0.0 { d * scale_disp } else { d }]));
        }
    }
    let boxes = transform_boxes(&scene.boxes, params, w as usize, h as usize)
        .into_iter()
        .flatten()
        .collect();
    Ok(Scene {
        name: scene.name.clone(),
        image,
        boxes,
        mask,
        disparity,
        camera: scene.camera,
    })
}

/// Samples at continuous position `(x, y)` with pixel centres at half
/// integers, replicating edge pixels.
fn bilinear(img: &RgbImage, x: f64, y: f64) -> [u8; 3] {
    let (w, h) = img.dimensions();
    let u = x - 0.5;
    let v = y - 0.5;
    let x0 = u.floor();
    let y0 = v.floor();
    let (fx, fy) = (u - x0, v - y0);
    let clamp = |i: f64, n: u32| i.clamp(0.0, (n - 1) as f64) as u32;
    let (xa, xb) = (clamp(x0, w), clamp(x0 + 1.0, w));
    let (ya, yb) = (clamp(y0, h), clamp(y0 + 1.0, h));
    let p = |x, y| img.get_pixel(x, y).0;
    let (a, b, c, d) = (p(xa, ya), p(xb, ya), p(xa, yb), p(xb, yb));
    std::array::from_fn(|k| {
        let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
        let bottom = c[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
        (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8
    })
}
