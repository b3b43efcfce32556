use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::detect::{NormBox, PixelBox};
use crate::error::{Error, Result};

/// Per-pixel disparity; zero, negative or non-finite values are invalid.
pub type DisparityMap = ImageBuffer<Luma<f32>, Vec<f32>>;

/// Rectified stereo rig.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    /// Baseline in metres.
    pub b: f64,
    /// Focal length in pixels.
    pub f: f64,
}

impl CameraModel {
    pub fn new(b: f64, f: f64) -> Result<Self> {
        if !(b > 0.0 && f > 0.0 && b.is_finite() && f.is_finite()) {
            return Err(Error::invalid("camera", format!("baseline {b} and focal length {f} must be positive")));
        }
        Ok(Self { b, f })
    }

    /// A Cityscapes-like rig with the focal length scaled to `width` pixels.
    pub fn scaled_to_width(width: usize) -> Self {
        Self {
            b: 0.22,
            f: 2262.0 * width as f64 / 2048.0,
        }
    }
}

/// Annotated object in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    /// Detection label, 1-based.
    pub class: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    /// Metres; `None` when no valid disparity supports the box.
    pub depth: Option<f64>,
}

impl GtBox {
    pub fn pixel_box(&self) -> PixelBox {
        PixelBox {
            x: self.x,
            y: self.y,
            w: self.w,
            h: self.h,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn normalized(&self, width: usize, height: usize) -> NormBox {
        self.pixel_box().normalized(width, height)
    }

    /// Pixel index ranges whose centres lie inside the box, clipped to the image.
    pub fn pixel_span(&self, width: u32, height: u32) -> (std::ops::Range<u32>, std::ops::Range<u32>) {
        let span = |lo: f64, len: f64, max: u32| {
            let a = (lo - 0.5).ceil().clamp(0.0, max as f64) as u32;
            let b = (lo + len - 0.5).ceil().clamp(0.0, max as f64) as u32;
            a..b.max(a)
        };
        (span(self.x, self.w, width), span(self.y, self.h, height))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub name: String,
    pub image: RgbImage,
    pub boxes: Vec<GtBox>,
    /// Segmentation class ids, 255 = ignore.
    pub mask: GrayImage,
    pub disparity: DisparityMap,
    pub camera: CameraModel,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn validate(&self, seg_classes: usize) -> Result<()> {
        let dims = self.image.dimensions();
        if self.mask.dimensions() != dims || self.disparity.dimensions() != dims {
            return Err(Error::invalid(
                "scene",
                format!(
                    "{}: image {dims:?}, mask {:?}, disparity {:?}",
                    self.name,
                    self.mask.dimensions(),
                    self.disparity.dimensions()
                ),
            ));
        }
        if let Some(&bad) = self.mask.as_raw().iter().find(|&&l| l != 255 && l as usize >= seg_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                classes: seg_classes,
            });
        }
        let (w, h) = (dims.0 as f64, dims.1 as f64);
        for b in &self.boxes {
            if b.x < 0.0 || b.y < 0.0 || b.x + b.w > w || b.y + b.h > h || b.w <= 0.0 || b.h <= 0.0 {
                return Err(Error::invalid("scene", format!("{}: box {b:?} outside {w}x{h}", self.name)));
            }
        }
        Ok(())
    }
}

/// `D = b·f / d`.
pub fn distance_from_disparity(camera: &CameraModel, d: f64) -> Result<f64> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::InvalidDisparity(d));
    }
    Ok(camera.b * camera.f / d)
}

/// Median; for an even count the mean of the two central values.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Distance of a box from the median of the valid disparities under it;
/// `None` when the box covers no valid disparity.
pub fn box_distance_gt(scene: &Scene, bbox: &GtBox) -> Option<f64> {
    let (xs, ys) = bbox.pixel_span(scene.disparity.width(), scene.disparity.height());
    let mut valid = Vec::with_capacity(xs.len() * ys.len());
    for y in ys {
        for x in xs.clone() {
            let d = scene.disparity.get_pixel(x, y)[0] as f64;
            if d > 0.0 && d.is_finite() {
                valid.push(d);
            }
        }
    }
    let d = median(&mut valid)?;
    distance_from_disparity(&scene.camera, d).ok()
}

/// Nearest-neighbour subsampling: output `(i, j)` is input `(factor·i, factor·j)`.
pub fn subsample_mask(mask: &GrayImage, factor: usize) -> Result<GrayImage> {
    if factor == 0 {
        return Err(Error::invalid("subsample_mask", "factor must be positive"));
    }
    let (w, h) = mask.dimensions();
    for extent in [w, h] {
        if !(extent as usize).is_multiple_of(factor) {
            return Err(Error::Indivisible {
                op: "subsample_mask",
                extent: extent as usize,
                divisor: factor,
            });
        }
    }
    let f = factor as u32;
    Ok(GrayImage::from_fn(w / f, h / f, |x, y| *mask.get_pixel(f * x, f * y)))
}

/// Resamples a scene to `width × height` as if shot by a camera with a
/// proportionally scaled focal length: box depths are unchanged, while
/// boxes, disparities and `f` scale with the image. The image is filtered
/// bilinearly, mask and disparity are sampled nearest at pixel centres.
pub fn resize_scene(scene: &Scene, width: usize, height: usize) -> Result<Scene> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("resize_scene", "zero target extent"));
    }
    let (w0, h0) = scene.image.dimensions();
    let (w, h) = (width as u32, height as u32);
    if (w, h) == (w0, h0) {
        return Ok(scene.clone());
    }
    let sx = width as f64 / w0 as f64;
    let sy = height as f64 / h0 as f64;
    let nearest = |x: u32, y: u32| {
        let src_x = (((x as f64 + 0.5) / sx) as u32).min(w0 - 1);
        let src_y = (((y as f64 + 0.5) / sy) as u32).min(h0 - 1);
        (src_x, src_y)
    };
    let mask = GrayImage::from_fn(w, h, |x, y| {
        let (a, b) = nearest(x, y);
        *scene.mask.get_pixel(a, b)
    });
    let disparity = DisparityMap::from_fn(w, h, |x, y| {
        let (a, b) = nearest(x, y);
        let d = scene.disparity.get_pixel(a, b)[0];
        Luma([if d > 0.0 { (d as f64 * sx) as f32 } else { d }])
    });
    let boxes = scene
        .boxes
        .iter()
        .map(|b| GtBox {
            x: b.x * sx,
            y: b.y * sy,
            w: b.w * sx,
            h: b.h * sy,
            ..*b
        })
        .collect();
    Ok(Scene {
        name: scene.name.clone(),
        image: image::imageops::resize(&scene.image, w, h, image::imageops::FilterType::Triangle),
        boxes,
        mask,
        disparity,
        camera: CameraModel::new(scene.camera.b, scene.camera.f * sx)?,
    })
}
