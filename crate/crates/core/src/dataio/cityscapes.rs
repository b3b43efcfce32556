//! Reader for the Cityscapes directory layout:
//!
//! ```text
//! leftImg8bit/<split>/<city>/<stem>_leftImg8bit.png
//! gtFine/<split>/<city>/<stem>_gtFine_polygons.json
//! disparity/<split>/<city>/<stem>_disparity.png
//! camera/<split>/<city>/<stem>_camera.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma};
use serde_json::Value;

use super::registry::ClassRegistry;
use super::scene::{box_distance_gt, CameraModel, DisparityMap, GtBox, Scene};
use crate::error::{Error, Result};

const IMAGE_SUFFIX: &str = "_leftImg8bit.png";
/// Classes annotated per instance; only these become boxes.
const INSTANCE_CLASSES: [&str; 8] = ["person", "rider", "car", "truck", "bus", "train", "motorcycle", "bicycle"];

/// A file passed over during iteration, with the reason.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Decodes a 16-bit disparity image: `d = (p − 1) / 256` for `p > 0`, and
/// `p = 0` marks an invalid pixel.
pub fn decode_disparity_png(raw: &ImageBuffer<Luma<u16>, Vec<u16>>) -> DisparityMap {
    let values = raw
        .as_raw()
        .iter()
        .map(|&p| if p == 0 { 0.0 } else { (p as f32 - 1.0) / 256.0 })
        .collect();
    DisparityMap::from_raw(raw.width(), raw.height(), values).expect("same extents")
}

/// Paints `value` into every pixel whose centre lies inside the polygon
/// (even-odd rule).
pub fn fill_polygon(mask: &mut GrayImage, polygon: &[(f64, f64)], value: u8) {
    if polygon.len() < 3 {
        return;
    }
    let (w, h) = mask.dimensions();
    let mut crossings = Vec::new();
    for y in 0..h {
        let yc = y as f64 + 0.5;
        crossings.clear();
        for (i, &(x0, y0)) in polygon.iter().enumerate() {
            let (x1, y1) = polygon[(i + 1) % polygon.len()];
            if (y0 <= yc) != (y1 <= yc) {
                crossings.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            let a = (pair[0] - 0.5).ceil().clamp(0.0, w as f64) as u32;
            let b = (pair[1] - 0.5).ceil().clamp(0.0, w as f64) as u32;
            for x in a..b {
                mask.put_pixel(x, y, Luma([value]));
            }
        }
    }
}

/// Lazily loads the scenes of one split. Items are per-scene results so a
/// corrupt file does not stop iteration; scenes with missing companion
/// files are recorded in [`CityscapesIter::skipped`] instead.
pub struct CityscapesIter {
    root: PathBuf,
    split: String,
    registry: ClassRegistry,
    images: std::vec::IntoIter<PathBuf>,
    pub skipped: Vec<SkippedFile>,
}

pub fn load_cityscapes(root: &Path, split: &str, registry: ClassRegistry) -> Result<CityscapesIter> {
    let base = root.join("leftImg8bit").join(split);
    let mut images = Vec::new();
    let cities = fs::read_dir(&base).map_err(|e| Error::io(&base, e))?;
    for city in cities {
        let city = city.map_err(|e| Error::io(&base, e))?.path();
        if !city.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&city).map_err(|e| Error::io(&city, e))? {
            images.push(entry.map_err(|e| Error::io(&city, e))?.path());
        }
    }
    images.sort();
    Ok(CityscapesIter {
        root: root.to_path_buf(),
        split: split.to_string(),
        registry,
        images: images.into_iter(),
        skipped: Vec::new(),
    })
}

impl CityscapesIter {
    fn skip(&mut self, path: PathBuf, reason: impl Into<String>) {
        let reason = reason.into();
        log::warn!("skipping {}: {reason}", path.display());
        self.skipped.push(SkippedFile { path, reason });
    }

    fn companion(&self, kind: &str, city: &str, stem: &str, suffix: &str) -> PathBuf {
        self.root.join(kind).join(&self.split).join(city).join(format!("{stem}{suffix}"))
    }

    fn load(&self, image_path: &Path, polygons: &Path, disparity: &Path, camera: &Path, stem: &str) -> Result<Scene> {
        let image = image::open(image_path)
            .map_err(|source| Error::Image {
                path: image_path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let raw = image::open(disparity)
            .map_err(|source| Error::Image {
                path: disparity.to_path_buf(),
                source,
            })?
            .to_luma16();
        let disparity_map = decode_disparity_png(&raw);
        let camera = parse_camera(camera)?;
        let (w, h) = image.dimensions();
        let mut scene = Scene {
            name: stem.to_string(),
            image,
            boxes: Vec::new(),
            mask: GrayImage::from_pixel(w, h, Luma([255])),
            disparity: disparity_map,
            camera,
        };
        let text = fs::read_to_string(polygons).map_err(|e| Error::io(polygons, e))?;
        let json: Value = serde_json::from_str(&text).map_err(|e| Error::format("polygons", polygons, e.to_string()))?;
        let objects = json["objects"]
            .as_array()
            .ok_or_else(|| Error::format("polygons", polygons, "missing objects array"))?;
        for obj in objects {
            let label = obj["label"].as_str().unwrap_or_default();
            let points: Vec<(f64, f64)> = obj["polygon"]
                .as_array()
                .map(|pts| {
                    pts.iter()
                        .filter_map(|p| Some((p[0].as_f64()?, p[1].as_f64()?)))
                        .collect()
                })
                .unwrap_or_default();
            let base = label.strip_suffix("group").unwrap_or(label);
            let seg = self.registry.segmentation_id(base).unwrap_or(255);
            fill_polygon(&mut scene.mask, &points, seg);
            if label != base || !INSTANCE_CLASSES.contains(&label) || points.is_empty() {
                continue;
            }
            let Some(class) = self.registry.detection_label(label) else {
                continue;
            };
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for &(x, y) in &points {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            let (x0, y0) = (x0.max(0.0), y0.max(0.0));
            let (x1, y1) = (x1.min(w as f64), y1.min(h as f64));
            if x1 <= x0 || y1 <= y0 {
                continue;
            }
            let mut bbox = GtBox {
                class,
                x: x0,
                y: y0,
                w: x1 - x0,
                h: y1 - y0,
                depth: None,
            };
            bbox.depth = box_distance_gt(&scene, &bbox);
            scene.boxes.push(bbox);
        }
        scene.validate(self.registry.segmentation.len())?;
        Ok(scene)
    }
}

fn parse_camera(path: &Path) -> Result<CameraModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let json: Value = serde_json::from_str(&text).map_err(|e| Error::format("camera", path, e.to_string()))?;
    let b = json["extrinsic"]["baseline"].as_f64();
    let f = json["intrinsic"]["fx"].as_f64();
    match (b, f) {
        (Some(b), Some(f)) => CameraModel::new(b, f),
        _ => Err(Error::format("camera", path, "needs extrinsic.baseline and intrinsic.fx")),
    }
}

impl Iterator for CityscapesIter {
    type Item = Result<Scene>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let path = self.images.next()?;
            let file = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let Some(stem) = file.strip_suffix(IMAGE_SUFFIX) else {
                self.skip(path, "not a left camera image");
                continue;
            };
            let city = path
                .parent()
                .and_then(|p| p.file_name())
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            let polygons = self.companion("gtFine", &city, stem, "_gtFine_polygons.json");
            let disparity = self.companion("disparity", &city, stem, "_disparity.png");
            let camera = self.companion("camera", &city, stem, "_camera.json");
            if let Some(missing) = [&polygons, &disparity, &camera].into_iter().find(|p| !p.is_file()) {
                let reason = format!("missing {}", missing.display());
                self.skip(path, reason);
                continue;
            }
            return Some(self.load(&path, &polygons, &disparity, &camera, stem));
        }
    }
}
