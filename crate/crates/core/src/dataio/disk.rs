//! On-disk dataset layout:
//!
//! ```text
//! camera.txt            b f
//! manifest.txt          seed, count, size, per-file sha256, content digest
//! scenes/NNNN.ppm       image
//! scenes/NNNN.mask.pgm  segmentation ids
//! scenes/NNNN.disp.f32  u32 width, u32 height, then row-major f32 (all little-endian)
//! scenes/NNNN.boxes.txt one "class x y w h depth_m" line per box, depth "-" if unknown
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use sha2::{Digest, Sha256};

use super::scene::{CameraModel, DisparityMap, GtBox, Scene};
use crate::error::{Error, Result};

const MANIFEST_MAGIC: &str = "percept-dataset v1";

/// Parsed `manifest.txt`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: Option<u64>,
    pub count: usize,
    pub size: Option<(usize, usize)>,
    /// `(relative path, sha256 hex)` in write order.
    pub files: Vec<(String, String)>,
    /// sha256 over the concatenated file contents in `files` order.
    pub content: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn encode_pnm<P>(
    buf: &image::ImageBuffer<P, Vec<u8>>,
    path: &Path,
) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType + image::Pixel<Subpixel = u8>,
{
    let mut out = Vec::new();
    let encoder = image::codecs::pnm::PnmEncoder::new(&mut out);
    image::ImageEncoder::write_image(encoder, buf.as_raw(), buf.width(), buf.height(), P::COLOR_TYPE)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(out)
}

fn disparity_bytes(map: &DisparityMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + map.as_raw().len() * 4);
    out.extend_from_slice(&map.width().to_le_bytes());
    out.extend_from_slice(&map.height().to_le_bytes());
    for v in map.as_raw() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_disparity(bytes: &[u8], path: &Path) -> Result<DisparityMap> {
    let bad = |reason: &str| Error::format("disparity", path, reason);
    if bytes.len() < 8 {
        return Err(bad("missing header"));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let body = &bytes[8..];
    if body.len() != w as usize * h as usize * 4 {
        return Err(bad("body length does not match header"));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    DisparityMap::from_raw(w, h, values).ok_or_else(|| bad("inconsistent extents"))
}

fn boxes_text(boxes: &[GtBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let depth = b.depth.map_or("-".to_string(), |d| d.to_string());
        writeln!(s, "{} {} {} {} {} {}", b.class, b.x, b.y, b.w, b.h, depth).unwrap();
    }
    s
}

fn parse_boxes(text: &str, path: &Path) -> Result<Vec<GtBox>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format("boxes", path, format!("line {}: {line:?}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(GtBox {
            class: f[0].parse().map_err(|_| bad())?,
            x: num(f[1])?,
            y: num(f[2])?,
            w: num(f[3])?,
            h: num(f[4])?,
            depth: if f[5] == "-" { None } else { Some(num(f[5])?) },
        });
    }
    Ok(out)
}

fn parse_camera(text: &str, path: &Path) -> Result<CameraModel> {
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format("camera", path, "expected \"b f\""))?;
    match v[..] {
        [b, f] => CameraModel::new(b, f),
        _ => Err(Error::format("camera", path, "expected \"b f\"")),
    }
}

/// Writes `scenes` (all sharing one camera) and a manifest. Scene files are
/// named by position, so `scene.name` is not persisted.
pub fn write_dataset(dir: &Path, scenes: &[Scene], camera: CameraModel, seed: Option<u64>) -> Result<DatasetManifest> {
    let scene_dir = dir.join("scenes");
    fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
    let mut files = Vec::new();
    let mut content = Sha256::new();
    let mut emit = |rel: String, bytes: Vec<u8>| -> Result<()> {
        write(&dir.join(&rel), &bytes)?;
        content.update(&bytes);
        files.push((rel, hex(&Sha256::digest(&bytes))));
        Ok(())
    };
    emit("camera.txt".into(), format!("{} {}\n", camera.b, camera.f).into_bytes())?;
    let mut size = None;
    for (i, s) in scenes.iter().enumerate() {
        size.get_or_insert((s.width(), s.height()));
        let stem = format!("scenes/{i:04}");
        emit(format!("{stem}.ppm"), encode_pnm(&s.image, &dir.join(format!("{stem}.ppm")))?)?;
        emit(format!("{stem}.mask.pgm"), encode_pnm(&s.mask, &dir.join(format!("{stem}.mask.pgm")))?)?;
        emit(format!("{stem}.disp.f32"), disparity_bytes(&s.disparity))?;
        emit(format!("{stem}.boxes.txt"), boxes_text(&s.boxes).into_bytes())?;
    }
    let manifest = DatasetManifest {
        seed,
        count: scenes.len(),
        size,
        files,
        content: hex(&content.finalize()),
    };
    write(&dir.join("manifest.txt"), manifest_text(&manifest).as_bytes())?;
    Ok(manifest)
}

fn manifest_text(m: &DatasetManifest) -> String {
    let mut s = format!("{MANIFEST_MAGIC}\n");
    if let Some(seed) = m.seed {
        writeln!(s, "seed {seed}").unwrap();
    }
    writeln!(s, "count {}", m.count).unwrap();
    if let Some((w, h)) = m.size {
        writeln!(s, "size {w}x{h}").unwrap();
    }
    writeln!(s, "content {}", m.content).unwrap();
    for (path, digest) in &m.files {
        writeln!(s, "file {digest} {path}").unwrap();
    }
    s
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.txt");
    let text = read_text(&path)?;
    let bad = |reason: String| Error::format("manifest", &path, reason);
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_MAGIC) {
        return Err(bad("bad magic".into()));
    }
    let mut m = DatasetManifest {
        seed: None,
        count: 0,
        size: None,
        files: Vec::new(),
        content: String::new(),
    };
    for line in lines {
        let (key, rest) = line.split_once(' ').ok_or_else(|| bad(format!("bad line {line:?}")))?;
        let parse_err = |_| bad(format!("bad line {line:?}"));
        match key {
            "seed" => m.seed = Some(rest.parse().map_err(parse_err)?),
            "count" => m.count = rest.parse().map_err(parse_err)?,
            "size" => {
                let (w, h) = rest.split_once('x').ok_or_else(|| bad(format!("bad size {rest:?}")))?;
                m.size = Some((w.parse().map_err(parse_err)?, h.parse().map_err(parse_err)?));
            }
            "content" => m.content = rest.to_string(),
            "file" => {
                let (digest, p) = rest.split_once(' ').ok_or_else(|| bad(format!("bad line {line:?}")))?;
                m.files.push((p.to_string(), digest.to_string()));
            }
            _ => return Err(bad(format!("unknown key {key:?}"))),
        }
    }
    Ok(m)
}

/// Recomputes every file hash and the content digest.
pub fn verify_manifest(dir: &Path) -> Result<DatasetManifest> {
    let m = read_manifest(dir)?;
    let mut content = Sha256::new();
    for (rel, digest) in &m.files {
        let bytes = read(&dir.join(rel))?;
        if hex(&Sha256::digest(&bytes)) != *digest {
            return Err(Error::format("manifest", dir.join(rel), "checksum mismatch"));
        }
        content.update(&bytes);
    }
    if hex(&content.finalize()) != m.content {
        return Err(Error::format("manifest", dir.join("manifest.txt"), "content digest mismatch"));
    }
    Ok(m)
}

fn load_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

fn read_scene(dir: &Path, index: usize, camera: CameraModel) -> Result<Scene> {
    let stem = dir.join("scenes").join(format!("{index:04}"));
    let with = |suffix: &str| PathBuf::from(format!("{}{suffix}", stem.display()));
    let image: RgbImage = load_image(&with(".ppm"))?.to_rgb8();
    let mask: GrayImage = load_image(&with(".mask.pgm"))?.to_luma8();
    let disp_path = with(".disp.f32");
    let disparity = parse_disparity(&read(&disp_path)?, &disp_path)?;
    let boxes_path = with(".boxes.txt");
    let boxes = parse_boxes(&read_text(&boxes_path)?, &boxes_path)?;
    let scene = Scene {
        name: format!("{index:04}"),
        image,
        boxes,
        mask,
        disparity,
        camera,
    };
    scene.validate(256)?;
    Ok(scene)
}

/// Loads every scene listed by the manifest count.
pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let manifest = read_manifest(dir)?;
    let cam_path = dir.join("camera.txt");
    let camera = parse_camera(&read_text(&cam_path)?, &cam_path)?;
    (0..manifest.count).map(|i| read_scene(dir, i, camera)).collect()
}
