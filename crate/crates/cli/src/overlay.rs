//! Visualization: segmentation tint, box outlines and distance labels.

use image::{GrayImage, Rgb, RgbImage};
use percept::detect::Detection;

/// Colors of the 19 segmentation classes, in id order.
const PALETTE: [[u8; 3]; 19] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 0, 70],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
];

const BOX_COLOR: Rgb<u8> = Rgb([255, 255, 0]);
const TEXT_COLOR: Rgb<u8> = Rgb([255, 255, 255]);
const TEXT_BG: Rgb<u8> = Rgb([0, 0, 0]);
const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;
const TEXT_SCALE: u32 = 2;

/// 3×5 glyphs, one row per entry, most significant bit on the left.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        'm' => [0b000, 0b000, 0b111, 0b111, 0b101],
        _ => return None,
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Draws `text` with its top-left corner at `(x, y)` on a dark backing.
fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str) {
    let advance = ((GLYPH_W + 1) * TEXT_SCALE) as i64;
    let width = advance * text.chars().count() as i64;
    let height = ((GLYPH_H + 2) * TEXT_SCALE) as i64;
    for dy in 0..height {
        for dx in 0..width + TEXT_SCALE as i64 {
            put(img, x + dx, y + dy, TEXT_BG);
        }
    }
    for (i, ch) in text.chars().enumerate() {
        let Some(rows) = glyph(ch) else { continue };
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    for sy in 0..TEXT_SCALE {
                        for sx in 0..TEXT_SCALE {
                            let px = x + i as i64 * advance + ((col + 1) * TEXT_SCALE + sx) as i64;
                            let py = y + ((r as u32 + 1) * TEXT_SCALE + sy) as i64;
                            put(img, px, py, TEXT_COLOR);
                        }
                    }
                }
            }
        }
    }
}

fn draw_rect(img: &mut RgbImage, d: &Detection) {
    let x0 = d.bbox.x.round() as i64;
    let y0 = d.bbox.y.round() as i64;
    let x1 = (d.bbox.x + d.bbox.w).round() as i64 - 1;
    let y1 = (d.bbox.y + d.bbox.h).round() as i64 - 1;
    for t in 0..2 {
        for x in x0..=x1 {
            put(img, x, y0 + t, BOX_COLOR);
            put(img, x, y1 - t, BOX_COLOR);
        }
        for y in y0..=y1 {
            put(img, x0 + t, y, BOX_COLOR);
            put(img, x1 - t, y, BOX_COLOR);
        }
    }
}

/// The input image tinted by the upsampled class mask, with each detection
/// outlined and labelled with its distance in metres.
pub fn render(input: &RgbImage, mask: &GrayImage, detections: &[Detection]) -> RgbImage {
    let (mw, mh) = mask.dimensions();
    let mut out = RgbImage::from_fn(input.width(), input.height(), |x, y| {
        let p = input.get_pixel(x, y);
        let id = mask.get_pixel((x / 4).min(mw - 1), (y / 4).min(mh - 1))[0] as usize;
        match PALETTE.get(id) {
            Some(c) => Rgb([0, 1, 2].map(|k| ((p[k] as u16 + c[k] as u16) / 2) as u8)),
            None => *p,
        }
    });
    for d in detections {
        draw_rect(&mut out, d);
        let label_h = ((GLYPH_H + 2) * TEXT_SCALE) as i64;
        let y = (d.bbox.y.round() as i64 - label_h).max(0);
        draw_text(&mut out, d.bbox.x.round() as i64, y, &format!("{:.1}m", d.depth));
    }
    out
}
