/// Box in normalized center form, coordinates relative to input extents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Axis-aligned pixel box, top-left corner plus extents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &NormBox) -> f64 {
        corner_iou(self.corners(), other.corners())
    }

    pub fn to_pixels(&self, width: usize, height: usize) -> PixelBox {
        let [x0, y0, ..] = self.corners();
        PixelBox {
            x: x0 * width as f64,
            y: y0 * height as f64,
            w: self.w * width as f64,
            h: self.h * height as f64,
        }
    }
}

impl PixelBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x, self.y, self.x + self.w, self.y + self.h]
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        corner_iou(self.corners(), other.corners())
    }

    pub fn normalized(&self, width: usize, height: usize) -> NormBox {
        NormBox {
            cx: (self.x + self.w / 2.0) / width as f64,
            cy: (self.y + self.h / 2.0) / height as f64,
            w: self.w / width as f64,
            h: self.h / height as f64,
        }
    }
}

/// Intersection over union of `[x0, y0, x1, y1]` boxes; 0 when the union is empty.
pub fn corner_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basics() {
        let a = PixelBox { x: 0.0, y: 0.0, w: 10.0, h: 10.0 };
        assert_eq!(a.iou(&a), 1.0);
        let b = PixelBox { x: 5.0, y: 0.0, w: 10.0, h: 10.0 };
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        let c = PixelBox { x: 20.0, y: 20.0, w: 1.0, h: 1.0 };
        assert_eq!(a.iou(&c), 0.0);
    }

    #[test]
    fn pixel_norm_roundtrip() {
        let p = PixelBox { x: 12.0, y: 30.0, w: 40.0, h: 18.0 };
        let q = p.normalized(256, 128).to_pixels(256, 128);
        assert!((p.x - q.x).abs() < 1e-9 && (p.h - q.h).abs() < 1e-9);
    }
}
