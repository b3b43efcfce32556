use super::boxes::NormBox;
use crate::error::{Error, Result};

/// One prediction layer of the anchor layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    /// Feature stride in input pixels; the grid is `ceil(extent / stride)`.
    pub stride: usize,
    /// Anchor side for aspect 1, as a fraction of input height.
    pub scale: f64,
    /// Scale of the next layer, used for the extra square anchor.
    pub next_scale: f64,
    pub aspect_ratios: Vec<f64>,
}

impl LayerSpec {
    /// Aspect-ratio anchors plus the extra `sqrt(scale · next_scale)` square.
    pub fn anchors_per_cell(&self) -> usize {
        self.aspect_ratios.len() + 1
    }

    pub fn grid(&self, width: usize, height: usize) -> (usize, usize) {
        (width.div_ceil(self.stride), height.div_ceil(self.stride))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    pub layers: Vec<LayerSpec>,
    /// Reference depth of the first layer in metres. Layer `k` uses
    /// `depth_ref · scale_0 / scale_k`: larger anchors see nearer objects.
    pub depth_ref: f64,
}

/// Anchor in normalized coordinates with the reference depth of its layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub depth_ref: f64,
}

impl PriorBox {
    pub fn as_box(&self) -> NormBox {
        NormBox {
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            h: self.h,
        }
    }
}

const STRIDES: [usize; 6] = [16, 32, 64, 128, 256, 512];
const SCALES: [f64; 7] = [0.1, 0.2, 0.375, 0.55, 0.725, 0.9, 1.075];

impl Default for AnchorConfig {
    /// Six layers at strides 16..512 with 4/6/6/6/4/4 anchors per cell.
    fn default() -> Self {
        let layers = STRIDES
            .iter()
            .enumerate()
            .map(|(i, &stride)| {
                let mut aspect_ratios = vec![1.0, 2.0, 0.5];
                if (1..=3).contains(&i) {
                    aspect_ratios.extend([3.0, 1.0 / 3.0]);
                }
                LayerSpec {
                    stride,
                    scale: SCALES[i],
                    next_scale: SCALES[i + 1],
                    aspect_ratios,
                }
            })
            .collect();
        Self {
            layers,
            depth_ref: 20.0,
        }
    }
}

impl AnchorConfig {
    /// Closed-form prior count `Σ grid_w · grid_h · anchors`.
    pub fn prior_count(&self, width: usize, height: usize) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let (gw, gh) = l.grid(width, height);
                gw * gh * l.anchors_per_cell()
            })
            .sum()
    }

    pub fn layer_depth_ref(&self, layer: &LayerSpec) -> f64 {
        let base = self.layers.first().map_or(layer.scale, |l| l.scale);
        self.depth_ref * base / layer.scale
    }
}

/// Tiles anchors layer-major, then row-major over the grid, anchor-minor.
pub fn generate_priors(width: usize, height: usize, config: &AnchorConfig) -> Result<Vec<PriorBox>> {
    let divisor = crate::encoder::ENCODER_STRIDE;
    for extent in [width, height] {
        if extent == 0 || extent % divisor != 0 {
            return Err(Error::Indivisible {
                op: "generate_priors",
                extent,
                divisor,
            });
        }
    }
    let (wf, hf) = (width as f64, height as f64);
    let mut priors = Vec::with_capacity(config.prior_count(width, height));
    for layer in &config.layers {
        let (gw, gh) = layer.grid(width, height);
        let depth_ref = config.layer_depth_ref(layer);
        let side = layer.scale * hf;
        let extra = (layer.scale * layer.next_scale).sqrt() * hf;
        let mut shapes: Vec<(f64, f64)> = Vec::with_capacity(layer.anchors_per_cell());
        // order: first aspect ratio, extra square, remaining ratios
        let mut ratios = layer.aspect_ratios.iter();
        if let Some(&ar) = ratios.next() {
            shapes.push((side * ar.sqrt(), side / ar.sqrt()));
        }
        shapes.push((extra, extra));
        for &ar in ratios {
            shapes.push((side * ar.sqrt(), side / ar.sqrt()));
        }
        for gy in 0..gh {
            for gx in 0..gw {
                let cx = (gx as f64 + 0.5) / gw as f64;
                let cy = (gy as f64 + 0.5) / gh as f64;
                for &(pw, ph) in &shapes {
                    priors.push(PriorBox {
                        cx,
                        cy,
                        w: pw / wf,
                        h: ph / hf,
                        depth_ref,
                    });
                }
            }
        }
    }
    Ok(priors)
}
