//! Quarter-resolution segmentation branch.
//!
//! A reduced pyramid-pooling prior over `res5` (three average-pooled views,
//! each projected and resized to stride 8) is concatenated with local
//! features from `res3` and `res4`, fused, classified and upsampled once to
//! stride 4. No layer of this branch carries a bias.

use rand::Rng;

use crate::encoder::{EncoderConfig, FeaturePyramid, Preset};
use crate::error::{Error, Result};
use crate::ndgrad::{bilinear_kernel, Float, ParamId, ParamStore, Var};
use crate::nn::{Conv2d, Forward};

#[derive(Clone, Debug, PartialEq)]
pub struct SegConfig {
    pub num_classes: usize,
    /// Projection width of each pooled view of `res5`.
    pub prior_channels: [usize; 3],
    /// Pooling kernel (= stride) of each view.
    pub prior_strides: [usize; 3],
    /// Widths of the `res3` and `res4` local branches.
    pub local_channels: [usize; 2],
    pub fuse_channels: usize,
    pub output_downscale: usize,
}

impl SegConfig {
    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self {
                num_classes: 19,
                prior_channels: [512, 256, 128],
                prior_strides: [1, 2, 4],
                local_channels: [128, 256],
                fuse_channels: 256,
                output_downscale: 4,
            },
            Preset::Mini => Self {
                num_classes: 19,
                prior_channels: [64, 32, 16],
                prior_strides: [1, 2, 4],
                local_channels: [16, 32],
                fuse_channels: 32,
                output_downscale: 4,
            },
        }
    }

    fn concat_channels(&self) -> usize {
        self.prior_channels.iter().sum::<usize>() + self.local_channels.iter().sum::<usize>()
    }
}

#[derive(Clone, Debug)]
pub struct SegHead {
    pub config: SegConfig,
    pub prior_proj: Vec<Conv2d>,
    pub local3: Conv2d,
    pub local4: Conv2d,
    /// Depthwise ×2 deconvolution of the `res4` local branch.
    pub local4_up: ParamId,
    pub fuse: Conv2d,
    pub classifier: Conv2d,
    /// Depthwise ×2 deconvolution from stride 8 to stride 4.
    pub out_up: ParamId,
}

impl SegHead {
    pub fn build<T: Float>(
        config: &SegConfig,
        encoder: &EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.output_downscale != 4 {
            return Err(Error::invalid("seghead", "only a stride-4 output is supported"));
        }
        if config.num_classes == 0 || config.prior_strides.contains(&0) {
            return Err(Error::invalid("seghead", "classes and pooling strides must be positive"));
        }
        let prior_proj = config
            .prior_channels
            .iter()
            .enumerate()
            .map(|(i, &ch)| Conv2d::new(store, &format!("seg.prior{i}"), encoder.res5_channels(), ch, 1, 1, false, rng))
            .collect();
        let [l3, l4] = config.local_channels;
        let local3 = Conv2d::new(store, "seg.local3", encoder.res3_channels(), l3, 3, 1, false, rng);
        let local4 = Conv2d::new(store, "seg.local4", encoder.res4_channels(), l4, 3, 1, false, rng);
        let local4_up = store.add("seg.local4_up.weight", bilinear_kernel(2, l4)?);
        let fuse = Conv2d::new(store, "seg.fuse", config.concat_channels(), config.fuse_channels, 3, 1, false, rng);
        let classifier = Conv2d::with_std(store, "seg.classifier", config.fuse_channels, config.num_classes, 1, 0.01, false, rng);
        let out_up = store.add("seg.out_up.weight", bilinear_kernel(2, config.num_classes)?);
        Ok(Self {
            config: config.clone(),
            prior_proj,
            local3,
            local4,
            local4_up,
            fuse,
            classifier,
            out_up,
        })
    }

    /// Logits `N × classes × H/4 × W/4`. With `block_gradients` the `res3`
    /// and `res4` taps are read through stop-gradient; `res5` must then come
    /// from an encoder pass with a detached `res4 → res5` input.
    pub fn forward<T: Float>(&self, f: &mut Forward<'_, T>, pyramid: &FeaturePyramid, block_gradients: bool) -> Result<Var> {
        let (_, _, h8, w8) = f.graph.value(pyramid.res3).dims4()?;
        let (_, _, h32, w32) = f.graph.value(pyramid.res5).dims4()?;
        let max_pool = *self.config.prior_strides.iter().max().unwrap();
        if h32 < max_pool || w32 < max_pool {
            return Err(Error::invalid(
                "seg_forward",
                format!("res5 extent {w32}x{h32} smaller than pooling stride {max_pool}; input must be at least {}px", 32 * max_pool),
            ));
        }
        let (r3, r4) = if block_gradients {
            (f.graph.stop_gradient(pyramid.res3), f.graph.stop_gradient(pyramid.res4))
        } else {
            (pyramid.res3, pyramid.res4)
        };

        let mut parts = Vec::with_capacity(5);
        for (proj, &stride) in self.prior_proj.iter().zip(&self.config.prior_strides) {
            let pooled = if stride == 1 {
                pyramid.res5
            } else {
                f.graph.avgpool2d(pyramid.res5, stride, stride)?
            };
            let y = proj.forward(f, pooled)?;
            let y = f.graph.relu(y);
            parts.push(f.graph.resize_bilinear(y, h8, w8)?);
        }

        let l3 = self.local3.forward(f, r3)?;
        parts.push(f.graph.relu(l3));
        let l4 = self.local4.forward(f, r4)?;
        let l4 = f.graph.relu(l4);
        let up = f.param(self.local4_up);
        parts.push(f.graph.deconv2d(l4, up, 2, self.config.local_channels[1])?);

        let cat = f.graph.concat(&parts, 1)?;
        let fused = self.fuse.forward(f, cat)?;
        let fused = f.graph.relu(fused);
        let logits = self.classifier.forward(f, fused)?;
        let up = f.param(self.out_up);
        f.graph.deconv2d(logits, up, 2, self.config.num_classes)
    }
}

/// Per-pixel argmax class of `N × C × h × w` logits, one mask per image.
pub fn argmax_masks<T: Float>(logits: &crate::ndgrad::Tensor<T>) -> Result<Vec<Vec<u8>>> {
    let (n, c, h, w) = logits.dims4()?;
    let d = logits.data();
    Ok((0..n)
        .map(|i| {
            (0..h * w)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if d[(i * c + k) * h * w + p] > d[(i * c + best) * h * w + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}
