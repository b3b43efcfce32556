//! Shared residual feature extractor.
//!
//! Stem (7×7 stride-2 convolution, 3×3 stride-2 max pool) followed by four
//! residual stages `res2..res5` at strides 4/8/16/32. `res3`, `res4` and
//! `res5` are exposed as the feature pyramid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndgrad::{Float, ParamStore, Var};
use crate::nn::{ConvBn, Forward};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Mini,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Mini => "mini",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Preset::Full),
            "mini" => Some(Preset::Mini),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub preset: Preset,
    /// Residual units in res2..res5.
    pub units_per_block: [usize; 4],
    pub stem_channels: usize,
    /// Output channels of res2..res5.
    pub channel_ladder: [usize; 4],
    /// Three-layer bottleneck units (1×1, 3×3, 1×1) instead of two 3×3 layers.
    pub bottleneck: bool,
}

impl EncoderConfig {
    /// 50-layer layout: 3/4/6/3 bottleneck units, 256..2048 channels.
    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            units_per_block: [3, 4, 6, 3],
            stem_channels: 64,
            channel_ladder: [256, 512, 1024, 2048],
            bottleneck: true,
        }
    }

    /// One basic unit per stage with a 16..128 ladder.
    pub fn mini() -> Self {
        Self {
            preset: Preset::Mini,
            units_per_block: [1, 1, 1, 1],
            stem_channels: 16,
            channel_ladder: [16, 32, 64, 128],
            bottleneck: false,
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self::full(),
            Preset::Mini => Self::mini(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.units_per_block.contains(&0) {
            return Err(Error::invalid("build_encoder", "every stage needs at least one residual unit"));
        }
        if self.stem_channels == 0 || self.channel_ladder.contains(&0) {
            return Err(Error::invalid("build_encoder", "channel counts must be positive"));
        }
        if self.bottleneck && self.channel_ladder.iter().any(|c| c % 4 != 0) {
            return Err(Error::invalid("build_encoder", "bottleneck widths must be divisible by 4"));
        }
        Ok(())
    }

    pub fn res3_channels(&self) -> usize {
        self.channel_ladder[1]
    }

    pub fn res4_channels(&self) -> usize {
        self.channel_ladder[2]
    }

    pub fn res5_channels(&self) -> usize {
        self.channel_ladder[3]
    }
}

/// Input extents must be multiples of this.
pub const ENCODER_STRIDE: usize = 32;

/// Multi-level taps of one encoded batch.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    /// Stride 8.
    pub res3: Var,
    /// Stride 16.
    pub res4: Var,
    /// Stride 32.
    pub res5: Var,
}

#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub branch: Vec<ConvBn>,
    /// Projection used when the unit changes width or resolution.
    pub shortcut: Option<ConvBn>,
}

impl ResidualUnit {
    pub fn forward<T: Float>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut y = x;
        let last = self.branch.len() - 1;
        for (i, layer) in self.branch.iter().enumerate() {
            y = layer.forward(f, y)?;
            if i != last {
                y = f.graph.relu(y);
            }
        }
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(f, x)?,
            None => x,
        };
        let sum = f.graph.add(y, skip)?;
        Ok(f.graph.relu(sum))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stem: ConvBn,
    /// res2..res5.
    pub stages: [Vec<ResidualUnit>; 4],
}

/// Parameter-name prefixes of each stage, stem first.
pub const STAGE_PREFIXES: [&str; 5] = ["encoder.stem.", "encoder.res2.", "encoder.res3.", "encoder.res4.", "encoder.res5."];

impl Encoder {
    pub fn build<T: Float>(config: &EncoderConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let stem = ConvBn::new(store, "encoder.stem", 3, config.stem_channels, 7, 2, rng);
        let mut in_ch = config.stem_channels;
        let mut stages: [Vec<ResidualUnit>; 4] = Default::default();
        for (s, stage) in stages.iter_mut().enumerate() {
            let out_ch = config.channel_ladder[s];
            for u in 0..config.units_per_block[s] {
                let stride = if u == 0 && s > 0 { 2 } else { 1 };
                let name = format!("encoder.res{}.{u}", s + 2);
                let branch = if config.bottleneck {
                    let mid = out_ch / 4;
                    vec![
                        ConvBn::new(store, &format!("{name}.conv1"), in_ch, mid, 1, 1, rng),
                        ConvBn::new(store, &format!("{name}.conv2"), mid, mid, 3, stride, rng),
                        ConvBn::new(store, &format!("{name}.conv3"), mid, out_ch, 1, 1, rng),
                    ]
                } else {
                    vec![
                        ConvBn::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, rng),
                        ConvBn::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, rng),
                    ]
                };
                let shortcut = (stride != 1 || in_ch != out_ch)
                    .then(|| ConvBn::new(store, &format!("{name}.proj"), in_ch, out_ch, 1, stride, rng));
                stage.push(ResidualUnit { branch, shortcut });
                in_ch = out_ch;
            }
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
        })
    }

    /// Encodes an `N×3×H×W` batch. With `detach_res5_input`, `res5` is
    /// computed from a gradient-blocked copy of `res4`, so losses reaching
    /// the encoder only through `res5` never update the stem..res4 weights.
    pub fn encode<T: Float>(&self, f: &mut Forward<'_, T>, image: Var, detach_res5_input: bool) -> Result<FeaturePyramid> {
        let shape = f.graph.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::invalid("encode", format!("expected N×3×H×W image, got {shape:?}")));
        }
        for &extent in &shape[2..] {
            if extent % ENCODER_STRIDE != 0 || extent == 0 {
                return Err(Error::Indivisible {
                    op: "encode",
                    extent,
                    divisor: ENCODER_STRIDE,
                });
            }
        }
        let x = self.stem.forward(f, image)?;
        let x = f.graph.relu(x);
        let mut x = f.graph.maxpool2d(x, 3, 2, 1)?;
        let mut taps = [x; 4];
        for (s, stage) in self.stages.iter().enumerate() {
            if s == 3 && detach_res5_input {
                x = f.graph.stop_gradient(x);
            }
            for unit in stage {
                x = unit.forward(f, x)?;
            }
            taps[s] = x;
        }
        Ok(FeaturePyramid {
            res3: taps[1],
            res4: taps[2],
            res5: taps[3],
        })
    }
}
