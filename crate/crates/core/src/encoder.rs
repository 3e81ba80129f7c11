//! Predictor-branch encoder: four stride-2 convolutional stages producing
//! feature maps at 1/4, 1/8, 1/16 and 1/32 of the input resolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamId};
use crate::substrate::{PadMode, Scalar, Tape, Var};

/// Total spatial reduction of the deepest level.
pub const MAX_STRIDE: usize = 32;

/// The four encoder levels, finest first. Level `l` (1-based) has shape
/// `C_l × H/2^{l+1} × W/2^{l+1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pyramid {
    pub levels: [Var; 4],
}

impl Pyramid {
    pub fn shapes<T: Scalar>(&self, tape: &Tape<T>) -> [Vec<usize>; 4] {
        self.levels.map(|v| tape.shape(v))
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    kernel: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

impl ConvBlock {
    fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, c_in: usize, c_out: usize) -> Self {
        let fan_in = (c_in * 9) as f64;
        Self {
            kernel: init.normal(&format!("{name}.conv"), &[c_out, c_in, 3, 3], (2.0 / fan_in).sqrt()),
            gamma: init.constant(&format!("{name}.norm.gamma"), &[c_out], 1.0),
            beta: init.constant(&format!("{name}.norm.beta"), &[c_out], 0.0),
        }
    }

    fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let t = ctx.tape;
        let y = t.conv2d(x, ctx.p(self.kernel), 2, 1, PadMode::Replicate)?;
        let y = t.group_norm(y, ctx.p(self.gamma), ctx.p(self.beta))?;
        t.gelu(y)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    channels: [usize; 4],
    /// Stage 1 holds two blocks (to reach 1/4), the others one each.
    stages: Vec<Vec<ConvBlock>>,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, channels: [usize; 4]) -> Result<Self> {
        if channels.windows(2).any(|w| w[0] >= w[1]) || channels[0] == 0 {
            return Err(Error::Config(format!(
                "encoder channel widths must be positive and strictly increasing, got {channels:?}"
            )));
        }
        let mut stages = Vec::with_capacity(4);
        stages.push(vec![
            ConvBlock::new(init, "encoder.stage1.block0", 3, channels[0]),
            ConvBlock::new(init, "encoder.stage1.block1", channels[0], channels[0]),
        ]);
        for l in 1..4 {
            stages.push(vec![ConvBlock::new(
                init,
                &format!("encoder.stage{}.block0", l + 1),
                channels[l - 1],
                channels[l],
            )]);
        }
        Ok(Self { channels, stages })
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    /// Maps a `3×H×W` image to its four-level pyramid.
    pub fn encode<T: Scalar>(&self, ctx: &Ctx<'_, T>, image: Var) -> Result<Pyramid> {
        let shape = ctx.tape.shape(image);
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape("encode", format!("expected 3×H×W image, got {shape:?}")));
        }
        check_divisible(shape[1], shape[2], MAX_STRIDE)?;
        let mut x = image;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(ctx, x)?;
            }
            levels.push(x);
        }
        Ok(Pyramid {
            levels: levels.try_into().expect("four stages"),
        })
    }
}

pub fn check_divisible(h: usize, w: usize, divisor: usize) -> Result<()> {
    if h == 0 || w == 0 || h % divisor != 0 || w % divisor != 0 {
        return Err(Error::Config(format!(
            "input size {h}x{w} must be divisible by {divisor}"
        )));
    }
    Ok(())
}
