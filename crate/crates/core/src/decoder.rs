//! Per-level convolutional depth heads, averaged in depth space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Pyramid;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamId};
use crate::substrate::{PadMode, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        Self { min: 0.1, max: 10.0 }
    }
}

impl DepthRange {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.max > self.min && self.max.is_finite()) {
            return Err(Error::Config(format!(
                "depth range must satisfy 0 < min < max, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Head {
    conv1: ParamId,
    bias1: ParamId,
    conv2: ParamId,
    bias2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    range: DepthRange,
    heads: Vec<Head>,
    channels: [usize; 4],
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, channels: [usize; 4], hidden: usize, range: DepthRange) -> Result<Self> {
        range.validate()?;
        if hidden == 0 {
            return Err(Error::Config("decoder hidden width must be positive".into()));
        }
        let heads = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let n = format!("decoder.level{}", i + 1);
                Head {
                    conv1: init.normal(&format!("{n}.conv1"), &[hidden, c, 3, 3], (2.0 / (9 * c) as f64).sqrt()),
                    bias1: init.constant(&format!("{n}.bias1"), &[hidden], 0.0),
                    conv2: init.normal(&format!("{n}.conv2"), &[1, hidden, 3, 3], 0.1 * (1.0 / (9 * hidden) as f64).sqrt()),
                    bias2: init.constant(&format!("{n}.bias2"), &[1], 0.0),
                }
            })
            .collect();
        Ok(Self { range, heads, channels })
    }

    pub fn range(&self) -> DepthRange {
        self.range
    }

    /// Pre-squash logits of level `l` (1-based) at full resolution.
    pub fn logits<T: Scalar>(&self, ctx: &Ctx<'_, T>, l: usize, f: Var, size: (usize, usize)) -> Result<Var> {
        let t = ctx.tape;
        let head = &self.heads[l - 1];
        let s = t.shape(f);
        if s.len() != 3 || s[0] != self.channels[l - 1] {
            return Err(Error::Usage(format!(
                "decoder level {l} expects {} channels, got shape {s:?}",
                self.channels[l - 1]
            )));
        }
        let x = t.conv2d(f, ctx.p(head.conv1), 1, 1, PadMode::Replicate)?;
        let x = t.add_channel_bias(x, ctx.p(head.bias1))?;
        let x = t.gelu(x)?;
        let x = t.conv2d(x, ctx.p(head.conv2), 1, 1, PadMode::Replicate)?;
        let x = t.add_channel_bias(x, ctx.p(head.bias2))?;
        t.resize(x, size.0, size.1)
    }

    /// Maps logits into `[min, max]`.
    pub fn squash<T: Scalar>(&self, ctx: &Ctx<'_, T>, logits: Var) -> Result<Var> {
        let t = ctx.tape;
        let s = t.sigmoid(logits)?;
        let s = t.scale(s, T::of(self.range.max - self.range.min))?;
        t.add_scalar(s, T::of(self.range.min))
    }

    /// Mean of the four per-level depth maps, `1×H×W`.
    pub fn decode<T: Scalar>(&self, ctx: &Ctx<'_, T>, pyramid: &Pyramid, size: (usize, usize)) -> Result<Var> {
        let t = ctx.tape;
        let mut acc: Option<Var> = None;
        for (i, &f) in pyramid.levels.iter().enumerate() {
            let d = self.squash(ctx, self.logits(ctx, i + 1, f, size)?)?;
            acc = Some(match acc {
                Some(a) => t.add(a, d)?,
                None => d,
            });
        }
        t.scale(acc.expect("four levels"), T::of(0.25))
    }
}
