//! The assembled network: encoder, frozen enhancer, pattern exchange and
//! depth heads sharing one parameter store.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DepthRange};
use crate::encoder::{check_divisible, Encoder, Pyramid, MAX_STRIDE};
use crate::enhancer::{Enhancer, EnhancerConfig};
use crate::error::{Error, Result};
use crate::loss::si_loss;
use crate::nn::{grad_check_params, Ctx, Init, ParamStore};
use crate::pei::{Pei, Toggles};
use crate::substrate::{rng, GradReport, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `[H, W]` of every input image.
    pub resolution: [usize; 2],
    pub channels: [usize; 4],
    pub enhancer: EnhancerConfig,
    /// Replaces the random frozen enhancer when set.
    pub enhancer_weights: Option<PathBuf>,
    pub patterns: usize,
    pub toggles: Toggles,
    pub decoder_hidden: usize,
    pub depth: DepthRange,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: [224, 224],
            channels: [16, 32, 64, 96],
            enhancer: EnhancerConfig::default(),
            enhancer_weights: None,
            patterns: 8,
            toggles: Toggles::ALL,
            decoder_hidden: 16,
            depth: DepthRange::default(),
        }
    }
}

impl ModelConfig {
    /// Smallest configuration with every component active.
    pub fn toy() -> Self {
        Self {
            resolution: [32, 32],
            channels: [4, 6, 8, 10],
            enhancer: EnhancerConfig {
                patch: 8,
                width: 16,
                heads: 2,
                layers: 4,
            },
            enhancer_weights: None,
            patterns: 4,
            toggles: Toggles::ALL,
            decoder_hidden: 4,
            depth: DepthRange::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.enhancer.validate()?;
        self.depth.validate()?;
        let [h, w] = self.resolution;
        check_divisible(h, w, MAX_STRIDE)?;
        check_divisible(h, w, self.enhancer.patch)?;
        if self.patterns == 0 {
            return Err(Error::Config("pattern count must be positive".into()));
        }
        for &c in &self.channels {
            if c % self.enhancer.heads != 0 {
                return Err(Error::Config(format!(
                    "encoder width {c} not divisible by {} heads",
                    self.enhancer.heads
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub enhancer: Enhancer,
    pub pei: Pei,
    pub decoder: Decoder,
    cfg: ModelConfig,
}

impl<T: Scalar> Model<T> {
    /// Each part draws from its own stream of `seed`, so the frozen enhancer
    /// is identical across toggle settings.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let enhancer = Enhancer::new(
            &mut store,
            &mut rng::stream(seed, rng::label("enhancer")),
            cfg.enhancer.clone(),
            (cfg.resolution[0], cfg.resolution[1]),
        )?;
        if let Some(dir) = &cfg.enhancer_weights {
            enhancer.load_weights(&mut store, dir)?;
        }
        let encoder = Encoder::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng::stream(seed, rng::label("encoder")),
                trainable: true,
            },
            cfg.channels,
        )?;
        let pei = Pei::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng::stream(seed, rng::label("pei")),
                trainable: true,
            },
            cfg.channels,
            cfg.enhancer.width,
            cfg.enhancer.heads,
            cfg.patterns,
            cfg.toggles,
        )?;
        let decoder = Decoder::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng::stream(seed, rng::label("decoder")),
                trainable: true,
            },
            cfg.channels,
            cfg.decoder_hidden,
            cfg.depth,
        )?;
        Ok(Self {
            store,
            encoder,
            enhancer,
            pei,
            decoder,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let [h, w] = self.cfg.resolution;
        if shape != [3, h, w] {
            return Err(Error::Config(format!(
                "image must be 3x{h}x{w} for this model, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Enhanced pyramid for an image already on the tape.
    pub fn features(&self, ctx: &Ctx<'_, T>, image: Var) -> Result<Pyramid> {
        self.check_image(&ctx.tape.shape(image))?;
        let pyramid = self.encoder.encode(ctx, image)?;
        self.pei.forward(ctx, &self.enhancer, &pyramid, image)
    }

    /// Depth map `1×H×W` in meters.
    pub fn forward(&self, ctx: &Ctx<'_, T>, image: Var) -> Result<Var> {
        let pyramid = self.features(ctx, image)?;
        let [h, w] = self.cfg.resolution;
        self.decoder.decode(ctx, &pyramid, (h, w))
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let x = tape.constant(image.clone());
        let d = self.forward(&ctx, x)?;
        Ok((*tape.value(d)).clone())
    }
}

impl Model<f64> {
    /// Central-difference check of `si_loss(forward(image), gt)` against
    /// the analytic gradient, for every trainable tensor.
    pub fn grad_check(
        &mut self,
        image: &Tensor<f64>,
        gt: &Tensor<f64>,
        valid: &[bool],
        lambda: f64,
        eps: f64,
    ) -> Result<Vec<(String, GradReport)>> {
        let this = self.clone();
        grad_check_params(
            &mut self.store,
            |ctx| {
                let x = ctx.tape.constant(image.clone());
                let d = this.forward(ctx, x)?;
                si_loss(ctx.tape, d, gt, valid, lambda)
            },
            eps,
            |_| true,
        )
    }
}
