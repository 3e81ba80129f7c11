//! Frozen ViT-style enhancer: patch embedding, learned positional
//! embeddings and a stack of pre-norm transformer layers split into four
//! contiguous blocks.
//!
//! Every tensor here is registered as frozen. Gradients still flow through
//! the blocks to their inputs, but no enhancer weight is ever tracked.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::substrate::{wtns, AttnMask, PadMode, Scalar, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhancerConfig {
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        Self {
            patch: 14,
            width: 64,
            heads: 4,
            layers: 8,
        }
    }
}

impl EnhancerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.width == 0 {
            return Err(Error::Config("enhancer patch and width must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "enhancer width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.layers < 4 {
            return Err(Error::Config(format!(
                "enhancer needs at least 4 layers to form 4 blocks, got {}",
                self.layers
            )));
        }
        Ok(())
    }

    /// Layer ranges of the four blocks: contiguous, in order, sizes
    /// differing by at most one (earlier blocks take the remainder).
    pub fn blocks(&self) -> [Range<usize>; 4] {
        let base = self.layers / 4;
        let extra = self.layers % 4;
        let mut start = 0;
        std::array::from_fn(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
    }
}

/// Which point of the enhancer a token stream comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Input to block `l` (1-based); `Level(5)` is the output of block 4.
    Level(u8),
    Final,
}

/// Image tokens (`M×D`) with the grid they were cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenStream {
    pub tokens: Var,
    pub grid: (usize, usize),
    pub stage: Stage,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
struct Layer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Layer {
    fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var, mask: Option<&AttnMask>) -> Result<Var> {
        let t = ctx.tape;
        let h = self.ln1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, h, h, mask)?;
        let x = t.add(x, a)?;
        let h = self.ln2.forward(ctx, x)?;
        let h = self.fc1.forward(ctx, h)?;
        let h = t.gelu(h)?;
        let h = self.fc2.forward(ctx, h)?;
        t.add(x, h)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WeightManifest {
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Enhancer {
    cfg: EnhancerConfig,
    grid: (usize, usize),
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    layers: Vec<Layer>,
    params: Vec<ParamId>,
}

impl Enhancer {
    /// Builds a randomly initialized, frozen surrogate for images of
    /// `resolution` (which fixes the positional-embedding grid).
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: EnhancerConfig,
        resolution: (usize, usize),
    ) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = resolution;
        if h % cfg.patch != 0 || w % cfg.patch != 0 {
            return Err(Error::Config(format!(
                "resolution {h}x{w} not divisible by patch {}",
                cfg.patch
            )));
        }
        let grid = (h / cfg.patch, w / cfg.patch);
        let first = store.len();
        let mut init = Init {
            store,
            rng,
            trainable: false,
        };
        let d = cfg.width;
        let p = cfg.patch;
        let patch_w = init.normal("enhancer.patch.weight", &[d, 3, p, p], 1.0 / ((3 * p * p) as f64).sqrt());
        let patch_b = init.normal("enhancer.patch.bias", &[d], 0.02);
        let pos = init.normal("enhancer.pos", &[d, grid.0, grid.1], 0.5);
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let n = format!("enhancer.layers.{i}");
            layers.push(Layer {
                ln1: LayerNorm::new(&mut init, &format!("{n}.ln1"), d),
                attn: MultiHeadAttention::self_attn(&mut init, &format!("{n}.attn"), d, cfg.heads)?,
                ln2: LayerNorm::new(&mut init, &format!("{n}.ln2"), d),
                fc1: Linear::new(&mut init, &format!("{n}.fc1"), d, 4 * d),
                fc2: Linear::new(&mut init, &format!("{n}.fc2"), 4 * d, d),
            });
        }
        let params = store.ids().skip(first).collect();
        Ok(Self {
            cfg,
            grid,
            patch_w,
            patch_b,
            pos,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &EnhancerConfig {
        &self.cfg
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    /// Stride-`p` patch projection to `M×D` tokens plus positional
    /// embeddings (resampled bilinearly if the grid differs from the one the
    /// embeddings were built for).
    pub fn patch_embed<T: Scalar>(&self, ctx: &Ctx<'_, T>, image: Var) -> Result<TokenStream> {
        let t = ctx.tape;
        let shape = t.shape(image);
        let p = self.cfg.patch;
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape("patch_embed", format!("expected 3×H×W image, got {shape:?}")));
        }
        if shape[1] % p != 0 || shape[2] % p != 0 {
            return Err(Error::Config(format!(
                "input size {}x{} must be divisible by patch {p}",
                shape[1], shape[2]
            )));
        }
        let grid = (shape[1] / p, shape[2] / p);
        let m = grid.0 * grid.1;
        let d = self.cfg.width;
        let x = t.conv2d(image, ctx.p(self.patch_w), p, 0, PadMode::Zero)?;
        let mut pos = ctx.p(self.pos);
        if grid != self.grid {
            pos = t.resize(pos, grid.0, grid.1)?;
        }
        let x = t.add(x, pos)?;
        let x = t.reshape(x, &[d, m])?;
        let x = t.transpose(x)?;
        let x = t.add_row_bias(x, ctx.p(self.patch_b))?;
        Ok(TokenStream {
            tokens: x,
            grid,
            stage: Stage::Level(1),
        })
    }

    /// Runs block `l` (1..=4) over the combined `(N+M)×D` sequence.
    pub fn run_block<T: Scalar>(&self, ctx: &Ctx<'_, T>, l: usize, combined: Var, mask: &AttnMask) -> Result<Var> {
        if !(1..=4).contains(&l) {
            return Err(Error::Usage(format!("block index {l} outside 1..=4")));
        }
        let shape = ctx.tape.shape(combined);
        if shape.len() != 2 || shape[1] != self.cfg.width {
            return Err(Error::Usage(format!(
                "block {l} expects rows of width {}, got {shape:?}",
                self.cfg.width
            )));
        }
        let mut x = combined;
        for layer in &self.layers[self.cfg.blocks()[l - 1].clone()] {
            x = layer.forward(ctx, x, Some(mask))?;
        }
        Ok(x)
    }

    /// One transformer layer, exposed for isolation tests.
    pub fn run_layer<T: Scalar>(&self, ctx: &Ctx<'_, T>, index: usize, x: Var, mask: &AttnMask) -> Result<Var> {
        let layer = self
            .layers
            .get(index)
            .ok_or_else(|| Error::Usage(format!("layer {index} out of {}", self.layers.len())))?;
        layer.forward(ctx, x, Some(mask))
    }

    /// The attention sublayer (with its pre-norm) of layer `index`.
    pub fn run_attention<T: Scalar>(&self, ctx: &Ctx<'_, T>, index: usize, x: Var, mask: &AttnMask) -> Result<Var> {
        let layer = self
            .layers
            .get(index)
            .ok_or_else(|| Error::Usage(format!("layer {index} out of {}", self.layers.len())))?;
        let h = layer.ln1.forward(ctx, x)?;
        layer.attn.forward(ctx, h, h, Some(mask))
    }

    /// Strips the leading `n_patterns` rows from the output of block 4.
    pub fn final_tokens<T: Scalar>(&self, ctx: &Ctx<'_, T>, after_block4: Var, n_patterns: usize, grid: (usize, usize), stage: Stage) -> Result<TokenStream> {
        if stage != Stage::Level(5) {
            return Err(Error::Usage(format!(
                "final tokens requested at {stage:?}; all four blocks must run first"
            )));
        }
        let rows = ctx.tape.shape(after_block4)[0];
        let m = grid.0 * grid.1;
        if rows != n_patterns + m {
            return Err(Error::Usage(format!(
                "expected {n_patterns} pattern + {m} image rows, got {rows}"
            )));
        }
        let tokens = if n_patterns == 0 {
            after_block4
        } else {
            ctx.tape.slice_rows(after_block4, n_patterns, rows)?
        };
        Ok(TokenStream {
            tokens,
            grid,
            stage: Stage::Final,
        })
    }

    pub fn manifest<T: Scalar>(&self, store: &ParamStore<T>) -> WeightManifest {
        WeightManifest {
            tensors: self
                .params
                .iter()
                .map(|&id| ManifestEntry {
                    name: store.name(id).to_string(),
                    shape: store.get(id).shape().to_vec(),
                })
                .collect(),
        }
    }

    /// Writes `manifest.json` plus one `<name>.wtns` per tensor.
    pub fn save_weights<T: Scalar>(&self, store: &ParamStore<T>, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest(store);
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        for &id in &self.params {
            wtns::write(&dir.join(format!("{}.wtns", store.name(id))), store.get(id))?;
        }
        Ok(())
    }

    /// Replaces the frozen weights from a directory written by
    /// [`Enhancer::save_weights`] (or any producer of the same layout).
    /// Nothing is modified unless every tensor validates.
    pub fn load_weights<T: Scalar>(&self, store: &mut ParamStore<T>, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: WeightManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let mut staged = Vec::with_capacity(self.params.len());
        for &id in &self.params {
            let name = store.name(id).to_string();
            let expect = store.get(id).shape().to_vec();
            let entry = manifest
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Load {
                    name: name.clone(),
                    detail: "missing from manifest".into(),
                })?;
            if entry.shape != expect {
                return Err(Error::Load {
                    name,
                    detail: format!("manifest shape {:?}, model expects {expect:?}", entry.shape),
                });
            }
            let file = dir.join(format!("{name}.wtns"));
            let t = wtns::read_as::<T>(&file).map_err(|e| Error::Load {
                name: name.clone(),
                detail: e.to_string(),
            })?;
            if t.shape() != expect.as_slice() {
                return Err(Error::Load {
                    name,
                    detail: format!("file shape {:?}, model expects {expect:?}", t.shape()),
                });
            }
            staged.push((id, t));
        }
        for (id, t) in staged {
            store.set(id, t)?;
        }
        Ok(())
    }
}
