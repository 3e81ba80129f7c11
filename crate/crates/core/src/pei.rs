//! Partition, enhance and inject: pattern queries pull conditional patterns
//! out of each pyramid level, the frozen enhancer co-processes them with the
//! image tokens under a mask, and both token kinds are written back into the
//! pyramid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Pyramid;
use crate::enhancer::{Enhancer, Stage, TokenStream};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear, MultiHeadAttention, ParamId};
use crate::substrate::{AttnMask, Scalar, Var};

/// Initial scale of the two injection branches relative to a plain
/// projection, so training starts close to the un-injected pyramid.
pub const RESIDUAL_GAIN: f64 = 0.1;

/// Component switches. All on is the full mechanism; all off is the plain
/// encoder-decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub partition: bool,
    pub enhance: bool,
    pub inject_patterns: bool,
    pub inject_image: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

impl Toggles {
    pub const ALL: Self = Self::from_bits([true; 4]);
    pub const NONE: Self = Self::from_bits([false; 4]);

    /// The eight ablation rows as `(P, E, PT, IT)`, baseline first and the
    /// full mechanism last.
    pub const ABLATION_ROWS: [Self; 8] = [
        Self::from_bits([false, false, false, false]),
        Self::from_bits([false, true, true, false]),
        Self::from_bits([true, false, true, false]),
        Self::from_bits([false, true, false, true]),
        Self::from_bits([true, true, true, false]),
        Self::from_bits([true, true, false, true]),
        Self::from_bits([false, true, true, true]),
        Self::from_bits([true, true, true, true]),
    ];

    pub const fn from_bits(b: [bool; 4]) -> Self {
        Self {
            partition: b[0],
            enhance: b[1],
            inject_patterns: b[2],
            inject_image: b[3],
        }
    }

    pub fn bits(&self) -> [bool; 4] {
        [self.partition, self.enhance, self.inject_patterns, self.inject_image]
    }

    /// Whether the pyramid is touched at all.
    pub fn injects(&self) -> bool {
        self.inject_patterns || self.inject_image
    }

    /// Whether pattern tokens can reach the output.
    pub fn uses_patterns(&self) -> bool {
        self.inject_patterns || (self.enhance && self.inject_image)
    }
}

/// Attention mask over `N` pattern rows followed by `M` image rows. Image
/// rows see everything; a pattern row sees itself and every image token.
pub fn build_mask(n: usize, m: usize) -> Result<AttnMask> {
    if m == 0 {
        return Err(Error::Usage("attention mask needs at least one image token".into()));
    }
    let s = n + m;
    let mut allow = vec![true; s * s];
    for i in 0..n {
        for j in 0..n {
            allow[i * s + j] = i == j;
        }
    }
    AttnMask::new(s, s, allow)
}

/// Spatially flattened feature map: `C×H×W` to `(H·W)×C`.
fn to_rows<T: Scalar>(ctx: &Ctx<'_, T>, f: Var) -> Result<(Var, [usize; 3])> {
    let s = ctx.tape.shape(f);
    if s.len() != 3 {
        return Err(Error::Usage(format!("feature map must be C×H×W, got {s:?}")));
    }
    let flat = ctx.tape.reshape(f, &[s[0], s[1] * s[2]])?;
    Ok((ctx.tape.transpose(flat)?, [s[0], s[1], s[2]]))
}

fn from_rows<T: Scalar>(ctx: &Ctx<'_, T>, rows: Var, shape: [usize; 3]) -> Result<Var> {
    let t = ctx.tape.transpose(rows)?;
    ctx.tape.reshape(t, &shape)
}

#[derive(Clone, Debug)]
struct Partition {
    cross: MultiHeadAttention,
    self_attn: MultiHeadAttention,
    proj: Linear,
}

#[derive(Clone, Debug)]
struct PatternInjection {
    down: Linear,
    self_attn: MultiHeadAttention,
    cross: MultiHeadAttention,
}

#[derive(Clone, Debug)]
struct Level {
    channels: usize,
    identity: Option<ParamId>,
    partition: Option<Partition>,
    patterns: Option<PatternInjection>,
    image: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct Pei {
    toggles: Toggles,
    n: usize,
    width: usize,
    levels: Vec<Level>,
}

/// Per-level intermediate arrays of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct PatternTrace {
    pub queries: Vec<Var>,
    pub conditional: Vec<Var>,
    pub enhanced: Vec<Var>,
    pub final_tokens: Option<TokenStream>,
}

impl Pei {
    /// Only the sub-modules reachable under `toggles` are created, so every
    /// trainable parameter receives a gradient.
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        channels: [usize; 4],
        width: usize,
        heads: usize,
        n: usize,
        toggles: Toggles,
    ) -> Result<Self> {
        let patterns = toggles.injects() && toggles.uses_patterns();
        if patterns && n == 0 {
            return Err(Error::Config("pattern count must be positive".into()));
        }
        let mut levels = Vec::with_capacity(4);
        for (i, &c) in channels.iter().enumerate() {
            let name = format!("pei.level{}", i + 1);
            let identity = patterns.then(|| init.normal(&format!("{name}.identity"), &[n, width], 1.0));
            let partition = if patterns && toggles.partition {
                Some(Partition {
                    cross: MultiHeadAttention::new(init, &format!("{name}.partition.cross"), width, c, width, heads)?,
                    self_attn: MultiHeadAttention::self_attn(init, &format!("{name}.partition.self"), width, heads)?,
                    proj: Linear::new(init, &format!("{name}.partition.proj"), width, width),
                })
            } else {
                None
            };
            let pattern_inj = if toggles.inject_patterns {
                Some(PatternInjection {
                    down: Linear::new(init, &format!("{name}.inject.down"), width, c),
                    self_attn: MultiHeadAttention::self_attn(init, &format!("{name}.inject.self"), c, heads)?,
                    cross: MultiHeadAttention::with_output_gain(init, &format!("{name}.inject.cross"), c, c, c, heads, RESIDUAL_GAIN)?,
                })
            } else {
                None
            };
            let image = toggles
                .inject_image
                .then(|| Linear::scaled(init, &format!("{name}.inject.image"), width, c, RESIDUAL_GAIN));
            levels.push(Level {
                channels: c,
                identity,
                partition,
                patterns: pattern_inj,
                image,
            });
        }
        Ok(Self {
            toggles,
            n,
            width,
            levels,
        })
    }

    pub fn toggles(&self) -> Toggles {
        self.toggles
    }

    pub fn patterns(&self) -> usize {
        self.n
    }

    fn level(&self, l: usize) -> Result<&Level> {
        l.checked_sub(1)
            .and_then(|i| self.levels.get(i))
            .ok_or_else(|| Error::Usage(format!("level {l} outside 1..=4")))
    }

    /// `P = Linear(SelfAttn(CrossAttn(Pri, F)))`.
    pub fn partition<T: Scalar>(&self, ctx: &Ctx<'_, T>, l: usize, f: Var, pri: Var) -> Result<Var> {
        let level = self.level(l)?;
        let part = level
            .partition
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("partitioning is not built at level {l}")))?;
        let (rows, shape) = to_rows(ctx, f)?;
        if shape[0] != level.channels {
            return Err(Error::Usage(format!(
                "level {l} expects {} channels, got {}",
                level.channels, shape[0]
            )));
        }
        let x = part.cross.forward(ctx, pri, rows, None)?;
        let x = part.self_attn.forward(ctx, x, x, None)?;
        part.proj.forward(ctx, x)
    }

    /// Runs block `l` over `[P; T]` and splits the result.
    pub fn enhance<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        enhancer: &Enhancer,
        l: usize,
        p: Var,
        t: Var,
    ) -> Result<(Var, Var)> {
        let n = ctx.tape.shape(p)[0];
        let m = ctx.tape.shape(t)[0];
        let mask = build_mask(n, m)?;
        let combined = ctx.tape.concat_rows(&[p, t])?;
        let out = enhancer.run_block(ctx, l, combined, &mask)?;
        let p_bar = ctx.tape.slice_rows(out, 0, n)?;
        let t_next = ctx.tape.slice_rows(out, n, n + m)?;
        Ok((p_bar, t_next))
    }

    /// `Pri^{l+1} = P̄^l + I^{l+1}`.
    pub fn chain<T: Scalar>(&self, ctx: &Ctx<'_, T>, p_bar: Var, identity_next: Var) -> Result<Var> {
        let (a, b) = (ctx.tape.shape(p_bar), ctx.tape.shape(identity_next));
        if a != b {
            return Err(Error::Usage(format!("cannot chain patterns {a:?} with identity {b:?}")));
        }
        ctx.tape.add(p_bar, identity_next)
    }

    /// `F̄ = F + CrossAttn(F, SelfAttn(Linear(P̄)))`.
    pub fn inject_patterns<T: Scalar>(&self, ctx: &Ctx<'_, T>, l: usize, f: Var, p_bar: Var) -> Result<Var> {
        let inj = self
            .level(l)?
            .patterns
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("pattern injection is not built at level {l}")))?;
        let (rows, shape) = to_rows(ctx, f)?;
        let p = inj.down.forward(ctx, p_bar)?;
        let p = inj.self_attn.forward(ctx, p, p, None)?;
        let a = inj.cross.forward(ctx, rows, p, None)?;
        let a = from_rows(ctx, a, shape)?;
        ctx.tape.add(f, a)
    }

    /// `F̃ = Resize(Linear(T_f)) + F̄`.
    pub fn inject_image_tokens<T: Scalar>(&self, ctx: &Ctx<'_, T>, l: usize, f: Var, tokens: &TokenStream) -> Result<Var> {
        let proj = self
            .level(l)?
            .image
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("image-token injection is not built at level {l}")))?;
        if tokens.stage != Stage::Final {
            return Err(Error::Usage("image-token injection needs the final tokens".into()));
        }
        let shape = ctx.tape.shape(f);
        let rows = ctx.tape.shape(tokens.tokens)[0];
        if rows != tokens.len() {
            return Err(Error::Usage(format!(
                "token stream has {rows} rows but grid {:?}",
                tokens.grid
            )));
        }
        let x = proj.forward(ctx, tokens.tokens)?;
        let x = from_rows(ctx, x, [proj.d_out, tokens.grid.0, tokens.grid.1])?;
        let x = ctx.tape.resize(x, shape[1], shape[2])?;
        ctx.tape.add(f, x)
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, enhancer: &Enhancer, pyramid: &Pyramid, image: Var) -> Result<Pyramid> {
        Ok(self.forward_traced(ctx, enhancer, pyramid, image)?.0)
    }

    pub fn forward_traced<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        enhancer: &Enhancer,
        pyramid: &Pyramid,
        image: Var,
    ) -> Result<(Pyramid, PatternTrace)> {
        let tg = self.toggles;
        let mut trace = PatternTrace::default();
        if !tg.injects() {
            return Ok((*pyramid, trace));
        }
        if enhancer.config().width != self.width {
            return Err(Error::Usage(format!(
                "pattern width {} differs from enhancer width {}",
                self.width,
                enhancer.config().width
            )));
        }
        let patterns = tg.uses_patterns();
        let need_tokens = tg.inject_image || (tg.enhance && patterns);
        let mut tokens = if need_tokens {
            Some(enhancer.patch_embed(ctx, image)?)
        } else {
            None
        };
        let mut p_bar: Option<Var> = None;
        for l in 1..=4 {
            let level = self.level(l)?;
            let p = if patterns {
                let id = ctx.p(level.identity.expect("identity built with patterns"));
                let pri = match p_bar {
                    Some(prev) => self.chain(ctx, prev, id)?,
                    None => id,
                };
                trace.queries.push(pri);
                let p = if tg.partition {
                    self.partition(ctx, l, pyramid.levels[l - 1], pri)?
                } else {
                    pri
                };
                trace.conditional.push(p);
                Some(p)
            } else {
                None
            };
            if let Some(ts) = tokens.as_mut() {
                if tg.enhance {
                    match p {
                        Some(p) => {
                            let (pb, t) = self.enhance(ctx, enhancer, l, p, ts.tokens)?;
                            p_bar = Some(pb);
                            ts.tokens = t;
                        }
                        None => {
                            let mask = AttnMask::all(ts.len(), ts.len());
                            ts.tokens = enhancer.run_block(ctx, l, ts.tokens, &mask)?;
                        }
                    }
                } else {
                    p_bar = p;
                }
                ts.stage = Stage::Level(l as u8 + 1);
            } else {
                p_bar = p;
            }
            if let Some(pb) = p_bar {
                trace.enhanced.push(pb);
            }
        }
        let final_tokens = match tokens {
            Some(ts) => Some(enhancer.final_tokens(ctx, ts.tokens, 0, ts.grid, ts.stage)?),
            None => None,
        };
        trace.final_tokens = final_tokens;
        let mut out = pyramid.levels;
        for l in 1..=4 {
            let mut f = pyramid.levels[l - 1];
            if tg.inject_patterns {
                f = self.inject_patterns(ctx, l, f, trace.enhanced[l - 1])?;
            }
            if tg.inject_image {
                f = self.inject_image_tokens(ctx, l, f, final_tokens.as_ref().expect("tokens computed"))?;
            }
            out[l - 1] = f;
        }
        Ok((Pyramid { levels: out }, trace))
    }
}
