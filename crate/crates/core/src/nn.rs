//! Named parameter storage and the small layer vocabulary (linear, layer
//! norm, multi-head attention) shared by every branch of the model.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::substrate::{rng, AttnMask, GradReport, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub trainable: bool,
}

/// Every parameter of a model, trainable or frozen, addressed by id or by
/// its dotted name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value: Arc::new(value),
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.params[id.0].trainable)
    }

    pub fn frozen(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| !self.params[id.0].trainable)
    }

    /// Names and mutable values of the trainable parameters, in id order.
    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> + '_ {
        self.params
            .iter_mut()
            .filter(|p| p.trainable)
            .map(|p| (p.name.as_str(), Arc::make_mut(&mut p.value)))
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.trainable().map(|id| self.get(id).numel()).sum()
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = self.get(id);
        if cur.shape() != value.shape() {
            return Err(Error::Load {
                name: self.name(id).to_string(),
                detail: format!("expected shape {:?}, got {:?}", cur.shape(), value.shape()),
            });
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    /// 64-bit digest over names, shapes and bytes of every frozen tensor,
    /// in registration order.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h = Sha256::new();
        for id in self.frozen() {
            let p = &self.params[id.0];
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(p.value.numel() * 8);
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
    }
}

/// Binds a [`ParamStore`] onto a [`Tape`] for one forward pass. Trainable
/// parameters become tracked leaves, frozen ones untracked constants.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    pub store: &'a ParamStore<T>,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let param = self.store.param(id);
        let v = self.tape.leaf(param.value.clone(), param.trainable);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients of the trainable parameters reached by backward passes.
    pub fn param_grads(&self) -> BTreeMap<ParamId, Tensor<T>> {
        let bound = self.bound.borrow();
        self.store
            .trainable()
            .filter_map(|id| {
                let v = bound[id.0]?;
                self.tape.grad(v).map(|g| (id, g))
            })
            .collect()
    }
}

/// Parameter construction helper carrying a name prefix, RNG and the
/// trainable flag for everything it creates.
pub struct Init<'s, T: Scalar, R: Rng> {
    pub store: &'s mut ParamStore<T>,
    pub rng: &'s mut R,
    pub trainable: bool,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = rng::normal(self.rng, shape, std);
        self.store.add(name, t, self.trainable)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::of(v)), self.trainable)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::scaled(init, name, d_in, d_out, 1.0)
    }

    /// Initialization shrunk by `gain`, for branches added onto a residual.
    pub fn scaled<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, d_in: usize, d_out: usize, gain: f64) -> Self {
        let w = init.normal(&format!("{name}.weight"), &[d_in, d_out], gain / (d_in as f64).sqrt());
        let b = init.normal(&format!("{name}.bias"), &[d_out], 0.02 * gain);
        Self { w, b, d_in, d_out }
    }

    /// `x·W + b` over the rows of `x` (`M×d_in`).
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = ctx.tape.matmul(x, ctx.p(self.w))?;
        ctx.tape.add_row_bias(y, ctx.p(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, d: usize) -> Self {
        let gamma = init.constant(&format!("{name}.gamma"), &[d], 1.0);
        let beta = init.constant(&format!("{name}.beta"), &[d], 0.0);
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        ctx.tape.layer_norm(x, ctx.p(self.gamma), ctx.p(self.beta))
    }
}

/// Multi-head attention with query/key/value/output projections. Queries
/// may come from a different sequence (and width) than keys and values.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// `d_q` and `d_kv` are the input widths; attention runs at width `d`.
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        d_q: usize,
        d_kv: usize,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        Self::with_output_gain(init, name, d_q, d_kv, d, heads, 1.0)
    }

    /// As [`MultiHeadAttention::new`] with the output projection shrunk by
    /// `gain`.
    pub fn with_output_gain<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        d_q: usize,
        d_kv: usize,
        d: usize,
        heads: usize,
        gain: f64,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(init, &format!("{name}.q"), d_q, d),
            k: Linear::new(init, &format!("{name}.k"), d_kv, d),
            v: Linear::new(init, &format!("{name}.v"), d_kv, d),
            o: Linear::scaled(init, &format!("{name}.o"), d, d, gain),
            heads,
        })
    }

    pub fn self_attn<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, d: usize, heads: usize) -> Result<Self> {
        Self::new(init, name, d, d, d, heads)
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, xq: Var, xkv: Var, mask: Option<&AttnMask>) -> Result<Var> {
        let q = self.q.forward(ctx, xq)?;
        let k = self.k.forward(ctx, xkv)?;
        let v = self.v.forward(ctx, xkv)?;
        let a = ctx.tape.attention(q, k, v, self.heads, mask)?;
        self.o.forward(ctx, a)
    }
}

/// Per-tensor gradient check over the trainable parameters of `store`.
///
/// `build` maps a bound context to a scalar loss. Each trainable element is
/// perturbed by `±eps` in turn; `filter` restricts which parameters are
/// visited.
pub fn grad_check_params<F>(
    store: &mut ParamStore<f64>,
    build: F,
    eps: f64,
    filter: impl Fn(&str) -> bool,
) -> Result<Vec<(String, GradReport)>>
where
    F: Fn(&Ctx<'_, f64>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Harness(format!("eps must be positive, got {eps}")));
    }
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let out = build(&ctx)?;
        Ok(tape.value(out).item())
    };
    let (base, analytic) = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let loss = build(&ctx)?;
        tape.backward(loss)?;
        (tape.value(loss).item(), ctx.param_grads())
    };
    let again = eval(store)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Harness(format!(
            "loss is not deterministic: {base:e} then {again:e}"
        )));
    }
    let ids: Vec<ParamId> = store.trainable().filter(|&id| filter(store.name(id))).collect();
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).numel();
        let a = analytic
            .get(&id)
            .map(|g| g.to_f64())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * eps);
        }
        reports.push((store.name(id).to_string(), GradReport::compare(&a, &numeric)));
    }
    Ok(reports)
}
