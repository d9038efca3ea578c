//! Composite building blocks: convolution units, Inception-R, recurrent
//! residual skip refinement (R2-Jump) and the SCSE-Lite attention block.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Result};
use crate::params::{ParamBuilder, ParamId, ParamKind, ParamStore};
use crate::tape::{Activation, BatchStats, BnMode, Mode, Tape, Var};
use crate::tensor::{Dims, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// A pending running-statistics update produced by a training-mode pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats<T>,
}

/// State of one forward pass: the tape, the parameter bindings and the
/// dropout stream. The parameter store is only read.
pub struct Forward<'a, T: Real> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    rng: ChaCha8Rng,
    bound: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bound: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// The tape variable for a parameter. Each parameter is bound once per
    /// pass, so every use shares one gradient slot.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.tape.param_leaf(id.index(), self.store.tensor(id).clone());
        self.bound.insert(id, v);
        v
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.leaf(t)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let mode = self.mode;
        self.tape.dropout(x, rate, &mut self.rng, mode)
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    /// Writes the collected running-statistics updates into `store`.
    pub fn commit_bn_updates(updates: &[BnUpdate<T>], store: &mut ParamStore<T>) {
        for u in updates {
            store.update_running_stats(u.running_mean, u.running_var, &u.stats, BN_MOMENTUM);
        }
    }

    pub fn into_parts(self) -> (Tape<T>, Vec<BnUpdate<T>>) {
        (self.tape, self.bn_updates)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv {
    /// Odd square kernel with "same" zero padding.
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, ci: usize, co: usize, k: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(invalid!("conv `{name}`: kernel {k} must be odd"));
        }
        b.scoped(name, |b| {
            let weight = b.he_normal("weight", Dims::new(co, ci, k, k), ci * k * k)?;
            let bias = b.constant("bias", co, 0.0, ParamKind::Trainable)?;
            Ok(Self { weight, bias, in_channels: ci, out_channels: co, kernel: k })
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        f.tape.conv2d(x, w, Some(b), 1, (self.kernel - 1) / 2)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// 2x2/stride-2 transposed convolution used for decoder upsampling.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, ci: usize, co: usize) -> Result<Self> {
        b.scoped(name, |b| {
            let weight = b.he_normal("weight", Dims::new(ci, co, 2, 2), ci)?;
            let bias = b.constant("bias", co, 0.0, ParamKind::Trainable)?;
            Ok(Self { weight, bias })
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        f.tape.conv_transpose2d(x, w, Some(b), 2)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                gamma: b.constant("gamma", c, 1.0, ParamKind::Trainable)?,
                beta: b.constant("beta", c, 0.0, ParamKind::Trainable)?,
                running_mean: b.constant("running_mean", c, 0.0, ParamKind::Buffer)?,
                running_var: b.constant("running_var", c, 1.0, ParamKind::Buffer)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        match f.mode {
            Mode::Train => {
                let (y, stats) = f.tape.batch_norm(x, gamma, beta, BnMode::Train, BN_EPS)?;
                if let Some(stats) = stats {
                    f.bn_updates.push(BnUpdate {
                        running_mean: self.running_mean,
                        running_var: self.running_var,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = f.store;
                let mode = BnMode::Eval {
                    mean: store.tensor(self.running_mean).data(),
                    var: store.tensor(self.running_var).data(),
                };
                Ok(f.tape.batch_norm(x, gamma, beta, mode, BN_EPS)?.0)
            }
        }
    }
}

/// Convolution, batch normalization and an optional activation.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub act: Option<Activation>,
}

impl ConvUnit {
    pub fn build<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        act: Option<Activation>,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self { conv: Conv::build(b, "conv", ci, co, k)?, bn: BatchNorm::build(b, "bn", co)?, act })
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        Ok(match self.act {
            Some(a) => f.tape.activation(y, a),
            None => y,
        })
    }
}

/// Three parallel stacks of 3x3 units (depths 1, 2, 3), concatenated and
/// fused by a 1x1 unit, plus a residual path.
#[derive(Clone, Debug)]
pub struct InceptionR {
    pub branches: [Vec<ConvUnit>; 3],
    pub fuse: ConvUnit,
    /// 1x1 projection on the residual path when the channel count changes.
    pub proj: Option<Conv>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl InceptionR {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, ci: usize, co: usize) -> Result<Self> {
        let act = Some(Activation::LeakyRelu);
        b.scoped(name, |b| {
            let mut branches: [Vec<ConvUnit>; 3] = Default::default();
            for (bi, branch) in branches.iter_mut().enumerate() {
                b.scoped(format!("b{}", bi + 1), |b| {
                    for depth in 0..=bi {
                        let cin = if depth == 0 { ci } else { co };
                        branch.push(ConvUnit::build(b, &depth.to_string(), cin, co, 3, act)?);
                    }
                    Ok(())
                })?;
            }
            let fuse = ConvUnit::build(b, "fuse", 3 * co, co, 1, None)?;
            let proj = if ci != co { Some(Conv::build(b, "proj", ci, co, 1)?) } else { None };
            Ok(Self { branches, fuse, proj, in_channels: ci, out_channels: co })
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let c = f.tape.dims(x).c;
        if c != self.in_channels {
            return Err(shape_err!("inception_r: expected {} input channels, got {c}", self.in_channels));
        }
        let mut outs = Vec::with_capacity(3);
        for branch in &self.branches {
            let mut y = x;
            for unit in branch {
                y = unit.forward(f, y)?;
            }
            outs.push(y);
        }
        let cat = f.tape.concat_channels(&outs)?;
        let z = self.fuse.forward(f, cat)?;
        let residual = match &self.proj {
            Some(p) => p.forward(f, x)?,
            None => x,
        };
        f.tape.add(z, residual)
    }
}

/// Two stacked 3x3 units: the plain replacement used when Inception-R is
/// ablated.
#[derive(Clone, Debug)]
pub struct PlainBlock {
    pub units: [ConvUnit; 2],
}

impl PlainBlock {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, ci: usize, co: usize) -> Result<Self> {
        let act = Some(Activation::LeakyRelu);
        b.scoped(name, |b| {
            Ok(Self { units: [ConvUnit::build(b, "0", ci, co, 3, act)?, ConvUnit::build(b, "1", co, co, 3, act)?] })
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.units[0].forward(f, x)?;
        self.units[1].forward(f, y)
    }
}

#[derive(Clone, Debug)]
pub enum FeatureBlock {
    Inception(InceptionR),
    Plain(PlainBlock),
}

impl FeatureBlock {
    pub fn build<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        ci: usize,
        co: usize,
        inception: bool,
    ) -> Result<Self> {
        Ok(if inception {
            FeatureBlock::Inception(InceptionR::build(b, name, ci, co)?)
        } else {
            FeatureBlock::Plain(PlainBlock::build(b, name, ci, co)?)
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        match self {
            FeatureBlock::Inception(b) => b.forward(f, x),
            FeatureBlock::Plain(b) => b.forward(f, x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseMode {
    Concat,
    Add,
}

/// Recurrent residual refinement of an encoder feature map:
/// `F0 = E`, `Ft = relu(Wr * F(t-1) + E)`, output `F(T) + Ws * E`.
/// `Wr` is shared across all steps.
#[derive(Clone, Debug)]
pub struct R2Jump {
    pub recur: Conv,
    pub proj: Conv,
    pub steps: usize,
}

impl R2Jump {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, c: usize, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(invalid!("r2jump `{name}`: recurrence steps must be >= 1"));
        }
        b.scoped(name, |b| {
            Ok(Self { recur: Conv::build(b, "recur", c, c, 3)?, proj: Conv::build(b, "proj", c, c, 1)?, steps })
        })
    }

    pub fn refine<T: Real>(&self, f: &mut Forward<'_, T>, e: Var) -> Result<Var> {
        let mut state = e;
        for _ in 0..self.steps {
            let r = self.recur.forward(f, state)?;
            let pre = f.tape.add(r, e)?;
            state = f.tape.activation(pre, Activation::Relu);
        }
        let projected = self.proj.forward(f, e)?;
        f.tape.add(state, projected)
    }
}

/// Merges a refined encoder map with the decoder map at the same level.
pub fn r2jump_fuse<T: Real>(tape: &mut Tape<T>, encoder: Var, decoder: Var, mode: FuseMode) -> Result<Var> {
    let (de, dd) = (tape.dims(encoder), tape.dims(decoder));
    if de.n != dd.n || de.h != dd.h || de.w != dd.w {
        return Err(shape_err!("r2jump_fuse: spatial mismatch {de} vs {dd}"));
    }
    match mode {
        FuseMode::Concat => tape.concat_channels(&[encoder, decoder]),
        FuseMode::Add => {
            if de.c != dd.c {
                return Err(shape_err!("r2jump_fuse: add mode needs equal channels, {de} vs {dd}"));
            }
            tape.add(encoder, decoder)
        }
    }
}

/// Parallel channel and spatial gating whose outputs are summed.
#[derive(Clone, Debug)]
pub struct ScseLite {
    pub reduce: Conv,
    pub expand: Conv,
    pub spatial: Conv,
    pub channels: usize,
}

impl ScseLite {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        if c % 2 != 0 || c == 0 {
            return Err(invalid!("scse_lite `{name}`: channel count {c} must be even"));
        }
        b.scoped(name, |b| {
            Ok(Self {
                reduce: Conv::build(b, "reduce", c, c / 2, 1)?,
                expand: Conv::build(b, "expand", c / 2, c, 1)?,
                spatial: Conv::build(b, "spatial", c, 1, 1)?,
                channels: c,
            })
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let c = f.tape.dims(x).c;
        if c != self.channels {
            return Err(shape_err!("scse_lite: expected {} channels, got {c}", self.channels));
        }
        let v = f.tape.global_avg_pool(x)?;
        let h = self.reduce.forward(f, v)?;
        let h = f.tape.activation(h, Activation::Relu);
        let s = self.expand.forward(f, h)?;
        let s = f.tape.activation(s, Activation::Sigmoid);
        let u_cse = f.tape.scale_channels(x, s)?;
        let q = self.spatial.forward(f, x)?;
        let q = f.tape.activation(q, Activation::Sigmoid);
        let u_sse = f.tape.scale_spatial(x, q)?;
        f.tape.add(u_cse, u_sse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with<B, R>(seed: u64, build: B) -> (ParamStore<f64>, R)
    where
        B: FnOnce(&mut ParamBuilder<'_, f64>) -> Result<R>,
    {
        let mut store = ParamStore::new();
        let block = build(&mut ParamBuilder::new(&mut store, seed)).unwrap();
        (store, block)
    }

    fn fill(store: &mut ParamStore<f64>, ids: &[ParamId], value: f64) {
        for &id in ids {
            store.get_mut(id).tensor.data_mut().fill(value);
        }
    }

    fn ramp(d: Dims) -> Tensor<f64> {
        Tensor::from_fn(d, |n, c, y, x| ((n * 7 + c * 5 + y * 3 + x) as f64 * 0.37).sin())
    }

    #[test]
    fn zero_branches_give_pure_residual() {
        let (mut store, block) = store_with(1, |b| InceptionR::build(b, "inc", 4, 4));
        let mut ids = Vec::new();
        for unit in block.branches.iter().flatten().chain(std::iter::once(&block.fuse)) {
            ids.extend(unit.conv.param_ids());
        }
        fill(&mut store, &ids, 0.0);
        let x = ramp(Dims::new(1, 4, 6, 6));
        for mode in [Mode::Train, Mode::Eval] {
            let mut f = Forward::new(&store, mode, 0);
            let xv = f.input(x.clone());
            let y = block.forward(&mut f, xv).unwrap();
            assert_eq!(f.tape.value(y).data(), x.data());
        }
    }

    #[test]
    fn projection_used_when_widths_differ() {
        let (store, block) = store_with(2, |b| InceptionR::build(b, "inc", 8, 16));
        assert!(block.proj.is_some());
        let mut f = Forward::new(&store, Mode::Train, 0);
        let xv = f.input(ramp(Dims::new(1, 8, 4, 4)));
        let y = block.forward(&mut f, xv).unwrap();
        assert_eq!(f.tape.dims(y), Dims::new(1, 16, 4, 4));
        let mut f = Forward::new(&store, Mode::Train, 0);
        let bad = f.input(ramp(Dims::new(1, 4, 4, 4)));
        assert!(block.forward(&mut f, bad).is_err());
    }

    #[test]
    fn r2jump_degenerate_closed_forms() {
        let (mut store, block) = store_with(3, |b| R2Jump::build(b, "skip", 3, 1));
        fill(&mut store, &block.recur.param_ids(), 0.0);
        fill(&mut store, &block.proj.param_ids(), 0.0);
        let e = ramp(Dims::new(1, 3, 4, 4));
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let ev = f.input(e.clone());
        let y = block.refine(&mut f, ev).unwrap();
        let relu = e.map(|v| v.max(0.0));
        assert_eq!(f.tape.value(y).data(), relu.data());

        for steps in [1, 2, 5] {
            let (mut store, block) = store_with(3, |b| R2Jump::build(b, "skip", 3, steps));
            fill(&mut store, &block.recur.param_ids(), 0.0);
            fill(&mut store, &[block.proj.bias], 0.0);
            let w = &mut store.get_mut(block.proj.weight).tensor;
            for co in 0..3 {
                for ci in 0..3 {
                    w.set(co, ci, 0, 0, if co == ci { 1.0 } else { 0.0 });
                }
            }
            let mut f = Forward::new(&store, Mode::Eval, 0);
            let ev = f.input(e.clone());
            let y = block.refine(&mut f, ev).unwrap();
            for (got, &v) in f.tape.value(y).data().iter().zip(e.data()) {
                assert!((got - (v.max(0.0) + v)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn r2jump_reuses_recurrent_kernel() {
        for steps in [1, 3, 4] {
            let (store, block) = store_with(4, |b| R2Jump::build(b, "skip", 2, steps));
            let mut f = Forward::new(&store, Mode::Eval, 0);
            let ev = f.input(ramp(Dims::new(1, 2, 4, 4)));
            block.refine(&mut f, ev).unwrap();
            let wr = f.bound_var(block.recur.weight).unwrap();
            assert_eq!(f.tape.consumers(wr), steps);
            assert_eq!(store.count_trainable(), 2 * 2 * 9 + 2 + 2 * 2 + 2);
        }
        let mut store = ParamStore::<f64>::new();
        assert!(R2Jump::build(&mut ParamBuilder::new(&mut store, 0), "skip", 2, 0).is_err());
    }

    #[test]
    fn fuse_modes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(ramp(Dims::new(1, 4, 3, 3)));
        let z = tape.leaf(Tensor::zeros(Dims::new(1, 4, 3, 3)));
        let added = r2jump_fuse(&mut tape, a, z, FuseMode::Add).unwrap();
        assert_eq!(tape.value(added).data(), tape.value(a).data());
        let cat = r2jump_fuse(&mut tape, a, z, FuseMode::Concat).unwrap();
        assert_eq!(tape.dims(cat), Dims::new(1, 8, 3, 3));
        let narrow = tape.leaf(Tensor::zeros(Dims::new(1, 2, 3, 3)));
        assert!(r2jump_fuse(&mut tape, a, narrow, FuseMode::Add).is_err());
        assert!(r2jump_fuse(&mut tape, a, narrow, FuseMode::Concat).is_ok());
    }

    #[test]
    fn scse_zero_weights_is_identity() {
        let (mut store, block) = store_with(5, |b| ScseLite::build(b, "att", 4));
        let ids: Vec<ParamId> = store.trainable().map(|(id, _)| id).collect();
        fill(&mut store, &ids, 0.0);
        let x = ramp(Dims::new(1, 4, 5, 5));
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let xv = f.input(x.clone());
        let y = block.forward(&mut f, xv).unwrap();
        for (got, &v) in f.tape.value(y).data().iter().zip(x.data()) {
            assert!((got - v).abs() < 1e-12);
        }
    }

    #[test]
    fn scse_saturated_gates_double_input() {
        let (mut store, block) = store_with(6, |b| ScseLite::build(b, "att", 4));
        store.get_mut(block.expand.bias).tensor.data_mut().fill(40.0);
        store.get_mut(block.spatial.bias).tensor.data_mut().fill(40.0);
        fill(&mut store, &[block.expand.weight, block.spatial.weight], 0.0);
        let x = ramp(Dims::new(1, 4, 5, 5));
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let xv = f.input(x.clone());
        let y = block.forward(&mut f, xv).unwrap();
        for (got, &v) in f.tape.value(y).data().iter().zip(x.data()) {
            assert!((got - 2.0 * v).abs() <= 1e-3 * v.abs().max(1.0));
        }
    }

    #[test]
    fn scse_output_bounded_and_odd_channels_rejected() {
        let (store, block) = store_with(7, |b| ScseLite::build(b, "att", 6));
        let x = ramp(Dims::new(1, 6, 4, 4));
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let xv = f.input(x.clone());
        let y = block.forward(&mut f, xv).unwrap();
        for (got, &v) in f.tape.value(y).data().iter().zip(x.data()) {
            assert!(got.abs() <= 2.0 * v.abs() + 1e-12);
        }
        let mut store = ParamStore::<f64>::new();
        assert!(ScseLite::build(&mut ParamBuilder::new(&mut store, 0), "att", 5).is_err());
    }
}
