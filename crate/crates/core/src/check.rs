//! Finite-difference verification of every block and of the full cascade.
//!
//! Analytic gradients are taken at the requested precision; central
//! differences always run on a 64-bit copy of the same program.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blocks::{Forward, InceptionR, R2Jump, ScseLite};
use crate::error::Result;
use crate::gradcheck::{check_tape_program, finite_diff_check, sample_coords, CheckConfig, CheckReport, Precision, TapeOps};
use crate::loss::{total_loss, LossWeights};
use crate::model::{Model, ModelConfig, SubNet};
use crate::params::{ParamBuilder, ParamKind, ParamStore};
use crate::tape::{Activation, Mode, OpKind, Tape, Var};
use crate::tensor::{Dims, Real, Tensor};

/// A scalar program whose inputs are the trainable entries of a store.
pub trait ParamProgram {
    fn run<T: Real>(&self, f: &mut Forward<'_, T>) -> Result<Var>;
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub precision: Precision,
    /// Coordinates sampled per check.
    pub samples: usize,
    pub seed: u64,
    pub eps: f64,
    pub block_tol: f64,
    pub end_to_end_tol: f64,
    /// Floor on the relative-error denominator, as a fraction of the largest
    /// analytic gradient magnitude.
    pub atol_rel: f64,
    pub corrupt: Option<(OpKind, f64)>,
}

impl CheckOptions {
    pub fn new(precision: Precision) -> Self {
        let (block_tol, end_to_end_tol, atol_rel) = match precision {
            Precision::F32 => (1e-3, 1e-2, 1e-3),
            Precision::F64 => (1e-6, 1e-4, 1e-4),
        };
        Self { precision, samples: 50, seed: 0, eps: 1e-5, block_tol, end_to_end_tol, atol_rel, corrupt: None }
    }

    fn config(&self, tol: f64) -> CheckConfig {
        CheckConfig { eps: self.eps, tol, atol: f64::MIN_POSITIVE, atol_rel: self.atol_rel, corrupt: self.corrupt }
    }
}

#[derive(Clone, Debug)]
pub struct NamedCheck {
    pub name: String,
    pub report: CheckReport,
}

impl NamedCheck {
    pub fn summary(&self) -> String {
        format!(
            "{} {:<22} max_rel_err={:.3e} tol={:.0e} coords={}",
            if self.report.passed { "PASS" } else { "FAIL" },
            self.name,
            self.report.max_rel_err,
            self.report.tol,
            self.report.entries.len()
        )
    }
}

/// Gradient check of `prog` with respect to every trainable entry of `store`.
pub fn check_param_program<P: ParamProgram>(
    prog: &P,
    store: &ParamStore<f64>,
    mode: Mode,
    precision: Precision,
    max_coords: usize,
    seed: u64,
    cfg: CheckConfig,
) -> Result<CheckReport> {
    let analytic = match precision {
        Precision::F32 => param_grads::<f32, P>(prog, &store.cast(), mode, seed, cfg.corrupt)?,
        Precision::F64 => param_grads::<f64, P>(prog, store, mode, seed, cfg.corrupt)?,
    };
    let flat = store.flat_trainable();
    let coords = sample_coords(flat.len(), max_coords, seed);
    let mut work = store.clone();
    let eval = |p: &[f64]| -> Result<f64> {
        work.set_flat_trainable(p)?;
        let mut f = Forward::new(&work, mode, seed);
        let out = prog.run(&mut f)?;
        Ok(f.tape.value(out).data()[0])
    };
    finite_diff_check(eval, &flat, &analytic, &coords, cfg)
}

fn param_grads<T: Real, P: ParamProgram>(
    prog: &P,
    store: &ParamStore<T>,
    mode: Mode,
    seed: u64,
    corrupt: Option<(OpKind, f64)>,
) -> Result<Vec<f64>> {
    let mut f = Forward::new(store, mode, seed);
    if let Some((kind, factor)) = corrupt {
        f.tape.corrupt_backward(kind, factor);
    }
    let out = prog.run(&mut f)?;
    let grads = f.tape.backward(out)?;
    let mut by_index: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (i, g) in grads.params() {
        by_index[i] = Some(g.iter().map(|v| v.as_f64()).collect());
    }
    Ok(store
        .trainable()
        .flat_map(|(id, p)| by_index[id.index()].take().unwrap_or_else(|| vec![0.0; p.tensor.numel()]))
        .collect())
}

pub fn random_tensor(dims: Dims, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_, _, _, _| StandardNormal.sample(&mut rng))
}

/// `sum(y * r)` for a fixed random `r`: a scalar whose gradient reaches every
/// output element with a distinct weight.
fn project_ops(t: &mut dyn TapeOps, y: Var, dims: Dims, seed: u64) -> Result<Var> {
    let r = t.constant(&random_tensor(dims, seed));
    let prod = t.mul(y, r)?;
    Ok(t.sum(prod))
}

fn project<T: Real>(tape: &mut Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let r = tape.leaf(random_tensor(tape.dims(y), seed).cast());
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}

type OpsProgram = Box<dyn Fn(&mut dyn TapeOps, &[Var]) -> Result<Var>>;

fn primitive_programs() -> Vec<(&'static str, Vec<Dims>, OpsProgram)> {
    let d = Dims::new;
    vec![
        (
            "conv2d",
            vec![d(2, 3, 6, 5), d(4, 3, 3, 3), d(1, 1, 1, 4)],
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                project_ops(t, y, d(2, 4, 6, 5), 11)
            }),
        ),
        (
            "conv2d_stride2",
            vec![d(1, 2, 7, 6), d(3, 2, 3, 3)],
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], None, 2, 1)?;
                project_ops(t, y, d(1, 3, 4, 3), 12)
            }),
        ),
        (
            "conv_transpose2d",
            vec![d(1, 3, 3, 4), d(3, 2, 2, 2), d(1, 1, 1, 2)],
            Box::new(move |t, v| {
                let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2)?;
                project_ops(t, y, d(1, 2, 6, 8), 13)
            }),
        ),
        (
            "maxpool2x2",
            vec![d(2, 2, 6, 6)],
            Box::new(move |t, v| {
                let y = t.maxpool2x2(v[0])?;
                project_ops(t, y, d(2, 2, 3, 3), 14)
            }),
        ),
        (
            "batch_norm",
            vec![d(2, 3, 4, 4), d(1, 1, 1, 3), d(1, 1, 1, 3)],
            Box::new(move |t, v| {
                let y = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                project_ops(t, y, d(2, 3, 4, 4), 15)
            }),
        ),
        (
            "relu",
            vec![d(1, 2, 4, 4)],
            Box::new(move |t, v| {
                let y = t.activation(v[0], Activation::Relu);
                project_ops(t, y, d(1, 2, 4, 4), 16)
            }),
        ),
        (
            "leaky_relu",
            vec![d(1, 2, 4, 4)],
            Box::new(move |t, v| {
                let y = t.activation(v[0], Activation::LeakyRelu);
                project_ops(t, y, d(1, 2, 4, 4), 17)
            }),
        ),
        (
            "sigmoid",
            vec![d(1, 2, 4, 4)],
            Box::new(move |t, v| {
                let y = t.activation(v[0], Activation::Sigmoid);
                project_ops(t, y, d(1, 2, 4, 4), 18)
            }),
        ),
        (
            "upsample_bilinear",
            vec![d(1, 2, 3, 3)],
            Box::new(move |t, v| {
                let y = t.upsample_bilinear(v[0], 4)?;
                project_ops(t, y, d(1, 2, 12, 12), 19)
            }),
        ),
        (
            "dropout",
            vec![d(1, 2, 4, 4)],
            Box::new(move |t, v| {
                let y = t.dropout_seeded(v[0], 0.2, 5)?;
                project_ops(t, y, d(1, 2, 4, 4), 20)
            }),
        ),
        (
            "bce",
            vec![d(1, 1, 5, 5)],
            Box::new(move |t, v| {
                let p = t.activation(v[0], Activation::Sigmoid);
                t.bce(p, &target_mask(25))
            }),
        ),
        (
            "dice",
            vec![d(1, 1, 5, 5)],
            Box::new(move |t, v| {
                let p = t.activation(v[0], Activation::Sigmoid);
                t.dice(p, &target_mask(25), 1e-6)
            }),
        ),
    ]
}

fn target_mask(n: usize) -> Vec<f64> {
    (0..n).map(|i| if (i * 7) % 5 < 2 { 1.0 } else { 0.0 }).collect()
}

struct BlockProgram<B> {
    block: B,
    input: Tensor<f64>,
}

macro_rules! block_program {
    ($ty:ty, $method:ident) => {
        impl ParamProgram for BlockProgram<$ty> {
            fn run<T: Real>(&self, f: &mut Forward<'_, T>) -> Result<Var> {
                let x = f.input(self.input.cast());
                let y = self.block.$method(f, x)?;
                project(&mut f.tape, y, 31)
            }
        }
    };
}

block_program!(InceptionR, forward);
block_program!(R2Jump, refine);
block_program!(ScseLite, forward);

struct TotalLossProgram {
    coarse: crate::params::ParamId,
    fine: crate::params::ParamId,
    target: Vec<f64>,
}

impl ParamProgram for TotalLossProgram {
    fn run<T: Real>(&self, f: &mut Forward<'_, T>) -> Result<Var> {
        let c = f.param(self.coarse);
        let fi = f.param(self.fine);
        let pc = f.tape.activation(c, Activation::Sigmoid);
        let pf = f.tape.activation(fi, Activation::Sigmoid);
        let target: Vec<T> = self.target.iter().map(|&v| T::lit(v)).collect();
        total_loss(&mut f.tape, pc, pf, &target, LossWeights::default())
    }
}

/// Randomises every trainable entry so no gradient sits at a symmetric point
/// (zero biases, unit BN scales).
fn perturb(store: &mut ParamStore<f64>, seed: u64, scale: f64) -> Result<()> {
    let flat = store.flat_trainable();
    let noise = random_tensor(Dims::new(1, 1, 1, flat.len()), seed);
    let p: Vec<f64> = flat.iter().zip(noise.data()).map(|(v, n)| v + scale * n).collect();
    store.set_flat_trainable(&p)
}

fn block_store<R>(seed: u64, build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<R>) -> Result<(ParamStore<f64>, R)> {
    let mut store = ParamStore::new();
    let block = build(&mut ParamBuilder::new(&mut store, seed))?;
    perturb(&mut store, seed ^ 0x5eed, 0.1)?;
    Ok((store, block))
}

/// Primitive ops, composite blocks and the loss terms.
pub fn block_checks(opts: &CheckOptions) -> Result<Vec<NamedCheck>> {
    let cfg = opts.config(opts.block_tol);
    let mut out = Vec::new();
    for (k, (name, dims, prog)) in primitive_programs().into_iter().enumerate() {
        let inputs: Vec<Tensor<f64>> =
            dims.iter().enumerate().map(|(i, &d)| random_tensor(d, opts.seed + 100 * k as u64 + i as u64)).collect();
        let report = check_tape_program(prog, &inputs, opts.precision, opts.samples, opts.seed, cfg)?;
        out.push(NamedCheck { name: name.to_string(), report });
    }

    let input = random_tensor(Dims::new(1, 3, 8, 8), opts.seed + 1);
    let (store, block) = block_store(opts.seed + 2, |b| InceptionR::build(b, "inception", 3, 4))?;
    let prog = BlockProgram { block, input };
    let report = check_param_program(&prog, &store, Mode::Train, opts.precision, opts.samples, opts.seed, cfg)?;
    out.push(NamedCheck { name: "inception_r".into(), report });

    let input = random_tensor(Dims::new(1, 4, 6, 6), opts.seed + 3);
    let (store, block) = block_store(opts.seed + 4, |b| R2Jump::build(b, "r2jump", 4, 3))?;
    let prog = BlockProgram { block, input };
    let report = check_param_program(&prog, &store, Mode::Train, opts.precision, opts.samples, opts.seed, cfg)?;
    out.push(NamedCheck { name: "r2jump".into(), report });

    let input = random_tensor(Dims::new(1, 4, 5, 5), opts.seed + 5);
    let (store, block) = block_store(opts.seed + 6, |b| ScseLite::build(b, "scse", 4))?;
    let prog = BlockProgram { block, input };
    let report = check_param_program(&prog, &store, Mode::Train, opts.precision, opts.samples, opts.seed, cfg)?;
    out.push(NamedCheck { name: "scse_lite".into(), report });

    let mut store = ParamStore::new();
    let (coarse, fine) = {
        let mut b = ParamBuilder::new(&mut store, 0);
        (
            b.constant("coarse_logits", 36, 0.0, ParamKind::Trainable)?,
            b.constant("fine_logits", 36, 0.0, ParamKind::Trainable)?,
        )
    };
    perturb(&mut store, opts.seed + 7, 1.0)?;
    let prog = TotalLossProgram { coarse, fine, target: target_mask(36) };
    let report = check_param_program(&prog, &store, Mode::Train, opts.precision, opts.samples, opts.seed, cfg)?;
    out.push(NamedCheck { name: "total_loss".into(), report });
    Ok(out)
}

struct CascadeProgram {
    config: ModelConfig,
    coarse: SubNet,
    fine: SubNet,
    image: Tensor<f64>,
    target: Vec<f64>,
}

impl ParamProgram for CascadeProgram {
    fn run<T: Real>(&self, f: &mut Forward<'_, T>) -> Result<Var> {
        // Subnets only hold parameter ids and the pass reads parameters
        // through `f`, so an empty store serves any precision.
        let model = Model::<T> {
            config: self.config.clone(),
            store: ParamStore::new(),
            coarse: self.coarse.clone(),
            fine: self.fine.clone(),
        };
        let x = f.input(self.image.cast());
        let out = model.cascade_forward(f, x)?;
        let target: Vec<T> = self.target.iter().map(|&v| T::lit(v)).collect();
        total_loss(&mut f.tape, out.coarse, out.fine, &target, LossWeights::default())
    }
}

/// The configuration used for the end-to-end check: `cfg` at 16x16.
pub fn end_to_end_config(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig { input_size: 16, ..cfg.clone() }
}

/// Full cascade plus total loss in training mode (batch statistics, fixed
/// dropout stream) on a 16x16 input.
pub fn end_to_end_check(cfg: &ModelConfig, opts: &CheckOptions) -> Result<NamedCheck> {
    let cfg = end_to_end_config(cfg);
    let mut model = Model::<f64>::build(&cfg)?;
    perturb(&mut model.store, opts.seed + 8, 0.01)?;
    let s = cfg.input_size;
    let image = Tensor::from_fn(Dims::new(1, 1, s, s), |_, _, y, x| {
        let band = ((x as f64 - s as f64 / 2.0 - 2.0 * (y as f64 / 3.0).sin()).abs() < 3.0) as u8 as f64;
        0.2 + 0.6 * band + 0.05 * ((y * 5 + x * 3) as f64).sin()
    });
    let target: Vec<f64> =
        (0..s * s).map(|i| ((i % s) as f64 - s as f64 / 2.0 - 2.0 * ((i / s) as f64 / 3.0).sin()).abs() < 3.0).map(|b| b as u8 as f64).collect();
    let prog = CascadeProgram { config: cfg, coarse: model.coarse, fine: model.fine, image, target };
    let store = model.store;
    let report =
        check_param_program(&prog, &store, Mode::Train, opts.precision, opts.samples, opts.seed, opts.config(opts.end_to_end_tol))?;
    Ok(NamedCheck { name: "end_to_end".into(), report })
}

/// Every block check followed by the end-to-end check.
pub fn gradcheck_suite(cfg: &ModelConfig, opts: &CheckOptions) -> Result<Vec<NamedCheck>> {
    let mut all = block_checks(opts)?;
    all.push(end_to_end_check(cfg, opts)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_pass_in_64_bit() {
        let opts = CheckOptions { samples: 20, ..CheckOptions::new(Precision::F64) };
        for c in block_checks(&opts).unwrap() {
            assert!(c.report.passed, "{}", c.summary());
        }
    }

    #[test]
    fn corrupted_conv_backward_is_caught() {
        let opts = CheckOptions { samples: 20, corrupt: Some((OpKind::Conv2d, 1.5)), ..CheckOptions::new(Precision::F64) };
        let checks = block_checks(&opts).unwrap();
        let conv = checks.iter().find(|c| c.name == "conv2d").unwrap();
        assert!(!conv.report.passed);
    }
}
