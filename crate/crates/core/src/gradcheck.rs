//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug)]
pub struct CheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Floor on the relative-error denominator, so coordinates whose true
    /// gradient is zero are judged on absolute error.
    pub atol: f64,
    /// Additional floor as a fraction of the largest analytic gradient
    /// magnitude, so noise on coordinates far below the gradient scale is
    /// judged against that scale.
    pub atol_rel: f64,
    /// Fault injection for negative controls: scale the backward output of
    /// one op kind on the analytic side.
    pub corrupt: Option<(OpKind, f64)>,
}

impl CheckConfig {
    pub fn new(eps: f64, tol: f64, atol: f64) -> Self {
        Self { eps, tol, atol, atol_rel: 0.0, corrupt: None }
    }
}

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub entries: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl CheckReport {
    fn from_entries(entries: Vec<CoordCheck>, tol: f64) -> Self {
        let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
        let passed = entries.iter().all(|e| e.rel_err.is_finite()) && max_rel_err <= tol;
        Self { entries, max_rel_err, tol, passed }
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, atol: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(atol)
}

/// Compares `analytic[i]` against `(f(p + eps e_i) - f(p - eps e_i)) / 2 eps`
/// for every `i` in `coords`.
///
/// `f` is evaluated twice at `params` first; differing results mean the
/// function is not deterministic and the check is refused.
pub fn finite_diff_check<T, F>(
    mut f: F,
    params: &[T],
    analytic: &[f64],
    coords: &[usize],
    cfg: CheckConfig,
) -> Result<CheckReport>
where
    T: Real,
    F: FnMut(&[T]) -> Result<T>,
{
    if cfg.eps <= 0.0 {
        return Err(invalid!("finite-difference eps must be positive"));
    }
    if analytic.len() != params.len() {
        return Err(invalid!("analytic gradient has {} entries for {} params", analytic.len(), params.len()));
    }
    let a = f(params)?;
    let b = f(params)?;
    if a != b {
        return Err(Error::InvalidArgument(format!(
            "function is not deterministic: {a} then {b} at identical parameters"
        )));
    }
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = cfg.atol.max(cfg.atol_rel * scale);
    let mut p = params.to_vec();
    let eps = T::lit(cfg.eps);
    let mut entries = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = p[i];
        p[i] = orig + eps;
        let plus = f(&p)?;
        p[i] = orig - eps;
        let minus = f(&p)?;
        p[i] = orig;
        let numeric = (plus.as_f64() - minus.as_f64()) / (2.0 * cfg.eps);
        let rel_err = relative_error(analytic[i], numeric, floor);
        entries.push(CoordCheck { index: i, analytic: analytic[i], numeric, rel_err });
    }
    Ok(CheckReport::from_entries(entries, cfg.tol))
}

/// Up to `count` distinct coordinates out of `len`, in ascending order.
pub fn sample_coords(len: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = index::sample(&mut rng, len, count).into_vec();
    v.sort_unstable();
    v
}

/// Gradient check of a scalar-valued tape program over a set of input tensors.
///
/// The analytic gradient is computed at `precision`; the central differences
/// are always taken on a 64-bit evaluation of the same program, so the check
/// measures the backward pass rather than forward rounding noise.
pub fn check_tape_program<B>(
    build: B,
    inputs: &[Tensor<f64>],
    precision: Precision,
    max_coords: usize,
    seed: u64,
    cfg: CheckConfig,
) -> Result<CheckReport>
where
    B: Fn(&mut dyn TapeOps, &[Var]) -> Result<Var>,
{
    let analytic = match precision {
        Precision::F32 => analytic_grads::<f32, _>(&build, inputs, cfg.corrupt)?,
        Precision::F64 => analytic_grads::<f64, _>(&build, inputs, cfg.corrupt)?,
    };
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let coords = sample_coords(flat.len(), max_coords, seed);
    let eval = |p: &[f64]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let mut offset = 0;
        let mut vars = Vec::with_capacity(inputs.len());
        for t in inputs {
            let n = t.numel();
            let v = tape.leaf(Tensor::from_vec(t.dims(), p[offset..offset + n].to_vec())?);
            offset += n;
            vars.push(v);
        }
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    finite_diff_check(eval, &flat, &analytic, &coords, cfg)
}

fn analytic_grads<T: Real, B>(
    build: &B,
    inputs: &[Tensor<f64>],
    corrupt: Option<(OpKind, f64)>,
) -> Result<Vec<f64>>
where
    B: Fn(&mut dyn TapeOps, &[Var]) -> Result<Var>,
    Tape<T>: TapeOps,
{
    let mut tape = Tape::<T>::new();
    if let Some((kind, factor)) = corrupt {
        tape.corrupt_backward(kind, factor);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.cast())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, t)| grads.get_or_zeros(v, t.numel()).into_iter().map(|g| g.as_f64()))
        .collect())
}

/// Precision-erased view of a [`Tape`], so one probe program can be recorded
/// in either precision.
pub trait TapeOps {
    fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var>;
    fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var>;
    fn maxpool2x2(&mut self, x: Var) -> Result<Var>;
    fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var>;
    fn activation(&mut self, x: Var, kind: crate::tape::Activation) -> Var;
    fn global_avg_pool(&mut self, x: Var) -> Result<Var>;
    fn concat_channels(&mut self, parts: &[Var]) -> Result<Var>;
    fn add(&mut self, a: Var, b: Var) -> Result<Var>;
    fn mul(&mut self, a: Var, b: Var) -> Result<Var>;
    fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var>;
    fn scale_spatial(&mut self, x: Var, q: Var) -> Result<Var>;
    fn dropout_seeded(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var>;
    fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var>;
    fn sum(&mut self, x: Var) -> Var;
    fn scale(&mut self, x: Var, factor: f64) -> Var;
    fn bce(&mut self, p: Var, target: &[f64]) -> Result<Var>;
    fn dice(&mut self, p: Var, target: &[f64], eps: f64) -> Result<Var>;
    /// Leaf holding a constant (gradient not checked).
    fn constant(&mut self, t: &Tensor<f64>) -> Var;
}

impl<T: Real> TapeOps for Tape<T> {
    fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        Tape::conv2d(self, x, w, b, stride, pad)
    }
    fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        Tape::conv_transpose2d(self, x, w, b, stride)
    }
    fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        Tape::maxpool2x2(self, x)
    }
    fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        Ok(Tape::batch_norm(self, x, gamma, beta, crate::tape::BnMode::Train, eps)?.0)
    }
    fn activation(&mut self, x: Var, kind: crate::tape::Activation) -> Var {
        Tape::activation(self, x, kind)
    }
    fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        Tape::global_avg_pool(self, x)
    }
    fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        Tape::concat_channels(self, parts)
    }
    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        Tape::add(self, a, b)
    }
    fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        Tape::mul(self, a, b)
    }
    fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        Tape::scale_channels(self, x, s)
    }
    fn scale_spatial(&mut self, x: Var, q: Var) -> Result<Var> {
        Tape::scale_spatial(self, x, q)
    }
    fn dropout_seeded(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tape::dropout(self, x, rate, &mut rng, crate::tape::Mode::Train)
    }
    fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        Tape::upsample_bilinear(self, x, factor)
    }
    fn sum(&mut self, x: Var) -> Var {
        Tape::sum(self, x)
    }
    fn scale(&mut self, x: Var, factor: f64) -> Var {
        Tape::scale(self, x, factor)
    }
    fn bce(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        let t: Vec<T> = target.iter().map(|&v| T::lit(v)).collect();
        Tape::bce(self, p, &t)
    }
    fn dice(&mut self, p: Var, target: &[f64], eps: f64) -> Result<Var> {
        let t: Vec<T> = target.iter().map(|&v| T::lit(v)).collect();
        Tape::dice(self, p, &t, eps)
    }
    fn constant(&mut self, t: &Tensor<f64>) -> Var {
        self.leaf(t.cast())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn quadratic_matches_in_64_bit() {
        let params = vec![0.3, -1.2, 2.5, 0.0];
        let analytic: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
        let f = |p: &[f64]| -> Result<f64> { Ok(p.iter().map(|v| v * v).sum()) };
        let report =
            finite_diff_check(f, &params, &analytic, &[0, 1, 2, 3], CheckConfig::new(1e-3, 1e-6, 1e-12)).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn off_by_factor_two_fails() {
        let params = vec![0.7, -0.4];
        let analytic: Vec<f64> = params.iter().map(|p| 4.0 * p).collect();
        let f = |p: &[f64]| -> Result<f64> { Ok(p.iter().map(|v| v * v).sum()) };
        let report = finite_diff_check(f, &params, &analytic, &[0, 1], CheckConfig::new(1e-3, 1e-3, 1e-12)).unwrap();
        assert!(!report.passed);
        assert!((report.max_rel_err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_deterministic_function_is_refused() {
        let mut calls = 0.0;
        let f = |p: &[f64]| -> Result<f64> {
            calls += 1.0;
            Ok(p[0] + calls)
        };
        assert!(finite_diff_check(f, &[1.0], &[1.0], &[0], CheckConfig::new(1e-3, 1e-3, 1e-12)).is_err());
    }

    #[test]
    fn sampled_coords_are_distinct_and_sorted() {
        let c = sample_coords(1000, 50, 7);
        assert_eq!(c.len(), 50);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_coords(5, 50, 7), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn tape_program_sum_of_squares() {
        let x = Tensor::from_vec(Dims::new(1, 1, 2, 2), vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let report = check_tape_program(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            Precision::F64,
            100,
            0,
            CheckConfig::new(1e-5, 1e-6, 1e-8),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
