//! Two-stage BCE + soft Dice objective.

use crate::error::{invalid, shape_err, Result};
use crate::tape::{Tape, Var, PROB_CLAMP};
use crate::tensor::Real;

pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_c: 0.4, lambda_f: 0.6 }
    }
}

impl LossWeights {
    pub fn new(lambda_c: f64, lambda_f: f64) -> Result<Self> {
        let w = Self { lambda_c, lambda_f };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c >= 0.0 && self.lambda_f >= 0.0) || !self.lambda_c.is_finite() || !self.lambda_f.is_finite() {
            return Err(invalid!("loss weights must be finite and non-negative, got {self:?}"));
        }
        Ok(())
    }
}

/// `bce + dice` for one probability map, recorded on the tape.
pub fn stage_loss<T: Real>(tape: &mut Tape<T>, p: Var, target: &[T]) -> Result<Var> {
    let bce = tape.bce(p, target)?;
    let dice = tape.dice(p, target, DICE_EPS)?;
    tape.add(bce, dice)
}

/// `lambda_c * stage(coarse) + lambda_f * stage(fine)`, recorded on the tape.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, coarse: Var, fine: Var, target: &[T], w: LossWeights) -> Result<Var> {
    let lc = stage_loss(tape, coarse, target)?;
    let lf = stage_loss(tape, fine, target)?;
    let lc = tape.scale(lc, w.lambda_c);
    let lf = tape.scale(lf, w.lambda_f);
    tape.add(lc, lf)
}

fn check_len(p: usize, m: usize) -> Result<()> {
    if p != m {
        return Err(shape_err!("prediction has {p} pixels, mask has {m}"));
    }
    Ok(())
}

/// Mean binary cross-entropy, evaluated directly in f64.
pub fn bce_loss<T: Real>(p: &[T], m: &[T]) -> Result<f64> {
    check_len(p.len(), m.len())?;
    let mut acc = 0.0;
    for (&pv, &mv) in p.iter().zip(m) {
        let pc = pv.as_f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let mv = mv.as_f64();
        acc -= mv * pc.ln() + (1.0 - mv) * (1.0 - pc).ln();
    }
    Ok(acc / p.len() as f64)
}

/// `1 - (2 sum(pm) + eps) / (sum(p^2) + sum(m^2) + eps)`.
pub fn dice_loss<T: Real>(p: &[T], m: &[T], eps: f64) -> Result<f64> {
    check_len(p.len(), m.len())?;
    if eps <= 0.0 {
        return Err(invalid!("dice eps must be positive"));
    }
    let (mut inter, mut denom) = (0.0, 0.0);
    for (&a, &b) in p.iter().zip(m) {
        let (a, b) = (a.as_f64(), b.as_f64());
        inter += a * b;
        denom += a * a + b * b;
    }
    Ok(1.0 - (2.0 * inter + eps) / (denom + eps))
}

pub fn total_loss_value<T: Real>(coarse: &[T], fine: &[T], m: &[T], w: LossWeights) -> Result<f64> {
    let lc = bce_loss(coarse, m)? + dice_loss(coarse, m, DICE_EPS)?;
    let lf = bce_loss(fine, m)? + dice_loss(fine, m, DICE_EPS)?;
    Ok(w.lambda_c * lc + w.lambda_f * lf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Dims, Tensor};

    #[test]
    fn closed_form_values() {
        let half = vec![0.5f64; 16];
        let m: Vec<f64> = (0..16).map(|i| (i % 2) as f64).collect();
        assert!((bce_loss(&half, &m).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&[0.8], &[1.0]).unwrap() - 0.223_143_551_314_209_7).abs() < 1e-12);
        let ones = vec![1.0f64; 16];
        assert!((dice_loss(&ones, &m, DICE_EPS).unwrap() - 1.0 / 3.0).abs() < 1e-6);
        assert_eq!(dice_loss(&[0.0f64; 4], &[0.0; 4], DICE_EPS).unwrap(), 0.0);
        assert!(bce_loss(&[0.5f64; 3], &[0.0; 4]).is_err());
        assert!(LossWeights::new(-0.1, 1.0).is_err());
    }

    #[test]
    fn tape_loss_matches_direct_evaluation() {
        let d = Dims::new(1, 1, 4, 4);
        let pc = Tensor::<f64>::from_fn(d, |_, _, y, x| 0.1 + 0.05 * (y * 4 + x) as f64);
        let pf = pc.map(|v| 1.0 - v);
        let m: Vec<f64> = (0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(pc.clone()), tape.leaf(pf.clone()));
        let l = total_loss(&mut tape, a, b, &m, w).unwrap();
        let direct = total_loss_value(pc.data(), pf.data(), &m, w).unwrap();
        assert!((tape.value(l).data()[0] - direct).abs() < 1e-12);
    }
}
