//! Finite-difference gradient verification.
//!
//! The checker is deliberately independent of the backward pass: it only
//! ever re-runs the forward function on perturbed parameter copies, so it
//! serves as the oracle for every recorded operation.

use crate::error::{Error, Result};

use super::tape::Tape;
use super::tensor::Tensor;

/// Relative-error denominator floor. Central differences on an O(1) loss
/// carry ~1e-10 of roundoff, so derivatives near zero need an absolute
/// floor to avoid reporting pure float noise as error.
pub const REL_EPS: f64 = 1e-4;

/// Max over all parameter elements of
/// `|analytic - central| / (|central| + eps)`.
///
/// `f` must rebuild its computation from scratch on the tape it is given
/// and return a scalar loss. Parameters are watched before `f` runs; `f`
/// receives the watched views and must use them (not the originals) so
/// analytic gradients are retrievable.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let watched: Vec<Tensor> = ps.iter().map(|p| tape.watch(p)).collect();
        let loss = f(&mut tape, &watched)?;
        let v = loss.scalar_value()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("grad_check: non-finite loss {v}")));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let watched: Vec<Tensor> = params.iter().map(|p| tape.watch(p)).collect();
    let loss = f(&mut tape, &watched)?;
    if !loss.is_scalar() {
        return Err(Error::Contract("grad_check: loss must be scalar".into()));
    }
    if !loss.scalar_value()?.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite loss".into()));
    }
    let grads = tape.backward(&loss)?;

    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(&watched[pi]) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; p.len()],
        };
        for j in 0..p.len() {
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            perturb(&mut plus[pi], j, step);
            perturb(&mut minus[pi], j, -step);
            let central = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let rel = (analytic[j] - central).abs() / (central.abs() + REL_EPS);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

fn perturb(t: &mut Tensor, idx: usize, delta: f64) {
    let rg = t.requires_grad();
    let mut data = t.data().to_vec();
    data[idx] += delta;
    *t = Tensor::new(t.shape().to_vec(), data)
        .expect("perturb preserves shape")
        .with_requires_grad(rg);
}
