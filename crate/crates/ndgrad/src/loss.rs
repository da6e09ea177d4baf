use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 && kappa.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("huber kappa must be positive, got {kappa}")))
    }
}

/// Huber penalty summed over all elements of `residual`.
pub fn huber(tape: &mut Tape, residual: Var, kappa: f64) -> Result<Var> {
    check_kappa(kappa)?;
    let h = tape.huber(residual, kappa);
    Ok(tape.sum(h))
}

/// Same as [`huber`] on a plain tensor.
pub fn huber_value(residual: &Tensor, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    Ok(residual
        .data()
        .iter()
        .map(|&u| {
            if u.abs() <= kappa {
                0.5 * u * u
            } else {
                kappa * (u.abs() - 0.5 * kappa)
            }
        })
        .sum())
}

/// Mean of `0.5 * (a - b)^2` over all elements.
pub fn half_mse(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let sq = tape.square(d);
    let m = tape.mean(sq);
    tape.scale(m, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(u: f64, kappa: f64) -> f64 {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(u));
        let h = huber(&mut t, x, kappa).unwrap();
        t.value(h).item()
    }

    #[test]
    fn branches() {
        assert_eq!(eval(0.5, 1.0), 0.125);
        assert_eq!(eval(2.0, 1.0), 1.5);
        assert_eq!(eval(-2.0, 1.0), 1.5);
        assert_eq!(eval(1.0, 1.0), 0.5);
        // both branch formulas agree at the knee
        assert_eq!(0.5 * 1.0f64 * 1.0, 1.0 * (1.0 - 0.5 * 1.0));
    }

    #[test]
    fn rejects_non_positive_kappa() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        assert!(matches!(huber(&mut t, x, 0.0), Err(Error::Parameter(_))));
        assert!(huber_value(&Tensor::scalar(1.0), -1.0).is_err());
    }

    #[test]
    fn plain_matches_taped() {
        let r = Tensor::row(&[-3.0, -0.2, 0.0, 0.7, 1.9]);
        let mut t = Tape::new();
        let x = t.constant(r.clone());
        let h = huber(&mut t, x, 0.8).unwrap();
        assert!((t.value(h).item() - huber_value(&r, 0.8).unwrap()).abs() < 1e-15);
    }
}
