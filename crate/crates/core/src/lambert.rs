//! Principal branch of the Lambert W function.

use crate::error::{OmcsError, Result};

const INV_E: f64 = 0.367_879_441_171_442_33;

/// `W_0(x)` for `x ≥ −1/e`, by Halley iteration.
///
/// Initial guess: the branch-point series `−1 + p − p²/3 + 11p³/72` with
/// `p = √(2(ex + 1))` for `x < −0.25`, `ln(1 + x)` up to `x = e`, and the
/// asymptotic `L₁ − L₂ + L₂/L₁` (`L₁ = ln x`, `L₂ = ln ln x`) beyond.
pub fn lambert_w(x: f64) -> Result<f64> {
    if x.is_nan() || x < -INV_E - 1e-15 {
        return Err(OmcsError::Domain(format!(
            "lambert_w: argument {x} is below -1/e"
        )));
    }
    if x.is_infinite() {
        return Ok(f64::INFINITY);
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let x = x.max(-INV_E);
    let mut w = if x < -0.25 {
        let p = (2.0 * (std::f64::consts::E * x + 1.0)).max(0.0).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    } else if x <= std::f64::consts::E {
        x.ln_1p()
    } else {
        let l1 = x.ln();
        let l2 = l1.ln();
        l1 - l2 + l2 / l1
    };
    for _ in 0..100 {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        if wp1.abs() < 1e-300 {
            break;
        }
        let step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1));
        if !step.is_finite() {
            break;
        }
        w -= step;
        if step.abs() <= 1e-16 * (1.0 + w.abs()) {
            break;
        }
    }
    Ok(w.max(-1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn residual(x: f64) -> f64 {
        let w = lambert_w(x).unwrap();
        (w * w.exp() - x).abs() / x.abs().max(1.0)
    }

    #[test]
    fn known_values() {
        assert_eq!(lambert_w(0.0).unwrap(), 0.0);
        assert!((lambert_w(std::f64::consts::E).unwrap() - 1.0).abs() < 1e-15);
        assert!((lambert_w(-INV_E).unwrap() + 1.0).abs() < 1e-7);
        assert!(lambert_w(-0.5).is_err());
    }

    #[test]
    fn inverts_x_exp_x() {
        for x in [0.1, 1.0, 5.0, 20.0] {
            let y = x * f64::exp(x);
            assert!((lambert_w(y).unwrap() - x).abs() <= 1e-12, "x = {x}");
        }
    }

    #[test]
    fn residual_small_across_scales() {
        for k in -300..300 {
            let x = 10f64.powf(k as f64 / 10.0);
            assert!(residual(x) <= 1e-12, "x = {x}");
        }
        for i in 0..1000 {
            let x = -INV_E + (i as f64) * INV_E / 1000.0;
            assert!(residual(x) <= 1e-12, "x = {x}");
        }
    }

    proptest! {
        #[test]
        fn monotone(a in -0.36f64..1e6, b in -0.36f64..1e6) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(lambert_w(lo).unwrap() <= lambert_w(hi).unwrap() + 1e-15);
        }
    }
}
