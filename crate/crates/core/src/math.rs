//! Small numeric helpers shared by the fitting code.

/// Probabilities are clamped to this distance from 0 and 1 when logged.
pub const RISK_CLAMP: f64 = 1e-12;

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn clamp_risk(p: f64) -> f64 {
    p.clamp(RISK_CLAMP, 1.0 - RISK_CLAMP)
}

/// Bernoulli log-likelihood contribution, evaluated stably from the log-odds.
pub fn bernoulli_ll_from_eta(y: f64, eta: f64) -> f64 {
    // y*eta - log(1 + e^eta)
    let softplus = if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    };
    y * eta - softplus
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expit_is_stable_and_symmetric() {
        assert_eq!(expit(0.0), 0.5);
        assert!((expit(-1.0) - 0.2689414213699951).abs() < 1e-15);
        assert!((expit(3.0) + expit(-3.0) - 1.0).abs() < 1e-15);
        assert!(expit(-800.0) >= 0.0 && expit(800.0) <= 1.0);
        assert!((logit(expit(1.7)) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn ll_from_eta_matches_direct_form() {
        for &eta in &[-5.0, -0.3, 0.0, 0.8, 4.0] {
            let p = expit(eta);
            for y in [0.0, 1.0] {
                let direct = y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                assert!((bernoulli_ll_from_eta(y, eta) - direct).abs() < 1e-12);
            }
        }
    }
}
