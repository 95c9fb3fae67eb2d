//! One-dimensional Gauss rules.

use std::f64::consts::PI;

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let step = p / d;
            z -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss-Laguerre nodes and log-weights for integrals of `exp(-x) g(x)` on
/// [0, inf).
pub fn gauss_laguerre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!((1..=128).contains(&n));
    let nf = n as f64;
    let mut nodes = vec![0.0; n];
    let mut ln_weights = vec![0.0; n];
    let mut z = 0.0;
    for i in 0..n {
        // standard asymptotic starting guesses, refined by Newton
        z = match i {
            0 => 3.0 / (1.0 + 2.4 * nf),
            1 => z + 15.0 / (1.0 + 2.5 * nf),
            _ => {
                let ai = (i - 1) as f64;
                z + (1.0 + 2.55 * ai) / (1.9 * ai) * (z - nodes[i - 2])
            }
        };
        for _ in 0..200 {
            let (p, p_prev) = laguerre_pair(n, z);
            let deriv = nf * (p - p_prev) / z;
            let step = p / deriv;
            z -= step;
            if step.abs() <= 1e-14 * z.abs().max(1.0) {
                break;
            }
        }
        // w = 1 / (z L_n'(z)^2), with L_n' = n (L_n - L_{n-1}) / z and L_n(z) = 0
        let (_, p_prev) = laguerre_pair(n, z);
        let dl = -nf * p_prev / z;
        nodes[i] = z;
        ln_weights[i] = -(z.ln() + 2.0 * dl.abs().ln());
    }
    (nodes, ln_weights)
}

// (L_n(x), L_{n-1}(x)) by the three-term recurrence.
fn laguerre_pair(n: usize, x: f64) -> (f64, f64) {
    let mut p1 = 1.0;
    let mut p2 = 0.0;
    for j in 1..=n {
        let jf = j as f64;
        let p3 = p2;
        p2 = p1;
        p1 = ((2.0 * jf - 1.0 - x) * p2 - (jf - 1.0) * p3) / jf;
    }
    (p1, p2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        // exact for degree <= 15
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert!((integral - 2.0 / 15.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn laguerre_moments() {
        for n in [4usize, 16, 32, 64] {
            let (x, lw) = gauss_laguerre(n);
            // integral of x^k e^-x is k!
            for k in 0..(2 * n).min(20) {
                let s: f64 = x.iter().zip(&lw).map(|(x, lw)| (lw + k as f64 * x.ln()).exp()).sum();
                let fact: f64 = (1..=k).map(|j| j as f64).product();
                assert!((s / fact - 1.0).abs() < 1e-11, "n={n} k={k} got {s}");
            }
        }
    }
}
