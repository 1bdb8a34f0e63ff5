//! Shapiro–Wilk normality test with Royston's (1995) coefficient and p-value
//! approximations.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

const MIN_SAMPLES: usize = 3;
const MAX_SAMPLES: usize = 5000;

// Polynomials in 1/sqrt(n) correcting the two extreme coefficients.
const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapiroWilk {
    pub w: f64,
    pub p_value: f64,
}

fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// W statistic and upper-tail p-value. Small p rejects normality.
pub fn shapiro_wilk(samples: &[f64]) -> Result<ShapiroWilk> {
    let n = samples.len();
    if !(MIN_SAMPLES..=MAX_SAMPLES).contains(&n) {
        return Err(Error::SampleSizeOutOfRange(n));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite sample".into()));
    }
    let mut x = samples.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let range = x[n - 1] - x[0];
    if range <= f64::EPSILON * x[n - 1].abs().max(x[0].abs()).max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateSample);
    }

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let nf = n as f64;
    let a = coefficients(n, &std_normal);

    let mean = x.iter().sum::<f64>() / nf;
    let ssq: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    let num: f64 = a.iter().zip(&x).map(|(ai, xi)| ai * xi).sum();
    let w = (num * num / ssq).min(1.0);

    let p_value = if n == 3 {
        let p = 6.0 / std::f64::consts::PI * (w.sqrt().asin() - 0.75f64.sqrt().asin());
        p.max(0.0)
    } else if n <= 11 {
        let gamma = -2.273 + 0.459 * nf;
        let mu = poly(&[0.5440, -0.39978, 0.025054, -0.0006714], nf);
        let sigma = poly(&[1.3822, -0.77857, 0.062767, -0.0020322], nf).exp();
        let t = gamma - (1.0 - w).ln();
        if t <= 0.0 {
            // W far in the lower tail; the transform is undefined there.
            0.0
        } else {
            let z = (-t.ln() - mu) / sigma;
            std_normal.sf(z)
        }
    } else {
        let ln_n = nf.ln();
        let mu = poly(&[-1.5861, -0.31082, -0.083751, 0.0038915], ln_n);
        let sigma = poly(&[-0.4803, -0.082676, 0.0030302], ln_n).exp();
        let z = ((1.0 - w).ln() - mu) / sigma;
        std_normal.sf(z)
    };

    Ok(ShapiroWilk { w, p_value })
}

/// Antisymmetric weights for the ordered sample.
fn coefficients(n: usize, std_normal: &Normal) -> Vec<f64> {
    if n == 3 {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        return vec![-h, 0.0, h];
    }
    let nf = n as f64;
    let m: Vec<f64> = (1..=n)
        .map(|i| std_normal.inverse_cdf((i as f64 - 0.375) / (nf + 0.25)))
        .collect();
    let summ2: f64 = m.iter().map(|v| v * v).sum();
    let ssumm2 = summ2.sqrt();
    let u = 1.0 / nf.sqrt();

    let mut a = vec![0.0; n];
    let an = m[n - 1] / ssumm2 + poly(&C1, u);
    if n > 5 {
        let an1 = m[n - 2] / ssumm2 + poly(&C2, u);
        let phi = (summ2 - 2.0 * m[n - 1].powi(2) - 2.0 * m[n - 2].powi(2))
            / (1.0 - 2.0 * an * an - 2.0 * an1 * an1);
        let root = phi.sqrt();
        for i in 2..n - 2 {
            a[i] = m[i] / root;
        }
        a[n - 2] = an1;
        a[1] = -an1;
    } else {
        let phi = (summ2 - 2.0 * m[n - 1].powi(2)) / (1.0 - 2.0 * an * an);
        let root = phi.sqrt();
        for i in 1..n - 1 {
            a[i] = m[i] / root;
        }
    }
    a[n - 1] = an;
    a[0] = -an;
    a
}
