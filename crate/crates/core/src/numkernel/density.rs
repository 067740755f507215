use std::f64::consts::{LN_2, PI};

use super::{check_len, dot, norm, VAR_FLOOR};
use crate::error::{Error, Result};

/// Negative log₂-density of `x` under a diagonal Gaussian, summed over
/// dimensions. The value can be negative when the density exceeds one.
pub fn gaussian_nll_bits(x: &[f64], mu: &[f64], var: &[f64]) -> Result<f64> {
    check_inputs(x, mu, var)?;
    let nats: f64 = x
        .iter()
        .zip(mu)
        .zip(var)
        .map(|((&xi, &mi), &vi)| {
            let d = xi - mi;
            0.5 * (2.0 * PI * vi).ln() + d * d / (2.0 * vi)
        })
        .sum();
    finite(nats / LN_2, "gaussian_nll_bits")
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllGrad {
    pub value: f64,
    pub d_x: Vec<f64>,
    pub d_mu: Vec<f64>,
    pub d_var: Vec<f64>,
}

/// [`gaussian_nll_bits`] together with its partial derivatives.
pub fn gaussian_nll_bits_grad(x: &[f64], mu: &[f64], var: &[f64]) -> Result<NllGrad> {
    check_inputs(x, mu, var)?;
    let n = x.len();
    let mut value = 0.0;
    let mut d_x = Vec::with_capacity(n);
    let mut d_var = Vec::with_capacity(n);
    for ((&xi, &mi), &vi) in x.iter().zip(mu).zip(var) {
        let d = xi - mi;
        value += 0.5 * (2.0 * PI * vi).ln() + d * d / (2.0 * vi);
        d_x.push(d / (vi * LN_2));
        d_var.push((0.5 / vi - d * d / (2.0 * vi * vi)) / LN_2);
    }
    let d_mu = d_x.iter().map(|g| -g).collect();
    Ok(NllGrad {
        value: finite(value / LN_2, "gaussian_nll_bits_grad")?,
        d_x,
        d_mu,
        d_var,
    })
}

fn check_inputs(x: &[f64], mu: &[f64], var: &[f64]) -> Result<()> {
    check_len("gaussian_nll_bits (mu)", x.len(), mu.len())?;
    check_len("gaussian_nll_bits (var)", x.len(), var.len())?;
    if let Some((index, &value)) = var
        .iter()
        .enumerate()
        .find(|(_, &v)| v.is_nan() || v < VAR_FLOOR)
    {
        return Err(Error::VarianceBelowFloor {
            index,
            value,
            floor: VAR_FLOOR,
        });
    }
    Ok(())
}

fn finite(v: f64, context: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(context))
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("cosine_similarity", a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine_similarity"));
    }
    let cs = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    finite(cs, "cosine_similarity")
}

/// Cosine similarity and its gradient with respect to `b`.
pub fn cosine_similarity_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("cosine_similarity_grad", a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine_similarity_grad"));
    }
    // Unclamped here so the gradient stays consistent with the value.
    let cs = dot(a, b) / (na * nb);
    let grad = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| ai / (na * nb) - cs * bi / (nb * nb))
        .collect();
    Ok((finite(cs, "cosine_similarity_grad")?, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HALF_LOG2_2PI: f64 = 1.325_748_064_736_159;

    #[test]
    fn nll_standard_normal_at_mean() {
        let v = gaussian_nll_bits(&[0.0], &[0.0], &[1.0]).unwrap();
        assert!((v - 1.325_75).abs() < 1e-5);
        assert!((v - HALF_LOG2_2PI).abs() < 1e-14);
    }

    #[test]
    fn nll_at_mean_scales_with_dimension() {
        let x = [0.3, -1.2, 4.0, 7.5];
        let v = gaussian_nll_bits(&x, &x, &[1.0; 4]).unwrap();
        assert!((v - 4.0 * HALF_LOG2_2PI).abs() < 1e-12);
    }

    #[test]
    fn nll_one_sigma_away() {
        let v = gaussian_nll_bits(&[1.0], &[0.0], &[1.0]).unwrap();
        assert!((v - 2.047_095_585_180_641).abs() < 1e-14);
        assert!((v - (HALF_LOG2_2PI + 0.5 / LN_2)).abs() < 1e-14);
    }

    #[test]
    fn nll_errors() {
        assert!(matches!(
            gaussian_nll_bits(&[0.0, 1.0], &[0.0], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            gaussian_nll_bits(&[0.0], &[0.0], &[1e-7]),
            Err(Error::VarianceBelowFloor { index: 0, .. })
        ));
        assert!(gaussian_nll_bits(&[0.0], &[0.0], &[f64::NAN]).is_err());
        assert!(gaussian_nll_bits(&[0.0], &[0.0], &[VAR_FLOOR]).is_ok());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let cs = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((cs - 0.974_631_846_197_076_2).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn grads_match_central_differences() {
        let x = [0.4, -1.1, 2.0];
        let mu = [0.1, 0.5, 1.5];
        let var = [0.7, 1.9, 0.3];
        let g = gaussian_nll_bits_grad(&x, &mu, &var).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let bump = |v: &[f64], s: f64| {
                let mut v = v.to_vec();
                v[j] += s;
                v
            };
            let fd_x = (gaussian_nll_bits(&bump(&x, h), &mu, &var).unwrap()
                - gaussian_nll_bits(&bump(&x, -h), &mu, &var).unwrap())
                / (2.0 * h);
            let fd_v = (gaussian_nll_bits(&x, &mu, &bump(&var, h)).unwrap()
                - gaussian_nll_bits(&x, &mu, &bump(&var, -h)).unwrap())
                / (2.0 * h);
            assert!((fd_x - g.d_x[j]).abs() < 1e-7);
            assert!((fd_v - g.d_var[j]).abs() < 1e-7);
            assert_eq!(g.d_mu[j], -g.d_x[j]);
        }

        let a = [0.3, -0.8, 1.2];
        let b = [1.0, 0.2, -0.4];
        let (_, gb) = cosine_similarity_grad(&a, &b).unwrap();
        for j in 0..3 {
            let mut bp = b;
            let mut bm = b;
            bp[j] += h;
            bm[j] -= h;
            let fd = (cosine_similarity(&a, &bp).unwrap() - cosine_similarity(&a, &bm).unwrap())
                / (2.0 * h);
            assert!((fd - gb[j]).abs() < 1e-8);
        }
    }
}
