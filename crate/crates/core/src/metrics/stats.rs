//! Correlation and significance tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Upper-tail probability of Student's t with `df` degrees of freedom.
fn t_sf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    // df > 0 is guaranteed by every caller.
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    dist.sf(t)
}

/// Point-biserial correlation between a continuous variable and a 0/1 label,
/// with a two-sided p-value from `t = r sqrt((n-2)/(1-r^2))` on `n - 2` df.
pub fn point_biserial(continuous: &[f64], binary: &[u8]) -> Result<CorrelationResult> {
    if continuous.len() != binary.len() {
        return Err(Error::LengthMismatch {
            expected: continuous.len(),
            got: binary.len(),
        });
    }
    let n = continuous.len();
    if n < 3 {
        return Err(Error::DegenerateInput(format!("need at least 3 points, got {n}")));
    }
    if let Some(b) = binary.iter().find(|&&b| b > 1) {
        return Err(Error::DegenerateInput(format!("binary value {b} is not 0/1")));
    }
    let (mut sum1, mut n1, mut sum0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (&x, &b) in continuous.iter().zip(binary) {
        if b == 1 {
            sum1 += x;
            n1 += 1;
        } else {
            sum0 += x;
            n0 += 1;
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(Error::DegenerateInput("only one class present".into()));
    }
    let nf = n as f64;
    let m = continuous.iter().sum::<f64>() / nf;
    let s_n = (continuous.iter().map(|x| (x - m).powi(2)).sum::<f64>() / nf).sqrt();
    if s_n == 0.0 {
        return Err(Error::DegenerateInput("continuous variable has zero variance".into()));
    }
    let (m1, m0) = (sum1 / n1 as f64, sum0 / n0 as f64);
    let r = ((m1 - m0) / s_n * ((n1 * n0) as f64 / (nf * nf)).sqrt()).clamp(-1.0, 1.0);
    let df = nf - 2.0;
    let p_value = if 1.0 - r * r <= f64::EPSILON {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        (2.0 * t_sf(t.abs(), df)).min(1.0)
    };
    Ok(CorrelationResult { r, p_value, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// One-sided p-value for the alternative "first mean > second mean".
    pub p_value: f64,
}

/// Paired one-sided t-test of `a > b`.
pub fn paired_t_greater(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::DegenerateInput("paired t-test needs two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (m, s) = (mean(&d), sample_std(&d));
    let df = (d.len() - 1) as f64;
    if s == 0.0 {
        let p_value = if m > 0.0 { 0.0 } else { 1.0 };
        let t = if m > 0.0 {
            f64::INFINITY
        } else if m < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        };
        return Ok(TTest { t, df, p_value });
    }
    let t = m / (s / (d.len() as f64).sqrt());
    Ok(TTest {
        t,
        df,
        p_value: t_sf(t, df),
    })
}

/// Welch one-sided t-test of `mean(a) > mean(b)`.
pub fn welch_t_greater(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::DegenerateInput("Welch test needs two values per group".into()));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (
        sample_std(a).powi(2) / a.len() as f64,
        sample_std(b).powi(2) / b.len() as f64,
    );
    let se2 = va + vb;
    if se2 == 0.0 {
        let p_value = if ma > mb { 0.0 } else { 1.0 };
        let df = (a.len() + b.len() - 2) as f64;
        return Ok(TTest {
            t: if ma > mb { f64::INFINITY } else { 0.0 },
            df,
            p_value,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2.powi(2) / (va.powi(2) / (a.len() - 1) as f64 + vb.powi(2) / (b.len() - 1) as f64);
    Ok(TTest {
        t,
        df,
        p_value: t_sf(t, df),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Pearson correlation by the textbook covariance formula.
    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn perfect_separation() {
        let r = point_biserial(&[1.0, 1.0, 5.0, 5.0], &[0, 0, 1, 1]).unwrap();
        assert!((r.r - 1.0).abs() < 1e-12);
        assert_eq!(r.p_value, 0.0);
    }

    #[test]
    fn symmetric_example_matches_direct_formula() {
        let x = [1.0, 2.0, 2.0, 1.0];
        let b = [0u8, 1, 1, 0];
        let got = point_biserial(&x, &b).unwrap();
        let bf: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        assert!((got.r - pearson(&x, &bf)).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_degenerate() {
        assert!(matches!(
            point_biserial(&[1.0, 2.0, 3.0], &[0, 0, 0]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            point_biserial(&[2.0, 2.0, 2.0], &[0, 1, 0]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(point_biserial(&[1.0, 2.0], &[0, 1]).is_err());
    }

    #[test]
    fn p_value_matches_reference() {
        // scipy.stats.pointbiserialr([0,0,1,1,0,1],[1.0,2.0,2.5,4.0,1.5,3.0])
        // r = 0.8451542547285167, pvalue = 0.03410942316740958
        let got = point_biserial(&[1.0, 2.0, 2.5, 4.0, 1.5, 3.0], &[0, 0, 1, 1, 0, 1]).unwrap();
        assert!((got.r - 0.8451542547285167).abs() < 1e-12, "{}", got.r);
        assert!((got.p_value - 0.03410942316740958).abs() < 1e-9, "{}", got.p_value);
    }

    #[test]
    fn paired_and_welch_directions() {
        let a = [0.9, 0.8, 0.85, 0.95, 0.9];
        let b = [0.4, 0.45, 0.38, 0.5, 0.41];
        assert!(paired_t_greater(&a, &b).unwrap().p_value < 1e-4);
        assert!(paired_t_greater(&b, &a).unwrap().p_value > 0.99);
        assert!(welch_t_greater(&a, &b).unwrap().p_value < 1e-4);
        assert_eq!(paired_t_greater(&[1.0, 1.0], &[0.0, 0.0]).unwrap().p_value, 0.0);
    }

    proptest! {
        #[test]
        fn equals_pearson(
            data in prop::collection::vec((-100.0f64..100.0, 0u8..2), 3..60)
        ) {
            let x: Vec<f64> = data.iter().map(|d| d.0).collect();
            let b: Vec<u8> = data.iter().map(|d| d.1).collect();
            prop_assume!(b.contains(&0) && b.contains(&1));
            let got = point_biserial(&x, &b).unwrap();
            let bf: Vec<f64> = b.iter().map(|&v| v as f64).collect();
            prop_assert!((got.r - pearson(&x, &bf)).abs() < 1e-12);
            prop_assert!(got.r.abs() <= 1.0);
            prop_assert!((0.0..=1.0).contains(&got.p_value));
        }
    }
}
