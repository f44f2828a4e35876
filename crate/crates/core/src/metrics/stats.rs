use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Accuracies are clamped here so a perfect score stays finite.
pub const CAND_DIF_CLAMP: f64 = 1.0 - 1e-9;

/// Difference of `−ln(1 − acc)` between first-position and random placement.
pub fn cand_dif(acc_first: f64, acc_random: f64) -> Result<f64> {
    for v in [acc_first, acc_random] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("accuracy {v} outside [0, 1]")));
        }
    }
    let f = acc_first.min(CAND_DIF_CLAMP);
    let r = acc_random.min(CAND_DIF_CLAMP);
    Ok(-(1.0 - f).ln() + (1.0 - r).ln())
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn two_sided(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

/// Two-sided p-value: paired t-test when `paired` (same users, same
/// order), Welch's test otherwise. A zero standard error gives `1` for
/// equal means and `0` otherwise.
pub fn significance(a: &[f64], b: &[f64], paired: bool) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("significance needs at least two observations per side"));
    }
    if paired {
        if a.len() != b.len() {
            return Err(Error::invalid("paired test needs equal-length inputs"));
        }
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let (m, v) = mean_var(&d);
        let se = (v / d.len() as f64).sqrt();
        if se == 0.0 {
            return Ok(if m == 0.0 { 1.0 } else { 0.0 });
        }
        return Ok(two_sided(m / se, d.len() as f64 - 1.0));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (qa, qb) = (va / a.len() as f64, vb / b.len() as f64);
    let se = (qa + qb).sqrt();
    if se == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let df = (qa + qb).powi(2) / (qa * qa / (a.len() as f64 - 1.0) + qb * qb / (b.len() as f64 - 1.0));
    Ok(two_sided((ma - mb) / se, df))
}

/// `**` below 0.01, `*` below 0.05.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}
