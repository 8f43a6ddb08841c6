//! Rubin's rules across multiply imputed fits.
//!
//! For N estimates `c_i` with standard errors `S_i`:
//!
//! ```text
//! W  = (1/N) sum S_i^2
//! B  = 1/(N-1) sum (c_i - c_bar)^2
//! SE = sqrt(W + (1 + 1/N) B)
//! ```
//!
//! Sums run over sorted values so every pooled quantity is independent of
//! the order of the fits, bit for bit.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::ologit::{normal_two_sided, OrdinalFit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolingError {
    #[error("pooling needs at least 2 fits, got {0}")]
    TooFewFits(usize),
    #[error("fit {0} has a different parameter set")]
    MismatchedParameters(usize),
    #[error("fit {0} did not converge")]
    NotConverged(usize),
    #[error("estimates and standard errors differ in length")]
    LengthMismatch,
    #[error("alpha level {0} outside (0, 1)")]
    InvalidAlpha(f64),
}

pub type Result<T> = std::result::Result<T, PoolingError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledCoefficient {
    pub name: String,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub mean: f64,
    pub within_var: f64,
    pub between_var: f64,
    pub pooled_se: f64,
    pub t_value: f64,
    /// Rubin's degrees of freedom; `None` when the between variance is zero
    /// and the normal reference is used.
    pub df: Option<f64>,
    pub p_value: f64,
    pub is_cutpoint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledFit {
    pub rows: Vec<PooledCoefficient>,
    pub m: usize,
}

impl PooledFit {
    pub fn get(&self, name: &str) -> Option<&PooledCoefficient> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn coefficients(&self) -> impl Iterator<Item = &PooledCoefficient> {
        self.rows.iter().filter(|r| !r.is_cutpoint)
    }

    pub fn cutpoints(&self) -> impl Iterator<Item = &PooledCoefficient> {
        self.rows.iter().filter(|r| r.is_cutpoint)
    }
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Mean taken as an offset from the minimum, so identical inputs return
/// their common value exactly.
fn exact_mean(v: &[f64]) -> f64 {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    lo + sorted_sum(v.iter().map(|x| x - lo).collect()) / v.len() as f64
}

/// Pools one parameter across imputations.
pub fn pool_scalar(name: &str, estimates: &[f64], std_errors: &[f64]) -> Result<PooledCoefficient> {
    let n = estimates.len();
    if n < 2 {
        return Err(PoolingError::TooFewFits(n));
    }
    if std_errors.len() != n {
        return Err(PoolingError::LengthMismatch);
    }
    let nf = n as f64;
    let mean = exact_mean(estimates);
    let within_var = exact_mean(&std_errors.iter().map(|s| s * s).collect::<Vec<_>>());
    let between_var = sorted_sum(estimates.iter().map(|c| (c - mean) * (c - mean)).collect()) / (nf - 1.0);
    let inflated = (1.0 + 1.0 / nf) * between_var;
    let pooled_se = (within_var + inflated).sqrt();
    let t_value = if mean == 0.0 { 0.0 } else { mean / pooled_se };
    let (df, p_value) = if between_var > 0.0 {
        let ratio = 1.0 + within_var / inflated;
        let df = (nf - 1.0) * ratio * ratio;
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive df");
        (Some(df), (2.0 * dist.sf(t_value.abs())).clamp(0.0, 1.0))
    } else {
        (None, normal_two_sided(t_value))
    };
    Ok(PooledCoefficient {
        name: name.to_string(),
        estimates: estimates.to_vec(),
        std_errors: std_errors.to_vec(),
        mean,
        within_var,
        between_var,
        pooled_se,
        t_value,
        df,
        p_value,
        is_cutpoint: false,
    })
}

/// Pools every coefficient and cutpoint of the per-imputation fits.
pub fn pool(fits: &[OrdinalFit]) -> Result<PooledFit> {
    if fits.len() < 2 {
        return Err(PoolingError::TooFewFits(fits.len()));
    }
    let names = fits[0].parameter_names();
    for (i, f) in fits.iter().enumerate() {
        if !f.converged {
            return Err(PoolingError::NotConverged(i));
        }
        if f.parameter_names() != names {
            return Err(PoolingError::MismatchedParameters(i));
        }
    }
    let estimates: Vec<Vec<f64>> = fits.iter().map(OrdinalFit::estimates).collect();
    let ses: Vec<Vec<f64>> = fits.iter().map(OrdinalFit::std_errors).collect();
    let n_beta = fits[0].beta.len();
    let rows = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let c: Vec<f64> = estimates.iter().map(|e| e[k]).collect();
            let s: Vec<f64> = ses.iter().map(|e| e[k]).collect();
            pool_scalar(name, &c, &s).map(|mut row| {
                row.is_cutpoint = k >= n_beta;
                row
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PooledFit { rows, m: fits.len() })
}

/// Coefficients (not cutpoints) with pooled p below `alpha`, in table order.
pub fn significance_filter(p: &PooledFit, alpha: f64) -> Result<Vec<String>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(PoolingError::InvalidAlpha(alpha));
    }
    Ok(p.coefficients()
        .filter(|r| r.p_value < alpha)
        .map(|r| r.name.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Spreadsheet-style evaluation: straight loops in input order.
    fn oracle_se(c: &[f64], s: &[f64]) -> f64 {
        let n = c.len() as f64;
        let mut cbar = 0.0;
        for v in c {
            cbar += v;
        }
        cbar /= n;
        let mut w = 0.0;
        for v in s {
            w += v * v;
        }
        w /= n;
        let mut b = 0.0;
        for v in c {
            b += (v - cbar) * (v - cbar);
        }
        b /= n - 1.0;
        (w + (1.0 + 1.0 / n) * b).sqrt()
    }

    fn fit_with(beta: f64, se: f64) -> OrdinalFit {
        OrdinalFit {
            predictors: vec!["x".into()],
            categories: vec![1, 2, 3],
            beta: vec![beta],
            alpha: vec![-1.0, 1.0],
            covariance: vec![
                vec![se * se, 0.0, 0.0],
                vec![0.0, 0.04, 0.0],
                vec![0.0, 0.0, 0.09],
            ],
            log_likelihood: -10.0,
            converged: true,
            iterations: 3,
            gradient_norm: 0.0,
            n_obs: 20,
        }
    }

    #[test]
    fn hand_case_two_imputations() {
        let r = pool_scalar("x", &[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.within_var, 1.0);
        assert_eq!(r.between_var, 2.0);
        assert_eq!(r.pooled_se, 2.0);
    }

    #[test]
    fn five_imputation_case() {
        let s = [0.40, 0.50, 0.45, 0.42, 0.48];
        let c = [1.00, 1.10, 0.90, 1.05, 0.95];
        // W = 1.0193 / 5 = 0.20386, B = 0.025 / 4 = 0.00625, SE^2 = 0.20386 + 1.2 * 0.00625
        let expected = 0.21136f64.sqrt();
        assert!((oracle_se(&c, &s) - expected).abs() < 1e-12);
        let r = pool_scalar("x", &c, &s).unwrap();
        assert!((r.pooled_se - expected).abs() < 1e-12);
        assert!((r.mean - 1.0).abs() < 1e-14);
        let df = 4.0 * (1.0_f64 + 0.20386 / (1.2 * 0.00625)).powi(2);
        assert!((r.df.unwrap() - df).abs() < 1e-6 * df);
    }

    #[test]
    fn identical_fits_pool_to_themselves() {
        let fits: Vec<OrdinalFit> = (0..5).map(|_| fit_with(0.7, 0.2)).collect();
        let p = pool(&fits).unwrap();
        let x = p.get("x").unwrap();
        assert_eq!(x.mean, 0.7);
        assert_eq!(x.between_var, 0.0);
        assert_eq!(x.pooled_se, 0.2);
        assert_eq!(x.df, None);
        assert_eq!(p.get("2|3").unwrap().pooled_se, 0.3);
        assert_eq!(p.cutpoints().count(), 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(pool(&[fit_with(0.1, 0.1)]), Err(PoolingError::TooFewFits(1)));
        let mut other = fit_with(0.1, 0.1);
        other.predictors = vec!["z".into()];
        assert_eq!(pool(&[fit_with(0.1, 0.1), other]), Err(PoolingError::MismatchedParameters(1)));
        let mut nc = fit_with(0.1, 0.1);
        nc.converged = false;
        assert_eq!(pool(&[fit_with(0.1, 0.1), nc]), Err(PoolingError::NotConverged(1)));
    }

    #[test]
    fn filter_thresholds() {
        let mk = |name: &str, p: f64| PooledCoefficient {
            name: name.into(),
            estimates: vec![],
            std_errors: vec![],
            mean: 0.0,
            within_var: 0.0,
            between_var: 0.0,
            pooled_se: 0.0,
            t_value: 0.0,
            df: None,
            p_value: p,
            is_cutpoint: false,
        };
        let all_half = PooledFit { rows: vec![mk("a", 0.5), mk("b", 0.5)], m: 5 };
        assert!(significance_filter(&all_half, 0.05).unwrap().is_empty());
        let mut cut = mk("1|2", 0.0);
        cut.is_cutpoint = true;
        let one = PooledFit { rows: vec![mk("a", 0.9), mk("b", 0.049), mk("c", 0.9), cut], m: 5 };
        assert_eq!(significance_filter(&one, 0.05).unwrap(), vec!["b"]);
        assert!(significance_filter(&one, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn decomposition_and_oracle(
            pairs in prop::collection::vec((-5.0f64..5.0, 0.01f64..3.0), 2..12)
        ) {
            let c: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let s: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let r = pool_scalar("x", &c, &s).unwrap();
            let n = c.len() as f64;
            prop_assert!((r.pooled_se.powi(2) - (r.within_var + (1.0 + 1.0 / n) * r.between_var)).abs() < 1e-12);
            prop_assert!((r.pooled_se - oracle_se(&c, &s)).abs() < 1e-12);
            prop_assert!(r.pooled_se >= r.within_var.sqrt());
        }

        #[test]
        fn order_of_fits_is_irrelevant(
            pairs in prop::collection::vec((-5.0f64..5.0, 0.01f64..3.0), 2..8), rot in 0usize..8
        ) {
            let fits: Vec<OrdinalFit> = pairs.iter().map(|&(b, s)| fit_with(b, s)).collect();
            let mut permuted = fits.clone();
            permuted.rotate_left(rot % fits.len());
            permuted.reverse();
            let a = pool(&fits).unwrap();
            let b = pool(&permuted).unwrap();
            for (x, y) in a.rows.iter().zip(&b.rows) {
                prop_assert_eq!(x.mean.to_bits(), y.mean.to_bits());
                prop_assert_eq!(x.pooled_se.to_bits(), y.pooled_se.to_bits());
                prop_assert_eq!(x.p_value.to_bits(), y.p_value.to_bits());
            }
        }

        #[test]
        fn spreading_estimates_never_shrinks_se(
            pairs in prop::collection::vec((-5.0f64..5.0, 0.01f64..3.0), 2..8), k in 1.0f64..4.0
        ) {
            let c: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let s: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            let wider: Vec<f64> = c.iter().map(|v| mean + k * (v - mean)).collect();
            let a = pool_scalar("x", &c, &s).unwrap();
            let b = pool_scalar("x", &wider, &s).unwrap();
            prop_assert!(b.pooled_se >= a.pooled_se * (1.0 - 1e-12));
        }

        #[test]
        fn zero_between_variance_iff_equal(v in -3.0f64..3.0, d in 0.0f64..1.0) {
            let r = pool_scalar("x", &[v, v + d, v], &[0.1, 0.1, 0.1]).unwrap();
            prop_assert_eq!(r.between_var == 0.0, d == 0.0 || v + d == v);
        }
    }
}
