//! Small shared numeric helpers: least squares, OLS with classical errors,
//! symmetric eigendecomposition sorted by eigenvalue, Nelder-Mead, and
//! bounded parameter transforms.

use nalgebra::{DMatrix, DVector};

/// Minimum-norm least-squares solve via SVD.
pub(crate) fn solve_lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().svd(true, true).solve(b, 1e-12).ok()
}

#[derive(Debug, Clone)]
pub(crate) struct OlsFit {
    pub coef: DVector<f64>,
    pub se: DVector<f64>,
    pub resid: DVector<f64>,
    pub fitted: DVector<f64>,
    pub r2: f64,
    pub adj_r2: f64,
    pub df_resid: usize,
}

/// OLS with classical (homoskedastic) standard errors. `x` carries the
/// intercept column if one is wanted; `centered_r2` selects whether R^2 is
/// measured against the mean (true) or against zero (false).
pub(crate) fn ols(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    centered_r2: bool,
) -> Result<OlsFit, &'static str> {
    let n = y.len();
    let k = x.ncols();
    if x.nrows() != n {
        return Err("row mismatch");
    }
    if n <= k {
        return Err("not enough observations");
    }
    let xtx = x.transpose() * x;
    let xtx_inv = xtx.clone().try_inverse().ok_or("collinear regressors")?;
    let coef = &xtx_inv * x.transpose() * y;
    let fitted = x * &coef;
    let resid = y - &fitted;
    let ssr = resid.dot(&resid);
    let tss = if centered_r2 {
        let mean = y.mean();
        y.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
    } else {
        y.dot(y)
    };
    let df_resid = n - k;
    let sigma2 = ssr / df_resid as f64;
    let se = DVector::from_iterator(k, (0..k).map(|j| (sigma2 * xtx_inv[(j, j)]).sqrt()));
    let r2 = if tss > 0.0 { 1.0 - ssr / tss } else { 1.0 };
    let adj_r2 = 1.0 - (1.0 - r2) * (n as f64 - 1.0) / (df_resid as f64);
    Ok(OlsFit {
        coef,
        se,
        resid,
        fitted,
        r2,
        adj_r2,
        df_resid,
    })
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending,
/// eigenvectors as columns matched to the sorted order.
pub(crate) fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, Vec<DVector<f64>>) {
    let eig = m.clone().symmetric_eigen();
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = idx
        .iter()
        .map(|&i| DVector::from(eig.eigenvectors.column(i).clone_owned()))
        .collect();
    (vals, vecs)
}

/// Empirical percentile (linear interpolation) of an unsorted sample.
pub(crate) fn percentile(sample: &[f64], p: f64) -> f64 {
    assert!(!sample.is_empty());
    let mut v = sample.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    }
}

/// Logistic map from the real line onto (lo, hi), and its inverse. Used to
/// run unconstrained Nelder-Mead over box-bounded decay parameters.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BoxBound {
    pub lo: f64,
    pub hi: f64,
}

impl BoxBound {
    pub fn to_param(&self, x: f64) -> f64 {
        self.lo + (self.hi - self.lo) / (1.0 + (-x).exp())
    }

    pub fn to_internal(&self, p: f64) -> f64 {
        let frac = ((p - self.lo) / (self.hi - self.lo)).clamp(1e-9, 1.0 - 1e-9);
        (frac / (1.0 - frac)).ln()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NmResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub converged: bool,
}

/// Nelder-Mead simplex minimization, deterministic, no restarts.
pub(crate) fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    initial_step: f64,
    max_iter: usize,
    tol: f64,
) -> NmResult {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += initial_step;
        simplex.push(p);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|p| f(p)).collect();

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| fv[a].partial_cmp(&fv[b]).expect("finite objective"));
        let reordered: Vec<Vec<f64>> = order.iter().map(|&i| simplex[i].clone()).collect();
        let reord_f: Vec<f64> = order.iter().map(|&i| fv[i]).collect();
        simplex = reordered;
        fv = reord_f;

        let spread = fv[n] - fv[0];
        let diam = (0..n)
            .map(|j| {
                simplex
                    .iter()
                    .map(|p| p[j])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    })
            })
            .map(|(lo, hi)| hi - lo)
            .fold(0.0f64, f64::max);
        if spread.abs() < tol && diam < tol {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64)
            .collect();
        let reflect: Vec<f64> = (0..n)
            .map(|j| centroid[j] + alpha * (centroid[j] - simplex[n][j]))
            .collect();
        let fr = f(&reflect);
        if fr < fv[0] {
            let expand: Vec<f64> = (0..n)
                .map(|j| centroid[j] + gamma * (reflect[j] - centroid[j]))
                .collect();
            let fe = f(&expand);
            if fe < fr {
                simplex[n] = expand;
                fv[n] = fe;
            } else {
                simplex[n] = reflect;
                fv[n] = fr;
            }
        } else if fr < fv[n - 1] {
            simplex[n] = reflect;
            fv[n] = fr;
        } else {
            let contract: Vec<f64> = (0..n)
                .map(|j| centroid[j] + rho * (simplex[n][j] - centroid[j]))
                .collect();
            let fc = f(&contract);
            if fc < fv[n] {
                simplex[n] = contract;
                fv[n] = fc;
            } else {
                for i in 1..=n {
                    for j in 0..n {
                        simplex[i][j] = simplex[0][j] + sigma * (simplex[i][j] - simplex[0][j]);
                    }
                    fv[i] = f(&simplex[i]);
                }
            }
        }
    }
    let mut best = 0;
    for i in 1..=n {
        if fv[i] < fv[best] {
            best = i;
        }
    }
    NmResult {
        x: simplex[best].clone(),
        fx: fv[best],
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ols_recovers_exact_line() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0]);
        let fit = ols(&y, &x, true).expect("fit");
        assert_relative_eq!(fit.coef[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(fit.coef[1], 2.0, epsilon = 1e-12);
        assert_relative_eq!(fit.r2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn nelder_mead_minimizes_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = nelder_mead(f, &[-1.2, 1.0], 0.5, 5000, 1e-12);
        assert!(r.converged);
        assert_relative_eq!(r.x[0], 1.0, epsilon = 1e-4);
        assert_relative_eq!(r.x[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn box_bound_roundtrip() {
        let b = BoxBound { lo: 0.05, hi: 10.0 };
        for p in [0.06, 0.73, 3.4, 9.9] {
            assert_relative_eq!(b.to_param(b.to_internal(p)), p, epsilon = 1e-9);
        }
    }

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]);
        let (vals, vecs) = sym_eigen_desc(&m);
        assert_relative_eq!(vals[0], 4.0, epsilon = 1e-12);
        assert_relative_eq!(vals[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(vecs[0][1].abs(), 1.0, epsilon = 1e-12);
    }
}
