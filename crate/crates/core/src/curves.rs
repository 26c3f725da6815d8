//! Curve construction: business-day discount bootstrap, flat-forward
//! interpolation, finite-difference forward extraction, Svensson fits for the
//! real curve, and duration-bucketed spread curves.
//!
//! Market-data curves follow the flat-forward convention (piecewise-constant
//! instantaneous forwards between nodes, the right node owning the open
//! interval to its left, flat extrapolation beyond the last node).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, BoxBound};
use crate::marketdata::{ConstituentPanel, CurvePanel, Family, PillarGrid, SeriesKind};

#[derive(Debug, Error)]
pub enum CurveError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("business-day counts must be positive and strictly increasing")]
    NonIncreasingBusinessDays,
    #[error("bump must satisfy 0 < 2h <= min pillar spacing and h < first pillar; got h = {0}")]
    BadBump(f64),
    #[error("tenor {0} is negative")]
    NegativeTenor(f64),
    #[error("underdetermined fit: {n_tenors} tenors for {n_params} parameters")]
    Underdetermined { n_tenors: usize, n_params: usize },
    #[error("fit did not converge after {0} starts")]
    NonConvergence(usize),
    #[error("fit refused: max residual {resid:.6} above cap {cap:.6}")]
    ResidualCap { resid: f64, cap: f64 },
    #[error("all tenors below the short-end floor {0}")]
    AllBelowFloor(f64),
    #[error(transparent)]
    MarketData(#[from] crate::marketdata::MarketDataError),
}

/// Continuously compounded zero rates on a pillar grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroCurve {
    grid: PillarGrid,
    zeros: Vec<f64>,
}

/// Instantaneous forwards on a pillar grid (decimal p.a., continuous
/// compounding). Interpolation convention is chosen by the caller:
/// [`ForwardCurve::forward_flat`] for market-data curves,
/// [`ForwardCurve::forward_linear`] for simulation grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardCurve {
    grid: PillarGrid,
    fwds: Vec<f64>,
}

impl ZeroCurve {
    pub fn new(grid: PillarGrid, zeros: Vec<f64>) -> Result<Self, CurveError> {
        if zeros.len() != grid.len() {
            return Err(CurveError::Invalid(format!(
                "{} zeros for {} tenors",
                zeros.len(),
                grid.len()
            )));
        }
        if zeros.iter().any(|z| !z.is_finite()) {
            return Err(CurveError::Invalid("non-finite zero rate".into()));
        }
        Ok(Self { grid, zeros })
    }

    pub fn grid(&self) -> &PillarGrid {
        &self.grid
    }

    pub fn zeros(&self) -> &[f64] {
        &self.zeros
    }

    /// Piecewise-constant forward implied on segment i, where segment 0 is
    /// (0, tau_0] and segment i is (tau_{i-1}, tau_i].
    fn segment_forward(&self, i: usize) -> f64 {
        let t = self.grid.tenors();
        if i == 0 {
            self.zeros[0]
        } else {
            (self.zeros[i] * t[i] - self.zeros[i - 1] * t[i - 1]) / (t[i] - t[i - 1])
        }
    }

    /// -ln P(tau) under the flat-forward convention, flat forward beyond the
    /// last node.
    pub fn log_discount(&self, tau: f64) -> f64 {
        debug_assert!(tau >= 0.0);
        let t = self.grid.tenors();
        let n = t.len();
        if tau <= t[0] {
            return self.zeros[0] * tau;
        }
        if tau >= t[n - 1] {
            return self.zeros[n - 1] * t[n - 1] + self.segment_forward(n - 1) * (tau - t[n - 1]);
        }
        let i = t.partition_point(|&x| x < tau); // first node >= tau
        self.zeros[i - 1] * t[i - 1] + self.segment_forward(i) * (tau - t[i - 1])
    }

    pub fn discount(&self, tau: f64) -> f64 {
        (-self.log_discount(tau)).exp()
    }

    /// Zero rate at an arbitrary tenor implied by flat-forward integration.
    pub fn zero_at(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            self.zeros[0]
        } else {
            self.log_discount(tau) / tau
        }
    }
}

impl ForwardCurve {
    pub fn new(grid: PillarGrid, fwds: Vec<f64>) -> Result<Self, CurveError> {
        if fwds.len() != grid.len() {
            return Err(CurveError::Invalid(format!(
                "{} forwards for {} tenors",
                fwds.len(),
                grid.len()
            )));
        }
        if fwds.iter().any(|f| !f.is_finite()) {
            return Err(CurveError::Invalid("non-finite forward".into()));
        }
        Ok(Self { grid, fwds })
    }

    pub fn grid(&self) -> &PillarGrid {
        &self.grid
    }

    pub fn fwds(&self) -> &[f64] {
        &self.fwds
    }

    /// Flat-forward lookup: the right node owns the open interval to its
    /// left; flat extrapolation on both ends.
    pub fn forward_flat(&self, tau: f64) -> f64 {
        debug_assert!(tau >= 0.0);
        let t = self.grid.tenors();
        let n = t.len();
        if tau <= t[0] {
            return self.fwds[0];
        }
        if tau >= t[n - 1] {
            return self.fwds[n - 1];
        }
        let i = t.partition_point(|&x| x < tau);
        self.fwds[i]
    }

    /// Piecewise-linear lookup with flat extrapolation on both ends.
    pub fn forward_linear(&self, tau: f64) -> f64 {
        let t = self.grid.tenors();
        let n = t.len();
        if tau <= t[0] {
            return self.fwds[0];
        }
        if tau >= t[n - 1] {
            return self.fwds[n - 1];
        }
        let i = t.partition_point(|&x| x < tau);
        let w = (tau - t[i - 1]) / (t[i] - t[i - 1]);
        self.fwds[i - 1] * (1.0 - w) + self.fwds[i] * w
    }

    /// Integral of the flat-forward curve over [0, tau].
    pub fn integral_flat(&self, tau: f64) -> f64 {
        debug_assert!(tau >= 0.0);
        let t = self.grid.tenors();
        let n = t.len();
        let mut acc = 0.0;
        let mut prev = 0.0;
        for i in 0..n {
            if tau <= t[i] {
                return acc + self.fwds[i] * (tau - prev);
            }
            acc += self.fwds[i] * (t[i] - prev);
            prev = t[i];
        }
        acc + self.fwds[n - 1] * (tau - prev)
    }
}

/// Flat-forward interpolation at an arbitrary tenor for either curve kind:
/// a `ZeroCurve` yields the integration-implied zero rate, a `ForwardCurve`
/// the piecewise-constant forward. Node tenors return the node value; tenors
/// beyond the last node extrapolate flat.
pub trait FlatForwardInterp {
    fn rate_at(&self, tau: f64) -> f64;
}

impl FlatForwardInterp for ZeroCurve {
    fn rate_at(&self, tau: f64) -> f64 {
        self.zero_at(tau)
    }
}

impl FlatForwardInterp for ForwardCurve {
    fn rate_at(&self, tau: f64) -> f64 {
        self.forward_flat(tau)
    }
}

pub fn interp_flat_forward<C: FlatForwardInterp>(curve: &C, tau: f64) -> Result<f64, CurveError> {
    if tau < 0.0 {
        return Err(CurveError::NegativeTenor(tau));
    }
    Ok(curve.rate_at(tau))
}

/// Bootstrap a zero curve from annualized business-day yields: the discount
/// is P = (1+y)^(-du/252) and the continuously compounded zero is
/// -ln P / (du/252) = ln(1+y), with tenors du/252.
pub fn bootstrap_discount(yields: &[f64], business_days: &[u32]) -> Result<ZeroCurve, CurveError> {
    if yields.len() != business_days.len() || yields.is_empty() {
        return Err(CurveError::Invalid(
            "yields and business-day counts must be non-empty and equal length".into(),
        ));
    }
    for w in business_days.windows(2) {
        if w[1] <= w[0] {
            return Err(CurveError::NonIncreasingBusinessDays);
        }
    }
    if business_days[0] == 0 {
        return Err(CurveError::NonIncreasingBusinessDays);
    }
    for &y in yields {
        if y <= -1.0 || !y.is_finite() {
            return Err(CurveError::Invalid(format!("yield {y} out of range")));
        }
    }
    let tenors: Vec<f64> = business_days.iter().map(|&du| du as f64 / 252.0).collect();
    let zeros: Vec<f64> = yields.iter().map(|&y| y.ln_1p()).collect();
    Ok(ZeroCurve::new(PillarGrid::new(tenors)?, zeros)?)
}

/// Instantaneous forwards from a zero curve by finite difference on the
/// flat-forward interpolated discount: f = -[lnP(c+h) - lnP(c-h)] / 2h.
///
/// The difference is centered inside each pillar's owning segment (at the
/// segment midpoint; one-sided at the first pillar), so each pillar reports
/// its segment's forward and integrating the result reproduces the input
/// zeros. Centering at a node would blend adjacent segments.
pub fn forward_from_zero(curve: &ZeroCurve, h: f64) -> Result<ForwardCurve, CurveError> {
    let t = curve.grid().tenors();
    let min_spacing = if t.len() > 1 {
        curve.grid().min_spacing()
    } else {
        f64::INFINITY
    };
    if !(h > 0.0) || 2.0 * h > min_spacing || h >= t[0] {
        return Err(CurveError::BadBump(h));
    }
    let mut fwds = Vec::with_capacity(t.len());
    // First pillar: one-sided difference ending at the node.
    fwds.push((curve.log_discount(t[0]) - curve.log_discount(t[0] - h)) / h);
    for i in 1..t.len() {
        let mid = 0.5 * (t[i - 1] + t[i]);
        fwds.push((curve.log_discount(mid + h) - curve.log_discount(mid - h)) / (2.0 * h));
    }
    ForwardCurve::new(curve.grid().clone(), fwds)
}

/// Svensson zero-yield parameters with decay rates in 1/years.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvenssonParams {
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

fn e1(x: f64) -> f64 {
    // (1 - e^-x)/x with the x -> 0 limit.
    if x.abs() < 1e-8 {
        1.0 - 0.5 * x
    } else {
        (-x).exp_m1() / -x
    }
}

impl SvenssonParams {
    pub fn zero_yield(&self, tau: f64) -> f64 {
        let x1 = self.lambda1 * tau;
        let x2 = self.lambda2 * tau;
        self.beta0
            + self.beta1 * e1(x1)
            + self.beta2 * (e1(x1) - (-x1).exp())
            + self.beta3 * (e1(x2) - (-x2).exp())
    }

    pub fn instantaneous_forward(&self, tau: f64) -> f64 {
        let x1 = self.lambda1 * tau;
        let x2 = self.lambda2 * tau;
        self.beta0
            + self.beta1 * (-x1).exp()
            + self.beta2 * x1 * (-x1).exp()
            + self.beta3 * x2 * (-x2).exp()
    }
}

#[derive(Debug, Clone)]
pub struct SvenssonFit {
    pub params: SvenssonParams,
    /// Largest absolute yield residual across tenors.
    pub max_residual: f64,
}

const LAMBDA_BOUND: BoxBound = BoxBound { lo: 0.02, hi: 20.0 };

fn svensson_design(grid: &[f64], l1: f64, l2: f64) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(grid.len(), 4, |i, j| {
        let x1 = l1 * grid[i];
        let x2 = l2 * grid[i];
        match j {
            0 => 1.0,
            1 => e1(x1),
            2 => e1(x1) - (-x1).exp(),
            _ => e1(x2) - (-x2).exp(),
        }
    })
}

/// Nonlinear least-squares Svensson fit to zero yields. The betas are
/// profiled out linearly for each (lambda1, lambda2) candidate; the decays
/// are minimized by Nelder-Mead with multi-start on non-convergence. Refuses
/// the fit when the max yield residual exceeds `residual_cap`.
pub fn fit_svensson(
    yields: &[f64],
    grid: &PillarGrid,
    residual_cap: f64,
) -> Result<SvenssonFit, CurveError> {
    if yields.len() != grid.len() {
        return Err(CurveError::Invalid(
            "yields length must match grid".into(),
        ));
    }
    if grid.len() < 6 {
        return Err(CurveError::Underdetermined {
            n_tenors: grid.len(),
            n_params: 6,
        });
    }
    let tenors = grid.tenors();
    let y = nalgebra::DVector::from_column_slice(yields);

    let profiled = |l1: f64, l2: f64| -> (f64, nalgebra::DVector<f64>) {
        let design = svensson_design(tenors, l1, l2);
        match linalg::solve_lstsq(&design, &y) {
            Some(beta) => {
                let resid = &design * &beta - &y;
                (resid.dot(&resid), beta)
            }
            None => (f64::INFINITY, nalgebra::DVector::zeros(4)),
        }
    };

    // Start values: beta profile is linear, so only decay starts matter.
    let starts: Vec<(f64, f64)> = std::iter::once((1.0, 0.3))
        .chain(
            [0.3, 1.0, 3.0]
                .iter()
                .flat_map(|&a| [0.1, 0.3, 1.0].iter().map(move |&b| (a, b)))
                .collect::<Vec<_>>(),
        )
        .collect();

    let mut best: Option<(f64, f64, f64)> = None;
    let mut tried = 0;
    for (s1, s2) in starts {
        tried += 1;
        let x0 = [LAMBDA_BOUND.to_internal(s1), LAMBDA_BOUND.to_internal(s2)];
        let r = linalg::nelder_mead(
            |x| profiled(LAMBDA_BOUND.to_param(x[0]), LAMBDA_BOUND.to_param(x[1])).0,
            &x0,
            0.5,
            600,
            1e-16,
        );
        let (l1, l2) = (LAMBDA_BOUND.to_param(r.x[0]), LAMBDA_BOUND.to_param(r.x[1]));
        let ssr = profiled(l1, l2).0;
        if best.map_or(true, |(b, _, _)| ssr < b) {
            best = Some((ssr, l1, l2));
        }
        // First start converging to a near-exact fit ends the search.
        if r.converged && ssr < 1e-18 {
            break;
        }
    }
    let (_, l1, l2) = best.ok_or(CurveError::NonConvergence(tried))?;
    let (_, beta) = profiled(l1, l2);
    let params = SvenssonParams {
        beta0: beta[0],
        beta1: beta[1],
        beta2: beta[2],
        beta3: beta[3],
        lambda1: l1,
        lambda2: l2,
    };
    let max_residual = tenors
        .iter()
        .zip(yields)
        .map(|(&t, &obs)| (params.zero_yield(t) - obs).abs())
        .fold(0.0f64, f64::max);
    if max_residual > residual_cap {
        return Err(CurveError::ResidualCap {
            resid: max_residual,
            cap: residual_cap,
        });
    }
    Ok(SvenssonFit {
        params,
        max_residual,
    })
}

/// Svensson instantaneous forwards on the grid tenors at or above the
/// short-end floor (short NTN-B tenors are extrapolation artifacts).
pub fn real_forward_curve(
    params: &SvenssonParams,
    grid: &PillarGrid,
    short_end_floor: f64,
) -> Result<ForwardCurve, CurveError> {
    if short_end_floor < 0.0 {
        return Err(CurveError::Invalid("short-end floor must be >= 0".into()));
    }
    let kept: Vec<f64> = grid
        .tenors()
        .iter()
        .copied()
        .filter(|&t| t >= short_end_floor)
        .collect();
    if kept.is_empty() {
        return Err(CurveError::AllBelowFloor(short_end_floor));
    }
    let fwds = kept.iter().map(|&t| params.instantaneous_forward(t)).collect();
    Ok(ForwardCurve::new(PillarGrid::new(kept)?, fwds)?)
}

/// Duration-bucketed spread curve: per date and vertex, the weight-averaged
/// constituent spread over |duration - vertex| <= half-width (closed on both
/// sides, so a constituent may enter two touching buckets). Cells with fewer
/// than `min_count` constituents, or zero total weight, are missing.
pub fn bucket_spreads(
    panel: &ConstituentPanel,
    family: Family,
    vertices: &PillarGrid,
    half_widths: &[f64],
    min_count: usize,
) -> Result<CurvePanel, CurveError> {
    if half_widths.len() != vertices.len() {
        return Err(CurveError::Invalid(
            "one half-width per vertex required".into(),
        ));
    }
    if half_widths.iter().any(|&w| !(w > 0.0)) {
        return Err(CurveError::Invalid("half-widths must be positive".into()));
    }
    if min_count == 0 {
        return Err(CurveError::Invalid("min_count must be >= 1".into()));
    }
    let mut dates: Vec<chrono::NaiveDate> = panel
        .rows()
        .iter()
        .filter(|r| r.family == family)
        .map(|r| r.date)
        .collect();
    dates.sort();
    dates.dedup();
    if dates.is_empty() {
        return Err(CurveError::Invalid(format!(
            "no constituents for family {family:?}"
        )));
    }
    let kind = match family {
        Family::Cdi => SeriesKind::CdiSpread,
        Family::Ipca => SeriesKind::IpcaSpread,
    };
    let mut values: Vec<Option<f64>> = Vec::with_capacity(dates.len() * vertices.len());
    for &date in &dates {
        for (vi, &v) in vertices.tenors().iter().enumerate() {
            let hw = half_widths[vi];
            let mut wsum = 0.0;
            let mut wspread = 0.0;
            let mut count = 0usize;
            for r in panel.rows() {
                if r.date == date && r.family == family && (r.duration - v).abs() <= hw {
                    count += 1;
                    wsum += r.weight;
                    wspread += r.weight * r.spread;
                }
            }
            values.push(if count >= min_count && wsum > 0.0 {
                Some(wspread / wsum)
            } else {
                None
            });
        }
    }
    Ok(CurvePanel::new(dates, vertices.clone(), values, kind)?)
}
