//! Calibration of the volatility architecture from weekly panels:
//! cross-sectional reconciliation (chi), per-block PCA of weekly changes,
//! nonlinear mapping of PCA loadings onto the exponential shape family,
//! factor-score correlation with nearest-correlation repair, and
//! exchange-rate volatility identification.

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, BoxBound};
use crate::marketdata::{CurvePanel, SeriesKind};
use crate::volarch::{
    AmplitudeMatrix, Block, BlockDims, BlockVolSpec, FxLoading, FxTarget, ShapeFamily, VolError,
};

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("{have} usable weekly rows, need >= {need}")]
    TooFewRows { have: usize, need: usize },
    #[error("change matrix has {rows} complete rows for {cols} pillars")]
    NotEnoughRows { rows: usize, cols: usize },
    #[error("covariance is rank deficient with zero variance")]
    ZeroVariance,
    #[error("zero-variance score column {0}")]
    ZeroVarianceColumn(usize),
    #[error("empty date intersection across blocks")]
    EmptyIntersection,
    #[error("optimizer failed to converge: {0}")]
    NonConvergence(String),
    #[error("nearest-correlation projection did not converge after {0} iterations")]
    HighamNonConvergence(usize),
    #[error("underdetermined basis: {pillars} pillars for {basis} basis functions")]
    Underdetermined { pillars: usize, basis: usize },
    #[error("{have} monthly observations, need >= {need}")]
    TooFewMonths { have: usize, need: usize },
    #[error("reference pillar {tenor}y populated on {weeks} weeks, need >= 30")]
    SparsePillar { tenor: f64, weeks: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Vol(#[from] VolError),
    #[error(transparent)]
    MarketData(#[from] crate::marketdata::MarketDataError),
}

/// Weekly changes at constant time-to-maturity, one column per pillar.
/// Cells are present only where both level observations exist.
#[derive(Debug, Clone)]
pub struct ChangeMatrix {
    dates: Vec<NaiveDate>,
    tenors: Vec<f64>,
    cells: Vec<Option<f64>>,
}

impl ChangeMatrix {
    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn tenors(&self) -> &[f64] {
        &self.tenors
    }

    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<f64> {
        self.cells[row * self.tenors.len() + col]
    }

    pub fn row_complete(&self, row: usize) -> bool {
        (0..self.tenors.len()).all(|c| self.cell(row, c).is_some())
    }

    /// Indices and dense matrix of the rows with every pillar present.
    pub fn complete_rows(&self) -> (Vec<usize>, DMatrix<f64>) {
        let idx: Vec<usize> = (0..self.n_rows()).filter(|&r| self.row_complete(r)).collect();
        let m = DMatrix::from_fn(idx.len(), self.tenors.len(), |r, c| {
            self.cell(idx[r], c).expect("complete row")
        });
        (idx, m)
    }

    /// Present values of one column with their dates.
    pub fn column_series(&self, col: usize) -> (Vec<NaiveDate>, Vec<f64>) {
        let mut dates = Vec::new();
        let mut vals = Vec::new();
        for r in 0..self.n_rows() {
            if let Some(v) = self.cell(r, col) {
                dates.push(self.dates[r]);
                vals.push(v);
            }
        }
        (dates, vals)
    }
}

/// First differences of a weekly panel at constant time-to-maturity (the
/// panel pillars are Musiela tenors, so consecutive rows difference
/// directly). Rate panels produce dense rows; spread panels delete cells
/// pairwise. Errors when fewer than 30 complete rows survive.
pub fn weekly_changes(panel: &CurvePanel) -> Result<ChangeMatrix, CalibError> {
    if panel.n_rows() < 2 {
        return Err(CalibError::TooFewRows { have: 0, need: 30 });
    }
    let n = panel.grid().len();
    let mut dates = Vec::with_capacity(panel.n_rows() - 1);
    let mut cells = Vec::with_capacity((panel.n_rows() - 1) * n);
    for r in 1..panel.n_rows() {
        dates.push(panel.dates()[r]);
        for c in 0..n {
            cells.push(match (panel.value(r, c), panel.value(r - 1, c)) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            });
        }
    }
    let out = ChangeMatrix {
        dates,
        tenors: panel.grid().tenors().to_vec(),
        cells,
    };
    let complete = (0..out.n_rows()).filter(|&r| out.row_complete(r)).count();
    if complete < 30 {
        return Err(CalibError::TooFewRows {
            have: complete,
            need: 30,
        });
    }
    Ok(out)
}

/// Factor retention: keep `target` factors, dropping the last one when its
/// variance share falls below `share_floor`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Retention {
    pub target: usize,
    pub share_floor: Option<f64>,
}

impl Retention {
    pub fn fixed(target: usize) -> Self {
        Self {
            target,
            share_floor: None,
        }
    }

    pub fn with_floor(target: usize, floor: f64) -> Self {
        Self {
            target,
            share_floor: Some(floor),
        }
    }
}

/// Eigenstructure of annualized weekly-change covariance for one block.
#[derive(Debug, Clone)]
pub struct PcaResult {
    pub block: Block,
    pub tenors: Vec<f64>,
    /// All eigenvalues, descending, decimal^2 per year.
    pub eigenvalues: Vec<f64>,
    /// Unit-norm eigenvectors, one per eigenvalue, oriented so the loading
    /// at the longest pillar is non-negative.
    pub eigenvectors: Vec<Vec<f64>>,
    pub variance_shares: Vec<f64>,
    pub retained: usize,
    pub n_rows: usize,
}

impl PcaResult {
    /// Volatility-scaled loading sqrt(lambda_p) v_p for a retained factor.
    pub fn scaled_loading(&self, p: usize) -> Vec<f64> {
        let s = self.eigenvalues[p].max(0.0).sqrt();
        self.eigenvectors[p].iter().map(|v| v * s).collect()
    }
}

/// PCA of mean-centered changes, annualized by 1/dt. Only complete rows
/// enter the covariance.
pub fn pca_block(
    changes: &ChangeMatrix,
    dt: f64,
    block: Block,
    retention: Retention,
) -> Result<PcaResult, CalibError> {
    let (idx, x) = changes.complete_rows();
    let rows = idx.len();
    let cols = changes.tenors().len();
    if rows < cols {
        return Err(CalibError::NotEnoughRows { rows, cols });
    }
    let mut centered = x;
    for c in 0..cols {
        let mean = centered.column(c).mean();
        for r in 0..rows {
            centered[(r, c)] -= mean;
        }
    }
    let cov = centered.transpose() * &centered / (dt * (rows as f64 - 1.0));
    let (mut vals, vecs) = linalg::sym_eigen_desc(&cov);
    if vals[0] <= 0.0 {
        return Err(CalibError::ZeroVariance);
    }
    for v in vals.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let total: f64 = vals.iter().sum();
    let shares: Vec<f64> = vals.iter().map(|v| v / total).collect();
    // Deterministic sign: loading at the longest pillar >= 0.
    let eigenvectors: Vec<Vec<f64>> = vecs
        .into_iter()
        .map(|v| {
            let anchor = (0..v.len())
                .rev()
                .find(|&i| v[i].abs() > 1e-14)
                .unwrap_or(v.len() - 1);
            let sign = if v[anchor] < 0.0 { -1.0 } else { 1.0 };
            v.iter().map(|x| x * sign).collect()
        })
        .collect();
    let mut retained = retention.target.min(cols);
    if let Some(floor) = retention.share_floor {
        if retained > 0 && shares[retained - 1] < floor {
            retained -= 1;
        }
    }
    if retained == 0 {
        return Err(CalibError::Invalid("no factors retained".into()));
    }
    Ok(PcaResult {
        block,
        tenors: changes.tenors().to_vec(),
        eigenvalues: vals,
        eigenvectors,
        variance_shares: shares,
        retained,
        n_rows: rows,
    })
}

/// Result of mapping PCA loadings onto the exponential family.
#[derive(Debug, Clone)]
pub struct LoadingsFit {
    /// Amplitude rows, decimal/sqrt(yr), one per retained factor.
    pub rows: Vec<Vec<f64>>,
    pub b2: f64,
    pub b3: f64,
    /// Uncentered R^2 of the stacked loading fit.
    pub r2: f64,
}

pub(crate) const DECAY_BOUNDS: BoxBound = BoxBound { lo: 0.05, hi: 10.0 };

fn rate_design(tenors: &[f64], b2: f64, b3: f64) -> DMatrix<f64> {
    DMatrix::from_fn(tenors.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => (-b2 * tenors[i]).exp(),
        _ => tenors[i] * (-b3 * tenors[i]).exp(),
    })
}

/// Stack retained scaled loadings as target vectors.
fn loading_targets(pca: &PcaResult) -> Vec<DVector<f64>> {
    (0..pca.retained)
        .map(|p| DVector::from_vec(pca.scaled_loading(p)))
        .collect()
}

fn profiled_rate_ssr(
    tenors: &[f64],
    targets: &[DVector<f64>],
    b2: f64,
    b3: f64,
) -> (f64, Vec<Vec<f64>>) {
    let design = rate_design(tenors, b2, b3);
    let mut ssr = 0.0;
    let mut rows = Vec::with_capacity(targets.len());
    for y in targets {
        match linalg::solve_lstsq(&design, y) {
            Some(a) => {
                let r = &design * &a - y;
                ssr += r.dot(&r);
                rows.push(a.iter().copied().collect());
            }
            None => return (f64::INFINITY, Vec::new()),
        }
    }
    (ssr, rows)
}

/// Half-life and peak-location initializers for the decay parameters, read
/// off the slope and curvature loadings.
fn decay_initializers(pca: &PcaResult, fallback: &ShapeFamily) -> (f64, f64) {
    let mut b2 = fallback.b2;
    if pca.retained >= 2 {
        let y = pca.scaled_loading(1);
        let head = y[0].abs();
        if head > 0.0 {
            if let Some(i) = (1..y.len()).find(|&i| y[i].abs() <= 0.5 * head) {
                b2 = (std::f64::consts::LN_2 / pca.tenors[i]).clamp(0.1, 5.0);
            }
        }
    }
    let mut b3 = fallback.b3;
    if pca.retained >= 3 {
        let y = pca.scaled_loading(2);
        let peak = (0..y.len())
            .max_by(|&a, &b| y[a].abs().partial_cmp(&y[b].abs()).expect("finite"))
            .unwrap_or(0);
        if pca.tenors[peak] > 0.0 {
            b3 = (1.0 / pca.tenors[peak]).clamp(0.2, 8.0);
        }
    }
    (b2, b3)
}

/// Map PCA loadings to the rate shape family by nonlinear least squares:
/// amplitudes are profiled out linearly, the decays minimized by Nelder-Mead
/// multi-start. With `shared_decays` the decays are held fixed and only the
/// amplitude rows are fitted.
pub fn fit_loadings(
    pca: &PcaResult,
    init: &ShapeFamily,
    shared_decays: Option<&ShapeFamily>,
) -> Result<LoadingsFit, CalibError> {
    if pca.retained == 0 {
        return Err(CalibError::Invalid("no retained factors".into()));
    }
    let targets = loading_targets(pca);
    let total: f64 = targets.iter().map(|y| y.dot(y)).sum();
    if total <= 0.0 {
        return Err(CalibError::ZeroVariance);
    }

    let (b2, b3) = if let Some(s) = shared_decays {
        (s.b2, s.b3)
    } else {
        let (h2, h3) = decay_initializers(pca, init);
        let starts = [
            (h2, h3),
            (init.b2, init.b3),
            (0.5, 2.0),
            (1.5, 1.0),
            (0.3, 4.0),
        ];
        let mut best: Option<(f64, f64, f64)> = None;
        for (s2, s3) in starts {
            let x0 = [DECAY_BOUNDS.to_internal(s2), DECAY_BOUNDS.to_internal(s3)];
            let r = linalg::nelder_mead(
                |x| {
                    profiled_rate_ssr(
                        &pca.tenors,
                        &targets,
                        DECAY_BOUNDS.to_param(x[0]),
                        DECAY_BOUNDS.to_param(x[1]),
                    )
                    .0
                },
                &x0,
                0.6,
                500,
                1e-16,
            );
            let cand = (
                r.fx,
                DECAY_BOUNDS.to_param(r.x[0]),
                DECAY_BOUNDS.to_param(r.x[1]),
            );
            if best.map_or(true, |(b, _, _)| cand.0 < b) {
                best = Some(cand);
            }
        }
        let (ssr, b2, b3) = best.ok_or_else(|| CalibError::NonConvergence("loading fit".into()))?;
        if !ssr.is_finite() {
            return Err(CalibError::NonConvergence("loading fit".into()));
        }
        (b2, b3)
    };

    let (ssr, rows) = profiled_rate_ssr(&pca.tenors, &targets, b2, b3);
    if !ssr.is_finite() || rows.is_empty() {
        return Err(CalibError::NonConvergence("amplitude solve".into()));
    }
    Ok(LoadingsFit {
        rows,
        b2,
        b3,
        r2: 1.0 - ssr / total,
    })
}

/// Credit-economy variant: Model A is the CDI-linked block, Model B the
/// IPCA-linked block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CreditModel {
    A,
    B,
}

/// Spread-block loading representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SpreadLoadings {
    /// Exponential family {1, e^(-c2 tau)} with amplitude rows (decimal/sqrt yr).
    Parametric {
        rows: Vec<Vec<f64>>,
        c2: f64,
        r2: f64,
    },
    /// Per-pillar scaled loadings, linear interpolation between vertices.
    Empirical {
        tenors: Vec<f64>,
        rows: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone)]
pub struct SpreadBlockFit {
    pub loadings: SpreadLoadings,
    pub warnings: Vec<String>,
}

fn spread_design(tenors: &[f64], c2: f64) -> DMatrix<f64> {
    DMatrix::from_fn(tenors.len(), 2, |i, j| {
        if j == 0 {
            1.0
        } else {
            (-c2 * tenors[i]).exp()
        }
    })
}

fn profiled_spread_ssr(tenors: &[f64], targets: &[DVector<f64>], c2: f64) -> (f64, Vec<Vec<f64>>) {
    let design = spread_design(tenors, c2);
    let mut ssr = 0.0;
    let mut rows = Vec::with_capacity(targets.len());
    for y in targets {
        match linalg::solve_lstsq(&design, y) {
            Some(a) => {
                let r = &design * &a - y;
                ssr += r.dot(&r);
                rows.push(a.iter().copied().collect());
            }
            None => return (f64::INFINITY, Vec::new()),
        }
    }
    (ssr, rows)
}

/// Fit the spread block. Model A fits the parametric spread shapes with the
/// decay capped at `c2_cap`; a fit driven to the cap falls back to empirical
/// loadings with a warning. Model B keeps empirical per-pillar loadings.
pub fn fit_spread_block(
    pca: &PcaResult,
    model: CreditModel,
    c2_cap: f64,
) -> Result<SpreadBlockFit, CalibError> {
    if pca.retained == 0 {
        return Err(CalibError::Invalid("no retained factors".into()));
    }
    let targets = loading_targets(pca);
    let empirical = || SpreadLoadings::Empirical {
        tenors: pca.tenors.clone(),
        rows: (0..pca.retained).map(|p| pca.scaled_loading(p)).collect(),
    };
    if model == CreditModel::B {
        return Ok(SpreadBlockFit {
            loadings: empirical(),
            warnings: Vec::new(),
        });
    }
    let total: f64 = targets.iter().map(|y| y.dot(y)).sum();
    if total <= 0.0 {
        return Err(CalibError::ZeroVariance);
    }
    let bound = BoxBound {
        lo: 0.05,
        hi: c2_cap,
    };
    let mut best: Option<(f64, f64)> = None;
    for start in [0.5, 1.5, 3.0] {
        let r = linalg::nelder_mead(
            |x| profiled_spread_ssr(&pca.tenors, &targets, bound.to_param(x[0])).0,
            &[bound.to_internal(start)],
            0.8,
            400,
            1e-16,
        );
        let cand = (r.fx, bound.to_param(r.x[0]));
        if best.map_or(true, |(b, _)| cand.0 < b) {
            best = Some(cand);
        }
    }
    let (ssr, c2) = best.ok_or_else(|| CalibError::NonConvergence("spread fit".into()))?;
    if c2 > c2_cap * (1.0 - 1e-3) {
        return Ok(SpreadBlockFit {
            loadings: empirical(),
            warnings: vec![format!(
                "spread decay driven to the feasibility bound {c2_cap}/yr; using empirical loadings"
            )],
        });
    }
    let (_, rows) = profiled_spread_ssr(&pca.tenors, &targets, c2);
    Ok(SpreadBlockFit {
        loadings: SpreadLoadings::Parametric {
            rows,
            c2,
            r2: 1.0 - ssr / total,
        },
        warnings: Vec::new(),
    })
}

/// Stacked per-date factor innovations across the three blocks.
#[derive(Debug, Clone)]
pub struct FactorScores {
    dates: Vec<NaiveDate>,
    /// rows x m, column order: nominal factors, real factors, spread factors.
    data: DMatrix<f64>,
    dims: BlockDims,
}

impl FactorScores {
    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn dims(&self) -> BlockDims {
        self.dims
    }

    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn m(&self) -> usize {
        self.dims.m()
    }

    /// Restrict to dates in [from, to] (inclusive); None bounds are open.
    pub fn window(&self, from: Option<NaiveDate>, to: Option<NaiveDate>) -> FactorScores {
        let keep: Vec<usize> = (0..self.n_rows())
            .filter(|&r| {
                from.map_or(true, |f| self.dates[r] >= f) && to.map_or(true, |t| self.dates[r] <= t)
            })
            .collect();
        FactorScores {
            dates: keep.iter().map(|&r| self.dates[r]).collect(),
            data: DMatrix::from_fn(keep.len(), self.m(), |r, c| self.data[(keep[r], c)]),
            dims: self.dims,
        }
    }
}

/// Project block changes onto retained eigenvectors and stack the scores on
/// the dates where every block has a complete row.
pub fn factor_scores(
    nominal: (&ChangeMatrix, &PcaResult),
    real: (&ChangeMatrix, &PcaResult),
    spread: (&ChangeMatrix, &PcaResult),
) -> Result<FactorScores, CalibError> {
    let blocks = [nominal, real, spread];
    // Joint dates: full-row intersection across all blocks.
    let mut joint: Option<Vec<NaiveDate>> = None;
    for (ch, _) in &blocks {
        let dates: Vec<NaiveDate> = (0..ch.n_rows())
            .filter(|&r| ch.row_complete(r))
            .map(|r| ch.dates()[r])
            .collect();
        joint = Some(match joint {
            None => dates,
            Some(prev) => {
                let set: std::collections::HashSet<_> = dates.into_iter().collect();
                prev.into_iter().filter(|d| set.contains(d)).collect()
            }
        });
    }
    let joint = joint.expect("three blocks");
    if joint.is_empty() {
        return Err(CalibError::EmptyIntersection);
    }
    let dims = BlockDims {
        m_n: nominal.1.retained,
        m_r: real.1.retained,
        m_s: spread.1.retained,
    };
    let mut data = DMatrix::zeros(joint.len(), dims.m());
    let mut col0 = 0;
    for (ch, pca) in &blocks {
        let date_to_row: std::collections::HashMap<NaiveDate, usize> = ch
            .dates()
            .iter()
            .enumerate()
            .map(|(r, d)| (*d, r))
            .collect();
        for (jr, d) in joint.iter().enumerate() {
            let r = date_to_row[d];
            for k in 0..pca.retained {
                let mut acc = 0.0;
                for (c, v) in pca.eigenvectors[k].iter().enumerate() {
                    acc += v * ch.cell(r, c).expect("complete row");
                }
                data[(jr, col0 + k)] = acc;
            }
        }
        col0 += pca.retained;
    }
    Ok(FactorScores {
        dates: joint,
        data,
        dims,
    })
}

#[derive(Debug, Clone)]
pub struct CorrelationEstimate {
    pub rho_hat: DMatrix<f64>,
    pub n_obs: usize,
    pub max_within_block_offdiag: f64,
    pub warnings: Vec<String>,
}

/// Sample correlation of the stacked scores. Within-block entries are near
/// zero by PCA orthogonality on each block's own panel; restricting to the
/// joint panel perturbs them, so they are reported, not zeroed, and a
/// warning fires above 0.15.
pub fn correlation_matrix(scores: &FactorScores) -> Result<CorrelationEstimate, CalibError> {
    let n = scores.n_rows();
    if n < 30 {
        return Err(CalibError::TooFewRows { have: n, need: 30 });
    }
    let m = scores.m();
    let x = scores.data();
    let means: Vec<f64> = (0..m).map(|c| x.column(c).mean()).collect();
    let mut cov = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let mut acc = 0.0;
            for r in 0..n {
                acc += (x[(r, i)] - means[i]) * (x[(r, j)] - means[j]);
            }
            cov[(i, j)] = acc / (n as f64 - 1.0);
            cov[(j, i)] = cov[(i, j)];
        }
    }
    for c in 0..m {
        if cov[(c, c)] <= 0.0 {
            return Err(CalibError::ZeroVarianceColumn(c));
        }
    }
    let mut rho = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            rho[(i, j)] = cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt();
        }
    }
    let mut max_within: f64 = 0.0;
    for block in [Block::Nominal, Block::Real, Block::Spread] {
        let r = scores.dims().range(block);
        for i in r.clone() {
            for j in r.clone() {
                if i != j {
                    max_within = max_within.max(rho[(i, j)].abs());
                }
            }
        }
    }
    let mut warnings = Vec::new();
    if max_within > 0.15 {
        warnings.push(format!(
            "within-block score correlation {max_within:.3} above 0.15; check panel alignment"
        ));
    }
    Ok(CorrelationEstimate {
        rho_hat: rho,
        n_obs: n,
        max_within_block_offdiag: max_within,
        warnings,
    })
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

fn proj_psd(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn renormalize_to_unit_diag(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    let d: Vec<f64> = (0..n).map(|i| m[(i, i)].sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] /= d[i] * d[j];
        }
    }
    for i in 0..n {
        m[(i, i)] = 1.0;
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Nearest positive-definite correlation matrix by alternating projections
/// (PSD cone and unit-diagonal set, with Dykstra's correction). Inputs that
/// already meet the eigenvalue floor are returned unchanged. After
/// convergence, eigenvalues are floored at `eig_floor` and the matrix is
/// renormalized to unit diagonal.
pub fn nearest_correlation(
    rho_hat: &DMatrix<f64>,
    eig_floor: f64,
) -> Result<DMatrix<f64>, CalibError> {
    let n = rho_hat.nrows();
    if rho_hat.ncols() != n {
        return Err(CalibError::Invalid("matrix not square".into()));
    }
    for i in 0..n {
        if (rho_hat[(i, i)] - 1.0).abs() > 1e-8 {
            return Err(CalibError::Invalid(format!(
                "diagonal entry {i} is {}, expected 1",
                rho_hat[(i, i)]
            )));
        }
        for j in 0..i {
            if (rho_hat[(i, j)] - rho_hat[(j, i)]).abs() > 1e-8 {
                return Err(CalibError::Invalid(format!("asymmetric at ({i},{j})")));
            }
        }
    }
    if min_eigenvalue(rho_hat) >= eig_floor {
        return Ok(rho_hat.clone());
    }

    let max_iter = 200;
    let mut y = rho_hat.clone();
    let mut ds = DMatrix::zeros(n, n);
    let mut converged = false;
    for _ in 0..max_iter {
        let r = &y - &ds;
        let x = proj_psd(&r, 0.0);
        ds = &x - &r;
        let mut y_new = x;
        for i in 0..n {
            y_new[(i, i)] = 1.0;
        }
        let delta = (&y_new - &y).norm() / y.norm().max(1.0);
        y = y_new;
        if delta < 1e-10 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(CalibError::HighamNonConvergence(max_iter));
    }
    // Floor the spectrum strictly above the requested minimum so the final
    // unit-diagonal renormalization cannot pull it back below.
    let mut out = proj_psd(&y, eig_floor * 1.05 + 1e-300);
    renormalize_to_unit_diag(&mut out);
    if min_eigenvalue(&out) < eig_floor {
        let mut again = proj_psd(&out, eig_floor * 1.5);
        renormalize_to_unit_diag(&mut again);
        out = again;
    }
    Ok(out)
}

/// Basis for the deterministic reconciliation adjustment chi.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ChiBasis {
    /// Polynomial of the given degree (<= 3).
    Poly(usize),
    /// Natural cubic-style truncated-power basis with the given knot count (<= 4).
    Spline(usize),
}

/// Smooth deterministic adjustment absorbing the cross-sectional triangle
/// gap; its sup-norm is a data-quality diagnostic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChiAdjustment {
    pub basis: ChiBasis,
    pub knots: Vec<f64>,
    pub coeffs: Vec<f64>,
    pub sup_norm: f64,
    /// Root-mean-square gap remaining after the adjustment.
    pub residual_rms: f64,
}

impl ChiAdjustment {
    pub fn eval(&self, tau: f64) -> f64 {
        let mut acc = 0.0;
        let deg = match self.basis {
            ChiBasis::Poly(d) => d,
            ChiBasis::Spline(_) => 3,
        };
        for (j, &c) in self.coeffs.iter().enumerate() {
            acc += c * if j <= deg {
                tau.powi(j as i32)
            } else {
                let k = self.knots[j - deg - 1];
                (tau - k).max(0.0).powi(3)
            };
        }
        acc
    }
}

/// Weighted least-squares fit of the triangle gap over a small smooth basis.
/// Returns the adjustment and any sup-norm alarm warnings (threshold
/// `sup_alarm`, decimal p.a.).
pub fn chi_adjust(
    gaps: &[(f64, f64)],
    weights: Option<&[f64]>,
    basis: ChiBasis,
    sup_alarm: f64,
) -> Result<(ChiAdjustment, Vec<String>), CalibError> {
    let n = gaps.len();
    let (deg, knots): (usize, Vec<f64>) = match basis {
        ChiBasis::Poly(d) => {
            if d > 3 {
                return Err(CalibError::Invalid("polynomial degree must be <= 3".into()));
            }
            (d, Vec::new())
        }
        ChiBasis::Spline(k) => {
            if k > 4 {
                return Err(CalibError::Invalid("spline knots must be <= 4".into()));
            }
            let lo = gaps.iter().map(|g| g.0).fold(f64::INFINITY, f64::min);
            let hi = gaps.iter().map(|g| g.0).fold(f64::NEG_INFINITY, f64::max);
            let knots = (1..=k)
                .map(|i| lo + (hi - lo) * i as f64 / (k as f64 + 1.0))
                .collect();
            (3, knots)
        }
    };
    let n_basis = deg + 1 + knots.len();
    if n < n_basis {
        return Err(CalibError::Underdetermined {
            pillars: n,
            basis: n_basis,
        });
    }
    if let Some(w) = weights {
        if w.len() != n || w.iter().any(|&x| !(x >= 0.0)) {
            return Err(CalibError::Invalid("weights must be non-negative, one per pillar".into()));
        }
    }
    let sw: Vec<f64> = match weights {
        Some(w) => w.iter().map(|&x| x.sqrt()).collect(),
        None => vec![1.0; n],
    };
    let design = DMatrix::from_fn(n, n_basis, |i, j| {
        let tau = gaps[i].0;
        sw[i] * if j <= deg {
            tau.powi(j as i32)
        } else {
            (tau - knots[j - deg - 1]).max(0.0).powi(3)
        }
    });
    let y = DVector::from_iterator(n, gaps.iter().zip(&sw).map(|(g, s)| g.1 * s));
    let coeffs =
        linalg::solve_lstsq(&design, &y).ok_or_else(|| CalibError::NonConvergence("chi".into()))?;
    let chi = ChiAdjustment {
        basis,
        knots,
        coeffs: coeffs.iter().copied().collect(),
        sup_norm: 0.0,
        residual_rms: 0.0,
    };
    let sup = gaps
        .iter()
        .map(|g| chi.eval(g.0).abs())
        .fold(0.0f64, f64::max);
    let rms = (gaps
        .iter()
        .map(|g| (g.1 - chi.eval(g.0)).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    let chi = ChiAdjustment {
        sup_norm: sup,
        residual_rms: rms,
        ..chi
    };
    let mut warnings = Vec::new();
    if sup > sup_alarm {
        warnings.push(format!(
            "triangle reconciliation sup-norm {:.1} bp above the {:.1} bp alarm; check curve sources",
            sup * 1e4,
            sup_alarm * 1e4
        ));
    }
    Ok((chi, warnings))
}

/// Monthly price-index levels (e.g. IPCA), one value per calendar month.
#[derive(Debug, Clone)]
pub struct MonthlyIndex {
    /// First day of each month, strictly increasing.
    pub months: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

impl MonthlyIndex {
    pub fn new(months: Vec<NaiveDate>, values: Vec<f64>) -> Result<Self, CalibError> {
        if months.len() != values.len() || months.is_empty() {
            return Err(CalibError::Invalid("months/values mismatch".into()));
        }
        for w in months.windows(2) {
            if w[1] <= w[0] {
                return Err(CalibError::Invalid("months must increase".into()));
            }
        }
        if values.iter().any(|&v| !(v > 0.0)) {
            return Err(CalibError::Invalid("index levels must be positive".into()));
        }
        Ok(Self { months, values })
    }

    /// CSV schema: `month,index` with month as YYYY-MM.
    pub fn load(path: &std::path::Path) -> Result<Self, CalibError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| CalibError::Invalid(format!("read {path:?}: {e}")))?;
        let mut months = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| CalibError::Invalid(format!("row {i}: {e}")))?;
            let m = rec.get(0).unwrap_or("");
            let date = NaiveDate::parse_from_str(&format!("{m}-01"), "%Y-%m-%d")
                .map_err(|_| CalibError::Invalid(format!("row {i}: bad month `{m}`")))?;
            let v: f64 = rec
                .get(1)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| CalibError::Invalid(format!("row {i}: bad index value")))?;
            months.push(date);
            values.push(v);
        }
        Self::new(months, values)
    }
}

/// Identified exchange-rate volatility with its diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FxCalibration {
    pub loading: FxLoading,
    /// Total annualized volatility, decimal/sqrt(yr).
    pub total: f64,
    /// rho-weighted norm of the factor-spanned component.
    pub spanned: f64,
    pub idiosyncratic: f64,
    pub r2: f64,
    pub n_obs: usize,
}

fn month_key(d: NaiveDate) -> (i32, u32) {
    (d.year(), d.month())
}

/// Inflation-FX volatility from monthly index levels: annualized variance of
/// deseasonalized monthly log-returns gives the total; the direction comes
/// from OLS of the residuals on monthly-aggregated unit-variance factor
/// scores (summed within calendar months). The stored loading is the
/// factor-spanned vector; the idiosyncratic remainder has no driver in the
/// factor space.
pub fn calibrate_sigma_i(
    monthly: &MonthlyIndex,
    scores: &FactorScores,
    restricted: bool,
) -> Result<FxCalibration, CalibError> {
    let n_ret = monthly.values.len().saturating_sub(1);
    if n_ret < 24 {
        return Err(CalibError::TooFewMonths {
            have: n_ret,
            need: 24,
        });
    }
    let mut returns: Vec<(NaiveDate, f64)> = Vec::with_capacity(n_ret);
    for i in 1..monthly.values.len() {
        returns.push((
            monthly.months[i],
            (monthly.values[i] / monthly.values[i - 1]).ln(),
        ));
    }
    // De-seasonalize by calendar-month means.
    let mut month_sum = [0.0f64; 13];
    let mut month_cnt = [0usize; 13];
    for (d, r) in &returns {
        month_sum[d.month() as usize] += r;
        month_cnt[d.month() as usize] += 1;
    }
    let deseas: Vec<(NaiveDate, f64)> = returns
        .iter()
        .map(|(d, r)| {
            let m = d.month() as usize;
            (*d, r - month_sum[m] / month_cnt[m].max(1) as f64)
        })
        .collect();
    let var = |xs: &[f64]| -> f64 {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
    };
    let vals: Vec<f64> = deseas.iter().map(|x| x.1).collect();
    let total = (12.0 * var(&vals)).sqrt();

    // Weekly score time step inferred from the score dates themselves.
    let dt_week: f64 = 1.0 / 52.0;
    let m = scores.m();
    let sds: Vec<f64> = (0..m)
        .map(|c| {
            let col: Vec<f64> = (0..scores.n_rows()).map(|r| scores.data()[(r, c)]).collect();
            var(&col).sqrt()
        })
        .collect();
    if sds.iter().any(|&s| s <= 0.0) {
        return Err(CalibError::ZeroVarianceColumn(0));
    }
    // Permitted regressors: real block plus the nominal level factor.
    let permitted: Vec<usize> = if restricted {
        std::iter::once(0)
            .chain(scores.dims().range(Block::Real))
            .collect()
    } else {
        (0..m).collect()
    };
    // Aggregate standardized weekly scores by calendar month.
    let mut by_month: std::collections::HashMap<(i32, u32), Vec<f64>> =
        std::collections::HashMap::new();
    for r in 0..scores.n_rows() {
        let key = month_key(scores.dates()[r]);
        let entry = by_month.entry(key).or_insert_with(|| vec![0.0; m]);
        for c in 0..m {
            entry[c] += scores.data()[(r, c)] / sds[c];
        }
    }
    let usable: Vec<usize> = (0..deseas.len())
        .filter(|&i| by_month.contains_key(&month_key(deseas[i].0)))
        .collect();
    let (alpha, spanned, idio, r2) = if usable.len() > permitted.len() + 2 {
        let y = DVector::from_iterator(usable.len(), usable.iter().map(|&i| deseas[i].1));
        let x = DMatrix::from_fn(usable.len(), permitted.len(), |r, c| {
            by_month[&month_key(deseas[usable[r]].0)][permitted[c]]
        });
        match linalg::ols(&y, &x, false) {
            Ok(fit) => {
                let mut alpha = vec![0.0; m];
                for (ci, &k) in permitted.iter().enumerate() {
                    // Coefficient per summed unit-variance weekly score ->
                    // loading per sqrt(yr).
                    alpha[k] = fit.coef[ci] / dt_week.sqrt();
                }
                let fitted: Vec<f64> = fit.fitted.iter().copied().collect();
                let spanned2 = 12.0 * var(&fitted) * (usable.len() as f64 - 1.0)
                    / (usable.len() as f64 - 1.0);
                let resid: Vec<f64> = fit.resid.iter().copied().collect();
                let idio2 = 12.0 * var(&resid);
                let tot2 = total * total;
                let r2 = (spanned2 / tot2).clamp(0.0, 1.0);
                (alpha, spanned2.sqrt(), idio2.sqrt(), r2)
            }
            Err(_) => (vec![0.0; m], 0.0, total, 0.0),
        }
    } else {
        (vec![0.0; m], 0.0, total, 0.0)
    };
    Ok(FxCalibration {
        loading: FxLoading::new(FxTarget::Inflation, alpha, restricted)?,
        total,
        spanned,
        idiosyncratic: idio,
        r2,
        n_obs: deseas.len(),
    })
}

/// Credit-FX volatility set by convention to the annualized realized vol of
/// the reference-pillar spread changes (sqrt(52) times the weekly std); the
/// direction comes from OLS on unit-variance factor innovations and is
/// rescaled so the rho-weighted loading norm equals the realized total.
pub fn calibrate_sigma_j(
    spread_changes: &ChangeMatrix,
    scores: &FactorScores,
    rho: &DMatrix<f64>,
    ref_pillar: f64,
    restricted: bool,
) -> Result<FxCalibration, CalibError> {
    let col = spread_changes
        .tenors()
        .iter()
        .position(|&t| (t - ref_pillar).abs() < 1e-9)
        .ok_or_else(|| CalibError::Invalid(format!("pillar {ref_pillar}y not in spread panel")))?;
    let (dates, series) = spread_changes.column_series(col);
    if series.len() < 30 {
        return Err(CalibError::SparsePillar {
            tenor: ref_pillar,
            weeks: series.len(),
        });
    }
    let var = |xs: &[f64]| -> f64 {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
    };
    let total = (52.0 * var(&series)).sqrt();
    let m = scores.m();
    let dt_week: f64 = 1.0 / 52.0;
    let sds: Vec<f64> = (0..m)
        .map(|c| {
            let col: Vec<f64> = (0..scores.n_rows()).map(|r| scores.data()[(r, c)]).collect();
            var(&col).sqrt()
        })
        .collect();
    let permitted: Vec<usize> = if restricted {
        std::iter::once(0)
            .chain(scores.dims().range(Block::Spread))
            .collect()
    } else {
        (0..m).collect()
    };
    let score_row: std::collections::HashMap<NaiveDate, usize> = scores
        .dates()
        .iter()
        .enumerate()
        .map(|(r, d)| (*d, r))
        .collect();
    let matched: Vec<(usize, f64)> = dates
        .iter()
        .zip(&series)
        .filter_map(|(d, &v)| score_row.get(d).map(|&r| (r, v)))
        .collect();
    let (mut alpha, residual_vol, r2, n_obs) = if matched.len() > permitted.len() + 2 {
        let y = DVector::from_iterator(matched.len(), matched.iter().map(|x| x.1));
        let x = DMatrix::from_fn(matched.len(), permitted.len(), |r, c| {
            scores.data()[(matched[r].0, permitted[c])] / sds[permitted[c]]
        });
        match linalg::ols(&y, &x, false) {
            Ok(fit) => {
                let mut alpha = vec![0.0; m];
                for (ci, &k) in permitted.iter().enumerate() {
                    alpha[k] = fit.coef[ci] / dt_week.sqrt();
                }
                let resid: Vec<f64> = fit.resid.iter().copied().collect();
                ((alpha), (52.0 * var(&resid)).sqrt(), fit.r2.max(0.0), matched.len())
            }
            Err(_) => (vec![0.0; m], total, 0.0, matched.len()),
        }
    } else {
        (vec![0.0; m], total, 0.0, matched.len())
    };
    // Rescale the direction to the realized total (identification by
    // convention), when the regression produced a usable direction.
    let av = DVector::from_column_slice(&alpha);
    let norm2 = (av.transpose() * rho * &av)[(0, 0)];
    let spanned = norm2.max(0.0).sqrt();
    if spanned > 1e-12 {
        let scale = total / spanned;
        for a in alpha.iter_mut() {
            *a *= scale;
        }
    }
    Ok(FxCalibration {
        loading: FxLoading::new(FxTarget::Credit, alpha, restricted)?,
        total,
        spanned,
        idiosyncratic: residual_vol,
        r2,
        n_obs,
    })
}

/// Calibration configuration (windows and file locations live at the CLI).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibConfig {
    /// Weekly step in years.
    pub dt: f64,
    pub model: CreditModel,
    pub retention_nominal: Retention,
    pub retention_real: Retention,
    pub retention_spread: Retention,
    /// Share decay parameters b2, b3 between the nominal and real blocks.
    pub shared_decays: bool,
    /// Real-curve pillars below this tenor are excluded from PCA.
    pub real_short_end_floor: f64,
    /// Spread vertices kept only when populated on at least this many weeks.
    pub min_vertex_weeks: usize,
    /// Explicit sigma_J reference pillar; otherwise the shortest vertex with
    /// >= 70% coverage is used.
    pub sigma_j_ref_pillar: Option<f64>,
    pub c2_cap: f64,
    pub eig_floor: f64,
    /// Sup-norm alarm for the reconciliation adjustment, decimal p.a.
    pub chi_alarm: f64,
    pub chi_basis: ChiBasis,
    /// Enforce the baseline FX-loading sparsity restrictions.
    pub sparsity_restricted: bool,
    pub shape_init: ShapeFamily,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 52.0,
            model: CreditModel::A,
            retention_nominal: Retention::with_floor(3, 0.03),
            retention_real: Retention::fixed(2),
            retention_spread: Retention::with_floor(2, 0.03),
            shared_decays: true,
            real_short_end_floor: 1.0,
            min_vertex_weeks: 30,
            sigma_j_ref_pillar: None,
            c2_cap: 5.0,
            eig_floor: 1e-8,
            chi_alarm: 0.0010,
            chi_basis: ChiBasis::Poly(2),
            sparsity_restricted: true,
            shape_init: ShapeFamily {
                b2: 0.7,
                b3: 3.4,
                c2: 3.7,
            },
        }
    }
}

/// Per-block summary carried in the calibration report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: String,
    pub tenors: Vec<f64>,
    /// Eigenvalues in bp^2/yr.
    pub eigenvalues_bp2: Vec<f64>,
    pub variance_shares: Vec<f64>,
    pub retained: usize,
    pub n_rows: usize,
    pub fit_r2: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub model: CreditModel,
    pub blocks: Vec<BlockReport>,
    pub b2: f64,
    pub b3: f64,
    pub spread_loadings: SpreadLoadings,
    pub rho_hat: Vec<Vec<f64>>,
    pub rho_model: Vec<Vec<f64>>,
    pub max_within_block_offdiag: f64,
    pub chi: Option<ChiAdjustment>,
    pub sigma_i: FxCalibration,
    pub sigma_j: FxCalibration,
    pub sigma_j_ref_pillar: f64,
    pub joint_weeks: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CalibrationOutput {
    pub spec: BlockVolSpec,
    pub report: CalibrationReport,
    pub scores: FactorScores,
}

/// Aligned weekly input panels for one calibration window.
#[derive(Debug, Clone)]
pub struct CalibPanels {
    pub nominal: CurvePanel,
    pub real: CurvePanel,
    pub cdi_spread: CurvePanel,
    pub ipca_spread: CurvePanel,
}

fn zero_within_blocks(rho: &DMatrix<f64>, dims: BlockDims) -> DMatrix<f64> {
    let mut out = rho.clone();
    for block in [Block::Nominal, Block::Real, Block::Spread] {
        let r = dims.range(block);
        for i in r.clone() {
            for j in r.clone() {
                if i != j {
                    out[(i, j)] = 0.0;
                }
            }
        }
    }
    out
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Vertices populated on at least `min_weeks` rows.
fn coverage_filter(panel: &CurvePanel, min_weeks: usize) -> Vec<f64> {
    panel
        .grid()
        .tenors()
        .iter()
        .enumerate()
        .filter(|(c, _)| {
            (0..panel.n_rows()).filter(|&r| panel.value(r, *c).is_some()).count() >= min_weeks
        })
        .map(|(_, &t)| t)
        .collect()
}

/// Full calibration pipeline on aligned weekly panels: chi reconciliation at
/// the final date, per-block PCA, parametric loading fits (decays shared
/// with the real block), joint factor-score correlation with within-block
/// zeroing and nearest-correlation repair, and FX-volatility identification.
pub fn calibrate(
    panels: &CalibPanels,
    monthly: &MonthlyIndex,
    cfg: &CalibConfig,
) -> Result<CalibrationOutput, CalibError> {
    let mut warnings = Vec::new();

    for (panel, kind) in [
        (&panels.nominal, SeriesKind::NominalFwd),
        (&panels.real, SeriesKind::RealFwd),
        (&panels.cdi_spread, SeriesKind::CdiSpread),
        (&panels.ipca_spread, SeriesKind::IpcaSpread),
    ] {
        if panel.kind() != kind {
            return Err(CalibError::Invalid(format!(
                "expected {kind} panel, got {}",
                panel.kind()
            )));
        }
    }

    // Step A: triangle gap at the calibration date over common vertices.
    let chi = {
        let t0 = *panels.nominal.dates().last().expect("non-empty");
        let row = panels
            .nominal
            .dates()
            .iter()
            .position(|&d| d == t0)
            .expect("present");
        let mut gaps = Vec::new();
        for (ci, &tau) in panels.cdi_spread.grid().tenors().iter().enumerate() {
            let ipca_col = panels
                .ipca_spread
                .grid()
                .tenors()
                .iter()
                .position(|&t| (t - tau).abs() < 1e-9);
            let fn_col = panels
                .nominal
                .grid()
                .tenors()
                .iter()
                .position(|&t| (t - tau).abs() < 1e-9);
            let fr_col = panels
                .real
                .grid()
                .tenors()
                .iter()
                .position(|&t| (t - tau).abs() < 1e-9);
            if let (Some(ic), Some(nc), Some(rc)) = (ipca_col, fn_col, fr_col) {
                if let (Some(s_cdi), Some(s_ipca), Some(f_n), Some(f_r)) = (
                    panels.cdi_spread.value(row, ci),
                    panels.ipca_spread.value(row, ic),
                    panels.nominal.value(row, nc),
                    panels.real.value(row, rc),
                ) {
                    gaps.push((tau, s_cdi + f_n - f_r - s_ipca));
                }
            }
        }
        let basis_dim = match cfg.chi_basis {
            ChiBasis::Poly(d) => d + 1,
            ChiBasis::Spline(k) => 4 + k,
        };
        if gaps.len() >= basis_dim {
            let (chi, w) = chi_adjust(&gaps, None, cfg.chi_basis, cfg.chi_alarm)?;
            warnings.extend(w);
            Some(chi)
        } else {
            warnings.push("too few joint vertices for the reconciliation fit; chi skipped".into());
            None
        }
    };

    // Block panels: real curve above its short-end floor, spread vertices
    // with adequate coverage, the credit block chosen by model.
    let real_keep: Vec<f64> = panels
        .real
        .grid()
        .tenors()
        .iter()
        .copied()
        .filter(|&t| t >= cfg.real_short_end_floor)
        .collect();
    let real_panel = panels.real.select_pillars(&real_keep)?;
    let spread_src = match cfg.model {
        CreditModel::A => &panels.cdi_spread,
        CreditModel::B => &panels.ipca_spread,
    };
    let spread_keep = coverage_filter(spread_src, cfg.min_vertex_weeks + 1);
    if spread_keep.len() < 2 {
        return Err(CalibError::Invalid(
            "fewer than two spread vertices with adequate coverage".into(),
        ));
    }
    if spread_keep.len() < spread_src.grid().len() {
        warnings.push(format!(
            "spread vertices restricted to {:?} by the {}-week coverage floor",
            spread_keep, cfg.min_vertex_weeks
        ));
    }
    let spread_panel = spread_src.select_pillars(&spread_keep)?;

    let ch_n = weekly_changes(&panels.nominal)?;
    let ch_r = weekly_changes(&real_panel)?;
    let ch_s = weekly_changes(&spread_panel)?;

    let pca_n = pca_block(&ch_n, cfg.dt, Block::Nominal, cfg.retention_nominal)?;
    let pca_r = pca_block(&ch_r, cfg.dt, Block::Real, cfg.retention_real)?;
    let pca_s = pca_block(&ch_s, cfg.dt, Block::Spread, cfg.retention_spread)?;

    let fit_n = fit_loadings(&pca_n, &cfg.shape_init, None)?;
    let shared = ShapeFamily {
        b2: fit_n.b2,
        b3: fit_n.b3,
        c2: cfg.shape_init.c2,
    };
    let fit_r = fit_loadings(
        &pca_r,
        &cfg.shape_init,
        cfg.shared_decays.then_some(&shared),
    )?;
    let spread_fit = fit_spread_block(&pca_s, cfg.model, cfg.c2_cap)?;
    warnings.extend(spread_fit.warnings.clone());

    // Parametric spread rows for the simulation spec: fall back to the best
    // capped parametric approximation when the representation is empirical.
    let (spread_rows, c2, spread_r2) = match &spread_fit.loadings {
        SpreadLoadings::Parametric { rows, c2, r2 } => (rows.clone(), *c2, Some(*r2)),
        SpreadLoadings::Empirical { tenors, rows } => {
            let targets: Vec<DVector<f64>> = rows
                .iter()
                .map(|r| DVector::from_column_slice(r))
                .collect();
            let (ssr, prows) = profiled_spread_ssr(tenors, &targets, cfg.c2_cap);
            let total: f64 = targets.iter().map(|y| y.dot(y)).sum();
            warnings.push(format!(
                "simulation spec uses the capped parametric spread fit (c2 = {}, R2 = {:.3})",
                cfg.c2_cap,
                1.0 - ssr / total
            ));
            (prows, cfg.c2_cap, Some(1.0 - ssr / total))
        }
    };

    let scores = factor_scores((&ch_n, &pca_n), (&ch_r, &pca_r), (&ch_s, &pca_s))?;
    let corr = correlation_matrix(&scores)?;
    warnings.extend(corr.warnings.clone());

    // Within-block entries are zeroed (the architecture's blocks are
    // orthonormal by construction) and positive definiteness restored.
    let mut rho_model = zero_within_blocks(&corr.rho_hat, scores.dims());
    for _ in 0..20 {
        if min_eigenvalue(&rho_model) >= cfg.eig_floor {
            break;
        }
        rho_model = zero_within_blocks(&nearest_correlation(&rho_model, cfg.eig_floor)?, scores.dims());
    }
    if min_eigenvalue(&rho_model) < cfg.eig_floor {
        return Err(CalibError::HighamNonConvergence(20));
    }

    let sigma_i = calibrate_sigma_i(monthly, &scores, cfg.sparsity_restricted)?;
    let ref_pillar = match cfg.sigma_j_ref_pillar {
        Some(p) => p,
        None => {
            let weeks_total = spread_panel.n_rows();
            *spread_panel
                .grid()
                .tenors()
                .iter()
                .find(|&&t| {
                    let c = spread_panel
                        .grid()
                        .tenors()
                        .iter()
                        .position(|&x| x == t)
                        .expect("present");
                    let filled = (0..spread_panel.n_rows())
                        .filter(|&r| spread_panel.value(r, c).is_some())
                        .count();
                    filled as f64 >= 0.7 * weeks_total as f64
                })
                .unwrap_or(&spread_panel.grid().tenors()[0])
        }
    };
    let sigma_j = calibrate_sigma_j(&ch_s, &scores, &rho_model, ref_pillar, cfg.sparsity_restricted)?;

    let shape = ShapeFamily::new(fit_n.b2, fit_n.b3, c2)?;
    let spec = BlockVolSpec::new(
        shape,
        AmplitudeMatrix::new(Block::Nominal, fit_n.rows.clone())?,
        AmplitudeMatrix::new(Block::Real, fit_r.rows.clone())?,
        AmplitudeMatrix::new(Block::Spread, spread_rows)?,
        sigma_i.loading.clone(),
        sigma_j.loading.clone(),
        rho_model.clone(),
    )?;

    let to_bp2 = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * 1e8).collect() };
    let report = CalibrationReport {
        model: cfg.model,
        blocks: vec![
            BlockReport {
                block: "nominal".into(),
                tenors: pca_n.tenors.clone(),
                eigenvalues_bp2: to_bp2(&pca_n.eigenvalues),
                variance_shares: pca_n.variance_shares.clone(),
                retained: pca_n.retained,
                n_rows: pca_n.n_rows,
                fit_r2: Some(fit_n.r2),
            },
            BlockReport {
                block: "real".into(),
                tenors: pca_r.tenors.clone(),
                eigenvalues_bp2: to_bp2(&pca_r.eigenvalues),
                variance_shares: pca_r.variance_shares.clone(),
                retained: pca_r.retained,
                n_rows: pca_r.n_rows,
                fit_r2: Some(fit_r.r2),
            },
            BlockReport {
                block: "spread".into(),
                tenors: pca_s.tenors.clone(),
                eigenvalues_bp2: to_bp2(&pca_s.eigenvalues),
                variance_shares: pca_s.variance_shares.clone(),
                retained: pca_s.retained,
                n_rows: pca_s.n_rows,
                fit_r2: spread_r2,
            },
        ],
        b2: fit_n.b2,
        b3: fit_n.b3,
        spread_loadings: spread_fit.loadings,
        rho_hat: matrix_rows(&corr.rho_hat),
        rho_model: matrix_rows(&rho_model),
        max_within_block_offdiag: corr.max_within_block_offdiag,
        chi,
        sigma_i,
        sigma_j,
        sigma_j_ref_pillar: ref_pillar,
        joint_weeks: scores.n_rows(),
        warnings,
    };
    Ok(CalibrationOutput {
        spec,
        report,
        scores,
    })
}
