//! The within-issuer triangle-residual test: per-issuer residual series
//! against duration-matched breakevens, post-tax indifference benchmarks
//! (linear and finite-horizon), the decomposition into tax component and
//! residual, the cross-sectional regression, and the regime split.
//!
//! Report-level quantities are expressed in basis points to match the usual
//! presentation; operation inputs stay in decimal per annum.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::linalg;
use crate::marketdata::{ConstituentPanel, Family, PillarGrid};

#[derive(Debug, Error)]
pub enum WedgeError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("issuer {issuer} duration {duration:.2}y outside matchable span [{lo:.2}, {hi:.2}]")]
    DurationOutOfRange {
        issuer: String,
        duration: f64,
        lo: f64,
        hi: f64,
    },
    #[error("tax rate {0} outside [0, 1)")]
    BadTaxRate(f64),
    #[error("holding period {0} must be positive")]
    BadHolding(f64),
    #[error("{have} issuers, need >= {need} for the regression")]
    TooFewIssuers { have: usize, need: usize },
    #[error("regime `{0}` has no observations")]
    EmptyRegime(String),
    #[error("collinear regressors")]
    Collinear,
    #[error(transparent)]
    MarketData(#[from] crate::marketdata::MarketDataError),
}

/// One issuer-date observation: weight-averaged spreads and durations per
/// family, the matched breakeven and nominal forward, and the residual.
#[derive(Debug, Clone, PartialEq)]
pub struct IssuerObs {
    pub date: NaiveDate,
    pub s_cdi: f64,
    pub s_ipca: f64,
    pub dur_cdi: f64,
    pub dur_ipca: f64,
    pub be_matched: Option<f64>,
    pub fn_matched: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IssuerSeries {
    pub issuer: String,
    pub obs: Vec<IssuerObs>,
}

/// Per-date breakeven and nominal-forward pillars consumed by the matching
/// step. CSV schema: `date,be_<tenor>...,fn_<tenor>...`.
#[derive(Debug, Clone)]
pub struct BenchCurves {
    dates: Vec<NaiveDate>,
    pillars: PillarGrid,
    be: Vec<f64>,
    f_n: Vec<f64>,
}

impl BenchCurves {
    pub fn new(
        dates: Vec<NaiveDate>,
        pillars: PillarGrid,
        be: Vec<f64>,
        f_n: Vec<f64>,
    ) -> Result<Self, WedgeError> {
        let n = dates.len() * pillars.len();
        if be.len() != n || f_n.len() != n {
            return Err(WedgeError::Invalid(
                "breakeven/forward matrix dimensions do not match dates x pillars".into(),
            ));
        }
        Ok(Self {
            dates,
            pillars,
            be,
            f_n,
        })
    }

    pub fn pillars(&self) -> &PillarGrid {
        &self.pillars
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    fn row(&self, date: NaiveDate) -> Option<usize> {
        self.dates.iter().position(|&d| d == date)
    }

    fn be_at(&self, row: usize, col: usize) -> f64 {
        self.be[row * self.pillars.len() + col]
    }

    fn fn_at(&self, row: usize, col: usize) -> f64 {
        self.f_n[row * self.pillars.len() + col]
    }

    fn interp(&self, row: usize, values: &dyn Fn(usize, usize) -> f64, dur: f64) -> f64 {
        let t = self.pillars.tenors();
        if dur <= t[0] {
            return values(row, 0);
        }
        if dur >= t[t.len() - 1] {
            return values(row, t.len() - 1);
        }
        let i = t.partition_point(|&x| x < dur);
        let w = (dur - t[i - 1]) / (t[i] - t[i - 1]);
        values(row, i - 1) * (1.0 - w) + values(row, i) * w
    }

    pub fn load(path: &std::path::Path) -> Result<Self, WedgeError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| WedgeError::Invalid(format!("read {path:?}: {e}")))?;
        let header = rdr
            .headers()
            .map_err(|e| WedgeError::Invalid(e.to_string()))?
            .clone();
        let mut be_cols: Vec<(usize, f64)> = Vec::new();
        let mut fn_cols: Vec<(usize, f64)> = Vec::new();
        for (i, name) in header.iter().enumerate() {
            if let Some(t) = name.strip_prefix("be_") {
                be_cols.push((
                    i,
                    t.parse()
                        .map_err(|_| WedgeError::Invalid(format!("bad tenor in `{name}`")))?,
                ));
            } else if let Some(t) = name.strip_prefix("fn_") {
                fn_cols.push((
                    i,
                    t.parse()
                        .map_err(|_| WedgeError::Invalid(format!("bad tenor in `{name}`")))?,
                ));
            }
        }
        let tenors_be: Vec<f64> = be_cols.iter().map(|c| c.1).collect();
        let tenors_fn: Vec<f64> = fn_cols.iter().map(|c| c.1).collect();
        if tenors_be.is_empty() || tenors_be != tenors_fn {
            return Err(WedgeError::Invalid(
                "be_* and fn_* columns must list the same tenors".into(),
            ));
        }
        let pillars = PillarGrid::new(tenors_be).map_err(WedgeError::MarketData)?;
        let mut dates = Vec::new();
        let mut be = Vec::new();
        let mut f_n = Vec::new();
        for (ri, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| WedgeError::Invalid(format!("row {ri}: {e}")))?;
            let d = NaiveDate::parse_from_str(rec.get(0).unwrap_or(""), "%Y-%m-%d")
                .map_err(|_| WedgeError::Invalid(format!("row {ri}: bad date")))?;
            dates.push(d);
            for &(ci, _) in &be_cols {
                be.push(
                    rec.get(ci)
                        .unwrap_or("")
                        .trim()
                        .parse()
                        .map_err(|_| WedgeError::Invalid(format!("row {ri}: bad be value")))?,
                );
            }
            for &(ci, _) in &fn_cols {
                f_n.push(
                    rec.get(ci)
                        .unwrap_or("")
                        .trim()
                        .parse()
                        .map_err(|_| WedgeError::Invalid(format!("row {ri}: bad fn value")))?,
                );
            }
        }
        Self::new(dates, pillars, be, f_n)
    }
}

/// Group dual-listed constituents into per-issuer series: weight-averaged
/// spread and duration per family on each date, keeping dates where both
/// families are observed and issuers with at least `min_joint_days` of them.
pub fn issuer_panel(constituents: &ConstituentPanel, min_joint_days: usize) -> Vec<IssuerSeries> {
    use std::collections::BTreeMap;
    // (issuer, date, family) -> (sum w*s, sum w*dur, sum w)
    let mut acc: BTreeMap<(String, NaiveDate, Family), (f64, f64, f64)> = BTreeMap::new();
    for r in constituents.rows() {
        let e = acc
            .entry((r.issuer_id.clone(), r.date, r.family))
            .or_insert((0.0, 0.0, 0.0));
        e.0 += r.weight * r.spread;
        e.1 += r.weight * r.duration;
        e.2 += r.weight;
    }
    let mut by_issuer: BTreeMap<String, BTreeMap<NaiveDate, (Option<(f64, f64)>, Option<(f64, f64)>)>> =
        BTreeMap::new();
    for ((issuer, date, family), (ws, wd, w)) in acc {
        if w <= 0.0 {
            continue;
        }
        let slot = by_issuer.entry(issuer).or_default().entry(date).or_default();
        let val = (ws / w, wd / w);
        match family {
            Family::Cdi => slot.0 = Some(val),
            Family::Ipca => slot.1 = Some(val),
        }
    }
    let mut out = Vec::new();
    for (issuer, dates) in by_issuer {
        let obs: Vec<IssuerObs> = dates
            .into_iter()
            .filter_map(|(date, (cdi, ipca))| match (cdi, ipca) {
                (Some((s_cdi, dur_cdi)), Some((s_ipca, dur_ipca))) => Some(IssuerObs {
                    date,
                    s_cdi,
                    s_ipca,
                    dur_cdi,
                    dur_ipca,
                    be_matched: None,
                    fn_matched: None,
                    delta: None,
                }),
                _ => None,
            })
            .collect();
        if obs.len() >= min_joint_days {
            out.push(IssuerSeries { issuer, obs });
        }
    }
    out
}

/// How the breakeven is matched to an issuer's duration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchScheme {
    /// Breakeven at the pillar nearest the mid-duration (baseline).
    Nearest,
    /// Linear interpolation of the breakeven at the mid-duration.
    InterpMid,
    /// Average of the breakevens interpolated at each family's own duration.
    SplitSide,
}

/// Fill the matched breakeven, matched nominal forward, and residual
/// Delta = s_IPCA - s_CDI - BE for every issuer date present in the curves.
pub fn match_breakeven(
    issuer: &IssuerSeries,
    curves: &BenchCurves,
    scheme: MatchScheme,
) -> Result<IssuerSeries, WedgeError> {
    let t = curves.pillars().tenors();
    let (lo, hi) = (t[0] - 1.0, t[t.len() - 1] + 1.0);
    let mut obs = Vec::with_capacity(issuer.obs.len());
    for o in &issuer.obs {
        let Some(row) = curves.row(o.date) else {
            continue;
        };
        let mid = 0.5 * (o.dur_cdi + o.dur_ipca);
        for d in [mid, o.dur_cdi, o.dur_ipca] {
            if !(lo..=hi).contains(&d) {
                return Err(WedgeError::DurationOutOfRange {
                    issuer: issuer.issuer.clone(),
                    duration: d,
                    lo,
                    hi,
                });
            }
        }
        let (be, f_n) = match scheme {
            MatchScheme::Nearest => {
                let mut best = 0;
                for i in 1..t.len() {
                    if (t[i] - mid).abs() < (t[best] - mid).abs() {
                        best = i;
                    }
                }
                (curves.be_at(row, best), curves.fn_at(row, best))
            }
            MatchScheme::InterpMid => (
                curves.interp(row, &|r, c| curves.be_at(r, c), mid),
                curves.interp(row, &|r, c| curves.fn_at(r, c), mid),
            ),
            MatchScheme::SplitSide => (
                0.5 * (curves.interp(row, &|r, c| curves.be_at(r, c), o.dur_ipca)
                    + curves.interp(row, &|r, c| curves.be_at(r, c), o.dur_cdi)),
                curves.interp(row, &|r, c| curves.fn_at(r, c), mid),
            ),
        };
        obs.push(IssuerObs {
            be_matched: Some(be),
            fn_matched: Some(f_n),
            delta: Some(o.s_ipca - o.s_cdi - be),
            ..o.clone()
        });
    }
    Ok(IssuerSeries {
        issuer: issuer.issuer.clone(),
        obs,
    })
}

/// Time-series statistics of one issuer's residual, decimal p.a.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DeltaStats {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub n_obs: usize,
}

fn stats(values: &[f64]) -> DeltaStats {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    DeltaStats {
        mean,
        median,
        std,
        n_obs: n,
    }
}

/// Per-date residuals and their time-series statistics.
pub fn compute_delta(issuer: &IssuerSeries) -> Result<DeltaStats, WedgeError> {
    let deltas: Vec<f64> = issuer.obs.iter().filter_map(|o| o.delta).collect();
    if deltas.is_empty() {
        return Err(WedgeError::Invalid(format!(
            "issuer {} has no matched observations",
            issuer.issuer
        )));
    }
    Ok(stats(&deltas))
}

/// Cross-issuer summary of residual statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub mean_of_means_bp: f64,
    pub std_of_means_bp: f64,
    pub mean_of_stds_bp: f64,
    pub total_obs: usize,
}

pub fn summarize_deltas(stats: &[DeltaStats]) -> Result<DeltaSummary, WedgeError> {
    if stats.is_empty() {
        return Err(WedgeError::Invalid("no issuers".into()));
    }
    let means: Vec<f64> = stats.iter().map(|s| s.mean * 1e4).collect();
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    let std = if means.len() > 1 {
        (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(DeltaSummary {
        mean_of_means_bp: mean,
        std_of_means_bp: std,
        mean_of_stds_bp: stats.iter().map(|s| s.std * 1e4).sum::<f64>() / n,
        total_obs: stats.iter().map(|s| s.n_obs).sum(),
    })
}

/// Linear post-tax indifference benchmark. `raw` predicts the raw spread
/// difference s_IPCA - s_CDI; `delta_basis` subtracts the breakeven and
/// predicts the triangle residual. The two are arithmetically equivalent
/// readings of the same indifference condition.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinearBenchmark {
    pub raw: f64,
    pub delta_basis: f64,
}

pub fn tax_benchmark_linear(
    f_n: f64,
    f_r: f64,
    s_cdi: f64,
    tau_pf: f64,
) -> Result<LinearBenchmark, WedgeError> {
    if !(0.0..1.0).contains(&tau_pf) {
        return Err(WedgeError::BadTaxRate(tau_pf));
    }
    let raw = -tau_pf * (f_n + s_cdi);
    Ok(LinearBenchmark {
        raw,
        delta_basis: -(f_n - f_r) + raw,
    })
}

/// Finite-horizon tax benchmark: the tax applies to the realized payoff over
/// the holding period, so the after-tax continuously compounded yield is
/// ln(1 + (1 - tau)(e^(yD) - 1)) / D.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExactBenchmark {
    pub after_tax_yield: f64,
    /// Predicted raw spread difference s_IPCA - s_CDI = y_after - y.
    pub raw: f64,
    /// Exact-minus-linear after-tax yield.
    pub correction: f64,
}

pub fn tax_benchmark_exact(y: f64, holding: f64, tau_pf: f64) -> Result<ExactBenchmark, WedgeError> {
    if !(0.0..1.0).contains(&tau_pf) {
        return Err(WedgeError::BadTaxRate(tau_pf));
    }
    if !(holding > 0.0) {
        return Err(WedgeError::BadHolding(holding));
    }
    let after_tax_yield = ((1.0 - tau_pf) * (y * holding).exp_m1()).ln_1p() / holding;
    Ok(ExactBenchmark {
        after_tax_yield,
        raw: after_tax_yield - y,
        correction: after_tax_yield - (1.0 - tau_pf) * y,
    })
}

/// Benchmark form used in the decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkMode {
    Linear,
    Exact,
}

/// Per-issuer aggregates feeding the decomposition: residual statistics plus
/// the time-averaged inputs of the tax benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IssuerAggregate {
    pub issuer: String,
    pub delta: DeltaStats,
    pub avg_dur: f64,
    pub dur_cdi: f64,
    pub dur_ipca: f64,
    /// Time-averaged nominal forward at the matched duration.
    pub f_n_bar: f64,
    pub s_cdi_bar: f64,
    pub be_bar: f64,
}

impl IssuerAggregate {
    /// Aggregate a matched issuer series: time averages of the matched
    /// forward/breakeven and family durations, mid-duration as their mean.
    pub fn from_series(series: &IssuerSeries) -> Result<Self, WedgeError> {
        let matched: Vec<&IssuerObs> =
            series.obs.iter().filter(|o| o.delta.is_some()).collect();
        if matched.is_empty() {
            return Err(WedgeError::Invalid(format!(
                "issuer {} has no matched observations",
                series.issuer
            )));
        }
        let n = matched.len() as f64;
        let avg = |f: &dyn Fn(&IssuerObs) -> f64| matched.iter().map(|o| f(o)).sum::<f64>() / n;
        let deltas: Vec<f64> = matched.iter().map(|o| o.delta.expect("matched")).collect();
        let dur_cdi = avg(&|o| o.dur_cdi);
        let dur_ipca = avg(&|o| o.dur_ipca);
        Ok(Self {
            issuer: series.issuer.clone(),
            delta: stats(&deltas),
            avg_dur: 0.5 * (dur_cdi + dur_ipca),
            dur_cdi,
            dur_ipca,
            f_n_bar: avg(&|o| o.fn_matched.expect("matched")),
            s_cdi_bar: avg(&|o| o.s_cdi),
            be_bar: avg(&|o| o.be_matched.expect("matched")),
        })
    }

    fn tau_fiscal(&self, mode: BenchmarkMode, tau_pf: f64) -> Result<f64, WedgeError> {
        match mode {
            BenchmarkMode::Linear => Ok(tax_benchmark_linear(
                self.f_n_bar,
                self.f_n_bar - self.be_bar,
                self.s_cdi_bar,
                tau_pf,
            )?
            .delta_basis),
            BenchmarkMode::Exact => {
                let exact =
                    tax_benchmark_exact(self.f_n_bar + self.s_cdi_bar, self.avg_dur, tau_pf)?;
                Ok(exact.raw - self.be_bar)
            }
        }
    }
}

/// Fixture/report CSV schema:
/// `issuer,delta_mean_bp,delta_median_bp,delta_std_bp,n_obs,avg_dur,dur_cdi,dur_ipca,fn_bar,scdi_bar,be_bar`.
pub fn load_issuer_aggregates(path: &std::path::Path) -> Result<Vec<IssuerAggregate>, WedgeError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| WedgeError::Invalid(format!("read {path:?}: {e}")))?;
    let mut out = Vec::new();
    for (ri, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| WedgeError::Invalid(format!("row {ri}: {e}")))?;
        let f = |i: usize| -> Result<f64, WedgeError> {
            rec.get(i)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| WedgeError::Invalid(format!("row {ri}: bad field {i}")))
        };
        out.push(IssuerAggregate {
            issuer: rec.get(0).unwrap_or("").to_string(),
            delta: DeltaStats {
                mean: f(1)? / 1e4,
                median: f(2)? / 1e4,
                std: f(3)? / 1e4,
                n_obs: f(4)? as usize,
            },
            avg_dur: f(5)?,
            dur_cdi: f(6)?,
            dur_ipca: f(7)?,
            f_n_bar: f(8)?,
            s_cdi_bar: f(9)?,
            be_bar: f(10)?,
        });
    }
    if out.is_empty() {
        return Err(WedgeError::Invalid("no issuer rows".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WedgeRow {
    pub issuer: String,
    pub delta_mean_bp: f64,
    pub tau_fiscal_bp: f64,
    pub eta_bp: f64,
    pub avg_dur: f64,
    pub n_obs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WedgeSummary {
    pub mean_delta_bp: f64,
    pub se_delta_bp: Option<f64>,
    pub mean_tau_fiscal_bp: f64,
    pub se_tau_fiscal_bp: Option<f64>,
    pub mean_eta_bp: f64,
    pub se_eta_bp: Option<f64>,
    pub n_issuers: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WedgeReport {
    pub mode: BenchmarkMode,
    pub tau_pf: f64,
    pub rows: Vec<WedgeRow>,
    pub summary: WedgeSummary,
}

fn mean_se(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

/// Decompose the wedge per issuer: Delta_i = tau_fiscal(i) + eta_i, with the
/// benchmark evaluated at the issuer's average duration using time-averaged
/// inputs. Cross-issuer means and standard errors summarize the table.
pub fn decompose(
    issuers: &[IssuerAggregate],
    mode: BenchmarkMode,
    tau_pf: f64,
) -> Result<WedgeReport, WedgeError> {
    if issuers.is_empty() {
        return Err(WedgeError::Invalid("no issuers".into()));
    }
    let mut rows = Vec::with_capacity(issuers.len());
    for agg in issuers {
        let tau_fiscal = agg.tau_fiscal(mode, tau_pf)?;
        rows.push(WedgeRow {
            issuer: agg.issuer.clone(),
            delta_mean_bp: agg.delta.mean * 1e4,
            tau_fiscal_bp: tau_fiscal * 1e4,
            eta_bp: (agg.delta.mean - tau_fiscal) * 1e4,
            avg_dur: agg.avg_dur,
            n_obs: agg.delta.n_obs,
        });
    }
    let deltas: Vec<f64> = rows.iter().map(|r| r.delta_mean_bp).collect();
    let taus: Vec<f64> = rows.iter().map(|r| r.tau_fiscal_bp).collect();
    let etas: Vec<f64> = rows.iter().map(|r| r.eta_bp).collect();
    let (mean_delta, se_delta) = mean_se(&deltas);
    let (mean_tau, se_tau) = mean_se(&taus);
    let (mean_eta, se_eta) = mean_se(&etas);
    let summary = WedgeSummary {
        mean_delta_bp: mean_delta,
        se_delta_bp: se_delta,
        mean_tau_fiscal_bp: mean_tau,
        se_tau_fiscal_bp: se_tau,
        mean_eta_bp: mean_eta,
        se_eta_bp: se_eta,
        n_issuers: rows.len(),
    };
    Ok(WedgeReport {
        mode,
        tau_pf,
        rows,
        summary,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionResult {
    pub intercept: f64,
    pub intercept_se: f64,
    pub beta: f64,
    pub beta_se: f64,
    pub gamma: Option<f64>,
    pub gamma_se: Option<f64>,
    pub r2: f64,
    pub adj_r2: f64,
    /// Two-sided Wald p-value for H0: beta = 1.
    pub p_beta_eq_one: f64,
    pub n: usize,
}

/// Cross-sectional OLS of the per-issuer wedge on its tax benchmark,
/// optionally controlling for the infra-minus-CDI duration differential.
/// Classical (homoskedastic) standard errors.
pub fn cross_section_regression(
    report: &WedgeReport,
    issuers: &[IssuerAggregate],
    include_duration_diff: bool,
) -> Result<RegressionResult, WedgeError> {
    let n = report.rows.len();
    let k = if include_duration_diff { 3 } else { 2 };
    if n < k + 1 {
        return Err(WedgeError::TooFewIssuers { have: n, need: k + 1 });
    }
    if issuers.len() != n {
        return Err(WedgeError::Invalid("aggregates do not match report rows".into()));
    }
    let y = DVector::from_iterator(n, report.rows.iter().map(|r| r.delta_mean_bp));
    let x = DMatrix::from_fn(n, k, |r, c| match c {
        0 => 1.0,
        1 => report.rows[r].tau_fiscal_bp,
        _ => issuers[r].dur_ipca - issuers[r].dur_cdi,
    });
    let fit = linalg::ols(&y, &x, true).map_err(|_| WedgeError::Collinear)?;
    let t_stat = (fit.coef[1] - 1.0) / fit.se[1];
    let dist = StudentsT::new(0.0, 1.0, fit.df_resid as f64)
        .map_err(|e| WedgeError::Invalid(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t_stat.abs()));
    Ok(RegressionResult {
        intercept: fit.coef[0],
        intercept_se: fit.se[0],
        beta: fit.coef[1],
        beta_se: fit.se[1],
        gamma: include_duration_diff.then(|| fit.coef[2]),
        gamma_se: include_duration_diff.then(|| fit.se[2]),
        r2: fit.r2,
        adj_r2: fit.adj_r2,
        p_beta_eq_one: p,
        n,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeWindow {
    pub name: String,
    pub summary: WedgeSummary,
    pub avg_obs_per_issuer: f64,
    /// Issuers with fewer than the minimum joint days in this window,
    /// excluded from the summary.
    pub flagged_issuers: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeSplit {
    pub break_date: NaiveDate,
    pub windows: Vec<RegimeWindow>,
    /// z-score of the between-regime difference in mean wedge.
    pub z_diff: Option<f64>,
}

/// Recompute the wedge per monetary-policy regime: observations before the
/// break date form the first window, the rest the second. Issuers with fewer
/// than `min_days` joint observations in a window are flagged and excluded
/// from that window's summary.
pub fn regime_split(
    issuers: &[IssuerSeries],
    break_date: NaiveDate,
    tau_pf: f64,
    min_days: usize,
) -> Result<RegimeSplit, WedgeError> {
    let windows = [
        ("tightening", None, Some(break_date)),
        ("easing", Some(break_date), None),
    ];
    let mut out_windows = Vec::new();
    let mut means: Vec<(f64, Option<f64>)> = Vec::new();
    for (name, from, to) in windows {
        let mut aggs = Vec::new();
        let mut flagged = Vec::new();
        let mut total_obs = 0usize;
        for s in issuers {
            let obs: Vec<IssuerObs> = s
                .obs
                .iter()
                .filter(|o| {
                    o.delta.is_some()
                        && from.map_or(true, |f| o.date >= f)
                        && to.map_or(true, |t| o.date < t)
                })
                .cloned()
                .collect();
            if obs.len() < min_days {
                flagged.push(s.issuer.clone());
                continue;
            }
            total_obs += obs.len();
            aggs.push(IssuerAggregate::from_series(&IssuerSeries {
                issuer: s.issuer.clone(),
                obs,
            })?);
        }
        if aggs.is_empty() {
            return Err(WedgeError::EmptyRegime(name.to_string()));
        }
        let report = decompose(&aggs, BenchmarkMode::Linear, tau_pf)?;
        means.push((report.summary.mean_delta_bp, report.summary.se_delta_bp));
        out_windows.push(RegimeWindow {
            name: name.to_string(),
            avg_obs_per_issuer: total_obs as f64 / aggs.len() as f64,
            summary: report.summary,
            flagged_issuers: flagged,
        });
    }
    let z_diff = match (means[0], means[1]) {
        ((m1, Some(s1)), (m2, Some(s2))) if s1 > 0.0 || s2 > 0.0 => {
            Some((m1 - m2) / (s1 * s1 + s2 * s2).sqrt())
        }
        _ => None,
    };
    Ok(RegimeSplit {
        break_date,
        windows: out_windows,
        z_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::ConstituentRow;
    use approx::assert_relative_eq;
    use chrono::Duration;
    use proptest::prelude::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn bench_curves(dates: &[NaiveDate]) -> BenchCurves {
        let pillars = PillarGrid::new(vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let mut be = Vec::new();
        let mut f_n = Vec::new();
        for _ in dates {
            be.extend_from_slice(&[0.050, 0.052, 0.0534, 0.055]);
            f_n.extend_from_slice(&[0.110, 0.111, 0.1113, 0.112]);
        }
        BenchCurves::new(dates.to_vec(), pillars, be, f_n).unwrap()
    }

    fn mk_series(issuer: &str, n: usize, s_cdi: f64, s_ipca: f64, dur: f64) -> IssuerSeries {
        let epoch = d("2021-01-04");
        IssuerSeries {
            issuer: issuer.to_string(),
            obs: (0..n)
                .map(|i| IssuerObs {
                    date: epoch + Duration::days(i as i64),
                    s_cdi,
                    s_ipca,
                    dur_cdi: dur,
                    dur_ipca: dur + 0.4,
                    be_matched: None,
                    fn_matched: None,
                    delta: None,
                })
                .collect(),
        }
    }

    #[test]
    fn issuer_panel_filters_by_joint_days() {
        let epoch = d("2021-01-04");
        let mut rows = Vec::new();
        // Issuer A: 5 joint days; issuer B: joint on 2 days only.
        for i in 0..5 {
            let date = epoch + Duration::days(i);
            rows.push(ConstituentRow {
                date,
                family: Family::Cdi,
                issuer_id: "A".into(),
                ticker: "A1".into(),
                spread: 0.018,
                duration: 3.0,
                weight: 1.0,
            });
            rows.push(ConstituentRow {
                date,
                family: Family::Ipca,
                issuer_id: "A".into(),
                ticker: "A2".into(),
                spread: 0.002,
                duration: 4.0,
                weight: 1.0,
            });
            rows.push(ConstituentRow {
                date,
                family: Family::Cdi,
                issuer_id: "B".into(),
                ticker: "B1".into(),
                spread: 0.02,
                duration: 2.0,
                weight: 1.0,
            });
            if i < 2 {
                rows.push(ConstituentRow {
                    date,
                    family: Family::Ipca,
                    issuer_id: "B".into(),
                    ticker: "B2".into(),
                    spread: 0.003,
                    duration: 3.0,
                    weight: 1.0,
                });
            }
        }
        let panel = ConstituentPanel::new(rows).unwrap();
        let issuers = issuer_panel(&panel, 5);
        assert_eq!(issuers.len(), 1);
        assert_eq!(issuers[0].issuer, "A");
        assert_eq!(issuer_panel(&panel, 1_000_000).len(), 0);
        assert_eq!(issuer_panel(&panel, 2).len(), 2);
    }

    #[test]
    fn single_ticker_averages_equal_ticker_values() {
        let epoch = d("2021-01-04");
        let rows = vec![
            ConstituentRow {
                date: epoch,
                family: Family::Cdi,
                issuer_id: "A".into(),
                ticker: "A1".into(),
                spread: 0.0182,
                duration: 2.9,
                weight: 2.5,
            },
            ConstituentRow {
                date: epoch,
                family: Family::Ipca,
                issuer_id: "A".into(),
                ticker: "A2".into(),
                spread: 0.0024,
                duration: 4.1,
                weight: 0.3,
            },
        ];
        let issuers = issuer_panel(&ConstituentPanel::new(rows).unwrap(), 1);
        let o = &issuers[0].obs[0];
        assert_relative_eq!(o.s_cdi, 0.0182);
        assert_relative_eq!(o.dur_ipca, 4.1);
    }

    #[test]
    fn schemes_agree_when_duration_sits_on_pillar() {
        let dates = vec![d("2021-01-04")];
        let curves = bench_curves(&dates);
        // dur_cdi = dur_ipca = 3.0 -> mid = 3.0 exactly at a pillar.
        let mut series = mk_series("A", 1, 0.018, 0.002, 3.0);
        series.obs[0].dur_ipca = 3.0;
        let out: Vec<f64> = [MatchScheme::Nearest, MatchScheme::InterpMid, MatchScheme::SplitSide]
            .iter()
            .map(|s| {
                match_breakeven(&series, &curves, *s).unwrap().obs[0]
                    .be_matched
                    .unwrap()
            })
            .collect();
        assert_relative_eq!(out[0], out[1], epsilon = 1e-15);
        assert_relative_eq!(out[0], out[2], epsilon = 1e-15);
        assert_relative_eq!(out[0], 0.0534, epsilon = 1e-15);
    }

    #[test]
    fn duration_outside_span_errors() {
        let dates = vec![d("2021-01-04")];
        let curves = bench_curves(&dates);
        let series = mk_series("A", 1, 0.018, 0.002, 9.0);
        assert!(matches!(
            match_breakeven(&series, &curves, MatchScheme::Nearest).unwrap_err(),
            WedgeError::DurationOutOfRange { .. }
        ));
    }

    #[test]
    fn constant_inputs_give_zero_std() {
        let dates: Vec<NaiveDate> = (0..10).map(|i| d("2021-01-04") + Duration::days(i)).collect();
        let curves = bench_curves(&dates);
        let series = mk_series("A", 10, 0.018, 0.002, 2.8);
        let matched = match_breakeven(&series, &curves, MatchScheme::Nearest).unwrap();
        let st = compute_delta(&matched).unwrap();
        assert_eq!(st.n_obs, 10);
        assert_relative_eq!(st.std, 0.0, epsilon = 1e-15);
        assert_relative_eq!(st.mean, st.median, epsilon = 1e-15);
    }

    #[test]
    fn linear_benchmark_paper_point() {
        let b = tax_benchmark_linear(0.1113, 0.1113 - 0.0534, 0.0182, 0.15).unwrap();
        assert_relative_eq!(b.raw, -0.15 * 0.1295, epsilon = 1e-15);
        assert_relative_eq!(b.raw * 1e4, -194.25, epsilon = 1e-9);
        assert_relative_eq!(b.delta_basis * 1e4, -728.25, epsilon = 1e-9);
        // Raw and delta-basis readings differ by exactly the breakeven.
        assert_relative_eq!(b.delta_basis, b.raw - 0.0534, epsilon = 1e-15);
    }

    #[test]
    fn linear_benchmark_zero_tax() {
        let b = tax_benchmark_linear(0.11, 0.06, 0.02, 0.0).unwrap();
        assert_relative_eq!(b.raw, 0.0);
        assert_relative_eq!(b.delta_basis, -0.05);
        assert!(tax_benchmark_linear(0.11, 0.06, 0.02, 1.0).is_err());
    }

    #[test]
    fn exact_benchmark_limits_and_correction() {
        // D -> 0 recovers the linear after-tax yield.
        let small = tax_benchmark_exact(0.1295, 1e-9, 0.15).unwrap();
        assert_relative_eq!(small.after_tax_yield, 0.85 * 0.1295, epsilon = 1e-9);
        // tau = 0 leaves the yield untouched.
        let no_tax = tax_benchmark_exact(0.1295, 3.0, 0.0).unwrap();
        assert_relative_eq!(no_tax.after_tax_yield, 0.1295, epsilon = 1e-15);
        // Paper point: 3-year holding at the sample-mean CDI yield.
        let b = tax_benchmark_exact(0.1295, 3.0, 0.15).unwrap();
        assert_relative_eq!(b.correction * 1e4, 29.0, epsilon = 1.0);
        assert!(tax_benchmark_exact(0.1295, 0.0, 0.15).is_err());
    }

    fn toy_aggregates() -> Vec<IssuerAggregate> {
        vec![
            IssuerAggregate {
                issuer: "A".into(),
                delta: DeltaStats {
                    mean: -0.0630,
                    median: -0.0632,
                    std: 0.0062,
                    n_obs: 100,
                },
                avg_dur: 3.7,
                dur_cdi: 3.5,
                dur_ipca: 3.9,
                f_n_bar: 0.111,
                s_cdi_bar: 0.018,
                be_bar: 0.0537,
            },
            IssuerAggregate {
                issuer: "B".into(),
                delta: DeltaStats {
                    mean: -0.0660,
                    median: -0.0659,
                    std: 0.0054,
                    n_obs: 90,
                },
                avg_dur: 4.6,
                dur_cdi: 4.4,
                dur_ipca: 4.8,
                f_n_bar: 0.112,
                s_cdi_bar: 0.020,
                be_bar: 0.0551,
            },
            IssuerAggregate {
                issuer: "C".into(),
                delta: DeltaStats {
                    mean: -0.0605,
                    median: -0.0602,
                    std: 0.0075,
                    n_obs: 80,
                },
                avg_dur: 3.1,
                dur_cdi: 3.0,
                dur_ipca: 3.2,
                f_n_bar: 0.110,
                s_cdi_bar: 0.017,
                be_bar: 0.0520,
            },
        ]
    }

    #[test]
    fn decompose_arithmetic_consistency() {
        let aggs = toy_aggregates();
        let rep = decompose(&aggs, BenchmarkMode::Linear, 0.15).unwrap();
        for (row, agg) in rep.rows.iter().zip(&aggs) {
            assert_relative_eq!(
                row.eta_bp,
                row.delta_mean_bp - row.tau_fiscal_bp,
                epsilon = 1e-12
            );
            let expected =
                -agg.be_bar * 1e4 - 0.15 * (agg.f_n_bar + agg.s_cdi_bar) * 1e4;
            assert_relative_eq!(row.tau_fiscal_bp, expected, epsilon = 1e-9);
        }
        // Summary means are unweighted averages of the rows.
        let mean_eta: f64 =
            rep.rows.iter().map(|r| r.eta_bp).sum::<f64>() / rep.rows.len() as f64;
        assert_relative_eq!(rep.summary.mean_eta_bp, mean_eta, epsilon = 1e-12);
    }

    #[test]
    fn linear_minus_exact_eta_equals_correction() {
        let aggs = toy_aggregates();
        let lin = decompose(&aggs, BenchmarkMode::Linear, 0.15).unwrap();
        let exact = decompose(&aggs, BenchmarkMode::Exact, 0.15).unwrap();
        for ((l, e), agg) in lin.rows.iter().zip(&exact.rows).zip(&aggs) {
            let corr = tax_benchmark_exact(agg.f_n_bar + agg.s_cdi_bar, agg.avg_dur, 0.15)
                .unwrap()
                .correction;
            assert_relative_eq!(l.eta_bp - e.eta_bp, corr * 1e4, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_issuer_has_no_summary_se() {
        let aggs = vec![toy_aggregates().remove(0)];
        let rep = decompose(&aggs, BenchmarkMode::Linear, 0.15).unwrap();
        assert!(rep.summary.se_delta_bp.is_none());
        assert!(rep.summary.se_eta_bp.is_none());
    }

    #[test]
    fn perfect_fit_regression_recovers_beta_one() {
        // Delta = tau_fiscal exactly -> beta = 1, R^2 = 1.
        let mut aggs = toy_aggregates();
        let rep0 = decompose(&aggs, BenchmarkMode::Linear, 0.15).unwrap();
        for (agg, row) in aggs.iter_mut().zip(&rep0.rows) {
            agg.delta.mean = row.tau_fiscal_bp / 1e4;
        }
        let rep = decompose(&aggs, BenchmarkMode::Linear, 0.15).unwrap();
        let reg = cross_section_regression(&rep, &aggs, false).unwrap();
        assert_relative_eq!(reg.beta, 1.0, epsilon = 1e-9);
        assert_relative_eq!(reg.r2, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn regression_needs_enough_issuers() {
        let aggs = vec![toy_aggregates().remove(0)];
        let rep = decompose(&aggs, BenchmarkMode::Linear, 0.15).unwrap();
        assert!(matches!(
            cross_section_regression(&rep, &aggs, false).unwrap_err(),
            WedgeError::TooFewIssuers { .. }
        ));
    }

    #[test]
    fn regime_split_windows_and_errors() {
        let dates: Vec<NaiveDate> =
            (0..80).map(|i| d("2021-01-04") + Duration::days(i)).collect();
        let curves = bench_curves(&dates);
        let mut series = Vec::new();
        for name in ["A", "B"] {
            let s = mk_series(name, 80, 0.018, 0.002, 2.8);
            series.push(match_breakeven(&s, &curves, MatchScheme::Nearest).unwrap());
        }
        let split = regime_split(&series, d("2021-02-10"), 0.15, 30).unwrap();
        assert_eq!(split.windows.len(), 2);
        assert!(split.windows.iter().all(|w| w.flagged_issuers.is_empty()));
        // Break before the sample start empties the first window.
        assert!(matches!(
            regime_split(&series, d("2020-01-01"), 0.15, 30).unwrap_err(),
            WedgeError::EmptyRegime(_)
        ));
    }

    proptest! {
        #[test]
        fn delta_invariant_to_common_spread_shift(c in -0.02f64..0.02) {
            let dates: Vec<NaiveDate> = (0..3).map(|i| d("2021-01-04") + Duration::days(i)).collect();
            let curves = bench_curves(&dates);
            let base = mk_series("A", 3, 0.018, 0.002, 2.8);
            let mut shifted = base.clone();
            for o in shifted.obs.iter_mut() {
                o.s_cdi += c;
                o.s_ipca += c;
            }
            let a = match_breakeven(&base, &curves, MatchScheme::Nearest).unwrap();
            let b = match_breakeven(&shifted, &curves, MatchScheme::Nearest).unwrap();
            for (x, y) in a.obs.iter().zip(&b.obs) {
                prop_assert!((x.delta.unwrap() - y.delta.unwrap()).abs() < 1e-15);
            }
        }
    }
}
