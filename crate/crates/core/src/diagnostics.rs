//! Simulation and out-of-sample diagnostics: deflated-numeraire martingale
//! tests, the triangle-identity check, term-structure smoothness, one-week
//! Gaussian coverage, and volatility/correlation reproduction.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::calib::FactorScores;
use crate::linalg::percentile;
use crate::marketdata::{CurvePanel, SeriesKind};
use crate::sim::SimOutput;
use crate::volarch::{Block, BlockVolSpec, VolError};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("horizon {0} not among recorded times")]
    HorizonNotRecorded(f64),
    #[error("window [{lo}, {hi}] has fewer than 3 grid points")]
    DegenerateGrid { lo: f64, hi: f64 },
    #[error("{have} out-of-sample rows, need >= {need}")]
    TooFewRows { have: usize, need: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Vol(#[from] VolError),
}

/// One (ratio, horizon) cell of the martingale test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleRow {
    pub ratio: String,
    pub horizon: f64,
    pub sample_mean: f64,
    /// Relative deviation from the t = 0 value, basis points.
    pub bias_bp: f64,
    pub se_bp: f64,
    pub z: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub alpha: f64,
    pub z_crit: f64,
    pub rows: Vec<MartingaleRow>,
    pub max_abs_z: f64,
    pub n_paths: usize,
}

/// Deflated-numeraire martingale test: for each horizon, the sample mean of
/// I_T B^R_T / B^N_T must be statistically indistinguishable from its t = 0
/// value (and likewise for J_T B^C_T / B^N_T). Zero-dispersion cells report
/// z = 0.
pub fn martingale_test(
    sim: &SimOutput,
    horizons: &[f64],
    alpha: f64,
) -> Result<MartingaleReport, DiagnosticsError> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(DiagnosticsError::Invalid(format!("alpha = {alpha}")));
    }
    let z_crit = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - alpha / 2.0);
    let rec_of = |h: f64| -> Result<usize, DiagnosticsError> {
        sim.times()
            .iter()
            .position(|&t| (t - h).abs() < 1e-9)
            .ok_or(DiagnosticsError::HorizonNotRecorded(h))
    };
    let flagged: std::collections::HashSet<usize> = sim.flagged().iter().copied().collect();
    let live: Vec<usize> = (0..sim.n_paths()).filter(|p| !flagged.contains(p)).collect();
    if live.len() < 2 {
        return Err(DiagnosticsError::Invalid("need >= 2 live paths".into()));
    }
    let mut rows = Vec::new();
    for (name, value) in [
        ("inflation", &(|p: usize, r: usize| sim.deflated_i(p, r)) as &dyn Fn(usize, usize) -> f64),
        ("credit", &(|p: usize, r: usize| sim.deflated_j(p, r))),
    ] {
        let target = value(live[0], 0);
        for &h in horizons {
            let rec = rec_of(h)?;
            let vals: Vec<f64> = live.iter().map(|&p| value(p, rec) / target).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            let bias_bp = (mean - 1.0) * 1e4;
            let se_bp = se * 1e4;
            let z = if se_bp > 0.0 { bias_bp / se_bp } else { 0.0 };
            rows.push(MartingaleRow {
                ratio: name.to_string(),
                horizon: h,
                sample_mean: mean * target,
                bias_bp,
                se_bp,
                z,
                flagged: z.abs() > z_crit,
            });
        }
    }
    let max_abs_z = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    Ok(MartingaleReport {
        alpha,
        z_crit,
        rows,
        max_abs_z,
        n_paths: live.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriangleReport {
    pub max_violation: f64,
    /// (path, record index, pillar index) of the worst violation.
    pub worst: Option<(usize, usize, usize)>,
    pub eps: f64,
    pub pass: bool,
}

/// Max over steps and pillars of |s_IPCA - s_CDI - (f_N - f_R)|. The
/// identity is enforced algebraically at recording time, so a violation
/// indicates output corruption.
pub fn triangle_check(sim: &SimOutput, eps: f64) -> TriangleReport {
    triangle_check_values(sim, eps, |p, r, i| sim.s_ipca(p, r, i))
}

/// Same check with the IPCA spread supplied externally (fault injection and
/// file-based audits).
pub fn triangle_check_values<F: Fn(usize, usize, usize) -> f64>(
    sim: &SimOutput,
    eps: f64,
    s_ipca: F,
) -> TriangleReport {
    let flagged: std::collections::HashSet<usize> = sim.flagged().iter().copied().collect();
    let mut max_violation = 0.0f64;
    let mut worst = None;
    for p in 0..sim.n_paths() {
        if flagged.contains(&p) {
            continue;
        }
        for r in 0..sim.n_records() {
            for i in 0..sim.pillar_tenors().len() {
                let resid =
                    (s_ipca(p, r, i) - sim.s_cdi(p, r, i) - (sim.f_n(p, r, i) - sim.f_r(p, r, i)))
                        .abs();
                if resid > max_violation {
                    max_violation = resid;
                    worst = Some((p, r, i));
                }
            }
        }
    }
    TriangleReport {
        max_violation,
        worst,
        eps,
        pass: max_violation <= eps,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothnessRow {
    pub curve: String,
    pub window: String,
    pub baseline_p95: f64,
    pub simulated_p95: f64,
    pub simulated_max: f64,
    /// simulated p95 / initial-curve p95; None when the initial curve has no
    /// curvature in the window.
    pub ratio_p95: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub rows: Vec<SmoothnessRow>,
}

fn second_diff_metrics(
    values: &[f64],
    tenors: &[f64],
    lo: f64,
    hi: f64,
    max_abs: f64,
) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 1..tenors.len() - 1 {
        if tenors[i] > lo && tenors[i] <= hi {
            let dtau2 = (tenors[i + 1] - tenors[i]) * (tenors[i] - tenors[i - 1]);
            let d2 = values[i + 1] - 2.0 * values[i] + values[i - 1];
            out.push(d2.abs() / (dtau2 * max_abs.max(1e-12)));
        }
    }
    out
}

/// Normalized discrete second difference |d2 f| / (dtau^2 max|f|) per curve
/// and tenor window, p95 and max across simulated (path, date) samples,
/// referenced against the initial curve's own value.
pub fn smoothness_metric(
    sim: &SimOutput,
    windows: &[(&str, f64, f64)],
) -> Result<SmoothnessReport, DiagnosticsError> {
    let tenors = sim.pillar_tenors();
    for &(_, lo, hi) in windows {
        let pts = (1..tenors.len().saturating_sub(1))
            .filter(|&i| tenors[i] > lo && tenors[i] <= hi)
            .count();
        if pts == 0 {
            return Err(DiagnosticsError::DegenerateGrid { lo, hi });
        }
    }
    let flagged: std::collections::HashSet<usize> = sim.flagged().iter().copied().collect();
    let curves: [(&str, &dyn Fn(usize, usize, usize) -> f64); 5] = [
        ("f_n", &|p, r, i| sim.f_n(p, r, i)),
        ("f_r", &|p, r, i| sim.f_r(p, r, i)),
        ("s_cdi", &|p, r, i| sim.s_cdi(p, r, i)),
        ("s_ipca", &|p, r, i| sim.s_ipca(p, r, i)),
        ("f_c", &|p, r, i| sim.f_n(p, r, i) + sim.s_cdi(p, r, i)),
    ];
    let mut rows = Vec::new();
    for (name, get) in curves {
        for &(wname, lo, hi) in windows {
            let sample_curve = |p: usize, r: usize| -> Vec<f64> {
                (0..tenors.len()).map(|i| get(p, r, i)).collect()
            };
            let base_vals = sample_curve(0, 0);
            let base_max = base_vals.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            let baseline = second_diff_metrics(&base_vals, tenors, lo, hi, base_max);
            let baseline_p95 = percentile(&baseline, 0.95);
            let mut sims = Vec::new();
            for p in 0..sim.n_paths() {
                if flagged.contains(&p) {
                    continue;
                }
                for r in 1..sim.n_records() {
                    let vals = sample_curve(p, r);
                    let vmax = vals.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
                    sims.extend(second_diff_metrics(&vals, tenors, lo, hi, vmax));
                }
            }
            if sims.is_empty() {
                sims.push(0.0);
            }
            let simulated_p95 = percentile(&sims, 0.95);
            let simulated_max = sims.iter().fold(0.0f64, |a, &b| a.max(b));
            rows.push(SmoothnessRow {
                curve: name.to_string(),
                window: wname.to_string(),
                baseline_p95,
                simulated_p95,
                simulated_max,
                ratio_p95: (baseline_p95 > 0.0).then(|| simulated_p95 / baseline_p95),
            });
        }
    }
    Ok(SmoothnessReport { rows })
}

/// Model-implied annualized volatility for one series kind at one tenor:
/// the rho-weighted norm of the corresponding volatility vector. The implied
/// IPCA spread combines the three blocks through the triangle identity.
pub fn model_vol(spec: &BlockVolSpec, kind: SeriesKind, tenor: f64) -> Result<f64, VolError> {
    let v = match kind {
        SeriesKind::NominalFwd => spec.block_vol(Block::Nominal, tenor)?,
        SeriesKind::RealFwd => spec.block_vol(Block::Real, tenor)?,
        SeriesKind::CdiSpread => spec.block_vol(Block::Spread, tenor)?,
        SeriesKind::IpcaSpread => {
            let mut v = spec.block_vol(Block::Spread, tenor)?;
            for (a, b) in v.iter_mut().zip(spec.block_vol(Block::Nominal, tenor)?) {
                *a += b;
            }
            for (a, b) in v.iter_mut().zip(spec.block_vol(Block::Real, tenor)?) {
                *a -= b;
            }
            v
        }
    };
    Ok(spec.weighted_inner(&v, &v)?.max(0.0).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageCell {
    pub variable: String,
    pub tenor: f64,
    pub model_vol_bp: f64,
    pub coverage: f64,
    pub n_obs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub level: f64,
    pub cells: Vec<CoverageCell>,
}

fn weekly_diffs_column(panel: &CurvePanel, col: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for r in 1..panel.n_rows() {
        if let (Some(a), Some(b)) = (panel.value(r, col), panel.value(r - 1, col)) {
            out.push(a - b);
        }
    }
    out
}

/// Empirical coverage of the model-implied central prediction interval for
/// one-step-ahead changes: the interval is +/- z * sigma_model * sqrt(dt)
/// around zero (weekly drift is negligible against weekly vol).
pub fn coverage_test(
    spec: &BlockVolSpec,
    oos_panels: &[&CurvePanel],
    level: f64,
    dt: f64,
) -> Result<CoverageReport, DiagnosticsError> {
    if !(0.0 < level && level < 1.0) {
        return Err(DiagnosticsError::Invalid(format!("level = {level}")));
    }
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + level / 2.0);
    let mut cells = Vec::new();
    for panel in oos_panels {
        for (c, &tenor) in panel.grid().tenors().iter().enumerate() {
            let diffs = weekly_diffs_column(panel, c);
            if diffs.len() < 30 {
                return Err(DiagnosticsError::TooFewRows {
                    have: diffs.len(),
                    need: 30,
                });
            }
            let sigma = model_vol(spec, panel.kind(), tenor)?;
            let half = z * sigma * dt.sqrt();
            let inside = diffs.iter().filter(|d| d.abs() <= half).count();
            cells.push(CoverageCell {
                variable: panel.kind().to_string(),
                tenor,
                model_vol_bp: sigma * 1e4,
                coverage: inside as f64 / diffs.len() as f64,
                n_obs: diffs.len(),
            });
        }
    }
    Ok(CoverageReport { level, cells })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolReproductionRow {
    pub variable: String,
    pub tenor: f64,
    pub model_bp: f64,
    pub realized_bp: f64,
    /// realized / model.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolReproductionReport {
    pub rows: Vec<VolReproductionRow>,
}

/// Realized-to-model volatility ratio per pillar.
pub fn vol_ratio(model: f64, realized: f64) -> Option<f64> {
    (model > 0.0).then(|| realized / model)
}

/// Model-implied vs realized annualized vol of weekly changes per pillar.
pub fn vol_reproduction(
    spec: &BlockVolSpec,
    oos_panels: &[&CurvePanel],
    dt: f64,
) -> Result<VolReproductionReport, DiagnosticsError> {
    let mut rows = Vec::new();
    for panel in oos_panels {
        for (c, &tenor) in panel.grid().tenors().iter().enumerate() {
            let diffs = weekly_diffs_column(panel, c);
            let realized = if diffs.len() >= 2 {
                let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
                let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>()
                    / (diffs.len() as f64 - 1.0);
                (var / dt).sqrt()
            } else {
                0.0
            };
            let model = model_vol(spec, panel.kind(), tenor)?;
            rows.push(VolReproductionRow {
                variable: panel.kind().to_string(),
                tenor,
                model_bp: model * 1e4,
                realized_bp: realized * 1e4,
                ratio: vol_ratio(model, realized),
            });
        }
    }
    Ok(VolReproductionReport { rows })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrReproductionRow {
    pub factor_i: usize,
    pub factor_j: usize,
    pub in_sample: f64,
    pub out_of_sample: f64,
    pub diff: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrReproductionReport {
    pub rows: Vec<CorrReproductionRow>,
}

fn score_corr(scores: &FactorScores, i: usize, j: usize) -> f64 {
    let x = scores.data();
    let n = scores.n_rows();
    let (mut mi, mut mj) = (0.0, 0.0);
    for r in 0..n {
        mi += x[(r, i)];
        mj += x[(r, j)];
    }
    mi /= n as f64;
    mj /= n as f64;
    let (mut cij, mut cii, mut cjj) = (0.0, 0.0, 0.0);
    for r in 0..n {
        let a = x[(r, i)] - mi;
        let b = x[(r, j)] - mj;
        cij += a * b;
        cii += a * a;
        cjj += b * b;
    }
    cij / (cii * cjj).sqrt()
}

/// In-sample vs out-of-sample factor-score correlations for selected pairs.
pub fn corr_reproduction(
    in_sample: &FactorScores,
    out_of_sample: &FactorScores,
    pairs: &[(usize, usize)],
) -> Result<CorrReproductionReport, DiagnosticsError> {
    let m = in_sample.m();
    if out_of_sample.m() != m {
        return Err(DiagnosticsError::Invalid("factor-count mismatch".into()));
    }
    for &(i, j) in pairs {
        if i >= m || j >= m {
            return Err(DiagnosticsError::Invalid(format!(
                "pair ({i},{j}) outside factor space of dimension {m}"
            )));
        }
    }
    let rows = pairs
        .iter()
        .map(|&(i, j)| {
            let a = score_corr(in_sample, i, j);
            let b = score_corr(out_of_sample, i, j);
            CorrReproductionRow {
                factor_i: i,
                factor_j: j,
                in_sample: a,
                out_of_sample: b,
                diff: b - a,
            }
        })
        .collect();
    Ok(CorrReproductionReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::ForwardCurve;
    use crate::marketdata::PillarGrid;
    use crate::sim::{run_paths, SimConfig, SimInit};
    use crate::volarch::{AmplitudeMatrix, FxLoading, FxTarget, ShapeFamily};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn grid(t: &[f64]) -> PillarGrid {
        PillarGrid::new(t.to_vec()).unwrap()
    }

    fn zero_vol_spec() -> BlockVolSpec {
        BlockVolSpec::new(
            ShapeFamily::new(0.7, 3.4, 3.7).unwrap(),
            AmplitudeMatrix::new(Block::Nominal, vec![vec![0.0; 3]]).unwrap(),
            AmplitudeMatrix::new(Block::Real, vec![vec![0.0; 3]]).unwrap(),
            AmplitudeMatrix::new(Block::Spread, vec![vec![0.0; 2]]).unwrap(),
            FxLoading::new(FxTarget::Inflation, vec![0.0; 3], true).unwrap(),
            FxLoading::new(FxTarget::Credit, vec![0.0; 3], true).unwrap(),
            DMatrix::identity(3, 3),
        )
        .unwrap()
    }

    fn quick_sim(spec: &BlockVolSpec, n_paths: usize, seed: u64) -> SimOutput {
        let g = grid(&[0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0]);
        let f: Vec<f64> = g.tenors().iter().map(|&t| 0.11 + 0.002 * t).collect();
        let fr: Vec<f64> = g.tenors().iter().map(|&t| 0.055 + 0.001 * t).collect();
        let init = SimInit::new(
            ForwardCurve::new(g.clone(), f).unwrap(),
            ForwardCurve::new(g.clone(), fr).unwrap(),
            ForwardCurve::new(g.clone(), vec![0.018; 8]).unwrap(),
        );
        let cfg = SimConfig {
            dt: 1.0 / 52.0,
            horizon: 1.0,
            n_paths,
            seed,
            pillar_grid: g,
            antithetic: false,
            record_every: 13,
        };
        run_paths(&init, spec, &cfg).unwrap()
    }

    #[test]
    fn zero_vol_martingale_reports_zero_z() {
        let sim = quick_sim(&zero_vol_spec(), 4, 1);
        let rep = martingale_test(&sim, &[0.25, 0.5, 1.0], 0.05).unwrap();
        for row in &rep.rows {
            assert_relative_eq!(row.bias_bp, 0.0, epsilon = 1e-9);
            assert_eq!(row.z, 0.0);
            assert!(!row.flagged);
        }
        assert_relative_eq!(rep.z_crit, 1.959964, epsilon = 1e-5);
    }

    #[test]
    fn martingale_rejects_unrecorded_horizon() {
        let sim = quick_sim(&zero_vol_spec(), 4, 1);
        assert!(matches!(
            martingale_test(&sim, &[0.3], 0.05).unwrap_err(),
            DiagnosticsError::HorizonNotRecorded(_)
        ));
    }

    #[test]
    fn triangle_passes_and_fault_injection_fails() {
        let sim = quick_sim(&zero_vol_spec(), 2, 3);
        let rep = triangle_check(&sim, 1e-10);
        assert!(rep.pass, "max violation {}", rep.max_violation);
        // Corrupt one cell through the injection hook.
        let bad = triangle_check_values(&sim, 1e-10, |p, r, i| {
            sim.s_ipca(p, r, i) + if (p, r, i) == (1, 2, 3) { 1e-6 } else { 0.0 }
        });
        assert!(!bad.pass);
        assert_eq!(bad.worst, Some((1, 2, 3)));
        assert_relative_eq!(bad.max_violation, 1e-6, max_relative = 1e-6);
    }

    #[test]
    fn smoothness_zero_for_linear_curves() {
        // Zero vol keeps the linear initial curves linear (transport of a
        // linear function), so every second difference vanishes.
        let sim = quick_sim(&zero_vol_spec(), 2, 5);
        let rep = smoothness_metric(&sim, &[("short", 0.25, 2.0), ("long", 2.0, 10.0)]).unwrap();
        for row in rep.rows {
            assert!(
                row.simulated_p95 < 1e-9,
                "{} {} p95 {}",
                row.curve,
                row.window,
                row.simulated_p95
            );
        }
    }

    #[test]
    fn smoothness_rejects_empty_window() {
        let sim = quick_sim(&zero_vol_spec(), 2, 5);
        assert!(matches!(
            smoothness_metric(&sim, &[("none", 11.0, 12.0)]).unwrap_err(),
            DiagnosticsError::DegenerateGrid { .. }
        ));
    }

    #[test]
    fn coverage_is_one_under_huge_model_vol() {
        // sigma_model -> large makes every interval cover.
        let spec = {
            BlockVolSpec::new(
                ShapeFamily::new(0.7, 3.4, 3.7).unwrap(),
                AmplitudeMatrix::new(Block::Nominal, vec![vec![10.0, 0.0, 0.0]]).unwrap(),
                AmplitudeMatrix::new(Block::Real, vec![vec![10.0, 0.0, 0.0]]).unwrap(),
                AmplitudeMatrix::new(Block::Spread, vec![vec![10.0, 0.0]]).unwrap(),
                FxLoading::new(FxTarget::Inflation, vec![0.0; 3], true).unwrap(),
                FxLoading::new(FxTarget::Credit, vec![0.0; 3], true).unwrap(),
                DMatrix::identity(3, 3),
            )
            .unwrap()
        };
        let epoch = chrono::NaiveDate::from_ymd_opt(2024, 1, 5).unwrap();
        let dates: Vec<chrono::NaiveDate> =
            (0..40).map(|i| epoch + chrono::Duration::days(7 * i)).collect();
        let values: Vec<Option<f64>> = (0..40).map(|i| Some(0.11 + (i as f64).sin() * 1e-3)).collect();
        let panel =
            CurvePanel::new(dates, grid(&[1.0]), values, SeriesKind::NominalFwd).unwrap();
        let rep = coverage_test(&spec, &[&panel], 0.90, 1.0 / 52.0).unwrap();
        assert_relative_eq!(rep.cells[0].coverage, 1.0);
    }

    #[test]
    fn vol_reproduction_zero_changes() {
        let spec = zero_vol_spec();
        let epoch = chrono::NaiveDate::from_ymd_opt(2024, 1, 5).unwrap();
        let dates: Vec<chrono::NaiveDate> =
            (0..35).map(|i| epoch + chrono::Duration::days(7 * i)).collect();
        let values: Vec<Option<f64>> = vec![Some(0.02); 35];
        let panel = CurvePanel::new(dates, grid(&[1.0]), values, SeriesKind::CdiSpread).unwrap();
        let rep = vol_reproduction(&spec, &[&panel], 1.0 / 52.0).unwrap();
        assert_relative_eq!(rep.rows[0].realized_bp, 0.0);
        assert!(rep.rows[0].ratio.is_none()); // zero model vol
    }

    #[test]
    fn ratio_and_diff_derivations() {
        assert_relative_eq!(vol_ratio(81.1, 115.1).unwrap(), 1.42, epsilon = 0.005);
        assert!(vol_ratio(0.0, 1.0).is_none());
    }
}
