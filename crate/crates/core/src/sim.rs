//! Musiela-grid Monte Carlo of the three-curve system under the nominal
//! pricing measure: transport, closed-form drifts, correlated factor shocks,
//! frozen-rate exponential exchange-rate updates, left-endpoint bank-account
//! accumulation, and the triangle-enforced implied IPCA spread.
//!
//! Paths are independent units of work with per-path RNG sub-streams, so a
//! run is reproducible for a given seed regardless of scheduling.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::curves::ForwardCurve;
use crate::marketdata::PillarGrid;
use crate::volarch::{Block, BlockVolSpec, CorrectionCurve, FxTarget, VolError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("correlation matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("{flagged} of {total} paths aborted on non-finite state (limit 0.1%)")]
    TooManyAborts { flagged: usize, total: usize },
    #[error(transparent)]
    Vol(#[from] VolError),
}

/// Uniform time-to-maturity grid tau_k = k * spacing, k = 0..n.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseGrid {
    spacing: f64,
    n: usize,
}

impl DenseGrid {
    pub fn tau(&self, k: usize) -> f64 {
        k as f64 * self.spacing
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Time step in years.
    pub dt: f64,
    /// Simulation horizon in years.
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Pillars recorded in the output; also sets the dense-grid extent
    /// (max pillar + horizon).
    pub pillar_grid: PillarGrid,
    /// Antithetic path pairing (off by default; martingale diagnostics
    /// quote plain Monte Carlo error).
    pub antithetic: bool,
    /// Record every k-th step (step 0 always recorded).
    pub record_every: usize,
}

impl SimConfig {
    fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0) {
            return Err(SimError::InvalidConfig(format!("dt = {} must be > 0", self.dt)));
        }
        if self.horizon < self.dt {
            return Err(SimError::InvalidConfig(format!(
                "horizon {} shorter than one step {}",
                self.horizon, self.dt
            )));
        }
        if self.n_paths == 0 {
            return Err(SimError::InvalidConfig("n_paths must be >= 1".into()));
        }
        if self.antithetic && self.n_paths % 2 != 0 {
            return Err(SimError::InvalidConfig(
                "antithetic pairing needs an even path count".into(),
            ));
        }
        if self.record_every == 0 {
            return Err(SimError::InvalidConfig("record_every must be >= 1".into()));
        }
        Ok(())
    }

    fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round().max(1.0) as usize
    }
}

/// Initial curves on the pillar grid plus exchange-rate normalizations.
#[derive(Debug, Clone)]
pub struct SimInit {
    pub f_n: ForwardCurve,
    pub f_r: ForwardCurve,
    /// Initial CDI spread curve; any deterministic reconciliation adjustment
    /// is absorbed here before simulation.
    pub s_cdi: ForwardCurve,
    pub i0: f64,
    pub j0: f64,
}

impl SimInit {
    pub fn new(f_n: ForwardCurve, f_r: ForwardCurve, s_cdi: ForwardCurve) -> Self {
        Self {
            f_n,
            f_r,
            s_cdi,
            i0: 1.0,
            j0: 1.0,
        }
    }
}

/// Per-path state on the dense Musiela grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub grid: DenseGrid,
    pub f_n: Vec<f64>,
    pub f_r: Vec<f64>,
    pub s_cdi: Vec<f64>,
    pub i: f64,
    pub j: f64,
    pub k: f64,
    pub b_n: f64,
    pub b_r: f64,
    pub b_c: f64,
    pub t: f64,
}

impl SimState {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("I", self.i),
            ("J", self.j),
            ("K", self.k),
            ("B_N", self.b_n),
            ("B_R", self.b_r),
            ("B_C", self.b_c),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SimError::InvalidState(format!("{name} = {v} must be positive")));
            }
        }
        if (self.k - self.j / self.i).abs() > 1e-12 * self.k.max(1.0) {
            return Err(SimError::InvalidState("K != J/I".into()));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.f_n) || !finite(&self.f_r) || !finite(&self.s_cdi) {
            return Err(SimError::InvalidState("non-finite curve value".into()));
        }
        Ok(())
    }

    pub fn short_rates(&self) -> (f64, f64, f64) {
        let r_n = self.f_n[0];
        let r_r = self.f_r[0];
        let r_c = r_n + self.s_cdi[0];
        (r_n, r_r, r_c)
    }
}

/// Interpolate a pillar curve onto the dense grid (piecewise linear, flat
/// beyond the last pillar). Grid points that coincide with a pillar take the
/// pillar value exactly.
fn densify(curve: &ForwardCurve, grid: DenseGrid) -> Vec<f64> {
    let mut out: Vec<f64> = (0..grid.len())
        .map(|k| curve.forward_linear(grid.tau(k)))
        .collect();
    for (p, &tenor) in curve.grid().tenors().iter().enumerate() {
        let pos = tenor / grid.spacing();
        let k = pos.round() as usize;
        if k < grid.len() && (pos - k as f64).abs() < 1e-9 {
            out[k] = curve.fwds()[p];
        }
    }
    out
}

/// Build the initial dense-grid state from pillar curves. Spacing is
/// min(dt, 0.25y); the grid extends to max pillar + horizon so transport
/// never reads past calibrated data before the horizon.
pub fn initial_state(init: &SimInit, dt: f64, horizon: f64) -> Result<SimState, SimError> {
    if !(dt > 0.0) || horizon < 0.0 {
        return Err(SimError::InvalidConfig("dt must be > 0, horizon >= 0".into()));
    }
    if !(init.i0 > 0.0) || !(init.j0 > 0.0) {
        return Err(SimError::InvalidState("I0 and J0 must be positive".into()));
    }
    let spacing = dt.min(0.25);
    let max_tau = init.f_n.grid().max_tenor() + horizon;
    let n = (max_tau / spacing).ceil() as usize + 1;
    let grid = DenseGrid { spacing, n };
    let state = SimState {
        grid,
        f_n: densify(&init.f_n, grid),
        f_r: densify(&init.f_r, grid),
        s_cdi: densify(&init.s_cdi, grid),
        i: init.i0,
        j: init.j0,
        k: init.j0 / init.i0,
        b_n: 1.0,
        b_r: 1.0,
        b_c: 1.0,
        t: 0.0,
    };
    state.validate()?;
    Ok(state)
}

/// Lower-triangular Cholesky factor of a correlation matrix, L L' = rho.
pub fn cholesky_factor(rho: &DMatrix<f64>) -> Result<DMatrix<f64>, SimError> {
    nalgebra::Cholesky::new(rho.clone())
        .map(|c| c.l())
        .ok_or(SimError::NotPositiveDefinite)
}

/// Musiela transport: each maturity ages by dt, so the new value at tau is
/// the old value at tau + dt (linear interpolation, flat beyond the end).
pub fn transport(curve: &ForwardCurve, dt: f64) -> ForwardCurve {
    let fwds = curve
        .grid()
        .tenors()
        .iter()
        .map(|&tau| curve.forward_linear(tau + dt))
        .collect();
    ForwardCurve::new(curve.grid().clone(), fwds).expect("same grid")
}

/// Precomputed per-run tables: drifts and factor vols on the dense grid,
/// the Cholesky factor, and the transport stencil.
struct Engine {
    m: usize,
    n_grid: usize,
    chol: DMatrix<f64>,
    /// Per curve (N, R, S): per factor of its block, vol at each grid point.
    vols: [Vec<Vec<f64>>; 3],
    /// Per curve: total drift times dt at each grid point (FX corrections included).
    drift_dt: [Vec<f64>; 3],
    block_offset: [usize; 3],
    block_len: [usize; 3],
    sigma_i: Vec<f64>,
    sigma_j: Vec<f64>,
    half_norm2_i_dt: f64,
    half_norm2_j_dt: f64,
    dt: f64,
    shift: usize,
    shift_w: f64,
    sqrt_dt: f64,
}

impl Engine {
    fn new(spec: &BlockVolSpec, grid: DenseGrid, dt: f64) -> Result<Self, SimError> {
        let n_grid = grid.len();
        let dims = spec.dims();
        let chol = cholesky_factor(spec.rho())?;

        let mut vols: [Vec<Vec<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut drift_dt: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (ci, block) in [Block::Nominal, Block::Real, Block::Spread].iter().enumerate() {
            let m_b = dims.range(*block).len();
            let mut per_factor = vec![vec![0.0; n_grid]; m_b];
            let mut drift = vec![0.0; n_grid];
            for k in 0..n_grid {
                let tau = grid.tau(k);
                let local = spec.block_vol_local(*block, tau);
                for (p, v) in local.into_iter().enumerate() {
                    per_factor[p][k] = v;
                }
                drift[k] = match block {
                    Block::Nominal => spec.hjm_drift_own(Block::Nominal, tau),
                    Block::Real => {
                        spec.hjm_drift_own(Block::Real, tau)
                            - spec.fx_drift_correction(CorrectionCurve::Real, tau)?
                    }
                    Block::Spread => spec.spread_drift(tau)?,
                } * dt;
            }
            vols[ci] = per_factor;
            drift_dt[ci] = drift;
        }

        let shift_exact = dt / grid.spacing();
        let shift = shift_exact.floor() as usize;
        let mut shift_w = shift_exact - shift as f64;
        let mut shift = shift;
        if shift_w > 1.0 - 1e-12 {
            shift += 1;
            shift_w = 0.0;
        } else if shift_w < 1e-12 {
            shift_w = 0.0;
        }

        Ok(Self {
            m: dims.m(),
            n_grid,
            chol,
            vols,
            drift_dt,
            block_offset: [
                dims.range(Block::Nominal).start,
                dims.range(Block::Real).start,
                dims.range(Block::Spread).start,
            ],
            block_len: [dims.m_n, dims.m_r, dims.m_s],
            sigma_i: spec.fx_loading(FxTarget::Inflation).alpha().to_vec(),
            sigma_j: spec.fx_loading(FxTarget::Credit).alpha().to_vec(),
            half_norm2_i_dt: 0.5 * spec.fx_norm2(FxTarget::Inflation) * dt,
            half_norm2_j_dt: 0.5 * spec.fx_norm2(FxTarget::Credit) * dt,
            dt,
            shift,
            shift_w,
            sqrt_dt: dt.sqrt(),
        })
    }

    /// Correlated increment dW = L xi sqrt(dt).
    fn correlate(&self, xi: &[f64], dw: &mut [f64]) {
        for r in 0..self.m {
            let mut acc = 0.0;
            for c in 0..=r {
                acc += self.chol[(r, c)] * xi[c];
            }
            dw[r] = acc * self.sqrt_dt;
        }
    }

    /// Transport in place: values shift toward shorter maturities, flat at
    /// the long end. Reads stay ahead of writes because shift >= 1.
    fn transport_inplace(&self, f: &mut [f64]) {
        let n = self.n_grid;
        let s = self.shift;
        if self.shift_w == 0.0 {
            if s < n {
                f.copy_within(s.., 0);
            }
            let last = f[n - 1];
            for v in f[n - s.min(n)..].iter_mut() {
                *v = last;
            }
        } else {
            let w = self.shift_w;
            for k in 0..n {
                let a = (k + s).min(n - 1);
                let b = (k + s + 1).min(n - 1);
                f[k] = f[a] * (1.0 - w) + f[b] * w;
            }
        }
    }

    /// One Euler step over all three curves plus FX and bank accounts.
    fn step_inplace(&self, st: &mut RawState, dw: &[f64]) {
        let r_n = st.f_n[0];
        let r_r = st.f_r[0];
        let r_c = r_n + st.s_cdi[0];

        for (ci, f) in [&mut st.f_n, &mut st.f_r, &mut st.s_cdi].into_iter().enumerate() {
            self.transport_inplace(f);
            let drift = &self.drift_dt[ci];
            for k in 0..self.n_grid {
                f[k] += drift[k];
            }
            let off = self.block_offset[ci];
            for p in 0..self.block_len[ci] {
                let w = dw[off + p];
                let vol = &self.vols[ci][p];
                for k in 0..self.n_grid {
                    f[k] += vol[k] * w;
                }
            }
        }

        let dot = |sig: &[f64]| -> f64 { sig.iter().zip(dw).map(|(s, w)| s * w).sum() };
        st.i *= ((r_n - r_r) * self.dt - self.half_norm2_i_dt + dot(&self.sigma_i)).exp();
        st.j *= ((r_n - r_c) * self.dt - self.half_norm2_j_dt + dot(&self.sigma_j)).exp();
        st.b_n *= (r_n * self.dt).exp();
        st.b_r *= (r_r * self.dt).exp();
        st.b_c *= (r_c * self.dt).exp();
    }
}

struct RawState {
    f_n: Vec<f64>,
    f_r: Vec<f64>,
    s_cdi: Vec<f64>,
    i: f64,
    j: f64,
    b_n: f64,
    b_r: f64,
    b_c: f64,
}

impl RawState {
    fn is_finite(&self) -> bool {
        self.i.is_finite()
            && self.j.is_finite()
            && self.b_n.is_finite()
            && self.b_r.is_finite()
            && self.b_c.is_finite()
            && self.f_n.iter().all(|v| v.is_finite())
            && self.f_r.iter().all(|v| v.is_finite())
            && self.s_cdi.iter().all(|v| v.is_finite())
    }
}

/// Advance one step: pre-step short rates, correlated shocks, transported
/// and drifted curves, frozen-rate exponential FX updates, left-endpoint
/// bank accrual. `xi` is a standard-normal draw of factor dimension.
pub fn step(
    state: &SimState,
    spec: &BlockVolSpec,
    xi: &[f64],
    dt: f64,
) -> Result<SimState, SimError> {
    if xi.len() != spec.m() {
        return Err(SimError::InvalidConfig(format!(
            "xi has length {}, factor space is {}",
            xi.len(),
            spec.m()
        )));
    }
    state.validate()?;
    let engine = Engine::new(spec, state.grid, dt)?;
    let mut raw = RawState {
        f_n: state.f_n.clone(),
        f_r: state.f_r.clone(),
        s_cdi: state.s_cdi.clone(),
        i: state.i,
        j: state.j,
        b_n: state.b_n,
        b_r: state.b_r,
        b_c: state.b_c,
    };
    let mut dw = vec![0.0; spec.m()];
    engine.correlate(xi, &mut dw);
    engine.step_inplace(&mut raw, &dw);
    if !raw.is_finite() {
        return Err(SimError::InvalidState("non-finite state after step".into()));
    }
    let next = SimState {
        grid: state.grid,
        f_n: raw.f_n,
        f_r: raw.f_r,
        s_cdi: raw.s_cdi,
        i: raw.i,
        j: raw.j,
        k: raw.j / raw.i,
        b_n: raw.b_n,
        b_r: raw.b_r,
        b_c: raw.b_c,
        t: state.t + dt,
    };
    next.validate()?;
    Ok(next)
}

/// How a recorded pillar reads from the dense grid.
#[derive(Debug, Clone, Copy)]
enum PillarReader {
    /// Pillar coincides with a grid point; the read is exact, so recorded
    /// initial curves match the inputs bit for bit.
    Exact(usize),
    Interp(usize, f64),
}

impl PillarReader {
    fn read(&self, f: &[f64]) -> f64 {
        match *self {
            PillarReader::Exact(k) => f[k],
            PillarReader::Interp(k, w) => f[k] * (1.0 - w) + f[k + 1] * w,
        }
    }
}

fn pillar_readers(grid: DenseGrid, pillars: &[f64]) -> Vec<PillarReader> {
    pillars
        .iter()
        .map(|&tau| {
            let pos = tau / grid.spacing();
            let k = pos.round() as usize;
            if k < grid.len() && (pos - k as f64).abs() < 1e-9 {
                PillarReader::Exact(k)
            } else {
                let k = (pos.floor() as usize).min(grid.len() - 2);
                PillarReader::Interp(k, pos - k as f64)
            }
        })
        .collect()
}

/// Recorded simulation output: scalars and pillar curves per (path, record).
#[derive(Debug, Clone)]
pub struct SimOutput {
    pillar_tenors: Vec<f64>,
    times: Vec<f64>,
    n_paths: usize,
    scalars: Vec<f64>,
    curves: Vec<f64>,
    flagged: Vec<usize>,
}

const N_SCALARS: usize = 9; // I, J, K, B_N, B_R, B_C, r_N, r_R, r_C
const N_CURVES: usize = 4; // f_N, f_R, s_CDI, s_IPCA

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scalar {
    I = 0,
    J = 1,
    K = 2,
    BankN = 3,
    BankR = 4,
    BankC = 5,
    RateN = 6,
    RateR = 7,
    RateC = 8,
}

impl SimOutput {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn pillar_tenors(&self) -> &[f64] {
        &self.pillar_tenors
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_records(&self) -> usize {
        self.times.len()
    }

    /// Paths aborted on non-finite state, excluded from recorded statistics.
    pub fn flagged(&self) -> &[usize] {
        &self.flagged
    }

    pub fn scalar(&self, s: Scalar, path: usize, rec: usize) -> f64 {
        self.scalars[(path * self.n_records() + rec) * N_SCALARS + s as usize]
    }

    fn curve_at(&self, c: usize, path: usize, rec: usize, pillar: usize) -> f64 {
        let np = self.pillar_tenors.len();
        self.curves[((path * self.n_records() + rec) * N_CURVES + c) * np + pillar]
    }

    pub fn f_n(&self, path: usize, rec: usize, pillar: usize) -> f64 {
        self.curve_at(0, path, rec, pillar)
    }

    pub fn f_r(&self, path: usize, rec: usize, pillar: usize) -> f64 {
        self.curve_at(1, path, rec, pillar)
    }

    pub fn s_cdi(&self, path: usize, rec: usize, pillar: usize) -> f64 {
        self.curve_at(2, path, rec, pillar)
    }

    pub fn s_ipca(&self, path: usize, rec: usize, pillar: usize) -> f64 {
        self.curve_at(3, path, rec, pillar)
    }

    /// Deflated inflation numeraire I B^R / B^N (a martingale with mean I0).
    pub fn deflated_i(&self, path: usize, rec: usize) -> f64 {
        self.scalar(Scalar::I, path, rec) * self.scalar(Scalar::BankR, path, rec)
            / self.scalar(Scalar::BankN, path, rec)
    }

    /// Deflated credit numeraire J B^C / B^N (a martingale with mean J0).
    pub fn deflated_j(&self, path: usize, rec: usize) -> f64 {
        self.scalar(Scalar::J, path, rec) * self.scalar(Scalar::BankC, path, rec)
            / self.scalar(Scalar::BankN, path, rec)
    }
}

/// Run the Monte Carlo. Deterministic per seed: path p draws from RNG
/// sub-stream p, so results do not depend on scheduling.
pub fn run_paths(
    init: &SimInit,
    spec: &BlockVolSpec,
    cfg: &SimConfig,
) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let state0 = initial_state(init, cfg.dt, cfg.horizon)?;
    let engine = Engine::new(spec, state0.grid, cfg.dt)?;
    let n_steps = cfg.n_steps();
    let recorded_steps: Vec<usize> = (0..=n_steps).filter(|k| k % cfg.record_every == 0).collect();
    let times: Vec<f64> = recorded_steps.iter().map(|&k| k as f64 * cfg.dt).collect();
    let readers = pillar_readers(state0.grid, cfg.pillar_grid.tenors());
    let n_rec = recorded_steps.len();
    let n_pillars = readers.len();
    let m = spec.m();

    struct PathOut {
        scalars: Vec<f64>,
        curves: Vec<f64>,
        aborted: bool,
    }

    let run_one = |path: usize| -> PathOut {
        let stream = if cfg.antithetic { path / 2 } else { path } as u64;
        let negate = cfg.antithetic && path % 2 == 1;
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);

        let mut st = RawState {
            f_n: state0.f_n.clone(),
            f_r: state0.f_r.clone(),
            s_cdi: state0.s_cdi.clone(),
            i: init.i0,
            j: init.j0,
            b_n: 1.0,
            b_r: 1.0,
            b_c: 1.0,
        };
        let mut scalars = vec![f64::NAN; n_rec * N_SCALARS];
        let mut curves = vec![f64::NAN; n_rec * N_CURVES * n_pillars];
        let mut xi = vec![0.0; m];
        let mut dw = vec![0.0; m];
        let mut rec_cursor = 0usize;
        let mut aborted = false;

        let record = |st: &RawState, rec: usize, scalars: &mut [f64], curves: &mut [f64]| {
            let r_n = st.f_n[0];
            let r_r = st.f_r[0];
            let r_c = r_n + st.s_cdi[0];
            let base = rec * N_SCALARS;
            scalars[base..base + N_SCALARS].copy_from_slice(&[
                st.i,
                st.j,
                st.j / st.i,
                st.b_n,
                st.b_r,
                st.b_c,
                r_n,
                r_r,
                r_c,
            ]);
            let cbase = rec * N_CURVES * n_pillars;
            for (pi, rd) in readers.iter().enumerate() {
                let fn_v = rd.read(&st.f_n);
                let fr_v = rd.read(&st.f_r);
                let sc_v = rd.read(&st.s_cdi);
                curves[cbase + pi] = fn_v;
                curves[cbase + n_pillars + pi] = fr_v;
                curves[cbase + 2 * n_pillars + pi] = sc_v;
                // Triangle identity defines the implied IPCA spread.
                curves[cbase + 3 * n_pillars + pi] = sc_v + fn_v - fr_v;
            }
        };

        if recorded_steps[0] == 0 {
            record(&st, 0, &mut scalars, &mut curves);
            rec_cursor = 1;
        }
        for step_idx in 1..=n_steps {
            for x in xi.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
                if negate {
                    *x = -*x;
                }
            }
            engine.correlate(&xi, &mut dw);
            engine.step_inplace(&mut st, &dw);
            if rec_cursor < n_rec && recorded_steps[rec_cursor] == step_idx {
                if !st.is_finite() {
                    aborted = true;
                    break;
                }
                record(&st, rec_cursor, &mut scalars, &mut curves);
                rec_cursor += 1;
            }
        }
        if !aborted && !st.is_finite() {
            aborted = true;
        }
        PathOut {
            scalars,
            curves,
            aborted,
        }
    };

    let per_path: Vec<PathOut> = (0..cfg.n_paths).into_par_iter().map(run_one).collect();

    let flagged: Vec<usize> = per_path
        .iter()
        .enumerate()
        .filter(|(_, p)| p.aborted)
        .map(|(i, _)| i)
        .collect();
    if flagged.len() as f64 > 0.001 * cfg.n_paths as f64 {
        return Err(SimError::TooManyAborts {
            flagged: flagged.len(),
            total: cfg.n_paths,
        });
    }

    let mut scalars = Vec::with_capacity(cfg.n_paths * n_rec * N_SCALARS);
    let mut curves = Vec::with_capacity(cfg.n_paths * n_rec * N_CURVES * n_pillars);
    for p in per_path {
        scalars.extend_from_slice(&p.scalars);
        curves.extend_from_slice(&p.curves);
    }

    Ok(SimOutput {
        pillar_tenors: cfg.pillar_grid.tenors().to_vec(),
        times,
        n_paths: cfg.n_paths,
        scalars,
        curves,
        flagged,
    })
}

/// Zero-coupon discount from a forward curve: exp of the negative
/// piecewise-linear (trapezoidal) integral over [0, T], flat below the first
/// pillar.
pub fn discount_from_forwards(curve: &ForwardCurve, t: f64) -> Result<f64, SimError> {
    let tenors = curve.grid().tenors();
    let max = curve.grid().max_tenor();
    if !(0.0..=max).contains(&t) {
        return Err(SimError::InvalidConfig(format!(
            "maturity {t} outside [0, {max}]"
        )));
    }
    let f = curve.fwds();
    let mut acc = 0.0;
    let mut prev_tau = 0.0;
    let mut prev_val = f[0];
    for (i, &tau) in tenors.iter().enumerate() {
        if t <= tau {
            let val_t = if i == 0 {
                f[0]
            } else {
                let w = (t - prev_tau) / (tau - prev_tau);
                prev_val * (1.0 - w) + f[i] * w
            };
            acc += 0.5 * (prev_val + val_t) * (t - prev_tau);
            return Ok((-acc).exp());
        }
        acc += 0.5 * (prev_val + f[i]) * (tau - prev_tau);
        prev_tau = tau;
        prev_val = f[i];
    }
    Ok((-acc).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volarch::{AmplitudeMatrix, FxLoading, ShapeFamily};
    use approx::assert_relative_eq;

    fn grid(t: &[f64]) -> PillarGrid {
        PillarGrid::new(t.to_vec()).expect("grid")
    }

    fn flat_curve(level: f64) -> ForwardCurve {
        ForwardCurve::new(grid(&[0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0]), vec![level; 8])
            .unwrap()
    }

    fn linear_curve(a: f64, b: f64) -> ForwardCurve {
        let g = grid(&[0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0]);
        let f = g.tenors().iter().map(|&t| a + b * t).collect();
        ForwardCurve::new(g, f).unwrap()
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

    fn small_spec() -> BlockVolSpec {
        let mut rho = DMatrix::identity(7, 7);
        rho[(0, 3)] = 0.5;
        rho[(3, 0)] = 0.5;
        rho[(0, 5)] = -0.2;
        rho[(5, 0)] = -0.2;
        BlockVolSpec::new(
            ShapeFamily::new(0.7, 3.4, 3.7).unwrap(),
            AmplitudeMatrix::new(
                Block::Nominal,
                vec![
                    vec![0.0080, 0.0020, -0.0100],
                    vec![-0.0010, 0.0060, 0.0],
                    vec![0.0005, -0.0050, 0.0300],
                ],
            )
            .unwrap(),
            AmplitudeMatrix::new(
                Block::Real,
                vec![vec![0.0050, 0.0030, 0.0100], vec![-0.0005, -0.0040, 0.0200]],
            )
            .unwrap(),
            AmplitudeMatrix::new(
                Block::Spread,
                vec![vec![0.0006, 0.0030], vec![-0.0002, 0.0060]],
            )
            .unwrap(),
            FxLoading::new(
                FxTarget::Inflation,
                vec![0.0, 0.0, 0.0, 0.0050, 0.0040, 0.0, 0.0],
                true,
            )
            .unwrap(),
            FxLoading::new(
                FxTarget::Credit,
                vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0070, 0.0030],
                true,
            )
            .unwrap(),
            rho,
        )
        .unwrap()
    }

    fn init_curves() -> SimInit {
        SimInit::new(
            linear_curve(0.11, 0.002),
            linear_curve(0.055, 0.001),
            flat_curve(0.018),
        )
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky_factor(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(l, DMatrix::identity(4, 4));
    }

    #[test]
    fn cholesky_2x2_closed_form() {
        let mut rho = DMatrix::identity(2, 2);
        rho[(0, 1)] = 0.5;
        rho[(1, 0)] = 0.5;
        let l = cholesky_factor(&rho).unwrap();
        assert_relative_eq!(l[(0, 0)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(l[(1, 0)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(l[(1, 1)], 0.75f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn cholesky_rejects_non_pd() {
        let mut rho = DMatrix::identity(2, 2);
        rho[(0, 1)] = 1.2;
        rho[(1, 0)] = 1.2;
        assert!(matches!(
            cholesky_factor(&rho).unwrap_err(),
            SimError::NotPositiveDefinite
        ));
    }

    #[test]
    fn transport_flat_curve_unchanged() {
        let c = flat_curve(0.1);
        let t = transport(&c, 1.0 / 52.0);
        for (&a, &b) in c.fwds().iter().zip(t.fwds()) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn transport_linear_curve_shifts_exactly() {
        let c = linear_curve(0.05, 0.01);
        let dt = 0.3;
        let t = transport(&c, dt);
        for (i, &tau) in c.grid().tenors().iter().enumerate() {
            if tau + dt <= c.grid().max_tenor() {
                assert_relative_eq!(t.fwds()[i], 0.05 + 0.01 * (tau + dt), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_vol_step_is_pure_transport_plus_fx_drift() {
        let spec = zero_vol_spec();
        let init = init_curves();
        let dt = 1.0 / 52.0;
        let s0 = initial_state(&init, dt, 1.0).unwrap();
        let s1 = step(&s0, &spec, &[0.0, 0.0, 0.0], dt).unwrap();
        // Linear curve rolls down exactly under linear interpolation.
        for k in 0..s0.grid.len() - 2 {
            let tau = s0.grid.tau(k);
            assert!(
                (s1.f_n[k] - (0.11 + 0.002 * (tau + dt))).abs() < 1e-12,
                "grid point {k}"
            );
        }
        let (r_n, r_r, _) = s0.short_rates();
        assert_relative_eq!(s1.i, ((r_n - r_r) * dt).exp(), epsilon = 1e-14);
        assert_relative_eq!(s1.b_n, (r_n * dt).exp(), epsilon = 1e-14);
        assert_relative_eq!(s1.k, s1.j / s1.i, epsilon = 1e-15);
    }

    #[test]
    fn single_step_matches_two_half_steps_at_zero_vol() {
        // Zero-vol Richardson check on a curved profile: one dt step vs two
        // dt/2 steps agree to O(dt^2).
        let spec = zero_vol_spec();
        let g = grid(&[0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0]);
        let f: Vec<f64> = g.tenors().iter().map(|&t| 0.10 + 0.01 * (-t).exp()).collect();
        let init = SimInit::new(
            ForwardCurve::new(g.clone(), f).unwrap(),
            flat_curve(0.05),
            flat_curve(0.015),
        );
        let dt = 1.0 / 52.0;
        let s0 = initial_state(&init, dt / 2.0, 1.0).unwrap();
        let full = step(&s0, &spec, &[0.0; 3], dt).unwrap();
        let half = step(&s0, &spec, &[0.0; 3], dt / 2.0).unwrap();
        let half2 = step(&half, &spec, &[0.0; 3], dt / 2.0).unwrap();
        let bound = 5.0 * dt * dt;
        for k in 0..s0.grid.len() {
            assert!(
                (full.f_n[k] - half2.f_n[k]).abs() < bound,
                "point {k}: {} vs {}",
                full.f_n[k],
                half2.f_n[k]
            );
        }
    }

    #[test]
    fn run_is_deterministic_per_seed_and_differs_across_seeds() {
        let spec = small_spec();
        let init = init_curves();
        let cfg = SimConfig {
            dt: 1.0 / 52.0,
            horizon: 0.5,
            n_paths: 8,
            seed: 42,
            pillar_grid: grid(&[1.0, 3.0, 5.0]),
            antithetic: false,
            record_every: 1,
        };
        let a = run_paths(&init, &spec, &cfg).unwrap();
        let b = run_paths(&init, &spec, &cfg).unwrap();
        assert_eq!(a.scalars, b.scalars);
        assert_eq!(a.curves, b.curves);
        let cfg2 = SimConfig { seed: 43, ..cfg };
        let c = run_paths(&init, &spec, &cfg2).unwrap();
        assert_ne!(a.scalars, c.scalars);
    }

    #[test]
    fn initial_record_matches_input_curves_bit_exactly() {
        let spec = small_spec();
        let init = init_curves();
        let cfg = SimConfig {
            dt: 1.0 / 52.0,
            horizon: 0.25,
            n_paths: 2,
            seed: 1,
            pillar_grid: init.f_n.grid().clone(),
            antithetic: false,
            record_every: 1,
        };
        let out = run_paths(&init, &spec, &cfg).unwrap();
        for (pi, _) in init.f_n.grid().tenors().iter().enumerate() {
            assert_eq!(out.f_n(0, 0, pi), init.f_n.fwds()[pi]);
            assert_eq!(out.f_r(0, 0, pi), init.f_r.fwds()[pi]);
            assert_eq!(out.s_cdi(0, 0, pi), init.s_cdi.fwds()[pi]);
        }
    }

    #[test]
    fn triangle_residual_tiny_after_steps() {
        let spec = small_spec();
        let init = init_curves();
        let cfg = SimConfig {
            dt: 1.0 / 52.0,
            horizon: 1.0,
            n_paths: 4,
            seed: 7,
            pillar_grid: grid(&[0.25, 1.0, 3.0, 10.0]),
            antithetic: false,
            record_every: 1,
        };
        let out = run_paths(&init, &spec, &cfg).unwrap();
        for path in 0..out.n_paths() {
            for rec in 0..out.n_records() {
                for pi in 0..out.pillar_tenors().len() {
                    let resid = out.s_ipca(path, rec, pi)
                        - out.s_cdi(path, rec, pi)
                        - (out.f_n(path, rec, pi) - out.f_r(path, rec, pi));
                    assert!(resid.abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn k_equals_j_over_i_along_paths() {
        let spec = small_spec();
        let init = init_curves();
        let cfg = SimConfig {
            dt: 1.0 / 52.0,
            horizon: 1.0,
            n_paths: 3,
            seed: 9,
            pillar_grid: grid(&[1.0]),
            antithetic: false,
            record_every: 5,
        };
        let out = run_paths(&init, &spec, &cfg).unwrap();
        for path in 0..3 {
            for rec in 0..out.n_records() {
                let k = out.scalar(Scalar::K, path, rec);
                let j = out.scalar(Scalar::J, path, rec);
                let i = out.scalar(Scalar::I, path, rec);
                assert!((k - j / i).abs() <= 1e-12 * k.max(1.0));
            }
        }
    }

    #[test]
    fn discount_flat_curve() {
        let c = flat_curve(0.10);
        assert_relative_eq!(
            discount_from_forwards(&c, 1.0).unwrap(),
            (-0.10f64).exp(),
            epsilon = 1e-12
        );
        assert_relative_eq!(discount_from_forwards(&c, 0.0).unwrap(), 1.0);
        assert!(discount_from_forwards(&c, 11.0).is_err());
    }

    #[test]
    fn discount_matches_fine_quadrature_on_linear_curve() {
        let c = linear_curve(0.08, 0.004);
        let t = 6.3;
        // Riemann oracle on the same piecewise-linear interpolant.
        let n = 400_000;
        let mut acc = 0.0;
        for i in 0..n {
            let u = (i as f64 + 0.5) * t / n as f64;
            acc += c.forward_linear(u) * t / n as f64;
        }
        assert_relative_eq!(
            discount_from_forwards(&c, t).unwrap(),
            (-acc).exp(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn antithetic_requires_even_paths() {
        let spec = small_spec();
        let init = init_curves();
        let cfg = SimConfig {
            dt: 1.0 / 52.0,
            horizon: 0.25,
            n_paths: 3,
            seed: 1,
            pillar_grid: grid(&[1.0]),
            antithetic: true,
            record_every: 1,
        };
        assert!(run_paths(&init, &spec, &cfg).is_err());
    }
}
