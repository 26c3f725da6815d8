//! Shared-factor volatility architecture for the three-curve system.
//!
//! Each curve's forward-rate volatility is a block of an m-dimensional factor
//! space: nominal and real blocks mix the rate shapes g1 = 1, g2 = e^(-b2 t),
//! g3 = t e^(-b3 t); the spread block mixes h1 = 1, h2 = e^(-c2 t). Cumulative
//! integrals are closed-form, so HJM drifts need no quadrature. Cross-block
//! dependence sits in the factor correlation matrix `rho`; within each block
//! `rho` is the identity (PCA orthogonality), and every vol-vector inner
//! product below is the rho-weighted form x' rho y.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolError {
    #[error("invalid shape family: {0}")]
    InvalidShape(String),
    #[error("negative tenor {0}")]
    NegativeTenor(f64),
    #[error("amplitude matrix: {0}")]
    InvalidAmplitude(String),
    #[error("fx loading: {0}")]
    InvalidFxLoading(String),
    #[error("correlation matrix: {0}")]
    InvalidCorrelation(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Exponential decay parameters for the rate shapes (b2, b3) and the spread
/// shape (c2), all in 1/years.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeFamily {
    pub b2: f64,
    pub b3: f64,
    pub c2: f64,
}

impl ShapeFamily {
    pub fn new(b2: f64, b3: f64, c2: f64) -> Result<Self, VolError> {
        for (name, v) in [("b2", b2), ("b3", b3), ("c2", c2)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(VolError::InvalidShape(format!("{name} = {v} must be > 0")));
            }
        }
        Ok(Self { b2, b3, c2 })
    }

    /// (g1, g2, g3) at time-to-maturity tau.
    pub fn rate_shapes(&self, tau: f64) -> [f64; 3] {
        [1.0, (-self.b2 * tau).exp(), tau * (-self.b3 * tau).exp()]
    }

    /// Closed-form cumulative integrals (G1, G2, G3) of the rate shapes.
    pub fn rate_integrals(&self, tau: f64) -> [f64; 3] {
        let g2 = -(-self.b2 * tau).exp_m1() / self.b2;
        let g3 = (1.0 - (1.0 + self.b3 * tau) * (-self.b3 * tau).exp()) / (self.b3 * self.b3);
        [tau, g2, g3]
    }

    /// (h1, h2) at time-to-maturity tau.
    pub fn spread_shapes(&self, tau: f64) -> [f64; 2] {
        [1.0, (-self.c2 * tau).exp()]
    }

    /// Closed-form cumulative integrals (H1, H2) of the spread shapes.
    pub fn spread_integrals(&self, tau: f64) -> [f64; 2] {
        [tau, -(-self.c2 * tau).exp_m1() / self.c2]
    }
}

/// Factor block within the m-dimensional driver space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Nominal,
    Real,
    Spread,
}

impl Block {
    pub fn n_shapes(self) -> usize {
        match self {
            Block::Nominal | Block::Real => 3,
            Block::Spread => 2,
        }
    }
}

/// Shape values for the given block: (g1,g2,g3) for rate blocks, (h1,h2) for
/// the spread block.
pub fn shape_eval(family: &ShapeFamily, block: Block, tau: f64) -> Result<Vec<f64>, VolError> {
    if tau < 0.0 {
        return Err(VolError::NegativeTenor(tau));
    }
    Ok(match block {
        Block::Nominal | Block::Real => family.rate_shapes(tau).to_vec(),
        Block::Spread => family.spread_shapes(tau).to_vec(),
    })
}

/// Cumulative shape integrals for the given block: (G1..G3) or (H1,H2).
pub fn cum_integral(family: &ShapeFamily, block: Block, tau: f64) -> Result<Vec<f64>, VolError> {
    if tau < 0.0 {
        return Err(VolError::NegativeTenor(tau));
    }
    Ok(match block {
        Block::Nominal | Block::Real => family.rate_integrals(tau).to_vec(),
        Block::Spread => family.spread_integrals(tau).to_vec(),
    })
}

/// Per-block factor amplitudes, m_block x n_shapes, stored in decimal/sqrt(yr).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeMatrix {
    block: Block,
    rows: Vec<Vec<f64>>,
}

impl AmplitudeMatrix {
    pub fn new(block: Block, rows: Vec<Vec<f64>>) -> Result<Self, VolError> {
        if rows.is_empty() {
            return Err(VolError::InvalidAmplitude("no factor rows".into()));
        }
        for (p, row) in rows.iter().enumerate() {
            if row.len() != block.n_shapes() {
                return Err(VolError::InvalidAmplitude(format!(
                    "row {p} has {} entries, block {block:?} needs {}",
                    row.len(),
                    block.n_shapes()
                )));
            }
            if row.iter().any(|a| !a.is_finite()) {
                return Err(VolError::InvalidAmplitude(format!("row {p} not finite")));
            }
        }
        Ok(Self { block, rows })
    }

    pub fn block(&self) -> Block {
        self.block
    }

    pub fn n_factors(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Gram matrix A'A over shape indices.
    fn gram(&self) -> DMatrix<f64> {
        let n = self.block.n_shapes();
        let mut g = DMatrix::zeros(n, n);
        for row in &self.rows {
            for q in 0..n {
                for r in 0..n {
                    g[(q, r)] += row[q] * row[r];
                }
            }
        }
        g
    }
}

/// Exchange rate whose volatility a loading vector describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FxTarget {
    /// Inflation exchange rate I (nominal/real link).
    Inflation,
    /// Credit exchange rate J (nominal/credit link).
    Credit,
}

/// Scalar loadings of an exchange-rate volatility on each Brownian factor,
/// decimal/sqrt(yr). Under the baseline sparsity restrictions the inflation
/// loading lives on the real block plus the nominal level factor, and the
/// credit loading on the spread block plus the nominal level factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FxLoading {
    target: FxTarget,
    alpha: Vec<f64>,
    restricted: bool,
}

impl FxLoading {
    pub fn new(target: FxTarget, alpha: Vec<f64>, restricted: bool) -> Result<Self, VolError> {
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(VolError::InvalidFxLoading("non-finite entry".into()));
        }
        Ok(Self {
            target,
            alpha,
            restricted,
        })
    }

    pub fn target(&self) -> FxTarget {
        self.target
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn restricted(&self) -> bool {
        self.restricted
    }
}

/// Factor-space dimensions of the three blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub m_n: usize,
    pub m_r: usize,
    pub m_s: usize,
}

impl BlockDims {
    pub fn m(&self) -> usize {
        self.m_n + self.m_r + self.m_s
    }

    pub fn range(&self, block: Block) -> std::ops::Range<usize> {
        match block {
            Block::Nominal => 0..self.m_n,
            Block::Real => self.m_n..self.m_n + self.m_r,
            Block::Spread => self.m_n + self.m_r..self.m(),
        }
    }
}

/// Curve whose drift carries an exchange-rate correction under the nominal
/// measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionCurve {
    /// Real curve: correction -sigma_R . sigma_I.
    Real,
    /// Credit curve (sigma_C = sigma_N + sigma_S): correction -sigma_C . sigma_J.
    Credit,
}

const RHO_TOL: f64 = 1e-12;

/// The full volatility architecture: shape family, per-block amplitudes,
/// FX loadings, and the factor correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVolSpec {
    shape: ShapeFamily,
    a_n: AmplitudeMatrix,
    a_r: AmplitudeMatrix,
    a_s: AmplitudeMatrix,
    sigma_i: FxLoading,
    sigma_j: FxLoading,
    rho: DMatrix<f64>,
    dims: BlockDims,
}

impl BlockVolSpec {
    pub fn new(
        shape: ShapeFamily,
        a_n: AmplitudeMatrix,
        a_r: AmplitudeMatrix,
        a_s: AmplitudeMatrix,
        sigma_i: FxLoading,
        sigma_j: FxLoading,
        rho: DMatrix<f64>,
    ) -> Result<Self, VolError> {
        if a_n.block() != Block::Nominal || a_r.block() != Block::Real || a_s.block() != Block::Spread
        {
            return Err(VolError::InvalidAmplitude(
                "amplitude matrices assigned to wrong blocks".into(),
            ));
        }
        let dims = BlockDims {
            m_n: a_n.n_factors(),
            m_r: a_r.n_factors(),
            m_s: a_s.n_factors(),
        };
        let m = dims.m();
        if rho.nrows() != m || rho.ncols() != m {
            return Err(VolError::InvalidCorrelation(format!(
                "rho is {}x{}, factor space is {m}",
                rho.nrows(),
                rho.ncols()
            )));
        }
        for i in 0..m {
            if (rho[(i, i)] - 1.0).abs() > RHO_TOL {
                return Err(VolError::InvalidCorrelation(format!(
                    "diagonal entry ({i},{i}) = {} is not 1",
                    rho[(i, i)]
                )));
            }
            for j in 0..i {
                if (rho[(i, j)] - rho[(j, i)]).abs() > RHO_TOL {
                    return Err(VolError::InvalidCorrelation(format!(
                        "asymmetric at ({i},{j})"
                    )));
                }
            }
        }
        for block in [Block::Nominal, Block::Real, Block::Spread] {
            let r = dims.range(block);
            for i in r.clone() {
                for j in r.clone() {
                    if i != j && rho[(i, j)].abs() > RHO_TOL {
                        return Err(VolError::InvalidCorrelation(format!(
                            "within-block entry ({i},{j}) = {} must be 0",
                            rho[(i, j)]
                        )));
                    }
                }
            }
        }
        let min_eig = rho
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        if min_eig <= 0.0 {
            return Err(VolError::InvalidCorrelation(format!(
                "not positive definite (min eigenvalue {min_eig:.3e})"
            )));
        }
        for (name, sig) in [("sigma_I", &sigma_i), ("sigma_J", &sigma_j)] {
            if sig.alpha().len() != m {
                return Err(VolError::DimensionMismatch {
                    expected: m,
                    got: sig.alpha().len(),
                });
            }
            if sig.restricted() {
                let own_block = match sig.target() {
                    FxTarget::Inflation => dims.range(Block::Real),
                    FxTarget::Credit => dims.range(Block::Spread),
                };
                for (k, &a) in sig.alpha().iter().enumerate() {
                    let permitted = own_block.contains(&k) || k == 0; // nominal level factor
                    if !permitted && a != 0.0 {
                        return Err(VolError::InvalidFxLoading(format!(
                            "{name} loads {a} on factor {k}, outside its permitted blocks"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            shape,
            a_n,
            a_r,
            a_s,
            sigma_i,
            sigma_j,
            rho,
            dims,
        })
    }

    pub fn shape(&self) -> &ShapeFamily {
        &self.shape
    }

    pub fn dims(&self) -> BlockDims {
        self.dims
    }

    pub fn m(&self) -> usize {
        self.dims.m()
    }

    pub fn amplitude(&self, block: Block) -> &AmplitudeMatrix {
        match block {
            Block::Nominal => &self.a_n,
            Block::Real => &self.a_r,
            Block::Spread => &self.a_s,
        }
    }

    pub fn rho(&self) -> &DMatrix<f64> {
        &self.rho
    }

    pub fn fx_loading(&self, target: FxTarget) -> &FxLoading {
        match target {
            FxTarget::Inflation => &self.sigma_i,
            FxTarget::Credit => &self.sigma_j,
        }
    }

    /// Per-factor volatility entries on the block's own indices.
    pub fn block_vol_local(&self, block: Block, tau: f64) -> Vec<f64> {
        let shapes = match block {
            Block::Nominal | Block::Real => self.shape.rate_shapes(tau).to_vec(),
            Block::Spread => self.shape.spread_shapes(tau).to_vec(),
        };
        self.amplitude(block)
            .rows()
            .iter()
            .map(|row| row.iter().zip(&shapes).map(|(a, g)| a * g).sum())
            .collect()
    }

    /// Per-factor cumulative volatility integrals on the block's own indices.
    pub fn cum_block_vol_local(&self, block: Block, tau: f64) -> Vec<f64> {
        let ints = match block {
            Block::Nominal | Block::Real => self.shape.rate_integrals(tau).to_vec(),
            Block::Spread => self.shape.spread_integrals(tau).to_vec(),
        };
        self.amplitude(block)
            .rows()
            .iter()
            .map(|row| row.iter().zip(&ints).map(|(a, g)| a * g).sum())
            .collect()
    }

    /// Block volatility vector embedded in the full m-dimensional factor
    /// space (zero outside the block's indices).
    pub fn block_vol(&self, block: Block, tau: f64) -> Result<Vec<f64>, VolError> {
        if tau < 0.0 {
            return Err(VolError::NegativeTenor(tau));
        }
        let mut full = vec![0.0; self.m()];
        let local = self.block_vol_local(block, tau);
        for (k, v) in self.dims.range(block).zip(local) {
            full[k] = v;
        }
        Ok(full)
    }

    /// Cumulative block volatility vector in the full factor space.
    pub fn cum_block_vol(&self, block: Block, tau: f64) -> Result<Vec<f64>, VolError> {
        if tau < 0.0 {
            return Err(VolError::NegativeTenor(tau));
        }
        let mut full = vec![0.0; self.m()];
        let local = self.cum_block_vol_local(block, tau);
        for (k, v) in self.dims.range(block).zip(local) {
            full[k] = v;
        }
        Ok(full)
    }

    /// rho-weighted inner product x' rho y.
    pub fn weighted_inner(&self, x: &[f64], y: &[f64]) -> Result<f64, VolError> {
        let m = self.m();
        if x.len() != m {
            return Err(VolError::DimensionMismatch {
                expected: m,
                got: x.len(),
            });
        }
        if y.len() != m {
            return Err(VolError::DimensionMismatch {
                expected: m,
                got: y.len(),
            });
        }
        let xv = DVector::from_column_slice(x);
        let yv = DVector::from_column_slice(y);
        Ok((xv.transpose() * &self.rho * yv)[(0, 0)])
    }

    /// Within-block HJM drift sigma_j . A_j as the bilinear form over the
    /// amplitude Gram matrix: sum_{q,r} (A'A)_{qr} g_q(tau) G_r(tau).
    pub fn hjm_drift_own(&self, block: Block, tau: f64) -> f64 {
        let (shapes, ints): (Vec<f64>, Vec<f64>) = match block {
            Block::Nominal | Block::Real => (
                self.shape.rate_shapes(tau).to_vec(),
                self.shape.rate_integrals(tau).to_vec(),
            ),
            Block::Spread => (
                self.shape.spread_shapes(tau).to_vec(),
                self.shape.spread_integrals(tau).to_vec(),
            ),
        };
        let gram = self.amplitude(block).gram();
        let mut acc = 0.0;
        for q in 0..shapes.len() {
            for r in 0..ints.len() {
                acc += gram[(q, r)] * shapes[q] * ints[r];
            }
        }
        acc
    }

    /// Exchange-rate drift correction sigma_curve . sigma_X under the
    /// rho-weighted inner product (X = I for the real curve, J for credit).
    pub fn fx_drift_correction(&self, curve: CorrectionCurve, tau: f64) -> Result<f64, VolError> {
        match curve {
            CorrectionCurve::Real => {
                let sig_r = self.block_vol(Block::Real, tau)?;
                self.weighted_inner(&sig_r, self.sigma_i.alpha())
            }
            CorrectionCurve::Credit => {
                let sig_c = self.credit_vol(tau)?;
                self.weighted_inner(&sig_c, self.sigma_j.alpha())
            }
        }
    }

    /// Credit-curve volatility sigma_C = sigma_N + sigma_S (base plus spread).
    pub fn credit_vol(&self, tau: f64) -> Result<Vec<f64>, VolError> {
        let mut v = self.block_vol(Block::Nominal, tau)?;
        for (a, b) in v.iter_mut().zip(self.block_vol(Block::Spread, tau)?) {
            *a += b;
        }
        Ok(v)
    }

    /// Full spread drift under the nominal measure:
    /// sigma_N . A_S + sigma_S . A_N + sigma_S . A_S - sigma_C . sigma_J,
    /// every product rho-weighted. The cross-block terms are proportional to
    /// rho_NS and change the sign of the drift at medium tenors in the
    /// calibrated model, so they are never dropped.
    pub fn spread_drift(&self, tau: f64) -> Result<f64, VolError> {
        let sig_n = self.block_vol(Block::Nominal, tau)?;
        let sig_s = self.block_vol(Block::Spread, tau)?;
        let cum_n = self.cum_block_vol(Block::Nominal, tau)?;
        let cum_s = self.cum_block_vol(Block::Spread, tau)?;
        let cross = self.weighted_inner(&sig_n, &cum_s)? + self.weighted_inner(&sig_s, &cum_n)?;
        let own = self.weighted_inner(&sig_s, &cum_s)?;
        let fx = self.fx_drift_correction(CorrectionCurve::Credit, tau)?;
        Ok(cross + own - fx)
    }

    /// Squared rho-norm |sigma_X|^2 of an FX loading.
    pub fn fx_norm2(&self, target: FxTarget) -> f64 {
        let a = self.fx_loading(target).alpha();
        self.weighted_inner(a, a).expect("validated dimensions")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(BlockVolSpecFile::from(self)).expect("serializable")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, VolError> {
        let file: BlockVolSpecFile = serde_json::from_value(v.clone())
            .map_err(|e| VolError::InvalidAmplitude(format!("json: {e}")))?;
        file.try_into()
    }

    pub fn load(path: &std::path::Path) -> Result<Self, VolError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VolError::InvalidAmplitude(format!("read {path:?}: {e}")))?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| VolError::InvalidAmplitude(format!("parse {path:?}: {e}")))?;
        Self::from_json(&v)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), VolError> {
        let text = serde_json::to_string_pretty(&self.to_json()).expect("serializable");
        std::fs::write(path, text + "\n")
            .map_err(|e| VolError::InvalidAmplitude(format!("write {path:?}: {e}")))
    }
}

const BP: f64 = 1e-4;

/// On-disk form of [`BlockVolSpec`]: amplitudes and FX loadings in
/// bp/sqrt(yr) for table comparability, matrices row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockVolSpecFile {
    pub units: String,
    pub shape: ShapeFamily,
    pub block_dims: BlockDims,
    pub a_n: Vec<Vec<f64>>,
    pub a_r: Vec<Vec<f64>>,
    pub a_s: Vec<Vec<f64>>,
    pub sigma_i: Vec<f64>,
    pub sigma_j: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
    pub sparsity_restricted: bool,
}

impl From<&BlockVolSpec> for BlockVolSpecFile {
    fn from(s: &BlockVolSpec) -> Self {
        let to_bp = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| r.iter().map(|a| a / BP).collect())
                .collect()
        };
        let m = s.m();
        BlockVolSpecFile {
            units: "bp_per_sqrt_yr".to_string(),
            shape: s.shape,
            block_dims: s.dims,
            a_n: to_bp(s.a_n.rows()),
            a_r: to_bp(s.a_r.rows()),
            a_s: to_bp(s.a_s.rows()),
            sigma_i: s.sigma_i.alpha().iter().map(|a| a / BP).collect(),
            sigma_j: s.sigma_j.alpha().iter().map(|a| a / BP).collect(),
            rho: (0..m)
                .map(|i| (0..m).map(|j| s.rho[(i, j)]).collect())
                .collect(),
            sparsity_restricted: s.sigma_i.restricted() && s.sigma_j.restricted(),
        }
    }
}

impl TryFrom<BlockVolSpecFile> for BlockVolSpec {
    type Error = VolError;

    fn try_from(f: BlockVolSpecFile) -> Result<Self, Self::Error> {
        if f.units != "bp_per_sqrt_yr" {
            return Err(VolError::InvalidAmplitude(format!(
                "unsupported units `{}`",
                f.units
            )));
        }
        let from_bp = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| r.iter().map(|a| a * BP).collect())
                .collect()
        };
        let m = f.block_dims.m();
        if f.rho.len() != m || f.rho.iter().any(|r| r.len() != m) {
            return Err(VolError::InvalidCorrelation(format!(
                "rho rows must form an {m}x{m} matrix"
            )));
        }
        let rho = DMatrix::from_fn(m, m, |i, j| f.rho[i][j]);
        BlockVolSpec::new(
            f.shape,
            AmplitudeMatrix::new(Block::Nominal, from_bp(&f.a_n))?,
            AmplitudeMatrix::new(Block::Real, from_bp(&f.a_r))?,
            AmplitudeMatrix::new(Block::Spread, from_bp(&f.a_s))?,
            FxLoading::new(
                FxTarget::Inflation,
                f.sigma_i.iter().map(|a| a * BP).collect(),
                f.sparsity_restricted,
            )?,
            FxLoading::new(
                FxTarget::Credit,
                f.sigma_j.iter().map(|a| a * BP).collect(),
                f.sparsity_restricted,
            )?,
            rho,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn family() -> ShapeFamily {
        ShapeFamily::new(0.730, 3.436, 3.75).expect("valid")
    }

    /// Simple diagonal-ish spec for unit tests: identity rho, one shape per
    /// factor in each block.
    fn toy_spec(rho: Option<DMatrix<f64>>) -> BlockVolSpec {
        let a_n = AmplitudeMatrix::new(
            Block::Nominal,
            vec![
                vec![0.0100, 0.0, 0.0],
                vec![0.0, 0.0080, 0.0],
                vec![0.0, 0.0, 0.0200],
            ],
        )
        .unwrap();
        let a_r = AmplitudeMatrix::new(
            Block::Real,
            vec![vec![0.0060, 0.0, 0.0], vec![0.0, 0.0050, 0.0]],
        )
        .unwrap();
        let a_s = AmplitudeMatrix::new(
            Block::Spread,
            vec![vec![0.0010, 0.0], vec![0.0, 0.0030]],
        )
        .unwrap();
        let sigma_i = FxLoading::new(
            FxTarget::Inflation,
            vec![0.0, 0.0, 0.0, 0.0070, 0.0030, 0.0, 0.0],
            true,
        )
        .unwrap();
        let sigma_j = FxLoading::new(
            FxTarget::Credit,
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0060, 0.0020],
            true,
        )
        .unwrap();
        BlockVolSpec::new(
            family(),
            a_n,
            a_r,
            a_s,
            sigma_i,
            sigma_j,
            rho.unwrap_or_else(|| DMatrix::identity(7, 7)),
        )
        .expect("valid spec")
    }

    #[test]
    fn shapes_at_zero() {
        let f = family();
        assert_eq!(shape_eval(&f, Block::Nominal, 0.0).unwrap(), vec![1.0, 1.0, 0.0]);
        assert_eq!(shape_eval(&f, Block::Spread, 0.0).unwrap(), vec![1.0, 1.0]);
        assert!(shape_eval(&f, Block::Nominal, -0.1).is_err());
    }

    #[test]
    fn curvature_peaks_at_inverse_decay() {
        let f = family();
        let tau_star = 1.0 / f.b3;
        let g = f.rate_shapes(tau_star);
        assert_relative_eq!(g[2], (-1.0f64).exp() / f.b3, epsilon = 1e-14);
        // Verify it is a local max against neighbors.
        let eps = 1e-4;
        assert!(g[2] > f.rate_shapes(tau_star - eps)[2]);
        assert!(g[2] > f.rate_shapes(tau_star + eps)[2]);
    }

    #[test]
    fn slope_shape_value() {
        let g = family().rate_shapes(1.0);
        assert_relative_eq!(g[1], 0.4819, epsilon = 5e-5);
    }

    #[test]
    fn integrals_at_zero_vanish() {
        let f = family();
        assert_eq!(cum_integral(&f, Block::Real, 0.0).unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(cum_integral(&f, Block::Spread, 0.0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn integral_closed_forms_at_one_year() {
        let f = family();
        let g = f.rate_integrals(1.0);
        assert_relative_eq!(g[1], 0.70972, epsilon = 5e-6);
        assert_relative_eq!(g[2], 0.07260, epsilon = 5e-6);
    }

    #[test]
    fn block_vol_support_and_value() {
        let s = toy_spec(None);
        let v = s.block_vol(Block::Nominal, 0.0).unwrap();
        assert_eq!(v.len(), 7);
        assert_relative_eq!(v[0], 0.0100);
        assert_relative_eq!(v[1], 0.0080);
        assert_relative_eq!(v[2], 0.0); // g3(0) = 0
        assert!(v[3..].iter().all(|&x| x == 0.0));

        let zero_a = AmplitudeMatrix::new(Block::Spread, vec![vec![0.0, 0.0]]).unwrap();
        assert!(zero_a.rows().iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn amplitude_row_sum_at_zero() {
        // Entry = row sum of (g1, g2, g3)(0) = (1, 1, 0) weights.
        let a = AmplitudeMatrix::new(
            Block::Nominal,
            vec![vec![0.01881, 0.05094, -0.49026]],
        )
        .unwrap();
        let s = BlockVolSpec::new(
            family(),
            a,
            AmplitudeMatrix::new(Block::Real, vec![vec![0.001, 0.0, 0.0]]).unwrap(),
            AmplitudeMatrix::new(Block::Spread, vec![vec![0.001, 0.0]]).unwrap(),
            FxLoading::new(FxTarget::Inflation, vec![0.0; 3], true).unwrap(),
            FxLoading::new(FxTarget::Credit, vec![0.0; 3], true).unwrap(),
            DMatrix::identity(3, 3),
        )
        .unwrap();
        let v = s.block_vol(Block::Nominal, 0.0).unwrap();
        assert_relative_eq!(v[0], 0.06975, epsilon = 1e-12);
    }

    #[test]
    fn weighted_inner_identity_is_euclidean() {
        let s = toy_spec(None);
        let x = vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let y = vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_relative_eq!(s.weighted_inner(&x, &y).unwrap(), 11.0);
    }

    #[test]
    fn weighted_inner_disjoint_blocks_zero_when_uncorrelated() {
        let s = toy_spec(None);
        let n = s.block_vol(Block::Nominal, 2.0).unwrap();
        let sp = s.block_vol(Block::Spread, 2.0).unwrap();
        assert_relative_eq!(s.weighted_inner(&n, &sp).unwrap(), 0.0);
    }

    #[test]
    fn weighted_inner_dimension_check() {
        let s = toy_spec(None);
        assert!(s.weighted_inner(&[1.0; 6], &[1.0; 7]).is_err());
    }

    #[test]
    fn drift_zero_at_origin() {
        let s = toy_spec(None);
        for b in [Block::Nominal, Block::Real, Block::Spread] {
            assert_relative_eq!(s.hjm_drift_own(b, 0.0), 0.0);
        }
    }

    #[test]
    fn single_level_factor_drift_is_a2_tau() {
        let a = 0.0123;
        let s = BlockVolSpec::new(
            family(),
            AmplitudeMatrix::new(Block::Nominal, vec![vec![a, 0.0, 0.0]]).unwrap(),
            AmplitudeMatrix::new(Block::Real, vec![vec![0.001, 0.0, 0.0]]).unwrap(),
            AmplitudeMatrix::new(Block::Spread, vec![vec![0.001, 0.0]]).unwrap(),
            FxLoading::new(FxTarget::Inflation, vec![0.0; 3], true).unwrap(),
            FxLoading::new(FxTarget::Credit, vec![0.0; 3], true).unwrap(),
            DMatrix::identity(3, 3),
        )
        .unwrap();
        for tau in [0.5, 1.0, 4.0, 10.0] {
            assert_relative_eq!(
                s.hjm_drift_own(Block::Nominal, tau),
                a * a * tau,
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn drift_equals_weighted_inner_of_vol_and_cumvol() {
        let s = toy_spec(None);
        for b in [Block::Nominal, Block::Real, Block::Spread] {
            for tau in [0.1, 0.7, 2.0, 5.5, 10.0] {
                let v = s.block_vol(b, tau).unwrap();
                let cv = s.cum_block_vol(b, tau).unwrap();
                assert_relative_eq!(
                    s.hjm_drift_own(b, tau),
                    s.weighted_inner(&v, &cv).unwrap(),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn fx_correction_zero_loading() {
        let mut alpha = vec![0.0; 7];
        alpha[3] = 0.0;
        let s = toy_spec(None);
        // sigma_I in toy_spec is nonzero; rebuild with zero loading.
        let z = BlockVolSpec::new(
            *s.shape(),
            s.amplitude(Block::Nominal).clone(),
            s.amplitude(Block::Real).clone(),
            s.amplitude(Block::Spread).clone(),
            FxLoading::new(FxTarget::Inflation, vec![0.0; 7], true).unwrap(),
            FxLoading::new(FxTarget::Credit, vec![0.0; 7], true).unwrap(),
            DMatrix::identity(7, 7),
        )
        .unwrap();
        assert_relative_eq!(z.fx_drift_correction(CorrectionCurve::Real, 3.0).unwrap(), 0.0);
        assert_relative_eq!(z.fx_drift_correction(CorrectionCurve::Credit, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn spread_drift_reduces_within_block_when_uncorrelated() {
        // rho_NS = 0 (identity rho) and sigma_J = 0.
        let s0 = toy_spec(None);
        let z = BlockVolSpec::new(
            *s0.shape(),
            s0.amplitude(Block::Nominal).clone(),
            s0.amplitude(Block::Real).clone(),
            s0.amplitude(Block::Spread).clone(),
            s0.fx_loading(FxTarget::Inflation).clone(),
            FxLoading::new(FxTarget::Credit, vec![0.0; 7], true).unwrap(),
            DMatrix::identity(7, 7),
        )
        .unwrap();
        for tau in [0.0, 0.5, 3.0, 10.0] {
            assert_relative_eq!(
                z.spread_drift(tau).unwrap(),
                z.hjm_drift_own(Block::Spread, tau),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn spread_drift_at_zero_is_minus_credit_fx() {
        let s = toy_spec(None);
        assert_relative_eq!(
            s.spread_drift(0.0).unwrap(),
            -s.fx_drift_correction(CorrectionCurve::Credit, 0.0).unwrap(),
            epsilon = 1e-18
        );
    }

    #[test]
    fn construction_rejects_bad_rho() {
        let s = toy_spec(None);
        let mk = |rho: DMatrix<f64>| {
            BlockVolSpec::new(
                *s.shape(),
                s.amplitude(Block::Nominal).clone(),
                s.amplitude(Block::Real).clone(),
                s.amplitude(Block::Spread).clone(),
                s.fx_loading(FxTarget::Inflation).clone(),
                s.fx_loading(FxTarget::Credit).clone(),
                rho,
            )
        };
        // Within-block off-diagonal.
        let mut r = DMatrix::identity(7, 7);
        r[(0, 1)] = 0.2;
        r[(1, 0)] = 0.2;
        assert!(mk(r).is_err());
        // Non-PD: perfect cross-block correlation duplicated.
        let mut r = DMatrix::identity(7, 7);
        r[(0, 3)] = 1.0;
        r[(3, 0)] = 1.0;
        assert!(mk(r).is_err());
        // Non-unit diagonal.
        let mut r = DMatrix::identity(7, 7);
        r[(2, 2)] = 0.99;
        assert!(mk(r).is_err());
    }

    #[test]
    fn sparsity_mask_enforced_with_escape_flag() {
        let s = toy_spec(None);
        let bad = FxLoading::new(
            FxTarget::Inflation,
            vec![0.0, 0.001, 0.0, 0.0, 0.0, 0.0, 0.0], // loads on N2
            true,
        )
        .unwrap();
        let res = BlockVolSpec::new(
            *s.shape(),
            s.amplitude(Block::Nominal).clone(),
            s.amplitude(Block::Real).clone(),
            s.amplitude(Block::Spread).clone(),
            bad.clone(),
            s.fx_loading(FxTarget::Credit).clone(),
            DMatrix::identity(7, 7),
        );
        assert!(res.is_err());
        // Same loading accepted when unrestricted.
        let unrestricted =
            FxLoading::new(FxTarget::Inflation, bad.alpha().to_vec(), false).unwrap();
        assert!(BlockVolSpec::new(
            *s.shape(),
            s.amplitude(Block::Nominal).clone(),
            s.amplitude(Block::Real).clone(),
            s.amplitude(Block::Spread).clone(),
            unrestricted,
            s.fx_loading(FxTarget::Credit).clone(),
            DMatrix::identity(7, 7),
        )
        .is_ok());
    }

    #[test]
    fn json_roundtrip_preserves_spec() {
        let s = toy_spec(None);
        let j = s.to_json();
        assert_eq!(j["units"], "bp_per_sqrt_yr");
        let back = BlockVolSpec::from_json(&j).expect("roundtrip");
        assert_eq!(s, back);
    }
}
