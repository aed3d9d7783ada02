//! Saturating cost on cart position and (linearized) pole-tip position.

use nalgebra::{DMatrix, DVector, Matrix4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{PlantState, STATE_DIM};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CostConfig {
    pub target: PlantState,
    /// Width of the saturating cost, in metres.
    pub width: f64,
    pub horizon: usize,
    pub init_mean: PlantState,
    pub init_cov: [[f64; STATE_DIM]; STATE_DIM],
    /// Pole length used to place the tip in the cost.
    pub pole_length: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        let mut init_cov = [[0.0; STATE_DIM]; STATE_DIM];
        for (i, row) in init_cov.iter_mut().enumerate() {
            row[i] = 0.05f64.powi(2);
        }
        Self {
            target: PlantState::zeros(),
            width: 0.25,
            horizon: 80,
            init_mean: PlantState::zeros(),
            init_cov,
            pole_length: 0.5,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !(self.pole_length > 0.0) {
            return Err(Error::Config("cost width and pole length must be positive".into()));
        }
        let cov = self.init_cov_matrix();
        if (&cov - cov.transpose()).amax() > 0.0 || crate::linalg::min_eigenvalue(&cov) < -1e-12 {
            return Err(Error::Config("initial state covariance must be symmetric positive semi-definite".into()));
        }
        Ok(())
    }

    pub fn init_cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(STATE_DIM, STATE_DIM, |i, j| self.init_cov[i][j])
    }

    /// Quadratic form `x^2 + (x + l theta)^2`, divided by `width^2`.
    pub fn weight_matrix(&self) -> Matrix4<f64> {
        let l = self.pole_length;
        #[rustfmt::skip]
        let w = Matrix4::new(
            2.0, 0.0, l,     0.0,
            0.0, 0.0, 0.0,   0.0,
            l,   0.0, l * l, 0.0,
            0.0, 0.0, 0.0,   0.0,
        );
        w / (self.width * self.width)
    }

    /// Cost of a single, known state.
    pub fn cost(&self, s: &PlantState) -> f64 {
        let d = s.to_vector() - self.target.to_vector();
        1.0 - (-0.5 * d.dot(&(self.weight_matrix() * d))).exp()
    }
}

/// Expected saturating cost under `N(mean, cov)` with its gradients.
#[derive(Debug, Clone)]
pub struct ExpectedCost {
    pub value: f64,
    pub d_mean: DVector<f64>,
    /// Symmetric.
    pub d_cov: DMatrix<f64>,
}

pub fn expected_cost_with_gradient(mean: &DVector<f64>, cov: &DMatrix<f64>, cost: &CostConfig) -> Result<ExpectedCost> {
    if mean.len() != STATE_DIM || cov.nrows() != STATE_DIM || cov.ncols() != STATE_DIM {
        return Err(Error::Shape("expected cost needs a 4-dimensional Gaussian".into()));
    }
    let w = DMatrix::from_fn(STATE_DIM, STATE_DIM, |i, j| cost.weight_matrix()[(i, j)]);
    let a = DMatrix::identity(STATE_DIM, STATE_DIM) + cov * &w;
    let lu = a.clone().lu();
    let det = lu.determinant();
    let a_inv = lu
        .try_inverse()
        .filter(|_| det > 0.0)
        .ok_or_else(|| Error::Conditioning("I + cov W is singular".into()))?;
    let s1 = crate::linalg::symmetrize(&(&w * a_inv));
    let d = mean - DVector::from_column_slice(&cost.target.to_array());
    let s1d = &s1 * &d;
    let l = det.powf(-0.5) * (-0.5 * d.dot(&s1d)).exp();
    let d_cov = (&s1 - &s1d * s1d.transpose()) * (0.5 * l);
    Ok(ExpectedCost { value: 1.0 - l, d_mean: s1d * l, d_cov })
}

/// Expected cost in `[0, 1]`.
pub fn expected_cost(mean: &DVector<f64>, cov: &DMatrix<f64>, cost: &CostConfig) -> Result<f64> {
    expected_cost_with_gradient(mean, cov, cost).map(|c| c.value)
}
