use nalgebra::{DMatrix, DVector};

use super::covariance::{cross_covariance, prior_variance, Assembly};
use super::data::{FidelityDataset, Standardization};
use super::params::PhiVector;
use crate::error::Result;
use crate::linalg::{symmetrize, JitteredCholesky};
use crate::stiefel::ProjectionMatrix;

/// Predictive distribution of the highest-fidelity code at test points.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Prediction {
    pub fn sd(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// A fitted model: data in original coordinates, the input standardization,
/// hyperparameters, projection, and the factored training covariance.
#[derive(Clone, Debug)]
pub struct ArgpModel {
    data: FidelityDataset,
    standardized: FidelityDataset,
    standardization: Standardization,
    phi: PhiVector,
    w: ProjectionMatrix,
    chol: JitteredCholesky,
    alpha: DVector<f64>,
}

impl ArgpModel {
    pub fn new(data: FidelityDataset, standardization: Standardization, phi: PhiVector, w: ProjectionMatrix) -> Result<Self> {
        let standardized = standardization.apply_dataset(&data)?;
        let asm = Assembly::new(&phi, &standardized, &w)?;
        let chol = JitteredCholesky::factor(&asm.v)?;
        let alpha = chol.solve(&standardized.stacked_obs());
        Ok(Self { data, standardized, standardization, phi, w, chol, alpha })
    }

    pub fn data(&self) -> &FidelityDataset {
        &self.data
    }

    pub fn standardized_data(&self) -> &FidelityDataset {
        &self.standardized
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn phi(&self) -> &PhiVector {
        &self.phi
    }

    pub fn projection(&self) -> &ProjectionMatrix {
        &self.w
    }

    pub fn cholesky(&self) -> &JitteredCholesky {
        &self.chol
    }

    pub fn log_likelihood(&self) -> f64 {
        let z = self.standardized.stacked_obs();
        let n = z.len() as f64;
        -0.5 * z.dot(&self.alpha) - 0.5 * self.chol.log_det() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Predictive mean `T V⁻¹ Z` and covariance `P − T V⁻¹ Tᵀ` at test points
    /// given in original input coordinates.
    pub fn predict(&self, test: &DMatrix<f64>) -> Result<Prediction> {
        let test = self.standardization.apply(test)?;
        let cross = cross_covariance(&test, &self.phi, &self.standardized, &self.w)?;
        let prior = prior_variance(&test, &self.phi, &self.w)?;
        let mean = &cross * &self.alpha;
        let half = self.chol.solve_lower(&cross.transpose());
        let mut cov = prior - half.tr_mul(&half);
        symmetrize(&mut cov);
        for i in 0..cov.nrows() {
            if cov[(i, i)] < 0.0 {
                cov[(i, i)] = 0.0;
            }
        }
        Ok(Prediction { mean, cov })
    }
}
