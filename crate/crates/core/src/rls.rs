//! Recursive least-squares identification of a per-cell linear voltage model.
//!
//! The terminal voltage is modelled as `theta . [I, q / C_b, 1]`, where `I` is
//! the cell current (positive = discharge) and `q` the charge drawn from the
//! cell since the start of the run. The three weights absorb the series
//! resistance, the local OCV slope and the OCV offset.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use thiserror::Error;

use crate::ecm::CellParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RlsError {
    #[error("forgetting factor must lie in (0, 1], got {0}")]
    ForgettingFactor(f64),
    #[error("initial covariance scale must be positive, got {0}")]
    CovarianceScale(f64),
    #[error("capacity must be positive, got {0}")]
    Capacity(f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

/// Regressor `[current, cumulative_charge / capacity, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regressor(Vector3<f64>);

impl Regressor {
    pub fn new(current: f64, cumulative_charge: f64, capacity: f64) -> Result<Self, RlsError> {
        if !(capacity > 0.0) {
            return Err(RlsError::Capacity(capacity));
        }
        let x = Vector3::new(current, cumulative_charge / capacity, 1.0);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(RlsError::NonFinite("regressor"));
        }
        Ok(Self(x))
    }

    /// Builds a regressor from raw components. The last entry is forced to 1.
    pub fn from_parts(current: f64, normalized_charge: f64) -> Result<Self, RlsError> {
        let x = Vector3::new(current, normalized_charge, 1.0);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(RlsError::NonFinite("regressor"));
        }
        Ok(Self(x))
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlsEstimator {
    theta: Vector3<f64>,
    covariance: Matrix3<f64>,
    forgetting_factor: f64,
    sample_count: u64,
    trace_limit: Option<f64>,
}

impl RlsEstimator {
    pub fn new(theta0: [f64; 3], p0_scale: f64, forgetting_factor: f64) -> Result<Self, RlsError> {
        if !(forgetting_factor > 0.0 && forgetting_factor <= 1.0) {
            return Err(RlsError::ForgettingFactor(forgetting_factor));
        }
        if !(p0_scale.is_finite() && p0_scale > 0.0) {
            return Err(RlsError::CovarianceScale(p0_scale));
        }
        if theta0.iter().any(|v| !v.is_finite()) {
            return Err(RlsError::NonFinite("initial parameters"));
        }
        Ok(Self {
            theta: Vector3::from(theta0),
            covariance: Matrix3::identity() * p0_scale,
            forgetting_factor,
            sample_count: 0,
            trace_limit: None,
        })
    }

    /// Starts from the nominal linearisation of `params` around SOC = 0.5:
    /// `(-R0, -dOCV/dSOC, OCV)`. The middle weight is negative because the
    /// regressor counts discharged charge.
    pub fn warm_start(
        params: &CellParams,
        p0_scale: f64,
        forgetting_factor: f64,
    ) -> Result<Self, RlsError> {
        let curve = params.ocv_curve();
        let slope = curve.slope(0.5).map_err(|_| RlsError::NonFinite("ocv slope"))?;
        let offset = curve.eval(0.5).map_err(|_| RlsError::NonFinite("ocv"))?;
        Self::new([-params.series_resistance, -slope, offset], p0_scale, forgetting_factor)
    }

    /// Caps the covariance trace. With a forgetting factor below one, the
    /// covariance grows without bound along directions the data does not
    /// excite; when the trace passes `limit` the whole matrix is rescaled
    /// back onto it.
    pub fn with_trace_limit(mut self, limit: f64) -> Self {
        self.trace_limit = Some(limit);
        self
    }

    pub fn theta(&self) -> [f64; 3] {
        [self.theta[0], self.theta[1], self.theta[2]]
    }

    pub fn covariance(&self) -> &Matrix3<f64> {
        &self.covariance
    }

    pub fn forgetting_factor(&self) -> f64 {
        self.forgetting_factor
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn predict(&self, x: &Regressor) -> f64 {
        x.0.dot(&self.theta)
    }

    /// One exponentially weighted RLS step. Returns the a-priori prediction
    /// error `y - x . theta` computed before the update.
    pub fn update(&mut self, x: &Regressor, y: f64) -> Result<f64, RlsError> {
        if !y.is_finite() {
            return Err(RlsError::NonFinite("measurement"));
        }
        if x.0.iter().any(|v| !v.is_finite()) {
            return Err(RlsError::NonFinite("regressor"));
        }
        let x = &x.0;
        let lambda = self.forgetting_factor;
        let px = self.covariance * x;
        let gain = px / (lambda + x.dot(&px));
        let innovation = y - x.dot(&self.theta);
        self.theta += gain * innovation;

        let mut p = (self.covariance - gain * px.transpose()) / lambda;
        p = (p + p.transpose()) * 0.5;
        if let Some(limit) = self.trace_limit {
            let trace = p.trace();
            if trace > limit {
                p *= limit / trace;
            }
        }
        self.covariance = p;
        self.sample_count += 1;
        Ok(innovation)
    }

    /// Eigenvalues of the covariance in ascending order.
    pub fn covariance_eigenvalues(&self) -> [f64; 3] {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.covariance).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        [ev[0], ev[1], ev[2]]
    }
}
