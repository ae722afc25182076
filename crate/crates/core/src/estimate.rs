/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateWithError {
    pub value: f64,
    pub std_error: f64,
    /// Effective number of samples behind the estimate.
    pub n_effective: f64,
}

impl EstimateWithError {
    /// An exact value (zero standard error).
    pub fn exact(value: f64) -> Self {
        Self { value, std_error: 0.0, n_effective: f64::INFINITY }
    }

    /// Whether `other` lies within `k` combined standard errors of this estimate.
    pub fn agrees_with(&self, other: f64, k: f64) -> bool {
        (self.value - other).abs() <= k * self.std_error
    }
}
