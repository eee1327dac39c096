//! Upfront solo-hailing and ride-sharing fares.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PricingError {
    #[error("trip distance must be positive, got {0} m")]
    NonPositiveDistance(f64),
    #[error("invalid pricing parameters: {0}")]
    Invalid(String),
}

/// Fare constants in CNY. `discount` is the ride-sharing discount ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PricingParams {
    pub base_fare: f64,
    pub per_km: f64,
    pub min_fare: f64,
    pub discount: f64,
    /// Added to platform revenue for every delivered pooled customer.
    pub pooled_trip_subsidy: f64,
}

impl Default for PricingParams {
    fn default() -> Self {
        Self { base_fare: 4.0, per_km: 3.0, min_fare: 10.0, discount: 0.0, pooled_trip_subsidy: 0.0 }
    }
}

impl PricingParams {
    pub fn with_discount(self, discount: f64) -> Self {
        Self { discount, ..self }
    }

    pub fn validate(&self) -> Result<(), PricingError> {
        let nonneg = [self.base_fare, self.per_km, self.min_fare, self.pooled_trip_subsidy];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(PricingError::Invalid("fares and subsidy must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(PricingError::Invalid(format!("discount {} outside [0, 1)", self.discount)));
        }
        Ok(())
    }

    /// `max(min_fare, base + per_km * km)` for a trip of `distance_m` meters.
    pub fn solo_fare(&self, distance_m: f64) -> Result<f64, PricingError> {
        if !(distance_m > 0.0) {
            return Err(PricingError::NonPositiveDistance(distance_m));
        }
        Ok(self.min_fare.max(self.base_fare + self.per_km * distance_m / 1000.0))
    }

    /// The solo fare with the discount applied after the minimum-fare clamp.
    pub fn share_fare(&self, distance_m: f64) -> Result<f64, PricingError> {
        Ok((1.0 - self.discount) * self.solo_fare(distance_m)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn solo_fares() {
        let p = PricingParams::default();
        assert!(close(p.solo_fare(5000.0).unwrap(), 19.0));
        assert!(close(p.solo_fare(1000.0).unwrap(), 10.0));
        assert!(close(p.solo_fare(2000.0).unwrap(), 10.0));
        assert_eq!(p.solo_fare(0.0), Err(PricingError::NonPositiveDistance(0.0)));
    }

    #[test]
    fn share_fares() {
        let p = PricingParams::default();
        assert!(close(p.with_discount(0.2).share_fare(5000.0).unwrap(), 15.2));
        assert_eq!(p.share_fare(3456.0).unwrap(), p.solo_fare(3456.0).unwrap());
        assert!(close(p.with_discount(0.4).share_fare(1000.0).unwrap(), 6.0));
        assert!(p.share_fare(-1.0).is_err());
    }

    #[test]
    fn validation() {
        assert!(PricingParams::default().validate().is_ok());
        assert!(PricingParams::default().with_discount(1.0).validate().is_err());
        assert!(PricingParams { min_fare: -1.0, ..Default::default() }.validate().is_err());
    }
}
