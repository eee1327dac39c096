//! Closed-form revenue-rate comparison of one pooled trip against solo
//! service, and carbon-credit valuation.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::charts::{Heatmap, Svg};

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("total travel time is zero")]
    ZeroDuration,
    #[error("invalid scenario input: {0}")]
    Invalid(String),
}

/// Revenue per unit time of serving one solo customer: fare `w1` over the
/// time to drive pickup leg `x1` plus trip `l1` at speed `v`.
pub fn revenue_rate_solo(w1: f64, x1: f64, l1: f64, v: f64) -> Result<f64, ScenarioError> {
    if !(v > 0.0) {
        return Err(ScenarioError::Invalid(format!("speed must be positive, got {v}")));
    }
    if x1 < 0.0 || l1 < 0.0 || w1 < 0.0 {
        return Err(ScenarioError::Invalid("fares and legs must be non-negative".into()));
    }
    if x1 + l1 == 0.0 {
        return Err(ScenarioError::ZeroDuration);
    }
    Ok(w1 / ((x1 + l1) / v))
}

/// Revenue per unit time of a pooled trip: both discounted fares over the
/// time to drive legs `x1..x4`.
pub fn revenue_rate_share(theta: f64, w1: f64, w2: f64, legs: [f64; 4], v: f64) -> Result<f64, ScenarioError> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(ScenarioError::Invalid(format!("discount {theta} outside [0, 1]")));
    }
    if !(v > 0.0) {
        return Err(ScenarioError::Invalid(format!("speed must be positive, got {v}")));
    }
    if legs.iter().any(|&x| x < 0.0) || w1 < 0.0 || w2 < 0.0 {
        return Err(ScenarioError::Invalid("fares and legs must be non-negative".into()));
    }
    let total: f64 = legs.iter().sum();
    if total == 0.0 {
        return Err(ScenarioError::ZeroDuration);
    }
    Ok((1.0 - theta) * (w1 + w2) / (total / v))
}

/// Pooled over solo revenue rate, `(1 - theta)(1 + fare_ratio) / dist_ratio`.
/// Pooling loses no revenue when the result is at least 1.
pub fn revenue_ratio(theta: f64, fare_ratio: f64, dist_ratio: f64) -> f64 {
    (1.0 - theta) * (1.0 + fare_ratio) / dist_ratio
}

/// Largest discount at which pooling still breaks even, clamped to [0, 1).
pub fn breakeven_discount(fare_ratio: f64, dist_ratio: f64) -> f64 {
    (1.0 - dist_ratio / (1.0 + fare_ratio)).clamp(0.0, 1.0 - f64::EPSILON)
}

/// Market value of `grams` of CO2 at `price_per_ton`.
pub fn carbon_credit_value(grams: f64, price_per_ton: f64) -> f64 {
    grams * price_per_ton / 1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioGrid {
    pub discounts: Vec<f64>,
    pub fare_ratios: Vec<f64>,
    /// Explicit distance ratios; when empty, `dist_ratio_range` is used.
    pub dist_ratios: Vec<f64>,
    /// `[start, end, step]`, both ends inclusive.
    pub dist_ratio_range: [f64; 3],
}

impl Default for ScenarioGrid {
    fn default() -> Self {
        Self {
            discounts: vec![0.1, 0.2, 0.3, 0.4],
            fare_ratios: vec![0.4, 0.7, 1.0],
            dist_ratios: Vec::new(),
            dist_ratio_range: [1.0, 1.6, 0.05],
        }
    }
}

impl ScenarioGrid {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let grid: Self = toml::from_str(text).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.discounts.is_empty() || self.fare_ratios.is_empty() {
            return Err(ScenarioError::Invalid("discounts and fare_ratios must be non-empty".into()));
        }
        if self.discounts.iter().any(|t| !(0.0..1.0).contains(t)) {
            return Err(ScenarioError::Invalid("discounts must lie in [0, 1)".into()));
        }
        if self.fare_ratios.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(ScenarioError::Invalid("fare ratios must lie in (0, 1]".into()));
        }
        let dists = self.distance_ratios();
        if dists.is_empty() || dists.iter().any(|d| !(*d >= 1.0)) {
            return Err(ScenarioError::Invalid("distance ratios must be at least 1".into()));
        }
        Ok(())
    }

    pub fn distance_ratios(&self) -> Vec<f64> {
        if !self.dist_ratios.is_empty() {
            return self.dist_ratios.clone();
        }
        let [start, end, step] = self.dist_ratio_range;
        if !(step > 0.0) || end < start {
            return Vec::new();
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        // Rounded to 1e-9 so range endpoints print cleanly.
        (0..=n).map(|k| ((start + k as f64 * step) * 1e9).round() / 1e9).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub discount: f64,
    pub fare_ratio: f64,
    pub dist_ratio: f64,
    pub revenue_ratio: f64,
    pub breakeven_discount: f64,
    pub no_loss: bool,
}

pub fn surface(grid: &ScenarioGrid) -> Vec<SurfacePoint> {
    let dists = grid.distance_ratios();
    let mut out = Vec::new();
    for &fare_ratio in &grid.fare_ratios {
        for &discount in &grid.discounts {
            for &dist_ratio in &dists {
                let ratio = revenue_ratio(discount, fare_ratio, dist_ratio);
                out.push(SurfacePoint {
                    discount,
                    fare_ratio,
                    dist_ratio,
                    revenue_ratio: ratio,
                    breakeven_discount: breakeven_discount(fare_ratio, dist_ratio),
                    no_loss: ratio >= 1.0,
                });
            }
        }
    }
    out
}

pub fn write_surface_csv<W: Write>(points: &[SurfacePoint], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// One heat-map panel per fare ratio (discount against distance ratio)
/// with the break-even curve drawn over it.
pub fn render_surface_svg(grid: &ScenarioGrid) -> String {
    let dists = grid.distance_ratios();
    let panels: Vec<Heatmap> = grid
        .fare_ratios
        .iter()
        .map(|&f| Heatmap {
            title: format!("fare ratio {f}"),
            x_label: "distance ratio".into(),
            y_label: "discount".into(),
            xs: dists.clone(),
            ys: grid.discounts.clone(),
            values: grid.discounts.iter().map(|&t| dists.iter().map(|&d| revenue_ratio(t, f, d)).collect()).collect(),
            pivot: 1.0,
            curve: dists.iter().map(|&d| (d, breakeven_discount(f, d))).collect(),
        })
        .collect();
    Svg::heatmap_panels("Pooled / solo revenue rate", &panels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solo_rate() {
        assert!((revenue_rate_solo(19.0, 1.0, 5.0, 30.0).unwrap() - 95.0).abs() < 1e-12);
        assert_eq!(revenue_rate_solo(19.0, 0.0, 5.0, 30.0).unwrap(), 19.0 * 30.0 / 5.0);
        let slow = revenue_rate_solo(19.0, 1.0, 5.0, 30.0).unwrap();
        assert!((revenue_rate_solo(19.0, 1.0, 5.0, 60.0).unwrap() - 2.0 * slow).abs() < 1e-12);
        assert_eq!(revenue_rate_solo(19.0, 0.0, 0.0, 30.0), Err(ScenarioError::ZeroDuration));
    }

    #[test]
    fn share_rate() {
        let r = revenue_rate_share(0.2, 19.0, 19.0, [1.0, 2.0, 3.0, 2.4], 30.0).unwrap();
        assert!((r - 0.8 * 38.0 / (8.4 / 30.0)).abs() < 1e-9);
        assert!((r - 108.571_428_571).abs() < 1e-6);
        let degenerate = revenue_rate_share(0.0, 19.0, 0.0, [1.0, 2.0, 2.0, 1.0], 30.0).unwrap();
        assert_eq!(degenerate, revenue_rate_solo(19.0, 1.0, 5.0, 30.0).unwrap());
        assert_eq!(revenue_rate_share(1.0, 19.0, 19.0, [1.0; 4], 30.0).unwrap(), 0.0);
    }

    #[test]
    fn ratios_and_breakeven() {
        assert!((revenue_ratio(0.1, 0.4, 1.2) - 1.05).abs() < 1e-12);
        assert!((revenue_ratio(0.3, 1.0, 1.4) - 1.0).abs() < 1e-12);
        assert!((revenue_ratio(0.0, 1.0, 1.0) - 2.0).abs() < 1e-12);
        assert!((breakeven_discount(1.0, 1.4) - 0.3).abs() < 1e-12);
        assert_eq!(breakeven_discount(1.0, 2.0), 0.0);
    }

    #[test]
    fn carbon_credit() {
        assert!((carbon_credit_value(100.0, 90.0) - 0.009).abs() < 1e-15);
        assert_eq!(carbon_credit_value(0.0, 90.0), 0.0);
        assert_eq!(carbon_credit_value(1e6, 90.0), 90.0);
    }

    #[test]
    fn default_grid_shape() {
        let g = ScenarioGrid::default();
        let d = g.distance_ratios();
        assert_eq!(d.len(), 13);
        assert_eq!((d[0], d[12]), (1.0, 1.6));
        assert_eq!(surface(&g).len(), 4 * 3 * 13);
        assert!(ScenarioGrid { discounts: vec![], ..g }.validate().is_err());
    }
}
