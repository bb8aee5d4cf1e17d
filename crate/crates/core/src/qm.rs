//! Quantile-mapping baseline: a monotone map from model values to observed
//! values, fitted per (month, location, variable) on paired empirical
//! quantiles and applied elementwise.
//!
//! Model order statistic `i` of `n` sits at level `(i - 1) / (n - 1)` and is
//! paired with the observed quantile at that level. The default map is a
//! nondecreasing piecewise-linear function with knots at equal-probability
//! model quantiles; the linear mode fits a single ordinary least-squares line.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calibration::threshold_zero;
use crate::error::{Error, Result};
use crate::field::{GridField, Source, Variable};
use crate::metrics::quantile_sorted;

pub const DEFAULT_KNOTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QmMode {
    Linear,
    #[default]
    Piecewise,
}

impl QmMode {
    pub fn parse(s: &str) -> Option<QmMode> {
        match s {
            "linear" => Some(QmMode::Linear),
            "piecewise" => Some(QmMode::Piecewise),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QmConfig {
    pub mode: QmMode,
    pub knots: usize,
}

impl Default for QmConfig {
    fn default() -> Self {
        QmConfig {
            mode: QmMode::Piecewise,
            knots: DEFAULT_KNOTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum QmMap {
    Linear { intercept: f64, slope: f64 },
    Piecewise { xs: Vec<f64>, ys: Vec<f64> },
}

impl QmMap {
    /// Maps one value; piecewise maps extrapolate with the end slopes.
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            QmMap::Linear { intercept, slope } => intercept + slope * x,
            QmMap::Piecewise { xs, ys } => {
                let k = xs.len();
                let seg = match xs.partition_point(|&v| v <= x) {
                    0 => 0,
                    i if i >= k => k - 2,
                    i => i - 1,
                };
                let (x0, x1, y0, y1) = (xs[seg], xs[seg + 1], ys[seg], ys[seg + 1]);
                y0 + (x - x0) * (y1 - y0) / (x1 - x0)
            }
        }
    }
}

fn sorted_finite(a: &[f64], what: &str) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Err(Error::InvalidInput(format!("empty {what} sample")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite {what} value")));
    }
    let mut s = a.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Fits the map from `model` to `obs`. Needs at least two distinct model
/// values.
pub fn fit_qm(obs: &[f64], model: &[f64], config: &QmConfig) -> Result<QmMap> {
    let so = sorted_finite(obs, "observed")?;
    let sm = sorted_finite(model, "model")?;
    if sm[0] == sm[sm.len() - 1] {
        return Err(Error::Degenerate("model sample has fewer than two distinct values".into()));
    }
    let n = sm.len();
    let paired: Vec<f64> = (0..n)
        .map(|i| quantile_sorted(&so, i as f64 / (n - 1) as f64))
        .collect();
    match config.mode {
        QmMode::Linear => {
            let mx = sm.iter().sum::<f64>() / n as f64;
            let my = paired.iter().sum::<f64>() / n as f64;
            let (mut sxy, mut sxx) = (0.0, 0.0);
            for (x, y) in sm.iter().zip(&paired) {
                sxy += (x - mx) * (y - my);
                sxx += (x - mx) * (x - mx);
            }
            let slope = sxy / sxx;
            Ok(QmMap::Linear {
                intercept: my - slope * mx,
                slope,
            })
        }
        QmMode::Piecewise => {
            if config.knots < 2 {
                return Err(Error::InvalidParameter(format!("need at least 2 knots, got {}", config.knots)));
            }
            let mut xs: Vec<f64> = (0..config.knots)
                .map(|j| quantile_sorted(&sm, j as f64 / (config.knots - 1) as f64))
                .collect();
            xs.dedup();
            let ys = hat_least_squares(&xs, &sm, &paired)?;
            Ok(QmMap::Piecewise {
                xs,
                ys: pava(&ys),
            })
        }
    }
}

/// Least-squares knot values of a piecewise-linear interpolant.
fn hat_least_squares(xs: &[f64], x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let k = xs.len();
    let mut design = DMatrix::<f64>::zeros(x.len(), k);
    for (r, &xi) in x.iter().enumerate() {
        let seg = xs.partition_point(|&v| v <= xi).clamp(1, k - 1) - 1;
        let w = ((xi - xs[seg]) / (xs[seg + 1] - xs[seg])).clamp(0.0, 1.0);
        design[(r, seg)] += 1.0 - w;
        design[(r, seg + 1)] += w;
    }
    let rhs = DVector::from_column_slice(y);
    let svd = design.svd(true, true);
    let sol = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Numeric(format!("quantile-mapping least squares failed: {e}")))?;
    Ok(sol.iter().copied().collect())
}

/// Pool-adjacent-violators: the nondecreasing sequence closest in least squares.
fn pava(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a <= b {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().unwrap();
            *last = ((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb);
        }
    }
    blocks.into_iter().flat_map(|(v, n)| std::iter::repeat_n(v, n)).collect()
}

/// Applies a map elementwise. PRCP is floored at 0 and thresholded.
pub fn apply_qm(map: &QmMap, series: &[f64], v: Variable) -> Vec<f64> {
    series
        .iter()
        .map(|&x| {
            let y = map.apply(x);
            match v {
                Variable::Tmax => y,
                Variable::Prcp => threshold_zero(y.max(0.0)),
            }
        })
        .collect()
}

/// Maps for every (month, location, variable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QmFieldMaps {
    pub n_locations: usize,
    /// Indexed `((month - 1) * n + l) * 2 + variable`.
    pub maps: Vec<QmMap>,
}

impl QmFieldMaps {
    pub fn get(&self, month: u32, l: usize, v: Variable) -> &QmMap {
        &self.maps[((month as usize - 1) * self.n_locations + l) * 2 + v as usize]
    }
}

pub fn fit_qm_field(obs: &GridField, model: &GridField, config: &QmConfig) -> Result<QmFieldMaps> {
    obs.check_aligned(model)?;
    let n = obs.n_locations();
    let mut maps = Vec::with_capacity(24 * n);
    for month in 1..=12u32 {
        let days = obs.days_in_month(month);
        if days.is_empty() {
            return Err(Error::InvalidInput(format!("training data has no days in month {month}")));
        }
        for l in 0..n {
            for v in Variable::ALL {
                let o: Vec<f64> = days.iter().map(|&t| obs.get(v, l, t)).collect();
                let m: Vec<f64> = days.iter().map(|&t| model.get(v, l, t)).collect();
                let map = fit_qm(&o, &m, config).map_err(|e| match e {
                    Error::Degenerate(msg) => Error::Degenerate(format!(
                        "month {month} location {} {}: {msg}",
                        obs.locations()[l].id,
                        v.name()
                    )),
                    e => e,
                })?;
                maps.push(map);
            }
        }
    }
    Ok(QmFieldMaps { n_locations: n, maps })
}

pub fn apply_qm_field(maps: &QmFieldMaps, model: &GridField) -> Result<GridField> {
    if model.n_locations() != maps.n_locations {
        return Err(Error::Alignment("quantile maps and field have different grids".into()));
    }
    let mut out = model.clone().with_source(Source::Calibrated);
    for l in 0..model.n_locations() {
        for v in Variable::ALL {
            for t in 0..model.n_days() {
                let x = model.get(v, l, t);
                let y = apply_qm(maps.get(model.month(t), l, v), &[x], v)[0];
                out.set(v, l, t, y);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lin() -> QmConfig {
        QmConfig {
            mode: QmMode::Linear,
            knots: DEFAULT_KNOTS,
        }
    }

    #[test]
    fn linear_shift_is_recovered() {
        let obs: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin() * 5.0 + 10.0).collect();
        let model: Vec<f64> = obs.iter().map(|x| x + 3.0).collect();
        match fit_qm(&obs, &model, &lin()).unwrap() {
            QmMap::Linear { intercept, slope } => {
                assert_abs_diff_eq!(intercept, -3.0, epsilon = 1e-9);
                assert_abs_diff_eq!(slope, 1.0, epsilon = 1e-12);
            }
            m => panic!("unexpected {m:?}"),
        }
        let pw = fit_qm(&obs, &model, &QmConfig::default()).unwrap();
        for x in [7.0, 10.0, 13.0, 15.5] {
            assert_abs_diff_eq!(pw.apply(x), x - 3.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn unequal_lengths_pair_by_level() {
        // Obs {0, 10} at levels 0 and 1; model order stats at 0, 0.5, 1.
        let map = fit_qm(&[0.0, 10.0], &[1.0, 2.0, 3.0], &lin()).unwrap();
        assert_abs_diff_eq!(map.apply(2.0), 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(map.apply(3.0), 10.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_model_rejected() {
        assert!(matches!(fit_qm(&[1.0, 2.0], &[4.0, 4.0, 4.0], &lin()), Err(Error::Degenerate(_))));
        assert!(matches!(
            fit_qm(&[1.0, 2.0], &[4.0, 4.0], &QmConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn pava_examples() {
        assert_eq!(pava(&[1.0, 3.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(pava(&[3.0, 2.0, 1.0]), vec![2.0, 2.0, 2.0]);
        assert_eq!(pava(&[1.0, 2.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn prcp_output_is_floored_and_thresholded() {
        let map = QmMap::Linear {
            intercept: -1.0,
            slope: 1.0,
        };
        assert_eq!(apply_qm(&map, &[0.0, 1.0005, 3.0], Variable::Prcp), vec![0.0, 0.0, 2.0]);
        assert_eq!(apply_qm(&map, &[0.0], Variable::Tmax), vec![-1.0]);
    }

    #[test]
    fn piecewise_extrapolates_with_end_slopes() {
        let map = QmMap::Piecewise {
            xs: vec![0.0, 1.0, 2.0],
            ys: vec![0.0, 2.0, 3.0],
        };
        assert_abs_diff_eq!(map.apply(-1.0), -2.0);
        assert_abs_diff_eq!(map.apply(0.5), 1.0);
        assert_abs_diff_eq!(map.apply(1.0), 2.0);
        assert_abs_diff_eq!(map.apply(4.0), 5.0);
    }

    proptest! {
        #[test]
        fn maps_are_monotone(
            obs in prop::collection::vec(-20.0f64..40.0, 5..80),
            model in prop::collection::vec(-20.0f64..40.0, 5..80),
            linear in any::<bool>(),
            probes in prop::collection::vec(-60.0f64..80.0, 2..20),
        ) {
            let cfg = if linear { lin() } else { QmConfig::default() };
            let map = match fit_qm(&obs, &model, &cfg) {
                Ok(m) => m,
                Err(Error::Degenerate(_)) => return Ok(()),
                Err(e) => panic!("{e}"),
            };
            let mut p = probes.clone();
            p.sort_by(f64::total_cmp);
            let y: Vec<f64> = p.iter().map(|&x| map.apply(x)).collect();
            for w in y.windows(2) {
                prop_assert!(w[0] <= w[1] + 1e-9);
            }
        }
    }
}
