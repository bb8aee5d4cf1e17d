//! Synthetic observed/model pairs with known, controllable biases.
//!
//! Both fields live on an `nx * ny` grid with unit spacing. TMAX is a
//! seasonal mean plus a standardized AR(1) anomaly whose innovations are
//! spatially correlated (exponential covariance). PRCP is driven by a second
//! AR(1) latent `xi` through `V = Phi(xi)`: the day is wet when `V` is below
//! a wet probability that depends on the TMAX anomaly, and the wet amount is
//! lognormal and decreasing in `V`.
//!
//! The model field shares innovations with the observations (correlation
//! `noise_corr`) but has its own AR coefficients and occurrence coupling,
//! a TMAX shift, scaled intensities and optional drizzle on dry days.

use chrono::{Datelike, NaiveDate};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::field::{GridField, Location, Source};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub nx: usize,
    pub ny: usize,
    pub start: NaiveDate,
    pub n_days: usize,
    pub seed: u64,
    /// Range of the exponential spatial covariance.
    pub spatial_range: f64,

    pub tmax_mean: f64,
    pub tmax_seasonal_amp: f64,
    /// Mean change per unit of y.
    pub tmax_gradient: f64,
    pub tmax_sd: f64,
    pub tmax_ar: f64,
    pub prcp_ar: f64,
    pub wet_prob: f64,
    /// Logit slope of the wet probability in the standardized TMAX anomaly.
    pub occurrence_coupling: f64,
    pub intensity_meanlog: f64,
    pub intensity_sdlog: f64,

    pub model_tmax_ar: f64,
    pub model_prcp_ar: f64,
    pub model_occurrence_coupling: f64,
    pub noise_corr: f64,
    pub tmax_shift: f64,
    pub prcp_scale: f64,
    /// Probability that a dry model day gets a drizzle amount.
    pub drizzle: f64,
    pub drizzle_max: f64,
    /// Model field equal to the observations.
    pub identical: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            nx: 3,
            ny: 3,
            start: NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(),
            n_days: 4 * 365,
            seed: 1,
            spatial_range: 2.0,
            tmax_mean: 20.0,
            tmax_seasonal_amp: 8.0,
            tmax_gradient: -0.5,
            tmax_sd: 3.0,
            tmax_ar: 0.75,
            prcp_ar: 0.6,
            wet_prob: 0.4,
            occurrence_coupling: -1.0,
            intensity_meanlog: 1.0,
            intensity_sdlog: 0.8,
            model_tmax_ar: 0.45,
            model_prcp_ar: 0.3,
            model_occurrence_coupling: 0.5,
            noise_corr: 1.0,
            tmax_shift: 0.0,
            prcp_scale: 1.0,
            drizzle: 0.0,
            drizzle_max: 0.1,
            identical: false,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.nx == 0 || self.ny == 0 || self.n_days < 2 {
            return bad(format!("grid {}x{} with {} days is too small", self.nx, self.ny, self.n_days));
        }
        for (name, v) in [
            ("tmax_ar", self.tmax_ar),
            ("prcp_ar", self.prcp_ar),
            ("model_tmax_ar", self.model_tmax_ar),
            ("model_prcp_ar", self.model_prcp_ar),
        ] {
            if !(v.abs() < 1.0) {
                return bad(format!("{name} = {v} must lie in (-1, 1)"));
            }
        }
        for (name, v) in [("wet_prob", self.wet_prob)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} = {v} must lie in (0, 1)"));
            }
        }
        for (name, v) in [("noise_corr", self.noise_corr), ("drizzle", self.drizzle)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} must lie in [0, 1]"));
            }
        }
        if !(self.spatial_range > 0.0 && self.tmax_sd > 0.0 && self.intensity_sdlog >= 0.0 && self.prcp_scale > 0.0) {
            return bad("spatial_range, tmax_sd and prcp_scale must be positive".into());
        }
        if !(self.drizzle_max > 0.002) {
            return bad(format!("drizzle_max = {} must exceed 0.002", self.drizzle_max));
        }
        Ok(())
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Latent {
    z: Vec<f64>,
    xi: Vec<f64>,
}

/// AR(1) processes in standardized form for every location and day, laid out
/// `[l * n_days + t]`, driven by spatially correlated innovations.
fn ar_paths(eps: &[Vec<f64>], eps_own: &[Vec<f64>], a: f64, rho: f64, n: usize, nd: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * nd];
    let s = (1.0 - a * a).sqrt();
    let r = (1.0 - rho * rho).sqrt();
    for l in 0..n {
        let mut x = rho * eps[0][l] + r * eps_own[0][l];
        out[l * nd] = x;
        for t in 1..nd {
            let e = rho * eps[t][l] + r * eps_own[t][l];
            x = a * x + s * e;
            out[l * nd + t] = x;
        }
    }
    out
}

/// Generates `(observed, model)` fields.
pub fn generate(spec: &SynthSpec) -> Result<(GridField, GridField)> {
    spec.validate()?;
    let n = spec.nx * spec.ny;
    let nd = spec.n_days;
    let locations: Vec<Location> = (0..spec.ny)
        .flat_map(|j| (0..spec.nx).map(move |i| (i, j)))
        .map(|(i, j)| Location {
            id: format!("g{i}_{j}"),
            x: i as f64,
            y: j as f64,
        })
        .collect();
    let dates: Vec<NaiveDate> = spec.start.iter_days().take(nd).collect();
    if dates.len() != nd {
        return Err(Error::InvalidParameter("calendar overflows the supported date range".into()));
    }

    let mut cov = DMatrix::<f64>::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let d = ((locations[a].x - locations[b].x).powi(2) + (locations[a].y - locations[b].y).powi(2)).sqrt();
            cov[(a, b)] = (-d / spec.spatial_range).exp();
        }
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Numeric("spatial covariance is not positive definite".into()))?;
    let lower = chol.l();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..nd)
            .map(|_| {
                let w = nalgebra::DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
                (&lower * w).iter().copied().collect()
            })
            .collect()
    };
    let e_t = draw(&mut rng);
    let e_p = draw(&mut rng);
    let e_tm = draw(&mut rng);
    let e_pm = draw(&mut rng);
    let drizzle_u: Vec<f64> = (0..n * nd).map(|_| rng.random::<f64>()).collect();

    let zeros = vec![vec![0.0; n]; nd];
    let obs_lat = Latent {
        z: ar_paths(&e_t, &zeros, spec.tmax_ar, 1.0, n, nd),
        xi: ar_paths(&e_p, &zeros, spec.prcp_ar, 1.0, n, nd),
    };
    let model_lat = Latent {
        z: ar_paths(&e_t, &e_tm, spec.model_tmax_ar, spec.noise_corr, n, nd),
        xi: ar_paths(&e_p, &e_pm, spec.model_prcp_ar, spec.noise_corr, n, nd),
    };

    let normal = Normal::standard();
    let base_logit = (spec.wet_prob / (1.0 - spec.wet_prob)).ln();
    let mean = |l: usize, t: usize| {
        let doy = dates[t].ordinal() as f64;
        spec.tmax_mean
            + spec.tmax_seasonal_amp * (2.0 * std::f64::consts::PI * (doy - 105.0) / 365.25).sin()
            + spec.tmax_gradient * locations[l].y
    };

    let build = |lat: &Latent, coupling: f64, model: bool| -> (Vec<f64>, Vec<f64>) {
        let mut tmax = Vec::with_capacity(n * nd);
        let mut prcp = Vec::with_capacity(n * nd);
        for l in 0..n {
            for t in 0..nd {
                let i = l * nd + t;
                let z = lat.z[i];
                let shift = if model { spec.tmax_shift } else { 0.0 };
                tmax.push(mean(l, t) + shift + spec.tmax_sd * z);
                let v = normal.cdf(lat.xi[i]).clamp(1e-15, 1.0 - 1e-15);
                let p_wet = logistic(base_logit + coupling * z);
                let amount = if v < p_wet {
                    let q = normal.inverse_cdf((1.0 - v / p_wet).clamp(1e-15, 1.0 - 1e-15));
                    let a = (spec.intensity_meanlog + spec.intensity_sdlog * q).exp();
                    if model {
                        a * spec.prcp_scale
                    } else {
                        a
                    }
                } else if model && drizzle_u[i] < spec.drizzle {
                    let depth = (v - p_wet) / (1.0 - p_wet);
                    0.002 + (spec.drizzle_max - 0.002) * (1.0 - depth)
                } else {
                    0.0
                };
                prcp.push(amount);
            }
        }
        (tmax, prcp)
    };

    let (ot, op) = build(&obs_lat, spec.occurrence_coupling, false);
    let obs = GridField::new(locations.clone(), dates.clone(), Source::Observed, ot, op)?;
    let model = if spec.identical {
        obs.clone().with_source(Source::Model)
    } else {
        let (mt, mp) = build(&model_lat, spec.model_occurrence_coupling, true);
        GridField::new(locations, dates, Source::Model, mt, mp)?
    };
    Ok((obs, model))
}
