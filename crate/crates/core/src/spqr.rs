//! Semi-parametric quantile regression: a conditional density written as a
//! mixture of M-spline densities whose weights are produced by an MLP.
//!
//! Responses are mapped affinely onto `[0, 1]` from the training range plus a
//! symmetric padding; features are standardized with training moments. The
//! CDF is the same mixture over I-splines, and the quantile function inverts
//! it by bisection in the scaled domain, so quantiles never cross.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Features, MlpParams, TrainConfig, TrainReport};
use crate::spline::SplineBasis;

pub const DEFAULT_BASIS_SIZE: usize = 20;
pub const DEFAULT_HIDDEN: [usize; 2] = [30, 20];
pub const DEFAULT_PADDING: f64 = 0.01;
pub const QUANTILE_MAX_ITER: usize = 60;

const FORMAT_TAG: &str = "spcde-spqr";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseScaler {
    lower: f64,
    upper: f64,
    padding: f64,
}

impl ResponseScaler {
    /// Min-max bounds of `responses` widened by `padding` of the range on
    /// each side.
    pub fn from_responses(responses: &[f64], padding: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&padding) {
            return Err(Error::InvalidParameter(format!("padding {padding} outside [0, 0.5)")));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &y in responses {
            if !y.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite response {y}")));
            }
            lo = lo.min(y);
            hi = hi.max(y);
        }
        let range = hi - lo;
        if !(range > 0.0) {
            return Err(Error::Degenerate(format!(
                "responses have zero range (all equal to {lo})"
            )));
        }
        Ok(ResponseScaler {
            lower: lo - padding * range,
            upper: hi + padding * range,
            padding,
        })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn padding(&self) -> f64 {
        self.padding
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    /// Affine map to the unit interval, without clamping.
    pub fn scale(&self, y: f64) -> f64 {
        (y - self.lower) / self.width()
    }

    pub fn unscale(&self, s: f64) -> f64 {
        self.lower + s * self.width()
    }

    pub fn contains(&self, y: f64) -> bool {
        (self.lower..=self.upper).contains(&y)
    }
}

/// Ordered feature names together with the standardization moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl FeatureSchema {
    fn fit(names: Vec<String>, features: &Features) -> Result<Self> {
        let q = features.cols();
        if names.len() != q {
            return Err(Error::Shape {
                expected: q,
                got: names.len(),
            });
        }
        let n = features.rows() as f64;
        let mut means = vec![0.0; q];
        for i in 0..features.rows() {
            for (m, &v) in means.iter_mut().zip(features.row(i)) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut sds = vec![0.0; q];
        for i in 0..features.rows() {
            for ((s, &v), m) in sds.iter_mut().zip(features.row(i)).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        for s in sds.iter_mut() {
            *s = (*s / n).sqrt();
            if !(*s > 1e-12) {
                *s = 1.0;
            }
        }
        Ok(FeatureSchema { names, means, sds })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn standardize_into(&self, x: &[f64], out: &mut [f64]) {
        for (((o, &v), m), s) in out.iter_mut().zip(x).zip(&self.means).zip(&self.sds) {
            *o = (v - m) / s;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpqrConfig {
    pub basis_size: usize,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub padding: f64,
    /// Named inputs whose first-layer weights start at zero, so any effect
    /// they carry is learned from the data rather than inherited from the
    /// random initialization.
    #[serde(default)]
    pub neutral_inputs: Vec<String>,
}

impl Default for SpqrConfig {
    fn default() -> Self {
        SpqrConfig {
            basis_size: DEFAULT_BASIS_SIZE,
            hidden: DEFAULT_HIDDEN.to_vec(),
            train: TrainConfig::default(),
            padding: DEFAULT_PADDING,
            neutral_inputs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpqrModel {
    format: String,
    version: u32,
    basis: SplineBasis,
    scaler: ResponseScaler,
    schema: FeatureSchema,
    params: MlpParams,
    report: TrainReport,
}

impl SpqrModel {
    /// Fits the conditional density of `responses` given `features`.
    pub fn fit(features: &Features, responses: &[f64], names: Vec<String>, config: &SpqrConfig) -> Result<Self> {
        let groups: Vec<usize> = (0..responses.len()).collect();
        Self::fit_grouped(features, responses, &groups, names, config)
    }

    /// As [`SpqrModel::fit`], keeping rows with equal group labels together
    /// in the validation split and in mini-batches.
    pub fn fit_grouped(
        features: &Features,
        responses: &[f64],
        groups: &[usize],
        names: Vec<String>,
        config: &SpqrConfig,
    ) -> Result<Self> {
        if features.rows() != responses.len() {
            return Err(Error::Shape {
                expected: features.rows(),
                got: responses.len(),
            });
        }
        if responses.len() < nn::MIN_TRAIN_SAMPLES {
            return Err(Error::InvalidInput(format!(
                "need at least {} samples, got {}",
                nn::MIN_TRAIN_SAMPLES,
                responses.len()
            )));
        }
        let basis = SplineBasis::new(config.basis_size)?;
        let scaler = ResponseScaler::from_responses(responses, config.padding)?;
        let schema = FeatureSchema::fit(names, features)?;

        let mut std_features = features.clone();
        for i in 0..std_features.rows() {
            let raw = features.row(i);
            schema.standardize_into(raw, std_features.row_mut(i));
        }
        let scaled: Vec<f64> = responses.iter().map(|&y| scaler.scale(y).clamp(0.0, 1.0)).collect();

        let mut sizes = Vec::with_capacity(config.hidden.len() + 2);
        sizes.push(features.cols());
        sizes.extend_from_slice(&config.hidden);
        sizes.push(config.basis_size);
        let mut init = MlpParams::init(&sizes, config.train.seed ^ 0x5851_f42d_4c95_7f2d)?;
        let n_in = features.cols();
        for name in &config.neutral_inputs {
            if let Some(c) = schema.names.iter().position(|n| n == name) {
                for w in init.weights_mut(0).chunks_mut(n_in) {
                    w[c] = 0.0;
                }
            }
        }
        let (params, report) = nn::train_grouped(init, &std_features, &scaled, &basis, &config.train, groups)?;
        Ok(SpqrModel {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            basis,
            scaler,
            schema,
            params,
            report,
        })
    }

    /// Assembles a model from parts; used by tests and external tooling.
    pub fn from_parts(
        basis: SplineBasis,
        scaler: ResponseScaler,
        schema: FeatureSchema,
        params: MlpParams,
        report: TrainReport,
    ) -> Result<Self> {
        if params.input_dim() != schema.len() {
            return Err(Error::Shape {
                expected: schema.len(),
                got: params.input_dim(),
            });
        }
        if params.output_dim() != basis.len() {
            return Err(Error::Shape {
                expected: basis.len(),
                got: params.output_dim(),
            });
        }
        Ok(SpqrModel {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            basis,
            scaler,
            schema,
            params,
            report,
        })
    }

    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn scaler(&self) -> &ResponseScaler {
        &self.scaler
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    /// Mixture weights for a raw (unstandardized) feature vector.
    pub fn weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.schema.len() {
            return Err(Error::Shape {
                expected: self.schema.len(),
                got: x.len(),
            });
        }
        let mut z = vec![0.0; x.len()];
        self.schema.standardize_into(x, &mut z);
        self.params.forward(&z)
    }

    /// Conditional density on the raw response scale.
    pub fn pdf(&self, y: f64, x: &[f64]) -> Result<f64> {
        let w = self.weights(x)?;
        self.pdf_with(&w, y)
    }

    pub fn pdf_with(&self, weights: &[f64], y: f64) -> Result<f64> {
        if !self.scaler.contains(y) {
            return Ok(0.0);
        }
        let s = self.scaler.scale(y).clamp(0.0, 1.0);
        Ok(self.basis.mixture_pdf(weights, s)? / self.scaler.width())
    }

    /// Conditional CDF on the raw response scale.
    pub fn cdf(&self, y: f64, x: &[f64]) -> Result<f64> {
        let w = self.weights(x)?;
        self.cdf_with(&w, y)
    }

    pub fn cdf_with(&self, weights: &[f64], y: f64) -> Result<f64> {
        if y.is_nan() {
            return Err(Error::Domain("NaN response".into()));
        }
        let s = self.scaler.scale(y);
        if !(0.0..=1.0).contains(&s) {
            log::debug!("response {y} outside [{}, {}], clamped", self.scaler.lower, self.scaler.upper);
        }
        self.basis.mixture_cdf(weights, s.clamp(0.0, 1.0))
    }

    /// Conditional quantile at level `tau` in the open unit interval.
    pub fn quantile(&self, tau: f64, x: &[f64]) -> Result<f64> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Domain(format!("quantile level {tau} outside (0, 1)")));
        }
        let w = self.weights(x)?;
        self.quantile_with(&w, tau)
    }

    /// Bisection on the scaled CDF. Accepts the closed interval; levels 0
    /// and 1 map to the padded range bounds.
    pub fn quantile_with(&self, weights: &[f64], tau: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Domain(format!("quantile level {tau} outside [0, 1]")));
        }
        if tau == 0.0 {
            return Ok(self.scaler.lower);
        }
        if tau == 1.0 {
            return Ok(self.scaler.upper);
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut mid = 0.5;
        for _ in 0..QUANTILE_MAX_ITER {
            mid = 0.5 * (lo + hi);
            let f = self.basis.mixture_cdf(weights, mid)?;
            if (f - tau).abs() <= 1e-13 {
                break;
            }
            if f < tau {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(self.scaler.unscale(mid).clamp(self.scaler.lower, self.scaler.upper))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: SpqrModel = serde_json::from_str(s)?;
        if m.format != FORMAT_TAG || m.version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported model format {} v{}",
                m.format, m.version
            )));
        }
        SpqrModel::from_parts(m.basis, m.scaler, m.schema, m.params, m.report)
    }
}
