//! Feed-forward network producing mixture weights: ReLU hidden layers and a
//! softmax output layer, trained on the mixture negative log-likelihood with
//! mini-batch Adam, a held-out validation split and early stopping.
//!
//! Weights are stored row-major with shape `(n_out, n_in)` per layer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spline::SplineBasis;

/// Mixture densities below this are clamped inside the log.
pub const DENSITY_FLOOR: f64 = 1e-10;

/// Row-major feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Features { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Features {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl MlpParams {
    /// All-zero parameters of the given shape.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let weights = layer_sizes
            .windows(2)
            .map(|w| vec![0.0; w[0] * w[1]])
            .collect();
        let biases = layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// He-normal weights for ReLU layers, Glorot-normal for the softmax layer,
    /// zero biases. Deterministic in `seed`.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = p.weights.len();
        for (h, w) in p.weights.iter_mut().enumerate() {
            let fan_in = layer_sizes[h] as f64;
            let fan_out = layer_sizes[h + 1] as f64;
            let var = if h + 1 == n_layers {
                2.0 / (fan_in + fan_out)
            } else {
                2.0 / fan_in
            };
            let dist = Normal::new(0.0, var.sqrt()).expect("positive variance");
            for v in w.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        }
        Ok(p)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated nonempty")
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Every parameter, weights then biases for each layer in order.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layer_sizes == other.layer_sizes
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Mixture weights for one feature vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut scratch = Scratch::new(self);
        let pi = self.forward_into(x, &mut scratch)?;
        Ok(pi.to_vec())
    }

    fn forward_into<'s>(&self, x: &[f64], s: &'s mut Scratch) -> Result<&'s [f64]> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        s.acts[0].copy_from_slice(x);
        let n_layers = self.num_layers();
        for h in 0..n_layers {
            let (n_in, n_out) = (self.layer_sizes[h], self.layer_sizes[h + 1]);
            let (prev, rest) = s.acts.split_at_mut(h + 1);
            let input = &prev[h];
            let pre = &mut s.pre[h];
            let w = &self.weights[h];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                pre[o] = self.biases[h][o] + dot(row, input);
            }
            let out = &mut rest[0];
            if h + 1 < n_layers {
                for (a, &z) in out.iter_mut().zip(pre.iter()) {
                    *a = z.max(0.0);
                }
            } else {
                softmax(pre, out);
            }
        }
        let pi = &s.acts[n_layers];
        if pi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite mixture weights".into()));
        }
        Ok(pi)
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidParameter(
            "network needs at least an input and an output layer".into(),
        ));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::InvalidParameter(format!(
            "zero-sized layer in {layer_sizes:?}"
        )));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Per-layer buffers reused across samples.
struct Scratch {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(p: &MlpParams) -> Self {
        Scratch {
            acts: p.layer_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            pre: p.layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect(),
            delta: p.layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Basis densities `B_k(y_i)` for a set of responses, evaluated once.
#[derive(Debug, Clone)]
pub struct BasisRows {
    k: usize,
    data: Vec<f64>,
}

impl BasisRows {
    pub fn new(basis: &SplineBasis, responses: &[f64]) -> Result<Self> {
        let k = basis.len();
        let mut data = vec![0.0; responses.len() * k];
        for (i, &y) in responses.iter().enumerate() {
            basis.eval_mspline_all(y, &mut data[i * k..(i + 1) * k])?;
        }
        Ok(BasisRows { k, data })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    fn len(&self) -> usize {
        self.data.len() / self.k
    }
}

fn check_batch(params: &MlpParams, features: &Features, n_resp: usize, k: usize) -> Result<()> {
    if features.rows() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if features.rows() != n_resp {
        return Err(Error::Shape {
            expected: features.rows(),
            got: n_resp,
        });
    }
    if features.cols() != params.input_dim() {
        return Err(Error::Shape {
            expected: params.input_dim(),
            got: features.cols(),
        });
    }
    if params.output_dim() != k {
        return Err(Error::Shape {
            expected: k,
            got: params.output_dim(),
        });
    }
    Ok(())
}

/// Mean negative log-likelihood of the spline mixture.
pub fn nll_loss(params: &MlpParams, features: &Features, responses: &[f64], basis: &SplineBasis) -> Result<f64> {
    check_batch(params, features, responses.len(), basis.len())?;
    let rows = BasisRows::new(basis, responses)?;
    let idx: Vec<usize> = (0..features.rows()).collect();
    loss_on(params, features, &rows, &idx)
}

/// Analytic gradient of [`nll_loss`] with respect to every weight and bias.
pub fn grad(params: &MlpParams, features: &Features, responses: &[f64], basis: &SplineBasis) -> Result<MlpParams> {
    check_batch(params, features, responses.len(), basis.len())?;
    let rows = BasisRows::new(basis, responses)?;
    let idx: Vec<usize> = (0..features.rows()).collect();
    let mut g = MlpParams::zeros(&params.layer_sizes)?;
    let mut scratch = Scratch::new(params);
    loss_and_grad_on(params, features, &rows, &idx, &mut g, &mut scratch)?;
    Ok(g)
}

fn loss_on(params: &MlpParams, features: &Features, rows: &BasisRows, idx: &[usize]) -> Result<f64> {
    let mut scratch = Scratch::new(params);
    let mut total = 0.0;
    for &i in idx {
        let pi = params.forward_into(features.row(i), &mut scratch)?;
        let f = dot(pi, rows.row(i));
        total -= f.max(DENSITY_FLOOR).ln();
    }
    Ok(total / idx.len() as f64)
}

/// Accumulates the mean gradient over `idx` into `g` (overwritten) and
/// returns the mean loss.
fn loss_and_grad_on(
    params: &MlpParams,
    features: &Features,
    rows: &BasisRows,
    idx: &[usize],
    g: &mut MlpParams,
    s: &mut Scratch,
) -> Result<f64> {
    for v in g.values_mut() {
        *v = 0.0;
    }
    let n_layers = params.num_layers();
    let mut total = 0.0;
    for &i in idx {
        params.forward_into(features.row(i), s)?;
        let b = rows.row(i);
        let pi = &s.acts[n_layers];
        let f = dot(pi, b);
        if f < DENSITY_FLOOR {
            total -= DENSITY_FLOOR.ln();
            continue;
        }
        total -= f.ln();
        {
            let d = &mut s.delta[n_layers - 1];
            for k in 0..d.len() {
                d[k] = pi[k] - pi[k] * b[k] / f;
            }
        }
        for h in (0..n_layers).rev() {
            let (n_in, n_out) = (params.layer_sizes[h], params.layer_sizes[h + 1]);
            let input = &s.acts[h];
            {
                let d = &s.delta[h];
                let gw = &mut g.weights[h];
                for o in 0..n_out {
                    let dv = d[o];
                    if dv == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * n_in..(o + 1) * n_in];
                    for (r, &a) in row.iter_mut().zip(input) {
                        *r += dv * a;
                    }
                    g.biases[h][o] += dv;
                }
            }
            if h > 0 {
                let (lower, upper) = s.delta.split_at_mut(h);
                let d = &upper[0];
                let below = &mut lower[h - 1];
                let w = &params.weights[h];
                let pre = &s.pre[h - 1];
                for (j, bj) in below.iter_mut().enumerate() {
                    if pre[j] <= 0.0 {
                        *bj = 0.0;
                        continue;
                    }
                    let mut acc = 0.0;
                    for o in 0..n_out {
                        acc += w[o * n_in + j] * d[o];
                    }
                    *bj = acc;
                }
            }
        }
    }
    let n = idx.len() as f64;
    for v in g.values_mut() {
        *v /= n;
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok(loss)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: MlpParams,
    v: MlpParams,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        AdamState {
            m: MlpParams::zeros(&params.layer_sizes).expect("shape already validated"),
            v: MlpParams::zeros(&params.layer_sizes).expect("shape already validated"),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut MlpParams, grad: &MlpParams, lr: f64) -> Result<()> {
        if !params.same_shape(grad) || !params.same_shape(&self.m) {
            return Err(Error::Shape {
                expected: params.num_params(),
                got: grad.num_params(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, &g), m), v) in params
            .values_mut()
            .zip(grad.values())
            .zip(self.m.values_mut())
            .zip(self.v.values_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            learning_rate: 0.001,
            max_epochs: 300,
            validation_fraction: 0.2,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::InvalidParameter(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub n_train: usize,
    pub n_val: usize,
}

pub const MIN_TRAIN_SAMPLES: usize = 10;

/// Mini-batch Adam from `init`; returns the parameters with the lowest
/// validation loss.
pub fn train(
    init: MlpParams,
    features: &Features,
    responses: &[f64],
    basis: &SplineBasis,
    config: &TrainConfig,
) -> Result<(MlpParams, TrainReport)> {
    let groups: Vec<usize> = (0..responses.len()).collect();
    train_grouped(init, features, responses, basis, config, &groups)
}

/// As [`train`], but rows sharing a group label always land in the same
/// partition and the same mini-batch. Batches hold whole groups and close
/// once they reach `batch_size` rows.
pub fn train_grouped(
    init: MlpParams,
    features: &Features,
    responses: &[f64],
    basis: &SplineBasis,
    config: &TrainConfig,
    groups: &[usize],
) -> Result<(MlpParams, TrainReport)> {
    config.validate()?;
    if groups.len() != responses.len() {
        return Err(Error::Shape {
            expected: responses.len(),
            got: groups.len(),
        });
    }
    if features.rows() != responses.len() {
        return Err(Error::Shape {
            expected: features.rows(),
            got: responses.len(),
        });
    }
    if responses.len() < MIN_TRAIN_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_TRAIN_SAMPLES} samples, got {}",
            responses.len()
        )));
    }
    check_batch(&init, features, responses.len(), basis.len())?;
    let rows = BasisRows::new(basis, responses)?;
    debug_assert_eq!(rows.len(), responses.len());

    let mut units: Vec<Vec<usize>> = Vec::new();
    let mut slot: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    for (i, &g) in groups.iter().enumerate() {
        let k = *slot.entry(g).or_insert_with(|| {
            units.push(Vec::new());
            units.len() - 1
        });
        units[k].push(i);
    }
    if units.len() < 2 {
        return Err(Error::InvalidInput("need at least two groups to split off a validation set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    units.shuffle(&mut rng);
    let n_val_units = ((units.len() as f64 * config.validation_fraction).round() as usize).clamp(1, units.len() - 1);
    let mut train_units = units.split_off(n_val_units);
    let val_idx: Vec<usize> = units.concat();
    let n_val = val_idx.len();
    let n_train = responses.len() - n_val;
    let mut batch: Vec<usize> = Vec::with_capacity(config.batch_size);

    let mut params = init;
    let mut best = params.clone();
    let initial_val_loss = loss_on(&params, features, &rows, &val_idx)?;
    let mut best_val = initial_val_loss;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut stopped_early = false;

    let mut adam = AdamState::new(&params);
    let mut g = MlpParams::zeros(params.layer_sizes())?;
    let mut scratch = Scratch::new(&params);

    for epoch in 1..=config.max_epochs {
        train_units.shuffle(&mut rng);
        let last = train_units.len() - 1;
        for (k, unit) in train_units.iter().enumerate() {
            batch.extend_from_slice(unit);
            if batch.len() >= config.batch_size || k == last {
                loss_and_grad_on(&params, features, &rows, &batch, &mut g, &mut scratch)?;
                adam.step(&mut params, &g, config.learning_rate)?;
                batch.clear();
            }
        }
        epochs_run = epoch;
        let val = loss_on(&params, features, &rows, &val_idx)?;
        if !val.is_finite() {
            return Err(Error::Numeric(format!("validation loss diverged at epoch {epoch}")));
        }
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best.clone_from(&params);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok((
        best,
        TrainReport {
            initial_val_loss,
            best_val_loss: best_val,
            best_epoch,
            epochs_run,
            stopped_early,
            n_train,
            n_val,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        let a = MlpParams::init(&[4, 30, 20, 20], 1).unwrap();
        let b = MlpParams::init(&[4, 30, 20, 20], 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.weights(0).len(), 30 * 4);
        assert_eq!(a.weights(1).len(), 20 * 30);
        assert_eq!(a.weights(2).len(), 20 * 20);
        assert_eq!(a.biases(0).len(), 30);
        assert!(a.biases(2).iter().all(|&v| v == 0.0));
        assert_ne!(a, MlpParams::init(&[4, 30, 20, 20], 2).unwrap());
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(MlpParams::init(&[], 0).is_err());
        assert!(MlpParams::init(&[3], 0).is_err());
        assert!(MlpParams::init(&[3, 0, 4], 0).is_err());
    }

    #[test]
    fn he_variance() {
        let p = MlpParams::init(&[100, 64, 5], 7).unwrap();
        let w = p.weights(0);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = 2.0 / 100.0;
        assert!((var / target - 1.0).abs() < 0.2, "var {var}");
    }

    #[test]
    fn zero_params_give_uniform_weights() {
        let p = MlpParams::zeros(&[3, 5, 4]).unwrap();
        let pi = p.forward(&[1.0, -2.0, 3.0]).unwrap();
        for v in pi {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_by_hand() {
        // 1 -> 2 -> 2. Hidden: relu(2x + 0.5), relu(-x + 0.25). Output logits:
        // [h1 - h2, 0.5 h2 + 0.1].
        let mut p = MlpParams::zeros(&[1, 2, 2]).unwrap();
        p.weights_mut(0).copy_from_slice(&[2.0, -1.0]);
        p.biases_mut(0).copy_from_slice(&[0.5, 0.25]);
        p.weights_mut(1).copy_from_slice(&[1.0, -1.0, 0.0, 0.5]);
        p.biases_mut(1).copy_from_slice(&[0.0, 0.1]);
        // x = 1: h = [2.5, 0]; logits = [2.5, 0.1].
        let pi = p.forward(&[1.0]).unwrap();
        let e = (2.5f64 - 0.1).exp();
        let want0 = e / (1.0 + e);
        assert!((pi[0] - want0).abs() < 1e-15);
        assert!((pi[1] - (1.0 - want0)).abs() < 1e-15);
    }

    #[test]
    fn forward_shape_error() {
        let p = MlpParams::zeros(&[3, 2]).unwrap();
        assert!(matches!(p.forward(&[1.0, 2.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn forward_on_simplex() {
        let p = MlpParams::init(&[5, 16, 8, 10], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-50.0..50.0)).collect();
            let pi = p.forward(&x).unwrap();
            assert!(pi.iter().all(|&v| v >= 0.0));
            assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_of_uniform_mixture_at_mode() {
        let basis = SplineBasis::new(5).unwrap();
        let p = MlpParams::zeros(&[1, 5]).unwrap();
        // Uniform mixture of 5 order-2 M-splines: peak 2/h = 8 at y = 0
        // for the first, interior hats peak at 1/h = 4; mixture density is
        // (8 + 0)/5 at y=0.
        let w = vec![0.2; 5];
        let f0 = basis.mixture_pdf(&w, 0.0).unwrap();
        assert!((f0 - 8.0 / 5.0).abs() < 1e-12);
        let x = Features::new(1, 1, vec![0.3]).unwrap();
        let loss = nll_loss(&p, &x, &[0.0], &basis).unwrap();
        assert!((loss + f0.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_and_grad_invariant_to_duplication() {
        let basis = SplineBasis::new(6).unwrap();
        let p = MlpParams::init(&[2, 7, 6], 5).unwrap();
        let x = Features::from_rows(&[vec![0.1, 0.5], vec![-1.0, 2.0], vec![0.3, 0.3]]).unwrap();
        let y = [0.2, 0.7, 0.95];
        let x2 = Features::from_rows(&[
            vec![0.1, 0.5],
            vec![-1.0, 2.0],
            vec![0.3, 0.3],
            vec![0.1, 0.5],
            vec![-1.0, 2.0],
            vec![0.3, 0.3],
        ])
        .unwrap();
        let y2 = [0.2, 0.7, 0.95, 0.2, 0.7, 0.95];
        let l1 = nll_loss(&p, &x, &y, &basis).unwrap();
        let l2 = nll_loss(&p, &x2, &y2, &basis).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        let g1 = grad(&p, &x, &y, &basis).unwrap();
        let g2 = grad(&p, &x2, &y2, &basis).unwrap();
        for (a, b) in g1.values().zip(g2.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let basis = SplineBasis::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p = MlpParams::init(&[3, 5, 4], 17).unwrap();
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let x = Features::from_rows(&rows).unwrap();
        let y: Vec<f64> = (0..20).map(|_| rng.random_range(0.02..0.98)).collect();
        let g = grad(&p, &x, &y, &basis).unwrap();
        let h = 1e-5;
        let n = p.num_params();
        let mut worst: f64 = 0.0;
        for idx in 0..n {
            let mut plus = p.clone();
            *plus.values_mut().nth(idx).unwrap() += h;
            let mut minus = p.clone();
            *minus.values_mut().nth(idx).unwrap() -= h;
            let fd = (nll_loss(&plus, &x, &y, &basis).unwrap() - nll_loss(&minus, &x, &y, &basis).unwrap()) / (2.0 * h);
            let an = *g.values().nth(idx).unwrap();
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = MlpParams::zeros(&[1, 1]).unwrap();
        let mut g = MlpParams::zeros(&[1, 1]).unwrap();
        g.weights_mut(0)[0] = 1.0;
        let mut st = AdamState::new(&p);
        st.step(&mut p, &g, 0.001).unwrap();
        // m_hat = 1, v_hat = 1: delta = lr / (1 + eps).
        let want = -0.001 / (1.0 + 1e-8);
        assert!((p.weights(0)[0] - want).abs() < 1e-15);
        assert_eq!(p.biases(0)[0], 0.0);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = MlpParams::init(&[3, 4, 2], 1).unwrap();
        let before = p.clone();
        let g = MlpParams::zeros(&[3, 4, 2]).unwrap();
        let mut st = AdamState::new(&p);
        for _ in 0..10 {
            st.step(&mut p, &g, 0.01).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = MlpParams::zeros(&[3, 2]).unwrap();
        let g = MlpParams::zeros(&[2, 2]).unwrap();
        let mut st = AdamState::new(&p);
        assert!(matches!(st.step(&mut p, &g, 0.1), Err(Error::Shape { .. })));
    }

    #[test]
    fn loss_decreases_under_adam() {
        let basis = SplineBasis::new(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let x = Features::from_rows(&rows).unwrap();
        let y: Vec<f64> = rows.iter().map(|r| 0.5 + 0.3 * r[0]).collect();
        let mut p = MlpParams::init(&[1, 10, 8], 2).unwrap();
        let mut st = AdamState::new(&p);
        let l0 = nll_loss(&p, &x, &y, &basis).unwrap();
        for _ in 0..50 {
            let g = grad(&p, &x, &y, &basis).unwrap();
            st.step(&mut p, &g, 0.01).unwrap();
        }
        let l1 = nll_loss(&p, &x, &y, &basis).unwrap();
        assert!(l1 < l0, "{l1} >= {l0}");
    }

    #[test]
    fn gradient_vanishes_at_basis_peak() {
        let basis = SplineBasis::new(3).unwrap();
        let x = Features::new(1, 1, vec![1.0]).unwrap();
        let y = [0.5];
        let mut p = MlpParams::zeros(&[1, 3]).unwrap();
        let mut st = AdamState::new(&p);
        for _ in 0..20_000 {
            let g = grad(&p, &x, &y, &basis).unwrap();
            st.step(&mut p, &g, 0.05).unwrap();
        }
        let g = grad(&p, &x, &y, &basis).unwrap();
        let norm = g.values().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "gradient norm {norm}");
        let loss = nll_loss(&p, &x, &y, &basis).unwrap();
        assert!((loss + 2.0f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn train_validates_inputs() {
        let basis = SplineBasis::new(4).unwrap();
        let p = MlpParams::zeros(&[1, 4]).unwrap();
        let x = Features::new(5, 1, vec![0.0; 5]).unwrap();
        let err = train(p.clone(), &x, &[0.5; 5], &basis, &TrainConfig::default());
        assert!(matches!(err, Err(Error::InvalidInput(_))));
        let bad = TrainConfig {
            validation_fraction: 1.0,
            ..TrainConfig::default()
        };
        let x = Features::new(20, 1, vec![0.0; 20]).unwrap();
        assert!(train(p, &x, &[0.5; 20], &basis, &bad).is_err());
    }

    #[test]
    fn grouped_pairs_leave_a_neutral_tag_untouched() {
        // Each group holds the same (x, y) twice, tagged -1 and +1. With the
        // tag column starting at zero, paired gradients cancel in every batch.
        let basis = SplineBasis::new(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut groups = Vec::new();
        for g in 0..150 {
            let x: f64 = rng.random_range(-1.0..1.0);
            let r = (0.5 + 0.3 * x + 0.1 * rng.random_range(-1.0..1.0f64)).clamp(0.0, 1.0);
            for tag in [-1.0, 1.0] {
                rows.push(vec![x, tag]);
                y.push(r);
                groups.push(g);
            }
        }
        let x = Features::from_rows(&rows).unwrap();
        let mut init = MlpParams::init(&[2, 8, 6], 2).unwrap();
        for w in init.weights_mut(0).chunks_mut(2) {
            w[1] = 0.0;
        }
        let cfg = TrainConfig {
            batch_size: 32,
            learning_rate: 0.01,
            max_epochs: 40,
            seed: 6,
            ..TrainConfig::default()
        };
        let (p, report) = train_grouped(init, &x, &y, &basis, &cfg, &groups).unwrap();
        assert_eq!(report.n_val % 2, 0);
        assert_eq!(report.n_val + report.n_train, 300);
        let tag_max = p.weights(0).chunks(2).map(|w| w[1].abs()).fold(0.0, f64::max);
        assert!(tag_max < 1e-6, "tag weight {tag_max}");

        assert!(train_grouped(p.clone(), &x, &y, &basis, &cfg, &groups[1..]).is_err());
        assert!(train_grouped(p, &x, &y, &basis, &cfg, &vec![0; 300]).is_err());
    }

    #[test]
    fn method_default_config() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 100);
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.max_epochs, 300);
        assert_eq!(c.validation_fraction, 0.2);
        assert_eq!(c.patience, 5);
        c.validate().unwrap();
    }

    #[test]
    fn training_is_deterministic_and_respects_patience() {
        let basis = SplineBasis::new(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let x = Features::from_rows(&rows).unwrap();
        let y: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..1.0f64).powi(2)).collect();
        let cfg = TrainConfig {
            batch_size: 32,
            learning_rate: 0.01,
            max_epochs: 60,
            patience: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let init = MlpParams::init(&[1, 8, 6], 1).unwrap();
        let (a, ra) = train(init.clone(), &x, &y, &basis, &cfg).unwrap();
        let (b, rb) = train(init, &x, &y, &basis, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.epochs_run <= cfg.max_epochs);
        assert!(ra.best_val_loss <= ra.initial_val_loss);
        if ra.stopped_early {
            assert_eq!(ra.epochs_run - ra.best_epoch, cfg.patience);
        }
        assert_eq!(ra.n_val, 40);
    }

    #[test]
    fn training_concentrates_on_single_tent() {
        // Draws from B_k: K = 10 interior hat k = 5 lives on [t_4, t_6] with
        // peak at t_5; sample via the sum of two uniforms on half-width h.
        let basis = SplineBasis::new(10).unwrap();
        let h = 1.0 / 9.0;
        let center = basis.knots()[5];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let y: Vec<f64> = (0..5000)
            .map(|_| center + h * (rng.random::<f64>() + rng.random::<f64>() - 1.0))
            .collect();
        let rows: Vec<Vec<f64>> = (0..5000).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let x = Features::from_rows(&rows).unwrap();
        let cfg = TrainConfig {
            seed: 3,
            ..TrainConfig::default()
        };
        let (p, _) = train(MlpParams::init(&[1, 30, 20, 10], 9).unwrap(), &x, &y, &basis, &cfg).unwrap();
        let pi = p.forward(&[0.0]).unwrap();
        assert!(pi[4] > 0.8, "weights {pi:?}");
    }
}
