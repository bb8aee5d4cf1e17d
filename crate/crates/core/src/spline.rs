//! Second-order M-spline densities and their I-spline integrals on `[0, 1]`.
//!
//! The knot vector has boundary multiplicity equal to the order and `K - 1`
//! equal interior intervals, so `K` basis functions span the unit interval.
//! Each M-spline integrates to one; each I-spline is the running integral of
//! its M-spline and therefore a CDF on `[0, 1]`.
//!
//! Evaluation is right-continuous at interior knots. The right endpoint `1.0`
//! is assigned to the last interval so that the final basis function is
//! evaluated on its closed support.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spline order (2 = piecewise-linear densities).
pub const ORDER: usize = 2;

/// Serialized form of a basis: the count is enough to rebuild everything.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct BasisSpec {
    pub order: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisSpec", into = "BasisSpec")]
pub struct SplineBasis {
    count: usize,
    knots: Vec<f64>,
    /// `cum_mass[k][j]` = integral of basis `k` over knot intervals strictly
    /// before interval `j` (indexed by left knot position).
    cum_mass: Vec<Vec<f64>>,
}

impl TryFrom<BasisSpec> for SplineBasis {
    type Error = Error;

    fn try_from(spec: BasisSpec) -> Result<Self> {
        if spec.order != ORDER {
            return Err(Error::InvalidParameter(format!(
                "only order-{ORDER} M-splines are supported, got order {}",
                spec.order
            )));
        }
        SplineBasis::new(spec.count)
    }
}

impl From<SplineBasis> for BasisSpec {
    fn from(b: SplineBasis) -> Self {
        BasisSpec {
            order: ORDER,
            count: b.count,
        }
    }
}

impl SplineBasis {
    /// Builds `count` order-2 M-splines with equally spaced knots.
    pub fn new(count: usize) -> Result<Self> {
        if count < 3 {
            return Err(Error::InvalidParameter(format!(
                "basis needs at least 3 functions, got {count}"
            )));
        }
        let n_interior_intervals = count - 1;
        let mut knots = Vec::with_capacity(count + ORDER);
        knots.extend(std::iter::repeat_n(0.0, ORDER - 1));
        for j in 0..=n_interior_intervals {
            knots.push(j as f64 / n_interior_intervals as f64);
        }
        knots.extend(std::iter::repeat_n(1.0, ORDER - 1));
        debug_assert_eq!(knots.len(), count + ORDER);

        let mut basis = SplineBasis {
            count,
            knots,
            cum_mass: Vec::new(),
        };
        let n_knots = basis.knots.len();
        let mut cum_mass = vec![vec![0.0; n_knots]; count];
        for (i, row) in cum_mass.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..n_knots - 1 {
                row[j] = acc;
                let (a, b) = (basis.knots[j], basis.knots[j + 1]);
                if b > a {
                    acc += basis.piece_integral(i, j, a, b);
                }
            }
            row[n_knots - 1] = acc;
        }
        basis.cum_mass = cum_mass;
        Ok(basis)
    }

    /// Number of basis functions `K`.
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Density of basis function `k` (1-based) at `y`.
    pub fn mspline(&self, k: usize, y: f64) -> Result<f64> {
        self.check_index(k)?;
        let j = self.interval(y)?;
        Ok(self.piece(k - 1, j, y))
    }

    /// Integral of basis function `k` (1-based) over `[0, y]`.
    pub fn ispline(&self, k: usize, y: f64) -> Result<f64> {
        self.check_index(k)?;
        let j = self.interval(y)?;
        Ok(self.ispline_in(k - 1, j, y))
    }

    /// All `K` densities at `y` written into `out`.
    pub fn eval_mspline_all(&self, y: f64, out: &mut [f64]) -> Result<()> {
        if out.len() != self.count {
            return Err(Error::Shape {
                expected: self.count,
                got: out.len(),
            });
        }
        let j = self.interval(y)?;
        out.fill(0.0);
        for i in self.active(j) {
            out[i] = self.piece(i, j, y);
        }
        Ok(())
    }

    /// All `K` I-spline values at `y` written into `out`.
    pub fn eval_ispline_all(&self, y: f64, out: &mut [f64]) -> Result<()> {
        if out.len() != self.count {
            return Err(Error::Shape {
                expected: self.count,
                got: out.len(),
            });
        }
        let j = self.interval(y)?;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.ispline_in(i, j, y);
        }
        Ok(())
    }

    /// Mixture density `sum_k w_k B_k(y)`.
    pub fn mixture_pdf(&self, weights: &[f64], y: f64) -> Result<f64> {
        self.check_weights(weights)?;
        let j = self.interval(y)?;
        Ok(self.active(j).map(|i| weights[i] * self.piece(i, j, y)).sum())
    }

    /// Mixture CDF `sum_k w_k I_k(y)`.
    pub fn mixture_cdf(&self, weights: &[f64], y: f64) -> Result<f64> {
        self.check_weights(weights)?;
        let j = self.interval(y)?;
        let cdf: f64 = weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * self.ispline_in(i, j, y))
            .sum();
        Ok(cdf.clamp(0.0, 1.0))
    }

    fn check_weights(&self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.count {
            return Err(Error::Shape {
                expected: self.count,
                got: weights.len(),
            });
        }
        Ok(())
    }

    fn check_index(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.count {
            return Err(Error::Domain(format!(
                "basis index {k} outside 1..={}",
                self.count
            )));
        }
        Ok(())
    }

    /// Index `j` of the knot interval `[t_j, t_{j+1})` containing `y`.
    fn interval(&self, y: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&y) {
            return Err(Error::Domain(format!("{y} outside [0, 1]")));
        }
        let last = self.knots.len() - ORDER;
        // Nondegenerate intervals start at ORDER - 1 and end at `last - 1`.
        let first = ORDER - 1;
        let upper = self.knots[first..=last].partition_point(|&t| t <= y);
        Ok((first + upper.saturating_sub(1)).min(last - 1))
    }

    /// Basis functions with nonzero support on interval `j`.
    fn active(&self, j: usize) -> std::ops::Range<usize> {
        let lo = (j + 1).saturating_sub(ORDER);
        let hi = (j + 1).min(self.count);
        lo..hi
    }

    fn ispline_in(&self, i: usize, j: usize, y: f64) -> f64 {
        let start = self.knots[j];
        let partial = if y > start {
            self.piece_integral(i, j, start, y)
        } else {
            0.0
        };
        (self.cum_mass[i][j] + partial).clamp(0.0, 1.0)
    }

    /// Polynomial piece of M-spline `i` on interval `j`, evaluated at `x`.
    fn piece(&self, i: usize, j: usize, x: f64) -> f64 {
        self.mspline_rec(i, ORDER, j, x)
    }

    /// Ramsay's M-spline recursion restricted to the piece on interval `j`.
    fn mspline_rec(&self, i: usize, order: usize, j: usize, x: f64) -> f64 {
        let t = &self.knots;
        if order == 1 {
            let width = t[i + 1] - t[i];
            return if i == j && width > 0.0 { 1.0 / width } else { 0.0 };
        }
        let span = t[i + order] - t[i];
        if span <= 0.0 {
            return 0.0;
        }
        let left = (x - t[i]) * self.mspline_rec(i, order - 1, j, x);
        let right = (t[i + order] - x) * self.mspline_rec(i + 1, order - 1, j, x);
        order as f64 * (left + right) / ((order - 1) as f64 * span)
    }

    /// Integral of the piece over `[a, b]` within one interval; Simpson's rule
    /// is exact for the polynomial pieces of order up to 4.
    fn piece_integral(&self, i: usize, j: usize, a: f64, b: f64) -> f64 {
        let m = 0.5 * (a + b);
        (b - a) / 6.0 * (self.piece(i, j, a) + 4.0 * self.piece(i, j, m) + self.piece(i, j, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trapezoid(f: impl Fn(f64) -> f64, n: usize) -> f64 {
        let h = 1.0 / n as f64;
        let mut s = 0.5 * (f(0.0) + f(1.0));
        for i in 1..n {
            s += f(i as f64 * h);
        }
        s * h
    }

    /// Order-2 M-spline written out from the recursion by hand:
    /// B_i(x) = 2 [(x - t_i) M1_i + (t_{i+2} - x) M1_{i+1}] / (t_{i+2} - t_i).
    fn hand_order2(knots: &[f64], i: usize, x: f64) -> f64 {
        let ind = |m: usize| {
            let (a, b) = (knots[m], knots[m + 1]);
            let inside = a <= x && (x < b || (x == 1.0 && b == 1.0));
            if b > a && inside {
                1.0 / (b - a)
            } else {
                0.0
            }
        };
        let span = knots[i + 2] - knots[i];
        2.0 * ((x - knots[i]) * ind(i) + (knots[i + 2] - x) * ind(i + 1)) / span
    }

    #[test]
    fn rejects_small_counts() {
        assert!(matches!(SplineBasis::new(2), Err(Error::InvalidParameter(_))));
        assert!(SplineBasis::new(3).is_ok());
        assert_eq!(SplineBasis::new(20).unwrap().len(), 20);
    }

    #[test]
    fn knots_have_boundary_multiplicity() {
        let b = SplineBasis::new(5).unwrap();
        assert_eq!(b.knots(), &[0.0, 0.0, 0.25, 0.5, 0.75, 1.0, 1.0]);
    }

    #[test]
    fn each_basis_integrates_to_one() {
        for count in [3, 10, 20] {
            let b = SplineBasis::new(count).unwrap();
            for k in 1..=count {
                let mass = trapezoid(|y| b.mspline(k, y).unwrap(), 100_000);
                assert!((mass - 1.0).abs() < 1e-8, "K={count} k={k} mass={mass}");
            }
        }
    }

    #[test]
    fn matches_hand_recursion() {
        let b = SplineBasis::new(20).unwrap();
        for k in 1..=20 {
            for s in 0..=200 {
                let y = s as f64 / 200.0;
                let want = hand_order2(b.knots(), k - 1, y);
                let got = b.mspline(k, y).unwrap();
                assert!((want - got).abs() < 1e-12, "k={k} y={y}");
            }
        }
        assert_eq!(b.mspline(1, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn nonnegative_and_symmetric() {
        let count = 20;
        let b = SplineBasis::new(count).unwrap();
        for s in 0..100 {
            let y = s as f64 / 99.0;
            for k in 1..=count {
                assert!(b.mspline(k, y).unwrap() >= 0.0);
            }
            for k in 2..count {
                let lhs = b.mspline(k, y).unwrap();
                let rhs = b.mspline(count + 1 - k, 1.0 - y).unwrap();
                assert!((lhs - rhs).abs() < 1e-9, "k={k} y={y}");
            }
        }
    }

    #[test]
    fn ispline_endpoints_and_monotone() {
        let b = SplineBasis::new(10).unwrap();
        for k in 1..=10 {
            assert_eq!(b.ispline(k, 0.0).unwrap(), 0.0);
            assert!((b.ispline(k, 1.0).unwrap() - 1.0).abs() < 1e-12);
            let mut prev = 0.0;
            for s in 0..1000 {
                let v = b.ispline(k, s as f64 / 999.0).unwrap();
                assert!(v >= prev - 1e-15);
                prev = v;
            }
        }
    }

    #[test]
    fn ispline_derivative_is_mspline() {
        let h = 1e-5;
        for count in [3, 10, 20] {
            let b = SplineBasis::new(count).unwrap();
            let knots = b.knots().to_vec();
            for k in 1..=count {
                for s in 1..500 {
                    let y = s as f64 / 500.0;
                    if knots.iter().any(|t| (t - y).abs() < 2.0 * h) {
                        continue;
                    }
                    let fd = (b.ispline(k, y + h).unwrap() - b.ispline(k, y - h).unwrap()) / (2.0 * h);
                    let m = b.mspline(k, y).unwrap();
                    assert!((fd - m).abs() < 1e-4, "K={count} k={k} y={y}: {fd} vs {m}");
                }
            }
        }
    }

    #[test]
    fn domain_errors() {
        let b = SplineBasis::new(5).unwrap();
        assert!(matches!(b.mspline(0, 0.5), Err(Error::Domain(_))));
        assert!(matches!(b.mspline(6, 0.5), Err(Error::Domain(_))));
        assert!(matches!(b.ispline(1, -0.1), Err(Error::Domain(_))));
        assert!(matches!(b.ispline(1, 1.1), Err(Error::Domain(_))));
        assert!(b.mspline(1, f64::NAN).is_err());
    }

    #[test]
    fn vector_eval_matches_scalar() {
        let b = SplineBasis::new(7).unwrap();
        let mut m = vec![0.0; 7];
        let mut i = vec![0.0; 7];
        for s in 0..=50 {
            let y = s as f64 / 50.0;
            b.eval_mspline_all(y, &mut m).unwrap();
            b.eval_ispline_all(y, &mut i).unwrap();
            for k in 0..7 {
                assert_eq!(m[k], b.mspline(k + 1, y).unwrap());
                assert_eq!(i[k], b.ispline(k + 1, y).unwrap());
            }
        }
    }

    #[test]
    fn serde_roundtrip_via_order_and_count() {
        let b = SplineBasis::new(12).unwrap();
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, r#"{"order":2,"count":12}"#);
        let back: SplineBasis = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn simplex(count: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.0f64..1.0, count).prop_map(|v| {
                let s: f64 = v.iter().sum::<f64>() + 1e-12;
                v.into_iter().map(|x| x / s).collect()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn mixture_is_a_density(w in simplex(9)) {
                let b = SplineBasis::new(9).unwrap();
                let total: f64 = w.iter().sum();
                let mass = trapezoid(|y| b.mixture_pdf(&w, y).unwrap(), 20_000);
                prop_assert!((mass - total).abs() < 1e-8);
                prop_assert!(b.mixture_cdf(&w, 0.0).unwrap().abs() < 1e-15);
                prop_assert!((b.mixture_cdf(&w, 1.0).unwrap() - total.min(1.0)).abs() < 1e-12);
                let mut prev = 0.0;
                for s in 0..=400 {
                    let c = b.mixture_cdf(&w, s as f64 / 400.0).unwrap();
                    prop_assert!(c >= prev - 1e-15);
                    prev = c;
                }
            }
        }
    }
}
