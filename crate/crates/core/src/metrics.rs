//! Distributional and dependence diagnostics, and the summary table that
//! compares correction methods against observations.
//!
//! Per-cell statistics are computed for each (month, location) from all days
//! of that month across years. Wasserstein distances are averaged over cells
//! (PRCP on the `log(0.0001 + p)` scale); the other statistics are compared by
//! RMSE between method and observation over cells. Spatial correlation is
//! annual and compared over location pairs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calibration::{PRCP_OFFSET, ZERO_THRESHOLD};
use crate::error::{Error, Result};
use crate::field::{GridField, Variable};
use crate::par::{self, Execution};

fn sorted(a: &[f64]) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Err(Error::InvalidInput("empty sample".into()));
    }
    if a.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("sample contains NaN".into()));
    }
    let mut s = a.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// 1-Wasserstein distance between two empirical distributions: the integral
/// of the absolute difference of their step quantile functions.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    let sa = sorted(a)?;
    let sb = sorted(b)?;
    let (na, nb) = (sa.len(), sb.len());
    if na == nb {
        return Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / na as f64);
    }
    // Merge the breakpoints i/na and j/nb.
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let ea = (i + 1) as f64 / na as f64;
        let eb = (j + 1) as f64 / nb as f64;
        let next = ea.min(eb);
        total += (next - prev) * (sa[i] - sb[j]).abs();
        prev = next;
        if ea <= eb {
            i += 1;
        }
        if eb <= ea {
            j += 1;
        }
    }
    Ok(total)
}

/// Empirical quantile at level `tau`, interpolating linearly between order
/// statistics placed at levels `(i - 1) / (n - 1)`.
pub fn quantile(a: &[f64], tau: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("quantile level {tau} outside [0, 1]")));
    }
    Ok(quantile_sorted(&sorted(a)?, tau))
}

pub(crate) fn quantile_sorted(s: &[f64], tau: f64) -> f64 {
    let h = (s.len() - 1) as f64 * tau;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// Share of amounts below the 0.001 mm threshold.
pub fn prop_zeros(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::InvalidInput("empty sample".into()));
    }
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("precipitation {v} is negative")));
    }
    Ok(p.iter().filter(|&&v| v < ZERO_THRESHOLD).count() as f64 / p.len() as f64)
}

/// Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two pairs".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant series".into()));
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Lag-1 autocorrelation of one contiguous series.
pub fn lag1_autocorr(series: &[f64]) -> Result<f64> {
    lag1_autocorr_runs(&[series])
}

/// Lag-1 autocorrelation pooling consecutive pairs within each run.
pub fn lag1_autocorr_runs(runs: &[&[f64]]) -> Result<f64> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for r in runs {
        for w in r.windows(2) {
            x.push(w[0]);
            y.push(w[1]);
        }
    }
    pearson(&x, &y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCorr {
    pub a: usize,
    pub b: usize,
    /// `None` when either series is constant.
    pub value: Option<f64>,
}

/// Correlation of one variable for every unordered location pair.
pub fn spatial_corr(field: &GridField, v: Variable) -> Vec<PairCorr> {
    let n = field.n_locations();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            let value = match pearson(field.series(v, a), field.series(v, b)) {
                Ok(r) => Some(r),
                Err(_) => {
                    log::warn!(
                        "{} correlation between {} and {} undefined (constant series)",
                        v.name(),
                        field.locations()[a].id,
                        field.locations()[b].id
                    );
                    None
                }
            };
            out.push(PairCorr { a, b, value });
        }
    }
    out
}

/// Contemporaneous TMAX/PRCP correlation.
pub fn cross_corr(tmax: &[f64], prcp: &[f64]) -> Result<f64> {
    pearson(tmax, prcp)
}

/// One-sample Kolmogorov-Smirnov statistic against Uniform(0, 1) with its
/// asymptotic p-value.
pub fn ks_uniform(u: &[f64]) -> Result<(f64, f64)> {
    let s = sorted(u)?;
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let x = x.clamp(0.0, 1.0);
        d = d.max((i + 1) as f64 / n - x).max(x - i as f64 / n);
    }
    Ok((d, kolmogorov_sf(d * n.sqrt())))
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * x * x).exp();
        s += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Wasserstein,
    Quantile95,
    PropZeros,
    Lag1Autocorr,
    SpatialCorr,
    CrossCorr,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Wasserstein => "wasserstein",
            Metric::Quantile95 => "quantile_0.95",
            Metric::PropZeros => "prop_zeros",
            Metric::Lag1Autocorr => "lag1_autocorr",
            Metric::SpatialCorr => "spatial_corr",
            Metric::CrossCorr => "cross_corr",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::Wasserstein => "Wasserstein",
            Metric::Quantile95 => "0.95 quantile",
            Metric::PropZeros => "Proportion of zeros",
            Metric::Lag1Autocorr => "Lag-1 autocorrelation",
            Metric::SpatialCorr => "Spatial correlation",
            Metric::CrossCorr => "Cross correlation",
        }
    }
}

/// One per-cell value. `method` is `observed` for the reference statistic.
/// For Wasserstein the value is the distance between method and observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellValue {
    /// `None` for annual statistics.
    pub month: Option<u32>,
    /// Location id, or `a|b` for a pair.
    pub unit: String,
    pub metric: Metric,
    pub variable: Option<Variable>,
    pub method: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: Metric,
    pub variable: Option<Variable>,
    /// One entry per method, in report order.
    pub values: Vec<Option<f64>>,
    /// Index of the smallest value.
    pub best: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub methods: Vec<String>,
    pub rows: Vec<SummaryRow>,
    pub cells: Vec<CellValue>,
    pub notices: Vec<String>,
}

pub const OBSERVED: &str = "observed";

impl MetricsReport {
    pub fn row(&self, metric: Metric, variable: Option<Variable>) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.metric == metric && r.variable == variable)
    }

    /// Summary value of `method` in one row.
    pub fn value(&self, metric: Metric, variable: Option<Variable>, method: &str) -> Option<f64> {
        let i = self.methods.iter().position(|m| m == method)?;
        self.row(metric, variable)?.values[i]
    }

    /// Long format: `month,unit,metric,variable,method,value`.
    pub fn cells_csv(&self) -> String {
        let mut s = String::from("month,unit,metric,variable,method,value\n");
        for c in &self.cells {
            let month = c.month.map_or("all".to_string(), |m| m.to_string());
            let var = c.variable.map_or("both", Variable::name);
            let _ = writeln!(s, "{month},{},{},{var},{},{}", c.unit, c.metric.name(), c.method, c.value);
        }
        s
    }

    /// `metric,variable,method,value,best` for each summary entry.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("metric,variable,method,value,best\n");
        for r in &self.rows {
            let var = r.variable.map_or("both", Variable::name);
            for (i, m) in self.methods.iter().enumerate() {
                let v = r.values[i].map_or(String::new(), |v| v.to_string());
                let _ = writeln!(s, "{},{var},{m},{v},{}", r.metric.name(), r.best == Some(i));
            }
        }
        s
    }

    /// Plain-text table; the best value in each row carries a `*`.
    pub fn render(&self) -> String {
        let label_w = 34;
        let col_w = 12.max(self.methods.iter().map(|m| m.len() + 2).max().unwrap_or(0));
        let mut s = format!("{:<label_w$}", "");
        for m in &self.methods {
            let _ = write!(s, "{m:>col_w$}");
        }
        s.push('\n');
        for r in &self.rows {
            let label = match r.variable {
                Some(v) => format!("{} {}", v.name(), r.metric.label()),
                None => r.metric.label().to_string(),
            };
            let _ = write!(s, "{label:<label_w$}");
            for (i, v) in r.values.iter().enumerate() {
                let cell = match v {
                    Some(v) if r.best == Some(i) => format!("{v:.4}*"),
                    Some(v) => format!("{v:.4}"),
                    None => "n/a".to_string(),
                };
                let _ = write!(s, "{cell:>col_w$}");
            }
            s.push('\n');
        }
        for n in &self.notices {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

/// Per-cell statistics of one field. Undefined correlations are `None`.
#[derive(Debug, Clone)]
struct CellStats {
    q95: [f64; 2],
    zeros: f64,
    lag1: [Option<f64>; 2],
    cross: Option<f64>,
}

fn cell_days(field: &GridField, month: u32) -> (Vec<usize>, Vec<(usize, usize)>) {
    let days = field.days_in_month(month);
    // Contiguous runs within the month (one per year).
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=days.len() {
        if i == days.len() || days[i] != days[i - 1] + 1 {
            if i > start {
                runs.push((start, i));
            }
            start = i;
        }
    }
    (days, runs)
}

fn gather(field: &GridField, v: Variable, l: usize, days: &[usize]) -> Vec<f64> {
    let s = field.series(v, l);
    days.iter().map(|&t| s[t]).collect()
}

fn cell_stats(field: &GridField, l: usize, days: &[usize], runs: &[(usize, usize)]) -> Result<CellStats> {
    let t = gather(field, Variable::Tmax, l, days);
    let p = gather(field, Variable::Prcp, l, days);
    let lag = |x: &[f64]| {
        let slices: Vec<&[f64]> = runs.iter().map(|&(a, b)| &x[a..b]).collect();
        lag1_autocorr_runs(&slices).ok()
    };
    Ok(CellStats {
        q95: [quantile(&t, 0.95)?, quantile(&p, 0.95)?],
        zeros: prop_zeros(&p)?,
        lag1: [lag(&t), lag(&p)],
        cross: cross_corr(&t, &p).ok(),
    })
}

fn log_prcp(p: &[f64]) -> Vec<f64> {
    p.iter().map(|&x| (PRCP_OFFSET + x).ln()).collect()
}

/// Compares each method against the observations. All fields must be
/// aligned with `obs`.
pub fn rmse_table(obs: &GridField, methods: &[(&str, &GridField)], exec: Execution) -> Result<MetricsReport> {
    if methods.is_empty() {
        return Err(Error::InvalidInput("no methods to compare".into()));
    }
    for (name, f) in methods {
        obs.check_aligned(f)
            .map_err(|e| Error::Alignment(format!("method {name}: {e}")))?;
    }
    let n = obs.n_locations();
    let ids: Vec<&str> = obs.locations().iter().map(|l| l.id.as_str()).collect();
    let months: Vec<u32> = (1..=12).filter(|&m| !obs.days_in_month(m).is_empty()).collect();
    let fields: Vec<&GridField> = std::iter::once(obs).chain(methods.iter().map(|(_, f)| *f)).collect();

    // (month, location) cells, each giving stats for obs and every method
    // plus the Wasserstein distances.
    let cells: Vec<(u32, usize)> = months.iter().flat_map(|&m| (0..n).map(move |l| (m, l))).collect();
    type CellOut = (Vec<CellStats>, Vec<[f64; 2]>);
    let per_cell: Vec<Result<CellOut>> = par::map_slice(exec, &cells, |&(month, l)| {
        let (days, runs) = cell_days(obs, month);
        let stats = fields
            .iter()
            .map(|f| cell_stats(f, l, &days, &runs))
            .collect::<Result<Vec<_>>>()?;
        let ot = gather(obs, Variable::Tmax, l, &days);
        let op = log_prcp(&gather(obs, Variable::Prcp, l, &days));
        let w = methods
            .iter()
            .map(|(_, f)| {
                Ok([
                    wasserstein_1d(&ot, &gather(f, Variable::Tmax, l, &days))?,
                    wasserstein_1d(&op, &log_prcp(&gather(f, Variable::Prcp, l, &days)))?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((stats, w))
    });
    let per_cell = per_cell.into_iter().collect::<Result<Vec<_>>>()?;

    let names: Vec<String> = methods.iter().map(|(n, _)| n.to_string()).collect();
    let mut report_cells = Vec::new();
    let mut notices = Vec::new();
    let k = methods.len();

    // Accumulators: sum of squared differences (or W1 sum) and counts.
    let acc = |metric: Metric, var: Option<Variable>| (metric, var, vec![0.0; k], vec![0usize; k]);
    let mut w1 = [acc(Metric::Wasserstein, Some(Variable::Tmax)), acc(Metric::Wasserstein, Some(Variable::Prcp))];
    let mut q95 = [acc(Metric::Quantile95, Some(Variable::Tmax)), acc(Metric::Quantile95, Some(Variable::Prcp))];
    let mut zeros = acc(Metric::PropZeros, Some(Variable::Prcp));
    let mut lag1 = [acc(Metric::Lag1Autocorr, Some(Variable::Tmax)), acc(Metric::Lag1Autocorr, Some(Variable::Prcp))];
    let mut cross = acc(Metric::CrossCorr, None);

    let mut push = |month: u32, l: usize, metric: Metric, var: Option<Variable>, method: &str, value: f64| {
        report_cells.push(CellValue {
            month: Some(month),
            unit: ids[l].to_string(),
            metric,
            variable: var,
            method: method.to_string(),
            value,
        });
    };

    for (&(month, l), (stats, w)) in cells.iter().zip(&per_cell) {
        let o = &stats[0];
        for (vi, var) in Variable::ALL.into_iter().enumerate() {
            push(month, l, Metric::Quantile95, Some(var), OBSERVED, o.q95[vi]);
            if let Some(r) = o.lag1[vi] {
                push(month, l, Metric::Lag1Autocorr, Some(var), OBSERVED, r);
            }
        }
        push(month, l, Metric::PropZeros, Some(Variable::Prcp), OBSERVED, o.zeros);
        if let Some(r) = o.cross {
            push(month, l, Metric::CrossCorr, None, OBSERVED, r);
        }
        for (mi, name) in names.iter().enumerate() {
            let s = &stats[mi + 1];
            for (vi, var) in Variable::ALL.into_iter().enumerate() {
                push(month, l, Metric::Wasserstein, Some(var), name, w[mi][vi]);
                w1[vi].2[mi] += w[mi][vi];
                w1[vi].3[mi] += 1;
                push(month, l, Metric::Quantile95, Some(var), name, s.q95[vi]);
                q95[vi].2[mi] += (s.q95[vi] - o.q95[vi]).powi(2);
                q95[vi].3[mi] += 1;
                match (o.lag1[vi], s.lag1[vi]) {
                    (Some(a), Some(b)) => {
                        push(month, l, Metric::Lag1Autocorr, Some(var), name, b);
                        lag1[vi].2[mi] += (a - b).powi(2);
                        lag1[vi].3[mi] += 1;
                    }
                    _ => notices.push(format!(
                        "{} lag-1 autocorrelation undefined for {name} at {} month {month}; cell skipped",
                        var.name(),
                        ids[l]
                    )),
                }
            }
            push(month, l, Metric::PropZeros, Some(Variable::Prcp), name, s.zeros);
            zeros.2[mi] += (s.zeros - o.zeros).powi(2);
            zeros.3[mi] += 1;
            match (o.cross, s.cross) {
                (Some(a), Some(b)) => {
                    push(month, l, Metric::CrossCorr, None, name, b);
                    cross.2[mi] += (a - b).powi(2);
                    cross.3[mi] += 1;
                }
                _ => notices.push(format!(
                    "cross correlation undefined for {name} at {} month {month}; cell skipped",
                    ids[l]
                )),
            }
        }
    }

    // Annual spatial correlation over pairs.
    let mut spatial = [acc(Metric::SpatialCorr, Some(Variable::Tmax)), acc(Metric::SpatialCorr, Some(Variable::Prcp))];
    if n < 2 {
        notices.push("single location: spatial correlation omitted".into());
    } else {
        for (vi, var) in Variable::ALL.into_iter().enumerate() {
            let o = spatial_corr(obs, var);
            for pc in &o {
                if let Some(r) = pc.value {
                    report_cells.push(CellValue {
                        month: None,
                        unit: format!("{}|{}", ids[pc.a], ids[pc.b]),
                        metric: Metric::SpatialCorr,
                        variable: Some(var),
                        method: OBSERVED.into(),
                        value: r,
                    });
                }
            }
            for (mi, (name, f)) in methods.iter().enumerate() {
                for (pc, po) in spatial_corr(f, var).iter().zip(&o) {
                    match (po.value, pc.value) {
                        (Some(a), Some(b)) => {
                            report_cells.push(CellValue {
                                month: None,
                                unit: format!("{}|{}", ids[pc.a], ids[pc.b]),
                                metric: Metric::SpatialCorr,
                                variable: Some(var),
                                method: name.to_string(),
                                value: b,
                            });
                            spatial[vi].2[mi] += (a - b).powi(2);
                            spatial[vi].3[mi] += 1;
                        }
                        _ => notices.push(format!(
                            "{} spatial correlation undefined for {name} at pair {}|{}; pair skipped",
                            var.name(),
                            ids[pc.a],
                            ids[pc.b]
                        )),
                    }
                }
            }
        }
    }

    let finish = |(metric, variable, sums, counts): (Metric, Option<Variable>, Vec<f64>, Vec<usize>), mean: bool| {
        let values: Vec<Option<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| (c > 0).then(|| if mean { s / c as f64 } else { (s / c as f64).sqrt() }))
            .collect();
        let best = values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i);
        SummaryRow {
            metric,
            variable,
            values,
            best,
        }
    };

    let [w_t, w_p] = w1;
    let [q_t, q_p] = q95;
    let [l_t, l_p] = lag1;
    let [s_t, s_p] = spatial;
    let mut rows = vec![finish(w_t, true), finish(q_t, false), finish(l_t, false)];
    if n >= 2 {
        rows.push(finish(s_t, false));
    }
    rows.extend([finish(w_p, true), finish(q_p, false), finish(zeros, false), finish(l_p, false)]);
    if n >= 2 {
        rows.push(finish(s_p, false));
    }
    rows.push(finish(cross, false));

    for nt in &notices {
        log::info!("{nt}");
    }
    Ok(MetricsReport {
        methods: names,
        rows,
        cells: report_cells,
        notices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Location, Source};
    use approx::assert_abs_diff_eq;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    #[test]
    fn wasserstein_examples() {
        assert_abs_diff_eq!(wasserstein_1d(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(wasserstein_1d(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(wasserstein_1d(&[3.0, 1.0, 2.0], &[2.0, 3.0, 4.0]).unwrap(), 1.0);
        // Unequal sizes: {0} vs {0, 1}: half the mass moves by 1.
        assert_abs_diff_eq!(wasserstein_1d(&[0.0], &[0.0, 1.0]).unwrap(), 0.5);
        // {0, 1, 2} vs {0, 2}: breakpoints 1/3, 1/2, 2/3, 1.
        // |0-0|/3 + |1-0|/6 + |1-2|/6 + |2-2|/3 = 1/3
        assert_abs_diff_eq!(wasserstein_1d(&[0.0, 1.0, 2.0], &[0.0, 2.0]).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        assert!(wasserstein_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn quantile_examples() {
        let a: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_abs_diff_eq!(quantile(&a, 0.95).unwrap(), 95.05, epsilon = 1e-12);
        assert_abs_diff_eq!(quantile(&a, 0.0).unwrap(), 1.0);
        assert_abs_diff_eq!(quantile(&a, 1.0).unwrap(), 100.0);
        assert_abs_diff_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5).unwrap(), 2.5);
        assert!(quantile(&a, 1.5).is_err());
    }

    #[test]
    fn zeros_and_correlations() {
        assert_abs_diff_eq!(prop_zeros(&[0.0, 0.0005, 0.001, 2.0]).unwrap(), 0.5);
        assert!(prop_zeros(&[1.0, -1.0]).is_err());
        let ramp: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_abs_diff_eq!(lag1_autocorr(&ramp).unwrap(), 1.0, epsilon = 1e-12);
        let alt: Vec<f64> = (0..50).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_abs_diff_eq!(lag1_autocorr(&alt).unwrap(), -1.0, epsilon = 1e-12);
        assert!(matches!(lag1_autocorr(&[2.0; 10]), Err(Error::UndefinedCorrelation(_))));
        let b: Vec<f64> = ramp.iter().map(|x| -2.0 * x + 1.0).collect();
        assert_abs_diff_eq!(cross_corr(&ramp, &b).unwrap(), -1.0, epsilon = 1e-12);
        // Runs are not joined: [1,2] and [10,11] give pairs (1,2), (10,11).
        assert_abs_diff_eq!(lag1_autocorr_runs(&[&[1.0, 2.0], &[10.0, 11.0]]).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ks_statistic_and_tail() {
        let u: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let (d, p) = ks_uniform(&u).unwrap();
        assert_abs_diff_eq!(d, 0.0005, epsilon = 1e-12);
        assert!(p > 0.99);
        // 1% critical value of the limiting distribution.
        assert_abs_diff_eq!(kolmogorov_sf(1.6276), 0.01, epsilon = 1e-4);
        let skew: Vec<f64> = u.iter().map(|x| x * x).collect();
        assert!(ks_uniform(&skew).unwrap().1 < 1e-6);
    }

    fn field(values: impl Fn(usize, usize) -> (f64, f64), n: usize, days: usize, source: Source) -> GridField {
        let locs: Vec<Location> = (0..n)
            .map(|i| Location {
                id: format!("s{i}"),
                x: i as f64,
                y: 0.0,
            })
            .collect();
        let start = NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
        let dates: Vec<NaiveDate> = start.iter_days().take(days).collect();
        let mut t = Vec::new();
        let mut p = Vec::new();
        for l in 0..n {
            for d in 0..days {
                let (a, b) = values(l, d);
                t.push(a);
                p.push(b);
            }
        }
        GridField::new(locs, dates, source, t, p).unwrap()
    }

    fn wiggle(l: usize, d: usize) -> (f64, f64) {
        let x = ((d * 7 + l * 3) % 11) as f64 + (d as f64 * 0.37 + l as f64).sin();
        let p = if (d + l).is_multiple_of(3) { 0.0 } else { ((d * 5 + l) % 13) as f64 * 0.7 };
        (x, p)
    }

    #[test]
    fn identical_fields_score_zero() {
        let obs = field(wiggle, 3, 800, Source::Observed);
        let same = obs.clone().with_source(Source::Calibrated);
        let r = rmse_table(&obs, &[("copy", &same)], Execution::Sequential).unwrap();
        assert_eq!(r.rows.len(), 10);
        for row in &r.rows {
            assert_abs_diff_eq!(row.values[0].unwrap(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn table_shape_best_flag_and_exports() {
        let obs = field(wiggle, 3, 800, Source::Observed);
        let near = field(|l, d| (wiggle(l, d).0 + 0.1, wiggle(l, d).1), 3, 800, Source::Model);
        let far = field(|l, d| (wiggle(l, d).0 + 2.0, wiggle(l, d).1 * 2.0), 3, 800, Source::Model);
        let r = rmse_table(&obs, &[("near", &near), ("far", &far)], Execution::Parallel).unwrap();
        let seq = rmse_table(&obs, &[("near", &near), ("far", &far)], Execution::Sequential).unwrap();
        assert_eq!(r, seq);
        assert_abs_diff_eq!(r.value(Metric::Wasserstein, Some(Variable::Tmax), "near").unwrap(), 0.1, epsilon = 1e-9);
        assert_abs_diff_eq!(r.value(Metric::Wasserstein, Some(Variable::Tmax), "far").unwrap(), 2.0, epsilon = 1e-9);
        assert_eq!(r.row(Metric::Wasserstein, Some(Variable::Tmax)).unwrap().best, Some(0));
        assert_eq!(r.row(Metric::Quantile95, Some(Variable::Prcp)).unwrap().best, Some(0));
        let text = r.render();
        assert!(text.contains("near") && text.contains('*'));
        let csv = r.cells_csv();
        assert!(csv.starts_with("month,unit,metric,variable,method,value\n"));
        assert!(csv.lines().count() > 12 * 3);
        assert!(r.summary_csv().lines().count() == 1 + 2 * r.rows.len());
    }

    #[test]
    fn undefined_cells_and_single_location() {
        let obs = field(wiggle, 1, 400, Source::Observed);
        let flat = field(|_, _| (5.0, 0.0), 1, 400, Source::Model);
        let r = rmse_table(&obs, &[("flat", &flat)], Execution::Sequential).unwrap();
        assert!(r.row(Metric::SpatialCorr, Some(Variable::Tmax)).is_none());
        assert!(r.value(Metric::Lag1Autocorr, Some(Variable::Tmax), "flat").is_none());
        assert!(r.notices.iter().any(|n| n.contains("single location")));
        assert!(r.notices.iter().any(|n| n.contains("undefined")));
        let short = field(wiggle, 1, 300, Source::Model);
        assert!(matches!(
            rmse_table(&obs, &[("short", &short)], Execution::Sequential),
            Err(Error::Alignment(_))
        ));
    }

    proptest! {
        #[test]
        fn wasserstein_is_a_metric(
            a in prop::collection::vec(-50.0f64..50.0, 1..40),
            b in prop::collection::vec(-50.0f64..50.0, 1..40),
            c in prop::collection::vec(-50.0f64..50.0, 1..40),
        ) {
            let ab = wasserstein_1d(&a, &b).unwrap();
            let ba = wasserstein_1d(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(wasserstein_1d(&a, &a).unwrap() < 1e-12);
            let ac = wasserstein_1d(&a, &c).unwrap();
            let cb = wasserstein_1d(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-9);
        }

        #[test]
        fn quantile_is_monotone_in_level(a in prop::collection::vec(-50.0f64..50.0, 1..40), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(quantile(&a, lo).unwrap() <= quantile(&a, hi).unwrap());
        }
    }
}
