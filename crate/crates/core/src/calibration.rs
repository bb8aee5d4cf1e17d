//! Estimation, projection and calibration over months, locations and
//! variables.
//!
//! One conditional density model is fitted per (calendar month, location,
//! variable) on the stacked model and observed records, with the source
//! indicator as a feature. Projection evaluates each model's CDF at the raw
//! model value (indicator 0). Calibration walks the days in order and, within
//! a day, the locations in max-min order, inverting each conditional CDF with
//! indicator 1 and already calibrated conditioning values.
//!
//! PRCP is modelled as `log(0.0001 + p)` and mapped back with amounts below
//! 0.001 mm set to zero. Lag features always refer to the previous calendar
//! day, across month and year boundaries; the month only picks the model.

use std::fs;
use std::path::Path;

use chrono::Datelike;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{GridField, Source, Variable};
use crate::metrics::{self, MetricsReport};
use crate::nn::{Features, TrainReport};
use crate::par::{self, Execution};
use crate::qm::{self, QmConfig};
use crate::spqr::{SpqrConfig, SpqrModel};
use crate::vecchia::{self, Covariate, Feature, NeighborSets, Schemas, SpatialOrder};

pub const PRCP_OFFSET: f64 = 1e-4;
pub const ZERO_THRESHOLD: f64 = 1e-3;

const MANIFEST_FORMAT: &str = "spcde-calibration";
const MANIFEST_VERSION: u32 = 1;

/// `log(0.0001 + p)` for nonnegative precipitation.
pub fn prcp_forward(p: f64) -> Result<f64> {
    if !(p >= 0.0) {
        return Err(Error::Domain(format!("precipitation {p} is negative")));
    }
    Ok((PRCP_OFFSET + p).ln())
}

/// Inverse of [`prcp_forward`] with amounts below the gauge threshold set to 0.
pub fn prcp_inverse(z: f64) -> f64 {
    threshold_zero((z.exp() - PRCP_OFFSET).max(0.0))
}

/// Amounts below 0.001 mm count as dry.
pub fn threshold_zero(p: f64) -> f64 {
    if p < ZERO_THRESHOLD {
        0.0
    } else {
        p
    }
}

/// Hyperparameters of the whole correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub spqr: SpqrConfig,
    pub neighbors: usize,
    pub covariates: Vec<Covariate>,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            spqr: SpqrConfig::default(),
            neighbors: vecchia::DEFAULT_NEIGHBORS,
            covariates: Vec::new(),
            seed: 0,
        }
    }
}

/// Per-(month, location, variable) seed.
pub fn model_seed(seed: u64, month: u32, location: usize, var: Variable) -> u64 {
    let mut z = seed
        ^ (month as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (location as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (var as u64 + 1).wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// TMAX and transformed PRCP in the field's location-major layout.
#[derive(Debug, Clone, PartialEq)]
struct Values {
    n_days: usize,
    tmax: Vec<f64>,
    zprcp: Vec<f64>,
}

impl Values {
    fn from_field(f: &GridField) -> Self {
        let mut tmax = Vec::with_capacity(f.n_locations() * f.n_days());
        let mut zprcp = Vec::with_capacity(tmax.capacity());
        for l in 0..f.n_locations() {
            tmax.extend_from_slice(f.series(Variable::Tmax, l));
            // Fields are validated nonnegative.
            zprcp.extend(f.series(Variable::Prcp, l).iter().map(|&p| (PRCP_OFFSET + p).ln()));
        }
        Values {
            n_days: f.n_days(),
            tmax,
            zprcp,
        }
    }

    #[inline]
    fn get(&self, v: Variable, l: usize, t: usize) -> f64 {
        match v {
            Variable::Tmax => self.tmax[l * self.n_days + t],
            Variable::Prcp => self.zprcp[l * self.n_days + t],
        }
    }

    #[inline]
    fn set(&mut self, v: Variable, l: usize, t: usize, x: f64) {
        match v {
            Variable::Tmax => self.tmax[l * self.n_days + t] = x,
            Variable::Prcp => self.zprcp[l * self.n_days + t] = x,
        }
    }
}

/// Feature vector of `schema` at location `l`, day `t >= 1`.
fn fill_features(schema: &[Feature], l: usize, t: usize, indicator: f64, doy: u32, vals: &Values, out: &mut Vec<f64>) {
    out.clear();
    for f in schema {
        out.push(match *f {
            Feature::TmaxLag => vals.get(Variable::Tmax, l, t - 1),
            Feature::PrcpLag => vals.get(Variable::Prcp, l, t - 1),
            Feature::TmaxCurrent => vals.get(Variable::Tmax, l, t),
            Feature::TmaxNeighbor(j) => vals.get(Variable::Tmax, j, t),
            Feature::PrcpNeighbor(j) => vals.get(Variable::Prcp, j, t),
            Feature::Source => indicator,
            Feature::Covariate(c) => c.value(doy),
        });
    }
}

fn schema_for(schemas: &Schemas, l: usize, v: Variable) -> &[Feature] {
    match v {
        Variable::Tmax => &schemas.by_location[l].tmax,
        Variable::Prcp => &schemas.by_location[l].prcp,
    }
}

/// Training rows for one (month, location, variable): model rows first
/// (indicator 0), then observed rows (indicator 1). Day 0 has no lag and is
/// skipped. PRCP responses and features are log-transformed.
pub fn assemble_training_rows(
    obs: &GridField,
    model: &GridField,
    schemas: &Schemas,
    month: u32,
    l: usize,
    v: Variable,
) -> Result<(Features, Vec<f64>)> {
    obs.check_aligned(model)?;
    if !(1..=12).contains(&month) {
        return Err(Error::InvalidParameter(format!("month {month} outside 1..=12")));
    }
    if schemas.by_location.len() != obs.n_locations() || l >= obs.n_locations() {
        return Err(Error::Alignment("schemas do not match the grid".into()));
    }
    let sources = [(Values::from_field(model), 0.0), (Values::from_field(obs), 1.0)];
    Ok(rows_from_values(&sources, obs, schemas, month, l, v))
}

fn rows_from_values(
    sources: &[(Values, f64)],
    calendar: &GridField,
    schemas: &Schemas,
    month: u32,
    l: usize,
    v: Variable,
) -> (Features, Vec<f64>) {
    let schema = schema_for(schemas, l, v);
    let days: Vec<usize> = calendar.days_in_month(month).into_iter().filter(|&t| t >= 1).collect();
    let mut data = Vec::with_capacity(sources.len() * days.len() * schema.len());
    let mut responses = Vec::with_capacity(sources.len() * days.len());
    let mut row = Vec::with_capacity(schema.len());
    for (vals, indicator) in sources {
        for &t in &days {
            fill_features(schema, l, t, *indicator, calendar.dates()[t].ordinal(), vals, &mut row);
            data.extend_from_slice(&row);
            responses.push(vals.get(v, l, t));
        }
    }
    let n = responses.len();
    (
        Features::new(n, schema.len(), data).expect("row width matches schema"),
        responses,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDiagnostics {
    pub month: u32,
    pub location: usize,
    pub variable: Variable,
    pub n_rows: usize,
    pub train: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridLocation {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

/// Fitted correction: ordering, neighbor sets and `12 * n * 2` models.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModel {
    locations: Vec<GridLocation>,
    order: SpatialOrder,
    neighbors: NeighborSets,
    schemas: Schemas,
    hyper: Hyper,
    models: Vec<SpqrModel>,
    diagnostics: Vec<ModelDiagnostics>,
    fingerprints: Vec<String>,
}

fn model_index(n: usize, month: u32, l: usize, v: Variable) -> usize {
    ((month as usize - 1) * n + l) * 2 + v as usize
}

impl CalibrationModel {
    pub fn order(&self) -> &SpatialOrder {
        &self.order
    }

    pub fn neighbors(&self) -> &NeighborSets {
        &self.neighbors
    }

    pub fn schemas(&self) -> &Schemas {
        &self.schemas
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn n_models(&self) -> usize {
        self.models.len()
    }

    pub fn model(&self, month: u32, l: usize, v: Variable) -> &SpqrModel {
        &self.models[model_index(self.locations.len(), month, l, v)]
    }

    pub fn diagnostics(&self) -> &[ModelDiagnostics] {
        &self.diagnostics
    }

    pub fn fingerprints(&self) -> &[String] {
        &self.fingerprints
    }

    fn check_grid(&self, f: &GridField) -> Result<()> {
        let same = f.n_locations() == self.locations.len()
            && f
                .locations()
                .iter()
                .zip(&self.locations)
                .all(|(a, b)| a.id == b.id && a.x == b.x && a.y == b.y);
        if !same {
            return Err(Error::Alignment("field grid differs from the calibration grid".into()));
        }
        Ok(())
    }

    /// Writes `manifest.json` plus one JSON file per conditional model.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let models_dir = dir.join("models");
        fs::create_dir_all(&models_dir)?;
        let n = self.locations.len();
        let mut files = Vec::with_capacity(self.models.len());
        for month in 1..=12u32 {
            for l in 0..n {
                for v in Variable::ALL {
                    let name = format!("m{month:02}_l{l:03}_{}.json", v.name().to_lowercase());
                    fs::write(models_dir.join(&name), self.model(month, l, v).to_json()?)?;
                    files.push(format!("models/{name}"));
                }
            }
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            locations: self.locations.clone(),
            order: self.order.clone(),
            neighbors: self.neighbors.clone(),
            schemas: self.schemas.clone(),
            prcp_offset: PRCP_OFFSET,
            zero_threshold: ZERO_THRESHOLD,
            hyper: self.hyper.clone(),
            data_fingerprints: self.fingerprints.clone(),
            model_files: files,
            diagnostics: self.diagnostics.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported calibration manifest {} v{}",
                manifest.format, manifest.version
            )));
        }
        if manifest.prcp_offset != PRCP_OFFSET || manifest.zero_threshold != ZERO_THRESHOLD {
            return Err(Error::InvalidInput("manifest uses different PRCP transform constants".into()));
        }
        let n = manifest.locations.len();
        if manifest.model_files.len() != 24 * n {
            return Err(Error::InvalidInput(format!(
                "expected {} model files, manifest lists {}",
                24 * n,
                manifest.model_files.len()
            )));
        }
        let models = manifest
            .model_files
            .iter()
            .map(|f| SpqrModel::from_json(&fs::read_to_string(dir.join(f))?))
            .collect::<Result<Vec<_>>>()?;
        Ok(CalibrationModel {
            locations: manifest.locations,
            order: manifest.order,
            neighbors: manifest.neighbors,
            schemas: manifest.schemas,
            hyper: manifest.hyper,
            models,
            diagnostics: manifest.diagnostics,
            fingerprints: manifest.data_fingerprints,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    locations: Vec<GridLocation>,
    order: SpatialOrder,
    neighbors: NeighborSets,
    schemas: Schemas,
    prcp_offset: f64,
    zero_threshold: f64,
    hyper: Hyper,
    data_fingerprints: Vec<String>,
    model_files: Vec<String>,
    diagnostics: Vec<ModelDiagnostics>,
}

/// Fits every (month, location, variable) model. Fits are independent and
/// run on the rayon pool when `exec` allows it.
pub fn fit_calibration(obs: &GridField, model_hist: &GridField, hyper: &Hyper, exec: Execution) -> Result<CalibrationModel> {
    obs.check_aligned(model_hist)?;
    let n = obs.n_locations();
    let order = vecchia::maxmin_order(&obs.coords())?;
    let neighbors = vecchia::neighbor_sets(&order, hyper.neighbors)?;
    let schemas = vecchia::build_schemas(&order, &neighbors, &hyper.covariates);
    let ids: Vec<String> = obs.locations().iter().map(|l| l.id.clone()).collect();
    let sources = [(Values::from_field(model_hist), 0.0), (Values::from_field(obs), 1.0)];

    let tasks: Vec<(u32, usize, Variable)> = (1..=12u32)
        .flat_map(|m| (0..n).flat_map(move |l| Variable::ALL.map(|v| (m, l, v))))
        .collect();
    debug_assert!(tasks
        .iter()
        .enumerate()
        .all(|(i, &(m, l, v))| model_index(n, m, l, v) == i));

    let results = par::map_slice(exec, &tasks, |&(month, l, v)| {
        let (features, responses) = rows_from_values(&sources, obs, &schemas, month, l, v);
        // Both sources of a day train and validate together.
        let days = responses.len() / sources.len();
        let groups: Vec<usize> = (0..responses.len()).map(|i| i % days).collect();
        let names = schema_for(&schemas, l, v).iter().map(|f| f.name(&ids)).collect();
        let mut cfg = hyper.spqr.clone();
        cfg.train.seed = model_seed(hyper.seed, month, l, v);
        cfg.neutral_inputs.push(Feature::Source.name(&ids));
        let n_rows = responses.len();
        SpqrModel::fit_grouped(&features, &responses, &groups, names, &cfg).map(|m| {
            let diag = ModelDiagnostics {
                month,
                location: l,
                variable: v,
                n_rows,
                train: m.report().clone(),
            };
            (m, diag)
        })
    });

    let mut models = Vec::with_capacity(tasks.len());
    let mut diagnostics = Vec::with_capacity(tasks.len());
    let mut failures = Vec::new();
    for (res, &(month, l, v)) in results.into_iter().zip(&tasks) {
        match res {
            Ok((m, d)) => {
                models.push(m);
                diagnostics.push(d);
            }
            Err(e) => failures.push(format!("month {month} location {} {}: {e}", ids[l], v.name())),
        }
    }
    if !failures.is_empty() {
        for f in &failures {
            log::error!("fit failed: {f}");
        }
        return Err(Error::FitFailures {
            failed: failures.len(),
            total: tasks.len(),
            summary: failures.join("; "),
        });
    }
    Ok(CalibrationModel {
        locations: obs
            .locations()
            .iter()
            .map(|l| GridLocation {
                id: l.id.clone(),
                x: l.x,
                y: l.y,
            })
            .collect(),
        order,
        neighbors,
        schemas,
        hyper: hyper.clone(),
        models,
        diagnostics,
        fingerprints: vec![obs.fingerprint(), model_hist.fingerprint()],
    })
}

/// Uniform scores of a model field; day 0 has no lag and holds NaN.
#[derive(Debug, Clone)]
pub struct UField {
    n_locations: usize,
    n_days: usize,
    tmax: Vec<f64>,
    prcp: Vec<f64>,
    /// Model values that fell outside their conditional model's range.
    pub clamped: usize,
}

/// Bitwise equality, so the NaN placeholders compare equal.
impl PartialEq for UField {
    fn eq(&self, other: &Self) -> bool {
        let same = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        self.n_locations == other.n_locations
            && self.n_days == other.n_days
            && self.clamped == other.clamped
            && same(&self.tmax, &other.tmax)
            && same(&self.prcp, &other.prcp)
    }
}

impl UField {
    pub fn get(&self, v: Variable, l: usize, t: usize) -> f64 {
        match v {
            Variable::Tmax => self.tmax[l * self.n_days + t],
            Variable::Prcp => self.prcp[l * self.n_days + t],
        }
    }

    pub fn n_days(&self) -> usize {
        self.n_days
    }

    pub fn n_locations(&self) -> usize {
        self.n_locations
    }

    /// All defined scores of one variable.
    pub fn values(&self, v: Variable) -> Vec<f64> {
        let src = match v {
            Variable::Tmax => &self.tmax,
            Variable::Prcp => &self.prcp,
        };
        src.iter().copied().filter(|u| !u.is_nan()).collect()
    }
}

/// Projection: `u = F(y | raw model conditioning values, indicator 0)`.
pub fn project(cmodel: &CalibrationModel, gcm: &GridField, exec: Execution) -> Result<UField> {
    cmodel.check_grid(gcm)?;
    if gcm.source() != Source::Model {
        return Err(Error::InvalidInput(format!(
            "projection expects a model-source field, got {}",
            gcm.source().label()
        )));
    }
    let n = gcm.n_locations();
    let nd = gcm.n_days();
    let vals = Values::from_field(gcm);
    let tasks: Vec<(usize, Variable)> = (0..n).flat_map(|l| Variable::ALL.map(|v| (l, v))).collect();
    let series = par::map_slice(exec, &tasks, |&(l, v)| -> Result<(Vec<f64>, usize)> {
        let schema = schema_for(&cmodel.schemas, l, v);
        let mut out = vec![f64::NAN; nd];
        let mut row = Vec::with_capacity(schema.len());
        let mut clamped = 0;
        for (t, u) in out.iter_mut().enumerate().skip(1) {
            fill_features(schema, l, t, 0.0, gcm.dates()[t].ordinal(), &vals, &mut row);
            let m = cmodel.model(gcm.month(t), l, v);
            let y = vals.get(v, l, t);
            if !m.scaler().contains(y) {
                clamped += 1;
            }
            let w = m.weights(&row)?;
            *u = m.cdf_with(&w, y)?;
        }
        Ok((out, clamped))
    });
    let mut tmax = vec![f64::NAN; n * nd];
    let mut prcp = vec![f64::NAN; n * nd];
    let mut clamped = 0;
    for (res, &(l, v)) in series.into_iter().zip(&tasks) {
        let (s, c) = res?;
        clamped += c;
        let dst = match v {
            Variable::Tmax => &mut tmax,
            Variable::Prcp => &mut prcp,
        };
        dst[l * nd..(l + 1) * nd].copy_from_slice(&s);
    }
    if clamped > 0 {
        log::warn!("{clamped} model values fell outside the padded training range and were clamped");
    }
    Ok(UField {
        n_locations: n,
        n_days: nd,
        tmax,
        prcp,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CalibrateOptions {
    /// Leave PRCP at its raw model values.
    pub skip_prcp: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibrated {
    pub field: GridField,
    /// Day 0 only seeds the lags and holds raw model values.
    pub first_day_uncalibrated: bool,
}

/// Calibration of a projected field. Day 0 is the boundary day: its raw
/// model values seed the lag features of day 1 and are copied to the output.
pub fn calibrate(cmodel: &CalibrationModel, u: &UField, gcm: &GridField) -> Result<Calibrated> {
    calibrate_with(cmodel, u, gcm, CalibrateOptions::default())
}

pub fn calibrate_with(cmodel: &CalibrationModel, u: &UField, gcm: &GridField, opts: CalibrateOptions) -> Result<Calibrated> {
    check_u(cmodel, u, gcm)?;
    let mut state = Values::from_field(gcm);
    run_days(cmodel, u, gcm, &mut state, 1, opts)?;
    finish(gcm, &state, opts)
}

/// Recomputes calibration from day `start` onward, taking the calibrated
/// state of earlier days from `previous`.
pub fn calibrate_resume(
    cmodel: &CalibrationModel,
    u: &UField,
    gcm: &GridField,
    previous: &GridField,
    start: usize,
) -> Result<Calibrated> {
    check_u(cmodel, u, gcm)?;
    gcm.check_aligned(previous)?;
    if start == 0 || start > gcm.n_days() {
        return Err(Error::InvalidParameter(format!("resume day {start} outside 1..={}", gcm.n_days())));
    }
    let mut state = Values::from_field(previous);
    run_days(cmodel, u, gcm, &mut state, start, CalibrateOptions::default())?;
    finish(gcm, &state, CalibrateOptions::default())
}

fn check_u(cmodel: &CalibrationModel, u: &UField, gcm: &GridField) -> Result<()> {
    cmodel.check_grid(gcm)?;
    if u.n_days != gcm.n_days() || u.n_locations != gcm.n_locations() {
        return Err(Error::Alignment(format!(
            "scores cover {} locations x {} days, field has {} x {}",
            u.n_locations,
            u.n_days,
            gcm.n_locations(),
            gcm.n_days()
        )));
    }
    Ok(())
}

/// Sequential pass: days in order, locations in max-min order, TMAX before
/// PRCP at each location. `state` holds calibrated values for days before
/// `start` and is overwritten from `start` on.
fn run_days(
    cmodel: &CalibrationModel,
    u: &UField,
    gcm: &GridField,
    state: &mut Values,
    start: usize,
    opts: CalibrateOptions,
) -> Result<()> {
    let raw = Values::from_field(gcm);
    let mut row = Vec::new();
    let vars: &[Variable] = if opts.skip_prcp {
        &[Variable::Tmax]
    } else {
        &Variable::ALL
    };
    for t in start..gcm.n_days() {
        let month = gcm.month(t);
        let doy = gcm.dates()[t].ordinal();
        for &l in cmodel.order.permutation() {
            for &v in vars {
                let score = u.get(v, l, t);
                if score.is_nan() {
                    return Err(Error::Alignment(format!("missing score at location {l} day {t}")));
                }
                let schema = schema_for(&cmodel.schemas, l, v);
                fill_features(schema, l, t, 1.0, doy, state, &mut row);
                let m = cmodel.model(month, l, v);
                let w = m.weights(&row)?;
                let y = m.quantile_with(&w, score.clamp(0.0, 1.0))?;
                let stored = match v {
                    Variable::Tmax => y,
                    Variable::Prcp => (PRCP_OFFSET + prcp_inverse(y)).ln(),
                };
                state.set(v, l, t, stored);
            }
            if opts.skip_prcp {
                state.set(Variable::Prcp, l, t, raw.get(Variable::Prcp, l, t));
            }
        }
    }
    Ok(())
}

fn finish(gcm: &GridField, state: &Values, opts: CalibrateOptions) -> Result<Calibrated> {
    let n = gcm.n_locations();
    let nd = gcm.n_days();
    let mut tmax = Vec::with_capacity(n * nd);
    let mut prcp = Vec::with_capacity(n * nd);
    for l in 0..n {
        tmax.extend_from_slice(&state.tmax[l * nd..(l + 1) * nd]);
        let raw = gcm.series(Variable::Prcp, l);
        for t in 0..nd {
            let p = if t == 0 || opts.skip_prcp {
                raw[t]
            } else {
                prcp_inverse(state.zprcp[l * nd + t])
            };
            prcp.push(p);
        }
    }
    Ok(Calibrated {
        field: GridField::new(gcm.locations().to_vec(), gcm.dates().to_vec(), Source::Calibrated, tmax, prcp)?,
        first_day_uncalibrated: true,
    })
}

/// Projects and calibrates the dates `start..=end` of a model field. The day
/// before `start` is used as the boundary day when the field has it;
/// otherwise `start` itself is the boundary and stays uncalibrated.
pub fn calibrate_span(
    cmodel: &CalibrationModel,
    model: &GridField,
    start: chrono::NaiveDate,
    end: chrono::NaiveDate,
    exec: Execution,
) -> Result<Calibrated> {
    let (a, b) = match (model.index_of(start), model.index_of(end)) {
        (Some(a), Some(b)) if a < b => (a, b),
        _ => {
            return Err(Error::Alignment(format!(
                "span {start}..{end} is not a multi-day span inside the model field"
            )))
        }
    };
    let boundary = a.saturating_sub(1);
    let sub = model.slice_days(boundary, b + 1)?;
    let u = project(cmodel, &sub, exec)?;
    let mut cal = calibrate(cmodel, &u, &sub)?;
    if boundary < a {
        let nd = cal.field.n_days();
        cal.field = cal.field.slice_days(1, nd)?;
        cal.first_day_uncalibrated = false;
    }
    Ok(cal)
}

/// Everything produced by one train/apply/evaluate run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: CalibrationModel,
    pub calibrated: Calibrated,
    pub qm: Option<GridField>,
    pub report: Option<MetricsReport>,
}

/// Fits on the historical pair, corrects `model_future` (day 0 is the
/// boundary day) and, when `obs_future` is given, evaluates the corrected
/// field, the quantile-mapping baseline and the raw model against it on
/// days 1.. .
pub fn run_pipeline(
    obs_hist: &GridField,
    model_hist: &GridField,
    model_future: &GridField,
    obs_future: Option<&GridField>,
    hyper: &Hyper,
    qm_config: Option<&QmConfig>,
    exec: Execution,
) -> Result<PipelineOutput> {
    obs_hist.check_aligned(model_hist)?;
    obs_hist.check_same_grid(model_future)?;
    if let Some(o) = obs_future {
        o.check_aligned(model_future)?;
    }
    if model_future.n_days() < 2 {
        return Err(Error::Alignment("future field needs a boundary day plus at least one day".into()));
    }
    let model = fit_calibration(obs_hist, model_hist, hyper, exec)?;
    let u = project(&model, model_future, exec)?;
    let calibrated = calibrate(&model, &u, model_future)?;

    let qm = match qm_config {
        Some(cfg) => {
            let maps = qm::fit_qm_field(obs_hist, model_hist, cfg)?;
            Some(qm::apply_qm_field(&maps, model_future)?)
        }
        None => None,
    };

    let report = match obs_future {
        Some(obs) => {
            let nd = model_future.n_days();
            let eval_obs = obs.slice_days(1, nd)?;
            let cal = calibrated.field.slice_days(1, nd)?;
            let raw = model_future.slice_days(1, nd)?;
            let mut methods = vec![("SPCDE".to_string(), cal)];
            if let Some(q) = &qm {
                methods.push(("QM".to_string(), q.slice_days(1, nd)?));
            }
            methods.push(("Model".to_string(), raw));
            let refs: Vec<(&str, &GridField)> = methods.iter().map(|(n, f)| (n.as_str(), f)).collect();
            Some(metrics::rmse_table(&eval_obs, &refs, exec)?)
        }
        None => None,
    };

    Ok(PipelineOutput {
        model,
        calibrated,
        qm,
        report,
    })
}

/// Train and test spans over one pair of aligned fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Spans {
    pub train: (chrono::NaiveDate, chrono::NaiveDate),
    pub test: (chrono::NaiveDate, chrono::NaiveDate),
}

/// Splits aligned observed/model fields by `spans` and runs the pipeline.
/// When the day before the test span exists it becomes the boundary day, so
/// the whole test span is corrected and evaluated; the boundary day is
/// dropped from the returned fields.
pub fn run_spans(
    obs: &GridField,
    model: &GridField,
    spans: &Spans,
    hyper: &Hyper,
    qm_config: Option<&QmConfig>,
    exec: Execution,
) -> Result<PipelineOutput> {
    obs.check_aligned(model)?;
    let obs_hist = obs.slice_dates(spans.train.0, spans.train.1)?;
    let model_hist = model.slice_dates(spans.train.0, spans.train.1)?;
    let test_start = obs
        .index_of(spans.test.0)
        .ok_or_else(|| Error::Alignment(format!("test start {} not in data", spans.test.0)))?;
    let test_end = obs
        .index_of(spans.test.1)
        .ok_or_else(|| Error::Alignment(format!("test end {} not in data", spans.test.1)))?;
    if test_end <= test_start {
        return Err(Error::Alignment("test span must cover at least two days".into()));
    }
    let boundary = test_start.saturating_sub(1);
    let model_future = model.slice_days(boundary, test_end + 1)?;
    let obs_future = obs.slice_days(boundary, test_end + 1)?;
    let mut out = run_pipeline(
        &obs_hist,
        &model_hist,
        &model_future,
        Some(&obs_future),
        hyper,
        qm_config,
        exec,
    )?;
    if boundary < test_start {
        let nd = out.calibrated.field.n_days();
        out.calibrated.field = out.calibrated.field.slice_days(1, nd)?;
        out.calibrated.first_day_uncalibrated = false;
        if let Some(q) = out.qm.take() {
            out.qm = Some(q.slice_days(1, nd)?);
        }
    }
    Ok(out)
}
