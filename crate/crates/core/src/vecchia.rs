//! Max-min location ordering, nearest-earlier neighbor sets and the feature
//! layouts of the TMAX and PRCP conditionals.
//!
//! TMAX at a location conditions on its own lag, current TMAX at its
//! neighbors, the source indicator and covariates. PRCP sees its own lag,
//! lagged and current TMAX at the location, and current TMAX and PRCP at the
//! neighbors. TMAX never conditions on PRCP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default neighbor count.
pub const DEFAULT_NEIGHBORS: usize = 10;

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialOrder {
    /// `perm[p]` is the location index at ordered position `p`.
    perm: Vec<usize>,
    coords: Vec<[f64; 2]>,
}

impl SpatialOrder {
    /// Wraps an explicit permutation (validated).
    pub fn from_permutation(perm: Vec<usize>, coords: Vec<[f64; 2]>) -> Result<Self> {
        let n = coords.len();
        let mut seen = vec![false; n];
        if perm.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: perm.len(),
            });
        }
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(Error::InvalidInput(format!("{perm:?} is not a permutation of 0..{n}")));
            }
            seen[p] = true;
        }
        Ok(SpatialOrder { perm, coords })
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Ordered position of each location.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.perm.len()];
        for (p, &l) in self.perm.iter().enumerate() {
            pos[l] = p;
        }
        pos
    }
}

/// Greedy max-min ordering. Starts at the location nearest the centroid;
/// every later pick maximizes the minimum distance to those already chosen.
/// Ties go to the lowest location index.
pub fn maxmin_order(coords: &[[f64; 2]]) -> Result<SpatialOrder> {
    let n = coords.len();
    if n == 0 {
        return Err(Error::InvalidInput("no locations to order".into()));
    }
    for i in 0..n {
        if coords[i].iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput(format!("location {i} has non-finite coordinates")));
        }
        for j in 0..i {
            if coords[i] == coords[j] {
                return Err(Error::InvalidInput(format!(
                    "locations {j} and {i} share coordinates {:?}",
                    coords[i]
                )));
            }
        }
    }
    let centroid = [
        coords.iter().map(|c| c[0]).sum::<f64>() / n as f64,
        coords.iter().map(|c| c[1]).sum::<f64>() / n as f64,
    ];
    let mut first = 0;
    for i in 1..n {
        if dist2(coords[i], centroid) < dist2(coords[first], centroid) {
            first = i;
        }
    }
    let mut chosen = vec![false; n];
    let mut min_d: Vec<f64> = coords.iter().map(|&c| dist2(c, coords[first])).collect();
    chosen[first] = true;
    let mut perm = Vec::with_capacity(n);
    perm.push(first);
    while perm.len() < n {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            if best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("unchosen location remains");
        chosen[b] = true;
        perm.push(b);
        for i in 0..n {
            min_d[i] = min_d[i].min(dist2(coords[i], coords[b]));
        }
    }
    Ok(SpatialOrder {
        perm,
        coords: coords.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSets {
    m: usize,
    /// `sets[p]` holds location indices of the neighbors of the location at
    /// ordered position `p`, nearest first.
    sets: Vec<Vec<usize>>,
}

impl NeighborSets {
    pub fn m(&self) -> usize {
        self.m
    }

    /// Neighbors of the location at ordered position `p`.
    pub fn at_position(&self, p: usize) -> &[usize] {
        &self.sets[p]
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// For each ordered position, the `min(p, m)` earlier locations nearest in
/// Euclidean distance; equal distances favor the earlier position.
pub fn neighbor_sets(order: &SpatialOrder, m: usize) -> Result<NeighborSets> {
    if m == 0 {
        return Err(Error::InvalidParameter("neighbor count must be at least 1".into()));
    }
    let coords = order.coords();
    let sets = (0..order.len())
        .map(|p| {
            let here = coords[order.perm[p]];
            let mut cand: Vec<(f64, usize)> = (0..p).map(|q| (dist2(here, coords[order.perm[q]]), q)).collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.into_iter().take(m).map(|(_, q)| order.perm[q]).collect()
        })
        .collect();
    Ok(NeighborSets { m, sets })
}

/// Extra exogenous covariates derived from the calendar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    DoySin,
    DoyCos,
}

impl Covariate {
    pub fn parse(s: &str) -> Option<Covariate> {
        match s {
            "doy_sin" => Some(Covariate::DoySin),
            "doy_cos" => Some(Covariate::DoyCos),
            _ => None,
        }
    }

    /// Value on a day of year (1-based).
    pub fn value(self, day_of_year: u32) -> f64 {
        let angle = 2.0 * std::f64::consts::PI * (day_of_year as f64 - 1.0) / 365.25;
        match self {
            Covariate::DoySin => angle.sin(),
            Covariate::DoyCos => angle.cos(),
        }
    }
}

/// One input of a conditional model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "location", rename_all = "snake_case")]
pub enum Feature {
    TmaxLag,
    PrcpLag,
    TmaxCurrent,
    TmaxNeighbor(usize),
    PrcpNeighbor(usize),
    Source,
    Covariate(Covariate),
}

impl Feature {
    pub fn name(&self, ids: &[String]) -> String {
        match self {
            Feature::TmaxLag => "tmax_lag1".into(),
            Feature::PrcpLag => "prcp_lag1".into(),
            Feature::TmaxCurrent => "tmax_current".into(),
            Feature::TmaxNeighbor(l) => format!("tmax_nb:{}", ids[*l]),
            Feature::PrcpNeighbor(l) => format!("prcp_nb:{}", ids[*l]),
            Feature::Source => "source".into(),
            Feature::Covariate(Covariate::DoySin) => "doy_sin".into(),
            Feature::Covariate(Covariate::DoyCos) => "doy_cos".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationSchemas {
    pub tmax: Vec<Feature>,
    pub prcp: Vec<Feature>,
}

/// Feature layouts for every location, indexed by location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schemas {
    pub by_location: Vec<LocationSchemas>,
}

pub fn build_schemas(order: &SpatialOrder, neighbors: &NeighborSets, covariates: &[Covariate]) -> Schemas {
    let mut by_location = vec![
        LocationSchemas {
            tmax: Vec::new(),
            prcp: Vec::new(),
        };
        order.len()
    ];
    for (p, &l) in order.permutation().iter().enumerate() {
        let nb = neighbors.at_position(p);
        let mut tmax = vec![Feature::TmaxLag];
        tmax.extend(nb.iter().map(|&j| Feature::TmaxNeighbor(j)));
        tmax.push(Feature::Source);
        tmax.extend(covariates.iter().map(|&c| Feature::Covariate(c)));

        let mut prcp = vec![Feature::PrcpLag, Feature::TmaxLag, Feature::TmaxCurrent];
        prcp.extend(nb.iter().map(|&j| Feature::TmaxNeighbor(j)));
        prcp.extend(nb.iter().map(|&j| Feature::PrcpNeighbor(j)));
        prcp.push(Feature::Source);
        prcp.extend(covariates.iter().map(|&c| Feature::Covariate(c)));

        by_location[l] = LocationSchemas { tmax, prcp };
    }
    Schemas { by_location }
}
