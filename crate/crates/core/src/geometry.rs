//! Spatial domains, nearest-neighbour neighbourhoods and the well-separated
//! subset used to fit the empirical-Bayes prior.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use libm::sqrt;

use crate::error::{invalid, Error, Result};

/// An ordered list of locations in one or two dimensions.
///
/// Location order doubles as "id order" for every tie-break in this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDomain {
    ids: Vec<String>,
    coords: Vec<f64>,
    dim: usize,
}

impl SpatialDomain {
    pub fn new(ids: Vec<String>, coords: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != coords.len() {
            return Err(invalid!("{} ids but {} coordinate rows", ids.len(), coords.len()));
        }
        let dim = coords.first().map_or(1, Vec::len);
        if !(1..=2).contains(&dim) {
            return Err(invalid!("dimension must be 1 or 2, got {dim}"));
        }
        let mut flat = Vec::with_capacity(dim * coords.len());
        for (i, c) in coords.iter().enumerate() {
            if c.len() != dim {
                return Err(Error::Data(alloc::format!(
                    "location {} has {} coordinates, expected {dim}",
                    ids[i],
                    c.len()
                )));
            }
            if c.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(alloc::format!("location {} has a non-finite coordinate", ids[i])));
            }
            flat.extend_from_slice(c);
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(alloc::format!("duplicate location id {id}")));
            }
        }
        Ok(Self { ids, coords: flat, dim })
    }

    /// Points `0, spacing, 2·spacing, …` on a line, ids `"0"`, `"1"`, ….
    pub fn lattice_1d(n: usize, spacing: f64) -> Self {
        Self {
            ids: (0..n).map(|i| alloc::format!("{i}")).collect(),
            coords: (0..n).map(|i| i as f64 * spacing).collect(),
            dim: 1,
        }
    }

    /// An `n × n` grid of cell centres covering `[0, side]²`, row-major.
    pub fn grid_2d(n: usize, side: f64) -> Self {
        let step = side / n as f64;
        let mut ids = Vec::with_capacity(n * n);
        let mut coords = Vec::with_capacity(2 * n * n);
        for i in 0..n {
            for j in 0..n {
                ids.push(alloc::format!("{i}_{j}"));
                coords.push((j as f64 + 0.5) * step);
                coords.push((i as f64 + 0.5) * step);
            }
        }
        Self { ids, coords, dim: 2 }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn coords(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.coords(i), self.coords(j));
        let mut s = 0.0;
        for d in 0..self.dim {
            let t = a[d] - b[d];
            s += t * t;
        }
        sqrt(s)
    }

    /// Other locations sorted by distance from `i`, ties by index.
    fn sorted_others(&self, i: usize, take: usize) -> Vec<usize> {
        let mut others: Vec<(f64, usize)> =
            (0..self.len()).filter(|&j| j != i).map(|j| (self.dist(i, j), j)).collect();
        let key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if take < others.len() {
            others.select_nth_unstable_by(take, key);
            others.truncate(take);
        }
        others.sort_unstable_by(key);
        others.into_iter().map(|(_, j)| j).collect()
    }
}

/// Per-location neighbour lists, nearest first. A location is never its own
/// neighbour.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodMap {
    lists: Vec<Vec<usize>>,
}

impl NeighborhoodMap {
    pub fn from_lists(lists: Vec<Vec<usize>>) -> Result<Self> {
        let m = lists.len();
        for (s, l) in lists.iter().enumerate() {
            if l.is_empty() {
                return Err(invalid!("location {s} has an empty neighbourhood"));
            }
            if l.iter().any(|&v| v == s || v >= m) {
                return Err(invalid!("location {s} has an invalid neighbour"));
            }
        }
        Ok(Self { lists })
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn neighbors(&self, s: usize) -> &[usize] {
        &self.lists[s]
    }

    pub fn sizes(&self) -> impl Iterator<Item = usize> + '_ {
        self.lists.iter().map(Vec::len)
    }
}

/// The `kappa` nearest other locations of every location.
pub fn knn_neighborhoods(domain: &SpatialDomain, kappa: usize) -> Result<NeighborhoodMap> {
    let m = domain.len();
    if kappa == 0 || kappa >= m {
        return Err(invalid!("kappa must be in [1, {}], got {kappa}", m.saturating_sub(1)));
    }
    Ok(NeighborhoodMap { lists: (0..m).map(|i| domain.sorted_others(i, kappa)).collect() })
}

/// Bounds for the adaptive neighbourhood size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptiveRule {
    pub kappa_default: usize,
    pub kappa_min: usize,
    pub kappa_max: usize,
}

impl Default for AdaptiveRule {
    fn default() -> Self {
        Self { kappa_default: 4, kappa_min: 2, kappa_max: 7 }
    }
}

/// Sign-driven neighbourhood sizes: locations whose two nearest neighbours
/// all have positive primary statistics grow their neighbourhood while the
/// next neighbour stays positive, up to `kappa_max`; otherwise
/// `kappa_default` is used.
pub fn adaptive_neighborhoods(
    domain: &SpatialDomain,
    t2: &[f64],
    rule: AdaptiveRule,
) -> Result<NeighborhoodMap> {
    let m = domain.len();
    if t2.len() != m {
        return Err(invalid!("{} statistics for {m} locations", t2.len()));
    }
    let AdaptiveRule { kappa_default, kappa_min, kappa_max } = rule;
    if kappa_min == 0 || kappa_min > kappa_max || kappa_default == 0 {
        return Err(invalid!("inconsistent adaptive bounds {rule:?}"));
    }
    let cap = kappa_max.max(kappa_default).max(2);
    if cap >= m {
        return Err(invalid!("adaptive neighbourhoods need more than {cap} locations"));
    }
    let mut lists = Vec::with_capacity(m);
    for i in 0..m {
        let mut order = domain.sorted_others(i, cap);
        let kappa = if order[..2].iter().any(|&v| t2[v] < 0.0) {
            kappa_default
        } else {
            let run = order.iter().take_while(|&&v| t2[v] > 0.0).count().min(kappa_max);
            if run >= kappa_min {
                run
            } else {
                // a zero among the two nearest leaves the positive branch empty
                kappa_default
            }
        };
        order.truncate(kappa);
        lists.push(order);
    }
    Ok(NeighborhoodMap { lists })
}

/// Locations whose closed neighbourhoods are pairwise disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NpebSubset {
    pub members: Vec<usize>,
    /// Smallest distance between two members; infinite for a single member.
    pub min_separation: f64,
}

/// Greedy scan in location order, accepting a location when its closed
/// neighbourhood avoids every closed neighbourhood accepted so far.
pub fn select_npeb_subset(domain: &SpatialDomain, neighborhoods: &NeighborhoodMap) -> NpebSubset {
    let m = domain.len();
    let mut taken = alloc::vec![false; m];
    let mut members = Vec::new();
    for s in 0..m {
        let nb: &[usize] = if neighborhoods.len() == m { neighborhoods.neighbors(s) } else { &[] };
        if taken[s] || nb.iter().any(|&v| taken[v]) {
            continue;
        }
        taken[s] = true;
        for &v in nb {
            taken[v] = true;
        }
        members.push(s);
    }
    let mut min_separation = f64::INFINITY;
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            min_separation = min_separation.min(domain.dist(i, j));
        }
    }
    NpebSubset { members, min_separation }
}
