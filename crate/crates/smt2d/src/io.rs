//! File formats: locations, observations, kernels, rejections, decisions,
//! simulation summaries and flat key-value configuration files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use smt2d_core::covmodel::{KernelFamily, KernelSpec};
use smt2d_core::geometry::SpatialDomain;
use smt2d_core::simlab::{ReplicateRecord, SummaryRow};
use smt2d_core::statbuild::{Panel, StatPair};
use smt2d_core::testing::DecisionResult;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Open { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}, row {row}, column '{column}': {message}")]
    Schema { path: String, row: usize, column: String, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

pub type IoResult<T> = Result<T, IoError>;

fn disp(path: &Path) -> String {
    path.display().to_string()
}

fn invalid(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Invalid { path: disp(path), message: message.into() }
}

/// Header plus records of a CSV file, with whitespace trimmed.
struct Table {
    path: String,
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> IoResult<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|source| IoError::Csv { path: disp(path), source })?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|source| IoError::Csv { path: disp(path), source })?
            .iter()
            .map(|h| h.to_ascii_lowercase())
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec.map_err(|source| IoError::Csv { path: disp(path), source })?);
        }
        if headers.iter().all(|h| h.is_empty()) || rows.is_empty() {
            return Err(IoError::Invalid { path: disp(path), message: "no data rows".into() });
        }
        Ok(Self { path: disp(path), headers, rows })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn require(&self, name: &str) -> IoResult<usize> {
        self.col(name).ok_or_else(|| IoError::Schema {
            path: self.path.clone(),
            row: 1,
            column: name.into(),
            message: format!("missing column (found: {})", self.headers.join(",")),
        })
    }

    /// Data rows are numbered from 2, the header being row 1.
    fn text(&self, i: usize, c: usize, name: &str) -> IoResult<&str> {
        match self.rows[i].get(c) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(IoError::Schema { path: self.path.clone(), row: i + 2, column: name.into(), message: "empty field".into() }),
        }
    }

    fn num(&self, i: usize, c: usize, name: &str) -> IoResult<f64> {
        let t = self.text(i, c, name)?;
        t.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| IoError::Schema {
            path: self.path.clone(),
            row: i + 2,
            column: name.into(),
            message: format!("'{t}' is not a finite number"),
        })
    }

    fn schema(&self, row: usize, column: &str, message: impl Into<String>) -> IoError {
        IoError::Schema { path: self.path.clone(), row, column: column.into(), message: message.into() }
    }
}

/// Locations with optional group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Locations {
    pub domain: SpatialDomain,
    /// Group index per location, numbered by first appearance.
    pub groups: Option<Vec<usize>>,
    pub group_names: Vec<String>,
}

/// Read `id,x[,y]` with an optional group column.
pub fn read_locations(path: &Path, group_column: &str) -> IoResult<Locations> {
    let t = Table::read(path)?;
    let id = t.require("id")?;
    let x = t.require("x")?;
    let y = t.col("y");
    let gcol = t.col(&group_column.to_ascii_lowercase());
    let mut ids = Vec::with_capacity(t.rows.len());
    let mut coords = Vec::with_capacity(t.rows.len());
    let mut names: Vec<String> = Vec::new();
    let mut groups = Vec::new();
    for i in 0..t.rows.len() {
        ids.push(t.text(i, id, "id")?.to_string());
        let mut c = vec![t.num(i, x, "x")?];
        if let Some(y) = y {
            c.push(t.num(i, y, "y")?);
        }
        coords.push(c);
        if let Some(g) = gcol {
            let label = t.text(i, g, group_column)?;
            let k = names.iter().position(|n| n == label).unwrap_or_else(|| {
                names.push(label.to_string());
                names.len() - 1
            });
            groups.push(k);
        }
    }
    let domain = SpatialDomain::new(ids, coords).map_err(|e| invalid(path, e.to_string()))?;
    Ok(Locations { domain, groups: gcol.map(|_| groups), group_names: names })
}

/// Observation files in one of three layouts.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationData {
    /// `id,value`: one value per location.
    Direct(Vec<f64>),
    /// `id,rep,value`: `rows[i][s]` is replicate `i` at location `s`.
    Replicated(Vec<Vec<f64>>),
    /// `id,t,value`: a time series per location.
    Panel(Panel),
}

fn location_index(t: &Table, domain: &SpatialDomain, i: usize, c: usize) -> IoResult<usize> {
    let id = t.text(i, c, "id")?;
    domain.index_of(id).ok_or_else(|| t.schema(i + 2, "id", format!("unknown location '{id}'")))
}

/// Read observations aligned to `domain`. Every location needs a value for
/// every replicate or time point.
pub fn read_observations(path: &Path, domain: &SpatialDomain) -> IoResult<ObservationData> {
    let t = Table::read(path)?;
    let id = t.require("id")?;
    let value = t.require("value")?;
    let m = domain.len();
    let key_col = if let Some(c) = t.col("t") {
        Some(("t", c))
    } else {
        t.col("rep").map(|c| ("rep", c))
    };
    let Some((key_name, kc)) = key_col else {
        let mut x = vec![None; m];
        for i in 0..t.rows.len() {
            let s = location_index(&t, domain, i, id)?;
            if x[s].replace(t.num(i, value, "value")?).is_some() {
                return Err(t.schema(i + 2, "id", format!("duplicate location '{}'", domain.id(s))));
            }
        }
        let missing: Vec<&str> = (0..m).filter(|&s| x[s].is_none()).map(|s| domain.id(s)).collect();
        if !missing.is_empty() {
            return Err(invalid(path, format!("no value for location(s) {}", missing.join(","))));
        }
        return Ok(ObservationData::Direct(x.into_iter().map(Option::unwrap).collect()));
    };
    let mut keys: Vec<f64> = Vec::new();
    let mut cells: BTreeMap<(usize, u64), f64> = BTreeMap::new();
    for i in 0..t.rows.len() {
        let s = location_index(&t, domain, i, id)?;
        let k = t.num(i, kc, key_name)?;
        if !keys.contains(&k) {
            keys.push(k);
        }
        if cells.insert((s, k.to_bits()), t.num(i, value, "value")?).is_some() {
            return Err(t.schema(i + 2, key_name, format!("duplicate entry for location '{}'", domain.id(s))));
        }
    }
    keys.sort_by(f64::total_cmp);
    let mut values = vec![Vec::with_capacity(keys.len()); m];
    for (s, row) in values.iter_mut().enumerate() {
        for k in &keys {
            let v = cells.get(&(s, k.to_bits())).ok_or_else(|| {
                invalid(path, format!("location '{}' has no value at {key_name} = {k}", domain.id(s)))
            })?;
            row.push(*v);
        }
    }
    if key_name == "t" {
        Ok(ObservationData::Panel(Panel { times: keys, values }))
    } else {
        let rows = (0..keys.len()).map(|r| (0..m).map(|s| values[s][r]).collect()).collect();
        Ok(ObservationData::Replicated(rows))
    }
}

/// Flat `key = value` lines; `#` starts a comment.
pub fn read_key_values(path: &Path) -> IoResult<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Open { path: disp(path), source })?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid(path, format!("line {}: expected key = value", n + 1)))?;
        out.insert(k.trim().replace('_', "-").to_ascii_lowercase(), v.trim().to_string());
    }
    Ok(out)
}

pub fn write_kernel(path: &Path, spec: &KernelSpec) -> IoResult<()> {
    let mut text = format!("family = {}\n", spec.family.name());
    if let KernelFamily::NuggetMix { shape } = spec.family {
        text.push_str(&format!("shape = {shape:?}\n"));
    }
    if let KernelFamily::Matern(nu) = spec.family {
        text.push_str(&format!("shape = {:?}\n", nu.value()));
    }
    text.push_str(&format!("r = {:?}\nrange = {:?}\nscale = {:?}\n", spec.r, spec.range, spec.scale));
    fs::write(path, text).map_err(|source| IoError::Open { path: disp(path), source })
}

pub fn read_kernel(path: &Path) -> IoResult<KernelSpec> {
    let kv = read_key_values(path)?;
    let get = |k: &str| -> IoResult<f64> {
        let v = kv.get(k).ok_or_else(|| invalid(path, format!("missing key '{k}'")))?;
        v.parse().map_err(|_| invalid(path, format!("'{k}' = '{v}' is not a number")))
    };
    let family_name = kv.get("family").ok_or_else(|| invalid(path, "missing key 'family'"))?;
    let shape = kv.get("shape").map(|_| get("shape")).transpose()?;
    let family = KernelFamily::from_name(family_name, shape).map_err(|e| invalid(path, e.to_string()))?;
    KernelSpec::new(family, get("r")?, get("range")?, get("scale")?).map_err(|e| invalid(path, e.to_string()))
}

/// One row per location: `id,t1,t2,rho,rejected`.
pub fn write_rejections(path: &Path, domain: &SpatialDomain, stats: &StatPair, rejected: &[usize]) -> IoResult<()> {
    let mut flag = vec![false; domain.len()];
    for &s in rejected {
        flag[s] = true;
    }
    let mut w = csv::Writer::from_path(path).map_err(|source| IoError::Csv { path: disp(path), source })?;
    let err = |source| IoError::Csv { path: disp(path), source };
    w.write_record(["id", "t1", "t2", "rho", "rejected"]).map_err(err)?;
    for s in 0..domain.len() {
        w.write_record([
            domain.id(s).to_string(),
            format!("{:?}", stats.t1[s]),
            format!("{:?}", stats.t2[s]),
            format!("{:?}", stats.rho[s]),
            u8::from(flag[s]).to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|source| IoError::Open { path: disp(path), source })
}

/// Ids flagged as rejected in a rejections file, in file order.
pub fn read_rejected_ids(path: &Path) -> IoResult<Vec<String>> {
    let t = Table::read(path)?;
    let id = t.require("id")?;
    let rej = t.require("rejected")?;
    let mut out = Vec::new();
    for i in 0..t.rows.len() {
        if t.text(i, rej, "rejected")? == "1" {
            out.push(t.text(i, id, "id")?.to_string());
        }
    }
    Ok(out)
}

fn cutoff<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_nan() {
        s.serialize_none()
    } else if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

/// The decision record written by `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecisionRecord {
    pub method: String,
    pub q: f64,
    #[serde(serialize_with = "cutoff")]
    pub t1_star: f64,
    #[serde(serialize_with = "cutoff")]
    pub t2_star: f64,
    #[serde(serialize_with = "cutoff")]
    pub fdp_hat: f64,
    pub n_rejected: usize,
    pub evaluations: usize,
    pub candidates_step1: usize,
    pub candidates_step2: usize,
    pub candidates_step3: usize,
}

impl DecisionRecord {
    pub fn new(method: &str, q: f64, decision: Option<&DecisionResult>, n_rejected: usize) -> Self {
        let nan = f64::NAN;
        Self {
            method: method.to_string(),
            q,
            t1_star: decision.map_or(nan, |d| d.t1_star),
            t2_star: decision.map_or(nan, |d| d.t2_star),
            fdp_hat: decision.map_or(nan, |d| d.fdp_hat),
            n_rejected,
            evaluations: decision.map_or(0, |d| d.evaluations),
            candidates_step1: decision.map_or(0, |d| d.candidates_step1),
            candidates_step2: decision.map_or(0, |d| d.candidates_step2),
            candidates_step3: decision.map_or(0, |d| d.candidates_step3),
        }
    }
}

pub fn write_decision(path: &Path, record: &DecisionRecord) -> IoResult<()> {
    let text = serde_json::to_string_pretty(record).map_err(|e| invalid(path, e.to_string()))?;
    let mut f = fs::File::create(path).map_err(|source| IoError::Open { path: disp(path), source })?;
    writeln!(f, "{text}").map_err(|source| IoError::Open { path: disp(path), source })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

/// `procedure,beta0,metric,mean,se,n`; `beta0` is empty outside the ozone
/// setup and `mean` is `NA` when no replicate contributed.
pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> IoResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|source| IoError::Csv { path: disp(path), source })?;
    let err = |source| IoError::Csv { path: disp(path), source };
    w.write_record(["procedure", "beta0", "metric", "mean", "se", "n"]).map_err(err)?;
    for r in rows {
        let na = |v: f64| if v.is_nan() { "NA".to_string() } else { format!("{v:?}") };
        w.write_record([
            r.procedure.label().to_string(),
            opt(r.beta0),
            r.metric.to_string(),
            na(r.mean),
            na(r.se),
            r.n.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|source| IoError::Open { path: disp(path), source })
}

/// `rep,procedure,beta0,n_rejected,matched_one_d,fdp,power`; power is `NA`
/// without signals.
pub fn write_replicates(path: &Path, records: &[ReplicateRecord]) -> IoResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|source| IoError::Csv { path: disp(path), source })?;
    let err = |source| IoError::Csv { path: disp(path), source };
    w.write_record(["rep", "procedure", "beta0", "n_rejected", "matched_one_d", "fdp", "power"]).map_err(err)?;
    for rec in records {
        for o in &rec.outcomes {
            w.write_record([
                rec.rep.to_string(),
                o.procedure.label().to_string(),
                opt(o.beta0),
                o.n_rejected.to_string(),
                o.matched_one_d.map_or(String::new(), |v| v.to_string()),
                format!("{:?}", o.fdp),
                o.power.map_or("NA".to_string(), |p| format!("{p:?}")),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|source| IoError::Open { path: disp(path), source })
}
