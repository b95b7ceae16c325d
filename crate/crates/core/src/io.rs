//! CSV and JSON formats.
//!
//! Interventional units: `id, lat, lon, A, <covariates...>, [cluster]`.
//! Outcome units: `id, lat, lon, Y, <covariates...>`. Any column not named
//! above is a covariate, in file order. Empty `lat`/`lon`, `A` or `Y` cells
//! mean missing. Mapping edges: `outcome_id, interventional_id`. Cluster
//! assignments: `outcome_id, cluster`.
//!
//! Floats are written in the shortest form that parses back exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::{BipartiteDataset, InterventionalUnit, OutcomeUnit};
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::interference::{InterferenceMap, KeyAssignment};
use crate::iptw::{ClusterContribution, Effects, Estimate, EstimateWithCI};
use crate::simulation::SimulationReport;

/// Shortest round-trip representation; empty for `None`.
pub fn format_f64(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(format_f64).unwrap_or_default()
}

fn parse_f64(s: &str, what: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("line {line}: `{s}` is not a number ({what})")))
}

fn parse_opt(s: &str, what: &str, line: usize) -> Result<Option<f64>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(s, what, line).map(Some)
    }
}

struct Columns {
    id: usize,
    lat: Option<usize>,
    lon: Option<usize>,
    value: Option<usize>,
    cluster: Option<usize>,
    covariates: Vec<(usize, String)>,
}

fn columns(headers: &csv::StringRecord, value: &str, allow_cluster: bool) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id = find("id").ok_or_else(|| Error::Parse("missing `id` column".into()))?;
    let cluster = if allow_cluster { find("cluster") } else { None };
    let (lat, lon, value_col) = (find("lat"), find("lon"), find(value));
    if lat.is_some() != lon.is_some() {
        return Err(Error::Parse("`lat` and `lon` must appear together".into()));
    }
    let reserved = [Some(id), lat, lon, value_col, cluster];
    let covariates = headers
        .iter()
        .enumerate()
        .filter(|(c, _)| !reserved.contains(&Some(*c)))
        .map(|(c, h)| (c, h.trim().to_string()))
        .collect();
    Ok(Columns {
        id,
        lat,
        lon,
        value: value_col,
        cluster,
        covariates,
    })
}

fn location(rec: &csv::StringRecord, cols: &Columns, line: usize) -> Result<Option<GeoPoint>> {
    match (cols.lat, cols.lon) {
        (Some(a), Some(o)) => match (parse_opt(&rec[a], "lat", line)?, parse_opt(&rec[o], "lon", line)?) {
            (Some(lat), Some(lon)) => GeoPoint::new(lat, lon).map(Some),
            (None, None) => Ok(None),
            _ => Err(Error::Parse(format!("line {line}: only one of lat/lon is present"))),
        },
        _ => Ok(None),
    }
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionalTable {
    pub units: Vec<InterventionalUnit>,
    pub covariate_names: Vec<String>,
    /// Cluster labels as written, when the file has a `cluster` column.
    pub clusters: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeTable {
    pub units: Vec<OutcomeUnit>,
    pub covariate_names: Vec<String>,
}

pub fn read_interventional<R: Read>(r: R) -> Result<InterventionalTable> {
    let mut rdr = reader(r);
    let cols = columns(rdr.headers()?, "A", true)?;
    let mut units = Vec::new();
    let mut clusters = cols.cluster.map(|_| Vec::new());
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let treatment = match cols.value.map(|c| rec[c].trim()) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<u8>().map_err(|_| Error::Parse(format!("line {line}: treatment `{s}` is not 0 or 1")))?),
        };
        units.push(InterventionalUnit {
            id: rec[cols.id].to_string(),
            location: location(&rec, &cols, line)?,
            covariates: cols
                .covariates
                .iter()
                .map(|(c, name)| parse_f64(&rec[*c], name, line))
                .collect::<Result<_>>()?,
            treatment,
        });
        if let (Some(c), Some(list)) = (cols.cluster, clusters.as_mut()) {
            list.push(rec[c].to_string());
        }
    }
    Ok(InterventionalTable {
        units,
        covariate_names: cols.covariates.into_iter().map(|(_, n)| n).collect(),
        clusters,
    })
}

pub fn read_outcomes<R: Read>(r: R) -> Result<OutcomeTable> {
    let mut rdr = reader(r);
    let cols = columns(rdr.headers()?, "Y", false)?;
    let mut units = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        units.push(OutcomeUnit {
            id: rec[cols.id].to_string(),
            location: location(&rec, &cols, line)?,
            covariates: cols
                .covariates
                .iter()
                .map(|(c, name)| parse_f64(&rec[*c], name, line))
                .collect::<Result<_>>()?,
            outcome: match cols.value {
                Some(c) => parse_opt(&rec[c], "Y", line)?,
                None => None,
            },
        });
    }
    Ok(OutcomeTable {
        units,
        covariate_names: cols.covariates.into_iter().map(|(_, n)| n).collect(),
    })
}

/// Dense cluster indices for string labels: numeric order when every label
/// is an integer, lexicographic otherwise.
pub fn index_labels(labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let numeric = labels.iter().all(|l| l.parse::<i64>().is_ok());
    let mut unique: Vec<String> = labels.to_vec();
    if numeric {
        unique.sort_by_key(|l| l.parse::<i64>().expect("checked numeric"));
    } else {
        unique.sort();
    }
    unique.dedup();
    let lookup: BTreeMap<&str, usize> = unique.iter().enumerate().map(|(k, l)| (l.as_str(), k)).collect();
    (labels.iter().map(|l| lookup[l.as_str()]).collect(), unique)
}

pub struct LoadedDataset {
    pub dataset: BipartiteDataset,
    /// Interventional cluster labels, when present.
    pub clusters: Option<Vec<String>>,
}

pub fn read_dataset(interventional: &Path, outcomes: &Path) -> Result<LoadedDataset> {
    let p = read_interventional(open(interventional)?)?;
    let o = read_outcomes(open(outcomes)?)?;
    Ok(LoadedDataset {
        dataset: BipartiteDataset::with_names(p.units, o.units, p.covariate_names, o.covariate_names),
        clusters: p.clusters,
    })
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn loc_fields(p: Option<GeoPoint>) -> [String; 2] {
    match p {
        Some(p) => [format_f64(p.lat()), format_f64(p.lon())],
        None => [String::new(), String::new()],
    }
}

pub fn write_interventional<W: Write>(w: W, dataset: &BipartiteDataset, clusters: Option<&[String]>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["id".to_string(), "lat".into(), "lon".into(), "A".into()];
    header.extend(dataset.interventional_covariate_names().iter().cloned());
    if clusters.is_some() {
        header.push("cluster".into());
    }
    wtr.write_record(&header)?;
    for (i, u) in dataset.interventional().iter().enumerate() {
        let mut row = vec![u.id.clone()];
        row.extend(loc_fields(u.location));
        row.push(u.treatment.map(|t| t.to_string()).unwrap_or_default());
        row.extend(u.covariates.iter().map(|&x| format_f64(x)));
        if let Some(c) = clusters {
            row.push(c[i].clone());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_outcomes<W: Write>(w: W, dataset: &BipartiteDataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["id".to_string(), "lat".into(), "lon".into(), "Y".into()];
    header.extend(dataset.outcome_covariate_names().iter().cloned());
    wtr.write_record(&header)?;
    for u in dataset.outcome() {
        let mut row = vec![u.id.clone()];
        row.extend(loc_fields(u.location));
        row.push(opt(u.outcome));
        row.extend(u.covariates.iter().map(|&x| format_f64(x)));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn lookup_id(index: Option<usize>, id: &str, level: &str, line: usize) -> Result<usize> {
    index.ok_or_else(|| Error::Parse(format!("line {line}: unknown {level} id `{id}`")))
}

pub fn read_edges<R: Read>(r: R, dataset: &BipartiteDataset) -> Result<InterferenceMap> {
    let mut rdr = reader(r);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("missing `{name}` column")))
    };
    let (oc, ic) = (find("outcome_id")?, find("interventional_id")?);
    let mut edges = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let j = lookup_id(dataset.outcome_index(&rec[oc]), &rec[oc], "outcome", line)?;
        let i = lookup_id(dataset.interventional_index(&rec[ic]), &rec[ic], "interventional", line)?;
        edges.push((j, i));
    }
    InterferenceMap::new(dataset.n_outcome(), dataset.n_interventional(), edges)
}

pub fn write_edges<W: Write>(w: W, map: &InterferenceMap, dataset: &BipartiteDataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["outcome_id", "interventional_id"])?;
    for (j, i) in map.edges() {
        wtr.write_record([&dataset.outcome()[j].id, &dataset.interventional()[i].id])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Outcome-unit cluster labels; units absent from the file are `None`.
pub fn read_assignment<R: Read>(r: R, dataset: &BipartiteDataset) -> Result<Vec<Option<String>>> {
    let mut rdr = reader(r);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("missing `{name}` column")))
    };
    let (oc, cc) = (find("outcome_id")?, find("cluster")?);
    let mut out = vec![None; dataset.n_outcome()];
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let j = lookup_id(dataset.outcome_index(&rec[oc]), &rec[oc], "outcome", n + 2)?;
        out[j] = Some(rec[cc].to_string());
    }
    Ok(out)
}

pub fn write_assignment<W: Write>(w: W, dataset: &BipartiteDataset, labels: &[Option<String>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["outcome_id", "cluster"])?;
    for (u, l) in dataset.outcome().iter().zip(labels) {
        if let Some(l) = l {
            wtr.write_record([&u.id, l])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Key-associated units: `outcome_id, interventional_id`. Rows for outcome
/// ids not in `dataset` are skipped; every outcome unit needs a row.
pub fn read_keys<R: Read>(r: R, dataset: &BipartiteDataset, map: &InterferenceMap) -> Result<KeyAssignment> {
    let mut rdr = reader(r);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("missing `{name}` column")))
    };
    let (oc, ic) = (find("outcome_id")?, find("interventional_id")?);
    let mut keys = vec![None; dataset.n_outcome()];
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let Some(j) = dataset.outcome_index(&rec[oc]) else {
            continue;
        };
        keys[j] = Some(lookup_id(dataset.interventional_index(&rec[ic]), &rec[ic], "interventional", n + 2)?);
    }
    let keys = keys
        .iter()
        .enumerate()
        .map(|(j, k)| k.ok_or_else(|| Error::Parse(format!("no key for outcome unit `{}`", dataset.outcome()[j].id))))
        .collect::<Result<Vec<_>>>()?;
    KeyAssignment::new(map, keys)
}

pub fn write_keys<W: Write>(w: W, dataset: &BipartiteDataset, keys: &KeyAssignment) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["outcome_id", "interventional_id"])?;
    for (u, &i) in dataset.outcome().iter().zip(keys.keys()) {
        wtr.write_record([&u.id, &dataset.interventional()[i].id])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_exclusions<W: Write>(w: W, dataset: &BipartiteDataset, excluded: &[usize]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["outcome_id"])?;
    for &j in excluded {
        wtr.write_record([&dataset.outcome()[j].id])?;
    }
    wtr.flush()?;
    Ok(())
}

fn estimand_fields(e: &Estimate) -> [String; 4] {
    match *e {
        Estimate::Average { a, alpha } => ["average".into(), a.to_string(), format_f64(alpha), String::new()],
        Estimate::Direct { alpha } => ["direct".into(), String::new(), format_f64(alpha), String::new()],
        Estimate::Indirect { a, alpha, alpha_prime } => ["indirect".into(), a.to_string(), format_f64(alpha), format_f64(alpha_prime)],
    }
}

const ESTIMAND_HEADER: [&str; 4] = ["estimand", "a", "alpha", "alpha_prime"];

/// One row per estimand with point, standard error and interval.
pub fn write_effects_csv<W: Write>(w: W, effects: &Effects) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = ESTIMAND_HEADER.to_vec();
    header.extend(["point", "std_error", "ci_low", "ci_high"]);
    wtr.write_record(&header)?;
    let rows: Vec<&EstimateWithCI> = effects.averages.iter().chain(&effects.direct).chain(&effects.indirect).collect();
    for e in rows {
        let mut row = estimand_fields(&e.estimand).to_vec();
        row.extend([format_f64(e.point), opt(e.std_error), opt(e.ci_low), opt(e.ci_high)]);
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_contributions_csv<W: Write>(w: W, contributions: &[ClusterContribution]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["cluster", "a", "alpha", "estimate", "max_weight", "n_outcome", "n_used"])?;
    for c in contributions {
        wtr.write_record([
            c.k.to_string(),
            c.a.to_string(),
            format_f64(c.alpha),
            format_f64(c.estimate),
            format_f64(c.max_weight),
            c.n_outcome.to_string(),
            c.n_used.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_simulation_csv<W: Write>(w: W, report: &SimulationReport) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = ESTIMAND_HEADER.to_vec();
    header.extend([
        "truth",
        "mean",
        "sd",
        "mc_std_error",
        "bias",
        "relative_bias",
        "coverage",
        "mean_std_error",
        "replicates",
    ]);
    wtr.write_record(&header)?;
    for s in &report.summaries {
        let mut row = estimand_fields(&s.estimand).to_vec();
        row.extend([
            format_f64(s.truth),
            format_f64(s.mean),
            format_f64(s.sd),
            format_f64(s.mc_std_error),
            format_f64(s.bias),
            opt(s.relative_bias),
            opt(s.coverage),
            opt(s.mean_std_error),
            s.replicates.to_string(),
        ]);
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(open(path)?))?)
}

pub fn write_csv_file(path: &Path, f: impl FnOnce(&mut std::fs::File) -> Result<()>) -> Result<()> {
    let mut file = create(path)?;
    f(&mut file)
}
