//! CSV ingestion and export.
//!
//! Nodes file: `school_id, node_id, <covariates...>[, gpa]`.
//! Edges file: `school_id, src, dst` (within-school directed friendships).

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::netgraph::SchoolNetwork;
use crate::structsim::SchoolData;

#[derive(Clone, Debug, Default)]
pub struct IngestOptions {
    /// Covariate columns to one-hot encode, each with its omitted category.
    pub categorical: Vec<(String, String)>,
}

#[derive(Clone, Debug)]
pub struct IngestedData {
    pub nets: Vec<SchoolNetwork>,
    pub data: Vec<SchoolData>,
    pub school_ids: Vec<String>,
    /// Node identifiers per school, in file order.
    pub node_ids: Vec<Vec<String>>,
    pub x_names: Vec<String>,
    pub has_gpa: bool,
    pub warnings: Vec<String>,
}

struct NodeTable {
    covariate_names: Vec<String>,
    has_gpa: bool,
    /// school -> (node ids, raw covariate cells, gpa)
    schools: Vec<(String, Vec<String>, Vec<Vec<String>>, Vec<f64>)>,
}

fn read_nodes(path: &Path) -> Result<NodeTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.len() < 3 || headers[0] != "school_id" || headers[1] != "node_id" {
        return Err(Error::Cli(format!(
            "{}: expected header starting with school_id,node_id,<covariates...>",
            path.display()
        )));
    }
    let has_gpa = headers.last().map(|h| h == "gpa").unwrap_or(false);
    let cov_end = if has_gpa { headers.len() - 1 } else { headers.len() };
    let covariate_names = headers[2..cov_end].to_vec();
    if covariate_names.is_empty() {
        return Err(Error::Cli(format!("{}: no covariate columns", path.display())));
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_school: BTreeMap<String, (Vec<String>, Vec<Vec<String>>, Vec<f64>)> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Cli(format!(
                "{} row {}: expected {} fields, got {}",
                path.display(),
                line + 2,
                headers.len(),
                rec.len()
            )));
        }
        let school = rec[0].trim().to_string();
        let node = rec[1].trim().to_string();
        let cells: Vec<String> = (2..cov_end).map(|c| rec[c].trim().to_string()).collect();
        if let Some(pos) = cells.iter().position(|c| c.is_empty()) {
            return Err(Error::Cli(format!(
                "{} row {}: missing value for covariate '{}' (node {})",
                path.display(),
                line + 2,
                covariate_names[pos],
                node
            )));
        }
        let gpa = if has_gpa {
            let cell = rec[headers.len() - 1].trim();
            cell.parse::<f64>().map_err(|_| {
                Error::Cli(format!(
                    "{} row {}: non-numeric gpa '{}'",
                    path.display(),
                    line + 2,
                    cell
                ))
            })?
        } else {
            0.0
        };
        if !by_school.contains_key(&school) {
            order.push(school.clone());
        }
        let entry = by_school.entry(school).or_default();
        if entry.0.contains(&node) {
            return Err(Error::Cli(format!(
                "{} row {}: duplicate node id '{node}'",
                path.display(),
                line + 2
            )));
        }
        entry.0.push(node);
        entry.1.push(cells);
        entry.2.push(gpa);
    }
    if order.is_empty() {
        return Err(Error::Cli(format!("{}: no data rows", path.display())));
    }
    Ok(NodeTable {
        covariate_names,
        has_gpa,
        schools: order
            .into_iter()
            .map(|s| {
                let (ids, cells, gpa) = by_school.remove(&s).unwrap();
                (s, ids, cells, gpa)
            })
            .collect(),
    })
}

/// Read the node and edge files into per-school networks and data.
/// Categorical covariates are one-hot encoded with a declared omitted
/// category; everything else must parse as a number.
pub fn ingest(nodes_csv: &Path, edges_csv: &Path, opts: &IngestOptions) -> Result<IngestedData> {
    let table = read_nodes(nodes_csv)?;
    let cat: BTreeMap<&str, &str> = opts
        .categorical
        .iter()
        .map(|(c, o)| (c.as_str(), o.as_str()))
        .collect();
    for (col, _) in &opts.categorical {
        if !table.covariate_names.contains(col) {
            return Err(Error::Cli(format!("categorical column '{col}' not in nodes file")));
        }
    }

    // Global category levels per categorical column (sorted for stability).
    let mut levels: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (ci, name) in table.covariate_names.iter().enumerate() {
        if cat.contains_key(name.as_str()) {
            let mut vals: Vec<String> = table
                .schools
                .iter()
                .flat_map(|(_, _, cells, _)| cells.iter().map(|row| row[ci].clone()))
                .collect();
            vals.sort();
            vals.dedup();
            levels.insert(name.clone(), vals);
        }
    }

    // Encoded column names.
    let mut x_names: Vec<String> = Vec::new();
    for name in &table.covariate_names {
        match cat.get(name.as_str()) {
            Some(omitted) => {
                let lv = &levels[name];
                if !lv.iter().any(|l| l == omitted) {
                    return Err(Error::Cli(format!(
                        "omitted category '{omitted}' never observed in column '{name}'"
                    )));
                }
                for l in lv.iter().filter(|l| l.as_str() != *omitted) {
                    x_names.push(format!("{name}_{l}"));
                }
            }
            None => x_names.push(name.clone()),
        }
    }

    // Edges grouped by school.
    let mut edges_by_school: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    {
        let mut rdr = csv::Reader::from_path(edges_csv)?;
        let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if headers != ["school_id", "src", "dst"] {
            return Err(Error::Cli(format!(
                "{}: expected header school_id,src,dst",
                edges_csv.display()
            )));
        }
        for rec in rdr.records() {
            let rec = rec?;
            edges_by_school
                .entry(rec[0].trim().to_string())
                .or_default()
                .push((rec[1].trim().to_string(), rec[2].trim().to_string()));
        }
    }
    let known: Vec<&String> = table.schools.iter().map(|(s, _, _, _)| s).collect();
    if let Some(unknown) = edges_by_school.keys().find(|s| !known.contains(s)) {
        return Err(Error::Cli(format!(
            "edges reference unknown school '{unknown}'"
        )));
    }

    let mut warnings = Vec::new();
    let mut nets = Vec::new();
    let mut data = Vec::new();
    let mut school_ids = Vec::new();
    let mut node_ids = Vec::new();
    for (school, ids, cells, gpa) in &table.schools {
        let n = ids.len();
        let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut edge_idx = Vec::new();
        for (src, dst) in edges_by_school.get(school).map(|v| v.as_slice()).unwrap_or(&[]) {
            let si = *index.get(src.as_str()).ok_or_else(|| {
                Error::Cli(format!("edge in school '{school}' references unknown node '{src}'"))
            })?;
            let di = *index.get(dst.as_str()).ok_or_else(|| {
                Error::Cli(format!("edge in school '{school}' references unknown node '{dst}'"))
            })?;
            edge_idx.push((si, di));
        }
        let (net, dups) = SchoolNetwork::from_edges(school.clone(), n, &edge_idx)?;
        if dups > 0 {
            warnings.push(format!("school {school}: collapsed {dups} duplicate edge(s)"));
        }
        let mut x = DMatrix::zeros(n, x_names.len());
        for (i, row) in cells.iter().enumerate() {
            let mut out_c = 0;
            for (ci, name) in table.covariate_names.iter().enumerate() {
                match cat.get(name.as_str()) {
                    Some(omitted) => {
                        for l in levels[name].iter().filter(|l| l.as_str() != *omitted) {
                            x[(i, out_c)] = if &row[ci] == l { 1.0 } else { 0.0 };
                            out_c += 1;
                        }
                    }
                    None => {
                        x[(i, out_c)] = row[ci].parse::<f64>().map_err(|_| {
                            Error::Cli(format!(
                                "school {school} node {}: non-numeric value '{}' in column '{name}'",
                                ids[i], row[ci]
                            ))
                        })?;
                        out_c += 1;
                    }
                }
            }
        }
        nets.push(net);
        data.push(SchoolData {
            x,
            y: DVector::from_vec(gpa.clone()),
            effort: None,
            eta: None,
            eps: None,
        });
        school_ids.push(school.clone());
        node_ids.push(ids.clone());
    }
    Ok(IngestedData {
        nets,
        data,
        school_ids,
        node_ids,
        x_names,
        has_gpa: table.has_gpa,
        warnings,
    })
}

/// Write networks and data back to the two-file CSV format.
pub fn export(
    nodes_csv: &Path,
    edges_csv: &Path,
    nets: &[SchoolNetwork],
    data: &[SchoolData],
    x_names: &[String],
    node_ids: Option<&[Vec<String>]>,
    with_gpa: bool,
) -> Result<()> {
    let mut nw = csv::Writer::from_path(nodes_csv)?;
    let mut header = vec!["school_id".to_string(), "node_id".to_string()];
    header.extend(x_names.iter().cloned());
    if with_gpa {
        header.push("gpa".into());
    }
    nw.write_record(&header)?;
    let id_of = |s: usize, i: usize| -> String {
        match node_ids {
            Some(ids) => ids[s][i].clone(),
            None => format!("n{i:04}"),
        }
    };
    for (s, (net, d)) in nets.iter().zip(data).enumerate() {
        for i in 0..net.n {
            let mut rec = vec![net.school_id.clone(), id_of(s, i)];
            for c in 0..d.x.ncols() {
                rec.push(format!("{}", d.x[(i, c)]));
            }
            if with_gpa {
                rec.push(format!("{}", d.y[i]));
            }
            nw.write_record(&rec)?;
        }
    }
    nw.flush()?;

    let mut ew = csv::Writer::from_path(edges_csv)?;
    ew.write_record(["school_id", "src", "dst"])?;
    for (s, net) in nets.iter().enumerate() {
        for i in 0..net.n {
            for &j in net.neighbors(i) {
                ew.write_record([net.school_id.as_str(), &id_of(s, i), &id_of(s, j)])?;
            }
        }
    }
    ew.flush()?;
    Ok(())
}
