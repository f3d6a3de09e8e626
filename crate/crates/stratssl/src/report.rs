//! CSV writers for analysis, study and design-comparison reports. Every file
//! starts with a `schema` column carrying [`SCHEMA_VERSION`].

use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::Analysis;
use crate::simulation::{DesignComparison, MonteCarloReport};

pub const SCHEMA_VERSION: &str = "stratssl-report/1";

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

fn write_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut h = vec!["schema"];
    h.extend_from_slice(header);
    w.write_record(&h).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![SCHEMA_VERSION.to_string()];
        rec.extend(r);
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per accuracy estimate and per θ coordinate.
pub fn write_analysis_csv(path: &Path, a: &Analysis) -> Result<()> {
    let header = ["quantity", "metric", "variant", "flavor", "coordinate", "value", "se", "ci_lower", "ci_upper"];
    let mut rows = Vec::new();
    for e in &a.accuracy {
        rows.push(vec![
            "accuracy".into(),
            e.metric.name().into(),
            e.variant.name().into(),
            format!("{:?}", e.flavor).to_lowercase(),
            String::new(),
            format!("{:?}", e.value),
            opt(e.se),
            opt(e.ci.map(|c| c.0)),
            opt(e.ci.map(|c| c.1)),
        ]);
    }
    for t in &a.theta {
        for (j, v) in t.coefficients.iter().enumerate() {
            let se = t.ase.as_ref().map(|s| s[j]);
            rows.push(vec![
                "theta".into(),
                String::new(),
                format!("{:?}", t.variant).to_lowercase(),
                String::new(),
                j.to_string(),
                format!("{v:?}"),
                opt(se),
                opt(se.map(|s| v - 1.959963984540054 * s)),
                opt(se.map(|s| v + 1.959963984540054 * s)),
            ]);
        }
    }
    for f in &a.intrinsic_theta {
        rows.push(vec![
            "theta".into(),
            String::new(),
            "intrinsic".into(),
            String::new(),
            f.direction.iter().position(|&d| d != 0.0).map_or_else(String::new, |j| j.to_string()),
            format!("{:?}", f.value),
            String::new(),
            String::new(),
            String::new(),
        ]);
    }
    write_rows(path, &header, rows)
}

/// One row per study cell.
pub fn write_study_csv(path: &Path, r: &MonteCarloReport) -> Result<()> {
    let header = [
        "scenario", "quantity", "metric", "variant", "flavor", "coordinate", "truth", "mean", "bias", "percent_bias", "ese",
        "ase", "cp", "re_vs_sl", "re_convention", "count",
    ];
    let scen = r.scenario.id.name().to_string();
    let mut rows = Vec::new();
    for c in &r.accuracy {
        rows.push(vec![
            scen.clone(),
            "accuracy".into(),
            c.metric.name().into(),
            c.variant.name().into(),
            format!("{:?}", c.flavor).to_lowercase(),
            String::new(),
            format!("{:?}", c.truth),
            format!("{:?}", c.mean),
            format!("{:?}", c.bias),
            format!("{:?}", c.percent_bias),
            format!("{:?}", c.ese),
            opt(c.ase),
            opt(c.cp),
            opt(c.re_vs_sl),
            c.convention.clone(),
            c.count.to_string(),
        ]);
    }
    for c in &r.theta {
        rows.push(vec![
            scen.clone(),
            "theta".into(),
            String::new(),
            format!("{:?}", c.variant).to_lowercase(),
            String::new(),
            c.coordinate.to_string(),
            format!("{:?}", c.truth),
            format!("{:?}", c.mean),
            format!("{:?}", c.bias),
            String::new(),
            format!("{:?}", c.ese),
            opt(c.ase),
            opt(c.cp),
            opt(c.re_vs_sl),
            c.convention.clone(),
            c.count.to_string(),
        ]);
    }
    write_rows(path, &header, rows)
}

/// One row per metric.
pub fn write_comparison_csv(path: &Path, c: &DesignComparison) -> Result<()> {
    let header = [
        "scenario", "budget", "metric", "re_sl", "re_ssl", "bias_sl", "bias_ssl", "bias_naive", "bias_sl_uniform", "bias_ssl_uniform",
    ];
    let rows = c
        .rows
        .iter()
        .map(|r| {
            vec![
                c.scenario.id.name().into(),
                c.budget.to_string(),
                r.metric.name().into(),
                format!("{:?}", r.re_sl),
                format!("{:?}", r.re_ssl),
                format!("{:?}", r.bias_sl),
                format!("{:?}", r.bias_ssl),
                format!("{:?}", r.bias_naive),
                format!("{:?}", r.bias_sl_uniform),
                format!("{:?}", r.bias_ssl_uniform),
            ]
        })
        .collect();
    write_rows(path, &header, rows)
}
