//! Output formats. `table` is for people; `st` (structured text) is stable
//! and machine-diffable: `#`-prefixed metadata lines, then a tab-separated
//! header and one tab-separated line per row with every value JSON-encoded.
//! An empty field means the attribute is absent.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use clap::ValueEnum;
use gridbox_core::catalogue::ReplicaEntry;
use gridbox_core::mediator::{Placement, PlacementDecision, ResultSet};
use gridbox_core::node::{JobResult, Outcome};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    #[value(name = "st")]
    StructuredText,
}

/// Attribute columns: the projection when there is one, otherwise every
/// attribute present in any row, sorted.
pub fn attribute_columns(rs: &ResultSet) -> Vec<String> {
    match &rs.projection {
        Some(p) => p.clone(),
        None => {
            let set: BTreeSet<&String> = rs.rows.iter().flat_map(|r| r.values.keys()).collect();
            set.into_iter().cloned().collect()
        }
    }
}

fn plain(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        let last = cells.len().saturating_sub(1);
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i == last {
                out.push_str(cell);
            } else {
                let _ = write!(out, "{cell:<w$}  ");
            }
        }
        out.push('\n');
    };
    line(header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&rule);
    for row in rows {
        line(row);
    }
    out
}

fn st_meta(out: &mut String, key: &str, values: &[String]) {
    out.push('#');
    out.push_str(key);
    for v in values {
        out.push('\t');
        out.push_str(v);
    }
    out.push('\n');
}

fn st_line(out: &mut String, cells: &[String]) {
    out.push_str(&cells.join("\t"));
    out.push('\n');
}

fn json(v: &Value) -> String {
    serde_json::to_string(v).expect("json values serialize")
}

/// Renders rows in the order given (the mediator sorts by record id).
pub fn result_set(rs: &ResultSet, format: Format) -> String {
    let attrs = attribute_columns(rs);
    let mut header = vec!["record_id".to_owned(), "origin_node".to_owned()];
    header.extend(attrs.iter().cloned());
    match format {
        Format::Table => {
            let rows: Vec<Vec<String>> = rs
                .rows
                .iter()
                .map(|r| {
                    let mut cells = vec![r.record_id.clone(), r.origin_node.clone()];
                    cells.extend(attrs.iter().map(|a| r.values.get(a).map_or_else(|| "-".to_owned(), plain)));
                    cells
                })
                .collect();
            table(&header, &rows)
        }
        Format::StructuredText => {
            let mut out = String::new();
            st_meta(&mut out, "kind", std::slice::from_ref(&rs.kind));
            st_meta(&mut out, "answered", &rs.answered);
            st_meta(&mut out, "unreachable", &rs.unreachable);
            st_line(&mut out, &header);
            for r in &rs.rows {
                let mut cells = vec![r.record_id.clone(), r.origin_node.clone()];
                cells.extend(attrs.iter().map(|a| r.values.get(a).map(json).unwrap_or_default()));
                st_line(&mut out, &cells);
            }
            out
        }
    }
}

fn placement_label(p: &Placement) -> String {
    match p {
        Placement::ExecuteAtData { node } => format!("execute_at_data:{node}"),
        Placement::ReplicateToRequester => "replicate_to_requester".to_owned(),
    }
}

/// The placement decision, as printed by `job --explain`.
pub fn placement(decision: &PlacementDecision, format: Format) -> String {
    match format {
        Format::Table => {
            let mut out = format!(
                "placement (threshold {} bytes): {}\n",
                decision.threshold_bytes, decision.rationale
            );
            let rows: Vec<Vec<String>> = decision
                .choices
                .iter()
                .map(|c| vec![c.lfn.to_string(), c.size_bytes.to_string(), placement_label(&c.placement)])
                .collect();
            out.push_str(&table(&["lfn".into(), "bytes".into(), "placement".into()], &rows));
            out.push('\n');
            out
        }
        Format::StructuredText => {
            let mut out = String::new();
            st_meta(&mut out, "threshold", &[decision.threshold_bytes.to_string()]);
            st_meta(&mut out, "rationale", std::slice::from_ref(&decision.rationale));
            for c in &decision.choices {
                st_meta(
                    &mut out,
                    "placement",
                    &[c.lfn.to_string(), c.size_bytes.to_string(), placement_label(&c.placement)],
                );
            }
            out
        }
    }
}

fn outcome_label(o: Outcome) -> &'static str {
    match o {
        Outcome::Ok => "ok",
        Outcome::Failed => "failed",
        Outcome::IntegrityError => "integrity_error",
        Outcome::Unreachable => "unreachable",
    }
}

/// Per-input job results, preceded by the placement when `explain` is set.
pub fn job_result(jr: &JobResult, format: Format, explain: bool) -> String {
    let mut out = String::new();
    if format == Format::StructuredText {
        st_meta(&mut out, "job", std::slice::from_ref(&jr.job_id));
        st_meta(&mut out, "algorithm", std::slice::from_ref(&jr.algorithm));
        st_meta(&mut out, "unreachable", &jr.unreachable);
    }
    if explain {
        if let Some(d) = &jr.placement {
            out.push_str(&placement(d, format));
        }
    }
    match format {
        Format::Table => {
            let rows: Vec<Vec<String>> = jr
                .entries
                .iter()
                .map(|e| {
                    let result = match (&e.output, &e.detail) {
                        (Some(v), _) => json(v),
                        (None, Some(d)) => d.clone(),
                        (None, None) => "-".to_owned(),
                    };
                    vec![
                        e.lfn.to_string(),
                        outcome_label(e.outcome).to_owned(),
                        e.executed_at.clone().unwrap_or_else(|| "-".to_owned()),
                        result,
                    ]
                })
                .collect();
            let header = ["lfn", "outcome", "executed_at", "result"].map(String::from);
            out.push_str(&table(&header, &rows));
        }
        Format::StructuredText => {
            let header = ["lfn", "outcome", "executed_at", "output", "detail"].map(String::from);
            st_line(&mut out, &header);
            for e in &jr.entries {
                st_line(
                    &mut out,
                    &[
                        e.lfn.to_string(),
                        outcome_label(e.outcome).to_owned(),
                        e.executed_at.clone().unwrap_or_default(),
                        e.output.as_ref().map(json).unwrap_or_default(),
                        e.detail.as_ref().map(|d| json(&Value::String(d.clone()))).unwrap_or_default(),
                    ],
                );
            }
        }
    }
    out
}

/// Replicas of one lfn.
pub fn replicas(entries: &[ReplicaEntry], format: Format) -> String {
    let header = ["node_id", "local_path", "size_bytes", "checksum", "registered_at"].map(String::from);
    let rows: Vec<Vec<String>> = entries
        .iter()
        .map(|r| {
            vec![
                r.node_id.clone(),
                r.local_path.clone(),
                r.size_bytes.to_string(),
                r.checksum.to_hex(),
                r.registered_at.to_rfc3339(),
            ]
        })
        .collect();
    match format {
        Format::Table => table(&header, &rows),
        Format::StructuredText => {
            let mut out = String::new();
            st_line(&mut out, &header);
            for row in &rows {
                st_line(&mut out, row);
            }
            out
        }
    }
}
