use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::query::{check_predicate, Predicate};
use crate::metamodel::{MetadataRecord, RecordStore, SchemaRegistry};
use crate::{Error, Result};

/// The per-node piece of a decomposed query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQuery {
    pub target_node: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<Predicate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub record_id: String,
    pub origin_node: String,
    pub values: BTreeMap<String, Value>,
    /// Content identity of image records: the checksum of the referenced
    /// payload. Rows sharing an identity describe the same image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<Vec<String>>,
    pub rows: Vec<Row>,
    /// Nodes whose answers are included.
    pub answered: Vec<String>,
    /// Nodes that were asked but did not answer.
    #[serde(default)]
    pub unreachable: Vec<String>,
}

impl ResultSet {
    pub fn empty(kind: impl Into<String>, projection: Option<Vec<String>>) -> ResultSet {
        ResultSet {
            kind: kind.into(),
            projection,
            rows: Vec::new(),
            answered: Vec::new(),
            unreachable: Vec::new(),
        }
    }

    /// True when some node's records may be missing.
    pub fn is_partial(&self) -> bool {
        !self.unreachable.is_empty()
    }

    pub fn record_ids(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.record_id.as_str()).collect()
    }
}

/// Union of result parts, deduplicated by record id and then by content
/// identity (the smallest record id of a group wins), sorted by record id.
/// The outcome does not depend on the order of `parts`.
pub fn merge_results(parts: Vec<ResultSet>) -> Result<ResultSet> {
    let mut iter = parts.into_iter();
    let Some(first) = iter.next() else {
        return Err(Error::malformed("no result sets to merge"));
    };
    let (kind, projection) = (first.kind.clone(), first.projection.clone());
    let mut by_id: BTreeMap<String, Row> = BTreeMap::new();
    let mut answered = BTreeSet::new();
    let mut unreachable = BTreeSet::new();
    for part in std::iter::once(first).chain(iter) {
        if part.kind != kind || part.projection != projection {
            return Err(Error::malformed(format!(
                "cannot merge {}/{:?} with {}/{:?}",
                part.kind, part.projection, kind, projection
            )));
        }
        answered.extend(part.answered);
        unreachable.extend(part.unreachable);
        for row in part.rows {
            match by_id.get(&row.record_id) {
                Some(existing) if row_key(existing) <= row_key(&row) => {}
                _ => {
                    by_id.insert(row.record_id.clone(), row);
                }
            }
        }
    }
    let mut seen_identity = BTreeSet::new();
    let rows = by_id
        .into_values()
        .filter(|row| match &row.identity {
            Some(id) => seen_identity.insert(id.clone()),
            None => true,
        })
        .collect();
    let unreachable = unreachable.difference(&answered).cloned().collect();
    Ok(ResultSet {
        kind,
        projection,
        rows,
        answered: answered.into_iter().collect(),
        unreachable,
    })
}

/// Total order used to pick between two copies of one record id.
fn row_key(row: &Row) -> (String, String) {
    (
        row.origin_node.clone(),
        serde_json::to_string(&row.values).unwrap_or_default(),
    )
}

/// Answers `sub` from `store` alone. Used by every node for its own
/// sub-queries and, over a merged store, as the centralized reference.
pub fn evaluate_local(
    registry: &SchemaRegistry,
    store: &RecordStore,
    sub: &SubQuery,
    answering_node: &str,
) -> Result<ResultSet> {
    let schema = registry
        .latest(&sub.kind)
        .ok_or_else(|| Error::not_found(format!("unknown record kind `{}`", sub.kind)))?;
    for attr in sub.projection.iter().flatten() {
        if schema.attribute(attr).is_none() {
            return Err(Error::malformed(format!("`{}` has no attribute `{attr}`", sub.kind)));
        }
    }
    if let Some(pred) = &sub.predicate {
        check_predicate(pred, schema)?;
    }
    let rows = store
        .of_kind(&sub.kind)
        .filter(|rec| sub.predicate.as_ref().is_none_or(|p| p.eval(schema, &rec.values)))
        .map(|rec| project(rec, sub.projection.as_deref()))
        .collect();
    Ok(ResultSet {
        kind: sub.kind.clone(),
        projection: sub.projection.clone(),
        rows,
        answered: vec![answering_node.to_owned()],
        unreachable: Vec::new(),
    })
}

fn project(rec: &MetadataRecord, projection: Option<&[String]>) -> Row {
    let values = match projection {
        None => rec.values.clone(),
        Some(attrs) => attrs
            .iter()
            .filter_map(|a| rec.values.get(a).map(|v| (a.clone(), v.clone())))
            .collect(),
    };
    let identity = (rec.kind == "image")
        .then(|| rec.values.get("checksum").and_then(Value::as_str).map(str::to_owned))
        .flatten();
    Row {
        record_id: rec.record_id.clone(),
        origin_node: rec.origin_node.clone(),
        values,
        identity,
    }
}
