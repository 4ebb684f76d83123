//! Description-driven metadata. Record kinds are described by schema
//! documents interpreted at runtime; records are validated against them and
//! schemas evolve by versioned, backward-compatible deltas.

mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::catalogue::LogicalFileName;
use crate::{Error, Result};

pub use store::RecordStore;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AttrType {
    String,
    Integer,
    Real,
    Timestamp,
    Enum { values: Vec<String> },
    LfnRef,
}

impl AttrType {
    fn name(&self) -> &'static str {
        match self {
            AttrType::String => "string",
            AttrType::Integer => "integer",
            AttrType::Real => "real",
            AttrType::Timestamp => "timestamp",
            AttrType::Enum { .. } => "enum",
            AttrType::LfnRef => "lfn_ref",
        }
    }

    /// Checks a stored JSON value against this type.
    pub fn check(&self, value: &Value) -> std::result::Result<(), String> {
        let ok = match (self, value) {
            (AttrType::String, Value::String(_)) => true,
            (AttrType::Integer, Value::Number(n)) => n.is_i64(),
            (AttrType::Real, Value::Number(n)) => n.as_f64().is_some_and(f64::is_finite),
            (AttrType::Timestamp, Value::String(s)) => {
                if parse_timestamp(s).is_none() {
                    return Err(format!("`{s}` is not an RFC 3339 timestamp or YYYY-MM-DD date"));
                }
                true
            }
            (AttrType::Enum { values }, Value::String(s)) => {
                if !values.contains(s) {
                    return Err(format!("`{s}` is not one of {values:?}"));
                }
                true
            }
            (AttrType::LfnRef, Value::String(s)) => {
                if let Err(e) = LogicalFileName::new(s.as_str()) {
                    return Err(e.to_string());
                }
                true
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("expected {}, found {value}", self.name()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    #[serde(flatten)]
    pub ty: AttrType,
    pub required: bool,
}

impl AttributeDef {
    pub fn optional(name: impl Into<String>, ty: AttrType) -> Self {
        AttributeDef {
            name: name.into(),
            ty,
            required: false,
        }
    }

    pub fn required(name: impl Into<String>, ty: AttrType) -> Self {
        AttributeDef {
            name: name.into(),
            ty,
            required: true,
        }
    }
}

/// A versioned description of one record kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDescription {
    pub name: String,
    pub version: u32,
    pub attributes: Vec<AttributeDef>,
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl SchemaDescription {
    pub fn parse(doc: &str) -> Result<SchemaDescription> {
        let schema: SchemaDescription = serde_json::from_str(doc)?;
        schema.check()?;
        Ok(schema)
    }

    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(self).expect("schemas always serialize")
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeDef> {
        self.attributes.iter().find(|a| a.name == name)
    }

    /// Structural well-formedness of a single schema version.
    pub fn check(&self) -> Result<()> {
        if !is_identifier(&self.name) {
            return Err(Error::malformed(format!("invalid kind name `{}`", self.name)));
        }
        if self.version == 0 {
            return Err(Error::malformed("schema versions start at 1"));
        }
        let mut seen = BTreeSet::new();
        for attr in &self.attributes {
            if !is_identifier(&attr.name) {
                return Err(Error::malformed(format!(
                    "invalid attribute name `{}`",
                    attr.name
                )));
            }
            if !seen.insert(attr.name.as_str()) {
                return Err(Error::malformed(format!(
                    "attribute `{}` declared twice",
                    attr.name
                )));
            }
            if let AttrType::Enum { values } = &attr.ty {
                let distinct: BTreeSet<_> = values.iter().collect();
                if values.is_empty() || distinct.len() != values.len() {
                    return Err(Error::malformed(format!(
                        "enum `{}` needs distinct, non-empty values",
                        attr.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Checks that `newer` may follow `older`: every old attribute survives with
/// the same requiredness and type (enums may only grow), and every added
/// attribute is optional.
pub fn check_compatible(
    older: &SchemaDescription,
    newer: &SchemaDescription,
) -> std::result::Result<(), String> {
    for old in &older.attributes {
        let Some(new) = newer.attribute(&old.name) else {
            return Err(format!("attribute `{}` was removed", old.name));
        };
        if new.required != old.required {
            return Err(format!("attribute `{}` changed requiredness", old.name));
        }
        match (&old.ty, &new.ty) {
            (AttrType::Enum { values: a }, AttrType::Enum { values: b }) => {
                if let Some(lost) = a.iter().find(|v| !b.contains(v)) {
                    return Err(format!("enum `{}` lost value `{lost}`", old.name));
                }
            }
            (a, b) if a == b => {}
            _ => return Err(format!("attribute `{}` changed type", old.name)),
        }
    }
    for new in &newer.attributes {
        if new.required && older.attribute(&new.name).is_none() {
            return Err(format!("added attribute `{}` is required", new.name));
        }
    }
    Ok(())
}

/// A backward-compatible change to a schema.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDelta {
    #[serde(default)]
    pub add: Vec<AttributeDef>,
    /// Enum attribute name to additional values.
    #[serde(default)]
    pub widen: BTreeMap<String, Vec<String>>,
}

pub fn evolve_schema(base: &SchemaDescription, delta: &SchemaDelta) -> Result<SchemaDescription> {
    let mut next = base.clone();
    next.version = base
        .version
        .checked_add(1)
        .ok_or_else(|| Error::conflict("schema version overflow"))?;
    for attr in &delta.add {
        if attr.required {
            return Err(Error::conflict(format!(
                "cannot add required attribute `{}`",
                attr.name
            )));
        }
        if base.attribute(&attr.name).is_some() {
            return Err(Error::conflict(format!(
                "attribute `{}` already exists",
                attr.name
            )));
        }
        next.attributes.push(attr.clone());
    }
    for (name, extra) in &delta.widen {
        let Some(attr) = next.attributes.iter_mut().find(|a| &a.name == name) else {
            return Err(Error::conflict(format!("no attribute `{name}` to widen")));
        };
        let AttrType::Enum { values } = &mut attr.ty else {
            return Err(Error::conflict(format!("attribute `{name}` is not an enum")));
        };
        for v in extra {
            if !values.contains(v) {
                values.push(v.clone());
            }
        }
    }
    next.check().map_err(|e| Error::conflict(e.to_string()))?;
    check_compatible(base, &next).map_err(Error::Conflict)?;
    Ok(next)
}

/// One metadata record. Values are stored as JSON scalars; their types are
/// given by the schema the record names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub record_id: String,
    pub kind: String,
    pub schema_version: u32,
    pub values: BTreeMap<String, Value>,
    pub origin_node: String,
}

/// `<origin_node>:<counter>`; the counter is zero-padded so lexical order
/// follows creation order within a node.
pub fn format_record_id(origin: &str, counter: u64) -> String {
    format!("{origin}:{counter:08}")
}

pub fn parse_record_id(id: &str) -> Option<(&str, u64)> {
    let (origin, counter) = id.rsplit_once(':')?;
    if origin.is_empty() || counter.is_empty() || !counter.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((origin, counter.parse().ok()?))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub attribute: String,
    pub problem: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}`: {}", self.attribute, self.problem)
    }
}

/// Every way `record` fails to conform to `schema`.
pub fn check_record(schema: &SchemaDescription, record: &MetadataRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |attribute: &str, problem: String| {
        out.push(Violation {
            attribute: attribute.to_owned(),
            problem,
        })
    };
    if record.kind != schema.name || record.schema_version != schema.version {
        push(
            "kind",
            format!(
                "record is {}/v{} but schema is {}/v{}",
                record.kind, record.schema_version, schema.name, schema.version
            ),
        );
    }
    match parse_record_id(&record.record_id) {
        Some((origin, _)) if origin == record.origin_node => {}
        Some(_) => push("record_id", "origin does not match origin_node".into()),
        None => push(
            "record_id",
            format!("`{}` is not `<node>:<counter>`", record.record_id),
        ),
    }
    for attr in &schema.attributes {
        match record.values.get(&attr.name) {
            None | Some(Value::Null) => {
                if attr.required {
                    push(&attr.name, "required attribute missing".into());
                }
            }
            Some(v) => {
                if let Err(problem) = attr.ty.check(v) {
                    push(&attr.name, problem);
                }
            }
        }
    }
    for name in record.values.keys() {
        if schema.attribute(name).is_none() {
            push(name, "attribute not in schema".into());
        }
    }
    out
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc())
}

const BASELINE_DOCS: [&str; 4] = [
    include_str!("../../schemas/patient.json"),
    include_str!("../../schemas/study.json"),
    include_str!("../../schemas/image.json"),
    include_str!("../../schemas/annotation.json"),
];

/// The four version-1 seed schemas: patient, study, image, annotation.
pub fn baseline_schemas() -> Vec<SchemaDescription> {
    BASELINE_DOCS
        .iter()
        .map(|doc| SchemaDescription::parse(doc).expect("baseline schemas are valid"))
        .collect()
}

/// Per-node registry addressable by `(name, version)`.
#[derive(Debug, Clone, Default)]
pub struct SchemaRegistry {
    schemas: BTreeMap<(String, u32), SchemaDescription>,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_baseline() -> Self {
        let mut reg = Self::new();
        for schema in baseline_schemas() {
            reg.register(schema).expect("baseline schemas are compatible");
        }
        reg
    }

    pub fn load_schema(&mut self, doc: &str) -> Result<SchemaDescription> {
        let schema = SchemaDescription::parse(doc)?;
        self.register(schema)
    }

    /// Registers a schema. Re-registering identical content is a no-op;
    /// different content under a taken `(name, version)`, or a version that
    /// breaks compatibility with its neighbours, is a conflict.
    pub fn register(&mut self, schema: SchemaDescription) -> Result<SchemaDescription> {
        schema.check()?;
        let key = (schema.name.clone(), schema.version);
        if let Some(existing) = self.schemas.get(&key) {
            return if *existing == schema {
                Ok(schema)
            } else {
                Err(Error::conflict(format!(
                    "{} v{} already registered with different content",
                    schema.name, schema.version
                )))
            };
        }
        if let Some(prev) = self.get(&schema.name, schema.version - 1) {
            check_compatible(prev, &schema).map_err(Error::Conflict)?;
        }
        if let Some(next) = self.get(&schema.name, schema.version + 1) {
            check_compatible(&schema, next).map_err(Error::Conflict)?;
        }
        self.schemas.insert(key, schema.clone());
        Ok(schema)
    }

    /// Derives and registers the next version of `name`.
    pub fn evolve(&mut self, name: &str, delta: &SchemaDelta) -> Result<SchemaDescription> {
        let base = self
            .latest(name)
            .ok_or_else(|| Error::not_found(format!("no schema for kind `{name}`")))?
            .clone();
        let next = evolve_schema(&base, delta)?;
        self.register(next)
    }

    pub fn get(&self, name: &str, version: u32) -> Option<&SchemaDescription> {
        self.schemas.get(&(name.to_owned(), version))
    }

    pub fn latest(&self, name: &str) -> Option<&SchemaDescription> {
        self.schemas
            .range((name.to_owned(), 0)..=(name.to_owned(), u32::MAX))
            .next_back()
            .map(|(_, s)| s)
    }

    pub fn kinds(&self) -> Vec<String> {
        let set: BTreeSet<_> = self.schemas.keys().map(|(n, _)| n.clone()).collect();
        set.into_iter().collect()
    }

    pub fn all(&self) -> impl Iterator<Item = &SchemaDescription> {
        self.schemas.values()
    }

    pub fn validate_record(&self, record: MetadataRecord) -> Result<MetadataRecord> {
        let schema = self
            .get(&record.kind, record.schema_version)
            .ok_or_else(|| {
                Error::not_found(format!(
                    "no schema {} v{}",
                    record.kind, record.schema_version
                ))
            })?;
        let violations = check_record(schema, &record);
        if violations.is_empty() {
            Ok(record)
        } else {
            let listing: Vec<String> = violations.iter().map(ToString::to_string).collect();
            Err(Error::malformed(format!(
                "record {} invalid: {}",
                record.record_id,
                listing.join("; ")
            )))
        }
    }
}

/// Annotation region geometry in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Point { x: f64, y: f64 },
    Circle { x: f64, y: f64, r: f64 },
    Polygon(Vec<(f64, f64)>),
}

impl Region {
    pub fn shape(&self) -> &'static str {
        match self {
            Region::Point { .. } => "point",
            Region::Circle { .. } => "circle",
            Region::Polygon(_) => "polygon",
        }
    }

    /// Space-separated coordinates as stored in `region_coords`.
    pub fn coords(&self) -> String {
        let nums: Vec<f64> = match self {
            Region::Point { x, y } => vec![*x, *y],
            Region::Circle { x, y, r } => vec![*x, *y, *r],
            Region::Polygon(pts) => pts.iter().flat_map(|(x, y)| [*x, *y]).collect(),
        };
        nums.iter()
            .map(|n| format!("{n}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse(shape: &str, coords: &str) -> Result<Region> {
        let nums = coords
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::malformed(format!("region coordinates: {e}")))?;
        match (shape, nums.as_slice()) {
            ("point", [x, y]) => Ok(Region::Point { x: *x, y: *y }),
            ("circle", [x, y, r]) if *r > 0.0 => Ok(Region::Circle {
                x: *x,
                y: *y,
                r: *r,
            }),
            ("polygon", pts) if pts.len() >= 6 && pts.len() % 2 == 0 => Ok(Region::Polygon(
                pts.chunks(2).map(|c| (c[0], c[1])).collect(),
            )),
            _ => Err(Error::malformed(format!(
                "`{coords}` is not a valid {shape} region"
            ))),
        }
    }
}
