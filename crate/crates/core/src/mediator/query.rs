//! The clinician query language.
//!
//! ```text
//! query     = "FIND" kind [ "PROJECT" attr { "," attr } ]
//!             [ "WHERE" or_expr ] [ "AT" node { "," node } ] ;
//! or_expr   = and_expr { "OR" and_expr } ;
//! and_expr  = unary { "AND" unary } ;
//! unary     = "NOT" unary | "(" or_expr ")" | attr op literal ;
//! op        = "=" | "!=" | "<>" | "≠" | "<" | "<=" | "≤" | ">" | ">=" | "≥" ;
//! literal   = integer | real | word | '"' { char | '\"' | '\\' } '"' ;
//! ```
//!
//! Keywords are case-insensitive. A word is any run of characters other
//! than whitespace, `(`, `)`, `,`, `"` and operator characters; a word that
//! parses as an integer or real is numeric, anything else is text. Syntax
//! errors report the 1-based index of the offending token, counting the end
//! of input as one past the last token.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::metamodel::{parse_timestamp, AttrType, SchemaDescription, SchemaRegistry};
use crate::{Error, Result};

const KEYWORDS: [&str; 7] = ["FIND", "PROJECT", "WHERE", "AT", "AND", "OR", "NOT"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    pub fn holds(self, ord: Ordering) -> bool {
        match self {
            CmpOp::Eq => ord == Ordering::Equal,
            CmpOp::Ne => ord != Ordering::Equal,
            CmpOp::Lt => ord == Ordering::Less,
            CmpOp::Le => ord != Ordering::Greater,
            CmpOp::Gt => ord == Ordering::Greater,
            CmpOp::Ge => ord != Ordering::Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Int(i64),
    Real(f64),
    Text(String),
}

impl Literal {
    /// Classifies an unquoted word.
    fn from_word(word: &str) -> Literal {
        if let Ok(i) = word.parse::<i64>() {
            return Literal::Int(i);
        }
        if looks_numeric(word) {
            if let Ok(r) = word.parse::<f64>() {
                if r.is_finite() {
                    return Literal::Real(r);
                }
            }
        }
        Literal::Text(word.to_owned())
    }

    fn as_f64(&self) -> Option<f64> {
        match self {
            Literal::Int(i) => Some(*i as f64),
            Literal::Real(r) => Some(*r),
            Literal::Text(_) => None,
        }
    }
}

fn looks_numeric(word: &str) -> bool {
    let body = word.strip_prefix(['+', '-']).unwrap_or(word);
    let body = body.strip_prefix('.').unwrap_or(body);
    body.starts_with(|c: char| c.is_ascii_digit())
}

fn is_word_char(c: char) -> bool {
    !c.is_whitespace() && !matches!(c, '(' | ')' | ',' | '"' | '=' | '!' | '<' | '>' | '≠' | '≤' | '≥')
}

fn is_keyword(word: &str) -> bool {
    KEYWORDS.iter().any(|k| k.eq_ignore_ascii_case(word))
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Int(i) => write!(f, "{i}"),
            Literal::Real(r) => write!(f, "{r:?}"),
            Literal::Text(s) => {
                let bare = !s.is_empty()
                    && s.chars().all(is_word_char)
                    && !is_keyword(s)
                    && Literal::from_word(s) == Literal::Text(s.clone());
                if bare {
                    f.write_str(s)
                } else {
                    f.write_str("\"")?;
                    for c in s.chars() {
                        if matches!(c, '"' | '\\') {
                            f.write_str("\\")?;
                        }
                        write!(f, "{c}")?;
                    }
                    f.write_str("\"")
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Cmp {
        attr: String,
        op: CmpOp,
        value: Literal,
    },
    Not(Box<Predicate>),
    And(Box<Predicate>, Box<Predicate>),
    Or(Box<Predicate>, Box<Predicate>),
}

impl Predicate {
    pub fn cmp(attr: impl Into<String>, op: CmpOp, value: Literal) -> Predicate {
        Predicate::Cmp {
            attr: attr.into(),
            op,
            value,
        }
    }

    pub fn and(self, other: Predicate) -> Predicate {
        Predicate::And(Box::new(self), Box::new(other))
    }

    pub fn or(self, other: Predicate) -> Predicate {
        Predicate::Or(Box::new(self), Box::new(other))
    }

    pub fn negate(self) -> Predicate {
        Predicate::Not(Box::new(self))
    }

    /// Attributes referenced anywhere in the tree.
    pub fn attributes(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.visit(&mut |p| {
            if let Predicate::Cmp { attr, .. } = p {
                out.push(attr.as_str());
            }
        });
        out
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Predicate)) {
        f(self);
        match self {
            Predicate::Cmp { .. } => {}
            Predicate::Not(p) => p.visit(f),
            Predicate::And(a, b) | Predicate::Or(a, b) => {
                a.visit(f);
                b.visit(f);
            }
        }
    }

    /// Evaluates against a record's values. Attribute types come from
    /// `schema`; a comparison on an absent attribute is false.
    pub fn eval(&self, schema: &SchemaDescription, values: &BTreeMap<String, Value>) -> bool {
        match self {
            Predicate::Cmp { attr, op, value } => {
                let (Some(stored), Some(def)) = (values.get(attr), schema.attribute(attr)) else {
                    return false;
                };
                compare(&def.ty, stored, value).is_some_and(|ord| op.holds(ord))
            }
            Predicate::Not(p) => !p.eval(schema, values),
            Predicate::And(a, b) => a.eval(schema, values) && b.eval(schema, values),
            Predicate::Or(a, b) => a.eval(schema, values) || b.eval(schema, values),
        }
    }

    fn fmt_child(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::And(..) | Predicate::Or(..) => write!(f, "({self})"),
            _ => write!(f, "{self}"),
        }
    }
}

/// Orders a stored value against a literal under the attribute's type.
fn compare(ty: &AttrType, stored: &Value, lit: &Literal) -> Option<Ordering> {
    match ty {
        AttrType::Integer => match (stored.as_i64(), lit) {
            (Some(v), Literal::Int(l)) => Some(v.cmp(l)),
            (Some(v), Literal::Real(l)) => (v as f64).partial_cmp(l),
            _ => None,
        },
        AttrType::Real => stored.as_f64()?.partial_cmp(&lit.as_f64()?),
        AttrType::Timestamp => match lit {
            Literal::Text(l) => Some(parse_timestamp(stored.as_str()?)?.cmp(&parse_timestamp(l)?)),
            _ => None,
        },
        AttrType::String | AttrType::Enum { .. } | AttrType::LfnRef => match lit {
            Literal::Text(l) => Some(stored.as_str()?.cmp(l.as_str())),
            _ => None,
        },
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Cmp { attr, op, value } => write!(f, "{attr} {} {value}", op.symbol()),
            Predicate::Not(p) => {
                f.write_str("NOT ")?;
                p.fmt_child(f)
            }
            Predicate::And(a, b) | Predicate::Or(a, b) => {
                a.fmt_child(f)?;
                f.write_str(if matches!(self, Predicate::And(..)) { " AND " } else { " OR " })?;
                b.fmt_child(f)
            }
        }
    }
}

impl FromStr for Predicate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Predicate> {
        let tokens = lex(s)?;
        let mut p = Parser { tokens, pos: 0 };
        let pred = p.or_expr()?;
        p.expect_end()?;
        Ok(pred)
    }
}

impl Serialize for Predicate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Predicate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub kind: String,
    /// `None` projects every attribute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<Predicate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site_filter: Option<Vec<String>>,
}

impl Query {
    pub fn new(kind: impl Into<String>) -> Query {
        Query {
            kind: kind.into(),
            projection: None,
            predicate: None,
            site_filter: None,
        }
    }

    pub fn with_predicate(mut self, predicate: Predicate) -> Query {
        self.predicate = Some(predicate);
        self
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FIND {}", self.kind)?;
        if let Some(attrs) = &self.projection {
            write!(f, " PROJECT {}", attrs.join(","))?;
        }
        if let Some(pred) = &self.predicate {
            write!(f, " WHERE {pred}")?;
        }
        if let Some(nodes) = &self.site_filter {
            write!(f, " AT {}", nodes.join(","))?;
        }
        Ok(())
    }
}

impl FromStr for Query {
    type Err = Error;

    fn from_str(s: &str) -> Result<Query> {
        parse_query(s)
    }
}

/// Parses query text into an AST. Only syntax is checked here; see
/// [`check_query`] for schema checks.
pub fn parse_query(text: &str) -> Result<Query> {
    let tokens = lex(text)?;
    let mut p = Parser { tokens, pos: 0 };
    p.keyword("FIND")?;
    let mut q = Query::new(p.ident("record kind")?);
    if p.eat_keyword("PROJECT") {
        q.projection = Some(p.list(|p| p.ident("attribute name"))?);
    }
    if p.eat_keyword("WHERE") {
        q.predicate = Some(p.or_expr()?);
    }
    if p.eat_keyword("AT") {
        q.site_filter = Some(p.list(|p| {
            let (pos, word) = p.word("node id")?;
            if crate::catalogue::is_component(&word) {
                Ok(word)
            } else {
                Err(syntax(pos, format!("`{word}` is not a valid node id")))
            }
        })?);
    }
    p.expect_end()?;
    Ok(q)
}

/// Rejects queries naming an unknown kind or attribute, or comparing an
/// attribute with a literal of the wrong type.
pub fn check_query(q: &Query, registry: &SchemaRegistry) -> Result<()> {
    let schema = registry
        .latest(&q.kind)
        .ok_or_else(|| Error::malformed(format!("unknown record kind `{}`", q.kind)))?;
    for attr in q.projection.iter().flatten() {
        if schema.attribute(attr).is_none() {
            return Err(Error::malformed(format!("`{}` has no attribute `{attr}`", q.kind)));
        }
    }
    if let Some(pred) = &q.predicate {
        check_predicate(pred, schema)?;
    }
    Ok(())
}

pub fn check_predicate(pred: &Predicate, schema: &SchemaDescription) -> Result<()> {
    let mut result = Ok(());
    pred.visit(&mut |p| {
        if result.is_err() {
            return;
        }
        if let Predicate::Cmp { attr, value, .. } = p {
            result = check_comparison(schema, attr, value);
        }
    });
    result
}

fn check_comparison(schema: &SchemaDescription, attr: &str, value: &Literal) -> Result<()> {
    let def = schema
        .attribute(attr)
        .ok_or_else(|| Error::malformed(format!("`{}` has no attribute `{attr}`", schema.name)))?;
    let problem = match (&def.ty, value) {
        (AttrType::Integer | AttrType::Real, Literal::Int(_) | Literal::Real(_)) => None,
        (AttrType::Integer | AttrType::Real, Literal::Text(t)) => {
            Some(format!("`{attr}` is numeric, `{t}` is not a number"))
        }
        (AttrType::Timestamp, Literal::Text(t)) if parse_timestamp(t).is_none() => {
            Some(format!("`{t}` is not a date or timestamp"))
        }
        (AttrType::Enum { values }, Literal::Text(t)) if !values.contains(t) => {
            Some(format!("`{t}` is not one of {values:?}"))
        }
        (AttrType::String | AttrType::Timestamp | AttrType::Enum { .. } | AttrType::LfnRef, Literal::Text(_)) => None,
        (_, lit) => Some(format!("`{attr}` is textual; quote `{lit}` to compare it as text")),
    };
    match problem {
        Some(p) => Err(Error::malformed(p)),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Quoted(String),
    Op(CmpOp),
    Comma,
    LParen,
    RParen,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Word(w) => write!(f, "`{w}`"),
            Tok::Quoted(q) => write!(f, "\"{q}\""),
            Tok::Op(op) => write!(f, "`{}`", op.symbol()),
            Tok::Comma => f.write_str("`,`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
        }
    }
}

fn syntax(position: usize, message: impl Into<String>) -> Error {
    Error::QuerySyntax {
        position,
        message: message.into(),
    }
}

fn lex(text: &str) -> Result<Vec<Tok>> {
    let mut tokens = Vec::new();
    lex_into(text, &mut tokens)?;
    Ok(tokens.into_iter().map(|(_, tok)| tok).collect())
}

/// Lexes into `tokens` with the byte range of each token; on error the
/// tokens before the offending one are kept.
fn lex_into(text: &str, tokens: &mut Vec<(std::ops::Range<usize>, Tok)>) -> Result<()> {
    let mut chars = text.char_indices().peekable();
    while let Some(&(begin, c)) = chars.peek() {
        let position = tokens.len() + 1;
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        let tok = match c {
            '(' | ')' | ',' | '=' | '≠' | '≤' | '≥' => {
                chars.next();
                match c {
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    ',' => Tok::Comma,
                    '=' => Tok::Op(CmpOp::Eq),
                    '≠' => Tok::Op(CmpOp::Ne),
                    '≤' => Tok::Op(CmpOp::Le),
                    _ => Tok::Op(CmpOp::Ge),
                }
            }
            '!' => {
                chars.next();
                if chars.next_if(|&(_, c)| c == '=').is_none() {
                    return Err(syntax(position, "`!` must be followed by `=`"));
                }
                Tok::Op(CmpOp::Ne)
            }
            '<' => {
                chars.next();
                if chars.next_if(|&(_, c)| c == '=').is_some() {
                    Tok::Op(CmpOp::Le)
                } else if chars.next_if(|&(_, c)| c == '>').is_some() {
                    Tok::Op(CmpOp::Ne)
                } else {
                    Tok::Op(CmpOp::Lt)
                }
            }
            '>' => {
                chars.next();
                if chars.next_if(|&(_, c)| c == '=').is_some() {
                    Tok::Op(CmpOp::Ge)
                } else {
                    Tok::Op(CmpOp::Gt)
                }
            }
            '"' => {
                chars.next();
                let mut s = String::new();
                loop {
                    match chars.next().map(|(_, c)| c) {
                        None => return Err(syntax(position, "unterminated string literal")),
                        Some('"') => break,
                        Some('\\') => match chars.next().map(|(_, c)| c) {
                            Some(e @ ('"' | '\\')) => s.push(e),
                            _ => return Err(syntax(position, "only \\\" and \\\\ escapes are allowed")),
                        },
                        Some(other) => s.push(other),
                    }
                }
                Tok::Quoted(s)
            }
            _ => {
                let mut w = String::new();
                while let Some((_, c)) = chars.next_if(|&(_, c)| is_word_char(c)) {
                    w.push(c);
                }
                Tok::Word(w)
            }
        };
        let end = chars.peek().map_or(text.len(), |&(i, _)| i);
        tokens.push((begin..end, tok));
    }
    Ok(())
}

/// Byte offset in `text` of the token a [`Error::QuerySyntax`] position
/// refers to; past the last token it is the end of the trimmed text.
pub fn token_offset(text: &str, position: usize) -> usize {
    let mut tokens = Vec::new();
    let _ = lex_into(text, &mut tokens);
    match tokens.get(position.saturating_sub(1)) {
        Some((range, _)) => range.start,
        None => {
            let after = tokens.last().map_or(0, |(range, _)| range.end);
            after + (text[after..].len() - text[after..].trim_start().len())
        }
    }
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn position(&self) -> usize {
        self.pos + 1
    }

    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn unexpected(&self, wanted: &str) -> Error {
        match self.peek() {
            Some(tok) => syntax(self.position(), format!("expected {wanted}, found {tok}")),
            None => syntax(self.position(), format!("expected {wanted}, found end of query")),
        }
    }

    fn peek_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(w)) if w.eq_ignore_ascii_case(kw))
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        let hit = self.peek_keyword(kw);
        if hit {
            self.pos += 1;
        }
        hit
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(self.unexpected(kw))
        }
    }

    fn word(&mut self, what: &str) -> Result<(usize, String)> {
        match self.peek() {
            Some(Tok::Word(w)) if !is_keyword(w) => {
                let w = w.clone();
                let at = self.position();
                self.pos += 1;
                Ok((at, w))
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn ident(&mut self, what: &str) -> Result<String> {
        let (at, w) = self.word(what)?;
        if crate::metamodel::is_identifier(&w) {
            Ok(w)
        } else {
            Err(syntax(at, format!("`{w}` is not a valid {what}")))
        }
    }

    fn list<T>(&mut self, mut item: impl FnMut(&mut Parser) -> Result<T>) -> Result<Vec<T>> {
        let mut out = vec![item(self)?];
        while self.peek() == Some(&Tok::Comma) {
            self.pos += 1;
            out.push(item(self)?);
        }
        Ok(out)
    }

    fn expect_end(&self) -> Result<()> {
        if self.peek().is_none() {
            Ok(())
        } else {
            Err(self.unexpected("end of query"))
        }
    }

    fn or_expr(&mut self) -> Result<Predicate> {
        let mut lhs = self.and_expr()?;
        while self.eat_keyword("OR") {
            lhs = lhs.or(self.and_expr()?);
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Predicate> {
        let mut lhs = self.unary()?;
        while self.eat_keyword("AND") {
            lhs = lhs.and(self.unary()?);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Predicate> {
        if self.eat_keyword("NOT") {
            return Ok(self.unary()?.negate());
        }
        if self.peek() == Some(&Tok::LParen) {
            self.pos += 1;
            let inner = self.or_expr()?;
            if self.peek() != Some(&Tok::RParen) {
                return Err(self.unexpected("`)`"));
            }
            self.pos += 1;
            return Ok(inner);
        }
        let attr = self.ident("attribute name")?;
        let op = match self.peek() {
            Some(Tok::Op(op)) => *op,
            _ => return Err(self.unexpected("comparison operator")),
        };
        self.pos += 1;
        let value = match self.peek() {
            Some(Tok::Quoted(s)) => Literal::Text(s.clone()),
            Some(Tok::Word(w)) if !is_keyword(w) => Literal::from_word(w),
            _ => return Err(self.unexpected("literal")),
        };
        self.pos += 1;
        Ok(Predicate::cmp(attr, op, value))
    }
}
