//! Deterministic experiment reports: canonical JSON, a text summary and CSV tables.
//!
//! Keys are sorted, every float is written as `%.12e` and non-finite values become `null`,
//! so the same results always produce the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Text,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// A CSV dump; cells are JSON values so floats share the report format.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header).expect("writing to memory");
        for row in &self.rows {
            w.write_record(row.iter().map(cell)).expect("writing to memory");
        }
        w.into_inner().expect("writing to memory")
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(cell).collect::<Vec<_>>().join(" "),
        other => {
            let mut s = String::new();
            write_compact(other, &mut s);
            s
        }
    }
}

/// Results of one experiment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub kind: Option<String>,
    pub config: Value,
    pub results: BTreeMap<String, Value>,
    pub verdicts: Vec<Verdict>,
    /// Written next to the report as `<name>.csv`.
    pub tables: BTreeMap<String, Table>,
}

impl Report {
    pub fn new(kind: &str, config: Value) -> Self {
        Report { kind: Some(kind.to_string()), config, ..Default::default() }
    }

    pub fn insert<T: Serialize>(&mut self, key: &str, value: &T) {
        self.results.insert(key.to_string(), to_value(value));
    }

    pub fn verdict(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.verdicts.push(Verdict { name: name.to_string(), pass, detail: detail.into() });
    }

    pub fn pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn to_value(&self) -> Value {
        let mut m = serde_json::Map::new();
        m.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
        m.insert("kind".into(), self.kind.clone().map_or(Value::Null, Value::String));
        m.insert("config".into(), self.config.clone());
        m.insert("results".into(), Value::Object(self.results.clone().into_iter().collect()));
        m.insert("verdicts".into(), to_value(&self.verdicts));
        m.insert("pass".into(), Value::Bool(self.pass()));
        Value::Object(m)
    }
}

/// `serde_json::to_value` with non-finite floats mapped to `null`.
pub fn to_value<T: Serialize + ?Sized>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn write_number(n: &serde_json::Number, out: &mut String) {
    if n.is_f64() {
        match n.as_f64() {
            Some(x) if x.is_finite() => {
                let _ = write!(out, "{x:.12e}");
            }
            _ => out.push_str("null"),
        }
    } else {
        let _ = write!(out, "{n}");
    }
}

fn write_string(s: &str, out: &mut String) {
    out.push_str(&serde_json::to_string(s).expect("strings serialize"));
}

fn write_compact(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => write_number(n, out),
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push('[');
            for (i, x) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_compact(x, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, x)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_string(k, out);
                out.push(':');
                write_compact(x, out);
            }
            out.push('}');
        }
    }
}

fn write_pretty(v: &Value, indent: usize, out: &mut String) {
    let pad = |out: &mut String, n: usize| out.extend(std::iter::repeat(' ').take(2 * n));
    match v {
        Value::Array(items) if !items.is_empty() => {
            // arrays of scalars stay on one line
            if items.iter().all(|x| !x.is_array() && !x.is_object()) {
                return write_compact(v, out);
            }
            out.push_str("[\n");
            for (i, x) in items.iter().enumerate() {
                pad(out, indent + 1);
                write_pretty(x, indent + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(out, indent);
            out.push(']');
        }
        Value::Object(map) if !map.is_empty() => {
            out.push_str("{\n");
            for (i, (k, x)) in map.iter().enumerate() {
                pad(out, indent + 1);
                write_string(k, out);
                out.push_str(": ");
                write_pretty(x, indent + 1, out);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            pad(out, indent);
            out.push('}');
        }
        other => write_compact(other, out),
    }
}

/// Canonical JSON text of a value: sorted keys, two-space indent, `%.12e` floats.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_pretty(v, 0, &mut out);
    out.push('\n');
    out
}

fn summary_text(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "mfglab report, schema {SCHEMA_VERSION}");
    let _ = writeln!(out, "kind: {}", report.kind.as_deref().unwrap_or("none"));
    for v in &report.verdicts {
        let _ = writeln!(out, "{}  {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
    }
    let _ = writeln!(out, "overall: {}", if report.pass() { "PASS" } else { "FAIL" });
    out
}

fn verdict_table(report: &Report) -> Table {
    let mut t = Table::new(["name", "pass", "detail"]);
    for v in &report.verdicts {
        t.push(vec![Value::from(v.name.clone()), Value::Bool(v.pass), Value::from(v.detail.clone())]);
    }
    t
}

/// Serialize a report. CSV output is the verdict table; the other tables are emitted with [`Table::to_csv`].
pub fn emit_report(report: &Report, format: Format) -> Vec<u8> {
    match format {
        Format::Json => canonical_json(&report.to_value()).into_bytes(),
        Format::Text => summary_text(report).into_bytes(),
        Format::Csv => verdict_table(report).to_csv(),
    }
}
