//! CSV and JSONL writers. Numbers use the shortest representation that
//! round-trips, so repeated runs produce identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

pub fn write_text(path: &Path, text: &str) -> std::io::Result<()> {
    std::fs::write(path, text)
}

/// Shortest round-trip decimal; `nan`, `inf` and `-inf` for non-finite values.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        serde_json::Number::from_f64(x).expect("finite").to_string()
    }
}

/// Comma-separated table with a header row and LF line endings.
pub struct Csv {
    text: String,
    width: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv { text: format!("{}\n", header.join(",")), width: header.len() }
    }

    pub fn row(&mut self, cells: &[String]) {
        debug_assert_eq!(cells.len(), self.width);
        let _ = writeln!(self.text, "{}", cells.join(","));
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        write_text(path, &self.text)
    }
}

/// One JSON object per line.
pub fn jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}
