//! Deterministic CSV and report output, written atomically.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

/// Shortest decimal that round-trips, switching to exponent form for very
/// large or very small magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// A CSV table with a fixed header and LF line endings.
#[derive(Debug, Clone)]
pub struct Csv {
    columns: usize,
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut text = header.join(",");
        text.push('\n');
        Self {
            columns: header.len(),
            text,
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        assert_eq!(cells.len(), self.columns, "row width differs from the header");
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

/// A plain-text report of `[section]` headers and `key = value` lines. The
/// `timing` section is always last so that everything above it is
/// reproducible byte for byte.
#[derive(Debug, Clone, Default)]
pub struct Report {
    text: String,
    timing: Vec<(String, String)>,
}

impl Report {
    pub fn section(&mut self, name: &str) {
        if !self.text.is_empty() {
            self.text.push('\n');
        }
        let _ = writeln!(self.text, "[{name}]");
    }

    pub fn kv(&mut self, key: &str, value: impl std::fmt::Display) {
        let _ = writeln!(self.text, "{key} = {value}");
    }

    pub fn num(&mut self, key: &str, value: f64) {
        self.kv(key, fmt_f64(value));
    }

    pub fn block(&mut self, text: &str) {
        for line in text.lines() {
            let _ = writeln!(self.text, "  {line}");
        }
    }

    pub fn timing(&mut self, key: &str, seconds: f64) {
        self.timing.push((key.to_string(), format!("{seconds:.3}")));
    }

    pub fn render(&self) -> String {
        let mut out = self.text.clone();
        if !self.timing.is_empty() {
            out.push_str("\n[timing]\n");
            for (k, v) in &self.timing {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory followed by a rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
