//! Trace files. CSV has a time-first header row and 17 significant digits per
//! value, with metadata in a `<file>.meta.json` sidecar. JSON is a single
//! schema-versioned object with one array per channel.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ExportError;
use crate::sim::{Marker, TraceRecorder};

pub const TRACE_SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Csv,
    Json,
}

impl FromStr for TraceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TraceFormat::Csv),
            "json" => Ok(TraceFormat::Json),
            other => Err(format!("unknown trace format {other:?}; expected csv or json")),
        }
    }
}

impl TraceFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TraceFormat::Csv => "csv",
            TraceFormat::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub schema_version: String,
    pub scenario: String,
    pub tool_version: String,
    /// ISO-8601 creation time; absent in reproducible output.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
    pub sample_period: f64,
    pub samples: usize,
    pub channels: Vec<String>,
    pub markers: Vec<Marker>,
}

impl TraceMetadata {
    pub fn new(scenario: &str, trace: &TraceRecorder, created: Option<String>) -> Self {
        TraceMetadata {
            schema_version: TRACE_SCHEMA_VERSION.into(),
            scenario: scenario.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            created,
            sample_period: trace.sample_period,
            samples: trace.len(),
            channels: trace.names.clone(),
            markers: trace.markers.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonTrace {
    #[serde(flatten)]
    pub meta: TraceMetadata,
    pub time: Vec<f64>,
    pub data: serde_json::Map<String, serde_json::Value>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io { path: path.display().to_string(), source }
}

fn fmt_err(path: &Path, message: impl ToString) -> ExportError {
    ExportError::Format { path: path.display().to_string(), message: message.to_string() }
}

/// Sidecar path for a CSV trace.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Round-trip exact rendering: 17 significant digits.
pub fn format_value(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv(trace: &TraceRecorder, path: &Path, meta: &TraceMetadata) -> Result<(), ExportError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| fmt_err(path, e);
    let mut header = vec!["time"];
    header.extend(trace.names.iter().map(String::as_str));
    w.write_record(&header).map_err(csv_err)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for (i, t) in trace.time.iter().enumerate() {
        row.clear();
        row.push(format_value(*t));
        row.extend(trace.data.iter().map(|c| format_value(c[i])));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(meta).map_err(|e| fmt_err(&side, e))?;
    std::fs::write(&side, text + "\n").map_err(io_err(&side))
}

pub fn read_csv(path: &Path) -> Result<TraceRecorder, ExportError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers().map_err(|e| fmt_err(path, e))?.clone();
    if header.get(0) != Some("time") {
        return Err(fmt_err(path, "first column must be time"));
    }
    let names: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let mut trace = TraceRecorder::new(names, 0.0);
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| fmt_err(path, e))?;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| fmt_err(path, format!("row {}: {e}", line + 2)));
        trace.time.push(parse(&rec[0])?);
        for (j, col) in trace.data.iter_mut().enumerate() {
            col.push(parse(rec.get(j + 1).ok_or_else(|| fmt_err(path, format!("row {}: short row", line + 2)))?)?);
        }
    }
    let side = sidecar_path(path);
    if let Ok(text) = std::fs::read_to_string(&side) {
        let meta: TraceMetadata = serde_json::from_str(&text).map_err(|e| fmt_err(&side, e))?;
        trace.sample_period = meta.sample_period;
        trace.markers = meta.markers;
    }
    Ok(trace)
}

pub fn to_json(trace: &TraceRecorder, meta: &TraceMetadata) -> JsonTrace {
    let data = trace
        .names
        .iter()
        .zip(&trace.data)
        .map(|(n, c)| (n.clone(), serde_json::Value::from(c.clone())))
        .collect();
    JsonTrace { meta: meta.clone(), time: trace.time.clone(), data }
}

pub fn write_json(trace: &TraceRecorder, path: &Path, meta: &TraceMetadata) -> Result<(), ExportError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &to_json(trace, meta)).map_err(|e| fmt_err(path, e))?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_json(path: &Path) -> Result<TraceRecorder, ExportError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let doc: JsonTrace = serde_json::from_str(&text).map_err(|e| fmt_err(path, e))?;
    let mut trace = TraceRecorder::new(doc.meta.channels.clone(), doc.meta.sample_period);
    trace.time = doc.time;
    trace.markers = doc.meta.markers;
    for (j, name) in doc.meta.channels.iter().enumerate() {
        let col = doc.data.get(name).ok_or_else(|| fmt_err(path, format!("missing channel {name}")))?;
        trace.data[j] = serde_json::from_value(col.clone()).map_err(|e| fmt_err(path, format!("{name}: {e}")))?;
    }
    Ok(trace)
}

pub fn write_trace(trace: &TraceRecorder, path: &Path, format: TraceFormat, meta: &TraceMetadata) -> Result<(), ExportError> {
    match format {
        TraceFormat::Csv => write_csv(trace, path, meta),
        TraceFormat::Json => write_json(trace, path, meta),
    }
}

/// Reads a trace, choosing the format from the file extension.
pub fn read_trace(path: &Path) -> Result<TraceRecorder, ExportError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => read_json(path),
        _ => read_csv(path),
    }
}

/// Metadata stored with a trace: the JSON header or the CSV sidecar, if any.
pub fn read_metadata(path: &Path) -> Result<Option<TraceMetadata>, ExportError> {
    let (src, is_json) = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => (path.to_path_buf(), true),
        _ => (sidecar_path(path), false),
    };
    let text = match std::fs::read_to_string(&src) {
        Ok(t) => t,
        Err(e) if !is_json && e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(&src)(e)),
    };
    serde_json::from_str(&text).map(Some).map_err(|e| fmt_err(&src, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TraceRecorder {
        let mut t = TraceRecorder::new(vec!["a".into(), "b,c".into()], 0.1);
        t.time = vec![0.0, 0.1, 0.2];
        t.data = vec![vec![1.0 / 3.0, -0.0, 1e-300], vec![std::f64::consts::PI, 2.7307620632981266e-2, -7.0]];
        t
    }

    #[test]
    fn empty_trace_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let t = TraceRecorder::new(vec!["p_1".into()], 1e-4);
        write_csv(&t, &p, &TraceMetadata::new("x", &t, None)).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "time,p_1\n");
        assert!(sidecar_path(&p).exists());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let t = sample();
        write_csv(&t, &p, &TraceMetadata::new("x", &t, Some("2026-01-01T00:00:00Z".into()))).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("time,a,\"b,c\"\n"));
        let back = read_csv(&p).unwrap();
        assert_eq!(back.names, t.names);
        for (x, y) in back.data.iter().flatten().zip(t.data.iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back.sample_period, 0.1);
        assert_eq!(read_metadata(&p).unwrap().unwrap().created.as_deref(), Some("2026-01-01T00:00:00Z"));
        assert!(read_metadata(&dir.path().join("none.csv")).unwrap().is_none());
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        let t = sample();
        write_json(&t, &p, &TraceMetadata::new("x", &t, None)).unwrap();
        let back = read_trace(&p).unwrap();
        for (x, y) in back.data.iter().flatten().zip(t.data.iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(doc["schema_version"], TRACE_SCHEMA_VERSION);
    }

    #[test]
    fn io_errors_carry_the_path() {
        let t = sample();
        let p = Path::new("/nonexistent/dir/t.csv");
        let e = write_csv(&t, p, &TraceMetadata::new("x", &t, None)).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/dir/t.csv"));
    }

    #[test]
    fn format_names() {
        assert_eq!("CSV".parse::<TraceFormat>().unwrap(), TraceFormat::Csv);
        assert!("xml".parse::<TraceFormat>().is_err());
    }
}
