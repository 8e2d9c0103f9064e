//! Transfer reports and their text, CSV and JSON-lines renderings.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const CSV_HEADER: &str = "scenario,config,run,throughput_bps,transfer_s,integrity_s,retries";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileOutcome {
    pub file_id: u64,
    pub source: String,
    pub destination: String,
    pub size: u64,
    pub chunk_size: u64,
    pub chunks: u64,
    pub verified: bool,
    pub transfer_s: f64,
    pub integrity_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: u32,
    /// Chunks whose payload this session moved.
    pub chunks: u64,
    pub payload_bytes: u64,
    pub lost: bool,
}

/// A digest comparison that failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub file_id: u64,
    pub source: String,
    pub destination: String,
    pub offset: u64,
    pub length: u64,
    pub attempt: u32,
    pub source_digest: String,
    pub destination_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRetries {
    pub file_id: u64,
    pub chunk_index: u64,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub transfer_id: String,
    pub files: Vec<FileOutcome>,
    /// Sum of file sizes delivered.
    pub bytes_moved: u64,
    /// Payload bytes stored by this run, counting every attempt.
    pub payload_bytes: u64,
    pub wall_s: f64,
    pub transfer_s: f64,
    pub integrity_s: f64,
    /// Time during which checksums ran while payload was in flight.
    pub overlap_s: f64,
    /// Chunk retransmissions.
    pub retries: u64,
    pub chunk_retries: Vec<ChunkRetries>,
    pub mismatches: Vec<Mismatch>,
    pub sessions: Vec<SessionSummary>,
    pub throughput_bps: f64,
}

impl TransferReport {
    /// Sessions that moved at least one payload byte.
    pub fn payload_sessions(&self) -> usize {
        self.sessions.iter().filter(|s| s.payload_bytes > 0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    JsonLines,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "json-lines" | "jsonl" => Ok(ReportFormat::JsonLines),
            _ => Err(format!(
                "unknown report format {s:?} (text, csv, json-lines)"
            )),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Text => "text",
            ReportFormat::Csv => "csv",
            ReportFormat::JsonLines => "json-lines",
        })
    }
}

/// One row of benchmark CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub scenario: String,
    pub config: String,
    /// Repetition index, or a summary label such as "mean".
    pub run: String,
    pub throughput_bps: f64,
    pub transfer_s: f64,
    pub integrity_s: f64,
    pub retries: f64,
}

impl CsvRow {
    pub fn from_report(scenario: &str, config: &str, run: usize, r: &TransferReport) -> Self {
        CsvRow {
            scenario: scenario.into(),
            config: config.into(),
            run: run.to_string(),
            throughput_bps: r.throughput_bps,
            transfer_s: r.transfer_s,
            integrity_s: r.integrity_s,
            retries: r.retries as f64,
        }
    }

    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{:.0},{:.3},{:.3},{}",
            csv_field(&self.scenario),
            csv_field(&self.config),
            csv_field(&self.run),
            self.throughput_bps,
            self.transfer_s,
            self.integrity_s,
            trim_float(self.retries)
        )
    }
}

fn trim_float(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn bar(secs: f64, scale: f64, ch: char) -> String {
    let n = if scale > 0.0 {
        ((secs / scale) * 40.0).round() as usize
    } else {
        0
    };
    std::iter::repeat_n(ch, n.min(40)).collect()
}

/// Writes `report` in the given format. `config` labels the CSV row.
pub fn emit_report<W: Write>(
    out: &mut W,
    report: &TransferReport,
    format: ReportFormat,
    config: &str,
) -> io::Result<()> {
    match format {
        ReportFormat::Text => {
            writeln!(out, "transfer {}", report.transfer_id)?;
            let scale = report
                .files
                .iter()
                .map(|f| f.transfer_s + f.integrity_s)
                .fold(0.0, f64::max);
            for f in &report.files {
                writeln!(
                    out,
                    "  {} -> {}  {} bytes, {} chunk(s) of {}  {}",
                    f.source,
                    f.destination,
                    f.size,
                    f.chunks,
                    f.chunk_size,
                    if f.verified { "ok" } else { "INCOMPLETE" }
                )?;
                writeln!(
                    out,
                    "    transfer  {:>9.3} s |{}",
                    f.transfer_s,
                    bar(f.transfer_s, scale, '#')
                )?;
                writeln!(
                    out,
                    "    integrity {:>9.3} s |{}{}",
                    f.integrity_s,
                    " ".repeat(bar(f.transfer_s, scale, '#').len()),
                    bar(f.integrity_s, scale, '=')
                )?;
            }
            writeln!(
                out,
                "total: {} bytes in {:.3} s ({:.3} s transfer + {:.3} s integrity), {:.1} Mbit/s, {} retransmission(s)",
                report.bytes_moved,
                report.wall_s,
                report.transfer_s,
                report.integrity_s,
                report.throughput_bps / 1e6,
                report.retries
            )?;
        }
        ReportFormat::Csv => {
            writeln!(out, "{CSV_HEADER}")?;
            writeln!(
                out,
                "{}",
                CsvRow::from_report("transfer", config, 0, report).to_line()
            )?;
        }
        ReportFormat::JsonLines => {
            let mut summary = serde_json::to_value(report).map_err(io::Error::other)?;
            if let Some(obj) = summary.as_object_mut() {
                obj.remove("files");
                obj.insert("record".into(), "transfer".into());
            }
            writeln!(out, "{summary}")?;
            for f in &report.files {
                let mut v = serde_json::to_value(f).map_err(io::Error::other)?;
                if let Some(obj) = v.as_object_mut() {
                    obj.insert("record".into(), "file".into());
                }
                writeln!(out, "{v}")?;
            }
        }
    }
    Ok(())
}
