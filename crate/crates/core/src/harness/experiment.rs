//! Scenario files and the experiment runner.
//!
//! A scenario names one or more file layouts of equal total size, a spec
//! template, optional per-config variations of it, a link policy and a
//! repetition count. Every layout × config pair is run `repetitions` times
//! on a loopback testbed; the runner returns one CSV row per run plus mean
//! and standard deviation rows per configuration.
//!
//! ```toml
//! name = "chunk-size-sweep"
//! repetitions = 4
//!
//! [policy]
//! bandwidth = 10485760   # bytes/s per data connection
//! latency_ms = 50        # added to every command round trip
//!
//! [[layouts]]
//! files = 1
//! total_bytes = 536870912
//!
//! [template]
//! chunked = true
//! integrity = "per_chunk"
//! concurrency = 4
//! parallelism = 2
//! depth = 1
//!
//! [[configs]]
//! name = "4MiB"
//! chunk_size = 4194304
//! ```

use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::faults::{CorruptionMode, InjectedFault, LinkPolicy};
use super::testbed::Testbed;
use crate::integrity::Algorithm;
use crate::orchestrator::{
    transfer, CsvRow, FilePair, IntegrityMode, Mismatch, TransferError, TransferReport,
    TransferSpec, CSV_HEADER,
};
use crate::planner::PlannerConfig;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("testbed: {0}")]
    Io(#[from] io::Error),
    #[error("run {run} of {config} failed: {source}")]
    Run {
        config: String,
        run: usize,
        source: TransferError,
    },
    #[error("run {run} of {config} delivered a file that differs from its source")]
    Corrupted { config: String, run: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub files: u64,
    /// Split as evenly as possible across the files.
    pub total_bytes: u64,
    #[serde(default)]
    pub name: Option<String>,
}

impl Layout {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            format!(
                "{}x{}",
                self.files,
                human(self.total_bytes / self.files.max(1))
            )
        })
    }

    pub fn sizes(&self) -> Vec<u64> {
        let base = self.total_bytes / self.files;
        let extra = self.total_bytes % self.files;
        (0..self.files)
            .map(|i| base + u64::from(i < extra))
            .collect()
    }
}

fn human(bytes: u64) -> String {
    const MIB: u64 = 1 << 20;
    if bytes >= MIB && bytes.is_multiple_of(MIB) {
        format!("{}MiB", bytes / MIB)
    } else if bytes >= MIB {
        format!("{:.1}MiB", bytes as f64 / MIB as f64)
    } else {
        format!("{bytes}B")
    }
}

fn yes() -> bool {
    true
}

fn default_integrity() -> IntegrityMode {
    IntegrityMode::PerChunk
}

fn default_retry_limit() -> u32 {
    crate::orchestrator::DEFAULT_RETRY_LIMIT
}

fn default_algo() -> Algorithm {
    Algorithm::Md5
}

/// Transfer settings shared by every config of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecTemplate {
    #[serde(default = "yes")]
    pub chunked: bool,
    #[serde(default = "default_integrity")]
    pub integrity: IntegrityMode,
    #[serde(default)]
    pub chunk_size: Option<u64>,
    #[serde(default)]
    pub concurrency: Option<u32>,
    #[serde(default)]
    pub parallelism: Option<u32>,
    #[serde(default)]
    pub depth: Option<u32>,
    #[serde(default)]
    pub s_min: Option<u64>,
    #[serde(default)]
    pub s_max: Option<u64>,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_algo")]
    pub algo: Algorithm,
}

impl Default for SpecTemplate {
    fn default() -> Self {
        SpecTemplate {
            chunked: true,
            integrity: default_integrity(),
            chunk_size: None,
            concurrency: None,
            parallelism: None,
            depth: None,
            s_min: None,
            s_max: None,
            retry_limit: default_retry_limit(),
            algo: default_algo(),
        }
    }
}

/// A named variation of the template. Unset fields keep the template's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub chunked: Option<bool>,
    #[serde(default)]
    pub integrity: Option<IntegrityMode>,
    #[serde(default)]
    pub chunk_size: Option<u64>,
    #[serde(default)]
    pub concurrency: Option<u32>,
    #[serde(default)]
    pub parallelism: Option<u32>,
    #[serde(default)]
    pub depth: Option<u32>,
}

impl Variant {
    pub fn apply(&self, t: &SpecTemplate) -> SpecTemplate {
        SpecTemplate {
            chunked: self.chunked.unwrap_or(t.chunked),
            integrity: self.integrity.unwrap_or(t.integrity),
            chunk_size: self.chunk_size.or(t.chunk_size),
            concurrency: self.concurrency.or(t.concurrency),
            parallelism: self.parallelism.or(t.parallelism),
            depth: self.depth.or(t.depth),
            ..t.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "one")]
    pub repetitions: usize,
    #[serde(default)]
    pub policy: LinkPolicy,
    pub layouts: Vec<Layout>,
    #[serde(default)]
    pub template: SpecTemplate,
    /// Variations to compare; an empty list runs the template alone.
    #[serde(default)]
    pub configs: Vec<Variant>,
    /// Seed for the generated file contents.
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, ExperimentError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario, ExperimentError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Invalid(m));
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if self.layouts.is_empty() {
            return bad("at least one layout is required".into());
        }
        if self.layouts.iter().any(|l| l.files == 0) {
            return bad("a layout needs at least one file".into());
        }
        let total = self.layouts[0].total_bytes;
        if self.layouts.iter().any(|l| l.total_bytes != total) {
            return bad("compared layouts must move the same total bytes".into());
        }
        self.policy
            .validate()
            .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
        for v in self.variants() {
            let spec = v.1.to_spec(
                crate::orchestrator::Endpoint::default(),
                Default::default(),
                vec![FilePair::new("a", "a")],
            );
            spec.validate()
                .map_err(|e| ExperimentError::Invalid(format!("config {}: {e}", v.0)))?;
        }
        Ok(())
    }

    /// (label, settings) for every config, the bare template if none.
    pub fn variants(&self) -> Vec<(String, SpecTemplate)> {
        if self.configs.is_empty() {
            return vec![("default".into(), self.template.clone())];
        }
        self.configs
            .iter()
            .map(|v| (v.name.clone(), v.apply(&self.template)))
            .collect()
    }
}

impl SpecTemplate {
    pub fn to_spec(
        &self,
        source: crate::orchestrator::Endpoint,
        destination: crate::orchestrator::Endpoint,
        files: Vec<FilePair>,
    ) -> TransferSpec {
        let d = PlannerConfig::default();
        let mut spec = TransferSpec::new(source, destination, files);
        spec.chunked = self.chunked;
        spec.integrity = self.integrity;
        spec.retry_limit = self.retry_limit;
        spec.algo = self.algo;
        spec.planner = PlannerConfig {
            chunk_size_override: self.chunk_size,
            concurrency: self.concurrency.unwrap_or(d.concurrency),
            parallelism: self.parallelism.unwrap_or(d.parallelism),
            pipeline_depth: self.depth.unwrap_or(d.pipeline_depth),
            s_min: self.s_min.unwrap_or(d.s_min),
            s_max: self.s_max.unwrap_or(d.s_max),
        };
        spec
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: String,
    pub run: usize,
    pub report: TransferReport,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentResult {
    pub scenario: String,
    /// Config labels in the order they were defined.
    pub configs: Vec<String>,
    pub runs: Vec<RunRecord>,
    pub injected: Vec<InjectedFault>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(xs: &[f64]) -> Stats {
    let n = xs.len();
    if n == 0 {
        return Stats {
            mean: 0.0,
            std: 0.0,
            n,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Stats {
        mean,
        std: var.sqrt(),
        n,
    }
}

impl ExperimentResult {
    pub fn reports<'a>(&'a self, config: &'a str) -> impl Iterator<Item = &'a TransferReport> + 'a {
        self.runs
            .iter()
            .filter(move |r| r.config == config)
            .map(|r| &r.report)
    }

    pub fn throughput(&self, config: &str) -> Stats {
        let xs: Vec<f64> = self.reports(config).map(|r| r.throughput_bps).collect();
        mean_std(&xs)
    }

    pub fn rows(&self) -> Vec<CsvRow> {
        self.runs
            .iter()
            .map(|r| CsvRow::from_report(&self.scenario, &r.config, r.run, &r.report))
            .collect()
    }

    /// Mean and standard deviation rows, two per config.
    pub fn summary_rows(&self) -> Vec<CsvRow> {
        let mut out = Vec::new();
        for config in &self.configs {
            let pick = |f: fn(&TransferReport) -> f64| -> Stats {
                mean_std(&self.reports(config).map(f).collect::<Vec<_>>())
            };
            let cols = [
                pick(|r| r.throughput_bps),
                pick(|r| r.transfer_s),
                pick(|r| r.integrity_s),
                pick(|r| r.retries as f64),
            ];
            for (label, get) in [("mean", 0), ("std", 1)] {
                let v = |s: &Stats| if get == 0 { s.mean } else { s.std };
                out.push(CsvRow {
                    scenario: self.scenario.clone(),
                    config: config.clone(),
                    run: label.into(),
                    throughput_bps: v(&cols[0]),
                    transfer_s: v(&cols[1]),
                    integrity_s: v(&cols[2]),
                    retries: v(&cols[3]),
                });
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for row in self.rows().iter().chain(&self.summary_rows()) {
            writeln!(out, "{}", row.to_line())?;
        }
        Ok(())
    }

    pub fn mismatches(&self) -> Vec<Mismatch> {
        self.runs
            .iter()
            .flat_map(|r| r.report.mismatches.iter().cloned())
            .collect()
    }
}

/// Runs every configuration of `scenario` on loopback agents whose
/// sandboxes live under `workdir` (the system temp dir if `None`).
/// Repetitions run serially, cycling through the configs on each pass.
pub fn run_experiment(
    scenario: &Scenario,
    workdir: Option<&Path>,
) -> Result<ExperimentResult, ExperimentError> {
    scenario.validate()?;
    let variants = scenario.variants();
    let multi_layout = scenario.layouts.len() > 1;
    let mut result = ExperimentResult {
        scenario: scenario.name.clone(),
        ..Default::default()
    };
    for layout in &scenario.layouts {
        for (name, _) in &variants {
            result
                .configs
                .push(label(multi_layout, layout, name, variants.len()));
        }
    }
    let tmp = std::env::temp_dir();
    let parent = workdir.unwrap_or(&tmp);
    for layout in &scenario.layouts {
        let tb = Testbed::in_dir(Some(scenario.policy.clone()), parent)?;
        let pairs: Vec<FilePair> = layout
            .sizes()
            .iter()
            .enumerate()
            .map(|(i, &size)| {
                let name = format!("f{i:03}.bin");
                tb.write_random(&name, size, scenario.seed.wrapping_add(i as u64))
                    .map(|()| FilePair::new(name.clone(), name))
            })
            .collect::<io::Result<_>>()?;
        for run in 0..scenario.repetitions {
            for (name, template) in &variants {
                let config = label(multi_layout, layout, name, variants.len());
                for p in &pairs {
                    let _ = std::fs::remove_file(tb.destination_path(&p.destination));
                }
                let spec = template.to_spec(
                    crate::orchestrator::Endpoint::new(tb.source.addr().to_string(), tb.token()),
                    crate::orchestrator::Endpoint::new(
                        tb.destination.addr().to_string(),
                        tb.token(),
                    ),
                    pairs.clone(),
                );
                log::info!("{}: {config} run {run}", scenario.name);
                let report =
                    transfer(&spec, &tb.options()).map_err(|source| ExperimentError::Run {
                        config: config.clone(),
                        run,
                        source,
                    })?;
                for p in &pairs {
                    if !tb.delivered(p)? {
                        return Err(ExperimentError::Corrupted { config, run });
                    }
                }
                result.runs.push(RunRecord {
                    config,
                    run,
                    report,
                });
            }
        }
        if let Some(f) = &tb.faults {
            result.injected.extend(f.injected());
        }
    }
    Ok(result)
}

fn label(multi_layout: bool, layout: &Layout, variant: &str, variants: usize) -> String {
    match (multi_layout, variants > 1 || variant != "default") {
        (true, true) => format!("{}/{variant}", layout.label()),
        (true, false) => layout.label(),
        (false, _) => variant.to_string(),
    }
}

/// Injected faults paired with the mismatches that caught them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorruptionLedger {
    pub detected: Vec<(InjectedFault, Mismatch)>,
    /// Injected but never reported as a mismatch: a silent pass.
    pub undetected: Vec<InjectedFault>,
    /// Reported mismatches with no injected cause.
    pub spurious: Vec<Mismatch>,
}

impl CorruptionLedger {
    /// Detected set equals injected set.
    pub fn complete(&self) -> bool {
        self.undetected.is_empty() && self.spurious.is_empty()
    }
}

/// Matches every injected fault to a mismatch on the same file whose
/// checked range contains the flipped byte, one to one.
pub fn corruption_report(injected: &[InjectedFault], mismatches: &[Mismatch]) -> CorruptionLedger {
    let mut ledger = CorruptionLedger::default();
    let mut left: Vec<Option<&Mismatch>> = mismatches.iter().map(Some).collect();
    for fault in injected {
        let hit = left.iter_mut().find(|m| {
            m.is_some_and(|m| {
                let path = match fault.mode {
                    CorruptionMode::InFlight => &m.source,
                    CorruptionMode::AtRestBeforeReread => &m.destination,
                };
                *path == fault.path && m.offset <= fault.byte && fault.byte < m.offset + m.length
            })
        });
        match hit {
            Some(slot) => ledger
                .detected
                .push((fault.clone(), slot.take().unwrap().clone())),
            None => ledger.undetected.push(fault.clone()),
        }
    }
    ledger.spurious = left.into_iter().flatten().cloned().collect();
    ledger
}
