//! Latency measurement, power-log ingestion, energy and report rendering.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use chrono::{DateTime, NaiveDateTime};

use crate::error::{Error, Result};
use crate::executor::{execute_single, KernelChoice};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Test-set size used for energy figures unless the caller overrides it.
pub const DEFAULT_IMAGES: usize = 1525;

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    pub warmup: usize,
    pub iters: usize,
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
    /// CRC-32 of the output bytes, identical across iterations.
    pub output_hash: u32,
    /// Whether kernels were allowed to use more than one thread.
    pub parallel: bool,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: Vec<f64>, warmup: usize, output_hash: u32, parallel: bool) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::invalid("need at least one timed iteration"));
        }
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median_ms = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        // Nearest-rank percentile.
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Ok(LatencyStats {
            warmup,
            iters: n,
            mean_ms: sorted.iter().sum::<f64>() / n as f64,
            median_ms,
            p95_ms: sorted[rank - 1],
            samples_ms,
            output_hash,
            parallel,
        })
    }

    pub fn images_per_second(&self) -> f64 {
        1000.0 / self.median_ms
    }
}

fn output_hash(outputs: &crate::executor::Outputs) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for t in outputs.tensors() {
        h.update(&t.payload_bytes());
    }
    h.finalize()
}

/// Times `iters` executions after `warmup` untimed ones. Unless `parallel`
/// is set, everything runs on a single worker thread.
pub fn time_inference(
    g: &Graph,
    input: &Tensor,
    warmup: usize,
    iters: usize,
    choice: Option<&KernelChoice>,
    parallel: bool,
) -> Result<LatencyStats> {
    if iters == 0 {
        return Err(Error::invalid("iters must be at least 1"));
    }
    let threads = if parallel { 0 } else { 1 };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        for _ in 0..warmup {
            execute_single(g, input, choice)?;
        }
        let mut samples = Vec::with_capacity(iters);
        let mut hash = None;
        for _ in 0..iters {
            let t = Instant::now();
            let out = execute_single(g, input, choice)?;
            samples.push(t.elapsed().as_secs_f64() * 1e3);
            let h = output_hash(&out);
            if *hash.get_or_insert(h) != h {
                return Err(Error::invalid("outputs differ between timed iterations"));
            }
        }
        LatencyStats::from_samples(samples, warmup, hash.unwrap(), parallel)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerFormat {
    /// `ISO8601 timestamp,power draw in W`
    GpuSmiCsv,
    /// `epoch_ms,current_mA,voltage_mV,power_mW`
    InaSysfs,
}

impl PowerFormat {
    pub fn name(self) -> &'static str {
        match self {
            PowerFormat::GpuSmiCsv => "gpu-smi-csv",
            PowerFormat::InaSysfs => "ina-sysfs",
        }
    }
}

impl fmt::Display for PowerFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PowerFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gpu-smi-csv" => Ok(PowerFormat::GpuSmiCsv),
            "ina-sysfs" => Ok(PowerFormat::InaSysfs),
            _ => Err(Error::invalid(format!("unknown power log format `{s}` (gpu-smi-csv, ina-sysfs)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerSample {
    pub t: f64,
    pub watts: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerTrace {
    pub format: PowerFormat,
    pub samples: Vec<PowerSample>,
    /// Lines that did not parse, had negative power or went back in time.
    pub skipped: usize,
}

fn parse_timestamp(s: &str) -> Option<f64> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.timestamp_micros() as f64 / 1e6);
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y/%m/%d %H:%M:%S%.f"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|t| t.and_utc().timestamp_micros() as f64 / 1e6)
}

fn parse_line(format: PowerFormat, line: &str) -> Option<PowerSample> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    let sample = match format {
        PowerFormat::GpuSmiCsv => {
            let [ts, w] = fields.as_slice() else { return None };
            let w = w.strip_suffix('W').unwrap_or(w).trim();
            PowerSample {
                t: parse_timestamp(ts)?,
                watts: w.parse().ok()?,
            }
        }
        PowerFormat::InaSysfs => {
            let [ms, ma, mv, mw] = fields.as_slice() else { return None };
            let t: f64 = ms.parse().ok()?;
            let _: f64 = ma.parse().ok()?;
            let _: f64 = mv.parse().ok()?;
            let mw: f64 = mw.parse().ok()?;
            PowerSample {
                t: t / 1000.0,
                watts: mw / 1000.0,
            }
        }
    };
    (sample.t.is_finite() && sample.watts.is_finite() && sample.watts >= 0.0).then_some(sample)
}

pub fn parse_power_text(format: PowerFormat, text: &str) -> Result<PowerTrace> {
    let mut samples: Vec<PowerSample> = Vec::new();
    let mut skipped = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(format, line) {
            Some(s) if samples.last().is_none_or(|p| p.t <= s.t) => samples.push(s),
            _ => skipped += 1,
        }
    }
    if samples.is_empty() {
        return Err(Error::PowerLog(format!("no valid {format} samples ({skipped} lines skipped)")));
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} malformed {format} lines");
    }
    Ok(PowerTrace {
        format,
        samples,
        skipped,
    })
}

pub fn parse_power_log(format: PowerFormat, path: impl AsRef<Path>) -> Result<PowerTrace> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_power_text(format, &text)
}

/// Time-weighted mean power over samples inside `window` (inclusive).
pub fn average_power(trace: &PowerTrace, window: Option<(f64, f64)>) -> Result<f64> {
    let s: Vec<PowerSample> = trace
        .samples
        .iter()
        .copied()
        .filter(|p| window.is_none_or(|(a, b)| p.t >= a && p.t <= b))
        .collect();
    match s.as_slice() {
        [] => Err(Error::PowerLog("no power samples inside the window".into())),
        [one] => Ok(one.watts),
        [first, ..] if s.iter().all(|p| p.watts == first.watts) => Ok(first.watts),
        [first, .., last] if last.t == first.t => Ok(s.iter().map(|p| p.watts).sum::<f64>() / s.len() as f64),
        [first, .., last] => {
            let area: f64 = s.windows(2).map(|w| (w[1].t - w[0].t) * (w[0].watts + w[1].watts) / 2.0).sum();
            Ok(area / (last.t - first.t))
        }
    }
}

/// Energy in watt-hours for `n_images` inferences of `inference_ms` each at `power_w`.
pub fn energy_wh(n_images: usize, inference_ms: f64, power_w: f64) -> f64 {
    n_images as f64 * inference_ms * power_w / 3.6e6
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub model: String,
    pub variant: String,
    pub passes: String,
    pub size_mb: f64,
    pub latency: LatencyStats,
    pub n_images: usize,
    pub power_w: f64,
    pub energy_wh: f64,
    pub img_per_s: f64,
    pub img_per_wh: f64,
}

impl BenchReport {
    pub fn new(
        model: impl Into<String>,
        variant: impl Into<String>,
        passes: impl Into<String>,
        size_mb: f64,
        latency: LatencyStats,
        n_images: usize,
        power_w: f64,
    ) -> Self {
        let energy = energy_wh(n_images, latency.median_ms, power_w);
        BenchReport {
            model: model.into(),
            variant: variant.into(),
            passes: passes.into(),
            size_mb,
            img_per_s: latency.images_per_second(),
            img_per_wh: n_images as f64 / energy,
            energy_wh: energy,
            latency,
            n_images,
            power_w,
        }
    }

    pub fn row(&self) -> ReportRow {
        ReportRow {
            model: self.model.clone(),
            passes: self.passes.clone(),
            size_mb: self.size_mb,
            median_ms: self.latency.median_ms,
            power_w: self.power_w,
            energy_wh: self.energy_wh,
            img_per_s: self.img_per_s,
            img_per_wh: self.img_per_wh,
        }
    }
}

/// One rendered report line, in column order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub passes: String,
    pub size_mb: f64,
    pub median_ms: f64,
    pub power_w: f64,
    pub energy_wh: f64,
    pub img_per_s: f64,
    pub img_per_wh: f64,
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "model",
    "passes",
    "size_MB",
    "median_ms",
    "power_W",
    "energy_Wh",
    "img_per_s",
    "img_per_Wh",
];

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

impl ReportRow {
    /// Largest relative disagreement between the derived columns and values
    /// recomputed from `median_ms`, `power_W` and `n_images`.
    pub fn derived_error(&self, n_images: usize) -> f64 {
        let energy = energy_wh(n_images, self.median_ms, self.power_w);
        [
            rel_err(self.energy_wh, energy),
            rel_err(self.img_per_s, 1000.0 / self.median_ms),
            rel_err(self.img_per_wh, n_images as f64 / energy),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    fn values(&self) -> [String; 8] {
        [
            self.model.clone(),
            self.passes.clone(),
            self.size_mb.to_string(),
            self.median_ms.to_string(),
            self.power_w.to_string(),
            self.energy_wh.to_string(),
            self.img_per_s.to_string(),
            self.img_per_wh.to_string(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::invalid(format!("unknown report format `{s}` (text, csv, markdown)"))),
        }
    }
}

/// CSV keeps full float precision so derived columns can be rechecked.
pub fn emit_report(reports: &[BenchReport], format: ReportFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to emit"));
    }
    let rows: Vec<ReportRow> = reports.iter().map(BenchReport::row).collect();
    Ok(match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(REPORT_COLUMNS)?;
            for r in &rows {
                w.write_record(r.values())?;
            }
            String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?).expect("utf-8")
        }
        ReportFormat::Markdown => {
            let mut s = format!("| {} |\n|{}\n", REPORT_COLUMNS.join(" | "), "---|".repeat(REPORT_COLUMNS.len()));
            for r in &rows {
                s += &format!(
                    "| {} | {} | {:.3} | {:.3} | {:.2} | {:.4} | {:.2} | {:.1} |\n",
                    r.model, r.passes, r.size_mb, r.median_ms, r.power_w, r.energy_wh, r.img_per_s, r.img_per_wh
                );
            }
            s
        }
        ReportFormat::Text => {
            let mut s = format!(
                "{:<10} {:<24} {:>10} {:>10} {:>8} {:>10} {:>10} {:>12}\n",
                REPORT_COLUMNS[0],
                REPORT_COLUMNS[1],
                REPORT_COLUMNS[2],
                REPORT_COLUMNS[3],
                REPORT_COLUMNS[4],
                REPORT_COLUMNS[5],
                REPORT_COLUMNS[6],
                REPORT_COLUMNS[7]
            );
            for r in &rows {
                s += &format!(
                    "{:<10} {:<24} {:>10.3} {:>10.3} {:>8.2} {:>10.4} {:>10.2} {:>12.1}\n",
                    r.model, r.passes, r.size_mb, r.median_ms, r.power_w, r.energy_wh, r.img_per_s, r.img_per_wh
                );
            }
            s
        }
    })
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != REPORT_COLUMNS {
        return Err(Error::invalid(format!("unexpected report columns {header:?}")));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::invalid(format!("column {}: bad number `{}`", REPORT_COLUMNS[i], &rec[i])))
            };
            Ok(ReportRow {
                model: rec[0].to_string(),
                passes: rec[1].to_string(),
                size_mb: num(2)?,
                median_ms: num(3)?,
                power_w: num(4)?,
                energy_wh: num(5)?,
                img_per_s: num(6)?,
                img_per_wh: num(7)?,
            })
        })
        .collect()
}
