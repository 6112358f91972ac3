// SPDX-License-Identifier: MIT OR Apache-2.0

//! CSV and metadata writers for reports.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::engine::{PairedReport, Report, RunMetadata};
use crate::window::WindowSpec;

pub const REPORT_HEADER: &str = "window_kind,window_size,cadence,window_end,metric,value,support";

pub const PAIRED_HEADER: &str = "window_kind,window_size,cadence,window_end,metric,\
true_value,observed_value,difference,true_support,observed_support,labeled_support";

fn cell(value: Option<f64>) -> String {
    value.map_or_else(String::new, |v| v.to_string())
}

fn spec_cells(spec: &WindowSpec) -> String {
    format!("{},{},{}", spec.kind.name(), spec.kind.size_label(), spec.cadence)
}

pub fn write_report_csv<W: Write>(mut out: W, report: &Report) -> io::Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for (spec, p) in report.rows() {
        writeln!(
            out,
            "{},{},{},{},{}",
            spec_cells(spec),
            p.window_end,
            p.metric,
            cell(p.value),
            p.support
        )?;
    }
    out.flush()
}

pub fn write_paired_csv<W: Write>(mut out: W, report: &PairedReport) -> io::Result<()> {
    writeln!(out, "{PAIRED_HEADER}")?;
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            spec_cells(&r.spec),
            r.window_end,
            r.metric,
            cell(r.true_value),
            cell(r.observed_value),
            cell(r.difference()),
            r.true_support,
            r.observed_support,
            r.labeled_support
        )?;
    }
    out.flush()
}

/// `dir/report.csv` -> `dir/report.meta.json`.
pub fn metadata_path(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
    output.with_file_name(format!("{stem}.meta.json"))
}

pub fn write_metadata<W: Write>(mut out: W, metadata: &RunMetadata) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut out, metadata)?;
    writeln!(out)?;
    out.flush()
}

fn create(path: &Path) -> io::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    File::create(path).map(BufWriter::new)
}

/// Writes the CSV at `output` and its metadata beside it. Returns the
/// metadata path.
pub fn save_report(output: &Path, report: &Report) -> io::Result<PathBuf> {
    write_report_csv(create(output)?, report)?;
    let meta = metadata_path(output);
    write_metadata(create(&meta)?, &report.metadata)?;
    Ok(meta)
}

pub fn save_paired(output: &Path, report: &PairedReport) -> io::Result<PathBuf> {
    write_paired_csv(create(output)?, report)?;
    let meta = metadata_path(output);
    write_metadata(create(&meta)?, &report.metadata)?;
    Ok(meta)
}
